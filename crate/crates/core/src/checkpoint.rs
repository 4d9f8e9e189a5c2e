//! Checkpoint files: model parameters, optimizer moments, sampler state and step.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::decoder::{DecoderConfig, DecoderParams, RffEmbedding};
use crate::error::{Error, Result};
use crate::field::{BeignetModel, DomainMap, Inner, ModelConfig, ProfileAnsatz};
use crate::format;
use crate::image_fit::ImageModel;
use crate::pyramid::FourierPyramid;
use crate::training::{Adam, ProfileTrainer, TrainOutcome, Trainer, WindowedModel};

pub const MAGIC: &str = "SPINN-CKPT-1";

#[derive(Clone, Debug, PartialEq)]
pub enum SavedModel {
    Field(WindowedModel),
    Profile(ProfileAnsatz),
    Image(ImageModel),
}

impl SavedModel {
    fn tensors(&self) -> Vec<&Vec<f64>> {
        match self {
            Self::Field(w) => w.models.iter().flat_map(|m| m.tensors()).collect(),
            Self::Profile(a) => a.tensors(),
            Self::Image(m) => m.tensors(),
        }
    }
}

/// Position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte key.
    pub seed: String,
    pub stream: u64,
    /// Decimal word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format(format!("bad rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut key = [0u8; 32];
        for (i, k) in key.iter_mut().enumerate() {
            *k = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SavedModel,
    pub adam: Option<Adam>,
    pub rng: Option<RngState>,
    pub step: usize,
    /// Loss-term weights at save time.
    pub weights: Vec<f64>,
    pub run: Option<RunConfig>,
}

#[derive(Serialize, Deserialize)]
struct BeignetHeader {
    config: ModelConfig,
    domain: DomainMap,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

fn beignet_header(m: &BeignetModel) -> Value {
    serde_json::to_value(BeignetHeader { config: m.config.clone(), domain: m.domain.clone() }).expect("model header")
}

struct Blocks {
    blocks: std::vec::IntoIter<Vec<f64>>,
}

impl Blocks {
    fn take(&mut self, len: usize) -> Result<Vec<f64>> {
        let b = self.blocks.next().ok_or_else(|| Error::Format("checkpoint has too few blocks".into()))?;
        if b.len() != len {
            return Err(Error::Format(format!("block of {} values where {len} were expected", b.len())));
        }
        Ok(b)
    }

    fn fill(&mut self, tensors: Vec<&mut Vec<f64>>) -> Result<()> {
        for t in tensors {
            *t = self.take(t.len())?;
        }
        Ok(())
    }
}

fn decoder_from(config: DecoderConfig, blocks: &mut Blocks) -> Result<DecoderParams> {
    let mut d = DecoderParams::init(config, 0)?;
    blocks.fill(d.tensors_mut())?;
    Ok(d)
}

fn beignet_from(header: &Value, blocks: &mut Blocks) -> Result<BeignetModel> {
    let h: BeignetHeader = serde_json::from_value(header.clone()).map_err(|e| Error::Format(format!("model header: {e}")))?;
    let config = h.config;
    config.pyramid.validate()?;
    let levels = (0..config.pyramid.levels()).map(|l| blocks.take(config.pyramid.anchors * config.pyramid.level_len(l))).collect::<Result<Vec<_>>>()?;
    let pyramid = FourierPyramid::from_levels(config.pyramid.clone(), levels)?;
    let decoder = decoder_from(config.decoder.clone(), blocks)?;
    if h.domain.dims() != config.pyramid.dims {
        return Err(Error::Format("domain and pyramid disagree on dimension".into()));
    }
    Ok(BeignetModel { config, domain: h.domain, pyramid, decoder })
}

impl Checkpoint {
    pub fn from_trainer(tr: &Trainer, run: Option<RunConfig>) -> Self {
        Self::from_outcome_parts(WindowedModel { models: vec![tr.model.clone()] }, tr, run)
    }

    /// All window models with the optimizer and sampler state of the last window.
    pub fn from_outcome(out: &TrainOutcome, run: Option<RunConfig>) -> Self {
        Self::from_outcome_parts(out.model.clone(), &out.trainer, run)
    }

    fn from_outcome_parts(model: WindowedModel, tr: &Trainer, run: Option<RunConfig>) -> Self {
        Self {
            model: SavedModel::Field(model),
            adam: Some(tr.adam.clone()),
            rng: Some(RngState::capture(&tr.rng)),
            step: tr.step,
            weights: tr.weighting.weights.clone(),
            run,
        }
    }

    pub fn from_profile(tr: &ProfileTrainer, run: Option<RunConfig>) -> Self {
        Self {
            model: SavedModel::Profile(tr.ansatz.clone()),
            adam: Some(tr.adam.clone()),
            rng: Some(RngState::capture(&tr.rng)),
            step: tr.step,
            weights: Vec::new(),
            run,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blocks: Vec<&[f64]> = Vec::new();
        let model = match &self.model {
            SavedModel::Field(w) => json!({ "kind": "field", "models": w.models.iter().map(beignet_header).collect::<Vec<_>>() }),
            SavedModel::Profile(a) => {
                let inner = match &a.inner {
                    Inner::Beignet(m) => json!({ "kind": "beignet", "model": beignet_header(m) }),
                    Inner::Mlp(d) => json!({ "kind": "mlp", "decoder": d.config }),
                };
                json!({ "kind": "profile", "c": a.c, "lambda": a.lambda, "tail": a.tail, "exact_linear": a.exact_linear, "inner": inner })
            }
            SavedModel::Image(ImageModel::Beignet(m)) => json!({ "kind": "image_beignet", "model": beignet_header(m) }),
            SavedModel::Image(ImageModel::Mlp { embedding, decoder }) => {
                if let Some(e) = embedding {
                    blocks.push(&e.b);
                }
                let emb = embedding.as_ref().map(|e| json!({ "features": e.features, "dim": e.dim, "sigma": e.sigma }));
                json!({ "kind": "image_mlp", "embedding": emb, "decoder": decoder.config })
            }
        };
        blocks.extend(self.model.tensors().into_iter().map(|t| t.as_slice()));
        let adam = self.adam.as_ref().map(|a| {
            let n = a.m.len();
            blocks.extend(a.m.iter().map(|t| t.as_slice()));
            blocks.extend(a.v.iter().map(|t| t.as_slice()));
            json!({ "tensors": n, "state": AdamHeader { beta1: a.beta1, beta2: a.beta2, eps: a.eps, step: a.step } })
        });
        let header = json!({
            "model": model,
            "adam": adam,
            "rng": self.rng,
            "step": self.step,
            "weights": self.weights,
            "run": self.run,
        });
        format::encode(MAGIC, header, &blocks)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, blocks) = format::decode(MAGIC, bytes)?;
        let mut blocks = Blocks { blocks: blocks.into_iter() };
        let fmt = |what: &str| Error::Format(format!("checkpoint header: bad `{what}`"));
        let m = &header["model"];
        let model = match m["kind"].as_str() {
            Some("field") => {
                let hs = m["models"].as_array().filter(|a| !a.is_empty()).ok_or_else(|| fmt("models"))?;
                SavedModel::Field(WindowedModel { models: hs.iter().map(|h| beignet_from(h, &mut blocks)).collect::<Result<_>>()? })
            }
            Some("profile") => {
                let inner = match m["inner"]["kind"].as_str() {
                    Some("beignet") => Inner::Beignet(beignet_from(&m["inner"]["model"], &mut blocks)?),
                    Some("mlp") => {
                        let cfg: DecoderConfig = serde_json::from_value(m["inner"]["decoder"].clone()).map_err(|_| fmt("inner.decoder"))?;
                        Inner::Mlp(decoder_from(cfg, &mut blocks)?)
                    }
                    _ => return Err(fmt("inner.kind")),
                };
                SavedModel::Profile(ProfileAnsatz {
                    c: m["c"].as_f64().ok_or_else(|| fmt("c"))?,
                    lambda: m["lambda"].as_f64().ok_or_else(|| fmt("lambda"))?,
                    inner,
                    tail: m["tail"].as_bool().ok_or_else(|| fmt("tail"))?,
                    exact_linear: m["exact_linear"].as_bool().ok_or_else(|| fmt("exact_linear"))?,
                })
            }
            Some("image_beignet") => SavedModel::Image(ImageModel::Beignet(beignet_from(&m["model"], &mut blocks)?)),
            Some("image_mlp") => {
                let embedding = match &m["embedding"] {
                    Value::Null => None,
                    e => {
                        let features = e["features"].as_u64().ok_or_else(|| fmt("embedding.features"))? as usize;
                        let dim = e["dim"].as_u64().ok_or_else(|| fmt("embedding.dim"))? as usize;
                        let sigma = e["sigma"].as_f64().ok_or_else(|| fmt("embedding.sigma"))?;
                        Some(RffEmbedding { b: blocks.take(features * dim)?, features, dim, sigma })
                    }
                };
                let cfg: DecoderConfig = serde_json::from_value(m["decoder"].clone()).map_err(|_| fmt("decoder"))?;
                SavedModel::Image(ImageModel::Mlp { embedding, decoder: decoder_from(cfg, &mut blocks)? })
            }
            _ => return Err(fmt("model.kind")),
        };
        let adam = match &header["adam"] {
            Value::Null => None,
            a => {
                let st: AdamHeader = serde_json::from_value(a["state"].clone()).map_err(|_| fmt("adam.state"))?;
                let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
                if a["tensors"].as_u64() != Some(shapes.len() as u64) {
                    return Err(fmt("adam.tensors"));
                }
                let m = shapes.iter().map(|&n| blocks.take(n)).collect::<Result<Vec<_>>>()?;
                let v = shapes.iter().map(|&n| blocks.take(n)).collect::<Result<Vec<_>>>()?;
                Some(Adam { beta1: st.beta1, beta2: st.beta2, eps: st.eps, step: st.step, m, v })
            }
        };
        if blocks.blocks.next().is_some() {
            return Err(Error::Format("checkpoint has unused blocks".into()));
        }
        let rng: Option<RngState> = serde_json::from_value(header["rng"].clone()).map_err(|_| fmt("rng"))?;
        if let Some(r) = &rng {
            r.restore()?;
        }
        Ok(Self {
            model,
            adam,
            rng,
            step: header["step"].as_u64().ok_or_else(|| fmt("step"))? as usize,
            weights: serde_json::from_value(header["weights"].clone()).map_err(|_| fmt("weights"))?,
            run: serde_json::from_value(header["run"].clone()).map_err(|e| Error::Format(format!("checkpoint run config: {e}")))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&format::read(path)?)
    }
}
