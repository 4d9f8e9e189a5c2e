//! Coordinate regression `(x, y) -> RGB` with pyramid, random-Fourier-feature and plain MLP models.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, JetLayout, Tape, Tensor};
use crate::decoder::{Architecture, DecoderConfig, DecoderParams, RffEmbedding};
use crate::diagnostics::psnr;
use crate::error::{Error, Result};
use crate::field::{BeignetModel, DomainMap, ModelConfig};
use crate::format::write_atomic;
use crate::pyramid::PyramidConfig;
use crate::training::Adam;

/// RGB image with values in `[0, 1]`, pixels row-major (`height * width x 3`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTarget {
    pub height: usize,
    pub width: usize,
    pub pixels: Tensor,
}

impl ImageTarget {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 || height == 0 || width == 0 {
            return Err(Error::Shape(format!("{} values for a {height}x{width} RGB image", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels: Tensor::new(height * width, 3, data) })
    }

    /// Parses binary (`P6`) or ASCII (`P3`) portable pixmaps.
    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PPM header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = token()?;
        let num = |s: String| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM number `{s}`")));
        let width = num(token()?)?;
        let height = num(token()?)?;
        let maxval = num(token()?)?;
        if maxval == 0 || maxval > 65535 {
            return Err(Error::Format(format!("PPM maxval {maxval}")));
        }
        let n = width * height * 3;
        let scale = 1.0 / maxval as f64;
        let data: Vec<f64> = match magic.as_str() {
            "P6" => {
                let body = &bytes[(pos + 1).min(bytes.len())..];
                let wide = maxval > 255;
                let need = if wide { 2 * n } else { n };
                if body.len() < need {
                    return Err(Error::Format(format!("PPM body has {} bytes, {need} expected", body.len())));
                }
                if wide {
                    body[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale).collect()
                } else {
                    body[..n].iter().map(|&b| b as f64 * scale).collect()
                }
            }
            "P3" => (0..n).map(|_| token().and_then(num).map(|v| v as f64 * scale)).collect::<Result<_>>()?,
            other => return Err(Error::Format(format!("unsupported pixmap type `{other}`"))),
        };
        Self::new(height, width, data)
    }

    /// Binary 8-bit pixmap.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_ppm(&crate::format::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_ppm())
    }

    /// Deterministic multi-frequency test pattern.
    pub fn test_pattern(size: usize) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for i in 0..size {
            for j in 0..size {
                let (y, x) = (i as f64 / size as f64, j as f64 / size as f64);
                let r2 = (x - 0.45).powi(2) + (y - 0.55).powi(2);
                let rings = (2.0 * PI * 9.0 * r2.sqrt()).sin();
                let arms = (5.0 * (y - 0.55).atan2(x - 0.45)).cos();
                let body = (-r2 / 0.04).exp();
                let stripes = (2.0 * PI * (3.0 * x + 7.0 * y)).sin();
                let edge = if x + 0.6 * y > 0.8 { 1.0 } else { 0.0 };
                let fine = (2.0 * PI * 17.0 * x).sin() * (2.0 * PI * 13.0 * y).cos();
                let c = |v: f64| v.clamp(0.0, 1.0);
                data.push(c(0.45 + 0.3 * body * (1.0 + 0.5 * arms) + 0.1 * rings + 0.1 * edge));
                data.push(c(0.35 + 0.2 * stripes * (1.0 - body) + 0.15 * body * arms + 0.08 * fine));
                data.push(c(0.5 - 0.25 * body + 0.15 * edge + 0.1 * (2.0 * PI * 5.0 * y).cos()));
            }
        }
        Self::new(size, size, data).expect("pattern stays in range")
    }

    pub fn constant(size: usize, rgb: [f64; 3]) -> Self {
        Self::new(size, size, (0..size * size).flat_map(|_| rgb).collect()).expect("valid color")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ImageModelKind {
    Beignet,
    Rff { sigma: f64 },
    Vanilla,
}

impl ImageModelKind {
    pub fn parse(s: &str, sigma: f64) -> Result<Self> {
        match s {
            "beignet" => Ok(Self::Beignet),
            "rff" => Ok(Self::Rff { sigma }),
            "vanilla" => Ok(Self::Vanilla),
            _ => Err(Error::config("model", format!("unknown image model `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ImageModel {
    /// 2D pyramid over the unit torus with a small ReLU decoder.
    Beignet(BeignetModel),
    /// MLP on raw coordinates, optionally followed by fixed Fourier features `[x, cos 2 pi Bx, sin 2 pi Bx]`.
    Mlp { embedding: Option<RffEmbedding>, decoder: DecoderParams },
}

fn mlp_config(input_dim: usize, width: usize, depth: usize) -> DecoderConfig {
    DecoderConfig {
        architecture: Architecture::VanillaMlp,
        width,
        depth,
        activation: Activation::Relu,
        weight_fact: None,
        input_dim,
        output_dim: 3,
    }
}

/// Pyramid levels `2, 4, ..., size` with two features each and a 64-wide, two-hidden-layer decoder.
pub fn beignet_image_config(size: usize) -> ModelConfig {
    let levels = size.trailing_zeros() as usize;
    let mut pyramid = PyramidConfig::dyadic(2, levels, 2, 2, 1);
    pyramid.init_noise = 0.1;
    ModelConfig { pyramid, decoder: mlp_config(0, 64, 2), use_coords: false, time_input: false }.consistent()
}

impl ImageModel {
    pub fn init(kind: ImageModelKind, size: usize, seed: u64) -> Result<Self> {
        if !size.is_power_of_two() || size < 2 {
            return Err(Error::UnsupportedSize { axis: 0, size });
        }
        match kind {
            ImageModelKind::Beignet => Ok(Self::Beignet(BeignetModel::init(beignet_image_config(size), DomainMap::unit(2), seed)?)),
            ImageModelKind::Vanilla => Ok(Self::Mlp { embedding: None, decoder: DecoderParams::init(mlp_config(2, 256, 3), seed)? }),
            ImageModelKind::Rff { sigma } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(4);
                let e = RffEmbedding::new(256, 2, sigma, &mut rng)?;
                let decoder = DecoderParams::init(mlp_config(2 + e.output_dim(), 256, 3), seed)?;
                Ok(Self::Mlp { embedding: Some(e), decoder })
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        match self {
            Self::Beignet(m) => m.tensors(),
            Self::Mlp { decoder, .. } => decoder.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Self::Beignet(m) => m.tensors_mut(),
            Self::Mlp { decoder, .. } => decoder.tensors_mut(),
        }
    }

    fn mlp_inputs(embedding: &Option<RffEmbedding>, h: usize, w: usize) -> Tensor {
        let mut rows = Vec::new();
        let mut cols = 0;
        for i in 0..h {
            for j in 0..w {
                let x = [j as f64 / w as f64, i as f64 / h as f64];
                let mut row = x.to_vec();
                if let Some(e) = embedding {
                    row.extend(e.embed(&[2.0 * PI * x[0], 2.0 * PI * x[1]]));
                }
                cols = row.len();
                rows.extend(row);
            }
        }
        Tensor::new(h * w, cols, rows)
    }

    /// Full-grid MSE on a tape, with gradients.
    pub fn loss_and_grad(&self, target: &ImageTarget) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let out = match self {
            Self::Beignet(m) => {
                self.check_beignet(target)?;
                let vars = m.tape_params(&mut tape);
                let slice = crate::pyramid::Slice { t: 0.0, shift: vec![0.0, 0.0] };
                m.grid_on_tape(&mut tape, &vars, &crate::field::DerivativeRequest::values(2), &[target.height, target.width], &[slice])?.0
            }
            Self::Mlp { embedding, decoder } => {
                let vars = decoder.tape_params(&mut tape);
                let x = tape.constant(Self::mlp_inputs(embedding, target.height, target.width));
                decoder.forward(&mut tape, &vars, x, &JetLayout::value_only(target.height * target.width))?
            }
        };
        let t = tape.constant(target.pixels.clone());
        let d = tape.sub(out, t);
        let sq = tape.square(d);
        let loss = tape.mean(sq);
        let v = tape.value(loss).data[0];
        Ok((v, tape.grad(loss)?))
    }

    fn check_beignet(&self, target: &ImageTarget) -> Result<()> {
        if !target.height.is_power_of_two() || !target.width.is_power_of_two() {
            return Err(Error::UnsupportedSize { axis: 0, size: target.height.max(target.width) });
        }
        Ok(())
    }

    /// Rendered image (`h * w x 3`), unclamped.
    pub fn render(&self, h: usize, w: usize) -> Result<Tensor> {
        match self {
            Self::Beignet(m) => m.values_on_grid(&[h, w], 0.0),
            Self::Mlp { embedding, decoder } => decoder.forward_values(&Self::mlp_inputs(embedding, h, w)),
        }
    }

    pub fn psnr(&self, target: &ImageTarget) -> Result<f64> {
        psnr(&self.render(target.height, target.width)?.data, &target.pixels.data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsnrPoint {
    pub step: usize,
    pub loss: f64,
    pub psnr: f64,
}

/// Adam on the full-grid MSE; PSNR logged every 100 steps and after the last step.
pub fn fit_image(kind: ImageModelKind, image: &ImageTarget, steps: usize, lr: f64, seed: u64) -> Result<(ImageModel, Vec<PsnrPoint>)> {
    if image.height != image.width {
        return Err(Error::Shape(format!("{}x{} image; square images are supported", image.height, image.width)));
    }
    let mut model = ImageModel::init(kind, image.height, seed)?;
    let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(&shapes, 1e-8);
    let mut trace = Vec::new();
    for step in 0..steps {
        let (loss, grads) = model.loss_and_grad(image)?;
        if !loss.is_finite() {
            return Err(Error::PoisonedLoss(format!("image fit step {step}: loss {loss}")));
        }
        if step % 100 == 0 {
            trace.push(PsnrPoint { step, loss, psnr: model.psnr(image)? });
        }
        adam.update(&mut model.tensors_mut(), &grads, lr)?;
    }
    let (loss, _) = model.loss_and_grad(image)?;
    trace.push(PsnrPoint { step: steps, loss, psnr: model.psnr(image)? });
    Ok((model, trace))
}
