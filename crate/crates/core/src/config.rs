//! Declarative run configuration (JSON) and built-in presets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::decoder::{Architecture, DecoderConfig, DecoderParams, WeightFact};
use crate::error::{Error, Result};
use crate::field::{BeignetModel, DomainMap, Inner, ModelConfig, ProfileAnsatz};
use crate::problems::{ProblemKind, ProblemSpec};
use crate::pyramid::PyramidConfig;
use crate::training::{DecayKind, ProfileTrainConfig, ResidualPath, Schedule, ShiftMode, TrainConfig};

pub const BURGERS: &str = "burgers_profile";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `allen_cahn`, `kdv`, `ginzburg_landau`, `gray_scott` or `burgers_profile`.
    pub problem: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    /// Reference solution path, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    /// Absent for the coordinate-MLP profile baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pyramid: Option<PyramidSection>,
    pub mlp: MlpSection,
    pub optim: OptimSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weighting: Option<WeightingSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<ProfileSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidSection {
    pub num_scales: usize,
    pub num_features: usize,
    /// Coarsest spatial grid.
    pub min_grid: usize,
    pub resize_scale: f64,
    /// Temporal bins; zero for a time-independent pyramid.
    pub t_min_grid: usize,
    pub t_resize_scale: f64,
    pub use_coords: bool,
    pub init_noise: f64,
    pub global_precond: f64,
    pub per_level_precond: f64,
    #[serde(rename = "spectral_precond_K")]
    pub spectral_precond_k: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSection {
    pub architecture: Architecture,
    pub width: usize,
    pub depth: usize,
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_fact: Option<WeightFact>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub max_steps: usize,
    pub lr: f64,
    pub decay: DecayKind,
    pub decay_steps: usize,
    pub decay_rate: f64,
    pub warmup_steps: usize,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(rename = "Mx")]
    pub mx: usize,
    #[serde(rename = "My", default, skip_serializing_if = "Option::is_none")]
    pub my: Option<usize>,
    #[serde(rename = "Mt")]
    pub mt: usize,
    /// Initial-condition grid per axis.
    pub ic_grid: usize,
    pub shift_mode: ShiftMode,
    pub residual_path: ResidualPath,
    pub windows: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_mode: Option<String>,
    pub log_every: usize,
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightingSection {
    /// `grad_norm` or `fixed`.
    pub scheme: String,
    pub update_every: usize,
    pub init_weights: BTreeMap<String, f64>,
    pub causal_tol: f64,
    pub chunks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    pub c: f64,
    pub lambda: f64,
    pub tail: bool,
    pub batch: usize,
    pub log_every: usize,
    pub report_every: usize,
}

/// Parses JSON, reporting the key path of the first offending field.
pub fn parse(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path.is_empty() || path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn is_profile(&self) -> bool {
        self.problem == BURGERS
    }

    pub fn kind(&self) -> Result<ProblemKind> {
        ProblemKind::parse(&self.problem)
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_profile() {
            if self.profile.is_none() {
                return Err(Error::config("profile", "required for burgers_profile"));
            }
            if self.training.is_some() || self.weighting.is_some() {
                return Err(Error::config("training", "burgers_profile takes a profile section instead"));
            }
            self.profile_ansatz()?.validate()?;
            self.profile_train_config()?.schedule.validate()?;
            return Ok(());
        }
        let p = self.problem_spec()?;
        if self.pyramid.is_none() {
            return Err(Error::config("pyramid", "required for time-dependent problems"));
        }
        if self.profile.is_some() {
            return Err(Error::config("profile", "only valid for burgers_profile"));
        }
        let mc = self.model_config()?;
        mc.pyramid.validate()?;
        mc.decoder.validate()?;
        self.train_config()?.validate(&p)?;
        Ok(())
    }

    fn training(&self) -> Result<&TrainingSection> {
        self.training.as_ref().ok_or_else(|| Error::config("training", "missing section"))
    }

    fn weighting(&self) -> Result<&WeightingSection> {
        self.weighting.as_ref().ok_or_else(|| Error::config("weighting", "missing section"))
    }

    fn pyramid_config(&self, dims: usize) -> Result<PyramidConfig> {
        let s = self.pyramid.as_ref().ok_or_else(|| Error::config("pyramid", "missing section"))?;
        if s.resize_scale != 2.0 {
            return Err(Error::config("pyramid.resize_scale", format!("only dyadic level schedules are supported, got {}", s.resize_scale)));
        }
        if s.t_resize_scale != 1.0 {
            return Err(Error::config("pyramid.t_resize_scale", format!("time bins are shared across levels; got {}", s.t_resize_scale)));
        }
        if s.num_scales == 0 {
            return Err(Error::config("pyramid.num_scales", "must be positive"));
        }
        if s.min_grid < 2 || !s.min_grid.is_power_of_two() {
            return Err(Error::config("pyramid.min_grid", format!("{} is not a power of two >= 2", s.min_grid)));
        }
        let mut p = PyramidConfig::dyadic(dims, s.num_scales, s.min_grid, s.num_features, s.t_min_grid + 1);
        p.init_noise = s.init_noise;
        p.global_precond = s.global_precond;
        p.per_level_precond = s.per_level_precond;
        p.spectral_precond_k = s.spectral_precond_k;
        Ok(p)
    }

    fn decoder_config(&self, input_dim: usize, output_dim: usize) -> DecoderConfig {
        DecoderConfig {
            architecture: self.mlp.architecture,
            width: self.mlp.width,
            depth: self.mlp.depth,
            activation: self.mlp.activation,
            weight_fact: self.mlp.weight_fact,
            input_dim,
            output_dim,
        }
    }

    pub fn schedule(&self) -> Schedule {
        let o = &self.optim;
        Schedule { lr: o.lr, warmup_steps: o.warmup_steps, decay: o.decay, decay_steps: o.decay_steps, decay_rate: o.decay_rate, total_steps: o.max_steps }
    }

    /// Problem with the configured weights, causal settings and windows.
    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        let mut p = ProblemSpec::new(self.kind()?);
        let w = self.weighting()?;
        for (name, _) in &w.init_weights {
            if !p.terms.iter().any(|t| &t.name == name) {
                let known: Vec<&str> = p.terms.iter().map(|t| t.name.as_str()).collect();
                return Err(Error::config(format!("weighting.init_weights.{name}"), format!("unknown term; expected one of {known:?}")));
            }
        }
        for t in &mut p.terms {
            t.weight = *w.init_weights.get(&t.name).ok_or_else(|| Error::config("weighting.init_weights", format!("missing weight for `{}`", t.name)))?;
        }
        if !(w.causal_tol >= 0.0) {
            return Err(Error::config("weighting.causal_tol", "must be non-negative"));
        }
        p.causal_tol = w.causal_tol;
        p.chunks = w.chunks;
        let t = self.training()?;
        if t.windows == 0 {
            return Err(Error::config("training.windows", "at least one window is required"));
        }
        if let Some(m) = &t.window_mode {
            if m != "discrete_ic_transfer" {
                return Err(Error::config("training.window_mode", format!("unsupported mode `{m}`")));
            }
        }
        p.windows = t.windows;
        Ok(p)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        if self.is_profile() {
            let pyramid = self.pyramid_config(1)?;
            return Ok(ModelConfig { pyramid, decoder: self.decoder_config(0, 1), use_coords: false, time_input: false }.consistent());
        }
        let kind = self.kind()?;
        let pyramid = self.pyramid_config(kind.dims())?;
        let use_coords = self.pyramid.as_ref().map(|p| p.use_coords).unwrap_or(false);
        Ok(ModelConfig { pyramid, decoder: self.decoder_config(0, kind.components()), use_coords, time_input: true }.consistent())
    }

    pub fn init_model(&self) -> Result<BeignetModel> {
        let p = self.problem_spec()?;
        BeignetModel::init(self.model_config()?, p.domain, self.seed)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = self.training()?;
        let dims = self.kind()?.dims();
        let grid = if dims == 1 { vec![t.mx] } else { vec![t.my.unwrap_or(t.mx), t.mx] };
        let w = self.weighting()?;
        let grad_norm_period = match w.scheme.as_str() {
            "grad_norm" => w.update_every.max(1),
            "fixed" => 0,
            other => return Err(Error::config("weighting.scheme", format!("unknown scheme `{other}`"))),
        };
        Ok(TrainConfig {
            steps: self.optim.max_steps,
            schedule: self.schedule(),
            adam_eps: self.optim.eps,
            grid,
            mt: t.mt,
            ic_grid: vec![t.ic_grid; dims],
            shift_mode: t.shift_mode,
            path: t.residual_path,
            grad_norm_period,
            log_every: t.log_every,
            eval_every: t.eval_every,
            seed: self.seed,
        })
    }

    /// Burgers profile ansatz: pyramid inner model when a pyramid section is present, else a coordinate MLP.
    pub fn profile_ansatz(&self) -> Result<ProfileAnsatz> {
        let s = self.profile.as_ref().ok_or_else(|| Error::config("profile", "missing section"))?;
        let inner = if self.pyramid.is_some() {
            let domain = DomainMap::new(vec![-s.c], vec![s.c], 0.0, 1.0).map_err(|_| Error::config("profile.c", "must be positive"))?;
            Inner::Beignet(BeignetModel::init(self.model_config()?, domain, self.seed)?)
        } else {
            Inner::Mlp(DecoderParams::init(self.decoder_config(1, 1), self.seed)?)
        };
        Ok(ProfileAnsatz { c: s.c, lambda: s.lambda, inner, tail: s.tail, exact_linear: false })
    }

    pub fn profile_train_config(&self) -> Result<ProfileTrainConfig> {
        let s = self.profile.as_ref().ok_or_else(|| Error::config("profile", "missing section"))?;
        Ok(ProfileTrainConfig {
            steps: self.optim.max_steps,
            schedule: self.schedule(),
            adam_eps: self.optim.eps,
            batch: s.batch,
            log_every: s.log_every,
            report_every: s.report_every,
            seed: self.seed,
        })
    }
}

fn benchmark(kind: ProblemKind) -> RunConfig {
    let (scales, features, mx, width, depth, act, wf_mean, steps, warmup, decay_steps) = match kind {
        ProblemKind::AllenCahn => (9, 14, 256, 256, 4, Activation::Tanh, 1.0, 300_000, 1200, 3000),
        ProblemKind::Kdv => (4, 64, 256, 256, 4, Activation::Tanh, 1.0, 200_000, 0, 2000),
        ProblemKind::GinzburgLandau => (5, 64, 32, 128, 3, Activation::Swish, 0.5, 100_000, 5000, 2000),
        ProblemKind::GrayScott => (5, 64, 32, 128, 3, Activation::Swish, 0.5, 100_000, 0, 2000),
    };
    let p = ProblemSpec::new(kind);
    let two_d = kind.dims() == 2;
    RunConfig {
        problem: kind.name().into(),
        seed: 0,
        out_dir: Some(format!("runs/{}", kind.name())),
        reference: Some(format!("{}.ref", kind.name())),
        pyramid: Some(PyramidSection {
            num_scales: scales,
            num_features: features,
            min_grid: 2,
            resize_scale: 2.0,
            t_min_grid: 8,
            t_resize_scale: 1.0,
            use_coords: true,
            init_noise: 0.1,
            global_precond: 10.0,
            per_level_precond: 1.0,
            spectral_precond_k: 0.0,
        }),
        mlp: MlpSection { architecture: Architecture::ModifiedMlp, width, depth, activation: act, weight_fact: Some(WeightFact { mean: wf_mean, std: 0.1 }) },
        optim: OptimSection { max_steps: steps, lr: 1e-3, decay: DecayKind::ExponentialStaircase, decay_steps, decay_rate: 0.9, warmup_steps: warmup, eps: 1e-8 },
        training: Some(TrainingSection {
            mx,
            my: two_d.then_some(mx),
            mt: 256,
            ic_grid: if two_d { 128 } else { 512 },
            shift_mode: ShiftMode::PerSlice,
            residual_path: ResidualPath::Fft,
            windows: p.windows,
            window_mode: (p.windows > 1).then(|| "discrete_ic_transfer".to_string()),
            log_every: 100,
            eval_every: 1000,
        }),
        weighting: Some(WeightingSection {
            scheme: "grad_norm".into(),
            update_every: 1000,
            init_weights: p.terms.iter().map(|t| (t.name.clone(), t.weight)).collect(),
            causal_tol: p.causal_tol,
            chunks: p.chunks,
        }),
        profile: None,
    }
}

fn burgers(pyramid: bool) -> RunConfig {
    RunConfig {
        problem: BURGERS.into(),
        seed: 0,
        out_dir: Some(format!("runs/burgers_{}", if pyramid { "beignet" } else { "mlp" })),
        reference: None,
        pyramid: pyramid.then(|| PyramidSection {
            num_scales: 12,
            num_features: 4,
            min_grid: 2,
            resize_scale: 2.0,
            t_min_grid: 0,
            t_resize_scale: 1.0,
            use_coords: false,
            init_noise: 1e-5,
            global_precond: 1000.0,
            per_level_precond: 0.25,
            spectral_precond_k: 0.0,
        }),
        mlp: MlpSection { architecture: Architecture::VanillaMlp, width: 20, depth: 4, activation: Activation::Tanh, weight_fact: None },
        optim: OptimSection { max_steps: 20_000, lr: 1e-4, decay: DecayKind::Cosine, decay_steps: 20_000, decay_rate: 1.0, warmup_steps: 0, eps: 1e-15 },
        training: None,
        weighting: None,
        profile: Some(ProfileSection { c: 30.0, lambda: 0.5, tail: true, batch: 4096, log_every: 100, report_every: 0 }),
    }
}

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 9] = [
    "allen_cahn",
    "allen_cahn_desk",
    "allen_cahn_desk_noshift",
    "kdv",
    "ginzburg_landau",
    "gray_scott",
    "burgers_beignet",
    "burgers_mlp",
    "smoke",
];

/// Built-in configurations: the full benchmark settings, desk-scale variants and a seconds-long smoke run.
pub fn preset(name: &str) -> Result<RunConfig> {
    let cfg = match name {
        "allen_cahn" => benchmark(ProblemKind::AllenCahn),
        "kdv" => benchmark(ProblemKind::Kdv),
        "ginzburg_landau" => benchmark(ProblemKind::GinzburgLandau),
        "gray_scott" => benchmark(ProblemKind::GrayScott),
        "allen_cahn_desk" | "allen_cahn_desk_noshift" => {
            let mut c = benchmark(ProblemKind::AllenCahn);
            c.optim.max_steps = 30_000;
            let t = c.training.as_mut().unwrap();
            t.mx = 64;
            if name.ends_with("noshift") {
                t.shift_mode = ShiftMode::None;
                c.out_dir = Some("runs/allen_cahn_desk_noshift".into());
            } else {
                c.out_dir = Some("runs/allen_cahn_desk".into());
            }
            c
        }
        "burgers_beignet" => burgers(true),
        "burgers_mlp" => burgers(false),
        "smoke" => {
            let mut c = benchmark(ProblemKind::AllenCahn);
            c.out_dir = Some("runs/smoke".into());
            let p = c.pyramid.as_mut().unwrap();
            p.num_scales = 3;
            p.num_features = 2;
            p.t_min_grid = 2;
            c.mlp.width = 8;
            c.mlp.depth = 2;
            c.optim = OptimSection { max_steps: 20, lr: 5e-3, decay: DecayKind::ExponentialStaircase, decay_steps: 100, decay_rate: 0.9, warmup_steps: 0, eps: 1e-8 };
            let t = c.training.as_mut().unwrap();
            t.mx = 16;
            t.mt = 8;
            t.ic_grid = 32;
            t.log_every = 5;
            t.eval_every = 0;
            let w = c.weighting.as_mut().unwrap();
            w.chunks = 4;
            w.update_every = 10;
            c
        }
        _ => return Err(Error::config("preset", format!("unknown preset `{name}`; known: {PRESETS:?}"))),
    };
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let c = preset(name).unwrap();
            c.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            let text = c.to_json();
            let back = parse(&text).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_json(), text);
        }
    }

    #[test]
    fn table_key_names_are_verbatim() {
        let text = preset("allen_cahn").unwrap().to_json();
        for key in [
            "num_scales",
            "num_features",
            "\"Mx\"",
            "\"Mt\"",
            "shift_mode",
            "use_coords",
            "init_noise",
            "global_precond",
            "per_level_precond",
            "spectral_precond_K",
            "t_resize_scale",
            "resize_scale",
            "causal_tol",
            "chunks",
        ] {
            assert!(text.contains(key), "{key}");
        }
        assert!(preset("gray_scott").unwrap().to_json().contains("window_mode"));
    }

    #[test]
    fn unknown_key_reports_path() {
        let mut v: serde_json::Value = serde_json::from_str(&preset("kdv").unwrap().to_json()).unwrap();
        v["pyramid"]["num_scale"] = 3.into();
        let err = parse(&v.to_string()).unwrap_err();
        match err {
            Error::Config { path, message } => {
                assert!(path.starts_with("pyramid"), "{path}");
                assert!(message.contains("num_scale"), "{message}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn semantic_errors_name_keys() {
        let mut c = preset("allen_cahn").unwrap();
        c.training.as_mut().unwrap().mt = 100;
        assert!(matches!(c.validate(), Err(Error::Config { path, .. }) if path == "Mt"));
        let mut c = preset("allen_cahn").unwrap();
        c.weighting.as_mut().unwrap().init_weights.insert("bogus".into(), 1.0);
        assert!(matches!(c.validate(), Err(Error::Config { path, .. }) if path.contains("bogus")));
        let mut c = preset("allen_cahn").unwrap();
        c.pyramid.as_mut().unwrap().resize_scale = 1.5;
        assert!(matches!(c.validate(), Err(Error::Config { path, .. }) if path == "pyramid.resize_scale"));
    }

    #[test]
    fn paper_configs_map_to_models() {
        let ac = preset("allen_cahn").unwrap().model_config().unwrap();
        assert_eq!(ac.pyramid.sizes, vec![2, 4, 8, 16, 32, 64, 128, 256, 512]);
        assert_eq!(ac.pyramid.anchors, 9);
        assert_eq!(ac.decoder.input_dim, 9 * 14 + 2 + 1);
        let b = preset("burgers_beignet").unwrap().model_config().unwrap();
        assert_eq!(b.pyramid.finest(), 4096);
        assert_eq!(b.pyramid.anchors, 1);
        assert_eq!(b.decoder.input_dim, 48);
        let a = preset("burgers_mlp").unwrap().profile_ansatz().unwrap();
        assert!(matches!(a.inner, Inner::Mlp(_)));
        let gs = preset("gray_scott").unwrap();
        assert_eq!(gs.train_config().unwrap().grid, vec![32, 32]);
        assert_eq!(gs.problem_spec().unwrap().windows, 10);
    }
}
