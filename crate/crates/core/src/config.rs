//! Experiment configuration: one flat `key = value` text format covering
//! data generation, model shape, objective, optimizer, evaluation, and
//! sweep grids. A run's effective config is serialized back out with
//! `to_flat`, so configs round-trip and every output directory can carry
//! the exact settings that produced it.
//!
//! The single root `seed` feeds dataset generation, initialization,
//! shuffling, negative sampling, dropout, and evaluation pools through
//! named substreams; overriding it moves the entire experiment.

use crate::error::{Error, Result};
use crate::evaluation::PoolMode;
use crate::gate::{GateMode, GateType, NeutralType};
use crate::model::ModelConfig;
use crate::objective::{Method, ObjectiveConfig, SamplingMode};
use crate::synthetic_xnor::XnorConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Full,
    Sampled,
}

impl PoolKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(PoolKind::Full),
            "sampled" => Ok(PoolKind::Sampled),
            other => Err(Error::config(format!("eval.pool must be full or sampled, got '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PoolKind::Full => "full",
            PoolKind::Sampled => "sampled",
        }
    }
}

/// How the scaling sweep couples the per-anchor negative count K to the
/// batch size B.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KMode {
    /// K grows with B (K = B).
    Joint,
    /// K stays at the configured objective.num_negatives.
    Fixed,
}

impl KMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(KMode::Joint),
            "fixed" => Ok(KMode::Fixed),
            other => Err(Error::config(format!("sweep.k_mode must be joint or fixed, got '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            KMode::Joint => "joint",
            KMode::Fixed => "fixed",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub pool: PoolKind,
    pub num_negatives: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pool: PoolKind::Sampled,
            num_negatives: 128,
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub p_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub b_grid: Vec<usize>,
    pub k_mode: KMode,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            methods: vec![Method::Clip, Method::Symile, Method::GatedSymile],
            p_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            seeds: vec![0, 1, 2],
            b_grid: vec![128, 256, 512],
            k_mode: KMode::Joint,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    pub run_name: String,
    pub data: XnorConfig,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: "runs".into(),
            run_name: "run".into(),
            data: XnorConfig::default(),
            model: ModelConfig::default(),
            objective: ObjectiveConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("key '{key}': cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::config(format!("key '{key}': expected true or false, got '{other}'"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::config(format!("key '{key}': cannot parse element '{s}'")))
        })
        .collect()
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Shorthand keys accepted on the command line and in files, rewritten to
/// their canonical names before lookup.
fn canonical(key: &str) -> String {
    match key {
        "method" => "modelname.method".into(),
        "p" => "data.misalignment_prob".into(),
        _ => match key.strip_prefix("gate.") {
            Some(rest) => format!("modelname.{rest}"),
            None => key.into(),
        },
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment. Unknown keys are errors that
    /// name the key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let key = canonical(key);
        let v = value.trim();
        match key.as_str() {
            "seed" => self.seed = parse_num(&key, v)?,
            "out_dir" => self.out_dir = v.into(),
            "run_name" => self.run_name = v.into(),

            "data.bit_length" => self.data.bit_length = parse_num(&key, v)?,
            "data.signal_amplitude" => self.data.signal_amplitude = parse_num(&key, v)?,
            "data.distractor_sigma" => self.data.distractor_sigma = parse_num(&key, v)?,
            "data.input_dim" => self.data.input_dim = parse_num(&key, v)?,
            "data.misalignment_prob" => self.data.misalignment_prob = parse_num(&key, v)?,
            "data.num_samples" => self.data.num_samples = parse_num(&key, v)?,

            "modelname.method" => self.model.method = Method::parse(v)?,
            "modelname.target_modality" => self.model.target_modality = parse_num(&key, v)?,
            "modelname.emb_dim" => self.model.encoder.embedding_dim = parse_num(&key, v)?,
            "modelname.embedding_norm" => {
                self.model.encoder.normalize_output = parse_bool(&key, v)?
            }
            "modelname.hidden_dims" => self.model.encoder.hidden_dims = parse_list(&key, v)?,
            "modelname.hidden_dropouts" => {
                self.model.encoder.hidden_dropouts = parse_list(&key, v)?
            }
            "modelname.logit_scale_init" => self.model.logit_scale_init = parse_num(&key, v)?,
            "modelname.gate_mode" => self.model.gate.gate_mode = GateMode::parse(v)?,
            "modelname.gate_type" => self.model.gate.gate_type = GateType::parse(v)?,
            "modelname.use_null" => self.model.gate.use_null = parse_bool(&key, v)?,
            "modelname.neutral_type" => self.model.gate.neutral_type = NeutralType::parse(v)?,
            "modelname.renormalize" => self.model.gate.renormalize = parse_bool(&key, v)?,
            "modelname.gate_temp" => self.model.gate.gate_temp = parse_num(&key, v)?,
            "modelname.gate_strength_init" => {
                self.model.gate.gate_strength_init = parse_num(&key, v)?
            }
            "modelname.gate_d_k" => self.model.gate.gate_d_k = parse_num(&key, v)?,

            "objective.sampling" => self.objective.sampling = SamplingMode::parse(v)?,
            "objective.num_negatives" => self.objective.num_negatives = parse_num(&key, v)?,

            "optimizer.lr" => self.train.lr = parse_num(&key, v)?,
            "optimizer.warmup_steps" => self.train.warmup_steps = parse_num(&key, v)?,
            "optimizer.weight_decay" => self.train.weight_decay = parse_num(&key, v)?,
            "optimizer.lr_gate_mul" => self.train.lr_gate_mul = parse_num(&key, v)?,
            "optimizer.max_epochs" => self.train.max_epochs = parse_num(&key, v)?,
            "optimizer.batch_size" => self.train.batch_size = parse_num(&key, v)?,
            "optimizer.grad_clip_norm" => self.train.grad_clip_norm = parse_num(&key, v)?,
            "optimizer.eval_every" => self.train.eval_every = parse_num(&key, v)?,

            "eval.pool" => self.eval.pool = PoolKind::parse(v)?,
            "eval.num_negatives" => self.eval.num_negatives = parse_num(&key, v)?,
            "eval.train_frac" => self.eval.train_frac = parse_num(&key, v)?,
            "eval.val_frac" => self.eval.val_frac = parse_num(&key, v)?,
            "eval.test_frac" => self.eval.test_frac = parse_num(&key, v)?,

            "sweep.methods" => {
                self.sweep.methods = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| Method::parse(s.trim()))
                    .collect::<Result<Vec<_>>>()?
            }
            "sweep.p_grid" => self.sweep.p_grid = parse_list(&key, v)?,
            "sweep.seeds" => self.sweep.seeds = parse_list(&key, v)?,
            "sweep.b_grid" => self.sweep.b_grid = parse_list(&key, v)?,
            "sweep.k_mode" => self.sweep.k_mode = KMode::parse(v)?,

            other => return Err(Error::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment, blanks are
    /// skipped. Later assignments override earlier ones.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Propagates the root seed and the data shape into the subconfigs,
    /// then validates everything. Call after the last override.
    pub fn finalize(&mut self) -> Result<()> {
        self.data.seed = self.seed;
        self.train.seed = self.seed;
        self.model.encoder.input_dim = self.data.input_dim;
        self.data.validate()?;
        self.model.validate()?;
        self.objective.validate()?;
        self.train.validate()?;
        let frac_sum = self.eval.train_frac + self.eval.val_frac + self.eval.test_frac;
        if (frac_sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "eval split fractions must sum to 1, got {frac_sum}"
            )));
        }
        if self.eval.num_negatives == 0 {
            return Err(Error::config("eval.num_negatives must be at least 1"));
        }
        if self.sweep.methods.is_empty()
            || self.sweep.p_grid.is_empty()
            || self.sweep.seeds.is_empty()
            || self.sweep.b_grid.is_empty()
        {
            return Err(Error::config("sweep grids must be nonempty"));
        }
        if let Some(&p) = self.sweep.p_grid.iter().find(|&&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::config(format!("sweep.p_grid value {p} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn split_fractions(&self) -> (f64, f64, f64) {
        (self.eval.train_frac, self.eval.val_frac, self.eval.test_frac)
    }

    pub fn eval_pool(&self) -> PoolMode {
        match self.eval.pool {
            PoolKind::Full => PoolMode::Full,
            PoolKind::Sampled => PoolMode::Sampled(self.eval.num_negatives),
        }
    }

    fn entries(&self) -> Vec<(String, String)> {
        let e = &self.model.encoder;
        let g = &self.model.gate;
        vec![
            ("seed".into(), self.seed.to_string()),
            ("out_dir".into(), self.out_dir.clone()),
            ("run_name".into(), self.run_name.clone()),
            ("data.bit_length".into(), self.data.bit_length.to_string()),
            ("data.signal_amplitude".into(), self.data.signal_amplitude.to_string()),
            ("data.distractor_sigma".into(), self.data.distractor_sigma.to_string()),
            ("data.input_dim".into(), self.data.input_dim.to_string()),
            ("data.misalignment_prob".into(), self.data.misalignment_prob.to_string()),
            ("data.num_samples".into(), self.data.num_samples.to_string()),
            ("modelname.method".into(), self.model.method.as_str().into()),
            ("modelname.target_modality".into(), self.model.target_modality.to_string()),
            ("modelname.emb_dim".into(), e.embedding_dim.to_string()),
            ("modelname.embedding_norm".into(), e.normalize_output.to_string()),
            ("modelname.hidden_dims".into(), join(&e.hidden_dims)),
            ("modelname.hidden_dropouts".into(), join(&e.hidden_dropouts)),
            ("modelname.logit_scale_init".into(), self.model.logit_scale_init.to_string()),
            ("modelname.gate_mode".into(), g.gate_mode.as_str().into()),
            ("modelname.gate_type".into(), g.gate_type.as_str().into()),
            ("modelname.use_null".into(), g.use_null.to_string()),
            ("modelname.neutral_type".into(), g.neutral_type.as_str().into()),
            ("modelname.renormalize".into(), g.renormalize.to_string()),
            ("modelname.gate_temp".into(), g.gate_temp.to_string()),
            ("modelname.gate_strength_init".into(), g.gate_strength_init.to_string()),
            ("modelname.gate_d_k".into(), g.gate_d_k.to_string()),
            ("objective.sampling".into(), self.objective.sampling.as_str().into()),
            ("objective.num_negatives".into(), self.objective.num_negatives.to_string()),
            ("optimizer.lr".into(), self.train.lr.to_string()),
            ("optimizer.warmup_steps".into(), self.train.warmup_steps.to_string()),
            ("optimizer.weight_decay".into(), self.train.weight_decay.to_string()),
            ("optimizer.lr_gate_mul".into(), self.train.lr_gate_mul.to_string()),
            ("optimizer.max_epochs".into(), self.train.max_epochs.to_string()),
            ("optimizer.batch_size".into(), self.train.batch_size.to_string()),
            ("optimizer.grad_clip_norm".into(), self.train.grad_clip_norm.to_string()),
            ("optimizer.eval_every".into(), self.train.eval_every.to_string()),
            ("eval.pool".into(), self.eval.pool.as_str().into()),
            ("eval.num_negatives".into(), self.eval.num_negatives.to_string()),
            ("eval.train_frac".into(), self.eval.train_frac.to_string()),
            ("eval.val_frac".into(), self.eval.val_frac.to_string()),
            ("eval.test_frac".into(), self.eval.test_frac.to_string()),
            (
                "sweep.methods".into(),
                self.sweep
                    .methods
                    .iter()
                    .map(|m| m.as_str())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("sweep.p_grid".into(), join(&self.sweep.p_grid)),
            ("sweep.seeds".into(), join(&self.sweep.seeds)),
            ("sweep.b_grid".into(), join(&self.sweep.b_grid)),
            ("sweep.k_mode".into(), self.sweep.k_mode.as_str().into()),
        ]
    }

    /// The full effective configuration, one sorted `key = value` line
    /// per setting. Parsing this text reproduces the config exactly.
    pub fn to_flat(&self) -> String {
        let mut entries = self.entries();
        entries.sort();
        let mut out = String::new();
        for (k, v) in entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_survive_flat_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_flat();
        let mut re = ExperimentConfig::default();
        re.apply_text(&text).unwrap();
        assert_eq!(re.to_flat(), text);
    }

    #[test]
    fn modified_config_round_trips() {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in [
            ("seed", "7"),
            ("modelname.method", "symile"),
            ("modelname.hidden_dims", "64,32"),
            ("modelname.hidden_dropouts", "0.1,0.2"),
            ("data.misalignment_prob", "0.75"),
            ("optimizer.lr", "0.0005"),
            ("sweep.p_grid", "0,1"),
            ("sweep.k_mode", "fixed"),
            ("eval.pool", "full"),
        ] {
            cfg.apply(k, v).unwrap();
        }
        let text = cfg.to_flat();
        let mut re = ExperimentConfig::default();
        re.apply_text(&text).unwrap();
        assert_eq!(re.to_flat(), text);
        assert_eq!(re.model.method, Method::Symile);
        assert_eq!(re.model.encoder.hidden_dims, vec![64, 32]);
        assert_eq!(re.sweep.k_mode, KMode::Fixed);
    }

    #[test]
    fn aliases_rewrite_to_canonical_keys() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply("method", "clip").unwrap();
        assert_eq!(cfg.model.method, Method::Clip);
        cfg.apply("p", "0.5").unwrap();
        assert_eq!(cfg.data.misalignment_prob, 0.5);
        cfg.apply("gate.gate_mode", "matrix").unwrap();
        assert_eq!(cfg.model.gate.gate_mode, GateMode::Matrix);
        cfg.apply("gate.gate_temp", "0.9").unwrap();
        assert_eq!(cfg.model.gate.gate_temp, 0.9);
    }

    #[test]
    fn unknown_keys_are_named_in_the_error() {
        let mut cfg = ExperimentConfig::default();
        let err = cfg.apply("optimizer.momentum", "0.9").unwrap_err();
        assert!(err.to_string().contains("optimizer.momentum"), "{err}");
        let err = cfg.apply_text("data.bit_length = x\n").unwrap_err();
        assert!(err.to_string().contains("data.bit_length"), "{err}");
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text("# a comment\n\nseed = 5 # trailing\n  \nmodelname.emb_dim = 32\n")
            .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.model.encoder.embedding_dim, 32);
        assert!(cfg.apply_text("just words\n").is_err());
    }

    #[test]
    fn finalize_propagates_seed_and_input_dim() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply("seed", "99").unwrap();
        cfg.apply("data.input_dim", "64").unwrap();
        cfg.apply("data.bit_length", "8").unwrap();
        cfg.finalize().unwrap();
        assert_eq!(cfg.data.seed, 99);
        assert_eq!(cfg.train.seed, 99);
        assert_eq!(cfg.model.encoder.input_dim, 64);
    }

    #[test]
    fn finalize_rejects_bad_fractions_and_grids() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply("eval.val_frac", "0.5").unwrap();
        assert!(cfg.finalize().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.apply("sweep.p_grid", "0,2").unwrap();
        assert!(cfg.finalize().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.apply("sweep.seeds", "").unwrap();
        assert!(cfg.finalize().is_err());
    }
}
