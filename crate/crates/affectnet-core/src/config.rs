//! Flat key-value configuration files with dotted keys.
//!
//! ```text
//! seed = 42
//! batch_size = 16
//! model.stage_channels = 16,32,64
//! phase1.lr = 0.001
//! ```
//!
//! `#` starts a comment. Unknown keys are errors (typos should not silently
//! become defaults). The full effective configuration is echoed into the run
//! log.

use std::path::{Path, PathBuf};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::AttentionMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    Sum,
    Weighted,
}

impl LossMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossMode::Sum => "sum",
            LossMode::Weighted => "weighted",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub loss_mode: LossMode,
}

/// Which tasks contribute losses (the single-task comparison harness).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSet {
    pub va: bool,
    pub au: bool,
    pub expr: bool,
}

impl Default for TaskSet {
    fn default() -> Self {
        TaskSet {
            va: true,
            au: true,
            expr: true,
        }
    }
}

impl TaskSet {
    pub fn parse(s: &str) -> Result<TaskSet> {
        let mut set = TaskSet {
            va: false,
            au: false,
            expr: false,
        };
        for part in s.split(',') {
            match part.trim() {
                "va" => set.va = true,
                "au" => set.au = true,
                "expr" => set.expr = true,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown task '{other}' (expected va,au,expr)"
                    )))
                }
            }
        }
        if !(set.va || set.au || set.expr) {
            return Err(Error::InvalidArgument("empty task set".into()));
        }
        Ok(set)
    }

    pub fn to_string_list(self) -> String {
        let mut parts = Vec::new();
        if self.va {
            parts.push("va");
        }
        if self.au {
            parts.push("au");
        }
        if self.expr {
            parts.push("expr");
        }
        parts.join(",")
    }
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataConfig {
    Synthetic(SyntheticSpec),
    Path(PathBuf),
}

/// Stop phase 1 early once training-set metrics reach these targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopTargets {
    pub expr_accuracy: f64,
    pub au_f1: f64,
    pub va_ccc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub model: ModelConfig,
    pub phase1: PhaseConfig,
    pub phase2: PhaseConfig,
    pub data: DataConfig,
    pub tasks: TaskSet,
    pub freeze_backbone_phase2: bool,
    pub stop_targets: Option<StopTargets>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 16,
            val_fraction: 0.2,
            model: ModelConfig::default(),
            phase1: PhaseConfig {
                optimizer: OptimizerKind::Adam,
                lr: 0.001,
                weight_decay: 0.001,
                epochs: 30,
                loss_mode: LossMode::Sum,
            },
            phase2: PhaseConfig {
                optimizer: OptimizerKind::Sgd,
                lr: 0.0001,
                weight_decay: 0.005,
                epochs: 10,
                loss_mode: LossMode::Weighted,
            },
            data: DataConfig::Synthetic(SyntheticSpec::default()),
            tasks: TaskSet::default(),
            freeze_backbone_phase2: false,
            stop_targets: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "batch_size must be >= 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument(
                "val_fraction must be in [0,1)".into(),
            ));
        }
        self.model.validate()?;
        if let DataConfig::Synthetic(spec) = &self.data {
            spec.validate()?;
            if spec.image_size != self.model.input_size {
                return Err(Error::InvalidArgument(format!(
                    "data.image_size {:?} must match model.input_size {:?}",
                    spec.image_size, self.model.input_size
                )));
            }
        }
        Ok(())
    }

    /// Effective configuration as sorted `key = value` lines.
    pub fn echo(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| kv.push((k.to_string(), v));
        push("seed", self.seed.to_string());
        push("batch_size", self.batch_size.to_string());
        push("val_fraction", self.val_fraction.to_string());
        push("tasks", self.tasks.to_string_list());
        push(
            "freeze_backbone_phase2",
            self.freeze_backbone_phase2.to_string(),
        );

        let m = &self.model;
        let (c, h, w) = m.input_size;
        push("model.input_size", format!("{c},{h},{w}"));
        push(
            "model.stage_channels",
            m.stage_channels
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        push("model.blocks_per_stage", m.blocks_per_stage.to_string());
        push("model.dropout_p", m.dropout_p.to_string());
        push("model.se_ratio", m.se_ratio.to_string());
        push("model.cbam_kernel", m.cbam_kernel.to_string());
        push("model.attention_mode", m.attention_mode.as_str().to_string());
        push(
            "model.encoder_proj_dim",
            m.encoder_proj_dim
                .map(|d| d.to_string())
                .unwrap_or_else(|| "none".into()),
        );
        push("model.head_depth", m.head_depth.to_string());

        for (name, p) in [("phase1", &self.phase1), ("phase2", &self.phase2)] {
            push(&format!("{name}.optimizer"), p.optimizer.as_str().into());
            push(&format!("{name}.lr"), p.lr.to_string());
            push(&format!("{name}.weight_decay"), p.weight_decay.to_string());
            push(&format!("{name}.epochs"), p.epochs.to_string());
            push(&format!("{name}.loss_mode"), p.loss_mode.as_str().into());
        }

        match &self.data {
            DataConfig::Synthetic(s) => {
                push("data.source", "synthetic".into());
                push("data.n_samples", s.n_samples.to_string());
                let (c, h, w) = s.image_size;
                push("data.image_size", format!("{c},{h},{w}"));
                push("data.seed", s.seed.to_string());
                push("data.label_noise", s.label_noise.to_string());
                let (pva, pau, pexpr) = s.partial_annotation_probs;
                push("data.partial_va", pva.to_string());
                push("data.partial_au", pau.to_string());
                push("data.partial_expr", pexpr.to_string());
            }
            DataConfig::Path(p) => {
                push("data.source", "path".into());
                push("data.path", p.display().to_string());
            }
        }
        if let Some(st) = &self.stop_targets {
            push("stop.expr_accuracy", st.expr_accuracy.to_string());
            push("stop.au_f1", st.au_f1.to_string());
            push("stop.va_ccc", st.va_ccc.to_string());
        }
        kv.sort();
        kv
    }

    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut config = TrainConfig::default();
        let mut synthetic = SyntheticSpec::default();
        let mut data_path: Option<PathBuf> = None;
        let mut data_source: Option<String> = None;
        let mut stop: Option<StopTargets> = None;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = lineno + 1;
            let err = |message: String| Error::Config {
                line: lineno,
                message,
            };
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(format!("expected 'key = value', got '{line}'")));
            };
            let key = key.trim();
            let value = value.trim();
            let bad_num = |what: &str| err(format!("bad {what} '{value}'"));

            macro_rules! parse_as {
                ($ty:ty, $what:expr) => {
                    value.parse::<$ty>().map_err(|_| bad_num($what))?
                };
            }
            let parse_dims = |value: &str| -> Result<(usize, usize, usize)> {
                let dims: Vec<usize> = value
                    .split(',')
                    .map(|d| d.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| err(format!("bad dims '{value}'")))?;
                if dims.len() != 3 {
                    return Err(err(format!("'{value}' must have 3 dims")));
                }
                Ok((dims[0], dims[1], dims[2]))
            };

            match key {
                "seed" => config.seed = parse_as!(u64, "seed"),
                "batch_size" => config.batch_size = parse_as!(usize, "batch size"),
                "val_fraction" => config.val_fraction = parse_as!(f64, "fraction"),
                "tasks" => config.tasks = TaskSet::parse(value)?,
                "freeze_backbone_phase2" => {
                    config.freeze_backbone_phase2 = parse_as!(bool, "flag")
                }
                "model.input_size" => config.model.input_size = parse_dims(value)?,
                "model.stage_channels" => {
                    config.model.stage_channels = value
                        .split(',')
                        .map(|d| d.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| err(format!("bad channels '{value}'")))?
                }
                "model.blocks_per_stage" => {
                    config.model.blocks_per_stage = parse_as!(usize, "count")
                }
                "model.dropout_p" => config.model.dropout_p = parse_as!(f64, "probability"),
                "model.se_ratio" => config.model.se_ratio = parse_as!(usize, "ratio"),
                "model.cbam_kernel" => config.model.cbam_kernel = parse_as!(usize, "kernel"),
                "model.attention_mode" => {
                    config.model.attention_mode = AttentionMode::parse(value)?
                }
                "model.encoder_proj_dim" => {
                    config.model.encoder_proj_dim = match value {
                        "none" => None,
                        _ => Some(parse_as!(usize, "width")),
                    }
                }
                "model.head_depth" => config.model.head_depth = parse_as!(usize, "depth"),
                "phase1.optimizer" | "phase2.optimizer" => {
                    let opt = match value {
                        "adam" => OptimizerKind::Adam,
                        "sgd" => OptimizerKind::Sgd,
                        _ => return Err(err(format!("unknown optimizer '{value}'"))),
                    };
                    if key.starts_with("phase1") {
                        config.phase1.optimizer = opt;
                    } else {
                        config.phase2.optimizer = opt;
                    }
                }
                "phase1.lr" => config.phase1.lr = parse_as!(f64, "learning rate"),
                "phase2.lr" => config.phase2.lr = parse_as!(f64, "learning rate"),
                "phase1.weight_decay" => config.phase1.weight_decay = parse_as!(f64, "decay"),
                "phase2.weight_decay" => config.phase2.weight_decay = parse_as!(f64, "decay"),
                "phase1.epochs" => config.phase1.epochs = parse_as!(usize, "epochs"),
                "phase2.epochs" => config.phase2.epochs = parse_as!(usize, "epochs"),
                "phase1.loss_mode" | "phase2.loss_mode" => {
                    let mode = match value {
                        "sum" => LossMode::Sum,
                        "weighted" => LossMode::Weighted,
                        _ => return Err(err(format!("unknown loss mode '{value}'"))),
                    };
                    if key.starts_with("phase1") {
                        config.phase1.loss_mode = mode;
                    } else {
                        config.phase2.loss_mode = mode;
                    }
                }
                "data.source" => data_source = Some(value.to_string()),
                "data.path" => data_path = Some(PathBuf::from(value)),
                "data.n_samples" => synthetic.n_samples = parse_as!(usize, "count"),
                "data.image_size" => synthetic.image_size = parse_dims(value)?,
                "data.seed" => synthetic.seed = parse_as!(u64, "seed"),
                "data.label_noise" => synthetic.label_noise = parse_as!(f64, "noise"),
                "data.partial_va" => synthetic.partial_annotation_probs.0 = parse_as!(f64, "probability"),
                "data.partial_au" => synthetic.partial_annotation_probs.1 = parse_as!(f64, "probability"),
                "data.partial_expr" => {
                    synthetic.partial_annotation_probs.2 = parse_as!(f64, "probability")
                }
                "stop.expr_accuracy" => {
                    stop.get_or_insert(DEFAULT_STOP).expr_accuracy = parse_as!(f64, "target")
                }
                "stop.au_f1" => stop.get_or_insert(DEFAULT_STOP).au_f1 = parse_as!(f64, "target"),
                "stop.va_ccc" => stop.get_or_insert(DEFAULT_STOP).va_ccc = parse_as!(f64, "target"),
                other => return Err(err(format!("unknown key '{other}'"))),
            }
        }

        config.data = match data_source.as_deref() {
            None | Some("synthetic") => DataConfig::Synthetic(synthetic),
            Some("path") => DataConfig::Path(data_path.ok_or(Error::Config {
                line: 0,
                message: "data.source = path requires data.path".into(),
            })?),
            Some(other) => {
                return Err(Error::Config {
                    line: 0,
                    message: format!("unknown data.source '{other}'"),
                })
            }
        };
        config.stop_targets = stop;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)?;
        TrainConfig::parse(&text)
    }

    /// Apply the seed override carried by the AFFECTNET_SEED variable.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(raw) = value {
            self.seed = raw.parse().map_err(|_| {
                Error::InvalidArgument(format!("AFFECTNET_SEED: bad seed '{raw}'"))
            })?;
        }
        Ok(())
    }
}

const DEFAULT_STOP: StopTargets = StopTargets {
    expr_accuracy: 1.0,
    au_f1: 0.95,
    va_ccc: 0.9,
};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.phase1.optimizer, OptimizerKind::Adam);
        assert_eq!(c.phase1.lr, 0.001);
        assert_eq!(c.phase1.weight_decay, 0.001);
        assert_eq!(c.phase1.loss_mode, LossMode::Sum);
        assert_eq!(c.phase2.optimizer, OptimizerKind::Sgd);
        assert_eq!(c.phase2.lr, 0.0001);
        assert_eq!(c.phase2.weight_decay, 0.005);
        assert_eq!(c.phase2.loss_mode, LossMode::Weighted);
    }

    #[test]
    fn parse_round_trips_through_echo() {
        let text = "\
            seed = 9\n\
            batch_size = 8\n\
            model.stage_channels = 8,16\n\
            model.se_ratio = 4\n\
            model.attention_mode = cbam\n\
            phase1.epochs = 3\n\
            phase2.epochs = 1\n\
            data.n_samples = 32\n\
            data.seed = 5\n\
            # trailing comment\n";
        let config = TrainConfig::parse(text).unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.model.stage_channels, vec![8, 16]);
        assert_eq!(config.model.attention_mode, AttentionMode::Cbam);

        let echoed: String = config
            .echo()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        let reparsed = TrainConfig::parse(&echoed).unwrap();
        assert_eq!(config, reparsed);
    }

    #[test]
    fn unknown_keys_are_rejected_with_line_numbers() {
        let err = TrainConfig::parse("seed = 1\nmodl.se_ratio = 4\n")
            .err()
            .expect("must fail")
            .to_string();
        assert!(err.contains("line 2") && err.contains("modl.se_ratio"), "{err}");
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(TrainConfig::parse("seed = x\n").is_err());
        assert!(TrainConfig::parse("batch_size = 1\n").is_err());
        assert!(TrainConfig::parse("phase1.optimizer = rmsprop\n").is_err());
        assert!(TrainConfig::parse("tasks = nope\n").is_err());
        assert!(TrainConfig::parse("data.source = path\n").is_err());
    }

    #[test]
    fn seed_override() {
        let mut config = TrainConfig::default();
        config.apply_seed_override(Some("777")).unwrap();
        assert_eq!(config.seed, 777);
        assert!(config.apply_seed_override(Some("abc")).is_err());
        config.apply_seed_override(None).unwrap();
        assert_eq!(config.seed, 777);
    }

    #[test]
    fn stop_targets_parse() {
        let config =
            TrainConfig::parse("stop.expr_accuracy = 1.0\nstop.au_f1 = 0.95\nstop.va_ccc = 0.9\n")
                .unwrap();
        let st = config.stop_targets.unwrap();
        assert_eq!(st.expr_accuracy, 1.0);
        assert_eq!(st.au_f1, 0.95);
        assert_eq!(st.va_ccc, 0.9);
    }
}
