//! Training configuration and its `key = value` file format.
//!
//! Blank lines and `#` comments are ignored. `stage` selects a preset and is
//! applied first wherever it appears; every other key overrides the preset.
//!
//! | key | meaning |
//! |-----|---------|
//! | `stage` | `1` (base training) or `2` (large-margin fine-tuning) |
//! | `steps` | optimizer steps |
//! | `batch_size` | utterances per step |
//! | `lr`, `momentum`, `weight_decay` | SGD settings |
//! | `validate_every` | steps between validations |
//! | `patience`, `plateau_factor`, `min_lr` | reduce-on-plateau settings |
//! | `frames` | training crop length |
//! | `loss` | `am` or `aam` |
//! | `scale`, `topk_penalty`, `top_k`, `subcenters` | margin head |
//! | `margin_schedule` | `linear` or `exponential` |
//! | `margin_start`, `margin_end`, `margin_steps` | margin ramp |
//! | `drop_perturbed` | drop speed-perturbed classes (`true`/`false`) |
//! | `dim`, `heads`, `queries`, `embedding_dim` | toy model |
//! | `speakers`, `utterances`, `validation_utterances`, `input_dim`, `corpus_seed`, `speed_perturb` | synthetic corpus |

use std::fmt;
use std::str::FromStr;

use super::synth::SynthConfig;
use crate::error::{invalid, Error, Result};
use crate::losses::{MarginKind, MarginParams, MarginSchedule, ScheduleKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Base,
    FineTune,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub validate_every: u64,
    pub patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    pub frames: usize,
    pub loss: MarginParams,
    pub subcenters: usize,
    pub margin: MarginSchedule,
    pub drop_perturbed: bool,
    pub dim: usize,
    pub heads: usize,
    pub queries: usize,
    pub embedding_dim: usize,
    pub corpus: SynthConfig,
}

impl TrainConfig {
    /// Desk-scale base training: AM-Softmax with Inter-TopK, margin ramped
    /// linearly 0 -> 0.2, 200-frame crops, plateau factor 0.1.
    pub fn stage1() -> Self {
        Self {
            stage: Stage::Base,
            steps: 200,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-3,
            validate_every: 20,
            patience: 2,
            plateau_factor: 0.1,
            min_lr: 1e-6,
            frames: 200,
            loss: MarginParams { scale: 35.0, margin: 0.2, topk_penalty: 0.06, top_k: 5, kind: MarginKind::Am },
            subcenters: 3,
            margin: MarginSchedule { kind: ScheduleKind::Linear, start: 0.0, end: 0.2, total_steps: 100 },
            drop_perturbed: false,
            dim: 32,
            heads: 4,
            queries: 2,
            embedding_dim: 512,
            corpus: SynthConfig::default(),
        }
    }

    /// Desk-scale fine-tuning: AAM-Softmax without Inter-TopK, margin ramped
    /// exponentially 0.2 -> 0.5, 600-frame crops, speed-perturbed classes
    /// dropped, plateau factor 0.5.
    pub fn stage2() -> Self {
        Self {
            stage: Stage::FineTune,
            steps: 100,
            lr: 5e-3,
            plateau_factor: 0.5,
            frames: 600,
            loss: MarginParams { topk_penalty: 0.0, kind: MarginKind::Aam, ..Self::stage1().loss },
            margin: MarginSchedule { kind: ScheduleKind::Exponential, start: 0.2, end: 0.5, total_steps: 50 },
            drop_perturbed: true,
            ..Self::stage1()
        }
    }

    /// Full-scale settings: lr 0.08 (base) or 8e-5 (fine-tune), validation
    /// every 2000 steps.
    pub fn full_scale(stage: Stage) -> Self {
        match stage {
            Stage::Base => Self { lr: 0.08, validate_every: 2000, ..Self::stage1() },
            Stage::FineTune => Self { lr: 8e-5, validate_every: 2000, ..Self::stage2() },
        }
    }

    pub fn preset(stage: Stage) -> Self {
        match stage {
            Stage::Base => Self::stage1(),
            Stage::FineTune => Self::stage2(),
        }
    }

    /// Inter-TopK is active when the penalty is positive.
    pub fn inter_topk_enabled(&self) -> bool {
        self.loss.topk_penalty > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.validate_every == 0 || self.frames < 2 {
            return Err(invalid!("steps, batch_size, validate_every must be >= 1 and frames >= 2"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(invalid!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(invalid!("momentum must lie in [0, 1) and weight_decay >= 0"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) || !(self.min_lr >= 0.0) {
            return Err(invalid!("plateau_factor must lie in (0, 1) and min_lr >= 0"));
        }
        MarginSchedule::new(self.margin.kind, self.margin.start, self.margin.end, self.margin.total_steps)?;
        self.corpus.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {}: expected `key = value`", n + 1)))?;
            pairs.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = Self::stage1();
        if let Some((n, _, v)) = pairs.iter().rev().find(|(_, k, _)| k == "stage") {
            cfg = match v.as_str() {
                "1" => Self::stage1(),
                "2" => Self::stage2(),
                _ => return Err(Error::Format(format!("config line {n}: stage must be 1 or 2, got `{v}`"))),
            };
        }
        for (n, k, v) in &pairs {
            cfg.set(k, v).map_err(|e| Error::Format(format!("config line {n}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn p<T: FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse `{v}`"))
        }
        match key {
            "stage" => {}
            "steps" => self.steps = p(value)?,
            "batch_size" => self.batch_size = p(value)?,
            "lr" => self.lr = p(value)?,
            "momentum" => self.momentum = p(value)?,
            "weight_decay" => self.weight_decay = p(value)?,
            "validate_every" => self.validate_every = p(value)?,
            "patience" => self.patience = p(value)?,
            "plateau_factor" => self.plateau_factor = p(value)?,
            "min_lr" => self.min_lr = p(value)?,
            "frames" => self.frames = p(value)?,
            "loss" => {
                self.loss.kind = match value {
                    "am" => MarginKind::Am,
                    "aam" => MarginKind::Aam,
                    _ => return Err(format!("loss must be `am` or `aam`, got `{value}`")),
                }
            }
            "scale" => self.loss.scale = p(value)?,
            "topk_penalty" => self.loss.topk_penalty = p(value)?,
            "top_k" => self.loss.top_k = p(value)?,
            "subcenters" => self.subcenters = p(value)?,
            "margin_schedule" => {
                self.margin.kind = match value {
                    "linear" => ScheduleKind::Linear,
                    "exponential" => ScheduleKind::Exponential,
                    _ => return Err(format!("margin_schedule must be `linear` or `exponential`, got `{value}`")),
                }
            }
            "margin_start" => self.margin.start = p(value)?,
            "margin_end" => self.margin.end = p(value)?,
            "margin_steps" => self.margin.total_steps = p(value)?,
            "drop_perturbed" => self.drop_perturbed = p(value)?,
            "dim" => self.dim = p(value)?,
            "heads" => self.heads = p(value)?,
            "queries" => self.queries = p(value)?,
            "embedding_dim" => self.embedding_dim = p(value)?,
            "speakers" => self.corpus.speakers = p(value)?,
            "utterances" => self.corpus.utterances_per_speaker = p(value)?,
            "validation_utterances" => self.corpus.validation_per_speaker = p(value)?,
            "input_dim" => self.corpus.input_dim = p(value)?,
            "corpus_seed" => self.corpus.seed = p(value)?,
            "speed_perturb" => self.corpus.speed_perturb = p(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }
}

impl fmt::Display for TrainConfig {
    /// The resolved configuration in the same `key = value` form.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = |k| if k == MarginKind::Am { "am" } else { "aam" };
        let sched = |k| if k == ScheduleKind::Linear { "linear" } else { "exponential" };
        let lines = [
            ("stage", if self.stage == Stage::Base { "1".to_string() } else { "2".to_string() }),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("validate_every", self.validate_every.to_string()),
            ("patience", self.patience.to_string()),
            ("plateau_factor", self.plateau_factor.to_string()),
            ("min_lr", self.min_lr.to_string()),
            ("frames", self.frames.to_string()),
            ("loss", kind(self.loss.kind).to_string()),
            ("scale", self.loss.scale.to_string()),
            ("topk_penalty", self.loss.topk_penalty.to_string()),
            ("top_k", self.loss.top_k.to_string()),
            ("subcenters", self.subcenters.to_string()),
            ("margin_schedule", sched(self.margin.kind).to_string()),
            ("margin_start", self.margin.start.to_string()),
            ("margin_end", self.margin.end.to_string()),
            ("margin_steps", self.margin.total_steps.to_string()),
            ("drop_perturbed", self.drop_perturbed.to_string()),
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("queries", self.queries.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("speakers", self.corpus.speakers.to_string()),
            ("utterances", self.corpus.utterances_per_speaker.to_string()),
            ("validation_utterances", self.corpus.validation_per_speaker.to_string()),
            ("input_dim", self.corpus.input_dim.to_string()),
            ("corpus_seed", self.corpus.seed.to_string()),
            ("speed_perturb", self.corpus.speed_perturb.to_string()),
        ];
        for (k, v) in lines {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_two_preset() {
        let c = TrainConfig::parse("stage = 2\n").unwrap();
        assert_eq!(c.loss.kind, MarginKind::Aam);
        assert!(!c.inter_topk_enabled());
        assert_eq!(c.margin.kind, ScheduleKind::Exponential);
        assert_eq!((c.margin.start, c.margin.end), (0.2, 0.5));
        assert_eq!(c.frames, 600);
        assert!(c.drop_perturbed);
        assert_eq!(c.plateau_factor, 0.5);
    }

    #[test]
    fn overrides_apply_after_the_preset() {
        let c = TrainConfig::parse("lr = 0.5 # comment\nstage = 2\n\nsteps=7").unwrap();
        assert_eq!((c.lr, c.steps, c.stage), (0.5, 7, Stage::FineTune));
    }

    #[test]
    fn display_round_trips() {
        let c = TrainConfig::stage2();
        assert_eq!(TrainConfig::parse(&c.to_string()).unwrap(), c);
    }

    #[test]
    fn bad_lines_name_the_line() {
        let e = TrainConfig::parse("steps = 3\nbogus = 1").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
        assert!(TrainConfig::parse("no equals sign").is_err());
        assert!(TrainConfig::parse("lr = -1").is_err());
    }
}
