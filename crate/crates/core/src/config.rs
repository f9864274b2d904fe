//! Experiment configuration: a flat `key = value` text format with typed
//! validation, trivially parseable from any language, echoed verbatim into
//! every output directory for provenance.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::encoder::ShortTermConfig;
use crate::error::{Error, Result};
use crate::fusion::LossConfig;
use crate::model::ModelConfig;
use crate::refine::RefineConfig;
use crate::trainer::TrainConfig;

/// Every knob of the pipeline in one place.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Input CSV path (`user,item,timestamp`).
    pub dataset: PathBuf,
    /// Input graphs per training job; the log is sliced into `intervals + 1`
    /// equal windows and the last is held out as the prediction target.
    pub intervals: usize,
    pub seed: u64,

    // Refinement.
    pub disable_refine: bool,
    pub beta: f64,
    pub min_sim: f64,
    pub max_aug_per_user: usize,
    /// 0 keeps exact similarities; otherwise top-k truncation per item.
    pub top_k: usize,
    pub min_items_for_detection: usize,

    // Model.
    pub dim: usize,
    pub gcn_layers: usize,
    pub edge_dropout: f64,
    pub message_dropout: f64,
    pub num_heads: usize,
    pub attention_layers: usize,
    pub max_seq_len: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub n_pr: usize,
    pub detach_gate_in_loss: bool,
    pub disable_mean_branch: bool,
    pub disable_gru_branch: bool,
    /// NaN means "learned gate"; otherwise the constant in `[0,1]`.
    pub fixed_gate: Option<f64>,

    // Training.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub eval_every: usize,
    pub patience: usize,

    // Evaluation.
    pub topn: Vec<usize>,
    /// 0 ranks the full catalog; otherwise this many sampled negatives.
    pub candidate_negatives: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            intervals: 5,
            seed: 0,
            disable_refine: false,
            beta: 0.5,
            min_sim: 0.7,
            max_aug_per_user: 10,
            top_k: 50,
            min_items_for_detection: 3,
            dim: 64,
            gcn_layers: 2,
            edge_dropout: 0.5,
            message_dropout: 0.5,
            num_heads: 2,
            attention_layers: 2,
            max_seq_len: 30,
            lambda1: 0.1,
            lambda2: 1e-2,
            n_pr: 1,
            detach_gate_in_loss: false,
            disable_mean_branch: false,
            disable_gru_branch: false,
            fixed_gate: None,
            epochs: 100,
            batch_size: 256,
            learning_rate: 1e-3,
            lr_decay: 0.96,
            eval_every: 10,
            patience: 0,
            topn: vec![5, 10, 20],
            candidate_negatives: 0,
        }
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl ExperimentConfig {
    /// Parses the flat `key = value` document. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: BTreeMap<String, ()> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if seen.insert(key.to_string(), ()).is_some() {
                return Err(Error::Config(format!("duplicate key {key}")));
            }
            match key {
                "dataset" => cfg.dataset = PathBuf::from(value),
                "intervals" => cfg.intervals = parse_num(key, value)?,
                "seed" => cfg.seed = parse_num(key, value)?,
                "disable_refine" => cfg.disable_refine = parse_bool(key, value)?,
                "beta" => cfg.beta = parse_num(key, value)?,
                "min_sim" => cfg.min_sim = parse_num(key, value)?,
                "max_aug_per_user" => cfg.max_aug_per_user = parse_num(key, value)?,
                "top_k" => cfg.top_k = parse_num(key, value)?,
                "min_items_for_detection" => {
                    cfg.min_items_for_detection = parse_num(key, value)?
                }
                "dim" => cfg.dim = parse_num(key, value)?,
                "gcn_layers" => cfg.gcn_layers = parse_num(key, value)?,
                "edge_dropout" => cfg.edge_dropout = parse_num(key, value)?,
                "message_dropout" => cfg.message_dropout = parse_num(key, value)?,
                "num_heads" => cfg.num_heads = parse_num(key, value)?,
                "attention_layers" => cfg.attention_layers = parse_num(key, value)?,
                "max_seq_len" => cfg.max_seq_len = parse_num(key, value)?,
                "lambda1" => cfg.lambda1 = parse_num(key, value)?,
                "lambda2" => cfg.lambda2 = parse_num(key, value)?,
                "n_pr" => cfg.n_pr = parse_num(key, value)?,
                "detach_gate_in_loss" => cfg.detach_gate_in_loss = parse_bool(key, value)?,
                "disable_mean_branch" => cfg.disable_mean_branch = parse_bool(key, value)?,
                "disable_gru_branch" => cfg.disable_gru_branch = parse_bool(key, value)?,
                "fixed_gate" => {
                    cfg.fixed_gate = if value == "none" {
                        None
                    } else {
                        Some(parse_num(key, value)?)
                    }
                }
                "epochs" => cfg.epochs = parse_num(key, value)?,
                "batch_size" => cfg.batch_size = parse_num(key, value)?,
                "learning_rate" => cfg.learning_rate = parse_num(key, value)?,
                "lr_decay" => cfg.lr_decay = parse_num(key, value)?,
                "eval_every" => cfg.eval_every = parse_num(key, value)?,
                "patience" => cfg.patience = parse_num(key, value)?,
                "topn" => {
                    cfg.topn = value
                        .split(',')
                        .map(|s| parse_num("topn", s.trim()))
                        .collect::<Result<_>>()?;
                }
                "candidate_negatives" => cfg.candidate_negatives = parse_num(key, value)?,
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field validation on top of the per-module checks.
    pub fn validate(&self) -> Result<()> {
        if self.intervals == 0 {
            return Err(Error::Config("intervals must be >= 1".into()));
        }
        if self.topn.is_empty() || self.topn.iter().any(|&n| n == 0) {
            return Err(Error::Config("topn must list positive cutoffs".into()));
        }
        self.refine_config().validate()?;
        self.model_config().validate()?;
        self.train_config().validate()?;
        Ok(())
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            beta: self.beta,
            min_sim: self.min_sim,
            max_aug_per_user: self.max_aug_per_user,
            top_k: if self.top_k == 0 {
                None
            } else {
                Some(self.top_k)
            },
            min_items_for_detection: self.min_items_for_detection,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            short: ShortTermConfig {
                dim: self.dim,
                layers: self.gcn_layers,
                edge_dropout: self.edge_dropout,
                message_dropout: self.message_dropout,
            },
            num_heads: self.num_heads,
            attention_layers: self.attention_layers,
            max_seq_len: self.max_seq_len,
            loss: LossConfig {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                n_pr: self.n_pr,
            },
            detach_gate_in_loss: self.detach_gate_in_loss,
            disable_mean_branch: self.disable_mean_branch,
            disable_gru_branch: self.disable_gru_branch,
            fixed_gate: self.fixed_gate,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lr_decay: self.lr_decay,
            seed: self.seed,
            eval_every: self.eval_every,
            patience: self.patience,
        }
    }

    /// Serializes back to the flat format (the provenance echo).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset = {}", self.dataset.display());
        let _ = writeln!(s, "intervals = {}", self.intervals);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "disable_refine = {}", self.disable_refine);
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "min_sim = {}", self.min_sim);
        let _ = writeln!(s, "max_aug_per_user = {}", self.max_aug_per_user);
        let _ = writeln!(s, "top_k = {}", self.top_k);
        let _ = writeln!(s, "min_items_for_detection = {}", self.min_items_for_detection);
        let _ = writeln!(s, "dim = {}", self.dim);
        let _ = writeln!(s, "gcn_layers = {}", self.gcn_layers);
        let _ = writeln!(s, "edge_dropout = {}", self.edge_dropout);
        let _ = writeln!(s, "message_dropout = {}", self.message_dropout);
        let _ = writeln!(s, "num_heads = {}", self.num_heads);
        let _ = writeln!(s, "attention_layers = {}", self.attention_layers);
        let _ = writeln!(s, "max_seq_len = {}", self.max_seq_len);
        let _ = writeln!(s, "lambda1 = {}", self.lambda1);
        let _ = writeln!(s, "lambda2 = {}", self.lambda2);
        let _ = writeln!(s, "n_pr = {}", self.n_pr);
        let _ = writeln!(s, "detach_gate_in_loss = {}", self.detach_gate_in_loss);
        let _ = writeln!(s, "disable_mean_branch = {}", self.disable_mean_branch);
        let _ = writeln!(s, "disable_gru_branch = {}", self.disable_gru_branch);
        let _ = writeln!(
            s,
            "fixed_gate = {}",
            self.fixed_gate.map_or("none".into(), |v| v.to_string())
        );
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "lr_decay = {}", self.lr_decay);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(
            s,
            "topn = {}",
            self.topn
                .iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join(",")
        );
        let _ = writeln!(s, "candidate_negatives = {}", self.candidate_negatives);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_text() {
        let mut cfg = ExperimentConfig {
            dataset: PathBuf::from("data/log.csv"),
            ..ExperimentConfig::default()
        };
        cfg.beta = 0.3;
        cfg.fixed_gate = Some(0.25);
        cfg.topn = vec![5, 15, 20];
        let parsed = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = ExperimentConfig::parse(
            "# experiment\n\nbeta = 0.7   # inline comment\nmin_sim = 0.8\n",
        )
        .unwrap();
        assert_eq!(cfg.beta, 0.7);
        assert_eq!(cfg.min_sim, 0.8);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(
            ExperimentConfig::parse("betaa = 0.7\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn duplicate_key_rejected() {
        assert!(ExperimentConfig::parse("beta = 0.7\nbeta = 0.3\n").is_err());
    }

    #[test]
    fn cross_field_validation() {
        // dim not divisible by heads
        assert!(ExperimentConfig::parse("dim = 5\nnum_heads = 2\n").is_err());
        assert!(ExperimentConfig::parse("lambda1 = 1.5\n").is_err());
        assert!(ExperimentConfig::parse("gcn_layers = 4\n").is_err());
        assert!(ExperimentConfig::parse("beta = -0.1\n").is_err());
    }
}
