//! Experiment configuration: nested sections with defaults, strict key
//! checking, and cross-field feasibility validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{CorpusConfig, PartitionKind};
use crate::error::{Error, Result};
use crate::privacy::DpConfig;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct HmoleConfig {
    /// LoRA rank r.
    pub rank: usize,
    /// LoRA scaling numerator alpha (delta scaled by alpha / r).
    pub alpha: f64,
    /// Input dropout on the LoRA path during training.
    pub dropout: f64,
    /// k^e: experts activated per token, and the per-client minimum.
    pub k_e: usize,
    /// k^c: clients training each expert per round (exact).
    pub k_c: usize,
    /// b: per-client expert budget.
    pub b: usize,
    /// Total assignable domain experts per module.
    pub e_total: usize,
    /// Load-balance loss weight beta.
    pub beta: f64,
}

impl Default for HmoleConfig {
    fn default() -> Self {
        HmoleConfig {
            rank: 4,
            alpha: 16.0,
            dropout: 0.05,
            k_e: 2,
            k_c: 2,
            b: 4,
            e_total: 6,
            beta: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub clients: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay per round.
    pub lr_decay: f64,
    /// Sequences sampled into each client's embedding set (capped by the
    /// training-set size).
    pub embedding_set_size: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            clients: 4,
            rounds: 5,
            local_steps: 50,
            lr: 5e-5,
            lr_decay: 0.99,
            embedding_set_size: 32,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: CorpusConfig,
    pub partition: PartitionKind,
    /// Minimum training examples any client may end up with.
    pub min_train: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: CorpusConfig::default(),
            partition: PartitionKind::Dirichlet { alpha: 1.0 },
            min_train: 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub data: DataConfig,
    pub federation: FederationConfig,
    pub hmole: HmoleConfig,
    pub privacy: DpConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            backbone: BackboneConfig::default(),
            data: DataConfig::default(),
            federation: FederationConfig::default(),
            hmole: HmoleConfig::default(),
            privacy: DpConfig::default(),
            seeds: vec![42, 62, 82],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.data.corpus.validate()?;
        self.privacy.validate()?;

        let h = &self.hmole;
        if h.rank == 0 {
            return Err(Error::config("hmole.rank", "must be >= 1"));
        }
        if h.alpha <= 0.0 {
            return Err(Error::config("hmole.alpha", "must be > 0"));
        }
        if !(0.0..1.0).contains(&h.dropout) {
            return Err(Error::config("hmole.dropout", "must be in [0, 1)"));
        }
        if h.e_total == 0 {
            return Err(Error::config("hmole.e_total", "must be >= 1"));
        }
        if h.k_e == 0 {
            return Err(Error::config("hmole.k_e", "must be >= 1"));
        }
        if h.k_e > h.b {
            return Err(Error::config("hmole.k_e", format!("k_e = {} exceeds b = {}", h.k_e, h.b)));
        }
        if h.beta < 0.0 {
            return Err(Error::config("hmole.beta", "must be >= 0"));
        }

        let f = &self.federation;
        if f.clients == 0 {
            return Err(Error::config("federation.clients", "must be >= 1"));
        }
        if f.rounds == 0 {
            return Err(Error::config("federation.rounds", "must be >= 1"));
        }
        if f.lr <= 0.0 {
            return Err(Error::config("federation.lr", "must be > 0"));
        }
        if !(0.0 < f.lr_decay && f.lr_decay <= 1.0) {
            return Err(Error::config("federation.lr_decay", "must be in (0, 1]"));
        }
        if f.embedding_set_size == 0 {
            return Err(Error::config("federation.embedding_set_size", "must be >= 1"));
        }

        // Definition-1 feasibility across sections.
        if h.k_c > f.clients {
            return Err(Error::config(
                "hmole.k_c",
                format!("k_c = {} exceeds client count {}", h.k_c, f.clients),
            ));
        }
        if f.clients * h.k_e > h.e_total * h.k_c {
            return Err(Error::config(
                "hmole.k_e",
                format!(
                    "C*k_e = {} exceeds E_total*k_c = {}",
                    f.clients * h.k_e,
                    h.e_total * h.k_c
                ),
            ));
        }
        if h.e_total * h.k_c > f.clients * h.b {
            return Err(Error::config(
                "hmole.b",
                format!(
                    "E_total*k_c = {} exceeds C*b = {}",
                    h.e_total * h.k_c,
                    f.clients * h.b
                ),
            ));
        }

        // backbone must cover the synthetic vocabulary and sequence length
        if self.data.corpus.vocab_size > self.backbone.vocab_size {
            return Err(Error::config(
                "data.corpus.vocab_size",
                format!("exceeds backbone.vocab_size = {}", self.backbone.vocab_size),
            ));
        }
        let seq = self.data.corpus.instr_len + self.data.corpus.resp_len;
        if seq > self.backbone.max_seq_len {
            return Err(Error::config(
                "data.corpus.instr_len",
                format!("sequence length {} exceeds backbone.max_seq_len", seq),
            ));
        }
        if let PartitionKind::Dirichlet { alpha } = self.data.partition {
            if alpha <= 0.0 {
                return Err(Error::config("data.partition.alpha", "must be > 0"));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must contain at least one seed"));
        }
        Ok(())
    }

    /// Parse from JSON text; an empty document yields the defaults.
    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            if text.trim().is_empty() { ExperimentConfig::default() } else { serde_json::from_str(text)? };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = ExperimentConfig::from_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.hmole.e_total, 6);
        assert_eq!(cfg.federation.lr, 5e-5);
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_json().unwrap();
        assert_eq!(ExperimentConfig::from_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_str(r#"{"hmole": {"rnk": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("rnk"));
        assert!(ExperimentConfig::from_str(r#"{"bogus_section": {}}"#).is_err());
    }

    #[test]
    fn k_e_above_b_names_the_key() {
        let err = ExperimentConfig::from_str(r#"{"hmole": {"k_e": 5, "b": 4}}"#).unwrap_err();
        assert!(err.to_string().contains("hmole.k_e"), "{}", err);
    }

    #[test]
    fn cross_field_feasibility() {
        // C*k_e > E_total*k_c
        let err = ExperimentConfig::from_str(
            r#"{"hmole": {"e_total": 2, "k_e": 2, "k_c": 1}, "federation": {"clients": 4}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("hmole.k_e"), "{}", err);

        // E_total*k_c > C*b
        let err = ExperimentConfig::from_str(
            r#"{"hmole": {"e_total": 20, "k_c": 2, "b": 4}, "federation": {"clients": 4}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("hmole.b"), "{}", err);

        // k_c > C
        let err = ExperimentConfig::from_str(
            r#"{"hmole": {"k_c": 9, "e_total": 2, "k_e": 1, "b": 4}, "federation": {"clients": 2}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("hmole.k_c"), "{}", err);
    }

    #[test]
    fn vocab_and_length_coverage() {
        let err = ExperimentConfig::from_str(r#"{"data": {"corpus": {"vocab_size": 128}}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("vocab_size"), "{}", err);
        let err = ExperimentConfig::from_str(r#"{"data": {"corpus": {"instr_len": 80}}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("instr_len"), "{}", err);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(ExperimentConfig::from_file(Path::new("/nonexistent/cfg.json")).is_err());
    }
}
