//! Run configuration: ablation switches, hyperparameters, serialization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Module switches mirroring the ablation grid. Gated similarity graphs only
/// exist inside the augmented adjacency, so `use_asg` requires `use_age`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_pe: bool,
    pub use_asg: bool,
    pub use_static_graphs: bool,
    pub use_age: bool,
    pub use_align: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_pe: true,
            use_asg: true,
            use_static_graphs: true,
            use_age: true,
            use_align: true,
        }
    }
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.use_asg && !self.use_age {
            return Err(Error::Config(
                "use_asg requires use_age (gated graphs live inside the augmented adjacency)"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Interaction-graph-only baseline with positional identifiers and the
    /// softmax recommendation loss.
    pub fn lightgcn_sl() -> Self {
        AblationFlags {
            use_pe: true,
            use_asg: false,
            use_static_graphs: false,
            use_age: true,
            use_align: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Softmax over the positive against in-batch positives plus the sampled
    /// negative.
    Sampled,
    /// Two-term form: (s+ - s-) / tau, kept for comparison.
    Literal,
}

/// Which embedding feeds the far endpoint of a gated edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AsgPairing {
    /// Text on the near endpoint, visual on the far one.
    Cross,
    /// Text on both endpoints.
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Dot,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Hidden width of all embeddings.
    pub d: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub lr: f64,
    /// Text/visual fusion weight.
    pub alpha: f64,
    /// Neighbors kept per row in similarity graphs.
    pub k: usize,
    /// Propagation depth.
    pub layers: usize,
    /// Interaction-edge drop ratio during training.
    pub rho: f64,
    /// Shared softmax temperature.
    pub tau: f64,
    pub seed: u64,
    pub flags: AblationFlags,
    pub loss_mode: LossMode,
    pub asg_pairing: AsgPairing,
    /// Adds the reverse alignment direction (visual anchors onto text).
    pub symmetric_align: bool,
    /// Averages the propagation input into the encoding along with the L
    /// propagated layers.
    pub include_layer0: bool,
    pub score: ScoreKind,
    pub eval_ks: Vec<usize>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Emit one JSON loss report per training step.
    pub log_losses: bool,
    /// Add wall-clock and per-stage timings to the epoch log.
    pub profile: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 64,
            batch_size: 1024,
            max_epochs: 1000,
            patience: 20,
            lr: 1e-3,
            alpha: 0.5,
            k: 10,
            layers: 3,
            rho: 0.8,
            tau: 0.2,
            seed: 42,
            flags: AblationFlags::default(),
            loss_mode: LossMode::Sampled,
            asg_pairing: AsgPairing::Cross,
            symmetric_align: false,
            include_layer0: false,
            score: ScoreKind::Dot,
            eval_ks: vec![5, 10, 20, 50],
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            log_losses: false,
            profile: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0,1], got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must be in [0,1), got {}", self.rho)));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.layers < 1 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.k < 1 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.d < 1 || self.batch_size < 1 || self.max_epochs < 1 {
            return Err(Error::Config("d, batch_size, max_epochs must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.eval_ks.is_empty() {
            return Err(Error::Config("eval_ks must not be empty".into()));
        }
        if self.eval_ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("eval_ks must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn from_toml_file(path: &Path) -> Result<TrainConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: TrainConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable fingerprint of the resolved configuration (FNV-1a over the
    /// canonical JSON encoding).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn asg_without_age_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.flags.use_asg = true;
        cfg.flags.use_age = false;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn alpha_out_of_range_rejected() {
        let cfg = TrainConfig {
            alpha: 1.5,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = TrainConfig::default();
        let b = TrainConfig::default();
        assert_eq!(a.hash(), b.hash());
        let c = TrainConfig {
            tau: 0.1,
            ..TrainConfig::default()
        };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn toml_roundtrip_with_overridden_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(
            &path,
            "tau = 0.1\nlayers = 5\n[flags]\nuse_pe = false\n",
        )
        .unwrap();
        let cfg = TrainConfig::from_toml_file(&path).unwrap();
        assert_eq!(cfg.tau, 0.1);
        assert_eq!(cfg.layers, 5);
        assert!(!cfg.flags.use_pe);
        assert_eq!(cfg.d, 64);
    }

    #[test]
    fn unknown_toml_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "no_such_field = 3\n").unwrap();
        assert!(TrainConfig::from_toml_file(&path).is_err());
    }
}
