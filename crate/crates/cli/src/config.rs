//! Experiment configuration: one JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gralora_core::adapters::{AdapterKind, AdapterSpec};
use gralora_core::outlier::{Geometry, OutlierSpec};
use gralora_core::trainer::{OptimizerSpec, TaskStructure, TrainConfig};

pub const OUT_DIR_ENV: &str = "GRALORA_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub geometry: Geometry,
    pub adapter: AdapterConfig,
    pub outlier: OutlierConfig,
    pub sweep: SweepConfig,
    pub optimizer: OptimizerSpec,
    pub train: TrainSection,
    pub gradcheck: GradcheckConfig,
    pub rank_analysis: RankAnalysisConfig,
    pub equivalence: EquivalenceConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub r: usize,
    pub k: usize,
    /// `None` means `2r`.
    pub alpha: Option<f64>,
    /// LoRA share of the rank budget for hybrid adapters.
    pub hybrid_ratio: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            kind: AdapterKind::Gralora,
            r: 16,
            k: 2,
            alpha: None,
            hybrid_ratio: 0.5,
        }
    }
}

impl AdapterConfig {
    pub fn spec(&self, kind: AdapterKind, m: usize, n: usize) -> anyhow::Result<AdapterSpec> {
        let spec = match kind {
            AdapterKind::Lora => AdapterSpec::lora(m, n, self.r),
            AdapterKind::Gralora => AdapterSpec::gralora(m, n, self.r, self.k),
            AdapterKind::Hybrid => AdapterSpec::hybrid_with_ratio(m, n, self.r, self.k, self.hybrid_ratio)?,
        };
        let spec = match self.alpha {
            Some(a) => spec.with_alpha(a),
            None => spec,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutlierConfig {
    pub channels: Vec<usize>,
    pub magnitude_ratio: f64,
    /// Matrix container holding captured `N × T` activations.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activations_path: Option<PathBuf>,
}

impl Default for OutlierConfig {
    fn default() -> Self {
        Self {
            channels: vec![17],
            magnitude_ratio: 100.0,
            activations_path: None,
        }
    }
}

impl OutlierConfig {
    pub fn spec(&self) -> OutlierSpec {
        OutlierSpec {
            channels: self.channels.clone(),
            magnitude_ratio: self.magnitude_ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub ranks: Vec<usize>,
    pub k_values: Vec<usize>,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ranks: vec![8, 16, 32],
            k_values: vec![1, 2, 4],
            ratios: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            seeds: (0..20).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub structure: TaskStructure,
    pub target_rank: usize,
    pub blocks: usize,
    pub noise_std: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub eval_batches: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            m: 64,
            n: 64,
            structure: TaskStructure::BlockHeterogeneous,
            target_rank: 8,
            blocks: 2,
            noise_std: 0.01,
            epochs: t.epochs,
            steps_per_epoch: t.steps_per_epoch,
            batch_size: t.batch_size,
            eval_batches: t.eval_batches,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, optimizer: OptimizerSpec) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            batch_size: self.batch_size,
            eval_batches: self.eval_batches,
            optimizer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub h: f64,
    pub tolerance: f64,
    /// `None` checks every entry.
    pub max_probes_per_block: Option<usize>,
    pub inject_sign_flip: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-5,
            max_probes_per_block: Some(4),
            inject_sign_flip: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankAnalysisConfig {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub ranks: Vec<usize>,
    pub k_values: Vec<usize>,
    pub seeds: usize,
    /// A cell passes when at least this fraction of seeds hits `min(kr, M, N)`.
    pub min_match_fraction: f64,
}

impl Default for RankAnalysisConfig {
    fn default() -> Self {
        Self {
            m: 512,
            n: 512,
            ranks: vec![32],
            k_values: vec![1, 2, 4, 8],
            seeds: 20,
            min_match_fraction: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquivalenceConfig {
    pub k_values: Vec<usize>,
    pub adapters_per_k: usize,
    pub tolerance: f64,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        Self {
            k_values: vec![1, 2, 4, 8],
            adapters_per_k: 100,
            tolerance: 1e-12,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Checks shared by every subcommand.
    pub fn validate(&self) -> anyhow::Result<()> {
        let g = self.geometry;
        if g.m == 0 || g.n == 0 || g.t == 0 {
            bail!("geometry must be positive, got M={} N={} T={}", g.m, g.n, g.t);
        }
        if self.activations().is_none() {
            self.outlier.spec().validate(g.n)?;
        }
        if self.adapter.r == 0 || self.adapter.k == 0 {
            bail!("adapter rank and k must be positive");
        }
        Ok(())
    }

    pub fn activations(&self) -> Option<&Path> {
        self.outlier.activations_path.as_deref()
    }

    /// Canonical JSON with the output directory removed.
    pub fn canonical_json(&self) -> String {
        let mut echo = self.clone();
        echo.output_dir = None;
        serde_json::to_string(&echo).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of [`ExperimentConfig::canonical_json`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        hex::encode(digest)[..16].to_string()
    }
}

/// `--out`, then the environment, then the config file, then `out`.
pub fn resolve_out_dir(flag: Option<&Path>, env: Option<&str>, config: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(e) = env.filter(|e| !e.is_empty()) {
        return PathBuf::from(e);
    }
    config.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("out"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 3}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sweep": {"rank": [8]}}"#).is_err());
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"seed": 3}"#).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.sweep.seeds.len(), 20);
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output_dir: Some("elsewhere".into()),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn out_dir_precedence() {
        let cfg = Some(Path::new("from_cfg"));
        assert_eq!(resolve_out_dir(Some(Path::new("flag")), Some("env"), cfg), PathBuf::from("flag"));
        assert_eq!(resolve_out_dir(None, Some("env"), cfg), PathBuf::from("env"));
        assert_eq!(resolve_out_dir(None, None, cfg), PathBuf::from("from_cfg"));
        assert_eq!(resolve_out_dir(None, None, None), PathBuf::from("out"));
    }

    #[test]
    fn adapter_divisibility_surfaces() {
        let a = AdapterConfig {
            k: 3,
            ..AdapterConfig::default()
        };
        let err = a.spec(AdapterKind::Gralora, 256, 100).unwrap_err();
        assert!(err.to_string().contains("does not divide"), "{err}");
    }
}
