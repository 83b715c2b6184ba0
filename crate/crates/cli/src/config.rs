//! Experiment configuration file.

use std::path::{Path, PathBuf};

use covnoise::awd::Normalization;
use covnoise::data::sha256_hex;
use covnoise::model::{LossKind, MlpConfig};
use covnoise::spectral::{NullMean, DEFAULT_SPIKE_THRESHOLD};
use covnoise::suppression::SuppressionConfig;
use covnoise::trainer::{default_target, Batching, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub analyze: AnalyzeSection,
    #[serde(default)]
    pub suppress: SuppressSection,
    #[serde(default)]
    pub synth: SynthSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Idx,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Source {
    pub url: String,
    pub sha256: String,
    /// File name inside `dataset.path`.
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub name: String,
    #[serde(default = "default_format")]
    pub format: DatasetFormat,
    /// Directory holding the files; relative paths resolve against the config file.
    pub path: PathBuf,
    /// IDX image file, or CIFAR-10 batch files.
    pub files: Vec<String>,
    /// IDX label file.
    #[serde(default)]
    pub labels: Option<String>,
    /// Pinned digests of the files as stored on disk.
    #[serde(default)]
    pub sha256: Vec<String>,
    #[serde(default)]
    pub sources: Vec<Source>,
    pub classes: Vec<usize>,
    pub per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_format() -> DatasetFormat {
    DatasetFormat::Idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dims: Vec<usize>,
    pub focal_layer: usize,
    pub loss: LossKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub checkpoint_epochs: Option<Vec<usize>>,
    /// Defaults to 1.0 for cross-entropy and 0.95 for MSE.
    pub target_accuracy: Option<f64>,
    pub early_stop: bool,
    pub reshuffle: bool,
    pub batching: Batching,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::for_loss(LossKind::Ce);
        Self {
            batch: t.batch,
            lr: t.lr,
            epochs: t.epochs,
            seed: t.seed,
            checkpoint_epochs: None,
            target_accuracy: None,
            early_stop: t.early_stop,
            reshuffle: t.reshuffle,
            batching: t.batching,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSourceKind {
    Independent,
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    Centered,
    Uncentered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    pub top_n: usize,
    pub n_pairs: usize,
    pub rand_trials: usize,
    pub pair_source: PairSourceKind,
    pub covariance: CovarianceKind,
    pub m_threshold: f64,
    pub null_mean: NullMean,
    pub normalization: Normalization,
    /// Batch size of the noise model; defaults to `train.batch`.
    pub batch: Option<usize>,
    pub seed: u64,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            top_n: 300,
            n_pairs: 200,
            rand_trials: 5,
            pair_source: PairSourceKind::Independent,
            covariance: CovarianceKind::Centered,
            m_threshold: DEFAULT_SPIKE_THRESHOLD,
            null_mean: NullMean::Rounded,
            normalization: Normalization::Batch,
            batch: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuppressSection {
    pub theta: f64,
    pub eps_tail: f64,
    pub eps_bg: f64,
    pub homogenize: bool,
    pub batch: usize,
    pub seed: u64,
    /// Directions of the global Hessian used; defaults to `analyze.top_n`.
    pub top_n: Option<usize>,
}

impl Default for SuppressSection {
    fn default() -> Self {
        let s = SuppressionConfig::default();
        Self {
            theta: s.theta,
            eps_tail: s.eps_tail,
            eps_bg: s.eps_bg,
            homogenize: s.homogenize,
            batch: 200,
            seed: 1,
            top_n: None,
        }
    }
}

impl SuppressSection {
    pub fn suppression(&self) -> SuppressionConfig {
        SuppressionConfig {
            theta: self.theta,
            eps_tail: self.eps_tail,
            eps_bg: self.eps_bg,
            homogenize: self.homogenize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub seed: u64,
    pub spiked_dim: usize,
    pub spiked_m: usize,
    pub spiked_trials: usize,
    pub commutator_dim: usize,
    pub commutator_m: usize,
    pub commutator_pairs: usize,
    pub rsm_dim: usize,
    pub rsm_sigma: f64,
    pub rsm_trials: usize,
    pub ensemble_samples: usize,
    pub jitter_max: f64,
    pub decay_samples: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            seed: 0,
            spiked_dim: 2000,
            spiked_m: 20,
            spiked_trials: 5,
            commutator_dim: 500,
            commutator_m: 10,
            commutator_pairs: 5,
            rsm_dim: 50,
            rsm_sigma: 1e-3,
            rsm_trials: 10_000,
            ensemble_samples: 4000,
            jitter_max: 0.1,
            decay_samples: 60,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config; a relative dataset path is resolved
    /// against the directory of the file.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        let mut cfg = Self::parse(&text)?;
        if cfg.dataset.path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.dataset.path = dir.join(&cfg.dataset.path);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        let d = &self.dataset;
        if d.classes.len() < 2 {
            return bad("dataset.classes needs at least two classes".into());
        }
        if d.per_class == 0 {
            return bad("dataset.per_class must be positive".into());
        }
        if d.format == DatasetFormat::Idx && (d.files.len() != 1 || d.labels.is_none()) {
            return bad("idx datasets need one entry in dataset.files and dataset.labels".into());
        }
        if !d.sha256.is_empty() && d.sha256.len() != d.files.len() + usize::from(d.labels.is_some()) {
            return bad("dataset.sha256 must list one digest per file (images then labels)".into());
        }
        if self.model.hidden_dims.is_empty() {
            return bad("model.hidden_dims must not be empty".into());
        }
        self.mlp()?;
        self.train_config().validate()?;
        let a = &self.analyze;
        if a.top_n < 2 || a.n_pairs == 0 || a.rand_trials == 0 {
            return bad("analyze.top_n >= 2, n_pairs >= 1 and rand_trials >= 1 are required".into());
        }
        if !(a.m_threshold > 0.0 && a.m_threshold <= 1.0) {
            return bad("analyze.m_threshold must lie in (0, 1]".into());
        }
        self.suppress.suppression().validate()?;
        if self.suppress.batch == 0 {
            return bad("suppress.batch must be positive".into());
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self.dataset.format {
            DatasetFormat::Idx => 784,
            DatasetFormat::Cifar10 => 3072,
        }
    }

    pub fn mlp(&self) -> CliResult<MlpConfig> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.model.hidden_dims);
        dims.push(self.dataset.classes.len());
        Ok(MlpConfig::new(dims, self.model.focal_layer, self.model.loss)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch: t.batch,
            lr: t.lr,
            epochs: t.epochs,
            seed: t.seed,
            target_accuracy: t.target_accuracy.unwrap_or(default_target(self.model.loss)),
            early_stop: t.early_stop,
            checkpoint_epochs: t.checkpoint_epochs.clone(),
            reshuffle: t.reshuffle,
            batching: t.batching,
        }
    }

    pub fn analysis_batch(&self) -> usize {
        self.analyze.batch.unwrap_or(self.train.batch)
    }

    /// Applies `--seed-override` to every seed in the file.
    pub fn override_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self.analyze.seed = seed;
        self.suppress.seed = seed;
        self.synth.seed = seed;
    }

    /// Digest of the whole configuration (dataset path excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.dataset.path = PathBuf::new();
        digest(&c)
    }

    /// Digest of the sections that determine a trained network.
    pub fn lineage(&self) -> String {
        let mut d = self.dataset.clone();
        d.path = PathBuf::new();
        digest(&(&d, &self.model, &self.train))
    }
}

fn digest<S: Serialize>(v: &S) -> String {
    sha256_hex(&serde_json::to_vec(v).expect("config serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"
[dataset]
name = "mnist"
path = "data"
files = ["images-idx3-ubyte.gz"]
labels = "labels-idx1-ubyte.gz"
classes = [0, 1, 2]
per_class = 10

[model]
hidden_dims = [8, 8]
focal_layer = 1
loss = "ce"
"#;

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::parse(MIN).unwrap();
        assert_eq!(c.train.batch, 50);
        assert_eq!(c.analyze.top_n, 300);
        assert_eq!(c.mlp().unwrap().layer_dims, vec![784, 8, 8, 3]);
        assert_eq!(c.train_config().target_accuracy, 1.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MIN.replace("per_class = 10", "per_class = 10\nbogus = 1");
        assert!(matches!(ExperimentConfig::parse(&text), Err(CliError::Config(_))));
        let text = format!("{MIN}\n[analyze]\ntopn = 3\n");
        assert!(ExperimentConfig::parse(&text).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let text = MIN.replace("focal_layer = 1", "focal_layer = 7");
        assert!(ExperimentConfig::parse(&text).is_err());
        let text = format!("{MIN}\n[suppress]\ntheta = 2.0\n");
        assert!(ExperimentConfig::parse(&text).is_err());
    }

    #[test]
    fn lineage_ignores_analysis_settings() {
        let a = ExperimentConfig::parse(MIN).unwrap();
        let mut b = a.clone();
        b.analyze.top_n = 10;
        assert_eq!(a.lineage(), b.lineage());
        assert_ne!(a.hash(), b.hash());
        b.train.lr = 0.5;
        assert_ne!(a.lineage(), b.lineage());
    }
}
