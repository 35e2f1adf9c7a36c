//! Run configuration: a single flat-key JSON document plus typed views.
//!
//! The file holds every knob with a default, so `{}` is a valid config.
//! Command-line flags override file values before the typed views
//! ([`ModelConfig`], [`TrainConfig`], [`DataConfig`]) are extracted, and the
//! merged document is what gets persisted next to run artifacts.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::data::SynthSpec;
use crate::LossVariant;

/// Which feature paths the classifier sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Full model: shared extractor, per-domain extractors, discriminator.
    SharedPrivate,
    /// Shared extractor only; the domain half of the classifier input is
    /// zero.
    SharedOnly,
    /// Per-domain extractors only; no shared extractor, no discriminator.
    DomainOnly,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::SharedPrivate => "shared-private",
            Mode::SharedOnly => "shared-only",
            Mode::DomainOnly => "domain-only",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "shared-private" => Ok(Mode::SharedPrivate),
            "shared-only" => Ok(Mode::SharedOnly),
            "domain-only" => Ok(Mode::DomainOnly),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected shared-private, shared-only, or domain-only)"
            ))),
        }
    }
}

impl FromStr for LossVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<LossVariant> {
        match s {
            "nll" => Ok(LossVariant::Nll),
            "l2" => Ok(LossVariant::L2),
            other => Err(Error::Config(format!("unknown loss {other:?} (expected nll or l2)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Mlp,
    Cnn,
}

impl fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExtractorKind::Mlp => "mlp",
            ExtractorKind::Cnn => "cnn",
        })
    }
}

impl FromStr for ExtractorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<ExtractorKind> {
        match s {
            "mlp" => Ok(ExtractorKind::Mlp),
            "cnn" => Ok(ExtractorKind::Cnn),
            other => Err(Error::Config(format!("unknown extractor {other:?} (expected mlp or cnn)"))),
        }
    }
}

/// Where labeled domains take their unlabeled pools from during the
/// discriminator rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnlabeledSource {
    /// Feed the labeled samples' features back in as the unlabeled pool.
    ReuseLabeled,
    /// Use only the domain's dedicated unlabeled corpus.
    Separate,
    /// Union of both pools.
    Both,
}

impl fmt::Display for UnlabeledSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UnlabeledSource::ReuseLabeled => "reuse-labeled",
            UnlabeledSource::Separate => "separate",
            UnlabeledSource::Both => "both",
        })
    }
}

impl FromStr for UnlabeledSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<UnlabeledSource> {
        match s {
            "reuse-labeled" => Ok(UnlabeledSource::ReuseLabeled),
            "separate" => Ok(UnlabeledSource::Separate),
            "both" => Ok(UnlabeledSource::Both),
            other => Err(Error::Config(format!(
                "unknown unlabeled source {other:?} (expected reuse-labeled, separate, or both)"
            ))),
        }
    }
}

/// Feature extractor architecture, shared between F_s and the F_d family;
/// only the output width differs per use.
#[derive(Debug, Clone, PartialEq)]
pub enum ExtractorConfig {
    Mlp { input_dim: usize, hidden_dims: Vec<usize> },
    Cnn { embed_dim: usize, kernel_widths: Vec<usize>, kernels_per_width: usize, trainable_embeddings: bool },
}

/// Architecture view assembled from the flat config.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub shared_dim: usize,
    pub domain_dim: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub mode: Mode,
    pub loss: LossVariant,
    pub extractor: ExtractorConfig,
}

/// Optimization-loop view assembled from the flat config.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub k: usize,
    pub lr_main: f64,
    pub lr_d: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub seed: u64,
    pub unlabeled_source: UnlabeledSource,
}

/// Data source view assembled from the flat config.
#[derive(Debug, Clone, PartialEq)]
pub enum DataConfig {
    Manifest { path: String, vocab_size: usize },
    Synthetic { spec: SynthSpec, unlabeled_only: Vec<String> },
}

fn d_mode() -> Mode {
    Mode::SharedPrivate
}
fn d_loss() -> LossVariant {
    LossVariant::Nll
}
fn d_extractor() -> ExtractorKind {
    ExtractorKind::Mlp
}
fn d_n_classes() -> usize {
    2
}
fn d_shared_dim() -> usize {
    128
}
fn d_domain_dim() -> usize {
    64
}
fn d_dropout() -> f64 {
    0.4
}
fn d_bn_momentum() -> f64 {
    0.1
}
fn d_input_dim() -> usize {
    5000
}
fn d_hidden_dims() -> Vec<usize> {
    vec![1000, 500]
}
fn d_embed_dim() -> usize {
    100
}
fn d_kernel_widths() -> Vec<usize> {
    vec![3, 4, 5]
}
fn d_kernels_per_width() -> usize {
    200
}
fn d_true() -> bool {
    true
}
fn d_lambda() -> f64 {
    0.05
}
fn d_k() -> usize {
    5
}
fn d_lr() -> f64 {
    1e-4
}
fn d_batch_size() -> usize {
    8
}
fn d_max_iterations() -> usize {
    5000
}
fn d_eval_every() -> usize {
    50
}
fn d_patience() -> usize {
    10
}
fn d_seed() -> u64 {
    1
}
fn d_unlabeled_source() -> UnlabeledSource {
    UnlabeledSource::ReuseLabeled
}
fn d_data_kind() -> String {
    "synthetic".to_string()
}
fn d_vocab_size() -> usize {
    5000
}
fn d_synth_domains() -> usize {
    3
}
fn d_synth_labeled() -> usize {
    200
}
fn d_synth_unlabeled() -> usize {
    200
}
fn d_synth_shared_signal() -> f64 {
    1.0
}
fn d_synth_domain_signal() -> f64 {
    1.0
}
fn d_synth_noise() -> f64 {
    0.5
}
fn d_folds() -> usize {
    5
}

/// The on-disk configuration document. Every key has a default; unknown
/// keys are rejected so typos surface immediately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    // Model.
    #[serde(default = "d_mode")]
    pub mode: Mode,
    #[serde(default = "d_loss")]
    pub loss: LossVariant,
    #[serde(default = "d_extractor")]
    pub extractor: ExtractorKind,
    #[serde(default = "d_n_classes")]
    pub n_classes: usize,
    #[serde(default = "d_shared_dim")]
    pub shared_dim: usize,
    #[serde(default = "d_domain_dim")]
    pub domain_dim: usize,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default = "d_bn_momentum")]
    pub bn_momentum: f64,
    // MLP extractor.
    #[serde(default = "d_input_dim")]
    pub input_dim: usize,
    #[serde(default = "d_hidden_dims")]
    pub hidden_dims: Vec<usize>,
    // CNN extractor.
    #[serde(default = "d_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "d_kernel_widths")]
    pub kernel_widths: Vec<usize>,
    #[serde(default = "d_kernels_per_width")]
    pub kernels_per_width: usize,
    #[serde(default)]
    pub embeddings_path: Option<String>,
    #[serde(default = "d_true")]
    pub trainable_embeddings: bool,
    // Training.
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_lr")]
    pub lr_main: f64,
    #[serde(default = "d_lr")]
    pub lr_d: f64,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_unlabeled_source")]
    pub unlabeled_source: UnlabeledSource,
    // Data source: "manifest" or "synthetic".
    #[serde(default = "d_data_kind")]
    pub data_kind: String,
    #[serde(default)]
    pub manifest_path: Option<String>,
    #[serde(default = "d_vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "d_synth_domains")]
    pub synth_domains: usize,
    #[serde(default = "d_synth_labeled")]
    pub synth_labeled_per_domain: usize,
    #[serde(default = "d_synth_unlabeled")]
    pub synth_unlabeled_per_domain: usize,
    #[serde(default = "d_synth_shared_signal")]
    pub synth_shared_signal: f64,
    #[serde(default = "d_synth_domain_signal")]
    pub synth_domain_signal: f64,
    #[serde(default = "d_synth_noise")]
    pub synth_noise: f64,
    /// 0 means the generator's minimum for the domain count.
    #[serde(default)]
    pub synth_dim: usize,
    /// Domain ids whose labels are withheld after generation.
    #[serde(default)]
    pub synth_unlabeled_only: Vec<String>,
    // Cross-validation.
    #[serde(default = "d_folds")]
    pub folds: usize,
}

impl Default for Config {
    fn default() -> Config {
        serde_json::from_str("{}").expect("all keys have defaults")
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub k: Option<usize>,
    pub loss: Option<LossVariant>,
    pub mode: Option<Mode>,
    pub extractor: Option<ExtractorKind>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Config = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.lambda {
            self.lambda = v;
        }
        if let Some(v) = o.k {
            self.k = v;
        }
        if let Some(v) = o.loss {
            self.loss = v;
        }
        if let Some(v) = o.mode {
            self.mode = v;
        }
        if let Some(v) = o.extractor {
            self.extractor = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.lr_main > 0.0 && self.lr_d > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (batch norm needs batch statistics)".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0,1), got {}", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!("bn_momentum must be in [0,1], got {}", self.bn_momentum));
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2".into());
        }
        if self.shared_dim == 0 || self.domain_dim == 0 {
            return bad("feature dimensions must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if self.hidden_dims.iter().any(|&d| d == 0) || self.input_dim == 0 {
            return bad("MLP dimensions must be positive".into());
        }
        if self.kernel_widths.is_empty()
            || self.kernel_widths.iter().any(|&w| w == 0)
            || self.kernels_per_width == 0
            || self.embed_dim == 0
        {
            return bad("CNN dimensions must be positive".into());
        }
        if self.folds < 3 {
            return bad("folds must be at least 3".into());
        }
        match self.data_kind.as_str() {
            "manifest" => {
                if self.manifest_path.is_none() {
                    return bad("data_kind \"manifest\" requires manifest_path".into());
                }
                if self.vocab_size == 0 {
                    return bad("vocab_size must be positive".into());
                }
            }
            "synthetic" => {
                if self.synth_domains == 0 || self.synth_labeled_per_domain == 0 {
                    return bad("synthetic data needs at least one domain and one sample".into());
                }
                if self.extractor == ExtractorKind::Cnn {
                    return bad("synthetic data is dense, which needs the mlp extractor".into());
                }
            }
            other => return bad(format!("unknown data_kind {other:?} (expected manifest or synthetic)")),
        }
        if self.extractor == ExtractorKind::Cnn && self.embeddings_path.is_none() {
            return bad("cnn extractor requires embeddings_path".into());
        }
        Ok(())
    }

    pub fn extractor_config(&self) -> ExtractorConfig {
        match self.extractor {
            ExtractorKind::Mlp => ExtractorConfig::Mlp {
                input_dim: self.input_dim,
                hidden_dims: self.hidden_dims.clone(),
            },
            ExtractorKind::Cnn => ExtractorConfig::Cnn {
                embed_dim: self.embed_dim,
                kernel_widths: self.kernel_widths.clone(),
                kernels_per_width: self.kernels_per_width,
                trainable_embeddings: self.trainable_embeddings,
            },
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_classes: self.n_classes,
            shared_dim: self.shared_dim,
            domain_dim: self.domain_dim,
            dropout: self.dropout,
            bn_momentum: self.bn_momentum,
            mode: self.mode,
            loss: self.loss,
            extractor: self.extractor_config(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            k: self.k,
            lr_main: self.lr_main,
            lr_d: self.lr_d,
            batch_size: self.batch_size,
            max_iterations: self.max_iterations,
            eval_every: self.eval_every,
            patience: self.patience,
            seed: self.seed,
            unlabeled_source: self.unlabeled_source,
        }
    }

    pub fn data_config(&self) -> DataConfig {
        match self.data_kind.as_str() {
            "manifest" => DataConfig::Manifest {
                path: self.manifest_path.clone().expect("validated"),
                vocab_size: self.vocab_size,
            },
            _ => {
                let mut spec = SynthSpec::new(
                    self.synth_domains,
                    self.synth_labeled_per_domain,
                    self.synth_shared_signal,
                    self.synth_domain_signal,
                    self.synth_noise,
                    self.seed,
                );
                spec.unlabeled_per_domain = self.synth_unlabeled_per_domain;
                if self.synth_dim > 0 {
                    spec.dim = self.synth_dim;
                }
                DataConfig::Synthetic { spec, unlabeled_only: self.synth_unlabeled_only.clone() }
            }
        }
    }
}
