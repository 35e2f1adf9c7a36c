//! The four-component model: shared extractor, per-domain extractors,
//! classifier, and multinomial domain discriminator.
//!
//! The classifier always sees a `shared_dim + domain_dim` concatenation;
//! whichever half has no extractor (by mode, or zero-vector inference for
//! unlabeled domains) is filled with zeros. The discriminator sees shared
//! features only and emits a softmax over all N domains for both loss
//! variants.
//!
//! Parameter ownership is strict: the discriminator's parameters form one
//! optimizer group, everything else (extractors, classifier, embeddings)
//! the other. Batch-norm running statistics are buffers, not parameters;
//! they move only when a forward pass is told to update them.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExtractorConfig, Mode, ModelConfig};
use crate::data::{EmbeddingTable, Payload};
use crate::error::{Error, Result};
use crate::tensor::nn::{dropout, BatchNorm, Linear, Phase};
use crate::tensor::{Tape, Tensor};
use crate::LossVariant;

/// Probability floor inside every log.
pub const PROB_FLOOR: f64 = 1e-12;

/// One mini-batch of model inputs.
#[derive(Debug, Clone)]
pub enum Batch {
    /// Dense count matrix `[B, input_dim]`.
    Dense(Tensor),
    /// Token-id sequences, one per sample.
    Tokens(Vec<Vec<usize>>),
}

impl Batch {
    pub fn rows(&self) -> usize {
        match self {
            Batch::Dense(x) => x.shape()[0],
            Batch::Tokens(ids) => ids.len(),
        }
    }

    /// Assembles a batch from payloads, which must all be of one kind.
    pub fn from_payloads(payloads: &[&Payload]) -> Result<Batch> {
        if payloads.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        match payloads[0] {
            Payload::Counts(first) => {
                let dim = first.dim;
                let mut data = vec![0.0; payloads.len() * dim];
                for (r, p) in payloads.iter().enumerate() {
                    match p {
                        Payload::Counts(sv) if sv.dim == dim => {
                            sv.scatter_into(&mut data[r * dim..(r + 1) * dim]);
                        }
                        Payload::Counts(sv) => {
                            return Err(Error::Data(format!(
                                "mixed feature dimensions in batch: {} vs {dim}",
                                sv.dim
                            )));
                        }
                        Payload::Tokens(_) => {
                            return Err(Error::Data("mixed payload kinds in batch".into()));
                        }
                    }
                }
                Ok(Batch::Dense(Tensor::new(vec![payloads.len(), dim], data, false)?))
            }
            Payload::Tokens(_) => {
                let mut ids = Vec::with_capacity(payloads.len());
                for p in payloads {
                    match p {
                        Payload::Tokens(t) => ids.push(t.clone()),
                        Payload::Counts(_) => {
                            return Err(Error::Data("mixed payload kinds in batch".into()));
                        }
                    }
                }
                Ok(Batch::Tokens(ids))
            }
        }
    }
}

/// Feed-forward extractor: each hidden layer is linear, ReLU, dropout; the
/// output layer is linear, ReLU.
#[derive(Debug)]
pub struct MlpExtractor {
    layers: Vec<Linear>,
}

impl MlpExtractor {
    pub fn new(input_dim: usize, hidden_dims: &[usize], out_dim: usize, rng: &mut ChaCha8Rng) -> MlpExtractor {
        let mut layers = Vec::with_capacity(hidden_dims.len() + 1);
        let mut prev = input_dim;
        for &h in hidden_dims {
            layers.push(Linear::new(prev, h, rng));
            prev = h;
        }
        layers.push(Linear::new(prev, out_dim, rng));
        MlpExtractor { layers }
    }

    fn forward(&self, tape: &mut Tape, x: &Tensor, phase: Phase, p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(tape, &h)?;
            h = tape.relu(&pre)?;
            if i < last {
                h = dropout(tape, &h, p, phase, rng)?;
            }
        }
        Ok(h)
    }

    fn params(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(Linear::params).collect()
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.layer{i}.weight"), layer.weight.clone()));
            out.push((format!("{prefix}.layer{i}.bias"), layer.bias.clone()));
        }
    }
}

/// Convolutional extractor: embedding lookup, parallel width-w convolutions
/// with ReLU and max-over-time pooling, dropout, then a linear projection
/// with ReLU.
#[derive(Debug)]
pub struct CnnExtractor {
    kernels: Vec<(usize, Tensor, Tensor)>,
    fc: Linear,
    max_width: usize,
}

impl CnnExtractor {
    pub fn new(
        embed_dim: usize,
        kernel_widths: &[usize],
        kernels_per_width: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<CnnExtractor> {
        if kernel_widths.is_empty() {
            return Err(Error::Config("cnn needs at least one kernel width".into()));
        }
        let mut kernels = Vec::with_capacity(kernel_widths.len());
        for &w in kernel_widths {
            let weight = Tensor::new(
                vec![w * embed_dim, kernels_per_width],
                crate::tensor::nn::xavier_uniform(w * embed_dim, kernels_per_width, rng),
                true,
            )?;
            let bias = Tensor::zeros(vec![kernels_per_width], true);
            kernels.push((w, weight, bias));
        }
        let fc = Linear::new(kernel_widths.len() * kernels_per_width, out_dim, rng);
        let max_width = *kernel_widths.iter().max().expect("nonempty");
        Ok(CnnExtractor { kernels, fc, max_width })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        table: &Tensor,
        ids: &[Vec<usize>],
        phase: Phase,
        p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let mut pooled = Vec::with_capacity(ids.len());
        for seq in ids {
            let emb = tape.embedding(table, seq, self.max_width)?;
            pooled.push(tape.conv1d_relu_maxpool(&emb, &self.kernels)?);
        }
        let stacked = tape.stack_rows(&pooled)?;
        let dropped = dropout(tape, &stacked, p, phase, rng)?;
        let pre = self.fc.forward(tape, &dropped)?;
        tape.relu(&pre)
    }

    fn params(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = Vec::new();
        for (_, w, b) in &self.kernels {
            out.push(w.clone());
            out.push(b.clone());
        }
        out.extend(self.fc.params());
        out
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (w, weight, bias) in &self.kernels {
            out.push((format!("{prefix}.conv{w}.weight"), weight.clone()));
            out.push((format!("{prefix}.conv{w}.bias"), bias.clone()));
        }
        out.push((format!("{prefix}.fc.weight"), self.fc.weight.clone()));
        out.push((format!("{prefix}.fc.bias"), self.fc.bias.clone()));
    }
}

/// Either extractor architecture behind one forward signature.
#[derive(Debug)]
pub enum Extractor {
    Mlp(MlpExtractor),
    Cnn(CnnExtractor),
}

impl Extractor {
    fn build(cfg: &ExtractorConfig, out_dim: usize, rng: &mut ChaCha8Rng) -> Result<Extractor> {
        match cfg {
            ExtractorConfig::Mlp { input_dim, hidden_dims } => {
                Ok(Extractor::Mlp(MlpExtractor::new(*input_dim, hidden_dims, out_dim, rng)))
            }
            ExtractorConfig::Cnn { embed_dim, kernel_widths, kernels_per_width, .. } => Ok(Extractor::Cnn(
                CnnExtractor::new(*embed_dim, kernel_widths, *kernels_per_width, out_dim, rng)?,
            )),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        table: Option<&Tensor>,
        phase: Phase,
        p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        match (self, batch) {
            (Extractor::Mlp(m), Batch::Dense(x)) => m.forward(tape, x, phase, p, rng),
            (Extractor::Cnn(c), Batch::Tokens(ids)) => {
                let table = table
                    .ok_or_else(|| Error::Config("cnn extractor requires an embedding table".into()))?;
                c.forward(tape, table, ids, phase, p, rng)
            }
            (Extractor::Mlp(_), Batch::Tokens(_)) => {
                Err(Error::invalid("extractor", "mlp extractor expects dense count batches"))
            }
            (Extractor::Cnn(_), Batch::Dense(_)) => {
                Err(Error::invalid("extractor", "cnn extractor expects token batches"))
            }
        }
    }

    fn params(&self) -> Vec<Tensor> {
        match self {
            Extractor::Mlp(m) => m.params(),
            Extractor::Cnn(c) => c.params(),
        }
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        match self {
            Extractor::Mlp(m) => m.named(prefix, out),
            Extractor::Cnn(c) => c.named(prefix, out),
        }
    }
}

/// One-hidden-layer softmax head with batch norm: linear, batch norm,
/// ReLU, dropout, linear, softmax. Used for both C and D.
#[derive(Debug)]
pub struct SoftmaxHead {
    fc1: Linear,
    bn: BatchNorm,
    fc2: Linear,
}

impl SoftmaxHead {
    pub(crate) fn new(in_dim: usize, hidden: usize, out_dim: usize, bn_momentum: f64, rng: &mut ChaCha8Rng) -> SoftmaxHead {
        SoftmaxHead {
            fc1: Linear::new(in_dim, hidden, rng),
            bn: BatchNorm::new(hidden, bn_momentum),
            fc2: Linear::new(hidden, out_dim, rng),
        }
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        phase: Phase,
        update_stats: bool,
        p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let h = self.fc1.forward(tape, x)?;
        let h = self.bn.forward(tape, &h, phase, update_stats)?;
        let h = tape.relu(&h)?;
        let h = dropout(tape, &h, p, phase, rng)?;
        let logits = self.fc2.forward(tape, &h)?;
        tape.softmax_rows(&logits)
    }

    pub(crate) fn params(&self) -> Vec<Tensor> {
        let mut out = self.fc1.params();
        out.extend(self.bn.params());
        out.extend(self.fc2.params());
        out
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.fc1.weight"), self.fc1.weight.clone()));
        out.push((format!("{prefix}.fc1.bias"), self.fc1.bias.clone()));
        out.push((format!("{prefix}.bn.gamma"), self.bn.gamma.clone()));
        out.push((format!("{prefix}.bn.beta"), self.bn.beta.clone()));
        out.push((format!("{prefix}.fc2.weight"), self.fc2.weight.clone()));
        out.push((format!("{prefix}.fc2.bias"), self.fc2.bias.clone()));
    }
}

/// The full model. Which components exist depends on the mode: shared-only
/// drops the per-domain extractors, domain-only drops the shared extractor
/// and the discriminator.
#[derive(Debug)]
pub struct ManModel {
    pub mode: Mode,
    pub loss: LossVariant,
    pub shared_dim: usize,
    pub domain_dim: usize,
    pub n_classes: usize,
    pub n_domains: usize,
    dropout_p: f64,
    labeled_ids: Vec<String>,
    embeddings: Option<Tensor>,
    trainable_embeddings: bool,
    f_s: Option<Extractor>,
    f_d: Vec<(String, Extractor)>,
    c: SoftmaxHead,
    d: Option<SoftmaxHead>,
}

impl ManModel {
    /// Builds all components in a fixed order (embeddings, shared
    /// extractor, domain extractors in the given order, classifier,
    /// discriminator) so a seeded rng reproduces parameters exactly.
    pub fn new(
        cfg: &ModelConfig,
        labeled_ids: &[String],
        n_domains: usize,
        embeddings: Option<&EmbeddingTable>,
        rng: &mut ChaCha8Rng,
    ) -> Result<ManModel> {
        if labeled_ids.is_empty() {
            return Err(Error::Config("at least one labeled domain required".into()));
        }
        if n_domains < labeled_ids.len() {
            return Err(Error::Config("n_domains smaller than the labeled domain count".into()));
        }
        let (table, trainable_embeddings) = match (&cfg.extractor, embeddings) {
            (ExtractorConfig::Cnn { embed_dim, trainable_embeddings, .. }, Some(t)) => {
                if t.dim != *embed_dim {
                    return Err(Error::Config(format!(
                        "embedding table dim {} does not match configured embed_dim {embed_dim}",
                        t.dim
                    )));
                }
                let tensor = Tensor::new(vec![t.rows(), t.dim], t.matrix.clone(), *trainable_embeddings)?;
                (Some(tensor), *trainable_embeddings)
            }
            (ExtractorConfig::Cnn { .. }, None) => {
                return Err(Error::Config("cnn extractor requires an embedding table".into()));
            }
            (ExtractorConfig::Mlp { .. }, _) => (None, false),
        };
        let f_s = match cfg.mode {
            Mode::DomainOnly => None,
            _ => Some(Extractor::build(&cfg.extractor, cfg.shared_dim, rng)?),
        };
        let f_d = match cfg.mode {
            Mode::SharedOnly => Vec::new(),
            _ => labeled_ids
                .iter()
                .map(|id| Ok((id.clone(), Extractor::build(&cfg.extractor, cfg.domain_dim, rng)?)))
                .collect::<Result<Vec<_>>>()?,
        };
        let c_in = cfg.shared_dim + cfg.domain_dim;
        let c = SoftmaxHead::new(c_in, c_in, cfg.n_classes, cfg.bn_momentum, rng);
        let d = match cfg.mode {
            Mode::DomainOnly => None,
            _ => Some(SoftmaxHead::new(cfg.shared_dim, cfg.shared_dim, n_domains, cfg.bn_momentum, rng)),
        };
        Ok(ManModel {
            mode: cfg.mode,
            loss: cfg.loss,
            shared_dim: cfg.shared_dim,
            domain_dim: cfg.domain_dim,
            n_classes: cfg.n_classes,
            n_domains,
            dropout_p: cfg.dropout,
            labeled_ids: labeled_ids.to_vec(),
            embeddings: table,
            trainable_embeddings,
            f_s,
            f_d,
            c,
            d,
        })
    }

    pub fn labeled_ids(&self) -> &[String] {
        &self.labeled_ids
    }

    pub fn dropout_p(&self) -> f64 {
        self.dropout_p
    }

    pub fn has_shared(&self) -> bool {
        self.f_s.is_some()
    }

    pub fn has_discriminator(&self) -> bool {
        self.d.is_some()
    }

    /// Shared features `[B, shared_dim]`.
    pub fn forward_shared(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        phase: Phase,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let f_s = self
            .f_s
            .as_ref()
            .ok_or_else(|| Error::MissingExtractor("shared extractor disabled in this mode".into()))?;
        f_s.forward(tape, batch, self.embeddings.as_ref(), phase, self.dropout_p, rng)
    }

    /// Domain-private features `[B, domain_dim]` from domain `id`'s
    /// extractor.
    pub fn forward_domain(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        id: &str,
        phase: Phase,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let ext = self
            .f_d
            .iter()
            .find(|(d, _)| d == id)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::MissingExtractor(id.to_string()))?;
        ext.forward(tape, batch, self.embeddings.as_ref(), phase, self.dropout_p, rng)
    }

    /// Class probabilities from the concatenated feature vector. A missing
    /// half is filled with zeros, so `classify(fs, None)` is definitionally
    /// identical to passing an explicit zero block.
    pub fn classify(
        &self,
        tape: &mut Tape,
        f_s: Option<&Tensor>,
        f_d: Option<&Tensor>,
        rows: usize,
        phase: Phase,
        update_stats: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let left = match f_s {
            Some(t) => t.clone(),
            None => Tensor::zeros(vec![rows, self.shared_dim], false),
        };
        let right = match f_d {
            Some(t) => t.clone(),
            None => Tensor::zeros(vec![rows, self.domain_dim], false),
        };
        let x = tape.concat_cols(&left, &right)?;
        self.c.forward(tape, &x, phase, update_stats, self.dropout_p, rng)
    }

    /// Domain probabilities `[B, N]` from shared features.
    pub fn discriminate(
        &self,
        tape: &mut Tape,
        f_s: &Tensor,
        phase: Phase,
        update_stats: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let d = self
            .d
            .as_ref()
            .ok_or_else(|| Error::MissingExtractor("discriminator disabled in this mode".into()))?;
        d.forward(tape, f_s, phase, update_stats, self.dropout_p, rng)
    }

    /// Parameters of the main optimizer group: extractors, classifier, and
    /// the embedding table when trainable.
    pub fn main_params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        if let (Some(t), true) = (&self.embeddings, self.trainable_embeddings) {
            out.push(t.clone());
        }
        if let Some(f_s) = &self.f_s {
            out.extend(f_s.params());
        }
        for (_, e) in &self.f_d {
            out.extend(e.params());
        }
        out.extend(self.c.params());
        out
    }

    /// Parameters of the discriminator optimizer group.
    pub fn d_params(&self) -> Vec<Tensor> {
        self.d.as_ref().map(|d| d.params()).unwrap_or_default()
    }

    /// All trainable parameters with stable names.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Some(t) = &self.embeddings {
            out.push(("embeddings".to_string(), t.clone()));
        }
        if let Some(f_s) = &self.f_s {
            f_s.named("f_s", &mut out);
        }
        for (id, e) in &self.f_d {
            e.named(&format!("f_d.{id}"), &mut out);
        }
        self.c.named("c", &mut out);
        if let Some(d) = &self.d {
            d.named("d", &mut out);
        }
        out
    }

    /// Batch-norm running statistics with stable names, as (mean, var).
    fn bn_buffers(&self) -> Vec<(String, &BatchNorm)> {
        let mut out = vec![("c.bn".to_string(), &self.c.bn)];
        if let Some(d) = &self.d {
            out.push(("d.bn".to_string(), &d.bn));
        }
        out
    }

    /// Full mutable state: parameters plus batch-norm buffers. Keys are
    /// sorted, so serialization order is stable.
    pub fn state(&self) -> BTreeMap<String, TensorState> {
        let mut map = BTreeMap::new();
        for (name, t) in self.named_params() {
            map.insert(name, TensorState { shape: t.shape(), data: t.to_vec() });
        }
        for (name, bn) in self.bn_buffers() {
            let (mean, var) = bn.running_stats();
            let dim = mean.len();
            map.insert(
                format!("{name}.running_mean"),
                TensorState { shape: vec![dim], data: mean },
            );
            map.insert(format!("{name}.running_var"), TensorState { shape: vec![dim], data: var });
        }
        map
    }

    /// Restores state captured by [`ManModel::state`]. Every key must
    /// match in name and shape; missing or extra keys are errors.
    pub fn load_state(&self, state: &BTreeMap<String, TensorState>) -> Result<()> {
        let mut expected = self.state();
        for (name, saved) in state {
            let current = expected.remove(name).ok_or_else(|| {
                Error::Checkpoint(format!("unexpected tensor {name:?} in checkpoint"))
            })?;
            if current.shape != saved.shape {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name:?}: model {:?}, checkpoint {:?}",
                    current.shape, saved.shape
                )));
            }
        }
        if let Some(name) = expected.keys().next() {
            return Err(Error::Checkpoint(format!("checkpoint is missing tensor {name:?}")));
        }
        // Shapes verified; now write.
        for (name, t) in self.named_params() {
            t.set_data(&state[&name].data);
        }
        for (name, bn) in self.bn_buffers() {
            bn.set_running_stats(
                state[&format!("{name}.running_mean")].data.clone(),
                state[&format!("{name}.running_var")].data.clone(),
            );
        }
        Ok(())
    }
}

/// One tensor's shape and contents inside a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorState {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Mean negative log-likelihood of the true classes: -log p[y], averaged
/// over the batch, with the probability floored before the log.
pub fn loss_classifier(tape: &mut Tape, probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let picked = tape.pick_per_row(probs, labels)?;
    let logs = tape.ln_floored(&picked, PROB_FLOOR)?;
    let mean = tape.mean_all(&logs)?;
    tape.scale(&mean, -1.0)
}

/// Discriminator loss for a batch drawn wholly from domain `d`: NLL is
/// -log p[d] batch-averaged, L2 is the squared distance to the one-hot
/// target batch-averaged.
pub fn loss_discriminator(tape: &mut Tape, probs: &Tensor, d: usize, variant: LossVariant) -> Result<Tensor> {
    let shape = probs.shape();
    if shape.len() != 2 || d >= shape[1] {
        return Err(Error::invalid(
            "loss_discriminator",
            format!("domain index {d} out of range for output shape {shape:?}"),
        ));
    }
    match variant {
        LossVariant::Nll => {
            let labels = vec![d; shape[0]];
            loss_classifier(tape, probs, &labels)
        }
        LossVariant::L2 => {
            let (rows, cols) = (shape[0], shape[1]);
            let mut onehot = vec![0.0; rows * cols];
            for r in 0..rows {
                onehot[r * cols + d] = 1.0;
            }
            let target = Tensor::new(vec![rows, cols], onehot, false)?;
            let diff = tape.sub(probs, &target)?;
            let sq = tape.mul(&diff, &diff)?;
            let sum = tape.sum_all(&sq)?;
            tape.scale(&sum, 1.0 / rows as f64)
        }
    }
}

/// The adversarial term that trains the shared extractor, summed over all
/// domains' batches (`probs_per_domain[i]` must be domain i's batch). NLL
/// is the exact negation of the discriminator's objective on the same
/// batches; L2 is the batch-averaged squared deviation from the uniform
/// prediction.
pub fn domain_loss_shared(
    tape: &mut Tape,
    probs_per_domain: &[Tensor],
    variant: LossVariant,
) -> Result<Tensor> {
    if probs_per_domain.is_empty() {
        return Err(Error::Data("no domain batches for the shared domain loss".into()));
    }
    let n = probs_per_domain.len();
    let mut acc: Option<Tensor> = None;
    for (d, probs) in probs_per_domain.iter().enumerate() {
        let term = match variant {
            LossVariant::Nll => loss_discriminator(tape, probs, d, variant)?,
            LossVariant::L2 => {
                let shape = probs.shape();
                let (rows, cols) = (shape[0], shape[1]);
                if cols != n {
                    return Err(Error::invalid(
                        "domain_loss_shared",
                        format!("output width {cols} does not match {n} domains"),
                    ));
                }
                let uniform = Tensor::new(vec![rows, cols], vec![1.0 / n as f64; rows * cols], false)?;
                let diff = tape.sub(probs, &uniform)?;
                let sq = tape.mul(&diff, &diff)?;
                let sum = tape.sum_all(&sq)?;
                tape.scale(&sum, 1.0 / rows as f64)?
            }
        };
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(&a, &term)?,
        });
    }
    let total = acc.expect("nonempty");
    match variant {
        LossVariant::Nll => tape.scale(&total, -1.0),
        LossVariant::L2 => Ok(total),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExtractorConfig;
    use rand::SeedableRng;

    fn small_cfg(mode: Mode) -> ModelConfig {
        ModelConfig {
            n_classes: 2,
            shared_dim: 6,
            domain_dim: 4,
            dropout: 0.0,
            bn_momentum: 0.1,
            mode,
            loss: LossVariant::Nll,
            extractor: ExtractorConfig::Mlp { input_dim: 10, hidden_dims: vec![8] },
        }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("dom-{i}")).collect()
    }

    fn dense_batch(rows: usize, cols: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        Batch::Dense(Tensor::new(vec![rows, cols], data, false).unwrap())
    }

    #[test]
    fn forward_shapes_match_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = ManModel::new(&small_cfg(Mode::SharedPrivate), &ids(2), 3, None, &mut rng).unwrap();
        let mut tape = Tape::new();
        let batch = dense_batch(4, 10, 1);
        let fs = model.forward_shared(&mut tape, &batch, Phase::Train, &mut rng).unwrap();
        assert_eq!(fs.shape(), vec![4, 6]);
        let fd = model.forward_domain(&mut tape, &batch, "dom-1", Phase::Train, &mut rng).unwrap();
        assert_eq!(fd.shape(), vec![4, 4]);
        let probs = model
            .classify(&mut tape, Some(&fs), Some(&fd), 4, Phase::Train, true, &mut rng)
            .unwrap();
        assert_eq!(probs.shape(), vec![4, 2]);
        let dhat = model.discriminate(&mut tape, &fs, Phase::Train, true, &mut rng).unwrap();
        assert_eq!(dhat.shape(), vec![4, 3]);
        // Simplex outputs.
        for r in 0..4 {
            let row = &dhat.to_vec()[r * 3..(r + 1) * 3];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn unknown_domain_is_a_missing_extractor_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = ManModel::new(&small_cfg(Mode::SharedPrivate), &ids(2), 2, None, &mut rng).unwrap();
        let mut tape = Tape::new();
        let batch = dense_batch(2, 10, 1);
        let err = model
            .forward_domain(&mut tape, &batch, "nope", Phase::Train, &mut rng)
            .unwrap_err();
        assert!(matches!(err, Error::MissingExtractor(_)), "{err}");
    }

    #[test]
    fn absent_domain_features_equal_explicit_zeros_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = ManModel::new(&small_cfg(Mode::SharedPrivate), &ids(1), 1, None, &mut rng).unwrap();
        let batch = dense_batch(3, 10, 4);

        let mut t1 = Tape::new();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let fs1 = model.forward_shared(&mut t1, &batch, Phase::Train, &mut r1).unwrap();
        let p1 = model.classify(&mut t1, Some(&fs1), None, 3, Phase::Train, false, &mut r1).unwrap();

        let mut t2 = Tape::new();
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let fs2 = model.forward_shared(&mut t2, &batch, Phase::Train, &mut r2).unwrap();
        let zeros = Tensor::zeros(vec![3, 4], false);
        let p2 = model
            .classify(&mut t2, Some(&fs2), Some(&zeros), 3, Phase::Train, false, &mut r2)
            .unwrap();

        let (a, b) = (p1.to_vec(), p2.to_vec());
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn domain_extractors_have_disjoint_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = ManModel::new(&small_cfg(Mode::SharedPrivate), &ids(2), 2, None, &mut rng).unwrap();
        let batch = dense_batch(2, 10, 6);
        let before = {
            let mut tape = Tape::new();
            let mut r = ChaCha8Rng::seed_from_u64(1);
            model.forward_domain(&mut tape, &batch, "dom-1", Phase::Eval, &mut r).unwrap().to_vec()
        };
        // Perturb every parameter belonging to dom-0's extractor.
        for (name, t) in model.named_params() {
            if name.starts_with("f_d.dom-0") {
                let bumped: Vec<f64> = t.to_vec().iter().map(|v| v + 1.0).collect();
                t.set_data(&bumped);
            }
        }
        let after = {
            let mut tape = Tape::new();
            let mut r = ChaCha8Rng::seed_from_u64(1);
            model.forward_domain(&mut tape, &batch, "dom-1", Phase::Eval, &mut r).unwrap().to_vec()
        };
        assert_eq!(before, after);
    }

    #[test]
    fn classifier_loss_hand_values() {
        let mut tape = Tape::new();
        let perfect = Tensor::new(vec![1, 2], vec![1.0, 0.0], false).unwrap();
        let l = loss_classifier(&mut tape, &perfect, &[0]).unwrap();
        assert!(l.item().abs() < 1e-12);

        let even = Tensor::new(vec![1, 2], vec![0.5, 0.5], false).unwrap();
        let l = loss_classifier(&mut tape, &even, &[0]).unwrap();
        assert!((l.item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn classifier_loss_batch_mean_matches_per_sample_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows = 5;
        let mut data = Vec::new();
        for _ in 0..rows {
            let a: f64 = rand::Rng::gen_range(&mut rng, 0.05..0.95);
            data.push(a);
            data.push(1.0 - a);
        }
        let labels: Vec<usize> = (0..rows).map(|r| r % 2).collect();
        let probs = Tensor::new(vec![rows, 2], data.clone(), false).unwrap();
        let mut tape = Tape::new();
        let batch_loss = loss_classifier(&mut tape, &probs, &labels).unwrap().item();
        let mut acc = 0.0;
        for r in 0..rows {
            acc += -(data[r * 2 + labels[r]].max(PROB_FLOOR)).ln();
        }
        assert!((batch_loss - acc / rows as f64).abs() < 1e-12);
    }

    #[test]
    fn discriminator_loss_hand_values() {
        let mut tape = Tape::new();
        // L2, perfect one-hot prediction of the right domain.
        let perfect = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0], false).unwrap();
        let l = loss_discriminator(&mut tape, &perfect, 1, LossVariant::L2).unwrap();
        assert!(l.item().abs() < 1e-12);
        // L2, uniform prediction, N=3: 1/9 + 4/9 + 1/9.
        let uniform = Tensor::new(vec![1, 3], vec![1.0 / 3.0; 3], false).unwrap();
        let l = loss_discriminator(&mut tape, &uniform, 1, LossVariant::L2).unwrap();
        assert!((l.item() - 2.0 / 3.0).abs() < 1e-12);
        // NLL.
        let p = Tensor::new(vec![1, 2], vec![0.25, 0.75], false).unwrap();
        let l = loss_discriminator(&mut tape, &p, 1, LossVariant::Nll).unwrap();
        assert!((l.item() + 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_domain_loss_is_exact_negation_of_discriminator_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut tape = Tape::new();
        let mut batches = Vec::new();
        for _ in 0..3 {
            let mut data = Vec::new();
            for _ in 0..4 {
                let raw: Vec<f64> = (0..3).map(|_| rand::Rng::gen_range(&mut rng, 0.1..1.0)).collect();
                let s: f64 = raw.iter().sum();
                data.extend(raw.iter().map(|v| v / s));
            }
            batches.push(Tensor::new(vec![4, 3], data, false).unwrap());
        }
        let shared = domain_loss_shared(&mut tape, &batches, LossVariant::Nll).unwrap().item();
        let mut j_d = 0.0;
        for (d, b) in batches.iter().enumerate() {
            j_d += loss_discriminator(&mut tape, b, d, LossVariant::Nll).unwrap().item();
        }
        assert_eq!(shared.to_bits(), (-j_d).to_bits());
    }

    #[test]
    fn l2_domain_loss_hand_values() {
        let mut tape = Tape::new();
        // Exactly uniform output: loss 0.
        let u = Tensor::new(vec![2, 2], vec![0.5; 4], false).unwrap();
        let l = domain_loss_shared(&mut tape, &[u.clone(), u.clone()], LossVariant::L2).unwrap();
        assert!(l.item().abs() < 1e-12);
        // One sample [0.8, 0.2]: (0.3)^2 + (-0.3)^2 = 0.18, one domain batch
        // uniform so it contributes 0.
        let v = Tensor::new(vec![1, 2], vec![0.8, 0.2], false).unwrap();
        let w = Tensor::new(vec![1, 2], vec![0.5, 0.5], false).unwrap();
        let l = domain_loss_shared(&mut tape, &[v, w], LossVariant::L2).unwrap();
        assert!((l.item() - 0.18).abs() < 1e-12);
    }

    #[test]
    fn gradient_reaches_shared_extractor_through_discriminator() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = ManModel::new(&small_cfg(Mode::SharedPrivate), &ids(2), 2, None, &mut rng).unwrap();
        let batch = dense_batch(4, 10, 22);
        let mut tape = Tape::new();
        let fs = model.forward_shared(&mut tape, &batch, Phase::Train, &mut rng).unwrap();
        let dhat = model.discriminate(&mut tape, &fs, Phase::Train, true, &mut rng).unwrap();
        let loss = loss_discriminator(&mut tape, &dhat, 0, LossVariant::Nll).unwrap();
        tape.backward(&loss).unwrap();
        let total: f64 = model
            .named_params()
            .iter()
            .filter(|(n, _)| n.starts_with("f_s"))
            .filter_map(|(_, t)| t.grad())
            .map(|g| g.iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        assert!(total > 0.0, "no gradient reached the shared extractor");
    }

    #[test]
    fn domain_loss_leaves_domain_extractors_untouched() {
        // The adversarial term flows through f_s only; every f_d gradient
        // must be exactly zero even when f_d participated in the same tape.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model = ManModel::new(&small_cfg(Mode::SharedPrivate), &ids(2), 2, None, &mut rng).unwrap();
        let batch = dense_batch(4, 10, 32);
        let mut tape = Tape::new();
        let fs = model.forward_shared(&mut tape, &batch, Phase::Train, &mut rng).unwrap();
        let _fd = model.forward_domain(&mut tape, &batch, "dom-0", Phase::Train, &mut rng).unwrap();
        let d0 = model.discriminate(&mut tape, &fs, Phase::Train, true, &mut rng).unwrap();
        let fs2 = model.forward_shared(&mut tape, &batch, Phase::Train, &mut rng).unwrap();
        let d1 = model.discriminate(&mut tape, &fs2, Phase::Train, true, &mut rng).unwrap();
        let loss = domain_loss_shared(&mut tape, &[d0, d1], LossVariant::L2).unwrap();
        tape.backward(&loss).unwrap();
        for (name, t) in model.named_params() {
            if name.starts_with("f_d") {
                let zero = t.grad().map(|g| g.iter().all(|&v| v == 0.0)).unwrap_or(true);
                assert!(zero, "{name} received gradient from the domain loss");
            }
        }
    }

    #[test]
    fn parameter_groups_partition_the_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let model = ManModel::new(&small_cfg(Mode::SharedPrivate), &ids(2), 3, None, &mut rng).unwrap();
        let main = model.main_params();
        let disc = model.d_params();
        let named = model.named_params();
        assert_eq!(main.len() + disc.len(), named.len());
        // No tensor appears in both groups.
        for m in &main {
            for d in &disc {
                assert!(!Tensor::ptr_eq(m, d));
            }
        }
    }

    #[test]
    fn modes_gate_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let shared_only = ManModel::new(&small_cfg(Mode::SharedOnly), &ids(2), 2, None, &mut rng).unwrap();
        assert!(shared_only.has_shared());
        assert!(shared_only.has_discriminator());
        assert!(shared_only.named_params().iter().all(|(n, _)| !n.starts_with("f_d")));

        let domain_only = ManModel::new(&small_cfg(Mode::DomainOnly), &ids(2), 2, None, &mut rng).unwrap();
        assert!(!domain_only.has_shared());
        assert!(!domain_only.has_discriminator());
        assert!(domain_only.d_params().is_empty());
        let mut tape = Tape::new();
        let batch = dense_batch(2, 10, 52);
        assert!(domain_only.forward_shared(&mut tape, &batch, Phase::Train, &mut rng).is_err());
    }

    #[test]
    fn state_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let model = ManModel::new(&small_cfg(Mode::SharedPrivate), &ids(2), 3, None, &mut rng).unwrap();
        // Push the BN buffers off their initial values.
        let batch = dense_batch(4, 10, 62);
        let mut tape = Tape::new();
        let fs = model.forward_shared(&mut tape, &batch, Phase::Train, &mut rng).unwrap();
        model.discriminate(&mut tape, &fs, Phase::Train, true, &mut rng).unwrap();
        model.classify(&mut tape, Some(&fs), None, 4, Phase::Train, true, &mut rng).unwrap();

        let state = model.state();
        let mut rng2 = ChaCha8Rng::seed_from_u64(999);
        let other = ManModel::new(&small_cfg(Mode::SharedPrivate), &ids(2), 3, None, &mut rng2).unwrap();
        other.load_state(&state).unwrap();
        let restored = other.state();
        assert_eq!(state.len(), restored.len());
        for (k, v) in &state {
            let r = &restored[k];
            assert_eq!(v.shape, r.shape, "{k}");
            for (a, b) in v.data.iter().zip(&r.data) {
                assert_eq!(a.to_bits(), b.to_bits(), "{k}");
            }
        }
    }

    #[test]
    fn load_state_rejects_mismatches() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let model = ManModel::new(&small_cfg(Mode::SharedPrivate), &ids(1), 1, None, &mut rng).unwrap();
        let mut state = model.state();
        state.remove("c.fc1.bias");
        assert!(model.load_state(&state).is_err());

        let mut state = model.state();
        state.insert("ghost".into(), TensorState { shape: vec![1], data: vec![0.0] });
        assert!(model.load_state(&state).is_err());

        let mut state = model.state();
        if let Some(t) = state.get_mut("c.fc1.weight") {
            t.shape = vec![1, 1];
            t.data = vec![0.0];
        }
        assert!(model.load_state(&state).is_err());
    }
}
