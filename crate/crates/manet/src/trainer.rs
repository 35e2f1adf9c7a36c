//! The alternating training loop: k discriminator rounds, then one main
//! update of the extractors and classifier, repeated until early stopping
//! on mean dev accuracy over labeled domains. Also evaluation, the
//! invariance probe, and ablation plumbing.
//!
//! Two optimizers, strictly separated: the discriminator step detaches the
//! shared features, so it can move nothing but D; the main step forwards
//! through a frozen D (no stat updates) and steps everything but D. The
//! backward pass of the main step does write gradients into D's tensors;
//! they are zeroed at the start of the next discriminator round and never
//! applied.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, Mode, TrainConfig, UnlabeledSource};
use crate::data::{DomainSet, LabeledCorpus, Payload, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{
    domain_loss_shared, loss_classifier, loss_discriminator, Batch, ManModel, SoftmaxHead, TensorState,
};
use crate::report::TrainReport;
use crate::tensor::adam::Adam;
use crate::tensor::nn::Phase;
use crate::tensor::{Tape, Tensor};

/// A shuffled cursor over `0..len`. Indices are handed out one at a time;
/// exhausting them reshuffles and starts a new epoch, so a batch may span
/// an epoch boundary but every index appears exactly once per epoch.
#[derive(Debug, Clone)]
pub struct BatchCursor {
    indices: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchCursor {
    pub fn new(len: usize, seed: u64) -> Result<BatchCursor> {
        if len == 0 {
            return Err(Error::Data("cannot cursor over an empty pool".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices: Vec<usize> = (0..len).collect();
        indices.shuffle(&mut rng);
        Ok(BatchCursor { indices, pos: 0, rng })
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.indices.len() {
            self.indices.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let i = self.indices[self.pos];
        self.pos += 1;
        i
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.next_index()).collect()
    }
}

/// Everything one training run consumes: the domain collection plus
/// aligned dev and test corpora for each labeled domain, and optional
/// held-out labeled eval sets for unlabeled-only domains (their labels are
/// used for evaluation only, never training).
#[derive(Debug, Clone)]
pub struct TrainData {
    pub domains: DomainSet,
    pub dev: Vec<LabeledCorpus>,
    pub test: Vec<LabeledCorpus>,
    pub unlabeled_eval: Vec<LabeledCorpus>,
}

impl TrainData {
    pub fn new(
        domains: DomainSet,
        dev: Vec<LabeledCorpus>,
        test: Vec<LabeledCorpus>,
        unlabeled_eval: Vec<LabeledCorpus>,
    ) -> Result<TrainData> {
        domains.validate()?;
        if dev.len() != domains.labeled.len() || test.len() != domains.labeled.len() {
            return Err(Error::Data("dev/test corpora must align with the labeled domains".into()));
        }
        for (i, dom) in domains.labeled.iter().enumerate() {
            if dev[i].domain != dom.id || test[i].domain != dom.id {
                return Err(Error::Data(format!(
                    "dev/test corpus order must match labeled domain order (position {i}, domain {:?})",
                    dom.id
                )));
            }
            if dev[i].is_empty() || test[i].is_empty() {
                return Err(Error::Data(format!("domain {:?} has an empty dev or test set", dom.id)));
            }
        }
        for c in &unlabeled_eval {
            if !domains.unlabeled_only.iter().any(|d| d.id == c.domain) {
                return Err(Error::Data(format!(
                    "eval corpus for {:?} does not match any unlabeled-only domain",
                    c.domain
                )));
            }
            if c.is_empty() {
                return Err(Error::Data(format!("empty eval corpus for unlabeled domain {:?}", c.domain)));
            }
        }
        Ok(TrainData { domains, dev, test, unlabeled_eval })
    }
}

/// Where a domain's adversarial mini-batches come from.
#[derive(Debug, Clone, Copy)]
enum Pool {
    /// Features of labeled[i]'s labeled corpus.
    LabeledFeatures(usize),
    /// labeled[i]'s separate unlabeled corpus.
    SeparateUnlabeled(usize),
    /// Both of the above, concatenated (labeled features first).
    Both(usize),
    /// unlabeled_only[i]'s corpus.
    Extra(usize),
}

impl Pool {
    fn len(&self, data: &TrainData) -> usize {
        match *self {
            Pool::LabeledFeatures(i) => data.domains.labeled[i].labeled.len(),
            Pool::SeparateUnlabeled(i) => data.domains.labeled[i].unlabeled.len(),
            Pool::Both(i) => data.domains.labeled[i].labeled.len() + data.domains.labeled[i].unlabeled.len(),
            Pool::Extra(i) => data.domains.unlabeled_only[i].unlabeled.len(),
        }
    }

    fn payload<'a>(&self, data: &'a TrainData, idx: usize) -> &'a Payload {
        match *self {
            Pool::LabeledFeatures(i) => &data.domains.labeled[i].labeled.samples[idx].0,
            Pool::SeparateUnlabeled(i) => &data.domains.labeled[i].unlabeled.samples[idx],
            Pool::Both(i) => {
                let dom = &data.domains.labeled[i];
                if idx < dom.labeled.len() {
                    &dom.labeled.samples[idx].0
                } else {
                    &dom.unlabeled.samples[idx - dom.labeled.len()]
                }
            }
            Pool::Extra(i) => &data.domains.unlabeled_only[i].unlabeled.samples[idx],
        }
    }
}

/// Resolves each domain's adversarial pool, in global domain order.
/// Errors name the first domain whose configured source is empty.
fn build_pools(data: &TrainData, source: UnlabeledSource) -> Result<Vec<Pool>> {
    let mut pools = Vec::with_capacity(data.domains.n_domains());
    for (i, dom) in data.domains.labeled.iter().enumerate() {
        let pool = match source {
            UnlabeledSource::ReuseLabeled => Pool::LabeledFeatures(i),
            UnlabeledSource::Separate => {
                if dom.unlabeled.is_empty() {
                    return Err(Error::Data(format!(
                        "domain {:?} has no unlabeled samples (unlabeled_source = separate)",
                        dom.id
                    )));
                }
                Pool::SeparateUnlabeled(i)
            }
            UnlabeledSource::Both => Pool::Both(i),
        };
        if pool.len(data) == 0 {
            return Err(Error::Data(format!("domain {:?} has an empty adversarial pool", dom.id)));
        }
        pools.push(pool);
    }
    for (i, dom) in data.domains.unlabeled_only.iter().enumerate() {
        if dom.unlabeled.is_empty() {
            return Err(Error::Data(format!("unlabeled domain {:?} has no samples", dom.id)));
        }
        pools.push(Pool::Extra(i));
    }
    Ok(pools)
}

/// Mutable training state: the two optimizers, per-domain batch cursors,
/// and the forward-pass rng. The model itself is passed into each step, so
/// read-only snapshots of it stay usable elsewhere.
pub struct Trainer {
    cfg: TrainConfig,
    pools: Vec<Pool>,
    labeled_cursors: Vec<BatchCursor>,
    pool_cursors: Vec<BatchCursor>,
    main_opt: Adam,
    d_opt: Option<Adam>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: &ManModel, data: &TrainData, cfg: TrainConfig) -> Result<Trainer> {
        if model.labeled_ids()
            != data.domains.labeled.iter().map(|d| d.id.clone()).collect::<Vec<_>>().as_slice()
        {
            return Err(Error::Config("model and data disagree on labeled domains".into()));
        }
        if model.n_domains != data.domains.n_domains() {
            return Err(Error::Config("model and data disagree on the domain count".into()));
        }
        for dom in &data.domains.labeled {
            if dom.labeled.is_empty() {
                return Err(Error::Data(format!("domain {:?} has no labeled samples", dom.id)));
            }
        }
        let pools = build_pools(data, cfg.unlabeled_source)?;
        // All sampling seeds derive from one master stream in fixed order.
        let mut master = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_cafe);
        let labeled_cursors = data
            .domains
            .labeled
            .iter()
            .map(|d| BatchCursor::new(d.labeled.len(), master.gen()))
            .collect::<Result<Vec<_>>>()?;
        let pool_cursors = pools
            .iter()
            .map(|p| BatchCursor::new(p.len(data), master.gen()))
            .collect::<Result<Vec<_>>>()?;
        let rng = ChaCha8Rng::seed_from_u64(master.gen());
        let main_opt = Adam::new(model.main_params(), cfg.lr_main);
        let d_opt = if model.has_discriminator() {
            Some(Adam::new(model.d_params(), cfg.lr_d))
        } else {
            None
        };
        Ok(Trainer { cfg, pools, labeled_cursors, pool_cursors, main_opt, d_opt, rng })
    }

    /// One labeled mini-batch (features and labels) from labeled domain i.
    pub fn sample_labeled(&mut self, data: &TrainData, i: usize) -> Result<(Batch, Vec<usize>)> {
        let corpus = &data.domains.labeled[i].labeled;
        let idx = self.labeled_cursors[i].next_batch(self.cfg.batch_size);
        let payloads: Vec<&Payload> = idx.iter().map(|&j| &corpus.samples[j].0).collect();
        let labels = idx.iter().map(|&j| corpus.samples[j].1).collect();
        Ok((Batch::from_payloads(&payloads)?, labels))
    }

    /// One adversarial mini-batch from domain d's pool (global order).
    pub fn sample_domain(&mut self, data: &TrainData, d: usize) -> Result<Batch> {
        let idx = self.pool_cursors[d].next_batch(self.cfg.batch_size);
        let payloads: Vec<&Payload> = idx.iter().map(|&j| self.pools[d].payload(data, j)).collect();
        Batch::from_payloads(&payloads)
    }

    /// One discriminator round: a fresh mini-batch from every domain,
    /// forwarded through the (detached) shared extractor into D, losses
    /// summed in domain order, one Adam step on D alone. Returns the
    /// accumulated l_D.
    pub fn d_step(&mut self, model: &ManModel, data: &TrainData) -> Result<f64> {
        if self.d_opt.is_none() {
            return Err(Error::invalid("d_step", "model has no discriminator in this mode"));
        }
        self.d_opt.as_ref().unwrap().zero_grads();
        let mut tape = Tape::new();
        let mut acc: Option<Tensor> = None;
        for d in 0..data.domains.n_domains() {
            let batch = self.sample_domain(data, d)?;
            let f_s = model.forward_shared(&mut tape, &batch, Phase::Train, &mut self.rng)?;
            let frozen = f_s.detach();
            let d_hat = model.discriminate(&mut tape, &frozen, Phase::Train, true, &mut self.rng)?;
            let term = loss_discriminator(&mut tape, &d_hat, d, model.loss)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(&a, &term)?,
            });
        }
        let loss = acc.expect("at least one domain");
        tape.backward(&loss)?;
        self.d_opt.as_mut().unwrap().step()?;
        Ok(loss.item())
    }

    /// One main update: classifier loss over every labeled domain plus
    /// lambda times the adversarial term over every domain, one backward
    /// pass, one Adam step on the extractors and classifier. D's
    /// parameters and running statistics stay untouched.
    pub fn main_step(&mut self, model: &ManModel, data: &TrainData) -> Result<f64> {
        self.main_opt.zero_grads();
        let mut tape = Tape::new();
        let mut acc: Option<Tensor> = None;
        for i in 0..data.domains.labeled.len() {
            let id = data.domains.labeled[i].id.clone();
            let (batch, labels) = self.sample_labeled(data, i)?;
            let f_s = if model.has_shared() {
                Some(model.forward_shared(&mut tape, &batch, Phase::Train, &mut self.rng)?)
            } else {
                None
            };
            let f_d = if model.mode != Mode::SharedOnly {
                Some(model.forward_domain(&mut tape, &batch, &id, Phase::Train, &mut self.rng)?)
            } else {
                None
            };
            let probs = model.classify(
                &mut tape,
                f_s.as_ref(),
                f_d.as_ref(),
                labels.len(),
                Phase::Train,
                true,
                &mut self.rng,
            )?;
            let j_c = loss_classifier(&mut tape, &probs, &labels)?;
            acc = Some(match acc {
                None => j_c,
                Some(a) => tape.add(&a, &j_c)?,
            });
        }
        let mut total = acc.ok_or_else(|| Error::Data("no labeled domains".into()))?;
        if model.has_discriminator() && self.cfg.lambda != 0.0 {
            let mut per_domain = Vec::with_capacity(data.domains.n_domains());
            for d in 0..data.domains.n_domains() {
                let batch = self.sample_domain(data, d)?;
                let f_s = model.forward_shared(&mut tape, &batch, Phase::Train, &mut self.rng)?;
                let d_hat = model.discriminate(&mut tape, &f_s, Phase::Train, false, &mut self.rng)?;
                per_domain.push(d_hat);
            }
            let adversarial = domain_loss_shared(&mut tape, &per_domain, model.loss)?;
            let scaled = tape.scale(&adversarial, self.cfg.lambda)?;
            total = tape.add(&total, &scaled)?;
        }
        tape.backward(&total)?;
        self.main_opt.step()?;
        Ok(total.item())
    }

    /// The full loop. Runs k discriminator rounds then one main step per
    /// iteration, evaluates every `eval_every` iterations, early-stops
    /// after `patience` non-improving evaluations, and restores the
    /// best-scoring parameters before computing final test accuracies.
    /// With lambda = 0 (or no discriminator) the adversarial machinery is
    /// skipped entirely and training reduces to the classifier objective.
    pub fn train(&mut self, model: &ManModel, data: &TrainData) -> Result<TrainReport> {
        let started = Instant::now();
        let adversarial = model.has_discriminator() && self.cfg.lambda != 0.0;
        let mut eval_iterations = Vec::new();
        let mut dev_hist: Vec<Vec<f64>> = Vec::new();
        let mut test_hist: Vec<Vec<f64>> = Vec::new();
        let mut mean_dev: Vec<f64> = Vec::new();
        let mut best: Option<(usize, f64, BTreeMap<String, TensorState>)> = None;
        let mut stale_evals = 0usize;
        let mut iterations_run = 0usize;

        for iter in 1..=self.cfg.max_iterations {
            if adversarial {
                for _ in 0..self.cfg.k {
                    self.d_step(model, data)?;
                }
            }
            self.main_step(model, data)?;
            iterations_run = iter;

            if iter % self.cfg.eval_every == 0 {
                let devs = eval_labeled(model, &data.dev)?;
                let tests = eval_labeled(model, &data.test)?;
                let m = devs.iter().sum::<f64>() / devs.len() as f64;
                eval_iterations.push(iter);
                dev_hist.push(devs);
                test_hist.push(tests);
                mean_dev.push(m);
                let improved = best.as_ref().map_or(true, |(_, b, _)| m > *b);
                if improved {
                    best = Some((iter, m, model.state()));
                    stale_evals = 0;
                } else {
                    stale_evals += 1;
                    if stale_evals > self.cfg.patience {
                        break;
                    }
                }
            }
        }

        // A run shorter than eval_every never evaluated; score it once so
        // a best checkpoint always exists.
        if best.is_none() {
            let devs = eval_labeled(model, &data.dev)?;
            let tests = eval_labeled(model, &data.test)?;
            let m = devs.iter().sum::<f64>() / devs.len() as f64;
            eval_iterations.push(iterations_run);
            dev_hist.push(devs);
            test_hist.push(tests);
            mean_dev.push(m);
            best = Some((iterations_run, m, model.state()));
        }

        let (best_iteration, best_mean_dev_accuracy, best_state) = best.expect("set above");
        model.load_state(&best_state)?;

        let final_test = eval_labeled(model, &data.test)?;
        let mean_final = final_test.iter().sum::<f64>() / final_test.len() as f64;
        let mut unlabeled_ids = Vec::new();
        let mut unlabeled_acc = Vec::new();
        for corpus in &data.unlabeled_eval {
            unlabeled_ids.push(corpus.domain.clone());
            unlabeled_acc.push(evaluate(model, corpus, false)?);
        }

        let report = TrainReport {
            labeled_domains: model.labeled_ids().to_vec(),
            unlabeled_eval_domains: unlabeled_ids,
            eval_iterations,
            dev_accuracy: dev_hist,
            test_accuracy: test_hist,
            mean_dev_accuracy: mean_dev,
            best_iteration,
            best_mean_dev_accuracy,
            iterations_run,
            final_test_accuracy: final_test,
            mean_final_test_accuracy: mean_final,
            unlabeled_test_accuracy: unlabeled_acc,
            probe_accuracy: None,
            probe_chance: None,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        };
        report.validate()?;
        Ok(report)
    }
}

/// Builds a trainer and runs the full loop.
pub fn train(model: &ManModel, data: &TrainData, cfg: &TrainConfig) -> Result<TrainReport> {
    Trainer::new(model, data, cfg.clone())?.train(model, data)
}

fn eval_labeled(model: &ManModel, corpora: &[LabeledCorpus]) -> Result<Vec<f64>> {
    let with_domain = model.mode != Mode::SharedOnly;
    corpora.iter().map(|c| evaluate(model, c, with_domain)).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode accuracy on a labeled corpus. With `use_domain_features` the
/// corpus domain must have a private extractor; without it the domain half
/// of the classifier input is zero (the inference path for unlabeled
/// domains). Pure: repeated calls return identical values and leave the
/// model untouched.
pub fn evaluate(model: &ManModel, corpus: &LabeledCorpus, use_domain_features: bool) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Data(format!("cannot evaluate on empty corpus for {:?}", corpus.domain)));
    }
    // Eval-mode forwards draw no randomness; the rng is never advanced.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let k = model.n_classes;
    let mut correct = 0usize;
    for chunk in corpus.samples.chunks(256) {
        let payloads: Vec<&Payload> = chunk.iter().map(|(p, _)| p).collect();
        let batch = Batch::from_payloads(&payloads)?;
        let mut tape = Tape::new();
        let f_s = if model.has_shared() {
            Some(model.forward_shared(&mut tape, &batch, Phase::Eval, &mut rng)?)
        } else {
            None
        };
        let f_d = if use_domain_features {
            Some(model.forward_domain(&mut tape, &batch, &corpus.domain, Phase::Eval, &mut rng)?)
        } else {
            None
        };
        let probs = model.classify(
            &mut tape,
            f_s.as_ref(),
            f_d.as_ref(),
            chunk.len(),
            Phase::Eval,
            false,
            &mut rng,
        )?;
        let v = probs.to_vec();
        for (r, (_, y)) in chunk.iter().enumerate() {
            if argmax(&v[r * k..(r + 1) * k]) == *y {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / corpus.len() as f64)
}

/// Measures how much domain identity is left in the shared features: a
/// fresh discriminator of the same architecture is trained on half of each
/// domain's pool (features from the frozen extractor) and scored on the
/// other half. Chance level is 1/N; one domain makes the probe trivially
/// perfect.
pub fn probe_invariance(
    model: &ManModel,
    data: &TrainData,
    cfg: &TrainConfig,
    probe_iterations: usize,
) -> Result<f64> {
    let n = data.domains.n_domains();
    if n == 1 {
        return Ok(1.0);
    }
    if !model.has_shared() {
        return Err(Error::invalid("probe_invariance", "model has no shared extractor"));
    }
    let pools = build_pools(data, cfg.unlabeled_source)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0bde_5eed);
    let dim = model.shared_dim;

    // Every domain contributes the same number of rows so that held-out
    // accuracy sits on a 1/N chance floor even when pool sizes differ.
    let len = pools.iter().map(|p| p.len(data)).min().unwrap_or(0).min(512);

    // Frozen eval-mode features for every domain, split half/half.
    let mut train_rows: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut test_rows: Vec<(Vec<f64>, usize)> = Vec::new();
    for (d, pool) in pools.iter().enumerate() {
        let mut order: Vec<usize> = (0..pool.len(data)).collect();
        order.shuffle(&mut rng);
        order.truncate(len);
        let mut feats: Vec<Vec<f64>> = Vec::with_capacity(len);
        for chunk in order.chunks(256) {
            let payloads: Vec<&Payload> = chunk.iter().map(|&j| pool.payload(data, j)).collect();
            let batch = Batch::from_payloads(&payloads)?;
            let mut tape = Tape::new();
            let f_s = model.forward_shared(&mut tape, &batch, Phase::Eval, &mut rng)?;
            let v = f_s.to_vec();
            for r in 0..chunk.len() {
                feats.push(v[r * dim..(r + 1) * dim].to_vec());
            }
        }
        let half = feats.len().div_ceil(2);
        for (i, f) in feats.into_iter().enumerate() {
            if i < half {
                train_rows.push((f, d));
            } else {
                test_rows.push((f, d));
            }
        }
    }
    if test_rows.is_empty() {
        return Err(Error::Data("probe has no held-out rows".into()));
    }

    let probe = SoftmaxHead::new(dim, dim, n, 0.1, &mut rng);
    let mut opt = Adam::new(probe.params(), cfg.lr_d);
    let mut cursor = BatchCursor::new(train_rows.len(), rng.gen())?;
    let p_drop = model.dropout_p();
    for _ in 0..probe_iterations {
        let idx = cursor.next_batch(cfg.batch_size);
        let mut flat = Vec::with_capacity(idx.len() * dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &j in &idx {
            flat.extend_from_slice(&train_rows[j].0);
            labels.push(train_rows[j].1);
        }
        let x = Tensor::new(vec![idx.len(), dim], flat, false)?;
        opt.zero_grads();
        let mut tape = Tape::new();
        let probs = probe.forward(&mut tape, &x, Phase::Train, true, p_drop, &mut rng)?;
        let loss = loss_classifier(&mut tape, &probs, &labels)?;
        tape.backward(&loss)?;
        opt.step()?;
    }

    let mut correct = 0usize;
    for chunk in test_rows.chunks(256) {
        let mut flat = Vec::with_capacity(chunk.len() * dim);
        for (f, _) in chunk {
            flat.extend_from_slice(f);
        }
        let x = Tensor::new(vec![chunk.len(), dim], flat, false)?;
        let mut tape = Tape::new();
        let probs = probe.forward(&mut tape, &x, Phase::Eval, false, p_drop, &mut rng)?;
        let v = probs.to_vec();
        for (r, (_, d)) in chunk.iter().enumerate() {
            if argmax(&v[r * n..(r + 1) * n]) == *d {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / test_rows.len() as f64)
}

/// Returns the config with the requested architecture mode; shared-private
/// leaves everything as configured.
pub fn ablation_mode(cfg: &Config, mode: Mode) -> Config {
    let mut out = cfg.clone();
    out.mode = mode;
    out
}

/// Splits a synthetic all-labeled domain collection into train/dev/test
/// and withholds the labels of the last `n_unlabeled_only` domains: their
/// unlabeled pools join training, their labeled corpora become eval-only
/// sets. Fractions apply to each domain's labeled corpus.
pub fn synthetic_train_data(
    spec: &SynthSpec,
    n_unlabeled_only: usize,
    dev_frac: f64,
    test_frac: f64,
) -> Result<TrainData> {
    if !(0.0..1.0).contains(&dev_frac) || !(0.0..1.0).contains(&test_frac) || dev_frac + test_frac >= 1.0 {
        return Err(Error::invalid("synthetic_train_data", "fractions must leave room for a train split"));
    }
    if n_unlabeled_only >= spec.n_domains {
        return Err(Error::invalid("synthetic_train_data", "at least one domain must stay labeled"));
    }
    let full = crate::data::synth_generate(spec)?;
    let demote_ids: Vec<String> =
        (spec.n_domains - n_unlabeled_only..spec.n_domains).map(|d| format!("synth-{d}")).collect();
    let demote_refs: Vec<&str> = demote_ids.iter().map(String::as_str).collect();
    let (mut domains, withheld) = full.demote_to_unlabeled(&demote_refs)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5917);
    let mut dev = Vec::with_capacity(domains.labeled.len());
    let mut test = Vec::with_capacity(domains.labeled.len());
    for dom in &mut domains.labeled {
        let n = dom.labeled.len();
        let n_test = ((n as f64) * test_frac).floor() as usize;
        let n_dev = ((n as f64) * dev_frac).floor() as usize;
        if n_test == 0 || n_dev == 0 || n_test + n_dev >= n {
            return Err(Error::Data(format!(
                "domain {:?} is too small to split ({n} samples)",
                dom.id
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let test_idx = &order[..n_test];
        let dev_idx = &order[n_test..n_test + n_dev];
        let train_idx = &order[n_test + n_dev..];
        test.push(dom.labeled.subset(test_idx));
        dev.push(dom.labeled.subset(dev_idx));
        dom.labeled = dom.labeled.subset(train_idx);
    }
    TrainData::new(domains, dev, test, withheld)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExtractorConfig;
    use crate::config::ModelConfig;
    use crate::LossVariant;
    use proptest::prelude::*;

    fn tiny_spec(seed: u64) -> SynthSpec {
        let mut spec = SynthSpec::new(3, 60, 2.0, 2.0, 0.3, seed);
        spec.unlabeled_per_domain = 30;
        spec.dim = 8;
        spec
    }

    fn tiny_model_cfg(mode: Mode, loss: LossVariant) -> ModelConfig {
        ModelConfig {
            n_classes: 2,
            shared_dim: 6,
            domain_dim: 4,
            dropout: 0.2,
            bn_momentum: 0.1,
            mode,
            loss,
            extractor: ExtractorConfig::Mlp { input_dim: 8, hidden_dims: vec![10] },
        }
    }

    fn tiny_train_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            lambda: 0.05,
            k: 2,
            lr_main: 1e-3,
            lr_d: 1e-3,
            batch_size: 8,
            max_iterations: 40,
            eval_every: 10,
            patience: 3,
            seed,
            unlabeled_source: UnlabeledSource::ReuseLabeled,
        }
    }

    fn fixture(mode: Mode, loss: LossVariant, seed: u64) -> (ManModel, TrainData) {
        let data = synthetic_train_data(&tiny_spec(7), 1, 0.2, 0.2).unwrap();
        let ids: Vec<String> = data.domains.labeled.iter().map(|d| d.id.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model =
            ManModel::new(&tiny_model_cfg(mode, loss), &ids, data.domains.n_domains(), None, &mut rng)
                .unwrap();
        (model, data)
    }

    fn state_subset(model: &ManModel, prefix: &str) -> Vec<(String, Vec<u64>)> {
        model
            .state()
            .into_iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k, v.data.iter().map(|x| x.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn cursor_walks_a_permutation_per_epoch() {
        let mut c = BatchCursor::new(7, 3).unwrap();
        for _ in 0..3 {
            let mut seen: Vec<usize> = (0..7).map(|_| c.next_index()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn cursor_is_deterministic_per_seed() {
        let mut a = BatchCursor::new(11, 9).unwrap();
        let mut b = BatchCursor::new(11, 9).unwrap();
        let x: Vec<usize> = (0..30).map(|_| a.next_index()).collect();
        let y: Vec<usize> = (0..30).map(|_| b.next_index()).collect();
        assert_eq!(x, y);
        let mut c = BatchCursor::new(11, 10).unwrap();
        let z: Vec<usize> = (0..30).map(|_| c.next_index()).collect();
        assert_ne!(x, z);
    }

    proptest! {
        #[test]
        fn cursor_epochs_are_balanced(len in 1usize..40, seed in 0u64..1000, epochs in 1usize..4) {
            let mut c = BatchCursor::new(len, seed).unwrap();
            let mut counts = vec![0usize; len];
            for _ in 0..len * epochs {
                counts[c.next_index()] += 1;
            }
            prop_assert!(counts.iter().all(|&k| k == epochs));
        }
    }

    #[test]
    fn synthetic_split_is_aligned_and_disjoint() {
        let data = synthetic_train_data(&tiny_spec(1), 1, 0.2, 0.2).unwrap();
        assert_eq!(data.domains.labeled.len(), 2);
        assert_eq!(data.domains.unlabeled_only.len(), 1);
        assert_eq!(data.unlabeled_eval.len(), 1);
        assert_eq!(data.unlabeled_eval[0].domain, "synth-2");
        for (i, dom) in data.domains.labeled.iter().enumerate() {
            assert_eq!(data.dev[i].domain, dom.id);
            assert_eq!(data.test[i].domain, dom.id);
            // 60 samples at 0.2/0.2: 12 test, 12 dev, 36 train.
            assert_eq!(data.test[i].len(), 12);
            assert_eq!(data.dev[i].len(), 12);
            assert_eq!(dom.labeled.len(), 36);
        }
        // The demoted domain kept its separate unlabeled pool.
        assert_eq!(data.domains.unlabeled_only[0].unlabeled.len(), 30);
    }

    #[test]
    fn d_step_moves_only_the_discriminator() {
        let (model, data) = fixture(Mode::SharedPrivate, LossVariant::Nll, 11);
        let mut tr = Trainer::new(&model, &data, tiny_train_cfg(11)).unwrap();
        let main_before: Vec<_> = ["f_s", "f_d", "c."].iter().map(|p| state_subset(&model, p)).collect();
        let d_before = state_subset(&model, "d.");
        let l_d = tr.d_step(&model, &data).unwrap();
        assert!(l_d.is_finite() && l_d > 0.0);
        let main_after: Vec<_> = ["f_s", "f_d", "c."].iter().map(|p| state_subset(&model, p)).collect();
        assert_eq!(main_before, main_after);
        assert_ne!(d_before, state_subset(&model, "d."));
    }

    #[test]
    fn main_step_leaves_discriminator_untouched_including_bn_stats() {
        let (model, data) = fixture(Mode::SharedPrivate, LossVariant::Nll, 13);
        let mut tr = Trainer::new(&model, &data, tiny_train_cfg(13)).unwrap();
        let d_before = state_subset(&model, "d.");
        let loss = tr.main_step(&model, &data).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(d_before, state_subset(&model, "d."));
        // And the main parameters did move.
        let main_before: Vec<_> = state_subset(&model, "c.");
        tr.main_step(&model, &data).unwrap();
        assert_ne!(main_before, state_subset(&model, "c."));
    }

    #[test]
    fn d_step_loss_matches_independent_replay() {
        for loss in [LossVariant::Nll, LossVariant::L2] {
            let (model, data) = fixture(Mode::SharedPrivate, loss, 17);
            let snapshot = model.state();
            // Replay trainer consumes identical cursor and rng streams but
            // never steps the optimizer.
            let mut replay = Trainer::new(&model, &data, tiny_train_cfg(17)).unwrap();
            let mut manual = 0.0;
            {
                let mut tape = Tape::new();
                for d in 0..data.domains.n_domains() {
                    let batch = replay.sample_domain(&data, d).unwrap();
                    let f_s =
                        model.forward_shared(&mut tape, &batch, Phase::Train, &mut replay.rng).unwrap();
                    let frozen = f_s.detach();
                    let d_hat = model
                        .discriminate(&mut tape, &frozen, Phase::Train, true, &mut replay.rng)
                        .unwrap();
                    manual += loss_discriminator(&mut tape, &d_hat, d, model.loss).unwrap().item();
                }
            }
            model.load_state(&snapshot).unwrap();
            let mut tr = Trainer::new(&model, &data, tiny_train_cfg(17)).unwrap();
            let l_d = tr.d_step(&model, &data).unwrap();
            assert_eq!(l_d.to_bits(), manual.to_bits(), "{loss}");
        }
    }

    #[test]
    fn lambda_zero_main_step_is_pure_classifier_loss() {
        let (model, data) = fixture(Mode::SharedPrivate, LossVariant::Nll, 19);
        let mut cfg = tiny_train_cfg(19);
        cfg.lambda = 0.0;
        let snapshot = model.state();
        let mut replay = Trainer::new(&model, &data, cfg.clone()).unwrap();
        let mut manual = 0.0;
        {
            let mut tape = Tape::new();
            for i in 0..data.domains.labeled.len() {
                let id = data.domains.labeled[i].id.clone();
                let (batch, labels) = replay.sample_labeled(&data, i).unwrap();
                let f_s = model.forward_shared(&mut tape, &batch, Phase::Train, &mut replay.rng).unwrap();
                let f_d =
                    model.forward_domain(&mut tape, &batch, &id, Phase::Train, &mut replay.rng).unwrap();
                let probs = model
                    .classify(
                        &mut tape,
                        Some(&f_s),
                        Some(&f_d),
                        labels.len(),
                        Phase::Train,
                        true,
                        &mut replay.rng,
                    )
                    .unwrap();
                manual += loss_classifier(&mut tape, &probs, &labels).unwrap().item();
            }
        }
        model.load_state(&snapshot).unwrap();
        let mut tr = Trainer::new(&model, &data, cfg).unwrap();
        let loss = tr.main_step(&model, &data).unwrap();
        assert_eq!(loss.to_bits(), manual.to_bits());
    }

    #[test]
    fn d_step_without_discriminator_is_an_error() {
        let (model, data) = fixture(Mode::DomainOnly, LossVariant::Nll, 23);
        let mut tr = Trainer::new(&model, &data, tiny_train_cfg(23)).unwrap();
        assert!(tr.d_step(&model, &data).is_err());
        // But main steps work.
        assert!(tr.main_step(&model, &data).unwrap().is_finite());
    }

    #[test]
    fn separate_source_requires_unlabeled_pools() {
        let (model, mut data) = fixture(Mode::SharedPrivate, LossVariant::Nll, 29);
        data.domains.labeled[0].unlabeled.samples.clear();
        let mut cfg = tiny_train_cfg(29);
        cfg.unlabeled_source = UnlabeledSource::Separate;
        let err = Trainer::new(&model, &data, cfg).err().expect("must fail");
        assert!(err.to_string().contains("synth-0"), "{err}");
    }

    #[test]
    fn training_learns_the_separable_synthetic_task() {
        // Strong signals, mild noise: mean dev accuracy should be high
        // well within the iteration budget.
        let mut spec = SynthSpec::new(3, 120, 2.0, 1.0, 0.3, 41);
        spec.unlabeled_per_domain = 40;
        spec.dim = 8;
        let data = synthetic_train_data(&spec, 1, 0.2, 0.2).unwrap();
        let ids: Vec<String> = data.domains.labeled.iter().map(|d| d.id.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let model = ManModel::new(
            &tiny_model_cfg(Mode::SharedPrivate, LossVariant::Nll),
            &ids,
            data.domains.n_domains(),
            None,
            &mut rng,
        )
        .unwrap();
        let mut cfg = tiny_train_cfg(41);
        cfg.max_iterations = 2000;
        cfg.k = 1;
        cfg.patience = 10;
        let report = train(&model, &data, &cfg).unwrap();
        assert!(
            report.best_mean_dev_accuracy >= 0.95,
            "best mean dev accuracy {} below 0.95",
            report.best_mean_dev_accuracy
        );
        assert!(report.mean_final_test_accuracy >= 0.9);
        assert!(report.unlabeled_test_accuracy[0] > 0.5);
    }

    #[test]
    fn fixed_seed_reproduces_the_identical_report() {
        let run = || {
            let (model, data) = fixture(Mode::SharedPrivate, LossVariant::L2, 43);
            train(&model, &data, &tiny_train_cfg(43)).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn patience_zero_stops_at_first_non_improving_evaluation() {
        let (model, data) = fixture(Mode::SharedPrivate, LossVariant::Nll, 47);
        let mut cfg = tiny_train_cfg(47);
        // A learning rate this small cannot change any prediction, so the
        // second evaluation ties the first and must stop the run.
        cfg.lr_main = 1e-30;
        cfg.lr_d = 1e-30;
        cfg.eval_every = 1;
        cfg.patience = 0;
        cfg.max_iterations = 50;
        let report = train(&model, &data, &cfg).unwrap();
        assert_eq!(report.iterations_run, 2);
        assert_eq!(report.best_iteration, 1);
        assert_eq!(report.eval_iterations, vec![1, 2]);
    }

    #[test]
    fn best_dev_accuracy_is_the_running_maximum() {
        let (model, data) = fixture(Mode::SharedPrivate, LossVariant::Nll, 53);
        let report = train(&model, &data, &tiny_train_cfg(53)).unwrap();
        let max = report.mean_dev_accuracy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(report.best_mean_dev_accuracy, max);
    }

    #[test]
    fn evaluate_is_pure_and_matches_majority_for_a_constant_classifier() {
        let (model, data) = fixture(Mode::SharedPrivate, LossVariant::Nll, 59);
        // Rig the classifier head to a constant class-0 prediction.
        for (name, t) in model.named_params() {
            if name == "c.fc2.weight" {
                t.set_data(&vec![0.0; t.numel()]);
            }
            if name == "c.fc2.bias" {
                t.set_data(&[5.0, 0.0]);
            }
        }
        let corpus = &data.test[0];
        let majority =
            corpus.samples.iter().filter(|(_, y)| *y == 0).count() as f64 / corpus.len() as f64;
        let a = evaluate(&model, corpus, true).unwrap();
        let b = evaluate(&model, corpus, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, majority);
    }

    #[test]
    fn evaluate_with_domain_features_rejects_unknown_domains() {
        let (model, data) = fixture(Mode::SharedPrivate, LossVariant::Nll, 61);
        let foreign = data.unlabeled_eval[0].clone();
        assert!(evaluate(&model, &foreign, true).is_err());
        assert!(evaluate(&model, &foreign, false).is_ok());
    }

    #[test]
    fn probe_is_trivial_for_a_single_domain() {
        let mut spec = SynthSpec::new(1, 40, 1.0, 1.0, 0.5, 3);
        spec.unlabeled_per_domain = 10;
        let data = synthetic_train_data(&spec, 0, 0.2, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg_m = ModelConfig {
            extractor: ExtractorConfig::Mlp { input_dim: 3, hidden_dims: vec![4] },
            ..tiny_model_cfg(Mode::SharedPrivate, LossVariant::Nll)
        };
        let model = ManModel::new(&cfg_m, &["synth-0".to_string()], 1, None, &mut rng).unwrap();
        let acc = probe_invariance(&model, &data, &tiny_train_cfg(3), 10).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn probe_detects_domain_identity_in_untrained_features() {
        // Untrained shared features of strongly domain-separated data keep
        // the domain signal; the probe must beat chance by a wide margin.
        let (model, data) = fixture(Mode::SharedPrivate, LossVariant::Nll, 67);
        let acc = probe_invariance(&model, &data, &tiny_train_cfg(67), 400).unwrap();
        assert!(acc > 0.55, "probe accuracy {acc} not above chance 1/3");
    }

    #[test]
    fn ablation_mode_sets_only_the_mode() {
        let cfg = Config::default();
        let same = ablation_mode(&cfg, Mode::SharedPrivate);
        assert_eq!(same, cfg);
        let so = ablation_mode(&cfg, Mode::SharedOnly);
        assert_eq!(so.mode, Mode::SharedOnly);
        let mut back = so.clone();
        back.mode = cfg.mode;
        assert_eq!(back, cfg);
    }
}
