//! Corpora, vocabularies, fold splitting, and synthetic domain generation.
//!
//! Two on-disk formats are supported. Bag-of-features TSV holds one document
//! per line as `label<TAB>feat:count feat:count ...` (unlabeled files drop
//! the label column); feature names may themselves contain `:`, the count is
//! whatever follows the last one. Token text TSV holds `label<TAB>text` with
//! whitespace tokenization, paired with a plain-text embedding table of
//! `word v1 .. vD` lines.
//!
//! Everything downstream consumes vectorized corpora: sparse count vectors
//! over a fixed vocabulary, or token-id sequences over an embedding table.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sparse count vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVec {
    pub dim: usize,
    pub entries: Vec<(usize, f64)>,
}

impl SparseVec {
    pub fn new(dim: usize, mut entries: Vec<(usize, f64)>) -> Result<SparseVec> {
        entries.sort_by_key(|(i, _)| *i);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::invalid("SparseVec::new", format!("duplicate index {}", w[0].0)));
            }
        }
        if let Some((i, _)) = entries.iter().find(|(i, _)| *i >= dim) {
            return Err(Error::invalid("SparseVec::new", format!("index {i} out of range for dim {dim}")));
        }
        Ok(SparseVec { dim, entries })
    }

    pub fn from_dense(values: &[f64]) -> SparseVec {
        let entries = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .collect();
        SparseVec { dim: values.len(), entries }
    }

    /// Adds this vector into a dense row.
    pub fn scatter_into(&self, row: &mut [f64]) {
        debug_assert_eq!(row.len(), self.dim);
        for (i, v) in &self.entries {
            row[*i] += v;
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut row = vec![0.0; self.dim];
        self.scatter_into(&mut row);
        row
    }
}

/// One document in vectorized form.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Counts(SparseVec),
    Tokens(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct LabeledCorpus {
    pub domain: String,
    pub n_classes: usize,
    pub samples: Vec<(Payload, usize)>,
}

impl LabeledCorpus {
    pub fn new(domain: String, n_classes: usize, samples: Vec<(Payload, usize)>) -> Result<LabeledCorpus> {
        if let Some((_, y)) = samples.iter().find(|(_, y)| *y >= n_classes) {
            return Err(Error::Data(format!(
                "label {y} out of range for {n_classes} classes in domain {domain:?}"
            )));
        }
        Ok(LabeledCorpus { domain, n_classes, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// New corpus holding the listed sample indices, in order.
    pub fn subset(&self, idx: &[usize]) -> LabeledCorpus {
        LabeledCorpus {
            domain: self.domain.clone(),
            n_classes: self.n_classes,
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn features(&self) -> UnlabeledCorpus {
        UnlabeledCorpus {
            domain: self.domain.clone(),
            samples: self.samples.iter().map(|(p, _)| p.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct UnlabeledCorpus {
    pub domain: String,
    pub samples: Vec<Payload>,
}

impl UnlabeledCorpus {
    pub fn empty(domain: &str) -> UnlabeledCorpus {
        UnlabeledCorpus { domain: domain.to_string(), samples: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A domain that participates in supervised training. `unlabeled` may be
/// empty; the trainer's unlabeled-source policy decides whether to fall
/// back to the labeled samples' features.
#[derive(Debug, Clone)]
pub struct LabeledDomain {
    pub id: String,
    pub labeled: LabeledCorpus,
    pub unlabeled: UnlabeledCorpus,
}

/// A domain seen only through unlabeled data.
#[derive(Debug, Clone)]
pub struct UnlabeledDomain {
    pub id: String,
    pub unlabeled: UnlabeledCorpus,
}

/// The full domain collection. Iteration order is fixed: labeled domains in
/// declaration order, then unlabeled-only domains in declaration order;
/// that order defines the discriminator's output indexing.
#[derive(Debug, Clone, Default)]
pub struct DomainSet {
    pub labeled: Vec<LabeledDomain>,
    pub unlabeled_only: Vec<UnlabeledDomain>,
}

impl DomainSet {
    pub fn n_domains(&self) -> usize {
        self.labeled.len() + self.unlabeled_only.len()
    }

    pub fn domain_ids(&self) -> Vec<String> {
        self.labeled
            .iter()
            .map(|d| d.id.clone())
            .chain(self.unlabeled_only.iter().map(|d| d.id.clone()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labeled.is_empty() {
            return Err(Error::Data("no labeled domains".into()));
        }
        let ids = self.domain_ids();
        for (i, id) in ids.iter().enumerate() {
            if ids[i + 1..].contains(id) {
                return Err(Error::Data(format!("duplicate domain id {id:?}")));
            }
        }
        let n_classes = self.labeled[0].labeled.n_classes;
        if self.labeled.iter().any(|d| d.labeled.n_classes != n_classes) {
            return Err(Error::Data("labeled domains disagree on class count".into()));
        }
        Ok(())
    }

    /// Strips the labels from the listed domains, turning them into
    /// unlabeled-only domains (appended in their original order). Returns
    /// the withheld labeled corpora so callers can still evaluate on them.
    pub fn demote_to_unlabeled(mut self, ids: &[&str]) -> Result<(DomainSet, Vec<LabeledCorpus>)> {
        let mut withheld = Vec::new();
        for id in ids {
            let pos = self
                .labeled
                .iter()
                .position(|d| d.id == *id)
                .ok_or_else(|| Error::Data(format!("no labeled domain {id:?} to demote")))?;
            let dom = self.labeled.remove(pos);
            let unlabeled = if dom.unlabeled.is_empty() { dom.labeled.features() } else { dom.unlabeled };
            withheld.push(dom.labeled);
            self.unlabeled_only.push(UnlabeledDomain { id: dom.id, unlabeled });
        }
        Ok((self, withheld))
    }
}

// ---- bag-of-features TSV ----

/// One raw (string-featured) document.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDoc {
    pub label: Option<usize>,
    pub feats: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct RawCorpus {
    pub domain: String,
    pub docs: Vec<RawDoc>,
}

fn parse_feat(tok: &str, file: &str, line: usize) -> Result<(String, f64)> {
    let (name, count) = tok.rsplit_once(':').ok_or_else(|| Error::Parse {
        file: file.to_string(),
        line,
        msg: format!("feature {tok:?} has no count"),
    })?;
    let value: f64 = count.parse().map_err(|_| Error::Parse {
        file: file.to_string(),
        line,
        msg: format!("bad count {count:?}"),
    })?;
    if name.is_empty() {
        return Err(Error::Parse { file: file.to_string(), line, msg: "empty feature name".into() });
    }
    Ok((name.to_string(), value))
}

/// Loads a bag-of-features TSV. `n_classes: Some(k)` expects a leading
/// label column with labels in `0..k`; `None` expects feature columns only.
pub fn load_bof_corpus(path: &Path, domain: &str, n_classes: Option<usize>) -> Result<RawCorpus> {
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let mut docs = Vec::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let (label, feat_part) = match n_classes {
            Some(k) => {
                let (lab, rest) = raw_line.split_once('\t').ok_or_else(|| Error::Parse {
                    file: file.clone(),
                    line: line_no,
                    msg: "expected label<TAB>features".into(),
                })?;
                let y: usize = lab.parse().map_err(|_| Error::Parse {
                    file: file.clone(),
                    line: line_no,
                    msg: format!("unknown label {lab:?}"),
                })?;
                if y >= k {
                    return Err(Error::Parse {
                        file: file.clone(),
                        line: line_no,
                        msg: format!("unknown label {y} (expected 0..{k})"),
                    });
                }
                (Some(y), rest)
            }
            None => (None, raw_line),
        };
        let mut feats = Vec::new();
        for tok in feat_part.split_whitespace() {
            feats.push(parse_feat(tok, &file, line_no)?);
        }
        docs.push(RawDoc { label, feats });
    }
    if docs.is_empty() {
        return Err(Error::Data(format!("empty corpus {file}")));
    }
    Ok(RawCorpus { domain: domain.to_string(), docs })
}

/// Writes a corpus in the same TSV dialect `load_bof_corpus` reads. Counts
/// print in Rust's shortest round-trippable form, so a load of the output
/// reproduces every value bit-exactly.
pub fn write_bof_corpus(path: &Path, corpus: &RawCorpus, with_labels: bool) -> Result<()> {
    let mut out = String::new();
    for doc in &corpus.docs {
        if with_labels {
            let y = doc
                .label
                .ok_or_else(|| Error::Data(format!("document without label in domain {:?}", corpus.domain)))?;
            write!(out, "{y}\t").expect("string write");
        }
        for (i, (name, v)) in doc.feats.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{name}:{v}").expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---- vocabulary ----

/// Dense feature index, most frequent first.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

/// A built vocabulary plus a warning when the corpus could not fill the
/// requested size.
#[derive(Debug, Clone)]
pub struct VocabularyBuild {
    pub vocabulary: Vocabulary,
    pub warning: Option<String>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Builds the feature index from raw corpora: top `max_size` features by
/// total raw count, ties broken lexicographically.
pub fn build_vocabulary(corpora: &[&RawCorpus], max_size: usize) -> Result<VocabularyBuild> {
    if max_size == 0 {
        return Err(Error::invalid("build_vocabulary", "max_size must be positive"));
    }
    let mut counts: HashMap<String, f64> = HashMap::new();
    for c in corpora {
        for doc in &c.docs {
            for (name, v) in &doc.feats {
                *counts.entry(name.clone()).or_insert(0.0) += v;
            }
        }
    }
    let mut ranked: Vec<(String, f64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite counts").then_with(|| a.0.cmp(&b.0)));
    let distinct = ranked.len();
    ranked.truncate(max_size);
    let names: Vec<String> = ranked.into_iter().map(|(n, _)| n).collect();
    let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    let warning = if distinct < max_size {
        Some(format!("vocabulary has {distinct} distinct features, fewer than the requested {max_size}"))
    } else {
        None
    };
    Ok(VocabularyBuild { vocabulary: Vocabulary { names, index }, warning })
}

/// Maps a raw document onto the vocabulary. Unknown features are dropped;
/// repeated features accumulate.
pub fn vectorize(doc: &RawDoc, vocab: &Vocabulary) -> SparseVec {
    let mut acc: HashMap<usize, f64> = HashMap::new();
    for (name, v) in &doc.feats {
        if let Some(i) = vocab.index_of(name) {
            *acc.entry(i).or_insert(0.0) += v;
        }
    }
    let mut entries: Vec<(usize, f64)> = acc.into_iter().collect();
    entries.sort_by_key(|(i, _)| *i);
    SparseVec { dim: vocab.len(), entries }
}

pub fn vectorize_labeled(raw: &RawCorpus, vocab: &Vocabulary, n_classes: usize) -> Result<LabeledCorpus> {
    let mut samples = Vec::with_capacity(raw.docs.len());
    for doc in &raw.docs {
        let y = doc
            .label
            .ok_or_else(|| Error::Data(format!("unlabeled document in labeled corpus {:?}", raw.domain)))?;
        samples.push((Payload::Counts(vectorize(doc, vocab)), y));
    }
    LabeledCorpus::new(raw.domain.clone(), n_classes, samples)
}

pub fn vectorize_unlabeled(raw: &RawCorpus, vocab: &Vocabulary) -> UnlabeledCorpus {
    UnlabeledCorpus {
        domain: raw.domain.clone(),
        samples: raw.docs.iter().map(|d| Payload::Counts(vectorize(d, vocab))).collect(),
    }
}

// ---- fold splitting ----

#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` by seed and produces one split per fold: fold i is the
/// test partition, fold (i+1) mod k the dev partition, the rest train.
/// Fold sizes differ by at most one.
pub fn kfold_split(n: usize, folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if folds < 3 {
        return Err(Error::invalid("kfold_split", "need at least 3 folds for disjoint train/dev/test"));
    }
    if n < folds {
        return Err(Error::invalid("kfold_split", format!("{n} samples cannot fill {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let base = n / folds;
    let extra = n % folds;
    let mut chunks = Vec::with_capacity(folds);
    let mut at = 0;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        chunks.push(order[at..at + len].to_vec());
        at += len;
    }
    let mut splits = Vec::with_capacity(folds);
    for i in 0..folds {
        let dev_fold = (i + 1) % folds;
        let mut train = Vec::with_capacity(n - chunks[i].len() - chunks[dev_fold].len());
        for (f, chunk) in chunks.iter().enumerate() {
            if f != i && f != dev_fold {
                train.extend_from_slice(chunk);
            }
        }
        splits.push(FoldSplit { train, dev: chunks[dev_fold].clone(), test: chunks[i].clone() });
    }
    Ok(splits)
}

// ---- token text and embeddings ----

#[derive(Debug, Clone)]
pub struct TextCorpus {
    pub domain: String,
    pub docs: Vec<(Option<usize>, Vec<String>)>,
}

/// Loads whitespace-tokenized text, one document per line. With
/// `n_classes: Some(k)` each line is `label<TAB>text`. Empty documents are
/// retained; the convolution pads them downstream.
pub fn load_text_corpus(path: &Path, domain: &str, n_classes: Option<usize>) -> Result<TextCorpus> {
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let mut docs = Vec::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let (label, body) = match n_classes {
            Some(k) => {
                let (lab, rest) = raw_line.split_once('\t').ok_or_else(|| Error::Parse {
                    file: file.clone(),
                    line: line_no,
                    msg: "expected label<TAB>text".into(),
                })?;
                let y: usize = lab.parse().map_err(|_| Error::Parse {
                    file: file.clone(),
                    line: line_no,
                    msg: format!("unknown label {lab:?}"),
                })?;
                if y >= k {
                    return Err(Error::Parse {
                        file: file.clone(),
                        line: line_no,
                        msg: format!("unknown label {y} (expected 0..{k})"),
                    });
                }
                (Some(y), rest)
            }
            None => (None, raw_line),
        };
        let tokens = body.split_whitespace().map(str::to_string).collect();
        docs.push((label, tokens));
    }
    if docs.is_empty() {
        return Err(Error::Data(format!("empty corpus {file}")));
    }
    Ok(TextCorpus { domain: domain.to_string(), docs })
}

/// Word-embedding table. Row `oov` is the zero-initialized shared row for
/// out-of-vocabulary tokens; it sits past the named rows.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub dim: usize,
    words: HashMap<String, usize>,
    pub matrix: Vec<f64>,
    pub oov: usize,
}

impl EmbeddingTable {
    pub fn rows(&self) -> usize {
        self.oov + 1
    }

    pub fn token_id(&self, word: &str) -> usize {
        self.words.get(word).copied().unwrap_or(self.oov)
    }

    pub fn tokens_to_ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.token_id(t)).collect()
    }
}

/// Loads a plain-text embedding table: `word v1 .. vD` per line.
pub fn load_embeddings(path: &Path, dim: usize) -> Result<EmbeddingTable> {
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let mut words = HashMap::new();
    let mut matrix = Vec::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let mut parts = raw_line.split_whitespace();
        let word = parts.next().expect("non-empty line").to_string();
        let values: Vec<f64> = parts
            .map(|t| {
                t.parse::<f64>().map_err(|_| Error::Parse {
                    file: file.clone(),
                    line: line_no,
                    msg: format!("bad embedding value {t:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::Parse {
                file: file.clone(),
                line: line_no,
                msg: format!("expected {dim} values, got {}", values.len()),
            });
        }
        if words.contains_key(&word) {
            return Err(Error::Parse {
                file: file.clone(),
                line: line_no,
                msg: format!("duplicate word {word:?}"),
            });
        }
        words.insert(word, words.len());
        matrix.extend_from_slice(&values);
    }
    if words.is_empty() {
        return Err(Error::Data(format!("empty embedding table {file}")));
    }
    let oov = words.len();
    matrix.extend(std::iter::repeat(0.0).take(dim));
    Ok(EmbeddingTable { dim, words, matrix, oov })
}

pub fn vectorize_text_labeled(
    corpus: &TextCorpus,
    table: &EmbeddingTable,
    n_classes: usize,
) -> Result<LabeledCorpus> {
    let mut samples = Vec::with_capacity(corpus.docs.len());
    for (label, tokens) in &corpus.docs {
        let y = label
            .ok_or_else(|| Error::Data(format!("unlabeled document in labeled corpus {:?}", corpus.domain)))?;
        samples.push((Payload::Tokens(table.tokens_to_ids(tokens)), y));
    }
    LabeledCorpus::new(corpus.domain.clone(), n_classes, samples)
}

pub fn vectorize_text_unlabeled(corpus: &TextCorpus, table: &EmbeddingTable) -> UnlabeledCorpus {
    UnlabeledCorpus {
        domain: corpus.domain.clone(),
        samples: corpus.docs.iter().map(|(_, t)| Payload::Tokens(table.tokens_to_ids(t))).collect(),
    }
}

// ---- dataset manifest ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainRole {
    Labeled,
    UnlabeledOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub role: DomainRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unlabeled_path: Option<String>,
}

/// On-disk index of a dataset: one entry per domain with file paths
/// resolved relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub domains: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path)?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        for e in &m.domains {
            match e.role {
                DomainRole::Labeled if e.labeled_path.is_none() => {
                    return Err(Error::Data(format!("labeled domain {:?} has no labeled_path", e.id)));
                }
                DomainRole::UnlabeledOnly if e.unlabeled_path.is_none() => {
                    return Err(Error::Data(format!("unlabeled-only domain {:?} has no unlabeled_path", e.id)));
                }
                _ => {}
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Raw per-domain corpora loaded according to a manifest.
#[derive(Debug, Clone)]
pub struct RawDomain {
    pub id: String,
    pub role: DomainRole,
    pub labeled: Option<RawCorpus>,
    pub unlabeled: Option<RawCorpus>,
}

/// Loads every corpus a manifest names, resolving paths relative to the
/// manifest file.
pub fn load_manifest_corpora(manifest_path: &Path, n_classes: usize) -> Result<Vec<RawDomain>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for e in &manifest.domains {
        let labeled = match (&e.labeled_path, e.role) {
            (Some(p), _) => Some(load_bof_corpus(&base.join(p), &e.id, Some(n_classes))?),
            (None, _) => None,
        };
        let unlabeled = match &e.unlabeled_path {
            Some(p) => Some(load_bof_corpus(&base.join(p), &e.id, None)?),
            None => None,
        };
        out.push(RawDomain { id: e.id.clone(), role: e.role, labeled, unlabeled });
    }
    Ok(out)
}

// ---- synthetic domains ----

/// Generator parameters. Each sample is a `dim`-vector: coordinate 0
/// carries the label times `shared_signal` in every domain, coordinate
/// 1 + d carries the label times `domain_signal` only in domain d, and
/// coordinate 1 + n_domains + d holds a constant `domain_signal` offset
/// only in domain d, making domains discriminable independent of labels.
/// Gaussian noise of scale `noise` covers everything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_domains: usize,
    pub n_per_domain: usize,
    pub unlabeled_per_domain: usize,
    pub shared_signal: f64,
    pub domain_signal: f64,
    pub noise: f64,
    pub dim: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(
        n_domains: usize,
        n_per_domain: usize,
        shared_signal: f64,
        domain_signal: f64,
        noise: f64,
        seed: u64,
    ) -> SynthSpec {
        SynthSpec {
            n_domains,
            n_per_domain,
            unlabeled_per_domain: n_per_domain,
            shared_signal,
            domain_signal,
            noise,
            dim: 1 + 2 * n_domains,
            seed,
        }
    }

    pub fn min_dim(&self) -> usize {
        1 + 2 * self.n_domains
    }
}

/// Standard normal via Box-Muller on the uniform stream.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn synth_sample(spec: &SynthSpec, domain: usize, label: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sign = if label == 1 { 1.0 } else { -1.0 };
    let mut x = vec![0.0; spec.dim];
    for v in x.iter_mut() {
        *v = spec.noise * gauss(rng);
    }
    x[0] += sign * spec.shared_signal;
    x[1 + domain] += sign * spec.domain_signal;
    x[1 + spec.n_domains + domain] += spec.domain_signal;
    x
}

/// Deterministic synthetic domain collection: every domain comes out
/// labeled, with a separate unlabeled pool drawn from the same
/// distribution. Use [`DomainSet::demote_to_unlabeled`] to withhold labels
/// from a domain.
pub fn synth_generate(spec: &SynthSpec) -> Result<DomainSet> {
    if spec.n_domains == 0 || spec.n_per_domain == 0 {
        return Err(Error::invalid("synth_generate", "need at least one domain and one sample"));
    }
    if spec.dim < spec.min_dim() {
        return Err(Error::invalid(
            "synth_generate",
            format!("dim {} below minimum {} for {} domains", spec.dim, spec.min_dim(), spec.n_domains),
        ));
    }
    if spec.noise < 0.0 || !spec.noise.is_finite() {
        return Err(Error::invalid("synth_generate", "noise must be finite and nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labeled = Vec::with_capacity(spec.n_domains);
    for d in 0..spec.n_domains {
        let id = format!("synth-{d}");
        let mut samples = Vec::with_capacity(spec.n_per_domain);
        for _ in 0..spec.n_per_domain {
            let y = usize::from(rng.gen_bool(0.5));
            let x = synth_sample(spec, d, y, &mut rng);
            samples.push((Payload::Counts(SparseVec::from_dense(&x)), y));
        }
        let mut pool = Vec::with_capacity(spec.unlabeled_per_domain);
        for _ in 0..spec.unlabeled_per_domain {
            let y = usize::from(rng.gen_bool(0.5));
            let x = synth_sample(spec, d, y, &mut rng);
            pool.push(Payload::Counts(SparseVec::from_dense(&x)));
        }
        labeled.push(LabeledDomain {
            id: id.clone(),
            labeled: LabeledCorpus::new(id.clone(), 2, samples)?,
            unlabeled: UnlabeledCorpus { domain: id, samples: pool },
        });
    }
    Ok(DomainSet { labeled, unlabeled_only: Vec::new() })
}

/// Renders a vectorized corpus back to raw form with `f{i}` feature names,
/// so synthetic data can be written to the TSV format.
pub fn sparse_to_raw(corpus: &LabeledCorpus) -> Result<RawCorpus> {
    let mut docs = Vec::with_capacity(corpus.samples.len());
    for (p, y) in &corpus.samples {
        let sv = match p {
            Payload::Counts(sv) => sv,
            Payload::Tokens(_) => {
                return Err(Error::Data("token payloads cannot render to bag-of-features".into()))
            }
        };
        let feats = sv.entries.iter().map(|(i, v)| (format!("f{i}"), *v)).collect();
        docs.push(RawDoc { label: Some(*y), feats });
    }
    Ok(RawCorpus { domain: corpus.domain.clone(), docs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    #[test]
    fn bof_round_trip_is_bit_exact() {
        let dir = tmpdir();
        let path = dir.path().join("c.tsv");
        let corpus = RawCorpus {
            domain: "books".into(),
            docs: vec![
                RawDoc {
                    label: Some(1),
                    feats: vec![("good_read".into(), 2.0), ("a:b".into(), 0.1), ("x".into(), 1e-17)],
                },
                RawDoc { label: Some(0), feats: vec![] },
            ],
        };
        write_bof_corpus(&path, &corpus, true).unwrap();
        let loaded = load_bof_corpus(&path, "books", Some(2)).unwrap();
        assert_eq!(loaded.docs.len(), 2);
        for (a, b) in corpus.docs.iter().zip(&loaded.docs) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.feats.len(), b.feats.len());
            for ((n1, v1), (n2, v2)) in a.feats.iter().zip(&b.feats) {
                assert_eq!(n1, n2);
                assert_eq!(v1.to_bits(), v2.to_bits());
            }
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tmpdir();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "1\tok:2\n0\tbroken\n").unwrap();
        let err = load_bof_corpus(&path, "d", Some(2)).unwrap_err();
        assert!(err.to_string().contains(":2"), "{err}");
    }

    #[test]
    fn unknown_label_reports_line_number() {
        let dir = tmpdir();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "5\ta:1\n").unwrap();
        let err = load_bof_corpus(&path, "d", Some(2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("label") && msg.contains(":1"), "{msg}");
    }

    #[test]
    fn empty_file_errors() {
        let dir = tmpdir();
        let path = dir.path().join("empty.tsv");
        std::fs::write(&path, "").unwrap();
        assert!(load_bof_corpus(&path, "d", Some(2)).is_err());
    }

    #[test]
    fn vocabulary_orders_by_count_then_name() {
        let raw = RawCorpus {
            domain: "d".into(),
            docs: vec![
                RawDoc { label: Some(0), feats: vec![("b".into(), 3.0), ("a".into(), 3.0), ("z".into(), 9.0)] },
                RawDoc { label: Some(1), feats: vec![("c".into(), 1.0)] },
            ],
        };
        let built = build_vocabulary(&[&raw], 3).unwrap();
        assert!(built.warning.is_none());
        // z(9) first, then the a/b tie lexicographically.
        assert_eq!(built.vocabulary.names(), &["z", "a", "b"]);
    }

    #[test]
    fn small_corpus_yields_warning_and_actual_size() {
        let raw = RawCorpus {
            domain: "d".into(),
            docs: vec![RawDoc { label: Some(0), feats: vec![("only".into(), 1.0)] }],
        };
        let built = build_vocabulary(&[&raw], 5000).unwrap();
        assert_eq!(built.vocabulary.len(), 1);
        assert!(built.warning.is_some());
    }

    #[test]
    fn vectorize_drops_oov_and_accumulates_repeats() {
        let raw = RawCorpus {
            domain: "d".into(),
            docs: vec![RawDoc {
                label: Some(0),
                feats: vec![("a".into(), 4.0), ("a".into(), 4.0), ("unseen".into(), 7.0)],
            }],
        };
        let vocab = build_vocabulary(&[&raw], 1).unwrap().vocabulary;
        assert_eq!(vocab.names(), &["a"]);
        let sv = vectorize(&raw.docs[0], &vocab);
        assert_eq!(sv.entries, vec![(0, 8.0)]);
        assert_eq!(sv.dim, 1);
    }

    #[test]
    fn kfold_2000_by_5_gives_1200_400_400() {
        let splits = kfold_split(2000, 5, 42).unwrap();
        assert_eq!(splits.len(), 5);
        for s in &splits {
            assert_eq!(s.train.len(), 1200);
            assert_eq!(s.dev.len(), 400);
            assert_eq!(s.test.len(), 400);
        }
        // Rotation: fold i's test partition is fold (i-1)'s dev partition.
        for i in 0..5 {
            let mut test_i = splits[i].test.clone();
            let mut dev_prev = splits[(i + 4) % 5].dev.clone();
            test_i.sort_unstable();
            dev_prev.sort_unstable();
            assert_eq!(test_i, dev_prev);
        }
    }

    #[test]
    fn kfold_rejects_degenerate_requests() {
        assert!(kfold_split(10, 2, 0).is_err());
        assert!(kfold_split(2, 5, 0).is_err());
    }

    proptest! {
        #[test]
        fn kfold_partitions_exactly(n in 6usize..200, folds in 3usize..6, seed in 0u64..100) {
            prop_assume!(n >= folds);
            let splits = kfold_split(n, folds, seed).unwrap();
            for s in &splits {
                let mut all: Vec<usize> = s.train.iter().chain(&s.dev).chain(&s.test).copied().collect();
                all.sort_unstable();
                let expect: Vec<usize> = (0..n).collect();
                prop_assert_eq!(all, expect);
            }
            let sizes: Vec<usize> = splits.iter().map(|s| s.test.len()).collect();
            let (mn, mx) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(mx - mn <= 1);
        }

        #[test]
        fn sparse_round_trips_dense(values in proptest::collection::vec(-5.0f64..5.0, 1..20)) {
            let sv = SparseVec::from_dense(&values);
            prop_assert_eq!(sv.to_dense(), values);
        }
    }

    #[test]
    fn embeddings_load_and_map_oov_to_zero_row() {
        let dir = tmpdir();
        let path = dir.path().join("emb.txt");
        std::fs::write(&path, "hello 1.0 2.0\nworld 3.0 4.0\n").unwrap();
        let table = load_embeddings(&path, 2).unwrap();
        assert_eq!(table.rows(), 3);
        assert_eq!(table.token_id("hello"), 0);
        let oov = table.token_id("missing");
        assert_eq!(oov, 2);
        assert_eq!(&table.matrix[oov * 2..oov * 2 + 2], &[0.0, 0.0]);
    }

    #[test]
    fn embedding_dimension_mismatch_reports_line() {
        let dir = tmpdir();
        let path = dir.path().join("emb.txt");
        std::fs::write(&path, "hello 1.0 2.0\nworld 3.0\n").unwrap();
        let err = load_embeddings(&path, 2).unwrap_err();
        assert!(err.to_string().contains(":2"), "{err}");
    }

    #[test]
    fn text_corpus_keeps_empty_documents() {
        let dir = tmpdir();
        let path = dir.path().join("t.tsv");
        std::fs::write(&path, "1\tgood book\n0\t\n").unwrap();
        let c = load_text_corpus(&path, "d", Some(2)).unwrap();
        assert_eq!(c.docs.len(), 2);
        assert!(c.docs[1].1.is_empty());
    }

    #[test]
    fn synth_is_deterministic_and_shaped() {
        let spec = SynthSpec::new(3, 50, 1.0, 2.0, 0.5, 7);
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a.labeled.len(), 3);
        for (da, db) in a.labeled.iter().zip(&b.labeled) {
            assert_eq!(da.labeled.len(), 50);
            assert_eq!(da.unlabeled.len(), 50);
            for ((pa, ya), (pb, yb)) in da.labeled.samples.iter().zip(&db.labeled.samples) {
                assert_eq!(ya, yb);
                assert_eq!(pa, pb);
            }
        }
    }

    #[test]
    fn synth_shared_direction_separates_labels_when_noise_is_small() {
        let spec = SynthSpec::new(3, 200, 1.0, 0.0, 0.01, 3);
        let ds = synth_generate(&spec).unwrap();
        for dom in &ds.labeled {
            for (p, y) in &dom.labeled.samples {
                let x = match p {
                    Payload::Counts(sv) => sv.to_dense(),
                    _ => unreachable!(),
                };
                let predicted = usize::from(x[0] > 0.0);
                assert_eq!(predicted, *y);
            }
        }
    }

    /// Ridge-regression linear probe fit by Gaussian elimination; test-only
    /// oracle for transfer measurements.
    fn ridge_probe(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)]) -> f64 {
        let d = train[0].0.len() + 1;
        let mut a = vec![0.0; d * d];
        let mut b = vec![0.0; d];
        for (x, y) in train {
            let mut row = x.clone();
            row.push(1.0);
            let t = if *y == 1 { 1.0 } else { -1.0 };
            for i in 0..d {
                for j in 0..d {
                    a[i * d + j] += row[i] * row[j];
                }
                b[i] += row[i] * t;
            }
        }
        for i in 0..d {
            a[i * d + i] += 1e-3;
        }
        // Solve a w = b.
        let mut w = solve_linear_system(&mut a, &mut b, d);
        let wb = w.pop().unwrap();
        let mut correct = 0;
        for (x, y) in test {
            let s: f64 = x.iter().zip(&w).map(|(xi, wi)| xi * wi).sum::<f64>() + wb;
            if usize::from(s > 0.0) == *y {
                correct += 1;
            }
        }
        correct as f64 / test.len() as f64
    }

    fn solve_linear_system(a: &mut [f64], b: &mut [f64], d: usize) -> Vec<f64> {
        for col in 0..d {
            let mut piv = col;
            for r in col + 1..d {
                if a[r * d + col].abs() > a[piv * d + col].abs() {
                    piv = r;
                }
            }
            for j in 0..d {
                a.swap(col * d + j, piv * d + j);
            }
            b.swap(col, piv);
            let p = a[col * d + col];
            for r in 0..d {
                if r == col {
                    continue;
                }
                let f = a[r * d + col] / p;
                for j in 0..d {
                    a[r * d + j] -= f * a[col * d + j];
                }
                b[r] -= f * b[col];
            }
        }
        (0..d).map(|i| b[i] / a[i * d + i]).collect()
    }

    fn dense_labeled(c: &LabeledCorpus) -> Vec<(Vec<f64>, usize)> {
        c.samples
            .iter()
            .map(|(p, y)| match p {
                Payload::Counts(sv) => (sv.to_dense(), *y),
                _ => unreachable!(),
            })
            .collect()
    }

    #[test]
    fn zero_shared_signal_gives_chance_transfer() {
        // With no invariant direction, a linear rule fit on two domains
        // carries no information about the third.
        let spec = SynthSpec::new(3, 400, 0.0, 2.0, 0.5, 11);
        let ds = synth_generate(&spec).unwrap();
        let mut train = dense_labeled(&ds.labeled[0].labeled);
        train.extend(dense_labeled(&ds.labeled[1].labeled));
        let test = dense_labeled(&ds.labeled[2].labeled);
        let acc = ridge_probe(&train, &test);
        assert!((acc - 0.5).abs() < 0.08, "transfer accuracy {acc}");
    }

    #[test]
    fn demote_moves_domain_and_returns_labels() {
        let spec = SynthSpec::new(3, 20, 1.0, 1.0, 0.1, 1);
        let ds = synth_generate(&spec).unwrap();
        let (ds, withheld) = ds.demote_to_unlabeled(&["synth-2"]).unwrap();
        assert_eq!(ds.labeled.len(), 2);
        assert_eq!(ds.unlabeled_only.len(), 1);
        assert_eq!(ds.unlabeled_only[0].id, "synth-2");
        assert_eq!(withheld.len(), 1);
        assert_eq!(withheld[0].len(), 20);
        assert_eq!(ds.domain_ids(), vec!["synth-0", "synth-1", "synth-2"]);
        ds.validate().unwrap();
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tmpdir();
        let path = dir.path().join("manifest.json");
        let m = DatasetManifest {
            domains: vec![
                ManifestEntry {
                    id: "books".into(),
                    role: DomainRole::Labeled,
                    labeled_path: Some("books.tsv".into()),
                    unlabeled_path: None,
                },
                ManifestEntry {
                    id: "music".into(),
                    role: DomainRole::UnlabeledOnly,
                    labeled_path: None,
                    unlabeled_path: Some("music.tsv".into()),
                },
            ],
        };
        m.save(&path).unwrap();
        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(loaded.domains.len(), 2);
        assert_eq!(loaded.domains[1].role, DomainRole::UnlabeledOnly);
    }

    #[test]
    fn manifest_rejects_missing_paths() {
        let dir = tmpdir();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, r#"{"domains":[{"id":"x","role":"labeled"}]}"#).unwrap();
        assert!(DatasetManifest::load(&path).is_err());
    }
}
