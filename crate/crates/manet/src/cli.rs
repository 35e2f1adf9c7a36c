//! The `manet` binary: training runs with on-disk artifacts, checkpoint
//! evaluation, k-fold cross-validation, the divergence identity checker,
//! synthetic dataset generation, and experiment-directory reporting.
//!
//! Machine-readable output goes to stdout, diagnostics to stderr (routed
//! through the logger, which reads `MAN_LOG_LEVEL`). Exit code is 0 exactly
//! when the command succeeded; `verify-theory` treats a failed identity as
//! an error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, CHECKPOINT_FILENAME};
use crate::config::{
    Config, DataConfig, ExtractorConfig, ExtractorKind, Mode, ModelConfig, Overrides,
};
use crate::data::{
    self, DatasetManifest, DomainRole, DomainSet, EmbeddingTable, LabeledDomain, Payload,
    RawCorpus, RawDoc, UnlabeledCorpus, UnlabeledDomain,
};
use crate::divergence::{random_instance, verify_theorem};
use crate::error::{Error, Result};
use crate::model::ManModel;
use crate::report::{aggregate_runs, fmt_acc, mean, one_sample_t_test, RunManifest, TrainReport};
use crate::trainer::{self, probe_invariance, TrainData};
use crate::LossVariant;

/// Iterations of the post-training domain-identity probe.
const PROBE_ITERATIONS: usize = 1000;

#[derive(Debug, Parser)]
#[command(
    name = "manet",
    version,
    about = "Multinomial adversarial networks for multi-domain text classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one or more runs and write their artifacts.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on its test data.
    Eval(EvalArgs),
    /// K-fold cross-validation, optionally repeated over several seeds.
    CrossValidate(CrossValidateArgs),
    /// Check the discriminator-divergence identities on random families.
    VerifyTheory(VerifyTheoryArgs),
    /// Write the configured synthetic dataset to disk.
    SynthGen(SynthGenArgs),
    /// Aggregate an experiment directory into tables.
    Report(ReportArgs),
}

/// Config keys that can be overridden from the command line.
#[derive(Debug, Args, Default)]
pub struct OverrideArgs {
    /// Master RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Adversarial loss weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Discriminator steps per main step.
    #[arg(long)]
    pub k: Option<usize>,
    /// Discriminator loss: nll or l2.
    #[arg(long)]
    pub loss: Option<LossVariant>,
    /// Feature mode: shared-private, shared-only, or domain-only.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Extractor family: mlp or cnn.
    #[arg(long)]
    pub extractor: Option<ExtractorKind>,
}

impl OverrideArgs {
    fn to_overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            lambda: self.lambda,
            k: self.k,
            loss: self.loss,
            mode: self.mode,
            extractor: self.extractor,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON config document.
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: OverrideArgs,
    /// Directory for run artifacts.
    #[arg(long, default_value = "man-run")]
    pub out_dir: PathBuf,
    /// Number of runs, seeded seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory holding best.ckpt (e.g. <train out-dir>/seed-N).
    #[arg(long, default_value = "man-run")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct CrossValidateArgs {
    /// JSON config document.
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: OverrideArgs,
    /// Directory for fold artifacts.
    #[arg(long, default_value = "man-cv")]
    pub out_dir: PathBuf,
    /// Number of whole cross-validation repeats, seeded seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
}

#[derive(Debug, Args)]
pub struct VerifyTheoryArgs {
    /// Number of random distribution families to check.
    #[arg(long, default_value_t = 500)]
    pub runs: usize,
    /// RNG seed for the family generator.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Identity tolerance.
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct SynthGenArgs {
    /// JSON config document (must use synthetic data).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for the generated corpora.
    #[arg(long, default_value = "man-data")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Experiment directory holding manifest.json.
    #[arg(long, default_value = "man-run")]
    pub out_dir: PathBuf,
    /// Mean accuracy to t-test the runs against.
    #[arg(long)]
    pub baseline: Option<f64>,
}

/// A command's machine-readable output plus its exit code.
#[derive(Debug)]
pub struct CmdOut {
    pub stdout: String,
    pub exit: i32,
}

impl CmdOut {
    fn ok(stdout: String) -> CmdOut {
        CmdOut { stdout, exit: 0 }
    }
}

/// Entry point for the binary: parses arguments, runs the subcommand,
/// prints its output, and maps errors to a nonzero exit code.
pub fn run() -> i32 {
    init_logging();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(out) => {
            print!("{}", out.stdout);
            out.exit
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("MAN_LOG_LEVEL", "warn");
    let _ = env_logger::Builder::from_env(env).target(env_logger::Target::Stderr).try_init();
}

pub fn dispatch(cmd: Command) -> Result<CmdOut> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::CrossValidate(a) => cmd_cross_validate(&a),
        Command::VerifyTheory(a) => cmd_verify_theory(&a),
        Command::SynthGen(a) => cmd_synth_gen(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

// ---- data assembly ----

/// A ready-to-train dataset plus the model configuration corrected for the
/// actual input dimensionality, and the embedding table when one is used.
pub struct Assembled {
    pub data: TrainData,
    pub model_cfg: ModelConfig,
    pub embeddings: Option<EmbeddingTable>,
}

/// Builds the training data for one cross-validation fold; fold 0 is the
/// canonical single-run split. Synthetic corpora are generated in memory
/// and split per domain. Manifest corpora are loaded from disk; for the
/// MLP the vocabulary is fitted on the training folds only, so no test
/// statistics leak into the feature space.
pub fn assemble(cfg: &Config, fold: usize) -> Result<Assembled> {
    if fold >= cfg.folds {
        return Err(Error::invalid("assemble", format!("fold {fold} outside 0..{}", cfg.folds)));
    }
    let mut model_cfg = cfg.model_config();
    match cfg.data_config() {
        DataConfig::Synthetic { spec, unlabeled_only } => {
            let full = data::synth_generate(&spec)?;
            let refs: Vec<&str> = unlabeled_only.iter().map(String::as_str).collect();
            let (mut domains, withheld) = full.demote_to_unlabeled(&refs)?;
            let mut dev = Vec::new();
            let mut test = Vec::new();
            for dom in &mut domains.labeled {
                let splits = data::kfold_split(dom.labeled.len(), cfg.folds, cfg.seed)?;
                let s = &splits[fold];
                test.push(dom.labeled.subset(&s.test));
                dev.push(dom.labeled.subset(&s.dev));
                dom.labeled = dom.labeled.subset(&s.train);
            }
            if let ExtractorConfig::Mlp { input_dim, .. } = &mut model_cfg.extractor {
                *input_dim = spec.dim;
            }
            let data = TrainData::new(domains, dev, test, withheld)?;
            Ok(Assembled { data, model_cfg, embeddings: None })
        }
        DataConfig::Manifest { path, vocab_size } => match cfg.extractor {
            ExtractorKind::Mlp => assemble_manifest_bof(cfg, &path, vocab_size, fold, model_cfg),
            ExtractorKind::Cnn => assemble_manifest_text(cfg, &path, fold, model_cfg),
        },
    }
}

fn raw_subset(raw: &RawCorpus, idx: &[usize]) -> RawCorpus {
    RawCorpus {
        domain: raw.domain.clone(),
        docs: idx.iter().map(|&i| raw.docs[i].clone()).collect(),
    }
}

fn assemble_manifest_bof(
    cfg: &Config,
    path: &str,
    vocab_size: usize,
    fold: usize,
    mut model_cfg: ModelConfig,
) -> Result<Assembled> {
    struct Split {
        id: String,
        train: RawCorpus,
        dev: RawCorpus,
        test: RawCorpus,
        unlabeled: Option<RawCorpus>,
    }
    let raws = data::load_manifest_corpora(Path::new(path), cfg.n_classes)?;
    let mut labeled = Vec::new();
    let mut unlabeled_only = Vec::new();
    for rd in raws {
        match rd.role {
            DomainRole::Labeled => {
                let raw = rd
                    .labeled
                    .ok_or_else(|| Error::Data(format!("labeled domain {:?} has no corpus", rd.id)))?;
                let splits = data::kfold_split(raw.docs.len(), cfg.folds, cfg.seed)?;
                let s = &splits[fold];
                labeled.push(Split {
                    id: rd.id,
                    train: raw_subset(&raw, &s.train),
                    dev: raw_subset(&raw, &s.dev),
                    test: raw_subset(&raw, &s.test),
                    unlabeled: rd.unlabeled,
                });
            }
            DomainRole::UnlabeledOnly => {
                let raw = rd.unlabeled.ok_or_else(|| {
                    Error::Data(format!("unlabeled-only domain {:?} has no corpus", rd.id))
                })?;
                unlabeled_only.push((rd.id, raw));
            }
        }
    }
    if labeled.is_empty() {
        return Err(Error::Data("manifest has no labeled domains".into()));
    }

    let train_refs: Vec<&RawCorpus> = labeled.iter().map(|s| &s.train).collect();
    let built = data::build_vocabulary(&train_refs, vocab_size)?;
    if let Some(w) = &built.warning {
        log::warn!("{w}");
    }
    let vocab = &built.vocabulary;
    log::info!("vocabulary: {} features from {} labeled domains", vocab.len(), labeled.len());

    let mut domains = DomainSet::default();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    for s in labeled {
        dev.push(data::vectorize_labeled(&s.dev, vocab, cfg.n_classes)?);
        test.push(data::vectorize_labeled(&s.test, vocab, cfg.n_classes)?);
        let unlabeled = match &s.unlabeled {
            Some(u) => data::vectorize_unlabeled(u, vocab),
            None => UnlabeledCorpus::empty(&s.id),
        };
        let train = data::vectorize_labeled(&s.train, vocab, cfg.n_classes)?;
        domains.labeled.push(LabeledDomain { id: s.id, labeled: train, unlabeled });
    }
    for (id, raw) in unlabeled_only {
        let unlabeled = data::vectorize_unlabeled(&raw, vocab);
        domains.unlabeled_only.push(UnlabeledDomain { id, unlabeled });
    }
    if let ExtractorConfig::Mlp { input_dim, .. } = &mut model_cfg.extractor {
        *input_dim = vocab.len();
    }
    let data = TrainData::new(domains, dev, test, Vec::new())?;
    Ok(Assembled { data, model_cfg, embeddings: None })
}

fn assemble_manifest_text(
    cfg: &Config,
    path: &str,
    fold: usize,
    model_cfg: ModelConfig,
) -> Result<Assembled> {
    let embed_path = cfg
        .embeddings_path
        .as_ref()
        .ok_or_else(|| Error::Config("cnn extractor requires embeddings_path".into()))?;
    let table = data::load_embeddings(Path::new(embed_path), cfg.embed_dim)?;
    let manifest = DatasetManifest::load(Path::new(path))?;
    let base = Path::new(path).parent().map(Path::to_path_buf).unwrap_or_default();

    let mut domains = DomainSet::default();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    for e in &manifest.domains {
        match e.role {
            DomainRole::Labeled => {
                let lp = base.join(e.labeled_path.as_ref().expect("checked on manifest load"));
                let corpus = data::load_text_corpus(&lp, &e.id, Some(cfg.n_classes))?;
                let full = data::vectorize_text_labeled(&corpus, &table, cfg.n_classes)?;
                let splits = data::kfold_split(full.len(), cfg.folds, cfg.seed)?;
                let s = &splits[fold];
                dev.push(full.subset(&s.dev));
                test.push(full.subset(&s.test));
                let unlabeled = match &e.unlabeled_path {
                    Some(p) => {
                        let uc = data::load_text_corpus(&base.join(p), &e.id, None)?;
                        data::vectorize_text_unlabeled(&uc, &table)
                    }
                    None => UnlabeledCorpus::empty(&e.id),
                };
                domains.labeled.push(LabeledDomain {
                    id: e.id.clone(),
                    labeled: full.subset(&s.train),
                    unlabeled,
                });
            }
            DomainRole::UnlabeledOnly => {
                let p = base.join(e.unlabeled_path.as_ref().expect("checked on manifest load"));
                let uc = data::load_text_corpus(&p, &e.id, None)?;
                let unlabeled = data::vectorize_text_unlabeled(&uc, &table);
                domains.unlabeled_only.push(UnlabeledDomain { id: e.id.clone(), unlabeled });
            }
        }
    }
    let data = TrainData::new(domains, dev, test, Vec::new())?;
    Ok(Assembled { data, model_cfg, embeddings: Some(table) })
}

/// Builds the model for an assembled dataset, seeding initialization.
pub fn build_model(assembled: &Assembled, seed: u64) -> Result<ManModel> {
    let ids: Vec<String> =
        assembled.data.domains.labeled.iter().map(|d| d.id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ManModel::new(
        &assembled.model_cfg,
        &ids,
        assembled.data.domains.n_domains(),
        assembled.embeddings.as_ref(),
        &mut rng,
    )
}

// ---- train ----

/// Trains one run on one fold and writes its artifacts (report.json,
/// report.txt, best.ckpt, train.log) into `run_dir`.
fn run_single(cfg: &Config, fold: usize, run_dir: &Path) -> Result<TrainReport> {
    let assembled = assemble(cfg, fold)?;
    let model = build_model(&assembled, cfg.seed)?;
    let tcfg = cfg.train_config();
    let mut report = trainer::train(&model, &assembled.data, &tcfg)?;
    let n = assembled.data.domains.n_domains();
    if model.has_shared() && n > 1 {
        report.probe_accuracy =
            Some(probe_invariance(&model, &assembled.data, &tcfg, PROBE_ITERATIONS)?);
        report.probe_chance = Some(1.0 / n as f64);
    }
    report.validate()?;

    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join("report.json"), report.to_json()?)?;
    fs::write(run_dir.join("report.txt"), report.render_table())?;
    let ckpt = Checkpoint::new(
        cfg.clone(),
        fold,
        report.best_iteration,
        report.best_mean_dev_accuracy,
        model.state(),
    );
    ckpt.save(&run_dir.join(CHECKPOINT_FILENAME))?;
    fs::write(
        run_dir.join("train.log"),
        format!(
            "seed {} fold {}\niterations {} (best {}, mean dev accuracy {})\ntrain seconds {:.3}\n",
            cfg.seed,
            fold,
            report.iterations_run,
            report.best_iteration,
            fmt_acc(report.best_mean_dev_accuracy),
            report.wall_clock_secs,
        ),
    )?;
    Ok(report)
}

pub fn cmd_train(args: &TrainArgs) -> Result<CmdOut> {
    if args.runs == 0 {
        return Err(Error::invalid("train", "runs must be at least 1"));
    }
    let mut cfg = Config::load(&args.config)?;
    cfg.apply(&args.overrides.to_overrides());
    cfg.validate()?;

    let mut seeds = Vec::new();
    let mut paths = Vec::new();
    let mut rows = Vec::new();
    let mut domains: Vec<String> = Vec::new();
    for r in 0..args.runs {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = cfg.seed + r as u64;
        let run_dir = args.out_dir.join(format!("seed-{}", run_cfg.seed));
        log::info!("run {}/{}: seed {}", r + 1, args.runs, run_cfg.seed);
        let report = run_single(&run_cfg, 0, &run_dir)?;
        log::info!("seed {} done\n{}", run_cfg.seed, report.render_table());
        domains = report.labeled_domains.clone();
        seeds.push(run_cfg.seed);
        paths.push(format!("seed-{}/report.json", run_cfg.seed));
        rows.push(report.final_test_accuracy.clone());
    }

    let aggregate = aggregate_runs(&domains, &rows)?;
    let table = aggregate.to_table();
    fs::write(args.out_dir.join("aggregate.txt"), table.render_text())?;
    fs::write(args.out_dir.join("aggregate.csv"), table.render_csv())?;
    let manifest = RunManifest { config: cfg.clone(), seeds, report_paths: paths, aggregate };
    manifest.validate()?;
    let json = manifest.to_json()?;
    fs::write(args.out_dir.join("manifest.json"), &json)?;
    cfg.save(&args.out_dir.join("config.json"))?;
    Ok(CmdOut::ok(json))
}

// ---- eval ----

#[derive(Debug, Serialize)]
struct EvalRow {
    domain: String,
    test_accuracy: f64,
}

#[derive(Debug, Serialize)]
struct EvalOut {
    checkpoint_iteration: usize,
    fold: usize,
    domains: Vec<EvalRow>,
    mean_test_accuracy: f64,
    /// Unlabeled-only domains with held-out labels, classified on shared
    /// features alone.
    unlabeled: Vec<EvalRow>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<CmdOut> {
    let ckpt = Checkpoint::load(&args.out_dir.join(CHECKPOINT_FILENAME))?;
    let cfg = ckpt.config.clone();
    cfg.validate()?;
    let assembled = assemble(&cfg, ckpt.fold)?;
    let model = build_model(&assembled, cfg.seed)?;
    model.load_state(&ckpt.state)?;

    let with_domain = model.mode != Mode::SharedOnly;
    let mut rows = Vec::new();
    let mut accs = Vec::new();
    for (i, dom) in assembled.data.domains.labeled.iter().enumerate() {
        let acc = trainer::evaluate(&model, &assembled.data.test[i], with_domain)?;
        rows.push(EvalRow { domain: dom.id.clone(), test_accuracy: acc });
        accs.push(acc);
    }
    let mut unlabeled = Vec::new();
    for corpus in &assembled.data.unlabeled_eval {
        let acc = trainer::evaluate(&model, corpus, false)?;
        unlabeled.push(EvalRow { domain: corpus.domain.clone(), test_accuracy: acc });
    }
    let out = EvalOut {
        checkpoint_iteration: ckpt.iteration,
        fold: ckpt.fold,
        mean_test_accuracy: mean(&accs)?,
        domains: rows,
        unlabeled,
    };
    let mut s = serde_json::to_string_pretty(&out)?;
    s.push('\n');
    Ok(CmdOut::ok(s))
}

// ---- cross-validate ----

pub fn cmd_cross_validate(args: &CrossValidateArgs) -> Result<CmdOut> {
    if args.runs == 0 {
        return Err(Error::invalid("cross-validate", "runs must be at least 1"));
    }
    let mut cfg = Config::load(&args.config)?;
    cfg.apply(&args.overrides.to_overrides());
    cfg.validate()?;

    let folds = cfg.folds;
    let mut seeds = Vec::new();
    let mut paths = Vec::new();
    let mut fold_rows = Vec::new();
    let mut seed_rows = Vec::new();
    let mut domains: Vec<String> = Vec::new();
    for r in 0..args.runs {
        let run_seed = cfg.seed + r as u64;
        let mut per_fold: Vec<Vec<f64>> = Vec::new();
        for fold in 0..folds {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = run_seed;
            let run_dir = args.out_dir.join(format!("seed-{run_seed}")).join(format!("fold-{fold}"));
            log::info!("seed {run_seed} fold {fold}");
            let report = run_single(&run_cfg, fold, &run_dir)?;
            domains = report.labeled_domains.clone();
            seeds.push(run_seed);
            paths.push(format!("seed-{run_seed}/fold-{fold}/report.json"));
            fold_rows.push(report.final_test_accuracy.clone());
            per_fold.push(report.final_test_accuracy);
        }
        let row: Vec<f64> = (0..domains.len())
            .map(|d| per_fold.iter().map(|accs| accs[d]).sum::<f64>() / folds as f64)
            .collect();
        seed_rows.push(row);
    }

    // The manifest treats every fold as a run so its aggregate stays
    // recomputable from the per-run reports; the headline table averages
    // folds within a seed first and takes stderr across seeds.
    let aggregate = aggregate_runs(&domains, &fold_rows)?;
    let manifest = RunManifest { config: cfg.clone(), seeds, report_paths: paths, aggregate };
    manifest.validate()?;
    fs::write(args.out_dir.join("manifest.json"), manifest.to_json()?)?;
    cfg.save(&args.out_dir.join("config.json"))?;

    let cv = aggregate_runs(&domains, &seed_rows)?;
    let table = cv.to_table();
    let text = table.render_text();
    fs::write(args.out_dir.join("cv_table.txt"), &text)?;
    fs::write(args.out_dir.join("cv_table.csv"), table.render_csv())?;
    Ok(CmdOut::ok(text))
}

// ---- verify-theory ----

#[derive(Debug, Serialize)]
struct VerifyOut {
    instances: usize,
    checks: usize,
    tolerance: f64,
    failures: usize,
    max_abs_diff_nll: f64,
    max_abs_diff_l2: f64,
    pass: bool,
}

pub fn cmd_verify_theory(args: &VerifyTheoryArgs) -> Result<CmdOut> {
    if args.runs == 0 {
        return Err(Error::invalid("verify-theory", "runs must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut failures = 0usize;
    let mut max_nll = 0.0f64;
    let mut max_l2 = 0.0f64;
    for i in 0..args.runs {
        let family = random_instance(&mut rng);
        for variant in [LossVariant::Nll, LossVariant::L2] {
            let rep = verify_theorem(&family, variant, args.tol)?;
            let worst = match variant {
                LossVariant::Nll => &mut max_nll,
                LossVariant::L2 => &mut max_l2,
            };
            if rep.abs_diff > *worst {
                *worst = rep.abs_diff;
            }
            if rep.pass {
                log::info!(
                    "instance {i:>4} {variant}: N={} S={:>2} |lhs-rhs|={:.3e} ok",
                    rep.domains,
                    rep.support,
                    rep.abs_diff
                );
            } else {
                failures += 1;
                log::warn!(
                    "instance {i:>4} {variant}: N={} S={:>2} lhs={:+.12e} rhs={:+.12e} |diff|={:.3e} FAIL",
                    rep.domains,
                    rep.support,
                    rep.lhs,
                    rep.rhs,
                    rep.abs_diff
                );
            }
        }
    }
    let out = VerifyOut {
        instances: args.runs,
        checks: 2 * args.runs,
        tolerance: args.tol,
        failures,
        max_abs_diff_nll: max_nll,
        max_abs_diff_l2: max_l2,
        pass: failures == 0,
    };
    let mut s = serde_json::to_string_pretty(&out)?;
    s.push('\n');
    Ok(CmdOut { stdout: s, exit: if out.pass { 0 } else { 1 } })
}

// ---- synth-gen ----

fn unlabeled_to_raw(corpus: &UnlabeledCorpus) -> Result<RawCorpus> {
    let mut docs = Vec::with_capacity(corpus.samples.len());
    for p in &corpus.samples {
        let dense = match p {
            Payload::Counts(sv) => sv.to_dense(),
            Payload::Tokens(_) => {
                return Err(Error::Data("token payloads cannot render to bag-of-features".into()))
            }
        };
        let feats = dense
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (format!("f{i}"), *v))
            .collect();
        docs.push(RawDoc { label: None, feats });
    }
    Ok(RawCorpus { domain: corpus.domain.clone(), docs })
}

#[derive(Debug, Serialize)]
struct SynthGenOut {
    manifest: String,
    domains: usize,
    files: Vec<String>,
}

pub fn cmd_synth_gen(args: &SynthGenArgs) -> Result<CmdOut> {
    let mut cfg = Config::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let (spec, unlabeled_only) = match cfg.data_config() {
        DataConfig::Synthetic { spec, unlabeled_only } => (spec, unlabeled_only),
        DataConfig::Manifest { .. } => {
            return Err(Error::invalid("synth-gen", "config must use synthetic data"))
        }
    };
    let set = data::synth_generate(&spec)?;
    fs::create_dir_all(&args.out_dir)?;

    let mut entries = Vec::new();
    let mut files = Vec::new();
    for dom in &set.labeled {
        if unlabeled_only.contains(&dom.id) {
            // Labels never leave the generator for these domains: the
            // labeled samples are written stripped, alongside the pool.
            let name = format!("{}.unlabeled.tsv", dom.id);
            let mut raw = data::sparse_to_raw(&dom.labeled)?;
            for doc in &mut raw.docs {
                doc.label = None;
            }
            raw.docs.extend(unlabeled_to_raw(&dom.unlabeled)?.docs);
            data::write_bof_corpus(&args.out_dir.join(&name), &raw, false)?;
            entries.push(crate::data::ManifestEntry {
                id: dom.id.clone(),
                role: DomainRole::UnlabeledOnly,
                labeled_path: None,
                unlabeled_path: Some(name.clone()),
            });
            files.push(name);
        } else {
            let labeled_name = format!("{}.labeled.tsv", dom.id);
            data::write_bof_corpus(
                &args.out_dir.join(&labeled_name),
                &data::sparse_to_raw(&dom.labeled)?,
                true,
            )?;
            files.push(labeled_name.clone());
            let unlabeled_path = if dom.unlabeled.is_empty() {
                None
            } else {
                let name = format!("{}.unlabeled.tsv", dom.id);
                data::write_bof_corpus(
                    &args.out_dir.join(&name),
                    &unlabeled_to_raw(&dom.unlabeled)?,
                    false,
                )?;
                files.push(name.clone());
                Some(name)
            };
            entries.push(crate::data::ManifestEntry {
                id: dom.id.clone(),
                role: DomainRole::Labeled,
                labeled_path: Some(labeled_name),
                unlabeled_path,
            });
        }
    }
    let manifest = DatasetManifest { domains: entries };
    let manifest_path = args.out_dir.join("dataset.json");
    manifest.save(&manifest_path)?;
    files.push("dataset.json".into());

    let out = SynthGenOut {
        manifest: manifest_path.display().to_string(),
        domains: set.labeled.len(),
        files,
    };
    let mut s = serde_json::to_string_pretty(&out)?;
    s.push('\n');
    Ok(CmdOut::ok(s))
}

// ---- report ----

pub fn cmd_report(args: &ReportArgs) -> Result<CmdOut> {
    let manifest_path = args.out_dir.join("manifest.json");
    let raw = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest = RunManifest::from_json(&raw)?;
    manifest.validate()?;

    let mut missing = Vec::new();
    let mut reports = Vec::new();
    for rel in &manifest.report_paths {
        let p = args.out_dir.join(rel);
        match fs::read_to_string(&p) {
            Ok(s) => reports.push(TrainReport::from_json(&s)?),
            Err(_) => missing.push(rel.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing run reports: {}", missing.join(", "))));
    }

    let domains = reports[0].labeled_domains.clone();
    let rows: Vec<Vec<f64>> = reports.iter().map(|r| r.final_test_accuracy.clone()).collect();
    let aggregate = aggregate_runs(&domains, &rows)?;
    let table = aggregate.to_table();
    let mut out = table.render_text();

    let probes: Vec<f64> = reports.iter().filter_map(|r| r.probe_accuracy).collect();
    if !probes.is_empty() {
        let chance = reports.iter().find_map(|r| r.probe_chance).unwrap_or(0.0);
        out.push_str(&format!(
            "domain probe accuracy {} over {} runs (chance {})\n",
            fmt_acc(mean(&probes)?),
            probes.len(),
            fmt_acc(chance)
        ));
    }
    if let Some(baseline) = args.baseline {
        let means: Vec<f64> = reports.iter().map(|r| r.mean_final_test_accuracy).collect();
        if means.len() >= 2 {
            let t = one_sample_t_test(&means, baseline)?;
            out.push_str(&format!(
                "t-test vs baseline {}: t={:.3} df={:.0} p={:.4}\n",
                fmt_acc(baseline),
                t.t,
                t.df,
                t.p
            ));
        } else {
            log::warn!("t-test needs at least 2 runs; skipping");
        }
    }
    fs::write(args.out_dir.join("report.txt"), &out)?;
    fs::write(args.out_dir.join("report.csv"), table.render_csv())?;
    Ok(CmdOut::ok(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mode;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.n_classes = 2;
        cfg.shared_dim = 6;
        cfg.domain_dim = 4;
        cfg.dropout = 0.2;
        cfg.hidden_dims = vec![10];
        cfg.lambda = 0.05;
        cfg.k = 1;
        cfg.lr_main = 1e-3;
        cfg.lr_d = 1e-3;
        cfg.batch_size = 8;
        cfg.max_iterations = 20;
        cfg.eval_every = 10;
        cfg.patience = 5;
        cfg.seed = 11;
        cfg.data_kind = "synthetic".into();
        cfg.synth_domains = 3;
        cfg.synth_labeled_per_domain = 30;
        cfg.synth_unlabeled_per_domain = 12;
        cfg.synth_shared_signal = 2.0;
        cfg.synth_domain_signal = 2.0;
        cfg.synth_noise = 0.3;
        cfg.synth_dim = 8;
        cfg.folds = 3;
        cfg
    }

    fn save_config(cfg: &Config, dir: &Path) -> PathBuf {
        let p = dir.join("config.json");
        cfg.save(&p).unwrap();
        p
    }

    #[test]
    fn cli_parses_the_documented_flags() {
        let cli = Cli::try_parse_from([
            "manet",
            "train",
            "--config",
            "c.json",
            "--seed",
            "7",
            "--lambda",
            "0.1",
            "--k",
            "3",
            "--loss",
            "l2",
            "--mode",
            "shared-only",
            "--extractor",
            "mlp",
            "--out-dir",
            "runs",
            "--runs",
            "2",
        ])
        .unwrap();
        match cli.command {
            Command::Train(a) => {
                assert_eq!(a.overrides.seed, Some(7));
                assert_eq!(a.overrides.lambda, Some(0.1));
                assert_eq!(a.overrides.k, Some(3));
                assert_eq!(a.overrides.loss, Some(LossVariant::L2));
                assert_eq!(a.overrides.mode, Some(Mode::SharedOnly));
                assert_eq!(a.overrides.extractor, Some(ExtractorKind::Mlp));
                assert_eq!(a.out_dir, PathBuf::from("runs"));
                assert_eq!(a.runs, 2);
            }
            _ => panic!("expected train"),
        }

        let cli = Cli::try_parse_from([
            "manet",
            "verify-theory",
            "--runs",
            "10",
            "--seed",
            "2",
            "--tol",
            "1e-8",
        ])
        .unwrap();
        match cli.command {
            Command::VerifyTheory(a) => {
                assert_eq!(a.runs, 10);
                assert_eq!(a.seed, 2);
                assert_eq!(a.tol, 1e-8);
            }
            _ => panic!("expected verify-theory"),
        }

        assert!(Cli::try_parse_from(["manet", "train", "--config", "c", "--loss", "huber"])
            .is_err());
        for sub in ["eval", "cross-validate", "synth-gen", "report"] {
            let args: Vec<&str> = match sub {
                "eval" | "report" => vec!["manet", sub, "--out-dir", "d"],
                _ => vec!["manet", sub, "--config", "c.json"],
            };
            Cli::try_parse_from(args).unwrap();
        }
    }

    #[test]
    fn assemble_splits_synthetic_data_by_fold_and_fixes_input_dim() {
        let mut cfg = tiny_config();
        cfg.synth_unlabeled_only = vec!["synth-1".into()];
        let a = assemble(&cfg, 0).unwrap();
        let ids: Vec<&str> = a.data.domains.labeled.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["synth-0", "synth-2"]);
        assert_eq!(a.data.domains.unlabeled_only.len(), 1);
        assert_eq!(a.data.domains.unlabeled_only[0].id, "synth-1");
        assert_eq!(a.data.unlabeled_eval.len(), 1);
        assert_eq!(a.data.unlabeled_eval[0].len(), 30);
        for (i, dom) in a.data.domains.labeled.iter().enumerate() {
            assert_eq!(dom.labeled.len(), 10);
            assert_eq!(a.data.dev[i].len(), 10);
            assert_eq!(a.data.test[i].len(), 10);
            assert_eq!(dom.unlabeled.len(), 12);
        }
        match a.model_cfg.extractor {
            ExtractorConfig::Mlp { input_dim, .. } => assert_eq!(input_dim, 8),
            _ => panic!("expected mlp"),
        }

        // Folds move the samples around but keep the shape.
        let b = assemble(&cfg, 2).unwrap();
        assert_eq!(b.data.domains.labeled[0].labeled.len(), 10);
        assert!(assemble(&cfg, 3).is_err());
    }

    #[test]
    fn train_writes_artifacts_and_snapshot_reflects_overrides() {
        let dir = tmpdir();
        let cfg_path = save_config(&tiny_config(), dir.path());
        let out_dir = dir.path().join("run");
        let args = TrainArgs {
            config: cfg_path,
            overrides: OverrideArgs {
                lambda: Some(0.02),
                k: Some(2),
                ..OverrideArgs::default()
            },
            out_dir: out_dir.clone(),
            runs: 1,
        };
        let out = cmd_train(&args).unwrap();
        assert_eq!(out.exit, 0);

        for f in ["manifest.json", "config.json", "aggregate.txt", "aggregate.csv"] {
            assert!(out_dir.join(f).is_file(), "missing {f}");
        }
        for f in ["report.json", "report.txt", "best.ckpt", "train.log"] {
            assert!(out_dir.join("seed-11").join(f).is_file(), "missing seed-11/{f}");
        }

        let snapshot = Config::load(&out_dir.join("config.json")).unwrap();
        assert_eq!(snapshot.lambda, 0.02);
        assert_eq!(snapshot.k, 2);

        let manifest = RunManifest::from_json(&out.stdout).unwrap();
        assert_eq!(manifest.seeds, vec![11]);
        assert_eq!(manifest.config.lambda, 0.02);
        assert_eq!(
            manifest.aggregate.domains,
            vec!["synth-0".to_string(), "synth-1".into(), "synth-2".into()]
        );
        assert!(manifest.aggregate.per_domain_stderr.is_none());

        let report = TrainReport::from_json(
            &fs::read_to_string(out_dir.join("seed-11/report.json")).unwrap(),
        )
        .unwrap();
        assert!(report.probe_accuracy.is_some());
        assert_eq!(report.probe_chance, Some(1.0 / 3.0));
        assert_eq!(report.final_test_accuracy, manifest.aggregate.per_domain_mean);
    }

    #[test]
    fn same_config_and_seed_trains_byte_identical_reports() {
        let dir = tmpdir();
        let cfg_path = save_config(&tiny_config(), dir.path());
        let mut bytes = Vec::new();
        for name in ["a", "b"] {
            let out_dir = dir.path().join(name);
            let args = TrainArgs {
                config: cfg_path.clone(),
                overrides: OverrideArgs::default(),
                out_dir: out_dir.clone(),
                runs: 1,
            };
            cmd_train(&args).unwrap();
            bytes.push(fs::read(out_dir.join("seed-11/report.json")).unwrap());
        }
        assert_eq!(bytes[0], bytes[1]);
    }

    #[test]
    fn missing_config_fails_without_artifacts() {
        let dir = tmpdir();
        let out_dir = dir.path().join("out");
        let args = TrainArgs {
            config: dir.path().join("nope.json"),
            overrides: OverrideArgs::default(),
            out_dir: out_dir.clone(),
            runs: 1,
        };
        assert!(cmd_train(&args).is_err());
        assert!(!out_dir.exists());
    }

    #[test]
    fn eval_reproduces_the_reported_test_accuracy() {
        let dir = tmpdir();
        let cfg_path = save_config(&tiny_config(), dir.path());
        let out_dir = dir.path().join("run");
        cmd_train(&TrainArgs {
            config: cfg_path,
            overrides: OverrideArgs::default(),
            out_dir: out_dir.clone(),
            runs: 1,
        })
        .unwrap();
        let report = TrainReport::from_json(
            &fs::read_to_string(out_dir.join("seed-11/report.json")).unwrap(),
        )
        .unwrap();

        let out = cmd_eval(&EvalArgs { out_dir: out_dir.join("seed-11") }).unwrap();
        let v: serde_json::Value = serde_json::from_str(&out.stdout).unwrap();
        assert_eq!(
            v["mean_test_accuracy"].as_f64().unwrap(),
            report.mean_final_test_accuracy
        );
        let domains = v["domains"].as_array().unwrap();
        assert_eq!(domains.len(), 3);
        for (row, expect) in domains.iter().zip(&report.final_test_accuracy) {
            assert_eq!(row["test_accuracy"].as_f64().unwrap(), *expect);
        }
    }

    #[test]
    fn verify_theory_passes_at_tolerance_and_fails_at_zero() {
        let ok = cmd_verify_theory(&VerifyTheoryArgs { runs: 25, seed: 3, tol: 1e-9 }).unwrap();
        assert_eq!(ok.exit, 0);
        let v: serde_json::Value = serde_json::from_str(&ok.stdout).unwrap();
        assert_eq!(v["failures"].as_u64(), Some(0));
        assert_eq!(v["checks"].as_u64(), Some(50));
        assert!(v["pass"].as_bool().unwrap());
        assert!(v["max_abs_diff_nll"].as_f64().unwrap() < 1e-9);

        let bad = cmd_verify_theory(&VerifyTheoryArgs { runs: 25, seed: 3, tol: 0.0 }).unwrap();
        assert_eq!(bad.exit, 1);
        let v: serde_json::Value = serde_json::from_str(&bad.stdout).unwrap();
        assert!(!v["pass"].as_bool().unwrap());
    }

    #[test]
    fn synth_gen_writes_a_dataset_the_manifest_path_can_train_on() {
        let dir = tmpdir();
        let mut cfg = tiny_config();
        cfg.synth_unlabeled_only = vec!["synth-2".into()];
        let cfg_path = save_config(&cfg, dir.path());
        let data_dir = dir.path().join("data");
        let out = cmd_synth_gen(&SynthGenArgs {
            config: cfg_path,
            seed: None,
            out_dir: data_dir.clone(),
        })
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&out.stdout).unwrap();
        assert_eq!(v["domains"].as_u64(), Some(3));

        let manifest = DatasetManifest::load(&data_dir.join("dataset.json")).unwrap();
        assert_eq!(manifest.domains.len(), 3);
        assert_eq!(manifest.domains[2].role, DomainRole::UnlabeledOnly);
        assert!(manifest.domains[2].labeled_path.is_none());

        // Train-side assembly of the generated files.
        let mut mcfg = tiny_config();
        mcfg.data_kind = "manifest".into();
        mcfg.manifest_path = Some(data_dir.join("dataset.json").display().to_string());
        mcfg.vocab_size = 64;
        mcfg.validate().unwrap();
        let a = assemble(&mcfg, 0).unwrap();
        let ids: Vec<&str> = a.data.domains.labeled.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["synth-0", "synth-1"]);
        assert_eq!(a.data.domains.unlabeled_only.len(), 1);
        // 30 labeled stripped + 12 pool samples.
        assert_eq!(a.data.domains.unlabeled_only[0].unlabeled.len(), 42);
        assert!(a.data.unlabeled_eval.is_empty());
        match a.model_cfg.extractor {
            ExtractorConfig::Mlp { input_dim, .. } => assert!(input_dim > 0 && input_dim <= 8),
            _ => panic!("expected mlp"),
        }
    }

    #[test]
    fn cross_validate_runs_every_fold_and_aggregates() {
        let dir = tmpdir();
        let mut cfg = tiny_config();
        cfg.max_iterations = 10;
        let cfg_path = save_config(&cfg, dir.path());
        let out_dir = dir.path().join("cv");
        let out = cmd_cross_validate(&CrossValidateArgs {
            config: cfg_path,
            overrides: OverrideArgs::default(),
            out_dir: out_dir.clone(),
            runs: 1,
        })
        .unwrap();
        assert!(out.stdout.contains("Avg"));

        let manifest =
            RunManifest::from_json(&fs::read_to_string(out_dir.join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest.seeds, vec![11, 11, 11]);
        assert_eq!(manifest.report_paths.len(), 3);
        for p in &manifest.report_paths {
            assert!(out_dir.join(p).is_file(), "missing {p}");
        }
        assert!(out_dir.join("cv_table.txt").is_file());
        assert!(out_dir.join("cv_table.csv").is_file());
        // Single seed: the headline table has no stderr column.
        assert!(!out.stdout.contains("stderr"));
    }

    #[test]
    fn report_recomputes_aggregates_and_lists_missing_files() {
        let dir = tmpdir();
        let mut cfg = tiny_config();
        cfg.max_iterations = 10;
        let cfg_path = save_config(&cfg, dir.path());
        let out_dir = dir.path().join("run");
        cmd_train(&TrainArgs {
            config: cfg_path,
            overrides: OverrideArgs::default(),
            out_dir: out_dir.clone(),
            runs: 2,
        })
        .unwrap();

        let out = cmd_report(&ReportArgs { out_dir: out_dir.clone(), baseline: Some(0.5) })
            .unwrap();
        assert!(out.stdout.contains("Avg"));
        assert!(out.stdout.contains("stderr"));
        assert!(out.stdout.contains("domain probe accuracy"));
        assert!(out.stdout.contains("t-test vs baseline"));
        assert!(out_dir.join("report.txt").is_file());
        assert!(out_dir.join("report.csv").is_file());

        fs::remove_file(out_dir.join("seed-12/report.json")).unwrap();
        let err = cmd_report(&ReportArgs { out_dir, baseline: None }).err().expect("must fail");
        assert!(err.to_string().contains("seed-12/report.json"), "got: {err}");
    }
}
