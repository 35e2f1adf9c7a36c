//! Measures how much domain identity survives in the shared features.
//!
//! Two models train on the same four-domain synthetic set (three labeled,
//! one unlabeled-only): the full adversarial model and a lambda=0 ablation
//! that differs in nothing else. Afterwards a fresh discriminator is
//! trained on each model's frozen shared features. If the adversarial term
//! does its job, that probe falls toward chance (1/4) for the full model
//! while staying high for the ablation, without giving up test accuracy.
//! As a side effect the shared features become usable on the unlabeled
//! domain, where classification runs with a zeroed domain vector.

use manet::cli::{assemble, build_model};
use manet::config::Config;
use manet::trainer::{self, probe_invariance};
use manet::Result;

/// The domain-private shortcut is twice as strong as the invariant signal,
/// so a model free to use it (the ablation) will, and the probe can read
/// the domain right back out of its shared features.
fn experiment_config(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.n_classes = 2;
    cfg.shared_dim = 16;
    cfg.domain_dim = 8;
    cfg.hidden_dims = vec![32];
    cfg.dropout = 0.4;
    cfg.lambda = 0.1;
    cfg.k = 5;
    cfg.lr_main = 3e-4;
    cfg.lr_d = 3e-4;
    cfg.batch_size = 16;
    // One evaluation at the end: the adversarial representation anneals
    // slowly, and an early dev-accuracy peak would hand back a model the
    // adversary has not yet reshaped.
    cfg.max_iterations = 32000;
    cfg.eval_every = 32000;
    cfg.patience = 24;
    cfg.seed = seed;
    cfg.data_kind = "synthetic".into();
    cfg.synth_domains = 4;
    cfg.synth_labeled_per_domain = 400;
    cfg.synth_unlabeled_per_domain = 400;
    cfg.synth_shared_signal = 1.5;
    cfg.synth_domain_signal = 3.0;
    cfg.synth_noise = 1.0;
    cfg.synth_unlabeled_only = vec!["synth-3".into()];
    cfg.folds = 5;
    cfg
}

struct Outcome {
    mean_test: f64,
    unlabeled_test: f64,
    probe: f64,
}

fn train_and_probe(cfg: &Config) -> Result<Outcome> {
    let assembled = assemble(cfg, 0)?;
    let model = build_model(&assembled, cfg.seed)?;
    let tcfg = cfg.train_config();
    let report = trainer::train(&model, &assembled.data, &tcfg)?;
    let probe = probe_invariance(&model, &assembled.data, &tcfg, 1000)?;
    Ok(Outcome {
        mean_test: report.mean_final_test_accuracy,
        unlabeled_test: report.unlabeled_test_accuracy[0],
        probe,
    })
}

fn main() -> Result<()> {
    let adversarial = experiment_config(7);
    let mut ablation = experiment_config(7);
    ablation.lambda = 0.0;

    println!("training the adversarial model (lambda = {}) ...", adversarial.lambda);
    let man = train_and_probe(&adversarial)?;
    println!("training the ablation (lambda = 0) ...");
    let abl = train_and_probe(&ablation)?;

    println!();
    println!("model        domain probe   labeled test   unlabeled test");
    println!(
        "adversarial  {:.4}         {:.4}         {:.4}",
        man.probe, man.mean_test, man.unlabeled_test
    );
    println!(
        "lambda = 0   {:.4}         {:.4}         {:.4}",
        abl.probe, abl.mean_test, abl.unlabeled_test
    );
    println!();
    println!("probe chance level: 0.2500 (four domains)");
    println!(
        "adversarial training removes {:.0}% of the probe's edge over chance",
        100.0 * (1.0 - (man.probe - 0.25) / (abl.probe - 0.25))
    );
    println!(
        "and lifts the unlabeled domain by {:+.4} accuracy",
        man.unlabeled_test - abl.unlabeled_test
    );
    Ok(())
}
