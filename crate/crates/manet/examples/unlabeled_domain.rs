//! Classifying a domain that contributed no labels.
//!
//! Four domains, one of them unlabeled-only. After adversarial training the
//! classifier runs two ways on each labeled test set: the normal path (the
//! shared and private feature vectors concatenated) and the transfer path,
//! where the private half of the classifier input is a zero vector. The
//! transfer path is the only one available on the unlabeled domain, which
//! has no private extractor at all, so its accuracy shows how much of the
//! task the shared features carry on their own.

use manet::cli::{assemble, build_model};
use manet::config::Config;
use manet::trainer::{self, evaluate};
use manet::Result;

fn main() -> Result<()> {
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
    cfg.max_iterations = 32000;
    cfg.eval_every = 32000;
    cfg.patience = 24;
    cfg.seed = 7;
    cfg.data_kind = "synthetic".into();
    cfg.synth_domains = 4;
    cfg.synth_labeled_per_domain = 400;
    cfg.synth_unlabeled_per_domain = 400;
    cfg.synth_shared_signal = 1.5;
    cfg.synth_domain_signal = 3.0;
    cfg.synth_noise = 1.0;
    cfg.synth_unlabeled_only = vec!["synth-3".into()];
    cfg.folds = 5;

    let assembled = assemble(&cfg, 0)?;
    let model = build_model(&assembled, cfg.seed)?;
    println!("training on {} labeled domains + 1 unlabeled-only domain...", assembled.data.domains.labeled.len());
    trainer::train(&model, &assembled.data, &cfg.train_config())?;

    println!();
    println!("domain     with private   zeroed private");
    for (dom, test) in assembled.data.domains.labeled.iter().zip(&assembled.data.test) {
        let full = evaluate(&model, test, true)?;
        let zeroed = evaluate(&model, test, false)?;
        println!("{:<10} {full:>12.4} {zeroed:>16.4}", dom.id);
    }
    for eval in &assembled.data.unlabeled_eval {
        let zeroed = evaluate(&model, eval, false)?;
        println!("{:<10} {:>12} {zeroed:>16.4}", eval.domain, "-");
    }
    println!();
    println!("the unlabeled domain never saw a label during training; its row");
    println!("is pure transfer through the domain-invariant shared features.");
    Ok(())
}
