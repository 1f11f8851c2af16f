use std::time::Instant;

use anyhow::Result;
use ftune::numerics::RngStream;
use ftune::taskgen::{certify_task, gen_corpus, gen_task, write_corpus, write_task, Difficulty, TaskFamily, TaskSizes};
use ftune::trainers::OptimizerConfig;

use super::{load_reference, opt_cell, prepare_out, settings_for, write_summary};
use crate::manifest::Manifest;
use crate::{usage, GenCorpusArgs, GenTaskArgs};

pub const CORPUS_FILE: &str = "corpus.txt";
pub const CERTIFICATE_FILE: &str = "certificate.txt";

pub fn corpus(a: GenCorpusArgs, args: &[String]) -> Result<()> {
    let started = Instant::now();
    let settings = settings_for(a.common.config.as_deref())?;
    let spec = settings.corpus_spec()?;
    if a.size == 0 {
        return Err(usage("--size must be positive"));
    }
    prepare_out(&a.out)?;
    let corpus = gen_corpus(&spec, a.size, &RngStream::named(a.common.seed, "corpus"))?;
    let path = a.out.join(CORPUS_FILE);
    write_corpus(&path, &corpus)?;
    println!(
        "wrote {} sequences ({} tokens) to {}",
        corpus.sequences.len(),
        corpus.num_tokens(),
        path.display()
    );
    let mut m = Manifest::new("gen-corpus", args, Some(a.common.seed), a.common.config.as_deref());
    m.output(&path);
    m.options = settings.resolved(OptimizerConfig::default(), a.common.seed)?;
    m.write(&a.out, started)
}

pub fn task(a: GenTaskArgs, args: &[String]) -> Result<()> {
    let started = Instant::now();
    let settings = settings_for(a.common.config.as_deref())?;
    let family: TaskFamily = a.family.parse().map_err(|e| usage(format!("--family: {e}")))?;
    let difficulty: Difficulty = a.difficulty.parse().map_err(|e| usage(format!("--difficulty: {e}")))?;
    let spec = settings.corpus_spec()?;
    let config = settings.model()?;
    let reference = a.checkpoint.as_deref().map(|p| load_reference(p, &config)).transpose()?;
    prepare_out(&a.out)?;
    let sizes = TaskSizes {
        train: a.train,
        eval: a.eval,
    };
    let task = gen_task(&spec, family, difficulty, sizes, &RngStream::named(a.common.seed, "task"))?;
    write_task(&a.out, &task)?;
    let cert = certify_task(&task, config.vocab_size, reference.as_ref().map(|c| (&c.params, &config)))?;
    let cert_path = a.out.join(CERTIFICATE_FILE);
    write_summary(
        &cert_path,
        &[
            ("task", task.name.clone()),
            ("label_imbalance", cert.label_imbalance.to_string()),
            ("split_overlap", cert.split_overlap.to_string()),
            ("majority_rate", cert.majority_rate.to_string()),
            ("bag_of_tokens_eval_accuracy", cert.bag_of_tokens.eval_accuracy.to_string()),
            ("frozen_probe_eval_accuracy", opt_cell(cert.frozen_probe.as_ref().map(|p| p.eval_accuracy))),
            ("valid", cert.is_valid().to_string()),
            ("head_inseparable", opt_cell_bool(cert.frozen_probe.is_some().then(|| cert.is_head_inseparable()))),
        ],
    )?;
    println!(
        "{}: {} train / {} eval, majority {:.3}, imbalance {:.4}, overlap {}{}",
        task.name,
        task.train.len(),
        task.eval.len(),
        cert.majority_rate,
        cert.label_imbalance,
        cert.split_overlap,
        cert.frozen_probe
            .as_ref()
            .map(|p| format!(", frozen probe {:.3}", p.eval_accuracy))
            .unwrap_or_default()
    );
    let mut m = Manifest::new("gen-task", args, Some(a.common.seed), a.common.config.as_deref());
    if let Some(p) = &a.checkpoint {
        m.input("checkpoint", p);
    }
    m.output(&a.out.join("train.tsv"));
    m.output(&a.out.join("eval.tsv"));
    m.output(&a.out.join("task.meta"));
    m.output(&cert_path);
    m.options = settings.resolved(OptimizerConfig::default(), a.common.seed)?;
    m.write(&a.out, started)
}

fn opt_cell_bool(v: Option<bool>) -> String {
    v.map(|b| b.to_string()).unwrap_or_default()
}
