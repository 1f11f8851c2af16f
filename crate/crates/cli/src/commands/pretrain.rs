use std::time::Instant;

use anyhow::{Context, Result};
use ftune::artifacts::save_checkpoint;
use ftune::taskgen::read_corpus;
use ftune::trainers::{pretrain, OptimizerConfig, PretrainOptions};

use super::{prepare_out, settings_for, write_record, write_summary};
use crate::manifest::Manifest;
use crate::PretrainArgs;

pub const CHECKPOINT_FILE: &str = "checkpoint.ftck";

pub fn run(a: PretrainArgs, args: &[String]) -> Result<()> {
    let started = Instant::now();
    let mut settings = settings_for(a.common.config.as_deref())?;
    if let Some(s) = a.steps {
        settings.set("steps", s);
    }
    let config = settings.model()?;
    let opt = settings.optimizer(OptimizerConfig::pretraining())?;
    let spec = settings.corpus_spec()?;
    let corpus = read_corpus(&a.corpus, &spec).with_context(|| format!("reading corpus {}", a.corpus.display()))?;
    prepare_out(&a.out)?;
    let opts = PretrainOptions {
        seed: a.common.seed,
        exec: settings.exec()?,
        ..PretrainOptions::default()
    };
    let out = pretrain(&config, &corpus, &opt, &opts)?;
    let ck_path = a.out.join(CHECKPOINT_FILE);
    let crc = save_checkpoint(&out.params, &ck_path)?;
    let rec_path = a.out.join("record.csv");
    write_record(&rec_path, &out.record)?;
    let sum_path = a.out.join("summary.txt");
    write_summary(
        &sum_path,
        &[
            ("steps", opt.total_steps.to_string()),
            ("initial_heldout_loss", out.initial_loss.to_string()),
            ("final_heldout_loss", out.final_loss.to_string()),
            ("masked_accuracy", out.masked_accuracy.to_string()),
            ("unigram_baseline", out.unigram_baseline.to_string()),
            ("checkpoint_crc", format!("{crc:08x}")),
        ],
    )?;
    println!(
        "pre-trained {} steps: held-out loss {:.4} -> {:.4}, masked accuracy {:.3} (unigram {:.3}); checkpoint crc {crc:08x}",
        opt.total_steps, out.initial_loss, out.final_loss, out.masked_accuracy, out.unigram_baseline
    );
    let mut m = Manifest::new("pretrain", args, Some(a.common.seed), a.common.config.as_deref());
    m.input("corpus", &a.corpus);
    for p in [&ck_path, &rec_path, &sum_path] {
        m.output(p);
    }
    m.options = settings.resolved(OptimizerConfig::pretraining(), a.common.seed)?;
    m.write(&a.out, started)
}
