mod analyze;
mod finetune;
mod gen;
mod infer;
mod pretrain;
mod sweep;

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use clap::Parser;
use ftune::artifacts::{load_checkpoint, Checkpoint};
use ftune::encoder::ModelConfig;
use ftune::taskgen::{read_task, Task};
use ftune::trainers::RunRecord;

use crate::manifest::Manifest;
use crate::settings::{Settings, KEYS};
use crate::{usage, Cli, Command};

pub fn dispatch(command: Command, args: &[String]) -> Result<()> {
    match command {
        Command::GenCorpus(a) => gen::corpus(a, args),
        Command::GenTask(a) => gen::task(a, args),
        Command::Pretrain(a) => pretrain::run(a, args),
        Command::Finetune(a) => finetune::run(a, args),
        Command::Sweep(a) => sweep::run(a, args),
        Command::Analyze(a) => analyze::run(a, args),
        Command::Infer(a) => infer::run(a),
        Command::Rerun(a) => rerun(&a.manifest, a.out.as_deref()),
        Command::Keys => {
            for (k, d) in KEYS {
                println!("{k:<24} {d}");
            }
            Ok(())
        }
    }
}

fn rerun(path: &Path, out: Option<&Path>) -> Result<()> {
    let m = Manifest::load(path)?;
    let args = m.replay_args(out);
    let argv: Vec<String> = std::iter::once("ftune".to_string()).chain(args.iter().cloned()).collect();
    let cli = Cli::try_parse_from(&argv).map_err(|e| usage(format!("manifest arguments no longer parse: {e}")))?;
    if matches!(cli.command, Command::Rerun(_)) {
        return Err(usage("a manifest cannot replay another rerun"));
    }
    dispatch(cli.command, &args)?;
    let out_dir = match out {
        Some(o) => o.to_path_buf(),
        None => m
            .outputs
            .first()
            .and_then(|p| p.parent())
            .map(Path::to_path_buf)
            .context("manifest lists no outputs")?,
    };
    let replay = Manifest::load(&out_dir.join(crate::manifest::MANIFEST_FILE))?;
    if replay.options != m.options {
        anyhow::bail!("resolved options differ from the manifest (configuration file changed?)");
    }
    Ok(())
}

pub(crate) fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub(crate) fn load_task(path: &Path, config: &ModelConfig) -> Result<Task> {
    let task = read_task(path).with_context(|| format!("reading task {}", path.display()))?;
    task.validate(config.vocab_size, config.max_seq_len)?;
    Ok(task)
}

/// Loads a checkpoint and checks its encoder layout against `config`.
pub(crate) fn load_reference(path: &Path, config: &ModelConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    ck.params
        .check_layout(config)
        .with_context(|| format!("checkpoint {} does not match the model configuration", path.display()))?;
    Ok(ck)
}

pub(crate) fn write_record(path: &Path, record: &RunRecord) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    record.write_csv(BufWriter::new(f))?;
    Ok(())
}

pub(crate) fn write_summary(path: &Path, rows: &[(&str, String)]) -> Result<()> {
    let text: String = rows.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub(crate) fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub(crate) fn settings_for(config: Option<&Path>) -> Result<Settings> {
    Settings::load(config)
}
