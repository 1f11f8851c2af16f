use std::io::Write;

use anyhow::{bail, Context, Result};
use ftune::artifacts::{load_bundle, load_checkpoint, sparse_encode, SparseModel};
use ftune::encoder::{encode, HeadKind, ParameterSet, TaskHead};
use ftune::masking::BinaryMask;
use ftune::numerics::RngStream;
use ftune::taskgen::read_token_lines;

use super::settings_for;
use crate::{usage, Engine, InferArgs};

/// Splits `head.w`/`head.b` off a fine-tuned checkpoint.
fn split_head(params: &ParameterSet) -> Result<(ParameterSet, Option<TaskHead>)> {
    let mut encoder = ParameterSet::new();
    for (n, t) in params.iter() {
        if !n.starts_with("head.") {
            encoder.insert(n, t.clone());
        }
    }
    let head = match (params.get("head.w"), params.get("head.b")) {
        (Ok(w), Ok(b)) => {
            let outputs = w.shape().get(1).copied().unwrap_or(0);
            let kind = if outputs == 1 { HeadKind::Regression } else { HeadKind::Classification(outputs) };
            Some(TaskHead::new(kind, w.clone(), b.clone())?)
        }
        (Err(_), Err(_)) => None,
        _ => bail!("checkpoint has only one of head.w and head.b"),
    };
    Ok((encoder, head))
}

fn format_output(head: &TaskHead, y: &[f64]) -> String {
    match head.kind {
        HeadKind::Classification(_) => ftune::encoder::argmax(y).to_string(),
        HeadKind::Regression => y[0].to_string(),
    }
}

pub fn run(a: InferArgs) -> Result<()> {
    let config = settings_for(a.config.as_deref())?.model()?;
    let ck = load_checkpoint(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let (params, own_head) = split_head(&ck.params)?;
    params
        .check_layout(&config)
        .with_context(|| format!("checkpoint {} does not match the model configuration", a.checkpoint.display()))?;
    let (mask, head): (Option<BinaryMask>, TaskHead) = match (&a.bundle, own_head) {
        (Some(b), None) => {
            let b = load_bundle(b, &ck).with_context(|| format!("loading bundle {}", b.display()))?;
            (Some(b.mask), b.head)
        }
        (None, Some(h)) => (None, h),
        (Some(_), Some(_)) => return Err(usage("--bundle needs the reference checkpoint, not a fine-tuned model with its own head")),
        (None, None) => return Err(usage("checkpoint has no task head; pass the --bundle trained on it")),
    };
    if head.hidden() != config.hidden_size {
        bail!("task head width {} does not match hidden size {}", head.hidden(), config.hidden_size);
    }
    let inputs = read_token_lines(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match a.engine {
        Engine::Dense => {
            let mut unused = RngStream::named(0, "infer");
            for (i, tokens) in inputs.iter().enumerate() {
                let pooled = encode(&params, &config, mask.as_ref(), tokens, &mut unused, false)
                    .with_context(|| format!("input line {}", i + 1))?;
                let y = head.forward(&pooled)?;
                writeln!(out, "{}", format_output(&head, y.data()))?;
            }
        }
        Engine::Sparse => {
            let model = SparseModel::new(&params, mask.as_ref(), &config)?;
            let (mut used, mut dense) = (0usize, 0usize);
            for (i, tokens) in inputs.iter().enumerate() {
                let s = sparse_encode(&model, tokens).with_context(|| format!("input line {}", i + 1))?;
                used += s.multiplies;
                dense += s.dense_multiplies;
                let y = head.forward(&s.pooled)?;
                writeln!(out, "{}", format_output(&head, y.data()))?;
            }
            if dense > 0 {
                eprintln!(
                    "block multiplies {used} of {dense} dense ({:.2}% saved)",
                    100.0 * (1.0 - used as f64 / dense as f64)
                );
            }
        }
    }
    Ok(())
}
