use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::corpus::{Corpus, CorpusSpec};
use super::tasks::{Difficulty, Example, Task, TaskFamily};
use crate::error::{Error, Result};

fn parse_tokens(s: &str, line: usize) -> Result<Vec<usize>> {
    s.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Malformed(format!("line {line}: bad token id `{t}`")))
        })
        .collect()
}

fn join(tokens: &[usize]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

/// Writes `label<TAB>space-separated-token-ids` lines.
pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in examples {
        writeln!(w, "{}\t{}", e.label, join(&e.tokens))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_examples(path: &Path) -> Result<Vec<Example>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (label, toks) = line
            .split_once('\t')
            .ok_or_else(|| Error::Malformed(format!("line {}: missing TAB", i + 1)))?;
        let label = label
            .trim()
            .parse()
            .map_err(|_| Error::Malformed(format!("line {}: bad label `{label}`", i + 1)))?;
        out.push(Example {
            tokens: parse_tokens(toks, i + 1)?,
            label,
        });
    }
    Ok(out)
}

/// Token-id lines with no label; blank lines are skipped.
pub fn read_token_lines(path: &Path) -> Result<Vec<Vec<usize>>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(parse_tokens(&line, i + 1)?);
        }
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in &corpus.sequences {
        writeln!(w, "{}", join(s))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path, spec: &CorpusSpec) -> Result<Corpus> {
    let sequences = read_token_lines(path)?;
    if sequences.is_empty() {
        return Err(Error::Config(format!("corpus {} is empty", path.display())));
    }
    if let Some(t) = sequences.iter().flatten().find(|&&t| t >= spec.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id: *t,
            vocab: spec.vocab_size,
        });
    }
    Ok(Corpus {
        spec: spec.clone(),
        sequences,
    })
}

/// A task directory holds `train.tsv`, `eval.tsv` and `task.meta`
/// (`key=value` lines: name, family, difficulty, num_classes, detail).
pub fn write_task(dir: &Path, task: &Task) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_examples(&dir.join("train.tsv"), &task.train)?;
    write_examples(&dir.join("eval.tsv"), &task.eval)?;
    let meta = format!(
        "name={}\nfamily={}\ndifficulty={}\nnum_classes={}\ndetail={}\n",
        task.name, task.family, task.difficulty, task.num_classes, task.detail
    );
    fs::write(dir.join("task.meta"), meta)?;
    Ok(())
}

pub fn read_task(dir: &Path) -> Result<Task> {
    let meta = fs::read_to_string(dir.join("task.meta"))?;
    let get = |key: &str| -> Result<String> {
        meta.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .map(str::to_string)
            .ok_or_else(|| Error::Malformed(format!("task.meta lacks `{key}`")))
    };
    let family: TaskFamily = get("family")?.parse()?;
    let difficulty: Difficulty = get("difficulty")?.parse()?;
    let num_classes: usize = get("num_classes")?
        .parse()
        .map_err(|_| Error::Malformed("num_classes".into()))?;
    let task = Task {
        name: get("name")?,
        family,
        difficulty,
        num_classes,
        detail: get("detail").unwrap_or_default(),
        train: read_examples(&dir.join("train.tsv"))?,
        eval: read_examples(&dir.join("eval.tsv"))?,
    };
    if let Some(e) = task.train.iter().chain(&task.eval).find(|e| e.label >= num_classes) {
        return Err(Error::OutOfRange(format!("label {} with {num_classes} classes", e.label)));
    }
    Ok(task)
}
