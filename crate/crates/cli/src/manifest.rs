//! Run manifests: written next to every command's outputs, and sufficient
//! to replay the command bit-identically.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    /// Arguments after the program name, with the seed made explicit.
    pub args: Vec<String>,
    pub inputs: Vec<(String, PathBuf)>,
    pub outputs: Vec<PathBuf>,
    pub options: Vec<(String, String)>,
    pub elapsed_secs: f64,
}

impl Manifest {
    pub fn new(command: &str, args: &[String], seed: Option<u64>, config: Option<&Path>) -> Self {
        let mut args = args.to_vec();
        if let Some(s) = seed {
            if !args.iter().any(|a| a == "--seed" || a.starts_with("--seed=")) {
                args.push("--seed".into());
                args.push(s.to_string());
            }
        }
        Manifest {
            command: command.to_string(),
            seed,
            config: config.map(Path::to_path_buf),
            args,
            inputs: Vec::new(),
            outputs: Vec::new(),
            options: Vec::new(),
            elapsed_secs: 0.0,
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) {
        self.inputs.push((role.to_string(), path.to_path_buf()));
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# ftune run manifest\n");
        s += &format!("tool=ftune\nversion={}\ncommand={}\n", env!("CARGO_PKG_VERSION"), self.command);
        if let Some(seed) = self.seed {
            s += &format!("seed={seed}\n");
        }
        if let Some(c) = &self.config {
            s += &format!("config={}\n", c.display());
        }
        for a in &self.args {
            s += &format!("arg={a}\n");
        }
        for (role, p) in &self.inputs {
            s += &format!("input.{role}={}\n", p.display());
        }
        for p in &self.outputs {
            s += &format!("output={}\n", p.display());
        }
        for (k, v) in &self.options {
            s += &format!("option.{k}={v}\n");
        }
        s += &format!("elapsed_secs={:.3}\n", self.elapsed_secs);
        s
    }

    pub fn write(&mut self, dir: &Path, started: Instant) -> Result<()> {
        self.elapsed_secs = started.elapsed().as_secs_f64();
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.render()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::new("", &[], None, None);
        let mut tool = false;
        for (i, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("manifest line {}: expected key=value", i + 1))?;
            match k {
                "tool" => tool = v == "ftune",
                "version" => {}
                "command" => m.command = v.to_string(),
                "seed" => m.seed = Some(v.parse().context("manifest seed")?),
                "config" => m.config = Some(PathBuf::from(v)),
                "arg" => m.args.push(v.to_string()),
                "output" => m.outputs.push(PathBuf::from(v)),
                "elapsed_secs" => m.elapsed_secs = v.parse().unwrap_or(0.0),
                _ => {
                    if let Some(role) = k.strip_prefix("input.") {
                        m.inputs.push((role.to_string(), PathBuf::from(v)));
                    } else if let Some(key) = k.strip_prefix("option.") {
                        m.options.push((key.to_string(), v.to_string()));
                    } else {
                        bail!("manifest line {}: unknown key `{k}`", i + 1);
                    }
                }
            }
        }
        if !tool || m.command.is_empty() || m.args.is_empty() {
            bail!("not an ftune manifest");
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in manifest {}", path.display()))
    }

    /// Arguments for a replay, with the output directory replaced when
    /// `out` is given.
    pub fn replay_args(&self, out: Option<&Path>) -> Vec<String> {
        let mut args = self.args.clone();
        if let Some(out) = out {
            let out = out.display().to_string();
            if let Some(i) = args.iter().position(|a| a == "--out") {
                if i + 1 < args.len() {
                    args[i + 1] = out;
                }
            } else if let Some(i) = args.iter().position(|a| a.starts_with("--out=")) {
                args[i] = format!("--out={out}");
            } else {
                args.push("--out".into());
                args.push(out);
            }
        }
        args
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let args: Vec<String> = ["finetune", "--mode", "supermask", "--out", "a"].iter().map(|s| s.to_string()).collect();
        let mut m = Manifest::new("finetune", &args, Some(4), Some(Path::new("c.txt")));
        m.input("task", Path::new("t"));
        m.output(Path::new("a/record.csv"));
        m.options.push(("steps".into(), "10".into()));
        let back = Manifest::parse(&m.render()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.args.last().unwrap(), "4");
        let r = back.replay_args(Some(Path::new("b")));
        assert_eq!(r[4], "b");
        assert!(Manifest::parse("tool=other\ncommand=x\narg=x").is_err());
    }
}
