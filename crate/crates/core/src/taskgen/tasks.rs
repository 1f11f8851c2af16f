use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use super::corpus::{CorpusSpec, MarkovChain, CLS, SEP};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskFamily {
    /// Label is the parity of the number of tokens of one latent class.
    Parity,
    /// Label is the presence of a three-token motif.
    Pattern,
    /// Two segments around SEP; label is whether they share a dialect.
    PairMatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Difficulty {
    Easy,
    Hard,
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskFamily::Parity => "parity",
            TaskFamily::Pattern => "pattern",
            TaskFamily::PairMatch => "pair-match",
        })
    }
}

impl FromStr for TaskFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parity" => Ok(TaskFamily::Parity),
            "pattern" => Ok(TaskFamily::Pattern),
            "pair-match" | "pairmatch" => Ok(TaskFamily::PairMatch),
            o => Err(Error::Config(format!("unknown task family `{o}`"))),
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        })
    }
}

impl FromStr for Difficulty {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            o => Err(Error::Config(format!("unknown difficulty `{o}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSizes {
    pub train: usize,
    pub eval: usize,
}

impl Default for TaskSizes {
    fn default() -> Self {
        TaskSizes {
            train: 2000,
            eval: 500,
        }
    }
}

/// A labelled binary classification task with disjoint splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub name: String,
    pub family: TaskFamily,
    pub difficulty: Difficulty,
    pub num_classes: usize,
    /// Human-readable description of the sampled task parameters.
    pub detail: String,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

impl Task {
    /// Most frequent training label.
    pub fn majority_label(&self) -> usize {
        let counts = label_counts(&self.train, self.num_classes);
        super::argmax_count(&counts)
    }

    /// Eval accuracy of always predicting the majority training label.
    pub fn majority_rate(&self) -> f64 {
        let m = self.majority_label();
        self.eval.iter().filter(|e| e.label == m).count() as f64 / self.eval.len().max(1) as f64
    }

    /// Largest deviation of any label frequency from `1/k`, over both splits.
    pub fn label_imbalance(&self) -> f64 {
        let k = self.num_classes as f64;
        [&self.train, &self.eval]
            .iter()
            .flat_map(|split| {
                let n = split.len().max(1) as f64;
                label_counts(split, self.num_classes)
                    .into_iter()
                    .map(move |c| (c as f64 / n - 1.0 / k).abs())
            })
            .fold(0.0, f64::max)
    }

    /// Number of eval token sequences that also occur in train.
    pub fn split_overlap(&self) -> usize {
        let train: HashSet<&Vec<usize>> = self.train.iter().map(|e| &e.tokens).collect();
        self.eval.iter().filter(|e| train.contains(&e.tokens)).count()
    }

    pub fn validate(&self, vocab_size: usize, max_seq_len: usize) -> Result<()> {
        for e in self.train.iter().chain(&self.eval) {
            if e.label >= self.num_classes {
                return Err(Error::OutOfRange(format!("label {} in {}", e.label, self.name)));
            }
            crate::encoder::validate_tokens(
                &crate::encoder::ModelConfig {
                    vocab_size,
                    max_seq_len,
                    ..Default::default()
                },
                &e.tokens,
            )?;
        }
        if self.train.is_empty() || self.eval.is_empty() {
            return Err(Error::Config(format!("task {} has an empty split", self.name)));
        }
        Ok(())
    }
}

fn label_counts(examples: &[Example], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for e in examples {
        c[e.label] += 1;
    }
    c
}

/// Rewrites every token for which `bad` holds into another member of the
/// same class for which it does not.
fn scrub(spec: &CorpusSpec, content: &mut [usize], bad: &dyn Fn(usize) -> bool) {
    let k = spec.tokens_per_class();
    for t in content.iter_mut() {
        if bad(*t) {
            let (c, m) = (spec.class_of(*t).unwrap(), spec.member_of(*t).unwrap());
            *t = (1..k)
                .map(|d| spec.token(c, (m + d) % k))
                .find(|&r| !bad(r))
                .expect("a class has members outside any three-token motif");
        }
    }
}

fn distinct_positions(n: usize, count: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.truncate(count);
    idx
}

struct Generator<'a> {
    spec: &'a CorpusSpec,
    chain: MarkovChain,
    family: TaskFamily,
    difficulty: Difficulty,
    motif: [usize; 3],
    class: usize,
}

impl Generator<'_> {
    fn content_len(&self, rng: &mut RngStream) -> usize {
        let span = self.spec.max_len - self.spec.min_len + 1;
        self.spec.min_len + rng.below(span) - 1
    }

    fn example(&self, label: usize, rng: &mut RngStream) -> Vec<usize> {
        let content = match self.family {
            TaskFamily::Pattern => self.pattern(label, rng),
            TaskFamily::Parity => self.parity(label, rng),
            TaskFamily::PairMatch => return self.pair_match(label, rng),
        };
        let mut seq = vec![CLS];
        seq.extend(content);
        seq
    }

    fn pattern(&self, label: usize, rng: &mut RngStream) -> Vec<usize> {
        let len = self.content_len(rng);
        let mut c = self.chain.sample_content(len, rng);
        let motif = self.motif;
        scrub(self.spec, &mut c, &|t| motif.contains(&t));
        match (self.difficulty, label) {
            (Difficulty::Easy, 0) => {}
            (_, 1) => {
                let p = rng.below(len - 2);
                c[p..p + 3].copy_from_slice(&motif);
            }
            _ => loop {
                // All three motif tokens, but never adjacent in motif order.
                let pos = distinct_positions(len, 3, rng);
                let mut order = [0usize, 1, 2];
                rng.shuffle(&mut order);
                let placed: Vec<(usize, usize)> =
                    order.iter().zip(&pos).map(|(&o, &p)| (p, motif[o])).collect();
                let mut sorted = placed.clone();
                sorted.sort();
                let in_order = sorted.iter().map(|x| x.1).eq(motif.iter().copied());
                let adjacent = sorted[1].0 == sorted[0].0 + 1 && sorted[2].0 == sorted[1].0 + 1;
                if in_order && adjacent {
                    continue;
                }
                for (p, t) in placed {
                    c[p] = t;
                }
                break;
            },
        }
        c
    }

    fn parity(&self, label: usize, rng: &mut RngStream) -> Vec<usize> {
        let len = self.content_len(rng);
        let mut c = self.chain.sample_content(len, rng);
        let spec = self.spec;
        let target = self.class;
        let other = (target + 1) % spec.num_classes;
        for t in c.iter_mut() {
            if spec.class_of(*t) == Some(target) {
                *t = spec.token(other, spec.member_of(*t).unwrap());
            }
        }
        let count = match (self.difficulty, label) {
            (Difficulty::Easy, l) => l,
            (Difficulty::Hard, 1) => 1,
            (Difficulty::Hard, _) => 2 * rng.below(2),
        };
        for p in distinct_positions(len, count, rng) {
            c[p] = spec.token(target, rng.below(spec.tokens_per_class()));
        }
        c
    }

    /// Segment in dialect `d`: member indices folded into the lower (d = 0)
    /// or upper (d = 1) half of each class.
    fn segment(&self, len: usize, dialect: usize, rng: &mut RngStream) -> Vec<usize> {
        let spec = self.spec;
        let half = spec.tokens_per_class() / 2;
        self.chain
            .sample_content(len, rng)
            .into_iter()
            .map(|t| {
                let m = spec.member_of(t).unwrap() % half + dialect * half;
                spec.token(spec.class_of(t).unwrap(), m)
            })
            .collect()
    }

    fn pair_match(&self, label: usize, rng: &mut RngStream) -> Vec<usize> {
        let seg = (self.spec.max_len - 2) / 2;
        let first = match self.difficulty {
            Difficulty::Easy => 0,
            Difficulty::Hard => rng.below(2),
        };
        let second = if label == 1 { first } else { 1 - first };
        let mut seq = vec![CLS];
        seq.extend(self.segment(seg, first, rng));
        seq.push(SEP);
        seq.extend(self.segment(seg, second, rng));
        seq
    }
}

/// Generates a balanced binary task over the language of `spec`. Both splits
/// contain exactly `size/2` examples per label (rounding the odd one to
/// label 0), and no token sequence appears twice anywhere.
pub fn gen_task(
    spec: &CorpusSpec,
    family: TaskFamily,
    difficulty: Difficulty,
    sizes: TaskSizes,
    rng: &RngStream,
) -> Result<Task> {
    let chain = spec.chain()?;
    if sizes.train < 2 || sizes.eval < 2 {
        return Err(Error::Config("each split needs at least two examples".into()));
    }
    let mut prng = rng.derive("task.params");
    let k = spec.tokens_per_class();
    let mut motif = [0usize; 3];
    let classes = distinct_positions(spec.num_classes, 3, &mut prng);
    for (slot, c) in motif.iter_mut().zip(classes) {
        *slot = spec.token(c, prng.below(k));
    }
    let class = prng.below(spec.num_classes);
    let detail = match family {
        TaskFamily::Pattern => format!("motif={}-{}-{}", motif[0], motif[1], motif[2]),
        TaskFamily::Parity => format!("class={class}"),
        TaskFamily::PairMatch => "dialects=lower/upper".to_string(),
    };
    let gen = Generator {
        spec,
        chain,
        family,
        difficulty,
        motif,
        class,
    };
    let mut seen = HashSet::new();
    let mut sample_split = |n: usize, label_rng: &str| -> Result<Vec<Example>> {
        let mut r = rng.derive(label_rng);
        let mut out = Vec::with_capacity(n);
        let quota = [n - n / 2, n / 2];
        for (label, &q) in quota.iter().enumerate() {
            let mut made = 0;
            let mut attempts = 0;
            while made < q {
                attempts += 1;
                if attempts > 100 * q + 1000 {
                    return Err(Error::Config(format!(
                        "could not draw {q} distinct examples for {family}/{difficulty}"
                    )));
                }
                let tokens = gen.example(label, &mut r);
                if seen.insert(tokens.clone()) {
                    out.push(Example { tokens, label });
                    made += 1;
                }
            }
        }
        r.shuffle(&mut out);
        Ok(out)
    };
    let train = sample_split(sizes.train, "task.train")?;
    let eval = sample_split(sizes.eval, "task.eval")?;
    Ok(Task {
        name: format!("{family}-{difficulty}"),
        family,
        difficulty,
        num_classes: 2,
        detail,
        train,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TaskSizes {
        TaskSizes {
            train: 400,
            eval: 100,
        }
    }

    #[test]
    fn all_families_balanced_and_disjoint() {
        let spec = CorpusSpec::default();
        for family in [TaskFamily::Parity, TaskFamily::Pattern, TaskFamily::PairMatch] {
            for diff in [Difficulty::Easy, Difficulty::Hard] {
                let t = gen_task(&spec, family, diff, small(), &RngStream::named(1, "t")).unwrap();
                assert_eq!(t.train.len(), 400);
                assert_eq!(t.eval.len(), 100);
                assert!(t.label_imbalance() <= 0.02, "{family}/{diff}");
                assert_eq!(t.split_overlap(), 0);
                t.validate(64, 16).unwrap();
            }
        }
    }

    #[test]
    fn pattern_semantics() {
        let spec = CorpusSpec::default();
        let t = gen_task(&spec, TaskFamily::Pattern, Difficulty::Hard, small(), &RngStream::named(2, "t")).unwrap();
        let motif: Vec<usize> = t.detail["motif=".len()..]
            .split('-')
            .map(|s| s.parse().unwrap())
            .collect();
        for e in t.train.iter().chain(&t.eval) {
            for m in &motif {
                assert_eq!(e.tokens.iter().filter(|&t| t == m).count(), 1);
            }
            let has = e.tokens.windows(3).any(|w| w == motif.as_slice());
            assert_eq!(has, e.label == 1);
        }
        let easy = gen_task(&spec, TaskFamily::Pattern, Difficulty::Easy, small(), &RngStream::named(2, "t")).unwrap();
        for e in &easy.train {
            let any = e.tokens.iter().any(|t| motif.contains(t));
            assert_eq!(any, e.label == 1);
        }
    }

    #[test]
    fn parity_semantics() {
        let spec = CorpusSpec::default();
        let t = gen_task(&spec, TaskFamily::Parity, Difficulty::Hard, small(), &RngStream::named(3, "t")).unwrap();
        let class: usize = t.detail["class=".len()..].parse().unwrap();
        let mut counts = [0usize; 3];
        for e in &t.train {
            let n = e.tokens.iter().filter(|&&x| spec.class_of(x) == Some(class)).count();
            assert_eq!(n % 2, e.label);
            counts[n] += 1;
        }
        assert!(counts.iter().all(|&c| c > 50));
    }

    #[test]
    fn deterministic() {
        let spec = CorpusSpec::default();
        let a = gen_task(&spec, TaskFamily::PairMatch, Difficulty::Hard, small(), &RngStream::named(4, "t")).unwrap();
        let b = gen_task(&spec, TaskFamily::PairMatch, Difficulty::Hard, small(), &RngStream::named(4, "t")).unwrap();
        assert_eq!(a, b);
        assert!(a.train.iter().all(|e| e.tokens.len() == 16 && e.tokens[8] == SEP));
    }
}
