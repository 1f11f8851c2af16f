use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Reserved token ids; content tokens start at [`FIRST_CONTENT`].
pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const MASK: usize = 2;
pub const PAD: usize = 3;
pub const FIRST_CONTENT: usize = 4;

/// Generator of the synthetic language.
///
/// Content tokens are split into `num_classes` latent classes of equal size:
/// token `FIRST_CONTENT + c·K + i` is member `i` of class `c`. Classes follow
/// an order-2 Markov chain whose next-class distribution puts
/// `dominant_prob` on one class per context and spreads the rest uniformly.
/// Within a class the member index continues the previous token's index
/// shifted by a per-class offset with probability `follow_prob`, and is
/// uniform otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub num_classes: usize,
    /// Minimum sequence length including the leading CLS.
    pub min_len: usize,
    /// Maximum sequence length including the leading CLS.
    pub max_len: usize,
    pub dominant_prob: f64,
    pub follow_prob: f64,
    /// Seed of the chain's transition tables (independent of sampling).
    pub chain_seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            vocab_size: 64,
            num_classes: 6,
            min_len: 12,
            max_len: 16,
            dominant_prob: 0.8,
            follow_prob: 0.9,
            chain_seed: 2020,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.vocab_size <= FIRST_CONTENT {
            return Err(Error::Config("need at least two classes and some content tokens".into()));
        }
        let content = self.vocab_size - FIRST_CONTENT;
        if !content.is_multiple_of(self.num_classes) || content / self.num_classes < 4 {
            return Err(Error::Config(format!(
                "{content} content tokens do not split into {} classes of at least 4",
                self.num_classes
            )));
        }
        if self.min_len < 4 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        for (n, p) in [("dominant_prob", self.dominant_prob), ("follow_prob", self.follow_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{n} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn tokens_per_class(&self) -> usize {
        (self.vocab_size - FIRST_CONTENT) / self.num_classes
    }

    /// Latent class of a content token; `None` for reserved tokens.
    pub fn class_of(&self, token: usize) -> Option<usize> {
        (token >= FIRST_CONTENT && token < self.vocab_size)
            .then(|| (token - FIRST_CONTENT) / self.tokens_per_class())
    }

    pub fn member_of(&self, token: usize) -> Option<usize> {
        (token >= FIRST_CONTENT && token < self.vocab_size)
            .then(|| (token - FIRST_CONTENT) % self.tokens_per_class())
    }

    pub fn token(&self, class: usize, member: usize) -> usize {
        FIRST_CONTENT + class * self.tokens_per_class() + member
    }

    pub fn chain(&self) -> Result<MarkovChain> {
        self.validate()?;
        let c = self.num_classes;
        let k = self.tokens_per_class();
        let mut rng = RngStream::named(self.chain_seed, "corpus.chain");
        let mut transitions = vec![0.0; c * c * c];
        let mut dominant = vec![0; c * c];
        let rest = (1.0 - self.dominant_prob) / (c - 1) as f64;
        for ctx in 0..c * c {
            let d = rng.below(c);
            dominant[ctx] = d;
            for n in 0..c {
                transitions[ctx * c + n] = if n == d { self.dominant_prob } else { rest };
            }
        }
        let shifts = (0..c).map(|_| 1 + rng.below(k - 1)).collect();
        Ok(MarkovChain {
            spec: self.clone(),
            transitions,
            dominant,
            shifts,
        })
    }
}

/// Transition tables of a [`CorpusSpec`].
#[derive(Clone, Debug)]
pub struct MarkovChain {
    spec: CorpusSpec,
    transitions: Vec<f64>,
    dominant: Vec<usize>,
    shifts: Vec<usize>,
}

impl MarkovChain {
    pub fn spec(&self) -> &CorpusSpec {
        &self.spec
    }

    /// `P(class_t = next | class_{t-2} = a, class_{t-1} = b)`.
    pub fn class_prob(&self, a: usize, b: usize, next: usize) -> f64 {
        let c = self.spec.num_classes;
        self.transitions[(a * c + b) * c + next]
    }

    pub fn dominant(&self, a: usize, b: usize) -> usize {
        self.dominant[a * self.spec.num_classes + b]
    }

    pub fn shift(&self, class: usize) -> usize {
        self.shifts[class]
    }

    fn next_class(&self, a: usize, b: usize, rng: &mut RngStream) -> usize {
        let c = self.spec.num_classes;
        let row = &self.transitions[(a * c + b) * c..(a * c + b + 1) * c];
        rng.categorical(row)
    }

    fn next_member(&self, class: usize, prev_member: Option<usize>, rng: &mut RngStream) -> usize {
        let k = self.spec.tokens_per_class();
        match prev_member {
            Some(p) if rng.uniform() < self.spec.follow_prob => (p + self.shifts[class]) % k,
            _ => rng.below(k),
        }
    }

    /// `len` content tokens (no CLS).
    pub fn sample_content(&self, len: usize, rng: &mut RngStream) -> Vec<usize> {
        let c = self.spec.num_classes;
        let mut classes: Vec<usize> = Vec::with_capacity(len);
        let mut out = Vec::with_capacity(len);
        let mut prev_member = None;
        for t in 0..len {
            let class = if t < 2 {
                rng.below(c)
            } else {
                self.next_class(classes[t - 2], classes[t - 1], rng)
            };
            let m = self.next_member(class, prev_member, rng);
            classes.push(class);
            prev_member = Some(m);
            out.push(self.spec.token(class, m));
        }
        out
    }

    /// A full sequence: CLS followed by a length drawn uniformly from the
    /// corpus length range.
    pub fn sample_sequence(&self, rng: &mut RngStream) -> Vec<usize> {
        let span = self.spec.max_len - self.spec.min_len + 1;
        let len = self.spec.min_len + rng.below(span);
        let mut seq = vec![CLS];
        seq.extend(self.sample_content(len - 1, rng));
        seq
    }
}

/// Unlabelled token sequences for pre-training.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub sequences: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn num_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Frequency of the most common content token, the accuracy of always
    /// predicting it at a masked position.
    pub fn unigram_majority_rate(&self) -> f64 {
        let mut counts = vec![0usize; self.spec.vocab_size];
        let mut total = 0;
        for s in &self.sequences {
            for &t in s.iter().filter(|&&t| t >= FIRST_CONTENT) {
                counts[t] += 1;
                total += 1;
            }
        }
        counts.iter().copied().max().unwrap_or(0) as f64 / total.max(1) as f64
    }
}

/// `size` sequences sampled from the Markov chain of `spec`.
pub fn gen_corpus(spec: &CorpusSpec, size: usize, rng: &RngStream) -> Result<Corpus> {
    if size == 0 {
        return Err(Error::Config("corpus size must be positive".into()));
    }
    let chain = spec.chain()?;
    let mut r = rng.derive("corpus.sequences");
    let sequences = (0..size).map(|_| chain.sample_sequence(&mut r)).collect();
    Ok(Corpus {
        spec: spec.clone(),
        sequences,
    })
}
