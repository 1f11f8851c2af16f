//! Synthetic pre-training language, downstream classification tasks with
//! controllable difficulty, evaluation metrics and task-validity probes.

mod corpus;
mod io;
mod metrics;
mod probe;
mod tasks;

pub use corpus::{gen_corpus, Corpus, CorpusSpec, MarkovChain, CLS, FIRST_CONTENT, MASK, PAD, SEP};
pub use io::{
    read_corpus, read_examples, read_task, read_token_lines, write_corpus, write_examples,
    write_task,
};
pub use metrics::{evaluate, Confusion, Metric, MetricValue};
pub use probe::{
    bag_of_tokens, bag_of_tokens_baseline, certify_task, linear_probe, pooled_features,
    LogisticRegression, ProbeResult, TaskCertificate, PROBE_RIDGE,
};
pub use tasks::{gen_task, Difficulty, Example, Task, TaskFamily, TaskSizes};

/// Index of the largest count, lowest index on ties.
pub(crate) fn argmax_count(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}
