use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Accuracy,
    /// F1 of the positive class (label 1).
    F1,
    /// Matthews correlation coefficient of the 2×2 confusion matrix.
    Matthews,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Accuracy => "accuracy",
            Metric::F1 => "f1",
            Metric::Matthews => "matthews",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" | "acc" => Ok(Metric::Accuracy),
            "f1" => Ok(Metric::F1),
            "matthews" | "mcc" => Ok(Metric::Matthews),
            o => Err(Error::Config(format!("unknown metric `{o}`"))),
        }
    }
}

/// A metric value; `value` is `None` when the metric is undefined (a zero
/// denominator), which is never silently reported as 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValue {
    pub metric: Metric,
    pub value: Option<f64>,
}

impl MetricValue {
    pub fn is_defined(&self) -> bool {
        self.value.is_some()
    }

    /// The value with undefined cases mapped to 0, for callers that opt in.
    pub fn or_zero(&self) -> f64 {
        self.value.unwrap_or(0.0)
    }

    /// CSV cell text: the value, or an empty cell when undefined.
    pub fn csv_cell(&self) -> String {
        self.value.map(|v| v.to_string()).unwrap_or_default()
    }
}

/// Binary confusion counts with label 1 as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(predictions: &[usize], labels: &[usize]) -> Result<Self> {
        check_lengths(predictions, labels)?;
        let mut c = Confusion::default();
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p, l) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 0) => c.tn += 1,
                (0, 1) => c.fn_ += 1,
                _ => {
                    return Err(Error::OutOfRange(format!(
                        "binary metric given prediction {p} / label {l}"
                    )))
                }
            }
        }
        Ok(c)
    }

    pub fn f1(&self) -> Option<f64> {
        let denom = 2 * self.tp + self.fp + self.fn_;
        (denom > 0).then(|| 2.0 * self.tp as f64 / denom as f64)
    }

    pub fn matthews(&self) -> Option<f64> {
        let (tp, fp, tn, fn_) = (self.tp as f64, self.fp as f64, self.tn as f64, self.fn_ as f64);
        let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
        (denom > 0.0).then(|| (tp * tn - fp * fn_) / denom)
    }
}

fn check_lengths(predictions: &[usize], labels: &[usize]) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("evaluate", &[predictions.len()], &[labels.len()]));
    }
    if labels.is_empty() {
        return Err(Error::Config("cannot evaluate an empty prediction set".into()));
    }
    Ok(())
}

pub fn evaluate(predictions: &[usize], labels: &[usize], metric: Metric) -> Result<MetricValue> {
    let value = match metric {
        Metric::Accuracy => {
            check_lengths(predictions, labels)?;
            let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
            Some(hits as f64 / labels.len() as f64)
        }
        Metric::F1 => Confusion::from_predictions(predictions, labels)?.f1(),
        Metric::Matthews => Confusion::from_predictions(predictions, labels)?.matthews(),
    };
    Ok(MetricValue { metric, value })
}
