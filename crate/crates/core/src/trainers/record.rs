use std::io::{Read, Write};

use crate::error::{Error, Result};

/// One training step. Checkpoint-only columns are `None` between checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRow {
    /// 1-based optimizer update index.
    pub step: usize,
    pub loss: f64,
    pub metric: Option<f64>,
    pub sparsity: Option<f64>,
    pub angular_distance: Option<f64>,
    pub l1_distance: Option<f64>,
}

/// Everything a training run reports.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<StepRow>,
    /// Optimizer updates performed.
    pub iterations: usize,
    /// Final evaluation values, one per mask sample (a single value for
    /// deterministic models). Undefined metric values are omitted.
    pub final_metric_samples: Vec<f64>,
    pub final_metric_mean: f64,
    pub final_metric_std: f64,
    /// Global sparsity of the returned mask, if any.
    pub final_sparsity: Option<f64>,
    /// Same, excluding the word embedding.
    pub final_sparsity_without_embedding: Option<f64>,
    /// Elapsed wall-clock seconds; never written to CSV so records stay
    /// byte-reproducible.
    pub wall_clock_secs: f64,
}

pub const RUN_RECORD_HEADER: [&str; 6] = [
    "step",
    "loss",
    "metric",
    "sparsity",
    "angular_distance",
    "l1_distance",
];

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_cell(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Malformed(format!("bad number `{s}` in run record")))
}

impl RunRecord {
    /// Rows carrying checkpoint values.
    pub fn checkpoints(&self) -> impl Iterator<Item = &StepRow> {
        self.rows.iter().filter(|r| r.metric.is_some() || r.angular_distance.is_some())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(RUN_RECORD_HEADER)?;
        for r in &self.rows {
            out.write_record([
                r.step.to_string(),
                r.loss.to_string(),
                cell(r.metric),
                cell(r.sparsity),
                cell(r.angular_distance),
                cell(r.l1_distance),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the per-step rows of a CSV written by [`RunRecord::write_csv`].
    pub fn read_csv<R: Read>(r: R) -> Result<Vec<StepRow>> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != RUN_RECORD_HEADER {
            return Err(Error::Malformed(format!("unexpected run-record header {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let step = rec[0]
                .parse()
                .map_err(|_| Error::Malformed(format!("bad step `{}`", &rec[0])))?;
            rows.push(StepRow {
                step,
                loss: parse_cell(&rec[1])?.unwrap_or(f64::NAN),
                metric: parse_cell(&rec[2])?,
                sparsity: parse_cell(&rec[3])?,
                angular_distance: parse_cell(&rec[4])?,
                l1_distance: parse_cell(&rec[5])?,
            });
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let rec = RunRecord {
            rows: vec![
                StepRow {
                    step: 1,
                    loss: 0.693,
                    metric: None,
                    sparsity: None,
                    angular_distance: None,
                    l1_distance: None,
                },
                StepRow {
                    step: 2,
                    loss: 0.5,
                    metric: Some(0.75),
                    sparsity: Some(0.1),
                    angular_distance: Some(0.01),
                    l1_distance: Some(3.5),
                },
            ],
            ..Default::default()
        };
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,loss,metric,sparsity,angular_distance,l1_distance\n1,0.693,,,,\n"));
        assert_eq!(RunRecord::read_csv(buf.as_slice()).unwrap(), rec.rows);
        assert_eq!(rec.checkpoints().count(), 1);
    }
}
