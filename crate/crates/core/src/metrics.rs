//! Metrics CSV: one header line, then one row per evaluation.

use std::io::Write;

use crate::error::{QvpoError, Result};

pub const HEADER: &str = "step,episodes,eval_return_mean,eval_return_std,policy_loss,critic_loss,\
mean_positive_weight,zero_weight_fraction,coverage_peak1,coverage_peak2,coverage_peak3";

const COLUMNS: usize = 11;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub episodes: usize,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub policy_loss: f64,
    pub critic_loss: f64,
    pub mean_positive_weight: f64,
    pub zero_weight_fraction: f64,
    /// Per-peak coverage; only the bandit fills these columns.
    pub coverage: Option<[f64; 3]>,
}

/// `%.9g`-style rendering: nine significant digits, trailing zeros trimmed.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exponent) = sci.split_once('e').expect("scientific format");
    let exponent: i32 = exponent.parse().expect("integer exponent");
    if (-5..9).contains(&exponent) {
        let decimals = (8 - exponent).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exponent}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let coverage = match self.coverage {
            Some(c) => c.iter().map(|v| fmt_sig9(*v)).collect::<Vec<_>>(),
            None => vec![String::new(); 3],
        };
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.episodes,
            fmt_sig9(self.eval_return_mean),
            fmt_sig9(self.eval_return_std),
            fmt_sig9(self.policy_loss),
            fmt_sig9(self.critic_loss),
            fmt_sig9(self.mean_positive_weight),
            fmt_sig9(self.zero_weight_fraction),
            coverage.join(",")
        )
    }
}

/// Appends rows to a CSV file, flushing after each so a crash keeps every
/// completed row.
pub struct MetricsWriter<W: Write> {
    sink: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut sink: W) -> Result<Self> {
        writeln!(sink, "{HEADER}")?;
        sink.flush()?;
        Ok(MetricsWriter { sink })
    }

    pub fn write_row(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.sink, "{}", row.to_csv())?;
        self.sink.flush()?;
        Ok(())
    }
}

/// Parses a metrics file. Line numbers in errors are 1-based and count the header.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == HEADER => {}
        Some((_, h)) => {
            return Err(QvpoError::Parse {
                line: 1,
                message: format!("unexpected header `{h}`"),
            })
        }
        None => {
            return Err(QvpoError::Parse {
                line: 1,
                message: "empty metrics file".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let n = idx + 1;
        let bad = |message: String| QvpoError::Parse { line: n, message };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != COLUMNS {
            return Err(bad(format!("expected {COLUMNS} fields, found {}", fields.len())));
        }
        let int = |i: usize| -> Result<usize> {
            fields[i]
                .parse()
                .map_err(|_| bad(format!("field {} is not an integer: `{}`", i + 1, fields[i])))
        };
        let real = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| bad(format!("field {} is not a number: `{}`", i + 1, fields[i])))
        };
        let coverage = if fields[8..].iter().all(|f| f.is_empty()) {
            None
        } else {
            Some([real(8)?, real(9)?, real(10)?])
        };
        rows.push(MetricsRow {
            step: int(0)?,
            episodes: int(1)?,
            eval_return_mean: real(2)?,
            eval_return_std: real(3)?,
            policy_loss: real(4)?,
            critic_loss: real(5)?,
            mean_positive_weight: real(6)?,
            zero_weight_fraction: real(7)?,
            coverage,
        });
    }
    Ok(rows)
}
