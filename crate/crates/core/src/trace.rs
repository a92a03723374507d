//! Per-iteration records of an optimizer run and their CSV form.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::problem::OracleClock;
use crate::{Error, Result, Vector};

pub const CSV_HEADER: &str =
    "t,grad_true,grad_est,grad_avg,m_norm,oracle_ul,oracle_ll,oracle_cross,oracle_gen,elapsed_s";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: u64,
    /// Norm of the ground-truth hypergradient at `x_t`, NaN when no ground truth exists.
    pub grad_true: f64,
    /// Norm of the estimate the method stepped along.
    pub grad_est: f64,
    /// Prefix mean of `grad_true`.
    pub grad_avg: f64,
    pub m_norm: f64,
    /// Cumulative oracle calls by family.
    pub oracles: OracleClock,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IterateTrace {
    pub rows: Vec<TraceRow>,
    pub x_final: Vector,
    pub y_final: Vector,
    /// `||y_t - y*(x_t)||` per row when the lower solution is known.
    pub lower_gap: Vec<f64>,
    /// `(x_t, y_t)` per row, kept only when the run asks for it.
    pub iterates: Vec<(Vector, Vector)>,
    pub events: Vec<TraceEvent>,
    pub diverged: bool,
    grad_sum: f64,
}

impl IterateTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a row, filling `grad_avg` as the running mean of `grad_true`.
    pub fn push(&mut self, mut row: TraceRow) {
        self.grad_sum += row.grad_true;
        row.grad_avg = self.grad_sum / (self.rows.len() + 1) as f64;
        self.rows.push(row);
    }

    pub fn event(&mut self, t: u64, message: impl Into<String>) {
        self.events.push(TraceEvent {
            t,
            message: message.into(),
        });
    }

    pub fn final_avg(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.grad_avg)
    }

    pub fn best_avg(&self) -> f64 {
        self.rows.iter().map(|r| r.grad_avg).fold(f64::NAN, f64::min)
    }

    pub fn oracle_totals(&self) -> OracleClock {
        self.rows.last().map_or_else(OracleClock::new, |r| r.oracles)
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        write_rows(&self.rows, out)
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is ASCII")
    }
}

pub fn write_rows<W: Write>(rows: &[TraceRow], out: &mut W) -> Result<()> {
    out.write_all(CSV_HEADER.as_bytes())?;
    out.write_all(b"\n")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{},{},{:.16e}",
            r.t,
            r.grad_true,
            r.grad_est,
            r.grad_avg,
            r.m_norm,
            r.oracles.upper,
            r.oracles.lower,
            r.oracles.cross,
            r.oracles.gen_jacobian,
            r.elapsed_s
        )?;
    }
    Ok(())
}

/// Parses a trace CSV produced by [`write_rows`].
pub fn read_rows<R: BufRead>(input: R) -> Result<Vec<TraceRow>> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim_end_matches('\r') != CSV_HEADER {
        return Err(Error::TraceParse {
            line: 1,
            message: format!("expected header `{CSV_HEADER}`"),
        });
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let lineno = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
        if fields.len() != 10 {
            return Err(Error::TraceParse {
                line: lineno,
                message: format!("expected 10 fields, found {}", fields.len()),
            });
        }
        let float = |i: usize| {
            fields[i].parse::<f64>().map_err(|e| Error::TraceParse {
                line: lineno,
                message: format!("field {}: {e}", i + 1),
            })
        };
        let int = |i: usize| {
            fields[i].parse::<u64>().map_err(|e| Error::TraceParse {
                line: lineno,
                message: format!("field {}: {e}", i + 1),
            })
        };
        rows.push(TraceRow {
            t: int(0)?,
            grad_true: float(1)?,
            grad_est: float(2)?,
            grad_avg: float(3)?,
            m_norm: float(4)?,
            oracles: OracleClock {
                upper: int(5)?,
                lower: int(6)?,
                cross: int(7)?,
                gen_jacobian: int(8)?,
            },
            elapsed_s: float(9)?,
        });
    }
    Ok(rows)
}
