//! Per-iteration training trace.
//!
//! One row per iteration. Scheduler columns hold the state after the row's losses were
//! observed, so the phase of row `τ + 1` is decided from the weights of row `τ`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scheduler::Phase;

pub const COLUMNS: [&str; 11] = [
    "tau", "phase", "l_id", "l_tp", "k_id", "k_tp", "p_id", "p_tp", "fl_id", "fl_tp", "lr",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub tau: u64,
    pub phase: Phase,
    pub l_id: f64,
    /// Absent when the triplet loss was not computed or had no valid anchor.
    pub l_tp: Option<f64>,
    pub k_id: f64,
    pub k_tp: f64,
    pub p_id: f64,
    pub p_tp: f64,
    pub fl_id: f64,
    pub fl_tp: f64,
    pub lr: f64,
}

impl TraceRow {
    fn fields(&self) -> [String; 11] {
        [
            self.tau.to_string(),
            self.phase.to_string(),
            self.l_id.to_string(),
            self.l_tp.map(|v| v.to_string()).unwrap_or_default(),
            self.k_id.to_string(),
            self.k_tp.to_string(),
            self.p_id.to_string(),
            self.p_tp.to_string(),
            self.fl_id.to_string(),
            self.fl_tp.to_string(),
            self.lr.to_string(),
        ]
    }
}

pub struct TraceWriter<W: Write> {
    inner: csv::Writer<W>,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("trace: {e}"))
}

impl<W: Write> TraceWriter<W> {
    pub fn new(writer: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(writer);
        inner.write_record(COLUMNS).map_err(csv_err)?;
        Ok(TraceWriter { inner })
    }

    pub fn write(&mut self, row: &TraceRow) -> Result<()> {
        self.inner.write_record(row.fields()).map_err(csv_err)
    }

    pub fn flush(&mut self) -> Result<()> {
        Ok(self.inner.flush()?)
    }
}

pub fn write_trace<W: Write>(writer: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = TraceWriter::new(writer)?;
    for r in rows {
        w.write(r)?;
    }
    w.flush()
}

pub fn trace_to_string(rows: &[TraceRow]) -> String {
    let mut out = Vec::new();
    write_trace(&mut out, rows).expect("writing to memory");
    String::from_utf8(out).expect("csv output is utf-8")
}

/// Parses a trace; errors name the 1-based line of the offending row.
pub fn read_trace<R: Read>(reader: R) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(COLUMNS) {
        return Err(Error::Format(format!("trace header must be `{}`", COLUMNS.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let bad = |col: &str| Error::Format(format!("trace row {line}: invalid `{col}`"));
        let rec = rec.map_err(|_| Error::Format(format!("trace row {line}: malformed record")))?;
        if rec.len() != COLUMNS.len() {
            return Err(Error::Format(format!("trace row {line}: expected {} fields", COLUMNS.len())));
        }
        let num = |c: usize| rec[c].parse::<f64>().map_err(|_| bad(COLUMNS[c]));
        rows.push(TraceRow {
            tau: rec[0].parse().map_err(|_| bad("tau"))?,
            phase: rec[1].parse().map_err(|_| bad("phase"))?,
            l_id: num(2)?,
            l_tp: if rec[3].is_empty() { None } else { Some(num(3)?) },
            k_id: num(4)?,
            k_tp: num(5)?,
            p_id: num(6)?,
            p_tp: num(7)?,
            fl_id: num(8)?,
            fl_tp: num(9)?,
            lr: num(10)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(tau: u64) -> TraceRow {
        TraceRow {
            tau,
            phase: if tau % 2 == 0 { Phase::Combined } else { Phase::IdOnly },
            l_id: 2.0 / 3.0,
            l_tp: (tau % 3 != 0).then_some(0.1 + tau as f64),
            k_id: 1.0,
            k_tp: 0.0,
            p_id: 1e-12,
            p_tp: 1.0,
            fl_id: 27.631021115928547,
            fl_tp: 0.0,
            lr: 0.01,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let rows: Vec<TraceRow> = (1..=7).map(row).collect();
        let text = trace_to_string(&rows);
        assert!(text.starts_with("tau,phase,l_id,l_tp,k_id,k_tp,p_id,p_tp,fl_id,fl_tp,lr\n"));
        assert_eq!(text.lines().count(), 8);
        assert_eq!(read_trace(text.as_bytes()).unwrap(), rows);
    }

    #[test]
    fn malformed_rows_are_located() {
        let mut text = trace_to_string(&[row(1), row(2)]);
        text.push_str("3,combined,abc,,1,1,1,1,0,0,0.01\n");
        let err = read_trace(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("row 4") && err.contains("l_id"), "{err}");
        assert!(read_trace("a,b\n".as_bytes()).is_err());
        assert!(read_trace("".as_bytes()).is_err());
    }
}
