//! Result tables and plain tour files.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::Tour;

/// One row of a results CSV (`instance,n,method,length,gap_pct,seconds`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub instance: String,
    pub n: usize,
    pub method: String,
    pub length: f64,
    pub gap_pct: Option<f64>,
    pub seconds: f64,
}

/// `(length − optimum) / optimum · 100`.
pub fn gap_pct(length: f64, optimum: f64) -> f64 {
    (length - optimum) / optimum * 100.0
}

pub fn write_results<W: Write>(out: W, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::format(None, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<results>", e))
}

pub fn read_results(text: &str) -> Result<Vec<ResultRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::format(Some(i), e.to_string())))
        .collect()
}

/// `instance,optimum` table, e.g. for TSPLIB benchmarks.
pub fn read_optima(text: &str) -> Result<Vec<(String, f64)>> {
    #[derive(Deserialize)]
    struct Row {
        instance: String,
        optimum: f64,
    }
    csv::Reader::from_reader(text.as_bytes())
        .deserialize::<Row>()
        .enumerate()
        .map(|(i, r)| r.map(|r| (r.instance, r.optimum)).map_err(|e| Error::format(Some(i), e.to_string())))
        .collect()
}

/// Tour file: `length=<float>` on the first line, then the 0-based order
/// on one line, space-separated.
pub fn format_tour_file(tour: &Tour, length: f64) -> String {
    let order: Vec<String> = tour.order.iter().map(usize::to_string).collect();
    format!("length={length:?}\n{}\n", order.join(" "))
}

pub fn parse_tour_file(text: &str) -> Result<(Tour, f64)> {
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| Error::format(None, "empty tour file"))?;
    let length: f64 = head
        .strip_prefix("length=")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::format(None, "first line must be `length=<float>`"))?;
    let order = lines
        .flat_map(str::split_whitespace)
        .enumerate()
        .map(|(i, t)| t.parse().map_err(|_| Error::format(Some(i), format!("bad node `{t}`"))))
        .collect::<Result<Vec<usize>>>()?;
    Ok((Tour::new(order), length))
}
