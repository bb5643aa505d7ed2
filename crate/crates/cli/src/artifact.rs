//! In-memory experiment outputs, before they are written and hashed.

use serde::{Deserialize, Serialize};

/// How one CSV file feeds a long-form plot table: rows become
/// `(series, x, y, seed)` with `x` and `y` read from the named columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlotMap {
    pub artifact: String,
    pub series: String,
    /// When set, the value of this column is appended to the series name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub x: String,
    pub y: String,
}

impl PlotMap {
    pub fn new(artifact: &str, series: &str, x: &str, y: &str) -> Self {
        Self { artifact: artifact.into(), series: series.into(), group: None, x: x.into(), y: y.into() }
    }

    pub fn grouped(mut self, column: &str) -> Self {
        self.group = Some(column.into());
        self
    }
}

#[derive(Clone, Debug)]
pub struct Artifact {
    /// File name relative to the seed directory.
    pub name: String,
    pub bytes: Vec<u8>,
    pub plots: Vec<PlotMap>,
}

/// Everything one seed of an experiment produces.
#[derive(Clone, Debug)]
pub struct SeedOutput {
    pub artifacts: Vec<Artifact>,
    pub summary: serde_json::Value,
}

/// A CSV document built row by row.
pub struct Table {
    cols: usize,
    text: String,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { cols: header.len(), text: format!("{}\n", header.join(",")) }
    }

    pub fn row<I: IntoIterator<Item = String>>(&mut self, cells: I) {
        let cells: Vec<String> = cells.into_iter().collect();
        assert_eq!(cells.len(), self.cols, "row width does not match the header");
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn finish(self, name: impl Into<String>, plots: Vec<PlotMap>) -> Artifact {
        Artifact { name: name.into(), bytes: self.text.into_bytes(), plots }
    }
}

/// Shortest round-trip decimal form; non-finite values stay readable.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// One row per particle: `z0,z1,…`.
pub fn points_table(points: &ctflow::numerics::Mat) -> Table {
    let header: Vec<String> = (0..points.cols()).map(|j| format!("z{j}")).collect();
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut t = Table::new(&refs);
    for r in points.iter_rows() {
        t.row(r.iter().map(|v| num(*v)));
    }
    t
}
