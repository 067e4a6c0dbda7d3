//! CSV rows and aligned text tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const RUN_HEADER: &str = "experiment,method,task,seed,lr,step,loss,wall_ms,scale_min,scale_med,scale_max";

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub experiment: String,
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub lr: f64,
    pub step: usize,
    pub loss: f64,
    pub wall_ms: f64,
    pub scale_min: f64,
    pub scale_med: f64,
    pub scale_max: f64,
}

impl RunRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.experiment,
            self.method,
            self.task,
            self.seed,
            self.lr,
            self.step,
            self.loss,
            self.wall_ms,
            self.scale_min,
            self.scale_med,
            self.scale_max
        )
    }
}

/// `(experiment, method, task, seed, lr, step)` order.
pub fn sort_rows(rows: &mut [RunRow]) {
    rows.sort_by(|a, b| {
        a.experiment
            .cmp(&b.experiment)
            .then_with(|| a.method.cmp(&b.method))
            .then_with(|| a.task.cmp(&b.task))
            .then_with(|| a.seed.cmp(&b.seed))
            .then_with(|| a.lr.total_cmp(&b.lr))
            .then_with(|| a.step.cmp(&b.step))
    });
}

pub fn scale_summary(scales: &[f64]) -> (f64, f64, f64) {
    if scales.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mut v = scales.to_vec();
    v.sort_by(f64::total_cmp);
    (v[0], super::median(&v), v[v.len() - 1])
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

pub fn write_runs(dir: &Path, name: &str, mut rows: Vec<RunRow>) -> Result<PathBuf> {
    sort_rows(&mut rows);
    let mut s = String::with_capacity(rows.len() * 96 + RUN_HEADER.len() + 1);
    s.push_str(RUN_HEADER);
    s.push('\n');
    for r in &rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    write_file(dir, name, &s)
}

/// Plain CSV from a header and preformatted cells.
pub fn csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

/// Left-aligned columns separated by two spaces.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &mut dyn Iterator<Item = &str>| {
        let parts: Vec<String> = cells.zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &mut header.iter().copied());
    for r in rows {
        line(&mut out, &mut r.iter().map(String::as_str));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sort_by_key_order() {
        let row = |method: &str, seed, step| RunRow {
            experiment: "e".into(),
            method: method.into(),
            task: "t".into(),
            seed,
            lr: 0.1,
            step,
            loss: 1.0,
            wall_ms: 0.0,
            scale_min: 1.0,
            scale_med: 1.0,
            scale_max: 1.0,
        };
        let mut rows = vec![row("mezo", 2, 1), row("finetuner", 9, 2), row("mezo", 1, 3), row("finetuner", 9, 1)];
        sort_rows(&mut rows);
        let keys: Vec<_> = rows.iter().map(|r| (r.method.as_str(), r.seed, r.step)).collect();
        assert_eq!(keys, vec![("finetuner", 9, 1), ("finetuner", 9, 2), ("mezo", 1, 3), ("mezo", 2, 1)]);
    }

    #[test]
    fn table_aligns_columns() {
        let t = table(&["a", "bbb"], &[vec!["long".into(), "x".into()]]);
        assert_eq!(t, "a     bbb\nlong  x\n");
    }
}
