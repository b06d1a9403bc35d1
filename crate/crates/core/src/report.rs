//! CSV formatting shared by the library writers and the command line.

use std::io::{self, Write};

/// 17 significant digits, round-trip exact; negative zero prints as zero.
pub fn fmt_float(x: f64) -> String {
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{x:.16e}")
}

/// `prefix_i_j` labels of the upper triangle, row-major, 1-based.
pub fn upper_labels(prefix: &str, n: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 1..=n {
        for j in i..=n {
            out.push(format!("{prefix}_{i}_{j}"));
        }
    }
    out
}

pub fn indexed_labels(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}

/// Upper triangle of a square matrix, row-major.
pub fn upper_values(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn write_header<W: Write>(w: &mut W, labels: &[String]) -> io::Result<()> {
    writeln!(w, "{}", labels.join(","))
}

pub fn write_row<W: Write>(w: &mut W, values: &[f64]) -> io::Result<()> {
    let cells: Vec<String> = values.iter().map(|v| fmt_float(*v)).collect();
    writeln!(w, "{}", cells.join(","))
}
