use nalgebra::{DMatrix, DVector};

/// Parses `"a,b;c,d"` (rows separated by `;`). A single number is expanded
/// to a multiple of the identity of size `n` when `n` is given.
pub fn matrix(text: &str, square: Option<usize>) -> Result<DMatrix<f64>, String> {
    let rows: Vec<Vec<f64>> = text
        .split(';')
        .map(|row| {
            row.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{}`: {e}", v.trim())))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    if let (Some(n), [only]) = (square, rows.as_slice()) {
        if only.len() == 1 && n > 1 {
            return Ok(DMatrix::identity(n, n) * only[0]);
        }
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(format!("rows of `{text}` have different lengths"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(format!("`{text}` has non-finite entries"));
    }
    let m = DMatrix::from_row_slice(flat.len() / cols, cols, &flat);
    if let Some(n) = square {
        if m.shape() != (n, n) {
            return Err(format!("expected a {n}x{n} matrix, got {}x{}", m.nrows(), m.ncols()));
        }
    }
    Ok(m)
}

pub fn vector(text: &str, n: usize) -> Result<DVector<f64>, String> {
    let v: Vec<f64> = text
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{}`: {e}", v.trim())))
        .collect::<Result<_, _>>()?;
    if v.len() != n {
        return Err(format!("expected {n} entries, got {}", v.len()));
    }
    Ok(DVector::from_vec(v))
}

pub fn list(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{}`: {e}", v.trim())))
        .collect()
}
