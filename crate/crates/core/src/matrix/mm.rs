//! MatrixMarket reader and writer (`coordinate` and `array` layouts, real or integer fields).

use super::{DenseMatrix, SparseColMatrix};
use crate::error::{Error, Result};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub enum MmMatrix {
    Dense(DenseMatrix),
    Sparse(SparseColMatrix),
}

impl MmMatrix {
    pub fn to_dense(&self) -> DenseMatrix {
        match self {
            MmMatrix::Dense(d) => d.clone(),
            MmMatrix::Sparse(s) => s.to_dense(),
        }
    }

    pub fn to_sparse(&self) -> SparseColMatrix {
        match self {
            MmMatrix::Dense(d) => SparseColMatrix::from_dense(d),
            MmMatrix::Sparse(s) => s.clone(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            MmMatrix::Dense(d) => d.shape(),
            MmMatrix::Sparse(s) => (s.rows(), s.cols()),
        }
    }
}

fn perr<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        line,
        msg: msg.into(),
    })
}

pub fn read_matrix_market<R: BufRead>(reader: R) -> Result<MmMatrix> {
    let mut lines = reader.lines().enumerate();
    let (_, header) = match lines.next() {
        Some((n, l)) => (n, l?),
        None => return perr(1, "empty input"),
    };
    let h: Vec<String> = header.split_whitespace().map(|t| t.to_ascii_lowercase()).collect();
    if h.len() != 5 || h[0] != "%%matrixmarket" || h[1] != "matrix" {
        return perr(1, "missing %%MatrixMarket matrix header");
    }
    let coordinate = match h[2].as_str() {
        "coordinate" => true,
        "array" => false,
        other => return perr(1, format!("unsupported layout '{other}'")),
    };
    if h[3] != "real" && h[3] != "integer" {
        return perr(1, format!("unsupported field '{}'", h[3]));
    }
    let symmetric = match h[4].as_str() {
        "general" => false,
        "symmetric" => true,
        other => return perr(1, format!("unsupported symmetry '{other}'")),
    };

    let mut body = Vec::new();
    for (n, line) in lines {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        body.push((n + 1, t.to_string()));
    }
    let Some((size_line, size)) = body.first().cloned() else {
        return perr(1, "missing size line");
    };
    let dims: Vec<usize> = size
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .or_else(|_| perr(size_line, "malformed size line"))?;

    if coordinate {
        if dims.len() != 3 {
            return perr(size_line, "coordinate size line needs rows cols nnz");
        }
        let (rows, cols, nnz) = (dims[0], dims[1], dims[2]);
        if body.len() - 1 != nnz {
            return perr(size_line, format!("declared {nnz} entries, found {}", body.len() - 1));
        }
        let mut trip = Vec::with_capacity(nnz);
        for (ln, t) in &body[1..] {
            let f: Vec<&str> = t.split_whitespace().collect();
            if f.len() != 3 {
                return perr(*ln, "entry needs row col value");
            }
            let i: usize = f[0].parse().or_else(|_| perr(*ln, "bad row index"))?;
            let j: usize = f[1].parse().or_else(|_| perr(*ln, "bad column index"))?;
            let v: f64 = f[2].parse().or_else(|_| perr(*ln, "bad value"))?;
            if i == 0 || j == 0 || i > rows || j > cols {
                return perr(*ln, format!("index ({i}, {j}) out of range"));
            }
            if !v.is_finite() {
                return perr(*ln, "non-finite value");
            }
            trip.push((i - 1, j - 1, v));
            if symmetric && i != j {
                trip.push((j - 1, i - 1, v));
            }
        }
        Ok(MmMatrix::Sparse(SparseColMatrix::from_triplets(rows, cols, &trip)?))
    } else {
        if dims.len() != 2 {
            return perr(size_line, "array size line needs rows cols");
        }
        let (rows, cols) = (dims[0], dims[1]);
        let expected = if symmetric { rows * (rows + 1) / 2 } else { rows * cols };
        if body.len() - 1 != expected {
            return perr(size_line, format!("expected {expected} values, found {}", body.len() - 1));
        }
        let mut out = DenseMatrix::zeros(rows, cols);
        let mut it = body[1..].iter();
        for j in 0..cols {
            let start = if symmetric { j } else { 0 };
            for i in start..rows {
                let (ln, t) = it.next().expect("count checked");
                let v: f64 = t.parse().or_else(|_| perr(*ln, "bad value"))?;
                if !v.is_finite() {
                    return perr(*ln, "non-finite value");
                }
                out[(i, j)] = v;
                if symmetric {
                    out[(j, i)] = v;
                }
            }
        }
        Ok(MmMatrix::Dense(out))
    }
}

pub fn read_matrix_market_path(path: impl AsRef<Path>) -> Result<MmMatrix> {
    let f = std::fs::File::open(path)?;
    read_matrix_market(std::io::BufReader::new(f))
}

/// Writes the `array` layout (column-major) with 17 significant digits.
pub fn write_dense<W: Write>(mut w: W, a: &DenseMatrix) -> Result<()> {
    writeln!(w, "%%MatrixMarket matrix array real general")?;
    writeln!(w, "{} {}", a.rows(), a.cols())?;
    for j in 0..a.cols() {
        for i in 0..a.rows() {
            writeln!(w, "{:.16e}", a[(i, j)])?;
        }
    }
    Ok(())
}

/// Writes the `coordinate` layout with 1-based indices and 17 significant digits.
pub fn write_sparse<W: Write>(mut w: W, a: &SparseColMatrix) -> Result<()> {
    writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(w, "{} {} {}", a.rows(), a.cols(), a.nnz())?;
    for (i, j, v) in a.iter_entries() {
        writeln!(w, "{} {} {:.16e}", i + 1, j + 1, v)?;
    }
    Ok(())
}

pub fn write_path(path: impl AsRef<Path>, a: &MmMatrix) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    match a {
        MmMatrix::Dense(d) => write_dense(f, d),
        MmMatrix::Sparse(s) => write_sparse(f, s),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinate_round_trip() {
        let a = SparseColMatrix::from_triplets(3, 2, &[(0, 0, 1.5), (2, 1, -2.0)]).unwrap();
        let mut buf = Vec::new();
        write_sparse(&mut buf, &a).unwrap();
        let back = read_matrix_market(buf.as_slice()).unwrap();
        assert!(back.to_dense().bit_eq(&a.to_dense()));
    }

    #[test]
    fn array_round_trip() {
        let a = DenseMatrix::from_fn(2, 3, |i, j| i as f64 * 0.1 + j as f64);
        let mut buf = Vec::new();
        write_dense(&mut buf, &a).unwrap();
        assert!(read_matrix_market(buf.as_slice()).unwrap().to_dense().bit_eq(&a));
    }

    #[test]
    fn bad_header_reports_line_one() {
        let e = read_matrix_market("hello\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
    }
}
