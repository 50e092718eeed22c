//! Matrix Market coordinate-format reader.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use super::{CsrMatrix, SparseError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Symmetry {
    General,
    Symmetric,
}

/// Reads a real coordinate Matrix Market file.
///
/// Symmetric storage is expanded to the full pattern.
pub fn load_matrix_market(path: impl AsRef<Path>) -> Result<CsrMatrix, SparseError> {
    let file = std::fs::File::open(path.as_ref())?;
    read_matrix_market(file)
}

pub fn read_matrix_market<R: Read>(reader: R) -> Result<CsrMatrix, SparseError> {
    let reader = BufReader::new(reader);
    let mut lines = reader.lines().enumerate();

    let (lineno, header) = match lines.next() {
        Some((i, line)) => (i + 1, line?),
        None => return Err(parse_err(1, "empty file")),
    };
    let symmetry = parse_header(lineno, &header)?;

    let mut size: Option<(usize, usize, usize)> = None;
    let mut triplets = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        match size {
            None => {
                if fields.len() != 3 {
                    return Err(parse_err(lineno, "size line needs rows, cols, nnz"));
                }
                let rows = parse_usize(lineno, fields[0])?;
                let cols = parse_usize(lineno, fields[1])?;
                let nnz = parse_usize(lineno, fields[2])?;
                if rows != cols {
                    return Err(SparseError::NotSquare { rows, cols });
                }
                size = Some((rows, cols, nnz));
                triplets.reserve(if symmetry == Symmetry::Symmetric { 2 * nnz } else { nnz });
            }
            Some((n, _, _)) => {
                if fields.len() != 3 {
                    return Err(parse_err(lineno, "entry needs row, col, value"));
                }
                let r = parse_usize(lineno, fields[0])?;
                let c = parse_usize(lineno, fields[1])?;
                let v: f64 = fields[2]
                    .parse()
                    .map_err(|_| parse_err(lineno, &format!("bad value '{}'", fields[2])))?;
                if r == 0 || c == 0 || r > n || c > n {
                    return Err(parse_err(
                        lineno,
                        &format!("index ({r}, {c}) outside {n}x{n}"),
                    ));
                }
                triplets.push((r - 1, c - 1, v));
                if symmetry == Symmetry::Symmetric && r != c {
                    triplets.push((c - 1, r - 1, v));
                }
            }
        }
    }
    let (n, _, nnz) = size.ok_or_else(|| parse_err(lineno + 1, "missing size line"))?;
    let stored = triplets
        .iter()
        .filter(|(r, c, _)| symmetry == Symmetry::General || r >= c)
        .count();
    if stored != nnz {
        return Err(parse_err(
            0,
            &format!("header announces {nnz} entries, found {stored}"),
        ));
    }
    CsrMatrix::from_triplets(n, &triplets)
}

fn parse_header(lineno: usize, header: &str) -> Result<Symmetry, SparseError> {
    let tokens: Vec<String> = header.split_whitespace().map(str::to_lowercase).collect();
    if tokens.len() != 5 || tokens[0] != "%%matrixmarket" {
        return Err(parse_err(lineno, "missing %%MatrixMarket banner"));
    }
    if tokens[1] != "matrix" || tokens[2] != "coordinate" {
        return Err(parse_err(lineno, "only 'matrix coordinate' is supported"));
    }
    if tokens[3] != "real" {
        return Err(SparseError::UnsupportedField(tokens[3].clone()));
    }
    match tokens[4].as_str() {
        "general" => Ok(Symmetry::General),
        "symmetric" => Ok(Symmetry::Symmetric),
        other => Err(parse_err(lineno, &format!("unsupported symmetry '{other}'"))),
    }
}

fn parse_usize(lineno: usize, s: &str) -> Result<usize, SparseError> {
    s.parse()
        .map_err(|_| parse_err(lineno, &format!("bad integer '{s}'")))
}

fn parse_err(line: usize, msg: &str) -> SparseError {
    SparseError::Parse {
        line,
        message: msg.to_string(),
    }
}
