use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{
    build_graph_with_classes, l1_normalize_features, largest_connected_component, GraphBundle,
};
use crate::nn::DenseMatrix;
use crate::scalar::Scalar;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Non-blank lines that are not `#` comments, with 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn parse_edges(text: &str, path: &Path) -> Result<Vec<(usize, usize)>> {
    content_lines(text)
        .map(|(line, l)| {
            let mut it = l.split_whitespace();
            let mut next = || -> Result<usize> {
                let tok = it
                    .next()
                    .ok_or_else(|| parse_err(path, line, "expected two node indices"))?;
                tok.parse()
                    .map_err(|_| parse_err(path, line, format!("bad node index {tok:?}")))
            };
            let pair = (next()?, next()?);
            if it.next().is_some() {
                return Err(parse_err(path, line, "expected exactly two node indices"));
            }
            Ok(pair)
        })
        .collect()
}

pub fn parse_features<T: Scalar>(text: &str, path: &Path) -> Result<DenseMatrix<T>> {
    let mut rows: Vec<Vec<T>> = Vec::new();
    for (line, l) in content_lines(text) {
        let row = l
            .split(',')
            .map(|tok| {
                let tok = tok.trim();
                tok.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .map(T::of)
                    .ok_or_else(|| parse_err(path, line, format!("bad feature value {tok:?}")))
            })
            .collect::<Result<Vec<T>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(parse_err(
                    path,
                    line,
                    format!("{} columns, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    DenseMatrix::from_rows(&rows)
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<usize>> {
    content_lines(text)
        .map(|(line, l)| {
            l.parse()
                .map_err(|_| parse_err(path, line, format!("bad label {l:?}")))
        })
        .collect()
}

/// Reads the three text files and applies the standard preprocessing:
/// largest connected component, then ℓ1 row normalization of the features.
///
/// Edges are whitespace-separated `i j` pairs, features are comma-separated
/// rows, labels one integer per line. Blank lines and `#` comments are
/// skipped in all three.
pub fn ingest_text<T: Scalar>(
    edges_path: &Path,
    features_path: &Path,
    labels_path: &Path,
) -> Result<GraphBundle<T>> {
    let edges = parse_edges(&read(edges_path)?, edges_path)?;
    let features = parse_features::<T>(&read(features_path)?, features_path)?;
    let labels = parse_labels(&read(labels_path)?, labels_path)?;
    if features.rows() != labels.len() {
        return Err(Error::CountMismatch(format!(
            "{} has {} rows but {} has {} labels",
            features_path.display(),
            features.rows(),
            labels_path.display(),
            labels.len()
        )));
    }
    let n = labels.len();
    if let Some(&(i, j)) = edges.iter().find(|&&(i, j)| i >= n || j >= n) {
        return Err(Error::CountMismatch(format!(
            "edge ({i}, {j}) in {} references a node beyond the {n} labelled nodes",
            edges_path.display()
        )));
    }
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let g = build_graph_with_classes(&edges, features, labels, n_classes)?;
    l1_normalize_features(&largest_connected_component(&g))
}
