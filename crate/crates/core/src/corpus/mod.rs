//! Study datasets: JSON Lines loading and saving, the synthetic report task
//! and deterministic splitting.

mod synth;
mod vocab;

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{expand_template, synth_generate, synth_generate_with_labels, FindingSpec, Planted, SynthConfig};
pub use vocab::{Vocab, BOS, EOS, PAD, UNK};

/// Rows, columns and feature width of one image grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
}

impl GridShape {
    pub fn positions(&self) -> usize {
        self.rows * self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols * self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One feature grid stored row-major as `positions × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub shape: GridShape,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(shape: GridShape) -> Self {
        Grid {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.shape.cols + col) * self.shape.dim;
        &self.data[start..start + self.shape.dim]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.shape.cols + col) * self.shape.dim;
        &mut self.data[start..start + self.shape.dim]
    }

    fn to_nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.shape.rows)
            .map(|r| (0..self.shape.cols).map(|c| self.cell(r, c).to_vec()).collect())
            .collect()
    }

    fn from_nested(nested: &[Vec<Vec<f64>>], shape: GridShape) -> std::result::Result<Self, String> {
        if nested.len() != shape.rows {
            return Err(format!("expected {} grid rows, got {}", shape.rows, nested.len()));
        }
        let mut data = Vec::with_capacity(shape.len());
        for row in nested {
            if row.len() != shape.cols {
                return Err(format!("expected {} grid columns, got {}", shape.cols, row.len()));
            }
            for cell in row {
                if cell.len() != shape.dim {
                    return Err(format!("expected {}-dim cells, got {}", shape.dim, cell.len()));
                }
                data.extend_from_slice(cell);
            }
        }
        Ok(Grid { shape, data })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Study {
    pub id: String,
    pub images: Vec<Grid>,
    pub reference: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudySet {
    pub studies: Vec<Study>,
    pub vocab: Vocab,
    pub grid: GridShape,
    /// Images per study.
    pub k: usize,
}

impl StudySet {
    /// Builds a set and its vocabulary from the given studies.
    pub fn new(studies: Vec<Study>, grid: GridShape, k: usize) -> Self {
        let vocab = Vocab::from_texts(studies.iter().map(|s| s.reference.as_str()));
        StudySet {
            studies,
            vocab,
            grid,
            k,
        }
    }

    pub fn len(&self) -> usize {
        self.studies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.studies.is_empty()
    }

    /// Same vocabulary and shapes, different studies.
    pub fn with_studies(&self, studies: Vec<Study>) -> StudySet {
        StudySet {
            studies,
            vocab: self.vocab.clone(),
            grid: self.grid,
            k: self.k,
        }
    }

    pub fn ids(&self) -> Vec<&str> {
        self.studies.iter().map(|s| s.id.as_str()).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    findings: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    images: Option<Vec<Vec<Vec<Vec<f64>>>>>,
}

/// Reads a JSON Lines study file. Studies without images receive `k` zero
/// grids of shape `grid`; records with blank findings are skipped.
pub fn load_reports(path: &Path, grid: GridShape, k: usize) -> Result<StudySet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut studies = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.findings.trim().is_empty() {
            continue;
        }
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Validation(format!("duplicate study id {:?} on line {}", rec.id, i + 1)));
        }
        let images = match rec.images {
            None => vec![Grid::zeros(grid); k],
            Some(imgs) => {
                if imgs.len() != k {
                    return Err(parse_err(format!("expected {k} images, got {}", imgs.len())));
                }
                imgs.iter()
                    .map(|g| Grid::from_nested(g, grid))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(parse_err)?
            }
        };
        studies.push(Study {
            id: rec.id,
            images,
            reference: rec.findings,
        });
    }
    Ok(StudySet::new(studies, grid, k))
}

/// Writes a study set in the format read by [`load_reports`].
pub fn save_reports(set: &StudySet, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for s in &set.studies {
        let rec = Record {
            id: s.id.clone(),
            findings: s.reference.clone(),
            images: Some(s.images.iter().map(Grid::to_nested).collect()),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Partition sizes: `floor(n·f)` per part with the remainder added to the
/// first (training) part.
pub fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let parts = [a, b, c].iter().filter(|f| **f > 0.0).count();
    if n < parts {
        return Err(Error::Validation(format!("{n} studies cannot fill {parts} partitions")));
    }
    let floor = |f: f64| (n as f64 * f + 1e-9).floor() as usize;
    let (vb, vc) = (floor(b), floor(c));
    Ok((n - vb - vc, vb, vc))
}

/// Shuffles with `seed` and cuts into train/validation/test parts.
pub fn split_dataset(set: &StudySet, fractions: (f64, f64, f64), seed: u64) -> Result<(StudySet, StudySet, StudySet)> {
    let (na, nb, _) = split_sizes(set.len(), fractions)?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        set.with_studies(idx.iter().map(|&i| set.studies[i].clone()).collect())
    };
    Ok((
        pick(&order[..na]),
        pick(&order[na..na + nb]),
        pick(&order[na + nb..]),
    ))
}
