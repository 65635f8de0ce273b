//! Labeled datasets: IDX and CSV loaders, Gaussian blob generator,
//! minority-class subsampling and stratified splits.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, RandomSource};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Features, integer labels and group labels of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: DenseMatrix,
    labels: Vec<usize>,
    groups: Vec<usize>,
    classes: usize,
}

impl LabeledDataset {
    /// Groups default to the class labels.
    pub fn new(features: DenseMatrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let groups = labels.clone();
        Self::with_groups(features, labels, groups, classes)
    }

    pub fn with_groups(features: DenseMatrix, labels: Vec<usize>, groups: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                actual: labels.len(),
            });
        }
        if groups.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                actual: groups.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            groups,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            groups: indices.iter().map(|&i| self.groups[i]).collect(),
            classes: self.classes,
        }
    }

    /// Stratified split: within each class, a shuffled `round(test_fraction * count)`
    /// rows go to the test side. Both sides keep the original row order.
    pub fn split(&self, test_fraction: f64, rng: &mut RandomSource) -> Result<(Self, Self)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::invalid(
                "test_fraction",
                format!("must lie in (0, 1), got {test_fraction}"),
            ));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        let mut is_test = vec![false; self.len()];
        for mut members in by_class {
            rng.shuffle(&mut members);
            let take = (test_fraction * members.len() as f64).round() as usize;
            for &i in &members[..take] {
                is_test[i] = true;
            }
        }
        let (test, train): (Vec<usize>, Vec<usize>) = (0..self.len()).partition(|&i| is_test[i]);
        Ok((self.subset(&train), self.subset(&test)))
    }
}

/// Unsigned-byte IDX tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Idx {
                path: path.to_path_buf(),
                offset: 0,
                reason: format!("corrupt gzip stream ({e})"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an IDX file already in memory. `path` only labels errors.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    let err = |offset: usize, reason: String| Error::Idx {
        path: path.to_path_buf(),
        offset,
        reason,
    };
    let word = |offset: usize| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| err(offset, "truncated header".into()))
    };
    let magic = word(0)?;
    if magic >> 16 != 0 {
        return Err(err(0, format!("bad magic number {magic:#010x}")));
    }
    let kind = (magic >> 8) & 0xff;
    if kind != 0x08 {
        return Err(err(
            2,
            format!("unsupported element type {kind:#04x} (only unsigned bytes)"),
        ));
    }
    let ndims = (magic & 0xff) as usize;
    if ndims == 0 {
        return Err(err(3, "zero dimensions".into()));
    }
    let dims = (0..ndims)
        .map(|k| word(4 + 4 * k).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndims;
    let expected = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let expected = expected.ok_or_else(|| err(4, "dimension product overflows".into()))?;
    let available = bytes.len() - start;
    if available < expected {
        return Err(err(
            bytes.len(),
            format!("truncated payload: expected {expected} bytes, found {available}"),
        ));
    }
    if available > expected {
        return Err(err(
            start + expected,
            format!("{} trailing bytes", available - expected),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[start..].to_vec(),
    })
}

/// Reads an IDX file, gunzipping when the gzip magic is present.
pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&read_bytes(path)?, path)
}

pub fn encode_idx(array: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * array.dims.len() + array.data.len());
    out.extend_from_slice(&(0x0800u32 | array.dims.len() as u32).to_be_bytes());
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

/// Writes an uncompressed IDX file.
pub fn write_idx(path: &Path, array: &IdxArray) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_idx(array)).map_err(|e| Error::io(path, e))
}

/// Loads an image/label file pair. Pixels are scaled by 1/255 and
/// flattened; the class count is `max label + 1`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let img_bytes = read_bytes(images)?;
    let lab_bytes = read_bytes(labels)?;
    let img = parse_idx(&img_bytes, images)?;
    let lab = parse_idx(&lab_bytes, labels)?;
    if img.dims.len() != 3 {
        return Err(Error::Idx {
            path: images.to_path_buf(),
            offset: 0,
            reason: format!(
                "expected magic {IDX_IMAGES_MAGIC:#010x} (3-d images), found {}-d",
                img.dims.len()
            ),
        });
    }
    if lab.dims.len() != 1 {
        return Err(Error::Idx {
            path: labels.to_path_buf(),
            offset: 0,
            reason: format!(
                "expected magic {IDX_LABELS_MAGIC:#010x} (1-d labels), found {}-d",
                lab.dims.len()
            ),
        });
    }
    let n = img.dims[0];
    if lab.dims[0] != n {
        return Err(Error::Dataset(format!("{n} images but {} labels", lab.dims[0])));
    }
    let dim = img.dims[1] * img.dims[2];
    let features = img.data.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = lab.data.iter().map(|&b| usize::from(b)).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    LabeledDataset::new(DenseMatrix::new(n, dim, features)?, labels, classes)
}

/// Inverse of [`load_idx`] for square images: pixels are `round(255 v)`.
pub fn dataset_to_idx(d: &LabeledDataset) -> Result<(IdxArray, IdxArray)> {
    let dim = d.feature_dim();
    let side = (dim as f64).sqrt().round() as usize;
    if side * side != dim {
        return Err(Error::Dataset(format!("{dim} features do not form a square image")));
    }
    if d.labels.iter().any(|&y| y > 255) {
        return Err(Error::Dataset("labels above 255 cannot be stored as bytes".into()));
    }
    let data = d
        .features
        .as_slice()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok((
        IdxArray {
            dims: vec![d.len(), side, side],
            data,
        },
        IdxArray {
            dims: vec![d.len()],
            data: d.labels.iter().map(|&y| y as u8).collect(),
        },
    ))
}

/// A CSV dataset plus the original label value behind each dense label.
#[derive(Debug, Clone)]
pub struct CsvDataset {
    pub dataset: LabeledDataset,
    pub label_values: Vec<String>,
    pub feature_names: Vec<String>,
}

/// Loads a headed CSV. Every non-label column must be numeric. Label values
/// are sorted (numerically when they all parse) and mapped to `0..k`.
pub fn load_csv(path: &Path, label_column: &str) -> Result<CsvDataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Dataset(format!("{}: no column named `{label_column}`", path.display())))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            row,
            column: String::new(),
            reason: e.to_string(),
        })?;
        for (c, cell) in record.iter().enumerate() {
            if c == label_idx {
                raw_labels.push(cell.trim().to_string());
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| Error::Csv {
                path: path.to_path_buf(),
                row,
                column: headers.get(c).unwrap_or_default().to_string(),
                reason: format!("non-numeric value `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    path: path.to_path_buf(),
                    row,
                    column: headers[c].to_string(),
                    reason: format!("non-finite value `{cell}`"),
                });
            }
            features.push(v);
        }
    }

    let mut label_values: Vec<String> = raw_labels.clone();
    label_values.sort();
    label_values.dedup();
    let numeric: Option<Vec<f64>> = label_values.iter().map(|s| s.parse().ok()).collect();
    if let Some(nums) = numeric {
        let mut pairs: Vec<(f64, String)> = nums.into_iter().zip(label_values).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        label_values = pairs.into_iter().map(|(_, s)| s).collect();
    }
    let index: BTreeMap<&str, usize> = label_values.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let labels = raw_labels.iter().map(|s| index[s.as_str()]).collect();
    let n = raw_labels.len();
    let dataset = LabeledDataset::new(
        DenseMatrix::new(n, feature_names.len(), features)?,
        labels,
        label_values.len(),
    )?;
    Ok(CsvDataset {
        dataset,
        label_values,
        feature_names,
    })
}

/// Keeps each row of class `minority` independently with probability
/// `p = f r / (m (1 - f))` (`m` minority rows, `r` other rows), so that the
/// expected minority share of the result is about `fraction`. Other rows are
/// kept unchanged and in order.
pub fn make_unbalanced(
    d: &LabeledDataset,
    minority: usize,
    fraction: f64,
    rng: &mut RandomSource,
) -> Result<LabeledDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(
            "fraction",
            format!("must lie in (0, 1], got {fraction}"),
        ));
    }
    let m = d.labels.iter().filter(|&&y| y == minority).count();
    if m == 0 {
        return Err(Error::Dataset(format!("minority class {minority} is absent")));
    }
    if fraction == 1.0 {
        return Ok(d.clone());
    }
    let rest = d.len() - m;
    let keep = fraction * rest as f64 / (m as f64 * (1.0 - fraction));
    if rest == 0 || keep > 1.0 {
        return Err(Error::Dataset(format!(
            "minority share {:.4} is already below the target {fraction}",
            m as f64 / d.len() as f64
        )));
    }
    let kept: Vec<usize> = (0..d.len())
        .filter(|&i| d.labels[i] != minority || rng.bernoulli(keep))
        .collect();
    Ok(d.subset(&kept))
}

/// Isotropic unit-variance Gaussian blobs. Class `c` is centred at
/// `separation / sqrt(2) * e_c`, so every pair of class means is
/// `separation` apart. Rows are ordered by class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub dims: usize,
    pub counts: Vec<usize>,
    pub separation: f64,
}

pub fn make_synthetic(spec: &BlobSpec, rng: &mut RandomSource) -> Result<LabeledDataset> {
    let classes = spec.counts.len();
    if classes < 2 {
        return Err(Error::invalid("counts", "need at least two classes"));
    }
    if spec.counts.contains(&0) {
        return Err(Error::invalid("counts", "every class needs at least one sample"));
    }
    if spec.dims < classes {
        return Err(Error::invalid(
            "dims",
            format!("need at least as many dimensions as classes ({classes})"),
        ));
    }
    if !(spec.separation >= 0.0) || !spec.separation.is_finite() {
        return Err(Error::invalid(
            "separation",
            format!("must be finite and non-negative, got {}", spec.separation),
        ));
    }
    let offset = spec.separation / std::f64::consts::SQRT_2;
    let n: usize = spec.counts.iter().sum();
    let mut features = Vec::with_capacity(n * spec.dims);
    let mut labels = Vec::with_capacity(n);
    for (c, &count) in spec.counts.iter().enumerate() {
        for _ in 0..count {
            for j in 0..spec.dims {
                let mean = if j == c { offset } else { 0.0 };
                features.push(mean + rng.standard_normal());
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(DenseMatrix::new(n, spec.dims, features)?, labels, classes)
}
