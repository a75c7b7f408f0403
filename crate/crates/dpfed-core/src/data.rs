//! Dataset ingestion: synthetic Gaussian blobs, labeled CSV files, and IDX
//! image/label files, plus the IID partition that hands each client a
//! disjoint shard.
//!
//! Every loader applies per-feature min-max normalization to [0, 1] over the
//! loaded subset (a constant feature maps to 0.0), then splits off the last
//! `val_n` examples as the held-out validation set.

use std::io::Read as _;
use std::path::{Path, PathBuf};

use crate::nn::Example;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Format { path: String, line: u64, reason: String },
    #[error("{path}: {reason}")]
    Idx { path: String, reason: String },
    #[error("label column {column:?} not found in header")]
    LabelColumn { column: String },
    #[error("dataset needs at least one training example: {n} loaded, {val_n} reserved for validation")]
    BadSplit { n: usize, val_n: usize },
    #[error("cannot partition {n} examples across {clients} clients")]
    BadPartition { n: usize, clients: usize },
    #[error("dataset is empty")]
    Empty,
}

/// Normalized examples split into a training set and a held-out validation
/// set. `n_classes` covers both splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub n_features: usize,
    pub n_classes: usize,
}

impl Dataset {
    fn from_examples(mut examples: Vec<Example>, val_n: usize) -> Result<Dataset, DataError> {
        let n = examples.len();
        if n == 0 {
            return Err(DataError::Empty);
        }
        if val_n >= n {
            return Err(DataError::BadSplit { n, val_n });
        }
        minmax_normalize(&mut examples);
        let n_features = examples[0].features.len();
        let n_classes = examples.iter().map(|e| e.label).max().unwrap() + 1;
        let val = examples.split_off(n - val_n);
        Ok(Dataset { train: examples, val, n_features, n_classes })
    }

    /// SHA-256 over the normalized features and labels, hex-encoded. Equal
    /// hashes mean two runs saw the same data in the same order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for split in [&self.train, &self.val] {
            h.update((split.len() as u64).to_le_bytes());
            for e in split {
                h.update((e.label as u64).to_le_bytes());
                for &v in &e.features {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

/// Rescales each feature to [0, 1] by its min and max over `examples`.
/// A feature with zero range becomes 0.0 everywhere.
pub fn minmax_normalize(examples: &mut [Example]) {
    if examples.is_empty() {
        return;
    }
    let d = examples[0].features.len();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for e in examples.iter() {
        for (j, &v) in e.features.iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    for e in examples.iter_mut() {
        for (j, v) in e.features.iter_mut().enumerate() {
            let range = hi[j] - lo[j];
            *v = if range > 0.0 { (*v - lo[j]) / range } else { 0.0 };
        }
    }
}

/// Gaussian class blobs: per-class centers drawn N(0, separation²) per
/// coordinate, unit-variance points around them, labels assigned round-robin
/// so classes stay balanced.
pub fn synthetic_blobs(
    classes: usize,
    dims: usize,
    n: usize,
    separation: f64,
    val_n: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Dataset, DataError> {
    assert!(classes >= 2 && dims >= 1);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dims).map(|_| separation * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let examples = (0..n)
        .map(|i| {
            let label = i % classes;
            let features = centers[label]
                .iter()
                .map(|&c| c + rng.sample::<f64, _>(StandardNormal))
                .collect();
            Example { features, label }
        })
        .collect();
    Dataset::from_examples(examples, val_n)
}

/// Loads a CSV with a header row; every column except `label_column` is a
/// feature parsed as f64, the label column must hold a non-negative integer.
pub fn from_csv(path: &Path, label_column: &str, val_n: usize) -> Result<Dataset, DataError> {
    let display = path.display().to_string();
    let io_err = |source| DataError::Io { path: display.clone(), source };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers().map_err(|e| csv_error(&display, e))?.clone();
    let label_ix = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| DataError::LabelColumn { column: label_column.to_string() })?;

    let mut examples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&display, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let mut features = Vec::with_capacity(record.len().saturating_sub(1));
        let mut label = None;
        for (ix, field) in record.iter().enumerate() {
            if ix == label_ix {
                let v = field.parse::<u64>().map_err(|_| DataError::Format {
                    path: display.clone(),
                    line,
                    reason: format!("label {field:?} is not a non-negative integer"),
                })?;
                label = Some(v as usize);
            } else {
                let v = field.parse::<f64>().map_err(|_| DataError::Format {
                    path: display.clone(),
                    line,
                    reason: format!("feature column {:?} holds non-numeric {field:?}", &headers[ix]),
                })?;
                features.push(v);
            }
        }
        examples.push(Example { features, label: label.expect("label column present") });
    }
    Dataset::from_examples(examples, val_n)
}

fn csv_error(path: &str, e: csv::Error) -> DataError {
    let line = match e.position() {
        Some(p) => p.line(),
        None => 0,
    };
    DataError::Format { path: path.to_string(), line, reason: e.to_string() }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Loads the first `subset_n` examples from an IDX image file and its
/// companion IDX label file (the standard big-endian magic-number layout).
pub fn from_idx(
    images_path: &Path,
    labels_path: &Path,
    subset_n: usize,
    val_n: usize,
) -> Result<Dataset, DataError> {
    let (images, _rows, _cols) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    let display = images_path.display().to_string();
    if images.len() != labels.len() {
        return Err(DataError::Idx {
            path: display,
            reason: format!("{} images but {} labels", images.len(), labels.len()),
        });
    }
    if subset_n == 0 || subset_n > images.len() {
        return Err(DataError::Idx {
            path: display,
            reason: format!("subset of {subset_n} requested from {} examples", images.len()),
        });
    }
    let examples = images
        .into_iter()
        .zip(labels)
        .take(subset_n)
        .map(|(img, label)| Example {
            features: img.iter().map(|&b| b as f64).collect(),
            label: label as usize,
        })
        .collect();
    Dataset::from_examples(examples, val_n)
}

fn read_exact_or_idx(
    reader: &mut impl std::io::Read,
    buf: &mut [u8],
    path: &str,
    what: &str,
) -> Result<(), DataError> {
    reader.read_exact(buf).map_err(|_| DataError::Idx {
        path: path.to_string(),
        reason: format!("truncated while reading {what}"),
    })
}

fn read_be_u32(reader: &mut impl std::io::Read, path: &str, what: &str) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    read_exact_or_idx(reader, &mut b, path, what)?;
    Ok(u32::from_be_bytes(b))
}

/// Parses an IDX image file into (images, rows, cols).
pub fn read_idx_images(path: &Path) -> Result<(Vec<Vec<u8>>, usize, usize), DataError> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path)
        .map_err(|source| DataError::Io { path: display.clone(), source })?;
    let mut reader = std::io::BufReader::new(file);
    let magic = read_be_u32(&mut reader, &display, "magic number")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Idx {
            path: display,
            reason: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = read_be_u32(&mut reader, &display, "image count")? as usize;
    let rows = read_be_u32(&mut reader, &display, "row count")? as usize;
    let cols = read_be_u32(&mut reader, &display, "column count")? as usize;
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let mut img = vec![0u8; rows * cols];
        read_exact_or_idx(&mut reader, &mut img, &display, &format!("image {i}"))?;
        images.push(img);
    }
    Ok((images, rows, cols))
}

/// Parses an IDX label file.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path)
        .map_err(|source| DataError::Io { path: display.clone(), source })?;
    let mut reader = std::io::BufReader::new(file);
    let magic = read_be_u32(&mut reader, &display, "magic number")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::Idx {
            path: display,
            reason: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = read_be_u32(&mut reader, &display, "label count")? as usize;
    let mut labels = vec![0u8; n];
    read_exact_or_idx(&mut reader, &mut labels, &display, "labels")?;
    let mut tail = Vec::new();
    reader
        .read_to_end(&mut tail)
        .map_err(|source| DataError::Io { path: display.clone(), source })?;
    if !tail.is_empty() {
        return Err(DataError::Idx {
            path: display,
            reason: format!("{} trailing bytes after {n} labels", tail.len()),
        });
    }
    Ok(labels)
}

/// Writes images in IDX format.
pub fn write_idx_images(
    path: &Path,
    images: &[Vec<u8>],
    rows: usize,
    cols: usize,
) -> Result<(), DataError> {
    let display = path.display().to_string();
    let mut bytes = Vec::with_capacity(16 + images.len() * rows * cols);
    bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        assert_eq!(img.len(), rows * cols, "image size must match declared dimensions");
        bytes.extend_from_slice(img);
    }
    std::fs::write(path, bytes).map_err(|source| DataError::Io { path: display, source })
}

/// Writes labels in IDX format.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<(), DataError> {
    let display = path.display().to_string();
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    std::fs::write(path, bytes).map_err(|source| DataError::Io { path: display, source })
}

/// 7x7 glyphs for the digits 0-9, the stencil behind [`synthetic_digit_images`].
const DIGIT_GLYPHS: [[&str; 7]; 10] = [
    [".#####.", "##...##", "##...##", "##...##", "##...##", "##...##", ".#####."],
    ["...##..", "..###..", "...##..", "...##..", "...##..", "...##..", "..####."],
    [".#####.", "##...##", ".....##", "....##.", "...##..", "..##...", "#######"],
    [".#####.", "##...##", ".....##", "..####.", ".....##", "##...##", ".#####."],
    ["....##.", "...###.", "..####.", ".##.##.", "#######", "....##.", "....##."],
    ["#######", "##.....", "######.", ".....##", ".....##", "##...##", ".#####."],
    [".#####.", "##.....", "######.", "##...##", "##...##", "##...##", ".#####."],
    ["#######", ".....##", "....##.", "...##..", "..##...", "..##...", "..##..."],
    [".#####.", "##...##", "##...##", ".#####.", "##...##", "##...##", ".#####."],
    [".#####.", "##...##", "##...##", ".######", ".....##", ".....##", ".#####."],
];

pub const DIGIT_IMAGE_SIDE: usize = 28;

/// Deterministic 28x28 grayscale digit corpus: each example upsamples one of
/// ten glyph stencils by 4x, shifts it by up to 2 pixels, and draws its ink
/// at a jittered intensity. Labels run round-robin 0..9. Serves as a
/// desk-scale stand-in for a handwritten-digit set, distributed through the
/// same IDX files and loader a real one would use.
pub fn synthetic_digit_images(n: usize, rng: &mut ChaCha12Rng) -> (Vec<Vec<u8>>, Vec<u8>) {
    let side = DIGIT_IMAGE_SIDE;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        let glyph = &DIGIT_GLYPHS[digit];
        let dy: i64 = rng.gen_range(-2..=2);
        let dx: i64 = rng.gen_range(-2..=2);
        let intensity: u8 = rng.gen_range(180..=255);
        let mut img = vec![0u8; side * side];
        for r in 0..side {
            for c in 0..side {
                let sr = r as i64 - dy;
                let sc = c as i64 - dx;
                if sr < 0 || sc < 0 || sr >= side as i64 || sc >= side as i64 {
                    continue;
                }
                let cell = glyph[sr as usize / 4].as_bytes()[sc as usize / 4];
                if cell == b'#' {
                    img[r * side + c] = intensity.saturating_sub(rng.gen_range(0..30));
                }
            }
        }
        images.push(img);
        labels.push(digit as u8);
    }
    (images, labels)
}

/// Writes a fresh digit corpus as an IDX image/label pair under `dir` and
/// returns the two paths.
pub fn write_digit_corpus(
    dir: &Path,
    n: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(PathBuf, PathBuf), DataError> {
    let (images, labels) = synthetic_digit_images(n, rng);
    let images_path = dir.join("digits-images-idx3-ubyte");
    let labels_path = dir.join("digits-labels-idx1-ubyte");
    write_idx_images(&images_path, &images, DIGIT_IMAGE_SIDE, DIGIT_IMAGE_SIDE)?;
    write_idx_labels(&labels_path, &labels)?;
    Ok((images_path, labels_path))
}

/// Shuffles 0..n and deals the indices into `clients` disjoint shards whose
/// sizes differ by at most one (the first n mod clients shards get the
/// extra example).
pub fn partition(
    n: usize,
    clients: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Vec<usize>>, DataError> {
    if clients == 0 || n < clients {
        return Err(DataError::BadPartition { n, clients });
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let base = n / clients;
    let extra = n % clients;
    let mut shards = Vec::with_capacity(clients);
    let mut cursor = 0;
    for c in 0..clients {
        let size = base + usize::from(c < extra);
        shards.push(order[cursor..cursor + size].to_vec());
        cursor += size;
    }
    Ok(shards)
}
