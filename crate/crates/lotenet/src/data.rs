//! Dataset loading, synthesis, and split management.
//!
//! Two on-disk formats: the big-endian IDX format (MNIST-style u8 images
//! plus labels) and the native LTNT container, which also handles 3D volumes
//! and float data. Every loader emits intensities in `[0, 1]` and validates
//! that on the way in.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Real;
use crate::tensor::{Tensor, TensorError};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const LTNT_MAGIC: &[u8; 4] = b"LTNT";
const LTNT_VERSION: u8 = 1;
const LTNT_DTYPE_F32: u8 = 1;
const NOISE_AMPLITUDE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:#010x}, got {got:#010x}")]
    Magic { expected: u32, got: u32 },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("file truncated: expected {expected} more bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("unsupported container version {got} (expected {LTNT_VERSION})")]
    Version { got: u8 },
    #[error("intensity {value} outside [0, 1] after load")]
    IntensityRange { value: f64 },
    #[error("split fractions {fractions:?} must be positive and sum to 1")]
    Fractions { fractions: Vec<f64> },
    #[error("split {split} would receive no samples of class {class}")]
    EmptySplitClass { split: usize, class: usize },
    #[error("synthetic datasets need at least 2 samples; got {got}")]
    CountTooSmall { got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Labeled image collection. `images` is `(count, spatial..., C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub class_names: Vec<String>,
    pub provenance: String,
}

/// Synthetic dataset families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Gaussian bump in the upper-left (class 0) or lower-right (class 1)
    /// quadrant of a 2D image.
    Blobs2d,
    /// Checkerboard whose phase encodes the class.
    Texture2d,
    /// Gaussian ball in opposite octants of a volume.
    Blobs3d,
}

impl SyntheticKind {
    pub fn spatial_rank(&self) -> usize {
        match self {
            SyntheticKind::Blobs2d | SyntheticKind::Texture2d => 2,
            SyntheticKind::Blobs3d => 3,
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SyntheticKind::Blobs2d => "blobs2d",
            SyntheticKind::Texture2d => "texture2d",
            SyntheticKind::Blobs3d => "blobs3d",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for SyntheticKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blobs2d" => Ok(SyntheticKind::Blobs2d),
            "texture2d" => Ok(SyntheticKind::Texture2d),
            "blobs3d" => Ok(SyntheticKind::Blobs3d),
            other => Err(DataError::Format(format!("unknown synthetic kind {other:?}"))),
        }
    }
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample: spatial extents plus channel count.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn image(&self, index: usize) -> Result<Tensor<T>, DataError> {
        Ok(self.images.select(0, index)?)
    }

    /// Gathers a subset by dataset indices, preserving the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset<T>, DataError> {
        if indices.is_empty() {
            return Err(DataError::Format("empty subset".into()));
        }
        let row: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * row..(i + 1) * row]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok(Dataset {
            images: Tensor::from_vec(shape, data)?,
            labels,
            n_classes: self.n_classes,
            class_names: self.class_names.clone(),
            provenance: self.provenance.clone(),
        })
    }

    fn validate_unit_range(&self) -> Result<(), DataError> {
        if let Some(bad) = self
            .images
            .data()
            .iter()
            .find(|&&v| v < T::zero() || v > T::one())
        {
            return Err(DataError::IntensityRange {
                value: bad.to_f64_lossy(),
            });
        }
        Ok(())
    }
}

fn read_u32_be(bytes: &[u8], offset: &mut usize) -> Result<u32, DataError> {
    let end = *offset + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated {
            expected: end - bytes.len(),
            found: bytes.len(),
        });
    }
    let v = u32::from_be_bytes(bytes[*offset..end].try_into().unwrap());
    *offset = end;
    Ok(v)
}

/// Loads an IDX image/label file pair (big-endian magic, u8 payload) and
/// normalizes intensities into `[0, 1]` with a single channel axis.
pub fn load_idx<T: Real>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset<T>, DataError> {
    let image_bytes = std::fs::read(images_path)?;
    let mut off = 0usize;
    let magic = read_u32_be(&image_bytes, &mut off)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Magic {
            expected: IDX_IMAGES_MAGIC,
            got: magic,
        });
    }
    let count = read_u32_be(&image_bytes, &mut off)? as usize;
    let rows = read_u32_be(&image_bytes, &mut off)? as usize;
    let cols = read_u32_be(&image_bytes, &mut off)? as usize;
    if count == 0 || rows == 0 || cols == 0 {
        return Err(DataError::Format(format!(
            "empty dimension in image header ({count} x {rows} x {cols})"
        )));
    }
    let expected = count * rows * cols;
    let payload = &image_bytes[off..];
    if payload.len() < expected {
        return Err(DataError::Truncated {
            expected: expected - payload.len(),
            found: payload.len(),
        });
    }
    let scale = T::real(1.0 / 255.0);
    let data: Vec<T> = payload[..expected]
        .iter()
        .map(|&b| T::real(b as f64) * scale)
        .collect();

    let label_bytes = std::fs::read(labels_path)?;
    let mut off = 0usize;
    let magic = read_u32_be(&label_bytes, &mut off)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::Magic {
            expected: IDX_LABELS_MAGIC,
            got: magic,
        });
    }
    let label_count = read_u32_be(&label_bytes, &mut off)? as usize;
    if label_count != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let label_payload = &label_bytes[off..];
    if label_payload.len() < label_count {
        return Err(DataError::Truncated {
            expected: label_count - label_payload.len(),
            found: label_payload.len(),
        });
    }
    let labels: Vec<usize> = label_payload[..label_count].iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(1, |&m| m + 1);
    let dataset = Dataset {
        images: Tensor::from_vec(vec![count, rows, cols, 1], data)?,
        labels,
        n_classes,
        class_names: (0..n_classes).map(|c| c.to_string()).collect(),
        provenance: "idx".to_string(),
    };
    dataset.validate_unit_range()?;
    Ok(dataset)
}

fn push_u64_le(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Writes the native LTNT container: magic, version, dtype (f32), spatial
/// rank, little-endian u64 extents, f32 payload, u8 labels, CRC32 trailer.
pub fn save_native<T: Real>(dataset: &Dataset<T>, path: impl AsRef<Path>) -> Result<(), DataError> {
    let shape = dataset.images.shape();
    let spatial_rank = shape.len() - 2;
    let mut out = Vec::new();
    out.extend_from_slice(LTNT_MAGIC);
    out.push(LTNT_VERSION);
    out.push(LTNT_DTYPE_F32);
    out.push(spatial_rank as u8);
    for &e in shape {
        push_u64_le(&mut out, e as u64);
    }
    for &v in dataset.images.data() {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    for &label in &dataset.labels {
        out.push(label as u8);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads an LTNT container written by [`save_native`].
pub fn load_native<T: Real>(path: impl AsRef<Path>) -> Result<Dataset<T>, DataError> {
    let bytes = std::fs::read(&path)?;
    if bytes.len() < 11 {
        return Err(DataError::Truncated {
            expected: 11 - bytes.len(),
            found: bytes.len(),
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(DataError::Checksum { stored, computed });
    }
    if &body[0..4] != LTNT_MAGIC {
        return Err(DataError::Magic {
            expected: u32::from_be_bytes(*LTNT_MAGIC),
            got: u32::from_be_bytes(body[0..4].try_into().unwrap()),
        });
    }
    if body[4] != LTNT_VERSION {
        return Err(DataError::Version { got: body[4] });
    }
    if body[5] != LTNT_DTYPE_F32 {
        return Err(DataError::Format(format!("unsupported dtype {}", body[5])));
    }
    let spatial_rank = body[6] as usize;
    let n_extents = spatial_rank + 2;
    let mut off = 7usize;
    let mut shape = Vec::with_capacity(n_extents);
    for _ in 0..n_extents {
        let end = off + 8;
        if body.len() < end {
            return Err(DataError::Truncated {
                expected: end - body.len(),
                found: body.len(),
            });
        }
        shape.push(u64::from_le_bytes(body[off..end].try_into().unwrap()) as usize);
        off = end;
    }
    let count = shape[0];
    let elements: usize = shape.iter().product();
    let payload_bytes = elements * 4;
    if body.len() < off + payload_bytes + count {
        return Err(DataError::Truncated {
            expected: off + payload_bytes + count - body.len(),
            found: body.len(),
        });
    }
    let mut data = Vec::with_capacity(elements);
    for chunk in body[off..off + payload_bytes].chunks_exact(4) {
        data.push(T::real(f32::from_le_bytes(chunk.try_into().unwrap()) as f64));
    }
    off += payload_bytes;
    let labels: Vec<usize> = body[off..off + count].iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(1, |&m| m + 1);
    let dataset = Dataset {
        images: Tensor::from_vec(shape, data)?,
        labels,
        n_classes,
        class_names: (0..n_classes).map(|c| c.to_string()).collect(),
        provenance: format!("ltnt:{}", path.as_ref().display()),
    };
    dataset.validate_unit_range()?;
    Ok(dataset)
}

/// Generates a deterministic synthetic dataset.
pub fn gen_synthetic<T: Real>(
    kind: SyntheticKind,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Dataset<T>, DataError> {
    gen_synthetic_with_noise(kind, count, size, seed, NOISE_AMPLITUDE)
}

pub(crate) fn gen_synthetic_with_noise<T: Real>(
    kind: SyntheticKind,
    count: usize,
    size: usize,
    seed: u64,
    noise: f64,
) -> Result<Dataset<T>, DataError> {
    if count < 2 {
        return Err(DataError::CountTooSmall { got: count });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rank = kind.spatial_rank();
    let pixels = size.pow(rank as u32);
    let mut data: Vec<T> = Vec::with_capacity(count * pixels);
    let mut labels = Vec::with_capacity(count);
    let sigma = size as f64 / 6.0;
    for i in 0..count {
        let label = i % 2;
        labels.push(label);
        let center = if label == 0 {
            size as f64 / 4.0
        } else {
            3.0 * size as f64 / 4.0
        };
        match kind {
            SyntheticKind::Blobs2d => {
                for y in 0..size {
                    for x in 0..size {
                        let d2 = (y as f64 - center).powi(2) + (x as f64 - center).powi(2);
                        let v = (-d2 / (2.0 * sigma * sigma)).exp()
                            + rng.gen_range(-noise..=noise);
                        data.push(T::real(v.clamp(0.0, 1.0)));
                    }
                }
            }
            SyntheticKind::Texture2d => {
                for y in 0..size {
                    for x in 0..size {
                        let cell = (y / 2 + x / 2 + label) % 2;
                        let base = if cell == 0 { 0.75 } else { 0.25 };
                        let v = base + rng.gen_range(-noise..=noise);
                        data.push(T::real(v.clamp(0.0, 1.0)));
                    }
                }
            }
            SyntheticKind::Blobs3d => {
                for z in 0..size {
                    for y in 0..size {
                        for x in 0..size {
                            let d2 = (z as f64 - center).powi(2)
                                + (y as f64 - center).powi(2)
                                + (x as f64 - center).powi(2);
                            let v = (-d2 / (2.0 * sigma * sigma)).exp()
                                + rng.gen_range(-noise..=noise);
                            data.push(T::real(v.clamp(0.0, 1.0)));
                        }
                    }
                }
            }
        }
    }
    let mut shape = vec![count];
    shape.extend(std::iter::repeat(size).take(rank));
    shape.push(1);
    Ok(Dataset {
        images: Tensor::from_vec(shape, data)?,
        labels,
        n_classes: 2,
        class_names: vec!["class0".into(), "class1".into()],
        provenance: format!("synthetic:{kind}:count={count},size={size},seed={seed}"),
    })
}

/// Stratified split: per class, a seeded shuffle followed by contiguous
/// partition, so per-split class ratios match the global ratio within one
/// sample. Returns index lists per split, each sorted ascending.
pub fn split<T: Real>(
    dataset: &Dataset<T>,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<Vec<usize>>, DataError> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|&f| f <= 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(DataError::Fractions {
            fractions: fractions.to_vec(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = dataset.n_classes.max(1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &label) in dataset.labels.iter().enumerate() {
        by_class[label].push(i);
    }
    let mut splits: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for class_indices in by_class.iter_mut().filter(|c| !c.is_empty()) {
        class_indices.shuffle(&mut rng);
        let n = class_indices.len();
        // floor allocation, then largest remainders win the leftovers
        let mut alloc: Vec<usize> = fractions.iter().map(|f| (f * n as f64).floor() as usize).collect();
        let mut remainders: Vec<(usize, f64)> = fractions
            .iter()
            .enumerate()
            .map(|(s, f)| (s, f * n as f64 - alloc[s] as f64))
            .collect();
        remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut leftover = n - alloc.iter().sum::<usize>();
        for &(s, _) in &remainders {
            if leftover == 0 {
                break;
            }
            alloc[s] += 1;
            leftover -= 1;
        }
        let mut cursor = 0usize;
        for (s, &take) in alloc.iter().enumerate() {
            splits[s].extend_from_slice(&class_indices[cursor..cursor + take]);
            cursor += take;
        }
    }
    for (s, indices) in splits.iter_mut().enumerate() {
        indices.sort_unstable();
        for class in 0..n_classes {
            if by_class[class].is_empty() {
                continue;
            }
            if !indices.iter().any(|&i| dataset.labels[i] == class) {
                return Err(DataError::EmptySplitClass { split: s, class });
            }
        }
    }
    Ok(splits)
}
