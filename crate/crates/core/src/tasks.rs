//! Benchmark data: the adding problem and pixel-by-pixel MNIST.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use crate::cell::Targets;
use crate::error::{Error, Result};
use crate::linalg::{Mat, SeededRng};

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const MNIST_CLASSES: usize = 10;

/// A batch of sequences stored time-major: `inputs[t]` is `B x M`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub inputs: Vec<Mat>,
    pub targets: Targets,
}

impl TaskBatch {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn batch_size(&self) -> usize {
        self.targets.len()
    }

    pub fn features(&self) -> usize {
        self.inputs.first().map_or(0, Mat::cols)
    }

    /// One sequence as its own batch of size 1.
    pub fn sequence(&self, b: usize) -> TaskBatch {
        let inputs = self
            .inputs
            .iter()
            .map(|m| Mat::row_vector(m.row(b)))
            .collect();
        let targets = match &self.targets {
            Targets::Regression(y) => Targets::Regression(vec![y[b]]),
            Targets::Classes(y) => Targets::Classes(vec![y[b]]),
        };
        TaskBatch { inputs, targets }
    }
}

/// Adding problem: feature 0 uniform on `(0, 1)`, feature 1 marks exactly two
/// positions drawn without replacement; the target is the sum of the two
/// marked values.
pub fn gen_adding(steps: usize, batch: usize, rng: &mut SeededRng) -> Result<TaskBatch> {
    if steps < 2 {
        return Err(Error::invalid(format!(
            "adding problem needs at least 2 steps, got {steps}"
        )));
    }
    let mut inputs: Vec<Mat> = (0..steps).map(|_| Mat::zeros(batch, 2)).collect();
    let mut targets = Vec::with_capacity(batch);
    for b in 0..batch {
        for x in inputs.iter_mut() {
            x[(b, 0)] = rng.uniform_open();
        }
        let first = rng.below(steps);
        let mut second = rng.below(steps - 1);
        if second >= first {
            second += 1;
        }
        inputs[first][(b, 1)] = 1.0;
        inputs[second][(b, 1)] = 1.0;
        targets.push(inputs[first][(b, 0)] + inputs[second][(b, 0)]);
    }
    Ok(TaskBatch {
        inputs,
        targets: Targets::Regression(targets),
    })
}

/// Expected adding-problem target, used to initialise the regression bias.
pub const ADDING_TARGET_MEAN: f64 = 1.0;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            msg: "file ends inside the header".into(),
        })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("expected image magic {IDX_IMAGES_MAGIC}, found {magic}"),
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::Format {
            offset: (16 + payload.len()) as u64,
            msg: format!(
                "truncated image payload: expected {need} bytes, found {}",
                payload.len()
            ),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: payload[..need].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("expected label magic {IDX_LABELS_MAGIC}, found {magic}"),
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::Format {
            offset: (8 + payload.len()) as u64,
            msg: format!(
                "truncated label payload: expected {count} bytes, found {}",
                payload.len()
            ),
        });
    }
    Ok(payload[..count].to_vec())
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let count = pixels.len() / (rows * cols);
    let mut f = fs::File::create(path)?;
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        f.write_all(&v.to_be_bytes())?;
    }
    f.write_all(pixels)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)?;
    Ok(())
}

/// Images flattened row-major into pixel sequences, with labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MnistDataset {
    seq_len: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

/// Loads an IDX image/label pair; either file may be gzip-compressed.
pub fn load_mnist(images: &Path, labels: &Path) -> Result<MnistDataset> {
    let img = parse_idx_images(&read_maybe_gz(images)?)?;
    let lab = parse_idx_labels(&read_maybe_gz(labels)?)?;
    if img.count != lab.len() {
        return Err(Error::invalid(format!(
            "{} images but {} labels ({} vs {})",
            img.count,
            lab.len(),
            images.display(),
            labels.display()
        )));
    }
    if let Some((i, l)) = lab
        .iter()
        .enumerate()
        .find(|(_, &l)| l as usize >= MNIST_CLASSES)
    {
        return Err(Error::Format {
            offset: 8 + i as u64,
            msg: format!("label {l} is not a digit"),
        });
    }
    MnistDataset::new(img.rows * img.cols, img.pixels, lab)
}

impl MnistDataset {
    pub fn new(seq_len: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if seq_len == 0 || pixels.len() != seq_len * labels.len() {
            return Err(Error::shape(
                "MnistDataset",
                seq_len * labels.len(),
                pixels.len(),
            ));
        }
        Ok(MnistDataset {
            seq_len,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn raw(&self, i: usize) -> &[u8] {
        &self.pixels[i * self.seq_len..(i + 1) * self.seq_len]
    }

    /// Pixel sequence scaled to `[0, 1]`.
    pub fn sequence(&self, i: usize) -> Vec<f64> {
        self.raw(i).iter().map(|&p| p as f64 / 255.0).collect()
    }

    /// Samples `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> MnistDataset {
        let r = range.start.min(self.len())..range.end.min(self.len());
        MnistDataset {
            seq_len: self.seq_len,
            pixels: self.pixels[r.start * self.seq_len..r.end * self.seq_len].to_vec(),
            labels: self.labels[r].to_vec(),
        }
    }

    pub fn class_counts(&self) -> [usize; MNIST_CLASSES] {
        let mut c = [0; MNIST_CLASSES];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    pub fn batch(&self, indices: &[usize]) -> TaskBatch {
        let inputs = (0..self.seq_len)
            .map(|t| {
                Mat::from_fn(indices.len(), 1, |b, _| {
                    self.raw(indices[b])[t] as f64 / 255.0
                })
            })
            .collect();
        TaskBatch {
            inputs,
            targets: Targets::Classes(indices.iter().map(|&i| self.label(i)).collect()),
        }
    }

    /// Reorders the pixels of every sample by the same permutation:
    /// output pixel `t` is input pixel `perm[t]`.
    pub fn apply_permutation(&self, perm: &PixelPermutation) -> Result<MnistDataset> {
        if perm.len() != self.seq_len {
            return Err(Error::shape("apply_permutation", self.seq_len, perm.len()));
        }
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for i in 0..self.len() {
            let src = self.raw(i);
            pixels.extend(perm.as_slice().iter().map(|&p| src[p]));
        }
        Ok(MnistDataset {
            seq_len: self.seq_len,
            pixels,
            labels: self.labels.clone(),
        })
    }
}

/// A bijection on pixel positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelPermutation {
    perm: Vec<usize>,
}

impl PixelPermutation {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid(format!(
                    "not a permutation: entry {p} repeated or out of range"
                )));
            }
        }
        Ok(PixelPermutation { perm })
    }

    pub fn identity(n: usize) -> Self {
        PixelPermutation {
            perm: (0..n).collect(),
        }
    }

    /// Fisher-Yates shuffle driven by [`SeededRng`].
    pub fn from_seed(seed: u64, n: usize) -> Self {
        let mut rng = SeededRng::new(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.below(i + 1);
            perm.swap(i, j);
        }
        PixelPermutation { perm }
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        PixelPermutation { perm: inv }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.perm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adding_batch_invariants() {
        let mut rng = SeededRng::new(1);
        let batch = gen_adding(50, 64, &mut rng).unwrap();
        let Targets::Regression(y) = &batch.targets else {
            unreachable!()
        };
        for b in 0..64 {
            let marked: Vec<usize> = (0..50)
                .filter(|&t| batch.inputs[t][(b, 1)] == 1.0)
                .collect();
            assert_eq!(marked.len(), 2);
            assert!((0..50).all(|t| {
                let m = batch.inputs[t][(b, 1)];
                m == 0.0 || m == 1.0
            }));
            let sum = batch.inputs[marked[0]][(b, 0)] + batch.inputs[marked[1]][(b, 0)];
            assert_eq!(sum, y[b]);
            assert!(y[b] > 0.0 && y[b] < 2.0);
            assert!((0..50).all(|t| batch.inputs[t][(b, 0)] > 0.0 && batch.inputs[t][(b, 0)] < 1.0));
        }
    }

    #[test]
    fn adding_is_reproducible_and_validates_length() {
        let a = gen_adding(10, 4, &mut SeededRng::new(5)).unwrap();
        let b = gen_adding(10, 4, &mut SeededRng::new(5)).unwrap();
        assert_eq!(a, b);
        assert!(gen_adding(1, 4, &mut SeededRng::new(5)).is_err());
        // two steps means both positions are marked
        let c = gen_adding(2, 3, &mut SeededRng::new(5)).unwrap();
        assert!(c.inputs.iter().all(|m| (0..3).all(|b| m[(b, 1)] == 1.0)));
    }

    #[test]
    fn mean_predictor_scores_one_sixth() {
        let mut rng = SeededRng::new(2);
        let mut se = 0.0;
        let mut n = 0;
        for _ in 0..200 {
            let batch = gen_adding(20, 100, &mut rng).unwrap();
            let Targets::Regression(y) = batch.targets else {
                unreachable!()
            };
            se += y.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>();
            n += y.len();
        }
        let mse = se / n as f64;
        assert!((mse - 1.0 / 6.0).abs() < 0.005, "{mse}");
    }

    #[test]
    fn permutation_group_properties() {
        let p = PixelPermutation::from_seed(3, 784);
        let mut sorted = p.as_slice().to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..784).collect::<Vec<_>>());
        assert_eq!(PixelPermutation::from_seed(3, 784), p);
        assert_ne!(PixelPermutation::from_seed(4, 784), p);
        assert!(PixelPermutation::new(vec![0, 0, 1]).is_err());
        assert!(PixelPermutation::new(vec![0, 3, 1]).is_err());

        let data = MnistDataset::new(4, vec![1, 2, 3, 4, 5, 6, 7, 8], vec![3, 7]).unwrap();
        assert_eq!(
            data.apply_permutation(&PixelPermutation::identity(4))
                .unwrap(),
            data
        );
        let q = PixelPermutation::new(vec![2, 0, 3, 1]).unwrap();
        let shuffled = data.apply_permutation(&q).unwrap();
        assert_eq!(shuffled.raw(0), &[3, 1, 4, 2]);
        assert_eq!(shuffled.apply_permutation(&q.inverse()).unwrap(), data);
        assert_eq!(shuffled.class_counts(), data.class_counts());
    }

    #[test]
    fn idx_header_errors() {
        assert!(matches!(
            parse_idx_images(&[0, 0]),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bytes = Vec::new();
        for v in [IDX_LABELS_MAGIC, 1, 28, 28] {
            bytes.extend(v.to_be_bytes());
        }
        assert!(matches!(
            parse_idx_images(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bytes = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 2, 2, 2] {
            bytes.extend(v.to_be_bytes());
        }
        bytes.extend([0u8; 5]);
        assert!(matches!(
            parse_idx_images(&bytes),
            Err(Error::Format { offset: 21, .. })
        ));
    }
}
