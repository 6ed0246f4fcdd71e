//! CIFAR-10 binary batches: records of one label byte followed by 3072
//! pixel bytes (1024 red, 1024 green, 1024 blue, each row-major 32x32).

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const CLASSES: usize = 10;
pub const IMAGE_BYTES: usize = 3 * 32 * 32;
pub const RECORD_BYTES: usize = 1 + IMAGE_BYTES;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Labeled images stored as `f32` in `(c, h, w)` order, one image after
/// another.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: (usize, usize, usize),
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(dims: (usize, usize, usize), images: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        let per = dims.0 * dims.1 * dims.2;
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::invalid(
                "dataset",
                format!("{} values for {} images of {per}", images.len(), labels.len()),
            ));
        }
        Ok(Dataset { dims, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            dims: self.dims,
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// A batch tensor and labels for the given example indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (c, h, w) = self.dims;
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| f64::from(v)));
        }
        let t = Tensor::from_vec(Shape::new(indices.len(), c, h, w), data).expect("batch size");
        (t, indices.iter().map(|&i| usize::from(self.labels[i])).collect())
    }
}

/// Parses one batch file's bytes. `path` only labels errors.
pub fn parse_batch(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let full = bytes.len() / RECORD_BYTES;
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        let offset = (full * RECORD_BYTES) as u64;
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset,
            msg: format!(
                "record {full} truncated: {} of {RECORD_BYTES} bytes present",
                bytes.len() - full * RECORD_BYTES
            ),
        });
    }
    let mut images = Vec::with_capacity(full * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(full);
    for (r, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if usize::from(rec[0]) >= CLASSES {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (r * RECORD_BYTES) as u64,
                msg: format!("record {r} has label {} outside 0..{CLASSES}", rec[0]),
            });
        }
        labels.push(rec[0]);
        images.extend(rec[1..].iter().map(|&b| f32::from(b) / 255.0));
    }
    Dataset::new((3, 32, 32), images, labels)
}

/// Inverse of [`parse_batch`] for 3x32x32 data with values in `[0, 1]`.
pub fn encode_batch(data: &Dataset) -> Result<Vec<u8>> {
    if data.dims != (3, 32, 32) {
        return Err(Error::invalid("encode_batch", "CIFAR records are 3x32x32"));
    }
    let mut out = Vec::with_capacity(data.len() * RECORD_BYTES);
    for i in 0..data.len() {
        out.push(data.labels[i]);
        out.extend(data.image(i).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn load_batch(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_batch(&bytes, path)
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        images.extend(p.images);
        labels.extend(p.labels);
    }
    Dataset::new((3, 32, 32), images, labels)
}

/// Resolves `dir` itself or its `cifar-10-batches-bin` subdirectory.
fn batch_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if !dir.join(TEST_FILE).exists() && nested.join(TEST_FILE).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// `(train, test)` from the five training batches and the test batch.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = batch_dir(dir.as_ref());
    let train = TRAIN_FILES
        .iter()
        .map(|f| load_batch(dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    Ok((concat(train)?, load_batch(dir.join(TEST_FILE))?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(fill, IMAGE_BYTES));
        r
    }

    #[test]
    fn parses_records() {
        let bytes: Vec<u8> = (0..4u8).flat_map(|i| record(i, 51 * i)).collect();
        let d = parse_batch(&bytes, Path::new("x.bin")).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d.labels, [0, 1, 2, 3]);
        assert_eq!(d.image(1)[0], 0.2);
        assert_eq!(d.image(3)[3071], 153.0 / 255.0);
        assert_eq!(encode_batch(&d).unwrap(), bytes);
    }

    #[test]
    fn truncation_names_final_record() {
        let bytes: Vec<u8> = (0..3u8).flat_map(|i| record(i, 0)).collect();
        match parse_batch(&bytes[..bytes.len() - 1], Path::new("t.bin")) {
            Err(Error::Format { offset, msg, .. }) => {
                assert_eq!(offset, 2 * RECORD_BYTES as u64);
                assert!(msg.contains("record 2"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_label_is_positioned() {
        let mut bytes = record(1, 0);
        bytes.extend(record(10, 0));
        match parse_batch(&bytes, Path::new("l.bin")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, RECORD_BYTES as u64),
            other => panic!("{other:?}"),
        }
    }
}
