use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::NUM_CLASSES;

use super::atomic_write;

pub const DATASET_MAGIC: [u8; 4] = *b"MDHG";
pub const DATASET_VERSION: u16 = 1;
pub const DATASET_HEADER_LEN: u64 = 16;

/// Labelled `[H×W×C]` images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Real = f32> {
    shape: [usize; 3],
    images: Vec<Tensor<T>>,
    labels: Vec<u8>,
}

impl<T: Real> Dataset<T> {
    pub fn new(shape: [usize; 3], images: Vec<Tensor<T>>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(img) = images.iter().find(|i| i.shape() != shape) {
            return Err(Error::ShapeMismatch {
                op: "dataset image",
                left: shape.to_vec(),
                right: img.shape().to_vec(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange {
                label: l as usize,
                num_classes: NUM_CLASSES,
            });
        }
        Ok(Self { shape, images, labels })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &[Tensor<T>] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &Tensor<T> {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Copies of the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!(
                "sample index {i} out of range for {} samples",
                self.len()
            )));
        }
        Ok(Self {
            shape: self.shape,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset {
            shape: self.shape,
            images: self.images.iter().map(Tensor::cast).collect(),
            labels: self.labels.clone(),
        }
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// Bytes a container with `count` samples of `shape` occupies.
pub fn container_len(count: usize, shape: [usize; 3]) -> u64 {
    let per = shape.iter().product::<usize>() as u64 * 4;
    DATASET_HEADER_LEN + count as u64 + count as u64 * per
}

/// Writes the container: header, one label byte per sample, then
/// little-endian f32 payload, sample-major and row-major within a sample.
pub fn save_dataset(path: &Path, data: &Dataset<f32>) -> Result<()> {
    let [h, w, c] = data.shape;
    let dims: Vec<u16> = [h, w, c]
        .iter()
        .map(|&d| u16::try_from(d))
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidArgument(format!("image extents {:?} exceed u16", data.shape)))?;
    let count = u32::try_from(data.len())
        .map_err(|_| Error::InvalidArgument(format!("{} samples exceed u32", data.len())))?;
    atomic_write(path, |file| {
        let mut out = BufWriter::new(file);
        out.write_all(&DATASET_MAGIC)?;
        out.write_all(&DATASET_VERSION.to_le_bytes())?;
        out.write_all(&count.to_le_bytes())?;
        for d in &dims {
            out.write_all(&d.to_le_bytes())?;
        }
        out.write_all(&data.labels)?;
        for img in &data.images {
            for v in img.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()
    })
}

/// Reads and validates a container. The header and total length are checked
/// before any payload is read; nothing is returned on any failure.
pub fn load_dataset(path: &Path) -> Result<Dataset<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let actual = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::new(file);
    let mut header = [0u8; DATASET_HEADER_LEN as usize];
    if actual < DATASET_HEADER_LEN {
        return Err(Error::Truncated {
            what: "dataset header",
            expected: DATASET_HEADER_LEN,
            found: actual,
        });
    }
    r.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    let magic: [u8; 4] = header[0..4].try_into().expect("4 bytes");
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            expected: DATASET_MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let count = u32::from_le_bytes(header[6..10].try_into().expect("4 bytes")) as usize;
    let dim = |i: usize| u16::from_le_bytes([header[i], header[i + 1]]) as usize;
    let shape = [dim(10), dim(12), dim(14)];
    if shape.contains(&0) {
        return Err(Error::Malformed {
            what: "dataset header",
            reason: format!("zero image extent {shape:?}"),
        });
    }
    let expected = container_len(count, shape);
    if actual < expected {
        return Err(Error::Truncated {
            what: "dataset payload",
            expected,
            found: actual,
        });
    }
    if actual > expected {
        return Err(Error::Malformed {
            what: "dataset container",
            reason: format!("{} trailing bytes", actual - expected),
        });
    }
    let mut labels = vec![0u8; count];
    r.read_exact(&mut labels).map_err(|e| Error::io(path, e))?;
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::LabelOutOfRange {
            label: l as usize,
            num_classes: NUM_CLASSES,
        });
    }
    let per = shape.iter().product::<usize>();
    let mut buf = vec![0u8; per * 4];
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        let data = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        images.push(Tensor::new(&shape, data)?);
    }
    Dataset::new(shape, images, labels)
}

/// Per-channel min-max scaling of an `[H×W×C]` image to `[0, 1]`; a constant
/// channel becomes all zeros.
pub fn normalize<T: Real>(image: &Tensor<T>) -> Result<Tensor<T>> {
    if image.rank() != 3 {
        return Err(Error::InvalidShape {
            shape: image.shape().to_vec(),
            reason: "expected an [H×W×C] image".into(),
        });
    }
    if !image.is_finite() {
        return Err(Error::NonFinite("image passed to normalize".into()));
    }
    let c = image.dim(2);
    let mut lo = vec![T::infinity(); c];
    let mut hi = vec![T::neg_infinity(); c];
    for px in image.data().chunks_exact(c) {
        for (k, &v) in px.iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for (k, v) in px.iter_mut().enumerate() {
            let range = hi[k] - lo[k];
            *v = if range > T::zero() { (*v - lo[k]) / range } else { T::zero() };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> Dataset<f32> {
        let images = (0..n)
            .map(|s| Tensor::from_fn(&[3, 2, 3], |i| (s * 18 + i) as f32 * 0.01))
            .collect();
        Dataset::new([3, 2, 3], images, (0..n as u8).collect()).unwrap()
    }

    #[test]
    fn round_trip_and_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let d = tiny(3);
        save_dataset(&path, &d).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 16 + 3 + 3 * 18 * 4);
        assert_eq!(load_dataset(&path).unwrap(), d);
    }

    #[test]
    fn reference_container_size() {
        assert_eq!(container_len(3500, [180, 60, 3]), 16 + 3500 + 3500 * 129_600);
    }

    #[test]
    fn distinct_load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        save_dataset(&path, &tiny(2)).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::VersionMismatch { found: 9, .. })));

        std::fs::write(&path, &good[..good.len() - 1]).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Truncated { .. })));

        let mut bad = good.clone();
        bad[16] = 14;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::LabelOutOfRange { label: 14, .. })));
    }

    #[test]
    fn normalize_rules() {
        let x = Tensor::<f64>::from_f64_slice(&[3, 1, 2], &[2.0, 5.0, 4.0, 5.0, 6.0, 5.0]).unwrap();
        let y = normalize(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.5, 0.0, 1.0, 0.0]);
        let unit = Tensor::<f64>::from_f64_slice(&[3, 1, 1], &[0.0, 0.3, 1.0]).unwrap();
        assert_eq!(normalize(&unit).unwrap(), unit);
        let nan = Tensor::<f64>::from_f64_slice(&[1, 1, 1], &[f64::NAN]).unwrap();
        assert!(normalize(&nan).is_err());
    }
}
