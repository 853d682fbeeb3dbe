//! Datasets and task-sequence generation.

mod idx;
mod streams;

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use idx::{load_idx_dataset, parse_idx, read_idx, write_idx, IdxArray};
pub use streams::{gcil_stream, split_stream, zipf_weights, GcilWeighting, TaskSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Immutable labeled image collection.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    item_shape: Vec<usize>,
    item_len: usize,
    values: Vec<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(item_shape: Vec<usize>, values: Vec<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let item_len: usize = item_shape.iter().product();
        if item_len == 0 || values.len() != item_len * labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} values cannot hold {} items of shape {item_shape:?}",
                values.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::LabelOutOfRange { label: bad, classes: class_count });
        }
        Ok(Dataset { item_shape, item_len, values, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item_shape(&self) -> &[usize] {
        &self.item_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.values[i * self.item_len..(i + 1) * self.item_len]
    }

    /// Stacks the selected items into a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.item(i)).collect();
        let x = Tensor::stack_rows(&self.item_shape, &rows).expect("items share the dataset shape");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Item indices per class, in dataset order.
    pub fn class_index(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.class_count];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }

    /// Keeps at most `per_class` items of each class, in dataset order.
    pub fn take_per_class(&self, per_class: usize) -> Dataset {
        let mut seen = vec![0usize; self.class_count];
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let y = self.labels[i];
                seen[y] += 1;
                seen[y] <= per_class
            })
            .collect();
        self.subset(&keep)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut values = Vec::with_capacity(indices.len() * self.item_len);
        for &i in indices {
            values.extend_from_slice(self.item(i));
        }
        Dataset {
            item_shape: self.item_shape.clone(),
            item_len: self.item_len,
            values,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }
}

/// Train and test partitions over the same label space.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

impl DataSplit {
    pub fn new(train: Dataset, mut test: Dataset) -> Result<Self> {
        if train.item_shape != test.item_shape {
            return Err(Error::ShapeMismatch { expected: train.item_shape.clone(), actual: test.item_shape.clone() });
        }
        test.class_count = test.class_count.max(train.class_count);
        let mut train = train;
        train.class_count = test.class_count;
        Ok(DataSplit { train, test })
    }

    pub fn class_count(&self) -> usize {
        self.train.class_count
    }
}

/// Loads `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
/// `t10k-images-idx3-ubyte` and `t10k-labels-idx1-ubyte` (optionally `.gz`)
/// from a directory.
pub fn load_idx_dir(dir: &Path) -> Result<DataSplit> {
    let find = |stem: &str| -> Result<PathBuf> {
        for cand in [dir.join(stem), dir.join(format!("{stem}.gz"))] {
            if cand.exists() {
                return Ok(cand);
            }
        }
        Err(Error::io(
            dir.join(stem),
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found (also tried .gz)"),
        ))
    };
    let train = load_idx_dataset(&find("train-images-idx3-ubyte")?, &find("train-labels-idx1-ubyte")?)?;
    let test = load_idx_dataset(&find("t10k-images-idx3-ubyte")?, &find("t10k-labels-idx1-ubyte")?)?;
    DataSplit::new(train, test)
}

/// Synthetic Gaussian-blob images: each class has a random prototype image
/// with entries in `[0, 1]`; items are the prototype plus isotropic noise.
pub fn gaussian_blobs<R: Rng + ?Sized>(
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    item_shape: &[usize],
    noise: f64,
    rng: &mut R,
) -> Result<DataSplit> {
    let n: usize = item_shape.iter().product();
    let prototypes: Vec<Vec<f64>> = (0..classes).map(|_| (0..n).map(|_| rng.gen::<f64>()).collect()).collect();
    let normal = Normal::new(0.0, noise).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let make = |per_class: usize, rng: &mut R| -> Result<Dataset> {
        let mut values = Vec::with_capacity(classes * per_class * n);
        let mut labels = Vec::with_capacity(classes * per_class);
        // interleave classes so that dataset order is not sorted by label
        for _ in 0..per_class {
            for (c, proto) in prototypes.iter().enumerate() {
                values.extend(proto.iter().map(|p| p + normal.sample(rng)));
                labels.push(c);
            }
        }
        Dataset::new(item_shape.to_vec(), values, labels, classes)
    };
    let train = make(train_per_class, rng)?;
    let test = make(test_per_class, rng)?;
    DataSplit::new(train, test)
}

/// Random shift by up to `pad` pixels (zero fill) and optional horizontal
/// flip, applied to one `C x H x W` item.
pub fn augment<R: Rng + ?Sized>(item: &[f64], shape: &[usize], pad: usize, flip: bool, rng: &mut R) -> Vec<f64> {
    let [c, h, w] = shape[..] else {
        return item.to_vec();
    };
    let range = -(pad as isize)..=(pad as isize);
    let dy = rng.gen_range(range.clone());
    let dx = rng.gen_range(range);
    let mirror = flip && rng.gen_bool(0.5);
    let mut out = vec![0.0; item.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let xx = if mirror { w - 1 - x } else { x };
                let sx = xx as isize + dx;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = item[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn blobs_have_requested_sizes() {
        let s = gaussian_blobs(4, 5, 2, &[1, 3, 3], 0.1, &mut stream(0, Stream::Data)).unwrap();
        assert_eq!(s.train.len(), 20);
        assert_eq!(s.test.len(), 8);
        assert_eq!(s.class_count(), 4);
        assert_eq!(s.train.class_index()[3].len(), 5);
    }

    #[test]
    fn zero_shift_without_flip_is_identity() {
        let item: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let out = augment(&item, &[1, 3, 4], 0, false, &mut stream(0, Stream::Augment));
        assert_eq!(out, item);
    }

    #[test]
    fn take_per_class_caps_counts() {
        let s = gaussian_blobs(3, 10, 1, &[2], 0.1, &mut stream(0, Stream::Data)).unwrap();
        let small = s.train.take_per_class(4);
        assert!(small.class_index().iter().all(|c| c.len() == 4));
    }
}
