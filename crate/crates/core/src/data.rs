//! In-memory labeled image sets, the synthetic Gaussian-blob generator and
//! the deterministic train/val/test split.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, shuffle};
use crate::tensor::Tensor;

/// Labeled `u8` images stored channel-major (`C × S × S` per record).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub side: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub labels: Vec<u32>,
    pub pixels: Vec<u8>,
}

/// Record indices of each split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Dataset {
    pub fn new(side: usize, channels: usize, num_classes: usize, labels: Vec<u32>, pixels: Vec<u8>) -> Result<Self> {
        let d = Dataset { side, channels, num_classes, labels, pixels };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || self.channels == 0 || self.num_classes == 0 {
            return Err(Error::format("dataset geometry and class count must be positive"));
        }
        if self.pixels.len() != self.labels.len() * self.record_pixels() {
            return Err(Error::format(format!(
                "{} records need {} pixel bytes, found {}",
                self.labels.len(),
                self.labels.len() * self.record_pixels(),
                self.pixels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(Error::format(format!("label {bad} out of range for {} classes", self.num_classes)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn record_pixels(&self) -> usize {
        self.side * self.side * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.record_pixels();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// `[B, C, S, S]` tensor with pixels mapped to `v/255 − 0.5`.
    pub fn images(&self, idx: &[usize]) -> Result<Tensor> {
        let n = self.record_pixels();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::shape(format!("record {i} out of range for {} records", self.len())));
            }
            data.extend(self.image(i).iter().map(|&p| p as f32 / 255.0 - 0.5));
        }
        Tensor::new(&[idx.len(), self.channels, self.side, self.side], data)
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i] as usize).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(idx.len() * self.record_pixels());
        for &i in idx {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            side: self.side,
            channels: self.channels,
            num_classes: self.num_classes,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            pixels,
        }
    }

    /// Records whose label is in `classes`, relabeled to the position of their
    /// class in `classes`. Record order is preserved.
    pub fn restrict_to_classes(&self, classes: &[usize]) -> Dataset {
        let mut local = vec![None; self.num_classes];
        for (j, &c) in classes.iter().enumerate() {
            local[c] = Some(j as u32);
        }
        let keep: Vec<usize> = (0..self.len()).filter(|&i| local[self.labels[i] as usize].is_some()).collect();
        let mut d = self.subset(&keep);
        d.num_classes = classes.len();
        for l in &mut d.labels {
            *l = local[*l as usize].unwrap();
        }
        d
    }

    /// Per-class stride split: the k-th record of each class (in file order)
    /// goes to test when `k % 10 < 2`, to validation when `k % 10 == 2`, and
    /// to training otherwise.
    pub fn split(&self) -> Splits {
        let mut seen = vec![0usize; self.num_classes];
        let mut s = Splits::default();
        for (i, &l) in self.labels.iter().enumerate() {
            let k = seen[l as usize];
            seen[l as usize] += 1;
            match k % 10 {
                0 | 1 => s.test.push(i),
                2 => s.val.push(i),
                _ => s.train.push(i),
            }
        }
        s
    }

    pub fn split_indices(&self, which: Split) -> Vec<usize> {
        let s = self.split();
        match which {
            Split::Train => s.train,
            Split::Val => s.val,
            Split::Test => s.test,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub side: usize,
    pub channels: usize,
    pub seed: u64,
    /// Standard deviation of additive pixel noise, in units of full scale.
    pub noise: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { num_classes: 8, per_class: 50, side: 16, channels: 1, seed: 7, noise: 0.08 }
    }
}

/// Class-separable Gaussian blobs: each class owns a blob centre on a ring
/// around the image centre (with a random phase) and, for multi-channel
/// images, a random per-channel gain. Samples jitter the centre, width and
/// amplitude and add pixel noise. Records are emitted sample-major
/// (`sample 0 of every class, sample 1 of every class, ...`).
pub fn synthesize(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.per_class == 0 || spec.side < 4 || spec.channels == 0 {
        return Err(Error::config("synthetic spec needs classes, samples, side >= 4 and channels"));
    }
    let mut rng = rng_from(spec.seed);
    let side = spec.side as f32;
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let radius = side * 0.3;
    let mid = (side - 1.0) / 2.0;
    let centres: Vec<(f32, f32)> = (0..spec.num_classes)
        .map(|c| {
            let a = phase + std::f32::consts::TAU * c as f32 / spec.num_classes as f32;
            (mid + radius * a.cos(), mid + radius * a.sin())
        })
        .collect();
    let gains: Vec<Vec<f32>> = (0..spec.num_classes)
        .map(|_| (0..spec.channels).map(|_| rng.random_range(0.6..1.0)).collect())
        .collect();
    let jitter = Normal::new(0.0f32, 0.5).expect("normal");
    let noise = Normal::new(0.0f32, spec.noise.max(0.0)).expect("normal");
    let base_sigma = side / 8.0;

    let n = spec.num_classes * spec.per_class;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * spec.side * spec.side * spec.channels);
    for _ in 0..spec.per_class {
        for (c, &(cx, cy)) in centres.iter().enumerate() {
            let x0 = cx + jitter.sample(&mut rng);
            let y0 = cy + jitter.sample(&mut rng);
            let sigma = base_sigma * rng.random_range(0.8..1.2);
            let amp = rng.random_range(0.7..1.0);
            for ch in 0..spec.channels {
                for y in 0..spec.side {
                    for x in 0..spec.side {
                        let r2 = (x as f32 - x0).powi(2) + (y as f32 - y0).powi(2);
                        let v = amp * gains[c][ch] * (-r2 / (2.0 * sigma * sigma)).exp() + noise.sample(&mut rng);
                        pixels.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
            labels.push(c as u32);
        }
    }
    Dataset::new(spec.side, spec.channels, spec.num_classes, labels, pixels)
}

/// Seeded minibatch order over `indices`.
pub fn shuffled_batches(indices: &[usize], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx = indices.to_vec();
    let mut rng = rng_from(seed);
    shuffle(&mut rng, &mut idx);
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Fixed-order minibatches for evaluation.
pub fn ordered_batches(indices: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    indices.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_shape_and_determinism() {
        let spec = SyntheticSpec::default();
        let a = synthesize(&spec).unwrap();
        assert_eq!(a.len(), 400);
        assert_eq!(a.class_counts(), vec![50; 8]);
        assert_eq!(a, synthesize(&spec).unwrap());
        let other = synthesize(&SyntheticSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.pixels, other.pixels);
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let d = synthesize(&SyntheticSpec::default()).unwrap();
        let s = d.split();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (280, 40, 80));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..400).collect::<Vec<_>>());
        let test = d.subset(&s.test);
        assert_eq!(test.class_counts(), vec![10; 8]);
    }

    #[test]
    fn restriction_preserves_per_class_order_and_split() {
        let d = synthesize(&SyntheticSpec::default()).unwrap();
        let part = d.restrict_to_classes(&[5, 2]);
        assert_eq!(part.num_classes, 2);
        assert_eq!(part.len(), 100);
        let full_test: Vec<Vec<u8>> = d
            .split()
            .test
            .iter()
            .filter(|&&i| d.labels[i] == 5 || d.labels[i] == 2)
            .map(|&i| d.image(i).to_vec())
            .collect();
        let part_test: Vec<Vec<u8>> = part.split().test.iter().map(|&i| part.image(i).to_vec()).collect();
        assert_eq!(full_test, part_test);
        assert!(part.labels.iter().all(|&l| l < 2));
    }

    #[test]
    fn image_tensor_normalization() {
        let d = Dataset::new(2, 1, 1, vec![0], vec![0, 255, 51, 102]).unwrap();
        let t = d.images(&[0]).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2, 2]);
        assert_eq!(t.data()[0], -0.5);
        assert_eq!(t.data()[1], 0.5);
    }

    #[test]
    fn invalid_labels_rejected() {
        assert!(Dataset::new(2, 1, 1, vec![1], vec![0; 4]).is_err());
        assert!(Dataset::new(2, 1, 1, vec![0], vec![0; 3]).is_err());
    }
}
