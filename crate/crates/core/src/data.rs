//! Labeled example pool with an active set `V` and a cumulative drop ledger `Z`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, EpicRng};
use crate::scalar::{all_finite, Real};

/// Why and when an example left the active set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropRecord {
    pub index: usize,
    pub epoch: usize,
    pub class: usize,
    /// Position of the example in its class's greedy medoid sequence.
    pub medoid_rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetState<T> {
    dim: usize,
    classes: usize,
    features: Vec<T>,
    labels: Vec<usize>,
    poison: Option<Vec<bool>>,
    /// Ascending original indices.
    active: Vec<usize>,
    dropped: Vec<DropRecord>,
}

impl<T: Real> DatasetState<T> {
    /// `features` is row-major `labels.len() × dim`.
    pub fn new(dim: usize, classes: usize, features: Vec<T>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::invalid(format!(
                "{} feature values for {} examples of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if !all_finite(&features) {
            return Err(Error::invalid("features contain non-finite values"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
        }
        let active = (0..labels.len()).collect();
        Ok(Self { dim, classes, features, labels, poison: None, active, dropped: Vec::new() })
    }

    pub fn from_rows(rows: &[Vec<T>], labels: Vec<usize>, classes: usize) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("feature rows have unequal lengths"));
        }
        Self::new(dim, classes, rows.concat(), labels)
    }

    pub fn with_poison_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.len() {
            return Err(Error::invalid(format!("poison mask has {} entries for {} examples", mask.len(), self.len())));
        }
        self.poison = Some(mask);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn x(&self, i: usize) -> &[T] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn x_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.features[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn poison_mask(&self) -> Option<&[bool]> {
        self.poison.as_deref()
    }

    pub fn is_poison(&self, i: usize) -> Option<bool> {
        self.poison.as_ref().map(|m| m[i])
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn dropped(&self) -> &[DropRecord] {
        &self.dropped
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Positions within `active()` of the active members of `class`.
    pub fn class_positions(&self, class: usize) -> Vec<usize> {
        self.active.iter().enumerate().filter(|(_, &i)| self.labels[i] == class).map(|(p, _)| p).collect()
    }

    pub fn active_count(&self, class: usize) -> usize {
        self.active.iter().filter(|&&i| self.labels[i] == class).count()
    }

    /// Classes that have at least one example in the full universe.
    pub fn populated_classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.classes];
        for &y in &self.labels {
            seen[y] = true;
        }
        (0..self.classes).filter(|&c| seen[c]).collect()
    }

    /// Removes the records' indices from the active set permanently.
    pub fn drop_examples(&mut self, records: &[DropRecord]) -> Result<()> {
        let mut remove: Vec<usize> = records.iter().map(|r| r.index).collect();
        remove.sort_unstable();
        if remove.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("drop list contains duplicates"));
        }
        for &i in &remove {
            if self.active.binary_search(&i).is_err() {
                return Err(Error::invalid(format!("example {i} is not active")));
            }
        }
        self.active.retain(|i| remove.binary_search(i).is_err());
        self.dropped.extend_from_slice(records);
        Ok(())
    }

    /// Copy restricted to the given original indices, all active.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        let mut poison = self.poison.as_ref().map(|_| Vec::with_capacity(indices.len()));
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("index {i} out of range")));
            }
            features.extend_from_slice(self.x(i));
            labels.push(self.labels[i]);
            if let (Some(p), Some(m)) = (poison.as_mut(), self.poison.as_ref()) {
                p.push(m[i]);
            }
        }
        let mut out = Self::new(self.dim, self.classes, features, labels)?;
        out.poison = poison;
        Ok(out)
    }
}

/// Isotropic Gaussian blobs with centers evenly spaced on a circle in the
/// first two coordinates (on a line when `dim == 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    #[serde(default = "default_spread")]
    pub spread: f64,
    #[serde(default = "default_separation")]
    pub separation: f64,
}

fn default_spread() -> f64 {
    1.0
}

fn default_separation() -> f64 {
    3.0
}

impl BlobSpec {
    pub fn center(&self, class: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        if self.dim == 1 {
            c[0] = self.separation * (2.0 * class as f64 / (self.classes - 1).max(1) as f64 - 1.0);
        } else {
            let angle = std::f64::consts::TAU * class as f64 / self.classes as f64;
            c[0] = self.separation * angle.cos();
            c[1] = self.separation * angle.sin();
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim == 0 || self.per_class == 0 {
            return Err(Error::invalid("blobs need ≥ 2 classes, dim ≥ 1 and per_class ≥ 1"));
        }
        if !(self.spread.is_finite() && self.spread >= 0.0 && self.separation.is_finite()) {
            return Err(Error::invalid("blob spread and separation must be finite, spread ≥ 0"));
        }
        Ok(())
    }

    /// Draws `per_class` points per class, classes interleaved in index order.
    pub fn sample<T: Real>(&self, rng: &mut EpicRng) -> Result<DatasetState<T>> {
        self.validate()?;
        let centers: Vec<Vec<f64>> = (0..self.classes).map(|c| self.center(c)).collect();
        let mut features = Vec::with_capacity(self.classes * self.per_class * self.dim);
        let mut labels = Vec::with_capacity(self.classes * self.per_class);
        for _ in 0..self.per_class {
            for (c, center) in centers.iter().enumerate() {
                for &mu in center {
                    let z: f64 = StandardNormal.sample(rng);
                    features.push(T::lit(mu + self.spread * z));
                }
                labels.push(c);
            }
        }
        DatasetState::new(self.dim, self.classes, features, labels)
    }

    pub fn generate<T: Real>(&self, seed: u64) -> Result<DatasetState<T>> {
        self.sample(&mut seeded(seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetState<f64> {
        DatasetState::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]], vec![0, 1, 0, 1], 2).unwrap()
    }

    #[test]
    fn drops_are_permanent_and_partition_the_universe() {
        let mut d = tiny();
        let rec = DropRecord { index: 2, epoch: 3, class: 0, medoid_rank: 1 };
        d.drop_examples(&[rec]).unwrap();
        assert_eq!(d.active(), &[0, 1, 3]);
        assert_eq!(d.dropped(), &[rec]);
        assert!(d.drop_examples(&[rec]).is_err());
        let mut all: Vec<usize> = d.active().to_vec();
        all.extend(d.dropped().iter().map(|r| r.index));
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert_eq!(d.class_positions(0), vec![0]);
        assert_eq!(d.active_count(1), 2);
    }

    #[test]
    fn rejects_bad_labels_and_shapes() {
        assert!(DatasetState::<f64>::new(1, 2, vec![0.0, 1.0], vec![0, 2]).is_err());
        assert!(DatasetState::<f64>::new(2, 2, vec![0.0, 1.0, 2.0], vec![0, 1]).is_err());
        assert!(DatasetState::<f64>::new(1, 2, vec![f64::NAN], vec![0]).is_err());
        assert!(tiny().with_poison_mask(vec![false; 3]).is_err());
    }

    #[test]
    fn blobs_are_reproducible() {
        let spec = BlobSpec { classes: 3, dim: 2, per_class: 5, spread: 0.5, separation: 4.0 };
        let a: DatasetState<f64> = spec.generate(9).unwrap();
        let b: DatasetState<f64> = spec.generate(9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 15);
        assert_eq!(a.labels()[..3], [0, 1, 2]);
    }
}
