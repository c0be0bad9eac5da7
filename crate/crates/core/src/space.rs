//! Shape vectors and the design space they are drawn from.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-layer hidden dimensions of a sub-network.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShapeVector(Vec<usize>);

impl ShapeVector {
    pub fn new(dims: Vec<usize>) -> Self {
        ShapeVector(dims)
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }

    /// Elementwise `self ≤ other`.
    pub fn le_elementwise(&self, other: &ShapeVector) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
    }

    /// `'-'`-joined dims, the form used in logs and CSV files.
    pub fn to_key(&self) -> String {
        self.0
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn parse_key(key: &str) -> Result<Self> {
        key.split(['-', ','])
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Validation(format!("bad shape component {s:?} in {key:?}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(ShapeVector)
    }
}

impl fmt::Display for ShapeVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

impl From<Vec<usize>> for ShapeVector {
    fn from(v: Vec<usize>) -> Self {
        ShapeVector(v)
    }
}

/// The allowed hidden dimensions and the number of layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpace {
    allowed_dims: Vec<usize>,
    num_layers: usize,
}

impl DesignSpace {
    pub fn new(allowed_dims: Vec<usize>, num_layers: usize) -> Result<Self> {
        let space = DesignSpace {
            allowed_dims,
            num_layers,
        };
        space.validate()?;
        Ok(space)
    }

    /// The 7-option, 12-layer space used with a BERT-base sized backbone.
    pub fn bert_base() -> Self {
        DesignSpace {
            allowed_dims: vec![120, 240, 360, 480, 540, 600, 768],
            num_layers: 12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.allowed_dims.is_empty() {
            return Err(Error::Validation("design space has no allowed dims".into()));
        }
        if self.num_layers == 0 {
            return Err(Error::Validation("design space has no layers".into()));
        }
        if self.allowed_dims[0] == 0 {
            return Err(Error::Validation("allowed dims must be positive".into()));
        }
        if self.allowed_dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!(
                "allowed dims must be strictly ascending, got {:?}",
                self.allowed_dims
            )));
        }
        Ok(())
    }

    pub fn allowed_dims(&self) -> &[usize] {
        &self.allowed_dims
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn min_dim(&self) -> usize {
        self.allowed_dims[0]
    }

    pub fn max_dim(&self) -> usize {
        *self.allowed_dims.last().unwrap()
    }

    /// `|allowed_dims| ^ num_layers`, saturating.
    pub fn size(&self) -> u128 {
        (self.allowed_dims.len() as u128)
            .checked_pow(self.num_layers as u32)
            .unwrap_or(u128::MAX)
    }

    pub fn contains_dim(&self, dim: usize) -> bool {
        self.allowed_dims.binary_search(&dim).is_ok()
    }

    /// Position of `dim` in the allowed list.
    pub fn dim_index(&self, dim: usize) -> Option<usize> {
        self.allowed_dims.binary_search(&dim).ok()
    }

    pub fn check(&self, shape: &ShapeVector) -> Result<()> {
        if shape.len() != self.num_layers {
            return Err(Error::Validation(format!(
                "shape {shape} has {} layers, design space has {}",
                shape.len(),
                self.num_layers
            )));
        }
        if let Some(bad) = shape.dims().iter().find(|&&d| !self.contains_dim(d)) {
            return Err(Error::Validation(format!(
                "dim {bad} in shape {shape} not in design space {:?}",
                self.allowed_dims
            )));
        }
        Ok(())
    }

    pub fn contains(&self, shape: &ShapeVector) -> bool {
        self.check(shape).is_ok()
    }

    /// The all-max shape.
    pub fn largest(&self) -> ShapeVector {
        ShapeVector(vec![self.max_dim(); self.num_layers])
    }

    /// The all-min shape.
    pub fn smallest(&self) -> ShapeVector {
        ShapeVector(vec![self.min_dim(); self.num_layers])
    }

    pub fn uniform(&self, dim: usize) -> Result<ShapeVector> {
        let s = ShapeVector(vec![dim; self.num_layers]);
        self.check(&s)?;
        Ok(s)
    }

    /// Each layer drawn independently and uniformly from the allowed dims.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ShapeVector {
        ShapeVector(
            (0..self.num_layers)
                .map(|_| self.allowed_dims[rng.random_range(0..self.allowed_dims.len())])
                .collect(),
        )
    }

    /// Every shape in lexicographic order (odometer over dim indices).
    pub fn iter_all(&self) -> impl Iterator<Item = ShapeVector> + '_ {
        let k = self.allowed_dims.len();
        let mut idx = Some(vec![0usize; self.num_layers]);
        std::iter::from_fn(move || {
            let cur = idx.take()?;
            let shape = ShapeVector(cur.iter().map(|&i| self.allowed_dims[i]).collect());
            let mut next = cur;
            let mut pos = next.len();
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                next[pos] += 1;
                if next[pos] < k {
                    idx = Some(next);
                    break;
                }
                next[pos] = 0;
            }
            Some(shape)
        })
    }

    /// Largest allowed dim `≤ x`, clamped to the smallest allowed dim.
    pub fn snap_down(&self, x: f64) -> usize {
        let tol = 1e-9 * x.abs().max(1.0);
        self.allowed_dims
            .iter()
            .rev()
            .find(|&&d| d as f64 <= x + tol)
            .copied()
            .unwrap_or(self.min_dim())
    }

    /// Smallest allowed dim `≥ x`, clamped to the largest allowed dim.
    pub fn snap_up(&self, x: f64) -> usize {
        let tol = 1e-9 * x.abs().max(1.0);
        self.allowed_dims
            .iter()
            .find(|&&d| d as f64 >= x - tol)
            .copied()
            .unwrap_or(self.max_dim())
    }

    /// Nearest allowed dim; exact midpoints go to the larger dim.
    pub fn snap_nearest(&self, x: f64) -> usize {
        let mut best = self.allowed_dims[0];
        let mut best_dist = f64::INFINITY;
        for &d in &self.allowed_dims {
            let dist = (d as f64 - x).abs();
            if dist <= best_dist {
                best = d;
                best_dist = dist;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_bad_spaces() {
        assert!(DesignSpace::new(vec![], 3).is_err());
        assert!(DesignSpace::new(vec![4, 4], 3).is_err());
        assert!(DesignSpace::new(vec![8, 4], 3).is_err());
        assert!(DesignSpace::new(vec![4], 0).is_err());
    }

    #[test]
    fn bert_space_size() {
        assert_eq!(DesignSpace::bert_base().size(), 7u128.pow(12));
    }

    #[test]
    fn iter_all_is_lexicographic_and_complete() {
        let s = DesignSpace::new(vec![1, 2, 3], 3).unwrap();
        let all: Vec<_> = s.iter_all().collect();
        assert_eq!(all.len(), 27);
        assert!(all.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(all[0], s.smallest());
        assert_eq!(all[26], s.largest());
    }

    #[test]
    fn snapping() {
        let s = DesignSpace::new(vec![120, 240, 360], 1).unwrap();
        assert_eq!(s.snap_down(300.0), 240);
        assert_eq!(s.snap_up(300.0), 360);
        assert_eq!(s.snap_down(50.0), 120);
        assert_eq!(s.snap_up(900.0), 360);
        assert_eq!(s.snap_up(240.0000000001), 240);
        assert_eq!(s.snap_nearest(180.0), 240);
        assert_eq!(s.snap_nearest(170.0), 120);
    }

    #[test]
    fn key_round_trip() {
        let s = ShapeVector::new(vec![16, 64, 32]);
        assert_eq!(s.to_key(), "16-64-32");
        assert_eq!(ShapeVector::parse_key("16-64-32").unwrap(), s);
        assert!(ShapeVector::parse_key("16-x").is_err());
    }

    #[test]
    fn sample_single_option() {
        let s = DesignSpace::new(vec![7], 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(s.sample(&mut rng), s.largest());
        }
    }
}
