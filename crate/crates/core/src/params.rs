//! Named parameter storage and the gradients that flow back into it.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owns every trainable tensor of a model, addressable by id or by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Parameters in name order; the order used for serialization.
    pub fn sorted(&self) -> impl Iterator<Item = (&str, &Tensor)> + '_ {
        self.index
            .iter()
            .map(|(name, id)| (name.as_str(), &self.tensors[id.0]))
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Round every value to `f32` and back, matching checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// FNV-1a over the exact bit patterns of one tensor.
    pub fn checksum(&self, id: ParamId) -> u64 {
        bit_checksum(self.tensors[id.0].data())
    }
}

pub(crate) fn bit_checksum(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Dense gradient for one parameter plus the set of elements the forward
/// pass actually read. Elements never read are exactly zero and untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub grad: Vec<f64>,
    pub touched: Vec<bool>,
}

impl ParamGrad {
    pub fn zeros(len: usize) -> Self {
        ParamGrad {
            grad: vec![0.0; len],
            touched: vec![false; len],
        }
    }
}

/// Gradients for a whole [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamGrads {
    entries: Vec<Option<ParamGrad>>,
}

impl ParamGrads {
    pub fn new(num_params: usize) -> Self {
        ParamGrads {
            entries: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ParamGrad> {
        self.entries.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn entry_mut(&mut self, id: ParamId, len: usize) -> &mut ParamGrad {
        if self.entries.len() <= id.0 {
            self.entries.resize(id.0 + 1, None);
        }
        self.entries[id.0].get_or_insert_with(|| ParamGrad::zeros(len))
    }

    /// Element-wise sum of gradients and union of touched sets.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (i, g) in other.entries.iter().enumerate() {
            let Some(g) = g else { continue };
            let dst = self.entry_mut(ParamId(i), g.grad.len());
            for (d, s) in dst.grad.iter_mut().zip(&g.grad) {
                *d += s;
            }
            for (d, s) in dst.touched.iter_mut().zip(&g.touched) {
                *d |= s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.entries.iter_mut().flatten() {
            for v in &mut g.grad {
                *v *= factor;
            }
        }
    }

    /// Ids of parameters with at least one touched element, ascending.
    pub fn touched_ids(&self) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, g)| g.as_ref().is_some_and(|g| g.touched.iter().any(|&t| t)))
            .map(|(i, _)| ParamId(i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn sorted_iteration_is_by_name() {
        let mut s = ParamStore::new();
        s.insert("z", Tensor::zeros(&[1])).unwrap();
        s.insert("a", Tensor::zeros(&[1])).unwrap();
        let names: Vec<_> = s.sorted().map(|(n, _)| n).collect();
        assert_eq!(names, ["a", "z"]);
    }

    #[test]
    fn accumulate_sums_and_unions() {
        let mut a = ParamGrads::new(1);
        let e = a.entry_mut(ParamId(0), 2);
        e.grad[0] = 1.0;
        e.touched[0] = true;
        let mut b = ParamGrads::new(1);
        let e = b.entry_mut(ParamId(0), 2);
        e.grad = vec![2.0, 3.0];
        e.touched[1] = true;
        a.accumulate(&b);
        let g = a.get(ParamId(0)).unwrap();
        assert_eq!(g.grad, vec![3.0, 3.0]);
        assert_eq!(g.touched, vec![true, true]);
    }
}
