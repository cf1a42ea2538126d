//! Named parameter blocks and their initialisers.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Parameter blocks keyed by dotted name (`decoder.mapper.s3.0.weight`).
#[derive(Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    blocks: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Real> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map().entries(self.blocks.iter().map(|(k, v)| (k, v.shape()))).finish()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.blocks.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor<T>>> {
        self.blocks.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Mutable access; clones the block first if it is shared with a live forward pass.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.blocks.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.blocks.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.blocks.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.blocks.values().map(|t| t.len()).sum()
    }

    /// Scalar count of the blocks whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.blocks.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, t)| t.len()).sum()
    }

    /// Keeps only blocks accepted by `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self { blocks: self.blocks.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), v.clone())).collect() }
    }

    /// Adds every block of `other`, replacing same-named blocks.
    pub fn extend(&mut self, other: &ParamStore<T>) {
        for (k, v) in &other.blocks {
            self.blocks.insert(k.clone(), v.clone());
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { blocks: self.blocks.iter().map(|(k, v)| (k.clone(), Arc::new(v.cast()))).collect() }
    }

    /// Names of blocks whose values differ between `self` and `other`.
    pub fn changed_blocks(&self, other: &ParamStore<T>) -> Vec<String> {
        self.blocks
            .iter()
            .filter(|(k, v)| other.blocks.get(*k).is_none_or(|o| o.data() != v.data()))
            .map(|(k, _)| k.clone())
            .collect()
    }
}

/// He-normal convolution weight `out x in x k x k` and zero bias.
pub fn init_conv<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    out_ch: usize,
    in_ch: usize,
    kernel: usize,
) {
    let fan_in = (in_ch * kernel * kernel) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
    let n = out_ch * in_ch * kernel * kernel;
    let w = (0..n).map(|_| T::c(normal.sample(rng))).collect();
    store.insert(format!("{prefix}.weight"), Tensor::from_vec(&[out_ch, in_ch, kernel, kernel], w).expect("sized"));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_ch]));
}

/// Dense `rows x cols` matrix with entries drawn from `N(0, std^2)`.
pub fn init_matrix<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| T::c(normal.sample(rng))).collect()).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn changed_blocks_reports_only_edits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::<f32>::default();
        init_conv(&mut a, &mut rng, "x", 2, 3, 3);
        init_conv(&mut a, &mut rng, "y", 2, 3, 1);
        let mut b = a.clone();
        b.get_mut("y.bias").unwrap().data_mut()[0] = 1.0;
        assert_eq!(a.changed_blocks(&b), vec!["y.bias".to_string()]);
        assert_eq!(a.num_scalars(), 2 * 27 + 2 + 2 * 3 + 2);
    }

    #[test]
    fn missing_block_is_named() {
        let store = ParamStore::<f32>::default();
        let err = store.get("decoder.classifier.weight").unwrap_err();
        assert!(err.to_string().contains("decoder.classifier.weight"));
    }
}
