//! Parameter storage and the composite layers the detector is built from.
//!
//! Parameters live in a [`ParamStore`] as named `f32` buffers. A forward pass
//! goes through a [`Ctx`], which turns stored buffers into leaf tensors of
//! the compute precision on first use, remembers those leaves so gradients
//! can be read back by name, and collects batch-norm running-stat updates.

mod attention;
pub(crate) mod blocks;
mod store;

pub use attention::{
    ca_reduced_channels, cascade_ca, coordinate_attention, coordinate_attention_with_gates, CaGates, CaSpec,
};
pub use blocks::{
    conv, conv_bn_act, conv_flops, csp_block, sppf_block, BlockParams, ConvBnActSpec, ConvSpec, CspSpec, SppfSpec,
};
pub use store::{Init, Param, ParamSpec, ParamStore};

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::ops::{BnMode, RunningStats};
use crate::tensor::{Float, Tensor};

/// Forward-pass context over a parameter store.
pub struct Ctx<'a, T: Float = f32> {
    store: &'a ParamStore,
    train: bool,
    track_grads: bool,
    leaves: RefCell<BTreeMap<String, Tensor<T>>>,
    overrides: BTreeMap<String, Tensor<T>>,
    stats: RefCell<BTreeMap<String, RunningStats>>,
}

impl<'a, T: Float> Ctx<'a, T> {
    /// Inference: batch norm uses running statistics and no graph is recorded.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, false, false)
    }

    /// Training: trainable parameters require gradients and batch norm of
    /// trainable layers uses batch statistics. Layers whose parameters are
    /// all frozen run their batch norm in eval mode.
    pub fn train(store: &'a ParamStore) -> Self {
        Self::new(store, true, true)
    }

    /// Eval-mode batch norm, but trainable parameters still require gradients.
    pub fn eval_with_grads(store: &'a ParamStore) -> Self {
        Self::new(store, false, true)
    }

    fn new(store: &'a ParamStore, train: bool, track_grads: bool) -> Self {
        Self {
            store,
            train,
            track_grads,
            leaves: RefCell::new(BTreeMap::new()),
            overrides: BTreeMap::new(),
            stats: RefCell::new(BTreeMap::new()),
        }
    }

    /// Uses `value` in place of the stored parameter `name`; used to run
    /// finite-difference checks against a single parameter.
    pub fn with_override(mut self, name: &str, value: Tensor<T>) -> Self {
        self.overrides.insert(name.to_string(), value);
        self
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Leaf tensor for a stored parameter, created once per context.
    pub fn param(&self, name: &str) -> Result<Tensor<T>> {
        if let Some(t) = self.overrides.get(name) {
            return Ok(t.clone());
        }
        if let Some(t) = self.leaves.borrow().get(name) {
            return Ok(t.clone());
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::Internal(format!("unknown parameter {name}")))?;
        let data = p.data.iter().map(|&v| T::of(v as f64)).collect();
        let mut t = Tensor::new(&p.shape, data)?;
        if self.track_grads && p.trainable {
            t = t.requires_grad();
        }
        self.leaves.borrow_mut().insert(name.to_string(), t.clone());
        Ok(t)
    }

    /// Batch-norm mode for the layer whose gamma is `gamma_name`.
    pub(crate) fn bn_mode(&self, gamma_name: &str) -> BnMode {
        let trainable = self.store.get(gamma_name).is_some_and(|p| p.trainable);
        if self.train && trainable {
            BnMode::Train
        } else {
            BnMode::Eval
        }
    }

    /// Current running statistics for `name`, including updates made earlier
    /// in this pass.
    pub(crate) fn running_stats(&self, name: &str) -> Result<RunningStats> {
        if let Some(s) = self.stats.borrow().get(name) {
            return Ok(s.clone());
        }
        self.store
            .stats(name)
            .cloned()
            .ok_or_else(|| Error::Internal(format!("unknown running statistics {name}")))
    }

    pub(crate) fn update_stats(&self, name: &str, stats: RunningStats) {
        self.stats.borrow_mut().insert(name.to_string(), stats);
    }

    /// Leaves created so far, by parameter name.
    pub fn leaves(&self) -> BTreeMap<String, Tensor<T>> {
        self.leaves.borrow().clone()
    }

    /// Gradients accumulated in the parameter leaves, by name. Parameters that
    /// received no gradient are omitted.
    pub fn grads(&self) -> BTreeMap<String, Vec<T>> {
        self.leaves
            .borrow()
            .iter()
            .filter_map(|(k, t)| t.grad().map(|g| (k.clone(), g)))
            .collect()
    }

    /// Running-statistics updates produced by training-mode batch norm.
    pub fn take_stats(&self) -> BTreeMap<String, RunningStats> {
        std::mem::take(&mut *self.stats.borrow_mut())
    }
}
