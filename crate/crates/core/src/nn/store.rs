use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::ops::RunningStats;

/// A learnable buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    KaimingUniform {
        fan_in: usize,
    },
    Const(f32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    /// Initial values. Each parameter draws from its own stream keyed by the
    /// model seed and the parameter name, so a parameter's initial value does
    /// not depend on which other layers exist.
    pub fn initial_values(&self, seed: u64) -> Vec<f32> {
        let n: usize = self.shape.iter().product();
        match self.init {
            Init::Const(v) => vec![v; n],
            Init::KaimingUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &self.name));
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
        }
    }
}

fn stream_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

/// Named parameters plus batch-norm running statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    stats: BTreeMap<String, RunningStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.params.insert(name.into(), param);
    }

    /// Adds a trainable parameter initialized from `spec` and `seed`.
    pub fn init(&mut self, spec: &ParamSpec, seed: u64) {
        let data = spec.initial_values(seed);
        self.insert(
            spec.name.clone(),
            Param {
                shape: spec.shape.clone(),
                data,
                trainable: true,
            },
        );
    }

    pub fn stats(&self, name: &str) -> Option<&RunningStats> {
        self.stats.get(name)
    }

    pub fn set_stats(&mut self, name: impl Into<String>, stats: RunningStats) {
        self.stats.insert(name.into(), stats);
    }

    /// Stores running statistics, checking that they already exist with the
    /// same channel count.
    pub fn update_stats(&mut self, name: &str, stats: RunningStats) -> Result<()> {
        match self.stats.get_mut(name) {
            Some(s) if s.mean.len() == stats.mean.len() => {
                *s = stats;
                Ok(())
            }
            _ => Err(Error::Internal(format!(
                "running statistics {name} do not match the store"
            ))),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn all_stats(&self) -> impl Iterator<Item = (&String, &RunningStats)> {
        self.stats.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of learnable scalars; running statistics are not counted.
    pub fn count_scalars(&self) -> usize {
        self.params.values().map(Param::numel).sum()
    }

    /// Keeps only parameters and statistics whose name satisfies `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.params.retain(|k, _| keep(k));
        self.stats.retain(|k, _| keep(k));
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params.values_mut().for_each(|p| p.trainable = trainable);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_name_keyed() {
        let a = ParamSpec::new("layer.weight", &[4, 3, 3, 3], Init::KaimingUniform { fan_in: 27 });
        let b = ParamSpec::new("other.weight", &[4, 3, 3, 3], Init::KaimingUniform { fan_in: 27 });
        assert_eq!(a.initial_values(7), a.initial_values(7));
        assert_ne!(a.initial_values(7), a.initial_values(8));
        assert_ne!(a.initial_values(7), b.initial_values(7));
        let bound = 1.0 / 27f32.sqrt();
        assert!(a.initial_values(7).iter().all(|v| v.abs() <= bound));
        let c = ParamSpec::new("bn.gamma", &[5], Init::Const(1.0));
        assert_eq!(c.initial_values(0), vec![1.0; 5]);
    }

    #[test]
    fn counts_exclude_running_stats() {
        let mut s = ParamStore::new();
        s.init(&ParamSpec::new("w", &[2, 3], Init::Const(0.0)), 0);
        s.set_stats("bn", RunningStats::new(10));
        assert_eq!(s.count_scalars(), 6);
        s.retain(|n| n != "w");
        assert!(s.is_empty());
        assert!(s.stats("bn").is_some());
    }
}
