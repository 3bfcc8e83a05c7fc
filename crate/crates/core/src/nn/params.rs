//! Named parameter tensors.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::graph::{NetworkGraph, ParamRole};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> ParamTensor<T> {
    pub fn zeros(dims: Vec<usize>) -> Self {
        let len = dims.iter().product();
        ParamTensor {
            dims,
            data: vec![T::zero(); len],
        }
    }
}

/// Ordered name → tensor map. Order is insertion order and is what the
/// checkpoint format records.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<T> {
    entries: Vec<(String, ParamTensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: PartialEq> PartialEq for ParameterStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ParamTensor<T>) -> Result<()> {
        let name = name.into();
        let expected: usize = tensor.dims.iter().product();
        if tensor.data.len() != expected {
            return Err(Error::Shape(format!(
                "parameter {name}: {} values for dims {:?}",
                tensor.data.len(),
                tensor.dims
            )));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Shape(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub(crate) fn data(&self, name: &str) -> Result<&[T]> {
        self.get(name)
            .map(|t| t.data.as_slice())
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamTensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamTensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Same names and dims, all values zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = ParameterStore::new();
        for (name, t) in self.iter() {
            out.insert(name, ParamTensor::zeros(t.dims.clone()))
                .expect("names are unique");
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        let mut out = ParameterStore::new();
        for (name, t) in self.iter() {
            out.insert(
                name,
                ParamTensor {
                    dims: t.dims.clone(),
                    data: t.data.iter().map(|v| U::lit(v.as_f64())).collect(),
                },
            )
            .expect("names are unique");
        }
        out
    }

    /// Verifies that every parameter the graph needs is present with the right dims.
    pub fn check_against(&self, graph: &NetworkGraph) -> Result<()> {
        for spec in graph.params() {
            match self.get(&spec.name) {
                None => return Err(Error::Shape(format!("store lacks parameter {}", spec.name))),
                Some(t) if t.dims != spec.dims => {
                    return Err(Error::Shape(format!(
                        "parameter {} has dims {:?}, network expects {:?}",
                        spec.name, t.dims, spec.dims
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// He-normal conv weights (`std = sqrt(2 / fan_in)`), zero biases, identity
/// batch norm with running statistics `(0, 1)`.
pub fn init_parameters(graph: &NetworkGraph, seed: u64) -> ParameterStore<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    for spec in graph.params() {
        let len: usize = spec.dims.iter().product();
        let data = match spec.role {
            ParamRole::Weight { fan_in } => {
                let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt())
                    .expect("positive std");
                (0..len).map(|_| normal.sample(&mut rng) as f32).collect()
            }
            ParamRole::Bias | ParamRole::Beta | ParamRole::RunningMean => vec![0.0; len],
            ParamRole::Gamma | ParamRole::RunningVar => vec![1.0; len],
        };
        store
            .insert(
                spec.name.clone(),
                ParamTensor {
                    dims: spec.dims.clone(),
                    data,
                },
            )
            .expect("graph parameter names are unique");
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::{build_network, NetworkConfig};

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let g = build_network(&NetworkConfig::dual_scale((32, 32))).unwrap();
        let a = init_parameters(&g, 5);
        let b = init_parameters(&g, 5);
        assert_eq!(a, b);
        assert_ne!(a, init_parameters(&g, 6));
        for (name, t) in a.iter() {
            if name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with(".running_mean") {
                assert!(t.data.iter().all(|&v| v == 0.0), "{name}");
            }
            if name.ends_with(".gamma") || name.ends_with(".running_var") {
                assert!(t.data.iter().all(|&v| v == 1.0), "{name}");
            }
        }
        a.check_against(&g).unwrap();
    }

    #[test]
    fn he_std_of_3x3x64_conv() {
        let g = build_network(&NetworkConfig::plain((64, 64))).unwrap();
        let store = init_parameters(&g, 1);
        // enc1.b.conv: 64 -> 64, 3x3, fan_in = 576
        let w = &store.get("enc1.b.conv.weight").unwrap().data;
        let n = w.len() as f64;
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = (2.0f64 / 576.0).sqrt();
        assert!((std - target).abs() / target < 0.2, "std {std} vs {target}");
    }

    #[test]
    fn check_against_reports_dim_mismatch() {
        let g = build_network(&NetworkConfig::plain((32, 32))).unwrap();
        let mut store = init_parameters(&g, 0);
        store.get_mut("head.out.bias").unwrap().dims = vec![2];
        assert!(store.check_against(&g).is_err());
    }
}
