// SPDX-License-Identifier: Apache-2.0

//! Low-rank additive adapters on attention and MLP projections.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Linear, ModelConfig};
use crate::error::{LitError, Result};
use crate::tensor::{Scalar, Tensor};

/// Which block of a layer an adapter covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Attention,
    Mlp,
}

impl Module {
    pub fn linears(self) -> &'static [Linear] {
        match self {
            Module::Attention => &[Linear::Query, Linear::Key, Linear::Value, Linear::Output],
            Module::Mlp => &[Linear::Up, Linear::Down],
        }
    }
}

/// One adapted projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub layer: usize,
    pub linear: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    pub scope: BTreeSet<(usize, Module)>,
}

impl LoraSpec {
    /// Attention and MLP adapters on every layer in `layers`.
    pub fn on_layers(layers: impl IntoIterator<Item = usize>, rank: usize, alpha: f64) -> Self {
        let scope = layers
            .into_iter()
            .flat_map(|l| [(l, Module::Attention), (l, Module::Mlp)])
            .collect();
        Self { rank, alpha, scope }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn sites(&self) -> Vec<Site> {
        self.scope
            .iter()
            .flat_map(|&(layer, m)| m.linears().iter().map(move |&linear| Site { layer, linear }))
            .collect()
    }

    pub fn layers(&self) -> BTreeSet<usize> {
        self.scope.iter().map(|&(l, _)| l).collect()
    }
}

/// Factor pair for one site; the delta is `scale · A·B`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors<T: Scalar> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T: Scalar = f32> {
    pub spec: LoraSpec,
    pub factors: BTreeMap<Site, LoraFactors<T>>,
}

impl<T: Scalar> LoraAdapter<T> {
    /// Gaussian `A`, zero `B`: the initial delta is exactly zero.
    pub fn init(spec: LoraSpec, config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if spec.rank == 0 {
            return Err(LitError::Config("LoRA rank must be positive".into()));
        }
        let mut factors = BTreeMap::new();
        for site in spec.sites() {
            if site.layer >= config.n_layers {
                return Err(LitError::Layer {
                    layer: site.layer,
                    n_layers: config.n_layers,
                });
            }
            let (fan_in, fan_out) = site.linear.dims(config);
            let a = Tensor::randn(&[fan_in, spec.rank], 1.0 / (fan_in as f64).sqrt(), rng);
            let b = Tensor::zeros(&[spec.rank, fan_out]);
            factors.insert(site, LoraFactors { a, b });
        }
        Ok(Self { spec, factors })
    }

    pub fn cast<U: Scalar>(&self) -> LoraAdapter<U> {
        LoraAdapter {
            spec: self.spec.clone(),
            factors: self
                .factors
                .iter()
                .map(|(s, f)| {
                    (
                        *s,
                        LoraFactors {
                            a: f.a.cast(),
                            b: f.b.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Factor tensors in a stable order (site order, then A before B).
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.factors.values().flat_map(|f| [&f.a, &f.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.factors
            .values_mut()
            .flat_map(|f| [&mut f.a, &mut f.b])
            .collect()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.factors
            .iter()
            .flat_map(|(s, f)| {
                let base = format!("lora.{}.{}", s.layer, s.linear.name());
                [(format!("{base}.a"), &f.a), (format!("{base}.b"), &f.b)]
            })
            .collect()
    }

    /// True when every `B` factor is zero (the adapter is a no-op).
    pub fn is_identity(&self) -> bool {
        self.factors
            .values()
            .all(|f| f.b.data().iter().all(|x| x.is_zero()))
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec).expect("spec serializes"));
        let mut buf = Vec::new();
        for (name, t) in self.named_params() {
            h.update(name.as_bytes());
            buf.clear();
            t.data().iter().for_each(|&x| x.write_le(&mut buf));
            h.update(&buf);
        }
        crate::hex(&h.finalize())
    }
}
