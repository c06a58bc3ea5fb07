//! Named parameter registry.
//!
//! Layouts (mixer, block, model) hold [`ParamId`]s into one [`ParamStore`].
//! Binding a store to a tape creates one variable per parameter, so every
//! consumer of a given id reads the same tape node.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::{numel, Element, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-bound, bound)`.
    Uniform(f64),
    /// `N(0, std²)`.
    Normal(f64),
    /// Row-independent `ln(j + 1)` along the last axis, so `-exp` gives `-(1..=n)`.
    LogRange,
    /// Inverse softplus of a step drawn log-uniformly from `[min, max]`.
    InverseSoftplusLogUniform { min: f64, max: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.into(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

/// Accumulates specs and hands out ids in registration order.
#[derive(Debug, Clone, Default)]
pub struct SpecBuilder {
    specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> ParamId {
        self.specs.push(ParamSpec::new(name, shape, init));
        ParamId(self.specs.len() - 1)
    }

    pub fn finish(self) -> Vec<ParamSpec> {
        self.specs
    }
}

fn init_values(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = spec.numel();
    match spec.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Uniform(bound) => (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| dist.sample(rng)).collect()
        }
        Init::LogRange => {
            let cols = *spec.shape.last().unwrap_or(&1);
            (0..n).map(|i| ((i % cols) as f64 + 1.0).ln()).collect()
        }
        Init::InverseSoftplusLogUniform { min, max } => (0..n)
            .map(|_| {
                let dt = (min.ln() + rng.gen::<f64>() * (max.ln() - min.ln())).exp();
                // softplus⁻¹(dt) = dt + ln(1 − e^{−dt})
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect(),
    }
}

/// Ordered `(name, tensor)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Element> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    /// Draws every parameter from one seeded stream, in spec order.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let values = init_values(spec, &mut rng);
            names.push(spec.name.clone());
            tensors.push(Tensor::from_f64(spec.shape.clone(), &values)?);
        }
        Ok(Self { names, tensors })
    }

    /// Builds a store from explicit tensors, checked against `specs`.
    pub fn from_tensors(specs: &[ParamSpec], tensors: Vec<Tensor<T>>) -> Result<Self> {
        if specs.len() != tensors.len() {
            return Err(TensorError::invalid(
                "params",
                format!("expected {} tensors, got {}", specs.len(), tensors.len()),
            ));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "params",
                    lhs: s.shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            names: specs.iter().map(|s| s.name.clone()).collect(),
            tensors,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let old = &self.tensors[id.0];
        if old.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "params",
                lhs: old.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn total_numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }
}

/// Parameters registered on one tape, indexed by [`ParamId`].
pub struct Bound<'t, T> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Element> Bound<'t, T> {
    /// Uses `vars` as the parameters, in store order.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Gradient of every parameter, in store order.
    pub fn grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        let mut b = SpecBuilder::new();
        b.add("w", [3, 4], Init::Uniform(0.5));
        b.add("a_log", [2, 3], Init::LogRange);
        b.add("dt", [64], Init::InverseSoftplusLogUniform { min: 1e-3, max: 1e-1 });
        b.finish()
    }

    #[test]
    fn init_is_seeded() {
        let a = ParamStore::<f32>::init(&specs(), 3).unwrap();
        let b = ParamStore::<f32>::init(&specs(), 3).unwrap();
        let c = ParamStore::<f32>::init(&specs(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.total_numel(), 12 + 6 + 64);
    }

    #[test]
    fn log_range_gives_negative_integer_spectrum() {
        let s = ParamStore::<f64>::init(&specs(), 0).unwrap();
        let a: Vec<f64> = s.get(ParamId(1)).data().iter().map(|v| -v.exp()).collect();
        for (got, want) in a.iter().zip([-1.0, -2.0, -3.0, -1.0, -2.0, -3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn dt_bias_maps_into_range() {
        let s = ParamStore::<f64>::init(&specs(), 0).unwrap();
        for &b in s.get(ParamId(2)).data() {
            let dt = crate::autodiff::kernels::softplus(b);
            assert!((1e-3 - 1e-12..=1e-1 + 1e-12).contains(&dt), "{dt}");
        }
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut s = ParamStore::<f64>::init(&specs(), 0).unwrap();
        assert!(s.set(ParamId(0), Tensor::zeros([4, 3]).unwrap()).is_err());
        assert!(s.set(ParamId(0), Tensor::zeros([3, 4]).unwrap()).is_ok());
        assert_eq!(s.id_of("dt"), Some(ParamId(2)));
    }
}
