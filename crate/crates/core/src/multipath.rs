//! Multi-path activation block: the same mixer runs over forward, reversed and
//! shuffled copies of the sequence; outputs are put back in the original order
//! and fused by a softmax gate computed from their pooled features.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::mixer::{mixer_forward, MixerConfig, MixerLayout};
use crate::params::{Bound, Init, ParamId, SpecBuilder};
use crate::ssm::BDiscretization;
use crate::tensor::{Element, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PathKind {
    Forward,
    Reverse,
    Shuffle,
}

impl PathKind {
    pub const ALL: [PathKind; 3] = [PathKind::Forward, PathKind::Reverse, PathKind::Shuffle];
}

/// Which paths a block runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathSet {
    Forward,
    ForwardReverse,
    All,
}

impl PathSet {
    pub fn kinds(self) -> &'static [PathKind] {
        match self {
            PathSet::Forward => &PathKind::ALL[..1],
            PathSet::ForwardReverse => &PathKind::ALL[..2],
            PathSet::All => &PathKind::ALL,
        }
    }
}

/// How path outputs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    Mean,
    Gate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    order: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let mut inverse = vec![usize::MAX; order.len()];
        for (i, &o) in order.iter().enumerate() {
            if o >= order.len() || inverse[o] != usize::MAX {
                return Err(TensorError::invalid("permutation", format!("{order:?} is not a bijection")));
            }
            inverse[o] = i;
        }
        Ok(Self { order, inverse })
    }

    pub fn identity(len: usize) -> Self {
        let order: Vec<usize> = (0..len).collect();
        Self {
            inverse: order.clone(),
            order,
        }
    }

    pub fn reversed(len: usize) -> Self {
        let order: Vec<usize> = (0..len).rev().collect();
        Self {
            inverse: order.clone(),
            order,
        }
    }

    /// Fisher-Yates shuffle driven by `seed`.
    pub fn shuffled(len: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self::from_order(order).expect("a shuffle is a bijection")
    }

    pub fn for_path(kind: PathKind, len: usize, shuffle_seed: u64) -> Self {
        match kind {
            PathKind::Forward => Self::identity(len),
            PathKind::Reverse => Self::reversed(len),
            PathKind::Shuffle => Self::shuffled(len, shuffle_seed),
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a tuple of integers into one seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Source of the shuffle-path permutation.
///
/// Training draws a fresh permutation per block and forward pass. Evaluation
/// fixes it as a function of `(seed, layer, L)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShuffleSeed {
    Train { run_seed: u64, step: u64, sample: u64 },
    Eval { seed: u64 },
}

impl ShuffleSeed {
    pub fn permutation(&self, layer: usize, len: usize) -> Permutation {
        let seed = match *self {
            ShuffleSeed::Train { run_seed, step, sample } => {
                mix_seed(&[1, run_seed, step, sample, layer as u64])
            }
            ShuffleSeed::Eval { seed } => mix_seed(&[2, seed, layer as u64, len as u64]),
        };
        Permutation::shuffled(len, seed)
    }
}

fn check_rows<T: Element>(op: &'static str, x: &Var<'_, T>, perm: &Permutation) -> Result<()> {
    let rows = x.shape().first().copied().unwrap_or(0);
    if rows != perm.len() {
        return Err(TensorError::invalid(
            op,
            format!("permutation of length {} applied to {rows} rows", perm.len()),
        ));
    }
    Ok(())
}

/// Row `i` of the output is row `order[i]` of `x`.
pub fn apply_path<'t, T: Element>(x: Var<'t, T>, perm: &Permutation) -> Result<Var<'t, T>> {
    check_rows("apply_path", &x, perm)?;
    x.gather_rows(perm.order())
}

pub fn revert_path<'t, T: Element>(x: Var<'t, T>, perm: &Permutation) -> Result<Var<'t, T>> {
    check_rows("revert_path", &x, perm)?;
    x.gather_rows(perm.inverse())
}

/// Softmax over `k` logits from the sequence-mean of the concatenated paths.
/// `weight` is `[k·d, k]`, `bias` is `[k]`; returns `[k]`.
pub fn gate_weights<'t, T: Element>(
    tape: &'t Tape<T>,
    reverted: &[Var<'t, T>],
    weight: Var<'t, T>,
    bias: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let first = reverted
        .first()
        .ok_or_else(|| TensorError::invalid("gate", "no paths"))?
        .shape();
    for r in &reverted[1..] {
        if r.shape() != first {
            return Err(TensorError::ShapeMismatch {
                op: "gate",
                lhs: first,
                rhs: r.shape(),
            });
        }
    }
    let k = reverted.len();
    let pooled = tape.concat(reverted, 1)?.mean(0)?;
    let width = pooled.shape()[0];
    pooled
        .reshape([1, width])?
        .matmul(weight)?
        .add(bias)?
        .softmax(1)?
        .reshape([k])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub mixer: MixerConfig,
    pub paths: PathSet,
    pub fusion: Fusion,
    pub pre_norm: bool,
    pub b_discretization: BDiscretization,
}

impl BlockConfig {
    fn has_gate(&self) -> bool {
        self.fusion == Fusion::Gate && self.paths.kinds().len() > 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    /// `(gamma, beta)` of the pre-norm.
    pub norm: Option<(ParamId, ParamId)>,
    pub mixer: MixerLayout,
    /// `(weight [k·d, k], bias [k])`.
    pub gate: Option<(ParamId, ParamId)>,
}

impl BlockLayout {
    pub fn register(b: &mut SpecBuilder, prefix: &str, cfg: &BlockConfig) -> Self {
        let d = cfg.mixer.hidden_size;
        let norm = cfg.pre_norm.then(|| {
            (
                b.add(format!("{prefix}.norm.gamma"), [d], Init::Ones),
                b.add(format!("{prefix}.norm.beta"), [d], Init::Zeros),
            )
        });
        let mixer = MixerLayout::register(b, &format!("{prefix}.mixer"), &cfg.mixer);
        let gate = cfg.has_gate().then(|| {
            let k = cfg.paths.kinds().len();
            (
                b.add(
                    format!("{prefix}.gate.weight"),
                    [k * d, k],
                    Init::Uniform(1.0 / ((k * d) as f64).sqrt()),
                ),
                b.add(format!("{prefix}.gate.bias"), [k], Init::Zeros),
            )
        });
        Self { norm, mixer, gate }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Block output before the residual connection.
///
/// `shuffle` is only read when the block runs the shuffle path.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<'t, T: Element>(
    tape: &'t Tape<T>,
    params: &Bound<'t, T>,
    layout: &BlockLayout,
    cfg: &BlockConfig,
    x: Var<'t, T>,
    shuffle: &Permutation,
    label: &str,
) -> Result<Var<'t, T>> {
    let len = x.shape().first().copied().unwrap_or(0);
    let h = match layout.norm {
        Some((g, b)) => x.layer_norm(params.var(g), params.var(b), LAYER_NORM_EPS)?,
        None => x,
    };
    let mut outs = Vec::with_capacity(3);
    for &kind in cfg.paths.kinds() {
        let perm = match kind {
            PathKind::Shuffle => shuffle.clone(),
            other => Permutation::for_path(other, len, 0),
        };
        let routed = apply_path(h, &perm)?;
        let y = mixer_forward(tape, params, &layout.mixer, &cfg.mixer, cfg.b_discretization, routed, label)?;
        outs.push(revert_path(y, &perm)?);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    match layout.gate {
        Some((w, b)) => {
            let g = gate_weights(tape, &outs, params.var(w), params.var(b))?;
            let mut acc: Option<Var<'t, T>> = None;
            for (k, y) in outs.iter().enumerate() {
                let term = y.mul(g.slice(0, k, k + 1)?)?;
                acc = Some(match acc {
                    Some(a) => a.add(term)?,
                    None => term,
                });
            }
            Ok(acc.expect("at least two paths"))
        }
        None => {
            let mut acc = outs[0];
            for y in &outs[1..] {
                acc = acc.add(*y)?;
            }
            Ok(acc.scale(1.0 / outs.len() as f64))
        }
    }
}

/// Convenience for tests and tools: applies a permutation to a plain tensor.
pub fn permute_rows<T: Element>(x: &Tensor<T>, perm: &Permutation) -> Result<Tensor<T>> {
    let tape = Tape::new();
    Ok(apply_path(tape.constant(x.clone()), perm)?.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn permutation_inverse_and_validation() {
        let p = Permutation::from_order(vec![2, 0, 1]).unwrap();
        assert_eq!(p.inverse(), &[1, 2, 0]);
        assert!(Permutation::from_order(vec![0, 0, 1]).is_err());
        assert!(Permutation::from_order(vec![0, 3]).is_err());
        let s = Permutation::shuffled(50, 9);
        for (i, &o) in s.order().iter().enumerate() {
            assert_eq!(s.inverse()[o], i);
        }
    }

    #[test]
    fn reverse_path_on_three_rows() {
        let x = Tensor::<f64>::from_f64([3, 1], &[1.0, 2.0, 3.0]).unwrap();
        let y = permute_rows(&x, &Permutation::reversed(3)).unwrap();
        assert_eq!(y.data(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn shuffle_seed_policy() {
        let eval = ShuffleSeed::Eval { seed: 4 };
        assert_eq!(eval.permutation(1, 30), eval.permutation(1, 30));
        assert_ne!(eval.permutation(1, 30), eval.permutation(2, 30));
        let t = |step| ShuffleSeed::Train {
            run_seed: 4,
            step,
            sample: 0,
        };
        assert_ne!(t(0).permutation(0, 30), t(1).permutation(0, 30));
    }

    #[test]
    fn gate_zero_is_uniform_and_bias_dominates() {
        let tape = Tape::<f64>::new();
        let y = tape.constant(Tensor::from_f64([2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap());
        let w = tape.constant(Tensor::zeros([6, 3]).unwrap());
        let g = gate_weights(&tape, &[y, y, y], w, tape.constant(Tensor::zeros([3]).unwrap())).unwrap();
        for &v in g.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let bias = tape.constant(Tensor::from_f64([3], &[10.0, 0.0, 0.0]).unwrap());
        let g = gate_weights(&tape, &[y, y, y], w, bias).unwrap().value();
        assert!((g.data()[0] - 0.99990921).abs() < 1e-8);
        assert!((g.data()[1] - 4.5395e-5).abs() < 1e-8);
    }

    #[test]
    fn gate_rejects_mismatched_paths() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 2]).unwrap());
        let b = tape.constant(Tensor::zeros([3, 2]).unwrap());
        let w = tape.constant(Tensor::zeros([4, 2]).unwrap());
        let bias = tape.constant(Tensor::zeros([2]).unwrap());
        assert!(gate_weights(&tape, &[a, b], w, bias).is_err());
    }

    #[test]
    fn layout_has_gate_only_when_fusing_several_paths() {
        let mixer = MixerConfig {
            hidden_size: 4,
            intermediate_size: 8,
            time_step_rank: 2,
            state_size: 2,
            conv_width: 4,
        };
        let cfg = |paths, fusion| BlockConfig {
            mixer,
            paths,
            fusion,
            pre_norm: true,
            b_discretization: BDiscretization::ZeroOrderHold,
        };
        let mut b = SpecBuilder::new();
        assert!(BlockLayout::register(&mut b, "a", &cfg(PathSet::All, Fusion::Gate)).gate.is_some());
        assert!(BlockLayout::register(&mut b, "b", &cfg(PathSet::Forward, Fusion::Gate)).gate.is_none());
        assert!(BlockLayout::register(&mut b, "c", &cfg(PathSet::All, Fusion::Mean)).gate.is_none());
        let store = ParamStore::<f64>::init(&b.finish(), 0).unwrap();
        let w = store.id_of("a.gate.weight").unwrap();
        assert_eq!(store.get(w).shape(), &[12, 3]);
    }
}
