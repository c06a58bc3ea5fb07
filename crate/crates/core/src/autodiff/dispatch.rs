//! Name-based access to the primitive set, used by the verification suites
//! to sweep every primitive uniformly.

use super::{Tape, Var};
use crate::ssm::BDiscretization;
use crate::tensor::{Element, Result, TensorError};

/// Every primitive accepted by [`Tape::apply`].
pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "exp",
    "log",
    "softplus",
    "silu",
    "sigmoid",
    "matmul",
    "transpose",
    "reshape",
    "softmax",
    "layer_norm",
    "mean",
    "sum",
    "conv2d",
    "causal_conv1d",
    "concat",
    "slice",
    "gather_rows",
    "selective_scan",
    "cross_entropy",
];

/// Per-primitive parameters; only the fields a primitive reads need be set.
#[derive(Debug, Clone, Default)]
pub struct Attrs {
    pub axis: Option<usize>,
    pub factor: Option<f64>,
    pub shape: Option<Vec<usize>>,
    pub start: Option<usize>,
    pub end: Option<usize>,
    pub index: Option<Vec<usize>>,
    pub stride: Option<usize>,
    pub eps: Option<f64>,
    pub labels: Option<Vec<usize>>,
    pub policy: Option<BDiscretization>,
}

fn need<V: Clone>(op: &'static str, name: &str, v: &Option<V>) -> Result<V> {
    v.clone()
        .ok_or_else(|| TensorError::invalid(op, format!("missing attribute `{name}`")))
}

impl<T: Element> Tape<T> {
    /// Applies primitive `op` to `inputs`.
    pub fn apply<'t>(&'t self, op: &str, inputs: &[Var<'t, T>], attrs: &Attrs) -> Result<Var<'t, T>> {
        let Some(&name) = PRIMITIVES.iter().find(|&&p| p == op) else {
            return Err(TensorError::UnknownOp(op.to_string()));
        };
        let arity = match name {
            "add" | "sub" | "mul" | "matmul" => Some(2),
            "layer_norm" | "conv2d" | "causal_conv1d" => Some(3),
            "selective_scan" => Some(6),
            "concat" => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(TensorError::invalid(
                    name,
                    format!("expected {n} inputs, got {}", inputs.len()),
                ));
            }
        }
        let x = || inputs[0];
        match name {
            "add" => x().add(inputs[1]),
            "sub" => x().sub(inputs[1]),
            "mul" => x().mul(inputs[1]),
            "scale" => Ok(x().scale(need(name, "factor", &attrs.factor)?)),
            "neg" => Ok(x().neg()),
            "exp" => Ok(x().exp()),
            "log" => Ok(x().ln()),
            "softplus" => Ok(x().softplus()),
            "silu" => Ok(x().silu()),
            "sigmoid" => Ok(x().sigmoid()),
            "matmul" => x().matmul(inputs[1]),
            "transpose" => x().transpose(),
            "reshape" => x().reshape(need(name, "shape", &attrs.shape)?),
            "softmax" => x().softmax(need(name, "axis", &attrs.axis)?),
            "layer_norm" => x().layer_norm(inputs[1], inputs[2], attrs.eps.unwrap_or(1e-5)),
            "mean" => x().mean(need(name, "axis", &attrs.axis)?),
            "sum" => Ok(x().sum()),
            "conv2d" => x().conv2d(inputs[1], inputs[2], need(name, "stride", &attrs.stride)?),
            "causal_conv1d" => x().causal_conv1d(inputs[1], inputs[2]),
            "concat" => self.concat(inputs, need(name, "axis", &attrs.axis)?),
            "slice" => x().slice(
                need(name, "axis", &attrs.axis)?,
                need(name, "start", &attrs.start)?,
                need(name, "end", &attrs.end)?,
            ),
            "gather_rows" => x().gather_rows(&need(name, "index", &attrs.index)?),
            "selective_scan" => self.selective_scan(
                inputs[0],
                inputs[1],
                inputs[2],
                inputs[3],
                inputs[4],
                inputs[5],
                attrs.policy.unwrap_or_default(),
            ),
            "cross_entropy" => x().cross_entropy(&need(name, "labels", &attrs.labels)?),
            _ => unreachable!("every listed primitive is dispatched"),
        }
    }
}
