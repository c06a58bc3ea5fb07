//! Time-varying (selective) diagonal SSM scan.
//!
//! Per channel `d`, state `n` and step `t`:
//!
//! ```text
//! Ā = exp(Δ[t,d]·A[d,n])
//! B̄ = (exp(Δ·A) - 1)/A · B[t,n]      (zero-order hold)
//!   | Δ · B[t,n]                      (simplified)
//! h[t] = Ā·h[t-1] + B̄·u[t,d]
//! y[t,d] = Σₙ C[t,n]·h[t,d,n] + D[d]·u[t,d]
//! ```
//!
//! Layouts: `u`, `Δ`, `y` are `[L × D]`; `A` is `[D × N]`; `B`, `C` are `[L × N]`.

use serde::{Deserialize, Serialize};

use super::SsmError;
use crate::tensor::{Element, Tensor};

/// How the input matrix is discretized inside the selective scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BDiscretization {
    /// Exact zero-order hold, `(exp(ΔA) - 1)/A · B`.
    #[default]
    ZeroOrderHold,
    /// First-order `Δ·B`.
    Simplified,
}

#[derive(Debug, Clone)]
pub struct SelectiveScanInput<T: Element> {
    pub u: Tensor<T>,
    pub delta: Tensor<T>,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
    pub d_skip: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

fn expect_shape(what: &'static str, got: &[usize], expected: &[usize]) -> Result<(), SsmError> {
    if got != expected {
        return Err(SsmError::Shape {
            what,
            expected: expected.to_vec(),
            got: got.to_vec(),
        });
    }
    Ok(())
}

/// Validates the layouts of a scan's operands and returns its extents.
pub fn scan_dims(
    u: &[usize],
    delta: &[usize],
    a: &[usize],
    b: &[usize],
    c: &[usize],
    d_skip: &[usize],
) -> Result<ScanDims, SsmError> {
    if u.len() != 2 {
        return Err(SsmError::Shape {
            what: "u",
            expected: vec![0, 0],
            got: u.to_vec(),
        });
    }
    if a.len() != 2 {
        return Err(SsmError::Shape {
            what: "A",
            expected: vec![u[1], 0],
            got: a.to_vec(),
        });
    }
    let dims = ScanDims {
        len: u[0],
        channels: u[1],
        state: a[1],
    };
    if dims.len == 0 {
        return Err(SsmError::EmptySequence);
    }
    expect_shape("delta", delta, &[dims.len, dims.channels])?;
    expect_shape("A", a, &[dims.channels, dims.state])?;
    expect_shape("B", b, &[dims.len, dims.state])?;
    expect_shape("C", c, &[dims.len, dims.state])?;
    expect_shape("D", d_skip, &[dims.channels])?;
    Ok(dims)
}

impl<T: Element> SelectiveScanInput<T> {
    pub fn dims(&self) -> Result<ScanDims, SsmError> {
        scan_dims(
            self.u.shape(),
            self.delta.shape(),
            self.a.shape(),
            self.b.shape(),
            self.c.shape(),
            self.d_skip.shape(),
        )
    }
}

/// Runs the selective scan with a zero initial state.
pub fn selective_scan<T: Element>(
    inp: &SelectiveScanInput<T>,
    policy: BDiscretization,
) -> Result<Tensor<T>, SsmError> {
    let dims = inp.dims()?;
    check_positive_steps(inp.delta.data())?;
    let (y, _) = scan_forward(
        inp.u.data(),
        inp.delta.data(),
        inp.a.data(),
        inp.b.data(),
        inp.c.data(),
        inp.d_skip.data(),
        dims,
        policy,
        false,
    );
    Ok(Tensor::from_parts(vec![dims.len, dims.channels], y))
}

pub(crate) fn check_positive_steps<T: Element>(delta: &[T]) -> Result<(), SsmError> {
    match delta.iter().position(|&v| !(v > T::zero())) {
        Some(index) => Err(SsmError::NonPositiveStep {
            index,
            value: delta[index].as_f64(),
        }),
        None => Ok(()),
    }
}

/// `(Ā, B̄ coefficient)` for one (Δ, a) pair.
#[inline]
fn discretize<T: Element>(dt: T, a: T, policy: BDiscretization) -> (T, T) {
    let x = dt * a;
    let growth = x.exp_m1();
    let decay = growth + T::one();
    let coef = match policy {
        BDiscretization::ZeroOrderHold => {
            if x == T::zero() {
                dt
            } else {
                dt * (growth / x)
            }
        }
        BDiscretization::Simplified => dt,
    };
    (decay, coef)
}

/// `(x·eˣ - eˣ + 1)/x²`, the scaled derivative of the ZOH coefficient w.r.t. `a`.
#[inline]
fn zoh_curvature<T: Element>(x: T, decay: T, ratio: T) -> T {
    if x.abs() < T::of(0.1) {
        // Σ_{m≥2} (m-1)/m! x^(m-2)
        let c = [
            1.0 / 2.0,
            1.0 / 3.0,
            1.0 / 8.0,
            1.0 / 30.0,
            1.0 / 144.0,
            1.0 / 840.0,
            1.0 / 5760.0,
            1.0 / 45360.0,
            1.0 / 403200.0,
            1.0 / 3991680.0,
        ];
        let mut acc = T::zero();
        for &k in c.iter().rev() {
            acc = acc * x + T::of(k);
        }
        acc
    } else {
        // ratio = (eˣ - 1)/x
        (decay - ratio) / x
    }
}

/// Saved forward quantities needed by the backward pass, each `[L × D × N]`.
#[derive(Debug, Clone)]
pub(crate) struct ScanTrace<T> {
    pub states: Vec<T>,
    pub decay: Vec<T>,
    pub coef: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_forward<T: Element>(
    u: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d_skip: &[T],
    dims: ScanDims,
    policy: BDiscretization,
    keep_trace: bool,
) -> (Vec<T>, Option<ScanTrace<T>>) {
    let ScanDims {
        len,
        channels,
        state,
    } = dims;
    let mut y = vec![T::zero(); len * channels];
    let mut h = vec![T::zero(); channels * state];
    let mut trace = keep_trace.then(|| ScanTrace {
        states: Vec::with_capacity(len * channels * state),
        decay: Vec::with_capacity(len * channels * state),
        coef: Vec::with_capacity(len * channels * state),
    });
    for t in 0..len {
        let bt = &b[t * state..(t + 1) * state];
        let ct = &c[t * state..(t + 1) * state];
        for d in 0..channels {
            let dt = delta[t * channels + d];
            let ut = u[t * channels + d];
            let ad = &a[d * state..(d + 1) * state];
            let hd = &mut h[d * state..(d + 1) * state];
            let mut acc = T::zero();
            for n in 0..state {
                let (decay, coef) = discretize(dt, ad[n], policy);
                hd[n] = decay * hd[n] + coef * bt[n] * ut;
                acc = acc + ct[n] * hd[n];
                if let Some(tr) = trace.as_mut() {
                    tr.decay.push(decay);
                    tr.coef.push(coef);
                }
            }
            if let Some(tr) = trace.as_mut() {
                tr.states.extend_from_slice(hd);
            }
            y[t * channels + d] = acc + d_skip[d] * ut;
        }
    }
    (y, trace)
}

pub(crate) struct ScanGrads<T> {
    pub u: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d_skip: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward<T: Element>(
    u: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d_skip: &[T],
    dims: ScanDims,
    policy: BDiscretization,
    trace: &ScanTrace<T>,
    gy: &[T],
) -> ScanGrads<T> {
    let ScanDims {
        len,
        channels,
        state,
    } = dims;
    let mut g = ScanGrads {
        u: vec![T::zero(); len * channels],
        delta: vec![T::zero(); len * channels],
        a: vec![T::zero(); channels * state],
        b: vec![T::zero(); len * state],
        c: vec![T::zero(); len * state],
        d_skip: vec![T::zero(); channels],
    };
    // Adjoint of the hidden state carried backwards in time.
    let mut gh = vec![T::zero(); channels * state];
    for t in (0..len).rev() {
        for d in 0..channels {
            let gyt = gy[t * channels + d];
            let ut = u[t * channels + d];
            let dt = delta[t * channels + d];
            g.d_skip[d] = g.d_skip[d] + gyt * ut;
            let mut gu = gyt * d_skip[d];
            let mut gdelta = T::zero();
            for n in 0..state {
                let at = (t * channels + d) * state + n;
                let h = trace.states[at];
                let h_prev = if t > 0 {
                    trace.states[at - channels * state]
                } else {
                    T::zero()
                };
                let decay = trace.decay[at];
                let coef = trace.coef[at];
                let an = a[d * state + n];
                let bn = b[t * state + n];

                g.c[t * state + n] = g.c[t * state + n] + gyt * h;
                let ghn = gh[d * state + n] + gyt * c[t * state + n];

                let g_decay = ghn * h_prev;
                let g_coef = ghn * bn * ut;
                g.b[t * state + n] = g.b[t * state + n] + ghn * coef * ut;
                gu = gu + ghn * coef * bn;

                let (dcoef_ddt, dcoef_da) = match policy {
                    BDiscretization::ZeroOrderHold => {
                        let x = dt * an;
                        let ratio = if x == T::zero() { T::one() } else { coef / dt };
                        (decay, dt * dt * zoh_curvature(x, decay, ratio))
                    }
                    BDiscretization::Simplified => (T::one(), T::zero()),
                };
                gdelta = gdelta + g_decay * an * decay + g_coef * dcoef_ddt;
                g.a[d * state + n] =
                    g.a[d * state + n] + g_decay * dt * decay + g_coef * dcoef_da;
                gh[d * state + n] = decay * ghn;
            }
            g.u[t * channels + d] = g.u[t * channels + d] + gu;
            g.delta[t * channels + d] = g.delta[t * channels + d] + gdelta;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(
        len: usize,
        channels: usize,
        state: usize,
        f: impl Fn(usize) -> f64,
    ) -> SelectiveScanInput<f64> {
        let gen = |shape: Vec<usize>, off: usize| {
            let n: usize = shape.iter().product();
            Tensor::from_f64(shape, &(0..n).map(|i| f(i + off)).collect::<Vec<_>>()).unwrap()
        };
        SelectiveScanInput {
            u: gen(vec![len, channels], 0),
            delta: gen(vec![len, channels], 100).map(|v| 0.1 + v.abs()),
            a: gen(vec![channels, state], 200).map(|v| -0.5 - v.abs()),
            b: gen(vec![len, state], 300),
            c: gen(vec![len, state], 400),
            d_skip: gen(vec![channels], 500),
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut inp = input(5, 3, 2, |i| (i as f64 * 0.7).sin());
        inp.u = Tensor::zeros([5, 3]).unwrap();
        let y = selective_scan(&inp, BDiscretization::ZeroOrderHold).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_closed_form() {
        let inp = input(1, 2, 3, |i| (i as f64 * 1.3).cos());
        let y = selective_scan(&inp, BDiscretization::ZeroOrderHold).unwrap();
        for d in 0..2 {
            let u = inp.u.data()[d];
            let dt = inp.delta.data()[d];
            let mut expect = inp.d_skip.data()[d] * u;
            for n in 0..3 {
                let a = inp.a.data()[d * 3 + n];
                let bbar = ((dt * a).exp() - 1.0) / a * inp.b.data()[n];
                expect += inp.c.data()[n] * bbar * u;
            }
            assert!((y.data()[d] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_non_positive_step() {
        let mut inp = input(3, 2, 2, |i| (i as f64).sin());
        let mut delta = inp.delta.to_f64_vec();
        delta[4] = 0.0;
        inp.delta = Tensor::from_f64([3, 2], &delta).unwrap();
        assert_eq!(
            selective_scan(&inp, BDiscretization::ZeroOrderHold),
            Err(SsmError::NonPositiveStep {
                index: 4,
                value: 0.0
            })
        );
    }

    #[test]
    fn rejects_mismatched_layouts() {
        let mut inp = input(3, 2, 2, |i| (i as f64).sin());
        inp.c = Tensor::zeros([3, 3]).unwrap();
        assert!(matches!(
            selective_scan(&inp, BDiscretization::ZeroOrderHold),
            Err(SsmError::Shape { what: "C", .. })
        ));
    }

    #[test]
    fn curvature_series_matches_direct_formula_at_switch_point() {
        for x in [-0.1f64 - 1e-9, -0.1 + 1e-9, 0.1 - 1e-9] {
            let decay = x.exp();
            let ratio = x.exp_m1() / x;
            let direct = (x * decay - decay + 1.0) / (x * x);
            assert!((zoh_curvature(x, decay, ratio) - direct).abs() < 1e-12, "{x}");
        }
    }
}
