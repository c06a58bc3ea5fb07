//! State-space kernels: zero-order-hold discretization of a continuous
//! linear time-invariant system, its recurrent and convolutional
//! realizations, and the time-varying selective scan used by the mixer.
//!
//! The LTI routines work in `f64`; they exist as the reference against which
//! the selective scan is validated.

mod selective;

pub use selective::{
    scan_dims, selective_scan, BDiscretization, ScanDims, SelectiveScanInput,
};
pub(crate) use selective::{check_positive_steps, scan_backward, scan_forward, ScanTrace};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SsmError {
    #[error("sequence must contain at least one step")]
    EmptySequence,
    #[error("time scale must be positive and finite, got {0}")]
    InvalidTimeScale(f64),
    #[error("state matrix is singular (entry {index} of the diagonal is zero)")]
    SingularDiagonal { index: usize },
    #[error("state matrix is singular")]
    Singular,
    #[error("diagonal entry {index} = {value} is not strictly negative")]
    Unstable { index: usize, value: f64 },
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("step size at flat index {index} is not positive ({value})")]
    NonPositiveStep { index: usize, value: f64 },
    #[error("kernel has {kernel} taps but the sequence has {len} steps")]
    KernelLength { kernel: usize, len: usize },
}

/// State matrix of an LTI system, stored diagonally or densely.
#[derive(Debug, Clone, PartialEq)]
pub enum StateMatrix {
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

impl StateMatrix {
    pub fn order(&self) -> usize {
        match self {
            StateMatrix::Diagonal(d) => d.len(),
            StateMatrix::Dense(m) => m.nrows(),
        }
    }

    fn apply(&self, h: &[f64]) -> Vec<f64> {
        match self {
            StateMatrix::Diagonal(d) => d.iter().zip(h).map(|(a, x)| a * x).collect(),
            StateMatrix::Dense(m) => (m * DVector::from_column_slice(h)).as_slice().to_vec(),
        }
    }
}

/// Continuous system `h' = A h + B x`, `y = C h` with time scale Δ.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    a: StateMatrix,
    b: Vec<f64>,
    c: Vec<f64>,
    delta: f64,
}

fn check_delta(delta: f64) -> Result<(), SsmError> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(SsmError::InvalidTimeScale(delta))
    }
}

fn check_vec(what: &'static str, v: &[f64], n: usize) -> Result<(), SsmError> {
    if v.len() != n {
        return Err(SsmError::Shape {
            what,
            expected: vec![n],
            got: vec![v.len()],
        });
    }
    Ok(())
}

impl LtiSystem {
    /// Diagonal system; every entry of `a` must be strictly negative.
    pub fn diagonal(a: Vec<f64>, b: Vec<f64>, c: Vec<f64>, delta: f64) -> Result<Self, SsmError> {
        check_delta(delta)?;
        check_vec("B", &b, a.len())?;
        check_vec("C", &c, a.len())?;
        for (index, &value) in a.iter().enumerate() {
            if value == 0.0 {
                return Err(SsmError::SingularDiagonal { index });
            }
            if !(value < 0.0) {
                return Err(SsmError::Unstable { index, value });
            }
        }
        Ok(Self {
            a: StateMatrix::Diagonal(a),
            b,
            c,
            delta,
        })
    }

    /// Dense system. Stability is not enforced; singularity is detected at discretization.
    pub fn dense(a: DMatrix<f64>, b: Vec<f64>, c: Vec<f64>, delta: f64) -> Result<Self, SsmError> {
        check_delta(delta)?;
        if a.nrows() != a.ncols() {
            return Err(SsmError::Shape {
                what: "A",
                expected: vec![a.nrows(), a.nrows()],
                got: vec![a.nrows(), a.ncols()],
            });
        }
        check_vec("B", &b, a.nrows())?;
        check_vec("C", &c, a.nrows())?;
        Ok(Self {
            a: StateMatrix::Dense(a),
            b,
            c,
            delta,
        })
    }

    pub fn a(&self) -> &StateMatrix {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn order(&self) -> usize {
        self.b.len()
    }
}

/// Discrete pair `(Ā, B̄)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedSystem {
    pub a_bar: StateMatrix,
    pub b_bar: Vec<f64>,
}

impl DiscretizedSystem {
    pub fn order(&self) -> usize {
        self.b_bar.len()
    }
}

/// Zero-order hold: `Ā = exp(ΔA)`, `B̄ = (ΔA)⁻¹(exp(ΔA) − I)·ΔB`.
pub fn zoh_discretize(sys: &LtiSystem) -> Result<DiscretizedSystem, SsmError> {
    let delta = sys.delta;
    match &sys.a {
        StateMatrix::Diagonal(a) => {
            let mut a_bar = Vec::with_capacity(a.len());
            let mut b_bar = Vec::with_capacity(a.len());
            for (index, (&ai, &bi)) in a.iter().zip(&sys.b).enumerate() {
                if ai == 0.0 {
                    return Err(SsmError::SingularDiagonal { index });
                }
                let x = delta * ai;
                a_bar.push(x.exp());
                // (ΔA)⁻¹(e^{ΔA} − 1)·ΔB = expm1(x)/x · Δ·B
                b_bar.push(x.exp_m1() / x * delta * bi);
            }
            Ok(DiscretizedSystem {
                a_bar: StateMatrix::Diagonal(a_bar),
                b_bar,
            })
        }
        StateMatrix::Dense(a) => {
            let n = a.nrows();
            let da = a * delta;
            let a_bar = da.clone().exp();
            let rhs = (&a_bar - DMatrix::<f64>::identity(n, n))
                * DVector::from_column_slice(&sys.b)
                * delta;
            let b_bar = da.lu().solve(&rhs).ok_or(SsmError::Singular)?;
            Ok(DiscretizedSystem {
                a_bar: StateMatrix::Dense(a_bar),
                b_bar: b_bar.as_slice().to_vec(),
            })
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Recurrent realization from a zero state: `h_k = Ā h_{k−1} + B̄ x_k`, `y_k = C h_k`.
pub fn recurrent_scan(disc: &DiscretizedSystem, c: &[f64], x: &[f64]) -> Result<Vec<f64>, SsmError> {
    if x.is_empty() {
        return Err(SsmError::EmptySequence);
    }
    check_vec("C", c, disc.order())?;
    let mut h = vec![0.0; disc.order()];
    let mut y = Vec::with_capacity(x.len());
    for &xk in x {
        h = disc.a_bar.apply(&h);
        for (hi, bi) in h.iter_mut().zip(&disc.b_bar) {
            *hi += bi * xk;
        }
        y.push(dot(c, &h));
    }
    Ok(y)
}

/// Convolution kernel `K̄ = (C B̄, C Ā B̄, …, C Ā^{L−1} B̄)`, built by propagating
/// the state `Ā^j B̄` forward one step at a time.
pub fn conv_kernel(disc: &DiscretizedSystem, c: &[f64], len: usize) -> Result<Vec<f64>, SsmError> {
    if len == 0 {
        return Err(SsmError::EmptySequence);
    }
    check_vec("C", c, disc.order())?;
    let mut state = disc.b_bar.clone();
    let mut kernel = Vec::with_capacity(len);
    for j in 0..len {
        if j > 0 {
            state = disc.a_bar.apply(&state);
        }
        kernel.push(dot(c, &state));
    }
    Ok(kernel)
}

/// Causal convolution `y_k = Σ_{j≤k} K̄_j x_{k−j}`.
pub fn conv_apply(x: &[f64], kernel: &[f64]) -> Result<Vec<f64>, SsmError> {
    if x.is_empty() {
        return Err(SsmError::EmptySequence);
    }
    if kernel.len() != x.len() {
        return Err(SsmError::KernelLength {
            kernel: kernel.len(),
            len: x.len(),
        });
    }
    Ok((0..x.len())
        .map(|k| (0..=k).map(|j| kernel[j] * x[k - j]).sum())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn scalar_zoh_at_ln2() {
        let sys = LtiSystem::diagonal(vec![-1.0], vec![1.0], vec![1.0], 2f64.ln()).unwrap();
        let d = zoh_discretize(&sys).unwrap();
        let StateMatrix::Diagonal(a_bar) = &d.a_bar else {
            unreachable!()
        };
        assert!(close(a_bar[0], 0.5, 1e-15));
        assert!(close(d.b_bar[0], 0.5, 1e-15));
    }

    #[test]
    fn two_state_diagonal_closed_form() {
        let sys = LtiSystem::diagonal(vec![-1.0, -2.0], vec![1.0, 1.0], vec![1.0, 1.0], 1.0).unwrap();
        let d = zoh_discretize(&sys).unwrap();
        let StateMatrix::Diagonal(a_bar) = &d.a_bar else {
            unreachable!()
        };
        let e1 = (-1f64).exp();
        let e2 = (-2f64).exp();
        assert!(close(a_bar[0], e1, 1e-15) && close(a_bar[1], e2, 1e-15));
        assert!(close(d.b_bar[0], 1.0 - e1, 1e-15));
        assert!(close(d.b_bar[1], (1.0 - e2) / 2.0, 1e-15));
    }

    #[test]
    fn small_step_limit() {
        let delta = 1e-8;
        let sys = LtiSystem::diagonal(vec![-3.0], vec![2.0], vec![1.0], delta).unwrap();
        let d = zoh_discretize(&sys).unwrap();
        let StateMatrix::Diagonal(a_bar) = &d.a_bar else {
            unreachable!()
        };
        assert!(close(a_bar[0], 1.0, 1e-7));
        assert!(close(d.b_bar[0] / delta, 2.0, 1e-7));
    }

    #[test]
    fn dense_route_agrees_with_diagonal_closed_form() {
        let a = vec![-0.5, -1.5, -4.0];
        let b = vec![0.3, -1.0, 2.0];
        let c = vec![1.0, 0.5, -0.25];
        let diag = zoh_discretize(&LtiSystem::diagonal(a.clone(), b.clone(), c.clone(), 0.7).unwrap())
            .unwrap();
        let dense = zoh_discretize(
            &LtiSystem::dense(DMatrix::from_diagonal(&DVector::from_vec(a)), b, c, 0.7).unwrap(),
        )
        .unwrap();
        let (StateMatrix::Diagonal(ad), StateMatrix::Dense(am)) = (&diag.a_bar, &dense.a_bar) else {
            unreachable!()
        };
        for i in 0..3 {
            assert!(close(ad[i], am[(i, i)], 1e-12));
            assert!(close(diag.b_bar[i], dense.b_bar[i], 1e-12));
        }
    }

    #[test]
    fn rejects_singular_and_unstable() {
        assert_eq!(
            LtiSystem::diagonal(vec![-1.0, 0.0], vec![1.0; 2], vec![1.0; 2], 1.0),
            Err(SsmError::SingularDiagonal { index: 1 })
        );
        assert!(matches!(
            LtiSystem::diagonal(vec![0.5], vec![1.0], vec![1.0], 1.0),
            Err(SsmError::Unstable { index: 0, .. })
        ));
        assert_eq!(
            LtiSystem::diagonal(vec![-1.0], vec![1.0], vec![1.0], 0.0),
            Err(SsmError::InvalidTimeScale(0.0))
        );
        let singular = LtiSystem::dense(DMatrix::zeros(2, 2), vec![1.0; 2], vec![1.0; 2], 1.0).unwrap();
        assert_eq!(zoh_discretize(&singular), Err(SsmError::Singular));
    }

    #[test]
    fn impulse_response_is_kernel() {
        let sys = LtiSystem::diagonal(vec![-0.3, -1.1], vec![1.0, 0.4], vec![0.7, -0.2], 0.5).unwrap();
        let d = zoh_discretize(&sys).unwrap();
        let mut x = vec![0.0; 6];
        x[0] = 1.0;
        let y = recurrent_scan(&d, sys.c(), &x).unwrap();
        let k = conv_kernel(&d, sys.c(), 6).unwrap();
        for (a, b) in y.iter().zip(&k) {
            assert!(close(*a, *b, 1e-15));
        }
        assert_eq!(conv_apply(&x, &k).unwrap(), k);
    }

    #[test]
    fn geometric_kernel() {
        let d = DiscretizedSystem {
            a_bar: StateMatrix::Diagonal(vec![0.5]),
            b_bar: vec![1.0],
        };
        assert_eq!(conv_kernel(&d, &[1.0], 4).unwrap(), vec![1.0, 0.5, 0.25, 0.125]);
        assert_eq!(conv_kernel(&d, &[0.0], 3).unwrap(), vec![0.0; 3]);
        assert_eq!(conv_kernel(&d, &[2.0], 1).unwrap(), vec![2.0]);
    }

    #[test]
    fn memoryless_when_decay_is_zero() {
        let d = DiscretizedSystem {
            a_bar: StateMatrix::Diagonal(vec![0.0, 0.0]),
            b_bar: vec![2.0, -1.0],
        };
        let c = [0.5, 3.0];
        let x = [1.0, -2.0, 4.0];
        let y = recurrent_scan(&d, &c, &x).unwrap();
        let cb = 0.5 * 2.0 + 3.0 * -1.0;
        for (yk, xk) in y.iter().zip(&x) {
            assert_eq!(*yk, cb * xk);
        }
    }

    #[test]
    fn identity_kernel_and_errors() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(conv_apply(&x, &[1.0, 0.0, 0.0]).unwrap(), x.to_vec());
        assert_eq!(
            conv_apply(&x, &[1.0]),
            Err(SsmError::KernelLength { kernel: 1, len: 3 })
        );
        let d = DiscretizedSystem {
            a_bar: StateMatrix::Diagonal(vec![0.5]),
            b_bar: vec![1.0],
        };
        assert_eq!(recurrent_scan(&d, &[1.0], &[]), Err(SsmError::EmptySequence));
    }
}
