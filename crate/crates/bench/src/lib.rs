//! Deterministic inputs shared by the benchmarks.

use rsmamba::ssm::SelectiveScanInput;
use rsmamba::{Element, Tensor};

/// Smooth pseudo-random fill in `[-1, 1]`, identical on every run.
pub fn filled<T: Element>(shape: &[usize], salt: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|i| (i as f64 * 0.618 + salt).sin()).collect();
    Tensor::from_f64(shape.to_vec(), &data).expect("shape matches data")
}

/// A selective-scan problem of length `len` with `ch` channels and state size `n`.
pub fn scan_input<T: Element>(len: usize, ch: usize, n: usize) -> SelectiveScanInput<T> {
    SelectiveScanInput {
        u: filled(&[len, ch], 0.1),
        delta: filled::<T>(&[len, ch], 0.2).map(|v| T::of(0.5 + 0.4 * v.as_f64())),
        a: filled::<T>(&[ch, n], 0.3).map(|v| T::of(-1.0 - 0.5 * v.as_f64())),
        b: filled(&[len, n], 0.4),
        c: filled(&[len, n], 0.5),
        d_skip: filled(&[ch], 0.6),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_are_valid() {
        let inp = scan_input::<f32>(16, 8, 4);
        assert!(inp.dims().is_ok());
        assert!(inp.delta.data().iter().all(|&d| d > 0.0));
        assert!(inp.a.data().iter().all(|&a| a < 0.0));
    }
}
