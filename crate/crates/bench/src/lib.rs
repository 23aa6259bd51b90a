//! Fixtures shared by the criterion benches.

use sghf_core::Tensor;

/// Deterministic pseudo-random tensor in [-1, 1) (no RNG dependency).
pub fn filled(shape: &[usize], salt: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n as u64)
        .map(|i| {
            let h = (i ^ salt).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
            (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Scores and balanced labels for AUC timing.
pub fn scored(n: usize) -> (Vec<f64>, Vec<u8>) {
    let t = filled(&[n], 3);
    let labels = (0..n).map(|i| (i % 2) as u8).collect();
    (t.data().to_vec(), labels)
}
