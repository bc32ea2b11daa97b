//! Generators for linear-algebra inputs whose factorization stays exactly on
//! the 8-bit integer grid.
//!
//! The matrices are products `A = L * U` of a sparse unit-lower-triangular
//! `L` (at most one off-diagonal entry per row, magnitude <= 2) and a sparse
//! upper-triangular `U` (diagonal in 4..=9, at most two off-diagonal entries
//! per row, magnitude <= 9). Every value arising during elimination —
//! matrix entries, pivots, multipliers, and update products — is then an
//! integer within [-128, 127], so quantization with a unit-step grid
//! reproduces the arithmetic exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracle;
use crate::HostTensor;

pub fn exact_lu_matrix(n: usize, seed: u64) -> HostTensor {
    let (l, u) = exact_lu_factors(n, seed);
    oracle::gemm(&l, &u).expect("square factors")
}

/// The planted factors behind [`exact_lu_matrix`].
pub fn exact_lu_factors(n: usize, seed: u64) -> (HostTensor, HostTensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1ced_5eed);
    let mut l = HostTensor::zeros(n, n).expect("valid shape");
    let mut u = HostTensor::zeros(n, n).expect("valid shape");
    for i in 0..n {
        l.set(i, i, 1.0);
        if i > 0 && rng.gen_bool(0.7) {
            let j = rng.gen_range(0..i);
            let vals = [-2.0, -1.0, 1.0, 2.0];
            l.set(i, j, vals[rng.gen_range(0..4)]);
        }
        u.set(i, i, rng.gen_range(4..=9) as f64);
        for _ in 0..2 {
            if i + 1 < n && rng.gen_bool(0.7) {
                let j = rng.gen_range(i + 1..n);
                let mut v = 0;
                while v == 0 {
                    v = rng.gen_range(-9..=9);
                }
                u.set(i, j, v as f64);
            }
        }
    }
    (l, u)
}

/// A linear system `A x = b` with the same exactness guarantee for the
/// augmented elimination: `b` is constructed as `L * b'` for small integer
/// `b'`, so the eliminated right-hand side stays on the grid too.
pub fn exact_linear_system(n: usize, seed: u64) -> (HostTensor, HostTensor) {
    let (l, u) = exact_lu_factors(n, seed);
    let a = oracle::gemm(&l, &u).expect("square factors");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b57_ac1e);
    let bprime = HostTensor::new(
        crate::tensor::TensorShape::new(n, 1).expect("valid"),
        (0..n).map(|_| rng.gen_range(-20..=20) as f64).collect(),
    )
    .expect("finite");
    let b = oracle::gemm(&l, &bprime).expect("shapes agree");
    (a, b)
}
