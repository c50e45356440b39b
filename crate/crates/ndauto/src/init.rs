use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Real, Tensor};

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<Real> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as Real).collect()
}

/// `[fan_in, fan_out]` weights whose incoming vector for every output unit
/// has L2 norm `gain`.
pub fn fan_in(rng: &mut impl Rng, fan_in: usize, fan_out: usize, gain: Real) -> Tensor {
    let mut w = gaussian(rng, fan_in * fan_out);
    for o in 0..fan_out {
        let norm = (0..fan_in).map(|i| w[i * fan_out + o].powi(2)).sum::<Real>().sqrt();
        if norm > 0.0 {
            for i in 0..fan_in {
                w[i * fan_out + o] *= gain / norm;
            }
        }
    }
    Tensor::from_rows(fan_in, fan_out, w)
}

/// `[rows, cols]` weights with orthonormal rows or columns (whichever is
/// the shorter side), scaled by `gain`.
pub fn orthogonal(rng: &mut impl Rng, rows: usize, cols: usize, gain: Real) -> Tensor {
    let (long, short) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // `short` orthonormal vectors of length `long` via modified Gram-Schmidt.
    let mut basis: Vec<Vec<Real>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v = gaussian(rng, long);
        for b in &basis {
            let d: Real = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<Real>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut w = vec![0.0; rows * cols];
    for (s, b) in basis.iter().enumerate() {
        for (l, x) in b.iter().enumerate() {
            let (r, c) = if rows >= cols { (l, s) } else { (s, l) };
            w[r * cols + c] = gain * x;
        }
    }
    Tensor::from_rows(rows, cols, w)
}
