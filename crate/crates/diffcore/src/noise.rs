//! Seeded Gumbel(0, 1) noise for the relaxed categorical sampler.

use rand::Rng;

use crate::real::Real;
use crate::tensor::Tensor;

/// One Gumbel(0, 1) draw via `−ln(−ln u)` with `u ∈ (0, 1)`.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // gen::<f64>() is in [0, 1); shift away from both ends.
    let u = rng.gen::<f64>().clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
    -(-u.ln()).ln()
}

/// An `rows × cols` matrix of independent Gumbel(0, 1) draws.
pub fn gumbel_matrix<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::of(gumbel(rng))).collect();
    Tensor::matrix(rows, cols, data).expect("rows·cols entries")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gumbel_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| gumbel(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        // Euler-Mascheroni constant and π²/6.
        assert!((mean - 0.577_215_664_9).abs() < 0.01, "{mean}");
        assert!((var - std::f64::consts::PI.powi(2) / 6.0).abs() < 0.03, "{var}");
    }
}
