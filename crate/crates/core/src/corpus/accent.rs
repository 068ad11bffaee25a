use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::matmul_raw;
use crate::seed;

const MAX_CONDITION: f64 = 1e6;
const POWER_ITERS: usize = 100;

/// A speaker accent as a consistent affine deformation of feature space:
/// every rendered frame becomes `A x + b` with `A = I + gamma * R` where
/// `R` has seeded Gaussian entries rescaled to unit spectral norm.
#[derive(Debug, Clone, PartialEq)]
pub struct AccentProfile {
    pub id: String,
    /// D x D transform, row-major.
    pub transform: Vec<f64>,
    pub bias: Vec<f64>,
    pub duration_range: (usize, usize),
    pub strength: f64,
    pub dim: usize,
    pub seed: u64,
}

impl AccentProfile {
    /// Build a profile from a derived seed. Regenerates the random
    /// direction if the resulting transform is close to singular.
    pub fn generate(
        id: &str,
        dim: usize,
        strength: f64,
        bias_scale: f64,
        duration_range: (usize, usize),
        profile_seed: u64,
    ) -> Result<Self> {
        for attempt in 0..100u64 {
            let mut rng = seed::rng(profile_seed, &[seed::tag("accent-transform"), attempt]);
            let mut r: Vec<f64> = (0..dim * dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = spectral_norm_estimate(&r, dim);
            if norm <= 0.0 {
                continue;
            }
            for v in r.iter_mut() {
                *v /= norm;
            }
            let mut transform = vec![0.0; dim * dim];
            for i in 0..dim {
                for j in 0..dim {
                    let eye = if i == j { 1.0 } else { 0.0 };
                    transform[i * dim + j] = eye + strength * r[i * dim + j];
                }
            }
            if condition_estimate(&transform, dim)? < MAX_CONDITION {
                let mut brng = seed::rng(profile_seed, &[seed::tag("accent-bias")]);
                let bias = (0..dim)
                    .map(|_| bias_scale * brng.sample::<f64, _>(StandardNormal))
                    .collect();
                return Ok(AccentProfile {
                    id: id.to_string(),
                    transform,
                    bias,
                    duration_range,
                    strength,
                    dim,
                    seed: profile_seed,
                });
            }
        }
        Err(Error::Generation(format!(
            "could not build a well-conditioned transform for accent `{id}`"
        )))
    }

    /// Identity accent: no deformation, no bias.
    pub fn identity(id: &str, dim: usize, duration_range: (usize, usize)) -> Self {
        let mut transform = vec![0.0; dim * dim];
        for i in 0..dim {
            transform[i * dim + i] = 1.0;
        }
        AccentProfile {
            id: id.to_string(),
            transform,
            bias: vec![0.0; dim],
            duration_range,
            strength: 0.0,
            dim,
            seed: 0,
        }
    }

    /// Apply the affine deformation to a feature vector.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = matmul_raw(&self.transform, x, self.dim, self.dim, 1);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        out
    }
}

/// Largest-singular-value estimate by power iteration on `M^T M` with a
/// fixed start vector, so the result is deterministic.
pub fn spectral_norm_estimate(m: &[f64], dim: usize) -> f64 {
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    for _ in 0..POWER_ITERS {
        let mv = matmul_raw(m, &v, dim, dim, 1);
        let mut mtmv = vec![0.0; dim];
        // M^T (M v)
        for i in 0..dim {
            for j in 0..dim {
                mtmv[j] += m[i * dim + j] * mv[i];
            }
        }
        let norm = mtmv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        for (a, b) in v.iter_mut().zip(&mtmv) {
            *a = b / norm;
        }
    }
    let mv = matmul_raw(m, &v, dim, dim, 1);
    mv.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Condition-number estimate sigma_max / sigma_min, with sigma_min from
/// inverse power iteration using an LU solve.
fn condition_estimate(m: &[f64], dim: usize) -> Result<f64> {
    let sigma_max = spectral_norm_estimate(m, dim);
    let lu = LuFactors::new(m, dim);
    let Some(lu) = lu else {
        return Ok(f64::INFINITY);
    };
    // Power iteration on (M^T M)^-1 via solves with M and M^T.
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut sigma_inv = 0.0;
    for _ in 0..POWER_ITERS {
        let y = lu.solve(&v);
        let z = lu.solve_transposed(&y);
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Ok(f64::INFINITY);
        }
        sigma_inv = norm;
        for (a, b) in v.iter_mut().zip(&z) {
            *a = b / norm;
        }
    }
    let sigma_min = 1.0 / sigma_inv.sqrt();
    if sigma_min <= 0.0 || !sigma_min.is_finite() {
        return Ok(f64::INFINITY);
    }
    Ok(sigma_max / sigma_min)
}

/// LU factorization with partial pivoting for small dense systems.
struct LuFactors {
    lu: Vec<f64>,
    pivots: Vec<usize>,
    dim: usize,
}

impl LuFactors {
    fn new(m: &[f64], dim: usize) -> Option<Self> {
        let mut lu = m.to_vec();
        let mut pivots: Vec<usize> = (0..dim).collect();
        for col in 0..dim {
            let mut best = col;
            let mut best_abs = lu[col * dim + col].abs();
            for r in col + 1..dim {
                let a = lu[r * dim + col].abs();
                if a > best_abs {
                    best = r;
                    best_abs = a;
                }
            }
            if best_abs == 0.0 {
                return None;
            }
            if best != col {
                for j in 0..dim {
                    lu.swap(col * dim + j, best * dim + j);
                }
                pivots.swap(col, best);
            }
            let pivot = lu[col * dim + col];
            for r in col + 1..dim {
                let factor = lu[r * dim + col] / pivot;
                lu[r * dim + col] = factor;
                for j in col + 1..dim {
                    lu[r * dim + j] -= factor * lu[col * dim + j];
                }
            }
        }
        Some(LuFactors { lu, pivots, dim })
    }

    /// Solve `M x = b`.
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut x: Vec<f64> = self.pivots.iter().map(|&p| b[p]).collect();
        for i in 0..d {
            for j in 0..i {
                x[i] -= self.lu[i * d + j] * x[j];
            }
        }
        for i in (0..d).rev() {
            for j in i + 1..d {
                x[i] -= self.lu[i * d + j] * x[j];
            }
            x[i] /= self.lu[i * d + i];
        }
        x
    }

    /// Solve `M^T x = b` using the same factors: M = P^T L U, so
    /// M^T = U^T L^T P and we solve U^T y = b, L^T z = y, x = P^T z.
    fn solve_transposed(&self, b: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut y = b.to_vec();
        for i in 0..d {
            for j in 0..i {
                y[i] -= self.lu[j * d + i] * y[j];
            }
            y[i] /= self.lu[i * d + i];
        }
        for i in (0..d).rev() {
            for j in i + 1..d {
                y[i] -= self.lu[j * d + i] * y[j];
            }
        }
        let mut x = vec![0.0; d];
        for (i, &p) in self.pivots.iter().enumerate() {
            x[p] = y[i];
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = AccentProfile::generate("a", 8, 0.3, 0.1, (3, 5), 42).unwrap();
        let b = AccentProfile::generate("a", 8, 0.3, 0.1, (3, 5), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = AccentProfile::generate("a", 8, 0.3, 0.1, (3, 5), 1).unwrap();
        let b = AccentProfile::generate("a", 8, 0.3, 0.1, (3, 5), 2).unwrap();
        assert_ne!(a.transform, b.transform);
    }

    #[test]
    fn transform_is_near_identity_for_small_strength() {
        let p = AccentProfile::generate("a", 10, 0.0, 0.0, (3, 5), 7).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((p.transform[i * 10 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spectral_norm_of_scaled_direction_is_one() {
        let p = AccentProfile::generate("a", 12, 0.3, 0.1, (3, 5), 3).unwrap();
        // Recover R = (A - I) / gamma and check its norm estimate.
        let mut r = p.transform.clone();
        for i in 0..12 {
            r[i * 12 + i] -= 1.0;
        }
        for v in r.iter_mut() {
            *v /= 0.3;
        }
        let norm = spectral_norm_estimate(&r, 12);
        assert!((norm - 1.0).abs() < 1e-6, "norm = {norm}");
    }

    #[test]
    fn lu_solve_round_trip() {
        let m = vec![4.0, 1.0, 2.0, 1.0, 3.0, 0.5, 2.0, 0.5, 5.0];
        let lu = LuFactors::new(&m, 3).unwrap();
        let x = vec![1.0, -2.0, 0.5];
        let b = matmul_raw(&m, &x, 3, 3, 1);
        let solved = lu.solve(&b);
        for (a, b) in solved.iter().zip(&x) {
            assert!((a - b).abs() < 1e-10);
        }
        // transposed solve
        let mut mt = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                mt[j * 3 + i] = m[i * 3 + j];
            }
        }
        let bt = matmul_raw(&mt, &x, 3, 3, 1);
        let solved_t = lu.solve_transposed(&bt);
        for (a, b) in solved_t.iter().zip(&x) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn condition_of_generated_transform_is_small() {
        let p = AccentProfile::generate("a", 20, 0.45, 0.1, (3, 5), 11).unwrap();
        let cond = condition_estimate(&p.transform, 20).unwrap();
        assert!(cond < 10.0, "cond = {cond}");
    }
}
