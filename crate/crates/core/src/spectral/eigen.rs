//! Leading eigenpairs of symmetric sparse matrices.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::AffinityMatrix;
use crate::error::{Error, Result};
use crate::registry::Registry;

#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub value: f64,
    pub vector: Vec<f64>,
}

/// Relative residual demanded of every returned pair.
pub const RESIDUAL_TOL: f64 = 1e-6;

pub trait EigenSolver: Send + Sync {
    fn name(&self) -> &'static str;

    /// The `k` algebraically largest eigenpairs, in descending order, with
    /// unit vectors whose largest-magnitude entry is positive.
    fn leading(&self, m: &AffinityMatrix, k: usize, seed: u64) -> Result<Vec<EigenPair>>;
}

pub static EIGEN_SOLVERS: Registry<dyn EigenSolver> = Registry::new(
    "eigen-solver",
    &[
        ("lanczos", || Box::new(Lanczos::default())),
        ("power", || Box::new(PowerDeflation::default())),
    ],
);

pub fn eigen_solver(name: &str) -> Result<Box<dyn EigenSolver>> {
    EIGEN_SOLVERS.create(name)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(a, b)| *a += alpha * b);
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    // two passes keep the basis orthogonal to working precision
    for _ in 0..2 {
        for q in basis {
            let c = dot(v, q);
            axpy(v, -c, q);
        }
    }
}

fn random_unit(n: usize, rng: &mut ChaCha8Rng, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    for _ in 0..8 {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        orthogonalize(&mut v, basis);
        let nv = norm(&v);
        if nv > 1e-8 {
            v.iter_mut().for_each(|x| *x /= nv);
            return Some(v);
        }
    }
    None
}

pub fn fix_sign(v: &mut [f64]) {
    let (mut best, mut idx) = (0.0, 0);
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best {
            best = x.abs();
            idx = i;
        }
    }
    if v.get(idx).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// `‖Mv - λv‖` for a unit vector.
pub fn residual(m: &AffinityMatrix, pair: &EigenPair) -> f64 {
    let mut mv = m.matvec(&pair.vector);
    axpy(&mut mv, -pair.value, &pair.vector);
    norm(&mv)
}

fn check_residuals(m: &AffinityMatrix, pairs: &[EigenPair], solver: &'static str, iterations: usize) -> Result<()> {
    let scale = pairs.first().map(|p| p.value.abs()).unwrap_or(0.0);
    for p in pairs {
        let r = residual(m, p);
        let allowed = RESIDUAL_TOL * p.value.abs().max(1e-3 * scale).max(f64::MIN_POSITIVE);
        if r > allowed {
            return Err(Error::Solver {
                solver,
                iterations,
                residual: r / p.value.abs().max(f64::MIN_POSITIVE),
            });
        }
    }
    Ok(())
}

fn check_k(m: &AffinityMatrix, k: usize) -> Result<()> {
    if k == 0 || k > m.n() {
        return Err(Error::Config(format!("requested {k} eigenpairs of a {}x{} matrix", m.n(), m.n())));
    }
    Ok(())
}

/// Lanczos with full reorthogonalization. The Krylov dimension grows until
/// the leading Ritz pairs meet the residual tolerance; invariant subspaces
/// are continued with fresh seeded vectors.
#[derive(Debug, Clone, Copy)]
pub struct Lanczos {
    pub initial_dim: usize,
    pub max_dim: usize,
}

impl Default for Lanczos {
    fn default() -> Self {
        Self {
            initial_dim: 40,
            max_dim: 800,
        }
    }
}

impl EigenSolver for Lanczos {
    fn name(&self) -> &'static str {
        "lanczos"
    }

    fn leading(&self, m: &AffinityMatrix, k: usize, seed: u64) -> Result<Vec<EigenPair>> {
        check_k(m, k)?;
        let n = m.n();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cap = self.max_dim.min(n).max(k);
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let mut alphas: Vec<f64> = Vec::new();
        let mut betas: Vec<f64> = Vec::new();
        let mut target = self.initial_dim.max(2 * k + 10).min(cap);
        let mut w: Vec<f64> = Vec::new();
        loop {
            while basis.len() < target {
                let q = if basis.is_empty() {
                    random_unit(n, &mut rng, &basis)
                } else {
                    let b = norm(&w);
                    let scale = alphas.iter().fold(1e-300f64, |a, x| a.max(x.abs()));
                    if b > 1e-10 * scale {
                        betas.push(b);
                        Some(w.iter().map(|x| x / b).collect())
                    } else {
                        betas.push(0.0);
                        random_unit(n, &mut rng, &basis)
                    }
                };
                let Some(q) = q else {
                    betas.pop();
                    break;
                };
                let mut next = m.matvec(&q);
                let a = dot(&next, &q);
                alphas.push(a);
                basis.push(q);
                orthogonalize(&mut next, &basis);
                w = next;
            }
            let dim = basis.len();
            let mut t = DMatrix::<f64>::zeros(dim, dim);
            for i in 0..dim {
                t[(i, i)] = alphas[i];
                if i + 1 < dim {
                    t[(i, i + 1)] = betas[i];
                    t[(i + 1, i)] = betas[i];
                }
            }
            let eig = SymmetricEigen::new(t);
            let mut order: Vec<usize> = (0..dim).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let kk = k.min(dim);
            let tail = norm(&w);
            let lead = eig.eigenvalues[order[0]].abs();
            let converged = order[..kk].iter().all(|&j| {
                let est = tail * eig.eigenvectors[(dim - 1, j)].abs();
                est <= 0.1 * RESIDUAL_TOL * eig.eigenvalues[j].abs().max(1e-3 * lead)
            });
            if (converged && kk == k) || dim >= cap {
                let pairs: Vec<EigenPair> = order[..kk]
                    .iter()
                    .map(|&j| {
                        let mut v = vec![0.0; n];
                        for (i, q) in basis.iter().enumerate() {
                            axpy(&mut v, eig.eigenvectors[(i, j)], q);
                        }
                        let nv = norm(&v);
                        v.iter_mut().for_each(|x| *x /= nv);
                        fix_sign(&mut v);
                        EigenPair {
                            value: eig.eigenvalues[j],
                            vector: v,
                        }
                    })
                    .collect();
                if kk < k {
                    return Err(Error::Solver {
                        solver: "lanczos",
                        iterations: dim,
                        residual: f64::INFINITY,
                    });
                }
                check_residuals(m, &pairs, "lanczos", dim)?;
                return Ok(pairs);
            }
            target = (target * 2).min(cap);
        }
    }
}

/// Shifted power iteration with deflation against earlier vectors.
#[derive(Debug, Clone, Copy)]
pub struct PowerDeflation {
    pub max_iterations: usize,
}

impl Default for PowerDeflation {
    fn default() -> Self {
        Self {
            max_iterations: 200_000,
        }
    }
}

impl EigenSolver for PowerDeflation {
    fn name(&self) -> &'static str {
        "power"
    }

    fn leading(&self, m: &AffinityMatrix, k: usize, seed: u64) -> Result<Vec<EigenPair>> {
        check_k(m, k)?;
        let n = m.n();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Shift by a Gershgorin bound so the spectrum is nonnegative.
        let shift = m.max_abs_row_sum();
        let mut found: Vec<Vec<f64>> = Vec::new();
        let mut pairs = Vec::new();
        let mut total_iterations = 0;
        for _ in 0..k {
            let mut v = random_unit(n, &mut rng, &found).ok_or(Error::Solver {
                solver: "power",
                iterations: 0,
                residual: f64::INFINITY,
            })?;
            let mut lambda = 0.0;
            let mut done = false;
            let (mut best, mut since_best) = (f64::INFINITY, 0usize);
            let mut last = (f64::INFINITY, 1.0);
            for _ in 0..self.max_iterations {
                total_iterations += 1;
                let mv = m.matvec(&v);
                lambda = dot(&mv, &v);
                let mut r = mv.clone();
                axpy(&mut r, -lambda, &v);
                let res = norm(&r);
                let scale = lambda.abs().max(1e-3 * shift);
                last = (res, scale);
                // Iterate well past the tolerance so later deflations stay
                // accurate; accept once progress stalls.
                if res < 0.5 * best {
                    best = res;
                    since_best = 0;
                } else {
                    since_best += 1;
                }
                if res <= 1e-6 * RESIDUAL_TOL * scale || (since_best > 200 && res <= 0.1 * RESIDUAL_TOL * scale) {
                    done = true;
                    break;
                }
                let mut next = mv;
                axpy(&mut next, shift, &v);
                orthogonalize(&mut next, &found);
                let nn = norm(&next);
                if nn == 0.0 {
                    done = true;
                    break;
                }
                next.iter_mut().for_each(|x| *x /= nn);
                v = next;
            }
            // Out of iterations but inside the tolerance still counts.
            done |= last.0 <= RESIDUAL_TOL * last.1;
            if !done {
                let r = residual(m, &EigenPair { value: lambda, vector: v.clone() });
                return Err(Error::Solver {
                    solver: "power",
                    iterations: total_iterations,
                    residual: r / lambda.abs().max(f64::MIN_POSITIVE),
                });
            }
            found.push(v.clone());
            fix_sign(&mut v);
            pairs.push(EigenPair { value: lambda, vector: v });
        }
        pairs.sort_by(|a, b| b.value.total_cmp(&a.value));
        check_residuals(m, &pairs, "power", total_iterations)?;
        Ok(pairs)
    }
}
