//! Left-invariant frame on R²×S¹, planar difference operators and the two
//! elliptic solvers used by completion.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{bilinear_weights, reflect, wrap_theta, LiftedField3D, ScalarField2D, VectorField2D};

/// `X1 = cosθ∂x + sinθ∂y`, `X2 = ∂θ`, `X3 = -sinθ∂x + cosθ∂y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    X1,
    X2,
    X3,
}

/// Centered differences: reflective in space, periodic in θ with `Δθ = π/nθ`.
pub fn apply_x(field: &LiftedField3D, which: Frame) -> LiftedField3D {
    let (w, h, n) = (field.width(), field.height(), field.n_theta());
    let hs = field.spacing();
    let dt = field.theta_step();
    let trig: Vec<(f64, f64)> = (0..n).map(|k| (field.theta(k).cos(), field.theta(k).sin())).collect();
    let rows: Vec<Vec<Complex64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w * n);
            let (ym, yp) = (reflect(y as isize - 1, h), reflect(y as isize + 1, h));
            for x in 0..w {
                let (xm, xp) = (reflect(x as isize - 1, w), reflect(x as isize + 1, w));
                for (k, &(c, s)) in trig.iter().enumerate() {
                    let v = match which {
                        Frame::X2 => {
                            let km = wrap_theta(k as isize - 1, n);
                            let kp = wrap_theta(k as isize + 1, n);
                            (field.get(x, y, kp) - field.get(x, y, km)) / (2.0 * dt)
                        }
                        _ => {
                            let dx = (field.get(xp, y, k) - field.get(xm, y, k)) / (2.0 * hs);
                            let dy = (field.get(x, yp, k) - field.get(x, ym, k)) / (2.0 * hs);
                            if which == Frame::X1 {
                                dx * c + dy * s
                            } else {
                                dy * c - dx * s
                            }
                        }
                    };
                    row.push(v);
                }
            }
            row
        })
        .collect();
    LiftedField3D::new(w, h, n, rows.concat())
        .expect("differences of finite values are finite")
        .with_spacing(hs)
}

/// Largest `|([X1, X2] + X3) f|` over points at least two cells from every
/// face of the grid (θ included). Zero in the continuum since
/// `[X1, X2] = -X3`.
pub fn commutator_check(field: &LiftedField3D) -> f64 {
    let x2f = apply_x(field, Frame::X2);
    let x1f = apply_x(field, Frame::X1);
    let a = apply_x(&x2f, Frame::X1);
    let b = apply_x(&x1f, Frame::X2);
    let c = apply_x(field, Frame::X3);
    let (w, h, n) = (field.width(), field.height(), field.n_theta());
    let mut worst = 0.0f64;
    for y in 2..h.saturating_sub(2) {
        for x in 2..w.saturating_sub(2) {
            for k in 2..n.saturating_sub(2) {
                let i = field.index(x, y, k);
                let d = a.data()[i] - b.data()[i] + c.data()[i];
                worst = worst.max(d.norm());
            }
        }
    }
    worst
}

/// Pixels where `|A|` falls below this carry no direction.
pub const DEGENERATE_EPS: f64 = 1e-8;

/// `X_{1,A} f = (A2/|A|) ∂x f - (A1/|A|) ∂y f` with centered differences;
/// zero where `|A| < DEGENERATE_EPS`.
pub fn apply_x2d(f: &ScalarField2D, a: &VectorField2D) -> Result<ScalarField2D> {
    if f.width() != a.width() || f.height() != a.height() {
        return Err(Error::Size("field and direction field differ in shape".into()));
    }
    let (gx, gy) = centered_gradient(f);
    Ok(ScalarField2D::from_fn(f.width(), f.height(), |x, y| {
        let (a1, a2) = a.get(x, y);
        let m = a1.hypot(a2);
        if m < DEGENERATE_EPS {
            0.0
        } else {
            let i = y * f.width() + x;
            (a2 * gx[i] - a1 * gy[i]) / m
        }
    })
    .with_spacing(f.spacing()))
}

/// Centered differences with reflective borders, divided by the spacing.
pub fn centered_gradient(f: &ScalarField2D) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (f.width(), f.height());
    let s = 2.0 * f.spacing();
    let mut gx = Vec::with_capacity(w * h);
    let mut gy = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            gx.push((f.get_reflect(x as isize + 1, y as isize) - f.get_reflect(x as isize - 1, y as isize)) / s);
            gy.push((f.get_reflect(x as isize, y as isize + 1) - f.get_reflect(x as isize, y as isize - 1)) / s);
        }
    }
    (gx, gy)
}

/// Forward differences, zero across the last row/column (no-flux).
pub fn forward_gradient(f: &ScalarField2D) -> VectorField2D {
    let (w, h, s) = (f.width(), f.height(), f.spacing());
    VectorField2D::from_fn(w, h, |x, y| {
        let v = f.get(x, y);
        let gx = if x + 1 < w { (f.get(x + 1, y) - v) / s } else { 0.0 };
        let gy = if y + 1 < h { (f.get(x, y + 1) - v) / s } else { 0.0 };
        (gx, gy)
    })
    .with_spacing(s)
}

/// Backward-difference divergence, the negative adjoint of
/// [`forward_gradient`]; `divergence(forward_gradient(u))` is the Neumann
/// 5-point Laplacian.
pub fn divergence(a: &VectorField2D) -> ScalarField2D {
    let (w, h, s) = (a.width(), a.height(), a.spacing());
    let ax = |x: usize, y: usize| if x + 1 < w { a.ax()[y * w + x] } else { 0.0 };
    let ay = |x: usize, y: usize| if y + 1 < h { a.ay()[y * w + x] } else { 0.0 };
    ScalarField2D::from_fn(w, h, |x, y| {
        let mut d = ax(x, y) + ay(x, y);
        if x > 0 {
            d -= ax(x - 1, y);
        }
        if y > 0 {
            d -= ay(x, y - 1);
        }
        d / s
    })
    .with_spacing(s)
}

fn laplacian_into(w: usize, h: usize, spacing: f64, u: &[f64], out: &mut [f64]) {
    let inv = 1.0 / (spacing * spacing);
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let c = u[y * w + x];
            let mut acc = 0.0;
            if x > 0 {
                acc += u[y * w + x - 1] - c;
            }
            if x + 1 < w {
                acc += u[y * w + x + 1] - c;
            }
            if y > 0 {
                acc += u[(y - 1) * w + x] - c;
            }
            if y + 1 < h {
                acc += u[(y + 1) * w + x] - c;
            }
            *o = acc * inv;
        }
    });
}

/// Neumann 5-point Laplacian.
pub fn laplacian(u: &ScalarField2D) -> ScalarField2D {
    let mut out = vec![0.0; u.len()];
    laplacian_into(u.width(), u.height(), u.spacing(), u.data(), &mut out);
    ScalarField2D::new(u.width(), u.height(), u.spacing(), out).expect("finite")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PoissonOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 20_000,
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn remove_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// Solves `Δu = f - mean(f)` with zero-flux borders and `mean(u) = 0`.
pub fn poisson_solve_neumann(f: &ScalarField2D) -> Result<ScalarField2D> {
    poisson_solve_neumann_with(f, &PoissonOptions::default())
}

pub fn poisson_solve_neumann_with(f: &ScalarField2D, opts: &PoissonOptions) -> Result<ScalarField2D> {
    let (w, h, sp) = (f.width(), f.height(), f.spacing());
    let n = f.len();
    let fnorm = f.norm();
    let mut b: Vec<f64> = f.data().iter().map(|v| -v).collect();
    remove_mean(&mut b);
    let mut u = vec![0.0; n];
    let target = opts.tolerance * fnorm;
    let mut r = b;
    let mut rr = dot(&r, &r);
    if rr.sqrt() <= target || fnorm == 0.0 {
        return ScalarField2D::new(w, h, sp, u);
    }
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    for it in 0..opts.max_iterations {
        laplacian_into(w, h, sp, &p, &mut ap);
        ap.iter_mut().for_each(|v| *v = -*v);
        let alpha = rr / dot(&p, &ap);
        for i in 0..n {
            u[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        remove_mean(&mut r);
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= target {
            remove_mean(&mut u);
            log::debug!("poisson converged in {} iterations", it + 1);
            return ScalarField2D::new(w, h, sp, u);
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Err(Error::Solver {
        solver: "poisson-cg",
        iterations: opts.max_iterations,
        residual: rr.sqrt() / fnorm,
    })
}

/// Per-pixel transport directions for the screened solve: the unit vector of
/// `X_{1,A}`, or `None` where the field is degenerate. The `X_{3,A}`
/// direction is its quarter turn.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionField {
    width: usize,
    height: usize,
    dirs: Vec<Option<(f64, f64)>>,
}

impl DirectionField {
    pub fn uniform(width: usize, height: usize, dir: (f64, f64)) -> Self {
        let n = dir.0.hypot(dir.1);
        Self {
            width,
            height,
            dirs: vec![Some((dir.0 / n, dir.1 / n)); width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Option<(f64, f64)>) -> Self {
        let mut dirs = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                dirs.push(f(x, y).map(|(a, b)| {
                    let n = a.hypot(b);
                    (a / n, b / n)
                }));
            }
        }
        Self { width, height, dirs }
    }

    /// Directions of `A` after Gaussian smoothing of its structure tensor
    /// (`sigma = 0` uses `A` pointwise). The dominant eigenvector gives the
    /// `X_{3,A}` axis and its quarter turn the `X_{1,A}` axis.
    pub fn from_vector_field(a: &VectorField2D, sigma: f64) -> Self {
        Self::from_vector_field_with_floor(a, sigma, 0.0)
    }

    /// As [`Self::from_vector_field`], also leaving undirected every pixel
    /// whose smoothed tensor trace is below `floor` times the largest one.
    pub fn from_vector_field_with_floor(a: &VectorField2D, sigma: f64, floor: f64) -> Self {
        let (w, h) = (a.width(), a.height());
        let jxx: Vec<f64> = a.ax().iter().map(|v| v * v).collect();
        let jxy: Vec<f64> = a.ax().iter().zip(a.ay()).map(|(p, q)| p * q).collect();
        let jyy: Vec<f64> = a.ay().iter().map(|v| v * v).collect();
        let (jxx, jxy, jyy) = if sigma > 0.0 {
            (
                gaussian_smooth(&jxx, w, h, sigma),
                gaussian_smooth(&jxy, w, h, sigma),
                gaussian_smooth(&jyy, w, h, sigma),
            )
        } else {
            (jxx, jxy, jyy)
        };
        let peak = (0..w * h).map(|i| jxx[i] + jyy[i]).fold(0.0, f64::max);
        let eps2 = (DEGENERATE_EPS * DEGENERATE_EPS).max(floor * peak);
        let dirs = (0..w * h)
            .map(|i| {
                if jxx[i] + jyy[i] < eps2 {
                    return None;
                }
                let phi = 0.5 * (2.0 * jxy[i]).atan2(jxx[i] - jyy[i]);
                Some((phi.sin(), -phi.cos()))
            })
            .collect();
        Self {
            width: w,
            height: h,
            dirs,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<(f64, f64)> {
        self.dirs[y * self.width + x]
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn defined_count(&self) -> usize {
        self.dirs.iter().filter(|d| d.is_some()).count()
    }
}

/// Separable Gaussian (truncated at 3σ, reflective borders).
pub fn gaussian_smooth(v: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
    let mut tmp = vec![0.0; w * h];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            *o = taps
                .iter()
                .enumerate()
                .map(|(j, t)| t * v[y * w + reflect(x as isize + j as isize - r, w)])
                .sum();
        }
    });
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            *o = taps
                .iter()
                .enumerate()
                .map(|(j, t)| t * tmp[reflect(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionalWeights {
    pub w1: f64,
    pub w3: f64,
}

impl DirectionalWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1 >= 0.0 && self.w3 >= 0.0 && self.w1 + self.w3 > 0.0) {
            return Err(Error::Config(format!(
                "directional weights must be nonnegative and not both zero, got w1={} w3={}",
                self.w1, self.w3
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenedOptions {
    /// Structure-tensor smoothing for the lagged directions, in pixels.
    pub sigma_dir: f64,
    /// Relative floor of the smoothed tensor trace below which a pixel
    /// carries no direction.
    pub direction_floor: f64,
    /// Freeze the frame at each source pixel and spread along straight
    /// characteristics (see [`characteristic_solve`]) instead of iterating
    /// on lagged directions.
    pub characteristic: bool,
    /// Smallest structure-tensor coherence of a source pixel that spreads.
    pub min_coherence: f64,
    /// Relative Green's weight at which characteristic spreading stops.
    pub decay_floor: f64,
    pub outer_max: usize,
    pub outer_tolerance: f64,
    pub inner_tolerance: f64,
    pub inner_max: usize,
}

impl Default for ScreenedOptions {
    fn default() -> Self {
        Self {
            sigma_dir: 1.5,
            direction_floor: 0.0,
            characteristic: false,
            min_coherence: 0.5,
            decay_floor: 1e-3,
            outer_max: 60,
            outer_tolerance: 1e-5,
            inner_tolerance: 1e-8,
            inner_max: 5_000,
        }
    }
}

/// Decay ratio per step and central weight of the discrete Green's function
/// of `1 - ℓ²D²` on a line: `g(k) = c·ρ^|k|`, summing to one.
fn line_green(ell: f64) -> (f64, f64) {
    if ell == 0.0 {
        return (0.0, 1.0);
    }
    let l2 = ell * ell;
    let q = 1.0 + 2.0 * l2;
    let rho = (q - (q * q - 4.0 * l2 * l2).sqrt()) / (2.0 * l2);
    (rho, (1.0 - rho) / (1.0 + rho))
}

/// Solves `(w1·X1² + w3·X3² - 1) a = rhs` with the frame frozen at each
/// source pixel: every source spreads along its own straight characteristic
/// with the separable line Green's functions of `w1·X1²` and `w3·X3²`, and
/// the spreads are summed. Source directions come from the structure tensor
/// of `rhs` smoothed over `sigma_dir`; sources with coherence below
/// `min_coherence` stay where they are. Spreading stops where the weight
/// drops below `decay_floor` times its central value.
pub fn characteristic_solve(rhs: &VectorField2D, weights: DirectionalWeights, opts: &ScreenedOptions) -> Result<VectorField2D> {
    weights.validate()?;
    let (w, h) = (rhs.width(), rhs.height());
    let sq = |f: fn(f64, f64) -> f64| -> Vec<f64> {
        let v: Vec<f64> = rhs.ax().iter().zip(rhs.ay()).map(|(&x, &y)| f(x, y)).collect();
        gaussian_smooth(&v, w, h, opts.sigma_dir)
    };
    let (jxx, jxy, jyy) = (sq(|x, _| x * x), sq(|x, y| x * y), sq(|_, y| y * y));
    let floor = opts.decay_floor.clamp(f64::MIN_POSITIVE, 1.0);
    let sources: Vec<usize> = (0..w * h).filter(|&i| rhs.ax()[i] != 0.0 || rhs.ay()[i] != 0.0).collect();
    let spread = |i: usize| -> Vec<(usize, f64)> {
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        let trace = jxx[i] + jyy[i];
        let coherence = if trace > 0.0 { (jxx[i] - jyy[i]).hypot(2.0 * jxy[i]) / trace } else { 0.0 };
        if coherence < opts.min_coherence {
            return vec![(i, 1.0)];
        }
        // The tensor's dominant axis is the normal; X1 runs across it.
        let phi = 0.5 * (2.0 * jxy[i]).atan2(jxx[i] - jyy[i]);
        let d = (phi.sin(), -phi.cos());
        let n = (-d.1, d.0);
        let step = 1.0 / d.0.abs().max(d.1.abs());
        let (r1, c1) = line_green(weights.w1.sqrt() / (rhs.spacing() * step));
        let (r3, c3) = line_green(weights.w3.sqrt() / (rhs.spacing() * step));
        let reach = |r: f64| if r > 0.0 { (floor.ln() / r.ln()).floor() as isize } else { 0 };
        let (k1, k3) = (reach(r1), reach(r3));
        let mut out = Vec::new();
        for m in -k3..=k3 {
            let g3 = c3 * r3.powi(m.unsigned_abs() as i32);
            for k in -k1..=k1 {
                let g = g3 * c1 * r1.powi(k.unsigned_abs() as i32);
                let (px, py) = (
                    x + step * (k as f64 * d.0 + m as f64 * n.0),
                    y + step * (k as f64 * d.1 + m as f64 * n.1),
                );
                for (ix, iy, bw) in bilinear_weights(px, py) {
                    if bw > 0.0 && ix >= 0 && iy >= 0 && (ix as usize) < w && (iy as usize) < h {
                        out.push((iy as usize * w + ix as usize, g * bw));
                    }
                }
            }
        }
        out
    };
    let parts: Vec<(Vec<f64>, Vec<f64>)> = sources
        .par_chunks(64)
        .map(|chunk| {
            let (mut ax, mut ay) = (vec![0.0; w * h], vec![0.0; w * h]);
            for &i in chunk {
                let (sx, sy) = (rhs.ax()[i], rhs.ay()[i]);
                for (j, g) in spread(i) {
                    ax[j] -= g * sx;
                    ay[j] -= g * sy;
                }
            }
            (ax, ay)
        })
        .collect();
    let (mut ax, mut ay) = (vec![0.0; w * h], vec![0.0; w * h]);
    for (px, py) in parts {
        ax.iter_mut().zip(px).for_each(|(a, b)| *a += b);
        ay.iter_mut().zip(py).for_each(|(a, b)| *a += b);
    }
    VectorField2D::new(w, h, rhs.spacing(), ax, ay)
}

/// One squared difference of the directional energy: `c·(Σ w_j a(q_j) - a(p))²`.
#[derive(Debug, Clone, Copy)]
struct Term {
    p: u32,
    nodes: [(u32, f64); 4],
    len: u8,
    c: f64,
}

/// Matrix-free `I + Σ_terms c·r rᵀ`, where each `r` is a one-sided
/// difference along a pixel's transport direction in either sense.
struct ScreenedOperator {
    n: usize,
    terms: Vec<Term>,
    diag: Vec<f64>,
}

impl ScreenedOperator {
    fn new(dirs: &DirectionField, weights: DirectionalWeights, spacing: f64) -> Self {
        let (w, h) = (dirs.width(), dirs.height());
        let mut terms = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let Some((d1x, d1y)) = dirs.get(x, y) else { continue };
                let p = (y * w + x) as u32;
                for (wt, (dx, dy)) in [(weights.w1, (d1x, d1y)), (weights.w3, (-d1y, d1x))] {
                    if wt == 0.0 {
                        continue;
                    }
                    // Step to the next grid line so axis and diagonal
                    // directions land on nodes.
                    let step = 1.0 / dx.abs().max(dy.abs());
                    let c = 0.5 * wt / (step * spacing).powi(2);
                    for sign in [1.0, -1.0] {
                        let (qx, qy) = (x as f64 + sign * dx * step, y as f64 + sign * dy * step);
                        let mut term = Term {
                            p,
                            nodes: [(0, 0.0); 4],
                            len: 0,
                            c,
                        };
                        for (ix, iy, bw) in bilinear_weights(qx, qy) {
                            if bw == 0.0 {
                                continue;
                            }
                            let q = (reflect(iy, h) * w + reflect(ix, w)) as u32;
                            if let Some(slot) = term.nodes[..term.len as usize].iter_mut().find(|s| s.0 == q) {
                                slot.1 += bw;
                            } else {
                                term.nodes[term.len as usize] = (q, bw);
                                term.len += 1;
                            }
                        }
                        terms.push(term);
                    }
                }
            }
        }
        let n = w * h;
        let mut diag = vec![1.0; n];
        for t in &terms {
            let mut self_coef = -1.0;
            for &(q, bw) in &t.nodes[..t.len as usize] {
                if q == t.p {
                    self_coef += bw;
                } else {
                    diag[q as usize] += t.c * bw * bw;
                }
            }
            diag[t.p as usize] += t.c * self_coef * self_coef;
        }
        Self { n, terms, diag }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
        for t in &self.terms {
            let nodes = &t.nodes[..t.len as usize];
            let diff = nodes.iter().map(|&(q, bw)| bw * x[q as usize]).sum::<f64>() - x[t.p as usize];
            let cd = t.c * diff;
            out[t.p as usize] -= cd;
            for &(q, bw) in nodes {
                out[q as usize] += cd * bw;
            }
        }
    }

    /// Jacobi-preconditioned CG for `(I + M) a = b`, warm-started at `x`.
    fn solve(&self, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<usize> {
        let n = self.n;
        let bnorm = dot(b, b).sqrt();
        if bnorm == 0.0 {
            x.iter_mut().for_each(|v| *v = 0.0);
            return Ok(0);
        }
        let mut r = vec![0.0; n];
        self.apply(x, &mut r);
        for i in 0..n {
            r[i] = b[i] - r[i];
        }
        let mut z: Vec<f64> = r.iter().zip(&self.diag).map(|(a, d)| a / d).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut ap = vec![0.0; n];
        for it in 0..max_iter {
            if dot(&r, &r).sqrt() <= tol * bnorm {
                return Ok(it);
            }
            self.apply(&p, &mut ap);
            let alpha = rz / dot(&p, &ap);
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            for i in 0..n {
                z[i] = r[i] / self.diag[i];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        let res = dot(&r, &r).sqrt() / bnorm;
        if res <= tol {
            return Ok(max_iter);
        }
        Err(Error::Solver {
            solver: "screened-cg",
            iterations: max_iter,
            residual: res,
        })
    }
}

/// Solves `(w1·X1² + w3·X3² - 1) a = rhs` per component with the directions
/// frozen, starting from `initial`.
pub fn screened_inner_solve(
    rhs: &VectorField2D,
    dirs: &DirectionField,
    weights: DirectionalWeights,
    initial: Option<&VectorField2D>,
    opts: &ScreenedOptions,
) -> Result<VectorField2D> {
    weights.validate()?;
    if dirs.width() != rhs.width() || dirs.height() != rhs.height() {
        return Err(Error::Size("direction field and rhs differ in shape".into()));
    }
    let op = ScreenedOperator::new(dirs, weights, rhs.spacing());
    let mut comps = Vec::with_capacity(2);
    for c in 0..2 {
        let b: Vec<f64> = rhs.component(c).data().iter().map(|v| -v).collect();
        let mut x = match initial {
            Some(a) => a.component(c).into_data(),
            None => vec![0.0; b.len()],
        };
        op.solve(&b, &mut x, opts.inner_tolerance, opts.inner_max)?;
        comps.push(x);
    }
    let ay = comps.pop().unwrap();
    let ax = comps.pop().unwrap();
    Ok(VectorField2D::new(rhs.width(), rhs.height(), rhs.spacing(), ax, ay)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScreenedSolution {
    pub field: VectorField2D,
    pub outer_iterations: usize,
    pub converged: bool,
    pub last_update: f64,
}

fn is_zero(a: &VectorField2D) -> bool {
    a.ax().iter().chain(a.ay()).all(|v| *v == 0.0)
}

/// Lagged-direction fixed point for `(w1·X_{1,A}² + w3·X_{3,A}²) A - A = rhs`.
///
/// Each outer pass freezes the directions of the current iterate (of `rhs`
/// while the iterate is still zero) and solves the resulting linear problem.
pub fn screened_directional_solve(
    rhs: &VectorField2D,
    a0: &VectorField2D,
    weights: DirectionalWeights,
    opts: &ScreenedOptions,
) -> Result<ScreenedSolution> {
    weights.validate()?;
    if !rhs.same_shape(a0) {
        return Err(Error::Size("rhs and initial field differ in shape".into()));
    }
    if is_zero(rhs) {
        return Ok(ScreenedSolution {
            field: VectorField2D::zeros(rhs.width(), rhs.height()).with_spacing(rhs.spacing()),
            outer_iterations: 0,
            converged: true,
            last_update: 0.0,
        });
    }
    if opts.characteristic {
        return Ok(ScreenedSolution {
            field: characteristic_solve(rhs, weights, opts)?,
            outer_iterations: 1,
            converged: true,
            last_update: 0.0,
        });
    }
    let mut a = a0.clone().with_spacing(rhs.spacing());
    let mut updates: Vec<f64> = Vec::new();
    for outer in 0..opts.outer_max {
        let source = if is_zero(&a) { rhs } else { &a };
        let dirs = DirectionField::from_vector_field_with_floor(source, opts.sigma_dir, opts.direction_floor);
        let next = screened_inner_solve(rhs, &dirs, weights, Some(&a), opts)?;
        let diff = (0..next.ax().len())
            .map(|i| (next.ax()[i] - a.ax()[i]).powi(2) + (next.ay()[i] - a.ay()[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = next.norm().max(f64::MIN_POSITIVE);
        let update = diff / scale;
        log::debug!("screened outer {outer}: update {update:.3e}, {} directed pixels", dirs.defined_count());
        a = next;
        updates.push(update);
        if update < opts.outer_tolerance {
            return Ok(ScreenedSolution {
                field: a,
                outer_iterations: outer + 1,
                converged: true,
                last_update: update,
            });
        }
        let k = updates.len();
        if k > 5 && updates[k - 1] > 10.0 * updates[k - 6] {
            return Err(Error::Solver {
                solver: "screened-outer",
                iterations: k,
                residual: update,
            });
        }
    }
    Ok(ScreenedSolution {
        field: a,
        outer_iterations: opts.outer_max,
        converged: false,
        last_update: updates.last().copied().unwrap_or(0.0),
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    fn real_lift(w: usize, h: usize, n: usize, f: impl Fn(f64, f64, f64) -> f64) -> LiftedField3D {
        LiftedField3D::from_fn(w, h, n, |x, y, k| Complex64::new(f(x as f64, y as f64, k as f64 * PI / n as f64), 0.0))
    }

    #[test]
    fn constant_field_is_annihilated() {
        let f = real_lift(5, 4, 8, |_, _, _| 3.0);
        for which in [Frame::X1, Frame::X2, Frame::X3] {
            assert!(apply_x(&f, which).max_modulus() == 0.0);
        }
        assert_eq!(commutator_check(&f), 0.0);
    }

    #[test]
    fn derivatives_of_x_coordinate() {
        let f = real_lift(8, 8, 8, |x, _, _| x);
        let x1 = apply_x(&f, Frame::X1);
        let x2 = apply_x(&f, Frame::X2);
        let x3 = apply_x(&f, Frame::X3);
        for y in 0..8 {
            for x in 1..7 {
                for k in 0..8 {
                    let t = k as f64 * PI / 8.0;
                    assert!((x1.get(x, y, k).re - t.cos()).abs() < 1e-12);
                    assert!((x3.get(x, y, k).re + t.sin()).abs() < 1e-12);
                    assert_eq!(x2.get(x, y, k).re, 0.0);
                }
            }
        }
    }

    #[test]
    fn derivative_of_theta_on_a_strip() {
        let f = real_lift(3, 3, 16, |_, _, t| t);
        let x2 = apply_x(&f, Frame::X2);
        for k in 1..15 {
            assert!((x2.get(1, 1, k).re - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn commutator_defect_shrinks_under_refinement() {
        // f = sin(x/L) sin θ sampled on two grids covering the same domain.
        let defect = |n: usize, cells: usize| {
            let h = 32.0 / cells as f64;
            let f = LiftedField3D::from_fn(cells, cells, n, |x, y, k| {
                let (xs, ys) = (x as f64 * h, y as f64 * h);
                let t = k as f64 * PI / n as f64;
                Complex64::new((xs / 6.0).sin() * t.sin() + (ys / 5.0).cos() * (2.0 * t).cos(), 0.0)
            })
            .with_spacing(h);
            commutator_check(&f)
        };
        let coarse = defect(16, 16);
        let fine = defect(32, 32);
        assert!(coarse > 0.0);
        assert!(coarse / fine > 1.8, "coarse {coarse} fine {fine}");
    }

    #[test]
    fn commutator_of_x_sin_theta() {
        // [X1,X2] f = sin²θ and X3 f = -sin²θ for f = x sinθ.
        let f = real_lift(8, 8, 64, |x, _, t| x * t.sin());
        assert!(commutator_check(&f) < 5e-3);
    }

    #[test]
    fn apply_x2d_examples() {
        let f = ScalarField2D::from_fn(6, 5, |x, _| x as f64);
        let a = VectorField2D::from_fn(6, 5, |_, _| (0.0, 1.0));
        let out = apply_x2d(&f, &a).unwrap();
        for y in 0..5 {
            for x in 1..5 {
                assert!((out.get(x, y) - 1.0).abs() < 1e-14);
            }
        }
        assert_eq!(apply_x2d(&f, &VectorField2D::zeros(6, 5)).unwrap().max_abs(), 0.0);
        let c = ScalarField2D::filled(6, 5, 2.0);
        assert_eq!(apply_x2d(&c, &a).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn divergence_of_forward_gradient_is_laplacian() {
        let u = ScalarField2D::from_fn(7, 5, |x, y| ((x * 3 + y * 5) % 7) as f64 * 0.3);
        let a = divergence(&forward_gradient(&u));
        let b = laplacian(&u);
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn poisson_of_zero_is_zero() {
        let u = poisson_solve_neumann(&ScalarField2D::zeros(8, 8)).unwrap();
        assert_eq!(u.max_abs(), 0.0);
    }

    #[test]
    fn poisson_recovers_manufactured_solution() {
        let n = 128;
        let hs = 1.0 / n as f64;
        let g = |x: usize| (PI * (x as f64 + 0.5) * hs).cos();
        let k2 = PI * PI;
        let f = ScalarField2D::from_fn(n, n, |x, _| -k2 * g(x)).with_spacing(hs);
        let u = poisson_solve_neumann(&f).unwrap();
        let gm = (0..n).map(g).sum::<f64>() / n as f64;
        let err = (0..n).map(|x| (u.get(x, 7) - (g(x) - gm)).abs()).fold(0.0, f64::max);
        assert!(err < 1e-4, "err {err}");
        assert!(u.mean().abs() < 1e-12);
    }

    #[test]
    fn poisson_point_sources_satisfy_discrete_equation() {
        let f = ScalarField2D::from_fn(24, 20, |x, y| match (x, y) {
            (12, 10) => 1.0,
            (0, 0) => -1.0,
            _ => 0.0,
        });
        let u = poisson_solve_neumann(&f).unwrap();
        let lap = laplacian(&u);
        let fm = f.mean();
        let err = lap.data().iter().zip(f.data()).map(|(l, v)| (l - (v - fm)).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn poisson_cap_reports_solver_error() {
        let f = ScalarField2D::from_fn(32, 32, |x, y| ((x + 2 * y) % 5) as f64);
        let opts = PoissonOptions {
            tolerance: 1e-12,
            max_iterations: 3,
        };
        assert!(matches!(poisson_solve_neumann_with(&f, &opts), Err(Error::Solver { .. })));
    }

    /// Thomas algorithm for the Neumann system `(∂xx - 1) a = r` with unit spacing.
    fn tridiagonal_oracle(r: &[f64], w: f64, h: f64) -> Vec<f64> {
        let n = r.len();
        let k = w / (h * h);
        // -(k)a_{i-1} + (1 + 2k) a_i - k a_{i+1} = -r_i, ends have 1 + k
        let mut lower = vec![-k; n];
        let mut upper = vec![-k; n];
        let mut diag = vec![1.0 + 2.0 * k; n];
        diag[0] = 1.0 + k;
        diag[n - 1] = 1.0 + k;
        lower[0] = 0.0;
        upper[n - 1] = 0.0;
        let mut rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        for i in 1..n {
            let m = lower[i] / diag[i - 1];
            diag[i] -= m * upper[i - 1];
            rhs[i] -= m * rhs[i - 1];
        }
        let mut out = vec![0.0; n];
        out[n - 1] = rhs[n - 1] / diag[n - 1];
        for i in (0..n - 1).rev() {
            out[i] = (rhs[i] - upper[i] * out[i + 1]) / diag[i];
        }
        out
    }

    #[test]
    fn horizontal_inner_solve_matches_tridiagonal_oracle() {
        let (w, h) = (40, 3);
        let r: Vec<f64> = (0..w).map(|x| if (10..14).contains(&x) { 1.0 } else { 0.0 }).collect();
        let hs = 0.25;
        let rhs = VectorField2D::from_fn(w, h, |x, _| (r[x], -0.5 * r[x])).with_spacing(hs);
        let dirs = DirectionField::uniform(w, h, (1.0, 0.0));
        let opts = ScreenedOptions {
            inner_tolerance: 1e-12,
            ..Default::default()
        };
        let weights = DirectionalWeights { w1: 1.0, w3: 0.0 };
        let a = screened_inner_solve(&rhs, &dirs, weights, None, &opts).unwrap();
        let want = tridiagonal_oracle(&r, 1.0, hs);
        for y in 0..h {
            for x in 0..w {
                let (ax, ay) = a.get(x, y);
                assert!((ax - want[x]).abs() < 1e-6);
                assert!((ay + 0.5 * want[x]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn inner_solve_is_linear_in_rhs() {
        let (w, h) = (16, 12);
        let rhs = VectorField2D::from_fn(w, h, |x, y| (((x * y) % 3) as f64, (x as f64 - 8.0) * 0.1));
        let dirs = DirectionField::from_fn(w, h, |x, y| Some((1.0 + 0.1 * y as f64, 0.05 * x as f64)));
        let weights = DirectionalWeights { w1: 0.5, w3: 0.05 };
        let opts = ScreenedOptions {
            inner_tolerance: 1e-13,
            ..Default::default()
        };
        let a = screened_inner_solve(&rhs, &dirs, weights, None, &opts).unwrap();
        let b = screened_inner_solve(&rhs.scale(2.0), &dirs, weights, None, &opts).unwrap();
        for i in 0..w * h {
            assert!((2.0 * a.ax()[i] - b.ax()[i]).abs() < 1e-9);
            assert!((2.0 * a.ay()[i] - b.ay()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn screened_solve_of_zero_is_zero() {
        let z = VectorField2D::zeros(8, 8);
        let s = screened_directional_solve(&z, &z, DirectionalWeights { w1: 1.0, w3: 0.0 }, &Default::default()).unwrap();
        assert!(s.converged);
        assert_eq!(s.field.norm(), 0.0);
    }

    #[test]
    fn screened_solve_transports_along_an_edge() {
        // A short horizontal segment of vertical gradient spreads along x.
        let (w, h) = (64, 16);
        let rhs = VectorField2D::from_fn(w, h, |x, y| if y == 8 && (4..12).contains(&x) { (0.0, -1.0) } else { (0.0, 0.0) })
            .with_spacing(1.0 / 16.0);
        let s = screened_directional_solve(&rhs, &VectorField2D::zeros(w, h), DirectionalWeights { w1: 1.0, w3: 0.0 }, &Default::default())
            .unwrap();
        let a = s.field;
        assert!(a.get(30, 8).1 > 0.05 * a.get(8, 8).1);
        assert!(a.get(30, 3).1.abs() < 1e-3 * a.get(8, 8).1);
        assert!(a.ax().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn rejects_invalid_weights() {
        let z = VectorField2D::zeros(4, 4);
        assert!(screened_directional_solve(&z, &z, DirectionalWeights { w1: 0.0, w3: 0.0 }, &Default::default()).is_err());
    }

    fn characteristic() -> ScreenedOptions {
        ScreenedOptions {
            characteristic: true,
            decay_floor: 1e-14,
            sigma_dir: 1.0,
            inner_tolerance: 1e-13,
            ..Default::default()
        }
    }

    #[test]
    fn characteristic_solve_matches_grid_solve_on_a_straight_edge() {
        let (w, h) = (128, 9);
        let rhs = VectorField2D::from_fn(w, h, |x, y| if y == 4 && (50..78).contains(&x) { (0.0, 1.0) } else { (0.0, 0.0) });
        let weights = DirectionalWeights { w1: 4.0, w3: 0.0 };
        let opts = characteristic();
        let a = characteristic_solve(&rhs, weights, &opts).unwrap();
        let grid = screened_inner_solve(&rhs, &DirectionField::uniform(w, h, (1.0, 0.0)), weights, None, &opts).unwrap();
        for i in 0..w * h {
            assert!((a.ay()[i] - grid.ay()[i]).abs() < 1e-9, "pixel {i}");
            assert_eq!(a.ax()[i], 0.0);
        }
        let via_solve = screened_directional_solve(&rhs, &VectorField2D::zeros(w, h), weights, &opts).unwrap();
        assert_eq!(via_solve.field, a);
        assert_eq!(via_solve.outer_iterations, 1);
    }

    #[test]
    fn characteristic_spread_conserves_the_source_total() {
        // A diagonal edge, widened laterally.
        let n = 96;
        let rhs = VectorField2D::from_fn(n, n, |x, y| if x == y && (40..56).contains(&x) { (0.5, -0.5) } else { (0.0, 0.0) });
        let a = characteristic_solve(&rhs, DirectionalWeights { w1: 9.0, w3: 1.0 }, &characteristic()).unwrap();
        let total: f64 = a.ax().iter().sum();
        assert!((total + 16.0 * 0.5).abs() < 1e-6, "{total}");
        // Along the edge line far beyond the source, across it only nearby.
        assert!(a.get(70, 70).0.abs() > 10.0 * a.get(62, 78).0.abs());
    }

    #[test]
    fn incoherent_sources_stay_in_place() {
        let rhs = VectorField2D::from_fn(9, 9, |x, y| if (x, y) == (4, 4) { (1.0, 0.0) } else if (x, y) == (5, 4) { (0.0, 1.0) } else { (0.0, 0.0) });
        let opts = ScreenedOptions {
            min_coherence: 1.1,
            ..characteristic()
        };
        let a = characteristic_solve(&rhs, DirectionalWeights { w1: 1.0, w3: 0.0 }, &opts).unwrap();
        assert_eq!(a, rhs.scale(-1.0));
    }
}
