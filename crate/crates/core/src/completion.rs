//! Variational completion: the functionals `L1 = Σ|∇(I-u)|²`,
//! `L2 = Σ|X_{1,A}A|²`, `L3 = Σ|∇u - A|²`, and the staged solver that turns
//! an image into an activity `u`, a completion field `A` and a perceived
//! brightness `b = (I+u)/2`.
//!
//! All gradients here are centered differences with half-sample reflective
//! borders, the same operator the functionals are written with.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::{lift_image, GaborBank};
use crate::geometry::{
    apply_x2d, centered_gradient, divergence, laplacian, poisson_solve_neumann_with, screened_directional_solve,
    DirectionalWeights, PoissonOptions, ScreenedOptions, DEGENERATE_EPS,
};
use crate::grid::{reflect, ScalarField2D, VectorField2D};
use crate::kernels::Kernel3D;
use crate::registry::Registry;
use crate::spectral::{group, GroupingConfig};

fn check_shape(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Size(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

pub fn eval_l1(u: &ScalarField2D, image: &ScalarField2D) -> Result<f64> {
    let d = image.zip_map(u, |i, u| i - u)?;
    let (gx, gy) = centered_gradient(&d);
    Ok(gx.iter().zip(&gy).map(|(a, b)| a * a + b * b).sum())
}

pub fn eval_l2(a: &VectorField2D) -> f64 {
    (0..2)
        .map(|c| {
            let comp = a.component(c);
            apply_x2d(&comp, a).expect("same shape").data().iter().map(|v| v * v).sum::<f64>()
        })
        .sum()
}

/// `Σ|X_{3,A}A|²`, the transverse counterpart of [`eval_l2`].
pub fn eval_x3(a: &VectorField2D) -> f64 {
    let (w, h) = (a.width(), a.height());
    (0..2)
        .map(|c| {
            let (gx, gy) = centered_gradient(&a.component(c));
            (0..w * h)
                .map(|i| {
                    let (a1, a2) = (a.ax()[i], a.ay()[i]);
                    let m = a1.hypot(a2);
                    if m < DEGENERATE_EPS {
                        0.0
                    } else {
                        ((a1 * gx[i] + a2 * gy[i]) / m).powi(2)
                    }
                })
                .sum::<f64>()
        })
        .sum()
}

pub fn eval_l3(u: &ScalarField2D, a: &VectorField2D) -> Result<f64> {
    check_shape((u.width(), u.height()), (a.width(), a.height()), "activity and field")?;
    let (gx, gy) = centered_gradient(u);
    Ok((0..u.len())
        .map(|i| (gx[i] - a.ax()[i]).powi(2) + (gy[i] - a.ay()[i]).powi(2))
        .sum())
}

/// Adjoint of the centered gradient: `Gᵀ(gx, gy)`.
fn gradient_adjoint(w: usize, h: usize, spacing: f64, gx: &[f64], gy: &[f64]) -> Vec<f64> {
    let s = 2.0 * spacing;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (xi, yi) = (x as isize, y as isize);
            out[y * w + reflect(xi + 1, w)] += gx[i] / s;
            out[y * w + reflect(xi - 1, w)] -= gx[i] / s;
            out[reflect(yi + 1, h) * w + x] += gy[i] / s;
            out[reflect(yi - 1, h) * w + x] -= gy[i] / s;
        }
    }
    out
}

/// `∂L1/∂u = 2Gᵀ G(u - I)`, which is `2(Δ_G I - Δ_G u)` for the wide
/// Laplacian `Δ_G = -GᵀG`.
pub fn grad_l1(u: &ScalarField2D, image: &ScalarField2D) -> Result<ScalarField2D> {
    let d = u.zip_map(image, |u, i| u - i)?;
    let (gx, gy) = centered_gradient(&d);
    let g = gradient_adjoint(u.width(), u.height(), u.spacing(), &gx, &gy);
    ScalarField2D::new(u.width(), u.height(), u.spacing(), g.into_iter().map(|v| 2.0 * v).collect())
}

/// `∂L3/∂A = -2(∇u - A)`.
pub fn grad_l3_field(u: &ScalarField2D, a: &VectorField2D) -> Result<VectorField2D> {
    check_shape((u.width(), u.height()), (a.width(), a.height()), "activity and field")?;
    let (gx, gy) = centered_gradient(u);
    VectorField2D::new(
        u.width(),
        u.height(),
        a.spacing(),
        gx.iter().zip(a.ax()).map(|(g, a)| -2.0 * (g - a)).collect(),
        gy.iter().zip(a.ay()).map(|(g, a)| -2.0 * (g - a)).collect(),
    )
}

/// `∂L3/∂u = 2Gᵀ(∇u - A)`.
pub fn grad_l3_activity(u: &ScalarField2D, a: &VectorField2D) -> Result<ScalarField2D> {
    check_shape((u.width(), u.height()), (a.width(), a.height()), "activity and field")?;
    let (gx, gy) = centered_gradient(u);
    let rx: Vec<f64> = gx.iter().zip(a.ax()).map(|(g, a)| g - a).collect();
    let ry: Vec<f64> = gy.iter().zip(a.ay()).map(|(g, a)| g - a).collect();
    let g = gradient_adjoint(u.width(), u.height(), u.spacing(), &rx, &ry);
    ScalarField2D::new(u.width(), u.height(), u.spacing(), g.into_iter().map(|v| 2.0 * v).collect())
}

/// `L1 + L3 + w1·L2 + w3·Σ|X_{3,A}A|²`.
pub fn lagrangian(u: &ScalarField2D, a: &VectorField2D, image: &ScalarField2D, weights: DirectionalWeights) -> Result<f64> {
    let mut total = eval_l1(u, image)? + eval_l3(u, a)?;
    if weights.w1 != 0.0 {
        total += weights.w1 * eval_l2(a);
    }
    if weights.w3 != 0.0 {
        total += weights.w3 * eval_x3(a);
    }
    Ok(total)
}

/// How the completion field is regularized: the weights of the
/// longitudinal and transverse terms of its Lagrangian.
pub trait CompletionMode: Send + Sync {
    fn name(&self) -> &'static str;
    fn weights(&self, epsilon: f64) -> DirectionalWeights;
}

/// Purely sub-Riemannian: transport along `X_{1,A}` only.
pub struct Horizontal;

impl CompletionMode for Horizontal {
    fn name(&self) -> &'static str {
        "horizontal"
    }

    fn weights(&self, _epsilon: f64) -> DirectionalWeights {
        DirectionalWeights { w1: 1.0, w3: 0.0 }
    }
}

/// Halved longitudinal term plus a Riemannian `ε·|X_{3,A}A|²`.
pub struct Diagonal;

impl CompletionMode for Diagonal {
    fn name(&self) -> &'static str {
        "diagonal"
    }

    fn weights(&self, epsilon: f64) -> DirectionalWeights {
        DirectionalWeights { w1: 0.5, w3: epsilon }
    }
}

pub static COMPLETION_MODES: Registry<dyn CompletionMode> = Registry::new(
    "completion mode",
    &[("horizontal", || Box::new(Horizontal)), ("diagonal", || Box::new(Diagonal))],
);

pub fn completion_mode(name: &str) -> Result<Box<dyn CompletionMode>> {
    COMPLETION_MODES.create(name)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SolverCaps {
    pub sigma_dir: f64,
    pub direction_floor: f64,
    pub characteristic: bool,
    pub min_coherence: f64,
    pub decay_floor: f64,
    pub outer_max: usize,
    pub outer_tolerance: f64,
    pub inner_tolerance: f64,
    pub inner_max: usize,
    pub poisson_tolerance: f64,
    pub poisson_max_iterations: usize,
}

impl Default for SolverCaps {
    fn default() -> Self {
        let s = ScreenedOptions::default();
        let p = PoissonOptions::default();
        Self {
            sigma_dir: 4.0,
            direction_floor: 1e-2,
            characteristic: true,
            min_coherence: s.min_coherence,
            decay_floor: s.decay_floor,
            outer_max: s.outer_max,
            outer_tolerance: s.outer_tolerance,
            inner_tolerance: s.inner_tolerance,
            inner_max: s.inner_max,
            poisson_tolerance: p.tolerance,
            poisson_max_iterations: p.max_iterations,
        }
    }
}

impl SolverCaps {
    pub fn screened(&self) -> ScreenedOptions {
        ScreenedOptions {
            sigma_dir: self.sigma_dir,
            direction_floor: self.direction_floor,
            characteristic: self.characteristic,
            min_coherence: self.min_coherence,
            decay_floor: self.decay_floor,
            outer_max: self.outer_max,
            outer_tolerance: self.outer_tolerance,
            inner_tolerance: self.inner_tolerance,
            inner_max: self.inner_max,
        }
    }

    pub fn poisson(&self) -> PoissonOptions {
        PoissonOptions {
            tolerance: self.poisson_tolerance,
            max_iterations: self.poisson_max_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct CompletionConfig {
    pub mode: String,
    /// Riemannian coefficient; only the diagonal mode reads it.
    pub epsilon: f64,
    /// Grid spacing of the variational problem. The completion field decays
    /// over `√w1 / spacing` pixels along its own direction.
    pub spacing: f64,
    pub grouping: GroupingConfig,
    /// Units whose saliency reaches this fraction of the first unit's make up
    /// the inducers.
    pub mask_saliency_ratio: f64,
    /// Radius in pixels by which the inducer pixels are grown into the mask
    /// of the field equation's source.
    pub mask_dilation: usize,
    /// Extra rounds of the field and activity stages.
    pub fixpoint: usize,
    pub solver: SolverCaps,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            mode: "horizontal".into(),
            epsilon: 0.001,
            spacing: 1.0 / 64.0,
            grouping: GroupingConfig {
                n_units: 48,
                ..GroupingConfig::default()
            },
            mask_saliency_ratio: 0.6,
            mask_dilation: 2,
            fixpoint: 0,
            solver: SolverCaps::default(),
        }
    }
}

impl CompletionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be nonnegative, got {}", self.epsilon)));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::Config(format!("spacing must be positive, got {}", self.spacing)));
        }
        if !(0.0..=1.0).contains(&self.mask_saliency_ratio) {
            return Err(Error::Config(format!(
                "mask saliency ratio must lie in [0, 1], got {}",
                self.mask_saliency_ratio
            )));
        }
        let w = self.weights()?;
        if w.w1 <= 0.0 {
            return Err(Error::Config("longitudinal weight must be positive".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> Result<DirectionalWeights> {
        Ok(completion_mode(&self.mode)?.weights(self.epsilon))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StageDiagnostics {
    pub stage: String,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    /// Solver residual or last update of the stage, when it has one.
    pub residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Diagnostics {
    pub stages: Vec<StageDiagnostics>,
    /// Why the field stages were skipped, if they were.
    pub degenerate: Option<String>,
    pub unit_saliency: Option<f64>,
    /// Units pooled into the inducer mask.
    pub mask_units: usize,
    pub mask_pixels: usize,
    pub outer_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub u: ScalarField2D,
    pub a: VectorField2D,
    pub b: ScalarField2D,
    pub diagnostics: Diagnostics,
}

fn stage(name: &str, u: &ScalarField2D, a: &VectorField2D, image: &ScalarField2D, residual: Option<f64>) -> Result<StageDiagnostics> {
    Ok(StageDiagnostics {
        stage: name.into(),
        l1: eval_l1(u, image)?,
        l2: eval_l2(a),
        l3: eval_l3(u, a)?,
        residual,
    })
}

/// Poisson solve with the solution's mean set to the image's, so a
/// constant image is its own activity.
fn anchored_poisson(f: &ScalarField2D, mean: f64, opts: &PoissonOptions) -> Result<ScalarField2D> {
    Ok(poisson_solve_neumann_with(f, opts)?.map(|v| v + mean))
}

fn poisson_residual(u: &ScalarField2D, f: &ScalarField2D) -> f64 {
    let fm = f.mean();
    let lap = laplacian(u);
    let num: f64 = lap.data().iter().zip(f.data()).map(|(l, f)| (l - (f - fm)).powi(2)).sum();
    num.sqrt() / f.norm().max(f64::MIN_POSITIVE)
}

/// Disk dilation of a pixel list into a mask.
pub fn dilate(pixels: &[(usize, usize)], width: usize, height: usize, radius: usize) -> Vec<bool> {
    let mut mask = vec![false; width * height];
    let r = radius as isize;
    for &(x, y) in pixels {
        for dy in -r..=r {
            for dx in -r..=r {
                let (qx, qy) = (x as isize + dx, y as isize + dy);
                if dx * dx + dy * dy <= r * r && qx >= 0 && qy >= 0 && (qx as usize) < width && (qy as usize) < height {
                    mask[qy as usize * width + qx as usize] = true;
                }
            }
        }
    }
    mask
}

/// `-∇u` on the mask, zero elsewhere.
fn masked_source(u: &ScalarField2D, mask: &[bool]) -> Result<VectorField2D> {
    let (gx, gy) = centered_gradient(u);
    let keep = |g: Vec<f64>| -> Vec<f64> { g.into_iter().zip(mask).map(|(v, &m)| if m { -v } else { 0.0 }).collect() };
    VectorField2D::new(u.width(), u.height(), u.spacing(), keep(gx), keep(gy))
}

fn brightness(image: &ScalarField2D, u: &ScalarField2D) -> Result<ScalarField2D> {
    image.zip_map(u, |i, u| (i + u) / 2.0)
}

/// Staged completion:
/// 1. `u₁` solves `Δu₁ = ½ΔI`;
/// 2. `u₁` is lifted and grouped; the points of the units whose saliency
///    is within `mask_saliency_ratio` of the first, dilated, become the mask;
/// 3. `A` solves the screened directional equation with source `-∇u₁` on
///    the mask;
/// 4. `u` solves `Δu = ½(ΔI + div A)`;
/// 5. `b = (I+u)/2`.
///
/// When grouping finds nothing to complete, the first-stage activity is
/// returned with `A = 0` and the reason in the diagnostics.
pub fn complete(
    image: &ScalarField2D,
    cfg: &CompletionConfig,
    kernel: &Kernel3D,
    bank: &GaborBank,
    seed: u64,
) -> Result<CompletionResult> {
    cfg.validate()?;
    if image.is_empty() {
        return Err(Error::EmptyInput("image has no pixels".into()));
    }
    let weights = cfg.weights()?;
    let popts = cfg.solver.poisson();
    let img = image.clone().with_spacing(cfg.spacing);
    let (w, h) = (img.width(), img.height());
    let mean = img.mean();
    let lap_i = laplacian(&img);
    let zero = VectorField2D::zeros(w, h).with_spacing(cfg.spacing);

    let f1 = lap_i.map(|v| 0.5 * v);
    let u1 = anchored_poisson(&f1, mean, &popts)?;
    let mut diagnostics = Diagnostics::default();
    diagnostics.stages.push(stage("particle", &u1, &zero, &img, Some(poisson_residual(&u1, &f1)))?);

    let degenerate = |reason: String, mut diagnostics: Diagnostics| -> Result<CompletionResult> {
        log::warn!("{}", Error::CompletionDegenerate(reason.clone()));
        diagnostics.degenerate = Some(reason);
        Ok(CompletionResult {
            b: brightness(&img, &u1)?,
            u: u1.clone(),
            a: zero.clone(),
            diagnostics,
        })
    };

    let (lo, hi) = u1.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo <= 1e-12 * u1.max_abs() {
        return degenerate("first-stage activity is constant".into(), diagnostics);
    }
    let lift = lift_image(&u1, bank)?;
    let grouping = match group(&lift, kernel, &cfg.grouping, seed) {
        Ok(g) => g,
        Err(Error::EmptyInput(reason)) => return degenerate(reason, diagnostics),
        Err(e) => return Err(e),
    };
    let Some(first) = grouping.units.first().filter(|u| !u.members.is_empty()) else {
        return degenerate("grouping produced no unit".into(), diagnostics);
    };
    diagnostics.unit_saliency = Some(first.saliency);
    let cut = cfg.mask_saliency_ratio * first.saliency;
    let inducers: Vec<_> = grouping.units.iter().take_while(|u| u.saliency >= cut).collect();
    diagnostics.mask_units = inducers.len();
    let mut indices: Vec<usize> = inducers.iter().flat_map(|u| u.members.iter().copied()).collect();
    indices.sort_unstable();
    indices.dedup();
    let pixels: Vec<(usize, usize)> = indices
        .into_iter()
        .map(|m| (grouping.support.points[m].x, grouping.support.points[m].y))
        .collect();
    let mask = dilate(&pixels, w, h, cfg.mask_dilation);
    diagnostics.mask_pixels = mask.iter().filter(|&&m| m).count();

    let sopts = cfg.solver.screened();
    let mut rhs = masked_source(&u1, &mask)?;
    let mut a = zero.clone();
    let mut u = u1.clone();
    for round in 0..=cfg.fixpoint {
        let sol = screened_directional_solve(&rhs, &a, weights, &sopts)?;
        a = sol.field;
        diagnostics.outer_iterations += sol.outer_iterations;
        diagnostics
            .stages
            .push(stage(&format!("field-{round}"), &u, &a, &img, Some(sol.last_update))?);

        let div = divergence(&a);
        let f = lap_i.zip_map(&div, |l, d| 0.5 * (l + d))?;
        u = anchored_poisson(&f, mean, &popts)?;
        diagnostics
            .stages
            .push(stage(&format!("activity-{round}"), &u, &a, &img, Some(poisson_residual(&u, &f)))?);
        rhs = masked_source(&u, &mask)?;
    }
    Ok(CompletionResult {
        b: brightness(&img, &u)?,
        u,
        a,
        diagnostics,
    })
}

/// `q`-quantile of the values, by nearest rank.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[idx]
}

/// Fraction of contour samples where the bilinearly sampled `|A|` reaches
/// `τ` times the 99th percentile of `|A|` over the image. A field whose
/// 99th percentile vanishes closes nothing.
pub fn closure_score_field(a: &VectorField2D, contour: &[(f64, f64)], tau: f64) -> Result<f64> {
    if contour.is_empty() {
        return Err(Error::EmptyInput("ideal contour has no samples".into()));
    }
    let mag = a.magnitude();
    let p99 = quantile(mag.data(), 0.99);
    if p99 <= 0.0 {
        return Ok(0.0);
    }
    let cut = tau * p99;
    let hits = contour.iter().filter(|&&(x, y)| mag.sample_bilinear(x, y) >= cut).count();
    Ok(hits as f64 / contour.len() as f64)
}

pub fn closure_score(result: &CompletionResult, contour: &[(f64, f64)], tau: f64) -> Result<f64> {
    closure_score_field(&result.a, contour, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(w: usize, h: usize, seed: u64) -> ScalarField2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarField2D::from_fn(w, h, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn perturbed(f: &ScalarField2D, i: usize, d: f64) -> ScalarField2D {
        let mut v = f.data().to_vec();
        v[i] += d;
        ScalarField2D::new(f.width(), f.height(), f.spacing(), v).unwrap()
    }

    #[test]
    fn l1_vanishes_up_to_constants() {
        let i = random(6, 5, 1);
        assert_eq!(eval_l1(&i, &i).unwrap(), 0.0);
        assert!(eval_l1(&i.map(|v| v + 3.0), &i).unwrap() < 1e-24);
    }

    #[test]
    fn l1_of_a_ramp() {
        let i = ScalarField2D::from_fn(3, 3, |x, _| x as f64);
        // centered differences with mirrored borders: 1/2, 1, 1/2 per row
        let want = 3.0 * (0.25 + 1.0 + 0.25);
        assert!((eval_l1(&ScalarField2D::zeros(3, 3), &i).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn l1_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let (u, i) = (random(8, 8, seed), random(8, 8, seed + 100));
            let g = grad_l1(&u, &i).unwrap();
            let d = 1e-5;
            for k in 0..64 {
                let fd = (eval_l1(&perturbed(&u, k, d), &i).unwrap() - eval_l1(&perturbed(&u, k, -d), &i).unwrap()) / (2.0 * d);
                assert!((fd - g.data()[k]).abs() < 1e-5, "{k}: {fd} vs {}", g.data()[k]);
            }
        }
    }

    #[test]
    fn l1_gradient_is_a_wide_laplacian_difference() {
        let (u, i) = (random(8, 8, 4), random(8, 8, 5));
        let wide_lap = |f: &ScalarField2D| {
            let (gx, gy) = centered_gradient(f);
            gradient_adjoint(8, 8, 1.0, &gx, &gy).into_iter().map(|v| -v).collect::<Vec<_>>()
        };
        let (li, lu) = (wide_lap(&i), wide_lap(&u));
        let g = grad_l1(&u, &i).unwrap();
        for k in 0..64 {
            assert!((g.data()[k] - 2.0 * (li[k] - lu[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_vanishes_on_constant_and_zero_fields() {
        assert_eq!(eval_l2(&VectorField2D::from_fn(5, 4, |_, _| (0.3, -1.2))), 0.0);
        assert_eq!(eval_l2(&VectorField2D::zeros(5, 4)), 0.0);
    }

    #[test]
    fn l2_of_a_shear() {
        // A = (y + 1/2, 0): X1 = -∂y, so X1 A1 = -∂y A1 and X1 A2 = 0.
        let (w, h) = (4, 6);
        let a = VectorField2D::from_fn(w, h, |_, y| (y as f64 + 0.5, 0.0));
        let mut want = 0.0;
        for y in 0..h as isize {
            let up = if y + 1 < h as isize { y + 1 } else { y };
            let down = if y > 0 { y - 1 } else { 0 };
            want += w as f64 * ((up - down) as f64 / 2.0).powi(2);
        }
        assert!((eval_l2(&a) - want).abs() < 1e-12);
    }

    #[test]
    fn l3_examples() {
        let u = random(7, 5, 2);
        let (gx, gy) = centered_gradient(&u);
        let a = VectorField2D::new(7, 5, 1.0, gx, gy).unwrap();
        assert_eq!(eval_l3(&u, &a).unwrap(), 0.0);
        let ones = VectorField2D::from_fn(7, 5, |_, _| (1.0, 0.0));
        assert_eq!(eval_l3(&ScalarField2D::zeros(7, 5), &ones).unwrap(), 35.0);
        let b = VectorField2D::from_fn(7, 5, |x, y| ((x * y) as f64 * 0.1, x as f64 - 2.0));
        let s = 2.5;
        let l = eval_l3(&u, &b).unwrap();
        let ls = eval_l3(&u.map(|v| s * v), &b.scale(s)).unwrap();
        assert!((ls - s * s * l).abs() < 1e-10 * ls);
    }

    #[test]
    fn l3_gradients_match_finite_differences() {
        let d = 1e-5;
        for seed in 0..3 {
            let u = random(8, 8, seed);
            let ax = random(8, 8, seed + 10).into_data();
            let ay = random(8, 8, seed + 20).into_data();
            let a = VectorField2D::new(8, 8, 1.0, ax.clone(), ay.clone()).unwrap();
            let ga = grad_l3_field(&u, &a).unwrap();
            for k in 0..64 {
                for c in 0..2 {
                    let shifted = |s: f64| {
                        let (mut x, mut y) = (ax.clone(), ay.clone());
                        if c == 0 {
                            x[k] += s;
                        } else {
                            y[k] += s;
                        }
                        eval_l3(&u, &VectorField2D::new(8, 8, 1.0, x, y).unwrap()).unwrap()
                    };
                    let fd = (shifted(d) - shifted(-d)) / (2.0 * d);
                    let an = if c == 0 { ga.ax()[k] } else { ga.ay()[k] };
                    assert!((fd - an).abs() < 1e-5);
                }
            }
            let gu = grad_l3_activity(&u, &a).unwrap();
            for k in 0..64 {
                let fd = (eval_l3(&perturbed(&u, k, d), &a).unwrap() - eval_l3(&perturbed(&u, k, -d), &a).unwrap()) / (2.0 * d);
                assert!((fd - gu.data()[k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn mode_registry() {
        assert_eq!(COMPLETION_MODES.names(), vec!["horizontal", "diagonal"]);
        assert_eq!(completion_mode("horizontal").unwrap().weights(0.3), DirectionalWeights { w1: 1.0, w3: 0.0 });
        assert_eq!(completion_mode("diagonal").unwrap().weights(0.3), DirectionalWeights { w1: 0.5, w3: 0.3 });
        assert!(matches!(completion_mode("vertical"), Err(Error::UnknownStrategy { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(CompletionConfig::default().validate().is_ok());
        let bad = CompletionConfig {
            epsilon: -1.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = CompletionConfig {
            mode: "oblique".into(),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn closure_examples() {
        let contour: Vec<(f64, f64)> = (2..10).map(|x| (x as f64, 5.0)).collect();
        assert_eq!(closure_score_field(&VectorField2D::zeros(12, 12), &contour, 0.25).unwrap(), 0.0);
        let full = VectorField2D::from_fn(12, 12, |_, _| (0.0, 1.0));
        assert_eq!(closure_score_field(&full, &contour, 0.25).unwrap(), 1.0);
        let half = VectorField2D::from_fn(12, 12, |x, _| if x < 6 { (1.0, 0.0) } else { (0.0, 0.0) });
        assert_eq!(closure_score_field(&half, &contour, 0.25).unwrap(), 0.5);
        assert!(closure_score_field(&full, &[], 0.25).is_err());
    }

    #[test]
    fn dilation_is_a_disk() {
        let m = dilate(&[(5, 5)], 11, 11, 2);
        assert_eq!(m.iter().filter(|v| **v).count(), 13);
        assert!(m[5 * 11 + 7] && !m[7 * 11 + 7]);
    }
}
