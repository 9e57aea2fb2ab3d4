//! Connectivity kernels: the logarithmic LGN kernel, the Fokker–Planck
//! kernel of `X1 + κX2²` and its symmetrization, kernels learned from
//! co-occurrence histograms, and their planar projections.
//!
//! Group-stationary kernels are stored in the bisector frame of each pair:
//! for a source `(p, θp)` and target `(q, θq)` with wrapped difference
//! `Δθ ∈ (-π/2, π/2]`, the spatial offset is `R(-θ̄)(q - p)` with
//! `θ̄ = θp + Δθ/2`. Exchanging source and target negates every index, which
//! makes the group inverse a plain index reflection.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::{OrientationMap, Stencil};
use crate::grid::{bilinear_weights, wrap_theta, LiftedField3D, ScalarField2D};
use crate::io::{FieldMetadata, NgfField};

/// `log(Δx² + Δy²)` on `[-extent, extent]²`, with the origin set to the
/// value at half a pixel, `log(1/4)`. Weights are signed.
pub fn lgn_kernel(extent: usize) -> Result<Stencil> {
    if extent < 1 {
        return Err(Error::Config("log kernel extent must be at least 1".into()));
    }
    let r = extent as isize;
    let mut w = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for dy in -r..=r {
        for dx in -r..=r {
            let r2 = (dx * dx + dy * dy) as f64;
            w.push(if r2 == 0.0 { 0.25f64.ln() } else { r2.ln() });
        }
    }
    Stencil::new(extent, w)
}

/// Total activity `u = (K_LGN / 4π) * O` over the image domain, so that
/// `Δu ≈ O`. Outputs below `1e-12` of the peak are skipped as sources.
pub fn propagate_lgn(output: &ScalarField2D, kernel: &Stencil) -> Result<ScalarField2D> {
    let (w, h) = (output.width(), output.height());
    let r = kernel.radius();
    if w > r + 1 || h > r + 1 {
        return Err(Error::Size(format!(
            "log kernel radius {r} does not reach across a {w}x{h} image"
        )));
    }
    let floor = 1e-12 * output.max_abs();
    let sources: Vec<(isize, isize, f64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter_map(|(x, y)| {
            let v = output.get(x, y);
            (v.abs() > floor).then_some((x as isize, y as isize, v))
        })
        .collect();
    let norm = 1.0 / (4.0 * PI);
    let data: Vec<f64> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            norm * sources.iter().map(|&(sx, sy, v)| kernel.at(x - sx, y - sy) * v).sum::<f64>()
        })
        .collect();
    ScalarField2D::new(w, h, output.spacing(), data)
}

/// Signed orientation offset in `(-n/2, n/2]`.
#[inline]
pub fn signed_dk(dk: isize, n_theta: usize) -> isize {
    let n = n_theta as isize;
    let mut k = dk.rem_euclid(n);
    if k > n / 2 {
        k -= n;
    }
    k
}

/// Stability margin `1 - dt(|c|+|s|)_max - 2 dt κ/Δθ²` of the explicit scheme.
pub fn cfl_margin(n_theta: usize, kappa: f64, dt: f64) -> f64 {
    let dtheta = PI / n_theta as f64;
    let adv = (0..n_theta)
        .map(|k| {
            let t = k as f64 * dtheta;
            t.cos().abs() + t.sin().abs()
        })
        .fold(0.0, f64::max);
    1.0 - dt * adv - 2.0 * dt * kappa / (dtheta * dtheta)
}

/// Explicit upwind/centered evolution of `∂t u = -X1 u + κ X2² u` on a
/// `(2E+1)² × 2nθ` grid centred on the origin, with reflective (no-flux)
/// spatial faces and periodic direction. Transport runs over directions in
/// `[0, 2π)` at the orientation spacing `π/nθ`; readouts fold opposite
/// directions onto one orientation. Mass is conserved by the flux form.
#[derive(Debug, Clone)]
pub struct FokkerPlanckEvolution {
    extent: usize,
    n_theta: usize,
    kappa: f64,
    dt: f64,
    trig: Vec<(f64, f64)>,
    state: Vec<f64>,
    steps: usize,
}

impl FokkerPlanckEvolution {
    /// Starts from a unit delta at the origin with `θ = 0`.
    pub fn new(extent: usize, n_theta: usize, kappa: f64, dt: f64) -> Result<Self> {
        if n_theta < 2 {
            return Err(Error::Config(format!("need at least 2 orientations, got {n_theta}")));
        }
        if !(kappa >= 0.0) || !(dt >= 0.0) {
            return Err(Error::Config(format!("kappa {kappa} and dt {dt} must be nonnegative")));
        }
        let margin = cfl_margin(n_theta, kappa, dt);
        if margin < 0.0 {
            return Err(Error::Stability(format!(
                "dt={dt} with kappa={kappa} and {n_theta} orientations violates the CFL bound (margin {margin:.3e})"
            )));
        }
        let side = 2 * extent + 1;
        let mut state = vec![0.0; side * side * 2 * n_theta];
        state[(extent * side + extent) * 2 * n_theta] = 1.0;
        let trig = (0..2 * n_theta)
            .map(|k| {
                let t = k as f64 * PI / n_theta as f64;
                (t.cos(), t.sin())
            })
            .collect();
        Ok(Self {
            extent,
            n_theta,
            kappa,
            dt,
            trig,
            state,
            steps: 0,
        })
    }

    #[inline]
    pub fn side(&self) -> usize {
        2 * self.extent + 1
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn mass(&self) -> f64 {
        self.state.iter().sum()
    }

    /// Value at offset `(dx, dy)` from the origin and orientation bin `k`,
    /// summed over the two directions of that orientation.
    pub fn get(&self, dx: isize, dy: isize, k: usize) -> f64 {
        let e = self.extent as isize;
        if dx.abs() > e || dy.abs() > e {
            return 0.0;
        }
        let base = (((dy + e) as usize) * self.side() + (dx + e) as usize) * 2 * self.n_theta;
        self.state[base + k] + self.state[base + k + self.n_theta]
    }

    pub fn step(&mut self) {
        let side = self.side();
        let n = 2 * self.n_theta;
        let dt = self.dt;
        let diff = self.kappa * dt / (PI / self.n_theta as f64).powi(2);
        let u = &self.state;
        let trig = &self.trig;
        let at = |x: usize, y: usize, k: usize| u[(y * side + x) * n + k];
        // Upwind flux through the face between cells a and b (b = a + 1).
        let flux = |c: f64, ua: f64, ub: f64| if c > 0.0 { c * ua } else { c * ub };
        let mut next = vec![0.0; u.len()];
        next.par_chunks_mut(side * n).enumerate().for_each(|(y, row)| {
            for x in 0..side {
                for k in 0..n {
                    let (c, s) = trig[k];
                    let here = at(x, y, k);
                    let fx_right = if x + 1 < side { flux(c, here, at(x + 1, y, k)) } else { 0.0 };
                    let fx_left = if x > 0 { flux(c, at(x - 1, y, k), here) } else { 0.0 };
                    let fy_down = if y + 1 < side { flux(s, here, at(x, y + 1, k)) } else { 0.0 };
                    let fy_up = if y > 0 { flux(s, at(x, y - 1, k), here) } else { 0.0 };
                    let kp = if k + 1 == n { 0 } else { k + 1 };
                    let km = if k == 0 { n - 1 } else { k - 1 };
                    let lap = at(x, y, kp) - 2.0 * here + at(x, y, km);
                    row[x * n + k] = here - dt * (fx_right - fx_left + fy_down - fy_up) + diff * lap;
                }
            }
        });
        self.state = next;
        self.steps += 1;
    }

    /// Location `(dx, dy, k)` of the largest value.
    pub fn peak(&self) -> (isize, isize, usize) {
        let (i, _) = self
            .state
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        let side = self.side();
        let k = i % self.n_theta;
        let cell = i / (2 * self.n_theta);
        let e = self.extent as isize;
        ((cell % side) as isize - e, (cell / side) as isize - e, k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct FokkerPlanckSpec {
    pub n_theta: usize,
    /// Half-size of the spatial window, in pixels.
    pub extent: usize,
    pub kappa: f64,
    /// Transport horizon in pixels.
    pub time: f64,
    /// Explicit step count; `None` picks the smallest stable count.
    pub n_steps: Option<usize>,
    /// Weights below this fraction of the maximum are dropped.
    pub truncation: f64,
}

impl FokkerPlanckSpec {
    /// Angular spread of roughly 30° (one standard deviation) at the horizon.
    pub fn with_default_kappa(n_theta: usize, extent: usize, time: f64) -> Self {
        let spread = PI / 6.0;
        Self {
            n_theta,
            extent,
            kappa: if time > 0.0 { spread * spread / (2.0 * time) } else { 0.0 },
            time,
            n_steps: None,
            truncation: 1e-6,
        }
    }

    pub fn steps(&self) -> usize {
        if let Some(n) = self.n_steps {
            return n;
        }
        if self.time <= 0.0 {
            return 0;
        }
        // dt·(√2 + 2κ/Δθ²) ≤ 0.9 keeps a margin below the CFL bound.
        let dtheta = PI / self.n_theta as f64;
        let rate = 2f64.sqrt() + 2.0 * self.kappa / (dtheta * dtheta);
        (self.time * rate / 0.9).ceil() as usize
    }
}

impl Default for FokkerPlanckSpec {
    fn default() -> Self {
        Self::with_default_kappa(16, 128, 128.0)
    }
}

/// Kernel on relative offsets `(Δx, Δy, Δθ)` in the bisector frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryKernel {
    extent: usize,
    n_theta: usize,
    /// `[(Δy + E)·(2E+1) + (Δx + E)]·nθ + (Δθ mod nθ)`.
    weights: Vec<f64>,
}

impl StationaryKernel {
    pub fn zeros(extent: usize, n_theta: usize) -> Self {
        let side = 2 * extent + 1;
        Self {
            extent,
            n_theta,
            weights: vec![0.0; side * side * n_theta],
        }
    }

    pub fn from_fn(extent: usize, n_theta: usize, mut f: impl FnMut(isize, isize, isize) -> f64) -> Self {
        let mut k = Self::zeros(extent, n_theta);
        let e = extent as isize;
        for dy in -e..=e {
            for dx in -e..=e {
                for dk in 0..n_theta as isize {
                    let i = k.index(dx, dy, dk);
                    k.weights[i] = f(dx, dy, signed_dk(dk, n_theta));
                }
            }
        }
        k
    }

    #[inline]
    pub fn extent(&self) -> usize {
        self.extent
    }

    #[inline]
    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    fn index(&self, dx: isize, dy: isize, dk: isize) -> usize {
        let e = self.extent as isize;
        let side = 2 * e + 1;
        (((dy + e) * side + dx + e) as usize) * self.n_theta + wrap_theta(dk, self.n_theta)
    }

    #[inline]
    pub fn weight(&self, dx: isize, dy: isize, dk: isize) -> f64 {
        let e = self.extent as isize;
        if dx.abs() > e || dy.abs() > e {
            return 0.0;
        }
        self.weights[self.index(dx, dy, dk)]
    }

    pub fn set(&mut self, dx: isize, dy: isize, dk: isize, w: f64) {
        let i = self.index(dx, dy, dk);
        self.weights[i] = w;
    }

    /// Bilinear lookup at a fractional bisector-frame offset.
    pub fn sample(&self, dx: f64, dy: f64, dk: isize) -> f64 {
        let e = self.extent as f64;
        if dx.abs() > e || dy.abs() > e {
            return 0.0;
        }
        bilinear_weights(dx, dy)
            .iter()
            .filter(|(_, _, w)| *w > 0.0)
            .map(|&(ix, iy, w)| w * self.weight(ix, iy, dk))
            .sum()
    }

    /// Weight of the connection from `(p, θ_kp)` to `(q, θ_kq)`.
    pub fn pair_weight(&self, p: (f64, f64, usize), q: (f64, f64, usize)) -> f64 {
        let n = self.n_theta;
        let dk = signed_dk(q.2 as isize - p.2 as isize, n);
        let bisector = (p.2 as f64 + 0.5 * dk as f64) * PI / n as f64;
        let (s, c) = bisector.sin_cos();
        let (vx, vy) = (q.0 - p.0, q.1 - p.1);
        self.sample(c * vx + s * vy, -s * vx + c * vy, dk)
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().fold(0.0, |m, &w| m.max(w))
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Rescales so the largest weight is 1 (a zero kernel is left as is).
    pub fn normalized(&self) -> Self {
        let m = self.max_weight();
        let mut out = self.clone();
        if m > 0.0 {
            out.weights.iter_mut().for_each(|w| *w /= m);
        }
        out
    }

    /// Zeroes weights below `fraction · max`.
    pub fn truncated(&self, fraction: f64) -> Self {
        let cut = fraction * self.max_weight();
        let mut out = self.clone();
        out.weights.iter_mut().for_each(|w| {
            if *w < cut {
                *w = 0.0
            }
        });
        out
    }

    /// Nonzero entries as `(Δx, Δy, signed Δθ, weight)`.
    pub fn entries(&self) -> Vec<(isize, isize, isize, f64)> {
        let e = self.extent as isize;
        let mut out = Vec::new();
        for dy in -e..=e {
            for dx in -e..=e {
                for dk in 0..self.n_theta as isize {
                    let w = self.weights[self.index(dx, dy, dk)];
                    if w != 0.0 {
                        out.push((dx, dy, signed_dk(dk, self.n_theta), w));
                    }
                }
            }
        }
        out
    }

    /// Largest spatial radius carrying a nonzero weight.
    pub fn support_radius(&self) -> usize {
        self.entries()
            .iter()
            .map(|&(dx, dy, _, _)| dx.unsigned_abs().max(dy.unsigned_abs()))
            .max()
            .unwrap_or(0)
    }
}

/// Kernel learned for one central orientation, on absolute offsets and the
/// absolute orientation `θ_p` of the second edge.
#[derive(Debug, Clone, PartialEq)]
pub struct PerCentralKernel {
    radius: usize,
    n_theta: usize,
    central_bin: usize,
    /// `[(Δy + R)·(2R+1) + (Δx + R)]·nθ + k_p`.
    weights: Vec<f64>,
}

impl PerCentralKernel {
    pub fn new(radius: usize, n_theta: usize, central_bin: usize, weights: Vec<f64>) -> Result<Self> {
        let side = 2 * radius + 1;
        if weights.len() != side * side * n_theta {
            return Err(Error::Size(format!(
                "per-central kernel needs {} weights, got {}",
                side * side * n_theta,
                weights.len()
            )));
        }
        if central_bin >= n_theta {
            return Err(Error::Config(format!("central bin {central_bin} out of range")));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Data("kernel weights must be finite and nonnegative".into()));
        }
        Ok(Self {
            radius,
            n_theta,
            central_bin,
            weights,
        })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    pub fn central_bin(&self) -> usize {
        self.central_bin
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn weight(&self, dx: isize, dy: isize, kp: usize) -> f64 {
        let r = self.radius as isize;
        if dx.abs() > r || dy.abs() > r {
            return 0.0;
        }
        self.weights[(((dy + r) * (2 * r + 1) + dx + r) as usize) * self.n_theta + kp]
    }

    pub fn normalized(&self) -> Self {
        let m = self.weights.iter().fold(0.0f64, |a, &b| a.max(b));
        let mut out = self.clone();
        if m > 0.0 {
            out.weights.iter_mut().for_each(|w| *w /= m);
        }
        out
    }

    pub fn nonzero_count(&self) -> usize {
        self.weights.iter().filter(|w| **w != 0.0).count()
    }

    /// Pair weight obtained by rotating the source's frame onto the central
    /// orientation (nearest pixel).
    pub fn pair_weight(&self, p: (f64, f64, usize), q: (f64, f64, usize)) -> f64 {
        let n = self.n_theta;
        let rot = (self.central_bin as f64 - p.2 as f64) * PI / n as f64;
        let (s, c) = rot.sin_cos();
        let (vx, vy) = (q.0 - p.0, q.1 - p.1);
        let (rx, ry) = ((c * vx - s * vy).round() as isize, (s * vx + c * vy).round() as isize);
        let kp = wrap_theta(q.2 as isize - p.2 as isize + self.central_bin as isize, n);
        self.weight(rx, ry, kp)
    }
}

/// Lifted connectivity kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel3D {
    GroupStationary(StationaryKernel),
    PerCentralOrientation(PerCentralKernel),
}

impl Kernel3D {
    pub fn n_theta(&self) -> usize {
        match self {
            Kernel3D::GroupStationary(k) => k.n_theta(),
            Kernel3D::PerCentralOrientation(k) => k.n_theta(),
        }
    }

    /// Spatial reach in pixels.
    pub fn reach(&self) -> usize {
        match self {
            Kernel3D::GroupStationary(k) => k.extent(),
            Kernel3D::PerCentralOrientation(k) => k.radius(),
        }
    }

    #[inline]
    pub fn pair_weight(&self, p: (f64, f64, usize), q: (f64, f64, usize)) -> f64 {
        match self {
            Kernel3D::GroupStationary(k) => k.pair_weight(p, q),
            Kernel3D::PerCentralOrientation(k) => k.pair_weight(p, q),
        }
    }

    pub fn weights(&self) -> &[f64] {
        match self {
            Kernel3D::GroupStationary(k) => k.weights(),
            Kernel3D::PerCentralOrientation(k) => k.weights(),
        }
    }

    pub fn to_ngf(&self) -> NgfField {
        match self {
            Kernel3D::GroupStationary(k) => {
                let side = 2 * k.extent() + 1;
                NgfField::real(vec![side, side, k.n_theta()], k.weights().to_vec()).expect("consistent dims")
            }
            Kernel3D::PerCentralOrientation(k) => {
                let side = 2 * k.radius() + 1;
                NgfField::real(vec![1, side, side, k.n_theta()], k.weights().to_vec()).expect("consistent dims")
            }
        }
    }

    pub fn metadata(&self, provenance: &str) -> FieldMetadata {
        let meta = FieldMetadata::new(provenance).with_n_theta(self.n_theta());
        match self {
            Kernel3D::GroupStationary(_) => meta.with_extra("mode", "groupStationary"),
            Kernel3D::PerCentralOrientation(k) => meta
                .with_extra("mode", "perCentralOrientation")
                .with_extra("centralBin", k.central_bin()),
        }
    }
}

/// Time-integrated, fore-aft averaged Fokker–Planck kernel, resampled into
/// the bisector frame, max-normalized and truncated. Not yet symmetrized.
pub fn fokker_planck_kernel(spec: &FokkerPlanckSpec) -> Result<StationaryKernel> {
    let steps = spec.steps();
    let dt = if steps == 0 { 0.0 } else { spec.time / steps as f64 };
    let mut evo = FokkerPlanckEvolution::new(spec.extent, spec.n_theta, spec.kappa, dt)?;
    let mut integral: Vec<f64> = evo.state().to_vec();
    for _ in 0..steps {
        evo.step();
        integral.iter_mut().zip(evo.state()).for_each(|(a, b)| *a += b);
    }
    let e = spec.extent as isize;
    let side = evo.side();
    let n = spec.n_theta;
    let raw = |dx: isize, dy: isize, k: usize| -> f64 {
        if dx.abs() > e || dy.abs() > e {
            return 0.0;
        }
        let base = (((dy + e) as usize) * side + (dx + e) as usize) * 2 * n;
        integral[base + k] + integral[base + k + n]
    };
    // ±X1 average: the backward transport is the point reflection.
    let both = |dx: isize, dy: isize, k: usize| 0.5 * (raw(dx, dy, k) + raw(-dx, -dy, k));
    let gamma = StationaryKernel::from_fn(spec.extent, n, |bx, by, dk| {
        if steps == 0 {
            return both(bx, by, wrap_theta(dk, n));
        }
        // bisector offset → source frame: rotate by Δθ/2
        let half = 0.5 * dk as f64 * PI / n as f64;
        let (s, c) = half.sin_cos();
        let (x, y) = (c * bx as f64 - s * by as f64, s * bx as f64 + c * by as f64);
        let k = wrap_theta(dk, n);
        bilinear_weights(x, y)
            .iter()
            .filter(|(_, _, w)| *w > 0.0)
            .map(|&(ix, iy, w)| w * both(ix, iy, k))
            .sum()
    });
    Ok(gamma.normalized().truncated(spec.truncation))
}

/// `K(Δ) = Γ(Δ) + Γ(Δ⁻¹)`, the inverse being index negation in the
/// bisector frame. No renormalization, so applying it twice doubles.
pub fn symmetrize(gamma: &StationaryKernel) -> StationaryKernel {
    let mut out = gamma.clone();
    let e = gamma.extent() as isize;
    for dy in -e..=e {
        for dx in -e..=e {
            for dk in 0..gamma.n_theta() as isize {
                let i = out.index(dx, dy, dk);
                out.weights[i] = gamma.weight(dx, dy, dk) + gamma.weight(-dx, -dy, -dk);
            }
        }
    }
    out
}

/// Symmetrized, max-normalized Fokker–Planck kernel used for grouping.
pub fn v1_kernel(spec: &FokkerPlanckSpec) -> Result<StationaryKernel> {
    Ok(symmetrize(&fokker_planck_kernel(spec)?).normalized())
}

/// Nonnegative planar map on `[-R, R]²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D {
    radius: usize,
    weights: Vec<f64>,
}

impl Kernel2D {
    pub fn new(radius: usize, weights: Vec<f64>) -> Result<Self> {
        let side = 2 * radius + 1;
        if weights.len() != side * side {
            return Err(Error::Size(format!("2D kernel needs {} weights, got {}", side * side, weights.len())));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Data("kernel weights must be finite and nonnegative".into()));
        }
        Ok(Self { radius, weights })
    }

    pub fn from_fn(radius: usize, mut f: impl FnMut(isize, isize) -> f64) -> Self {
        let r = radius as isize;
        let mut weights = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
        for dy in -r..=r {
            for dx in -r..=r {
                weights.push(f(dx, dy));
            }
        }
        Self { radius, weights }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn weight(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius as isize;
        if dx.abs() > r || dy.abs() > r {
            return 0.0;
        }
        self.weights[((dy + r) * (2 * r + 1) + dx + r) as usize]
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().fold(0.0, |m, &w| m.max(w))
    }

    pub fn nonzero_count(&self) -> usize {
        self.weights.iter().filter(|w| **w != 0.0).count()
    }

    /// Orientation in `[0, π)` of the principal axis of the weight
    /// distribution's second moments.
    pub fn principal_axis(&self) -> f64 {
        let r = self.radius as isize;
        let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
        for dy in -r..=r {
            for dx in -r..=r {
                let w = self.weight(dx, dy);
                sxx += w * (dx * dx) as f64;
                sxy += w * (dx * dy) as f64;
                syy += w * (dy * dy) as f64;
            }
        }
        (0.5 * (2.0 * sxy).atan2(sxx - syy)).rem_euclid(PI)
    }

    /// Elongation of the superlevel set `{w ≥ level·max}` along `axis`: the
    /// ratio of its weight-averaged RMS extents parallel and perpendicular
    /// to the axis, each including the variance `1/12` of a unit pixel.
    pub fn elongation(&self, level: f64, axis: f64) -> f64 {
        let cut = level * self.max_weight();
        if cut <= 0.0 {
            return 1.0;
        }
        let (c, s) = (axis.cos(), axis.sin());
        let r = self.radius as isize;
        let (mut par, mut perp, mut mass) = (0.0, 0.0, 0.0);
        for dy in -r..=r {
            for dx in -r..=r {
                let w = self.weight(dx, dy);
                if w >= cut {
                    let (x, y) = (dx as f64, dy as f64);
                    let a = c * x + s * y;
                    let b = -s * x + c * y;
                    par += w * a * a;
                    perp += w * b * b;
                    mass += w;
                }
            }
        }
        let pad = mass / 12.0;
        ((par + pad) / (perp + pad)).sqrt()
    }

    pub fn to_ngf(&self) -> NgfField {
        let side = 2 * self.radius + 1;
        NgfField::real(vec![side, side], self.weights.clone()).expect("consistent dims")
    }
}

/// Association field of a group-stationary kernel: for a source at the
/// origin with orientation `θ_kc`, the largest weight over target
/// orientations at each planar offset.
pub fn association_field(k: &StationaryKernel, central_bin: usize) -> Kernel2D {
    let e = k.extent();
    Kernel2D::from_fn(e, |dx, dy| {
        (0..k.n_theta())
            .map(|kq| k.pair_weight((0.0, 0.0, central_bin), (dx as f64, dy as f64, kq)))
            .fold(0.0, f64::max)
    })
}

/// A lifted kernel restricted to the orientations an image selects.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedKernel<'a> {
    pub kernel: &'a Kernel3D,
    pub orientation: &'a OrientationMap,
}

/// `K_Π(p, q) = K((p, θ_I(p)), (q, θ_I(q)))`.
pub fn project_kernel<'a>(kernel: &'a Kernel3D, orientation: &'a OrientationMap) -> ProjectedKernel<'a> {
    ProjectedKernel { kernel, orientation }
}

impl ProjectedKernel<'_> {
    pub fn weight(&self, p: (usize, usize), q: (usize, usize)) -> f64 {
        let kp = self.orientation.bin(p.0, p.1);
        let kq = self.orientation.bin(q.0, q.1);
        self.kernel
            .pair_weight((p.0 as f64, p.1 as f64, kp), (q.0 as f64, q.1 as f64, kq))
    }
}

/// `(K ∗ f)(q) = Σ_p K(p → q) f(p)`, scattering each source through the
/// kernel's entries to the nearest target pixel.
pub fn group_convolve(kernel: &StationaryKernel, field: &LiftedField3D) -> Result<LiftedField3D> {
    let n = field.n_theta();
    if kernel.n_theta() != n {
        return Err(Error::Size(format!(
            "kernel has {} orientations, field has {n}",
            kernel.n_theta()
        )));
    }
    let (w, h) = (field.width(), field.height());
    let entries = kernel.entries();
    let mut out = LiftedField3D::zeros(w, h, n).with_spacing(field.spacing());
    let dtheta = PI / n as f64;
    // Placement of each entry depends only on the source bin.
    let placements: Vec<Vec<(isize, isize, usize, f64)>> = (0..n)
        .map(|kp| {
            entries
                .iter()
                .map(|&(bx, by, dk, wgt)| {
                    let bis = (kp as f64 + 0.5 * dk as f64) * dtheta;
                    let (s, c) = bis.sin_cos();
                    let (x, y) = (c * bx as f64 - s * by as f64, s * bx as f64 + c * by as f64);
                    (x.round() as isize, y.round() as isize, wrap_theta(kp as isize + dk, n), wgt)
                })
                .collect()
        })
        .collect();
    let data = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            for kp in 0..n {
                let v = field.get(x, y, kp);
                if v == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for &(ox, oy, kq, wgt) in &placements[kp] {
                    let (qx, qy) = (x as isize + ox, y as isize + oy);
                    if qx < 0 || qy < 0 || qx >= w as isize || qy >= h as isize {
                        continue;
                    }
                    data[((qy as usize) * w + qx as usize) * n + kq] += v * wgt;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::laplacian;

    #[test]
    fn lgn_kernel_values() {
        let k = lgn_kernel(4).unwrap();
        assert_eq!(k.at(1, 0), 0.0);
        assert!((k.at(2, 0) - 4f64.ln()).abs() < 1e-15);
        assert!((k.at(0, 0) - 0.25f64.ln()).abs() < 1e-15);
        assert!(lgn_kernel(0).is_err());
    }

    #[test]
    fn discrete_laplacian_of_log_kernel_is_a_unit_mass() {
        // The kernel placed on a grid (i.e. convolved with a delta), scaled
        // by 1/(4π), then the 5-point Laplacian applied.
        let e = 20;
        let k = lgn_kernel(e).unwrap();
        let side = 2 * e + 1;
        let field = ScalarField2D::from_fn(side, side, |x, y| {
            k.at(x as isize - e as isize, y as isize - e as isize) / (4.0 * PI)
        });
        let lap = laplacian(&field);
        let mut total = 0.0;
        for y in 5..side - 5 {
            for x in 5..side - 5 {
                total += lap.get(x, y);
                let (dx, dy) = (x as isize - e as isize, y as isize - e as isize);
                if dx.abs().max(dy.abs()) >= 3 {
                    assert!(lap.get(x, y).abs() < 1e-2);
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-2, "total {total}");
    }

    #[test]
    fn propagate_lgn_matches_direct_sum() {
        let out = ScalarField2D::from_fn(9, 7, |x, y| match (x, y) {
            (2, 3) => 1.0,
            (6, 1) => -0.5,
            _ => 0.0,
        });
        let k = lgn_kernel(9).unwrap();
        let u = propagate_lgn(&out, &k).unwrap();
        let at = |x: f64, y: f64| -> f64 {
            let r2 = x * x + y * y;
            if r2 == 0.0 { 0.25f64.ln() } else { r2.ln() }
        };
        for y in 0..7 {
            for x in 0..9 {
                let (fx, fy) = (x as f64, y as f64);
                let want = (at(fx - 2.0, fy - 3.0) - 0.5 * at(fx - 6.0, fy - 1.0)) / (4.0 * PI);
                assert!((u.get(x, y) - want).abs() < 1e-14);
            }
        }
        assert!(matches!(propagate_lgn(&out, &lgn_kernel(5).unwrap()), Err(Error::Size(_))));
    }

    #[test]
    fn evolution_rejects_unstable_steps() {
        assert!(matches!(FokkerPlanckEvolution::new(4, 8, 0.0, 0.8), Err(Error::Stability(_))));
        assert!(FokkerPlanckEvolution::new(4, 8, 0.0, 0.7).is_ok());
        assert!(matches!(FokkerPlanckEvolution::new(4, 8, 1.0, 0.1), Err(Error::Stability(_))));
    }

    #[test]
    fn evolution_conserves_mass_and_positivity() {
        let mut evo = FokkerPlanckEvolution::new(10, 8, 0.02, 0.5).unwrap();
        for _ in 0..40 {
            evo.step();
            assert!((evo.mass() - 1.0).abs() < 1e-12);
            assert!(evo.state().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn transport_without_diffusion_follows_the_characteristic() {
        let (t, steps) = (12.0, 20);
        let mut evo = FokkerPlanckEvolution::new(16, 8, 0.0, t / steps as f64).unwrap();
        for _ in 0..steps {
            evo.step();
        }
        let (dx, dy, k) = evo.peak();
        assert_eq!((dy, k), (0, 0));
        assert!((dx as f64 - t).abs() <= 1.0, "peak at {dx}");
    }

    #[test]
    fn zero_horizon_gives_a_delta() {
        let spec = FokkerPlanckSpec {
            time: 0.0,
            ..FokkerPlanckSpec::with_default_kappa(8, 4, 0.0)
        };
        let k = fokker_planck_kernel(&spec).unwrap();
        assert_eq!(k.weight(0, 0, 0), 1.0);
        assert_eq!(k.total(), 1.0);
    }

    fn small_kernel() -> StationaryKernel {
        fokker_planck_kernel(&FokkerPlanckSpec::with_default_kappa(8, 12, 10.0)).unwrap()
    }

    #[test]
    fn kernel_is_nonnegative_and_normalized() {
        let k = small_kernel();
        assert!(k.weights().iter().all(|w| *w >= 0.0 && w.is_finite()));
        assert_eq!(k.max_weight(), 1.0);
        // collinear continuation is preferred over the transverse offset
        assert!(k.weight(6, 0, 0) > 10.0 * k.weight(0, 6, 0));
    }

    #[test]
    fn kernel_is_mirror_symmetric_across_the_axis() {
        let k = small_kernel();
        let e = k.extent() as isize;
        for dy in -e..=e {
            for dx in -e..=e {
                for dk in -3..=3 {
                    let (a, b) = (k.weight(dx, dy, dk), k.weight(dx, -dy, -dk));
                    assert!((a - b).abs() <= 1e-12, "({dx},{dy},{dk}): {a} vs {b}");
                }
            }
        }
        assert!(k.weight(8, 1, 0) > 0.0);
    }

    #[test]
    fn symmetrization_properties() {
        let g = small_kernel();
        let s = symmetrize(&g);
        let e = g.extent() as isize;
        for dy in -e..=e {
            for dx in -e..=e {
                for dk in -4..4 {
                    assert_eq!(s.weight(dx, dy, dk), s.weight(-dx, -dy, -dk));
                }
            }
        }
        let ss = symmetrize(&s);
        for (a, b) in ss.weights().iter().zip(s.weights()) {
            assert_eq!(*a, 2.0 * b);
        }
        let mut single = StationaryKernel::zeros(3, 8);
        single.set(2, 1, 1, 0.7);
        let s1 = symmetrize(&single);
        assert_eq!(s1.weight(2, 1, 1), 0.7);
        assert_eq!(s1.weight(-2, -1, -1), 0.7);
        assert_eq!(s1.entries().len(), 2);
    }

    #[test]
    fn pair_weight_is_symmetric_for_symmetrized_kernels() {
        let k = symmetrize(&small_kernel());
        for &(p, q) in &[
            ((3.0, 4.0, 1usize), (8.0, 5.0, 2usize)),
            ((0.0, 0.0, 0), (5.0, 0.0, 0)),
            ((10.0, 2.0, 5), (7.0, 6.0, 3)),
        ] {
            let a = k.pair_weight(p, q);
            let b = k.pair_weight(q, p);
            assert!((a - b).abs() < 1e-12 * a.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn projection_with_constant_orientation_depends_on_rotated_offset() {
        let k = Kernel3D::GroupStationary(symmetrize(&small_kernel()));
        let n = 8;
        let orient = |bin: usize| OrientationMap {
            n_theta: n,
            theta: ScalarField2D::filled(30, 30, bin as f64 * PI / n as f64),
            index: vec![bin; 900],
            modulus: ScalarField2D::filled(30, 30, 1.0),
        };
        let o0 = orient(0);
        let o4 = orient(4);
        let p0 = project_kernel(&k, &o0);
        let p4 = project_kernel(&k, &o4);
        // translation invariance
        assert!((p0.weight((5, 5), (9, 6)) - p0.weight((15, 20), (19, 21))).abs() < 1e-12);
        // quarter turn of the orientation rotates the offset
        assert!((p0.weight((10, 10), (16, 11)) - p4.weight((10, 10), (9, 16))).abs() < 1e-9);
    }

    #[test]
    fn delta_kernel_projects_to_the_diagonal() {
        let mut d = StationaryKernel::zeros(2, 4);
        d.set(0, 0, 0, 1.0);
        let k = Kernel3D::GroupStationary(d);
        let o = OrientationMap {
            n_theta: 4,
            theta: ScalarField2D::zeros(4, 4),
            index: vec![0; 16],
            modulus: ScalarField2D::zeros(4, 4),
        };
        let p = project_kernel(&k, &o);
        assert_eq!(p.weight((1, 1), (1, 1)), 1.0);
        assert_eq!(p.weight((1, 1), (2, 1)), 0.0);
    }

    #[test]
    fn association_field_is_elongated_along_the_preferred_axis() {
        let k = symmetrize(&fokker_planck_kernel(&FokkerPlanckSpec::with_default_kappa(16, 24, 24.0)).unwrap());
        let af = association_field(&k, 0);
        let axis = af.principal_axis();
        assert!(axis.min(PI - axis) < 0.1, "axis {axis}");
        assert!(af.elongation(0.05, 0.0) > 1.5);
        // vertical source rotates the field
        let af4 = association_field(&k, 8);
        assert!((af4.principal_axis() - PI / 2.0).abs() < 0.1);
    }

    #[test]
    fn elongation_of_a_bar() {
        let bar = Kernel2D::from_fn(5, |dx, dy| if dy == 0 && dx.abs() <= 4 { 1.0 } else { 0.0 });
        // 9 pixels: Σx² = 60, Σy² = 0
        let want = ((60.0 + 9.0 / 12.0) / (9.0 / 12.0) as f64).sqrt();
        assert!((bar.elongation(0.5, 0.0) - want).abs() < 1e-12);
        assert!((bar.elongation(0.5, PI / 2.0) - 1.0 / want).abs() < 1e-12);
        // weights enter the moments; cells below the level are ignored
        let tapered = Kernel2D::from_fn(3, |dx, dy| match (dx.abs(), dy) {
            (0, 0) => 1.0,
            (1, 0) => 0.6,
            (2, 0) => 0.2,
            _ => 0.0,
        });
        let mass: f64 = 2.2;
        let want = ((1.2 + mass / 12.0) / (mass / 12.0)).sqrt();
        assert!((tapered.elongation(0.5, 0.0) - want).abs() < 1e-12);
    }

    #[test]
    fn group_convolution_with_delta_is_identity() {
        let mut d = StationaryKernel::zeros(1, 4);
        d.set(0, 0, 0, 1.0);
        let f = LiftedField3D::from_fn(5, 4, 4, |x, y, k| Complex64::new((x + y * k) as f64, 0.5));
        let g = group_convolve(&d, &f).unwrap();
        assert_eq!(g, f);
    }

    #[test]
    fn per_central_pair_weight_rotates_frames() {
        let (r, n) = (4, 8);
        let mut w = vec![0.0; (2 * r + 1) * (2 * r + 1) * n];
        // central bin 0: a horizontal neighbour 3 px to the right, same orientation
        w[((r * (2 * r + 1)) + r + 3) * n] = 1.0;
        let k = PerCentralKernel::new(r, n, 0, w).unwrap();
        assert_eq!(k.pair_weight((5.0, 5.0, 0), (8.0, 5.0, 0)), 1.0);
        // a vertical source sees the same neighbour rotated a quarter turn
        assert_eq!(k.pair_weight((5.0, 5.0, 4), (5.0, 8.0, 4)), 1.0);
        assert_eq!(k.pair_weight((5.0, 5.0, 4), (8.0, 5.0, 4)), 0.0);
    }
}
