//! Receptive-profile banks and the lifting of images to R²×S¹.
//!
//! Two families are provided: the radially symmetric Laplacian-of-Gaussian
//! used for the contrast (LGN) stage, and a bank of oriented Gabor filters
//! obtained from one mother filter by rotation and translation. All
//! convolutions use half-sample reflective borders.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{reflect, theta_of, LiftedField3D, ScalarField2D};

/// Square real stencil of side `2·radius + 1`, row-major over `(dy, dx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    radius: usize,
    weights: Vec<f64>,
}

impl Stencil {
    pub fn new(radius: usize, weights: Vec<f64>) -> Result<Self> {
        let side = 2 * radius + 1;
        if weights.len() != side * side {
            return Err(Error::Size(format!(
                "stencil of radius {radius} needs {} weights, got {}",
                side * side,
                weights.len()
            )));
        }
        Ok(Self { radius, weights })
    }

    #[inline]
    pub fn radius(&self) -> usize {
        self.radius
    }

    #[inline]
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn at(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius as isize;
        self.weights[((dy + r) * (2 * r + 1) + dx + r) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// `G(ξ) = exp(-|ξ|²/σ²)`.
#[inline]
pub fn gaussian(sigma: f64, dx: f64, dy: f64) -> f64 {
    (-(dx * dx + dy * dy) / (sigma * sigma)).exp()
}

/// `ΔG` for `G(ξ) = exp(-|ξ|²/σ²)`.
#[inline]
pub fn laplacian_of_gaussian(sigma: f64, dx: f64, dy: f64) -> f64 {
    let s2 = sigma * sigma;
    let r2 = dx * dx + dy * dy;
    (4.0 * r2 / (s2 * s2) - 4.0 / s2) * (-r2 / s2).exp()
}

/// Sampled Laplacian-of-Gaussian with its mean removed so the stencil has
/// zero response to constants.
pub fn log_filter(sigma: f64, support_radius: usize) -> Result<Stencil> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("LoG sigma must be positive, got {sigma}")));
    }
    if (support_radius as f64) < 3.0 * sigma {
        return Err(Error::Config(format!(
            "LoG support radius {support_radius} is below 3σ = {}",
            3.0 * sigma
        )));
    }
    let r = support_radius as isize;
    let mut weights = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for dy in -r..=r {
        for dx in -r..=r {
            weights.push(laplacian_of_gaussian(sigma, dx as f64, dy as f64));
        }
    }
    let mean = weights.iter().sum::<f64>() / weights.len() as f64;
    weights.iter_mut().for_each(|w| *w -= mean);
    Stencil::new(support_radius, weights)
}

/// Discrete mass `Σ G` of the Gaussian underlying [`log_filter`]; the LGN
/// output of a quadratic image equals four times this value.
pub fn gaussian_mass(sigma: f64, support_radius: usize) -> f64 {
    let r = support_radius as isize;
    let mut s = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            s += gaussian(sigma, dx as f64, dy as f64);
        }
    }
    s
}

fn check_fits(image: &ScalarField2D, radius: usize) -> Result<()> {
    let side = 2 * radius + 1;
    if image.width() < side || image.height() < side {
        return Err(Error::Size(format!(
            "image {}x{} is smaller than a {side}x{side} stencil",
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

/// `O_LGN = ΔG * I` with reflective borders.
pub fn lgn_output(image: &ScalarField2D, stencil: &Stencil) -> Result<ScalarField2D> {
    check_fits(image, stencil.radius())?;
    let (w, h) = (image.width(), image.height());
    let r = stencil.radius() as isize;
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let mut acc = 0.0;
                    for dy in -r..=r {
                        let yy = reflect(y as isize - dy, h);
                        for dx in -r..=r {
                            let xx = reflect(x as isize - dx, w);
                            acc += stencil.at(dx, dy) * image.get(xx, yy);
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect();
    ScalarField2D::new(w, h, image.spacing(), rows.concat())
}

/// Value of the oriented receptive profile at offset `(dx, dy)` from its
/// centre, before any mean correction:
/// `exp(-i (dx·sinθ - dy·cosθ)/σ - (dx² + dy²)/σ²)`.
pub fn gabor_value(theta: f64, sigma: f64, dx: f64, dy: f64) -> Complex64 {
    let phase = -(dx * theta.sin() - dy * theta.cos()) / sigma;
    let envelope = -(dx * dx + dy * dy) / (sigma * sigma);
    Complex64::new(envelope, phase).exp()
}

/// Bank of zero-mean oriented filters at `θ_k = kπ/nθ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaborBank {
    n_theta: usize,
    sigma: f64,
    support_radius: usize,
    filters: Vec<Vec<Complex64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct GaborSpec {
    pub n_theta: usize,
    pub sigma: f64,
    pub support_radius: usize,
}

impl Default for GaborSpec {
    fn default() -> Self {
        Self {
            n_theta: 16,
            sigma: 2.0,
            support_radius: 6,
        }
    }
}

impl GaborBank {
    pub fn new(n_theta: usize, sigma: f64, support_radius: usize) -> Result<Self> {
        if n_theta < 2 {
            return Err(Error::Config(format!("need at least 2 orientations, got {n_theta}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("Gabor sigma must be positive, got {sigma}")));
        }
        let r = support_radius as isize;
        let filters = (0..n_theta)
            .map(|k| {
                let theta = theta_of(k, n_theta);
                let mut f: Vec<Complex64> = (-r..=r)
                    .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
                    .map(|(dx, dy)| gabor_value(theta, sigma, dx as f64, dy as f64))
                    .collect();
                let mean = f.iter().sum::<Complex64>() / f.len() as f64;
                f.iter_mut().for_each(|c| *c -= mean);
                f
            })
            .collect();
        Ok(Self {
            n_theta,
            sigma,
            support_radius,
            filters,
        })
    }

    pub fn from_spec(spec: &GaborSpec) -> Result<Self> {
        Self::new(spec.n_theta, spec.sigma, spec.support_radius)
    }

    pub fn spec(&self) -> GaborSpec {
        GaborSpec {
            n_theta: self.n_theta,
            sigma: self.sigma,
            support_radius: self.support_radius,
        }
    }

    #[inline]
    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    #[inline]
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    #[inline]
    pub fn support_radius(&self) -> usize {
        self.support_radius
    }

    /// Filter `k` at offset `(dx, dy)` from its centre.
    #[inline]
    pub fn at(&self, k: usize, dx: isize, dy: isize) -> Complex64 {
        let r = self.support_radius as isize;
        self.filters[k][((dy + r) * (2 * r + 1) + dx + r) as usize]
    }

    pub fn filter(&self, k: usize) -> &[Complex64] {
        &self.filters[k]
    }
}

/// `O(x, y, θ_k) = Σ_ξ I(ξ) · conj(ψ_{x,y,θ_k}(ξ))`.
pub fn lift_image(image: &ScalarField2D, bank: &GaborBank) -> Result<LiftedField3D> {
    check_fits(image, bank.support_radius())?;
    let (w, h, n) = (image.width(), image.height(), bank.n_theta());
    let r = bank.support_radius() as isize;
    let side = (2 * r + 1) as usize;
    let conj: Vec<Vec<Complex64>> = bank.filters.iter().map(|f| f.iter().map(|c| c.conj()).collect()).collect();
    let rows: Vec<Vec<Complex64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![Complex64::new(0.0, 0.0); w * n];
            let mut patch = vec![0.0; side * side];
            for x in 0..w {
                for (j, dy) in (-r..=r).enumerate() {
                    let yy = reflect(y as isize + dy, h);
                    for (i, dx) in (-r..=r).enumerate() {
                        patch[j * side + i] = image.get(reflect(x as isize + dx, w), yy);
                    }
                }
                for (k, f) in conj.iter().enumerate() {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (p, c) in patch.iter().zip(f) {
                        acc += c * *p;
                    }
                    row[x * n + k] = acc;
                }
            }
            row
        })
        .collect();
    Ok(LiftedField3D::new(w, h, n, rows.concat())?.with_spacing(image.spacing()))
}

/// Per-pixel dominant orientation of a lifted field.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationMap {
    pub n_theta: usize,
    /// `θ_I` in radians.
    pub theta: ScalarField2D,
    /// Winning bin per pixel, row-major.
    pub index: Vec<usize>,
    /// `max_θ |O|` per pixel.
    pub modulus: ScalarField2D,
}

impl OrientationMap {
    #[inline]
    pub fn bin(&self, x: usize, y: usize) -> usize {
        self.index[y * self.theta.width() + x]
    }
}

/// Maximizes `|O|` over each fibre; ties go to the lowest bin.
pub fn argmax_orientation(lift: &LiftedField3D) -> OrientationMap {
    let (w, h, n) = (lift.width(), lift.height(), lift.n_theta());
    let mut index = Vec::with_capacity(w * h);
    let mut modulus = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (best, m) = lift
                .fiber(x, y)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bk, bm), (k, c)| {
                    let v = c.norm();
                    if v > bm {
                        (k, v)
                    } else {
                        (bk, bm)
                    }
                });
            index.push(best);
            modulus.push(m);
        }
    }
    let theta = ScalarField2D::from_fn(w, h, |x, y| theta_of(index[y * w + x], n)).with_spacing(lift.spacing());
    let modulus = ScalarField2D::new(w, h, lift.spacing(), modulus).expect("moduli are finite");
    OrientationMap {
        n_theta: n,
        theta,
        index,
        modulus,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportPoint {
    pub x: usize,
    pub y: usize,
    pub k: usize,
    pub modulus: f64,
}

/// Lifted points whose feed-forward response reaches a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    pub n_theta: usize,
    pub width: usize,
    pub height: usize,
    pub points: Vec<SupportPoint>,
}

impl SupportSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn theta(&self, i: usize) -> f64 {
        theta_of(self.points[i].k, self.n_theta)
    }
}

/// All `(x, y, k)` with `|O| ≥ h`, in storage order.
pub fn threshold_support(lift: &LiftedField3D, h: f64) -> SupportSet {
    let n = lift.n_theta();
    let points = lift
        .data()
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            let m = c.norm();
            (m >= h).then(|| {
                let pixel = i / n;
                SupportPoint {
                    x: pixel % lift.width(),
                    y: pixel / lift.width(),
                    k: i % n,
                    modulus: m,
                }
            })
        })
        .collect();
    SupportSet {
        n_theta: n,
        width: lift.width(),
        height: lift.height(),
        points,
    }
}

/// A binarized edge pixel with its orientation bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Edge {
    pub x: usize,
    pub y: usize,
    pub theta_index: usize,
    pub magnitude: f64,
}

/// Thin edges: keeps pixels whose max-modulus is a maximum across the level
/// line (along `(-sinθ_I, cosθ_I)`) and exceeds `threshold`.
///
/// The comparison is strict on the backward neighbour and non-strict on the
/// forward one, so a two-pixel plateau straddling a step keeps exactly one
/// pixel.
pub fn nonmax_suppress(orientation: &OrientationMap, threshold: f64) -> Vec<Edge> {
    let m = &orientation.modulus;
    let (w, h) = (m.width(), m.height());
    let mut edges = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = m.get(x, y);
            if v <= threshold {
                continue;
            }
            let t = orientation.theta.get(x, y);
            let (gx, gy) = (-t.sin(), t.cos());
            let (xf, yf) = (x as f64, y as f64);
            let back = m.sample_bilinear(xf - gx, yf - gy);
            let fwd = m.sample_bilinear(xf + gx, yf + gy);
            if v > back && v >= fwd {
                edges.push(Edge {
                    x,
                    y,
                    theta_index: orientation.bin(x, y),
                    magnitude: v,
                });
            }
        }
    }
    edges
}
