//! Grid containers shared by every stage of the pipeline.
//!
//! Conventions: `x` indexes columns and `y` rows, pixel centres sit on
//! integer coordinates, storage is row-major. Lifted fields keep the
//! orientation axis fastest so the fibre over one pixel is contiguous.
//! Orientations are sampled as `θ_k = kπ/nθ` and are taken modulo π.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Half-sample symmetric reflection of `i` into `0..n`.
///
/// `-1 → 0`, `n → n-1`; offsets larger than the grid fold repeatedly.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    debug_assert!(n > 0);
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Periodic wrap of an orientation index.
#[inline]
pub fn wrap_theta(k: isize, n_theta: usize) -> usize {
    k.rem_euclid(n_theta as isize) as usize
}

/// Orientation of bin `k` for a bank of `n_theta` bins over `[0, π)`.
#[inline]
pub fn theta_of(k: usize, n_theta: usize) -> f64 {
    k as f64 * PI / n_theta as f64
}

fn check_finite(values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::Data("field contains non-finite values".into()))
    }
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Size(format!("empty grid {width}x{height}")));
    }
    if len != width * height {
        return Err(Error::Size(format!(
            "data length {len} does not match {width}x{height}"
        )));
    }
    Ok(())
}

/// Real-valued image or activity on a regular pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField2D {
    width: usize,
    height: usize,
    spacing: f64,
    data: Vec<f64>,
}

impl ScalarField2D {
    pub fn new(width: usize, height: usize, spacing: f64, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::Data(format!("grid spacing must be positive, got {spacing}")));
        }
        check_finite(data.iter().copied())?;
        Ok(Self {
            width,
            height,
            spacing,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "empty grid");
        Self {
            width,
            height,
            spacing: 1.0,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "empty grid");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            spacing: 1.0,
            data,
        }
    }

    pub fn with_spacing(mut self, spacing: f64) -> Self {
        assert!(spacing > 0.0 && spacing.is_finite());
        self.spacing = spacing;
        self
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Value at a possibly out-of-range pixel, reflected into the grid.
    #[inline]
    pub fn get_reflect(&self, x: isize, y: isize) -> f64 {
        self.get(reflect(x, self.width), reflect(y, self.height))
    }

    /// Bilinear interpolation at a continuous position with reflective borders.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        bilinear_weights(x, y)
            .iter()
            .map(|&(dx, dy, w)| w * self.get_reflect(dx, dy))
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            spacing: self.spacing,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Size(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// The four pixels surrounding a continuous position and their bilinear weights.
#[inline]
pub fn bilinear_weights(x: f64, y: f64) -> [(isize, isize, f64); 4] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ]
}

/// Complex field on R²×S¹ sampled at `width × height × n_theta` points.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedField3D {
    width: usize,
    height: usize,
    n_theta: usize,
    spacing: f64,
    data: Vec<Complex64>,
}

impl LiftedField3D {
    pub fn new(width: usize, height: usize, n_theta: usize, data: Vec<Complex64>) -> Result<Self> {
        check_dims(width, height, data.len() / n_theta.max(1))?;
        if n_theta < 2 {
            return Err(Error::Size(format!("need at least 2 orientation bins, got {n_theta}")));
        }
        if data.len() != width * height * n_theta {
            return Err(Error::Size(format!(
                "data length {} does not match {width}x{height}x{n_theta}",
                data.len()
            )));
        }
        check_finite(data.iter().flat_map(|c| [c.re, c.im]))?;
        Ok(Self {
            width,
            height,
            n_theta,
            spacing: 1.0,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, n_theta: usize) -> Self {
        assert!(width > 0 && height > 0 && n_theta >= 2);
        Self {
            width,
            height,
            n_theta,
            spacing: 1.0,
            data: vec![Complex64::new(0.0, 0.0); width * height * n_theta],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        n_theta: usize,
        mut f: impl FnMut(usize, usize, usize) -> Complex64,
    ) -> Self {
        assert!(width > 0 && height > 0 && n_theta >= 2);
        let mut data = Vec::with_capacity(width * height * n_theta);
        for y in 0..height {
            for x in 0..width {
                for k in 0..n_theta {
                    data.push(f(x, y, k));
                }
            }
        }
        Self {
            width,
            height,
            n_theta,
            spacing: 1.0,
            data,
        }
    }

    pub fn with_spacing(mut self, spacing: f64) -> Self {
        assert!(spacing > 0.0 && spacing.is_finite());
        self.spacing = spacing;
        self
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    #[inline]
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Angular step π/nθ.
    #[inline]
    pub fn theta_step(&self) -> f64 {
        PI / self.n_theta as f64
    }

    #[inline]
    pub fn theta(&self, k: usize) -> f64 {
        theta_of(k, self.n_theta)
    }

    pub fn theta_values(&self) -> Vec<f64> {
        (0..self.n_theta).map(|k| self.theta(k)).collect()
    }

    #[inline]
    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    #[inline]
    pub(crate) fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, k: usize) -> usize {
        (y * self.width + x) * self.n_theta + k
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, k: usize) -> Complex64 {
        self.data[self.index(x, y, k)]
    }

    /// Spatially reflected, θ-periodic access.
    #[inline]
    pub fn get_wrapped(&self, x: isize, y: isize, k: isize) -> Complex64 {
        self.get(
            reflect(x, self.width),
            reflect(y, self.height),
            wrap_theta(k, self.n_theta),
        )
    }

    /// Orientation fibre over pixel `(x, y)`.
    #[inline]
    pub fn fiber(&self, x: usize, y: usize) -> &[Complex64] {
        let start = (y * self.width + x) * self.n_theta;
        &self.data[start..start + self.n_theta]
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|c| *c *= s);
        out
    }

    pub fn max_modulus(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, c| m.max(c.norm()))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height && self.n_theta == other.n_theta
    }
}

/// Two-component vector field on a pixel grid (the completion field).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField2D {
    width: usize,
    height: usize,
    spacing: f64,
    ax: Vec<f64>,
    ay: Vec<f64>,
}

impl VectorField2D {
    pub fn new(width: usize, height: usize, spacing: f64, ax: Vec<f64>, ay: Vec<f64>) -> Result<Self> {
        check_dims(width, height, ax.len())?;
        check_dims(width, height, ay.len())?;
        check_finite(ax.iter().chain(&ay).copied())?;
        Ok(Self {
            width,
            height,
            spacing,
            ax,
            ay,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0);
        Self {
            width,
            height,
            spacing: 1.0,
            ax: vec![0.0; width * height],
            ay: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut out = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(x, y);
                out.ax[y * width + x] = a;
                out.ay[y * width + x] = b;
            }
        }
        out
    }

    pub fn from_components(ax: ScalarField2D, ay: ScalarField2D) -> Result<Self> {
        ax.ensure_same_shape(&ay)?;
        Ok(Self {
            width: ax.width(),
            height: ax.height(),
            spacing: ax.spacing(),
            ax: ax.into_data(),
            ay: ay.into_data(),
        })
    }

    pub fn with_spacing(mut self, spacing: f64) -> Self {
        assert!(spacing > 0.0 && spacing.is_finite());
        self.spacing = spacing;
        self
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    #[inline]
    pub fn ax(&self) -> &[f64] {
        &self.ax
    }

    #[inline]
    pub fn ay(&self) -> &[f64] {
        &self.ay
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.ax[i], self.ay[i])
    }

    pub fn component(&self, which: usize) -> ScalarField2D {
        let data = if which == 0 { &self.ax } else { &self.ay };
        ScalarField2D {
            width: self.width,
            height: self.height,
            spacing: self.spacing,
            data: data.clone(),
        }
    }

    pub fn magnitude(&self) -> ScalarField2D {
        ScalarField2D {
            width: self.width,
            height: self.height,
            spacing: self.spacing,
            data: self
                .ax
                .iter()
                .zip(&self.ay)
                .map(|(a, b)| a.hypot(*b))
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            spacing: self.spacing,
            ax: self.ax.iter().map(|v| v * s).collect(),
            ay: self.ay.iter().map(|v| v * s).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.ax.iter().chain(&self.ay).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }
}
