//! Synthetic stimuli: Kanizsa figures with misaligned inducers and the
//! simultaneous-contrast display.
//!
//! Geometry is expressed in grid coordinates (pixel centres at integers), so
//! the centre of a `W × H` canvas is `((W-1)/2, (H-1)/2)`.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ScalarField2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Diamond,
}

impl Shape {
    pub fn rotation(self) -> f64 {
        match self {
            Shape::Square => 0.0,
            Shape::Diamond => FRAC_PI_4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Diamond => "diamond",
        }
    }
}

impl std::str::FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(Shape::Square),
            "diamond" => Ok(Shape::Diamond),
            other => Err(Error::Config(format!("unknown shape '{other}' (square, diamond)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct KanizsaSpec {
    pub canvas: usize,
    pub shape: Shape,
    pub side: f64,
    pub pacman_radius: f64,
    pub misalign_degrees: f64,
    pub background: f64,
    pub pacman: f64,
    /// Subsamples per pixel along each axis, averaged; 1 samples the centre.
    pub supersample: usize,
}

impl Default for KanizsaSpec {
    fn default() -> Self {
        Self {
            canvas: 256,
            shape: Shape::Square,
            side: 128.0,
            pacman_radius: 28.0,
            misalign_degrees: 0.0,
            background: 1.0,
            pacman: 0.0,
            supersample: 1,
        }
    }
}

impl KanizsaSpec {
    pub fn validate(&self) -> Result<()> {
        if self.supersample == 0 {
            return Err(Error::Config("supersampling factor must be at least 1".into()));
        }
        if self.side <= 2.0 * self.pacman_radius {
            return Err(Error::Config(format!(
                "side {} must exceed twice the pacman radius {}",
                self.side, self.pacman_radius
            )));
        }
        if !(0.0..=45.0).contains(&self.misalign_degrees) {
            return Err(Error::Config(format!(
                "misalignment {}° outside [0, 45]",
                self.misalign_degrees
            )));
        }
        let half_diag = self.side / 2.0 * 2f64.sqrt() + self.pacman_radius;
        if half_diag > self.canvas as f64 / 2.0 && self.shape == Shape::Diamond
            || self.side / 2.0 + self.pacman_radius > self.canvas as f64 / 2.0
        {
            return Err(Error::Config("figure does not fit on the canvas".into()));
        }
        Ok(())
    }

    fn centre(&self) -> (f64, f64) {
        let c = (self.canvas as f64 - 1.0) / 2.0;
        (c, c)
    }

    /// Corner positions in order top-left, top-right, bottom-right,
    /// bottom-left of the unrotated square.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (cx, cy) = self.centre();
        let h = self.side / 2.0;
        let rot = self.shape.rotation();
        [(-h, -h), (h, -h), (h, h), (-h, h)].map(|(x, y)| {
            let (rx, ry) = rotate((x, y), rot);
            (cx + rx, cy + ry)
        })
    }

    /// Rotation of inducer `i`'s mouth: `±δ/2`, alternating around the
    /// figure so adjacent mouth edges on a side meet at angle `δ`.
    pub fn mouth_rotation(&self, i: usize) -> f64 {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        sign * 0.5 * self.misalign_degrees.to_radians()
    }

    /// Directions (angles) of the two straight mouth edges of inducer `i`.
    pub fn mouth_edges(&self, i: usize) -> [f64; 2] {
        let start = i as f64 * FRAC_PI_2 + self.shape.rotation() + self.mouth_rotation(i);
        [start, start + FRAC_PI_2]
    }

    fn is_pacman(&self, x: f64, y: f64) -> bool {
        for (i, &(px, py)) in self.corners().iter().enumerate() {
            let (dx, dy) = (x - px, y - py);
            if dx * dx + dy * dy > self.pacman_radius * self.pacman_radius {
                continue;
            }
            let start = self.mouth_edges(i)[0];
            let rel = (dy.atan2(dx) - start).rem_euclid(2.0 * PI);
            if rel > FRAC_PI_2 {
                return true;
            }
        }
        false
    }
}

fn rotate((x, y): (f64, f64), a: f64) -> (f64, f64) {
    let (s, c) = a.sin_cos();
    (c * x - s * y, s * x + c * y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KanizsaStimulus {
    pub image: ScalarField2D,
    /// Samples along the illusory sides between the inducers, 1 px apart.
    pub contour: Vec<(f64, f64)>,
    /// Samples along the straight mouth edges, 1 px apart.
    pub inducer_points: Vec<(f64, f64)>,
}

pub fn gen_kanizsa(spec: &KanizsaSpec) -> Result<KanizsaStimulus> {
    spec.validate()?;
    let n = spec.canvas;
    let image = ScalarField2D::from_fn(n, n, |x, y| {
        let f = spec.supersample;
        let mut acc = 0.0;
        for sy in 0..f {
            for sx in 0..f {
                let (ox, oy) = ((sx as f64 + 0.5) / f as f64 - 0.5, (sy as f64 + 0.5) / f as f64 - 0.5);
                acc += if spec.is_pacman(x as f64 + ox, y as f64 + oy) {
                    spec.pacman
                } else {
                    spec.background
                };
            }
        }
        acc / (f * f) as f64
    });
    let corners = spec.corners();
    let mut contour = Vec::new();
    for i in 0..4 {
        let (a, b) = (corners[i], corners[(i + 1) % 4]);
        let len = spec.side;
        let (ux, uy) = ((b.0 - a.0) / len, (b.1 - a.1) / len);
        let mut t = spec.pacman_radius + 1.0;
        while t <= len - spec.pacman_radius - 1.0 + 1e-9 {
            contour.push((a.0 + t * ux, a.1 + t * uy));
            t += 1.0;
        }
    }
    let mut inducer_points = Vec::new();
    for (i, &(px, py)) in corners.iter().enumerate() {
        for angle in spec.mouth_edges(i) {
            let (ux, uy) = (angle.cos(), angle.sin());
            let mut t = 1.0;
            while t <= spec.pacman_radius - 1.0 + 1e-9 {
                inducer_points.push((px + t * ux, py + t * uy));
                t += 1.0;
            }
        }
    }
    Ok(KanizsaStimulus {
        image,
        contour,
        inducer_points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ContrastSpec {
    pub canvas: usize,
    pub disk_gray: f64,
    pub bg_left: f64,
    pub bg_right: f64,
    pub disk_radius: f64,
}

impl Default for ContrastSpec {
    fn default() -> Self {
        Self {
            canvas: 256,
            disk_gray: 0.5,
            bg_left: 0.9,
            bg_right: 0.1,
            disk_radius: 24.0,
        }
    }
}

impl ContrastSpec {
    /// Disk centres, mirror images of each other about the vertical midline.
    pub fn centres(&self) -> [(f64, f64); 2] {
        let n = self.canvas as f64;
        let y = (n - 1.0) / 2.0;
        let xl = n / 4.0 - 0.5;
        [(xl, y), (n - 1.0 - xl, y)]
    }

    pub fn disk_mask(&self, which: usize) -> Vec<bool> {
        let (cx, cy) = self.centres()[which];
        let n = self.canvas;
        let r2 = self.disk_radius * self.disk_radius;
        (0..n * n)
            .map(|i| {
                let (x, y) = ((i % n) as f64, (i / n) as f64);
                (x - cx).powi(2) + (y - cy).powi(2) <= r2
            })
            .collect()
    }
}

/// Two identical disks on a background split at the vertical midline.
pub fn gen_contrast(spec: &ContrastSpec) -> Result<ScalarField2D> {
    for (name, v) in [("disk", spec.disk_gray), ("left", spec.bg_left), ("right", spec.bg_right)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("{name} gray {v} outside [0, 1]")));
        }
    }
    if spec.disk_radius <= 0.0 || spec.disk_radius >= spec.canvas as f64 / 4.0 {
        return Err(Error::Config(format!(
            "disk radius {} must lie in (0, canvas/4)",
            spec.disk_radius
        )));
    }
    let n = spec.canvas;
    let left = spec.disk_mask(0);
    let right = spec.disk_mask(1);
    Ok(ScalarField2D::from_fn(n, n, |x, y| {
        let i = y * n + x;
        if left[i] || right[i] {
            spec.disk_gray
        } else if x < n / 2 {
            spec.bg_left
        } else {
            spec.bg_right
        }
    }))
}
