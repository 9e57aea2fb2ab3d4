//! Batch experiments: the oblique-effect suite, the simultaneous-contrast
//! demo and the grouping demo.
//!
//! Each experiment takes a JSON config merged over its defaults, runs its
//! cells in parallel on a pool capped at the requested worker count, and
//! returns an [`ExperimentReport`]. A failing cell is recorded, never fatal.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_4;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::completion::{closure_score, complete, quantile, CompletionConfig};
use crate::error::{Error, Result};
use crate::filtering::{gaussian_mass, lgn_output, lift_image, log_filter, GaborBank, GaborSpec};
use crate::grid::ScalarField2D;
use crate::io::{save_overlay_png, save_png_grayscale};
use crate::kernels::{lgn_kernel, propagate_lgn, v1_kernel, FokkerPlanckSpec, Kernel3D};
use crate::registry::Registry;
use crate::spectral::{group, GroupingConfig};
use crate::stimuli::{gen_contrast, gen_kanizsa, ContrastSpec, KanizsaSpec, Shape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CellReport {
    pub name: String,
    pub ok: bool,
    pub error: Option<String>,
    pub metrics: BTreeMap<String, f64>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
}

impl CellReport {
    fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ok: true,
            error: None,
            metrics: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    fn failed(name: impl Into<String>, err: &Error) -> Self {
        Self {
            ok: false,
            error: Some(err.to_string()),
            ..Self::new(name)
        }
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Expectation {
    pub name: String,
    pub met: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExperimentReport {
    pub id: String,
    pub seed: u64,
    /// Effective config after merging overrides over the defaults.
    pub config: Value,
    pub cells: Vec<CellReport>,
    pub metrics: BTreeMap<String, f64>,
    pub expectations: Vec<Expectation>,
    pub wall_time_secs: f64,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.expectations.iter().all(|e| e.met)
    }

    pub fn cell(&self, name: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.name == name)
    }

    /// All artifact paths, in cell order.
    pub fn artifacts(&self) -> Vec<&str> {
        self.cells.iter().flat_map(|c| c.artifacts.iter().map(String::as_str)).collect()
    }

    /// Pretty JSON without the wall time; identical across runs with the
    /// same config and seed.
    pub fn stable_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Value::Object(m) = &mut v {
            m.remove("wallTimeSecs");
        }
        Ok(serde_json::to_string_pretty(&v)? + "\n")
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunContext {
    pub seed: u64,
    /// Thread cap for the cells and everything they run; 0 uses all cores.
    pub workers: usize,
    /// Where artifacts go; none are written without it.
    pub out_dir: Option<PathBuf>,
}

impl RunContext {
    fn artifact(&self, cell: &mut CellReport, name: &str, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            write(&dir.join(name))?;
            cell.artifacts.push(name.to_string());
        }
        Ok(())
    }
}

pub trait Experiment: Send + Sync {
    fn id(&self) -> &'static str;

    fn default_config(&self) -> Value;

    /// Runs with `overrides` merged over the default config.
    fn run(&self, overrides: &Value, ctx: &RunContext) -> Result<ExperimentReport>;
}

pub static EXPERIMENTS: Registry<dyn Experiment> = Registry::new(
    "experiment",
    &[
        ("oblique-suite", || Box::new(ObliqueSuite)),
        ("contrast-demo", || Box::new(ContrastDemo)),
        ("grouping-demo", || Box::new(GroupingDemo)),
    ],
);

pub fn experiment(name: &str) -> Result<Box<dyn Experiment>> {
    EXPERIMENTS.create(name)
}

/// Recursive object merge; non-object values in `patch` replace.
pub fn merge_json(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge_json(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// `base` with `patch` merged over its JSON form.
pub fn overlay<T: Serialize + DeserializeOwned>(base: T, patch: &Value) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    if !patch.is_null() {
        if !patch.is_object() {
            return Err(Error::Config("config overrides must be a JSON object".into()));
        }
        merge_json(&mut v, patch);
    }
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

fn resolve<T: Serialize + DeserializeOwned + Default>(overrides: &Value) -> Result<(T, Value)> {
    let cfg = overlay(T::default(), overrides)?;
    let snapshot = serde_json::to_value(&cfg)?;
    Ok((cfg, snapshot))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Runs every job on the pool; results keep job order.
fn run_cells<J: Sync, T: Send>(ctx: &RunContext, jobs: &[J], f: impl Fn(&J) -> T + Sync) -> Result<Vec<T>> {
    Ok(pool(ctx.workers)?.install(|| jobs.par_iter().map(&f).collect()))
}

fn v1(spec: &FokkerPlanckSpec) -> Result<Kernel3D> {
    Ok(Kernel3D::GroupStationary(v1_kernel(spec)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CellExpectation {
    pub shape: Shape,
    pub misalign: f64,
    pub reconstructed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ObliqueConfig {
    pub stimulus: KanizsaSpec,
    pub misalignments: Vec<f64>,
    pub square_mode: String,
    pub diamond_mode: String,
    pub completion: CompletionConfig,
    pub kernel: FokkerPlanckSpec,
    pub bank: GaborSpec,
    pub tau: f64,
    pub cutoff: f64,
    pub expectations: Vec<CellExpectation>,
}

impl Default for ObliqueConfig {
    fn default() -> Self {
        let cell = |shape, misalign, reconstructed| CellExpectation { shape, misalign, reconstructed };
        Self {
            stimulus: KanizsaSpec {
                supersample: 8,
                ..KanizsaSpec::default()
            },
            misalignments: vec![0.0, 6.0, 12.0],
            square_mode: "horizontal".into(),
            diamond_mode: "diagonal".into(),
            completion: CompletionConfig::default(),
            kernel: FokkerPlanckSpec::default(),
            bank: GaborSpec::default(),
            tau: 0.25,
            cutoff: 0.8,
            expectations: vec![
                cell(Shape::Square, 0.0, true),
                cell(Shape::Diamond, 0.0, true),
                cell(Shape::Square, 6.0, false),
                cell(Shape::Diamond, 6.0, true),
                cell(Shape::Square, 12.0, false),
                cell(Shape::Diamond, 12.0, false),
            ],
        }
    }
}

fn oblique_cell_name(shape: Shape, misalign: f64) -> String {
    format!("{}-{misalign}", shape.name())
}

pub struct ObliqueSuite;

impl ObliqueSuite {
    fn cell(
        cfg: &ObliqueConfig,
        kernel: &Kernel3D,
        bank: &GaborBank,
        ctx: &RunContext,
        shape: Shape,
        misalign: f64,
    ) -> Result<CellReport> {
        let name = oblique_cell_name(shape, misalign);
        let stim = gen_kanizsa(&KanizsaSpec {
            shape,
            misalign_degrees: misalign,
            ..cfg.stimulus
        })?;
        let completion = CompletionConfig {
            mode: match shape {
                Shape::Square => cfg.square_mode.clone(),
                Shape::Diamond => cfg.diamond_mode.clone(),
            },
            ..cfg.completion.clone()
        };
        let result = complete(&stim.image, &completion, kernel, bank, ctx.seed)?;
        let score = closure_score(&result, &stim.contour, cfg.tau)?;
        let mut cell = CellReport::new(&name);
        cell.metrics.insert("closure".into(), score);
        cell.metrics.insert("reconstructed".into(), if score >= cfg.cutoff { 1.0 } else { 0.0 });
        cell.metrics.insert("maskUnits".into(), result.diagnostics.mask_units as f64);
        cell.metrics.insert("maskPixels".into(), result.diagnostics.mask_pixels as f64);
        if let Some(s) = result.diagnostics.unit_saliency {
            cell.metrics.insert("unitSaliency".into(), s);
        }
        if let Some(last) = result.diagnostics.stages.last() {
            cell.metrics.insert("l1".into(), last.l1);
            cell.metrics.insert("l2".into(), last.l2);
            cell.metrics.insert("l3".into(), last.l3);
        }
        let mag = result.a.magnitude();
        let p99 = quantile(mag.data(), 0.99);
        ctx.artifact(&mut cell, &format!("{name}-stimulus.png"), |p| save_png_grayscale(p, &stim.image, 0.0, 1.0))?;
        ctx.artifact(&mut cell, &format!("{name}-field.png"), |p| save_png_grayscale(p, &mag, 0.0, p99))?;
        ctx.artifact(&mut cell, &format!("{name}-brightness.png"), |p| save_png_grayscale(p, &result.b, 0.0, 1.0))?;
        Ok(cell)
    }
}

impl Experiment for ObliqueSuite {
    fn id(&self) -> &'static str {
        "oblique-suite"
    }

    fn default_config(&self) -> Value {
        serde_json::to_value(ObliqueConfig::default()).expect("config serializes")
    }

    fn run(&self, overrides: &Value, ctx: &RunContext) -> Result<ExperimentReport> {
        let start = Instant::now();
        let (cfg, snapshot): (ObliqueConfig, Value) = resolve(overrides)?;
        cfg.completion.validate()?;
        let bank = GaborBank::from_spec(&cfg.bank)?;
        let kernel = pool(ctx.workers)?.install(|| v1(&cfg.kernel))?;
        let jobs: Vec<(Shape, f64)> = [Shape::Square, Shape::Diamond]
            .into_iter()
            .flat_map(|s| cfg.misalignments.iter().map(move |&m| (s, m)))
            .collect();
        let cells = run_cells(ctx, &jobs, |&(shape, m)| {
            Self::cell(&cfg, &kernel, &bank, ctx, shape, m)
                .unwrap_or_else(|e| CellReport::failed(oblique_cell_name(shape, m), &e))
        })?;
        let mut metrics = BTreeMap::new();
        for c in &cells {
            if let Some(s) = c.metric("closure") {
                metrics.insert(format!("closure.{}", c.name), s);
            }
        }
        let expectations = cfg
            .expectations
            .iter()
            .map(|e| {
                let name = oblique_cell_name(e.shape, e.misalign);
                let verb = if e.reconstructed { "reconstructed" } else { "not reconstructed" };
                match cells.iter().find(|c| c.name == name).and_then(|c| c.metric("closure")) {
                    Some(s) => Expectation {
                        met: (s >= cfg.cutoff) == e.reconstructed,
                        detail: format!("closure {s:.4} vs cutoff {}", cfg.cutoff),
                        name: format!("{name} {verb}"),
                    },
                    None => Expectation {
                        met: false,
                        detail: "cell missing or failed".into(),
                        name: format!("{name} {verb}"),
                    },
                }
            })
            .collect();
        Ok(ExperimentReport {
            id: self.id().into(),
            seed: ctx.seed,
            config: snapshot,
            cells,
            metrics,
            expectations,
            wall_time_secs: start.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ContrastConfig {
    pub stimulus: ContrastSpec,
    pub log_sigma: f64,
    pub log_radius: usize,
    /// Required excess of the dark-surround disk over the bright-surround
    /// one, as a fraction of the stimulus range.
    pub min_gap: f64,
    /// Allowed disk difference on the equal-background control.
    pub control_tolerance: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            stimulus: ContrastSpec::default(),
            log_sigma: 2.0,
            log_radius: 6,
            min_gap: 0.02,
            control_tolerance: 1e-6,
        }
    }
}

/// LGN stage alone: `O = LoG * I`, `u = K_LGN * O / 4π` divided by the
/// Gaussian's mass and re-anchored to the image mean, `b = (I+u)/2`.
/// Returns `(O, u, b)`.
pub fn lgn_brightness(image: &ScalarField2D, sigma: f64, radius: usize) -> Result<(ScalarField2D, ScalarField2D, ScalarField2D)> {
    let o = lgn_output(image, &log_filter(sigma, radius)?)?;
    let k = lgn_kernel(image.width().max(image.height()))?;
    let raw = propagate_lgn(&o, &k)?.map(|v| v / gaussian_mass(sigma, radius));
    let shift = image.mean() - raw.mean();
    let u = raw.map(|v| v + shift);
    let b = image.zip_map(&u, |i, u| (i + u) / 2.0)?;
    Ok((o, u, b))
}

fn masked_mean(f: &ScalarField2D, mask: &[bool]) -> f64 {
    let (s, n) = f
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    s / n.max(1) as f64
}

pub struct ContrastDemo;

impl ContrastDemo {
    fn cell(cfg: &ContrastConfig, ctx: &RunContext, name: &str, spec: &ContrastSpec) -> Result<CellReport> {
        let image = gen_contrast(spec)?;
        let (o, u, b) = lgn_brightness(&image, cfg.log_sigma, cfg.log_radius)?;
        let (left, right) = (spec.disk_mask(0), spec.disk_mask(1));
        let mut cell = CellReport::new(name);
        let range = image.data().iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v))
            - image.data().iter().fold(f64::INFINITY, |a, &v| a.min(v));
        cell.metrics.insert("diskLeft".into(), masked_mean(&b, &left));
        cell.metrics.insert("diskRight".into(), masked_mean(&b, &right));
        cell.metrics.insert("range".into(), range);
        cell.metrics.insert("meanImage".into(), image.mean());
        cell.metrics.insert("meanBrightness".into(), b.mean());
        let (ulo, uhi) = u.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, c), &v| (a.min(v), c.max(v)));
        let om = o.max_abs();
        ctx.artifact(&mut cell, &format!("{name}-stimulus.png"), |p| save_png_grayscale(p, &image, 0.0, 1.0))?;
        ctx.artifact(&mut cell, &format!("{name}-lgn.png"), |p| save_png_grayscale(p, &o, -om, om))?;
        ctx.artifact(&mut cell, &format!("{name}-activity.png"), |p| save_png_grayscale(p, &u, ulo, uhi))?;
        ctx.artifact(&mut cell, &format!("{name}-brightness.png"), |p| save_png_grayscale(p, &b, 0.0, 1.0))?;
        Ok(cell)
    }
}

impl Experiment for ContrastDemo {
    fn id(&self) -> &'static str {
        "contrast-demo"
    }

    fn default_config(&self) -> Value {
        serde_json::to_value(ContrastConfig::default()).expect("config serializes")
    }

    fn run(&self, overrides: &Value, ctx: &RunContext) -> Result<ExperimentReport> {
        let start = Instant::now();
        let (cfg, snapshot): (ContrastConfig, Value) = resolve(overrides)?;
        let control = ContrastSpec {
            bg_right: cfg.stimulus.bg_left,
            ..cfg.stimulus
        };
        let jobs = [("contrast", cfg.stimulus), ("control", control)];
        let cells = run_cells(ctx, &jobs, |(name, spec)| {
            Self::cell(&cfg, ctx, name, spec).unwrap_or_else(|e| CellReport::failed(*name, &e))
        })?;
        let mut metrics = BTreeMap::new();
        let mut expectations = Vec::new();
        let pair = |c: &CellReport| Some((c.metric("diskLeft")?, c.metric("diskRight")?, c.metric("range")?));
        // The dark surround is whichever half is darker.
        let dark_right = cfg.stimulus.bg_right < cfg.stimulus.bg_left;
        match pair(&cells[0]) {
            Some((l, r, range)) => {
                let (dark, bright) = if dark_right { (r, l) } else { (l, r) };
                let gap = (dark - bright) / range.max(f64::MIN_POSITIVE);
                metrics.insert("diskDarkSurround".into(), dark);
                metrics.insert("diskBrightSurround".into(), bright);
                metrics.insert("relativeGap".into(), gap);
                expectations.push(Expectation {
                    name: "disk on dark surround appears brighter".into(),
                    met: gap >= cfg.min_gap,
                    detail: format!("gap {gap:.4} of range vs {}", cfg.min_gap),
                });
            }
            None => expectations.push(Expectation {
                name: "disk on dark surround appears brighter".into(),
                met: false,
                detail: "contrast cell failed".into(),
            }),
        }
        match pair(&cells[1]) {
            Some((l, r, _)) => {
                metrics.insert("controlDifference".into(), (l - r).abs());
                expectations.push(Expectation {
                    name: "equal surrounds give equal disks".into(),
                    met: (l - r).abs() < cfg.control_tolerance,
                    detail: format!("difference {:.3e} vs {:.0e}", (l - r).abs(), cfg.control_tolerance),
                });
            }
            None => expectations.push(Expectation {
                name: "equal surrounds give equal disks".into(),
                met: false,
                detail: "control cell failed".into(),
            }),
        }
        Ok(ExperimentReport {
            id: self.id().into(),
            seed: ctx.seed,
            config: snapshot,
            cells,
            metrics,
            expectations,
            wall_time_secs: start.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct GroupingDemoConfig {
    pub stimulus: KanizsaSpec,
    pub kernel: FokkerPlanckSpec,
    pub bank: GaborSpec,
    pub grouping: GroupingConfig,
    /// Distance in pixels within which a point counts as matched.
    pub tolerance: f64,
    pub min_coverage: f64,
    pub min_overlap: f64,
}

impl Default for GroupingDemoConfig {
    fn default() -> Self {
        Self {
            stimulus: KanizsaSpec::default(),
            kernel: FokkerPlanckSpec::default(),
            bank: GaborSpec::default(),
            grouping: GroupingConfig::default(),
            tolerance: 3.0,
            min_coverage: 0.9,
            min_overlap: 0.9,
        }
    }
}

/// Fraction of `points` with some `targets` entry within `tol`.
pub fn covered_fraction(points: &[(f64, f64)], targets: &[(f64, f64)], tol: f64) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let t2 = tol * tol;
    let hit = points
        .iter()
        .filter(|p| targets.iter().any(|q| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2) <= t2))
        .count();
    hit as f64 / points.len() as f64
}

/// Kanizsa triangle: three pacmen at the corners of an upright equilateral
/// triangle, each missing the wedge between its two sides.
fn kanizsa_triangle(spec: &KanizsaSpec) -> ScalarField2D {
    let n = spec.canvas;
    let c = (n as f64 - 1.0) / 2.0;
    let circ = spec.side / 3f64.sqrt();
    let corners: Vec<(f64, f64)> = (0..3)
        .map(|i| {
            let a = -std::f64::consts::FRAC_PI_2 + i as f64 * 2.0 * std::f64::consts::PI / 3.0;
            (c + circ * a.cos(), c + circ * a.sin())
        })
        .collect();
    ScalarField2D::from_fn(n, n, |x, y| {
        let p = (x as f64, y as f64);
        for (i, &v) in corners.iter().enumerate() {
            let (dx, dy) = (p.0 - v.0, p.1 - v.1);
            if dx * dx + dy * dy > spec.pacman_radius * spec.pacman_radius {
                continue;
            }
            let (a, b) = (corners[(i + 1) % 3], corners[(i + 2) % 3]);
            let cross = |q: (f64, f64)| (q.0 - v.0) * dy - (q.1 - v.1) * dx;
            let (ca, cb) = (cross(a), cross(b));
            let inside_wedge = ca * cb <= 0.0 && (a.0 - v.0 + b.0 - v.0) * dx + (a.1 - v.1 + b.1 - v.1) * dy >= 0.0;
            if !inside_wedge {
                return spec.pacman;
            }
        }
        spec.background
    })
}

struct GroupingCell {
    report: CellReport,
    unit_pixels: Vec<(f64, f64)>,
    empty_input: bool,
}

pub struct GroupingDemo;

impl GroupingDemo {
    fn cell(
        cfg: &GroupingDemoConfig,
        kernel: &Kernel3D,
        bank: &GaborBank,
        ctx: &RunContext,
        name: &str,
    ) -> Result<(CellReport, Vec<(f64, f64)>)> {
        let (image, inducers) = match name {
            "square" | "diamond" => {
                let shape = if name == "square" { Shape::Square } else { Shape::Diamond };
                let stim = gen_kanizsa(&KanizsaSpec { shape, ..cfg.stimulus })?;
                (stim.image, Some(stim.inducer_points))
            }
            "triangle" => (kanizsa_triangle(&cfg.stimulus), None),
            _ => (ScalarField2D::zeros(cfg.stimulus.canvas, cfg.stimulus.canvas), None),
        };
        let lift = lift_image(&image, bank)?;
        let g = group(&lift, kernel, &cfg.grouping, ctx.seed)?;
        let first = g.unit_pixels(0);
        let pixels: Vec<(f64, f64)> = first.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
        let mut cell = CellReport::new(name);
        cell.metrics.insert("supportPoints".into(), g.support.len() as f64);
        cell.metrics.insert("units".into(), g.units.len() as f64);
        cell.metrics.insert("unit1Pixels".into(), first.len() as f64);
        if let Some(u) = g.units.first() {
            cell.metrics.insert("unit1Saliency".into(), u.saliency);
        }
        if let Some(u) = g.units.get(1) {
            cell.metrics.insert("unit2Saliency".into(), u.saliency);
        }
        if let Some(ind) = &inducers {
            cell.metrics.insert("inducerCoverage".into(), covered_fraction(ind, &pixels, cfg.tolerance));
        }
        ctx.artifact(&mut cell, &format!("{name}-overlay.png"), |p| save_overlay_png(p, &image, &first))?;
        Ok((cell, pixels))
    }
}

impl Experiment for GroupingDemo {
    fn id(&self) -> &'static str {
        "grouping-demo"
    }

    fn default_config(&self) -> Value {
        serde_json::to_value(GroupingDemoConfig::default()).expect("config serializes")
    }

    fn run(&self, overrides: &Value, ctx: &RunContext) -> Result<ExperimentReport> {
        let start = Instant::now();
        let (cfg, snapshot): (GroupingDemoConfig, Value) = resolve(overrides)?;
        let bank = GaborBank::from_spec(&cfg.bank)?;
        let kernel = pool(ctx.workers)?.install(|| v1(&cfg.kernel))?;
        let jobs = ["square", "diamond", "triangle", "empty"];
        let cells = run_cells(ctx, &jobs, |name| match Self::cell(&cfg, &kernel, &bank, ctx, name) {
            Ok((report, unit_pixels)) => GroupingCell {
                report,
                unit_pixels,
                empty_input: false,
            },
            Err(e) => GroupingCell {
                report: CellReport::failed(*name, &e),
                unit_pixels: Vec::new(),
                empty_input: matches!(e, Error::EmptyInput(_)),
            },
        })?;
        let mut metrics = BTreeMap::new();
        let mut expectations = Vec::new();
        let coverage = cells[0].report.metric("inducerCoverage");
        expectations.push(Expectation {
            name: "square unit 1 covers the inducers".into(),
            met: coverage.is_some_and(|c| c >= cfg.min_coverage),
            detail: match coverage {
                Some(c) => format!("coverage {c:.4} vs {}", cfg.min_coverage),
                None => "square cell failed".into(),
            },
        });
        if let Some(c) = coverage {
            metrics.insert("squareCoverage".into(), c);
        }
        let (sq, di) = (&cells[0], &cells[1]);
        let c = (cfg.stimulus.canvas as f64 - 1.0) / 2.0;
        let (s, co) = FRAC_PI_4.sin_cos();
        let rotated: Vec<(f64, f64)> = sq
            .unit_pixels
            .iter()
            .map(|&(x, y)| {
                let (dx, dy) = (x - c, y - c);
                (c + co * dx - s * dy, c + s * dx + co * dy)
            })
            .collect();
        let overlap = covered_fraction(&rotated, &di.unit_pixels, cfg.tolerance)
            .min(covered_fraction(&di.unit_pixels, &rotated, cfg.tolerance));
        let both = sq.report.ok && di.report.ok;
        if both {
            metrics.insert("rotationOverlap".into(), overlap);
        }
        expectations.push(Expectation {
            name: "diamond unit 1 matches the rotated square's".into(),
            met: both && overlap >= cfg.min_overlap,
            detail: if both {
                format!("overlap {overlap:.4} vs {}", cfg.min_overlap)
            } else {
                "square or diamond cell failed".into()
            },
        });
        expectations.push(Expectation {
            name: "arbitrary inducers group without error".into(),
            met: cells[2].report.ok,
            detail: cells[2].report.error.clone().unwrap_or_else(|| "ok".into()),
        });
        expectations.push(Expectation {
            name: "empty image fails its cell with empty input".into(),
            met: cells[3].empty_input,
            detail: cells[3].report.error.clone().unwrap_or_else(|| "cell did not fail".into()),
        });
        Ok(ExperimentReport {
            id: self.id().into(),
            seed: ctx.seed,
            config: snapshot,
            cells: cells.into_iter().map(|c| c.report).collect(),
            metrics,
            expectations,
            wall_time_secs: start.elapsed().as_secs_f64(),
        })
    }
}
