//! Edge co-occurrence statistics over image corpora.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::{argmax_orientation, lift_image, nonmax_suppress, Edge, GaborBank, GaborSpec};
use crate::grid::ScalarField2D;
use crate::io::{load_png_grayscale, NgfField, Payload};
use crate::kernels::{Kernel2D, Kernel3D, PerCentralKernel};

/// Counts over `(θ_c, Δy, Δx, θ_p)`; offsets are stored row-major like
/// images, `Δy` slower than `Δx`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoocHistogram4D {
    radius: usize,
    n_theta: usize,
    counts: Vec<u64>,
    total_pairs: u64,
}

impl CoocHistogram4D {
    pub fn new(radius: usize, n_theta: usize) -> Result<Self> {
        if radius == 0 || n_theta == 0 {
            return Err(Error::Config(format!(
                "histogram needs radius ≥ 1 and at least one bin, got R={radius}, nθ={n_theta}"
            )));
        }
        let side = 2 * radius + 1;
        Ok(Self {
            radius,
            n_theta,
            counts: vec![0; n_theta * side * side * n_theta],
            total_pairs: 0,
        })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total_pairs(&self) -> u64 {
        self.total_pairs
    }

    #[inline]
    fn index(&self, kc: usize, dx: isize, dy: isize, kp: usize) -> usize {
        let r = self.radius as isize;
        let side = self.side();
        ((kc * side + (dy + r) as usize) * side + (dx + r) as usize) * self.n_theta + kp
    }

    pub fn get(&self, kc: usize, dx: isize, dy: isize, kp: usize) -> u64 {
        let r = self.radius as isize;
        if dx.abs() > r || dy.abs() > r || kc >= self.n_theta || kp >= self.n_theta {
            return 0;
        }
        self.counts[self.index(kc, dx, dy, kp)]
    }

    pub fn row_total(&self, kc: usize) -> u64 {
        let len = self.side() * self.side() * self.n_theta;
        self.counts[kc * len..(kc + 1) * len].iter().sum()
    }

    /// Adds every ordered pair of distinct edges whose offset lies in the
    /// window.
    pub fn accumulate(&mut self, edges: &[Edge]) {
        let r = self.radius as isize;
        let mut cells: HashMap<(isize, isize), Vec<usize>> = HashMap::new();
        for (i, e) in edges.iter().enumerate() {
            cells.entry((e.x as isize / r, e.y as isize / r)).or_default().push(i);
        }
        for (i, c) in edges.iter().enumerate() {
            let (cx, cy) = (c.x as isize, c.y as isize);
            for by in cy / r - 1..=cy / r + 1 {
                for bx in cx / r - 1..=cx / r + 1 {
                    let Some(list) = cells.get(&(bx, by)) else { continue };
                    for &j in list {
                        let p = &edges[j];
                        let (dx, dy) = (p.x as isize - cx, p.y as isize - cy);
                        if i == j || dx.abs() > r || dy.abs() > r {
                            continue;
                        }
                        let idx = self.index(c.theta_index, dx, dy, p.theta_index);
                        self.counts[idx] += 1;
                        self.total_pairs += 1;
                    }
                }
            }
        }
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if (self.radius, self.n_theta) != (other.radius, other.n_theta) {
            return Err(Error::Size(format!(
                "cannot merge histograms with R={} nθ={} and R={} nθ={}",
                self.radius, self.n_theta, other.radius, other.n_theta
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.total_pairs += other.total_pairs;
        Ok(())
    }

    /// Rank-4 array `[nθ, 2R+1, 2R+1, nθ]` with the counts as floats.
    pub fn to_ngf(&self) -> NgfField {
        let side = self.side();
        NgfField::real(
            vec![self.n_theta, side, side, self.n_theta],
            self.counts.iter().map(|&c| c as f64).collect(),
        )
        .expect("consistent dims")
    }

    pub fn from_ngf(field: &NgfField) -> Result<Self> {
        let (&[n, side, side2, n2], Payload::Real(data)) = (&field.dims[..], &field.payload) else {
            return Err(Error::Format(format!("not a co-occurrence histogram: dims {:?}", field.dims)));
        };
        if n != n2 || side != side2 || side % 2 == 0 {
            return Err(Error::Format(format!("not a co-occurrence histogram: dims {:?}", field.dims)));
        }
        let mut h = Self::new(side / 2, n)?;
        for (c, &v) in h.counts.iter_mut().zip(data) {
            if !(v >= 0.0 && v.fract() == 0.0 && v <= u64::MAX as f64) {
                return Err(Error::Data(format!("histogram count {v} is not a nonnegative integer")));
            }
            *c = v as u64;
        }
        h.total_pairs = h.counts.iter().sum();
        Ok(h)
    }
}

pub fn accumulate_cooc(edges: &[Edge], mut hist: CoocHistogram4D) -> CoocHistogram4D {
    hist.accumulate(edges);
    hist
}

/// Lift, take the dominant orientation, thin and threshold (absolute
/// modulus).
pub fn extract_edges(image: &ScalarField2D, bank: &GaborBank, threshold: f64) -> Result<Vec<Edge>> {
    let lift = lift_image(image, bank)?;
    Ok(nonmax_suppress(&argmax_orientation(&lift), threshold))
}

/// Counts over `(Δx, Δy, Δθ)` in the frame of the central orientation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelativeHistogram3D {
    radius: usize,
    n_theta: usize,
    counts: Vec<u64>,
}

impl RelativeHistogram3D {
    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    pub fn get(&self, dx: isize, dy: isize, dk: usize) -> u64 {
        let r = self.radius as isize;
        if dx.abs() > r || dy.abs() > r || dk >= self.n_theta {
            return 0;
        }
        let side = 2 * self.radius + 1;
        self.counts[(((dy + r) as usize) * side + (dx + r) as usize) * self.n_theta + dk]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Rotates each row's offsets by `-θ_c` to the nearest cell and bins the
/// relative orientation. The output window grows to `⌈R√2⌉` so no count
/// is lost.
pub fn reduce_relative(h: &CoocHistogram4D) -> RelativeHistogram3D {
    let n = h.n_theta;
    let r = h.radius as isize;
    let out_r = (h.radius as f64 * 2f64.sqrt()).ceil() as usize;
    let side = 2 * out_r + 1;
    let mut counts = vec![0u64; side * side * n];
    let or = out_r as isize;
    for kc in 0..n {
        let (s, c) = (kc as f64 * PI / n as f64).sin_cos();
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (dx as f64, dy as f64);
                let rx = (c * x + s * y).round() as isize;
                let ry = (-s * x + c * y).round() as isize;
                let base = (((ry + or) as usize) * side + (rx + or) as usize) * n;
                for kp in 0..n {
                    let v = h.counts[h.index(kc, dx, dy, kp)];
                    if v > 0 {
                        counts[base + (kp + n - kc) % n] += v;
                    }
                }
            }
        }
    }
    RelativeHistogram3D {
        radius: out_r,
        n_theta: n,
        counts,
    }
}

/// Row `θ_c = central_bin` as a max-normalized per-central-orientation
/// kernel.
pub fn histogram_to_kernel(h: &CoocHistogram4D, central_bin: usize) -> Result<Kernel3D> {
    if central_bin >= h.n_theta {
        return Err(Error::Config(format!(
            "central bin {central_bin} out of range for {} orientations",
            h.n_theta
        )));
    }
    if h.row_total(central_bin) == 0 {
        return Err(Error::Data(format!("histogram row {central_bin} is empty")));
    }
    let len = h.side() * h.side() * h.n_theta;
    let weights = h.counts[central_bin * len..(central_bin + 1) * len]
        .iter()
        .map(|&c| c as f64)
        .collect();
    Ok(Kernel3D::PerCentralOrientation(
        PerCentralKernel::new(h.radius, h.n_theta, central_bin, weights)?.normalized(),
    ))
}

pub fn horizontal_bin(_n_theta: usize) -> usize {
    0
}

pub fn diagonal_bin(n_theta: usize) -> usize {
    n_theta / 4
}

pub fn k_hor(h: &CoocHistogram4D) -> Result<Kernel3D> {
    histogram_to_kernel(h, horizontal_bin(h.n_theta))
}

pub fn k_diag(h: &CoocHistogram4D) -> Result<Kernel3D> {
    histogram_to_kernel(h, diagonal_bin(h.n_theta))
}

/// Pointwise maximum over the target orientation.
pub fn project_max_theta(k: &Kernel3D) -> Kernel2D {
    match k {
        Kernel3D::PerCentralOrientation(pk) => {
            let n = pk.n_theta();
            Kernel2D::from_fn(pk.radius(), |dx, dy| (0..n).map(|kp| pk.weight(dx, dy, kp)).fold(0.0, f64::max))
        }
        Kernel3D::GroupStationary(sk) => {
            let n = sk.n_theta() as isize;
            Kernel2D::from_fn(sk.extent(), |dx, dy| (0..n).map(|dk| sk.weight(dx, dy, dk)).fold(0.0, f64::max))
        }
    }
}

pub const ELONGATION_LEVEL: f64 = 0.5;

/// Elongation of the half-maximum set of the projected kernel along its
/// central orientation.
pub fn elongation(k: &Kernel3D) -> Result<f64> {
    let Kernel3D::PerCentralOrientation(pk) = k else {
        return Err(Error::Config("elongation needs a per-central-orientation kernel".into()));
    };
    let axis = pk.central_bin() as f64 * PI / pk.n_theta() as f64;
    Ok(project_max_theta(k).elongation(ELONGATION_LEVEL, axis))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct StatsConfig {
    pub radius: usize,
    pub bank: GaborSpec,
    /// Absolute modulus threshold after non-maximum suppression.
    pub nms_threshold: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            radius: 64,
            bank: GaborSpec::default(),
            nms_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CorpusManifest {
    pub images: Vec<PathBuf>,
    pub config: StatsConfig,
    pub total_pairs: u64,
}

/// PNG files in `dir`, sorted by name.
pub fn corpus_paths(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    if paths.is_empty() {
        return Err(Error::EmptyInput(format!("no PNG images in {}", dir.display())));
    }
    paths.sort();
    Ok(paths)
}

fn histogram_of<T: Sync>(
    items: &[T],
    cfg: &StatsConfig,
    load: impl Fn(&T) -> Result<ScalarField2D> + Sync,
) -> Result<CoocHistogram4D> {
    if items.is_empty() {
        return Err(Error::EmptyInput("corpus is empty".into()));
    }
    let bank = GaborBank::from_spec(&cfg.bank)?;
    let empty = CoocHistogram4D::new(cfg.radius, cfg.bank.n_theta)?;
    items
        .par_iter()
        .map(|item| {
            let edges = extract_edges(&load(item)?, &bank, cfg.nms_threshold)?;
            Ok(accumulate_cooc(&edges, empty.clone()))
        })
        .try_reduce(
            || empty.clone(),
            |mut a, b| {
                a.merge(&b)?;
                Ok(a)
            },
        )
}

pub fn corpus_histogram(images: &[ScalarField2D], cfg: &StatsConfig) -> Result<CoocHistogram4D> {
    histogram_of(images, cfg, |im| Ok(im.clone()))
}

pub fn corpus_histogram_from_paths(paths: &[PathBuf], cfg: &StatsConfig) -> Result<CoocHistogram4D> {
    histogram_of(paths, cfg, |p| load_png_grayscale(p))
}

fn line_image(size: usize, lines: &[(f64, f64, f64)], width: f64) -> ScalarField2D {
    // each line: point (px, py) and direction angle
    ScalarField2D::from_fn(size, size, |x, y| {
        lines
            .iter()
            .map(|&(px, py, a)| {
                let d = (x as f64 - px) * a.sin() - (y as f64 - py) * a.cos();
                (-0.5 * d * d / (width * width)).exp()
            })
            .fold(0.0, f64::max)
    })
}

/// Width (Gaussian standard deviation, pixels) of synthetic lines.
pub const LINE_WIDTH: f64 = 0.75;

/// Images of full-width horizontal lines, more than `radius` rows apart so
/// that no two lines share a window.
pub fn horizontal_lines_corpus(n_images: usize, size: usize, radius: usize, seed: u64) -> Vec<ScalarField2D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = radius as f64 + 8.0;
    (0..n_images)
        .map(|_| {
            let mut y = rng.gen_range(8.0..8.0 + gap);
            let mut lines = Vec::new();
            while y < size as f64 - 8.0 {
                lines.push((0.0, y.round(), 0.0));
                y += gap + rng.gen_range(0.0..8.0);
            }
            line_image(size, &lines, LINE_WIDTH)
        })
        .collect()
}

/// Images of long straight lines at uniformly random orientations. The
/// orientations are stratified over the whole corpus (one jittered draw
/// per equal slice of `[0, π)`, shuffled), so every orientation bin sees
/// the same number of lines.
pub fn isotropic_lines_corpus(n_images: usize, size: usize, lines_per_image: usize, seed: u64) -> Vec<ScalarField2D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = n_images * lines_per_image;
    let mut angles: Vec<f64> = (0..total)
        .map(|j| (j as f64 + rng.gen_range(0.0..1.0)) * PI / total as f64)
        .collect();
    angles.shuffle(&mut rng);
    angles
        .chunks(lines_per_image.max(1))
        .take(n_images)
        .map(|chunk| {
            let lines: Vec<(f64, f64, f64)> = chunk
                .iter()
                .map(|&a| (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64), a))
                .collect();
            line_image(size, &lines, LINE_WIDTH)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn edge(x: usize, y: usize, k: usize) -> Edge {
        Edge {
            x,
            y,
            theta_index: k,
            magnitude: 1.0,
        }
    }

    /// Direct double loop over all ordered pairs.
    fn brute(edges: &[Edge], r: usize, n: usize) -> CoocHistogram4D {
        let mut h = CoocHistogram4D::new(r, n).unwrap();
        let ri = r as isize;
        for (i, c) in edges.iter().enumerate() {
            for (j, p) in edges.iter().enumerate() {
                let (dx, dy) = (p.x as isize - c.x as isize, p.y as isize - c.y as isize);
                if i != j && dx.abs() <= ri && dy.abs() <= ri {
                    let idx = h.index(c.theta_index, dx, dy, p.theta_index);
                    h.counts[idx] += 1;
                    h.total_pairs += 1;
                }
            }
        }
        h
    }

    #[test]
    fn pair_counting_examples() {
        let h = accumulate_cooc(&[edge(10, 10, 0), edge(13, 10, 0)], CoocHistogram4D::new(4, 8).unwrap());
        assert_eq!(h.total_pairs(), 2);
        assert_eq!(h.get(0, 3, 0, 0), 1);
        assert_eq!(h.get(0, -3, 0, 0), 1);
        let single = accumulate_cooc(&[edge(5, 5, 2)], CoocHistogram4D::new(4, 8).unwrap());
        assert_eq!(single.total_pairs(), 0);
        let far = accumulate_cooc(&[edge(0, 0, 0), edge(9, 0, 0)], CoocHistogram4D::new(4, 8).unwrap());
        assert_eq!(far.total_pairs(), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn bucketed_counting_matches_brute_force(
            pts in proptest::collection::vec((0usize..40, 0usize..40, 0usize..6), 0..60),
            r in 1usize..12,
        ) {
            let mut seen = std::collections::HashSet::new();
            let edges: Vec<Edge> = pts.into_iter().filter(|p| seen.insert((p.0, p.1))).map(|(x, y, k)| edge(x, y, k)).collect();
            let h = accumulate_cooc(&edges, CoocHistogram4D::new(r, 6).unwrap());
            prop_assert_eq!(&h, &brute(&edges, r, 6));
            prop_assert_eq!(h.counts().iter().sum::<u64>(), h.total_pairs());
            let rel = reduce_relative(&h);
            prop_assert_eq!(rel.total(), h.total_pairs());
        }

        #[test]
        fn counts_do_not_depend_on_image_order(seed in 0u64..50) {
            let corpus = isotropic_lines_corpus(3, 32, 2, seed);
            let cfg = StatsConfig { radius: 6, nms_threshold: 0.3, ..Default::default() };
            let a = corpus_histogram(&corpus, &cfg).unwrap();
            let rev: Vec<_> = corpus.iter().rev().cloned().collect();
            prop_assert_eq!(a, corpus_histogram(&rev, &cfg).unwrap());
        }
    }

    #[test]
    fn mutually_close_edges_give_n_times_n_minus_one_pairs() {
        let edges: Vec<Edge> = (0..7).map(|i| edge(3 + i, 4 + (i % 3), i % 4)).collect();
        let h = accumulate_cooc(&edges, CoocHistogram4D::new(10, 4).unwrap());
        assert_eq!(h.total_pairs(), 7 * 6);
    }

    #[test]
    fn relative_reduction_rotates_to_the_central_frame() {
        let n = 8;
        let mut h = CoocHistogram4D::new(4, n).unwrap();
        let i = h.index(0, 3, 0, 0);
        h.counts[i] = 5;
        let vertical = n / 2;
        let j = h.index(vertical, 0, 3, vertical);
        h.counts[j] = 7;
        h.total_pairs = 12;
        let rel = reduce_relative(&h);
        assert_eq!(rel.get(3, 0, 0), 12);
        assert_eq!(rel.total(), 12);
    }

    #[test]
    fn relative_orientation_wraps() {
        let n = 8;
        let mut h = CoocHistogram4D::new(2, n).unwrap();
        let i = h.index(6, 1, 0, 1);
        h.counts[i] = 1;
        assert_eq!(reduce_relative(&h).counts.iter().position(|&c| c == 1).unwrap() % n, 3);
    }

    #[test]
    fn single_cell_kernel_and_projection() {
        let mut h = CoocHistogram4D::new(3, 4).unwrap();
        let i = h.index(1, -2, 1, 3);
        h.counts[i] = 9;
        let k = histogram_to_kernel(&h, 1).unwrap();
        let Kernel3D::PerCentralOrientation(pk) = &k else { unreachable!() };
        assert_eq!(pk.weight(-2, 1, 3), 1.0);
        assert_eq!(pk.nonzero_count(), 1);
        let p = project_max_theta(&k);
        assert_eq!(p.nonzero_count(), 1);
        assert_eq!(p.weight(-2, 1), 1.0);
        assert!(matches!(histogram_to_kernel(&h, 0), Err(Error::Data(_))));
    }

    #[test]
    fn kernel_support_matches_the_row() {
        let edges: Vec<Edge> = (0..12).map(|i| edge(2 + i * 2, 5 + i % 4, i % 3)).collect();
        let h = accumulate_cooc(&edges, CoocHistogram4D::new(6, 3).unwrap());
        for kc in 0..3 {
            let k = histogram_to_kernel(&h, kc).unwrap();
            let Kernel3D::PerCentralOrientation(pk) = k else { unreachable!() };
            let len = h.side() * h.side() * 3;
            let row_nz = h.counts()[kc * len..(kc + 1) * len].iter().filter(|c| **c > 0).count();
            assert_eq!(pk.nonzero_count(), row_nz);
            assert_eq!(pk.normalized(), pk);
        }
    }

    #[test]
    fn projection_of_theta_constant_kernel_is_any_slice() {
        let n = 4;
        let r = 2usize;
        let side = 2 * r + 1;
        let weights: Vec<f64> = (0..side * side).flat_map(|c| std::iter::repeat((c % 7) as f64 / 6.0).take(n)).collect();
        let k = Kernel3D::PerCentralOrientation(PerCentralKernel::new(r, n, 0, weights).unwrap());
        let p = project_max_theta(&k);
        let Kernel3D::PerCentralOrientation(pk) = &k else { unreachable!() };
        for dy in -2..=2 {
            for dx in -2..=2 {
                assert_eq!(p.weight(dx, dy), pk.weight(dx, dy, 2));
            }
        }
    }

    #[test]
    fn blank_image_has_no_edges() {
        let bank = GaborBank::new(8, 2.0, 6).unwrap();
        assert!(extract_edges(&ScalarField2D::filled(32, 32, 0.4), &bank, 1e-9).unwrap().is_empty());
    }

    #[test]
    fn step_edge_is_found_along_its_level_line() {
        let bank = GaborBank::new(8, 2.0, 6).unwrap();
        let img = ScalarField2D::from_fn(48, 48, |_, y| if y < 24 { 1.0 } else { 0.0 });
        let edges = extract_edges(&img, &bank, 0.2).unwrap();
        assert!(!edges.is_empty());
        for e in &edges {
            assert_eq!(e.theta_index, 0);
            assert!((e.y as f64 - 23.5).abs() <= 2.0, "edge row {}", e.y);
        }
        // every column carries the edge
        for x in 0..48 {
            assert!(edges.iter().any(|e| e.x == x));
        }
    }

    #[test]
    fn contrast_rescaling_only_rescales_the_threshold() {
        let bank = GaborBank::new(8, 2.0, 6).unwrap();
        let img = isotropic_lines_corpus(1, 40, 3, 5).remove(0);
        let scaled = img.map(|v| 0.5 + 0.5 * v);
        let a = extract_edges(&img, &bank, 0.4).unwrap();
        let b = extract_edges(&scaled, &bank, 0.2).unwrap();
        let key = |e: &Edge| (e.x, e.y, e.theta_index);
        assert_eq!(a.iter().map(key).collect::<Vec<_>>(), b.iter().map(key).collect::<Vec<_>>());
    }

    #[test]
    fn ngf_round_trip() {
        let edges: Vec<Edge> = (0..5).map(|i| edge(i * 2, i, i % 2)).collect();
        let h = accumulate_cooc(&edges, CoocHistogram4D::new(3, 2).unwrap());
        let back = CoocHistogram4D::from_ngf(&NgfField::decode(&h.to_ngf().encode()).unwrap()).unwrap();
        assert_eq!(back, h);
    }
}
