//! Grouping of lifted points into perceptual units: the connectivity kernel
//! restricted to the thresholded support, its leading eigenvectors, and the
//! linearized mean-field step.

mod eigen;
mod mean_field;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use eigen::{eigen_solver, fix_sign, residual, EigenPair, EigenSolver, Lanczos, PowerDeflation, EIGEN_SOLVERS};
pub use mean_field::{mean_field_step, nonlinearity, Identity, Nonlinearity, Tanh, NONLINEARITIES};

use crate::error::{Error, Result};
use crate::filtering::{argmax_orientation, nonmax_suppress, threshold_support, SupportPoint, SupportSet};
use crate::grid::LiftedField3D;
use crate::kernels::Kernel3D;

/// Sparse symmetric matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
}

impl AffinityMatrix {
    /// Builds from per-row `(column, value)` lists; each list must be sorted.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let nnz = rows.iter().map(Vec::len).sum();
        let mut cols = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        for row in rows {
            for (c, v) in row {
                cols.push(c);
                values.push(v);
            }
            row_ptr.push(cols.len());
        }
        Self {
            n,
            row_ptr,
            cols,
            values,
        }
    }

    pub fn from_dense(n: usize, dense: &[f64]) -> Self {
        assert_eq!(dense.len(), n * n);
        Self::from_rows(
            (0..n)
                .map(|i| (0..n).filter(|&j| dense[i * n + j] != 0.0).map(|j| (j, dense[i * n + j])).collect())
                .collect(),
        )
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(p) => self.values[r.start + p],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .into_par_iter()
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d[i * self.n + j] = v;
            }
        }
        d
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| self.get(j, i) == v))
    }

    pub fn max_abs_row_sum(&self) -> f64 {
        (0..self.n)
            .map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Entry `(i, j)` is `(K(i→j) + K(j→i))/2`; entries below `truncation`
/// (the kernel being max-normalized) are dropped.
pub fn assemble_affinity(support: &SupportSet, kernel: &Kernel3D, truncation: f64) -> Result<AffinityMatrix> {
    if support.is_empty() {
        return Err(Error::EmptyInput("support set is empty".into()));
    }
    let reach = kernel.reach().max(1) as isize;
    let mut buckets: HashMap<(isize, isize), Vec<usize>> = HashMap::new();
    for (i, p) in support.points.iter().enumerate() {
        buckets
            .entry((p.x as isize / reach, p.y as isize / reach))
            .or_default()
            .push(i);
    }
    let pts = &support.points;
    let rows: Vec<Vec<(usize, f64)>> = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let p = pts[i];
            let (bx, by) = (p.x as isize / reach, p.y as isize / reach);
            let a = (p.x as f64, p.y as f64, p.k);
            let mut row = Vec::new();
            for cy in by - 1..=by + 1 {
                for cx in bx - 1..=bx + 1 {
                    let Some(list) = buckets.get(&(cx, cy)) else { continue };
                    for &j in list {
                        let q = pts[j];
                        let b = (q.x as f64, q.y as f64, q.k);
                        let w = 0.5 * (kernel.pair_weight(a, b) + kernel.pair_weight(b, a));
                        if w > 0.0 && w >= truncation {
                            row.push((j, w));
                        }
                    }
                }
            }
            row.sort_by_key(|e| e.0);
            row
        })
        .collect();
    Ok(AffinityMatrix::from_rows(rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualUnit {
    pub saliency: f64,
    /// Indices into the support set.
    pub members: Vec<usize>,
    /// Eigenvector entries on the members.
    pub weights: Vec<f64>,
}

/// Splits descending eigenpairs into runs whose values lie within
/// `degeneracy · |λ|` of the run's first value.
pub fn degenerate_clusters(eigs: &[EigenPair], degeneracy: f64) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=eigs.len() {
        if i == eigs.len() || eigs[start].value - eigs[i].value > degeneracy * eigs[start].value.abs() {
            out.push(start..i);
            start = i;
        }
    }
    out
}

/// One unit per cluster of (near-)equal eigenvalues. A simple eigenvalue
/// gives the points where `|v| ≥ threshold · max|v|`, weighted by `v`. In a
/// degenerate cluster the eigenvector basis is arbitrary, so membership uses
/// the basis-free `sqrt(Σ v_j²)` over the cluster instead.
pub fn extract_units(eigs: &[EigenPair], member_threshold: f64, degeneracy: f64) -> Vec<PerceptualUnit> {
    degenerate_clusters(eigs, degeneracy)
        .into_iter()
        .filter_map(|r| {
            let cluster = &eigs[r];
            let score: Vec<f64> = if cluster.len() == 1 {
                cluster[0].vector.clone()
            } else {
                (0..cluster[0].vector.len())
                    .map(|i| cluster.iter().map(|e| e.vector[i] * e.vector[i]).sum::<f64>().sqrt())
                    .collect()
            };
            let peak = score.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if peak == 0.0 {
                return None;
            }
            let cut = member_threshold * peak;
            let (members, weights) = score
                .iter()
                .enumerate()
                .filter(|(_, v)| v.abs() >= cut && **v != 0.0)
                .map(|(i, v)| (i, *v))
                .unzip();
            Some(PerceptualUnit {
                saliency: cluster[0].value,
                members,
                weights,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct UnitMember {
    pub x: usize,
    pub y: usize,
    pub theta_index: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub saliency: f64,
    pub members: Vec<UnitMember>,
}

impl UnitRecord {
    pub fn new(unit: &PerceptualUnit, support: &SupportSet) -> Self {
        Self {
            saliency: unit.saliency,
            members: unit
                .members
                .iter()
                .zip(&unit.weights)
                .map(|(&i, &w)| {
                    let p = support.points[i];
                    UnitMember {
                        x: p.x,
                        y: p.y,
                        theta_index: p.k,
                        weight: w,
                    }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct GroupingConfig {
    /// Support threshold as a fraction of the largest lifted modulus.
    pub support_fraction: f64,
    pub affinity_truncation: f64,
    pub solver: String,
    pub n_units: usize,
    pub member_threshold: f64,
    /// Relative gap below which consecutive eigenvalues form one unit.
    pub degeneracy_tolerance: f64,
    /// Keep only non-maximum-suppressed edge pixels at their dominant
    /// orientation instead of every supra-threshold lifted point.
    pub thin_support: bool,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            support_fraction: 0.5,
            affinity_truncation: 1e-3,
            solver: "lanczos".into(),
            n_units: 4,
            member_threshold: 0.2,
            degeneracy_tolerance: 1e-6,
            thin_support: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Grouping {
    pub support: SupportSet,
    pub units: Vec<PerceptualUnit>,
    pub nnz: usize,
}

impl Grouping {
    /// Pixels of unit `i`, deduplicated over orientations, in scan order.
    pub fn unit_pixels(&self, i: usize) -> Vec<(usize, usize)> {
        let Some(u) = self.units.get(i) else { return Vec::new() };
        let mut px: Vec<(usize, usize)> = u
            .members
            .iter()
            .map(|&m| (self.support.points[m].y, self.support.points[m].x))
            .collect();
        px.sort_unstable();
        px.dedup();
        px.into_iter().map(|(y, x)| (x, y)).collect()
    }
}

/// Threshold → affinity → leading eigenvectors → units.
pub fn group(lift: &LiftedField3D, kernel: &Kernel3D, cfg: &GroupingConfig, seed: u64) -> Result<Grouping> {
    let peak = lift.max_modulus();
    if peak == 0.0 {
        return Err(Error::EmptyInput("lifted field is identically zero".into()));
    }
    let h = cfg.support_fraction * peak;
    let support = if cfg.thin_support {
        let orientation = argmax_orientation(lift);
        SupportSet {
            n_theta: lift.n_theta(),
            width: lift.width(),
            height: lift.height(),
            points: nonmax_suppress(&orientation, h)
                .into_iter()
                .map(|e| SupportPoint {
                    x: e.x,
                    y: e.y,
                    k: e.theta_index,
                    modulus: e.magnitude,
                })
                .collect(),
        }
    } else {
        threshold_support(lift, h)
    };
    let m = assemble_affinity(&support, kernel, cfg.affinity_truncation)?;
    let solver = eigen_solver(&cfg.solver)?;
    if cfg.n_units == 0 {
        return Err(Error::Config("n_units must be positive".into()));
    }
    // Fetch pairs until the requested clusters are known to be complete.
    let mut k = (cfg.n_units + 1).min(m.n());
    let eigs = loop {
        let eigs = solver.leading(&m, k, seed)?;
        if k == m.n() || degenerate_clusters(&eigs, cfg.degeneracy_tolerance).len() > cfg.n_units {
            break eigs;
        }
        k = (2 * k).min(m.n());
    };
    log::debug!("grouping: {} support points, {} nonzeros, λ1 = {:.4}", m.n(), m.nnz(), eigs[0].value);
    let mut units = extract_units(&eigs, cfg.member_threshold, cfg.degeneracy_tolerance);
    units.truncate(cfg.n_units);
    Ok(Grouping {
        nnz: m.nnz(),
        units,
        support,
    })
}

#[cfg(test)]
mod tests {
    use nalgebra::{DMatrix, SymmetricEigen};
    use proptest::prelude::*;

    use super::*;
    use crate::kernels::StationaryKernel;

    fn dense_oracle(n: usize, dense: &[f64]) -> Vec<f64> {
        let m = DMatrix::from_row_slice(n, n, dense);
        let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    fn blocks() -> AffinityMatrix {
        let n = 6;
        let mut d = vec![0.0; 36];
        for i in 0..n {
            for j in 0..n {
                if (i < 4 && j < 4) || (i >= 4 && j >= 4) {
                    d[i * n + j] = 1.0;
                }
            }
        }
        AffinityMatrix::from_dense(n, &d)
    }

    #[test]
    fn block_example_for_both_solvers() {
        let m = blocks();
        let oracle = dense_oracle(6, &m.to_dense());
        assert!((oracle[0] - 4.0).abs() < 1e-12 && (oracle[1] - 2.0).abs() < 1e-12);
        for name in EIGEN_SOLVERS.names() {
            let eigs = eigen_solver(name).unwrap().leading(&m, 2, 7).unwrap();
            assert!((eigs[0].value - 4.0).abs() < 1e-6 * 4.0, "{name}");
            assert!((eigs[1].value - 2.0).abs() < 1e-6 * 2.0, "{name}");
            for i in 0..4 {
                assert!((eigs[0].vector[i] - 0.5).abs() < 1e-6);
            }
            for i in 4..6 {
                assert!(eigs[0].vector[i].abs() < 1e-6);
                assert!((eigs[1].vector[i] - 0.5f64.sqrt()).abs() < 1e-6);
            }
            let units = extract_units(&eigs, 0.2, 1e-6);
            assert_eq!(units[0].members, vec![0, 1, 2, 3]);
            assert_eq!(units[1].members, vec![4, 5]);
        }
    }

    #[test]
    fn scaled_identity() {
        let n = 5;
        let d: Vec<f64> = (0..25).map(|i| if i % 6 == 0 { 3.5 } else { 0.0 }).collect();
        let m = AffinityMatrix::from_dense(n, &d);
        for name in EIGEN_SOLVERS.names() {
            let eigs = eigen_solver(name).unwrap().leading(&m, 3, 1).unwrap();
            assert!(eigs.iter().all(|e| (e.value - 3.5).abs() < 1e-12), "{name}");
        }
    }

    #[test]
    fn unknown_solver_lists_alternatives() {
        let err = eigen_solver("qr").err().unwrap();
        assert!(err.to_string().contains("lanczos"));
    }

    fn random_symmetric(n: usize, seed: u64, density: f64) -> AffinityMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                if rng.gen::<f64>() < density {
                    let v = rng.gen::<f64>();
                    d[i * n + j] = v;
                    d[j * n + i] = v;
                }
            }
        }
        AffinityMatrix::from_dense(n, &d)
    }

    #[test]
    fn lanczos_matches_dense_oracle_on_random_matrices() {
        for (n, seed) in [(30, 1), (120, 2), (200, 3)] {
            let m = random_symmetric(n, seed, 0.2);
            let oracle = dense_oracle(n, &m.to_dense());
            let eigs = Lanczos::default().leading(&m, 5, 11).unwrap();
            for (e, o) in eigs.iter().zip(&oracle) {
                assert!((e.value - o).abs() <= 1e-6 * o.abs(), "n={n}: {} vs {o}", e.value);
                assert!(residual(&m, e) <= 1e-6 * e.value.abs());
            }
        }
    }

    #[test]
    fn power_matches_dense_oracle() {
        let m = random_symmetric(40, 9, 0.3);
        let oracle = dense_oracle(40, &m.to_dense());
        let eigs = PowerDeflation::default().leading(&m, 2, 5).unwrap();
        for (e, o) in eigs.iter().zip(&oracle) {
            assert!((e.value - o).abs() <= 1e-6 * o.abs());
        }
    }

    #[test]
    fn solvers_are_deterministic_per_seed() {
        let m = random_symmetric(80, 4, 0.1);
        let a = Lanczos::default().leading(&m, 3, 42).unwrap();
        let b = Lanczos::default().leading(&m, 3, 42).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn positive_scaling_scales_values_and_keeps_units(seed in 0u64..1000, s in 0.1f64..10.0) {
            let m = random_symmetric(25, seed, 0.3);
            let a = Lanczos::default().leading(&m, 2, 3).unwrap();
            let b = Lanczos::default().leading(&m.scaled(s), 2, 3).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((y.value - s * x.value).abs() <= 1e-6 * (s * x.value).abs());
            }
            let ua = extract_units(&a[..1], 0.2, 0.0);
            let ub = extract_units(&b[..1], 0.2, 0.0);
            prop_assert_eq!(&ua[0].members, &ub[0].members);
        }
    }

    #[test]
    fn zero_member_threshold_keeps_all_nonzero_entries() {
        let e = EigenPair {
            value: 1.0,
            vector: vec![0.5, 0.0, -0.1, 0.3],
        };
        assert_eq!(extract_units(&[e], 0.0, 0.0)[0].members, vec![0, 2, 3]);
    }

    #[test]
    fn twin_blocks_form_one_unit() {
        let n = 7;
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if (i < 3 && j < 3) || ((3..6).contains(&i) && (3..6).contains(&j)) {
                    d[i * n + j] = 1.0;
                }
            }
        }
        d[6 * n + 6] = 0.5;
        let m = AffinityMatrix::from_dense(n, &d);
        for name in EIGEN_SOLVERS.names() {
            let eigs = eigen_solver(name).unwrap().leading(&m, 3, 2).unwrap();
            assert_eq!(degenerate_clusters(&eigs, 1e-6), vec![0..2, 2..3]);
            let units = extract_units(&eigs, 0.2, 1e-6);
            assert_eq!(units.len(), 2, "{name}");
            assert_eq!(units[0].members, vec![0, 1, 2, 3, 4, 5]);
            assert!(units[0].weights.iter().all(|w| (w - 1.0 / 3f64.sqrt()).abs() < 1e-6));
            assert_eq!(units[1].members, vec![6]);
        }
    }

    fn support(points: &[(usize, usize, usize)]) -> SupportSet {
        SupportSet {
            n_theta: 8,
            width: 64,
            height: 64,
            points: points
                .iter()
                .map(|&(x, y, k)| SupportPoint { x, y, k, modulus: 1.0 })
                .collect(),
        }
    }

    fn toy_kernel() -> Kernel3D {
        // Collinear, co-oriented continuation up to 6 px only.
        Kernel3D::GroupStationary(StationaryKernel::from_fn(8, 8, |dx, dy, dk| {
            if dy == 0 && dk == 0 && dx.abs() <= 6 {
                1.0 / (1.0 + dx.abs() as f64)
            } else {
                0.0
            }
        }))
    }

    #[test]
    fn affinity_examples() {
        let k = toy_kernel();
        let single = assemble_affinity(&support(&[(10, 10, 0)]), &k, 0.0).unwrap();
        assert_eq!(single.to_dense(), vec![1.0]);

        let pair = assemble_affinity(&support(&[(10, 10, 0), (14, 10, 0)]), &k, 1e-3).unwrap();
        assert!((pair.get(0, 1) - 0.2).abs() < 1e-12);
        let ortho = assemble_affinity(&support(&[(10, 10, 0), (40, 40, 4)]), &k, 1e-3).unwrap();
        assert_eq!(ortho.get(0, 1), 0.0);

        assert!(matches!(assemble_affinity(&support(&[]), &k, 0.0), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn affinity_is_exactly_symmetric() {
        let fp = crate::kernels::fokker_planck_kernel(&crate::kernels::FokkerPlanckSpec::with_default_kappa(8, 10, 8.0)).unwrap();
        let k = Kernel3D::GroupStationary(fp);
        let pts: Vec<_> = (0..40).map(|i| ((i * 7) % 30 + 5, (i * 11) % 25 + 5, i % 8)).collect();
        let m = assemble_affinity(&support(&pts), &k, 1e-4).unwrap();
        assert!(m.is_symmetric());
        assert!(m.nnz() > 40);
    }
}
