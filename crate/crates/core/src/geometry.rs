//! Site coordinates, distance-decay connectivity and anchor selection.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar sample-site coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteSet {
    coords: Vec<[f64; 2]>,
}

impl SiteSet {
    pub fn new(coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::Input(format!(
                "at least 2 sites are required, got {}",
                coords.len()
            )));
        }
        if let Some(i) = coords
            .iter()
            .position(|c| !c[0].is_finite() || !c[1].is_finite())
        {
            return Err(Error::Input(format!("site {i} has a non-finite coordinate")));
        }
        Ok(Self { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        dist(self.coords[i], self.coords[j])
    }
}

#[inline]
pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Distance-decay kernel shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    /// `exp(-d / r)`
    #[default]
    Exponential,
    /// `exp(-(d / r)^2)`
    Gaussian,
}

impl Kernel {
    #[inline]
    pub fn eval(self, d: f64, range: f64) -> f64 {
        match self {
            Kernel::Exponential => (-d / range).exp(),
            Kernel::Gaussian => {
                let s = d / range;
                (-s * s).exp()
            }
        }
    }
}

/// Kernel range: either fixed, or the longest edge of a Euclidean MST.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Range {
    #[default]
    Auto,
    Fixed(f64),
}

impl Range {
    pub fn resolve(self, sites: &SiteSet) -> Result<f64> {
        match self {
            Range::Auto => mst_max_edge(sites),
            Range::Fixed(r) if r > 0.0 && r.is_finite() => Ok(r),
            Range::Fixed(r) => Err(Error::Input(format!("kernel range must be > 0, got {r}"))),
        }
    }
}

/// Dense symmetric connectivity matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityMatrix {
    entries: DMatrix<f64>,
    kernel_range: Option<f64>,
}

impl ConnectivityMatrix {
    /// Wraps a user-supplied matrix after validating it.
    pub fn from_matrix(entries: DMatrix<f64>) -> Result<Self> {
        let n = entries.nrows();
        if n < 2 || entries.ncols() != n {
            return Err(Error::Input(format!(
                "connectivity must be square with N >= 2, got {}x{}",
                n,
                entries.ncols()
            )));
        }
        let mut any_positive = false;
        for i in 0..n {
            if entries[(i, i)] != 0.0 {
                return Err(Error::Input(format!("connectivity diagonal entry {i} is nonzero")));
            }
            for j in 0..n {
                let c = entries[(i, j)];
                if !c.is_finite() || c < 0.0 {
                    return Err(Error::Input(format!(
                        "connectivity entry ({i},{j}) = {c} is not a finite nonnegative number"
                    )));
                }
                if c != entries[(j, i)] {
                    return Err(Error::Input(format!("connectivity is not symmetric at ({i},{j})")));
                }
                any_positive |= c > 0.0;
            }
        }
        if !any_positive {
            return Err(Error::DegenerateGeometry("connectivity has no positive entry".into()));
        }
        Ok(Self {
            entries,
            kernel_range: None,
        })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn kernel_range(&self) -> Option<f64> {
        self.kernel_range
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    /// `1'C1`
    pub fn total(&self) -> f64 {
        self.entries.sum()
    }
}

/// Row-wise access to a symmetric weight structure, dense or computed on the fly.
pub trait SpatialWeights: Sync {
    fn len(&self) -> usize;

    /// Writes row `i` into `out` (length `len()`).
    fn fill_row(&self, i: usize, out: &mut [f64]);
}

impl SpatialWeights for ConnectivityMatrix {
    fn len(&self) -> usize {
        self.entries.nrows()
    }

    fn fill_row(&self, i: usize, out: &mut [f64]) {
        // symmetric, so column i is row i and columns are contiguous
        out.copy_from_slice(self.entries.column(i).as_slice());
    }
}

/// Kernel connectivity over a site set without materialising the N x N matrix.
#[derive(Debug, Clone)]
pub struct KernelWeights<'a> {
    pub sites: &'a SiteSet,
    pub range: f64,
    pub kernel: Kernel,
}

impl SpatialWeights for KernelWeights<'_> {
    fn len(&self) -> usize {
        self.sites.len()
    }

    fn fill_row(&self, i: usize, out: &mut [f64]) {
        let ci = self.sites.coords[i];
        for (j, o) in out.iter_mut().enumerate() {
            *o = if i == j {
                0.0
            } else {
                self.kernel.eval(dist(ci, self.sites.coords[j]), self.range)
            };
        }
    }
}

fn check_not_coincident(sites: &SiteSet) -> Result<()> {
    let first = sites.coords[0];
    if sites.coords.iter().all(|&c| c == first) {
        return Err(Error::DegenerateGeometry("all sites are coincident".into()));
    }
    Ok(())
}

/// Builds `c_ij = k(d_ij / r)` for `i != j`, zero diagonal.
pub fn build_connectivity(sites: &SiteSet, range: Range) -> Result<ConnectivityMatrix> {
    build_connectivity_with(sites, range, Kernel::Exponential)
}

pub fn build_connectivity_with(
    sites: &SiteSet,
    range: Range,
    kernel: Kernel,
) -> Result<ConnectivityMatrix> {
    check_not_coincident(sites)?;
    let r = range.resolve(sites)?;
    let n = sites.len();
    let mut c = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in (j + 1)..n {
            let v = kernel.eval(sites.distance(i, j), r);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    if !c.iter().any(|&v| v > 0.0) {
        return Err(Error::DegenerateGeometry(format!(
            "range {r} is too small: every connectivity entry underflows to zero"
        )));
    }
    Ok(ConnectivityMatrix {
        entries: c,
        kernel_range: Some(r),
    })
}

/// Length of the longest edge of the Euclidean minimum spanning tree (dense Prim, O(N^2)).
pub fn mst_max_edge(sites: &SiteSet) -> Result<f64> {
    check_not_coincident(sites)?;
    let n = sites.len();
    let coords = &sites.coords;
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    in_tree[0] = true;
    for j in 1..n {
        best[j] = dist(coords[0], coords[j]);
    }
    let mut longest = 0.0f64;
    for _ in 1..n {
        let mut next = usize::MAX;
        let mut next_d = f64::INFINITY;
        for j in 0..n {
            if !in_tree[j] && best[j] < next_d {
                next_d = best[j];
                next = j;
            }
        }
        in_tree[next] = true;
        longest = longest.max(next_d);
        let cn = coords[next];
        for j in 0..n {
            if !in_tree[j] {
                let d = dist(cn, coords[j]);
                if d < best[j] {
                    best[j] = d;
                }
            }
        }
    }
    Ok(longest)
}

/// Anchor points for the Nyström approximation.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    coords: Vec<[f64; 2]>,
    seed: u64,
    /// Within-cluster sum of squares after each Lloyd assignment step.
    wcss_history: Vec<f64>,
}

impl AnchorSet {
    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn wcss_history(&self) -> &[f64] {
        &self.wcss_history
    }
}

const KMEANS_MAX_ITER: usize = 100;
const KMEANS_SHIFT_TOL: f64 = 1e-8;

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans_anchors(sites: &SiteSet, count: usize, seed: u64) -> Result<AnchorSet> {
    let n = sites.len();
    if count < 2 || count > n {
        return Err(Error::Input(format!(
            "anchor count must be in [2, {n}], got {count}"
        )));
    }
    let pts = &sites.coords;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers: Vec<[f64; 2]> = Vec::with_capacity(count);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    centers.push(pts[first]);
    chosen[first] = true;
    let mut d2: Vec<f64> = pts.iter().map(|&p| sq_dist(p, pts[first])).collect();
    while centers.len() < count {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    if target < w {
                        pick = Some(i);
                        break;
                    }
                    target -= w;
                }
            }
            // rounding can exhaust the loop; fall back to the last positive weight
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // every remaining point duplicates a center
            chosen.iter().position(|&c| !c).unwrap()
        };
        chosen[pick] = true;
        centers.push(pts[pick]);
        for (i, p) in pts.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(*p, pts[pick]));
        }
    }

    let mut assign = vec![0usize; n];
    let mut wcss_history = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        let mut wcss = 0.0;
        for (i, &p) in pts.iter().enumerate() {
            let (best, bd) = nearest(&centers, p);
            assign[i] = best;
            wcss += bd;
        }
        wcss_history.push(wcss);

        let mut sums = vec![[0.0f64; 2]; count];
        let mut counts = vec![0usize; count];
        for (i, &p) in pts.iter().enumerate() {
            let a = assign[i];
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            counts[a] += 1;
        }
        let mut shift = 0.0f64;
        for k in 0..count {
            let new = if counts[k] > 0 {
                [sums[k][0] / counts[k] as f64, sums[k][1] / counts[k] as f64]
            } else {
                farthest_point(pts, &centers, &assign)
            };
            shift = shift.max(sq_dist(new, centers[k]).sqrt());
            centers[k] = new;
        }
        if shift < KMEANS_SHIFT_TOL {
            break;
        }
    }

    Ok(AnchorSet {
        coords: centers,
        seed,
        wcss_history,
    })
}

fn nearest(centers: &[[f64; 2]], p: [f64; 2]) -> (usize, f64) {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (k, &c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < bd {
            bd = d;
            best = k;
        }
    }
    (best, bd)
}

fn farthest_point(pts: &[[f64; 2]], centers: &[[f64; 2]], assign: &[usize]) -> [f64; 2] {
    let mut far = 0;
    let mut fd = -1.0;
    for (i, &p) in pts.iter().enumerate() {
        let d = sq_dist(p, centers[assign[i]]);
        if d > fd {
            fd = d;
            far = i;
        }
    }
    pts[far]
}

/// N x L_A matrix of kernel values between sites and anchors.
pub fn cross_connectivity(sites: &SiteSet, anchors: &AnchorSet, range: f64) -> Result<DMatrix<f64>> {
    cross_connectivity_with(sites, anchors, range, Kernel::Exponential)
}

pub fn cross_connectivity_with(
    sites: &SiteSet,
    anchors: &AnchorSet,
    range: f64,
    kernel: Kernel,
) -> Result<DMatrix<f64>> {
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::Input(format!("kernel range must be > 0, got {range}")));
    }
    let n = sites.len();
    let l = anchors.len();
    let mut out = DMatrix::zeros(n, l);
    for j in 0..l {
        let a = anchors.coords[j];
        for i in 0..n {
            let d = dist(sites.coords[i], a);
            if !d.is_finite() {
                return Err(Error::Input(format!("non-finite distance between site {i} and anchor {j}")));
            }
            out[(i, j)] = kernel.eval(d, range);
        }
    }
    Ok(out)
}

/// Anchors placed exactly at the given coordinates (no clustering).
pub fn anchors_at(coords: Vec<[f64; 2]>) -> Result<AnchorSet> {
    if coords.len() < 2 {
        return Err(Error::Input("at least 2 anchors are required".into()));
    }
    Ok(AnchorSet {
        coords,
        seed: 0,
        wcss_history: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;

    fn random_sites(n: usize, seed: u64) -> SiteSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SiteSet::new((0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect()).unwrap()
    }

    /// Kruskal with a naive union-find, used as an oracle.
    fn kruskal_max_edge(sites: &SiteSet) -> f64 {
        let n = sites.len();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                edges.push((sites.distance(i, j), i, j));
            }
        }
        edges.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            r
        }
        let mut longest = 0.0f64;
        for (d, i, j) in edges {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                parent[a] = b;
                longest = longest.max(d);
            }
        }
        longest
    }

    /// Enumerates every (N-1)-edge subset, keeps spanning trees, returns the
    /// longest edge of the minimum-weight one.
    fn exhaustive_mst_max_edge(sites: &SiteSet) -> f64 {
        let n = sites.len();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                edges.push((sites.distance(i, j), i, j));
            }
        }
        fn is_spanning_tree(n: usize, chosen: &[(f64, usize, usize)]) -> bool {
            let mut parent: Vec<usize> = (0..n).collect();
            fn root(p: &[usize], mut x: usize) -> usize {
                while p[x] != x {
                    x = p[x];
                }
                x
            }
            for &(_, i, j) in chosen {
                let (a, b) = (root(&parent, i), root(&parent, j));
                if a == b {
                    return false;
                }
                parent[a] = b;
            }
            true
        }
        fn recurse(
            n: usize,
            edges: &[(f64, usize, usize)],
            start: usize,
            chosen: &mut Vec<(f64, usize, usize)>,
            best: &mut (f64, f64),
        ) {
            if chosen.len() == n - 1 {
                if is_spanning_tree(n, chosen) {
                    let w: f64 = chosen.iter().map(|e| e.0).sum();
                    if w < best.0 {
                        *best = (w, chosen.iter().map(|e| e.0).fold(0.0, f64::max));
                    }
                }
                return;
            }
            for e in start..edges.len() {
                if edges.len() - e < n - 1 - chosen.len() {
                    break;
                }
                chosen.push(edges[e]);
                recurse(n, edges, e + 1, chosen, best);
                chosen.pop();
            }
        }
        let mut best = (f64::INFINITY, 0.0);
        recurse(n, &edges, 0, &mut Vec::new(), &mut best);
        best.1
    }

    #[test]
    fn two_sites_at_range_give_exp_minus_one() {
        let s = SiteSet::new(vec![[0.0, 0.0], [3.0, 4.0]]).unwrap();
        let c = build_connectivity(&s, Range::Fixed(5.0)).unwrap();
        assert_eq!(c.entries()[(0, 0)], 0.0);
        assert_eq!(c.entries()[(1, 1)], 0.0);
        assert!((c.entries()[(0, 1)] - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(c.entries()[(0, 1)], c.entries()[(1, 0)]);
    }

    #[test]
    fn auto_range_matches_kruskal_and_elementwise_kernel() {
        let s = random_sites(5, 11);
        let r = kruskal_max_edge(&s);
        let c = build_connectivity(&s, Range::Auto).unwrap();
        assert!((c.kernel_range().unwrap() - r).abs() < 1e-15);
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 0.0 } else { (-s.distance(i, j) / r).exp() };
                assert!((c.entries()[(i, j)] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn coincident_and_non_finite_sites_rejected() {
        let s = SiteSet::new(vec![[1.0, 1.0]; 4]).unwrap();
        assert!(matches!(build_connectivity(&s, Range::Auto), Err(Error::DegenerateGeometry(_))));
        assert!(matches!(mst_max_edge(&s), Err(Error::DegenerateGeometry(_))));
        assert!(matches!(
            SiteSet::new(vec![[0.0, 0.0], [f64::NAN, 1.0], [1.0, 1.0]]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn duplicates_give_unit_off_diagonal() {
        let s = SiteSet::new(vec![[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]]).unwrap();
        let c = build_connectivity(&s, Range::Auto).unwrap();
        assert_eq!(c.entries()[(0, 1)], 1.0);
        assert_eq!(c.entries()[(0, 0)], 0.0);
    }

    #[test]
    fn mst_small_cases() {
        let s = SiteSet::new(vec![[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]]).unwrap();
        assert_eq!(mst_max_edge(&s).unwrap(), 2.0);
        let s = SiteSet::new(vec![[0.0, 0.0], [3.0, 4.0]]).unwrap();
        assert_eq!(mst_max_edge(&s).unwrap(), 5.0);
    }

    #[test]
    fn mst_matches_exhaustive_spanning_tree_enumeration() {
        for seed in 0..3 {
            let s = random_sites(8, 100 + seed);
            let want = exhaustive_mst_max_edge(&s);
            assert!((mst_max_edge(&s).unwrap() - want).abs() < 1e-14, "seed {seed}");
        }
    }

    #[test]
    fn kmeans_with_one_anchor_per_site_returns_sites() {
        let s = random_sites(12, 3);
        let a = kmeans_anchors(&s, 12, 9).unwrap();
        let mut got = a.coords().to_vec();
        let mut want = s.coords().to_vec();
        let key = |p: &[f64; 2]| (p[0].to_bits(), p[1].to_bits());
        got.sort_by_key(key);
        want.sort_by_key(key);
        assert_eq!(got, want);
    }

    #[test]
    fn kmeans_recovers_two_separated_cluster_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts = Vec::new();
        for c in [[0.0, 0.0], [100.0, 50.0]] {
            for _ in 0..10 {
                pts.push([c[0] + rng.random::<f64>(), c[1] + rng.random::<f64>()]);
            }
        }
        let mean = |s: &[[f64; 2]]| {
            let n = s.len() as f64;
            [s.iter().map(|p| p[0]).sum::<f64>() / n, s.iter().map(|p| p[1]).sum::<f64>() / n]
        };
        let (m0, m1) = (mean(&pts[..10]), mean(&pts[10..]));
        let s = SiteSet::new(pts).unwrap();
        let a = kmeans_anchors(&s, 2, 1).unwrap();
        let mut got = a.coords().to_vec();
        got.sort_by(|p, q| p[0].partial_cmp(&q[0]).unwrap());
        for (g, w) in got.iter().zip([m0, m1]) {
            assert!((g[0] - w[0]).abs() < 1e-9 && (g[1] - w[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn kmeans_deterministic_and_validated() {
        let s = random_sites(200, 4);
        let a = kmeans_anchors(&s, 20, 77).unwrap();
        let b = kmeans_anchors(&s, 20, 77).unwrap();
        assert_eq!(a, b);
        assert!(matches!(kmeans_anchors(&s, 201, 1), Err(Error::Input(_))));
        assert!(matches!(kmeans_anchors(&s, 1, 1), Err(Error::Input(_))));
        for w in a.wcss_history().windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        for c in a.coords() {
            assert!((0.0..=1.0).contains(&c[0]) && (0.0..=1.0).contains(&c[1]));
        }
    }

    #[test]
    fn cross_connectivity_cases() {
        let s = SiteSet::new(vec![[0.0, 0.0], [2.0, 0.0], [0.0, 1.0]]).unwrap();
        let a = anchors_at(vec![[0.0, 0.0], [2.0, 0.0]]).unwrap();
        let m = cross_connectivity(&s, &a, 2.0).unwrap();
        assert_eq!(m[(0, 0)], 1.0);
        assert!((m[(0, 1)] - (-1.0f64).exp()).abs() < 1e-15);
        assert!(matches!(cross_connectivity(&s, &a, 0.0), Err(Error::Input(_))));
    }

    #[test]
    fn cross_connectivity_with_sites_as_anchors_is_c_plus_identity() {
        let s = random_sites(15, 8);
        let a = anchors_at(s.coords().to_vec()).unwrap();
        let c = build_connectivity(&s, Range::Auto).unwrap();
        let cross = cross_connectivity(&s, &a, c.kernel_range().unwrap()).unwrap();
        let diff = cross - (c.entries() + DMatrix::<f64>::identity(15, 15));
        assert!(diff.amax() < 1e-15);
    }

    proptest! {
        #[test]
        fn connectivity_symmetric_zero_diagonal_monotone(seed in 0u64..1000, n in 3usize..20) {
            let s = random_sites(n, seed);
            let c = build_connectivity(&s, Range::Auto).unwrap();
            let e = c.entries();
            for i in 0..n {
                prop_assert_eq!(e[(i, i)], 0.0);
                for j in 0..n {
                    prop_assert_eq!(e[(i, j)], e[(j, i)]);
                    prop_assert!(e[(i, j)] >= 0.0 && e[(i, j)].is_finite());
                }
            }
            let (i, j, k, l) = (0, 1, 1, 2);
            let (dij, dkl) = (s.distance(i, j), s.distance(k, l));
            if dij < dkl {
                prop_assert!(e[(i, j)] > e[(k, l)]);
            }
        }

        #[test]
        fn mst_invariant_under_rigid_motion(seed in 0u64..1000, angle in 0.0f64..6.283, dx in -50.0f64..50.0, dy in -50.0f64..50.0) {
            let s = random_sites(30, seed);
            let (sn, cs) = angle.sin_cos();
            let moved = SiteSet::new(
                s.coords().iter().map(|p| [cs * p[0] - sn * p[1] + dx, sn * p[0] + cs * p[1] + dy]).collect()
            ).unwrap();
            let a = mst_max_edge(&s).unwrap();
            let b = mst_max_edge(&moved).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a);
        }
    }
}
