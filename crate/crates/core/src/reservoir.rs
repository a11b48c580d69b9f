//! Fixed-capacity point reservoirs and their online mode clustering.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_CAPACITY: usize = 4096;

/// Inserts between scheduled reclusterings of a reservoir.
pub const RECLUSTER_INTERVAL: u32 = 128;

/// Added to degenerate covariances, m².
pub const COVARIANCE_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReservoirPoint {
    pub position: [f32; 3],
    /// RGB in `[0, 1]`.
    pub colour: [f32; 3],
}

impl ReservoirPoint {
    pub fn new(position: Vector3<f64>, colour: [f64; 3]) -> Self {
        Self {
            position: [position.x as f32, position.y as f32, position.z as f32],
            colour: colour.map(|c| c as f32),
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.position[0] as f64, self.position[1] as f64, self.position[2] as f64)
    }

    pub fn colour(&self) -> Vector3<f64> {
        Vector3::new(self.colour[0] as f64, self.colour[1] as f64, self.colour[2] as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClustererParams {
    /// Density kernel bandwidth, metres.
    pub sigma: f64,
    /// Maximum link distance, metres.
    pub tau: f64,
    pub max_cluster_count: usize,
    pub min_cluster_size: usize,
}

impl ClustererParams {
    pub fn indoor() -> Self {
        Self {
            sigma: 0.1,
            tau: 0.05,
            max_cluster_count: 50,
            min_cluster_size: 20,
        }
    }

    pub fn outdoor() -> Self {
        Self {
            sigma: 0.1,
            tau: 0.4,
            max_cluster_count: 50,
            min_cluster_size: 5,
        }
    }
}

/// Statistics of one cluster: a candidate world point ("mode").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub centroid: Vector3<f64>,
    pub colour_centroid: Vector3<f64>,
    /// Sample covariance, regularised when degenerate.
    pub covariance: Matrix3<f64>,
    /// Inverse of `covariance`.
    pub information: Matrix3<f64>,
    pub size: usize,
}

impl ClusterSummary {
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a ReservoirPoint>) -> Self {
        let pts: Vec<&ReservoirPoint> = points.into_iter().collect();
        let n = pts.len();
        assert!(n > 0, "cluster without members");
        let mut centroid = Vector3::zeros();
        let mut colour = Vector3::zeros();
        for p in &pts {
            centroid += p.position();
            colour += p.colour();
        }
        centroid /= n as f64;
        colour /= n as f64;
        let mut covariance = Matrix3::zeros();
        for p in &pts {
            let d = p.position() - centroid;
            covariance += d * d.transpose();
        }
        if n > 1 {
            covariance /= (n - 1) as f64;
        }
        let min_eig = SymmetricEigen::new(covariance).eigenvalues.min();
        if n < 4 || min_eig < COVARIANCE_EPSILON {
            covariance += Matrix3::identity() * COVARIANCE_EPSILON;
        }
        let information = covariance
            .try_inverse()
            .unwrap_or_else(|| Matrix3::identity() / COVARIANCE_EPSILON);
        Self {
            centroid,
            colour_centroid: colour,
            covariance,
            information,
            size: n,
        }
    }
}

/// Uniform sample (Algorithm R) of the points routed to one reservoir.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reservoir {
    capacity: usize,
    points: Vec<ReservoirPoint>,
    seen_count: u64,
    clusters: Vec<ClusterSummary>,
    inserts_since_recluster: u32,
}

impl Reservoir {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "reservoir capacity must be positive");
        Self {
            capacity,
            points: Vec::new(),
            seen_count: 0,
            clusters: Vec::new(),
            inserts_since_recluster: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn points(&self) -> &[ReservoirPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn seen_count(&self) -> u64 {
        self.seen_count
    }

    /// True once enough inserts have accumulated since the last clustering.
    pub fn recluster_due(&self) -> bool {
        self.inserts_since_recluster >= RECLUSTER_INTERVAL
    }

    /// True when points were inserted since the last clustering.
    pub fn is_dirty(&self) -> bool {
        self.inserts_since_recluster > 0
    }

    pub fn add_point<R: Rng + ?Sized>(&mut self, p: ReservoirPoint, rng: &mut R) {
        if self.points.len() < self.capacity {
            self.points.push(p);
        } else {
            let j = rng.random_range(0..=self.seen_count);
            if (j as usize) < self.capacity {
                self.points[j as usize] = p;
            }
        }
        self.seen_count += 1;
        self.inserts_since_recluster = self.inserts_since_recluster.saturating_add(1);
    }

    pub fn recluster(&mut self, params: &ClustererParams) -> &[ClusterSummary] {
        let positions: Vec<Vector3<f64>> = self.points.iter().map(|p| p.position()).collect();
        self.clusters = quick_shift(&positions, params)
            .iter()
            .map(|members| ClusterSummary::from_points(members.iter().map(|&i| &self.points[i])))
            .collect();
        self.inserts_since_recluster = 0;
        &self.clusters
    }

    /// Current cluster summaries, largest first.
    pub fn modes(&self) -> &[ClusterSummary] {
        &self.clusters
    }
}

/// Kernel density of every point: Σ_j exp(−‖p_i − p_j‖² / 2σ²).
pub fn densities(points: &[Vector3<f64>], sigma: f64) -> Vec<f64> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let n = points.len();
    let mut density = vec![0.0; n];
    for i in 0..n {
        density[i] += 1.0;
        for j in i + 1..n {
            let k = (-(points[i] - points[j]).norm_squared() * inv).exp();
            density[i] += k;
            density[j] += k;
        }
    }
    density
}

/// Quick-shift parent links: each point links to its nearest neighbour of
/// strictly higher density within `tau` (lowest index on distance ties), or
/// to nothing when it is a mode.
pub fn quick_shift_parents(points: &[Vector3<f64>], density: &[f64], tau: f64) -> Vec<Option<usize>> {
    let tau2 = tau * tau;
    (0..points.len())
        .map(|i| {
            let mut best: Option<(f64, usize)> = None;
            for j in 0..points.len() {
                if density[j] <= density[i] {
                    continue;
                }
                let d2 = (points[i] - points[j]).norm_squared();
                if d2 <= tau2 && best.is_none_or(|(b, _)| d2 < b) {
                    best = Some((d2, j));
                }
            }
            best.map(|(_, j)| j)
        })
        .collect()
}

/// Clusters as member index lists, largest first (ties by lowest mode index),
/// filtered by the size limits in `params`.
pub fn quick_shift(points: &[Vector3<f64>], params: &ClustererParams) -> Vec<Vec<usize>> {
    let density = densities(points, params.sigma);
    let parent = quick_shift_parents(points, &density, params.tau);
    let n = points.len();
    // parents have strictly higher density, so chains terminate
    let mut root = vec![usize::MAX; n];
    for i in 0..n {
        let mut path = vec![i];
        let mut r = i;
        while let Some(p) = parent[r] {
            if root[p] != usize::MAX {
                r = root[p];
                break;
            }
            path.push(p);
            r = p;
        }
        for k in path {
            root[k] = r;
        }
    }
    let mut members: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &r) in root.iter().enumerate() {
        members.entry(r).or_default().push(i);
    }
    let mut clusters: Vec<(usize, Vec<usize>)> = members
        .into_iter()
        .filter(|(_, m)| m.len() >= params.min_cluster_size)
        .collect();
    clusters.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
    clusters.truncate(params.max_cluster_count);
    clusters.into_iter().map(|(_, m)| m).collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Connected components of the graph linking points within `tau`.
    pub fn tau_components(points: &[Vector3<f64>], tau: f64) -> Vec<Vec<usize>> {
        let n = points.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for i in 0..n {
            for j in i + 1..n {
                if (points[i] - points[j]).norm() <= tau {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for i in 0..n {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
        groups.into_values().collect()
    }

    pub fn two_blobs(rng: &mut ChaCha8Rng, per_blob: usize, separation: f64) -> Vec<Vector3<f64>> {
        let noise = Normal::new(0.0, 0.01).unwrap();
        let dir = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
            .normalize();
        let centre = Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
        let mut pts = Vec::new();
        for c in [centre, centre + dir * separation] {
            for _ in 0..per_blob {
                pts.push(c + Vector3::from_fn(|_, _| noise.sample(rng)));
            }
        }
        pts
    }

    fn point(x: f64, y: f64, z: f64) -> ReservoirPoint {
        ReservoirPoint::new(Vector3::new(x, y, z), [0.5, 0.5, 0.5])
    }

    #[test]
    fn insert_until_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut r = Reservoir::new(DEFAULT_CAPACITY);
        r.add_point(point(0.0, 0.0, 0.0), &mut rng);
        assert_eq!(r.len(), 1);
        for i in 1..DEFAULT_CAPACITY {
            r.add_point(point(i as f64, 0.0, 0.0), &mut rng);
        }
        assert_eq!(r.len(), DEFAULT_CAPACITY);
        for i in 0..100 {
            r.add_point(point(-(i as f64), 0.0, 0.0), &mut rng);
        }
        assert_eq!(r.len(), DEFAULT_CAPACITY);
        assert_eq!(r.seen_count(), DEFAULT_CAPACITY as u64 + 100);
    }

    #[test]
    fn single_point_cluster() {
        let mut r = Reservoir::new(8);
        r.add_point(point(1.0, 2.0, 3.0), &mut ChaCha8Rng::seed_from_u64(0));
        let params = ClustererParams {
            min_cluster_size: 1,
            ..ClustererParams::indoor()
        };
        let c = r.recluster(&params);
        assert_eq!(c.len(), 1);
        assert!((c[0].centroid - Vector3::new(1.0, 2.0, 3.0)).norm() < 1e-6);
        assert_eq!(c[0].covariance, Matrix3::identity() * COVARIANCE_EPSILON);
    }

    #[test]
    fn tight_cloud_is_one_cluster_at_its_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut r = Reservoir::new(64);
        for _ in 0..30 {
            let p = Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()) * 0.02;
            r.add_point(ReservoirPoint::new(p, [0.1, 0.2, 0.3]), &mut rng);
        }
        let c = r.recluster(&ClustererParams::indoor()).to_vec();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].size, 30);
        let mean = r.points().iter().map(|p| p.position()).sum::<Vector3<f64>>() / 30.0;
        assert!((c[0].centroid - mean).norm() < 1e-9);
        assert!((c[0].colour_centroid - Vector3::new(0.1, 0.2, 0.3)).norm() < 1e-6);
    }

    #[test]
    fn two_blobs_match_connectivity() {
        let params = ClustererParams {
            min_cluster_size: 1,
            ..ClustererParams::indoor()
        };
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = two_blobs(&mut rng, 40, 10.0 * params.tau);
            let mut got = quick_shift(&pts, &params);
            got.iter_mut().for_each(|c| c.sort_unstable());
            got.sort();
            let mut want = tau_components(&pts, params.tau);
            want.sort();
            assert_eq!(got, want);
            assert_eq!(got.len(), 2);
        }
    }

    #[test]
    fn modes_lifecycle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut r = Reservoir::new(256);
        assert!(r.modes().is_empty());
        let pts = two_blobs(&mut rng, 50, 0.5);
        for (i, p) in pts.iter().enumerate() {
            // first blob gets 50 points, second 30
            if i < 80 {
                r.add_point(ReservoirPoint::new(*p, [0.0; 3]), &mut rng);
            }
        }
        r.recluster(&ClustererParams::indoor());
        let m = r.modes().to_vec();
        assert_eq!(m.iter().map(|c| c.size).collect::<Vec<_>>(), vec![50, 30]);
        assert_eq!(r.modes(), &m[..]);
        assert!(!r.is_dirty());
    }

    #[test]
    fn limits_are_applied() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // five separated blobs of sizes 5..25
        let mut pts = Vec::new();
        for (b, size) in [5usize, 25, 10, 20, 15].into_iter().enumerate() {
            let c = Vector3::new(b as f64, 0.0, 0.0);
            for _ in 0..size {
                pts.push(c + Vector3::from_fn(|_, _| rng.random_range(-0.01..0.01)));
            }
        }
        let params = ClustererParams {
            min_cluster_size: 10,
            max_cluster_count: 2,
            ..ClustererParams::indoor()
        };
        let sizes: Vec<usize> = quick_shift(&pts, &params).iter().map(|c| c.len()).collect();
        assert_eq!(sizes, vec![25, 20]);
    }

    #[test]
    fn covariance_matches_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<ReservoirPoint> = (0..50)
            .map(|_| ReservoirPoint::new(Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1)), [0.0; 3]))
            .collect();
        let s = ClusterSummary::from_points(&pts);
        let xs: Vec<Vector3<f64>> = pts.iter().map(|p| p.position()).collect();
        let mean = xs.iter().sum::<Vector3<f64>>() / 50.0;
        for a in 0..3 {
            for b in 0..3 {
                let c: f64 = xs.iter().map(|x| (x[a] - mean[a]) * (x[b] - mean[b])).sum::<f64>() / 49.0;
                assert!((s.covariance[(a, b)] - c).abs() < 1e-9);
            }
        }
        assert!((s.covariance * s.information - Matrix3::identity()).norm() < 1e-9);
    }

    #[test]
    fn planar_cluster_is_regularised() {
        let pts: Vec<ReservoirPoint> = (0..25).map(|i| point((i % 5) as f64 * 0.01, (i / 5) as f64 * 0.01, 1.0)).collect();
        let s = ClusterSummary::from_points(&pts);
        assert!(SymmetricEigen::new(s.covariance).eigenvalues.min() >= COVARIANCE_EPSILON * 0.99);
        assert!(s.information.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn reclustering_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = two_blobs(&mut rng, 60, 0.3);
        let a = quick_shift(&pts, &ClustererParams::indoor());
        let b = quick_shift(&pts, &ClustererParams::indoor());
        assert_eq!(a, b);
    }

    proptest::proptest! {
        #[test]
        fn capacity_and_seen_count(cap in 1usize..40, n in 0usize..200, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut r = Reservoir::new(cap);
            let mut last = 0;
            for i in 0..n {
                r.add_point(point(i as f64, 0.0, 0.0), &mut rng);
                proptest::prop_assert!(r.len() <= cap);
                proptest::prop_assert!(r.seen_count() > last);
                last = r.seen_count();
            }
            proptest::prop_assert_eq!(r.len(), n.min(cap));
        }

        #[test]
        fn members_chain_to_their_mode(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vector3<f64>> = (0..60).map(|_| Vector3::from_fn(|_, _| rng.random_range(0.0..0.2))).collect();
            let params = ClustererParams { min_cluster_size: 1, ..ClustererParams::indoor() };
            let density = densities(&pts, params.sigma);
            let parent = quick_shift_parents(&pts, &density, params.tau);
            for cluster in quick_shift(&pts, &params) {
                let mode = *cluster.iter().find(|&&i| parent[i].is_none()).unwrap();
                for &i in &cluster {
                    let mut k = i;
                    while let Some(p) = parent[k] {
                        proptest::prop_assert!((pts[k] - pts[p]).norm() <= params.tau);
                        proptest::prop_assert!(cluster.contains(&p));
                        k = p;
                    }
                    proptest::prop_assert_eq!(k, mode);
                }
            }
        }
    }
}
