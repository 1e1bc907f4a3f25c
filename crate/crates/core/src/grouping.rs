//! Correlation-based feature grouping.
//!
//! Feature dimensions are treated as graph nodes weighted by the absolute
//! correlation coefficients of the source covariance. The graph is split
//! into k groups with normalized spectral clustering: symmetric normalized
//! Laplacian, eigenvectors of the k smallest eigenvalues, row-normalized
//! embedding, then seeded k-means++ with restarts. The partition is computed
//! once per source model and frozen into the stats artifact; it is never
//! recomputed at adaptation time.

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CafeError, Result};
use crate::linalg;
use crate::stats::FeatureStats;

const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 300;

/// Symmetric d×d matrix of absolute correlation coefficients in [0, 1].
#[derive(Debug, Clone)]
pub struct Adjacency {
    matrix: DMatrix<f64>,
}

impl Adjacency {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Assignment of d feature dimensions to k disjoint, non-empty groups.
///
/// Partitions are kept in canonical form: members sorted ascending within
/// each group and groups ordered by their smallest member, so structurally
/// equal partitions compare equal regardless of cluster labeling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    k: usize,
    assignment: Vec<usize>,
    groups: Vec<Vec<usize>>,
}

impl GroupPartition {
    /// Builds a partition from a raw assignment vector, validating that the
    /// groups are disjoint, non-empty, and cover 0..d.
    pub fn from_assignment(assignment: Vec<usize>, k: usize) -> Result<Self> {
        let d = assignment.len();
        if d == 0 {
            return Err(CafeError::invalid("partition over zero dimensions"));
        }
        if k == 0 || k > d {
            return Err(CafeError::invalid(format!(
                "group count k={k} must satisfy 1 <= k <= d={d}"
            )));
        }
        let mut groups = vec![Vec::new(); k];
        for (dim, &g) in assignment.iter().enumerate() {
            if g >= k {
                return Err(CafeError::invalid(format!(
                    "assignment for dimension {dim} is {g}, outside [0, {k})"
                )));
            }
            groups[g].push(dim);
        }
        if groups.iter().any(Vec::is_empty) {
            return Err(CafeError::invalid("every group must be non-empty"));
        }
        Ok(Self::canonicalize(groups))
    }

    pub fn from_groups(groups: Vec<Vec<usize>>) -> Result<Self> {
        let k = groups.len();
        let d: usize = groups.iter().map(Vec::len).sum();
        let mut assignment = vec![usize::MAX; d];
        for (g, members) in groups.iter().enumerate() {
            for &dim in members {
                if dim >= d || assignment[dim] != usize::MAX {
                    return Err(CafeError::invalid(
                        "groups must be disjoint and cover exactly 0..d",
                    ));
                }
                assignment[dim] = g;
            }
        }
        GroupPartition::from_assignment(assignment, k)
    }

    /// One group per dimension.
    pub fn singletons(d: usize) -> Self {
        GroupPartition {
            k: d,
            assignment: (0..d).collect(),
            groups: (0..d).map(|i| vec![i]).collect(),
        }
    }

    /// A single group holding every dimension.
    pub fn single_group(d: usize) -> Self {
        GroupPartition {
            k: 1,
            assignment: vec![0; d],
            groups: vec![(0..d).collect()],
        }
    }

    fn canonicalize(mut groups: Vec<Vec<usize>>) -> Self {
        for members in &mut groups {
            members.sort_unstable();
        }
        groups.sort_by_key(|members| members[0]);
        let d: usize = groups.iter().map(Vec::len).sum();
        let mut assignment = vec![0; d];
        for (g, members) in groups.iter().enumerate() {
            for &dim in members {
                assignment[dim] = g;
            }
        }
        GroupPartition {
            k: groups.len(),
            assignment,
            groups,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }
}

/// Largest group size; the pre-flight quantity checked against the batch size.
pub fn max_group_size(partition: &GroupPartition) -> usize {
    partition.groups().iter().map(Vec::len).max().unwrap_or(0)
}

/// Absolute correlation matrix A_ij = |Σ_ij / sqrt(Σ_ii Σ_jj)| of a source
/// covariance, clamped to [0, 1]. Dimensions with non-positive variance are
/// treated as isolated nodes (unit self-loop, no edges).
pub fn correlation_adjacency(stats: &FeatureStats) -> Adjacency {
    let d = stats.dim();
    let cov = &stats.cov;
    let mut degenerate = Vec::new();
    let std: Vec<f64> = (0..d)
        .map(|i| {
            let var = cov[(i, i)];
            if var > 0.0 {
                var.sqrt()
            } else {
                degenerate.push(i);
                0.0
            }
        })
        .collect();
    if !degenerate.is_empty() {
        log::warn!(
            "degenerate dimensions with non-positive variance treated as isolated: {degenerate:?}"
        );
    }
    let mut matrix = DMatrix::zeros(d, d);
    for i in 0..d {
        matrix[(i, i)] = 1.0;
        for j in (i + 1)..d {
            if std[i] > 0.0 && std[j] > 0.0 {
                let r = (cov[(i, j)] / (std[i] * std[j])).abs().clamp(0.0, 1.0);
                matrix[(i, j)] = r;
                matrix[(j, i)] = r;
            }
        }
    }
    Adjacency { matrix }
}

/// Splits the d dimensions into k groups by normalized spectral clustering.
///
/// Deterministic for a fixed seed. `k == d` short-circuits to singleton
/// groups (the dimension-wise special case).
pub fn spectral_cluster(adjacency: &Adjacency, k: usize, seed: u64) -> Result<GroupPartition> {
    let d = adjacency.dim();
    if k == 0 || k > d {
        return Err(CafeError::invalid(format!(
            "group count k={k} must satisfy 1 <= k <= d={d}"
        )));
    }
    if k == d {
        return Ok(GroupPartition::singletons(d));
    }

    // L = I - D^(-1/2) A D^(-1/2), with the unit diagonal included in D.
    let a = adjacency.matrix();
    let inv_sqrt_degree: Vec<f64> = (0..d)
        .map(|i| {
            let deg: f64 = a.row(i).iter().sum();
            if deg > 0.0 {
                1.0 / deg.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut laplacian = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let norm = a[(i, j)] * inv_sqrt_degree[i] * inv_sqrt_degree[j];
            laplacian[(i, j)] = if i == j { 1.0 - norm } else { -norm };
        }
    }
    let laplacian = linalg::symmetrize(&laplacian);

    let (_, vectors) = linalg::sym_eigen_ascending(&laplacian)?;
    let mut embedding = DMatrix::zeros(d, k);
    for j in 0..k {
        embedding.set_column(j, &vectors.column(j));
    }
    for mut row in embedding.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }

    let assignment = kmeans_best_of(&embedding, k, seed);
    GroupPartition::from_assignment(assignment, k)
}

/// Sub-vectors and principal submatrices of `stats` at each group's indices.
pub fn extract_group_stats(
    stats: &FeatureStats,
    partition: &GroupPartition,
) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    if partition.dim() != stats.dim() {
        return Err(CafeError::invalid(format!(
            "partition covers {} dimensions but statistics have {}",
            partition.dim(),
            stats.dim()
        )));
    }
    Ok(partition
        .groups()
        .iter()
        .map(|members| {
            let g = members.len();
            let mean = DVector::from_iterator(g, members.iter().map(|&i| stats.mean[i]));
            let cov = DMatrix::from_fn(g, g, |r, c| stats.cov[(members[r], members[c])]);
            (mean, cov)
        })
        .collect())
}

fn kmeans_best_of(points: &DMatrix<f64>, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let restart_seed = rng.gen::<u64>();
        let (assignment, inertia) = kmeans_once(points, k, restart_seed);
        if best.as_ref().map_or(true, |(bi, _)| inertia < *bi) {
            best = Some((inertia, assignment));
        }
    }
    best.expect("at least one k-means restart").1
}

fn kmeans_once(points: &DMatrix<f64>, k: usize, seed: u64) -> (Vec<usize>, f64) {
    let n = points.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeanspp_init(points, k, &mut rng);
    let mut assignment = vec![0usize; n];

    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for i in 0..n {
            let best = nearest_centroid(points, &centroids, i);
            if best != assignment[i] {
                assignment[i] = best;
                changed = true;
            }
        }
        repair_empty_clusters(points, &centroids, &mut assignment, k);
        update_centroids(points, &assignment, &mut centroids, k);
        if !changed {
            break;
        }
    }

    let inertia = (0..n)
        .map(|i| (points.row(i).transpose() - centroids.row(assignment[i]).transpose()).norm_squared())
        .sum();
    (assignment, inertia)
}

fn kmeanspp_init(points: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = points.nrows();
    let dim = points.ncols();
    let mut centroids = DMatrix::zeros(k, dim);
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).copy_from(&points.row(first));

    let mut min_sq = vec![0.0f64; n];
    for c in 1..k {
        for i in 0..n {
            let to_last =
                (points.row(i).transpose() - centroids.row(c - 1).transpose()).norm_squared();
            min_sq[i] = if c == 1 { to_last } else { min_sq[i].min(to_last) };
        }
        let total: f64 = min_sq.iter().sum();
        let pick = if total > 0.0 {
            WeightedIndex::new(&min_sq).expect("non-negative weights").sample(rng)
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).copy_from(&points.row(pick));
    }
    centroids
}

fn nearest_centroid(points: &DMatrix<f64>, centroids: &DMatrix<f64>, i: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..centroids.nrows() {
        let d = (points.row(i).transpose() - centroids.row(c).transpose()).norm_squared();
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Reassigns the point farthest from its own centroid to each empty cluster,
/// which keeps every group non-empty.
fn repair_empty_clusters(
    points: &DMatrix<f64>,
    centroids: &DMatrix<f64>,
    assignment: &mut [usize],
    k: usize,
) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignment.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut worst = 0;
        let mut worst_d = -1.0;
        for (i, &a) in assignment.iter().enumerate() {
            if counts[a] <= 1 {
                continue; // moving the sole member would empty another cluster
            }
            let d = (points.row(i).transpose() - centroids.row(a).transpose()).norm_squared();
            if d > worst_d {
                worst_d = d;
                worst = i;
            }
        }
        assignment[worst] = empty;
    }
}

fn update_centroids(
    points: &DMatrix<f64>,
    assignment: &[usize],
    centroids: &mut DMatrix<f64>,
    k: usize,
) {
    let dim = points.ncols();
    let mut sums = DMatrix::<f64>::zeros(k, dim);
    let mut counts = vec![0usize; k];
    for (i, &a) in assignment.iter().enumerate() {
        for j in 0..dim {
            sums[(a, j)] += points[(i, j)];
        }
        counts[a] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            for j in 0..dim {
                centroids[(c, j)] = sums[(c, j)] / counts[c] as f64;
            }
        }
    }
}
