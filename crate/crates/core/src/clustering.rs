//! K-means over L2-normalized features, K-means++ seeding and the
//! Calinski-Harabasz index.
//!
//! Normalizing each feature row before clustering removes the pull that
//! large-norm (confidently predicted) points have on centroids, so clusters
//! follow direction in feature space rather than scale.

use crate::error::{Error, Result};
use crate::numeric::{l2_normalize_rows, squared_distance, Matrix, Rng};

/// Returned by [`calinski_harabasz`] when the within-cluster dispersion is zero.
pub const CH_ZERO_DISPERSION: f64 = 1e300;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
}

impl KMeansParams {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            max_iters: 100,
            tol: 1e-4,
        }
    }

    pub fn with_max_iters(self, max_iters: usize) -> Self {
        Self { max_iters, ..self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    /// Cluster index per input row, in `0..k`.
    pub assignments: Vec<usize>,
    /// `k x d`.
    pub centroids: Matrix,
    /// Within-cluster sum of squared distances to the final centroids.
    pub inertia: f64,
    pub iterations_run: usize,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Row indices per cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.k()];
        for (i, &a) in self.assignments.iter().enumerate() {
            members[a].push(i);
        }
        members
    }

    pub fn non_empty(&self) -> usize {
        self.sizes().iter().filter(|&&s| s > 0).count()
    }
}

/// Nearest centroid per row by squared Euclidean distance; ties go to the
/// lowest cluster index.
pub fn assign_to_nearest(features: &Matrix, centroids: &Matrix) -> Result<Vec<usize>> {
    if centroids.rows() == 0 {
        return Err(Error::Shape("no centroids".into()));
    }
    if features.cols() != centroids.cols() {
        return Err(Error::Shape(format!(
            "features have {} columns, centroids {}",
            features.cols(),
            centroids.cols()
        )));
    }
    Ok(features
        .row_iter()
        .map(|x| nearest(x, centroids).0)
        .collect())
}

fn nearest(x: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.row_iter().enumerate() {
        let d = squared_distance(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn inertia_of(points: &Matrix, centroids: &Matrix, assignments: &[usize]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| squared_distance(points.row(i), centroids.row(a)))
        .sum()
}

fn check_k(rows: usize, k: usize) -> Result<()> {
    if k == 0 || rows < k {
        return Err(Error::InvalidK { k, rows });
    }
    Ok(())
}

/// D²-weighted seeding: the first centroid is a uniform row, each further
/// one is drawn with probability proportional to its squared distance to
/// the nearest centroid chosen so far. When every remaining row coincides
/// with a chosen centroid the lowest unchosen row is taken.
pub fn kmeans_plusplus_seed(points: &Matrix, k: usize, rng: &mut Rng) -> Result<Matrix> {
    let n = points.rows();
    check_k(n, k)?;
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let first = rng.below(n);
    chosen.push(first);
    taken[first] = true;
    let mut d2: Vec<f64> = points
        .row_iter()
        .map(|x| squared_distance(x, points.row(first)))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            (0..n).find(|&i| !taken[i]).expect("rows >= k")
        };
        chosen.push(next);
        taken[next] = true;
        let c = points.row(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.row(i), c));
        }
    }
    Ok(points.select_rows(&chosen))
}

/// Means of assigned rows. An empty cluster is moved onto the row farthest
/// from its current centroid (rows already used for a repair are skipped).
fn update_centroids(points: &Matrix, assignments: &[usize], old: &Matrix) -> Matrix {
    let (k, d) = (old.rows(), old.cols());
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, &x) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    let mut used = vec![false; points.rows()];
    for c in 0..k {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for s in sums.row_mut(c) {
                *s *= inv;
            }
            continue;
        }
        let mut far = None;
        let mut far_d = f64::NEG_INFINITY;
        for (i, &a) in assignments.iter().enumerate() {
            if used[i] {
                continue;
            }
            let dist = squared_distance(points.row(i), old.row(a));
            if dist > far_d {
                far_d = dist;
                far = Some(i);
            }
        }
        match far {
            Some(i) => {
                used[i] = true;
                sums.row_mut(c).copy_from_slice(points.row(i));
            }
            None => sums.row_mut(c).copy_from_slice(old.row(c)),
        }
    }
    sums
}

/// Lloyd iterations on the rows as given, seeded with K-means++.
///
/// Terminates when assignments stop changing, the largest centroid shift
/// drops below `tol`, or after `max_iters` updates. The returned assignments
/// are always nearest-centroid with respect to the returned centroids; on an
/// exact fixed point the centroids are also the means of their members.
pub fn kmeans(points: &Matrix, params: &KMeansParams, rng: &mut Rng) -> Result<ClusterAssignment> {
    check_k(points.rows(), params.k)?;
    if !points.is_finite() {
        return Err(Error::InvalidInput("non-finite feature".into()));
    }
    let mut centroids = kmeans_plusplus_seed(points, params.k, rng)?;
    let mut assignments = assign_to_nearest(points, &centroids)?;
    let mut inertia = inertia_of(points, &centroids, &assignments);
    let mut iterations_run = 0;
    while iterations_run < params.max_iters {
        iterations_run += 1;
        let next = update_centroids(points, &assignments, &centroids);
        let shift = next
            .row_iter()
            .zip(centroids.row_iter())
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        let next_assign = assign_to_nearest(points, &centroids)?;
        let next_inertia = inertia_of(points, &centroids, &next_assign);
        debug_assert!(
            next_inertia <= inertia + 1e-9 * inertia.max(1.0),
            "inertia increased from {inertia} to {next_inertia}"
        );
        inertia = next_inertia;
        let changed = next_assign != assignments;
        assignments = next_assign;
        if !changed || shift < params.tol {
            break;
        }
    }
    Ok(ClusterAssignment {
        assignments,
        centroids,
        inertia,
        iterations_run,
    })
}

/// K-means on L2-normalized rows: minimizes `Σ ‖z/‖z‖ − μ_i‖²`.
/// Centroids live in the normalized space.
pub fn kmeans_normalized(
    features: &Matrix,
    params: &KMeansParams,
    rng: &mut Rng,
) -> Result<ClusterAssignment> {
    check_k(features.rows(), params.k)?;
    let normalized = l2_normalize_rows(features)?;
    kmeans(&normalized, params, rng)
}

/// `[B/(k−1)] / [W/(n−k)]` over the non-empty clusters present in
/// `assignments`. Returns [`CH_ZERO_DISPERSION`] when `W = 0`.
pub fn calinski_harabasz(features: &Matrix, assignments: &[usize]) -> Result<f64> {
    let n = features.rows();
    if assignments.len() != n {
        return Err(Error::Shape(format!(
            "{} assignments for {n} rows",
            assignments.len()
        )));
    }
    let labels = assignments.iter().copied().max().map_or(0, |m| m + 1);
    let d = features.cols();
    let mut sums = Matrix::zeros(labels, d);
    let mut counts = vec![0usize; labels];
    let mut global = vec![0.0; d];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for ((s, g), &x) in sums.row_mut(a).iter_mut().zip(&mut global).zip(features.row(i)) {
            *s += x;
            *g += x;
        }
    }
    let k = counts.iter().filter(|&&c| c > 0).count();
    if k < 2 {
        return Err(Error::UndefinedIndex(format!(
            "Calinski-Harabasz needs at least 2 non-empty clusters, found {k}"
        )));
    }
    if n <= k {
        return Err(Error::UndefinedIndex(format!(
            "Calinski-Harabasz needs more points ({n}) than clusters ({k})"
        )));
    }
    for g in &mut global {
        *g /= n as f64;
    }
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            for s in sums.row_mut(c) {
                *s /= count as f64;
            }
        }
    }
    let between: f64 = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(c, &count)| count as f64 * squared_distance(sums.row(c), &global))
        .sum();
    let within: f64 = assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| squared_distance(features.row(i), sums.row(a)))
        .sum();
    if within == 0.0 {
        return Ok(CH_ZERO_DISPERSION);
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_points(rng: &mut Rng, n: usize, d: usize) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    fn exact(k: usize) -> KMeansParams {
        KMeansParams {
            k,
            max_iters: 1000,
            tol: 0.0,
        }
    }

    #[test]
    fn separated_pairs_split() {
        let x = Matrix::from_vec(4, 2, vec![10.0, 0.1, 10.0, -0.1, -10.0, 0.2, -10.0, -0.2]).unwrap();
        for seed in 0..10 {
            let c = kmeans_normalized(&x, &KMeansParams::new(2), &mut Rng::new(seed)).unwrap();
            assert_eq!(c.assignments[0], c.assignments[1]);
            assert_eq!(c.assignments[2], c.assignments[3]);
            assert_ne!(c.assignments[0], c.assignments[2]);
        }
    }

    #[test]
    fn k_equals_rows_has_zero_inertia() {
        let mut rng = Rng::new(5);
        let x = random_points(&mut rng, 9, 3);
        let c = kmeans_normalized(&x, &KMeansParams::new(9), &mut rng).unwrap();
        assert_eq!(c.inertia, 0.0);
        assert_eq!(c.non_empty(), 9);
    }

    #[test]
    fn errors() {
        let x = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            kmeans_normalized(&x, &KMeansParams::new(3), &mut Rng::new(0)),
            Err(Error::InvalidK { k: 3, rows: 2 })
        ));
        assert!(matches!(
            kmeans_normalized(&x, &KMeansParams::new(0), &mut Rng::new(0)),
            Err(Error::InvalidK { .. })
        ));
        let z = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            kmeans_normalized(&z, &KMeansParams::new(1), &mut Rng::new(0)),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn local_optimum_and_inertia_oracle() {
        let mut rng = Rng::new(21);
        for trial in 0..20 {
            let x = random_points(&mut rng, 12, 2);
            let c = kmeans_normalized(&x, &exact(3), &mut Rng::new(trial)).unwrap();
            let z = l2_normalize_rows(&x).unwrap();
            // Brute-force inertia.
            let mut brute = 0.0;
            for i in 0..12 {
                let mut s = 0.0;
                for j in 0..2 {
                    let d = z.get(i, j) - c.centroids.get(c.assignments[i], j);
                    s += d * d;
                }
                brute += s;
            }
            assert!((brute - c.inertia).abs() < 1e-9);
            // No single-point move to another centroid lowers inertia.
            for i in 0..12 {
                let own = squared_distance(z.row(i), c.centroids.row(c.assignments[i]));
                for j in 0..3 {
                    assert!(squared_distance(z.row(i), c.centroids.row(j)) >= own);
                }
            }
            // Converged: centroids are member means.
            for (cl, members) in c.members().iter().enumerate() {
                if members.is_empty() {
                    continue;
                }
                for j in 0..2 {
                    let mean = members.iter().map(|&i| z.get(i, j)).sum::<f64>() / members.len() as f64;
                    assert!((mean - c.centroids.get(cl, j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn plusplus_seed_cases() {
        let mut rng = Rng::new(3);
        let x = random_points(&mut rng, 7, 3);
        let z = l2_normalize_rows(&x).unwrap();
        let c = kmeans_plusplus_seed(&z, 1, &mut Rng::new(1)).unwrap();
        assert!((0..7).any(|i| z.row(i) == c.row(0)));

        // Five copies of one point and one distinct point.
        let mut rows = vec![vec![1.0, 0.0]; 5];
        rows.push(vec![0.0, 1.0]);
        let dup = Matrix::from_rows(&rows, 2).unwrap();
        for seed in 0..20 {
            let c = kmeans_plusplus_seed(&dup, 2, &mut Rng::new(seed)).unwrap();
            assert_ne!(c.row(0), c.row(1));
        }

        let a = kmeans_plusplus_seed(&z, 4, &mut Rng::new(99)).unwrap();
        let b = kmeans_plusplus_seed(&z, 4, &mut Rng::new(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn assignment_tie_rule_and_oracle() {
        let centroids = Matrix::from_vec(3, 1, vec![5.0, 0.0, 2.0]).unwrap();
        let x = Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        // 1.0 is equidistant from centroids 1 (0.0) and 2 (2.0).
        assert_eq!(assign_to_nearest(&x, &centroids).unwrap(), vec![1, 2]);

        let mut rng = Rng::new(8);
        let pts = random_points(&mut rng, 20, 3);
        let cs = random_points(&mut rng, 4, 3);
        let got = assign_to_nearest(&pts, &cs).unwrap();
        for i in 0..20 {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..4 {
                let mut d = 0.0;
                for t in 0..3 {
                    d += (pts.get(i, t) - cs.get(j, t)).powi(2);
                }
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assert_eq!(got[i], best);
        }
        assert!(assign_to_nearest(&pts, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn empty_cluster_repair_keeps_k_alive() {
        // Two coincident groups and k = 3 forces an empty cluster early on.
        let rows = vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.6, 0.8],
        ];
        let x = Matrix::from_rows(&rows, 2).unwrap();
        let c = kmeans_normalized(&x, &exact(3), &mut Rng::new(0)).unwrap();
        assert_eq!(c.non_empty(), 3);
    }

    #[test]
    fn power_of_two_rescale_is_bitwise_invariant() {
        let mut rng = Rng::new(31);
        let x = random_points(&mut rng, 40, 5);
        let base = kmeans_normalized(&x, &KMeansParams::new(6), &mut Rng::new(4)).unwrap();
        for (row, alpha) in [(0, 1024.0), (17, 1.0 / 512.0), (39, 2.0)] {
            let mut y = x.clone();
            for v in y.row_mut(row) {
                *v *= alpha;
            }
            let c = kmeans_normalized(&y, &KMeansParams::new(6), &mut Rng::new(4)).unwrap();
            assert_eq!(c, base);
        }
    }

    #[test]
    fn ch_examples() {
        // Two tight clusters 100x farther apart than their spread.
        let mut rng = Rng::new(2);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            for _ in 0..10 {
                rows.push(vec![100.0 * c as f64 + rng.normal(), rng.normal()]);
                labels.push(c);
            }
        }
        let x = Matrix::from_rows(&rows, 2).unwrap();
        assert!(calinski_harabasz(&x, &labels).unwrap() > 1e3);

        let same = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]], 2).unwrap();
        assert_eq!(calinski_harabasz(&same, &[0, 0, 1, 1]).unwrap(), CH_ZERO_DISPERSION);

        assert!(matches!(calinski_harabasz(&same, &[0, 0, 0, 0]), Err(Error::UndefinedIndex(_))));
        let two = Matrix::from_rows(&[vec![0.0], vec![1.0]], 1).unwrap();
        assert!(matches!(calinski_harabasz(&two, &[0, 1]), Err(Error::UndefinedIndex(_))));
    }

    mod props {
        use super::*;
        use crate::numeric::Rng;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn same_seed_same_result(seed in 0u64..1000, n in 8usize..30) {
                let mut rng = Rng::new(seed);
                let x = random_points(&mut rng, n, 3);
                let a = kmeans_normalized(&x, &KMeansParams::new(4), &mut Rng::new(seed)).unwrap();
                let b = kmeans_normalized(&x, &KMeansParams::new(4), &mut Rng::new(seed)).unwrap();
                prop_assert_eq!(a, b);
            }

            #[test]
            fn assignments_are_nearest(seed in 0u64..1000, n in 5usize..40, k in 1usize..5) {
                prop_assume!(k <= n);
                let mut rng = Rng::new(seed);
                let x = random_points(&mut rng, n, 2);
                let c = kmeans_normalized(&x, &KMeansParams::new(k), &mut rng).unwrap();
                let z = l2_normalize_rows(&x).unwrap();
                prop_assert_eq!(assign_to_nearest(&z, &c.centroids).unwrap(), c.assignments);
            }
        }
    }
}
