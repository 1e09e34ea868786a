//! Outlier selection strategies and the diversity measure δ(S).
//!
//! Every strategy picks rows of a [`CandidateBatch`]. Ties are always broken
//! toward the lower original pool index so selections are reproducible.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterAssignment;
use crate::error::{Error, Result};
use crate::numeric::{squared_distance, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Greedy,
    Biased,
    Uniform,
    Dos,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Random,
        Strategy::Greedy,
        Strategy::Biased,
        Strategy::Uniform,
        Strategy::Dos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Greedy => "greedy",
            Strategy::Biased => "biased",
            Strategy::Uniform => "uniform",
            Strategy::Dos => "dos",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy '{s}'")))
    }
}

/// Scored candidate outliers.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateBatch {
    /// Features used for clustering, one row per candidate.
    pub features: Matrix,
    /// Row ids in the originating pool.
    pub source_indices: Vec<usize>,
    /// Higher means more ID-like (more informative as a negative).
    pub scores: Vec<f64>,
}

impl CandidateBatch {
    pub fn new(features: Matrix, source_indices: Vec<usize>, scores: Vec<f64>) -> Result<Self> {
        if features.rows() != source_indices.len() || features.rows() != scores.len() {
            return Err(Error::Shape(format!(
                "candidate batch has {} rows, {} indices, {} scores",
                features.rows(),
                source_indices.len(),
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("non-finite candidate score".into()));
        }
        Ok(Self {
            features,
            source_indices,
            scores,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Orders `a` before `b` when it has the higher score, then the lower
    /// pool index.
    fn rank(&self, a: usize, b: usize) -> Ordering {
        self.scores[b]
            .total_cmp(&self.scores[a])
            .then(self.source_indices[a].cmp(&self.source_indices[b]))
    }
}

/// Rows chosen from a candidate batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedOutliers {
    /// Indices into the candidate batch, duplicate-free.
    pub indices: Vec<usize>,
    pub strategy: Strategy,
    /// Cluster of each selection, for cluster-based strategies.
    pub clusters: Option<Vec<usize>>,
}

impl SelectedOutliers {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn records(&self, candidates: &CandidateBatch) -> Vec<SelectionRecord> {
        self.indices
            .iter()
            .enumerate()
            .map(|(n, &i)| SelectionRecord {
                pool_index: candidates.source_indices[i],
                cluster_id: self.clusters.as_ref().map(|c| c[n]),
                score: candidates.scores[i],
                strategy: self.strategy,
            })
            .collect()
    }
}

/// One exported selection: `pool_index,cluster_id,score,strategy`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionRecord {
    pub pool_index: usize,
    pub cluster_id: Option<usize>,
    pub score: f64,
    pub strategy: Strategy,
}

impl SelectionRecord {
    pub const CSV_HEADER: &'static str = "pool_index,cluster_id,score,strategy";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{}",
            self.pool_index,
            self.cluster_id.map(|c| c.to_string()).unwrap_or_default(),
            self.score,
            self.strategy
        )
    }
}

fn check_m(m: usize, available: usize, what: &str) -> Result<()> {
    if m > available {
        return Err(Error::InvalidRequest(format!(
            "cannot select {m} outliers from {available} {what}"
        )));
    }
    Ok(())
}

fn check_clusters(candidates: &CandidateBatch, clusters: &ClusterAssignment) -> Result<()> {
    if clusters.assignments.len() != candidates.len() {
        return Err(Error::Shape(format!(
            "{} cluster assignments for {} candidates",
            clusters.assignments.len(),
            candidates.len()
        )));
    }
    Ok(())
}

/// `m` uniform draws without replacement.
pub fn sample_random(candidates: &CandidateBatch, m: usize, rng: &mut Rng) -> Result<SelectedOutliers> {
    check_m(m, candidates.len(), "candidates")?;
    Ok(SelectedOutliers {
        indices: rng.sample_indices(candidates.len(), m),
        strategy: Strategy::Random,
        clusters: None,
    })
}

/// The `m` highest-scoring candidates, best first.
pub fn sample_greedy(candidates: &CandidateBatch, m: usize) -> Result<SelectedOutliers> {
    check_m(m, candidates.len(), "candidates")?;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates.rank(a, b));
    order.truncate(m);
    Ok(SelectedOutliers {
        indices: order,
        strategy: Strategy::Greedy,
        clusters: None,
    })
}

/// `m` uniform draws from a single cluster: `target` if given, otherwise the
/// most populous one (lowest id on ties).
pub fn sample_biased(
    candidates: &CandidateBatch,
    clusters: &ClusterAssignment,
    m: usize,
    target: Option<usize>,
    rng: &mut Rng,
) -> Result<SelectedOutliers> {
    check_clusters(candidates, clusters)?;
    let members = clusters.members();
    let cluster = match target {
        Some(t) if t >= members.len() => {
            return Err(Error::InvalidRequest(format!(
                "target cluster {t} out of range (k = {})",
                members.len()
            )))
        }
        Some(t) => t,
        None => members
            .iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| a.len().cmp(&b.len()).then(j.cmp(i)))
            .map(|(i, _)| i)
            .ok_or_else(|| Error::InvalidRequest("no clusters".into()))?,
    };
    let pool = &members[cluster];
    check_m(m, pool.len(), &format!("members of cluster {cluster}"))?;
    let picks = rng.sample_indices(pool.len(), m);
    Ok(SelectedOutliers {
        indices: picks.into_iter().map(|p| pool[p]).collect(),
        strategy: Strategy::Biased,
        clusters: Some(vec![cluster; m]),
    })
}

/// Round-robin over non-empty clusters in id order, one uniform draw
/// without replacement per cluster per round, until `m` are chosen.
pub fn sample_uniform_clusters(
    candidates: &CandidateBatch,
    clusters: &ClusterAssignment,
    m: usize,
    rng: &mut Rng,
) -> Result<SelectedOutliers> {
    check_clusters(candidates, clusters)?;
    check_m(m, candidates.len(), "candidates")?;
    let mut queues: Vec<(usize, Vec<usize>)> = clusters
        .members()
        .into_iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(c, mut v)| {
            rng.shuffle(&mut v);
            (c, v)
        })
        .collect();
    let mut indices = Vec::with_capacity(m);
    let mut ids = Vec::with_capacity(m);
    let mut round = 0;
    while indices.len() < m {
        for (c, q) in &queues {
            if indices.len() == m {
                break;
            }
            if let Some(&i) = q.get(round) {
                indices.push(i);
                ids.push(*c);
            }
        }
        round += 1;
        queues.retain(|(_, q)| q.len() > round);
    }
    Ok(SelectedOutliers {
        indices,
        strategy: Strategy::Uniform,
        clusters: Some(ids),
    })
}

/// Diverse outlier sampling: the highest-scoring member of every non-empty
/// cluster, in cluster id order.
pub fn sample_dos(candidates: &CandidateBatch, clusters: &ClusterAssignment) -> Result<SelectedOutliers> {
    check_clusters(candidates, clusters)?;
    let mut best: Vec<Option<usize>> = vec![None; clusters.k()];
    for (i, &c) in clusters.assignments.iter().enumerate() {
        let slot = &mut best[c];
        match *slot {
            Some(b) if candidates.rank(b, i) != Ordering::Greater => {}
            _ => *slot = Some(i),
        }
    }
    let (ids, indices): (Vec<usize>, Vec<usize>) = best
        .into_iter()
        .enumerate()
        .filter_map(|(c, b)| b.map(|i| (c, i)))
        .unzip();
    Ok(SelectedOutliers {
        indices,
        strategy: Strategy::Dos,
        clusters: Some(ids),
    })
}

/// `δ(S) = (1/|S|) Σ_i min_{j≠i} ‖x_i − x_j‖`.
pub fn diversity_delta(selected: &Matrix) -> Result<f64> {
    let n = selected.rows();
    if n < 2 {
        return Err(Error::UndefinedIndex(format!(
            "diversity needs at least 2 points, got {n}"
        )));
    }
    let mut nn = vec![f64::INFINITY; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = squared_distance(selected.row(i), selected.row(j));
            nn[i] = nn[i].min(d);
            nn[j] = nn[j].min(d);
        }
    }
    Ok(nn.iter().map(|d| d.sqrt()).sum::<f64>() / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(scores: &[f64]) -> CandidateBatch {
        let n = scores.len();
        CandidateBatch::new(
            Matrix::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap(),
            (0..n).collect(),
            scores.to_vec(),
        )
        .unwrap()
    }

    fn clusters(assign: &[usize], k: usize) -> ClusterAssignment {
        ClusterAssignment {
            assignments: assign.to_vec(),
            centroids: Matrix::zeros(k, 1),
            inertia: 0.0,
            iterations_run: 0,
        }
    }

    fn sorted(mut v: Vec<usize>) -> Vec<usize> {
        v.sort_unstable();
        v
    }

    #[test]
    fn random_cases() {
        let b = batch(&[0.0; 10]);
        let all = sample_random(&b, 10, &mut Rng::new(1)).unwrap();
        assert_eq!(sorted(all.indices), (0..10).collect::<Vec<_>>());
        assert!(sample_random(&b, 0, &mut Rng::new(1)).unwrap().is_empty());
        assert_eq!(
            sample_random(&b, 4, &mut Rng::new(7)).unwrap(),
            sample_random(&b, 4, &mut Rng::new(7)).unwrap()
        );
        assert!(matches!(sample_random(&b, 11, &mut Rng::new(1)), Err(Error::InvalidRequest(_))));
    }

    #[test]
    fn greedy_cases() {
        assert_eq!(sorted(sample_greedy(&batch(&[0.1, 0.9, 0.5]), 2).unwrap().indices), vec![1, 2]);
        assert_eq!(sample_greedy(&batch(&[0.3; 5]), 2).unwrap().indices, vec![0, 1]);

        let mut rng = Rng::new(4);
        let scores: Vec<f64> = (0..50).map(|_| (rng.uniform() * 10.0).floor()).collect();
        let b = batch(&scores);
        let got = sample_greedy(&b, 17).unwrap().indices;
        let mut oracle: Vec<usize> = (0..50).collect();
        oracle.sort_by(|&x, &y| scores[y].partial_cmp(&scores[x]).unwrap().then(x.cmp(&y)));
        assert_eq!(got, oracle[..17].to_vec());
    }

    #[test]
    fn greedy_uses_pool_index_for_ties() {
        let b = CandidateBatch::new(Matrix::zeros(3, 1), vec![40, 7, 19], vec![0.5, 0.5, 0.5]).unwrap();
        assert_eq!(sample_greedy(&b, 2).unwrap().indices, vec![1, 2]);
    }

    #[test]
    fn biased_cases() {
        let mut assign = vec![0; 10];
        assign.extend(vec![1; 3]);
        let b = batch(&[0.0; 13]);
        let c = clusters(&assign, 2);
        let sel = sample_biased(&b, &c, 5, None, &mut Rng::new(3)).unwrap();
        assert!(sel.indices.iter().all(|&i| i < 10));
        assert_eq!(sel.len(), 5);
        let whole = sample_biased(&b, &c, 3, Some(1), &mut Rng::new(3)).unwrap();
        assert_eq!(sorted(whole.indices), vec![10, 11, 12]);
        assert!(matches!(sample_biased(&b, &c, 4, Some(1), &mut Rng::new(3)), Err(Error::InvalidRequest(_))));
        assert_eq!(
            sample_biased(&b, &c, 5, None, &mut Rng::new(9)).unwrap(),
            sample_biased(&b, &c, 5, None, &mut Rng::new(9)).unwrap()
        );
    }

    #[test]
    fn uniform_cases() {
        let assign: Vec<usize> = (0..24).map(|i| i % 6).collect();
        let b = batch(&[0.0; 24]);
        let sel = sample_uniform_clusters(&b, &clusters(&assign, 6), 6, &mut Rng::new(1)).unwrap();
        assert_eq!(sorted(sel.clusters.unwrap()), (0..6).collect::<Vec<_>>());

        let mut assign = vec![0, 1];
        assign.extend(vec![2; 10]);
        let b = batch(&[0.0; 12]);
        let sel = sample_uniform_clusters(&b, &clusters(&assign, 3), 5, &mut Rng::new(2)).unwrap();
        let ids = sel.clusters.clone().unwrap();
        assert_eq!(ids.iter().filter(|&&c| c == 0).count(), 1);
        assert_eq!(ids.iter().filter(|&&c| c == 1).count(), 1);
        assert_eq!(ids.iter().filter(|&&c| c == 2).count(), 3);
        assert_eq!(sorted(sel.indices.clone()).windows(2).filter(|w| w[0] == w[1]).count(), 0);
        assert_eq!(
            sel,
            sample_uniform_clusters(&b, &clusters(&assign, 3), 5, &mut Rng::new(2)).unwrap()
        );
    }

    #[test]
    fn dos_cases() {
        let b = batch(&[0.2, 0.8, 0.5]);
        let sel = sample_dos(&b, &clusters(&[0, 0, 1], 2)).unwrap();
        assert_eq!(sel.indices, vec![1, 2]);
        assert_eq!(sel.clusters, Some(vec![0, 1]));

        let b = batch(&[0.3, 0.1, 0.7, 0.7]);
        let sel = sample_dos(&b, &clusters(&[0, 1, 2, 3], 4)).unwrap();
        assert_eq!(sel.indices, vec![0, 1, 2, 3]);

        // Tie inside a cluster: lower pool index wins; empty cluster skipped.
        let b = batch(&[0.7, 0.1, 0.7]);
        let sel = sample_dos(&b, &clusters(&[2, 2, 2], 3)).unwrap();
        assert_eq!(sel.indices, vec![0]);
        assert!(matches!(sample_dos(&b, &clusters(&[0, 1], 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn dos_matches_per_cluster_maximum() {
        let mut rng = Rng::new(6);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..64).map(|_| (rng.uniform() * 20.0).floor() / 20.0).collect();
            let assign: Vec<usize> = (0..64).map(|_| rng.below(8)).collect();
            let b = batch(&scores);
            let sel = sample_dos(&b, &clusters(&assign, 8)).unwrap();
            let mut expected = Vec::new();
            for c in 0..8 {
                let mut best: Option<usize> = None;
                for i in 0..64 {
                    if assign[i] == c && best.is_none_or(|bi| scores[i] > scores[bi]) {
                        best = Some(i);
                    }
                }
                expected.extend(best);
            }
            assert_eq!(sel.indices, expected);
        }
    }

    #[test]
    fn delta_cases() {
        let pair = Matrix::from_vec(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(diversity_delta(&pair).unwrap(), 1.0);
        let dup = Matrix::from_vec(3, 2, vec![0.0, 0.0, 0.0, 0.0, 5.0, 0.0]).unwrap();
        assert!((diversity_delta(&dup).unwrap() - 5.0 / 3.0).abs() < 1e-15);
        assert!(matches!(diversity_delta(&Matrix::zeros(1, 2)), Err(Error::UndefinedIndex(_))));

        let mut rng = Rng::new(10);
        let pts = Matrix::from_vec(10, 3, (0..30).map(|_| rng.normal()).collect()).unwrap();
        let mut total = 0.0;
        for i in 0..10 {
            let mut best = f64::INFINITY;
            for j in 0..10 {
                if i != j {
                    let d: f64 = (0..3).map(|t| (pts.get(i, t) - pts.get(j, t)).powi(2)).sum::<f64>().sqrt();
                    best = best.min(d);
                }
            }
            total += best;
        }
        assert!((diversity_delta(&pts).unwrap() - total / 10.0).abs() < 1e-12);
    }

    #[test]
    fn csv_record() {
        let b = batch(&[0.25, 0.5]);
        let sel = sample_dos(&b, &clusters(&[1, 0], 2)).unwrap();
        let recs = sel.records(&b);
        assert_eq!(recs[0].to_csv(), "1,0,0.5,dos");
        let g = sample_greedy(&b, 1).unwrap().records(&b);
        assert_eq!(g[0].to_csv(), "1,,0.5,greedy");
    }

    mod props {
        use super::*;
        use crate::numeric::Rng;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn strategies_return_distinct_indices(seed in 0u64..500, n in 4usize..60, k in 1usize..6) {
                prop_assume!(k <= n);
                let mut rng = Rng::new(seed);
                let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
                let assign: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.below(k) }).collect();
                let b = batch(&scores);
                let c = clusters(&assign, k);
                let m = n / 2;
                let sels = [
                    sample_random(&b, m, &mut rng).unwrap(),
                    sample_greedy(&b, m).unwrap(),
                    sample_uniform_clusters(&b, &c, m, &mut rng).unwrap(),
                    sample_dos(&b, &c).unwrap(),
                ];
                for s in &sels {
                    let mut v = s.indices.clone();
                    v.sort_unstable();
                    v.dedup();
                    prop_assert_eq!(v.len(), s.len());
                }
                prop_assert_eq!(sels[3].len(), k);
                // Greedy: nothing excluded beats anything included.
                let min_in = sels[1].indices.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
                for i in 0..n {
                    if !sels[1].indices.contains(&i) {
                        prop_assert!(scores[i] <= min_in);
                    }
                }
            }
        }
    }
}
