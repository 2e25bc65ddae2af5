//! Retrieval evaluation: distance matrices, mean average precision, CMC
//! curves, cross-run aggregation, and a small exact t-SNE for embedding
//! visualization.
//!
//! The retrieval protocol is the usual one for re-identification: every
//! query embedding ranks the whole gallery by distance, average precision
//! is computed over the ranks of the matching identities, and the CMC curve
//! records how often the first match appears within the top k. Ties in
//! distance are broken by gallery index so results never depend on sort
//! internals.

use std::fmt;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::binio;
use crate::math::gaussian_matrix;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{which} set is empty")]
    EmptySet { which: &'static str },
    #[error("dimension mismatch: {reason}")]
    DimensionMismatch { reason: String },
    #[error("{which} embedding {index} is a zero vector; cosine distance is undefined")]
    ZeroVector { which: &'static str, index: usize },
    #[error("query {query_index} (identity {identity}) has no matching gallery entry")]
    MissingQueryIdentity { query_index: usize, identity: u32 },
    #[error("aggregation needs at least two runs, got {got}")]
    TooFewRuns { got: usize },
    #[error("aggregation input {index} is not finite")]
    NonFiniteRun { index: usize },
    #[error("invalid t-SNE config: {reason}")]
    TsneConfig { reason: String },
    #[error("{}", path.display())]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed report: {reason}")]
    MalformedReport {
        path: std::path::PathBuf,
        reason: String,
    },
}

/// Distance used to rank the gallery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMetric {
    /// `1 - cosine similarity`; rejects zero vectors.
    #[default]
    Cosine,
    Euclidean,
}

/// Ranking protocol options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct EvalProtocol {
    pub metric: DistanceMetric,
    /// Excludes gallery entries that share both identity and camera with
    /// the query, so matches must cross camera views.
    pub cross_camera_only: bool,
}

/// One side of a retrieval problem.
#[derive(Debug, Clone, Copy)]
pub struct RetrievalSet<'a> {
    pub embeddings: &'a Array2<f64>,
    pub identities: &'a [u32],
    pub cameras: &'a [String],
}

impl<'a> RetrievalSet<'a> {
    fn check(&self, which: &'static str) -> Result<(), EvalError> {
        if self.embeddings.nrows() == 0 {
            return Err(EvalError::EmptySet { which });
        }
        if self.identities.len() != self.embeddings.nrows()
            || self.cameras.len() != self.embeddings.nrows()
        {
            return Err(EvalError::DimensionMismatch {
                reason: format!(
                    "{which} has {} embeddings, {} identities, {} cameras",
                    self.embeddings.nrows(),
                    self.identities.len(),
                    self.cameras.len()
                ),
            });
        }
        Ok(())
    }
}

/// Retrieval quality over a query/gallery pair.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    /// Mean average precision, in [0, 1].
    pub map: f64,
    /// `cmc[k]` is the fraction of queries with a correct match in the top
    /// `k + 1`.
    pub cmc: Vec<f64>,
    pub num_queries: usize,
    pub num_gallery: usize,
    pub protocol: EvalProtocol,
}

impl EvalReport {
    /// Rank-k accuracy (1-based), if the curve extends that far.
    pub fn cmc_at(&self, rank: usize) -> Option<f64> {
        if rank == 0 {
            return None;
        }
        self.cmc.get(rank - 1).copied()
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        binio::atomic_write(path, text.as_bytes()).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| EvalError::MalformedReport {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Pairwise distances, queries in rows and gallery in columns.
pub fn distance_matrix(
    query: &Array2<f64>,
    gallery: &Array2<f64>,
    metric: DistanceMetric,
) -> Result<Array2<f64>, EvalError> {
    if query.ncols() != gallery.ncols() {
        return Err(EvalError::DimensionMismatch {
            reason: format!(
                "query dim {} vs gallery dim {}",
                query.ncols(),
                gallery.ncols()
            ),
        });
    }
    let (nq, ng) = (query.nrows(), gallery.nrows());
    let mut out = Array2::zeros((nq, ng));
    match metric {
        DistanceMetric::Euclidean => {
            for i in 0..nq {
                for j in 0..ng {
                    out[[i, j]] = (&query.row(i) - &gallery.row(j))
                        .mapv(|v| v * v)
                        .sum()
                        .sqrt();
                }
            }
        }
        DistanceMetric::Cosine => {
            let norm = |m: &Array2<f64>, which: &'static str| -> Result<Vec<f64>, EvalError> {
                m.rows()
                    .into_iter()
                    .enumerate()
                    .map(|(index, row)| {
                        let n = row.mapv(|v| v * v).sum().sqrt();
                        if n < 1e-12 {
                            Err(EvalError::ZeroVector { which, index })
                        } else {
                            Ok(n)
                        }
                    })
                    .collect()
            };
            let qn = norm(query, "query")?;
            let gn = norm(gallery, "gallery")?;
            for i in 0..nq {
                for j in 0..ng {
                    let dot: f64 = query.row(i).iter().zip(gallery.row(j)).map(|(a, b)| a * b).sum();
                    out[[i, j]] = 1.0 - dot / (qn[i] * gn[j]);
                }
            }
        }
    }
    Ok(out)
}

/// Runs the full retrieval protocol and reports mAP and the CMC curve up to
/// `max_rank`.
///
/// For each query, gallery candidates sharing both identity and camera are
/// dropped first when `cross_camera_only` is set; the survivors are ranked
/// by `(distance, gallery index)`. A query whose identity never appears
/// among its ranked candidates is an error rather than a silent zero.
pub fn evaluate_retrieval(
    query: RetrievalSet,
    gallery: RetrievalSet,
    protocol: EvalProtocol,
    max_rank: usize,
) -> Result<EvalReport, EvalError> {
    query.check("query")?;
    gallery.check("gallery")?;
    let dist = distance_matrix(query.embeddings, gallery.embeddings, protocol.metric)?;
    let nq = query.embeddings.nrows();
    let max_rank = max_rank.max(1);
    let mut ap_sum = 0.0;
    let mut cmc_hits = vec![0usize; max_rank];
    for qi in 0..nq {
        let mut candidates: Vec<usize> = (0..gallery.embeddings.nrows())
            .filter(|&gj| {
                !(protocol.cross_camera_only
                    && gallery.identities[gj] == query.identities[qi]
                    && gallery.cameras[gj] == query.cameras[qi])
            })
            .collect();
        candidates
            .sort_by(|&a, &b| dist[[qi, a]].total_cmp(&dist[[qi, b]]).then(a.cmp(&b)));
        let num_rel = candidates
            .iter()
            .filter(|&&gj| gallery.identities[gj] == query.identities[qi])
            .count();
        if num_rel == 0 {
            return Err(EvalError::MissingQueryIdentity {
                query_index: qi,
                identity: query.identities[qi],
            });
        }
        let mut seen_rel = 0usize;
        let mut ap = 0.0;
        let mut first_hit: Option<usize> = None;
        for (rank0, &gj) in candidates.iter().enumerate() {
            if gallery.identities[gj] == query.identities[qi] {
                seen_rel += 1;
                ap += seen_rel as f64 / (rank0 + 1) as f64;
                if first_hit.is_none() {
                    first_hit = Some(rank0);
                }
            }
        }
        ap_sum += ap / num_rel as f64;
        if let Some(hit) = first_hit {
            if hit < max_rank {
                for slot in cmc_hits.iter_mut().skip(hit) {
                    *slot += 1;
                }
            }
        }
    }
    Ok(EvalReport {
        map: ap_sum / nq as f64,
        cmc: cmc_hits.iter().map(|&h| h as f64 / nq as f64).collect(),
        num_queries: nq,
        num_gallery: gallery.embeddings.nrows(),
        protocol,
    })
}

// ===== Cross-run aggregation =====

/// Mean with a 95% Student-t confidence half-width over repeated runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub mean: f64,
    pub half_width: f64,
    pub runs: usize,
}

impl fmt::Display for RunAggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} \u{b1} {:.2}", self.mean, self.half_width)
    }
}

impl RunAggregate {
    pub fn interval(&self) -> (f64, f64) {
        (self.mean - self.half_width, self.mean + self.half_width)
    }

    /// True when two aggregates' confidence intervals do not touch.
    pub fn separated_from(&self, other: &RunAggregate) -> bool {
        let (lo_a, hi_a) = self.interval();
        let (lo_b, hi_b) = other.interval();
        hi_a < lo_b || hi_b < lo_a
    }
}

/// Aggregates one scalar metric over independent runs.
pub fn aggregate_runs(values: &[f64]) -> Result<RunAggregate, EvalError> {
    if values.len() < 2 {
        return Err(EvalError::TooFewRuns { got: values.len() });
    }
    for (index, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(EvalError::NonFiniteRun { index });
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .expect("valid dof")
        .inverse_cdf(0.975);
    Ok(RunAggregate {
        mean,
        half_width: t * (var / n).sqrt(),
        runs: values.len(),
    })
}

// ===== t-SNE =====

/// Exact (quadratic) t-SNE settings; fine for the few thousand embeddings a
/// visualization needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum_switch_iter: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 500,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 100,
            momentum_switch_iter: 250,
            seed: 0,
        }
    }
}

/// Embeds `data` rows into 2-D with a seeded, fully deterministic t-SNE.
pub fn tsne_embed(data: &Array2<f64>, config: &TsneConfig) -> Result<Array2<f64>, EvalError> {
    let n = data.nrows();
    if !(config.perplexity.is_finite() && config.perplexity >= 2.0) {
        return Err(EvalError::TsneConfig {
            reason: "perplexity must be at least 2".into(),
        });
    }
    if (n as f64) < 3.0 * config.perplexity + 1.0 {
        return Err(EvalError::TsneConfig {
            reason: format!(
                "{n} points is too few for perplexity {}; need at least {}",
                config.perplexity,
                (3.0 * config.perplexity + 1.0).ceil() as usize
            ),
        });
    }
    if config.iterations == 0 {
        return Err(EvalError::TsneConfig {
            reason: "iterations must be positive".into(),
        });
    }

    // Squared input distances.
    let mut d2 = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (&data.row(i) - &data.row(j)).mapv(|v| v * v).sum();
            d2[[i, j]] = d;
            d2[[j, i]] = d;
        }
    }

    // Per-point precision search so each conditional distribution has the
    // requested perplexity.
    let target_entropy = config.perplexity.ln();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let mut beta = 1.0;
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut row = vec![0.0; n];
        for _ in 0..50 {
            let mut sum = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-beta * d2[[i, j]]).exp() };
                sum += row[j];
            }
            let sum = sum.max(1e-300);
            let entropy = row
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    if j == i || v <= 0.0 {
                        0.0
                    } else {
                        let pj = v / sum;
                        -pj * pj.ln()
                    }
                })
                .sum::<f64>();
            if (entropy - target_entropy).abs() < 1e-7 {
                break;
            }
            if entropy > target_entropy {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
        let sum: f64 = row.iter().sum::<f64>().max(1e-300);
        for j in 0..n {
            p[[i, j]] = row[j] / sum;
        }
    }
    // Symmetrize and floor.
    let mut p_sym = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            p_sym[[i, j]] = ((p[[i, j]] + p[[j, i]]) / (2.0 * n as f64)).max(1e-12);
        }
        p_sym[[i, i]] = 1e-12;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut y = gaussian_matrix(n, 2, &mut rng) * 1e-4;
    let mut velocity: Array2<f64> = Array2::zeros((n, 2));
    let mut gains: Array2<f64> = Array2::from_elem((n, 2), 1.0);

    for iter in 0..config.iterations {
        let exaggeration = if iter < config.exaggeration_iters {
            config.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < config.momentum_switch_iter {
            0.5
        } else {
            0.8
        };
        // Student-t affinities in the embedding.
        let mut num = Array2::zeros((n, n));
        let mut q_sum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let d = (y[[i, 0]] - y[[j, 0]]).powi(2) + (y[[i, 1]] - y[[j, 1]]).powi(2);
                let v = 1.0 / (1.0 + d);
                num[[i, j]] = v;
                num[[j, i]] = v;
                q_sum += 2.0 * v;
            }
        }
        let q_sum = q_sum.max(1e-300);
        let mut grad: Array2<f64> = Array2::zeros((n, 2));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[[i, j]] / q_sum).max(1e-12);
                let coeff = 4.0 * (exaggeration * p_sym[[i, j]] - q) * num[[i, j]];
                for k in 0..2 {
                    grad[[i, k]] += coeff * (y[[i, k]] - y[[j, k]]);
                }
            }
        }
        for i in 0..n {
            for k in 0..2 {
                let same_sign = grad[[i, k]].signum() == velocity[[i, k]].signum();
                gains[[i, k]] = if same_sign {
                    (gains[[i, k]] * 0.8).max(0.01)
                } else {
                    gains[[i, k]] + 0.2
                };
                velocity[[i, k]] = momentum * velocity[[i, k]]
                    - config.learning_rate * gains[[i, k]] * grad[[i, k]];
                y[[i, k]] += velocity[[i, k]];
            }
        }
        // Re-center so the embedding cannot drift.
        for k in 0..2 {
            let mean = y.column(k).sum() / n as f64;
            for i in 0..n {
                y[[i, k]] -= mean;
            }
        }
    }
    Ok(y)
}

/// Writes t-SNE coordinates with their identity labels as CSV
/// (`x,y,identity`).
pub fn write_tsne_csv(
    path: &Path,
    coords: &Array2<f64>,
    identities: &[u32],
) -> Result<(), EvalError> {
    if coords.nrows() != identities.len() || coords.ncols() != 2 {
        return Err(EvalError::DimensionMismatch {
            reason: format!(
                "coords are {}x{}, {} identities",
                coords.nrows(),
                coords.ncols(),
                identities.len()
            ),
        });
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["x", "y", "identity"])
        .expect("writing to memory");
    for (row, id) in coords.rows().into_iter().zip(identities) {
        writer
            .write_record([
                format!("{:.6}", row[0]),
                format!("{:.6}", row[1]),
                id.to_string(),
            ])
            .expect("writing to memory");
    }
    let bytes = writer.into_inner().expect("flushing memory writer");
    binio::atomic_write(path, &bytes).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::gaussian_matrix;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cams(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("CAM-{}", i % 3)).collect()
    }

    // ===== Naive counting oracle =====

    /// Direct per-query evaluation: filter, selection-sort by
    /// (distance, index), count matches rank by rank. Shares the AP
    /// expression `hits/rank` with the implementation so both sides can be
    /// compared for exact equality, but nothing else.
    fn oracle_eval(
        query: &RetrievalSet,
        gallery: &RetrievalSet,
        protocol: EvalProtocol,
        max_rank: usize,
    ) -> (f64, Vec<f64>) {
        let dist = distance_matrix(query.embeddings, gallery.embeddings, protocol.metric).unwrap();
        let nq = query.embeddings.nrows();
        let mut ap_sum = 0.0;
        let mut cmc = vec![0.0; max_rank];
        for qi in 0..nq {
            let mut remaining: Vec<usize> = (0..gallery.embeddings.nrows())
                .filter(|&gj| {
                    if !protocol.cross_camera_only {
                        return true;
                    }
                    !(gallery.identities[gj] == query.identities[qi]
                        && gallery.cameras[gj] == query.cameras[qi])
                })
                .collect();
            // Selection sort: repeatedly extract the closest remaining
            // candidate, preferring the lower index on ties.
            let mut ranked = Vec::with_capacity(remaining.len());
            while !remaining.is_empty() {
                let mut best = 0;
                for idx in 1..remaining.len() {
                    let (a, b) = (remaining[idx], remaining[best]);
                    if dist[[qi, a]] < dist[[qi, b]]
                        || (dist[[qi, a]] == dist[[qi, b]] && a < b)
                    {
                        best = idx;
                    }
                }
                ranked.push(remaining.remove(best));
            }
            let num_rel = ranked
                .iter()
                .filter(|&&gj| gallery.identities[gj] == query.identities[qi])
                .count();
            let mut hits = 0usize;
            let mut ap = 0.0;
            let mut first: Option<usize> = None;
            for (rank0, &gj) in ranked.iter().enumerate() {
                if gallery.identities[gj] == query.identities[qi] {
                    hits += 1;
                    ap += hits as f64 / (rank0 + 1) as f64;
                    if first.is_none() {
                        first = Some(rank0);
                    }
                }
            }
            ap_sum += ap / num_rel as f64;
            if let Some(f) = first {
                for r in f..max_rank {
                    cmc[r] += 1.0;
                }
            }
        }
        (
            ap_sum / nq as f64,
            cmc.into_iter().map(|h| h / nq as f64).collect(),
        )
    }

    #[test]
    fn average_precision_matches_the_hand_worked_case() {
        // Ranked gallery: match, miss, match with two relevant entries:
        // AP = (1/1 + 2/3) / 2 = 5/6.
        let query = Array2::from_shape_vec((1, 1), vec![0.0]).unwrap();
        let gallery = Array2::from_shape_vec((3, 1), vec![1.0, 2.0, 3.0]).unwrap();
        let q_ids = [5u32];
        let g_ids = [5u32, 7, 5];
        let report = evaluate_retrieval(
            RetrievalSet {
                embeddings: &query,
                identities: &q_ids,
                cameras: &cams(1),
            },
            RetrievalSet {
                embeddings: &gallery,
                identities: &g_ids,
                cameras: &cams(3),
            },
            EvalProtocol {
                metric: DistanceMetric::Euclidean,
                cross_camera_only: false,
            },
            3,
        )
        .unwrap();
        assert_abs_diff_eq!(report.map, 5.0 / 6.0, epsilon = 1e-15);
        assert_eq!(report.cmc, vec![1.0, 1.0, 1.0]);
        assert_eq!(report.cmc_at(1), Some(1.0));
    }

    #[test]
    fn retrieval_matches_the_naive_oracle_exactly_over_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..60 {
            let nq = rng.random_range(1..=12);
            let ng = rng.random_range(4..=40);
            let dim = rng.random_range(2..=6);
            let ids: Vec<u32> = (0..ng).map(|_| rng.random_range(0..4)).collect();
            // Queries reuse gallery identities so every query has a match.
            let q_ids: Vec<u32> = (0..nq)
                .map(|_| ids[rng.random_range(0..ids.len())])
                .collect();
            let q = gaussian_matrix(nq, dim, &mut rng);
            let g = gaussian_matrix(ng, dim, &mut rng);
            let q_cams: Vec<String> = (0..nq)
                .map(|_| format!("C{}", rng.random_range(0..2)))
                .collect();
            let g_cams: Vec<String> = (0..ng)
                .map(|_| format!("C{}", rng.random_range(0..2)))
                .collect();
            let metric = if case % 2 == 0 {
                DistanceMetric::Cosine
            } else {
                DistanceMetric::Euclidean
            };
            let protocol = EvalProtocol {
                metric,
                cross_camera_only: false,
            };
            let query_set = RetrievalSet {
                embeddings: &q,
                identities: &q_ids,
                cameras: &q_cams,
            };
            let gallery_set = RetrievalSet {
                embeddings: &g,
                identities: &ids,
                cameras: &g_cams,
            };
            let report = evaluate_retrieval(query_set, gallery_set, protocol, 10).unwrap();
            let (map, cmc) = oracle_eval(&query_set, &gallery_set, protocol, 10);
            assert_eq!(report.map, map, "case {case}: mAP diverged from oracle");
            assert_eq!(report.cmc, cmc, "case {case}: CMC diverged from oracle");
        }
    }

    #[test]
    fn camera_filter_drops_same_camera_matches() {
        // The nearest match shares the query camera; the other match sits
        // behind a distractor. The filter must remove the near match.
        let query = Array2::from_shape_vec((1, 1), vec![0.0]).unwrap();
        let gallery = Array2::from_shape_vec((3, 1), vec![0.1, 1.0, 5.0]).unwrap();
        let q_ids = [1u32];
        let g_ids = [1u32, 2, 1];
        let q_cams = vec!["A".to_string()];
        let g_cams = vec!["A".to_string(), "B".to_string(), "B".to_string()];
        let run = |cross_camera_only: bool| {
            evaluate_retrieval(
                RetrievalSet {
                    embeddings: &query,
                    identities: &q_ids,
                    cameras: &q_cams,
                },
                RetrievalSet {
                    embeddings: &gallery,
                    identities: &g_ids,
                    cameras: &g_cams,
                },
                EvalProtocol {
                    metric: DistanceMetric::Euclidean,
                    cross_camera_only,
                },
                2,
            )
            .unwrap()
        };
        // Filtered candidates: the distractor at rank 1, the true match at
        // rank 2, so AP = 1/2 and the first hit misses rank 1.
        let on = run(true);
        assert_abs_diff_eq!(on.map, 0.5, epsilon = 1e-15);
        assert_eq!(on.cmc, vec![0.0, 1.0]);
        // Unfiltered: matches at ranks 1 and 3, AP = (1 + 2/3) / 2.
        let off = run(false);
        assert_abs_diff_eq!(off.map, (1.0 + 2.0 / 3.0) / 2.0, epsilon = 1e-15);
        assert_eq!(off.cmc, vec![1.0, 1.0]);
    }

    #[test]
    fn missing_query_identity_is_an_error() {
        let query = Array2::from_shape_vec((1, 2), vec![1.0, 0.5]).unwrap();
        let gallery = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let err = evaluate_retrieval(
            RetrievalSet {
                embeddings: &query,
                identities: &[9],
                cameras: &cams(1),
            },
            RetrievalSet {
                embeddings: &gallery,
                identities: &[1, 2],
                cameras: &cams(2),
            },
            EvalProtocol::default(),
            5,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            EvalError::MissingQueryIdentity { identity: 9, .. }
        ));
    }

    #[test]
    fn cosine_distance_rejects_zero_vectors() {
        let query = Array2::zeros((1, 3));
        let gallery = Array2::from_elem((2, 3), 1.0);
        assert!(matches!(
            distance_matrix(&query, &gallery, DistanceMetric::Cosine),
            Err(EvalError::ZeroVector { which: "query", index: 0 })
        ));
        assert!(distance_matrix(&query, &gallery, DistanceMetric::Euclidean).is_ok());
    }

    #[test]
    fn cosine_distance_is_scale_invariant_and_euclidean_is_not() {
        let a = Array2::from_shape_vec((1, 2), vec![1.0, 2.0]).unwrap();
        let b = Array2::from_shape_vec((1, 2), vec![3.0, 1.0]).unwrap();
        let b_scaled = &b * 7.0;
        let cos = distance_matrix(&a, &b, DistanceMetric::Cosine).unwrap();
        let cos_scaled = distance_matrix(&a, &b_scaled, DistanceMetric::Cosine).unwrap();
        assert_abs_diff_eq!(cos[[0, 0]], cos_scaled[[0, 0]], epsilon = 1e-12);
        let euc = distance_matrix(&a, &b, DistanceMetric::Euclidean).unwrap();
        let euc_scaled = distance_matrix(&a, &b_scaled, DistanceMetric::Euclidean).unwrap();
        assert!((euc[[0, 0]] - euc_scaled[[0, 0]]).abs() > 1.0);
    }

    #[test]
    fn report_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let report = EvalReport {
            map: 0.8125,
            cmc: vec![0.75, 0.875, 1.0],
            num_queries: 8,
            num_gallery: 40,
            protocol: EvalProtocol::default(),
        };
        report.save(&path).unwrap();
        let loaded = EvalReport::load(&path).unwrap();
        assert_eq!(loaded, report);
    }

    #[test]
    fn aggregate_matches_the_frozen_interval() {
        let agg = aggregate_runs(&[60.0, 62.0, 64.0]).unwrap();
        assert_abs_diff_eq!(agg.mean, 62.0, epsilon = 1e-12);
        assert_abs_diff_eq!(agg.half_width, 4.968275423687506, epsilon = 1e-9);
        assert_eq!(format!("{agg}"), "62.00 \u{b1} 4.97");
    }

    #[test]
    fn aggregate_input_validation() {
        assert!(matches!(
            aggregate_runs(&[1.0]),
            Err(EvalError::TooFewRuns { got: 1 })
        ));
        assert!(matches!(
            aggregate_runs(&[1.0, f64::NAN]),
            Err(EvalError::NonFiniteRun { index: 1 })
        ));
    }

    #[test]
    fn interval_separation_detects_overlap() {
        let a = RunAggregate {
            mean: 10.0,
            half_width: 1.0,
            runs: 3,
        };
        let b = RunAggregate {
            mean: 13.0,
            half_width: 1.5,
            runs: 3,
        };
        let c = RunAggregate {
            mean: 11.5,
            half_width: 1.0,
            runs: 3,
        };
        assert!(a.separated_from(&b));
        assert!(!a.separated_from(&c));
    }

    #[test]
    fn tsne_is_deterministic_and_separates_well_spaced_blobs() {
        // Three blobs far apart in 10-D must stay grouped in 2-D.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let per_blob = 12;
        let n = per_blob * 3;
        let mut data = Array2::zeros((n, 10));
        let mut labels = Vec::new();
        for blob in 0..3 {
            for i in 0..per_blob {
                for k in 0..10 {
                    data[[blob * per_blob + i, k]] =
                        blob as f64 * 25.0 + rng.random_range(-0.5..0.5);
                }
                labels.push(blob as u32);
            }
        }
        let config = TsneConfig {
            perplexity: 5.0,
            iterations: 300,
            ..TsneConfig::default()
        };
        let y1 = tsne_embed(&data, &config).unwrap();
        let y2 = tsne_embed(&data, &config).unwrap();
        assert_eq!(y1, y2, "same seed must give identical embeddings");
        assert_eq!(y1.nrows(), n);
        assert_eq!(y1.ncols(), 2);

        let dist2d = |a: usize, b: usize| -> f64 {
            ((y1[[a, 0]] - y1[[b, 0]]).powi(2) + (y1[[a, 1]] - y1[[b, 1]]).powi(2)).sqrt()
        };
        let (mut within, mut wn) = (0.0, 0);
        let (mut between, mut bn) = (0.0, 0);
        for i in 0..n {
            for j in (i + 1)..n {
                if labels[i] == labels[j] {
                    within += dist2d(i, j);
                    wn += 1;
                } else {
                    between += dist2d(i, j);
                    bn += 1;
                }
            }
        }
        let within = within / wn as f64;
        let between = between / bn as f64;
        assert!(
            within * 2.0 < between,
            "blobs did not separate: within {within:.3}, between {between:.3}"
        );
    }

    #[test]
    fn tsne_rejects_undersized_inputs() {
        let data = Array2::zeros((10, 4));
        let config = TsneConfig {
            perplexity: 5.0,
            ..TsneConfig::default()
        };
        assert!(matches!(
            tsne_embed(&data, &config),
            Err(EvalError::TsneConfig { .. })
        ));
    }

    #[test]
    fn tsne_csv_export_writes_labeled_coordinates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tsne.csv");
        let coords = Array2::from_shape_vec((2, 2), vec![1.5, -2.25, 0.0, 3.0]).unwrap();
        write_tsne_csv(&path, &coords, &[7, 9]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x,y,identity"));
        assert_eq!(lines.next(), Some("1.500000,-2.250000,7"));
        assert_eq!(lines.next(), Some("0.000000,3.000000,9"));
        assert!(write_tsne_csv(&path, &coords, &[1]).is_err());
    }
}
