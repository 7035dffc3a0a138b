//! Point subsampling strategies and neighborhood operators.
//!
//! All routines are brute force by design; the O(n²) paths double as the
//! oracles for everything downstream. Ties always break to the lowest
//! index, and the farthest-point samplers start at index 0.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::RandomState;
use crate::tensor::Real;

mod backbone;

pub use backbone::{
    Backbone, BackboneConfig, BackboneMode, BackboneOutput, LevelConfig, LevelOutput,
};


/// Which rule produced a set of sample indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Random,
    DFps,
    FFps,
    Ras,
    RasHybrid,
}

/// Row indices into a point cloud, plus how they were chosen. `replicated`
/// is set only when the source had fewer points than requested.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleIndices {
    pub indices: Vec<usize>,
    pub strategy: Strategy,
    pub replicated: bool,
}

/// `k` draws without replacement when possible, otherwise every index plus
/// uniform-with-replacement padding (flagged).
pub fn sample_random(n_pts: usize, k: usize, rng: &mut RandomState) -> Result<SampleIndices> {
    if k == 0 {
        return Err(Error::InvalidArgument("sample_random: k must be > 0".into()));
    }
    if n_pts == 0 {
        return Err(Error::EmptyInput("sample_random: empty cloud".into()));
    }
    if n_pts >= k {
        let mut pool: Vec<usize> = (0..n_pts).collect();
        for i in 0..k {
            let j = rng.random_range(i..n_pts);
            pool.swap(i, j);
        }
        pool.truncate(k);
        Ok(SampleIndices {
            indices: pool,
            strategy: Strategy::Random,
            replicated: false,
        })
    } else {
        let mut indices: Vec<usize> = (0..n_pts).collect();
        for _ in n_pts..k {
            indices.push(rng.random_range(0..n_pts));
        }
        Ok(SampleIndices {
            indices,
            strategy: Strategy::Random,
            replicated: true,
        })
    }
}

fn fps_greedy(n: usize, k: usize, dist2: impl Fn(usize, usize) -> f64, strategy: Strategy) -> SampleIndices {
    let mut chosen = Vec::with_capacity(k.min(n));
    chosen.push(0);
    let mut min_d2: Vec<f64> = (0..n).map(|i| dist2(0, i)).collect();
    while chosen.len() < k.min(n) {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d2.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        chosen.push(best);
        for i in 0..n {
            let d = dist2(best, i);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }
    let replicated = k > n;
    if replicated {
        // Cycle through the greedy order until k indices exist.
        for i in n..k {
            let idx = chosen[i % n];
            chosen.push(idx);
        }
    }
    SampleIndices {
        indices: chosen,
        strategy,
        replicated,
    }
}

/// Greedy distance-farthest point sampling, seeded at index 0.
pub fn sample_dfps(points: &[[f64; 3]], k: usize) -> Result<SampleIndices> {
    if points.is_empty() {
        return Err(Error::EmptyInput("sample_dfps: empty cloud".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("sample_dfps: k must be > 0".into()));
    }
    let d2 = |a: usize, b: usize| {
        let pa = points[a];
        let pb = points[b];
        let dx = pa[0] - pb[0];
        let dy = pa[1] - pb[1];
        let dz = pa[2] - pb[2];
        dx * dx + dy * dy + dz * dz
    };
    Ok(fps_greedy(points.len(), k, d2, Strategy::DFps))
}

/// The same greedy rule with distances in feature space.
pub fn sample_ffps<T: Real>(features: &[T], cols: usize, k: usize) -> Result<SampleIndices> {
    if cols == 0 || features.is_empty() {
        return Err(Error::EmptyInput("sample_ffps: empty features".into()));
    }
    let n = features.len() / cols;
    if k == 0 {
        return Err(Error::InvalidArgument("sample_ffps: k must be > 0".into()));
    }
    let d2 = |a: usize, b: usize| {
        let ra = &features[a * cols..(a + 1) * cols];
        let rb = &features[b * cols..(b + 1) * cols];
        ra.iter()
            .zip(rb)
            .map(|(&x, &y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum()
    };
    Ok(fps_greedy(n, k, d2, Strategy::FFps))
}

/// Per search row, the distance to its nearest template row in feature
/// space: `V_i = min_j ‖x^s_i − x^t_j‖₂`.
pub fn ras_scores<T: Real>(
    search_feat: &[T],
    template_feat: &[T],
    cols: usize,
) -> Result<Vec<f64>> {
    if cols == 0 {
        return Err(Error::InvalidArgument("ras_scores: zero feature width".into()));
    }
    if template_feat.is_empty() {
        return Err(Error::EmptyInput("ras_scores: empty template".into()));
    }
    if search_feat.len() % cols != 0 || template_feat.len() % cols != 0 {
        return Err(Error::InvalidArgument(
            "ras_scores: feature length not a multiple of width".into(),
        ));
    }
    let ns = search_feat.len() / cols;
    let nt = template_feat.len() / cols;
    let mut scores = Vec::with_capacity(ns);
    for i in 0..ns {
        let s = &search_feat[i * cols..(i + 1) * cols];
        let mut best = f64::INFINITY;
        for j in 0..nt {
            let t = &template_feat[j * cols..(j + 1) * cols];
            let mut d2 = 0.0;
            for c in 0..cols {
                let d = s[c].as_f64() - t[c].as_f64();
                d2 += d * d;
            }
            if d2 < best {
                best = d2;
            }
        }
        scores.push(best.sqrt());
    }
    Ok(scores)
}

/// Indices of the `m` smallest scores, ties to the lowest index.
fn smallest_by_score(scores: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(m);
    order
}

/// Pure relation-aware sampling: the `k` rows nearest to the template in
/// feature space.
pub fn sample_ras<T: Real>(
    search_feat: &[T],
    template_feat: &[T],
    cols: usize,
    k: usize,
) -> Result<SampleIndices> {
    let scores = ras_scores(search_feat, template_feat, cols)?;
    let n = scores.len();
    let mut indices = smallest_by_score(&scores, k.min(n));
    let replicated = k > n;
    for i in n..k {
        let idx = indices[i % n];
        indices.push(idx);
    }
    Ok(SampleIndices {
        indices,
        strategy: Strategy::Ras,
        replicated,
    })
}

/// Half relation-aware, half random: `floor(k/2)` smallest-score rows, the
/// remainder drawn randomly from the complement. No duplicates across the
/// two halves unless the cloud is smaller than `k`.
pub fn sample_ras_hybrid<T: Real>(
    search_feat: &[T],
    template_feat: &[T],
    cols: usize,
    k: usize,
    rng: &mut RandomState,
) -> Result<SampleIndices> {
    if k < 2 {
        return Err(Error::InvalidArgument("sample_ras_hybrid: k must be >= 2".into()));
    }
    let scores = ras_scores(search_feat, template_feat, cols)?;
    let n = scores.len();
    if n == 0 {
        return Err(Error::EmptyInput("sample_ras_hybrid: empty search".into()));
    }
    let m = (k / 2).min(n);
    let mut indices = smallest_by_score(&scores, m);
    let taken: std::collections::HashSet<usize> = indices.iter().copied().collect();
    let complement: Vec<usize> = (0..n).filter(|i| !taken.contains(i)).collect();
    let r = k - m;
    let mut replicated = false;
    if r > 0 {
        if complement.is_empty() {
            // Only possible when k > n: pad over the whole cloud.
            replicated = true;
            for _ in 0..r {
                indices.push(rng.random_range(0..n));
            }
        } else {
            let draw = sample_random(complement.len(), r, rng)?;
            replicated = draw.replicated;
            indices.extend(draw.indices.into_iter().map(|i| complement[i]));
        }
    }
    Ok(SampleIndices {
        indices,
        strategy: Strategy::RasHybrid,
        replicated,
    })
}

/// Result of a fixed-radius neighborhood query: `m × max_neighbors`
/// indices, per-row hit counts, and a flag for centers with no hit at all
/// (padded with the nearest point instead).
#[derive(Debug, Clone)]
pub struct BallQuery {
    pub max_neighbors: usize,
    indices: Vec<usize>,
    pub counts: Vec<usize>,
    pub fallback: Vec<bool>,
}

impl BallQuery {
    pub fn rows(&self) -> usize {
        self.counts.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.max_neighbors..(i + 1) * self.max_neighbors]
    }

    /// Flat row-major index matrix.
    pub fn flat(&self) -> &[usize] {
        &self.indices
    }

    /// Per-center member lists including padding duplicates.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        (0..self.rows()).map(|i| self.row(i).to_vec()).collect()
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Closed-ball neighborhood query. Hits are listed in ascending index
/// order; short rows replicate the first hit; centers with zero hits fall
/// back to the nearest cloud point and are flagged.
pub fn ball_query(
    centers: &[[f64; 3]],
    cloud: &[[f64; 3]],
    radius: f64,
    max_neighbors: usize,
) -> Result<BallQuery> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("ball_query: empty cloud".into()));
    }
    if radius <= 0.0 || max_neighbors == 0 {
        return Err(Error::InvalidArgument(
            "ball_query: radius and max_neighbors must be positive".into(),
        ));
    }
    let r2 = radius * radius;
    let mut indices = Vec::with_capacity(centers.len() * max_neighbors);
    let mut counts = Vec::with_capacity(centers.len());
    let mut fallback = Vec::with_capacity(centers.len());
    for &c in centers {
        let row_start = indices.len();
        let mut count = 0;
        for (i, &p) in cloud.iter().enumerate() {
            if dist2(c, p) <= r2 {
                indices.push(i);
                count += 1;
                if count == max_neighbors {
                    break;
                }
            }
        }
        if count == 0 {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, &p) in cloud.iter().enumerate() {
                let d = dist2(c, p);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            indices.push(best);
            count = 1;
            fallback.push(true);
        } else {
            fallback.push(false);
        }
        let first = indices[row_start];
        for _ in count..max_neighbors {
            indices.push(first);
        }
        counts.push(count);
    }
    Ok(BallQuery {
        max_neighbors,
        indices,
        counts,
        fallback,
    })
}

/// Per-center channel-wise max over grouped neighbor features.
pub fn local_pool<T: Real>(
    centers: &[[f64; 3]],
    cloud: &[[f64; 3]],
    feats: &[T],
    cols: usize,
    radius: f64,
    max_neighbors: usize,
) -> Result<Vec<T>> {
    if feats.len() != cloud.len() * cols {
        return Err(Error::InvalidArgument(format!(
            "local_pool: {} feature values for {} points x {} channels",
            feats.len(),
            cloud.len(),
            cols
        )));
    }
    let query = ball_query(centers, cloud, radius, max_neighbors)?;
    let mut out = vec![T::neg_infinity(); centers.len() * cols];
    for (g, row) in (0..centers.len()).map(|g| (g, query.row(g))) {
        for &i in row {
            for c in 0..cols {
                let v = feats[i * cols + c];
                if v > out[g * cols + c] {
                    out[g * cols + c] = v;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn random_full_draw_is_a_permutation() {
        let mut rng = rng_from_seed(1);
        let s = sample_random(4, 4, &mut rng).unwrap();
        let mut sorted = s.indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert!(!s.replicated);
    }

    #[test]
    fn random_pads_with_replacement_when_short() {
        let mut rng = rng_from_seed(2);
        let s = sample_random(2, 4, &mut rng).unwrap();
        assert_eq!(&s.indices[..2], &[0, 1]);
        assert_eq!(s.indices.len(), 4);
        assert!(s.indices[2..].iter().all(|&i| i < 2));
        assert!(s.replicated);
        assert!(sample_random(0, 3, &mut rng).is_err());
    }

    #[test]
    fn random_is_seed_reproducible() {
        let a = sample_random(100, 10, &mut rng_from_seed(9)).unwrap();
        let b = sample_random(100, 10, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dfps_collinear_tie_breaks_low() {
        let pts: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let s = sample_dfps(&pts, 3).unwrap();
        // 0 first, then 9, then the tie between 4 and 5 resolves to 4.
        assert_eq!(s.indices, vec![0, 9, 4]);
    }

    /// Independent O(n²k) greedy reference.
    fn dfps_reference(points: &[[f64; 3]], k: usize) -> Vec<usize> {
        let n = points.len();
        let mut chosen = vec![0usize];
        while chosen.len() < k.min(n) {
            let mut best = 0;
            let mut best_d = f64::NEG_INFINITY;
            for i in 0..n {
                let d = chosen
                    .iter()
                    .map(|&c| super::dist2(points[i], points[c]))
                    .fold(f64::INFINITY, f64::min);
                if d > best_d {
                    best_d = d;
                    best = i;
                }
            }
            chosen.push(best);
        }
        chosen
    }

    #[test]
    fn dfps_matches_reference_exactly() {
        let mut rng = rng_from_seed(17);
        for _ in 0..20 {
            let n = rng.random_range(2..256);
            let pts: Vec<[f64; 3]> = (0..n)
                .map(|_| {
                    [
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                    ]
                })
                .collect();
            let k = rng.random_range(1..=n);
            let got = sample_dfps(&pts, k).unwrap();
            assert_eq!(got.indices, dfps_reference(&pts, k));
        }
    }

    #[test]
    fn dfps_full_k_emits_greedy_order() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let s = sample_dfps(&pts, 3).unwrap();
        assert_eq!(s.indices, vec![0, 2, 1]);
    }

    #[test]
    fn ffps_reduces_to_dfps_on_coordinates() {
        let mut rng = rng_from_seed(23);
        let pts: Vec<[f64; 3]> = (0..64)
            .map(|_| {
                [
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ]
            })
            .collect();
        let flat: Vec<f64> = pts.iter().flat_map(|p| p.to_vec()).collect();
        let a = sample_dfps(&pts, 16).unwrap();
        let b = sample_ffps(&flat, 3, 16).unwrap();
        assert_eq!(a.indices, b.indices);
    }

    #[test]
    fn ffps_one_hot_picks_distinct_rows() {
        // Four one-hot rows: any three chosen must be distinct.
        let feats = vec![
            1.0f32, 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.,
        ];
        let s = sample_ffps(&feats, 4, 3).unwrap();
        let set: std::collections::HashSet<usize> = s.indices.iter().copied().collect();
        assert_eq!(set.len(), 3);
    }

    #[test]
    fn ras_scores_zero_for_matching_rows() {
        let template = vec![1.0f32, 2.0, 3.0, 4.0]; // 1 row, C=4
        let mut search = template.clone();
        search.extend_from_slice(&[0.0, 0.0, 0.0, 0.0]);
        let v = ras_scores(&search, &template, 4).unwrap();
        assert!(v[0].abs() < 1e-12);
        assert!((v[1] - (1.0f64 + 4.0 + 9.0 + 16.0).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn ras_scores_single_template_is_plain_distance() {
        let template = vec![0.5f64, -0.5];
        let search = vec![1.5f64, -0.5, 0.5, 0.5];
        let v = ras_scores(&search, &template, 2).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!((v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ras_scores_match_brute_force() {
        let mut rng = rng_from_seed(31);
        let search: Vec<f64> = (0..20 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let template: Vec<f64> = (0..7 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = ras_scores(&search, &template, 8).unwrap();
        for i in 0..20 {
            let mut best = f64::INFINITY;
            for j in 0..7 {
                let d2: f64 = (0..8)
                    .map(|c| {
                        let d = search[i * 8 + c] - template[j * 8 + c];
                        d * d
                    })
                    .sum();
                best = best.min(d2.sqrt());
            }
            assert!((v[i] - best).abs() < 1e-6);
        }
        assert!(ras_scores::<f64>(&search, &[], 8).is_err());
    }

    #[test]
    fn ras_hybrid_halves_are_disjoint() {
        let mut rng = rng_from_seed(41);
        let template = vec![0.0f32; 4];
        let search: Vec<f32> = (0..4 * 4).map(|i| i as f32).collect();
        let s = sample_ras_hybrid(&search, &template, 4, 4, &mut rng).unwrap();
        let set: std::collections::HashSet<usize> = s.indices.iter().copied().collect();
        assert_eq!(set.len(), 4);
        assert!(!s.replicated);
    }

    #[test]
    fn ras_hybrid_keeps_zero_distance_rows() {
        let mut rng = rng_from_seed(43);
        let cols = 3;
        let mut search = Vec::new();
        for i in 0..100 {
            search.extend_from_slice(&[i as f32 * 0.1 + 1.0, 0.5, -0.25]);
        }
        // Template equal to the first 5 search rows.
        let template = search[..5 * cols].to_vec();
        let s = sample_ras_hybrid(&search, &template, cols, 10, &mut rng).unwrap();
        for want in 0..5 {
            assert!(
                s.indices[..5].contains(&want),
                "zero-distance row {want} missing from RAS half: {:?}",
                &s.indices[..5]
            );
        }
    }

    #[test]
    fn ras_half_equals_sort_oracle() {
        let mut rng = rng_from_seed(47);
        let cols = 6;
        let search: Vec<f64> = (0..50 * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let template: Vec<f64> = (0..9 * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = 12;
        let s = sample_ras_hybrid(&search, &template, cols, k, &mut rng).unwrap();
        let scores = ras_scores(&search, &template, cols).unwrap();
        let mut order: Vec<usize> = (0..50).collect();
        order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
        assert_eq!(&s.indices[..k / 2], &order[..k / 2]);
    }

    #[test]
    fn ras_monotonicity_in_deterministic_half() {
        let mut rng = rng_from_seed(53);
        let cols = 4;
        let search: Vec<f64> = (0..40 * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let template: Vec<f64> = (0..6 * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scores = ras_scores(&search, &template, cols).unwrap();
        let s = sample_ras_hybrid(&search, &template, cols, 16, &mut rng).unwrap();
        let det: std::collections::HashSet<usize> = s.indices[..8].iter().copied().collect();
        for &j in &det {
            for i in 0..40 {
                if scores[i] < scores[j] {
                    assert!(det.contains(&i), "V[{i}] < V[{j}] but {i} not selected");
                }
            }
        }
    }

    #[test]
    fn ball_query_basics() {
        let cloud = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.05, 0.0, 0.0],
            [5.0, 5.0, 5.0],
        ];
        // Center coincident with a cloud point: that index first.
        let q = ball_query(&[[0.0, 0.0, 0.0]], &cloud, 0.1, 3).unwrap();
        assert_eq!(q.row(0)[0], 0);
        assert_eq!(q.counts[0], 2);
        assert_eq!(q.row(0), &[0, 2, 0]); // short row pads with first hit

        // Radius covering everything lists indices in ascending order.
        let q = ball_query(&[[0.0, 0.0, 0.0]], &cloud, 100.0, 8).unwrap();
        assert_eq!(&q.row(0)[..4], &[0, 1, 2, 3]);

        // Isolated center falls back to the nearest point, flagged.
        let q = ball_query(&[[50.0, 0.0, 0.0]], &cloud, 0.5, 2).unwrap();
        assert!(q.fallback[0]);
        assert_eq!(q.row(0), &[3, 3]);

        assert!(ball_query(&[[0.0; 3]], &[], 1.0, 1).is_err());
    }

    #[test]
    fn ball_query_matches_brute_force() {
        let mut rng = rng_from_seed(61);
        for _ in 0..30 {
            let n = rng.random_range(5..80);
            let cloud: Vec<[f64; 3]> = (0..n)
                .map(|_| {
                    [
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    ]
                })
                .collect();
            let centers: Vec<[f64; 3]> = (0..6)
                .map(|_| {
                    [
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    ]
                })
                .collect();
            let radius = rng.random_range(0.3..1.5);
            let kmax = rng.random_range(1..8);
            let q = ball_query(&centers, &cloud, radius, kmax).unwrap();
            for (ci, &c) in centers.iter().enumerate() {
                let brute: Vec<usize> = (0..n)
                    .filter(|&i| super::dist2(c, cloud[i]) <= radius * radius)
                    .take(kmax)
                    .collect();
                if brute.is_empty() {
                    assert!(q.fallback[ci]);
                } else {
                    assert_eq!(&q.row(ci)[..brute.len()], &brute[..]);
                    assert_eq!(q.counts[ci], brute.len());
                }
            }
        }
    }

    #[test]
    fn ball_query_invariant_to_cloud_permutation() {
        let mut rng = rng_from_seed(67);
        let cloud: Vec<[f64; 3]> = (0..40)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let mut permuted = cloud.clone();
        permuted.reverse();
        let centers = [[0.1, 0.2, 0.0], [-0.4, 0.0, 0.3]];
        let qa = ball_query(&centers, &cloud, 0.8, 64).unwrap();
        let qb = ball_query(&centers, &permuted, 0.8, 64).unwrap();
        for ci in 0..centers.len() {
            let to_set = |q: &BallQuery, cl: &[[f64; 3]]| {
                let mut v: Vec<[i64; 3]> = q.row(ci)[..q.counts[ci]]
                    .iter()
                    .map(|&i| {
                        let p = cl[i];
                        [
                            (p[0] * 1e9) as i64,
                            (p[1] * 1e9) as i64,
                            (p[2] * 1e9) as i64,
                        ]
                    })
                    .collect();
                v.sort_unstable();
                v
            };
            assert_eq!(to_set(&qa, &cloud), to_set(&qb, &permuted));
        }
    }

    #[test]
    fn local_pool_cases() {
        let cloud = vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let feats = vec![1.0f32, -1.0, 5.0, 3.0];
        // Single neighbor: that row verbatim.
        let out = local_pool(&[[2.0, 0.0, 0.0]], &cloud, &feats, 2, 0.5, 4).unwrap();
        assert_eq!(out, vec![5.0, 3.0]);
        // Everything in range: channel max.
        let out = local_pool(&[[1.0, 0.0, 0.0]], &cloud, &feats, 2, 10.0, 4).unwrap();
        assert_eq!(out, vec![5.0, 3.0]);
        // Constant features propagate unchanged.
        let feats = vec![0.7f32; 4];
        let out = local_pool(&[[0.0; 3], [2.0, 0.0, 0.0]], &cloud, &feats, 2, 10.0, 4).unwrap();
        assert_eq!(out, vec![0.7; 4]);
    }

    #[test]
    fn local_pool_matches_group_then_max() {
        let mut rng = rng_from_seed(71);
        let n = 50;
        let cloud: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let cols = 5;
        let feats: Vec<f64> = (0..n * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let centers: Vec<[f64; 3]> = cloud[..8].to_vec();
        let radius = 0.7;
        let kmax = 16;
        let got = local_pool(&centers, &cloud, &feats, cols, radius, kmax).unwrap();
        let q = ball_query(&centers, &cloud, radius, kmax).unwrap();
        for (g, _) in centers.iter().enumerate() {
            for c in 0..cols {
                let want = q.row(g)[..q.counts[g]]
                    .iter()
                    .map(|&i| feats[i * cols + c])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(got[g * cols + c], want);
            }
        }
    }

    #[test]
    fn dfps_coverage_beats_random() {
        // The greedy set's max-min distance dominates any random set's.
        let mut rng = rng_from_seed(73);
        let n = 120;
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                ]
            })
            .collect();
        let k = 12;
        let min_pair = |idx: &[usize]| {
            let mut best = f64::INFINITY;
            for (a, &i) in idx.iter().enumerate() {
                for &j in &idx[a + 1..] {
                    best = best.min(super::dist2(pts[i], pts[j]));
                }
            }
            best
        };
        let fps_score = min_pair(&sample_dfps(&pts, k).unwrap().indices);
        for _ in 0..100 {
            let rnd = sample_random(n, k, &mut rng).unwrap();
            assert!(fps_score >= min_pair(&rnd.indices));
        }
    }

    #[test]
    fn ras_hybrid_recall_beats_random_statistically() {
        // Template features equal to a subset of search features: the
        // hybrid keeps those rows far more often than plain random draws.
        // One-sided sign test over 200 seeded trials at p < 0.01.
        let cols = 4;
        let n = 80;
        let n_fg = 10;
        let k = 20;
        let mut wins = 0u32;
        let mut losses = 0u32;
        for trial in 0..200u64 {
            let mut rng = rng_from_seed(1000 + trial);
            let mut search = Vec::with_capacity(n * cols);
            for i in 0..n {
                let base = if i < n_fg { 0.0 } else { 3.0 };
                for _ in 0..cols {
                    search.push(base + rng.random_range(-0.5..0.5));
                }
            }
            let template = search[..n_fg * cols].to_vec();
            let recall = |idx: &[usize]| idx.iter().filter(|&&i| i < n_fg).count();
            let h = sample_ras_hybrid(&search, &template, cols, k, &mut rng).unwrap();
            let r = sample_random(n, k, &mut rng).unwrap();
            match recall(&h.indices).cmp(&recall(&r.indices)) {
                std::cmp::Ordering::Greater => wins += 1,
                std::cmp::Ordering::Less => losses += 1,
                std::cmp::Ordering::Equal => {}
            }
        }
        // Binomial tail P(X >= wins | p=0.5, n=wins+losses) must be < 0.01.
        let trials = wins + losses;
        let p = sign_test_tail(wins, trials);
        assert!(
            p < 0.01,
            "hybrid recall not better: {wins} wins / {losses} losses, p = {p:.4}"
        );
    }

    /// One-sided sign test tail probability P(X >= wins) under fair coin.
    fn sign_test_tail(wins: u32, trials: u32) -> f64 {
        let mut log_c = 0.0f64; // log C(n, 0)
        let mut tail = 0.0f64;
        let n = trials as f64;
        let ln2 = std::f64::consts::LN_2;
        for k in 0..=trials {
            if k >= wins {
                tail += (log_c - n * ln2).exp();
            }
            log_c += ((n - k as f64) / (k as f64 + 1.0)).ln();
        }
        tail.min(1.0)
    }
}
