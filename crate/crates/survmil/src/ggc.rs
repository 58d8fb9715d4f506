//! Graph-guided clustering.
//!
//! Selected patches get a composite similarity (cosine over features plus an
//! exponential kernel over pairwise distances), a symmetrized k-NN graph, one
//! pass of neighbor smoothing, and a capacity-constrained K-means that yields
//! groups of a fixed size (the last group takes the remainder). Clustering is
//! a forward-only decision; gradients do not flow through it.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

const NORM_FLOOR: f64 = 1e-12;
const SIGMA_EPS: f64 = 1e-8;
const MAX_KMEANS_ITERS: usize = 100;

/// Dense symmetric m-by-m similarity with the weights that built it.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub values: Vec<f64>,
    pub m: usize,
    pub omega_morph: f64,
    pub omega_spatial: f64,
    pub sigma_d: f64,
}

impl SimilarityMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }
}

/// Symmetrized neighbor lists: i in N(j) implies j in N(i).
#[derive(Debug, Clone)]
pub struct KnnGraph {
    pub neighbors: Vec<Vec<usize>>,
    pub k: usize,
}

/// Group label per patch; every group has `group_size` members except
/// possibly the last.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub groups: usize,
    pub group_size: usize,
}

impl ClusterAssignment {
    /// Member indices per group, ascending within each group.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.groups];
        for (i, &g) in self.labels.iter().enumerate() {
            out[g].push(i);
        }
        out
    }
}

/// Cosine similarity between feature rows; norms floored so zero rows
/// degrade to zero similarity instead of failing.
pub fn cosine_similarity(features: &[f64], m: usize, d: usize) -> Vec<f64> {
    debug_assert_eq!(features.len(), m * d);
    let norms: Vec<f64> = (0..m)
        .map(|i| {
            features[i * d..(i + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(NORM_FLOOR)
        })
        .collect();
    let mut s = vec![0.0; m * m];
    for i in 0..m {
        s[i * m + i] = 1.0;
        for j in i + 1..m {
            let dot: f64 = features[i * d..(i + 1) * d]
                .iter()
                .zip(&features[j * d..(j + 1) * d])
                .map(|(&a, &b)| a * b)
                .sum();
            let v = dot / (norms[i] * norms[j]);
            s[i * m + j] = v;
            s[j * m + i] = v;
        }
    }
    s
}

/// Exponential kernel exp(-D_ij / sigma_D) over pairwise Euclidean
/// distances; sigma_D is the population std of the full m^2 distance matrix
/// (zero diagonal included) plus a small epsilon. Returns (matrix, sigma_d).
pub fn spatial_similarity(coords: &[f64], m: usize) -> (Vec<f64>, f64) {
    debug_assert_eq!(coords.len(), m * 2);
    let mut dist = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let dx = coords[i * 2] - coords[j * 2];
            let dy = coords[i * 2 + 1] - coords[j * 2 + 1];
            let v = (dx * dx + dy * dy).sqrt();
            dist[i * m + j] = v;
            dist[j * m + i] = v;
        }
    }
    let n = (m * m) as f64;
    let mean = dist.iter().sum::<f64>() / n;
    let var = dist.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sigma = var.sqrt() + SIGMA_EPS;
    let s = dist.iter().map(|&v| (-v / sigma).exp()).collect();
    (s, sigma)
}

/// Weighted sum of the two similarity components.
pub fn composite_similarity(
    s_morph: &[f64],
    s_spatial: &[f64],
    m: usize,
    omega_morph: f64,
    omega_spatial: f64,
    sigma_d: f64,
) -> Result<SimilarityMatrix> {
    if omega_morph < 0.0 || omega_spatial < 0.0 || omega_morph + omega_spatial <= 0.0 {
        return Err(Error::Contract(format!(
            "similarity weights must be nonnegative with a positive sum, got ({omega_morph}, {omega_spatial})"
        )));
    }
    debug_assert_eq!(s_morph.len(), m * m);
    debug_assert_eq!(s_spatial.len(), m * m);
    let values = s_morph
        .iter()
        .zip(s_spatial)
        .map(|(&a, &b)| omega_morph * a + omega_spatial * b)
        .collect();
    Ok(SimilarityMatrix {
        values,
        m,
        omega_morph,
        omega_spatial,
        sigma_d,
    })
}

/// Per node, keeps the k most similar other nodes (ties toward the lower
/// index), then symmetrizes by union.
pub fn build_knn_graph(s: &SimilarityMatrix, k: usize) -> Result<KnnGraph> {
    let m = s.m;
    if k >= m {
        return Err(Error::Contract(format!(
            "knn k={k} must be smaller than node count m={m}"
        )));
    }
    let mut neighbors: Vec<Vec<usize>> = Vec::with_capacity(m);
    for i in 0..m {
        let mut order: Vec<usize> = (0..m).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            s.at(i, b)
                .partial_cmp(&s.at(i, a))
                .expect("finite similarity")
                .then(a.cmp(&b))
        });
        neighbors.push(order[..k].to_vec());
    }
    // union symmetrization
    let chosen = neighbors.clone();
    for (i, outs) in chosen.iter().enumerate() {
        for &j in outs {
            if !neighbors[j].contains(&i) {
                neighbors[j].push(i);
            }
        }
    }
    for list in neighbors.iter_mut() {
        list.sort_unstable();
    }
    Ok(KnnGraph { neighbors, k })
}

/// One smoothing pass: each row becomes the mean of itself and its
/// neighbors' rows.
pub fn graph_smooth(features: &[f64], m: usize, d: usize, graph: &KnnGraph) -> Vec<f64> {
    debug_assert_eq!(graph.neighbors.len(), m);
    let mut out = vec![0.0; m * d];
    for i in 0..m {
        let row = &mut out[i * d..(i + 1) * d];
        row.copy_from_slice(&features[i * d..(i + 1) * d]);
        for &j in &graph.neighbors[i] {
            for (o, &v) in row.iter_mut().zip(&features[j * d..(j + 1) * d]) {
                *o += v;
            }
        }
        let inv = 1.0 / (graph.neighbors[i].len() + 1) as f64;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// K-means++ seeding: first centroid uniform, the rest D^2-weighted.
fn kmeans_pp_init<R: Rng>(x: &[f64], m: usize, d: usize, g: usize, rng: &mut R) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(g * d);
    let first = rng.gen_range(0..m);
    centroids.extend_from_slice(&x[first * d..(first + 1) * d]);
    let mut best = vec![f64::INFINITY; m];
    for _ in 1..g {
        for i in 0..m {
            let c = centroids.len() / d - 1;
            let dist = sq_dist(&x[i * d..(i + 1) * d], &centroids[c * d..(c + 1) * d]);
            if dist < best[i] {
                best[i] = dist;
            }
        }
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = m - 1;
            for (i, &w) in best.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..m)
        };
        centroids.extend_from_slice(&x[pick * d..(pick + 1) * d]);
    }
    centroids
}

/// Capacity-constrained K-means. G = ceil(m / group_size) clusters; clusters
/// 0..G-1 hold exactly `group_size` points and the last takes the remainder.
/// Assignment is greedy in ascending point-to-centroid distance, so the size
/// law holds at every iteration; runs until labels stabilize or the
/// iteration cap, deterministic under `seed`.
pub fn balanced_kmeans(
    x: &[f64],
    m: usize,
    d: usize,
    group_size: usize,
    seed: u64,
) -> Result<ClusterAssignment> {
    if m == 0 || d == 0 {
        return Err(Error::Contract("balanced_kmeans needs m >= 1, d >= 1".into()));
    }
    if group_size == 0 {
        return Err(Error::Contract("group_size must be >= 1".into()));
    }
    debug_assert_eq!(x.len(), m * d);
    let g = m.div_ceil(group_size);
    let mut capacity = vec![group_size; g];
    let rem = m % group_size;
    if rem != 0 {
        capacity[g - 1] = rem;
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(x, m, d, g, &mut rng);
    let mut labels = vec![usize::MAX; m];

    for _ in 0..MAX_KMEANS_ITERS {
        // all (distance, point, cluster) pairs in ascending distance order;
        // ties resolved by point then cluster index for determinism
        let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(m * g);
        for i in 0..m {
            for c in 0..g {
                pairs.push((
                    sq_dist(&x[i * d..(i + 1) * d], &centroids[c * d..(c + 1) * d]),
                    i,
                    c,
                ));
            }
        }
        pairs.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .expect("finite distance")
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut new_labels = vec![usize::MAX; m];
        let mut remaining = capacity.clone();
        let mut unassigned = m;
        for &(_, i, c) in &pairs {
            if unassigned == 0 {
                break;
            }
            if new_labels[i] == usize::MAX && remaining[c] > 0 {
                new_labels[i] = c;
                remaining[c] -= 1;
                unassigned -= 1;
            }
        }
        debug_assert_eq!(unassigned, 0, "capacities cover all points");

        // centroid update
        let mut sums = vec![0.0; g * d];
        let mut counts = vec![0usize; g];
        for i in 0..m {
            let c = new_labels[i];
            counts[c] += 1;
            for j in 0..d {
                sums[c * d + j] += x[i * d + j];
            }
        }
        for c in 0..g {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }

        if new_labels == labels {
            break;
        }
        labels = new_labels;
    }

    Ok(ClusterAssignment {
        labels,
        groups: g,
        group_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_diagonal_orthogonal_and_scale() {
        let feats = vec![
            1.0, 0.0, 0.0, //
            0.0, 2.0, 0.0, //
            3.0, 0.0, 0.0, //
        ];
        let s = cosine_similarity(&feats, 3, 3);
        assert!((s[0] - 1.0).abs() < 1e-15);
        assert!((s[4] - 1.0).abs() < 1e-15);
        assert!(s[1].abs() < 1e-15); // orthogonal
        assert!((s[2] - 1.0).abs() < 1e-15); // 3x scaling
    }

    #[test]
    fn cosine_survives_zero_rows() {
        let feats = vec![0.0, 0.0, 1.0, 1.0];
        let s = cosine_similarity(&feats, 2, 2);
        assert!(s.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn spatial_two_point_hand_value() {
        // two points at distance u: entries {0,u,u,0}, mean u/2, std u/2,
        // so S(0,1) = exp(-u / (u/2)) = exp(-2)
        let coords = vec![0.0, 0.0, 3.0, 4.0];
        let (s, sigma) = spatial_similarity(&coords, 2);
        assert!((sigma - 2.5).abs() < 1e-6);
        assert!((s[1] - (-2.0f64).exp()).abs() < 1e-7);
        assert_eq!(s[0], 1.0);
    }

    #[test]
    fn spatial_translation_invariant() {
        let coords = vec![1.0, 2.0, 5.0, 7.0, -3.0, 0.5];
        let shifted: Vec<f64> = coords
            .iter()
            .enumerate()
            .map(|(i, v)| v + if i % 2 == 0 { 11.0 } else { -4.0 })
            .collect();
        let (a, _) = spatial_similarity(&coords, 3);
        let (b, _) = spatial_similarity(&shifted, 3);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_weights_behave_linearly() {
        let sm = vec![1.0, 0.2, 0.2, 1.0];
        let sp = vec![1.0, 0.8, 0.8, 1.0];
        let only_m = composite_similarity(&sm, &sp, 2, 1.0, 0.0, 1.0).unwrap();
        assert_eq!(only_m.values, sm);
        let only_s = composite_similarity(&sm, &sp, 2, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(only_s.values, sp);
        let half = composite_similarity(&sm, &sp, 2, 0.5, 0.5, 1.0).unwrap();
        assert!((half.at(0, 1) - 0.5).abs() < 1e-15);
        assert!(composite_similarity(&sm, &sp, 2, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn similarity_matrix_is_symmetric_with_bounded_entries() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let m = 17;
        let feats: Vec<f64> = (0..m * 5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let coords: Vec<f64> = (0..m * 2).map(|_| rng.gen_range(0.0..100.0)).collect();
        let sm = cosine_similarity(&feats, m, 5);
        let (sp, sigma) = spatial_similarity(&coords, m);
        assert!(sm.iter().all(|&v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(&v)));
        assert!(sp.iter().all(|&v| v > 0.0 && v <= 1.0));
        let s = composite_similarity(&sm, &sp, m, 0.5, 0.5, sigma).unwrap();
        for i in 0..m {
            assert!((s.at(i, i) - 1.0).abs() <= 1e-12); // 0.5*1 + 0.5*1
            for j in 0..m {
                assert!((s.at(i, j) - s.at(j, i)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn knn_links_argmax_and_symmetrizes() {
        let s = SimilarityMatrix {
            values: vec![
                1.0, 0.9, 0.1, //
                0.9, 1.0, 0.5, //
                0.1, 0.5, 1.0, //
            ],
            m: 3,
            omega_morph: 1.0,
            omega_spatial: 0.0,
            sigma_d: 1.0,
        };
        let g = build_knn_graph(&s, 1).unwrap();
        // node 2 chose node 1; union symmetrization adds 2 to node 1's list
        assert_eq!(g.neighbors[0], vec![1]);
        assert_eq!(g.neighbors[1], vec![0, 2]);
        assert_eq!(g.neighbors[2], vec![1]);
        assert!(build_knn_graph(&s, 3).is_err());
    }

    #[test]
    fn knn_uniform_similarity_ties_break_by_index() {
        let s = SimilarityMatrix {
            values: vec![1.0; 16],
            m: 4,
            omega_morph: 1.0,
            omega_spatial: 0.0,
            sigma_d: 1.0,
        };
        let g = build_knn_graph(&s, 2).unwrap();
        // node 3 picks the two lowest indices {0, 1}; symmetrization pulls 3
        // back into their lists
        assert_eq!(g.neighbors[3], vec![0, 1]);
        assert!(g.neighbors[0].contains(&3));
        for (i, list) in g.neighbors.iter().enumerate() {
            assert!(!list.contains(&i), "self loop at {i}");
        }
    }

    #[test]
    fn smoothing_fixed_point_and_pair_mean() {
        let feats = vec![2.0, 2.0, 2.0, 2.0]; // identical rows
        let g = KnnGraph {
            neighbors: vec![vec![1], vec![0]],
            k: 1,
        };
        assert_eq!(graph_smooth(&feats, 2, 2, &g), feats);

        let feats = vec![0.0, 0.0, 4.0, 2.0];
        let sm = graph_smooth(&feats, 2, 2, &g);
        assert_eq!(sm, vec![2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn smoothing_reduces_within_blob_variance() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let m = 40;
        let d = 6;
        let mut feats = vec![0.0; m * d];
        for i in 0..m {
            let center = if i < 20 { 2.0 } else { -2.0 };
            for j in 0..d {
                feats[i * d + j] = center + rng.gen_range(-0.5..0.5);
            }
        }
        let coords: Vec<f64> = (0..m)
            .flat_map(|i| {
                let c = if i < 20 { 20.0 } else { 80.0 };
                vec![c + rng.gen_range(-5.0..5.0), c + rng.gen_range(-5.0..5.0)]
            })
            .collect();
        let sm = cosine_similarity(&feats, m, d);
        let (sp, sigma) = spatial_similarity(&coords, m);
        let s = composite_similarity(&sm, &sp, m, 0.5, 0.5, sigma).unwrap();
        let graph = build_knn_graph(&s, 5).unwrap();
        let smoothed = graph_smooth(&feats, m, d, &graph);

        let var_of = |x: &[f64], rows: std::ops::Range<usize>| {
            let k = rows.len() as f64;
            (0..d)
                .map(|j| {
                    let mean: f64 = rows.clone().map(|i| x[i * d + j]).sum::<f64>() / k;
                    rows.clone().map(|i| (x[i * d + j] - mean).powi(2)).sum::<f64>() / k
                })
                .sum::<f64>()
        };
        assert!(var_of(&smoothed, 0..20) < var_of(&feats, 0..20));
        assert!(var_of(&smoothed, 20..40) < var_of(&feats, 20..40));
    }

    #[test]
    fn kmeans_single_group_when_m_fits() {
        let x: Vec<f64> = (0..64 * 2).map(|i| i as f64).collect();
        let a = balanced_kmeans(&x, 64, 2, 64, 0).unwrap();
        assert_eq!(a.groups, 1);
        assert!(a.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn kmeans_capacity_arithmetic() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..130 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = balanced_kmeans(&x, 130, 3, 64, 1).unwrap();
        assert_eq!(a.groups, 3);
        let members = a.members();
        assert_eq!(members[0].len(), 64);
        assert_eq!(members[1].len(), 64);
        assert_eq!(members[2].len(), 2);
    }

    #[test]
    fn kmeans_size_law_across_m() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for m in 1..=120 {
            let x: Vec<f64> = (0..m * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = balanced_kmeans(&x, m, 2, 16, 5).unwrap();
            let members = a.members();
            assert_eq!(members.len(), m.div_ceil(16));
            for (gi, members) in members.iter().enumerate() {
                if gi + 1 < a.groups {
                    assert_eq!(members.len(), 16, "m={m} group {gi}");
                } else {
                    let rem = if m % 16 == 0 { 16 } else { m % 16 };
                    assert_eq!(members.len(), rem, "m={m} last group");
                }
            }
        }
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let mut x = Vec::with_capacity(128 * 4);
        for i in 0..128 {
            let center = if i < 64 { 10.0 } else { -10.0 };
            for _ in 0..4 {
                x.push(center + rng.gen_range(-0.5..0.5));
            }
        }
        let a = balanced_kmeans(&x, 128, 4, 64, 9).unwrap();
        let first = a.labels[0];
        assert!(a.labels[..64].iter().all(|&l| l == first));
        let second = a.labels[64];
        assert_ne!(first, second);
        assert!(a.labels[64..].iter().all(|&l| l == second));
    }

    #[test]
    fn kmeans_deterministic_under_seed() {
        let mut rng = ChaCha12Rng::seed_from_u64(30);
        let x: Vec<f64> = (0..77 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = balanced_kmeans(&x, 77, 3, 16, 42).unwrap();
        let b = balanced_kmeans(&x, 77, 3, 16, 42).unwrap();
        assert_eq!(a, b);
    }
}
