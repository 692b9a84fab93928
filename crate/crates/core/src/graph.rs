//! Dynamic k-NN graphs over node feature rows.
//!
//! Graphs are directed: node `i` lists the nodes it aggregates from. Ranking
//! uses squared Euclidean distance, optionally plus an additive `[N × N]`
//! bias, with ties broken by lower node index. Construction reads values only
//! and is invisible to differentiation.

use std::cmp::Ordering;
use std::fmt;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureGraph {
    adjacency: Vec<Vec<usize>>,
    k: usize,
    dilation: usize,
}

impl FeatureGraph {
    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    /// Neighbors per node after clamping to `N − 1`.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Stride actually used after clamping the candidate pool.
    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn into_adjacency(self) -> Vec<Vec<usize>> {
        self.adjacency
    }
}

/// One line per node: `i: j1 j2 … jk`.
impl fmt::Display for FeatureGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, nbrs) in self.adjacency.iter().enumerate() {
            write!(f, "{i}:")?;
            for j in nbrs {
                write!(f, " {j}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub fn pairwise_sq_dist<T: Scalar>(nodes: &Tensor<T>) -> Tensor<T> {
    let n = nodes.rows();
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d: T = nodes
                .row(i)
                .iter()
                .zip(nodes.row(j))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    out
}

/// Squared distances from every query row to every key row, `[Q × K]`.
pub fn cross_sq_dist<T: Scalar>(queries: &Tensor<T>, keys: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(queries.rows(), keys.rows());
    for i in 0..queries.rows() {
        for j in 0..keys.rows() {
            let d = queries
                .row(i)
                .iter()
                .zip(keys.row(j))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            out.set(i, j, d);
        }
    }
    out
}

/// `bias[i][j] = e_iᵀ e_j`
pub fn relative_bias<T: Scalar>(rel: &Tensor<T>) -> Tensor<T> {
    let n = rel.rows();
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let d = rel.row(i).iter().zip(rel.row(j)).map(|(&a, &b)| a * b).sum();
            out.set(i, j, d);
        }
    }
    out
}

/// Fixed 2-D sine-cosine encoding of a row-major `height × width` grid, one
/// unit-norm row per cell. Half of `dim` encodes the row coordinate and half
/// the column coordinate.
pub fn grid_sincos<T: Scalar>(height: usize, width: usize, dim: usize) -> Tensor<T> {
    let quarter = (dim / 4).max(1);
    let mut out = Tensor::zeros(height * width, dim);
    for y in 0..height {
        for x in 0..width {
            let row = out.row_mut(y * width + x);
            for q in 0..quarter {
                let omega = 1.0 / 10000f64.powf(q as f64 / quarter as f64);
                let vals = [
                    (y as f64 * omega).sin(),
                    (y as f64 * omega).cos(),
                    (x as f64 * omega).sin(),
                    (x as f64 * omega).cos(),
                ];
                for (s, v) in vals.into_iter().enumerate() {
                    let c = s * quarter + q;
                    if c < dim {
                        row[c] = T::of(v);
                    }
                }
            }
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm > T::zero() {
                for v in row.iter_mut() {
                    *v = *v / norm;
                }
            }
        }
    }
    out
}

/// Candidate ordering of all other nodes for row `i` of `scores`.
fn ranked_candidates<T: Scalar>(scores: &Tensor<T>, i: usize) -> Vec<usize> {
    let row = scores.row(i);
    let mut cand: Vec<usize> = (0..scores.cols()).filter(|&j| j != i).collect();
    cand.sort_by(|&a, &b| {
        row[a]
            .partial_cmp(&row[b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    cand
}

/// Clamped `(k, d)`: at most `N − 1` neighbors, and a stride small enough that
/// `k·d` candidates exist.
pub fn effective_k_dilation(n: usize, k: usize, d: usize) -> (usize, usize) {
    let avail = n.saturating_sub(1);
    let k_eff = k.min(avail);
    if k_eff == 0 {
        return (0, 1);
    }
    let d_eff = d.max(1).min((avail / k_eff).max(1));
    (k_eff, d_eff)
}

fn combined_scores<T: Scalar>(nodes: &Tensor<T>, bias: Option<&Tensor<T>>) -> Tensor<T> {
    let mut scores = pairwise_sq_dist(nodes);
    if let Some(b) = bias {
        assert_eq!(b.shape(), scores.shape(), "bias must be N×N");
        scores.add_assign(b);
    }
    scores
}

/// Dilated k-NN: from the `k·d` nearest candidates of each node, sorted by
/// ascending score, keep positions `0, d, 2d, …, (k−1)·d`.
pub fn dilated_knn_graph<T: Scalar>(
    nodes: &Tensor<T>,
    k: usize,
    d: usize,
    bias: Option<&Tensor<T>>,
) -> FeatureGraph {
    assert!(k >= 1 && d >= 1, "k and dilation must be positive");
    let n = nodes.rows();
    let (k_eff, d_eff) = effective_k_dilation(n, k, d);
    let scores = combined_scores(nodes, bias);
    let adjacency = (0..n)
        .map(|i| {
            let cand = ranked_candidates(&scores, i);
            (0..k_eff).map(|s| cand[s * d_eff]).collect()
        })
        .collect();
    FeatureGraph {
        adjacency,
        k: k_eff,
        dilation: d_eff,
    }
}

pub fn knn_graph<T: Scalar>(nodes: &Tensor<T>, k: usize, bias: Option<&Tensor<T>>) -> FeatureGraph {
    dilated_knn_graph(nodes, k, 1, bias)
}

/// For each query row, the `k` nearest key rows (clamped to the key count).
pub fn cross_knn<T: Scalar>(queries: &Tensor<T>, keys: &Tensor<T>, k: usize) -> Vec<Vec<usize>> {
    let scores = cross_sq_dist(queries, keys);
    let k = k.min(keys.rows());
    (0..queries.rows())
        .map(|i| {
            let row = scores.row(i);
            let mut cand: Vec<usize> = (0..keys.rows()).collect();
            cand.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
            cand.truncate(k);
            cand
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn points(vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vals.len(), 1, vals.to_vec()).unwrap()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
        Tensor::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Independent oracle: full sort of (distance, index) pairs, then stride.
    fn naive_dilated(nodes: &Tensor<f64>, k: usize, d: usize) -> Vec<Vec<usize>> {
        let n = nodes.rows();
        let k_eff = k.min(n - 1);
        let d_eff = if k_eff == 0 { 1 } else { d.min((n - 1) / k_eff).max(1) };
        (0..n)
            .map(|i| {
                let mut all: Vec<(f64, usize)> = Vec::new();
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let mut s = 0.0;
                    for c in 0..nodes.cols() {
                        let diff = nodes.get(i, c) - nodes.get(j, c);
                        s += diff * diff;
                    }
                    all.push((s, j));
                }
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                all.iter().step_by(d_eff).take(k_eff).map(|p| p.1).collect()
            })
            .collect()
    }

    #[test]
    fn pairwise_examples() {
        let d = pairwise_sq_dist(&points(&[0.0, 3.0]));
        assert_eq!(d, Tensor::from_rows(&[[0.0, 9.0], [9.0, 0.0]]).unwrap());
        let same = Tensor::<f64>::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        assert!(pairwise_sq_dist(&same).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pairwise_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_points(&mut rng, 10, 4);
        let d = pairwise_sq_dist(&x);
        for i in 0..10 {
            for j in 0..10 {
                let mut s = 0.0;
                for c in 0..4 {
                    let diff = x.get(i, c) - x.get(j, c);
                    s += diff * diff;
                }
                assert_eq!(d.get(i, j), s);
            }
        }
    }

    #[test]
    fn collinear_knn() {
        let g = knn_graph(&points(&[0.0, 1.0, 3.0]), 1, None);
        assert_eq!(g.adjacency(), &[vec![1], vec![0], vec![1]]);
    }

    #[test]
    fn k_is_clamped() {
        let g = knn_graph(&points(&[0.0, 1.0, 3.0, 7.0]), 10, None);
        assert_eq!(g.k(), 3);
        for i in 0..4 {
            let mut nb = g.neighbors(i).to_vec();
            nb.sort();
            let expect: Vec<usize> = (0..4).filter(|&j| j != i).collect();
            assert_eq!(nb, expect);
        }
    }

    #[test]
    fn infinite_bias_forces_pair() {
        let x = points(&[0.0, 1.0, 2.0, 10.0]);
        let mut bias = Tensor::full(4, 4, f64::INFINITY);
        bias.set(0, 3, 0.0);
        bias.set(3, 0, 0.0);
        let g = knn_graph(&x, 1, Some(&bias));
        assert_eq!(g.neighbors(0), &[3]);
        assert_eq!(g.neighbors(3), &[0]);
    }

    #[test]
    fn dilated_enumerated_case() {
        let g = dilated_knn_graph(&points(&[0.0, 1.0, 2.0, 4.0, 8.0]), 2, 2, None);
        assert_eq!(g.neighbors(0), &[1, 3]);
        assert_eq!(g.dilation(), 2);
    }

    #[test]
    fn dilation_one_is_plain_knn() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = random_points(&mut rng, 15, 3);
            assert_eq!(dilated_knn_graph(&x, 4, 1, None), knn_graph(&x, 4, None));
        }
    }

    #[test]
    fn dilated_random_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = random_points(&mut rng, 20, 5);
        let g = dilated_knn_graph(&x, 3, 3, None);
        assert_eq!(g.adjacency(), naive_dilated(&x, 3, 3).as_slice());
    }

    #[test]
    fn clamped_pool_keeps_exactly_k() {
        let x = points(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let g = dilated_knn_graph(&x, 3, 4, None);
        assert_eq!((g.k(), g.dilation()), (3, 1));
        let g = dilated_knn_graph(&x, 2, 4, None);
        assert_eq!((g.k(), g.dilation()), (2, 2));
        assert!(g.adjacency().iter().all(|l| l.len() == 2));
    }

    #[test]
    fn relative_bias_cases() {
        let zero = Tensor::<f64>::zeros(5, 3);
        assert!(relative_bias(&zero).data().iter().all(|&v| v == 0.0));
        let onehot = Tensor::<f64>::identity(4);
        assert_eq!(relative_bias(&onehot), Tensor::identity(4));

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let e = random_points(&mut rng, 6, 4);
        let b = relative_bias(&e);
        for i in 0..6 {
            for j in 0..6 {
                let mut s = 0.0;
                for c in 0..4 {
                    s += e.get(i, c) * e.get(j, c);
                }
                assert_eq!(b.get(i, j), s);
            }
        }
        let x = random_points(&mut rng, 6, 2);
        assert_eq!(knn_graph(&x, 2, Some(&relative_bias(&Tensor::zeros(6, 2)))), knn_graph(&x, 2, None));
    }

    #[test]
    fn sincos_rows_are_unit_norm() {
        let e = grid_sincos::<f64>(3, 4, 8);
        for r in 0..12 {
            let n: f64 = e.row(r).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn display_format() {
        let g = knn_graph(&points(&[0.0, 1.0, 3.0]), 1, None);
        assert_eq!(g.to_string(), "0: 1\n1: 0\n2: 1\n");
    }

    #[test]
    fn cross_knn_picks_nearest_keys() {
        let q = points(&[0.0, 10.0]);
        let k = points(&[9.0, 1.0, -0.5, 12.0]);
        assert_eq!(cross_knn(&q, &k, 2), vec![vec![2, 1], vec![0, 3]]);
    }

    proptest! {
        #[test]
        fn dilated_matches_naive_oracle(
            n in 2usize..=64, k in 1usize..=8, d in 1usize..=4, dim in 1usize..=4, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_points(&mut rng, n, dim);
            let g = dilated_knn_graph(&x, k, d, None);
            let expect = naive_dilated(&x, k, d);
            prop_assert_eq!(g.adjacency(), expect.as_slice());
            for (i, l) in g.adjacency().iter().enumerate() {
                prop_assert_eq!(l.len(), k.min(n - 1));
                prop_assert!(l.iter().all(|&j| j < n && j != i));
            }
        }

        #[test]
        fn permutation_relabels_graph(n in 3usize..=30, k in 1usize..=6, d in 1usize..=3, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // continuous random coordinates: distinct distances almost surely
            let x = random_points(&mut rng, n, 3);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            // row perm[i] of the permuted set holds original row i
            let mut px = Tensor::zeros(n, 3);
            for i in 0..n {
                px.row_mut(perm[i]).copy_from_slice(x.row(i));
            }
            let g = dilated_knn_graph(&x, k, d, None);
            let pg = dilated_knn_graph(&px, k, d, None);
            for i in 0..n {
                let mapped: Vec<usize> = g.neighbors(i).iter().map(|&j| perm[j]).collect();
                prop_assert_eq!(pg.neighbors(perm[i]), mapped.as_slice());
            }
        }

        #[test]
        fn positive_scaling_keeps_topology(n in 2usize..=30, k in 1usize..=6, c in 0.01f64..100.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_points(&mut rng, n, 3);
            prop_assert_eq!(knn_graph(&x, k, None), knn_graph(&x.scale(c), k, None));
        }
    }
}
