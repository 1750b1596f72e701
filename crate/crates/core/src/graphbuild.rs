//! Connectivity matrices and KNN graphs built from ROI time series.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::gemm;
use crate::dataset::TimeSeries;

/// Clipping margin applied before `atanh`.
pub const FISHER_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("ROI {roi} has zero variance")]
    ZeroVariance { roi: usize },
    #[error("k = {k} outside 1..={max} for a {nodes}-node graph")]
    KOutOfRange { k: usize, max: usize, nodes: usize },
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// How neighbours are ranked when building the KNN graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborRanking {
    /// Strongest connections by magnitude.
    #[default]
    Absolute,
    Signed,
}

/// Fisher-z connectivity matrix; the diagonal is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnMatrix {
    pub atlas: String,
    pub values: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcnGraph {
    pub atlas: String,
    pub node_count: usize,
    /// Row `i` is node `i`'s connectivity profile.
    pub node_features: Array2<f64>,
    /// Symmetric edge weights; off-diagonal entries are z values scaled by
    /// the largest edge magnitude, the diagonal holds self-loops of 1.0.
    pub adjacency: Array2<f64>,
    /// Sorted neighbours of each node, the node itself included.
    pub neighbor_lists: Vec<Vec<usize>>,
}

impl FcnGraph {
    /// Number of neighbours of `i` other than itself.
    pub fn degree(&self, i: usize) -> usize {
        self.neighbor_lists[i].len() - 1
    }

    /// Undirected edges `(i, j, weight)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (i, list) in self.neighbor_lists.iter().enumerate() {
            for &j in list.iter().filter(|&&j| j > i) {
                out.push((i, j, self.adjacency[[i, j]]));
            }
        }
        out
    }

    pub fn to_dump(&self) -> GraphDump {
        GraphDump {
            atlas: self.atlas.clone(),
            node_count: self.node_count,
            node_features: self.node_features.rows().into_iter().map(|r| r.to_vec()).collect(),
            edges: self.edges(),
        }
    }
}

/// Debug dump of one graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub atlas: String,
    pub node_count: usize,
    pub node_features: Vec<Vec<f64>>,
    pub edges: Vec<(usize, usize, f64)>,
}

/// Pearson correlation between every pair of ROI columns.
pub fn pearson_fcn(series: &TimeSeries) -> Result<Array2<f64>> {
    let (t, n) = series.values.dim();
    let mut centered = vec![0.0; t * n];
    let mut norms = vec![0.0; n];
    for j in 0..n {
        let col = series.values.column(j);
        let mean = col.sum() / t as f64;
        let mut ss = 0.0;
        for (i, v) in col.iter().enumerate() {
            let d = v - mean;
            centered[i * n + j] = d;
            ss += d * d;
        }
        if ss <= 0.0 || !ss.is_finite() {
            return Err(GraphError::ZeroVariance { roi: j });
        }
        norms[j] = ss.sqrt();
    }
    // the centered columns are divided through so the Gram matrix is the
    // correlation matrix directly
    for row in centered.chunks_exact_mut(n) {
        for (v, s) in row.iter_mut().zip(&norms) {
            *v /= s;
        }
    }
    let mut gram = vec![0.0; n * n];
    gemm(n, t, n, &centered, true, &centered, false, &mut gram, 0.0);
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        out[[i, i]] = 1.0;
        for j in i + 1..n {
            let r = gram[i * n + j].clamp(-1.0, 1.0);
            out[[i, j]] = r;
            out[[j, i]] = r;
        }
    }
    Ok(out)
}

/// Elementwise `atanh(clip(r, -1 + ε, 1 - ε))` with the diagonal set to 0.
pub fn fisher_z(atlas: &str, pearson: &Array2<f64>) -> Result<FcnMatrix> {
    let (rows, cols) = pearson.dim();
    if rows != cols {
        return Err(GraphError::NotSquare { rows, cols });
    }
    let mut values = Array2::zeros((rows, cols));
    for i in 0..rows {
        for j in i + 1..cols {
            values[[i, j]] = fisher_z_scalar(pearson[[i, j]]);
            values[[j, i]] = fisher_z_scalar(pearson[[j, i]]);
        }
    }
    Ok(FcnMatrix {
        atlas: atlas.to_string(),
        values,
    })
}

pub fn fisher_z_scalar(r: f64) -> f64 {
    r.signum() * r.abs().min(1.0 - FISHER_EPS).atanh()
}

/// Connects every node to its `k` highest-ranked other nodes, then takes the
/// union of the directed choices. Equal scores prefer the lower node index.
pub fn knn_graph(fcn: &FcnMatrix, k: usize, ranking: NeighborRanking) -> Result<FcnGraph> {
    let (n, cols) = fcn.values.dim();
    if n != cols {
        return Err(GraphError::NotSquare { rows: n, cols });
    }
    if k == 0 || k + 1 > n {
        return Err(GraphError::KOutOfRange {
            k,
            max: n.saturating_sub(1),
            nodes: n,
        });
    }
    let z = &fcn.values;
    let score = |i: usize, j: usize| match ranking {
        NeighborRanking::Absolute => z[[i, j]].abs(),
        NeighborRanking::Signed => z[[i, j]],
    };

    let mut linked = vec![vec![false; n]; n];
    let mut candidates: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        candidates.clear();
        candidates.extend((0..n).filter(|&j| j != i));
        let order = |a: &usize, b: &usize| score(i, *b).total_cmp(&score(i, *a)).then(a.cmp(b));
        if k < candidates.len() {
            candidates.select_nth_unstable_by(k - 1, order);
        }
        for &j in &candidates[..k] {
            linked[i][j] = true;
            linked[j][i] = true;
        }
    }

    let max_abs = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| linked[i][j])
        .map(|(i, j)| z[[i, j]].abs())
        .fold(0.0, f64::max);
    let norm = if max_abs > 0.0 { max_abs } else { 1.0 };

    let mut adjacency = Array2::zeros((n, n));
    let mut neighbor_lists = Vec::with_capacity(n);
    for i in 0..n {
        adjacency[[i, i]] = 1.0;
        let mut list = Vec::new();
        for j in 0..n {
            if j == i {
                list.push(i);
            } else if linked[i][j] {
                adjacency[[i, j]] = z[[i, j]] / norm;
                list.push(j);
            }
        }
        neighbor_lists.push(list);
    }

    Ok(FcnGraph {
        atlas: fcn.atlas.clone(),
        node_count: n,
        node_features: z.clone(),
        adjacency,
        neighbor_lists,
    })
}

/// `pearson_fcn` → `fisher_z` → `knn_graph`.
pub fn build_graph(series: &TimeSeries, k: usize, ranking: NeighborRanking) -> Result<FcnGraph> {
    let r = pearson_fcn(series)?;
    let z = fisher_z(&series.atlas, &r)?;
    knn_graph(&z, k, ranking)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn series(values: Array2<f64>) -> TimeSeries {
        TimeSeries::new("toy", values).unwrap()
    }

    fn two_columns(a: [f64; 3], b: [f64; 3]) -> TimeSeries {
        series(Array2::from_shape_fn((3, 2), |(t, j)| if j == 0 { a[t] } else { b[t] }))
    }

    /// Correlation written term by term from the definition.
    fn naive_pearson(y: &Array2<f64>, i: usize, j: usize) -> f64 {
        let t = y.nrows();
        let mi = (0..t).map(|s| y[[s, i]]).sum::<f64>() / t as f64;
        let mj = (0..t).map(|s| y[[s, j]]).sum::<f64>() / t as f64;
        let mut num = 0.0;
        let mut di = 0.0;
        let mut dj = 0.0;
        for s in 0..t {
            num += (y[[s, i]] - mi) * (y[[s, j]] - mj);
            di += (y[[s, i]] - mi) * (y[[s, i]] - mi);
            dj += (y[[s, j]] - mj) * (y[[s, j]] - mj);
        }
        num / (di.sqrt() * dj.sqrt())
    }

    #[test]
    fn identical_and_reversed_series() {
        let r = pearson_fcn(&two_columns([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])).unwrap();
        assert!((r[[0, 1]] - 1.0).abs() < 1e-15);
        let r = pearson_fcn(&two_columns([1.0, 2.0, 3.0], [3.0, 2.0, 1.0])).unwrap();
        assert!((r[[0, 1]] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn hand_evaluated_correlation() {
        // covariance sum 5, sums of squares 42/9 and 6
        let r = pearson_fcn(&two_columns([1.0, 2.0, 4.0], [2.0, 2.0, 5.0])).unwrap();
        let expected = 5.0 / ((42.0f64 / 9.0).sqrt() * 6.0f64.sqrt());
        assert!((r[[0, 1]] - expected).abs() < 1e-12);
        assert!((r[[0, 1]] - 0.9449).abs() < 1e-4);
    }

    #[test]
    fn zero_variance_roi_reported() {
        let s = series(array![[1.0, 5.0, 2.0], [2.0, 5.0, 1.0], [3.0, 5.0, 0.0]]);
        assert_eq!(pearson_fcn(&s), Err(GraphError::ZeroVariance { roi: 1 }));
    }

    #[test]
    fn fisher_values() {
        assert_eq!(fisher_z_scalar(0.0), 0.0);
        assert!((fisher_z_scalar(0.9449) - 1.7820).abs() < 1e-3);
        let top = fisher_z_scalar(1.0);
        assert!(top.is_finite());
        assert_eq!(top, (1.0 - FISHER_EPS).atanh());
        let z = fisher_z("toy", &array![[1.0, 0.5], [0.5, 1.0]]).unwrap();
        assert_eq!(z.values[[0, 0]], 0.0);
    }

    #[test]
    fn knn_saturates_to_complete_graph() {
        let z = FcnMatrix {
            atlas: "toy".into(),
            values: array![[0.0, 0.3, -0.2, 0.1], [0.3, 0.0, 0.5, 0.2], [-0.2, 0.5, 0.0, 0.4], [0.1, 0.2, 0.4, 0.0]],
        };
        let g = knn_graph(&z, 3, NeighborRanking::Absolute).unwrap();
        for i in 0..4 {
            assert_eq!(g.neighbor_lists[i], vec![0, 1, 2, 3]);
            assert_eq!(g.adjacency[[i, i]], 1.0);
        }
        assert!(matches!(
            knn_graph(&z, 4, NeighborRanking::Absolute),
            Err(GraphError::KOutOfRange { .. })
        ));
        assert!(knn_graph(&z, 0, NeighborRanking::Absolute).is_err());
    }

    /// Union of each node's top-k choices, found by enumerating all pairs.
    fn brute_force_edges(z: &Array2<f64>, k: usize) -> Vec<(usize, usize)> {
        let n = z.nrows();
        let mut chosen = std::collections::BTreeSet::new();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                // j is chosen iff fewer than k others outrank it
                let better = (0..n)
                    .filter(|&m| m != i && m != j)
                    .filter(|&m| {
                        z[[i, m]].abs() > z[[i, j]].abs()
                            || (z[[i, m]].abs() == z[[i, j]].abs() && m < j)
                    })
                    .count();
                if better < k {
                    chosen.insert((i.min(j), i.max(j)));
                }
            }
        }
        chosen.into_iter().collect()
    }

    #[test]
    fn knn_matches_enumeration_oracle() {
        let z = FcnMatrix {
            atlas: "toy".into(),
            values: array![
                [0.0, 0.9, 0.2, 0.1],
                [0.9, 0.0, -0.3, 0.05],
                [0.2, -0.3, 0.0, 0.7],
                [0.1, 0.05, 0.7, 0.0]
            ],
        };
        let g = knn_graph(&z, 1, NeighborRanking::Absolute).unwrap();
        assert!(g.neighbor_lists[0].contains(&1));
        let edges: Vec<_> = g.edges().into_iter().map(|(i, j, _)| (i, j)).collect();
        assert_eq!(edges, brute_force_edges(&z.values, 1));
    }

    #[test]
    fn ties_prefer_lower_index() {
        let mut v = Array2::from_elem((5, 5), 0.4);
        v.diag_mut().fill(0.0);
        let z = FcnMatrix { atlas: "toy".into(), values: v };
        let a = knn_graph(&z, 1, NeighborRanking::Absolute).unwrap();
        let b = knn_graph(&z, 1, NeighborRanking::Absolute).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.neighbor_lists[0], vec![0, 1, 2, 3, 4]);
        assert_eq!(a.neighbor_lists[3], vec![0, 3]);
    }

    #[test]
    fn signed_ranking_ignores_negative_strength() {
        let z = FcnMatrix {
            atlas: "toy".into(),
            values: array![[0.0, -0.9, 0.2], [-0.9, 0.0, 0.1], [0.2, 0.1, 0.0]],
        };
        let abs = knn_graph(&z, 1, NeighborRanking::Absolute).unwrap();
        let signed = knn_graph(&z, 1, NeighborRanking::Signed).unwrap();
        assert!(abs.neighbor_lists[0].contains(&1));
        assert_eq!(signed.neighbor_lists[0], vec![0, 2]);
    }

    fn random_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
        prop::collection::vec(-3.0f64..3.0, rows * cols)
            .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn pearson_matches_double_loop(y in random_matrix(10, 20)) {
            let r = pearson_fcn(&series(y.clone())).unwrap();
            for i in 0..20 {
                prop_assert_eq!(r[[i, i]], 1.0);
                for j in 0..20 {
                    prop_assert_eq!(r[[i, j]], r[[j, i]]);
                    if i != j {
                        prop_assert!((r[[i, j]] - naive_pearson(&y, i, j)).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn fisher_is_odd_and_monotone(a in -0.999f64..0.999, b in -0.999f64..0.999) {
            prop_assert_eq!(fisher_z_scalar(-a), -fisher_z_scalar(a));
            if a < b {
                prop_assert!(fisher_z_scalar(a) < fisher_z_scalar(b));
            }
        }

        #[test]
        fn knn_symmetric_with_bounded_degree(y in random_matrix(12, 8), k in 1usize..7) {
            let g = build_graph(&series(y), k, NeighborRanking::Absolute).unwrap();
            for i in 0..8 {
                prop_assert!(g.degree(i) >= k && g.degree(i) <= 7);
                prop_assert!(g.neighbor_lists[i].windows(2).all(|w| w[0] < w[1]));
                for j in 0..8 {
                    prop_assert_eq!(g.adjacency[[i, j]], g.adjacency[[j, i]]);
                    prop_assert_eq!(g.node_features[[i, j]], g.node_features[[j, i]]);
                }
            }
        }

        #[test]
        fn knn_commutes_with_node_permutation(y in random_matrix(12, 7), seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let base = build_graph(&series(y.clone()), 2, NeighborRanking::Absolute).unwrap();
            let mut perm: Vec<usize> = (0..7).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted = Array2::from_shape_fn((12, 7), |(t, j)| y[[t, perm[j]]]);
            let g = build_graph(&series(permuted), 2, NeighborRanking::Absolute).unwrap();
            // node a of g is node perm[a] of base; ties are measure-zero here
            for a in 0..7 {
                for b in 0..7 {
                    let linked_g = g.neighbor_lists[a].contains(&b);
                    let linked_base = base.neighbor_lists[perm[a]].contains(&perm[b]);
                    prop_assert_eq!(linked_g, linked_base);
                    prop_assert!((g.adjacency[[a, b]] - base.adjacency[[perm[a], perm[b]]]).abs() < 1e-12);
                }
            }
        }
    }
}
