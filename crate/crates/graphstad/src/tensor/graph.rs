//! Graph convolution over a fixed normalized propagation matrix, plus the
//! gated global pooling that collapses node features to one vector.

use std::sync::Arc;

use super::{add_row_bias, fc, matmul, reshape, softmax_last, Scalar, Tensor};

/// Symmetric-normalized propagation matrix `D^{-1/2}(A+I)D^{-1/2}`.
///
/// The clique variant exploits the block structure of an RBX graph (every row
/// of a block is `1/|block|` over its members), which turns propagation into a
/// per-block mean instead of a quadratic sparse product.
#[derive(Debug, Clone)]
pub enum Propagation {
    General {
        n: usize,
        /// Sparse rows of (column, value); symmetric by construction.
        rows: Vec<Vec<(usize, f64)>>,
    },
    UniformBlocks {
        n: usize,
        /// Disjoint node-id blocks covering all nodes.
        blocks: Vec<Vec<usize>>,
    },
}

impl Propagation {
    pub fn n_nodes(&self) -> usize {
        match self {
            Propagation::General { n, .. } | Propagation::UniformBlocks { n, .. } => *n,
        }
    }

    /// `out = Â · x` for row-major `x [M,F]`. Â is symmetric, so this is
    /// also the transpose product used in the backward pass.
    pub fn apply<S: Scalar>(&self, x: &[S], f: usize) -> Vec<S> {
        let m = self.n_nodes();
        assert_eq!(x.len(), m * f, "propagation: feature matrix shape mismatch");
        let mut out = vec![S::zero(); m * f];
        match self {
            Propagation::General { rows, .. } => {
                for (i, row) in rows.iter().enumerate() {
                    let orow = &mut out[i * f..(i + 1) * f];
                    for &(j, v) in row {
                        let vs = S::c(v);
                        for (o, xv) in orow.iter_mut().zip(&x[j * f..(j + 1) * f]) {
                            *o += vs * *xv;
                        }
                    }
                }
            }
            Propagation::UniformBlocks { blocks, .. } => {
                for block in blocks {
                    let inv = S::c(1.0 / block.len() as f64);
                    let mut mean = vec![S::zero(); f];
                    for &j in block {
                        for (mv, xv) in mean.iter_mut().zip(&x[j * f..(j + 1) * f]) {
                            *mv += *xv;
                        }
                    }
                    for mv in &mut mean {
                        *mv *= inv;
                    }
                    for &j in block {
                        out[j * f..(j + 1) * f].copy_from_slice(&mean);
                    }
                }
            }
        }
        out
    }

    /// Dense `M x M` materialization, for oracles and small graphs.
    pub fn to_dense(&self) -> Vec<f64> {
        let m = self.n_nodes();
        let mut out = vec![0.0; m * m];
        match self {
            Propagation::General { rows, .. } => {
                for (i, row) in rows.iter().enumerate() {
                    for &(j, v) in row {
                        out[i * m + j] = v;
                    }
                }
            }
            Propagation::UniformBlocks { blocks, .. } => {
                for block in blocks {
                    let v = 1.0 / block.len() as f64;
                    for &i in block {
                        for &j in block {
                            out[i * m + j] = v;
                        }
                    }
                }
            }
        }
        out
    }

    /// Build the general variant from a binary adjacency (upper structure
    /// given as neighbor lists), adding self loops and symmetric
    /// normalization.
    pub fn from_adjacency(n: usize, neighbors: &[Vec<usize>]) -> Propagation {
        assert_eq!(neighbors.len(), n);
        // degree includes the self loop
        let deg: Vec<f64> = neighbors.iter().map(|nb| (nb.len() + 1) as f64).collect();
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = Vec::with_capacity(neighbors[i].len() + 1);
            row.push((i, 1.0 / deg[i]));
            for &j in &neighbors[i] {
                row.push((j, 1.0 / (deg[i] * deg[j]).sqrt()));
            }
            row.sort_unstable_by_key(|&(j, _)| j);
            rows.push(row);
        }
        Propagation::General { n, rows }
    }
}

/// Linear graph convolution `Â · H · W + b` (activation applied by caller).
pub fn gcn_layer<S: Scalar>(
    h: &Tensor<S>,
    prop: &Arc<Propagation>,
    w: &Tensor<S>,
    b: &Tensor<S>,
) -> Tensor<S> {
    assert_eq!(h.shape().len(), 2, "op `gcn`: node features must be [M,F]");
    assert_eq!(
        h.shape()[0],
        prop.n_nodes(),
        "op `gcn`: node count {} does not match graph {}",
        h.shape()[0],
        prop.n_nodes()
    );
    let hw = matmul(h, w);
    let propagated = propagate(prop, &hw);
    add_row_bias(&propagated, b)
}

/// `y = Â x`, recorded with the self-adjoint backward `dx = Â g`.
pub fn propagate<S: Scalar>(prop: &Arc<Propagation>, x: &Tensor<S>) -> Tensor<S> {
    let f = x.shape()[1];
    let data = prop.apply(&x.data(), f);
    let pc = Arc::clone(prop);
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        "propagate",
        vec![x.clone()],
        Box::new(move |g| vec![pc.apply(g, f)]),
    )
}

/// Gated pooling of node features: a single linear score per node, softmax
/// over nodes, convex combination of the rows of `h`.
pub fn global_attention_pool<S: Scalar>(
    h: &Tensor<S>,
    w_gate: &Tensor<S>,
    b_gate: &Tensor<S>,
) -> Tensor<S> {
    assert_eq!(h.shape().len(), 2, "op `attention_pool`: input must be [M,F]");
    let (m, f) = (h.shape()[0], h.shape()[1]);
    assert!(m >= 1, "op `attention_pool`: empty graph");
    let scores = fc(h, w_gate, b_gate); // [M,1]
    let gates = softmax_last(&reshape(&scores, &[1, m]));
    reshape(&matmul(&gates, h), &[f])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sum;

    #[test]
    fn two_node_clique_averages_features() {
        // D^{-1/2}(A+I)D^{-1/2} rows are [0.5, 0.5]
        let prop = Arc::new(Propagation::UniformBlocks {
            n: 2,
            blocks: vec![vec![0, 1]],
        });
        let h = Tensor::<f64>::from_vec(&[2, 1], vec![1.0, 3.0]);
        let w = Tensor::from_vec(&[1, 1], vec![1.0]);
        let b = Tensor::zeros(&[1]);
        let y = gcn_layer(&h, &prop, &w, &b);
        assert_eq!(y.to_vec(), vec![2.0, 2.0]);
    }

    #[test]
    fn edgeless_graph_is_per_node_linear() {
        let prop = Arc::new(Propagation::from_adjacency(2, &[vec![], vec![]]));
        let h = Tensor::<f64>::from_vec(&[2, 1], vec![1.0, 3.0]);
        let w = Tensor::from_vec(&[1, 1], vec![2.0]);
        let b = Tensor::from_vec(&[1], vec![0.5]);
        let y = gcn_layer(&h, &prop, &w, &b);
        assert_eq!(y.to_vec(), vec![2.5, 6.5]);
    }

    #[test]
    fn clique_and_general_forms_agree() {
        let blocks = vec![vec![0, 1, 2], vec![3, 4]];
        let uniform = Propagation::UniformBlocks { n: 5, blocks };
        let neighbors = vec![
            vec![1, 2],
            vec![0, 2],
            vec![0, 1],
            vec![4],
            vec![3],
        ];
        let general = Propagation::from_adjacency(5, &neighbors);
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let a = uniform.apply(&x, 2);
        let b = general.apply(&x, 2);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_pool_returns_the_feature_row() {
        let h = Tensor::<f64>::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]);
        let w = Tensor::from_vec(&[3, 1], vec![0.3, -0.2, 0.9]);
        let b = Tensor::zeros(&[1]);
        let y = global_attention_pool(&h, &w, &b);
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn identical_rows_pool_to_that_row() {
        let h = Tensor::<f64>::from_vec(&[4, 2], vec![0.5, -1.0].repeat(4));
        let w = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]);
        let b = Tensor::zeros(&[1]);
        let y = global_attention_pool(&h, &w, &b);
        for (v, e) in y.to_vec().iter().zip([0.5, -1.0]) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn propagate_gradient_is_symmetric_apply() {
        let prop = Arc::new(Propagation::UniformBlocks {
            n: 2,
            blocks: vec![vec![0, 1]],
        });
        let x = Tensor::<f64>::param(&[2, 1], vec![1.0, 5.0]);
        sum(&propagate(&prop, &x)).backward();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
    }
}
