//! Max pooling with recorded argmax locations and the matching unpooling
//! scatter.
//!
//! Stride-2 pooling uses tail windows: an odd extent keeps its remainder in a
//! final smaller window, so no element is dropped and the output extent is
//! `ceil(extent / 2)` (an axis already at 1 passes through). The partition
//! variant pools an axis into an arbitrary number of near-even windows; the
//! model uses it to align a stubborn axis onto its bottleneck target.

use super::{Scalar, Tensor};

/// Argmax bookkeeping of one pooling step, consumed by [`maxunpool3d`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    /// Flat index into the input tensor, one per pooled output element.
    pub argmax: Vec<usize>,
}

/// Output extent of one stride-2 tail-window pool.
pub fn pooled_extent(extent: usize) -> usize {
    extent.div_ceil(2).max(1)
}

fn stride2_windows(extent: usize) -> Vec<(usize, usize)> {
    (0..pooled_extent(extent))
        .map(|o| (2 * o, (2 * o + 2).min(extent)))
        .collect()
}

fn partition_windows(extent: usize, bins: usize) -> Vec<(usize, usize)> {
    assert!(bins >= 1 && bins <= extent, "cannot partition extent {extent} into {bins} windows");
    (0..bins)
        .map(|i| (i * extent / bins, (i + 1) * extent / bins))
        .collect()
}

fn pool_with_windows<S: Scalar>(
    x: &Tensor<S>,
    wz: Vec<(usize, usize)>,
    wy: Vec<(usize, usize)>,
    wx: Vec<(usize, usize)>,
) -> (Tensor<S>, PoolIndices) {
    assert_eq!(x.shape().len(), 5, "op `maxpool3d`: input must be [B,C,D1,D2,D3]");
    let (b, c, d1, d2, d3) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
        x.shape()[4],
    );
    assert!(d1 >= 1 && d2 >= 1 && d3 >= 1, "op `maxpool3d`: empty spatial extent");
    let (o1, o2, o3) = (wz.len(), wy.len(), wx.len());
    let mut out = Vec::with_capacity(b * c * o1 * o2 * o3);
    let mut argmax = Vec::with_capacity(out.capacity());
    {
        let xv = x.data();
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * d1 * d2 * d3;
                for &(z0, z1) in &wz {
                    for &(y0, y1) in &wy {
                        for &(x0, x1) in &wx {
                            let mut best = S::neg_infinity();
                            let mut best_idx = 0usize;
                            for z in z0..z1 {
                                for y in y0..y1 {
                                    for xi in x0..x1 {
                                        let idx = base + (z * d2 + y) * d3 + xi;
                                        // strictly-greater: ties keep the lowest flat index
                                        if xv[idx] > best {
                                            best = xv[idx];
                                            best_idx = idx;
                                        }
                                    }
                                }
                            }
                            out.push(best);
                            argmax.push(best_idx);
                        }
                    }
                }
            }
        }
    }
    let indices = PoolIndices {
        input_shape: x.shape().to_vec(),
        argmax: argmax.clone(),
    };
    let total = x.numel();
    let tensor = Tensor::from_op(
        vec![b, c, o1, o2, o3],
        out,
        "maxpool3d",
        vec![x.clone()],
        Box::new(move |g| {
            let mut dx = vec![S::zero(); total];
            for (gi, &src) in g.iter().zip(&argmax) {
                dx[src] += *gi;
            }
            vec![dx]
        }),
    );
    (tensor, indices)
}

/// Stride-2 max pooling with tail windows and argmax recording.
pub fn maxpool3d<S: Scalar>(x: &Tensor<S>) -> (Tensor<S>, PoolIndices) {
    let (d1, d2, d3) = (x.shape()[2], x.shape()[3], x.shape()[4]);
    pool_with_windows(
        x,
        stride2_windows(d1),
        stride2_windows(d2),
        stride2_windows(d3),
    )
}

/// Pool each spatial axis into exactly `targets` near-even windows.
pub fn maxpool3d_partition<S: Scalar>(x: &Tensor<S>, targets: [usize; 3]) -> (Tensor<S>, PoolIndices) {
    let (d1, d2, d3) = (x.shape()[2], x.shape()[3], x.shape()[4]);
    pool_with_windows(
        x,
        partition_windows(d1, targets[0]),
        partition_windows(d2, targets[1]),
        partition_windows(d3, targets[2]),
    )
}

/// Scatter pooled values back to their recorded argmax locations; everything
/// else is zero. Output shape is the pooling input shape.
pub fn maxunpool3d<S: Scalar>(x: &Tensor<S>, indices: &PoolIndices) -> Tensor<S> {
    assert_eq!(
        x.numel(),
        indices.argmax.len(),
        "op `maxunpool3d`: pooled shape does not match recorded indices"
    );
    let total: usize = indices.input_shape.iter().product();
    let mut out = vec![S::zero(); total];
    {
        let xv = x.data();
        for (v, &dst) in xv.iter().zip(&indices.argmax) {
            assert!(dst < total, "op `maxunpool3d`: argmax index out of range");
            out[dst] = *v;
        }
    }
    let argmax = indices.argmax.clone();
    let n = x.numel();
    Tensor::from_op(
        indices.input_shape.clone(),
        out,
        "maxunpool3d",
        vec![x.clone()],
        Box::new(move |g| {
            let mut dx = vec![S::zero(); n];
            for (d, &src) in dx.iter_mut().zip(&argmax) {
                *d = g[src];
            }
            vec![dx]
        }),
    )
}
