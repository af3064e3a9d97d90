//! Dense linear algebra and the pointwise activations used by the model.

use super::{Scalar, Tensor};

/// `[M,K] x [K,N] -> [M,N]` matrix product.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    assert_eq!(a.shape().len(), 2, "op `matmul`: lhs must be rank 2");
    assert_eq!(b.shape().len(), 2, "op `matmul`: rhs must be rank 2");
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "op `matmul`: inner extents {k} vs {k2}");
    let data = {
        let av = a.data();
        let bv = b.data();
        mm(&av, &bv, m, k, n)
    };
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        vec![m, n],
        data,
        "matmul",
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let av = ac.data();
            let bv = bc.data();
            // dA = G B^T, dB = A^T G
            let bt = transpose(&bv, k, n);
            let at = transpose(&av, m, k);
            vec![mm(g, &bt, m, n, k), mm(&at, g, k, m, n)]
        }),
    )
}

fn mm<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Fully connected layer: `x [M,K] * w [K,N] + b [N]`.
pub fn fc<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let y = matmul(x, w);
    add_row_bias(&y, b)
}

/// Broadcast-add a bias vector to every row of a matrix.
pub fn add_row_bias<S: Scalar>(x: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    assert_eq!(x.shape().len(), 2, "op `add_row_bias`: x must be rank 2");
    let (m, n) = (x.shape()[0], x.shape()[1]);
    assert_eq!(b.numel(), n, "op `add_row_bias`: bias length mismatch");
    let data = {
        let xv = x.data();
        let bv = b.data();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                out.push(xv[r * n + c] + bv[c]);
            }
        }
        out
    };
    Tensor::from_op(
        vec![m, n],
        data,
        "add_row_bias",
        vec![x.clone(), b.clone()],
        Box::new(move |g| {
            let mut gb = vec![S::zero(); n];
            for r in 0..m {
                for c in 0..n {
                    gb[c] += g[r * n + c];
                }
            }
            vec![g.to_vec(), gb]
        }),
    )
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let data: Vec<S> = x
        .data()
        .iter()
        .map(|v| if *v > S::zero() { *v } else { S::zero() })
        .collect();
    let xc = x.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        "relu",
        vec![x.clone()],
        Box::new(move |g| {
            let xv = xc.data();
            vec![g
                .iter()
                .zip(xv.iter())
                .map(|(gi, v)| if *v > S::zero() { *gi } else { S::zero() })
                .collect()]
        }),
    )
}

pub fn sigmoid<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let data: Vec<S> = x
        .data()
        .iter()
        .map(|v| S::one() / (S::one() + (-*v).exp()))
        .collect();
    let y = data.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        "sigmoid",
        vec![x.clone()],
        Box::new(move |g| {
            vec![g
                .iter()
                .zip(y.iter())
                .map(|(gi, s)| *gi * *s * (S::one() - *s))
                .collect()]
        }),
    )
}

pub fn tanh_op<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let data: Vec<S> = x.data().iter().map(|v| v.tanh()).collect();
    let y = data.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        "tanh",
        vec![x.clone()],
        Box::new(move |g| {
            vec![g
                .iter()
                .zip(y.iter())
                .map(|(gi, t)| *gi * (S::one() - *t * *t))
                .collect()]
        }),
    )
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let data: Vec<S> = x
        .data()
        .iter()
        .map(|v| {
            if *v > S::zero() {
                *v + (-*v).exp().ln_1p()
            } else {
                v.exp().ln_1p()
            }
        })
        .collect();
    let xc = x.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        "softplus",
        vec![x.clone()],
        Box::new(move |g| {
            let xv = xc.data();
            vec![g
                .iter()
                .zip(xv.iter())
                .map(|(gi, v)| *gi / (S::one() + (-*v).exp()))
                .collect()]
        }),
    )
}

/// Softmax over the last axis.
pub fn softmax_last<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let shape = x.shape().to_vec();
    let n = *shape.last().expect("softmax on rank-0 tensor");
    assert!(n > 0, "op `softmax`: empty axis");
    let rows = x.numel() / n;
    let data = {
        let xv = x.data();
        let mut out = vec![S::zero(); rows * n];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (*v - max).exp();
                denom += *o;
            }
            for o in &mut out[r * n..(r + 1) * n] {
                *o = *o / denom;
            }
        }
        out
    };
    let y = data.clone();
    Tensor::from_op(
        shape,
        data,
        "softmax",
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx = vec![S::zero(); rows * n];
            for r in 0..rows {
                let yr = &y[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let dot: S = yr.iter().zip(gr).map(|(yi, gi)| *yi * *gi).sum();
                for c in 0..n {
                    gx[r * n + c] = yr[c] * (gr[c] - dot);
                }
            }
            vec![gx]
        }),
    )
}
