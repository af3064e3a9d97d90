//! 3D cross-correlation and its transpose, stride 1, shape-preserving
//! padding (`kernel == 2*padding + 1`).

use super::{Scalar, Tensor};

struct Dims {
    b: usize,
    ci: usize,
    co: usize,
    d1: usize,
    d2: usize,
    d3: usize,
    k: usize,
    p: usize,
}

fn conv_dims<S: Scalar>(
    op: &str,
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    padding: usize,
    transposed: bool,
) -> Dims {
    assert_eq!(x.shape().len(), 5, "op `{op}`: input must be [B,C,D1,D2,D3]");
    assert_eq!(w.shape().len(), 5, "op `{op}`: weight must be rank 5");
    let (wb0, wb1) = (w.shape()[0], w.shape()[1]);
    // conv weights are [Co,Ci,k,k,k]; transposed-conv weights are [Ci,Co,k,k,k]
    let (co, ci) = if transposed { (wb1, wb0) } else { (wb0, wb1) };
    let k = w.shape()[2];
    assert!(
        w.shape()[3] == k && w.shape()[4] == k,
        "op `{op}`: kernel must be cubic"
    );
    assert_eq!(
        k,
        2 * padding + 1,
        "op `{op}`: only shape-preserving kernels supported (kernel == 2*padding+1)"
    );
    assert_eq!(
        x.shape()[1],
        ci,
        "op `{op}`: input channels {} do not match weight {}",
        x.shape()[1],
        ci
    );
    assert_eq!(b.numel(), co, "op `{op}`: bias length mismatch");
    Dims {
        b: x.shape()[0],
        ci,
        co,
        d1: x.shape()[2],
        d2: x.shape()[3],
        d3: x.shape()[4],
        k,
        p: padding,
    }
}

/// Columns of receptive-field patches: output is `[n_ch*k^3, sp]` with
/// row `(ic,kz,ky,kx)` and column `(z,y,x)`; out-of-bounds taps are zero.
fn im2col<S: Scalar>(xn: &[S], d: &Dims, n_ch: usize) -> Vec<S> {
    let sp23 = d.d2 * d.d3;
    let sp = d.d1 * sp23;
    let k3 = d.k * d.k * d.k;
    let mut cols = vec![S::zero(); n_ch * k3 * sp];
    for ic in 0..n_ch {
        let ibase = ic * sp;
        for kz in 0..d.k {
            let (z0, z1) = axis_range(d.d1, kz, d.p);
            for ky in 0..d.k {
                let (y0, y1) = axis_range(d.d2, ky, d.p);
                for kx in 0..d.k {
                    let (x0, x1) = axis_range(d.d3, kx, d.p);
                    if x1 <= x0 {
                        continue;
                    }
                    let rbase = (((ic * d.k + kz) * d.k + ky) * d.k + kx) * sp;
                    for z in z0..z1 {
                        let zi = (z + kz).wrapping_sub(d.p);
                        for y in y0..y1 {
                            let yi = (y + ky).wrapping_sub(d.p);
                            let dst = rbase + z * sp23 + y * d.d3 + x0;
                            let src = ibase + zi * sp23 + yi * d.d3 + x0 + kx - d.p;
                            cols[dst..dst + (x1 - x0)]
                                .copy_from_slice(&xn[src..src + (x1 - x0)]);
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Valid output range along one axis for kernel offset `k` and padding `p`:
/// source index `z + k - p` must land in `[0, extent)`.
fn axis_range(extent: usize, k: usize, p: usize) -> (usize, usize) {
    let lo = p.saturating_sub(k);
    let hi = if k > p {
        extent.saturating_sub(k - p)
    } else {
        extent
    };
    (lo, hi.max(lo))
}

fn mm_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
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
}

fn transpose_into<S: Scalar>(a: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Standard-convolution core over a flattened weight matrix
/// `wmat [n_out, n_in*k^3]`: `out[n,oc,s] = sum_c wmat[oc,c] * cols_n[c,s]`.
fn conv_fwd_core<S: Scalar>(
    xv: &[S],
    wmat: &[S],
    bias: Option<&[S]>,
    d: &Dims,
    n_in: usize,
    n_out: usize,
) -> Vec<S> {
    let sp = d.d1 * d.d2 * d.d3;
    let c = n_in * d.k * d.k * d.k;
    let mut out = vec![S::zero(); d.b * n_out * sp];
    for n in 0..d.b {
        if let Some(bv) = bias {
            for oc in 0..n_out {
                let base = (n * n_out + oc) * sp;
                out[base..base + sp].fill(bv[oc]);
            }
        }
        let cols = im2col(&xv[n * n_in * sp..(n + 1) * n_in * sp], d, n_in);
        mm_into(wmat, &cols, &mut out[n * n_out * sp..(n + 1) * n_out * sp], n_out, c, sp);
    }
    out
}

/// Weight-matrix gradient of the core: `dwmat = sum_n g_n cols_n^T`.
fn conv_dw_core<S: Scalar>(xv: &[S], gout: &[S], d: &Dims, n_in: usize, n_out: usize) -> Vec<S> {
    let sp = d.d1 * d.d2 * d.d3;
    let c = n_in * d.k * d.k * d.k;
    let mut dwmat = vec![S::zero(); n_out * c];
    for n in 0..d.b {
        let cols = im2col(&xv[n * n_in * sp..(n + 1) * n_in * sp], d, n_in);
        let colst = transpose_into(&cols, c, sp);
        mm_into(
            &gout[n * n_out * sp..(n + 1) * n_out * sp],
            &colst,
            &mut dwmat,
            n_out,
            sp,
            c,
        );
    }
    dwmat
}

fn bias_grad<S: Scalar>(gout: &[S], batch: usize, channels: usize, sp: usize) -> Vec<S> {
    let mut db = vec![S::zero(); channels];
    for n in 0..batch {
        for (c, slot) in db.iter_mut().enumerate() {
            let base = (n * channels + c) * sp;
            *slot += gout[base..base + sp].iter().copied().sum();
        }
    }
    db
}

/// Remap a weight tensor into a `[n_out, n_in*k^3]` core matrix. `f` maps
/// `(oc, ic, tap)` in the core's indexing to the flat source index.
fn weight_matrix<S: Scalar>(
    wv: &[S],
    n_out: usize,
    n_in: usize,
    k3: usize,
    f: impl Fn(usize, usize, usize) -> usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); n_out * n_in * k3];
    for oc in 0..n_out {
        for ic in 0..n_in {
            for t in 0..k3 {
                out[(oc * n_in + ic) * k3 + t] = wv[f(oc, ic, t)];
            }
        }
    }
    out
}

fn flip_tap(t: usize, k: usize) -> usize {
    let k2 = k * k;
    let (kz, ky, kx) = (t / k2, (t / k) % k, t % k);
    (k - 1 - kz) * k2 + (k - 1 - ky) * k + (k - 1 - kx)
}

/// 3D convolution (cross-correlation), stride 1. `w` is `[Co,Ci,k,k,k]`.
pub fn conv3d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    padding: usize,
) -> Tensor<S> {
    let d = conv_dims("conv3d", x, w, b, padding, false);
    let sp = d.d1 * d.d2 * d.d3;
    let k3 = d.k * d.k * d.k;
    let out = {
        let xv = x.data();
        let wv = w.data();
        let bv = b.data();
        // conv weights are already laid out as the core matrix [Co, Ci*k^3]
        conv_fwd_core(&xv, &wv, Some(&bv), &d, d.ci, d.co)
    };
    let (xc, wc) = (x.clone(), w.clone());
    let shape = vec![d.b, d.co, d.d1, d.d2, d.d3];
    Tensor::from_op(
        shape,
        out,
        "conv3d",
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g| {
            let xv = xc.data();
            let wv = wc.data();
            // dx is a convolution of g with the channel-swapped, flipped kernel
            let wback = weight_matrix(&wv, d.ci, d.co, k3, |ic, oc, t| {
                (oc * d.ci + ic) * k3 + flip_tap(t, d.k)
            });
            let dx = conv_fwd_core(g, &wback, None, &d, d.co, d.ci);
            let dw = conv_dw_core(&xv, g, &d, d.ci, d.co);
            let db = bias_grad(g, d.b, d.co, sp);
            vec![dx, dw, db]
        }),
    )
}

/// Transposed 3D convolution, stride 1. `w` is `[Ci,Co,k,k,k]`; the forward
/// pass is the adjoint of [`conv3d`] with the same weights.
pub fn deconv3d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    padding: usize,
) -> Tensor<S> {
    let d = conv_dims("deconv3d", x, w, b, padding, true);
    let sp = d.d1 * d.d2 * d.d3;
    let k3 = d.k * d.k * d.k;
    let out = {
        let xv = x.data();
        let wv = w.data();
        let bv = b.data();
        // scatter out[z+kz-p] += x[z]*w  ==  convolution with flipped taps
        let wmat = weight_matrix(&wv, d.co, d.ci, k3, |oc, ic, t| {
            (ic * d.co + oc) * k3 + flip_tap(t, d.k)
        });
        conv_fwd_core(&xv, &wmat, Some(&bv), &d, d.ci, d.co)
    };
    let (xc, wc) = (x.clone(), w.clone());
    let shape = vec![d.b, d.co, d.d1, d.d2, d.d3];
    Tensor::from_op(
        shape,
        out,
        "deconv3d",
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g| {
            let xv = xc.data();
            let wv = wc.data();
            // dx is the plain (unflipped) convolution of g with w
            let wback = weight_matrix(&wv, d.ci, d.co, k3, |ic, oc, t| {
                (ic * d.co + oc) * k3 + t
            });
            let dx = conv_fwd_core(g, &wback, None, &d, d.co, d.ci);
            // dwmat is indexed like the forward core matrix; map back to
            // the [Ci,Co,k,k,k] layout through the same flip
            let dwmat = conv_dw_core(&xv, g, &d, d.ci, d.co);
            let mut dw = vec![S::zero(); d.ci * d.co * k3];
            for oc in 0..d.co {
                for ic in 0..d.ci {
                    for t in 0..k3 {
                        dw[(ic * d.co + oc) * k3 + flip_tap(t, d.k)] =
                            dwmat[(oc * d.ci + ic) * k3 + t];
                    }
                }
            }
            let db = bias_grad(g, d.b, d.co, sp);
            vec![dx, dw, db]
        }),
    )
}
