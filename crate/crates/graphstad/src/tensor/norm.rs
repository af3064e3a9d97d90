//! Batch normalization over the channel axis of `[B,C,...]` tensors.

use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Running first/second moments, updated in place during training forward
/// passes and read in eval mode.
pub struct RunningStats<S: Scalar> {
    pub mean: Tensor<S>,
    pub var: Tensor<S>,
}

/// Normalize `x [B,C,spatial...]` per channel.
///
/// Train mode uses batch statistics (population variance) and folds them into
/// `running` with the given momentum; eval mode normalizes by the running
/// statistics. Differentiable w.r.t. `x`, `gamma`, `beta`.
pub fn batchnorm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running: &RunningStats<S>,
    mode: BatchNormMode,
    eps: S,
    momentum: S,
) -> Tensor<S> {
    assert!(x.shape().len() >= 2, "op `batchnorm`: input must be [B,C,...]");
    let b = x.shape()[0];
    let c = x.shape()[1];
    assert!(b > 0, "op `batchnorm`: zero-size batch");
    assert_eq!(gamma.numel(), c, "op `batchnorm`: gamma length mismatch");
    assert_eq!(beta.numel(), c, "op `batchnorm`: beta length mismatch");
    let sp: usize = x.shape()[2..].iter().product();
    let n_per_c = b * sp;

    let (mean, var) = match mode {
        BatchNormMode::Train => {
            let xv = x.data();
            let inv_n = S::one() / S::from_usize(n_per_c).unwrap();
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for nb in 0..b {
                for ch in 0..c {
                    let base = (nb * c + ch) * sp;
                    mean[ch] += xv[base..base + sp].iter().copied().sum::<S>();
                }
            }
            for m in &mut mean {
                *m *= inv_n;
            }
            for nb in 0..b {
                for ch in 0..c {
                    let base = (nb * c + ch) * sp;
                    for v in &xv[base..base + sp] {
                        let d = *v - mean[ch];
                        var[ch] += d * d;
                    }
                }
            }
            for v in &mut var {
                *v *= inv_n;
            }
            // fold into running statistics
            running.mean.update_data(|rm| {
                for (r, m) in rm.iter_mut().zip(&mean) {
                    *r = (S::one() - momentum) * *r + momentum * *m;
                }
            });
            running.var.update_data(|rv| {
                for (r, v) in rv.iter_mut().zip(&var) {
                    *r = (S::one() - momentum) * *r + momentum * *v;
                }
            });
            (mean, var)
        }
        BatchNormMode::Eval => (running.mean.to_vec(), running.var.to_vec()),
    };

    let inv_std: Vec<S> = var.iter().map(|v| S::one() / (*v + eps).sqrt()).collect();
    let mut xhat = vec![S::zero(); x.numel()];
    let mut out = vec![S::zero(); x.numel()];
    {
        let xv = x.data();
        let gv = gamma.data();
        let bv = beta.data();
        for nb in 0..b {
            for ch in 0..c {
                let base = (nb * c + ch) * sp;
                for i in base..base + sp {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
    }

    let gc = gamma.clone();
    let train = mode == BatchNormMode::Train;
    Tensor::from_op(
        x.shape().to_vec(),
        out,
        "batchnorm",
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let gv = gc.data();
            let mut dgamma = vec![S::zero(); c];
            let mut dbeta = vec![S::zero(); c];
            for nb in 0..b {
                for ch in 0..c {
                    let base = (nb * c + ch) * sp;
                    for i in base..base + sp {
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                }
            }
            let mut dx = vec![S::zero(); g.len()];
            if train {
                // batch statistics participate in the gradient
                let n = S::from_usize(n_per_c).unwrap();
                for nb in 0..b {
                    for ch in 0..c {
                        let base = (nb * c + ch) * sp;
                        for i in base..base + sp {
                            let dxhat = g[i] * gv[ch];
                            dx[i] = inv_std[ch] / n
                                * (n * dxhat - dbeta[ch] * gv[ch] - xhat[i] * dgamma[ch] * gv[ch]);
                        }
                    }
                }
            } else {
                for nb in 0..b {
                    for ch in 0..c {
                        let base = (nb * c + ch) * sp;
                        for i in base..base + sp {
                            dx[i] = g[i] * gv[ch] * inv_std[ch];
                        }
                    }
                }
            }
            vec![dx, dgamma, dbeta]
        }),
    )
}

impl<S: Scalar> RunningStats<S> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], S::one()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(c: usize) -> RunningStats<f64> {
        RunningStats::new(c)
    }

    #[test]
    fn already_normalized_input_passes_through() {
        // zero-mean unit-variance channel; gamma=1 beta=0
        let x = Tensor::<f64>::from_vec(&[4, 1, 1], vec![-1.0, 1.0, -1.0, 1.0]);
        let g = Tensor::full(&[1], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = batchnorm(&x, &g, &b, &stats(1), BatchNormMode::Train, 1e-5, 0.1);
        for (yi, xi) in y.to_vec().iter().zip(x.to_vec()) {
            assert!((yi - xi).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let x = Tensor::<f64>::full(&[3, 2, 2], 7.0);
        let g = Tensor::full(&[2], 1.5);
        let b = Tensor::from_vec(&[2], vec![0.25, -0.5]);
        let y = batchnorm(&x, &g, &b, &stats(2), BatchNormMode::Train, 1e-5, 0.1);
        let yv = y.to_vec();
        for nb in 0..3 {
            for ch in 0..2 {
                for s in 0..2 {
                    let expect = if ch == 0 { 0.25 } else { -0.5 };
                    assert!((yv[(nb * 2 + ch) * 2 + s] - expect).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let rs = stats(1);
        rs.mean.set_data(vec![2.0]);
        rs.var.set_data(vec![4.0]);
        let x = Tensor::<f64>::from_vec(&[1, 1, 1], vec![4.0]);
        let g = Tensor::full(&[1], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = batchnorm(&x, &g, &b, &rs, BatchNormMode::Eval, 0.0, 0.1);
        assert!((y.to_vec()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "zero-size batch")]
    fn zero_batch_panics() {
        let x = Tensor::<f64>::zeros(&[0, 1, 1]);
        let g = Tensor::full(&[1], 1.0);
        let b = Tensor::zeros(&[1]);
        let _ = batchnorm(&x, &g, &b, &stats(1), BatchNormMode::Train, 1e-5, 0.1);
    }
}
