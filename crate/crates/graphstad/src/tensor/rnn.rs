//! Recurrent layers built from the differentiable primitives, so gradients
//! through time fall out of the tape.

use super::{
    add, fc, index0, matmul, mul, narrow_last, sigmoid, stack0, sub, tanh_op, Scalar, Tensor,
};

/// One LSTM layer: `w_ih [F,4H]`, `w_hh [H,4H]`, `b [4H]`, gate order i,f,g,o.
pub struct LstmParams<S: Scalar> {
    pub w_ih: Tensor<S>,
    pub w_hh: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> LstmParams<S> {
    pub fn hidden_size(&self) -> usize {
        self.w_hh.shape()[0]
    }
}

/// Standard LSTM recurrence over `seq [T,B,F]` with zero initial state.
/// Returns the full hidden sequence `[T,B,H]`.
pub fn lstm_layer<S: Scalar>(seq: &Tensor<S>, params: &LstmParams<S>) -> Tensor<S> {
    assert_eq!(seq.shape().len(), 3, "op `lstm`: input must be [T,B,F]");
    let (t_len, batch, feat) = (seq.shape()[0], seq.shape()[1], seq.shape()[2]);
    assert!(t_len >= 1, "op `lstm`: empty sequence");
    let h_size = params.hidden_size();
    assert_eq!(params.w_ih.shape(), &[feat, 4 * h_size], "op `lstm`: w_ih shape");
    assert_eq!(params.w_hh.shape(), &[h_size, 4 * h_size], "op `lstm`: w_hh shape");

    let mut h = Tensor::zeros(&[batch, h_size]);
    let mut c = Tensor::zeros(&[batch, h_size]);
    let mut outputs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x_t = index0(seq, t);
        let pre = add(&fc(&x_t, &params.w_ih, &params.b), &matmul(&h, &params.w_hh));
        let i_g = sigmoid(&narrow_last(&pre, 0, h_size));
        let f_g = sigmoid(&narrow_last(&pre, h_size, h_size));
        let g_g = tanh_op(&narrow_last(&pre, 2 * h_size, h_size));
        let o_g = sigmoid(&narrow_last(&pre, 3 * h_size, h_size));
        c = add(&mul(&f_g, &c), &mul(&i_g, &g_g));
        h = mul(&o_g, &tanh_op(&c));
        outputs.push(h.clone());
    }
    stack0(&outputs)
}

/// One GRU layer: `w_ih [F,3H]`, `w_hh [H,3H]`, separate input/hidden biases,
/// gate order r,z,n.
pub struct GruParams<S: Scalar> {
    pub w_ih: Tensor<S>,
    pub w_hh: Tensor<S>,
    pub b_ih: Tensor<S>,
    pub b_hh: Tensor<S>,
}

impl<S: Scalar> GruParams<S> {
    pub fn hidden_size(&self) -> usize {
        self.w_hh.shape()[0]
    }
}

/// Standard GRU recurrence over `seq [T,B,F]` with zero initial state.
pub fn gru_layer<S: Scalar>(seq: &Tensor<S>, params: &GruParams<S>) -> Tensor<S> {
    assert_eq!(seq.shape().len(), 3, "op `gru`: input must be [T,B,F]");
    let (t_len, batch, feat) = (seq.shape()[0], seq.shape()[1], seq.shape()[2]);
    assert!(t_len >= 1, "op `gru`: empty sequence");
    let h_size = params.hidden_size();
    assert_eq!(params.w_ih.shape(), &[feat, 3 * h_size], "op `gru`: w_ih shape");
    assert_eq!(params.w_hh.shape(), &[h_size, 3 * h_size], "op `gru`: w_hh shape");

    let mut h = Tensor::zeros(&[batch, h_size]);
    let mut outputs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x_t = index0(seq, t);
        let gi = fc(&x_t, &params.w_ih, &params.b_ih);
        let gh = fc(&h, &params.w_hh, &params.b_hh);
        let r = sigmoid(&add(
            &narrow_last(&gi, 0, h_size),
            &narrow_last(&gh, 0, h_size),
        ));
        let z = sigmoid(&add(
            &narrow_last(&gi, h_size, h_size),
            &narrow_last(&gh, h_size, h_size),
        ));
        let n = tanh_op(&add(
            &narrow_last(&gi, 2 * h_size, h_size),
            &mul(&r, &narrow_last(&gh, 2 * h_size, h_size)),
        ));
        // h' = (1-z) * n + z * h
        h = add(&sub(&n, &mul(&z, &n)), &mul(&z, &h));
        outputs.push(h.clone());
    }
    stack0(&outputs)
}
