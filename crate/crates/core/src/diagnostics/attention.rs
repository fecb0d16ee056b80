//! Single-head softmax self-attention, kept only as a cost and timing
//! baseline for the conv module.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::nn::trunc_normal;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Projection matrices stored `(d_out, d_in)`, no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention<T> {
    pub d: usize,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput<T> {
    /// `N × d` tokens, row-major.
    pub out: Vec<T>,
    /// `N × N` softmax weights, row-major.
    pub weights: Vec<T>,
    /// Multiply-accumulates actually issued.
    pub macs: u64,
}

impl<T: Scalar> SelfAttention<T> {
    pub fn random<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let mut m = || trunc_normal(Shape::new(d, d, 1, 1), std, rng);
        Self {
            d,
            wq: m(),
            wk: m(),
            wv: m(),
            wo: m(),
        }
    }

    /// `out[i] += Σ_k a[i,k]·b[k,j]` with optional transposition of `b`;
    /// returns the MACs issued.
    #[allow(clippy::too_many_arguments)]
    fn matmul(m: usize, k: usize, n: usize, a: &[T], b: &[T], b_transposed: bool, c: &mut [T]) -> u64 {
        let b_strides = if b_transposed {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        T::gemm(m, k, n, T::one(), a, (k as isize, 1), b, b_strides, T::zero(), c, (n as isize, 1));
        (m * k * n) as u64
    }

    /// Applies attention to `tokens` rows of width `d`.
    pub fn forward(&self, x: &[T], tokens: usize) -> Result<AttentionOutput<T>> {
        let d = self.d;
        if tokens == 0 || x.len() != tokens * d {
            return dim_err(format!("attention input of {} values is not {tokens} x {d}", x.len()));
        }
        let mut macs = 0;
        let mut proj = |w: &Tensor<T>| {
            let mut out = vec![T::zero(); tokens * d];
            macs += Self::matmul(tokens, d, d, x, w.data(), true, &mut out);
            out
        };
        let (q, k, v) = (proj(&self.wq), proj(&self.wk), proj(&self.wv));

        let mut logits = vec![T::zero(); tokens * tokens];
        macs += Self::matmul(tokens, d, tokens, &q, &k, true, &mut logits);
        let scale = T::one() / T::of_usize(d).sqrt();
        for row in logits.chunks_exact_mut(tokens) {
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut total = T::zero();
            for l in row.iter_mut() {
                *l = ((*l - max) * scale).exp();
                total += *l;
            }
            for l in row.iter_mut() {
                *l /= total;
            }
        }
        let mut mixed = vec![T::zero(); tokens * d];
        macs += Self::matmul(tokens, tokens, d, &logits, &v, false, &mut mixed);
        let mut out = vec![T::zero(); tokens * d];
        macs += Self::matmul(tokens, d, d, &mixed, self.wo.data(), true, &mut out);
        Ok(AttentionOutput {
            out,
            weights: logits,
            macs,
        })
    }
}
