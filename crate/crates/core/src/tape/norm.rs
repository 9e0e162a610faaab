//! Batch and layer normalization.

use super::{as_rows, as_rows_mut, OpBackward, Tape, Var};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};

/// Per-channel batch statistics over all leading axes.
pub(crate) fn channel_stats<T: Scalar>(x: &ArrayD<T>) -> (Vec<T>, Vec<T>) {
    let rows = as_rows(x);
    let c = rows.ncols();
    let n = rows.nrows();
    let inv_n = T::one() / T::cast_usize(n);
    let mut mean = vec![T::zero(); c];
    for row in rows.rows() {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m *= inv_n;
    }
    let mut var = vec![T::zero(); c];
    for row in rows.rows() {
        for ((vv, &v), &m) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
            let d = v - m;
            *vv += d * d;
        }
    }
    for v in &mut var {
        *v *= inv_n;
    }
    (mean, var)
}

/// Training-mode batch norm: statistics from the current batch.
struct BatchNormTrainOp<T> {
    eps: T,
}

impl<T: Scalar> OpBackward<T> for BatchNormTrainOp<T> {
    fn backward(
        &self,
        _out: &ArrayD<T>,
        g: &ArrayD<T>,
        parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let x = parents[0];
        let gamma = parents[1].as_slice().expect("contiguous");
        let (mean, var) = channel_stats(x);
        let c = gamma.len();
        let rows = as_rows(x);
        let grows = as_rows(g);
        let n = rows.nrows();
        let inv_n = T::one() / T::cast_usize(n);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.eps).sqrt()).collect();

        // Accumulate per-channel sums of dxh and dxh*xh.
        let mut sum_dxh = vec![T::zero(); c];
        let mut sum_dxh_xh = vec![T::zero(); c];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for (xrow, grow) in rows.rows().into_iter().zip(grows.rows()) {
            for ch in 0..c {
                let xh = (xrow[ch] - mean[ch]) * inv_std[ch];
                let dxh = grow[ch] * gamma[ch];
                sum_dxh[ch] += dxh;
                sum_dxh_xh[ch] += dxh * xh;
                dgamma[ch] += grow[ch] * xh;
                dbeta[ch] += grow[ch];
            }
        }
        let mut dx = ArrayD::<T>::zeros(x.raw_dim());
        {
            let mut dxv = as_rows_mut(&mut dx);
            for ((xrow, grow), mut drow) in
                rows.rows().into_iter().zip(grows.rows()).zip(dxv.rows_mut())
            {
                for ch in 0..c {
                    let xh = (xrow[ch] - mean[ch]) * inv_std[ch];
                    let dxh = grow[ch] * gamma[ch];
                    drow[ch] = inv_std[ch]
                        * (dxh - inv_n * sum_dxh[ch] - xh * inv_n * sum_dxh_xh[ch]);
                }
            }
        }
        let dgamma = ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap();
        let dbeta = ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap();
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    }
}

/// Inference-mode batch norm: fixed statistics, a plain affine map.
struct BatchNormEvalOp<T> {
    eps: T,
    mean: Vec<T>,
    var: Vec<T>,
}

impl<T: Scalar> OpBackward<T> for BatchNormEvalOp<T> {
    fn backward(
        &self,
        _out: &ArrayD<T>,
        g: &ArrayD<T>,
        parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let x = parents[0];
        let gamma = parents[1].as_slice().expect("contiguous");
        let c = gamma.len();
        let inv_std: Vec<T> = self
            .var
            .iter()
            .map(|&v| T::one() / (v + self.eps).sqrt())
            .collect();
        let rows = as_rows(x);
        let grows = as_rows(g);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for (xrow, grow) in rows.rows().into_iter().zip(grows.rows()) {
            for ch in 0..c {
                let xh = (xrow[ch] - self.mean[ch]) * inv_std[ch];
                dgamma[ch] += grow[ch] * xh;
                dbeta[ch] += grow[ch];
            }
        }
        let mut dx = ArrayD::<T>::zeros(x.raw_dim());
        {
            let mut dxv = as_rows_mut(&mut dx);
            for (grow, mut drow) in grows.rows().into_iter().zip(dxv.rows_mut()) {
                for ch in 0..c {
                    drow[ch] = grow[ch] * gamma[ch] * inv_std[ch];
                }
            }
        }
        let dgamma = ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap();
        let dbeta = ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap();
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    }
}

struct LayerNormOp<T> {
    eps: T,
}

impl<T: Scalar> OpBackward<T> for LayerNormOp<T> {
    fn backward(
        &self,
        _out: &ArrayD<T>,
        g: &ArrayD<T>,
        parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let x = parents[0];
        let gamma = parents[1].as_slice().expect("contiguous");
        let c = gamma.len();
        let inv_c = T::one() / T::cast_usize(c);
        let rows = as_rows(x);
        let grows = as_rows(g);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = ArrayD::<T>::zeros(x.raw_dim());
        {
            let mut dxv = as_rows_mut(&mut dx);
            for ((xrow, grow), mut drow) in
                rows.rows().into_iter().zip(grows.rows()).zip(dxv.rows_mut())
            {
                let mut mean = T::zero();
                for &v in xrow.iter() {
                    mean += v;
                }
                mean *= inv_c;
                let mut var = T::zero();
                for &v in xrow.iter() {
                    let d = v - mean;
                    var += d * d;
                }
                var *= inv_c;
                let inv_std = T::one() / (var + self.eps).sqrt();
                let mut sum_dxh = T::zero();
                let mut sum_dxh_xh = T::zero();
                for ch in 0..c {
                    let xh = (xrow[ch] - mean) * inv_std;
                    let dxh = grow[ch] * gamma[ch];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                    dgamma[ch] += grow[ch] * xh;
                    dbeta[ch] += grow[ch];
                }
                for ch in 0..c {
                    let xh = (xrow[ch] - mean) * inv_std;
                    let dxh = grow[ch] * gamma[ch];
                    drow[ch] =
                        inv_std * (dxh - inv_c * sum_dxh - xh * inv_c * sum_dxh_xh);
                }
            }
        }
        let dgamma = ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap();
        let dbeta = ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap();
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    }
}

impl<T: Scalar> Tape<T> {
    /// Batch normalization using statistics of the current batch. Returns the
    /// normalized node; the batch statistics are returned so the caller can
    /// maintain running averages.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> (Var, Vec<T>, Vec<T>) {
        let (mean, var) = channel_stats(self.value(x));
        let gamma_v = self.value(gamma).as_slice().expect("contiguous").to_vec();
        let beta_v = self.value(beta).as_slice().expect("contiguous").to_vec();
        let value = bn_apply(self.value(x), &mean, &var, &gamma_v, &beta_v, eps);
        let y = self.push_op(value, vec![x, gamma, beta], BatchNormTrainOp { eps });
        (y, mean, var)
    }

    /// Batch normalization with frozen statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
    ) -> Var {
        let gamma_v = self.value(gamma).as_slice().expect("contiguous").to_vec();
        let beta_v = self.value(beta).as_slice().expect("contiguous").to_vec();
        let value = bn_apply(self.value(x), &mean, &var, &gamma_v, &beta_v, eps);
        self.push_op(value, vec![x, gamma, beta], BatchNormEvalOp { eps, mean, var })
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let gamma_v = self.value(gamma).as_slice().expect("contiguous").to_vec();
        let beta_v = self.value(beta).as_slice().expect("contiguous").to_vec();
        let c = gamma_v.len();
        assert_eq!(*self.value(x).shape().last().unwrap(), c);
        let inv_c = T::one() / T::cast_usize(c);
        let mut value = self.value(x).clone();
        {
            let mut rows = as_rows_mut(&mut value);
            for mut row in rows.rows_mut() {
                let mut mean = T::zero();
                for &v in row.iter() {
                    mean += v;
                }
                mean *= inv_c;
                let mut var = T::zero();
                for &v in row.iter() {
                    let d = v - mean;
                    var += d * d;
                }
                var *= inv_c;
                let inv_std = T::one() / (var + eps).sqrt();
                for (ch, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean) * inv_std * gamma_v[ch] + beta_v[ch];
                }
            }
        }
        self.push_op(value, vec![x, gamma, beta], LayerNormOp { eps })
    }
}

fn bn_apply<T: Scalar>(
    x: &ArrayD<T>,
    mean: &[T],
    var: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> ArrayD<T> {
    let c = gamma.len();
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = x.clone();
    {
        let mut rows = as_rows_mut(&mut out);
        for mut row in rows.rows_mut() {
            for ch in 0..c {
                row[ch] = (row[ch] - mean[ch]) * inv_std[ch] * gamma[ch] + beta[ch];
            }
        }
    }
    out
}
