//! Fused segmentation losses with analytic gradients.

use super::{OpBackward, Tape, Var};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use std::sync::Arc;

/// Clamp bound for the cross-entropy logs.
pub const BCE_EPS: f64 = 1e-7;
/// Additive smoothing of the soft intersection-over-union ratio.
pub const IOU_EPS: f64 = 1.0;

struct BceOp<T: Scalar> {
    target: Arc<ArrayD<T>>,
}

impl<T: Scalar> OpBackward<T> for BceOp<T> {
    fn backward(
        &self,
        _out: &ArrayD<T>,
        g: &ArrayD<T>,
        parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let gs = *g.first().expect("scalar grad");
        let p = parents[0];
        let eps = T::cast(BCE_EPS);
        let hi = T::one() - eps;
        let inv_n = T::one() / T::cast_usize(p.len());
        let mut dp = ArrayD::<T>::zeros(p.raw_dim());
        {
            let dps = dp.as_slice_mut().expect("contiguous");
            let ps = p.as_slice().expect("contiguous");
            let ts = self.target.as_slice().expect("contiguous");
            for ((d, &pv), &tv) in dps.iter_mut().zip(ps.iter()).zip(ts.iter()) {
                if pv <= eps || pv >= hi {
                    continue; // clamp active: zero slope
                }
                *d = gs * inv_n * ((T::one() - tv) / (T::one() - pv) - tv / pv);
            }
        }
        vec![Some(dp)]
    }
}

struct IouOp<T: Scalar> {
    target: Arc<ArrayD<T>>,
}

impl<T: Scalar> OpBackward<T> for IouOp<T> {
    fn backward(
        &self,
        _out: &ArrayD<T>,
        g: &ArrayD<T>,
        parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let gs = *g.first().expect("scalar grad");
        let p = parents[0];
        let eps = T::cast(IOU_EPS);
        let ps = p.as_slice().expect("contiguous");
        let ts = self.target.as_slice().expect("contiguous");
        let mut inter = eps;
        let mut union = eps;
        for (&pv, &tv) in ps.iter().zip(ts.iter()) {
            inter += pv * tv;
            union += pv + tv - pv * tv;
        }
        let inv_u2 = T::one() / (union * union);
        let mut dp = ArrayD::<T>::zeros(p.raw_dim());
        {
            let dps = dp.as_slice_mut().expect("contiguous");
            for (d, &tv) in dps.iter_mut().zip(ts.iter()) {
                // d/dp [1 - I/U] = -(t·U - I·(1-t)) / U²
                *d = gs * (-(tv * union - inter * (T::one() - tv)) * inv_u2);
            }
        }
        vec![Some(dp)]
    }
}

impl<T: Scalar> Tape<T> {
    /// Mean binary cross entropy of probabilities `p` against `target`,
    /// clamping `p` to `[1e-7, 1-1e-7]` before the logs.
    pub fn bce_loss(&mut self, p: Var, target: Arc<ArrayD<T>>) -> Var {
        assert_eq!(self.value(p).shape(), target.shape(), "bce: shape mismatch");
        let eps = T::cast(BCE_EPS);
        let hi = T::one() - eps;
        let mut acc = T::zero();
        for (&pv, &tv) in self.value(p).iter().zip(target.iter()) {
            let pc = pv.max(eps).min(hi);
            acc += -(tv * pc.ln() + (T::one() - tv) * (T::one() - pc).ln());
        }
        let value = ArrayD::from_elem(
            IxDyn(&[]),
            acc / T::cast_usize(target.len()),
        );
        self.push_op(value, vec![p], BceOp { target })
    }

    /// Soft intersection-over-union loss `1 − (Σp·g+1)/(Σ(p+g−p·g)+1)`.
    pub fn iou_loss(&mut self, p: Var, target: Arc<ArrayD<T>>) -> Var {
        assert_eq!(self.value(p).shape(), target.shape(), "iou: shape mismatch");
        let eps = T::cast(IOU_EPS);
        let mut inter = eps;
        let mut union = eps;
        for (&pv, &tv) in self.value(p).iter().zip(target.iter()) {
            inter += pv * tv;
            union += pv + tv - pv * tv;
        }
        let value = ArrayD::from_elem(IxDyn(&[]), T::one() - inter / union);
        self.push_op(value, vec![p], IouOp { target })
    }
}
