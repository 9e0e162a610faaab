//! Pointwise activations and row softmax.

use super::{as_rows, as_rows_mut, OpBackward, Tape, Var};
use crate::scalar::Scalar;
use ndarray::ArrayD;

// Tanh-form gaussian error linear unit. The same closed form is used for the
// forward value and the analytic derivative so gradient checks are exact up
// to floating point error.
fn gelu_val<T: Scalar>(x: T) -> T {
    let c = T::cast(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::cast(0.044_715);
    let half = T::cast(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::cast(0.797_884_560_802_865_4);
    let a = T::cast(0.044_715);
    let half = T::cast(0.5);
    let three = T::cast(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

struct GeluOp;

impl<T: Scalar> OpBackward<T> for GeluOp {
    fn backward(
        &self,
        _out: &ArrayD<T>,
        g: &ArrayD<T>,
        parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let mut dx = parents[0].mapv(gelu_grad);
        dx *= g;
        vec![Some(dx)]
    }
}

struct SigmoidOp;

impl<T: Scalar> OpBackward<T> for SigmoidOp {
    fn backward(
        &self,
        out: &ArrayD<T>,
        g: &ArrayD<T>,
        _parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let mut dx = out.mapv(|y| y * (T::one() - y));
        dx *= g;
        vec![Some(dx)]
    }
}

struct SoftmaxOp;

impl<T: Scalar> OpBackward<T> for SoftmaxOp {
    fn backward(
        &self,
        out: &ArrayD<T>,
        g: &ArrayD<T>,
        _parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let y = as_rows(out);
        let gv = as_rows(g);
        let mut dx = ArrayD::<T>::zeros(out.raw_dim());
        {
            let mut dxv = as_rows_mut(&mut dx);
            for ((yrow, grow), mut drow) in
                y.rows().into_iter().zip(gv.rows()).zip(dxv.rows_mut())
            {
                let dot: T = yrow.iter().zip(grow.iter()).map(|(&a, &b)| a * b).sum();
                for ((d, &yv), &gvv) in drow.iter_mut().zip(yrow.iter()).zip(grow.iter()) {
                    *d = yv * (gvv - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

impl<T: Scalar> Tape<T> {
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu_val);
        self.push_op(value, vec![x], GeluOp)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .mapv(|v| T::one() / (T::one() + (-v).exp()));
        self.push_op(value, vec![x], SigmoidOp)
    }

    /// Softmax over the last axis, with the usual max-subtraction.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        {
            let mut rows = as_rows_mut(&mut value);
            for mut row in rows.rows_mut() {
                let mut mx = row[0];
                for &v in row.iter() {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut z = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v = *v / z;
                }
            }
        }
        self.push_op(value, vec![x], SoftmaxOp)
    }
}
