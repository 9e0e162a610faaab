//! Elementwise and structural arithmetic.

use super::{as_rows, OpBackward, Tape, Var};
use crate::scalar::Scalar;
use ndarray::{ArrayD, Axis, IxDyn};

struct AddOp;

impl<T: Scalar> OpBackward<T> for AddOp {
    fn backward(
        &self,
        _out: &ArrayD<T>,
        g: &ArrayD<T>,
        _parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

struct ScaleOp<T>(T);

impl<T: Scalar> OpBackward<T> for ScaleOp<T> {
    fn backward(
        &self,
        _out: &ArrayD<T>,
        g: &ArrayD<T>,
        _parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        vec![Some(g.mapv(|v| v * self.0))]
    }
}

struct MulOp;

impl<T: Scalar> OpBackward<T> for MulOp {
    fn backward(
        &self,
        _out: &ArrayD<T>,
        g: &ArrayD<T>,
        parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        vec![Some(g * parents[1]), Some(g * parents[0])]
    }
}

/// Adds a per-channel bias over the last axis.
struct AddBiasOp;

impl<T: Scalar> OpBackward<T> for AddBiasOp {
    fn backward(
        &self,
        _out: &ArrayD<T>,
        g: &ArrayD<T>,
        _parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let rows = as_rows(g);
        let c = rows.ncols();
        let mut db = ArrayD::<T>::zeros(IxDyn(&[c]));
        {
            let db = db.as_slice_mut().expect("contiguous");
            for row in rows.rows() {
                for (acc, &v) in db.iter_mut().zip(row.iter()) {
                    *acc += v;
                }
            }
        }
        vec![Some(g.clone()), Some(db)]
    }
}

/// `a + tile(b)` where `a` is `t` copies of `b` along the flattened front.
struct AddTiledOp;

impl<T: Scalar> OpBackward<T> for AddTiledOp {
    fn backward(
        &self,
        _out: &ArrayD<T>,
        g: &ArrayD<T>,
        parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let b = parents[1];
        let mut db = ArrayD::<T>::zeros(b.raw_dim());
        {
            let dst = db.as_slice_mut().expect("contiguous");
            let src = g.as_slice().expect("contiguous");
            for chunk in src.chunks_exact(dst.len()) {
                for (acc, &v) in dst.iter_mut().zip(chunk.iter()) {
                    *acc += v;
                }
            }
        }
        vec![Some(g.clone()), Some(db)]
    }
}

struct ConcatLastOp {
    widths: Vec<usize>,
}

impl<T: Scalar> OpBackward<T> for ConcatLastOp {
    fn backward(
        &self,
        _out: &ArrayD<T>,
        g: &ArrayD<T>,
        parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let rows = as_rows(g);
        let mut offset = 0usize;
        let mut grads = Vec::with_capacity(self.widths.len());
        for (w, p) in self.widths.iter().zip(parents.iter()) {
            let mut dp = ArrayD::<T>::zeros(p.raw_dim());
            {
                let mut dst = super::as_rows_mut(&mut dp);
                dst.assign(&rows.slice(ndarray::s![.., offset..offset + w]));
            }
            grads.push(Some(dp));
            offset += w;
        }
        grads
    }
}

struct SliceLastOp {
    from: usize,
    full_width: usize,
}

impl<T: Scalar> OpBackward<T> for SliceLastOp {
    fn backward(
        &self,
        out: &ArrayD<T>,
        g: &ArrayD<T>,
        parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let w = *out.shape().last().expect("non-scalar");
        let _ = self.full_width;
        let mut dp = ArrayD::<T>::zeros(parents[0].raw_dim());
        {
            let mut dst = super::as_rows_mut(&mut dp);
            let mut view = dst.slice_mut(ndarray::s![.., self.from..self.from + w]);
            view.assign(&as_rows(g));
        }
        vec![Some(dp)]
    }
}

/// Fixed-weight contraction to a scalar: `out = Σ x ⊙ w`.
struct WeightedSumOp<T> {
    weights: ArrayD<T>,
}

impl<T: Scalar> OpBackward<T> for WeightedSumOp<T> {
    fn backward(
        &self,
        _out: &ArrayD<T>,
        g: &ArrayD<T>,
        _parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let gs = *g.first().expect("scalar grad");
        vec![Some(self.weights.mapv(|w| w * gs))]
    }
}

/// `out = Σ cᵢ·xᵢ` over scalar nodes.
struct LinearCombinationOp<T> {
    coefs: Vec<T>,
}

impl<T: Scalar> OpBackward<T> for LinearCombinationOp<T> {
    fn backward(
        &self,
        _out: &ArrayD<T>,
        g: &ArrayD<T>,
        _parents: &[&ArrayD<T>],
    ) -> Vec<Option<ArrayD<T>>> {
        let gs = *g.first().expect("scalar grad");
        self.coefs
            .iter()
            .map(|&c| Some(ArrayD::from_elem(IxDyn(&[]), c * gs)))
            .collect()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "add: shape mismatch"
        );
        let value = self.value(a) + self.value(b);
        self.push_op(value, vec![a, b], AddOp)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "mul: shape mismatch"
        );
        let value = self.value(a) * self.value(b);
        self.push_op(value, vec![a, b], MulOp)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).mapv(|v| v * c);
        self.push_op(value, vec![x], ScaleOp(c))
    }

    /// `x + b` broadcasting `b` over all leading axes ( `b` is 1-d, length =
    /// last axis of `x`).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let c = *self.value(x).shape().last().expect("non-scalar");
        assert_eq!(self.value(b).shape(), [c], "add_bias: width mismatch");
        let mut value = self.value(x).clone();
        {
            let bias = self.value(b).as_slice().expect("contiguous");
            let mut rows = super::as_rows_mut(&mut value);
            for mut row in rows.rows_mut() {
                for (v, &bv) in row.iter_mut().zip(bias.iter()) {
                    *v += bv;
                }
            }
        }
        self.push_op(value, vec![x, b], AddBiasOp)
    }

    /// `a + tile(b)`: flattened `a` must be an exact multiple of flattened `b`.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Var {
        let an = self.value(a).len();
        let bn = self.value(b).len();
        assert!(bn > 0 && an % bn == 0, "add_tiled: {an} not a multiple of {bn}");
        let mut value = self.value(a).clone();
        {
            let dst = value.as_slice_mut().expect("contiguous");
            let src = self.value(b).as_slice().expect("contiguous");
            for chunk in dst.chunks_exact_mut(bn) {
                for (v, &s) in chunk.iter_mut().zip(src.iter()) {
                    *v += s;
                }
            }
        }
        self.push_op(value, vec![a, b], AddTiledOp)
    }

    /// Concatenate along the last (channel) axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let lead = self.value(parts[0]).shape()[..self.value(parts[0]).ndim() - 1].to_vec();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.value(p).shape();
                assert_eq!(&s[..s.len() - 1], &lead[..], "concat_last: leading dims differ");
                s[s.len() - 1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out_shape = lead.clone();
        out_shape.push(total);
        let rows: usize = lead.iter().product();
        let mut value = ArrayD::<T>::zeros(IxDyn(&out_shape));
        {
            let dst = value.as_slice_mut().expect("contiguous");
            for r in 0..rows {
                let mut offset = 0usize;
                for (&p, &w) in parts.iter().zip(widths.iter()) {
                    let src = self.value(p).as_slice().expect("contiguous");
                    dst[r * total + offset..r * total + offset + w]
                        .copy_from_slice(&src[r * w..(r + 1) * w]);
                    offset += w;
                }
            }
        }
        self.push_op(value, parts.to_vec(), ConcatLastOp { widths })
    }

    /// Slice `[from, to)` of the last axis.
    pub fn slice_last(&mut self, x: Var, from: usize, to: usize) -> Var {
        let full = *self.value(x).shape().last().expect("non-scalar");
        assert!(from < to && to <= full, "slice_last: bad range");
        let mut out_shape = self.value(x).shape().to_vec();
        *out_shape.last_mut().unwrap() = to - from;
        let mut value = ArrayD::<T>::zeros(IxDyn(&out_shape));
        {
            let src = as_rows(self.value(x));
            let mut dst = super::as_rows_mut(&mut value);
            dst.assign(&src.slice(ndarray::s![.., from..to]));
        }
        self.push_op(
            value,
            vec![x],
            SliceLastOp {
                from,
                full_width: full,
            },
        )
    }

    /// Contract to a 0-dim scalar with fixed weights (used by grad checks).
    pub fn weighted_sum(&mut self, x: Var, weights: ArrayD<T>) -> Var {
        assert_eq!(self.value(x).shape(), weights.shape());
        let s: T = self
            .value(x)
            .iter()
            .zip(weights.iter())
            .map(|(&a, &w)| a * w)
            .sum();
        let value = ArrayD::from_elem(IxDyn(&[]), s);
        self.push_op(value, vec![x], WeightedSumOp { weights })
    }

    /// Weighted sum of scalar (0-dim) nodes.
    pub fn linear_combination(&mut self, terms: &[(T, Var)]) -> Var {
        assert!(!terms.is_empty());
        let mut s = T::zero();
        for &(c, v) in terms {
            s = s + c * self.scalar(v);
        }
        let value = ArrayD::from_elem(IxDyn(&[]), s);
        let coefs = terms.iter().map(|&(c, _)| c).collect();
        let vars = terms.iter().map(|&(_, v)| v).collect();
        self.push_op(value, vars, LinearCombinationOp { coefs })
    }

    /// Mean over all elements, as a 0-dim node.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let w = T::one() / T::cast_usize(n);
        let weights = ArrayD::from_elem(self.value(x).raw_dim(), w);
        self.weighted_sum(x, weights)
    }

}

/// Stack per-sample arrays along a new leading batch axis.
pub fn stack_batch<T: Scalar>(arrays: &[ArrayD<T>]) -> ArrayD<T> {
    assert!(!arrays.is_empty());
    let views: Vec<_> = arrays.iter().map(|a| a.view()).collect();
    let stacked = ndarray::stack(Axis(0), &views).expect("uniform shapes");
    if stacked.is_standard_layout() {
        stacked
    } else {
        stacked.as_standard_layout().to_owned()
    }
}
