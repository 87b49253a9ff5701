//! Plain dense row-major `f64` arrays and the broadcasting helpers shared
//! by the differentiable ops.

use crate::error::{MmtError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(MmtError::shape(format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(MmtError::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(MmtError::shape(format!(
                    "shapes {a:?} and {b:?} are not broadcastable"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (right-aligned), zero on
/// broadcast axes.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = row_major_strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// True when `small` is a (possibly shorter) trailing block of `out`, so
/// broadcasting is plain tiling.
fn is_suffix_tile(small: &[usize], out: &[usize]) -> bool {
    let lead = out.len() - small.len();
    let first_real = small.iter().position(|&d| d != 1).unwrap_or(small.len());
    small[first_real..] == out[lead + first_real..]
}

/// Visits every output offset together with the matching input offset.
fn for_each_offset(out: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for dst in 0..n {
        f(dst, src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            src -= strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn broadcast_to(t: &Tensor, out: &[usize]) -> Tensor {
    if t.shape == out {
        return t.clone();
    }
    let n: usize = out.iter().product();
    if is_suffix_tile(&t.shape, out) {
        let data = t.data.iter().copied().cycle().take(n).collect();
        return Tensor::from_parts(out.to_vec(), data);
    }
    let strides = aligned_strides(&t.shape, out);
    let mut data = vec![0.0; n];
    for_each_offset(out, &strides, |dst, src| data[dst] = t.data[src]);
    Tensor::from_parts(out.to_vec(), data)
}

/// Sums `t` (shaped like a broadcast result) back down to `shape`.
pub(crate) fn reduce_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape == shape {
        return t.clone();
    }
    let m: usize = shape.iter().product();
    let mut data = vec![0.0; m];
    if is_suffix_tile(shape, &t.shape) {
        for chunk in t.data.chunks(m) {
            for (d, v) in data.iter_mut().zip(chunk) {
                *d += v;
            }
        }
    } else {
        let strides = aligned_strides(shape, &t.shape);
        for_each_offset(&t.shape, &strides, |src, dst| data[dst] += t.data[src]);
    }
    Tensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[4, 1, 3], &[5, 3]).unwrap(), vec![4, 5, 3]);
        assert_eq!(broadcast_shape(&[], &[2]).unwrap(), vec![2]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn broadcast_and_reduce_are_adjoint() {
        let t = Tensor::new(vec![2, 1, 3], (0..6).map(f64::from).collect()).unwrap();
        let out = [4, 2, 5, 3];
        let b = broadcast_to(&t, &out);
        assert_eq!(b.shape(), &out);
        // every output element at [i, j, k, l] equals t[j, 0, l]
        assert_eq!(b.data()[30 + 15 + 4 * 3 + 2], t.data()[3 + 2]);
        let r = reduce_to(&b, t.shape());
        for (x, y) in r.data().iter().zip(t.data()) {
            assert_eq!(*x, y * 20.0);
        }
    }

    #[test]
    fn suffix_tile_detection() {
        assert!(is_suffix_tile(&[3], &[2, 3]));
        assert!(is_suffix_tile(&[1, 3], &[2, 3]));
        assert!(!is_suffix_tile(&[2, 1], &[2, 3]));
    }
}
