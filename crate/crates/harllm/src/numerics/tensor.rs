//! Dense row-major tensors, generic over the training float width.

use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Float width the model stack runs at. f32 for training, f64 for
/// gradient checks.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    const DTYPE: &'static str;
    fn cast_from(x: f64) -> Self;
    fn cast_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "F32";
    fn cast_from(x: f64) -> Self {
        x as f32
    }
    fn cast_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "F64";
    fn cast_from(x: f64) -> Self {
        x
    }
    fn cast_f64(self) -> f64 {
        self
    }
}

/// Contiguous row-major tensor. Rank 0 (empty shape) holds one scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    /// Normal(mean, std) entries drawn in f64 then narrowed, so a given
    /// seed produces the same parameters at both float widths.
    pub fn randn<R: Rng>(shape: &[usize], mean: f64, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(mean, std).expect("std must be finite and non-negative");
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::cast_from(dist.sample(rng)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::cast_from(rng.gen_range(lo..hi)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.rank());
        let s = strides(&self.shape);
        let off: usize = index.iter().zip(&s).map(|(i, st)| i * st).sum();
        self.data[off]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_in_place(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_in_place", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, c: T) {
        for a in self.data.iter_mut() {
            *a = *a * c;
        }
    }

    /// Reorders axes so that output axis `d` is input axis `perm[d]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        if perm.len() != rank {
            return Err(Error::shape("permute", &self.shape, perm));
        }
        let mut seen = vec![false; rank];
        for &p in perm {
            if p >= rank || seen[p] {
                return Err(Error::shape("permute", &self.shape, perm));
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let out_strides = strides(&out_shape);
        let mut inv = vec![0usize; rank];
        for (d, &p) in perm.iter().enumerate() {
            inv[p] = d;
        }
        // Effective output stride for each input axis, walked in input order.
        let eff: Vec<usize> = (0..rank).map(|e| out_strides[inv[e]]).collect();
        let mut out = vec![T::zero(); self.data.len()];
        let ident = strides(&self.shape);
        for_each_2(&self.shape, &ident, &eff, |src, dst| {
            out[dst] = self.data[src];
        });
        Tensor::new(out_shape, out)
    }

    pub fn transpose_last2(&self) -> Result<Self> {
        let rank = self.rank();
        if rank < 2 {
            return Err(Error::shape("transpose_last2", &self.shape, &[]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permuted(&perm)
    }

    pub fn validate_finite(&self, what: &str) -> Result<()> {
        for &v in &self.data {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite value {v} in {what} (shape {:?})",
                    self.shape
                )));
            }
        }
        Ok(())
    }
}

/// Row-major strides; a size-0 rank yields an empty vector.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Shape of `a (op) b` under trailing-aligned broadcasting; each aligned pair
/// of dims must match or one must be 1.
pub fn broadcast_shape(a: &[usize], b: &[usize], op: &str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let da = if d + a.len() >= rank { a[d + a.len() - rank] } else { 1 };
        let db = if d + b.len() >= rank { b[d + b.len() - rank] } else { 1 };
        if da == db || da == 1 || db == 1 {
            out[d] = da.max(db);
        } else {
            return Err(Error::shape(op, a, b));
        }
    }
    Ok(out)
}

/// Per-output-axis element strides into an input of `in_shape`, trailing
/// aligned; broadcast axes get stride 0.
pub(crate) fn bcast_strides(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let s = strides(in_shape);
    let off = out_shape.len() - in_shape.len();
    let mut eff = vec![0usize; out_shape.len()];
    for d in 0..in_shape.len() {
        if in_shape[d] != 1 {
            eff[off + d] = s[d];
        }
    }
    eff
}

/// Walks `shape` in row-major order, handing the closure offsets computed
/// from two effective stride vectors.
pub(crate) fn for_each_2(
    shape: &[usize],
    ea: &[usize],
    eb: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        f(oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += ea[d];
            ob += eb[d];
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= ea[d] * shape[d];
            ob -= eb[d] * shape[d];
        }
    }
}

/// Sums `t` down to `target` (which must broadcast to `t.shape`), the
/// adjoint of broadcasting.
pub(crate) fn reduce_to_shape<T: Scalar>(t: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if t.shape() == target {
        return t.clone();
    }
    let mut out = Tensor::zeros(target);
    let ident = strides(t.shape());
    let eff = bcast_strides(t.shape(), target);
    let out_data = out.data_mut();
    for_each_2(t.shape(), &ident, &eff, |src, dst| {
        out_data[dst] = out_data[dst] + t.data()[src];
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
        assert!(strides(&[]).is_empty());
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3], "t").unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1], "t").unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[], &[2, 2], "t").unwrap(), vec![2, 2]);
        assert!(broadcast_shape(&[2, 3], &[4], "t").is_err());
    }

    #[test]
    fn permute_round_trip() {
        let t = Tensor::<f64>::new(vec![2, 3], (0..6).map(|x| x as f64).collect()).unwrap();
        let p = t.permuted(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.at(&[2, 1]), t.at(&[1, 2]));
        let back = p.permuted(&[1, 0]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn permute_3d_matches_indexing() {
        let t = Tensor::<f64>::new(vec![2, 3, 4], (0..24).map(|x| x as f64).collect()).unwrap();
        let p = t.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(p.at(&[k, i, j]), t.at(&[i, j, k]));
                }
            }
        }
    }

    #[test]
    fn reduce_sums_broadcast_axes() {
        let t = Tensor::<f64>::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let r = reduce_to_shape(&t, &[3]);
        assert_eq!(r.data(), &[5., 7., 9.]);
        let r2 = reduce_to_shape(&t, &[2, 1]);
        assert_eq!(r2.data(), &[6., 15.]);
        let r3 = reduce_to_shape(&t, &[]);
        assert_eq!(r3.data(), &[21.]);
    }

    #[test]
    fn finite_validation_catches_nan() {
        let mut t = Tensor::<f32>::zeros(&[2, 2]);
        t.data_mut()[3] = f32::NAN;
        assert!(t.validate_finite("x").is_err());
    }

    #[test]
    fn randn_same_seed_same_draws_across_widths() {
        use rand_chacha::rand_core::SeedableRng;
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f32>::randn(&[16], 0.0, 0.02, &mut r1);
        let b = Tensor::<f64>::randn(&[16], 0.0, 0.02, &mut r2);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
