use thiserror::Error;

/// Errors raised by tensor construction, shape inference, and autodiff.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },
    #[error("index error in {op}: id {index} out of range [0, {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("parameter error in {op}: {msg}")]
    Parameter { op: &'static str, msg: String },
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("non-finite value ({value}) at flat index {index} in {context}")]
    NonFinite {
        context: String,
        index: usize,
        value: f64,
    },
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Dimension { op, msg: msg.into() }
    }

    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Contract { op, msg: msg.into() }
    }
}

/// Dense row-major array of `f64` values. This is the detached value type:
/// model parameters, mel frames, and posteriorgrams are all `Array`s, while
/// differentiable intermediates live on a [`Tape`](super::Tape).
///
/// Invariants: every dimension is positive, `data.len()` equals the shape
/// product, and construction via [`Array::new`] rejects non-finite values so
/// NaN/Inf surface as errors instead of propagating silently.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    /// Builds an array, validating shape/data agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::dim(
                "array",
                format!("shape must be non-empty with positive dims, got {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::dim(
                "array",
                format!("shape {shape:?} implies {numel} values, got {}", data.len()),
            ));
        }
        let arr = Array { shape, data };
        arr.check_finite("array construction")?;
        Ok(arr)
    }

    /// As [`Array::new`] but without the finiteness scan. Used internally for
    /// op outputs whose inputs were already validated.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Array { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Array::from_parts(shape, vec![0.0; numel])
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Array::from_parts(shape, vec![value; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Array::from_parts(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Interprets the array as a matrix, returning `(rows, cols)`.
    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::dim(
                "dims2",
                format!("expected rank-2 shape, got {other:?}"),
            )),
        }
    }

    /// Row `r` of a rank-2 array.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().expect("non-empty shape");
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Scans for NaN/Inf, reporting the first offender.
    pub fn check_finite(&self, context: &str) -> Result<(), TensorError> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite {
                    context: context.to_string(),
                    index: i,
                    value: v,
                });
            }
        }
        Ok(())
    }
}

/// Row-major matrix product `a[m,k] * b[k,n] -> c[m,n]` into `c` (overwrites).
/// The ikj loop order keeps the inner loop contiguous over both `b` and `c`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    c.fill(0.0);
    matmul_acc(a, b, c, m, k, n);
}

/// As `matmul_into` but accumulates into `c`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// Out-of-place 2-D transpose.
pub(crate) fn transpose_into(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_shape_data_mismatch() {
        let err = Array::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::Dimension { .. }));
    }

    #[test]
    fn rejects_zero_dim() {
        assert!(Array::new(vec![2, 0], vec![]).is_err());
        assert!(Array::new(vec![], vec![]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let err = Array::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { index: 1, .. }));
    }

    #[test]
    fn matmul_identity() {
        let id = [1.0, 0.0, 0.0, 1.0];
        let b = [3.0, 4.0, 5.0, 6.0];
        let mut c = [0.0; 4];
        matmul_into(&id, &b, &mut c, 2, 2, 2);
        assert_eq!(c, b);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2]] * [[3],[4]] = [[11]]
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut c = [0.0; 1];
        matmul_into(&a, &b, &mut c, 1, 2, 1);
        assert_eq!(c[0], 11.0);
    }
}
