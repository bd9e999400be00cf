use super::{invalid, NumError, Result};

/// Dense n-dimensional array of f64 in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return invalid(format!("tensor: zero extent in shape {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumError::ShapeMismatch {
                op: "tensor::new",
                detail: format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumError::NonFinite { op: "tensor::new", index });
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Stacks equal-length rows into a 2-D tensor.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return invalid("tensor::from_rows: no rows");
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumError::ShapeMismatch {
                op: "tensor::from_rows",
                detail: "ragged rows".into(),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(NumError::ShapeMismatch {
                op: "tensor::item",
                detail: format!("expected scalar, got shape {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    /// The (rows, cols) of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(NumError::ShapeMismatch {
                op: "tensor::dims2",
                detail: format!("expected 2-D, got shape {:?}", self.shape),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().expect("row on 0-d tensor");
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    /// Gathers `rows` (in order) into a new 2-D tensor.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (n, cols) = self.dims2()?;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return invalid(format!("gather_rows: row {r} out of range {n}"));
            }
            data.extend_from_slice(self.row(r));
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Gathers `cols` (in order) into a new 2-D tensor.
    pub fn gather_cols(&self, cols: &[usize]) -> Result<Tensor> {
        let (n, c) = self.dims2()?;
        let mut data = Vec::with_capacity(n * cols.len());
        for r in 0..n {
            let row = self.row(r);
            for &j in cols {
                if j >= c {
                    return invalid(format!("gather_cols: column {j} out of range {c}"));
                }
                data.push(row[j]);
            }
        }
        Tensor::new(vec![n, cols.len()], data)
    }

    /// Column-wise concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return invalid("concat_cols: no parts");
        }
        let n = parts[0].dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (rows, cols) = p.dims2()?;
            if rows != n {
                return Err(NumError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts differ: {rows} vs {n}"),
                });
            }
            widths.push(cols);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Tensor::new(vec![n, total], data)
    }

    /// Row-wise concatenation of 2-D tensors with equal column counts.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return invalid("concat_rows: no parts");
        }
        let cols = parts[0].dims2()?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != cols {
                return Err(NumError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column counts differ: {c} vs {cols}"),
                });
            }
            data.extend_from_slice(p.data());
            rows += r;
        }
        Tensor::new(vec![rows, cols], data)
    }

    pub fn transposed(&self) -> Result<Tensor> {
        let (n, m) = self.dims2()?;
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = self.data[i * m + j];
            }
        }
        Tensor::new(vec![m, n], data)
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> Result<()> {
        if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(NumError::NonFinite { op, index });
        }
        Ok(())
    }
}

/// Boolean mask with tensor-style shape; `true` marks attendable entries.
#[derive(Clone, Debug, PartialEq)]
pub struct BoolMask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl BoolMask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumError::ShapeMismatch {
                op: "mask::new",
                detail: format!("shape {shape:?} holds {numel} entries, got {}", data.len()),
            });
        }
        Ok(BoolMask { shape, data })
    }

    pub fn all_true(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        BoolMask { shape, data: vec![true; numel] }
    }

    /// Lower-triangular (inclusive) n x n causal mask.
    pub fn causal(n: usize) -> Self {
        let mut data = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                data[i * n + j] = true;
            }
        }
        BoolMask { shape: vec![n, n], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn at2(&self, r: usize, c: usize) -> bool {
        self.data[r * self.shape[1] + c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_data_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, NumError::NonFinite { index: 1, .. }));
    }

    #[test]
    fn concat_cols_matches_layout() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = Tensor::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let back = a.transposed().unwrap().transposed().unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        let m = BoolMask::causal(3);
        assert!(m.at2(2, 0) && m.at2(2, 2) && !m.at2(0, 1));
    }
}
