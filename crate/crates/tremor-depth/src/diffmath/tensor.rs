use std::sync::Arc;

use super::TapeError;

/// Dense row-major f64 tensor. Cloning is cheap (shared storage); all tape
/// operations allocate fresh buffers for their results.
#[derive(Clone, Debug)]
pub struct DTensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    /// Set on tensors returned by [`super::Tape::forward`], linking the value
    /// back to the node that produced it.
    pub tape_id: Option<usize>,
}

impl DTensor {
    /// Checked constructor: validates the shape product and rejects NaN/Inf.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TapeError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TapeError::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(TapeError::NonFinite(format!("value {bad} in new tensor")));
        }
        Ok(Self::from_parts(shape, data))
    }

    /// Unchecked constructor for op internals: shape product is asserted,
    /// finiteness is not inspected.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        DTensor { shape, data: Arc::new(data), tape_id: None }
    }

    pub fn scalar(x: f64) -> Self {
        Self::from_parts(vec![1], vec![x])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape, vec![0.0; n])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    /// Row-major matrix from nested rows. Rows must be rectangular.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_parts(vec![r, c], data)
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Sole element of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Same-shape copy with one element nudged; used by the FD harness.
    pub fn with_nudge(&self, idx: usize, delta: f64) -> Self {
        let mut d = self.data.as_ref().clone();
        d[idx] += delta;
        Self::from_parts(self.shape.clone(), d)
    }
}

impl PartialEq for DTensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_shape_product_mismatch() {
        assert!(DTensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(DTensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(DTensor::new(vec![2], vec![f64::INFINITY, 0.0]).is_err());
        assert!(DTensor::new(vec![2], vec![1.0, -2.0]).is_ok());
    }

    #[test]
    fn nudge_is_local() {
        let t = DTensor::from_vec(vec![1.0, 2.0, 3.0]);
        let u = t.with_nudge(1, 0.5);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0]);
        assert_eq!(u.data(), &[1.0, 2.5, 3.0]);
    }
}
