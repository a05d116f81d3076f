use crate::real::Real;

use super::GraphError;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, GraphError> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(GraphError::BadTensor { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("full: shape must be non-empty with positive dims")
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<T>) -> Self {
        assert!(!data.is_empty(), "vector: empty data");
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, GraphError> {
        Self::new(vec![rows, cols], data)
    }

    /// Build from `f64` values, converting into the element type.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self, GraphError> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    /// Split along the last axis into pieces of the given widths.
    pub fn split_last(&self, widths: &[usize]) -> Result<Vec<Tensor<T>>, GraphError> {
        let cols = self.cols();
        if widths.iter().sum::<usize>() != cols || widths.contains(&0) {
            return Err(GraphError::Shape {
                op: "split",
                dims: vec![self.shape.clone(), widths.to_vec()],
            });
        }
        let rows = self.rows();
        let mut out: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(w * rows)).collect();
        for r in 0..rows {
            let mut off = r * cols;
            for (piece, &w) in out.iter_mut().zip(widths) {
                piece.extend_from_slice(&self.data[off..off + w]);
                off += w;
            }
        }
        let lead = &self.shape[..self.shape.len() - 1];
        out.into_iter()
            .zip(widths)
            .map(|(d, &w)| {
                let mut s = lead.to_vec();
                s.push(w);
                Tensor::new(s, d)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![], vec![1.0]).is_err());
    }

    #[test]
    fn split_rows() {
        let t = Tensor::<f64>::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let parts = t.split_last(&[2, 1]).unwrap();
        assert_eq!(parts[0].data(), &[1., 2., 4., 5.]);
        assert_eq!(parts[1].shape(), &[2, 1]);
        assert_eq!(parts[1].data(), &[3., 6.]);
        assert!(t.split_last(&[2, 2]).is_err());
    }
}
