use std::fmt;

use crate::error::{Error, Result};

/// Name and shape of one tensor inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorDesc {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorDesc {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            shape,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

impl fmt::Display for TensorDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name)?;
        for d in &self.shape {
            write!(f, " {d}")?;
        }
        Ok(())
    }
}

/// Flat parameter storage with a named tensor layout.
///
/// Gradients use the same type, so every layout-aware operation applies to
/// both.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<TensorDesc>,
}

impl ParamVector {
    pub fn new(layout: Vec<TensorDesc>, values: Vec<f64>) -> Result<Self> {
        let total: usize = layout.iter().map(TensorDesc::numel).sum();
        if total != values.len() {
            return Err(Error::DimensionMismatch {
                context: "parameter layout",
                expected: total,
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter entry {i}")));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Vec<TensorDesc>) -> Self {
        let total = layout.iter().map(TensorDesc::numel).sum();
        Self {
            values: vec![0.0; total],
            layout,
        }
    }

    pub fn zeros_like(other: &ParamVector) -> Self {
        Self::zeros(other.layout.clone())
    }

    /// Same layout as `self` with replaced values. Length is checked, finiteness is not,
    /// since gradients of diverging runs must still be reportable.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                context: "parameter values",
                expected: self.values.len(),
                actual: values.len(),
            });
        }
        Ok(Self {
            values,
            layout: self.layout.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &[TensorDesc] {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Slice of the tensor called `name`.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let mut offset = 0;
        for d in &self.layout {
            let n = d.numel();
            if d.name == name {
                return Some(&self.values[offset..offset + n]);
            }
            offset += n;
        }
        None
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let mut offset = 0;
        for d in &self.layout {
            let n = d.numel();
            if d.name == name {
                return Some(&mut self.values[offset..offset + n]);
            }
            offset += n;
        }
        None
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn scale(&mut self, c: f64) {
        self.values.iter_mut().for_each(|v| *v *= c);
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: f64, other: &ParamVector) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Vec<TensorDesc> {
        vec![
            TensorDesc::new("w", vec![2, 3]),
            TensorDesc::new("b", vec![2]),
        ]
    }

    #[test]
    fn length_must_match_layout() {
        assert!(ParamVector::new(layout(), vec![0.0; 8]).is_ok());
        assert!(matches!(
            ParamVector::new(layout(), vec![0.0; 7]),
            Err(Error::DimensionMismatch { expected: 8, .. })
        ));
    }

    #[test]
    fn rejects_non_finite() {
        let mut v = vec![0.0; 8];
        v[3] = f64::NAN;
        assert!(matches!(
            ParamVector::new(layout(), v),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn tensor_views() {
        let p = ParamVector::new(layout(), (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(p.tensor("b").unwrap(), &[6.0, 7.0]);
        assert_eq!(p.tensor("w").unwrap().len(), 6);
        assert!(p.tensor("missing").is_none());
    }
}
