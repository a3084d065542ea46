use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multi-label ground truth: one `{0,1}` entry per category.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct LabelVector(Vec<u8>);

impl TryFrom<Vec<u8>> for LabelVector {
    type Error = Error;

    fn try_from(values: Vec<u8>) -> Result<Self> {
        LabelVector::new(values)
    }
}

impl From<LabelVector> for Vec<u8> {
    fn from(l: LabelVector) -> Self {
        l.0
    }
}

impl LabelVector {
    pub fn new(values: Vec<u8>) -> Result<Self> {
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Data(format!("label entries must be 0 or 1: {values:?}")));
        }
        Ok(LabelVector(values))
    }

    pub fn from_indices(classes: usize, positives: &[usize]) -> Result<Self> {
        let mut v = vec![0u8; classes];
        for &p in positives {
            *v.get_mut(p).ok_or_else(|| {
                Error::Data(format!("label index {p} out of range for {classes} classes"))
            })? = 1;
        }
        Ok(LabelVector(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[u8] {
        &self.0
    }

    pub fn is_positive(&self, class: usize) -> bool {
        self.0.get(class) == Some(&1)
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &v)| v == 1).map(|(i, _)| i)
    }

    pub fn count_positive(&self) -> usize {
        self.0.iter().filter(|&&v| v == 1).count()
    }

    /// The L1-normalized target distribution `y / |y|_1`.
    pub fn target_distribution(&self) -> Result<Vec<f64>> {
        let total = self.count_positive();
        if total == 0 {
            return Err(Error::Data("label vector has no positive entry".into()));
        }
        Ok(self.0.iter().map(|&v| f64::from(v) / total as f64).collect())
    }
}
