use candle_core::{DType, Device, Tensor, Var};

use crate::{Result, ZcError};

/// Learnable dense vector per label: the categorical-to-continuous bridge
/// that lets SGLD run over concept/relation embeddings.
pub struct LabelEmbeddingTable {
    vocabulary: Vec<String>,
    vectors: Var,
}

impl LabelEmbeddingTable {
    pub fn from_var(vocabulary: Vec<String>, vectors: Var) -> Result<Self> {
        let dims = vectors.dims();
        if dims.len() != 2 || dims[0] != vocabulary.len() {
            return Err(ZcError::Contract(format!(
                "embedding table shape {dims:?} does not match vocabulary of {}",
                vocabulary.len()
            )));
        }
        Ok(Self { vocabulary, vectors })
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn c_dim(&self) -> usize {
        self.vectors.dims()[1]
    }

    pub fn var(&self) -> &Var {
        &self.vectors
    }

    fn index_of(&self, label: &str) -> Result<usize> {
        self.vocabulary
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| {
                ZcError::Vocabulary(format!(
                    "unknown label {label:?}; vocabulary is {:?}",
                    self.vocabulary
                ))
            })
    }

    /// The stored (learnable) vector for `label`, shape `(c_dim,)`.
    /// Gradients flow back into the table.
    pub fn embed(&self, label: &str) -> Result<Tensor> {
        let idx = self.index_of(label)?;
        let idx_t = Tensor::from_vec(vec![idx as u32], 1, self.vectors.device())?;
        Ok(self
            .vectors
            .as_tensor()
            .index_select(&idx_t, 0)?
            .squeeze(0)?)
    }

    /// `embed` for a whole batch: `(N, c_dim)` with every row the same label.
    pub fn embed_batch(&self, label: &str, n: usize) -> Result<Tensor> {
        let idx = self.index_of(label)?;
        let idx_t = Tensor::from_vec(vec![idx as u32; n], n, self.vectors.device())?;
        Ok(self.vectors.as_tensor().index_select(&idx_t, 0)?)
    }

    /// Nearest stored label by Euclidean distance.
    pub fn nearest_label(&self, vector: &Tensor) -> Result<&str> {
        let v = vector.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let table = self
            .vectors
            .as_tensor()
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?;
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, row) in table.iter().enumerate() {
            let d: f64 = row.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        Ok(&self.vocabulary[best])
    }

    /// Mean and std of all table entries, for statistics-matched random inits.
    pub fn statistics(&self) -> Result<(f64, f64)> {
        let t = self.vectors.as_tensor().to_dtype(DType::F64)?;
        let mean = t.mean_all()?.to_scalar::<f64>()?;
        let var = t
            .broadcast_sub(&Tensor::new(mean, &Device::Cpu)?)?
            .sqr()?
            .mean_all()?
            .to_scalar::<f64>()?;
        Ok((mean, var.sqrt()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Tensor, Var};

    fn table(labels: &[&str], c_dim: usize) -> LabelEmbeddingTable {
        let n = labels.len();
        let data: Vec<f32> = (0..n * c_dim).map(|i| (i as f32) * 0.37 - 1.0).collect();
        let var =
            Var::from_tensor(&Tensor::from_vec(data, (n, c_dim), &Device::Cpu).unwrap()).unwrap();
        LabelEmbeddingTable::from_var(labels.iter().map(|s| s.to_string()).collect(), var).unwrap()
    }

    #[test]
    fn embed_then_nearest_recovers_label() {
        let t = table(&["line", "parallel", "perp-mid"], 8);
        for label in ["line", "parallel", "perp-mid"] {
            let v = t.embed(label).unwrap();
            assert_eq!(t.nearest_label(&v).unwrap(), label);
        }
    }

    #[test]
    fn unknown_label_is_a_vocabulary_error() {
        let t = table(&["line"], 4);
        assert!(matches!(t.embed("circle"), Err(crate::ZcError::Vocabulary(_))));
    }

    #[test]
    fn singleton_vocabulary_decodes_constantly() {
        let t = table(&["line"], 4);
        let v = Tensor::zeros(4, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.nearest_label(&v).unwrap(), "line");
    }
}
