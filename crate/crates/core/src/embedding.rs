use std::path::Path;

use crate::error::{invalid, Result};
use crate::frontend::{read_archive, write_archive, FeatureMatrix};
use crate::nn::Mat;

/// An utterance-level vector (d-vector or i-vector) with its metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub utterance_id: String,
    pub speaker_id: String,
    pub language_id: String,
    pub vector: Vec<f64>,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn with_vector(&self, vector: Vec<f64>) -> Self {
        Embedding { vector, ..self.clone() }
    }

    pub fn from_feature(f: &FeatureMatrix) -> Result<Self> {
        if f.frames() != 1 {
            return Err(invalid!("{}: embedding records hold one row, found {}", f.utterance_id, f.frames()));
        }
        Ok(Embedding {
            utterance_id: f.utterance_id.clone(),
            speaker_id: f.speaker_id.clone(),
            language_id: f.language_id.clone(),
            vector: f.data.data.clone(),
        })
    }

    pub fn to_feature(&self) -> FeatureMatrix {
        FeatureMatrix::new(&self.utterance_id, &self.speaker_id, &self.language_id, Mat::from_vec(1, self.dim(), self.vector.clone()))
    }
}

/// Stored as a feature archive of single-row records.
pub fn write_embeddings(path: &Path, items: &[Embedding]) -> Result<()> {
    let f: Vec<FeatureMatrix> = items.iter().map(Embedding::to_feature).collect();
    write_archive(path, &f)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<Embedding>> {
    read_archive(path)?.iter().map(Embedding::from_feature).collect()
}
