use std::collections::HashMap;
use std::path::Path;

use super::io::load_embeddings;
use crate::error::{Error, Result};
use crate::numerics::stable_hash;

/// Source of text embeddings for relation names, entity names and queries.
#[derive(Clone, Debug)]
pub enum EmbeddingProvider {
    /// Signed feature hashing over lowercase alphanumeric tokens.
    TokenHash { dim: usize, seed: u64 },
    /// Precomputed vectors keyed by exact text.
    FileBacked {
        dim: usize,
        table: HashMap<String, Vec<f64>>,
    },
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

impl EmbeddingProvider {
    pub fn token_hash(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Parameter("embedding dimension must be positive".into()));
        }
        Ok(Self::TokenHash { dim, seed })
    }

    pub fn from_table(table: HashMap<String, Vec<f64>>) -> Result<Self> {
        let dim = table
            .values()
            .next()
            .map(Vec::len)
            .ok_or_else(|| Error::Validation("embedding table is empty".into()))?;
        if dim == 0 {
            return Err(Error::Validation("embedding vectors must be non-empty".into()));
        }
        if let Some((k, v)) = table.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::Validation(format!(
                "embedding for {k:?} has {} entries, expected {dim}",
                v.len()
            )));
        }
        Ok(Self::FileBacked { dim, table })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let records = load_embeddings(path)?;
        let mut table = HashMap::with_capacity(records.len());
        for r in records {
            table.insert(r.key, r.vector);
        }
        Self::from_table(table)
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::TokenHash { dim, .. } | Self::FileBacked { dim, .. } => *dim,
        }
    }

    /// Embeds `text`. Token-hash vectors are L2-normalized; text without
    /// tokens maps to the zero vector.
    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        match self {
            Self::TokenHash { dim, seed } => {
                let mut v = vec![0.0; *dim];
                for token in tokenize(text) {
                    let mut bytes = seed.to_le_bytes().to_vec();
                    bytes.extend_from_slice(token.as_bytes());
                    let h = stable_hash(&bytes);
                    let bucket = (h % *dim as u64) as usize;
                    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
                    v[bucket] += sign;
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|x| *x /= norm);
                }
                Ok(v)
            }
            Self::FileBacked { table, .. } => table
                .get(text)
                .cloned()
                .ok_or_else(|| Error::MissingKey(text.to_string())),
        }
    }
}
