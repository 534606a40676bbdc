use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{ensure, Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"NNMILEB1";
const HEADER_LEN: usize = 16;

/// One slide: its patch-embedding matrix (N patches by D dims) and identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideBag {
    pub slide_id: String,
    pub patient_id: String,
    pub embeddings: Array2<f32>,
}

impl SlideBag {
    pub fn new(
        slide_id: impl Into<String>,
        patient_id: impl Into<String>,
        embeddings: Array2<f32>,
    ) -> Result<Self> {
        let bag = SlideBag {
            slide_id: slide_id.into(),
            patient_id: patient_id.into(),
            embeddings,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn n_patches(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.n_patches() >= 1 && self.embed_dim() >= 1,
            Validation,
            "bag {} has empty shape {}x{}",
            self.slide_id,
            self.n_patches(),
            self.embed_dim()
        );
        if let Some(pos) = self.embeddings.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "bag {} has a non-finite value at flat index {pos}",
                self.slide_id
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let n = u32::try_from(self.n_patches())
            .map_err(|_| Error::Validation("patch count exceeds u32".into()))?;
        let d = u32::try_from(self.embed_dim())
            .map_err(|_| Error::Validation("embedding dim exceeds u32".into()))?;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.embeddings.len());
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(&d.to_le_bytes());
        for v in self.embeddings.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Decodes the embedding file layout. Identity fields are left empty.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(
            bytes.len() >= 8 && &bytes[..8] == EMBEDDING_MAGIC,
            Format,
            "missing NNMILEB1 magic"
        );
        ensure!(
            bytes.len() >= HEADER_LEN,
            Corruption,
            "header truncated at {} bytes",
            bytes.len()
        );
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let payload = &bytes[HEADER_LEN..];
        let expected = n
            .checked_mul(d)
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Corruption(format!("header shape {n}x{d} overflows")))?;
        ensure!(
            payload.len() == expected,
            Corruption,
            "header declares {n}x{d} ({expected} payload bytes) but file carries {}",
            payload.len()
        );
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let embeddings = Array2::from_shape_vec((n, d), values)
            .map_err(|e| Error::Corruption(e.to_string()))?;
        let bag = SlideBag {
            slide_id: String::new(),
            patient_id: String::new(),
            embeddings,
        };
        bag.validate()?;
        Ok(bag)
    }
}

/// Reads a bag; the slide id defaults to the file stem.
pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<SlideBag> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut bag = SlideBag::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Corruption(m) => Error::Corruption(format!("{}: {m}", path.display())),
        other => other,
    })?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    bag.slide_id = stem.clone();
    bag.patient_id = stem;
    Ok(bag)
}

/// Writes a bag. Nothing is written when validation fails.
pub fn write_embedding_file(bag: &SlideBag, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = bag.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
