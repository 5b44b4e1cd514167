use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named, contiguous segments of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    /// Architecture descriptor, e.g. `mlp(d=52,stations=21,emb=16,hidden=128-128-64)`.
    pub arch: String,
    pub segments: Vec<Segment>,
}

impl Layout {
    pub fn new(arch: impl Into<String>, shapes: &[(&str, Vec<usize>)]) -> Layout {
        let mut offset = 0;
        let segments = shapes
            .iter()
            .map(|(name, shape)| {
                let s = Segment {
                    name: name.to_string(),
                    shape: shape.clone(),
                    offset,
                };
                offset += s.len();
                s
            })
            .collect();
        Layout {
            arch: arch.into(),
            segments,
        }
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Stable 64-bit digest of the architecture and segment shapes.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.arch.as_bytes());
        for s in &self.segments {
            h.update(b"|");
            h.update(s.name.as_bytes());
            for d in &s.shape {
                h.update((*d as u64).to_le_bytes());
            }
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}

/// Flat parameter snapshot. Cheap to clone the layout; values are owned.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub layout: Arc<Layout>,
    pub values: Vec<f64>,
}

impl ModelParameters {
    pub fn zeros(layout: Arc<Layout>) -> ModelParameters {
        let n = layout.len();
        ModelParameters {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<ModelParameters> {
        if values.len() != layout.len() {
            return Err(Error::LayoutMismatch(format!(
                "{} values for a layout of {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(ModelParameters { layout, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_layout(&self, other: &Layout) -> Result<()> {
        if *self.layout != *other {
            return Err(Error::LayoutMismatch(format!(
                "{} vs {}",
                self.layout.arch, other.arch
            )));
        }
        Ok(())
    }

    pub fn segment(&self, name: &str) -> &[f64] {
        let s = self
            .layout
            .segment(name)
            .unwrap_or_else(|| panic!("no segment {name}"));
        &self.values[s.range()]
    }
}
