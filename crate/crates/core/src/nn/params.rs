use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named slice of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat model parameters plus the layout naming each tensor.
///
/// The layout is metadata: models look segments up by name, so reordering
/// segments in memory does not change any loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    layout: Vec<Segment>,
}

impl ParamVector {
    /// Zero-filled vector with segments packed in the given order.
    pub fn zeros(segments: &[(String, usize)]) -> Self {
        let mut layout = Vec::with_capacity(segments.len());
        let mut offset = 0;
        for (name, len) in segments {
            layout.push(Segment {
                name: name.clone(),
                offset,
                len: *len,
            });
            offset += len;
        }
        Self {
            values: vec![0.0; offset],
            layout,
        }
    }

    pub fn from_parts(values: Vec<f64>, layout: Vec<Segment>) -> Result<Self> {
        let pv = Self { values, layout };
        pv.validate()?;
        Ok(pv)
    }

    /// Offsets must tile `0..len` exactly, with unique names.
    pub fn validate(&self) -> Result<()> {
        let mut spans: Vec<(usize, usize)> =
            self.layout.iter().map(|s| (s.offset, s.len)).collect();
        spans.sort_unstable();
        let mut cursor = 0;
        for (offset, len) in spans {
            if offset != cursor {
                return Err(Error::LayoutMismatch(format!(
                    "segments are not contiguous at offset {cursor}"
                )));
            }
            cursor += len;
        }
        if cursor != self.values.len() {
            return Err(Error::LayoutMismatch(format!(
                "layout covers {cursor} values but vector holds {}",
                self.values.len()
            )));
        }
        let mut names: Vec<&str> = self.layout.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::LayoutMismatch("duplicate segment name".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn segment(&self, name: &str) -> Result<&Segment> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::LayoutMismatch(format!("missing segment `{name}`")))
    }

    pub fn slice(&self, name: &str) -> Result<&[f64]> {
        let s = self.segment(name)?;
        Ok(&self.values[s.offset..s.offset + s.len])
    }

    pub fn slice_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let s = self.segment(name)?.clone();
        Ok(&mut self.values[s.offset..s.offset + s.len])
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    pub fn ensure_same_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch("parameter layouts differ".into()))
        }
    }

    /// A vector with this layout holding `values`.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                context: "parameter values",
                expected: self.values.len(),
                found: values.len(),
            });
        }
        Ok(Self {
            values,
            layout: self.layout.clone(),
        })
    }

    /// Same parameters, segments packed in the given name order.
    pub fn repacked(&self, order: &[&str]) -> Result<Self> {
        if order.len() != self.layout.len() {
            return Err(Error::LayoutMismatch("repack order must name every segment".into()));
        }
        let mut values = Vec::with_capacity(self.values.len());
        let mut layout = Vec::with_capacity(order.len());
        for name in order {
            let data = self.slice(name)?;
            layout.push(Segment {
                name: (*name).to_string(),
                offset: values.len(),
                len: data.len(),
            });
            values.extend_from_slice(data);
        }
        Self::from_parts(values, layout)
    }

    /// Concatenates two vectors with disjoint segment names.
    pub fn concat(&self, other: &ParamVector) -> Result<Self> {
        let shift = self.values.len();
        let mut layout = self.layout.clone();
        layout.extend(other.layout.iter().map(|s| Segment {
            name: s.name.clone(),
            offset: s.offset + shift,
            len: s.len,
        }));
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Self::from_parts(values, layout)
    }

    /// FNV-1a over the raw bits; equal checksums mean bitwise-equal values.
    pub fn checksum(&self) -> u64 {
        self.values.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            v.to_bits()
                .to_le_bytes()
                .iter()
                .fold(h, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3))
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointLayout {
    dtype: String,
    total: usize,
    segments: Vec<Segment>,
}

pub const PARAMS_LAYOUT_FILE: &str = "params.json";
pub const PARAMS_VALUES_FILE: &str = "params.bin";

/// Writes `params.json` (layout) and `params.bin` (little-endian f32).
pub fn save_checkpoint(params: &ParamVector, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let layout = CheckpointLayout {
        dtype: "f32le".into(),
        total: params.len(),
        segments: params.layout.clone(),
    };
    let path = dir.join(PARAMS_LAYOUT_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&layout)?).map_err(|e| Error::io(&path, e))?;
    let bytes: Vec<u8> = params
        .values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    let path = dir.join(PARAMS_VALUES_FILE);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<ParamVector> {
    let path = dir.join(PARAMS_LAYOUT_FILE);
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let layout: CheckpointLayout = serde_json::from_slice(&raw)?;
    let path = dir.join(PARAMS_VALUES_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != layout.total * 4 {
        return Err(Error::LengthMismatch {
            expected: layout.total * 4,
            found: bytes.len(),
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    ParamVector::from_parts(values, layout.segments)
}
