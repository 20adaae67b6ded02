//! HPAK v1 activation files.
//!
//! ```text
//! 0       8 bytes   magic "HPAKv1\0\0"
//! 8       u64 LE    header length H
//! 16      H bytes   JSON header
//! ...     zero padding
//! off[l]  row_count · hidden_dim · 4 bytes, f32 LE row-major, per layer
//! ```
//!
//! Every `offsets[l]` is absolute, a multiple of 64, and declared in the
//! header; layers follow each other in header order.

use std::path::Path as FsPath;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probes::{ActivationSet, RowMeta};

pub const MAGIC: &[u8; 8] = b"HPAKv1\0\0";
pub const ALIGN: u64 = 64;
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpakHeader {
    pub format_version: u32,
    pub model_tag: String,
    pub layer_count: usize,
    pub hidden_dim: usize,
    pub row_count: usize,
    pub dtype: String,
    /// Model layer index of each stored block.
    pub layers: Vec<u32>,
    pub offsets: Vec<u64>,
    pub alignment: Vec<RowMeta>,
}

/// Decoded file; matrices stay in their stored precision.
#[derive(Debug, Clone, PartialEq)]
pub struct HpakFile {
    pub header: HpakHeader,
    /// Row-major `row_count × hidden_dim` per layer.
    pub data: Vec<Vec<f32>>,
}

impl HpakFile {
    pub fn new(
        model_tag: impl Into<String>,
        hidden_dim: usize,
        alignment: Vec<RowMeta>,
        layers: Vec<(u32, Vec<f32>)>,
    ) -> Result<Self> {
        let row_count = alignment.len();
        for (l, d) in &layers {
            if d.len() != row_count * hidden_dim {
                return Err(Error::DataIntegrity(format!(
                    "layer {l}: {} values for {row_count}x{hidden_dim}",
                    d.len()
                )));
            }
        }
        Ok(Self {
            header: HpakHeader {
                format_version: FORMAT_VERSION,
                model_tag: model_tag.into(),
                layer_count: layers.len(),
                hidden_dim,
                row_count,
                dtype: "f32le".into(),
                layers: layers.iter().map(|l| l.0).collect(),
                offsets: Vec::new(),
                alignment,
            },
            data: layers.into_iter().map(|l| l.1).collect(),
        })
    }

    /// Packs activation sets that share one alignment, narrowing to f32.
    pub fn from_sets(model_tag: impl Into<String>, sets: &[ActivationSet]) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| Error::InvalidInput("no layers to write".into()))?;
        let mut layers = Vec::new();
        for s in sets {
            if s.alignment != first.alignment || s.dim() != first.dim() {
                return Err(Error::DataIntegrity(format!(
                    "layer {} does not share the alignment of layer {}",
                    s.layer, first.layer
                )));
            }
            let mut v = Vec::with_capacity(s.len() * s.dim());
            for i in 0..s.len() {
                v.extend(s.rows.row(i).iter().map(|&x| x as f32));
            }
            layers.push((s.layer, v));
        }
        Self::new(model_tag, first.dim(), first.alignment.clone(), layers)
    }

    pub fn activation_set(&self, layer: u32) -> Result<ActivationSet> {
        let idx = self
            .header
            .layers
            .iter()
            .position(|&l| l == layer)
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "layer {layer} not stored (have {:?})",
                    self.header.layers
                ))
            })?;
        let (n, d) = (self.header.row_count, self.header.hidden_dim);
        let rows = DMatrix::from_row_iterator(n, d, self.data[idx].iter().map(|&x| x as f64));
        ActivationSet::new(layer, rows, self.header.alignment.clone())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        let block = (h.row_count * h.hidden_dim * 4) as u64;
        let mut header = h.clone();
        header.layer_count = self.data.len();
        header.offsets = vec![0; self.data.len()];
        // Offsets change the header length; iterate to a fixed point.
        let mut json;
        loop {
            json = serde_json::to_vec(&header).map_err(|e| Error::json("HPAK header", e))?;
            let start = (16 + json.len() as u64).next_multiple_of(ALIGN);
            let offsets: Vec<u64> = (0..self.data.len())
                .map(|l| start + l as u64 * block.next_multiple_of(ALIGN))
                .collect();
            if offsets == header.offsets {
                break;
            }
            header.offsets = offsets;
        }
        let end = header.offsets.last().map_or(16 + json.len() as u64, |o| o + block);
        let mut out = Vec::with_capacity(end as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (l, data) in self.data.iter().enumerate() {
            out.resize(header.offsets[l] as usize, 0);
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::DataIntegrity(format!("HPAK: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("header length {hlen} exceeds file")))?;
        let header: HpakHeader = serde_json::from_slice(&bytes[16..hend])
            .map_err(|e| Error::json("HPAK header", e))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {}", header.format_version)));
        }
        if header.dtype != "f32le" {
            return Err(bad(format!("unsupported dtype {}", header.dtype)));
        }
        if header.layers.len() != header.layer_count || header.offsets.len() != header.layer_count {
            return Err(bad("layer_count disagrees with layer and offset lists".into()));
        }
        if header.alignment.len() != header.row_count {
            return Err(bad(format!(
                "{} alignment records for {} rows",
                header.alignment.len(),
                header.row_count
            )));
        }
        let block = header.row_count * header.hidden_dim * 4;
        let mut data = Vec::with_capacity(header.layer_count);
        for (l, &off) in header.offsets.iter().enumerate() {
            if off % ALIGN != 0 || (off as usize) < hend {
                return Err(bad(format!("layer {l} offset {off} is misplaced")));
            }
            let start = off as usize;
            let end = start
                .checked_add(block)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| bad(format!("layer {l} payload truncated")))?;
            data.push(
                bytes[start..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            );
        }
        Ok(Self { header, data })
    }

    pub fn write(&self, path: &FsPath) -> Result<()> {
        crate::store::write_atomic(path, &self.encode()?)
    }

    pub fn read(path: &FsPath) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> HpakFile {
        let alignment = vec![
            RowMeta {
                example_id: "tree-00000".into(),
                path_index: 0,
                node_label: Some(5),
                visitation: 0,
            },
            RowMeta {
                example_id: "tree-00000".into(),
                path_index: 0,
                node_label: None,
                visitation: 0,
            },
        ];
        HpakFile::new(
            "stub",
            3,
            alignment,
            vec![
                (4, vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.1, -0.0]),
                (9, vec![6.0, 5.0, 4.0, 3.0, 2.0, 1.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let f = sample();
        let bytes = f.encode().unwrap();
        let back = HpakFile::decode(&bytes).unwrap();
        assert_eq!(back.data.len(), 2);
        for (a, b) in f.data.iter().zip(&back.data) {
            let ab: Vec<u32> = a.iter().map(|x| x.to_bits()).collect();
            let bb: Vec<u32> = b.iter().map(|x| x.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back.header.alignment, f.header.alignment);
        assert_eq!(back.encode().unwrap(), bytes);
        for &o in &back.header.offsets {
            assert_eq!(o % 64, 0);
        }
        assert_eq!(&bytes[..8], b"HPAKv1\0\0");
    }

    #[test]
    fn truncation_and_bad_magic_rejected() {
        let bytes = sample().encode().unwrap();
        assert!(HpakFile::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(HpakFile::decode(&bad).is_err());
    }

    #[test]
    fn activation_set_view() {
        let s = sample().activation_set(9).unwrap();
        assert_eq!(s.rows[(1, 0)], 3.0);
        assert!(sample().activation_set(2).is_err());
    }
}
