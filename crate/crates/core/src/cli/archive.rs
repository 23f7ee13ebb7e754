use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{head_prefix, EncoderConfig, NeuralDeformationField};
use crate::nn::{MlpSpec, ParamStore, Tensor};
use crate::segmentation::Segmentation;
use crate::template::TemplateConfig;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"NFRW";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Everything needed to rebuild a field except the parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveManifest {
    pub encoder: EncoderConfig,
    pub segmentation: Segmentation,
    pub heads: Vec<MlpSpec>,
    pub offset_cap: f64,
    pub template: TemplateConfig,
    pub template_hash: String,
    /// Payload order.
    pub tensors: Vec<TensorEntry>,
}

/// Field weights on disk: `NFRW`, a little-endian u32 version, a u64 manifest
/// length, the JSON manifest, then every parameter as little-endian f32.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightArchive {
    pub manifest: ArchiveManifest,
    pub payload: Vec<f32>,
}

impl WeightArchive {
    /// Parameters are stored as f32; trained fields are already f32-exact.
    pub fn from_field(field: &NeuralDeformationField) -> Self {
        let tensors = field
            .params
            .iter()
            .map(|(name, t)| TensorEntry { name: name.to_string(), rows: t.rows, cols: t.cols })
            .collect();
        let payload = field.params.iter().flat_map(|(_, t)| t.data.iter().map(|&x| x as f32)).collect();
        Self {
            manifest: ArchiveManifest {
                encoder: field.encoder.clone(),
                segmentation: field.segmentation.clone(),
                heads: field.specs.clone(),
                offset_cap: field.cap,
                template: field.template.clone(),
                template_hash: field.template_hash.clone(),
                tensors,
            },
            payload,
        }
    }

    pub fn into_field(self) -> Result<NeuralDeformationField> {
        let m = self.manifest;
        let expected: usize = m.tensors.iter().map(|t| t.rows * t.cols).sum();
        if expected != self.payload.len() {
            return Err(Error::parse(
                "weight archive",
                format!("manifest describes {expected} values, payload holds {}", self.payload.len()),
            ));
        }
        let mut params = ParamStore::new();
        let mut offset = 0;
        for t in &m.tensors {
            let n = t.rows * t.cols;
            let data = self.payload[offset..offset + n].iter().map(|&x| f64::from(x)).collect();
            params.insert(t.name.clone(), Tensor::from_vec(t.rows, t.cols, data))?;
            offset += n;
        }
        for k in 0..m.heads.len() {
            if !params.names().any(|n| n.starts_with(&head_prefix(k))) {
                return Err(Error::parse("weight archive", format!("no tensors for head {k}")));
            }
        }
        let vertices = m.segmentation.labels.len();
        NeuralDeformationField::assemble(
            m.template,
            m.template_hash,
            vertices,
            m.encoder,
            m.segmentation,
            m.heads,
            params,
            m.offset_cap,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("plain data");
        let mut out = Vec::with_capacity(16 + manifest.len() + 4 * self.payload.len());
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for x in &self.payload {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::parse("weight archive", msg.to_string());
        if bytes.len() < 16 || &bytes[..4] != ARCHIVE_MAGIC {
            return Err(bad("missing NFRW header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != ARCHIVE_VERSION {
            return Err(Error::Version { found: version, supported: ARCHIVE_VERSION });
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| l.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("manifest length exceeds the file"))?;
        let manifest: ArchiveManifest = serde_json::from_slice(&bytes[16..end])
            .map_err(|e| Error::parse("weight archive manifest", e.to_string()))?;
        let rest = &bytes[end..];
        if !rest.len().is_multiple_of(4) {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let payload = rest.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(Self { manifest, payload })
    }
}

pub fn save_field(path: &Path, field: &NeuralDeformationField) -> Result<()> {
    fs::write(path, WeightArchive::from_field(field).to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_field(path: &Path) -> Result<NeuralDeformationField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    WeightArchive::from_bytes(&bytes)?.into_field()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::HeadConfig;
    use crate::template::build_template;
    use crate::template::SkeletonSpec;

    fn field(segments: usize) -> NeuralDeformationField {
        let t = build_template(&SkeletonSpec::humanoid(), 60, 0).unwrap();
        let heads = HeadConfig { segments, hidden: vec![8], reference_segments: segments, seed: 3 };
        NeuralDeformationField::new(&t, &EncoderConfig { base_resolution: 8, levels: 2 }, &heads, 0.05).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let f = field(3);
        let back = WeightArchive::from_bytes(&WeightArchive::from_field(&f).to_bytes()).unwrap().into_field().unwrap();
        assert_eq!(back, f);
        for ((a, x), (b, y)) in f.params.iter().zip(back.params.iter()) {
            assert_eq!(a, b);
            assert!(x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn single_head_manifest() {
        let a = WeightArchive::from_field(&field(1));
        assert_eq!(a.manifest.heads.len(), 1);
        assert_eq!(a.manifest.segmentation.l, 1);
    }

    #[test]
    fn header_is_checked() {
        let mut bytes = WeightArchive::from_field(&field(2)).to_bytes();
        assert_eq!(&bytes[..4], b"NFRW");
        bytes[4] = 9;
        assert!(matches!(WeightArchive::from_bytes(&bytes), Err(Error::Version { found: 9, .. })));
        assert!(matches!(WeightArchive::from_bytes(b"XXXX0000"), Err(Error::Parse { .. })));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut bytes = WeightArchive::from_field(&field(2)).to_bytes();
        bytes.truncate(bytes.len() - 4);
        let archive = WeightArchive::from_bytes(&bytes).unwrap();
        assert!(archive.into_field().is_err());
    }
}
