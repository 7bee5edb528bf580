//! Named-array checkpoint files.
//!
//! Layout: the line `mcdm-ckpt-v1\n`, a little-endian `u64` header length,
//! a JSON header `{format, kind, config, arrays: [{name, shape}], checksum}`
//! and then every array as little-endian `f64`, in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{ConvFeatureExtractor, ExtractorKind};
use crate::model::{Denoiser, DenoiserConfig};

pub const FORMAT_TAG: &str = "mcdm-ckpt-v1";

pub type NamedArray = (String, Vec<usize>, Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    kind: String,
    config: serde_json::Value,
    arrays: Vec<ArrayMeta>,
    checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

fn payload_checksum(arrays: &[NamedArray]) -> String {
    let mut h = Sha256::new();
    for (_, _, vals) in arrays {
        for v in vals {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: FORMAT_TAG.into(),
            kind: self.kind.clone(),
            config: self.config.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, shape, _)| ArrayMeta {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
            checksum: payload_checksum(&self.arrays),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(FORMAT_TAG.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, vals) in &self.arrays {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut r = bytes;
        let mut tag = vec![0u8; FORMAT_TAG.len() + 1];
        r.read_exact(&mut tag)
            .map_err(|_| bad("truncated format tag"))?;
        if &tag[..FORMAT_TAG.len()] != FORMAT_TAG.as_bytes() || tag[FORMAT_TAG.len()] != b'\n' {
            return Err(bad("unknown format tag"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)
            .map_err(|_| bad("truncated header length"))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > r.len() {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&r[..len])
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        r = &r[len..];
        if header.format != FORMAT_TAG {
            return Err(bad("header format mismatch"));
        }
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for meta in header.arrays {
            let n: usize = meta.shape.iter().product();
            if r.len() < n * 8 {
                return Err(Error::Checkpoint(format!(
                    "array `{}` truncated",
                    meta.name
                )));
            }
            let vals = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            r = &r[n * 8..];
            arrays.push((meta.name, meta.shape, vals));
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes after arrays"));
        }
        if payload_checksum(&arrays) != header.checksum {
            return Err(bad("checksum mismatch"));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn denoiser_checkpoint(d: &Denoiser) -> Checkpoint {
    let p = d.params();
    Checkpoint {
        kind: "denoiser".into(),
        config: serde_json::to_value(d.config()).expect("config serializes"),
        arrays: p
            .names()
            .iter()
            .zip(p.shapes())
            .zip(p.values())
            .map(|((n, s), v)| (n.clone(), s.clone(), v.clone()))
            .collect(),
    }
}

pub fn save_denoiser(path: &Path, d: &Denoiser) -> Result<()> {
    denoiser_checkpoint(d).save(path)
}

pub fn load_denoiser(path: &Path) -> Result<Denoiser> {
    let ck = Checkpoint::load(path)?;
    if ck.kind != "denoiser" {
        return Err(Error::Checkpoint(format!(
            "expected a denoiser, found `{}`",
            ck.kind
        )));
    }
    let config: DenoiserConfig =
        serde_json::from_value(ck.config).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    Denoiser::from_parts(&config, ck.arrays)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExtractorHeader {
    input: (usize, usize, usize),
    dim: usize,
}

pub fn save_extractor(path: &Path, e: &ConvFeatureExtractor) -> Result<()> {
    use crate::features::FeatureExtractor;
    Checkpoint {
        kind: "extractor".into(),
        config: serde_json::to_value(ExtractorHeader {
            input: e.input_shape(),
            dim: e.dim(),
        })
        .expect("header serializes"),
        arrays: e.to_arrays(),
    }
    .save(path)
}

pub fn load_extractor(path: &Path, kind: ExtractorKind) -> Result<ConvFeatureExtractor> {
    let ck = Checkpoint::load(path)?;
    if ck.kind != "extractor" {
        return Err(Error::Checkpoint(format!(
            "expected an extractor, found `{}`",
            ck.kind
        )));
    }
    let h: ExtractorHeader =
        serde_json::from_value(ck.config).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    ConvFeatureExtractor::from_arrays(kind, h.input, h.dim, ck.arrays)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_denoiser;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 8,
            base_width: 4,
            depth: 2,
            time_embed_dim: 8,
            channel_multipliers: vec![1, 2],
            ..Default::default()
        }
    }

    #[test]
    fn denoiser_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let d = init_denoiser(&tiny()).unwrap();
        save_denoiser(&path, &d).unwrap();
        let back = load_denoiser(&path).unwrap();
        assert_eq!(back.checksum(), d.checksum());
        assert_eq!(back.config(), d.config());
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"mcdm-ckpt-v1\n"));
    }

    #[test]
    fn corruption_detected() {
        let d = init_denoiser(&tiny()).unwrap();
        let mut bytes = denoiser_checkpoint(&d).to_bytes();
        let n = bytes.len();
        bytes[n - 3] ^= 0x55;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..n - 8]).is_err());
        assert!(Checkpoint::from_bytes(b"other-format\n").is_err());
    }

    #[test]
    fn extractor_roundtrip() {
        use crate::features::FeatureExtractor;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ckpt");
        let e = ConvFeatureExtractor::random((3, 16, 16), 8, 3).unwrap();
        save_extractor(&path, &e).unwrap();
        let back = load_extractor(&path, ExtractorKind::SmallTrainedCnn).unwrap();
        let img = crate::tensor::ImageTensor::standard_normal(3, 16, 16, 0);
        assert_eq!(e.extract(&img).unwrap(), back.extract(&img).unwrap());
        assert!(load_denoiser(&path).is_err());
    }
}
