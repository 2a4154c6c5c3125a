//! Parameter archives: a JSON manifest plus a flat little-endian `f64` blob.
//!
//! ```text
//! <dir>/manifest.json   sections (name, length) in blob order + metadata
//! <dir>/params.bin      concatenated sections
//! ```

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Envelope<M> {
    format_version: u32,
    sections: Vec<Section>,
    #[serde(flatten)]
    meta: M,
}

const FORMAT_VERSION: u32 = 1;

fn ckpt_err(dir: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: dir.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes `sections` and `meta` to `dir` (created if needed).
pub fn save<M: Serialize>(dir: &Path, meta: &M, sections: &[(&str, &[f64])]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let envelope = Envelope {
        format_version: FORMAT_VERSION,
        sections: sections
            .iter()
            .map(|(name, data)| Section {
                name: name.to_string(),
                len: data.len(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_string_pretty(&envelope).map_err(|e| ckpt_err(dir, e.to_string()))?;
    let manifest = dir.join(MANIFEST_FILE);
    std::fs::write(&manifest, json).map_err(|e| Error::io(&manifest, e))?;

    let total: usize = sections.iter().map(|(_, d)| d.len()).sum();
    let mut blob = Vec::with_capacity(total * 8);
    for (_, data) in sections {
        for v in *data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let params = dir.join(PARAMS_FILE);
    std::fs::write(&params, blob).map_err(|e| Error::io(&params, e))
}

/// Loaded archive: metadata plus named sections.
#[derive(Debug, Clone)]
pub struct Archive<M> {
    pub meta: M,
    sections: Vec<(String, Vec<f64>)>,
}

impl<M> Archive<M> {
    pub fn take(&mut self, name: &str, dir: &Path) -> Result<Vec<f64>> {
        let i = self
            .sections
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| ckpt_err(dir, format!("missing section `{name}`")))?;
        Ok(self.sections.remove(i).1)
    }
}

pub fn load<M: DeserializeOwned>(dir: &Path) -> Result<Archive<M>> {
    let manifest = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let envelope: Envelope<M> = serde_json::from_str(&text).map_err(|e| ckpt_err(dir, e.to_string()))?;
    if envelope.format_version != FORMAT_VERSION {
        return Err(ckpt_err(
            dir,
            format!("unsupported format version {}", envelope.format_version),
        ));
    }
    let params = dir.join(PARAMS_FILE);
    let blob = std::fs::read(&params).map_err(|e| Error::io(&params, e))?;
    let total: usize = envelope.sections.iter().map(|s| s.len).sum();
    if blob.len() != total * 8 {
        return Err(ckpt_err(
            dir,
            format!("params.bin has {} bytes, manifest expects {}", blob.len(), total * 8),
        ));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    let sections = envelope
        .sections
        .into_iter()
        .map(|s| (s.name, values.by_ref().take(s.len).collect()))
        .collect();
    Ok(Archive {
        meta: envelope.meta,
        sections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Meta {
        step: u64,
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let a = vec![0.1, -3.5e-300, f64::MIN_POSITIVE, 1.0 / 3.0];
        let b = vec![42.0];
        save(tmp.path(), &Meta { step: 7 }, &[("a", &a), ("b", &b)]).unwrap();
        let mut archive: Archive<Meta> = load(tmp.path()).unwrap();
        assert_eq!(archive.meta, Meta { step: 7 });
        let la = archive.take("a", tmp.path()).unwrap();
        assert!(la.iter().zip(&a).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(archive.take("b", tmp.path()).unwrap(), b);
        assert!(archive.take("c", tmp.path()).is_err());
    }

    #[test]
    fn truncated_blob_detected() {
        let tmp = tempfile::tempdir().unwrap();
        save(tmp.path(), &Meta { step: 0 }, &[("a", &[1.0, 2.0])]).unwrap();
        std::fs::write(tmp.path().join(PARAMS_FILE), [0u8; 12]).unwrap();
        assert!(load::<Meta>(tmp.path()).is_err());
    }
}
