//! Single-file tensor container: a JSON manifest (config, tensor names,
//! shapes, dtypes, byte offsets, format version, content checksum) followed
//! by raw little-endian IEEE-754 floats per tensor in manifest order.
//!
//! Model checkpoints store f32; editor state stores f64. The checksum covers
//! the data section and is verified on load.

use crate::error::{Result, XeditError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"XCKP";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u16,
    config: serde_json::Value,
    checksum: String,
    tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len() * 4,
            TensorData::F64(v) => v.len() * 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_container(
    path: &Path,
    config: &serde_json::Value,
    tensors: &[NamedTensor],
) -> Result<()> {
    let mut data_section: Vec<u8> = Vec::new();
    let mut metas = Vec::with_capacity(tensors.len());
    for t in tensors {
        let numel: usize = t.shape.iter().product();
        if numel != t.data.len() {
            return Err(XeditError::InvalidConfig(format!(
                "tensor {} shape {:?} does not match {} elements",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        metas.push(TensorMeta {
            name: t.name.clone(),
            dtype: t.data.dtype().to_string(),
            shape: t.shape.clone(),
            offset: data_section.len() as u64,
        });
        match &t.data {
            TensorData::F32(v) => {
                for x in v {
                    data_section.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::F64(v) => {
                for x in v {
                    data_section.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        checksum: hex(&Sha256::digest(&data_section)),
        tensors: metas,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    w.write_all(&data_section)?;
    w.flush()?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<(serde_json::Value, Vec<NamedTensor>)> {
    let corrupt = |detail: String| XeditError::CorruptFile {
        path: path.display().to_string(),
        detail,
    };

    let mut r = BufReader::new(File::open(path).map_err(|_| {
        XeditError::MissingArtifact(path.display().to_string())
    })?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic bytes".into()));
    }
    let mut u16buf = [0u8; 2];
    r.read_exact(&mut u16buf)?;
    let version = u16::from_le_bytes(u16buf);
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported container version {version}")));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let manifest_len = u32::from_le_bytes(u32buf) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;

    let mut data_section = Vec::new();
    r.read_to_end(&mut data_section)?;
    let checksum = hex(&Sha256::digest(&data_section));
    if checksum != manifest.checksum {
        return Err(corrupt(format!(
            "checksum mismatch: manifest {} vs data {}",
            manifest.checksum, checksum
        )));
    }

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for meta in &manifest.tensors {
        let numel: usize = meta.shape.iter().product();
        let width = match meta.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(corrupt(format!("unknown dtype {other}"))),
        };
        let start = meta.offset as usize;
        let end = start + numel * width;
        if end > data_section.len() {
            return Err(corrupt(format!(
                "tensor {} extends past the data section",
                meta.name
            )));
        }
        let bytes = &data_section[start..end];
        let data = match meta.dtype.as_str() {
            "f32" => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            _ => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| {
                        f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                    })
                    .collect(),
            ),
        };
        tensors.push(NamedTensor {
            name: meta.name.clone(),
            shape: meta.shape.clone(),
            data,
        });
    }
    Ok((manifest.config, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_mixed_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let tensors = vec![
            NamedTensor {
                name: "a".into(),
                shape: vec![2, 2],
                data: TensorData::F32(vec![1.0, 2.5, -3.0, 0.125]),
            },
            NamedTensor {
                name: "b".into(),
                shape: vec![3],
                data: TensorData::F64(vec![1e-300, 2.0, -0.1]),
            },
        ];
        let config = serde_json::json!({"kind": "test", "n": 3});
        save_container(&path, &config, &tensors).unwrap();
        let (loaded_config, loaded) = load_container(&path).unwrap();
        assert_eq!(loaded_config, config);
        assert_eq!(loaded.len(), 2);
        match &loaded[0].data {
            TensorData::F32(v) => assert_eq!(v, &[1.0, 2.5, -3.0, 0.125]),
            _ => panic!("dtype changed"),
        }
        match &loaded[1].data {
            TensorData::F64(v) => assert_eq!(v, &[1e-300, 2.0, -0.1]),
            _ => panic!("dtype changed"),
        }
    }

    #[test]
    fn checksum_detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let tensors = vec![NamedTensor {
            name: "a".into(),
            shape: vec![4],
            data: TensorData::F64(vec![1.0, 2.0, 3.0, 4.0]),
        }];
        save_container(&path, &serde_json::json!({}), &tensors).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_container(&path),
            Err(XeditError::CorruptFile { .. })
        ));
    }

    #[test]
    fn missing_file_reports_artifact() {
        let err = load_container(Path::new("/nonexistent/m.ckpt")).unwrap_err();
        assert!(matches!(err, XeditError::MissingArtifact(_)));
    }
}
