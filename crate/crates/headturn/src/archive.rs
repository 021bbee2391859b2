//! Named-array archive, the on-disk container for checkpoints, datasets, and
//! generated motion.
//!
//! Layout: 4-byte magic `TMR1`, a little-endian `u64` giving the manifest
//! length in bytes, a UTF-8 JSON manifest listing `(name, dtype, shape,
//! byte_offset, byte_length)` per array, then the raw data blob. Offsets are
//! relative to the start of the blob. Array data is row-major little-endian.
//! Supported dtypes are `f32`, `f64`, and `i64`.
//!
//! Writes go to a temporary file in the destination directory followed by an
//! atomic rename, so readers never observe a half-written archive.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TMR1";

/// One array payload. The container fixes endianness and layout; this enum
/// fixes the element type.
#[derive(Debug, Clone, PartialEq)]
pub enum ArchiveArray {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    I64(ArrayD<i64>),
}

impl ArchiveArray {
    pub fn dtype(&self) -> &'static str {
        match self {
            ArchiveArray::F32(_) => "f32",
            ArchiveArray::F64(_) => "f64",
            ArchiveArray::I64(_) => "i64",
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            ArchiveArray::F32(a) => a.shape(),
            ArchiveArray::F64(a) => a.shape(),
            ArchiveArray::I64(a) => a.shape(),
        }
    }

    fn elem_size(&self) -> usize {
        match self {
            ArchiveArray::F32(_) => 4,
            ArchiveArray::F64(_) | ArchiveArray::I64(_) => 8,
        }
    }

    fn byte_len(&self) -> usize {
        self.shape().iter().product::<usize>() * self.elem_size()
    }

    fn write_bytes(&self, out: &mut Vec<u8>) {
        match self {
            ArchiveArray::F32(a) => {
                for v in a.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            ArchiveArray::F64(a) => {
                for v in a.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            ArchiveArray::I64(a) => {
                for v in a.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }

    /// Borrows the f64 payload, or reports the actual dtype.
    pub fn as_f64(&self, name: &str) -> Result<&ArrayD<f64>> {
        match self {
            ArchiveArray::F64(a) => Ok(a),
            other => Err(Error::Dtype {
                name: name.to_string(),
                expected: "f64".into(),
                got: other.dtype().into(),
            }),
        }
    }

    pub fn as_f32(&self, name: &str) -> Result<&ArrayD<f32>> {
        match self {
            ArchiveArray::F32(a) => Ok(a),
            other => Err(Error::Dtype {
                name: name.to_string(),
                expected: "f32".into(),
                got: other.dtype().into(),
            }),
        }
    }

    pub fn as_i64(&self, name: &str) -> Result<&ArrayD<i64>> {
        match self {
            ArchiveArray::I64(a) => Ok(a),
            other => Err(Error::Dtype {
                name: name.to_string(),
                expected: "i64".into(),
                got: other.dtype().into(),
            }),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    byte_offset: usize,
    byte_length: usize,
}

/// An in-memory archive: ordered named arrays with unique names.
#[derive(Debug, Default)]
pub struct Archive {
    entries: Vec<(String, ArchiveArray)>,
    index: BTreeMap<String, usize>,
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    /// Adds an array. Names must be unique within the archive.
    pub fn insert(&mut self, name: impl Into<String>, array: ArchiveArray) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateName { name });
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, array));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ArchiveArray> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::MissingArray { name: name.to_string() })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Entries in insertion order.
    pub fn entries(&self) -> &[(String, ArchiveArray)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Serializes and writes the archive atomically.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut manifest = Vec::with_capacity(self.entries.len());
        let total: usize = self.entries.iter().map(|(_, a)| a.byte_len()).sum();
        let mut blob = Vec::with_capacity(total);
        for (name, array) in &self.entries {
            let byte_offset = blob.len();
            array.write_bytes(&mut blob);
            manifest.push(ManifestEntry {
                name: name.clone(),
                dtype: array.dtype().to_string(),
                shape: array.shape().to_vec(),
                byte_offset,
                byte_length: blob.len() - byte_offset,
            });
        }
        let manifest_json = serde_json::to_vec(&manifest)
            .map_err(|e| Error::Manifest { path: path.to_path_buf(), msg: e.to_string() })?;

        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
        tmp.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
        tmp.write_all(&(manifest_json.len() as u64).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        tmp.write_all(&manifest_json).map_err(|e| Error::io(path, e))?;
        tmp.write_all(&blob).map_err(|e| Error::io(path, e))?;
        tmp.flush().map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    /// Reads and validates an archive from disk.
    pub fn read(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;

        if bytes.len() < 12 || &bytes[0..4] != MAGIC {
            return Err(Error::BadMagic { path: path.to_path_buf() });
        }
        let manifest_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let blob_start = 12 + manifest_len;
        if bytes.len() < blob_start {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                what: format!("manifest claims {manifest_len} bytes"),
            });
        }
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes[12..blob_start])
            .map_err(|e| Error::Manifest { path: path.to_path_buf(), msg: e.to_string() })?;
        let blob = &bytes[blob_start..];

        let mut archive = Archive::new();
        for entry in manifest {
            let count: usize = entry.shape.iter().product();
            let elem = match entry.dtype.as_str() {
                "f32" => 4,
                "f64" | "i64" => 8,
                other => {
                    return Err(Error::Manifest {
                        path: path.to_path_buf(),
                        msg: format!("unknown dtype '{other}' for '{}'", entry.name),
                    })
                }
            };
            if entry.byte_length != count * elem {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    msg: format!(
                        "'{}' length {} does not match shape {:?}",
                        entry.name, entry.byte_length, entry.shape
                    ),
                });
            }
            let end = entry.byte_offset.checked_add(entry.byte_length).ok_or_else(|| {
                Error::Truncated { path: path.to_path_buf(), what: format!("'{}' offset overflow", entry.name) }
            })?;
            if end > blob.len() {
                return Err(Error::Truncated {
                    path: path.to_path_buf(),
                    what: format!("'{}' runs past end of data", entry.name),
                });
            }
            let raw = &blob[entry.byte_offset..end];
            let shape = IxDyn(&entry.shape);
            let array = match entry.dtype.as_str() {
                "f32" => {
                    let v: Vec<f32> =
                        raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    ArchiveArray::F32(ArrayD::from_shape_vec(shape, v).unwrap())
                }
                "f64" => {
                    let v: Vec<f64> =
                        raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    ArchiveArray::F64(ArrayD::from_shape_vec(shape, v).unwrap())
                }
                _ => {
                    let v: Vec<i64> =
                        raw.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect();
                    ArchiveArray::I64(ArrayD::from_shape_vec(shape, v).unwrap())
                }
            };
            archive.insert(entry.name, array)?;
        }
        Ok(archive)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    #[test]
    fn roundtrip_single_f32_array() {
        let dir = tmpdir();
        let path = dir.path().join("a.tmr");
        let mut ar = Archive::new();
        ar.insert("x", ArchiveArray::F32(ArrayD::zeros(IxDyn(&[2, 3])))).unwrap();
        ar.write(&path).unwrap();
        let back = Archive::read(&path).unwrap();
        assert_eq!(back.len(), 1);
        let x = back.get("x").unwrap();
        assert_eq!(x.shape(), &[2, 3]);
        assert_eq!(x, &ArchiveArray::F32(ArrayD::zeros(IxDyn(&[2, 3]))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ar = Archive::new();
        ar.insert("w", ArchiveArray::I64(ArrayD::zeros(IxDyn(&[1])))).unwrap();
        let err = ar.insert("w", ArchiveArray::I64(ArrayD::zeros(IxDyn(&[1])))).unwrap_err();
        assert!(matches!(err, Error::DuplicateName { .. }));
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tmpdir();
        let path = dir.path().join("bad.tmr");
        std::fs::write(&path, b"NOPE\0\0\0\0\0\0\0\0").unwrap();
        let err = Archive::read(&path).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
    }

    #[test]
    fn truncated_data_rejected() {
        let dir = tmpdir();
        let path = dir.path().join("t.tmr");
        let mut ar = Archive::new();
        let data = ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        ar.insert("v", ArchiveArray::F64(data)).unwrap();
        ar.write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        let err = Archive::read(&path).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }));
    }

    #[test]
    fn mismatched_length_rejected() {
        let dir = tmpdir();
        let path = dir.path().join("m.tmr");
        // Hand-build an archive whose manifest length disagrees with shape.
        let manifest = br#"[{"name":"x","dtype":"f32","shape":[2],"byte_offset":0,"byte_length":4}]"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"TMR1");
        bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        bytes.extend_from_slice(manifest);
        bytes.extend_from_slice(&[0u8; 4]);
        std::fs::write(&path, &bytes).unwrap();
        let err = Archive::read(&path).unwrap_err();
        assert!(matches!(err, Error::Manifest { .. }));
    }

    #[test]
    fn missing_name_reported() {
        let ar = Archive::new();
        let err = ar.get("absent").unwrap_err();
        assert!(matches!(err, Error::MissingArray { .. }));
    }
}
