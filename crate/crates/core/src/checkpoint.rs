//! Checkpoints: a JSON header next to a flat little-endian f64 blob.
//!
//! `model.json` names every tensor with its shape and offset into
//! `model.bin`; the header also echoes the config, seed and epoch.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{GazeError, Result};
use crate::nn::{Mat, ParamSet};

pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f64-le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset in elements, not bytes.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: String,
    pub dtype: String,
    pub seed: u64,
    pub epoch: usize,
    pub config: serde_json::Value,
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Blob path paired with a header path (`x.json` → `x.bin`).
pub fn blob_path(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

pub struct CheckpointWriter<'a> {
    pub kind: &'a str,
    pub seed: u64,
    pub epoch: usize,
    pub config: serde_json::Value,
    pub extra: serde_json::Value,
}

impl CheckpointWriter<'_> {
    pub fn write(&self, path: &Path, tensors: &[(&str, &Mat)]) -> Result<()> {
        let mut entries = Vec::with_capacity(tensors.len());
        let mut offset = 0;
        for (name, m) in tensors {
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: [m.nrows(), m.ncols()],
                offset,
            });
            offset += m.len();
        }
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            kind: self.kind.to_string(),
            dtype: DTYPE.into(),
            seed: self.seed,
            epoch: self.epoch,
            config: self.config.clone(),
            extra: self.extra.clone(),
            tensors: entries,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| GazeError::io(dir, e))?;
        }
        let blob = blob_path(path);
        let f = fs::File::create(&blob).map_err(|e| GazeError::io(&blob, e))?;
        let mut w = BufWriter::new(f);
        for (_, m) in tensors {
            for &v in m.iter() {
                w.write_f64::<LittleEndian>(v).map_err(|e| GazeError::io(&blob, e))?;
            }
        }
        w.flush().map_err(|e| GazeError::io(&blob, e))?;
        let json = serde_json::to_string_pretty(&header).expect("header serializes");
        fs::write(path, json).map_err(|e| GazeError::io(path, e))?;
        Ok(())
    }

    pub fn write_params(&self, path: &Path, params: &ParamSet) -> Result<()> {
        let tensors: Vec<(&str, &Mat)> = params.iter().collect();
        self.write(path, &tensors)
    }
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Mat> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| GazeError::Validation(format!("checkpoint lacks tensor {name}")))
    }

    pub fn to_params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        for (n, m) in &self.tensors {
            ps.add(n.clone(), m.clone());
        }
        ps
    }

    pub fn config<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.header.config.clone())
            .map_err(|e| GazeError::Validation(format!("checkpoint config: {e}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(GazeError::Validation(format!(
                "expected a {kind} checkpoint, found {}",
                self.header.kind
            )));
        }
        Ok(())
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(GazeError::MissingArtifact(path.to_path_buf()));
    }
    let blob = blob_path(path);
    if !blob.exists() {
        return Err(GazeError::MissingArtifact(blob));
    }
    let text = fs::read_to_string(path).map_err(|e| GazeError::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&text).map_err(|e| GazeError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if header.format_version != FORMAT_VERSION || header.dtype != DTYPE {
        return Err(GazeError::Validation(format!(
            "unsupported checkpoint format {} / {}",
            header.format_version, header.dtype
        )));
    }
    let f = fs::File::open(&blob).map_err(|e| GazeError::io(&blob, e))?;
    let mut r = BufReader::new(f);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| GazeError::io(&blob, e))?;
    if bytes.len() % 8 != 0 {
        return Err(GazeError::DataIntegrity(format!(
            "{}: blob length {} is not a multiple of 8",
            blob.display(),
            bytes.len()
        )));
    }
    let mut cur = std::io::Cursor::new(bytes);
    let n = cur.get_ref().len() / 8;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(cur.read_f64::<LittleEndian>().expect("length checked"));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let len = t.shape[0] * t.shape[1];
        let slice = data.get(t.offset..t.offset + len).ok_or_else(|| {
            GazeError::DataIntegrity(format!(
                "{}: tensor {} extends past the blob",
                blob.display(),
                t.name
            ))
        })?;
        let m = Mat::from_shape_vec((t.shape[0], t.shape[1]), slice.to_vec()).expect("shape");
        tensors.push((t.name.clone(), m));
    }
    Ok(Checkpoint { header, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamSet::new();
        ps.add("a", ndarray::array![[1.0, -2.5], [3.0, 1e-300]]);
        ps.add("b", ndarray::array![[f64::MIN_POSITIVE, 7.0, 8.0]]);
        let path = dir.path().join("m.json");
        CheckpointWriter {
            kind: "test",
            seed: 9,
            epoch: 3,
            config: serde_json::json!({"k": 1}),
            extra: serde_json::Value::Null,
        }
        .write_params(&path, &ps)
        .unwrap();
        let ck = read_checkpoint(&path).unwrap();
        assert_eq!(ck.header.seed, 9);
        assert_eq!(ck.header.epoch, 3);
        assert_eq!(ck.to_params(), ps);
        assert!(ck.expect_kind("other").is_err());
    }

    #[test]
    fn missing_blob_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        assert!(matches!(read_checkpoint(&path), Err(GazeError::MissingArtifact(_))));
        CheckpointWriter {
            kind: "t",
            seed: 0,
            epoch: 0,
            config: serde_json::Value::Null,
            extra: serde_json::Value::Null,
        }
        .write(&path, &[])
        .unwrap();
        fs::remove_file(blob_path(&path)).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(GazeError::MissingArtifact(_))));
    }
}
