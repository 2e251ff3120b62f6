//! On-disk formats: `.evt` event records, P5 PGM frames and the JSON manifest.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Event, EventStream, Frame, GazeLabel, GazeSample, Polarity};
use crate::error::{GazeError, Result};
use crate::geom::ScreenGeometry;

/// Bytes per `.evt` record: x u16, y u16, t u64, polarity i8, pad i8.
pub const EVENT_RECORD_BYTES: usize = 14;

pub fn write_events(path: &Path, events: &[Event]) -> Result<()> {
    let file = File::create(path).map_err(|e| GazeError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        for e in events {
            w.write_u16::<LittleEndian>(e.x)?;
            w.write_u16::<LittleEndian>(e.y)?;
            w.write_u64::<LittleEndian>(e.t)?;
            w.write_i8(e.polarity.as_i8())?;
            w.write_i8(0)?;
        }
        w.flush()
    };
    write().map_err(|e| GazeError::io(path, e))
}

pub fn read_events(path: &Path) -> Result<Vec<Event>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| GazeError::io(path, e))?;
    decode_events(&bytes).map_err(|(offset, message)| GazeError::Parse {
        path: path.to_path_buf(),
        line: 0,
        column: offset,
        message,
    })
}

/// Decodes raw records; errors carry the byte offset of the bad record.
pub fn decode_events(bytes: &[u8]) -> std::result::Result<Vec<Event>, (usize, String)> {
    if !bytes.len().is_multiple_of(EVENT_RECORD_BYTES) {
        return Err((
            bytes.len() - bytes.len() % EVENT_RECORD_BYTES,
            format!(
                "truncated record: length {} is not a multiple of {EVENT_RECORD_BYTES}",
                bytes.len()
            ),
        ));
    }
    let mut out = Vec::with_capacity(bytes.len() / EVENT_RECORD_BYTES);
    for (k, mut rec) in bytes.chunks_exact(EVENT_RECORD_BYTES).enumerate() {
        let offset = k * EVENT_RECORD_BYTES;
        let x = rec.read_u16::<LittleEndian>().unwrap();
        let y = rec.read_u16::<LittleEndian>().unwrap();
        let t = rec.read_u64::<LittleEndian>().unwrap();
        let p = rec.read_i8().unwrap();
        let polarity =
            Polarity::from_i8(p).ok_or_else(|| (offset, format!("invalid polarity byte {p}")))?;
        out.push(Event::new(x, y, t, polarity));
    }
    Ok(out)
}

/// Quantizes to 8 bits and writes a binary graymap.
pub fn write_pgm(path: &Path, intensity: &Array2<f64>) -> Result<()> {
    let (h, w) = intensity.dim();
    let pixels: Vec<u8> = intensity
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let file = File::create(path).map_err(|e| GazeError::io(path, e))?;
    let enc = PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    enc.write_image(&pixels, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| GazeError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

pub fn read_pgm(path: &Path) -> Result<Array2<f64>> {
    let img = image::ImageReader::open(path)
        .map_err(|e| GazeError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| GazeError::io(path, e))?
        .decode()
        .map_err(|e| GazeError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    let data: Vec<f64> = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Ok(Array2::from_shape_vec((h as usize, w as usize), data).expect("decoded size"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub frame: String,
    pub events: String,
    pub row: usize,
    pub col: usize,
    pub screen_x: f64,
    pub screen_y: f64,
    pub split: Split,
    pub subject: String,
    /// Frame exposure time in microseconds.
    #[serde(default)]
    pub frame_t: u64,
    /// Event window `[start, end)` in microseconds.
    #[serde(default)]
    pub window: [u64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub grid: usize,
    pub screen: ScreenGeometry,
    pub samples: Vec<ManifestEntry>,
    /// Directory the relative sample paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Structural checks that do not touch the filesystem.
    pub fn validate_structure(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(GazeError::Validation(format!("grid {} < 2", self.grid)));
        }
        self.screen.validate()?;
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for (k, s) in self.samples.iter().enumerate() {
            if s.row >= self.grid || s.col >= self.grid {
                return Err(GazeError::Validation(format!(
                    "sample {k} cell ({}, {}) outside {}x{} grid",
                    s.row, s.col, self.grid, self.grid
                )));
            }
            for path in [s.frame.as_str(), s.events.as_str()] {
                if let Some(prev) = seen.insert(path, s.split) {
                    if prev != s.split {
                        return Err(GazeError::Validation(format!(
                            "{path} tagged both {prev:?} and {:?}; splits must be disjoint",
                            s.split
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn validate_files(&self) -> Result<()> {
        for s in &self.samples {
            for rel in [&s.frame, &s.events] {
                let p = self.resolve(rel);
                if !p.is_file() {
                    return Err(GazeError::MissingArtifact(p));
                }
            }
        }
        Ok(())
    }

    pub fn load_sample(&self, index: usize) -> Result<GazeSample> {
        let entry = &self.samples[index];
        let intensity = read_pgm(&self.resolve(&entry.frame))?;
        let (h, w) = intensity.dim();
        let frame = Frame::new(intensity, entry.frame_t)?;
        let events = read_events(&self.resolve(&entry.events))?;
        let [t0, t1] = entry.window;
        let t1 = if t1 == 0 {
            events.last().map_or(1, |e| e.t + 1)
        } else {
            t1
        };
        let events = EventStream::new(events, w, h, t0, t1)?;
        let screen_px = [entry.screen_x, entry.screen_y];
        let label = GazeLabel {
            row: entry.row,
            col: entry.col,
            screen_px,
            direction: self.screen.screen_to_gaze_vector(screen_px)?,
        };
        Ok(GazeSample {
            frame,
            events,
            label,
            subject_id: entry.subject.clone(),
        })
    }
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| GazeError::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| GazeError::io(path, e))
}

/// Reads and validates a manifest; sample paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| GazeError::io(path, e))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| GazeError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate_structure()?;
    manifest.validate_files()?;
    Ok(manifest)
}
