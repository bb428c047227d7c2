//! Checkpoints, raster I/O and run manifests.
//!
//! Checkpoints are a self-describing binary container: a versioned header
//! with the model-config digest, then one entry per tensor (name, shape,
//! raw little-endian values). In 64-bit mode the round trip is bit-exact.
//! Masks are 8-bit single-channel PNGs whose pixel value is the object id;
//! frames are 8-bit RGB PNGs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{fp_mode, FpMode};
use crate::embedding::{Frame, LabelRaster};
use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

// ── Checkpoints ─────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 4] = b"OVCK";
const CKPT_VERSION: u32 = 1;

/// One named tensor in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_digest: String,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn entry(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    let dtype: u8 = match fp_mode() {
        FpMode::F64 => 0,
        FpMode::F32 => 1,
    };
    w.write_all(&[dtype])?;
    let digest = ckpt.config_digest.as_bytes();
    w.write_all(&(digest.len() as u32).to_le_bytes())?;
    w.write_all(digest)?;
    w.write_all(&(ckpt.entries.len() as u32).to_le_bytes())?;
    for e in &ckpt.entries {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[e.shape.len() as u8])?;
        for &d in &e.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        match dtype {
            0 => {
                for &v in &e.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            _ => {
                for &v in &e.data {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)?;
    if dtype[0] > 1 {
        return Err(Error::Checkpoint(format!("unknown dtype {}", dtype[0])));
    }
    let digest_len = read_u32(&mut r)? as usize;
    let mut digest = vec![0u8; digest_len];
    r.read_exact(&mut digest)?;
    let config_digest = String::from_utf8(digest)
        .map_err(|_| Error::Checkpoint("digest is not utf-8".into()))?;
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not utf-8".into()))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        if dtype[0] == 0 {
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
        } else {
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
        entries.push(CheckpointEntry { name, shape, data });
    }
    Ok(Checkpoint {
        config_digest,
        entries,
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

// ── Rasters ─────────────────────────────────────────────────────────

pub fn save_mask(path: &Path, mask: &LabelRaster) -> Result<()> {
    let img = image::GrayImage::from_raw(mask.w as u32, mask.h as u32, mask.labels.clone())
        .ok_or_else(|| Error::Geometry("mask buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<LabelRaster> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    LabelRaster::from_labels(h, w, img.into_raw())
}

pub fn save_frame(path: &Path, frame: &Frame) -> Result<()> {
    let mut buf = Vec::with_capacity(frame.h * frame.w * 3);
    for y in 0..frame.h {
        for x in 0..frame.w {
            for c in frame.pixel(y, x) {
                buf.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let img = image::RgbImage::from_raw(frame.w as u32, frame.h as u32, buf)
        .ok_or_else(|| Error::Geometry("frame buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn load_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut frame = Frame::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            frame.set_pixel(
                y,
                x,
                [
                    p[0] as f64 / 255.0,
                    p[1] as f64 / 255.0,
                    p[2] as f64 / 255.0,
                ],
            );
        }
    }
    Ok(frame)
}

/// PNG files of a directory in lexicographic order.
pub fn list_rasters(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no png files in {}", dir.display()),
        )));
    }
    Ok(out)
}

// ── Run manifests ───────────────────────────────────────────────────

/// Written once per CLI run: the resolved configuration, seed and outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub model_digest: String,
    pub config_toml: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest parse: {e}")))
    }
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
