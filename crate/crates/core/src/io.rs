//! Binary frame sequences, TOML config loading, and CSV export.
//!
//! A `.frames` file holds one simulation iteration: a fixed boundary
//! sampling (positions + inward normals), the rotation that opened the
//! iteration, and per-frame fluid positions and velocities. All numbers are
//! little-endian f64/u32. Writes go through a temp file in the target
//! directory and a rename, so readers never observe a half-written file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};
use crate::math::Vec3;

pub const FRAME_MAGIC: [u8; 4] = *b"SLF1";
pub const FRAME_VERSION: u32 = 1;

/// Fluid state of a single frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
}

/// One simulation iteration as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFile {
    pub dt: f64,
    /// Rotation applied to the chained state at the start of the iteration.
    pub pitch: f64,
    pub roll: f64,
    pub fill_fraction: f64,
    pub boundary_positions: Vec<Vec3>,
    pub boundary_normals: Vec<Vec3>,
    pub frames: Vec<FrameData>,
}

impl FrameFile {
    pub fn n_fluid(&self) -> usize {
        self.frames.first().map_or(0, |f| f.positions.len())
    }
}

fn put_u32(w: &mut impl Write, v: u32, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

fn put_f64(w: &mut impl Write, v: f64, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

fn put_vec3s(w: &mut impl Write, vs: &[Vec3], path: &Path) -> Result<()> {
    for v in vs {
        for c in v.to_array() {
            put_f64(w, c, path)?;
        }
    }
    Ok(())
}

fn get_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::corrupt(path, "unexpected end of file"))?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read, path: &Path) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::corrupt(path, "unexpected end of file"))?;
    Ok(f64::from_le_bytes(b))
}

fn get_vec3s(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<Vec3>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x = get_f64(r, path)?;
        let y = get_f64(r, path)?;
        let z = get_f64(r, path)?;
        let v = crate::math::vec3(x, y, z);
        if !v.is_finite() {
            return Err(Error::corrupt(path, "non-finite coordinate"));
        }
        out.push(v);
    }
    Ok(out)
}

pub fn write_frames(path: &Path, file: &FrameFile) -> Result<()> {
    for f in &file.frames {
        if f.positions.len() != file.n_fluid() || f.velocities.len() != f.positions.len() {
            return Err(Error::Config(
                "inconsistent fluid counts across frames".into(),
            ));
        }
    }
    if file.boundary_normals.len() != file.boundary_positions.len() {
        return Err(Error::Config("boundary normals/positions mismatch".into()));
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        w.write_all(&FRAME_MAGIC).map_err(|e| Error::io(path, e))?;
        put_u32(&mut w, FRAME_VERSION, path)?;
        put_u32(&mut w, file.frames.len() as u32, path)?;
        put_u32(&mut w, file.n_fluid() as u32, path)?;
        put_u32(&mut w, file.boundary_positions.len() as u32, path)?;
        put_f64(&mut w, file.dt, path)?;
        put_f64(&mut w, file.pitch, path)?;
        put_f64(&mut w, file.roll, path)?;
        put_f64(&mut w, file.fill_fraction, path)?;
        put_vec3s(&mut w, &file.boundary_positions, path)?;
        put_vec3s(&mut w, &file.boundary_normals, path)?;
        for f in &file.frames {
            put_vec3s(&mut w, &f.positions, path)?;
            put_vec3s(&mut w, &f.velocities, path)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path)
        .map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_frames(path: &Path) -> Result<FrameFile> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::corrupt(path, "file too short for header"))?;
    if magic != FRAME_MAGIC {
        return Err(Error::corrupt(path, "bad magic"));
    }
    let version = get_u32(&mut r, path)?;
    if version != FRAME_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FRAME_VERSION,
        });
    }
    let n_frames = get_u32(&mut r, path)? as usize;
    let n_fluid = get_u32(&mut r, path)? as usize;
    let n_boundary = get_u32(&mut r, path)? as usize;
    if n_frames > 1_000_000 || n_fluid > 100_000_000 || n_boundary > 100_000_000 {
        return Err(Error::corrupt(path, "implausible counts in header"));
    }
    let dt = get_f64(&mut r, path)?;
    if !(dt > 0.0) {
        return Err(Error::corrupt(path, "non-positive dt"));
    }
    let pitch = get_f64(&mut r, path)?;
    let roll = get_f64(&mut r, path)?;
    let fill_fraction = get_f64(&mut r, path)?;
    let boundary_positions = get_vec3s(&mut r, n_boundary, path)?;
    let boundary_normals = get_vec3s(&mut r, n_boundary, path)?;
    let mut frames = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        let positions = get_vec3s(&mut r, n_fluid, path)?;
        let velocities = get_vec3s(&mut r, n_fluid, path)?;
        frames.push(FrameData {
            positions,
            velocities,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::corrupt(path, "trailing bytes after payload"));
    }
    Ok(FrameFile {
        dt,
        pitch,
        roll,
        fill_fraction,
        boundary_positions,
        boundary_normals,
        frames,
    })
}

/// Parses a TOML config file into any deserializable type.
pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::ConfigParse(format!("{}: {e}", path.display())))
}

pub fn save_toml<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value)
        .map_err(|e| Error::ConfigParse(format!("{}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes fluid positions and velocities of every frame as CSV with columns
/// frame,id,x,y,z,vx,vy,vz.
pub fn export_csv(path: &Path, frames: &[FrameData]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "frame,id,x,y,z,vx,vy,vz").map_err(|e| Error::io(path, e))?;
    for (fi, frame) in frames.iter().enumerate() {
        for (i, (p, v)) in frame.positions.iter().zip(&frame.velocities).enumerate() {
            writeln!(
                w,
                "{fi},{i},{},{},{},{},{},{}",
                p.x, p.y, p.z, v.x, v.y, v.z
            )
            .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
