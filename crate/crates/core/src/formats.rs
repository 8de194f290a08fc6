//! On-disk formats: CPR1 rasters, CPS1 sinograms and 16-bit PGM export.
//!
//! Byte layouts (all integers and floats little-endian):
//!
//! ```text
//! CPR1:  magic b"CPR1", u32 width, u32 height,
//!        then width*height f32 values, row-major.
//!
//! CPS1:  magic b"CPS1", u8 beam (0 = parallel, 1 = fan),
//!        u32 detector_count, f64 span,
//!        f64 source_to_center, f64 source_to_detector (both 0 for parallel),
//!        u32 view_count, view_count f64 angles (radians),
//!        then detector_count*view_count f32 values, detector-major
//!        (all views of bin 0, then bin 1, ...).
//! ```
//!
//! Write → read → write is byte-identical for both formats. PGM export is a
//! viewing convenience: binary `P5`, maxval 65535, min-max scaled, big-endian
//! samples as the PNM spec requires.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::ct::{Beam, CtError, Geometry, Raster, Sinogram};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes: expected {expected}, found {found:?}")]
    BadMagic { expected: &'static str, found: [u8; 4] },
    #[error("unknown beam tag {0}")]
    BadBeamTag(u8),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("invalid contents: {0}")]
    Invalid(#[from] CtError),
}

const RASTER_MAGIC: &[u8; 4] = b"CPR1";
const SINO_MAGIC: &[u8; 4] = b"CPS1";

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32, FormatError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| FormatError::Truncated(what))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, what: &'static str) -> Result<f64, FormatError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| FormatError::Truncated(what))?;
    Ok(f64::from_le_bytes(b))
}

fn read_f32_vec(r: &mut impl Read, n: usize, what: &'static str) -> Result<Vec<f32>, FormatError> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|_| FormatError::Truncated(what))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_raster(path: &Path, raster: &Raster) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(RASTER_MAGIC)?;
    w.write_all(&(raster.width() as u32).to_le_bytes())?;
    w.write_all(&(raster.height() as u32).to_le_bytes())?;
    for &v in raster.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_raster(path: &Path) -> Result<Raster, FormatError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| FormatError::Truncated("magic"))?;
    if &magic != RASTER_MAGIC {
        return Err(FormatError::BadMagic { expected: "CPR1", found: magic });
    }
    let width = read_u32(&mut r, "width")? as usize;
    let height = read_u32(&mut r, "height")? as usize;
    let data = read_f32_vec(&mut r, width * height, "pixels")?;
    Ok(Raster::new(width, height, data)?)
}

pub fn write_sinogram(path: &Path, sino: &Sinogram) -> Result<(), FormatError> {
    let g = sino.geometry();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SINO_MAGIC)?;
    let (tag, dso, sdd) = match g.beam {
        Beam::Parallel => (0u8, 0.0, 0.0),
        Beam::Fan { source_to_center, source_to_detector } => {
            (1u8, source_to_center, source_to_detector)
        }
    };
    w.write_all(&[tag])?;
    w.write_all(&(g.detector_count as u32).to_le_bytes())?;
    w.write_all(&g.span.to_le_bytes())?;
    w.write_all(&dso.to_le_bytes())?;
    w.write_all(&sdd.to_le_bytes())?;
    w.write_all(&(g.view_count() as u32).to_le_bytes())?;
    for &a in &g.angles {
        w.write_all(&a.to_le_bytes())?;
    }
    for k in 0..g.detector_count {
        for v in 0..g.view_count() {
            w.write_all(&sino.at(k, v).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram, FormatError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| FormatError::Truncated("magic"))?;
    if &magic != SINO_MAGIC {
        return Err(FormatError::BadMagic { expected: "CPS1", found: magic });
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag).map_err(|_| FormatError::Truncated("beam tag"))?;
    let detector_count = read_u32(&mut r, "detector_count")? as usize;
    let span = read_f64(&mut r, "span")?;
    let dso = read_f64(&mut r, "source_to_center")?;
    let sdd = read_f64(&mut r, "source_to_detector")?;
    let beam = match tag[0] {
        0 => Beam::Parallel,
        1 => Beam::Fan { source_to_center: dso, source_to_detector: sdd },
        t => return Err(FormatError::BadBeamTag(t)),
    };
    let view_count = read_u32(&mut r, "view_count")? as usize;
    let mut angles = Vec::with_capacity(view_count);
    for _ in 0..view_count {
        angles.push(read_f64(&mut r, "angles")?);
    }
    let detector_major = read_f32_vec(&mut r, detector_count * view_count, "values")?;
    let mut values = vec![0.0f32; detector_count * view_count];
    for k in 0..detector_count {
        for v in 0..view_count {
            values[v * detector_count + k] = detector_major[k * view_count + v];
        }
    }
    let geometry = Geometry::new(beam, detector_count, span, angles)?;
    Ok(Sinogram::new(geometry, values)?)
}

/// 16-bit binary PGM, min-max scaled over the raster's value range.
pub fn write_pgm16(path: &Path, raster: &Raster) -> Result<(), FormatError> {
    let (lo, hi) = raster.min_max();
    let scale = if hi > lo { 65535.0 / (hi - lo) as f64 } else { 0.0 };
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n65535\n", raster.width(), raster.height())?;
    for &v in raster.data() {
        let q = (((v - lo) as f64) * scale).round().clamp(0.0, 65535.0) as u16;
        w.write_all(&q.to_be_bytes())?;
    }
    w.flush()?;
    Ok(())
}
