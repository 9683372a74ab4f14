//! FLC1 binary serialization and CSV export for grid fields.
//!
//! Layout: a 16-byte header — magic `FLC1`, then rows, cols, channels as
//! little-endian u32 — followed by `rows * cols * channels` little-endian
//! 32-bit floats in cell-major order (`(r * cols + c) * channels + ch`).

use crate::error::{FlowError, Result};
use crate::grid::{DensityMap, FlowDirection, FlowField, GridShape, OpticalFlowField, CHANNELS};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"FLC1";

pub fn write_flc(path: &Path, rows: u32, cols: u32, channels: u32, data: &[f64]) -> Result<()> {
    if data.len() != (rows * cols * channels) as usize {
        return Err(FlowError::shape_mismatch(
            format!("{} values", rows * cols * channels),
            format!("{}", data.len()),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    w.write_all(&channels.to_le_bytes())?;
    for v in data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_flc(path: &Path) -> Result<(u32, u32, u32, Vec<f64>)> {
    let file_name = path.display().to_string();
    let parse = |detail: String| FlowError::Parse {
        file: file_name.clone(),
        detail,
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|e| parse(format!("header truncated at offset 0: {e}")))?;
    if &header[0..4] != MAGIC {
        return Err(parse("bad magic, expected FLC1".into()));
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap());
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap());
    let channels = u32::from_le_bytes(header[12..16].try_into().unwrap());
    let n = (rows as usize) * (cols as usize) * (channels as usize);
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| parse(format!("payload truncated, expected {n} floats: {e}")))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(parse("trailing bytes after payload".into()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((rows, cols, channels, data))
}

pub fn write_flow_field(path: &Path, field: &FlowField) -> Result<()> {
    let s = field.shape();
    write_flc(
        path,
        s.rows as u32,
        s.cols as u32,
        CHANNELS as u32,
        field.values(),
    )
}

pub fn read_flow_field(path: &Path, shape: GridShape, direction: FlowDirection) -> Result<FlowField> {
    let (rows, cols, channels, data) = read_flc(path)?;
    if rows as usize != shape.rows || cols as usize != shape.cols || channels as usize != CHANNELS {
        return Err(FlowError::shape_mismatch(
            format!("{shape} x{CHANNELS}"),
            format!("{rows}x{cols} x{channels}"),
        ));
    }
    FlowField::from_raw(shape, direction, data)
}

pub fn write_density(path: &Path, map: &DensityMap) -> Result<()> {
    let s = map.shape();
    write_flc(path, s.rows as u32, s.cols as u32, 1, map.values())
}

pub fn read_density(path: &Path, shape: GridShape) -> Result<DensityMap> {
    let (rows, cols, channels, data) = read_flc(path)?;
    if rows as usize != shape.rows || cols as usize != shape.cols || channels != 1 {
        return Err(FlowError::shape_mismatch(
            format!("{shape} x1"),
            format!("{rows}x{cols} x{channels}"),
        ));
    }
    DensityMap::from_values(shape, data)
}

pub fn write_optical(path: &Path, field: &OpticalFlowField) -> Result<()> {
    let s = field.shape;
    write_flc(path, s.rows as u32, s.cols as u32, 2, &field.uv)
}

pub fn read_optical(path: &Path, shape: GridShape) -> Result<OpticalFlowField> {
    let (rows, cols, channels, data) = read_flc(path)?;
    if rows as usize != shape.rows || cols as usize != shape.cols || channels != 2 {
        return Err(FlowError::shape_mismatch(
            format!("{shape} x2"),
            format!("{rows}x{cols} x{channels}"),
        ));
    }
    OpticalFlowField::from_uv(shape, data)
}

/// One row per cell, for eyeballing fields in a spreadsheet.
pub fn write_density_csv(path: &Path, map: &DensityMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "row,col,value")?;
    let s = map.shape();
    for r in 0..s.rows {
        for c in 0..s.cols {
            writeln!(w, "{r},{c},{}", fmt_float(map.get(r, c)))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_flow_csv(path: &Path, field: &FlowField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "row,col,nw,n,ne,w,self,e,sw,s,se,outside")?;
    let s = field.shape();
    for r in 0..s.rows {
        for c in 0..s.cols {
            let cell = s.index(r, c);
            let vals: Vec<String> = (0..CHANNELS)
                .map(|ch| fmt_float(field.get(cell, ch)))
                .collect();
            writeln!(w, "{r},{c},{}", vals.join(","))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Shortest round-trippable decimal form, stable across runs.
pub fn fmt_float(v: f64) -> String {
    format!("{v}")
}
