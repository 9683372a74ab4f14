//! Dataset directories: export from the simulator, load for training.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json              simulator config + keyframe interval
//! annotations.json           head points per annotated frame
//! frames/frame_000000.pgm    8-bit grayscale observation frames
//! flows/flow_000000.flc1     ground-truth flow for the pair (t, t+1)
//! optical/optical_000000.flc1  ground-truth optical flow, same pairing
//! ```
//!
//! Everything is a pure function of the simulator config, so exporting the
//! same config twice produces byte-identical directories.

use crate::error::{FlowError, Result};
use crate::flc;
use crate::grid::{DensityMap, FlowDirection, FlowField, GridShape, OpticalFlowField};
use crate::render::{bin_heads, render_density, AnnotationFrame, Homography, KernelSpec};
use crate::sim::{self, ObservationFrame, SimConfig};
use crate::train::Sequence;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub sim: SimConfig,
    pub keyframe_interval: usize,
}

/// The annotation exchange document: one JSON file per sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationDoc {
    pub frames: Vec<AnnotationEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homography: Option<[f64; 9]>,
    pub fps: f64,
    pub image_w: usize,
    pub image_h: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationEntry {
    pub t: usize,
    pub heads: Vec<(f64, f64)>,
}

pub fn write_pgm_bytes(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != width * height {
        return Err(FlowError::shape_mismatch(
            format!("{} pixels", width * height),
            format!("{}", bytes.len()),
        ));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

pub fn write_pgm(path: &Path, frame: &ObservationFrame) -> Result<()> {
    let bytes: Vec<u8> = frame
        .pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_pgm_bytes(path, frame.width(), frame.height(), &bytes)
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file_name = path.display().to_string();
    let parse = |detail: String| FlowError::Parse {
        file: file_name.clone(),
        detail,
    };
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    // Token-wise header parse: magic, width, height, maxval, then one
    // whitespace byte before the payload.
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> std::result::Result<String, String> {
        while pos < bytes.len() {
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(&bytes).map_err(|e| parse(e))?;
    if magic != "P5" {
        return Err(parse(format!("expected P5, got {magic}")));
    }
    let width: usize = token(&bytes)
        .map_err(|e| parse(e))?
        .parse()
        .map_err(|e| parse(format!("bad width: {e}")))?;
    let height: usize = token(&bytes)
        .map_err(|e| parse(e))?
        .parse()
        .map_err(|e| parse(format!("bad height: {e}")))?;
    let maxval: usize = token(&bytes)
        .map_err(|e| parse(e))?
        .parse()
        .map_err(|e| parse(format!("bad maxval: {e}")))?;
    if maxval != 255 {
        return Err(parse(format!("unsupported maxval {maxval}")));
    }
    pos += 1;
    let payload = bytes
        .get(pos..pos + width * height)
        .ok_or_else(|| parse(format!("payload truncated at offset {pos}")))?;
    Ok((width, height, payload.to_vec()))
}

fn frame_from_bytes(shape: GridShape, bytes: &[u8]) -> ObservationFrame {
    ObservationFrame {
        shape,
        pixels: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
    }
}

fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join("frames").join(format!("frame_{t:06}.pgm"))
}

fn flow_path(dir: &Path, t: usize) -> PathBuf {
    dir.join("flows").join(format!("flow_{t:06}.flc1"))
}

fn optical_path(dir: &Path, t: usize) -> PathBuf {
    dir.join("optical").join(format!("optical_{t:06}.flc1"))
}

/// Runs the configured simulation and writes the full dataset directory.
/// Annotations are written every `keyframe_interval` frames.
pub fn export_dataset(config: &SimConfig, keyframe_interval: usize, out: &Path) -> Result<()> {
    if keyframe_interval == 0 {
        return Err(FlowError::Config("keyframe interval must be >= 1".into()));
    }
    config.validate()?;
    fs::create_dir_all(out.join("frames"))?;
    fs::create_dir_all(out.join("flows"))?;
    fs::create_dir_all(out.join("optical"))?;
    let shape = config.shape;
    let states = sim::run(config)?;
    let mut entries = Vec::new();
    for (t, state) in states.iter().enumerate() {
        write_pgm(&frame_path(out, t), &sim::rasterize(state, config))?;
        if t % keyframe_interval == 0 {
            entries.push(AnnotationEntry {
                t,
                heads: state.head_pixels(shape),
            });
        }
    }
    for (t, w) in states.windows(2).enumerate() {
        let flow = sim::ground_truth_flow(&w[0], &w[1], shape)?;
        flc::write_flow_field(&flow_path(out, t), &flow)?;
        let optical = sim::ground_truth_optical(&w[0], &w[1], shape);
        flc::write_optical(&optical_path(out, t), &optical)?;
    }
    let doc = AnnotationDoc {
        frames: entries,
        homography: None,
        fps: 30.0,
        image_w: shape.width_px(),
        image_h: shape.height_px(),
    };
    write_json(&out.join(ANNOTATIONS_FILE), &doc)?;
    let manifest = DatasetManifest {
        format: "flowcount-dataset-v1".into(),
        sim: *config,
        keyframe_interval,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| FlowError::Parse {
        file: path.display().to_string(),
        detail: e.to_string(),
    })
}

/// A loaded dataset, validated for shape consistency and annotation
/// coverage.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub shape: GridShape,
    pub sequence: Sequence,
    pub annotations: BTreeMap<usize, AnnotationFrame>,
    pub homography: Option<Homography>,
    pub fps: f64,
    /// Ground-truth flow for the pair (t, t+1), keyed by t, when exported.
    pub flows: BTreeMap<usize, FlowField>,
    /// Reference optical flow for the pair (t, t+1), keyed by t.
    pub optical: BTreeMap<usize, OpticalFlowField>,
    /// Keyframe interval inferred from annotation gaps.
    pub keyframe_interval: usize,
    pub manifest: DatasetManifest,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let shape = manifest.sim.shape;
    let n_frames = manifest.sim.n_frames;

    let mut frames = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let path = frame_path(dir, t);
        let (w, h, bytes) = read_pgm(&path)?;
        if w != shape.width_px() || h != shape.height_px() {
            return Err(FlowError::shape_mismatch(
                format!("{}x{} frame", shape.width_px(), shape.height_px()),
                format!("{w}x{h} in {}", path.display()),
            ));
        }
        frames.push(frame_from_bytes(shape, &bytes));
    }
    let sequence = Sequence::new(frames)?;

    let doc: AnnotationDoc = read_json(&dir.join(ANNOTATIONS_FILE))?;
    if doc.image_w != shape.width_px() || doc.image_h != shape.height_px() {
        return Err(FlowError::shape_mismatch(
            format!("{}x{} annotations", shape.width_px(), shape.height_px()),
            format!("{}x{}", doc.image_w, doc.image_h),
        ));
    }
    let mut annotations = BTreeMap::new();
    for entry in &doc.frames {
        if entry.t >= n_frames {
            return Err(FlowError::Parse {
                file: dir.join(ANNOTATIONS_FILE).display().to_string(),
                detail: format!("annotation for frame {} beyond {n_frames} frames", entry.t),
            });
        }
        let frame = AnnotationFrame::new(entry.t, entry.heads.clone());
        frame.validate(Some(shape))?;
        annotations.insert(entry.t, frame);
    }

    // Keyframe interval from annotation gaps; declared keyframes must all
    // be present.
    let annotated: Vec<usize> = annotations.keys().copied().collect();
    let inferred = annotated
        .windows(2)
        .map(|w| w[1] - w[0])
        .min()
        .unwrap_or(manifest.keyframe_interval.max(1));
    let declared = manifest.keyframe_interval.max(1);
    let mut t = *annotated.first().unwrap_or(&0);
    while t < n_frames {
        if !annotations.contains_key(&t) && !annotated.is_empty() {
            return Err(FlowError::Parse {
                file: dir.join(ANNOTATIONS_FILE).display().to_string(),
                detail: format!(
                    "missing annotation for declared keyframe {t} (interval {declared})"
                ),
            });
        }
        t += declared;
    }

    let homography = match doc.homography {
        Some(m) => Some(Homography::new(m)?),
        None => None,
    };

    let mut flows = BTreeMap::new();
    let mut optical = BTreeMap::new();
    for t in 0..n_frames.saturating_sub(1) {
        let fp = flow_path(dir, t);
        if fp.exists() {
            flows.insert(t, flc::read_flow_field(&fp, shape, FlowDirection::Forward)?);
        }
        let op = optical_path(dir, t);
        if op.exists() {
            optical.insert(t, flc::read_optical(&op, shape)?);
        }
    }

    Ok(Dataset {
        shape,
        sequence,
        annotations,
        homography,
        fps: doc.fps,
        flows,
        optical,
        keyframe_interval: inferred,
        manifest,
    })
}

impl Dataset {
    /// Smoothed density targets rendered from the head annotations.
    pub fn density_targets(&self, kernel: &KernelSpec) -> Result<BTreeMap<usize, DensityMap>> {
        self.annotations
            .iter()
            .map(|(&t, frame)| Ok((t, render_density(frame, kernel, self.shape)?)))
            .collect()
    }

    /// Unsmoothed integer head counts per cell.
    pub fn count_targets(&self) -> Result<BTreeMap<usize, DensityMap>> {
        self.annotations
            .iter()
            .map(|(&t, frame)| Ok((t, bin_heads(frame, self.shape)?)))
            .collect()
    }

    /// (frame, true ROI count) pairs for every annotated frame that has a
    /// predecessor, the unit evaluation works on.
    pub fn eval_frames(&self, roi: Option<&[bool]>) -> Result<Vec<(usize, f64)>> {
        let counts = self.count_targets()?;
        Ok(counts
            .iter()
            .filter(|(&t, _)| t >= 1)
            .map(|(&t, map)| {
                let z = match roi {
                    None => map.total(),
                    Some(mask) => map
                        .values()
                        .iter()
                        .zip(mask)
                        .filter(|(_, &m)| m)
                        .map(|(v, _)| v)
                        .sum(),
                };
                (t, z)
            })
            .collect())
    }
}
