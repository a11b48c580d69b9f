//! RGB-D sequence ingestion and the binary file formats shared with external
//! tools.
//!
//! # Sequence layouts
//!
//! Both layouts keep one file group per frame, `frame-NNNNNN.*`, plus a
//! per-sequence `intrinsics.txt` (`fx`, `fy`, `cx`, `cy`, `width`, `height` as
//! `key = value` lines). A frame may override it with
//! `frame-NNNNNN.intrinsics.txt`.
//!
//! * `seven_scenes_like`: `color.png` (8-bit RGB), `depth.png` (16-bit
//!   millimetres, `0` and `65535` invalid), `pose.txt` (4×4 row-major
//!   camera-to-world matrix).
//! * `synthetic_native`: as above, but depth is stored losslessly in
//!   `depth.bin` (see [`encode_depth`]).
//!
//! # Prediction file (`.pred`), little-endian
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `SCRP` |
//! | 4 | version `u32` = 1 |
//! | 4 | frame index `u32` |
//! | 4 | grid width `u32` |
//! | 4 | grid height `u32` |
//! | 12·w·h | row-major `f32` triples (x, y, z) in metres |
//! | ⌈w·h/8⌉ | validity bitmap, cell `i` is bit `i % 8` of byte `i / 8` |
//!
//! # Scene model file, little-endian
//!
//! magic `SCPM`, version `u32` = 1, point count `u64`, then `count` `f32`
//! triples (positions) followed by `count` `u8` triples (RGB).

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, RgbImage};
use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, DepthImage, RigidPose};
use crate::predictor::PredictionGrid;
use crate::refine::ScenePointModel;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("format error in {path}: {reason}")]
    FormatError { path: PathBuf, reason: String },
    #[error("frame {0} has no pose file")]
    MissingPose(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

fn format_err(path: &Path, reason: impl Into<String>) -> IoError {
    IoError::FormatError {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub index: u32,
    pub rgb: RgbImage,
    pub depth: DepthImage,
    /// Camera-to-world pose.
    pub pose: RigidPose,
    pub intrinsics: CameraIntrinsics,
}

impl FrameRecord {
    /// Pixel colour scaled to `[0, 1]`.
    pub fn colour(&self, x: usize, y: usize) -> [f64; 3] {
        let p = self.rgb.get_pixel(x as u32, y as u32).0;
        [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceFormat {
    SevenScenesLike,
    SyntheticNative,
}

impl std::str::FromStr for SequenceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seven_scenes_like" => Ok(Self::SevenScenesLike),
            "synthetic_native" => Ok(Self::SyntheticNative),
            other => Err(format!("unknown sequence format `{other}`")),
        }
    }
}

pub const INTRINSICS_FILE: &str = "intrinsics.txt";

fn frame_file(dir: &Path, index: u32, suffix: &str) -> PathBuf {
    dir.join(format!("frame-{index:06}.{suffix}"))
}

#[derive(Deserialize, Serialize)]
struct IntrinsicsFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics, IoError> {
    let text = fs::read_to_string(path)?;
    let f: IntrinsicsFile = toml::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
    CameraIntrinsics::new(f.fx, f.fy, f.cx, f.cy, f.width, f.height)
        .map_err(|e| format_err(path, e.to_string()))
}

pub fn write_intrinsics(k: &CameraIntrinsics, path: &Path) -> Result<(), IoError> {
    let f = IntrinsicsFile {
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
        width: k.width,
        height: k.height,
    };
    fs::write(path, toml::to_string(&f).expect("intrinsics serialise"))?;
    Ok(())
}

pub fn read_pose(path: &Path) -> Result<RigidPose, IoError> {
    let text = fs::read_to_string(path)?;
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| format_err(path, e.to_string()))?;
    if values.len() != 16 {
        return Err(format_err(path, format!("expected 16 values, found {}", values.len())));
    }
    let m = Matrix4::from_row_slice(&values);
    let pose = RigidPose {
        rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
        translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
    };
    // recorded poses are only orthonormal to a few decimal places
    if !pose.is_valid(1e-2) {
        return Err(format_err(path, "rotation block is not a rotation"));
    }
    Ok(pose.orthonormalized())
}

pub fn write_pose(pose: &RigidPose, path: &Path) -> Result<(), IoError> {
    let m = pose.to_matrix4();
    let mut s = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:.17e}", m[(r, c)])).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Depth as 16-bit millimetres; `0` and `65535` are invalid.
fn read_depth_png(path: &Path) -> Result<DepthImage, IoError> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let values = img
        .pixels()
        .map(|p| match p.0[0] {
            0 | u16::MAX => 0.0,
            mm => mm as f32 / 1000.0,
        })
        .collect();
    Ok(DepthImage::from_values(w as usize, h as usize, values))
}

fn write_depth_png(depth: &DepthImage, path: &Path) -> Result<(), IoError> {
    let buf: Vec<u16> = depth
        .values()
        .iter()
        .map(|&d| {
            if d > 0.0 {
                (d * 1000.0).round().clamp(1.0, 65534.0) as u16
            } else {
                u16::MAX
            }
        })
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width as u32, depth.height as u32, buf).expect("depth buffer size");
    img.save(path)?;
    Ok(())
}

const DEPTH_MAGIC: &[u8; 4] = b"SCDP";

/// Lossless depth: magic `SCDP`, width `u32`, height `u32`, row-major `f32`
/// metres (`0` invalid), all little-endian.
pub fn encode_depth(depth: &DepthImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * depth.values().len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(depth.width as u32).to_le_bytes());
    out.extend_from_slice(&(depth.height as u32).to_le_bytes());
    for d in depth.values() {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8], path: &Path) -> Result<DepthImage, IoError> {
    let mut r = Reader::new(bytes, path);
    r.magic(DEPTH_MAGIC)?;
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    let values = (0..w * h).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
    r.finish()?;
    Ok(DepthImage::from_values(w, h, values))
}

fn frame_indices(dir: &Path) -> Result<Vec<u32>, IoError> {
    let mut indices = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(rest) = name.strip_prefix("frame-") {
            if let Some(num) = rest.strip_suffix(".color.png") {
                if let Ok(i) = num.parse::<u32>() {
                    indices.push(i);
                }
            }
        }
    }
    indices.sort_unstable();
    Ok(indices)
}

/// Loads every frame in `dir`, in index order.
pub fn load_sequence(dir: &Path, format: SequenceFormat) -> Result<Vec<FrameRecord>, IoError> {
    let shared = dir.join(INTRINSICS_FILE);
    let shared = if shared.exists() {
        Some(read_intrinsics(&shared)?)
    } else {
        None
    };
    let mut frames = Vec::new();
    for index in frame_indices(dir)? {
        let rgb = image::open(frame_file(dir, index, "color.png"))?.into_rgb8();
        let depth = match format {
            SequenceFormat::SevenScenesLike => read_depth_png(&frame_file(dir, index, "depth.png"))?,
            SequenceFormat::SyntheticNative => {
                let path = frame_file(dir, index, "depth.bin");
                decode_depth(&fs::read(&path)?, &path)?
            }
        };
        let pose_path = frame_file(dir, index, "pose.txt");
        if !pose_path.exists() {
            return Err(IoError::MissingPose(index));
        }
        let pose = read_pose(&pose_path)?;
        let own = frame_file(dir, index, "intrinsics.txt");
        let intrinsics = if own.exists() {
            read_intrinsics(&own)?
        } else {
            shared.ok_or_else(|| format_err(dir, format!("no {INTRINSICS_FILE} for frame {index}")))?
        };
        if rgb.width() as usize != depth.width || rgb.height() as usize != depth.height {
            return Err(format_err(
                &frame_file(dir, index, "color.png"),
                "colour and depth sizes differ",
            ));
        }
        frames.push(FrameRecord {
            index,
            rgb,
            depth,
            pose,
            intrinsics,
        });
    }
    Ok(frames)
}

/// Writes frames in the given layout. The first frame's intrinsics become the
/// shared file; frames that differ get an override.
pub fn save_sequence(frames: &[FrameRecord], dir: &Path, format: SequenceFormat) -> Result<(), IoError> {
    fs::create_dir_all(dir)?;
    let Some(first) = frames.first() else {
        return Ok(());
    };
    write_intrinsics(&first.intrinsics, &dir.join(INTRINSICS_FILE))?;
    for f in frames {
        f.rgb.save(frame_file(dir, f.index, "color.png"))?;
        match format {
            SequenceFormat::SevenScenesLike => write_depth_png(&f.depth, &frame_file(dir, f.index, "depth.png"))?,
            SequenceFormat::SyntheticNative => fs::write(frame_file(dir, f.index, "depth.bin"), encode_depth(&f.depth))?,
        }
        write_pose(&f.pose, &frame_file(dir, f.index, "pose.txt"))?;
        if f.intrinsics != first.intrinsics {
            write_intrinsics(&f.intrinsics, &frame_file(dir, f.index, "intrinsics.txt"))?;
        }
    }
    Ok(())
}

/// One frame's predictions as exchanged with the offline trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFile {
    pub frame_index: u32,
    pub grid: PredictionGrid,
}

const PREDICTION_MAGIC: &[u8; 4] = b"SCRP";
const MODEL_MAGIC: &[u8; 4] = b"SCPM";
const FORMAT_VERSION: u32 = 1;

pub fn encode_predictions(p: &PredictionFile) -> Vec<u8> {
    let g = &p.grid;
    let n = g.width * g.height;
    let mut out = Vec::with_capacity(20 + 12 * n + n.div_ceil(8));
    out.extend_from_slice(PREDICTION_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&p.frame_index.to_le_bytes());
    out.extend_from_slice(&(g.width as u32).to_le_bytes());
    out.extend_from_slice(&(g.height as u32).to_le_bytes());
    for pt in g.raw_points() {
        for c in pt {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    let mut bitmap = vec![0u8; n.div_ceil(8)];
    for (i, &v) in g.validity().iter().enumerate() {
        if v {
            bitmap[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&bitmap);
    out
}

pub fn decode_predictions(bytes: &[u8], path: &Path) -> Result<PredictionFile, IoError> {
    let mut r = Reader::new(bytes, path);
    r.magic(PREDICTION_MAGIC)?;
    r.version()?;
    let frame_index = r.u32()?;
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    let n = w
        .checked_mul(h)
        .filter(|n| n.checked_mul(12).is_some_and(|b| b <= bytes.len()))
        .ok_or_else(|| format_err(path, "grid dimensions exceed file size"))?;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        points.push([r.f32()?, r.f32()?, r.f32()?]);
    }
    let bitmap = r.bytes(n.div_ceil(8))?;
    let valid = (0..n).map(|i| bitmap[i / 8] & (1 << (i % 8)) != 0).collect();
    r.finish()?;
    Ok(PredictionFile {
        frame_index,
        grid: PredictionGrid::from_parts(w, h, points, valid),
    })
}

pub fn save_predictions(p: &PredictionFile, path: &Path) -> Result<(), IoError> {
    fs::write(path, encode_predictions(p))?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<PredictionFile, IoError> {
    decode_predictions(&fs::read(path)?, path)
}

pub fn encode_scene_model(model: &ScenePointModel) -> Vec<u8> {
    let n = model.len();
    let mut out = Vec::with_capacity(16 + 15 * n);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for p in model.positions() {
        for c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    for c in model.colours() {
        out.extend_from_slice(c);
    }
    out
}

pub fn decode_scene_model(bytes: &[u8], path: &Path) -> Result<ScenePointModel, IoError> {
    let mut r = Reader::new(bytes, path);
    r.magic(MODEL_MAGIC)?;
    r.version()?;
    let n = r.u64()?;
    let n = usize::try_from(n)
        .ok()
        .filter(|n| n.checked_mul(15).is_some_and(|b| b <= bytes.len()))
        .ok_or_else(|| format_err(path, "point count exceeds file size"))?;
    let mut positions = Vec::with_capacity(n);
    for _ in 0..n {
        positions.push([r.f32()?, r.f32()?, r.f32()?]);
    }
    let colour_bytes = r.bytes(3 * n)?;
    let colours = colour_bytes.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    r.finish()?;
    Ok(ScenePointModel::new(positions, colours))
}

pub fn save_scene_model(model: &ScenePointModel, path: &Path) -> Result<(), IoError> {
    fs::write(path, encode_scene_model(model))?;
    Ok(())
}

pub fn load_scene_model(path: &Path) -> Result<ScenePointModel, IoError> {
    decode_scene_model(&fs::read(path)?, path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], IoError> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32, IoError> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<(), IoError> {
        let m: [u8; 4] = self.array()?;
        if &m != expected {
            return Err(format_err(self.path, format!("bad magic {m:?}")));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<(), IoError> {
        match self.u32()? {
            FORMAT_VERSION => Ok(()),
            v => Err(format_err(self.path, format!("unsupported version {v}"))),
        }
    }

    fn finish(self) -> Result<(), IoError> {
        if self.pos != self.bytes.len() {
            return Err(format_err(
                self.path,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}
