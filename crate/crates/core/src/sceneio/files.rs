//! On-disk dataset layout:
//!
//! ```text
//! rgb_00000.png    8-bit RGB
//! depth_00000.pfm  single-channel little-endian PFM (scale -1)
//! mask_00000.png   8-bit gray, 255 = occluded
//! times.json       [t0, t1, ...] in [0,1]
//! cameras.json     [{fx, fy, cx, cy, w2c[16], width, height, near, far}, ...]
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::camera::{Camera, CameraRecord};
use crate::error::{Error, Result};
use crate::frame::Frame;

pub const DATASET_LAYOUT_VERSION: u32 = 1;

pub fn rgb_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("rgb_{i:05}.png"))
}

pub fn depth_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("depth_{i:05}.pfm"))
}

pub fn mask_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("mask_{i:05}.png"))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb_png(path: &Path, rgb: &Array3<f64>) -> Result<()> {
    let (h, w, c) = rgb.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("rgb image has {c} channels")));
    }
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([quantize(rgb[[y, x, 0]]), quantize(rgb[[y, x, 1]]), quantize(rgb[[y, x, 2]])])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

pub fn read_rgb_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

pub fn write_mask_png(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

/// Pixels above mid-gray count as occluded.
pub fn read_mask_png(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] > 127
    }))
}

/// Little-endian grayscale PFM; rows are stored bottom to top. Values are
/// written at 32-bit precision.
pub fn pfm_bytes(depth: &Array2<f64>) -> Vec<u8> {
    let (h, w) = depth.dim();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(depth[[y, x]] as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_pfm(path: &Path, depth: &Array2<f64>) -> Result<()> {
    fs::write(path, pfm_bytes(depth)).map_err(|e| Error::io(path, e))
}

pub fn parse_pfm(path: &Path, bytes: &[u8]) -> Result<Array2<f64>> {
    let fail = |m: &str| Error::format(path, m);
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fail("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| fail("header is not ASCII"))?);
    }
    // Exactly one whitespace byte separates the header from the data.
    pos += 1;
    match fields[0] {
        "Pf" => {}
        "PF" => return Err(fail("three-channel PFM is not a depth map")),
        _ => return Err(fail("bad magic")),
    }
    let w: usize = fields[1].parse().map_err(|_| fail("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| fail("bad height"))?;
    let scale: f64 = fields[3].parse().map_err(|_| fail("bad scale"))?;
    if !(scale < 0.0) {
        return Err(fail("only little-endian PFM (negative scale) is supported"));
    }
    let need = w * h * 4;
    if bytes.len() < pos || bytes.len() - pos != need {
        return Err(fail(&format!(
            "expected {need} data bytes, found {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let data = &bytes[pos..];
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let k = ((h - 1 - y) * w + x) * 4;
        f32::from_le_bytes([data[k], data[k + 1], data[k + 2], data[k + 3]]) as f64
    }))
}

pub fn read_pfm(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pfm(path, &bytes)
}

pub fn write_json<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    text.push('\n');
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}

/// Frames plus their cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    pub cameras: Vec<Camera>,
}

impl Dataset {
    pub fn new(frames: Vec<Frame>, cameras: Vec<Camera>) -> Result<Self> {
        if frames.len() != cameras.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} frames but {} cameras",
                frames.len(),
                cameras.len()
            )));
        }
        for (i, (f, c)) in frames.iter().zip(&cameras).enumerate() {
            if (f.height(), f.width()) != (c.height, c.width) {
                return Err(Error::ShapeMismatch(format!(
                    "frame {i} is {}x{} but its camera is {}x{}",
                    f.width(),
                    f.height(),
                    c.width,
                    c.height
                )));
            }
        }
        Ok(Self { frames, cameras })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Writes frames (RGB, depth, mask) and `times.json`.
pub fn write_frames(dir: &Path, frames: &[Frame]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_rgb_png(&rgb_path(dir, i), &f.rgb)?;
        write_pfm(&depth_path(dir, i), &f.depth)?;
        write_mask_png(&mask_path(dir, i), &f.mask)?;
    }
    let times: Vec<f64> = frames.iter().map(|f| f.time).collect();
    write_json(&dir.join("times.json"), &times)
}

pub fn write_cameras(dir: &Path, cameras: &[Camera]) -> Result<()> {
    let records: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from).collect();
    write_json(&dir.join("cameras.json"), &records)
}

pub fn read_cameras(dir: &Path) -> Result<Vec<Camera>> {
    let records: Vec<CameraRecord> = read_json(&dir.join("cameras.json"))?;
    records.iter().map(Camera::try_from).collect()
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    write_frames(dir, &data.frames)?;
    write_cameras(dir, &data.cameras)
}

/// Reads `rgb_00000.png`, `rgb_00001.png`, ... until the first gap. Missing
/// depth files give NaN depth, missing masks give empty masks, and a missing
/// `times.json` gives evenly spaced times.
pub fn read_frames(dir: &Path) -> Result<Vec<Frame>> {
    let mut rgbs = Vec::new();
    while rgb_path(dir, rgbs.len()).exists() {
        rgbs.push(read_rgb_png(&rgb_path(dir, rgbs.len()))?);
    }
    if rgbs.is_empty() {
        return Err(Error::format(dir, "no rgb_00000.png found"));
    }
    let times_file = dir.join("times.json");
    let times: Vec<f64> = if times_file.exists() {
        read_json(&times_file)?
    } else {
        let n = rgbs.len();
        (0..n).map(|i| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 }).collect()
    };
    if times.len() != rgbs.len() {
        return Err(Error::format(
            &times_file,
            format!("{} timestamps for {} frames", times.len(), rgbs.len()),
        ));
    }
    rgbs.into_iter()
        .zip(times)
        .enumerate()
        .map(|(i, (rgb, t))| {
            let (h, w, _) = rgb.dim();
            let dp = depth_path(dir, i);
            let depth = if dp.exists() { read_pfm(&dp)? } else { Array2::from_elem((h, w), f64::NAN) };
            let mp = mask_path(dir, i);
            let mask = if mp.exists() { read_mask_png(&mp)? } else { Array2::from_elem((h, w), false) };
            if depth.dim() != (h, w) || mask.dim() != (h, w) {
                return Err(Error::format(dir, format!("frame {i}: rgb, depth and mask sizes differ")));
            }
            Frame::new(rgb, depth, mask, t)
        })
        .collect()
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let frames = read_frames(dir)?;
    let cameras = read_cameras(dir)?;
    Dataset::new(frames, cameras).map_err(|e| Error::format(dir.join("cameras.json"), e.to_string()))
}
