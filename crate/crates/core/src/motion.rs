//! Flow fields, their colour-coded motion images, synthetic flows, and the
//! `.dsfl` binary flow format.
//!
//! R and G carry `dx` and `dy` mapped linearly from `[-m_max, m_max]` to
//! `[0, 255]`; B is constant.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound on the scale used for encoding.
pub const MIN_M_MAX: f64 = 1e-6;
pub const BLUE: u8 = 255;
const MAGIC: &[u8; 4] = b"DSFL";

/// Per-pixel displacement in pixels/frame, row-major `height×width`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            dx: vec![0.0; height * width],
            dy: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> Self {
        let mut flow = Self::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = f(y, x);
                flow.dx[y * width + x] = dx;
                flow.dy[y * width + x] = dy;
            }
        }
        flow
    }

    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    /// Largest displacement magnitude.
    pub fn max_magnitude(&self) -> f64 {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }

    fn check(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.dx.len() != n || self.dy.len() != n {
            return Err(Error::dim(format!(
                "flow {}x{} holds {} dx and {} dy values",
                self.height,
                self.width,
                self.dx.len(),
                self.dy.len()
            )));
        }
        if let Some(i) = (0..n).find(|&i| !self.dx[i].is_finite() || !self.dy[i].is_finite()) {
            return Err(Error::Contract(format!(
                "non-finite flow at pixel ({}, {})",
                i / self.width,
                i % self.width
            )));
        }
        Ok(())
    }

    /// Central-difference divergence at an interior pixel.
    pub fn divergence(&self, y: usize, x: usize) -> f64 {
        let w = self.width;
        (self.dx[y * w + x + 1] - self.dx[y * w + x - 1]) / 2.0
            + (self.dy[(y + 1) * w + x] - self.dy[(y - 1) * w + x]) / 2.0
    }

    /// Central-difference curl at an interior pixel.
    pub fn curl(&self, y: usize, x: usize) -> f64 {
        let w = self.width;
        (self.dy[y * w + x + 1] - self.dy[y * w + x - 1]) / 2.0
            - (self.dx[(y + 1) * w + x] - self.dx[(y - 1) * w + x]) / 2.0
    }
}

/// `height×width×3` 8-bit image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

/// Encoder output: R and G carry the flow, B is [`BLUE`].
pub type MotionImage = Rgb8Image;

impl Rgb8Image {
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// `3×H×W` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; 3 * h * w];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = f64::from(px[c]) / 255.0;
            }
        }
        Tensor::new(&[3, h, w], data).expect("sized above")
    }
}

fn quantize(v: f64, m_max: f64) -> u8 {
    let q = ((v + m_max) / (2.0 * m_max) * 255.0).round_ties_even();
    q.clamp(0.0, 255.0) as u8
}

fn dequantize(p: u8, m_max: f64) -> f64 {
    f64::from(p) / 255.0 * 2.0 * m_max - m_max
}

/// Encodes with the per-image scale `max(max |flow|, MIN_M_MAX)`.
/// Returns the image and the scale used.
pub fn encode_flow_image(flow: &FlowField) -> Result<(MotionImage, f64)> {
    flow.check()?;
    let m_max = flow.max_magnitude().max(MIN_M_MAX);
    Ok((encode_with_scale(flow, m_max)?, m_max))
}

/// Encodes with a caller-supplied scale; values beyond it saturate.
pub fn encode_with_scale(flow: &FlowField, m_max: f64) -> Result<MotionImage> {
    flow.check()?;
    if !(m_max > 0.0) || !m_max.is_finite() {
        return Err(Error::Contract(format!("encoding scale must be positive, got {m_max}")));
    }
    let mut pixels = Vec::with_capacity(3 * flow.dx.len());
    for (&dx, &dy) in flow.dx.iter().zip(&flow.dy) {
        // M·cosθ = dx and M·sinθ = dy
        pixels.extend_from_slice(&[quantize(dx, m_max), quantize(dy, m_max), BLUE]);
    }
    Ok(MotionImage {
        height: flow.height,
        width: flow.width,
        pixels,
    })
}

pub fn decode_motion_image(image: &MotionImage, m_max: f64) -> Result<FlowField> {
    if !(m_max > 0.0) {
        return Err(Error::Contract(format!("decoding scale must be positive, got {m_max}")));
    }
    let (dx, dy) = image
        .pixels
        .chunks_exact(3)
        .map(|px| (dequantize(px[0], m_max), dequantize(px[1], m_max)))
        .unzip();
    Ok(FlowField {
        height: image.height,
        width: image.width,
        dx,
        dy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlowKind {
    /// Constant `(dx, dy)`.
    Translation { dx: f64, dy: f64 },
    /// Angular rate `omega` about the image centre.
    Rotation { omega: f64 },
    /// Scale rate `s` about the image centre.
    Expansion { s: f64 },
}

impl FlowKind {
    /// Parses `translation`, `rotation` or `expansion` with two parameters
    /// (the second is ignored for rotation and expansion).
    pub fn parse(kind: &str, a: f64, b: f64) -> Result<Self> {
        match kind {
            "translation" => Ok(Self::Translation { dx: a, dy: b }),
            "rotation" => Ok(Self::Rotation { omega: a }),
            "expansion" => Ok(Self::Expansion { s: a }),
            other => Err(Error::Config(format!(
                "unknown flow kind `{other}` (expected translation, rotation or expansion)"
            ))),
        }
    }
}

/// Analytic flow of `kind` with optional zero-mean Gaussian noise of
/// standard deviation `noise`.
pub fn synth_flow(kind: FlowKind, height: usize, width: usize, noise: f64, seed: u64) -> FlowField {
    let cy = (height as f64 - 1.0) / 2.0;
    let cx = (width as f64 - 1.0) / 2.0;
    let mut flow = FlowField::from_fn(height, width, |y, x| {
        let (ry, rx) = (y as f64 - cy, x as f64 - cx);
        match kind {
            FlowKind::Translation { dx, dy } => (dx, dy),
            FlowKind::Rotation { omega } => (-omega * ry, omega * rx),
            FlowKind::Expansion { s } => (s * rx, s * ry),
        }
    });
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in flow.dx.iter_mut().chain(flow.dy.iter_mut()) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += noise * z;
        }
    }
    flow
}

pub fn write_dsfl(path: &Path, flow: &FlowField) -> Result<()> {
    flow.check()?;
    let mut buf = Vec::with_capacity(12 + 8 * flow.dx.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(flow.height as u32).to_le_bytes());
    buf.extend_from_slice(&(flow.width as u32).to_le_bytes());
    for (&dx, &dy) in flow.dx.iter().zip(&flow.dy) {
        buf.extend_from_slice(&(dx as f32).to_le_bytes());
        buf.extend_from_slice(&(dy as f32).to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn read_dsfl(path: &Path) -> Result<FlowField> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    if buf.len() < 12 || &buf[..4] != MAGIC {
        return Err(Error::format(path, "missing DSFL header"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (height, width) = (u32_at(4), u32_at(8));
    let n = height * width;
    if buf.len() != 12 + 8 * n {
        return Err(Error::format(
            path,
            format!("{height}x{width} flow needs {} bytes, file has {}", 12 + 8 * n, buf.len()),
        ));
    }
    let f32_at = |i: usize| f64::from(f32::from_le_bytes(buf[i..i + 4].try_into().expect("4 bytes")));
    let dx = (0..n).map(|i| f32_at(12 + 8 * i)).collect();
    let dy = (0..n).map(|i| f32_at(16 + 8 * i)).collect();
    let flow = FlowField { height, width, dx, dy };
    flow.check()?;
    Ok(flow)
}

/// Writes an image as an 8-bit RGB PNG.
pub fn write_png(path: &Path, image: &Rgb8Image) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()
        .and_then(|mut w| w.write_image_data(&image.pixels))
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Reads an 8-bit RGB PNG.
pub fn read_png(path: &Path) -> Result<Rgb8Image> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut pixels = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut pixels)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "expected 8-bit RGB"));
    }
    pixels.truncate(info.buffer_size());
    Ok(MotionImage {
        height: info.height as usize,
        width: info.width as usize,
        pixels,
    })
}
