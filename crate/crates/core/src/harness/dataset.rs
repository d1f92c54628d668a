//! Synthetic paired dataset: pipe-like RGB frames with procedural defect
//! glyphs, the flow to the next frame, and its motion image.
//!
//! Layout: `root/{train,val}/{rgb,motion,flow}/NNNNN.{png,png,dsfl}` plus
//! `root/manifest.csv` with columns `id,split,DE,FS,AF,GR,OK,m_max`.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dual_stream::Sample;
use crate::error::{Error, Result};
use crate::harness::config::DataConfig;
use crate::metrics::CLASSES;
use crate::motion::{encode_flow_image, read_dsfl, read_png, write_dsfl, write_png, FlowField, Rgb8Image};
use crate::tensor::Tensor;

pub const MAX_GLYPHS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::Config(format!("unknown split `{s}` (expected train or val)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub labels: [bool; 5],
    pub m_max: f64,
}

impl ManifestEntry {
    pub fn rgb_path(&self, root: &Path) -> PathBuf {
        root.join(self.split.as_str()).join("rgb").join(format!("{}.png", self.id))
    }

    pub fn motion_path(&self, root: &Path) -> PathBuf {
        root.join(self.split.as_str()).join("motion").join(format!("{}.png", self.id))
    }

    pub fn flow_path(&self, root: &Path) -> PathBuf {
        root.join(self.split.as_str()).join("flow").join(format!("{}.dsfl", self.id))
    }

    pub fn label_vector(&self) -> Vec<f64> {
        self.labels.iter().map(|&b| f64::from(u8::from(b))).collect()
    }
}

/// One rendered sample before it is written to disk.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub rgb: Rgb8Image,
    pub flow: FlowField,
    pub labels: [bool; 5],
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for one sample.
pub fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let tag = match split {
        Split::Train => 0x7452_4149_4e00_0000,
        Split::Val => 0x5641_4c00_0000_0000,
    };
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed) ^ tag ^ index as u64))
}

/// Independent Bernoulli draws per class, redrawn while more than
/// [`MAX_GLYPHS`] classes are present.
pub fn draw_labels<R: Rng>(freq: &[f64; 5], rng: &mut R) -> [bool; 5] {
    loop {
        let labels: [bool; 5] = std::array::from_fn(|k| rng.gen::<f64>() < freq[k]);
        if labels.iter().filter(|&&b| b).count() <= MAX_GLYPHS {
            return labels;
        }
    }
}

struct Canvas {
    size: usize,
    rgb: Vec<[f64; 3]>,
    flow: FlowField,
}

impl Canvas {
    fn paint(&mut self, mask: impl Fn(f64, f64) -> bool, color: [f64; 3], motion: impl Fn(f64, f64) -> (f64, f64)) {
        let s = self.size;
        for y in 0..s {
            for x in 0..s {
                let (fy, fx) = (y as f64, x as f64);
                if mask(fy, fx) {
                    let i = y * s + x;
                    self.rgb[i] = color;
                    let (dx, dy) = motion(fy, fx);
                    self.flow.dx[i] += dx;
                    self.flow.dy[i] += dy;
                }
            }
        }
    }
}

/// Renders one sample. Deterministic in `rng`.
pub fn render_sample<R: Rng>(cfg: &DataConfig, size: usize, rng: &mut R) -> Rendered {
    let labels = draw_labels(&cfg.class_frequencies, rng);
    let s = size as f64;
    let c = (s - 1.0) / 2.0;
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.85..1.15));
    let base = rng.gen_range(0.35..0.55);
    let mut rgb = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let r = ((y as f64 - c).hypot(x as f64 - c) / (s / 2.0)).min(1.5);
            // darker toward the vanishing point in the middle of the pipe
            let shade = base * (0.4 + 0.6 * r) + rng.gen_range(-0.04..0.04);
            rgb.push(std::array::from_fn(|k| (shade * tint[k]).clamp(0.0, 1.0)));
        }
    }
    let cam = cfg.camera_motion;
    let (cdx, cdy) = (rng.gen_range(-cam..=cam), rng.gen_range(-cam..=cam));
    let mut canvas = Canvas {
        size,
        rgb,
        flow: FlowField::from_fn(size, size, |_, _| (cdx, cdy)),
    };
    let gm = cfg.glyph_motion;
    for (k, _) in labels.iter().enumerate().filter(|(_, &on)| on) {
        let amp = gm * rng.gen_range(0.5..=1.0);
        match CLASSES[k] {
            // deformation: squashed elliptical ring, expanding
            "DE" => {
                let (cy, cx) = (c + rng.gen_range(-0.08..0.08) * s, c + rng.gen_range(-0.08..0.08) * s);
                let (rx, ry) = (rng.gen_range(0.32..0.4) * s, rng.gen_range(0.16..0.22) * s);
                let rate = amp / rx;
                canvas.paint(
                    |y, x| {
                        let d = ((x - cx) / rx).hypot((y - cy) / ry);
                        (0.85..1.0).contains(&d)
                    },
                    [0.1, 0.1, 0.12],
                    |y, x| (rate * (x - cx), rate * (y - cy)),
                );
            }
            // displaced joint: offset ring with a gap, rotating
            "FS" => {
                let (cy, cx) = (c + rng.gen_range(-0.12..0.12) * s, c + rng.gen_range(-0.12..0.12) * s);
                let r = rng.gen_range(0.22..0.3) * s;
                let gap = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let omega = amp / r;
                canvas.paint(
                    |y, x| {
                        let d = (x - cx).hypot(y - cy);
                        let ang = (y - cy).atan2(x - cx) - gap;
                        let ang = ang.sin().atan2(ang.cos()).abs();
                        (r - 0.05 * s..r + 0.05 * s).contains(&d) && ang > 0.6
                    },
                    [0.85, 0.8, 0.7],
                    |y, x| (-omega * (y - cy), omega * (x - cx)),
                );
            }
            // settled deposits: band along the bottom, sliding sideways
            "AF" => {
                let top = rng.gen_range(0.72..0.82) * s;
                let dir = if rng.gen_bool(0.5) { amp } else { -amp };
                canvas.paint(|y, _| y >= top, [0.45, 0.3, 0.15], |_, _| (dir, 0.0));
            }
            // branch pipe: dark disc at a side wall, moving vertically
            "GR" => {
                let left = rng.gen_bool(0.5);
                let cx = if left { 0.12 * s } else { 0.88 * s };
                let cy = rng.gen_range(0.3..0.7) * s;
                let r = rng.gen_range(0.1..0.14) * s;
                let dir = if rng.gen_bool(0.5) { amp } else { -amp };
                canvas.paint(|y, x| (x - cx).hypot(y - cy) <= r, [0.05, 0.05, 0.05], |_, _| (0.0, dir));
            }
            // construction change: bright rectangular patch, drifting diagonally
            _ => {
                let (w, h) = (rng.gen_range(0.12..0.2) * s, rng.gen_range(0.12..0.2) * s);
                let (x0, y0) = (rng.gen_range(0.1..0.7) * s, rng.gen_range(0.1..0.6) * s);
                let d = amp / std::f64::consts::SQRT_2;
                canvas.paint(
                    |y, x| (x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y),
                    [0.95, 0.95, 0.9],
                    |_, _| (d, -d),
                );
            }
        }
    }
    let pixels = canvas
        .rgb
        .iter()
        .flat_map(|p| p.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
        .collect();
    // store at the precision of the flow file so images re-encode exactly
    let mut flow = canvas.flow;
    for v in flow.dx.iter_mut().chain(flow.dy.iter_mut()) {
        *v = f64::from(*v as f32);
    }
    Rendered {
        rgb: Rgb8Image {
            height: size,
            width: size,
            pixels,
        },
        flow,
        labels,
    }
}

fn labels_from_fields(rec: &csv::StringRecord, path: &Path, line: usize) -> Result<[bool; 5]> {
    let mut labels = [false; 5];
    for (k, l) in labels.iter_mut().enumerate() {
        *l = match rec.get(2 + k).map(str::trim) {
            Some("1") => true,
            Some("0") => false,
            other => {
                return Err(Error::format(
                    path,
                    format!("line {line}: {} must be 0 or 1, got {other:?}", CLASSES[k]),
                ))
            }
        };
    }
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn path(root: &Path) -> PathBuf {
        root.join("manifest.csv")
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = Self::path(root);
        let mut rdr = csv::Reader::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        let mut entries = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::format(&path, e.to_string()))?;
            if rec.len() != 8 {
                return Err(Error::format(&path, format!("line {line}: expected 8 fields, got {}", rec.len())));
            }
            let split = Split::parse(&rec[1]).map_err(|e| Error::format(&path, format!("line {line}: {e}")))?;
            let m_max: f64 = rec[7]
                .trim()
                .parse()
                .map_err(|_| Error::format(&path, format!("line {line}: bad m_max `{}`", &rec[7])))?;
            entries.push(ManifestEntry {
                id: rec[0].to_string(),
                split,
                labels: labels_from_fields(&rec, &path, line)?,
                m_max,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn write(&self) -> Result<()> {
        let path = Self::path(&self.root);
        let mut out = String::from("id,split,DE,FS,AF,GR,OK,m_max\n");
        for e in &self.entries {
            let l: Vec<&str> = e.labels.iter().map(|&b| if b { "1" } else { "0" }).collect();
            out.push_str(&format!("{},{},{},{}\n", e.id, e.split.as_str(), l.join(","), e.m_max));
        }
        std::fs::write(&path, out).map_err(|e| Error::io(&path, e))
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

/// Writes `train_samples + val_samples` samples under `root`.
pub fn generate_dataset(root: &Path, cfg: &DataConfig, size: usize, seed: u64) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(cfg.train_samples + cfg.val_samples);
    for (split, n) in [(Split::Train, cfg.train_samples), (Split::Val, cfg.val_samples)] {
        for sub in ["rgb", "motion", "flow"] {
            let dir = root.join(split.as_str()).join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for index in 0..n {
            let mut rng = sample_rng(seed, split, index);
            let r = render_sample(cfg, size, &mut rng);
            let (motion, m_max) = encode_flow_image(&r.flow)?;
            let entry = ManifestEntry {
                id: format!("{index:05}"),
                split,
                labels: r.labels,
                m_max,
            };
            write_png(&entry.rgb_path(root), &r.rgb)?;
            write_png(&entry.motion_path(root), &motion)?;
            write_dsfl(&entry.flow_path(root), &r.flow)?;
            entries.push(entry);
        }
    }
    let manifest = Manifest {
        root: root.to_path_buf(),
        entries,
    };
    manifest.write()?;
    Ok(manifest)
}

/// Reads one entry's images as `3×H×W` tensors in `[0, 1]` plus labels.
pub fn load_pair(manifest: &Manifest, index: usize) -> Result<Sample> {
    let entry = manifest.entries.get(index).ok_or_else(|| {
        Error::Contract(format!(
            "sample index {index} out of range for {} entries",
            manifest.entries.len()
        ))
    })?;
    let rgb = read_png(&entry.rgb_path(&manifest.root))?;
    let motion = read_png(&entry.motion_path(&manifest.root))?;
    if (rgb.height, rgb.width) != (motion.height, motion.width) {
        return Err(Error::format(
            entry.motion_path(&manifest.root),
            format!(
                "motion image is {}x{} but rgb is {}x{}",
                motion.height, motion.width, rgb.height, rgb.width
            ),
        ));
    }
    Ok(Sample {
        rgb: rgb.to_tensor(),
        motion: motion.to_tensor(),
        labels: entry.label_vector(),
    })
}

/// Reads the stored flow of one entry.
pub fn load_flow(manifest: &Manifest, index: usize) -> Result<FlowField> {
    let entry = manifest
        .entries
        .get(index)
        .ok_or_else(|| Error::Contract(format!("sample index {index} out of range")))?;
    read_dsfl(&entry.flow_path(&manifest.root))
}

/// A split held in memory as 8-bit pixels; tensors are built per use.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub ids: Vec<String>,
    pub labels: Vec<[bool; 5]>,
    rgb: Vec<Rgb8Image>,
    motion: Vec<Rgb8Image>,
}

impl SplitData {
    pub fn load(manifest: &Manifest, split: Split) -> Result<Self> {
        let mut data = Self {
            ids: Vec::new(),
            labels: Vec::new(),
            rgb: Vec::new(),
            motion: Vec::new(),
        };
        for e in manifest.split(split) {
            data.ids.push(e.id.clone());
            data.labels.push(e.labels);
            data.rgb.push(read_png(&e.rgb_path(&manifest.root))?);
            data.motion.push(read_png(&e.motion_path(&manifest.root))?);
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn rgb_tensor(&self, i: usize) -> Tensor {
        self.rgb[i].to_tensor()
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            rgb: self.rgb[i].to_tensor(),
            motion: self.motion[i].to_tensor(),
            labels: self.labels[i].iter().map(|&b| f64::from(u8::from(b))).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::decode_motion_image;

    fn small() -> DataConfig {
        DataConfig {
            train_samples: 6,
            val_samples: 4,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(a.path(), &small(), 32, 5).unwrap();
        generate_dataset(b.path(), &small(), 32, 5).unwrap();
        for rel in ["manifest.csv", "train/rgb/00003.png", "val/motion/00001.png", "val/flow/00002.dsfl"] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
    }

    #[test]
    fn manifest_round_trip_and_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(dir.path(), &small(), 32, 1).unwrap();
        assert_eq!(Manifest::read(dir.path()).unwrap(), m);
        assert_eq!(m.split(Split::Train).len(), 6);
        let s = load_pair(&m, 2).unwrap();
        assert_eq!(s.rgb.shape(), &[3, 32, 32]);
        assert_eq!(s.labels, m.entries[2].label_vector());
        assert!(load_pair(&m, 10).is_err());
        for i in 0..m.entries.len() {
            let flow = load_flow(&m, i).unwrap();
            let (img, m_max) = encode_flow_image(&flow).unwrap();
            assert_eq!(m_max, m.entries[i].m_max);
            assert_eq!(load_pair(&m, i).unwrap().motion, img.to_tensor());
            let back = decode_motion_image(&img, m_max).unwrap();
            let step = 2.0 * m_max / 255.0;
            assert!(flow.dx.iter().zip(&back.dx).all(|(a, b)| (a - b).abs() <= step));
        }
    }

    #[test]
    fn zero_glyph_samples_are_unlabelled() {
        let cfg = DataConfig {
            class_frequencies: [0.0; 5],
            ..small()
        };
        let mut rng = sample_rng(0, Split::Train, 0);
        let r = render_sample(&cfg, 32, &mut rng);
        assert_eq!(r.labels, [false; 5]);
        // only camera motion: flow is uniform
        assert!(r.flow.dx.iter().all(|&v| v == r.flow.dx[0]));
    }

    #[test]
    fn glyphs_change_pixels_and_flow() {
        for k in 0..5 {
            let mut freq = [0.0; 5];
            freq[k] = 1.0;
            let cfg = DataConfig {
                class_frequencies: freq,
                camera_motion: 0.0,
                ..small()
            };
            let mut rng = sample_rng(3, Split::Val, k);
            let r = render_sample(&cfg, 64, &mut rng);
            let moving = r.flow.dx.iter().zip(&r.flow.dy).filter(|(a, b)| a.abs() + b.abs() > 0.0).count();
            assert!(moving > 20, "{} moves {moving} pixels", CLASSES[k]);
        }
    }
}
