//! Procedural tracking sequences: a textured target moving over a smooth
//! background, with look-alike distractors, partial occluders and noise.

use std::f64::consts::PI;
use std::ops::Range;
use std::path::{Path, PathBuf};

use mst_core::BoxXYWH;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{read_text, write, HarnessError, Result};
use crate::image::Image;

pub const GROUNDTRUTH: &str = "groundtruth.txt";

/// Centre path `start + velocity·t + wobble`, reflected off the frame
/// borders so the whole box stays inside.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    pub size: (f64, f64),
    pub scale_amp: f64,
    pub scale_period: f64,
    pub wobble_amp: f64,
    pub wobble_period: f64,
}

impl Trajectory {
    pub fn fixed(center: (f64, f64), size: (f64, f64)) -> Self {
        Self {
            start: center,
            velocity: (0.0, 0.0),
            size,
            scale_amp: 0.0,
            scale_period: 1.0,
            wobble_amp: 0.0,
            wobble_period: 1.0,
        }
    }

    fn scale(&self, t: f64) -> f64 {
        1.0 + self.scale_amp * (2.0 * PI * t / self.scale_period).sin()
    }

    pub fn box_at(&self, t: usize, frame_size: usize) -> BoxXYWH {
        let t = t as f64;
        let s = self.scale(t);
        let (w, h) = (self.size.0 * s, self.size.1 * s);
        let phase = 2.0 * PI * t / self.wobble_period;
        let raw_x = self.start.0 + self.velocity.0 * t + self.wobble_amp * phase.sin();
        let raw_y = self.start.1 + self.velocity.1 * t + self.wobble_amp * (phase.cos() - 1.0);
        // margins use the largest extent so reflection never clips the box
        let mx = self.size.0 * (1.0 + self.scale_amp.abs()) / 2.0;
        let my = self.size.1 * (1.0 + self.scale_amp.abs()) / 2.0;
        let f = frame_size as f64;
        BoxXYWH::from_center(reflect(raw_x, mx, f - mx), reflect(raw_y, my, f - my), w, h)
    }
}

/// Triangle-wave fold of `v` into `[lo, hi]`.
fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return (lo + hi) / 2.0;
    }
    let m = (v - lo).rem_euclid(2.0 * span);
    lo + if m > span { 2.0 * span - m } else { m }
}

/// Two-colour checkerboard anchored at the object's top-left corner.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    pub base: [u8; 3],
    pub alt: [u8; 3],
    pub cell: usize,
}

impl Palette {
    pub fn from_hue(hue: f64, cell: usize) -> Self {
        Self {
            base: hsv(hue, 0.8, 0.95),
            alt: hsv(hue, 0.9, 0.5),
            cell,
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round() as u8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Distractor {
    pub path: Trajectory,
    pub palette: Palette,
}

/// Grey block over part of the target for a frame range. `region` is
/// `(x0, y0, x1, y1)` as fractions of the target box.
#[derive(Clone, Debug, PartialEq)]
pub struct Occluder {
    pub frames: Range<usize>,
    pub region: (f64, f64, f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub frame_size: usize,
    pub num_frames: usize,
    pub target: Trajectory,
    pub palette: Palette,
    pub distractors: Vec<Distractor>,
    pub occluders: Vec<Occluder>,
    /// Pixel noise standard deviation as a fraction of full scale.
    pub noise: f64,
    /// Background gradient endpoints.
    pub background: ([u8; 3], [u8; 3]),
}

impl SyntheticScene {
    /// Randomised scene; everything derives from `seed`.
    pub fn random(seed: u64, num_frames: usize, frame_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = frame_size as f64;
        let path = |rng: &mut ChaCha8Rng| {
            let w = rng.gen_range(0.10..0.18) * f;
            let h = w * rng.gen_range(0.7..1.4);
            let speed = rng.gen_range(0.5..2.5);
            let dir = rng.gen_range(0.0..2.0 * PI);
            Trajectory {
                start: (rng.gen_range(0.25..0.75) * f, rng.gen_range(0.25..0.75) * f),
                velocity: (speed * dir.cos(), speed * dir.sin()),
                size: (w, h),
                scale_amp: rng.gen_range(0.0..0.15),
                scale_period: rng.gen_range(30.0..80.0),
                wobble_amp: rng.gen_range(0.0..8.0),
                wobble_period: rng.gen_range(20.0..60.0),
            }
        };
        let target = path(&mut rng);
        let hue = rng.gen_range(0.0..360.0);
        let cell = rng.gen_range(2..5);
        let palette = Palette::from_hue(hue, cell);
        let distractors = (0..2)
            .map(|_| Distractor {
                path: path(&mut rng),
                palette: Palette::from_hue(hue + rng.gen_range(90.0..270.0), cell),
            })
            .collect();
        let occluders = if num_frames > 30 {
            let start = rng.gen_range(20..num_frames - 10);
            vec![Occluder {
                frames: start..start + 8,
                region: (0.0, 0.0, 0.6, 1.0),
            }]
        } else {
            Vec::new()
        };
        let grey = |rng: &mut ChaCha8Rng| {
            let base = rng.gen_range(60..150) as i32;
            [0, 1, 2].map(|_| (base + rng.gen_range(-25..=25)).clamp(0, 255) as u8)
        };
        let background = (grey(&mut rng), grey(&mut rng));
        Self {
            seed,
            frame_size,
            num_frames,
            target,
            palette,
            distractors,
            occluders,
            noise: 0.03,
            background,
        }
    }

    /// A motionless target with no distractors, occluders or noise.
    pub fn fixed(seed: u64, num_frames: usize, frame_size: usize, target: BoxXYWH) -> Self {
        let mut s = Self::random(seed, num_frames, frame_size);
        let (cx, cy) = target.center();
        s.target = Trajectory::fixed((cx, cy), (target.w, target.h));
        s.distractors.clear();
        s.occluders.clear();
        s.noise = 0.0;
        s
    }

    pub fn box_at(&self, t: usize) -> BoxXYWH {
        self.target.box_at(t, self.frame_size)
    }

    pub fn boxes(&self) -> Vec<BoxXYWH> {
        (0..self.num_frames).map(|t| self.box_at(t)).collect()
    }

    pub fn render(&self, t: usize) -> Image {
        let n = self.frame_size;
        let mut img = Image::new(n, n);
        let (a, b) = self.background;
        for y in 0..n {
            for x in 0..n {
                let u = (x + y) as f64 / (2 * n) as f64;
                let ripple = 12.0 * ((x as f64 * 0.11).sin() * (y as f64 * 0.07).cos());
                let px = [0, 1, 2].map(|c| (a[c] as f64 * (1.0 - u) + b[c] as f64 * u + ripple).clamp(0.0, 255.0) as u8);
                img.set(x, y, px);
            }
        }
        for d in &self.distractors {
            paint_object(&mut img, &d.path.box_at(t, n), &d.palette);
        }
        let target = self.box_at(t);
        paint_object(&mut img, &target, &self.palette);
        for o in self.occluders.iter().filter(|o| o.frames.contains(&t)) {
            let (x0, y0, x1, y1) = o.region;
            let r = BoxXYWH::new(
                target.x + x0 * target.w,
                target.y + y0 * target.h,
                (x1 - x0) * target.w,
                (y1 - y0) * target.h,
            );
            fill_box(&mut img, &r, |_, _| [128, 128, 128]);
        }
        if self.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(t as u64 + 1);
            let normal = Normal::new(0.0, self.noise * 255.0).expect("finite noise");
            for v in &mut img.data {
                *v = (*v as f64 + normal.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
            }
        }
        img
    }

    /// Writes `00000001.ppm, …` and `groundtruth.txt` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for t in 0..self.num_frames {
            self.render(t).save(&dir.join(frame_name(t)))?;
        }
        write(&dir.join(GROUNDTRUTH), format_boxes(&self.boxes()))
    }
}

/// Pixels whose centres fall inside `b`.
fn pixel_span(lo: f64, extent: f64, n: usize) -> Range<usize> {
    let a = (lo - 0.5).ceil().max(0.0) as usize;
    let b = ((lo + extent - 0.5).floor() + 1.0).clamp(0.0, n as f64) as usize;
    a.min(n)..b.max(a.min(n))
}

fn fill_box(img: &mut Image, b: &BoxXYWH, colour: impl Fn(usize, usize) -> [u8; 3]) {
    let xs = pixel_span(b.x, b.w, img.width);
    let ys = pixel_span(b.y, b.h, img.height);
    for y in ys.clone() {
        for x in xs.clone() {
            img.set(x, y, colour(x - xs.start, y - ys.start));
        }
    }
}

fn paint_object(img: &mut Image, b: &BoxXYWH, p: &Palette) {
    fill_box(img, b, |x, y| if (x / p.cell + y / p.cell) % 2 == 0 { p.base } else { p.alt });
}

pub fn frame_name(t: usize) -> String {
    format!("{:08}.ppm", t + 1)
}

pub fn format_boxes(boxes: &[BoxXYWH]) -> String {
    boxes
        .iter()
        .map(|b| format!("{:.4},{:.4},{:.4},{:.4}\n", b.x, b.y, b.w, b.h))
        .collect()
}

/// One `x,y,w,h` box per non-empty line; commas, tabs or spaces separate.
pub fn parse_boxes(text: &str) -> Result<Vec<BoxXYWH>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let v: Vec<f64> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| HarnessError::Data(format!("line {}: expected numbers, got {line:?}", i + 1)))?;
            match v[..] {
                [x, y, w, h] if v.iter().all(|u| u.is_finite()) => Ok(BoxXYWH::new(x, y, w, h)),
                _ => Err(HarnessError::Data(format!("line {}: expected x,y,w,h, got {line:?}", i + 1))),
            }
        })
        .collect()
}

pub fn read_boxes(path: &Path) -> Result<Vec<BoxXYWH>> {
    parse_boxes(&read_text(path)?).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}

/// A sequence directory on disk: sorted `.ppm` frames and, when present,
/// the ground truth.
#[derive(Clone, Debug)]
pub struct SequenceDir {
    pub dir: PathBuf,
    pub frames: Vec<PathBuf>,
}

impl SequenceDir {
    pub fn open(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))?;
        let mut frames = Vec::new();
        for e in entries {
            let p = e.map_err(|e| HarnessError::io(dir, e))?.path();
            if p.extension().is_some_and(|x| x == "ppm") {
                frames.push(p);
            }
        }
        frames.sort();
        if frames.is_empty() {
            return Err(HarnessError::Data(format!("{}: no .ppm frames", dir.display())));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> Result<Image> {
        Image::load(&self.frames[t])
    }

    pub fn groundtruth_path(&self) -> PathBuf {
        self.dir.join(GROUNDTRUTH)
    }

    pub fn groundtruth(&self) -> Result<Vec<BoxXYWH>> {
        let gt = read_boxes(&self.groundtruth_path())?;
        if gt.len() != self.frames.len() {
            return Err(HarnessError::Data(format!(
                "{}: {} boxes for {} frames",
                self.dir.display(),
                gt.len(),
                self.frames.len()
            )));
        }
        Ok(gt)
    }
}

/// Sequence directories under `root`: `root` itself when it holds frames,
/// otherwise its subdirectories in sorted order.
pub fn find_sequences(root: &Path) -> Result<Vec<SequenceDir>> {
    if let Ok(s) = SequenceDir::open(root) {
        return Ok(vec![s]);
    }
    let entries = std::fs::read_dir(root).map_err(|e| HarnessError::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let seqs: Vec<_> = dirs.iter().filter_map(|d| SequenceDir::open(d).ok()).collect();
    if seqs.is_empty() {
        return Err(HarnessError::Data(format!("{}: no sequences found", root.display())));
    }
    Ok(seqs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_folds() {
        assert_eq!(reflect(5.0, 0.0, 10.0), 5.0);
        assert_eq!(reflect(12.0, 0.0, 10.0), 8.0);
        assert_eq!(reflect(-3.0, 0.0, 10.0), 3.0);
        assert_eq!(reflect(23.0, 0.0, 10.0), 3.0);
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv(0.0, 1.0, 1.0), [255, 0, 0]);
        assert_eq!(hsv(120.0, 1.0, 1.0), [0, 255, 0]);
        assert_eq!(hsv(240.0, 1.0, 1.0), [0, 0, 255]);
    }

    #[test]
    fn box_text_round_trip() {
        let b = vec![BoxXYWH::new(1.5, 2.0, 30.25, 4.0), BoxXYWH::new(0.0, 0.0, 1.0, 1.0)];
        assert_eq!(parse_boxes(&format_boxes(&b)).unwrap(), b);
        assert!(parse_boxes("1,2,3\n").is_err());
        assert!(parse_boxes("1,2,x,4\n").is_err());
        assert_eq!(parse_boxes("1\t2 3,4\n\n").unwrap().len(), 1);
    }
}
