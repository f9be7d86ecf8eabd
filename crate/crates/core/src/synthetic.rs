//! Procedural images: the shape dataset the base GAN is trained on, and
//! simple image filters used to make one-shot style references.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::sample_code;
use crate::model::BaseModel;
use crate::nets::Image;
use crate::par::Exec;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub primitives: Vec<Primitive>,
    /// Foreground colors, RGB in `[0, 1]`.
    pub palette: Vec<[f32; 3]>,
    /// Background gradient endpoints are drawn from this range per channel.
    pub background_range: [f32; 2],
    /// Shapes per image, inclusive range.
    pub shapes_per_image: [usize; 2],
    /// Shape radius as a fraction of the image side, inclusive range.
    pub radius_range: [f32; 2],
    pub resolution: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            primitives: vec![Primitive::Circle, Primitive::Square, Primitive::Triangle],
            palette: vec![
                [0.95, 0.2, 0.15],
                [0.15, 0.75, 0.25],
                [0.15, 0.3, 0.95],
                [0.98, 0.85, 0.1],
                [0.95, 0.95, 0.95],
                [0.05, 0.05, 0.08],
            ],
            background_range: [0.1, 0.7],
            shapes_per_image: [1, 2],
            radius_range: [0.15, 0.32],
            resolution: 32,
            count: 2048,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic dataset: {m}")));
        if self.count == 0 {
            return bad("count must be >= 1");
        }
        if self.primitives.is_empty() || self.palette.is_empty() {
            return bad("primitives and palette must be non-empty");
        }
        if self.resolution < 4 {
            return bad("resolution must be >= 4");
        }
        let [lo, hi] = self.shapes_per_image;
        if lo > hi {
            return bad("shapes_per_image range is inverted");
        }
        let [rlo, rhi] = self.radius_range;
        if !(rlo > 0.0 && rlo <= rhi) {
            return bad("radius range must be positive and ordered");
        }
        let [blo, bhi] = self.background_range;
        if !(0.0..=1.0).contains(&blo) || !(0.0..=1.0).contains(&bhi) || blo > bhi {
            return bad("background range must lie in [0, 1] and be ordered");
        }
        if self.palette.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("palette colors must lie in [0, 1]");
        }
        Ok(())
    }
}

struct Shape {
    kind: Primitive,
    cx: f32,
    cy: f32,
    r: f32,
    angle: f32,
    color: [f32; 3],
}

impl Shape {
    fn contains(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match self.kind {
            Primitive::Circle => u * u + v * v <= self.r * self.r,
            Primitive::Square => u.abs() <= self.r * 0.8 && v.abs() <= self.r * 0.8,
            Primitive::Triangle => {
                // equilateral, apex up in the rotated frame
                let h = self.r;
                v >= -0.5 * h && v <= h && u.abs() <= (h - v) / 3f32.sqrt()
            }
        }
    }
}

/// Renders image `index` of the dataset.
pub fn render_one(spec: &SyntheticDatasetSpec, index: usize) -> Image<f32> {
    let mut r = rng::stream(spec.seed, &[index as u64]);
    let n = spec.resolution;
    let [blo, bhi] = spec.background_range;
    let c0: [f32; 3] = std::array::from_fn(|_| r.gen_range(blo..=bhi));
    let c1: [f32; 3] = std::array::from_fn(|_| r.gen_range(blo..=bhi));
    let theta: f32 = r.gen_range(0.0..std::f32::consts::TAU);
    let (gs, gc) = theta.sin_cos();
    let [lo, hi] = spec.shapes_per_image;
    let count = r.gen_range(lo..=hi);
    let shapes: Vec<Shape> = (0..count)
        .map(|_| Shape {
            kind: spec.primitives[r.gen_range(0..spec.primitives.len())],
            cx: r.gen_range(0.2..0.8),
            cy: r.gen_range(0.2..0.8),
            r: r.gen_range(spec.radius_range[0]..=spec.radius_range[1]),
            angle: r.gen_range(0.0..std::f32::consts::TAU),
            color: spec.palette[r.gen_range(0..spec.palette.len())],
        })
        .collect();
    const SS: usize = 3;
    let mut data = Array3::<f32>::zeros((3, n, n));
    for y in 0..n {
        for x in 0..n {
            let mut acc = [0f32; 3];
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = (x as f32 + (sx as f32 + 0.5) / SS as f32) / n as f32;
                    let py = (y as f32 + (sy as f32 + 0.5) / SS as f32) / n as f32;
                    let t = (((px - 0.5) * gc + (py - 0.5) * gs) * std::f32::consts::SQRT_2 + 1.0) * 0.5;
                    let t = t.clamp(0.0, 1.0);
                    let mut col: [f32; 3] = std::array::from_fn(|ch| c0[ch] + (c1[ch] - c0[ch]) * t);
                    for s in &shapes {
                        if s.contains(px, py) {
                            col = s.color;
                        }
                    }
                    for ch in 0..3 {
                        acc[ch] += col[ch];
                    }
                }
            }
            for ch in 0..3 {
                data[[ch, y, x]] = acc[ch] / (SS * SS) as f32 * 2.0 - 1.0;
            }
        }
    }
    Image::new(data).expect("rendered pixels are finite")
}

/// Renders the whole dataset; reproducible for a fixed spec whatever `exec` is.
pub fn render_dataset(spec: &SyntheticDatasetSpec, exec: Exec) -> Result<Vec<Image<f32>>> {
    spec.validate()?;
    Ok(exec.map_indexed(spec.count, |i| render_one(spec, i)))
}

/// Image-space filters that turn a base sample into a style reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StyleFilter {
    /// Rotation of the hue circle, in degrees.
    HueShift { degrees: f32 },
    /// Dark strokes on paper along luminance edges.
    EdgeSketch,
    /// Per-channel quantization to `levels` values.
    Posterize { levels: u32 },
    /// Photographic negative.
    InvertPalette,
}

impl StyleFilter {
    /// The four filters used by the built-in demo references.
    pub fn demo_set() -> [(&'static str, StyleFilter); 4] {
        [
            ("hue", StyleFilter::HueShift { degrees: 150.0 }),
            ("invert", StyleFilter::InvertPalette),
            ("posterize", StyleFilter::Posterize { levels: 3 }),
            ("sketch", StyleFilter::EdgeSketch),
        ]
    }

    /// `n` named filters: the demo set first, then parameter variants of
    /// each family in turn.
    pub fn catalog(n: usize) -> Vec<(String, StyleFilter)> {
        let demo = Self::demo_set();
        (0..n)
            .map(|i| {
                let (family, filter) = demo[i % demo.len()];
                let v = i / demo.len();
                if v == 0 {
                    return (family.to_string(), filter);
                }
                // variants stay at least 90 degrees and 4 levels from the identity
                let filter = match filter {
                    StyleFilter::HueShift { .. } => StyleFilter::HueShift {
                        degrees: 90.0 + (37.0 * v as f32) % 180.0,
                    },
                    StyleFilter::Posterize { .. } => StyleFilter::Posterize {
                        levels: 2 + (v as u32 % 3),
                    },
                    other => other,
                };
                (format!("{family}{v}"), filter)
            })
            .collect()
    }

    pub fn apply(&self, img: &Image<f32>) -> Image<f32> {
        let x = img.data();
        let (c, h, w) = x.dim();
        let out = match *self {
            StyleFilter::InvertPalette => x.mapv(|v| -v),
            StyleFilter::Posterize { levels } => {
                let l = levels.max(2) as f32 - 1.0;
                x.mapv(|v| (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * l).round() / l) * 2.0 - 1.0)
            }
            StyleFilter::HueShift { degrees } => {
                // rotation about the gray axis
                let a = degrees.to_radians();
                let (s, co) = a.sin_cos();
                let k = (1.0 - co) / 3.0;
                let q = s / 3f32.sqrt();
                let m = [
                    [co + k, k - q, k + q],
                    [k + q, co + k, k - q],
                    [k - q, k + q, co + k],
                ];
                let mut out = x.clone();
                if c == 3 {
                    for yy in 0..h {
                        for xx in 0..w {
                            for (o, row) in m.iter().enumerate() {
                                let v: f32 = (0..3).map(|i| row[i] * x[[i, yy, xx]]).sum();
                                out[[o, yy, xx]] = v.clamp(-1.0, 1.0);
                            }
                        }
                    }
                }
                out
            }
            StyleFilter::EdgeSketch => {
                let lum = |yy: usize, xx: usize| -> f32 { (0..c).map(|i| x[[i, yy, xx]]).sum::<f32>() / c as f32 };
                let mut out = Array3::<f32>::zeros((c, h, w));
                for yy in 0..h {
                    for xx in 0..w {
                        let p = |dy: isize, dx: isize| {
                            let ry = (yy as isize + dy).clamp(0, h as isize - 1) as usize;
                            let rx = (xx as isize + dx).clamp(0, w as isize - 1) as usize;
                            lum(ry, rx)
                        };
                        let gx = p(-1, 1) + 2.0 * p(0, 1) + p(1, 1) - p(-1, -1) - 2.0 * p(0, -1) - p(1, -1);
                        let gy = p(1, -1) + 2.0 * p(1, 0) + p(1, 1) - p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1);
                        let edge = ((gx * gx + gy * gy).sqrt() * 0.75).min(1.0);
                        let paper = [0.9f32, 0.85, 0.7];
                        for ch in 0..c {
                            out[[ch, yy, xx]] = paper[ch.min(2)] * (1.0 - edge) * 2.0 - 1.0;
                        }
                    }
                }
                out
            }
        };
        Image::new(out).expect("filters keep pixels finite")
    }
}

/// Style references made by filtering base-generator samples: style `k`
/// applies filter `k` of [`StyleFilter::catalog`] to the sample drawn from
/// `derive(seed, [k])`.
pub fn style_references(base: &BaseModel<f32>, n: usize, seed: u64) -> Result<Vec<(String, Image<f32>)>> {
    StyleFilter::catalog(n)
        .into_iter()
        .enumerate()
        .map(|(k, (name, filter))| {
            let code = sample_code(&base.mapping, &base.styler, rng::derive(seed, &[k as u64]))?;
            Ok((name, filter.apply(&base.generator.synthesize(&code)?)))
        })
        .collect()
}
