use std::path::Path;

use ndarray::{Array3, Array4, Axis};

use crate::error::{shape_err, Error, Result};
use crate::real::Real;

/// Channel-first image with pixels in `[-1, 1]`.
///
/// PNG I/O maps `[-1, 1]` linearly onto `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T = f32> {
    data: Array3<T>,
}

impl<T: Real> Image<T> {
    pub fn new(data: Array3<T>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("image has non-finite pixels".into()));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((channels, height, width)),
        }
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn into_data(self) -> Array3<T> {
        self.data
    }

    /// `(channels, height, width)`
    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn ensure_dims(&self, dims: (usize, usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(shape_err!("image is {:?}, expected {:?}", self.dims(), dims));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn mse(&self, other: &Self) -> f64 {
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (*a - *b).as_f64().powi(2))
            .sum::<f64>()
            / n
    }

    pub fn clamped(&self) -> Self {
        Self {
            data: self.data.mapv(|v| v.max(-T::one()).min(T::one())),
        }
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            data: self.data.mapv(|v| U::lit(v.as_f64())),
        }
    }

    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        let (c, h, w) = self.dims();
        if c != 3 && c != 1 {
            return Err(shape_err!("cannot encode {c}-channel image as RGB"));
        }
        let q = |v: T| (((v.as_f64().clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round()) as u8;
        Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch: usize| q(self.data[[ch.min(c - 1), y as usize, x as usize]]);
            image::Rgb([px(0), px(1), px(2)])
        }))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            let p = img.get_pixel(x as u32, y as u32)[c] as f64;
            T::lit(p / 255.0 * 2.0 - 1.0)
        });
        Self { data }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8()?.save(path.as_ref())?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    /// Row-major contact sheet of equally sized tiles.
    pub fn grid(tiles: &[Self], columns: usize) -> Result<Self> {
        let first = tiles
            .first()
            .ok_or_else(|| Error::Argument("empty grid".into()))?;
        let (c, h, w) = first.dims();
        let cols = columns.clamp(1, tiles.len());
        let rows = tiles.len().div_ceil(cols);
        let mut data = Array3::from_elem((c, rows * h, cols * w), -T::one());
        for (i, t) in tiles.iter().enumerate() {
            t.ensure_dims((c, h, w))?;
            let (r, col) = (i / cols, i % cols);
            data.slice_mut(ndarray::s![.., r * h..(r + 1) * h, col * w..(col + 1) * w])
                .assign(&t.data);
        }
        Ok(Self { data })
    }
}

/// `(C, B, H, W)` batch from images of one shape.
pub fn batch_from_images<T: Real>(images: &[Image<T>]) -> Result<Array4<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Argument("empty image batch".into()))?;
    let (c, h, w) = first.dims();
    let mut out = Array4::zeros((c, images.len(), h, w));
    for (b, img) in images.iter().enumerate() {
        img.ensure_dims((c, h, w))?;
        out.index_axis_mut(Axis(1), b).assign(&img.data);
    }
    Ok(out)
}

pub fn images_from_batch<T: Real>(batch: &Array4<T>) -> Vec<Image<T>> {
    batch
        .axis_iter(Axis(1))
        .map(|v| Image {
            data: v.as_standard_layout().into_owned(),
        })
        .collect()
}
