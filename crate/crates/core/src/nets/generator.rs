use ndarray::{Array1, Array2, Array3, Array4, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ParamTree;
use crate::error::{shape_err, Error, Result};
use crate::latent::{RowSchedule, SCode};
use crate::ops::{self, lrelu, lrelu_grad};
use crate::real::Real;
use crate::rng;

const DEMOD_EPS: f64 = 1e-8;

/// Architecture of the synthesis network.
///
/// Block `i` consumes style row `i`; its input channel count is the row
/// width and its output channel count is the next row's width (or
/// `last_channels` for the final block).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub schedule: RowSchedule,
    pub const_res: usize,
    /// Rows whose block doubles resolution before convolving.
    pub upsample_rows: Vec<usize>,
    pub last_channels: usize,
    pub image_channels: usize,
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_depth: usize,
}

impl GeneratorConfig {
    /// 32x32 RGB with the ten-row toy schedule.
    pub fn toy() -> Self {
        Self {
            schedule: RowSchedule::toy(),
            const_res: 4,
            upsample_rows: vec![2, 5, 7],
            last_channels: 16,
            image_channels: 3,
            z_dim: 64,
            w_dim: 64,
            mapping_depth: 4,
        }
    }

    /// Three rows, 8x8 output; small enough for exhaustive gradient checks.
    pub fn micro() -> Self {
        Self {
            schedule: RowSchedule::new(vec![8, 4, 4]).expect("valid"),
            const_res: 2,
            upsample_rows: vec![1, 2],
            last_channels: 4,
            image_channels: 3,
            z_dim: 8,
            w_dim: 8,
            mapping_depth: 2,
        }
    }

    pub fn resolution(&self) -> usize {
        self.const_res << self.upsample_rows.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.schedule.len();
        if self.upsample_rows.iter().any(|&r| r >= n) {
            return Err(Error::Config("upsample row outside schedule".into()));
        }
        if self.upsample_rows.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Config("upsample rows must be strictly increasing".into()));
        }
        if self.const_res == 0 || self.image_channels == 0 || self.last_channels == 0 {
            return Err(Error::Config("generator dimensions must be positive".into()));
        }
        if self.schedule.widths().iter().any(|&w| w > self.w_dim) {
            return Err(Error::Config("row width exceeds W width".into()));
        }
        Ok(())
    }
}

/// Style-modulated, demodulated 3x3 convolution followed by leaky ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ModConv<T> {
    /// `(out, in * 9)`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub upsample: bool,
}

struct ModConvCache<T> {
    x: Array4<T>,
    s: Array2<T>,
    d: Array2<T>,
    c: Array4<T>,
}

fn gain<T: Real>() -> T {
    T::lit(std::f64::consts::SQRT_2)
}

fn scale_channels<T: Real>(x: &Array4<T>, s: &Array2<T>) -> Array4<T> {
    let mut y = x.clone();
    for (mut plane, srow) in y.axis_iter_mut(Axis(0)).zip(s.axis_iter(Axis(0))) {
        for (mut img, &sv) in plane.axis_iter_mut(Axis(0)).zip(srow.iter()) {
            img.mapv_inplace(|v| v * sv);
        }
    }
    y
}

impl<T: Real> ModConv<T> {
    fn in_channels(&self) -> usize {
        self.weight.ncols() / 9
    }

    /// Per-(out, in) squared weight norms.
    fn weight_sq(&self) -> Array2<T> {
        let (o, c9) = self.weight.dim();
        self.weight
            .mapv(|v| v * v)
            .into_shape_with_order((o, c9 / 9, 9))
            .expect("contiguous")
            .sum_axis(Axis(2))
    }

    fn forward(&self, x_in: &Array4<T>, s: &Array2<T>) -> (Array4<T>, ModConvCache<T>) {
        let x = if self.upsample {
            ops::upsample2x(x_in)
        } else {
            x_in.clone()
        };
        let xs = scale_channels(&x, s);
        let c = ops::conv3x3(self.weight.view(), &xs);
        let w2 = self.weight_sq();
        let d = w2
            .dot(&s.mapv(|v| v * v))
            .mapv(|v| (v + T::lit(DEMOD_EPS)).sqrt().recip());
        let g = gain::<T>();
        let mut y = c.clone();
        for ((mut plane, drow), &b) in y
            .axis_iter_mut(Axis(0))
            .zip(d.axis_iter(Axis(0)))
            .zip(self.bias.iter())
        {
            for (mut img, &dv) in plane.axis_iter_mut(Axis(0)).zip(drow.iter()) {
                img.mapv_inplace(|v| lrelu(v * dv + b) * g);
            }
        }
        (
            y,
            ModConvCache {
                x,
                s: s.clone(),
                d,
                c,
            },
        )
    }

    fn backward(
        &self,
        cache: &ModConvCache<T>,
        gy: &Array4<T>,
        grads: Option<&mut ModConv<T>>,
    ) -> (Array4<T>, Array2<T>) {
        let g = gain::<T>();
        let (o, b) = cache.d.dim();
        let mut gc = gy.clone();
        let mut gd = Array2::<T>::zeros((o, b));
        let mut gbias = Array1::<T>::zeros(o);
        for oi in 0..o {
            let bias = self.bias[oi];
            for bi in 0..b {
                let dv = cache.d[[oi, bi]];
                let mut sd = T::zero();
                let mut sb = T::zero();
                let cplane = cache.c.index_axis(Axis(0), oi);
                let cimg = cplane.index_axis(Axis(0), bi);
                let mut gplane = gc.index_axis_mut(Axis(0), oi);
                let mut gimg = gplane.index_axis_mut(Axis(0), bi);
                Zip::from(&mut gimg).and(&cimg).for_each(|gv, &cv| {
                    let gpre = *gv * g * lrelu_grad(cv * dv + bias);
                    sd += gpre * cv;
                    sb += gpre;
                    *gv = gpre * dv;
                });
                gd[[oi, bi]] = sd;
                gbias[oi] += sb;
            }
        }
        // Demodulation: d = (sum_c s_c^2 W2[o,c] + eps)^-1/2
        let q = Zip::from(&gd)
            .and(&cache.d)
            .map_collect(|&gdv, &dv| -gdv * dv * dv * dv);
        let w2 = self.weight_sq();
        let mut gs = &cache.s * &w2.t().dot(&q);

        let xs = scale_channels(&cache.x, &cache.s);
        let want = grads.is_some();
        let (gw_conv, gxs) = ops::conv3x3_backward(self.weight.view(), &xs, &gc, want);
        if let Some(gr) = grads {
            let coef = q.dot(&cache.s.mapv(|v| v * v).t());
            let mut gw = gw_conv.expect("requested");
            let c_in = self.in_channels();
            for oi in 0..o {
                for ci in 0..c_in {
                    let k = coef[[oi, ci]];
                    for t in 0..9 {
                        gw[[oi, ci * 9 + t]] += k * self.weight[[oi, ci * 9 + t]];
                    }
                }
            }
            gr.weight += &gw;
            gr.bias += &gbias;
        }
        // xs = x * s
        let mut gx = gxs.clone();
        for (ci, (mut gplane, xplane)) in gx
            .axis_iter_mut(Axis(0))
            .zip(cache.x.axis_iter(Axis(0)))
            .enumerate()
        {
            for (bi, (mut gimg, ximg)) in gplane
                .axis_iter_mut(Axis(0))
                .zip(xplane.axis_iter(Axis(0)))
                .enumerate()
            {
                let sv = cache.s[[ci, bi]];
                let mut acc = T::zero();
                Zip::from(&mut gimg).and(&ximg).for_each(|gv, &xv| {
                    acc += *gv * xv;
                    *gv = *gv * sv;
                });
                gs[[ci, bi]] += acc;
            }
        }
        let gx_in = if self.upsample {
            ops::upsample2x_backward(&gx)
        } else {
            gx
        };
        (gx_in, gs)
    }
}

/// Synthesis network `G_theta`: learned constant, one modulated block per
/// style row, and a 1x1 image head squashed by `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    config: GeneratorConfig,
    /// `(C0, r, r)`
    pub constant: Array3<T>,
    pub blocks: Vec<ModConv<T>>,
    /// `(image_channels, last_channels)`
    pub head_weight: Array2<T>,
    pub head_bias: Array1<T>,
}

pub struct GenCache<T> {
    blocks: Vec<ModConvCache<T>>,
    head_in: Array4<T>,
    image: Array4<T>,
}

/// Stacks codes into per-row `(width, B)` matrices.
pub fn codes_to_batch<T: Real>(codes: &[SCode<T>]) -> Result<Vec<Array2<T>>> {
    let first = codes
        .first()
        .ok_or_else(|| Error::Argument("empty code batch".into()))?;
    let sched = first.schedule();
    for c in codes {
        c.ensure_schedule(sched)?;
    }
    Ok(sched
        .widths()
        .iter()
        .enumerate()
        .map(|(i, &w)| Array2::from_shape_fn((w, codes.len()), |(r, b)| codes[b].row(i)[r]))
        .collect())
}

impl<T: Real> Generator<T> {
    pub fn new<R: Rng>(rng: &mut R, config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let widths = config.schedule.widths();
        let r = config.const_res;
        let constant = rng::gaussian::<T, _>(rng, widths[0] * r * r)
            .into_shape_with_order((widths[0], r, r))
            .expect("sized");
        let blocks = (0..widths.len())
            .map(|i| {
                let cin = widths[i];
                let cout = widths.get(i + 1).copied().unwrap_or(config.last_channels);
                ModConv {
                    weight: rng::gaussian::<T, _>(rng, cout * cin * 9)
                        .into_shape_with_order((cout, cin * 9))
                        .expect("sized"),
                    bias: Array1::zeros(cout),
                    upsample: config.upsample_rows.contains(&i),
                }
            })
            .collect();
        let head_weight = rng::gaussian::<T, _>(rng, config.image_channels * config.last_channels)
            .into_shape_with_order((config.image_channels, config.last_channels))
            .expect("sized");
        Ok(Self {
            config: config.clone(),
            constant,
            blocks,
            head_weight,
            head_bias: Array1::zeros(config.image_channels),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn schedule(&self) -> &RowSchedule {
        &self.config.schedule
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution()
    }

    fn head_scale(&self) -> T {
        T::lit(1.0 / (self.config.last_channels as f64).sqrt())
    }

    /// Batched synthesis. `styles[i]` is `(width_i, B)`; the result is
    /// `(image_channels, B, H, W)` in `[-1, 1]`.
    pub fn forward(&self, styles: &[Array2<T>]) -> Result<(Array4<T>, GenCache<T>)> {
        let widths = self.config.schedule.widths();
        if styles.len() != widths.len() {
            return Err(shape_err!(
                "generator expects {} style rows, got {}",
                widths.len(),
                styles.len()
            ));
        }
        let b = styles[0].ncols();
        for (i, (s, &w)) in styles.iter().zip(widths).enumerate() {
            if s.nrows() != w || s.ncols() != b {
                return Err(shape_err!("style row {i} has shape {:?}, expected ({w}, {b})", s.dim()));
            }
        }
        let (c0, r, _) = self.constant.dim();
        let mut x = Array4::<T>::zeros((c0, b, r, r));
        for mut img in x.axis_iter_mut(Axis(1)) {
            img.assign(&self.constant);
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (blk, s) in self.blocks.iter().zip(styles) {
            let (y, c) = blk.forward(&x, s);
            caches.push(c);
            x = y;
        }
        let hw = self.head_weight.mapv(|v| v * self.head_scale());
        let mut img = ops::conv1x1(hw.view(), &x);
        ops::add_channel_bias(&mut img, self.head_bias.as_slice().expect("contiguous"));
        img.mapv_inplace(|v| v.tanh());
        if img.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("generator produced non-finite pixels".into()));
        }
        Ok((
            img.clone(),
            GenCache {
                blocks: caches,
                head_in: x,
                image: img,
            },
        ))
    }

    /// Reverse pass. Returns parameter gradients (when requested) and the
    /// gradient for every style row.
    pub fn backward(
        &self,
        cache: &GenCache<T>,
        grad_image: &Array4<T>,
        want_params: bool,
    ) -> (Option<Self>, Vec<Array2<T>>) {
        let mut grads = want_params.then(|| self.zeroed());
        let gpre = Zip::from(grad_image)
            .and(&cache.image)
            .map_collect(|&g, &y| g * (T::one() - y * y));
        let hs = self.head_scale();
        let hw = self.head_weight.mapv(|v| v * hs);
        let (gw, mut gx) = ops::conv1x1_backward(hw.view(), &cache.head_in, &gpre, want_params);
        if let Some(gr) = grads.as_mut() {
            gr.head_weight.scaled_add(hs, &gw.expect("requested"));
            gr.head_bias += &Array1::from(ops::channel_sums(&gpre));
        }
        let mut gstyles = vec![Array2::zeros((0, 0)); self.blocks.len()];
        for i in (0..self.blocks.len()).rev() {
            let slot = grads.as_mut().map(|g| &mut g.blocks[i]);
            let (gxi, gs) = self.blocks[i].backward(&cache.blocks[i], &gx, slot);
            gstyles[i] = gs;
            gx = gxi;
        }
        if let Some(gr) = grads.as_mut() {
            gr.constant += &gx.sum_axis(Axis(1));
        }
        (grads, gstyles)
    }

    pub fn synthesize_batch(&self, codes: &[SCode<T>]) -> Result<Array4<T>> {
        Ok(self.forward(&codes_to_batch(codes)?)?.0)
    }

    pub fn synthesize(&self, s: &SCode<T>) -> Result<super::Image<T>> {
        s.ensure_schedule(self.schedule())?;
        if !self.all_finite() {
            return Err(Error::Numeric("generator parameters are not finite".into()));
        }
        let img = self.synthesize_batch(std::slice::from_ref(s))?;
        Ok(super::images_from_batch(&img).remove(0))
    }
}

impl<T: Real> ParamTree<T> for Generator<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &[usize], &'a [T])) {
        f("const", self.constant.shape(), self.constant.as_slice().expect("contiguous"));
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("block{i}.weight"), b.weight.shape(), b.weight.as_slice().expect("contiguous"));
            f(&format!("block{i}.bias"), b.bias.shape(), b.bias.as_slice().expect("contiguous"));
        }
        f("head.weight", self.head_weight.shape(), self.head_weight.as_slice().expect("contiguous"));
        f("head.bias", self.head_bias.shape(), self.head_bias.as_slice().expect("contiguous"));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        f("const", self.constant.as_slice_mut().expect("contiguous"));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{i}.weight"), b.weight.as_slice_mut().expect("contiguous"));
            f(&format!("block{i}.bias"), b.bias.as_slice_mut().expect("contiguous"));
        }
        f("head.weight", self.head_weight.as_slice_mut().expect("contiguous"));
        f("head.bias", self.head_bias.as_slice_mut().expect("contiguous"));
    }
}
