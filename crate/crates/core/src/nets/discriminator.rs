use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dense, ParamTree};
use crate::error::{shape_err, Error, Result};
use crate::ops::{self, lrelu, lrelu_grad};
use crate::real::Real;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    pub image_channels: usize,
    pub rgb_channels: usize,
    /// Output channels of each conv + downsample block; one feature tap per block.
    pub channels: Vec<usize>,
    pub hidden: usize,
}

impl DiscriminatorConfig {
    pub fn toy() -> Self {
        Self {
            resolution: 32,
            image_channels: 3,
            rgb_channels: 16,
            channels: vec![16, 32, 64, 64],
            hidden: 64,
        }
    }

    pub fn micro() -> Self {
        Self {
            resolution: 8,
            image_channels: 3,
            rgb_channels: 4,
            channels: vec![4, 8],
            hidden: 8,
        }
    }

    pub fn final_res(&self) -> usize {
        self.resolution >> self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.final_res() == 0 {
            return Err(Error::Config("discriminator needs 1..log2(res) blocks".into()));
        }
        if self.resolution % (1 << self.channels.len()) != 0 {
            return Err(Error::Config("resolution not divisible by block downsampling".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Conv<T> {
    fn new<R: Rng>(rng: &mut R, out: usize, fan_in: usize) -> Self {
        Self {
            weight: rng::gaussian::<T, _>(rng, out * fan_in)
                .into_shape_with_order((out, fan_in))
                .expect("sized"),
            bias: Array1::zeros(out),
        }
    }
    fn scale(&self) -> T {
        T::lit(1.0 / (self.weight.ncols() as f64).sqrt())
    }
    fn effective(&self) -> Array2<T> {
        let s = self.scale();
        self.weight.mapv(|v| v * s)
    }
}

/// Convolutional feature stack with a scalar realness head.
///
/// Feature taps are the outputs of the downsampling blocks, listed in
/// processing order (tap 0 is the first, highest-resolution block).
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    config: DiscriminatorConfig,
    pub from_rgb: Conv<T>,
    pub blocks: Vec<Conv<T>>,
    pub fc: Dense<T>,
    pub out: Dense<T>,
}

pub struct DiscOutput<T> {
    pub taps: Vec<Array4<T>>,
    /// Present when the head was evaluated; one logit per batch item.
    pub logits: Option<Array1<T>>,
}

pub struct DiscCache<T> {
    x: Array4<T>,
    rgb_pre: Array4<T>,
    block_in: Vec<Array4<T>>,
    block_pre: Vec<Array4<T>>,
    last_dim: (usize, usize, usize, usize),
    flat: Option<Array2<T>>,
    fc_pre: Option<Array2<T>>,
}

fn gain<T: Real>() -> T {
    T::lit(std::f64::consts::SQRT_2)
}

fn flatten_tap<T: Real>(t: &Array4<T>) -> Array2<T> {
    let (c, b, h, w) = t.dim();
    t.view()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c * h * w, b))
        .expect("contiguous")
}

fn unflatten_tap<T: Real>(f: &Array2<T>, dim: (usize, usize, usize, usize)) -> Array4<T> {
    let (c, b, h, w) = dim;
    f.as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h, w, b))
        .expect("sized")
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .into_owned()
}

impl<T: Real> Discriminator<T> {
    pub fn new<R: Rng>(rng: &mut R, config: &DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        let from_rgb = Conv::new(rng, config.rgb_channels, config.image_channels);
        let mut cin = config.rgb_channels;
        let blocks = config
            .channels
            .iter()
            .map(|&c| {
                let conv = Conv::new(rng, c, cin * 9);
                cin = c;
                conv
            })
            .collect();
        let fr = config.final_res();
        let fc = Dense::new(rng, config.hidden, cin * fr * fr, 0.0);
        let out = Dense::new(rng, 1, config.hidden, 0.0);
        Ok(Self {
            config: config.clone(),
            from_rgb,
            blocks,
            fc,
            out,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn num_taps(&self) -> usize {
        self.blocks.len()
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        let r = self.config.resolution;
        (self.config.image_channels, r, r)
    }

    /// Runs the first `taps` blocks, plus all blocks and the head when
    /// `head` is set. `x` is `(C, B, H, W)`.
    pub fn forward(&self, x: &Array4<T>, taps: usize, head: bool) -> Result<(DiscOutput<T>, DiscCache<T>)> {
        let (c, _, h, w) = x.dim();
        let r = self.config.resolution;
        if (c, h, w) != (self.config.image_channels, r, r) {
            return Err(shape_err!(
                "discriminator expects ({}, {r}, {r}) images, got ({c}, {h}, {w})",
                self.config.image_channels
            ));
        }
        let depth = if head { self.blocks.len() } else { taps.min(self.blocks.len()) };
        let g = gain::<T>();
        let mut rgb_pre = ops::conv1x1(self.from_rgb.effective().view(), x);
        ops::add_channel_bias(&mut rgb_pre, self.from_rgb.bias.as_slice().expect("contiguous"));
        let mut hcur = rgb_pre.mapv(|v| lrelu(v) * g);
        let mut block_in = Vec::with_capacity(depth);
        let mut block_pre = Vec::with_capacity(depth);
        let mut tap_out = Vec::with_capacity(depth);
        for blk in &self.blocks[..depth] {
            let mut pre = ops::conv3x3(blk.effective().view(), &hcur);
            ops::add_channel_bias(&mut pre, blk.bias.as_slice().expect("contiguous"));
            let act = pre.mapv(|v| lrelu(v) * g);
            let pooled = ops::avgpool2x(&act);
            block_in.push(std::mem::replace(&mut hcur, pooled.clone()));
            block_pre.push(pre);
            tap_out.push(pooled);
        }
        let last_dim = hcur.dim();
        let (logits, flat, fc_pre) = if head {
            let flat = flatten_tap(&hcur);
            let fc_pre = self.fc.forward(&flat);
            let hid = fc_pre.mapv(|v| lrelu(v) * g);
            let logit = self.out.forward(&hid).row(0).to_owned();
            (Some(logit), Some(flat), Some(fc_pre))
        } else {
            (None, None, None)
        };
        Ok((
            DiscOutput {
                taps: tap_out,
                logits,
            },
            DiscCache {
                x: x.clone(),
                rgb_pre,
                block_in,
                block_pre,
                last_dim,
                flat,
                fc_pre,
            },
        ))
    }

    /// Reverse pass from optional tap gradients and an optional logit
    /// gradient. Returns parameter gradients (when requested) and the input
    /// gradient.
    pub fn backward(
        &self,
        cache: &DiscCache<T>,
        tap_grads: &[Option<Array4<T>>],
        logit_grad: Option<&Array1<T>>,
        want_params: bool,
    ) -> (Option<Self>, Array4<T>) {
        let mut grads = want_params.then(|| self.zeroed());
        let g = gain::<T>();
        let depth = cache.block_in.len();
        let mut carry: Option<Array4<T>> = None;

        if let (Some(lg), Some(flat), Some(fc_pre)) = (logit_grad, &cache.flat, &cache.fc_pre) {
            let hid = fc_pre.mapv(|v| lrelu(v) * g);
            let lg2 = lg.clone().insert_axis(ndarray::Axis(0));
            let mut ghid = self
                .out
                .backward(&hid, &lg2, grads.as_mut().map(|gr| &mut gr.out));
            ghid.zip_mut_with(fc_pre, |gv, &p| *gv = *gv * g * lrelu_grad(p));
            let gflat = self.fc.backward(flat, &ghid, grads.as_mut().map(|gr| &mut gr.fc));
            carry = Some(unflatten_tap(&gflat, cache.last_dim));
        }

        for i in (0..depth).rev() {
            let extra = tap_grads.get(i).and_then(|t| t.as_ref());
            let gtap = match (carry.take(), extra) {
                (Some(c), Some(e)) => c + e,
                (Some(c), None) => c,
                (None, Some(e)) => e.clone(),
                (None, None) => continue,
            };
            let mut gact = ops::avgpool2x_backward(&gtap);
            gact.zip_mut_with(&cache.block_pre[i], |gv, &p| *gv = *gv * g * lrelu_grad(p));
            let blk = &self.blocks[i];
            let (gw, gin) =
                ops::conv3x3_backward(blk.effective().view(), &cache.block_in[i], &gact, want_params);
            if let Some(gr) = grads.as_mut() {
                gr.blocks[i].weight.scaled_add(blk.scale(), &gw.expect("requested"));
                gr.blocks[i].bias += &Array1::from(ops::channel_sums(&gact));
            }
            carry = Some(gin);
        }

        let gx = match carry {
            Some(mut grgb) => {
                grgb.zip_mut_with(&cache.rgb_pre, |gv, &p| *gv = *gv * g * lrelu_grad(p));
                let (gw, gx) = ops::conv1x1_backward(
                    self.from_rgb.effective().view(),
                    &cache.x,
                    &grgb,
                    want_params,
                );
                if let Some(gr) = grads.as_mut() {
                    gr.from_rgb.weight.scaled_add(self.from_rgb.scale(), &gw.expect("requested"));
                    gr.from_rgb.bias += &Array1::from(ops::channel_sums(&grgb));
                }
                gx
            }
            None => Array4::zeros(cache.x.dim()),
        };
        (grads, gx)
    }

    /// All tap features of a single image.
    pub fn features(&self, img: &super::Image<T>) -> Result<Vec<ndarray::Array3<T>>> {
        img.ensure_dims(self.input_dims())?;
        let x = super::batch_from_images(std::slice::from_ref(img))?;
        let (out, _) = self.forward(&x, self.num_taps(), false)?;
        Ok(out
            .taps
            .into_iter()
            .map(|t| t.index_axis_move(ndarray::Axis(1), 0))
            .collect())
    }
}

impl<T: Real> ParamTree<T> for Discriminator<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &[usize], &'a [T])) {
        let mut conv = |p: &str, c: &'a Conv<T>| {
            f(&format!("{p}.weight"), c.weight.shape(), c.weight.as_slice().expect("contiguous"));
            f(&format!("{p}.bias"), c.bias.shape(), c.bias.as_slice().expect("contiguous"));
        };
        conv("from_rgb", &self.from_rgb);
        for (i, b) in self.blocks.iter().enumerate() {
            conv(&format!("block{i}"), b);
        }
        self.fc.visit("fc", f);
        self.out.visit("out", f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        let mut conv = |p: &str, c: &mut Conv<T>| {
            f(&format!("{p}.weight"), c.weight.as_slice_mut().expect("contiguous"));
            f(&format!("{p}.bias"), c.bias.as_slice_mut().expect("contiguous"));
        };
        conv("from_rgb", &mut self.from_rgb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            conv(&format!("block{i}"), b);
        }
        self.fc.visit_mut("fc", f);
        self.out.visit_mut("out", f);
    }
}
