//! Adversarial pre-training of the base GAN on the synthetic shape dataset.
//!
//! Non-saturating logistic loss, a lazily applied R1 penalty on real images
//! and an exponential moving average of the generator weights. The R1
//! parameter gradient uses a central difference of discriminator outputs
//! along the input gradient, which avoids second-order backprop.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BaseConfig, BaseModel};
use crate::nets::{batch_from_images, Discriminator, Generator, Image, MappingNetwork, ParamTree, StyleMapper};
use crate::optim::{Adam, AdamConfig};
use crate::real::Real;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub generator_lr: f64,
    pub discriminator_lr: f64,
    /// Learning-rate multiplier of the mapping network.
    pub mapping_lr_scale: f64,
    pub adam: AdamConfig,
    pub r1_gamma: f64,
    /// R1 is applied every this many steps, scaled up accordingly.
    pub r1_every: usize,
    /// Decay of the generator weight average; 0 disables averaging.
    pub ema_beta: f64,
    /// Samples per side used by the feature-gap check.
    pub gate_samples: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch: 8,
            generator_lr: 2e-3,
            discriminator_lr: 2e-3,
            mapping_lr_scale: 0.01,
            adam: AdamConfig {
                beta1: 0.0,
                beta2: 0.99,
                eps: 1e-8,
            },
            r1_gamma: 0.5,
            r1_every: 16,
            ema_beta: 0.995,
            gate_samples: 64,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.r1_every == 0 || self.gate_samples == 0 {
            return Err(Error::Config("batch, r1_every and gate_samples must be >= 1".into()));
        }
        let rates = [self.generator_lr, self.discriminator_lr, self.mapping_lr_scale, self.r1_gamma];
        if rates.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("learning rates and r1_gamma must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return Err(Error::Config("ema_beta must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PretrainRecord {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    /// Mean squared input-gradient norm on reals, when measured this step.
    pub r1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Feature gap of the initial generator, measured with the final discriminator.
    pub initial_gap: f64,
    pub final_gap: f64,
    pub log: Vec<PretrainRecord>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn noise(z_dim: usize, n: usize, seed: u64, tags: &[u64]) -> Array2<f32> {
    let mut r = rng::stream(seed, tags);
    let flat = rng::gaussian::<f32, _>(&mut r, z_dim * n);
    Array2::from_shape_vec((n, z_dim), flat.to_vec()).expect("sized").reversed_axes().as_standard_layout().into_owned()
}

struct Synth<'a> {
    mapping: &'a MappingNetwork<f32>,
    styler: &'a StyleMapper<f32>,
    generator: &'a Generator<f32>,
}

impl Synth<'_> {
    fn images(&self, z: &Array2<f32>) -> Result<Array4<f32>> {
        let w = self.mapping.map_batch(z)?;
        let (s, _) = self.styler.forward_batch(&vec![w; self.generator.schedule().len()])?;
        Ok(self.generator.forward(&s)?.0)
    }
}

/// R1 statistic `mean_b |grad_x D(x_b)|^2` on a batch and an approximation
/// of its gradient with respect to the discriminator parameters.
///
/// The Hessian-vector product is a central difference of parameter
/// gradients at `x +- h g`, with `h` chosen so the input moves by `rel_step`
/// in root-mean-square terms.
pub fn r1_gradient<T: Real>(d: &Discriminator<T>, x: &Array4<T>, rel_step: f64) -> Result<(f64, Discriminator<T>)> {
    let b = x.dim().1;
    let (_, cache) = d.forward(x, 0, true)?;
    let ones = Array1::from_elem(b, T::one());
    let (_, gx) = d.backward(&cache, &[], Some(&ones), false);
    let sq: f64 = gx.iter().map(|&v| v.as_f64() * v.as_f64()).sum();
    let mut grads = d.zeroed();
    let rms = (sq / gx.len() as f64).sqrt();
    if rms > 1e-12 {
        let h = rel_step / rms;
        for sign in [1.0, -1.0] {
            let xs = x + &gx.mapv(|v| v * T::lit(sign * h));
            let (_, c) = d.forward(&xs, 0, true)?;
            let lg = Array1::from_elem(b, T::lit(sign / (b as f64 * h)));
            grads.accumulate(&d.backward(&c, &[], Some(&lg), true).0.expect("requested"));
        }
    }
    Ok((sq / b as f64, grads))
}

/// Mean over taps of the L1 distance between channel means of two batches.
pub fn feature_gap(d: &Discriminator<f32>, a: &Array4<f32>, b: &Array4<f32>) -> Result<f64> {
    let (fa, _) = d.forward(a, d.num_taps(), false)?;
    let (fb, _) = d.forward(b, d.num_taps(), false)?;
    let mut gap = 0.0;
    for (ta, tb) in fa.taps.iter().zip(&fb.taps) {
        let ma = ta.mean_axis(Axis(3)).and_then(|m| m.mean_axis(Axis(2))).and_then(|m| m.mean_axis(Axis(1)));
        let mb = tb.mean_axis(Axis(3)).and_then(|m| m.mean_axis(Axis(2))).and_then(|m| m.mean_axis(Axis(1)));
        let (ma, mb) = (ma.expect("non-empty"), mb.expect("non-empty"));
        gap += (&ma - &mb).mapv(|v| v.abs() as f64).mean().unwrap_or(0.0);
    }
    Ok(gap / fa.taps.len() as f64)
}

fn sample_reals(data: &[Image<f32>], n: usize, seed: u64, tags: &[u64]) -> Result<Array4<f32>> {
    let mut r = rng::stream(seed, tags);
    let picks: Vec<Image<f32>> = (0..n).map(|_| data[r.gen_range(0..data.len())].clone()).collect();
    batch_from_images(&picks)
}

fn ema<P: ParamTree<f32>>(avg: &mut P, cur: &P, beta: f64) {
    let b = beta as f32;
    let mut a = avg.flat_values();
    for (x, &c) in a.iter_mut().zip(&cur.flat_values()) {
        *x = b * *x + (1.0 - b) * c;
    }
    avg.set_flat_values(&a);
}

/// Trains a base model from scratch. `progress` sees every step record.
pub fn pretrain_gan(
    config: &BaseConfig,
    data: &[Image<f32>],
    cfg: &PretrainConfig,
    mut progress: impl FnMut(&PretrainRecord),
) -> Result<(BaseModel<f32>, PretrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("pre-training needs at least one image".into()));
    }
    let dims = (
        config.generator.image_channels,
        config.generator.resolution(),
        config.generator.resolution(),
    );
    for img in data {
        img.ensure_dims(dims)?;
    }
    let initial = BaseModel::<f32>::init(config, cfg.seed)?;
    let mut model = initial.clone();
    let mut avg = initial.clone();
    let (b, z_dim, rows) = (cfg.batch, model.mapping.z_dim(), model.generator.schedule().len());
    let mut opt_map = Adam::new(cfg.adam, model.mapping.num_params());
    let mut opt_sty = Adam::new(cfg.adam, model.styler.num_params());
    let mut opt_gen = Adam::new(cfg.adam, model.generator.num_params());
    let mut opt_d = Adam::new(cfg.adam, model.discriminator.num_params());
    let mut log = Vec::with_capacity(cfg.steps);
    let diverged = |step: usize, what: &str| {
        Error::Numeric(format!("pre-training diverged at step {step} ({what}); seed {}", cfg.seed))
    };

    for step in 0..cfg.steps {
        let d = &model.discriminator;
        // discriminator update
        let reals = sample_reals(data, b, cfg.seed, &[step as u64, 1])?;
        let fakes = Synth {
            mapping: &model.mapping,
            styler: &model.styler,
            generator: &model.generator,
        }
        .images(&noise(z_dim, b, cfg.seed, &[step as u64, 0]))?;
        let (out_f, cache_f) = d.forward(&fakes, 0, true)?;
        let (out_r, cache_r) = d.forward(&reals, 0, true)?;
        let lf = out_f.logits.expect("head requested");
        let lr = out_r.logits.expect("head requested");
        let d_loss = (lf.iter().map(|&v| softplus(v as f64)).sum::<f64>()
            + lr.iter().map(|&v| softplus(-v as f64)).sum::<f64>())
            / b as f64;
        if !d_loss.is_finite() {
            return Err(diverged(step, "discriminator loss"));
        }
        let gf = lf.mapv(|v| (sigmoid(v as f64) / b as f64) as f32);
        let gr = lr.mapv(|v| (-sigmoid(-v as f64) / b as f64) as f32);
        let (gd, _) = d.backward(&cache_f, &[], Some(&gf), true);
        let mut gd = gd.expect("requested");
        gd.accumulate(&d.backward(&cache_r, &[], Some(&gr), true).0.expect("requested"));

        let mut r1 = None;
        if cfg.r1_gamma > 0.0 && step % cfg.r1_every == 0 {
            let (value, g) = r1_gradient(d, &reals, 1e-2)?;
            r1 = Some(value);
            let scale = (0.5 * cfg.r1_gamma * cfg.r1_every as f64) as f32;
            let mut flat = gd.flat_values();
            for (a, v) in flat.iter_mut().zip(g.flat_values()) {
                *a += scale * v;
            }
            gd.set_flat_values(&flat);
        }
        if !gd.all_finite() {
            return Err(diverged(step, "discriminator gradient"));
        }
        opt_d.step(&mut model.discriminator, &gd, cfg.discriminator_lr);

        // generator update
        let z = noise(z_dim, b, cfg.seed, &[step as u64, 2]);
        let (w, map_cache) = model.mapping.forward_batch(&z)?;
        let (s, sty_cache) = model.styler.forward_batch(&vec![w; rows])?;
        let (img, gen_cache) = model.generator.forward(&s)?;
        let d = &model.discriminator;
        let (out, dcache) = d.forward(&img, 0, true)?;
        let l = out.logits.expect("head requested");
        let g_loss = l.iter().map(|&v| softplus(-v as f64)).sum::<f64>() / b as f64;
        if !g_loss.is_finite() {
            return Err(diverged(step, "generator loss"));
        }
        let gl = l.mapv(|v| (-sigmoid(-v as f64) / b as f64) as f32);
        let (_, gimg) = d.backward(&dcache, &[], Some(&gl), false);
        let (g_gen, g_s) = model.generator.backward(&gen_cache, &gimg, true);
        let (g_sty, g_ws) = model.styler.backward(&sty_cache, &g_s, true);
        let mut g_w = g_ws[0].clone();
        for g in &g_ws[1..] {
            g_w += g;
        }
        let g_map = model.mapping.backward(&map_cache, &g_w);
        let (g_gen, g_sty) = (g_gen.expect("requested"), g_sty.expect("requested"));
        if !(g_gen.all_finite() && g_sty.all_finite() && g_map.all_finite()) {
            return Err(diverged(step, "generator gradient"));
        }
        opt_gen.step(&mut model.generator, &g_gen, cfg.generator_lr);
        opt_sty.step(&mut model.styler, &g_sty, cfg.generator_lr);
        opt_map.step(&mut model.mapping, &g_map, cfg.generator_lr * cfg.mapping_lr_scale);

        if cfg.ema_beta > 0.0 {
            ema(&mut avg.mapping, &model.mapping, cfg.ema_beta);
            ema(&mut avg.styler, &model.styler, cfg.ema_beta);
            ema(&mut avg.generator, &model.generator, cfg.ema_beta);
        } else {
            avg.mapping = model.mapping.clone();
            avg.styler = model.styler.clone();
            avg.generator = model.generator.clone();
        }
        let rec = PretrainRecord {
            step,
            d_loss,
            g_loss,
            r1,
        };
        progress(&rec);
        log.push(rec);
    }
    avg.discriminator = model.discriminator;

    let n = cfg.gate_samples;
    let reals = sample_reals(data, n, cfg.seed, &[u64::MAX, 1])?;
    let z = noise(z_dim, n, cfg.seed, &[u64::MAX, 0]);
    let gap_of = |m: &BaseModel<f32>| -> Result<f64> {
        let fakes = Synth {
            mapping: &m.mapping,
            styler: &m.styler,
            generator: &m.generator,
        }
        .images(&z)?;
        feature_gap(&avg.discriminator, &fakes, &reals)
    };
    let report = PretrainReport {
        initial_gap: gap_of(&initial)?,
        final_gap: gap_of(&avg)?,
        log,
    };
    Ok((avg, report))
}
