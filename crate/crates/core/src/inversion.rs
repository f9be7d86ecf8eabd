//! GAN inversion by direct latent optimization.
//!
//! Codes are optimized (in W+ by default, optionally directly in style space)
//! with Adam under a cosine-decayed step size against pixel MSE plus a
//! discriminator-feature L1 term. The best iterate seen is returned.

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::latent::{SCode, WCode};
use crate::losses::{perceptual_from_taps, LossConfig};
use crate::model::BaseModel;
use crate::nets::{batch_from_images, Image, MappingNetwork, StyleMapper};
use crate::optim::{Adam, AdamConfig};
use crate::par::Exec;
use crate::real::Real;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionInit {
    #[default]
    MeanCode,
    SeededRandom,
}

/// Space the optimization variables live in. The returned code is always a
/// style-space code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionSpace {
    #[default]
    WPlus,
    Style,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub steps: usize,
    pub step_size: f64,
    pub pixel_weight: f64,
    pub feature_weight: f64,
    pub init: InversionInit,
    pub target_space: InversionSpace,
    /// Draws averaged for the mean-code initializer.
    pub mean_samples: usize,
    /// Targets optimized together in one batch.
    pub batch: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            step_size: 5e-2,
            pixel_weight: 1.0,
            feature_weight: 0.1,
            init: InversionInit::MeanCode,
            target_space: InversionSpace::WPlus,
            mean_samples: 512,
            batch: 4,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("inversion step size must be positive".into()));
        }
        if self.pixel_weight < 0.0 || self.feature_weight < 0.0 {
            return Err(Error::Config("inversion loss weights must be non-negative".into()));
        }
        if self.pixel_weight == 0.0 && self.feature_weight == 0.0 {
            return Err(Error::Config("inversion loss weights are all zero".into()));
        }
        if self.mean_samples == 0 || self.batch == 0 {
            return Err(Error::Config("mean_samples and batch must be >= 1".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        let t = step as f64 / self.steps.max(1) as f64;
        self.step_size * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inversion<T> {
    pub code: SCode<T>,
    /// Optimized W+ code when inverting in W+.
    pub wplus: Option<WCode<T>>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Iterate index of the returned code (0 = initialization).
    pub best_step: usize,
}

/// Mean of `P(z_j)` over seeded draws.
pub fn mean_w<T: Real>(mapping: &MappingNetwork<T>, samples: usize, seed: u64) -> Result<Array1<T>> {
    if samples == 0 {
        return Err(arg_err!("mean code needs at least one sample"));
    }
    let z = noise_batch(mapping.z_dim(), samples, seed);
    let w = mapping.map_batch(&z)?;
    Ok(w.mean_axis(Axis(1)).expect("non-empty"))
}

fn noise_batch<T: Real>(z_dim: usize, n: usize, seed: u64) -> Array2<T> {
    let mut r = rng::stream(seed, &[0x6d65_616e]);
    let flat = rng::gaussian::<T, _>(&mut r, z_dim * n);
    // column j is the j-th draw
    flat.into_shape_with_order((n, z_dim)).expect("sized").reversed_axes().as_standard_layout().into_owned()
}

/// Arithmetic mean of `S(P(z_j))` over seeded draws.
pub fn mean_code<T: Real>(
    mapping: &MappingNetwork<T>,
    styler: &StyleMapper<T>,
    samples: usize,
    seed: u64,
) -> Result<SCode<T>> {
    if samples == 0 {
        return Err(arg_err!("mean code needs at least one sample"));
    }
    let z = noise_batch(mapping.z_dim(), samples, seed);
    let w = mapping.map_batch(&z)?;
    let ws = vec![w; styler.schedule().len()];
    let (s, _) = styler.forward_batch(&ws)?;
    SCode::new(
        styler.schedule().clone(),
        s.iter().map(|m| m.mean_axis(Axis(1)).expect("non-empty")).collect(),
    )
}

/// The `j`-th draw used by [`mean_code`], mapped to a style code.
pub fn sample_code<T: Real>(mapping: &MappingNetwork<T>, styler: &StyleMapper<T>, seed: u64) -> Result<SCode<T>> {
    let mut r = rng::stream(seed, &[0x7a]);
    let z = rng::gaussian(&mut r, mapping.z_dim());
    styler.to_style(&mapping.map_noise(&z)?)
}

fn init_variables<T: Real>(
    base: &BaseModel<T>,
    cfg: &InversionConfig,
    seed: u64,
    count: usize,
    offset: usize,
) -> Result<Vec<Array2<T>>> {
    let rows = base.generator.schedule().len();
    let columns: Vec<Vec<Array1<T>>> = (0..count)
        .map(|j| -> Result<Vec<Array1<T>>> {
            let child = rng::derive(seed, &[(offset + j) as u64]);
            match (cfg.target_space, cfg.init) {
                (InversionSpace::WPlus, InversionInit::MeanCode) => {
                    Ok(vec![mean_w(&base.mapping, cfg.mean_samples, seed)?; rows])
                }
                (InversionSpace::WPlus, InversionInit::SeededRandom) => {
                    let mut r = rng::stream(child, &[0x7a]);
                    let z = rng::gaussian(&mut r, base.mapping.z_dim());
                    Ok(base.mapping.map_noise(&z)?.rows().to_vec())
                }
                (InversionSpace::Style, InversionInit::MeanCode) => {
                    Ok(mean_code(&base.mapping, &base.styler, cfg.mean_samples, seed)?.into_rows())
                }
                (InversionSpace::Style, InversionInit::SeededRandom) => {
                    Ok(sample_code(&base.mapping, &base.styler, child)?.into_rows())
                }
            }
        })
        .collect::<Result<_>>()?;
    Ok((0..rows)
        .map(|i| {
            let w = columns[0][i].len();
            Array2::from_shape_fn((w, count), |(r, b)| columns[b][i][r])
        })
        .collect())
}

struct Evaluation<T> {
    losses: Vec<f64>,
    grads: Option<Vec<Array2<T>>>,
}

fn evaluate<T: Real>(
    base: &BaseModel<T>,
    cfg: &InversionConfig,
    vars: &[Array2<T>],
    targets: &ndarray::Array4<T>,
    target_taps: &[Vec<Array3<T>>],
    grad: bool,
) -> Result<Evaluation<T>> {
    let (styles, style_cache) = match cfg.target_space {
        InversionSpace::WPlus => {
            let (s, c) = base.styler.forward_batch(vars)?;
            (s, Some(c))
        }
        InversionSpace::Style => (vars.to_vec(), None),
    };
    let (img, gcache) = base.generator.forward(&styles)?;
    let b = img.dim().1;
    let npix = T::lit((img.len() / b) as f64);
    let mut losses = vec![0.0; b];
    let pw = T::lit(cfg.pixel_weight);
    let fw = T::lit(cfg.feature_weight);
    let mut gimg = ndarray::Array4::<T>::zeros(img.raw_dim());
    for bi in 0..b {
        let x = img.index_axis(Axis(1), bi);
        let t = targets.index_axis(Axis(1), bi);
        let mut sq = T::zero();
        let mut gslice = gimg.index_axis_mut(Axis(1), bi);
        ndarray::Zip::from(&mut gslice).and(&x).and(&t).for_each(|g, &xv, &tv| {
            let d = xv - tv;
            sq += d * d;
            *g = T::lit(2.0) * d / npix * pw;
        });
        losses[bi] = (pw * sq / npix).as_f64();
    }
    let mut tap_grads: Vec<Option<ndarray::Array4<T>>> = Vec::new();
    let need_disc = cfg.feature_weight > 0.0;
    let disc_cache = if need_disc {
        let (out, dc) = base.discriminator.forward(&img, base.discriminator.num_taps(), false)?;
        let lcfg = LossConfig::default();
        let mut per_tap: Vec<ndarray::Array4<T>> = out.taps.iter().map(|t| ndarray::Array4::zeros(t.raw_dim())).collect();
        for bi in 0..b {
            let gv: Vec<_> = out.taps.iter().map(|t| t.index_axis(Axis(1), bi)).collect();
            let rv: Vec<_> = target_taps[bi].iter().map(|t| t.view()).collect();
            let (l, g) = perceptual_from_taps(&gv, &rv, &lcfg, grad)?;
            losses[bi] += (fw * l).as_f64();
            for (acc, gt) in per_tap.iter_mut().zip(g) {
                if let Some(gt) = gt {
                    acc.index_axis_mut(Axis(1), bi).assign(&gt.mapv(|v| v * fw));
                }
            }
        }
        tap_grads = per_tap.into_iter().map(Some).collect();
        Some(dc)
    } else {
        None
    };
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::Numeric(format!("inversion loss is not finite for target {i}")));
    }
    if !grad {
        return Ok(Evaluation { losses, grads: None });
    }
    if let Some(dc) = &disc_cache {
        let (_, gx) = base.discriminator.backward(dc, &tap_grads, None, false);
        gimg += &gx;
    }
    let (_, gstyles) = base.generator.backward(&gcache, &gimg, false);
    let grads = match (cfg.target_space, style_cache) {
        (InversionSpace::WPlus, Some(sc)) => base.styler.backward(&sc, &gstyles, false).1,
        _ => gstyles,
    };
    Ok(Evaluation {
        losses,
        grads: Some(grads),
    })
}

fn invert_chunk<T: Real>(
    base: &BaseModel<T>,
    targets: &[Image<T>],
    cfg: &InversionConfig,
    seed: u64,
    offset: usize,
) -> Result<Vec<Inversion<T>>> {
    let dims = base.image_dims();
    for t in targets {
        t.ensure_dims(dims)?;
    }
    let batch = batch_from_images(targets)?;
    let target_taps: Vec<Vec<Array3<T>>> = if cfg.feature_weight > 0.0 {
        targets
            .iter()
            .map(|t| base.discriminator.features(t))
            .collect::<Result<_>>()?
    } else {
        vec![Vec::new(); targets.len()]
    };
    let b = targets.len();
    let mut vars = init_variables(base, cfg, seed, b, offset)?;
    let n_params: usize = vars.iter().map(|v| v.len()).sum();
    let mut opt = Adam::new(AdamConfig::default(), n_params);
    let column = |vars: &[Array2<T>], j: usize| -> Vec<Array1<T>> {
        vars.iter().map(|v| v.column(j).to_owned()).collect()
    };
    let mut best: Vec<(f64, usize, Vec<Array1<T>>)> = Vec::new();
    let mut initial = Vec::new();
    for step in 0..=cfg.steps {
        let grad = step < cfg.steps;
        let ev = evaluate(base, cfg, &vars, &batch, &target_taps, grad).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
            other => other,
        })?;
        if step == 0 {
            initial = ev.losses.clone();
            best = (0..b).map(|j| (ev.losses[j], 0, column(&vars, j))).collect();
        } else {
            for j in 0..b {
                if ev.losses[j] < best[j].0 {
                    best[j] = (ev.losses[j], step, column(&vars, j));
                }
            }
        }
        let Some(grads) = ev.grads else { break };
        let mut flat: Vec<T> = vars.iter().flat_map(|v| v.iter().copied()).collect();
        let gflat: Vec<T> = grads.iter().flat_map(|g| g.iter().copied()).collect();
        opt.step_slice(&mut flat, &gflat, cfg.lr_at(step));
        let mut off = 0;
        for v in vars.iter_mut() {
            let n = v.len();
            v.as_slice_mut().expect("contiguous").copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
    best.into_iter()
        .zip(initial)
        .map(|((loss, step, rows), init)| {
            let (code, wplus) = match cfg.target_space {
                InversionSpace::WPlus => {
                    let w = WCode::new(rows)?;
                    (base.styler.to_style(&w)?, Some(w))
                }
                InversionSpace::Style => (SCode::new(base.generator.schedule().clone(), rows)?, None),
            };
            Ok(Inversion {
                code,
                wplus,
                initial_loss: init,
                final_loss: loss,
                best_step: step,
            })
        })
        .collect()
}

/// Inverts one image against the base generator.
pub fn invert<T: Real>(base: &BaseModel<T>, target: &Image<T>, cfg: &InversionConfig, seed: u64) -> Result<Inversion<T>> {
    cfg.validate()?;
    Ok(invert_chunk(base, std::slice::from_ref(target), cfg, seed, 0)?.remove(0))
}

/// Inverts many images in batches of `cfg.batch`; batches run through `exec`.
pub fn invert_many<T: Real>(
    base: &BaseModel<T>,
    targets: &[Image<T>],
    cfg: &InversionConfig,
    seed: u64,
    exec: Exec,
) -> Result<Vec<Inversion<T>>> {
    cfg.validate()?;
    let chunks: Vec<(usize, &[Image<T>])> = targets
        .chunks(cfg.batch)
        .enumerate()
        .map(|(i, c)| (i * cfg.batch, c))
        .collect();
    let results = exec.try_map(&chunks, |(off, c)| invert_chunk(base, c, cfg, seed, *off))?;
    Ok(results.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BaseConfig;

    fn micro() -> BaseModel<f64> {
        BaseModel::init(&BaseConfig::micro(), 5).unwrap()
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let base = micro();
        let target = base.generator.synthesize(&sample_code(&base.mapping, &base.styler, 1).unwrap()).unwrap();
        let cfg = InversionConfig {
            steps: 0,
            mean_samples: 16,
            ..Default::default()
        };
        let inv = invert(&base, &target, &cfg, 0).unwrap();
        let init = base
            .styler
            .to_style(&WCode::broadcast(mean_w(&base.mapping, 16, 0).unwrap(), 3))
            .unwrap();
        assert_eq!(inv.code, init);
        assert_eq!(inv.best_step, 0);
    }

    #[test]
    fn loss_never_worse_than_start_and_deterministic() {
        let base = micro();
        let target = base.generator.synthesize(&sample_code(&base.mapping, &base.styler, 3).unwrap()).unwrap();
        for space in [InversionSpace::WPlus, InversionSpace::Style] {
            let cfg = InversionConfig {
                steps: 40,
                mean_samples: 16,
                target_space: space,
                init: InversionInit::SeededRandom,
                ..Default::default()
            };
            let a = invert(&base, &target, &cfg, 9).unwrap();
            let b = invert(&base, &target, &cfg, 9).unwrap();
            assert_eq!(a, b);
            assert!(a.final_loss <= a.initial_loss);
            assert_eq!(a.code.schedule(), base.generator.schedule());
            assert_eq!(a.wplus.is_some(), space == InversionSpace::WPlus);
        }
    }

    #[test]
    fn mean_code_basics() {
        let base = micro();
        let one = mean_code(&base.mapping, &base.styler, 1, 4).unwrap();
        let z = noise_batch::<f64>(base.mapping.z_dim(), 1, 4).column(0).to_owned();
        let direct = base.styler.to_style(&base.mapping.map_noise(&z).unwrap()).unwrap();
        assert!(one.distance(&direct) < 1e-12);
        assert!(mean_code(&base.mapping, &base.styler, 0, 4).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let base = micro();
        let bad = Image::<f64>::zeros(3, 16, 16);
        assert!(matches!(invert(&base, &bad, &InversionConfig::default(), 0), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = InversionConfig::default();
        c.step_size = 0.0;
        assert!(c.validate().is_err());
        let mut c = InversionConfig::default();
        c.pixel_weight = 0.0;
        c.feature_weight = 0.0;
        assert!(c.validate().is_err());
    }
}
