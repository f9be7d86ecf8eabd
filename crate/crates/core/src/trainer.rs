//! Multi-style fine-tuning: invert the references, mix their codes with
//! random styles, pass them through per-style STNs and fine-tune the
//! synthesis network and the STN bank jointly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::error::{arg_err, Error, Result};
use crate::inversion::{invert_many, InversionConfig};
use crate::latent::{default_mask, make_tail_mask, style_mix, SCode, StyleMixMask};
use crate::losses::{l1_mean, style_loss_from_taps, LossConfig, LossTerms};
use crate::model::{BaseModel, MultiStyleModel, Provenance};
use crate::nets::{codes_to_batch, Generator, Image, ParamTree};
use crate::optim::{Adam, AdamConfig};
use crate::par::Exec;
use crate::real::Real;
use crate::rng;
use crate::stn::{Stn, StnBank, StnInit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub generator_lr: f64,
    /// At the toy widths (<= 64) STNs need a far larger rate than the 1e-5
    /// used with 512-wide codes to leave the identity within 500 steps.
    pub stn_lr: f64,
    pub adam: AdamConfig,
    /// First row taken from the reference during mixing; `None` uses
    /// `ceil(0.45 * rows)`.
    pub mask_start_row: Option<usize>,
    pub stn_init: StnInit,
    pub loss: LossConfig,
    pub inversion: InversionConfig,
    pub seed: u64,
    /// Steps between snapshots when an output directory is given; 0 disables.
    pub snapshot_every: usize,
    /// Styles per forward/backward pass inside a step.
    pub micro_batch: usize,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            generator_lr: 2e-3,
            stn_lr: 1e-2,
            adam: AdamConfig::default(),
            mask_start_row: None,
            stn_init: StnInit::Identity,
            loss: LossConfig::default(),
            inversion: InversionConfig::default(),
            seed: 0,
            snapshot_every: 100,
            micro_batch: 4,
            exec: Exec::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, taps: usize) -> Result<()> {
        for (name, lr) in [("generator_lr", self.generator_lr), ("stn_lr", self.stn_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number")));
            }
        }
        if self.micro_batch == 0 {
            return Err(Error::Config("micro_batch must be >= 1".into()));
        }
        self.loss.validate(taps)?;
        self.inversion.validate()
    }

    pub fn mask(&self, rows: usize, schedule: &crate::latent::RowSchedule) -> Result<StyleMixMask> {
        debug_assert_eq!(rows, schedule.len());
        match self.mask_start_row {
            Some(start) => make_tail_mask(schedule, start),
            None => Ok(default_mask(schedule)),
        }
    }

    /// SHA-256 of the canonical JSON encoding. Execution mode is excluded
    /// because it does not change results.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.exec = Exec::Sequential;
        let bytes = serde_json::to_vec(&canon).expect("config serializes");
        hex_digest(&bytes)
    }
}

/// Lowercase hex SHA-256.
pub fn hex_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Per-step record written to the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepRecord {
    pub step: usize,
    pub elapsed_s: f64,
    pub terms: LossTerms,
}

/// Gradients of the objective for one set of mixed codes.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    pub generator: Generator<T>,
    pub stns: Vec<Stn<T>>,
}

/// Frozen pieces the objective needs besides the trainable parameters.
pub struct Objective<'a, T: Real> {
    pub base: &'a BaseModel<T>,
    /// Discriminator taps of every reference image.
    pub reference_taps: &'a [Vec<Array3<T>>],
    pub loss: &'a LossConfig,
    pub micro_batch: usize,
    pub exec: Exec,
}

impl<T: Real> Objective<'_, T> {
    /// Total loss over styles for mixed codes `codes[k]` (one per style) and,
    /// when requested, its gradients. Micro-batches are reduced in style
    /// order, so results do not depend on the execution mode.
    pub fn evaluate(
        &self,
        generator: &Generator<T>,
        bank: &StnBank<T>,
        codes: &[SCode<T>],
        grad: bool,
    ) -> Result<(LossTerms, Vec<LossTerms>, Option<Gradients<T>>)> {
        if codes.len() != bank.len() || codes.len() != self.reference_taps.len() {
            return Err(arg_err!(
                "{} codes for {} styles and {} references",
                codes.len(),
                bank.len(),
                self.reference_taps.len()
            ));
        }
        let starts: Vec<usize> = (0..codes.len()).step_by(self.micro_batch).collect();
        let mut total = LossTerms::default();
        let mut per_style = Vec::with_capacity(codes.len());
        let mut acc: Option<Gradients<T>> = grad.then(|| Gradients {
            generator: generator.zeroed(),
            stns: bank.stns().iter().map(|s| s.zeroed()).collect(),
        });
        for wave in starts.chunks(self.exec.workers()) {
            let parts = self.exec.try_map(wave, |&start| {
                let end = (start + self.micro_batch).min(codes.len());
                self.chunk(generator, bank, codes, start..end, grad)
            })?;
            for (start, (terms, g_gen, g_stn)) in wave.iter().zip(parts) {
                for t in terms {
                    total += t;
                    per_style.push(t);
                }
                if let Some(acc) = acc.as_mut() {
                    acc.generator.accumulate(&g_gen.expect("gradients requested"));
                    for (j, g) in g_stn.into_iter().enumerate() {
                        acc.stns[start + j].accumulate(&g);
                    }
                }
            }
        }
        Ok((total, per_style, acc))
    }

    #[allow(clippy::type_complexity)]
    fn chunk(
        &self,
        generator: &Generator<T>,
        bank: &StnBank<T>,
        codes: &[SCode<T>],
        range: std::ops::Range<usize>,
        grad: bool,
    ) -> Result<(Vec<LossTerms>, Option<Generator<T>>, Vec<Stn<T>>)> {
        let mixed = &codes[range.clone()];
        let transformed = range
            .clone()
            .map(|k| bank.stns()[k].apply(&codes[k]))
            .collect::<Result<Vec<_>>>()?;
        let styles = codes_to_batch(&transformed)?;
        let (img, gcache) = generator.forward(&styles)?;
        let d = &self.base.discriminator;
        let (out, dcache) = d.forward(&img, d.num_taps(), false)?;

        let identity_taps = if self.loss.identity_weight > 0.0 {
            let (base_img, _) = self.base.generator.forward(&codes_to_batch(mixed)?)?;
            let (bout, _) = d.forward(&base_img, d.num_taps(), false)?;
            bout.taps.last().cloned()
        } else {
            None
        };

        let mut tap_grads: Vec<Array4<T>> = out.taps.iter().map(|t| Array4::zeros(t.raw_dim())).collect();
        let mut terms = Vec::with_capacity(range.len());
        for (b, k) in range.clone().enumerate() {
            let gv: Vec<_> = out.taps.iter().map(|t| t.index_axis(Axis(1), b)).collect();
            let rv: Vec<_> = self.reference_taps[k].iter().map(|t| t.view()).collect();
            let (mut t, g) = style_loss_from_taps(&gv, &rv, self.loss, grad)?;
            for (dst, g) in tap_grads.iter_mut().zip(g) {
                if let Some(g) = g {
                    dst.index_axis_mut(Axis(1), b).assign(&g);
                }
            }
            if let Some(id) = &identity_taps {
                let last = gv.len() - 1;
                let (l, g) = l1_mean(gv[last].view(), id.index_axis(Axis(1), b), grad);
                t.identity = l.as_f64();
                t.total += self.loss.identity_weight * t.identity;
                if let Some(g) = g {
                    let w = T::lit(self.loss.identity_weight);
                    tap_grads[last].index_axis_mut(Axis(1), b).scaled_add(w, &g);
                }
            }
            if !t.total.is_finite() {
                return Err(Error::Numeric(format!("loss for style {k} is not finite")));
            }
            terms.push(t);
        }
        if !grad {
            return Ok((terms, None, Vec::new()));
        }
        let tg: Vec<Option<Array4<T>>> = tap_grads.into_iter().map(Some).collect();
        let (_, gimg) = d.backward(&dcache, &tg, None, false);
        let (g_gen, g_styles) = generator.backward(&gcache, &gimg, true);
        let inputs = codes_to_batch(mixed)?;
        let g_stn = range
            .enumerate()
            .map(|(b, k)| {
                let stn = &bank.stns()[k];
                let mut g = stn.zeroed();
                let col = |m: &Array2<T>| m.slice(ndarray::s![.., b..b + 1]).to_owned();
                let x: Vec<Array2<T>> = inputs.iter().map(col).collect();
                let gy: Vec<Array2<T>> = g_styles.iter().map(col).collect();
                stn.backward_batch(&x, &gy, Some(&mut g));
                g
            })
            .collect();
        Ok((terms, g_gen, g_stn))
    }
}

/// Everything that evolves during fine-tuning, plus the frozen context.
#[derive(Debug, Clone)]
pub struct TrainingState<T: Real = f32> {
    pub config: TrainConfig,
    pub base: BaseModel<T>,
    pub base_hash: String,
    pub names: Vec<String>,
    pub references: Vec<Image<T>>,
    pub reference_codes: Vec<SCode<T>>,
    pub reference_taps: Vec<Vec<Array3<T>>>,
    pub mask: StyleMixMask,
    pub generator: Generator<T>,
    pub bank: StnBank<T>,
    pub generator_opt: Adam<T>,
    pub stn_opt: Adam<T>,
    pub step: usize,
}

/// Inverts every reference and sets up an identity-initialized bank.
pub fn prepare<T: Real>(
    base: &BaseModel<T>,
    references: &[(String, Image<T>)],
    cfg: &TrainConfig,
) -> Result<TrainingState<T>> {
    let codes = {
        let images: Vec<Image<T>> = references.iter().map(|(_, i)| i.clone()).collect();
        cfg.validate(base.discriminator.num_taps())?;
        invert_many(base, &images, &cfg.inversion, rng::derive(cfg.seed, &[1]), cfg.exec)?
            .into_iter()
            .map(|inv| inv.code)
            .collect()
    };
    prepare_with_codes(base, references, codes, cfg)
}

/// As [`prepare`] with the reference codes supplied by the caller.
pub fn prepare_with_codes<T: Real>(
    base: &BaseModel<T>,
    references: &[(String, Image<T>)],
    reference_codes: Vec<SCode<T>>,
    cfg: &TrainConfig,
) -> Result<TrainingState<T>> {
    cfg.validate(base.discriminator.num_taps())?;
    if references.is_empty() {
        return Err(arg_err!("at least one reference image is required"));
    }
    if reference_codes.len() != references.len() {
        return Err(arg_err!("{} codes for {} references", reference_codes.len(), references.len()));
    }
    let schedule = base.generator.schedule().clone();
    for c in &reference_codes {
        c.ensure_schedule(&schedule)?;
    }
    let names: Vec<String> = references.iter().map(|(n, _)| n.clone()).collect();
    let bank = StnBank::new(names.clone(), &schedule, cfg.stn_init, rng::derive(cfg.seed, &[2]))?;
    let images: Vec<Image<T>> = references.iter().map(|(_, i)| i.clone()).collect();
    let reference_taps = images
        .iter()
        .map(|i| base.discriminator.features(i))
        .collect::<Result<Vec<_>>>()?;
    let generator = base.generator.clone();
    let n_stn: usize = bank.stns().iter().map(|s| s.num_params()).sum();
    Ok(TrainingState {
        mask: cfg.mask(schedule.len(), &schedule)?,
        generator_opt: Adam::new(cfg.adam, generator.num_params()),
        stn_opt: Adam::new(cfg.adam, n_stn),
        config: cfg.clone(),
        base: base.clone(),
        base_hash: checkpoint::base_hash(base)?,
        names,
        references: images,
        reference_codes,
        reference_taps,
        generator,
        bank,
        step: 0,
    })
}

impl<T: Real> TrainingState<T> {
    pub fn objective(&self) -> Objective<'_, T> {
        Objective {
            base: &self.base,
            reference_taps: &self.reference_taps,
            loss: &self.config.loss,
            micro_batch: self.config.micro_batch,
            exec: self.config.exec,
        }
    }

    /// The mixed codes `r_k` drawn for a given step, one per style.
    pub fn mixed_codes(&self, step: usize) -> Result<Vec<SCode<T>>> {
        let base = &self.base;
        self.reference_codes
            .iter()
            .enumerate()
            .map(|(k, s_ref)| {
                let mut r = rng::stream(self.config.seed, &[3, step as u64, k as u64]);
                let z = rng::gaussian(&mut r, base.mapping.z_dim());
                style_mix(s_ref, &z, &self.mask, &base.mapping, &base.styler)
            })
            .collect()
    }

    /// One optimizer step on all styles. The returned losses are those of the
    /// parameters before the update.
    pub fn train_step(&mut self) -> Result<LossTerms> {
        if self.step >= self.config.iterations {
            return Err(arg_err!("training already ran {} iterations", self.step));
        }
        let codes = self.mixed_codes(self.step)?;
        let (terms, _, grads) = self
            .objective()
            .evaluate(&self.generator, &self.bank, &codes, true)
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("step {}: {m}", self.step)),
                other => other,
            })?;
        let grads = grads.expect("gradients requested");
        if !grads.generator.all_finite() || !grads.stns.iter().all(|s| s.all_finite()) {
            return Err(Error::Numeric(format!("step {}: non-finite gradient", self.step)));
        }
        if self.config.generator_lr > 0.0 {
            self.generator_opt
                .step(&mut self.generator, &grads.generator, self.config.generator_lr);
        }
        if self.config.stn_lr > 0.0 {
            let mut p: Vec<T> = self.bank.stns().iter().flat_map(|s| s.flat_values()).collect();
            let g: Vec<T> = grads.stns.iter().flat_map(|s| s.flat_values()).collect();
            self.stn_opt.step_slice(&mut p, &g, self.config.stn_lr);
            let mut off = 0;
            for s in self.bank.stns_mut() {
                let n = s.num_params();
                s.set_flat_values(&p[off..off + n]);
                off += n;
            }
        }
        self.step += 1;
        Ok(terms)
    }

    pub fn model(&self) -> MultiStyleModel<T> {
        MultiStyleModel {
            base: self.base.clone(),
            generator: self.generator.clone(),
            bank: self.bank.clone(),
            provenance: Provenance {
                config_hash: self.config.hash(),
                base_hash: self.base_hash.clone(),
                seed: self.config.seed,
                iterations: self.step,
                config: serde_json::to_string(&self.config).expect("config serializes"),
            },
        }
    }

    /// SHA-256 over the trainable parameters, codes and step counter.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |v: &[T]| {
            for x in v {
                h.update(x.as_f64().to_le_bytes());
            }
        };
        feed(&self.generator.flat_values());
        for s in self.bank.stns() {
            feed(&s.flat_values());
        }
        for c in &self.reference_codes {
            feed(&c.flatten());
        }
        h.update((self.step as u64).to_le_bytes());
        hex::encode(h.finalize())
    }
}

/// Result of a complete fine-tuning run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: MultiStyleModel<f32>,
    pub log: Vec<StepRecord>,
    /// Seconds spent inverting references.
    pub prepare_s: f64,
    /// Seconds for the whole run, preparation included.
    pub total_s: f64,
}

pub const METRICS_FILE: &str = "metrics.tsv";

/// Runs preparation and `cfg.iterations` steps. When `out_dir` is given a
/// tab-separated metrics log, periodic snapshots and the final model are
/// written there; on divergence a diagnostic snapshot is saved before the
/// error is returned.
pub fn finetune(
    base: &BaseModel<f32>,
    references: &[(String, Image<f32>)],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    let t0 = Instant::now();
    let mut state = prepare(base, references, cfg)?;
    run(&mut state, t0, out_dir)
}

/// Continues a prepared state until its configured iteration count.
pub fn run(state: &mut TrainingState<f32>, t0: Instant, out_dir: Option<&Path>) -> Result<TrainOutput> {
    let prepare_s = t0.elapsed().as_secs_f64();
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(METRICS_FILE);
            let f = File::create(&p).map_err(|e| Error::io(&p, e))?;
            let mut w = BufWriter::new(f);
            writeln!(
                w,
                "# styles={} iterations={}\nstep\telapsed_s\ttotal\tperceptual\tcontextual\tidentity",
                state.names.len(),
                state.config.iterations
            )
            .map_err(|e| Error::io(&p, e))?;
            Some((p, w))
        }
        None => None,
    };
    let mut log = Vec::with_capacity(state.config.iterations);
    while state.step < state.config.iterations {
        let step = state.step;
        let terms = match state.train_step() {
            Ok(t) => t,
            Err(e @ Error::Numeric(_)) => {
                if let Some(dir) = out_dir {
                    let p = dir.join(format!("diverged-step{step}.msgan"));
                    checkpoint::save_model(&state.model(), &p)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let rec = StepRecord {
            step,
            elapsed_s: t0.elapsed().as_secs_f64(),
            terms,
        };
        if let Some((p, w)) = log_file.as_mut() {
            writeln!(
                w,
                "{}\t{:.4}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                rec.step, rec.elapsed_s, terms.total, terms.perceptual, terms.contextual, terms.identity
            )
            .map_err(|e| Error::io(p.as_path(), e))?;
        }
        log.push(rec);
        let every = state.config.snapshot_every;
        if let Some(dir) = out_dir {
            if every > 0 && state.step % every == 0 && state.step < state.config.iterations {
                checkpoint::save_model(&state.model(), snapshot_path(dir, state.step))?;
            }
        }
    }
    if let Some((p, mut w)) = log_file {
        w.flush().map_err(|e| Error::io(&p, e))?;
    }
    let model = state.model();
    if let Some(dir) = out_dir {
        checkpoint::save_model(&model, dir.join("model.msgan"))?;
    }
    Ok(TrainOutput {
        model,
        log,
        prepare_s,
        total_s: t0.elapsed().as_secs_f64(),
    })
}

pub fn snapshot_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("snapshot-{step:06}.msgan"))
}

/// Trailing moving average of total loss with the given window.
pub fn moving_average(log: &[StepRecord], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..log.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            let s: f64 = log[lo..=i].iter().map(|r| r.terms.total).sum();
            s / (i + 1 - lo) as f64
        })
        .collect()
}

/// Parses a metrics log written by [`finetune`].
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize| Error::Integrity {
        entry: format!("{}:{line}", path.display()),
        reason: "malformed metrics row".into(),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.starts_with('#') && !l.starts_with("step"))
        .map(|(i, l)| {
            let f: Vec<f64> = l
                .split('\t')
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(i + 1))?;
            if f.len() != 6 {
                return Err(bad(i + 1));
            }
            Ok(StepRecord {
                step: f[0] as usize,
                elapsed_s: f[1],
                terms: LossTerms {
                    total: f[2],
                    perceptual: f[3],
                    contextual: f[4],
                    identity: f[5],
                },
            })
        })
        .collect()
}
