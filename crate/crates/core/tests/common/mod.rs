#![allow(dead_code)]

use multistyle::inversion::sample_code;
use multistyle::model::{BaseConfig, BaseModel};
use multistyle::nets::ParamTree;
use multistyle::rng;
use multistyle::stn::{StnBank, StnInit};
use multistyle::trainer::{Gradients, Objective};
use multistyle::losses::LossConfig;
use multistyle::{Image, SCode};

/// Small enough that L1 and leaky-ReLU kinks are rarely straddled.
pub const FD_STEP: f64 = 1e-6;

/// Worst relative error between an analytic gradient and central differences
/// over the probed coordinates, plus the number of coordinates probed.
pub struct FdCheck {
    pub worst: f64,
    pub vector: f64,
    pub probed: usize,
}

/// Central differences of `f` at `x` for coordinates `idx`, compared with
/// `grad`. A coordinate's error is `|a - n| / max(|a|, |n|)`; coordinates
/// where both are below `floor` are compared absolutely against `floor`.
pub fn fd_check(x: &[f64], grad: &[f64], idx: &[usize], h: f64, floor: f64, mut f: impl FnMut(&[f64]) -> f64) -> FdCheck {
    let mut p = x.to_vec();
    let mut worst = 0.0f64;
    let (mut diff2, mut norm2) = (0.0, 0.0);
    for &i in idx {
        let x0 = p[i];
        p[i] = x0 + h;
        let up = f(&p);
        p[i] = x0 - h;
        let down = f(&p);
        p[i] = x0;
        let n = (up - down) / (2.0 * h);
        let a = grad[i];
        let scale = a.abs().max(n.abs());
        let err = if scale < floor { (a - n).abs() / floor } else { (a - n).abs() / scale };
        worst = worst.max(err);
        diff2 += (a - n) * (a - n);
        norm2 += a * a + n * n;
    }
    FdCheck {
        worst,
        vector: diff2.sqrt() / norm2.sqrt().max(1e-300),
        probed: idx.len(),
    }
}

/// `count` seeded coordinates out of `n`, always including the largest
/// entries of `grad`.
pub fn probe_indices(grad: &[f64], count: usize, seed: u64) -> Vec<usize> {
    use rand::Rng;
    let mut order: Vec<usize> = (0..grad.len()).collect();
    order.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
    let mut idx: Vec<usize> = order.into_iter().take(count / 2).collect();
    let mut r = rng::stream(seed, &[]);
    while idx.len() < count.min(grad.len()) {
        let i = r.gen_range(0..grad.len());
        if !idx.contains(&i) {
            idx.push(i);
        }
    }
    idx
}

/// A micro-scale training problem in f64: a random base, two references
/// rendered from perturbed generators, random reference codes and a
/// random-init STN bank.
pub struct MicroProblem {
    pub base: BaseModel<f64>,
    pub taps: Vec<Vec<ndarray::Array3<f64>>>,
    pub codes: Vec<SCode<f64>>,
    pub bank: StnBank<f64>,
    pub loss: LossConfig,
}

pub fn micro_problem(seed: u64) -> MicroProblem {
    let base = BaseModel::<f64>::init(&BaseConfig::micro(), seed).unwrap();
    let references: Vec<Image<f64>> = (0..2u64)
        .map(|k| {
            let code = sample_code(&base.mapping, &base.styler, rng::derive(seed, &[10, k])).unwrap();
            let img = base.generator.synthesize(&code).unwrap();
            Image::new(img.data().mapv(|v| 0.8 * v + if k == 0 { 0.1 } else { -0.15 })).unwrap()
        })
        .collect();
    let taps = references.iter().map(|i| base.discriminator.features(i).unwrap()).collect();
    let codes = (0..2u64)
        .map(|k| sample_code(&base.mapping, &base.styler, rng::derive(seed, &[11, k])).unwrap())
        .collect();
    let schedule = base.generator.schedule().clone();
    let mut bank = StnBank::new(vec!["a".into(), "b".into()], &schedule, StnInit::Random, seed).unwrap();
    // keep the random bank near identity so activations stay in range
    for stn in bank.stns_mut() {
        stn.visit_mut(&mut |_, v| {
            let w = (v.len() as f64).sqrt() as usize;
            for (i, x) in v.iter_mut().enumerate() {
                *x = 0.25 * *x + if i % (w + 1) == 0 { 1.0 } else { 0.0 };
            }
        });
    }
    MicroProblem {
        base,
        taps,
        codes,
        bank,
        loss: LossConfig::default(),
    }
}

impl MicroProblem {
    pub fn objective(&self) -> Objective<'_, f64> {
        Objective {
            base: &self.base,
            reference_taps: &self.taps,
            loss: &self.loss,
            micro_batch: 2,
            exec: multistyle::Exec::Sequential,
        }
    }

    pub fn loss_and_grads(&self) -> (f64, Gradients<f64>) {
        let (t, _, g) = self
            .objective()
            .evaluate(&self.base.generator, &self.bank, &self.codes, true)
            .unwrap();
        (t.total, g.unwrap())
    }

    /// Gradient check over the STN bank and the synthesis weights.
    pub fn check(&self, probes: usize) -> (FdCheck, FdCheck) {
        let (_, grads) = self.loss_and_grads();
        let obj = self.objective();

        let bank_flat: Vec<f64> = self.bank.stns().iter().flat_map(|s| s.flat_values()).collect();
        let bank_grad: Vec<f64> = grads.stns.iter().flat_map(|s| s.flat_values()).collect();
        let per = self.bank.stns()[0].num_params();
        let idx = probe_indices(&bank_grad, probes, 1);
        let stn = fd_check(&bank_flat, &bank_grad, &idx, FD_STEP, 1e-7, |p| {
            let mut bank = self.bank.clone();
            for (k, s) in bank.stns_mut().iter_mut().enumerate() {
                s.set_flat_values(&p[k * per..(k + 1) * per]);
            }
            obj.evaluate(&self.base.generator, &bank, &self.codes, false).unwrap().0.total
        });

        let gen_flat = self.base.generator.flat_values();
        let gen_grad = grads.generator.flat_values();
        let idx = probe_indices(&gen_grad, probes, 2);
        let mut g = self.base.generator.clone();
        let theta = fd_check(&gen_flat, &gen_grad, &idx, FD_STEP, 1e-7, |p| {
            g.set_flat_values(p);
            obj.evaluate(&g, &self.bank, &self.codes, false).unwrap().0.total
        });
        (stn, theta)
    }
}
