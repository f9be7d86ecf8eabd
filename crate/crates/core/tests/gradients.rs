//! Reverse-mode gradients against central finite differences in f64.

mod common;

use common::{fd_check, micro_problem, probe_indices};
use ndarray::{Array2, Array4};
use multistyle::model::{BaseConfig, BaseModel};
use multistyle::rng;
use multistyle::nets::codes_to_batch;
use multistyle::ParamTree;

const TOL: f64 = 1e-3;

fn weights4(dim: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let n = dim.0 * dim.1 * dim.2 * dim.3;
    rng::gaussian::<f64, _>(&mut rng::stream(seed, &[]), n)
        .into_shape_with_order(dim)
        .unwrap()
}

fn dot4(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn objective_gradients_match_finite_differences() {
    for seed in [3, 4] {
        let p = micro_problem(seed);
        let (stn, theta) = p.check(60);
        assert!(stn.worst < TOL, "seed {seed}: STN rel err {}", stn.worst);
        assert!(theta.worst < TOL, "seed {seed}: generator rel err {}", theta.worst);
    }
}

#[test]
fn objective_gradients_without_contextual_term() {
    let mut p = micro_problem(5);
    p.loss.contextual_weight = 0.0;
    let (stn, theta) = p.check(40);
    assert!(stn.worst < TOL && theta.worst < TOL, "{} {}", stn.worst, theta.worst);
}

#[test]
fn generator_backward_matches_finite_differences() {
    let base = BaseModel::<f64>::init(&BaseConfig::micro(), 9).unwrap();
    let codes: Vec<_> = (0..3)
        .map(|k| multistyle::inversion::sample_code(&base.mapping, &base.styler, k).unwrap())
        .collect();
    let styles = codes_to_batch(&codes).unwrap();
    let g = &base.generator;
    let (img, cache) = g.forward(&styles).unwrap();
    let probe = weights4(img.dim(), 1);
    let (pg, sg) = g.backward(&cache, &probe, true);
    let pg = pg.unwrap().flat_values();

    let x = g.flat_values();
    let mut gg = g.clone();
    let r = fd_check(&x, &pg, &probe_indices(&pg, 60, 3), 1e-5, 1e-7, |p| {
        gg.set_flat_values(p);
        dot4(&gg.forward(&styles).unwrap().0, &probe)
    });
    assert!(r.worst < TOL, "params {}", r.worst);

    let flat: Vec<f64> = styles.iter().flat_map(|s| s.iter().copied()).collect();
    let sgrad: Vec<f64> = sg.iter().flat_map(|s| s.iter().copied()).collect();
    let shapes: Vec<_> = styles.iter().map(Array2::dim).collect();
    let r = fd_check(&flat, &sgrad, &probe_indices(&sgrad, 40, 4), 1e-5, 1e-7, |p| {
        let mut off = 0;
        let s: Vec<Array2<f64>> = shapes
            .iter()
            .map(|&d| {
                let a = Array2::from_shape_vec(d, p[off..off + d.0 * d.1].to_vec()).unwrap();
                off += d.0 * d.1;
                a
            })
            .collect();
        dot4(&g.forward(&s).unwrap().0, &probe)
    });
    assert!(r.worst < TOL, "styles {}", r.worst);
}

#[test]
fn discriminator_backward_matches_finite_differences() {
    let base = BaseModel::<f64>::init(&BaseConfig::micro(), 10).unwrap();
    let d = &base.discriminator;
    let (c, h, w) = d.input_dims();
    let x = weights4((c, 2, h, w), 5).mapv(|v| 0.5 * v.tanh());
    let taps = d.num_taps();
    let (out, cache) = d.forward(&x, taps, true).unwrap();
    let tap_probe: Vec<Array4<f64>> = out.taps.iter().enumerate().map(|(i, t)| weights4(t.dim(), 20 + i as u64)).collect();
    let logit_probe = ndarray::arr1(&[0.7, -1.3]);
    let value = |o: &multistyle::nets::DiscOutput<f64>| {
        o.taps.iter().zip(&tap_probe).map(|(t, p)| dot4(t, p)).sum::<f64>()
            + o.logits.as_ref().unwrap().dot(&logit_probe)
    };
    let tg: Vec<Option<Array4<f64>>> = tap_probe.iter().cloned().map(Some).collect();
    let (pg, xg) = d.backward(&cache, &tg, Some(&logit_probe), true);
    let pg = pg.unwrap().flat_values();

    let mut dd = d.clone();
    let r = fd_check(&d.flat_values(), &pg, &probe_indices(&pg, 60, 6), 1e-5, 1e-7, |p| {
        dd.set_flat_values(p);
        value(&dd.forward(&x, taps, true).unwrap().0)
    });
    assert!(r.worst < TOL, "params {}", r.worst);

    let xf: Vec<f64> = x.iter().copied().collect();
    let xgf: Vec<f64> = xg.iter().copied().collect();
    let r = fd_check(&xf, &xgf, &probe_indices(&xgf, 60, 7), 1e-5, 1e-7, |p| {
        let xi = Array4::from_shape_vec(x.dim(), p.to_vec()).unwrap();
        value(&d.forward(&xi, taps, true).unwrap().0)
    });
    assert!(r.worst < TOL, "input {}", r.worst);
}

#[test]
fn mapping_and_style_backward_match_finite_differences() {
    let base = BaseModel::<f64>::init(&BaseConfig::micro(), 11).unwrap();
    let m = &base.mapping;
    let z = Array2::from_shape_vec((m.z_dim(), 3), rng::gaussian::<f64, _>(&mut rng::stream(1, &[]), m.z_dim() * 3).to_vec())
        .unwrap();
    let (wout, cache) = m.forward_batch(&z).unwrap();
    let probe = Array2::from_shape_vec(wout.dim(), rng::gaussian::<f64, _>(&mut rng::stream(2, &[]), wout.len()).to_vec())
        .unwrap();
    let g = m.backward(&cache, &probe).flat_values();
    let mut mm = m.clone();
    let r = fd_check(&m.flat_values(), &g, &probe_indices(&g, 60, 8), 1e-5, 1e-7, |p| {
        mm.set_flat_values(p);
        (&mm.forward_batch(&z).unwrap().0 * &probe).sum()
    });
    assert!(r.worst < TOL, "mapping {}", r.worst);

    let s = &base.styler;
    let ws: Vec<Array2<f64>> = (0..base.generator.schedule().len()).map(|_| wout.clone()).collect();
    let (sout, scache) = s.forward_batch(&ws).unwrap();
    let probes: Vec<Array2<f64>> = sout
        .iter()
        .enumerate()
        .map(|(i, o)| {
            Array2::from_shape_vec(o.dim(), rng::gaussian::<f64, _>(&mut rng::stream(30 + i as u64, &[]), o.len()).to_vec())
                .unwrap()
        })
        .collect();
    let (sg, _) = s.backward(&scache, &probes, true);
    let sg = sg.unwrap().flat_values();
    let mut ss = s.clone();
    let r = fd_check(&s.flat_values(), &sg, &probe_indices(&sg, 60, 9), 1e-5, 1e-7, |p| {
        ss.set_flat_values(p);
        let out = ss.forward_batch(&ws).unwrap().0;
        out.iter().zip(&probes).map(|(a, b)| (a * b).sum()).sum()
    });
    assert!(r.worst < TOL, "styler {}", r.worst);
}
