//! Fine-tuning objective: discriminator perceptual loss, contextual loss and
//! their per-style sum.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::nets::{Discriminator, Image};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub contextual_weight: f64,
    pub contextual_bandwidth: f64,
    /// Discriminator tap whose features feed the contextual term.
    pub contextual_tap: usize,
    /// Per-tap weights of the perceptual term; empty means all ones.
    pub tap_weights: Vec<f64>,
    /// Weight of the optional identity term (off by default).
    pub identity_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            contextual_weight: 0.005,
            contextual_bandwidth: 0.5,
            contextual_tap: 1,
            tap_weights: Vec::new(),
            identity_weight: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, taps: usize) -> Result<()> {
        let finite = [self.contextual_weight, self.contextual_bandwidth, self.identity_weight]
            .iter()
            .chain(&self.tap_weights)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("loss weights must be finite".into()));
        }
        if self.contextual_weight < 0.0 || self.identity_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.contextual_bandwidth <= 0.0 {
            return Err(Error::Config("contextual bandwidth must be positive".into()));
        }
        if self.tap_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("tap weights must be non-negative".into()));
        }
        if !self.tap_weights.is_empty() && self.tap_weights.len() != taps {
            return Err(Error::Config(format!(
                "{} tap weights for {taps} discriminator taps",
                self.tap_weights.len()
            )));
        }
        if self.contextual_tap >= taps {
            return Err(Error::Config(format!("contextual tap {} out of range", self.contextual_tap)));
        }
        Ok(())
    }

    pub fn tap_weight(&self, i: usize) -> f64 {
        self.tap_weights.get(i).copied().unwrap_or(1.0)
    }
}

/// Per-term breakdown of one style's loss.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub perceptual: f64,
    pub contextual: f64,
    pub identity: f64,
    pub total: f64,
}

impl std::ops::AddAssign for LossTerms {
    fn add_assign(&mut self, o: Self) {
        self.perceptual += o.perceptual;
        self.contextual += o.contextual;
        self.identity += o.identity;
        self.total += o.total;
    }
}

/// Mean absolute difference and, when requested, its gradient w.r.t. `a`.
pub fn l1_mean<T: Real>(a: ArrayView3<'_, T>, b: ArrayView3<'_, T>, grad: bool) -> (T, Option<Array3<T>>) {
    let n = T::lit(a.len() as f64);
    let mut sum = T::zero();
    Zip::from(&a).and(&b).for_each(|&x, &y| sum += (x - y).abs());
    let g = grad.then(|| {
        Zip::from(&a).and(&b).map_collect(|&x, &y| {
            let d = x - y;
            if d > T::zero() {
                n.recip()
            } else if d < T::zero() {
                -n.recip()
            } else {
                T::zero()
            }
        })
    });
    (sum / n, g)
}

/// Weighted sum over taps of the mean absolute feature difference.
pub fn perceptual_from_taps<T: Real>(
    gen: &[ArrayView3<'_, T>],
    reference: &[ArrayView3<'_, T>],
    cfg: &LossConfig,
    grad: bool,
) -> Result<(T, Vec<Option<Array3<T>>>)> {
    if gen.len() != reference.len() {
        return Err(shape_err!("{} generated taps vs {} reference taps", gen.len(), reference.len()));
    }
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(gen.len());
    for (i, (g, r)) in gen.iter().zip(reference).enumerate() {
        if g.dim() != r.dim() {
            return Err(shape_err!("tap {i}: {:?} vs {:?}", g.dim(), r.dim()));
        }
        let w = T::lit(cfg.tap_weight(i));
        let (l, gr) = l1_mean(g.view(), r.view(), grad);
        total += w * l;
        grads.push(gr.map(|x| x.mapv(|v| v * w)));
    }
    Ok((total, grads))
}

pub fn disc_perceptual_loss<T: Real>(
    d: &Discriminator<T>,
    generated: &Image<T>,
    reference: &Image<T>,
    cfg: &LossConfig,
) -> Result<T> {
    let fg = d.features(generated)?;
    let fr = d.features(reference)?;
    let gv: Vec<_> = fg.iter().map(|t| t.view()).collect();
    let rv: Vec<_> = fr.iter().map(|t| t.view()).collect();
    Ok(perceptual_from_taps(&gv, &rv, cfg, false)?.0)
}

/// Single-tap L1 between the deepest discriminator features of two images.
pub fn identity_loss<T: Real>(d: &Discriminator<T>, generated: &Image<T>, input: &Image<T>) -> Result<T> {
    let tap = d.num_taps() - 1;
    let fg = d.features(generated)?;
    let fi = d.features(input)?;
    Ok(l1_mean(fg[tap].view(), fi[tap].view(), false).0)
}

/// `(C, H, W)` tap as `(C, H*W)` columns of feature vectors.
pub fn feature_columns<T: Real>(tap: ArrayView3<'_, T>) -> Array2<T> {
    let (c, h, w) = tap.dim();
    tap.as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h * w))
        .expect("contiguous")
}

const CX_REL_EPS: f64 = 1e-5;
const CX_NORM_EPS: f64 = 1e-12;

/// Contextual loss between feature sets given as columns.
///
/// Features are centered on the reference mean and L2-normalized; cosine
/// distances are normalized by each query's nearest distance, turned into
/// affinities with `exp((1 - d) / bandwidth)` and normalized over the
/// reference set. The loss is `-ln` of the mean over reference features of
/// the best affinity any generated feature achieves.
pub fn contextual_loss<T: Real>(gen: ArrayView2<'_, T>, reference: ArrayView2<'_, T>, bandwidth: f64) -> Result<T> {
    Ok(contextual_loss_grad(gen, reference, bandwidth, false)?.0)
}

pub fn contextual_loss_grad<T: Real>(
    gen: ArrayView2<'_, T>,
    reference: ArrayView2<'_, T>,
    bandwidth: f64,
    grad: bool,
) -> Result<(T, Option<Array2<T>>)> {
    if gen.ncols() == 0 || reference.ncols() == 0 {
        return Err(arg_err!("contextual loss needs non-empty feature sets"));
    }
    if gen.nrows() != reference.nrows() {
        return Err(shape_err!("feature widths {} vs {}", gen.nrows(), reference.nrows()));
    }
    let h = T::lit(bandwidth);
    let mu = reference.mean_axis(Axis(1)).expect("non-empty");
    let normalize = |m: ArrayView2<'_, T>| {
        let mut c = m.to_owned();
        for mut col in c.axis_iter_mut(Axis(1)) {
            col -= &mu;
        }
        let norms: Vec<T> = c
            .axis_iter(Axis(1))
            .map(|col| (col.mapv(|v| v * v).sum() + T::lit(CX_NORM_EPS)).sqrt())
            .collect();
        for (mut col, &n) in c.axis_iter_mut(Axis(1)).zip(&norms) {
            col.mapv_inplace(|v| v / n);
        }
        (c, norms)
    };
    let (xh, xnorm) = normalize(gen);
    let (yh, _) = normalize(reference);
    let (nx, ny) = (xh.ncols(), yh.ncols());
    // (nx, ny) cosine distances
    let dist = xh.t().dot(&yh).mapv(|c| T::one() - c);
    let mut argmin = vec![0usize; nx];
    let mut cx = Array2::<T>::zeros((nx, ny));
    let mut denom = vec![T::zero(); nx];
    for i in 0..nx {
        let row = dist.row(i);
        let (kmin, &dmin) = row
            .iter()
            .enumerate()
            .fold((0, &row[0]), |acc, (k, v)| if *v < *acc.1 { (k, v) } else { acc });
        argmin[i] = kmin;
        let m = dmin + T::lit(CX_REL_EPS);
        denom[i] = m;
        let logits: Vec<T> = row.iter().map(|&d| (T::one() - d / m) / h).collect();
        let top = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let ex: Vec<T> = logits.iter().map(|&a| (a - top).exp()).collect();
        let z: T = ex.iter().copied().fold(T::zero(), |a, b| a + b);
        for (k, e) in ex.into_iter().enumerate() {
            cx[[i, k]] = e / z;
        }
    }
    let mut best = vec![0usize; ny];
    let mut score = T::zero();
    for j in 0..ny {
        let col = cx.column(j);
        let (imax, &v) = col
            .iter()
            .enumerate()
            .fold((0, &col[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
        best[j] = imax;
        score += v;
    }
    let score = score / T::lit(ny as f64);
    let loss = -score.ln();
    if !grad {
        return Ok((loss, None));
    }

    // dL/dcx: only the per-column maxima participate.
    let g_score = -score.recip() / T::lit(ny as f64);
    let mut g_cx = Array2::<T>::zeros((nx, ny));
    for (j, &i) in best.iter().enumerate() {
        g_cx[[i, j]] += g_score;
    }
    // softmax over k, then d~ = d / m_i, a = (1 - d~) / h
    let mut g_dist = Array2::<T>::zeros((nx, ny));
    for i in 0..nx {
        let c = cx.row(i);
        let gc = g_cx.row(i);
        let dot = Zip::from(&c).and(&gc).fold(T::zero(), |acc, &a, &b| acc + a * b);
        let m = denom[i];
        let mut corr = T::zero();
        for k in 0..ny {
            let g_a = c[k] * (gc[k] - dot);
            let g_dt = -g_a / h;
            g_dist[[i, k]] += g_dt / m;
            corr += g_dt * dist[[i, k]];
        }
        g_dist[[i, argmin[i]]] -= corr / (m * m);
    }
    // dist = 1 - xh^T yh
    let g_xh = yh.dot(&g_dist.t()).mapv(|v| -v);
    let mut g_x = Array2::<T>::zeros(gen.raw_dim());
    for i in 0..nx {
        let xi = xh.column(i);
        let gi = g_xh.column(i);
        let proj = Zip::from(&xi).and(&gi).fold(T::zero(), |acc, &a, &b| acc + a * b);
        let n = xnorm[i];
        let mut out = g_x.column_mut(i);
        Zip::from(&mut out)
            .and(&gi)
            .and(&xi)
            .for_each(|o, &g, &x| *o = (g - x * proj) / n);
    }
    Ok((loss, Some(g_x)))
}

/// One style's loss from precomputed taps; returns per-term values and,
/// when requested, gradients for every generated tap.
pub fn style_loss_from_taps<T: Real>(
    gen: &[ArrayView3<'_, T>],
    reference: &[ArrayView3<'_, T>],
    cfg: &LossConfig,
    grad: bool,
) -> Result<(LossTerms, Vec<Option<Array3<T>>>)> {
    let (perc, mut grads) = perceptual_from_taps(gen, reference, cfg, grad)?;
    let mut terms = LossTerms {
        perceptual: perc.as_f64(),
        ..Default::default()
    };
    if cfg.contextual_weight > 0.0 {
        let t = cfg.contextual_tap;
        let fg = feature_columns(gen[t].view());
        let fr = feature_columns(reference[t].view());
        let (cl, cg) = contextual_loss_grad(fg.view(), fr.view(), cfg.contextual_bandwidth, grad)?;
        terms.contextual = cl.as_f64();
        if let Some(cg) = cg {
            let w = T::lit(cfg.contextual_weight);
            let cg = cg.into_shape_with_order(gen[t].raw_dim()).expect("sized").mapv(|v| v * w);
            grads[t] = Some(match grads[t].take() {
                Some(g) => g + cg,
                None => cg,
            });
        }
    }
    terms.total = terms.perceptual + cfg.contextual_weight * terms.contextual;
    Ok((terms, grads))
}

/// Sum over styles of `perceptual + contextual_weight * contextual`.
pub fn total_loss<T: Real>(
    d: &Discriminator<T>,
    outputs: &[Image<T>],
    references: &[Image<T>],
    cfg: &LossConfig,
) -> Result<f64> {
    if outputs.len() != references.len() {
        return Err(arg_err!("{} outputs for {} references", outputs.len(), references.len()));
    }
    let mut total = 0.0;
    for (o, r) in outputs.iter().zip(references) {
        let fo = d.features(o)?;
        let fr = d.features(r)?;
        let ov: Vec<_> = fo.iter().map(|t| t.view()).collect();
        let rv: Vec<_> = fr.iter().map(|t| t.view()).collect();
        total += style_loss_from_taps(&ov, &rv, cfg, false)?.0.total;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::DiscriminatorConfig;
    use ndarray::{array, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(seed: u64) -> Image<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Image::new(Array3::from_shape_fn((3, 8, 8), |_| r.gen_range(-1.0..1.0))).unwrap()
    }

    fn disc() -> Discriminator<f64> {
        Discriminator::new(&mut ChaCha8Rng::seed_from_u64(0), &DiscriminatorConfig::micro()).unwrap()
    }

    #[test]
    fn hand_sized_perceptual_probe() {
        let a = array![[[1.0, 2.0]]];
        let b = array![[[1.0, 4.0]]];
        let (l, _) = perceptual_from_taps(&[a.view()], &[b.view()], &LossConfig::default(), false).unwrap();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn perceptual_zero_and_symmetric() {
        let d = disc();
        let cfg = LossConfig::default();
        let (a, b) = (rand_img(1), rand_img(2));
        assert_eq!(disc_perceptual_loss(&d, &a, &a, &cfg).unwrap(), 0.0);
        let ab = disc_perceptual_loss(&d, &a, &b, &cfg).unwrap();
        let ba = disc_perceptual_loss(&d, &b, &a, &cfg).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, ba);
    }

    #[test]
    fn identity_matches_single_tap_perceptual() {
        let d = disc();
        let (a, b) = (rand_img(3), rand_img(4));
        let last = d.num_taps() - 1;
        let mut cfg = LossConfig::default();
        cfg.tap_weights = (0..d.num_taps()).map(|i| if i == last { 1.0 } else { 0.0 }).collect();
        let id = identity_loss(&d, &a, &b).unwrap();
        assert!((id - disc_perceptual_loss(&d, &a, &b, &cfg).unwrap()).abs() < 1e-15);
        assert_eq!(identity_loss(&d, &a, &a).unwrap(), 0.0);
        assert_eq!(id, identity_loss(&d, &b, &a).unwrap());
    }

    #[test]
    fn contextual_single_identical_pair_is_zero() {
        let x = array![[0.3], [-1.2], [2.0]];
        assert_eq!(contextual_loss(x.view(), x.view(), 0.5).unwrap(), 0.0);
    }

    #[test]
    fn contextual_permutation_invariance() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let y = Array2::<f64>::from_shape_fn((6, 10), |_| r.gen_range(-1.0..1.0));
        let perm: Vec<usize> = vec![3, 0, 9, 1, 4, 8, 2, 7, 5, 6];
        let x = Array2::from_shape_fn((6, 10), |(c, i)| y[[c, perm[i]]]);
        let self_match = contextual_loss(y.view(), y.view(), 0.5).unwrap();
        let permuted = contextual_loss(x.view(), y.view(), 0.5).unwrap();
        assert!((self_match - permuted).abs() < 1e-6);
        assert!(self_match >= 0.0);
    }

    #[test]
    fn contextual_orders_mismatch_above_match() {
        let eye = Array2::<f64>::eye(4);
        let mut other = Array2::<f64>::zeros((4, 4));
        for i in 0..4 {
            other[[(i + 1) % 4, i]] = -1.0;
        }
        let matched = contextual_loss(eye.view(), eye.view(), 0.5).unwrap();
        let mismatched = contextual_loss(other.view(), eye.view(), 0.5).unwrap();
        assert!(mismatched > matched);
    }

    #[test]
    fn contextual_rejects_empty() {
        let e = Array2::<f64>::zeros((3, 0));
        let x = Array2::<f64>::zeros((3, 2));
        assert!(matches!(contextual_loss(e.view(), x.view(), 0.5), Err(Error::Argument(_))));
    }

    #[test]
    fn contextual_gradient_matches_central_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let x = Array2::<f64>::from_shape_fn((5, 7), |_| r.gen_range(-1.0..1.0));
        let y = Array2::<f64>::from_shape_fn((5, 6), |_| r.gen_range(-1.0..1.0));
        let (_, g) = contextual_loss_grad(x.view(), y.view(), 0.5, true).unwrap();
        let g = g.unwrap();
        let h = 1e-6;
        for idx in [(0, 0), (2, 3), (4, 6), (1, 5)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = (contextual_loss(xp.view(), y.view(), 0.5).unwrap()
                - contextual_loss(xm.view(), y.view(), 0.5).unwrap())
                / (2.0 * h);
            let rel = (num - g[idx]).abs() / num.abs().max(g[idx].abs()).max(1e-9);
            assert!(rel < 1e-4, "{idx:?}: analytic {} numeric {num}", g[idx]);
        }
    }

    #[test]
    fn total_is_additive_over_styles() {
        let d = disc();
        let cfg = LossConfig {
            contextual_tap: 0,
            ..Default::default()
        };
        let outs = [rand_img(1), rand_img(2)];
        let refs = [rand_img(3), rand_img(4)];
        let both = total_loss(&d, &outs, &refs, &cfg).unwrap();
        let a = total_loss(&d, &outs[..1], &refs[..1], &cfg).unwrap();
        let b = total_loss(&d, &outs[1..], &refs[1..], &cfg).unwrap();
        assert_eq!(both, a + b);
        assert_eq!(total_loss(&d, &outs[..1], &outs[..1], &cfg).unwrap(), 0.0);
        assert!(total_loss(&d, &outs, &refs[..1], &cfg).is_err());
        let no_cx = LossConfig {
            contextual_weight: 0.0,
            contextual_tap: 0,
            ..Default::default()
        };
        let perc = disc_perceptual_loss(&d, &outs[0], &refs[0], &no_cx).unwrap();
        assert_eq!(total_loss(&d, &outs[..1], &refs[..1], &no_cx).unwrap(), perc);
    }
}
