//! Properties of the bundled pre-trained base.

use multistyle::checkpoint::{base_hash, bundled_base, decode_base, encode_base, BUNDLED_BASE};
use multistyle::inversion::sample_code;
use multistyle::model::BaseConfig;

#[test]
fn bundled_base_decodes_and_re_encodes_identically() {
    let base = bundled_base().unwrap();
    assert_eq!(base.config, BaseConfig::toy());
    assert_eq!(encode_base(&base), BUNDLED_BASE);
    assert_eq!(decode_base(&encode_base(&base)).unwrap(), base);
    assert_eq!(base_hash(&base).unwrap().len(), 64);
}

#[test]
fn style_space_interpolation_is_smooth() {
    let base = bundled_base().unwrap();
    let smooth = (0..10u64)
        .filter(|&i| {
            let a = sample_code(&base.mapping, &base.styler, 2 * i).unwrap();
            let b = sample_code(&base.mapping, &base.styler, 2 * i + 1).unwrap();
            let ia = base.generator.synthesize(&a).unwrap();
            let ib = base.generator.synthesize(&b).unwrap();
            let (to_a, to_b): (Vec<f64>, Vec<f64>) = (0..5)
                .map(|j| {
                    let t = j as f32 / 4.0;
                    let img = base.generator.synthesize(&a.affine_combine(1.0 - t, &b, t).unwrap()).unwrap();
                    (img.mse(&ia), img.mse(&ib))
                })
                .unzip();
            to_a.windows(2).all(|w| w[0] <= w[1]) && to_b.windows(2).all(|w| w[0] >= w[1])
        })
        .count();
    assert!(smooth > 5, "{smooth}/10 pairs monotone");
}

#[test]
fn samples_use_the_output_range() {
    let base = bundled_base().unwrap();
    let (mut lo, mut hi) = (f32::MAX, f32::MIN);
    for i in 0..8 {
        let img = base.generator.synthesize(&sample_code(&base.mapping, &base.styler, i).unwrap()).unwrap();
        lo = lo.min(img.data().iter().copied().fold(f32::MAX, f32::min));
        hi = hi.max(img.data().iter().copied().fold(f32::MIN, f32::max));
    }
    assert!(lo < -0.5 && hi > 0.5, "range [{lo}, {hi}]");
}
