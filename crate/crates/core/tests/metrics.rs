//! SIFID properties and storage/timing accounting.

use ndarray::{Array2, Array3};

use multistyle::checkpoint::{bundled_base, save_model};
use multistyle::inversion::sample_code;
use multistyle::metrics::{
    sifid, sifid_from_features, stn_bytes, storage_report, timing_report, FeatureExtractor, SIFID_EPS,
};
use multistyle::model::{BaseConfig, BaseModel, MultiStyleModel};
use multistyle::rng;
use multistyle::stn::stn_param_count;
use multistyle::synthetic::style_references;
use multistyle::trainer::{finetune, TrainConfig};
use multistyle::{Image, RowSchedule};

fn noisy(img: &Image, sigma: f32, seed: u64) -> Image {
    let (c, h, w) = img.dims();
    let n = rng::gaussian::<f32, _>(&mut rng::stream(seed, &[]), c * h * w)
        .into_shape_with_order((c, h, w))
        .unwrap();
    Image::new(img.data() + &(n * sigma)).unwrap()
}

fn samples(base: &BaseModel<f32>, count: u64) -> Vec<Image> {
    (0..count)
        .map(|i| base.generator.synthesize(&sample_code(&base.mapping, &base.styler, 40 + i).unwrap()).unwrap())
        .collect()
}

#[test]
fn self_distance_and_symmetry() {
    let base = bundled_base().unwrap();
    let fx = FeatureExtractor::new(&base.discriminator);
    let imgs = samples(&base, 4);
    for a in &imgs {
        assert!(sifid(a, a, &fx, SIFID_EPS).unwrap().value < 1e-6);
        for b in &imgs {
            let ab = sifid(a, b, &fx, SIFID_EPS).unwrap().value;
            let ba = sifid(b, a, &fx, SIFID_EPS).unwrap().value;
            assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
        }
    }
}

#[test]
fn noise_increases_distance_for_most_images() {
    let base = bundled_base().unwrap();
    let fx = FeatureExtractor::new(&base.discriminator);
    let monotone = samples(&base, 10)
        .iter()
        .enumerate()
        .filter(|(i, x)| {
            let v: Vec<f64> = [0.05, 0.1, 0.2]
                .iter()
                .map(|&s| sifid(x, &noisy(x, s, *i as u64), &fx, SIFID_EPS).unwrap().value)
                .collect();
            v[0] <= v[1] && v[1] <= v[2]
        })
        .count();
    assert!(monotone >= 8, "{monotone}/10");
}

#[test]
fn diagonal_gaussians_match_hand_formula() {
    // four samples per set: means (1, -2) and (0, 0); per-axis variances
    // (4/3, 1/3) and (1/3, 16/3) with unbiased estimates
    let a = Array2::from_shape_vec((2, 4), vec![0.0, 2.0, 0.0, 2.0, -2.5, -1.5, -2.5, -1.5]).unwrap();
    let b = Array2::from_shape_vec((2, 4), vec![-0.5, 0.5, -0.5, 0.5, -2.0, 2.0, -2.0, 2.0]).unwrap();
    let (va, vb): ([f64; 2], [f64; 2]) = ([4.0 / 3.0, 1.0 / 3.0], [1.0 / 3.0, 16.0 / 3.0]);
    let eps = 1e-6;
    let mut expected: f64 = 1.0 + 4.0;
    for i in 0..2 {
        let (x, y) = (va[i] + eps, vb[i] + eps);
        expected += x + y - 2.0 * (x * y).sqrt();
    }
    let got = sifid_from_features(a.view(), b.view(), eps).unwrap().value;
    assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
}

#[test]
fn mismatched_or_empty_features_are_errors() {
    let a = Array2::<f64>::zeros((3, 5));
    assert!(sifid_from_features(a.view(), Array2::zeros((2, 5)).view(), 1e-6).is_err());
    assert!(sifid_from_features(a.view(), Array2::zeros((3, 0)).view(), 1e-6).is_err());
    let few = Array2::<f64>::zeros((3, 2));
    assert!(sifid_from_features(few.view(), few.view(), 0.0).is_err());
}

#[test]
fn feature_extractor_reads_the_first_block() {
    let base = bundled_base().unwrap();
    let fx = FeatureExtractor::new(&base.discriminator);
    let img = Image::new(Array3::zeros((3, 32, 32))).unwrap();
    let f = fx.features(&img).unwrap();
    let tap0 = &base.discriminator.features(&img).unwrap()[0];
    assert_eq!(f.nrows(), tap0.dim().0);
    assert_eq!(f.ncols(), tap0.dim().1 * tap0.dim().2);
}

#[test]
fn stn_parameter_counts() {
    let full = RowSchedule::full_scale();
    assert_eq!(stn_param_count(&full), 512 * 512 + 256 * 256 + 128 * 128 + 64 * 64 + 32 * 32);
    assert_eq!(stn_param_count(&full), 349_184);
    assert_eq!(stn_param_count(&RowSchedule::toy()), 4096 + 1024 + 256);
    assert_eq!(stn_param_count(&RowSchedule::new(vec![32, 32]).unwrap()), 32 * 32);
}

#[test]
fn storage_accounting_of_a_saved_model() {
    let base = BaseModel::<f32>::init(&BaseConfig::toy(), 1).unwrap();
    let names: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    let model = MultiStyleModel::untrained(base, names).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.msgan");
    save_model(&model, &path).unwrap();
    let r = storage_report(&path).unwrap();
    let per = stn_bytes(model.schedule());
    assert_eq!(per, 4 * 5376);
    assert!(r.stn_bytes.iter().all(|(_, b)| *b == per));
    assert_eq!(r.total_bytes, r.generator_bytes + 4 * per);
    assert!(r.total_bytes < r.separate_generators_bytes);
    assert!(r.file_bytes > r.total_bytes);
}

#[test]
fn timing_report_edge_cases() {
    let base = BaseModel::<f32>::init(&BaseConfig::micro(), 2).unwrap();
    let refs = style_references(&base, 2, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = |iterations| TrainConfig {
        iterations,
        inversion: multistyle::inversion::InversionConfig {
            steps: 2,
            mean_samples: 4,
            ..Default::default()
        },
        ..Default::default()
    };
    let empty = dir.path().join("empty");
    finetune(&base, &refs, &cfg(0), Some(&empty)).unwrap();
    let one = dir.path().join("one");
    finetune(&base, &refs[..1], &cfg(0), Some(&one)).unwrap();
    let r = timing_report(&empty.join("metrics.tsv"), &[one.join("metrics.tsv")]).unwrap();
    assert!(r.ratio.is_none());
    assert!(r.to_tsv().contains("n/a"));

    let multi = dir.path().join("multi");
    finetune(&base, &refs, &cfg(5), Some(&multi)).unwrap();
    let single = dir.path().join("single");
    finetune(&base, &refs[..1], &cfg(5), Some(&single)).unwrap();
    let r = timing_report(&multi.join("metrics.tsv"), &[single.join("metrics.tsv")]).unwrap();
    assert_eq!(r.multistyle.styles, 2);
    assert!((r.single_total_s - 2.0 * r.single[0].seconds).abs() < 1e-12);
    assert!(r.ratio.unwrap() > 0.0);
}
