//! Regenerates the committed base checkpoint.
//!
//! cargo run --release -p multistyle --example pretrain_base -- [steps] [out]

use multistyle::checkpoint;
use multistyle::model::BaseConfig;
use multistyle::pretrain::{pretrain_gan, PretrainConfig};
use multistyle::synthetic::{render_dataset, SyntheticDatasetSpec};
use multistyle::{Exec, Image};

fn main() -> multistyle::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(PretrainConfig::default().steps);
    let out = args.get(2).cloned().unwrap_or_else(|| "crates/core/assets/base_toy.msgan".into());
    let data = render_dataset(&SyntheticDatasetSpec::default(), Exec::Parallel)?;
    let cfg = PretrainConfig {
        steps,
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let (base, report) = pretrain_gan(&BaseConfig::toy(), &data, &cfg, |r| {
        if r.step % 100 == 0 {
            println!(
                "step {:5}  d {:.4}  g {:.4}  r1 {:>9}  {:.0}s",
                r.step,
                r.d_loss,
                r.g_loss,
                r.r1.map_or("-".into(), |v| format!("{v:.4}")),
                t0.elapsed().as_secs_f64()
            );
        }
    })?;
    println!("feature gap {:.4} -> {:.4}", report.initial_gap, report.final_gap);
    checkpoint::save_base(&base, &out)?;
    let tiles = (0..32u64)
        .map(|i| {
            let code = multistyle::inversion::sample_code(&base.mapping, &base.styler, i)?;
            base.generator.synthesize(&code)
        })
        .collect::<multistyle::Result<Vec<Image>>>()?;
    Image::grid(&tiles, 8)?.save_png(format!("{out}.samples.png"))?;
    Image::grid(&data[..32], 8)?.save_png(format!("{out}.data.png"))?;
    println!("wrote {out} ({})", checkpoint::base_hash(&base)?);
    Ok(())
}
