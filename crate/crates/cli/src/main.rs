//! `multistyle` command-line tool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use multistyle::checkpoint::{self, load_model};
use multistyle::config::RunConfig;
use multistyle::inference::{
    default_mix_start, novel_mix, sample_multistyle, stylize, MixSource, NovelMixSpec, StyleSelection,
    StylizationRequest,
};
use multistyle::inversion::invert;
use multistyle::metrics::{eval_model, storage_report, timing_report};
use multistyle::model::{BaseModel, MultiStyleModel};
use multistyle::pretrain::pretrain_gan;
use multistyle::synthetic::{render_dataset, style_references};
use multistyle::trainer::{finetune, METRICS_FILE};
use multistyle::{Error, Image, Result, StyleMixMask};

mod manifest;
use manifest::Manifest;

/// Environment variable naming the default output root.
const OUT_ENV: &str = "MULTISTYLE_OUT";

#[derive(Parser, Debug)]
#[command(name = "multistyle", version, about = "Train and apply multi-style one-shot generators")]
struct Cli {
    /// TOML run configuration; absent keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to `$MULTISTYLE_OUT/<command>` or `runs/<command>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Disable parallelism for bit-reproducible results.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train a base GAN on the synthetic shape dataset.
    Pretrain {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fine-tune one generator on a directory of reference PNGs.
    Train {
        /// Directory of reference images; file stems become style names.
        #[arg(long)]
        references: PathBuf,
        /// Base model archive; the bundled toy base when absent.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Render an input image in the selected styles.
    Stylize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// `all` or a comma-separated list of style names.
        #[arg(long, default_value = "all")]
        styles: String,
        /// Contact sheet path; defaults to `grid.png` in the output directory.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Novel styles by mixing styles or sampling multistyle space.
    Explore {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        mode: ExploreMode,
        /// Number of samples in `sample` mode.
        #[arg(long)]
        count: Option<usize>,
    },
    /// SIFID of stylized inputs against the style references.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Directory of input PNGs.
        #[arg(long)]
        inputs: PathBuf,
        /// Directory holding one `<style>.png` per model style.
        #[arg(long)]
        references: PathBuf,
    },
    /// Multi-style versus separate single-style training time and storage.
    Bench {
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
        /// Style counts to time, e.g. `4,8`.
        #[arg(long = "n", visible_alias = "N", value_delimiter = ',')]
        n: Vec<usize>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Write filtered base samples as a directory of demo style references.
    References {
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Invert an image with the base generator.
    Invert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ExploreMode {
    Mix,
    Sample,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain { .. } => "pretrain",
            Command::Train { .. } => "train",
            Command::Stylize { .. } => "stylize",
            Command::Explore { .. } => "explore",
            Command::Eval { .. } => "eval",
            Command::Bench { .. } => "bench",
            Command::References { .. } => "references",
            Command::Invert { .. } => "invert",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), one_line(&e.to_string()));
            ExitCode::from(match e.class() {
                "config" => 2,
                "io" => 3,
                "numeric" => 4,
                _ => 5,
            })
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(cli.command.name())
    })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = cfg.resolve(cli.seed, cli.deterministic)?;
    let out = out_dir(&cli);
    std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let mut m = Manifest::new(cli.command.name(), &cfg);
    if let Some(p) = &cli.config {
        m.input(p)?;
    }
    match &cli.command {
        Command::Pretrain { steps } => cmd_pretrain(&cfg, *steps, &out, &mut m)?,
        Command::Train {
            references,
            base,
            iterations,
        } => cmd_train(&cfg, references, base.as_deref(), *iterations, &out, &mut m)?,
        Command::Stylize {
            model,
            input,
            styles,
            grid,
        } => cmd_stylize(&cfg, model, input, styles, grid.as_deref(), &out, &mut m)?,
        Command::Explore { model, mode, count } => cmd_explore(&cfg, model, *mode, *count, &out, &mut m)?,
        Command::Eval {
            model,
            inputs,
            references,
        } => cmd_eval(&cfg, model, inputs, references, &out, &mut m)?,
        Command::Bench {
            references,
            base,
            n,
            iterations,
        } => cmd_bench(&cfg, references, base.as_deref(), n, *iterations, &out, &mut m)?,
        Command::References { base, count } => cmd_references(&cfg, base.as_deref(), *count, &out, &mut m)?,
        Command::Invert { input, base } => cmd_invert(&cfg, input, base.as_deref(), &out, &mut m)?,
    }
    m.write(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn load_base(path: Option<&Path>, m: &mut Manifest) -> Result<BaseModel<f32>> {
    let base = match path {
        Some(p) => {
            m.input(p)?;
            checkpoint::load_base(p)?
        }
        None => checkpoint::bundled_base()?,
    };
    m.set("base_hash", json!(checkpoint::base_hash(&base)?));
    Ok(base)
}

fn open_model(path: &Path, m: &mut Manifest) -> Result<MultiStyleModel> {
    m.input(path)?;
    let model = load_model(path)?;
    m.set("base_hash", json!(model.provenance.base_hash));
    m.set("styles", json!(model.names()));
    Ok(model)
}

/// PNGs of a directory sorted by file name, paired with their stems.
fn read_png_dir(dir: &Path, m: &mut Manifest) -> Result<Vec<(String, Image)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no PNG files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            m.input(p)?;
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            Ok((stem, Image::load_png(p)?))
        })
        .collect()
}

fn load_png(path: &Path, m: &mut Manifest) -> Result<Image> {
    m.input(path)?;
    Image::load_png(path)
}

fn cmd_pretrain(cfg: &RunConfig, steps: Option<usize>, out: &Path, m: &mut Manifest) -> Result<()> {
    let base_cfg = cfg.model.base_config()?;
    let mut pcfg = cfg.pretrain.clone();
    if let Some(s) = steps {
        pcfg.steps = s;
    }
    m.set("steps", json!(pcfg.steps));
    info!("rendering {} synthetic images", cfg.dataset.count);
    let data = render_dataset(&cfg.dataset, cfg.exec())?;
    let log_path = out.join("pretrain.tsv");
    let mut log = String::from("step\td_loss\tg_loss\tr1\n");
    let (base, report) = pretrain_gan(&base_cfg, &data, &pcfg, |r| {
        log += &format!(
            "{}\t{:.6}\t{:.6}\t{}\n",
            r.step,
            r.d_loss,
            r.g_loss,
            r.r1.map_or("-".into(), |v| format!("{v:.6}"))
        );
        if r.step % 100 == 0 {
            info!("step {} d {:.4} g {:.4}", r.step, r.d_loss, r.g_loss);
        }
    })?;
    m.write_text(&log_path, &log)?;
    info!("feature gap {:.4} -> {:.4}", report.initial_gap, report.final_gap);
    m.set("feature_gap", json!([report.initial_gap, report.final_gap]));
    let path = out.join("base.msgan");
    checkpoint::save_base(&base, &path)?;
    m.output(&path)?;
    let tiles = (0..32u64)
        .map(|i| {
            let code = multistyle::inversion::sample_code(&base.mapping, &base.styler, i)?;
            base.generator.synthesize(&code)
        })
        .collect::<Result<Vec<_>>>()?;
    m.write_png(&out.join("samples.png"), &Image::grid(&tiles, 8)?)?;
    m.set("base_hash", json!(checkpoint::base_hash(&base)?));
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    references: &Path,
    base: Option<&Path>,
    iterations: Option<usize>,
    out: &Path,
    m: &mut Manifest,
) -> Result<()> {
    let base = load_base(base, m)?;
    let refs = read_png_dir(references, m)?;
    let mut tcfg = cfg.train.clone();
    if let Some(i) = iterations {
        tcfg.iterations = i;
    }
    info!("fine-tuning on {} styles for {} iterations", refs.len(), tcfg.iterations);
    let result = finetune(&base, &refs, &tcfg, Some(out))?;
    m.output(&out.join(METRICS_FILE))?;
    m.output(&out.join("model.msgan"))?;
    if let (Some(first), Some(last)) = (result.log.first(), result.log.last()) {
        info!("loss {:.4} -> {:.4} in {:.1}s", first.terms.total, last.terms.total, result.total_s);
    }
    m.set("styles", json!(result.model.names()));
    m.set("config_hash", json!(result.model.provenance.config_hash));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_stylize(
    cfg: &RunConfig,
    model: &Path,
    input: &Path,
    styles: &str,
    grid: Option<&Path>,
    out: &Path,
    m: &mut Manifest,
) -> Result<()> {
    let model = open_model(model, m)?;
    let req = StylizationRequest {
        input: load_png(input, m)?,
        styles: styles.parse::<StyleSelection>()?,
        inversion: cfg.train.inversion.clone(),
        seed: cfg.seed,
    };
    let result = stylize(&model, &req)?;
    m.write_png(&out.join("reconstruction.png"), &result.reconstruction)?;
    let mut tiles = Vec::with_capacity(result.outputs.len());
    for (name, img) in &result.outputs {
        m.write_png(&out.join(format!("{name}.png")), img)?;
        tiles.push(img.clone());
    }
    let grid_path = grid.map_or_else(|| out.join("grid.png"), Path::to_path_buf);
    m.write_png(&grid_path, &Image::grid(&tiles, tiles.len())?)?;
    Ok(())
}

fn cmd_explore(
    cfg: &RunConfig,
    model: &Path,
    mode: ExploreMode,
    count: Option<usize>,
    out: &Path,
    m: &mut Manifest,
) -> Result<()> {
    let model = open_model(model, m)?;
    match mode {
        ExploreMode::Mix => {
            // row a, column b: style a with its tail rows blended from style b
            let rows = model.schedule().len();
            let start = cfg.explore.mix_start_row.unwrap_or_else(|| default_mix_start(rows));
            let blend = StyleMixMask::new((0..rows).map(|i| i >= start).collect());
            let n = model.len();
            let mut tiles = Vec::with_capacity(n * n);
            for a in 0..n {
                for b in 0..n {
                    let spec = NovelMixSpec {
                        base: MixSource::Random { seed: cfg.seed, style: a },
                        partner: MixSource::Random { seed: cfg.seed, style: b },
                        start_row: start,
                        blend: blend.clone(),
                    };
                    tiles.push(novel_mix(&model, &spec)?);
                }
            }
            m.set("mix_start_row", json!(start));
            m.write_png(&out.join("mix.png"), &Image::grid(&tiles, n)?)?;
        }
        ExploreMode::Sample => {
            let count = count.unwrap_or(cfg.explore.samples);
            let samples = sample_multistyle(&model, cfg.seed, count, None)?;
            let styles: Vec<&str> = samples.iter().map(|(k, _)| model.names()[*k].as_str()).collect();
            m.set("sample_styles", json!(styles));
            let tiles: Vec<Image> = samples.into_iter().map(|(_, i)| i).collect();
            let cols = (tiles.len() as f64).sqrt().ceil() as usize;
            m.write_png(&out.join("samples.png"), &Image::grid(&tiles, cols)?)?;
        }
    }
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    model: &Path,
    inputs: &Path,
    references: &Path,
    out: &Path,
    m: &mut Manifest,
) -> Result<()> {
    let model = open_model(model, m)?;
    let inputs: Vec<Image> = read_png_dir(inputs, m)?.into_iter().map(|(_, i)| i).collect();
    let mut refs = read_png_dir(references, m)?;
    let ordered = model
        .names()
        .iter()
        .map(|n| {
            let i = refs
                .iter()
                .position(|(s, _)| s == n)
                .ok_or_else(|| Error::Config(format!("no reference image for style `{n}`")))?;
            Ok(refs.swap_remove(i).1)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = eval_model(&model, &inputs, &ordered, &cfg.train.inversion, cfg.seed, cfg.exec())?;
    m.write_text(&out.join("sifid.tsv"), &report.to_tsv())?;
    let summary = report.summary();
    m.write_text(&out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_bench(
    cfg: &RunConfig,
    references: &Path,
    base: Option<&Path>,
    n: &[usize],
    iterations: Option<usize>,
    out: &Path,
    m: &mut Manifest,
) -> Result<()> {
    let base = load_base(base, m)?;
    let refs = read_png_dir(references, m)?;
    let counts = if n.is_empty() { cfg.bench.styles.clone() } else { n.to_vec() };
    let max_n = counts.iter().copied().max().unwrap_or(0);
    if max_n == 0 || max_n > refs.len() {
        return Err(Error::Config(format!(
            "style counts {counts:?} need 1..={} references",
            refs.len()
        )));
    }
    let mut tcfg = cfg.train.clone();
    tcfg.iterations = iterations.unwrap_or(cfg.bench.iterations);
    tcfg.snapshot_every = 0;
    let mut single_logs = Vec::with_capacity(max_n);
    for (k, r) in refs[..max_n].iter().enumerate() {
        let dir = out.join(format!("single-{k:02}"));
        info!("single-style run {k} ({})", r.0);
        finetune(&base, std::slice::from_ref(r), &tcfg, Some(&dir))?;
        single_logs.push(dir.join(METRICS_FILE));
    }
    let mut timing = String::from("styles\tmultistyle_s\tsingle_total_s\tratio\tmultistyle_bytes\tseparate_bytes\n");
    for &count in &counts {
        let dir = out.join(format!("multi-{count:02}"));
        info!("multi-style run with {count} styles");
        finetune(&base, &refs[..count], &tcfg, Some(&dir))?;
        let t = timing_report(&dir.join(METRICS_FILE), &single_logs[..count])?;
        let s = storage_report(dir.join("model.msgan"))?;
        m.write_text(&dir.join("timing.tsv"), &t.to_tsv())?;
        timing += &format!(
            "{count}\t{:.3}\t{:.3}\t{}\t{}\t{}\n",
            t.multistyle.seconds,
            t.single_total_s,
            t.ratio.map_or("n/a".into(), |r| format!("{r:.3}")),
            s.total_bytes,
            s.separate_generators_bytes
        );
    }
    // wall-clock numbers differ between runs, so the table is not hashed
    let table = out.join("bench.tsv");
    std::fs::write(&table, &timing).map_err(|e| io_err(&table, e))?;
    print!("{timing}");
    Ok(())
}

fn cmd_invert(cfg: &RunConfig, input: &Path, base: Option<&Path>, out: &Path, m: &mut Manifest) -> Result<()> {
    let base = load_base(base, m)?;
    let target = load_png(input, m)?;
    let inv = invert(&base, &target, &cfg.train.inversion, cfg.seed)?;
    info!(
        "reconstruction loss {:.5} -> {:.5} (best step {})",
        inv.initial_loss, inv.final_loss, inv.best_step
    );
    let code_path = out.join("code.msgan");
    checkpoint::save_code(&inv.code, inv.wplus.as_ref(), &code_path)?;
    m.output(&code_path)?;
    let recon = base.generator.synthesize(&inv.code)?;
    m.write_png(&out.join("side_by_side.png"), &Image::grid(&[target, recon], 2)?)?;
    m.set("loss", json!([inv.initial_loss, inv.final_loss]));
    Ok(())
}

fn cmd_references(cfg: &RunConfig, base: Option<&Path>, count: usize, out: &Path, m: &mut Manifest) -> Result<()> {
    if count == 0 {
        return Err(Error::Config("--count must be >= 1".into()));
    }
    let base = load_base(base, m)?;
    for (name, img) in style_references(&base, count, cfg.seed)? {
        m.write_png(&out.join(format!("{name}.png")), &img)?;
    }
    Ok(())
}
