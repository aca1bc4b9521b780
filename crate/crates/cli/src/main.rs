use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use aredit_core::cache::{build_cache, load_cache, save_cache, EditCache};
use aredit_core::codec::CodecParams;
use aredit_core::editor::{edit, EditConfig, MaskMode, UserMask, ATTENTION_GAMMA, ATTENTION_TAU, DEFAULT_GAMMA, DEFAULT_TAU};
use aredit_core::numerics::Image;
use aredit_core::predictor::{train, PredictorModel, TrainConfig, TransformerConfig};
use aredit_core::pyramid::ScaleSchedule;
use aredit_core::shapesworld::{generate, read_corpus, write_corpus};
use aredit_service::{app_state, load_model, router, serve, shutdown_signal, ServiceConfig};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "aredit", version, about = "Cached text-guided editing for a next-scale bit predictor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic captioned corpora.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Train the transformer backend on a corpus directory.
    Train(TrainArgs),
    /// Run the source pass once and write an AREC cache.
    Cache(CacheArgs),
    /// Edit a cached image toward a target prompt.
    Edit(EditArgs),
    /// Render a gamma x tau grid of edits.
    Ablate(AblateArgs),
    /// Time a full run against cached re-runs.
    Bench(BenchArgs),
    /// Serve the HTTP API and the console bundle.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum DatasetCommand {
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Continue from an existing model instead of a fresh one.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f32,
    #[arg(long, default_value_t = 50)]
    warmup: usize,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
}

#[derive(Args)]
struct CacheArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    prompt: String,
    /// ARPM file, or `synthetic`.
    #[arg(long, default_value = "synthetic")]
    model: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_attn: bool,
}

#[derive(Args, Clone)]
struct EditOpts {
    /// ARPM file the cache was built with, or `synthetic`.
    #[arg(long, default_value = "synthetic")]
    model: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    attn: bool,
    /// bitwise, spatial or full (every bit re-sampled).
    #[arg(long, default_value = "bitwise")]
    mask_mode: String,
    #[arg(long, default_value_t = 1.0)]
    temperature: f32,
    #[arg(long, default_value_t = 16)]
    attention_max_res: usize,
    #[arg(long)]
    user_mask: Option<PathBuf>,
}

impl EditOpts {
    fn config(&self, gamma: Option<usize>, tau: Option<f64>, emit: bool) -> Result<EditConfig> {
        let (g, t) = if self.attn { (ATTENTION_GAMMA, ATTENTION_TAU) } else { (DEFAULT_GAMMA, DEFAULT_TAU) };
        let user_mask = match &self.user_mask {
            Some(p) => Some(UserMask::from_image(&Image::load_png(p)?)),
            None => None,
        };
        Ok(EditConfig {
            gamma: gamma.unwrap_or(g),
            tau: tau.unwrap_or(t),
            mask_mode: self.mask_mode.parse::<MaskMode>()?,
            attention_control: self.attn,
            attention_max_res: self.attention_max_res,
            seed: self.seed,
            temperature: self.temperature,
            emit_intermediate: emit,
            user_mask,
        })
    }
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    gamma: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Write `D(F_k)` for every scale here.
    #[arg(long)]
    emit_scales: Option<PathBuf>,
    /// Write per-scale mask heatmaps and run-length files here.
    #[arg(long)]
    emit_masks: Option<PathBuf>,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    opts: EditOpts,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, value_delimiter = ',', default_value = "0,3,7")]
    gammas: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.0,0.2,0.5")]
    taus: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: EditOpts,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    src: String,
    #[arg(long)]
    tgt: String,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value = "synthetic")]
    model: String,
    #[arg(long)]
    gamma: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "AREDIT_PORT", default_value_t = aredit_service::DEFAULT_PORT)]
    port: u16,
    #[arg(long, env = "AREDIT_MODEL", default_value = "synthetic")]
    model: String,
    #[arg(long, env = "AREDIT_STORE")]
    store: Option<PathBuf>,
    /// Console bundle directory; defaults to `console/dist` when it exists.
    #[arg(long = "static", env = "AREDIT_STATIC")]
    static_dir: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

fn schedule() -> ScaleSchedule {
    ScaleSchedule::reference()
}

fn model_from(spec: &str) -> Result<PredictorModel> {
    load_model(spec).with_context(|| format!("loading model {spec}"))
}

fn dataset_gen(out: &Path, count: usize, seed: u64, size: usize) -> Result<()> {
    let items = generate(seed, count, size)?;
    write_corpus(out, &items)?;
    let mut shapes = BTreeMap::new();
    let mut colors = BTreeMap::new();
    for (_, s) in &items {
        *shapes.entry(s.shape.name()).or_insert(0usize) += 1;
        *colors.entry(s.color.name.clone()).or_insert(0usize) += 1;
    }
    let summary = serde_json::json!({
        "dir": out, "count": items.len(), "seed": seed, "size": size,
        "shapes": shapes, "colors": colors,
    });
    println!("{summary}");
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let corpus: Vec<(Image, String)> = read_corpus(&a.data)?.into_iter().map(|(i, s)| (i, s.caption)).collect();
    let model = match &a.init {
        Some(p) => PredictorModel::load(p)?,
        None => {
            let d = TransformerConfig::default();
            PredictorModel::transformer(TransformerConfig {
                width: a.width.unwrap_or(d.width),
                layers: a.layers.unwrap_or(d.layers),
                heads: a.heads.unwrap_or(d.heads),
                hidden: a.hidden.unwrap_or(d.hidden),
                init_seed: a.seed,
                ..d
            })?
        }
    };
    let cfg = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        seed: a.seed,
        batch_size: a.batch_size,
        momentum: a.momentum,
        warmup_steps: a.warmup.min(a.steps),
        ..TrainConfig::default()
    };
    println!("step,loss");
    let mut window = Vec::new();
    let (trained, report) = train(&model, &corpus, &CodecParams::default(), &schedule(), &cfg, |step, loss| {
        window.push(loss);
        if (step + 1) % 50 == 0 || step + 1 == a.steps {
            println!("{},{:.6}", step + 1, window.iter().sum::<f64>() / window.len() as f64);
            window.clear();
        }
    })?;
    trained.save(&a.out)?;
    eprintln!(
        "wrote {} ({} steps, fingerprint {})",
        a.out.display(),
        report.losses.len(),
        trained.fingerprint_hex()
    );
    Ok(())
}

fn run_cache(a: &CacheArgs) -> Result<()> {
    let model = model_from(&a.model)?;
    let img = Image::load_png(&a.image)?;
    let t = Instant::now();
    let cache = build_cache(&img, &a.prompt, &model, &CodecParams::default(), &schedule(), !a.no_attn)?;
    save_cache(&cache, &a.out)?;
    eprintln!("wrote {} in {:.1} ms", a.out.display(), t.elapsed().as_secs_f64() * 1e3);
    Ok(())
}

fn load(path: &Path, model: &str) -> Result<(EditCache, PredictorModel)> {
    let cache = load_cache(path).with_context(|| format!("loading cache {}", path.display()))?;
    let model = model_from(model)?;
    cache.check_model(&model)?;
    Ok((cache, model))
}

#[derive(Serialize)]
struct EditSummary {
    out: PathBuf,
    flagged_bits: usize,
    predict_ms: f64,
    decode_ms: f64,
    total_ms: f64,
}

fn run_edit(a: &EditArgs) -> Result<()> {
    let t = Instant::now();
    let (cache, model) = load(&a.cache, &a.opts.model)?;
    let load_time = t.elapsed();
    let cfg = a.opts.config(a.gamma, a.tau, a.emit_scales.is_some())?;
    let mut out = edit(&cache, &a.prompt, &model, &CodecParams::default(), &cfg)?;
    out.timing.cache_load = load_time;
    out.image.save_png(&a.out)?;
    if let (Some(dir), Some(strip)) = (&a.emit_scales, &out.intermediate_decodes) {
        std::fs::create_dir_all(dir)?;
        for (k, img) in strip.iter().enumerate() {
            img.save_png(dir.join(format!("scale_{:02}.png", k + 1)))?;
        }
    }
    if let Some(dir) = &a.emit_masks {
        std::fs::create_dir_all(dir)?;
        for (i, m) in out.masks.iter().enumerate() {
            let k = cfg.gamma + i + 1;
            std::fs::write(dir.join(format!("mask_{k:02}.png")), m.heatmap_png()?)?;
            std::fs::write(dir.join(format!("mask_{k:02}.armk")), m.to_rle())?;
        }
    }
    let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
    let summary = EditSummary {
        out: a.out.clone(),
        flagged_bits: out.flagged_bits(),
        predict_ms: ms(out.timing.predict),
        decode_ms: ms(out.timing.decode),
        total_ms: ms(out.timing.total + load_time),
    };
    if a.json {
        println!("{}", serde_json::to_string(&summary)?);
    } else {
        eprintln!("wrote {} ({} bits flagged, {:.1} ms)", a.out.display(), summary.flagged_bits, summary.total_ms);
    }
    Ok(())
}

/// Tiles equal-sized images row-major with `gap`-pixel white separators.
fn montage(tiles: &[Vec<Image>], gap: usize) -> Result<Image> {
    let (rows, cols) = (tiles.len(), tiles.first().map_or(0, Vec::len));
    if rows == 0 || cols == 0 {
        bail!("empty montage");
    }
    let (tw, th) = (tiles[0][0].width(), tiles[0][0].height());
    let (w, h) = (cols * tw + (cols - 1) * gap, rows * th + (rows - 1) * gap);
    let mut img = Image::filled(w, h, [255, 255, 255]);
    for (r, row) in tiles.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            for y in 0..th {
                for x in 0..tw {
                    img.set_pixel(c * (tw + gap) + x, r * (th + gap) + y, tile.pixel(x, y));
                }
            }
        }
    }
    Ok(img)
}

fn run_ablate(a: &AblateArgs) -> Result<()> {
    let (cache, model) = load(&a.cache, &a.opts.model)?;
    let codec = CodecParams::default();
    let mut gammas = a.gammas.clone();
    let mut taus = a.taus.clone();
    gammas.sort_unstable();
    taus.sort_by(|x, y| x.partial_cmp(y).expect("finite tau"));
    let mut tiles = Vec::with_capacity(gammas.len());
    for &g in &gammas {
        let mut row = Vec::with_capacity(taus.len());
        for &t in &taus {
            let cfg = a.opts.config(Some(g), Some(t), false)?;
            row.push(edit(&cache, &a.prompt, &model, &codec, &cfg)?.image);
        }
        tiles.push(row);
    }
    montage(&tiles, 2)?.save_png(&a.out)?;
    eprintln!("wrote {} ({} x {} cells)", a.out.display(), gammas.len(), taus.len());
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    full_ms: f64,
    rerun_ms: f64,
    ratio: f64,
    full_min_ms: f64,
    rerun_min_ms: f64,
    runs: usize,
}

fn run_bench(a: &BenchArgs) -> Result<()> {
    if a.runs == 0 {
        bail!("--runs must be positive");
    }
    let model = model_from(&a.model)?;
    let img = Image::load_png(&a.image)?;
    let (codec, sched) = (CodecParams::default(), schedule());
    let cfg = EditConfig {
        gamma: a.gamma.unwrap_or(DEFAULT_GAMMA),
        tau: a.tau.unwrap_or(DEFAULT_TAU),
        ..EditConfig::default()
    };
    let cache = build_cache(&img, &a.src, &model, &codec, &sched, true)?;
    edit(&cache, &a.tgt, &model, &codec, &cfg)?;
    let (mut full, mut rerun) = (Vec::new(), Vec::new());
    for _ in 0..a.runs {
        let t = Instant::now();
        let c = build_cache(&img, &a.src, &model, &codec, &sched, true)?;
        edit(&c, &a.tgt, &model, &codec, &cfg)?;
        full.push(t.elapsed().as_secs_f64() * 1e3);
        let t = Instant::now();
        edit(&cache, &a.tgt, &model, &codec, &cfg)?;
        rerun.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let r = BenchReport {
        full_ms: mean(&full),
        rerun_ms: mean(&rerun),
        ratio: mean(&full) / mean(&rerun),
        full_min_ms: min(&full),
        rerun_min_ms: min(&rerun),
        runs: a.runs,
    };
    if a.json {
        println!("{}", serde_json::to_string(&r)?);
    } else {
        println!(
            "full {:.2} ms (min {:.2}), rerun {:.2} ms (min {:.2}), ratio {:.2} over {} runs",
            r.full_ms, r.full_min_ms, r.rerun_ms, r.rerun_min_ms, r.ratio, r.runs
        );
    }
    Ok(())
}

fn run_serve(a: &ServeArgs) -> Result<()> {
    let mut cfg = ServiceConfig::new(model_from(&a.model)?);
    cfg.store_dir = a.store.clone();
    cfg.static_dir = a.static_dir.clone().or_else(|| Some(PathBuf::from("console/dist")).filter(|p| p.is_dir()));
    let (state, static_dir) = app_state(cfg)?;
    let app = router(state, static_dir.as_deref());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        serve(listener, app, shutdown_signal()).await?;
        eprintln!("shut down");
        Ok(())
    })
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Dataset {
            command: DatasetCommand::Gen { out, count, seed, size },
        } => dataset_gen(&out, count, seed, size),
        Command::Train(a) => run_train(&a),
        Command::Cache(a) => run_cache(&a),
        Command::Edit(a) => run_edit(&a),
        Command::Ablate(a) => run_ablate(&a),
        Command::Bench(a) => run_bench(&a),
        Command::Serve(a) => run_serve(&a),
    }
}
