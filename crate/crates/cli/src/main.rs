//! `deepswir` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use deepswir::metrics::{band_f64, metrics_report, toa_raster};
use deepswir::mosaic::{synthesize_tile, StitchMode};
use deepswir::raster::{with_extension, write_composite, write_float_raster, FloatManifest};
use deepswir::scenegen::{default_endmembers, generate_scene, SceneConfig};
use deepswir::trainer::{sample_patch_dataset, train_with, TrainConfig};
use deepswir::{build_model, load_checkpoint, read_raster, save_checkpoint, write_raster, ModelConfig};

#[derive(Parser)]
#[command(name = "deepswir", version, about = "Synthesize a SWIR band from G, R and NIR imagery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic high/low-resolution scene pair.
    Gen(GenArgs),
    /// Train a model on 4-band (G, R, NIR, SWIR) rasters.
    Train(TrainArgs),
    /// Synthesize the SWIR band for a raster whose first three bands are G, R, NIR.
    Synth(SynthArgs),
    /// Compare a synthesized band with a reference band.
    Metrics(MetricsArgs),
    /// Convert DN to top-of-atmosphere reflectance.
    Toa(ToaArgs),
    /// Write an 8-bit false-colour composite.
    Composite(CompositeArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output base path; writes `<out>_hr` and `<out>_lr` rasters.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Scene configuration JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// High-resolution size as ROWSxCOLS.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    /// Number of built-in materials to mix (2 to 5).
    #[arg(long)]
    materials: Option<usize>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    sharpness: Option<f64>,
    #[arg(long)]
    blur: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// 4-band training rasters (base paths).
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    /// Checkpoint path; the epoch log goes to `<out>.log`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Training configuration JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    features: Option<usize>,
    /// Scale inputs by 1/1023 inside the network (outputs stay in DN).
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Number of random crops to sample from the rasters.
    #[arg(long)]
    crops: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    patch: usize,
    #[arg(long, default_value = "gaussian", value_parser = parse_stitch)]
    stitch: StitchMode,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct MetricsArgs {
    /// Reference raster; its band named SWIR (or its last band) is used.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Test raster; its first band is used.
    #[arg(long)]
    test: PathBuf,
    /// Report path; also writes `<out>.json` and `<out>.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    tol: f64,
    #[arg(long, default_value_t = 32)]
    patch: usize,
    #[arg(long)]
    ref_band: Option<usize>,
    #[arg(long, default_value_t = 0)]
    test_band: usize,
}

#[derive(Args)]
struct ToaArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Output base path; writes `<out>.f32` and `<out>.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompositeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Band indices for the red, green and blue channels, e.g. `2,1,0`.
    #[arg(long, value_parser = parse_triplet)]
    bands: [usize; 3],
    #[arg(long)]
    out: PathBuf,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(a)?, p(b)?))
}

fn parse_triplet(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected three comma-separated indices, got {s:?}"))
}

fn parse_stitch(s: &str) -> std::result::Result<StitchMode, String> {
    s.parse().map_err(|e: deepswir::Error| e.to_string())
}

/// Resolved configuration written next to every output and echoed to
/// stderr.
#[derive(Serialize)]
struct RunRecord<'a, T: Serialize> {
    command: &'a str,
    config: &'a T,
}

fn record_run<T: Serialize>(command: &str, config: &T, output: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&RunRecord { command, config })? + "\n";
    eprint!("{text}");
    let path = with_extension(output, "run.json");
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn suffixed(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gen(a: GenArgs) -> Result<()> {
    let mut cfg: SceneConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SceneConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some((h, w)) = a.size {
        cfg.height = h;
        cfg.width = w;
    }
    if let Some(k) = a.materials {
        let table = default_endmembers();
        if !(2..=table.len()).contains(&k) {
            bail!("--materials must lie in 2..={} for the built-in table", table.len());
        }
        cfg.endmembers = table[..k].to_vec();
    }
    if let Some(s) = a.scale {
        cfg.scale_factor = s;
    }
    if let Some(n) = a.noise {
        cfg.noise_sigma = n;
    }
    if let Some(s) = a.sharpness {
        cfg.sharpness = s;
    }
    if let Some(b) = a.blur {
        cfg.blur_radius = b;
    }
    record_run("gen", &cfg, &a.out)?;
    let scene = generate_scene(&cfg)?;
    write_raster(&scene.hr, suffixed(&a.out, "_hr"))?;
    write_raster(&scene.lr, suffixed(&a.out, "_lr"))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainRun {
    model: ModelConfig,
    train: TrainConfig,
    crops: usize,
    data: Vec<PathBuf>,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            crops: 5000,
            data: Vec::new(),
        }
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut run: TrainRun = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainRun::default(),
    };
    run.data = a.data.clone();
    if let Some(s) = a.seed {
        run.train.seed = s;
        run.model.init_seed = s;
    }
    let t = &mut run.train;
    let set = |dst: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut run.model.num_res_blocks, a.blocks);
    set(&mut run.model.feature_size, a.features);
    set(&mut t.max_epochs, a.epochs);
    set(&mut t.patience, a.patience);
    set(&mut t.patch_size, a.patch);
    set(&mut t.batch_size, a.batch);
    set(&mut t.threads, a.threads);
    set(&mut run.crops, a.crops);
    if a.normalize {
        run.model.normalize = true;
    }
    if let Some(lr) = a.lr {
        t.lr0 = lr;
    }
    run.model.validate()?;
    run.train.validate()?;
    record_run("train", &run, &a.out)?;

    let tiles = run
        .data
        .iter()
        .map(|p| read_raster(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let t = &run.train;
    let ds = sample_patch_dataset(&tiles, run.crops, t.patch_size, t.val_fraction, t.seed)?;
    let model = build_model(&run.model)?;
    let outcome = train_with(model, &ds, t, |e| {
        eprintln!(
            "epoch {} train_mae={:.4} val_rmse={:.4} lr={:e}",
            e.epoch, e.train_mae, e.val_rmse, e.lr
        )
    })?;
    save_checkpoint(&outcome.checkpoint, &a.out)?;
    let log = with_extension(&a.out, "log");
    std::fs::write(&log, outcome.report.to_log()).with_context(|| format!("writing {}", log.display()))?;
    eprintln!(
        "best val RMSE {:.4} at epoch {} ({:?})",
        outcome.report.best_val_rmse, outcome.report.best_epoch, outcome.report.stop_reason
    );
    Ok(())
}

#[derive(Serialize)]
struct SynthRun<'a> {
    model: &'a Path,
    input: &'a Path,
    patch: usize,
    stitch: StitchMode,
    threads: usize,
}

fn synth(a: SynthArgs) -> Result<()> {
    record_run(
        "synth",
        &SynthRun {
            model: &a.model,
            input: &a.input,
            patch: a.patch,
            stitch: a.stitch,
            threads: a.threads,
        },
        &a.out,
    )?;
    let model = load_checkpoint(&a.model)?.to_model()?;
    let src = read_raster(&a.input)?;
    if src.bands() < 3 {
        bail!("{} has {} bands, need G, R, NIR first", a.input.display(), src.bands());
    }
    let mut out = synthesize_tile(&model, &src.select_bands(&[0, 1, 2])?, a.patch, a.stitch, a.threads)?;
    // carry the SWIR radiometric constants over when the input has them
    if let Some(toa) = src.meta().toa.as_ref().filter(|t| t.l_sat.len() > 3) {
        let mut meta = out.meta().clone();
        meta.toa = Some(deepswir::ToaBlock {
            l_sat: vec![toa.l_sat[3]],
            esun: vec![toa.esun[3]],
            ..toa.clone()
        });
        out = deepswir::Raster::new(meta, out.data().to_vec())?;
    }
    write_raster(&out, &a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct MetricsRun<'a> {
    reference: &'a Path,
    test: &'a Path,
    ref_band: usize,
    test_band: usize,
    tol: f64,
    patch: usize,
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let r = read_raster(&a.reference)?;
    let t = read_raster(&a.test)?;
    let ref_band = a.ref_band.unwrap_or_else(|| {
        r.meta()
            .band_names
            .iter()
            .position(|n| n == "SWIR")
            .unwrap_or(r.bands() - 1)
    });
    if ref_band >= r.bands() || a.test_band >= t.bands() {
        bail!("band index out of range");
    }
    if (r.width(), r.height()) != (t.width(), t.height()) {
        bail!(
            "reference is {}×{}, test is {}×{}",
            r.height(),
            r.width(),
            t.height(),
            t.width()
        );
    }
    record_run(
        "metrics",
        &MetricsRun {
            reference: &a.reference,
            test: &a.test,
            ref_band,
            test_band: a.test_band,
            tol: a.tol,
            patch: a.patch,
        },
        &a.out,
    )?;
    let report = metrics_report(
        &band_f64(r.band(ref_band)),
        &band_f64(t.band(a.test_band)),
        r.width(),
        a.tol,
        a.patch,
    )?;
    let write = |path: PathBuf, text: String| {
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    };
    write(a.out.clone(), report.to_text())?;
    write(with_extension(&a.out, "json"), report.to_json())?;
    write(with_extension(&a.out, "csv"), report.histogram_csv())?;
    print!("{}", report.to_text());
    Ok(())
}

fn toa(a: ToaArgs) -> Result<()> {
    record_run("toa", &serde_json::json!({ "input": a.input }), &a.out)?;
    let r = read_raster(&a.input)?;
    let planes: Vec<Vec<f32>> = toa_raster(&r)?
        .into_iter()
        .map(|p| p.into_iter().map(|v| v as f32).collect())
        .collect();
    let meta = FloatManifest {
        width: r.width(),
        height: r.height(),
        bands: r.bands(),
        band_names: r.meta().band_names.clone(),
        quantity: "toa_reflectance".into(),
    };
    write_float_raster(&meta, &planes, &a.out)?;
    Ok(())
}

fn composite(a: CompositeArgs) -> Result<()> {
    record_run(
        "composite",
        &serde_json::json!({ "input": a.input, "bands": a.bands }),
        &a.out,
    )?;
    let r = read_raster(&a.input)?;
    write_composite(&r, a.bands, &a.out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Synth(a) => synth(a),
        Command::Metrics(a) => metrics(a),
        Command::Toa(a) => toa(a),
        Command::Composite(a) => composite(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
