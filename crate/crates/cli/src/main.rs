//! `ren`: batch command-line front end for the region tokenization engine.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ren::aggregation::{aggregate, masks_from_groups, token_count_curve, MinGroup, PromptLayout, DEFAULT_MU};
use ren::data::rft::{read_rft, write_rft};
use ren::data::rtok::{read_rtok, write_rtok};
use ren::data::{render_scene, PatchFeatureMap, RegionMask, RgbImage};
use ren::eval::tasks::{held_out, object_retrieval, probe_segmentation, splits, DEFAULT_SUPERPIXELS};
use ren::eval::{bench, linear_r2, BenchReport, BenchSettings};
use ren::extension::{extend, PoolingHead};
use ren::model::{forward, init_params, load_checkpoint, save_checkpoint, RenConfig, RenParams};
use ren::prompting::{grid_prompts, slic_prompts, slic_segment, PromptSpec, SuperpixelMap, DEFAULT_ITERS};
use ren::train::{gradcheck, gradcheck_problem, train, LossWeights, TrainOutputs};
use ren::{Error, Result};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "ren", version, about = "Region tokens from patch feature maps")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON run configuration with optional `train` and `data` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override applied after the file, e.g. `train.lr=0.0005`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct AggregateArgs {
    /// Cosine threshold; 1 or above disables merging.
    #[arg(long, default_value_t = DEFAULT_MU)]
    mu: f32,
    /// Smallest group kept: `auto` or a count.
    #[arg(long, default_value = "auto", value_parser = parse_min_group)]
    min_group: MinGroup,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic scenes: scene JSON, RFT features and PPM image per scene.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of scenes (defaults to `data.n_scenes`).
        #[arg(long)]
        scenes: Option<usize>,
        /// Attach a random pooling head so the RFT can serve as an extension target.
        #[arg(long)]
        pooling_head: bool,
    },
    /// Train a model on synthetic scenes; writes model.renc and metrics.jsonl.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare analytic and finite-difference gradients on a small problem.
    Gradcheck,
    /// Run a model over an RFT file; writes tokens.rtok.
    Tokenize {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `grid:<G>` or `slic:<S>[:compactness]`.
        #[arg(long)]
        prompts: PromptSpec,
        /// RGB image (PPM or PNG) for SLIC prompts.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Merge similar tokens; writes aggregated.rtok and groups.json.
    Aggregate {
        #[arg(long)]
        tokens: PathBuf,
        #[command(flatten)]
        agg: AggregateArgs,
    },
    /// Aggregate SLIC-prompted tokens and write each group's mask to regions.json.
    ExportRegions {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        superpixels: PathBuf,
        #[command(flatten)]
        agg: AggregateArgs,
    },
    /// Pool region tokens out of a target encoder's RFT; writes extended.rtok.
    Extend {
        /// Target RFT carrying a pooling head.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        superpixels: PathBuf,
        #[command(flatten)]
        agg: AggregateArgs,
    },
    /// Linear-probe segmentation on held-out synthetic scenes; writes probe.json.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 40)]
        train_scenes: usize,
        #[arg(long, default_value_t = 20)]
        test_scenes: usize,
        #[arg(long, default_value_t = DEFAULT_SUPERPIXELS)]
        superpixels: usize,
    },
    /// Object retrieval on held-out synthetic scenes; writes retrieval.json.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 200)]
        database: usize,
        #[arg(long, default_value_t = 20)]
        queries: usize,
    },
    /// Time the forward pass over prompt counts; writes bench.json.
    Bench {
        #[arg(long)]
        features: PathBuf,
        /// Model to time; a seeded random model of default shape otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, default_value_t = 3)]
        warmups: usize,
        /// Skip the forward-plus-aggregation timing.
        #[arg(long)]
        no_aggregation: bool,
    },
    /// Group count at each threshold of `start:end:step`; writes sweep_mu.csv.
    SweepMu {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long, default_value = "0.875:0.975:0.025")]
        grid: String,
    },
}

fn parse_min_group(s: &str) -> std::result::Result<MinGroup, String> {
    if s == "auto" {
        return Ok(MinGroup::Auto);
    }
    s.parse().map(MinGroup::Fixed).map_err(|_| format!("expected `auto` or a count, got `{s}`"))
}

/// Inclusive threshold grid from `start:end:step`.
fn parse_mu_grid(s: &str) -> Result<Vec<f32>> {
    let bad = || Error::Usage(format!("bad mu grid `{s}`, expected start:end:step"));
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let [start, end, step] = parts[..] else {
        return Err(bad());
    };
    if !(step > 0.0) || !(end >= start) {
        return Err(bad());
    }
    let n = ((end - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|k| (start + k as f64 * step) as f32).collect())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 1,
        Error::Numerics { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Synth { cfg, scenes, pooling_head } => {
            let mut run = load_config(&cfg, cli.seed)?;
            if let Some(s) = cli.seed {
                run.data.seed = s;
            }
            synth(&run, scenes.unwrap_or(run.data.n_scenes), pooling_head, out)
        }
        Command::Train { cfg } => {
            let run = load_config(&cfg, cli.seed)?;
            write_json(&out.join("config.json"), &run)?;
            let outputs = TrainOutputs {
                metrics_log: Some(out.join("metrics.jsonl")),
                checkpoint_dir: (run.train.checkpoint_every > 0).then(|| out.join("checkpoints")),
            };
            let outcome = train(&run.train, &run.data, &outputs)?;
            save_checkpoint(out.join("model.renc"), &outcome.config, &outcome.params)?;
            if let (Some(first), Some(last)) = (outcome.metrics.first(), outcome.metrics.last()) {
                println!(
                    "steps {}  l_cont {:.4} -> {:.4}  l_feat {:.4} -> {:.4}  skipped {}",
                    outcome.metrics.len(),
                    first.l_cont,
                    last.l_cont,
                    first.l_feat,
                    last.l_feat,
                    outcome.skipped_steps.len()
                );
            }
            Ok(())
        }
        Command::Gradcheck => {
            let (config, sample, params) = gradcheck_problem(seed)?;
            let weights = LossWeights {
                lambda_attn: 1.0,
                ..LossWeights::default()
            };
            let report = gradcheck(&sample, &params, &config, &weights)?;
            write_json(&out.join("gradcheck.json"), &report)?;
            println!("max relative error {:.3e}", report.max_rel_err);
            if report.passed {
                Ok(())
            } else {
                let worst = report
                    .tensors
                    .iter()
                    .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
                    .map(|t| t.name.clone())
                    .unwrap_or_default();
                Err(Error::numerics(worst, format!("relative error {:.3e} above {:.0e}", report.max_rel_err, report.tolerance)))
            }
        }
        Command::Tokenize {
            features,
            checkpoint,
            prompts,
            image,
        } => tokenize(&features, &checkpoint, prompts, image.as_deref(), out),
        Command::Aggregate { tokens, agg } => {
            let t = read_rtok(&tokens)?;
            let result = aggregate(&t, agg.mu, agg.min_group)?;
            write_rtok(out.join("aggregated.rtok"), &result.to_token_set())?;
            write_json(&out.join("groups.json"), &result.report(false))?;
            println!("{} prompts -> {} groups", result.n_prompts, result.n_groups());
            Ok(())
        }
        Command::ExportRegions { tokens, superpixels, agg } => {
            let t = read_rtok(&tokens)?;
            let layout = read_layout(&superpixels)?;
            let result = aggregate(&t, agg.mu, agg.min_group)?;
            let masks = masks_from_groups(&layout, &result)?;
            #[derive(Serialize)]
            struct Regions {
                #[serde(flatten)]
                report: ren::aggregation::AggregationReport,
                masks: Vec<RegionMask>,
            }
            write_json(
                &out.join("regions.json"),
                &Regions {
                    report: result.report(true),
                    masks,
                },
            )
        }
        Command::Extend {
            target,
            tokens,
            superpixels,
            agg,
        } => {
            let target = read_rft(&target)?;
            let t = read_rtok(&tokens)?;
            let layout = read_layout(&superpixels)?;
            let result = aggregate(&t, agg.mu, agg.min_group)?;
            let extended = extend(&target, &layout, &result)?;
            write_rtok(out.join("extended.rtok"), &extended)
        }
        Command::Probe {
            checkpoint,
            cfg,
            train_scenes,
            test_scenes,
            superpixels,
        } => {
            let run = load_config(&cfg, None)?;
            let (config, params) = load_model(&checkpoint, &run)?;
            let tr = held_out(&run.data, splits::PROBE_TRAIN, train_scenes)?;
            let te = held_out(&run.data, splits::PROBE_TEST, test_scenes)?;
            let report = probe_segmentation(&tr, &te, run.data.n_classes + 1, superpixels, &params, &config)?;
            println!("mIoU ren {:.4} patch {:.4}", report.ren_miou, report.patch_miou);
            write_json(&out.join("probe.json"), &report)
        }
        Command::Retrieve {
            checkpoint,
            cfg,
            database,
            queries,
        } => {
            let run = load_config(&cfg, None)?;
            let (config, params) = load_model(&checkpoint, &run)?;
            let db = held_out(&run.data, splits::RETRIEVAL_DB, database)?;
            let q = held_out(&run.data, splits::RETRIEVAL_QUERY, queries)?;
            let report = object_retrieval(&db, &q, &params, &config, seed)?;
            println!("mAP ren {:.4} baseline {:.4}", report.ren.map, report.baseline.map);
            write_json(&out.join("retrieval.json"), &report)
        }
        Command::Bench {
            features,
            checkpoint,
            counts,
            runs,
            warmups,
            no_aggregation,
        } => {
            let map = read_rft(&features)?;
            let (config, params) = match checkpoint {
                Some(p) => load_checkpoint(p)?,
                None => {
                    let config = ren::train::TrainConfig::default().model_config(map.dim);
                    let params = init_params(seed, &config)?;
                    (config, params)
                }
            };
            let settings = BenchSettings {
                runs,
                warmups,
                with_aggregation: !no_aggregation,
                seed,
            };
            let reports = bench(&map, &counts, &params, &config, &settings)?;
            #[derive(Serialize)]
            struct BenchOut {
                reports: Vec<BenchReport>,
                forward_r2: Option<f64>,
            }
            let ok: Vec<&BenchReport> = reports.iter().filter(|r| r.error.is_none()).collect();
            let forward_r2 = (ok.len() >= 2).then(|| {
                let xs: Vec<f64> = ok.iter().map(|r| r.prompts as f64).collect();
                let ys: Vec<f64> = ok.iter().map(|r| r.forward.mean_s).collect();
                linear_r2(&xs, &ys)
            });
            for r in &reports {
                match &r.error {
                    None => println!("{:>6} prompts  {:.4} s  {:.0} tokens/s", r.prompts, r.forward.mean_s, r.tokens_per_s),
                    Some(e) => println!("{:>6} prompts  failed: {e}", r.prompts),
                }
            }
            write_json(&out.join("bench.json"), &BenchOut { reports, forward_r2 })
        }
        Command::SweepMu { tokens, grid } => {
            let mus = parse_mu_grid(&grid)?;
            let t = read_rtok(&tokens)?;
            let curve = token_count_curve(&t, &mus)?;
            let mut csv = String::from("mu,tokens\n");
            for (mu, n) in curve {
                csv.push_str(&format!("{mu},{n}\n"));
            }
            write_bytes(&out.join("sweep_mu.csv"), csv.as_bytes())
        }
    }
}

fn load_config(args: &ConfigArgs, seed: Option<u64>) -> Result<RunConfig> {
    let mut run = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    if let Some(s) = seed {
        run.train.seed = s;
    }
    Ok(run)
}

fn load_model(path: &Path, run: &RunConfig) -> Result<(RenConfig, RenParams<f32>)> {
    let (config, params) = load_checkpoint(path)?;
    if config.encoder_dim != run.data.dim {
        return Err(Error::Config(format!(
            "model expects {}-d features, data config produces {}",
            config.encoder_dim, run.data.dim
        )));
    }
    Ok((config, params))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

fn read_layout(path: &Path) -> Result<PromptLayout> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(PromptLayout::from_superpixels(SuperpixelMap::from_json(&text)?))
}

fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(RgbImage {
        width: w,
        height: h,
        data: img.pixels().map(|p| p.0).collect(),
    })
}

fn tokenize(features: &Path, checkpoint: &Path, spec: PromptSpec, image: Option<&Path>, out: &Path) -> Result<()> {
    let map = read_rft(features)?;
    let (config, params) = load_checkpoint(checkpoint)?;
    let prompts = match spec {
        PromptSpec::Grid { g } => grid_prompts(g)?,
        PromptSpec::Slic { s, compactness } => {
            let path = image.ok_or_else(|| Error::Usage("slic prompts need --image".into()))?;
            let rgb = read_image(path)?;
            check_image(&map, &rgb)?;
            let superpixels = slic_segment(&rgb, s, compactness, DEFAULT_ITERS)?;
            write_bytes(&out.join("superpixels.json"), superpixels.to_json()?.as_bytes())?;
            slic_prompts(&superpixels)
        }
    };
    let mut tokens = forward(&map, &prompts, &params, &config)?;
    let name = features.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    tokens.source = format!("{name} {spec}");
    write_rtok(out.join("tokens.rtok"), &tokens)?;
    println!("{} tokens", tokens.len());
    Ok(())
}

fn check_image(map: &PatchFeatureMap, rgb: &RgbImage) -> Result<()> {
    if rgb.width != map.image_w || rgb.height != map.image_h {
        return Err(Error::Validation(format!(
            "image is {}x{}, feature map describes {}x{}",
            rgb.width, rgb.height, map.image_w, map.image_h
        )));
    }
    Ok(())
}

fn synth(run: &RunConfig, n: usize, pooling_head: bool, out: &Path) -> Result<()> {
    let data = &run.data;
    let mut files = Vec::with_capacity(n);
    for i in 0..n {
        let scene = data.scene(0, i)?;
        let view = render_scene(&scene, data.patch_grid, data.patch_grid, data.noise_sigma)?;
        let mut features = view.features;
        if pooling_head {
            features.pooling_head = Some(PoolingHead::random(scene.seed, data.dim, head_count(data.dim))?);
        }
        let stem = format!("scene_{i:04}");
        write_bytes(&out.join(format!("{stem}.json")), scene.to_json()?.as_bytes())?;
        write_rft(out.join(format!("{stem}.rft")), &features)?;
        write_bytes(&out.join(format!("{stem}.ppm")), &view.rgb.to_ppm())?;
        files.push(stem);
    }
    #[derive(Serialize)]
    struct Manifest<'a> {
        data: &'a ren::train::DataConfig,
        scenes: Vec<String>,
    }
    write_json(&out.join("manifest.json"), &Manifest { data, scenes: files })?;
    println!("{n} scenes");
    Ok(())
}

/// Largest of 8, 4, 2, 1 that divides `dim`.
fn head_count(dim: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|h| dim % h == 0).unwrap_or(1)
}
