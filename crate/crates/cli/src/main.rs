use std::io::{IsTerminal, Read as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use bevlift_core::check::{run_suite, Hooks};
use bevlift_core::io::{
    align, eval_table, read_scene, to_json, write_json, write_scene, DetectionSet, Manifest,
    ManifestEntry, SampleBoxes, FORMAT_VERSION,
};
use bevlift_core::metrics::{evaluate, Indicators};
use bevlift_core::pipeline::Pipeline;
use bevlift_core::rng::stream_rng;
use bevlift_core::scenegen::generate_scene;
use bevlift_core::view_transform::{random_cloud, splat_naive, splat_sorted};
use bevlift_core::{EvalResult, PipelineConfig, SceneSample};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const MANIFEST: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "bevlift", version, about = "Synthetic multi-camera BEV detection toolkit")]
struct Cli {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory (meaning depends on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes and a manifest into the --out directory.
    Gen {
        #[arg(short = 'n', long, default_value_t = 10)]
        samples: u64,
    },
    /// Run the pipeline on scene files or directories; writes detections.
    Infer {
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
    },
    /// Evaluate detections against ground truth.
    Eval {
        /// Detection file.
        #[arg(long, required_unless_present = "nds_only")]
        preds: Option<PathBuf>,
        /// Detection file or scene directory holding the ground truth.
        #[arg(long, required_unless_present = "nds_only")]
        gts: Option<PathBuf>,
        /// Compute NDS from precomputed indicators: a JSON object or array,
        /// read from this file or `-` for stdin.
        #[arg(long, value_name = "INDICATORS", conflicts_with_all = ["preds", "gts"])]
        nds_only: Option<String>,
    },
    /// Time the two pooling kernels.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "100,10000,1000000")]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 64)]
        channels: usize,
    },
    /// Run the seeded invariant suite.
    Check {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, hide = true)]
        corrupt_unprojection: bool,
    },
}

struct Style {
    color: bool,
}

impl Style {
    fn detect() -> Self {
        let no_color = std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty());
        Self {
            color: !no_color && std::io::stdout().is_terminal(),
        }
    }

    fn status(&self, ok: bool) -> String {
        match (ok, self.color) {
            (true, true) => "\x1b[32mPASS\x1b[0m".into(),
            (false, true) => "\x1b[31mFAIL\x1b[0m".into(),
            (true, false) => "PASS".into(),
            (false, false) => "FAIL".into(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let style = Style::detect();
    match cli.command {
        Command::Gen { samples } => cmd_gen(&cfg, samples, cli.out.as_deref()),
        Command::Infer { scenes } => cmd_infer(&cfg, &scenes, cli.out.as_deref()),
        Command::Eval {
            preds,
            gts,
            nds_only,
        } => match nds_only {
            Some(src) => cmd_nds_only(&src, cli.out.as_deref()),
            None => cmd_eval(&cfg, preds.as_deref().unwrap(), gts.as_deref().unwrap(), cli.out.as_deref()),
        },
        Command::Bench {
            counts,
            repeats,
            channels,
        } => cmd_bench(&cfg, &counts, repeats, channels, cli.out.as_deref()),
        Command::Check { trials, corrupt_unprojection } => cmd_check(&cfg, trials, corrupt_unprojection, cli.out.as_deref(), &style),
    }
}

fn cmd_gen(cfg: &PipelineConfig, n: u64, out: Option<&Path>) -> Result<ExitCode> {
    let dir = out.context("gen needs --out DIR")?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let entries = (0..n)
        .into_par_iter()
        .map(|i| {
            let scene = generate_scene(&cfg.scene, cfg.seed, i)?;
            let name = format!("{}.json", scene.sample_id);
            let sha256 = write_scene(&dir.join(&name), &scene)?;
            Ok(ManifestEntry {
                sample_id: scene.sample_id,
                path: name,
                sha256,
            })
        })
        .collect::<bevlift_core::Result<Vec<_>>>()?;
    let manifest = Manifest::new("gen", cfg.hash(), cfg.seed, entries);
    let hash = write_json(&dir.join(MANIFEST), &manifest)?;
    println!("wrote {n} scenes to {}", dir.display());
    println!("manifest sha256 {hash}");
    Ok(ExitCode::SUCCESS)
}

/// Scene files named by `paths`; directories contribute their manifest entries.
fn scene_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let m = Manifest::read(&p.join(MANIFEST))?;
            files.extend(m.entries.iter().map(|e| p.join(&e.path)));
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn load_scenes(paths: &[PathBuf]) -> Result<Vec<SceneSample>> {
    let files = scene_files(paths)?;
    let mut scenes = files
        .par_iter()
        .map(|f| read_scene(f).with_context(|| format!("reading {}", f.display())))
        .collect::<Result<Vec<_>>>()?;
    scenes.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    if let Some(w) = scenes.windows(2).find(|w| w[0].sample_id == w[1].sample_id) {
        bail!("duplicate sample id {}", w[0].sample_id);
    }
    Ok(scenes)
}

fn cmd_infer(cfg: &PipelineConfig, scenes: &[PathBuf], out: Option<&Path>) -> Result<ExitCode> {
    let out = out.context("infer needs --out FILE")?;
    let pipeline = Pipeline::new(cfg)?;
    let scenes = load_scenes(scenes)?;
    let samples = scenes
        .par_iter()
        .map(|s| {
            Ok(SampleBoxes {
                sample_id: s.sample_id.clone(),
                boxes: pipeline.infer(s)?,
            })
        })
        .collect::<bevlift_core::Result<Vec<_>>>()?;
    let total: usize = samples.iter().map(|s| s.boxes.len()).sum();
    let mut set = DetectionSet::new(samples);
    set.config_hash = Some(cfg.hash());
    let hash = set.write(out)?;
    println!("{total} detections over {} samples -> {}", scenes.len(), out.display());
    println!("sha256 {hash}");
    Ok(ExitCode::SUCCESS)
}

fn ground_truth(path: &Path) -> Result<DetectionSet> {
    if path.is_dir() {
        let scenes = load_scenes(&[path.to_path_buf()])?;
        Ok(DetectionSet::new(
            scenes
                .into_iter()
                .map(|s| SampleBoxes {
                    sample_id: s.sample_id,
                    boxes: s.boxes,
                })
                .collect(),
        ))
    } else {
        Ok(DetectionSet::read(path)?)
    }
}

#[derive(Serialize)]
struct EvalFile<'a> {
    format_version: u32,
    config_hash: String,
    result: &'a EvalResult,
}

fn cmd_eval(cfg: &PipelineConfig, preds: &Path, gts: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let p = DetectionSet::read(preds).with_context(|| format!("reading {}", preds.display()))?;
    let g = ground_truth(gts).with_context(|| format!("reading {}", gts.display()))?;
    let (pv, gv) = match align(&p, &g) {
        Ok(v) => v,
        Err(m) => {
            eprintln!("error: sample ids do not align");
            for id in &m.missing_in_preds {
                eprintln!("  missing from predictions: {id}");
            }
            for id in &m.missing_in_gts {
                eprintln!("  missing from ground truth: {id}");
            }
            return Ok(ExitCode::FAILURE);
        }
    };
    let result = evaluate(&pv, &gv, &cfg.metrics)?;
    let table = eval_table(&result);
    print!("{table}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_json(
            &dir.join("eval.json"),
            &EvalFile {
                format_version: FORMAT_VERSION,
                config_hash: cfg.hash(),
                result: &result,
            },
        )?;
        let path = dir.join("eval.txt");
        std::fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum IndicatorInput {
    One(Indicators),
    Many(Vec<Indicators>),
}

#[derive(Serialize)]
struct NdsRow {
    #[serde(flatten)]
    indicators: Indicators,
    nds: f64,
}

fn cmd_nds_only(src: &str, out: Option<&Path>) -> Result<ExitCode> {
    let text = if src == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s).context("reading stdin")?;
        s
    } else {
        std::fs::read_to_string(src).with_context(|| format!("reading {src}"))?
    };
    let input: IndicatorInput = serde_json::from_str(&text).context("parsing indicators")?;
    let row = |i: Indicators| -> Result<NdsRow> {
        i.validate()?;
        Ok(NdsRow {
            nds: i.nds(),
            indicators: i,
        })
    };
    let json = match input {
        IndicatorInput::One(i) => to_json(&row(i)?)?,
        IndicatorInput::Many(v) => to_json(&v.into_iter().map(row).collect::<Result<Vec<_>>>()?)?,
    };
    println!("{json}");
    if let Some(path) = out {
        std::fs::write(path, format!("{json}\n")).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct BenchRow {
    kernel: &'static str,
    count: usize,
    nanoseconds: u128,
    max_error: f64,
}

#[derive(Serialize)]
struct BenchReport {
    format_version: u32,
    config_hash: String,
    seed: u64,
    channels: usize,
    rows: Vec<BenchRow>,
    speedup: Vec<(usize, f64)>,
    naive_time_monotone: bool,
}

fn best_of<T>(repeats: usize, mut f: impl FnMut() -> T) -> (T, u128) {
    let mut best = u128::MAX;
    let mut out = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let v = f();
        best = best.min(t.elapsed().as_nanos());
        out = Some(v);
    }
    (out.expect("at least one repeat"), best)
}

fn cmd_bench(
    cfg: &PipelineConfig,
    counts: &[usize],
    repeats: usize,
    channels: usize,
    out: Option<&Path>,
) -> Result<ExitCode> {
    if counts.is_empty() || counts.contains(&0) {
        bail!("point counts must be at least 1");
    }
    if channels == 0 {
        bail!("--channels must be at least 1");
    }
    let grid = cfg.grid()?;
    let mut rows = Vec::new();
    let mut speedup = Vec::new();
    println!("{:>10} {:>8} {:>14} {:>12}", "count", "kernel", "ns", "max_error");
    for &n in counts {
        let mut rng = stream_rng(cfg.seed, "bench", &[n as u64]);
        let cloud = random_cloud(&mut rng, n, channels, &grid);
        let (naive, t_naive) = best_of(repeats, || splat_naive(&cloud, &grid));
        let (sorted, t_sorted) = best_of(repeats, || splat_sorted(&cloud, &grid));
        let err = naive
            .data()
            .iter()
            .zip(sorted.data())
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        for (kernel, ns) in [("naive", t_naive), ("sorted", t_sorted)] {
            println!("{n:>10} {kernel:>8} {ns:>14} {err:>12.3e}");
            rows.push(BenchRow {
                kernel,
                count: n,
                nanoseconds: ns,
                max_error: err,
            });
        }
        speedup.push((n, t_naive as f64 / t_sorted.max(1) as f64));
    }
    for (n, r) in &speedup {
        println!("speedup at {n}: {r:.2}x");
    }
    let mut by_count: Vec<(usize, u128)> = rows.iter().filter(|r| r.kernel == "naive").map(|r| (r.count, r.nanoseconds)).collect();
    by_count.sort_unstable();
    let monotone = by_count.windows(2).all(|w| w[0].1 <= w[1].1);
    if !monotone {
        eprintln!("warning: naive kernel time is not monotone in point count");
    }
    let worst = rows.iter().map(|r| r.max_error).fold(0.0, f64::max);
    let report = BenchReport {
        format_version: FORMAT_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        channels,
        rows,
        speedup,
        naive_time_monotone: monotone,
    };
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    if worst >= 1e-6 {
        eprintln!("error: kernels disagree (max relative error {worst:e})");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_check(cfg: &PipelineConfig, trials: usize, corrupt_unprojection: bool, out: Option<&Path>, style: &Style) -> Result<ExitCode> {
    let hooks = Hooks { corrupt_unprojection };
    let report = run_suite(cfg, cfg.seed, trials, hooks)?;
    for inv in &report.invariants {
        println!(
            "{} {:<40} {}/{} trials",
            style.status(inv.failures.is_empty()),
            inv.name,
            inv.trials - inv.failures.len(),
            inv.trials
        );
        for f in &inv.failures {
            println!("    seed {}: {}", f.seed, f.message);
        }
    }
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    let failed = report.invariants.iter().filter(|i| !i.failures.is_empty()).count();
    println!("{} invariants, {failed} failing", report.invariants.len());
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
