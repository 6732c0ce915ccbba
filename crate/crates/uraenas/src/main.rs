//! Command-line driver: synthetic data generation, architecture search,
//! ensemble evaluation, corruption suites, report emission, and the
//! built-in verification suites.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage/config error,
//! 3 I/O or file-format failure.

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;
use uraenas::data::{build_corrupted_suite, load_dataset, load_suite, save_dataset, save_suite, synth_dataset, Split, SynthSpec};
use uraenas::metrics::{ece, ensemble_size_sweep, metric_triple, sweep_to_csv};
use uraenas::persistence::{
    hash_file, load_members, load_search, reliability_csv, save_members, save_search, Manifest,
    Report, ReportRow,
};
use uraenas::trainer::{eval_phase, prediction_set, search_phase, DataBundle, DataConfig, RunConfig};
use uraenas::verify::{run_suites, VerifyOptions};
use uraenas::{Error, Result};

#[derive(Parser)]
#[command(name = "uraenas", version, about = "Joint architecture-and-weight ensembling")]
struct Cli {
    /// Worker threads; falls back to URAENAS_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory (train/val/test).
    SynthData {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Training-split size.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        n_val: usize,
        #[arg(long, default_value_t = 0)]
        n_test: usize,
        #[arg(long, default_value_t = 16)]
        height: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 6.0)]
        noise: f64,
        /// Fraction of samples blended with a confuser class.
        #[arg(long, default_value_t = 0.0)]
        ambiguity: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the architecture search phase.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain from a search directory and emit ensemble members plus metrics.
    EvalEnsemble {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        search: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Corrupted-suite directory to also evaluate on.
        #[arg(long)]
        corrupted: Option<PathBuf>,
    },
    /// Build the 6-kind x 5-severity corrupted copy of a test split.
    Corrupt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Merge run metrics into one summary table (CSV) plus row-level JSON.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics as a function of ensemble size for one run.
    Sweep {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in oracle suites.
    Verify {
        #[arg(long, hide = true)]
        inject_gradient_bug: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| std::env::var("URAENAS_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        // a second global-pool build (e.g. in tests) is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli.cmd, threads.unwrap_or(0)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io(_) | Error::Format(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cmd: Cmd, threads: usize) -> Result<ExitCode> {
    match cmd {
        Cmd::SynthData { classes, n, n_val, n_test, height, width, noise, ambiguity, out, seed } => {
            synth_data(classes, n, n_val, n_test, height, width, noise, ambiguity, &out, seed, threads)
        }
        Cmd::Search { config, out } => search(&config, &out, threads),
        Cmd::EvalEnsemble { config, search, out, corrupted } => {
            eval_ensemble(&config, &search, &out, corrupted.as_deref(), threads)
        }
        Cmd::Corrupt { data, out, seed } => corrupt_cmd(&data, &out, seed, threads),
        Cmd::Report { runs, out } => report_cmd(&runs, &out, threads),
        Cmd::Sweep { run, sizes, out } => sweep_cmd(&run, &sizes, &out, threads),
        Cmd::Verify { inject_gradient_bug } => {
            let results = run_suites(&VerifyOptions { inject_gradient_bug });
            let mut all_ok = true;
            for r in &results {
                let tagline = if r.passed { "pass" } else { "FAIL" };
                println!("{tagline}  {}: {}", r.name, r.detail);
                all_ok &= r.passed;
            }
            println!("{} of {} suites passed", results.iter().filter(|r| r.passed).count(), results.len());
            Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

/// Strict config load; schema violations carry a JSON pointer to the
/// offending key.
fn load_run_config(path: &Path) -> Result<RunConfig> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut de = serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let pointer: String = e
            .path()
            .iter()
            .map(|seg| match seg {
                serde_path_to_error::Segment::Seq { index } => format!("/{index}"),
                serde_path_to_error::Segment::Map { key } => format!("/{key}"),
                serde_path_to_error::Segment::Enum { variant } => format!("/{variant}"),
                serde_path_to_error::Segment::Unknown => "/?".to_string(),
            })
            .collect();
        let pointer = if pointer.is_empty() { "/".to_string() } else { pointer };
        Error::Config(format!("{} at {pointer}: {}", path.display(), e.inner()))
    })
}

#[allow(clippy::too_many_arguments)]
fn synth_data(
    classes: usize,
    n: usize,
    n_val: usize,
    n_test: usize,
    height: usize,
    width: usize,
    noise: f64,
    ambiguity: f64,
    out: &Path,
    seed: u64,
    threads: usize,
) -> Result<ExitCode> {
    let t0 = Instant::now();
    let spec = SynthSpec { classes, height, width, channels: 3, noise, ambiguity };
    std::fs::create_dir_all(out)?;
    let mut manifest = Manifest::new(
        "synth-data",
        seed,
        threads,
        serde_json::json!({
            "spec": spec,
            "n_train": n, "n_val": n_val, "n_test": n_test, "seed": seed,
        }),
    );
    for (name, count, split) in
        [("train", n, Split::Train), ("val", n_val, Split::Val), ("test", n_test, Split::Test)]
    {
        let ds = synth_dataset(&spec, count, seed, split)?;
        let path = out.join(format!("{name}.bin"));
        save_dataset(&path, &ds)?;
        manifest.artifacts.insert(name.to_string(), path);
    }
    manifest.wall_clock_seconds = t0.elapsed().as_secs_f64();
    manifest.save(&out.join("manifest.json"))?;
    Ok(ExitCode::SUCCESS)
}

fn data_hashes(manifest: &mut Manifest, data: &DataConfig) -> Result<()> {
    if let DataConfig::Directory { path } = data {
        for name in ["train", "val", "test"] {
            let p = path.join(format!("{name}.bin"));
            manifest.input_hashes.insert(format!("data/{name}"), hash_file(&p)?);
        }
    }
    Ok(())
}

fn search(config: &Path, out: &Path, threads: usize) -> Result<ExitCode> {
    let t0 = Instant::now();
    let cfg = load_run_config(config)?;
    cfg.validate()?;
    let bundle = DataBundle::load(&cfg.data)?;
    let result = search_phase(&cfg, &bundle)?;
    std::fs::create_dir_all(out)?;
    save_search(out, &cfg, &result)?;
    let mut manifest = Manifest::new(
        "search",
        cfg.master_seed,
        threads,
        serde_json::to_value(&cfg).map_err(|e| Error::Format(format!("config: {e}")))?,
    );
    manifest.input_hashes.insert("config".into(), hash_file(config)?);
    data_hashes(&mut manifest, &cfg.data)?;
    for name in ["beta.json", "weights.bin", "loss.csv"] {
        manifest.artifacts.insert(name.into(), out.join(name));
    }
    manifest.wall_clock_seconds = t0.elapsed().as_secs_f64();
    manifest.save(&out.join("manifest.json"))?;
    Ok(ExitCode::SUCCESS)
}

fn eval_ensemble(
    config: &Path,
    search_dir: &Path,
    out: &Path,
    corrupted: Option<&Path>,
    threads: usize,
) -> Result<ExitCode> {
    let t0 = Instant::now();
    let cfg = load_run_config(config)?;
    cfg.validate()?;
    let bundle = DataBundle::load(&cfg.data)?;
    let search = load_search(search_dir)?;
    let members = eval_phase(&cfg, &search, &bundle)?;
    std::fs::create_dir_all(out)?;
    save_members(&out.join("members"), &members)?;

    let mut report = Report::default();
    let preds = prediction_set(&cfg, &members, &bundle.test)?;
    let all: Vec<usize> = (0..members.len()).collect();
    let ens = preds.ensemble_average(&all)?;
    let clean = metric_triple(&ens, bundle.test.classes, &bundle.test.labels)?;
    report.rows.push(ReportRow {
        variant: cfg.variant,
        dataset: "clean".into(),
        severity: 0,
        ensemble_size: members.len(),
        accuracy: clean.accuracy,
        ece: clean.ece,
        nll: clean.nll,
    });
    let (_, bins) = ece(&ens, bundle.test.classes, &bundle.test.labels)?;
    std::fs::write(out.join("reliability.csv"), reliability_csv(&bins))?;

    if let Some(dir) = corrupted {
        let suite = load_suite(dir)?;
        for ((kind, severity), mut ds) in suite {
            // corrupted copies score against the clean train statistics
            ds.stats = bundle.test.stats.clone();
            let preds = prediction_set(&cfg, &members, &ds)?;
            let ens = preds.ensemble_average(&all)?;
            let m = metric_triple(&ens, ds.classes, &ds.labels)?;
            report.rows.push(ReportRow {
                variant: cfg.variant,
                dataset: kind.name().into(),
                severity,
                ensemble_size: members.len(),
                accuracy: m.accuracy,
                ece: m.ece,
                nll: m.nll,
            });
        }
    }
    report.save(&out.join("metrics.json"))?;
    std::fs::write(out.join("metrics.csv"), report.to_csv())?;

    let mut manifest = Manifest::new(
        "eval-ensemble",
        cfg.master_seed,
        threads,
        serde_json::to_value(&cfg).map_err(|e| Error::Format(format!("config: {e}")))?,
    );
    manifest.input_hashes.insert("config".into(), hash_file(config)?);
    manifest.input_hashes.insert("search/beta".into(), hash_file(&search_dir.join("beta.json"))?);
    manifest
        .input_hashes
        .insert("search/weights".into(), hash_file(&search_dir.join("weights.bin"))?);
    data_hashes(&mut manifest, &cfg.data)?;
    for name in ["members", "metrics.json", "metrics.csv", "reliability.csv"] {
        manifest.artifacts.insert(name.into(), out.join(name));
    }
    manifest.wall_clock_seconds = t0.elapsed().as_secs_f64();
    manifest.save(&out.join("manifest.json"))?;
    Ok(ExitCode::SUCCESS)
}

fn corrupt_cmd(data: &Path, out: &Path, seed: u64, threads: usize) -> Result<ExitCode> {
    let t0 = Instant::now();
    let test = load_dataset(&data.join("test.bin"))?;
    let suite = build_corrupted_suite(&test, seed)?;
    save_suite(out, &suite)?;
    let mut manifest = Manifest::new(
        "corrupt",
        seed,
        threads,
        serde_json::json!({ "data": data, "seed": seed }),
    );
    manifest.input_hashes.insert("data/test".into(), hash_file(&data.join("test.bin"))?);
    manifest.artifacts.insert("suite".into(), out.to_path_buf());
    manifest.wall_clock_seconds = t0.elapsed().as_secs_f64();
    manifest.save(&out.join("manifest.json"))?;
    Ok(ExitCode::SUCCESS)
}

fn report_cmd(runs: &[PathBuf], out: &Path, threads: usize) -> Result<ExitCode> {
    let t0 = Instant::now();
    let mut merged = Report::default();
    let mut manifest = Manifest::new("report", 0, threads, serde_json::json!({ "runs": runs }));
    for run in runs {
        let metrics = run.join("metrics.json");
        manifest
            .input_hashes
            .insert(format!("runs/{}", run.display()), hash_file(&metrics)?);
        merged.rows.extend(Report::load(&metrics)?.rows);
    }
    std::fs::write(out, merged.summary_csv())?;
    let rows_path = out.with_extension("json");
    merged.save(&rows_path)?;
    manifest.artifacts.insert("summary".into(), out.to_path_buf());
    manifest.artifacts.insert("rows".into(), rows_path);
    manifest.wall_clock_seconds = t0.elapsed().as_secs_f64();
    manifest.save(&out.with_extension("manifest.json"))?;
    Ok(ExitCode::SUCCESS)
}

fn sweep_cmd(run: &Path, sizes: &[usize], out: &Path, threads: usize) -> Result<ExitCode> {
    let t0 = Instant::now();
    let run_manifest = Manifest::load(&run.join("manifest.json"))?;
    let cfg: RunConfig = serde_json::from_value(run_manifest.config.clone())
        .map_err(|e| Error::Config(format!("run manifest config: {e}")))?;
    let bundle = DataBundle::load(&cfg.data)?;
    let members = load_members(&run.join("members"))?;
    let preds = prediction_set(&cfg, &members, &bundle.test)?;
    let rows = ensemble_size_sweep(&preds, &bundle.test.labels, sizes, cfg.master_seed)?;
    std::fs::write(out, sweep_to_csv(&rows))?;
    let mut manifest = Manifest::new(
        "sweep",
        cfg.master_seed,
        threads,
        serde_json::json!({ "run": run, "sizes": sizes }),
    );
    manifest
        .input_hashes
        .insert("run/members".into(), hash_file(&run.join("members/members.json"))?);
    manifest.artifacts.insert("sweep".into(), out.to_path_buf());
    manifest.wall_clock_seconds = t0.elapsed().as_secs_f64();
    manifest.save(&out.with_extension("manifest.json"))?;
    Ok(ExitCode::SUCCESS)
}
