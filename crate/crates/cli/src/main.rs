mod run_config;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use pipa::data::{load_dataset, save_dataset, Dataset};
use pipa::engine::{
    arms_for, evaluate, load_checkpoint, load_inference_params, metrics_line, run_ablation, save_checkpoint,
    train_step, BenchmarkData, EvalReport, TrainData, TrainState, METRICS_HEADER,
};
use pipa::gradsuite::{run_suite, SUITE_EPS, SUITE_TOL};
use pipa::losses::Scenario;

use run_config::{usage, RunConfig, UsageError};

#[derive(Parser)]
#[command(name = "pipa", version, about = "Multi-grained contrastive self-training for domain-adaptive segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Static,
    Video,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Static => Scenario::Static,
            ScenarioArg::Video => Scenario::Video,
        }
    }
}

#[derive(clap::Args)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "static")]
    scenario: ScenarioArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    n_source: usize,
    #[arg(long, default_value_t = 200)]
    n_target: usize,
    #[arg(long, default_value_t = 100)]
    n_eval: usize,
    /// Clips per split (video).
    #[arg(long, default_value_t = 12)]
    clips: usize,
    /// Frames per clip (video).
    #[arg(long, default_value_t = 20)]
    clip_len: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

impl DataArgs {
    fn benchmark(&self) -> BenchmarkData {
        let mut b = BenchmarkData {
            n_source: self.n_source,
            n_target: self.n_target,
            n_eval: self.n_eval,
            n_clips: self.clips,
            clip_len: self.clip_len,
            ..BenchmarkData::default()
        };
        b.scene.height = self.size;
        b.scene.width = self.size;
        b
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset on disk.
    GenData {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, writing metrics, eval reports and checkpoints to the output dir.
    Train {
        /// `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one key, e.g. `--set alpha=0`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the target eval split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report file; defaults to `<checkpoint>.eval.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate the EMA teacher instead of the student.
        #[arg(long)]
        teacher: bool,
    },
    /// Finite-difference check of every op and loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the toggle grid over seeds and print a comparison table. The
    /// `--scenario` flag selects both the grid and the generated data.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Shared dataset for every seed; otherwise one is generated per seed.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        gen: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { data, out } => gen_data(&data, &out),
        Command::Train {
            config,
            overrides,
            data,
            out,
            resume,
        } => train(config.as_deref(), &overrides, data, out, resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            out,
            teacher,
        } => eval(&checkpoint, &data, out, teacher),
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::Ablate {
            config,
            overrides,
            seeds,
            data,
            gen,
            out,
        } => ablate(config.as_deref(), &overrides, &seeds, data.as_deref(), &gen, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.chain().any(|c| {
                c.is::<UsageError>() || matches!(c.downcast_ref::<pipa::Error>(), Some(pipa::Error::Config(_)))
            });
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}

fn gen_data(args: &DataArgs, out: &Path) -> Result<()> {
    let ds = args.benchmark().generate(args.scenario.into(), args.seed)?;
    save_dataset(out, &ds)?;
    let source = ds.source_train().len();
    let target = ds.target_train().len();
    let eval = ds.target_eval().len();
    println!("wrote {} samples to {}", ds.entries.len(), out.display());
    println!("source train {source}, target train {target}, target eval {eval}");
    if matches!(args.scenario, ScenarioArg::Video) {
        println!("clips per split {}, frames per clip {}", args.clips, args.clip_len);
    }
    Ok(())
}

fn load(dir: &Path) -> Result<Dataset> {
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn append_eval(metrics: &mut fs::File, report: &EvalReport) -> Result<()> {
    metrics.write_all(report.to_csv().as_bytes())?;
    Ok(())
}

fn train(
    config: Option<&Path>,
    overrides: &[String],
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    resume: Option<&Path>,
) -> Result<()> {
    let mut run = RunConfig::resolve(config, overrides)?;
    if let Some(d) = data {
        run.data_dir = d;
    }
    if let Some(o) = out {
        run.out_dir = o;
    }
    let cfg = run.train.clone();
    let ds = load(&run.data_dir)?;
    let data = TrainData::new(&ds, cfg.scenario)?;
    let eval_set = ds.target_eval();
    fs::create_dir_all(&run.out_dir).with_context(|| format!("creating {}", run.out_dir.display()))?;
    fs::write(run.out_dir.join("config.txt"), run.to_text())?;

    let mut state = match resume {
        Some(p) => load_checkpoint(p, &cfg).with_context(|| format!("resuming from {}", p.display()))?,
        None => TrainState::new(cfg.clone())?,
    };
    let metrics_path = run.out_dir.join("metrics.csv");
    let mut metrics = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    if metrics.metadata()?.len() == 0 {
        writeln!(metrics, "{METRICS_HEADER}")?;
    }

    let started = Instant::now();
    while state.iter < cfg.total_iters {
        let lr = state.lr();
        let report = train_step(&mut state, &data).with_context(|| format!("step {}", state.iter))?;
        let it = state.iter;
        if it % run.log_interval == 0 || it == cfg.total_iters {
            writeln!(metrics, "{}", metrics_line(it, lr, &report))?;
            eprintln!(
                "iter {it:>6}  total {:.4}  ce_s {:.4}  ce_t {:.4}  {:.1}s",
                report.total,
                report.ce_source,
                report.ce_target,
                started.elapsed().as_secs_f64()
            );
        }
        if run.eval_interval > 0 && it % run.eval_interval == 0 && it != cfg.total_iters {
            let r = evaluate(state.eval_params(), &eval_set, cfg.num_classes, it)?;
            append_eval(&mut metrics, &r)?;
            eprintln!("iter {it:>6}  mIoU {:.2}", 100.0 * r.miou);
        }
        if run.checkpoint_interval > 0 && it % run.checkpoint_interval == 0 {
            save_checkpoint(&run.out_dir.join(format!("checkpoint_{it}.bin")), &state)?;
        }
    }
    let r = evaluate(state.eval_params(), &eval_set, cfg.num_classes, state.iter)?;
    append_eval(&mut metrics, &r)?;
    let ckpt = run.checkpoint_path();
    save_checkpoint(&ckpt, &state).with_context(|| format!("writing {}", ckpt.display()))?;
    print!("{}", r.to_table());
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, out: Option<PathBuf>, teacher: bool) -> Result<()> {
    let (cfg, params) =
        load_inference_params(checkpoint, teacher).with_context(|| format!("reading {}", checkpoint.display()))?;
    let ds = load(data)?;
    let samples = ds.target_eval();
    if samples.is_empty() {
        return Err(usage(format!("{} has no target eval samples", data.display())));
    }
    let report = evaluate(&params, &samples, cfg.num_classes, 0)?;
    print!("{}", report.to_table());
    let out = out.unwrap_or_else(|| {
        let mut p = checkpoint.as_os_str().to_owned();
        p.push(".eval.csv");
        PathBuf::from(p)
    });
    fs::write(&out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn gradcheck(seed: u64) -> Result<()> {
    let started = Instant::now();
    let cases = run_suite(seed)?;
    let mut failed = Vec::new();
    for c in &cases {
        let ok = c.report.passed();
        println!(
            "{:<40} {:>10.3e} {:>6} {}",
            c.name,
            c.report.max_rel_err,
            c.report.checked,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failed.push(c.name);
        }
    }
    println!(
        "{} cases, eps {SUITE_EPS:e}, tol {SUITE_TOL:e}, {:.2}s",
        cases.len(),
        started.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        anyhow::bail!("gradient check failed: {}", failed.join(", "))
    }
}

fn ablate(
    config: Option<&Path>,
    overrides: &[String],
    seeds: &[u64],
    data: Option<&Path>,
    gen: &DataArgs,
    out: Option<&Path>,
) -> Result<()> {
    let mut base = RunConfig::resolve(config, overrides)?.train;
    base.scenario = gen.scenario.into();
    let shared = data.map(load).transpose()?;
    let bench = gen.benchmark();
    let started = Instant::now();
    let table = run_ablation(
        &base,
        &arms_for(base.scenario),
        seeds,
        |seed| match &shared {
            Some(ds) => Ok(ds.clone()),
            None => bench.generate(base.scenario, seed),
        },
        |arm, seed, r| {
            eprintln!(
                "{arm:<18} seed {seed}  mIoU {:6.2}  {:.0}s",
                100.0 * r.miou,
                started.elapsed().as_secs_f64()
            )
        },
    )?;
    print!("{}", table.to_table());
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation.csv"), table.to_csv())?;
        fs::write(dir.join("ablation.txt"), table.to_table())?;
        fs::write(dir.join("config.txt"), base.to_text())?;
    }
    Ok(())
}
