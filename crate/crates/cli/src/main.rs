#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rankmixer::data::generate_dataset;
use rankmixer::model::checkpoint;
use rankmixer::train::{ablate, bayes_auc, metrics_csv, scaling_sweep, train, SweepAxis};
use rankmixer::{CostReport, Dataset, ExperimentConfig, RoutingVariant, TrainSetup};

/// Token-mixing ranking model: training, scaling sweeps, ablations and cost reports.
///
/// Settings resolve as command-line flag, then config file, then built-in default.
#[derive(Parser)]
#[command(name = "rankmixer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes metrics.csv, checkpoint.bin and train.log.
    Train(Common),
    /// Train a grid along one axis over every seed; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Axis to vary: T, D, L or params-matched.
        #[arg(long, default_value = "D")]
        axis: String,
        /// Comma-separated axis values; for params-matched, the parameter factor.
        #[arg(long, value_delimiter = ',', default_values_t = [16usize, 32, 64])]
        values: Vec<usize>,
    },
    /// Baseline versus each `--toggle`, every seed; writes ablation.csv.
    Ablate(Common),
    /// Parameter, FLOP and latency estimates for the configured layout; writes cost.csv.
    Cost(Common),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the configured training seeds with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Concurrent runs for sweep and ablate.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// no-mixing, no-residual, no-ln or shared-ffn; repeatable.
    #[arg(long)]
    toggle: Vec<String>,
    /// token-mixing, all-concat-mlp or all-share.
    #[arg(long)]
    routing: Option<String>,
}

impl Common {
    /// Loads the config file (or defaults) and applies flag overrides.
    /// `toggles_apply` is false for `ablate`, where toggles name the variants.
    fn resolve(&self, toggles_apply: bool) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => rankmixer::parse_config(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            c.train.seeds = vec![s];
        }
        if let Some(n) = self.steps {
            c.train.steps = n;
        }
        if let Some(o) = &self.out {
            c.output.dir = o.display().to_string();
        }
        if let Some(r) = &self.routing {
            c.model.routing = r.parse::<RoutingVariant>()?;
        }
        if toggles_apply {
            for t in &self.toggle {
                c.model.toggles = c.model.toggles.with(t)?;
            }
        } else {
            for t in &self.toggle {
                c.model.toggles.with(t)?;
            }
        }
        c.validate()?;
        if self.jobs == 0 {
            bail!("--jobs must be >= 1");
        }
        Ok(c)
    }
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

struct Run {
    dir: PathBuf,
    log: String,
    started: Instant,
}

impl Run {
    /// Creates the output directory and writes the resolved config echo.
    fn start(cmd: &str, c: &ExperimentConfig) -> Result<Self> {
        let dir = PathBuf::from(&c.output.dir);
        fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        write(&dir.join("config.toml"), &c.to_toml()?)?;
        let log = format!("# rankmixer {cmd} started at unix time {}\n", unix_time());
        Ok(Run { dir, log, started: Instant::now() })
    }

    fn note(&mut self, line: impl AsRef<str>) {
        let line = line.as_ref();
        eprintln!("{line}");
        self.log.push_str(line);
        self.log.push('\n');
    }

    fn artifact(&self, name: &str, body: &str) -> Result<()> {
        write(&self.dir.join(name), body)
    }

    fn finish(mut self, log_name: &str) -> Result<()> {
        let secs = self.started.elapsed().as_secs_f64();
        self.note(format!("done in {secs:.1}s"));
        write(&self.dir.join(log_name), &self.log)
    }
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn dataset(c: &ExperimentConfig) -> Result<Dataset> {
    generate_dataset(&c.schema, &c.data).context("data")
}

fn setup(c: &ExperimentConfig) -> TrainSetup<'_> {
    TrainSetup { schema: &c.schema, model: &c.model, moe: c.moe.as_ref(), train: &c.train }
}

fn run_train(common: &Common) -> Result<()> {
    let c = common.resolve(true)?;
    let mut run = Run::start("train", &c)?;
    let ds = dataset(&c)?;
    let (_, held_out) = ds.split(c.train.eval_fraction);
    for task in &c.model.tasks {
        if let Ok(b) = bayes_auc(&ds.truth, held_out, task) {
            run.note(format!("bayes auc {task} {b:.6}"));
        }
    }
    let seed = c.train.seeds[0];
    if c.train.seeds.len() > 1 {
        run.note(format!("train uses the first configured seed ({seed})"));
    }
    let out = train(&setup(&c), &ds, c.train.steps, seed).context("train")?;
    for m in &out.metrics {
        let auc = m.auc.map_or("-".into(), |a| format!("{a:.6}"));
        run.note(format!("step {} {} auc {auc} logloss {:.6}", m.step, m.task, m.logloss));
    }
    run.artifact("metrics.csv", &metrics_csv(&out.metrics))?;
    checkpoint::save(&run.dir.join("checkpoint.bin"), &out.model, Some(&out.embeddings)).context("checkpoint")?;
    if let Some(u) = &out.utilization {
        run.artifact("utilization.csv", &u.to_csv())?;
        run.note(format!("active ratio {:.6} dying fraction {:.6}", u.mean_active_ratio(), u.dying_fraction(0.01)));
    }
    let mut losses = String::from("step,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        let _ = writeln!(losses, "{},{}", i + 1, rankmixer::fmt_float(*l));
    }
    run.artifact("losses.csv", &losses)?;
    run.finish("train.log")
}

fn run_sweep(common: &Common, axis: &str, values: &[usize]) -> Result<()> {
    let c = common.resolve(true)?;
    let axis: SweepAxis = axis.parse()?;
    let points = axis.grid(&c.model, values).context("sweep")?;
    let mut run = Run::start("sweep", &c)?;
    let ds = dataset(&c)?;
    let report = scaling_sweep(&setup(&c), &ds, axis, &points, &c.train.seeds, common.jobs);
    run.artifact("sweep.csv", &report.to_csv())?;
    for (p, m) in report.median_auc() {
        run.note(format!("T={} D={} L={} median auc {m:.6}", p.tokens, p.dim, p.layers));
    }
    if let Some(msg) = &report.aborted {
        run.note(format!("aborted: {msg}"));
        run.finish("sweep.log")?;
        bail!("sweep aborted: {msg}");
    }
    run.finish("sweep.log")
}

fn run_ablate(common: &Common) -> Result<()> {
    let c = common.resolve(false)?;
    let mut run = Run::start("ablate", &c)?;
    let ds = dataset(&c)?;
    let report = ablate(&setup(&c), &ds, &common.toggle, &c.train.seeds, common.jobs).context("ablate")?;
    run.artifact("ablation.csv", &report.to_csv())?;
    for r in &report.rows {
        run.note(format!("{} {} auc {:.6} delta {:+.6}", r.variant, r.task, r.auc, r.delta_auc));
    }
    run.finish("ablate.log")
}

fn run_cost(common: &Common) -> Result<()> {
    let c = common.resolve(true)?;
    let report =
        CostReport::build(&c.model, c.moe.as_ref(), c.schema.total_width(), &c.cost).context("cost")?;
    let run = Run::start("cost", &c)?;
    run.artifact("cost.csv", &report.to_csv())?;
    print!("{report}");
    run.finish("cost.log")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => run_train(c),
        Command::Sweep { common, axis, values } => run_sweep(common, axis, values),
        Command::Ablate(c) => run_ablate(c),
        Command::Cost(c) => run_cost(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
