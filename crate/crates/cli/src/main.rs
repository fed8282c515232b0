//! `uninet` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad flags or an invalid
//! combination of them.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use uninet::attacks::{AttackConfig, DagConfig};
use uninet::losses::LossSelector;
use uninet::metrics::Metric;
use uninet::model::Checkpoint;
use uninet::report::write_report;
use uninet::runner::{self, AttackSpec, Campaign, CampaignCell, HideConfig, HideHead, RunConfig};
use uninet::scenegen::{render_dataset_from, Dataset, SceneSpec};
use uninet::TaskSet;

/// Marks errors caused by the invocation rather than by the run.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "uninet", version, about = "Multi-task scene network: data, training, evaluation and attacks")]
struct Cli {
    /// Root that relative paths are resolved against.
    #[arg(long, global = true, env = "UNINET_LAB_DIR")]
    lab_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset.
    Gen(GenArgs),
    /// Train a model on a task subset.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Run an attack campaign against a checkpoint.
    Attack(AttackArgs),
    /// Build plots and tables from a campaign directory.
    Report(ReportArgs),
    /// Run a pipeline of stages from a JSON file.
    Recipe(RecipeArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Scene generator spec (JSON); defaults to the built-in spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Index of the first scene, for disjoint splits.
    #[arg(long, default_value_t = 0)]
    first_index: u64,
}

fn parse_tasks(s: &str) -> std::result::Result<TaskSet, String> {
    TaskSet::parse_list(s).map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Comma-separated subset of od,ss,is,d,id.
    #[arg(long, value_parser = parse_tasks)]
    tasks: Option<TaskSet>,
    #[arg(long)]
    out: PathBuf,
    /// Run config (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_samples: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Metrics CSV; defaults to `metrics.csv` next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Tasks to report; those the checkpoint lacks are reported as absent.
    #[arg(long, value_parser = parse_tasks)]
    tasks: Option<TaskSet>,
    #[arg(long)]
    limit: Option<usize>,
    /// Run name in the CSV.
    #[arg(long, default_value = "eval")]
    name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AttackKind {
    Pgd,
    Dag,
    Hide,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum HeadArg {
    Seg,
    Depth,
    Both,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    attack: AttackKind,
    /// PGD objectives, comma-separated (mtl, semantic, geometric or a loss name).
    #[arg(long, value_delimiter = ',')]
    loss: Vec<String>,
    /// Budgets on the 0-255 scale, comma-separated.
    #[arg(long, value_delimiter = ',')]
    eps: Vec<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Class pair to swap, `c1:c2`.
    #[arg(long)]
    swap: Option<String>,
    /// Class to hide.
    #[arg(long)]
    class: Option<String>,
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long, default_value_t = 0)]
    save_examples: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    campaign: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RecipeArgs {
    file: PathBuf,
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct Recipe {
    schema_version: u32,
    name: String,
    stages: Vec<RecipeStage>,
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct RecipeStage {
    stage: String,
    #[serde(default)]
    args: Vec<String>,
}

const RECIPE_VERSION: u32 = 1;

struct Ctx {
    lab: Option<PathBuf>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        match &self.lab {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }
}

fn cmd_gen(ctx: &Ctx, a: &GenArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let p = ctx.path(p);
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<SceneSpec>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SceneSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let out = ctx.path(&a.out);
    let manifest = render_dataset_from(&spec, a.first_index, a.count, &out)?;
    println!("wrote {} samples to {}", manifest.samples.len(), out.display());
    Ok(())
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(&ctx.path(p))?,
        None => RunConfig::default(),
    };
    cfg.train_data = ctx.path(&a.data);
    cfg.val_data = a.val.as_ref().map(|p| ctx.path(p)).or(cfg.val_data);
    cfg.out_dir = ctx.path(&a.out);
    if let Some(t) = a.tasks {
        cfg.tasks = t;
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => { $(if let Some(v) = a.$flag { cfg.$field = v; })* };
    }
    set!(epochs => epochs, lr => learning_rate, batch_size => batch_size, seed => seed, eval_every => eval_every);
    if a.max_samples.is_some() {
        cfg.max_samples = a.max_samples;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let outcome = runner::train(&cfg)?;
    if let (Some(first), Some(last)) = (outcome.curve.first(), outcome.curve.last()) {
        println!("mtl {:.4} -> {:.4} over {} epochs", first.mtl, last.mtl, outcome.curve.len());
    }
    println!("checkpoint: {}", cfg.out_dir.join("model.ckpt").display());
    Ok(())
}

fn load_samples(ctx: &Ctx, data: &Path, limit: Option<usize>) -> Result<(Dataset, Vec<uninet::scenegen::Sample>)> {
    let ds = Dataset::open(ctx.path(data))?;
    let mut samples = ds.load_all()?;
    if let Some(n) = limit {
        samples.truncate(n);
    }
    Ok((ds, samples))
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let ckpt_path = ctx.path(&a.checkpoint);
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let (ds, samples) = load_samples(ctx, &a.data, a.limit)?;
    let mut eval_ckpt = ckpt.clone();
    let requested = a.tasks.unwrap_or(ckpt.tasks);
    let present: Vec<_> = requested.iter().filter(|t| ckpt.tasks.contains(*t)).collect();
    if !present.is_empty() {
        eval_ckpt.tasks = TaskSet::new(&present)?;
    }
    let mut report = if present.is_empty() {
        Default::default()
    } else {
        runner::evaluate(&eval_ckpt, ds.spec(), &samples, &RunConfig::default().decode)?
    };
    report.num_samples = samples.len();
    for m in Metric::ALL {
        if requested.contains(m.task()) && !ckpt.tasks.contains(m.task()) {
            report.values.insert(m, None);
        }
    }
    let out = a.out.as_ref().map(|p| ctx.path(p)).unwrap_or_else(|| ckpt_path.with_file_name("metrics.csv"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&out, report.to_csv_string(&a.name)?).with_context(|| format!("writing {}", out.display()))?;
    for (m, v) in &report.values {
        match v {
            Some(v) => println!("{:<14} {v:.4}", m.name()),
            None => println!("{:<14} -", m.name()),
        }
    }
    println!("metrics: {}", out.display());
    Ok(())
}

fn thing_index(spec: &SceneSpec, name: &str) -> Result<usize> {
    spec.thing_index(name).ok_or_else(|| usage(format!("unknown object class '{name}'")))
}

fn build_cells(a: &AttackArgs, spec: &SceneSpec) -> Result<Vec<CampaignCell>> {
    let pgd_only = |flag: &str, used: bool| if used && a.attack != AttackKind::Pgd { Err(usage(format!("{flag} only applies to --attack pgd"))) } else { Ok(()) };
    pgd_only("--loss", !a.loss.is_empty())?;
    if a.swap.is_some() && a.attack != AttackKind::Dag {
        return Err(usage("--swap only applies to --attack dag"));
    }
    if (a.class.is_some() || a.head.is_some()) && a.attack != AttackKind::Hide {
        return Err(usage("--class and --head only apply to --attack hide"));
    }
    if a.attack == AttackKind::Dag && (a.alpha.is_some() || a.eps.len() > 1) {
        return Err(usage("--attack dag takes at most one --eps and no --alpha"));
    }
    let fmt_eps = |e: f64| format!("{e}").replace('.', "p");
    let mut cells = Vec::new();
    match a.attack {
        AttackKind::Pgd => {
            let losses = if a.loss.is_empty() { vec!["mtl".to_string()] } else { a.loss.clone() };
            let eps = if a.eps.is_empty() { vec![1.0] } else { a.eps.clone() };
            for l in &losses {
                let sel: LossSelector = l.parse().map_err(|e: uninet::Error| usage(e.to_string()))?;
                for &e in &eps {
                    let cfg = AttackConfig { epsilon: e, alpha: a.alpha.unwrap_or(1.0), iterations: a.iters, loss: sel };
                    cfg.validate().map_err(|e| usage(e.to_string()))?;
                    cells.push(CampaignCell { name: format!("pgd_{sel}_eps{}", fmt_eps(e)), attack: AttackSpec::Pgd(cfg) });
                }
            }
        }
        AttackKind::Dag => {
            let swap = a.swap.as_deref().ok_or_else(|| usage("--attack dag needs --swap c1:c2"))?;
            let (c1, c2) = swap.split_once(':').ok_or_else(|| usage("--swap expects c1:c2"))?;
            let (i1, i2) = (thing_index(spec, c1)?, thing_index(spec, c2)?);
            if i1 == i2 {
                return Err(usage("--swap needs two different classes"));
            }
            let mut cfg = DagConfig::new(i1, i2);
            if let Some(n) = a.iters {
                cfg.max_iters = n;
            }
            cfg.epsilon = a.eps.first().copied();
            cells.push(CampaignCell { name: format!("dag_{c1}_{c2}"), attack: AttackSpec::Dag(cfg) });
        }
        AttackKind::Hide => {
            let name = a.class.as_deref().ok_or_else(|| usage("--attack hide needs --class"))?;
            let class = spec.class_names().iter().position(|n| n == name).ok_or_else(|| usage(format!("unknown class '{name}'")))?;
            let heads = match a.head.unwrap_or(HeadArg::Both) {
                HeadArg::Seg => vec![HideHead::Seg],
                HeadArg::Depth => vec![HideHead::Depth],
                HeadArg::Both => vec![HideHead::Seg, HideHead::Depth],
            };
            for &e in if a.eps.is_empty() { &[2.0][..] } else { &a.eps[..] } {
                for &head in &heads {
                    let mut cfg = HideConfig::new(class, head);
                    cfg.epsilon = e;
                    cfg.alpha = a.alpha.unwrap_or(1.0);
                    cfg.iterations = a.iters;
                    let tag = if head == HideHead::Seg { "seg" } else { "depth" };
                    cells.push(CampaignCell { name: format!("hide_{name}_{tag}_eps{}", fmt_eps(e)), attack: AttackSpec::Hide(cfg) });
                }
            }
        }
    }
    Ok(cells)
}

fn cmd_attack(ctx: &Ctx, a: &AttackArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&ctx.path(&a.checkpoint))?;
    let (ds, samples) = load_samples(ctx, &a.data, a.limit)?;
    let cells = build_cells(a, ds.spec())?;
    let campaign = Campaign { cells, jobs: a.jobs, save_examples: a.save_examples, ..Default::default() };
    let out = ctx.path(&a.out);
    let result = runner::run_campaign(&ckpt, ds.spec(), &samples, &campaign, Some(&out))?;
    fs::write(out.join("scene.json"), serde_json::to_vec_pretty(ds.spec())?)?;
    write_report(&out, Some(ds.spec()), &out)?;
    let mut failed = 0;
    for cell in &result.cells {
        match &cell.report {
            Ok(_) => println!("cell {}: ok", cell.name),
            Err(e) => {
                failed += 1;
                println!("cell {}: FAILED ({e})", cell.name);
            }
        }
    }
    println!("campaign: {}", out.display());
    if failed > 0 {
        bail!("{failed} campaign cell(s) failed");
    }
    Ok(())
}

fn cmd_report(ctx: &Ctx, a: &ReportArgs) -> Result<()> {
    let dir = ctx.path(&a.campaign);
    let scene_path = dir.join("scene.json");
    let scene: Option<SceneSpec> = if scene_path.exists() {
        let text = fs::read_to_string(&scene_path)?;
        Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", scene_path.display()))?)
    } else {
        None
    };
    let out = a.out.as_ref().map(|p| ctx.path(p)).unwrap_or_else(|| dir.clone());
    for p in write_report(&dir, scene.as_ref(), &out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_recipe(ctx: &Ctx, a: &RecipeArgs) -> Result<()> {
    let path = ctx.path(&a.file);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let recipe: Recipe = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if recipe.schema_version != RECIPE_VERSION {
        return Err(usage(format!("recipe schema {} (expected {RECIPE_VERSION})", recipe.schema_version)));
    }
    const STAGES: [&str; 5] = ["gen", "train", "eval", "attack", "report"];
    // parse every stage before running any
    let mut commands = Vec::new();
    for (i, st) in recipe.stages.iter().enumerate() {
        if !STAGES.contains(&st.stage.as_str()) {
            return Err(usage(format!("stage {i}: unknown stage '{}'", st.stage)));
        }
        let argv = std::iter::once("uninet".to_string()).chain(std::iter::once(st.stage.clone())).chain(st.args.iter().cloned());
        let cli = Cli::try_parse_from(argv).map_err(|e| usage(format!("stage {i} ({}): {e}", st.stage)))?;
        commands.push(cli.command);
    }
    for (i, c) in commands.iter().enumerate() {
        println!("[{}] stage {i}", recipe.name);
        run(ctx, c)?;
    }
    Ok(())
}

fn run(ctx: &Ctx, c: &Command) -> Result<()> {
    match c {
        Command::Gen(a) => cmd_gen(ctx, a),
        Command::Train(a) => cmd_train(ctx, a),
        Command::Eval(a) => cmd_eval(ctx, a),
        Command::Attack(a) => cmd_attack(ctx, a),
        Command::Report(a) => cmd_report(ctx, a),
        Command::Recipe(a) => cmd_recipe(ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let ctx = Ctx { lab: cli.lab_dir.clone() };
    match run(&ctx, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
