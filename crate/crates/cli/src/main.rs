use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use trilearn::checkpoint::{write_atomic, Checkpoint};
use trilearn::config::WorkbenchConfig;
use trilearn::cut::{load_image_dir, train_translator, CutModel};
use trilearn::dataset::{generate, prepare_out_dir, read_dataset, write_dataset};
use trilearn::embed::EmbedConfig;
use trilearn::manifest::{RunManifest, RunStatus};
use trilearn::metrics::rank_checkpoints;
use trilearn::pipeline::{figure_tables, score_checkpoints, scores_csv, train_feature_net, RunLog};
use trilearn::policy::{
    eval_seeds, evaluate, plan_experiment, read_train_log, run_dir, run_experiment, ExperimentReport, InputConfig, Observer, PolicyNet,
    TaskEnv, Variant,
};
use trilearn::rngs;

#[derive(Parser)]
#[command(name = "trilearn", version, about = "Tissue triangulation workbench")]
struct Cli {
    /// Configuration file; full-protocol defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Scale factor for policy runs and step budgets.
    #[arg(long, global = true)]
    scale: Option<f64>,
    /// Validate inputs and write the manifest without doing any work.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render source and stylized target frames.
    GenDataset(GenDataset),
    /// Train the contrastive translator on a dataset.
    TrainTranslator(TrainTranslator),
    /// Score every translator checkpoint and keep the best by rank sum.
    SelectTranslator(SelectTranslator),
    /// Train and evaluate policies for the configured variants.
    TrainPolicy(TrainPolicy),
    /// Evaluate one saved policy checkpoint.
    Evaluate(Evaluate),
    /// Emit curve and aggregate tables for a policy experiment.
    Report(Report),
    /// Print the effective configuration.
    PrintConfig {
        /// Start from the desk-scale preset instead of the full protocol.
        #[arg(long)]
        desk: bool,
    },
}

#[derive(Args)]
struct GenDataset {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count_source: Option<usize>,
    #[arg(long)]
    count_target: Option<usize>,
}

#[derive(Args)]
struct TrainTranslator {
    /// Directory with `source/` and `target/` PGM frames.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectTranslator {
    /// Dataset written by gen-dataset (frames and labels.csv).
    #[arg(long)]
    data: PathBuf,
    /// Directory holding the translator checkpoints.
    #[arg(long)]
    translator: PathBuf,
}

#[derive(Args)]
struct TrainPolicy {
    #[arg(long)]
    out: PathBuf,
    /// Translator checkpoint, required by the translated and embedded variants.
    #[arg(long)]
    translator_ckpt: Option<PathBuf>,
    /// Comma-separated variants, overriding the configuration.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<Variant>,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    variant: Variant,
    #[arg(long)]
    translator_ckpt: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Report {
    /// Output directory of train-policy.
    #[arg(long)]
    experiment: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// A required input is absent; reported with exit code 2.
#[derive(Debug)]
struct MissingInput(String);

impl std::fmt::Display for MissingInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "missing input: {}", self.0)
    }
}

impl std::error::Error for MissingInput {}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(MissingInput(path.display().to_string()).into());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<MissingInput>().is_some() {
        return 2;
    }
    match err.downcast_ref::<trilearn::Error>() {
        Some(trilearn::Error::Config(_) | trilearn::Error::Contract(_) | trilearn::Error::Format(_)) => 2,
        Some(trilearn::Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

struct Ctx {
    cfg: WorkbenchConfig,
    config_text: String,
    dry_run: bool,
    force: bool,
}

impl Ctx {
    fn load(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => {
                require(p)?;
                WorkbenchConfig::load(p)?
            }
            None => WorkbenchConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(s) = cli.scale {
            cfg.pipeline.scale = s;
        }
        cfg.validate()?;
        let config_text = cfg.to_text()?;
        Ok(Self {
            cfg,
            config_text,
            dry_run: cli.dry_run,
            force: cli.force,
        })
    }

    /// Writes the opening manifest into `dir`, runs `work` unless this is a
    /// dry run, then records the outcome and hashes everything under `dir`.
    fn run(&self, name: &str, dir: &Path, work: impl FnOnce() -> Result<()>) -> Result<()> {
        self.run_planned(name, dir, None, work)
    }

    fn run_planned(&self, name: &str, dir: &Path, planned: Option<usize>, work: impl FnOnce() -> Result<()>) -> Result<()> {
        let args = std::env::args().collect();
        let mut m = RunManifest::new(name, args, &self.config_text, self.cfg.seed);
        m.planned_models = planned;
        m.write(dir)?;
        if self.dry_run {
            m.finalize(dir, dir, RunStatus::DryRun, None)?;
            return Ok(());
        }
        match work() {
            Ok(()) => {
                m.finalize(dir, dir, RunStatus::Ok, None)?;
                Ok(())
            }
            Err(e) => {
                m.finalize(dir, dir, RunStatus::Failed, Some(format!("{e:#}")))?;
                Err(e)
            }
        }
    }
}

fn load_translator(ctx: &Ctx, path: &Path) -> Result<Arc<CutModel>> {
    let ck = Checkpoint::load(path)?;
    Ok(Arc::new(CutModel::from_checkpoint(&ctx.cfg.pipeline.cut, &ck)?))
}

fn input_for(ctx: &Ctx, variant: Variant, translator: Option<&Arc<CutModel>>) -> Result<InputConfig> {
    let need = |v: Variant| -> Result<Arc<CutModel>> {
        translator
            .cloned()
            .ok_or_else(|| MissingInput(format!("variant {v} needs --translator-ckpt")).into())
    };
    Ok(match variant {
        Variant::Original => InputConfig::original(),
        Variant::Translated => InputConfig::translated(need(variant)?),
        Variant::Embedded => InputConfig::embedded(
            need(variant)?,
            EmbedConfig {
                seed: ctx.cfg.seed,
                ..ctx.cfg.pipeline.embed
            },
        ),
    })
}

fn gen_dataset(ctx: &mut Ctx, a: &GenDataset) -> Result<()> {
    let ds_cfg = &mut ctx.cfg.pipeline.dataset;
    if let Some(n) = a.count_source {
        ds_cfg.count_source = n;
    }
    if let Some(n) = a.count_target {
        ds_cfg.count_target = n;
    }
    ctx.cfg.validate()?;
    ctx.config_text = ctx.cfg.to_text()?;
    prepare_out_dir(&a.out, ctx.force)?;
    ctx.run("gen-dataset", &a.out, || {
        let ds = generate(&ctx.cfg.pipeline.sim, &ctx.cfg.pipeline.dataset, ctx.cfg.seed)?;
        write_dataset(&ds, &a.out)?;
        println!("{} source and {} target frames in {}", ds.source.len(), ds.target.len(), a.out.display());
        Ok(())
    })
}

fn train_translator_cmd(ctx: &Ctx, a: &TrainTranslator) -> Result<()> {
    require(&a.data.join("source"))?;
    require(&a.data.join("target"))?;
    prepare_out_dir(&a.out, ctx.force)?;
    ctx.run("train-translator", &a.out, || {
        let source = load_image_dir(&a.data.join("source"))?;
        let target = load_image_dir(&a.data.join("target"))?;
        let mut rng = rngs::stream(ctx.cfg.seed, "translator");
        let run = train_translator(&source, &target, &ctx.cfg.pipeline.cut, &mut rng, &a.out)?;
        println!("{} checkpoints in {}", run.checkpoints.len(), a.out.display());
        Ok(())
    })
}

fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = e?.path();
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(epoch) = name.strip_prefix("ckpt_epoch").and_then(|r| r.strip_suffix(".cutb")) {
            out.push((epoch.parse()?, p));
        }
    }
    out.sort();
    Ok(out)
}

fn select_translator(ctx: &Ctx, a: &SelectTranslator) -> Result<()> {
    require(&a.data.join("labels.csv"))?;
    require(&a.translator)?;
    let checkpoints = list_checkpoints(&a.translator)?;
    if checkpoints.is_empty() {
        return Err(MissingInput(a.translator.join("ckpt_epoch*.cutb").display().to_string()).into());
    }
    ctx.run("select-translator", &a.translator, || {
        let p = &ctx.cfg.pipeline;
        let ds = read_dataset(&a.data)?;
        let net = train_feature_net(&ds, p.dataset.image_size, &p.select, ctx.cfg.seed)?;
        let scores = score_checkpoints(&checkpoints, &p.cut, &ds, &net, &p.select)?;
        let ranked = rank_checkpoints(&scores)?;
        write_atomic(&a.translator.join("scores.csv"), scores_csv(&ranked, p.select.top_n).as_bytes())?;
        let best = ranked[0].score.epoch;
        let path = &checkpoints.iter().find(|(e, _)| *e == best).unwrap().1;
        write_atomic(&a.translator.join("selected.txt"), format!("{}\n", path.display()).as_bytes())?;
        println!("selected epoch {best}: {}", path.display());
        Ok(())
    })
}

fn train_policy(ctx: &Ctx, a: &TrainPolicy) -> Result<()> {
    let variants = if a.variants.is_empty() { ctx.cfg.pipeline.variants.clone() } else { a.variants.clone() };
    let translator = match &a.translator_ckpt {
        Some(p) => {
            require(p)?;
            Some(load_translator(ctx, p)?)
        }
        None => None,
    };
    let inputs = variants
        .iter()
        .map(|&v| input_for(ctx, v, translator.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    for i in &inputs {
        i.validate()?;
    }
    let p = &ctx.cfg.pipeline;
    let plan = plan_experiment(&p.train, &variants, p.scale, ctx.cfg.seed)?;
    prepare_out_dir(&a.out, ctx.force)?;
    ctx.run_planned("train-policy", &a.out, Some(plan.evaluated_models()), || {
        let report = run_experiment(&p.train, &p.sim, &inputs, p.dataset.image_size, p.scale, ctx.cfg.seed, Some(&a.out))?;
        for s in &report.summary {
            println!(
                "{}: median best success {:.2}, median steps {:.2}",
                s.variant, s.median_best_success, s.median_best_steps
            );
        }
        Ok(())
    })
}

fn evaluate_cmd(ctx: &Ctx, a: &Evaluate) -> Result<()> {
    require(&a.policy)?;
    let translator = match &a.translator_ckpt {
        Some(p) => {
            require(p)?;
            Some(load_translator(ctx, p)?)
        }
        None => None,
    };
    let input = input_for(ctx, a.variant, translator.as_ref())?;
    input.validate()?;
    std::fs::create_dir_all(&a.out)?;
    ctx.run("evaluate", &a.out, || {
        let p = &ctx.cfg.pipeline;
        let observer = Observer::new(input, p.dataset.image_size)?;
        let mut rng = rngs::stream(ctx.cfg.seed, "policy");
        let mut policy = PolicyNet::for_observer(&observer, &p.sim, p.train.init_log_std, &mut rng)?;
        Checkpoint::load(&a.policy)?.restore_into(&mut policy.store)?;
        let mut env = TaskEnv::new(&p.sim, &observer, &p.train)?;
        let n = a.episodes.unwrap_or(p.train.test_episodes);
        let res = evaluate(&policy, &mut env, &eval_seeds(ctx.cfg.seed, n))?;
        let json = serde_json::to_string_pretty(&res)?;
        write_atomic(&a.out.join("evaluation.json"), json.as_bytes())?;
        println!(
            "success {:.2}, mean steps {:.2}{}, mean reward {:.3}",
            res.success_rate,
            res.mean_steps,
            if res.no_success { " (no success)" } else { "" },
            res.mean_reward
        );
        Ok(())
    })
}

fn report_cmd(ctx: &Ctx, a: &Report) -> Result<()> {
    let report_path = a.experiment.join("report.json");
    require(&report_path)?;
    let report: ExperimentReport = serde_json::from_str(&std::fs::read_to_string(&report_path)?)?;
    let mut logs = Vec::new();
    for r in &report.runs {
        let path = run_dir(&a.experiment, r.variant, r.run).join("train_log.csv");
        require(&path)?;
        logs.push(RunLog {
            variant: r.variant,
            run: r.run,
            rows: read_train_log(&path)?,
        });
    }
    std::fs::create_dir_all(&a.out)?;
    ctx.run("report", &a.out, || {
        for (name, body) in figure_tables(&report, &logs, ctx.cfg.pipeline.lowess_frac)? {
            write_atomic(&a.out.join(name), body.as_bytes())?;
        }
        println!("tables written to {}", a.out.display());
        Ok(())
    })
}

fn dispatch(cli: &Cli) -> Result<()> {
    let mut ctx = Ctx::load(cli)?;
    match &cli.command {
        Command::GenDataset(a) => gen_dataset(&mut ctx, a),
        Command::TrainTranslator(a) => train_translator_cmd(&ctx, a),
        Command::SelectTranslator(a) => select_translator(&ctx, a),
        Command::TrainPolicy(a) => train_policy(&ctx, a),
        Command::Evaluate(a) => evaluate_cmd(&ctx, a),
        Command::Report(a) => report_cmd(&ctx, a),
        Command::PrintConfig { desk } => {
            if *desk && cli.config.is_none() {
                let mut cfg = WorkbenchConfig::desk();
                cfg.seed = ctx.cfg.seed;
                if let Some(s) = cli.scale {
                    cfg.pipeline.scale = s;
                }
                print!("{}", cfg.to_text()?);
            } else {
                print!("{}", ctx.config_text);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
