//! Command-line front end: teacher training, robust pretraining, full
//! adaptation runs, evaluation, Lipschitz probing, disparity probing,
//! brute-force verification of the bound inequalities, hyperparameter
//! sweeps, and figure rendering.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use tarot::attack::{derive_seed, PerturbationBudget};
use tarot::data::DomainTag;
use tarot::disparity::disparity_report;
use tarot::eval::LipschitzSearch;
use tarot::exp::{
    config_hash, default_config, emit_plots, median, parse_attack_spec, realize_domain,
    resolve_out_root, run_config, sweep, ExperimentConfig, RunManifest, SweepIndex, SweepParam,
    OUT_ROOT_ENV,
};
use tarot::model::{Head, MlpScorer};
use tarot::theory::{run_suite, InstanceSizes};
use tarot::train::pretrain_robust;

#[derive(Parser)]
#[command(
    name = "tarot",
    version,
    about = "Robust unsupervised domain adaptation at desk scale",
    after_help = format!(
        "Output root resolution: --out flag, then the config's out_dir, then \
         ${OUT_ROOT_ENV}, then ./tarot-out."
    )
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every run-like subcommand. CLI values override the
/// corresponding config-file fields.
#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; omitted means the built-in two-moons default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut config = match &self.config {
            Some(p) => ExperimentConfig::load(p)
                .with_context(|| format!("loading config {}", p.display()))?,
            None => default_config(),
        };
        if let Some(s) = self.seed {
            config.seeds = vec![s];
        }
        let out_root = resolve_out_root(self.out.as_deref(), &config);
        config.out_dir = Some(out_root.clone());
        Ok((config, out_root))
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the clean minimax teacher and save it.
    Teacher(RunArgs),
    /// Adversarially pretrain the feature extractor on the source domain.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Pretraining radius; defaults to the config's pretrain_epsilon,
        /// then to the training attack radius.
        #[arg(long)]
        eps_pre: Option<f64>,
    },
    /// Run the full pipeline for every seed: teacher, optional pretraining,
    /// method training, checkpoint selection, evaluation.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Recompute even if a finished run with this (config, seed) exists.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a saved model on the config's evaluation splits.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Model checkpoint JSON (e.g. a run directory's model.json).
        #[arg(long)]
        model: PathBuf,
        /// Restrict to one domain: source, target, or unseen.
        #[arg(long)]
        domain: Option<String>,
    },
    /// Estimate the model's local Lipschitz constant on target inputs.
    Lipschitz {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        model: PathBuf,
        /// Ball radius; defaults to the training attack radius.
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Disparity report between a saved model's two heads on target inputs.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        model: PathBuf,
        /// Attack radius; defaults to the training attack radius.
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Check the bound inequalities exactly on random finite instances.
    VerifyTheory {
        /// Number of random instances per proposition.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid over one hyperparameter, one run per (value, seed).
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// alpha, epsilon, or robust_pt.
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values, e.g. 0,0.05,0.1,0.5,1.0.
        #[arg(long)]
        values: String,
        /// Render figures after the runs finish.
        #[arg(long)]
        plot: bool,
        #[arg(long)]
        force: bool,
    },
    /// Render figures (SVG plus sibling CSV) from a finished sweep.
    Plot {
        /// Sweep directory containing sweep.json.
        #[arg(long)]
        sweep: PathBuf,
        /// Where to write the figures; defaults to <sweep>/plots.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_model(path: &Path) -> Result<MlpScorer> {
    MlpScorer::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn target_eval_inputs(
    config: &ExperimentConfig,
    seed: u64,
) -> Result<tarot::data::DomainDataset> {
    Ok(realize_domain(&config.target, DomainTag::Target, "eval", derive_seed(seed, &[21]))?)
}

fn first_seed(config: &ExperimentConfig) -> u64 {
    config.seeds.first().copied().unwrap_or(0)
}

fn cmd_teacher(args: &RunArgs) -> Result<()> {
    let (config, out_root) = args.resolve()?;
    let config = config.resolved()?;
    let hash = config_hash(&config)?;
    for &seed in &config.seeds {
        let source =
            realize_domain(&config.source, DomainTag::Source, "train", derive_seed(seed, &[10]))?;
        let target =
            realize_domain(&config.target, DomainTag::Target, "train", derive_seed(seed, &[11]))?;
        let state = tarot::exp::train_teacher(&config, &source, &target, seed)?;
        let path = out_root.join("teachers").join(format!("{}-s{seed}.json", &hash[..12]));
        std::fs::create_dir_all(path.parent().unwrap())?;
        state.model.save(&path, None)?;
        let last = state.metrics.last().expect("at least one epoch");
        println!(
            "teacher seed {seed}: saved {} (final source_ce {:.4}, target acc {})",
            path.display(),
            last.source_ce,
            last.target_standard_acc.map_or("n/a".into(), |a| format!("{a:.4}")),
        );
    }
    Ok(())
}

fn cmd_pretrain(args: &RunArgs, eps_pre: Option<f64>) -> Result<()> {
    let (config, out_root) = args.resolve()?;
    let config = config.resolved()?;
    let hash = config_hash(&config)?;
    let eps = eps_pre
        .or(config.pretrain_epsilon)
        .unwrap_or(config.train.attack.epsilon);
    for &seed in &config.seeds {
        let source =
            realize_domain(&config.source, DomainTag::Source, "train", derive_seed(seed, &[10]))?;
        let mut pc = config.train.clone();
        pc.seed = derive_seed(seed, &[2]);
        let psi = pretrain_robust(&source, eps, &pc)?;
        let path = out_root
            .join("pretrain")
            .join(format!("{}-s{seed}-eps{eps}.json", &hash[..12]));
        std::fs::create_dir_all(path.parent().unwrap())?;
        std::fs::write(&path, serde_json::to_string_pretty(&psi)?)?;
        println!("pretrain seed {seed}: radius {eps}, saved {}", path.display());
    }
    Ok(())
}

fn cmd_train(args: &RunArgs, force: bool) -> Result<()> {
    let (config, out_root) = args.resolve()?;
    let manifests = run_config(&config, &out_root, force)?;
    let headline = manifests
        .first()
        .and_then(|m| m.config.eval_attacks.first().cloned())
        .unwrap_or_default();
    let mut std_accs = Vec::new();
    let mut rob_accs = Vec::new();
    for m in &manifests {
        let dir = tarot::exp::run_dir(&out_root, &m.config_hash, m.config.method, m.seed);
        let target = m.reports.get("target");
        let std_acc = target.map(|r| r.standard_acc);
        let rob_acc = target.and_then(|r| r.robust_acc.get(&headline)).copied();
        if let Some(a) = std_acc {
            std_accs.push(a);
        }
        if let Some(a) = rob_acc {
            rob_accs.push(a);
        }
        println!(
            "run seed {}: {} (epoch {}, target standard {} robust {})",
            m.seed,
            dir.display(),
            m.selected_epoch,
            std_acc.map_or("n/a".into(), |a| format!("{a:.4}")),
            rob_acc.map_or("n/a".into(), |a| format!("{a:.4}")),
        );
    }
    if std_accs.len() > 1 {
        println!(
            "target medians over {} seeds: standard {:.4}, robust {:.4}",
            std_accs.len(),
            median(&std_accs)?,
            if rob_accs.is_empty() { f64::NAN } else { median(&rob_accs)? },
        );
    }
    Ok(())
}

fn cmd_eval(args: &RunArgs, model_path: &Path, domain: Option<&str>) -> Result<()> {
    let (config, _) = args.resolve()?;
    let config = config.resolved()?;
    let seed = first_seed(&config);
    let model = load_model(model_path)?;
    let view = model.view(Head::Main);

    let mut domains: Vec<(String, tarot::data::DomainDataset)> = Vec::new();
    let want = |name: &str| domain.map_or(true, |d| d == name);
    if want("source") {
        domains.push((
            "source".into(),
            realize_domain(&config.source, DomainTag::Source, "eval", derive_seed(seed, &[20]))?,
        ));
    }
    if want("target") {
        domains.push(("target".into(), target_eval_inputs(&config, seed)?));
    }
    if want("unseen") {
        for (i, spec) in config.unseen.iter().enumerate() {
            domains.push((
                format!("unseen:{i}"),
                realize_domain(spec, DomainTag::Unseen, "eval", derive_seed(seed, &[30 + i as u64]))?,
            ));
        }
    }
    if domains.is_empty() {
        anyhow::bail!("no domain matches `{}`", domain.unwrap_or(""));
    }

    let dim = domains[0].1.dim();
    let mut attacks = Vec::new();
    for spec in &config.eval_attacks {
        attacks.push(parse_attack_spec(spec, dim)?);
    }
    let mut out = serde_json::Map::new();
    for (k, (key, ds)) in domains.iter().enumerate() {
        let report =
            tarot::eval::evaluate(&view, ds, &attacks, None, derive_seed(seed, &[6, k as u64]))?;
        out.insert(key.clone(), serde_json::to_value(&report)?);
    }
    print_json(&out)
}

fn cmd_lipschitz(args: &RunArgs, model_path: &Path, eps: Option<f64>) -> Result<()> {
    let (config, _) = args.resolve()?;
    let config = config.resolved()?;
    let seed = first_seed(&config);
    let model = load_model(model_path)?;
    let data = target_eval_inputs(&config, seed)?;
    let mut search = LipschitzSearch::new(eps.unwrap_or(config.train.attack.epsilon))?;
    search.bounds = Some(tarot::attack::BoxBounds::unit(data.dim()));
    search.seed = derive_seed(seed, &[7]);
    let estimate =
        tarot::eval::local_lipschitz_estimate(&model.view(Head::Main), &data.inputs, &search)?;
    print_json(&estimate)
}

fn cmd_probe(args: &RunArgs, model_path: &Path, eps: Option<f64>) -> Result<()> {
    let (config, _) = args.resolve()?;
    let config = config.resolved()?;
    let seed = first_seed(&config);
    let model = load_model(model_path)?;
    let data = target_eval_inputs(&config, seed)?;
    let budget = match eps {
        Some(e) => {
            let a = &config.train.attack;
            PerturbationBudget::new(
                e,
                a.norm,
                if e > 0.0 { e / 4.0 } else { 0.0 },
                a.num_steps,
                a.random_start,
                Some(tarot::attack::BoxBounds::unit(data.dim())),
            )?
        }
        None => config.train.attack.clone(),
    };
    let report = disparity_report(
        &model.view(Head::Aux),
        &model.view(Head::Main),
        &data.inputs,
        config.train.margin.rho(),
        &budget,
        derive_seed(seed, &[8]),
    )?;
    print_json(&report)
}

fn cmd_verify_theory(n: usize, seed: u64, out: Option<&Path>) -> Result<bool> {
    let report = run_suite(seed, n, &InstanceSizes::default())?;
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(p) = out {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(p, format!("{text}\n"))?;
    }
    Ok(report.failures.is_empty())
}

fn cmd_sweep(
    args: &RunArgs,
    param: SweepParam,
    values: &str,
    do_plot: bool,
    force: bool,
) -> Result<()> {
    let (config, out_root) = args.resolve()?;
    let values: Vec<f64> = values
        .split(',')
        .filter(|v| !v.trim().is_empty())
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad sweep value `{v}`")))
        .collect::<Result<_>>()?;
    let outcome = sweep(&config, param, &values, &out_root, force)?;
    println!("sweep summary: {}", outcome.index.csv.display());
    if do_plot {
        let plots = emit_plots(&outcome.manifests, param, &outcome.dir.join("plots"))?;
        for p in plots {
            println!("figure: {}", p.display());
        }
    }
    Ok(())
}

fn cmd_plot(sweep_dir: &Path, out: Option<&Path>) -> Result<()> {
    let index_path = sweep_dir.join("sweep.json");
    let text = std::fs::read_to_string(&index_path)
        .with_context(|| format!("reading {}", index_path.display()))?;
    let index: SweepIndex = serde_json::from_str(&text)?;
    let mut manifests = Vec::with_capacity(index.manifest_paths.len());
    for p in &index.manifest_paths {
        let m = RunManifest::load(p).with_context(|| format!("loading {}", p.display()))?;
        m.verify_hash()?;
        manifests.push(m);
    }
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| sweep_dir.join("plots"));
    let plots = emit_plots(&manifests, index.param, &out_dir)?;
    for p in plots {
        println!("figure: {}", p.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.cmd {
        Cmd::Teacher(args) => cmd_teacher(args).map(|()| true),
        Cmd::Pretrain { run, eps_pre } => cmd_pretrain(run, *eps_pre).map(|()| true),
        Cmd::Train { run, force } => cmd_train(run, *force).map(|()| true),
        Cmd::Eval { run, model, domain } => {
            cmd_eval(run, model, domain.as_deref()).map(|()| true)
        }
        Cmd::Lipschitz { run, model, eps } => cmd_lipschitz(run, model, *eps).map(|()| true),
        Cmd::Probe { run, model, eps } => cmd_probe(run, model, *eps).map(|()| true),
        Cmd::VerifyTheory { n, seed, out } => cmd_verify_theory(*n, *seed, out.as_deref()),
        Cmd::Sweep { run, param, values, plot, force } => {
            cmd_sweep(run, *param, values, *plot, *force).map(|()| true)
        }
        Cmd::Plot { sweep, out } => cmd_plot(sweep, out.as_deref()).map(|()| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
