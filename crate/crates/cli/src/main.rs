use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use gtspace::config::{Ablation, Config};
use gtspace::eval::MeanStd;
use gtspace::training::run_gradcheck;
use gtspace::workflow::{self, RunDir, Study, Sweeps, SystemEval};

#[derive(Parser, Debug)]
#[command(name = "gtspace", version, about = "Heterogeneous collaborative BEV perception in a shared ground-truth feature space")]
struct Cli {
    /// JSON config; defaults to the run directory's config.json, then to built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (dataset generation and model initialisation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Pretrain and freeze one agent.
    PretrainAgent {
        #[arg(long)]
        agent_preset: String,
    },
    /// Train the ground-truth feature space.
    TrainGt,
    /// Train projectors, codec and fusion for every evaluation seed.
    TrainFusion,
    /// Train a projector for a new agent against the frozen full systems.
    Onboard {
        #[arg(long, default_value = "weak-C")]
        agent_preset: String,
    },
    /// Per-agent local, late-fusion and collaborative AP.
    Eval,
    /// Robustness sweeps.
    Sweep {
        kind: SweepKind,
        /// Newcomer used by the weak-agent study.
        #[arg(long, default_value = "weak-C")]
        agent_preset: String,
    },
    /// Train and evaluate one ablation next to the full system.
    Ablate { variant: Variant },
    /// Finite-difference gradient suite.
    Gradcheck,
    /// Re-render metrics.csv, summary.md and plots from report.json.
    Report,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SweepKind {
    Pose,
    Latency,
    Weak,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Variant {
    NoGt,
    NoProj,
    NoContrast,
}

impl Variant {
    fn ablation(self) -> Ablation {
        let name = match self {
            Variant::NoGt => "no-gt",
            Variant::NoProj => "no-proj",
            Variant::NoContrast => "no-contrast",
        };
        Ablation::from_name(name).expect("known ablation")
    }
}

fn resolve_config(cli: &Cli, run: &RunDir) -> Result<Config> {
    let mut cfg = if let Some(p) = &cli.config {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        Config::from_json(&text)?
    } else if run.config().exists() {
        let mut stored: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.config())?)?;
        serde_json::from_value(stored["config"].take()).context("config.json has no usable `config` section")?
    } else {
        Config::default()
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn full_runs(study: &Study, run: &RunDir, sweeps: Sweeps) -> Result<Vec<SystemEval>> {
    let seeds = study.cfg.eval.seeds.clone();
    let systems = workflow::fusion_systems(study, run, Ablation::default(), &seeds, false)?;
    Ok(systems.iter().zip(seeds).map(|(s, seed)| study.evaluate(s, seed, None, sweeps)).collect::<gtspace::Result<_>>()?)
}

fn show(m: &MeanStd) -> String {
    format!("{:.3} ± {:.3}", m.mean, m.std)
}

fn run(cli: Cli) -> Result<()> {
    let rd = RunDir::new(&cli.out);
    let cfg = resolve_config(&cli, &rd)?;
    match &cli.command {
        Command::GenData => {
            let ds = workflow::gen_data(&cfg, &rd)?;
            println!("dataset {} ({} train, {} val) in {}", ds.hash(), ds.train.len(), ds.val.len(), rd.dataset().display());
        }
        Command::PretrainAgent { agent_preset } => {
            let ds = workflow::load_dataset(&rd)?;
            let a = workflow::resolve_agent(&cfg, agent_preset)?;
            let rec = workflow::pretrain(&cfg, &rd, &ds, &a)?;
            println!("{}: AP@0.5 {:.3}, AP@0.7 {:.3}", rec.agent_id, rec.val_ap50, rec.val_ap70);
            if let Some(w) = rec.warning {
                eprintln!("warning: {w}");
            }
        }
        Command::TrainGt => {
            let ds = workflow::load_dataset(&rd)?;
            write_config_if_missing(&cfg, &rd, &ds.hash())?;
            let curve = workflow::train_gt(&cfg, &rd, &ds)?;
            if let Some(e) = curve.last() {
                println!("ground-truth space: {} epochs, AP@0.5 {:.4}", e.epoch + 1, e.val_ap50);
            }
        }
        Command::TrainFusion => {
            let study = workflow::open_study(&cfg, &rd)?;
            for &seed in &cfg.eval.seeds {
                let sys = workflow::train_fusion_stage(&study, &rd, Ablation::default(), seed)?;
                println!("seed {seed}: fusion checksum {}", sys.checksum());
            }
        }
        Command::Onboard { agent_preset } => {
            let study = workflow::open_study(&cfg, &rd)?;
            let newcomer = workflow::load_agent(&cfg, &rd, agent_preset)?;
            let nc = study.newcomer(&newcomer)?;
            let systems = workflow::fusion_systems(&study, &rd, Ablation::default(), &cfg.eval.seeds, false)?;
            for (sys, &seed) in systems.iter().zip(&cfg.eval.seeds) {
                let ext = workflow::onboard_stage(&study, &rd, sys, &nc, seed)?;
                println!("seed {seed}: onboarded {} (fusion checksum unchanged: {})", agent_preset, sys.checksum());
                drop(ext);
            }
        }
        Command::Eval => {
            let study = workflow::open_study(&cfg, &rd)?;
            let report = workflow::eval_stage(&study, &rd, false)?;
            if let Some(t) = report.table("agents") {
                for h in workflow::headlines(t) {
                    println!("{:>8}  local {:.3}  late {:.3}  collab {:.3}", h.agent, h.local, h.late, h.collab);
                }
            }
        }
        Command::Sweep { kind, agent_preset } => {
            let study = workflow::open_study(&cfg, &rd)?;
            let (tables, scatter) = match kind {
                SweepKind::Pose => (vec![study.pose_table(&full_runs(&study, &rd, Sweeps { pose: true, latency: false })?)?], None),
                SweepKind::Latency => (vec![study.latency_table(&full_runs(&study, &rd, Sweeps { pose: false, latency: true })?)?], None),
                SweepKind::Weak => {
                    let newcomer = workflow::load_agent(&cfg, &rd, agent_preset)?;
                    let nc = study.newcomer(&newcomer)?;
                    let mut roster = study.agents.clone();
                    roster.push(newcomer);
                    let mut runs = Vec::new();
                    for &seed in &cfg.eval.seeds {
                        let p = rd.onboard(agent_preset, seed);
                        if !p.exists() {
                            bail!("missing {}; run `onboard --agent-preset {agent_preset}` first", p.display());
                        }
                        let c = gtspace::io::Container::read(&p)?;
                        let sys = gtspace::pipeline::CollabSystem::from_container(&cfg, roster.clone(), &c)?;
                        runs.push(study.evaluate(&sys, seed, Some(&nc), Sweeps::default())?);
                    }
                    let (t, s) = study.onboarding(&nc, &runs)?;
                    (vec![t], Some(s))
                }
            };
            let report = workflow::update_report(&rd, &study.ds.hash(), &cfg.eval.seeds, tables.clone(), scatter)?;
            for t in &tables {
                println!("{}", t.name);
                for r in &t.rows {
                    println!("  {:<14} AP@0.5 {}  AP@0.7 {}", r.config, show(&r.ap50), show(&r.ap70));
                }
            }
            for p in &report.scatter {
                println!("  {:<8} local {:.3} -> collab {}", p.agent, p.local.mean, show(&p.collab));
            }
        }
        Command::Ablate { variant } => {
            let study = workflow::open_study(&cfg, &rd)?;
            let seeds = cfg.eval.seeds.clone();
            let mut rows = workflow::load_report(&rd)?.table("ablation").map(|t| t.rows.clone()).unwrap_or_default();
            for ab in [Ablation::default(), variant.ablation()] {
                let systems = workflow::fusion_systems(&study, &rd, ab, &seeds, true)?;
                let runs: Vec<SystemEval> = systems.iter().zip(&seeds).map(|(s, &seed)| study.evaluate(s, seed, None, Sweeps::default())).collect::<gtspace::Result<_>>()?;
                let row = study.ablation_row(ab, &runs);
                println!("{:<12} AP@0.5 {}", row.config, show(&row.ap50));
                rows.retain(|r| r.config != row.config);
                rows.push(row);
            }
            let order = ["full", "no-contrast", "no-proj", "no-gt"];
            rows.sort_by_key(|r| order.iter().position(|o| *o == r.config).unwrap_or(order.len()));
            let table = gtspace::eval::SweepTable { name: "ablation".into(), x_label: String::new(), rows };
            workflow::update_report(&rd, &study.ds.hash(), &seeds, vec![table], None)?;
        }
        Command::Gradcheck => {
            let suite = run_gradcheck(cli.seed.unwrap_or(cfg.seed));
            workflow::write_gradcheck(&rd, &suite)?;
            for r in &suite.reports {
                println!("{:<28} {:.3e}", r.name, r.max_rel_err);
            }
            if !suite.passed() {
                return Err(GradcheckFailed(suite.max_rel_err()).into());
            }
        }
        Command::Report => {
            let report = workflow::load_report(&rd)?;
            let written = gtspace::eval::emit_report(&report, rd.root())?;
            for p in written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn write_config_if_missing(cfg: &Config, rd: &RunDir, dataset_hash: &str) -> Result<()> {
    if !rd.config().exists() {
        workflow::write_config(rd, cfg, Some(dataset_hash))?;
    }
    Ok(())
}

#[derive(Debug)]
struct GradcheckFailed(f64);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed: max relative error {:.3e}", self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let invariant = e.downcast_ref::<gtspace::Error>().is_some_and(|g| g.is_invariant_violation()) || e.is::<GradcheckFailed>();
            ExitCode::from(if invariant { 2 } else { 1 })
        }
    }
}
