//! `bmd`: staged experiment runner.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use bmd_cli::checkpoint::Checkpoint;
use bmd_cli::config::ExperimentConfig;
use bmd_cli::io::{init_threads, run_file, write_atomic, write_with};
use bmd_cli::pipeline::{self, Variant};
use bmd_cli::{plot, report, state, CliError};
use bmd_core::discovery::write_mi_probe_csv;
use bmd_core::evalkit::{
    write_confusion_csv, write_per_mode_csv, write_report_csv, write_trajectories_csv, EvalReport,
};
use bmd_core::rlft::write_diagnostics_csv;
use bmd_core::toyenv::DemoDataset;
use bmd_core::trainer::Trainer;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bmd", version, about = "Behavioral mode discovery experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    /// Input file instead of the previous stage's default output.
    #[arg(long)]
    input: Option<PathBuf>,
    /// `key = value` override in TOML syntax, e.g. `--set 'trainer.epochs = 300'`.
    #[arg(long = "set")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstrations.
    GenDemos(Common),
    /// Behavior-clone the diffusion policy on the demonstrations.
    Pretrain(Common),
    /// Mode discovery on top of the pre-trained policy.
    Discover(Common),
    /// Reward fine-tuning from the discovery checkpoint.
    Finetune(Common),
    /// Evaluate a checkpoint on the configured landscape.
    Eval(Common),
    /// Discovery-only MI estimate on 1-, 2- and 4-mode policies.
    MiProbe(Common),
    /// Ablation switches and the lambda sweep from a pre-trained checkpoint.
    Ablate(Common),
    /// Merge per-seed metric CSVs into mean ± std tables.
    Report {
        #[command(flatten)]
        common: Common,
        /// Metric CSVs; defaults to every eval_* and ablate_* file in the out dir.
        files: Vec<PathBuf>,
    },
    /// Trajectory and reward-landscape figures as SVG with CSV twins.
    Plot(Common),
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    input: Option<PathBuf>,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self, CliError> {
        let cfg = ExperimentConfig::load_with_overrides(c.config.as_deref(), &c.overrides, c.seed)?;
        Ok(Self {
            cfg,
            out: c.out_dir.clone(),
            input: c.input.clone(),
        })
    }

    fn file(&self, stem: &str, ext: &str) -> PathBuf {
        run_file(&self.out, &self.cfg, stem, ext)
    }

    /// The explicit input, or the default output of `stem`; must exist.
    fn input_or(&self, stem: &str, ext: &str) -> Result<PathBuf, CliError> {
        let p = self.input.clone().unwrap_or_else(|| self.file(stem, ext));
        if !p.exists() {
            return Err(CliError::Checkpoint(format!(
                "missing input {} (run the previous stage or pass --input)",
                p.display()
            )));
        }
        Ok(p)
    }

    fn echo_config(&self) -> Result<(), CliError> {
        write_atomic(&self.file("config", "toml"), self.cfg.to_toml().as_bytes())
    }

    fn save_trainer(&self, tr: &Trainer, stage: &str) -> Result<PathBuf, CliError> {
        let p = self.file(stage, "bmdc");
        state::trainer_checkpoint(&self.cfg, tr, stage).save(&p)?;
        write_with(&self.file(&format!("diagnostics_{stage}"), "csv"), |b| {
            write_diagnostics_csv(&tr.diagnostics, b)
        })?;
        Ok(p)
    }

    fn hook(&self) -> impl FnMut(&Trainer, &str) -> Result<(), String> + '_ {
        move |tr, label| {
            if label.starts_with("epoch") {
                let p = self.file(&format!("ckpt_{label}"), "bmdc");
                state::trainer_checkpoint(&self.cfg, tr, label)
                    .save(&p)
                    .map_err(|e| e.to_string())?;
            }
            Ok(())
        }
    }
}

fn write_eval(ctx: &Ctx, method: &str, r: &EvalReport) -> Result<(), CliError> {
    let row = pipeline::report_row(method, ctx.cfg.landscape, ctx.cfg.seed, r);
    write_with(&ctx.file("eval", "csv"), |b| write_report_csv(&[row], b))?;
    write_with(&ctx.file("permode", "csv"), |b| write_per_mode_csv(r, b))?;
    write_with(&ctx.file("confusion", "csv"), |b| write_confusion_csv(r, b))?;
    write_with(&ctx.file("trajectories", "csv"), |b| write_trajectories_csv(r, b))?;
    println!(
        "{method} {} seed {}: SR {:.3} SR_M {:.3} mc@0.8 {}/{} entropy {:.3}",
        ctx.cfg.landscape,
        ctx.cfg.seed,
        r.sr,
        r.sr_m,
        r.coverage_count,
        r.per_mode_sr.len(),
        r.entropy
    );
    Ok(())
}

fn gen_demos(ctx: &Ctx) -> Result<(), CliError> {
    let ds = pipeline::demos(&ctx.cfg)?;
    let p = ctx.file("demos", "csv");
    write_with(&p, |b| ds.write_csv(b))?;
    println!("wrote {} demos to {}", ds.episodes.len(), p.display());
    Ok(())
}

fn pretrain(ctx: &Ctx) -> Result<(), CliError> {
    let input = ctx.input_or("demos", "csv")?;
    let file = std::fs::File::open(&input)?;
    let ds = DemoDataset::read_csv(file, None).map_err(|e| CliError::Other(e.to_string()))?;
    let (policy, rep) = pipeline::pretrain(&ctx.cfg, &ds)?;
    let p = ctx.file("pretrain", "bmdc");
    state::pretrain_checkpoint(&ctx.cfg, &policy).save(&p)?;
    write_with(&ctx.file("pretrain_loss", "csv"), |b| -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["epoch", "loss"])?;
        for (i, l) in rep.losses.iter().enumerate() {
            w.write_record([(i + 1).to_string(), l.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    if rep.plateau_warning {
        eprintln!("warning: the BC loss did not decrease over the last 20% of epochs");
    }
    println!(
        "pretrained: final loss {:.4}, rollout SR {:.3}, mode counts {:?}; wrote {}",
        rep.final_loss,
        rep.rollout.sr,
        rep.rollout.counts,
        p.display()
    );
    Ok(())
}

fn discover(ctx: &Ctx) -> Result<(), CliError> {
    let ck = Checkpoint::load(&ctx.input_or("pretrain", "bmdc")?)?;
    let policy = state::load_diffusion(&ck, &ctx.cfg.diffusion)?;
    let mut tr = pipeline::new_trainer(&ctx.cfg, policy)?;
    tr.run_discovery(&mut ctx.hook())?;
    let p = ctx.save_trainer(&tr, "discovery")?;
    if let Some(last) = tr.diagnostics.last() {
        println!("discovery done at epoch {}: NLL {:.4} MI {:.4}", last.epoch, last.nll, last.mi_estimate);
    }
    println!("wrote {}", p.display());
    Ok(())
}

fn finetune(ctx: &Ctx) -> Result<(), CliError> {
    let ck = Checkpoint::load(&ctx.input_or("discovery", "bmdc")?)?;
    let mut tr = state::restore_trainer(&ctx.cfg, &ck)?;
    tr.run_finetune(&mut ctx.hook())?;
    let p = ctx.save_trainer(&tr, "finetune")?;
    println!("wrote {}", p.display());
    Ok(())
}

fn eval(ctx: &Ctx) -> Result<(), CliError> {
    let ck = Checkpoint::load(&ctx.input_or("finetune", "bmdc")?)?;
    if ck.meta("stage")? == "pretrain" {
        let policy = state::load_diffusion(&ck, &ctx.cfg.diffusion)?;
        let r = pipeline::evaluate_frozen(&ctx.cfg, policy)?;
        write_eval(ctx, "frozen", &r)
    } else {
        let tr = state::restore_trainer(&ctx.cfg, &ck)?;
        let r = pipeline::evaluate_trainer(&ctx.cfg, &tr)?;
        write_eval(ctx, &ctx.cfg.method.to_string(), &r)
    }
}

fn mi_probe(ctx: &Ctx) -> Result<(), CliError> {
    let rows = pipeline::mi_probe(&ctx.cfg)?;
    for r in &rows {
        println!(
            "{} modes, K_z {}: MI {:.4} NLL {:.4}",
            r.dataset_modes, r.k_z, r.mi_estimate, r.nll
        );
    }
    write_with(&ctx.file("mi_probe", "csv"), |b| write_mi_probe_csv(&rows, b))
}

fn ablate(ctx: &Ctx) -> Result<(), CliError> {
    let ck = Checkpoint::load(&ctx.input_or("pretrain", "bmdc")?)?;
    let policy = state::load_diffusion(&ck, &ctx.cfg.diffusion)?;
    let mut rows = Vec::new();
    for v in Variant::all(&ctx.cfg) {
        let r = pipeline::ablation_run(&ctx.cfg, &policy, &v)?;
        println!(
            "{:24} SR {:.3} SR_M {:.3} mc@0.8 {} entropy {:.3}",
            r.variant, r.sr, r.sr_m, r.mc_at_080, r.entropy
        );
        rows.push(r);
    }
    write_with(&ctx.file("ablate", "csv"), |b| -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(b);
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    })
}

fn metric_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            (name.starts_with("eval_") || name.starts_with("ablate_")) && name.ends_with(".csv")
        })
        .collect();
    files.sort();
    Ok(files)
}

fn report_cmd(ctx: &Ctx, files: &[PathBuf]) -> Result<(), CliError> {
    let files = if files.is_empty() {
        metric_files(&ctx.out)?
    } else {
        files.to_vec()
    };
    if files.is_empty() {
        return Err(CliError::Other(format!("no metric CSVs in {}", ctx.out.display())));
    }
    let mut rows = Vec::new();
    for f in &files {
        rows.extend(report::read_rows(std::fs::File::open(f)?)?);
    }
    let summary = report::summarize(&rows);
    let name = format!("report_{}", ctx.cfg.hash());
    write_with(&ctx.out.join(format!("{name}.csv")), |b| report::write_summary_csv(&summary, b))?;
    let md = report::summary_markdown(&summary);
    write_atomic(&ctx.out.join(format!("{name}.md")), md.as_bytes())?;
    print!("{md}");
    Ok(())
}

fn plot_cmd(ctx: &Ctx) -> Result<(), CliError> {
    let env = ctx.cfg.finetune_env();
    let bound = env.workspace_bound;
    let n = 96;
    let grid = plot::reward_grid(&env.layout, bound, n);
    write_atomic(
        &ctx.file("landscape", "svg"),
        plot::landscape_svg(&grid, n, 10, &env.layout, bound).as_bytes(),
    )?;
    write_with(&ctx.file("landscape", "csv"), |b| plot::grid_csv(&grid, b))?;

    let traj = ctx.input.clone().unwrap_or_else(|| ctx.file("trajectories", "csv"));
    if traj.exists() {
        let pts = plot::read_trajectories(std::fs::File::open(&traj)?)?;
        write_atomic(
            &ctx.file("trajectories_plot", "svg"),
            plot::trajectory_svg(&pts, &env.layout, bound).as_bytes(),
        )?;
        write_with(&ctx.file("trajectories_plot", "csv"), |b| -> Result<(), csv::Error> {
            let mut w = csv::Writer::from_writer(b);
            for p in &pts {
                w.serialize(p)?;
            }
            w.flush()?;
            Ok(())
        })?;
    } else if ctx.input.is_some() {
        return Err(CliError::Other(format!("missing trajectories {}", traj.display())));
    }
    println!("wrote figures to {}", ctx.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let (common, files) = match &cli.command {
        Command::Report { common, files } => (common, files.clone()),
        Command::GenDemos(c)
        | Command::Pretrain(c)
        | Command::Discover(c)
        | Command::Finetune(c)
        | Command::Eval(c)
        | Command::MiProbe(c)
        | Command::Ablate(c)
        | Command::Plot(c) => (c, Vec::new()),
    };
    let ctx = Ctx::new(common)?;
    std::fs::create_dir_all(&ctx.out)?;
    if !matches!(cli.command, Command::Report { .. }) {
        ctx.echo_config()?;
    }
    match cli.command {
        Command::GenDemos(_) => gen_demos(&ctx),
        Command::Pretrain(_) => pretrain(&ctx),
        Command::Discover(_) => discover(&ctx),
        Command::Finetune(_) => finetune(&ctx),
        Command::Eval(_) => eval(&ctx),
        Command::MiProbe(_) => mi_probe(&ctx),
        Command::Ablate(_) => ablate(&ctx),
        Command::Report { .. } => report_cmd(&ctx, &files),
        Command::Plot(_) => plot_cmd(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: anyhow::Result<()> = run(cli).context("bmd failed");
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(1, CliError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
