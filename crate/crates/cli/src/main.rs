//! `vip` command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! configuration. Failures print one line to stderr:
//! `error kind=<kind> [field=<path>] msg=<json string>`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vip_core::config::RunConfig;
use vip_core::curation::{candidates, curate, default_tau, load_pairs, resolve_filter, save_pairs, PairRules, Source};
use vip_core::distill::{train_distill, LossKind};
use vip_core::export;
use vip_core::io::{to_json_pretty, write_file};
use vip_core::nn::checkpoint;
use vip_core::pipeline::toy::run_toy_experiment;
use vip_core::pipeline::{resolve_targets, run_vip, sweep_wsft, RunMode};
use vip_core::pruning::{apply_prune, block_importance, select_blocks};
use vip_core::reward::{score_model, QUALITY};
use vip_core::{rng, Error};

#[derive(Parser, Debug)]
#[command(name = "vip", version, about = "Iterative preference distillation for toy diffusion models")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run seed; `VIP_SEED` overrides it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel evaluation; results do not depend on it
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Loss {
    Sft,
    Dpo,
    Redpo,
}

impl From<Loss> for LossKind {
    fn from(l: Loss) -> Self {
        match l {
            Loss::Sft => LossKind::Sft,
            Loss::Dpo => LossKind::Dpo,
            Loss::Redpo => LossKind::Redpo,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Vip,
    Offline,
    SftBaseline,
    DpoOnly,
}

impl From<Mode> for RunMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Vip => RunMode::Vip,
            Mode::Offline => RunMode::Offline,
            Mode::SftBaseline => RunMode::SftBaseline,
            Mode::DpoOnly => RunMode::DpoOnly,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the teacher preset on the mixture.
    TrainTeacher,
    /// Train the standalone student preset on the mixture.
    TrainStudent,
    /// Rank blocks by importance and mask the k least important.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        k: usize,
    },
    /// Build preference pairs from teacher winners and student losers.
    Curate {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long, default_value_t = 0)]
        stage: usize,
    },
    /// Distill a student toward the teacher on a pair dataset.
    Distill {
        #[arg(long, value_enum)]
        loss: Loss,
        #[arg(long)]
        w_sft: Option<f64>,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
    },
    /// Full staged pipeline.
    Run {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Teacher/base-student toy experiment.
    Toy,
    /// Pipeline once per SFT weight.
    SweepWsft {
        /// Comma-separated weights; defaults to `sweep_grid` from the config.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Score a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Plot-ready CSVs from a manifest or toy report.
    Export {
        #[arg(long)]
        input: PathBuf,
    },
}

fn load_config(g: &Global) -> Result<RunConfig, Error> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = Some(o.clone());
    }
    cfg.apply_env()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), Error> {
    write_file(path, to_json_pretty(value)?.as_bytes())
}

fn print_line(key: &str, value: impl std::fmt::Display) {
    println!("{key}={value}");
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = load_config(&cli.global)?;
    if let Command::Distill { w_sft: Some(w), .. } = &cli.command {
        cfg.plan.distill.w_sft = *w;
    }
    if let Command::Run { mode: Some(m) } = &cli.command {
        cfg.plan.mode = (*m).into();
    }
    cfg.validate()?;
    if let Some(n) = cli.global.threads {
        vip_core::init_threads(n)?;
    }
    let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    let seed = cfg.seed;

    match cli.command {
        Command::TrainTeacher | Command::TrainStudent => {
            let (name, (model, history)) = match cli.command {
                Command::TrainTeacher => ("teacher", cfg.train_teacher()?),
                _ => ("student", cfg.train_student()?),
            };
            let path = out.join(format!("{name}.json"));
            let hash = checkpoint::save(&model.net, &path)?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in history.iter().enumerate() {
                csv.push_str(&format!("{i},{}\n", vip_core::io::fmt_f64(*l)));
            }
            write_file(&out.join(format!("{name}_loss.csv")), csv.as_bytes())?;
            print_line("checkpoint", path.display());
            print_line("hash", hash);
        }
        Command::Prune { checkpoint: ckpt, k } => {
            let mut model = cfg.load_model(&ckpt)?;
            let eval_seed = rng::derive(seed, "eval");
            let table = block_importance(&model, &cfg.reward, &cfg.mixture, cfg.plan.n_eval_samples, eval_seed)?;
            let secondary = cfg.reward.properties.iter().any(|p| p == QUALITY).then_some(QUALITY);
            let ids = select_blocks(&table, k, secondary)?;
            let mut result = apply_prune(&mut model, &ids, 0)?;
            result.report_before = Some(table.report_full.clone());
            result.report_after = Some(score_model(
                &model,
                &cfg.reward,
                &cfg.mixture,
                cfg.plan.n_eval_samples,
                eval_seed,
            )?);
            write_file(&out.join("importance.csv"), table.to_csv().as_bytes())?;
            write_json(&result, &out.join("prune.json"))?;
            let path = out.join("pruned.json");
            let hash = checkpoint::save(&model.net, &path)?;
            print_line("pruned", format!("{ids:?}"));
            print_line("checkpoint", path.display());
            print_line("hash", hash);
        }
        Command::Curate {
            teacher,
            student,
            stage,
        } => {
            let teacher = cfg.load_model(&teacher)?;
            let student = cfg.load_model(&student)?;
            let (spec, mix) = (&cfg.reward, &cfg.mixture);
            let eval_seed = rng::derive(seed, "eval");
            let n_eval = cfg.plan.n_eval_samples;
            let before = score_model(&teacher, spec, mix, n_eval, eval_seed)?;
            let after = score_model(&student, spec, mix, n_eval, eval_seed)?;
            let (targets, _) = resolve_targets(&cfg.plan.curation.target, &before, &after)?;
            let cand_seed = rng::derive(seed, "candidates");
            let tc = candidates(&teacher.sample(cfg.plan.n_candidates, cand_seed)?, Source::Teacher, spec, mix);
            let sc = candidates(&student.sample(cfg.plan.n_candidates, cand_seed)?, Source::Student, spec, mix);
            let rules = PairRules {
                targets: targets.clone(),
                tau: cfg.plan.curation.tau.clone().unwrap_or_else(|| default_tau(&tc)),
                alpha: cfg.plan.curation.alpha,
                max_pairs: cfg.plan.curation.max_pairs,
            };
            let filter = cfg
                .plan
                .curation
                .candidate_filter
                .as_deref()
                .map(|id| resolve_filter(id, mix, spec))
                .transpose()?;
            let pairs = curate(&tc, &sc, &rules, stage, filter.as_deref());
            if pairs.is_empty() {
                return Err(Error::EmptyPairSet {
                    stage,
                    hint: "lower plan.curation.tau or raise plan.curation.alpha".into(),
                });
            }
            let path = out.join("pairs.jsonl");
            let hash = save_pairs(&pairs, &path)?;
            print_line("targets", targets.join(","));
            print_line("pairs", pairs.len());
            print_line("dataset", path.display());
            print_line("hash", hash);
        }
        Command::Distill {
            loss,
            teacher,
            student,
            pairs,
            ..
        } => {
            let teacher = cfg.load_model(&teacher)?;
            let mut student = cfg.load_model(&student)?;
            let pairs = load_pairs(&pairs)?;
            let mut dc = cfg.plan.distill;
            dc.seed = rng::derive(seed, "distill");
            let history = train_distill(&mut student, &teacher, &pairs, &dc, loss.into())?;
            write_file(&out.join("loss.csv"), export::loss_history_csv(&history.epochs).as_bytes())?;
            let path = out.join("student.json");
            let hash = checkpoint::save(&student.net, &path)?;
            print_line("checkpoint", path.display());
            print_line("hash", hash);
        }
        Command::Run { .. } => {
            let ctx = cfg.context(cfg.teacher()?, &out);
            let manifest = run_vip(&ctx, &cfg.plan, seed, cfg.echo()?)?;
            print_line("manifest", out.join("manifest.json").display());
            print_line("stages", manifest.stages.len());
            print_line("final_hash", manifest.final_checkpoint_hash().unwrap_or(""));
        }
        Command::Toy => {
            let (report, samples) = run_toy_experiment(&cfg.toy, seed)?;
            write_json(&report, &out.join("toy_report.json"))?;
            export::export_toy(&report, &samples, &out)?;
            for a in &report.arms {
                println!("{} modes={:?} ood={}", a.arm, a.mode_counts, a.ood_count);
            }
        }
        Command::SweepWsft { grid } => {
            let grid = grid.unwrap_or_else(|| cfg.sweep_grid.clone());
            if grid.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(Error::config("grid", "values must be finite and >= 0"));
            }
            let ctx = cfg.context(cfg.teacher()?, &out);
            let table = sweep_wsft(&ctx, &grid, &cfg.plan, seed, cfg.echo()?)?;
            write_json(&table, &out.join("sweep.json"))?;
            write_file(&out.join("sweep.csv"), table.to_csv().as_bytes())?;
            print_line("rows", table.rows.len());
        }
        Command::Eval { checkpoint: ckpt, n } => {
            let model = cfg.load_model(&ckpt)?;
            let n = n.unwrap_or(cfg.plan.n_eval_samples);
            let report = score_model(&model, &cfg.reward, &cfg.mixture, n, rng::derive(seed, "eval"))?;
            export::write_report(&report, &out.join("eval.json"))?;
            print_line("total", report.total);
            print_line("ood", report.ood_count);
        }
        Command::Export { input } => {
            for p in export::export_artifact(&input, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config { .. } => "config",
        Error::Io { .. } => "io",
        Error::Json(_) | Error::Parse { .. } => "parse",
        Error::Checkpoint(_) => "checkpoint",
        Error::EmptyPairSet { .. } => "empty_pair_set",
        Error::Stage { .. } => "stage",
        Error::DivergedAt { .. } | Error::NonFinite(_) | Error::NonFiniteLoss => "numeric",
        _ => "runtime",
    }
}

fn report(e: &Error) -> ExitCode {
    let msg = serde_json::to_string(&e.to_string()).unwrap_or_default();
    match e {
        Error::Config { path, .. } => {
            eprintln!("error kind=config field={path} msg={msg}");
            ExitCode::from(3)
        }
        _ => {
            eprintln!("error kind={} msg={msg}", kind(e));
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}
