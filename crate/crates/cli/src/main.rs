use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unions_cli::commands::{
    default_home, evaluate_cmd, export_cwr, gen_data, load_corpus, render_trajectory, select,
    select_line, train, write_report, CliError, CliResult, ECHO_EVERY,
};
use unions_cli::config::ExperimentConfig;
use unions_cli::pipeline::reproduce;
use unions_core::eval_select::{Convergence, CwrSetting};
use unions_core::trainer::{load_checkpoint, Phase};
use unions_core::Error;

#[derive(Parser)]
#[command(name = "unions", version, about = "Unlikelihood tuning on ID-mismatched negatives, toy scale")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Configuration shared by every verb. Flags override the config file.
#[derive(Args)]
struct Common {
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set tune.lr=0.0005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of languages, central one included.
    #[arg(long, global = true)]
    languages: Option<usize>,
    /// Overwrite or restart existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain (or tune, with --phase) from scratch or resume.
    Train(TrainArgs),
    /// Continue training a checkpoint with UNIONS or the vanilla objective.
    Tune(TrainArgs),
    /// Pick a checkpoint by the Sep trajectory.
    Select {
        /// Run directory holding step-NNNNNN.ckpt files.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        probe: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Compare relative rather than absolute Sep changes.
        #[arg(long)]
        relative: bool,
    },
    /// Beam-search a checkpoint and score BLEU and OTR.
    Evaluate {
        /// Checkpoint to evaluate; omit with --references.
        #[arg(long, required_unless_present = "references")]
        ckpt: Option<PathBuf>,
        /// Score the references against themselves.
        #[arg(long)]
        references: bool,
        #[arg(long)]
        data: Option<PathBuf>,
        /// supervised, zeroshot, all, or a list like L1-L2,L2-L3.
        #[arg(long, default_value = "all")]
        directions: String,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export decoder CWRs and their 2-D PCA projection.
    ExportCwr {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// One setting or `all`.
        #[arg(long, default_value = "all")]
        setting: String,
        #[arg(long)]
        probe: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the whole experiment and print the summary.
    Reproduce {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// pretrain, unions or vanilla.
    #[arg(long)]
    phase: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Start checkpoint for tuning phases.
    #[arg(long)]
    from: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    ul_weight: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
}

fn load_config(c: &Common, extra: &[(&str, String)]) -> CliResult<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::parse(&fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    for s in &c.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = c.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(n) = c.languages {
        cfg.set("languages", &n.to_string())?;
    }
    for (k, v) in extra {
        cfg.set(k, v)?;
    }
    cfg.finalize()?;
    Ok(cfg)
}

fn home(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(default_home)
}

fn dir_name(phase: Phase) -> &'static str {
    match phase {
        Phase::Pretrain => "pretrain",
        Phase::UnionsTune => "unions",
        Phase::VanillaTune => "vanilla",
    }
}

fn run_train(common: &Common, a: TrainArgs, default_phase: Phase) -> CliResult<()> {
    let phase = match &a.phase {
        Some(p) => p.parse()?,
        None => default_phase,
    };
    let mut extra = Vec::new();
    if let Some(w) = a.ul_weight {
        extra.push(("tune.ul_weight", w.to_string()));
    }
    if let Some(s) = a.steps {
        let key = if phase == Phase::Pretrain { "pretrain.steps" } else { "tune.steps" };
        extra.push((key, s.to_string()));
    }
    let cfg = load_config(common, &extra)?;
    let root = home(&cfg);
    let data = a.data.unwrap_or_else(|| root.join("data"));
    let out = a.out.unwrap_or_else(|| root.join(dir_name(phase)));
    let ck = train(&cfg, phase, &data, a.from.as_deref(), &out, common.force, ECHO_EVERY)?;
    println!("{} finished at step {} in {}", phase, ck.step, out.display());
    Ok(())
}

fn execute(common: Common, command: Command) -> CliResult<()> {
    match command {
        Command::GenData { out } => {
            let cfg = load_config(&common, &[])?;
            let out = out.unwrap_or_else(|| home(&cfg).join("data"));
            let m = gen_data(&cfg, &out, common.force)?;
            println!(
                "wrote {} train, {} dev pairs and {} test sentences to {}\nfingerprint {}",
                m.train_pairs,
                m.dev_pairs,
                m.test_sentences,
                out.display(),
                m.fingerprint
            );
        }
        Command::Train(a) => run_train(&common, a, Phase::Pretrain)?,
        Command::Tune(a) => {
            if a.phase.is_none() {
                return Err(Error::Config("tune needs --phase unions or --phase vanilla".into()).into());
            }
            run_train(&common, a, Phase::UnionsTune)?
        }
        Command::Select {
            run,
            data,
            probe,
            threshold,
            relative,
        } => {
            let cfg = load_config(&common, &[])?;
            let root = home(&cfg);
            let run = run.unwrap_or_else(|| root.join("unions"));
            let data = data.unwrap_or_else(|| root.join("data"));
            let mode = if relative { Convergence::Relative } else { cfg.eval.convergence };
            let s = select(
                &run,
                &data,
                probe.unwrap_or(cfg.eval.select_probe),
                threshold.unwrap_or(cfg.eval.threshold),
                mode,
            )?;
            print!("{}", render_trajectory(&s.trajectory));
            println!("{}", select_line(&s.selection));
            println!("copied to {}", s.selected_path.display());
        }
        Command::Evaluate {
            ckpt,
            references,
            data,
            directions,
            out,
        } => {
            let cfg = load_config(&common, &[])?;
            let data = data.unwrap_or_else(|| home(&cfg).join("data"));
            let ckpt = if references { None } else { ckpt.as_deref() };
            let report = evaluate_cmd(ckpt, &data, &directions, cfg.eval.beam, cfg.eval.sentences)?;
            match out {
                Some(p) => write_report(&report, &p)?,
                None => println!("{}", serde_json::to_string_pretty(&report).map_err(Error::Json)?),
            }
        }
        Command::ExportCwr {
            ckpt,
            data,
            setting,
            probe,
            out,
        } => {
            let cfg = load_config(&common, &[])?;
            let root = home(&cfg);
            let data = data.unwrap_or_else(|| root.join("data"));
            let out = out.unwrap_or_else(|| root.join("cwr"));
            let settings = if setting == "all" {
                CwrSetting::ALL.to_vec()
            } else {
                vec![setting.parse()?]
            };
            let (corpus, _) = load_corpus(&data)?;
            let ck = load_checkpoint(&ckpt)?;
            ck.check_fingerprint(&corpus.fingerprint())?;
            for (s, sep) in export_cwr(&ck, &corpus, &settings, probe.unwrap_or(cfg.eval.plot_probe), &out)? {
                println!("{s}\tsep {sep:.6}");
            }
        }
        Command::Reproduce { out } => {
            let cfg = load_config(&common, &[])?;
            let out = out.unwrap_or_else(|| home(&cfg));
            let o = reproduce(&cfg, Path::new(&out), common.force, ECHO_EVERY)?;
            print!("{}", o.summary);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.common, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code())
}
