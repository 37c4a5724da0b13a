//! The pipeline stages behind each CLI verb.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use unions_core::corpus::{generate_corpus, Corpus, Direction, Manifest};
use unions_core::eval_select::{
    evaluate, evaluate_references, extract_cwrs, plot_points, probe_ids, render_cwr_jsonl,
    render_plot_tsv, select_by_trajectory, sep_trajectory, BeamConfig, Convergence, CwrSetting,
    DirectionSet, EvalReport, Selection,
};
use unions_core::trainer::{
    checkpoint_file_name, load_checkpoint, pretrain_start, run, tune_start, Checkpoint, Phase, RunDir,
    TrainConfig,
};
use unions_core::Error;

use crate::config::ExperimentConfig;

pub const SELECTED_FILE: &str = "selected.ckpt";
pub const TRAJECTORY_FILE: &str = "sep_trajectory.tsv";
pub const CONFIG_FILE: &str = "config.txt";
/// Loss lines are echoed to stderr at this cadence.
pub const ECHO_EVERY: u64 = 50;

/// A failed command: the underlying error, the stage it came from, and the
/// process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub stage: Option<&'static str>,
    pub error: Error,
}

impl CliError {
    /// 2 validation, 3 data or fingerprint, 4 internal numerical.
    pub fn exit_code(&self) -> u8 {
        match &self.error {
            Error::Config(_) | Error::Length { .. } => 2,
            Error::Corpus(_)
            | Error::Parse { .. }
            | Error::Checkpoint(_)
            | Error::Fingerprint { .. }
            | Error::Io(_)
            | Error::Json(_) => 3,
            Error::Dimension(_) | Error::NonFinite(_) | Error::Contract(_) | Error::Degenerate(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.stage {
            Some(s) => write!(f, "stage {s} failed: {}", self.error),
            None => write!(f, "{}", self.error),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(error: Error) -> Self {
        CliError { stage: None, error }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Tags an error with the stage that produced it, keeping an inner tag.
pub fn in_stage<T>(stage: &'static str, r: CliResult<T>) -> CliResult<T> {
    r.map_err(|e| CliError {
        stage: e.stage.or(Some(stage)),
        error: e.error,
    })
}

/// Output root: `UNIONS_HOME`, else `./unions-out`.
pub fn default_home() -> PathBuf {
    std::env::var_os("UNIONS_HOME").map_or_else(|| PathBuf::from("unions-out"), PathBuf::from)
}

fn is_nonempty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Creates `dir`, refusing a non-empty one unless `force` wipes it first.
pub fn fresh_dir(dir: &Path, force: bool) -> CliResult<()> {
    if is_nonempty_dir(dir) {
        if !force {
            return Err(Error::Config(format!(
                "{} exists and is not empty; pass --force to overwrite",
                dir.display()
            ))
            .into());
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Path, force: bool) -> CliResult<Manifest> {
    let corpus = generate_corpus(&cfg.corpus)?;
    fresh_dir(out, force)?;
    Ok(corpus.write_dir(out)?)
}

pub fn load_corpus(dir: &Path) -> CliResult<(Corpus, Manifest)> {
    Ok(Corpus::read_dir(dir)?)
}

/// Checkpoints named `step-NNNNNN.ckpt` in `dir`, ordered by step.
pub fn list_checkpoints(dir: &Path) -> CliResult<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let step = name
            .strip_prefix("step-")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(step) = step {
            if checkpoint_file_name(step) == name {
                out.push((step, path));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn ul_weight_warning(cfg: &TrainConfig) -> Option<String> {
    (cfg.phase == Phase::UnionsTune && cfg.ul_weight == 0.0)
        .then(|| "warning: ul_weight is 0, so unions tuning is identical to vanilla tuning".to_string())
}

/// Trains one phase into `out`. An existing run of the same configuration
/// is resumed from its latest checkpoint; a different one needs `force`.
pub fn train(
    cfg: &ExperimentConfig,
    phase: Phase,
    data: &Path,
    from: Option<&Path>,
    out: &Path,
    force: bool,
    echo_every: u64,
) -> CliResult<Checkpoint> {
    let (corpus, manifest) = load_corpus(data)?;
    let tcfg = cfg.train_config(phase);
    if let Some(w) = ul_weight_warning(&tcfg) {
        eprintln!("{w}");
    }
    let start = match (phase, from) {
        (Phase::Pretrain, _) => {
            let mut model = cfg.model.clone();
            model.vocab_size = corpus.vocabulary()?.len();
            pretrain_start(&model, &tcfg, &manifest.fingerprint)?
        }
        (_, Some(path)) => tune_start(&load_checkpoint(path)?, &tcfg)?,
        (_, None) => return Err(Error::Config(format!("phase {phase} needs a start checkpoint (--from)")).into()),
    };
    start.check_fingerprint(&manifest.fingerprint)?;

    let existing = if out.exists() { list_checkpoints(out)? } else { Vec::new() };
    let state = match existing.last() {
        Some((_, path)) if !force => {
            let latest = load_checkpoint(path)?;
            let same_start = existing[0].0 == 0 && load_checkpoint(&existing[0].1)?.to_bytes() == start.to_bytes();
            if !same_start {
                return Err(Error::Config(format!(
                    "{} holds a different run; pass --force to start over",
                    out.display()
                ))
                .into());
            }
            RunDir::truncate_log(out, latest.step)?;
            for (step, p) in &existing {
                if *step > latest.step {
                    fs::remove_file(p)?;
                }
            }
            if latest.step > 0 {
                eprintln!("resuming {phase} from step {}", latest.step);
            }
            latest
        }
        _ => {
            fresh_dir(out, force)?;
            start
        }
    };
    // Short runs still report at every checkpoint.
    let echo = if echo_every == 0 { 0 } else { echo_every.min(tcfg.checkpoint_every) };
    let mut hooks = RunDir::open(out, echo)?;
    Ok(run(state, &corpus, &mut hooks)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectOutcome {
    pub selection: Selection,
    pub trajectory: Vec<(u64, f64)>,
    pub selected_path: PathBuf,
}

pub fn render_trajectory(trajectory: &[(u64, f64)]) -> String {
    trajectory.iter().map(|(s, v)| format!("{s}\t{v}\n")).collect()
}

/// Computes the Sep trajectory of every checkpoint in `run_dir`, writes it
/// as `step\tsep` rows and copies the selected checkpoint.
pub fn select(
    run_dir: &Path,
    data: &Path,
    probe: usize,
    threshold: f64,
    mode: Convergence,
) -> CliResult<SelectOutcome> {
    let (corpus, _) = load_corpus(data)?;
    let files = list_checkpoints(run_dir)?;
    if files.is_empty() {
        return Err(Error::Corpus(format!("no checkpoints in {}", run_dir.display())).into());
    }
    let series = files
        .iter()
        .map(|(_, p)| load_checkpoint(p))
        .collect::<Result<Vec<_>, _>>()?;
    for ck in &series {
        ck.check_fingerprint(&corpus.fingerprint())?;
    }
    let probe = probe_ids(&corpus, probe);
    let trajectory = sep_trajectory(&series, &corpus, &probe)?;
    let selection = select_by_trajectory(&trajectory, threshold, mode)?;
    fs::write(run_dir.join(TRAJECTORY_FILE), render_trajectory(&trajectory))?;
    let selected_path = run_dir.join(SELECTED_FILE);
    fs::copy(&files[selection.index].1, &selected_path)?;
    Ok(SelectOutcome {
        selection,
        trajectory,
        selected_path,
    })
}

pub fn select_line(s: &Selection) -> String {
    format!(
        "selected step {} sep {:.6} converged {}",
        s.step,
        s.sep,
        if s.converged { "true" } else { "false (no change below threshold; last checkpoint used)" }
    )
}

/// `supervised`, `zeroshot`, `all`, or a comma-separated list such as
/// `L1-L2,L2-L3`.
pub fn parse_directions(corpus: &Corpus, spec: &str) -> CliResult<Vec<Direction>> {
    if let Ok(set) = spec.parse::<DirectionSet>() {
        return Ok(set.directions(corpus));
    }
    spec.split(',')
        .map(|name| {
            corpus
                .parse_direction(name.trim())
                .filter(|d| d.src != d.tgt)
                .ok_or_else(|| Error::Corpus(format!("direction {name:?} is absent from the test data")).into())
        })
        .collect()
}

/// Evaluates a checkpoint, or the references themselves when `ckpt` is
/// `None`.
pub fn evaluate_cmd(
    ckpt: Option<&Path>,
    data: &Path,
    directions: &str,
    beam: BeamConfig,
    sentences: Option<usize>,
) -> CliResult<EvalReport> {
    let (corpus, _) = load_corpus(data)?;
    let dirs = parse_directions(&corpus, directions)?;
    match ckpt {
        None => Ok(evaluate_references(&corpus, &dirs)?),
        Some(path) => {
            let ck = load_checkpoint(path)?;
            ck.check_fingerprint(&corpus.fingerprint())?;
            Ok(evaluate(&ck.params, &ck.model, &corpus, &dirs, beam, sentences)?)
        }
    }
}

pub fn cwr_file_names(setting: CwrSetting) -> (String, String) {
    (format!("cwr-{setting}.jsonl"), format!("plot-{setting}.tsv"))
}

/// Writes the raw CWRs and their 2-D projection for each setting. Returns
/// the Sep of each setting.
pub fn export_cwr(
    ck: &Checkpoint,
    corpus: &Corpus,
    settings: &[CwrSetting],
    probe: usize,
    out: &Path,
) -> CliResult<Vec<(CwrSetting, f64)>> {
    fs::create_dir_all(out)?;
    let probe = probe_ids(corpus, probe);
    let mut seps = Vec::new();
    for &setting in settings {
        let dirs = setting.default_directions(corpus);
        let mut set = extract_cwrs(&ck.params, &ck.model, corpus, &probe, setting, &dirs)?;
        set.step = ck.step;
        let (raw, plot) = cwr_file_names(setting);
        fs::write(out.join(raw), render_cwr_jsonl(&set, &corpus.languages))?;
        fs::write(out.join(plot), render_plot_tsv(&plot_points(&set)?, &corpus.languages))?;
        seps.push((setting, set.separation_degree()?));
    }
    Ok(seps)
}

pub fn write_report(report: &EvalReport, path: &Path) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(report).map_err(Error::Json)?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}
