//! One-shot experiment: data, pretraining, both tuning runs, Sep selection,
//! evaluation, CWR export and a markdown summary.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use unions_core::corpus::{Corpus, Direction};
use unions_core::eval_select::{evaluate, CwrSetting, DirectionSet, EvalReport, Selection};
use unions_core::trainer::{checkpoint_file_name, load_checkpoint, Checkpoint, Phase};
use unions_core::Error;

use crate::commands::{
    export_cwr, fresh_dir, gen_data, in_stage, load_corpus, select, train, write_report, CliResult,
    CONFIG_FILE,
};
use crate::config::ExperimentConfig;

pub const SUMMARY_FILE: &str = "summary.md";

/// Everything `reproduce` measured, beside the files it wrote.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub summary: String,
    pub pretrain: EvalReport,
    /// Vanilla tuning at the selected step.
    pub vanilla: EvalReport,
    /// The UNIONS checkpoint picked by Sep.
    pub unions: EvalReport,
    pub selection: Selection,
    pub trajectory: Vec<(u64, f64)>,
    /// Mean zero-shot OTR of every UNIONS checkpoint, when enabled.
    pub series_otr: Vec<(u64, f64)>,
    /// Sep of each CWR setting at the selected UNIONS checkpoint.
    pub unions_seps: Vec<(CwrSetting, f64)>,
    /// Zero-shot off-target Sep of the vanilla checkpoint at the same step.
    pub vanilla_sep: f64,
}

fn zeroshot_otr(r: &EvalReport) -> f64 {
    r.zeroshot.as_ref().map_or(f64::NAN, |a| a.otr)
}

/// Runs every stage under `out`. Stage failures carry the stage name.
pub fn reproduce(cfg: &ExperimentConfig, out: &Path, force: bool, echo_every: u64) -> CliResult<Outcome> {
    fresh_dir(out, force)?;
    fs::write(out.join(CONFIG_FILE), cfg.render())?;
    let data = out.join("data");
    let (pre_dir, van_dir, uni_dir) = (out.join("pretrain"), out.join("vanilla"), out.join("unions"));

    in_stage("gen-data", gen_data(cfg, &data, false))?;
    let (corpus, _) = in_stage("gen-data", load_corpus(&data))?;
    let pre = in_stage("pretrain", train(cfg, Phase::Pretrain, &data, None, &pre_dir, false, echo_every))?;
    let pre_path = pre_dir.join(checkpoint_file_name(pre.step));
    in_stage(
        "vanilla-tune",
        train(cfg, Phase::VanillaTune, &data, Some(&pre_path), &van_dir, false, echo_every),
    )?;
    in_stage(
        "unions-tune",
        train(cfg, Phase::UnionsTune, &data, Some(&pre_path), &uni_dir, false, echo_every),
    )?;
    let e = &cfg.eval;
    let sel = in_stage("select", select(&uni_dir, &data, e.select_probe, e.threshold, e.convergence))?;
    let step = sel.selection.step;

    let all = DirectionSet::All.directions(&corpus);
    let eval_ck = |ck: &Checkpoint, dirs: &[Direction]| -> CliResult<EvalReport> {
        Ok(evaluate(&ck.params, &ck.model, &corpus, dirs, e.beam, e.sentences)?)
    };
    let load = |p: &Path| -> CliResult<Checkpoint> { Ok(load_checkpoint(p)?) };
    let (pretrain, vanilla, unions, series_otr) = in_stage(
        "evaluate",
        (|| {
            let van_ck = load(&van_dir.join(checkpoint_file_name(step)))?;
            let uni_ck = load(&sel.selected_path)?;
            let mut unions = eval_ck(&uni_ck, &all)?;
            unions.sep_trajectory = sel.trajectory.clone();
            let zs = corpus.zeroshot_directions();
            let mut series_otr = Vec::new();
            if e.series_otr {
                for &(s, _) in &sel.trajectory {
                    let r = if s == step {
                        unions.clone()
                    } else {
                        eval_ck(&load(&uni_dir.join(checkpoint_file_name(s)))?, &zs)?
                    };
                    series_otr.push((s, zeroshot_otr(&r)));
                }
            }
            Ok((eval_ck(&pre, &all)?, eval_ck(&van_ck, &all)?, unions, series_otr))
        })(),
    )?;
    let eval_dir = out.join("eval");
    for (name, r) in [("pretrain", &pretrain), ("vanilla", &vanilla), ("unions", &unions)] {
        in_stage("evaluate", write_report(r, &eval_dir.join(format!("{name}.json"))))?;
    }

    let cwr_dir = out.join("cwr");
    let unions_seps = in_stage("export-cwr", (|| {
        let ck = load(&sel.selected_path)?;
        export_cwr(&ck, &corpus, &CwrSetting::ALL, e.plot_probe, &cwr_dir)
    })())?;
    let vanilla_sep = in_stage("export-cwr", (|| {
        let ck = load(&van_dir.join(checkpoint_file_name(step)))?;
        export_cwr(&ck, &corpus, &[CwrSetting::ZeroshotOff], e.plot_probe, &out.join("cwr-vanilla"))
    })())?[0]
        .1;

    let mut outcome = Outcome {
        summary: String::new(),
        pretrain,
        vanilla,
        unions,
        selection: sel.selection,
        trajectory: sel.trajectory,
        series_otr,
        unions_seps,
        vanilla_sep,
    };
    outcome.summary = in_stage("summary", render_summary(cfg, &corpus, &outcome))?;
    fs::write(out.join(SUMMARY_FILE), &outcome.summary)?;
    Ok(outcome)
}

fn row(out: &mut String, name: &str, cells: &[f64], decimals: usize) {
    out.push_str("| ");
    out.push_str(name);
    for c in cells {
        write!(out, " | {c:.decimals$}").expect("string write");
    }
    out.push_str(" |\n");
}

fn delta_row(out: &mut String, base: &[f64], new: &[f64], decimals: usize) {
    let d: Vec<f64> = new.iter().zip(base).map(|(n, b)| n - b).collect();
    out.push_str("| Δ");
    for c in d {
        write!(out, " | {c:+.decimals$}").expect("string write");
    }
    out.push_str(" |\n");
}

/// Per-direction cells plus the average, in direction-name order.
fn cells(r: &EvalReport, zeroshot: bool, otr: bool) -> CliResult<(Vec<String>, Vec<f64>)> {
    let mut names = Vec::new();
    let mut vals = Vec::new();
    for (name, s) in r.directions.iter().filter(|(_, s)| s.zeroshot == zeroshot) {
        names.push(name.clone());
        vals.push(if otr { 100.0 * s.otr } else { s.bleu });
    }
    let agg = if zeroshot { &r.zeroshot } else { &r.supervised };
    let agg = agg.as_ref().ok_or_else(|| Error::Contract("report lacks an aggregate".into()))?;
    names.push("AVG".into());
    vals.push(if otr { 100.0 * agg.otr } else { agg.bleu });
    Ok((names, vals))
}

fn table(out: &mut String, title: &str, o: &Outcome, zeroshot: bool, otr: bool) -> CliResult<()> {
    let (names, pre) = cells(&o.pretrain, zeroshot, otr)?;
    let (_, van) = cells(&o.vanilla, zeroshot, otr)?;
    let (_, uni) = cells(&o.unions, zeroshot, otr)?;
    writeln!(out, "### {title}\n").expect("string write");
    writeln!(out, "| Model | {} |", names.join(" | ")).expect("string write");
    writeln!(out, "|---|{}", "---|".repeat(names.len())).expect("string write");
    row(out, "Pretrain", &pre, 2);
    row(out, "Vanilla", &van, 2);
    row(out, "+UNIONS", &uni, 2);
    delta_row(out, &van, &uni, 2);
    out.push('\n');
    Ok(())
}

pub fn render_summary(cfg: &ExperimentConfig, corpus: &Corpus, o: &Outcome) -> CliResult<String> {
    let mut s = String::new();
    let w = |s: &mut String, line: String| s.push_str(&(line + "\n"));
    w(&mut s, "# UNIONS toy reproduction\n".into());
    w(
        &mut s,
        format!(
            "- seed {}, {} languages, {} training pairs, corpus {}",
            cfg.seed,
            corpus.languages.len(),
            corpus.train.len(),
            &corpus.fingerprint()[..16]
        ),
    );
    w(
        &mut s,
        format!(
            "- pretrain {} steps; tuning {} steps at lr {}, unlikelihood weight {}",
            cfg.pretrain.total_steps, cfg.tune.total_steps, cfg.tune.lr, cfg.tune.ul_weight
        ),
    );
    let sel = &o.selection;
    w(
        &mut s,
        format!(
            "- selected UNIONS checkpoint: step {} (Sep {:.4}, {}); vanilla compared at the same step",
            sel.step,
            sel.sep,
            if sel.converged { "converged" } else { "not converged, last checkpoint" }
        ),
    );
    w(
        &mut s,
        format!(
            "- beam {}, {} test sentences per direction\n",
            cfg.eval.beam.beam,
            o.unions.directions.values().next().map_or(0, |d| d.sentences)
        ),
    );
    w(&mut s, "## Zero-shot\n".into());
    table(&mut s, "BLEU", o, true, false)?;
    table(&mut s, "OTR %", o, true, true)?;
    w(&mut s, "## Supervised\n".into());
    table(&mut s, "BLEU", o, false, false)?;
    table(&mut s, "OTR %", o, false, true)?;

    w(&mut s, "## Sep trajectory (zero-shot, off-target decoder input)\n".into());
    if o.series_otr.is_empty() {
        w(&mut s, "| step | Sep |\n|---|---|".into());
        for (step, sep) in &o.trajectory {
            w(&mut s, format!("| {step} | {sep:.4} |"));
        }
    } else {
        w(&mut s, "| step | Sep | zero-shot OTR % |\n|---|---|---|".into());
        for ((step, sep), (_, otr)) in o.trajectory.iter().zip(&o.series_otr) {
            w(&mut s, format!("| {step} | {sep:.4} | {:.2} |", 100.0 * otr));
        }
    }
    w(&mut s, "\n## CWR separation at the selected checkpoint\n".into());
    w(&mut s, "| setting | Sep |\n|---|---|".into());
    for (setting, sep) in &o.unions_seps {
        w(&mut s, format!("| {setting} | {sep:.4} |"));
    }
    w(
        &mut s,
        format!("| zeroshot_off (vanilla, same step) | {:.4} |", o.vanilla_sep),
    );
    Ok(s)
}
