//! Decoder-representation probes, the separation-degree indicator and
//! checkpoint selection, beam search, and translation metrics.

mod cwr;
mod metrics;
mod report;
mod search;

pub use cwr::{
    extract_cwrs, off_language, pca_project_2d, plot_points, probe_ids, render_cwr_jsonl,
    render_plot_tsv, select_by_trajectory, select_checkpoint, sep_trajectory, separation_degree,
    Convergence, CwrPointSet, CwrSetting, LangPoints, PlotPoint, Selection, MIN_SPREAD, PCA_MAX_ITER, PCA_TOL,
    PLOT_PROBE, SELECT_PROBE,
};
pub use metrics::{bleu, bleu_text, detect_language, otr, Detected, DETECT_THRESHOLD};
pub use report::{
    evaluate, evaluate_references, evaluate_with, Aggregate, DirectionScore, DirectionSet,
    EvalReport,
};
pub use search::{
    banned_tokens, beam_search, greedy, translate, BeamConfig, Hypothesis, ModelStepper, StepModel,
};
