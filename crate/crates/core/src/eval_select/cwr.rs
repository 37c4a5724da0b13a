use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::corpus::{Corpus, Direction, LanguageSpec, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{bind, decoder_forward, encoder_forward, Dropout, ModelConfig, ModelParams};
use crate::objectives::PositiveBatch;
use crate::trainer::Checkpoint;

/// Probe size for the selection indicator.
pub const SELECT_PROBE: usize = 100;
/// Probe size for plot export.
pub const PLOT_PROBE: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CwrSetting {
    SupervisedOn,
    ZeroshotOn,
    SupervisedOff,
    ZeroshotOff,
}

impl CwrSetting {
    pub const ALL: [CwrSetting; 4] = [
        CwrSetting::SupervisedOn,
        CwrSetting::ZeroshotOn,
        CwrSetting::SupervisedOff,
        CwrSetting::ZeroshotOff,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CwrSetting::SupervisedOn => "supervised_on",
            CwrSetting::ZeroshotOn => "zeroshot_on",
            CwrSetting::SupervisedOff => "supervised_off",
            CwrSetting::ZeroshotOff => "zeroshot_off",
        }
    }

    pub fn is_off(self) -> bool {
        matches!(self, CwrSetting::SupervisedOff | CwrSetting::ZeroshotOff)
    }

    pub fn default_directions(self, corpus: &Corpus) -> Vec<Direction> {
        match self {
            CwrSetting::SupervisedOn | CwrSetting::SupervisedOff => corpus.supervised_directions(),
            CwrSetting::ZeroshotOn | CwrSetting::ZeroshotOff => corpus.zeroshot_directions(),
        }
    }
}

impl std::fmt::Display for CwrSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CwrSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CwrSetting::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown CWR setting {s:?}")))
    }
}

/// Language whose rendering feeds the decoder in an off-target setting:
/// the central language when it is not part of the direction, otherwise
/// the first other language.
pub fn off_language(corpus: &Corpus, d: Direction) -> Result<usize> {
    let c = corpus.central();
    if c != d.src && c != d.tgt {
        return Ok(c);
    }
    (0..corpus.languages.len())
        .find(|&l| l != d.src && l != d.tgt)
        .ok_or_else(|| Error::Corpus("no language outside the direction".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangPoints {
    /// Intended target language of every point.
    pub lang: usize,
    pub points: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CwrPointSet {
    pub setting: CwrSetting,
    pub step: u64,
    pub probe: Vec<usize>,
    pub groups: Vec<LangPoints>,
}

impl CwrPointSet {
    pub fn num_points(&self) -> usize {
        self.groups.iter().map(|g| g.points.len()).sum()
    }
}

/// The first `size` aligned test sentences.
pub fn probe_ids(corpus: &Corpus, size: usize) -> Vec<usize> {
    corpus.test.iter().take(size).map(|s| s.concept_id).collect()
}

/// Final decoder states under teacher forcing, one point per non-pad
/// target position, grouped by target language. Off settings feed the
/// decoder the same content rendered in [`off_language`].
pub fn extract_cwrs(
    params: &ModelParams,
    cfg: &ModelConfig,
    corpus: &Corpus,
    probe: &[usize],
    setting: CwrSetting,
    directions: &[Direction],
) -> Result<CwrPointSet> {
    let vocab: Vocabulary = corpus.vocabulary()?;
    let d = cfg.d_model;
    let mut groups: Vec<LangPoints> = Vec::new();
    for &dir in directions {
        let dec_lang = if setting.is_off() { off_language(corpus, dir)? } else { dir.tgt };
        let rows = probe
            .iter()
            .map(|&id| {
                let src = vocab.encode(corpus.aligned_render(id, dir.src)?)?;
                let dec = vocab.encode(corpus.aligned_render(id, dec_lang)?)?;
                Ok((src, dec))
            })
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            continue;
        }
        let batch = PositiveBatch::new(&vocab, dir, &rows)?;
        let mut g = Graph::new();
        let bound = bind(&mut g, params);
        let enc = encoder_forward(&mut g, &bound, cfg, &batch.src, &mut Dropout::off())?;
        let out = decoder_forward(&mut g, &bound, cfg, &enc, &batch.dec_in, &mut Dropout::off())?;
        let cwr = g.value(out.cwr);
        let points: Vec<Vec<f64>> = batch
            .dec_in
            .mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(r, _)| cwr.data()[r * d..(r + 1) * d].to_vec())
            .collect();
        match groups.iter_mut().find(|g| g.lang == dir.tgt) {
            Some(g) => g.points.extend(points),
            None => groups.push(LangPoints { lang: dir.tgt, points }),
        }
    }
    groups.sort_by_key(|g| g.lang);
    Ok(CwrPointSet {
        setting,
        step: 0,
        probe: probe.to_vec(),
        groups,
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_cross_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let total: f64 = a.iter().map(|p| b.iter().map(|q| dist(p, q)).sum::<f64>()).sum();
    total / (a.len() * b.len()) as f64
}

fn centroid(points: &[Vec<f64>]) -> Vec<f64> {
    let mut c = vec![0.0; points[0].len()];
    for p in points {
        c.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    c.iter_mut().for_each(|a| *a /= points.len() as f64);
    c
}

fn cmp_groups(a: &[Vec<f64>], b: &[Vec<f64>]) -> std::cmp::Ordering {
    a.len().cmp(&b.len()).then_with(|| {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

/// Spread below which a language's points count as collapsed.
pub const MIN_SPREAD: f64 = 1e-12;

/// `[Σ_{i<j} Dis(P_i, P_j) · 2] / [Σ_i Dis(P_i, mean_i) · (N + 1)]` with
/// `Dis` the mean Euclidean distance over all cross pairs and `N` the
/// number of languages.
pub fn separation_degree(groups: &[Vec<Vec<f64>>]) -> Result<f64> {
    if groups.len() < 2 {
        return Err(Error::Degenerate(format!("need at least 2 languages, got {}", groups.len())));
    }
    let dim = groups[0].first().map(Vec::len).unwrap_or(0);
    for g in groups {
        if g.len() < 2 {
            return Err(Error::Degenerate(format!("every language needs 2 points, got {}", g.len())));
        }
        if g.iter().any(|p| p.len() != dim) || dim == 0 {
            return Err(Error::dim("points differ in dimension"));
        }
        if g.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("CWR point"));
        }
    }
    // A canonical group order makes the result independent of how the
    // languages are labelled, down to the last bit.
    let mut groups: Vec<&Vec<Vec<f64>>> = groups.iter().collect();
    groups.sort_by(|a, b| cmp_groups(a, b));
    let n = groups.len();
    let mut inter = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            inter += mean_cross_distance(&groups[i], &groups[j]);
        }
    }
    let mut intra = 0.0;
    for (i, g) in groups.iter().enumerate() {
        let spread = mean_cross_distance(g, &[centroid(g)]);
        if spread < MIN_SPREAD {
            return Err(Error::Degenerate(format!("language group {i} has collapsed spread {spread:e}")));
        }
        intra += spread;
    }
    Ok(inter * 2.0 / (intra * (n as f64 + 1.0)))
}

impl CwrPointSet {
    pub fn separation_degree(&self) -> Result<f64> {
        let groups: Vec<Vec<Vec<f64>>> = self.groups.iter().map(|g| g.points.clone()).collect();
        separation_degree(&groups)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub step: u64,
    pub sep: f64,
    pub converged: bool,
}

/// How consecutive Sep values are compared against the threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convergence {
    #[default]
    Absolute,
    /// Change divided by the magnitude of the earlier value.
    Relative,
}

impl std::str::FromStr for Convergence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(Convergence::Absolute),
            "relative" => Ok(Convergence::Relative),
            _ => Err(Error::config(format!("unknown convergence mode {s:?}"))),
        }
    }
}

/// First point whose change from its predecessor is below `threshold`;
/// otherwise the last point, flagged as not converged.
pub fn select_by_trajectory(trajectory: &[(u64, f64)], threshold: f64, mode: Convergence) -> Result<Selection> {
    if !(threshold >= 0.0) {
        return Err(Error::config(format!("threshold must be non-negative, got {threshold}")));
    }
    let last = trajectory.len().checked_sub(1).ok_or_else(|| Error::contract("empty checkpoint series"))?;
    let change = |k: usize| {
        let (prev, cur) = (trajectory[k - 1].1, trajectory[k].1);
        match mode {
            Convergence::Absolute => (cur - prev).abs(),
            Convergence::Relative => (cur - prev).abs() / prev.abs(),
        }
    };
    let hit = (1..trajectory.len()).find(|&k| change(k) < threshold);
    let index = hit.unwrap_or(last);
    Ok(Selection {
        index,
        step: trajectory[index].0,
        sep: trajectory[index].1,
        converged: hit.is_some(),
    })
}

/// Sep under the zero-shot off-target setting for every checkpoint.
pub fn sep_trajectory(series: &[Checkpoint], corpus: &Corpus, probe: &[usize]) -> Result<Vec<(u64, f64)>> {
    let dirs = CwrSetting::ZeroshotOff.default_directions(corpus);
    series
        .iter()
        .map(|ck| {
            let set = extract_cwrs(&ck.params, &ck.model, corpus, probe, CwrSetting::ZeroshotOff, &dirs)?;
            Ok((ck.step, set.separation_degree()?))
        })
        .collect()
}

pub fn select_checkpoint(
    series: &[Checkpoint],
    corpus: &Corpus,
    probe: &[usize],
    threshold: f64,
    mode: Convergence,
) -> Result<(Selection, Vec<(u64, f64)>)> {
    if series.is_empty() {
        return Err(Error::contract("empty checkpoint series"));
    }
    if series.windows(2).any(|w| w[0].step >= w[1].step) {
        return Err(Error::contract("checkpoint series is not ordered by step"));
    }
    let traj = sep_trajectory(series, corpus, probe)?;
    Ok((select_by_trajectory(&traj, threshold, mode)?, traj))
}

pub const PCA_TOL: f64 = 1e-9;
pub const PCA_MAX_ITER: usize = 1000;

/// Projection onto the top two principal directions, found by power
/// iteration on the covariance with deflation.
pub fn pca_project_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    if points.len() < 3 {
        return Err(Error::Degenerate(format!("PCA needs 3 points, got {}", points.len())));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::dim("points differ in dimension"));
    }
    let mean = centroid(points);
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(a, b)| a - b).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for p in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += p[i] * p[j];
            }
        }
    }
    let scale = 1.0 / points.len() as f64;
    cov.iter_mut().for_each(|c| *c *= scale);
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if !(trace > MIN_SPREAD) {
        return Err(Error::Degenerate("point cloud has no variance".into()));
    }
    let mut axes: Vec<Vec<f64>> = Vec::new();
    for k in 0..2.min(d) {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i + k) as f64 / d as f64).collect();
        for _ in 0..PCA_MAX_ITER {
            orthonormalize(&mut v, &axes);
            let mut w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| cov[i * d + j] * v[j]).sum()).collect();
            for a in &axes {
                let dot: f64 = a.iter().zip(&w).map(|(x, y)| x * y).sum();
                w.iter_mut().zip(a).for_each(|(x, y)| *x -= dot * y);
            }
            // Remaining variance is rounding noise: any orthogonal axis will do.
            if w.iter().map(|x| x * x).sum::<f64>().sqrt() <= MIN_SPREAD * trace {
                break;
            }
            orthonormalize(&mut w, &axes);
            let delta = v.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = w;
            if delta < PCA_TOL {
                break;
            }
        }
        orthonormalize(&mut v, &axes);
        axes.push(v);
    }
    Ok(centered
        .iter()
        .map(|p| {
            let proj = |a: Option<&Vec<f64>>| a.map_or(0.0, |a| a.iter().zip(p).map(|(x, y)| x * y).sum());
            [proj(axes.first()), proj(axes.get(1))]
        })
        .collect())
}

/// Removes components along `axes` and normalizes; a vanishing vector is
/// replaced by the first coordinate direction outside their span.
fn orthonormalize(v: &mut [f64], axes: &[Vec<f64>]) {
    for a in axes.iter().chain(axes) {
        let dot: f64 = a.iter().zip(v.iter()).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(a).for_each(|(x, y)| *x -= dot * y);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-300 {
        v.iter_mut().for_each(|x| *x /= norm);
        return;
    }
    for i in 0..v.len() {
        let mut e = vec![0.0; v.len()];
        e[i] = 1.0;
        for a in axes {
            let dot = a[i];
            e.iter_mut().zip(a).for_each(|(x, y)| *x -= dot * y);
        }
        let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().zip(&e).for_each(|(x, y)| *x = y / n);
            return;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotPoint {
    pub lang: usize,
    pub x: f64,
    pub y: f64,
}

pub fn plot_points(set: &CwrPointSet) -> Result<Vec<PlotPoint>> {
    let all: Vec<Vec<f64>> = set.groups.iter().flat_map(|g| g.points.iter().cloned()).collect();
    let xy = pca_project_2d(&all)?;
    let langs = set.groups.iter().flat_map(|g| std::iter::repeat_n(g.lang, g.points.len()));
    Ok(langs.zip(xy).map(|(lang, [x, y])| PlotPoint { lang, x, y }).collect())
}

/// Tab-separated `lang\tx\ty` rows.
pub fn render_plot_tsv(points: &[PlotPoint], languages: &[LanguageSpec]) -> String {
    let mut out = String::from("lang\tx\ty\n");
    for p in points {
        writeln!(out, "{}\t{}\t{}", languages[p.lang].id, p.x, p.y).expect("string write");
    }
    out
}

#[derive(Serialize)]
struct CwrRecord<'a> {
    setting: CwrSetting,
    step: u64,
    lang: &'a str,
    point: &'a [f64],
}

/// One JSON object per point: `{setting, step, lang, point}`.
pub fn render_cwr_jsonl(set: &CwrPointSet, languages: &[LanguageSpec]) -> String {
    let mut out = String::new();
    for g in &set.groups {
        for p in &g.points {
            let rec = CwrRecord {
                setting: set.setting,
                step: set.step,
                lang: &languages[g.lang].id,
                point: p,
            };
            out.push_str(&serde_json::to_string(&rec).expect("plain record"));
            out.push('\n');
        }
    }
    out
}
