//! Plain-text `key = value` experiment configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use unions_core::corpus::{CorpusConfig, LanguageSpec, Vocabulary};
use unions_core::eval_select::{BeamConfig, Convergence, PLOT_PROBE, SELECT_PROBE};
use unions_core::model::ModelConfig;
use unions_core::objectives::NegativeMode;
use unions_core::trainer::{Phase, TrainConfig};
use unions_core::{Error, Result};

const MAX_LINE: usize = 4096;

/// Splits a config file into `(key, value)` pairs. Blank lines and lines
/// starting with `#` are skipped; duplicate keys are an error.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        if raw.len() > MAX_LINE {
            return Err(Error::Parse { line, msg: "line too long".into() });
        }
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let (k, v) = t.split_once('=').ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected key = value, found {t:?}"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.chars().any(char::is_whitespace) {
            return Err(Error::Parse { line, msg: format!("invalid key {k:?}") });
        }
        if !seen.insert(k.to_string()) {
            return Err(Error::Parse { line, msg: format!("duplicate key {k:?}") });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub beam: BeamConfig,
    /// Test sentences per direction; `None` uses the whole split.
    pub sentences: Option<usize>,
    pub select_probe: usize,
    pub plot_probe: usize,
    pub threshold: f64,
    pub convergence: Convergence,
    /// Evaluate zero-shot OTR at every UNIONS checkpoint in `reproduce`.
    pub series_otr: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            beam: BeamConfig::default(),
            sentences: Some(100),
            select_probe: SELECT_PROBE,
            plot_probe: PLOT_PROBE,
            threshold: 0.01,
            convergence: Convergence::Absolute,
            series_otr: true,
        }
    }
}

/// Everything one experiment needs. The global seed is copied into every
/// stage by [`ExperimentConfig::finalize`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    /// Shared by both tuning runs; the vanilla run drops the unlikelihood term.
    pub tune: TrainConfig,
    pub eval: EvalOptions,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut c = ExperimentConfig {
            seed: 1,
            corpus: CorpusConfig::default(),
            model: ModelConfig::toy(0),
            pretrain: TrainConfig::pretrain(),
            tune: TrainConfig::tune(Phase::UnionsTune),
            eval: EvalOptions::default(),
            out: None,
        };
        c.finalize().expect("default config is valid");
        c
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn optional<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn show_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn negative_mode(key: &str, v: &str) -> Result<NegativeMode> {
    match v {
        "per-batch" => Ok(NegativeMode::PerBatch),
        "per-sentence" => Ok(NegativeMode::PerSentence),
        _ => Err(Error::Config(format!("{key}: expected per-batch or per-sentence, got {v:?}"))),
    }
}

fn train_key(t: &mut TrainConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "steps" => t.total_steps = num(key, v)?,
        "lr" => t.lr = num(key, v)?,
        "warmup" => t.warmup_steps = num(key, v)?,
        "max_tokens" => t.max_tokens_per_batch = num(key, v)?,
        "checkpoint_every" => t.checkpoint_every = num(key, v)?,
        "smoothing" => t.smoothing = num(key, v)?,
        "temperature" => t.temperature = num(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn render_train(out: &mut String, prefix: &str, t: &TrainConfig) {
    for (k, v) in [
        ("steps", t.total_steps.to_string()),
        ("lr", t.lr.to_string()),
        ("warmup", t.warmup_steps.to_string()),
        ("max_tokens", t.max_tokens_per_batch.to_string()),
        ("checkpoint_every", t.checkpoint_every.to_string()),
        ("smoothing", t.smoothing.to_string()),
        ("temperature", t.temperature.to_string()),
    ] {
        writeln!(out, "{prefix}.{k} = {v}").expect("string write");
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        for (k, v) in parse_pairs(text)? {
            c.set(&k, &v)?;
        }
        c.finalize()?;
        Ok(c)
    }

    /// Applies one override. Call [`finalize`](Self::finalize) afterwards.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if let Some(k) = key.strip_prefix("pretrain.") {
            if train_key(&mut self.pretrain, k, v)? {
                return Ok(());
            }
        }
        if let Some(k) = key.strip_prefix("tune.") {
            if train_key(&mut self.tune, k, v)? {
                return Ok(());
            }
            match k {
                "ul_weight" => return num(key, v).map(|x| self.tune.ul_weight = x),
                "negative_mode" => return negative_mode(key, v).map(|m| self.tune.negative_mode = m),
                _ => {}
            }
        }
        match key {
            "seed" => self.seed = num(key, v)?,
            "languages" => {
                let n: usize = num(key, v)?;
                if !(4..=64).contains(&n) {
                    return Err(Error::Config(format!(
                        "languages must be between 4 and 64, got {n}; unlikelihood negatives need a language outside every direction"
                    )));
                }
                self.corpus.languages = LanguageSpec::defaults(n);
            }
            "corpus.concepts" => self.corpus.num_concepts = num(key, v)?,
            "corpus.train_sentences" => self.corpus.train_sentences = num(key, v)?,
            "corpus.dev_sentences" => self.corpus.dev_sentences = num(key, v)?,
            "corpus.test_sentences" => self.corpus.test_sentences = num(key, v)?,
            "corpus.zipf" => self.corpus.zipf_exponent = optional(key, v)?,
            "corpus.size_ratios" => {
                self.corpus.size_ratios = if v == "none" {
                    None
                } else {
                    Some(v.split(',').map(|x| num(key, x.trim())).collect::<Result<_>>()?)
                }
            }
            "model.encoder_layers" => self.model.num_encoder_layers = num(key, v)?,
            "model.decoder_layers" => self.model.num_decoder_layers = num(key, v)?,
            "model.d_model" => self.model.d_model = num(key, v)?,
            "model.heads" => self.model.num_heads = num(key, v)?,
            "model.d_ffn" => self.model.d_ffn = num(key, v)?,
            "model.dropout" => self.model.dropout = num(key, v)?,
            "model.max_len" => self.model.max_len = num(key, v)?,
            "eval.beam" => self.eval.beam.beam = num(key, v)?,
            "eval.max_output" => self.eval.beam.max_output = num(key, v)?,
            "eval.length_penalty" => self.eval.beam.length_penalty = num(key, v)?,
            "eval.sentences" => self.eval.sentences = if v == "all" { None } else { Some(num(key, v)?) },
            "eval.series_otr" => self.eval.series_otr = flag(key, v)?,
            "select.probe" => self.eval.select_probe = num(key, v)?,
            "select.threshold" => self.eval.threshold = num(key, v)?,
            "select.convergence" => self.eval.convergence = v.parse()?,
            "plot.probe" => self.eval.plot_probe = num(key, v)?,
            "out" => self.out = if v == "none" { None } else { Some(PathBuf::from(v)) },
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Propagates the seed and the corpus vocabulary size, then validates.
    pub fn finalize(&mut self) -> Result<()> {
        self.corpus.seed = self.seed;
        self.model.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.tune.seed = self.seed;
        self.pretrain.phase = Phase::Pretrain;
        self.pretrain.ul_weight = 0.0;
        self.tune.phase = Phase::UnionsTune;
        self.model.vocab_size = Vocabulary::new(&self.corpus.languages, self.corpus.num_concepts)?.len();
        self.model.validate()?;
        self.pretrain.validate()?;
        self.tune.validate()?;
        if self.eval.beam.beam == 0 || self.eval.beam.max_output == 0 {
            return Err(Error::Config("eval.beam and eval.max_output must be positive".into()));
        }
        if !(self.eval.beam.length_penalty >= 0.0 && self.eval.beam.length_penalty.is_finite()) {
            return Err(Error::Config("eval.length_penalty must be finite and non-negative".into()));
        }
        if self.eval.sentences == Some(0) || self.eval.select_probe == 0 || self.eval.plot_probe == 0 {
            return Err(Error::Config("sentence and probe counts must be positive".into()));
        }
        if !(self.eval.threshold >= 0.0 && self.eval.threshold.is_finite()) {
            return Err(Error::Config("select.threshold must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn unions_config(&self) -> TrainConfig {
        self.tune.clone()
    }

    pub fn vanilla_config(&self) -> TrainConfig {
        TrainConfig {
            phase: Phase::VanillaTune,
            ul_weight: 0.0,
            ..self.tune.clone()
        }
    }

    /// Tuning config for `phase`, or the pretraining config.
    pub fn train_config(&self, phase: Phase) -> TrainConfig {
        match phase {
            Phase::Pretrain => self.pretrain.clone(),
            Phase::UnionsTune => self.unions_config(),
            Phase::VanillaTune => self.vanilla_config(),
        }
    }

    /// Canonical text form; `parse(render())` gives back the same config.
    pub fn render(&self) -> String {
        let c = &self.corpus;
        let m = &self.model;
        let e = &self.eval;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
        kv("seed", self.seed.to_string());
        kv("languages", c.languages.len().to_string());
        kv("corpus.concepts", c.num_concepts.to_string());
        kv("corpus.train_sentences", c.train_sentences.to_string());
        kv("corpus.dev_sentences", c.dev_sentences.to_string());
        kv("corpus.test_sentences", c.test_sentences.to_string());
        kv("corpus.zipf", show_opt(&c.zipf_exponent));
        kv(
            "corpus.size_ratios",
            c.size_ratios.as_ref().map_or_else(
                || "none".to_string(),
                |r| r.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            ),
        );
        kv("model.encoder_layers", m.num_encoder_layers.to_string());
        kv("model.decoder_layers", m.num_decoder_layers.to_string());
        kv("model.d_model", m.d_model.to_string());
        kv("model.heads", m.num_heads.to_string());
        kv("model.d_ffn", m.d_ffn.to_string());
        kv("model.dropout", m.dropout.to_string());
        kv("model.max_len", m.max_len.to_string());
        kv("eval.beam", e.beam.beam.to_string());
        kv("eval.max_output", e.beam.max_output.to_string());
        kv("eval.length_penalty", e.beam.length_penalty.to_string());
        kv("eval.sentences", e.sentences.map_or_else(|| "all".to_string(), |n| n.to_string()));
        kv("eval.series_otr", e.series_otr.to_string());
        kv("select.probe", e.select_probe.to_string());
        kv("select.threshold", e.threshold.to_string());
        kv(
            "select.convergence",
            match e.convergence {
                Convergence::Absolute => "absolute",
                Convergence::Relative => "relative",
            }
            .to_string(),
        );
        kv("plot.probe", e.plot_probe.to_string());
        kv("out", self.out.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string()));
        render_train(&mut out, "pretrain", &self.pretrain);
        render_train(&mut out, "tune", &self.tune);
        let t = &self.tune;
        writeln!(out, "tune.ul_weight = {}", t.ul_weight).expect("string write");
        let mode = match t.negative_mode {
            NegativeMode::PerBatch => "per-batch",
            NegativeMode::PerSentence => "per-sentence",
        };
        writeln!(out, "tune.negative_mode = {mode}").expect("string write");
        out
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&c.render()).unwrap(), c);
        assert_eq!(ExperimentConfig::parse("").unwrap(), c);
    }

    #[test]
    fn seed_reaches_every_stage() {
        let c = ExperimentConfig::parse("seed = 42\n").unwrap();
        assert_eq!(
            [c.corpus.seed, c.model.seed, c.pretrain.seed, c.tune.seed, c.vanilla_config().seed],
            [42; 5]
        );
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "languages = 3",
            "nonsense = 1",
            "seed = 1\nseed = 2",
            "seed",
            "seed = x",
            "tune.negative_mode = sometimes",
            "eval.beam = 0",
            "model.heads = 5",
            "eval.series_otr = yes",
        ] {
            assert!(ExperimentConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn comments_and_whitespace() {
        let c = ExperimentConfig::parse("# note\n\n  tune.lr=0.5  \nlanguages = 5\n").unwrap();
        assert_eq!(c.tune.lr, 0.5);
        assert_eq!(c.corpus.languages.len(), 5);
        assert_eq!(c.model.vocab_size, 2 + 5 + 5 * c.corpus.num_concepts);
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(
            seed in any::<u64>(),
            lr in 1e-6f64..1.0,
            ul in 0.0f64..5.0,
            steps in 1000u64..100_000,
            sentences in proptest::option::of(1usize..1000),
            zipf in proptest::option::of(0.1f64..3.0),
        ) {
            let mut c = ExperimentConfig::default();
            c.seed = seed;
            c.tune.lr = lr;
            c.tune.ul_weight = ul;
            c.pretrain.total_steps = steps;
            c.eval.sentences = sentences;
            c.corpus.zipf_exponent = zipf;
            c.finalize().unwrap();
            prop_assert_eq!(ExperimentConfig::parse(&c.render()).unwrap(), c);
        }

        #[test]
        fn parser_never_panics(text in "\\PC{0,200}") {
            let _ = ExperimentConfig::parse(&text);
        }
    }
}
