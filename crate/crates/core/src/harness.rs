//! Command-level orchestration: model initialization, covariance caching,
//! single and sequential edits, evaluation, and per-layer sweeps.
//!
//! Every command is a pure function of (config, input files): outputs land
//! under the configured output directory and reruns with the same inputs
//! overwrite them with identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{
    load_road, load_time, road_to_edit_request, time_to_edit_request, EvalCase, RoadDataset,
    TimeDataset,
};
use crate::editor::{
    edit_with_history, estimate_covariance_with, CovarianceStats, EditRequest, RankOneEdit,
    DEFAULT_EPSILON_SCALE,
};
use crate::encoder::{EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate, emit_scores, ingest_external_scores, text_proxy_score, MetricReport, Polarity,
    ScoreRecord,
};
use crate::value_opt::{OptimizerConfig, TargetSpec};
use crate::vocab::Vocabulary;

fn default_seeds() -> Vec<u64> {
    (0..25).collect()
}

fn default_templates() -> Vec<String> {
    vec!["{}".to_string()]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_checkpoint_interval() -> usize {
    10
}

fn default_epsilon_scale() -> f64 {
    DEFAULT_EPSILON_SCALE
}

/// Run configuration, normally loaded from a JSON file and overridable from
/// the command line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub weights: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub covariance: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    /// Caption file supplying contrastive distractors, one per line.
    pub captions: Option<PathBuf>,
    /// Corpus for covariance estimation (estimate-cov and sweep-layers).
    pub cov_corpus: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub layer: Option<usize>,
    pub optimizer: OptimizerConfig,
    pub templates: Vec<String>,
    pub encoder: EncoderConfig,
    pub epsilon_scale: f64,
    /// Sample BOS/EOS/UNK/PAD positions into the covariance. Off by
    /// default; desk-scale toy runs switch it on (see docs/formats.md).
    pub cov_include_special: bool,
    pub checkpoint_interval: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            weights: None,
            vocab: None,
            covariance: None,
            dataset: None,
            captions: None,
            cov_corpus: None,
            out_dir: default_out_dir(),
            seeds: default_seeds(),
            layer: None,
            optimizer: OptimizerConfig::default(),
            templates: default_templates(),
            encoder: EncoderConfig::default(),
            epsilon_scale: default_epsilon_scale(),
            cov_include_special: false,
            checkpoint_interval: default_checkpoint_interval(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Validation("seed list must be nonempty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Validation("seed list contains duplicates".into()));
        }
        if self.templates.is_empty() {
            return Err(Error::Validation("template list must be nonempty".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Validation("checkpoint_interval must be >= 1".into()));
        }
        self.optimizer.validate()?;
        Ok(())
    }

    fn require<'a>(&self, field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        field
            .as_deref()
            .ok_or_else(|| Error::Usage(format!("config is missing the {name} path")))
    }

    fn load_weights(&self) -> Result<EncoderWeights> {
        EncoderWeights::load(self.require(&self.weights, "weights")?)
    }

    fn load_vocab(&self) -> Result<Vocabulary> {
        Vocabulary::load(self.require(&self.vocab, "vocab")?)
    }

    fn load_captions(&self) -> Result<Vec<String>> {
        match &self.captions {
            None => Ok(Vec::new()),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Ok(text
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(str::to_string)
                    .collect())
            }
        }
    }

    fn ensure_out_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))
    }

    pub fn cov_path_for_layer(&self, layer: usize) -> PathBuf {
        self.out_dir.join(format!("cov_layer{layer}.bin"))
    }
}

/// Dataset in either supported format.
pub enum Dataset {
    Road(RoadDataset),
    Time(TimeDataset),
}

impl Dataset {
    /// Road files carry a `target` field per entry, time files a
    /// `target_prompt`; loading tries road first, then time.
    pub fn load(path: &Path) -> Result<Self> {
        match load_road(path) {
            Ok(file) => Ok(Dataset::Road(file)),
            Err(road_err) => match load_time(path) {
                Ok(file) => Ok(Dataset::Time(file)),
                Err(_) => Err(road_err),
            },
        }
    }

    pub fn eval_cases(&self) -> Vec<EvalCase> {
        match self {
            Dataset::Road(file) => file.entries.iter().map(EvalCase::from).collect(),
            Dataset::Time(file) => file.entries.iter().map(EvalCase::from).collect(),
        }
    }

    pub fn edit_requests(
        &self,
        layer: Option<usize>,
        templates: &[String],
        captions: &[String],
    ) -> Result<Vec<EditRequest>> {
        match self {
            Dataset::Road(file) => file
                .entries
                .iter()
                .map(|e| road_to_edit_request(e, layer, templates, captions.to_vec()))
                .collect(),
            Dataset::Time(file) => file
                .entries
                .iter()
                .map(|e| time_to_edit_request(e, layer, templates, captions.to_vec()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Road(file) => file.entries.len(),
            Dataset::Time(file) => file.entries.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Validation(format!("serialization failed: {e}")))?;
    write_text(path, &text)
}

/// Build vocabulary and seeded random weights from a training corpus and
/// write both container files. Returns (weights path, vocab path).
pub fn cmd_init_model(config: &RunConfig, corpus_path: &Path) -> Result<(PathBuf, PathBuf)> {
    config.validate()?;
    config.ensure_out_dir()?;
    let corpus = std::fs::read_to_string(corpus_path).map_err(|e| Error::io(corpus_path, e))?;
    let vocab = Vocabulary::build_from_corpus(&corpus, config.encoder.vocab_size)?;
    let mut encoder_cfg = config.encoder.clone();
    // The embedding table is sized by what the corpus actually yields.
    encoder_cfg.vocab_size = vocab.len();
    let mut weights = EncoderWeights::init(encoder_cfg)?;
    weights.vocab_digest = Some(vocab.digest());

    let weights_path = config.out_dir.join("model.bin");
    let vocab_path = config.out_dir.join("vocab.txt");
    weights.save(&weights_path)?;
    vocab.save(&vocab_path)?;
    Ok((weights_path, vocab_path))
}

/// Estimate and cache the key second-moment matrix for one layer.
pub fn cmd_estimate_cov(config: &RunConfig, corpus_path: &Path, layer: usize) -> Result<PathBuf> {
    config.validate()?;
    config.ensure_out_dir()?;
    let weights = config.load_weights()?;
    let vocab = config.load_vocab()?;
    let corpus = std::fs::read_to_string(corpus_path).map_err(|e| Error::io(corpus_path, e))?;
    let stats = estimate_covariance_with(
        &weights,
        &vocab,
        &corpus,
        layer,
        config.epsilon_scale,
        config.cov_include_special,
    )?;
    let path = config.cov_path_for_layer(layer);
    stats.save(&path)?;
    Ok(path)
}

/// On-disk edit request: optional fields fall back to the run config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RequestSpec {
    pub edit_prompt: String,
    pub subject: String,
    pub source_text: String,
    pub target: TargetSpec,
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(default)]
    pub key_templates: Option<Vec<String>>,
}

impl RequestSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn resolve(&self, config: &RunConfig, captions: Vec<String>) -> Result<EditRequest> {
        let layer = self
            .layer
            .or(config.layer)
            .ok_or_else(|| Error::Usage("no edit layer given (request or --layer)".into()))?;
        let req = EditRequest {
            edit_prompt: self.edit_prompt.clone(),
            subject: self.subject.clone(),
            source_text: self.source_text.clone(),
            target: self.target.clone(),
            layer,
            key_templates: self
                .key_templates
                .clone()
                .unwrap_or_else(|| config.templates.clone()),
            contrastive_texts: captions,
        };
        req.validate()?;
        Ok(req)
    }
}

/// Apply one edit from a request file; writes the edited weights, the audit
/// record, and the optimizer loss history.
pub fn cmd_edit(config: &RunConfig, request_path: &Path) -> Result<RankOneEdit> {
    config.validate()?;
    config.ensure_out_dir()?;
    let weights = config.load_weights()?;
    let vocab = config.load_vocab()?;
    check_vocab_digest(&weights, &vocab)?;
    let captions = config.load_captions()?;
    let spec = RequestSpec::load(request_path)?;
    let req = spec.resolve(config, captions)?;
    let cov = load_covariance_for(config, req.layer)?;
    let (edited, audit, history) =
        edit_with_history(&weights, &vocab, &req, &cov, &config.optimizer, &weights)?;
    edited.save(&config.out_dir.join("edited.bin"))?;
    write_json(&config.out_dir.join("audit.json"), &audit)?;
    write_json(&config.out_dir.join("loss_history.json"), &history)?;
    Ok(audit)
}

/// The covariance cache must already exist for the layer: either the path
/// named in the config (when its layer matches) or the per-layer cache file
/// in the output directory.
fn load_covariance_for(config: &RunConfig, layer: usize) -> Result<CovarianceStats> {
    if let Some(path) = &config.covariance {
        let stats = CovarianceStats::load(path)?;
        if stats.layer == layer {
            return Ok(stats);
        }
    }
    let per_layer = config.cov_path_for_layer(layer);
    if per_layer.exists() {
        return CovarianceStats::load(&per_layer);
    }
    Err(Error::Usage(format!(
        "no covariance cache for layer {layer}; run estimate-cov first"
    )))
}

fn check_vocab_digest(weights: &EncoderWeights, vocab: &Vocabulary) -> Result<()> {
    if let Some(digest) = &weights.vocab_digest {
        let actual = vocab.digest();
        if digest != &actual {
            return Err(Error::Validation(format!(
                "weights were initialized against vocabulary {digest} but the loaded vocabulary has digest {actual}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SequentialOutcome {
    pub audits: Vec<RankOneEdit>,
    /// One metrics row per checkpoint (after every `checkpoint_interval`
    /// edits and after the final edit).
    pub checkpoints: Vec<(usize, MetricReport)>,
}

/// Apply every dataset entry in order to the same weights. Target and
/// contrastive embeddings come from the original frozen encoder throughout.
/// Evaluates the full dataset at every checkpoint interval.
pub fn cmd_seq_edit(config: &RunConfig) -> Result<SequentialOutcome> {
    config.validate()?;
    config.ensure_out_dir()?;
    let frozen = config.load_weights()?;
    let vocab = config.load_vocab()?;
    check_vocab_digest(&frozen, &vocab)?;
    let captions = config.load_captions()?;
    let dataset = Dataset::load(config.require(&config.dataset, "dataset")?)?;
    let requests = dataset.edit_requests(config.layer, &config.templates, &captions)?;

    let mut cov_cache: BTreeMap<usize, CovarianceStats> = BTreeMap::new();
    for req in &requests {
        if let std::collections::btree_map::Entry::Vacant(slot) = cov_cache.entry(req.layer) {
            slot.insert(load_covariance_for(config, req.layer)?);
        }
    }

    let cases = dataset.eval_cases();
    let mut current = frozen.clone();
    let mut audits = Vec::with_capacity(requests.len());
    let mut checkpoints = Vec::new();
    for (index, req) in requests.iter().enumerate() {
        let cov = &cov_cache[&req.layer];
        let (next, audit, _history) =
            edit_with_history(&current, &vocab, req, cov, &config.optimizer, &frozen)
                .map_err(|e| Error::Validation(format!("edit {index} failed: {e}")))?;
        current = next;
        audits.push(audit);
        let applied = index + 1;
        if applied.is_multiple_of(config.checkpoint_interval) || applied == requests.len() {
            let records = proxy_records(&current, &frozen, &vocab, &cases, &config.seeds)?;
            checkpoints.push((applied, aggregate(&records)?));
        }
    }

    current.save(&config.out_dir.join("edited.bin"))?;
    write_json(&config.out_dir.join("audits.json"), &audits)?;
    let mut curve = String::from("edits_applied,efficacy,generality,specificity,f1\n");
    for (applied, report) in &checkpoints {
        let cell = |v: Option<f64>| v.map_or(f64::NAN, |x| x);
        let _ = writeln!(
            curve,
            "{applied},{:.6},{:.6},{:.6},{:.6}",
            cell(report.efficacy),
            cell(report.generalization),
            cell(report.specificity),
            cell(report.f1)
        );
    }
    write_text(&config.out_dir.join("metrics_curve.csv"), &curve)?;
    Ok(SequentialOutcome { audits, checkpoints })
}

/// Proxy scores for every case, prompt class, and seed. The proxy itself is
/// deterministic, so each seed contributes an identical copy of the scores;
/// seeds exist to keep the record layout compatible with samplers that do
/// vary by seed (external image scorers).
pub fn proxy_records(
    edited: &EncoderWeights,
    frozen: &EncoderWeights,
    vocab: &Vocabulary,
    cases: &[EvalCase],
    seeds: &[u64],
) -> Result<Vec<ScoreRecord>> {
    let mut base = Vec::new();
    for case in cases {
        let mut push = |prompt_id: String, polarity: Polarity, prompt: &str, new: &str, old: &str| -> Result<()> {
            let score_new = text_proxy_score(edited, frozen, prompt, new, vocab)?;
            let score_old = text_proxy_score(edited, frozen, prompt, old, vocab)?;
            base.push((prompt_id, polarity, score_new, score_old));
            Ok(())
        };
        push(
            format!("{}:efficacy", case.id),
            Polarity::Efficacy,
            &case.edit_prompt,
            &case.efficacy_new,
            &case.efficacy_old,
        )?;
        for (i, p) in case.positives.iter().enumerate() {
            push(
                format!("{}:pos:{i}", case.id),
                Polarity::Positive,
                &p.prompt,
                &p.positive_new,
                &p.positive_old,
            )?;
        }
        for (i, n) in case.negatives.iter().enumerate() {
            push(
                format!("{}:neg:{i}", case.id),
                Polarity::Negative,
                &n.prompt,
                &n.negative_new,
                &n.negative_old,
            )?;
        }
    }
    let mut records = Vec::with_capacity(base.len() * seeds.len());
    for &seed in seeds {
        for (prompt_id, polarity, score_new, score_old) in &base {
            records.push(ScoreRecord {
                prompt_id: prompt_id.clone(),
                seed,
                polarity: *polarity,
                score_new: *score_new,
                score_old: *score_old,
            });
        }
    }
    Ok(records)
}

/// Evaluate an edited model against the frozen one over the configured
/// dataset, or aggregate externally computed scores when given.
pub fn cmd_eval(
    config: &RunConfig,
    edited_path: &Path,
    frozen_path: Option<&Path>,
    external_scores: Option<&Path>,
) -> Result<MetricReport> {
    config.validate()?;
    config.ensure_out_dir()?;
    let records = match external_scores {
        Some(path) => ingest_external_scores(path)?,
        None => {
            let edited = EncoderWeights::load(edited_path)?;
            let frozen = match frozen_path {
                Some(p) => EncoderWeights::load(p)?,
                None => config.load_weights()?,
            };
            let vocab = config.load_vocab()?;
            check_vocab_digest(&edited, &vocab)?;
            check_vocab_digest(&frozen, &vocab)?;
            if edited.vocab_digest != frozen.vocab_digest {
                return Err(Error::Validation(
                    "edited and frozen weights carry different vocabulary digests".into(),
                ));
            }
            let dataset = Dataset::load(config.require(&config.dataset, "dataset")?)?;
            proxy_records(&edited, &frozen, &vocab, &dataset.eval_cases(), &config.seeds)?
        }
    };
    let report = aggregate(&records)?;
    write_text(&config.out_dir.join("scores.csv"), &emit_scores(&records))?;
    write_json(&config.out_dir.join("report.json"), &report)?;
    write_text(&config.out_dir.join("report.csv"), &report.to_csv())?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub layer: usize,
    pub efficacy: f64,
    pub generalization: f64,
    pub specificity: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub request_id: String,
    pub rows: Vec<SweepRow>,
}

/// Edit each requested layer on a fresh copy of the clean weights, evaluate,
/// and emit one CSV row per layer. A failing layer yields a NaN row and the
/// sweep continues.
pub fn cmd_sweep_layers(
    config: &RunConfig,
    request_path: &Path,
    layers: &[usize],
) -> Result<SweepReport> {
    config.validate()?;
    config.ensure_out_dir()?;
    if layers.is_empty() {
        return Err(Error::Usage("sweep needs at least one layer".into()));
    }
    let clean = config.load_weights()?;
    let vocab = config.load_vocab()?;
    check_vocab_digest(&clean, &vocab)?;
    let captions = config.load_captions()?;
    let spec = RequestSpec::load(request_path)?;
    let dataset = Dataset::load(config.require(&config.dataset, "dataset")?)?;
    let cases = dataset.eval_cases();

    let mut rows = Vec::with_capacity(layers.len());
    for &layer in layers {
        let outcome = sweep_one_layer(config, &clean, &vocab, &spec, &captions, &cases, layer);
        let row = match outcome {
            Ok(report) => SweepRow {
                layer,
                efficacy: report.efficacy.unwrap_or(f64::NAN),
                generalization: report.generalization.unwrap_or(f64::NAN),
                specificity: report.specificity.unwrap_or(f64::NAN),
                f1: report.f1.unwrap_or(f64::NAN),
            },
            Err(_) => SweepRow {
                layer,
                efficacy: f64::NAN,
                generalization: f64::NAN,
                specificity: f64::NAN,
                f1: f64::NAN,
            },
        };
        rows.push(row);
    }

    let mut csv = String::from("layer,efficacy,generality,specificity,f1\n");
    for row in &rows {
        let _ = writeln!(
            csv,
            "{},{:.6},{:.6},{:.6},{:.6}",
            row.layer, row.efficacy, row.generalization, row.specificity, row.f1
        );
    }
    write_text(&config.out_dir.join("sweep.csv"), &csv)?;
    Ok(SweepReport {
        request_id: spec.subject.clone(),
        rows,
    })
}

fn sweep_one_layer(
    config: &RunConfig,
    clean: &EncoderWeights,
    vocab: &Vocabulary,
    spec: &RequestSpec,
    captions: &[String],
    cases: &[EvalCase],
    layer: usize,
) -> Result<MetricReport> {
    let mut spec = spec.clone();
    spec.layer = Some(layer);
    let req = spec.resolve(config, captions.to_vec())?;
    // Covariance per layer: reuse the cache when present, compute on demand
    // from the configured corpus otherwise.
    let cov_path = config.cov_path_for_layer(layer);
    let cov = if cov_path.exists() {
        CovarianceStats::load(&cov_path)?
    } else {
        let corpus_path = config.require(&config.cov_corpus, "cov_corpus")?;
        let corpus =
            std::fs::read_to_string(corpus_path).map_err(|e| Error::io(corpus_path, e))?;
        let stats = estimate_covariance_with(
            clean,
            vocab,
            &corpus,
            layer,
            config.epsilon_scale,
            config.cov_include_special,
        )?;
        stats.save(&cov_path)?;
        stats
    };
    let (edited, _audit, _history) =
        edit_with_history(clean, vocab, &req, &cov, &config.optimizer, clean)?;
    let records = proxy_records(&edited, clean, vocab, cases, &config.seeds)?;
    aggregate(&records)
}
