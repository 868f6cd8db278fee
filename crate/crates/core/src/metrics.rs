//! Efficacy / generalization / specificity / F1 from success indicators.
//!
//! Scores come either from the text-embedding proxy scorer (desk scale) or
//! from an external CSV of scores computed elsewhere; both flow through the
//! same aggregation. Success is a strict comparison — ties count as failure
//! for both polarities.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderWeights;
use crate::error::{Error, Result};
use crate::linalg::cosine_similarity;
use crate::vocab::{tokenize, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Efficacy,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Efficacy => "efficacy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Polarity::Positive),
            "negative" => Ok(Polarity::Negative),
            "efficacy" => Ok(Polarity::Efficacy),
            other => Err(Error::Validation(format!("unknown polarity {other:?}"))),
        }
    }
}

/// One scored comparison for one prompt under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub prompt_id: String,
    pub seed: u64,
    pub polarity: Polarity,
    pub score_new: f64,
    pub score_old: f64,
}

impl ScoreRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.score_new.is_finite() || !self.score_old.is_finite() {
            return Err(Error::Validation(format!(
                "record {:?}/seed {} has non-finite scores",
                self.prompt_id, self.seed
            )));
        }
        Ok(())
    }

    pub fn success(&self) -> bool {
        match self.polarity {
            Polarity::Positive | Polarity::Efficacy => {
                positive_success(self.score_new, self.score_old)
            }
            Polarity::Negative => negative_success(self.score_new, self.score_old),
        }
    }
}

/// Strict: the new descriptor must win outright; a tie is a failure.
pub fn positive_success(score_new: f64, score_old: f64) -> bool {
    score_new > score_old
}

/// Strict: the old descriptor must keep winning; a tie is a failure.
pub fn negative_success(score_new: f64, score_old: f64) -> bool {
    score_new < score_old
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub efficacy: Option<f64>,
    pub generalization: Option<f64>,
    pub specificity: Option<f64>,
    /// Geometric mean of generalization and specificity.
    pub f1: Option<f64>,
    /// Per-seed means in seed order, one row per seed: (seed, efficacy,
    /// generalization, specificity).
    pub per_seed: Vec<SeedMeans>,
    /// Successes and totals per prompt id.
    pub per_prompt: BTreeMap<String, PromptCount>,
    pub record_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMeans {
    pub seed: u64,
    pub efficacy: Option<f64>,
    pub generalization: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PromptCount {
    pub successes: usize,
    pub total: usize,
}

pub fn geometric_mean_f1(generalization: f64, specificity: f64) -> f64 {
    (generalization * specificity).sqrt()
}

/// Aggregate success indicators: means are taken per seed first and then
/// averaged across seeds. A polarity class with no records yields an absent
/// metric, never a zero.
pub fn aggregate(records: &[ScoreRecord]) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::Validation("cannot aggregate zero records".into()));
    }
    for r in records {
        r.validate()?;
    }

    let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();

    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let mean_for = |polarity: Polarity| -> Option<f64> {
            let class: Vec<&ScoreRecord> = records
                .iter()
                .filter(|r| r.seed == seed && r.polarity == polarity)
                .collect();
            if class.is_empty() {
                return None;
            }
            let hits = class.iter().filter(|r| r.success()).count();
            Some(hits as f64 / class.len() as f64)
        };
        per_seed.push(SeedMeans {
            seed,
            efficacy: mean_for(Polarity::Efficacy),
            generalization: mean_for(Polarity::Positive),
            specificity: mean_for(Polarity::Negative),
        });
    }

    let across = |pick: fn(&SeedMeans) -> Option<f64>| -> Option<f64> {
        let values: Vec<f64> = per_seed.iter().filter_map(pick).collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };
    let efficacy = across(|s| s.efficacy);
    let generalization = across(|s| s.generalization);
    let specificity = across(|s| s.specificity);
    let f1 = match (generalization, specificity) {
        (Some(g), Some(s)) => Some(geometric_mean_f1(g, s)),
        _ => None,
    };

    let mut per_prompt: BTreeMap<String, PromptCount> = BTreeMap::new();
    for r in records {
        let entry = per_prompt.entry(r.prompt_id.clone()).or_default();
        entry.total += 1;
        if r.success() {
            entry.successes += 1;
        }
    }

    Ok(MetricReport {
        efficacy,
        generalization,
        specificity,
        f1,
        per_seed,
        per_prompt,
        record_count: records.len(),
    })
}

impl MetricReport {
    /// One-row CSV in the usual reporting column order.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| match v {
            Some(x) => format!("{x:.6}"),
            None => String::new(),
        };
        format!(
            "efficacy,generality,specificity,f1\n{},{},{},{}\n",
            cell(self.efficacy),
            cell(self.generalization),
            cell(self.specificity),
            cell(self.f1)
        )
    }
}

/// Cosine similarity between the edited encoder's embedding of `prompt` and
/// the FROZEN encoder's embedding of `descriptor`. The measuring stick is
/// never itself edited.
pub fn text_proxy_score(
    edited: &EncoderWeights,
    frozen: &EncoderWeights,
    prompt: &str,
    descriptor: &str,
    vocab: &Vocabulary,
) -> Result<f64> {
    let prompt_e = edited.encode_embedding(&tokenize(prompt, vocab, edited.config.max_seq_len)?)?;
    let desc_e =
        frozen.encode_embedding(&tokenize(descriptor, vocab, frozen.config.max_seq_len)?)?;
    cosine_similarity(&prompt_e, &desc_e)
        .ok_or_else(|| Error::Numeric("zero embedding in proxy score".into()))
}

const SCORE_HEADER: &str = "prompt_id,seed,polarity,score_new,score_old";

/// Parse a score CSV with header `prompt_id,seed,polarity,score_new,score_old`.
pub fn parse_scores(text: &str) -> Result<Vec<ScoreRecord>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Validation("empty score file".into()))?;
    if header.trim() != SCORE_HEADER {
        return Err(Error::Validation(format!(
            "bad score header {header:?}, expected {SCORE_HEADER:?}"
        )));
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Validation(format!(
                "line {}: expected 5 columns, found {}",
                i + 1,
                fields.len()
            )));
        }
        let parse_num = |s: &str, col: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| {
                Error::Validation(format!("line {}: {col} {s:?} is not a number", i + 1))
            })
        };
        let record = ScoreRecord {
            prompt_id: fields[0].trim().to_string(),
            seed: fields[1].trim().parse().map_err(|_| {
                Error::Validation(format!("line {}: seed {:?} is not an integer", i + 1, fields[1]))
            })?,
            polarity: Polarity::parse(fields[2].trim())
                .map_err(|e| Error::Validation(format!("line {}: {e}", i + 1)))?,
            score_new: parse_num(fields[3], "score_new")?,
            score_old: parse_num(fields[4], "score_old")?,
        };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

pub fn ingest_external_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text).map_err(|e| match e {
        Error::Validation(msg) => Error::parse(path, msg),
        other => other,
    })
}

pub fn emit_scores(records: &[ScoreRecord]) -> String {
    let mut out = String::from(SCORE_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.prompt_id,
            r.seed,
            r.polarity.as_str(),
            r.score_new,
            r.score_old
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn success_indicators_are_strict() {
        assert!(positive_success(0.9, 0.1));
        assert!(!positive_success(0.5, 0.5));
        assert!(!positive_success(0.2, 0.8));
        assert!(negative_success(0.1, 0.9));
        assert!(!negative_success(0.5, 0.5));
        assert!(!negative_success(0.8, 0.2));
    }

    fn record(prompt: &str, seed: u64, polarity: Polarity, new: f64, old: f64) -> ScoreRecord {
        ScoreRecord {
            prompt_id: prompt.into(),
            seed,
            polarity,
            score_new: new,
            score_old: old,
        }
    }

    #[test]
    fn perfect_run_aggregates_to_ones() {
        let mut records = Vec::new();
        for seed in 0..3 {
            records.push(record("e", seed, Polarity::Efficacy, 0.9, 0.1));
            records.push(record("p", seed, Polarity::Positive, 0.8, 0.2));
            records.push(record("n", seed, Polarity::Negative, 0.2, 0.8));
        }
        let report = aggregate(&records).unwrap();
        assert_eq!(report.efficacy, Some(1.0));
        assert_eq!(report.generalization, Some(1.0));
        assert_eq!(report.specificity, Some(1.0));
        assert_eq!(report.f1, Some(1.0));
        assert_eq!(report.per_seed.len(), 3);
        assert_eq!(report.record_count, 9);
        assert_eq!(report.per_prompt["p"].successes, 3);
    }

    #[test]
    fn f1_reproduces_published_values() {
        // 86.80 / 95.44 -> 91.01
        let f1 = geometric_mean_f1(0.8680, 0.9544);
        assert!((f1 - 0.9101).abs() <= 1e-4, "{f1}");
        // 88.02 / 79.18 -> 83.48
        let f1 = geometric_mean_f1(0.8802, 0.7918);
        assert!((f1 - 0.8348).abs() <= 1e-4, "{f1}");
        // layer-0 row: 0.858 / 0.935 -> 0.896
        let f1 = geometric_mean_f1(0.858, 0.935);
        assert!((f1 - 0.896).abs() <= 1e-3, "{f1}");
    }

    #[test]
    fn missing_polarity_class_is_absent_not_zero() {
        let records = vec![
            record("e", 0, Polarity::Efficacy, 0.9, 0.1),
            record("p", 0, Polarity::Positive, 0.9, 0.1),
        ];
        let report = aggregate(&records).unwrap();
        assert_eq!(report.specificity, None);
        assert_eq!(report.f1, None);
        assert_eq!(report.generalization, Some(1.0));
    }

    #[test]
    fn per_seed_means_average_across_seeds() {
        // seed 0: 2/2 positives; seed 1: 0/1 -> mean of (1.0, 0.0) = 0.5,
        // not the pooled 2/3.
        let records = vec![
            record("a", 0, Polarity::Positive, 0.9, 0.1),
            record("b", 0, Polarity::Positive, 0.9, 0.1),
            record("c", 1, Polarity::Positive, 0.1, 0.9),
        ];
        let report = aggregate(&records).unwrap();
        assert_eq!(report.generalization, Some(0.5));
    }

    #[test]
    fn empty_record_set_is_an_error() {
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let records = vec![
            record("x:eff", 0, Polarity::Efficacy, 0.75, 0.25),
            record("x:pos:0", 1, Polarity::Positive, -0.125, 0.5),
            record("x:neg:0", 2, Polarity::Negative, 0.0625, 0.875),
        ];
        let text = emit_scores(&records);
        let back = parse_scores(&text).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn missing_column_is_a_located_error() {
        let text = "prompt_id,seed,polarity,score_new,score_old\na,0,positive,0.5\n";
        let err = parse_scores(text).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let text = "prompt_id,seed,score_new,score_old\n";
        assert!(parse_scores(text).is_err());
    }

    #[test]
    fn non_numeric_score_is_a_located_error() {
        let text = "prompt_id,seed,polarity,score_new,score_old\na,0,positive,high,0.2\n";
        let err = parse_scores(text).unwrap_err();
        assert!(err.to_string().contains("score_new"), "{err}");
    }

    #[test]
    fn proxy_score_is_self_similar_and_bounded() {
        let vocab =
            crate::vocab::Vocabulary::build_from_corpus("sun moon star lake park tree", 32)
                .unwrap();
        let cfg = crate::encoder::EncoderConfig {
            vocab_size: vocab.len(),
            ..Default::default()
        };
        let w = crate::encoder::EncoderWeights::init(cfg).unwrap();
        let s = text_proxy_score(&w, &w, "sun over the lake", "sun over the lake", &vocab).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        for (a, b) in [("sun", "moon"), ("park tree", "lake"), ("star", "sun moon star")] {
            let s = text_proxy_score(&w, &w, a, b, &vocab).unwrap();
            assert!((-1.0..=1.0).contains(&s), "{s}");
        }
    }

    proptest! {
        #[test]
        fn prop_f1_symmetric_monotone_idempotent(
            g in 0.0f64..1.0, s in 0.0f64..1.0, bump in 0.0f64..0.5
        ) {
            let f = geometric_mean_f1(g, s);
            prop_assert!((f - geometric_mean_f1(s, g)).abs() < 1e-15);
            prop_assert!((geometric_mean_f1(g, g) - g).abs() < 1e-12);
            let g2 = (g + bump).min(1.0);
            prop_assert!(geometric_mean_f1(g2, s) >= f - 1e-15);
        }

        #[test]
        fn prop_indicators_invariant_under_increasing_transform(
            new in -1.0f64..1.0, old in -1.0f64..1.0, scale in 0.1f64..5.0, shift in -2.0f64..2.0
        ) {
            // strictly increasing affine map applied to BOTH scores
            let t = |x: f64| scale * x + shift;
            prop_assert_eq!(
                positive_success(new, old),
                positive_success(t(new), t(old))
            );
            prop_assert_eq!(
                negative_success(new, old),
                negative_success(t(new), t(old))
            );
        }

        #[test]
        fn prop_aggregate_permutation_invariant(swap in any::<bool>()) {
            let mut records = vec![
                record("a", 0, Polarity::Positive, 0.9, 0.1),
                record("b", 0, Polarity::Positive, 0.1, 0.9),
                record("c", 0, Polarity::Negative, 0.3, 0.6),
            ];
            let before = aggregate(&records).unwrap();
            if swap {
                records.reverse();
            }
            let after = aggregate(&records).unwrap();
            prop_assert_eq!(before.generalization, after.generalization);
            prop_assert_eq!(before.specificity, after.specificity);
        }
    }
}
