use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::plot::bar_chart_svg;
use super::relevance::{
    pearson_correlation, token_property_relevance, RelevanceTable, DEFAULT_MIN_COUNT,
    DEFAULT_SMOOTHING,
};
use super::{attention_norm_attribution, AnalysisError, AttentionKind, AttributionRecord, Result};
use crate::experiments::StanceInstance;
use crate::inject::{Instance, ModelKind, StanceModel};
use crate::text::{tokenize, Vocabulary};
use crate::util::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    /// One point per token type, attribution averaged over its occurrences.
    #[default]
    Type,
    /// One point per token occurrence.
    Occurrence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    /// 1-based layer; absent means each model's last layer.
    pub layer: Option<usize>,
    pub mode: CorrelationMode,
    pub smoothing: Option<f64>,
    pub min_count: usize,
    pub batch_size: usize,
    /// Instances per model that get an SVG plot.
    pub plot_limit: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            layer: None,
            mode: CorrelationMode::Type,
            smoothing: Some(DEFAULT_SMOOTHING),
            min_count: DEFAULT_MIN_COUNT,
            batch_size: 16,
            plot_limit: 10,
        }
    }
}

pub struct ReportModel<'a> {
    pub name: String,
    pub model: &'a StanceModel,
    pub vocab: &'a Vocabulary,
}

/// One line of the attribution rows file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRow {
    pub instance_id: String,
    pub model: String,
    pub kind: AttentionKind,
    pub position: usize,
    pub token: String,
    pub score: f64,
}

/// Correlations of one model's attribution with token relevance, ×100.
/// `None` when fewer than two points or a constant vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub model: String,
    pub kind: AttentionKind,
    pub target: Option<f64>,
    pub label: Option<f64>,
    pub target_points: usize,
    pub label_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionSummary {
    pub mode: CorrelationMode,
    pub smoothing: Option<f64>,
    pub min_count: usize,
    pub instances: usize,
    pub correlations: Vec<CorrelationEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionReport {
    pub rows: Vec<AttributionRow>,
    pub records: Vec<(String, AttributionRecord)>,
    pub summary: AttributionSummary,
}

/// Text tokens of a record paired with their scores: the first segment,
/// special tokens removed.
fn text_tokens(record: &AttributionRecord) -> impl Iterator<Item = (&str, f64)> {
    (0..record.tokens.len())
        .filter(|&i| !record.special[i] && record.segments[i] == 0)
        .map(|i| (record.tokens[i].as_str(), record.scores[i]))
}

/// Pearson correlation between attribution and relevance over the tokens
/// both cover, with the number of points used.
pub fn correlate(
    records: &[AttributionRecord],
    relevance: &RelevanceTable,
    mode: CorrelationMode,
) -> (Option<f64>, usize) {
    let (x, y): (Vec<f64>, Vec<f64>) = match mode {
        CorrelationMode::Occurrence => records
            .iter()
            .flat_map(text_tokens)
            .filter_map(|(t, s)| relevance.scores.get(t).map(|r| (s, *r)))
            .unzip(),
        CorrelationMode::Type => {
            let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
            for (t, s) in records.iter().flat_map(text_tokens) {
                let e = sums.entry(t).or_default();
                e.0 += s;
                e.1 += 1;
            }
            sums.into_iter()
                .filter_map(|(t, (s, n))| relevance.scores.get(t).map(|r| (s / n as f64, *r)))
                .unzip()
        }
    };
    let points = x.len();
    match pearson_correlation(&x, &y) {
        Ok(r) => (Some(r), points),
        Err(e) => {
            log::warn!(
                "correlation with {} relevance undefined: {e}",
                relevance.property
            );
            (None, points)
        }
    }
}

fn relevance_tables(
    instances: &[StanceInstance],
    vocab: &Vocabulary,
    options: &ReportOptions,
) -> Result<[RelevanceTable; 2]> {
    let mut by_target = Vec::with_capacity(instances.len());
    let mut by_label = Vec::with_capacity(instances.len());
    for inst in instances {
        let seq = tokenize(&inst.text, vocab)?;
        let tokens: Vec<String> = seq
            .ids
            .iter()
            .map(|&t| vocab.token(t).unwrap_or_default().to_string())
            .collect();
        by_target.push((tokens.clone(), inst.target.clone()));
        by_label.push((tokens, inst.label.to_string()));
    }
    Ok([
        token_property_relevance(&by_target, "target", options.smoothing, options.min_count)?,
        token_property_relevance(&by_label, "label", options.smoothing, options.min_count)?,
    ])
}

/// Attribution for every model on the shared instances. Self-attention is
/// reported for all models, cross-attention additionally for inject models.
/// With `out_dir`, writes `attributions.jsonl`, `summary.json` and
/// `plots/<model>_<instance>_<kind>.svg`.
pub fn attribution_report(
    models: &[ReportModel],
    instances: &[StanceInstance],
    options: &ReportOptions,
    out_dir: Option<&Path>,
) -> Result<AttributionReport> {
    if instances.is_empty() {
        return Err(AnalysisError::Contract("no instances to analyze".into()));
    }
    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut correlations = Vec::new();
    for rm in models {
        let inputs: Vec<(&str, Instance)> = instances
            .iter()
            .map(|i| {
                (
                    i.id.as_str(),
                    Instance {
                        text: &i.text,
                        target: &i.target,
                        contexts: i.contexts.as_deref().unwrap_or(&[]),
                    },
                )
            })
            .collect();
        let layer = options
            .layer
            .unwrap_or(rm.model.config.inject.encoder.num_layers);
        let mut kinds = vec![AttentionKind::SelfAttention];
        if rm.model.kind() == ModelKind::Inject && layer == rm.model.config.inject.layer() {
            kinds.push(AttentionKind::Cross);
        }
        let [target_rel, label_rel] = relevance_tables(instances, rm.vocab, options)?;
        for kind in kinds {
            let recs = attention_norm_attribution(
                rm.model,
                rm.vocab,
                &inputs,
                layer,
                kind,
                options.batch_size,
            )?;
            let (target, target_points) = correlate(&recs, &target_rel, options.mode);
            let (label, label_points) = correlate(&recs, &label_rel, options.mode);
            correlations.push(CorrelationEntry {
                model: rm.name.clone(),
                kind,
                target: target.map(|r| r * 100.0),
                label: label.map(|r| r * 100.0),
                target_points,
                label_points,
            });
            for rec in recs {
                for (position, (token, &score)) in rec.tokens.iter().zip(&rec.scores).enumerate() {
                    rows.push(AttributionRow {
                        instance_id: rec.instance_id.clone(),
                        model: rm.name.clone(),
                        kind,
                        position,
                        token: token.clone(),
                        score,
                    });
                }
                records.push((rm.name.clone(), rec));
            }
        }
    }
    let summary = AttributionSummary {
        mode: options.mode,
        smoothing: options.smoothing,
        min_count: options.min_count,
        instances: instances.len(),
        correlations,
    };
    if let Some(dir) = out_dir {
        write_outputs(dir, &rows, &records, &summary, options.plot_limit)?;
    }
    Ok(AttributionReport {
        rows,
        records,
        summary,
    })
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_outputs(
    dir: &Path,
    rows: &[AttributionRow],
    records: &[(String, AttributionRecord)],
    summary: &AttributionSummary,
    plot_limit: usize,
) -> Result<()> {
    let plots = dir.join("plots");
    std::fs::create_dir_all(&plots).map_err(|e| AnalysisError::io(&plots, e))?;
    let mut jsonl = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut jsonl, row)?;
        jsonl.push(b'\n');
    }
    let file = dir.join("attributions.jsonl");
    write_atomic(&file, &jsonl).map_err(|e| AnalysisError::io(&file, e))?;
    let file = dir.join("summary.json");
    write_atomic(&file, &serde_json::to_vec_pretty(summary)?)
        .map_err(|e| AnalysisError::io(&file, e))?;

    let mut plotted: BTreeMap<(&str, AttentionKind), usize> = BTreeMap::new();
    for (model, rec) in records {
        let n = plotted.entry((model.as_str(), rec.kind)).or_default();
        if *n >= plot_limit {
            continue;
        }
        *n += 1;
        let title = format!(
            "{model} {} attention, layer {}: {}",
            rec.kind.name(),
            rec.layer,
            rec.instance_id
        );
        let svg = bar_chart_svg(&title, &rec.tokens, &rec.scores);
        let file = plots.join(format!(
            "{}_{}_{}.svg",
            sanitize(model),
            sanitize(&rec.instance_id),
            rec.kind.name()
        ));
        write_atomic(&file, svg.as_bytes()).map_err(|e| AnalysisError::io(&file, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::inject::{InjectConfig, ModelConfig};

    fn record(tokens: &[&str], scores: &[f64]) -> AttributionRecord {
        let n = tokens.len() + 2;
        let mut toks = vec!["[CLS]".to_string()];
        toks.extend(tokens.iter().map(|t| t.to_string()));
        toks.push("[SEP]".into());
        let mut sc = vec![9.0];
        sc.extend_from_slice(scores);
        sc.push(9.0);
        AttributionRecord {
            instance_id: "x".into(),
            kind: AttentionKind::SelfAttention,
            layer: 1,
            tokens: toks,
            scores: sc,
            special: (0..n).map(|i| i == 0 || i == n - 1).collect(),
            segments: vec![0; n],
        }
    }

    fn table(pairs: &[(&str, f64)]) -> RelevanceTable {
        RelevanceTable {
            property: "target".into(),
            smoothing: None,
            min_count: 1,
            scores: pairs.iter().map(|(t, r)| (t.to_string(), *r)).collect(),
        }
    }

    #[test]
    fn planted_relevant_token_correlates_positively() {
        // "uniform" is highly target-relevant and receives the most attribution
        let recs = [
            record(&["uniform", "is", "good"], &[5.0, 0.5, 1.0]),
            record(&["the", "uniform", "rule"], &[0.4, 4.5, 1.2]),
            record(&["is", "good", "rule"], &[0.6, 1.1, 0.9]),
        ];
        let rel = table(&[
            ("uniform", 3.0),
            ("is", 0.1),
            ("good", 0.4),
            ("rule", 0.8),
            ("the", 0.0),
        ]);
        let (r, n) = correlate(&recs, &rel, CorrelationMode::Type);
        assert_eq!(n, 5);
        assert!(r.unwrap() > 0.8);
        // type mode equals Pearson over per-type means, by hand
        let x = [
            (5.0 + 4.5) / 2.0,
            (0.5 + 0.6) / 2.0,
            (1.0 + 1.1) / 2.0,
            (1.2 + 0.9) / 2.0,
            0.4,
        ];
        let y = [3.0, 0.1, 0.4, 0.8, 0.0];
        let mut pairs: Vec<(&str, f64, f64)> = ["uniform", "is", "good", "rule", "the"]
            .into_iter()
            .zip(x)
            .zip(y)
            .map(|((t, a), b)| (t, a, b))
            .collect();
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.iter().map(|p| (p.1, p.2)).unzip();
        assert!((r.unwrap() - pearson_correlation(&xs, &ys).unwrap()).abs() < 1e-12);
        let (_, occ) = correlate(&recs, &rel, CorrelationMode::Occurrence);
        assert_eq!(occ, 9);
    }

    #[test]
    fn report_rows_match_attribution_and_files_are_written() {
        let texts = [
            "good school uniforms",
            "bad school uniforms",
            "good tests idea",
            "bad tests idea",
        ];
        let instances: Vec<StanceInstance> = (0..8)
            .map(|i| StanceInstance {
                id: format!("i{i}"),
                text: texts[i % 4].into(),
                target: if i % 4 < 2 { "uniforms" } else { "tests" }.into(),
                label: i % 2,
                contexts: Some(vec!["school rules".into()]),
            })
            .collect();
        let vocab = Vocabulary::from_corpus(texts.iter().copied().chain([
            "uniforms",
            "tests",
            "school rules",
        ]));
        let mut enc = EncoderConfig::toy(vocab.len(), 16);
        enc.ff_size = 32;
        let make = |kind| {
            StanceModel::new(
                ModelConfig {
                    kind,
                    inject: InjectConfig::new(enc.clone(), 2),
                },
                &mut ChaCha8Rng::seed_from_u64(1),
            )
            .unwrap()
        };
        let (bert, inject) = (make(ModelKind::BertTarget), make(ModelKind::Inject));
        let models = [
            ReportModel {
                name: "bert_target".into(),
                model: &bert,
                vocab: &vocab,
            },
            ReportModel {
                name: "inject".into(),
                model: &inject,
                vocab: &vocab,
            },
        ];
        let options = ReportOptions {
            min_count: 2,
            plot_limit: 1,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let report = attribution_report(&models, &instances, &options, Some(dir.path())).unwrap();
        let direct = attention_norm_attribution(
            &bert,
            &vocab,
            &[(
                "i0",
                Instance {
                    text: texts[0],
                    target: "uniforms",
                    contexts: &[],
                },
            )],
            2,
            AttentionKind::SelfAttention,
            1,
        )
        .unwrap();
        let first: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.instance_id == "i0" && r.model == "bert_target")
            .map(|r| r.score)
            .collect();
        assert_eq!(first.len(), direct[0].scores.len());
        for (a, b) in first.iter().zip(&direct[0].scores) {
            assert!((a - b).abs() < 1e-12);
        }
        let kinds: Vec<_> = report
            .summary
            .correlations
            .iter()
            .map(|c| (c.model.as_str(), c.kind))
            .collect();
        assert_eq!(
            kinds,
            [
                ("bert_target", AttentionKind::SelfAttention),
                ("inject", AttentionKind::SelfAttention),
                ("inject", AttentionKind::Cross)
            ]
        );
        for c in &report.summary.correlations {
            for v in [c.target, c.label].into_iter().flatten() {
                assert!((-100.0..=100.0).contains(&v));
            }
        }
        let lines = std::fs::read_to_string(dir.path().join("attributions.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), report.rows.len());
        assert_eq!(
            std::fs::read_dir(dir.path().join("plots")).unwrap().count(),
            3
        );
        let summary: AttributionSummary =
            serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(summary, report.summary);
    }
}
