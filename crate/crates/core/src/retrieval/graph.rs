use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;

use super::{rank_candidates, ContextCandidate, ContextSource, Result, RetrievalError};
use crate::text::StopwordList;

/// Separator between edge descriptions of a multi-edge path.
pub const PATH_JOINER: &str = " ";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Edge {
    pub start: String,
    pub end: String,
    pub relation: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GraphLoadStats {
    pub lines: usize,
    pub kept: usize,
    pub dropped_empty_relation: usize,
    pub dropped_stopword: usize,
}

/// Concept graph restricted to described edges between non-stopword concepts.
#[derive(Debug, Clone, Default)]
pub struct ConceptGraph {
    concepts: BTreeSet<String>,
    edges: Vec<Edge>,
    /// Token to the concepts containing it.
    index: BTreeMap<String, BTreeSet<String>>,
    /// Concept to the edges touching it.
    incident: BTreeMap<String, Vec<usize>>,
}

/// Lowercase, underscores to spaces, single-spaced.
fn normalize_concept(raw: &str) -> String {
    raw.replace('_', " ")
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

impl ConceptGraph {
    pub fn load(
        path: impl AsRef<Path>,
        stopwords: &StopwordList,
    ) -> Result<(Self, GraphLoadStats)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| RetrievalError::io(path, e))?;
        Self::parse(&text, path, stopwords)
    }

    /// One edge per line: `start<TAB>end<TAB>relation<TAB>weight`. Blank lines
    /// are skipped.
    pub fn parse(
        text: &str,
        path: &Path,
        stopwords: &StopwordList,
    ) -> Result<(Self, GraphLoadStats)> {
        let mut graph = Self::default();
        let mut stats = GraphLoadStats::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            stats.lines += 1;
            let err = |message: String| RetrievalError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(err(format!(
                    "expected 4 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            let weight: f64 = fields[3]
                .trim()
                .parse()
                .map_err(|_| err(format!("weight {:?} is not a number", fields[3])))?;
            if !(weight.is_finite() && weight >= 0.0) {
                return Err(err(format!(
                    "weight {weight} must be finite and nonnegative"
                )));
            }
            let (start, end) = (normalize_concept(fields[0]), normalize_concept(fields[1]));
            if start.is_empty() || end.is_empty() {
                return Err(err("empty concept".into()));
            }
            let relation = fields[2].split_whitespace().collect::<Vec<_>>().join(" ");
            if relation.is_empty() {
                stats.dropped_empty_relation += 1;
                continue;
            }
            if stopwords.contains(&start) || stopwords.contains(&end) {
                stats.dropped_stopword += 1;
                continue;
            }
            graph.add_edge(Edge {
                start,
                end,
                relation,
                weight,
            });
            stats.kept += 1;
        }
        Ok((graph, stats))
    }

    pub fn add_edge(&mut self, edge: Edge) {
        let id = self.edges.len();
        for concept in [&edge.start, &edge.end] {
            if self.concepts.insert(concept.clone()) {
                for tok in concept.split(' ') {
                    self.index
                        .entry(tok.to_string())
                        .or_default()
                        .insert(concept.clone());
                }
            }
            let incident = self.incident.entry(concept.clone()).or_default();
            if incident.last() != Some(&id) {
                incident.push(id);
            }
        }
        self.edges.push(edge);
    }

    pub fn concepts(&self) -> &BTreeSet<String> {
        &self.concepts
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Concepts whose words occur as a contiguous run in `tokens`.
    pub fn matched_concepts(&self, tokens: &[String]) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for tok in tokens {
            let Some(candidates) = self.index.get(tok) else {
                continue;
            };
            for concept in candidates {
                if !out.contains(concept) && contains_run(tokens, concept) {
                    out.insert(concept.clone());
                }
            }
        }
        out
    }
}

pub(crate) fn contains_run(tokens: &[String], concept: &str) -> bool {
    let words: Vec<&str> = concept.split(' ').collect();
    words.len() <= tokens.len()
        && tokens
            .windows(words.len())
            .any(|w| w.iter().zip(&words).all(|(a, b)| a == b))
}

/// Length-1 paths whose start or end concept occurs in the text or in the
/// target, best `k` by weight. Text and target are matched separately so
/// no concept spans the boundary between them.
pub fn conceptgraph_retrieve(
    text_tokens: &[String],
    target_tokens: &[String],
    graph: &ConceptGraph,
    k: usize,
) -> Vec<ContextCandidate> {
    let mut matched = graph.matched_concepts(text_tokens);
    matched.extend(graph.matched_concepts(target_tokens));
    let edge_ids: BTreeSet<usize> = matched
        .iter()
        .filter_map(|c| graph.incident.get(c))
        .flatten()
        .copied()
        .collect();
    let mut out: Vec<ContextCandidate> = edge_ids
        .into_iter()
        .map(|id| {
            let e = &graph.edges[id];
            ContextCandidate {
                text: [e.relation.as_str()].join(PATH_JOINER),
                score: e.weight,
                source: ContextSource::ConceptGraph,
                provenance: format!("{} -> {}", e.start, e.end),
            }
        })
        .collect();
    rank_candidates(&mut out);
    out.truncate(k);
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn toks(s: &str) -> Vec<String> {
        crate::text::words(s)
    }

    const FIXTURE: &str = "school_spirit\tpride\tschool spirit is a form of pride\t2.0
school uniform\tstudent\tstudents wear a school uniform\t1.5
the\tschool\tthe school is a place\t3.0
uniform\tclothing\t\t1.0
school\tbuilding\ta school is a building\t1.0

pride\temotion\tpride is an emotion\t0.5
sense\tfeeling\ta sense is a feeling\t0.5
spirit\tghost\ta spirit can be a ghost\t0.7
school\tof\tschool of fish\t4.0
students\tlearning\tstudents are learning\t1.0
";

    fn fixture() -> (ConceptGraph, GraphLoadStats) {
        ConceptGraph::parse(FIXTURE, Path::new("fixture.tsv"), &StopwordList::english()).unwrap()
    }

    #[test]
    fn load_applies_filters() {
        let (g, stats) = fixture();
        assert_eq!(
            stats,
            GraphLoadStats {
                lines: 10,
                kept: 7,
                dropped_empty_relation: 1,
                dropped_stopword: 2,
            }
        );
        let relations: Vec<_> = g.edges().iter().map(|e| e.relation.as_str()).collect();
        assert_eq!(
            relations,
            [
                "school spirit is a form of pride",
                "students wear a school uniform",
                "a school is a building",
                "pride is an emotion",
                "a sense is a feeling",
                "a spirit can be a ghost",
                "students are learning",
            ]
        );
        assert!(!g.concepts().contains("the"));
        assert!(g.concepts().contains("school spirit"));
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let sw = StopwordList::english();
        let bad = ["a\tb\tc", "a\tb\tc\tx", "a\tb\tc\t-1"];
        for text in bad {
            let input = format!("x\ty\tz\t1\n{text}\n");
            match ConceptGraph::parse(&input, Path::new("f"), &sw) {
                Err(RetrievalError::Parse { line, .. }) => assert_eq!(line, 2),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn retrieve_ranks_by_weight() {
        let (g, _) = fixture();
        let got = conceptgraph_retrieve(
            &toks("Creates a sense of school spirit."),
            &toks("school uniforms"),
            &g,
            10,
        );
        let texts: Vec<_> = got.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(
            texts,
            [
                "school spirit is a form of pride",
                "a school is a building",
                "a spirit can be a ghost",
                "a sense is a feeling",
            ]
        );
        assert_eq!(got[0].score, 2.0);
        assert_eq!(got[0].provenance, "school spirit -> pride");
        let top = conceptgraph_retrieve(&toks("school spirit"), &[], &g, 1);
        assert_eq!(top.len(), 1);
    }

    #[test]
    fn whole_token_matching_only() {
        let (g, _) = fixture();
        // "schools" and "spirited" must not match "school" / "spirit"
        assert!(conceptgraph_retrieve(&toks("schools are spirited"), &[], &g, 5).is_empty());
        assert!(conceptgraph_retrieve(&toks("spirit school"), &[], &g, 5)
            .iter()
            .all(|c| c.provenance != "school spirit -> pride"));
    }

    #[test]
    fn empty_graph_gives_nothing() {
        let g = ConceptGraph::default();
        assert!(conceptgraph_retrieve(&toks("school spirit"), &toks("x"), &g, 3).is_empty());
    }

    fn brute_force(
        tokens: &[String],
        target: &[String],
        g: &ConceptGraph,
        k: usize,
    ) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = g
            .edges()
            .iter()
            .filter(|e| {
                [&e.start, &e.end]
                    .iter()
                    .any(|c| contains_run(tokens, c) || contains_run(target, c))
            })
            .map(|e| (e.relation.clone(), e.weight))
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out.truncate(k);
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn matches_brute_force(
            edges in prop::collection::vec((0usize..50, 0usize..50, 0usize..6, 0u8..4), 0..80),
            text in prop::collection::vec(0usize..12, 0..10),
            target in prop::collection::vec(0usize..12, 0..3),
            k in 1usize..8,
        ) {
            let words = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta", "iota", "kappa", "lambda", "mu"];
            let concept = |n: usize| match n % 3 {
                0 => words[n % 12].to_string(),
                1 => format!("{} {}", words[n % 12], words[(n / 3) % 12]),
                _ => format!("{} {} {}", words[n % 12], words[(n / 5) % 12], words[(n / 7) % 12]),
            };
            let mut g = ConceptGraph::default();
            for (s, e, r, w) in edges {
                g.add_edge(Edge { start: concept(s), end: concept(e), relation: format!("rel{r}"), weight: w as f64 * 0.5 });
            }
            let text: Vec<String> = text.into_iter().map(|i| words[i].to_string()).collect();
            let target: Vec<String> = target.into_iter().map(|i| words[i].to_string()).collect();
            let got: Vec<(String, f64)> = conceptgraph_retrieve(&text, &target, &g, k).into_iter().map(|c| (c.text, c.score)).collect();
            prop_assert_eq!(got, brute_force(&text, &target, &g, k));
        }
    }
}
