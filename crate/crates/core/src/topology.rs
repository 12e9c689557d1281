//! Segment graphs and the builders for the supported graph families.
//!
//! A directed edge `(s, t)` means target `t` is re-encoded while reading the
//! round-0 KV of source `s`. All per-target source lists are kept in
//! ascending id order; that order is what the encoders concatenate.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub id: u32,
    pub text: String,
    pub tokens: Vec<u32>,
}

impl Segment {
    pub fn from_text(id: u32, text: impl Into<String>) -> Self {
        let text = text.into();
        Self {
            id,
            tokens: tokenizer::encode(&text),
            text,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentGraph {
    /// Ascending by id.
    segments: Vec<Segment>,
    /// Ids in the order the caller supplied them.
    input_order: Vec<u32>,
    edges: BTreeSet<(u32, u32)>,
    sources: BTreeMap<u32, Vec<u32>>,
}

impl SegmentGraph {
    pub fn new(segments: Vec<Segment>, edges: Vec<(u32, u32)>) -> Result<Self> {
        let input_order: Vec<u32> = segments.iter().map(|s| s.id).collect();
        let mut by_id = BTreeMap::new();
        for s in segments {
            if s.tokens.is_empty() {
                return Err(Error::InvalidGraph(format!("segment {} is empty", s.id)));
            }
            let id = s.id;
            if by_id.insert(id, s).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate segment id {id}")));
            }
        }
        let mut edge_set = BTreeSet::new();
        let mut sources: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (s, t) in edges {
            if s == t {
                return Err(Error::InvalidGraph(format!("self-edge on segment {s}")));
            }
            for end in [s, t] {
                if !by_id.contains_key(&end) {
                    return Err(Error::InvalidGraph(format!(
                        "edge {s}->{t} references unknown segment {end}"
                    )));
                }
            }
            if !edge_set.insert((s, t)) {
                return Err(Error::InvalidGraph(format!("duplicate edge {s}->{t}")));
            }
            sources.entry(t).or_default().push(s);
        }
        for list in sources.values_mut() {
            list.sort_unstable();
        }
        Ok(Self {
            segments: by_id.into_values().collect(),
            input_order,
            edges: edge_set,
            sources,
        })
    }

    /// Segments in ascending id order.
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn input_order(&self) -> &[u32] {
        &self.input_order
    }

    pub fn segment(&self, id: u32) -> Option<&Segment> {
        self.segments
            .binary_search_by_key(&id, |s| s.id)
            .ok()
            .map(|i| &self.segments[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.segments.iter().map(|s| s.id)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Edges sorted by (source, target).
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edges(&self) -> bool {
        !self.edges.is_empty()
    }

    /// `N(j)` in ascending id order; empty for non-targets.
    pub fn sources_of(&self, id: u32) -> &[u32] {
        self.sources.get(&id).map_or(&[], Vec::as_slice)
    }

    pub fn is_target(&self, id: u32) -> bool {
        self.sources.contains_key(&id)
    }

    pub fn targets(&self) -> Vec<u32> {
        self.sources.keys().copied().collect()
    }

    /// Segments that are never a target.
    pub fn pure_sources(&self) -> Vec<u32> {
        self.ids().filter(|id| !self.is_target(*id)).collect()
    }

    pub fn max_len(&self) -> usize {
        self.segments.iter().map(Segment::len).max().unwrap_or(0)
    }

    pub fn total_tokens(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    /// Same segments (and input order) with a different edge set.
    pub fn with_edges(&self, edges: Vec<(u32, u32)>) -> Result<Self> {
        let segments = self
            .input_order
            .iter()
            .map(|&id| self.segment(id).cloned().expect("id from input order"))
            .collect();
        Self::new(segments, edges)
    }

    pub fn without_edges(&self) -> Self {
        self.with_edges(Vec::new()).expect("edgeless graph over valid segments")
    }
}

/// The `m` highest-scoring segments become sources of every other segment.
/// Ties on score go to the lower id.
pub fn build_bipartite_topm(segments: Vec<Segment>, scores: &[f64], m: usize) -> Result<SegmentGraph> {
    if scores.len() != segments.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} segments",
            scores.len(),
            segments.len()
        )));
    }
    let n = segments.len();
    if m < 1 || m >= n {
        return Err(Error::InvalidArgument(format!(
            "m must satisfy 1 <= m < n, got m={m}, n={n}"
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score {bad}")));
    }
    let mut ranked: Vec<(f64, u32)> = scores
        .iter()
        .zip(&segments)
        .map(|(&s, seg)| (s, seg.id))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let sources: BTreeSet<u32> = ranked[..m].iter().map(|&(_, id)| id).collect();
    let mut edges = Vec::with_capacity(m * (n - m));
    for seg in &segments {
        if !sources.contains(&seg.id) {
            edges.extend(sources.iter().map(|&s| (s, seg.id)));
        }
    }
    SegmentGraph::new(segments, edges)
}

/// Every segment is a target of every other segment; no self-edges.
pub fn build_full(segments: Vec<Segment>) -> Result<SegmentGraph> {
    if segments.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "full topology needs at least 2 segments, got {}",
            segments.len()
        )));
    }
    let ids: Vec<u32> = segments.iter().map(|s| s.id).collect();
    let edges = ids
        .iter()
        .flat_map(|&t| ids.iter().filter(move |&&s| s != t).map(move |&s| (s, t)))
        .collect();
    SegmentGraph::new(segments, edges)
}

/// Edges `leaf -> center` for every leaf.
pub fn build_star(segments: Vec<Segment>, center_id: u32, leaf_ids: &[u32]) -> Result<SegmentGraph> {
    if leaf_ids.is_empty() {
        return Err(Error::InvalidArgument("star needs at least one leaf".into()));
    }
    if leaf_ids.contains(&center_id) {
        return Err(Error::InvalidArgument(format!(
            "center {center_id} is also listed as a leaf"
        )));
    }
    let edges = leaf_ids.iter().map(|&l| (l, center_id)).collect();
    SegmentGraph::new(segments, edges)
}

const SEED_TEXT: &str = "Message passing over a citation network lets each paper gather \
evidence from the works it cites. A language model reads every document as a sequence of \
tokens, so related passages must be laid out one after another before the model can relate \
them. Encoding passages independently keeps the cost linear in their number, but it hides \
which passage depends on which. Reusing cached keys and values for each passage avoids \
repeated work when the same documents appear in many requests. Positions can be shared \
between passages that have no natural order, which keeps the context window short and \
removes any preference for the first or the last passage. The target passage then reads its \
sources once, and the query attends to every passage when the answer is generated.";

/// Deterministic pseudo-text of exactly `words` whitespace-separated words,
/// cycling through a fixed paragraph from a seed-dependent offset.
pub fn synth_text(words: usize, rng: &mut ChaCha8Rng) -> String {
    let vocab: Vec<&str> = SEED_TEXT.split_whitespace().collect();
    let start = rng.next_u32() as usize % vocab.len();
    (0..words)
        .map(|i| vocab[(start + i) % vocab.len()])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Star with leaves `0..num_leaves` pointing at center `num_leaves`.
pub fn synth_star(num_leaves: usize, words_per_node: usize, seed: u64) -> Result<SegmentGraph> {
    if num_leaves < 1 || words_per_node < 1 {
        return Err(Error::InvalidArgument(
            "synthetic star needs at least one leaf and one word per node".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = num_leaves as u32;
    let segments = (0..=center)
        .map(|id| Segment::from_text(id, synth_text(words_per_node, &mut rng)))
        .collect();
    let leaves: Vec<u32> = (0..center).collect();
    build_star(segments, center, &leaves)
}

/// Graph JSON: `{"segments":[{"id":..,"text":..}],"edges":[[s,t]],"scores":[..]?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    pub segments: Vec<SegmentRecord>,
    #[serde(default)]
    pub edges: Vec<[u32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub id: u32,
    pub text: String,
}

impl GraphFile {
    pub fn read(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw)
            .map_err(|e| Error::InvalidGraph(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("graph file serializes");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn segments(&self) -> Vec<Segment> {
        self.segments
            .iter()
            .map(|r| Segment::from_text(r.id, r.text.clone()))
            .collect()
    }

    pub fn to_graph(&self) -> Result<SegmentGraph> {
        SegmentGraph::new(
            self.segments(),
            self.edges.iter().map(|e| (e[0], e[1])).collect(),
        )
    }

    pub fn from_graph(graph: &SegmentGraph, scores: Option<Vec<f64>>) -> Self {
        Self {
            segments: graph
                .input_order()
                .iter()
                .map(|&id| {
                    let s = graph.segment(id).expect("id from input order");
                    SegmentRecord {
                        id,
                        text: s.text.clone(),
                    }
                })
                .collect(),
            edges: graph.edges().map(|(s, t)| [s, t]).collect(),
            scores,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn segs(n: u32) -> Vec<Segment> {
        (0..n).map(|i| Segment::from_text(i, format!("chunk {i}"))).collect()
    }

    fn edge_vec(g: &SegmentGraph) -> Vec<(u32, u32)> {
        g.edges().collect()
    }

    #[test]
    fn topm_single_source() {
        let g = build_bipartite_topm(segs(4), &[0.9, 0.8, 0.7, 0.1], 1).unwrap();
        assert_eq!(edge_vec(&g), vec![(0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn topm_three_sources() {
        let g = build_bipartite_topm(segs(4), &[0.9, 0.8, 0.7, 0.1], 3).unwrap();
        assert_eq!(edge_vec(&g), vec![(0, 3), (1, 3), (2, 3)]);
        assert_eq!(g.sources_of(3), &[0, 1, 2]);
        assert_eq!(g.pure_sources(), vec![0, 1, 2]);
    }

    #[test]
    fn topm_rejects_bad_m() {
        assert!(build_bipartite_topm(segs(4), &[0.1; 4], 0).is_err());
        assert!(build_bipartite_topm(segs(4), &[0.1; 4], 4).is_err());
        assert!(build_bipartite_topm(segs(4), &[0.1; 3], 1).is_err());
        assert!(build_bipartite_topm(segs(2), &[f64::NAN, 0.0], 1).is_err());
    }

    #[test]
    fn full_counts() {
        assert_eq!(edge_vec(&build_full(segs(2)).unwrap()), vec![(0, 1), (1, 0)]);
        assert_eq!(build_full(segs(3)).unwrap().edge_count(), 6);
        assert_eq!(build_full(segs(10)).unwrap().edge_count(), 90);
        assert!(build_full(segs(1)).is_err());
    }

    #[test]
    fn star_shape() {
        let g = build_star(segs(3), 2, &[0, 1]).unwrap();
        assert_eq!(edge_vec(&g), vec![(0, 2), (1, 2)]);
        let g = build_star(segs(11), 10, &(0..10).collect::<Vec<_>>()).unwrap();
        assert_eq!(g.edge_count(), 10);
        assert_eq!(g.targets(), vec![10]);
        assert_eq!(g.pure_sources(), (0..10).collect::<Vec<_>>());
        assert!(build_star(segs(3), 2, &[2, 1]).is_err());
        assert!(build_star(segs(3), 2, &[]).is_err());
    }

    #[test]
    fn graph_validation() {
        assert!(SegmentGraph::new(segs(2), vec![(0, 0)]).is_err());
        assert!(SegmentGraph::new(segs(2), vec![(0, 5)]).is_err());
        assert!(SegmentGraph::new(segs(2), vec![(0, 1), (0, 1)]).is_err());
        let mut dup = segs(2);
        dup[1].id = 0;
        assert!(SegmentGraph::new(dup, vec![]).is_err());
        assert!(SegmentGraph::new(vec![Segment::from_text(0, "")], vec![]).is_err());
    }

    #[test]
    fn canonical_order_ignores_input_order() {
        let mut s = segs(3);
        s.reverse();
        let g = SegmentGraph::new(s, vec![(2, 0), (1, 0)]).unwrap();
        assert_eq!(g.ids().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(g.input_order(), &[2, 1, 0]);
        assert_eq!(g.sources_of(0), &[1, 2]);
    }

    #[test]
    fn synth_star_is_deterministic_with_exact_word_counts() {
        let a = synth_star(10, 100, 42).unwrap();
        let b = synth_star(10, 100, 42).unwrap();
        assert_eq!(a, b);
        let g = synth_star(3, 500, 1).unwrap();
        for s in g.segments() {
            assert_eq!(tokenizer::word_count(&s.text), 500);
        }
        assert_eq!(g.targets(), vec![3]);
        assert_ne!(synth_star(3, 50, 1).unwrap(), synth_star(3, 50, 2).unwrap());
    }

    #[test]
    fn graph_json_roundtrip() {
        let raw = r#"{"segments":[{"id":1,"text":"b"},{"id":0,"text":"a"}],"edges":[[0,1]],"scores":[0.5,0.25]}"#;
        let f: GraphFile = serde_json::from_str(raw).unwrap();
        let g = f.to_graph().unwrap();
        assert_eq!(g.sources_of(1), &[0]);
        let back = GraphFile::from_graph(&g, f.scores.clone());
        assert_eq!(back, f);
        let no_edges: GraphFile = serde_json::from_str(r#"{"segments":[{"id":3,"text":"x"}]}"#).unwrap();
        assert!(no_edges.edges.is_empty() && no_edges.scores.is_none());
    }
}
