//! Triple store for a commonsense knowledge graph.
//!
//! Nodes are free-form phrases identified by exact surface text. Relations
//! are symbolic; after [`Ckg::add_inverse_relations`] every forward relation
//! `r` with id `i` has an inverse `r^-1` with id `i + F`, where `F` is the
//! number of forward relations.
//!
//! Triples are kept sorted by `(head, relation, tail)`, so the head index is
//! a compressed offset table and the triples of one head come out in
//! ascending `(relation, tail)` order.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationId(pub u32);

impl RelationId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Bijection between node texts and dense ids, in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeTable {
    texts: Vec<String>,
    ids: HashMap<String, NodeId>,
}

impl NodeTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the id of `text`, assigning the next id if it is new.
    pub fn intern(&mut self, text: &str) -> NodeId {
        if let Some(&id) = self.ids.get(text) {
            return id;
        }
        let id = NodeId(self.texts.len() as u32);
        self.texts.push(text.to_owned());
        self.ids.insert(text.to_owned(), id);
        id
    }

    pub fn get(&self, text: &str) -> Option<NodeId> {
        self.ids.get(text).copied()
    }

    pub fn text(&self, id: NodeId) -> &str {
        &self.texts[id.index()]
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.index() < self.texts.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &str)> {
        self.texts
            .iter()
            .enumerate()
            .map(|(i, t)| (NodeId(i as u32), t.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    pub name: String,
    pub is_inverse: bool,
    pub inverse_of: Option<RelationId>,
}

/// Relation table. Forward relations occupy ids `0..F`; once augmented,
/// their inverses occupy `F..2F` in matching order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelationTable {
    entries: Vec<Relation>,
    forward: HashMap<String, RelationId>,
    forward_count: usize,
}

pub const INVERSE_SUFFIX: &str = "^-1";

impl RelationTable {
    pub fn new() -> Self {
        Self::default()
    }

    fn intern_forward(&mut self, name: &str) -> Result<RelationId> {
        if let Some(&id) = self.forward.get(name) {
            return Ok(id);
        }
        if self.is_augmented() {
            return Err(Error::Domain(format!(
                "cannot add relation {name:?} after inverse augmentation"
            )));
        }
        let id = RelationId(self.entries.len() as u32);
        self.entries.push(Relation {
            name: name.to_owned(),
            is_inverse: false,
            inverse_of: None,
        });
        self.forward.insert(name.to_owned(), id);
        self.forward_count += 1;
        Ok(id)
    }

    fn augment(&mut self) {
        let f = self.forward_count;
        for i in 0..f {
            let inv = RelationId((f + i) as u32);
            self.entries[i].inverse_of = Some(inv);
            let name = self.entries[i].name.clone();
            self.entries.push(Relation {
                name,
                is_inverse: true,
                inverse_of: Some(RelationId(i as u32)),
            });
        }
    }

    pub fn is_augmented(&self) -> bool {
        self.entries.len() > self.forward_count
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn forward_count(&self) -> usize {
        self.forward_count
    }

    pub fn get(&self, id: RelationId) -> &Relation {
        &self.entries[id.index()]
    }

    pub fn inverse_of(&self, id: RelationId) -> Option<RelationId> {
        self.entries[id.index()].inverse_of
    }

    /// Human-readable name; inverses carry the `^-1` suffix.
    pub fn display_name(&self, id: RelationId) -> String {
        let rel = &self.entries[id.index()];
        if rel.is_inverse {
            format!("{}{}", rel.name, INVERSE_SUFFIX)
        } else {
            rel.name.clone()
        }
    }

    /// Resolves a forward name, or `name^-1` for an inverse when augmented.
    pub fn lookup(&self, name: &str) -> Option<RelationId> {
        if let Some(&id) = self.forward.get(name) {
            return Some(id);
        }
        let base = name.strip_suffix(INVERSE_SUFFIX)?;
        let fwd = self.forward.get(base)?;
        self.inverse_of(*fwd)
    }

    pub fn ids(&self) -> impl Iterator<Item = RelationId> {
        (0..self.entries.len() as u32).map(RelationId)
    }

    pub fn display_names(&self) -> Vec<String> {
        self.ids().map(|r| self.display_name(r)).collect()
    }
}

/// Shared id space for nodes and forward relations, so that train, dev and
/// test files can be loaded against one registry.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    pub nodes: NodeTable,
    pub relations: RelationTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: NodeId,
    pub relation: RelationId,
    pub tail: NodeId,
}

impl Triple {
    pub fn new(head: NodeId, relation: RelationId, tail: NodeId) -> Self {
        Self { head, relation, tail }
    }
}

/// An immutable knowledge graph with a head index.
#[derive(Debug, Clone)]
pub struct Ckg {
    vocab: Vocab,
    triples: Vec<Triple>,
    /// `head_offsets[v]..head_offsets[v + 1]` are the triples whose head is `v`.
    head_offsets: Vec<usize>,
    duplicates_dropped: usize,
}

impl Ckg {
    /// Reads a tab-separated triple file (`head<TAB>relation<TAB>tail`).
    ///
    /// New node texts and relation names extend `registry` when one is given,
    /// so several files can share one id space.
    pub fn load_triples(path: impl AsRef<Path>, registry: Option<Vocab>) -> Result<Ckg> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_triples(&text, path, registry)
    }

    /// Parses triple-file contents; `origin` is only used in error messages.
    pub fn parse_triples(text: &str, origin: &Path, registry: Option<Vocab>) -> Result<Ckg> {
        let mut vocab = registry.unwrap_or_default();
        let mut raw = Vec::new();
        for (lineno, line) in text.split('\n').enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(
                    origin,
                    lineno + 1,
                    format!("expected 3 tab-separated fields, found {}", fields.len()),
                ));
            }
            if let Some(pos) = fields.iter().position(|f| f.is_empty()) {
                return Err(Error::parse(origin, lineno + 1, format!("field {} is empty", pos + 1)));
            }
            let head = vocab.nodes.intern(fields[0]);
            let relation = vocab
                .relations
                .intern_forward(fields[1])
                .map_err(|e| Error::parse(origin, lineno + 1, e.to_string()))?;
            let tail = vocab.nodes.intern(fields[2]);
            raw.push(Triple::new(head, relation, tail));
        }
        Ok(Self::from_parts(vocab, raw))
    }

    /// Builds a graph from text triples; convenient for fixtures.
    pub fn from_text_triples<'a>(
        triples: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>,
        registry: Option<Vocab>,
    ) -> Result<Ckg> {
        let mut vocab = registry.unwrap_or_default();
        let mut raw = Vec::new();
        for (h, r, t) in triples {
            if h.is_empty() || r.is_empty() || t.is_empty() {
                return Err(Error::Domain("empty field in triple".into()));
            }
            let head = vocab.nodes.intern(h);
            let relation = vocab.relations.intern_forward(r)?;
            let tail = vocab.nodes.intern(t);
            raw.push(Triple::new(head, relation, tail));
        }
        Ok(Self::from_parts(vocab, raw))
    }

    /// Builds a graph from id triples that must already be valid in `vocab`.
    pub fn from_id_triples(vocab: Vocab, triples: impl IntoIterator<Item = Triple>) -> Result<Ckg> {
        let raw: Vec<Triple> = triples.into_iter().collect();
        for t in &raw {
            if !vocab.nodes.contains(t.head) || !vocab.nodes.contains(t.tail) {
                return Err(Error::Lookup(format!("triple {t:?} references an unknown node")));
            }
            if t.relation.index() >= vocab.relations.len() {
                return Err(Error::Lookup(format!("triple {t:?} references an unknown relation")));
            }
        }
        Ok(Self::from_parts(vocab, raw))
    }

    fn from_parts(vocab: Vocab, raw: Vec<Triple>) -> Ckg {
        let before = raw.len();
        let mut seen = HashSet::with_capacity(raw.len());
        let mut triples: Vec<Triple> = raw.into_iter().filter(|t| seen.insert(*t)).collect();
        let duplicates_dropped = before - triples.len();
        triples.sort_unstable();
        let head_offsets = build_offsets(&triples, vocab.nodes.len());
        Ckg {
            vocab,
            triples,
            head_offsets,
            duplicates_dropped,
        }
    }

    /// Adds `r^-1(t, h)` for every `r(h, t)` and doubles the relation table.
    pub fn add_inverse_relations(&self) -> Result<Ckg> {
        if self.vocab.relations.is_augmented() {
            return Err(Error::AlreadyAugmented);
        }
        let mut vocab = self.vocab.clone();
        vocab.relations.augment();
        let f = vocab.relations.forward_count() as u32;
        let mut triples = self.triples.clone();
        triples.extend(
            self.triples
                .iter()
                .map(|t| Triple::new(t.tail, RelationId(t.relation.0 + f), t.head)),
        );
        triples.sort_unstable();
        let head_offsets = build_offsets(&triples, vocab.nodes.len());
        Ok(Ckg {
            vocab,
            triples,
            head_offsets,
            duplicates_dropped: self.duplicates_dropped,
        })
    }

    /// Replaces the registry with a superset that was grown by loading other
    /// files against this graph's registry. Existing ids must be unchanged.
    pub fn adopt_vocab(&mut self, vocab: Vocab) -> Result<()> {
        let ours = &self.vocab;
        let nodes_ok = vocab.nodes.len() >= ours.nodes.len()
            && ours.nodes.iter().all(|(id, text)| vocab.nodes.get(text) == Some(id));
        let rel_ok = if ours.relations.is_augmented() {
            vocab.relations == ours.relations
        } else {
            vocab.relations.len() >= ours.relations.len()
                && ours
                    .relations
                    .ids()
                    .all(|r| vocab.relations.lookup(&ours.relations.get(r).name) == Some(r))
        };
        if !nodes_ok || !rel_ok {
            return Err(Error::Domain("registry does not extend this graph's id space".into()));
        }
        self.vocab = vocab;
        self.head_offsets = build_offsets(&self.triples, self.vocab.nodes.len());
        Ok(())
    }

    /// Triples whose head is `v`, in ascending `(relation, tail)` order.
    pub fn triples_with_head(&self, v: NodeId) -> Result<&[Triple]> {
        if !self.vocab.nodes.contains(v) {
            return Err(Error::Lookup(format!("node id {} out of range", v.0)));
        }
        Ok(&self.triples[self.head_range(v)])
    }

    /// Indices into [`Ckg::triples`] of the triples whose head is `v`.
    pub fn head_range(&self, v: NodeId) -> std::ops::Range<usize> {
        let i = v.index();
        if i + 1 >= self.head_offsets.len() {
            return 0..0;
        }
        self.head_offsets[i]..self.head_offsets[i + 1]
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn triple(&self, index: usize) -> Triple {
        self.triples[index]
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn nodes(&self) -> &NodeTable {
        &self.vocab.nodes
    }

    pub fn relations(&self) -> &RelationTable {
        &self.vocab.relations
    }

    pub fn is_augmented(&self) -> bool {
        self.vocab.relations.is_augmented()
    }

    pub fn duplicates_dropped(&self) -> usize {
        self.duplicates_dropped
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Triples over forward relations only.
    pub fn forward_triples(&self) -> impl Iterator<Item = &Triple> {
        let rels = &self.vocab.relations;
        self.triples.iter().filter(move |t| !rels.get(t.relation).is_inverse)
    }

    pub fn contains(&self, t: &Triple) -> bool {
        if !self.vocab.nodes.contains(t.head) {
            return false;
        }
        self.triples[self.head_range(t.head)].binary_search(t).is_ok()
    }

    /// Renders `rel(head, tail)` with node texts.
    pub fn render_triple(&self, t: &Triple) -> String {
        format!(
            "{}({}, {})",
            self.vocab.relations.display_name(t.relation),
            self.vocab.nodes.text(t.head),
            self.vocab.nodes.text(t.tail)
        )
    }
}

fn build_offsets(sorted: &[Triple], node_count: usize) -> Vec<usize> {
    let mut offsets = vec![0usize; node_count + 1];
    for t in sorted {
        offsets[t.head.index() + 1] += 1;
    }
    for i in 0..node_count {
        offsets[i + 1] += offsets[i];
    }
    offsets
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn parse(text: &str) -> Result<Ckg> {
        Ckg::parse_triples(text, &PathBuf::from("fixture.tsv"), None)
    }

    #[test]
    fn loads_two_lines() {
        let g = parse("a\tr\tb\nb\tr\tc\n").unwrap();
        assert_eq!(g.nodes().len(), 3);
        assert_eq!(g.relations().len(), 1);
        assert_eq!(g.len(), 2);
        assert_eq!(g.nodes().get("a"), Some(NodeId(0)));
        assert_eq!(g.nodes().get("c"), Some(NodeId(2)));
    }

    #[test]
    fn duplicate_lines_are_dropped_and_counted() {
        let g = parse("a\tr\tb\na\tr\tb\n").unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.duplicates_dropped(), 1);
    }

    #[test]
    fn short_line_reports_its_number() {
        let err = parse("a\tr\tb\na\tr\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_field_is_rejected() {
        assert!(matches!(parse("a\t\tb"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn crlf_endings_accepted() {
        let g = parse("a\tr\tb\r\nb\tr\tc\r\n").unwrap();
        assert_eq!(g.nodes().text(NodeId(2)), "c");
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn inverse_augmentation_adds_reversed_triples() {
        let g = parse("a\tr\tb").unwrap().add_inverse_relations().unwrap();
        let r = g.relations().lookup("r").unwrap();
        let r_inv = g.relations().lookup("r^-1").unwrap();
        assert_eq!(g.relations().inverse_of(r), Some(r_inv));
        assert_eq!(g.relations().inverse_of(r_inv), Some(r));
        let a = g.nodes().get("a").unwrap();
        let b = g.nodes().get("b").unwrap();
        assert_eq!(g.triples(), &[Triple::new(a, r, b), Triple::new(b, r_inv, a)]);
        assert_eq!(g.triples_with_head(b).unwrap(), &[Triple::new(b, r_inv, a)]);
        assert_eq!(g.relations().display_name(r_inv), "r^-1");
    }

    #[test]
    fn augmenting_twice_fails() {
        let g = parse("a\tr\tb").unwrap().add_inverse_relations().unwrap();
        assert!(matches!(g.add_inverse_relations(), Err(Error::AlreadyAugmented)));
    }

    #[test]
    fn empty_graph_augments_to_empty() {
        let g = parse("").unwrap().add_inverse_relations().unwrap();
        assert!(g.is_empty());
        assert_eq!(g.relations().len(), 0);
    }

    #[test]
    fn self_loop_survives_augmentation() {
        let g = parse("a\tr\ta").unwrap().add_inverse_relations().unwrap();
        let a = g.nodes().get("a").unwrap();
        assert_eq!(g.len(), 2);
        assert!(g.contains(&Triple::new(a, RelationId(1), a)));
    }

    #[test]
    fn head_lookup_sorted_by_relation_then_tail() {
        let g = parse("a\ts\tc\na\tr\tc\nb\ts\tc\na\tr\tb").unwrap();
        let a = g.nodes().get("a").unwrap();
        let got: Vec<String> = g
            .triples_with_head(a)
            .unwrap()
            .iter()
            .map(|t| g.render_triple(t))
            .collect();
        // relation ids follow first appearance (s=0, r=1); node ids c=1, b=2
        assert_eq!(got, ["s(a, c)", "r(a, c)", "r(a, b)"]);
    }

    #[test]
    fn node_without_edges_and_invalid_node() {
        let g = parse("a\tr\tb").unwrap();
        assert!(g.triples_with_head(NodeId(1)).unwrap().is_empty());
        assert!(matches!(g.triples_with_head(NodeId(9)), Err(Error::Lookup(_))));
    }

    #[test]
    fn shared_registry_extends_ids() {
        let train = parse("a\tr\tb").unwrap();
        let test = Ckg::parse_triples("a\tr\tc\nc\tq\ta", Path::new("t"), Some(train.vocab().clone())).unwrap();
        assert_eq!(test.nodes().get("a"), Some(NodeId(0)));
        assert_eq!(test.nodes().get("c"), Some(NodeId(2)));
        assert_eq!(test.relations().lookup("q"), Some(RelationId(1)));
        let mut train = train;
        train.adopt_vocab(test.vocab().clone()).unwrap();
        assert!(train.triples_with_head(NodeId(2)).unwrap().is_empty());
    }
}
