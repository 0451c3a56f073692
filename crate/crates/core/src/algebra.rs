//! Operator algebra and the plan DAG.
//!
//! A logical plan is a DAG of typed operators over seven data kinds
//! (relations, graph nodes/edges/paths, documents, geometries, temporal
//! intervals). Operators come from a fixed vocabulary with fixed signatures;
//! cross-model casts (`rel_to_nodes`, `docs_to_rel`, ...) are the only way to
//! move between kinds. Plans are immutable once built and safe to share.
//!
//! Parameter values are opaque canonical strings with a typed tag; nothing in
//! this crate ever evaluates a predicate. Binary operators have ordered
//! slots: a commuted join is a different plan.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::Digest;

/// The seven data kinds flowing along plan edges.
///
/// `Temporal` is an extension kind carried only by `rel_to_temporal` /
/// `temporal_select`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Relation,
    Nodes,
    Edges,
    Paths,
    Docs,
    Geometry,
    Temporal,
}

impl DataKind {
    pub const ALL: [DataKind; 7] = [
        DataKind::Relation,
        DataKind::Nodes,
        DataKind::Edges,
        DataKind::Paths,
        DataKind::Docs,
        DataKind::Geometry,
        DataKind::Temporal,
    ];

    pub fn token(self) -> &'static str {
        match self {
            DataKind::Relation => "relation",
            DataKind::Nodes => "nodes",
            DataKind::Edges => "edges",
            DataKind::Paths => "paths",
            DataKind::Docs => "docs",
            DataKind::Geometry => "geometry",
            DataKind::Temporal => "temporal",
        }
    }

    pub fn from_token(s: &str) -> Option<DataKind> {
        DataKind::ALL.into_iter().find(|k| k.token() == s)
    }
}

impl fmt::Display for DataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Tag carried by every operator parameter value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamTag {
    Predicate,
    AttrList,
    CrsCode,
    VectorRef,
    Integer,
    ThresholdBin,
}

impl ParamTag {
    pub fn token(self) -> &'static str {
        match self {
            ParamTag::Predicate => "pred",
            ParamTag::AttrList => "attrs",
            ParamTag::CrsCode => "crs",
            ParamTag::VectorRef => "vec",
            ParamTag::Integer => "int",
            ParamTag::ThresholdBin => "bin",
        }
    }

    pub fn from_token(s: &str) -> Option<ParamTag> {
        [
            ParamTag::Predicate,
            ParamTag::AttrList,
            ParamTag::CrsCode,
            ParamTag::VectorRef,
            ParamTag::Integer,
            ParamTag::ThresholdBin,
        ]
        .into_iter()
        .find(|t| t.token() == s)
    }
}

/// Placeholder value marking a declared-but-unbound parameter (e.g. a query
/// vector that the user never supplied). The parameter *name* being present
/// keeps the instance well-formed; binding status is an annotation facet.
pub const UNBOUND_VALUE: &str = "?";

/// A tagged, opaque parameter value.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamValue {
    pub tag: ParamTag,
    pub value: String,
}

impl ParamValue {
    pub fn new(tag: ParamTag, value: impl Into<String>) -> Self {
        ParamValue { tag, value: value.into() }
    }

    pub fn is_bound(&self) -> bool {
        self.value != UNBOUND_VALUE
    }

    /// Render as `tag:value`, the form used in plan files.
    pub fn render(&self) -> String {
        format!("{}:{}", self.tag.token(), self.value)
    }

    pub fn parse(s: &str) -> Option<ParamValue> {
        let (tag, value) = s.split_once(':')?;
        let tag = ParamTag::from_token(tag)?;
        if value.is_empty() || value.contains(char::is_whitespace) {
            return None;
        }
        Some(ParamValue::new(tag, value))
    }
}

/// Every operator in the vocabulary: the four relational operators, graph
/// traversal/matching, text and vector retrieval, spatial operators,
/// enrichment operators, and the cross-model casts (plus the two temporal
/// extension operators).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorSymbol {
    Select,
    Project,
    Join,
    Group,
    Traverse,
    Match,
    Keyword,
    Fulltext,
    TopK,
    SimJoin,
    SpatialSelect,
    SpatialJoin,
    Reproject,
    SpatialKnn,
    ExtractEntities,
    ExtractRelations,
    Classify,
    Enrich,
    RelToNodes,
    GraphToRel,
    RelToDocs,
    DocsToRel,
    RelToGeom,
    GeomToRel,
    RelToTemporal,
    TemporalSelect,
}

/// An operator signature: input kinds (one per slot, in order) and the single
/// output kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OperatorKind {
    pub symbol: OperatorSymbol,
    pub input_kinds: &'static [DataKind],
    pub output_kind: DataKind,
}

impl OperatorKind {
    pub fn arity(&self) -> usize {
        self.input_kinds.len()
    }
}

use DataKind as K;

macro_rules! sig {
    ($inputs:expr, $out:expr) => {
        (&$inputs as &'static [DataKind], $out)
    };
}

impl OperatorSymbol {
    pub const ALL: [OperatorSymbol; 26] = [
        OperatorSymbol::Select,
        OperatorSymbol::Project,
        OperatorSymbol::Join,
        OperatorSymbol::Group,
        OperatorSymbol::Traverse,
        OperatorSymbol::Match,
        OperatorSymbol::Keyword,
        OperatorSymbol::Fulltext,
        OperatorSymbol::TopK,
        OperatorSymbol::SimJoin,
        OperatorSymbol::SpatialSelect,
        OperatorSymbol::SpatialJoin,
        OperatorSymbol::Reproject,
        OperatorSymbol::SpatialKnn,
        OperatorSymbol::ExtractEntities,
        OperatorSymbol::ExtractRelations,
        OperatorSymbol::Classify,
        OperatorSymbol::Enrich,
        OperatorSymbol::RelToNodes,
        OperatorSymbol::GraphToRel,
        OperatorSymbol::RelToDocs,
        OperatorSymbol::DocsToRel,
        OperatorSymbol::RelToGeom,
        OperatorSymbol::GeomToRel,
        OperatorSymbol::RelToTemporal,
        OperatorSymbol::TemporalSelect,
    ];

    pub fn token(self) -> &'static str {
        match self {
            OperatorSymbol::Select => "select",
            OperatorSymbol::Project => "project",
            OperatorSymbol::Join => "join",
            OperatorSymbol::Group => "group",
            OperatorSymbol::Traverse => "traverse",
            OperatorSymbol::Match => "match",
            OperatorSymbol::Keyword => "keyword",
            OperatorSymbol::Fulltext => "fulltext",
            OperatorSymbol::TopK => "topk",
            OperatorSymbol::SimJoin => "simjoin",
            OperatorSymbol::SpatialSelect => "spatial_select",
            OperatorSymbol::SpatialJoin => "spatial_join",
            OperatorSymbol::Reproject => "reproject",
            OperatorSymbol::SpatialKnn => "spatial_knn",
            OperatorSymbol::ExtractEntities => "extract_entities",
            OperatorSymbol::ExtractRelations => "extract_relations",
            OperatorSymbol::Classify => "classify",
            OperatorSymbol::Enrich => "enrich",
            OperatorSymbol::RelToNodes => "rel_to_nodes",
            OperatorSymbol::GraphToRel => "graph_to_rel",
            OperatorSymbol::RelToDocs => "rel_to_docs",
            OperatorSymbol::DocsToRel => "docs_to_rel",
            OperatorSymbol::RelToGeom => "rel_to_geom",
            OperatorSymbol::GeomToRel => "geom_to_rel",
            OperatorSymbol::RelToTemporal => "rel_to_temporal",
            OperatorSymbol::TemporalSelect => "temporal_select",
        }
    }

    pub fn from_token(s: &str) -> Option<OperatorSymbol> {
        OperatorSymbol::ALL.into_iter().find(|o| o.token() == s)
    }

    /// Signature of this operator.
    pub fn kind(self) -> OperatorKind {
        let (input_kinds, output_kind) = match self {
            OperatorSymbol::Select => sig!([K::Relation], K::Relation),
            OperatorSymbol::Project => sig!([K::Relation], K::Relation),
            OperatorSymbol::Join => sig!([K::Relation, K::Relation], K::Relation),
            OperatorSymbol::Group => sig!([K::Relation], K::Relation),
            OperatorSymbol::Traverse => sig!([K::Nodes], K::Nodes),
            OperatorSymbol::Match => sig!([K::Nodes], K::Paths),
            OperatorSymbol::Keyword => sig!([K::Docs], K::Docs),
            OperatorSymbol::Fulltext => sig!([K::Docs], K::Docs),
            OperatorSymbol::TopK => sig!([K::Docs], K::Docs),
            OperatorSymbol::SimJoin => sig!([K::Docs, K::Docs], K::Relation),
            OperatorSymbol::SpatialSelect => sig!([K::Geometry], K::Geometry),
            OperatorSymbol::SpatialJoin => sig!([K::Geometry, K::Geometry], K::Geometry),
            OperatorSymbol::Reproject => sig!([K::Geometry], K::Geometry),
            OperatorSymbol::SpatialKnn => sig!([K::Geometry], K::Geometry),
            OperatorSymbol::ExtractEntities => sig!([K::Docs], K::Relation),
            OperatorSymbol::ExtractRelations => sig!([K::Docs], K::Edges),
            OperatorSymbol::Classify => sig!([K::Docs], K::Relation),
            OperatorSymbol::Enrich => sig!([K::Docs], K::Docs),
            OperatorSymbol::RelToNodes => sig!([K::Relation], K::Nodes),
            OperatorSymbol::GraphToRel => sig!([K::Nodes, K::Edges], K::Relation),
            OperatorSymbol::RelToDocs => sig!([K::Relation], K::Docs),
            OperatorSymbol::DocsToRel => sig!([K::Docs], K::Relation),
            OperatorSymbol::RelToGeom => sig!([K::Relation], K::Geometry),
            OperatorSymbol::GeomToRel => sig!([K::Geometry], K::Relation),
            OperatorSymbol::RelToTemporal => sig!([K::Relation], K::Temporal),
            OperatorSymbol::TemporalSelect => sig!([K::Temporal], K::Temporal),
        };
        OperatorKind { symbol: self, input_kinds, output_kind }
    }

    pub fn arity(self) -> usize {
        self.kind().arity()
    }

    /// Parameter names (with tags) that must be present on every instance.
    pub fn required_params(self) -> &'static [(&'static str, ParamTag)] {
        match self {
            OperatorSymbol::Select => &[("pred", ParamTag::Predicate)],
            OperatorSymbol::Project => &[("attrs", ParamTag::AttrList)],
            OperatorSymbol::Join => &[("on", ParamTag::Predicate)],
            OperatorSymbol::Group => {
                &[("attrs", ParamTag::AttrList), ("agg", ParamTag::Predicate)]
            }
            OperatorSymbol::Traverse => &[("edge", ParamTag::Predicate)],
            OperatorSymbol::Match => &[("pattern", ParamTag::Predicate)],
            OperatorSymbol::Keyword => &[("terms", ParamTag::Predicate)],
            OperatorSymbol::Fulltext => &[("expr", ParamTag::Predicate)],
            OperatorSymbol::TopK => {
                &[("q", ParamTag::VectorRef), ("k", ParamTag::Integer)]
            }
            OperatorSymbol::SimJoin => &[("t", ParamTag::ThresholdBin)],
            OperatorSymbol::SpatialSelect => &[("pred", ParamTag::Predicate)],
            OperatorSymbol::SpatialJoin => &[("pred", ParamTag::Predicate)],
            OperatorSymbol::Reproject => {
                &[("from", ParamTag::CrsCode), ("to", ParamTag::CrsCode)]
            }
            OperatorSymbol::SpatialKnn => &[("k", ParamTag::Integer)],
            OperatorSymbol::ExtractEntities => &[("type", ParamTag::Predicate)],
            OperatorSymbol::ExtractRelations => &[("type", ParamTag::Predicate)],
            OperatorSymbol::Classify => &[("label", ParamTag::Predicate)],
            OperatorSymbol::Enrich => &[("task", ParamTag::Predicate)],
            OperatorSymbol::RelToNodes => &[("label", ParamTag::Predicate)],
            OperatorSymbol::GraphToRel => &[],
            OperatorSymbol::RelToDocs => &[],
            OperatorSymbol::DocsToRel => &[("map", ParamTag::Predicate)],
            OperatorSymbol::RelToGeom => &[],
            OperatorSymbol::GeomToRel => &[],
            OperatorSymbol::RelToTemporal => &[],
            OperatorSymbol::TemporalSelect => {
                &[("window", ParamTag::Predicate), ("gran", ParamTag::Predicate)]
            }
        }
    }
}

impl fmt::Display for OperatorSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for OperatorSymbol {
    type Err = PlanError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OperatorSymbol::from_token(s)
            .ok_or_else(|| PlanError::UnknownSymbol { symbol: s.to_string() })
    }
}

/// One typed operator occurrence: a symbol plus its parameter map.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OperatorInstance {
    pub symbol: OperatorSymbol,
    pub params: BTreeMap<String, ParamValue>,
}

impl OperatorInstance {
    pub fn new(symbol: OperatorSymbol) -> Self {
        OperatorInstance { symbol, params: BTreeMap::new() }
    }

    pub fn with_param(mut self, name: &str, tag: ParamTag, value: &str) -> Self {
        self.params.insert(name.to_string(), ParamValue::new(tag, value));
        self
    }

    pub fn param(&self, name: &str) -> Option<&ParamValue> {
        self.params.get(name)
    }

    /// Bound value of a parameter, if present and bound.
    pub fn bound_param(&self, name: &str) -> Option<&str> {
        self.params.get(name).filter(|p| p.is_bound()).map(|p| p.value.as_str())
    }

    /// Check that every symbol-required parameter name is present.
    pub fn validate_params(&self) -> Result<(), PlanError> {
        for (name, _) in self.symbol.required_params() {
            if !self.params.contains_key(*name) {
                return Err(PlanError::MissingParam {
                    symbol: self.symbol,
                    name: name.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Canonical `name=tag:value` rendering, sorted by name.
    pub fn canonical_params(&self) -> String {
        let mut out = String::new();
        for (name, value) in &self.params {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(name);
            out.push('=');
            out.push_str(&value.render());
        }
        out
    }

    pub fn params_digest(&self) -> u64 {
        let mut d = Digest::new();
        d.write_str(self.symbol.token());
        for (name, value) in &self.params {
            d.write_str(name);
            d.write_str(value.tag.token());
            d.write_str(&value.value);
        }
        d.finish()
    }
}

/// Dense node identifier within one plan.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A plan node: either a reference to a named base collection or an operator
/// with its ordered children (slot i = input i).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanNode {
    Leaf { collection: String },
    Op { op: OperatorInstance, children: Vec<NodeId> },
}

impl PlanNode {
    pub fn children(&self) -> &[NodeId] {
        match self {
            PlanNode::Leaf { .. } => &[],
            PlanNode::Op { children, .. } => children,
        }
    }

    pub fn op(&self) -> Option<&OperatorInstance> {
        match self {
            PlanNode::Leaf { .. } => None,
            PlanNode::Op { op, .. } => Some(op),
        }
    }
}

/// An immutable operator DAG with ordered child slots and one or more roots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    nodes: BTreeMap<NodeId, PlanNode>,
    roots: BTreeSet<NodeId>,
}

/// A single dataflow typing violation found by signature validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeViolation {
    pub parent: NodeId,
    pub slot: usize,
    pub child: NodeId,
    pub expected: DataKind,
    pub actual: DataKind,
}

impl fmt::Display for TypeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "node {} slot {} expects {}, child {} produces {}",
            self.parent, self.slot, self.expected, self.child, self.actual
        )
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("plan has no roots")]
    NoRoots,
    #[error("duplicate node id {id}")]
    DuplicateId { id: NodeId },
    #[error("unknown operator symbol `{symbol}`")]
    UnknownSymbol { symbol: String },
    #[error("reference to undefined node {id}")]
    UnknownNode { id: NodeId },
    #[error("cycle detected: back edge {from} -> {to}")]
    Cycle { from: NodeId, to: NodeId },
    #[error("node {node}: operator {symbol} expects {expected} inputs, has {actual}")]
    ArityMismatch { node: NodeId, symbol: OperatorSymbol, expected: usize, actual: usize },
    #[error("operator {symbol} requires parameter `{name}`")]
    MissingParam { symbol: OperatorSymbol, name: String },
    #[error("leaf {node} names `{collection}`, which is not a declared base collection")]
    UnknownCollection { node: NodeId, collection: String },
    #[error("{0}")]
    Json(String),
}

/// Map from base-collection name to the data kind its leaf produces.
/// Derivable from a loaded catalog.
pub type CollectionKinds = BTreeMap<String, DataKind>;

impl Plan {
    pub fn new() -> Self {
        Plan { nodes: BTreeMap::new(), roots: BTreeSet::new() }
    }

    pub fn add_leaf(&mut self, id: u32, collection: &str) -> NodeId {
        let id = NodeId(id);
        self.nodes.insert(id, PlanNode::Leaf { collection: collection.to_string() });
        id
    }

    pub fn add_op(&mut self, id: u32, op: OperatorInstance, children: &[NodeId]) -> NodeId {
        let id = NodeId(id);
        self.nodes.insert(id, PlanNode::Op { op, children: children.to_vec() });
        id
    }

    pub fn set_root(&mut self, id: NodeId) {
        self.roots.insert(id);
    }

    /// Redirect one input slot of an operator node (splicing support).
    pub(crate) fn set_child(&mut self, parent: NodeId, slot: usize, child: NodeId) {
        if let Some(PlanNode::Op { children, .. }) = self.nodes.get_mut(&parent) {
            if slot < children.len() {
                children[slot] = child;
            }
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&PlanNode> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &PlanNode)> {
        self.nodes.iter().map(|(id, n)| (*id, n))
    }

    pub fn roots(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.roots.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of operator (non-leaf) nodes.
    pub fn op_count(&self) -> usize {
        self.nodes.values().filter(|n| matches!(n, PlanNode::Op { .. })).count()
    }

    pub fn max_id(&self) -> u32 {
        self.nodes.keys().map(|n| n.0).max().unwrap_or(0)
    }

    /// Output kind of a node. Leaves resolve through the collection-kind map.
    pub fn output_kind(&self, id: NodeId, kinds: &CollectionKinds) -> Option<DataKind> {
        match self.nodes.get(&id)? {
            PlanNode::Leaf { collection } => kinds.get(collection).copied(),
            PlanNode::Op { op, .. } => Some(op.symbol.kind().output_kind),
        }
    }

    /// Children-first order, deterministic: among ready nodes the smallest id
    /// goes first. A cycle is reported by one of its back edges.
    pub fn topological_order(&self) -> Result<Vec<NodeId>, PlanError> {
        let mut indeg: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut rev: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for (id, node) in &self.nodes {
            indeg.entry(*id).or_insert(0);
            for child in node.children() {
                if !self.nodes.contains_key(child) {
                    return Err(PlanError::UnknownNode { id: *child });
                }
                *indeg.entry(*id).or_insert(0) += 1;
                rev.entry(*child).or_default().push(*id);
            }
        }
        // emit nodes whose children are all emitted; BTreeSet gives the id tie-break
        let mut ready: BTreeSet<NodeId> =
            indeg.iter().filter(|(_, d)| **d == 0).map(|(id, _)| *id).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(&id) = ready.iter().next() {
            ready.remove(&id);
            order.push(id);
            if let Some(parents) = rev.get(&id) {
                for p in parents {
                    let d = indeg.get_mut(p).unwrap();
                    *d -= 1;
                    if *d == 0 {
                        ready.insert(*p);
                    }
                }
            }
        }
        if order.len() != self.nodes.len() {
            // every unemitted node sits on or above a cycle; name one back edge
            let emitted: BTreeSet<_> = order.iter().copied().collect();
            for (id, node) in &self.nodes {
                if emitted.contains(id) {
                    continue;
                }
                for child in node.children() {
                    if !emitted.contains(child) {
                        return Err(PlanError::Cycle { from: *id, to: *child });
                    }
                }
            }
            unreachable!("unemitted node without unemitted child");
        }
        Ok(order)
    }

    /// Structural well-formedness: acyclic, arity satisfied, children defined,
    /// required parameters present.
    pub fn structural_check(&self) -> Result<(), PlanError> {
        if self.roots.is_empty() {
            return Err(PlanError::NoRoots);
        }
        for r in &self.roots {
            if !self.nodes.contains_key(r) {
                return Err(PlanError::UnknownNode { id: *r });
            }
        }
        for (id, node) in &self.nodes {
            if let PlanNode::Op { op, children } = node {
                op.validate_params()?;
                let expected = op.symbol.arity();
                if children.len() != expected {
                    return Err(PlanError::ArityMismatch {
                        node: *id,
                        symbol: op.symbol,
                        expected,
                        actual: children.len(),
                    });
                }
                for c in children {
                    if !self.nodes.contains_key(c) {
                        return Err(PlanError::UnknownNode { id: *c });
                    }
                }
            }
        }
        self.topological_order()?;
        Ok(())
    }

    /// Signature validation: structural malformation is an `Err`, kind
    /// mismatches come back as the (possibly empty) violation list.
    pub fn validate_signature(
        &self,
        kinds: &CollectionKinds,
    ) -> Result<Vec<TypeViolation>, PlanError> {
        self.structural_check()?;
        for (id, node) in &self.nodes {
            if let PlanNode::Leaf { collection } = node {
                if !kinds.contains_key(collection) {
                    return Err(PlanError::UnknownCollection {
                        node: *id,
                        collection: collection.clone(),
                    });
                }
            }
        }
        let mut violations = Vec::new();
        for (id, node) in &self.nodes {
            if let PlanNode::Op { op, children } = node {
                let sig = op.symbol.kind();
                for (slot, child) in children.iter().enumerate() {
                    let actual = self.output_kind(*child, kinds).expect("checked above");
                    let expected = sig.input_kinds[slot];
                    if actual != expected {
                        violations.push(TypeViolation {
                            parent: *id,
                            slot,
                            child: *child,
                            expected,
                            actual,
                        });
                    }
                }
            }
        }
        Ok(violations)
    }

    /// Merkle-style structural hash per node (ignores node ids).
    pub fn structural_hashes(&self) -> Result<BTreeMap<NodeId, u64>, PlanError> {
        let order = self.topological_order()?;
        let mut hashes: BTreeMap<NodeId, u64> = BTreeMap::new();
        for id in order {
            let node = &self.nodes[&id];
            let mut d = Digest::new();
            match node {
                PlanNode::Leaf { collection } => {
                    d.write_str("leaf");
                    d.write_str(collection);
                }
                PlanNode::Op { op, children } => {
                    d.write_str(op.symbol.token());
                    d.write_str(&op.canonical_params());
                    for c in children {
                        d.write_u64(*hashes.get(c).unwrap_or(&0));
                    }
                }
            }
            hashes.insert(id, d.finish());
        }
        Ok(hashes)
    }

    /// Hash of the whole plan (roots combined in canonical order).
    pub fn plan_hash(&self) -> Result<u64, PlanError> {
        let hashes = self.structural_hashes()?;
        let mut rh: Vec<u64> = self.roots.iter().map(|r| hashes[r]).collect();
        rh.sort_unstable();
        let mut d = Digest::new();
        for h in rh {
            d.write_u64(h);
        }
        Ok(d.finish())
    }

    /// Canonical renumbering: children-first DFS from the roots (roots ordered
    /// by structural hash), so structurally equal plans serialize to identical
    /// bytes regardless of their original ids.
    fn canonical_order(&self) -> Result<Vec<NodeId>, PlanError> {
        let hashes = self.structural_hashes()?;
        let mut entry: Vec<NodeId> = self.roots.iter().copied().collect();
        entry.sort_by_key(|id| (hashes[id], *id));
        // orphans (not reachable from any root) come last, hash-ordered
        let mut reachable = BTreeSet::new();
        let mut stack: Vec<NodeId> = entry.clone();
        while let Some(id) = stack.pop() {
            if reachable.insert(id) {
                stack.extend(self.nodes[&id].children().iter().copied());
            }
        }
        let mut orphans: Vec<NodeId> =
            self.nodes.keys().copied().filter(|id| !reachable.contains(id)).collect();
        orphans.sort_by_key(|id| (hashes[id], *id));
        entry.extend(orphans);

        let mut order = Vec::with_capacity(self.nodes.len());
        let mut done: BTreeSet<NodeId> = BTreeSet::new();
        for start in entry {
            // iterative post-order
            let mut stack: Vec<(NodeId, bool)> = vec![(start, false)];
            while let Some((id, expanded)) = stack.pop() {
                if done.contains(&id) {
                    continue;
                }
                if expanded {
                    done.insert(id);
                    order.push(id);
                } else {
                    stack.push((id, true));
                    for c in self.nodes[&id].children().iter().rev() {
                        if !done.contains(c) {
                            stack.push((*c, false));
                        }
                    }
                }
            }
        }
        Ok(order)
    }

    /// Renumber the plan into canonical form, returning the new plan and the
    /// old-id -> new-id map (so node references elsewhere can follow).
    pub fn canonicalize(&self) -> Result<(Plan, BTreeMap<NodeId, NodeId>), PlanError> {
        let order = self.canonical_order()?;
        let renumber: BTreeMap<NodeId, NodeId> = order
            .iter()
            .enumerate()
            .map(|(i, id)| (*id, NodeId(i as u32)))
            .collect();
        let mut plan = Plan::new();
        for id in &order {
            match &self.nodes[id] {
                PlanNode::Leaf { collection } => {
                    plan.add_leaf(renumber[id].0, collection);
                }
                PlanNode::Op { op, children } => {
                    let children: Vec<NodeId> = children.iter().map(|c| renumber[c]).collect();
                    plan.add_op(renumber[id].0, op.clone(), &children);
                }
            }
        }
        for r in &self.roots {
            plan.set_root(renumber[r]);
        }
        Ok((plan, renumber))
    }

    /// Canonical line-oriented serialization. Byte equality of two serialized
    /// plans implies structural equality.
    pub fn serialize(&self) -> Result<String, PlanError> {
        if self.roots.is_empty() {
            return Err(PlanError::NoRoots);
        }
        let order = self.canonical_order()?;
        let renumber: BTreeMap<NodeId, u32> =
            order.iter().enumerate().map(|(i, id)| (*id, i as u32)).collect();
        let mut out = String::new();
        for id in &order {
            let new_id = renumber[id];
            match &self.nodes[id] {
                PlanNode::Leaf { collection } => {
                    out.push_str(&format!("LEAF {} {}\n", new_id, collection));
                }
                PlanNode::Op { op, children } => {
                    out.push_str(&new_id.to_string());
                    out.push(' ');
                    out.push_str(op.symbol.token());
                    let params = op.canonical_params();
                    if !params.is_empty() {
                        out.push(' ');
                        out.push_str(&params);
                    }
                    out.push_str(" <-");
                    for c in children {
                        out.push(' ');
                        out.push_str(&renumber[c].to_string());
                    }
                    out.push('\n');
                }
            }
        }
        let mut root_ids: Vec<u32> = self.roots.iter().map(|r| renumber[r]).collect();
        root_ids.sort_unstable();
        for r in root_ids {
            out.push_str(&format!("ROOT {}\n", r));
        }
        Ok(out)
    }

    /// Parse either the line format or the JSON document form (sniffed by a
    /// leading `{`).
    pub fn parse(text: &str) -> Result<Plan, PlanError> {
        if text.trim_start().starts_with('{') {
            Self::parse_json(text)
        } else {
            Self::parse_text(text)
        }
    }

    pub fn parse_text(text: &str) -> Result<Plan, PlanError> {
        let mut plan = Plan::new();
        let mut declared: BTreeSet<NodeId> = BTreeSet::new();
        let mut pending_roots: Vec<(usize, NodeId)> = Vec::new();
        let err = |line: usize, msg: String| PlanError::Parse { line, msg };

        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let tokens: Vec<&str> = trimmed.split_whitespace().collect();
            match tokens[0] {
                "LEAF" => {
                    if tokens.len() != 3 {
                        return Err(err(line, "expected `LEAF <id> <collection>`".into()));
                    }
                    let id = parse_id(tokens[1], line)?;
                    if !declared.insert(id) {
                        return Err(PlanError::DuplicateId { id });
                    }
                    plan.add_leaf(id.0, tokens[2]);
                }
                "ROOT" => {
                    if tokens.len() != 2 {
                        return Err(err(line, "expected `ROOT <id>`".into()));
                    }
                    pending_roots.push((line, parse_id(tokens[1], line)?));
                }
                _ => {
                    if tokens.len() < 2 {
                        return Err(err(line, "expected `<id> <symbol> ...`".into()));
                    }
                    let id = parse_id(tokens[0], line)?;
                    if !declared.insert(id) {
                        return Err(PlanError::DuplicateId { id });
                    }
                    let symbol = OperatorSymbol::from_token(tokens[1]).ok_or_else(|| {
                        err(line, format!("unknown operator symbol `{}`", tokens[1]))
                    })?;
                    let mut op = OperatorInstance::new(symbol);
                    let mut idx = 2;
                    while idx < tokens.len() && tokens[idx] != "<-" {
                        let (name, rest) = tokens[idx].split_once('=').ok_or_else(|| {
                            err(line, format!("bad parameter `{}`", tokens[idx]))
                        })?;
                        let value = ParamValue::parse(rest).ok_or_else(|| {
                            err(line, format!("bad parameter value `{}`", rest))
                        })?;
                        op.params.insert(name.to_string(), value);
                        idx += 1;
                    }
                    if idx >= tokens.len() {
                        return Err(err(line, "missing `<-` child list".into()));
                    }
                    let mut children = Vec::new();
                    for t in &tokens[idx + 1..] {
                        children.push(parse_id(t, line)?);
                    }
                    plan.add_op(id.0, op, &children);
                }
            }
        }
        for (line, r) in pending_roots {
            if plan.nodes.contains_key(&r) {
                plan.set_root(r);
            } else {
                return Err(err(line, format!("ROOT references undefined node {}", r)));
            }
        }
        if plan.roots.is_empty() {
            return Err(PlanError::NoRoots);
        }
        for (id, node) in &plan.nodes {
            for c in node.children() {
                if !plan.nodes.contains_key(c) {
                    return Err(PlanError::Parse {
                        line: 0,
                        msg: format!("node {} references undefined node {}", id, c),
                    });
                }
            }
        }
        Ok(plan)
    }

    pub fn parse_json(text: &str) -> Result<Plan, PlanError> {
        let doc: PlanDoc =
            serde_json::from_str(text).map_err(|e| PlanError::Json(e.to_string()))?;
        doc.into_plan()
    }

    pub fn to_json(&self) -> Result<String, PlanError> {
        let order = self.canonical_order()?;
        let renumber: BTreeMap<NodeId, u32> =
            order.iter().enumerate().map(|(i, id)| (*id, i as u32)).collect();
        let mut nodes = Vec::new();
        for id in &order {
            let new_id = renumber[id];
            match &self.nodes[id] {
                PlanNode::Leaf { collection } => nodes.push(PlanNodeDoc {
                    id: new_id,
                    collection: Some(collection.clone()),
                    symbol: None,
                    params: None,
                    children: None,
                }),
                PlanNode::Op { op, children } => nodes.push(PlanNodeDoc {
                    id: new_id,
                    collection: None,
                    symbol: Some(op.symbol.token().to_string()),
                    params: Some(
                        op.params
                            .iter()
                            .map(|(k, v)| (k.clone(), v.render()))
                            .collect(),
                    ),
                    children: Some(children.iter().map(|c| renumber[c]).collect()),
                }),
            }
        }
        let mut roots: Vec<u32> = self.roots.iter().map(|r| renumber[r]).collect();
        roots.sort_unstable();
        serde_json::to_string_pretty(&PlanDoc { nodes, roots })
            .map_err(|e| PlanError::Json(e.to_string()))
    }
}

impl Default for Plan {
    fn default() -> Self {
        Self::new()
    }
}

fn parse_id(token: &str, line: usize) -> Result<NodeId, PlanError> {
    token
        .parse::<u32>()
        .map(NodeId)
        .map_err(|_| PlanError::Parse { line, msg: format!("bad node id `{}`", token) })
}

#[derive(Serialize, Deserialize)]
struct PlanDoc {
    nodes: Vec<PlanNodeDoc>,
    roots: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct PlanNodeDoc {
    id: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    collection: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    symbol: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    params: Option<BTreeMap<String, String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    children: Option<Vec<u32>>,
}

impl PlanDoc {
    fn into_plan(self) -> Result<Plan, PlanError> {
        let mut plan = Plan::new();
        let mut declared = BTreeSet::new();
        for node in self.nodes {
            let id = NodeId(node.id);
            if !declared.insert(id) {
                return Err(PlanError::DuplicateId { id });
            }
            match (node.collection, node.symbol) {
                (Some(collection), None) => {
                    plan.add_leaf(id.0, &collection);
                }
                (None, Some(symbol)) => {
                    let symbol = OperatorSymbol::from_str(&symbol)?;
                    let mut op = OperatorInstance::new(symbol);
                    for (name, v) in node.params.unwrap_or_default() {
                        let value = ParamValue::parse(&v).ok_or_else(|| {
                            PlanError::Json(format!("bad parameter value `{}`", v))
                        })?;
                        op.params.insert(name, value);
                    }
                    let children: Vec<NodeId> = node
                        .children
                        .unwrap_or_default()
                        .into_iter()
                        .map(NodeId)
                        .collect();
                    plan.add_op(id.0, op, &children);
                }
                _ => {
                    return Err(PlanError::Json(format!(
                        "node {} must have exactly one of `collection` or `symbol`",
                        id
                    )))
                }
            }
        }
        if self.roots.is_empty() {
            return Err(PlanError::NoRoots);
        }
        for r in self.roots {
            let r = NodeId(r);
            if !plan.nodes.contains_key(&r) {
                return Err(PlanError::UnknownNode { id: r });
            }
            plan.set_root(r);
        }
        for (id, node) in &plan.nodes {
            for c in node.children() {
                if !plan.nodes.contains_key(c) {
                    return Err(PlanError::Json(format!(
                        "node {} references undefined node {}",
                        id, c
                    )));
                }
            }
        }
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds() -> CollectionKinds {
        [
            ("Documents", DataKind::Docs),
            ("Projects", DataKind::Relation),
            ("Suppliers", DataKind::Nodes),
            ("SupplyEdges", DataKind::Edges),
        ]
        .into_iter()
        .map(|(n, k)| (n.to_string(), k))
        .collect()
    }

    fn doc_chain() -> Plan {
        // topk over Documents, cast to a relation, join with Projects, project
        let mut p = Plan::new();
        let docs = p.add_leaf(0, "Documents");
        let topk = p.add_op(
            1,
            OperatorInstance::new(OperatorSymbol::TopK)
                .with_param("q", ParamTag::VectorRef, "q_sust")
                .with_param("k", ParamTag::Integer, "10"),
            &[docs],
        );
        let cast = p.add_op(
            2,
            OperatorInstance::new(OperatorSymbol::DocsToRel).with_param(
                "map",
                ParamTag::Predicate,
                "docid->sid",
            ),
            &[topk],
        );
        let projects = p.add_leaf(3, "Projects");
        let join = p.add_op(
            4,
            OperatorInstance::new(OperatorSymbol::Join).with_param(
                "on",
                ParamTag::Predicate,
                "sid=sid",
            ),
            &[cast, projects],
        );
        let proj = p.add_op(
            5,
            OperatorInstance::new(OperatorSymbol::Project).with_param(
                "attrs",
                ParamTag::AttrList,
                "projid,name",
            ),
            &[join],
        );
        p.set_root(proj);
        p
    }

    #[test]
    fn every_signature_is_consistent() {
        for sym in OperatorSymbol::ALL {
            let kind = sym.kind();
            assert_eq!(kind.arity(), kind.input_kinds.len());
            assert!(kind.arity() >= 1 && kind.arity() <= 2, "{sym} arity");
            assert_eq!(OperatorSymbol::from_token(sym.token()), Some(sym));
        }
        // spot-check a few rows
        assert_eq!(
            OperatorSymbol::SimJoin.kind().input_kinds,
            &[DataKind::Docs, DataKind::Docs]
        );
        assert_eq!(OperatorSymbol::SimJoin.kind().output_kind, DataKind::Relation);
        assert_eq!(
            OperatorSymbol::GraphToRel.kind().input_kinds,
            &[DataKind::Nodes, DataKind::Edges]
        );
    }

    #[test]
    fn valid_chain_has_no_violations() {
        let p = doc_chain();
        assert_eq!(p.validate_signature(&kinds()).unwrap(), vec![]);
    }

    #[test]
    fn project_over_docs_reports_kind_mismatch() {
        let mut p = Plan::new();
        let docs = p.add_leaf(0, "Documents");
        let proj = p.add_op(
            1,
            OperatorInstance::new(OperatorSymbol::Project).with_param(
                "attrs",
                ParamTag::AttrList,
                "name",
            ),
            &[docs],
        );
        p.set_root(proj);
        let violations = p.validate_signature(&kinds()).unwrap();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].expected, DataKind::Relation);
        assert_eq!(violations[0].actual, DataKind::Docs);
    }

    #[test]
    fn unary_join_is_a_structural_error() {
        let mut p = Plan::new();
        let projects = p.add_leaf(0, "Projects");
        let join = p.add_op(
            1,
            OperatorInstance::new(OperatorSymbol::Join).with_param(
                "on",
                ParamTag::Predicate,
                "x=y",
            ),
            &[projects],
        );
        p.set_root(join);
        let err = p.validate_signature(&kinds()).unwrap_err();
        assert!(matches!(err, PlanError::ArityMismatch { expected: 2, actual: 1, .. }));
    }

    #[test]
    fn topo_single_node() {
        let mut p = Plan::new();
        let docs = p.add_leaf(0, "Documents");
        p.set_root(docs);
        assert_eq!(p.topological_order().unwrap(), vec![docs]);
    }

    #[test]
    fn topo_children_precede_parents() {
        let p = doc_chain();
        let order = p.topological_order().unwrap();
        let pos: BTreeMap<NodeId, usize> =
            order.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        for (id, node) in p.nodes() {
            for c in node.children() {
                assert!(pos[c] < pos[&id], "{c} should precede {id}");
            }
        }
        assert!(pos[&NodeId(1)] < pos[&NodeId(2)]); // topk before the cast
    }

    #[test]
    fn topo_diamond_emits_shared_node_once() {
        let mut p = Plan::new();
        let projects = p.add_leaf(0, "Projects");
        let shared = p.add_op(
            1,
            OperatorInstance::new(OperatorSymbol::Select).with_param(
                "pred",
                ParamTag::Predicate,
                "a",
            ),
            &[projects],
        );
        let l = p.add_op(
            2,
            OperatorInstance::new(OperatorSymbol::Select).with_param(
                "pred",
                ParamTag::Predicate,
                "b",
            ),
            &[shared],
        );
        let r = p.add_op(
            3,
            OperatorInstance::new(OperatorSymbol::Select).with_param(
                "pred",
                ParamTag::Predicate,
                "c",
            ),
            &[shared],
        );
        let join = p.add_op(
            4,
            OperatorInstance::new(OperatorSymbol::Join).with_param(
                "on",
                ParamTag::Predicate,
                "k",
            ),
            &[l, r],
        );
        p.set_root(join);
        let order = p.topological_order().unwrap();
        assert_eq!(order.iter().filter(|id| **id == shared).count(), 1);
        let pos: BTreeMap<NodeId, usize> =
            order.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        assert!(pos[&shared] < pos[&l] && pos[&shared] < pos[&r]);
    }

    #[test]
    fn cycle_reports_back_edge() {
        let mut p = Plan::new();
        let a = p.add_op(
            0,
            OperatorInstance::new(OperatorSymbol::Select).with_param(
                "pred",
                ParamTag::Predicate,
                "a",
            ),
            &[NodeId(1)],
        );
        p.add_op(
            1,
            OperatorInstance::new(OperatorSymbol::Select).with_param(
                "pred",
                ParamTag::Predicate,
                "b",
            ),
            &[a],
        );
        p.set_root(a);
        assert!(matches!(p.topological_order(), Err(PlanError::Cycle { .. })));
    }

    #[test]
    fn empty_text_is_no_roots() {
        assert_eq!(Plan::parse_text("").unwrap_err(), PlanError::NoRoots);
    }

    #[test]
    fn parse_error_carries_line() {
        let text = "LEAF 0 Documents\n1 warp <- 0\nROOT 1\n";
        match Plan::parse_text(text).unwrap_err() {
            PlanError::Parse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("warp"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let p = doc_chain();
        let text = p.serialize().unwrap();
        let q = Plan::parse(&text).unwrap();
        assert_eq!(q.serialize().unwrap(), text);
        assert_eq!(q.op_count(), p.op_count());
        assert_eq!(q.len(), p.len());
    }

    #[test]
    fn canonical_bytes_ignore_original_ids() {
        let p = doc_chain();
        // same structure, shifted ids
        let mut q = Plan::new();
        let docs = q.add_leaf(100, "Documents");
        let topk = q.add_op(
            57,
            OperatorInstance::new(OperatorSymbol::TopK)
                .with_param("q", ParamTag::VectorRef, "q_sust")
                .with_param("k", ParamTag::Integer, "10"),
            &[docs],
        );
        let cast = q.add_op(
            9,
            OperatorInstance::new(OperatorSymbol::DocsToRel).with_param(
                "map",
                ParamTag::Predicate,
                "docid->sid",
            ),
            &[topk],
        );
        let projects = q.add_leaf(3, "Projects");
        let join = q.add_op(
            77,
            OperatorInstance::new(OperatorSymbol::Join).with_param(
                "on",
                ParamTag::Predicate,
                "sid=sid",
            ),
            &[cast, projects],
        );
        let proj = q.add_op(
            41,
            OperatorInstance::new(OperatorSymbol::Project).with_param(
                "attrs",
                ParamTag::AttrList,
                "projid,name",
            ),
            &[join],
        );
        q.set_root(proj);
        assert_eq!(p.serialize().unwrap(), q.serialize().unwrap());
    }

    #[test]
    fn json_round_trip() {
        let p = doc_chain();
        let json = p.to_json().unwrap();
        let q = Plan::parse(&json).unwrap();
        assert_eq!(q.serialize().unwrap(), p.serialize().unwrap());
    }

    #[test]
    fn missing_required_param_is_rejected() {
        let mut p = Plan::new();
        let docs = p.add_leaf(0, "Documents");
        let topk = p.add_op(1, OperatorInstance::new(OperatorSymbol::TopK), &[docs]);
        p.set_root(topk);
        assert!(matches!(
            p.structural_check(),
            Err(PlanError::MissingParam { symbol: OperatorSymbol::TopK, .. })
        ));
    }
}
