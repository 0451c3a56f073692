//! The packed plan forest: an annotation-sensitive, hash-consed AND-OR DAG
//! over candidate plans.
//!
//! Node identity is `(operator symbol, canonical parameter digest,
//! annotation-class digest)` and deliberately excludes children: alternative
//! child tuples become OR derivations of one shared node, which is what packs
//! a candidate family below its total instance count. Two occurrences merge
//! only when their annotation vectors agree on every facet except placement
//! and their placement sets intersect; the class keeps each member vector and
//! the intersection becomes the class placement.
//!
//! Keys carry a sequence disambiguator: a derivation that would close a cycle
//! (an operator stacked over an occurrence of itself) is refused and lands on
//! a fresh node instead, so the forest stays acyclic by construction. Node
//! levels strictly decrease along derivation edges, which makes the cycle
//! check cheap in the common case.
//!
//! Construction processes candidates leaf-to-root. A failing local check
//! abandons only the root-ward remainder of the current candidate: sibling
//! branches and nodes already inserted by other candidates survive. Unique
//! node counts before pruning come from a shadow pass with the checks
//! disabled.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::{NodeId, OperatorInstance, OperatorSymbol, Plan, PlanError, PlanNode};
use crate::catalog::{annotate_leaf, annotate_op, AnnotationVector, Catalog};
use crate::digest::{digest_str, Digest};
use crate::feasibility::{
    check_local_partial, minimal_certificate, violation_witness, CertificateRecord,
    CheckOutcome, Witness,
};

/// One packed node: a leaf or an annotated operator with OR derivations.
#[derive(Debug, Clone, PartialEq)]
pub struct PPFNode {
    pub symbol: Option<OperatorSymbol>,
    pub op: Option<OperatorInstance>,
    pub collection: Option<String>,
    /// Distinct member annotation vectors of the equivalence class.
    pub class: Vec<AnnotationVector>,
    /// Intersection of the members' placement sets.
    pub placement: BTreeSet<String>,
    /// Alternative ordered child tuples.
    pub derivations: Vec<Vec<usize>>,
    /// Strictly greater than every derivation child's level.
    pub level: u32,
    pub(crate) facet_digest: u64,
    pub(crate) params_digest: u64,
    pub(crate) seq: u32,
}

impl PPFNode {
    pub fn is_leaf(&self) -> bool {
        self.symbol.is_none()
    }

    fn sort_token(&self) -> (u8, String, String, u64, u32) {
        match (&self.symbol, &self.collection) {
            (Some(sym), _) => (
                1,
                sym.token().to_string(),
                self.op.as_ref().map(|o| o.canonical_params()).unwrap_or_default(),
                self.facet_digest,
                self.seq,
            ),
            (None, Some(coll)) => (0, coll.clone(), String::new(), self.facet_digest, self.seq),
            (None, None) => (0, String::new(), String::new(), self.facet_digest, self.seq),
        }
    }
}

/// Size accounting for one build, in the shape of the evaluation tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SizeStats {
    pub num_plans: u64,
    pub nodes_per_plan: f64,
    pub unique_all: u64,
    pub unique_feasible: u64,
    pub packed_ratio_pre: f64,
    pub packed_ratio_post: f64,
    pub pruned_unique: u64,
    pub build_ms: f64,
    pub peak_mem_kb: u64,
    pub total_edges: u64,
    /// Bound parameters: predicates, per-predicate candidate operators,
    /// maximum arity, annotation vocabulary size.
    pub n: u64,
    pub k: u64,
    pub d: u64,
    pub vocab: u64,
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl SizeStats {
    /// Fill the derived columns from raw counts:
    /// `PrU = UniqA - UniqF`, `PkA = UniqA/(m*N)`, `PkF = UniqF/(m*N)`.
    pub fn from_counts(
        num_plans: u64,
        nodes_per_plan: f64,
        unique_all: u64,
        unique_feasible: u64,
    ) -> SizeStats {
        let total = num_plans as f64 * nodes_per_plan;
        SizeStats {
            num_plans,
            nodes_per_plan,
            unique_all,
            unique_feasible,
            packed_ratio_pre: if total > 0.0 { unique_all as f64 / total } else { 0.0 },
            packed_ratio_post: if total > 0.0 {
                unique_feasible as f64 / total
            } else {
                0.0
            },
            pruned_unique: unique_all.saturating_sub(unique_feasible),
            ..SizeStats::default()
        }
    }

    /// The polynomial size bounds with the recorded parameters.
    pub fn check_bounds(&self) -> Result<(), String> {
        let node_bound = self.n.saturating_mul(self.k).saturating_mul(self.vocab);
        if self.unique_feasible > node_bound {
            return Err(format!(
                "node bound violated: {} > n*k*|A| = {}",
                self.unique_feasible, node_bound
            ));
        }
        let edge_bound = self
            .n
            .saturating_mul(self.k)
            .saturating_mul(self.d)
            .saturating_mul(self.vocab)
            .saturating_mul(self.vocab);
        if self.total_edges > edge_bound {
            return Err(format!(
                "edge bound violated: {} > n*k*d*|A|^2 = {}",
                self.total_edges, edge_bound
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Error)]
pub enum ForestError {
    #[error("forest parse error: {0}")]
    Parse(String),
    #[error("forest is corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

/// A finished, immutable packed plan forest. Self-contained: carries the
/// catalog it was annotated against, the per-candidate pruning witnesses, and
/// the minimal certificates, so labeling needs only this value.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedPlanForest {
    pub nodes: Vec<PPFNode>,
    pub roots: BTreeSet<usize>,
    /// (candidate index, witness) for every pruned branch.
    pub pruned: Vec<(u64, Witness)>,
    pub certificates: Vec<CertificateRecord>,
    pub catalog: Catalog,
    pub stats: SizeStats,
}

impl PackedPlanForest {
    /// Operator (non-leaf) node count: the `Uniq` columns.
    pub fn op_node_count(&self) -> u64 {
        self.nodes.iter().filter(|n| !n.is_leaf()).count() as u64
    }

    /// Total derivation edges.
    pub fn edge_count(&self) -> u64 {
        self.nodes
            .iter()
            .flat_map(|n| n.derivations.iter())
            .map(|t| t.len() as u64)
            .sum()
    }

    /// Children-first order over derivation edges (levels strictly decrease
    /// along edges, so sorting by level is a valid order).
    pub fn topo_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.nodes.len()).collect();
        order.sort_by_key(|&i| (self.nodes[i].level, i));
        order
    }

    /// Enumerate plans encoded by the forest: one derivation choice per
    /// node, all combinations, deterministic order. Desk-scale only; `limit`
    /// guards the output. Returns the plans and a truncation flag.
    pub fn unpack(&self, limit: Option<u64>) -> (Vec<Plan>, bool) {
        self.unpack_filtered(limit, &|_, _| true)
    }

    /// Unpack with a per-(node, derivation) admission predicate.
    pub fn unpack_filtered(
        &self,
        limit: Option<u64>,
        admit: &dyn Fn(usize, usize) -> bool,
    ) -> (Vec<Plan>, bool) {
        let mut out = Vec::new();
        let mut truncated = false;
        let mut roots: Vec<usize> = self.roots.iter().copied().collect();
        roots.sort();
        'roots: for root in roots {
            let mut assignment: BTreeMap<usize, usize> = BTreeMap::new();
            if !self.enumerate(root, vec![root], &mut assignment, limit, admit, &mut out) {
                truncated = true;
                break 'roots;
            }
        }
        (out, truncated)
    }

    /// Depth-first enumeration of derivation assignments; returns false when
    /// the limit cut the enumeration short.
    fn enumerate(
        &self,
        root: usize,
        pending: Vec<usize>,
        assignment: &mut BTreeMap<usize, usize>,
        limit: Option<u64>,
        admit: &dyn Fn(usize, usize) -> bool,
        out: &mut Vec<Plan>,
    ) -> bool {
        if let Some(l) = limit {
            if out.len() as u64 >= l {
                return false;
            }
        }
        // next unassigned non-leaf node
        let next = pending.iter().copied().find(|&n| {
            !self.nodes[n].is_leaf() && !assignment.contains_key(&n)
        });
        let n = match next {
            None => {
                out.push(self.materialize(root, assignment));
                return true;
            }
            Some(n) => n,
        };
        for (d, tuple) in self.nodes[n].derivations.iter().enumerate() {
            if !admit(n, d) {
                continue;
            }
            assignment.insert(n, d);
            let mut next_pending = pending.clone();
            next_pending.extend(tuple.iter().copied());
            let ok = self.enumerate(root, next_pending, assignment, limit, admit, out);
            assignment.remove(&n);
            if !ok {
                return false;
            }
        }
        true
    }

    /// Build a plan from one complete derivation assignment.
    pub(crate) fn materialize(&self, root: usize, assignment: &BTreeMap<usize, usize>) -> Plan {
        let mut plan = Plan::new();
        let mut ids: BTreeMap<usize, NodeId> = BTreeMap::new();
        let mut next = 0u32;
        let mut stack = vec![(root, false)];
        while let Some((n, expanded)) = stack.pop() {
            if ids.contains_key(&n) {
                continue;
            }
            let node = &self.nodes[n];
            if node.is_leaf() {
                let id = plan.add_leaf(next, node.collection.as_deref().unwrap_or(""));
                ids.insert(n, id);
                next += 1;
                continue;
            }
            let tuple = &node.derivations[assignment[&n]];
            if expanded {
                let children: Vec<NodeId> = tuple.iter().map(|c| ids[c]).collect();
                let id = plan.add_op(next, node.op.clone().expect("op node"), &children);
                ids.insert(n, id);
                next += 1;
            } else {
                stack.push((n, true));
                for c in tuple.iter().rev() {
                    if !ids.contains_key(c) {
                        stack.push((*c, false));
                    }
                }
            }
        }
        plan.set_root(ids[&root]);
        plan
    }

    pub fn to_json(&self) -> String {
        let doc = ForestDoc {
            nodes: self
                .nodes
                .iter()
                .map(|n| ForestNodeDoc {
                    symbol: n.symbol.map(|s| s.token().to_string()),
                    params: n.op.as_ref().map(|o| {
                        o.params
                            .iter()
                            .map(|(k, v)| (k.clone(), v.render()))
                            .collect::<BTreeMap<String, String>>()
                    }),
                    collection: n.collection.clone(),
                    class: n.class.clone(),
                    placement: n.placement.iter().cloned().collect(),
                    derivations: n.derivations.clone(),
                    seq: n.seq,
                })
                .collect(),
            roots: self.roots.iter().copied().collect(),
            pruned: self
                .pruned
                .iter()
                .map(|(plan, w)| PrunedDoc { plan: *plan, witness: w.clone() })
                .collect(),
            certificates: self.certificates.clone(),
            stats: self.stats.clone(),
            catalog: self.catalog.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("forest serializes")
    }

    pub fn from_json(text: &str) -> Result<PackedPlanForest, ForestError> {
        let doc: ForestDoc =
            serde_json::from_str(text).map_err(|e| ForestError::Parse(e.to_string()))?;
        let mut nodes = Vec::with_capacity(doc.nodes.len());
        for nd in doc.nodes {
            let op = match (&nd.symbol, &nd.params) {
                (Some(sym), params) => {
                    let symbol = OperatorSymbol::from_token(sym).ok_or_else(|| {
                        ForestError::Parse(format!("unknown operator symbol `{sym}`"))
                    })?;
                    let mut op = OperatorInstance::new(symbol);
                    for (name, v) in params.iter().flatten() {
                        let value = crate::algebra::ParamValue::parse(v).ok_or_else(|| {
                            ForestError::Parse(format!("bad parameter value `{v}`"))
                        })?;
                        op.params.insert(name.clone(), value);
                    }
                    Some(op)
                }
                (None, _) => None,
            };
            let facet_digest =
                nd.class.first().map(|a| a.facet_digest()).unwrap_or_default();
            let params_digest = op
                .as_ref()
                .map(|o| o.params_digest())
                .unwrap_or_else(|| digest_str(nd.collection.as_deref().unwrap_or("")));
            nodes.push(PPFNode {
                symbol: op.as_ref().map(|o| o.symbol),
                op,
                collection: nd.collection,
                class: nd.class,
                placement: nd.placement.into_iter().collect(),
                derivations: nd.derivations,
                level: 0,
                facet_digest,
                params_digest,
                seq: nd.seq,
            });
        }
        let mut forest = PackedPlanForest {
            nodes,
            roots: doc.roots.into_iter().collect(),
            pruned: doc.pruned.into_iter().map(|p| (p.plan, p.witness)).collect(),
            certificates: doc.certificates,
            stats: doc.stats,
            catalog: doc.catalog,
        };
        for node in &forest.nodes {
            for tuple in &node.derivations {
                for c in tuple {
                    if *c >= forest.nodes.len() {
                        return Err(ForestError::Corrupt(format!(
                            "derivation references node {c} out of range"
                        )));
                    }
                }
            }
        }
        for r in &forest.roots {
            if *r >= forest.nodes.len() {
                return Err(ForestError::Corrupt(format!("root {r} out of range")));
            }
        }
        forest.recompute_levels().map_err(ForestError::Corrupt)?;
        Ok(forest)
    }

    /// Recompute levels bottom-up; fails on a cyclic derivation graph.
    fn recompute_levels(&mut self) -> Result<(), String> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut parents: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            let children: BTreeSet<usize> =
                node.derivations.iter().flatten().copied().collect();
            indeg[i] = children.len();
            for c in children {
                parents[c].push(i);
            }
        }
        let mut queue: Vec<usize> =
            (0..n).filter(|i| indeg[*i] == 0).collect();
        let mut levels = vec![0u32; n];
        let mut emitted = 0usize;
        while let Some(i) = queue.pop() {
            emitted += 1;
            for &p in &parents[i] {
                let deps: BTreeSet<usize> =
                    self.nodes[p].derivations.iter().flatten().copied().collect();
                let lvl = 1 + deps.iter().map(|c| levels[*c]).max().unwrap_or(0);
                levels[p] = levels[p].max(lvl);
                indeg[p] -= 1;
                if indeg[p] == 0 {
                    queue.push(p);
                }
            }
        }
        if emitted != n {
            return Err("derivation graph contains a cycle".to_string());
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            node.level = levels[i];
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ForestDoc {
    nodes: Vec<ForestNodeDoc>,
    roots: Vec<usize>,
    #[serde(default)]
    pruned: Vec<PrunedDoc>,
    #[serde(default)]
    certificates: Vec<CertificateRecord>,
    stats: SizeStats,
    catalog: Catalog,
}

#[derive(Serialize, Deserialize)]
struct ForestNodeDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    symbol: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    params: Option<BTreeMap<String, String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    collection: Option<String>,
    class: Vec<AnnotationVector>,
    placement: Vec<String>,
    derivations: Vec<Vec<usize>>,
    #[serde(default)]
    seq: u32,
}

#[derive(Serialize, Deserialize)]
struct PrunedDoc {
    plan: u64,
    witness: Witness,
}

/// Options for one build.
#[derive(Debug, Clone)]
pub struct BuildOptions {
    /// Run the local feasibility checks and prune (the real pass). The
    /// shadow pass for pre-prune uniqueness runs with this off.
    pub checked: bool,
    /// Stop after this many candidates.
    pub limit: Option<u64>,
    /// Insert declared CRS reprojections into each candidate before checking.
    pub repair_crs: bool,
    /// Bound parameters of the generating spec (predicates, candidate
    /// operators per predicate). Measured values are substituted when absent.
    pub bound_n: Option<u64>,
    pub bound_k: Option<u64>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { checked: true, limit: None, repair_crs: false, bound_n: None, bound_k: None }
    }
}

/// Everything a build produces.
#[derive(Debug, Clone)]
pub struct BuildOutput {
    pub forest: PackedPlanForest,
    pub certificates: Vec<CertificateRecord>,
    pub stats: SizeStats,
    /// Candidates whose root survived.
    pub surviving_candidates: u64,
}

struct ForestBuilder {
    nodes: Vec<PPFNode>,
    index: HashMap<(Option<OperatorSymbol>, u64, u64), Vec<usize>>,
    parents: Vec<BTreeSet<usize>>,
    roots: BTreeSet<usize>,
}

impl ForestBuilder {
    fn new() -> Self {
        ForestBuilder {
            nodes: Vec::new(),
            index: HashMap::new(),
            parents: Vec::new(),
            roots: BTreeSet::new(),
        }
    }

    fn placement_compatible(a: &BTreeSet<String>, b: &BTreeSet<String>) -> bool {
        (a.is_empty() && b.is_empty()) || a.intersection(b).next().is_some()
    }

    /// Can `node` gain the tuple without closing a cycle? Fast path: every
    /// edge must descend in level. Slow path: reachability through
    /// derivations.
    fn safe_to_add(&self, node: usize, tuple: &[usize]) -> bool {
        let child_level = tuple.iter().map(|c| self.nodes[*c].level).max().unwrap_or(0);
        if tuple.is_empty() || child_level < self.nodes[node].level {
            return true;
        }
        // would any tuple member reach `node` through existing derivations?
        let mut stack: Vec<usize> = tuple.to_vec();
        let mut seen: BTreeSet<usize> = BTreeSet::new();
        while let Some(c) = stack.pop() {
            if c == node {
                return false;
            }
            if seen.insert(c) {
                for t in &self.nodes[c].derivations {
                    stack.extend(t.iter().copied());
                }
            }
        }
        true
    }

    fn raise_level(&mut self, node: usize, level: u32) {
        if self.nodes[node].level >= level {
            return;
        }
        self.nodes[node].level = level;
        let parents: Vec<usize> = self.parents[node].iter().copied().collect();
        for p in parents {
            self.raise_level(p, level + 1);
        }
    }

    fn add_derivation(&mut self, node: usize, tuple: Vec<usize>) {
        if tuple.is_empty() || self.nodes[node].derivations.contains(&tuple) {
            return;
        }
        let level = 1 + tuple.iter().map(|c| self.nodes[*c].level).max().unwrap_or(0);
        for &c in &tuple {
            self.parents[c].insert(node);
        }
        self.nodes[node].derivations.push(tuple);
        self.raise_level(node, level);
    }

    fn lookup_or_create(
        &mut self,
        op: Option<&OperatorInstance>,
        collection: Option<&str>,
        ann: &AnnotationVector,
        tuple: Vec<usize>,
    ) -> usize {
        let symbol = op.map(|o| o.symbol);
        let params_digest = match (op, collection) {
            (Some(o), _) => o.params_digest(),
            (None, Some(c)) => digest_str(c),
            (None, None) => 0,
        };
        let facet_digest = ann.facet_digest();
        let bucket_key = (symbol, params_digest, facet_digest);
        let bucket: Vec<usize> = self.index.get(&bucket_key).cloned().unwrap_or_default();
        for idx in bucket {
            let node = &self.nodes[idx];
            let class_rep = node.class.first();
            let facets_match = class_rep.map(|r| r.non_placement_eq(ann)).unwrap_or(false);
            if !facets_match {
                continue; // digest collision
            }
            if !Self::placement_compatible(&node.placement, &ann.placement) {
                continue;
            }
            if !tuple.is_empty()
                && !self.nodes[idx].derivations.contains(&tuple)
                && !self.safe_to_add(idx, &tuple)
            {
                continue; // would close a cycle; fall through to a fresh node
            }
            // merge
            let placement: BTreeSet<String> = if self.nodes[idx].placement.is_empty() {
                BTreeSet::new()
            } else {
                self.nodes[idx]
                    .placement
                    .intersection(&ann.placement)
                    .cloned()
                    .collect()
            };
            self.nodes[idx].placement = placement;
            if !self.nodes[idx].class.contains(ann) {
                self.nodes[idx].class.push(ann.clone());
            }
            self.add_derivation(idx, tuple);
            return idx;
        }
        let seq = self
            .index
            .get(&bucket_key)
            .map(|b| b.len() as u32)
            .unwrap_or(0);
        let level = if tuple.is_empty() {
            0
        } else {
            1 + tuple.iter().map(|c| self.nodes[*c].level).max().unwrap_or(0)
        };
        let idx = self.nodes.len();
        self.nodes.push(PPFNode {
            symbol,
            op: op.cloned(),
            collection: collection.map(str::to_string),
            class: vec![ann.clone()],
            placement: ann.placement.clone(),
            derivations: Vec::new(),
            level,
            facet_digest,
            params_digest,
            seq,
        });
        self.parents.push(BTreeSet::new());
        if !tuple.is_empty() {
            for &c in &tuple {
                self.parents[c].insert(idx);
            }
            self.nodes[idx].derivations.push(tuple);
        }
        self.index.entry(bucket_key).or_default().push(idx);
        idx
    }

    /// Canonical renumbering: nodes ordered by kind/params/class, derivations
    /// sorted, so that two builds of the same input serialize identically.
    fn finalize(self, catalog: Catalog) -> PackedPlanForest {
        let mut order: Vec<usize> = (0..self.nodes.len()).collect();
        order.sort_by_key(|&i| self.nodes[i].sort_token());
        let renumber: BTreeMap<usize, usize> =
            order.iter().enumerate().map(|(new, old)| (*old, new)).collect();
        let mut nodes: Vec<PPFNode> = order.into_iter().map(|i| self.nodes[i].clone()).collect();
        for node in &mut nodes {
            for tuple in &mut node.derivations {
                for c in tuple.iter_mut() {
                    *c = renumber[c];
                }
            }
            node.derivations.sort();
            node.derivations.dedup();
        }
        let roots = self.roots.iter().map(|r| renumber[r]).collect();
        let mut forest = PackedPlanForest {
            nodes,
            roots,
            pruned: Vec::new(),
            certificates: Vec::new(),
            catalog,
            stats: SizeStats::default(),
        };
        forest.recompute_levels().expect("builder keeps the forest acyclic");
        forest
    }
}

struct PassResult {
    forest: PackedPlanForest,
    pruned: Vec<(u64, Witness)>,
    survivors: u64,
    total_ops: u64,
    plans_seen: u64,
    distinct_instances: u64,
}

fn run_pass(candidates: &[Plan], catalog: &Catalog, checked: bool) -> PassResult {
    let mut builder = ForestBuilder::new();
    let mut pruned: Vec<(u64, Witness)> = Vec::new();
    let mut survivors = 0u64;
    let mut total_ops = 0u64;
    let mut instance_keys: BTreeSet<(String, u64)> = BTreeSet::new();
    let kinds = catalog.leaf_kinds();

    for (pi, plan) in candidates.iter().enumerate() {
        let pi = pi as u64;
        total_ops += plan.op_count() as u64;
        let mut dead: BTreeSet<NodeId> = BTreeSet::new();
        match plan.validate_signature(&kinds) {
            Ok(violations) => {
                if checked {
                    for v in &violations {
                        pruned.push((pi, violation_witness(v)));
                        dead.insert(v.parent);
                    }
                }
            }
            Err(e) => {
                if checked {
                    let at = plan.roots().next().unwrap_or(NodeId(0));
                    pruned.push((
                        pi,
                        Witness {
                            family: crate::feasibility::ConstraintFamily::Type,
                            evidence: vec![crate::feasibility::Evidence {
                                facet: "structure".to_string(),
                                expected: "well-formed".to_string(),
                                actual: e.to_string(),
                            }],
                            at_operator: at,
                        },
                    ));
                    continue;
                } else {
                    continue;
                }
            }
        }
        let order = match plan.topological_order() {
            Ok(o) => o,
            Err(_) => continue,
        };
        let mut anns: BTreeMap<NodeId, AnnotationVector> = BTreeMap::new();
        let mut mapped: BTreeMap<NodeId, usize> = BTreeMap::new();
        for id in order {
            match plan.node(id).unwrap() {
                PlanNode::Leaf { collection } => {
                    let ann = annotate_leaf(collection, catalog);
                    let idx = builder.lookup_or_create(
                        None,
                        Some(collection.as_str()),
                        &ann,
                        Vec::new(),
                    );
                    anns.insert(id, ann);
                    mapped.insert(id, idx);
                }
                PlanNode::Op { op, children } => {
                    if dead.contains(&id) || children.iter().any(|c| dead.contains(c)) {
                        dead.insert(id);
                        continue;
                    }
                    let child_anns: Vec<Option<&AnnotationVector>> =
                        children.iter().map(|c| anns.get(c)).collect();
                    let ann = annotate_op(op, &child_anns, catalog);
                    instance_keys.insert((
                        op.symbol.token().to_string(),
                        op.params_digest(),
                    ));
                    if checked {
                        match check_local_partial(catalog, id, op, &ann, &child_anns) {
                            CheckOutcome::Fail(w) => {
                                pruned.push((pi, w));
                                dead.insert(id);
                                anns.insert(id, ann);
                                continue;
                            }
                            CheckOutcome::Unknown => {
                                unreachable!("full annotations are decidable")
                            }
                            CheckOutcome::Pass => {}
                        }
                    }
                    let tuple: Vec<usize> = children.iter().map(|c| mapped[c]).collect();
                    let idx = builder.lookup_or_create(Some(op), None, &ann, tuple);
                    anns.insert(id, ann);
                    mapped.insert(id, idx);
                }
            }
        }
        let all_roots_alive = plan.roots().all(|r| mapped.contains_key(&r));
        if all_roots_alive {
            survivors += 1;
            for r in plan.roots() {
                builder.roots.insert(mapped[&r]);
            }
        }
    }
    let distinct_instances = instance_keys.len() as u64;
    let forest = builder.finalize(catalog.clone());
    PassResult {
        forest,
        pruned,
        survivors,
        total_ops,
        plans_seen: candidates.len() as u64,
        distinct_instances,
    }
}

/// Build a packed plan forest from a candidate stream. The real pass prunes
/// on local feasibility and records one minimal certificate per distinct
/// witness; a shadow pass with the checks disabled measures pre-prune
/// uniqueness.
pub fn build(
    candidates: impl IntoIterator<Item = Plan>,
    catalog: &Catalog,
    options: &BuildOptions,
) -> Result<BuildOutput, PlanError> {
    let mut collected: Vec<Plan> = Vec::new();
    for plan in candidates {
        if let Some(l) = options.limit {
            if collected.len() as u64 >= l {
                break;
            }
        }
        let plan =
            if options.repair_crs { crate::feasibility::repair_crs(&plan, catalog)? } else { plan };
        collected.push(plan);
    }

    let shadow = run_pass(&collected, catalog, false);
    let unique_all = shadow.forest.op_node_count();

    let start = Instant::now();
    let real = if options.checked {
        run_pass(&collected, catalog, true)
    } else {
        shadow
    };
    let build_ms = start.elapsed().as_secs_f64() * 1000.0;

    // one minimal certificate per distinct witness content
    let mut seen: BTreeSet<(crate::feasibility::ConstraintFamily, Vec<crate::feasibility::Evidence>)> =
        BTreeSet::new();
    let mut certificates: Vec<CertificateRecord> = Vec::new();
    for (pi, witness) in &real.pruned {
        if !seen.insert(witness.content_key()) {
            continue;
        }
        let plan = &collected[*pi as usize];
        if witness.evidence.first().map(|e| e.facet.as_str()) == Some("structure") {
            continue; // structurally broken candidates have no checkable subplan
        }
        let cert = minimal_certificate(plan, witness, catalog);
        let (canon, map) = plan.canonicalize()?;
        let remapped = crate::feasibility::Certificate {
            subplan: cert.subplan.iter().map(|id| map[id]).collect(),
            operator: map[&cert.operator],
            family: cert.family,
            witness: Witness {
                family: cert.witness.family,
                evidence: cert.witness.evidence.clone(),
                at_operator: map[&cert.witness.at_operator],
            },
            unshrunk: cert.unshrunk,
        };
        certificates.push(CertificateRecord::new(remapped, &canon)?);
    }

    let num_plans = real.plans_seen;
    let nodes_per_plan =
        if num_plans > 0 { real.total_ops as f64 / num_plans as f64 } else { 0.0 };
    let unique_feasible = real.forest.op_node_count();
    let mut stats = SizeStats::from_counts(
        num_plans,
        nodes_per_plan,
        unique_all,
        if options.checked { unique_feasible } else { unique_all },
    );
    stats.build_ms = build_ms;
    stats.total_edges = real.forest.edge_count();
    stats.d = 2;
    stats.vocab = catalog.vocabulary_size().max(1);
    stats.n = options.bound_n.unwrap_or_else(|| real.distinct_instances.max(1));
    stats.k = options.bound_k.unwrap_or(1);

    let mut forest = real.forest;
    forest.pruned = real.pruned;
    forest.certificates = certificates.clone();
    forest.stats = stats.clone();

    Ok(BuildOutput { forest, certificates, stats, surviving_candidates: real.survivors })
}

/// Convenience digest of a serialized forest (manifest reporting).
pub fn forest_digest(forest: &PackedPlanForest) -> u64 {
    let mut d = Digest::new();
    d.write_str(&forest.to_json());
    d.finish()
}
