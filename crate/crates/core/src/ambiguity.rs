//! Ambiguous query specs and candidate expansion.
//!
//! An ambiguous query is a shared skeleton plan plus an ordered list of
//! choice points. Each choice point names a splice site (an input edge of the
//! skeleton) and a list of alternative fragments; a fragment is a small plan
//! with exactly one hole leaf (`_`) marking where the displaced skeleton
//! subtree re-attaches. Splicing inserts the fragment between the site and
//! its original child, so every candidate contains the skeleton's nodes
//! verbatim; the candidate family is the Cartesian product of the
//! alternatives.
//!
//! Choice points are independent; correlated choices are modeled by
//! enumerating joint fragments inside a single choice point.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::{CollectionKinds, DataKind, NodeId, Plan, PlanError, PlanNode};

/// Leaf collection name marking a fragment's hole.
pub const HOLE: &str = "_";

/// The three sources of candidate multiplicity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChoiceDimension {
    AttachmentScope,
    PredicateInterpretation,
    OperatorAlternative,
}

/// An input edge of the skeleton: `slot`-th input of `node`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpliceSite {
    pub node: NodeId,
    pub slot: usize,
}

/// One alternative fragment, optionally re-targeting the splice site (the
/// attachment-scope dimension).
#[derive(Debug, Clone, PartialEq)]
pub struct Alternative {
    pub site: Option<SpliceSite>,
    pub fragment: Plan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoicePoint {
    pub dimension: ChoiceDimension,
    /// Human-readable predicate id, e.g. `"in_europe"`.
    pub label: String,
    pub site: SpliceSite,
    pub alternatives: Vec<Alternative>,
}

impl ChoicePoint {
    pub fn effective_site(&self, alternative: usize) -> SpliceSite {
        self.alternatives[alternative].site.unwrap_or(self.site)
    }
}

/// Skeleton plus choice points; the compact form of a candidate family.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguousQuerySpec {
    pub skeleton: Plan,
    pub choice_points: Vec<ChoicePoint>,
}

/// A declared attachment site for one predicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteDescriptor {
    pub choice_point: usize,
    pub label: String,
    pub site: SpliceSite,
    pub description: String,
}

#[derive(Debug, Clone, Error)]
pub enum SpecError {
    #[error("choice point {0} (`{1}`): site does not name an input edge of the skeleton")]
    BadSite(usize, String),
    #[error("choice point {0} (`{1}`): fragment must contain exactly one hole leaf `_`")]
    HoleCount(usize, String),
    #[error("choice point {0} (`{1}`): fragment must have exactly one root")]
    FragmentRoots(usize, String),
    #[error(
        "choice point {cp} (`{label}`): fragment output kind {actual} does not match slot kind {expected}"
    )]
    KindMismatch { cp: usize, label: String, expected: DataKind, actual: DataKind },
    #[error("choice points {0} and {1} target overlapping splice sites")]
    OverlappingSites(usize, usize),
    #[error("unknown predicate id `{0}`")]
    UnknownPredicate(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("spec parse error: {0}")]
    Parse(String),
}

impl AmbiguousQuerySpec {
    pub fn new(skeleton: Plan) -> Self {
        AmbiguousQuerySpec { skeleton, choice_points: Vec::new() }
    }

    /// Exact number of candidates in the family.
    pub fn candidate_count(&self) -> u64 {
        self.choice_points
            .iter()
            .map(|cp| cp.alternatives.len() as u64)
            .fold(1u64, |a, b| a.saturating_mul(b))
    }

    /// Structural validation of the skeleton, the sites, and every fragment's
    /// hole and output kind.
    pub fn validate(&self, kinds: &CollectionKinds) -> Result<(), SpecError> {
        self.skeleton.structural_check()?;
        let mut claimed: BTreeMap<SpliceSite, usize> = BTreeMap::new();
        for (i, cp) in self.choice_points.iter().enumerate() {
            let mut sites: BTreeSet<SpliceSite> = BTreeSet::new();
            sites.insert(cp.site);
            for (j, alt) in cp.alternatives.iter().enumerate() {
                sites.insert(cp.effective_site(j));
                let holes = alt
                    .fragment
                    .nodes()
                    .filter(|(_, n)| matches!(n, PlanNode::Leaf { collection } if collection == HOLE))
                    .count();
                if holes != 1 {
                    return Err(SpecError::HoleCount(i, cp.label.clone()));
                }
                if alt.fragment.roots().count() != 1 {
                    return Err(SpecError::FragmentRoots(i, cp.label.clone()));
                }
            }
            for site in sites {
                let child = self
                    .skeleton
                    .node(site.node)
                    .and_then(|n| n.children().get(site.slot).copied())
                    .ok_or_else(|| SpecError::BadSite(i, cp.label.clone()))?;
                let child_kind = self.skeleton.output_kind(child, kinds);
                for (j, alt) in cp.alternatives.iter().enumerate() {
                    if cp.effective_site(j) != site {
                        continue;
                    }
                    let root = alt.fragment.roots().next().unwrap();
                    let root_kind = alt.fragment.output_kind(root, kinds);
                    if let (Some(expected), Some(actual)) = (child_kind, root_kind) {
                        if expected != actual {
                            return Err(SpecError::KindMismatch {
                                cp: i,
                                label: cp.label.clone(),
                                expected,
                                actual,
                            });
                        }
                    }
                }
                if let Some(prev) = claimed.insert(site, i) {
                    if prev != i {
                        return Err(SpecError::OverlappingSites(prev, i));
                    }
                }
            }
        }
        Ok(())
    }

    /// Splice one candidate: for each choice point, insert the chosen
    /// fragment between the site and its original child. Skeleton node ids
    /// are preserved; fragment nodes get fresh ids.
    pub fn splice(&self, choice: &[usize]) -> Plan {
        assert_eq!(choice.len(), self.choice_points.len());
        let mut plan = self.skeleton.clone();
        let mut next_id = self.skeleton.max_id() + 1;
        for (cp, &alt_idx) in self.choice_points.iter().zip(choice) {
            let alt = &cp.alternatives[alt_idx];
            let site = cp.effective_site(alt_idx);
            let displaced = plan
                .node(site.node)
                .and_then(|n| n.children().get(site.slot).copied())
                .expect("validated site");
            let mut map: BTreeMap<NodeId, NodeId> = BTreeMap::new();
            for (fid, fnode) in alt.fragment.nodes() {
                match fnode {
                    PlanNode::Leaf { collection } if collection == HOLE => {
                        map.insert(fid, displaced);
                    }
                    _ => {
                        map.insert(fid, NodeId(next_id));
                        next_id += 1;
                    }
                }
            }
            for (fid, fnode) in alt.fragment.nodes() {
                match fnode {
                    PlanNode::Leaf { collection } => {
                        if collection != HOLE {
                            plan.add_leaf(map[&fid].0, collection);
                        }
                    }
                    PlanNode::Op { op, children } => {
                        let children: Vec<NodeId> =
                            children.iter().map(|c| map[c]).collect();
                        plan.add_op(map[&fid].0, op.clone(), &children);
                    }
                }
            }
            let root = alt.fragment.roots().next().expect("validated fragment");
            plan.set_child(site.node, site.slot, map[&root]);
        }
        plan
    }

    /// Lazily enumerate the candidate family in lexicographic choice order
    /// (first choice point most significant).
    pub fn expand(&self, limit: Option<u64>) -> Expansion<'_> {
        Expansion { spec: self, odometer: vec![0; self.choice_points.len()], done: false, emitted: 0, limit }
    }

    /// Every attachment site declared for the given predicate id, in
    /// declaration order, deduplicated by declared coordinates only.
    pub fn attachment_variants(
        &self,
        predicate_id: &str,
    ) -> Result<Vec<SiteDescriptor>, SpecError> {
        let (idx, cp) = self
            .choice_points
            .iter()
            .enumerate()
            .find(|(_, cp)| cp.label == predicate_id)
            .ok_or_else(|| SpecError::UnknownPredicate(predicate_id.to_string()))?;
        let mut seen: BTreeSet<SpliceSite> = BTreeSet::new();
        let mut out = Vec::new();
        let mut declared: Vec<SpliceSite> =
            (0..cp.alternatives.len()).map(|j| cp.effective_site(j)).collect();
        if declared.is_empty() {
            declared.push(cp.site);
        }
        for site in declared {
            if seen.insert(site) {
                out.push(SiteDescriptor {
                    choice_point: idx,
                    label: cp.label.clone(),
                    site,
                    description: format!(
                        "`{}` attaches at input {} of node {}",
                        cp.label, site.slot, site.node
                    ),
                });
            }
        }
        Ok(out)
    }

    pub fn from_json(text: &str) -> Result<AmbiguousQuerySpec, SpecError> {
        let doc: SpecDoc =
            serde_json::from_str(text).map_err(|e| SpecError::Parse(e.to_string()))?;
        doc.into_spec()
    }

    pub fn to_json(&self) -> Result<String, SpecError> {
        let doc = SpecDoc {
            skeleton: self.skeleton.serialize()?,
            choice_points: self
                .choice_points
                .iter()
                .map(|cp| {
                    Ok(ChoicePointDoc {
                        dimension: cp.dimension,
                        label: cp.label.clone(),
                        site: cp.site,
                        alternatives: cp
                            .alternatives
                            .iter()
                            .map(|a| {
                                Ok(AlternativeDoc {
                                    site: a.site,
                                    plan: a.fragment.serialize()?,
                                })
                            })
                            .collect::<Result<_, PlanError>>()?,
                    })
                })
                .collect::<Result<_, PlanError>>()?,
        };
        serde_json::to_string_pretty(&doc).map_err(|e| SpecError::Parse(e.to_string()))
    }
}

/// Iterator over spliced candidates.
pub struct Expansion<'a> {
    spec: &'a AmbiguousQuerySpec,
    odometer: Vec<usize>,
    done: bool,
    emitted: u64,
    limit: Option<u64>,
}

impl Iterator for Expansion<'_> {
    type Item = Plan;

    fn next(&mut self) -> Option<Plan> {
        if self.done || self.limit.is_some_and(|l| self.emitted >= l) {
            return None;
        }
        let plan = self.spec.splice(&self.odometer);
        self.emitted += 1;
        // advance the least-significant digit
        let mut i = self.odometer.len();
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            self.odometer[i] += 1;
            if self.odometer[i] < self.spec.choice_points[i].alternatives.len() {
                break;
            }
            self.odometer[i] = 0;
        }
        Some(plan)
    }
}

#[derive(Serialize, Deserialize)]
struct SpecDoc {
    skeleton: String,
    #[serde(default)]
    choice_points: Vec<ChoicePointDoc>,
}

#[derive(Serialize, Deserialize)]
struct ChoicePointDoc {
    dimension: ChoiceDimension,
    #[serde(default)]
    label: String,
    site: SpliceSite,
    alternatives: Vec<AlternativeDoc>,
}

#[derive(Serialize, Deserialize)]
struct AlternativeDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    site: Option<SpliceSite>,
    plan: String,
}

impl SpecDoc {
    fn into_spec(self) -> Result<AmbiguousQuerySpec, SpecError> {
        let skeleton = Plan::parse(&self.skeleton)?;
        let mut choice_points = Vec::new();
        for cp in self.choice_points {
            let mut alternatives = Vec::new();
            for alt in cp.alternatives {
                alternatives
                    .push(Alternative { site: alt.site, fragment: Plan::parse(&alt.plan)? });
            }
            choice_points.push(ChoicePoint {
                dimension: cp.dimension,
                label: cp.label,
                site: cp.site,
                alternatives,
            });
        }
        Ok(AmbiguousQuerySpec { skeleton, choice_points })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{OperatorInstance, OperatorSymbol, ParamTag};

    fn kinds() -> CollectionKinds {
        [
            ("SuppliersRel".to_string(), DataKind::Relation),
            ("Documents".to_string(), DataKind::Docs),
        ]
        .into_iter()
        .collect()
    }

    fn skeleton() -> Plan {
        let mut p = Plan::new();
        let leaf = p.add_leaf(0, "SuppliersRel");
        let s1 = p.add_op(
            1,
            OperatorInstance::new(OperatorSymbol::Select).with_param(
                "pred",
                ParamTag::Predicate,
                "active",
            ),
            &[leaf],
        );
        let s2 = p.add_op(
            2,
            OperatorInstance::new(OperatorSymbol::Project).with_param(
                "attrs",
                ParamTag::AttrList,
                "sid,name",
            ),
            &[s1],
        );
        p.set_root(s2);
        p
    }

    fn fragment(pred: &str) -> Plan {
        let mut f = Plan::new();
        let hole = f.add_leaf(0, HOLE);
        let op = f.add_op(
            1,
            OperatorInstance::new(OperatorSymbol::Select).with_param(
                "pred",
                ParamTag::Predicate,
                pred,
            ),
            &[hole],
        );
        f.set_root(op);
        f
    }

    fn cp(label: &str, site: SpliceSite, preds: &[&str]) -> ChoicePoint {
        ChoicePoint {
            dimension: ChoiceDimension::PredicateInterpretation,
            label: label.to_string(),
            site,
            alternatives: preds
                .iter()
                .map(|p| Alternative { site: None, fragment: fragment(p) })
                .collect(),
        }
    }

    #[test]
    fn zero_choice_points_yield_the_skeleton() {
        let spec = AmbiguousQuerySpec::new(skeleton());
        let plans: Vec<Plan> = spec.expand(None).collect();
        assert_eq!(plans.len(), 1);
        assert_eq!(
            plans[0].serialize().unwrap(),
            spec.skeleton.serialize().unwrap()
        );
    }

    #[test]
    fn cartesian_family_is_exact_and_distinct() {
        let mut spec = AmbiguousQuerySpec::new(skeleton());
        spec.choice_points.push(cp("a", SpliceSite { node: NodeId(1), slot: 0 }, &["a1", "a2"]));
        spec.choice_points.push(cp("b", SpliceSite { node: NodeId(2), slot: 0 }, &["b1", "b2"]));
        // a third choice point requires another skeleton edge; reuse site of cp `a`?
        // not allowed -- extend the skeleton instead
        spec.validate(&kinds()).unwrap();
        assert_eq!(spec.candidate_count(), 4);
        let serialized: BTreeSet<String> =
            spec.expand(None).map(|p| p.serialize().unwrap()).collect();
        assert_eq!(serialized.len(), 4, "all candidates distinct");
        // three choice points x two alternatives
        let mut p = skeleton();
        let s2 = NodeId(2);
        let extra = p.add_op(
            3,
            OperatorInstance::new(OperatorSymbol::Select).with_param(
                "pred",
                ParamTag::Predicate,
                "tail",
            ),
            &[s2],
        );
        let mut p2 = Plan::new();
        std::mem::swap(&mut p2, &mut p);
        // rebuild roots: root is now the extra select
        let mut sk = Plan::new();
        for (id, node) in p2.nodes() {
            match node {
                PlanNode::Leaf { collection } => {
                    sk.add_leaf(id.0, collection);
                }
                PlanNode::Op { op, children } => {
                    sk.add_op(id.0, op.clone(), children);
                }
            }
        }
        sk.set_root(extra);
        let mut spec3 = AmbiguousQuerySpec::new(sk);
        spec3.choice_points.push(cp("a", SpliceSite { node: NodeId(1), slot: 0 }, &["a1", "a2"]));
        spec3.choice_points.push(cp("b", SpliceSite { node: NodeId(2), slot: 0 }, &["b1", "b2"]));
        spec3.choice_points.push(cp("c", SpliceSite { node: NodeId(3), slot: 0 }, &["c1", "c2"]));
        spec3.validate(&kinds()).unwrap();
        assert_eq!(spec3.candidate_count(), 8);
        let all: BTreeSet<String> =
            spec3.expand(None).map(|p| p.serialize().unwrap()).collect();
        assert_eq!(all.len(), 8);
    }

    #[test]
    fn skeleton_ids_are_preserved_in_every_candidate() {
        let mut spec = AmbiguousQuerySpec::new(skeleton());
        spec.choice_points.push(cp("a", SpliceSite { node: NodeId(1), slot: 0 }, &["a1", "a2"]));
        for plan in spec.expand(None) {
            for (id, node) in spec.skeleton.nodes() {
                let candidate_node = plan.node(id).expect("skeleton node present");
                match (node, candidate_node) {
                    (PlanNode::Leaf { collection: a }, PlanNode::Leaf { collection: b }) => {
                        assert_eq!(a, b)
                    }
                    (PlanNode::Op { op: a, .. }, PlanNode::Op { op: b, .. }) => {
                        assert_eq!(a, b)
                    }
                    _ => panic!("node {id} changed shape"),
                }
            }
        }
    }

    #[test]
    fn limit_truncates_expansion() {
        let mut spec = AmbiguousQuerySpec::new(skeleton());
        spec.choice_points.push(cp("a", SpliceSite { node: NodeId(1), slot: 0 }, &["a1", "a2", "a3"]));
        assert_eq!(spec.expand(Some(2)).count(), 2);
    }

    #[test]
    fn kind_mismatch_names_the_choice_point() {
        let mut spec = AmbiguousQuerySpec::new(skeleton());
        // fragment producing docs into a relation slot
        let mut f = Plan::new();
        let hole = f.add_leaf(0, HOLE);
        let bad = f.add_op(1, OperatorInstance::new(OperatorSymbol::RelToDocs), &[hole]);
        f.set_root(bad);
        spec.choice_points.push(ChoicePoint {
            dimension: ChoiceDimension::OperatorAlternative,
            label: "oops".to_string(),
            site: SpliceSite { node: NodeId(1), slot: 0 },
            alternatives: vec![Alternative { site: None, fragment: f }],
        });
        match spec.validate(&kinds()) {
            Err(SpecError::KindMismatch { label, expected, actual, .. }) => {
                assert_eq!(label, "oops");
                assert_eq!(expected, DataKind::Relation);
                assert_eq!(actual, DataKind::Docs);
            }
            other => panic!("expected kind mismatch, got {other:?}"),
        }
    }

    #[test]
    fn attachment_sites_are_declared_not_deduplicated() {
        let mut spec = AmbiguousQuerySpec::new(skeleton());
        let mut cp0 = cp("docs_similar", SpliceSite { node: NodeId(1), slot: 0 }, &["x", "y"]);
        cp0.dimension = ChoiceDimension::AttachmentScope;
        cp0.alternatives[1].site = Some(SpliceSite { node: NodeId(2), slot: 0 });
        spec.choice_points.push(cp0);
        let variants = spec.attachment_variants("docs_similar").unwrap();
        assert_eq!(variants.len(), 2);
        assert_eq!(variants[0].site, SpliceSite { node: NodeId(1), slot: 0 });
        assert_eq!(variants[1].site, SpliceSite { node: NodeId(2), slot: 0 });
        assert!(spec.attachment_variants("nope").is_err());
        // single-site predicate
        let mut spec2 = AmbiguousQuerySpec::new(skeleton());
        spec2
            .choice_points
            .push(cp("single", SpliceSite { node: NodeId(1), slot: 0 }, &["x", "y"]));
        assert_eq!(spec2.attachment_variants("single").unwrap().len(), 1);
    }

    #[test]
    fn json_round_trip() {
        let mut spec = AmbiguousQuerySpec::new(skeleton());
        spec.choice_points.push(cp("a", SpliceSite { node: NodeId(1), slot: 0 }, &["a1", "a2"]));
        let json = spec.to_json().unwrap();
        let parsed = AmbiguousQuerySpec::from_json(&json).unwrap();
        assert_eq!(parsed.candidate_count(), 2);
        let a: Vec<String> = spec.expand(None).map(|p| p.serialize().unwrap()).collect();
        let b: Vec<String> = parsed.expand(None).map(|p| p.serialize().unwrap()).collect();
        assert_eq!(a, b);
    }
}
