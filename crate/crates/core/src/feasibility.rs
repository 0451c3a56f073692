//! Local feasibility constraints, witnesses, and minimal infeasibility
//! certificates.
//!
//! Each constraint family is a local predicate over one operator's annotation
//! and the annotations of its direct children; families are evaluated in a
//! fixed order (TYPE, BOUND, ALIGN, CRS, PLACE, UNCERT, TEMPORAL) and the
//! first failure becomes the node's witness. A certificate packages a witness
//! with the minimal connected subplan that reproduces it; certificates are
//! re-checkable in time polynomial in the subplan size, with no access to the
//! rest of the plan.
//!
//! The checks run in a partial mode as well, where children outside the
//! examined subplan are unknown: a family that cannot be decided reports
//! `Unknown` instead of passing. Certificate verification and minimization
//! are built on that.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::algebra::{
    CollectionKinds, DataKind, NodeId, OperatorInstance, OperatorSymbol, ParamTag, Plan,
    PlanError, PlanNode, TypeViolation,
};
use crate::catalog::{
    annotate_leaf, annotate_op, AnnotationVector, Binding, Catalog, Granularity, TypePayload,
    Uncertainty,
};

/// The seven constraint families checked per operator, in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConstraintFamily {
    #[serde(rename = "TYPE")]
    Type,
    #[serde(rename = "BOUND")]
    Bound,
    #[serde(rename = "ALIGN")]
    Align,
    #[serde(rename = "CRS")]
    Crs,
    #[serde(rename = "PLACE")]
    Place,
    #[serde(rename = "UNCERT")]
    Uncert,
    #[serde(rename = "TEMPORAL")]
    Temporal,
}

impl ConstraintFamily {
    pub const ALL: [ConstraintFamily; 7] = [
        ConstraintFamily::Type,
        ConstraintFamily::Bound,
        ConstraintFamily::Align,
        ConstraintFamily::Crs,
        ConstraintFamily::Place,
        ConstraintFamily::Uncert,
        ConstraintFamily::Temporal,
    ];

    pub fn token(self) -> &'static str {
        match self {
            ConstraintFamily::Type => "TYPE",
            ConstraintFamily::Bound => "BOUND",
            ConstraintFamily::Align => "ALIGN",
            ConstraintFamily::Crs => "CRS",
            ConstraintFamily::Place => "PLACE",
            ConstraintFamily::Uncert => "UNCERT",
            ConstraintFamily::Temporal => "TEMPORAL",
        }
    }
}

impl fmt::Display for ConstraintFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// One `(facet, expected, actual)` evidence entry.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Evidence {
    pub facet: String,
    pub expected: String,
    pub actual: String,
}

impl Evidence {
    fn new(facet: &str, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Evidence { facet: facet.into(), expected: expected.into(), actual: actual.into() }
    }
}

/// A constant-size local evidence trace: which facet conflicted at which
/// operator, with the expected and actual values.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Witness {
    pub family: ConstraintFamily,
    pub evidence: Vec<Evidence>,
    pub at_operator: NodeId,
}

impl Witness {
    fn new(family: ConstraintFamily, at: NodeId, evidence: Vec<Evidence>) -> Self {
        debug_assert!(evidence.len() <= 4, "evidence must stay constant-size");
        Witness { family, evidence, at_operator: at }
    }

    /// Identity ignoring the node id, used to deduplicate certificates across
    /// candidates that share a faulted alternative.
    pub fn content_key(&self) -> (ConstraintFamily, Vec<Evidence>) {
        (self.family, self.evidence.clone())
    }
}

/// A minimal-subplan infeasibility certificate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Certificate {
    pub subplan: BTreeSet<NodeId>,
    pub operator: NodeId,
    pub family: ConstraintFamily,
    pub witness: Witness,
    /// Set when minimization could not shrink below the whole plan.
    #[serde(default, skip_serializing_if = "is_false")]
    pub unshrunk: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// A certificate together with the canonical plan it refers to and its
/// human-readable rendering; the unit written to certificate files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateRecord {
    #[serde(flatten)]
    pub certificate: Certificate,
    pub message: String,
    /// Canonical text of the plan the node ids refer to.
    pub plan: String,
}

impl CertificateRecord {
    pub fn new(certificate: Certificate, plan: &Plan) -> Result<Self, PlanError> {
        let message = certificate.witness.message(plan);
        Ok(CertificateRecord { certificate, message, plan: plan.serialize()? })
    }
}

/// Outcome of one family check in partial mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckOutcome {
    Pass,
    Fail(Witness),
    /// Not decidable: required information sits outside the examined subplan.
    Unknown,
}

impl CheckOutcome {
    fn fail(family: ConstraintFamily, at: NodeId, evidence: Vec<Evidence>) -> Self {
        CheckOutcome::Fail(Witness::new(family, at, evidence))
    }
}

fn join_tags(tags: &BTreeSet<String>) -> String {
    if tags.is_empty() {
        "none".to_string()
    } else {
        tags.iter().cloned().collect::<Vec<_>>().join(",")
    }
}

/// Is the instance deterministic-only: either its template refuses
/// approximate input or the instance carries `det=int:1` (a predicate over
/// exact identifiers).
fn deterministic_only(op: &OperatorInstance, catalog: &Catalog) -> bool {
    !catalog.template(op.symbol).accepts_approx || op.bound_param("det") == Some("1")
}

fn check_type(
    at: NodeId,
    op: &OperatorInstance,
    children: &[Option<&AnnotationVector>],
    catalog: &Catalog,
) -> CheckOutcome {
    // cross-model identifier mapping must be declared and match the incoming
    // document identifier
    if let Some(map) = op.bound_param("map") {
        let child = match children.first() {
            Some(Some(c)) => c,
            _ => return CheckOutcome::Unknown,
        };
        match &child.type_profile.output {
            TypePayload::Unknown => return CheckOutcome::Unknown,
            TypePayload::Docs { id_attr } => {
                let source = map.split_once("->").map(|(s, _)| s.trim()).unwrap_or(map);
                if source != id_attr {
                    return CheckOutcome::fail(
                        ConstraintFamily::Type,
                        at,
                        vec![Evidence::new(
                            "mapping",
                            map,
                            format!("input identifier is {id_attr}"),
                        )],
                    );
                }
                if !catalog.has_mapping(map) {
                    return CheckOutcome::fail(
                        ConstraintFamily::Type,
                        at,
                        vec![Evidence::new("mapping", map, "absent")],
                    );
                }
            }
            _ => {}
        }
    }
    // traversal edges must be declared in the schema
    if op.symbol == OperatorSymbol::Traverse {
        if let Some(edge) = op.bound_param("edge") {
            if !catalog.schema.edges.contains_key(edge) {
                return CheckOutcome::fail(
                    ConstraintFamily::Type,
                    at,
                    vec![Evidence::new("edge", edge, "undeclared")],
                );
            }
        }
    }
    CheckOutcome::Pass
}

fn check_bound(at: NodeId, ann: &AnnotationVector) -> CheckOutcome {
    for (name, b) in &ann.binding {
        if *b == Binding::Unbound {
            return CheckOutcome::fail(
                ConstraintFamily::Bound,
                at,
                vec![Evidence::new("param", name.clone(), "Unbound")],
            );
        }
    }
    CheckOutcome::Pass
}

fn check_align(
    at: NodeId,
    op: &OperatorInstance,
    children: &[Option<&AnnotationVector>],
    catalog: &Catalog,
) -> CheckOutcome {
    let mut unknown = false;
    // graph label alignment: the traversed edge's source label must admit
    // the incoming node label
    if op.symbol == OperatorSymbol::Traverse {
        if let Some(edge_def) =
            op.bound_param("edge").and_then(|e| catalog.schema.edges.get(e))
        {
            match children.first() {
                Some(Some(child)) => match &child.type_profile.output {
                    TypePayload::Label(actual) => {
                        if !catalog.is_subtype(actual, &edge_def.from) {
                            return CheckOutcome::fail(
                                ConstraintFamily::Align,
                                at,
                                vec![Evidence::new(
                                    "label",
                                    edge_def.from.clone(),
                                    actual.clone(),
                                )],
                            );
                        }
                    }
                    TypePayload::Unknown => unknown = true,
                    _ => {}
                },
                _ => unknown = true,
            }
        }
    }
    // embedding-domain alignment: a registered query vector's tag must be
    // compatible with the incoming document stream's tags
    if let Some(qtag) = op
        .bound_param("q")
        .and_then(|q| catalog.schema.vectors.get(q))
        .map(|v| v.tag.clone())
    {
        match children.first() {
            Some(Some(child)) => {
                if !child.semantic_tags.is_empty()
                    && !child
                        .semantic_tags
                        .iter()
                        .any(|t| catalog.tags_compatible(&qtag, t))
                {
                    return CheckOutcome::fail(
                        ConstraintFamily::Align,
                        at,
                        vec![Evidence::new("tag", qtag, join_tags(&child.semantic_tags))],
                    );
                }
            }
            _ => unknown = true,
        }
    }
    if unknown {
        CheckOutcome::Unknown
    } else {
        CheckOutcome::Pass
    }
}

fn check_crs(
    at: NodeId,
    op: &OperatorInstance,
    children: &[Option<&AnnotationVector>],
) -> CheckOutcome {
    let sig = op.symbol.kind();
    let mut seen: Option<&str> = None;
    let mut unknown = false;
    for (slot, expected) in sig.input_kinds.iter().enumerate() {
        if *expected != DataKind::Geometry {
            continue;
        }
        match children.get(slot) {
            Some(Some(child)) => {
                if let Some(crs) = child.refsys.crs.as_deref() {
                    if let Some(first) = seen {
                        if first != crs {
                            return CheckOutcome::fail(
                                ConstraintFamily::Crs,
                                at,
                                vec![Evidence::new("crs", first, crs)],
                            );
                        }
                    } else {
                        seen = Some(crs);
                    }
                }
            }
            _ => unknown = true,
        }
    }
    if unknown {
        CheckOutcome::Unknown
    } else {
        CheckOutcome::Pass
    }
}

fn check_place(
    at: NodeId,
    ann: &AnnotationVector,
    children: &[Option<&AnnotationVector>],
) -> CheckOutcome {
    if ann.placement.is_empty() {
        return CheckOutcome::fail(
            ConstraintFamily::Place,
            at,
            vec![Evidence::new("engines", "nonempty", "empty")],
        );
    }
    for child in children.iter().flatten() {
        if child.placement.is_empty() {
            return CheckOutcome::fail(
                ConstraintFamily::Place,
                at,
                vec![Evidence::new("engines", "nonempty", "empty (input)")],
            );
        }
    }
    CheckOutcome::Pass
}

fn check_uncert(
    at: NodeId,
    op: &OperatorInstance,
    children: &[Option<&AnnotationVector>],
    catalog: &Catalog,
) -> CheckOutcome {
    if !deterministic_only(op, catalog) {
        return CheckOutcome::Pass;
    }
    let mut unknown = false;
    for child in children {
        match child {
            Some(child) => {
                if let Uncertainty::EpsBounded { bin } = &child.uncertainty {
                    return CheckOutcome::fail(
                        ConstraintFamily::Uncert,
                        at,
                        vec![Evidence::new(
                            "uncertainty",
                            "Deterministic",
                            format!("EpsBounded({bin})"),
                        )],
                    );
                }
            }
            None => unknown = true,
        }
    }
    if unknown {
        CheckOutcome::Unknown
    } else {
        CheckOutcome::Pass
    }
}

fn check_temporal(
    at: NodeId,
    op: &OperatorInstance,
    children: &[Option<&AnnotationVector>],
) -> CheckOutcome {
    // the operator's own requirement, if declared (e.g. a fiscal-year window)
    let required: Option<Granularity> =
        op.bound_param("gran").and_then(Granularity::from_token);
    let mut seen: Option<Granularity> = required;
    let mut expected_source_is_op = required.is_some();
    let mut unknown = false;
    for child in children {
        match child {
            Some(child) => {
                if let Some(g) = child.refsys.granularity {
                    match seen {
                        Some(prev) if prev != g => {
                            let (expected, actual) = if expected_source_is_op {
                                (prev, g)
                            } else {
                                (prev, g)
                            };
                            return CheckOutcome::fail(
                                ConstraintFamily::Temporal,
                                at,
                                vec![Evidence::new(
                                    "granularity",
                                    expected.token(),
                                    actual.token(),
                                )],
                            );
                        }
                        Some(_) => {}
                        None => {
                            seen = Some(g);
                            expected_source_is_op = false;
                        }
                    }
                }
            }
            None => unknown = true,
        }
    }
    if unknown {
        CheckOutcome::Unknown
    } else {
        CheckOutcome::Pass
    }
}

/// Evaluate all families in order; first definite failure wins. Families that
/// cannot be decided (inputs outside the subplan) are skipped, and the whole
/// check reports `Unknown` if nothing failed but something was undecidable.
pub fn check_local_partial(
    catalog: &Catalog,
    at: NodeId,
    op: &OperatorInstance,
    ann: &AnnotationVector,
    children: &[Option<&AnnotationVector>],
) -> CheckOutcome {
    let mut any_unknown = false;
    let outcomes = [
        check_type(at, op, children, catalog),
        check_bound(at, ann),
        check_align(at, op, children, catalog),
        check_crs(at, op, children),
        check_place(at, ann, children),
        check_uncert(at, op, children, catalog),
        check_temporal(at, op, children),
    ];
    for outcome in outcomes {
        match outcome {
            CheckOutcome::Fail(w) => return CheckOutcome::Fail(w),
            CheckOutcome::Unknown => any_unknown = true,
            CheckOutcome::Pass => {}
        }
    }
    if any_unknown {
        CheckOutcome::Unknown
    } else {
        CheckOutcome::Pass
    }
}

/// Local feasibility check with fully derived annotations. Reads only the
/// operator, its annotation, and its direct children's annotations (plus the
/// static catalog).
pub fn check_local(
    catalog: &Catalog,
    at: NodeId,
    op: &OperatorInstance,
    ann: &AnnotationVector,
    children: &[&AnnotationVector],
) -> Result<(), Witness> {
    let children: Vec<Option<&AnnotationVector>> =
        children.iter().map(|c| Some(*c)).collect();
    match check_local_partial(catalog, at, op, ann, &children) {
        CheckOutcome::Pass => Ok(()),
        CheckOutcome::Fail(w) => Err(w),
        CheckOutcome::Unknown => {
            unreachable!("fully annotated inputs cannot be undecidable")
        }
    }
}

/// Derive an annotation vector, or a witness when derivation is impossible
/// (no engine can host the operator).
pub fn annotate(
    op: &OperatorInstance,
    children: &[&AnnotationVector],
    catalog: &Catalog,
    at: NodeId,
) -> Result<AnnotationVector, Witness> {
    let children: Vec<Option<&AnnotationVector>> =
        children.iter().map(|c| Some(*c)).collect();
    let ann = annotate_op(op, &children, catalog);
    if ann.placement.is_empty() {
        return Err(Witness::new(
            ConstraintFamily::Place,
            at,
            vec![Evidence::new("engines", "nonempty", "empty")],
        ));
    }
    Ok(ann)
}

/// Annotate every node of a plan bottom-up.
pub fn annotate_plan(
    plan: &Plan,
    catalog: &Catalog,
) -> Result<BTreeMap<NodeId, AnnotationVector>, PlanError> {
    let order = plan.topological_order()?;
    let mut anns: BTreeMap<NodeId, AnnotationVector> = BTreeMap::new();
    for id in order {
        let ann = match plan.node(id).unwrap() {
            PlanNode::Leaf { collection } => annotate_leaf(collection, catalog),
            PlanNode::Op { op, children } => {
                let child_anns: Vec<Option<&AnnotationVector>> =
                    children.iter().map(|c| anns.get(c)).collect();
                annotate_op(op, &child_anns, catalog)
            }
        };
        anns.insert(id, ann);
    }
    Ok(anns)
}

/// Witnesses of one fully annotated plan: each node whose own check fails
/// while all its children are clean contributes one independent witness;
/// nodes above a failure are not checked.
pub fn plan_witnesses(
    plan: &Plan,
    catalog: &Catalog,
) -> Result<(BTreeMap<NodeId, AnnotationVector>, Vec<Witness>), PlanError> {
    let anns = annotate_plan(plan, catalog)?;
    let order = plan.topological_order()?;
    let mut dead: BTreeSet<NodeId> = BTreeSet::new();
    let mut witnesses = Vec::new();
    for id in order {
        if let PlanNode::Op { op, children } = plan.node(id).unwrap() {
            if children.iter().any(|c| dead.contains(c)) {
                dead.insert(id);
                continue;
            }
            let child_refs: Vec<&AnnotationVector> =
                children.iter().map(|c| &anns[c]).collect();
            if let Err(w) = check_local(catalog, id, op, &anns[&id], &child_refs) {
                witnesses.push(w);
                dead.insert(id);
            }
        }
    }
    Ok((anns, witnesses))
}

/// Turn a signature violation into a TYPE witness at the offending parent.
pub fn violation_witness(v: &TypeViolation) -> Witness {
    Witness::new(
        ConstraintFamily::Type,
        v.parent,
        vec![Evidence::new(
            &format!("kind@{}", v.slot),
            v.expected.token(),
            v.actual.token(),
        )],
    )
}

impl Witness {
    /// Paper-style human sentence for diagnostics.
    pub fn message(&self, plan: &Plan) -> String {
        let describe = |id: NodeId| -> String {
            match plan.node(id) {
                Some(PlanNode::Op { op, .. }) => op.symbol.token().to_string(),
                Some(PlanNode::Leaf { collection }) => collection.clone(),
                None => format!("node {id}"),
            }
        };
        let at = describe(self.at_operator);
        let e = self.evidence.first();
        match (self.family, e) {
            (ConstraintFamily::Type, Some(e)) if e.facet == "mapping" => format!(
                "Cast infeasible: {at} requires mapping {}, but the catalog reports {}",
                e.expected, e.actual
            ),
            (ConstraintFamily::Type, Some(e)) if e.facet == "edge" => format!(
                "Traversal infeasible: edge {} is not declared in the schema",
                e.expected
            ),
            (ConstraintFamily::Type, Some(e)) => format!(
                "Typing infeasible: {at} expects {} but receives {}",
                e.expected, e.actual
            ),
            (ConstraintFamily::Bound, Some(e)) => {
                format!("Binding failure: parameter {} of {at} is {}", e.expected, e.actual)
            }
            (ConstraintFamily::Align, Some(e)) if e.facet == "label" => format!(
                "Traversal infeasible: input nodes typed as {}, but edge at {at} expects {}",
                e.actual, e.expected
            ),
            (ConstraintFamily::Align, Some(e)) => format!(
                "Embedding domain mismatch: {at} queries domain {}, input is tagged {}",
                e.expected, e.actual
            ),
            (ConstraintFamily::Crs, Some(e)) => format!(
                "CRS misalignment at {at}: {} vs {}; a reprojection is required",
                e.expected, e.actual
            ),
            (ConstraintFamily::Place, _) => {
                format!("Placement infeasible: no engine supports {at}")
            }
            (ConstraintFamily::Uncert, Some(e)) => format!(
                "Uncertainty violation: {at} expects deterministic input but receives {}",
                e.actual
            ),
            (ConstraintFamily::Temporal, Some(e)) => format!(
                "Temporal granularity mismatch at {at}: {} vs {}",
                e.expected, e.actual
            ),
            (family, None) => format!("{family} violation at {at}"),
        }
    }
}

/// Insert CRS reprojections above the left input of every binary spatial
/// operator whose two geometry inputs disagree, converting to the right
/// input's CRS. Inserts nothing when the catalog declares no transform for
/// the pair. Idempotent.
pub fn repair_crs(plan: &Plan, catalog: &Catalog) -> Result<Plan, PlanError> {
    let order = plan.topological_order()?;
    let mut repaired = plan.clone();
    let mut next_id = plan.max_id() + 1;
    let mut anns: BTreeMap<NodeId, AnnotationVector> = BTreeMap::new();
    for id in order {
        match repaired.node(id).unwrap().clone() {
            PlanNode::Leaf { collection } => {
                anns.insert(id, annotate_leaf(&collection, catalog));
            }
            PlanNode::Op { op, mut children } => {
                let sig = op.symbol.kind();
                let geometry_slots: Vec<usize> = sig
                    .input_kinds
                    .iter()
                    .enumerate()
                    .filter(|(_, k)| **k == DataKind::Geometry)
                    .map(|(i, _)| i)
                    .collect();
                if geometry_slots.len() == 2 {
                    let left_crs = anns
                        .get(&children[geometry_slots[0]])
                        .and_then(|a| a.refsys.crs.clone());
                    let right_crs = anns
                        .get(&children[geometry_slots[1]])
                        .and_then(|a| a.refsys.crs.clone());
                    if let (Some(from), Some(to)) = (left_crs, right_crs) {
                        if from != to && catalog.has_transform(&from, &to) {
                            let reproject = OperatorInstance::new(OperatorSymbol::Reproject)
                                .with_param("from", ParamTag::CrsCode, &from)
                                .with_param("to", ParamTag::CrsCode, &to);
                            let left = children[geometry_slots[0]];
                            let inserted =
                                repaired.add_op(next_id, reproject, &[left]);
                            next_id += 1;
                            let ann = annotate_op(
                                repaired.node(inserted).unwrap().op().unwrap(),
                                &[anns.get(&left)],
                                catalog,
                            );
                            anns.insert(inserted, ann);
                            children[geometry_slots[0]] = inserted;
                            repaired.add_op(id.0, op.clone(), &children);
                        }
                    }
                }
                let child_anns: Vec<Option<&AnnotationVector>> = repaired
                    .node(id)
                    .unwrap()
                    .children()
                    .iter()
                    .map(|c| anns.get(c))
                    .collect();
                let ann = annotate_op(&op, &child_anns, catalog);
                anns.insert(id, ann);
            }
        }
    }
    Ok(repaired)
}

/// Re-annotate the subplan bottom-up, treating children outside it as
/// unknown, and evaluate the local check at the sink.
fn reproduce_on(
    plan: &Plan,
    catalog: &Catalog,
    subplan: &BTreeSet<NodeId>,
    operator: NodeId,
) -> CheckOutcome {
    let order = match plan.topological_order() {
        Ok(o) => o,
        Err(_) => return CheckOutcome::Unknown,
    };
    let mut anns: BTreeMap<NodeId, AnnotationVector> = BTreeMap::new();
    for id in order {
        if !subplan.contains(&id) {
            continue;
        }
        let ann = match plan.node(id).unwrap() {
            PlanNode::Leaf { collection } => annotate_leaf(collection, catalog),
            PlanNode::Op { op, children } => {
                let child_anns: Vec<Option<&AnnotationVector>> = children
                    .iter()
                    .map(|c| if subplan.contains(c) { anns.get(c) } else { None })
                    .collect();
                annotate_op(op, &child_anns, catalog)
            }
        };
        anns.insert(id, ann);
    }
    let (op, children) = match plan.node(operator) {
        Some(PlanNode::Op { op, children }) => (op, children),
        _ => return CheckOutcome::Unknown,
    };
    let child_anns: Vec<Option<&AnnotationVector>> = children
        .iter()
        .map(|c| if subplan.contains(c) { anns.get(c) } else { None })
        .collect();
    check_local_partial(catalog, operator, op, &anns[&operator], &child_anns)
}

fn reproduces(
    plan: &Plan,
    catalog: &Catalog,
    subplan: &BTreeSet<NodeId>,
    witness: &Witness,
) -> bool {
    match reproduce_on(plan, catalog, subplan, witness.at_operator) {
        CheckOutcome::Fail(w) => {
            w.family == witness.family && w.evidence == witness.evidence
        }
        _ => false,
    }
}

fn descendants(plan: &Plan, of: NodeId) -> BTreeSet<NodeId> {
    let mut out = BTreeSet::new();
    let mut stack = vec![of];
    while let Some(id) = stack.pop() {
        if out.insert(id) {
            if let Some(node) = plan.node(id) {
                stack.extend(node.children().iter().copied());
            }
        }
    }
    out
}

/// Shrink a witness into a minimal certificate: start from the sink's full
/// descendant cone and greedily delete nodes whose removal keeps the
/// violation reproducible. The result is 1-minimal: deleting any single
/// remaining non-sink node makes the re-check fail.
pub fn minimal_certificate(
    plan: &Plan,
    witness: &Witness,
    catalog: &Catalog,
) -> Certificate {
    let operator = witness.at_operator;
    let mut subplan = descendants(plan, operator);
    debug_assert!(
        reproduces(plan, catalog, &subplan, witness),
        "witness must reproduce on the full descendant cone"
    );
    loop {
        let mut shrunk = false;
        let candidates: Vec<NodeId> =
            subplan.iter().copied().filter(|id| *id != operator).collect();
        for id in candidates {
            let mut attempt = subplan.clone();
            attempt.remove(&id);
            if reproduces(plan, catalog, &attempt, witness) {
                subplan = attempt;
                shrunk = true;
            }
        }
        if !shrunk {
            break;
        }
    }
    let unshrunk = subplan.len() == plan.len();
    Certificate {
        subplan,
        operator,
        family: witness.family,
        witness: witness.clone(),
        unshrunk,
    }
}

/// Result of certificate verification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerifyResult {
    Valid,
    Invalid(String),
}

impl VerifyResult {
    pub fn is_valid(&self) -> bool {
        matches!(self, VerifyResult::Valid)
    }
}

/// Re-check a certificate against its plan: ids must resolve, the operator
/// must be the unique sink of the subplan, re-annotating the subplan from its
/// leaves must reproduce the witness, and the subplan must be 1-minimal.
/// Polynomial in the subplan size.
pub fn verify_certificate(
    cert: &Certificate,
    plan: &Plan,
    catalog: &Catalog,
) -> VerifyResult {
    for id in &cert.subplan {
        if plan.node(*id).is_none() {
            return VerifyResult::Invalid(format!("dangling node id {id}"));
        }
    }
    if plan.node(cert.operator).is_none() {
        return VerifyResult::Invalid(format!("dangling operator id {}", cert.operator));
    }
    if !cert.subplan.contains(&cert.operator) {
        return VerifyResult::Invalid("operator is not part of the subplan".into());
    }
    if cert.family != cert.witness.family {
        return VerifyResult::Invalid("certificate family disagrees with its witness".into());
    }
    if cert.witness.at_operator != cert.operator {
        return VerifyResult::Invalid("witness is anchored at a different operator".into());
    }
    // unique sink: every non-operator member has a parent inside the subplan
    // and the operator has none
    for id in &cert.subplan {
        let has_parent_inside = cert.subplan.iter().any(|p| {
            plan.node(*p)
                .map(|n| n.children().contains(id))
                .unwrap_or(false)
        });
        if *id == cert.operator {
            if has_parent_inside {
                return VerifyResult::Invalid("operator is not a sink of the subplan".into());
            }
        } else if !has_parent_inside {
            return VerifyResult::Invalid(format!("node {id} is a second sink"));
        }
    }
    if !reproduces(plan, catalog, &cert.subplan, &cert.witness) {
        return VerifyResult::Invalid("subplan does not reproduce the witness".into());
    }
    for id in cert.subplan.iter().copied().filter(|id| *id != cert.operator) {
        let mut attempt = cert.subplan.clone();
        attempt.remove(&id);
        if reproduces(plan, catalog, &attempt, &cert.witness) {
            return VerifyResult::Invalid(format!(
                "not minimal: node {id} is redundant"
            ));
        }
    }
    VerifyResult::Valid
}

/// Collection kinds augmented with nothing; convenience passthrough so
/// callers holding a catalog don't need the algebra import.
pub fn leaf_kinds(catalog: &Catalog) -> CollectionKinds {
    catalog.leaf_kinds()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn catalog() -> Catalog {
        fixtures::ssci_catalog()
    }

    fn ann_of(plan: &Plan, catalog: &Catalog) -> BTreeMap<NodeId, AnnotationVector> {
        annotate_plan(plan, catalog).unwrap()
    }

    fn doc_cast_plan(map: &str) -> Plan {
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
                map,
            ),
            &[topk],
        );
        p.set_root(cast);
        p
    }

    #[test]
    fn missing_mapping_is_a_type_witness() {
        let mut cat = catalog();
        cat.schema.mappings.clear();
        let plan = doc_cast_plan("docid->sid");
        let (_, witnesses) = plan_witnesses(&plan, &cat).unwrap();
        assert_eq!(witnesses.len(), 1);
        let w = &witnesses[0];
        assert_eq!(w.family, ConstraintFamily::Type);
        assert_eq!(w.at_operator, NodeId(2));
        assert_eq!(w.evidence[0].facet, "mapping");
        assert_eq!(w.evidence[0].expected, "docid->sid");
        assert_eq!(w.evidence[0].actual, "absent");
    }

    #[test]
    fn label_misalignment_is_an_align_witness() {
        let cat = catalog();
        let mut p = Plan::new();
        let rel = p.add_leaf(0, "SuppliersRel");
        let cast = p.add_op(
            1,
            OperatorInstance::new(OperatorSymbol::RelToNodes).with_param(
                "label",
                ParamTag::Predicate,
                "Company",
            ),
            &[rel],
        );
        let traverse = p.add_op(
            2,
            OperatorInstance::new(OperatorSymbol::Traverse).with_param(
                "edge",
                ParamTag::Predicate,
                "Supplies",
            ),
            &[cast],
        );
        p.set_root(traverse);
        let (_, witnesses) = plan_witnesses(&p, &cat).unwrap();
        assert_eq!(witnesses.len(), 1);
        let w = &witnesses[0];
        assert_eq!(w.family, ConstraintFamily::Align);
        assert_eq!(w.evidence[0].expected, "Organization");
        assert_eq!(w.evidence[0].actual, "Company");
    }

    #[test]
    fn unbound_query_vector_is_a_bound_witness() {
        let cat = catalog();
        let mut p = Plan::new();
        let docs = p.add_leaf(0, "Documents");
        let topk = p.add_op(
            1,
            OperatorInstance::new(OperatorSymbol::TopK)
                .with_param("q", ParamTag::VectorRef, "?")
                .with_param("k", ParamTag::Integer, "10"),
            &[docs],
        );
        p.set_root(topk);
        let (_, witnesses) = plan_witnesses(&p, &cat).unwrap();
        assert_eq!(witnesses.len(), 1);
        let w = &witnesses[0];
        assert_eq!(w.family, ConstraintFamily::Bound);
        assert_eq!(w.evidence[0].expected, "q");
        assert_eq!(w.evidence[0].actual, "Unbound");
    }

    fn mismatched_spatial_plan() -> Plan {
        let mut p = Plan::new();
        let projects = p.add_leaf(0, "Projects");
        let geocode = p.add_op(
            1,
            OperatorInstance::new(OperatorSymbol::RelToGeom),
            &[projects],
        );
        let boundaries = p.add_leaf(2, "AdminBoundaries");
        let sjoin = p.add_op(
            3,
            OperatorInstance::new(OperatorSymbol::SpatialJoin).with_param(
                "pred",
                ParamTag::Predicate,
                "within",
            ),
            &[geocode, boundaries],
        );
        p.set_root(sjoin);
        p
    }

    #[test]
    fn crs_mismatch_is_a_crs_witness() {
        let cat = catalog();
        let (_, witnesses) = plan_witnesses(&mismatched_spatial_plan(), &cat).unwrap();
        assert_eq!(witnesses.len(), 1);
        let w = &witnesses[0];
        assert_eq!(w.family, ConstraintFamily::Crs);
        assert_eq!(w.evidence[0].expected, "EPSG:4326");
        assert_eq!(w.evidence[0].actual, "EPSG:3857");
    }

    #[test]
    fn granularity_conflict_is_a_temporal_witness() {
        let cat = catalog();
        let mut p = Plan::new();
        let projects = p.add_leaf(0, "Projects"); // CalendarWeek in the fixture catalog
        let cast = p.add_op(
            1,
            OperatorInstance::new(OperatorSymbol::RelToTemporal),
            &[projects],
        );
        let select = p.add_op(
            2,
            OperatorInstance::new(OperatorSymbol::TemporalSelect)
                .with_param("window", ParamTag::Predicate, "FY2024")
                .with_param("gran", ParamTag::Predicate, "FiscalQuarter"),
            &[cast],
        );
        p.set_root(select);
        let (_, witnesses) = plan_witnesses(&p, &cat).unwrap();
        assert_eq!(witnesses.len(), 1);
        let w = &witnesses[0];
        assert_eq!(w.family, ConstraintFamily::Temporal);
        assert_eq!(w.evidence[0].expected, "FiscalQuarter");
        assert_eq!(w.evidence[0].actual, "CalendarWeek");
    }

    #[test]
    fn repair_inserts_one_reprojection() {
        let cat = catalog();
        let plan = mismatched_spatial_plan();
        let repaired = repair_crs(&plan, &cat).unwrap();
        assert_eq!(repaired.op_count(), plan.op_count() + 1);
        let (_, witnesses) = plan_witnesses(&repaired, &cat).unwrap();
        assert!(witnesses.is_empty(), "{witnesses:?}");
        // converting the left input to the right input's CRS
        let inserted = repaired
            .nodes()
            .find_map(|(_, n)| n.op().filter(|o| o.symbol == OperatorSymbol::Reproject))
            .unwrap();
        assert_eq!(inserted.bound_param("from"), Some("EPSG:4326"));
        assert_eq!(inserted.bound_param("to"), Some("EPSG:3857"));
        // idempotence
        let again = repair_crs(&repaired, &cat).unwrap();
        assert_eq!(again.serialize().unwrap(), repaired.serialize().unwrap());
    }

    #[test]
    fn repair_leaves_aligned_plans_alone() {
        let mut cat = catalog();
        cat.schema.collections.get_mut("AdminBoundaries").unwrap().crs =
            Some("EPSG:4326".into());
        let plan = mismatched_spatial_plan();
        let repaired = repair_crs(&plan, &cat).unwrap();
        assert_eq!(repaired.serialize().unwrap(), plan.serialize().unwrap());
    }

    #[test]
    fn repair_without_declared_transform_inserts_nothing() {
        let mut cat = catalog();
        cat.schema.crs_transforms.clear();
        let plan = mismatched_spatial_plan();
        let repaired = repair_crs(&plan, &cat).unwrap();
        assert_eq!(repaired.serialize().unwrap(), plan.serialize().unwrap());
        let (_, witnesses) = plan_witnesses(&repaired, &cat).unwrap();
        assert_eq!(witnesses[0].family, ConstraintFamily::Crs);
    }

    #[test]
    fn repair_handles_chained_mismatches() {
        let cat = catalog();
        let mut p = Plan::new();
        let projects = p.add_leaf(0, "Projects");
        let geocode =
            p.add_op(1, OperatorInstance::new(OperatorSymbol::RelToGeom), &[projects]);
        let b1 = p.add_leaf(2, "AdminBoundaries");
        let j1 = p.add_op(
            3,
            OperatorInstance::new(OperatorSymbol::SpatialJoin).with_param(
                "pred",
                ParamTag::Predicate,
                "within",
            ),
            &[geocode, b1],
        );
        // j1 output carries the repaired right-hand CRS (3857); join again
        // with a fresh 4326 geocoded branch on the right
        let other = p.add_leaf(4, "Projects");
        let geocode2 =
            p.add_op(5, OperatorInstance::new(OperatorSymbol::RelToGeom), &[other]);
        let j2 = p.add_op(
            6,
            OperatorInstance::new(OperatorSymbol::SpatialJoin).with_param(
                "pred",
                ParamTag::Predicate,
                "touches",
            ),
            &[j1, geocode2],
        );
        p.set_root(j2);
        let repaired = repair_crs(&p, &cat).unwrap();
        let inserted = repaired.op_count() - p.op_count();
        assert_eq!(inserted, 2, "one reprojection per mismatched join");
        let again = repair_crs(&repaired, &cat).unwrap();
        assert_eq!(again.serialize().unwrap(), repaired.serialize().unwrap());
    }

    #[test]
    fn type_certificate_keeps_the_payload_chain() {
        let mut cat = catalog();
        cat.schema.mappings.clear();
        let plan = doc_cast_plan("docid->sid");
        let (_, witnesses) = plan_witnesses(&plan, &cat).unwrap();
        let cert = minimal_certificate(&plan, &witnesses[0], &cat);
        // sink, the retrieval feeding it, and the document source
        let expected: BTreeSet<NodeId> =
            [NodeId(0), NodeId(1), NodeId(2)].into_iter().collect();
        assert_eq!(cert.subplan, expected);
        assert_eq!(cert.operator, NodeId(2));
        assert!(!cert.unshrunk || plan.len() == cert.subplan.len());
        assert!(verify_certificate(&cert, &plan, &cat).is_valid());
    }

    #[test]
    fn bound_certificate_is_the_operator_alone() {
        let cat = catalog();
        let mut p = Plan::new();
        let docs = p.add_leaf(0, "Documents");
        let topk = p.add_op(
            1,
            OperatorInstance::new(OperatorSymbol::TopK)
                .with_param("q", ParamTag::VectorRef, "?")
                .with_param("k", ParamTag::Integer, "10"),
            &[docs],
        );
        p.set_root(topk);
        let (_, witnesses) = plan_witnesses(&p, &cat).unwrap();
        let cert = minimal_certificate(&p, &witnesses[0], &cat);
        assert_eq!(cert.subplan, [NodeId(1)].into_iter().collect());
        assert!(verify_certificate(&cert, &p, &cat).is_valid());
    }

    /// Exhaustive oracle: over all connected sub-DAGs of the plan that contain
    /// the sink, the certificate subplan must be one of minimum size among
    /// those reproducing the witness.
    fn exhaustive_minimal_sizes(
        plan: &Plan,
        witness: &Witness,
        catalog: &Catalog,
    ) -> usize {
        let ids: Vec<NodeId> = plan.nodes().map(|(id, _)| id).collect();
        assert!(ids.len() <= 8, "oracle is exponential");
        let mut best = usize::MAX;
        for mask in 0u32..(1 << ids.len()) {
            let subset: BTreeSet<NodeId> = ids
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, id)| *id)
                .collect();
            if !subset.contains(&witness.at_operator) {
                continue;
            }
            if reproduces(plan, catalog, &subset, witness) {
                best = best.min(subset.len());
            }
        }
        best
    }

    #[test]
    fn crs_certificate_matches_the_exhaustive_oracle() {
        let cat = catalog();
        // six-node chain with the CRS fault in the middle: two select stages
        // above the spatial join must stay out of the certificate
        let mut p = Plan::new();
        let projects = p.add_leaf(0, "Projects");
        let geocode =
            p.add_op(1, OperatorInstance::new(OperatorSymbol::RelToGeom), &[projects]);
        let boundaries = p.add_leaf(2, "AdminBoundaries");
        let sjoin = p.add_op(
            3,
            OperatorInstance::new(OperatorSymbol::SpatialJoin).with_param(
                "pred",
                ParamTag::Predicate,
                "within",
            ),
            &[geocode, boundaries],
        );
        let s1 = p.add_op(
            4,
            OperatorInstance::new(OperatorSymbol::SpatialSelect).with_param(
                "pred",
                ParamTag::Predicate,
                "big",
            ),
            &[sjoin],
        );
        let s2 = p.add_op(
            5,
            OperatorInstance::new(OperatorSymbol::SpatialKnn).with_param(
                "k",
                ParamTag::Integer,
                "3",
            ),
            &[s1],
        );
        p.set_root(s2);
        let (_, witnesses) = plan_witnesses(&p, &cat).unwrap();
        assert_eq!(witnesses[0].family, ConstraintFamily::Crs);
        let cert = minimal_certificate(&p, &witnesses[0], &cat);
        assert!(!cert.subplan.contains(&NodeId(4)));
        assert!(!cert.subplan.contains(&NodeId(5)));
        let best = exhaustive_minimal_sizes(&p, &witnesses[0], &cat);
        assert_eq!(cert.subplan.len(), best);
        assert!(verify_certificate(&cert, &p, &cat).is_valid());
    }

    #[test]
    fn verification_rejects_tampered_certificates() {
        let mut cat = catalog();
        cat.schema.mappings.clear();
        let plan = doc_cast_plan("docid->sid");
        let (_, witnesses) = plan_witnesses(&plan, &cat).unwrap();
        let cert = minimal_certificate(&plan, &witnesses[0], &cat);

        let mut family_swapped = cert.clone();
        family_swapped.family = ConstraintFamily::Align;
        assert!(!verify_certificate(&family_swapped, &plan, &cat).is_valid());

        let mut dropped = cert.clone();
        dropped.subplan.remove(&NodeId(1));
        assert!(!verify_certificate(&dropped, &plan, &cat).is_valid());

        let mut altered = cert.clone();
        altered.witness.evidence[0].actual = "present".into();
        altered.family = altered.witness.family;
        assert!(!verify_certificate(&altered, &plan, &cat).is_valid());

        let mut dangling = cert.clone();
        dangling.subplan.insert(NodeId(99));
        assert!(!verify_certificate(&dangling, &plan, &cat).is_valid());

        let mut padded = cert;
        // a redundant extra node must break minimality
        padded.subplan.insert(NodeId(1));
        padded.subplan.insert(NodeId(0));
        // (already present: add an unrelated node instead)
        let mut q = plan.clone();
        let extra = q.add_leaf(50, "Projects");
        let mut padded2 = padded.clone();
        padded2.subplan.insert(extra);
        assert!(!verify_certificate(&padded2, &q, &cat).is_valid());
    }

    #[test]
    fn witnesses_stay_linear_in_plan_size() {
        let mut cat = catalog();
        cat.schema.mappings.clear();
        let plan = doc_cast_plan("docid->sid");
        let (_, witnesses) = plan_witnesses(&plan, &cat).unwrap();
        assert!(witnesses.len() <= plan.op_count());
    }

    #[test]
    fn messages_follow_the_diagnostic_style() {
        let cat = catalog();
        let mut p = Plan::new();
        let rel = p.add_leaf(0, "SuppliersRel");
        let cast = p.add_op(
            1,
            OperatorInstance::new(OperatorSymbol::RelToNodes).with_param(
                "label",
                ParamTag::Predicate,
                "Company",
            ),
            &[rel],
        );
        let traverse = p.add_op(
            2,
            OperatorInstance::new(OperatorSymbol::Traverse).with_param(
                "edge",
                ParamTag::Predicate,
                "Supplies",
            ),
            &[cast],
        );
        p.set_root(traverse);
        let (_, witnesses) = plan_witnesses(&p, &cat).unwrap();
        let msg = witnesses[0].message(&p);
        assert!(msg.contains("Traversal infeasible"), "{msg}");
        assert!(msg.contains("Company"), "{msg}");
        assert!(msg.contains("Organization"), "{msg}");
    }
}
