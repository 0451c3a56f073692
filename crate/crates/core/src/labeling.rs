//! Bottom-up fixed-point feasibility labeling over a packed plan forest.
//!
//! Every node starts with its full label set: the member annotation vectors
//! of its equivalence class. A label survives at an operator node when some
//! OR derivation supports it, i.e. there is a joint choice of surviving child
//! labels (one per slot) that passes the same local predicates the builder
//! checks. Sweeps repeat until no set changes; sets only ever shrink, so the
//! fixed point is reached in at most the total label mass plus one sweeps and
//! does not depend on the sweep order.
//!
//! Roots left with an empty label set certify infeasibility; every pruned
//! label appends one witness per (node, family) to the log, which keeps the
//! certificate cost linear in the node count.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::algebra::NodeId;
use crate::feasibility::{
    check_local_partial, minimal_certificate, plan_witnesses, Certificate,
    CertificateRecord, CheckOutcome, ConstraintFamily, Witness,
};
use crate::forest::PackedPlanForest;

/// One pruned label with its explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedLabel {
    pub node: usize,
    pub label: usize,
    pub family: ConstraintFamily,
    pub witness: Witness,
}

/// Per-node surviving label sets plus run diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSets {
    /// Indexes into each node's class member list.
    pub sets: Vec<BTreeSet<usize>>,
    /// Sweeps executed, including the final no-change sweep.
    pub iterations: u64,
    /// Total label mass after each sweep; monotone non-increasing.
    pub masses: Vec<u64>,
    /// At most one witness per (node, family).
    pub pruned_log: Vec<PrunedLabel>,
}

impl LabelSets {
    pub fn total_mass(&self) -> u64 {
        self.sets.iter().map(|s| s.len() as u64).sum()
    }

    /// Initial label mass (the iteration bound is this plus one).
    pub fn initial_mass(forest: &PackedPlanForest) -> u64 {
        forest.nodes.iter().map(|n| n.class.len() as u64).sum()
    }
}

/// Does derivation `tuple` of node `n` support label `label` under the
/// current sets? True when some joint choice of surviving child labels
/// passes the local checks.
fn tuple_supports(
    forest: &PackedPlanForest,
    sets: &[BTreeSet<usize>],
    n: usize,
    label: usize,
    tuple: &[usize],
) -> Result<(), Witness> {
    let node = &forest.nodes[n];
    let op = node.op.as_ref().expect("operator node");
    let ann = &node.class[label];
    let at = NodeId(n as u32);
    let mut first_failure: Option<Witness> = None;
    // arity <= 2: enumerate the product of child label sets
    let child_choices: Vec<Vec<usize>> =
        tuple.iter().map(|c| sets[*c].iter().copied().collect()).collect();
    if child_choices.iter().any(|c| c.is_empty()) {
        return Err(first_failure.unwrap_or_else(|| Witness {
            family: ConstraintFamily::Place,
            evidence: vec![crate::feasibility::Evidence {
                facet: "labels".to_string(),
                expected: "nonempty child label set".to_string(),
                actual: "empty".to_string(),
            }],
            at_operator: at,
        }));
    }
    let mut combo = vec![0usize; tuple.len()];
    loop {
        let children: Vec<Option<&crate::catalog::AnnotationVector>> = tuple
            .iter()
            .enumerate()
            .map(|(slot, c)| Some(&forest.nodes[*c].class[child_choices[slot][combo[slot]]]))
            .collect();
        match check_local_partial(&forest.catalog, at, op, ann, &children) {
            CheckOutcome::Pass => return Ok(()),
            CheckOutcome::Fail(w) => {
                first_failure.get_or_insert(w);
            }
            CheckOutcome::Unknown => unreachable!("forest annotations are complete"),
        }
        // odometer over child label choices
        let mut i = combo.len();
        loop {
            if i == 0 {
                return Err(first_failure.expect("at least one combination failed"));
            }
            i -= 1;
            combo[i] += 1;
            if combo[i] < child_choices[i].len() {
                break;
            }
            combo[i] = 0;
        }
    }
}

/// Run labeling with an explicit sweep order (any permutation of the nodes is
/// legal; valid children-first orders converge in one sweep plus the
/// confirmation sweep).
pub fn label_with_order(forest: &PackedPlanForest, order: &[usize]) -> LabelSets {
    let mut sets: Vec<BTreeSet<usize>> = forest
        .nodes
        .iter()
        .map(|n| (0..n.class.len()).collect())
        .collect();
    let mut pruned_log: Vec<PrunedLabel> = Vec::new();
    let mut logged: BTreeSet<(usize, ConstraintFamily)> = BTreeSet::new();
    let mut masses = Vec::new();
    let mut iterations = 0u64;
    loop {
        iterations += 1;
        let mut changed = false;
        for &n in order {
            let node = &forest.nodes[n];
            if node.is_leaf() {
                continue;
            }
            let current: Vec<usize> = sets[n].iter().copied().collect();
            for label in current {
                let mut supported = false;
                let mut failure: Option<Witness> = None;
                for tuple in &node.derivations {
                    match tuple_supports(forest, &sets, n, label, tuple) {
                        Ok(()) => {
                            supported = true;
                            break;
                        }
                        Err(w) => {
                            failure.get_or_insert(w);
                        }
                    }
                }
                if node.derivations.is_empty() {
                    // operator node with no derivations cannot occur in a
                    // built forest; treat as unsupported
                    supported = false;
                }
                if !supported {
                    sets[n].remove(&label);
                    changed = true;
                    if let Some(w) = failure {
                        if logged.insert((n, w.family)) {
                            pruned_log.push(PrunedLabel {
                                node: n,
                                label,
                                family: w.family,
                                witness: w,
                            });
                        }
                    }
                }
            }
        }
        masses.push(sets.iter().map(|s| s.len() as u64).sum());
        if !changed {
            break;
        }
    }
    LabelSets { sets, iterations, masses, pruned_log }
}

/// Fixed-point labeling in children-first order.
pub fn label(forest: &PackedPlanForest) -> LabelSets {
    label_with_order(forest, &forest.topo_order())
}

/// The feasibility decision for a labeled forest.
#[derive(Debug, Clone, PartialEq)]
pub enum FeasibilityVerdict {
    Feasible,
    Infeasible(Vec<CertificateRecord>),
}

impl FeasibilityVerdict {
    pub fn is_feasible(&self) -> bool {
        matches!(self, FeasibilityVerdict::Feasible)
    }
}

/// Deepest pruned-log entry reachable from a root (the origin of the
/// conflict), if any.
fn reachable_pruned<'a>(
    forest: &PackedPlanForest,
    labels: &'a LabelSets,
    root: usize,
) -> Option<&'a PrunedLabel> {
    let mut reachable: BTreeSet<usize> = BTreeSet::new();
    let mut stack = vec![root];
    while let Some(n) = stack.pop() {
        if reachable.insert(n) {
            for t in &forest.nodes[n].derivations {
                stack.extend(t.iter().copied());
            }
        }
    }
    labels
        .pruned_log
        .iter()
        .filter(|p| reachable.contains(&p.node))
        .min_by_key(|p| (forest.nodes[p.node].level, p.node))
}

/// Materialize the first-derivation plan under a forest node (used to turn a
/// pruned label into a checkable certificate).
fn first_choice_plan(forest: &PackedPlanForest, top: usize) -> crate::algebra::Plan {
    let mut assignment: BTreeMap<usize, usize> = BTreeMap::new();
    let mut stack = vec![top];
    while let Some(n) = stack.pop() {
        if forest.nodes[n].is_leaf() || assignment.contains_key(&n) {
            continue;
        }
        assignment.insert(n, 0);
        stack.extend(forest.nodes[n].derivations[0].iter().copied());
    }
    forest.materialize(top, &assignment)
}

/// Decide feasibility: feasible iff the forest has roots and every root keeps
/// a nonempty label set. Otherwise certificates come from the build-time
/// records plus the pruned-label log of each empty root.
pub fn is_feasible(forest: &PackedPlanForest, labels: &LabelSets) -> FeasibilityVerdict {
    if forest.roots.is_empty() {
        return FeasibilityVerdict::Infeasible(forest.certificates.clone());
    }
    let mut certificates: Vec<CertificateRecord> = Vec::new();
    let mut seen: BTreeSet<(ConstraintFamily, Vec<crate::feasibility::Evidence>)> =
        forest.certificates.iter().map(|c| c.certificate.witness.content_key()).collect();
    let mut all_feasible = true;
    for &root in &forest.roots {
        if !labels.sets[root].is_empty() {
            continue;
        }
        all_feasible = false;
        if let Some(pruned) = reachable_pruned(forest, labels, root) {
            if !seen.insert(pruned.witness.content_key()) {
                continue;
            }
            // rebuild a concrete plan around the conflict and certify it there
            let plan = first_choice_plan(forest, root);
            match certificate_for_plan(&plan, forest) {
                Some(record) => certificates.push(record),
                None => {
                    certificates.push(whole_plan_certificate(&plan, &pruned.witness));
                }
            }
        }
    }
    if all_feasible {
        FeasibilityVerdict::Feasible
    } else {
        let mut all = forest.certificates.clone();
        all.extend(certificates);
        FeasibilityVerdict::Infeasible(all)
    }
}

fn certificate_for_plan(
    plan: &crate::algebra::Plan,
    forest: &PackedPlanForest,
) -> Option<CertificateRecord> {
    let (_, witnesses) = plan_witnesses(plan, &forest.catalog).ok()?;
    let witness = witnesses.first()?;
    let cert = minimal_certificate(plan, witness, &forest.catalog);
    let (canon, map) = plan.canonicalize().ok()?;
    let remapped = Certificate {
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
    CertificateRecord::new(remapped, &canon).ok()
}

fn whole_plan_certificate(
    plan: &crate::algebra::Plan,
    witness: &Witness,
) -> CertificateRecord {
    let subplan: BTreeSet<NodeId> = plan.nodes().map(|(id, _)| id).collect();
    let certificate = Certificate {
        subplan,
        operator: witness.at_operator,
        family: witness.family,
        witness: witness.clone(),
        unshrunk: true,
    };
    let message = certificate.witness.message(plan);
    CertificateRecord {
        certificate,
        message,
        plan: plan.serialize().unwrap_or_default(),
    }
}

/// Extract plans whose every derivation choice is supported by surviving
/// labels; each emitted plan is re-validated with the per-plan checks.
pub fn extract_feasible(
    forest: &PackedPlanForest,
    labels: &LabelSets,
    limit: Option<u64>,
) -> (Vec<crate::algebra::Plan>, bool) {
    // admit a derivation when some surviving label rides on it
    let admit = |n: usize, d: usize| -> bool {
        let node = &forest.nodes[n];
        if node.is_leaf() {
            return true;
        }
        let tuple = &node.derivations[d];
        labels.sets[n]
            .iter()
            .any(|&label| tuple_supports(forest, &labels.sets, n, label, tuple).is_ok())
    };
    let (plans, truncated) = forest.unpack_filtered(limit, &admit);
    let plans: Vec<crate::algebra::Plan> = plans
        .into_iter()
        .filter(|p| {
            plan_witnesses(p, &forest.catalog)
                .map(|(_, ws)| ws.is_empty())
                .unwrap_or(false)
        })
        .collect();
    (plans, truncated)
}

/// Serializable verdict document: decision, certificates, per-node label
/// counts, and run diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerdictDoc {
    pub feasible: bool,
    pub reason: Option<String>,
    pub certificates: Vec<CertificateRecord>,
    pub iterations: u64,
    pub label_summary: Vec<LabelCount>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelCount {
    pub node: usize,
    pub total: u64,
    pub surviving: u64,
}

pub fn verdict_doc(
    forest: &PackedPlanForest,
    labels: &LabelSets,
    verdict: &FeasibilityVerdict,
) -> VerdictDoc {
    let reason = if forest.roots.is_empty() { Some("no roots".to_string()) } else { None };
    VerdictDoc {
        feasible: verdict.is_feasible(),
        reason,
        certificates: match verdict {
            FeasibilityVerdict::Feasible => Vec::new(),
            FeasibilityVerdict::Infeasible(c) => c.clone(),
        },
        iterations: labels.iterations,
        label_summary: labels
            .sets
            .iter()
            .enumerate()
            .map(|(node, set)| LabelCount {
                node,
                total: forest.nodes[node].class.len() as u64,
                surviving: set.len() as u64,
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{OperatorInstance, OperatorSymbol, ParamTag, Plan};
    use crate::fixtures;
    use crate::forest::{build, BuildOptions};

    fn unchecked() -> BuildOptions {
        BuildOptions { checked: false, ..Default::default() }
    }

    fn select_chain(preds: &[&str]) -> Plan {
        let mut p = Plan::new();
        let mut prev = p.add_leaf(0, "SuppliersRel");
        for (i, pred) in preds.iter().enumerate() {
            prev = p.add_op(
                i as u32 + 1,
                OperatorInstance::new(OperatorSymbol::Select).with_param(
                    "pred",
                    ParamTag::Predicate,
                    pred,
                ),
                &[prev],
            );
        }
        p.set_root(prev);
        p
    }

    fn temporal_fault_plan() -> Plan {
        let mut p = Plan::new();
        let projects = p.add_leaf(0, "Projects");
        let cast =
            p.add_op(1, OperatorInstance::new(OperatorSymbol::RelToTemporal), &[projects]);
        let select = p.add_op(
            2,
            OperatorInstance::new(OperatorSymbol::TemporalSelect)
                .with_param("window", ParamTag::Predicate, "FY2024")
                .with_param("gran", ParamTag::Predicate, "FiscalQuarter"),
            &[cast],
        );
        p.set_root(select);
        p
    }

    #[test]
    fn compatible_chain_keeps_every_label() {
        let cat = fixtures::ssci_catalog();
        let out = build([select_chain(&["a", "b", "c"])], &cat, &unchecked()).unwrap();
        let labels = label(&out.forest);
        for (n, set) in labels.sets.iter().enumerate() {
            assert_eq!(set.len(), out.forest.nodes[n].class.len());
        }
        // one shrinking sweep never fires; the confirmation sweep ends it
        assert!(labels.iterations <= 2);
        assert!(is_feasible(&out.forest, &labels).is_feasible());
    }

    #[test]
    fn granularity_conflict_prunes_the_parent() {
        let cat = fixtures::ssci_catalog();
        let out = build([temporal_fault_plan()], &cat, &unchecked()).unwrap();
        let labels = label(&out.forest);
        let select_idx = out
            .forest
            .nodes
            .iter()
            .position(|n| n.symbol == Some(OperatorSymbol::TemporalSelect))
            .unwrap();
        assert!(labels.sets[select_idx].is_empty(), "conflicting label survives");
        let logged = labels
            .pruned_log
            .iter()
            .find(|p| p.node == select_idx)
            .expect("prune is logged");
        assert_eq!(logged.family, ConstraintFamily::Temporal);
        let verdict = is_feasible(&out.forest, &labels);
        match &verdict {
            FeasibilityVerdict::Infeasible(certs) => {
                assert_eq!(certs.len(), 1);
                assert_eq!(certs[0].certificate.family, ConstraintFamily::Temporal);
                assert!(certs[0].message.contains("Temporal granularity mismatch"));
            }
            FeasibilityVerdict::Feasible => panic!("conflict went undetected"),
        }
    }

    #[test]
    fn surviving_or_derivation_carries_the_label() {
        let cat = fixtures::ssci_catalog();
        // same root over two alternatives; one alternative is temporally broken
        let good = select_chain(&["alt_ok", "shared_root"]);
        let mut bad = Plan::new();
        let projects = bad.add_leaf(0, "Projects");
        let cast =
            bad.add_op(1, OperatorInstance::new(OperatorSymbol::RelToTemporal), &[projects]);
        let tsel = bad.add_op(
            2,
            OperatorInstance::new(OperatorSymbol::TemporalSelect)
                .with_param("window", ParamTag::Predicate, "FY2024")
                .with_param("gran", ParamTag::Predicate, "FiscalQuarter"),
            &[cast],
        );
        bad.set_root(tsel);
        let out = build([good, bad], &cat, &unchecked()).unwrap();
        let labels = label(&out.forest);
        let root_idx = out
            .forest
            .nodes
            .iter()
            .position(|n| {
                n.op.as_ref().and_then(|o| o.bound_param("pred")) == Some("shared_root")
            })
            .unwrap();
        assert!(!labels.sets[root_idx].is_empty());
        let verdict = is_feasible(&out.forest, &labels);
        assert!(!verdict.is_feasible(), "the broken root must be reported");
        // the feasible root still extracts
        let (plans, _) = extract_feasible(&out.forest, &labels, None);
        assert_eq!(plans.len(), 1);
    }

    #[test]
    fn confluence_across_sweep_orders() {
        let cat = fixtures::ssci_catalog();
        let family = fixtures::supplier_filters_family();
        let out = build(family.expand(None), &cat, &unchecked()).unwrap();
        let reference = label(&out.forest);
        let n = out.forest.nodes.len();
        // five deterministic shuffles (including reversed and strided orders)
        let orders: Vec<Vec<usize>> = vec![
            (0..n).rev().collect(),
            (0..n).map(|i| (i * 7 + 3) % n).collect::<std::collections::BTreeSet<_>>().into_iter().collect(),
            (0..n).collect(),
            (0..n).map(|i| (i * 13 + 5) % n).collect::<std::collections::BTreeSet<_>>().into_iter().collect(),
            {
                let mut v: Vec<usize> = (0..n).collect();
                v.rotate_left(n / 2);
                v
            },
        ];
        for order in orders {
            let run = label_with_order(&out.forest, &order);
            assert_eq!(run.sets, reference.sets, "fixed point depends on sweep order");
        }
    }

    #[test]
    fn masses_shrink_monotonically_within_the_bound() {
        let cat = fixtures::ssci_catalog();
        let out = build([temporal_fault_plan()], &cat, &unchecked()).unwrap();
        let labels = label(&out.forest);
        let bound = LabelSets::initial_mass(&out.forest) + 1;
        assert!(labels.iterations <= bound);
        for w in labels.masses.windows(2) {
            assert!(w[1] <= w[0], "label mass must never grow");
        }
    }

    #[test]
    fn checked_build_of_the_double_fault_reports_two_certificates() {
        let cat = fixtures::ssci_catalog();
        let out = build(
            [fixtures::funding_timeline_plan()],
            &cat,
            &BuildOptions::default(),
        )
        .unwrap();
        assert!(out.forest.roots.is_empty());
        let labels = label(&out.forest);
        match is_feasible(&out.forest, &labels) {
            FeasibilityVerdict::Infeasible(certs) => {
                assert_eq!(certs.len(), 2);
                let families: std::collections::BTreeSet<ConstraintFamily> =
                    certs.iter().map(|c| c.certificate.family).collect();
                assert!(families.contains(&ConstraintFamily::Align));
                assert!(families.contains(&ConstraintFamily::Temporal));
            }
            FeasibilityVerdict::Feasible => panic!("double fault went undetected"),
        }
    }

    #[test]
    fn extraction_matches_unpack_on_clean_forests() {
        let cat = fixtures::ssci_catalog();
        let family = fixtures::supplier_filters_family();
        let out = build(family.expand(None), &cat, &BuildOptions::default()).unwrap();
        let labels = label(&out.forest);
        let (extracted, _) = extract_feasible(&out.forest, &labels, None);
        let (unpacked, _) = out.forest.unpack(None);
        assert_eq!(extracted.len(), unpacked.len());
    }
}
