//! Seeded synthetic workloads, scenario metrics, scaling inputs, and the two
//! baselines (naive enumeration, annotation-agnostic memoization).
//!
//! A scenario is controlled by three ratios: structural overlap (how much of
//! each candidate is shared skeleton), feasibility ratio (the fraction of
//! choice-point alternatives that are annotation-consistent), and engine
//! diversity (how many engines support each operator). The generator
//! derandomizes the fault count, so a ratio maps to an exact number of
//! faulted alternatives; fault families are drawn from a configurable weight
//! table, one constructor per constraint family.
//!
//! Identical config and seed produce a byte-identical workload.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::{
    NodeId, OperatorInstance, OperatorSymbol, ParamTag, Plan, PlanNode, UNBOUND_VALUE,
};
use crate::ambiguity::{
    Alternative, AmbiguousQuerySpec, ChoiceDimension, ChoicePoint, SpliceSite, HOLE,
};
use crate::catalog::{
    BinTable, Catalog, CollectionDef, EdgeDef, EngineDef, Granularity, TemplateDef, VectorDef,
};
use crate::feasibility::plan_witnesses;
use crate::forest::{build, BuildOptions, SizeStats};
use crate::labeling::{is_feasible, label};

fn default_domains() -> usize {
    3
}
fn default_engines() -> usize {
    4
}
fn default_weights() -> [u32; 7] {
    [1; 7]
}

/// Workload knobs for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Fraction of each plan that is shared skeleton.
    pub rho_s: f64,
    /// Fraction of alternatives that are annotation-consistent.
    pub rho_f: f64,
    /// Fraction of engines supporting each operator symbol.
    pub rho_e: f64,
    pub num_plans: u64,
    pub nodes_per_plan: u64,
    pub seed: u64,
    /// Distinct embedding domains (1 = uniform deterministic workload).
    #[serde(default = "default_domains")]
    pub domains: usize,
    #[serde(default = "default_engines")]
    pub engines: usize,
    /// Per-family fault weights in check order
    /// (TYPE, BOUND, ALIGN, CRS, PLACE, UNCERT, TEMPORAL).
    #[serde(default = "default_weights")]
    pub fault_weights: [u32; 7],
}

impl ScenarioConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Named presets reproducing the qualitative evaluation profile: moderate
/// pruning for s1-s3 and s5, heavy pruning for s4, and a 10x-plans / 2x-size
/// scale-up for s6. The ratio values are presets of this artifact, not
/// published numbers.
pub fn preset(name: &str) -> Option<ScenarioConfig> {
    let (rho_s, rho_f, rho_e, m, nbar, seed) = match name {
        "s1" => (0.08, 0.72, 0.50, 100, 25, 41),
        "s2" => (0.06, 0.72, 0.30, 100, 25, 42),
        "s3" => (0.12, 0.73, 0.70, 100, 25, 43),
        "s4" => (0.04, 0.24, 0.50, 100, 25, 44),
        "s5" => (0.04, 0.71, 0.90, 100, 25, 45),
        "s6" => (0.48, 0.62, 0.50, 1000, 50, 46),
        _ => return None,
    };
    Some(ScenarioConfig {
        rho_s,
        rho_f,
        rho_e,
        num_plans: m,
        nodes_per_plan: nbar,
        seed,
        domains: default_domains(),
        engines: default_engines(),
        fault_weights: default_weights(),
    })
}

pub fn preset_names() -> &'static [&'static str] {
    &["s1", "s2", "s3", "s4", "s5", "s6"]
}

#[derive(Debug, Clone, Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Spec(#[from] crate::ambiguity::SpecError),
    #[error(transparent)]
    Plan(#[from] crate::algebra::PlanError),
}

/// The seven fault constructors, in constraint-family check order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fault {
    MissingEdge,     // TYPE: traversal over an undeclared edge
    UnboundParam,    // BOUND
    DomainMismatch,  // ALIGN: query vector vs corpus domain
    CrsSkew,         // CRS: geometry inputs in different reference systems
    NoEngine,        // PLACE: operator no engine supports
    ApproxIntoExact, // UNCERT: eps-bounded ids into an exact-id operator
    GranularitySkew, // TEMPORAL
}

const FAULTS: [Fault; 7] = [
    Fault::MissingEdge,
    Fault::UnboundParam,
    Fault::DomainMismatch,
    Fault::CrsSkew,
    Fault::NoEngine,
    Fault::ApproxIntoExact,
    Fault::GranularitySkew,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Gadget {
    /// Relational select stages.
    Plain,
    /// Cast to documents, retrieval stages, cast back.
    Doc,
    /// Geocode, spatial join against stored boundaries, spatial stages.
    Geo,
    /// Cast to graph nodes, traversal hops, cast back.
    Graph,
    /// Document pair similarity (the operator no engine supports).
    Pair,
    /// Join against a relation with a different temporal granularity.
    Temporal,
}

fn sel(pred: &str) -> OperatorInstance {
    OperatorInstance::new(OperatorSymbol::Select).with_param("pred", ParamTag::Predicate, pred)
}

struct FragmentSpec {
    gadget: Gadget,
    fault: Option<Fault>,
    tag: String,
}

/// Build one alternative fragment of exactly `size` operators.
///
/// Every operator above the first per-alternative stage carries
/// per-alternative parameters (or a per-alternative input payload), so the
/// skeleton node above the splice site is the only point where derivations
/// fan out; recombining forest derivations can only reproduce members of the
/// candidate family. The faulting operator sits as low as its gadget allows,
/// and each fragment tops out with a projection onto a uniform schema so
/// skeleton nodes merge across alternatives.
fn build_fragment(spec: &FragmentSpec, size: u64, cp: usize, alt: usize) -> Plan {
    let mut plan = Plan::new();
    let mut next = 1_000u32;
    let mut id = |plan: &mut Plan, op: OperatorInstance, children: &[NodeId]| {
        next += 1;
        plan.add_op(next - 1, op, children)
    };
    let hole = plan.add_leaf(0, HOLE);
    let prefix = format!("cp{cp}a{alt}");
    let mut ops = 0u64;
    let mut top: NodeId;
    // stages between the gadget entry and the final projection
    let stage_budget = |used: u64| size.saturating_sub(used + 1);

    match spec.gadget {
        Gadget::Plain => {
            // any fault degraded onto the plain gadget manifests as an
            // unbound parameter
            let pred = if spec.fault.is_some() {
                UNBOUND_VALUE.to_string()
            } else {
                format!("{prefix}_f0")
            };
            top = id(&mut plan, sel(&pred), &[hole]);
            ops += 1;
            for i in 0..stage_budget(1) {
                top = id(&mut plan, sel(&format!("{prefix}_s{i}")), &[top]);
                ops += 1;
            }
        }
        Gadget::Doc => {
            let to_docs = OperatorInstance::new(OperatorSymbol::RelToDocs).with_param(
                "domain",
                ParamTag::Predicate,
                &spec.tag,
            );
            top = id(&mut plan, to_docs, &[hole]);
            let q = match spec.fault {
                Some(Fault::UnboundParam) => UNBOUND_VALUE.to_string(),
                Some(Fault::DomainMismatch) => format!("q_{prefix}_skew"),
                _ => format!("q_{prefix}"),
            };
            let topk = OperatorInstance::new(OperatorSymbol::TopK)
                .with_param("q", ParamTag::VectorRef, &q)
                .with_param("k", ParamTag::Integer, "10");
            top = id(&mut plan, topk, &[top]);
            for i in 0..stage_budget(3) {
                let kw = OperatorInstance::new(OperatorSymbol::Keyword).with_param(
                    "terms",
                    ParamTag::Predicate,
                    &format!("{prefix}_t{i}"),
                );
                top = id(&mut plan, kw, &[top]);
            }
            let mut back = OperatorInstance::new(OperatorSymbol::DocsToRel).with_param(
                "map",
                ParamTag::Predicate,
                &format!("docid->ref_{prefix}"),
            );
            if spec.fault == Some(Fault::ApproxIntoExact) {
                back = back.with_param("det", ParamTag::Integer, "1");
            }
            top = id(&mut plan, back, &[top]);
            ops = size - 1;
        }
        Gadget::Geo => {
            top = id(&mut plan, OperatorInstance::new(OperatorSymbol::RelToGeom), &[hole]);
            let boundary = if spec.fault == Some(Fault::CrsSkew) {
                "RegionsSkewed"
            } else {
                "RegionsAligned"
            };
            let leaf = plan.add_leaf(1, boundary);
            let join = OperatorInstance::new(OperatorSymbol::SpatialJoin).with_param(
                "pred",
                ParamTag::Predicate,
                &format!("{prefix}_within"),
            );
            top = id(&mut plan, join, &[top, leaf]);
            for i in 0..stage_budget(3) {
                let stage = OperatorInstance::new(OperatorSymbol::SpatialSelect).with_param(
                    "pred",
                    ParamTag::Predicate,
                    &format!("{prefix}_g{i}"),
                );
                top = id(&mut plan, stage, &[top]);
            }
            let extract = OperatorInstance::new(OperatorSymbol::GeomToRel).with_param(
                "attr",
                ParamTag::Predicate,
                &format!("{prefix}_pt"),
            );
            top = id(&mut plan, extract, &[top]);
            ops = size - 1;
        }
        Gadget::Graph => {
            let cast = OperatorInstance::new(OperatorSymbol::RelToNodes).with_param(
                "label",
                ParamTag::Predicate,
                &format!("L_{prefix}"),
            );
            top = id(&mut plan, cast, &[hole]);
            let hops = stage_budget(2).max(1);
            for i in 0..hops {
                let edge = if i == 0 && spec.fault == Some(Fault::MissingEdge) {
                    format!("E_{prefix}_h{i}_missing")
                } else {
                    format!("E_{prefix}_h{i}")
                };
                let hop = OperatorInstance::new(OperatorSymbol::Traverse).with_param(
                    "edge",
                    ParamTag::Predicate,
                    &edge,
                );
                top = id(&mut plan, hop, &[top]);
            }
            let edges_leaf = plan.add_leaf(1, "GraphEdges");
            top = id(
                &mut plan,
                OperatorInstance::new(OperatorSymbol::GraphToRel),
                &[top, edges_leaf],
            );
            ops = size - 1;
        }
        Gadget::Pair => {
            let to_docs = OperatorInstance::new(OperatorSymbol::RelToDocs).with_param(
                "domain",
                ParamTag::Predicate,
                &spec.tag,
            );
            top = id(&mut plan, to_docs, &[hole]);
            let corpus = plan.add_leaf(1, "CorpusDocs");
            let pair = OperatorInstance::new(OperatorSymbol::SimJoin).with_param(
                "t",
                ParamTag::ThresholdBin,
                "<=0.9",
            );
            top = id(&mut plan, pair, &[top, corpus]);
            for i in 0..stage_budget(2) {
                top = id(&mut plan, sel(&format!("{prefix}_s{i}")), &[top]);
            }
            ops = size - 1;
        }
        Gadget::Temporal => {
            let side_leaf = plan.add_leaf(1, "QuarterlyRel");
            let side = id(&mut plan, sel(&format!("{prefix}_side")), &[side_leaf]);
            let join = OperatorInstance::new(OperatorSymbol::Join).with_param(
                "on",
                ParamTag::Predicate,
                &format!("{prefix}_key"),
            );
            top = id(&mut plan, join, &[hole, side]);
            for i in 0..stage_budget(2) {
                top = id(&mut plan, sel(&format!("{prefix}_s{i}")), &[top]);
            }
            ops = size - 1;
        }
    }

    // uniform output schema; the source marker keeps each alternative's
    // projection a distinct forest node so derivations only fan out at the
    // skeleton
    let project = OperatorInstance::new(OperatorSymbol::Project)
        .with_param("attrs", ParamTag::AttrList, "id")
        .with_param("src", ParamTag::Predicate, &prefix);
    top = id(&mut plan, project, &[top]);
    ops += 1;
    debug_assert_eq!(ops, size, "fragment size accounting");
    plan.set_root(top);
    plan
}

/// Minimum fragment sizes per gadget.
fn gadget_min(gadget: Gadget) -> u64 {
    match gadget {
        Gadget::Plain => 2,
        Gadget::Doc => 4,
        Gadget::Geo => 4,
        Gadget::Graph => 4,
        Gadget::Pair => 3,
        Gadget::Temporal => 3,
    }
}

fn gadget_for_fault(fault: Fault, room: u64) -> Gadget {
    let preferred = match fault {
        Fault::MissingEdge => Gadget::Graph,
        Fault::UnboundParam => Gadget::Doc,
        Fault::DomainMismatch => Gadget::Doc,
        Fault::ApproxIntoExact => Gadget::Doc,
        Fault::CrsSkew => Gadget::Geo,
        Fault::NoEngine => Gadget::Pair,
        Fault::GranularitySkew => Gadget::Temporal,
    };
    if room >= gadget_min(preferred) {
        preferred
    } else {
        Gadget::Plain // degrades to an unbound-parameter fault
    }
}

/// Generate the workload: an ambiguous spec whose expansion yields exactly
/// `num_plans` candidates of exactly `nodes_per_plan` operators, plus the
/// catalog that annotates it.
pub fn generate(config: &ScenarioConfig) -> Result<(AmbiguousQuerySpec, Catalog), BenchError> {
    if config.num_plans < 1 || config.nodes_per_plan < 1 {
        return Err(BenchError::Config("num_plans and nodes_per_plan must be >= 1".into()));
    }
    for (name, v) in [
        ("rho_s", config.rho_s),
        ("rho_f", config.rho_f),
        ("rho_e", config.rho_e),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(BenchError::Config(format!("{name} must lie in [0, 1]")));
        }
    }
    let nbar = config.nodes_per_plan;
    let skeleton_size = ((config.rho_s * nbar as f64).round() as u64).max(1);
    if nbar < skeleton_size + 2 {
        return Err(BenchError::Config(format!(
            "nodes_per_plan {} is below the skeleton size {} implied by rho_s (need 2 spare operators)",
            nbar, skeleton_size
        )));
    }
    let frag_size = nbar - skeleton_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // skeleton: a select chain over the base relation
    let mut skeleton = Plan::new();
    let leaf = skeleton.add_leaf(0, "Base");
    let mut prev = leaf;
    for i in 0..skeleton_size {
        prev = skeleton.add_op(i as u32 + 1, sel(&format!("sk{i}")), &[prev]);
    }
    skeleton.set_root(prev);

    // one choice point with num_plans alternatives, spliced on the lowest edge
    let site = SpliceSite { node: NodeId(1), slot: 0 };
    let total_alts = config.num_plans as usize;
    let fault_count = ((1.0 - config.rho_f) * total_alts as f64).round() as usize;
    let mut faulted: Vec<bool> = (0..total_alts).map(|i| i < fault_count).collect();
    faulted.shuffle(&mut rng);

    let weights = config.fault_weights;
    let weight_total: u32 = weights.iter().sum::<u32>().max(1);
    let draw_fault = |rng: &mut ChaCha8Rng| -> Fault {
        let mut pick = rng.gen_range(0..weight_total);
        for (i, w) in weights.iter().enumerate() {
            if pick < *w {
                return FAULTS[i];
            }
            pick -= w;
        }
        FAULTS[0]
    };

    let clean_pool: &[Gadget] = if config.domains <= 1 || frag_size < 4 {
        &[Gadget::Plain]
    } else {
        &[Gadget::Plain, Gadget::Doc, Gadget::Geo, Gadget::Graph]
    };

    let mut alternatives = Vec::with_capacity(total_alts);
    for alt in 0..total_alts {
        let fault = if faulted[alt] { Some(draw_fault(&mut rng)) } else { None };
        let gadget = match fault {
            Some(f) => gadget_for_fault(f, frag_size),
            None => clean_pool[rng.gen_range(0..clean_pool.len())],
        };
        let domain = rng.gen_range(0..config.domains.max(1));
        let frag = FragmentSpec { gadget, fault, tag: format!("dom{domain}") };
        let fragment = build_fragment(&frag, frag_size, 0, alt);
        alternatives.push(Alternative { site: None, fragment });
    }
    let spec = AmbiguousQuerySpec {
        skeleton,
        choice_points: vec![ChoicePoint {
            dimension: ChoiceDimension::PredicateInterpretation,
            label: "realization".to_string(),
            site,
            alternatives,
        }],
    };

    let catalog = synth_catalog(config, &spec, &mut rng);
    spec.validate(&catalog.leaf_kinds())?;
    Ok((spec, catalog))
}

/// Catalog for a generated spec: base collections, declarations scanned from
/// the fragments' own parameters, and an engine map where each used symbol is
/// supported by `max(1, round(rho_e * engines))` engines.
fn synth_catalog(
    config: &ScenarioConfig,
    spec: &AmbiguousQuerySpec,
    rng: &mut ChaCha8Rng,
) -> Catalog {
    let mut cat = Catalog::default();
    cat.schema.collections.insert(
        "Base".into(),
        CollectionDef {
            kind: crate::algebra::DataKind::Relation,
            engine: "engine0".into(),
            attributes: vec!["id".into(), "a".into(), "b".into()],
            label: None,
            geometry: None,
            crs: Some("EPSG:4326".into()),
            granularity: Some(Granularity::CalendarWeek),
            units: None,
            id_attr: None,
            domain: None,
            tags: Vec::new(),
        },
    );
    let geometry = |crs: &str| CollectionDef {
        kind: crate::algebra::DataKind::Geometry,
        engine: "engine0".into(),
        attributes: Vec::new(),
        label: None,
        geometry: Some("Polygon".into()),
        crs: Some(crs.into()),
        granularity: None,
        units: None,
        id_attr: None,
        domain: None,
        tags: Vec::new(),
    };
    cat.schema.collections.insert("RegionsAligned".into(), geometry("EPSG:4326"));
    cat.schema.collections.insert("RegionsSkewed".into(), geometry("EPSG:3857"));
    cat.schema.collections.insert(
        "GraphEdges".into(),
        CollectionDef {
            kind: crate::algebra::DataKind::Edges,
            engine: "engine0".into(),
            attributes: Vec::new(),
            label: Some("Linked".into()),
            geometry: None,
            crs: None,
            granularity: None,
            units: None,
            id_attr: None,
            domain: None,
            tags: Vec::new(),
        },
    );
    cat.schema.collections.insert(
        "CorpusDocs".into(),
        CollectionDef {
            kind: crate::algebra::DataKind::Docs,
            engine: "engine0".into(),
            attributes: Vec::new(),
            label: None,
            geometry: None,
            crs: None,
            granularity: None,
            units: None,
            id_attr: Some("docid".into()),
            domain: Some("dom0".into()),
            tags: Vec::new(),
        },
    );
    cat.schema.collections.insert(
        "QuarterlyRel".into(),
        CollectionDef {
            kind: crate::algebra::DataKind::Relation,
            engine: "engine0".into(),
            attributes: vec!["id".into(), "quarter".into()],
            label: None,
            geometry: None,
            crs: None,
            granularity: Some(Granularity::FiscalQuarter),
            units: None,
            id_attr: None,
            domain: None,
            tags: Vec::new(),
        },
    );
    cat.schema.labels.insert("Linked".into(), Vec::new());

    declare_from_fragments(&mut cat, spec);

    // brackets for the approximate operators
    cat.bins.insert(
        "eps".into(),
        BinTable {
            bounds: vec![0.01, 0.05, 0.1],
            labels: vec!["e01".into(), "e05".into(), "e10".into()],
        },
    );
    cat.templates.insert(
        "topk".into(),
        TemplateDef {
            eps: Some("e05".into()),
            requires: vec!["q".into(), "k".into()],
            needs_index: None,
            accepts_approx: true,
        },
    );
    cat.templates.insert(
        "docs_to_rel".into(),
        TemplateDef {
            eps: None,
            requires: vec!["map".into()],
            needs_index: None,
            accepts_approx: true,
        },
    );
    cat.templates.insert(
        "traverse".into(),
        TemplateDef {
            eps: None,
            requires: vec!["edge".into()],
            needs_index: None,
            accepts_approx: true,
        },
    );

    // engine map: every symbol the workload uses, supported by a seeded
    // subset of engines; the similarity pair operator stays unsupported
    let mut used: BTreeSet<OperatorSymbol> = BTreeSet::new();
    let note_plan = |plan: &Plan, used: &mut BTreeSet<OperatorSymbol>| {
        for (_, node) in plan.nodes() {
            if let PlanNode::Op { op, .. } = node {
                used.insert(op.symbol);
            }
        }
    };
    note_plan(&spec.skeleton, &mut used);
    for cp in &spec.choice_points {
        for alt in &cp.alternatives {
            note_plan(&alt.fragment, &mut used);
        }
    }
    let engine_count = config.engines.max(1);
    for e in 0..engine_count {
        cat.engines.insert(format!("engine{e}"), EngineDef::default());
    }
    let per_symbol = ((config.rho_e * engine_count as f64).round() as usize)
        .clamp(1, engine_count);
    for sym in used {
        if sym == OperatorSymbol::SimJoin {
            continue;
        }
        let mut ids: Vec<usize> = (0..engine_count).collect();
        ids.shuffle(rng);
        for e in ids.into_iter().take(per_symbol) {
            cat.engines
                .get_mut(&format!("engine{e}"))
                .unwrap()
                .operators
                .insert(sym.token().to_string());
        }
    }
    cat
}

/// One evaluation row plus the scaling inputs used for the correlation
/// report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub name: String,
    pub stats: SizeStats,
    pub label_ms: f64,
    pub label_iterations: u64,
    pub feasible: bool,
    pub certificates: u64,
    /// Total operator instances across all candidates (m * nodes).
    pub total_nodes: u64,
    /// total_nodes per millisecond of build+label time.
    pub throughput: f64,
}

impl ScenarioRow {
    pub fn runtime_ms(&self) -> f64 {
        self.stats.build_ms + self.label_ms
    }
}

/// Generate, build, label, and report one scenario row. The stats identities
/// and the polynomial size bounds are asserted before the row is returned.
pub fn run_scenario(name: &str, config: &ScenarioConfig) -> Result<ScenarioRow, BenchError> {
    let (spec, catalog) = generate(config)?;
    let bound_k = spec
        .choice_points
        .iter()
        .map(|cp| {
            cp.alternatives
                .iter()
                .map(|a| a.fragment.op_count() as u64)
                .sum::<u64>()
        })
        .max()
        .unwrap_or(0)
        .max(spec.skeleton.op_count() as u64);
    let options = BuildOptions {
        bound_n: Some(spec.choice_points.len() as u64 + 1),
        bound_k: Some(bound_k),
        ..Default::default()
    };
    let out = build(spec.expand(None), &catalog, &options)?;
    let start = Instant::now();
    let labels = label(&out.forest);
    let verdict = is_feasible(&out.forest, &labels);
    let label_ms = start.elapsed().as_secs_f64() * 1000.0;

    let stats = &out.stats;
    assert_eq!(
        stats.pruned_unique,
        stats.unique_all - stats.unique_feasible,
        "pruned-unique identity"
    );
    let total = stats.num_plans as f64 * stats.nodes_per_plan;
    assert!((stats.packed_ratio_pre - stats.unique_all as f64 / total).abs() < 1e-9);
    assert!((stats.packed_ratio_post - stats.unique_feasible as f64 / total).abs() < 1e-9);
    stats.check_bounds().map_err(BenchError::Config)?;

    let total_nodes = (stats.num_plans as f64 * stats.nodes_per_plan).round() as u64;
    let runtime = stats.build_ms + label_ms;
    Ok(ScenarioRow {
        name: name.to_string(),
        stats: stats.clone(),
        label_ms,
        label_iterations: labels.iterations,
        feasible: verdict.is_feasible(),
        certificates: out.certificates.len() as u64,
        total_nodes,
        throughput: if runtime > 0.0 { total_nodes as f64 / runtime } else { 0.0 },
    })
}

/// Naive enumeration baseline: construct every candidate independently and
/// check it whole. The feasible set doubles as the packing-soundness oracle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NaiveReport {
    pub total_operator_instances: u64,
    pub runtime_ms: f64,
    pub feasible_count: u64,
    /// Canonical serializations of the feasible candidates.
    #[serde(skip)]
    pub feasible: BTreeSet<String>,
}

pub fn baseline_naive(candidates: &[Plan], catalog: &Catalog) -> NaiveReport {
    let start = Instant::now();
    let mut total = 0u64;
    let mut feasible = BTreeSet::new();
    for plan in candidates {
        total += plan.op_count() as u64;
        let ok = plan
            .validate_signature(&catalog.leaf_kinds())
            .map(|v| v.is_empty())
            .unwrap_or(false)
            && plan_witnesses(plan, catalog).map(|(_, w)| w.is_empty()).unwrap_or(false);
        if ok {
            feasible.insert(plan.serialize().expect("validated plan serializes"));
        }
    }
    NaiveReport {
        total_operator_instances: total,
        runtime_ms: start.elapsed().as_secs_f64() * 1000.0,
        feasible_count: feasible.len() as u64,
        feasible,
    }
}

/// Annotation-agnostic memoization baseline: operators merge on symbol and
/// schema-level signature alone (parameters and annotations ignored). A
/// merge is incorrect when the incoming occurrence's annotation vector is
/// incompatible with every vector already merged into the node.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MemoReport {
    pub memo_merges: u64,
    pub incorrect_merges: u64,
    /// Whole percent, rounded.
    pub incorrect_pct: u32,
}

pub fn baseline_memo_no_annotations(candidates: &[Plan], catalog: &Catalog) -> MemoReport {
    use std::collections::HashMap;
    type Key = (Option<String>, Vec<usize>, String);
    struct MemoNode {
        id: usize,
        is_op: bool,
        occurrences: u64,
        members: Vec<crate::catalog::AnnotationVector>,
    }
    let mut nodes: HashMap<Key, MemoNode> = HashMap::new();
    for plan in candidates {
        let anns = match crate::feasibility::annotate_plan(plan, catalog) {
            Ok(a) => a,
            Err(_) => continue,
        };
        let order = match plan.topological_order() {
            Ok(o) => o,
            Err(_) => continue,
        };
        let mut memo_ids: std::collections::BTreeMap<NodeId, usize> = Default::default();
        for id in order {
            let (key, is_op) = match plan.node(id).unwrap() {
                PlanNode::Leaf { collection } => {
                    ((None, Vec::new(), collection.clone()), false)
                }
                PlanNode::Op { op, children } => (
                    (
                        Some(op.symbol.token().to_string()),
                        children.iter().map(|c| memo_ids[c]).collect(),
                        op.symbol.kind().output_kind.token().to_string(),
                    ),
                    true,
                ),
            };
            let next_id = nodes.len();
            let ann = anns[&id].clone();
            let node = nodes.entry(key).or_insert_with(|| MemoNode {
                id: next_id,
                is_op,
                occurrences: 0,
                members: Vec::new(),
            });
            node.occurrences += 1;
            if !node.members.contains(&ann) {
                node.members.push(ann);
            }
            memo_ids.insert(id, node.id);
        }
    }
    // a merged node is an operator node that absorbed more than one
    // occurrence; it is incorrect when it conflates annotation classes that
    // cannot actually share (some member pair is incompatible)
    let mut merges = 0u64;
    let mut incorrect = 0u64;
    for node in nodes.values() {
        if !node.is_op || node.occurrences < 2 {
            continue;
        }
        merges += 1;
        let conflated = node.members.iter().enumerate().any(|(i, a)| {
            node.members[i + 1..].iter().any(|b| !a.compatible_with(b))
        });
        if conflated {
            incorrect += 1;
        }
    }
    let pct = if merges > 0 {
        ((incorrect as f64 / merges as f64) * 100.0).round() as u32
    } else {
        0
    };
    MemoReport { memo_merges: merges, incorrect_merges: incorrect, incorrect_pct: pct }
}

/// Debug view of the memo baseline: merged-node counts per symbol.
#[doc(hidden)]
pub fn baseline_memo_no_annotations_debug(
    candidates: &[Plan],
    catalog: &Catalog,
) -> Vec<(String, u64, u64)> {
    use std::collections::HashMap;
    type Key = (Option<String>, Vec<usize>, String);
    struct MemoNode {
        id: usize,
        is_op: bool,
        occurrences: u64,
        members: Vec<crate::catalog::AnnotationVector>,
    }
    let mut nodes: HashMap<Key, MemoNode> = HashMap::new();
    for plan in candidates {
        let anns = match crate::feasibility::annotate_plan(plan, catalog) {
            Ok(a) => a,
            Err(_) => continue,
        };
        let order = match plan.topological_order() {
            Ok(o) => o,
            Err(_) => continue,
        };
        let mut memo_ids: std::collections::BTreeMap<NodeId, usize> = Default::default();
        for id in order {
            let (key, is_op) = match plan.node(id).unwrap() {
                PlanNode::Leaf { collection } => {
                    ((None, Vec::new(), collection.clone()), false)
                }
                PlanNode::Op { op, children } => (
                    (
                        Some(op.symbol.token().to_string()),
                        children.iter().map(|c| memo_ids[c]).collect(),
                        op.symbol.kind().output_kind.token().to_string(),
                    ),
                    true,
                ),
            };
            let next_id = nodes.len();
            let ann = anns[&id].clone();
            let node = nodes.entry(key).or_insert_with(|| MemoNode {
                id: next_id,
                is_op,
                occurrences: 0,
                members: Vec::new(),
            });
            node.occurrences += 1;
            if !node.members.contains(&ann) {
                node.members.push(ann);
            }
            memo_ids.insert(id, node.id);
        }
    }
    let mut by_symbol: std::collections::BTreeMap<String, (u64, u64)> = Default::default();
    for (key, node) in &nodes {
        if !node.is_op || node.occurrences < 2 {
            continue;
        }
        let sym = key.0.clone().unwrap_or_default();
        let entry = by_symbol.entry(sym).or_default();
        entry.0 += 1;
        let conflated = node.members.iter().enumerate().any(|(i, a)| {
            node.members[i + 1..].iter().any(|b| !a.compatible_with(b))
        });
        if conflated {
            entry.1 += 1;
        }
    }
    by_symbol.into_iter().map(|(s, (m, i))| (s, m, i)).collect()
}

/// Side-by-side report: naive enumeration, annotation-agnostic memoization,
/// and the packed forest stats for the same candidate family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineReport {
    pub naive: NaiveReport,
    pub memo_no_ann: MemoReport,
    pub ppf: SizeStats,
}

pub fn compare_baselines(
    spec: &AmbiguousQuerySpec,
    catalog: &Catalog,
) -> Result<BaselineReport, BenchError> {
    let candidates: Vec<Plan> = spec.expand(None).collect();
    let naive = baseline_naive(&candidates, catalog);
    let memo_no_ann = baseline_memo_no_annotations(&candidates, catalog);
    let out = build(candidates, catalog, &BuildOptions::default())?;
    Ok(BaselineReport { naive, memo_no_ann, ppf: out.stats })
}

/// Pearson correlation coefficient; 0 when either side is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx.sqrt() * vy.sqrt())
}

/// The six correlation pairs of the scaling analysis, computed over a set of
/// scenario rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pairs: Vec<CorrelationPair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationPair {
    pub x: String,
    pub y: String,
    pub r: f64,
    pub points: Vec<(f64, f64)>,
}

pub fn correlation_report(rows: &[ScenarioRow]) -> CorrelationReport {
    let pruned: Vec<f64> = rows.iter().map(|r| r.stats.pruned_unique as f64).collect();
    let feas: Vec<f64> = rows.iter().map(|r| r.stats.unique_feasible as f64).collect();
    let all: Vec<f64> = rows.iter().map(|r| r.stats.unique_all as f64).collect();
    let total: Vec<f64> = rows.iter().map(|r| r.total_nodes as f64).collect();
    let runtime: Vec<f64> = rows.iter().map(|r| r.runtime_ms()).collect();
    let thpt: Vec<f64> = rows.iter().map(|r| r.throughput).collect();
    let mk = |x: &str, xs: &[f64], y: &str, ys: &[f64]| CorrelationPair {
        x: x.to_string(),
        y: y.to_string(),
        r: pearson(xs, ys),
        points: xs.iter().copied().zip(ys.iter().copied()).collect(),
    };
    CorrelationReport {
        pairs: vec![
            mk("unique_feasible", &feas, "pruned_unique", &pruned),
            mk("unique_feasible", &feas, "runtime_ms", &runtime),
            mk("unique_all", &all, "throughput", &thpt),
            mk("unique_all", &all, "runtime_ms", &runtime),
            mk("unique_all", &all, "unique_feasible", &feas),
            mk("total_nodes", &total, "runtime_ms", &runtime),
        ],
    }
}

/// Small random multi-choice-point specs for the packing-soundness oracle:
/// up to `max_cps` choice points with up to `max_alts` alternatives each,
/// fragments of 2-5 operators, roughly a third of the alternatives faulted.
pub fn random_small_spec(
    seed: u64,
    max_cps: usize,
    max_alts: usize,
) -> (AmbiguousQuerySpec, Catalog) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
    let cps = rng.gen_range(1..=max_cps.max(1));
    let skeleton_size = cps as u64 + rng.gen_range(0..2);

    let mut skeleton = Plan::new();
    let leaf = skeleton.add_leaf(0, "Base");
    let mut prev = leaf;
    for i in 0..skeleton_size {
        prev = skeleton.add_op(i as u32 + 1, sel(&format!("sk{i}")), &[prev]);
    }
    skeleton.set_root(prev);

    let mut choice_points = Vec::new();
    for cp in 0..cps {
        let alts = rng.gen_range(1..=max_alts.max(1));
        let mut alternatives = Vec::new();
        for alt in 0..alts {
            let frag_size = rng.gen_range(2..=5u64);
            let fault = if rng.gen_bool(0.35) {
                Some(FAULTS[rng.gen_range(0..FAULTS.len())])
            } else {
                None
            };
            let gadget = match fault {
                Some(f) => gadget_for_fault(f, frag_size),
                None => {
                    if frag_size >= 4 {
                        [Gadget::Plain, Gadget::Doc, Gadget::Geo, Gadget::Graph]
                            [rng.gen_range(0..4)]
                    } else {
                        Gadget::Plain
                    }
                }
            };
            let domain = rng.gen_range(0..2u32);
            let frag = FragmentSpec { gadget, fault, tag: format!("dom{domain}") };
            let fragment = build_fragment(&frag, frag_size, cp, alt);
            alternatives.push(Alternative { site: None, fragment });
        }
        choice_points.push(ChoicePoint {
            dimension: ChoiceDimension::PredicateInterpretation,
            label: format!("cp{cp}"),
            site: SpliceSite { node: NodeId(cp as u32 + 1), slot: 0 },
            alternatives,
        });
    }
    let spec = AmbiguousQuerySpec { skeleton, choice_points };
    let config = ScenarioConfig {
        rho_s: 0.3,
        rho_f: 0.65,
        rho_e: 0.6,
        num_plans: spec.candidate_count(),
        nodes_per_plan: skeleton_size + 4,
        seed,
        domains: 2,
        engines: 3,
        fault_weights: default_weights(),
    };
    let catalog = synth_catalog(&config, &spec, &mut rng);
    (spec, catalog)
}

/// Declare mappings, query vectors, labels, and edges for everything the
/// fragments reference. Fault conventions: `_skew` vectors get a tag nothing
/// is compatible with, `_missing` edges stay undeclared.
fn declare_from_fragments(cat: &mut Catalog, spec: &AmbiguousQuerySpec) {
    for cp in &spec.choice_points {
        for alt in &cp.alternatives {
            // the corpus domain this fragment casts into, if any
            let mut domain: Option<String> = None;
            let mut node_label: Option<String> = None;
            for (_, node) in alt.fragment.nodes() {
                if let PlanNode::Op { op, .. } = node {
                    match op.symbol {
                        OperatorSymbol::RelToDocs => {
                            domain = op.bound_param("domain").map(str::to_string);
                        }
                        OperatorSymbol::RelToNodes => {
                            node_label = op.bound_param("label").map(str::to_string);
                        }
                        _ => {}
                    }
                }
            }
            // traversal hops consume the label the previous hop produced;
            // hop outputs are per-alternative so downstream casts stay
            // distinct across alternatives
            let start_label = node_label.clone().unwrap_or_else(|| "Linked".to_string());
            let hop_label = format!("{start_label}_hop");
            let mut flowing_label = start_label;
            let order = match alt.fragment.topological_order() {
                Ok(o) => o,
                Err(_) => continue,
            };
            for id in order {
                let op = match alt.fragment.node(id) {
                    Some(PlanNode::Op { op, .. }) => op,
                    _ => continue,
                };
                match op.symbol {
                    OperatorSymbol::DocsToRel => {
                        if let Some(m) = op.bound_param("map") {
                            if !cat.has_mapping(m) {
                                cat.schema.mappings.push(m.to_string());
                            }
                        }
                    }
                    OperatorSymbol::TopK => {
                        if let Some(q) = op.bound_param("q") {
                            let tag = if q.ends_with("_skew") {
                                format!("skew_{q}")
                            } else {
                                domain.clone().unwrap_or_else(|| "dom0".to_string())
                            };
                            cat.schema.vectors.insert(q.to_string(), VectorDef { tag });
                        }
                    }
                    OperatorSymbol::RelToNodes => {
                        if let Some(l) = op.bound_param("label") {
                            cat.schema.labels.entry(l.to_string()).or_default();
                        }
                    }
                    OperatorSymbol::Traverse => {
                        if let Some(e) = op.bound_param("edge") {
                            if !e.ends_with("_missing") {
                                let from = flowing_label.clone();
                                let to = hop_label.clone();
                                cat.schema.labels.entry(from.clone()).or_default();
                                cat.schema.labels.entry(to.clone()).or_default();
                                cat.schema
                                    .edges
                                    .insert(e.to_string(), EdgeDef { from, to: to.clone() });
                                flowing_label = to;
                            } else {
                                flowing_label = hop_label.clone();
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::extract_feasible;

    #[test]
    fn generation_is_reproducible() {
        let config = preset("s1").unwrap();
        let (a, _) = generate(&config).unwrap();
        let (b, _) = generate(&config).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn full_feasibility_means_no_pruning() {
        let mut config = preset("s1").unwrap();
        config.rho_f = 1.0;
        config.num_plans = 30;
        let (spec, catalog) = generate(&config).unwrap();
        let out = build(spec.expand(None), &catalog, &BuildOptions::default()).unwrap();
        assert_eq!(out.certificates.len(), 0);
        assert_eq!(out.stats.pruned_unique, 0);
    }

    #[test]
    fn zero_overlap_means_no_sharing() {
        let mut config = preset("s1").unwrap();
        config.rho_s = 0.0;
        config.rho_f = 1.0;
        config.num_plans = 40;
        let (spec, catalog) = generate(&config).unwrap();
        let out = build(spec.expand(None), &catalog, &BuildOptions::default()).unwrap();
        // a one-operator skeleton is the only shared part
        assert!(out.stats.packed_ratio_pre > 0.9, "PkA = {}", out.stats.packed_ratio_pre);
    }

    #[test]
    fn candidate_counts_and_sizes_are_exact() {
        let config = preset("s1").unwrap();
        let (spec, _) = generate(&config).unwrap();
        assert_eq!(spec.candidate_count(), config.num_plans);
        for plan in spec.expand(Some(10)) {
            assert_eq!(plan.op_count() as u64, config.nodes_per_plan);
        }
    }

    #[test]
    fn low_feasibility_prunes_heavily() {
        let config = preset("s4").unwrap();
        let row = run_scenario("s4", &config).unwrap();
        let ratio = row.stats.pruned_unique as f64 / row.stats.unique_all as f64;
        assert!((0.5..=0.85).contains(&ratio), "PrU/UniqA = {ratio}");
    }

    #[test]
    fn moderate_feasibility_prunes_moderately() {
        for name in ["s1", "s2", "s3", "s5"] {
            let config = preset(name).unwrap();
            let row = run_scenario(name, &config).unwrap();
            let ratio = row.stats.pruned_unique as f64 / row.stats.unique_all as f64;
            assert!((0.15..=0.40).contains(&ratio), "{name}: PrU/UniqA = {ratio}");
        }
    }

    #[test]
    fn single_domain_unfaulted_workload_has_zero_incorrect_merges() {
        let mut config = preset("s1").unwrap();
        config.rho_f = 1.0;
        config.domains = 1;
        config.num_plans = 30;
        let (spec, catalog) = generate(&config).unwrap();
        let candidates: Vec<Plan> = spec.expand(None).collect();
        let report = baseline_memo_no_annotations(&candidates, &catalog);
        assert!(report.memo_merges > 0);
        assert_eq!(report.incorrect_merges, 0);
        assert_eq!(report.incorrect_pct, 0);
    }

    #[test]
    fn mixed_domain_workload_has_incorrect_merges_in_band() {
        let mut config = preset("s1").unwrap();
        config.num_plans = 60;
        for seed in 0..3 {
            let (spec, catalog) = generate(&config.clone().with_seed(seed)).unwrap();
            let candidates: Vec<Plan> = spec.expand(None).collect();
            let report = baseline_memo_no_annotations(&candidates, &catalog);
            assert!(report.memo_merges > 0);
            let pct = report.incorrect_pct;
            assert!((20..=60).contains(&pct), "seed {seed}: {pct}% incorrect");
        }
    }

    #[test]
    fn memo_percentage_identity() {
        let r = MemoReport { memo_merges: 26, incorrect_merges: 12, incorrect_pct: 0 };
        let pct = ((r.incorrect_merges as f64 / r.memo_merges as f64) * 100.0).round() as u32;
        assert_eq!(pct, 46);
    }

    #[test]
    fn naive_feasible_set_matches_extraction() {
        let mut config = preset("s1").unwrap();
        config.num_plans = 12;
        let (spec, catalog) = generate(&config).unwrap();
        let candidates: Vec<Plan> = spec.expand(None).collect();
        let naive = baseline_naive(&candidates, &catalog);
        let out = build(candidates, &catalog, &BuildOptions::default()).unwrap();
        let labels = label(&out.forest);
        let (plans, _) = extract_feasible(&out.forest, &labels, None);
        let extracted: BTreeSet<String> =
            plans.iter().map(|p| p.serialize().unwrap()).collect();
        assert_eq!(extracted, naive.feasible);
    }

    #[test]
    fn pruning_grows_when_feasibility_drops() {
        // majority vote across seeds to tolerate sampling noise
        let mut wins = 0;
        for seed in 0..10u64 {
            let mut high = preset("s1").unwrap().with_seed(seed);
            high.num_plans = 40;
            high.rho_f = 0.8;
            let mut low = high.clone();
            low.rho_f = 0.4;
            let a = run_scenario("high", &high).unwrap();
            let b = run_scenario("low", &low).unwrap();
            if b.stats.pruned_unique >= a.stats.pruned_unique {
                wins += 1;
            }
        }
        assert!(wins >= 6, "PrU should not shrink when rho_f drops ({wins}/10)");
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[2.0, 3.0]), 0.0);
    }

    #[test]
    fn random_small_specs_expand_and_validate() {
        for seed in 0..20 {
            let (spec, catalog) = random_small_spec(seed, 4, 3);
            spec.validate(&catalog.leaf_kinds()).unwrap();
            assert!(spec.candidate_count() <= 81);
            let n = spec.expand(None).count() as u64;
            assert_eq!(n, spec.candidate_count());
        }
    }
}
