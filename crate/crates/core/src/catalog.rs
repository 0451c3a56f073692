//! Static catalogs and annotation derivation.
//!
//! A catalog bundles the three annotation sources: schema metadata (collection
//! payloads, CRS, label taxonomy, identifier mappings), the system catalog
//! (which engine supports which operator, index capabilities), and operator
//! templates (uncertainty profiles, required bindings). From these plus an
//! operator's parameters and its children's annotations we derive the
//! six-facet annotation vector attached to every plan node.
//!
//! Catalogs are immutable after load; annotation is a pure function of
//! `(operator, child annotations, catalog)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::{CollectionKinds, DataKind, OperatorInstance, OperatorSymbol};
use crate::digest::Digest;

/// Temporal granularity values for the reference-system facet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Granularity {
    Day,
    Week,
    CalendarWeek,
    FiscalQuarter,
    CalendarYear,
    FiscalYear,
}

impl Granularity {
    pub const ALL: [Granularity; 6] = [
        Granularity::Day,
        Granularity::Week,
        Granularity::CalendarWeek,
        Granularity::FiscalQuarter,
        Granularity::CalendarYear,
        Granularity::FiscalYear,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Granularity::Day => "Day",
            Granularity::Week => "Week",
            Granularity::CalendarWeek => "CalendarWeek",
            Granularity::FiscalQuarter => "FiscalQuarter",
            Granularity::CalendarYear => "CalendarYear",
            Granularity::FiscalYear => "FiscalYear",
        }
    }

    pub fn from_token(s: &str) -> Option<Granularity> {
        Granularity::ALL.into_iter().find(|g| g.token() == s)
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Schema-level payload carried by a node's output (and expected on inputs).
/// Semantic information (embedding domains, tags) deliberately lives in
/// `semantic_tags`, not here: the annotation-agnostic memo baseline merges on
/// this payload alone.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypePayload {
    /// Relation attribute names.
    Schema(Vec<String>),
    /// Graph node/edge label.
    Label(String),
    Paths,
    /// Document stream; `id_attr` names the identifier used by cross-model
    /// casts back to relations.
    Docs { id_attr: String },
    Geometry { geom: String },
    Interval,
    /// Derivation was impossible or the source sits outside the examined
    /// subplan.
    Unknown,
}

impl TypePayload {
    pub fn is_unknown(&self) -> bool {
        matches!(self, TypePayload::Unknown)
    }

    fn write_digest(&self, d: &mut Digest) {
        match self {
            TypePayload::Schema(attrs) => {
                d.write_str("schema");
                for a in attrs {
                    d.write_str(a);
                }
            }
            TypePayload::Label(l) => {
                d.write_str("label");
                d.write_str(l);
            }
            TypePayload::Paths => {
                d.write_str("paths");
            }
            TypePayload::Docs { id_attr } => {
                d.write_str("docs");
                d.write_str(id_attr);
            }
            TypePayload::Geometry { geom } => {
                d.write_str("geometry");
                d.write_str(geom);
            }
            TypePayload::Interval => {
                d.write_str("interval");
            }
            TypePayload::Unknown => {
                d.write_str("unknown");
            }
        }
    }
}

/// Per-parameter binding status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Binding {
    Bound,
    Unbound,
}

/// Reference-system facet: CRS code, temporal granularity, units. All
/// optional; absent means the facet does not apply to this node.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
pub struct RefSys {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub crs: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub granularity: Option<Granularity>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub units: Option<String>,
}

/// Uncertainty facet: deterministic, or approximate with a discretized
/// tolerance bin.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Uncertainty {
    Deterministic,
    EpsBounded { bin: String },
}

impl Uncertainty {
    pub fn is_approx(&self) -> bool {
        matches!(self, Uncertainty::EpsBounded { .. })
    }
}

/// Input/output type payloads of one operator occurrence. Slot `i` of
/// `inputs` is what the operator received on input `i`; `output` is what it
/// hands upward.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TypeProfile {
    pub inputs: Vec<TypePayload>,
    pub output: TypePayload,
}

/// The six-facet annotation vector attached to each operator occurrence.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AnnotationVector {
    pub type_profile: TypeProfile,
    pub binding: BTreeMap<String, Binding>,
    pub refsys: RefSys,
    /// Engine ids that can host this operator occurrence.
    pub placement: BTreeSet<String>,
    pub uncertainty: Uncertainty,
    pub semantic_tags: BTreeSet<String>,
}

impl AnnotationVector {
    /// Digest of every facet except placement. Two vectors with equal facet
    /// digests may merge into one forest node when their placement sets
    /// intersect.
    pub fn facet_digest(&self) -> u64 {
        let mut d = Digest::new();
        for p in &self.type_profile.inputs {
            p.write_digest(&mut d);
        }
        d.write_str("->");
        self.type_profile.output.write_digest(&mut d);
        for (name, b) in &self.binding {
            d.write_str(name);
            d.write_str(match b {
                Binding::Bound => "b",
                Binding::Unbound => "u",
            });
        }
        d.write_str(self.refsys.crs.as_deref().unwrap_or(""));
        d.write_str(self.refsys.granularity.map(|g| g.token()).unwrap_or(""));
        d.write_str(self.refsys.units.as_deref().unwrap_or(""));
        match &self.uncertainty {
            Uncertainty::Deterministic => d.write_str("det"),
            Uncertainty::EpsBounded { bin } => d.write_str(bin),
        };
        for t in &self.semantic_tags {
            d.write_str(t);
        }
        d.finish()
    }

    /// Equality on every facet except placement.
    pub fn non_placement_eq(&self, other: &AnnotationVector) -> bool {
        self.type_profile == other.type_profile
            && self.binding == other.binding
            && self.refsys == other.refsys
            && self.uncertainty == other.uncertainty
            && self.semantic_tags == other.semantic_tags
    }

    /// Compatible for merging: equal on every non-placement facet, placement
    /// intersection nonempty.
    pub fn compatible_with(&self, other: &AnnotationVector) -> bool {
        self.non_placement_eq(other)
            && self.placement.intersection(&other.placement).next().is_some()
    }

    pub fn has_unbound(&self) -> bool {
        self.binding.values().any(|b| *b == Binding::Unbound)
    }
}

#[derive(Debug, Clone, Error)]
pub enum CatalogError {
    #[error("catalog parse error: {0}")]
    Parse(String),
    #[error("label taxonomy is not a partial order: cycle through `{0}`")]
    LabelCycle(String),
    #[error("label `{child}` declares unknown parent `{parent}`")]
    UnknownParent { child: String, parent: String },
    #[error("bin table `{0}` is empty")]
    EmptyBinTable(String),
    #[error("bin table `{table}`: bounds and labels must be equal-length and ascending")]
    MalformedBinTable { table: String },
    #[error("unknown bin table `{0}`")]
    UnknownBinTable(String),
    #[error("value {value} is outside the nonnegative domain of bin table `{table}`")]
    NegativeValue { table: String, value: f64 },
    #[error("engine `{engine}` lists unknown operator token `{token}`")]
    UnknownOperatorToken { engine: String, token: String },
    #[error("io error: {0}")]
    Io(String),
}

/// Descriptor of one named base collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionDef {
    pub kind: DataKind,
    /// Engine hosting the collection.
    pub engine: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attributes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crs: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub granularity: Option<Granularity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_attr: Option<String>,
    /// Embedding/document domain, recorded as a semantic tag.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDef {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorDef {
    /// Embedding-domain tag of the registered query vector.
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EngineDef {
    #[serde(default)]
    pub operators: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub indexes: BTreeSet<String>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateDef {
    /// Default uncertainty: an eps-bin label, or absent for deterministic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<String>,
    /// Parameter names that must be bound for the operator to run.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub requires: Vec<String>,
    /// Index capability the hosting engine must provide.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub needs_index: Option<String>,
    /// Whether the operator tolerates eps-bounded input by default. Instances
    /// can tighten this with a `det=int:1` parameter.
    #[serde(default = "default_true")]
    pub accepts_approx: bool,
}

impl Default for TemplateDef {
    fn default() -> Self {
        TemplateDef { eps: None, requires: Vec::new(), needs_index: None, accepts_approx: true }
    }
}

/// Discretization table: ascending closed upper bounds with one label each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinTable {
    pub bounds: Vec<f64>,
    pub labels: Vec<String>,
}

/// Schema metadata section: collections, identifier mappings, the label
/// taxonomy (child -> parent list), edge declarations, registered query
/// vectors, declared CRS transforms, and tag compatibility pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SchemaSection {
    #[serde(default)]
    pub collections: BTreeMap<String, CollectionDef>,
    /// Mappings written as `"docid -> sid"` strings.
    #[serde(default)]
    pub mappings: Vec<String>,
    #[serde(default)]
    pub labels: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub edges: BTreeMap<String, EdgeDef>,
    #[serde(default)]
    pub vectors: BTreeMap<String, VectorDef>,
    #[serde(default)]
    pub crs_transforms: Vec<(String, String)>,
    #[serde(default)]
    pub tag_compat: Vec<(String, String)>,
}

/// The full static catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Catalog {
    #[serde(default)]
    pub schema: SchemaSection,
    #[serde(default)]
    pub engines: BTreeMap<String, EngineDef>,
    #[serde(default)]
    pub templates: BTreeMap<String, TemplateDef>,
    #[serde(default)]
    pub bins: BTreeMap<String, BinTable>,
}

fn normalize_mapping(m: &str) -> String {
    m.split_whitespace().collect::<String>()
}

impl Catalog {
    pub fn from_json(text: &str) -> Result<Catalog, CatalogError> {
        let cat: Catalog =
            serde_json::from_str(text).map_err(|e| CatalogError::Parse(e.to_string()))?;
        cat.validate()?;
        Ok(cat)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("catalog serializes")
    }

    /// Load-time checks: the label taxonomy must be a partial order, bin
    /// tables finite/ascending, engine operator tokens known.
    pub fn validate(&self) -> Result<(), CatalogError> {
        for (child, parents) in &self.schema.labels {
            for p in parents {
                if !self.schema.labels.contains_key(p) {
                    return Err(CatalogError::UnknownParent {
                        child: child.clone(),
                        parent: p.clone(),
                    });
                }
            }
        }
        // antisymmetry: no cycle among distinct labels
        for start in self.schema.labels.keys() {
            let mut stack = vec![start.clone()];
            let mut seen = BTreeSet::new();
            while let Some(l) = stack.pop() {
                for p in self.schema.labels.get(&l).into_iter().flatten() {
                    if p == start {
                        return Err(CatalogError::LabelCycle(start.clone()));
                    }
                    if seen.insert(p.clone()) {
                        stack.push(p.clone());
                    }
                }
            }
        }
        for (name, table) in &self.bins {
            if table.bounds.is_empty() {
                return Err(CatalogError::EmptyBinTable(name.clone()));
            }
            if table.bounds.len() != table.labels.len()
                || table.bounds.windows(2).any(|w| w[0] >= w[1])
            {
                return Err(CatalogError::MalformedBinTable { table: name.clone() });
            }
        }
        for (engine, def) in &self.engines {
            for token in &def.operators {
                if OperatorSymbol::from_token(token).is_none() {
                    return Err(CatalogError::UnknownOperatorToken {
                        engine: engine.clone(),
                        token: token.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn leaf_kinds(&self) -> CollectionKinds {
        self.schema
            .collections
            .iter()
            .map(|(name, def)| (name.clone(), def.kind))
            .collect()
    }

    pub fn has_mapping(&self, mapping: &str) -> bool {
        let wanted = normalize_mapping(mapping);
        self.schema.mappings.iter().any(|m| normalize_mapping(m) == wanted)
    }

    /// Reflexive-transitive subtype check over the parent lists.
    pub fn is_subtype(&self, sub: &str, sup: &str) -> bool {
        if sub == sup {
            return true;
        }
        let mut stack = vec![sub.to_string()];
        let mut seen = BTreeSet::new();
        while let Some(l) = stack.pop() {
            for p in self.schema.labels.get(&l).into_iter().flatten() {
                if p == sup {
                    return true;
                }
                if seen.insert(p.clone()) {
                    stack.push(p.clone());
                }
            }
        }
        false
    }

    /// Exact match, or a declared compatibility pair in either direction.
    pub fn tags_compatible(&self, a: &str, b: &str) -> bool {
        a == b
            || self
                .schema
                .tag_compat
                .iter()
                .any(|(x, y)| (x == a && y == b) || (x == b && y == a))
    }

    pub fn has_transform(&self, from: &str, to: &str) -> bool {
        self.schema.crs_transforms.iter().any(|(f, t)| f == from && t == to)
    }

    pub fn template(&self, symbol: OperatorSymbol) -> TemplateDef {
        self.templates.get(symbol.token()).cloned().unwrap_or_default()
    }

    /// Engines that support the symbol and satisfy its template's index
    /// requirement.
    pub fn engines_for(&self, symbol: OperatorSymbol) -> BTreeSet<String> {
        let needs_index = self.template(symbol).needs_index;
        self.engines
            .iter()
            .filter(|(_, def)| def.operators.contains(symbol.token()))
            .filter(|(_, def)| match &needs_index {
                Some(ix) => def.indexes.contains(ix),
                None => true,
            })
            .map(|(name, _)| name.clone())
            .collect()
    }

    /// Rank of an eps bin label in the `eps` table; unknown labels rank last.
    pub fn eps_rank(&self, bin: &str) -> usize {
        self.bins
            .get("eps")
            .and_then(|t| t.labels.iter().position(|l| l == bin))
            .unwrap_or(usize::MAX)
    }

    /// Smallest bin whose (closed) upper bound is >= value; values above the
    /// last bound saturate into the last bin.
    pub fn discretize(&self, value: f64, table_id: &str) -> Result<&str, CatalogError> {
        let table = self
            .bins
            .get(table_id)
            .ok_or_else(|| CatalogError::UnknownBinTable(table_id.to_string()))?;
        let nonnegative_domain = table.bounds.iter().all(|b| *b >= 0.0);
        if nonnegative_domain && value < 0.0 {
            return Err(CatalogError::NegativeValue { table: table_id.to_string(), value });
        }
        for (i, bound) in table.bounds.iter().enumerate() {
            if value <= *bound {
                return Ok(&table.labels[i]);
            }
        }
        Ok(table.labels.last().expect("validated nonempty"))
    }

    /// Size of the annotation vocabulary: the count of distinct atomic
    /// annotation values this catalog can put into a vector (payload atoms,
    /// labels, CRS codes, granularities, engine ids, bin labels, tags).
    pub fn vocabulary_size(&self) -> u64 {
        let mut atoms: BTreeSet<String> = BTreeSet::new();
        for (name, def) in &self.schema.collections {
            atoms.insert(format!("coll:{name}"));
            for a in &def.attributes {
                atoms.insert(format!("attr:{a}"));
            }
            if let Some(c) = &def.crs {
                atoms.insert(format!("crs:{c}"));
            }
            if let Some(g) = def.granularity {
                atoms.insert(format!("gran:{g}"));
            }
            if let Some(d) = &def.domain {
                atoms.insert(format!("tag:{d}"));
            }
            for t in &def.tags {
                atoms.insert(format!("tag:{t}"));
            }
            if let Some(id) = &def.id_attr {
                atoms.insert(format!("attr:{id}"));
            }
            if let Some(g) = &def.geometry {
                atoms.insert(format!("geom:{g}"));
            }
        }
        for l in self.schema.labels.keys() {
            atoms.insert(format!("label:{l}"));
        }
        for (e, def) in &self.schema.edges {
            atoms.insert(format!("edge:{e}"));
            atoms.insert(format!("label:{}", def.from));
            atoms.insert(format!("label:{}", def.to));
        }
        for v in self.schema.vectors.values() {
            atoms.insert(format!("tag:{}", v.tag));
        }
        for (f, t) in &self.schema.crs_transforms {
            atoms.insert(format!("crs:{f}"));
            atoms.insert(format!("crs:{t}"));
        }
        for e in self.engines.keys() {
            atoms.insert(format!("engine:{e}"));
        }
        for table in self.bins.values() {
            for l in &table.labels {
                atoms.insert(format!("bin:{l}"));
            }
        }
        atoms.insert("det".to_string());
        atoms.len() as u64
    }

    pub fn digest(&self) -> u64 {
        crate::digest::digest_str(&self.to_json())
    }
}

/// Annotation of a leaf referencing a named base collection.
pub fn annotate_leaf(collection: &str, catalog: &Catalog) -> AnnotationVector {
    let def = catalog.schema.collections.get(collection);
    let (output, refsys, placement, tags) = match def {
        None => (TypePayload::Unknown, RefSys::default(), BTreeSet::new(), BTreeSet::new()),
        Some(def) => {
            let payload = match def.kind {
                DataKind::Relation => TypePayload::Schema(def.attributes.clone()),
                DataKind::Nodes | DataKind::Edges => {
                    TypePayload::Label(def.label.clone().unwrap_or_else(|| collection.into()))
                }
                DataKind::Paths => TypePayload::Paths,
                DataKind::Docs => TypePayload::Docs {
                    id_attr: def.id_attr.clone().unwrap_or_else(|| "docid".into()),
                },
                DataKind::Geometry => TypePayload::Geometry {
                    geom: def.geometry.clone().unwrap_or_else(|| "Geometry".into()),
                },
                DataKind::Temporal => TypePayload::Interval,
            };
            let refsys = RefSys {
                crs: def.crs.clone(),
                granularity: def.granularity,
                units: def.units.clone(),
            };
            let mut tags: BTreeSet<String> = def.tags.iter().cloned().collect();
            if let Some(d) = &def.domain {
                tags.insert(d.clone());
            }
            let placement = [def.engine.clone()].into_iter().collect();
            (payload, refsys, placement, tags)
        }
    };
    AnnotationVector {
        type_profile: TypeProfile { inputs: Vec::new(), output },
        binding: BTreeMap::new(),
        refsys,
        placement,
        uncertainty: Uncertainty::Deterministic,
        semantic_tags: tags,
    }
}

fn split_attrs(list: &str) -> Vec<String> {
    list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

/// Derive the output payload of an operator from its parameters and the
/// payloads it received. `None` inputs (outside the examined subplan) make
/// payload-propagating outputs `Unknown`.
fn output_payload(op: &OperatorInstance, inputs: &[TypePayload]) -> TypePayload {
    use OperatorSymbol::*;
    let first = inputs.first().cloned().unwrap_or(TypePayload::Unknown);
    match op.symbol {
        Select | Keyword | Fulltext | TopK | Enrich | SpatialSelect | SpatialKnn
        | TemporalSelect => first,
        Reproject => first,
        Project => match op.bound_param("attrs") {
            Some(attrs) => TypePayload::Schema(split_attrs(attrs)),
            None => TypePayload::Unknown,
        },
        Group => {
            let mut attrs = op.bound_param("attrs").map(split_attrs).unwrap_or_default();
            if let Some(agg) = op.bound_param("agg") {
                attrs.push(agg.to_string());
            }
            TypePayload::Schema(attrs)
        }
        Join => match (&inputs.first(), &inputs.get(1)) {
            (Some(TypePayload::Schema(l)), Some(TypePayload::Schema(r))) => {
                let mut attrs = l.clone();
                for a in r {
                    if !attrs.contains(a) {
                        attrs.push(a.clone());
                    }
                }
                TypePayload::Schema(attrs)
            }
            _ => TypePayload::Unknown,
        },
        Traverse => TypePayload::Unknown, // resolved against the catalog in annotate_op
        Match => TypePayload::Paths,
        SimJoin => TypePayload::Schema(vec!["left".into(), "right".into(), "score".into()]),
        SpatialJoin => first,
        ExtractEntities => TypePayload::Schema(vec!["entity".into(), "type".into()]),
        ExtractRelations => {
            TypePayload::Label(op.bound_param("type").unwrap_or("Related").to_string())
        }
        Classify => TypePayload::Schema(vec!["docid".into(), "label".into()]),
        RelToNodes => {
            TypePayload::Label(op.bound_param("label").unwrap_or("Node").to_string())
        }
        GraphToRel => TypePayload::Schema(vec!["id".into(), "label".into()]),
        RelToDocs => TypePayload::Docs { id_attr: "docid".into() },
        DocsToRel => match op.bound_param("map").and_then(|m| m.split_once("->")) {
            Some((_, target)) => TypePayload::Schema(vec![target.trim().to_string()]),
            None => TypePayload::Unknown,
        },
        RelToGeom => TypePayload::Geometry { geom: "Point".into() },
        GeomToRel => TypePayload::Schema(vec!["geom_id".into(), "wkt".into()]),
        RelToTemporal => TypePayload::Interval,
    }
}

/// Derive the annotation vector of an operator occurrence. Total: derivation
/// never fails, but impossible placements come back as an empty placement set
/// and unknowable payloads as `Unknown` (the feasibility checks turn both
/// into witnesses). `None` children stand for nodes outside the examined
/// subplan.
pub fn annotate_op(
    op: &OperatorInstance,
    children: &[Option<&AnnotationVector>],
    catalog: &Catalog,
) -> AnnotationVector {
    let template = catalog.template(op.symbol);

    let inputs: Vec<TypePayload> = children
        .iter()
        .map(|c| c.map(|a| a.type_profile.output.clone()).unwrap_or(TypePayload::Unknown))
        .collect();

    let mut output = output_payload(op, &inputs);
    if op.symbol == OperatorSymbol::Traverse {
        output = match op.bound_param("edge").and_then(|e| catalog.schema.edges.get(e)) {
            Some(edge) => TypePayload::Label(edge.to.clone()),
            None => TypePayload::Unknown,
        };
    }

    // binding: every instance parameter, plus template-required names that
    // are absent altogether
    let mut binding: BTreeMap<String, Binding> = op
        .params
        .iter()
        .map(|(name, v)| {
            (name.clone(), if v.is_bound() { Binding::Bound } else { Binding::Unbound })
        })
        .collect();
    for name in &template.requires {
        binding.entry(name.clone()).or_insert(Binding::Unbound);
    }

    // reference system
    let first_crs = || {
        children
            .iter()
            .flatten()
            .find_map(|a| a.refsys.crs.clone())
    };
    let crs = match op.symbol {
        OperatorSymbol::Reproject => op.bound_param("to").map(str::to_string),
        _ => first_crs(),
    };
    let granularity =
        children.iter().flatten().find_map(|a| a.refsys.granularity);
    let units = children.iter().flatten().find_map(|a| a.refsys.units.clone());
    let refsys = RefSys { crs, granularity, units };

    let placement = catalog.engines_for(op.symbol);

    // uncertainty: template default, escalated to the worst child bin
    let mut uncertainty = match &template.eps {
        Some(bin) => Uncertainty::EpsBounded { bin: bin.clone() },
        None => Uncertainty::Deterministic,
    };
    for child in children.iter().flatten() {
        if let Uncertainty::EpsBounded { bin } = &child.uncertainty {
            uncertainty = match uncertainty {
                Uncertainty::Deterministic => Uncertainty::EpsBounded { bin: bin.clone() },
                Uncertainty::EpsBounded { bin: current } => {
                    if catalog.eps_rank(bin) > catalog.eps_rank(&current) {
                        Uncertainty::EpsBounded { bin: bin.clone() }
                    } else {
                        Uncertainty::EpsBounded { bin: current }
                    }
                }
            };
        }
    }

    // semantic tags ride on document dataflow only: once a cast resolves
    // documents back to identifiers, embedding-domain semantics end there
    // (approximation, in contrast, keeps propagating via the uncertainty
    // facet)
    let mut semantic_tags: BTreeSet<String> = BTreeSet::new();
    if op.symbol.kind().output_kind == DataKind::Docs {
        semantic_tags = children
            .iter()
            .flatten()
            .flat_map(|a| a.semantic_tags.iter().cloned())
            .collect();
        if let Some(q) = op.bound_param("q") {
            if let Some(v) = catalog.schema.vectors.get(q) {
                semantic_tags.insert(v.tag.clone());
            }
        }
        if let Some(domain) = op.bound_param("domain") {
            semantic_tags.insert(domain.to_string());
        }
    }

    AnnotationVector {
        type_profile: TypeProfile { inputs, output },
        binding,
        refsys,
        placement,
        uncertainty,
        semantic_tags,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::ParamTag;

    fn test_catalog() -> Catalog {
        Catalog::from_json(
            r#"{
            "schema": {
                "collections": {
                    "Projects": {"kind": "relation", "engine": "postgres",
                                 "attributes": ["projid", "name", "address"],
                                 "crs": "EPSG:4326"},
                    "Documents": {"kind": "docs", "engine": "qdrant",
                                  "id_attr": "docid", "domain": "sustainability"},
                    "AdminBoundaries": {"kind": "geometry", "engine": "postgis",
                                        "geometry": "Polygon", "crs": "EPSG:3857"}
                },
                "mappings": ["docid -> sid"],
                "labels": {"Supplier": ["Organization"], "Organization": [], "Company": []},
                "edges": {"Supplies": {"from": "Organization", "to": "Part"}},
                "vectors": {"q_sust": {"tag": "sustainability"}},
                "crs_transforms": [["EPSG:4326", "EPSG:3857"]],
                "tag_compat": []
            },
            "engines": {
                "postgres": {"operators": ["select", "project", "join", "group", "rel_to_geom", "docs_to_rel"]},
                "qdrant": {"operators": ["topk", "keyword"], "indexes": ["embedding"]},
                "postgis": {"operators": ["spatial_select", "spatial_join", "reproject", "rel_to_geom"],
                            "indexes": ["spatial"]}
            },
            "templates": {
                "topk": {"eps": "e05", "requires": ["q", "k"], "needs_index": "embedding"}
            },
            "bins": {
                "eps": {"bounds": [0.01, 0.05, 0.1], "labels": ["e01", "e05", "e10"]},
                "similarity": {"bounds": [0.5, 0.8, 0.9, 1.0],
                               "labels": ["<=0.5", "<=0.8", "<=0.9", "<=1.0"]}
            }
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn label_cycle_is_rejected_at_load() {
        let err = Catalog::from_json(
            r#"{"schema": {"labels": {"A": ["B"], "B": ["A"]}}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, CatalogError::LabelCycle(_)));
    }

    #[test]
    fn subtype_is_reflexive_and_transitive() {
        let mut cat = test_catalog();
        cat.schema
            .labels
            .insert("Organization".into(), vec!["Entity".into()]);
        cat.schema.labels.insert("Entity".into(), vec![]);
        assert!(cat.is_subtype("Supplier", "Supplier"));
        assert!(cat.is_subtype("Supplier", "Organization"));
        assert!(cat.is_subtype("Supplier", "Entity"));
        assert!(!cat.is_subtype("Company", "Organization"));
    }

    #[test]
    fn discretize_follows_the_table() {
        let cat = test_catalog();
        // boundary value lands in its own (closed) bin
        assert_eq!(cat.discretize(0.8, "similarity").unwrap(), "<=0.8");
        // oracle: smallest bound >= value
        assert_eq!(cat.discretize(0.83, "similarity").unwrap(), "<=0.9");
        // saturation above the last bound
        assert_eq!(cat.discretize(1e9, "similarity").unwrap(), "<=1.0");
        // nonnegative domain rejects negatives
        assert!(matches!(
            cat.discretize(-0.2, "similarity"),
            Err(CatalogError::NegativeValue { .. })
        ));
        assert!(matches!(
            cat.discretize(0.5, "missing"),
            Err(CatalogError::UnknownBinTable(_))
        ));
    }

    #[test]
    fn geocode_inherits_schema_crs() {
        let cat = test_catalog();
        let projects = annotate_leaf("Projects", &cat);
        assert_eq!(projects.refsys.crs.as_deref(), Some("EPSG:4326"));
        let geocode = OperatorInstance::new(OperatorSymbol::RelToGeom);
        let ann = annotate_op(&geocode, &[Some(&projects)], &cat);
        assert_eq!(ann.refsys.crs.as_deref(), Some("EPSG:4326"));
        assert_eq!(ann.type_profile.output, TypePayload::Geometry { geom: "Point".into() });
    }

    #[test]
    fn spatial_select_places_only_in_postgis() {
        let cat = test_catalog();
        let boundaries = annotate_leaf("AdminBoundaries", &cat);
        let op = OperatorInstance::new(OperatorSymbol::SpatialSelect).with_param(
            "pred",
            ParamTag::Predicate,
            "within(Europe)",
        );
        let ann = annotate_op(&op, &[Some(&boundaries)], &cat);
        assert_eq!(ann.placement, ["postgis".to_string()].into_iter().collect());
    }

    #[test]
    fn template_marks_topk_approximate() {
        let cat = test_catalog();
        let docs = annotate_leaf("Documents", &cat);
        let topk = OperatorInstance::new(OperatorSymbol::TopK)
            .with_param("q", ParamTag::VectorRef, "q_sust")
            .with_param("k", ParamTag::Integer, "10");
        let ann = annotate_op(&topk, &[Some(&docs)], &cat);
        assert_eq!(ann.uncertainty, Uncertainty::EpsBounded { bin: "e05".into() });
        assert!(ann.semantic_tags.contains("sustainability"));
        // placement is the embedding-index engine only
        assert_eq!(ann.placement, ["qdrant".to_string()].into_iter().collect());
    }

    #[test]
    fn deterministic_child_stays_deterministic() {
        let cat = test_catalog();
        let projects = annotate_leaf("Projects", &cat);
        let proj = OperatorInstance::new(OperatorSymbol::Project).with_param(
            "attrs",
            ParamTag::AttrList,
            "name",
        );
        let ann = annotate_op(&proj, &[Some(&projects)], &cat);
        assert_eq!(ann.uncertainty, Uncertainty::Deterministic);
    }

    #[test]
    fn escalation_takes_the_worse_bin(){
        let cat = test_catalog();
        let docs = annotate_leaf("Documents", &cat);
        let mut child_a = docs.clone();
        child_a.uncertainty = Uncertainty::EpsBounded { bin: "e01".into() };
        let mut child_b = docs.clone();
        child_b.uncertainty = Uncertainty::EpsBounded { bin: "e10".into() };
        let op = OperatorInstance::new(OperatorSymbol::SimJoin).with_param(
            "t",
            ParamTag::ThresholdBin,
            "<=0.9",
        );
        let ann = annotate_op(&op, &[Some(&child_a), Some(&child_b)], &cat);
        assert_eq!(ann.uncertainty, Uncertainty::EpsBounded { bin: "e10".into() });
    }

    #[test]
    fn annotation_is_deterministic() {
        let cat = test_catalog();
        let docs = annotate_leaf("Documents", &cat);
        let topk = OperatorInstance::new(OperatorSymbol::TopK)
            .with_param("q", ParamTag::VectorRef, "q_sust")
            .with_param("k", ParamTag::Integer, "10");
        let a = annotate_op(&topk, &[Some(&docs)], &cat);
        let b = annotate_op(&topk, &[Some(&docs)], &cat);
        assert_eq!(a, b);
        assert_eq!(a.facet_digest(), b.facet_digest());
    }

    #[test]
    fn placement_is_excluded_from_the_facet_digest() {
        let cat = test_catalog();
        let docs = annotate_leaf("Documents", &cat);
        let mut other = docs.clone();
        other.placement.insert("postgres".into());
        assert_eq!(docs.facet_digest(), other.facet_digest());
        assert!(docs.compatible_with(&other));
        let mut incompatible = docs.clone();
        incompatible.placement = ["postgres".to_string()].into_iter().collect();
        assert!(!docs.compatible_with(&incompatible));
    }

    #[test]
    fn vocabulary_is_finite_and_covers_observed_annotations() {
        let cat = test_catalog();
        let bound = cat.vocabulary_size();
        assert!(bound > 0 && bound < 100);
        // every annotation derivable from a fixed catalog reuses those atoms;
        // a small exhaustive probe over leaf+op pairs stays well under the bound
        let mut distinct = BTreeSet::new();
        for coll in cat.schema.collections.keys() {
            let leaf = annotate_leaf(coll, &cat);
            distinct.insert(format!("{:?}", leaf));
            for sym in OperatorSymbol::ALL {
                let op = OperatorInstance::new(sym);
                let ann = annotate_op(&op, &[Some(&leaf)], &cat);
                distinct.insert(format!("{:?}", ann));
            }
        }
        assert!(distinct.len() as u64 <= bound * OperatorSymbol::ALL.len() as u64);
    }
}
