//! Packed plan forests for cross-model query planning.
//!
//! This crate represents ambiguous cross-model queries as families of typed
//! operator DAGs, derives per-operator annotation vectors from a static
//! catalog, packs the candidate family into a shared AND-OR forest with
//! annotation-sensitive hash-consing, decides feasibility by bottom-up
//! fixed-point labeling, and emits minimal, independently verifiable
//! infeasibility certificates.
//!
//! Module map:
//! - [`algebra`]: operator vocabulary, typed signatures, plan DAGs, the plan
//!   file format.
//! - [`catalog`]: schema/engine/template/bin catalogs and annotation
//!   derivation.
//! - [`feasibility`]: local constraint families, witnesses, certificates,
//!   CRS repair.
//! - [`ambiguity`]: ambiguous query specs and candidate expansion.
//! - [`forest`]: the packed plan forest builder, unpacking, size stats.
//! - [`labeling`]: fixed-point feasibility labeling and feasible-plan
//!   extraction.
//! - [`bench`]: seeded synthetic workloads, scenario metrics, baselines.

pub mod algebra;
pub mod ambiguity;
pub mod bench;
pub mod catalog;
pub mod digest;
pub mod feasibility;
pub mod fixtures;
pub mod forest;
pub mod labeling;

pub use algebra::{
    CollectionKinds, DataKind, NodeId, OperatorInstance, OperatorKind, OperatorSymbol,
    ParamTag, ParamValue, Plan, PlanError, PlanNode, TypeViolation,
};
pub use ambiguity::{AmbiguousQuerySpec, ChoiceDimension, ChoicePoint, SpecError, SpliceSite};
pub use catalog::{
    AnnotationVector, Catalog, CatalogError, Granularity, TypePayload, Uncertainty,
};
pub use feasibility::{
    check_local, minimal_certificate, repair_crs, verify_certificate, Certificate,
    CertificateRecord, ConstraintFamily, VerifyResult, Witness,
};
pub use forest::{build, BuildOptions, BuildOutput, PackedPlanForest, SizeStats};
// bench re-exports land once the generator is in place
pub use labeling::{extract_feasible, is_feasible, label, FeasibilityVerdict, LabelSets};
