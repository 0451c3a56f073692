//! Bundled fixture plans and the supply-chain catalog used by the examples,
//! the test suites, and the CLI documentation.

use crate::algebra::Plan;
use crate::ambiguity::AmbiguousQuerySpec;
use crate::catalog::Catalog;

/// Supply-chain intelligence catalog: relational base tables in PostgreSQL,
/// supplier/part/project graph in Neo4j, sustainability documents in Qdrant,
/// boundaries and transforms in PostGIS.
pub const SSCI_CATALOG: &str = include_str!("../fixtures/ssci.catalog.json");

/// Vector retrieval cast back to suppliers and traversed to projects.
/// Feasible against the full catalog; removing the `docid -> sid` mapping
/// turns the cast into a TYPE certificate.
pub const SUPPLY_CHAIN_DOCS_PLAN: &str =
    include_str!("../fixtures/supply_chain_docs.plan");

/// Spatially filtered projects joined with graph traversals and document
/// retrieval; carries a CRS mismatch until repaired.
pub const EU_PROJECTS_SPATIAL_PLAN: &str =
    include_str!("../fixtures/eu_projects_spatial.plan");

/// Double-fault plan: embedding-domain mismatch and fiscal/calendar conflict.
pub const FUNDING_TIMELINE_PLAN: &str = include_str!("../fixtures/funding_timeline.plan");

/// Eight-candidate family over a three-operator skeleton: three independent
/// predicates, two realizations each.
pub const SUPPLIER_FILTERS_FAMILY: &str =
    include_str!("../fixtures/supplier_filters.family.json");

pub fn ssci_catalog() -> Catalog {
    Catalog::from_json(SSCI_CATALOG).expect("bundled catalog is valid")
}

pub fn supply_chain_docs_plan() -> Plan {
    Plan::parse(SUPPLY_CHAIN_DOCS_PLAN).expect("bundled plan parses")
}

pub fn eu_projects_spatial_plan() -> Plan {
    Plan::parse(EU_PROJECTS_SPATIAL_PLAN).expect("bundled plan parses")
}

pub fn funding_timeline_plan() -> Plan {
    Plan::parse(FUNDING_TIMELINE_PLAN).expect("bundled plan parses")
}

pub fn supplier_filters_family() -> AmbiguousQuerySpec {
    AmbiguousQuerySpec::from_json(SUPPLIER_FILTERS_FAMILY).expect("bundled family parses")
}

/// Write every fixture into a directory (CLI walkthroughs and integration
/// tests run against real files).
pub fn write_all(dir: &std::path::Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("ssci.catalog.json"), SSCI_CATALOG)?;
    std::fs::write(dir.join("supply_chain_docs.plan"), SUPPLY_CHAIN_DOCS_PLAN)?;
    std::fs::write(dir.join("eu_projects_spatial.plan"), EU_PROJECTS_SPATIAL_PLAN)?;
    std::fs::write(dir.join("funding_timeline.plan"), FUNDING_TIMELINE_PLAN)?;
    std::fs::write(dir.join("supplier_filters.family.json"), SUPPLIER_FILTERS_FAMILY)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feasibility::{plan_witnesses, ConstraintFamily};

    #[test]
    fn fixtures_parse_and_validate() {
        let cat = ssci_catalog();
        let kinds = cat.leaf_kinds();
        for plan in [
            supply_chain_docs_plan(),
            eu_projects_spatial_plan(),
            funding_timeline_plan(),
        ] {
            assert_eq!(plan.validate_signature(&kinds).unwrap(), vec![]);
        }
        let family = supplier_filters_family();
        family.validate(&kinds).unwrap();
        assert_eq!(family.candidate_count(), 8);
    }

    #[test]
    fn supply_chain_docs_is_feasible_with_the_full_catalog() {
        let cat = ssci_catalog();
        let (_, witnesses) = plan_witnesses(&supply_chain_docs_plan(), &cat).unwrap();
        assert_eq!(witnesses, vec![]);
    }

    #[test]
    fn eu_projects_spatial_has_exactly_the_crs_fault() {
        let cat = ssci_catalog();
        let (_, witnesses) = plan_witnesses(&eu_projects_spatial_plan(), &cat).unwrap();
        assert_eq!(witnesses.len(), 1);
        assert_eq!(witnesses[0].family, ConstraintFamily::Crs);
    }

    #[test]
    fn funding_timeline_has_two_independent_faults() {
        let cat = ssci_catalog();
        let (_, witnesses) = plan_witnesses(&funding_timeline_plan(), &cat).unwrap();
        let families: Vec<ConstraintFamily> =
            witnesses.iter().map(|w| w.family).collect();
        assert_eq!(families, vec![ConstraintFamily::Align, ConstraintFamily::Temporal]);
    }

    #[test]
    fn family_round_trips_through_json() {
        let family = supplier_filters_family();
        let json = family.to_json().unwrap();
        let again = AmbiguousQuerySpec::from_json(&json).unwrap();
        assert_eq!(again.candidate_count(), 8);
    }
}
