use ppf_core::bench::*;

fn main() {
    for name in preset_names() {
        let config = preset(name).unwrap();
        let t = std::time::Instant::now();
        let row = run_scenario(name, &config).unwrap();
        let s = &row.stats;
        println!(
            "{name}: m={} N={:.1} UniqA={} UniqF={} PkA={:.2} PkF={:.2} PrU={} PrU/UniqA={:.2} build={:.1}ms label={:.1}ms wall={:.0}ms",
            s.num_plans, s.nodes_per_plan, s.unique_all, s.unique_feasible,
            s.packed_ratio_pre, s.packed_ratio_post, s.pruned_unique,
            s.pruned_unique as f64 / s.unique_all as f64,
            s.build_ms, row.label_ms, t.elapsed().as_secs_f64()*1000.0
        );
    }
}
