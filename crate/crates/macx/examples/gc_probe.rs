fn main() {
    let args: Vec<String> = std::env::args().collect();
    let data_seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let param_seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(11);
    let jitter_seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(31);
    let report =
        macx::harness::gradcheck_suite_seeded(8, 2, 6, 5, data_seed, param_seed, jitter_seed).unwrap();
    for c in &report.cases {
        println!("{}: max_rel={:.3e} worst={:?}", c.label, c.max_rel_err, c.worst);
    }
    println!("seeds=({data_seed},{param_seed},{jitter_seed}) overall {:.3e} in {:.1}s", report.max_rel_err, report.elapsed_secs);
}
