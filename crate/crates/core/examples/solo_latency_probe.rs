//! Prints each navigation chain's solo latency distribution (no
//! cross-chain contention) against its scaled deadline, for feasibility
//! inspection.
//!
//!     cargo run --example solo_latency_probe [policy]

use urgensim::engine::{run_simulation, RunOptions, SimParams};
use urgensim::policy::{PolicyKind, PolicySpec, SchedulerConfig};
use urgensim::units::ns_to_ms;
use urgensim::workload::{apply_factors, builtin_workload, LookupTable, Overrides, RunConfig};

fn main() {
    let policy: PolicyKind = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "urgengo".into())
        .parse()
        .expect("policy");
    let base = builtin_workload("c0-c9", 42).unwrap();
    let config = RunConfig::builtin("c0-c9", &Overrides::default()).unwrap();
    println!("chain solo_p50  solo_p95  deadline  slack_p95");
    for idx in 0..base.chains.len() {
        let mut w = builtin_workload("c0-c9", 42).unwrap();
        w.factors.f_tight = 0.0;
        w.duration = urgensim::units::secs(60.0);
        w.chains = vec![w.chains[idx].clone()];
        let w = apply_factors(w);
        let deadline = w.chains[0].deadline;
        let lookup = LookupTable::from_workload(&w);
        let params = SimParams {
            workload: w,
            device: config.device.clone(),
            scheduler: SchedulerConfig::default(),
            noise_pct: 0.0,
            cudafree_tasks: 0,
            shed_backlog: false,
            lookup,
        };
        let manifest = config.manifest(&params.workload, None);
        let result = run_simulation(params, PolicySpec::new(policy), manifest, RunOptions::default())
            .expect("run");
        let lat = result.report.latency_percentiles(idx as u32).unwrap();
        println!(
            "C{idx}    {:8.2}  {:8.2}  {:8.2}  {:+8.2}",
            ns_to_ms(lat.p50),
            ns_to_ms(lat.p95),
            ns_to_ms(deadline),
            ns_to_ms(deadline) - ns_to_ms(lat.p95),
        );
    }
}
