//! Contention model check: runs 2D object detection solo and co-running
//! with 3D object detection, and reports the p95 end-to-end latency
//! inflation of the 2D chain. Pass an alpha value to explore the
//! contention coefficient; without arguments the frozen default is used.
//!
//!     cargo run --example contention_calibration [alpha]

use urgensim::engine::{run_simulation, RunOptions, SimParams};
use urgensim::policy::{PolicyKind, PolicySpec, SchedulerConfig};
use urgensim::workload::{apply_factors, builtin_workload, LookupTable, Overrides, RunConfig};

fn p95_of_chain0(params: SimParams) -> f64 {
    let config = RunConfig::builtin("contention-pair", &Overrides::default()).unwrap();
    let manifest = config.manifest(&params.workload, None);
    let result = run_simulation(
        params,
        PolicySpec::new(PolicyKind::Vanilla),
        manifest,
        RunOptions::default(),
    )
    .expect("run succeeds");
    result.report.latency_percentiles(0).unwrap().p95 as f64 / 1e6
}

fn main() {
    let alpha: Option<f64> = std::env::args().nth(1).map(|s| s.parse().expect("alpha"));
    let mut device = urgensim::gpu::DeviceParams::rtx3070ti();
    if let Some(a) = alpha {
        device.contention_alpha = a;
    }

    let seed = 7;
    let duration_s = 120.0;
    let mk = |solo: bool| {
        let mut w = builtin_workload("contention-pair", seed).unwrap();
        w.duration = urgensim::units::secs(duration_s);
        if solo {
            w.chains.truncate(1);
        }
        let w = apply_factors(w);
        let lookup = LookupTable::from_workload(&w);
        SimParams {
            workload: w,
            device: device.clone(),
            scheduler: SchedulerConfig::default(),
            noise_pct: 0.0,
            cudafree_tasks: 0,
            shed_backlog: false,
            lookup,
        }
    };

    let solo = p95_of_chain0(mk(true));
    let corun = p95_of_chain0(mk(false));
    let inflation = (corun - solo) / solo * 100.0;
    println!(
        "alpha={:.2} solo_p95={solo:.3} ms corun_p95={corun:.3} ms inflation={inflation:.1}%",
        device.contention_alpha
    );
}
