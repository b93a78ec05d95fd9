//! Built-in workloads modeled on a realistic autonomous-navigation
//! deployment: 11 task chains across 3D/2D perception, localization,
//! navigation, calibration and interaction, with per-chain periods,
//! deadlines and CPU/GPU execution budgets taken from profiling of the
//! underlying model zoo. Kernel-level detail is synthesized from the
//! task-level statistics, preserving the per-chain totals exactly.

use crate::rng::{self, Stream};
use crate::units::{ms, secs, Nanos};
use crate::workload::{
    synthesize_kernel_times, synthesize_utilizations, ChainSpec, Factors, KernelSpec, TaskSpec,
    Workload,
};
use rand::Rng;

/// Fallback per-kernel utilization range for synthesized workloads,
/// centered on the occupancy levels seen in profiling lookup tables.
/// Built-in tasks carry task-specific ranges (detection backbones are
/// high-occupancy, classifier and LLM kernels are light).
pub const DEFAULT_UTIL_RANGE: (f64, f64) = (0.10, 0.40);

/// GPU segments (and CPU segments) per synthesized task.
const SEGMENTS_PER_TASK: usize = 2;

struct TaskDef {
    tag: &'static str,
    kernels: usize,
    gpu_ms: f64,
    util: (f64, f64),
}

struct ChainDef {
    modality: &'static str,
    period_ms: f64,
    deadline_ms: f64,
    cpu_ms: f64,
    cpu_sd: f64,
    gpu_sd: f64,
    tasks: &'static [TaskDef],
}

// Chain characteristics of the navigation workflow. CPU/GPU totals are the
// profiled per-chain budgets; task decompositions carry the profiled kernel
// counts, rescaled so each chain's GPU total is met exactly.
const NAV_CHAINS: &[ChainDef] = &[
    ChainDef { modality: "lidar", period_ms: 150.0, deadline_ms: 120.0, cpu_ms: 17.4, cpu_sd: 4.9, gpu_sd: 3.0,
        tasks: &[
            TaskDef { tag: "3d-object-detection", kernels: 41, gpu_ms: 13.4, util: (0.33, 0.63) },
            TaskDef { tag: "particle-filtering", kernels: 16, gpu_ms: 15.0, util: (0.12, 0.35) },
        ] },
    ChainDef { modality: "lidar", period_ms: 150.0, deadline_ms: 120.0, cpu_ms: 16.2, cpu_sd: 3.2, gpu_sd: 3.1,
        tasks: &[
            TaskDef { tag: "3d-object-detection", kernels: 41, gpu_ms: 13.4, util: (0.33, 0.63) },
            TaskDef { tag: "particle-filtering", kernels: 16, gpu_ms: 15.0, util: (0.12, 0.35) },
        ] },
    ChainDef { modality: "camera", period_ms: 500.0, deadline_ms: 120.0, cpu_ms: 21.0, cpu_sd: 4.6, gpu_sd: 1.3,
        tasks: &[
            TaskDef { tag: "2d-object-detection", kernels: 323, gpu_ms: 19.8, util: (0.33, 0.63) },
            TaskDef { tag: "face-detection", kernels: 225, gpu_ms: 7.2, util: (0.06, 0.22) },
        ] },
    ChainDef { modality: "camera", period_ms: 200.0, deadline_ms: 120.0, cpu_ms: 20.2, cpu_sd: 1.7, gpu_sd: 1.3,
        tasks: &[
            TaskDef { tag: "2d-object-detection", kernels: 323, gpu_ms: 19.8, util: (0.33, 0.63) },
            TaskDef { tag: "traffic-sign-classification", kernels: 65, gpu_ms: 10.4, util: (0.06, 0.22) },
        ] },
    ChainDef { modality: "camera", period_ms: 150.0, deadline_ms: 120.0, cpu_ms: 21.8, cpu_sd: 2.7, gpu_sd: 2.8,
        tasks: &[
            TaskDef { tag: "face-detection", kernels: 225, gpu_ms: 7.1, util: (0.06, 0.22) },
            TaskDef { tag: "image-segmentation", kernels: 63, gpu_ms: 12.4, util: (0.20, 0.45) },
        ] },
    ChainDef { modality: "camera", period_ms: 200.0, deadline_ms: 120.0, cpu_ms: 20.2, cpu_sd: 1.7, gpu_sd: 1.3,
        tasks: &[
            TaskDef { tag: "2d-object-detection", kernels: 323, gpu_ms: 19.8, util: (0.33, 0.63) },
            TaskDef { tag: "traffic-sign-classification", kernels: 65, gpu_ms: 10.4, util: (0.06, 0.22) },
        ] },
    ChainDef { modality: "camera", period_ms: 200.0, deadline_ms: 120.0, cpu_ms: 21.8, cpu_sd: 2.7, gpu_sd: 2.8,
        tasks: &[
            TaskDef { tag: "face-detection", kernels: 225, gpu_ms: 7.1, util: (0.06, 0.22) },
            TaskDef { tag: "image-segmentation", kernels: 63, gpu_ms: 12.4, util: (0.20, 0.45) },
        ] },
    ChainDef { modality: "camera", period_ms: 500.0, deadline_ms: 120.0, cpu_ms: 21.0, cpu_sd: 4.6, gpu_sd: 1.3,
        tasks: &[
            TaskDef { tag: "2d-object-detection", kernels: 323, gpu_ms: 19.8, util: (0.33, 0.63) },
            TaskDef { tag: "face-detection", kernels: 225, gpu_ms: 7.2, util: (0.06, 0.22) },
        ] },
    ChainDef { modality: "lidar", period_ms: 200.0, deadline_ms: 120.0, cpu_ms: 21.3, cpu_sd: 3.9, gpu_sd: 2.9,
        tasks: &[
            TaskDef { tag: "icp-registration", kernels: 40, gpu_ms: 13.0, util: (0.18, 0.40) },
            TaskDef { tag: "path-finding", kernels: 256, gpu_ms: 6.7, util: (0.08, 0.30) },
        ] },
    ChainDef { modality: "camera+lidar", period_ms: 500.0, deadline_ms: 120.0, cpu_ms: 11.2, cpu_sd: 1.4, gpu_sd: 4.2,
        tasks: &[
            TaskDef { tag: "calibration-feature-extraction", kernels: 133, gpu_ms: 28.0, util: (0.15, 0.38) },
            TaskDef { tag: "calibration-alignment", kernels: 65, gpu_ms: 18.1, util: (0.15, 0.38) },
        ] },
    ChainDef { modality: "text", period_ms: 5000.0, deadline_ms: 200.0, cpu_ms: 17.8, cpu_sd: 4.6, gpu_sd: 2.9,
        tasks: &[
            TaskDef { tag: "llm-token-generation", kernels: 1106, gpu_ms: 6.7, util: (0.04, 0.15) },
        ] },
];

pub fn builtin_names() -> &'static [&'static str] {
    &["default", "c0-c9", "c6-c10", "contention-pair"]
}

/// Instantiates a built-in workload. Kernel-level detail is synthesized
/// from the given seed; chain-level totals are seed-independent.
pub fn builtin_workload(name: &str, seed: u64) -> Option<Workload> {
    // the navigation workflows default to the standard grid point:
    // f_tight = 40%, f_d = 1.0, f_a = 1.0
    let grid_default = Factors {
        f_a: 1.0,
        f_d: 1.0,
        f_tight: 0.4,
    };
    let (chains, factors) = match name {
        "default" | "c0-c9" => (nav_chains(0..10, seed), grid_default),
        "c6-c10" => (nav_chains(6..11, seed), grid_default),
        "contention-pair" => (contention_pair(seed), Factors::default()),
        _ => return None,
    };
    Some(Workload {
        chains,
        factors,
        jitter: ms(15.0),
        duration: secs(600.0),
        seed,
        tight_chains: vec![],
    })
}

fn nav_chains(range: std::ops::Range<usize>, seed: u64) -> Vec<ChainSpec> {
    range
        .map(|i| build_chain(i as u32, &NAV_CHAINS[i], seed))
        .collect()
}

fn build_chain(chain_id: u32, def: &ChainDef, seed: u64) -> ChainSpec {
    let cpu_total = ms(def.cpu_ms);
    let n_tasks = def.tasks.len();
    let tasks = def
        .tasks
        .iter()
        .enumerate()
        .map(|(task_idx, td)| {
            // even CPU split across tasks, remainder on the last one
            let share = cpu_total / n_tasks as Nanos;
            let cpu_task = if task_idx == n_tasks - 1 {
                cpu_total - share * (n_tasks as Nanos - 1)
            } else {
                share
            };
            build_task(chain_id, task_idx as u32, td, cpu_task, seed)
        })
        .collect();
    let gpu_ms: f64 = def.tasks.iter().map(|t| t.gpu_ms).sum();
    ChainSpec {
        chain_id,
        modality: def.modality.into(),
        period: ms(def.period_ms),
        deadline: ms(def.deadline_ms),
        tasks,
        static_criticality: None,
        cpu_time_cv: if def.cpu_ms > 0.0 { def.cpu_sd / def.cpu_ms } else { 0.0 },
        gpu_time_cv: if gpu_ms > 0.0 { def.gpu_sd / gpu_ms } else { 0.0 },
    }
}

fn build_task(
    chain_id: u32,
    task_idx: u32,
    td: &TaskDef,
    cpu_total: Nanos,
    seed: u64,
) -> TaskSpec {
    let mut rng = rng::derive(seed, Stream::KernelSynth(chain_id, task_idx));
    let times = synthesize_kernel_times(td.kernels, ms(td.gpu_ms), &mut rng);
    let utils = synthesize_utilizations(td.kernels, td.util, &mut rng);
    let segments = SEGMENTS_PER_TASK.min(td.kernels);
    let seg_len = td.kernels.div_ceil(segments);
    let kernels = times
        .iter()
        .zip(&utils)
        .enumerate()
        .map(|(i, (&t, &u))| KernelSpec {
            kernel_id: (chain_id as u64) << 24 | (task_idx as u64) << 16 | i as u64,
            grid_dim: rng.gen_range(8..=256),
            block_dim: *[128u32, 256, 512].get(rng.gen_range(0..3)).unwrap(),
            shared_mem: 0,
            nominal_exec: t,
            utilization: u,
            gpu_segment_id: (i / seg_len) as u32,
            is_memcpy: false,
        })
        .collect();
    // one CPU segment per GPU segment, even split with exact total
    let share = cpu_total / segments as Nanos;
    let cpu_segment_times = (0..segments)
        .map(|s| {
            if s == segments - 1 {
                cpu_total - share * (segments as Nanos - 1)
            } else {
                share
            }
        })
        .collect();
    TaskSpec {
        task_id: task_idx,
        library_tag: td.tag.into(),
        kernels,
        cpu_segment_times,
        issues_device_barrier: false,
    }
}

/// Two single-task chains for contention studies: 2D object detection
/// co-running with 3D object detection, aligned periods, generous
/// deadlines, no execution-time noise.
fn contention_pair(seed: u64) -> Vec<ChainSpec> {
    let defs = [
        ChainDef { modality: "camera", period_ms: 100.0, deadline_ms: 1000.0, cpu_ms: 5.0, cpu_sd: 0.0, gpu_sd: 0.0,
            tasks: &[TaskDef { tag: "2d-object-detection", kernels: 323, gpu_ms: 19.8, util: (0.33, 0.63) }] },
        ChainDef { modality: "lidar", period_ms: 100.0, deadline_ms: 1000.0, cpu_ms: 5.0, cpu_sd: 0.0, gpu_sd: 0.0,
            tasks: &[TaskDef { tag: "3d-object-detection", kernels: 41, gpu_ms: 13.4, util: (0.33, 0.63) }] },
    ];
    defs.iter()
        .enumerate()
        .map(|(i, d)| build_chain(i as u32, d, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_workflow_matches_chain_budgets() {
        let w = builtin_workload("c0-c9", 42).unwrap();
        assert_eq!(w.chains.len(), 10);
        w.validate().unwrap();
        let expect = [
            (150.0, 120.0, 17.4, 28.4),
            (150.0, 120.0, 16.2, 28.4),
            (500.0, 120.0, 21.0, 27.0),
            (200.0, 120.0, 20.2, 30.2),
            (150.0, 120.0, 21.8, 19.5),
            (200.0, 120.0, 20.2, 30.2),
            (200.0, 120.0, 21.8, 19.5),
            (500.0, 120.0, 21.0, 27.0),
            (200.0, 120.0, 21.3, 19.7),
            (500.0, 120.0, 11.2, 46.1),
        ];
        for (c, (period, d, cpu, gpu)) in w.chains.iter().zip(expect) {
            assert_eq!(c.period, ms(period), "chain {}", c.chain_id);
            assert_eq!(c.deadline, ms(d), "chain {}", c.chain_id);
            assert_eq!(c.cpu_total(), ms(cpu), "chain {} cpu", c.chain_id);
            assert_eq!(c.gpu_total(), ms(gpu), "chain {} gpu", c.chain_id);
        }
    }

    #[test]
    fn totals_are_seed_independent() {
        let a = builtin_workload("c0-c9", 1).unwrap();
        let b = builtin_workload("c0-c9", 2).unwrap();
        for (ca, cb) in a.chains.iter().zip(&b.chains) {
            assert_eq!(ca.gpu_total(), cb.gpu_total());
            assert_eq!(ca.cpu_total(), cb.cpu_total());
            assert_eq!(ca.total_kernels(), cb.total_kernels());
        }
    }

    #[test]
    fn second_workflow_includes_llm_chain() {
        let w = builtin_workload("c6-c10", 0).unwrap();
        assert_eq!(w.chains.len(), 5);
        let llm = w.chains.last().unwrap();
        assert_eq!(llm.chain_id, 10);
        assert_eq!(llm.period, ms(5000.0));
        assert_eq!(llm.deadline, ms(200.0));
        assert_eq!(llm.total_kernels(), 1106);
    }

    #[test]
    fn kernel_counts_match_profiling() {
        let w = builtin_workload("c0-c9", 3).unwrap();
        assert_eq!(w.chains[0].total_kernels(), 41 + 16);
        assert_eq!(w.chains[2].total_kernels(), 323 + 225);
    }
}
