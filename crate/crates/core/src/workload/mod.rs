//! Static workload description: task chains, tasks, CPU segments and GPU
//! kernels, plus experiment scale factors and the offline profiling lookup
//! table. Immutable once validated; safe to share across runs.

mod builtin;
mod config;
mod lookup;
mod synth;

pub use builtin::{builtin_names, builtin_workload, DEFAULT_UTIL_RANGE};
pub use config::{ConfigFile, Overrides, RunConfig, WorkloadSource};
pub use lookup::{LookupRow, LookupTable};
pub use synth::{synthesize_kernel_times, synthesize_utilizations, TaskStats};

use crate::error::ConfigError;
use crate::rng::{self, Stream};
use crate::units::{ms, Nanos, NS_PER_MS};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One GPU kernel as recorded by offline profiling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kernel_id: u64,
    pub grid_dim: u32,
    pub block_dim: u32,
    /// Dynamic shared memory in bytes. Carried for completeness; has no
    /// scheduling effect.
    pub shared_mem: u32,
    /// Nominal execution time in nanoseconds.
    pub nominal_exec: Nanos,
    /// GPU occupancy fraction in [0, 1]. For memcpy operations this models
    /// copy-engine occupancy instead.
    pub utilization: f64,
    pub gpu_segment_id: u32,
    pub is_memcpy: bool,
}

/// One task: an alternating sequence of CPU segments and GPU segments
/// (contiguous kernel runs sharing a `gpu_segment_id`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u32,
    /// Library or model name, e.g. "2d-object-detection".
    pub library_tag: String,
    pub kernels: Vec<KernelSpec>,
    /// Nominal CPU segment durations in nanoseconds. A task always begins
    /// with CPU work before its first launch.
    pub cpu_segment_times: Vec<Nanos>,
    /// Whether each instance of this task ends with a device-wide barrier
    /// (cudaFree-class global synchronization).
    #[serde(default)]
    pub issues_device_barrier: bool,
}

impl TaskSpec {
    /// Kernel index ranges per GPU segment, in segment order.
    pub fn segment_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0usize;
        for i in 1..=self.kernels.len() {
            if i == self.kernels.len()
                || self.kernels[i].gpu_segment_id != self.kernels[start].gpu_segment_id
            {
                out.push(start..i);
                start = i;
            }
        }
        out
    }

    pub fn gpu_total(&self) -> Nanos {
        self.kernels.iter().map(|k| k.nominal_exec).sum()
    }

    pub fn cpu_total(&self) -> Nanos {
        self.cpu_segment_times.iter().sum()
    }

    /// Mean kernel utilization; the task-level occupancy used by grouping
    /// policies.
    pub fn mean_utilization(&self) -> f64 {
        if self.kernels.is_empty() {
            return 0.0;
        }
        self.kernels.iter().map(|k| k.utilization).sum::<f64>() / self.kernels.len() as f64
    }
}

/// One task chain, triggered by a periodic data frame with an end-to-end
/// deadline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainSpec {
    pub chain_id: u32,
    pub modality: String,
    /// Frame period in nanoseconds.
    pub period: Nanos,
    /// End-to-end deadline in nanoseconds.
    pub deadline: Nanos,
    pub tasks: Vec<TaskSpec>,
    /// Used only by the static-criticality baseline; higher is more
    /// critical. Derived from deadlines when absent.
    #[serde(default)]
    pub static_criticality: Option<i32>,
    /// Relative spread (one standard deviation / mean) of per-instance CPU
    /// time noise.
    #[serde(default)]
    pub cpu_time_cv: f64,
    /// Relative spread of per-instance GPU time noise.
    #[serde(default)]
    pub gpu_time_cv: f64,
}

impl ChainSpec {
    /// Total number of GPU kernels in the chain (N).
    pub fn total_kernels(&self) -> usize {
        self.tasks.iter().map(|t| t.kernels.len()).sum()
    }

    /// Total number of CPU segments in the chain (M).
    pub fn total_cpu_segments(&self) -> usize {
        self.tasks.iter().map(|t| t.cpu_segment_times.len()).sum()
    }

    pub fn gpu_total(&self) -> Nanos {
        self.tasks.iter().map(|t| t.gpu_total()).sum()
    }

    pub fn cpu_total(&self) -> Nanos {
        self.tasks.iter().map(|t| t.cpu_total()).sum()
    }

    /// GPU demand fraction: total kernel time per period.
    pub fn gpu_utilization_demand(&self) -> f64 {
        self.gpu_total() as f64 / self.period as f64
    }
}

/// Experiment scale factors.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Factors {
    /// Arrival-rate scale; periods are divided by this.
    pub f_a: f64,
    /// Deadline scale; deadlines are multiplied by this.
    pub f_d: f64,
    /// Fraction of chains whose deadlines are additionally halved.
    pub f_tight: f64,
}

impl Default for Factors {
    fn default() -> Self {
        Factors {
            f_a: 1.0,
            f_d: 1.0,
            f_tight: 0.0,
        }
    }
}

/// A fully validated workload: chains plus the run-level knobs that shape
/// arrivals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Workload {
    pub chains: Vec<ChainSpec>,
    pub factors: Factors,
    /// Uniform arrival jitter in nanoseconds.
    pub jitter: Nanos,
    /// Simulated duration in nanoseconds; arrivals cover [0, duration).
    pub duration: Nanos,
    pub seed: u64,
    /// Chain ids whose deadlines were halved by `apply_factors`; recorded
    /// in the run manifest.
    #[serde(default)]
    pub tight_chains: Vec<u32>,
}

impl Workload {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.chains.is_empty() {
            return Err(ConfigError::invalid("chains must be non-empty"));
        }
        let f = &self.factors;
        if !(f.f_a > 0.0) {
            return Err(ConfigError::invalid(format!("f_a must be > 0, got {}", f.f_a)));
        }
        if !(f.f_d > 0.0) {
            return Err(ConfigError::invalid(format!("f_d must be > 0, got {}", f.f_d)));
        }
        if !(0.0..=1.0).contains(&f.f_tight) {
            return Err(ConfigError::invalid(format!(
                "f_tight must be within [0, 1], got {}",
                f.f_tight
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for chain in &self.chains {
            validate_chain(chain)?;
            if !seen.insert(chain.chain_id) {
                return Err(ConfigError::invalid(format!(
                    "duplicate chain_id {}",
                    chain.chain_id
                )));
            }
        }
        Ok(())
    }
}

fn validate_chain(chain: &ChainSpec) -> Result<(), ConfigError> {
    let cid = chain.chain_id;
    if chain.period == 0 {
        return Err(ConfigError::invalid(format!("chain {cid}: period must be > 0")));
    }
    if chain.deadline == 0 {
        return Err(ConfigError::invalid(format!("chain {cid}: deadline must be > 0")));
    }
    if chain.tasks.is_empty() {
        return Err(ConfigError::invalid(format!("chain {cid}: tasks must be non-empty")));
    }
    if chain.cpu_time_cv < 0.0 || chain.gpu_time_cv < 0.0 {
        return Err(ConfigError::invalid(format!("chain {cid}: time spreads must be >= 0")));
    }
    for task in &chain.tasks {
        let tid = task.task_id;
        if task.kernels.is_empty() {
            return Err(ConfigError::invalid(format!(
                "chain {cid} task {tid}: kernels must be non-empty"
            )));
        }
        if task.cpu_segment_times.is_empty() {
            return Err(ConfigError::invalid(format!(
                "chain {cid} task {tid}: a task needs at least one CPU segment"
            )));
        }
        let mut last_seg: Option<u32> = None;
        for k in &task.kernels {
            if k.nominal_exec == 0 {
                return Err(ConfigError::invalid(format!(
                    "chain {cid} task {tid} kernel {}: exec time must be > 0",
                    k.kernel_id
                )));
            }
            if !(0.0..=1.0).contains(&k.utilization) {
                return Err(ConfigError::invalid(format!(
                    "chain {cid} task {tid} kernel {}: utilization must be within [0, 1]",
                    k.kernel_id
                )));
            }
            match last_seg {
                Some(s) if k.gpu_segment_id < s => {
                    return Err(ConfigError::invalid(format!(
                        "chain {cid} task {tid}: gpu_segment_id must be non-decreasing \
                         and contiguous (kernel {} has segment {} after {})",
                        k.kernel_id, k.gpu_segment_id, s
                    )));
                }
                Some(s) if k.gpu_segment_id > s + 1 => {
                    return Err(ConfigError::invalid(format!(
                        "chain {cid} task {tid}: gpu_segment_id skips from {} to {}",
                        s, k.gpu_segment_id
                    )));
                }
                _ => {}
            }
            last_seg = Some(k.gpu_segment_id);
        }
    }
    Ok(())
}

/// Applies the experiment scale factors: deadlines multiplied by `f_d`,
/// periods divided by `f_a`, and a seed-driven selection of
/// `ceil(f_tight * num_chains)` chains gets deadlines additionally halved.
/// The selection is recorded in `tight_chains`.
pub fn apply_factors(mut w: Workload) -> Workload {
    let f = w.factors;
    for chain in &mut w.chains {
        chain.deadline = ((chain.deadline as f64) * f.f_d).round() as Nanos;
        chain.period = ((chain.period as f64) / f.f_a).round() as Nanos;
    }
    let n = w.chains.len();
    let k = (f.f_tight * n as f64).ceil() as usize;
    let k = k.min(n);
    let mut picked = Vec::new();
    if k > 0 {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng::derive(w.seed, Stream::TightSelection);
        // Fisher-Yates
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for &idx in order.iter().take(k) {
            w.chains[idx].deadline /= 2;
            picked.push(w.chains[idx].chain_id);
        }
        picked.sort_unstable();
    }
    w.tight_chains = picked;
    w
}

/// Periodic arrival timestamps with uniform jitter: `t_i = i*period + u_i`,
/// `u_i ~ U[0, jitter]`, for every `i*period` in `[0, duration)`. Strictly
/// increasing and reproducible per seed.
pub fn generate_arrivals(chain: &ChainSpec, duration: Nanos, jitter: Nanos, seed: u64) -> Vec<Nanos> {
    let mut rng = rng::derive(seed, Stream::Arrivals(chain.chain_id));
    let mut out = Vec::new();
    let mut base: Nanos = 0;
    let mut prev: Option<Nanos> = None;
    while base < duration {
        let offs = if jitter == 0 { 0 } else { rng.gen_range(0..=jitter) };
        let mut t = base + offs;
        if let Some(p) = prev {
            t = t.max(p + 1);
        }
        out.push(t);
        prev = Some(t);
        base += chain.period;
    }
    out
}

/// Per-instance multiplicative execution-time noise, sampled from the
/// chain's relative spreads. The spread is interpreted as one standard
/// deviation of a normal factor around 1.0, truncated at +/-3 sigma and at
/// zero.
#[derive(Debug, Clone, Copy)]
pub struct InstanceNoise {
    pub cpu_factor: f64,
    pub gpu_factor: f64,
}

pub fn sample_instance_noise<R: Rng>(chain: &ChainSpec, rng: &mut R) -> InstanceNoise {
    InstanceNoise {
        cpu_factor: truncated_factor(chain.cpu_time_cv, rng),
        gpu_factor: truncated_factor(chain.gpu_time_cv, rng),
    }
}

fn truncated_factor<R: Rng>(cv: f64, rng: &mut R) -> f64 {
    if cv <= 0.0 {
        return 1.0;
    }
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(1.0, cv).expect("valid normal");
    loop {
        let v: f64 = dist.sample(rng);
        if (v - 1.0).abs() <= 3.0 * cv && v > 0.0 {
            return v;
        }
    }
}

/// Convenience constructor used by tests and examples: a chain with a
/// single task whose kernels and CPU segments are given directly in
/// milliseconds.
pub fn simple_chain(
    chain_id: u32,
    period_ms: f64,
    deadline_ms: f64,
    kernel_times_ms: &[f64],
    utilizations: &[f64],
    cpu_segments_ms: &[f64],
) -> ChainSpec {
    assert_eq!(kernel_times_ms.len(), utilizations.len());
    let kernels = kernel_times_ms
        .iter()
        .zip(utilizations)
        .enumerate()
        .map(|(i, (&t, &u))| KernelSpec {
            kernel_id: (chain_id as u64) << 32 | i as u64,
            grid_dim: 32,
            block_dim: 256,
            shared_mem: 0,
            nominal_exec: ms(t),
            utilization: u,
            gpu_segment_id: 0,
            is_memcpy: false,
        })
        .collect();
    ChainSpec {
        chain_id,
        modality: "synthetic".into(),
        period: ms(period_ms),
        deadline: ms(deadline_ms),
        tasks: vec![TaskSpec {
            task_id: 0,
            library_tag: "synthetic".into(),
            kernels,
            cpu_segment_times: cpu_segments_ms.iter().map(|&v| ms(v)).collect(),
            issues_device_barrier: false,
        }],
        static_criticality: None,
        cpu_time_cv: 0.0,
        gpu_time_cv: 0.0,
    }
}

pub fn ms_u64(v: f64) -> Nanos {
    (v * NS_PER_MS as f64).round() as Nanos
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::{ms, secs};

    fn chain_c0() -> ChainSpec {
        simple_chain(0, 150.0, 120.0, &[10.0], &[0.4], &[5.0])
    }

    fn workload_of(chains: Vec<ChainSpec>, factors: Factors, seed: u64) -> Workload {
        Workload {
            chains,
            factors,
            jitter: ms(15.0),
            duration: secs(1.0),
            seed,
            tight_chains: vec![],
        }
    }

    #[test]
    fn empty_chain_list_rejected() {
        let w = workload_of(vec![], Factors::default(), 0);
        let err = w.validate().unwrap_err();
        assert!(err.to_string().contains("chains must be non-empty"));
    }

    #[test]
    fn f_tight_out_of_range_rejected() {
        let mut f = Factors::default();
        f.f_tight = 1.2;
        let w = workload_of(vec![chain_c0()], f, 0);
        let err = w.validate().unwrap_err();
        assert!(err.to_string().contains("f_tight"));
    }

    #[test]
    fn validation_names_offending_chain_and_task() {
        let mut c = chain_c0();
        c.tasks[0].cpu_segment_times.clear();
        let w = workload_of(vec![c], Factors::default(), 0);
        let err = w.validate().unwrap_err().to_string();
        assert!(err.contains("chain 0 task 0"), "{err}");
    }

    #[test]
    fn identity_factors_are_a_no_op() {
        let w = workload_of(vec![chain_c0()], Factors::default(), 7);
        let before = (w.chains[0].period, w.chains[0].deadline);
        let scaled = apply_factors(w);
        assert_eq!((scaled.chains[0].period, scaled.chains[0].deadline), before);
        assert!(scaled.tight_chains.is_empty());
        // re-application is still a no-op
        let again = apply_factors(scaled.clone());
        assert_eq!(again.chains[0].deadline, scaled.chains[0].deadline);
    }

    #[test]
    fn deadline_scaling_matches_f_d() {
        let mut f = Factors::default();
        f.f_d = 1.5;
        let w = workload_of(vec![chain_c0()], f, 0);
        let scaled = apply_factors(w);
        assert_eq!(scaled.chains[0].deadline, ms(180.0));
    }

    #[test]
    fn tight_selection_halves_exactly_ceil_fraction() {
        let chains: Vec<ChainSpec> = (0..10)
            .map(|i| simple_chain(i, 150.0, 120.0, &[10.0], &[0.4], &[5.0]))
            .collect();
        let mut f = Factors::default();
        f.f_tight = 0.4;
        let w = workload_of(chains, f, 42);
        let scaled = apply_factors(w);
        let halved: Vec<u32> = scaled
            .chains
            .iter()
            .filter(|c| c.deadline == ms(60.0))
            .map(|c| c.chain_id)
            .collect();
        assert_eq!(halved.len(), 4);
        let full = scaled.chains.iter().filter(|c| c.deadline == ms(120.0)).count();
        assert_eq!(full, 6);
        let mut recorded = scaled.tight_chains.clone();
        recorded.sort_unstable();
        let mut observed = halved;
        observed.sort_unstable();
        assert_eq!(recorded, observed);
        // same seed, same selection
        let mut f2 = Factors::default();
        f2.f_tight = 0.4;
        let again = apply_factors(workload_of(
            (0..10)
                .map(|i| simple_chain(i, 150.0, 120.0, &[10.0], &[0.4], &[5.0]))
                .collect(),
            f2,
            42,
        ));
        assert_eq!(again.tight_chains, recorded);
    }

    #[test]
    fn arrivals_zero_jitter() {
        let c = chain_c0();
        let got = generate_arrivals(&c, secs(0.45), 0, 1);
        assert_eq!(got, vec![0, ms(150.0), ms(300.0)]);
    }

    #[test]
    fn arrivals_zero_duration_empty() {
        let c = chain_c0();
        assert!(generate_arrivals(&c, 0, ms(15.0), 1).is_empty());
    }

    #[test]
    fn arrivals_jitter_bounds_and_reproducibility() {
        let c = chain_c0();
        let dur = secs(1_500.0); // 10^4 arrivals at 150 ms
        let a = generate_arrivals(&c, dur, ms(15.0), 9);
        let b = generate_arrivals(&c, dur, ms(15.0), 9);
        assert_eq!(a, b);
        assert!(a.len() >= 10_000);
        for (i, &t) in a.iter().enumerate() {
            let base = i as u64 * c.period;
            assert!(t >= base && t <= base + ms(15.0), "offset out of range at {i}");
            if i > 0 {
                assert!(t > a[i - 1], "not strictly increasing at {i}");
                let gap = t - a[i - 1];
                assert!(gap >= ms(135.0) && gap <= ms(165.0), "inter-arrival {gap}");
            }
        }
    }

    #[test]
    fn instance_noise_truncated_and_positive() {
        let mut c = chain_c0();
        c.cpu_time_cv = 0.28;
        c.gpu_time_cv = 0.11;
        let mut rng = crate::rng::derive(3, Stream::InstanceNoise(0));
        for _ in 0..10_000 {
            let n = sample_instance_noise(&c, &mut rng);
            assert!(n.cpu_factor > 0.0 && (n.cpu_factor - 1.0).abs() <= 3.0 * 0.28 + 1e-12);
            assert!(n.gpu_factor > 0.0 && (n.gpu_factor - 1.0).abs() <= 3.0 * 0.11 + 1e-12);
        }
    }
}
