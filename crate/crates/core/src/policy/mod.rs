//! Scheduling policies. Every policy implements the same decision
//! surface: stream binding, launch timing, synchronization mode and CPU
//! prioritization; the engine consults it at the urgency trigger points.

mod baselines;
mod classical;
mod urgengo;

pub use baselines::{RrUtilPolicy, StaticCriticalityPolicy, VanillaPolicy};
pub use classical::{ClassicalMetric, ClassicalPolicy};
pub use urgengo::UrgengoPolicy;

use crate::akb::ActiveKernelBuffer;
use crate::cpu::CpuPriority;
use crate::error::ConfigError;
use crate::gpu::DeviceParams;
use crate::units::{ms, us, Nanos};
use crate::workload::Workload;
use serde::{Deserialize, Serialize};

/// Kernel launch synchronization discipline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyncMode {
    /// A blocking synchronization after every launch.
    PerKernel,
    /// Pure asynchronous launching: one synchronization after the last
    /// kernel of each stream segment.
    EndOfSegment,
    /// Synchronize per batch of launches; with `overlap`, each wait
    /// targets the previous batch so launches overlap GPU execution.
    Batched { overlap: bool },
}

impl SyncMode {
    pub fn label(self) -> &'static str {
        match self {
            SyncMode::PerKernel => "per-kernel",
            SyncMode::EndOfSegment => "async",
            SyncMode::Batched { overlap: false } => "batched",
            SyncMode::Batched { overlap: true } => "batched-overlap",
        }
    }
}

/// Outcome of the launch-timing gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaunchGate {
    Proceed,
    /// Back off for one sleep interval, then re-evaluate.
    Delay { sleep: Nanos },
}

/// Scheduler tuning parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Urgency evaluation interval: a batch closes once its estimated GPU
    /// time reaches this.
    pub delta_eval: Nanos,
    /// Sleep-loop period of delayed launching.
    pub sleep_interval: Nanos,
    /// Kernels below this utilization are exempt from delayed launching.
    pub util_exemption: f64,
    /// Percentile of the active-urgency profile defining TH_urgent.
    pub th_percentile: f64,
    /// Moving-average window of the execution-time predictors.
    pub predictor_window: usize,
    /// Streams per task pool; 0 means one per device priority level.
    pub binding_streams: u32,
    /// OS priority levels available for normalized CPU priorities.
    pub os_priority_levels: u32,
    /// CPU cost per AKB access or update.
    pub akb_op_cost: Nanos,
    /// Sampling period of the urgency distribution profiler.
    pub th_sample_period: Nanos,
    /// Initial profiling window before the first threshold calibration.
    pub th_initial_window: Nanos,
    /// Recalibration cadence after the initial window.
    pub th_recalibrate: Nanos,
    /// Preset TH_urgent, skipping the profiling window (experiments and
    /// tests).
    pub th_initial: Option<f64>,
    /// Dispatch window length of the round-robin grouping baseline.
    pub rr_window: Nanos,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            delta_eval: us(500.0),
            sleep_interval: ms(1.0),
            util_exemption: 0.1,
            th_percentile: 95.0,
            predictor_window: 8,
            binding_streams: 0,
            os_priority_levels: 99,
            akb_op_cost: 500,
            th_sample_period: ms(10.0),
            th_initial_window: crate::units::secs(30.0),
            th_recalibrate: crate::units::secs(10.0),
            th_initial: None,
            rr_window: ms(2.0),
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.delta_eval == 0 || self.sleep_interval == 0 {
            return Err(ConfigError::invalid("scheduler: intervals must be positive"));
        }
        if !(0.0..=1.0).contains(&self.util_exemption) {
            return Err(ConfigError::invalid("scheduler: util_exemption must be in [0, 1]"));
        }
        if !(0.0 < self.th_percentile && self.th_percentile <= 100.0) {
            return Err(ConfigError::invalid("scheduler: th_percentile must be in (0, 100]"));
        }
        if self.predictor_window == 0 {
            return Err(ConfigError::invalid("scheduler: predictor_window must be >= 1"));
        }
        if self.os_priority_levels < 2 {
            return Err(ConfigError::invalid("scheduler: os_priority_levels must be >= 2"));
        }
        Ok(())
    }
}

/// Per-chain snapshot the engine hands to policies at decision points.
#[derive(Debug, Clone, Copy)]
pub struct ChainView {
    pub chain: u32,
    /// Last evaluated urgency of the chain's current instance.
    pub urgency: f64,
    /// Earliest absolute deadline among the chain's active instances.
    pub earliest_deadline: Nanos,
    /// Arrival time of the oldest active instance.
    pub oldest_arrival: Nanos,
    /// Predicted remaining work (CPU+GPU) of the oldest active instance.
    pub remaining_estimate: f64,
    /// Static chain utilization demand (total GPU time / period).
    pub utilization_demand: f64,
}

/// Read-only context for policy decisions.
pub struct DecisionCtx<'a> {
    pub now: Nanos,
    pub akb: &'a ActiveKernelBuffer,
    pub threshold: Option<f64>,
    pub workload: &'a Workload,
    pub device: &'a DeviceParams,
    pub scheduler: &'a SchedulerConfig,
    /// Chains with at least one active instance, ascending by chain id.
    pub active: &'a [ChainView],
}

/// The decision surface shared by all policies.
pub trait Policy {
    fn name(&self) -> &'static str;
    fn sync_mode(&self) -> SyncMode;

    /// Stream priority level for a task instance about to launch its first
    /// kernel; 0 is the highest priority.
    fn bind_level(&mut self, ctx: &DecisionCtx, chain: u32, own_urgency: f64) -> u32;

    /// Launch-timing gate, consulted before every kernel launch.
    fn launch_gate(
        &mut self,
        _ctx: &DecisionCtx,
        _chain: u32,
        _own_urgency: f64,
        _kernel_utilization: f64,
    ) -> LaunchGate {
        LaunchGate::Proceed
    }

    /// CPU priorities for all active chains, consulted when a chain starts
    /// a new CPU segment. `None` leaves priorities untouched.
    fn cpu_priorities(&mut self, _ctx: &DecisionCtx) -> Option<Vec<(u32, CpuPriority)>> {
        None
    }

    /// Whether to abandon the instance at a task start.
    fn early_exit(&self, _ctx: &DecisionCtx, _chain: u32, _own_urgency: f64) -> bool {
        false
    }

    /// Whether the modeled scheduler pays AKB access costs.
    fn charges_akb_overhead(&self) -> bool {
        false
    }

    /// Whether the engine should sample the urgency profile and calibrate
    /// TH_urgent.
    fn wants_threshold(&self) -> bool {
        false
    }

    /// Period of the policy's dispatch-window rotation, if any.
    fn rotation_window(&self) -> Option<Nanos> {
        None
    }

    /// Per-chain GPU dispatch admissibility (dispatch-window gating).
    fn admissible(&self, _chain: u32) -> bool {
        true
    }

    /// Whether `bind_level` reads `ctx.active`; lets the engine skip
    /// building chain views on the per-launch hot path. The context passed
    /// to `launch_gate` never carries chain views.
    fn binds_with_chain_views(&self) -> bool {
        false
    }

    fn on_instance_start(&mut self, _chain: u32, _instance: u64) {}
    fn on_instance_end(&mut self, _chain: u32, _instance: u64) {}
    fn on_rotate(&mut self) {}
}

/// Greedy batch partition: kernels extend the current batch while the
/// running sum of estimates stays below `delta`; the kernel whose
/// inclusion reaches it closes the batch. Returns exclusive end indices.
pub fn plan_batches(estimates: &[f64], delta: f64) -> Vec<usize> {
    let mut bounds = Vec::new();
    let mut sum = 0.0;
    for (i, &e) in estimates.iter().enumerate() {
        sum += e;
        if sum >= delta {
            bounds.push(i + 1);
            sum = 0.0;
        }
    }
    if bounds.last().copied() != Some(estimates.len()) && !estimates.is_empty() {
        bounds.push(estimates.len());
    }
    bounds
}

/// Rank of `own` among the given urgencies, descending, ties broken by
/// smaller chain id. Returns (rank, n) with rank 1-based and `own`
/// included in `n`.
pub fn urgency_rank(own_chain: u32, own_urgency: f64, others: &[(u32, f64)]) -> (usize, usize) {
    let mut rank = 1;
    for &(c, u) in others {
        if u > own_urgency || (u == own_urgency && c < own_chain) {
            rank += 1;
        }
    }
    (rank, others.len() + 1)
}

/// Linear normalization of rank `r` of `n` onto stream levels
/// 1..=num_pri-1 (level 0 stays reserved). A single candidate lands on the
/// middle level.
pub fn normalize_level(rank: usize, n: usize, num_pri: u32) -> u32 {
    debug_assert!(rank >= 1 && rank <= n);
    let lo = 1u32;
    let hi = num_pri - 1;
    if hi <= lo {
        return hi.max(1);
    }
    if n == 1 {
        return (num_pri - 1).div_ceil(2);
    }
    let span = (hi - lo) as f64;
    lo + ((rank - 1) as f64 * span / (n - 1) as f64).round() as u32
}

/// Normalizes a CPU priority rank into the OS priority range: identity
/// while ranks fit, linear compression otherwise.
pub fn normalize_cpu_priority(rank: usize, n: usize, os_levels: u32) -> u32 {
    debug_assert!(rank >= 1 && rank <= n);
    if n as u32 <= os_levels {
        return rank as u32;
    }
    1 + ((rank - 1) as f64 * (os_levels - 1) as f64 / (n - 1) as f64).round() as u32
}

/// Ranks chains by urgency descending (ties by chain id) and returns
/// (chain, rank) pairs, rank starting at 1.
pub fn rank_chains_by_urgency(views: &[ChainView]) -> Vec<(u32, CpuPriority)> {
    let mut order: Vec<(u32, f64)> = views.iter().map(|v| (v.chain, v.urgency)).collect();
    order.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("no NaN urgencies")
            .then(a.0.cmp(&b.0))
    });
    order
        .iter()
        .enumerate()
        .map(|(i, &(c, _))| (c, (i + 1) as CpuPriority))
        .collect()
}

/// Which policies exist, for the CLI surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyKind {
    Vanilla,
    Static,
    RrUtil,
    Edf,
    Sjf,
    Hrrn,
    Lcuf,
    Urgengo,
}

pub const POLICY_NAMES: &[&str] = &[
    "vanilla", "static", "rr-util", "edf", "sjf", "hrrn", "lcuf", "urgengo",
];

impl std::str::FromStr for PolicyKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "vanilla" => PolicyKind::Vanilla,
            "static" => PolicyKind::Static,
            "rr-util" => PolicyKind::RrUtil,
            "edf" => PolicyKind::Edf,
            "sjf" => PolicyKind::Sjf,
            "hrrn" => PolicyKind::Hrrn,
            "lcuf" => PolicyKind::Lcuf,
            "urgengo" => PolicyKind::Urgengo,
            other => {
                return Err(ConfigError::UnknownPolicy(
                    other.into(),
                    POLICY_NAMES.join("|"),
                ))
            }
        })
    }
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Vanilla => "vanilla",
            PolicyKind::Static => "static",
            PolicyKind::RrUtil => "rr-util",
            PolicyKind::Edf => "edf",
            PolicyKind::Sjf => "sjf",
            PolicyKind::Hrrn => "hrrn",
            PolicyKind::Lcuf => "lcuf",
            PolicyKind::Urgengo => "urgengo",
        }
    }
}

/// A policy selection with the UrgenGo ablation switches.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    /// Disable dynamic stream binding (UrgenGo ablation).
    pub no_binding: bool,
    /// Disable delayed launching (UrgenGo ablation).
    pub no_delay: bool,
    /// Override the UrgenGo synchronization mode.
    pub sync_override: Option<SyncMode>,
}

impl PolicySpec {
    pub fn new(kind: PolicyKind) -> Self {
        PolicySpec {
            kind,
            no_binding: false,
            no_delay: false,
            sync_override: None,
        }
    }

    pub fn label(&self) -> String {
        let mut s = self.kind.as_str().to_string();
        if self.no_binding {
            s.push_str("+nobind");
        }
        if self.no_delay {
            s.push_str("+nodelay");
        }
        if let Some(m) = self.sync_override {
            s.push('+');
            s.push_str(m.label());
        }
        s
    }
}

/// Instantiates the selected policy against a scaled workload.
pub fn build_policy(
    spec: PolicySpec,
    workload: &Workload,
    device: &DeviceParams,
    scheduler: &SchedulerConfig,
) -> Box<dyn Policy> {
    match spec.kind {
        PolicyKind::Vanilla => Box::new(VanillaPolicy::new(device)),
        PolicyKind::Static => Box::new(StaticCriticalityPolicy::new(workload, device)),
        PolicyKind::RrUtil => Box::new(RrUtilPolicy::new(workload, device, scheduler)),
        PolicyKind::Edf => Box::new(ClassicalPolicy::new(ClassicalMetric::Edf, workload)),
        PolicyKind::Sjf => Box::new(ClassicalPolicy::new(ClassicalMetric::Sjf, workload)),
        PolicyKind::Hrrn => Box::new(ClassicalPolicy::new(ClassicalMetric::Hrrn, workload)),
        PolicyKind::Lcuf => Box::new(ClassicalPolicy::new(ClassicalMetric::Lcuf, workload)),
        PolicyKind::Urgengo => Box::new(UrgengoPolicy::new(spec, device, scheduler)),
    }
}
