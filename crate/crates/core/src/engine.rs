//! Deterministic discrete-event core. One engine run owns a simulated
//! clock, a (time, seq)-ordered event queue, the fixed-priority CPU model,
//! the GPU device, the AKB and urgency services, and one executor per
//! task. Executors drain per-task inboxes of chain instances, alternating
//! CPU segments with kernel launch loops under the selected policy.

use crate::akb::{ActiveKernelBuffer, BindingKey, StreamId};
use crate::cpu::{ActivityId, CpuModel, CpuReaction, DEFAULT_PRIORITY};
use crate::error::SimError;
use crate::gpu::{detect_collisions, BatchEventId, DeviceParams, GpuDevice, GpuReaction, KernelInfo};
use crate::metrics::{clamp_timeline, ChainStats, CollisionHistogram, MetricsReport, RunManifest};
use crate::policy::{
    build_policy, DecisionCtx, LaunchGate, ChainView, Policy, PolicySpec, SchedulerConfig, SyncMode,
};
use crate::rng::{self, Stream};
use crate::trace::{TraceKind, TraceRecord, TraceSink};
use crate::units::{Nanos, NS_PER_S};
use crate::urgency::{InstanceProgress, ThresholdCalibrator, UrgencyService};
use crate::workload::{
    generate_arrivals, sample_instance_noise, InstanceNoise, LookupTable, Workload,
};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::ops::Range;
use std::path::PathBuf;

pub type InstId = u32;
pub type ExecId = u32;

/// Everything a single simulation run consumes. The workload must already
/// be factor-scaled.
#[derive(Debug, Clone)]
pub struct SimParams {
    pub workload: Workload,
    pub device: DeviceParams,
    pub scheduler: SchedulerConfig,
    /// Relative urgency-estimation error, sampled uniformly per task
    /// instance from [1-noise, 1+noise].
    pub noise_pct: f64,
    /// The first N chains issue a device-wide barrier at the end of each
    /// instance.
    pub cudafree_tasks: u32,
    /// Drop the older instance when a new frame arrives while the previous
    /// one is still active.
    pub shed_backlog: bool,
    pub lookup: LookupTable,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub trace_csv: Option<PathBuf>,
    pub urgency_csv: Option<PathBuf>,
    pub capture_trace: bool,
}

#[derive(Debug)]
pub struct RunResult {
    pub report: MetricsReport,
    pub trace: Option<Vec<TraceRecord>>,
}

/// Engine occurrences relevant to urgency evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerEvent {
    FrameArrival,
    CpuSegmentStart,
    KernelLaunch,
    KernelCompleted,
    SyncSatisfied,
    SleepWake,
}

/// Returns true iff chain urgency is evaluated at this occurrence: a new
/// data frame, a new CPU segment, a new kernel launch, and each launch
/// synchronization point (which under batched launching makes evaluation
/// periodic).
pub fn is_urgency_trigger(ev: TriggerEvent) -> bool {
    matches!(
        ev,
        TriggerEvent::FrameArrival
            | TriggerEvent::CpuSegmentStart
            | TriggerEvent::KernelLaunch
            | TriggerEvent::SyncSatisfied
    )
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    FrameArrival { chain: u32 },
    CpuDone { activity: ActivityId, token: u64 },
    KernelDone { seq: u64, token: u64 },
    SleepWake { exec: ExecId },
    BarrierDone,
    ThresholdSample,
    GroupRotate,
}

struct QEv {
    t: Nanos,
    seq: u64,
    ev: Ev,
}

impl PartialEq for QEv {
    fn eq(&self, other: &Self) -> bool {
        self.t == other.t && self.seq == other.seq
    }
}
impl Eq for QEv {}
impl PartialOrd for QEv {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QEv {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap, we want the earliest event
        (other.t, other.seq).cmp(&(self.t, self.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Active,
    Done,
}

#[derive(Debug)]
struct Instance {
    chain: u32,
    idx_in_chain: u64,
    t_arr: Nanos,
    deadline_abs: Nanos,
    kernel_counter: usize,
    cpu_seg_counter: usize,
    noise: InstanceNoise,
    estimate_noise: f64,
    launched: usize,
    completed_kernels: usize,
    status: Status,
    shed: bool,
    last_urgency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    CpuSeg,
    Sleeping,
    WakeCost,
    LaunchOverhead,
    AwaitBatch { covered: usize, final_wait: bool },
    SyncCost { covered: usize, final_wait: bool },
    Barrier,
}

#[derive(Debug)]
struct ActiveRun {
    inst: InstId,
    seg: usize,
    phase: Phase,
    batches: Vec<usize>,
    batch_events: Vec<Option<BatchEventId>>,
    batches_removed: usize,
    batch_idx: usize,
    kernel_idx: usize,
    prewait_done: usize,
    bound: Option<(StreamId, u32)>,
}

impl ActiveRun {
    fn new(inst: InstId) -> Self {
        ActiveRun {
            inst,
            seg: 0,
            phase: Phase::CpuSeg,
            batches: Vec::new(),
            batch_events: Vec::new(),
            batches_removed: 0,
            batch_idx: 0,
            kernel_idx: 0,
            prewait_done: 1,
            bound: None,
        }
    }

    fn batch_start(&self, b: usize) -> usize {
        if b == 0 {
            0
        } else {
            self.batches[b - 1]
        }
    }

    fn batch_size(&self, b: usize) -> usize {
        self.batches[b] - self.batch_start(b)
    }
}

#[derive(Debug)]
struct Executor {
    chain: u32,
    task: u32,
    activity: ActivityId,
    streams: Vec<StreamId>,
    inbox: VecDeque<InstId>,
    run: Option<ActiveRun>,
    pending_overhead: Nanos,
    seg_started_at: Nanos,
}

#[derive(Debug)]
struct ChainRt {
    kernel_offsets: Vec<usize>,
    cpu_offsets: Vec<usize>,
    seg_ranges: Vec<Vec<Range<usize>>>,
    exec_ids: Vec<ExecId>,
    active: VecDeque<InstId>,
    total_kernels: usize,
    total_cpu_segments: Vec<usize>,
    noise_rng: ChaCha12Rng,
    unoise_rng: ChaCha12Rng,
    arrivals_remaining: usize,
    next_instance_idx: u64,
    util_demand: f64,
}

pub struct Engine {
    clock: Nanos,
    queue: BinaryHeap<QEv>,
    next_ev_seq: u64,
    params: SimParams,
    cpu: CpuModel,
    gpu: GpuDevice,
    akb: ActiveKernelBuffer,
    urgency: UrgencyService,
    calibrator: ThresholdCalibrator,
    instances: Vec<Instance>,
    execs: Vec<Executor>,
    rt: Vec<ChainRt>,
    waiters: BTreeMap<BatchEventId, ExecId>,
    barrier_waiters: Vec<ExecId>,
    chain_stats: BTreeMap<u32, ChainStats>,
    collisions: CollisionHistogram,
    sync_rng: ChaCha12Rng,
    trace: TraceSink,
    outstanding: usize,
    arrivals_pending: usize,
    frame_arrivals: u64,
    completed_instances: u64,
    sched_overhead_ns: u64,
    sync_cost_ns: u64,
    akb_charged: bool,
    sync_mode: SyncMode,
    manifest: RunManifest,
    fail: Option<SimError>,
}

/// Builds the policy and runs the simulation to quiescence.
pub fn run_simulation(
    params: SimParams,
    spec: PolicySpec,
    manifest: RunManifest,
    options: RunOptions,
) -> Result<RunResult, SimError> {
    let mut policy = build_policy(spec, &params.workload, &params.device, &params.scheduler);
    let mut engine = Engine::new(params, manifest, options, policy.as_ref());
    engine.seed_events(policy.as_ref());
    engine.main_loop(policy.as_mut())?;
    Ok(engine.finish())
}

impl Engine {
    fn new(params: SimParams, manifest: RunManifest, options: RunOptions, policy: &dyn Policy) -> Self {
        let w = &params.workload;
        let mut trace = TraceSink::new();
        if let Some(p) = &options.trace_csv {
            trace = trace.with_csv(p).expect("trace file");
        }
        if let Some(p) = &options.urgency_csv {
            trace = trace.with_urgency_csv(p).expect("urgency file");
        }
        if options.capture_trace {
            trace = trace.with_capture();
        }

        let urgency = UrgencyService::new(w, &params.lookup, params.scheduler.predictor_window);
        let mut calibrator = ThresholdCalibrator::new(
            params.scheduler.th_percentile,
            params.scheduler.th_sample_period,
            params.scheduler.th_initial_window,
            params.scheduler.th_recalibrate,
        );
        if let Some(th) = params.scheduler.th_initial {
            calibrator.set_threshold(th);
        }
        let mut cpu = CpuModel::new(params.device.cpu_cores);
        let mut gpu = GpuDevice::new(params.device.clone());

        let mut execs = Vec::new();
        let mut rt = Vec::new();
        let mut chain_stats = BTreeMap::new();
        for (ci, chain) in w.chains.iter().enumerate() {
            chain_stats.insert(chain.chain_id, ChainStats::default());
            let mut kernel_offsets = Vec::new();
            let mut cpu_offsets = Vec::new();
            let mut seg_ranges = Vec::new();
            let mut exec_ids = Vec::new();
            let mut total_cpu_segments = Vec::new();
            let mut koff = 0usize;
            let mut coff = 0usize;
            for (ti, task) in chain.tasks.iter().enumerate() {
                kernel_offsets.push(koff);
                cpu_offsets.push(coff);
                koff += task.kernels.len();
                coff += task.cpu_segment_times.len();
                total_cpu_segments.push(task.cpu_segment_times.len());
                seg_ranges.push(task.segment_ranges());
                let activity = cpu.register(DEFAULT_PRIORITY);
                let streams = (0..params.device.num_priorities)
                    .map(|lvl| gpu.create_stream(lvl))
                    .collect();
                let id = execs.len() as ExecId;
                execs.push(Executor {
                    chain: ci as u32,
                    task: ti as u32,
                    activity,
                    streams,
                    inbox: VecDeque::new(),
                    run: None,
                    pending_overhead: 0,
                    seg_started_at: 0,
                });
                exec_ids.push(id);
            }
            rt.push(ChainRt {
                kernel_offsets,
                cpu_offsets,
                seg_ranges,
                exec_ids,
                active: VecDeque::new(),
                total_kernels: chain.total_kernels(),
                total_cpu_segments,
                noise_rng: rng::derive(w.seed, Stream::InstanceNoise(ci as u32)),
                unoise_rng: rng::derive(w.seed, Stream::UrgencyNoise(ci as u32)),
                arrivals_remaining: 0,
                next_instance_idx: 0,
                util_demand: chain.gpu_utilization_demand(),
            });
        }

        Engine {
            clock: 0,
            queue: BinaryHeap::new(),
            next_ev_seq: 0,
            sync_rng: rng::derive(w.seed, Stream::SyncCost),
            akb: ActiveKernelBuffer::new(w.chains.len()),
            urgency,
            calibrator,
            instances: Vec::new(),
            execs,
            rt,
            waiters: BTreeMap::new(),
            barrier_waiters: Vec::new(),
            chain_stats,
            collisions: CollisionHistogram::default(),
            cpu,
            gpu,
            trace,
            outstanding: 0,
            arrivals_pending: 0,
            frame_arrivals: 0,
            completed_instances: 0,
            sched_overhead_ns: 0,
            sync_cost_ns: 0,
            akb_charged: policy.charges_akb_overhead(),
            sync_mode: policy.sync_mode(),
            manifest,
            params,
            fail: None,
        }
    }

    fn seed_events(&mut self, policy: &dyn Policy) {
        let (duration, jitter, seed) = {
            let w = &self.params.workload;
            (w.duration, w.jitter, w.seed)
        };
        for ci in 0..self.params.workload.chains.len() {
            let arrivals =
                generate_arrivals(&self.params.workload.chains[ci], duration, jitter, seed);
            self.rt[ci].arrivals_remaining = arrivals.len();
            self.arrivals_pending += arrivals.len();
            for t in arrivals {
                self.push_event(t, Ev::FrameArrival { chain: ci as u32 });
            }
        }
        if policy.wants_threshold() {
            self.push_event(
                self.params.scheduler.th_sample_period,
                Ev::ThresholdSample,
            );
        }
        if let Some(window) = policy.rotation_window() {
            self.push_event(window, Ev::GroupRotate);
        }
    }

    fn push_event(&mut self, t: Nanos, ev: Ev) {
        let seq = self.next_ev_seq;
        self.next_ev_seq += 1;
        self.queue.push(QEv { t, seq, ev });
    }

    fn main_loop(&mut self, policy: &mut dyn Policy) -> Result<(), SimError> {
        while let Some(qev) = self.queue.pop() {
            if qev.t < self.clock {
                return Err(SimError::Invariant {
                    time_ns: self.clock,
                    what: format!("event scheduled in the past (t={})", qev.t),
                    trace: self.trace.recent_dump(),
                });
            }
            self.clock = qev.t;
            self.handle(policy, qev.ev);
            if let Some(err) = self.fail.take() {
                return Err(err);
            }
        }
        if self.outstanding > 0 {
            return Err(SimError::Deadlock {
                waiting: self.outstanding,
                trace: self.trace.recent_dump(),
            });
        }
        Ok(())
    }

    fn handle(&mut self, policy: &mut dyn Policy, ev: Ev) {
        match ev {
            Ev::FrameArrival { chain } => self.on_frame_arrival(policy, chain),
            Ev::CpuDone { activity, token } => {
                let (genuine, reactions) = self.cpu.on_done(activity, token, self.clock);
                self.apply_cpu_reactions(reactions);
                if genuine {
                    // activities map 1:1 onto executors in registration order
                    self.on_cpu_work_done(policy, activity as ExecId);
                }
            }
            Ev::KernelDone { seq, token } => {
                let outcome = {
                    let adm = admissibility(&*policy);
                    self.gpu.on_completion(seq, token, self.clock, &adm)
                };
                if let Some(out) = outcome {
                    let kind = if out.finished.is_memcpy {
                        TraceKind::MemcpyCompleted
                    } else {
                        TraceKind::KernelCompleted
                    };
                    self.trace.record(
                        self.clock,
                        kind,
                        out.finished.chain as i64,
                        out.finished.instance as i64,
                        &format!("k={} stream={}", out.finished.kernel_id, out.finished_stream),
                    );
                    self.instances[out.finished.instance as usize].completed_kernels += 1;
                    self.apply_gpu_reactions(policy, out.reactions);
                }
            }
            Ev::SleepWake { exec } => self.on_sleep_wake(exec),
            Ev::BarrierDone => self.on_barrier_done(policy),
            Ev::ThresholdSample => self.on_threshold_sample(policy),
            Ev::GroupRotate => self.on_group_rotate(policy),
        }
    }

    // ---- event handlers ----

    fn on_frame_arrival(&mut self, policy: &mut dyn Policy, chain: u32) {
        let ci = chain as usize;
        let inst_id = self.instances.len() as InstId;
        let chain_spec = &self.params.workload.chains[ci];
        let noise = sample_instance_noise(chain_spec, &mut self.rt[ci].noise_rng);
        let deadline_abs = self.clock + chain_spec.deadline;
        let idx = self.rt[ci].next_instance_idx;
        self.rt[ci].next_instance_idx += 1;
        self.instances.push(Instance {
            chain,
            idx_in_chain: idx,
            t_arr: self.clock,
            deadline_abs,
            kernel_counter: 0,
            cpu_seg_counter: 0,
            noise,
            estimate_noise: 1.0,
            launched: 0,
            completed_kernels: 0,
            status: Status::Active,
            shed: false,
            last_urgency: 0.0,
        });
        self.rt[ci].arrivals_remaining -= 1;
        self.arrivals_pending -= 1;
        self.outstanding += 1;
        self.frame_arrivals += 1;
        let cid = self.params.workload.chains[ci].chain_id;
        self.chain_stats.get_mut(&cid).expect("chain registered").total += 1;

        if self.params.shed_backlog {
            let actives: Vec<InstId> = self.rt[ci].active.iter().copied().collect();
            for other in actives {
                self.instances[other as usize].shed = true;
            }
        }
        self.rt[ci].active.push_back(inst_id);
        policy.on_instance_start(chain, inst_id as u64);

        self.evaluate(inst_id);
        self.trace.record(
            self.clock,
            TraceKind::FrameArrival,
            chain as i64,
            inst_id as i64,
            &format!("idx={idx}"),
        );

        let ex = self.rt[ci].exec_ids[0];
        self.execs[ex as usize].inbox.push_back(inst_id);
        self.advance_idle(policy, ex);
    }

    fn on_cpu_work_done(&mut self, policy: &mut dyn Policy, ex: ExecId) {
        let phase = match &self.execs[ex as usize].run {
            Some(run) => run.phase,
            None => {
                self.fail = Some(SimError::Invariant {
                    time_ns: self.clock,
                    what: format!("executor {ex} finished CPU work without a run"),
                    trace: self.trace.recent_dump(),
                });
                return;
            }
        };
        match phase {
            Phase::CpuSeg => self.on_cpu_segment_done(policy, ex),
            // awake again: the launch loop re-evaluates urgency and
            // re-checks the AKB
            Phase::WakeCost => self.launch_loop(policy, ex),
            Phase::LaunchOverhead => self.on_launch_issued(policy, ex),
            Phase::SyncCost { covered, final_wait } => {
                self.on_sync_cost_done(policy, ex, covered, final_wait)
            }
            Phase::Sleeping | Phase::AwaitBatch { .. } | Phase::Barrier => {
                self.fail = Some(SimError::Invariant {
                    time_ns: self.clock,
                    what: format!("executor {ex} got CPU completion in phase {phase:?}"),
                    trace: self.trace.recent_dump(),
                });
            }
        }
    }

    fn on_sleep_wake(&mut self, exec: ExecId) {
        let ex = exec as usize;
        let run = self.execs[ex].run.as_mut().expect("sleeping executor has a run");
        assert_eq!(run.phase, Phase::Sleeping);
        run.phase = Phase::WakeCost;
        let inst = run.inst;
        self.trace.record(
            self.clock,
            TraceKind::SleepWake,
            self.execs[ex].chain as i64,
            inst as i64,
            "",
        );
        let cost = self.params.device.context_switch_cost + self.take_overhead(exec);
        self.submit_cpu(exec, cost);
    }

    fn on_barrier_done(&mut self, policy: &mut dyn Policy) {
        let (released, reactions) = {
            let adm = admissibility(&*policy);
            self.gpu.barrier_done(self.clock, &adm)
        };
        let waiters = std::mem::take(&mut self.barrier_waiters);
        assert_eq!(released, waiters.len(), "barrier waiter accounting");
        self.apply_gpu_reactions(policy, reactions);
        for ex in waiters {
            let chain = self.execs[ex as usize].chain;
            let inst = self.run_of(ex).inst;
            self.trace.record(
                self.clock,
                TraceKind::DeviceBarrierDone,
                chain as i64,
                inst as i64,
                "",
            );
            self.task_end_post(policy, ex);
        }
    }

    fn on_threshold_sample(&mut self, _policy: &mut dyn Policy) {
        if let Some(max) = self.akb.max_active_urgency() {
            self.calibrator.record(max);
        }
        if self.calibrator.maybe_recalibrate(self.clock) {
            self.trace.record(
                self.clock,
                TraceKind::ThresholdRecalibrated,
                -1,
                -1,
                &format!("th={:.6}", self.calibrator.threshold().unwrap_or(f64::NAN)),
            );
        }
        if self.outstanding > 0 || self.arrivals_pending > 0 {
            self.push_event(
                self.clock + self.params.scheduler.th_sample_period,
                Ev::ThresholdSample,
            );
        }
    }

    fn on_group_rotate(&mut self, policy: &mut dyn Policy) {
        policy.on_rotate();
        let reactions = {
            let adm = admissibility(&*policy);
            self.gpu.dispatch(self.clock, &adm)
        };
        self.apply_gpu_reactions(policy, reactions);
        if let Some(window) = policy.rotation_window() {
            if self.outstanding > 0 || self.arrivals_pending > 0 {
                self.push_event(self.clock + window, Ev::GroupRotate);
            }
        }
    }

    // ---- executor driver ----

    fn run_of(&self, ex: ExecId) -> &ActiveRun {
        self.execs[ex as usize].run.as_ref().expect("executor has a run")
    }

    fn run_mut(&mut self, ex: ExecId) -> &mut ActiveRun {
        self.execs[ex as usize].run.as_mut().expect("executor has a run")
    }

    /// Starts work from the inbox whenever the executor is idle.
    fn advance_idle(&mut self, policy: &mut dyn Policy, ex: ExecId) {
        loop {
            if self.execs[ex as usize].run.is_some() {
                return;
            }
            let Some(inst) = self.execs[ex as usize].inbox.pop_front() else {
                return;
            };
            if self.instances[inst as usize].shed {
                self.finalize_early(policy, inst, "shed");
                continue;
            }
            self.execs[ex as usize].run = Some(ActiveRun::new(inst));
            if self.begin_task(policy, ex) {
                return;
            }
        }
    }

    /// Task-start checks; returns true when the executor blocked on work,
    /// false when the instance exited and the executor is idle again.
    fn begin_task(&mut self, policy: &mut dyn Policy, ex: ExecId) -> bool {
        let inst = self.run_of(ex).inst;
        let chain = self.execs[ex as usize].chain;
        if self.instances[inst as usize].shed {
            self.execs[ex as usize].run = None;
            self.finalize_early(policy, inst, "shed");
            return false;
        }
        // urgency-estimation noise is resampled per task instance
        if self.params.noise_pct > 0.0 {
            let p = self.params.noise_pct;
            let f = 1.0 + self.rt[chain as usize].unoise_rng.gen_range(-p..=p);
            self.instances[inst as usize].estimate_noise = f.max(0.0);
        }
        let ul = self.evaluate(inst);
        self.charge_akb(ex, 1);
        let exit = {
            let ctx = self.ctx(&[]);
            policy.early_exit(&ctx, chain, ul)
        };
        if exit {
            self.execs[ex as usize].run = None;
            self.finalize_early(policy, inst, "negative-urgency");
            return false;
        }
        self.enter_cpu_segment(policy, ex);
        true
    }

    fn enter_cpu_segment(&mut self, policy: &mut dyn Policy, ex: ExecId) {
        let (chain, task, seg, inst) = {
            let e = &self.execs[ex as usize];
            let run = e.run.as_ref().expect("run");
            (e.chain, e.task, run.seg, run.inst)
        };
        let ci = chain as usize;
        let flat = self.rt[ci].cpu_offsets[task as usize] + seg;
        self.instances[inst as usize].cpu_seg_counter = flat;
        self.evaluate(inst);
        self.charge_akb(ex, 1);
        self.remap_cpu_priorities(policy);
        let nominal = self.params.workload.chains[ci].tasks[task as usize].cpu_segment_times[seg];
        let actual = ((nominal as f64) * self.instances[inst as usize].noise.cpu_factor)
            .round()
            .max(1.0) as Nanos;
        self.execs[ex as usize].seg_started_at = self.clock;
        self.run_mut(ex).phase = Phase::CpuSeg;
        let demand = actual + self.take_overhead(ex);
        self.submit_cpu(ex, demand);
    }

    fn on_cpu_segment_done(&mut self, policy: &mut dyn Policy, ex: ExecId) {
        let (chain, task, seg, inst) = {
            let e = &self.execs[ex as usize];
            let run = e.run.as_ref().expect("run");
            (e.chain, e.task, run.seg, run.inst)
        };
        let ci = chain as usize;
        let wall = self.clock - self.execs[ex as usize].seg_started_at;
        let flat = self.rt[ci].cpu_offsets[task as usize] + seg;
        self.urgency.observe_cpu_segment(ci, flat, wall);
        self.trace.record(
            self.clock,
            TraceKind::CpuSegmentDone,
            chain as i64,
            inst as i64,
            &format!("task={task} seg={seg}"),
        );
        let has_gpu_segment = seg < self.rt[ci].seg_ranges[task as usize].len();
        if has_gpu_segment {
            self.plan_segment(ex, seg);
            self.launch_loop(policy, ex);
        } else {
            self.next_seg(policy, ex);
        }
    }

    fn plan_segment(&mut self, ex: ExecId, seg: usize) {
        let (chain, task) = {
            let e = &self.execs[ex as usize];
            (e.chain, e.task)
        };
        let ci = chain as usize;
        let range = self.rt[ci].seg_ranges[task as usize][seg].clone();
        let koff = self.rt[ci].kernel_offsets[task as usize];
        let delta = match self.sync_mode {
            SyncMode::PerKernel => 0.0,
            SyncMode::EndOfSegment => f64::INFINITY,
            SyncMode::Batched { .. } => self.params.scheduler.delta_eval as f64,
        };
        let estimates: Vec<f64> = range
            .clone()
            .map(|k| self.urgency.predicted_kernel_time(ci, koff + k))
            .collect();
        let batches = crate::policy::plan_batches(&estimates, delta);
        let run = self.run_mut(ex);
        run.batch_events = vec![None; batches.len()];
        run.batches = batches;
        run.batches_removed = 0;
        run.batch_idx = 0;
        run.kernel_idx = 0;
        run.prewait_done = 1;
    }

    /// The launch loop: pre-batch waits, the delay gate, stream binding,
    /// then per-kernel launch overhead.
    fn launch_loop(&mut self, policy: &mut dyn Policy, ex: ExecId) {
        let (chain, task, inst) = {
            let e = &self.execs[ex as usize];
            let run = e.run.as_ref().expect("run");
            (e.chain, e.task, run.inst)
        };
        let ci = chain as usize;
        let (seg, kernel_idx, batch_idx, prewait_done, nbatches) = {
            let run = self.run_of(ex);
            (
                run.seg,
                run.kernel_idx,
                run.batch_idx,
                run.prewait_done,
                run.batches.len(),
            )
        };
        let range = self.rt[ci].seg_ranges[task as usize][seg].clone();

        if kernel_idx == range.len() {
            // all launched; the final wait covers the last batch
            let last = nbatches - 1;
            let target = self.run_of(ex).batch_events[last].expect("event recorded");
            self.start_wait(policy, ex, target, last, true);
            return;
        }

        // pre-launch wait when entering a new batch
        if batch_idx > 0 && prewait_done == batch_idx {
            self.run_mut(ex).prewait_done = batch_idx + 1;
            let target_batch = match self.sync_mode {
                SyncMode::PerKernel | SyncMode::Batched { overlap: false } => Some(batch_idx - 1),
                SyncMode::Batched { overlap: true } => batch_idx.checked_sub(2),
                SyncMode::EndOfSegment => None,
            };
            if let Some(tb) = target_batch {
                let target = self.run_of(ex).batch_events[tb].expect("event recorded");
                self.start_wait(policy, ex, target, tb, false);
                return;
            }
        }

        // kernel launch trigger point
        let ul = self.evaluate(inst);
        self.charge_akb(ex, 1);

        if self.run_of(ex).bound.is_none() {
            let level = {
                let views = if policy.binds_with_chain_views() {
                    self.chain_views()
                } else {
                    Vec::new()
                };
                let ctx = self.ctx(&views);
                policy.bind_level(&ctx, chain, ul)
            };
            let stream = self.execs[ex as usize].streams[level as usize];
            self.run_mut(ex).bound = Some((stream, level));
            self.charge_akb(ex, 1);
        }

        let (kernel_id, utilization) = {
            let k = &self.params.workload.chains[ci].tasks[task as usize].kernels
                [range.start + kernel_idx];
            (k.kernel_id, k.utilization)
        };
        let gate = {
            let ctx = self.ctx(&[]);
            policy.launch_gate(&ctx, chain, ul, utilization)
        };
        self.charge_akb(ex, 1);
        match gate {
            LaunchGate::Delay { sleep } => {
                self.run_mut(ex).phase = Phase::Sleeping;
                self.push_event(self.clock + sleep, Ev::SleepWake { exec: ex });
            }
            LaunchGate::Proceed => {
                // interception point: the kernel becomes active here, before
                // the launch call's overhead elapses
                let (stream, level) = self.run_of(ex).bound.expect("bound before launch");
                for ev in detect_collisions(&self.akb, self.clock, chain, level, ul) {
                    self.collisions.record(&ev);
                }
                self.akb.insert(
                    BindingKey {
                        chain,
                        instance: inst as u64,
                        task,
                    },
                    stream,
                    level,
                    kernel_id,
                    utilization,
                );
                self.charge_akb(ex, 1);
                self.run_mut(ex).phase = Phase::LaunchOverhead;
                let demand = self.params.device.launch_overhead + self.take_overhead(ex);
                self.submit_cpu(ex, demand);
            }
        }
    }

    /// Launch overhead paid: the kernel enters its stream.
    fn on_launch_issued(&mut self, policy: &mut dyn Policy, ex: ExecId) {
        let (chain, task, inst) = {
            let e = &self.execs[ex as usize];
            let run = e.run.as_ref().expect("run");
            (e.chain, e.task, run.inst)
        };
        let ci = chain as usize;
        let (seg, kernel_idx) = {
            let run = self.run_of(ex);
            (run.seg, run.kernel_idx)
        };
        let range = self.rt[ci].seg_ranges[task as usize][seg].clone();
        let within_task = range.start + kernel_idx;
        let kernel = self.params.workload.chains[ci].tasks[task as usize].kernels[within_task].clone();
        let flat = self.rt[ci].kernel_offsets[task as usize] + within_task;
        let (stream, level) = self.run_of(ex).bound.expect("bound before launch");

        // the launch-time lookup feeds the execution-time predictor
        let looked_up = match self
            .params
            .lookup
            .lookup(kernel.kernel_id, kernel.grid_dim, kernel.block_dim)
        {
            Ok(row) => row.exec_time,
            Err(_) => {
                let t = &self.params.workload.chains[ci].tasks[task as usize];
                (t.gpu_total() as f64 / t.kernels.len() as f64) as Nanos
            }
        };
        self.urgency.observe_kernel(ci, flat, looked_up);

        self.trace.record(
            self.clock,
            TraceKind::LaunchIssued,
            chain as i64,
            inst as i64,
            &format!("k={} stream={stream} level={level}", kernel.kernel_id),
        );

        let i = &mut self.instances[inst as usize];
        i.kernel_counter += 1;
        i.launched += 1;
        if within_task + 1 == range.end {
            // last kernel of the GPU segment: the next CPU segment starts
            let ncpu = self.rt[ci].total_cpu_segments[task as usize];
            i.cpu_seg_counter = self.rt[ci].cpu_offsets[task as usize] + (seg + 1).min(ncpu);
        }

        let actual = ((kernel.nominal_exec as f64) * self.instances[inst as usize].noise.gpu_factor)
            .round()
            .max(1.0) as Nanos;
        let info = KernelInfo {
            chain,
            instance: inst as u64,
            task,
            flat_index: flat,
            kernel_id: kernel.kernel_id,
            utilization: kernel.utilization,
            is_memcpy: kernel.is_memcpy,
        };
        let reactions = {
            let adm = admissibility(&*policy);
            self.gpu.enqueue(stream, info, actual, self.clock, &adm)
        };
        self.apply_gpu_reactions(policy, reactions);

        // batch boundary: record the batch's completion event
        let batch_end = {
            let run = self.run_mut(ex);
            if run.kernel_idx + 1 == run.batches[run.batch_idx] {
                let b = run.batch_idx;
                run.batch_idx += 1;
                Some(b)
            } else {
                None
            }
        };
        if let Some(b) = batch_end {
            let (event, _) = self.gpu.record_event(stream);
            self.run_mut(ex).batch_events[b] = Some(event);
        }
        self.run_mut(ex).kernel_idx += 1;
        self.launch_loop(policy, ex);
    }

    fn start_wait(
        &mut self,
        policy: &mut dyn Policy,
        ex: ExecId,
        target: BatchEventId,
        covered: usize,
        final_wait: bool,
    ) {
        if self.gpu.event_signaled(target) {
            self.sync_satisfied(ex, covered, final_wait);
        } else {
            self.run_mut(ex).phase = Phase::AwaitBatch { covered, final_wait };
            self.waiters.insert(target, ex);
        }
        let _ = policy;
    }

    fn sync_satisfied(&mut self, ex: ExecId, covered: usize, final_wait: bool) {
        let chain = self.execs[ex as usize].chain;
        let inst = self.run_of(ex).inst;
        self.trace.record(
            self.clock,
            TraceKind::SyncSatisfied,
            chain as i64,
            inst as i64,
            &format!("batch={covered} final={final_wait}"),
        );
        let (lo, hi) = self.params.device.sync_cost_range;
        let cost = if hi > lo {
            self.sync_rng.gen_range(lo..=hi)
        } else {
            lo
        };
        self.sync_cost_ns += cost;
        self.run_mut(ex).phase = Phase::SyncCost { covered, final_wait };
        let demand = cost + self.take_overhead(ex);
        self.submit_cpu(ex, demand);
    }

    fn on_sync_cost_done(
        &mut self,
        policy: &mut dyn Policy,
        ex: ExecId,
        covered: usize,
        final_wait: bool,
    ) {
        let (chain, task, inst) = {
            let e = &self.execs[ex as usize];
            let run = e.run.as_ref().expect("run");
            (e.chain, e.task, run.inst)
        };
        // every batch up to the synchronized one leaves the AKB
        let (from, sizes): (usize, Vec<usize>) = {
            let run = self.run_of(ex);
            (
                run.batches_removed,
                (run.batches_removed..=covered.min(run.batches.len() - 1))
                    .map(|b| run.batch_size(b))
                    .collect(),
            )
        };
        let key = BindingKey {
            chain,
            instance: inst as u64,
            task,
        };
        let mut removed = 0;
        for size in sizes {
            self.akb.remove_synced(key, size);
            removed += size;
        }
        if removed > 0 {
            self.charge_akb(ex, removed as u64);
        }
        self.run_mut(ex).batches_removed = (covered + 1).max(from);

        // urgency evaluation at the synchronization point; under batched
        // launching this is the periodic evaluation
        self.evaluate(inst);
        self.charge_akb(ex, 1);

        if final_wait {
            self.next_seg(policy, ex);
        } else {
            self.launch_loop(policy, ex);
        }
    }

    fn next_seg(&mut self, policy: &mut dyn Policy, ex: ExecId) {
        let (chain, task) = {
            let e = &self.execs[ex as usize];
            (e.chain, e.task)
        };
        let ci = chain as usize;
        let ncpu = self.rt[ci].total_cpu_segments[task as usize];
        let ngpu = self.rt[ci].seg_ranges[task as usize].len();
        let seg = {
            let run = self.run_mut(ex);
            run.seg += 1;
            run.seg
        };
        if seg < ncpu {
            self.enter_cpu_segment(policy, ex);
        } else if seg < ngpu {
            self.plan_segment(ex, seg);
            self.launch_loop(policy, ex);
        } else {
            self.task_end(policy, ex);
        }
    }

    fn task_end(&mut self, policy: &mut dyn Policy, ex: ExecId) {
        let (chain, task) = {
            let e = &self.execs[ex as usize];
            (e.chain, e.task)
        };
        let ci = chain as usize;
        let is_last = (task as usize) == self.params.workload.chains[ci].tasks.len() - 1;
        let stressed = (ci as u32) < self.params.cudafree_tasks && is_last;
        let configured = self.params.workload.chains[ci].tasks[task as usize].issues_device_barrier;
        if stressed || configured {
            self.run_mut(ex).phase = Phase::Barrier;
            self.barrier_waiters.push(ex);
            let reactions = self.gpu.request_barrier(self.clock);
            self.apply_gpu_reactions(policy, reactions);
            return;
        }
        self.task_end_post(policy, ex);
    }

    fn task_end_post(&mut self, policy: &mut dyn Policy, ex: ExecId) {
        let (chain, task, inst) = {
            let e = &self.execs[ex as usize];
            let run = e.run.as_ref().expect("run");
            (e.chain, e.task, run.inst)
        };
        let ci = chain as usize;
        self.execs[ex as usize].run = None;
        let is_last = (task as usize) == self.params.workload.chains[ci].tasks.len() - 1;
        if is_last {
            self.finalize_instance(policy, inst);
        } else {
            let next = self.rt[ci].exec_ids[task as usize + 1];
            self.execs[next as usize].inbox.push_back(inst);
            self.advance_idle(policy, next);
        }
        self.advance_idle(policy, ex);
    }

    fn finalize_instance(&mut self, policy: &mut dyn Policy, inst: InstId) {
        let (chain, idx, t_arr, deadline_abs, launched, completed) = {
            let i = &self.instances[inst as usize];
            (
                i.chain,
                i.idx_in_chain,
                i.t_arr,
                i.deadline_abs,
                i.launched,
                i.completed_kernels,
            )
        };
        let ci = chain as usize;
        let expected = self.rt[ci].total_kernels;
        if launched != expected || completed != expected {
            self.fail = Some(SimError::Invariant {
                time_ns: self.clock,
                what: format!(
                    "kernel conservation: chain {chain} instance {idx} launched {launched} completed {completed} of {expected}"
                ),
                trace: self.trace.recent_dump(),
            });
            return;
        }
        let latency = self.clock - t_arr;
        let on_time = self.clock <= deadline_abs;
        self.instances[inst as usize].status = Status::Done;
        let cid = self.params.workload.chains[ci].chain_id;
        let stats = self.chain_stats.get_mut(&cid).expect("chain registered");
        stats.latencies.push(latency);
        self.completed_instances += 1;
        if !on_time {
            stats.missed += 1;
        }
        self.rt[ci].active.retain(|&x| x != inst);
        self.outstanding -= 1;
        policy.on_instance_end(chain, inst as u64);
        self.trace.record(
            self.clock,
            TraceKind::InstanceDone,
            chain as i64,
            inst as i64,
            &format!("idx={idx} latency_ns={latency} on_time={on_time}"),
        );
    }

    fn finalize_early(&mut self, policy: &mut dyn Policy, inst: InstId, reason: &str) {
        let chain = self.instances[inst as usize].chain;
        let ci = chain as usize;
        let purged = self.akb.purge_instance(chain, inst as u64);
        if purged > 0 {
            self.sched_overhead_ns += purged as u64 * self.params.scheduler.akb_op_cost;
        }
        self.instances[inst as usize].status = Status::Done;
        let cid = self.params.workload.chains[ci].chain_id;
        let stats = self.chain_stats.get_mut(&cid).expect("chain registered");
        stats.missed += 1;
        stats.early_exited += 1;
        self.rt[ci].active.retain(|&x| x != inst);
        self.outstanding -= 1;
        policy.on_instance_end(chain, inst as u64);
        self.trace.record(
            self.clock,
            TraceKind::EarlyExit,
            chain as i64,
            inst as i64,
            reason,
        );
    }

    // ---- shared plumbing ----

    fn evaluate(&mut self, inst: InstId) -> f64 {
        let i = &self.instances[inst as usize];
        let prog = InstanceProgress {
            t_arr: i.t_arr,
            kernel_index: i.kernel_counter,
            cpu_segment_index: i.cpu_seg_counter,
            estimate_noise: i.estimate_noise,
        };
        let chain = i.chain;
        let ul = self.urgency.evaluate(chain as usize, prog, self.clock);
        self.instances[inst as usize].last_urgency = ul.value;
        self.akb.refresh_urgency(chain, ul.value, self.clock);
        self.trace
            .record_urgency(self.clock, chain, inst as u64, ul.value);
        ul.value
    }

    fn remap_cpu_priorities(&mut self, policy: &mut dyn Policy) {
        // the CPU mapper re-evaluates every active chain at this instant
        let oldest: Vec<InstId> = self
            .rt
            .iter()
            .filter_map(|rt| rt.active.front().copied())
            .collect();
        for inst in oldest {
            self.evaluate(inst);
        }
        if self.akb_charged {
            self.sched_overhead_ns +=
                self.rt.iter().filter(|rt| !rt.active.is_empty()).count() as u64
                    * self.params.scheduler.akb_op_cost;
        }
        let assignment = {
            let views = self.chain_views();
            let ctx = self.ctx(&views);
            policy.cpu_priorities(&ctx)
        };
        let Some(map) = assignment else { return };
        let mut reactions = Vec::new();
        for (chain, pri) in map {
            self.akb.set_cpu_priority(chain, pri);
            for &e in &self.rt[chain as usize].exec_ids {
                let act = self.execs[e as usize].activity;
                reactions.extend(self.cpu.set_priority(act, pri, self.clock));
            }
        }
        self.apply_cpu_reactions(reactions);
    }

    fn chain_views(&self) -> Vec<ChainView> {
        let mut out = Vec::new();
        for (ci, rt) in self.rt.iter().enumerate() {
            let Some(&front) = rt.active.front() else {
                continue;
            };
            let i = &self.instances[front as usize];
            let prog = InstanceProgress {
                t_arr: i.t_arr,
                kernel_index: i.kernel_counter,
                cpu_segment_index: i.cpu_seg_counter,
                estimate_noise: i.estimate_noise,
            };
            out.push(ChainView {
                chain: ci as u32,
                urgency: i.last_urgency,
                earliest_deadline: i.deadline_abs,
                oldest_arrival: i.t_arr,
                remaining_estimate: self.urgency.remaining_estimate(ci, prog),
                utilization_demand: rt.util_demand,
            });
        }
        out
    }

    fn ctx<'a>(&'a self, views: &'a [ChainView]) -> DecisionCtx<'a> {
        DecisionCtx {
            now: self.clock,
            akb: &self.akb,
            threshold: self.calibrator.threshold(),
            workload: &self.params.workload,
            device: &self.params.device,
            scheduler: &self.params.scheduler,
            active: views,
        }
    }

    fn charge_akb(&mut self, ex: ExecId, ops: u64) {
        if !self.akb_charged {
            return;
        }
        let cost = ops * self.params.scheduler.akb_op_cost;
        self.execs[ex as usize].pending_overhead += cost;
        self.sched_overhead_ns += cost;
    }

    fn take_overhead(&mut self, ex: ExecId) -> Nanos {
        std::mem::take(&mut self.execs[ex as usize].pending_overhead)
    }

    fn submit_cpu(&mut self, ex: ExecId, demand: Nanos) {
        let act = self.execs[ex as usize].activity;
        let reactions = self.cpu.submit(act, demand, self.clock);
        self.apply_cpu_reactions(reactions);
    }

    fn apply_cpu_reactions(&mut self, reactions: Vec<CpuReaction>) {
        for r in reactions {
            match r {
                CpuReaction::ScheduleDone { at, activity, token } => {
                    self.push_event(at, Ev::CpuDone { activity, token });
                }
            }
        }
    }

    fn apply_gpu_reactions(&mut self, policy: &mut dyn Policy, reactions: Vec<GpuReaction>) {
        for r in reactions {
            match r {
                GpuReaction::ScheduleCompletion { at, seq, token } => {
                    self.push_event(at, Ev::KernelDone { seq, token });
                }
                GpuReaction::Dispatched { seq, info } => {
                    self.trace.record(
                        self.clock,
                        TraceKind::KernelDispatched,
                        info.chain as i64,
                        info.instance as i64,
                        &format!("k={} seq={seq}", info.kernel_id),
                    );
                }
                GpuReaction::EventSignaled { event } => {
                    if let Some(ex) = self.waiters.remove(&event) {
                        let Phase::AwaitBatch { covered, final_wait } = self.run_of(ex).phase
                        else {
                            self.fail = Some(SimError::Invariant {
                                time_ns: self.clock,
                                what: format!("executor {ex} signaled while not waiting"),
                                trace: self.trace.recent_dump(),
                            });
                            return;
                        };
                        self.sync_satisfied(ex, covered, final_wait);
                    }
                }
                GpuReaction::ScheduleBarrierDone { at } => {
                    self.push_event(at, Ev::BarrierDone);
                }
            }
        }
        let _ = policy;
    }

    fn finish(mut self) -> RunResult {
        let duration = self.params.workload.duration;
        let duration_s = duration as f64 / NS_PER_S as f64;
        let end = self.clock.max(duration);
        let cpu_utilization = clamp_timeline(self.cpu.busy_timeline(end), duration);
        let gpu_utilization = clamp_timeline(self.gpu.utilization_timeline(end), duration);
        let throughput = if duration_s > 0.0 {
            self.completed_instances as f64 / duration_s
        } else {
            0.0
        };
        let trace = self.trace.into_capture();
        let report = MetricsReport {
            chains: self.chain_stats,
            collisions: self.collisions,
            cpu_utilization,
            gpu_utilization,
            throughput,
            completed_instances: self.completed_instances,
            frame_arrivals: self.frame_arrivals,
            scheduling_overhead_us: self.sched_overhead_ns as f64 / 1_000.0,
            sync_cost_us: self.sync_cost_ns as f64 / 1_000.0,
            manifest: self.manifest,
        };
        RunResult { report, trace }
    }
}

/// Policy-driven per-chain dispatch admissibility, closed over immutably.
fn admissibility(policy: &dyn Policy) -> impl Fn(u32) -> bool + '_ {
    move |chain| policy.admissible(chain)
}
