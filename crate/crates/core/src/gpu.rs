//! GPU device model: priority streams with head-of-line execution,
//! non-preemptive kernels admitted against a utilization capacity, a
//! multiplicative contention slowdown among co-running kernels, a separate
//! copy engine, device-wide barriers, and kernel-collision detection.

use crate::akb::{ActiveKernelBuffer, StreamId};
use crate::error::ConfigError;
use crate::units::{us, Nanos, NS_PER_S};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Device and platform parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceParams {
    /// Number of stream priority levels (NUM_PRI). Level 0 is the highest
    /// priority and maps to CUDA priority -(NUM_PRI-1).
    pub num_priorities: u32,
    /// CPU cost of one kernel launch call.
    pub launch_overhead: Nanos,
    /// Synchronization-call cost range, sampled uniformly per call.
    pub sync_cost_range: (Nanos, Nanos),
    /// Total utilization budget of the compute engine.
    pub capacity: f64,
    /// Contention slowdown coefficient: a running kernel drains at rate
    /// 1 / (1 + alpha * U_others). Calibrated against the observed p95
    /// latency inflation of 2D detection co-running with 3D detection.
    pub contention_alpha: f64,
    /// Duration of a device-wide barrier once the running set has drained.
    pub barrier_cost: Nanos,
    /// Scale factor on kernel execution times (slower devices > 1).
    pub kernel_time_scale: f64,
    /// CPU cores available to the fixed-priority CPU model.
    pub cpu_cores: usize,
    /// Cost charged when an activity wakes from a sleep.
    pub context_switch_cost: Nanos,
}

impl Default for DeviceParams {
    fn default() -> Self {
        Self::rtx3070ti()
    }
}

impl DeviceParams {
    /// The default profile: a discrete RTX 3070 Ti class device. The
    /// 21.7 us launch overhead is the observed 7 ms for 323 launches.
    pub fn rtx3070ti() -> Self {
        DeviceParams {
            num_priorities: 6,
            launch_overhead: us(21.7),
            sync_cost_range: (us(10.0), us(200.0)),
            capacity: 1.0,
            contention_alpha: 0.9,
            barrier_cost: us(188.0),
            kernel_time_scale: 1.0,
            cpu_cores: 8,
            context_switch_cost: us(5.0),
        }
    }

    /// Embedded AGX Orin class profile: 8 SMs against the 3070 Ti's 46,
    /// approximated as a 46/8 scale on kernel times.
    pub fn agx_orin() -> Self {
        DeviceParams {
            kernel_time_scale: 46.0 / 8.0,
            ..Self::rtx3070ti()
        }
    }

    pub fn profile(name: &str) -> Result<Self, ConfigError> {
        match name {
            "rtx3070ti" => Ok(Self::rtx3070ti()),
            "agx-orin" => Ok(Self::agx_orin()),
            other => Err(ConfigError::UnknownProfile(other.into())),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_priorities < 2 {
            return Err(ConfigError::invalid("device: num_priorities must be >= 2"));
        }
        if !(self.capacity > 0.0) {
            return Err(ConfigError::invalid("device: capacity must be > 0"));
        }
        if self.contention_alpha < 0.0 {
            return Err(ConfigError::invalid("device: contention_alpha must be >= 0"));
        }
        if self.sync_cost_range.0 > self.sync_cost_range.1 {
            return Err(ConfigError::invalid("device: sync_cost_range must be ordered"));
        }
        if self.cpu_cores == 0 {
            return Err(ConfigError::invalid("device: cpu_cores must be >= 1"));
        }
        if self.kernel_time_scale <= 0.0 {
            return Err(ConfigError::invalid("device: kernel_time_scale must be > 0"));
        }
        Ok(())
    }

    /// CUDA-style priority of a level: level 0 -> -(NUM_PRI-1), lowest
    /// level -> 0.
    pub fn cuda_priority(&self, level: u32) -> i32 {
        level as i32 - (self.num_priorities as i32 - 1)
    }
}

/// Identity of a kernel instance flowing through the device.
#[derive(Debug, Clone, Copy)]
pub struct KernelInfo {
    pub chain: u32,
    pub instance: u64,
    pub task: u32,
    /// Chain-wide flat kernel index (the launch counter value it was
    /// launched under).
    pub flat_index: usize,
    pub kernel_id: u64,
    pub utilization: f64,
    pub is_memcpy: bool,
}

#[derive(Debug, Clone, Copy)]
struct QueuedKernel {
    info: KernelInfo,
    exec: Nanos,
    enqueue_seq: u64,
}

#[derive(Debug)]
struct RunningKernel {
    info: KernelInfo,
    stream: StreamId,
    enqueue_seq: u64,
    exec: Nanos,
    work_left: f64,
    rate: f64,
    last_update: Nanos,
    token: u64,
    started_at: Nanos,
}

#[derive(Debug)]
struct StreamState {
    level: u32,
    queue: VecDeque<QueuedKernel>,
    head_running: bool,
    last_completed_seq: Option<u64>,
    last_enqueued_seq: Option<u64>,
    /// Batch events recorded on this stream, FIFO by covered seq.
    pending_events: VecDeque<(u64, BatchEventId)>,
}

pub type BatchEventId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BarrierPhase {
    Idle,
    Draining,
    Executing,
}

/// What the device asks the engine to do after a state change.
#[derive(Debug, Clone, Copy)]
pub enum GpuReaction {
    /// (Re)schedule a completion check for a running kernel.
    ScheduleCompletion {
        at: Nanos,
        seq: u64,
        token: u64,
    },
    /// A kernel began executing (trace: KernelDispatched).
    Dispatched { seq: u64, info: KernelInfo },
    /// A batch event became signaled; waiters may resume.
    EventSignaled { event: BatchEventId },
    /// The barrier drained; schedule its completion.
    ScheduleBarrierDone { at: Nanos },
}

/// Outcome of a completion event.
#[derive(Debug)]
pub struct CompletionOutcome {
    pub finished: KernelInfo,
    pub finished_stream: StreamId,
    pub exec_started_at: Nanos,
    pub reactions: Vec<GpuReaction>,
}

#[derive(Debug)]
pub struct GpuDevice {
    params: DeviceParams,
    streams: Vec<StreamState>,
    running: Vec<RunningKernel>,
    copy_running: Vec<RunningKernel>,
    next_enqueue_seq: u64,
    next_token: u64,
    next_event: BatchEventId,
    signaled_events: std::collections::BTreeSet<BatchEventId>,
    barrier: BarrierPhase,
    barrier_waiters: usize,
    /// Total nominal kernel-work completed, for the work-conservation
    /// invariant.
    pub work_completed: f64,
    util_buckets: Vec<f64>,
    util_last_t: Nanos,
    util_current: f64,
}

impl GpuDevice {
    pub fn new(params: DeviceParams) -> Self {
        GpuDevice {
            params,
            streams: Vec::new(),
            running: Vec::new(),
            copy_running: Vec::new(),
            next_enqueue_seq: 0,
            next_token: 0,
            next_event: 0,
            signaled_events: std::collections::BTreeSet::new(),
            barrier: BarrierPhase::Idle,
            barrier_waiters: 0,
            work_completed: 0.0,
            util_buckets: Vec::new(),
            util_last_t: 0,
            util_current: 0.0,
        }
    }

    pub fn params(&self) -> &DeviceParams {
        &self.params
    }

    pub fn create_stream(&mut self, level: u32) -> StreamId {
        assert!(level < self.params.num_priorities);
        let id = self.streams.len() as StreamId;
        self.streams.push(StreamState {
            level,
            queue: VecDeque::new(),
            head_running: false,
            last_completed_seq: None,
            last_enqueued_seq: None,
            pending_events: VecDeque::new(),
        });
        id
    }

    pub fn stream_level(&self, stream: StreamId) -> u32 {
        self.streams[stream as usize].level
    }

    fn running_util_sum(&self) -> f64 {
        self.running.iter().map(|r| r.info.utilization).sum()
    }

    fn copy_util_sum(&self) -> f64 {
        self.copy_running.iter().map(|r| r.info.utilization).sum()
    }

    /// Appends a kernel to its stream's FIFO and attempts dispatch.
    pub fn enqueue(
        &mut self,
        stream: StreamId,
        info: KernelInfo,
        exec: Nanos,
        now: Nanos,
        admissible: &dyn Fn(u32) -> bool,
    ) -> Vec<GpuReaction> {
        let seq = self.next_enqueue_seq;
        self.next_enqueue_seq += 1;
        let scaled = ((exec as f64) * self.params.kernel_time_scale).round().max(1.0) as Nanos;
        let st = &mut self.streams[stream as usize];
        st.queue.push_back(QueuedKernel {
            info,
            exec: scaled,
            enqueue_seq: seq,
        });
        st.last_enqueued_seq = Some(seq);
        self.dispatch(now, admissible)
    }

    /// Records a lightweight event on a stream: it signals once every
    /// kernel enqueued so far on that stream has completed. Recording on a
    /// drained stream signals immediately.
    pub fn record_event(&mut self, stream: StreamId) -> (BatchEventId, bool) {
        let id = self.next_event;
        self.next_event += 1;
        let st = &mut self.streams[stream as usize];
        let drained = st.queue.is_empty() && !st.head_running;
        if drained {
            self.signaled_events.insert(id);
            (id, true)
        } else {
            let seq = st.last_enqueued_seq.expect("stream holds work");
            st.pending_events.push_back((seq, id));
            (id, false)
        }
    }

    pub fn event_signaled(&self, event: BatchEventId) -> bool {
        self.signaled_events.contains(&event)
    }

    /// Considers stream heads in priority order and admits every kernel
    /// whose utilization fits the remaining capacity. `admissible` lets a
    /// policy gate dispatch per chain (round-robin grouping); when the
    /// gate would leave an idle device with pending work, it is bypassed
    /// to stay work-conserving.
    pub fn dispatch(&mut self, now: Nanos, admissible: &dyn Fn(u32) -> bool) -> Vec<GpuReaction> {
        let mut reactions = Vec::new();
        if self.barrier != BarrierPhase::Idle {
            return reactions;
        }
        // candidate heads with an idle head slot
        let mut compute: Vec<(u32, u64, StreamId)> = Vec::new();
        let mut copies: Vec<(u64, StreamId)> = Vec::new();
        for (sid, st) in self.streams.iter().enumerate() {
            if st.head_running {
                continue;
            }
            if let Some(head) = st.queue.front() {
                if head.info.is_memcpy {
                    copies.push((head.enqueue_seq, sid as StreamId));
                } else {
                    compute.push((st.level, head.enqueue_seq, sid as StreamId));
                }
            }
        }
        compute.sort_unstable();
        copies.sort_unstable();

        let mut admitted = self.admit_pass(&compute, &copies, now, admissible);
        if !admitted
            && self.running.is_empty()
            && self.copy_running.is_empty()
            && !(compute.is_empty() && copies.is_empty())
        {
            admitted = self.admit_pass(&compute, &copies, now, &|_| true);
        }
        if admitted {
            let total = self.running_util_sum();
            assert!(
                total <= self.params.capacity + 1e-6,
                "capacity bound violated: {total}"
            );
            self.reschedule(now, &mut reactions);
            for r in self.running.iter().chain(self.copy_running.iter()) {
                if r.started_at == now {
                    reactions.push(GpuReaction::Dispatched {
                        seq: r.enqueue_seq,
                        info: r.info,
                    });
                }
            }
        }
        reactions
    }

    fn admit_pass(
        &mut self,
        compute: &[(u32, u64, StreamId)],
        copies: &[(u64, StreamId)],
        now: Nanos,
        admissible: &dyn Fn(u32) -> bool,
    ) -> bool {
        let mut admitted = false;
        let mut budget = self.params.capacity - self.running_util_sum();
        for &(_, _, sid) in compute {
            if self.streams[sid as usize].head_running {
                continue;
            }
            let head = *self.streams[sid as usize].queue.front().expect("head exists");
            if !admissible(head.info.chain) {
                continue;
            }
            if head.info.utilization <= budget + 1e-9 {
                budget -= head.info.utilization;
                self.start_kernel(sid, now, false);
                admitted = true;
            }
        }
        let mut copy_budget = 1.0 - self.copy_util_sum();
        for &(_, sid) in copies {
            if self.streams[sid as usize].head_running {
                continue;
            }
            let head = *self.streams[sid as usize].queue.front().expect("head exists");
            if !admissible(head.info.chain) {
                continue;
            }
            if head.info.utilization <= copy_budget + 1e-9 {
                copy_budget -= head.info.utilization;
                self.start_kernel(sid, now, true);
                admitted = true;
            }
        }
        admitted
    }

    fn start_kernel(&mut self, sid: StreamId, now: Nanos, copy: bool) {
        let st = &mut self.streams[sid as usize];
        let q = st.queue.pop_front().expect("queue non-empty");
        st.head_running = true;
        let r = RunningKernel {
            info: q.info,
            stream: sid,
            enqueue_seq: q.enqueue_seq,
            exec: q.exec,
            work_left: q.exec as f64,
            rate: 1.0,
            last_update: now,
            token: 0,
            started_at: now,
        };
        if copy {
            self.copy_running.push(r);
        } else {
            self.running.push(r);
            self.note_util_change(now);
        }
    }

    /// Advances all running kernels to `now`, recomputes contention rates
    /// and emits fresh completion schedules for kernels whose rate
    /// changed (or which were just admitted).
    fn reschedule(&mut self, now: Nanos, reactions: &mut Vec<GpuReaction>) {
        let alpha = self.params.contention_alpha;
        let total: f64 = self.running_util_sum();
        for r in &mut self.running {
            let elapsed = (now - r.last_update) as f64;
            r.work_left -= r.rate * elapsed;
            if r.work_left < 0.0 {
                r.work_left = 0.0;
            }
            r.last_update = now;
            let others = (total - r.info.utilization).max(0.0);
            let rate = 1.0 / (1.0 + alpha * others);
            let fresh = r.token == 0;
            if fresh || (rate - r.rate).abs() > 1e-12 {
                r.rate = rate;
                self.next_token += 1;
                r.token = self.next_token;
                let dt = (r.work_left / r.rate).ceil() as Nanos;
                reactions.push(GpuReaction::ScheduleCompletion {
                    at: now + dt,
                    seq: r.enqueue_seq,
                    token: r.token,
                });
            }
        }
        for r in &mut self.copy_running {
            if r.token == 0 {
                self.next_token += 1;
                r.token = self.next_token;
                reactions.push(GpuReaction::ScheduleCompletion {
                    at: now + r.work_left.ceil() as Nanos,
                    seq: r.enqueue_seq,
                    token: r.token,
                });
            }
        }
    }

    /// Processes a completion event. Stale tokens (superseded by a
    /// reschedule) return None.
    pub fn on_completion(
        &mut self,
        seq: u64,
        token: u64,
        now: Nanos,
        admissible: &dyn Fn(u32) -> bool,
    ) -> Option<CompletionOutcome> {
        let from_copy;
        let idx = if let Some(i) = self.running.iter().position(|r| r.enqueue_seq == seq) {
            from_copy = false;
            i
        } else if let Some(i) = self.copy_running.iter().position(|r| r.enqueue_seq == seq) {
            from_copy = true;
            i
        } else {
            return None; // already completed under a newer token
        };
        let list = if from_copy {
            &self.copy_running
        } else {
            &self.running
        };
        if list[idx].token != token {
            return None;
        }
        let r = if from_copy {
            self.copy_running.swap_remove(idx)
        } else {
            let r = self.running.swap_remove(idx);
            self.note_util_change(now);
            r
        };
        self.work_completed += r.exec as f64;

        let st = &mut self.streams[r.stream as usize];
        assert!(st.head_running, "completion on a stream without a running head");
        st.head_running = false;
        // per-stream FIFO: completions arrive in launch order
        if let Some(prev) = st.last_completed_seq {
            assert!(
                r.enqueue_seq > prev,
                "per-stream FIFO violated on stream {}",
                r.stream
            );
        }
        st.last_completed_seq = Some(r.enqueue_seq);

        let mut reactions = Vec::new();
        while let Some(&(after, ev)) = st.pending_events.front() {
            if after <= r.enqueue_seq {
                st.pending_events.pop_front();
                self.signaled_events.insert(ev);
                reactions.push(GpuReaction::EventSignaled { event: ev });
            } else {
                break;
            }
        }

        if self.barrier == BarrierPhase::Draining && self.running.is_empty() && self.copy_running.is_empty()
        {
            self.barrier = BarrierPhase::Executing;
            reactions.push(GpuReaction::ScheduleBarrierDone {
                at: now + self.params.barrier_cost,
            });
        } else {
            let mut more = self.dispatch(now, admissible);
            reactions.append(&mut more);
            // a completion changed the co-running set even without a new
            // admission
            if self.barrier == BarrierPhase::Idle {
                let mut resched = Vec::new();
                self.reschedule(now, &mut resched);
                reactions.append(&mut resched);
            }
        }

        Some(CompletionOutcome {
            finished: r.info,
            finished_stream: r.stream,
            exec_started_at: r.started_at,
            reactions,
        })
    }

    /// Requests a device-wide barrier: dispatch stops, the running set
    /// drains, then the barrier cost elapses. Concurrent requests share
    /// one drain-and-execute cycle.
    pub fn request_barrier(&mut self, now: Nanos) -> Vec<GpuReaction> {
        self.barrier_waiters += 1;
        match self.barrier {
            BarrierPhase::Idle => {
                if self.running.is_empty() && self.copy_running.is_empty() {
                    self.barrier = BarrierPhase::Executing;
                    vec![GpuReaction::ScheduleBarrierDone {
                        at: now + self.params.barrier_cost,
                    }]
                } else {
                    self.barrier = BarrierPhase::Draining;
                    vec![]
                }
            }
            _ => vec![],
        }
    }

    /// Completes the executing barrier; returns the number of waiters
    /// released, then resumes dispatch.
    pub fn barrier_done(&mut self, now: Nanos, admissible: &dyn Fn(u32) -> bool) -> (usize, Vec<GpuReaction>) {
        assert_eq!(self.barrier, BarrierPhase::Executing, "no barrier executing");
        let released = self.barrier_waiters;
        self.barrier_waiters = 0;
        self.barrier = BarrierPhase::Idle;
        (released, self.dispatch(now, admissible))
    }

    pub fn barrier_active(&self) -> bool {
        self.barrier != BarrierPhase::Idle
    }

    pub fn running_count(&self) -> usize {
        self.running.len() + self.copy_running.len()
    }

    fn note_util_change(&mut self, now: Nanos) {
        let mut t = self.util_last_t;
        let v = self.util_current;
        while t < now {
            let bucket = (t / NS_PER_S) as usize;
            if self.util_buckets.len() <= bucket {
                self.util_buckets.resize(bucket + 1, 0.0);
            }
            let bucket_end = ((bucket as u64) + 1) * NS_PER_S;
            let span = bucket_end.min(now) - t;
            self.util_buckets[bucket] += v * span as f64;
            t += span;
        }
        self.util_last_t = now;
        self.util_current = self.running_util_sum().min(self.params.capacity);
    }

    /// Per-second mean utilization samples up to `end`.
    pub fn utilization_timeline(&mut self, end: Nanos) -> Vec<f64> {
        self.note_util_change(end);
        let buckets = (end / NS_PER_S) as usize;
        let mut out = Vec::with_capacity(buckets);
        for b in 0..buckets {
            let v = self.util_buckets.get(b).copied().unwrap_or(0.0) / NS_PER_S as f64;
            out.push(v);
        }
        out
    }
}

/// Kernel collision taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum CollisionKind {
    /// Equal stream priorities with differing urgency.
    PriorityCollision,
    /// The more urgent kernel holds the strictly lower stream priority.
    InvertedBinding,
}

/// One collision detection outcome: a launch decision against one foreign
/// task binding (the task's active kernels share a stream, priority and
/// urgency, so they collide as a unit).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CollisionEvent {
    pub time: Nanos,
    pub kind: CollisionKind,
    pub launching_chain: u32,
    pub other_chain: u32,
    pub launching_level: u32,
    pub other_level: u32,
    pub launching_urgency: f64,
    pub other_urgency: f64,
    pub active_chains: usize,
}

/// Checks a kernel about to launch against every active kernel from other
/// chains. Urgency comparison uses the last-evaluated AKB values.
pub fn detect_collisions(
    akb: &ActiveKernelBuffer,
    now: Nanos,
    launching_chain: u32,
    launching_level: u32,
    launching_urgency: f64,
) -> Vec<CollisionEvent> {
    let mut out = Vec::new();
    let mut cardinality = akb.active_chain_count();
    if akb.active_chain_urgencies().iter().all(|(c, _)| *c != launching_chain) {
        cardinality += 1; // the launcher itself
    }
    for b in akb.foreign_bindings(launching_chain) {
        let kind = if b.level == launching_level && b.last_urgency != launching_urgency {
            CollisionKind::PriorityCollision
        } else if (launching_urgency > b.last_urgency && launching_level > b.level)
            || (b.last_urgency > launching_urgency && b.level > launching_level)
        {
            CollisionKind::InvertedBinding
        } else {
            continue;
        };
        out.push(CollisionEvent {
            time: now,
            kind,
            launching_chain,
            other_chain: b.key.chain,
            launching_level,
            other_level: b.level,
            launching_urgency,
            other_urgency: b.last_urgency,
            active_chains: cardinality,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::akb::BindingKey;
    use crate::units::ms;

    fn info(chain: u32, util: f64) -> KernelInfo {
        KernelInfo {
            chain,
            instance: 0,
            task: 0,
            flat_index: 0,
            kernel_id: 0,
            utilization: util,
            is_memcpy: false,
        }
    }

    fn all(_c: u32) -> bool {
        true
    }

    #[test]
    fn idle_device_dispatches_immediately() {
        let mut gpu = GpuDevice::new(DeviceParams::rtx3070ti());
        let s = gpu.create_stream(2);
        let rs = gpu.enqueue(s, info(0, 0.4), ms(1.0), 0, &all);
        assert!(rs.iter().any(|r| matches!(r, GpuReaction::Dispatched { .. })));
        assert!(rs
            .iter()
            .any(|r| matches!(r, GpuReaction::ScheduleCompletion { at, .. } if *at == ms(1.0))));
    }

    #[test]
    fn same_stream_head_of_line_blocks_second_kernel() {
        let mut gpu = GpuDevice::new(DeviceParams::rtx3070ti());
        let s = gpu.create_stream(2);
        gpu.enqueue(s, info(0, 0.3), ms(1.0), 0, &all);
        let rs = gpu.enqueue(s, info(0, 0.3), ms(1.0), 0, &all);
        assert!(
            !rs.iter().any(|r| matches!(r, GpuReaction::Dispatched { .. })),
            "second kernel must wait for the head"
        );
        assert_eq!(gpu.running_count(), 1);
    }

    #[test]
    fn capacity_admits_while_it_fits_and_holds_the_rest() {
        let mut params = DeviceParams::rtx3070ti();
        params.contention_alpha = 0.0;
        let mut gpu = GpuDevice::new(params);
        let s0 = gpu.create_stream(0);
        let s1 = gpu.create_stream(1);
        let s2 = gpu.create_stream(2);
        gpu.enqueue(s0, info(0, 0.4), ms(1.0), 0, &all);
        gpu.enqueue(s1, info(1, 0.5), ms(1.0), 0, &all);
        assert_eq!(gpu.running_count(), 2, "0.9 fits within 1.0");
        gpu.enqueue(s2, info(2, 0.3), ms(1.0), 0, &all);
        assert_eq!(gpu.running_count(), 2, "third held until capacity frees");
    }

    #[test]
    fn completion_admits_pending_head() {
        let mut params = DeviceParams::rtx3070ti();
        params.contention_alpha = 0.0;
        let mut gpu = GpuDevice::new(params);
        let s0 = gpu.create_stream(0);
        let s1 = gpu.create_stream(1);
        let rs = gpu.enqueue(s0, info(0, 0.8), ms(1.0), 0, &all);
        gpu.enqueue(s1, info(1, 0.8), ms(2.0), 0, &all);
        let (seq, token) = rs
            .iter()
            .find_map(|r| match r {
                GpuReaction::ScheduleCompletion { seq, token, .. } => Some((*seq, *token)),
                _ => None,
            })
            .unwrap();
        let out = gpu.on_completion(seq, token, ms(1.0), &all).unwrap();
        assert_eq!(out.finished.chain, 0);
        assert!(out
            .reactions
            .iter()
            .any(|r| matches!(r, GpuReaction::Dispatched { info, .. } if info.chain == 1)));
    }

    #[test]
    fn contention_slows_corunning_kernels() {
        let mut params = DeviceParams::rtx3070ti();
        params.contention_alpha = 1.0;
        let mut gpu = GpuDevice::new(params);
        let s0 = gpu.create_stream(0);
        let s1 = gpu.create_stream(1);
        gpu.enqueue(s0, info(0, 0.5), ms(1.0), 0, &all);
        let rs = gpu.enqueue(s1, info(1, 0.4), ms(1.0), 0, &all);
        // both co-running: kernel 1 drains at 1/(1+1.0*0.5) so takes 1.5 ms
        let mut times: Vec<Nanos> = rs
            .iter()
            .filter_map(|r| match r {
                GpuReaction::ScheduleCompletion { at, .. } => Some(*at),
                _ => None,
            })
            .collect();
        times.sort_unstable();
        assert_eq!(times, vec![ms(1.4), ms(1.5)]);
    }

    #[test]
    fn zero_alpha_preserves_nominal_residence() {
        let mut params = DeviceParams::rtx3070ti();
        params.contention_alpha = 0.0;
        let mut gpu = GpuDevice::new(params);
        let s0 = gpu.create_stream(0);
        let s1 = gpu.create_stream(1);
        gpu.enqueue(s0, info(0, 0.5), ms(2.0), 0, &all);
        let rs = gpu.enqueue(s1, info(1, 0.4), ms(3.0), 0, &all);
        let at = rs
            .iter()
            .find_map(|r| match r {
                GpuReaction::ScheduleCompletion { at, .. } => Some(*at),
                _ => None,
            })
            .unwrap();
        assert_eq!(at, ms(3.0));
    }

    #[test]
    fn barrier_on_idle_device_costs_barrier_cost_only() {
        let mut gpu = GpuDevice::new(DeviceParams::rtx3070ti());
        let rs = gpu.request_barrier(ms(5.0));
        match rs.as_slice() {
            [GpuReaction::ScheduleBarrierDone { at }] => assert_eq!(*at, ms(5.0) + us(188.0)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn barrier_waits_for_drain_and_blocks_dispatch() {
        let mut params = DeviceParams::rtx3070ti();
        params.contention_alpha = 0.0;
        let mut gpu = GpuDevice::new(params);
        let s0 = gpu.create_stream(0);
        let s1 = gpu.create_stream(1);
        let rs = gpu.enqueue(s0, info(0, 0.5), ms(5.0), 0, &all);
        assert!(gpu.request_barrier(ms(1.0)).is_empty(), "must drain first");
        // enqueue during the barrier: no dispatch
        let rs2 = gpu.enqueue(s1, info(1, 0.2), ms(1.0), ms(2.0), &all);
        assert!(!rs2.iter().any(|r| matches!(r, GpuReaction::Dispatched { .. })));
        let (seq, token) = rs
            .iter()
            .find_map(|r| match r {
                GpuReaction::ScheduleCompletion { seq, token, .. } => Some((*seq, *token)),
                _ => None,
            })
            .unwrap();
        let out = gpu.on_completion(seq, token, ms(5.0), &all).unwrap();
        let done_at = out
            .reactions
            .iter()
            .find_map(|r| match r {
                GpuReaction::ScheduleBarrierDone { at } => Some(*at),
                _ => None,
            })
            .expect("barrier executes after drain");
        assert_eq!(done_at, ms(5.0) + us(188.0));
        let (released, rs3) = gpu.barrier_done(done_at, &all);
        assert_eq!(released, 1);
        assert!(rs3.iter().any(|r| matches!(r, GpuReaction::Dispatched { .. })));
    }

    #[test]
    fn memcpy_occupies_copy_engine_not_compute() {
        let mut params = DeviceParams::rtx3070ti();
        params.contention_alpha = 0.0;
        let mut gpu = GpuDevice::new(params);
        let s0 = gpu.create_stream(0);
        let s1 = gpu.create_stream(1);
        gpu.enqueue(s0, info(0, 0.9), ms(1.0), 0, &all);
        let mut m = info(1, 0.9);
        m.is_memcpy = true;
        let rs = gpu.enqueue(s1, m, ms(1.0), 0, &all);
        assert!(
            rs.iter().any(|r| matches!(r, GpuReaction::Dispatched { .. })),
            "copy engine has its own budget"
        );
        assert_eq!(gpu.running_count(), 2);
    }

    #[test]
    fn event_on_drained_stream_signals_immediately() {
        let mut gpu = GpuDevice::new(DeviceParams::rtx3070ti());
        let s = gpu.create_stream(0);
        let (ev, signaled) = gpu.record_event(s);
        assert!(signaled);
        assert!(gpu.event_signaled(ev));
    }

    #[test]
    fn event_signals_when_covered_kernels_complete() {
        let mut gpu = GpuDevice::new(DeviceParams::rtx3070ti());
        let s = gpu.create_stream(0);
        let rs = gpu.enqueue(s, info(0, 0.4), ms(1.0), 0, &all);
        let (ev, signaled) = gpu.record_event(s);
        assert!(!signaled);
        let (seq, token) = rs
            .iter()
            .find_map(|r| match r {
                GpuReaction::ScheduleCompletion { seq, token, .. } => Some((*seq, *token)),
                _ => None,
            })
            .unwrap();
        let out = gpu.on_completion(seq, token, ms(1.0), &all).unwrap();
        assert!(out
            .reactions
            .iter()
            .any(|r| matches!(r, GpuReaction::EventSignaled { event } if *event == ev)));
    }

    #[test]
    fn collision_taxonomy() {
        let mut akb = ActiveKernelBuffer::new(3);
        akb.refresh_urgency(1, 0.010, 1);
        akb.insert(BindingKey { chain: 1, instance: 0, task: 0 }, 0, 2, 10, 0.4);
        // equal level, unequal urgency: priority collision
        let evs = detect_collisions(&akb, 2, 0, 2, 0.020);
        assert_eq!(evs.len(), 1);
        assert_eq!(evs[0].kind, CollisionKind::PriorityCollision);
        assert_eq!(evs[0].active_chains, 2);
        // more urgent launcher on a lower-priority (numerically higher)
        // stream: inverted binding
        let evs = detect_collisions(&akb, 2, 0, 4, 0.020);
        assert_eq!(evs[0].kind, CollisionKind::InvertedBinding);
        // less urgent launcher on a lower-priority stream: consistent
        let evs = detect_collisions(&akb, 2, 0, 4, 0.005);
        assert!(evs.is_empty());
        // sole active kernel, own chain: nothing foreign
        let evs = detect_collisions(&akb, 2, 1, 3, 0.010);
        assert!(evs.is_empty());
    }
}
