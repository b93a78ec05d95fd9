//! Fixed-priority preemptive CPU model. At most `cores` activities run at
//! once; within a priority level service is FIFO, and a higher-priority
//! arrival preempts the lowest-priority running activity. Preempted work
//! is resumable; service accounting is exact integer nanoseconds.

use crate::units::{Nanos, NS_PER_S};

pub type ActivityId = u32;

/// Lower value means higher priority (rank semantics, matching
/// SCHED_FIFO-style priority ranks handed out by the schedulers).
pub type CpuPriority = u32;

pub const DEFAULT_PRIORITY: CpuPriority = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AState {
    Idle,
    Ready,
    Running,
}

#[derive(Debug)]
struct Activity {
    prio: CpuPriority,
    state: AState,
    demand_left: Nanos,
    enq_seq: u64,
    started_at: Nanos,
    token: u64,
}

#[derive(Debug, Clone, Copy)]
pub enum CpuReaction {
    ScheduleDone {
        at: Nanos,
        activity: ActivityId,
        token: u64,
    },
}

#[derive(Debug)]
pub struct CpuModel {
    cores: usize,
    acts: Vec<Activity>,
    next_seq: u64,
    next_token: u64,
    busy_buckets: Vec<f64>,
    busy_last_t: Nanos,
    busy_current: usize,
}

impl CpuModel {
    pub fn new(cores: usize) -> Self {
        assert!(cores >= 1);
        CpuModel {
            cores,
            acts: Vec::new(),
            next_seq: 0,
            next_token: 0,
            busy_buckets: Vec::new(),
            busy_last_t: 0,
            busy_current: 0,
        }
    }

    pub fn register(&mut self, prio: CpuPriority) -> ActivityId {
        let id = self.acts.len() as ActivityId;
        self.acts.push(Activity {
            prio,
            state: AState::Idle,
            demand_left: 0,
            enq_seq: 0,
            started_at: 0,
            token: 0,
        });
        id
    }

    pub fn is_idle(&self, a: ActivityId) -> bool {
        self.acts[a as usize].state == AState::Idle
    }

    pub fn priority(&self, a: ActivityId) -> CpuPriority {
        self.acts[a as usize].prio
    }

    /// Admits `demand` nanoseconds of CPU work for an idle activity.
    pub fn submit(&mut self, a: ActivityId, demand: Nanos, now: Nanos) -> Vec<CpuReaction> {
        let act = &mut self.acts[a as usize];
        assert_eq!(act.state, AState::Idle, "activity {a} already has work");
        act.state = AState::Ready;
        act.demand_left = demand;
        act.enq_seq = self.next_seq;
        self.next_seq += 1;
        self.reschedule(now)
    }

    /// Changes an activity's priority; running work keeps its progress.
    pub fn set_priority(&mut self, a: ActivityId, prio: CpuPriority, now: Nanos) -> Vec<CpuReaction> {
        let act = &mut self.acts[a as usize];
        if act.prio == prio {
            return Vec::new();
        }
        act.prio = prio;
        if act.state == AState::Idle {
            return Vec::new();
        }
        self.reschedule(now)
    }

    /// Handles a completion event. Returns false for stale tokens
    /// (superseded by a preemption).
    pub fn on_done(&mut self, a: ActivityId, token: u64, now: Nanos) -> (bool, Vec<CpuReaction>) {
        let act = &mut self.acts[a as usize];
        if act.state != AState::Running || act.token != token {
            return (false, Vec::new());
        }
        act.demand_left = 0;
        act.state = AState::Idle;
        self.note_busy(now, -1);
        (true, self.reschedule(now))
    }

    /// Enforces that the `cores` highest-priority admitted activities run,
    /// FIFO within a priority level. Preempted activities keep their queue
    /// position; newly started ones get completion schedules.
    fn reschedule(&mut self, now: Nanos) -> Vec<CpuReaction> {
        let admitted = self
            .acts
            .iter()
            .filter(|a| a.state != AState::Idle)
            .count();
        let mut reactions = Vec::new();
        if admitted <= self.cores {
            // free cores for everyone: start all ready, preempt nothing
            for id in 0..self.acts.len() {
                if self.acts[id].state == AState::Ready {
                    reactions.push(self.start(id as ActivityId, now));
                }
            }
            return reactions;
        }
        let mut candidates: Vec<(CpuPriority, u64, ActivityId)> = self
            .acts
            .iter()
            .enumerate()
            .filter(|(_, a)| a.state != AState::Idle)
            .map(|(i, a)| (a.prio, a.enq_seq, i as ActivityId))
            .collect();
        candidates.sort_unstable();
        let should_run: Vec<ActivityId> = candidates
            .iter()
            .take(self.cores)
            .map(|&(_, _, id)| id)
            .collect();

        // preempt running activities that fell out of the top set
        for i in 0..self.acts.len() {
            let id = i as ActivityId;
            if self.acts[i].state == AState::Running && !should_run.contains(&id) {
                let act = &mut self.acts[i];
                let served = now - act.started_at;
                act.demand_left = act.demand_left.saturating_sub(served);
                act.state = AState::Ready;
                act.token += 1; // invalidate the pending completion
                self.note_busy(now, -1);
            }
        }
        // start ready activities that entered the top set
        for &id in &should_run {
            if self.acts[id as usize].state == AState::Ready {
                reactions.push(self.start(id, now));
            }
        }
        reactions
    }

    fn start(&mut self, id: ActivityId, now: Nanos) -> CpuReaction {
        let act = &mut self.acts[id as usize];
        debug_assert_eq!(act.state, AState::Ready);
        act.state = AState::Running;
        act.started_at = now;
        self.next_token += 1;
        act.token = self.next_token;
        let at = now + act.demand_left;
        let token = act.token;
        self.note_busy(now, 1);
        CpuReaction::ScheduleDone {
            at,
            activity: id,
            token,
        }
    }

    fn note_busy(&mut self, now: Nanos, delta: i32) {
        let mut t = self.busy_last_t;
        let v = self.busy_current as f64;
        while t < now {
            let bucket = (t / NS_PER_S) as usize;
            if self.busy_buckets.len() <= bucket {
                self.busy_buckets.resize(bucket + 1, 0.0);
            }
            let bucket_end = ((bucket as u64) + 1) * NS_PER_S;
            let span = bucket_end.min(now) - t;
            self.busy_buckets[bucket] += v * span as f64;
            t += span;
        }
        self.busy_last_t = now;
        self.busy_current = (self.busy_current as i64 + delta as i64) as usize;
    }

    /// Per-second mean busy-core fraction up to `end`.
    pub fn busy_timeline(&mut self, end: Nanos) -> Vec<f64> {
        self.note_busy(end, 0);
        let buckets = (end / NS_PER_S) as usize;
        (0..buckets)
            .map(|b| {
                self.busy_buckets.get(b).copied().unwrap_or(0.0)
                    / (NS_PER_S as f64 * self.cores as f64)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::ms;

    fn drive_to_completion(cpu: &mut CpuModel, mut pending: Vec<CpuReaction>) -> Vec<(Nanos, ActivityId)> {
        // miniature event loop over completion reactions only
        let mut done = Vec::new();
        while !pending.is_empty() {
            pending.sort_by_key(|r| match r {
                CpuReaction::ScheduleDone { at, activity, .. } => (*at, *activity),
            });
            let CpuReaction::ScheduleDone { at, activity, token } = pending.remove(0);
            let (genuine, more) = cpu.on_done(activity, token, at);
            if genuine {
                done.push((at, activity));
            }
            pending.extend(more);
        }
        done
    }

    #[test]
    fn single_activity_completes_after_demand() {
        let mut cpu = CpuModel::new(8);
        let a = cpu.register(DEFAULT_PRIORITY);
        let rs = cpu.submit(a, ms(5.0), 0);
        let done = drive_to_completion(&mut cpu, rs);
        assert_eq!(done, vec![(ms(5.0), a)]);
    }

    #[test]
    fn same_priority_is_fifo_on_one_core() {
        let mut cpu = CpuModel::new(1);
        let a = cpu.register(10);
        let b = cpu.register(10);
        let mut rs = cpu.submit(a, ms(2.0), 0);
        rs.extend(cpu.submit(b, ms(1.0), 0));
        let done = drive_to_completion(&mut cpu, rs);
        assert_eq!(done, vec![(ms(2.0), a), (ms(3.0), b)]);
    }

    #[test]
    fn high_priority_burst_delays_low_priority_by_its_length() {
        // single core: a 2 ms burst at t=1 ms preempts; the low-priority
        // activity finishes at 5+2 = 7 ms
        let mut cpu = CpuModel::new(1);
        let lo = cpu.register(20);
        let hi = cpu.register(5);
        let mut rs = cpu.submit(lo, ms(5.0), 0);
        rs.extend(cpu.submit(hi, ms(2.0), ms(1.0)));
        let done = drive_to_completion(&mut cpu, rs);
        assert_eq!(done, vec![(ms(3.0), hi), (ms(7.0), lo)]);
    }

    #[test]
    fn preempted_activity_keeps_queue_position() {
        let mut cpu = CpuModel::new(1);
        let a = cpu.register(10);
        let b = cpu.register(10);
        let hi = cpu.register(1);
        let mut rs = cpu.submit(a, ms(4.0), 0);
        rs.extend(cpu.submit(b, ms(1.0), 0));
        rs.extend(cpu.submit(hi, ms(1.0), ms(1.0)));
        // a resumes before b despite b being enqueued while a was running
        let done = drive_to_completion(&mut cpu, rs);
        assert_eq!(done, vec![(ms(2.0), hi), (ms(5.0), a), (ms(6.0), b)]);
    }

    #[test]
    fn multicore_runs_in_parallel() {
        let mut cpu = CpuModel::new(2);
        let a = cpu.register(10);
        let b = cpu.register(10);
        let mut rs = cpu.submit(a, ms(2.0), 0);
        rs.extend(cpu.submit(b, ms(2.0), 0));
        let done = drive_to_completion(&mut cpu, rs);
        assert_eq!(done, vec![(ms(2.0), a), (ms(2.0), b)]);
    }

    #[test]
    fn priority_raise_preempts_lowest_running() {
        let mut cpu = CpuModel::new(1);
        let a = cpu.register(10);
        let b = cpu.register(20);
        let mut rs = cpu.submit(a, ms(4.0), 0);
        rs.extend(cpu.submit(b, ms(1.0), 0));
        // at 1 ms, b becomes the most important
        rs.extend(cpu.set_priority(b, 1, ms(1.0)));
        let done = drive_to_completion(&mut cpu, rs);
        assert_eq!(done, vec![(ms(2.0), b), (ms(5.0), a)]);
    }

    #[test]
    fn busy_timeline_integrates_core_usage() {
        let mut cpu = CpuModel::new(2);
        let a = cpu.register(10);
        let rs = cpu.submit(a, crate::units::secs(1.0), 0);
        drive_to_completion(&mut cpu, rs);
        let tl = cpu.busy_timeline(crate::units::secs(2.0));
        assert_eq!(tl.len(), 2);
        assert!((tl[0] - 0.5).abs() < 1e-9, "one of two cores busy");
        assert_eq!(tl[1], 0.0);
    }
}
