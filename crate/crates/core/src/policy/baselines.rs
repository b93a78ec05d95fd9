//! Baseline policies: vanilla asynchronous launching, static criticality
//! (tighter deadline means higher priority, fixed for the whole run), and
//! round-robin utilization grouping.

use crate::cpu::CpuPriority;
use crate::gpu::DeviceParams;
use crate::policy::{DecisionCtx, Policy, SchedulerConfig, SyncMode};
use crate::units::Nanos;
use crate::workload::Workload;
use std::collections::BTreeMap;

/// Unmodified behavior: every task on one default-priority stream,
/// asynchronous launching with a single end-of-stream synchronization, OS
/// default CPU priorities.
#[derive(Debug)]
pub struct VanillaPolicy {
    default_level: u32,
}

impl VanillaPolicy {
    pub fn new(device: &DeviceParams) -> Self {
        VanillaPolicy {
            // CUDA's default stream priority is 0, the numerically greatest
            default_level: device.num_priorities - 1,
        }
    }
}

impl Policy for VanillaPolicy {
    fn name(&self) -> &'static str {
        "vanilla"
    }

    fn sync_mode(&self) -> SyncMode {
        SyncMode::EndOfSegment
    }

    fn bind_level(&mut self, _ctx: &DecisionCtx, _chain: u32, _ul: f64) -> u32 {
        self.default_level
    }
}

/// Criticality-driven static mapping: chains with tighter deadlines get
/// higher CPU priority and higher stream priority; both maps are fixed
/// before the run starts.
#[derive(Debug)]
pub struct StaticCriticalityPolicy {
    levels: BTreeMap<u32, u32>,
    priorities: Vec<(u32, CpuPriority)>,
}

impl StaticCriticalityPolicy {
    pub fn new(workload: &Workload, device: &DeviceParams) -> Self {
        // criticality: explicit when configured, otherwise derived from
        // scaled deadlines (tighter deadline, higher criticality)
        let mut order: Vec<(Nanos, u32)> = workload
            .chains
            .iter()
            .map(|c| {
                let key = match c.static_criticality {
                    Some(crit) => (i64::MAX - crit as i64) as Nanos,
                    None => c.deadline,
                };
                (key, c.chain_id)
            })
            .collect();
        order.sort_unstable();
        let n = order.len();
        let mut levels = BTreeMap::new();
        let mut priorities = Vec::with_capacity(n);
        for (rank0, &(_, chain)) in order.iter().enumerate() {
            let level = if n > 1 {
                ((rank0 as f64) * (device.num_priorities - 1) as f64 / (n - 1) as f64).round()
                    as u32
            } else {
                0
            };
            levels.insert(chain, level);
            priorities.push((chain, (rank0 + 1) as CpuPriority));
        }
        StaticCriticalityPolicy { levels, priorities }
    }
}

impl Policy for StaticCriticalityPolicy {
    fn name(&self) -> &'static str {
        "static"
    }

    fn sync_mode(&self) -> SyncMode {
        SyncMode::EndOfSegment
    }

    fn bind_level(&mut self, _ctx: &DecisionCtx, chain: u32, _ul: f64) -> u32 {
        *self.levels.get(&chain).expect("chain registered")
    }

    fn cpu_priorities(&mut self, _ctx: &DecisionCtx) -> Option<Vec<(u32, CpuPriority)>> {
        Some(self.priorities.clone())
    }
}

/// Round-robin utilization grouping: active chains are packed first-fit
/// into groups whose summed occupancy fits the device; groups take turns
/// owning the dispatch window, and within a group lower-utilization work
/// binds to higher-priority streams.
#[derive(Debug)]
pub struct RrUtilPolicy {
    chain_util: Vec<f64>,
    capacity: f64,
    num_priorities: u32,
    window: Nanos,
    groups: Vec<Vec<u32>>,
    active_group: usize,
    active_instances: BTreeMap<u32, usize>,
}

impl RrUtilPolicy {
    pub fn new(workload: &Workload, device: &DeviceParams, scheduler: &SchedulerConfig) -> Self {
        let max_chain = workload
            .chains
            .iter()
            .map(|c| c.chain_id)
            .max()
            .unwrap_or(0) as usize;
        let mut chain_util = vec![0.0; max_chain + 1];
        for c in &workload.chains {
            let task_utils: Vec<f64> = c.tasks.iter().map(|t| t.mean_utilization()).collect();
            chain_util[c.chain_id as usize] =
                task_utils.iter().sum::<f64>() / task_utils.len() as f64;
        }
        RrUtilPolicy {
            chain_util,
            capacity: device.capacity,
            num_priorities: device.num_priorities,
            window: scheduler.rr_window,
            groups: Vec::new(),
            active_group: 0,
            active_instances: BTreeMap::new(),
        }
    }

    fn group_of(&self, chain: u32) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&chain))
    }

    fn place(&mut self, chain: u32) {
        if self.group_of(chain).is_some() {
            return;
        }
        let u = self.chain_util[chain as usize];
        for g in &mut self.groups {
            let sum: f64 = g.iter().map(|&c| self.chain_util[c as usize]).sum();
            if sum + u <= self.capacity + 1e-9 {
                g.push(chain);
                return;
            }
        }
        self.groups.push(vec![chain]);
    }

    fn remove(&mut self, chain: u32) {
        if let Some(gi) = self.group_of(chain) {
            self.groups[gi].retain(|&c| c != chain);
            if self.groups[gi].is_empty() {
                self.groups.remove(gi);
                if self.active_group >= self.groups.len() {
                    self.active_group = 0;
                }
            }
        }
    }
}

impl Policy for RrUtilPolicy {
    fn name(&self) -> &'static str {
        "rr-util"
    }

    fn sync_mode(&self) -> SyncMode {
        SyncMode::EndOfSegment
    }

    fn rotation_window(&self) -> Option<Nanos> {
        Some(self.window)
    }

    fn on_rotate(&mut self) {
        if !self.groups.is_empty() {
            self.active_group = (self.active_group + 1) % self.groups.len();
        }
    }

    fn admissible(&self, chain: u32) -> bool {
        match self.group_of(chain) {
            Some(g) => g == self.active_group,
            None => true,
        }
    }

    fn on_instance_start(&mut self, chain: u32, _instance: u64) {
        let n = self.active_instances.entry(chain).or_insert(0);
        *n += 1;
        if *n == 1 {
            self.place(chain);
        }
    }

    fn on_instance_end(&mut self, chain: u32, _instance: u64) {
        if let Some(n) = self.active_instances.get_mut(&chain) {
            *n -= 1;
            if *n == 0 {
                self.active_instances.remove(&chain);
                self.remove(chain);
            }
        }
    }

    fn bind_level(&mut self, _ctx: &DecisionCtx, chain: u32, _ul: f64) -> u32 {
        let Some(gi) = self.group_of(chain) else {
            return self.num_priorities - 1;
        };
        // lower utilization gets the higher stream priority within a group
        let mut members: Vec<(f64, u32)> = self.groups[gi]
            .iter()
            .map(|&c| (self.chain_util[c as usize], c))
            .collect();
        members.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("no NaN utils").then(a.1.cmp(&b.1)));
        let rank = members.iter().position(|&(_, c)| c == chain).expect("member") as u32;
        rank.min(self.num_priorities - 1)
    }
}
