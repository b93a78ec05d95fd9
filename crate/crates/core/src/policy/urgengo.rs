//! The urgency-centric policy: reservation-based task-level stream
//! binding, delayed kernel launching, batched launch synchronization with
//! batch overlapping, urgency-ranked CPU priorities and early chain exit.

use crate::cpu::CpuPriority;
use crate::gpu::DeviceParams;
use crate::policy::{
    normalize_level, rank_chains_by_urgency, urgency_rank, DecisionCtx, LaunchGate, Policy,
    PolicySpec, SchedulerConfig, SyncMode,
};

#[derive(Debug)]
pub struct UrgengoPolicy {
    binding: bool,
    delay: bool,
    sync: SyncMode,
    /// Streams per task pool (the reserved level plus ranked levels).
    pool_size: u32,
    num_priorities: u32,
}

impl UrgengoPolicy {
    pub fn new(spec: PolicySpec, device: &DeviceParams, scheduler: &SchedulerConfig) -> Self {
        let pool = if scheduler.binding_streams == 0 {
            device.num_priorities
        } else {
            scheduler.binding_streams.min(device.num_priorities)
        };
        UrgengoPolicy {
            binding: !spec.no_binding,
            delay: !spec.no_delay,
            sync: spec.sync_override.unwrap_or(SyncMode::Batched { overlap: true }),
            pool_size: pool.max(1),
            num_priorities: device.num_priorities,
        }
    }
}

impl Policy for UrgengoPolicy {
    fn name(&self) -> &'static str {
        "urgengo"
    }

    fn sync_mode(&self) -> SyncMode {
        self.sync
    }

    fn charges_akb_overhead(&self) -> bool {
        true
    }

    fn wants_threshold(&self) -> bool {
        true
    }

    fn bind_level(&mut self, ctx: &DecisionCtx, chain: u32, own_urgency: f64) -> u32 {
        if !self.binding {
            // static default-priority binding: the lowest level
            return self.num_priorities - 1;
        }
        if self.pool_size == 1 {
            return 0;
        }
        if let Some(th) = ctx.threshold {
            if own_urgency >= th {
                return 0; // the reserved highest priority
            }
        }
        let others: Vec<(u32, f64)> = ctx
            .akb
            .active_chain_urgencies()
            .into_iter()
            .filter(|&(c, _)| c != chain)
            .collect();
        let (rank, n) = urgency_rank(chain, own_urgency, &others);
        normalize_level(rank, n, self.pool_size)
    }

    fn launch_gate(
        &mut self,
        ctx: &DecisionCtx,
        chain: u32,
        own_urgency: f64,
        kernel_utilization: f64,
    ) -> LaunchGate {
        if !self.delay {
            return LaunchGate::Proceed;
        }
        let Some(th) = ctx.threshold else {
            return LaunchGate::Proceed;
        };
        if own_urgency >= th || kernel_utilization < ctx.scheduler.util_exemption {
            return LaunchGate::Proceed;
        }
        if ctx.akb.foreign_at_or_above(chain, th) {
            LaunchGate::Delay {
                sleep: ctx.scheduler.sleep_interval,
            }
        } else {
            LaunchGate::Proceed
        }
    }

    fn cpu_priorities(&mut self, ctx: &DecisionCtx) -> Option<Vec<(u32, CpuPriority)>> {
        Some(rank_chains_by_urgency(ctx.active))
    }

    fn early_exit(&self, _ctx: &DecisionCtx, _chain: u32, own_urgency: f64) -> bool {
        own_urgency < 0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::akb::{ActiveKernelBuffer, BindingKey};
    use crate::policy::{ChainView, PolicyKind};
    use crate::workload::{builtin_workload, Workload};

    fn ctx_fixture<'a>(
        akb: &'a ActiveKernelBuffer,
        workload: &'a Workload,
        device: &'a DeviceParams,
        scheduler: &'a SchedulerConfig,
        threshold: Option<f64>,
        active: &'a [ChainView],
    ) -> DecisionCtx<'a> {
        DecisionCtx {
            now: 0,
            akb,
            threshold,
            workload,
            device,
            scheduler,
            active,
        }
    }

    fn policy(device: &DeviceParams, scheduler: &SchedulerConfig) -> UrgengoPolicy {
        UrgengoPolicy::new(PolicySpec::new(PolicyKind::Urgengo), device, scheduler)
    }

    #[test]
    fn above_threshold_gets_reserved_level() {
        let device = DeviceParams::rtx3070ti();
        let scheduler = SchedulerConfig::default();
        let w = builtin_workload("c0-c9", 0).unwrap();
        let akb = ActiveKernelBuffer::new(10);
        let ctx = ctx_fixture(&akb, &w, &device, &scheduler, Some(0.015), &[]);
        let mut p = policy(&device, &scheduler);
        assert_eq!(p.bind_level(&ctx, 0, 0.016), 0);
    }

    #[test]
    fn below_threshold_ranks_against_akb() {
        let device = DeviceParams::rtx3070ti();
        let scheduler = SchedulerConfig::default();
        let w = builtin_workload("c0-c9", 0).unwrap();
        let mut akb = ActiveKernelBuffer::new(10);
        for (chain, ul) in [(5u32, 0.014), (6, 0.010), (7, 0.006)] {
            akb.refresh_urgency(chain, ul, 0);
            akb.insert(
                BindingKey { chain, instance: 0, task: 0 },
                chain,
                2,
                chain as u64,
                0.3,
            );
        }
        let ctx = ctx_fixture(&akb, &w, &device, &scheduler, Some(1.0), &[]);
        let mut p = policy(&device, &scheduler);
        assert_eq!(p.bind_level(&ctx, 1, 0.014), 1, "rank 1 of 4");
        assert_eq!(p.bind_level(&ctx, 1, 0.005), 5, "rank 4 of 4");
    }

    #[test]
    fn empty_akb_maps_to_middle_level() {
        let device = DeviceParams::rtx3070ti();
        let scheduler = SchedulerConfig::default();
        let w = builtin_workload("c0-c9", 0).unwrap();
        let akb = ActiveKernelBuffer::new(10);
        let ctx = ctx_fixture(&akb, &w, &device, &scheduler, Some(1.0), &[]);
        let mut p = policy(&device, &scheduler);
        assert_eq!(p.bind_level(&ctx, 0, 0.005), 3);
    }

    #[test]
    fn delay_gate_rules() {
        let device = DeviceParams::rtx3070ti();
        let scheduler = SchedulerConfig::default();
        let w = builtin_workload("c0-c9", 0).unwrap();
        let mut akb = ActiveKernelBuffer::new(10);
        akb.refresh_urgency(3, 0.02, 0);
        akb.insert(BindingKey { chain: 3, instance: 0, task: 0 }, 0, 0, 1, 0.5);
        let ctx = ctx_fixture(&akb, &w, &device, &scheduler, Some(0.015), &[]);
        let mut p = policy(&device, &scheduler);
        // foreign above-threshold entry, own below, high-utilization kernel
        assert!(matches!(
            p.launch_gate(&ctx, 0, 0.005, 0.4),
            LaunchGate::Delay { .. }
        ));
        // exempt: extremely low utilization
        assert_eq!(p.launch_gate(&ctx, 0, 0.005, 0.05), LaunchGate::Proceed);
        // own chain above threshold never delays
        assert_eq!(p.launch_gate(&ctx, 0, 0.03, 0.4), LaunchGate::Proceed);
        // only own-chain entries above threshold: proceed
        assert_eq!(p.launch_gate(&ctx, 3, 0.005, 0.4), LaunchGate::Proceed);
        // uncalibrated threshold disables delaying
        let ctx2 = ctx_fixture(&akb, &w, &device, &scheduler, None, &[]);
        assert_eq!(p.launch_gate(&ctx2, 0, 0.005, 0.4), LaunchGate::Proceed);
    }

    #[test]
    fn early_exit_on_negative_urgency_only() {
        let device = DeviceParams::rtx3070ti();
        let scheduler = SchedulerConfig::default();
        let w = builtin_workload("c0-c9", 0).unwrap();
        let akb = ActiveKernelBuffer::new(10);
        let ctx = ctx_fixture(&akb, &w, &device, &scheduler, None, &[]);
        let p = policy(&device, &scheduler);
        assert!(p.early_exit(&ctx, 0, -0.01));
        assert!(!p.early_exit(&ctx, 0, 0.001));
    }

    #[test]
    fn ablation_switches_disable_mechanisms() {
        let device = DeviceParams::rtx3070ti();
        let scheduler = SchedulerConfig::default();
        let w = builtin_workload("c0-c9", 0).unwrap();
        let mut akb = ActiveKernelBuffer::new(10);
        akb.refresh_urgency(3, 0.02, 0);
        akb.insert(BindingKey { chain: 3, instance: 0, task: 0 }, 0, 0, 1, 0.5);
        let ctx = ctx_fixture(&akb, &w, &device, &scheduler, Some(0.015), &[]);
        let mut spec = PolicySpec::new(PolicyKind::Urgengo);
        spec.no_binding = true;
        spec.no_delay = true;
        let mut p = UrgengoPolicy::new(spec, &device, &scheduler);
        assert_eq!(p.bind_level(&ctx, 0, 0.02), 5, "static lowest level");
        assert_eq!(p.launch_gate(&ctx, 0, 0.005, 0.4), LaunchGate::Proceed);
    }
}
