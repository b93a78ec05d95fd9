//! Classical dynamic-priority policies (EDF, SJF, HRRN, lowest chain
//! utilization first). Each produces a total order over active chains at
//! every trigger point, mapped to CPU priorities and stream levels by the
//! same rank normalization the urgency policy uses.

use crate::cpu::CpuPriority;
use crate::policy::{normalize_level, ChainView, DecisionCtx, Policy, SyncMode};
use crate::workload::Workload;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassicalMetric {
    /// Earliest absolute deadline first.
    Edf,
    /// Smallest predicted remaining work first.
    Sjf,
    /// Highest response ratio next: (wait + remaining) / remaining.
    Hrrn,
    /// Lowest chain utilization (GPU time per period) first.
    Lcuf,
}

#[derive(Debug)]
pub struct ClassicalPolicy {
    metric: ClassicalMetric,
    util_demand: Vec<f64>,
}

impl ClassicalPolicy {
    pub fn new(metric: ClassicalMetric, workload: &Workload) -> Self {
        let max_chain = workload
            .chains
            .iter()
            .map(|c| c.chain_id)
            .max()
            .unwrap_or(0) as usize;
        let mut util_demand = vec![0.0; max_chain + 1];
        for c in &workload.chains {
            util_demand[c.chain_id as usize] = c.gpu_utilization_demand();
        }
        ClassicalPolicy {
            metric,
            util_demand,
        }
    }

    /// Ordering key: smaller sorts earlier (more important).
    fn key(&self, v: &ChainView, now: u64) -> f64 {
        match self.metric {
            ClassicalMetric::Edf => v.earliest_deadline as f64,
            ClassicalMetric::Sjf => v.remaining_estimate,
            ClassicalMetric::Hrrn => {
                let remaining = v.remaining_estimate.max(1.0);
                let wait = now.saturating_sub(v.oldest_arrival) as f64;
                -((wait + remaining) / remaining)
            }
            ClassicalMetric::Lcuf => self.util_demand[v.chain as usize],
        }
    }

    fn order(&self, views: &[ChainView], now: u64) -> Vec<u32> {
        let mut keyed: Vec<(f64, u32)> =
            views.iter().map(|v| (self.key(v, now), v.chain)).collect();
        keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite keys").then(a.1.cmp(&b.1)));
        keyed.into_iter().map(|(_, c)| c).collect()
    }
}

impl Policy for ClassicalPolicy {
    fn name(&self) -> &'static str {
        match self.metric {
            ClassicalMetric::Edf => "edf",
            ClassicalMetric::Sjf => "sjf",
            ClassicalMetric::Hrrn => "hrrn",
            ClassicalMetric::Lcuf => "lcuf",
        }
    }

    fn sync_mode(&self) -> SyncMode {
        SyncMode::EndOfSegment
    }

    fn binds_with_chain_views(&self) -> bool {
        true
    }

    fn bind_level(&mut self, ctx: &DecisionCtx, chain: u32, _ul: f64) -> u32 {
        let order = self.order(ctx.active, ctx.now);
        let n = order.len().max(1);
        let rank = order
            .iter()
            .position(|&c| c == chain)
            .map(|p| p + 1)
            .unwrap_or(n);
        normalize_level(rank, n, ctx.device.num_priorities)
    }

    fn cpu_priorities(&mut self, ctx: &DecisionCtx) -> Option<Vec<(u32, CpuPriority)>> {
        let order = self.order(ctx.active, ctx.now);
        Some(
            order
                .into_iter()
                .enumerate()
                .map(|(i, c)| (c, (i + 1) as CpuPriority))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::ms;

    fn view(chain: u32, deadline: u64, arrival: u64, remaining: f64) -> ChainView {
        ChainView {
            chain,
            urgency: 0.0,
            earliest_deadline: deadline,
            oldest_arrival: arrival,
            remaining_estimate: remaining,
            utilization_demand: 0.0,
        }
    }

    fn policy(metric: ClassicalMetric) -> ClassicalPolicy {
        ClassicalPolicy {
            metric,
            util_demand: vec![0.3, 0.1, 0.2],
        }
    }

    #[test]
    fn edf_orders_by_absolute_deadline() {
        let p = policy(ClassicalMetric::Edf);
        let views = [
            view(0, ms(80.0), 0, 1.0),
            view(1, ms(50.0), 0, 1.0),
        ];
        assert_eq!(p.order(&views, 0), vec![1, 0]);
    }

    #[test]
    fn sjf_ties_break_by_chain_id() {
        let p = policy(ClassicalMetric::Sjf);
        let views = [view(2, 0, 0, 5.0), view(1, 0, 0, 5.0)];
        assert_eq!(p.order(&views, 0), vec![1, 2]);
    }

    #[test]
    fn hrrn_of_just_arrived_instance_is_one() {
        let p = policy(ClassicalMetric::Hrrn);
        // just arrived: ratio (0 + r)/r = 1; waited: ratio > 1 wins
        let views = [
            view(0, 0, ms(10.0), 1000.0),
            view(1, 0, 0, 1000.0),
        ];
        let order = p.order(&views, ms(10.0));
        assert_eq!(order, vec![1, 0], "longer wait has the higher ratio");
        let lone = [view(0, 0, ms(10.0), 1000.0)];
        let k = p.key(&lone[0], ms(10.0));
        assert!((k + 1.0).abs() < 1e-12, "ratio exactly 1.0 for wait 0");
    }

    #[test]
    fn lcuf_uses_static_chain_utilization() {
        let p = policy(ClassicalMetric::Lcuf);
        let views = [view(0, 0, 0, 1.0), view(1, 0, 0, 1.0), view(2, 0, 0, 1.0)];
        assert_eq!(p.order(&views, 0), vec![1, 2, 0]);
    }
}
