//! Run metrics: per-chain deadline miss counts, latency distributions,
//! collision counts, utilization timelines and report serialization.

use crate::error::ReportError;
use crate::gpu::{CollisionEvent, CollisionKind};
use crate::units::{fmt_ms, Nanos, NS_PER_S};
use crate::urgency::nearest_rank_percentile;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Final state of one chain instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum InstanceOutcome {
    /// Finished within its deadline.
    Completed,
    /// Finished after its deadline.
    Missed,
    /// Abandoned before finishing (early chain exit or shedding); counts
    /// as missed, no latency recorded.
    EarlyExited,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ChainStats {
    pub total: u64,
    pub missed: u64,
    pub early_exited: u64,
    /// Latencies (completion - arrival) of instances that ran to
    /// completion, on time or not.
    pub latencies: Vec<Nanos>,
}

impl ChainStats {
    pub fn miss_ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.missed as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LatencySummary {
    pub p50: Nanos,
    pub p95: Nanos,
    pub p99: Nanos,
    pub mean: Nanos,
}

/// Aggregated collision counts keyed by the number of concurrently active
/// task chains at detection.
#[derive(Debug, Clone, Default, Serialize)]
pub struct CollisionHistogram {
    pub by_cardinality: BTreeMap<usize, CollisionBucket>,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct CollisionBucket {
    pub priority_collisions: u64,
    pub inverted_bindings: u64,
}

impl CollisionHistogram {
    pub fn record(&mut self, ev: &CollisionEvent) {
        let b = self.by_cardinality.entry(ev.active_chains).or_default();
        match ev.kind {
            CollisionKind::PriorityCollision => b.priority_collisions += 1,
            CollisionKind::InvertedBinding => b.inverted_bindings += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.by_cardinality
            .values()
            .map(|b| b.priority_collisions + b.inverted_bindings)
            .sum()
    }

    pub fn bucket_total(&self, cardinality: usize) -> u64 {
        self.by_cardinality
            .get(&cardinality)
            .map(|b| b.priority_collisions + b.inverted_bindings)
            .unwrap_or(0)
    }
}

/// Everything a finished run reports.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub chains: BTreeMap<u32, ChainStats>,
    pub collisions: CollisionHistogram,
    /// CPU busy-core fraction per simulated second.
    pub cpu_utilization: Vec<f64>,
    /// GPU compute occupancy per simulated second.
    pub gpu_utilization: Vec<f64>,
    /// Completed instances per simulated second of configured duration.
    pub throughput: f64,
    pub completed_instances: u64,
    pub frame_arrivals: u64,
    /// Modeled scheduler bookkeeping cost, microseconds.
    pub scheduling_overhead_us: f64,
    /// Total synchronization-call cost paid on the CPU, microseconds.
    pub sync_cost_us: f64,
    pub manifest: RunManifest,
}

/// Identity of a run: enough to attribute any produced file to exactly one
/// (config, policy, seed) triple.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub policy: String,
    pub duration_s: f64,
    pub f_a: f64,
    pub f_d: f64,
    pub f_tight: f64,
    pub jitter_ms: f64,
    pub tight_chains: Vec<u32>,
    pub device_profile: String,
    pub contention_alpha: f64,
    pub delta_eval_us: f64,
    pub sleep_us: f64,
    pub util_exempt: f64,
    pub th_percentile: f64,
    pub noise_pct: f64,
    pub cudafree_tasks: u32,
    pub workload_source: String,
    /// Echo of the experiment point this run belongs to, if any.
    pub sweep_point: Option<String>,
}

impl MetricsReport {
    /// Overall deadline miss ratio: the unweighted mean of per-chain miss
    /// ratios. Chains with zero instances are excluded.
    pub fn overall_miss_ratio(&self) -> f64 {
        overall_miss_ratio_of(
            &self
                .chains
                .values()
                .map(|c| (c.missed, c.total))
                .collect::<Vec<_>>(),
        )
    }

    /// Nearest-rank latency percentiles of one chain. Errors when the
    /// chain recorded no latency.
    pub fn latency_percentiles(&self, chain: u32) -> Result<LatencySummary, String> {
        let stats = self
            .chains
            .get(&chain)
            .ok_or_else(|| format!("chain {chain} not in report"))?;
        latency_summary(&stats.latencies).ok_or_else(|| format!("chain {chain} has no latencies"))
    }

    pub fn total_misses(&self) -> u64 {
        self.chains.values().map(|c| c.missed).sum()
    }

    pub fn total_instances(&self) -> u64 {
        self.chains.values().map(|c| c.total).sum()
    }

    /// Writes summary.csv, timeline.csv, collisions.csv and the manifest
    /// into `dir`, creating it if needed. Columns are bit-stable across
    /// runs.
    pub fn emit(&self, dir: &Path) -> Result<(), ReportError> {
        std::fs::create_dir_all(dir).map_err(|e| ReportError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        let write = |name: &str, body: String| -> Result<(), ReportError> {
            let path = dir.join(name);
            let mut f = std::fs::File::create(&path).map_err(|e| ReportError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            f.write_all(body.as_bytes()).map_err(|e| ReportError::Io {
                path: path.display().to_string(),
                source: e,
            })
        };

        let mut summary = String::from("chain,misses,total,miss_ratio,p50,p95,p99,mean\n");
        for (chain, stats) in &self.chains {
            let lat = latency_summary(&stats.latencies);
            let (p50, p95, p99, mean) = match lat {
                Some(l) => (fmt_ms(l.p50), fmt_ms(l.p95), fmt_ms(l.p99), fmt_ms(l.mean)),
                None => (String::new(), String::new(), String::new(), String::new()),
            };
            summary.push_str(&format!(
                "{},{},{},{:.6},{},{},{},{}\n",
                chain,
                stats.missed,
                stats.total,
                stats.miss_ratio(),
                p50,
                p95,
                p99,
                mean
            ));
        }
        write("summary.csv", summary)?;

        let mut timeline = String::from("t_s,cpu_util,gpu_util\n");
        let n = self.cpu_utilization.len().max(self.gpu_utilization.len());
        for t in 0..n {
            let c = self.cpu_utilization.get(t).copied().unwrap_or(0.0);
            let g = self.gpu_utilization.get(t).copied().unwrap_or(0.0);
            timeline.push_str(&format!("{t},{c:.4},{g:.4}\n"));
        }
        write("timeline.csv", timeline)?;

        let mut collisions = String::from("active_tasks,priority_collisions,inverted_bindings,total\n");
        for (card, b) in &self.collisions.by_cardinality {
            collisions.push_str(&format!(
                "{},{},{},{}\n",
                card,
                b.priority_collisions,
                b.inverted_bindings,
                b.priority_collisions + b.inverted_bindings
            ));
        }
        write("collisions.csv", collisions)?;

        let manifest = toml::to_string_pretty(&self.manifest)
            .expect("manifest serializes");
        write("manifest", manifest)?;
        Ok(())
    }
}

/// Eq. 3 over (missed, total) pairs; zero-instance chains are skipped.
pub fn overall_miss_ratio_of(per_chain: &[(u64, u64)]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &(miss, total) in per_chain {
        if total == 0 {
            continue;
        }
        sum += miss as f64 / total as f64;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn latency_summary(latencies: &[Nanos]) -> Option<LatencySummary> {
    if latencies.is_empty() {
        return None;
    }
    let mut sorted: Vec<f64> = latencies.iter().map(|&v| v as f64).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite latencies"));
    let pick = |p: f64| nearest_rank_percentile(&sorted, p) as Nanos;
    let mean = (sorted.iter().sum::<f64>() / sorted.len() as f64).round() as Nanos;
    Some(LatencySummary {
        p50: pick(50.0),
        p95: pick(95.0),
        p99: pick(99.0),
        mean,
    })
}

/// Utilization timelines are integrated per second; this trims both to the
/// configured duration.
pub fn clamp_timeline(mut v: Vec<f64>, duration: Nanos) -> Vec<f64> {
    let want = (duration / NS_PER_S) as usize;
    v.truncate(want);
    while v.len() < want {
        v.push(0.0);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::ms;

    #[test]
    fn eq3_hand_cases() {
        // chains with 1/10 and 3/10 miss: (0.1 + 0.3) / 2 = 0.2
        assert_eq!(overall_miss_ratio_of(&[(1, 10), (3, 10)]), 0.2);
        assert_eq!(overall_miss_ratio_of(&[(0, 5), (0, 9)]), 0.0);
        // zero-instance chain excluded from the mean
        assert_eq!(overall_miss_ratio_of(&[(1, 10), (0, 0)]), 0.1);
        // invariant to chain ordering
        assert_eq!(
            overall_miss_ratio_of(&[(3, 10), (1, 10)]),
            overall_miss_ratio_of(&[(1, 10), (3, 10)])
        );
    }

    #[test]
    fn latency_percentiles_nearest_rank() {
        let l = latency_summary(&[ms(10.0), ms(20.0), ms(30.0)]).unwrap();
        assert_eq!(l.p50, ms(20.0));
        assert_eq!(l.p95, ms(30.0));
        assert_eq!(l.mean, ms(20.0));
        let single = latency_summary(&[ms(7.0)]).unwrap();
        assert_eq!(single.p50, ms(7.0));
        assert_eq!(single.p99, ms(7.0));
        assert!(latency_summary(&[]).is_none());
    }

    #[test]
    fn collision_histogram_buckets_by_cardinality() {
        use crate::gpu::{CollisionEvent, CollisionKind};
        let mut h = CollisionHistogram::default();
        h.record(&CollisionEvent {
            time: 0,
            kind: CollisionKind::PriorityCollision,
            launching_chain: 0,
            other_chain: 1,
            launching_level: 2,
            other_level: 2,
            launching_urgency: 0.02,
            other_urgency: 0.01,
            active_chains: 2,
        });
        h.record(&CollisionEvent {
            time: 1,
            kind: CollisionKind::InvertedBinding,
            launching_chain: 0,
            other_chain: 2,
            launching_level: 4,
            other_level: 1,
            launching_urgency: 0.02,
            other_urgency: 0.01,
            active_chains: 3,
        });
        h.record(&CollisionEvent {
            time: 2,
            kind: CollisionKind::PriorityCollision,
            launching_chain: 1,
            other_chain: 0,
            launching_level: 2,
            other_level: 2,
            launching_urgency: 0.01,
            other_urgency: 0.02,
            active_chains: 2,
        });
        assert_eq!(h.bucket_total(2), 2);
        assert_eq!(h.bucket_total(3), 1);
        assert_eq!(h.total(), 3);
        assert_eq!(h.bucket_total(4), 0);
    }
}
