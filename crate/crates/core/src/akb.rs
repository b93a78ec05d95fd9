//! Active Kernel Buffer: the shared record of every launched-but-not-yet-
//! synchronized kernel, with its stream binding, profiled utilization and
//! the owning chain's last-evaluated urgency. Entries are grouped by
//! (chain, instance, task) binding; all kernels of one binding share a
//! stream and the chain-level urgency cell.

use crate::units::Nanos;
use std::collections::{BTreeMap, VecDeque};

pub type StreamId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct BindingKey {
    pub chain: u32,
    pub instance: u64,
    pub task: u32,
}

#[derive(Debug)]
struct Binding {
    stream: StreamId,
    /// Priority level of the bound stream; 0 is the highest priority.
    level: u32,
    kernels: VecDeque<ActiveKernel>,
}

#[derive(Debug, Clone, Copy)]
struct ActiveKernel {
    kernel_id: u64,
    utilization: f64,
}

#[derive(Debug, Clone, Copy)]
struct ChainCell {
    last_urgency: f64,
    evaluated_at: Nanos,
    cpu_priority: u32,
    active: usize,
}

/// One materialized AKB entry, the record kept per active kernel:
/// (K, U_K, S_K, C, PRI_C, T_K, UL_C(T_K)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AkbEntry {
    pub kernel_id: u64,
    pub utilization: f64,
    pub stream_id: StreamId,
    pub chain: u32,
    pub cpu_priority: u32,
    pub evaluated_at: Nanos,
    pub last_urgency: f64,
}

/// Aggregate view of one binding, used by collision detection and the
/// delay gate; `count` is the number of active kernels it covers.
#[derive(Debug, Clone, Copy)]
pub struct BindingView {
    pub key: BindingKey,
    pub stream: StreamId,
    pub level: u32,
    pub count: usize,
    pub last_urgency: f64,
    pub evaluated_at: Nanos,
}

#[derive(Debug, Default)]
pub struct ActiveKernelBuffer {
    bindings: BTreeMap<BindingKey, Binding>,
    chains: Vec<ChainCell>,
    total_active: usize,
}

impl ActiveKernelBuffer {
    pub fn new(num_chains: usize) -> Self {
        ActiveKernelBuffer {
            bindings: BTreeMap::new(),
            chains: vec![
                ChainCell {
                    last_urgency: 0.0,
                    evaluated_at: 0,
                    cpu_priority: 0,
                    active: 0,
                };
                num_chains
            ],
            total_active: 0,
        }
    }

    /// Refreshes the chain's urgency cell; every entry of the chain reads
    /// its (T_K, UL) through it.
    pub fn refresh_urgency(&mut self, chain: u32, urgency: f64, now: Nanos) {
        let cell = &mut self.chains[chain as usize];
        cell.last_urgency = urgency;
        cell.evaluated_at = now;
    }

    pub fn set_cpu_priority(&mut self, chain: u32, priority: u32) {
        self.chains[chain as usize].cpu_priority = priority;
    }

    pub fn chain_urgency(&self, chain: u32) -> (f64, Nanos) {
        let c = &self.chains[chain as usize];
        (c.last_urgency, c.evaluated_at)
    }

    /// Inserts an entry for a kernel at launch.
    pub fn insert(
        &mut self,
        key: BindingKey,
        stream: StreamId,
        level: u32,
        kernel_id: u64,
        utilization: f64,
    ) {
        let b = self.bindings.entry(key).or_insert_with(|| Binding {
            stream,
            level,
            kernels: VecDeque::new(),
        });
        debug_assert_eq!(b.stream, stream, "binding changed stream mid-instance");
        b.kernels.push_back(ActiveKernel {
            kernel_id,
            utilization,
        });
        self.chains[key.chain as usize].active += 1;
        self.total_active += 1;
    }

    /// Removes the `count` oldest entries of a binding; a batch
    /// synchronization covers its kernels in launch order. Removing more
    /// entries than exist is an invariant violation.
    pub fn remove_synced(&mut self, key: BindingKey, count: usize) {
        if count == 0 {
            return;
        }
        let b = self
            .bindings
            .get_mut(&key)
            .unwrap_or_else(|| panic!("double removal: no binding for {key:?}"));
        assert!(
            b.kernels.len() >= count,
            "double removal: binding {key:?} holds {} kernels, removing {count}",
            b.kernels.len()
        );
        for _ in 0..count {
            b.kernels.pop_front();
        }
        self.chains[key.chain as usize].active -= count;
        self.total_active -= count;
        if b.kernels.is_empty() {
            self.bindings.remove(&key);
        }
    }

    /// Drops every entry belonging to one chain instance (early exit).
    /// Returns the number of entries removed.
    pub fn purge_instance(&mut self, chain: u32, instance: u64) -> usize {
        let keys: Vec<BindingKey> = self
            .bindings
            .range(
                BindingKey {
                    chain,
                    instance,
                    task: 0,
                }..=BindingKey {
                    chain,
                    instance,
                    task: u32::MAX,
                },
            )
            .map(|(k, _)| *k)
            .collect();
        let mut removed = 0;
        for k in keys {
            let b = self.bindings.remove(&k).expect("key just listed");
            removed += b.kernels.len();
        }
        self.chains[chain as usize].active -= removed;
        self.total_active -= removed;
        removed
    }

    pub fn total_active(&self) -> usize {
        self.total_active
    }

    /// Number of distinct chains with at least one active kernel.
    pub fn active_chain_count(&self) -> usize {
        self.chains.iter().filter(|c| c.active > 0).count()
    }

    /// Latest urgencies of chains holding active kernels, ascending by
    /// chain id.
    pub fn active_chain_urgencies(&self) -> Vec<(u32, f64)> {
        self.chains
            .iter()
            .enumerate()
            .filter(|(_, c)| c.active > 0)
            .map(|(i, c)| (i as u32, c.last_urgency))
            .collect()
    }

    /// Highest last-evaluated urgency among all active kernels, if any.
    pub fn max_active_urgency(&self) -> Option<f64> {
        self.chains
            .iter()
            .filter(|c| c.active > 0)
            .map(|c| c.last_urgency)
            .max_by(|a, b| a.partial_cmp(b).expect("no NaN urgencies"))
    }

    /// True iff some chain other than `own` holds an active kernel with
    /// last urgency at or above the threshold.
    pub fn foreign_at_or_above(&self, own: u32, threshold: f64) -> bool {
        self.chains
            .iter()
            .enumerate()
            .any(|(i, c)| i as u32 != own && c.active > 0 && c.last_urgency >= threshold)
    }

    /// Binding aggregates for chains other than `own`.
    pub fn foreign_bindings(&self, own: u32) -> impl Iterator<Item = BindingView> + '_ {
        self.bindings
            .iter()
            .filter(move |(k, _)| k.chain != own)
            .map(|(k, b)| {
                let cell = &self.chains[k.chain as usize];
                BindingView {
                    key: *k,
                    stream: b.stream,
                    level: b.level,
                    count: b.kernels.len(),
                    last_urgency: cell.last_urgency,
                    evaluated_at: cell.evaluated_at,
                }
            })
    }

    /// Materializes all entries; test and debugging surface.
    pub fn entries(&self) -> Vec<AkbEntry> {
        let mut out = Vec::with_capacity(self.total_active);
        for (k, b) in &self.bindings {
            let cell = &self.chains[k.chain as usize];
            for kern in &b.kernels {
                out.push(AkbEntry {
                    kernel_id: kern.kernel_id,
                    utilization: kern.utilization,
                    stream_id: b.stream,
                    chain: k.chain,
                    cpu_priority: cell.cpu_priority,
                    evaluated_at: cell.evaluated_at,
                    last_urgency: cell.last_urgency,
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(chain: u32, instance: u64, task: u32) -> BindingKey {
        BindingKey {
            chain,
            instance,
            task,
        }
    }

    #[test]
    fn insert_then_sync_removes_in_launch_order() {
        let mut akb = ActiveKernelBuffer::new(2);
        akb.refresh_urgency(0, 0.02, 5);
        akb.insert(key(0, 0, 0), 3, 2, 100, 0.4);
        akb.insert(key(0, 0, 0), 3, 2, 101, 0.5);
        assert_eq!(akb.total_active(), 2);
        let e = akb.entries();
        assert_eq!(e[0].kernel_id, 100);
        assert_eq!(e[0].stream_id, 3);
        assert_eq!(e[0].last_urgency, 0.02);
        akb.remove_synced(key(0, 0, 0), 1);
        assert_eq!(akb.entries()[0].kernel_id, 101);
        akb.remove_synced(key(0, 0, 0), 1);
        assert_eq!(akb.total_active(), 0);
    }

    #[test]
    #[should_panic(expected = "double removal")]
    fn double_removal_is_a_violation() {
        let mut akb = ActiveKernelBuffer::new(1);
        akb.insert(key(0, 0, 0), 0, 0, 1, 0.2);
        akb.remove_synced(key(0, 0, 0), 1);
        akb.remove_synced(key(0, 0, 0), 1);
    }

    #[test]
    fn foreign_threshold_check_ignores_own_chain() {
        let mut akb = ActiveKernelBuffer::new(2);
        akb.refresh_urgency(0, 0.05, 1);
        akb.insert(key(0, 0, 0), 0, 0, 1, 0.3);
        // only own-chain entries above threshold: proceed
        assert!(!akb.foreign_at_or_above(0, 0.04));
        assert!(akb.foreign_at_or_above(1, 0.04));
        akb.refresh_urgency(0, 0.01, 2);
        assert!(!akb.foreign_at_or_above(1, 0.04));
    }

    #[test]
    fn purge_instance_drops_only_that_instance() {
        let mut akb = ActiveKernelBuffer::new(2);
        akb.insert(key(0, 7, 0), 0, 0, 1, 0.3);
        akb.insert(key(0, 7, 1), 1, 1, 2, 0.3);
        akb.insert(key(0, 8, 0), 2, 0, 3, 0.3);
        akb.insert(key(1, 1, 0), 4, 3, 4, 0.3);
        assert_eq!(akb.purge_instance(0, 7), 2);
        assert_eq!(akb.total_active(), 2);
        assert_eq!(akb.active_chain_count(), 2);
    }

    #[test]
    fn max_active_urgency_tracks_refreshes() {
        let mut akb = ActiveKernelBuffer::new(3);
        assert_eq!(akb.max_active_urgency(), None);
        akb.refresh_urgency(0, 0.01, 1);
        akb.refresh_urgency(1, 0.03, 1);
        akb.insert(key(0, 0, 0), 0, 0, 1, 0.3);
        akb.insert(key(1, 0, 0), 1, 1, 2, 0.3);
        assert_eq!(akb.max_active_urgency(), Some(0.03));
        akb.remove_synced(key(1, 0, 0), 1);
        assert_eq!(akb.max_active_urgency(), Some(0.01));
    }
}
