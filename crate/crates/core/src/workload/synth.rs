//! Synthesis of per-kernel timing from task-level profiling statistics.
//! Profiling gives only kernel counts and task totals; individual kernel
//! times follow a right-skewed distribution where most kernels are short.

use crate::units::Nanos;
use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

/// Task-level profiling statistics, enough to synthesize a kernel list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskStats {
    /// Number of kernels N_k.
    pub kernels: usize,
    /// Total GPU execution time of the task in nanoseconds.
    pub gpu_total: Nanos,
    /// Number of GPU segments (and CPU segments) to split the task into.
    pub segments: usize,
    /// Kernel utilization range sampled uniformly.
    pub util_range: (f64, f64),
}

/// Draws `n` positive durations from a truncated lognormal (sigma 1.0, so
/// the median sits well below the mean) and rescales them to sum to
/// `total` exactly, adjusting the last element for rounding.
pub fn synthesize_kernel_times<R: Rng>(n: usize, total: Nanos, rng: &mut R) -> Vec<Nanos> {
    assert!(n >= 1, "need at least one kernel");
    assert!(total > 0, "total must be positive");
    if n == 1 {
        return vec![total];
    }
    let dist = LogNormal::new(0.0, 1.0).expect("valid lognormal");
    let mut raw: Vec<f64> = (0..n)
        .map(|_| {
            // truncate the far tail so one kernel cannot swallow the task
            loop {
                let v: f64 = dist.sample(rng);
                if v <= 20.0 {
                    return v;
                }
            }
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    let scale = total as f64 / sum;
    for v in &mut raw {
        *v *= scale;
    }
    let mut out: Vec<Nanos> = raw.iter().map(|v| (v.round() as Nanos).max(1)).collect();
    let acc: Nanos = out[..n - 1].iter().sum();
    out[n - 1] = total.saturating_sub(acc).max(1);
    // rounding may have pushed the prefix past the total; shave the largest
    // entries until the sum is exact
    let mut sum_now: Nanos = out.iter().sum();
    while sum_now > total {
        let (idx, _) = out
            .iter()
            .enumerate()
            .max_by_key(|(_, v)| **v)
            .expect("non-empty");
        let excess = sum_now - total;
        let take = excess.min(out[idx] - 1);
        out[idx] -= take;
        sum_now -= take;
        if take == 0 {
            break;
        }
    }
    out
}

/// Uniform per-kernel utilizations over the given range.
pub fn synthesize_utilizations<R: Rng>(n: usize, range: (f64, f64), rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if range.1 > range.0 {
                rng.gen_range(range.0..range.1)
            } else {
                range.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};
    use crate::units::ms;

    #[test]
    fn single_kernel_gets_the_whole_total() {
        let mut rng = derive(0, Stream::KernelSynth(0, 0));
        assert_eq!(synthesize_kernel_times(1, ms(10.0), &mut rng), vec![ms(10.0)]);
    }

    #[test]
    fn sum_is_exact_for_2d_detection_row() {
        let mut rng = derive(5, Stream::KernelSynth(2, 0));
        let times = synthesize_kernel_times(323, ms(19.8), &mut rng);
        assert_eq!(times.len(), 323);
        assert_eq!(times.iter().sum::<Nanos>(), ms(19.8));
        assert!(times.iter().all(|&t| t > 0));
    }

    #[test]
    fn right_skew_median_below_mean() {
        let mut rng = derive(11, Stream::KernelSynth(3, 0));
        let mut times = synthesize_kernel_times(1000, ms(100.0), &mut rng);
        times.sort_unstable();
        let median = times[499] as f64;
        let mean = times.iter().sum::<Nanos>() as f64 / 1000.0;
        assert!(
            median < 0.8 * mean,
            "median {median} should sit well below mean {mean}"
        );
    }

    #[test]
    fn same_seed_same_list() {
        let mut a = derive(7, Stream::KernelSynth(1, 1));
        let mut b = derive(7, Stream::KernelSynth(1, 1));
        assert_eq!(
            synthesize_kernel_times(41, ms(13.4), &mut a),
            synthesize_kernel_times(41, ms(13.4), &mut b)
        );
    }

    #[test]
    fn utilizations_within_range() {
        let mut rng = derive(1, Stream::KernelSynth(0, 1));
        let us = synthesize_utilizations(500, (0.15, 0.6), &mut rng);
        assert!(us.iter().all(|&u| (0.15..0.6).contains(&u)));
    }
}
