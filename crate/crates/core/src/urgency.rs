//! Urgency evaluation: execution-time predictors, the urgency level of a
//! chain instance (reciprocal laxity over estimated remaining CPU and GPU
//! work), and the truly-urgent threshold calibration.

use crate::units::{Nanos, NS_PER_MS};
use crate::workload::{LookupTable, Workload};
use serde::Serialize;

/// Saturation bound for |UL|, in 1/ms. Keeps the ranking well-defined near
/// the laxity singularity.
pub const UL_MAX: f64 = 1e6;

/// An urgency level in 1/ms, positive iff the deadline is still reachable,
/// together with its evaluation timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UrgencyValue {
    pub value: f64,
    pub evaluated_at: Nanos,
}

/// Sliding window of recent observations; the prediction is the window
/// mean, falling back to the profiled nominal time while empty.
#[derive(Debug, Clone)]
pub struct Window {
    buf: Vec<f64>,
    next: usize,
    filled: usize,
    cap: usize,
}

impl Window {
    pub fn new(cap: usize) -> Self {
        Window {
            buf: vec![0.0; cap.max(1)],
            next: 0,
            filled: 0,
            cap: cap.max(1),
        }
    }

    pub fn push(&mut self, v: f64) {
        self.buf[self.next] = v;
        self.next = (self.next + 1) % self.cap;
        self.filled = (self.filled + 1).min(self.cap);
    }

    pub fn mean(&self) -> Option<f64> {
        if self.filled == 0 {
            None
        } else {
            Some(self.buf[..self.filled].iter().sum::<f64>() / self.filled as f64)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }
}

/// Per-chain predictor state: one window per kernel (fed from lookup-table
/// queries at launch time) and one per CPU segment (fed from measured
/// segment durations), plus suffix-sum caches over the predictions.
#[derive(Debug)]
struct ChainPredictor {
    kernel_nominal: Vec<f64>,
    cpu_nominal: Vec<f64>,
    kernel_windows: Vec<Window>,
    cpu_windows: Vec<Window>,
    kernel_pred: Vec<f64>,
    cpu_pred: Vec<f64>,
    /// gpu_suffix[i] = sum of kernel_pred[i..]; one extra trailing zero.
    gpu_suffix: Vec<f64>,
    /// cpu_suffix[j] = sum of cpu_pred[j..]; one extra trailing zero.
    cpu_suffix: Vec<f64>,
    gpu_dirty: bool,
    cpu_dirty: bool,
}

impl ChainPredictor {
    fn new(kernel_nominal: Vec<f64>, cpu_nominal: Vec<f64>, window: usize) -> Self {
        let kn = kernel_nominal.len();
        let cn = cpu_nominal.len();
        let mut p = ChainPredictor {
            kernel_pred: kernel_nominal.clone(),
            cpu_pred: cpu_nominal.clone(),
            kernel_nominal,
            cpu_nominal,
            kernel_windows: (0..kn).map(|_| Window::new(window)).collect(),
            cpu_windows: (0..cn).map(|_| Window::new(window)).collect(),
            gpu_suffix: vec![0.0; kn + 1],
            cpu_suffix: vec![0.0; cn + 1],
            gpu_dirty: true,
            cpu_dirty: true,
        };
        p.refresh();
        p
    }

    fn refresh(&mut self) {
        if self.gpu_dirty {
            for i in (0..self.kernel_pred.len()).rev() {
                self.gpu_suffix[i] = self.gpu_suffix[i + 1] + self.kernel_pred[i];
            }
            self.gpu_dirty = false;
        }
        if self.cpu_dirty {
            for j in (0..self.cpu_pred.len()).rev() {
                self.cpu_suffix[j] = self.cpu_suffix[j + 1] + self.cpu_pred[j];
            }
            self.cpu_dirty = false;
        }
    }
}

/// The indices an evaluation needs from a chain instance: the kernel
/// launch counter and the current CPU segment index, both chain-wide.
#[derive(Debug, Clone, Copy)]
pub struct InstanceProgress {
    pub t_arr: Nanos,
    pub kernel_index: usize,
    pub cpu_segment_index: usize,
    /// Multiplicative error applied to the estimated remaining work, used
    /// by urgency-noise experiments. 1.0 means exact estimates.
    pub estimate_noise: f64,
}

/// Urgency evaluation service for one run: owns per-chain predictors and
/// the threshold calibration state.
#[derive(Debug)]
pub struct UrgencyService {
    chains: Vec<ChainPredictor>,
    deadlines: Vec<Nanos>,
}

impl UrgencyService {
    /// Builds predictors from the workload's nominal times; kernel
    /// predictions are seeded from the profiling lookup table.
    pub fn new(w: &Workload, table: &LookupTable, window: usize) -> Self {
        let mut chains = Vec::with_capacity(w.chains.len());
        let mut deadlines = Vec::with_capacity(w.chains.len());
        for chain in &w.chains {
            let mut kernel_nominal = Vec::with_capacity(chain.total_kernels());
            let mut cpu_nominal = Vec::with_capacity(chain.total_cpu_segments());
            for task in &chain.tasks {
                let task_mean = task.gpu_total() as f64 / task.kernels.len() as f64;
                for k in &task.kernels {
                    // unprofiled kernels fall back to the task-level mean
                    let t = match table.lookup(k.kernel_id, k.grid_dim, k.block_dim) {
                        Ok(row) => row.exec_time as f64,
                        Err(_) => task_mean,
                    };
                    kernel_nominal.push(t);
                }
                for &c in &task.cpu_segment_times {
                    cpu_nominal.push(c as f64);
                }
            }
            chains.push(ChainPredictor::new(kernel_nominal, cpu_nominal, window));
            deadlines.push(chain.deadline);
        }
        UrgencyService { chains, deadlines }
    }

    /// UL_C(t) = 1 / (t_arr + D - sum of remaining kernel estimates - sum
    /// of remaining CPU segment estimates - t), in 1/ms. An exactly zero
    /// denominator saturates to +UL_MAX.
    pub fn evaluate(&self, chain: usize, prog: InstanceProgress, now: Nanos) -> UrgencyValue {
        let p = &self.chains[chain];
        debug_assert!(!p.gpu_dirty && !p.cpu_dirty);
        let remaining = (p.gpu_suffix[prog.kernel_index.min(p.kernel_pred.len())]
            + p.cpu_suffix[prog.cpu_segment_index.min(p.cpu_pred.len())])
            * prog.estimate_noise;
        let slack = (prog.t_arr + self.deadlines[chain]) as f64 - now as f64;
        let denom_ms = (slack - remaining) / NS_PER_MS as f64;
        let value = if denom_ms == 0.0 {
            UL_MAX
        } else {
            (1.0 / denom_ms).clamp(-UL_MAX, UL_MAX)
        };
        UrgencyValue {
            value,
            evaluated_at: now,
        }
    }

    /// Records a lookup-table query result for a kernel about to launch.
    pub fn observe_kernel(&mut self, chain: usize, kernel_index: usize, looked_up: Nanos) {
        let p = &mut self.chains[chain];
        let w = &mut p.kernel_windows[kernel_index];
        w.push(looked_up as f64);
        let pred = w.mean().unwrap_or(p.kernel_nominal[kernel_index]);
        if pred != p.kernel_pred[kernel_index] {
            p.kernel_pred[kernel_index] = pred;
            p.gpu_dirty = true;
        }
        p.refresh();
    }

    /// Records a measured CPU segment duration.
    pub fn observe_cpu_segment(&mut self, chain: usize, segment_index: usize, measured: Nanos) {
        let p = &mut self.chains[chain];
        let w = &mut p.cpu_windows[segment_index];
        w.push(measured as f64);
        let pred = w.mean().unwrap_or(p.cpu_nominal[segment_index]);
        if pred != p.cpu_pred[segment_index] {
            p.cpu_pred[segment_index] = pred;
            p.cpu_dirty = true;
        }
        p.refresh();
    }

    /// Predicted remaining work (CPU + GPU) in nanoseconds; the quantity
    /// shortest-job-family policies rank by.
    pub fn remaining_estimate(&self, chain: usize, prog: InstanceProgress) -> f64 {
        let p = &self.chains[chain];
        (p.gpu_suffix[prog.kernel_index.min(p.kernel_pred.len())]
            + p.cpu_suffix[prog.cpu_segment_index.min(p.cpu_pred.len())])
            * prog.estimate_noise
    }

    /// Brute-force re-summation of the remaining-work estimate; the oracle
    /// the suffix caches are checked against.
    pub fn remaining_brute_force(&self, chain: usize, prog: InstanceProgress) -> f64 {
        let p = &self.chains[chain];
        let g: f64 = p.kernel_pred[prog.kernel_index.min(p.kernel_pred.len())..]
            .iter()
            .sum();
        let c: f64 = p.cpu_pred[prog.cpu_segment_index.min(p.cpu_pred.len())..]
            .iter()
            .sum();
        (g + c) * prog.estimate_noise
    }

    pub fn predicted_kernel_time(&self, chain: usize, kernel_index: usize) -> f64 {
        self.chains[chain].kernel_pred[kernel_index]
    }
}

/// Nearest-rank percentile: the smallest sample whose cumulative share
/// strictly exceeds p%, i.e. the (floor(p*n/100) + 1)-th smallest, capped
/// at the maximum. For the 95th percentile of 100 samples this is the
/// 96th smallest, so a tie block occupying exactly the first 95% does not
/// become the threshold.
pub fn nearest_rank_percentile(sorted: &[f64], percentile: f64) -> f64 {
    assert!(!sorted.is_empty());
    let n = sorted.len();
    let cut = percentile / 100.0 * n as f64;
    let rank = ((cut + 1e-9).floor() as usize + 1).min(n);
    sorted[rank - 1]
}

/// Truly-urgent threshold state. Built from periodic samples of the
/// highest urgency among active kernels; stays disabled (no threshold)
/// until at least `MIN_SAMPLES` positive samples were collected during the
/// initial profiling window.
#[derive(Debug)]
pub struct ThresholdCalibrator {
    samples: Vec<f64>,
    percentile: f64,
    th: Option<f64>,
    /// Sampling period for the urgency distribution profile.
    pub sample_period: Nanos,
    /// End of the initial profiling window.
    pub initial_window: Nanos,
    /// Recalibration cadence after the initial window.
    pub recalibrate_every: Nanos,
    last_calibration: Option<Nanos>,
}

pub const MIN_THRESHOLD_SAMPLES: usize = 100;

impl ThresholdCalibrator {
    pub fn new(
        percentile: f64,
        sample_period: Nanos,
        initial_window: Nanos,
        recalibrate_every: Nanos,
    ) -> Self {
        ThresholdCalibrator {
            samples: Vec::new(),
            percentile,
            th: None,
            sample_period,
            initial_window,
            recalibrate_every,
            last_calibration: None,
        }
    }

    /// Records one periodic sample (the max active urgency); negative
    /// samples are excluded from calibration.
    pub fn record(&mut self, max_active_urgency: f64) {
        if max_active_urgency > 0.0 {
            self.samples.push(max_active_urgency);
        }
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    /// Recalibrates if due: not before the initial window, then every
    /// `recalibrate_every`, and only with enough samples.
    pub fn maybe_recalibrate(&mut self, now: Nanos) -> bool {
        if now < self.initial_window || self.samples.len() < MIN_THRESHOLD_SAMPLES {
            return false;
        }
        if let Some(last) = self.last_calibration {
            if now < last + self.recalibrate_every {
                return false;
            }
        }
        let mut sorted = self.samples.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN urgencies"));
        self.th = Some(nearest_rank_percentile(&sorted, self.percentile));
        self.last_calibration = Some(now);
        true
    }

    /// The calibrated threshold; `None` while uncalibrated, which disables
    /// reservation and delayed launching.
    pub fn threshold(&self) -> Option<f64> {
        self.th
    }

    /// Force a threshold; used by tests and ablations.
    pub fn set_threshold(&mut self, th: f64) {
        self.th = Some(th);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::{ms, secs};
    use crate::workload::{builtin_workload, simple_chain, Factors};
    use crate::workload::{LookupTable, Workload};

    fn service_for(chains: Vec<crate::workload::ChainSpec>) -> UrgencyService {
        let w = Workload {
            chains,
            factors: Factors::default(),
            jitter: 0,
            duration: secs(1.0),
            seed: 0,
            tight_chains: vec![],
        };
        let table = LookupTable::from_workload(&w);
        UrgencyService::new(&w, &table, 8)
    }

    fn fresh(t_arr: Nanos) -> InstanceProgress {
        InstanceProgress {
            t_arr,
            kernel_index: 0,
            cpu_segment_index: 0,
            estimate_noise: 1.0,
        }
    }

    #[test]
    fn urgency_matches_navigation_chain_budgets_at_arrival() {
        let w = builtin_workload("c0-c9", 0).unwrap();
        let table = LookupTable::from_workload(&w);
        let svc = UrgencyService::new(&w, &table, 8);
        let expected = [
            0.0134, 0.0132, 0.0138, 0.0143, 0.0127, 0.0143, 0.0127, 0.0138, 0.0126, 0.0159,
        ];
        for (i, &e) in expected.iter().enumerate() {
            let ul = svc.evaluate(i, fresh(0), 0);
            assert!(
                (ul.value - e).abs() <= 0.0005,
                "chain {i}: got {} want {e}",
                ul.value
            );
        }
    }

    #[test]
    fn direct_substitution_case() {
        // remaining work 50 ms against 100 ms of slack: UL = 1/50
        let c = simple_chain(0, 200.0, 100.0, &[30.0], &[0.3], &[20.0]);
        let svc = service_for(vec![c]);
        let ul = svc.evaluate(0, fresh(0), 0);
        assert!((ul.value - 0.02).abs() < 1e-12);
    }

    #[test]
    fn urgency_negative_once_unreachable() {
        let c = simple_chain(0, 200.0, 100.0, &[30.0], &[0.3], &[20.0]);
        let svc = service_for(vec![c]);
        // at t = 60 ms slack 40 < work 50
        let ul = svc.evaluate(0, fresh(0), ms(60.0));
        assert!(ul.value < 0.0);
    }

    #[test]
    fn zero_denominator_saturates() {
        let c = simple_chain(0, 200.0, 100.0, &[30.0], &[0.3], &[20.0]);
        let svc = service_for(vec![c]);
        let ul = svc.evaluate(0, fresh(0), ms(50.0));
        assert_eq!(ul.value, UL_MAX);
    }

    #[test]
    fn gpu_only_case_reduces_to_simple_form() {
        // with no CPU work remaining the refined form equals the GPU-only
        // form; model a chain whose CPU segments are negligible
        let c = simple_chain(0, 200.0, 100.0, &[30.0, 10.0], &[0.3, 0.2], &[1.0]);
        let svc = service_for(vec![c]);
        let past_cpu = InstanceProgress {
            t_arr: 0,
            kernel_index: 0,
            cpu_segment_index: 1, // CPU suffix empty
            estimate_noise: 1.0,
        };
        let ul = svc.evaluate(0, past_cpu, 0);
        assert!((ul.value - 1.0 / 60.0).abs() < 1e-12);
    }

    #[test]
    fn urgency_strictly_decreasing_in_time_while_positive() {
        let c = simple_chain(0, 200.0, 100.0, &[30.0], &[0.3], &[20.0]);
        let svc = service_for(vec![c]);
        let mut last = f64::NEG_INFINITY;
        for t in [0u64, ms(10.0), ms(20.0), ms(30.0), ms(40.0)] {
            let ul = svc.evaluate(0, fresh(0), t).value;
            assert!(ul > last);
            last = ul;
        }
        // 1/denominator grows as the denominator shrinks: urgency rises
        // toward the singularity, i.e. the chain becomes more urgent.
    }

    #[test]
    fn advancing_kernel_index_never_increases_urgency() {
        let c = simple_chain(0, 200.0, 100.0, &[10.0, 10.0, 10.0], &[0.3; 3], &[20.0]);
        let svc = service_for(vec![c]);
        let mut last = f64::INFINITY;
        for k in 0..=3 {
            let prog = InstanceProgress {
                t_arr: 0,
                kernel_index: k,
                cpu_segment_index: 0,
                estimate_noise: 1.0,
            };
            let ul = svc.evaluate(0, prog, ms(10.0)).value;
            assert!(ul <= last, "k={k}");
            last = ul;
        }
    }

    #[test]
    fn window_mean_and_fallback() {
        let mut w = Window::new(3);
        assert!(w.mean().is_none());
        w.push(8.0);
        w.push(12.0);
        assert_eq!(w.mean(), Some(10.0));
        w.push(10.0);
        assert_eq!(w.mean(), Some(10.0));
        // window shifts: oldest (8) drops
        w.push(14.0);
        assert_eq!(w.mean(), Some(12.0));
    }

    #[test]
    fn suffix_cache_matches_brute_force_on_random_traces() {
        use rand::Rng;
        let c = simple_chain(0, 200.0, 100.0, &[5.0; 12], &[0.3; 12], &[4.0, 4.0, 4.0]);
        let mut svc = service_for(vec![c]);
        let mut rng = crate::rng::derive(5, crate::rng::Stream::KernelSynth(9, 9));
        for step in 0..5000 {
            let k = rng.gen_range(0..12);
            if rng.gen_bool(0.7) {
                svc.observe_kernel(0, k, ms(rng.gen_range(1.0..9.0)));
            } else {
                svc.observe_cpu_segment(0, rng.gen_range(0..3), ms(rng.gen_range(1.0..7.0)));
            }
            let prog = InstanceProgress {
                t_arr: 0,
                kernel_index: rng.gen_range(0..=12),
                cpu_segment_index: rng.gen_range(0..=3),
                estimate_noise: 1.0,
            };
            let fast = svc.remaining_estimate(0, prog);
            let slow = svc.remaining_brute_force(0, prog);
            assert!(
                (fast - slow).abs() < 1e-6_f64.max(slow.abs() * 1e-12),
                "step {step}"
            );
        }
    }

    #[test]
    fn nearest_rank_examples() {
        // 95 entries of 0.01 and 5 of 0.05: the 95th percentile of 100
        // samples is the 95th smallest, which is 0.05
        let mut samples = vec![0.01; 95];
        samples.extend(vec![0.05; 5]);
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(nearest_rank_percentile(&samples, 95.0), 0.05);
        let constant = vec![0.02; 40];
        assert_eq!(nearest_rank_percentile(&constant, 95.0), 0.02);
    }

    #[test]
    fn calibrator_excludes_negatives_and_needs_samples() {
        let mut cal = ThresholdCalibrator::new(95.0, ms(10.0), secs(30.0), secs(10.0));
        for _ in 0..95 {
            cal.record(0.01);
        }
        for _ in 0..40 {
            cal.record(-0.5);
        }
        assert_eq!(cal.sample_count(), 95);
        assert!(!cal.maybe_recalibrate(secs(31.0)));
        assert_eq!(cal.threshold(), None);
        for _ in 0..5 {
            cal.record(0.05);
        }
        assert!(cal.maybe_recalibrate(secs(31.0)));
        assert_eq!(cal.threshold(), Some(0.05));
        // not due again until the cadence elapses
        assert!(!cal.maybe_recalibrate(secs(35.0)));
        cal.record(0.09);
        assert!(cal.maybe_recalibrate(secs(41.0)));
    }

    #[test]
    fn calibrator_respects_initial_window() {
        let mut cal = ThresholdCalibrator::new(95.0, ms(10.0), secs(30.0), secs(10.0));
        for _ in 0..500 {
            cal.record(0.02);
        }
        assert!(!cal.maybe_recalibrate(secs(29.0)));
        assert!(cal.maybe_recalibrate(secs(30.0)));
        assert_eq!(cal.threshold(), Some(0.02));
    }
}
