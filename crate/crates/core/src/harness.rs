//! Experiment harness: single runs, factor sweeps and ablation studies,
//! each writing per-run report directories plus an aggregate CSV. Sweep
//! points execute in parallel; each point's simulation stays
//! single-threaded and deterministic.

use crate::engine::{run_simulation, RunOptions, RunResult, SimParams};
use crate::error::{ConfigError, ReportError, SimError};
use crate::policy::{PolicyKind, PolicySpec, SyncMode};
use crate::units::ns_to_ms;
use crate::workload::{apply_factors, builtin_names, LookupTable, Overrides, RunConfig};
use rayon::prelude::*;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{failed} of {total} sweep points failed")]
    PartialFailure { failed: usize, total: usize },
}

/// Loads a config by selector: a built-in workload name or a file path.
pub fn load_config(selector: &str, overrides: &Overrides) -> Result<RunConfig, ConfigError> {
    if builtin_names().contains(&selector) {
        RunConfig::builtin(selector, overrides)
    } else {
        RunConfig::from_path(Path::new(selector), overrides)
    }
}

/// Scales the workload, builds the profiling table and runs one
/// simulation.
pub fn execute(
    config: &RunConfig,
    options: RunOptions,
    sweep_point: Option<String>,
) -> Result<RunResult, HarnessError> {
    let scaled = apply_factors(config.workload.clone());
    let lookup = match &config.lookup_csv {
        Some(path) => LookupTable::from_csv(path)?,
        None => LookupTable::from_workload(&scaled),
    };
    let manifest = config.manifest(&scaled, sweep_point);
    let params = SimParams {
        workload: scaled,
        device: config.device.clone(),
        scheduler: config.scheduler.clone(),
        noise_pct: config.noise_pct,
        cudafree_tasks: config.cudafree_tasks,
        shed_backlog: config.shed_backlog,
        lookup,
    };
    Ok(run_simulation(params, config.policy, manifest, options)?)
}

/// One row of an aggregate CSV.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub label: String,
    pub policy: String,
    pub seed: u64,
    pub f_a: f64,
    pub f_d: f64,
    pub f_tight: f64,
    pub delta_eval_us: f64,
    pub noise_pct: f64,
    pub cudafree_tasks: u32,
    pub miss_ratio: f64,
    pub mean_latency_ms: f64,
    pub throughput: f64,
    pub collisions: u64,
    pub status: &'static str,
}

impl RunSummary {
    pub const HEADER: &'static str = "point,policy,seed,f_a,f_d,f_tight,delta_eval_us,noise_pct,cudafree_tasks,miss_ratio,mean_latency_ms,throughput,collisions,status";

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.6},{:.3},{:.3},{},{}",
            self.label,
            self.policy,
            self.seed,
            self.f_a,
            self.f_d,
            self.f_tight,
            self.delta_eval_us,
            self.noise_pct,
            self.cudafree_tasks,
            self.miss_ratio,
            self.mean_latency_ms,
            self.throughput,
            self.collisions,
            self.status
        )
    }
}

fn summarize(config: &RunConfig, label: &str, result: &RunResult) -> RunSummary {
    let report = &result.report;
    let all: Vec<u64> = report
        .chains
        .values()
        .flat_map(|c| c.latencies.iter().copied())
        .collect();
    let mean = if all.is_empty() {
        0.0
    } else {
        ns_to_ms((all.iter().sum::<u64>() as f64 / all.len() as f64) as u64)
    };
    RunSummary {
        label: label.to_string(),
        policy: config.policy.label(),
        seed: config.workload.seed,
        f_a: config.workload.factors.f_a,
        f_d: config.workload.factors.f_d,
        f_tight: config.workload.factors.f_tight,
        delta_eval_us: config.scheduler.delta_eval as f64 / 1e3,
        noise_pct: config.noise_pct,
        cudafree_tasks: config.cudafree_tasks,
        miss_ratio: report.overall_miss_ratio(),
        mean_latency_ms: mean,
        throughput: report.throughput,
        collisions: report.collisions.total(),
        status: "ok",
    }
}

/// `run`: one simulation, one report directory.
pub fn cmd_run(
    selector: &str,
    overrides: &Overrides,
    out: &Path,
    trace: bool,
) -> Result<RunSummary, HarnessError> {
    let config = load_config(selector, overrides)?;
    std::fs::create_dir_all(out).map_err(|e| ReportError::Io {
        path: out.display().to_string(),
        source: e,
    })?;
    let options = RunOptions {
        trace_csv: trace.then(|| out.join("trace.csv")),
        urgency_csv: trace.then(|| out.join("urgency.csv")),
        capture_trace: false,
    };
    let result = execute(&config, options, None)?;
    result.report.emit(out)?;
    Ok(summarize(&config, "run", &result))
}

/// Sweep axes; an empty axis means "the base value only".
#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub selector: String,
    pub base: Overrides,
    pub f_a: Vec<f64>,
    pub f_d: Vec<f64>,
    pub f_tight: Vec<f64>,
    pub delta_eval_us: Vec<f64>,
    pub noise_pct: Vec<f64>,
    pub cudafree_tasks: Vec<u32>,
    pub policies: Vec<PolicySpec>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl SweepPlan {
    pub fn new(selector: &str, out: &Path) -> Self {
        SweepPlan {
            selector: selector.to_string(),
            base: Overrides::default(),
            f_a: vec![],
            f_d: vec![],
            f_tight: vec![],
            delta_eval_us: vec![],
            noise_pct: vec![],
            cudafree_tasks: vec![],
            policies: vec![],
            seeds: vec![],
            out: out.to_path_buf(),
        }
    }

    /// Materializes the cartesian product of all axes.
    pub fn points(&self) -> Vec<(String, Overrides)> {
        fn axis<T: Copy>(v: &[T]) -> Vec<Option<T>> {
            if v.is_empty() {
                vec![None]
            } else {
                v.iter().map(|&x| Some(x)).collect()
            }
        }
        let policies = if self.policies.is_empty() {
            vec![None]
        } else {
            self.policies.iter().map(|&p| Some(p)).collect()
        };
        let seeds = if self.seeds.is_empty() { vec![0u64] } else { self.seeds.clone() };
        let mut out = Vec::new();
        for &fa in &axis(&self.f_a) {
            for &fd in &axis(&self.f_d) {
                for &ft in &axis(&self.f_tight) {
                    for &de in &axis(&self.delta_eval_us) {
                        for &np in &axis(&self.noise_pct) {
                            for &cf in &axis(&self.cudafree_tasks) {
                                for &pol in &policies {
                                    for &seed in &seeds {
                                        let mut ov = self.base.clone();
                                        if fa.is_some() {
                                            ov.f_a = fa;
                                        }
                                        if fd.is_some() {
                                            ov.f_d = fd;
                                        }
                                        if ft.is_some() {
                                            ov.f_tight = ft;
                                        }
                                        if de.is_some() {
                                            ov.delta_eval_us = de;
                                        }
                                        if np.is_some() {
                                            ov.noise_pct = np;
                                        }
                                        if cf.is_some() {
                                            ov.cudafree_tasks = cf;
                                        }
                                        if let Some(p) = pol {
                                            ov.policy = Some(p);
                                        }
                                        ov.seed = Some(seed);
                                        let label = point_label(&ov, pol, seed);
                                        out.push((label, ov));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn point_label(ov: &Overrides, pol: Option<PolicySpec>, seed: u64) -> String {
    let mut parts = Vec::new();
    if let Some(v) = ov.f_a {
        parts.push(format!("fa{v}"));
    }
    if let Some(v) = ov.f_d {
        parts.push(format!("fd{v}"));
    }
    if let Some(v) = ov.f_tight {
        parts.push(format!("ft{v}"));
    }
    if let Some(v) = ov.delta_eval_us {
        parts.push(format!("de{v}"));
    }
    if let Some(v) = ov.noise_pct {
        parts.push(format!("np{v}"));
    }
    if let Some(v) = ov.cudafree_tasks {
        parts.push(format!("cf{v}"));
    }
    if let Some(p) = pol {
        parts.push(p.label());
    }
    parts.push(format!("s{seed}"));
    parts.join("_")
}

/// `sweep`: the cartesian product of axes x policies x seeds, one full run
/// each, plus an aggregate `sweep.csv`. Failed points are recorded and
/// skipped; any failure surfaces as an error after the aggregate is
/// written.
pub fn cmd_sweep(plan: &SweepPlan) -> Result<Vec<RunSummary>, HarnessError> {
    let points = plan.points();
    let total = points.len();
    let results: Vec<RunSummary> = points
        .into_par_iter()
        .map(|(label, ov)| run_point(&plan.selector, &label, &ov, &plan.out))
        .collect();
    write_aggregate(&plan.out.join("sweep.csv"), &results)?;
    let failed = results.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        return Err(HarnessError::PartialFailure { failed, total });
    }
    Ok(results)
}

fn run_point(selector: &str, label: &str, ov: &Overrides, out_root: &Path) -> RunSummary {
    let failure = |policy: String, seed: u64| RunSummary {
        label: label.to_string(),
        policy,
        seed,
        f_a: ov.f_a.unwrap_or(1.0),
        f_d: ov.f_d.unwrap_or(1.0),
        f_tight: ov.f_tight.unwrap_or(0.0),
        delta_eval_us: ov.delta_eval_us.unwrap_or(500.0),
        noise_pct: ov.noise_pct.unwrap_or(0.0),
        cudafree_tasks: ov.cudafree_tasks.unwrap_or(0),
        miss_ratio: f64::NAN,
        mean_latency_ms: f64::NAN,
        throughput: f64::NAN,
        collisions: 0,
        status: "failed",
    };
    let config = match load_config(selector, ov) {
        Ok(c) => c,
        Err(_) => return failure("unknown".into(), ov.seed.unwrap_or(0)),
    };
    let dir = out_root.join(label);
    let outcome = execute(&config, RunOptions::default(), Some(label.to_string()))
        .and_then(|r| {
            r.report.emit(&dir)?;
            Ok(r)
        });
    match outcome {
        Ok(result) => summarize(&config, label, &result),
        Err(_) => failure(config.policy.label(), config.workload.seed),
    }
}

fn write_aggregate(path: &Path, rows: &[RunSummary]) -> Result<(), ReportError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| ReportError::Io {
            path: parent.display().to_string(),
            source: e,
        })?;
    }
    let mut sorted: Vec<&RunSummary> = rows.iter().collect();
    sorted.sort_by(|a, b| a.label.cmp(&b.label));
    let mut body = String::from(RunSummary::HEADER);
    body.push('\n');
    for r in sorted {
        body.push_str(&r.csv_row());
        body.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| ReportError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    f.write_all(body.as_bytes()).map_err(|e| ReportError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Which ablation study to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationStudy {
    /// UrgenGo module variants: full, no-delay, no-binding, neither.
    Modules,
    /// Synchronization mechanisms: per-kernel, batched, batched-overlap,
    /// pure async.
    SyncModes,
    /// Number of binding streams per task pool.
    Streams,
    /// Device-barrier (cudaFree) stress for UrgenGo and the static
    /// baseline.
    CudaFree,
}

impl std::str::FromStr for AblationStudy {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "modules" => AblationStudy::Modules,
            "sync" => AblationStudy::SyncModes,
            "streams" => AblationStudy::Streams,
            "cudafree" => AblationStudy::CudaFree,
            other => {
                return Err(ConfigError::invalid(format!(
                    "unknown study `{other}` (expected modules|sync|streams|cudafree)"
                )))
            }
        })
    }
}

/// The UrgenGo mechanism variants of the modules study.
pub fn module_variants() -> Vec<(&'static str, PolicySpec)> {
    let base = PolicySpec::new(PolicyKind::Urgengo);
    let mut no_delay = base;
    no_delay.no_delay = true;
    let mut no_binding = base;
    no_binding.no_binding = true;
    let mut neither = base;
    neither.no_delay = true;
    neither.no_binding = true;
    vec![
        ("full", base),
        ("no-delay", no_delay),
        ("no-binding", no_binding),
        ("neither", neither),
    ]
}

/// The synchronization-mode variants of the sync study.
pub fn sync_variants() -> Vec<(&'static str, PolicySpec)> {
    let with = |mode: SyncMode| {
        let mut s = PolicySpec::new(PolicyKind::Urgengo);
        s.sync_override = Some(mode);
        s
    };
    vec![
        ("per-kernel", with(SyncMode::PerKernel)),
        ("batched", with(SyncMode::Batched { overlap: false })),
        ("batched-overlap", with(SyncMode::Batched { overlap: true })),
        ("async", with(SyncMode::EndOfSegment)),
    ]
}

/// `ablate`: runs the selected study and writes `ablate.csv`.
pub fn cmd_ablate(
    study: AblationStudy,
    selector: &str,
    base: &Overrides,
    seeds: &[u64],
    streams: &[u32],
    cudafree: &[u32],
    out: &Path,
) -> Result<Vec<RunSummary>, HarnessError> {
    let seeds: Vec<u64> = if seeds.is_empty() { vec![0] } else { seeds.to_vec() };
    let mut jobs: Vec<(String, Overrides)> = Vec::new();
    match study {
        AblationStudy::Modules => {
            for (name, spec) in module_variants() {
                for &seed in &seeds {
                    let mut ov = base.clone();
                    ov.policy = Some(spec);
                    ov.seed = Some(seed);
                    jobs.push((format!("modules_{name}_s{seed}"), ov));
                }
            }
        }
        AblationStudy::SyncModes => {
            for (name, spec) in sync_variants() {
                for &seed in &seeds {
                    let mut ov = base.clone();
                    ov.policy = Some(spec);
                    ov.seed = Some(seed);
                    jobs.push((format!("sync_{name}_s{seed}"), ov));
                }
            }
        }
        AblationStudy::Streams => {
            let streams: Vec<u32> = if streams.is_empty() {
                (1..=6).collect()
            } else {
                streams.to_vec()
            };
            for &s in &streams {
                for &seed in &seeds {
                    let mut ov = base.clone();
                    ov.policy = Some(PolicySpec::new(PolicyKind::Urgengo));
                    ov.streams = Some(s);
                    ov.seed = Some(seed);
                    jobs.push((format!("streams_{s}_s{seed}"), ov));
                }
            }
        }
        AblationStudy::CudaFree => {
            let counts: Vec<u32> = if cudafree.is_empty() {
                (0..=4).collect()
            } else {
                cudafree.to_vec()
            };
            for kind in [PolicyKind::Urgengo, PolicyKind::Static] {
                for &k in &counts {
                    for &seed in &seeds {
                        let mut ov = base.clone();
                        ov.policy = Some(PolicySpec::new(kind));
                        ov.cudafree_tasks = Some(k);
                        ov.seed = Some(seed);
                        jobs.push((format!("cudafree_{}_{k}_s{seed}", kind.as_str()), ov));
                    }
                }
            }
        }
    }
    let total = jobs.len();
    let results: Vec<RunSummary> = jobs
        .into_par_iter()
        .map(|(label, ov)| run_point(selector, &label, &ov, out))
        .collect();
    write_aggregate(&out.join("ablate.csv"), &results)?;
    let failed = results.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        return Err(HarnessError::PartialFailure { failed, total });
    }
    Ok(results)
}

/// Convenience for tests and examples: run a built-in workload with the
/// given overrides and return the in-memory report.
pub fn quick_run(
    selector: &str,
    overrides: &Overrides,
) -> Result<crate::metrics::MetricsReport, HarnessError> {
    let config = load_config(selector, overrides)?;
    Ok(execute(&config, RunOptions::default(), None)?.report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_points_cardinality() {
        let mut plan = SweepPlan::new("c0-c9", Path::new("/tmp/x"));
        plan.f_a = vec![0.5, 0.7, 0.9, 1.1, 1.3];
        plan.policies = vec![
            PolicySpec::new(PolicyKind::Urgengo),
            PolicySpec::new(PolicyKind::Static),
            PolicySpec::new(PolicyKind::Vanilla),
            PolicySpec::new(PolicyKind::RrUtil),
        ];
        plan.seeds = vec![42];
        assert_eq!(plan.points().len(), 20);
    }

    #[test]
    fn empty_axes_collapse_to_single_point() {
        let plan = SweepPlan::new("c0-c9", Path::new("/tmp/x"));
        assert_eq!(plan.points().len(), 1);
    }

    #[test]
    fn point_labels_are_unique() {
        let mut plan = SweepPlan::new("c0-c9", Path::new("/tmp/x"));
        plan.f_a = vec![0.9, 1.0];
        plan.seeds = vec![1, 2];
        let points = plan.points();
        let mut labels: Vec<&String> = points.iter().map(|(l, _)| l).collect();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), points.len());
    }
}
