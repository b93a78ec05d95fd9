//! Run configuration: a TOML grammar with sections for the device profile,
//! scheduler parameters, experiment factors and the chain/task/kernel
//! workload (explicit kernels or task-level stats for synthesis). Unknown
//! keys are rejected. CLI flags override file values.

use crate::error::ConfigError;
use crate::gpu::DeviceParams;
use crate::metrics::RunManifest;
use crate::policy::{PolicyKind, PolicySpec, SchedulerConfig};
use crate::rng::{self, Stream};
use crate::units::{ms, secs, us, NS_PER_S};
use crate::workload::{
    builtin_workload, synthesize_kernel_times, synthesize_utilizations, ChainSpec, Factors,
    KernelSpec, TaskSpec, Workload,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    /// Built-in workload name; mutually exclusive with `chains`.
    pub workload: Option<String>,
    pub seed: Option<u64>,
    pub duration_s: Option<f64>,
    pub policy: Option<String>,
    pub noise_pct: Option<f64>,
    pub cudafree_tasks: Option<u32>,
    pub shed_backlog: Option<bool>,
    pub factors: Option<FactorsSection>,
    pub device: Option<DeviceSection>,
    pub scheduler: Option<SchedulerSection>,
    pub lookup: Option<LookupSection>,
    pub chains: Option<Vec<ChainSection>>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FactorsSection {
    pub f_a: Option<f64>,
    pub f_d: Option<f64>,
    pub f_tight: Option<f64>,
    pub jitter_ms: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DeviceSection {
    pub profile: Option<String>,
    pub num_priorities: Option<u32>,
    pub launch_overhead_us: Option<f64>,
    pub sync_cost_us: Option<[f64; 2]>,
    pub capacity: Option<f64>,
    pub contention_alpha: Option<f64>,
    pub barrier_cost_us: Option<f64>,
    pub kernel_time_scale: Option<f64>,
    pub cpu_cores: Option<usize>,
    pub context_switch_us: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSection {
    pub delta_eval_us: Option<f64>,
    pub sleep_us: Option<f64>,
    pub util_exempt: Option<f64>,
    pub th_percentile: Option<f64>,
    pub predictor_window: Option<usize>,
    pub binding_streams: Option<u32>,
    pub os_priority_levels: Option<u32>,
    pub akb_op_cost_us: Option<f64>,
    pub th_sample_period_ms: Option<f64>,
    pub th_initial_window_s: Option<f64>,
    pub th_recalibrate_s: Option<f64>,
    pub th_initial: Option<f64>,
    pub rr_window_ms: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LookupSection {
    /// CSV with header kernel_id,grid,block,exec_us,util_pct,segment_id.
    pub csv: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSection {
    pub chain_id: u32,
    pub modality: Option<String>,
    pub period_ms: f64,
    pub deadline_ms: f64,
    pub static_criticality: Option<i32>,
    pub cpu_sd_ms: Option<f64>,
    pub gpu_sd_ms: Option<f64>,
    pub tasks: Vec<TaskSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub tag: Option<String>,
    pub cpu_segment_ms: Vec<f64>,
    #[serde(default)]
    pub barrier: bool,
    pub stats: Option<StatsSection>,
    pub kernels: Option<Vec<KernelSection>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSection {
    pub kernels: usize,
    pub gpu_total_ms: f64,
    pub segments: Option<usize>,
    pub util_range: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub kernel_id: Option<u64>,
    pub grid: u32,
    pub block: u32,
    #[serde(default)]
    pub shared_mem: u32,
    pub exec_us: f64,
    pub util: f64,
    pub segment_id: u32,
    #[serde(default)]
    pub memcpy: bool,
}

/// Where a run's workload definition came from.
#[derive(Debug, Clone, Serialize)]
pub enum WorkloadSource {
    Builtin(String),
    File(String),
}

impl WorkloadSource {
    pub fn label(&self) -> String {
        match self {
            WorkloadSource::Builtin(n) => format!("builtin:{n}"),
            WorkloadSource::File(p) => p.clone(),
        }
    }
}

/// A fully resolved run: validated workload (not yet factor-scaled),
/// device and scheduler parameters, and the policy selection.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub workload: Workload,
    pub device: DeviceParams,
    pub device_profile: String,
    pub scheduler: SchedulerConfig,
    pub policy: PolicySpec,
    pub noise_pct: f64,
    pub cudafree_tasks: u32,
    pub shed_backlog: bool,
    pub lookup_csv: Option<PathBuf>,
    pub source: WorkloadSource,
}

/// CLI-level overrides applied on top of a config file or builtin.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub policy: Option<PolicySpec>,
    pub seed: Option<u64>,
    pub duration_s: Option<f64>,
    pub f_a: Option<f64>,
    pub f_d: Option<f64>,
    pub f_tight: Option<f64>,
    pub jitter_ms: Option<f64>,
    pub delta_eval_us: Option<f64>,
    pub sleep_us: Option<f64>,
    pub util_exempt: Option<f64>,
    pub th_percentile: Option<f64>,
    pub streams: Option<u32>,
    pub noise_pct: Option<f64>,
    pub cudafree_tasks: Option<u32>,
    pub device_profile: Option<String>,
    pub contention_alpha: Option<f64>,
    pub shed_backlog: Option<bool>,
}

impl RunConfig {
    /// A built-in workload under default parameters.
    pub fn builtin(name: &str, overrides: &Overrides) -> Result<Self, ConfigError> {
        let file = ConfigFile {
            workload: Some(name.to_string()),
            ..Default::default()
        };
        Self::resolve(file, WorkloadSource::Builtin(name.to_string()), overrides)
    }

    pub fn from_path(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_toml(&text, WorkloadSource::File(path.display().to_string()), overrides)
    }

    pub fn from_toml(
        text: &str,
        source: WorkloadSource,
        overrides: &Overrides,
    ) -> Result<Self, ConfigError> {
        let file: ConfigFile =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::resolve(file, source, overrides)
    }

    fn resolve(
        file: ConfigFile,
        source: WorkloadSource,
        ov: &Overrides,
    ) -> Result<Self, ConfigError> {
        let seed = ov.seed.or(file.seed).unwrap_or(0);

        // device
        let profile_name = ov
            .device_profile
            .clone()
            .or_else(|| file.device.as_ref().and_then(|d| d.profile.clone()))
            .unwrap_or_else(|| "rtx3070ti".to_string());
        let mut device = DeviceParams::profile(&profile_name)?;
        if let Some(d) = &file.device {
            if let Some(v) = d.num_priorities {
                device.num_priorities = v;
            }
            if let Some(v) = d.launch_overhead_us {
                device.launch_overhead = us(v);
            }
            if let Some([lo, hi]) = d.sync_cost_us {
                device.sync_cost_range = (us(lo), us(hi));
            }
            if let Some(v) = d.capacity {
                device.capacity = v;
            }
            if let Some(v) = d.contention_alpha {
                device.contention_alpha = v;
            }
            if let Some(v) = d.barrier_cost_us {
                device.barrier_cost = us(v);
            }
            if let Some(v) = d.kernel_time_scale {
                device.kernel_time_scale = v;
            }
            if let Some(v) = d.cpu_cores {
                device.cpu_cores = v;
            }
            if let Some(v) = d.context_switch_us {
                device.context_switch_cost = us(v);
            }
        }
        if let Some(v) = ov.contention_alpha {
            device.contention_alpha = v;
        }
        device.validate()?;

        // scheduler
        let mut scheduler = SchedulerConfig::default();
        if let Some(s) = &file.scheduler {
            if let Some(v) = s.delta_eval_us {
                scheduler.delta_eval = us(v);
            }
            if let Some(v) = s.sleep_us {
                scheduler.sleep_interval = us(v);
            }
            if let Some(v) = s.util_exempt {
                scheduler.util_exemption = v;
            }
            if let Some(v) = s.th_percentile {
                scheduler.th_percentile = v;
            }
            if let Some(v) = s.predictor_window {
                scheduler.predictor_window = v;
            }
            if let Some(v) = s.binding_streams {
                scheduler.binding_streams = v;
            }
            if let Some(v) = s.os_priority_levels {
                scheduler.os_priority_levels = v;
            }
            if let Some(v) = s.akb_op_cost_us {
                scheduler.akb_op_cost = us(v);
            }
            if let Some(v) = s.th_sample_period_ms {
                scheduler.th_sample_period = ms(v);
            }
            if let Some(v) = s.th_initial_window_s {
                scheduler.th_initial_window = secs(v);
            }
            if let Some(v) = s.th_recalibrate_s {
                scheduler.th_recalibrate = secs(v);
            }
            if let Some(v) = s.th_initial {
                scheduler.th_initial = Some(v);
            }
            if let Some(v) = s.rr_window_ms {
                scheduler.rr_window = ms(v);
            }
        }
        if let Some(v) = ov.delta_eval_us {
            scheduler.delta_eval = us(v);
        }
        if let Some(v) = ov.sleep_us {
            scheduler.sleep_interval = us(v);
        }
        if let Some(v) = ov.util_exempt {
            scheduler.util_exemption = v;
        }
        if let Some(v) = ov.th_percentile {
            scheduler.th_percentile = v;
        }
        if let Some(v) = ov.streams {
            scheduler.binding_streams = v;
        }
        scheduler.validate()?;

        // policy
        let policy = match ov.policy {
            Some(p) => p,
            None => {
                let name = file.policy.clone().unwrap_or_else(|| "urgengo".to_string());
                let kind: PolicyKind = name.parse()?;
                PolicySpec::new(kind)
            }
        };

        // workload: builtin or explicit chains
        let mut workload = match (&file.workload, &file.chains) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::invalid(
                    "config defines both `workload` and `chains`; pick one",
                ))
            }
            (Some(name), None) => builtin_workload(name, seed)
                .ok_or_else(|| ConfigError::UnknownBuiltin(name.clone()))?,
            (None, Some(chains)) => Workload {
                chains: chains
                    .iter()
                    .map(|c| build_chain(c, seed))
                    .collect::<Result<Vec<_>, _>>()?,
                factors: Factors::default(),
                jitter: ms(15.0),
                duration: secs(600.0),
                seed,
                tight_chains: vec![],
            },
            (None, None) => {
                return Err(ConfigError::invalid(
                    "config needs either `workload = \"<builtin>\"` or a [[chains]] list",
                ))
            }
        };
        workload.seed = seed;
        if let Some(f) = &file.factors {
            if let Some(v) = f.f_a {
                workload.factors.f_a = v;
            }
            if let Some(v) = f.f_d {
                workload.factors.f_d = v;
            }
            if let Some(v) = f.f_tight {
                workload.factors.f_tight = v;
            }
            if let Some(v) = f.jitter_ms {
                workload.jitter = ms(v);
            }
        }
        if let Some(v) = ov.f_a {
            workload.factors.f_a = v;
        }
        if let Some(v) = ov.f_d {
            workload.factors.f_d = v;
        }
        if let Some(v) = ov.f_tight {
            workload.factors.f_tight = v;
        }
        if let Some(v) = ov.jitter_ms {
            workload.jitter = ms(v);
        }
        if let Some(v) = ov.duration_s.or(file.duration_s) {
            if v < 0.0 {
                return Err(ConfigError::invalid("duration must be >= 0"));
            }
            workload.duration = secs(v);
        }
        workload.validate()?;

        Ok(RunConfig {
            workload,
            device,
            device_profile: profile_name,
            scheduler,
            policy,
            noise_pct: ov.noise_pct.or(file.noise_pct).unwrap_or(0.0),
            cudafree_tasks: ov.cudafree_tasks.or(file.cudafree_tasks).unwrap_or(0),
            shed_backlog: ov.shed_backlog.or(file.shed_backlog).unwrap_or(false),
            lookup_csv: file.lookup.map(|l| l.csv),
            source,
        })
    }

    /// SHA-256 over the canonical serialized run parameters.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Canon<'a> {
            workload: &'a Workload,
            device: &'a DeviceParams,
            scheduler: &'a SchedulerConfig,
            policy: String,
            noise_pct: f64,
            cudafree_tasks: u32,
            shed_backlog: bool,
        }
        let canon = Canon {
            workload: &self.workload,
            device: &self.device,
            scheduler: &self.scheduler,
            policy: self.policy.label(),
            noise_pct: self.noise_pct,
            cudafree_tasks: self.cudafree_tasks,
            shed_backlog: self.shed_backlog,
        };
        let text = toml::to_string(&canon).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The manifest for a run of this config over the already-scaled
    /// workload (the tight-chain selection lives there).
    pub fn manifest(&self, scaled: &Workload, sweep_point: Option<String>) -> RunManifest {
        RunManifest {
            config_hash: self.config_hash(),
            seed: self.workload.seed,
            policy: self.policy.label(),
            duration_s: self.workload.duration as f64 / NS_PER_S as f64,
            f_a: self.workload.factors.f_a,
            f_d: self.workload.factors.f_d,
            f_tight: self.workload.factors.f_tight,
            jitter_ms: self.workload.jitter as f64 / 1e6,
            tight_chains: scaled.tight_chains.clone(),
            device_profile: self.device_profile.clone(),
            contention_alpha: self.device.contention_alpha,
            delta_eval_us: self.scheduler.delta_eval as f64 / 1e3,
            sleep_us: self.scheduler.sleep_interval as f64 / 1e3,
            util_exempt: self.scheduler.util_exemption,
            th_percentile: self.scheduler.th_percentile,
            noise_pct: self.noise_pct,
            cudafree_tasks: self.cudafree_tasks,
            workload_source: self.source.label(),
            sweep_point,
        }
    }
}

fn build_chain(c: &ChainSection, seed: u64) -> Result<ChainSpec, ConfigError> {
    if c.period_ms <= 0.0 || c.deadline_ms <= 0.0 {
        return Err(ConfigError::invalid(format!(
            "chain {}: period and deadline must be > 0",
            c.chain_id
        )));
    }
    let mut tasks = Vec::new();
    for (ti, t) in c.tasks.iter().enumerate() {
        tasks.push(build_task(c.chain_id, ti as u32, t, seed)?);
    }
    let cpu_total_ms: f64 = c
        .tasks
        .iter()
        .flat_map(|t| t.cpu_segment_ms.iter())
        .sum();
    let gpu_total_ms: f64 = tasks.iter().map(|t| t.gpu_total() as f64 / 1e6).sum();
    Ok(ChainSpec {
        chain_id: c.chain_id,
        modality: c.modality.clone().unwrap_or_else(|| "unspecified".into()),
        period: ms(c.period_ms),
        deadline: ms(c.deadline_ms),
        tasks,
        static_criticality: c.static_criticality,
        cpu_time_cv: c
            .cpu_sd_ms
            .map(|sd| if cpu_total_ms > 0.0 { sd / cpu_total_ms } else { 0.0 })
            .unwrap_or(0.0),
        gpu_time_cv: c
            .gpu_sd_ms
            .map(|sd| if gpu_total_ms > 0.0 { sd / gpu_total_ms } else { 0.0 })
            .unwrap_or(0.0),
    })
}

fn build_task(
    chain_id: u32,
    task_idx: u32,
    t: &TaskSection,
    seed: u64,
) -> Result<TaskSpec, ConfigError> {
    let kernels = match (&t.stats, &t.kernels) {
        (Some(_), Some(_)) => {
            return Err(ConfigError::invalid(format!(
                "chain {chain_id} task {task_idx}: give either `stats` or `kernels`, not both"
            )))
        }
        (None, None) => {
            return Err(ConfigError::invalid(format!(
                "chain {chain_id} task {task_idx}: needs `stats` or `kernels`"
            )))
        }
        (Some(s), None) => {
            if s.kernels == 0 || s.gpu_total_ms <= 0.0 {
                return Err(ConfigError::invalid(format!(
                    "chain {chain_id} task {task_idx}: stats need kernels >= 1 and gpu_total_ms > 0"
                )));
            }
            let mut rng = rng::derive(seed, Stream::KernelSynth(chain_id, task_idx));
            let times = synthesize_kernel_times(s.kernels, ms(s.gpu_total_ms), &mut rng);
            let range = s.util_range.map(|[a, b]| (a, b)).unwrap_or((0.15, 0.6));
            let utils = synthesize_utilizations(s.kernels, range, &mut rng);
            let segments = s.segments.unwrap_or(2).max(1).min(s.kernels);
            let seg_len = s.kernels.div_ceil(segments);
            times
                .iter()
                .zip(&utils)
                .enumerate()
                .map(|(i, (&exec, &util))| KernelSpec {
                    kernel_id: (chain_id as u64) << 24 | (task_idx as u64) << 16 | i as u64,
                    grid_dim: rng.gen_range(8..=256),
                    block_dim: [128u32, 256, 512][rng.gen_range(0..3)],
                    shared_mem: 0,
                    nominal_exec: exec,
                    utilization: util,
                    gpu_segment_id: (i / seg_len) as u32,
                    is_memcpy: false,
                })
                .collect()
        }
        (None, Some(ks)) => ks
            .iter()
            .enumerate()
            .map(|(i, k)| KernelSpec {
                kernel_id: k
                    .kernel_id
                    .unwrap_or((chain_id as u64) << 24 | (task_idx as u64) << 16 | i as u64),
                grid_dim: k.grid,
                block_dim: k.block,
                shared_mem: k.shared_mem,
                nominal_exec: us(k.exec_us),
                utilization: k.util,
                gpu_segment_id: k.segment_id,
                is_memcpy: k.memcpy,
            })
            .collect(),
    };
    Ok(TaskSpec {
        task_id: task_idx,
        library_tag: t.tag.clone().unwrap_or_else(|| format!("task-{task_idx}")),
        kernels,
        cpu_segment_times: t.cpu_segment_ms.iter().map(|&v| ms(v)).collect(),
        issues_device_barrier: t.barrier,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_default_resolves() {
        let cfg = RunConfig::builtin("c0-c9", &Overrides::default()).unwrap();
        assert_eq!(cfg.workload.chains.len(), 10);
        assert_eq!(cfg.policy.kind, PolicyKind::Urgengo);
        assert_eq!(cfg.device.num_priorities, 6);
    }

    #[test]
    fn unknown_builtin_rejected() {
        let err = RunConfig::builtin("nosuch", &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("nosuch"));
    }

    #[test]
    fn toml_chain_with_explicit_kernels() {
        let text = r#"
seed = 7
duration_s = 1.0
policy = "vanilla"

[factors]
f_tight = 0.0
jitter_ms = 0.0

[[chains]]
chain_id = 0
modality = "lidar"
period_ms = 150.0
deadline_ms = 120.0

[[chains.tasks]]
tag = "path-finder"
cpu_segment_ms = [5.0]

[[chains.tasks.kernels]]
kernel_id = 0
grid = 22
block = 512
exec_us = 28.0
util = 0.19
segment_id = 0
"#;
        let cfg = RunConfig::from_toml(
            text,
            WorkloadSource::File("inline".into()),
            &Overrides::default(),
        )
        .unwrap();
        assert_eq!(cfg.workload.chains[0].period, ms(150.0));
        assert_eq!(cfg.workload.chains[0].deadline, ms(120.0));
        assert_eq!(cfg.workload.chains[0].tasks[0].kernels[0].nominal_exec, us(28.0));
        assert_eq!(cfg.policy.kind, PolicyKind::Vanilla);
    }

    #[test]
    fn unknown_keys_rejected_with_locus() {
        let text = "seed = 1\nbogus_key = true\n";
        let err = RunConfig::from_toml(
            text,
            WorkloadSource::File("inline".into()),
            &Overrides::default(),
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("bogus_key"), "{err}");
    }

    #[test]
    fn empty_chain_list_is_a_validation_error() {
        let text = "chains = []\n";
        let err = RunConfig::from_toml(
            text,
            WorkloadSource::File("inline".into()),
            &Overrides::default(),
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("non-empty"), "{err}");
    }

    #[test]
    fn f_tight_range_error_surfaces() {
        let text = "workload = \"c0-c9\"\n\n[factors]\nf_tight = 1.2\n";
        let err = RunConfig::from_toml(
            text,
            WorkloadSource::File("inline".into()),
            &Overrides::default(),
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("f_tight"), "{err}");
    }

    #[test]
    fn overrides_take_precedence() {
        let mut ov = Overrides::default();
        ov.seed = Some(99);
        ov.f_a = Some(1.3);
        ov.policy = Some(PolicySpec::new(PolicyKind::Static));
        let cfg = RunConfig::builtin("c0-c9", &ov).unwrap();
        assert_eq!(cfg.workload.seed, 99);
        assert_eq!(cfg.workload.factors.f_a, 1.3);
        assert_eq!(cfg.policy.kind, PolicyKind::Static);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = RunConfig::builtin("c0-c9", &Overrides::default()).unwrap();
        let b = RunConfig::builtin("c0-c9", &Overrides::default()).unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        let mut ov = Overrides::default();
        ov.seed = Some(1);
        let c = RunConfig::builtin("c0-c9", &ov).unwrap();
        assert_ne!(a.config_hash(), c.config_hash());
    }
}
