use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use urgensim::harness::{self, AblationStudy, SweepPlan};
use urgensim::policy::{PolicyKind, PolicySpec, SyncMode, POLICY_NAMES};
use urgensim::workload::Overrides;

#[derive(Parser)]
#[command(
    name = "urgensim",
    about = "Deterministic simulator for urgency-aware GPU kernel-launch scheduling",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write a report directory.
    Run(RunArgs),
    /// Run a factor sweep (cartesian product of axes x policies x seeds).
    Sweep(SweepArgs),
    /// Run an ablation study (modules, sync modes, streams, cudafree).
    Ablate(AblateArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Built-in workload name (default, c0-c9, c6-c10, contention-pair) or
    /// a TOML config path.
    #[arg(long, default_value = "default")]
    config: String,
    /// Scheduling policy.
    #[arg(long, value_parser = parse_policy)]
    policy: Option<PolicySpec>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated duration in seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Arrival-rate scale factor.
    #[arg(long)]
    fa: Option<f64>,
    /// Deadline scale factor.
    #[arg(long)]
    fd: Option<f64>,
    /// Fraction of chains with halved deadlines.
    #[arg(long)]
    ftight: Option<f64>,
    /// Urgency evaluation interval in microseconds.
    #[arg(long = "delta-eval-us")]
    delta_eval_us: Option<f64>,
    /// Delayed-launch sleep interval in microseconds.
    #[arg(long = "sleep-us")]
    sleep_us: Option<f64>,
    /// Utilization below which kernels are exempt from delaying.
    #[arg(long = "util-exempt")]
    util_exempt: Option<f64>,
    /// Binding streams per task pool.
    #[arg(long)]
    streams: Option<u32>,
    /// Urgency estimation noise (e.g. 0.3 for 30%).
    #[arg(long = "noise-pct")]
    noise_pct: Option<f64>,
    /// Number of chains issuing a device barrier per instance.
    #[arg(long = "cudafree-tasks")]
    cudafree_tasks: Option<u32>,
    /// Device profile: rtx3070ti or agx-orin.
    #[arg(long = "device-profile")]
    device_profile: Option<String>,
    /// Disable dynamic stream binding (urgengo ablation).
    #[arg(long = "no-binding", default_value_t = false)]
    no_binding: bool,
    /// Disable delayed launching (urgengo ablation).
    #[arg(long = "no-delay", default_value_t = false)]
    no_delay: bool,
    /// Override the sync mode: per-kernel, async, batched, batched-overlap.
    #[arg(long = "sync-mode", value_parser = parse_sync_mode)]
    sync_mode: Option<SyncMode>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output directory.
    #[arg(long, default_value = "out/run")]
    out: PathBuf,
    /// Also dump the event trace and urgency timeline CSVs.
    #[arg(long, default_value_t = false)]
    trace: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Arrival-rate axis, comma separated (e.g. 0.5,0.7,0.9,1.1,1.3).
    #[arg(long = "fa-list", value_delimiter = ',')]
    fa_list: Vec<f64>,
    /// Deadline-scale axis.
    #[arg(long = "fd-list", value_delimiter = ',')]
    fd_list: Vec<f64>,
    /// Tightness axis.
    #[arg(long = "ftight-list", value_delimiter = ',')]
    ftight_list: Vec<f64>,
    /// Delta_eval axis in microseconds.
    #[arg(long = "delta-eval-list", value_delimiter = ',')]
    delta_eval_list: Vec<f64>,
    /// Urgency-noise axis.
    #[arg(long = "noise-list", value_delimiter = ',')]
    noise_list: Vec<f64>,
    /// cudaFree-count axis.
    #[arg(long = "cudafree-list", value_delimiter = ',')]
    cudafree_list: Vec<u32>,
    /// Policies to compare.
    #[arg(long, value_delimiter = ',', value_parser = parse_policy)]
    policies: Vec<PolicySpec>,
    /// Seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long, default_value = "out/sweep")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Study: modules, sync, streams or cudafree.
    #[arg(long, default_value = "modules")]
    study: String,
    /// Stream counts for the streams study (default 1..6).
    #[arg(long = "streams-list", value_delimiter = ',')]
    streams_list: Vec<u32>,
    /// Barrier-issuing task counts for the cudafree study (default 0..4).
    #[arg(long = "cudafree-list", value_delimiter = ',')]
    cudafree_list: Vec<u32>,
    /// Seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long, default_value = "out/ablate")]
    out: PathBuf,
}

fn parse_policy(s: &str) -> Result<PolicySpec, String> {
    let kind: PolicyKind = s
        .parse()
        .map_err(|_| format!("unknown policy `{s}` (expected one of {})", POLICY_NAMES.join("|")))?;
    Ok(PolicySpec::new(kind))
}

fn parse_sync_mode(s: &str) -> Result<SyncMode, String> {
    Ok(match s {
        "per-kernel" => SyncMode::PerKernel,
        "async" => SyncMode::EndOfSegment,
        "batched" => SyncMode::Batched { overlap: false },
        "batched-overlap" => SyncMode::Batched { overlap: true },
        other => return Err(format!(
            "unknown sync mode `{other}` (expected per-kernel|async|batched|batched-overlap)"
        )),
    })
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        let mut policy = self.policy;
        if self.no_binding || self.no_delay || self.sync_mode.is_some() {
            let mut spec = policy.unwrap_or(PolicySpec::new(PolicyKind::Urgengo));
            spec.no_binding = self.no_binding;
            spec.no_delay = self.no_delay;
            spec.sync_override = self.sync_mode;
            policy = Some(spec);
        }
        Overrides {
            policy,
            seed: self.seed,
            duration_s: self.duration,
            f_a: self.fa,
            f_d: self.fd,
            f_tight: self.ftight,
            jitter_ms: None,
            delta_eval_us: self.delta_eval_us,
            sleep_us: self.sleep_us,
            util_exempt: self.util_exempt,
            th_percentile: None,
            streams: self.streams,
            noise_pct: self.noise_pct,
            cudafree_tasks: self.cudafree_tasks,
            device_profile: self.device_profile.clone(),
            contention_alpha: None,
            shed_backlog: None,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => {
            let ov = args.common.overrides();
            harness::cmd_run(&args.common.config, &ov, &args.out, args.trace).map(|s| {
                println!(
                    "policy={} seed={} miss_ratio={:.4} mean_latency_ms={:.3} collisions={}",
                    s.policy, s.seed, s.miss_ratio, s.mean_latency_ms, s.collisions
                );
                println!("report written to {}", args.out.display());
            })
        }
        Command::Sweep(args) => {
            let mut plan = SweepPlan::new(&args.common.config, &args.out);
            plan.base = args.common.overrides();
            plan.f_a = args.fa_list;
            plan.f_d = args.fd_list;
            plan.f_tight = args.ftight_list;
            plan.delta_eval_us = args.delta_eval_list;
            plan.noise_pct = args.noise_list;
            plan.cudafree_tasks = args.cudafree_list;
            plan.policies = args.policies;
            plan.seeds = args.seeds;
            harness::cmd_sweep(&plan).map(|rows| {
                for r in &rows {
                    println!("{}: miss_ratio={:.4}", r.label, r.miss_ratio);
                }
                println!("aggregate written to {}", args.out.join("sweep.csv").display());
            })
        }
        Command::Ablate(args) => {
            let study: Result<AblationStudy, _> = args.study.parse();
            match study {
                Ok(study) => harness::cmd_ablate(
                    study,
                    &args.common.config,
                    &args.common.overrides(),
                    &args.seeds,
                    &args.streams_list,
                    &args.cudafree_list,
                    &args.out,
                )
                .map(|rows| {
                    for r in &rows {
                        println!("{}: miss_ratio={:.4}", r.label, r.miss_ratio);
                    }
                    println!("aggregate written to {}", args.out.join("ablate.csv").display());
                }),
                Err(e) => Err(harness::HarnessError::Config(e)),
            }
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
