use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flexicache::simulator::{
    memory_savings, offline_workload, run_offline, run_online, Policy, SimOptions, SimReport,
    WorkloadSpec,
};
use flexicache::stability::{classify_heads, cross_task_overlap, HeadProfile, StabilityReport};
use flexicache::synth::{gen_synthetic_trace, stream_rng, uniform_subset, SynthTraceSpec};
use flexicache::trace::{load_trace, save_trace, TopKTrace};
use flexicache::{Config, HeadId};
use log::{debug, info};
use rayon::prelude::*;

const PROFILE_STREAM: u64 = 0x7072_6f66;

#[derive(Parser)]
#[command(
    name = "fxc",
    version,
    about = "Head-stability analytics and two-tier KV-cache simulation"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file of key=value lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "STEPS")]
    rerank_period: Option<u32>,
    #[arg(long, global = true, value_name = "PAGES")]
    topk_pages: Option<u32>,
    #[arg(long, global = true)]
    unstable_fraction: Option<f64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic top-K traces with planted unstable heads.
    GenTrace(GenTrace),
    /// Per-trace stability reports and the mean RCO-vs-offset curve.
    Stability(Traces),
    /// Classify heads from traces into a profile.
    Classify(Classify),
    /// Cross-task overlap matrix of profiles.
    Overlap(Overlap),
    /// Run one serving simulation.
    Simulate(Simulate),
    /// Analytic fast-tier memory savings against sequence length.
    Savings(Savings),
    /// Both policies over a grid of arrival rates or output lengths, in parallel.
    Sweep(Sweep),
}

#[derive(Args)]
struct GenTrace {
    #[arg(long, default_value_t = 4)]
    samples: usize,
    /// Decode steps per trace.
    #[arg(long, default_value_t = 512)]
    steps: usize,
    /// Per-step retention of stable heads.
    #[arg(long, default_value_t = 0.9)]
    persistence: f64,
    /// Candidate pool at step 0, in pages.
    #[arg(long, default_value_t = 1024)]
    initial_pool: u32,
    /// File name prefix.
    #[arg(long, default_value = "sample")]
    prefix: String,
}

#[derive(Args)]
struct Traces {
    #[arg(required = true)]
    traces: Vec<PathBuf>,
}

#[derive(Args)]
struct Classify {
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    #[arg(long, default_value = "model")]
    model: String,
    #[arg(long, default_value = "task")]
    task: String,
}

#[derive(Args)]
struct Overlap {
    #[arg(required = true, num_args = 2..)]
    profiles: Vec<PathBuf>,
}

#[derive(Args, Clone)]
struct Workload {
    #[arg(long, default_value_t = 100)]
    requests: usize,
    /// Prompt tokens, `N` or `LO..HI`.
    #[arg(long, default_value = "8000..12000", value_parser = parse_range)]
    prompt: (u32, u32),
    /// Output tokens, `N` or `LO..HI`.
    #[arg(long, default_value = "500", value_parser = parse_range)]
    output: (u32, u32),
    /// Head profile; without one, a random unstable set of the configured size.
    #[arg(long)]
    profile: Option<PathBuf>,
}

#[derive(Args)]
struct Simulate {
    #[command(flatten)]
    work: Workload,
    #[arg(long, default_value = "flexicache")]
    policy: Policy,
    /// Poisson arrival rate in requests per second; offline when absent.
    #[arg(long)]
    rate: Option<f64>,
    /// Also write transfers.csv.
    #[arg(long)]
    transfers: bool,
}

#[derive(Args)]
struct Savings {
    /// Sequence lengths in tokens.
    #[arg(long, value_delimiter = ',', default_values_t = [1000u64, 2000, 4000, 8000, 12000, 16000, 20000, 32000, 64000, 128000])]
    seq: Vec<u64>,
}

#[derive(Args)]
struct Sweep {
    #[command(flatten)]
    work: Workload,
    /// Arrival rates; offline runs when absent.
    #[arg(long, value_delimiter = ',')]
    rates: Vec<f64>,
    /// Fixed output lengths replacing `--output`, one run per value.
    #[arg(long, value_delimiter = ',')]
    outputs: Vec<u32>,
}

enum CliError {
    Usage(String),
    Data(String),
}

impl From<flexicache::Error> for CliError {
    fn from(e: flexicache::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn data<E: Into<flexicache::Error>>(e: E) -> CliError {
    CliError::from(e.into())
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn parse_range(s: &str) -> Result<(u32, u32), String> {
    let (lo, hi) = s.split_once("..").unwrap_or((s, s));
    let p = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("{v:?}: {e}"));
    let (lo, hi) = (p(lo)?, p(hi)?);
    if lo == 0 || lo > hi {
        return Err(format!("range {lo}..{hi} must be nonempty and positive"));
    }
    Ok((lo, hi))
}

fn load_config(c: &Common) -> Result<Config, CliError> {
    let base = match &c.config {
        Some(p) => Config::load(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?,
        None => Config::default(),
    };
    let mut overrides = c.set.clone();
    let flags = [
        ("rng_seed", c.seed.map(|v| v.to_string())),
        ("rerank_period", c.rerank_period.map(|v| v.to_string())),
        ("topk_pages", c.topk_pages.map(|v| v.to_string())),
        (
            "unstable_fraction",
            c.unstable_fraction.map(|v| v.to_string()),
        ),
    ];
    overrides.extend(
        flags
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| format!("{k}={v}"))),
    );
    base.with_overrides(&overrides)
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn write(out: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(out).map_err(io(out))?;
    let path = out.join(name);
    fs::write(&path, text).map_err(io(&path))?;
    info!("wrote {}", path.display());
    Ok(path)
}

fn load_traces(paths: &[PathBuf]) -> Result<Vec<TopKTrace>, CliError> {
    let traces = paths
        .iter()
        .map(|p| load_trace(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    let first = &traces[0];
    let shape = |t: &TopKTrace| (t.layers(), t.heads_per_layer(), t.k());
    if let Some(t) = traces.iter().find(|t| shape(t) != shape(first)) {
        return Err(CliError::Data(format!(
            "trace {} is {:?} (layers, heads, K), {} is {:?}",
            t.sample_id,
            shape(t),
            first.sample_id,
            shape(first)
        )));
    }
    Ok(traces)
}

fn reports(traces: &[TopKTrace], cfg: &Config) -> Result<Vec<StabilityReport>, CliError> {
    traces
        .iter()
        .map(|t| {
            StabilityReport::compute(
                t,
                cfg.window_w as usize,
                cfg.window_stride as usize,
                cfg.unstable_fraction,
            )
            .map_err(data)
        })
        .collect()
}

fn random_profile(cfg: &Config) -> HeadProfile {
    let mut rng = stream_rng(cfg.rng_seed, &[PROFILE_STREAM]);
    let heads = cfg.kv_heads_per_layer;
    let unstable = uniform_subset(
        &mut rng,
        cfg.unstable_head_count(),
        cfg.total_heads() as u32,
    )
    .into_iter()
    .map(|i| HeadId::from_flat(i as usize, heads));
    HeadProfile::from_unstable("random", cfg.num_layers, heads, unstable).expect("heads in range")
}

fn profile_for(w: &Workload, cfg: &Config) -> Result<HeadProfile, CliError> {
    match &w.profile {
        Some(p) => {
            HeadProfile::load(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
        }
        None => Ok(random_profile(cfg)),
    }
}

fn gen_trace(a: &GenTrace, cfg: &Config, out: &Path) -> Result<(), CliError> {
    let planted = random_profile(cfg).with_task("planted");
    write(out, &format!("{}.planted", a.prefix), &planted.to_text())?;
    fs::create_dir_all(out).map_err(io(out))?;
    for i in 0..a.samples {
        let cfg = Config {
            rng_seed: cfg
                .rng_seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(i as u64),
            ..cfg.clone()
        };
        let id = format!("{}_{i:03}", a.prefix);
        let spec = SynthTraceSpec {
            sample_id: id.clone(),
            planted_unstable: planted.unstable().clone(),
            persistence: a.persistence,
            steps: a.steps,
            initial_pool: a.initial_pool,
        };
        let trace = gen_synthetic_trace(&cfg, &spec).map_err(data)?;
        let path = out.join(format!("{id}.fxtk"));
        save_trace(&trace, &path).map_err(data)?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn stability(a: &Traces, cfg: &Config, out: &Path) -> Result<(), CliError> {
    let traces = load_traces(&a.traces)?;
    let reports = reports(&traces, cfg)?;
    for r in &reports {
        write(out, &format!("{}.stability", r.sample_id), &r.to_text())?;
    }
    let (layers, heads) = (traces[0].layers(), traces[0].heads_per_layer());
    let mut csv = String::from("layer,head,offset,mean_rco\n");
    for h in HeadId::all(layers, heads) {
        for delta in 1..cfg.window_w as usize {
            let vals: Vec<f64> = reports
                .iter()
                .filter_map(|r| r.mean_rco(h, delta))
                .collect();
            if vals.is_empty() {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let _ = writeln!(csv, "{},{},{delta},{mean:.6}", h.layer, h.head);
        }
    }
    write(out, "rco_vs_offset.csv", &csv)?;
    Ok(())
}

fn classify(a: &Classify, cfg: &Config, out: &Path) -> Result<(), CliError> {
    let traces = load_traces(&a.traces)?;
    let reports = reports(&traces, cfg)?;
    let p = classify_heads(&reports, cfg.unstable_fraction, &a.model, &a.task).map_err(data)?;
    write(out, &format!("{}.profile", a.task), &p.to_text())?;
    println!("{} unstable of {} heads", p.unstable().len(), p.n_heads());
    Ok(())
}

fn overlap(a: &Overlap, out: &Path) -> Result<(), CliError> {
    let profiles = a
        .profiles
        .iter()
        .map(|p| HeadProfile::load(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    let m = cross_task_overlap(&profiles).map_err(data)?;
    let csv = m.to_csv();
    write(out, "overlap.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

fn workload(
    w: &Workload,
    output: Option<u32>,
    seed: u64,
) -> Result<Vec<flexicache::Request>, CliError> {
    let spec = WorkloadSpec {
        requests: w.requests,
        prompt_tokens: w.prompt,
        output_tokens: output.map_or(w.output, |o| (o, o)),
    };
    offline_workload(&spec, seed).map_err(data)
}

fn run_one(
    reqs: &[flexicache::Request],
    rate: Option<f64>,
    cfg: &Config,
    profile: &HeadProfile,
    opts: &SimOptions,
) -> Result<SimReport, CliError> {
    let r = match rate {
        Some(rate) => run_online(reqs, rate, cfg, profile, opts),
        None => run_offline(reqs, cfg, profile, opts),
    };
    r.map_err(data)
}

fn simulate(a: &Simulate, cfg: &Config, out: &Path) -> Result<(), CliError> {
    let profile = profile_for(&a.work, cfg)?;
    let reqs = workload(&a.work, None, cfg.rng_seed)?;
    let opts = SimOptions {
        record_transfers: a.transfers,
        ..SimOptions::with_policy(a.policy)
    };
    let report = run_one(&reqs, a.rate, cfg, &profile, &opts)?;
    let text = report.to_text();
    write(out, "report.txt", &text)?;
    write(out, "requests.csv", &report.requests_csv())?;
    if a.transfers {
        write(out, "transfers.csv", &report.transfers.to_csv())?;
    }
    print!("{text}");
    Ok(())
}

fn savings(a: &Savings, cfg: &Config, out: &Path) -> Result<(), CliError> {
    let mut csv = String::from("seq_tokens,savings\n");
    for &s in &a.seq {
        let _ = writeln!(csv, "{s},{:.6}", memory_savings(s, cfg));
    }
    write(out, "savings.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

fn sweep(a: &Sweep, cfg: &Config, out: &Path) -> Result<(), CliError> {
    let profile = profile_for(&a.work, cfg)?;
    let rates: Vec<Option<f64>> = if a.rates.is_empty() {
        vec![None]
    } else {
        a.rates.iter().map(|&r| Some(r)).collect()
    };
    let outputs: Vec<Option<u32>> = if a.outputs.is_empty() {
        vec![None]
    } else {
        a.outputs.iter().map(|&o| Some(o)).collect()
    };
    let mut points = Vec::new();
    for &o in &outputs {
        for &r in &rates {
            for p in [Policy::Dense, Policy::FlexiCache] {
                points.push((p, r, o));
            }
        }
    }
    let rows: Vec<String> = points
        .par_iter()
        .map(|&(p, rate, o)| {
            debug!("sweep point {p} rate={rate:?} output={o:?}");
            let reqs = workload(&a.work, o, cfg.rng_seed)?;
            let r = run_one(&reqs, rate, cfg, &profile, &SimOptions::with_policy(p))?;
            let (ttft, tpot) = (r.ttft(), r.tpot());
            Ok(format!(
                "{p},{},{},{},{:.3},{:.6},{:.6},{:.6},{:.6},{}",
                r.mode,
                rate.map_or_else(String::new, |v| v.to_string()),
                o.map_or_else(
                    || format!("{}..{}", a.work.output.0, a.work.output.1),
                    |v| v.to_string()
                ),
                r.throughput(),
                ttft.mean,
                ttft.p95,
                tpot.mean,
                r.pause_fraction,
                r.peak_fast_bytes
            ))
        })
        .collect::<Result<_, CliError>>()?;
    let mut csv = String::from(
        "policy,mode,rate,output_tokens,throughput_tok_per_s,ttft_mean_s,ttft_p95_s,tpot_mean_s,pause_fraction,peak_fast_bytes\n",
    );
    for row in rows {
        csv.push_str(&row);
        csv.push('\n');
    }
    write(out, "sweep.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli.common)?;
    let out = &cli.common.out;
    match &cli.cmd {
        Cmd::GenTrace(a) => gen_trace(a, &cfg, out),
        Cmd::Stability(a) => stability(a, &cfg, out),
        Cmd::Classify(a) => classify(a, &cfg, out),
        Cmd::Overlap(a) => overlap(a, out),
        Cmd::Simulate(a) => simulate(a, &cfg, out),
        Cmd::Savings(a) => savings(a, &cfg, out),
        Cmd::Sweep(a) => sweep(a, &cfg, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("FXC_LOG")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("fxc: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Data(m)) => {
            eprintln!("fxc: {m}");
            ExitCode::from(3)
        }
    }
}
