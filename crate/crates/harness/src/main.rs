use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use qosplane_core::algorithms::Algorithm;
use qosplane_core::clock::MonotonicClock;
use qosplane_core::controller::global::CycleLog;
use qosplane_core::controller::net::{GlobalControllerServer, LocalControllerServer};
use qosplane_core::controller::{GlobalController, LocalController, Policy};
use qosplane_core::request::OpType;
use qosplane_core::workload::{generate_mix, mix_report, BurstProfile};
use qosplane_harness::bench::{self, SinkKind};
use qosplane_harness::{live, simulate, Mode, ScenarioSpec};

#[derive(Parser)]
#[command(name = "qosplane", version, about = "Storage QoS experiments and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write its artifacts.
    RunScenario {
        spec: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Override the scenario's algorithm.
        #[arg(long)]
        algorithm: Option<Algorithm>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Stage throughput: one stage with many threads, many stages with one thread.
    BenchStage {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        threads: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        stages: Vec<usize>,
        #[arg(long, default_value_t = 1_000_000)]
        requests: u64,
        #[arg(long)]
        json: bool,
    },
    /// Control-cycle latency with local controllers over loopback.
    BenchControl {
        #[arg(long, value_delimiter = ',', default_value = "1,8")]
        controllers: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        stages_per: usize,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long)]
        json: bool,
    },
    /// Stage overhead against the same workload sent straight to the sink.
    BenchOverhead {
        #[arg(long, default_value_t = 300_000)]
        ops: u64,
        #[arg(long, value_enum, default_value = "directory")]
        sink: SinkKind,
        #[arg(long, default_value_t = 3)]
        rounds: usize,
        /// Throttle the stage channel; the run is then excluded from the metric.
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Write synthetic `<op>_log.txt` traces.
    GenTrace {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        duration_s: usize,
        /// Mean total ops/s across all op types.
        #[arg(long, default_value_t = 5000.0)]
        mean: f64,
        /// Comma-separated `op=share` pairs.
        #[arg(long, default_value = "getattr=0.47,close=0.21,open=0.14,rename=0.16,statfs=0.02")]
        mix: String,
        #[arg(long, default_value_t = 5.0)]
        burst_multiplier: f64,
        #[arg(long, default_value_t = 0.1)]
        burst_prob: f64,
        #[arg(long, default_value_t = 0.2)]
        quiet_prob: f64,
    },
    /// Serve a global controller.
    GlobalController {
        #[arg(long, default_value = "0.0.0.0:7400")]
        listen: String,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        cycle_log: Option<PathBuf>,
    },
    /// Serve a local controller for the stages of one node.
    LocalController {
        #[arg(long, default_value = "127.0.0.1:7401")]
        listen: String,
        #[arg(long)]
        global: SocketAddr,
        #[arg(long, default_value_t = 1.0)]
        loop_interval_s: f64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Simulated,
    Live,
}

fn parse_mix(text: &str) -> anyhow::Result<Vec<(OpType, f64)>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (op, share) = pair.split_once('=').with_context(|| format!("expected op=share, got `{pair}`"))?;
            let op: OpType = op.trim().parse()?;
            let share: f64 = share.trim().parse().with_context(|| format!("bad share in `{pair}`"))?;
            Ok((op, share))
        })
        .collect()
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn fmt_us(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"))
}

fn wait_forever() -> ! {
    loop {
        std::thread::park();
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::RunScenario { spec, out, algorithm, mode } => {
            let mut scenario = ScenarioSpec::load(&spec)?;
            if let Some(a) = algorithm {
                scenario = scenario.with_algorithm(a);
            }
            match mode {
                Some(ModeArg::Simulated) => scenario.mode = Mode::Simulated,
                Some(ModeArg::Live) => scenario.mode = Mode::Live,
                None => {}
            }
            let outcome = match scenario.mode {
                Mode::Simulated => simulate(&scenario)?,
                Mode::Live => live::run_live(&scenario)?,
            };
            let dir = out.join(format!("{}-{}", scenario.name, scenario.algorithm));
            outcome.write_artifacts(&dir, &scenario)?;
            print_json(&outcome.summary())?;
            eprintln!("artifacts in {}", dir.display());
            if outcome.failed {
                bail!("scenario failed: {}", outcome.error.unwrap_or_default());
            }
        }
        Command::BenchStage { threads, stages, requests, json } => {
            let rows = bench::bench_stage(&threads, &stages, requests);
            if json {
                print_json(&rows)?;
            } else {
                println!("{:>7} {:>8} {:>12} {:>14}", "stages", "threads", "ops", "ops/s");
                for r in rows {
                    println!("{:>7} {:>8} {:>12} {:>14.0}", r.stages, r.threads_per_stage, r.ops, r.ops_per_s);
                }
            }
        }
        Command::BenchControl { controllers, stages_per, iterations, json } => {
            let stats: Vec<_> =
                controllers.iter().map(|&c| bench::bench_control(c, stages_per, iterations)).collect::<Result<_, _>>()?;
            if json {
                print_json(&stats)?;
            } else {
                println!("{:>11} {:>10} {:>10} {:>10} {:>10}", "controllers", "cycles", "p50 us", "p95 us", "p99 us");
                for s in stats {
                    println!(
                        "{:>11} {:>10} {:>10} {:>10} {:>10}",
                        s.local_controllers,
                        s.iterations,
                        fmt_us(s.p50_us),
                        fmt_us(s.p95_us),
                        fmt_us(s.p99_us)
                    );
                }
            }
        }
        Command::BenchOverhead { ops, sink, rounds, rate, json } => {
            let r = bench::bench_overhead(ops, sink, rounds, rate)?;
            if json {
                print_json(&r)?;
            } else {
                let rate = |v: Option<f64>| v.map_or_else(|| "N/A".to_string(), |v| format!("{v:.0}"));
                println!("baseline    {} ops/s", rate(r.baseline_ops_per_s));
                println!("passthrough {} ops/s", rate(r.passthrough_ops_per_s));
                match r.overhead {
                    Some(o) => println!("overhead    {:.2}%", o * 100.0),
                    None => println!("overhead    N/A"),
                }
            }
        }
        Command::GenTrace { out, seed, duration_s, mean, mix, burst_multiplier, burst_prob, quiet_prob } => {
            let shares = parse_mix(&mix)?;
            let profile = BurstProfile { burst_prob, burst_multiplier, quiet_prob };
            let traces = generate_mix(seed, duration_s, mean, &shares, profile);
            std::fs::create_dir_all(&out)?;
            for t in &traces {
                let path = t.save(&out)?;
                println!("{} mean {:.0} ops/s", path.display(), t.mean());
            }
            let report: BTreeMap<String, String> =
                mix_report(&traces).into_iter().map(|(op, s)| (op.name().to_string(), format!("{:.3}", s))).collect();
            println!("mix {report:?}");
        }
        Command::GlobalController { listen, policy, cycle_log } => {
            let text = std::fs::read_to_string(&policy).with_context(|| format!("reading {}", policy.display()))?;
            let policy = Policy::from_toml(&text)?;
            let mut global = GlobalController::new(policy, Arc::new(MonotonicClock::new()))?;
            if let Some(path) = cycle_log {
                global = global.with_log(CycleLog::create(&path)?);
            }
            let server = GlobalControllerServer::start(listen.as_str(), global.handle())?;
            eprintln!("global controller on {}", server.local_addr());
            let stop = AtomicBool::new(false);
            global.run(&stop, |r| {
                if let Some(e) = &r.error {
                    log::warn!("cycle {}: {e}", r.index);
                }
            });
        }
        Command::LocalController { listen, global, loop_interval_s } => {
            let lc = Arc::new(LocalController::for_loop_interval(Duration::from_secs_f64(loop_interval_s)));
            let server = LocalControllerServer::start(listen.as_str(), Some(global), lc)?;
            eprintln!("local controller on {}", server.local_addr());
            wait_forever();
        }
    }
    Ok(())
}
