use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qkd_core::ec::family::CodeFamily;
use qkd_core::link::{
    read_stats, run_loopback, run_node, summarize, FrameSink, Link, NodeConfig, NodeReport, Role,
};
use qkd_core::Config;

mod bench;

#[derive(Parser)]
#[command(
    name = "qkd-pipeline",
    version,
    about = "Decoy-state BB84 key distillation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one node, or both over an in-process link with --loopback.
    Run(RunArgs),
    /// Standalone throughput of one stage.
    Bench(BenchArgs),
    /// Summarize a stats CSV written by `run --stats`.
    Report { csv: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_parser = parse_role)]
    role: Role,
    /// `key = value` parameter file; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with_all = ["connect", "loopback"])]
    listen: Option<String>,
    #[arg(long, conflicts_with = "loopback")]
    connect: Option<String>,
    /// Number of simulated time slots.
    #[arg(long)]
    pulses: u64,
    /// Run both nodes in this process.
    #[arg(long)]
    loopback: bool,
    /// Stats CSV of this node.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Key store of this node.
    #[arg(long)]
    keys: Option<PathBuf>,
    /// Key store of the other node in a loopback run.
    #[arg(long, requires = "loopback")]
    peer_keys: Option<PathBuf>,
    /// Raw detection events (slot u64, detector u8), written by Bob.
    #[arg(long)]
    dump_events: Option<PathBuf>,
    /// Shared seed; both nodes must use the same value.
    #[arg(long, default_value_t = 0x5eed_0001)]
    seed: u64,
    /// Stop generating pulses after this many seconds of wall time.
    #[arg(long)]
    max_seconds: Option<f64>,
    /// Suppress the per-frame JSON lines on stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Sift,
    Ec,
    Pa,
}

#[derive(Args)]
struct BenchArgs {
    stage: Stage,
    /// Slots per sift round, blocks for ec, or input bits for pa.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value_t = 0.03)]
    qber: f64,
}

fn parse_role(s: &str) -> Result<Role, String> {
    s.parse()
}

fn node_config(args: &RunArgs, config: &Config, role: Role) -> NodeConfig {
    let mut cfg = NodeConfig::new(role, config);
    cfg.pulses = args.pulses;
    cfg.seed = args.seed;
    cfg.time_limit = args.max_seconds.map(Duration::from_secs_f64);
    cfg
}

fn json_sink(quiet: bool) -> Option<FrameSink> {
    (!quiet).then(|| -> FrameSink {
        Box::new(|stats| {
            let mut out = io::stdout().lock();
            let _ = writeln!(out, "{}", stats.to_json_line());
            let _ = out.flush();
        })
    })
}

fn summary_line(r: &NodeReport) -> String {
    format!(
        "{}: {} slots, {} sifted bits, {} blocks ({} discarded), {} frames, {} secure bits, {:.1} s",
        r.role,
        r.slots,
        r.sifted_bits,
        r.blocks,
        r.failed_blocks,
        r.frames.len(),
        r.secure_bits,
        r.elapsed.as_secs_f64()
    )
}

fn run(args: RunArgs) -> Result<(), String> {
    let config = match &args.config {
        Some(path) => Config::load(path).map_err(|e| e.to_string())?,
        None => Config::default(),
    };
    let mut cfg = node_config(&args, &config, args.role);
    cfg.stats = args.stats.clone();
    cfg.keys = args.keys.clone();
    if args.dump_events.is_some() && args.role == Role::Alice && !args.loopback {
        return Err("--dump-events applies to Bob, who holds the detections".into());
    }
    if args.loopback {
        let other = match args.role {
            Role::Alice => Role::Bob,
            Role::Bob => Role::Alice,
        };
        let mut peer = node_config(&args, &config, other);
        peer.keys = args.peer_keys.clone();
        let (mut alice, mut bob) = match args.role {
            Role::Alice => (cfg, peer),
            Role::Bob => (peer, cfg),
        };
        bob.dump_events = args.dump_events.clone();
        // Only the selected node reports on stdout.
        let (sink_a, sink_b) = match args.role {
            Role::Alice => (json_sink(args.quiet), None),
            Role::Bob => (None, json_sink(args.quiet)),
        };
        alice.time_limit = None;
        let (ra, rb) = run_loopback(&alice, &bob, sink_a, sink_b).map_err(|e| e.to_string())?;
        eprintln!("{}", summary_line(&ra));
        eprintln!("{}", summary_line(&rb));
        if ra.key_digest != rb.key_digest {
            return Err("key stores differ".into());
        }
        return Ok(());
    }
    cfg.dump_events = args.dump_events.clone();
    let link = match (&args.listen, &args.connect) {
        (Some(addr), None) => Link::listen(addr.as_str()),
        (None, Some(addr)) => Link::connect(addr.as_str(), Duration::from_secs(30)),
        _ => return Err("one of --listen, --connect or --loopback is required".into()),
    }
    .map_err(|e| format!("link: {e}"))?;
    let family = Arc::new(CodeFamily::new(cfg.ec.family).map_err(|e| e.to_string())?);
    let report = run_node(&cfg, link, family, json_sink(args.quiet)).map_err(|e| e.to_string())?;
    eprintln!("{}", summary_line(&report));
    Ok(())
}

fn bench(args: BenchArgs) -> Result<(), String> {
    let result = match args.stage {
        Stage::Sift => bench::sift_throughput(args.size.unwrap_or(1 << 22), 8),
        Stage::Ec => bench::ec_throughput(args.size.unwrap_or(4), args.qber),
        Stage::Pa => {
            let n = args.size.unwrap_or(1 << 24);
            if n > qkd_core::pa::MAX_INPUT_BITS {
                return Err(format!(
                    "pa input is limited to {} bits",
                    qkd_core::pa::MAX_INPUT_BITS
                ));
            }
            bench::pa_throughput(n)
        }
    };
    println!("{}", result.line());
    Ok(())
}

fn report(csv: PathBuf) -> Result<(), String> {
    let rows = read_stats(&csv).map_err(|e| format!("{}: {e}", csv.display()))?;
    summarize(&rows)
        .write_report(io::stdout().lock())
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Bench(args) => bench(args),
        Command::Report { csv } => report(csv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qkd-pipeline: {e}");
            ExitCode::FAILURE
        }
    }
}
