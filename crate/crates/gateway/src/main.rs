use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use serde_json::json;
use skylane::engine::{bench, run_scenario};
use skylane::Scenario;
use skylane_gateway::{serve, ApiRequest, Gateway, GatewayConfig, Role, TOKEN_ENV};

/// Run, benchmark or serve a skylane scenario.
#[derive(Debug, Parser)]
#[command(name = "skylane", version)]
struct Cli {
    /// Scenario JSON file.
    scenario: Option<PathBuf>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after this many ticks.
    #[arg(long)]
    until: Option<u64>,
    /// Run to completion without a gateway (the default without --serve).
    #[arg(long, conflicts_with = "serve")]
    headless: bool,
    /// Serve the gateway API on this address.
    #[arg(long, value_name = "ADDR")]
    serve: Option<SocketAddr>,
    /// Performance mode: run the scenario, then the whole fleet at once, and print ticks/sec.
    #[arg(long, conflicts_with_all = ["serve", "validate"])]
    bench: bool,
    /// Ticks flown in the full-fleet part of --bench.
    #[arg(long, default_value_t = 900)]
    saturation_ticks: u64,
    /// Log directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Validate the scenario and exit.
    #[arg(long)]
    validate: bool,
    /// With --serve: ticks per wall-clock second, 0 for as fast as possible.
    #[arg(long, default_value_t = 30.0)]
    rate: f64,
    /// With --serve: roles served by attached connections (authority, traffic).
    #[arg(long, value_delimiter = ',')]
    external: Vec<Role>,
    /// With --serve: seconds to wait for an external role each tick.
    #[arg(long, default_value_t = 5.0)]
    ack_timeout: f64,
    /// With --serve: API token.
    #[arg(long, env = TOKEN_ENV, hide_env_values = true)]
    token: Option<String>,
}

fn load(path: &PathBuf, seed: Option<u64>) -> Result<Scenario, Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    let mut s = Scenario::from_json(&text).map_err(|e| vec![e.to_string()])?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let v = s.violations();
    if v.is_empty() {
        Ok(s)
    } else {
        Err(v)
    }
}

fn invalid(violations: &[String]) -> ExitCode {
    for v in violations {
        eprintln!("{v}");
    }
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(addr) = cli.serve {
        return serve_mode(cli, addr);
    }
    let Some(path) = &cli.scenario else {
        eprintln!("a scenario file is required unless --serve is given");
        return ExitCode::from(2);
    };
    let scenario = match load(path, cli.seed) {
        Ok(s) => s,
        Err(v) => return invalid(&v),
    };
    if cli.validate {
        println!("{}: valid", scenario.map.name);
        return ExitCode::SUCCESS;
    }
    if cli.bench {
        return match bench(scenario, cli.saturation_ticks, cli.out.clone()) {
            Ok(b) => {
                println!(
                    "run: {} ticks in {:.2} s, {:.1} ticks/sec, peak {} active, {}/{} completed, {} collisions",
                    b.run.ticks, b.run.wall_seconds, b.run.ticks_per_second, b.run.peak_active, b.completed, b.demands, b.collisions
                );
                println!(
                    "saturation: {} ticks with {} active, {:.1} ticks/sec",
                    b.saturation.ticks, b.saturation.peak_active, b.saturation.ticks_per_second
                );
                if let Some(dir) = &cli.out {
                    let doc = serde_json::to_string_pretty(&b).expect("bench serializes");
                    if let Err(e) = std::fs::write(dir.join("bench.json"), doc) {
                        eprintln!("writing bench.json: {e}");
                        return ExitCode::FAILURE;
                    }
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("bench failed: {e}");
                ExitCode::FAILURE
            }
        };
    }
    match run_scenario(scenario, cli.out.clone(), cli.until) {
        Ok(r) => {
            let summary = json!({
                "scenario": r.scenario,
                "seed": r.seed,
                "ticks": r.ticks,
                "end_reason": r.end_reason,
                "demands": r.demands,
                "completed": r.completed,
                "aborted": r.aborted,
                "unfinished": r.unfinished,
                "collisions": r.collisions.len(),
                "anomalies": r.anomalies.len(),
                "report_sha256": r.digests.get("report.json"),
            });
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("run failed: {e}");
            ExitCode::FAILURE
        }
    }
}

fn serve_mode(cli: Cli, addr: SocketAddr) -> ExitCode {
    let Some(token) = cli.token.clone().filter(|t| !t.is_empty()) else {
        eprintln!("--serve needs a token in {TOKEN_ENV} or --token");
        return ExitCode::from(2);
    };
    if cli.validate {
        eprintln!("--validate cannot be combined with --serve");
        return ExitCode::from(2);
    }
    let mut config = GatewayConfig::new(token.clone());
    config.tick_rate = (cli.rate > 0.0).then_some(cli.rate);
    config.out_dir = cli.out.clone();
    config.external = cli.external.clone();
    config.ack_timeout = Duration::from_secs_f64(cli.ack_timeout.max(0.001));
    let gw = Gateway::start(config);
    if let Some(path) = &cli.scenario {
        if let Err(v) = load(path, cli.seed) {
            return invalid(&v);
        }
        let req = ApiRequest::new(0, "scenario.load", json!({"path": path, "seed": cli.seed})).with_token(&token);
        let resp = gw.call_blocking(req);
        if let Some(e) = resp.error {
            eprintln!("{}", e.message);
            return ExitCode::from(2);
        }
    }
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("runtime: {e}");
            return ExitCode::FAILURE;
        }
    };
    let result = rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("serving on {}", listener.local_addr()?);
        tokio::select! {
            r = serve(listener, gw) => r,
            _ = tokio::signal::ctrl_c() => Ok(()),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("serve failed: {e}");
            ExitCode::FAILURE
        }
    }
}
