use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use wsn_core::broker::{Broker, BrokerConfig};
use wsn_core::fleet::{self, FleetConfig, FleetOutcome};
use wsn_core::gateway;
use wsn_core::persistence::{LogConfig, MessageStore};
use wsn_core::poll::{Telemetry, CSV_HEADER};
use wsn_core::server::{wall_clock_ms, MqttServer};

#[derive(Parser)]
#[command(name = "wsn", version, about = "MQTT sensor-network toolkit: broker, simulated fleets, REST poller")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the broker.
    Broker {
        #[command(subcommand)]
        command: BrokerCommand,
    },
    /// Launch simulated sensor nodes.
    Fleet {
        #[command(subcommand)]
        command: FleetCommand,
    },
    /// Poll the REST gateway for a topic's latest reading.
    Poll(PollArgs),
}

#[derive(Subcommand)]
enum BrokerCommand {
    /// Serve MQTT and the REST gateway until interrupted.
    Serve(ServeArgs),
}

#[derive(clap::Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:1883")]
    mqtt_addr: String,
    #[arg(long, default_value = "127.0.0.1:8080")]
    http_addr: String,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    /// Print a console line for every Nth publish (0 = never).
    #[arg(long, default_value_t = 0)]
    log_every: u64,
}

#[derive(Subcommand)]
enum FleetCommand {
    /// Run a fleet for a fixed duration and print a report.
    Run(FleetArgs),
}

#[derive(clap::Args)]
struct FleetArgs {
    #[arg(long)]
    nodes: Option<usize>,
    /// Sample interval in seconds.
    #[arg(long)]
    interval: Option<f64>,
    /// Run length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// TOML fleet description; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    kill_fraction: Option<f64>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
    /// Connect to a broker over TCP (wall clock) instead of the in-process
    /// simulation (virtual clock).
    #[arg(long)]
    broker: Option<String>,
    /// Persist the in-process broker's log here.
    #[arg(long, conflicts_with = "broker")]
    data_dir: Option<PathBuf>,
    /// Write one serial-console trace file per node.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
}

#[derive(clap::Args)]
struct PollArgs {
    /// Gateway base URL.
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    url: String,
    #[arg(long)]
    topic: String,
    /// Seconds between rounds.
    #[arg(long, default_value_t = 10.0)]
    interval: f64,
    /// Stop after this many rounds.
    #[arg(long)]
    count: Option<u64>,
    /// Append rows to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Connectivity(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Connectivity(_) => 2,
            Failure::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Connectivity(m) | Failure::Internal(m) => m,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WSN_MQTT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(3);
        }
    };
    let result = runtime.block_on(async {
        match cli.command {
            Command::Broker {
                command: BrokerCommand::Serve(args),
            } => serve(args).await,
            Command::Fleet {
                command: FleetCommand::Run(args),
            } => run_fleet(args).await,
            Command::Poll(args) => poll(args).await,
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

/// Registers SIGINT/SIGTERM handlers now and returns a future that
/// resolves on the first of them.
fn shutdown_signal() -> std::io::Result<impl std::future::Future<Output = ()>> {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut int = signal(SignalKind::interrupt())?;
        let mut term = signal(SignalKind::terminate())?;
        Ok(async move {
            tokio::select! {
                _ = int.recv() => {}
                _ = term.recv() => {}
            }
        })
    }
    #[cfg(not(unix))]
    {
        Ok(async {
            let _ = tokio::signal::ctrl_c().await;
        })
    }
}

async fn serve(args: ServeArgs) -> Result<(), Failure> {
    let store = MessageStore::open(&args.data_dir, LogConfig::default())
        .map_err(|e| Failure::Internal(format!("data dir {}: {e}", args.data_dir.display())))?;
    let store = Arc::new(store);
    let config = BrokerConfig {
        log_every: args.log_every,
        ..Default::default()
    };
    let server = MqttServer::bind(&args.mqtt_addr, Broker::new(config, store.clone()))
        .await
        .map_err(|e| Failure::Connectivity(format!("bind {}: {e}", args.mqtt_addr)))?
        .echo_console(true);
    let http = tokio::net::TcpListener::bind(&args.http_addr)
        .await
        .map_err(|e| Failure::Connectivity(format!("bind {}: {e}", args.http_addr)))?;
    let stop = shutdown_signal().map_err(|e| Failure::Internal(format!("installing signal handlers: {e}")))?;
    let mqtt_addr = server.local_addr().map_err(|e| Failure::Internal(e.to_string()))?;
    let http_addr = http.local_addr().map_err(|e| Failure::Internal(e.to_string()))?;
    println!("mqtt listening on {mqtt_addr}");
    println!("http listening on {http_addr}");

    let (stop_http, http_stopped) = tokio::sync::oneshot::channel::<()>();
    let app = gateway::router(store.clone());
    let http_task = tokio::spawn(async move {
        axum::serve(http, app)
            .with_graceful_shutdown(async {
                let _ = http_stopped.await;
            })
            .await
    });

    let broker = server.run(stop).await;
    let _ = stop_http.send(());
    if let Ok(Err(e)) = http_task.await {
        log::warn!("http server: {e}");
    }
    broker
        .store()
        .flush()
        .map_err(|e| Failure::Internal(format!("flushing log: {e}")))?;
    let stats = broker.stats();
    println!(
        "shutdown: {} publishes logged, {} deliveries, {} wills",
        stats.publishes_received, stats.deliveries, stats.wills_published
    );
    Ok(())
}

fn fleet_config(args: &FleetArgs) -> Result<FleetConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            FleetConfig::from_toml(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => FleetConfig::default(),
    };
    if let Some(n) = args.nodes {
        cfg.nodes = n;
    }
    if let Some(s) = args.interval {
        cfg.interval_s = s;
    }
    if let Some(s) = args.duration {
        cfg.duration_s = s;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(p) = args.kill_fraction {
        cfg.kill_fraction = p;
    }
    if args.trace_dir.is_some() {
        cfg.trace = true;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if cfg.interval_s.is_nan() || cfg.interval_s <= 0.0 {
        return Err(Failure::Usage("interval must be positive".into()));
    }
    Ok(cfg)
}

fn write_traces(dir: &Path, outcome: &FleetOutcome) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for (id, lines) in &outcome.traces {
        let mut body = lines.join("\n");
        body.push('\n');
        fs::write(dir.join(format!("{id}.log")), body)?;
    }
    Ok(())
}

async fn run_fleet(args: FleetArgs) -> Result<(), Failure> {
    let cfg = fleet_config(&args)?;
    let outcome = match &args.broker {
        Some(addr) => fleet::run_tcp(&cfg, addr).await.map_err(|e| match e {
            fleet::FleetError::Transport(m) => Failure::Connectivity(m),
            other => Failure::Internal(other.to_string()),
        })?,
        None => {
            let store = match &args.data_dir {
                Some(dir) => MessageStore::open(dir, LogConfig::default())
                    .map_err(|e| Failure::Internal(format!("data dir {}: {e}", dir.display())))?,
                None => MessageStore::in_memory(),
            };
            let store = Arc::new(store);
            let cfg = cfg.clone();
            let outcome = tokio::task::spawn_blocking({
                let store = store.clone();
                move || fleet::run_in_memory(&cfg, store)
            })
            .await
            .map_err(|e| Failure::Internal(e.to_string()))?
            .map_err(|e| Failure::Internal(e.to_string()))?;
            store
                .flush()
                .map_err(|e| Failure::Internal(format!("flushing log: {e}")))?;
            outcome
        }
    };
    if let Some(dir) = &args.trace_dir {
        write_traces(dir, &outcome).map_err(|e| Failure::Internal(format!("{}: {e}", dir.display())))?;
    }
    if args.json {
        let json = serde_json::to_string_pretty(&outcome.report).map_err(|e| Failure::Internal(e.to_string()))?;
        println!("{json}");
    } else {
        print!("{}", outcome.report);
    }
    Ok(())
}

fn latest_url(base: &str, topic: &str) -> Result<reqwest::Url, Failure> {
    let mut url = reqwest::Url::parse(base).map_err(|e| Failure::Usage(format!("--url {base}: {e}")))?;
    url.path_segments_mut()
        .map_err(|_| Failure::Usage(format!("--url {base} cannot take a path")))?
        .pop_if_empty()
        .extend(["api", "topics", topic, "latest"]);
    Ok(url)
}

async fn fetch_latest(client: &reqwest::Client, url: &reqwest::Url) -> Result<Telemetry, String> {
    let resp = client.get(url.clone()).send().await.map_err(|e| e.to_string())?;
    let status = resp.status();
    let body = resp.bytes().await.map_err(|e| e.to_string())?;
    if !status.is_success() {
        return Err(format!("{status}: {}", String::from_utf8_lossy(&body)));
    }
    Telemetry::parse(&body).map_err(|e| e.to_string())
}

async fn poll(args: PollArgs) -> Result<(), Failure> {
    if args.interval.is_nan() || args.interval < 0.0 {
        return Err(Failure::Usage("interval must not be negative".into()));
    }
    let url = latest_url(&args.url, &args.topic)?;
    let mut csv = match &args.csv {
        Some(path) => {
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Failure::Internal(format!("{}: {e}", path.display())))?;
            let empty = file.metadata().map(|m| m.len() == 0).unwrap_or(true);
            if empty {
                writeln!(file, "{CSV_HEADER}").map_err(|e| Failure::Internal(e.to_string()))?;
            }
            Some(file)
        }
        None => None,
    };
    let client = reqwest::Client::builder()
        .timeout(Duration::from_secs(5))
        .build()
        .map_err(|e| Failure::Internal(e.to_string()))?;
    let mut round = 0u64;
    loop {
        round += 1;
        match fetch_latest(&client, &url).await {
            Ok(t) => {
                print!("{}", t.render_block());
                if let Some(file) = csv.as_mut() {
                    writeln!(file, "{}", t.csv_row(wall_clock_ms())).map_err(|e| Failure::Internal(e.to_string()))?;
                }
            }
            Err(e) => eprintln!("warning: {url}: {e}"),
        }
        let _ = std::io::stdout().flush();
        if args.count.is_some_and(|c| round >= c) {
            return Ok(());
        }
        tokio::time::sleep(Duration::from_secs_f64(args.interval)).await;
    }
}
