//! `tacit`: run the coordination server, a protocol gateway, or the device
//! simulator, and talk to a running server.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use reqwest::StatusCode;
use serde_json::{json, Value as Json};

use tacit_core::devsim::{run_script, spawn_world, ScenarioSpec, WorldOptions};
use tacit_core::dsl::{self, CoordinationLogic, Expr};
use tacit_core::facade::{self, Config};
use tacit_core::gateway::{spawn_gateway, GatewayConfig};
use tacit_core::runtime::{default_vocabulary, Tables, Value};

const EXIT_INVALID: u8 = 1;
const EXIT_TRANSPORT: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(name = "tacit", version, about = "Device-independent service coordination")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the coordination server.
    Server {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a protocol gateway for native devices.
    Gateway {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run simulated devices (and their gateways) from a scenario file.
    Sim {
        #[arg(long)]
        scenario: PathBuf,
        /// Server to register devices with and send events to.
        #[arg(long)]
        server: Option<String>,
        /// Serve the steering API (`/sim/...`) on this address.
        #[arg(long)]
        controller: Option<String>,
        /// Advance the group every `tick_ms`.
        #[arg(long)]
        auto_tick: bool,
        /// Play the scenario's script against `--server`, then exit.
        #[arg(long, requires = "server")]
        script: bool,
    },
    /// Check coordination logic files; exit 0 iff none has errors.
    Validate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Lookup tables; without it, table function names are not checked.
        #[arg(long)]
        tables: Option<PathBuf>,
    },
    /// Upload a logic file (`.tcl`) or device descriptors (JSON object or array).
    Register {
        #[arg(long)]
        server: String,
        file: PathBuf,
    },
    /// Start a session and print its id.
    Request {
        #[arg(long)]
        server: String,
        #[arg(long)]
        logic: String,
        /// `key=value`; values that parse as numbers are sent as numbers.
        #[arg(long = "param", value_parser = parse_param)]
        params: Vec<(String, String)>,
        #[arg(long)]
        user_zone: String,
        #[arg(long, allow_negative_numbers = true)]
        user_x: f64,
        #[arg(long, allow_negative_numbers = true)]
        user_y: f64,
    },
    /// Print a session's log, one JSON entry per line.
    Logs {
        #[arg(long)]
        server: String,
        session: String,
        /// Keep printing entries as they are appended.
        #[arg(long)]
        follow: bool,
    },
}

fn parse_param(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected key=value, got `{s}`")),
    }
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn invalid(message: impl Into<String>) -> Self {
        Self { code: EXIT_INVALID, message: message.into() }
    }

    fn transport(e: reqwest::Error) -> Self {
        let mut message = e.to_string();
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            message.push_str(&format!(": {s}"));
            source = s.source();
        }
        Self { code: EXIT_TRANSPORT, message }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    match rt.block_on(run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("tacit: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

async fn run(command: Command) -> Outcome {
    match command {
        Command::Server { config } => server(&config).await,
        Command::Gateway { config } => gateway(&config).await,
        Command::Sim { scenario, server, controller, auto_tick, script } => {
            sim(&scenario, server, controller, auto_tick, script).await
        }
        Command::Validate { files, tables } => validate(&files, tables.as_deref()),
        Command::Register { server, file } => register(&server, &file).await,
        Command::Request { server, logic, params, user_zone, user_x, user_y } => {
            request(&server, &logic, params, &user_zone, user_x, user_y).await
        }
        Command::Logs { server, session, follow } => logs(&server, &session, follow).await,
    }
}

async fn ctrl_c() {
    let _ = tokio::signal::ctrl_c().await;
}

async fn server(path: &Path) -> Outcome {
    let config = Config::load(path).map_err(|e| Failure::invalid(e.to_string()))?;
    let handle = facade::serve(&config).await.map_err(|e| Failure::invalid(e.to_string()))?;
    eprintln!("tacit server listening on {}", handle.url());
    ctrl_c().await;
    handle.shutdown().await;
    Ok(())
}

async fn gateway(path: &Path) -> Outcome {
    let config = GatewayConfig::load(path).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
    let id = config.gateway_id.clone();
    let handle = spawn_gateway(config, None)
        .await
        .map_err(|e| Failure::invalid(format!("BIND_FAILED: {e}")))?;
    eprintln!("gateway {id} listening on {}", handle.url());
    ctrl_c().await;
    handle.shutdown().await;
    Ok(())
}

async fn sim(path: &Path, server: Option<String>, controller: Option<String>, auto_tick: bool, script: bool) -> Outcome {
    let spec = ScenarioSpec::load(path).map_err(|e| Failure::invalid(e.to_string()))?;
    let world = spawn_world(
        &spec,
        WorldOptions {
            server_url: server.clone(),
            auto_tick,
            controller_listen: controller,
            ..WorldOptions::default()
        },
    )
    .await
    .map_err(|e| Failure::invalid(e.to_string()))?;
    for d in world.descriptors() {
        eprintln!("device {} ({}) at {}", d.id, d.access.kind, d.location.zone);
    }
    if let Some(url) = world.controller_url() {
        eprintln!("controller on {url}");
    }
    match (script, server) {
        (true, Some(server)) => {
            let sessions = run_script(&world, &server, 2).await.map_err(|e| Failure::invalid(e.to_string()))?;
            for s in sessions {
                println!("{s}");
            }
        }
        _ => ctrl_c().await,
    }
    world.shutdown().await;
    Ok(())
}

fn call_names(e: &Expr, out: &mut BTreeSet<String>) {
    if let Expr::Call { function, args } = e {
        out.insert(function.clone());
        args.iter().for_each(|a| call_names(a, out));
    }
}

fn functions_used(logic: &CoordinationLogic) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for h in &logic.handlers {
        if let Some(g) = &h.guard {
            call_names(&g.lhs, &mut out);
            call_names(&g.rhs, &mut out);
        }
        for s in &h.body {
            s.args.iter().for_each(|a| call_names(a, &mut out));
        }
    }
    out
}

fn validate(files: &[PathBuf], tables: Option<&Path>) -> Outcome {
    let tables = match tables {
        Some(p) => Some(
            Tables::load(p)
                .map_err(|e| Failure::invalid(format!("{}: {e}", p.display())))?
                .function_names(),
        ),
        None => None,
    };
    let vocabulary = default_vocabulary();
    let mut failed = 0;
    for file in files {
        let name = file.display();
        let source = match std::fs::read(file) {
            Ok(s) => s,
            Err(e) => {
                println!("{name}: {e}");
                failed += 1;
                continue;
            }
        };
        let logic = match dsl::parse_bytes(&source) {
            Ok(l) => l,
            Err(e) => {
                println!("{name}:{}:{}: error: {}", e.line, e.column, e.message);
                failed += 1;
                continue;
            }
        };
        let known = tables.clone().unwrap_or_else(|| functions_used(&logic));
        let report = dsl::validate(&logic, &vocabulary, &known);
        for f in &report.findings {
            println!("{name}:{f}");
        }
        if report.has_errors() {
            failed += 1;
        } else {
            println!("{name}: ok ({})", logic.name);
        }
    }
    if failed > 0 {
        return Err(Failure::invalid(format!("{failed} of {} file(s) invalid", files.len())));
    }
    Ok(())
}

fn client() -> reqwest::Client {
    reqwest::Client::builder().no_proxy().build().expect("http client")
}

fn endpoint(server: &str, path: &str) -> String {
    format!("{}{path}", server.trim_end_matches('/'))
}

/// Prints the body of a response; non-2xx bodies go to stderr and fail.
async fn finish(response: reqwest::Response) -> Result<Json, Failure> {
    let status = response.status();
    let text = response.text().await.map_err(Failure::transport)?;
    let body: Json = serde_json::from_str(&text).unwrap_or(Json::String(text));
    if status.is_success() {
        Ok(body)
    } else {
        Err(Failure::invalid(format!("HTTP {status}: {body}")))
    }
}

async fn register(server: &str, file: &Path) -> Outcome {
    let text = std::fs::read_to_string(file).map_err(|e| Failure::invalid(format!("{}: {e}", file.display())))?;
    let http = client();
    if file.extension().is_some_and(|e| e == "tcl") {
        let r = http
            .post(endpoint(server, "/logics"))
            .header("content-type", "text/plain; charset=utf-8")
            .body(text)
            .send()
            .await
            .map_err(Failure::transport)?;
        let body = finish(r).await?;
        println!("{body}");
        return Ok(());
    }
    let doc: Json = serde_json::from_str(&text).map_err(|e| Failure::invalid(format!("{}: {e}", file.display())))?;
    let descriptors = match doc {
        Json::Array(items) => items,
        other => vec![other],
    };
    for d in descriptors {
        let r = http.post(endpoint(server, "/devices")).json(&d).send().await.map_err(Failure::transport)?;
        println!("{}", finish(r).await?);
    }
    Ok(())
}

fn param_value(raw: &str) -> Value {
    match raw.parse::<f64>() {
        Ok(n) if n.is_finite() => Value::Num(n),
        _ => Value::from(raw),
    }
}

async fn request(server: &str, logic: &str, params: Vec<(String, String)>, zone: &str, x: f64, y: f64) -> Outcome {
    let params: BTreeMap<String, Value> = params.into_iter().map(|(k, v)| (k, param_value(&v))).collect();
    let body = json!({
        "logic": logic,
        "params": params,
        "user": {"zone": zone, "x": x, "y": y},
    });
    let r = client()
        .post(endpoint(server, "/sessions"))
        .json(&body)
        .send()
        .await
        .map_err(Failure::transport)?;
    if r.status() != StatusCode::CREATED {
        finish(r).await?;
        return Err(Failure::invalid("session not created"));
    }
    let created = finish(r).await?;
    println!("{}", created["session_id"].as_str().unwrap_or_default());
    Ok(())
}

async fn logs(server: &str, session: &str, follow: bool) -> Outcome {
    let http = client();
    if !follow {
        let r = http
            .get(endpoint(server, &format!("/sessions/{session}")))
            .send()
            .await
            .map_err(Failure::transport)?;
        let view = finish(r).await?;
        for entry in view["log"].as_array().into_iter().flatten() {
            println!("{entry}");
        }
        return Ok(());
    }
    let mut r = http
        .get(endpoint(server, &format!("/sessions/{session}/stream")))
        .send()
        .await
        .map_err(Failure::transport)?;
    if !r.status().is_success() {
        finish(r).await?;
        return Ok(());
    }
    let mut buffer = String::new();
    while let Some(chunk) = r.chunk().await.map_err(Failure::transport)? {
        buffer.push_str(&String::from_utf8_lossy(&chunk));
        while let Some(end) = buffer.find('\n') {
            let line: String = buffer.drain(..=end).collect();
            if let Some(data) = line.trim_end().strip_prefix("data:") {
                println!("{}", data.trim_start());
            }
        }
    }
    Ok(())
}
