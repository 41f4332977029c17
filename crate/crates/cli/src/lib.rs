//! `qmw`: command-line client for the qmw daemon.
//!
//! Machine-readable output goes to stdout as JSON, diagnostics to stderr.
//! The exit code depends only on the kind of outcome, see [`exit`].

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand, ValueEnum};
use qmw_core::model::{validate_program, DeviceTarget, PulseProgram};
use qmw_core::scheduler::{simulate_workload, simulate_workload_traced, Policy, Scenario};
use qmw_daemon::service::{Settings, DEFAULT_LISTEN_ADDR};
use serde_json::{json, Value};

pub mod client;
pub mod profile;

use client::{Client, ClientError};
use profile::{ClientConfig, DEFAULT_PARTITION, DEFAULT_URL};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 1;
    pub const VALIDATION: i32 = 2;
    /// Connection failure, or the daemon refused: 401, 403, 404, 409, 5xx.
    pub const REFUSED: i32 = 3;
    /// Bad command line or unreadable input file.
    pub const USAGE: i32 = 4;
    pub const NOT_READY: i32 = 5;
    /// The job ended FAILED or CANCELLED.
    pub const JOB_UNSUCCESSFUL: i32 = 6;
}

/// Scenario shipped with the binary: classical-heavy optimisation loops
/// that leave the QPU idle between batches unless interleaved.
pub const PATTERN_B: &str = include_str!("../assets/pattern-b.json");
/// Program used to demonstrate that one file runs everywhere.
pub const EXAMPLE_PROGRAM: &str = include_str!("../assets/example-program.json");

#[derive(Debug, Parser)]
#[command(name = "qmw", version, about = "Submit pulse programs to emulators and QPUs through the qmw daemon")]
pub struct Cli {
    /// Daemon base URL.
    #[arg(long, global = true, env = "QMW_URL")]
    url: Option<String>,
    /// Session token; skips the cache and automatic session creation.
    #[arg(long, global = true, env = "QMW_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Neither read nor write the token cache.
    #[arg(long, global = true)]
    no_cache: bool,
    /// Client settings file.
    #[arg(long, global = true, env = "QMW_CLIENT_CONFIG")]
    client_config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct SessionArgs {
    /// User name for a new session.
    #[arg(long, env = "QMW_USER")]
    user: Option<String>,
    /// Partition for a new session; decides the priority class.
    #[arg(long, env = "QMW_PARTITION")]
    partition: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Submit a program file to a resource.
    Submit {
        program: PathBuf,
        /// Target resource.
        #[arg(long, env = "QMW_QPU")]
        qpu: Option<String>,
        /// Workload pattern: qc-heavy, cc-heavy, qc-balanced or none.
        #[arg(long)]
        hint: Option<String>,
        /// Overrides the shot count in the file (the file is not modified).
        #[arg(long)]
        shots: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        expected_qpu_seconds: Option<f64>,
        /// Classical time between batches, for cc-heavy jobs.
        #[arg(long)]
        expected_cc_seconds: Option<f64>,
        /// Block until the job finishes and print it.
        #[arg(long)]
        wait: bool,
        /// Give up waiting after this many seconds.
        #[arg(long, default_value_t = 600.0)]
        timeout: f64,
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Check a program against a resource's current calibration.
    Validate {
        program: PathBuf,
        #[arg(long, env = "QMW_QPU")]
        qpu: Option<String>,
        #[arg(long)]
        shots: Option<u64>,
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Show a job's state and queue position.
    Status { job_id: String },
    /// Print the counts of a completed job.
    Result { job_id: String },
    /// Cancel a job at its next batch boundary.
    Cancel { job_id: String },
    /// List resources with their current targets.
    Resources {
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Open a session and cache its token.
    Login {
        #[command(flatten)]
        session: SessionArgs,
    },
    /// Close the cached session.
    Logout,
    /// Run the daemon in the foreground.
    Serve {
        /// Daemon configuration file.
        #[arg(long, env = "QMW_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long, env = "QMW_LISTEN_ADDR", default_value = DEFAULT_LISTEN_ADDR)]
        addr: String,
    },
    /// Simulate a workload scenario on a virtual clock.
    Sim {
        /// Scenario file; the bundled pattern-B scenario when omitted.
        scenario: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SimPolicy::Interleave)]
        policy: SimPolicy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Include the batch-by-batch trace.
        #[arg(long)]
        trace: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SimPolicy {
    Interleave,
    Sequential,
    /// Run both and report the utilization gain.
    Compare,
}

/// A failed command: what to print and which code to exit with.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
    /// Printed to stdout as JSON, e.g. a validation report.
    pub detail: Option<Value>,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
            detail: None,
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        let message = e.to_string();
        match e {
            ClientError::Connection(_) => Failure::new(exit::REFUSED, message),
            ClientError::Status { status, body } => {
                let code = match status {
                    422 => exit::VALIDATION,
                    400 => exit::USAGE,
                    _ => exit::REFUSED,
                };
                let detail = (status == 422).then(|| body.get("report").cloned().unwrap_or(body));
                Failure {
                    code,
                    message,
                    detail,
                }
            }
        }
    }
}

type Outcome = Result<Value, Failure>;

struct Context {
    client: Client,
    config: ClientConfig,
    config_path: Option<PathBuf>,
    explicit_token: bool,
    no_cache: bool,
}

fn read_program(path: &Path) -> Result<(String, Value), Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::new(exit::USAGE, format!("{}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::new(exit::USAGE, format!("{}: not JSON: {e}", path.display())))?;
    Ok((text, value))
}

impl Context {
    fn new(cli: &Cli) -> Result<Self, Failure> {
        let config_path = cli.client_config.clone().or_else(profile::default_path);
        let config = match &config_path {
            Some(p) => ClientConfig::load(p).map_err(|e| Failure::new(exit::CONFIG, e))?,
            None => ClientConfig::default(),
        };
        let url = cli
            .url
            .clone()
            .or_else(|| config.daemon_url.clone())
            .unwrap_or_else(|| DEFAULT_URL.to_string());
        let mut client = Client::new(&url);
        let cached = (!cli.no_cache).then(|| config.sessions.get(client.base()).cloned()).flatten();
        client.set_token(cli.token.clone().or(cached));
        Ok(Context {
            client,
            config,
            config_path,
            explicit_token: cli.token.is_some(),
            no_cache: cli.no_cache,
        })
    }

    fn qpu(&self, flag: Option<String>) -> Result<String, Failure> {
        flag.or_else(|| self.config.default_qpu.clone())
            .ok_or_else(|| Failure::new(exit::USAGE, "no resource given: use --qpu, QMW_QPU or default_qpu"))
    }

    fn remember(&mut self, token: Option<&str>) {
        if self.no_cache || self.explicit_token {
            return;
        }
        let Some(path) = self.config_path.clone() else { return };
        let key = self.client.base().to_string();
        match token {
            Some(t) => self.config.sessions.insert(key, t.to_string()),
            None => self.config.sessions.remove(&key),
        };
        if let Err(e) = self.config.save(&path) {
            eprintln!("warning: cannot write {}: {e}", path.display());
        }
    }

    fn open_session(&mut self, args: &SessionArgs) -> Outcome {
        let user = args
            .user
            .clone()
            .or_else(|| self.config.user.clone())
            .or_else(|| std::env::var("USER").ok())
            .unwrap_or_else(|| "anonymous".into());
        let partition = args
            .partition
            .clone()
            .or_else(|| self.config.default_partition.clone())
            .unwrap_or_else(|| DEFAULT_PARTITION.into());
        let created = self
            .client
            .post("/v1/sessions", &json!({"user": user, "partition": partition}))?;
        let token = created["session_token"].as_str().unwrap_or_default().to_string();
        self.client.set_token(Some(token.clone()));
        self.remember(Some(&token));
        Ok(created)
    }

    /// Runs `call` with a session, opening one when none is known and
    /// replacing a cached one the daemon no longer accepts.
    fn with_session(&mut self, args: &SessionArgs, call: impl Fn(&Client) -> Result<Value, ClientError>) -> Outcome {
        if self.client_token_missing() {
            self.open_session(args)?;
            return Ok(call(&self.client)?);
        }
        match call(&self.client) {
            Err(ClientError::Status { status: 401, .. }) if !self.explicit_token => {
                self.remember(None);
                self.open_session(args)?;
                Ok(call(&self.client)?)
            }
            other => Ok(other?),
        }
    }

    fn client_token_missing(&self) -> bool {
        !self.explicit_token && self.cached_token().is_none()
    }

    fn cached_token(&self) -> Option<String> {
        (!self.no_cache)
            .then(|| self.config.sessions.get(self.client.base()).cloned())
            .flatten()
    }

    fn require_session(&self) -> Result<(), Failure> {
        if self.client_token_missing() {
            return Err(Failure::new(exit::REFUSED, "no session: run `qmw login` or set QMW_TOKEN"));
        }
        Ok(())
    }

    fn job(&self, id: &str) -> Outcome {
        self.require_session()?;
        Ok(self.client.get(&format!("/v1/jobs/{id}"))?)
    }
}

fn job_state(v: &Value) -> &str {
    v["state"].as_str().unwrap_or("")
}

fn unsuccessful(job: &Value) -> Option<Failure> {
    match job_state(job) {
        "FAILED" | "CANCELLED" => Some(Failure {
            code: exit::JOB_UNSUCCESSFUL,
            message: format!(
                "job {} is {}{}",
                job["job_id"].as_str().unwrap_or("?"),
                job_state(job),
                job["error"].as_str().map(|e| format!(": {e}")).unwrap_or_default()
            ),
            detail: Some(job.clone()),
        }),
        _ => None,
    }
}

fn summary(job: &Value) -> Value {
    json!({
        "job_id": job["job_id"],
        "state": job["state"],
        "resource_id": job["resource_id"],
        "priority": job["priority"],
        "hint": job["hint"],
        "shots": job["shots"],
        "queue_position": job["queue_position"],
        "batches_executed": job["metadata"]["batches_executed"],
        "error": job["error"],
    })
}

#[allow(clippy::too_many_arguments)]
fn submit(
    ctx: &mut Context,
    program: &Path,
    qpu: Option<String>,
    hint: Option<String>,
    shots: Option<u64>,
    seed: Option<u64>,
    expected: (Option<f64>, Option<f64>),
    wait: Option<f64>,
    session: &SessionArgs,
) -> Outcome {
    let (_, program) = read_program(program)?;
    let resource = ctx.qpu(qpu)?;
    let mut body = json!({"resource_id": resource, "program": program});
    let fields = [
        ("hint", hint.map(Value::from)),
        ("shots", shots.map(Value::from)),
        ("seed", seed.map(Value::from)),
        ("expected_qpu_seconds", expected.0.map(Value::from)),
        ("expected_cc_seconds", expected.1.map(Value::from)),
    ];
    for (k, v) in fields {
        if let Some(v) = v {
            body[k] = v;
        }
    }
    let job = ctx.with_session(session, |c| c.post("/v1/jobs", &body))?;
    let Some(timeout) = wait else {
        if let Some(f) = unsuccessful(&job) {
            return Err(f);
        }
        return Ok(summary(&job));
    };
    let id = job["job_id"].as_str().unwrap_or_default().to_string();
    let deadline = Instant::now() + Duration::from_secs_f64(timeout.max(0.0));
    let mut delay = Duration::from_millis(20);
    loop {
        let job = ctx.job(&id)?;
        match job_state(&job) {
            "COMPLETED" => return Ok(job),
            "FAILED" | "CANCELLED" => return Err(unsuccessful(&job).unwrap()),
            _ if Instant::now() >= deadline => {
                return Err(Failure {
                    code: exit::NOT_READY,
                    message: format!("job {id} still {} after {timeout} s", job_state(&job)),
                    detail: Some(summary(&job)),
                })
            }
            _ => {}
        }
        std::thread::sleep(delay);
        delay = (delay * 2).min(Duration::from_millis(500));
    }
}

fn validate(ctx: &mut Context, program: &Path, qpu: Option<String>, shots: Option<u64>, session: &SessionArgs) -> Outcome {
    let (_, value) = read_program(program)?;
    let resource = ctx.qpu(qpu)?;
    let mut program: PulseProgram = serde_json::from_value(value).map_err(|e| Failure {
        code: exit::VALIDATION,
        message: format!("{}: not a pulse program: {e}", program.display()),
        detail: None,
    })?;
    if let Some(s) = shots {
        program.shots = s;
    }
    if let Err(e) = program.check() {
        return Err(Failure {
            code: exit::VALIDATION,
            message: e.to_string(),
            detail: Some(json!({"valid": false, "violations": [], "error": e.to_string()})),
        });
    }
    let path = format!("/v1/resources/{resource}/target");
    let target = ctx.with_session(session, |c| c.get(&path))?;
    let target: DeviceTarget =
        serde_json::from_value(target).map_err(|e| Failure::new(exit::REFUSED, format!("unexpected target document: {e}")))?;
    let report = validate_program(&program, &target);
    let out = json!({
        "resource_id": resource,
        "calibration_timestamp": target.calibration_timestamp,
        "max_amplitude": target.max_amplitude,
        "valid": report.valid,
        "violations": report.violations,
    });
    if report.valid {
        Ok(out)
    } else {
        Err(Failure {
            code: exit::VALIDATION,
            message: format!("program is not valid on {resource}"),
            detail: Some(out),
        })
    }
}

fn result(ctx: &Context, id: &str) -> Outcome {
    let job = ctx.job(id)?;
    match job_state(&job) {
        "COMPLETED" => Ok(job["result"]["counts"].clone()),
        "FAILED" | "CANCELLED" => Err(unsuccessful(&job).unwrap()),
        other => Err(Failure::new(exit::NOT_READY, format!("job {id} is {other}, no result yet"))),
    }
}

fn serve(config: Option<PathBuf>, addr: &str) -> Outcome {
    let mut vars: BTreeMap<String, String> = std::env::vars().collect();
    if let Some(c) = config {
        vars.insert("QMW_CONFIG".into(), c.display().to_string());
    }
    let settings = Settings::from_vars(vars).map_err(|e| Failure::new(exit::CONFIG, e.to_string()))?;
    let _ = tracing_subscriber::fmt().with_writer(std::io::stderr).try_init();
    eprintln!("qmw daemon listening on {addr}");
    qmw_daemon::serve(settings, addr).map_err(|e| Failure::new(exit::CONFIG, e.to_string()))?;
    Ok(Value::Null)
}

fn sim(scenario: Option<&Path>, policy: SimPolicy, seed: u64, trace: bool) -> Outcome {
    let text = match scenario {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Failure::new(exit::USAGE, format!("{}: {e}", p.display())))?,
        None => PATTERN_B.to_string(),
    };
    let scenario = Scenario::from_json(&text).map_err(|e| Failure::new(exit::USAGE, e.to_string()))?;
    let run = |policy: Policy| -> Outcome {
        let v = if trace {
            serde_json::to_value(simulate_workload_traced(&scenario, policy, seed).map_err(|e| Failure::new(exit::USAGE, e.to_string()))?)
        } else {
            serde_json::to_value(simulate_workload(&scenario, policy, seed).map_err(|e| Failure::new(exit::USAGE, e.to_string()))?)
        };
        v.map_err(|e| Failure::new(exit::USAGE, e.to_string()))
    };
    match policy {
        SimPolicy::Interleave => run(Policy::Interleave),
        SimPolicy::Sequential => run(Policy::Sequential),
        SimPolicy::Compare => {
            let a = run(Policy::Interleave)?;
            let b = run(Policy::Sequential)?;
            let util = |v: &Value| {
                let r = if trace { &v["report"] } else { v };
                r["utilization"].as_f64().unwrap_or(0.0)
            };
            let gain = util(&a) - util(&b);
            Ok(json!({"interleave": a, "sequential": b, "utilization_gain": gain}))
        }
    }
}

fn dispatch(cli: Cli) -> Outcome {
    if let Command::Serve { config, addr } = cli.command {
        return serve(config, &addr);
    }
    if let Command::Sim {
        scenario,
        policy,
        seed,
        trace,
    } = &cli.command
    {
        return sim(scenario.as_deref(), *policy, *seed, *trace);
    }
    let mut ctx = Context::new(&cli)?;
    match cli.command {
        Command::Submit {
            program,
            qpu,
            hint,
            shots,
            seed,
            expected_qpu_seconds,
            expected_cc_seconds,
            wait,
            timeout,
            session,
        } => submit(
            &mut ctx,
            &program,
            qpu,
            hint,
            shots,
            seed,
            (expected_qpu_seconds, expected_cc_seconds),
            wait.then_some(timeout),
            &session,
        ),
        Command::Validate {
            program,
            qpu,
            shots,
            session,
        } => validate(&mut ctx, &program, qpu, shots, &session),
        Command::Status { job_id } => {
            let job = ctx.job(&job_id)?;
            match unsuccessful(&job) {
                Some(f) => Err(Failure {
                    detail: Some(summary(&job)),
                    ..f
                }),
                None => Ok(summary(&job)),
            }
        }
        Command::Result { job_id } => result(&ctx, &job_id),
        Command::Cancel { job_id } => {
            ctx.require_session()?;
            let job = ctx.client.delete(&format!("/v1/jobs/{job_id}"))?;
            Ok(summary(&job))
        }
        Command::Resources { session } => ctx.with_session(&session, |c| c.get("/v1/resources")),
        Command::Login { session } => {
            let mut created = ctx.open_session(&session)?;
            if !ctx.no_cache {
                created.as_object_mut().map(|o| o.remove("session_token"));
            }
            Ok(created)
        }
        Command::Logout => {
            ctx.require_session()?;
            let out = ctx.client.delete("/v1/sessions/current");
            ctx.remember(None);
            Ok(out?)
        }
        Command::Serve { .. } | Command::Sim { .. } => unreachable!("handled above"),
    }
}

/// Parses `args`, runs the command, prints its output and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    match dispatch(cli) {
        Ok(Value::Null) => exit::OK,
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            exit::OK
        }
        Err(f) => {
            if let Some(d) = &f.detail {
                println!("{}", serde_json::to_string_pretty(d).unwrap_or_default());
            }
            eprintln!("qmw: {}", f.message);
            f.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_assets_parse() {
        let p = PulseProgram::from_json(EXAMPLE_PROGRAM).unwrap();
        assert_eq!(p.atom_count(), 3);
        let s = Scenario::from_json(PATTERN_B).unwrap();
        assert_eq!(s.arrivals.len(), 4);
    }

    #[test]
    fn status_codes_map_to_exit_codes() {
        let code = |status| {
            Failure::from(ClientError::Status {
                status,
                body: json!({"message": "x"}),
            })
            .code
        };
        assert_eq!(code(401), exit::REFUSED);
        assert_eq!(code(403), exit::REFUSED);
        assert_eq!(code(404), exit::REFUSED);
        assert_eq!(code(409), exit::REFUSED);
        assert_eq!(code(422), exit::VALIDATION);
        assert_eq!(code(400), exit::USAGE);
        assert_eq!(Failure::from(ClientError::Connection("x".into())).code, exit::REFUSED);
    }

    #[test]
    fn usage_errors_exit_4() {
        assert_eq!(run(["qmw", "frobnicate"]), exit::USAGE);
        assert_eq!(run(["qmw", "sim", "--policy", "random"]), exit::USAGE);
        assert_eq!(run(["qmw", "--help"]), exit::OK);
    }

    #[test]
    fn sim_is_deterministic_and_interleaving_wins() {
        let a = sim(None, SimPolicy::Compare, 3, false).unwrap();
        let b = sim(None, SimPolicy::Compare, 3, false).unwrap();
        assert_eq!(a, b);
        assert!(a["utilization_gain"].as_f64().unwrap() > 0.15);
    }
}
