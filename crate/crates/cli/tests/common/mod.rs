#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use qmw_core::clock::ClockMode;
use qmw_core::config::ConfigDocument;
use qmw_daemon::service::DEFAULT_CONFIG;
use qmw_daemon::{spawn, DaemonHandle, Settings};
use serde_json::Value;

pub const ADMIN: &str = "cli-admin";

pub fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets")
}

pub fn daemon_with(config: &str, clock: ClockMode) -> DaemonHandle {
    let mut s = Settings::new(ConfigDocument::parse(config, std::iter::empty()).unwrap());
    s.admin_token = Some(ADMIN.into());
    s.clock = clock;
    spawn(s, "127.0.0.1:0").unwrap()
}

pub fn daemon() -> DaemonHandle {
    daemon_with(DEFAULT_CONFIG, ClockMode::Virtual)
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.stdout).unwrap_or_else(|e| panic!("{e}: {:?}", self.stdout))
    }
}

/// A CLI user with their own settings file.
pub struct User {
    pub dir: tempfile::TempDir,
    pub url: String,
}

impl User {
    pub fn new(url: &str) -> Self {
        User {
            dir: tempfile::tempdir().unwrap(),
            url: url.to_string(),
        }
    }

    pub fn config_path(&self) -> PathBuf {
        self.dir.path().join("client.json")
    }

    pub fn run(&self, args: &[&str]) -> Run {
        self.run_env(args, &[])
    }

    pub fn run_env(&self, args: &[&str], env: &[(&str, &str)]) -> Run {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_qmw"));
        for k in ["QMW_TOKEN", "QMW_QPU", "QMW_URL", "QMW_USER", "QMW_PARTITION", "QMW_CONFIG", "QMW_LISTEN_ADDR"] {
            cmd.env_remove(k);
        }
        cmd.env("QMW_CLIENT_CONFIG", self.config_path()).env("QMW_URL", &self.url);
        for (k, v) in env {
            cmd.env(k, v);
        }
        let out = cmd.args(args).output().unwrap();
        Run {
            code: out.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        }
    }
}
