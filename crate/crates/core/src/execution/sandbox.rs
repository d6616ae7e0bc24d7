//! Isolated program-test execution.
//!
//! A program and its assertion lines are written into a fresh temporary
//! directory and run by the configured interpreter, either as a child process
//! under rlimits or inside a container runtime. Each run gets its own working
//! directory, which is removed afterwards.

use std::io::Read;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Verdict, VerdictMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SandboxBackend {
    #[default]
    Subprocess,
    Container,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    pub backend: SandboxBackend,
    /// Interpreter binary (looked up on PATH when relative).
    pub interpreter: String,
    pub interpreter_args: Vec<String>,
    /// Container runtime binary, for the container backend.
    pub container_runtime: String,
    pub container_image: String,
    pub wall_time_secs: f64,
    pub memory_mb: u64,
    pub workers: usize,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            backend: SandboxBackend::Subprocess,
            interpreter: "python3".into(),
            interpreter_args: vec!["-I".into(), "-B".into()],
            container_runtime: "docker".into(),
            container_image: "python:3.11-slim".into(),
            wall_time_secs: 10.0,
            memory_mb: 512,
            workers: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Limits {
    pub wall_time: Duration,
    pub memory_mb: u64,
}

impl Limits {
    pub fn new(wall_time: Duration, memory_mb: u64) -> Self {
        Self {
            wall_time,
            memory_mb,
        }
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("sandbox unavailable: {0}")]
    Unavailable(String),
    #[error("invalid limits: {0}")]
    InvalidLimits(String),
    #[error("sandbox i/o: {0}")]
    Io(#[from] std::io::Error),
}

struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        SlotGuard { slots: self }
    }
}

struct SlotGuard<'a> {
    slots: &'a Slots,
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.slots.free.lock().unwrap() += 1;
        self.slots.cv.notify_one();
    }
}

/// Program-test runner with a bounded worker pool.
pub struct Sandbox {
    config: SandboxConfig,
    slots: Slots,
}

impl std::fmt::Debug for Sandbox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sandbox")
            .field("config", &self.config)
            .finish()
    }
}

const SCRIPT_NAME: &str = "main.py";
const DETAIL_LIMIT: usize = 2000;

impl Sandbox {
    pub fn new(config: SandboxConfig) -> Self {
        let workers = config.workers.max(1);
        Self {
            config,
            slots: Slots {
                free: Mutex::new(workers),
                cv: Condvar::new(),
            },
        }
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    pub fn default_limits(&self) -> Limits {
        Limits::new(
            Duration::from_secs_f64(self.config.wall_time_secs),
            self.config.memory_mb,
        )
    }

    /// Run `program` followed by `tests`; success iff the process exits 0
    /// within the limits.
    pub fn run_tests(
        &self,
        program: &str,
        tests: &[String],
        limits: Limits,
    ) -> Result<Verdict, SandboxError> {
        if limits.wall_time.is_zero() || limits.memory_mb == 0 {
            return Err(SandboxError::InvalidLimits(format!("{limits:?}")));
        }
        let _slot = self.slots.acquire();
        let dir = tempfile::Builder::new().prefix("tracefix-sbx-").tempdir()?;
        let mut script = String::with_capacity(program.len() + 64);
        script.push_str(program);
        if !program.ends_with('\n') {
            script.push('\n');
        }
        script.push('\n');
        for t in tests {
            script.push_str(t);
            script.push('\n');
        }
        std::fs::write(dir.path().join(SCRIPT_NAME), &script)?;

        let child = match self.config.backend {
            SandboxBackend::Subprocess => self.spawn_subprocess(dir.path(), limits)?,
            SandboxBackend::Container => self.spawn_container(dir.path(), limits)?,
        };
        let outcome = wait_with_deadline(child, limits.wall_time)?;
        Ok(match outcome {
            Outcome::TimedOut => Verdict::failure("timeout", VerdictMode::Deterministic),
            Outcome::Exited { success: true, .. } => {
                Verdict::success("all tests passed", VerdictMode::Deterministic)
            }
            Outcome::Exited {
                success: false,
                stderr,
                stdout,
            } => {
                let failing = tests
                    .iter()
                    .find(|t| !t.trim().is_empty() && stderr.contains(t.trim()));
                let mut detail = match failing {
                    Some(t) => format!("failed: {}\n", t.trim()),
                    None => String::new(),
                };
                let log = if stderr.trim().is_empty() {
                    &stdout
                } else {
                    &stderr
                };
                detail.push_str(tail(log, DETAIL_LIMIT));
                Verdict::failure(detail.trim_end(), VerdictMode::Deterministic)
            }
        })
    }

    fn spawn_subprocess(&self, dir: &Path, limits: Limits) -> Result<Child, SandboxError> {
        let mut cmd = Command::new(&self.config.interpreter);
        cmd.args(&self.config.interpreter_args)
            .arg(SCRIPT_NAME)
            .current_dir(dir)
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_default())
            .env("HOME", dir)
            .env("TMPDIR", dir)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        apply_rlimits(&mut cmd, limits);
        cmd.spawn().map_err(|e| {
            SandboxError::Unavailable(format!("cannot start {:?}: {e}", self.config.interpreter))
        })
    }

    fn spawn_container(&self, dir: &Path, limits: Limits) -> Result<Child, SandboxError> {
        let mut cmd = Command::new(&self.config.container_runtime);
        cmd.arg("run")
            .arg("--rm")
            .arg("--network=none")
            .arg(format!("--memory={}m", limits.memory_mb))
            .arg("-v")
            .arg(format!("{}:/work", dir.display()))
            .arg("-w")
            .arg("/work")
            .arg(&self.config.container_image)
            .arg(&self.config.interpreter)
            .args(&self.config.interpreter_args)
            .arg(SCRIPT_NAME)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        cmd.spawn().map_err(|e| {
            SandboxError::Unavailable(format!(
                "cannot start container runtime {:?}: {e}",
                self.config.container_runtime
            ))
        })
    }
}

#[cfg(unix)]
fn apply_rlimits(cmd: &mut Command, limits: Limits) {
    use std::os::unix::process::CommandExt;
    let mem = limits.memory_mb.saturating_mul(1024 * 1024);
    let cpu = limits.wall_time.as_secs().saturating_add(1);
    // SAFETY: only async-signal-safe libc calls run between fork and exec.
    unsafe {
        cmd.pre_exec(move || {
            let as_limit = libc::rlimit {
                rlim_cur: mem as libc::rlim_t,
                rlim_max: mem as libc::rlim_t,
            };
            libc::setrlimit(libc::RLIMIT_AS, &as_limit);
            let cpu_limit = libc::rlimit {
                rlim_cur: cpu as libc::rlim_t,
                rlim_max: cpu as libc::rlim_t,
            };
            libc::setrlimit(libc::RLIMIT_CPU, &cpu_limit);
            let core = libc::rlimit {
                rlim_cur: 0,
                rlim_max: 0,
            };
            libc::setrlimit(libc::RLIMIT_CORE, &core);
            // own process group so a timeout can take down children too
            libc::setpgid(0, 0);
            Ok(())
        });
    }
}

#[cfg(not(unix))]
fn apply_rlimits(_cmd: &mut Command, _limits: Limits) {}

enum Outcome {
    TimedOut,
    Exited {
        success: bool,
        stdout: String,
        stderr: String,
    },
}

fn wait_with_deadline(mut child: Child, wall: Duration) -> Result<Outcome, SandboxError> {
    let mut out = child.stdout.take().expect("piped stdout");
    let mut err = child.stderr.take().expect("piped stderr");
    let out_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = out.read_to_end(&mut buf);
        buf
    });
    let err_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = err.read_to_end(&mut buf);
        buf
    });
    let deadline = Instant::now() + wall;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break Some(status);
        }
        if Instant::now() >= deadline {
            kill_tree(&mut child);
            let _ = child.wait();
            break None;
        }
        thread::sleep(Duration::from_millis(5));
    };
    let stdout = String::from_utf8_lossy(&out_reader.join().unwrap_or_default()).into_owned();
    let stderr = String::from_utf8_lossy(&err_reader.join().unwrap_or_default()).into_owned();
    Ok(match status {
        None => Outcome::TimedOut,
        Some(s) => Outcome::Exited {
            success: s.success(),
            stdout,
            stderr,
        },
    })
}

fn kill_tree(child: &mut Child) {
    #[cfg(unix)]
    {
        let pid = child.id() as libc::pid_t;
        // SAFETY: signalling the process group created in pre_exec.
        unsafe {
            libc::kill(-pid, libc::SIGKILL);
        }
    }
    let _ = child.kill();
}

fn tail(s: &str, limit: usize) -> &str {
    if s.len() <= limit {
        return s;
    }
    let mut start = s.len() - limit;
    while !s.is_char_boundary(start) {
        start += 1;
    }
    &s[start..]
}

/// Convenience wrapper around [`Sandbox::run_tests`].
pub fn run_sandboxed_tests(
    sandbox: &Sandbox,
    program: &str,
    tests: &[String],
    limits: Limits,
) -> Result<Verdict, SandboxError> {
    sandbox.run_tests(program, tests, limits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn python_available() -> bool {
        Command::new("python3")
            .arg("--version")
            .output()
            .map(|o| o.status.success())
            .unwrap_or(false)
    }

    fn limits(secs: u64) -> Limits {
        Limits::new(Duration::from_secs(secs), 256)
    }

    fn asserts(lines: &[&str]) -> Vec<String> {
        lines.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn passing_program() {
        if !python_available() {
            return;
        }
        let sb = Sandbox::new(SandboxConfig::default());
        let program = "def add(a, b):\n    return a + b\n";
        let v = sb
            .run_tests(
                program,
                &asserts(&[
                    "assert add(1, 2) == 3",
                    "assert add(0, 0) == 0",
                    "assert add(-1, 1) == 0",
                ]),
                limits(10),
            )
            .unwrap();
        assert!(v.success, "{}", v.detail);
    }

    #[test]
    fn failing_assert_is_named() {
        if !python_available() {
            return;
        }
        let sb = Sandbox::new(SandboxConfig::default());
        let program = "def last_index(xs):\n    return len(xs)\n";
        let v = sb
            .run_tests(
                program,
                &asserts(&[
                    "assert last_index([]) == 0",
                    "assert last_index([1, 2, 3]) == 2",
                ]),
                limits(10),
            )
            .unwrap();
        assert!(!v.success);
        assert!(
            v.detail.contains("assert last_index([1, 2, 3]) == 2"),
            "{}",
            v.detail
        );
    }

    #[test]
    fn infinite_loop_times_out() {
        if !python_available() {
            return;
        }
        let sb = Sandbox::new(SandboxConfig::default());
        let start = Instant::now();
        let v = sb
            .run_tests(
                "while True:\n    pass\n",
                &asserts(&["assert True"]),
                limits(2),
            )
            .unwrap();
        assert!(!v.success);
        assert_eq!(v.detail, "timeout");
        assert!(start.elapsed() < Duration::from_secs(6));
    }

    #[test]
    fn missing_interpreter_is_unavailable() {
        let sb = Sandbox::new(SandboxConfig {
            interpreter: "/nonexistent/interpreter".into(),
            ..SandboxConfig::default()
        });
        let err = sb
            .run_tests("x = 1", &asserts(&["assert x == 1"]), limits(1))
            .unwrap_err();
        assert!(matches!(err, SandboxError::Unavailable(_)));
    }

    #[test]
    fn zero_limits_rejected() {
        let sb = Sandbox::new(SandboxConfig::default());
        let err = sb
            .run_tests("x = 1", &[], Limits::new(Duration::ZERO, 10))
            .unwrap_err();
        assert!(matches!(err, SandboxError::InvalidLimits(_)));
    }
}
