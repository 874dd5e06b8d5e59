//! Runs the assembled program, or the slice needed for one block, in a fresh
//! temp workspace with an external runner command.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{LadderError, Result};
use crate::prompt_tree::{NodeId, PromptTree};
use crate::segment_map::{assemble_filtered, preceding_context, AssemblyConfig};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const OUTPUT_CAP: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunnerConfig {
    /// Program and arguments; `{file}` is replaced by the program path.
    pub command: Vec<String>,
    pub file_name: String,
    /// Working directory; the run's workspace when unset.
    pub cwd: Option<PathBuf>,
    /// Environment variables passed through from the service's environment.
    pub env_allow: Vec<String>,
    pub env: BTreeMap<String, String>,
    #[serde(with = "millis")]
    pub timeout: Duration,
    pub output_cap: usize,
    /// Where artifacts are copied before the workspace is removed.
    pub artifact_dir: Option<PathBuf>,
}

impl Default for RunnerConfig {
    fn default() -> Self {
        RunnerConfig {
            command: vec!["python3".into(), "{file}".into()],
            file_name: "program.py".into(),
            cwd: None,
            env_allow: vec!["PATH".into(), "HOME".into(), "LANG".into(), "LC_ALL".into(), "TMPDIR".into()],
            env: BTreeMap::new(),
            timeout: DEFAULT_TIMEOUT,
            output_cap: OUTPUT_CAP,
            artifact_dir: None,
        }
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunResult {
    /// Process exit code; -1 when it was ended by a signal.
    pub exit_status: i32,
    pub stdout: String,
    pub stderr: String,
    pub stdout_truncated: bool,
    pub stderr_truncated: bool,
    /// Files the program created, relative to its workspace, sorted.
    pub artifacts: Vec<String>,
    pub wall_ms: u64,
    /// Kept workspace of a failed run, for inspection.
    pub workspace: Option<PathBuf>,
}

impl RunResult {
    pub fn success(&self) -> bool {
        self.exit_status == 0
    }
}

struct Captured {
    bytes: Vec<u8>,
    truncated: bool,
}

fn capture(mut r: impl Read + Send + 'static, cap: usize) -> thread::JoinHandle<Captured> {
    thread::spawn(move || {
        let mut bytes = Vec::new();
        let mut truncated = false;
        let mut buf = [0u8; 8192];
        loop {
            match r.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(bytes.len());
                    if n > room {
                        truncated = true;
                    }
                    bytes.extend_from_slice(&buf[..n.min(room)]);
                }
            }
        }
        Captured { bytes, truncated }
    })
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    for e in entries.flatten() {
        let p = e.path();
        if p.is_dir() {
            list_files(root, &p, out);
        } else if let Ok(rel) = p.strip_prefix(root) {
            out.push(rel.to_string_lossy().into_owned());
        }
    }
}

/// Runs `program` with the configured runner. A cancelled run kills the
/// process group and returns [`LadderError::Cancelled`].
pub fn run_program(program: &str, runner: &RunnerConfig, cancel: Option<&AtomicBool>) -> Result<RunResult> {
    if runner.command.is_empty() {
        return Err(LadderError::RunnerUnavailable("empty runner command".into()));
    }
    let workspace = tempfile::Builder::new().prefix("ladder-run-").tempdir()?;
    let file = workspace.path().join(&runner.file_name);
    fs::write(&file, program)?;

    let args: Vec<String> = runner
        .command
        .iter()
        .map(|a| a.replace("{file}", &file.to_string_lossy()))
        .collect();
    let mut cmd = Command::new(&args[0]);
    cmd.args(&args[1..])
        .current_dir(runner.cwd.as_deref().unwrap_or(workspace.path()))
        .env_clear()
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    for k in &runner.env_allow {
        if let Ok(v) = std::env::var(k) {
            cmd.env(k, v);
        }
    }
    cmd.envs(&runner.env);

    let started = Instant::now();
    let mut child = cmd.spawn().map_err(|e| LadderError::RunnerUnavailable(format!("{}: {e}", args[0])))?;
    let pgid = child.id() as libc::pid_t;
    let out = capture(child.stdout.take().expect("piped"), runner.output_cap);
    let err = capture(child.stderr.take().expect("piped"), runner.output_cap);

    let mut timed_out = false;
    let mut cancelled = false;
    let status = loop {
        if let Some(s) = child.try_wait()? {
            break s;
        }
        if started.elapsed() >= runner.timeout {
            timed_out = true;
        } else if cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
            cancelled = true;
        }
        if timed_out || cancelled {
            // SAFETY: killpg only sends a signal to the group we created.
            unsafe {
                libc::killpg(pgid, libc::SIGKILL);
            }
            break child.wait()?;
        }
        thread::sleep(Duration::from_millis(5));
    };
    let wall_ms = started.elapsed().as_millis() as u64;
    let out = out.join().expect("reader thread");
    let err = err.join().expect("reader thread");

    let mut artifacts = Vec::new();
    list_files(workspace.path(), workspace.path(), &mut artifacts);
    artifacts.retain(|a| a != &runner.file_name);
    artifacts.sort();
    if let Some(dir) = &runner.artifact_dir {
        for a in &artifacts {
            let dest = dir.join(a);
            if let Some(p) = dest.parent() {
                fs::create_dir_all(p)?;
            }
            fs::copy(workspace.path().join(a), dest)?;
        }
    }

    let mut result = RunResult {
        exit_status: status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.bytes).into_owned(),
        stderr: String::from_utf8_lossy(&err.bytes).into_owned(),
        stdout_truncated: out.truncated,
        stderr_truncated: err.truncated,
        artifacts,
        wall_ms,
        workspace: None,
    };
    if cancelled {
        return Err(LadderError::Cancelled);
    }
    if timed_out || !result.success() {
        result.workspace = Some(workspace.keep());
    }
    if timed_out {
        return Err(LadderError::Timeout {
            limit: runner.timeout,
            partial: Box::new(result),
        });
    }
    Ok(result)
}

/// The program text an interim run of `id` executes: the block's subtree
/// wrapped in its ancestors, preceded by everything that runs before it at
/// each level of its path.
pub fn block_program(tree: &PromptTree, id: NodeId, assembly: &AssemblyConfig) -> Result<String> {
    let mut include: BTreeSet<NodeId> = preceding_context(tree, id)?;
    include.extend(tree.subtree(id)?);
    Ok(assemble_filtered(tree, assembly, &|n| include.contains(&n))?.text)
}

pub fn run_block(
    tree: &PromptTree,
    id: NodeId,
    assembly: &AssemblyConfig,
    runner: &RunnerConfig,
    cancel: Option<&AtomicBool>,
) -> Result<RunResult> {
    run_program(&block_program(tree, id, assembly)?, runner, cancel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt_tree::{OpKind, Relation};

    fn sh() -> RunnerConfig {
        RunnerConfig {
            command: vec!["sh".into(), "{file}".into()],
            file_name: "program.sh".into(),
            ..RunnerConfig::default()
        }
    }

    #[test]
    fn prints_ok() {
        let r = run_program("echo ok\n", &sh(), None).unwrap();
        assert_eq!((r.exit_status, r.stdout.as_str()), (0, "ok\n"));
        assert!(r.workspace.is_none());
    }

    #[test]
    fn failure_keeps_workspace() {
        let r = run_program("echo bad >&2\nexit 3\n", &sh(), None).unwrap();
        assert_eq!(r.exit_status, 3);
        assert_eq!(r.stderr, "bad\n");
        let ws = r.workspace.unwrap();
        assert!(ws.join("program.sh").exists());
        fs::remove_dir_all(ws).unwrap();
    }

    #[test]
    fn output_is_capped() {
        let mut cfg = sh();
        cfg.output_cap = 10;
        let r = run_program("printf '0123456789abcdef'\n", &cfg, None).unwrap();
        assert_eq!(r.stdout, "0123456789");
        assert!(r.stdout_truncated);
    }

    #[test]
    fn timeout_returns_partial_output() {
        let cfg = RunnerConfig {
            timeout: Duration::from_millis(300),
            ..sh()
        };
        match run_program("echo started\nsleep 5\n", &cfg, None) {
            Err(LadderError::Timeout { partial, .. }) => {
                assert_eq!(partial.stdout, "started\n");
                assert!(partial.wall_ms < 2000);
                if let Some(ws) = &partial.workspace {
                    let _ = fs::remove_dir_all(ws);
                }
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_runner() {
        let cfg = RunnerConfig {
            command: vec!["/nonexistent/runner".into()],
            ..RunnerConfig::default()
        };
        assert!(matches!(run_program("", &cfg, None), Err(LadderError::RunnerUnavailable(_))));
    }

    #[test]
    fn artifacts_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = sh();
        cfg.artifact_dir = Some(dir.path().to_path_buf());
        let r = run_program("mkdir out\necho x > out/a.png\necho y > b.txt\n", &cfg, None).unwrap();
        assert_eq!(r.artifacts, vec!["b.txt", "out/a.png"]);
        assert!(dir.path().join("out/a.png").exists());
    }

    #[test]
    fn block_slice_includes_preceding_context() {
        let mut t = PromptTree::new("s");
        let a = t.add_block(NodeId::ROOT, Relation::Child, "a").unwrap();
        let b = t.add_block(a, Relation::Sibling, "b").unwrap();
        let b1 = t.add_block(b, Relation::Child, "b1").unwrap();
        let b2 = t.add_block(b, Relation::Child, "b2").unwrap();
        let c = t.add_block(b, Relation::Sibling, "c").unwrap();
        for (id, code) in [(a, "A"), (b, "B"), (b1, "B1"), (b2, "B2"), (c, "C")] {
            t.set_own_code(id, code, OpKind::Generate, None).unwrap();
        }
        let cfg = AssemblyConfig::default();
        assert_eq!(block_program(&t, b2, &cfg).unwrap(), "A\nB\nB1\nB2\n");
        assert_eq!(block_program(&t, b, &cfg).unwrap(), "A\nB\nB1\nB2\n");
        assert_eq!(block_program(&t, NodeId::ROOT, &cfg).unwrap(), "A\nB\nB1\nB2\nC\n");
    }
}
