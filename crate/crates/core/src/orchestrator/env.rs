//! Environment backends: bring up a clean environment with an agent to talk to.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use super::{Backend, EnvironmentSpec, RunOptions, SandboxParams, VmSnapshotParams};
use crate::agent::{spawn_local, Agent, ExecutionRoot, LocalAgent, ScriptedScreen};
use crate::playbook::{Scope, TemplateString};
use crate::protocol::{Handshake, Kind, Session, Status, TcpTransport};
use crate::resolver::{FixtureResolver, ScreenModel};

/// Copies a directory tree, preserving symlinks as symlinks.
pub fn copy_tree(src: &Path, dst: &Path) -> std::io::Result<()> {
    for entry in WalkDir::new(src).follow_links(false).sort_by_file_name() {
        let entry = entry.map_err(std::io::Error::other)?;
        let rel = entry.path().strip_prefix(src).expect("walk stays under src");
        let target = dst.join(rel);
        let ft = entry.file_type();
        if ft.is_dir() {
            std::fs::create_dir_all(&target)?;
        } else if ft.is_symlink() {
            let link = std::fs::read_link(entry.path())?;
            std::os::unix::fs::symlink(link, &target)?;
        } else {
            std::fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

/// Content hash of a tree: relative paths, entry types, symlink targets and
/// file bytes, in sorted order. Timestamps and permissions are not included.
pub fn tree_hash(root: &Path) -> std::io::Result<String> {
    let mut h = Sha256::new();
    for entry in WalkDir::new(root).follow_links(false).sort_by_file_name() {
        let entry = entry.map_err(std::io::Error::other)?;
        let rel = entry.path().strip_prefix(root).expect("walk stays under root");
        let ft = entry.file_type();
        let tag: &[u8] = if ft.is_dir() {
            b"d"
        } else if ft.is_symlink() {
            b"l"
        } else {
            b"f"
        };
        h.update(tag);
        h.update(rel.as_os_str().as_encoded_bytes());
        h.update([0]);
        if ft.is_symlink() {
            h.update(std::fs::read_link(entry.path())?.as_os_str().as_encoded_bytes());
            h.update([0]);
        } else if ft.is_file() {
            let bytes = std::fs::read(entry.path())?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub(super) struct Provisioned {
    pub session: Session<TcpTransport>,
    pub scope_vars: Vec<(String, String)>,
    pub sandbox_root: Option<PathBuf>,
    pub pre_run_tree_hash: Option<String>,
    pub teardown: Teardown,
}

pub(super) enum Teardown {
    Sandbox {
        agent: LocalAgent,
        handshake_timeout: Duration,
        hello: Handshake,
        _dir: tempfile::TempDir,
    },
    Vm(VmSnapshotParams),
}

impl Teardown {
    /// Stops the agent and discards the environment. Runs whatever state the
    /// session is in.
    pub fn finish(self, mut session: Session<TcpTransport>) {
        let mut acknowledged = false;
        if session.poisoned().is_none() {
            match session.request(Kind::Shutdown, serde_json::Value::Null, Some(Duration::from_secs(5))) {
                Ok(r) => acknowledged = r.status == Status::Ok,
                Err(e) => log::warn!("shutdown request failed: {e}"),
            }
        }
        drop(session);
        match self {
            Teardown::Sandbox {
                agent,
                handshake_timeout,
                hello,
                _dir,
            } => {
                // After a broken session the agent is back on accept; a fresh
                // session asks it to stop.
                if !acknowledged && !agent.handle.is_finished() {
                    let stopped = TcpTransport::connect(agent.addr, handshake_timeout)
                        .ok()
                        .and_then(|t| Session::open(t, &hello, handshake_timeout).ok())
                        .map(|mut s| s.request(Kind::Shutdown, serde_json::Value::Null, Some(handshake_timeout)).is_ok())
                        .unwrap_or(false);
                    if !stopped {
                        log::warn!("sandbox agent did not stop; leaving it detached");
                        return;
                    }
                }
                let _ = agent.handle.join();
            }
            Teardown::Vm(p) => {
                if let Some(cmd) = &p.stop_command {
                    if let Err(e) = host_command(cmd, &p) {
                        log::warn!("stop command failed: {e}");
                    }
                }
            }
        }
    }
}

pub(super) fn provision(env: &EnvironmentSpec, opts: &RunOptions) -> Result<Provisioned, String> {
    match &env.backend {
        Backend::Sandbox(p) => provision_sandbox(env, p, opts),
        Backend::VmSnapshot(p) => provision_vm(env, p, opts),
    }
}

fn hello(opts: &RunOptions) -> Handshake {
    Handshake::new([], opts.registry.digest())
}

fn provision_sandbox(env: &EnvironmentSpec, p: &SandboxParams, opts: &RunOptions) -> Result<Provisioned, String> {
    let dir = tempfile::Builder::new()
        .prefix("tdf-sandbox-")
        .tempdir()
        .map_err(|e| format!("cannot create sandbox: {e}"))?;
    if let Some(tpl) = &p.template_tree {
        copy_tree(tpl, dir.path()).map_err(|e| format!("cannot copy template tree {}: {e}", tpl.display()))?;
    }
    let root = ExecutionRoot::sandbox(dir.path(), env.sys_var_map.clone()).map_err(|e| e.to_string())?;
    let pre = tree_hash(dir.path()).map_err(|e| format!("cannot hash sandbox: {e}"))?;

    let mut registry = opts.registry.clone();
    for lib in &p.libraries {
        registry.load_manifest_file(lib).map_err(|e| e.to_string())?;
    }
    let mut agent = Agent::new(root.clone(), registry, Box::new(FixtureResolver));
    if let Some(model_path) = &p.screen_model {
        let model = ScreenModel::load(model_path).map_err(|e| e.to_string())?;
        agent = agent.with_surface(Box::new(ScriptedScreen::new(model, root.clone())));
    }
    let local = spawn_local(agent).map_err(|e| format!("cannot start agent: {e}"))?;
    let transport = TcpTransport::connect(local.addr, opts.handshake_timeout).map_err(|e| e.to_string())?;
    let session = Session::open(transport, &hello(opts), opts.handshake_timeout).map_err(|e| e.to_string())?;
    Ok(Provisioned {
        session,
        scope_vars: root.sys_vars.clone().into_iter().collect(),
        sandbox_root: root.root_path.clone(),
        pre_run_tree_hash: Some(pre),
        teardown: Teardown::Sandbox {
            agent: local,
            handshake_timeout: opts.handshake_timeout,
            hello: hello(opts),
            _dir: dir,
        },
    })
}

fn host_command(template: &str, p: &VmSnapshotParams) -> Result<(), String> {
    let scope: Scope = [("machine", p.machine_name.as_str()), ("snapshot", p.snapshot_name.as_str())]
        .into_iter()
        .collect();
    let cmd = TemplateString::new(template).render(&scope).map_err(|e| e.to_string())?;
    let status = Command::new("/bin/sh")
        .arg("-c")
        .arg(&cmd)
        .status()
        .map_err(|e| format!("`{cmd}`: {e}"))?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("`{cmd}` exited with {status}"))
    }
}

fn provision_vm(env: &EnvironmentSpec, p: &VmSnapshotParams, opts: &RunOptions) -> Result<Provisioned, String> {
    for cmd in [&p.revert_command, &p.start_command].into_iter().flatten() {
        host_command(cmd, p)?;
    }
    let addr: SocketAddr = std::net::ToSocketAddrs::to_socket_addrs(&p.connect_addr)
        .map_err(|e| format!("connect address `{}`: {e}", p.connect_addr))?
        .next()
        .ok_or_else(|| format!("connect address `{}` does not resolve", p.connect_addr))?;
    // The guest may still be booting; keep trying until the timeout.
    let deadline = Instant::now() + Duration::from_millis(p.connect_timeout_ms);
    let transport = loop {
        let left = deadline.saturating_duration_since(Instant::now());
        match TcpTransport::connect(addr, left.clamp(Duration::from_millis(1), Duration::from_secs(2))) {
            Ok(t) => break t,
            Err(e) if Instant::now() >= deadline => {
                if let Some(cmd) = &p.stop_command {
                    let _ = host_command(cmd, p);
                }
                return Err(format!("agent at {addr} unreachable: {e}"));
            }
            Err(_) => std::thread::sleep(Duration::from_millis(200).min(left)),
        }
    };
    let session = Session::open(transport, &hello(opts), opts.handshake_timeout).map_err(|e| e.to_string())?;
    Ok(Provisioned {
        session,
        scope_vars: env.sys_var_map.clone().into_iter().collect(),
        sandbox_root: None,
        pre_run_tree_hash: None,
        teardown: Teardown::Vm(p.clone()),
    })
}
