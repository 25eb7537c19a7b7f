//! Test double for the environment bridge.
//!
//! Observation after `step(a)` is `a` padded with zeros to `obs_dim`; the
//! reward is `sum(a)`. `reset(seed)` returns `[seed mod 1000 / 1000, 0, ...]`.
//! Flags inject faults:
//!
//! ```text
//! --obs-dim N --act-dim N --max-steps N   spec (default 3, 2, 1000)
//! --version N                             protocol version in the handshake
//! --bad-handshake                         reply to spec with a non-JSON line
//! --hang-on-step K                        stop answering at the K-th step
//! --exit-on-step K                        exit with status 3 at the K-th step
//! --error-on-step K                       error reply to the K-th step
//! --wrong-id-on-step K                    reply to the K-th step with id+1
//! --chatter-after-reset                   print an extra line after each reset
//! ```

use std::io::{self, BufRead, Write};
use std::process::exit;
use std::time::Duration;

use serde_json::Value;

struct Options {
    obs_dim: usize,
    act_dim: usize,
    max_steps: u64,
    version: u64,
    bad_handshake: bool,
    hang_on_step: Option<u64>,
    exit_on_step: Option<u64>,
    error_on_step: Option<u64>,
    wrong_id_on_step: Option<u64>,
    chatter_after_reset: bool,
}

fn parse_args() -> Options {
    let mut o = Options {
        obs_dim: 3,
        act_dim: 2,
        max_steps: 1000,
        version: 1,
        bad_handshake: false,
        hang_on_step: None,
        exit_on_step: None,
        error_on_step: None,
        wrong_id_on_step: None,
        chatter_after_reset: false,
    };
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut i = 0;
    while i < args.len() {
        let value = |i: usize| -> u64 {
            args.get(i + 1)
                .and_then(|v| v.parse().ok())
                .unwrap_or_else(|| {
                    eprintln!("echo_env: {} needs an integer", args[i]);
                    exit(2)
                })
        };
        match args[i].as_str() {
            "--obs-dim" => o.obs_dim = value(i) as usize,
            "--act-dim" => o.act_dim = value(i) as usize,
            "--max-steps" => o.max_steps = value(i),
            "--version" => o.version = value(i),
            "--hang-on-step" => o.hang_on_step = Some(value(i)),
            "--exit-on-step" => o.exit_on_step = Some(value(i)),
            "--error-on-step" => o.error_on_step = Some(value(i)),
            "--wrong-id-on-step" => o.wrong_id_on_step = Some(value(i)),
            "--bad-handshake" => {
                o.bad_handshake = true;
                i += 1;
                continue;
            }
            "--chatter-after-reset" => {
                o.chatter_after_reset = true;
                i += 1;
                continue;
            }
            other => {
                eprintln!("echo_env: unknown flag {other}");
                exit(2)
            }
        }
        i += 2;
    }
    if o.act_dim > o.obs_dim {
        eprintln!("echo_env: act-dim must not exceed obs-dim");
        exit(2);
    }
    o
}

fn real(x: f64) -> String {
    format!("{x:.16e}")
}

fn array(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|&x| real(x)).collect();
    format!("[{}]", parts.join(","))
}

fn main() {
    let o = parse_args();
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    let mut steps: u64 = 0;
    let mut total_steps: u64 = 0;
    let mut live = false;
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        let req: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("echo_env: bad request {line:?}: {e}");
                writeln!(out, "{{\"id\":null,\"error\":\"unparseable request\"}}").ok();
                out.flush().ok();
                continue;
            }
        };
        let id = req.get("id").and_then(Value::as_u64).unwrap_or(0);
        let cmd = req.get("cmd").and_then(Value::as_str).unwrap_or("");
        let reply = match cmd {
            "spec" if o.bad_handshake => "spec follows: obs_dim=3".to_owned(),
            "spec" => format!(
                "{{\"id\":{id},\"v\":{},\"obs_dim\":{},\"act_dim\":{},\"max_episode_steps\":{}}}",
                o.version, o.obs_dim, o.act_dim, o.max_steps
            ),
            "reset" => {
                let seed = req.get("seed").and_then(Value::as_u64).unwrap_or(0);
                steps = 0;
                live = true;
                let mut obs = vec![0.0; o.obs_dim];
                obs[0] = (seed % 1000) as f64 / 1000.0;
                format!("{{\"id\":{id},\"obs\":{}}}", array(&obs))
            }
            "step" => {
                total_steps += 1;
                if o.hang_on_step == Some(total_steps) {
                    eprintln!("echo_env: hanging at step {total_steps}");
                    loop {
                        std::thread::sleep(Duration::from_secs(3600));
                    }
                }
                if o.exit_on_step == Some(total_steps) {
                    eprintln!("echo_env: exiting at step {total_steps}");
                    exit(3);
                }
                let action: Option<Vec<f64>> = req
                    .get("action")
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(Value::as_f64).collect());
                match action {
                    _ if o.error_on_step == Some(total_steps) => {
                        format!("{{\"id\":{id},\"error\":\"injected failure at step {total_steps}\"}}")
                    }
                    _ if !live => format!("{{\"id\":{id},\"error\":\"step before reset\"}}"),
                    Some(a) if a.len() == o.act_dim => {
                        steps += 1;
                        let mut obs = vec![0.0; o.obs_dim];
                        obs[..a.len()].copy_from_slice(&a);
                        let reward: f64 = a.iter().sum();
                        let truncated = steps >= o.max_steps;
                        if truncated {
                            live = false;
                        }
                        let reply_id = if o.wrong_id_on_step == Some(total_steps) { id + 1 } else { id };
                        format!(
                            "{{\"id\":{reply_id},\"obs\":{},\"reward\":{},\"terminated\":false,\"truncated\":{truncated}}}",
                            array(&obs),
                            real(reward)
                        )
                    }
                    _ => format!("{{\"id\":{id},\"error\":\"action must have {} numbers\"}}", o.act_dim),
                }
            }
            "close" => {
                writeln!(out, "{{\"id\":{id}}}").ok();
                out.flush().ok();
                exit(0);
            }
            other => format!("{{\"id\":{id},\"error\":\"unknown command '{other}'\"}}"),
        };
        writeln!(out, "{reply}").ok();
        if cmd == "reset" && o.chatter_after_reset {
            writeln!(out, "debug: reset done").ok();
        }
        out.flush().ok();
    }
}
