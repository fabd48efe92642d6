//! Remote agent against a loopback stub server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use arbor_core::agents::Agent;
use arbor_core::agents::{RemoteAgent, RemoteConfig, RemoteRequest, RemoteResponse};
use arbor_core::environment::{evaluate_bits, make_feedback, Task};
use arbor_core::experiment::ExperimentConfig;
use arbor_core::{AgentId, Bits, Error, SearchRng};
use rand::SeedableRng;

#[derive(Clone, Copy)]
enum Behavior {
    Echo,
    ShortBits,
    Slow(Duration),
    Status(u16),
}

/// Serve `behavior` on a fresh loopback port; returns the endpoint and a
/// request counter.
fn serve(behavior: Behavior) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = format!("http://{}/agent", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { return };
            counter.fetch_add(1, Ordering::SeqCst);
            std::thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut body = vec![0; length];
                reader.read_exact(&mut body).unwrap();
                let req: RemoteRequest = serde_json::from_slice(&body).unwrap();
                let (status, payload) = match behavior {
                    Behavior::Echo | Behavior::Slow(_) => {
                        if let Behavior::Slow(d) = behavior {
                            std::thread::sleep(d);
                        }
                        let bits = match &req.parent_bits_hex {
                            Some(parent) => parent.clone(),
                            None => req.prompt_hex.clone(),
                        };
                        let resp = RemoteResponse {
                            bits_hex: bits,
                            token_logprobs: vec![-0.25; 3],
                        };
                        (200, serde_json::to_string(&resp).unwrap())
                    }
                    Behavior::ShortBits => (
                        200,
                        r#"{"bits_hex":"","token_logprobs":[-1.0]}"#.to_string(),
                    ),
                    Behavior::Status(s) => (s, "overloaded".to_string()),
                };
                let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
            });
        }
    });
    (endpoint, hits)
}

fn agent(endpoint: String, timeout_ms: u64, retries: u32) -> RemoteAgent {
    RemoteAgent::new(
        AgentId(1),
        RemoteConfig {
            endpoint,
            timeout_ms,
            retries,
        },
    )
}

fn task() -> Task {
    let cfg = ExperimentConfig::default();
    let family = cfg.env.family();
    cfg.env.eval_tasks(&family, 1).unwrap().remove(0)
}

#[test]
fn echo_round_trips_bits_and_logprobs() {
    let (endpoint, hits) = serve(Behavior::Echo);
    let a = agent(endpoint, 5_000, 0);
    let task = task();
    let mut rng = SearchRng::seed_from_u64(0);
    let p = a.propose(task.view(), &mut rng).unwrap();
    assert_eq!(p.bits, task.view().prompt.clone());
    assert_eq!(p.trace.logp_old, vec![-0.25; 3]);

    let parent = Bits(vec![true; task.view().len]);
    let feedback = make_feedback(&evaluate_bits(&task, &parent).unwrap());
    let r = a.refine(task.view(), &parent, &feedback, &mut rng).unwrap();
    assert_eq!(r.bits, parent);
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn wrong_length_bits_are_a_protocol_error() {
    let (endpoint, _) = serve(Behavior::ShortBits);
    let err = agent(endpoint, 5_000, 0)
        .remote_propose(task().view())
        .unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err:?}");
}

#[test]
fn slow_server_times_out_after_retries() {
    let (endpoint, hits) = serve(Behavior::Slow(Duration::from_millis(600)));
    let err = agent(endpoint, 150, 1)
        .remote_propose(task().view())
        .unwrap_err();
    assert!(matches!(err, Error::Timeout(150)), "{err:?}");
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn server_errors_carry_status_and_body() {
    let (endpoint, hits) = serve(Behavior::Status(503));
    let err = agent(endpoint, 5_000, 2)
        .remote_propose(task().view())
        .unwrap_err();
    match err {
        Error::Remote { status, body } => {
            assert_eq!(status, 503);
            assert_eq!(body, "overloaded");
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}
