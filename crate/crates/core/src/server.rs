//! The centralized parameter server.
//!
//! Two long-lived roles coordinated only by message queues: reader threads
//! (one per worker connection) feed a bounded inbound queue; the update role
//! consumes gradient batches, folds them into the global factor, and enqueues
//! snapshots on the outbound queue; a broadcaster thread fans snapshots out
//! to every worker. A full inbound queue blocks the readers (backpressure,
//! never message loss).
//!
//! Workers pre-scale gradients by `-eta`, so the update rule is a pure
//! accumulation `L += delta`.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender, TryRecvError};

use crate::error::{Error, Result};
use crate::metric::{apply_delta_in_place, GradientDelta, MetricFactor};
use crate::model_io::save_model;
use crate::protocol::{Endpoint, Message, MessageKind, MsgSender};

pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;
pub const DEFAULT_BATCH_CAP: usize = 32;
pub const DEFAULT_CHECKPOINT_EVERY: u64 = 10_000;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub k: usize,
    pub d: usize,
    pub init: MetricFactor,
    /// Inbound queue capacity; senders block when it is full.
    pub queue_capacity: usize,
    /// Max gradient messages folded per update-role batch.
    pub batch_cap: usize,
    /// Broadcast a fresh snapshot after each consumed batch.
    pub broadcast: bool,
    pub checkpoint_every: Option<u64>,
    pub checkpoint_path: Option<PathBuf>,
    /// Applied updates between progress lines on stdout (CSV:
    /// `applied_updates,wall_seconds,frobenius_norm`); None silences them.
    pub progress_every: Option<u64>,
    /// Test hook: stall the update role once, before its first batch.
    pub update_stall: Option<Duration>,
}

impl ServerConfig {
    pub fn new(init: MetricFactor) -> Self {
        ServerConfig {
            k: init.k,
            d: init.d,
            init,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            batch_cap: DEFAULT_BATCH_CAP,
            broadcast: true,
            checkpoint_every: Some(DEFAULT_CHECKPOINT_EVERY),
            checkpoint_path: None,
            progress_every: None,
            update_stall: None,
        }
    }
}

/// Shared mutable server state: the global factor plus the applied-update
/// counter the broadcaster stamps into outgoing messages.
pub struct ServerState {
    pub global: MetricFactor,
    pub applied_updates: u64,
}

#[derive(Debug)]
pub struct ServerReport {
    pub final_factor: MetricFactor,
    pub applied_updates: u64,
    pub rejected: u64,
}

/// Folds a batch of deltas into the global factor in arrival order.
/// Returns the number applied; any shape mismatch aborts with an error.
pub fn aggregate_batch(state: &mut ServerState, deltas: &[GradientDelta]) -> Result<u64> {
    for delta in deltas {
        apply_delta_in_place(&mut state.global, delta, 1.0)?;
        state.applied_updates += 1;
    }
    Ok(deltas.len() as u64)
}

type SharedSender = Arc<Mutex<Box<dyn MsgSender>>>;

/// Sends one ParamBroadcast with the current global factor to every worker;
/// unreachable workers are skipped and logged. Returns the delivered count.
pub fn broadcast_params(senders: &[SharedSender], factor: &MetricFactor, step: u64) -> usize {
    let msg = Message::param_broadcast(u32::MAX, step, factor);
    let mut delivered = 0;
    for (idx, sender) in senders.iter().enumerate() {
        let mut guard = sender.lock().expect("sender lock");
        match guard.send(&msg) {
            Ok(()) => delivered += 1,
            Err(e) => log::warn!("broadcast to worker {idx} failed: {e}"),
        }
    }
    delivered
}

enum Inbound {
    Push { worker: usize, msg: Message },
    WorkerDone(usize),
}

fn spawn_reader(
    worker: usize,
    mut receiver: Box<dyn crate::protocol::MsgReceiver>,
    inbound: Sender<Inbound>,
) -> std::thread::JoinHandle<()> {
    std::thread::spawn(move || {
        loop {
            match receiver.recv() {
                Ok(msg) => match msg.kind {
                    MessageKind::GradientPush => {
                        if inbound.send(Inbound::Push { worker, msg }).is_err() {
                            return;
                        }
                    }
                    MessageKind::Hello => {
                        log::info!("worker {} (id {}) connected", worker, msg.sender_id);
                    }
                    MessageKind::Shutdown => {
                        let _ = inbound.send(Inbound::WorkerDone(worker));
                        return;
                    }
                    other => log::warn!("unexpected {other:?} from worker {worker}"),
                },
                Err(Error::Disconnected) => {
                    log::warn!("worker {worker} connection dropped");
                    let _ = inbound.send(Inbound::WorkerDone(worker));
                    return;
                }
                Err(e) => {
                    log::error!("worker {worker} receive error: {e}");
                    let _ = inbound.send(Inbound::WorkerDone(worker));
                    return;
                }
            }
        }
    })
}

/// Runs the server until every worker has sent Shutdown (or dropped its
/// connection). Consumes the endpoints; persists the final factor if a
/// checkpoint path is configured.
pub fn serve(config: ServerConfig, endpoints: Vec<Endpoint>) -> Result<ServerReport> {
    let n_workers = endpoints.len();
    let (inbound_tx, inbound_rx): (Sender<Inbound>, Receiver<Inbound>) =
        bounded(config.queue_capacity);
    let (outbound_tx, outbound_rx): (Sender<(Arc<MetricFactor>, u64)>, _) = bounded(8);

    let mut senders: Vec<SharedSender> = Vec::with_capacity(n_workers);
    let mut readers = Vec::with_capacity(n_workers);
    for (idx, ep) in endpoints.into_iter().enumerate() {
        let (sender, receiver) = ep.split();
        senders.push(Arc::new(Mutex::new(sender)));
        readers.push(spawn_reader(idx, receiver, inbound_tx.clone()));
    }
    drop(inbound_tx);

    let applied_counter = Arc::new(AtomicU64::new(0));
    let broadcaster = {
        let senders = senders.clone();
        std::thread::spawn(move || {
            while let Ok((snapshot, step)) = outbound_rx.recv() {
                broadcast_params(&senders, &snapshot, step);
            }
        })
    };

    // update role, on the calling thread
    if let Some(stall) = config.update_stall {
        std::thread::sleep(stall);
    }
    let start = Instant::now();
    let mut state = ServerState {
        global: config.init.clone(),
        applied_updates: 0,
    };
    let mut rejected = 0u64;
    let mut done = 0usize;
    let mut last_broadcast_at = 0u64;
    let mut last_checkpoint_at = 0u64;
    let mut last_progress_at = 0u64;

    let handle = |state: &mut ServerState, item: Inbound, rejected: &mut u64, done: &mut usize| {
        match item {
            Inbound::Push { worker, msg } => {
                if msg.rows as usize != state.global.k || msg.cols as usize != state.global.d {
                    log::warn!(
                        "rejecting push from worker {worker}: shape {}x{}, session is {}x{}",
                        msg.rows,
                        msg.cols,
                        state.global.k,
                        state.global.d
                    );
                    *rejected += 1;
                    let ack = Message::control(MessageKind::Ack, u32::MAX, msg.step);
                    if let Ok(mut guard) = senders[worker].lock() {
                        let _ = guard.send(&ack);
                    }
                    return;
                }
                let delta = GradientDelta {
                    k: msg.rows as usize,
                    d: msg.cols as usize,
                    values: msg.payload,
                };
                apply_delta_in_place(&mut state.global, &delta, 1.0)
                    .expect("shape checked above");
                state.applied_updates += 1;
            }
            Inbound::WorkerDone(worker) => {
                log::info!("worker {worker} finished");
                *done += 1;
            }
        }
    };

    while done < n_workers {
        let first = match inbound_rx.recv() {
            Ok(item) => item,
            Err(_) => break, // all readers gone
        };
        handle(&mut state, first, &mut rejected, &mut done);
        let mut batched = 1;
        while batched < config.batch_cap {
            match inbound_rx.try_recv() {
                Ok(item) => {
                    handle(&mut state, item, &mut rejected, &mut done);
                    batched += 1;
                }
                Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => break,
            }
        }
        applied_counter.store(state.applied_updates, Ordering::Relaxed);

        if config.broadcast && state.applied_updates > last_broadcast_at {
            let snapshot = Arc::new(state.global.clone());
            if outbound_tx.send((snapshot, state.applied_updates)).is_err() {
                break;
            }
            last_broadcast_at = state.applied_updates;
        }
        if let (Some(every), Some(path)) = (config.checkpoint_every, &config.checkpoint_path) {
            if state.applied_updates >= last_checkpoint_at + every {
                save_model(path, &state.global)?;
                last_checkpoint_at = state.applied_updates;
            }
        }
        if let Some(every) = config.progress_every {
            if state.applied_updates >= last_progress_at + every {
                println!(
                    "{},{:.3},{:.6}",
                    state.applied_updates,
                    start.elapsed().as_secs_f64(),
                    state.global.frobenius_norm()
                );
                last_progress_at = state.applied_updates;
            }
        }
    }

    drop(outbound_tx);
    broadcaster.join().expect("broadcaster panicked");
    for r in readers {
        r.join().expect("reader panicked");
    }
    if let Some(path) = &config.checkpoint_path {
        save_model(path, &state.global)?;
    }
    Ok(ServerReport {
        final_factor: state.global,
        applied_updates: state.applied_updates,
        rejected,
    })
}

/// Accepts `expected_workers` TCP connections and serves them.
pub fn serve_tcp(
    config: ServerConfig,
    listener: std::net::TcpListener,
    expected_workers: usize,
) -> Result<ServerReport> {
    let mut endpoints = Vec::with_capacity(expected_workers);
    for _ in 0..expected_workers {
        let (stream, addr) = listener.accept()?;
        log::info!("accepted worker connection from {addr}");
        endpoints.push(crate::protocol::tcp_endpoint(stream)?);
    }
    serve(config, endpoints)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::init_factor;
    use crate::protocol::loopback_pair;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_delta(k: usize, d: usize, rng: &mut ChaCha8Rng) -> GradientDelta {
        GradientDelta {
            k,
            d,
            values: (0..k * d).map(|_| rng.random_range(-0.1..0.1)).collect(),
        }
    }

    #[test]
    fn aggregate_empty_batch_is_noop() {
        let init = init_factor(2, 3, 1).unwrap();
        let mut state = ServerState {
            global: init.clone(),
            applied_updates: 0,
        };
        aggregate_batch(&mut state, &[]).unwrap();
        assert_eq!(state.global.values, init.values);
        assert_eq!(state.applied_updates, 0);
    }

    #[test]
    fn aggregate_zero_delta_is_noop() {
        let init = init_factor(2, 3, 1).unwrap();
        let mut state = ServerState {
            global: init.clone(),
            applied_updates: 0,
        };
        aggregate_batch(&mut state, &[GradientDelta::zeros(2, 3)]).unwrap();
        assert_eq!(state.global.values, init.values);
        assert_eq!(state.applied_updates, 1);
    }

    #[test]
    fn aggregate_permutation_agrees_semantically() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let init = init_factor(3, 4, 0).unwrap();
        let deltas: Vec<_> = (0..10).map(|_| random_delta(3, 4, &mut rng)).collect();

        let mut fwd = ServerState {
            global: init.clone(),
            applied_updates: 0,
        };
        aggregate_batch(&mut fwd, &deltas).unwrap();

        // fixed reduction order is bitwise reproducible
        let mut fwd2 = ServerState {
            global: init.clone(),
            applied_updates: 0,
        };
        aggregate_batch(&mut fwd2, &deltas).unwrap();
        assert_eq!(fwd.global.values, fwd2.global.values);

        // arbitrary order agrees within float tolerance
        let mut rev_deltas = deltas.clone();
        rev_deltas.reverse();
        let mut rev = ServerState {
            global: init,
            applied_updates: 0,
        };
        aggregate_batch(&mut rev, &rev_deltas).unwrap();
        let scale = fwd.global.frobenius_norm().max(1.0) as f32;
        for (a, b) in fwd.global.values.iter().zip(rev.global.values.iter()) {
            assert!((a - b).abs() / scale < 1e-6, "{a} vs {b}");
        }
        assert_eq!(rev.applied_updates, 10);
    }

    #[test]
    fn aggregate_shape_mismatch_is_error() {
        let mut state = ServerState {
            global: init_factor(2, 3, 1).unwrap(),
            applied_updates: 0,
        };
        let bad = GradientDelta::zeros(3, 3);
        assert!(aggregate_batch(&mut state, &[bad]).is_err());
    }

    #[test]
    fn serve_no_pushes_preserves_init() {
        let init = init_factor(2, 3, 5).unwrap();
        let (server_ep, worker_ep) = loopback_pair(16);
        let config = ServerConfig::new(init.clone());
        let worker = std::thread::spawn(move || {
            let mut ep = worker_ep;
            ep.sender
                .send(&Message::control(MessageKind::Hello, 0, 0))
                .unwrap();
            ep.sender
                .send(&Message::control(MessageKind::Shutdown, 0, 0))
                .unwrap();
        });
        let report = serve(config, vec![server_ep]).unwrap();
        worker.join().unwrap();
        assert_eq!(report.final_factor.values, init.values);
        assert_eq!(report.applied_updates, 0);
    }

    #[test]
    fn serve_single_push_adds_delta() {
        let init = init_factor(2, 3, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let delta = random_delta(2, 3, &mut rng);
        let (server_ep, worker_ep) = loopback_pair(16);
        let config = ServerConfig::new(init.clone());
        let d2 = delta.clone();
        let worker = std::thread::spawn(move || {
            let mut ep = worker_ep;
            ep.sender.send(&Message::gradient_push(0, 1, &d2)).unwrap();
            ep.sender
                .send(&Message::control(MessageKind::Shutdown, 0, 1))
                .unwrap();
        });
        let report = serve(config, vec![server_ep]).unwrap();
        worker.join().unwrap();
        let want = crate::metric::apply_delta(&init, &delta, 1.0).unwrap();
        assert_eq!(report.final_factor.values, want.values);
        assert_eq!(report.applied_updates, 1);
    }

    #[test]
    fn serve_two_pushes_commute() {
        let init = init_factor(2, 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g1 = random_delta(2, 2, &mut rng);
        let g2 = random_delta(2, 2, &mut rng);

        let run = |first: GradientDelta, second: GradientDelta| -> MetricFactor {
            let (server_ep, worker_ep) = loopback_pair(16);
            let config = ServerConfig::new(init.clone());
            let worker = std::thread::spawn(move || {
                let mut ep = worker_ep;
                ep.sender.send(&Message::gradient_push(0, 1, &first)).unwrap();
                ep.sender.send(&Message::gradient_push(0, 2, &second)).unwrap();
                ep.sender
                    .send(&Message::control(MessageKind::Shutdown, 0, 2))
                    .unwrap();
            });
            let report = serve(config, vec![server_ep]).unwrap();
            worker.join().unwrap();
            report.final_factor
        };
        let a = run(g1.clone(), g2.clone());
        let b = run(g2, g1);
        // f32 accumulation is order-sensitive at the last bit; arrival-order
        // independence holds semantically, within float tolerance
        let scale = a.frobenius_norm().max(1.0) as f32;
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert!((x - y).abs() / scale < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn serve_rejects_bad_shape_and_continues() {
        let init = init_factor(2, 3, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let good = random_delta(2, 3, &mut rng);
        let bad = random_delta(3, 3, &mut rng);
        let (server_ep, worker_ep) = loopback_pair(16);
        let config = ServerConfig::new(init.clone());
        let g2 = good.clone();
        let worker = std::thread::spawn(move || {
            let mut ep = worker_ep;
            ep.sender.send(&Message::gradient_push(0, 1, &bad)).unwrap();
            ep.sender.send(&Message::gradient_push(0, 2, &g2)).unwrap();
            ep.sender
                .send(&Message::control(MessageKind::Shutdown, 0, 2))
                .unwrap();
            // the rejected push is acknowledged with an error Ack
            let ack = ep.receiver.recv().unwrap();
            assert_eq!(ack.kind, MessageKind::Ack);
            assert_eq!(ack.step, 1);
        });
        let report = serve(config, vec![server_ep]).unwrap();
        worker.join().unwrap();
        assert_eq!(report.applied_updates, 1);
        assert_eq!(report.rejected, 1);
        let want = crate::metric::apply_delta(&init, &good, 1.0).unwrap();
        assert_eq!(report.final_factor.values, want.values);
    }

    #[test]
    fn broadcast_fans_out_identical_payloads() {
        let factor = init_factor(2, 3, 8).unwrap();
        let mut worker_eps = Vec::new();
        let mut server_senders: Vec<SharedSender> = Vec::new();
        for _ in 0..3 {
            let (server_ep, worker_ep) = loopback_pair(4);
            let (sender, _receiver) = server_ep.split();
            server_senders.push(Arc::new(Mutex::new(sender)));
            worker_eps.push(worker_ep);
        }
        let delivered = broadcast_params(&server_senders, &factor, 17);
        assert_eq!(delivered, 3);
        for ep in worker_eps.iter_mut() {
            let msg = ep.receiver.recv().unwrap();
            assert_eq!(msg.kind, MessageKind::ParamBroadcast);
            assert_eq!(msg.step, 17);
            let bits: Vec<u32> = msg.payload.iter().map(|v| v.to_bits()).collect();
            let want: Vec<u32> = factor.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, want);
        }
    }

    #[test]
    fn no_broadcast_without_updates() {
        // a worker that only says hello and shuts down must receive nothing
        let init = init_factor(2, 2, 0).unwrap();
        let (server_ep, worker_ep) = loopback_pair(16);
        let config = ServerConfig::new(init);
        let worker = std::thread::spawn(move || {
            let mut ep = worker_ep;
            ep.sender
                .send(&Message::control(MessageKind::Hello, 0, 0))
                .unwrap();
            ep.sender
                .send(&Message::control(MessageKind::Shutdown, 0, 0))
                .unwrap();
            // server closes its end after shutdown; any broadcast would
            // arrive before the disconnect
            match ep.receiver.recv() {
                Err(Error::Disconnected) => {}
                other => panic!("expected clean disconnect, got {other:?}"),
            }
        });
        serve(config, vec![server_ep]).unwrap();
        worker.join().unwrap();
    }
}
