//! Worker node: samples mini-batches from its pair shard, steps its local
//! parameter copy, pushes the pre-scaled delta to the server, and adopts
//! broadcast parameters wholesale.
//!
//! Three roles per worker: the compute loop (runs on the calling thread), a
//! communication pair (sender thread draining the outbound queue, receiver
//! thread filing broadcasts into the inbound queue), and a remote-update
//! thread replacing the local copy. The compute loop never touches the
//! network; it blocks only when the bounded outbound queue is full.
//!
//! The single-machine sequential optimizer shares the exact per-step code
//! path ([`sgd_step`]), so a 1-worker run with broadcasts disabled is
//! bitwise identical to the sequential run for the same seed.

use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crossbeam_channel::bounded;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metric::{
    apply_delta_in_place, minibatch_gradient_with_objective, scale_delta, Dataset, GradientDelta,
    Hyperparams, MetricFactor, PairSet,
};
use crate::protocol::{Endpoint, Message, MessageKind};

pub const DEFAULT_OUTBOUND_CAPACITY: usize = 64;

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub id: u32,
    pub hp: Hyperparams,
    pub seed: u64,
    pub steps: Option<u64>,
    pub time_budget: Option<Duration>,
    pub outbound_capacity: usize,
    /// When false, incoming ParamBroadcast messages are dropped; the worker
    /// then runs exactly like the sequential optimizer.
    pub adopt_broadcasts: bool,
    /// Optional 1/sqrt(1 + t/horizon) learning-rate decay.
    pub lr_decay: bool,
    pub init: MetricFactor,
    /// Per-step CSV trace `local_step,wall_seconds,batch_objective`.
    pub trace_path: Option<PathBuf>,
}

impl WorkerConfig {
    pub fn new(id: u32, init: MetricFactor, hp: Hyperparams, seed: u64, steps: u64) -> Self {
        WorkerConfig {
            id,
            hp,
            seed,
            steps: Some(steps),
            time_budget: None,
            outbound_capacity: DEFAULT_OUTBOUND_CAPACITY,
            adopt_broadcasts: true,
            lr_decay: false,
            init,
            trace_path: None,
        }
    }
}

#[derive(Debug)]
pub struct WorkerReport {
    pub final_factor: MetricFactor,
    pub pushes: u64,
}

/// Effective learning rate at local step `t` (0-based).
pub fn effective_eta(base: f64, decay: bool, t: u64, horizon: u64) -> f64 {
    if decay {
        base / (1.0 + t as f64 / horizon.max(1) as f64).sqrt()
    } else {
        base
    }
}

/// One SGD step against `local`: sample a mini-batch from the shard with
/// replacement, compute the gradient, pre-scale by `-eta`, apply in place.
/// Returns the applied delta (exactly what must be pushed) and the batch
/// objective at the pre-step parameters.
pub fn sgd_step(
    local: &mut MetricFactor,
    data: &Dataset,
    shard: &PairSet,
    hp: &Hyperparams,
    eta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(GradientDelta, f64)> {
    let mut batch_similar = Vec::with_capacity(hp.batch_similar);
    for _ in 0..hp.batch_similar {
        batch_similar.push(shard.similar[rng.random_range(0..shard.similar.len())]);
    }
    let mut batch_dissimilar = Vec::with_capacity(hp.batch_dissimilar);
    for _ in 0..hp.batch_dissimilar {
        batch_dissimilar.push(shard.dissimilar[rng.random_range(0..shard.dissimilar.len())]);
    }
    let (grad, obj) =
        minibatch_gradient_with_objective(local, data, &batch_similar, &batch_dissimilar, hp)?;
    let delta = scale_delta(&grad, -eta);
    apply_delta_in_place(local, &delta, 1.0)?;
    Ok((delta, obj))
}

fn validate_shard(shard: &PairSet, hp: &Hyperparams) -> Result<()> {
    if hp.batch_similar > 0 && shard.similar.is_empty() {
        return Err(Error::Config(
            "batch_similar > 0 but the shard has no similar pairs".into(),
        ));
    }
    if hp.batch_dissimilar > 0 && shard.dissimilar.is_empty() {
        return Err(Error::Config(
            "batch_dissimilar > 0 but the shard has no dissimilar pairs".into(),
        ));
    }
    Ok(())
}

/// Single-machine reference optimizer; `on_step(step, batch_objective)` is
/// invoked after every step.
pub fn sequential_optimize(
    init: &MetricFactor,
    data: &Dataset,
    pairs: &PairSet,
    hp: &Hyperparams,
    steps: u64,
    seed: u64,
    lr_decay: bool,
    mut on_step: impl FnMut(u64, f64),
) -> Result<MetricFactor> {
    hp.validate()?;
    validate_shard(pairs, hp)?;
    pairs.validate(data.n())?;
    let mut local = init.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = steps.max(1);
    for t in 0..steps {
        let eta = effective_eta(hp.learning_rate, lr_decay, t, horizon);
        let (_, obj) = sgd_step(&mut local, data, pairs, hp, eta, &mut rng)?;
        on_step(t + 1, obj);
    }
    Ok(local)
}

/// Runs the worker until its step or time budget is exhausted, then sends
/// Shutdown and returns the final local factor.
pub fn run_worker(
    config: WorkerConfig,
    data: Arc<Dataset>,
    shard: PairSet,
    endpoint: Endpoint,
) -> Result<WorkerReport> {
    config.hp.validate()?;
    validate_shard(&shard, &config.hp)?;
    shard.validate(data.n())?;
    if config.steps.is_none() && config.time_budget.is_none() {
        return Err(Error::Config("worker needs a step or time budget".into()));
    }
    let (k, d) = (config.init.k, config.init.d);
    let param = Arc::new(Mutex::new(config.init.clone()));
    let (outbound_tx, outbound_rx) = bounded::<Message>(config.outbound_capacity);
    let (inbound_tx, inbound_rx) = bounded::<MetricFactor>(4);
    let (mut sender, mut receiver) = endpoint.split();

    let id = config.id;
    let send_thread = std::thread::spawn(move || -> Result<u64> {
        sender.send(&Message::control(MessageKind::Hello, id, 0))?;
        let mut sent = 0u64;
        let mut last_step = 0u64;
        while let Ok(msg) = outbound_rx.recv() {
            last_step = msg.step;
            sender.send(&msg)?;
            sent += 1;
        }
        sender.send(&Message::control(MessageKind::Shutdown, id, last_step))?;
        Ok(sent)
    });

    let adopt = config.adopt_broadcasts;
    let recv_thread = std::thread::spawn(move || {
        loop {
            match receiver.recv() {
                Ok(msg) => match msg.kind {
                    MessageKind::ParamBroadcast => {
                        if !adopt {
                            continue;
                        }
                        if msg.rows as usize != k || msg.cols as usize != d {
                            log::warn!("broadcast with shape {}x{}, expected {k}x{d}", msg.rows, msg.cols);
                            continue;
                        }
                        let factor = MetricFactor {
                            k,
                            d,
                            values: msg.payload,
                        };
                        if inbound_tx.send(factor).is_err() {
                            return;
                        }
                    }
                    MessageKind::Ack => {
                        log::warn!("server rejected push at step {}", msg.step);
                    }
                    MessageKind::Shutdown => return,
                    other => log::warn!("unexpected {other:?} from server"),
                },
                Err(Error::Disconnected) => return,
                Err(e) => {
                    log::error!("worker {id} receive error: {e}");
                    return;
                }
            }
        }
    });

    let update_thread = {
        let param = Arc::clone(&param);
        std::thread::spawn(move || {
            // replacement semantics: adopt the broadcast wholesale, no merge
            while let Ok(fresh) = inbound_rx.recv() {
                let mut guard = param.lock().expect("param lock");
                *guard = fresh;
            }
        })
    };

    // compute role
    let mut trace: Option<std::io::BufWriter<std::fs::File>> = match &config.trace_path {
        Some(path) => Some(std::io::BufWriter::new(std::fs::File::create(path)?)),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let start = Instant::now();
    let horizon = config.steps.unwrap_or(1000).max(1);
    let mut local_step = 0u64;
    loop {
        if let Some(budget) = config.steps {
            if local_step >= budget {
                break;
            }
        }
        if let Some(budget) = config.time_budget {
            if start.elapsed() >= budget {
                break;
            }
        }
        let eta = effective_eta(config.hp.learning_rate, config.lr_decay, local_step, horizon);
        let (delta, obj) = {
            let mut guard = param.lock().expect("param lock");
            sgd_step(&mut guard, &data, &shard, &config.hp, eta, &mut rng)?
        };
        local_step += 1;
        if let Some(w) = trace.as_mut() {
            writeln!(
                w,
                "{},{:.6},{:.9}",
                local_step,
                start.elapsed().as_secs_f64(),
                obj
            )?;
        }
        // backpressure point: blocks when the outbound queue is full
        outbound_tx
            .send(Message::gradient_push(config.id, local_step, &delta))
            .map_err(|_| Error::Disconnected)?;
    }
    if let Some(w) = trace.as_mut() {
        w.flush()?;
    }

    drop(outbound_tx); // sender thread drains, sends Shutdown, exits
    let pushes = send_thread.join().expect("send thread panicked")?;
    recv_thread.join().expect("recv thread panicked");
    update_thread.join().expect("update thread panicked");

    let final_factor = Arc::try_unwrap(param)
        .map(|m| m.into_inner().expect("param lock"))
        .unwrap_or_else(|arc| arc.lock().expect("param lock").clone());
    Ok(WorkerReport {
        final_factor,
        pushes,
    })
}
