use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::clock::{DurationMode, SimDuration, DEFAULT_SECONDS_PER_FLOP};
use super::network::NetworkModel;
use super::trace::{RoundTrace, StopReason, Substeps, TrainingRun};
use super::wire::{quantize, Message, MessageKind, FLAG_TRAIN, FLAG_VALIDATE, SERVER_ID};
use crate::data::ClientDataset;
use crate::error::{NnError, ProtocolError};
use crate::nn::{self, ModelSpec, OptimizerState, ParamVector};

/// Global model held by the server.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub params: ParamVector,
    /// Server-side optimizer (FedSGD) or the aggregated client moments.
    pub optimizer: OptimizerState,
    /// Incremented on every aggregation.
    pub version: u64,
}

/// What the server knows a client holds.
#[derive(Debug, Clone, Default)]
pub struct ClientState {
    pub params: Option<ParamVector>,
    /// Global version of `params`; `None` once the client has trained locally.
    pub version: Option<u64>,
    /// Local optimizer state kept between rounds when moments are not aggregated.
    pub optimizer: Option<OptimizerState>,
}

/// Optimizer moments shipped with a train request.
#[derive(Debug, Clone, Default)]
pub struct Downloaded {
    pub moments: Vec<ParamVector>,
    pub step: u64,
}

/// Result of one client's local computation.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    /// Gradient or weights, followed by any optimizer moments.
    pub payload: Vec<ParamVector>,
    /// Scalars sent after the vectors (the optimizer step count with moments).
    pub scalars: Vec<f64>,
    pub loss: f64,
    pub optimizer: Option<OptimizerState>,
    /// Cost-model estimate of the local work.
    pub flops: f64,
}

/// Per-round behaviour of a federated strategy.
pub trait FlStrategy: Sync {
    fn select(&self, n_clients: usize, round: usize) -> Vec<usize>;

    fn server_optimizer(&self, params: &ParamVector) -> OptimizerState;

    /// Moment vectors the server ships alongside the weights to trainers,
    /// followed by its step count.
    fn download_moments(&self) -> usize {
        0
    }

    fn client_update(
        &self,
        spec: &ModelSpec,
        params: &ParamVector,
        download: &Downloaded,
        state: &ClientState,
        client: &ClientDataset,
        round: usize,
    ) -> Result<ClientUpdate, ProtocolError>;

    /// Folds uploads, given as `(n_k, update)` in ascending client order,
    /// into the server state. Returns the FLOP estimate of the work.
    fn aggregate(&self, server: &mut ServerState, updates: &[(usize, ClientUpdate)]) -> Result<f64, ProtocolError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopConfig {
    #[serde(default = "default_max_round")]
    pub max_round: usize,
    /// Rounds without validation-loss improvement before stopping; 0 disables.
    #[serde(default)]
    pub patience: usize,
    /// Stop as soon as aggregated validation accuracy reaches this value.
    #[serde(default)]
    pub target_val_acc: Option<f64>,
}

fn default_max_round() -> usize {
    500
}

impl Default for StopConfig {
    fn default() -> Self {
        Self {
            max_round: default_max_round(),
            patience: 0,
            target_val_acc: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub network: NetworkModel,
    pub stop: StopConfig,
    pub durations: DurationMode,
    pub seconds_per_flop: f64,
    /// Validate only on the round's participants instead of every client.
    pub lazy: bool,
    /// Deliver payloads at 32-bit precision instead of the sender's values.
    pub quantize_on_wire: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            network: NetworkModel::default(),
            stop: StopConfig::default(),
            durations: DurationMode::Simulated,
            seconds_per_flop: DEFAULT_SECONDS_PER_FLOP,
            lazy: false,
            quantize_on_wire: false,
        }
    }
}

/// Every message passes through here so no byte escapes accounting.
struct Channel {
    quantize: bool,
    client_sent: Vec<u64>,
    client_received: Vec<u64>,
    server_sent: u64,
    server_received: u64,
    messages: usize,
}

impl Channel {
    fn send(&mut self, mut msg: Message) -> (Message, u64) {
        let bytes = msg.wire_len() as u64;
        self.messages += 1;
        if msg.sender == SERVER_ID {
            self.server_sent += bytes;
            self.client_received[msg.receiver as usize] += bytes;
        } else {
            self.server_received += bytes;
            self.client_sent[msg.sender as usize] += bytes;
        }
        if self.quantize {
            quantize(&mut msg.values);
        }
        (msg, bytes)
    }
}

fn split_payload(like: &ParamVector, values: &[f64], parts: usize) -> Result<Vec<ParamVector>, ProtocolError> {
    let p = like.len();
    if values.len() != p * parts {
        return Err(ProtocolError::Wire(format!(
            "payload of {} values does not hold {parts} vectors of {p}",
            values.len()
        )));
    }
    values
        .chunks_exact(p.max(1))
        .take(parts)
        .map(|c| like.with_values(c.to_vec()).map_err(ProtocolError::from))
        .collect()
}

fn compute_time(mode: DurationMode, seconds_per_flop: f64, flops: f64, wall: std::time::Duration) -> SimDuration {
    match mode {
        DurationMode::Simulated => SimDuration::from_secs_f64(flops * seconds_per_flop),
        DurationMode::Measured => SimDuration::from_std(wall),
    }
}

fn diverged(round: usize, client: Option<usize>) -> ProtocolError {
    ProtocolError::Diverged { round, client }
}

fn map_client_err(e: ProtocolError, round: usize, client: usize) -> ProtocolError {
    match e {
        ProtocolError::Nn(NnError::NonFinite { .. }) => diverged(round, Some(client)),
        other => other,
    }
}

/// Runs rounds of select, train, aggregate and validate until a stop condition.
pub fn run_training(
    spec: &ModelSpec,
    strategy: &dyn FlStrategy,
    clients: &[ClientDataset],
    initial: ParamVector,
    opts: &RunOptions,
) -> Result<TrainingRun, ProtocolError> {
    let n = clients.len();
    if n == 0 {
        return Err(ProtocolError::Precondition("at least one client is required".into()));
    }
    if let Some(bad) = clients.iter().position(|c| c.client_id >= n) {
        return Err(ProtocolError::Precondition(format!("client at position {bad} has an id >= {n}")));
    }
    opts.network.validate().map_err(ProtocolError::Precondition)?;
    let fwd_flops = spec.forward_flops()?;
    let p_len = initial.len();
    let n_moments = strategy.download_moments();
    let time = |flops: f64, wall| compute_time(opts.durations, opts.seconds_per_flop, flops, wall);
    let net = opts.network;

    let mut server = ServerState {
        optimizer: strategy.server_optimizer(&initial),
        params: initial.clone(),
        version: 0,
    };
    let mut states = vec![ClientState::default(); n];
    let mut chan = Channel {
        quantize: opts.quantize_on_wire,
        client_sent: vec![0; n],
        client_received: vec![0; n],
        server_sent: 0,
        server_received: 0,
        messages: 0,
    };
    let mut traces = Vec::new();
    let mut best = (f64::INFINITY, initial.clone(), 0usize);
    let mut since_best = 0usize;
    let mut stop_reason = StopReason::MaxRound;

    for round in 1..=opts.stop.max_round {
        let r32 = round as u32;
        let (sent0, recv0, msg0) = (chan.server_sent, chan.server_received, chan.messages);
        let mut d = Substeps::default();

        // Init: pick participants and notify them.
        let t = Instant::now();
        let selected = strategy.select(n, round);
        let wall = t.elapsed();
        if selected.is_empty() || selected.iter().any(|&c| c >= n) || selected.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ProtocolError::Precondition(format!(
                "strategy selected invalid client set {selected:?}"
            )));
        }
        let sizes: Vec<u64> = selected
            .iter()
            .map(|&c| chan.send(Message::header_only(MessageKind::Init, r32, SERVER_ID, c as u32)).1)
            .collect();
        d.init = time(0.0, wall) + net.fan_out(&sizes);

        // TraReq: weights go only to clients without the current global copy.
        let mut downloads: Vec<Downloaded> = Vec::with_capacity(selected.len());
        let mut sizes = Vec::with_capacity(selected.len());
        for &c in &selected {
            let stale = states[c].version != Some(server.version);
            let mut values = Vec::new();
            if stale {
                values.extend_from_slice(server.params.values());
            }
            if n_moments > 0 {
                for m in server.optimizer.moments.iter().take(n_moments) {
                    values.extend_from_slice(m.values());
                }
                values.push(server.optimizer.step as f64);
            }
            let msg = Message {
                kind: if stale {
                    MessageKind::WeightBroadcast
                } else {
                    MessageKind::TrainRequest
                },
                flags: FLAG_TRAIN,
                values,
                ..Message::header_only(MessageKind::TrainRequest, r32, SERVER_ID, c as u32)
            };
            let (got, bytes) = chan.send(msg);
            sizes.push(bytes);
            let offset = if stale { p_len } else { 0 };
            if stale {
                states[c].params = Some(server.params.with_values(got.values[..p_len].to_vec())?);
                states[c].version = Some(server.version);
            }
            let tail = &got.values[offset..];
            downloads.push(if n_moments > 0 {
                Downloaded {
                    moments: split_payload(&server.params, &tail[..tail.len() - 1], n_moments)?,
                    step: tail[tail.len() - 1] as u64,
                }
            } else {
                Downloaded::default()
            });
        }
        d.tra_req = net.fan_out(&sizes);

        // TraRun: clients compute concurrently; results are folded in id order.
        let outcomes: Vec<(usize, Result<ClientUpdate, ProtocolError>, std::time::Duration)> = selected
            .par_iter()
            .zip(downloads.par_iter())
            .map(|(&c, download)| {
                let t = Instant::now();
                let params = states[c].params.as_ref().expect("weights delivered at TraReq");
                let u = strategy.client_update(spec, params, download, &states[c], &clients[c], round);
                (c, u, t.elapsed())
            })
            .collect();
        let mut updates = Vec::with_capacity(outcomes.len());
        let mut run = SimDuration::ZERO;
        for (c, u, wall) in outcomes {
            let mut u = u.map_err(|e| map_client_err(e, round, c))?;
            if !u.loss.is_finite() || !u.payload.iter().all(ParamVector::is_finite) {
                return Err(diverged(round, Some(c)));
            }
            run = run.max(time(u.flops, wall));
            states[c].optimizer = u.optimizer.take();
            states[c].version = None;
            updates.push((c, u));
        }
        d.tra_run = run;

        // TraSync: uploads queue into the server one after another.
        let mut sizes = Vec::with_capacity(updates.len());
        let mut received = Vec::with_capacity(updates.len());
        for (c, u) in updates {
            let mut values: Vec<f64> = u.payload.iter().flat_map(|v| v.values().iter().copied()).collect();
            values.extend_from_slice(&u.scalars);
            let msg = Message {
                values,
                ..Message::header_only(MessageKind::WeightUpload, r32, c as u32, SERVER_ID)
            };
            let (got, bytes) = chan.send(msg);
            sizes.push(bytes);
            let (vecs, scalars) = got.values.split_at(got.values.len() - u.scalars.len());
            let payload = split_payload(&server.params, vecs, u.payload.len())?;
            received.push((
                clients[c].n_k(),
                ClientUpdate {
                    payload,
                    scalars: scalars.to_vec(),
                    ..u
                },
            ));
        }
        d.tra_sync = net.fan_in(&sizes);
        let train_loss = weighted_mean(received.iter().map(|(nk, u)| (*nk, u.loss)));

        // TraAgg.
        let t = Instant::now();
        let agg_flops = strategy.aggregate(&mut server, &received)?;
        d.tra_agg = time(agg_flops, t.elapsed());
        server.version += 1;
        if !server.params.is_finite() {
            return Err(diverged(round, None));
        }

        // ValReq: broadcast the new global model.
        let validators: Vec<usize> = if opts.lazy { selected.clone() } else { (0..n).collect() };
        let mut sizes = Vec::with_capacity(validators.len());
        for &c in &validators {
            let stale = states[c].version != Some(server.version);
            let msg = if stale {
                Message {
                    kind: MessageKind::WeightBroadcast,
                    flags: FLAG_VALIDATE,
                    values: server.params.values().to_vec(),
                    ..Message::header_only(MessageKind::ValRequest, r32, SERVER_ID, c as u32)
                }
            } else {
                Message::header_only(MessageKind::ValRequest, r32, SERVER_ID, c as u32)
            };
            let (got, bytes) = chan.send(msg);
            sizes.push(bytes);
            if stale {
                states[c].params = Some(server.params.with_values(got.values)?);
                states[c].version = Some(server.version);
            }
        }
        d.val_req = net.fan_out(&sizes);

        // ValRun.
        let results: Vec<(usize, Result<(f64, usize, usize), NnError>, std::time::Duration)> = validators
            .par_iter()
            .map(|&c| {
                let t = Instant::now();
                let val = &clients[c].val;
                let r = if val.is_empty() {
                    Ok((0.0, 0, 0))
                } else {
                    let params = states[c].params.as_ref().expect("weights delivered at ValReq");
                    nn::evaluate(spec, params, &val.images, &val.labels).map(|(l, k)| (l, k, val.len()))
                };
                (c, r, t.elapsed())
            })
            .collect();
        let mut run = SimDuration::ZERO;
        let mut val_results = Vec::with_capacity(results.len());
        for (c, r, wall) in results {
            let r = r.map_err(|e| map_client_err(e.into(), round, c))?;
            run = run.max(time(r.2 as f64 * fwd_flops, wall));
            val_results.push((c, r));
        }
        d.val_run = run;

        // ValSync.
        let mut sizes = Vec::with_capacity(val_results.len());
        let mut metrics = Vec::with_capacity(val_results.len());
        for (c, (loss, correct, count)) in val_results {
            let msg = Message {
                flags: FLAG_VALIDATE,
                values: vec![loss, correct as f64, count as f64],
                ..Message::header_only(MessageKind::ValResult, r32, c as u32, SERVER_ID)
            };
            let (got, bytes) = chan.send(msg);
            sizes.push(bytes);
            metrics.push((clients[c].n_k(), got.values));
        }
        d.val_sync = net.fan_in(&sizes);

        // ValAgg: n_k-weighted means over clients that hold validation data.
        let t = Instant::now();
        let with_data: Vec<&(usize, Vec<f64>)> = metrics.iter().filter(|(_, v)| v[2] > 0.0).collect();
        let val_loss = weighted_mean(with_data.iter().map(|(nk, v)| (*nk, v[0])));
        let val_acc = weighted_mean(with_data.iter().map(|(nk, v)| (*nk, v[1] / v[2])));
        d.val_agg = time(4.0 * metrics.len() as f64, t.elapsed());
        if !val_loss.is_finite() && !with_data.is_empty() {
            return Err(diverged(round, None));
        }

        traces.push(RoundTrace {
            round,
            durations: d,
            bytes_server_sent: chan.server_sent - sent0,
            bytes_server_received: chan.server_received - recv0,
            messages: chan.messages - msg0,
            participating_clients: selected,
            train_loss,
            val_loss,
            val_acc,
        });

        if val_loss < best.0 {
            best = (val_loss, server.params.clone(), round);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if opts.stop.target_val_acc.is_some_and(|t| val_acc >= t) {
            stop_reason = StopReason::TargetReached;
            break;
        }
        if opts.stop.patience > 0 && since_best >= opts.stop.patience {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }

    Ok(TrainingRun {
        traces,
        stop_reason,
        best_params: best.1,
        best_round: best.2,
        final_params: server.params,
        client_bytes_sent: chan.client_sent,
        client_bytes_received: chan.client_received,
    })
}

fn weighted_mean(items: impl Iterator<Item = (usize, f64)>) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (w, v) in items {
        num += w as f64 * v;
        den += w as f64;
    }
    if den > 0.0 {
        num / den
    } else {
        f64::NAN
    }
}
