//! The cloud side: owns the middle segment's parameters, runs its
//! forward/backward for every client batch, coordinates the epoch barrier,
//! and averages the uploaded extractors.
//!
//! [`CloudCore`] is transport-free and embeddable; [`serve_connections`]
//! drives it over any [`Transport`]. Connections are serviced one frame at a
//! time in ascending client-id rotation, so cloud updates land in a
//! reproducible order and a run is bit-deterministic regardless of transport.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::checkpoint::{decode_records, encode_records, params_checksum, CheckpointError};
use crate::model::{
    backward, chain_shapes, forward, init_parameters, split, FeatureShape, ForwardCache,
    ModelError, ModelSpec, Parameters, SplitPlan,
};
use crate::protocol::{
    self, error_code, read_frame, write_frame, ErrorInfo, Frame, FrameType, ProtocolError,
    TrainRequest,
};
use crate::tensor::Rng;
use crate::transport::Transport;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("client {client}: {message} (code {code})")]
    Reject {
        client: u32,
        code: u16,
        message: String,
    },
    #[error("client {client} reported: {message}")]
    ClientReported { client: u32, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServerError {
    fn reject(client: u32, code: u16, message: impl Into<String>) -> ServerError {
        ServerError::Reject {
            client,
            code,
            message: message.into(),
        }
    }

    /// Error frame to send back before closing the session.
    pub fn to_error_info(&self) -> ErrorInfo {
        let (code, message) = match self {
            ServerError::Reject { code, message, .. } => (*code, message.clone()),
            ServerError::Protocol(e) => (error_code::PROTOCOL, e.to_string()),
            other => (error_code::INTERNAL, other.to_string()),
        };
        ErrorInfo { code, message }
    }
}

/// What the core wants sent in response to one handled frame.
#[derive(Debug)]
pub enum Outcome {
    /// Single reply to the originating client.
    Reply(Frame),
    /// Barrier release: per-client frame lists, ascending client id.
    Fanout(Vec<(u32, Vec<Frame>)>),
}

struct Session {
    epoch: u32,
    pending: Option<(u32, ForwardCache)>,
    upload: Option<Parameters>,
    done: bool,
    initial_checksum: u32,
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub model: ModelSpec,
    pub depth: u8,
    pub lr: f32,
    pub expected_clients: u32,
    pub seed: u64,
    /// Record a cloud-parameter checksum after every gradient application.
    pub trace: bool,
}

/// Transport-free server state machine. One instance serves one training run.
pub struct CloudCore {
    model: ModelSpec,
    plan: SplitPlan,
    cut_shape: FeatureShape,
    params: Parameters,
    lr: f32,
    expected_clients: u32,
    sessions: BTreeMap<u32, Session>,
    share: Option<bool>,
    epochs: Option<u32>,
    log_lines: Vec<String>,
    trace: Option<Vec<u32>>,
}

impl CloudCore {
    pub fn new(config: &ServerConfig) -> Result<CloudCore, ServerError> {
        let shapes = config.model.validate()?;
        let plan = split(&config.model, config.depth)?;
        let cut_shape = shapes[plan.extractor.end];
        let full = init_parameters(
            &config.model.layers,
            config.model.input,
            &Rng::new(config.seed).derive("init"),
        )?;
        Ok(CloudCore {
            model: config.model.clone(),
            plan: plan.clone(),
            cut_shape,
            params: full.slice(&plan.cloud),
            lr: config.lr,
            expected_clients: config.expected_clients,
            sessions: BTreeMap::new(),
            share: None,
            epochs: None,
            log_lines: Vec::new(),
            trace: config.trace.then(Vec::new),
        })
    }

    pub fn cloud_params(&self) -> &Parameters {
        &self.params
    }

    pub fn log_lines(&self) -> &[String] {
        &self.log_lines
    }

    pub fn trace(&self) -> &[u32] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn registered_clients(&self) -> usize {
        self.sessions.len()
    }

    /// Client has sent EPOCH_DONE and is blocked until the barrier releases.
    pub fn awaiting_barrier(&self, client: u32) -> bool {
        self.sessions.get(&client).is_some_and(|s| s.done)
    }

    /// Client has passed the final barrier; a clean close is legal now.
    pub fn completed(&self, client: u32) -> bool {
        match (self.epochs, self.sessions.get(&client)) {
            (Some(epochs), Some(session)) => session.epoch >= epochs,
            _ => false,
        }
    }

    pub fn handle(&mut self, frame: &Frame) -> Result<Outcome, ServerError> {
        match frame.frame_type {
            FrameType::TrainRequest => {
                self.register(frame)?;
                Ok(Outcome::Fanout(Vec::new()))
            }
            FrameType::FeatureBatch => self.handle_feature(frame).map(Outcome::Reply),
            FrameType::GradientBatch => self.handle_gradient(frame).map(Outcome::Reply),
            FrameType::WeightUpload => {
                self.handle_upload(frame)?;
                Ok(Outcome::Fanout(Vec::new()))
            }
            FrameType::EpochDone => self.handle_epoch_done(frame),
            FrameType::EvalRequest => self.handle_eval(frame).map(Outcome::Reply),
            FrameType::Error => {
                let info = ErrorInfo::decode(&frame.payload).unwrap_or(ErrorInfo {
                    code: error_code::INTERNAL,
                    message: "unparseable".into(),
                });
                Err(ServerError::ClientReported {
                    client: frame.client_id,
                    message: format!("{} (code {})", info.message, info.code),
                })
            }
            other => Err(ServerError::reject(
                frame.client_id,
                error_code::PROTOCOL,
                format!("unexpected {other:?} frame from client"),
            )),
        }
    }

    /// Register one TRAIN_REQUEST. Depth, sharing mode, and epoch count must
    /// agree across clients.
    pub fn register(&mut self, frame: &Frame) -> Result<(), ServerError> {
        let client = frame.client_id;
        let request = TrainRequest::decode(&frame.payload)
            .map_err(|e| ServerError::reject(client, error_code::PROTOCOL, e.to_string()))?;
        if request.depth != self.plan.depth {
            return Err(ServerError::reject(
                client,
                error_code::CONFIG_MISMATCH,
                format!(
                    "client depth {} does not match server depth {}",
                    request.depth, self.plan.depth
                ),
            ));
        }
        if self.sessions.contains_key(&client) {
            return Err(ServerError::reject(
                client,
                error_code::CONFIG_MISMATCH,
                "duplicate client id",
            ));
        }
        if self.sessions.len() as u32 >= self.expected_clients {
            return Err(ServerError::reject(
                client,
                error_code::CONFIG_MISMATCH,
                "more clients than expected",
            ));
        }
        match (self.share, self.epochs) {
            (None, None) => {
                self.share = Some(request.share);
                self.epochs = Some(request.epochs);
            }
            (Some(share), Some(epochs)) if share == request.share && epochs == request.epochs => {}
            _ => {
                return Err(ServerError::reject(
                    client,
                    error_code::CONFIG_MISMATCH,
                    "sharing mode or epoch count differs between clients",
                ))
            }
        }
        self.sessions.insert(
            client,
            Session {
                epoch: 0,
                pending: None,
                upload: None,
                done: false,
                initial_checksum: request.extractor_checksum,
            },
        );
        Ok(())
    }

    /// After all expected clients registered: in sharing mode, every client
    /// must start from the same initialized extractor (checksum exchange).
    pub fn finish_registration(&self) -> Result<(), ServerError> {
        if self.sessions.len() as u32 != self.expected_clients {
            return Err(ServerError::reject(
                0,
                error_code::CONFIG_MISMATCH,
                format!(
                    "{} clients registered, expected {}",
                    self.sessions.len(),
                    self.expected_clients
                ),
            ));
        }
        if self.share == Some(true) {
            let mut checksums = self.sessions.values().map(|s| s.initial_checksum);
            let first = checksums.next().unwrap();
            if checksums.any(|c| c != first) {
                return Err(ServerError::reject(
                    0,
                    error_code::CONFIG_MISMATCH,
                    "clients do not share the same initialized extractor",
                ));
            }
        }
        Ok(())
    }

    fn session(&mut self, client: u32) -> Result<&mut Session, ServerError> {
        self.sessions
            .get_mut(&client)
            .ok_or_else(|| ServerError::reject(client, error_code::UNKNOWN_SESSION, "no session"))
    }

    fn check_cut_shape(&self, client: u32, shape: &[usize]) -> Result<(), ServerError> {
        let ok = match (self.cut_shape, shape) {
            (FeatureShape::Image { c, h, w }, [_, sc, sh, sw]) => {
                (c, h, w) == (*sc, *sh, *sw)
            }
            (FeatureShape::Flat { d }, [_, sd]) => d == *sd,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(ServerError::reject(
                client,
                error_code::SHAPE_MISMATCH,
                format!("features {shape:?} do not match the cut shape {}", self.cut_shape),
            ))
        }
    }

    /// Cloud-part forward; activations are cached for the matching backward.
    fn handle_feature(&mut self, frame: &Frame) -> Result<Frame, ServerError> {
        let client = frame.client_id;
        let features = protocol::decode_tensor(&frame.payload)
            .map_err(|e| ServerError::reject(client, error_code::PROTOCOL, e.to_string()))?;
        self.check_cut_shape(client, features.shape())?;
        let session = self.sessions.get(&client).ok_or_else(|| {
            ServerError::reject(client, error_code::UNKNOWN_SESSION, "no session")
        })?;
        if session.epoch != frame.epoch {
            return Err(ServerError::reject(
                client,
                error_code::PROTOCOL,
                format!("epoch {} but session is at {}", frame.epoch, session.epoch),
            ));
        }
        if let Some((pending, _)) = &session.pending {
            return Err(ServerError::reject(
                client,
                error_code::PROTOCOL,
                format!(
                    "feature batch {} while batch {pending} is still outstanding",
                    frame.batch_id
                ),
            ));
        }
        let (out, cache) = forward(
            &self.model.layers,
            self.plan.cloud.clone(),
            &self.params,
            &features,
        )?;
        self.session(client)?.pending = Some((frame.batch_id, cache));
        Ok(
            Frame::new(FrameType::FeatureBatch, client, frame.epoch, frame.batch_id)
                .with_payload(protocol::encode_tensor(&out)),
        )
    }

    /// Cloud-part backward plus SGD on the cloud parameters; the cached
    /// forward is consumed exactly once.
    fn handle_gradient(&mut self, frame: &Frame) -> Result<Frame, ServerError> {
        let client = frame.client_id;
        let grad = protocol::decode_tensor(&frame.payload)
            .map_err(|e| ServerError::reject(client, error_code::PROTOCOL, e.to_string()))?;
        let session = self.session(client)?;
        let (batch_id, cache) = match session.pending.take() {
            Some(p) => p,
            None => {
                return Err(ServerError::reject(
                    client,
                    error_code::MISSING_CACHE,
                    format!("gradient for batch {} without a cached forward", frame.batch_id),
                ))
            }
        };
        if batch_id != frame.batch_id {
            return Err(ServerError::reject(
                client,
                error_code::MISSING_CACHE,
                format!("gradient for batch {} but batch {batch_id} is cached", frame.batch_id),
            ));
        }
        let (grad_cut, grads) = backward(
            &self.model.layers,
            self.plan.cloud.clone(),
            &self.params,
            &cache,
            &grad,
        )?;
        self.params.sgd_step(&grads, self.lr)?;
        self.log_lines
            .push(format!("{},{},{},", frame.epoch, frame.batch_id, client));
        if let Some(trace) = &mut self.trace {
            trace.push(params_checksum(&self.params));
        }
        Ok(
            Frame::new(FrameType::GradientBatch, client, frame.epoch, frame.batch_id)
                .with_payload(protocol::encode_tensor(&grad_cut)),
        )
    }

    fn handle_upload(&mut self, frame: &Frame) -> Result<(), ServerError> {
        let client = frame.client_id;
        let params = decode_records(&frame.payload)?;
        let session = self.session(client)?;
        if session.upload.is_some() {
            return Err(ServerError::reject(
                client,
                error_code::PROTOCOL,
                "duplicate weight upload this epoch",
            ));
        }
        session.upload = Some(params);
        Ok(())
    }

    /// Marks the client at the barrier; the last arrival triggers averaging
    /// and the broadcast fan-out.
    fn handle_epoch_done(&mut self, frame: &Frame) -> Result<Outcome, ServerError> {
        let client = frame.client_id;
        let loss = protocol::decode_loss(&frame.payload);
        let session = self.session(client)?;
        if session.upload.is_none() {
            return Err(ServerError::reject(
                client,
                error_code::PROTOCOL,
                "epoch done before weight upload",
            ));
        }
        if session.done {
            return Err(ServerError::reject(
                client,
                error_code::PROTOCOL,
                "duplicate epoch done",
            ));
        }
        session.done = true;
        self.log_lines.push(format!(
            "{},,{},{}",
            frame.epoch,
            client,
            loss.map(|l| format!("{l:.6}")).unwrap_or_default()
        ));
        if self.sessions.values().all(|s| s.done) {
            self.barrier()
        } else {
            Ok(Outcome::Fanout(Vec::new()))
        }
    }

    /// Average uploaded extractors (ascending client id), then broadcast and
    /// commit. Runs exactly once per epoch, after every client arrives.
    fn barrier(&mut self) -> Result<Outcome, ServerError> {
        if let Some((client, s)) = self.sessions.iter().find(|(_, s)| s.pending.is_some()) {
            return Err(ServerError::reject(
                *client,
                error_code::INTERNAL,
                format!(
                    "activation cache not empty at barrier (batch {})",
                    s.pending.as_ref().map(|(b, _)| *b).unwrap()
                ),
            ));
        }
        let epoch = self.sessions.values().next().map(|s| s.epoch).unwrap_or(0);
        let uploads: Vec<(u32, Parameters)> = self
            .sessions
            .iter_mut()
            .map(|(&c, s)| (c, s.upload.take().expect("checked at epoch done")))
            .collect();
        let non_empty: Vec<&Parameters> = uploads
            .iter()
            .map(|(_, p)| p)
            .filter(|p| !p.entries.is_empty())
            .collect();
        let (broadcast_payload, commit_payload) = if non_empty.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            if non_empty.len() != uploads.len() {
                return Err(ServerError::reject(
                    0,
                    error_code::CONFIG_MISMATCH,
                    "some clients uploaded weights and some did not",
                ));
            }
            let average = average_extractors(&non_empty).map_err(|message| {
                ServerError::reject(0, error_code::SHAPE_MISMATCH, message)
            })?;
            let checksum = params_checksum(&average);
            (encode_records(&average), checksum.to_le_bytes().to_vec())
        };
        let mut fanout = Vec::new();
        for (&client, session) in self.sessions.iter_mut() {
            session.epoch += 1;
            session.done = false;
            fanout.push((
                client,
                vec![
                    Frame::new(FrameType::WeightBroadcast, client, epoch, 0)
                        .with_payload(broadcast_payload.clone()),
                    Frame::new(FrameType::AvgCommit, client, epoch, 0)
                        .with_payload(commit_payload.clone()),
                ],
            ));
        }
        Ok(Outcome::Fanout(fanout))
    }

    /// Stateless cloud forward for test-set batches.
    fn handle_eval(&mut self, frame: &Frame) -> Result<Frame, ServerError> {
        let client = frame.client_id;
        let features = protocol::decode_tensor(&frame.payload)
            .map_err(|e| ServerError::reject(client, error_code::PROTOCOL, e.to_string()))?;
        self.check_cut_shape(client, features.shape())?;
        if !self.sessions.contains_key(&client) {
            return Err(ServerError::reject(
                client,
                error_code::UNKNOWN_SESSION,
                "no session",
            ));
        }
        let (out, _) = forward(
            &self.model.layers,
            self.plan.cloud.clone(),
            &self.params,
            &features,
        )?;
        Ok(
            Frame::new(FrameType::LogitsBatch, client, frame.epoch, frame.batch_id)
                .with_payload(protocol::encode_tensor(&out)),
        )
    }

    /// Shapes of the features expected at the cut.
    pub fn cut_shape(&self) -> FeatureShape {
        self.cut_shape
    }

    /// Output shape of the cloud part (what the local classifier consumes).
    pub fn cloud_output_shape(&self) -> Result<FeatureShape, ModelError> {
        let shapes = chain_shapes(&self.model.layers, self.model.input)?;
        Ok(shapes[self.plan.cloud.end])
    }
}

/// Elementwise arithmetic mean of the uploads, summed in the order given
/// (callers pass ascending client id). All uploads must carry identical
/// entries. Accumulation runs in f64 so identical uploads average back to
/// themselves bit-exactly for any client count.
pub fn average_extractors(uploads: &[&Parameters]) -> Result<Parameters, String> {
    let first = uploads.first().ok_or("no uploads to average")?;
    let mut acc: Vec<Vec<f64>> = first
        .entries
        .iter()
        .map(|e| e.tensor.data().iter().map(|&v| v as f64).collect())
        .collect();
    for other in &uploads[1..] {
        if other.entries.len() != first.entries.len() {
            return Err(format!(
                "upload with {} tensors cannot be averaged with {}",
                other.entries.len(),
                first.entries.len()
            ));
        }
        for ((a, o), f) in acc.iter_mut().zip(&other.entries).zip(&first.entries) {
            if f.name != o.name || f.tensor.shape() != o.tensor.shape() {
                return Err(format!(
                    "upload entry {} {:?} does not match {} {:?}",
                    o.name,
                    o.tensor.shape(),
                    f.name,
                    f.tensor.shape()
                ));
            }
            for (av, &ov) in a.iter_mut().zip(o.tensor.data()) {
                *av += ov as f64;
            }
        }
    }
    let n = uploads.len() as f64;
    let mut out = (*first).clone();
    for (entry, sums) in out.entries.iter_mut().zip(&acc) {
        for (v, &sum) in entry.tensor.data_mut().iter_mut().zip(sums) {
            *v = (sum / n) as f32;
        }
    }
    Ok(out)
}

/// Everything a finished serve loop leaves behind.
pub struct ServeOutcome {
    pub log_lines: Vec<String>,
    pub cloud_params: Parameters,
    pub cloud_trace: Vec<u32>,
}

fn send_error_everywhere<T: Transport>(conns: &mut [(u32, T)], info: &ErrorInfo) {
    for (client, conn) in conns.iter_mut() {
        let frame =
            Frame::new(FrameType::Error, *client, 0, 0).with_payload(info.encode());
        let _ = write_frame(conn, &frame);
    }
}

/// Serve one training run over the given connections. Each connection must
/// open with TRAIN_REQUEST; afterwards clients are serviced one frame per
/// turn in ascending client-id order until every client completes its epochs
/// and closes.
pub fn serve_connections<T: Transport>(
    config: &ServerConfig,
    conns: Vec<T>,
) -> Result<ServeOutcome, ServerError> {
    let mut core = CloudCore::new(config)?;
    let mut sessions: Vec<(u32, T)> = Vec::with_capacity(conns.len());
    for mut conn in conns {
        let frame = match read_frame(&mut conn) {
            Ok(f) if f.frame_type == FrameType::TrainRequest => f,
            Ok(f) => {
                let err = ServerError::reject(
                    f.client_id,
                    error_code::PROTOCOL,
                    "expected TRAIN_REQUEST as the first frame",
                );
                sessions.push((f.client_id, conn));
                send_error_everywhere(&mut sessions, &err.to_error_info());
                return Err(err);
            }
            Err(e) => return Err(e.into()),
        };
        let client = frame.client_id;
        if let Err(e) = core.register(&frame) {
            sessions.push((client, conn));
            send_error_everywhere(&mut sessions, &e.to_error_info());
            return Err(e);
        }
        sessions.push((client, conn));
    }
    sessions.sort_by_key(|(client, _)| *client);
    if let Err(e) = core.finish_registration() {
        send_error_everywhere(&mut sessions, &e.to_error_info());
        return Err(e);
    }

    let mut finished = vec![false; sessions.len()];
    while finished.iter().any(|done| !done) {
        let mut serviced_any = false;
        for i in 0..sessions.len() {
            let client = sessions[i].0;
            if finished[i] || core.awaiting_barrier(client) {
                continue;
            }
            serviced_any = true;
            let frame = match read_frame(&mut sessions[i].1) {
                Ok(frame) => frame,
                Err(ProtocolError::Closed) => {
                    if core.completed(client) {
                        finished[i] = true;
                        continue;
                    }
                    let err = ServerError::reject(
                        client,
                        error_code::PROTOCOL,
                        "client closed mid-training",
                    );
                    send_error_everywhere(&mut sessions, &err.to_error_info());
                    return Err(err);
                }
                Err(e) => {
                    let err: ServerError = e.into();
                    send_error_everywhere(&mut sessions, &err.to_error_info());
                    return Err(err);
                }
            };
            if frame.client_id != client {
                let err = ServerError::reject(
                    client,
                    error_code::PROTOCOL,
                    format!("frame claims client id {}", frame.client_id),
                );
                send_error_everywhere(&mut sessions, &err.to_error_info());
                return Err(err);
            }
            match core.handle(&frame) {
                Ok(Outcome::Reply(reply)) => {
                    write_frame(&mut sessions[i].1, &reply)?;
                }
                Ok(Outcome::Fanout(fanout)) => {
                    for (target, frames) in fanout {
                        let pos = sessions
                            .iter()
                            .position(|(c, _)| *c == target)
                            .expect("fanout targets a registered client");
                        for f in frames {
                            write_frame(&mut sessions[pos].1, &f)?;
                        }
                    }
                }
                Err(e) => {
                    send_error_everywhere(&mut sessions, &e.to_error_info());
                    return Err(e);
                }
            }
        }
        if !serviced_any && finished.iter().any(|done| !done) {
            let err = ServerError::reject(
                0,
                error_code::INTERNAL,
                "rotation stalled: every open session is awaiting a barrier that cannot fire",
            );
            send_error_everywhere(&mut sessions, &err.to_error_info());
            return Err(err);
        }
    }
    Ok(ServeOutcome {
        log_lines: core.log_lines,
        cloud_params: core.params,
        cloud_trace: core.trace.unwrap_or_default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::reference_model;
    use crate::protocol::encode_tensor;
    use crate::tensor::Tensor;

    fn core_with(depth: u8, clients: u32) -> CloudCore {
        let model = reference_model(1, 28, 4).unwrap();
        let config = ServerConfig {
            model,
            depth,
            lr: 0.05,
            expected_clients: clients,
            seed: 11,
            trace: false,
        };
        let mut core = CloudCore::new(&config).unwrap();
        for client in 1..=clients {
            let req = TrainRequest {
                depth,
                share: true,
                epochs: 1,
                extractor_checksum: 7,
            };
            let frame = Frame::new(FrameType::TrainRequest, client, 0, 0)
                .with_payload(req.encode());
            core.register(&frame).unwrap();
        }
        core.finish_registration().unwrap();
        core
    }

    fn feature_frame(client: u32, batch: u32, shape: &[usize]) -> Frame {
        let features = Tensor::from_fn(shape, |i| (i as f32 * 0.01).sin());
        Frame::new(FrameType::FeatureBatch, client, 0, batch)
            .with_payload(encode_tensor(&features))
    }

    #[test]
    fn depth3_cloud_is_identity() {
        let mut core = core_with(3, 1);
        let frame = feature_frame(1, 0, &[2, 64, 7, 7]);
        let reply = match core.handle(&frame).unwrap() {
            Outcome::Reply(f) => f,
            _ => panic!("expected reply"),
        };
        assert_eq!(reply.payload, frame.payload);
    }

    #[test]
    fn depth1_zero_input_matches_in_process_oracle() {
        let mut core = core_with(1, 1);
        let zeros = Tensor::zeros(&[1, 16, 14, 14]);
        let frame = Frame::new(FrameType::FeatureBatch, 1, 0, 0)
            .with_payload(encode_tensor(&zeros));
        let reply = match core.handle(&frame).unwrap() {
            Outcome::Reply(f) => f,
            _ => panic!("expected reply"),
        };
        let processed = protocol::decode_tensor(&reply.payload).unwrap();

        // Independent path: run the same cloud layers directly.
        let model = reference_model(1, 28, 4).unwrap();
        let plan = split(&model, 1).unwrap();
        let full = init_parameters(&model.layers, model.input, &Rng::new(11).derive("init"))
            .unwrap();
        let (expected, _) =
            forward(&model.layers, plan.cloud.clone(), &full.slice(&plan.cloud), &zeros).unwrap();
        assert_eq!(processed, expected);
    }

    #[test]
    fn gradient_without_forward_is_rejected() {
        let mut core = core_with(1, 1);
        let grad = Tensor::zeros(&[1, 16, 14, 14]);
        let frame = Frame::new(FrameType::GradientBatch, 1, 0, 0)
            .with_payload(encode_tensor(&grad));
        let err = core.handle(&frame).unwrap_err();
        assert!(matches!(
            err,
            ServerError::Reject {
                code: error_code::MISSING_CACHE,
                ..
            }
        ));
    }

    #[test]
    fn replayed_batch_id_is_rejected_after_consumption() {
        let mut core = core_with(1, 1);
        core.handle(&feature_frame(1, 5, &[1, 16, 14, 14])).unwrap();
        let grad = Tensor::zeros(&[1, 64, 7, 7]);
        let g = Frame::new(FrameType::GradientBatch, 1, 0, 5)
            .with_payload(encode_tensor(&grad));
        core.handle(&g).unwrap();
        // Cache consumed exactly once; a replay has nothing to match.
        let err = core.handle(&g).unwrap_err();
        assert!(matches!(
            err,
            ServerError::Reject {
                code: error_code::MISSING_CACHE,
                ..
            }
        ));
    }

    #[test]
    fn zero_gradient_leaves_cloud_params_unchanged() {
        let mut core = core_with(1, 1);
        let before = core.cloud_params().clone();
        core.handle(&feature_frame(1, 0, &[1, 16, 14, 14])).unwrap();
        let grad = Tensor::zeros(&[1, 64, 7, 7]);
        let g = Frame::new(FrameType::GradientBatch, 1, 0, 0)
            .with_payload(encode_tensor(&grad));
        let reply = match core.handle(&g).unwrap() {
            Outcome::Reply(f) => f,
            _ => panic!("expected reply"),
        };
        let grad_out = protocol::decode_tensor(&reply.payload).unwrap();
        assert!(grad_out.data().iter().all(|&v| v == 0.0));
        assert_eq!(core.cloud_params(), &before);
    }

    #[test]
    fn wrong_cut_shape_is_rejected_with_shape_code() {
        let mut core = core_with(1, 1);
        let err = core
            .handle(&feature_frame(1, 0, &[1, 16, 13, 14]))
            .unwrap_err();
        assert!(matches!(
            err,
            ServerError::Reject {
                code: error_code::SHAPE_MISMATCH,
                ..
            }
        ));
    }

    #[test]
    fn unknown_client_is_rejected() {
        let mut core = core_with(1, 1);
        let err = core
            .handle(&feature_frame(9, 0, &[1, 16, 14, 14]))
            .unwrap_err();
        assert!(matches!(
            err,
            ServerError::Reject {
                code: error_code::UNKNOWN_SESSION,
                ..
            }
        ));
    }

    #[test]
    fn averaging_is_idempotent_on_identical_uploads() {
        let model = reference_model(1, 28, 4).unwrap();
        let plan = split(&model, 2).unwrap();
        let full =
            init_parameters(&model.layers, model.input, &Rng::new(5).derive("init")).unwrap();
        let ext = full.slice(&plan.extractor);
        let avg = average_extractors(&[&ext, &ext, &ext]).unwrap();
        assert_eq!(avg, ext);
    }

    #[test]
    fn averaging_w_and_minus_w_is_zero() {
        let model = reference_model(1, 28, 4).unwrap();
        let plan = split(&model, 1).unwrap();
        let full =
            init_parameters(&model.layers, model.input, &Rng::new(6).derive("init")).unwrap();
        let w = full.slice(&plan.extractor);
        let mut neg = w.clone();
        for e in neg.entries.iter_mut() {
            for v in e.tensor.data_mut() {
                *v = -*v;
            }
        }
        let avg = average_extractors(&[&w, &neg]).unwrap();
        assert!(avg
            .entries
            .iter()
            .all(|e| e.tensor.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn averaging_matches_independent_mean_exactly() {
        let model = reference_model(1, 28, 4).unwrap();
        let plan = split(&model, 1).unwrap();
        let uploads: Vec<Parameters> = (0..3)
            .map(|i| {
                init_parameters(&model.layers, model.input, &Rng::new(100 + i).derive("init"))
                    .unwrap()
                    .slice(&plan.extractor)
            })
            .collect();
        let refs: Vec<&Parameters> = uploads.iter().collect();
        let avg = average_extractors(&refs).unwrap();
        // Independent recompute with the same ascending summation order.
        for (idx, entry) in avg.entries.iter().enumerate() {
            for (j, &v) in entry.tensor.data().iter().enumerate() {
                let expected = ((uploads[0].entries[idx].tensor.data()[j] as f64
                    + uploads[1].entries[idx].tensor.data()[j] as f64
                    + uploads[2].entries[idx].tensor.data()[j] as f64)
                    / 3.0) as f32;
                assert_eq!(v, expected, "entry {idx} element {j}");
            }
        }
    }

    #[test]
    fn shape_mismatch_across_uploads_aborts() {
        let model = reference_model(1, 28, 4).unwrap();
        let d1 = split(&model, 1).unwrap();
        let d2 = split(&model, 2).unwrap();
        let full =
            init_parameters(&model.layers, model.input, &Rng::new(8).derive("init")).unwrap();
        let a = full.slice(&d1.extractor);
        let b = full.slice(&d2.extractor);
        assert!(average_extractors(&[&a, &b]).is_err());
    }
}
