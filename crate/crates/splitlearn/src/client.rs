//! Client-side training: owns the extractor and classifier, streams batches
//! through the cloud, computes the loss locally (labels never leave the
//! client), and takes part in the epoch barrier. Also the monolithic trainer
//! the distributed path is checked against.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::checkpoint::{decode_records, encode_records, params_checksum};
use crate::data::{DataError, Dataset};
use crate::model::{
    backward, forward, init_parameters, split, ModelError, ModelSpec, Parameters, SplitPlan,
};
use crate::ops::{self, OpsError};
use crate::protocol::{
    self, error_code, read_frame, write_frame, ErrorInfo, Frame, FrameType, ProtocolError,
    TrainRequest,
};
use crate::tensor::{Rng, Tensor};
use crate::transport::Transport;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid client config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ops(#[from] OpsError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("server error {code}: {message}")]
    Server { code: u16, message: String },
    #[error("expected {expected:?} frame, got {got:?}")]
    UnexpectedFrame {
        expected: FrameType,
        got: FrameType,
    },
    #[error("epoch barrier timed out after {0:?}")]
    BarrierTimeout(Duration),
    #[error("extractor checksum does not match the committed average")]
    ChecksumMismatch,
}

pub const DEFAULT_BARRIER_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Clone, Debug)]
pub struct ClientConfig {
    pub client_id: u32,
    pub depth: u8,
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    pub share: bool,
    pub barrier_timeout: Duration,
    /// Record (extractor, classifier) checksums after every batch.
    pub trace: bool,
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.batch_size < 1 {
            return Err(ClientError::Config("batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(ClientError::Config("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(ClientError::Config("lr must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: u32,
    pub train_loss: f32,
    pub test_accuracy: f32,
}

/// What one training run reports back.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub client_id: u32,
    pub rows: Vec<EpochRow>,
    pub wall_time: Duration,
    pub checkpoint_path: Option<PathBuf>,
    /// Extractor checksum after each epoch's barrier (or update, for the
    /// monolithic path).
    pub extractor_checksums: Vec<u32>,
    /// Per-batch (extractor, classifier) checksums when tracing.
    pub param_trace: Vec<(u32, u32)>,
    /// Per-batch cloud checksums (monolithic runs only; the distributed
    /// cloud trace lives on the server).
    pub cloud_trace: Vec<u32>,
    /// Final locally held parameters: extractor + classifier (plus cloud for
    /// monolithic runs).
    pub final_params: Parameters,
}

fn epoch_order(config: &ClientConfig, len: usize, epoch: u32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = Rng::new(config.seed)
        .derive("shuffle")
        .derive_index(config.client_id as u64)
        .derive_index(epoch as u64);
    rng.shuffle(&mut order);
    order
}

fn expect_frame<T: Transport>(
    conn: &mut T,
    expected: FrameType,
    timeout: Duration,
) -> Result<Frame, ClientError> {
    let frame = match read_frame(conn) {
        Ok(f) => f,
        Err(ProtocolError::Timeout) => return Err(ClientError::BarrierTimeout(timeout)),
        Err(e) => return Err(e.into()),
    };
    match frame.frame_type {
        t if t == expected => Ok(frame),
        FrameType::Error => {
            let info = ErrorInfo::decode(&frame.payload).unwrap_or(ErrorInfo {
                code: error_code::INTERNAL,
                message: "unparseable error payload".into(),
            });
            Err(ClientError::Server {
                code: info.code,
                message: info.message,
            })
        }
        got => Err(ClientError::UnexpectedFrame { expected, got }),
    }
}

fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    let _ = best; // ties keep the first maximum
    best
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &label)| argmax_row(row) == label)
        .count()
}

/// Fraction of argmax-correct predictions of the full model on `test`.
pub fn evaluate(
    model: &ModelSpec,
    params: &Parameters,
    test: &Dataset,
    batch_size: usize,
) -> Result<f32, ClientError> {
    if test.is_empty() {
        return Err(ClientError::Data(DataError::Empty));
    }
    let indices: Vec<usize> = (0..test.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = test.batch(chunk);
        let (logits, _) = forward(&model.layers, 0..model.layers.len(), params, &x)?;
        correct += count_correct(&logits, &y);
    }
    Ok(correct as f32 / test.len() as f32)
}

/// One SGD training run against a live cloud server.
pub fn run_client<T: Transport>(
    config: &ClientConfig,
    model: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    mut conn: T,
) -> Result<TrainReport, ClientError> {
    config.validate()?;
    model.validate()?;
    if train.is_empty() {
        return Err(ClientError::Data(DataError::Empty));
    }
    let start = Instant::now();
    let plan = split(model, config.depth)?;
    let full = init_parameters(
        &model.layers,
        model.input,
        &Rng::new(config.seed).derive("init"),
    )?;
    let mut ext = full.slice(&plan.extractor);
    let mut cls = full.slice(&plan.classifier);
    drop(full); // the cloud slice lives on the server

    conn.set_read_timeout(Some(config.barrier_timeout))?;
    let request = TrainRequest {
        depth: config.depth,
        share: config.share,
        epochs: config.epochs,
        extractor_checksum: params_checksum(&ext),
    };
    write_frame(
        &mut conn,
        &Frame::new(FrameType::TrainRequest, config.client_id, 0, 0)
            .with_payload(request.encode()),
    )?;

    let mut rows = Vec::with_capacity(config.epochs as usize);
    let mut extractor_checksums = Vec::with_capacity(config.epochs as usize);
    let mut param_trace = Vec::new();

    for epoch in 0..config.epochs {
        let order = epoch_order(config, train.len(), epoch);
        let mut loss_sum = 0.0f64;
        for (batch_id, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch_id = batch_id as u32;
            let (x, labels) = train.batch(chunk);
            let (features, ext_cache) =
                forward(&model.layers, plan.extractor.clone(), &ext, &x)?;
            write_frame(
                &mut conn,
                &Frame::new(FrameType::FeatureBatch, config.client_id, epoch, batch_id)
                    .with_payload(protocol::encode_tensor(&features)),
            )?;
            let reply = expect_frame(&mut conn, FrameType::FeatureBatch, config.barrier_timeout)?;
            let processed = protocol::decode_tensor(&reply.payload)?;

            let (logits, cls_cache) =
                forward(&model.layers, plan.classifier.clone(), &cls, &processed)?;
            let (loss, dlogits) = ops::softmax_cross_entropy(&logits, &labels)?;
            loss_sum += loss as f64 * chunk.len() as f64;
            let (grad_processed, cls_grads) = backward(
                &model.layers,
                plan.classifier.clone(),
                &cls,
                &cls_cache,
                &dlogits,
            )?;
            cls.sgd_step(&cls_grads, config.lr)?;

            write_frame(
                &mut conn,
                &Frame::new(FrameType::GradientBatch, config.client_id, epoch, batch_id)
                    .with_payload(protocol::encode_tensor(&grad_processed)),
            )?;
            let reply = expect_frame(&mut conn, FrameType::GradientBatch, config.barrier_timeout)?;
            let grad_cut = protocol::decode_tensor(&reply.payload)?;

            let (_, ext_grads) = backward(
                &model.layers,
                plan.extractor.clone(),
                &ext,
                &ext_cache,
                &grad_cut,
            )?;
            ext.sgd_step(&ext_grads, config.lr)?;

            if config.trace {
                param_trace.push((params_checksum(&ext), params_checksum(&cls)));
            }
        }
        let train_loss = (loss_sum / train.len() as f64) as f32;

        // Barrier: upload (weights in sharing mode, empty otherwise), wait
        // for the averaged broadcast, install it, verify the commit.
        let upload_payload = if config.share {
            encode_records(&ext)
        } else {
            Vec::new()
        };
        write_frame(
            &mut conn,
            &Frame::new(FrameType::WeightUpload, config.client_id, epoch, 0)
                .with_payload(upload_payload),
        )?;
        write_frame(
            &mut conn,
            &Frame::new(FrameType::EpochDone, config.client_id, epoch, 0)
                .with_payload(protocol::encode_loss(train_loss)),
        )?;
        let broadcast =
            expect_frame(&mut conn, FrameType::WeightBroadcast, config.barrier_timeout)?;
        if config.share && !broadcast.payload.is_empty() {
            let averaged = decode_records(&broadcast.payload)
                .map_err(|e| ClientError::Config(format!("broadcast payload: {e}")))?;
            ext.replace_from(&averaged)?;
        }
        let commit = expect_frame(&mut conn, FrameType::AvgCommit, config.barrier_timeout)?;
        if commit.payload.len() == 4 {
            let expected = u32::from_le_bytes(commit.payload[..4].try_into().unwrap());
            if params_checksum(&ext) != expected {
                return Err(ClientError::ChecksumMismatch);
            }
        }
        extractor_checksums.push(params_checksum(&ext));

        // Per-epoch accuracy on the local test slice, middle part on the
        // server.
        let accuracy =
            evaluate_via_server(config, model, &plan, &ext, &cls, test, &mut conn, epoch)?;
        rows.push(EpochRow {
            epoch,
            train_loss,
            test_accuracy: accuracy,
        });
    }

    let mut final_params = ext.clone();
    final_params.entries.extend(cls.entries.iter().cloned());
    Ok(TrainReport {
        client_id: config.client_id,
        rows,
        wall_time: start.elapsed(),
        checkpoint_path: None,
        extractor_checksums,
        param_trace,
        cloud_trace: Vec::new(),
        final_params,
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_via_server<T: Transport>(
    config: &ClientConfig,
    model: &ModelSpec,
    plan: &SplitPlan,
    ext: &Parameters,
    cls: &Parameters,
    test: &Dataset,
    conn: &mut T,
    epoch: u32,
) -> Result<f32, ClientError> {
    if test.is_empty() {
        return Err(ClientError::Data(DataError::Empty));
    }
    let indices: Vec<usize> = (0..test.len()).collect();
    let mut correct = 0usize;
    for (batch_id, chunk) in indices.chunks(config.batch_size).enumerate() {
        let (x, labels) = test.batch(chunk);
        let (features, _) = forward(&model.layers, plan.extractor.clone(), ext, &x)?;
        write_frame(
            conn,
            &Frame::new(
                FrameType::EvalRequest,
                config.client_id,
                epoch,
                batch_id as u32,
            )
            .with_payload(protocol::encode_tensor(&features)),
        )?;
        let reply = expect_frame(conn, FrameType::LogitsBatch, config.barrier_timeout)?;
        let processed = protocol::decode_tensor(&reply.payload)?;
        let (logits, _) = forward(&model.layers, plan.classifier.clone(), cls, &processed)?;
        correct += count_correct(&logits, &labels);
    }
    Ok(correct as f32 / test.len() as f32)
}

/// The oracle trainer: identical math and update order, no protocol, no
/// averaging. Used for split-transparency checks and as the non-sharing
/// baseline.
pub fn monolithic_train(
    config: &ClientConfig,
    model: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
) -> Result<TrainReport, ClientError> {
    config.validate()?;
    model.validate()?;
    if train.is_empty() {
        return Err(ClientError::Data(DataError::Empty));
    }
    let start = Instant::now();
    let plan = split(model, config.depth)?;
    let full = init_parameters(
        &model.layers,
        model.input,
        &Rng::new(config.seed).derive("init"),
    )?;
    let mut ext = full.slice(&plan.extractor);
    let mut cloud = full.slice(&plan.cloud);
    let mut cls = full.slice(&plan.classifier);

    let mut rows = Vec::with_capacity(config.epochs as usize);
    let mut extractor_checksums = Vec::with_capacity(config.epochs as usize);
    let mut param_trace = Vec::new();
    let mut cloud_trace = Vec::new();

    for epoch in 0..config.epochs {
        let order = epoch_order(config, train.len(), epoch);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(config.batch_size) {
            let (x, labels) = train.batch(chunk);
            let (features, ext_cache) =
                forward(&model.layers, plan.extractor.clone(), &ext, &x)?;
            let (processed, cloud_cache) =
                forward(&model.layers, plan.cloud.clone(), &cloud, &features)?;
            let (logits, cls_cache) =
                forward(&model.layers, plan.classifier.clone(), &cls, &processed)?;
            let (loss, dlogits) = ops::softmax_cross_entropy(&logits, &labels)?;
            loss_sum += loss as f64 * chunk.len() as f64;

            let (grad_processed, cls_grads) = backward(
                &model.layers,
                plan.classifier.clone(),
                &cls,
                &cls_cache,
                &dlogits,
            )?;
            cls.sgd_step(&cls_grads, config.lr)?;
            let (grad_cut, cloud_grads) = backward(
                &model.layers,
                plan.cloud.clone(),
                &cloud,
                &cloud_cache,
                &grad_processed,
            )?;
            cloud.sgd_step(&cloud_grads, config.lr)?;
            let (_, ext_grads) = backward(
                &model.layers,
                plan.extractor.clone(),
                &ext,
                &ext_cache,
                &grad_cut,
            )?;
            ext.sgd_step(&ext_grads, config.lr)?;

            if config.trace {
                param_trace.push((params_checksum(&ext), params_checksum(&cls)));
                cloud_trace.push(params_checksum(&cloud));
            }
        }
        let train_loss = (loss_sum / train.len() as f64) as f32;
        extractor_checksums.push(params_checksum(&ext));

        // Same per-part forward chain as the distributed evaluation.
        let mut all = ext.clone();
        all.entries.extend(cloud.entries.iter().cloned());
        all.entries.extend(cls.entries.iter().cloned());
        let accuracy = evaluate(model, &all, test, config.batch_size)?;
        rows.push(EpochRow {
            epoch,
            train_loss,
            test_accuracy: accuracy,
        });
    }

    let mut final_params = ext.clone();
    final_params.entries.extend(cloud.entries.iter().cloned());
    final_params.entries.extend(cls.entries.iter().cloned());
    Ok(TrainReport {
        client_id: config.client_id,
        rows,
        wall_time: start.elapsed(),
        checkpoint_path: None,
        extractor_checksums,
        param_trace,
        cloud_trace,
        final_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic;
    use crate::model::reference_model;

    #[test]
    fn evaluate_perfect_logits_is_one() {
        // A model is overkill to check the counting rule; drive count_correct.
        let logits = Tensor::new(vec![3, 2], vec![5.0, 0.0, 0.0, 5.0, 9.0, 1.0]).unwrap();
        assert_eq!(count_correct(&logits, &[0, 1, 0]), 3);
        assert_eq!(count_correct(&logits, &[1, 0, 1]), 0);
    }

    #[test]
    fn evaluate_rejects_empty_test_slice() {
        let model = reference_model(1, 28, 4).unwrap();
        let params = init_parameters(&model.layers, model.input, &Rng::new(1).derive("init"))
            .unwrap();
        let mut empty = synthetic(1, 1, 28, 0);
        empty.labels.clear();
        // images tensor still has one sample; len() follows labels.
        assert!(matches!(
            evaluate(&model, &params, &empty, 8),
            Err(ClientError::Data(DataError::Empty))
        ));
    }

    #[test]
    fn untrained_net_on_uniform_labels_is_near_chance() {
        let model = reference_model(1, 28, 4).unwrap();
        let params = init_parameters(&model.layers, model.input, &Rng::new(2).derive("init"))
            .unwrap();
        let test = synthetic(1000, 4, 28, 123);
        let acc = evaluate(&model, &params, &test, 100).unwrap();
        // Binomial bound: chance is 0.25, 1000 draws stay within ±0.05 with
        // overwhelming probability... but an untrained net is not a uniform
        // sampler, so allow a wider honest band.
        assert!((0.0..=0.6).contains(&acc), "accuracy {acc}");
    }

    #[test]
    fn config_validation_names_the_field() {
        let config = ClientConfig {
            client_id: 1,
            depth: 2,
            epochs: 0,
            batch_size: 8,
            lr: 0.1,
            seed: 0,
            share: true,
            barrier_timeout: DEFAULT_BARRIER_TIMEOUT,
            trace: false,
        };
        let err = config.validate().unwrap_err().to_string();
        assert!(err.contains("epochs"), "{err}");
    }

    #[test]
    fn epoch_order_is_deterministic_and_distinct_per_epoch() {
        let config = ClientConfig {
            client_id: 2,
            depth: 1,
            epochs: 2,
            batch_size: 8,
            lr: 0.1,
            seed: 42,
            share: true,
            barrier_timeout: DEFAULT_BARRIER_TIMEOUT,
            trace: false,
        };
        assert_eq!(epoch_order(&config, 64, 0), epoch_order(&config, 64, 0));
        assert_ne!(epoch_order(&config, 64, 0), epoch_order(&config, 64, 1));
    }
}
