//! Feature-inversion attack: build the inverted decoder for an extractor,
//! train it on leaked features to reconstruct inputs (x' = f'(f(x))), and
//! score the reconstructions.
//!
//! Layer mapping (applied to the reversed extractor): conv(k,s,p) becomes a
//! transposed conv with swapped in/out channels and the same (k,s,p), relu
//! becomes tanh, maxpool becomes nearest 2× upsampling. The decoder output is
//! squashed to [0,1] with (tanh+1)/2 so the pixel MSE is well posed.

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::Dataset;
use crate::model::{
    backward, chain_shapes, forward, init_parameters, FeatureShape, LayerSpec, ModelError,
    Parameters,
};
use crate::tensor::{Rng, ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("extractor layer {kind} has no inversion mapping")]
    UnsupportedLayer { kind: String },
    #[error("decoder diverged at step {step}: loss {loss} is over 10x the initial {initial} for 200 consecutive steps")]
    Diverged { step: usize, loss: f32, initial: f32 },
    #[error("attack dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// The inverted network for one extractor, plus its shape bookkeeping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderSpec {
    pub layers: Vec<LayerSpec>,
    pub depth: u8,
    /// Shape of the features the decoder consumes (the extractor's output).
    pub feature_shape: FeatureShape,
    /// Shape the decoder produces (the extractor's input).
    pub output_shape: FeatureShape,
}

/// Reverse the extractor's layer list and invert each layer. Fails on layer
/// kinds with no defined inversion.
pub fn build_decoder(
    extractor_layers: &[LayerSpec],
    input: FeatureShape,
    depth: u8,
) -> Result<DecoderSpec, AttackError> {
    let shapes = chain_shapes(extractor_layers, input)?;
    let mut layers = Vec::with_capacity(extractor_layers.len());
    for (i, layer) in extractor_layers.iter().enumerate().rev() {
        let mapped = match layer {
            LayerSpec::Conv {
                kernel,
                stride,
                pad,
                ..
            } => {
                let in_channels = match shapes[i] {
                    FeatureShape::Image { c, .. } => c,
                    FeatureShape::Flat { .. } => {
                        return Err(AttackError::UnsupportedLayer {
                            kind: "conv on flat features".into(),
                        })
                    }
                };
                LayerSpec::TransposedConv {
                    out_channels: in_channels,
                    kernel: *kernel,
                    stride: *stride,
                    pad: *pad,
                }
            }
            LayerSpec::Relu => LayerSpec::Tanh,
            LayerSpec::MaxPool2x2 => LayerSpec::Upsample2x,
            other => {
                return Err(AttackError::UnsupportedLayer {
                    kind: format!("{other:?}"),
                })
            }
        };
        layers.push(mapped);
    }
    let feature_shape = *shapes.last().expect("chain includes input");
    let decoder_shapes = chain_shapes(&layers, feature_shape)?;
    Ok(DecoderSpec {
        layers,
        depth,
        feature_shape,
        output_shape: *decoder_shapes.last().expect("chain includes input"),
    })
}

/// Output squash (tanh(z)+1)/2; returns the squashed value and tanh(z) for
/// the backward pass. Empty decoders skip the squash (x' = f(x) = x).
fn squash_forward(z: &Tensor) -> (Tensor, Tensor) {
    let tanh_z = crate::ops::tanh_forward(z);
    let squashed = tanh_z.map(|t| (t + 1.0) * 0.5);
    (squashed, tanh_z)
}

fn squash_backward(tanh_z: &Tensor, grad: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(grad.shape());
    for ((o, &t), &g) in out
        .data_mut()
        .iter_mut()
        .zip(tanh_z.data())
        .zip(grad.data())
    {
        *o = g * (1.0 - t * t) * 0.5;
    }
    out
}

/// Mean squared error over every element plus its gradient w.r.t. `pred`.
fn mse_and_grad(pred: &Tensor, target: &Tensor) -> Result<(f32, Tensor), ShapeError> {
    target.require_shape(pred.shape(), "mse target")?;
    let numel = pred.numel() as f64;
    let mut sum = 0.0f64;
    let mut grad = Tensor::zeros(pred.shape());
    let scale = (2.0 / numel) as f32;
    for ((g, &p), &t) in grad
        .data_mut()
        .iter_mut()
        .zip(pred.data())
        .zip(target.data())
    {
        let d = p - t;
        sum += (d as f64) * (d as f64);
        *g = scale * d;
    }
    Ok(((sum / numel) as f32, grad))
}

/// Run features through the decoder (with the output squash) to get
/// reconstructions.
pub fn reconstruct(
    decoder: &DecoderSpec,
    params: &Parameters,
    features: &Tensor,
) -> Result<Tensor, AttackError> {
    if decoder.layers.is_empty() {
        return Ok(features.clone());
    }
    let (z, _) = forward(&decoder.layers, 0..decoder.layers.len(), params, features)?;
    Ok(squash_forward(&z).0)
}

#[derive(Clone, Debug)]
pub struct AttackConfig {
    pub steps: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            steps: 5000,
            lr: 0.01,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// A trained decoder plus its loss history.
#[derive(Clone, Debug)]
pub struct DecoderTraining {
    pub params: Parameters,
    /// MSE over the whole attack set with the freshly initialized decoder.
    pub initial_loss: f32,
    /// Per-step training loss.
    pub loss_curve: Vec<f32>,
    /// Non-increasing windowed-mean trend over 100-step windows (5%
    /// tolerance).
    pub trend_ok: bool,
}

/// Windowed monotone-trend check: means over consecutive `window`-step
/// spans may not increase by more than `tolerance`.
pub fn windowed_trend_ok(curve: &[f32], window: usize, tolerance: f32) -> bool {
    let means: Vec<f32> = curve
        .chunks(window)
        .filter(|c| c.len() == window)
        .map(|c| c.iter().sum::<f32>() / c.len() as f32)
        .collect();
    means
        .windows(2)
        .all(|pair| pair[1] <= pair[0] * (1.0 + tolerance))
}

/// Train the decoder by SGD on the pixel MSE between inputs and their
/// reconstructions. The extractor is frozen: its features are computed once
/// up front and its parameters are never touched.
pub fn train_decoder(
    decoder: &DecoderSpec,
    extractor_layers: &[LayerSpec],
    extractor_params: &Parameters,
    data: &Dataset,
    config: &AttackConfig,
) -> Result<DecoderTraining, AttackError> {
    if data.is_empty() {
        return Err(AttackError::EmptyDataset);
    }
    assert!(config.lr > 0.0, "attack learning rate must be positive");
    let rng = Rng::new(config.seed);
    let mut params = init_parameters(
        &decoder.layers,
        decoder.feature_shape,
        &rng.derive("decoder-init"),
    )?;

    // Frozen extractor: embed the whole attack set once.
    let features = embed_all(extractor_layers, extractor_params, data)?;

    let initial_loss = {
        let recon = reconstruct(decoder, &params, &features)?;
        mse_and_grad(&recon, &data.images)?.0
    };

    let mut loss_curve = Vec::with_capacity(config.steps);
    let mut shuffle_rng = rng.derive("attack-shuffle");
    let mut order: Vec<usize> = (0..data.len()).collect();
    shuffle_rng.shuffle(&mut order);
    let mut cursor = 0usize;
    let mut high_loss_run = 0usize;
    let feat_sample: usize = features.shape()[1..].iter().product();

    for step in 0..config.steps {
        let mut batch_idx = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size.min(data.len()) {
            if cursor == order.len() {
                shuffle_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let feat_batch = gather_rows(&features, &batch_idx, feat_sample);
        let image_batch = {
            let d = data.gather(&batch_idx);
            d.images
        };
        let loss = if decoder.layers.is_empty() {
            mse_and_grad(&feat_batch, &image_batch)?.0
        } else {
            let (z, cache) =
                forward(&decoder.layers, 0..decoder.layers.len(), &params, &feat_batch)?;
            let (recon, tanh_z) = squash_forward(&z);
            let (loss, grad_recon) = mse_and_grad(&recon, &image_batch)?;
            let grad_z = squash_backward(&tanh_z, &grad_recon);
            let (_, grads) = backward(
                &decoder.layers,
                0..decoder.layers.len(),
                &params,
                &cache,
                &grad_z,
            )?;
            params.sgd_step(&grads, config.lr)?;
            loss
        };
        loss_curve.push(loss);
        if loss > 10.0 * initial_loss.max(f32::MIN_POSITIVE) {
            high_loss_run += 1;
            if high_loss_run >= 200 {
                return Err(AttackError::Diverged {
                    step,
                    loss,
                    initial: initial_loss,
                });
            }
        } else {
            high_loss_run = 0;
        }
    }
    let trend_ok = windowed_trend_ok(&loss_curve, 100, 0.05);
    Ok(DecoderTraining {
        params,
        initial_loss,
        loss_curve,
        trend_ok,
    })
}

/// Extractor forward over the whole dataset, in bounded chunks.
pub fn embed_all(
    extractor_layers: &[LayerSpec],
    extractor_params: &Parameters,
    data: &Dataset,
) -> Result<Tensor, AttackError> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut chunks: Vec<Tensor> = Vec::new();
    for chunk in indices.chunks(256) {
        let (x, _) = data.batch(chunk);
        let (f, _) = forward(extractor_layers, 0..extractor_layers.len(), extractor_params, &x)?;
        chunks.push(f);
    }
    let per_sample: usize = chunks[0].shape()[1..].iter().product();
    let mut shape = chunks[0].shape().to_vec();
    shape[0] = data.len();
    let mut out = Vec::with_capacity(data.len() * per_sample);
    for c in chunks {
        out.extend_from_slice(c.data());
    }
    Ok(Tensor::new(shape, out).expect("embed shape"))
}

fn gather_rows(t: &Tensor, indices: &[usize], per_sample: usize) -> Tensor {
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    let mut data = Vec::with_capacity(indices.len() * per_sample);
    for &i in indices {
        data.extend_from_slice(&t.data()[i * per_sample..][..per_sample]);
    }
    Tensor::new(shape, data).expect("gather shape")
}

/// Eq.-style reconstruction score. The per-sample term is the mean over that
/// sample's pixels of squared differences; the raw score is
/// 1 − 1000 · (mean over samples). Multiply by 100 for the presentation
/// form quoted alongside full-scale results.
pub fn reconstruction_score(originals: &Tensor, reconstructions: &Tensor) -> Result<f64, AttackError> {
    reconstructions.require_shape(originals.shape(), "reconstruction_score")?;
    let n = originals.shape()[0];
    if n == 0 || originals.shape().len() != 4 {
        return Err(AttackError::Shape(ShapeError::new(
            "reconstruction_score: non-empty NCHW batch",
            &[1, 1, 1, 1],
            originals.shape(),
        )));
    }
    let per_sample: usize = originals.shape()[1..].iter().product();
    let mut total = 0.0f64;
    for i in 0..n {
        let a = &originals.data()[i * per_sample..][..per_sample];
        let b = &reconstructions.data()[i * per_sample..][..per_sample];
        let mut sq = 0.0f64;
        for (&x, &y) in a.iter().zip(b) {
            let d = x as f64 - y as f64;
            sq += d * d;
        }
        total += sq / per_sample as f64;
    }
    Ok(1.0 - 1000.0 * (total / n as f64))
}

/// Per-depth attack outcome.
#[derive(Clone, Debug)]
pub struct ReconstructionReport {
    pub depth: u8,
    pub decoder_final_loss: f32,
    pub raw_score: f64,
    /// raw_score × 100; the scale full-size results are quoted in.
    pub presentation_score: f64,
    pub original_dump: Option<PathBuf>,
    pub reconstructed_dump: Option<PathBuf>,
    pub trend_ok: bool,
}

/// Plain-text (ASCII) PGM/PPM grid of up to `cols` images per row; grayscale
/// writes P2, 3-channel writes P3. Bit-exact output for identical tensors.
pub fn dump_image_grid(path: &Path, images: &Tensor, cols: usize) -> Result<(), AttackError> {
    let [n, c, h, w] = *images.shape() else {
        return Err(AttackError::Shape(ShapeError::new(
            "dump_image_grid: NCHW batch",
            &[1, 1, 1, 1],
            images.shape(),
        )));
    };
    if c != 1 && c != 3 {
        return Err(AttackError::Shape(ShapeError::new(
            "dump_image_grid: 1 or 3 channels",
            &[n, 1, h, w],
            images.shape(),
        )));
    }
    let cols = cols.max(1).min(n);
    let rows = n.div_ceil(cols);
    let pad = 2;
    let grid_h = rows * h + (rows - 1) * pad;
    let grid_w = cols * w + (cols - 1) * pad;
    // channel-major grid buffer, default 0 (black) between tiles
    let mut grid = vec![0u8; c * grid_h * grid_w];
    for i in 0..n {
        let (row, col) = (i / cols, i % cols);
        let (y0, x0) = (row * (h + pad), col * (w + pad));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = images.data()[((i * c + ch) * h + y) * w + x];
                    let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    grid[(ch * grid_h + y0 + y) * grid_w + x0 + x] = byte;
                }
            }
        }
    }
    let mut text = String::new();
    if c == 1 {
        text.push_str(&format!("P2\n{grid_w} {grid_h}\n255\n"));
        for y in 0..grid_h {
            let row: Vec<String> = (0..grid_w)
                .map(|x| grid[y * grid_w + x].to_string())
                .collect();
            text.push_str(&row.join(" "));
            text.push('\n');
        }
    } else {
        text.push_str(&format!("P3\n{grid_w} {grid_h}\n255\n"));
        for y in 0..grid_h {
            let mut row = Vec::with_capacity(grid_w * 3);
            for x in 0..grid_w {
                for ch in 0..3 {
                    row.push(grid[(ch * grid_h + y) * grid_w + x].to_string());
                }
            }
            text.push_str(&row.join(" "));
            text.push('\n');
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}
