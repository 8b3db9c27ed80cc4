//! Fingerprint embedding by fine-tuning with an additive embedding loss
//! `L = L0 + gamma * MSE(f - X w)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::detection::{correlation_scores, decode_codevector, extract_fingerprint};
use crate::error::{Error, Result};
use crate::fingerprint::{Fingerprint, OwnerKeys, ProjectionMatrix};
use crate::host::{accuracy, flatten_average, sgd, DataSplit, FlatWeights, MarkedTensor, SgdConfig, ToyHostModel, BATCH_SIZE};

/// Default hard-threshold for code-vector decoding.
pub const DEFAULT_TAU: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedConfig {
    /// Embedding strength `gamma`.
    pub gamma: f64,
    pub epochs: usize,
    #[serde(alias = "lr")]
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Decode threshold used by the success check.
    pub tau: f64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            epochs: 20,
            learning_rate: 1.0,
            batch_size: BATCH_SIZE,
            seed: 0,
            tau: DEFAULT_TAU,
        }
    }
}

impl EmbedConfig {
    fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || self.epochs == 0 {
            return Err(Error::InvalidParams(format!(
                "embedding needs gamma > 0 and epochs >= 1, got gamma = {}, epochs = {}",
                self.gamma, self.epochs
            )));
        }
        Ok(())
    }
}

/// Per-epoch embedding log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedEpoch {
    pub epoch: usize,
    pub task_loss: f64,
    pub embed_mse: f64,
    pub test_accuracy: f64,
}

/// A fine-tuned model carrying one user's fingerprint.
#[derive(Debug, Clone)]
pub struct MarkedModel {
    pub model: ToyHostModel,
    pub user_id: usize,
    /// Final `MSE(f - X w)`.
    pub residual: f64,
    /// Largest `|score_i - b_i|` over the correlation components.
    pub max_deviation: f64,
    pub history: Vec<EmbedEpoch>,
}

impl MarkedModel {
    /// Writes the history as JSON lines.
    pub fn write_log<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.history {
            serde_json::to_writer(&mut out, e)?;
            writeln!(out).map_err(|source| Error::Io {
                path: "<log>".into(),
                source,
            })?;
        }
        Ok(())
    }
}

fn residual(w: &FlatWeights, f: &[f64], x: &ProjectionMatrix) -> Result<Vec<f64>> {
    if f.len() != x.v() {
        return Err(Error::Dimension(format!(
            "fingerprint has length {}, projection has {} rows",
            f.len(),
            x.v()
        )));
    }
    let xw = x.project(w.as_slice())?;
    Ok(xw.iter().zip(f).map(|(a, b)| a - b).collect())
}

/// `(1/v) * ||f - X w||^2`.
pub fn embed_loss(w: &FlatWeights, f: &[f64], x: &ProjectionMatrix) -> Result<f64> {
    let r = residual(w, f, x)?;
    Ok(r.iter().map(|e| e * e).sum::<f64>() / r.len() as f64)
}

/// Gradient of `gamma * MSE(f - X w)` with respect to every entry of the
/// marked tensor. Each channel receives `1/H` of the flattened gradient
/// `(2 gamma / v) X^T (X w - f)`.
pub fn embed_loss_gradient(
    tensor: &MarkedTensor,
    f: &[f64],
    x: &ProjectionMatrix,
    gamma: f64,
) -> Result<Vec<f64>> {
    let r = residual(&flatten_average(tensor), f, x)?;
    let scale = 2.0 * gamma / f.len() as f64;
    let flat = x.project_transpose(&r)?;
    let h = tensor.channels();
    let per_channel = scale / h as f64;
    Ok(flat
        .iter()
        .flat_map(|g| std::iter::repeat_n(g * per_channel, h))
        .collect())
}

/// Correlation scores of the fingerprint currently carried by `model`.
pub fn carried_scores(model: &ToyHostModel, keys: &OwnerKeys) -> Result<Vec<f64>> {
    let f = extract_fingerprint(model.marked(), &keys.projection)?;
    Ok(correlation_scores(&f, &keys.basis)?.values)
}

/// Fine-tunes a copy of `baseline` on `L0 + gamma * MSE(f - X w)` and checks
/// that the result decodes to the user's code-vector with every correlation
/// component within `1 - tau` of its target coefficient.
pub fn embed_fingerprint(
    baseline: &ToyHostModel,
    fingerprint: &Fingerprint,
    keys: &OwnerKeys,
    config: &EmbedConfig,
    data: &DataSplit,
) -> Result<MarkedModel> {
    config.validate()?;
    let x = &keys.projection;
    if baseline.marked().flat_len() != x.n_weights() {
        return Err(Error::Dimension(format!(
            "marked layer flattens to {} weights, projection expects {}",
            baseline.marked().flat_len(),
            x.n_weights()
        )));
    }
    if fingerprint.values.len() != x.v() {
        return Err(Error::Dimension("fingerprint and projection disagree on v".into()));
    }
    let f = &fingerprint.values;
    let gamma = config.gamma;
    let mut model = baseline.clone();
    let sgd_cfg = SgdConfig {
        epochs: config.epochs,
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
        seed: config.seed,
    };
    let mut embed_mse = Vec::with_capacity(config.epochs);
    let stats = sgd(
        &mut model,
        data,
        &sgd_cfg,
        |m, grads| {
            // Errors here are impossible: shapes were checked above.
            let g = embed_loss_gradient(m.marked(), f, x, gamma).expect("checked shapes");
            grads.marked.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            gamma * embed_loss(&flatten_average(m.marked()), f, x).expect("checked shapes")
        },
        |_, m| {
            embed_mse.push(embed_loss(&flatten_average(m.marked()), f, x)?);
            Ok(())
        },
    )?;
    let history = stats
        .iter()
        .zip(&embed_mse)
        .map(|(s, &mse)| EmbedEpoch {
            epoch: s.epoch,
            task_loss: s.task_loss,
            embed_mse: mse,
            test_accuracy: s.test_accuracy,
        })
        .collect();

    let residual = embed_loss(&flatten_average(model.marked()), f, x)?;
    let scores = carried_scores(&model, keys)?;
    let max_deviation = scores
        .iter()
        .zip(&fingerprint.coefficients)
        .map(|(s, b)| (s - b).abs())
        .fold(0.0, f64::max);
    let decoded = decode_codevector(&crate::detection::CorrelationScores { values: scores }, config.tau);
    if decoded.bits != fingerprint.code || max_deviation > 1.0 - config.tau {
        return Err(Error::EmbeddingFailed {
            user: fingerprint.user_id,
            residual,
            max_deviation,
            decoded: decoded.bits,
        });
    }
    Ok(MarkedModel {
        model,
        user_id: fingerprint.user_id,
        residual,
        max_deviation,
        history,
    })
}

/// Test accuracy helper for fidelity comparisons.
pub fn test_accuracy(model: &ToyHostModel, data: &DataSplit) -> Result<f64> {
    accuracy(model, &data.test)
}
