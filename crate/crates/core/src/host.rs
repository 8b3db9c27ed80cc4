//! The desk-scale host classifier whose first layer carries the fingerprint.
//!
//! The marked layer is a `(D, D, F, H)` tensor read as `H` linear filters
//! over `D*D*F`-dimensional input patches. A forward pass slides the filters
//! over an `S x S x F` image (valid positions only), applies a rectifier,
//! averages each filter's response over all positions and feeds the `H`
//! pooled features to a dense softmax layer.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::rng::{stream_rng, Stream};

/// A 4-D weight tensor of shape `(D, D, F, H)`, row-major with the channel
/// axis `H` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkedTensor {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl MarkedTensor {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("tensor dims must be positive, got {dims:?}")));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Dimension(format!(
                "tensor {dims:?} needs {} entries, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParams("tensor entries must be finite".into()));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    /// Flattened length `N = D * D * F`.
    pub fn flat_len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channels(&self) -> usize {
        self.dims[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Entry at flattened position `p` and channel `h`.
    pub fn get(&self, p: usize, h: usize) -> f64 {
        self.data[p * self.dims[3] + h]
    }
}

/// Channel-averaged, flattened marked weights `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatWeights(pub Vec<f64>);

impl FlatWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Mean over the channel axis, then row-major flattening to length `D*D*F`.
pub fn flatten_average(t: &MarkedTensor) -> FlatWeights {
    let h = t.channels();
    FlatWeights(
        t.data
            .chunks_exact(h)
            .map(|c| c.iter().sum::<f64>() / h as f64)
            .collect(),
    )
}

/// Shape of one input image: `side x side x depth`, depth fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub side: usize,
    pub depth: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.side * self.side * self.depth
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One labelled split of images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: ImageShape,
    pub classes: usize,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(shape: ImageShape, classes: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() * shape.len() {
            return Err(Error::Dimension(format!(
                "{} labels need {} input values, got {}",
                labels.len(),
                labels.len() * shape.len(),
                inputs.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidParams(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self {
            shape,
            classes,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.shape.len();
        &self.inputs[i * n..(i + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// Architecture of the host: marked-layer kernel `D`, depth `F` and
/// channel count `H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostArch {
    pub kernel: usize,
    pub depth: usize,
    pub channels: usize,
}

impl Default for HostArch {
    fn default() -> Self {
        Self {
            kernel: 5,
            depth: 8,
            channels: 16,
        }
    }
}

impl HostArch {
    pub fn tensor_dims(&self) -> [usize; 4] {
        [self.kernel, self.kernel, self.depth, self.channels]
    }

    pub fn flat_len(&self) -> usize {
        self.kernel * self.kernel * self.depth
    }
}

/// Marked filter bank, rectifier, global average pooling, dense softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyHostModel {
    pub(crate) marked: MarkedTensor,
    pub(crate) dense_w: Vec<f64>,
    pub(crate) dense_b: Vec<f64>,
    pub(crate) classes: usize,
}

/// Gradients laid out like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub marked: Vec<f64>,
    pub dense_w: Vec<f64>,
    pub dense_b: Vec<f64>,
}

impl Gradients {
    fn zeros_like(m: &ToyHostModel) -> Self {
        Self {
            marked: vec![0.0; m.marked.len()],
            dense_w: vec![0.0; m.dense_w.len()],
            dense_b: vec![0.0; m.dense_b.len()],
        }
    }
}

impl ToyHostModel {
    /// He-initialized marked layer, `N(0, 1/H)` dense weights, zero biases.
    pub fn new(arch: HostArch, classes: usize, seed: u64) -> Result<Self> {
        if arch.kernel == 0 || arch.depth == 0 || arch.channels == 0 || classes < 2 {
            return Err(Error::InvalidParams(format!(
                "bad host architecture {arch:?} with {classes} classes"
            )));
        }
        let mut rng = stream_rng(seed, Stream::Training, 0);
        let fan_in = arch.flat_len() as f64;
        let marked_scale = (2.0 / fan_in).sqrt();
        let dims = arch.tensor_dims();
        let marked_data = (0..dims.iter().product::<usize>())
            .map(|_| marked_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let dense_scale = (1.0 / arch.channels as f64).sqrt();
        let dense_w = (0..classes * arch.channels)
            .map(|_| dense_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Self {
            marked: MarkedTensor::new(dims, marked_data)?,
            dense_w,
            dense_b: vec![0.0; classes],
            classes,
        })
    }

    /// Reassembles a model from its tensors; the dense layer must be
    /// `classes x H`.
    pub fn from_parts(marked: MarkedTensor, dense_w: Vec<f64>, dense_b: Vec<f64>) -> Result<Self> {
        let classes = dense_b.len();
        if classes < 2 || dense_w.len() != classes * marked.channels() {
            return Err(Error::Dimension(format!(
                "dense layer {} weights / {} biases do not fit {} channels",
                dense_w.len(),
                classes,
                marked.channels()
            )));
        }
        if dense_w.iter().chain(&dense_b).any(|x| !x.is_finite()) {
            return Err(Error::InvalidParams("dense parameters must be finite".into()));
        }
        Ok(Self {
            marked,
            dense_w,
            dense_b,
            classes,
        })
    }

    pub fn marked(&self) -> &MarkedTensor {
        &self.marked
    }

    pub fn marked_mut(&mut self) -> &mut MarkedTensor {
        &mut self.marked
    }

    pub fn dense_weights(&self) -> &[f64] {
        &self.dense_w
    }

    pub fn dense_bias(&self) -> &[f64] {
        &self.dense_b
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn arch(&self) -> HostArch {
        let d = self.marked.dims();
        HostArch {
            kernel: d[0],
            depth: d[2],
            channels: d[3],
        }
    }

    /// Architectures match when all parameter shapes match.
    pub fn same_architecture(&self, other: &Self) -> bool {
        self.marked.dims() == other.marked.dims() && self.classes == other.classes
    }

    pub fn parameter_count(&self) -> usize {
        self.marked.len() + self.dense_w.len() + self.dense_b.len()
    }

    /// `lr`-scaled descent step.
    pub fn apply(&mut self, grads: &Gradients, lr: f64) {
        let step = |p: &mut [f64], g: &[f64]| p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
        step(&mut self.marked.data, &grads.marked);
        step(&mut self.dense_w, &grads.dense_w);
        step(&mut self.dense_b, &grads.dense_b);
    }

    fn check_input(&self, shape: ImageShape) -> Result<usize> {
        let arch = self.arch();
        if shape.depth != arch.depth || shape.side < arch.kernel {
            return Err(Error::Dimension(format!(
                "input {}x{}x{} does not fit a {}x{}x{} kernel",
                shape.side, shape.side, shape.depth, arch.kernel, arch.kernel, arch.depth
            )));
        }
        Ok(shape.side - arch.kernel + 1)
    }

    /// Filter responses before the rectifier, `positions x H`.
    fn filter_responses(&self, image: &[f64], shape: ImageShape, out_side: usize, z: &mut [f64]) {
        let [d, _, f, h] = self.marked.dims();
        let row = d * f;
        z.iter_mut().for_each(|x| *x = 0.0);
        for py in 0..out_side {
            for px in 0..out_side {
                let pos = py * out_side + px;
                let zp = &mut z[pos * h..(pos + 1) * h];
                for dy in 0..d {
                    let start = ((py + dy) * shape.side + px) * f;
                    let patch = &image[start..start + row];
                    let weights = &self.marked.data[dy * row * h..(dy + 1) * row * h];
                    for (xv, wrow) in patch.iter().zip(weights.chunks_exact(h)) {
                        for (acc, w) in zp.iter_mut().zip(wrow) {
                            *acc += xv * w;
                        }
                    }
                }
            }
        }
    }

    fn logits(&self, pooled: &[f64], out: &mut [f64]) {
        let h = self.marked.channels();
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.dense_b[c]
                + self.dense_w[c * h..(c + 1) * h]
                    .iter()
                    .zip(pooled)
                    .map(|(w, g)| w * g)
                    .sum::<f64>();
        }
    }
}

fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    x.iter_mut().for_each(|v| *v /= sum);
}

/// Class probabilities for the selected samples, one row per sample.
pub fn forward(model: &ToyHostModel, data: &Dataset, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    let out_side = model.check_input(data.shape)?;
    let h = model.marked.channels();
    let positions = out_side * out_side;
    let mut z = vec![0.0; positions * h];
    let mut pooled = vec![0.0; h];
    let mut rows = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= data.len() {
            return Err(Error::Dimension(format!("sample {i} out of range")));
        }
        model.filter_responses(data.sample(i), data.shape, out_side, &mut z);
        pool(&z, h, positions, &mut pooled);
        let mut p = vec![0.0; model.classes];
        model.logits(&pooled, &mut p);
        softmax_in_place(&mut p);
        rows.push(p);
    }
    Ok(rows)
}

fn pool(z: &[f64], h: usize, positions: usize, pooled: &mut [f64]) {
    pooled.iter_mut().for_each(|x| *x = 0.0);
    for zp in z.chunks_exact(h) {
        for (g, &v) in pooled.iter_mut().zip(zp) {
            *g += v.max(0.0);
        }
    }
    pooled.iter_mut().for_each(|g| *g /= positions as f64);
}

/// Mean cross-entropy of probability rows against labels.
pub fn loss_ce(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &l)| -p[l].max(f64::MIN_POSITIVE).ln())
        .sum();
    total / labels.len().max(1) as f64
}

/// Mean cross-entropy over the selected samples and its exact gradient.
pub fn backward(model: &ToyHostModel, data: &Dataset, indices: &[usize]) -> Result<(f64, Gradients)> {
    let out_side = model.check_input(data.shape)?;
    if data.classes > model.classes {
        return Err(Error::Dimension(format!(
            "dataset has {} classes, model outputs {}",
            data.classes, model.classes
        )));
    }
    let [d, _, f, h] = model.marked.dims();
    let row = d * f;
    let positions = out_side * out_side;
    let batch = indices.len().max(1) as f64;
    let mut grads = Gradients::zeros_like(model);
    let mut z = vec![0.0; positions * h];
    let mut pooled = vec![0.0; h];
    let mut probs = vec![0.0; model.classes];
    let mut dpooled = vec![0.0; h];
    let mut dz = vec![0.0; h];
    let mut loss = 0.0;
    for &i in indices {
        if i >= data.len() {
            return Err(Error::Dimension(format!("sample {i} out of range")));
        }
        let image = data.sample(i);
        let label = data.labels[i];
        model.filter_responses(image, data.shape, out_side, &mut z);
        pool(&z, h, positions, &mut pooled);
        model.logits(&pooled, &mut probs);
        let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + probs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - probs[label];
        softmax_in_place(&mut probs);

        dpooled.iter_mut().for_each(|x| *x = 0.0);
        for c in 0..model.classes {
            let dlogit = (probs[c] - f64::from(u8::from(c == label))) / batch;
            grads.dense_b[c] += dlogit;
            let wrow = &model.dense_w[c * h..(c + 1) * h];
            let grow = &mut grads.dense_w[c * h..(c + 1) * h];
            for k in 0..h {
                grow[k] += dlogit * pooled[k];
                dpooled[k] += dlogit * wrow[k];
            }
        }
        for py in 0..out_side {
            for px in 0..out_side {
                let pos = py * out_side + px;
                let zp = &z[pos * h..(pos + 1) * h];
                let mut any = false;
                for k in 0..h {
                    dz[k] = if zp[k] > 0.0 { dpooled[k] / positions as f64 } else { 0.0 };
                    any |= dz[k] != 0.0;
                }
                if !any {
                    continue;
                }
                for dy in 0..d {
                    let start = ((py + dy) * data.shape.side + px) * f;
                    let patch = &image[start..start + row];
                    let gw = &mut grads.marked[dy * row * h..(dy + 1) * row * h];
                    for (xv, grow) in patch.iter().zip(gw.chunks_exact_mut(h)) {
                        for (g, dzk) in grow.iter_mut().zip(&dz) {
                            *g += xv * dzk;
                        }
                    }
                }
            }
        }
    }
    Ok((loss / batch, grads))
}

/// Fraction of samples whose arg-max prediction matches the label.
pub fn accuracy(model: &ToyHostModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(256) {
        let probs = forward(model, data, chunk)?;
        for (p, &i) in probs.iter().zip(chunk) {
            let pred = p
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                .0;
            correct += usize::from(pred == data.labels[i]);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mini-batch gradient-descent settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub task_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Runs mini-batch descent on the cross-entropy plus an optional extra term.
///
/// `extra` receives the model and the task gradient of each step, may add
/// its own gradient in place, and returns its loss contribution. `on_epoch`
/// sees the model after every epoch. Shuffling for epoch `e` uses the
/// training stream with counter `e + 1`.
pub fn sgd<E, C>(
    model: &mut ToyHostModel,
    data: &DataSplit,
    cfg: &SgdConfig,
    mut extra: E,
    mut on_epoch: C,
) -> Result<Vec<EpochStats>>
where
    E: FnMut(&ToyHostModel, &mut Gradients) -> f64,
    C: FnMut(usize, &ToyHostModel) -> Result<()>,
{
    let n = data.train.len();
    let batch = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = stream_rng(cfg.seed, Stream::Training, epoch as u32 + 1);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(batch).enumerate() {
            let (loss, mut grads) = backward(model, &data.train, chunk)?;
            let total = loss + extra(model, &mut grads);
            if !total.is_finite() {
                return Err(Error::Divergence { epoch, step, loss: total });
            }
            model.apply(&grads, cfg.learning_rate);
            loss_sum += loss;
            steps += 1;
        }
        if model
            .marked
            .data
            .iter()
            .chain(&model.dense_w)
            .chain(&model.dense_b)
            .any(|x| !x.is_finite())
        {
            return Err(Error::Divergence { epoch, step: steps, loss: f64::NAN });
        }
        on_epoch(epoch, model)?;
        history.push(EpochStats {
            epoch: epoch + 1,
            task_loss: loss_sum / steps.max(1) as f64,
            train_accuracy: accuracy(model, &data.train)?,
            test_accuracy: accuracy(model, &data.test)?,
        });
    }
    Ok(history)
}

/// Default descent batch size.
pub const BATCH_SIZE: usize = 32;

/// Trains `model` on the cross-entropy alone and returns the per-epoch
/// history. Deterministic for a fixed seed.
pub fn train_baseline(
    model: &ToyHostModel,
    data: &DataSplit,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<(ToyHostModel, Vec<EpochStats>)> {
    let mut trained = model.clone();
    let cfg = SgdConfig {
        epochs,
        learning_rate,
        batch_size: BATCH_SIZE,
        seed,
    };
    let history = sgd(&mut trained, data, &cfg, |_, _| 0.0, |_, _| Ok(()))?;
    Ok((trained, history))
}

/// Fraction of `samples_per_class` reserved (in addition) for the test split.
const TEST_FRACTION: usize = 4;
/// Per-pixel noise standard deviation of synthetic images.
const SYNTH_NOISE: f64 = 1.0;

/// Seeded Gaussian class blobs. Each class owns a spatial bump at a random
/// centre with random per-channel amplitudes; samples add white noise.
/// The test split holds `ceil(samples_per_class / 4)` samples per class.
pub fn synth_dataset(
    seed: u64,
    classes: usize,
    samples_per_class: usize,
    shape: ImageShape,
) -> Result<DataSplit> {
    if classes < 2 || shape.is_empty() {
        return Err(Error::InvalidParams(format!(
            "synthetic data needs >= 2 classes and a nonempty shape, got {classes} and {shape:?}"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Dataset, 0);
    let width = shape.side as f64 / 3.0;
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let cy = rng.gen_range(0.0..shape.side as f64);
            let cx = rng.gen_range(0.0..shape.side as f64);
            let amps: Vec<f64> = (0..shape.depth).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let mut t = Vec::with_capacity(shape.len());
            for y in 0..shape.side {
                for x in 0..shape.side {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let bump = (-d2 / (2.0 * width * width)).exp();
                    t.extend(amps.iter().map(|a| a * bump));
                }
            }
            t
        })
        .collect();
    let make = |per_class: usize, counter: u32| -> Result<Dataset> {
        let mut rng = stream_rng(seed, Stream::Dataset, counter);
        let mut inputs = Vec::with_capacity(classes * per_class * shape.len());
        let mut labels = Vec::with_capacity(classes * per_class);
        for _ in 0..per_class {
            for (c, t) in templates.iter().enumerate() {
                inputs.extend(t.iter().map(|m| m + SYNTH_NOISE * rng.sample::<f64, _>(StandardNormal)));
                labels.push(c);
            }
        }
        Dataset::new(shape, classes, inputs, labels)
    };
    let train = make(samples_per_class, 1)?;
    let test = make(samples_per_class.div_ceil(TEST_FRACTION).max(1), 2)?;
    Ok(DataSplit { train, test })
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::IdxFormat(format!("header truncated at byte {at}")))
}

/// Parses IDX image and label payloads already in memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::IdxMagic(magic));
    }
    let count = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    if rows != cols {
        return Err(Error::IdxFormat(format!("only square images are supported, got {rows}x{cols}")));
    }
    let pixels = images
        .get(16..)
        .filter(|p| p.len() >= count * rows * cols)
        .ok_or_else(|| Error::IdxFormat(format!("image payload shorter than {count} x {rows} x {cols} bytes")))?;

    let lmagic = be_u32(labels, 0)?;
    if lmagic != IDX_LABELS {
        return Err(Error::IdxMagic(lmagic));
    }
    let lcount = be_u32(labels, 4)? as usize;
    if lcount != count {
        return Err(Error::IdxFormat(format!("{count} images but {lcount} labels")));
    }
    let lbytes = labels
        .get(8..8 + lcount)
        .ok_or_else(|| Error::IdxFormat(format!("label payload shorter than {lcount} bytes")))?;
    let label_vec: Vec<usize> = lbytes.iter().map(|&b| b as usize).collect();
    let classes = label_vec.iter().max().map_or(2, |m| (m + 1).max(10));
    let inputs = pixels[..count * rows * cols].iter().map(|&b| f64::from(b) / 255.0).collect();
    Dataset::new(ImageShape { side: rows, depth: 1 }, classes, inputs, label_vec)
}

/// Loads an IDX (MNIST-format) image/label file pair.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(io_err(images_path))?;
    let labels = std::fs::read(labels_path).map_err(io_err(labels_path))?;
    parse_idx(&images, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_model(seed: u64) -> (ToyHostModel, Dataset) {
        let arch = HostArch { kernel: 3, depth: 2, channels: 4 };
        let model = ToyHostModel::new(arch, 3, seed).unwrap();
        let data = synth_dataset(seed, 3, 1, ImageShape { side: 5, depth: 2 }).unwrap().train;
        (model, data)
    }

    #[test]
    fn flatten_of_constant_channels_is_their_mean() {
        let dims = [2, 2, 3, 5];
        let data: Vec<f64> = (0..60).map(|i| (i % 5 + 1) as f64).collect();
        let t = MarkedTensor::new(dims, data).unwrap();
        let w = flatten_average(&t);
        assert_eq!(w.0.len(), 12);
        assert!(w.0.iter().all(|&x| x == 3.0));
    }

    #[test]
    fn single_channel_flatten_preserves_values() {
        let data: Vec<f64> = (0..8).map(|i| i as f64 * 0.5).collect();
        let t = MarkedTensor::new([2, 2, 2, 1], data.clone()).unwrap();
        assert_eq!(flatten_average(&t).0, data);
        assert_eq!(MarkedTensor::zeros([5, 5, 8, 16]).flat_len(), 200);
    }

    #[test]
    fn tensor_rejects_bad_input() {
        assert!(MarkedTensor::new([2, 2, 1, 1], vec![0.0; 3]).is_err());
        assert!(MarkedTensor::new([1, 1, 1, 1], vec![f64::NAN]).is_err());
        assert!(MarkedTensor::new([0, 1, 1, 1], vec![]).is_err());
    }

    proptest! {
        #[test]
        fn flatten_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
            let mut rng = stream_rng(seed, Stream::Training, 9);
            let dims = [2, 2, 3, 4];
            let w1: Vec<f64> = (0..48).map(|_| rng.sample(StandardNormal)).collect();
            let w2: Vec<f64> = (0..48).map(|_| rng.sample(StandardNormal)).collect();
            let mix: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
            let lhs = flatten_average(&MarkedTensor::new(dims, mix).unwrap());
            let f1 = flatten_average(&MarkedTensor::new(dims, w1).unwrap());
            let f2 = flatten_average(&MarkedTensor::new(dims, w2).unwrap());
            for i in 0..12 {
                prop_assert!((lhs.0[i] - (a * f1.0[i] + b * f2.0[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn flatten_ignores_channel_order(seed in any::<u64>(), perm_seed in any::<u64>()) {
            let mut rng = stream_rng(seed, Stream::Training, 3);
            let dims = [3, 3, 2, 6];
            let data: Vec<f64> = (0..108).map(|_| rng.sample(StandardNormal)).collect();
            let mut perm: Vec<usize> = (0..6).collect();
            perm.shuffle(&mut stream_rng(perm_seed, Stream::Training, 4));
            let permuted: Vec<f64> = data.chunks(6).flat_map(|c| perm.iter().map(move |&h| c[h])).collect();
            let a = flatten_average(&MarkedTensor::new(dims, data).unwrap());
            let b = flatten_average(&MarkedTensor::new(dims, permuted).unwrap());
            for (x, y) in a.0.iter().zip(&b.0) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let (model, data) = small_model(1);
        let probs = forward(&model, &data, &[0, 1, 2]).unwrap();
        for p in probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(p.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn uniform_logits_give_log_class_count() {
        let (mut model, data) = small_model(2);
        model.dense_w.iter_mut().for_each(|w| *w = 0.0);
        let probs = forward(&model, &data, &[0, 1, 2]).unwrap();
        let loss = loss_ce(&probs, &data.labels[..3]);
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (model, _) = small_model(3);
        let wrong = synth_dataset(0, 3, 1, ImageShape { side: 5, depth: 3 }).unwrap().train;
        assert!(matches!(forward(&model, &wrong, &[0]), Err(Error::Dimension(_))));
        assert!(matches!(backward(&model, &wrong, &[0]), Err(Error::Dimension(_))));
    }

    /// Central-difference oracle over every parameter.
    #[test]
    fn gradients_match_central_differences() {
        let (model, data) = small_model(4);
        let batch = [0, 1, 2];
        let (_, grads) = backward(&model, &data, &batch).unwrap();
        let loss_at = |m: &ToyHostModel| loss_ce(&forward(m, &data, &batch).unwrap(), &data.labels[..3]);
        let h = 1e-5;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            let rel = (analytic - fd).abs() / (analytic.abs() + fd.abs()).max(1e-7);
            assert!(rel < 1e-4, "analytic {analytic} vs fd {fd}");
        };
        for i in 0..model.marked.len() {
            let mut p = model.clone();
            p.marked.data[i] += h;
            let mut m = model.clone();
            m.marked.data[i] -= h;
            check(grads.marked[i], loss_at(&p), loss_at(&m));
        }
        for i in 0..model.dense_w.len() {
            let mut p = model.clone();
            p.dense_w[i] += h;
            let mut m = model.clone();
            m.dense_w[i] -= h;
            check(grads.dense_w[i], loss_at(&p), loss_at(&m));
        }
        for i in 0..model.dense_b.len() {
            let mut p = model.clone();
            p.dense_b[i] += h;
            let mut m = model.clone();
            m.dense_b[i] -= h;
            check(grads.dense_b[i], loss_at(&p), loss_at(&m));
        }
    }

    #[test]
    fn synthetic_data_is_deterministic_and_sized() {
        let shape = ImageShape { side: 7, depth: 8 };
        let a = synth_dataset(5, 10, 200, shape).unwrap();
        assert_eq!(a.train.len(), 2000);
        assert_eq!(a.test.len(), 500);
        assert_eq!(a, synth_dataset(5, 10, 200, shape).unwrap());
        assert_ne!(a.train.inputs, synth_dataset(6, 10, 200, shape).unwrap().train.inputs);
    }

    #[test]
    fn synthetic_class_means_are_distinct() {
        let shape = ImageShape { side: 7, depth: 8 };
        let d = synth_dataset(5, 10, 50, shape).unwrap().train;
        let mut means = vec![vec![0.0; shape.len()]; 10];
        for i in 0..d.len() {
            for (m, x) in means[d.labels[i]].iter_mut().zip(d.sample(i)) {
                *m += x / 50.0;
            }
        }
        let mut min_dist = f64::INFINITY;
        for a in 0..10 {
            for b in a + 1..10 {
                let dist = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                min_dist = min_dist.min(dist);
            }
        }
        assert!(min_dist > 0.0);
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let shape = ImageShape { side: 7, depth: 8 };
        let data = synth_dataset(1, 10, 10, shape).unwrap();
        let model = ToyHostModel::new(HostArch::default(), 10, 1).unwrap();
        let (trained, history) = train_baseline(&model, &data, 0, 0.05, 1).unwrap();
        assert_eq!(trained, model);
        assert!(history.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let shape = ImageShape { side: 7, depth: 8 };
        let data = synth_dataset(1, 10, 20, shape).unwrap();
        let model = ToyHostModel::new(HostArch::default(), 10, 1).unwrap();
        let (a, _) = train_baseline(&model, &data, 2, 0.05, 9).unwrap();
        let (b, _) = train_baseline(&model, &data, 2, 0.05, 9).unwrap();
        assert_eq!(a, b);
        let (c, _) = train_baseline(&model, &data, 2, 0.05, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn divergence_is_reported() {
        let shape = ImageShape { side: 7, depth: 8 };
        let data = synth_dataset(1, 10, 10, shape).unwrap();
        let model = ToyHostModel::new(HostArch::default(), 10, 1).unwrap();
        let err = train_baseline(&model, &data, 20, 1e12, 1).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    fn idx_images(magic: u32, n: u32, side: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for x in [magic, n, side, side] {
            b.extend_from_slice(&x.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(n: u32, labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS.to_be_bytes());
        b.extend_from_slice(&n.to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_parses_header_and_scales_pixels() {
        let mut pixels = vec![0u8; 32];
        pixels[0] = 255;
        let images = idx_images(IDX_IMAGES, 2, 4, &pixels);
        assert_eq!(&images[..4], &[0, 0, 8, 3]);
        let d = parse_idx(&images, &idx_labels(2, &[3, 7])).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.shape, ImageShape { side: 4, depth: 1 });
        assert_eq!(d.sample(0)[0], 1.0);
        assert_eq!(d.labels, vec![3, 7]);
    }

    #[test]
    fn idx_rejects_malformed_files() {
        let pixels = vec![0u8; 32];
        let bad = idx_images(0x0000_0802, 2, 4, &pixels);
        let err = parse_idx(&bad, &idx_labels(2, &[0, 1])).unwrap_err();
        assert!(err.to_string().contains("unsupported IDX type"));
        let truncated = idx_images(IDX_IMAGES, 2, 4, &pixels[..20]);
        assert!(matches!(parse_idx(&truncated, &idx_labels(2, &[0, 1])), Err(Error::IdxFormat(_))));
        let good = idx_images(IDX_IMAGES, 2, 4, &pixels);
        assert!(matches!(parse_idx(&good, &idx_labels(3, &[0, 1, 2])), Err(Error::IdxFormat(_))));
        assert!(matches!(parse_idx(&good, &idx_labels(2, &[0])), Err(Error::IdxFormat(_))));
    }
}
