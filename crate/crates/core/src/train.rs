//! Mini-batch momentum SGD with L2 weight decay, checkpoints and history.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::net::{load_with_appendix, save_with_appendix, Gradients, Model, ParamGrad};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Weight-decay coefficient, applied to kernels only.
    pub l2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub momentum: f64,
    /// Loss weights for (background, exudate).
    pub class_weights: (f64, f64),
    /// Write a checkpoint every this many epochs; 0 disables periodic ones.
    pub checkpoint_every: usize,
    /// Where checkpoints go. `None` writes none.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            l2: 5e-4,
            batch_size: 4,
            epochs: 20,
            seed: 0,
            momentum: 0.9,
            class_weights: (1.0, 1.0),
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

pub(crate) const TRAIN_KEYS: &[&str] = &[
    "learning_rate",
    "l2",
    "batch_size",
    "epochs",
    "seed",
    "momentum",
    "class_weights",
    "checkpoint_every",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidArgument(format!("l2 must be finite and >= 0, got {}", self.l2)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        let (a, b) = self.class_weights;
        if !(a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidArgument(format!("class_weights must be finite and >= 0, got ({a}, {b})")));
        }
        Ok(())
    }

    /// Reads the training keys of `kv`; missing keys keep their defaults.
    /// Keys belonging to other sections are ignored.
    pub fn from_kv(kv: &KvConfig) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let class_weights = match kv.list::<f64>("class_weights")? {
            None => d.class_weights,
            Some(v) if v.len() == 2 => (v[0], v[1]),
            Some(v) => {
                return Err(kv.invalid_value("class_weights", format!("expected 2 values, got {}", v.len())));
            }
        };
        let cfg = TrainConfig {
            learning_rate: kv.parsed_or("learning_rate", d.learning_rate)?,
            l2: kv.parsed_or("l2", d.l2)?,
            batch_size: kv.parsed_or("batch_size", d.batch_size)?,
            epochs: kv.parsed_or("epochs", d.epochs)?,
            seed: kv.parsed_or("seed", d.seed)?,
            momentum: kv.parsed_or("momentum", d.momentum)?,
            class_weights,
            checkpoint_every: kv.parsed_or("checkpoint_every", d.checkpoint_every)?,
            checkpoint_dir: None,
        };
        cfg.validate().map_err(|e| {
            let key = TRAIN_KEYS.iter().find(|k| e.to_string().starts_with(*k)).copied().unwrap_or("learning_rate");
            kv.invalid_value(key, e.to_string())
        })?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("learning_rate", self.learning_rate);
        kv.set("l2", self.l2);
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        kv.set("seed", self.seed);
        kv.set("momentum", self.momentum);
        kv.set("class_weights", format!("{},{}", self.class_weights.0, self.class_weights.1));
        kv.set("checkpoint_every", self.checkpoint_every);
        kv
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Training pixel accuracy, measured on the forward pass before each update.
    pub pixel_acc: f64,
    pub seconds: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} mean_loss={:.6e} pixel_acc={:.6} seconds={:.3}",
            self.epoch, self.mean_loss, self.pixel_acc, self.seconds
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn mean_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    /// One line per epoch.
    pub fn to_log(&self) -> String {
        self.epochs.iter().map(|e| format!("{e}\n")).collect()
    }
}

/// Velocity for every learnable value plus progress counters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub velocities: Gradients<T>,
    pub step: u64,
    pub epochs_done: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(model: &Model<T>) -> OptimizerState<T> {
        OptimizerState { velocities: Gradients::zeros_like(model), step: 0, epochs_done: 0 }
    }
}

/// One momentum update of a single value: `v <- mu*v - lr*(g + l2*w)`, `w <- w + v`.
#[inline]
pub fn momentum_update<T: Scalar>(w: &mut T, v: &mut T, g: T, lr: T, l2: T, mu: T) {
    *v = mu * *v - lr * (g + l2 * *w);
    *w = *w + *v;
}

fn aligned<T: Scalar>(model: &Model<T>, g: &Gradients<T>) -> Result<()> {
    if g.params.len() != model.layers().len() {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            left: format!("{} layers", model.layers().len()),
            right: format!("{} gradient entries", g.params.len()),
        });
    }
    for (layer, p) in model.layers().iter().zip(&g.params) {
        if p.kernel.shape() != layer.spec.kernel.shape() || p.bias.len() != layer.spec.bias.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: format!("{} kernel {} bias {}", layer.info.name, layer.spec.kernel.shape(), layer.spec.bias.len()),
                right: format!("gradient kernel {} bias {}", p.kernel.shape(), p.bias.len()),
            });
        }
    }
    Ok(())
}

/// Applies one momentum-SGD update to every learnable tensor of `model`.
pub fn sgd_step<T: Scalar>(
    model: &mut Model<T>,
    gradients: &Gradients<T>,
    state: &mut OptimizerState<T>,
    config: &TrainConfig,
) -> Result<()> {
    aligned(model, gradients)?;
    aligned(model, &state.velocities)?;
    let lr = T::from_f64_lossy(config.learning_rate);
    let l2 = T::from_f64_lossy(config.l2);
    let mu = T::from_f64_lossy(config.momentum);
    for ((layer, g), v) in model.layers_mut().iter_mut().zip(&gradients.params).zip(&mut state.velocities.params) {
        let ParamGrad { kernel: vk, bias: vb } = v;
        for ((w, v), &g) in layer.spec.kernel.data_mut().iter_mut().zip(vk.data_mut()).zip(g.kernel.data()) {
            momentum_update(w, v, g, lr, l2, mu);
        }
        for ((w, v), &g) in layer.spec.bias.iter_mut().zip(vb.iter_mut()).zip(&g.bias) {
            momentum_update(w, v, g, lr, T::zero(), mu);
        }
    }
    state.step += 1;
    Ok(())
}

/// Indexed access to `(image, mask)` pairs, each with batch dimension 1.
pub trait SampleSource<T> {
    fn len(&self) -> usize;
    fn sample(&self, index: usize) -> Result<(Tensor<T>, Tensor<T>)>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Scalar> SampleSource<T> for [(Tensor<T>, Tensor<T>)] {
    fn len(&self) -> usize {
        <[_]>::len(self)
    }

    fn sample(&self, index: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok(self[index].clone())
    }
}

impl<T: Scalar> SampleSource<T> for Vec<(Tensor<T>, Tensor<T>)> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn sample(&self, index: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        self.as_slice().sample(index)
    }
}

/// Sample order for `epoch` (0-based): Fisher-Yates driven by a ChaCha8
/// stream keyed on the run seed and the epoch number.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

const OPT_MAGIC: &[u8; 8] = b"OPTSTATE";

fn encode_state<T: Scalar>(state: &OptimizerState<T>, history: &TrainHistory) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(OPT_MAGIC);
    out.extend_from_slice(&(state.epochs_done as u64).to_le_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    for p in &state.velocities.params {
        for &v in p.kernel.data().iter().chain(&p.bias) {
            v.write_le(&mut out);
        }
    }
    out.extend_from_slice(&(history.epochs.len() as u64).to_le_bytes());
    for e in &history.epochs {
        out.extend_from_slice(&(e.epoch as u64).to_le_bytes());
        for x in [e.mean_loss, e.pixel_acc, e.seconds] {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn decode_state<T: Scalar>(model: &Model<T>, bytes: &[u8], path: &Path) -> Result<(OptimizerState<T>, TrainHistory)> {
    let fail = |m: &str| Error::WeightFile { path: path.to_path_buf(), message: format!("optimizer state: {m}") };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| fail("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != OPT_MAGIC {
        return Err(fail("missing (file holds weights only, not a checkpoint)"));
    }
    let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes"));
    let epochs_done = u64_at(take(8)?) as usize;
    let step = u64_at(take(8)?);
    let w = T::DTYPE.byte_width();
    let mut velocities = Gradients::zeros_like(model);
    for p in &mut velocities.params {
        for v in p.kernel.data_mut().iter_mut().chain(p.bias.iter_mut()) {
            *v = T::read_le(take(w)?);
        }
    }
    let count = u64_at(take(8)?) as usize;
    let mut history = TrainHistory::default();
    for _ in 0..count {
        let epoch = u64_at(take(8)?) as usize;
        let f = |s: &[u8]| f64::from_le_bytes(s.try_into().expect("8 bytes"));
        let mean_loss = f(take(8)?);
        let pixel_acc = f(take(8)?);
        let seconds = f(take(8)?);
        history.epochs.push(EpochRecord { epoch, mean_loss, pixel_acc, seconds });
    }
    if pos != bytes.len() {
        return Err(fail("trailing bytes"));
    }
    Ok((OptimizerState { velocities, step, epochs_done }, history))
}

pub fn save_checkpoint<T: Scalar>(
    model: &Model<T>,
    state: &OptimizerState<T>,
    history: &TrainHistory,
    path: &Path,
) -> Result<()> {
    save_with_appendix(model, &encode_state(state, history), path)
}

/// Loads a checkpoint in the precision it was written with.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, OptimizerState<T>, TrainHistory)> {
    if crate::net::peek_dtype(path)? != T::DTYPE {
        return Err(Error::WeightFile {
            path: path.to_path_buf(),
            message: format!("checkpoint precision differs from requested {}", T::DTYPE.name()),
        });
    }
    let (model, appendix) = load_with_appendix::<T>(path)?;
    let (state, history) = decode_state(&model, &appendix, path)?;
    Ok((model, state, history))
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint-epoch{epoch:04}.bin"))
}

pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("final.bin")
}

/// Trains `model` on `data` for `config.epochs` epochs.
///
/// Each completed epoch is written to `log` as one line. On a non-finite
/// loss or weight the run stops with [`Error::Diverged`]; checkpoints
/// already on disk are left untouched.
pub fn train<T: Scalar>(
    model: Model<T>,
    data: &dyn SampleSource<T>,
    config: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<(Model<T>, TrainHistory)> {
    let state = OptimizerState::new(&model);
    run(model, state, TrainHistory::default(), data, config, log)
}

/// Continues training from a checkpoint up to `config.epochs` total epochs.
pub fn resume<T: Scalar>(
    checkpoint: &Path,
    data: &dyn SampleSource<T>,
    config: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<(Model<T>, TrainHistory)> {
    let (model, state, history) = load_checkpoint::<T>(checkpoint)?;
    if state.epochs_done > config.epochs {
        return Err(Error::InvalidArgument(format!(
            "checkpoint is already at epoch {}, past the requested {}",
            state.epochs_done, config.epochs
        )));
    }
    run(model, state, history, data, config, log)
}

fn assemble<T: Scalar>(data: &dyn SampleSource<T>, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut images = Vec::with_capacity(indices.len());
    let mut masks = Vec::with_capacity(indices.len());
    for &i in indices {
        let (x, y) = data.sample(i)?;
        images.push(x);
        masks.push(y);
    }
    let images = Tensor::stack(&images.iter().collect::<Vec<_>>())?;
    let masks = Tensor::stack(&masks.iter().collect::<Vec<_>>())?;
    Ok((images, masks))
}

fn run<T: Scalar>(
    mut model: Model<T>,
    mut state: OptimizerState<T>,
    mut history: TrainHistory,
    data: &dyn SampleSource<T>,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(Model<T>, TrainHistory)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let expected = model.config().input_shape(1);
    let (x0, y0) = data.sample(0)?;
    if x0.shape() != expected || y0.shape() != expected.with_channels(1) {
        return Err(Error::ShapeMismatch {
            op: "train",
            left: format!("model expects image {expected} and mask {}", expected.with_channels(1)),
            right: format!("sample 0 has image {} and mask {}", x0.shape(), y0.shape()),
        });
    }
    let mut last_checkpoint: Option<PathBuf> = None;
    if let Some(dir) = &config.checkpoint_dir {
        if state.epochs_done > 0 {
            let p = checkpoint_path(dir, state.epochs_done);
            last_checkpoint = p.exists().then_some(p);
        }
    }
    let batches_per_epoch = data.len().div_ceil(config.batch_size);
    for epoch in state.epochs_done..config.epochs {
        let start = Instant::now();
        let order = epoch_order(config.seed, epoch, data.len());
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut total = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let iteration = epoch * batches_per_epoch + bi + 1;
            let diverged = |last: &Option<PathBuf>| Error::Diverged { epoch: epoch + 1, iteration, last_checkpoint: last.clone() };
            let (x, y) = assemble(data, chunk)?;
            let out = model.backward_with_stats(&x, &y, config.class_weights)?;
            if !out.loss.is_finite() {
                return Err(diverged(&last_checkpoint));
            }
            loss_sum += out.loss * out.total_pixels as f64;
            correct += out.correct_pixels;
            total += out.total_pixels;
            sgd_step(&mut model, &out.gradients, &mut state, config)?;
            if !model.is_finite() {
                return Err(diverged(&last_checkpoint));
            }
        }
        state.epochs_done = epoch + 1;
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss: loss_sum / total as f64,
            pixel_acc: correct as f64 / total as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        history.epochs.push(record);
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{record}")?;
        }
        if let Some(dir) = &config.checkpoint_dir {
            let periodic = config.checkpoint_every > 0 && state.epochs_done % config.checkpoint_every == 0;
            if periodic {
                let p = checkpoint_path(dir, state.epochs_done);
                save_checkpoint(&model, &state, &history, &p)?;
                last_checkpoint = Some(p);
            }
        }
    }
    if let Some(dir) = &config.checkpoint_dir {
        save_checkpoint(&model, &state, &history, &final_checkpoint_path(dir))?;
    }
    Ok((model, history))
}
