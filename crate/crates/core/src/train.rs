//! Training loop, evaluation and checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsp::RaMode;
use crate::io::{self, IoError, Rten, RtenData};
use crate::loss::{compute_loss, ClassWeights, LossError, LossKind};
use crate::metrics::{IouAccumulator, MetricsError};
use crate::model::{predict_masks, standardize_frames, ModelConfig, ModelError, PolarMask, PolarNet};
use crate::synth::{DatasetManifest, Frame, Split};
use crate::tensor::{rmsprop_step, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("training diverged at step {step} (last finite loss {last_loss:?} at step {last_finite_step:?}): {reason}")]
    Diverged {
        step: u64,
        last_finite_step: Option<u64>,
        last_loss: Option<f64>,
        reason: String,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("data does not match the model: {0}")]
    Data(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    #[default]
    Ra,
    Rad,
}

impl InputKind {
    pub fn channels(self) -> usize {
        match self {
            Self::Ra => 1,
            Self::Rad => crate::dsp::N_CHIRPS,
        }
    }

    pub fn model_config(self) -> ModelConfig {
        match self {
            Self::Ra => ModelConfig::ra(),
            Self::Rad => ModelConfig::rad(),
        }
    }
}

impl std::str::FromStr for InputKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ra" => Ok(Self::Ra),
            "rad" => Ok(Self::Rad),
            other => Err(format!("unknown input kind {other:?} (expected ra or rad)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every_steps: u64,
    pub total_steps: u64,
    pub loss: LossKind,
    pub ra_mode: RaMode,
    pub input: InputKind,
    pub seed: u64,
    pub eval_every: u64,
    pub rmsprop_rho: f64,
    pub rmsprop_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr0: 0.1,
            decay_factor: 0.8,
            decay_every_steps: 3500,
            total_steps: 20_000,
            loss: LossKind::SmceTrain,
            ra_mode: RaMode::SumLog,
            input: InputKind::Ra,
            seed: 0,
            eval_every: 250,
            rmsprop_rho: 0.9,
            rmsprop_eps: 1e-7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr0 > 0.0) || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("lr0 must be positive and decay_factor in (0, 1]");
        }
        if self.decay_every_steps == 0 || self.eval_every == 0 {
            return bad("decay_every_steps and eval_every must be positive");
        }
        if !(0.0..1.0).contains(&self.rmsprop_rho) || !(self.rmsprop_eps >= 0.0) {
            return bad("rmsprop_rho must be in [0, 1) and rmsprop_eps non-negative");
        }
        Ok(())
    }
}

/// `lr0 * decay_factor ^ floor(step / decay_every_steps)`.
pub fn lr_at_step(step: u64, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((step / cfg.decay_every_steps) as i32)
}

/// Standardized network input `[H, W, C]` and its label.
#[derive(Clone, Debug)]
pub struct Sample {
    pub input: Vec<f32>,
    pub mask: PolarMask,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub shape: [usize; 3],
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn push_raw(&mut self, raw: Vec<f32>, mask: PolarMask) -> Result<()> {
        let [h, w, c] = self.shape;
        if raw.len() != h * w * c || mask.rows() != h || mask.cols() != w {
            return Err(TrainError::Data(format!(
                "frame of {} values / {}x{} mask for shape {:?}",
                raw.len(),
                mask.rows(),
                mask.cols(),
                self.shape
            )));
        }
        let mut t = Tensor::new([1, h, w, c], raw)?;
        standardize_frames(&mut t)?;
        self.samples.push(Sample {
            input: t.into_data(),
            mask,
        });
        Ok(())
    }

    pub fn from_frames(frames: &[Frame], input: InputKind) -> Result<Self> {
        let mut ds = Self {
            shape: [128, 128, input.channels()],
            samples: Vec::with_capacity(frames.len()),
        };
        for f in frames {
            let raw = match input {
                InputKind::Ra => f.ra.clone(),
                InputKind::Rad => f
                    .rad
                    .clone()
                    .ok_or_else(|| TrainError::Data(format!("frame {} has no RAD tensor", f.seed)))?,
            };
            ds.push_raw(raw, f.mask.clone())?;
        }
        Ok(ds)
    }

    /// Loads one split of a generated dataset directory.
    pub fn load(dir: &Path, split: Split, input: InputKind) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let mut ds = Self {
            shape: [128, 128, input.channels()],
            samples: Vec::new(),
        };
        for entry in manifest.split(split) {
            let (file, dims) = match input {
                InputKind::Ra => (&entry.ra, vec![128, 128]),
                InputKind::Rad => (&entry.rad, vec![128, 128, input.channels()]),
            };
            let raw = io::rten_read_f32(&dir.join(file), &dims)?;
            let mask = io::read_pgm(&dir.join(&entry.mask))?;
            ds.push_raw(raw, mask)?;
        }
        Ok(ds)
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<u8>)> {
        let [h, w, c] = self.shape;
        let mut data = Vec::with_capacity(indices.len() * h * w * c);
        let mut labels = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].input);
            labels.extend_from_slice(self.samples[i].mask.data());
        }
        Ok((Tensor::new([indices.len(), h, w, c], data)?, labels))
    }
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const DROPOUT_STREAM: u64 = 0x4452_4f50;

fn stream_rng(seed: u64, stream: u64, word: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.rotate_left(32));
    rng.set_stream(word);
    rng
}

/// Sample indices of step `step`: position `step * batch + k` of the
/// concatenation of per-epoch permutations.
pub fn batch_indices(step: u64, batch: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for k in 0..batch as u64 {
        let pos = step * batch as u64 + k;
        let epoch = pos / n as u64;
        if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut stream_rng(seed, SHUFFLE_STREAM, epoch));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("filled").1[(pos % n as u64) as usize]);
    }
    out
}

/// Per-parameter RMSProp accumulators plus those of the class weights.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub accum: Vec<Vec<f32>>,
    pub weight_accum: [f64; 2],
}

impl OptimizerState {
    pub fn zeros(model: &PolarNet<f32>) -> Self {
        Self {
            accum: model.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
            weight_accum: [0.0; 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub class_weights: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub mean_iou: f64,
    pub iou_occupied: Option<f64>,
    pub iou_open: Option<f64>,
    pub frame_averaged_mean_iou: f64,
}

/// Model, class weights, optimizer state and step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: PolarNet<f32>,
    pub weights: ClassWeights,
    pub opt: OptimizerState,
    pub step: u64,
    pub config: TrainConfig,
    last_finite: Option<(u64, f64)>,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = PolarNet::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        let opt = OptimizerState::zeros(&model);
        Ok(Self {
            model,
            weights: ClassWeights::default(),
            opt,
            step: 0,
            config,
            last_finite: None,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train_config.validate()?;
        Ok(Self {
            model: ckpt.model,
            weights: ckpt.weights,
            opt: ckpt.opt,
            step: ckpt.step,
            config: ckpt.train_config,
            last_finite: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            weights: self.weights,
            opt: self.opt.clone(),
            step: self.step,
            train_config: self.config.clone(),
        }
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.shape != self.model.config().input_shape() {
            return Err(TrainError::Data(format!(
                "dataset frames {:?}, model expects {:?}",
                data.shape,
                self.model.config().input_shape()
            )));
        }
        if data.is_empty() {
            return Err(TrainError::Data("dataset is empty".into()));
        }
        Ok(())
    }

    fn diverged(&self, reason: String) -> TrainError {
        TrainError::Diverged {
            step: self.step,
            last_finite_step: self.last_finite.map(|v| v.0),
            last_loss: self.last_finite.map(|v| v.1),
            reason,
        }
    }

    /// One optimizer step on the batch scheduled for the current step.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepLog> {
        self.check_data(data)?;
        let cfg = &self.config;
        let indices = batch_indices(self.step, cfg.batch_size, data.len(), cfg.seed);
        let (x, labels) = data.batch(&indices)?;
        let mut rng = stream_rng(cfg.seed, DROPOUT_STREAM, self.step);
        let cache = match self.model.forward_train(&x, &mut rng) {
            Ok(c) => c,
            Err(ModelError::Diverged { layer }) => return Err(self.diverged(format!("non-finite activations in {layer}"))),
            Err(e) => return Err(e.into()),
        };
        let probs: Vec<f64> = cache.probs().data().iter().map(|&p| f64::from(p)).collect();
        let frame = data.shape[0] * data.shape[1];
        let out = compute_loss(cfg.loss, &probs, &labels, frame, &self.weights)?;
        if !out.loss.is_finite() {
            return Err(self.diverged(format!("loss {}", out.loss)));
        }
        let grad: Vec<f32> = out.grad_probs.iter().map(|&g| g as f32).collect();
        let grad = Tensor::new(cache.probs().shape().to_vec(), grad)?;
        self.model.zero_grads();
        self.model.backward(&cache, &grad)?;
        let lr = lr_at_step(self.step, cfg);
        let (rho, eps) = (cfg.rmsprop_rho, cfg.rmsprop_eps);
        for (p, accum) in self.model.params_mut().iter_mut().zip(&mut self.opt.accum) {
            let g = p.tensor.take_grad().expect("backward fills every gradient");
            rmsprop_step(p.tensor.data_mut(), &g, accum, lr, rho, eps)?;
        }
        if cfg.loss == LossKind::SmceTrain {
            rmsprop_step(&mut self.weights.w, &out.grad_weights, &mut self.opt.weight_accum, lr, rho, eps)?;
        }
        if self.model.params().iter().any(|p| p.tensor.data().iter().any(|v| !v.is_finite())) {
            return Err(self.diverged("non-finite parameters after update".into()));
        }
        let log = StepLog {
            step: self.step,
            loss: out.loss,
            lr,
            class_weights: self.weights.w,
        };
        self.last_finite = Some((self.step, out.loss));
        self.step += 1;
        Ok(log)
    }
}

/// Infer-mode predictions for every sample, in dataset order.
pub fn predict_dataset(model: &PolarNet<f32>, data: &Dataset) -> Result<Vec<PolarMask>> {
    const CHUNK: usize = 8;
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let (x, _) = data.batch(chunk)?;
        out.extend(predict_masks(&model.forward(&x)?)?);
    }
    Ok(out)
}

pub fn evaluate(model: &PolarNet<f32>, data: &Dataset) -> Result<EvalReport> {
    if data.shape != model.config().input_shape() {
        return Err(TrainError::Data(format!(
            "dataset frames {:?}, model expects {:?}",
            data.shape,
            model.config().input_shape()
        )));
    }
    let preds = predict_dataset(model, data)?;
    report(preds.iter().zip(data.samples.iter().map(|s| &s.mask)))
}

/// Metrics for (prediction, label) pairs.
pub fn report<'a>(pairs: impl Iterator<Item = (&'a PolarMask, &'a PolarMask)>) -> Result<EvalReport> {
    let mut acc = IouAccumulator::default();
    for (p, l) in pairs {
        acc.add(p, l)?;
    }
    let global = acc.global()?;
    Ok(EvalReport {
        frames: acc.frames(),
        mean_iou: global.mean_iou,
        iou_occupied: global.per_class[0],
        iou_open: global.per_class[1],
        frame_averaged_mean_iou: acc.frame_averaged()?,
    })
}

/// All-open predictor metrics on `data`.
pub fn all_open_baseline(data: &Dataset) -> Result<EvalReport> {
    let [h, w, _] = data.shape;
    let open = PolarMask::filled(h, w, true);
    report(data.samples.iter().map(|s| (&open, &s.mask)))
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainOutcome {
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub best_eval: Option<(u64, EvalReport)>,
    pub final_eval: Option<EvalReport>,
}

/// Runs `trainer` up to `config.total_steps`. With an output directory,
/// writes `train_log.jsonl`, `final/` and (with eval data) `best/`.
pub fn train(trainer: &mut Trainer, data: &Dataset, eval: Option<&Dataset>, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    trainer.check_data(data)?;
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
            let path = dir.join("train_log.jsonl");
            let file = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| io_error(&path, e))?;
            Some((path, std::io::BufWriter::new(file)))
        }
        None => None,
    };
    let mut write_line = |value: serde_json::Value| -> Result<()> {
        if let Some((path, w)) = log.as_mut() {
            writeln!(w, "{value}").map_err(|e| io_error(path, e))?;
        }
        Ok(())
    };
    let mut best: Option<(u64, EvalReport)> = None;
    let mut final_loss = None;
    while trainer.step < trainer.config.total_steps {
        let entry = trainer.train_step(data)?;
        final_loss = Some(entry.loss);
        write_line(serde_json::to_value(&entry).expect("log serializes"))?;
        if let Some(eval_set) = eval {
            if trainer.step % trainer.config.eval_every == 0 || trainer.step == trainer.config.total_steps {
                let r = evaluate(&trainer.model, eval_set)?;
                write_line(serde_json::json!({ "step": trainer.step, "eval": r }))?;
                if best.as_ref().is_none_or(|(_, b)| r.mean_iou > b.mean_iou) {
                    if let Some(dir) = out_dir {
                        save_checkpoint(&trainer.checkpoint(), &dir.join("best"))?;
                    }
                    best = Some((trainer.step, r));
                }
            }
        }
    }
    if let Some((path, mut w)) = log {
        w.flush().map_err(|e| io_error(&path, e))?;
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&trainer.checkpoint(), &dir.join("final"))?;
        let cfg = serde_json::json!({
            "model": trainer.model.config(),
            "train": trainer.config,
        });
        io::write_bytes(&dir.join("config.json"), &serde_json::to_vec_pretty(&cfg).expect("config serializes"))?;
    }
    let final_eval = match eval {
        Some(e) => Some(evaluate(&trainer.model, e)?),
        None => None,
    };
    Ok(TrainOutcome {
        steps: trainer.step,
        final_loss,
        best_eval: best,
        final_eval,
    })
}

fn io_error(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io(IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: PolarNet<f32>,
    pub weights: ClassWeights,
    pub opt: OptimizerState,
    pub step: u64,
    pub train_config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: u64,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub tensors: Vec<TensorEntry>,
}

const CLASS_WEIGHTS: &str = "loss/class_weights";

fn tensor_file(name: &str) -> String {
    format!("{}.rten", name.replace('/', "__"))
}

/// Writes `manifest.json` and one RTEN file per tensor: parameters,
/// `opt/<param>` accumulators, `bn/<layer>/{mean,var}` running statistics
/// and the class weights with their accumulator.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let mut tensors = Vec::new();
    let mut put = |name: String, t: Rten| -> Result<()> {
        let file = tensor_file(&name);
        let bytes = t.to_bytes();
        io::write_bytes(&dir.join(&file), &bytes)?;
        tensors.push(TensorEntry {
            name,
            file,
            shape: t.dims.clone(),
            dtype: t.data.dtype().name().into(),
            bytes: bytes.len(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    };
    for (p, acc) in ckpt.model.params().iter().zip(&ckpt.opt.accum) {
        put(p.name.clone(), Rten::f32(p.tensor.shape(), p.tensor.data().to_vec()))?;
        put(format!("opt/{}", p.name), Rten::f32(p.tensor.shape(), acc.clone()))?;
    }
    for (name, s) in ckpt.model.norm_states() {
        put(format!("{name}/running_mean"), Rten::f32([s.running_mean.len()], s.running_mean.clone()))?;
        put(format!("{name}/running_var"), Rten::f32([s.running_var.len()], s.running_var.clone()))?;
    }
    put(CLASS_WEIGHTS.into(), Rten::f64([2], ckpt.weights.w.to_vec()))?;
    put(format!("opt/{CLASS_WEIGHTS}"), Rten::f64([2], ckpt.opt.weight_accum.to_vec()))?;
    let manifest = CheckpointManifest {
        format_version: 1,
        step: ckpt.step,
        model_config: ckpt.model.config().clone(),
        train_config: ckpt.train_config.clone(),
        tensors,
    };
    io::write_bytes(
        &dir.join("manifest.json"),
        &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let bad = |reason: String| TrainError::Checkpoint {
        path: dir.to_path_buf(),
        reason,
    };
    let manifest_path = dir.join("manifest.json");
    let manifest: CheckpointManifest = serde_json::from_slice(&io::read_bytes(&manifest_path)?)
        .map_err(|e| bad(format!("manifest.json: {e}")))?;
    if manifest.format_version != 1 {
        return Err(bad(format!("unsupported format version {}", manifest.format_version)));
    }
    let mut tensors = std::collections::HashMap::new();
    for entry in &manifest.tensors {
        let path = dir.join(&entry.file);
        let bytes = io::read_bytes(&path)?;
        if bytes.len() != entry.bytes {
            return Err(bad(format!("{}: {} bytes, manifest says {}", entry.file, bytes.len(), entry.bytes)));
        }
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(bad(format!("{}: sha256 mismatch", entry.file)));
        }
        let t = Rten::from_bytes(&bytes, &path)?;
        if t.dims != entry.shape {
            return Err(bad(format!("{}: shape {:?}, manifest says {:?}", entry.file, t.dims, entry.shape)));
        }
        tensors.insert(entry.name.clone(), t);
    }
    let mut take = |name: &str| tensors.remove(name).ok_or_else(|| bad(format!("missing tensor {name}")));
    let mut model = PolarNet::<f32>::new(manifest.model_config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut accum = Vec::new();
    for p in model.params_mut() {
        for (dst, name) in [(None, p.name.clone()), (Some(()), format!("opt/{}", p.name))] {
            let t = take(&name)?;
            let RtenData::F32(v) = t.data else {
                return Err(bad(format!("{name}: expected f32")));
            };
            if t.dims != p.tensor.shape() {
                return Err(bad(format!("{name}: shape {:?}, model expects {:?}", t.dims, p.tensor.shape())));
            }
            match dst {
                None => p.tensor.data_mut().copy_from_slice(&v),
                Some(()) => accum.push(v),
            }
        }
    }
    for (name, s) in model.norm_states_mut() {
        for (field, slot) in [("running_mean", &mut s.running_mean), ("running_var", &mut s.running_var)] {
            let key = format!("{name}/{field}");
            let t = take(&key)?;
            match t.data {
                RtenData::F32(v) if v.len() == slot.len() => *slot = v,
                _ => return Err(bad(format!("{key}: wrong dtype or length"))),
            }
        }
    }
    let mut pair = |name: &str| -> Result<[f64; 2]> {
        match take(name)?.data {
            RtenData::F64(v) if v.len() == 2 => Ok([v[0], v[1]]),
            _ => Err(bad(format!("{name}: expected two f64 values"))),
        }
    };
    let weights = ClassWeights { w: pair(CLASS_WEIGHTS)? };
    let weight_accum = pair(&format!("opt/{CLASS_WEIGHTS}"))?;
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        model,
        weights,
        opt: OptimizerState { accum, weight_accum },
        step: manifest.step,
        train_config: manifest.train_config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_frames, SceneParams};

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_step(0, &cfg), 0.1);
        assert_eq!(lr_at_step(3499, &cfg), 0.1);
        assert!((lr_at_step(3500, &cfg) - 0.08).abs() < 1e-15);
        assert!((lr_at_step(7000, &cfg) - 0.064).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in (0..50_000).step_by(97) {
            let lr = lr_at_step(s, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(s, 4, n, 3)).collect();
        let epoch0: Vec<usize> = seen.drain(..10).collect();
        let mut sorted = epoch0.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(2, 4, n, 3), batch_indices(2, 4, n, 3));
        assert_ne!(batch_indices(0, 10, n, 3), batch_indices(0, 10, n, 4));
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    fn tiny() -> (Dataset, ModelConfig, TrainConfig) {
        let (frames, _) = generate_frames(2, 40, &SceneParams::default(), RaMode::SumLog, false);
        let mut data = Dataset::from_frames(&frames, InputKind::Ra).unwrap();
        // 16x16 crops keep the test fast
        data.shape = [16, 16, 1];
        for s in &mut data.samples {
            let input: Vec<f32> = (40..56).flat_map(|r| s.input[r * 128..r * 128 + 16].to_vec()).collect();
            let mask: Vec<u8> = (40..56).flat_map(|r| s.mask.data()[r * 128..r * 128 + 16].to_vec()).collect();
            s.input = input;
            s.mask = PolarMask::new(16, 16, mask).unwrap();
        }
        let cfg = TrainConfig {
            batch_size: 2,
            lr0: 1e-3,
            total_steps: 3,
            ..TrainConfig::default()
        };
        (data, ModelConfig::reduced(16, 1), cfg)
    }

    #[test]
    fn checkpoint_round_trip_and_continuation() {
        let (data, model_cfg, cfg) = tiny();
        let mut straight = Trainer::new(model_cfg.clone(), cfg.clone()).unwrap();
        for _ in 0..3 {
            straight.train_step(&data).unwrap();
        }
        let mut first = Trainer::new(model_cfg, cfg).unwrap();
        first.train_step(&data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&first.checkpoint(), dir.path()).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        let x = data.batch(&[0, 1]).unwrap().0;
        assert_eq!(first.model.forward(&x).unwrap().data(), loaded.model.forward(&x).unwrap().data());
        assert_eq!(loaded.opt, first.opt);
        let mut resumed = Trainer::from_checkpoint(loaded).unwrap();
        for _ in 0..2 {
            resumed.train_step(&data).unwrap();
        }
        for (a, b) in straight.model.params().iter().zip(resumed.model.params()) {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
        assert_eq!(straight.weights, resumed.weights);
        assert_eq!(straight.opt, resumed.opt);
    }

    #[test]
    fn tampered_checkpoint_is_rejected() {
        let (_, model_cfg, cfg) = tiny();
        let t = Trainer::new(model_cfg, cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&t.checkpoint(), dir.path()).unwrap();
        let file = dir.path().join(tensor_file("enc1/weight"));
        let mut bytes = fs::read(&file).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&file, &bytes).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(err.to_string().contains("sha256"), "{err}");
        bytes.pop();
        fs::write(&file, &bytes).unwrap();
        assert!(load_checkpoint(dir.path()).unwrap_err().to_string().contains("bytes"));
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let (data, model_cfg, mut cfg) = tiny();
        cfg.total_steps = 0;
        let mut t = Trainer::new(model_cfg.clone(), cfg.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        train(&mut t, &data, None, Some(dir.path())).unwrap();
        let fresh = Trainer::new(model_cfg, cfg).unwrap();
        let loaded = load_checkpoint(&dir.path().join("final")).unwrap();
        assert_eq!(loaded.model.params(), fresh.model.params());
        assert_eq!(loaded.step, 0);
    }

    #[test]
    fn same_seed_same_curve() {
        let (data, model_cfg, cfg) = tiny();
        let run = || {
            let mut t = Trainer::new(model_cfg.clone(), cfg.clone()).unwrap();
            (0..3).map(|_| t.train_step(&data).unwrap().loss).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_head_baseline_matches_closed_form() {
        let (data, model_cfg, cfg) = tiny();
        let mut t = Trainer::new(model_cfg, cfg).unwrap();
        for name in ["head/weight", "head/bias"] {
            t.model.param_mut(name).unwrap().tensor.data_mut().fill(0.0);
        }
        let r = evaluate(&t.model, &data).unwrap();
        let open: usize = data.samples.iter().map(|s| s.mask.data().iter().filter(|&&v| v == 1).count()).sum();
        let total = data.len() * 256;
        let occupied_present = open < total;
        let expect = if occupied_present {
            (open as f64 / total as f64) / 2.0
        } else {
            1.0
        };
        assert!((r.mean_iou - expect).abs() < 1e-12);
        assert_eq!(r.mean_iou, all_open_baseline(&data).unwrap().mean_iou);
        assert_eq!(evaluate(&t.model, &data).unwrap(), r);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (data, _, cfg) = tiny();
        let t = Trainer::new(ModelConfig::reduced(32, 1), cfg).unwrap();
        assert!(matches!(evaluate(&t.model, &data), Err(TrainError::Data(_))));
    }
}
