//! The optimization loop: pooled cross-entropy plus the attention penalty,
//! SGD with momentum and cosine warm restarts, differential learning rates
//! for backbone vs head, frame sampling, augmentation, evaluation, and
//! bit-exact checkpointing.

use std::path::Path;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{load_features, load_image, Dataset, VideoSample};
use crate::error::{Error, Result};
use crate::model::{
    stage_params, video_forward, ModelConfig, ModelParams, VideoFrames,
};
use crate::numerics::{Tape, Tensor};
use crate::rng::{derive, TAG_EPOCH, TAG_INIT};
use crate::temporal::{frame_importance, joint_softmax, pooled_nll_on_tape, pooled_probs, Pooling};

/// Learning-rate schedule selector: cosine annealing with warm restarts by
/// default, with a constant rate kept as the ablation alternative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Sgdr,
    Constant,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Pooling used for the training loss.
    pub pooling: Pooling,
    /// Frames sampled per clip per epoch (F).
    pub frames_per_clip: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub momentum: f64,
    /// Coefficient λ of the attention orthogonality penalty. Ignored when
    /// the model has no attention heads.
    pub lambda: f64,
    /// First warm-restart cycle length in epochs.
    pub t0: usize,
    /// Cycle length multiplier after each restart.
    pub t_mult: usize,
    /// η_min as a fraction of each group's η_max.
    pub eta_min_factor: f64,
    pub schedule: Schedule,
    /// Independent random initializations to train; the one with the lowest
    /// final-epoch training loss is kept. Makes small-model runs robust to
    /// the occasional bad attention basin.
    pub init_restarts: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig {
                num_classes: 4,
                descriptor_dim: 4,
                heads: 2,
                attention_units: 16,
                backbone: None,
            },
            pooling: Pooling::Tp,
            frames_per_clip: 16,
            epochs: 30,
            batch_size: 16,
            weight_decay: 5e-5,
            lr_head: 0.1,
            lr_backbone: 1e-5,
            momentum: 0.9,
            lambda: 0.0,
            t0: 10,
            t_mult: 2,
            eta_min_factor: 1e-3,
            schedule: Schedule::Sgdr,
            init_restarts: 3,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.frames_per_clip == 0 {
            return Err(Error::contract("frames_per_clip must be ≥ 1"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch_size must be ≥ 1"));
        }
        if self.lr_head <= 0.0 || self.lr_backbone <= 0.0 {
            return Err(Error::contract("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract("momentum must be in [0,1)"));
        }
        if self.weight_decay < 0.0 || self.lambda < 0.0 {
            return Err(Error::contract("weight_decay and lambda must be nonnegative"));
        }
        if self.t0 == 0 || self.t_mult == 0 {
            return Err(Error::contract("t0 and t_mult must be ≥ 1"));
        }
        if !(self.eta_min_factor > 0.0 && self.eta_min_factor <= 1.0) {
            return Err(Error::contract("eta_min_factor must be in (0,1]"));
        }
        if self.init_restarts == 0 {
            return Err(Error::contract("init_restarts must be ≥ 1"));
        }
        Ok(())
    }
}

/// Cosine decay within one warm-restart cycle of length `t_len` epochs.
pub fn sgdr_learning_rate(t: usize, t_len: usize, eta_max: f64, eta_min: f64) -> Result<f64> {
    if t > t_len {
        return Err(Error::contract(format!(
            "cycle position {t} beyond cycle length {t_len}"
        )));
    }
    if t == 0 {
        return Ok(eta_max);
    }
    if t == t_len {
        return Ok(eta_min);
    }
    let frac = t as f64 / t_len as f64;
    Ok(eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Learning rate at a global epoch index under the configured schedule.
pub fn epoch_learning_rate(config: &TrainConfig, epoch: usize, eta_max: f64) -> Result<f64> {
    match config.schedule {
        Schedule::Constant => Ok(eta_max),
        Schedule::Sgdr => {
            let mut start = 0usize;
            let mut len = config.t0;
            while epoch >= start + len {
                start += len;
                len = len.saturating_mul(config.t_mult).max(1);
            }
            sgdr_learning_rate(epoch - start, len, eta_max, eta_max * config.eta_min_factor)
        }
    }
}

/// One SGD-with-momentum update over all parameters. Backbone parameters use
/// `lr_backbone`, everything else `lr_head`.
pub fn sgd_momentum_step(
    params: &mut ModelParams,
    buffers: &mut [Tensor],
    grads: &[Tensor],
    lr_head: f64,
    lr_backbone: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut named = params.named_mut();
    if named.len() != buffers.len() || named.len() != grads.len() {
        return Err(Error::contract(format!(
            "optimizer slots mismatch: {} params, {} buffers, {} grads",
            named.len(),
            buffers.len(),
            grads.len()
        )));
    }
    for ((name, param), (buf, grad)) in named.iter_mut().zip(buffers.iter_mut().zip(grads)) {
        if param.shape() != grad.shape() || param.shape() != buf.shape() {
            return Err(Error::contract(format!(
                "shape mismatch updating {name}: param {:?}, grad {:?}, buffer {:?}",
                param.shape(),
                grad.shape(),
                buf.shape()
            )));
        }
        let lr = if ModelParams::is_backbone_param(name) {
            lr_backbone
        } else {
            lr_head
        };
        let mut new_param = Vec::with_capacity(param.numel());
        {
            let (pd, bd, gd) = (param.data(), buf.data_mut(), grad.data());
            for i in 0..pd.len() {
                bd[i] = momentum * bd[i] + gd[i] + weight_decay * pd[i];
                new_param.push(pd[i] - lr * bd[i]);
            }
        }
        **param = Tensor::new(param.shape().to_vec(), new_param)?;
    }
    Ok(())
}

/// Pick `count` frame indices from a clip of `total`, sorted ascending.
///
/// With enough frames this samples without replacement. Shorter clips are
/// covered evenly: every frame appears ⌊count/total⌋ times and the remainder
/// is drawn without replacement, so each original frame shows up at least
/// once.
pub fn sample_frames(total: usize, count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if total == 0 {
        return Err(Error::contract("cannot sample frames from an empty clip"));
    }
    let mut picks: Vec<usize> = if total >= count {
        rand::seq::index::sample(rng, total, count).into_vec()
    } else {
        let mut all: Vec<usize> = Vec::with_capacity(count);
        let repeats = count / total;
        for f in 0..total {
            for _ in 0..repeats {
                all.push(f);
            }
        }
        let extra = count - repeats * total;
        all.extend(rand::seq::index::sample(rng, total, extra).into_vec());
        all
    };
    picks.sort_unstable();
    Ok(picks)
}

/// Horizontal mirror of a C×H×W image.
pub fn mirror_image(image: &Tensor) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::contract(format!(
            "mirror expects C×H×W, got {:?}",
            image.shape()
        )));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[ch * h * w + y * w + x] = src[ch * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Fraction of each side kept by the random/center crop.
pub const CROP_FRACTION: f64 = 7.0 / 8.0;

fn bilinear_resize(image: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if (h, w) == (th, tw) {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut out = vec![0.0; c * th * tw];
    for ch in 0..c {
        for y in 0..th {
            // Align corners: endpoint samples map to endpoint pixels.
            let fy = if th > 1 {
                y as f64 * (h - 1) as f64 / (th - 1) as f64
            } else {
                0.0
            };
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let dy = fy - y0 as f64;
            for x in 0..tw {
                let fx = if tw > 1 {
                    x as f64 * (w - 1) as f64 / (tw - 1) as f64
                } else {
                    0.0
                };
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let dx = fx - x0 as f64;
                let at = |yy: usize, xx: usize| src[ch * h * w + yy * w + xx];
                let top = at(y0, x0) * (1.0 - dx) + at(y0, x1) * dx;
                let bot = at(y1, x0) * (1.0 - dx) + at(y1, x1) * dx;
                out[ch * th * tw + y * tw + x] = top * (1.0 - dy) + bot * dy;
            }
        }
    }
    Tensor::new(vec![c, th, tw], out)
}

fn crop(image: &Tensor, oy: usize, ox: usize, ch: usize, cw: usize) -> Result<Tensor> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if oy + ch > h || ox + cw > w {
        return Err(Error::contract(format!(
            "crop {ch}×{cw} at ({oy},{ox}) exceeds image {h}×{w}"
        )));
    }
    let src = image.data();
    let mut out = vec![0.0; c * ch * cw];
    for chn in 0..c {
        for y in 0..ch {
            for x in 0..cw {
                out[chn * ch * cw + y * cw + x] = src[chn * h * w + (oy + y) * w + (ox + x)];
            }
        }
    }
    Tensor::new(vec![c, ch, cw], out)
}

fn nearest_div16(n: usize) -> usize {
    (((n + 8) / 16).max(1)) * 16
}

/// Training augmentation (mirror + random crop) or deterministic eval crop
/// (center), always resized back to a /16-divisible size.
pub fn augment(image: &Tensor, rng: &mut impl Rng, train_mode: bool) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::contract(format!(
            "augment expects C×H×W, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h < 16 || w < 16 {
        return Err(Error::contract(format!(
            "image {h}×{w} too small to crop (need ≥ 16×16)"
        )));
    }
    let ch = ((h as f64 * CROP_FRACTION) as usize).max(1);
    let cw = ((w as f64 * CROP_FRACTION) as usize).max(1);

    let cropped = if train_mode {
        let flipped = if rng.gen_bool(0.5) {
            mirror_image(image)?
        } else {
            image.clone()
        };
        let oy = rng.gen_range(0..=h - ch);
        let ox = rng.gen_range(0..=w - cw);
        crop(&flipped, oy, ox, ch, cw)?
    } else {
        crop(image, (h - ch) / 2, (w - cw) / 2, ch, cw)?
    };
    bilinear_resize(&cropped, nearest_div16(ch), nearest_div16(cw))
}

/// One video's training-ready frames plus its label.
pub enum BatchItem {
    Features(Vec<crate::backbone::FeatureMap>, usize),
    Images(Vec<Tensor>, usize),
}

impl BatchItem {
    fn frames(&self) -> VideoFrames<'_> {
        match self {
            BatchItem::Features(maps, _) => VideoFrames::Features(maps),
            BatchItem::Images(imgs, _) => VideoFrames::Images(imgs),
        }
    }

    fn label(&self) -> usize {
        match self {
            BatchItem::Features(_, y) | BatchItem::Images(_, y) => *y,
        }
    }
}

/// Batch loss and its gradient.
///
/// Returns the mean over the batch of
/// `pooled NLL + λ · (mean over frames of ‖A·Aᵀ − I‖²_F)`,
/// the gradient per parameter in `ModelParams::named` order, and how many
/// videos the sampled-frame scores already classify correctly.
pub fn total_loss(
    params: &ModelParams,
    batch: &[BatchItem],
    lambda: f64,
    pooling: Pooling,
) -> Result<(f64, Vec<Tensor>, usize)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss_sum = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    let mut correct = 0usize;

    for item in batch {
        let mut tape = Tape::new();
        let staged = stage_params(&mut tape, params)?;
        let fwd = video_forward(&mut tape, &staged, &params.config, &item.frames())?;
        let nll = pooled_nll_on_tape(&mut tape, fwd.scores, item.label(), pooling)?;
        let loss = match (fwd.penalty_mean, lambda != 0.0) {
            (Some(pen), true) => {
                let scaled = tape.scale(pen, lambda)?;
                tape.add(nll, scaled)?
            }
            _ => nll,
        };
        loss_sum += tape.value(loss).item()?;

        let probs = pooled_probs(tape.value(fwd.scores), pooling)?;
        let pred = probs
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if pred == item.label() {
            correct += 1;
        }

        let g = tape.backward(loss)?;
        match &mut grads {
            None => {
                grads = Some(
                    staged
                        .vars
                        .iter()
                        .map(|&v| scaled_tensor(g.wrt(v), scale))
                        .collect::<Result<_>>()?,
                )
            }
            Some(acc) => {
                for (slot, &v) in acc.iter_mut().zip(&staged.vars) {
                    add_scaled(slot, g.wrt(v), scale)?;
                }
            }
        }
    }

    Ok((loss_sum * scale, grads.expect("nonempty batch"), correct))
}

fn scaled_tensor(t: &Tensor, s: f64) -> Result<Tensor> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect())
}

fn add_scaled(acc: &mut Tensor, t: &Tensor, s: f64) -> Result<()> {
    if acc.shape() != t.shape() {
        return Err(Error::contract("gradient accumulator shape mismatch"));
    }
    let mut data = acc.data().to_vec();
    for (a, b) in data.iter_mut().zip(t.data()) {
        *a += b * s;
    }
    *acc = Tensor::new(acc.shape().to_vec(), data)?;
    Ok(())
}

/// Optimizer state between epochs; serialized verbatim into checkpoints.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub momentum: Vec<Tensor>,
    /// Next epoch to run (also the count of completed epochs).
    pub next_epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    /// Which initialization attempt produced this state. Every RNG stream the
    /// run consumes (init, shuffles, frame sampling, augmentation) is tagged
    /// with it, so distinct attempts see distinct draws and a resumed run
    /// replays exactly the attempt it came from.
    pub attempt: u64,
}

impl TrainState {
    pub fn fresh(config: &TrainConfig, attempt: u64) -> Result<Self> {
        let mut rng = derive(config.seed, &[TAG_INIT, attempt]);
        let params = ModelParams::init(config.model.clone(), &mut rng)?;
        let momentum = params
            .named()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Ok(TrainState {
            params,
            momentum,
            next_epoch: 0,
            step: 0,
            attempt,
        })
    }
}

/// One CSV row of the training log.
#[derive(Clone, Debug, serde::Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Validation accuracy under tp, avg, max, indep (empty without a val set).
    pub val_acc: Option<[f64; 4]>,
}

pub const LOG_HEADER: &str =
    "epoch,lr_head,lr_backbone,train_loss,train_acc,val_acc_tp,val_acc_avg,val_acc_max,val_acc_indep";

impl EpochLog {
    pub fn to_csv_row(&self) -> String {
        let val = match self.val_acc {
            Some([tp, avg, max, indep]) => format!("{tp},{avg},{max},{indep}"),
            None => ",,,".to_string(),
        };
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.lr_head, self.lr_backbone, self.train_loss, self.train_acc, val
        )
    }
}

fn materialize_sample(
    dataset: &Dataset,
    sample: &VideoSample,
    frames_per_clip: usize,
    rng: &mut impl Rng,
    train_mode: bool,
) -> Result<BatchItem> {
    if sample.features.is_some() {
        let maps = load_features(dataset, sample)?;
        let picks = sample_frames(maps.len(), frames_per_clip, rng)?;
        let chosen = picks.iter().map(|&i| maps[i].clone()).collect();
        Ok(BatchItem::Features(chosen, sample.label))
    } else {
        let paths = sample.frames.as_ref().expect("validated manifest");
        let picks = sample_frames(paths.len(), frames_per_clip, rng)?;
        let mut imgs = Vec::with_capacity(picks.len());
        for &i in &picks {
            let img = load_image(&dataset.root.join(&paths[i]))?;
            imgs.push(augment(&img, rng, train_mode)?);
        }
        Ok(BatchItem::Images(imgs, sample.label))
    }
}

/// All frames of a video, eval-ready (center crop in image mode).
pub fn eval_item(dataset: &Dataset, sample: &VideoSample) -> Result<BatchItem> {
    if sample.features.is_some() {
        Ok(BatchItem::Features(
            load_features(dataset, sample)?,
            sample.label,
        ))
    } else {
        let paths = sample.frames.as_ref().expect("validated manifest");
        let mut rng = derive(0, &[]);
        let mut imgs = Vec::with_capacity(paths.len());
        for p in paths {
            let img = load_image(&dataset.root.join(p))?;
            imgs.push(augment(&img, &mut rng, false)?);
        }
        Ok(BatchItem::Images(imgs, sample.label))
    }
}

/// Run (or continue) training. With a validation set the log carries
/// per-pooling validation accuracy each epoch.
///
/// A fresh run trains `init_restarts` independent initializations and keeps
/// the one whose final epoch has the lowest mean training loss; ties go to
/// the earliest attempt. Resuming continues the checkpointed attempt alone —
/// the competing initializations were already discarded when it was selected.
pub fn train(
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    config: &TrainConfig,
    resume: Option<TrainState>,
) -> Result<(TrainState, Vec<EpochLog>)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    if let Some(state) = resume {
        return train_attempt(train_set, val_set, config, state);
    }
    let mut best: Option<(f64, TrainState, Vec<EpochLog>)> = None;
    for attempt in 0..config.init_restarts as u64 {
        let start = TrainState::fresh(config, attempt)?;
        let (state, logs) = train_attempt(train_set, val_set, config, start)?;
        let final_loss = logs.last().map(|l| l.train_loss).unwrap_or(f64::INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| final_loss < *b) {
            best = Some((final_loss, state, logs));
        }
    }
    let (_, state, logs) = best.expect("init_restarts ≥ 1 is validated");
    Ok((state, logs))
}

fn train_attempt(
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    config: &TrainConfig,
    mut state: TrainState,
) -> Result<(TrainState, Vec<EpochLog>)> {
    let attempt = state.attempt;
    let mut logs = Vec::new();

    for epoch in state.next_epoch..config.epochs {
        let lr_head = epoch_learning_rate(config, epoch, config.lr_head)?;
        let lr_backbone = epoch_learning_rate(config, epoch, config.lr_backbone)?;

        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut derive(config.seed, &[TAG_EPOCH, attempt, epoch as u64]));

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut batch = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let sample = &train_set.manifest.samples[idx];
                let mut rng =
                    derive(config.seed, &[TAG_EPOCH, attempt, epoch as u64, idx as u64]);
                batch.push(materialize_sample(
                    train_set,
                    sample,
                    config.frames_per_clip,
                    &mut rng,
                    true,
                )?);
            }
            let (loss, grads, batch_correct) =
                total_loss(&state.params, &batch, config.lambda, config.pooling).map_err(
                    |e| {
                        Error::numeric(format!(
                            "aborting at epoch {epoch}, batch {batch_idx}: {e}; {}",
                            param_norms(&state.params)
                        ))
                    },
                )?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {batch_idx}; {}",
                    param_norms(&state.params)
                )));
            }
            sgd_momentum_step(
                &mut state.params,
                &mut state.momentum,
                &grads,
                lr_head,
                lr_backbone,
                config.momentum,
                config.weight_decay,
            )
            .map_err(|e| {
                Error::numeric(format!(
                    "aborting at epoch {epoch}, batch {batch_idx}: {e}; {}",
                    param_norms(&state.params)
                ))
            })?;
            state.step += 1;
            loss_sum += loss;
            correct += batch_correct;
            batches += 1;
        }

        let val_acc = match val_set {
            Some(ds) => {
                let scored = score_dataset(ds, &state.params)?;
                let mut accs = [0.0; 4];
                for (i, pooling) in Pooling::ALL.iter().enumerate() {
                    accs[i] = accuracy_from_scores(&scored, *pooling)?;
                }
                Some(accs)
            }
            None => None,
        };

        logs.push(EpochLog {
            epoch,
            lr_head,
            lr_backbone,
            train_loss: loss_sum / batches as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc,
        });
        state.next_epoch = epoch + 1;
    }
    Ok((state, logs))
}

fn param_norms(params: &ModelParams) -> String {
    let parts: Vec<String> = params
        .named()
        .iter()
        .map(|(name, t)| {
            let norm = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            format!("‖{name}‖={norm:.3e}")
        })
        .collect();
    format!("parameter norms: {}", parts.join(", "))
}

/// Per-video scores (all frames) used by evaluation.
struct ScoredVideo {
    id: String,
    label: usize,
    scores: Tensor,
}

fn eval_threads() -> usize {
    match std::env::var("ATTNPOOL_THREADS") {
        Ok(v) => v.parse::<usize>().unwrap_or(1).max(1),
        Err(_) => std::thread::available_parallelism()
            .map(|n| n.get().min(8))
            .unwrap_or(1),
    }
}

fn score_dataset(dataset: &Dataset, params: &ModelParams) -> Result<Vec<ScoredVideo>> {
    score_dataset_with_threads(dataset, params, eval_threads())
}

fn score_dataset_with_threads(
    dataset: &Dataset,
    params: &ModelParams,
    threads: usize,
) -> Result<Vec<ScoredVideo>> {
    let n = dataset.len();
    let threads = threads.clamp(1, n.max(1));
    let results: Mutex<Vec<(usize, Result<ScoredVideo>)>> = Mutex::new(Vec::with_capacity(n));

    std::thread::scope(|scope| {
        for worker in 0..threads {
            let results = &results;
            scope.spawn(move || {
                for idx in (worker..n).step_by(threads) {
                    let sample = &dataset.manifest.samples[idx];
                    let item = eval_item(dataset, sample).and_then(|item| {
                        let out =
                            crate::model::forward_video(params, &item.frames())?;
                        Ok(ScoredVideo {
                            id: sample.id.clone(),
                            label: sample.label,
                            scores: out.scores,
                        })
                    });
                    results.lock().unwrap().push((idx, item));
                }
            });
        }
    });

    let mut collected = results.into_inner().unwrap();
    collected.sort_by_key(|(idx, _)| *idx);
    collected.into_iter().map(|(_, r)| r).collect()
}

fn accuracy_from_scores(scored: &[ScoredVideo], pooling: Pooling) -> Result<f64> {
    let mut correct = 0usize;
    for v in scored {
        let probs = pooled_probs(&v.scores, pooling)?;
        let pred = argmax(probs.data());
        if pred == v.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / scored.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0
}

/// Evaluation result for one video.
#[derive(Clone, Debug, serde::Serialize)]
pub struct VideoResult {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    /// Frame-importance distribution p(f|S) over all frames.
    pub importance: Vec<f64>,
    /// The 0–100 display rescale of the importance.
    pub importance_display: Vec<f64>,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct EvalReport {
    pub pooling: Pooling,
    pub accuracy: f64,
    /// confusion[true][predicted].
    pub confusion: Vec<Vec<usize>>,
    pub videos: Vec<VideoResult>,
}

/// Deterministic full-dataset evaluation: every frame, center crops, scores
/// pooled under `pooling`. `ATTNPOOL_THREADS` caps the worker count and
/// changes speed only, never the report.
pub fn evaluate(dataset: &Dataset, params: &ModelParams, pooling: Pooling) -> Result<EvalReport> {
    evaluate_with_threads(dataset, params, pooling, eval_threads())
}

pub fn evaluate_with_threads(
    dataset: &Dataset,
    params: &ModelParams,
    pooling: Pooling,
    threads: usize,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    let e = dataset.manifest.num_classes;
    let scored = score_dataset_with_threads(dataset, params, threads)?;
    let mut confusion = vec![vec![0usize; e]; e];
    let mut videos = Vec::with_capacity(scored.len());
    let mut correct = 0usize;
    for v in &scored {
        let probs = pooled_probs(&v.scores, pooling)?;
        let predicted = argmax(probs.data());
        confusion[v.label][predicted] += 1;
        if predicted == v.label {
            correct += 1;
        }
        let p = joint_softmax(&v.scores)?;
        let (imp, display) = frame_importance(&p)?;
        videos.push(VideoResult {
            id: v.id.clone(),
            label: v.label,
            predicted,
            importance: imp.data().to_vec(),
            importance_display: display,
        });
    }
    Ok(EvalReport {
        pooling,
        accuracy: correct as f64 / scored.len() as f64,
        confusion,
        videos,
    })
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// On-disk checkpoint: config echo, parameters and momentum as float64, and
/// the (seed, epoch, step) triple that pins every derived rng stream.
#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointFile {
    version: u32,
    config: TrainConfig,
    params: Vec<NamedTensor>,
    momentum: Vec<NamedTensor>,
    seed: u64,
    next_epoch: usize,
    step: u64,
    /// Initialization attempt this state came from; resuming must replay the
    /// same rng streams, so the tag travels with the weights.
    #[serde(default)]
    attempt: u64,
}

pub fn save_checkpoint(path: &Path, config: &TrainConfig, state: &TrainState) -> Result<()> {
    let named = state.params.named();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        params: named
            .iter()
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
        momentum: named
            .iter()
            .zip(&state.momentum)
            .map(|((name, _), t)| NamedTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
        seed: config.seed,
        next_epoch: state.next_epoch,
        step: state.step,
        attempt: state.attempt,
    };
    let mut bytes = serde_json::to_vec(&file)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, TrainState)> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    file.config.validate()?;

    let mut params = zero_params(&file.config.model);
    fill_named(&mut params, &file.params, "parameter")?;
    let expected: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
    let momentum = ordered_tensors(&file.momentum, &expected, "momentum buffer")?;

    Ok((
        file.config.clone(),
        TrainState {
            params,
            momentum,
            next_epoch: file.next_epoch,
            step: file.step,
            attempt: file.attempt,
        },
    ))
}

/// Zero-valued parameters of the right shapes — a template for loading
/// checkpoints and for gradient-check rebuilders.
pub fn zero_params(config: &ModelConfig) -> ModelParams {
    // Shape template filled from the checkpoint's tensors.
    let backbone = config.backbone.as_ref().map(|bb| {
        let k = bb.kernel_size;
        let mut c_in = bb.in_channels;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for &c_out in &bb.channels {
            weights.push(Tensor::zeros(&[c_out, c_in, k, k]));
            biases.push(Tensor::zeros(&[c_out]));
            c_in = c_out;
        }
        crate::backbone::BackboneParams {
            config: bb.clone(),
            weights,
            biases,
        }
    });
    ModelParams {
        w_s1: (config.heads > 0)
            .then(|| Tensor::zeros(&[config.attention_units, config.descriptor_dim])),
        w_s2: (config.heads > 0).then(|| Tensor::zeros(&[config.heads, config.attention_units])),
        w_sm: Tensor::zeros(&[config.num_classes, config.summary_width()]),
        backbone,
        config: config.clone(),
    }
}

fn fill_named(params: &mut ModelParams, stored: &[NamedTensor], what: &str) -> Result<()> {
    let expected: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
    let tensors = ordered_tensors(stored, &expected, what)?;
    for ((_, slot), tensor) in params.named_mut().into_iter().zip(tensors) {
        *slot = tensor;
    }
    Ok(())
}

fn ordered_tensors(
    stored: &[NamedTensor],
    expected: &[String],
    what: &str,
) -> Result<Vec<Tensor>> {
    if stored.len() != expected.len() {
        return Err(Error::format(format!(
            "checkpoint holds {} {what}s, model needs {}",
            stored.len(),
            expected.len()
        )));
    }
    stored
        .iter()
        .zip(expected)
        .map(|(nt, name)| {
            if &nt.name != name {
                return Err(Error::format(format!(
                    "checkpoint {what} '{}' where '{name}' was expected",
                    nt.name
                )));
            }
            Tensor::new(nt.shape.clone(), nt.data.clone())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::numerics::grad_check;
    use std::path::PathBuf;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir()
            .join("attnpool-training-tests")
            .join(name);
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn sgdr_endpoints_and_midpoint() {
        let (hi, lo) = (0.1, 0.0001);
        assert_eq!(sgdr_learning_rate(0, 10, hi, lo).unwrap(), hi);
        assert_eq!(sgdr_learning_rate(10, 10, hi, lo).unwrap(), lo);
        let mid = sgdr_learning_rate(5, 10, hi, lo).unwrap();
        assert!((mid - (hi + lo) / 2.0).abs() < 1e-15);
        assert!(sgdr_learning_rate(11, 10, hi, lo).is_err());
    }

    #[test]
    fn schedule_walks_doubling_cycles() {
        let config = TrainConfig::default(); // t0=10, t_mult=2
        let lr = |e| epoch_learning_rate(&config, e, 0.1).unwrap();
        assert_eq!(lr(0), 0.1);
        assert_eq!(lr(10), 0.1); // restart
        assert_eq!(lr(30), 0.1); // next restart after a 20-epoch cycle
        assert!(lr(9) < lr(8)); // decaying within a cycle
        // Midpoint of the second cycle (epoch 20 = t 10 of 20).
        let mid = lr(20);
        assert!((mid - (0.1 + 0.1 * 1e-3) / 2.0).abs() < 1e-12);

        let constant = TrainConfig {
            schedule: Schedule::Constant,
            ..TrainConfig::default()
        };
        assert_eq!(epoch_learning_rate(&constant, 25, 0.1).unwrap(), 0.1);
    }

    fn scalar_param(v: f64) -> ModelParams {
        // 1-parameter model stand-in for optimizer unit tests: heads 0,
        // E=2, D=1 → w_sm is 2×1; we only drive the first coordinate.
        let config = ModelConfig {
            num_classes: 2,
            descriptor_dim: 1,
            heads: 0,
            attention_units: 1,
            backbone: None,
        };
        ModelParams {
            config,
            w_s1: None,
            w_s2: None,
            w_sm: Tensor::new(vec![2, 1], vec![v, 0.0]).unwrap(),
            backbone: None,
        }
    }

    #[test]
    fn momentum_step_matches_hand_simulation() {
        // Plain gradient descent when momentum and decay are off.
        let mut params = scalar_param(1.0);
        let mut bufs = vec![Tensor::zeros(&[2, 1])];
        let grad = vec![Tensor::new(vec![2, 1], vec![0.5, 0.0]).unwrap()];
        sgd_momentum_step(&mut params, &mut bufs, &grad, 0.1, 0.1, 0.0, 0.0).unwrap();
        assert!((params.w_sm.data()[0] - (1.0 - 0.05)).abs() < 1e-15);

        // Zero gradient and zero buffers change nothing.
        let mut params = scalar_param(1.0);
        let mut bufs = vec![Tensor::zeros(&[2, 1])];
        let zero = vec![Tensor::zeros(&[2, 1])];
        sgd_momentum_step(&mut params, &mut bufs, &zero, 0.1, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(params.w_sm.data()[0], 1.0);

        // Two steps at momentum 0.9 on a constant gradient g: buffers go
        // g then 1.9g, total displacement lr·2.9·g.
        let g = 0.2;
        let lr = 0.1;
        let mut params = scalar_param(1.0);
        let mut bufs = vec![Tensor::zeros(&[2, 1])];
        let grad = vec![Tensor::new(vec![2, 1], vec![g, 0.0]).unwrap()];
        sgd_momentum_step(&mut params, &mut bufs, &grad, lr, lr, 0.9, 0.0).unwrap();
        sgd_momentum_step(&mut params, &mut bufs, &grad, lr, lr, 0.9, 0.0).unwrap();
        assert!((params.w_sm.data()[0] - (1.0 - lr * 2.9 * g)).abs() < 1e-12);
        assert!((bufs[0].data()[0] - 1.9 * g).abs() < 1e-12);

        // Weight decay feeds the buffer through the parameter value.
        let mut params = scalar_param(2.0);
        let mut bufs = vec![Tensor::zeros(&[2, 1])];
        let zero = vec![Tensor::zeros(&[2, 1])];
        sgd_momentum_step(&mut params, &mut bufs, &zero, 0.5, 0.5, 0.0, 0.1).unwrap();
        // buf = 0.1·2 = 0.2; param = 2 − 0.5·0.2 = 1.9.
        assert!((params.w_sm.data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn frame_sampling_contracts() {
        let mut rng = derive(1, &[TAG_EPOCH, 0, 0]);
        let all = sample_frames(16, 16, &mut rng).unwrap();
        assert_eq!(all, (0..16).collect::<Vec<_>>());

        for seed in 0..100u64 {
            let mut rng = derive(seed, &[TAG_EPOCH, 0, 0]);
            let picks = sample_frames(8, 16, &mut rng).unwrap();
            assert_eq!(picks.len(), 16);
            assert!(picks.windows(2).all(|w| w[0] <= w[1]));
            for f in 0..8 {
                assert!(picks.contains(&f), "seed {seed} missing frame {f}");
            }
        }

        // Plain subsampling stays sorted, in range, and duplicate-free.
        let mut rng = derive(2, &[TAG_EPOCH, 1, 4]);
        let picks = sample_frames(24, 16, &mut rng).unwrap();
        assert_eq!(picks.len(), 16);
        assert!(picks.windows(2).all(|w| w[0] < w[1]));
        assert!(picks.iter().all(|&f| f < 24));

        // Same stream → same picks.
        let a = sample_frames(24, 16, &mut derive(3, &[TAG_EPOCH, 2, 7])).unwrap();
        let b = sample_frames(24, 16, &mut derive(3, &[TAG_EPOCH, 2, 7])).unwrap();
        assert_eq!(a, b);
    }

    fn test_image(seed: u64, h: usize, w: usize) -> Tensor {
        let data = (0..3 * h * w)
            .map(|i| {
                let z = (seed.wrapping_mul(31).wrapping_add(i as u64 + 1))
                    .wrapping_mul(0x9e3779b97f4a7c15);
                ((z >> 13) % 1000) as f64 / 1000.0
            })
            .collect();
        Tensor::new(vec![3, h, w], data).unwrap()
    }

    #[test]
    fn augmentation_contracts() {
        let img = test_image(5, 32, 48);

        // Eval mode is deterministic.
        let mut r1 = derive(9, &[TAG_EPOCH, 0, 0]);
        let mut r2 = derive(10, &[TAG_EPOCH, 5, 3]);
        let a = augment(&img, &mut r1, false).unwrap();
        let b = augment(&img, &mut r2, false).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), &[3, 32, 48]); // 28→32, 42→48 after resize

        // Mirror is an involution.
        let m = mirror_image(&img).unwrap();
        assert_eq!(mirror_image(&m).unwrap().data(), img.data());

        // Train crops stay in bounds for many streams and sizes.
        for seed in 0..1000u64 {
            let mut rng = derive(seed, &[TAG_EPOCH, 0, 0]);
            let out = augment(&img, &mut rng, true).unwrap();
            assert_eq!(out.shape(), &[3, 32, 48]);
            assert!(out.data().iter().all(|v| v.is_finite()));
        }

        // Same stream → same augmentation.
        let a = augment(&img, &mut derive(77, &[TAG_EPOCH, 1, 2]), true).unwrap();
        let b = augment(&img, &mut derive(77, &[TAG_EPOCH, 1, 2]), true).unwrap();
        assert_eq!(a.data(), b.data());

        assert!(augment(&test_image(1, 8, 8), &mut derive(0, &[]), true).is_err());
    }

    fn feature_item(seed: u64, f: usize, l: usize, d: usize, label: usize) -> BatchItem {
        use crate::backbone::FeatureMap;
        let maps = (0..f)
            .map(|i| {
                let data = (0..l * d)
                    .map(|j| {
                        let z = (seed.wrapping_mul(101).wrapping_add((i * l * d + j) as u64 + 1))
                            .wrapping_mul(0x2545f4914f6cdd1d);
                        ((z >> 12) % 2000) as f64 / 1000.0 - 1.0
                    })
                    .collect();
                FeatureMap::new(1, l, Tensor::new(vec![l, d], data).unwrap()).unwrap()
            })
            .collect();
        BatchItem::Features(maps, label)
    }

    #[test]
    fn zero_model_loss_is_log_num_classes() {
        let config = ModelConfig {
            num_classes: 7,
            descriptor_dim: 3,
            heads: 0,
            attention_units: 1,
            backbone: None,
        };
        let params = ModelParams {
            config,
            w_s1: None,
            w_s2: None,
            w_sm: Tensor::zeros(&[7, 3]),
            backbone: None,
        };
        let batch = [feature_item(11, 1, 4, 3, 2)];
        let (loss, _, _) = total_loss(&params, &batch, 0.0, Pooling::Tp).unwrap();
        assert!((loss - (7.0_f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_matches_eager_composition() {
        let mut rng = derive(21, &[TAG_INIT]);
        let config = ModelConfig {
            num_classes: 3,
            descriptor_dim: 4,
            heads: 2,
            attention_units: 5,
            backbone: None,
        };
        let params = ModelParams::init(config, &mut rng).unwrap();
        let batch = [feature_item(31, 2, 4, 4, 1), feature_item(32, 2, 4, 4, 2)];

        for &(lambda, pooling) in
            &[(0.0, Pooling::Tp), (1.0, Pooling::Tp), (0.5, Pooling::Avg)]
        {
            let (loss, _, _) = total_loss(&params, &batch, lambda, pooling).unwrap();

            let mut expected = 0.0;
            for item in &batch {
                let BatchItem::Features(maps, label) = item else { unreachable!() };
                let mut summaries = Vec::new();
                let mut pen = 0.0;
                for m in maps {
                    let a = crate::attention::attention_weights(
                        &m.r,
                        params.w_s1.as_ref().unwrap(),
                        params.w_s2.as_ref().unwrap(),
                    )
                    .unwrap();
                    pen += crate::attention::orthogonality_penalty(&a).unwrap();
                    summaries.push(crate::attention::aggregate(&a, &m.r).unwrap());
                }
                pen /= maps.len() as f64;
                let rows: Vec<Vec<f64>> =
                    summaries.iter().map(|v| v.data().to_vec()).collect();
                let v_mat = Tensor::from_rows(&rows).unwrap();
                let scores = crate::temporal::class_scores(&v_mat, &params.w_sm).unwrap();
                let probs = pooled_probs(&scores, pooling).unwrap();
                expected += -(probs.data()[*label].max(1e-30)).ln() + lambda * pen;
            }
            expected /= batch.len() as f64;
            assert!(
                (loss - expected).abs() < 1e-12,
                "λ={lambda} {pooling}: {loss} vs {expected}"
            );
        }
    }

    #[test]
    fn lambda_wiring_is_linear_in_the_penalty() {
        let mut rng = derive(23, &[TAG_INIT]);
        let config = ModelConfig {
            num_classes: 3,
            descriptor_dim: 4,
            heads: 2,
            attention_units: 4,
            backbone: None,
        };
        let params = ModelParams::init(config, &mut rng).unwrap();
        let batch = [feature_item(41, 3, 4, 4, 0)];
        let (l0, _, _) = total_loss(&params, &batch, 0.0, Pooling::Tp).unwrap();
        let (l1, _, _) = total_loss(&params, &batch, 1.0, Pooling::Tp).unwrap();
        let (l2, _, _) = total_loss(&params, &batch, 2.0, Pooling::Tp).unwrap();
        assert!(((l1 - l0) - (l2 - l1)).abs() < 1e-12);
        assert!(l1 > l0); // the near-uniform initial attention is penalized
    }

    #[test]
    fn total_loss_gradients_pass_grad_check() {
        let mut rng = derive(29, &[TAG_INIT]);
        let config = ModelConfig {
            num_classes: 4,
            descriptor_dim: 6,
            heads: 2,
            attention_units: 5,
            backbone: None,
        };
        let params = ModelParams::init(config.clone(), &mut rng).unwrap();
        let batch = [feature_item(51, 3, 4, 6, 2)];

        for lambda in [0.0, 1.0] {
            let named: Vec<(String, Tensor)> = params
                .named()
                .iter()
                .map(|(n, t)| (n.clone(), (*t).clone()))
                .collect();
            let rebuild = |p: &[Tensor]| ModelParams {
                config: config.clone(),
                w_s1: Some(p[0].clone()),
                w_s2: Some(p[1].clone()),
                w_sm: p[2].clone(),
                backbone: None,
            };
            let inputs: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
            let (_, analytic, _) =
                total_loss(&rebuild(&inputs), &batch, lambda, Pooling::Tp).unwrap();
            let report = grad_check(&named, &analytic, 1e-5, 1e-4, |p| {
                total_loss(&rebuild(p), &batch, lambda, Pooling::Tp).map(|(l, _, _)| l)
            })
            .unwrap();
            assert!(report.pass, "λ={lambda}: max err {}", report.max_rel_err);
        }
    }

    fn separable_sets(root: &str) -> (Dataset, Dataset) {
        let spec = SyntheticSpec {
            num_classes: 2,
            descriptor_dim: 4,
            frames_total: 4,
            key_frames: 4,
            noise: 0.0,
            videos_per_class: 100,
            ..SyntheticSpec::default()
        };
        let train_dir = tmp(&format!("{root}-train"));
        let val_dir = tmp(&format!("{root}-val"));
        let train = generate_synthetic(&spec, "train", &train_dir).unwrap();
        let val = generate_synthetic(&spec, "val", &val_dir).unwrap();
        (train, val)
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                num_classes: 2,
                descriptor_dim: 4,
                heads: 0,
                attention_units: 1,
                backbone: None,
            },
            pooling: Pooling::Tp,
            frames_per_clip: 4,
            epochs: 10,
            batch_size: 16,
            init_restarts: 1,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_fits_a_separable_set() {
        let (train_set, _) = separable_sets("separable");
        let (state, logs) = train(&train_set, None, &tiny_train_config(), None).unwrap();
        assert_eq!(logs.len(), 10);
        assert_eq!(state.next_epoch, 10);
        let last = logs.last().unwrap();
        assert!(last.train_acc >= 0.99, "train acc {}", last.train_acc);
        assert!(
            last.train_loss < logs[0].train_loss,
            "loss did not decrease: {} vs {}",
            last.train_loss,
            logs[0].train_loss
        );
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let (train_set, _) = separable_sets("determinism");
        let config = TrainConfig {
            epochs: 4,
            ..tiny_train_config()
        };

        let (full, logs_a) = train(&train_set, None, &config, None).unwrap();
        let (again, logs_b) = train(&train_set, None, &config, None).unwrap();
        assert_eq!(
            logs_a.last().unwrap().train_loss,
            logs_b.last().unwrap().train_loss
        );
        assert_eq!(full.params.w_sm.data(), again.params.w_sm.data());

        // Stop after 2 epochs, checkpoint, resume: bit-identical result.
        let half_config = TrainConfig {
            epochs: 2,
            ..config.clone()
        };
        let (half, _) = train(&train_set, None, &half_config, None).unwrap();
        let dir = tmp("resume");
        let ck = dir.join("mid.ckpt");
        save_checkpoint(&ck, &config, &half).unwrap();
        let (loaded_config, loaded_state) = load_checkpoint(&ck).unwrap();
        assert_eq!(loaded_config, config);
        let (resumed, _) = train(&train_set, None, &config, Some(loaded_state)).unwrap();
        assert_eq!(resumed.params.w_sm.data(), full.params.w_sm.data());
        assert_eq!(resumed.step, full.step);
        for (a, b) in resumed.momentum.iter().zip(&full.momentum) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn restarts_pick_the_lowest_final_loss() {
        let (train_set, _) = separable_sets("restarts");
        let single = TrainConfig {
            epochs: 2,
            ..tiny_train_config()
        };
        let triple = TrainConfig {
            init_restarts: 3,
            ..single.clone()
        };

        let (one, logs_one) = train(&train_set, None, &single, None).unwrap();
        let (best, logs_best) = train(&train_set, None, &triple, None).unwrap();
        let (again, _) = train(&train_set, None, &triple, None).unwrap();

        // Attempt 0 is in the candidate set, so the winner can't lose to it.
        assert!(logs_best.last().unwrap().train_loss <= logs_one.last().unwrap().train_loss);
        assert!(best.attempt < 3);
        // Selection is deterministic.
        assert_eq!(best.attempt, again.attempt);
        assert_eq!(best.params.w_sm.data(), again.params.w_sm.data());
        // If attempt 0 won, the whole state matches the single-init run.
        if best.attempt == 0 {
            assert_eq!(best.params.w_sm.data(), one.params.w_sm.data());
        } else {
            assert_ne!(best.params.w_sm.data(), one.params.w_sm.data());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let (train_set, _) = separable_sets("ckpt-bytes");
        let config = TrainConfig {
            epochs: 1,
            ..tiny_train_config()
        };
        let (state, _) = train(&train_set, None, &config, None).unwrap();
        let dir = tmp("ckpt-roundtrip");
        let p1 = dir.join("a.ckpt");
        let p2 = dir.join("b.ckpt");
        save_checkpoint(&p1, &config, &state).unwrap();
        let (c2, s2) = load_checkpoint(&p1).unwrap();
        save_checkpoint(&p2, &c2, &s2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    fn oracle_params(dir: &Path) -> (Dataset, ModelParams) {
        // Noiseless all-key-frame set plus a matched-filter classifier:
        // heads 0, w_sm row c = class c's direction. The mean descriptor of
        // any frame of class c is s·u_c/L, and directions are orthonormal,
        // so the true class wins every frame.
        let spec = SyntheticSpec {
            noise: 0.0,
            key_frames: 6,
            frames_total: 6,
            videos_per_class: 5,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec, "val", dir).unwrap();
        let truth = crate::data::load_truth(dir).unwrap();
        let rows: Vec<Vec<f64>> = truth.directions.clone();
        let config = ModelConfig {
            num_classes: 4,
            descriptor_dim: 4,
            heads: 0,
            attention_units: 1,
            backbone: None,
        };
        let params = ModelParams {
            config,
            w_s1: None,
            w_s2: None,
            w_sm: Tensor::from_rows(&rows).unwrap(),
            backbone: None,
        };
        (ds, params)
    }

    #[test]
    fn evaluation_accuracy_and_confusion() {
        let dir = tmp("eval-oracle");
        let (ds, params) = oracle_params(&dir);
        for pooling in Pooling::ALL {
            let report = evaluate(&ds, &params, pooling).unwrap();
            assert_eq!(report.accuracy, 1.0, "{pooling}");
            // Confusion is diagonal with per-class counts, trace/total = acc.
            let mut trace = 0;
            for (c, row) in report.confusion.iter().enumerate() {
                assert_eq!(row.iter().sum::<usize>(), 5);
                trace += row[c];
            }
            assert_eq!(trace, ds.len());
            // Importance of every video sums to 1.
            for v in &report.videos {
                let s: f64 = v.importance.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(v
                    .importance_display
                    .iter()
                    .any(|&d| (d - 100.0).abs() < 1e-9));
            }
        }
    }

    #[test]
    fn random_params_evaluate_near_chance() {
        let spec = SyntheticSpec {
            videos_per_class: 50,
            ..SyntheticSpec::default()
        };
        let dir = tmp("eval-chance");
        let ds = generate_synthetic(&spec, "val", &dir).unwrap();
        let mut rng = derive(99, &[TAG_INIT]);
        let config = ModelConfig {
            num_classes: 4,
            descriptor_dim: 4,
            heads: 1,
            attention_units: 4,
            backbone: None,
        };
        let params = ModelParams::init(config, &mut rng).unwrap();
        let report = evaluate(&ds, &params, Pooling::Tp).unwrap();
        // Untrained model on 200 balanced videos: 3σ binomial band around 1/4.
        assert!((report.accuracy - 0.25).abs() < 0.1, "{}", report.accuracy);
    }

    #[test]
    fn evaluation_is_thread_count_invariant() {
        let dir = tmp("eval-threads");
        let (ds, params) = oracle_params(&dir);
        let one = evaluate_with_threads(&ds, &params, Pooling::Tp, 1).unwrap();
        let many = evaluate_with_threads(&ds, &params, Pooling::Tp, 5).unwrap();
        assert_eq!(
            serde_json::to_string(&one).unwrap(),
            serde_json::to_string(&many).unwrap()
        );
    }

    #[test]
    fn diverging_training_aborts_with_diagnostics() {
        let (train_set, _) = separable_sets("diverge");
        let config = TrainConfig {
            lr_head: 1e12,
            epochs: 8,
            ..tiny_train_config()
        };
        let err = train(&train_set, None, &config, None)
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("epoch") && err.contains("batch") && err.contains("norms"),
            "{err}"
        );
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let bad = |c: TrainConfig| assert!(c.validate().is_err());
        bad(TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        });
        bad(TrainConfig {
            frames_per_clip: 0,
            ..TrainConfig::default()
        });
        bad(TrainConfig {
            eta_min_factor: 0.0,
            ..TrainConfig::default()
        });
        bad(TrainConfig {
            init_restarts: 0,
            ..TrainConfig::default()
        });
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn log_rows_render_stably() {
        let row = EpochLog {
            epoch: 3,
            lr_head: 0.05,
            lr_backbone: 1e-5,
            train_loss: 1.25,
            train_acc: 0.875,
            val_acc: Some([0.5, 0.25, 0.25, 0.25]),
        };
        assert_eq!(
            row.to_csv_row(),
            "3,0.05,0.00001,1.25,0.875,0.5,0.25,0.25,0.25"
        );
        let row = EpochLog {
            val_acc: None,
            ..row
        };
        assert!(row.to_csv_row().ends_with(",,,"));
    }
}
