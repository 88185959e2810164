//! The full video classifier: optional convolutional backbone, optional
//! multi-head spatial attention, and a linear classifier whose per-frame
//! scores feed the temporal poolings.
//!
//! Two frame representations are supported. With attention (heads ≥ 1) a
//! frame becomes the head-major summary v = flatten(A·R) of width N·D; with
//! heads = 0 it is the plain column mean of R (width D), which is the
//! attention-free baseline.

use rand::Rng;

use crate::attention;
use crate::backbone::{self, BackboneConfig, BackboneParams, FeatureMap};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Descriptor dimension D of the feature maps the model consumes.
    pub descriptor_dim: usize,
    /// Attention head count N. 0 disables attention entirely.
    pub heads: usize,
    /// Width U of the tanh bottleneck (ignored when heads = 0).
    pub attention_units: usize,
    /// Present when the model starts from pixels instead of FEAT files.
    pub backbone: Option<BackboneConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::contract(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.descriptor_dim == 0 {
            return Err(Error::contract("descriptor dimension must be positive"));
        }
        if self.heads > 0 && self.attention_units == 0 {
            return Err(Error::contract(
                "attention_units must be positive when attention is enabled",
            ));
        }
        if let Some(bb) = &self.backbone {
            if bb.descriptor_dim() != self.descriptor_dim {
                return Err(Error::contract(format!(
                    "backbone emits {} channels but the model expects descriptor_dim {}",
                    bb.descriptor_dim(),
                    self.descriptor_dim
                )));
            }
        }
        Ok(())
    }

    /// Width of a frame summary: N·D with attention, D without.
    pub fn summary_width(&self) -> usize {
        if self.heads > 0 {
            self.heads * self.descriptor_dim
        } else {
            self.descriptor_dim
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// U×D, present iff heads ≥ 1.
    pub w_s1: Option<Tensor>,
    /// N×U, present iff heads ≥ 1.
    pub w_s2: Option<Tensor>,
    /// E×summary_width classifier (no bias).
    pub w_sm: Tensor,
    pub backbone: Option<BackboneParams>,
}

fn fan_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("finite init values")
}

impl ModelParams {
    /// Fan-based uniform init everywhere; attention heads start as copies of
    /// one shared row of W_s2 so every head begins in the same scoring basin
    /// and is pulled apart only by its own classifier block.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let backbone = match &config.backbone {
            Some(bb) => Some(BackboneParams::init(bb.clone(), rng)?),
            None => None,
        };
        let (w_s1, w_s2) = if config.heads > 0 {
            let (u, d, n) = (config.attention_units, config.descriptor_dim, config.heads);
            let w_s1 = fan_uniform(u, d, rng);
            let shared = fan_uniform(1, u, rng);
            let mut rows = Vec::with_capacity(n * u);
            for _ in 0..n {
                rows.extend_from_slice(shared.data());
            }
            (Some(w_s1), Some(Tensor::new(vec![n, u], rows)?))
        } else {
            (None, None)
        };
        let w_sm = fan_uniform(config.num_classes, config.summary_width(), rng);
        Ok(ModelParams {
            config,
            w_s1,
            w_s2,
            w_sm,
            backbone,
        })
    }

    /// Parameters in a fixed order (backbone blocks first, then attention,
    /// then classifier). The order defines checkpoint layout, optimizer
    /// slots, and gradient-check reports.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(bb) = &self.backbone {
            for (i, (w, b)) in bb.weights.iter().zip(&bb.biases).enumerate() {
                out.push((format!("backbone.w{i}"), w));
                out.push((format!("backbone.b{i}"), b));
            }
        }
        if let Some(w) = &self.w_s1 {
            out.push(("w_s1".to_string(), w));
        }
        if let Some(w) = &self.w_s2 {
            out.push(("w_s2".to_string(), w));
        }
        out.push(("w_sm".to_string(), &self.w_sm));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        if let Some(bb) = &mut self.backbone {
            for (i, (w, b)) in bb.weights.iter_mut().zip(&mut bb.biases).enumerate() {
                out.push((format!("backbone.w{i}"), w));
                out.push((format!("backbone.b{i}"), b));
            }
        }
        if let Some(w) = &mut self.w_s1 {
            out.push(("w_s1".to_string(), w));
        }
        if let Some(w) = &mut self.w_s2 {
            out.push(("w_s2".to_string(), w));
        }
        out.push(("w_sm".to_string(), &mut self.w_sm));
        out
    }

    /// Backbone parameters train at lr_backbone, everything else at lr_head.
    pub fn is_backbone_param(name: &str) -> bool {
        name.starts_with("backbone.")
    }
}

/// Tape nodes for every parameter, in `ModelParams::named` order.
pub(crate) struct StagedParams {
    pub vars: Vec<Var>,
    pub w_s1: Option<Var>,
    pub w_s2: Option<Var>,
    pub w_sm: Var,
    pub backbone_w: Vec<Var>,
    pub backbone_b: Vec<Var>,
}

pub(crate) fn stage_params(tape: &mut Tape, params: &ModelParams) -> Result<StagedParams> {
    let mut vars = Vec::new();
    let mut backbone_w = Vec::new();
    let mut backbone_b = Vec::new();
    if let Some(bb) = &params.backbone {
        for (w, b) in bb.weights.iter().zip(&bb.biases) {
            let wv = tape.input(w.clone())?;
            let bv = tape.input(b.clone())?;
            vars.push(wv);
            vars.push(bv);
            backbone_w.push(wv);
            backbone_b.push(bv);
        }
    }
    let w_s1 = match &params.w_s1 {
        Some(w) => {
            let v = tape.input(w.clone())?;
            vars.push(v);
            Some(v)
        }
        None => None,
    };
    let w_s2 = match &params.w_s2 {
        Some(w) => {
            let v = tape.input(w.clone())?;
            vars.push(v);
            Some(v)
        }
        None => None,
    };
    let w_sm = tape.input(params.w_sm.clone())?;
    vars.push(w_sm);
    Ok(StagedParams {
        vars,
        w_s1,
        w_s2,
        w_sm,
        backbone_w,
        backbone_b,
    })
}

/// One video's frames, either precomputed descriptors or pixel tensors.
pub enum VideoFrames<'a> {
    Features(&'a [FeatureMap]),
    /// C×H×W tensors, already augmented/cropped.
    Images(&'a [Tensor]),
}

impl VideoFrames<'_> {
    pub fn len(&self) -> usize {
        match self {
            VideoFrames::Features(f) => f.len(),
            VideoFrames::Images(i) => i.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything the training and inspection paths need from one video.
pub(crate) struct VideoForward {
    /// F×E per-frame class scores.
    pub scores: Var,
    /// Per-frame N×L attention matrices (empty when heads = 0).
    pub attention: Vec<Var>,
    /// Mean over frames of ‖A·Aᵀ − I‖²_F (None when heads = 0).
    pub penalty_mean: Option<Var>,
    /// Feature-grid extents (h', w').
    pub grid: (usize, usize),
}

pub(crate) fn video_forward(
    tape: &mut Tape,
    staged: &StagedParams,
    config: &ModelConfig,
    frames: &VideoFrames<'_>,
) -> Result<VideoForward> {
    if frames.is_empty() {
        return Err(Error::contract("video has no frames"));
    }
    if matches!(frames, VideoFrames::Images(_)) && config.backbone.is_none() {
        return Err(Error::contract(
            "pixel-space frames require a backbone in the model config",
        ));
    }

    let mut grid = (0usize, 0usize);
    let mut summaries = Vec::with_capacity(frames.len());
    let mut attn = Vec::new();
    let mut penalties = Vec::new();

    let frame_count = frames.len();
    for idx in 0..frame_count {
        let (r, g) = match frames {
            VideoFrames::Features(maps) => {
                let m = &maps[idx];
                if m.dim() != config.descriptor_dim {
                    return Err(Error::contract(format!(
                        "feature map has D={}, model expects {}",
                        m.dim(),
                        config.descriptor_dim
                    )));
                }
                (tape.input(m.r.clone())?, (m.grid_h, m.grid_w))
            }
            VideoFrames::Images(images) => {
                let img = &images[idx];
                let x = tape.input(img.clone())?;
                let r = backbone::backbone_on_tape_with(
                    tape,
                    x,
                    &staged.backbone_w,
                    &staged.backbone_b,
                )?;
                let g = (
                    img.shape()[1] / backbone::DOWNSAMPLE,
                    img.shape()[2] / backbone::DOWNSAMPLE,
                );
                (r, g)
            }
        };
        if idx == 0 {
            grid = g;
        } else if g != grid {
            return Err(Error::contract(format!(
                "frame {idx} has grid {g:?}, expected {grid:?}"
            )));
        }

        let v = if config.heads > 0 {
            let (a, v) = attention::attention_on_tape(
                tape,
                r,
                staged.w_s1.expect("attention params staged"),
                staged.w_s2.expect("attention params staged"),
            )?;
            penalties.push(attention::penalty_on_tape(tape, a)?);
            attn.push(a);
            v
        } else {
            // Attention-free baseline: uniform average over cells.
            let l = tape.value(r).shape()[0];
            let ones = tape.input(Tensor::full(&[1, l], 1.0 / l as f64)?)?;
            let mean = tape.matmul(ones, r)?;
            tape.reshape(mean, vec![config.descriptor_dim])?
        };
        summaries.push(v);
    }

    let v_mat = tape.stack_rows(&summaries)?;
    let w_sm_t = tape.transpose(staged.w_sm)?;
    let scores = tape.matmul(v_mat, w_sm_t)?;

    let penalty_mean = if penalties.is_empty() {
        None
    } else {
        let mut acc = penalties[0];
        for &p in &penalties[1..] {
            acc = tape.add(acc, p)?;
        }
        Some(tape.scale(acc, 1.0 / penalties.len() as f64)?)
    };

    Ok(VideoForward {
        scores,
        attention: attn,
        penalty_mean,
        grid,
    })
}

/// Plain-value forward pass for evaluation and inspection.
#[derive(Debug)]
pub struct VideoEval {
    /// F×E per-frame class scores.
    pub scores: Tensor,
    /// Per-frame N×L attention matrices (empty when heads = 0).
    pub attention: Vec<Tensor>,
    pub grid: (usize, usize),
}

pub fn forward_video(params: &ModelParams, frames: &VideoFrames<'_>) -> Result<VideoEval> {
    let mut tape = Tape::new();
    let staged = stage_params(&mut tape, params)?;
    let out = video_forward(&mut tape, &staged, &params.config, frames)?;
    Ok(VideoEval {
        scores: tape.value(out.scores).clone(),
        attention: out
            .attention
            .iter()
            .map(|&a| tape.value(a).clone())
            .collect(),
        grid: out.grid,
    })
}
