//! Trainable convolutional backbone and the FEAT feature-file format.
//!
//! A frame enters as a C×H×W pixel tensor (values in [0,1]) and leaves as an
//! L×D matrix of local descriptors, one row per spatial cell of the /16
//! output grid. The network is four blocks of [k×k same-pad convolution,
//! ReLU, 2×2 max-pool], so the composed downsampling factor is exactly 16.
//!
//! Precomputed descriptors can be stored per video in FEAT files and loaded
//! back byte-exactly, which makes training independent of the backbone when
//! features come from elsewhere.

use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const DOWNSAMPLE: usize = 16;

/// One frame's descriptors: `r` is L×D with L = grid_h·grid_w, rows ordered
/// row-major over the spatial grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub r: Tensor,
}

impl FeatureMap {
    pub fn new(grid_h: usize, grid_w: usize, r: Tensor) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || r.rank() != 2 || r.shape()[0] != grid_h * grid_w {
            return Err(Error::contract(format!(
                "feature map {}×{} needs {} descriptor rows, got shape {:?}",
                grid_h,
                grid_w,
                grid_h * grid_w,
                r.shape()
            )));
        }
        Ok(FeatureMap { grid_h, grid_w, r })
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.r.shape()[1]
    }
}

/// Shape of the network: four conv blocks, the last one `channels[3]` wide,
/// which is the descriptor dimension D.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels of the four blocks; the last entry is D.
    pub channels: [usize; 4],
    /// Convolution kernel size (odd). Same-padding of k/2 keeps spatial
    /// extents; kernel_size 1 gives a padding-free network.
    pub kernel_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        // Desk-scale default; raise channels[3] (e.g. to 512) for real imagery.
        BackboneConfig {
            in_channels: 3,
            channels: [8, 16, 32, 16],
            kernel_size: 3,
        }
    }
}

impl BackboneConfig {
    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels.contains(&0) {
            return Err(Error::contract("backbone channel widths must be positive"));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::contract(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub fn descriptor_dim(&self) -> usize {
        self.channels[3]
    }
}

/// Convolution kernels and biases for the four blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl BackboneParams {
    /// Glorot-uniform kernels (±sqrt(6/(fan_in+fan_out))), zero biases.
    pub fn init(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let k = config.kernel_size;
        let mut weights = Vec::with_capacity(4);
        let mut biases = Vec::with_capacity(4);
        let mut c_in = config.in_channels;
        for &c_out in &config.channels {
            let fan_in = (c_in * k * k) as f64;
            let fan_out = (c_out * k * k) as f64;
            let bound = (6.0 / (fan_in + fan_out)).sqrt();
            let data = (0..c_out * c_in * k * k)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            weights.push(Tensor::new(vec![c_out, c_in, k, k], data)?);
            biases.push(Tensor::zeros(&[c_out]));
            c_in = c_out;
        }
        Ok(BackboneParams {
            config,
            weights,
            biases,
        })
    }
}

fn expect_frame(x: &Tensor, in_channels: usize) -> Result<(usize, usize)> {
    if x.rank() != 3 || x.shape()[0] != in_channels {
        return Err(Error::contract(format!(
            "frame must be {}×H×W, got shape {:?}",
            in_channels,
            x.shape()
        )));
    }
    let (h, w) = (x.shape()[1], x.shape()[2]);
    if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
        return Err(Error::contract(format!(
            "frame extents must be divisible by {DOWNSAMPLE}, got {h}×{w}"
        )));
    }
    Ok((h, w))
}

/// Run one frame through the backbone: C×H×W pixels → (H/16)·(W/16) × D
/// descriptors.
pub fn extract_features(x: &Tensor, params: &BackboneParams) -> Result<FeatureMap> {
    let (h, w) = expect_frame(x, params.config.in_channels)?;
    let mut tape = Tape::new();
    let xv = tape.input(x.clone())?;
    let out = backbone_on_tape(&mut tape, xv, params)?;
    FeatureMap::new(h / DOWNSAMPLE, w / DOWNSAMPLE, tape.value(out).clone())
}

/// Record the backbone on a tape; `x` must be an in_channels×H×W node.
/// Returns the L×D descriptor node. Weight/bias nodes are supplied by the
/// caller so their gradients stay addressable.
pub(crate) fn backbone_on_tape_with(
    tape: &mut Tape,
    x: Var,
    weights: &[Var],
    biases: &[Var],
) -> Result<Var> {
    if weights.len() != 4 || biases.len() != 4 {
        return Err(Error::contract("backbone has exactly four blocks"));
    }
    let mut cur = x;
    for (w, b) in weights.iter().zip(biases) {
        let k = tape.value(*w).shape()[2];
        let conv = tape.conv2d(cur, *w, *b, k / 2)?;
        let act = tape.relu(conv)?;
        cur = tape.maxpool2(act)?;
    }
    // [D, h', w'] → row-major spatial rows of an L×D matrix.
    let shape = tape.value(cur).shape().to_vec();
    let (d, gh, gw) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(cur, vec![d, gh * gw])?;
    tape.transpose(flat)
}

fn backbone_on_tape(tape: &mut Tape, x: Var, params: &BackboneParams) -> Result<Var> {
    let mut ws = Vec::with_capacity(4);
    let mut bs = Vec::with_capacity(4);
    for (w, b) in params.weights.iter().zip(&params.biases) {
        ws.push(tape.input(w.clone())?);
        bs.push(tape.input(b.clone())?);
    }
    backbone_on_tape_with(tape, x, &ws, &bs)
}

const FEAT_MAGIC: &[u8; 4] = b"FEAT";
const FEAT_VERSION: u32 = 1;
const FEAT_HEADER_LEN: usize = 32;

/// Write a video's descriptor maps to a FEAT file.
///
/// Layout (little-endian): magic "FEAT" | version u32 = 1 | F u32 | h' u32 |
/// w' u32 | D u32 | two reserved u32 | payload of F·h'·w'·D float32, frame-
/// major, then spatial row-major, then channel.
pub fn save_feature_sequence(maps: &[FeatureMap], path: &Path) -> Result<()> {
    if maps.is_empty() {
        return Err(Error::contract("refusing to save an empty feature sequence"));
    }
    let (gh, gw, d) = (maps[0].grid_h, maps[0].grid_w, maps[0].dim());
    for (i, m) in maps.iter().enumerate() {
        if m.grid_h != gh || m.grid_w != gw || m.dim() != d {
            return Err(Error::contract(format!(
                "frame {i} has grid {}×{}×{}, expected {gh}×{gw}×{d}",
                m.grid_h,
                m.grid_w,
                m.dim()
            )));
        }
    }
    let mut buf = Vec::with_capacity(FEAT_HEADER_LEN + maps.len() * gh * gw * d * 4);
    buf.extend_from_slice(FEAT_MAGIC);
    for v in [
        FEAT_VERSION,
        maps.len() as u32,
        gh as u32,
        gw as u32,
        d as u32,
        0,
        0,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for m in maps {
        for &v in m.r.data() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::contract(format!(
                    "descriptor value {v} does not fit in float32"
                )));
            }
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Read a FEAT file back into per-frame descriptor maps.
pub fn load_feature_sequence(path: &Path) -> Result<Vec<FeatureMap>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < FEAT_HEADER_LEN {
        return Err(Error::format(format!(
            "{}: file of {} bytes is shorter than the {FEAT_HEADER_LEN}-byte header",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[..4] != FEAT_MAGIC {
        return Err(Error::format(format!(
            "{}: bad magic at offset 0 (expected \"FEAT\")",
            path.display()
        )));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FEAT_VERSION {
        return Err(Error::format(format!(
            "{}: unsupported version {version} at offset 4",
            path.display()
        )));
    }
    let f = u32_at(8) as usize;
    let gh = u32_at(12) as usize;
    let gw = u32_at(16) as usize;
    let d = u32_at(20) as usize;
    if f == 0 || gh == 0 || gw == 0 || d == 0 {
        return Err(Error::format(format!(
            "{}: zero dimension in header (F={f}, h'={gh}, w'={gw}, D={d})",
            path.display()
        )));
    }
    let per_frame = gh * gw * d;
    let expected = FEAT_HEADER_LEN + f * per_frame * 4;
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "{}: payload truncated or oversized at offset {}: header declares {f} frames \
             of {per_frame} float32 values ({expected} bytes total), file has {}",
            path.display(),
            bytes.len().min(expected),
            bytes.len()
        )));
    }
    let mut maps = Vec::with_capacity(f);
    let mut off = FEAT_HEADER_LEN;
    for frame in 0..f {
        let mut data = Vec::with_capacity(per_frame);
        for _ in 0..per_frame {
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(format!(
                    "{}: non-finite value at offset {off} (frame {frame})",
                    path.display()
                )));
            }
            data.push(v as f64);
            off += 4;
        }
        maps.push(FeatureMap::new(gh, gw, Tensor::new(vec![gh * gw, d], data)?)?);
    }
    Ok(maps)
}
