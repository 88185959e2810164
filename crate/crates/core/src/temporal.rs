//! Video-level pooling of per-frame class scores.
//!
//! The primary pooling is a single softmax over all F·E (frame, class) scores
//! jointly; class probabilities are the frame-marginal of that joint
//! distribution and frame importance is the class-marginal. AVG, MAX and
//! independent-frame baselines are provided for comparison.
//!
//! Score matrices are F×E tensors: row f holds the per-class scores of frame
//! f. Joint distributions are F×E, nonnegative, summing to 1.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{stable_softmax, Tape, Tensor, Var};

/// How per-frame scores are pooled into a video-level decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Temporal softmax pooling: joint softmax over frames and classes,
    /// marginalized over frames.
    Tp,
    /// Softmax of the per-class mean score.
    Avg,
    /// Softmax of the per-class max score (ties to the lowest frame index).
    Max,
    /// Per-frame softmax, frames treated as independent samples. At decision
    /// level this always agrees with `Avg`: the per-frame log-normalizers are
    /// class-independent, so the summed log-probabilities rank classes exactly
    /// like the summed raw scores.
    Indep,
}

impl Pooling {
    pub const ALL: [Pooling; 4] = [Pooling::Tp, Pooling::Avg, Pooling::Max, Pooling::Indep];
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Pooling::Tp => "tp",
            Pooling::Avg => "avg",
            Pooling::Max => "max",
            Pooling::Indep => "indep",
        };
        f.write_str(s)
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tp" => Ok(Pooling::Tp),
            "avg" => Ok(Pooling::Avg),
            "max" => Ok(Pooling::Max),
            "indep" => Ok(Pooling::Indep),
            other => Err(Error::contract(format!(
                "unknown pooling '{other}' (expected tp|avg|max|indep)"
            ))),
        }
    }
}

fn expect_scores(o: &Tensor) -> Result<(usize, usize)> {
    if o.rank() != 2 {
        return Err(Error::contract(format!(
            "score matrix must be F×E, got shape {:?}",
            o.shape()
        )));
    }
    let (f, e) = (o.shape()[0], o.shape()[1]);
    if e < 2 {
        return Err(Error::contract(format!("need at least 2 classes, got {e}")));
    }
    Ok((f, e))
}

fn expect_joint(p: &Tensor) -> Result<(usize, usize)> {
    let (f, e) = expect_scores(p)?;
    let total: f64 = p.data().iter().sum();
    if (total - 1.0).abs() > 1e-9 || p.data().iter().any(|&v| v < 0.0) {
        return Err(Error::contract(format!(
            "joint distribution must be nonnegative and sum to 1, sum = {total}"
        )));
    }
    Ok((f, e))
}

/// Per-frame class scores: O = V · W_smᵀ, one row per frame summary.
pub fn class_scores(v: &Tensor, w_sm: &Tensor) -> Result<Tensor> {
    if v.rank() != 2 || w_sm.rank() != 2 || v.shape()[1] != w_sm.shape()[1] {
        return Err(Error::contract(format!(
            "class_scores dimension mismatch: V {:?} vs W_sm {:?}",
            v.shape(),
            w_sm.shape()
        )));
    }
    let wt = crate::numerics::matmul(v, &transpose(w_sm)?)?;
    Ok(wt)
}

fn transpose(t: &Tensor) -> Result<Tensor> {
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.data_mut()[j * m + i] = t.at2(i, j);
        }
    }
    Ok(out)
}

/// Softmax over all F·E scores jointly.
pub fn joint_softmax(o: &Tensor) -> Result<Tensor> {
    expect_scores(o)?;
    stable_softmax(o, &[0, 1])
}

/// p(c|S): marginalize the joint distribution over frames.
pub fn class_marginal(p: &Tensor) -> Result<Tensor> {
    let (f, e) = expect_joint(p)?;
    let mut out = vec![0.0; e];
    for fi in 0..f {
        for c in 0..e {
            out[c] += p.at2(fi, c);
        }
    }
    Tensor::new(vec![e], out)
}

/// p(f|S) plus the 0–100 display copy (`100·p(f)/max_f p(f)`).
pub fn frame_importance(p: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (f, _) = expect_joint(p)?;
    let mut imp = vec![0.0; f];
    for fi in 0..f {
        imp[fi] = p.row(fi).iter().sum();
    }
    let max = imp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let display = if max > 0.0 {
        imp.iter().map(|v| 100.0 * v / max).collect()
    } else {
        vec![0.0; f]
    };
    Ok((Tensor::new(vec![f], imp)?, display))
}

/// Softmax of the per-class mean score.
pub fn avg_pool_probs(o: &Tensor) -> Result<Tensor> {
    let (f, e) = expect_scores(o)?;
    let mut mean = vec![0.0; e];
    for fi in 0..f {
        for c in 0..e {
            mean[c] += o.at2(fi, c);
        }
    }
    for m in &mut mean {
        *m /= f as f64;
    }
    stable_softmax(&Tensor::new(vec![e], mean)?, &[0])
}

/// Softmax of the per-class max score; ties resolve to the lowest frame index.
pub fn max_pool_probs(o: &Tensor) -> Result<Tensor> {
    let (f, e) = expect_scores(o)?;
    let mut best = vec![f64::NEG_INFINITY; e];
    for fi in 0..f {
        for c in 0..e {
            if o.at2(fi, c) > best[c] {
                best[c] = o.at2(fi, c);
            }
        }
    }
    stable_softmax(&Tensor::new(vec![e], best)?, &[0])
}

/// Σ_f cross-entropy of the per-frame softmax at the label.
pub fn independent_frame_loss(o: &Tensor, y: usize) -> Result<f64> {
    let (f, e) = expect_scores(o)?;
    if y >= e {
        return Err(Error::contract(format!(
            "label {y} out of range for {e} classes"
        )));
    }
    let per_frame = stable_softmax(o, &[1])?;
    let mut loss = 0.0;
    for fi in 0..f {
        loss -= per_frame.at2(fi, y).max(1e-30).ln();
    }
    Ok(loss)
}

/// Video-level class probabilities under a pooling mode (evaluation path).
///
/// For `Indep` the score of class c is Σ_f log p_f(c); the returned vector is
/// the normalized exponential of those sums (a geometric mean of the per-frame
/// posteriors).
pub fn pooled_probs(o: &Tensor, pooling: Pooling) -> Result<Tensor> {
    match pooling {
        Pooling::Tp => class_marginal(&joint_softmax(o)?),
        Pooling::Avg => avg_pool_probs(o),
        Pooling::Max => max_pool_probs(o),
        Pooling::Indep => {
            let (f, e) = expect_scores(o)?;
            let per_frame = stable_softmax(o, &[1])?;
            let mut logsum = vec![0.0; e];
            for fi in 0..f {
                for c in 0..e {
                    logsum[c] += per_frame.at2(fi, c).max(1e-30).ln();
                }
            }
            stable_softmax(&Tensor::new(vec![e], logsum)?, &[0])
        }
    }
}

/// Record the pooled negative log-likelihood of label `y` on the tape.
///
/// `o` must be an F×E score node. The underflow guard (log clamped at 1e-30)
/// matches the eager paths.
pub(crate) fn pooled_nll_on_tape(
    tape: &mut Tape,
    o: Var,
    y: usize,
    pooling: Pooling,
) -> Result<Var> {
    let (f, e) = expect_scores(tape.value(o))?;
    if y >= e {
        return Err(Error::contract(format!(
            "label {y} out of range for {e} classes"
        )));
    }
    match pooling {
        Pooling::Tp => {
            let p = tape.softmax_all(o)?;
            let pc = tape.sum_axis(p, 0)?;
            let py = tape.pick(pc, y)?;
            let lg = tape.log_clamped(py, 1e-30)?;
            tape.scale(lg, -1.0)
        }
        Pooling::Avg => {
            let sums = tape.sum_axis(o, 0)?;
            let mean = tape.scale(sums, 1.0 / f as f64)?;
            let probs = tape.softmax_all(mean)?;
            let py = tape.pick(probs, y)?;
            let lg = tape.log_clamped(py, 1e-30)?;
            tape.scale(lg, -1.0)
        }
        Pooling::Max => {
            let best = tape.max_axis0(o)?;
            let probs = tape.softmax_all(best)?;
            let py = tape.pick(probs, y)?;
            let lg = tape.log_clamped(py, 1e-30)?;
            tape.scale(lg, -1.0)
        }
        Pooling::Indep => {
            let per_frame = tape.softmax_rows(o)?;
            let lg = tape.log_clamped(per_frame, 1e-30)?;
            // Select the label column with a constant mask; the sum of the
            // masked matrix is Σ_f log p_f(y).
            let mut mask = Tensor::zeros(&[f, e]);
            for fi in 0..f {
                mask.set2(fi, y, 1.0);
            }
            let mask = tape.input(mask)?;
            let picked = tape.mul(lg, mask)?;
            let total = tape.sum(picked)?;
            tape.scale(total, -1.0)
        }
    }
}
