//! Multi-head spatial self-attention over a frame's local descriptors.
//!
//! A frame is a bag of L local descriptors R (L×D, one descriptor per spatial
//! cell). Each of the N heads scores every descriptor through a shared tanh
//! bottleneck and normalizes the scores into a distribution over cells:
//!
//! ```text
//! A = softmax_rows(W_s2 · tanh(W_s1 · Rᵀ))        A: N×L
//! ```
//!
//! There are deliberately no bias terms. The frame summary is the stacked
//! head averages v = flatten(A·R) (head-major, length N·D), and a penalty
//! ‖A·Aᵀ − I‖²_F pushes heads toward distinct, peaked attention maps.

use crate::error::{Error, Result};
use crate::numerics::{matmul, stable_softmax, tanh_map, Tape, Tensor, Var};

fn expect_attention_inputs(r: &Tensor, w_s1: &Tensor, w_s2: &Tensor) -> Result<()> {
    if r.rank() != 2 || w_s1.rank() != 2 || w_s2.rank() != 2 {
        return Err(Error::contract(format!(
            "attention inputs must be matrices: R {:?}, W_s1 {:?}, W_s2 {:?}",
            r.shape(),
            w_s1.shape(),
            w_s2.shape()
        )));
    }
    if w_s1.shape()[1] != r.shape()[1] {
        return Err(Error::contract(format!(
            "W_s1 columns ({}) must match descriptor width ({})",
            w_s1.shape()[1],
            r.shape()[1]
        )));
    }
    if w_s2.shape()[1] != w_s1.shape()[0] {
        return Err(Error::contract(format!(
            "W_s2 columns ({}) must match bottleneck width ({})",
            w_s2.shape()[1],
            w_s1.shape()[0]
        )));
    }
    Ok(())
}

/// N×L attention matrix for one frame; each row is a distribution over cells.
pub fn attention_weights(r: &Tensor, w_s1: &Tensor, w_s2: &Tensor) -> Result<Tensor> {
    expect_attention_inputs(r, w_s1, w_s2)?;
    let rt = transpose(r);
    let hidden = tanh_map(&matmul(w_s1, &rt)?)?;
    let scores = matmul(w_s2, &hidden)?;
    stable_softmax(&scores, &[1])
}

/// Head-major frame summary: v = flatten(A·R), length N·D.
pub fn aggregate(a: &Tensor, r: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || r.rank() != 2 || a.shape()[1] != r.shape()[0] {
        return Err(Error::contract(format!(
            "aggregate needs A N×L and R L×D, got {:?} and {:?}",
            a.shape(),
            r.shape()
        )));
    }
    let m = matmul(a, r)?;
    let numel = m.numel();
    m.reshaped(vec![numel])
}

/// ‖A·Aᵀ − I‖²_F. Zero iff the head distributions are orthonormal, which for
/// row-stochastic rows means disjoint one-hot heads.
pub fn orthogonality_penalty(a: &Tensor) -> Result<f64> {
    if a.rank() != 2 {
        return Err(Error::contract(format!(
            "orthogonality_penalty expects a matrix, got {:?}",
            a.shape()
        )));
    }
    let n = a.shape()[0];
    let gram = matmul(a, &transpose(a))?;
    let mut sq = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = gram.at2(i, j) - if i == j { 1.0 } else { 0.0 };
            sq += d * d;
        }
    }
    Ok(sq)
}

/// Reshape one attention row onto the h×w descriptor grid (row-major) and
/// rescale linearly so the brightest cell is 1 (an all-zero row stays zero).
pub fn attention_heatmap(a_row: &[f64], h: usize, w: usize) -> Result<Tensor> {
    if a_row.len() != h * w {
        return Err(Error::contract(format!(
            "attention row of length {} does not tile a {h}×{w} grid",
            a_row.len()
        )));
    }
    let max = a_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let data = if max > 0.0 {
        a_row.iter().map(|v| v / max).collect()
    } else {
        vec![0.0; a_row.len()]
    };
    Tensor::new(vec![h, w], data)
}

fn transpose(t: &Tensor) -> Tensor {
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.data_mut()[j * m + i] = t.at2(i, j);
        }
    }
    out
}

/// Record one frame's attention on the tape. Returns the attention node
/// (N×L) and the flattened summary node (length N·D).
pub(crate) fn attention_on_tape(
    tape: &mut Tape,
    r: Var,
    w_s1: Var,
    w_s2: Var,
) -> Result<(Var, Var)> {
    expect_attention_inputs(tape.value(r), tape.value(w_s1), tape.value(w_s2))?;
    let rt = tape.transpose(r)?;
    let pre = tape.matmul(w_s1, rt)?;
    let hidden = tape.tanh(pre)?;
    let scores = tape.matmul(w_s2, hidden)?;
    let a = tape.softmax_rows(scores)?;
    let m = tape.matmul(a, r)?;
    let numel = tape.value(m).numel();
    let v = tape.reshape(m, vec![numel])?;
    Ok((a, v))
}

/// Record ‖A·Aᵀ − I‖²_F for an attention node.
pub(crate) fn penalty_on_tape(tape: &mut Tape, a: Var) -> Result<Var> {
    let n = tape.value(a).shape()[0];
    let at = tape.transpose(a)?;
    let gram = tape.matmul(a, at)?;
    let eye = tape.input(Tensor::eye(n))?;
    let diff = tape.sub(gram, eye)?;
    let sq = tape.mul(diff, diff)?;
    tape.sum(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use proptest::prelude::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn pseudo(seed: u64, n: usize, scale: f64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let z = (seed.wrapping_mul(1_000_003).wrapping_add(i as u64 + 1))
                    .wrapping_mul(0x9e3779b97f4a7c15);
                (((z >> 11) % 2_000_000) as f64 / 1_000_000.0 - 1.0) * scale
            })
            .collect()
    }

    #[test]
    fn aggregate_hand_value() {
        let a = t(&[vec![0.25, 0.75]]);
        let r = t(&[vec![0.0, 4.0], vec![4.0, 0.0]]);
        let v = aggregate(&a, &r).unwrap();
        assert_eq!(v.shape(), &[2]);
        assert!((v.data()[0] - 3.0).abs() < 1e-15);
        assert!((v.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn attention_weights_match_scalar_loop() {
        let l = 3;
        let d = 4;
        let u = 5;
        let n = 2;
        let r = Tensor::new(vec![l, d], pseudo(1, l * d, 1.0)).unwrap();
        let w1 = Tensor::new(vec![u, d], pseudo(2, u * d, 0.7)).unwrap();
        let w2 = Tensor::new(vec![n, u], pseudo(3, n * u, 0.7)).unwrap();
        let a = attention_weights(&r, &w1, &w2).unwrap();
        assert_eq!(a.shape(), &[n, l]);

        for head in 0..n {
            // scores[head][cell] = Σ_u w2[head,u] · tanh(Σ_d w1[u,d]·r[cell,d])
            let mut scores = vec![0.0; l];
            for cell in 0..l {
                for uu in 0..u {
                    let mut pre = 0.0;
                    for dd in 0..d {
                        pre += w1.at2(uu, dd) * r.at2(cell, dd);
                    }
                    scores[cell] += w2.at2(head, uu) * pre.tanh();
                }
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for cell in 0..l {
                assert!(
                    (a.at2(head, cell) - exps[cell] / total).abs() < 1e-14,
                    "head {head} cell {cell}"
                );
            }
        }
    }

    #[test]
    fn penalty_hand_values() {
        // Single uniform head over 4 cells: A·Aᵀ = [[0.25]] → (0.25−1)² = 0.5625.
        let a = t(&[vec![0.25; 4]]);
        assert!((orthogonality_penalty(&a).unwrap() - 0.5625).abs() < 1e-15);

        // Two identical uniform heads: diagonal terms (0.25−1)² twice,
        // off-diagonal 0.25² twice → 1.25.
        let a = t(&[vec![0.25; 4], vec![0.25; 4]]);
        assert!((orthogonality_penalty(&a).unwrap() - 1.25).abs() < 1e-15);

        // Disjoint one-hot heads are exactly orthonormal.
        let a = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(orthogonality_penalty(&a).unwrap(), 0.0);
    }

    #[test]
    fn heatmap_reshapes_row_major_and_rescales() {
        let row = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let hm = attention_heatmap(&row, 2, 3).unwrap();
        assert_eq!(hm.shape(), &[2, 3]);
        // Row-major placement, rescaled so the max is 1.
        assert!((hm.at2(1, 0) - 0.4 / 0.6).abs() < 1e-15);
        assert_eq!(hm.at2(1, 2), 1.0);
        // Undoing the rescale recovers the original row.
        for (i, &v) in row.iter().enumerate() {
            assert!((hm.data()[i] * 0.6 - v).abs() < 1e-15);
        }
        assert!(attention_heatmap(&row, 2, 2).is_err());

        // Uniform row → constant 1; one-hot row → single white cell.
        let hm = attention_heatmap(&[0.25; 4], 2, 2).unwrap();
        assert!(hm.data().iter().all(|&v| v == 1.0));
        let hm = attention_heatmap(&[0.0, 1.0, 0.0, 0.0], 2, 2).unwrap();
        assert_eq!(hm.data(), &[0.0, 1.0, 0.0, 0.0]);
        let hm = attention_heatmap(&[0.0; 4], 2, 2).unwrap();
        assert!(hm.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_inputs_give_uniform_attention() {
        // Zero W_s2 → zero logits → uniform heads.
        let r = Tensor::new(vec![5, 3], pseudo(31, 15, 1.0)).unwrap();
        let w1 = Tensor::new(vec![4, 3], pseudo(32, 12, 0.8)).unwrap();
        let w2 = Tensor::zeros(&[2, 4]);
        let a = attention_weights(&r, &w1, &w2).unwrap();
        for &v in a.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }

        // Identical descriptor rows → constant logits per head → uniform.
        let row = pseudo(33, 3, 1.0);
        let r = Tensor::from_rows(&[row.clone(), row.clone(), row.clone(), row]).unwrap();
        let w2 = Tensor::new(vec![2, 4], pseudo(34, 8, 0.9)).unwrap();
        let a = attention_weights(&r, &w1, &w2).unwrap();
        for &v in a.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_selection_and_averaging() {
        let r = t(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        // One-hot head selects a row.
        let a = t(&[vec![0.0, 1.0, 0.0]]);
        let v = aggregate(&a, &r).unwrap();
        assert_eq!(v.data(), &[3.0, 4.0]);
        // Uniform head takes the column mean.
        let a = t(&[vec![1.0 / 3.0; 3]]);
        let v = aggregate(&a, &r).unwrap();
        assert!((v.data()[0] - 3.0).abs() < 1e-15);
        assert!((v.data()[1] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn descriptor_permutation_permutes_attention_columns() {
        let l = 4;
        let d = 3;
        let r = Tensor::new(vec![l, d], pseudo(7, l * d, 1.2)).unwrap();
        let w1 = Tensor::new(vec![5, d], pseudo(8, 5 * d, 0.6)).unwrap();
        let w2 = Tensor::new(vec![2, 5], pseudo(9, 10, 0.6)).unwrap();

        // Cyclic permutation of the descriptor rows.
        let perm: Vec<usize> = (0..l).map(|i| (i + 1) % l).collect();
        let mut permuted = Tensor::zeros(&[l, d]);
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..d {
                permuted.set2(dst, j, r.at2(src, j));
            }
        }

        let a = attention_weights(&r, &w1, &w2).unwrap();
        let ap = attention_weights(&permuted, &w1, &w2).unwrap();
        for head in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                assert!(
                    (ap.at2(head, dst) - a.at2(head, src)).abs() < 1e-13,
                    "head {head} cell {dst}"
                );
            }
        }

        // The summary of a permuted frame only moves within rounding error:
        // A·R re-pairs the same (weight, descriptor) products.
        let v = aggregate(&a, &r).unwrap();
        let vp = aggregate(&ap, &permuted).unwrap();
        for (x, y) in v.data().iter().zip(vp.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_forward_matches_eager() {
        let r0 = Tensor::new(vec![3, 2], pseudo(11, 6, 1.0)).unwrap();
        let w1 = Tensor::new(vec![4, 2], pseudo(12, 8, 0.8)).unwrap();
        let w2 = Tensor::new(vec![2, 4], pseudo(13, 8, 0.8)).unwrap();

        let mut tape = Tape::new();
        let r = tape.input(r0.clone()).unwrap();
        let v1 = tape.input(w1.clone()).unwrap();
        let v2 = tape.input(w2.clone()).unwrap();
        let (a, v) = attention_on_tape(&mut tape, r, v1, v2).unwrap();
        let pen = penalty_on_tape(&mut tape, a).unwrap();

        let a_eager = attention_weights(&r0, &w1, &w2).unwrap();
        let v_eager = aggregate(&a_eager, &r0).unwrap();
        assert_eq!(tape.value(a).data(), a_eager.data());
        assert_eq!(tape.value(v).data(), v_eager.data());
        let pen_eager = orthogonality_penalty(&a_eager).unwrap();
        assert!((tape.value(pen).item().unwrap() - pen_eager).abs() < 1e-14);
    }

    #[test]
    fn attention_gradients_pass_grad_check() {
        let r0 = Tensor::new(vec![3, 2], pseudo(21, 6, 1.0)).unwrap();
        let w1_0 = Tensor::new(vec![4, 2], pseudo(22, 8, 0.8)).unwrap();
        let w2_0 = Tensor::new(vec![2, 4], pseudo(23, 8, 0.8)).unwrap();

        // Loss = Σv + penalty exercises both outputs of the block.
        let eval = |p: &[Tensor]| {
            let mut tape = Tape::new();
            let r = tape.input(p[0].clone())?;
            let w1 = tape.input(p[1].clone())?;
            let w2 = tape.input(p[2].clone())?;
            let (a, v) = attention_on_tape(&mut tape, r, w1, w2)?;
            let pen = penalty_on_tape(&mut tape, a)?;
            let vsum = tape.sum(v)?;
            let loss = tape.add(vsum, pen)?;
            let g = tape.backward(loss)?;
            Ok((
                tape.value(loss).item()?,
                vec![g.wrt(r).clone(), g.wrt(w1).clone(), g.wrt(w2).clone()],
            ))
        };

        let params = [
            ("r".to_string(), r0),
            ("w_s1".to_string(), w1_0),
            ("w_s2".to_string(), w2_0),
        ];
        let inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
        let (_, analytic) = eval(&inputs).unwrap();
        let report = grad_check(&params, &analytic, 1e-5, 1e-4, |p| {
            eval(p).map(|(l, _)| l)
        })
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rows_are_distributions(
            l in 1usize..7, d in 1usize..5, u in 1usize..5, n in 1usize..4,
            seed in 0u64..10_000,
        ) {
            let r = Tensor::new(vec![l, d], pseudo(seed, l * d, 2.0)).unwrap();
            let w1 = Tensor::new(vec![u, d], pseudo(seed ^ 0xabc, u * d, 1.5)).unwrap();
            let w2 = Tensor::new(vec![n, u], pseudo(seed ^ 0xdef, n * u, 1.5)).unwrap();
            let a = attention_weights(&r, &w1, &w2).unwrap();
            for head in 0..n {
                let row = a.row(head);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }

            // Penalty is nonnegative for every attention matrix.
            prop_assert!(orthogonality_penalty(&a).unwrap() >= 0.0);

            // Each head block of the summary is a convex combination of the
            // descriptor rows, so it lies inside their coordinate-wise range.
            let v = aggregate(&a, &r).unwrap();
            for head in 0..n {
                for col in 0..d {
                    let vals: Vec<f64> = (0..l).map(|row| r.at2(row, col)).collect();
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let x = v.data()[head * d + col];
                    prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn penalty_zero_exactly_for_orthonormal_rows() {
        // Slightly perturbed orthonormal rows: penalty tracks the squared
        // deviation, so near-identity grams give near-zero penalty and
        // anything visibly non-orthonormal gives a clearly positive one.
        let a = t(&[vec![1.0, 1e-6], vec![-1e-6, 1.0]]);
        assert!(orthogonality_penalty(&a).unwrap() < 1e-9);
        let a = t(&[vec![0.9, 0.1], vec![0.1, 0.9]]);
        assert!(orthogonality_penalty(&a).unwrap() > 1e-3);
    }
}
