//! Masked L1/L2 losses and the hybrid multi-scale objective.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::geometry::NormalMap;
use crate::network::{ForwardOutput, SCALES};
use crate::tensor::{LossKind, Real, Tape, Tensor, Var};

/// Per-scale weights, coarse to fine.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LossWeights(pub [f64; SCALES]);

impl Default for LossWeights {
    fn default() -> Self {
        Self([0.2, 0.4, 0.8, 1.0])
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.0.iter().all(|&w| w >= 0.0 && w.is_finite()), "loss weights must be non-negative: {:?}", self.0);
        Ok(())
    }
}

/// Which per-scale losses are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossSelector {
    /// L2 at every scale (warm-up).
    AllL2,
    /// L2 at the two coarse scales, L1 at the two fine ones.
    Hybrid,
}

impl LossSelector {
    pub fn kinds(self) -> [LossKind; SCALES] {
        match self {
            Self::AllL2 => [LossKind::L2; SCALES],
            Self::Hybrid => [LossKind::L2, LossKind::L2, LossKind::L1, LossKind::L1],
        }
    }
}

/// A recorded loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub var: Var,
    /// Valid pixels that contributed.
    pub count: usize,
}

impl LossTerm {
    /// No valid pixel: the loss is defined as zero.
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Mean over valid pixels of the squared per-channel differences, summed over channels.
pub fn l2_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: &Tensor<T>, valid: &[bool]) -> Result<LossTerm> {
    let (var, count) = tape.masked_loss(pred, gt, valid, LossKind::L2)?;
    if count == 0 {
        log::warn!("l2 loss over zero valid pixels, defined as 0");
    }
    Ok(LossTerm { var, count })
}

/// Mean over valid pixels of the absolute per-channel differences, summed over
/// channels. The subgradient at zero difference is 0.
pub fn l1_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: &Tensor<T>, valid: &[bool]) -> Result<LossTerm> {
    let (var, count) = tape.masked_loss(pred, gt, valid, LossKind::L1)?;
    if count == 0 {
        log::warn!("l1 loss over zero valid pixels, defined as 0");
    }
    Ok(LossTerm { var, count })
}

/// Batched multi-scale targets: per scale a [B,3,h,w] tensor and per-pixel validity.
#[derive(Clone, Debug)]
pub struct Targets<T: Real> {
    pub levels: Vec<Tensor<T>>,
    pub valid: Vec<Vec<bool>>,
}

impl<T: Real> Targets<T> {
    /// Stacks per-sample pyramids (each coarse to fine, [`SCALES`] levels).
    pub fn from_pyramids(pyramids: &[&[NormalMap]]) -> Result<Self> {
        ensure!(!pyramids.is_empty(), "empty batch");
        let mut levels = Vec::with_capacity(SCALES);
        let mut valid = Vec::with_capacity(SCALES);
        for l in 0..SCALES {
            let first = pyramids[0].get(l).ok_or_else(|| crate::error::contract("pyramid has too few levels"))?;
            let (w, h) = (first.width(), first.height());
            let plane = w * h;
            let mut data = Vec::with_capacity(pyramids.len() * 3 * plane);
            let mut mask = Vec::with_capacity(pyramids.len() * plane);
            for p in pyramids {
                ensure!(p.len() == SCALES, "pyramid has {} levels, expected {}", p.len(), SCALES);
                let m = &p[l];
                ensure!(m.width() == w && m.height() == h, "pyramid levels differ across the batch");
                for c in 0..3 {
                    data.extend(m.raw().iter().map(|n| T::lit(n[c] as f64)));
                }
                mask.extend_from_slice(m.valid());
            }
            levels.push(Tensor::new(&[pyramids.len(), 3, h, w], data)?);
            valid.push(mask);
        }
        Ok(Self { levels, valid })
    }
}

/// The recorded objective and its per-scale parts.
#[derive(Clone, Debug)]
pub struct HybridLoss {
    pub total: Var,
    pub terms: [LossTerm; SCALES],
    pub kinds: [LossKind; SCALES],
}

/// `Σ_l w_l · loss_l(pred_l, gt_l)` with the per-scale loss kinds of `selector`.
pub fn hybrid_loss<T: Real>(
    tape: &mut Tape<T>,
    outputs: &ForwardOutput,
    targets: &Targets<T>,
    weights: &LossWeights,
    selector: LossSelector,
) -> Result<HybridLoss> {
    weights.validate()?;
    ensure!(targets.levels.len() == SCALES, "expected {} target levels, got {}", SCALES, targets.levels.len());
    let kinds = selector.kinds();
    let mut terms = Vec::with_capacity(SCALES);
    let mut total: Option<Var> = None;
    for l in 0..SCALES {
        let pred = outputs.normals[l];
        ensure!(
            tape.shape(pred) == targets.levels[l].shape(),
            "scale {}: prediction {:?} does not align with target {:?}",
            l + 1,
            tape.shape(pred),
            targets.levels[l].shape()
        );
        let term = match kinds[l] {
            LossKind::L2 => l2_loss(tape, pred, &targets.levels[l], &targets.valid[l])?,
            LossKind::L1 => l1_loss(tape, pred, &targets.levels[l], &targets.valid[l])?,
        };
        let weighted = tape.scale(term.var, T::lit(weights.0[l]));
        total = Some(match total {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
        terms.push(term);
    }
    Ok(HybridLoss { total: total.expect("four scales"), terms: terms.try_into().expect("four scales"), kinds })
}

/// Fits one free 3-vector to `targets` by gradient descent on the chosen
/// loss, with step `lr0 / (1 + k / 10)` at iteration `k`. Under L2 the fixed
/// point is the arithmetic mean, under L1 the coordinatewise median.
pub fn fit_single_vector(targets: &[[f64; 3]], kind: LossKind, steps: usize, lr0: f64) -> Result<[f64; 3]> {
    ensure!(!targets.is_empty(), "need at least one target");
    let n = targets.len();
    let target = Tensor::from_fn(&[1, 3, 1, n], |i| targets[i % n][i / n]);
    let mask = vec![true; n];
    let zeros_in = Tensor::<f64>::zeros(&[1, 1, 1, n]);
    let zero_w = Tensor::<f64>::zeros(&[3, 1, 1, 1]);
    let mut p = Tensor::<f64>::zeros(&[3]);
    for k in 0..steps {
        let mut tape = Tape::new();
        let x = tape.constant(zeros_in.clone());
        let w = tape.constant(zero_w.clone());
        let b = tape.param(p.clone());
        // a 1×1 convolution of zeros broadcasts the bias to every pixel
        let pred = tape.conv2d(x, w, b, 1, 0)?;
        let (loss, _) = tape.masked_loss(pred, &target, &mask, kind)?;
        tape.backward(loss)?;
        let g = tape.grad(b).expect("parameter");
        let lr = lr0 / (1.0 + k as f64 / 10.0);
        for (v, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * gv;
        }
    }
    Ok([p.data()[0], p.data()[1], p.data()[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn losses_vanish_on_exact_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        let mut tape = Tape::new();
        let p = tape.constant(t.clone());
        let mask = vec![true; 32];
        for f in [l1_loss::<f64>, l2_loss::<f64>] {
            let term = f(&mut tape, p, &t, &mask).unwrap();
            assert_eq!(tape.value(term.var).data()[0], 0.0);
        }
    }

    #[test]
    fn constant_offset_closed_forms() {
        let delta = 0.25;
        let t = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::full(&[1, 3, 2, 2], delta));
        let mask = vec![true; 4];
        let l2 = l2_loss(&mut tape, p, &t, &mask).unwrap();
        let l1 = l1_loss(&mut tape, p, &t, &mask).unwrap();
        assert_eq!(tape.value(l2.var).data()[0], 3.0 * delta * delta);
        assert_eq!(tape.value(l1.var).data()[0], 3.0 * delta);
    }

    #[test]
    fn empty_mask_gives_flagged_zero() {
        let t = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let mut tape = Tape::new();
        let p = tape.param(Tensor::full(&[1, 3, 2, 2], 1.0));
        let term = l2_loss(&mut tape, p, &t, &[false; 4]).unwrap();
        assert!(term.is_empty());
        assert_eq!(tape.value(term.var).data()[0], 0.0);
        tape.backward(term.var).unwrap();
        assert!(tape.grad(p).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn l1_subgradient_at_zero_is_zero() {
        let t = Tensor::<f64>::full(&[1, 3, 1, 1], 0.5);
        let mut tape = Tape::new();
        let p = tape.param(t.clone());
        let term = l1_loss(&mut tape, p, &t, &[true]).unwrap();
        tape.backward(term.var).unwrap();
        assert!(tape.grad(p).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn random_losses_match_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (pt, t) = (rand_tensor(&mut rng, &[2, 3, 5, 3]), rand_tensor(&mut rng, &[2, 3, 5, 3]));
        let mask: Vec<bool> = (0..30).map(|_| rng.gen_bool(0.7)).collect();
        let mut tape = Tape::new();
        let p = tape.constant(pt.clone());
        let l1 = l1_loss(&mut tape, p, &t, &mask).unwrap();
        let l2 = l2_loss(&mut tape, p, &t, &mask).unwrap();
        let (mut s1, mut s2, mut n) = (0.0, 0.0, 0);
        for b in 0..2 {
            for px in 0..15 {
                if !mask[b * 15 + px] {
                    continue;
                }
                n += 1;
                for c in 0..3 {
                    let d = pt.data()[(b * 3 + c) * 15 + px] - t.data()[(b * 3 + c) * 15 + px];
                    s1 += d.abs();
                    s2 += d * d;
                }
            }
        }
        assert_eq!(l1.count, n);
        assert!((tape.value(l1.var).data()[0] - s1 / n as f64).abs() < 1e-12);
        assert!((tape.value(l2.var).data()[0] - s2 / n as f64).abs() < 1e-12);
    }

    fn fake_outputs(tape: &mut Tape<f32>, preds: &[Tensor<f32>]) -> ForwardOutput {
        let normals = [0, 1, 2, 3].map(|l| tape.constant(preds[l].clone()));
        ForwardOutput { normals, confidence: None, unpool_trace: Vec::new() }
    }

    fn pyramid_targets(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f32>>, Targets<f32>) {
        let levels: Vec<Tensor<f32>> =
            (0..4).map(|l| Tensor::from_fn(&[1, 3, 1 << l, 1 << l], |_| rng.gen_range(-1.0..1.0))).collect();
        let valid = (0..4).map(|l| vec![true; 1 << (2 * l)]).collect();
        (levels.clone(), Targets { levels, valid })
    }

    #[test]
    fn hybrid_scale_four_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (preds, targets) = pyramid_targets(&mut rng);
        let mut preds = preds;
        let delta = 0.125f32;
        for v in preds[3].data_mut() {
            *v += delta;
        }
        let mut tape = Tape::new();
        let out = fake_outputs(&mut tape, &preds);
        let h = hybrid_loss(&mut tape, &out, &targets, &LossWeights::default(), LossSelector::Hybrid).unwrap();
        assert_eq!(tape.value(h.total).data()[0], 1.0 * 3.0 * delta);
        let exact = fake_outputs(&mut tape, &targets.levels);
        let z = hybrid_loss(&mut tape, &exact, &targets, &LossWeights::default(), LossSelector::Hybrid).unwrap();
        assert_eq!(tape.value(z.total).data()[0], 0.0);
    }

    #[test]
    fn hybrid_equals_weighted_per_scale_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, targets) = pyramid_targets(&mut rng);
        let preds: Vec<Tensor<f32>> = targets
            .levels
            .iter()
            .map(|t| Tensor::new(t.shape(), t.data().iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect()).unwrap())
            .collect();
        for selector in [LossSelector::AllL2, LossSelector::Hybrid] {
            let mut tape = Tape::new();
            let out = fake_outputs(&mut tape, &preds);
            let w = LossWeights::default();
            let h = hybrid_loss(&mut tape, &out, &targets, &w, selector).unwrap();
            // independent recomputation per scale, combined in the same order
            let mut expected = 0.0f32;
            for l in 0..4 {
                let plane = preds[l].numel() / 3;
                let mut s = 0.0f64;
                for i in 0..preds[l].numel() {
                    let d = (preds[l].data()[i] - targets.levels[l].data()[i]) as f64;
                    s += if selector == LossSelector::Hybrid && l >= 2 { d.abs() } else { d * d };
                }
                let per_scale = (s / plane as f64) as f32;
                expected = if l == 0 { per_scale * w.0[0] as f32 } else { expected + per_scale * w.0[l] as f32 };
            }
            assert_eq!(tape.value(h.total).data()[0], expected, "{selector:?}");
        }
    }

    #[test]
    fn misaligned_levels_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (preds, mut targets) = pyramid_targets(&mut rng);
        targets.levels.swap(0, 1);
        let mut tape = Tape::new();
        let out = fake_outputs(&mut tape, &preds);
        assert!(hybrid_loss(&mut tape, &out, &targets, &LossWeights::default(), LossSelector::Hybrid).is_err());
    }

    #[test]
    fn single_vector_fit_reaches_mean_and_median() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let targets: Vec<[f64; 3]> = (0..9).map(|_| [0; 3].map(|_| rng.gen_range(-1.0..1.0))).collect();
        let mean = [0, 1, 2].map(|c| targets.iter().map(|t| t[c]).sum::<f64>() / 9.0);
        let median = [0, 1, 2].map(|c| {
            let mut v: Vec<f64> = targets.iter().map(|t| t[c]).collect();
            v.sort_by(f64::total_cmp);
            v[4]
        });
        let l2 = fit_single_vector(&targets, LossKind::L2, 2000, 0.25).unwrap();
        let l1 = fit_single_vector(&targets, LossKind::L1, 20000, 0.5).unwrap();
        for c in 0..3 {
            assert!((l2[c] - mean[c]).abs() < 1e-3, "{l2:?} vs mean {mean:?}");
            assert!((l1[c] - median[c]).abs() < 1e-3, "{l1:?} vs median {median:?}");
        }
    }

    #[test]
    fn targets_stack_pyramids() {
        let gt = NormalMap::from_options(8, 8, vec![Some([0.0, 0.0, -1.0]); 64]).unwrap();
        let pyr = crate::synth::build_pyramid(&gt, 4).unwrap();
        let t = Targets::<f32>::from_pyramids(&[&pyr, &pyr]).unwrap();
        assert_eq!(t.levels[0].shape(), [2, 3, 1, 1]);
        assert_eq!(t.levels[3].shape(), [2, 3, 8, 8]);
        assert_eq!(t.valid[3].len(), 128);
    }
}
