//! Dice supervision, the longitudinal relation regularizer, and the staged
//! total loss.
//!
//! The relation regularizer couples the two all-lesion heads: on
//! single-time-point patches they must agree everywhere; on two-time-point
//! patches the baseline head must be silent on new-lesion voxels while the
//! follow-up head must fire there. All norms are realized as mean squared
//! error over their support so the term's scale is independent of patch and
//! lesion size.

use crate::error::{Error, Result};
use crate::network::TripleIds;
use crate::tensor::{Tape, TensorId};
use crate::volume::SampleKind;

pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub switch_iteration: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            switch_iteration: 1000,
        }
    }
}

impl LossWeights {
    /// The regularizer is off before the switch iteration and takes its
    /// configured weight at and after it.
    pub fn lambda2_at(&self, iteration: usize) -> f64 {
        if iteration < self.switch_iteration {
            0.0
        } else {
            self.lambda2
        }
    }
}

fn label_leaf(tape: &mut Tape, shape: &[usize], y: &[u8]) -> Result<TensorId> {
    tape.leaf(shape.to_vec(), y.iter().map(|&v| f64::from(v)).collect())
}

/// Soft Dice loss `1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps)`.
pub fn dice_loss(tape: &mut Tape, p: TensorId, y: &[u8]) -> Result<TensorId> {
    let shape = tape.shape(p).to_vec();
    if shape.iter().product::<usize>() != y.len() {
        return Err(Error::Shape(format!(
            "dice_loss: prediction has {} voxels, label {}",
            shape.iter().product::<usize>(),
            y.len()
        )));
    }
    let yt = label_leaf(tape, &shape, y)?;
    let py = tape.mul(p, yt)?;
    let inter = tape.sum(py);
    let sp = tape.sum(p);
    let sy = tape.sum(yt);
    let num = tape.scalar_mul(inter, 2.0);
    let num = tape.scalar_add(num, DICE_EPS);
    let den = tape.add(sp, sy)?;
    let den = tape.scalar_add(den, DICE_EPS);
    let ratio = tape.div(num, den)?;
    let neg = tape.scalar_mul(ratio, -1.0);
    Ok(tape.scalar_add(neg, 1.0))
}

/// Single-time-point supervision: both all-lesion heads against the same
/// all-lesion label.
pub fn loss_all(tape: &mut Tape, triple: TripleIds, y_al: &[u8]) -> Result<TensorId> {
    let d1 = dice_loss(tape, triple.p_al_1, y_al)?;
    let d2 = dice_loss(tape, triple.p_al_2, y_al)?;
    tape.add(d1, d2)
}

/// Two-time-point supervision: the new-lesion head against the new-lesion label.
pub fn loss_new(tape: &mut Tape, triple: TripleIds, y_nl: &[u8]) -> Result<TensorId> {
    dice_loss(tape, triple.p_nl, y_nl)
}

/// Longitudinal relation regularizer. For single-time-point patches this is
/// the mean squared disagreement of the two all-lesion heads; for
/// two-time-point patches it pins head 1 to 0 and head 2 to 1 on the
/// new-lesion support (vanishing when the new-lesion mask is empty).
pub fn relation_regularizer(
    tape: &mut Tape,
    triple: TripleIds,
    kind: SampleKind,
    y_nl: Option<&[u8]>,
) -> Result<TensorId> {
    match kind {
        SampleKind::SingleTimePoint => {
            let diff = tape.sub(triple.p_al_1, triple.p_al_2)?;
            let sq = tape.square(diff);
            Ok(tape.mean(sq))
        }
        SampleKind::TwoTimePoint => {
            let y = y_nl.ok_or_else(|| {
                Error::Invalid("relation_regularizer: two-time-point patch needs y_nl".into())
            })?;
            let shape = tape.shape(triple.p_al_1).to_vec();
            if shape.iter().product::<usize>() != y.len() {
                return Err(Error::Shape("relation_regularizer: label size mismatch".into()));
            }
            let count = y.iter().filter(|&&v| v == 1).count();
            if count == 0 {
                return Ok(tape.scalar(0.0));
            }
            let mask = label_leaf(tape, &shape, y)?;
            let sq1 = tape.square(triple.p_al_1);
            let m1 = tape.mul(sq1, mask)?;
            let s1 = tape.sum(m1);
            let t2 = tape.scalar_mul(s1, 1.0 / count as f64);

            let dev = tape.scalar_add(triple.p_al_2, -1.0);
            let sq2 = tape.square(dev);
            let m2 = tape.mul(sq2, mask)?;
            let s2 = tape.sum(m2);
            let t3 = tape.scalar_mul(s2, 1.0 / count as f64);
            tape.add(t2, t3)
        }
    }
}

/// One patch's head outputs plus its supervision target: the all-lesion
/// label for single-time-point patches, the new-lesion label otherwise.
pub struct PatchOutput {
    pub ids: TripleIds,
    pub kind: SampleKind,
    pub label: Vec<u8>,
}

/// The combined loss node plus the scalar values of its parts, for logging.
pub struct TotalLoss {
    pub total: TensorId,
    pub l_al: f64,
    pub l_nl: f64,
    pub l_rr: f64,
    pub lambda2: f64,
}

/// Staged total loss: `L_al + lambda1 * L_nl + lambda2(iteration) * L_rr`,
/// each term averaged within its patch group. A group with zero patches
/// contributes zero.
pub fn total_loss(
    tape: &mut Tape,
    outputs: &[PatchOutput],
    weights: &LossWeights,
    iteration: usize,
) -> Result<TotalLoss> {
    let mut al_terms = Vec::new();
    let mut nl_terms = Vec::new();
    let mut rr_terms = Vec::new();
    for out in outputs {
        match out.kind {
            SampleKind::SingleTimePoint => {
                al_terms.push(loss_all(tape, out.ids, &out.label)?);
                rr_terms.push(relation_regularizer(tape, out.ids, out.kind, None)?);
            }
            SampleKind::TwoTimePoint => {
                nl_terms.push(loss_new(tape, out.ids, &out.label)?);
                rr_terms.push(relation_regularizer(tape, out.ids, out.kind, Some(&out.label))?);
            }
        }
    }
    let group_mean = |tape: &mut Tape, terms: &[TensorId]| -> Result<TensorId> {
        if terms.is_empty() {
            return Ok(tape.scalar(0.0));
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        Ok(tape.scalar_mul(acc, 1.0 / terms.len() as f64))
    };
    let l_al = group_mean(tape, &al_terms)?;
    let l_nl = group_mean(tape, &nl_terms)?;
    let l_rr = group_mean(tape, &rr_terms)?;
    let lambda2 = weights.lambda2_at(iteration);
    let wnl = tape.scalar_mul(l_nl, weights.lambda1);
    let wrr = tape.scalar_mul(l_rr, lambda2);
    let t = tape.add(l_al, wnl)?;
    let total = tape.add(t, wrr)?;
    Ok(TotalLoss {
        total,
        l_al: tape.values(l_al)[0],
        l_nl: tape.values(l_nl)[0],
        l_rr: tape.values(l_rr)[0],
        lambda2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dice_value(p: &[f64], y: &[u8]) -> f64 {
        let mut tape = Tape::new();
        let pid = tape.leaf(vec![p.len()], p.to_vec()).unwrap();
        let l = dice_loss(&mut tape, pid, y).unwrap();
        tape.values(l)[0]
    }

    fn triple_on(tape: &mut Tape, p1: &[f64], p2: &[f64], p3: &[f64]) -> TripleIds {
        let a = tape.leaf(vec![p1.len()], p1.to_vec()).unwrap();
        let b = tape.leaf(vec![p2.len()], p2.to_vec()).unwrap();
        let c = tape.leaf(vec![p3.len()], p3.to_vec()).unwrap();
        TripleIds { p_al_1: a, p_al_2: b, p_nl: c }
    }

    #[test]
    fn dice_identity_and_empty() {
        assert_eq!(dice_value(&[1.0, 0.0, 1.0], &[1, 0, 1]), 0.0);
        assert_eq!(dice_value(&[0.0, 0.0], &[0, 0]), 0.0);
    }

    #[test]
    fn dice_disjoint_hand_value() {
        let v = dice_value(&[1.0, 0.0], &[0, 1]);
        let expect = 1.0 - DICE_EPS / (2.0 + DICE_EPS);
        assert!((v - expect).abs() < 1e-12);
        assert!(v > 0.999994 && v < 1.0);
    }

    #[test]
    fn dice_range_and_monotonicity() {
        // fixed prediction mass 2 on a 4-voxel patch, y has two foreground
        // voxels; moving mass onto y must never increase the loss
        let y = [1, 1, 0, 0];
        let configs = [
            [0.0, 0.0, 1.0, 1.0], // overlap 0
            [1.0, 0.0, 1.0, 0.0], // overlap 1
            [1.0, 1.0, 0.0, 0.0], // overlap 2
        ];
        let mut last = f64::INFINITY;
        for p in configs {
            let v = dice_value(&p, &y);
            assert!((0.0..=1.0 + DICE_EPS).contains(&v));
            assert!(v <= last, "loss increased with overlap");
            last = v;
        }
    }

    #[test]
    fn dice_shape_mismatch() {
        let mut tape = Tape::new();
        let p = tape.leaf(vec![3], vec![0.5; 3]).unwrap();
        assert!(dice_loss(&mut tape, p, &[1, 0]).is_err());
    }

    #[test]
    fn loss_all_cases() {
        let y = [1u8, 0, 1, 0];
        let mut tape = Tape::new();
        let perfect = [1.0, 0.0, 1.0, 0.0];
        let t = triple_on(&mut tape, &perfect, &perfect, &perfect);
        let l = loss_all(&mut tape, t, &y).unwrap();
        assert!(tape.values(l)[0].abs() < 1e-12);

        // one head perfect, the other empty against a nonempty label
        let mut tape = Tape::new();
        let t = triple_on(&mut tape, &perfect, &[0.0; 4], &perfect);
        let l = loss_all(&mut tape, t, &y).unwrap();
        assert!((tape.values(l)[0] - 1.0).abs() < 1e-4);

        // symmetric in head order for equal predictions
        let mut tape = Tape::new();
        let p = [0.3, 0.6, 0.2, 0.9];
        let t12 = triple_on(&mut tape, &p, &p, &p);
        let a = loss_all(&mut tape, t12, &y).unwrap();
        let t21 = TripleIds { p_al_1: t12.p_al_2, p_al_2: t12.p_al_1, p_nl: t12.p_nl };
        let b = loss_all(&mut tape, t21, &y).unwrap();
        assert_eq!(tape.values(a)[0], tape.values(b)[0]);
    }

    #[test]
    fn loss_new_matches_dice() {
        let y = [0u8, 1, 1, 0];
        let p = [0.2, 0.7, 0.9, 0.1];
        let mut tape = Tape::new();
        let t = triple_on(&mut tape, &[0.5; 4], &[0.5; 4], &p);
        let l = loss_new(&mut tape, t, &y).unwrap();
        assert_eq!(tape.values(l)[0], dice_value(&p, &y));

        let mut tape = Tape::new();
        let t = triple_on(&mut tape, &[0.5; 4], &[0.5; 4], &[0.0; 4]);
        let l = loss_new(&mut tape, t, &[0; 4]).unwrap();
        assert_eq!(tape.values(l)[0], 0.0);
    }

    #[test]
    fn relation_regularizer_zero_set() {
        // single kind, identical heads
        let mut tape = Tape::new();
        let p = [0.4, 0.8, 0.1];
        let t = triple_on(&mut tape, &p, &p, &p);
        let r = relation_regularizer(&mut tape, t, SampleKind::SingleTimePoint, None).unwrap();
        assert_eq!(tape.values(r)[0], 0.0);

        // two kind, head1 = 0 and head2 = 1 on the mask
        let mut tape = Tape::new();
        let t = triple_on(&mut tape, &[0.0, 0.0, 0.7], &[1.0, 1.0, 0.2], &p);
        let r = relation_regularizer(&mut tape, t, SampleKind::TwoTimePoint, Some(&[1, 1, 0])).unwrap();
        assert_eq!(tape.values(r)[0], 0.0);

        // empty new-lesion mask vanishes
        let mut tape = Tape::new();
        let t = triple_on(&mut tape, &[0.9; 3], &[0.1; 3], &p);
        let r = relation_regularizer(&mut tape, t, SampleKind::TwoTimePoint, Some(&[0, 0, 0])).unwrap();
        assert_eq!(tape.values(r)[0], 0.0);
    }

    #[test]
    fn relation_regularizer_hand_value() {
        // both heads 0.5 on a 2-voxel mask: 0.25 + 0.25
        let mut tape = Tape::new();
        let t = triple_on(&mut tape, &[0.5, 0.5, 0.9], &[0.5, 0.5, 0.9], &[0.5; 3]);
        let r = relation_regularizer(&mut tape, t, SampleKind::TwoTimePoint, Some(&[1, 1, 0])).unwrap();
        assert!((tape.values(r)[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn relation_regularizer_missing_label_errors() {
        let mut tape = Tape::new();
        let t = triple_on(&mut tape, &[0.5], &[0.5], &[0.5]);
        assert!(relation_regularizer(&mut tape, t, SampleKind::TwoTimePoint, None).is_err());
    }

    #[test]
    fn relation_regularizer_nonnegative_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p1: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
            let p2: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
            let y: Vec<u8> = (0..8).map(|_| u8::from(rng.gen_bool(0.4))).collect();
            let mut tape = Tape::new();
            let t = triple_on(&mut tape, &p1, &p2, &p1);
            for (kind, label) in [
                (SampleKind::SingleTimePoint, None),
                (SampleKind::TwoTimePoint, Some(y.as_slice())),
            ] {
                let r = relation_regularizer(&mut tape, t, kind, label).unwrap();
                assert!(tape.values(r)[0] >= 0.0);
            }
        }
    }

    #[test]
    fn loss_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y: Vec<u8> = (0..12).map(|_| u8::from(rng.gen_bool(0.3))).collect();
        let logits = Tensor::new(vec![12], (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();

        let yc = y.clone();
        let err = grad_check(
            move |tape, id| {
                let p = tape.sigmoid(id);
                dice_loss(tape, p, &yc)
            },
            &logits,
            1e-4,
            &[],
        )
        .unwrap();
        assert!(err < 1e-4, "dice grad err {err}");

        let yc = y.clone();
        let err = grad_check(
            move |tape, id| {
                let p = tape.sigmoid(id);
                let shifted = tape.scalar_add(id, 0.3);
                let p2 = tape.sigmoid(shifted);
                let t = TripleIds { p_al_1: p, p_al_2: p2, p_nl: p };
                relation_regularizer(tape, t, SampleKind::TwoTimePoint, Some(&yc))
            },
            &logits,
            1e-4,
            &[],
        )
        .unwrap();
        assert!(err < 1e-4, "regularizer grad err {err}");
    }

    #[test]
    fn total_loss_schedule_and_order_invariance() {
        let weights = LossWeights { lambda1: 1.0, lambda2: 1.0, switch_iteration: 10_000 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mk = |tape: &mut Tape, rng: &mut ChaCha8Rng, kind: SampleKind| -> PatchOutput {
            let p1: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
            let p2: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
            let p3: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
            let label: Vec<u8> = (0..8).map(|_| u8::from(rng.gen_bool(0.4))).collect();
            let a = tape.leaf(vec![8], p1).unwrap();
            let b = tape.leaf(vec![8], p2).unwrap();
            let c = tape.leaf(vec![8], p3).unwrap();
            PatchOutput { ids: TripleIds { p_al_1: a, p_al_2: b, p_nl: c }, kind, label }
        };

        let mut tape = Tape::new();
        let outs = vec![
            mk(&mut tape, &mut rng, SampleKind::TwoTimePoint),
            mk(&mut tape, &mut rng, SampleKind::SingleTimePoint),
            mk(&mut tape, &mut rng, SampleKind::TwoTimePoint),
            mk(&mut tape, &mut rng, SampleKind::SingleTimePoint),
        ];

        let early = total_loss(&mut tape, &outs, &weights, 5_000).unwrap();
        assert_eq!(early.lambda2, 0.0);
        let late = total_loss(&mut tape, &outs, &weights, 15_000).unwrap();
        assert_eq!(late.lambda2, 1.0);
        let at_switch = total_loss(&mut tape, &outs, &weights, 10_000).unwrap();
        assert_eq!(at_switch.lambda2, 1.0);
        assert!(tape.values(late.total)[0] >= tape.values(early.total)[0]);

        // patch order within the batch does not change the loss
        let mut reordered: Vec<&PatchOutput> = outs.iter().collect();
        reordered.swap(0, 2);
        reordered.swap(1, 3);
        let shuffled: Vec<PatchOutput> = reordered
            .into_iter()
            .map(|o| PatchOutput { ids: o.ids, kind: o.kind, label: o.label.clone() })
            .collect();
        let again = total_loss(&mut tape, &shuffled, &weights, 15_000).unwrap();
        assert!((tape.values(again.total)[0] - tape.values(late.total)[0]).abs() < 1e-12);
    }

    #[test]
    fn total_loss_perfect_predictions_near_zero() {
        let weights = LossWeights::default();
        let mut tape = Tape::new();
        let y = [1u8, 0, 0, 1];
        let hard: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
        let single = PatchOutput {
            ids: triple_on(&mut tape, &hard, &hard, &hard),
            kind: SampleKind::SingleTimePoint,
            label: y.to_vec(),
        };
        let two = PatchOutput {
            ids: triple_on(&mut tape, &[0.0; 4], &hard, &hard),
            kind: SampleKind::TwoTimePoint,
            label: y.to_vec(),
        };
        let out = total_loss(&mut tape, &[single, two], &weights, 999_999).unwrap();
        assert!(tape.values(out.total)[0].abs() < 1e-9);
    }

    #[test]
    fn total_loss_empty_group_contributes_zero() {
        let weights = LossWeights::default();
        let mut tape = Tape::new();
        let y = [1u8, 0];
        let p = [0.7, 0.2];
        let single = PatchOutput {
            ids: triple_on(&mut tape, &p, &p, &p),
            kind: SampleKind::SingleTimePoint,
            label: y.to_vec(),
        };
        let out = total_loss(&mut tape, &[single], &weights, 0).unwrap();
        assert_eq!(out.l_nl, 0.0);
        assert!(out.l_al > 0.0);
    }
}
