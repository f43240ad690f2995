//! Identity losses: label-smoothed cross-entropy and batch-hard triplet.

use crate::error::{Error, Result};
use crate::tensor::{CeVariant, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Label-smoothing rate.
    pub epsilon: f64,
    pub margin: f64,
    pub lambda_triplet: f64,
    pub label_smooth_enabled: bool,
    pub ce_variant: CeVariant,
    /// Compare squared Euclidean distances inside the triplet hinge.
    pub squared_distances: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 0.1,
            margin: 0.3,
            lambda_triplet: 1.0,
            label_smooth_enabled: true,
            ce_variant: CeVariant::SmoothedTargets,
            squared_distances: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::config("loss.epsilon", "must lie in [0, 1)"));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::config("loss.margin", "must be >= 0"));
        }
        if !(self.lambda_triplet >= 0.0) {
            return Err(Error::config("loss.lambda_triplet", "must be >= 0"));
        }
        Ok(())
    }

    pub fn effective_epsilon(&self) -> f64 {
        if self.label_smooth_enabled {
            self.epsilon
        } else {
            0.0
        }
    }
}

/// Batch-mean cross-entropy of `logits [B, C]` against smoothed targets
/// `q_i = (1 - eps) [i == t] + eps / C`.
pub fn lsr_cross_entropy(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    epsilon: f64,
    variant: CeVariant,
) -> Result<Var> {
    tape.cross_entropy(logits, targets, epsilon, variant)
}

/// Mean over anchors of `max(d_pos - d_neg + margin, 0)` with the hardest
/// positive and negative mined per anchor.
pub fn batch_hard_triplet(
    tape: &mut Tape,
    embeddings: Var,
    labels: &[usize],
    margin: f64,
    squared: bool,
) -> Result<Var> {
    tape.batch_hard_triplet(embeddings, labels, margin, squared)
}

/// Scalar loss components recorded for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub total: Var,
    pub base_ce: f64,
    pub align_ce: f64,
    pub triplet: f64,
}

/// `ce(base) + ce(align) + lambda * triplet(fused)`.
pub fn total_loss(
    tape: &mut Tape,
    base_logits: Var,
    align_logits: Var,
    fused_embed: Var,
    targets: &[usize],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let eps = cfg.effective_epsilon();
    let base = lsr_cross_entropy(tape, base_logits, targets, eps, cfg.ce_variant)?;
    let align = lsr_cross_entropy(tape, align_logits, targets, eps, cfg.ce_variant)?;
    let mut total = tape.add(base, align)?;
    let mut triplet_value = 0.0;
    if cfg.lambda_triplet > 0.0 {
        let trip = batch_hard_triplet(
            tape,
            fused_embed,
            targets,
            cfg.margin,
            cfg.squared_distances,
        )?;
        triplet_value = tape.value(trip).item();
        let weighted = tape.scale(trip, cfg.lambda_triplet);
        total = tape.add(total, weighted)?;
    }
    Ok(LossTerms {
        total,
        base_ce: tape.value(base).item(),
        align_ce: tape.value(align).item(),
        triplet: triplet_value,
    })
}

/// Untaped convenience: cross-entropy value of a logits matrix.
pub fn cross_entropy_value(logits: &Tensor, targets: &[usize], epsilon: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let v = lsr_cross_entropy(&mut tape, l, targets, epsilon, CeVariant::SmoothedTargets)?;
    Ok(tape.value(v).item())
}

/// Untaped convenience: triplet loss value of an embedding matrix.
pub fn triplet_value(emb: &Tensor, labels: &[usize], margin: f64, squared: bool) -> Result<f64> {
    let mut tape = Tape::new();
    let e = tape.constant(emb.clone());
    let v = batch_hard_triplet(&mut tape, e, labels, margin, squared)?;
    Ok(tape.value(v).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Plain cross-entropy computed directly, independent of the tape path.
    fn plain_ce(logits: &[f64], c: usize, targets: &[usize]) -> f64 {
        let mut total = 0.0;
        for (row, &t) in logits.chunks(c).zip(targets) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        total / targets.len() as f64
    }

    #[test]
    fn confident_prediction_has_near_zero_loss() {
        let l = Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap();
        assert!(cross_entropy_value(&l, &[0], 0.0).unwrap() <= 1e-6);
    }

    #[test]
    fn zero_smoothing_is_plain_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..15).map(|_| rng.random_range(-5.0..5.0)).collect();
            let targets: Vec<usize> = (0..3).map(|_| rng.random_range(0..5)).collect();
            let t = Tensor::new(&[3, 5], logits.clone()).unwrap();
            let ours = cross_entropy_value(&t, &targets, 0.0).unwrap();
            assert!((ours - plain_ce(&logits, 5, &targets)).abs() <= 1e-12);
        }
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let l = Tensor::full(&[2, 4], 0.3);
        for eps in [0.0, 0.1, 0.5, 0.9] {
            let v = cross_entropy_value(&l, &[1, 3], eps).unwrap();
            assert!((v - 4f64.ln()).abs() < 1e-12, "eps {eps}: {v}");
        }
    }

    #[test]
    fn log_shift_variant_differs_but_agrees_at_zero() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::new(&[1, 3], vec![2.0, 0.5, -1.0]).unwrap());
        let a = tape.cross_entropy(l, &[0], 0.0, CeVariant::LogShift).unwrap();
        let b = tape.cross_entropy(l, &[0], 0.0, CeVariant::SmoothedTargets).unwrap();
        assert!((tape.value(a).item() - tape.value(b).item()).abs() < 1e-14);
        let c = tape.cross_entropy(l, &[0], 0.3, CeVariant::LogShift).unwrap();
        let d = tape.cross_entropy(l, &[0], 0.3, CeVariant::SmoothedTargets).unwrap();
        assert!(tape.value(c).item() < tape.value(a).item());
        assert!((tape.value(c).item() - tape.value(d).item()).abs() > 1e-3);
    }

    #[test]
    fn cross_entropy_rejects_bad_targets() {
        let l = Tensor::full(&[1, 3], 0.0);
        assert!(cross_entropy_value(&l, &[3], 0.1).is_err());
        assert!(cross_entropy_value(&l, &[0, 1], 0.1).is_err());
    }

    #[test]
    fn separated_classes_have_zero_triplet_loss() {
        let e = Tensor::new(&[4, 1], vec![0.0, 0.0, 10.0, 10.0]).unwrap();
        assert_eq!(triplet_value(&e, &[0, 0, 1, 1], 0.3, true).unwrap(), 0.0);
    }

    #[test]
    fn identical_embeddings_give_margin() {
        let e = Tensor::full(&[6, 3], 0.25);
        let v = triplet_value(&e, &[0, 0, 1, 1, 2, 2], 0.7, true).unwrap();
        assert_eq!(v, 0.7);
        let v = triplet_value(&e, &[0, 0, 1, 1, 2, 2], 0.7, false).unwrap();
        assert_eq!(v, 0.7);
    }

    #[test]
    fn single_identity_batch_is_a_mining_error() {
        let e = Tensor::full(&[3, 2], 1.0);
        assert!(matches!(
            triplet_value(&e, &[4, 4, 4], 0.3, true),
            Err(Error::Mining(_))
        ));
    }

    #[test]
    fn triplet_non_negative_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let e = Tensor::from_fn(&[8, 4], |_| rng.random_range(-2.0..2.0));
            let labels = [0, 0, 1, 1, 2, 2, 3, 3];
            assert!(triplet_value(&e, &labels, 0.3, true).unwrap() >= 0.0);
        }
    }

    #[test]
    fn triplet_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for squared in [true, false] {
            let e = Tensor::from_fn(&[6, 3], |_| rng.random_range(-1.0..1.0));
            let err = grad_check(
                |t, v| t.batch_hard_triplet(v, &[0, 0, 1, 1, 2, 2], 1.5, squared),
                &e,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "squared={squared}: {err}");
        }
    }

    #[test]
    fn cross_entropy_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for variant in [CeVariant::SmoothedTargets, CeVariant::LogShift] {
            let l = Tensor::from_fn(&[3, 4], |_| rng.random_range(-3.0..3.0));
            let err = grad_check(
                |t, v| t.cross_entropy(v, &[0, 3, 1], 0.1, variant),
                &l,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "{variant:?}: {err}");
        }
    }

    #[test]
    fn total_without_triplet_is_sum_of_cross_entropies() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[4, 3], |_| rng.random_range(-1.0..1.0)));
        let b = tape.constant(Tensor::from_fn(&[4, 3], |_| rng.random_range(-1.0..1.0)));
        let f = tape.constant(Tensor::from_fn(&[4, 5], |_| rng.random_range(-1.0..1.0)));
        let cfg = LossConfig {
            lambda_triplet: 0.0,
            ..LossConfig::default()
        };
        let targets = [0, 0, 2, 2];
        let terms = total_loss(&mut tape, a, b, f, &targets, &cfg).unwrap();
        let total = tape.value(terms.total).item();
        assert!((total - terms.base_ce - terms.align_ce).abs() < 1e-14);
        assert!(total >= 0.0);

        let full = total_loss(&mut tape, a, b, f, &targets, &LossConfig::default()).unwrap();
        let v = tape.value(full.total).item();
        assert!((v - full.base_ce - full.align_ce - full.triplet).abs() < 1e-12);
    }

    #[test]
    fn disabled_smoothing_zeroes_epsilon() {
        let cfg = LossConfig {
            label_smooth_enabled: false,
            ..LossConfig::default()
        };
        assert_eq!(cfg.effective_epsilon(), 0.0);
        assert!(LossConfig {
            epsilon: 1.0,
            ..cfg
        }
        .validate()
        .is_err());
    }

    proptest::proptest! {
        #[test]
        fn smoothed_loss_is_non_negative(
            logits in proptest::collection::vec(-50.0f64..50.0, 6),
            t in 0usize..3,
            eps in 0.0f64..0.99,
        ) {
            let l = Tensor::new(&[2, 3], logits).unwrap();
            proptest::prop_assert!(cross_entropy_value(&l, &[t, (t + 1) % 3], eps).unwrap() >= 0.0);
        }

        #[test]
        fn positive_logit_scaling_keeps_argmax(
            logits in proptest::collection::vec(-5.0f64..5.0, 4),
            s in 0.1f64..10.0,
        ) {
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
            let scaled: Vec<f64> = logits.iter().map(|v| v * s).collect();
            proptest::prop_assert_eq!(argmax(&logits), argmax(&scaled));
        }
    }
}
