use nalgebra::DMatrix;
use proptest::prelude::*;
use vcbot_core::deliberation::{mix_control, MixerConfig};
use vcbot_core::observer::{congruence_flags, congruence_probability, segment_events, Pca};
use vcbot_core::{kl_gaussian, SoftmaxEncoder, SoftmaxFrame};

fn sums_to_one(frame: &SoftmaxFrame) -> bool {
    (0..frame.dof()).all(|i| {
        let g = frame.get(i);
        g.iter().all(|p| *p >= 0.0 && p.is_finite()) && (g.iter().sum::<f64>() - 1.0).abs() <= 1e-12
    })
}

proptest! {
    #[test]
    fn kl_is_non_negative(
        mq in -10.0f64..10.0, sq in 1e-3f64..10.0,
        mp in -10.0f64..10.0, sp in 1e-3f64..10.0,
    ) {
        let kl = kl_gaussian(&[mq], &[sq], &[mp], &[sp]).unwrap()[0];
        prop_assert!(kl >= 0.0, "kl = {kl}");
    }

    #[test]
    fn kl_vanishes_on_identical_distributions(m in -10.0f64..10.0, s in 1e-3f64..10.0) {
        let kl = kl_gaussian(&[m], &[s], &[m], &[s]).unwrap()[0];
        prop_assert!(kl.abs() <= 1e-12);
    }

    #[test]
    fn kl_rejects_non_positive_sigma(s in -5.0f64..=0.0) {
        prop_assert!(kl_gaussian(&[0.0], &[s], &[0.0], &[1.0]).is_err());
        prop_assert!(kl_gaussian(&[0.0], &[1.0], &[0.0], &[s]).is_err());
    }

    #[test]
    fn softmax_of_any_logits_is_normalized(
        logits in prop::collection::vec(-700.0f64..700.0, 1..8).prop_flat_map(|g| {
            let bins = g.len() + 1;
            (Just(bins), prop::collection::vec(-700.0f64..700.0, bins * 3))
        })
    ) {
        let (bins, values) = logits;
        prop_assert!(sums_to_one(&SoftmaxFrame::from_logits(bins, &values)));
    }

    #[test]
    fn encoding_is_normalized_and_invertible(x in -1.0f64..=1.0, y in -1.0f64..=1.0) {
        let enc = SoftmaxEncoder::new(10, 0.1, 2).unwrap();
        let frame = enc.encode(&[x, y]).unwrap();
        prop_assert!(sums_to_one(&frame));
        let back = enc.decode(&frame);
        prop_assert!((back[0] - x).abs() < 0.01 && (back[1] - y).abs() < 0.01);
    }

    #[test]
    fn mixed_position_respects_workspace_and_rate_cap(
        human in prop::option::of((-1.5f64..1.5, -1.5f64..1.5)),
        robot in (-1.0f64..1.0, -1.0f64..1.0),
        prev in (-1.0f64..1.0, -1.0f64..1.0),
        gamma in 0.0f64..=1.0,
        cap in 1e-3f64..0.5,
    ) {
        let mixer = MixerConfig { gamma, rate_cap: cap };
        let prev = [prev.0, prev.1];
        let out = mix_control(human.map(|h| [h.0, h.1]), [robot.0, robot.1], Some(prev), &mixer);
        for i in 0..2 {
            prop_assert!((-1.0..=1.0).contains(&out[i]));
            prop_assert!((out[i] - prev[i]).abs() <= cap + 1e-12);
        }
    }

    #[test]
    fn mixing_without_human_follows_robot(
        robot in (-1.0f64..1.0, -1.0f64..1.0),
        gamma in 0.0f64..=1.0,
    ) {
        let mixer = MixerConfig { gamma, rate_cap: 0.1 };
        prop_assert_eq!(mix_control(None, [robot.0, robot.1], None, &mixer), [robot.0, robot.1]);
    }

    #[test]
    fn congruence_probability_is_a_probability(
        c in prop::collection::vec(0u8..=1, 1..60),
        y in 1usize..20,
    ) {
        let p = congruence_probability(&c, y).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn congruence_ignores_order_within_the_window(
        c in prop::collection::vec(0u8..=1, 10..40),
        seed in any::<u64>(),
    ) {
        let y = 10;
        let split = c.len() - y;
        let mut shuffled = c.clone();
        let tail = &mut shuffled[split..];
        let k = (seed as usize) % y;
        tail.rotate_left(k);
        tail.reverse();
        prop_assert_eq!(congruence_probability(&c, y), congruence_probability(&shuffled, y));
    }

    #[test]
    fn congruence_flags_follow_label_agreement(
        pairs in prop::collection::vec((prop::option::of(0usize..7), prop::option::of(0usize..7)), 0..50),
    ) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        for (flag, (h, r)) in congruence_flags(&h, &r).iter().zip(&pairs) {
            match (h, r) {
                (Some(a), Some(b)) => prop_assert_eq!(*flag, Some(u8::from(a == b))),
                _ => prop_assert_eq!(*flag, None),
            }
        }
    }

    #[test]
    fn events_are_labelled_only_on_active_ticks(
        active in prop::collection::vec(any::<bool>(), 0..80),
        gap in 1usize..12,
    ) {
        let events = segment_events(&active, gap);
        prop_assert_eq!(events.len(), active.len());
        let mut last = 0;
        for (a, e) in active.iter().zip(&events) {
            prop_assert_eq!(*a, e.is_some());
            if let Some(e) = e {
                prop_assert!(*e == last || *e == last + 1);
                last = *e;
            }
        }
    }

    #[test]
    fn pca_error_does_not_grow_with_more_components(
        values in prop::collection::vec(-5.0f64..5.0, 40),
    ) {
        let samples = DMatrix::from_row_slice(10, 4, &values);
        let pca = Pca::fit(&samples, 4).unwrap();
        let errs: Vec<f64> = (0..=4).map(|k| pca.reconstruction_error(&samples, k)).collect();
        for w in errs.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "{errs:?}");
        }
        prop_assert!(errs[4] <= 1e-9);
        let total: f64 = pca.all_variances.iter().sum();
        prop_assert!((errs[0] - total * 9.0 / 10.0).abs() <= 1e-8 * (1.0 + total));
    }
}
