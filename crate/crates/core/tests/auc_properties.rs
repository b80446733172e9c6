use hsi_detect_core::data::Label;
use hsi_detect_core::eval::{auc, roc_curve};
use proptest::prelude::*;

fn pairwise(scores: &[f64], labels: &[Label]) -> f64 {
    let (mut wins, mut total) = (0.0, 0.0);
    for (i, li) in labels.iter().enumerate() {
        for (j, lj) in labels.iter().enumerate() {
            if li.is_fake() && !lj.is_fake() {
                total += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / total
}

/// Scores on a coarse grid so ties are common, with both classes present.
fn instance(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<Label>)> {
    (2..=max).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..12).prop_map(|v| v as f64 / 11.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(s, mut fake)| {
                fake[0] = true;
                fake[1] = false;
                let labels = fake.into_iter().map(|f| if f { Label::Fake } else { Label::Real }).collect();
                (s, labels)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sorted_auc_matches_pairwise_oracle((s, l) in instance(100)) {
        prop_assert!((auc(&s, &l).unwrap() - pairwise(&s, &l)).abs() <= 1e-12);
    }

    #[test]
    fn strictly_increasing_transform_keeps_auc((s, l) in instance(60)) {
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        prop_assert_eq!(auc(&s, &l).unwrap(), auc(&t, &l).unwrap());
    }

    #[test]
    fn negated_scores_give_complement((s, l) in instance(60)) {
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auc(&neg, &l).unwrap() - (1.0 - auc(&s, &l).unwrap())).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn roc_is_monotone_with_exact_endpoints((s, l) in instance(50)) {
        let roc = roc_curve(&s, &l).unwrap();
        prop_assert_eq!(roc.points.first(), Some(&(0.0, 0.0)));
        prop_assert_eq!(roc.points.last(), Some(&(1.0, 1.0)));
        prop_assert_eq!(roc.points.len(), roc.thresholds.len());
        for w in roc.points.windows(2) {
            prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
        for w in roc.thresholds.windows(2) {
            prop_assert!(w[1] < w[0]);
        }
    }
}
