use proptest::prelude::*;
use viser_core::datamodel::{AttackType, Label};
use viser_core::evaluation::{apcer_at_bpcer, auroc, load_run, roc_points, save_run, RunResult, ScoreRecord, BPCER_TARGET};

fn scores() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    // Coarse grid so ties are common.
    let s = prop_oneof![(0..10i32).prop_map(|v| v as f64 / 10.0), -5.0..5.0f64];
    (prop::collection::vec(s.clone(), 1..40), prop::collection::vec(s, 1..40))
}

fn records(bf: &[f64], at: &[f64]) -> Vec<ScoreRecord> {
    let mut out = Vec::new();
    for (i, s) in bf.iter().enumerate() {
        out.push(ScoreRecord { sample_id: format!("b{i}"), label: Label::Bonafide, score: *s });
    }
    for (i, s) in at.iter().enumerate() {
        out.push(ScoreRecord { sample_id: format!("a{i}"), label: Label::Attack, score: *s });
    }
    out
}

proptest! {
    #[test]
    fn auroc_invariant_under_monotone_transform((bf, at) in scores()) {
        let f = |v: &Vec<f64>| v.iter().map(|s| (2.0 * s).exp() + 3.0).collect::<Vec<_>>();
        let a = auroc(&records(&bf, &at)).unwrap();
        let b = auroc(&records(&f(&bf), &f(&at))).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn flipping_labels_complements_auroc((bf, at) in scores()) {
        let a = auroc(&records(&bf, &at)).unwrap();
        let flipped = auroc(&records(&at, &bf)).unwrap();
        prop_assert!((a + flipped - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn apcer_respects_target((bf, at) in scores(), target in 0.0..0.6f64) {
        let r = apcer_at_bpcer(&records(&bf, &at), target).unwrap();
        prop_assert!(r.achieved_bpcer <= target);
        prop_assert!((0.0..=1.0).contains(&r.apcer));
        // Looser targets never raise APCER.
        let looser = apcer_at_bpcer(&records(&bf, &at), (target + 0.2).min(1.0)).unwrap();
        prop_assert!(looser.apcer <= r.apcer);
    }

    #[test]
    fn stored_results_recompute((bf, at) in scores(), seed in 0..12u64) {
        let dir = tempfile::tempdir().unwrap();
        let r = RunResult::from_scores("xent", AttackType::Diseased, seed, records(&bf, &at), 0, "fp").unwrap();
        r.verify().unwrap();
        save_run(dir.path(), &r).unwrap();
        let back = load_run(&viser_core::evaluation::run_dir(dir.path(), "xent", AttackType::Diseased, seed)).unwrap();
        back.verify().unwrap();
        prop_assert_eq!(back.auroc, r.auroc);
        prop_assert_eq!(back.apcer_at_bpcer1, r.apcer_at_bpcer1);
        prop_assert_eq!(back.scores.len(), bf.len() + at.len());
    }
}

#[test]
fn single_class_is_an_error() {
    assert!(auroc(&records(&[0.1, 0.2], &[])).is_err());
    assert!(apcer_at_bpcer(&records(&[], &[0.3]), BPCER_TARGET).is_err());
}

proptest! {
    #[test]
    fn roc_trapezoid_area_is_auroc(
        bf in prop::collection::vec(0u8..20, 1..30),
        at in prop::collection::vec(0u8..20, 1..30),
    ) {
        let scores: Vec<ScoreRecord> = bf
            .iter()
            .map(|&v| (v, Label::Bonafide))
            .chain(at.iter().map(|&v| (v, Label::Attack)))
            .enumerate()
            .map(|(i, (v, label))| ScoreRecord { sample_id: format!("s{i}"), label, score: f64::from(v) })
            .collect();
        let pts = roc_points(&scores).unwrap();
        prop_assert_eq!(pts.first().map(|p| (p.apcer, p.bpcer)), Some((0.0, 1.0)));
        prop_assert_eq!(pts.last().map(|p| (p.apcer, p.bpcer)), Some((1.0, 0.0)));
        // Area under (BPCER, 1 - APCER); ties become straight segments, i.e. count one half.
        let area: f64 = pts
            .windows(2)
            .map(|w| (w[0].bpcer - w[1].bpcer) * ((1.0 - w[0].apcer) + (1.0 - w[1].apcer)) / 2.0)
            .sum();
        prop_assert!((area - auroc(&scores).unwrap()).abs() < 1e-12);
    }
}
