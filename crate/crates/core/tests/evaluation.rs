mod common;

use adnet::encoder::EncoderConfig;
use adnet::evaluation::*;
use adnet::head::{HeadConfig, Model};
use adnet::synth::{generate_synthetic_volume, SyntheticSpec};
use adnet::volume::standardize;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn dice_matches_set_operations() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..300 {
        let n = rng.random_range(1..64);
        let a: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
        let b: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.6))).collect();
        let d = dice(&a, &b).unwrap();
        assert!((d - common::set_dice(&a, &b)).abs() < 1e-9);
        assert_eq!(d, dice(&b, &a).unwrap());
    }
    assert_eq!(dice(&[0, 0], &[0, 0]).unwrap(), 100.0);
    assert_eq!(dice(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap(), 50.0);
    assert!(dice(&[1], &[1, 0]).is_err());
}

#[test]
fn frozen_reference_split() {
    let p = make_cv_splits(&(0..20).collect::<Vec<_>>(), 5, 3, 0).unwrap();
    assert_eq!(
        p.folds,
        vec![
            vec![14, 8, 6, 1],
            vec![9, 5, 13, 12],
            vec![17, 15, 19, 4],
            vec![11, 18, 2, 10],
            vec![0, 16, 7, 3]
        ]
    );
    assert_eq!(p.support, vec![14, 9, 17, 11, 0]);
    assert_eq!(p.queries(0), vec![8, 6, 1]);
    assert_eq!(p.training(0).len(), 16);
    assert!(!p.training(0).contains(&14));
}

#[test]
fn frozen_chunks() {
    assert_eq!(sub_chunks(2, 12), [(2, 4), (6, 4), (10, 3)]);
}

#[test]
fn ep2_inference_never_reads_query_labels() {
    let spec = SyntheticSpec {
        volumes: 3,
        dims: [16, 32, 32],
        ..SyntheticSpec::default()
    };
    let (si, sl) = generate_synthetic_volume(&spec, 0).unwrap();
    let (qi, ql) = generate_synthetic_volume(&spec, 1).unwrap();
    let (_, decoy) = generate_synthetic_volume(&spec, 2).unwrap();
    let (si, qi) = (standardize(&si), standardize(&qi));
    let model = Model::init(&EncoderConfig::tiny(), &HeadConfig::default(), 0).unwrap();

    let tracked = TrackedLabels::new(&ql);
    let a = score_query(&Ep2, &model, (&si, &sl), (&qi, &tracked), &[1, 2]).unwrap();
    assert!(tracked.reads().iter().all(|(p, _)| *p == Phase::Scoring));
    assert_eq!(tracked.reads().len(), 2);

    let other = TrackedLabels::new(&decoy);
    let b = score_query(&Ep2, &model, (&si, &sl), (&qi, &other), &[1, 2]).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.1, y.1);
    }

    let control = TrackedLabels::new(&ql);
    score_query(&Ep1, &model, (&si, &sl), (&qi, &control), &[1, 2]).unwrap();
    assert!(control.reads().iter().any(|(p, _)| *p == Phase::Inference));
}

#[test]
fn aggregation_and_line_search() {
    let truth = vec![1, 1, 0, 0];
    let case = ScoredCase {
        fold: 0,
        run: 0,
        class: 1,
        query_id: 3,
        learned_t: -12.0,
        scores: ScoreVolume {
            scores: vec![-18.0, -14.0, -11.0, f32::INFINITY],
            support_slices: vec![0],
        },
        truth,
    };
    // T=-12 keeps both fg pixels; T=-15 keeps one
    let grid = threshold_grid(-20.0, -5.0, 0.5).unwrap();
    assert_eq!(grid.len(), 31);
    let curve = threshold_line_search(std::slice::from_ref(&case), &grid).unwrap();
    let at = |t: f64| curve.iter().find(|p| p.threshold == t).unwrap().mean;
    assert_eq!(at(-20.0), 0.0);
    assert!((at(-15.0) - 200.0 / 3.0).abs() < 1e-9);
    assert_eq!(at(-12.0), 100.0);
    assert_eq!(at(-5.0), 80.0);
    assert_eq!(learned_threshold_dice(&[case]).unwrap().mean, 100.0);

    let records: Vec<DiceRecord> = [(1, 80.0), (1, 60.0), (2, 50.0)]
        .iter()
        .map(|&(class, dice)| DiceRecord {
            protocol: "ep2".into(),
            fold: 0,
            run: 0,
            class,
            query_id: 0,
            dice,
        })
        .collect();
    let s = aggregate(&records);
    assert_eq!(s.per_class[&1].mean, 70.0);
    assert_eq!(s.per_class[&1].std, 10.0);
    assert!((s.overall.mean - 190.0 / 3.0).abs() < 1e-12);
    assert!(results_csv(&records).starts_with("protocol,fold,run,class,query_id,dice\n"));
}
