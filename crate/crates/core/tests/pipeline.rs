use std::fs;

use adnet::encoder::EncoderConfig;
use adnet::episodes::{
    apply_transform, sample_episode, SamplerConfig, SupervoxelIndex, TransformParams, TransformSpec,
};
use adnet::experiment::*;
use adnet::synth::SyntheticSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        dataset: DatasetSource::Synthetic(SyntheticSpec {
            volumes: 6,
            dims: [16, 32, 32],
            ..SyntheticSpec::default()
        }),
        encoder: EncoderConfig::tiny(),
        iterations: 15,
        n_folds: 3,
        runs_per_fold: 1,
        ..ExperimentConfig::default()
    };
    c.preprocess.crop = None;
    c.sampler.min_pixels = 30;
    c
}

#[test]
fn sampled_episodes_meet_the_pixel_floor() {
    let c = small_config();
    let prepared = prepare(&c).unwrap();
    let sampler = SamplerConfig {
        min_pixels: 30,
        ..SamplerConfig::default()
    };
    let index = SupervoxelIndex::new(&prepared.supervoxels[0], sampler.min_pixels);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let e = sample_episode(
            0,
            &prepared.images[0],
            &prepared.supervoxels[0],
            &index,
            &sampler,
            &TransformSpec::default(),
            &mut rng,
        )
        .unwrap();
        e.validate().unwrap();
        assert_ne!(e.provenance.support_z, e.provenance.query_z);
        assert!(e.query_mask.iter().filter(|&&m| m == 1).count() >= 30);
        assert!(e.support_mask.iter().filter(|&&m| m == 1).count() >= 30);
    }
}

#[test]
fn integer_translation_moves_the_mask() {
    let (h, w) = (6, 6);
    let mut mask = vec![0u8; h * w];
    mask[2 * w + 2] = 1;
    let image: Vec<f32> = mask.iter().map(|&m| m as f32).collect();
    let (img, msk) = apply_transform(&image, &mask, h, w, &TransformParams::translation(1.0, 2.0)).unwrap();
    assert_eq!(msk.iter().position(|&m| m == 1), Some(3 * w + 4));
    assert_eq!(img[3 * w + 4], 1.0);
}

#[test]
fn runs_are_deterministic_and_checkpoints_reload() {
    let c = small_config();
    let prepared = prepare(&c).unwrap();
    let a = run_experiment(&c, &prepared).unwrap();
    let b = run_experiment(&c, &prepared).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.arms.len(), 3);
    assert!(a.arms.iter().all(|arm| arm.log.len() == 15));

    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &c).unwrap();
    write_training(dir.path(), &c, &a.arms).unwrap();
    write_results(dir.path(), &a).unwrap();
    let reloaded = evaluate_checkpoints(&c, &prepared, dir.path()).unwrap();
    assert_eq!(reloaded.records, a.records);

    let saved = ExperimentConfig::load(&dir.path().join("config.json")).unwrap();
    assert_eq!(saved, c);
    let log = fs::read_to_string(dir.path().join("logs/fold0_run0.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 15);
    assert!(log.lines().next().unwrap().contains("\"L_S\""));
    let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + a.records.len());
}

#[test]
fn unknown_config_keys_are_named() {
    let err = ExperimentConfig::from_json(r#"{"iterations": 3, "learning_rate": 1}"#).unwrap_err();
    assert_eq!(err.category(), "config");
    assert!(err.to_string().contains("learning_rate"));
}
