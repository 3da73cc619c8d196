use mosnet::datasets::io::SceneLayout;
use mosnet::datasets::{
    generate_synthetic_scene, load_scene, make_training_blocks, shuffle_and_split, write_scene, BlockTensor,
    SplitSpec, SyntheticConfig,
};
use mosnet::inference::{predict_scene, PredictOptions};
use mosnet::labelspace::RawAnnotationCodec;
use mosnet::model::{ModelConfig, Network};
use mosnet::training::{restore, restore_for, train, CheckpointPolicy, TrainConfig};

fn small() -> SyntheticConfig {
    SyntheticConfig {
        height: 16,
        width: 16,
        frames: 12,
        min_object_size: 4,
        max_object_size: 6,
        ..Default::default()
    }
}

fn model() -> ModelConfig {
    ModelConfig {
        n: 3,
        input_hw: (16, 16),
        base_filters_scale: 0.05,
        freeze_vgg: false,
        ..Default::default()
    }
}

#[test]
fn train_checkpoint_restore_predict() {
    let dir = tempfile::tempdir().unwrap();
    let mut all = BlockTensor::default();
    for seed in 0..3 {
        let s = generate_synthetic_scene(&SyntheticConfig { seed, ..small() }).unwrap();
        all.extend(make_training_blocks(&s.scene, 3).unwrap());
    }
    let (tr, val) = shuffle_and_split(all, &SplitSpec::default()).unwrap();
    let mut net = Network::new(&model()).unwrap();
    let cfg = TrainConfig {
        max_epochs: 2,
        learning_rate: 1e-3,
        ..Default::default()
    };
    let policy = CheckpointPolicy {
        run_dir: Some(dir.path().to_path_buf()),
    };
    let hist = train(&mut net, &tr, &val, &cfg, &policy).unwrap();
    assert_eq!(hist.len(), 2);
    let epoch2 = restore(&CheckpointPolicy::epoch_path(dir.path(), 2)).unwrap();
    assert_eq!(epoch2.history.len(), 2);
    assert!(epoch2.optimizer.is_some());

    let best = restore_for(&CheckpointPolicy::best_path(dir.path()), &model()).unwrap();
    let scene = generate_synthetic_scene(&SyntheticConfig { seed: 9, ..small() }).unwrap().scene;
    let opts = PredictOptions {
        batch_size: 2,
        ..Default::default()
    };
    let a = predict_scene(&net, &scene, &opts).unwrap();
    let b = predict_scene(&best.network, &scene, &opts).unwrap();
    assert_eq!(a.len(), 10);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.probability, y.probability);
    }
    let wrong = ModelConfig { n: 5, ..model() };
    assert!(restore_for(&CheckpointPolicy::best_path(dir.path()), &wrong).is_err());
}

#[test]
fn written_scene_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_synthetic_scene(&small()).unwrap().scene;
    write_scene(&s, dir.path()).unwrap();
    let back = load_scene(dir.path(), &SceneLayout::cdnet(), &RawAnnotationCodec::synthetic(), None).unwrap();
    assert_eq!(back.len(), s.len());
    assert_eq!(back.first_index, 1);
    for (a, b) in back.gt.iter().zip(&s.gt) {
        assert_eq!(a, b);
    }
    let resized = load_scene(dir.path(), &SceneLayout::cdnet(), &RawAnnotationCodec::synthetic(), Some((8, 8))).unwrap();
    assert_eq!(resized.size(), Some((8, 8)));
}
