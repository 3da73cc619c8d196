//! Train a quarter-width model on generated scenes and report F-measures.

use std::time::Instant;

use mosnet::datasets::{generate_synthetic_scene, make_training_blocks, shuffle_and_split, BlockTensor, ShapeMix, SplitSpec, SyntheticConfig};
use mosnet::inference::{predict_scene, scene_counts, PredictOptions};
use mosnet::metrics::derive;
use mosnet::model::{ModelConfig, Network};
use mosnet::training::{train, CheckpointPolicy, TrainConfig};

fn main() -> mosnet::Result<()> {
    env_logger::init();
    let frames: usize = std::env::var("FRAMES").ok().and_then(|v| v.parse().ok()).unwrap_or(200);
    let epochs: usize = std::env::var("EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(30);
    let min_obj: usize = std::env::var("MIN_OBJ").ok().and_then(|v| v.parse().ok()).unwrap_or(14);
    let max_obj: usize = std::env::var("MAX_OBJ").ok().and_then(|v| v.parse().ok()).unwrap_or(22);
    let scene = |seed: u64| {
        generate_synthetic_scene(&SyntheticConfig {
            name: format!("scene{seed}"),
            frames,
            object_count: 2,
            min_object_size: min_obj,
            max_object_size: max_obj,
            shapes: ShapeMix::Rectangles,
            seed,
            ..Default::default()
        })
        .map(|s| s.scene)
    };
    let train_scenes = (0..6).map(scene).collect::<mosnet::Result<Vec<_>>>()?;
    let eval_scenes = (100..102).map(scene).collect::<mosnet::Result<Vec<_>>>()?;
    let mut all = BlockTensor::default();
    for s in &train_scenes {
        all.extend(make_training_blocks(s, 5)?);
    }
    let (tr, val) = shuffle_and_split(all, &SplitSpec::default())?;
    println!("{} train blocks, {} val blocks", tr.len(), val.len());
    let mut net = Network::new(&ModelConfig {
        input_hw: (64, 64),
        base_filters_scale: 0.25,
        freeze_vgg: false,
        ..Default::default()
    })?;
    let t0 = Instant::now();
    let cfg = TrainConfig { max_epochs: epochs, ..Default::default() };
    let hist = train(&mut net, &tr, &val, &cfg, &CheckpointPolicy::default())?;
    for r in &hist {
        println!("{:?}", r);
    }
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());
    let opts = PredictOptions { batch_size: 4, ..Default::default() };
    for (name, set) in [("train", &train_scenes), ("eval", &eval_scenes)] {
        let mut c = mosnet::metrics::ConfusionCounts::default();
        for s in set.iter() {
            let p = predict_scene(&net, s, &opts)?;
            let sc = scene_counts(&p, s)?;
            println!("  {name} {} F={:?}", s.name, derive(&sc).f_measure);
            c += sc;
        }
        println!("{name}: F = {:?}", derive(&c).f_measure);
    }
    Ok(())
}
