//! Default desk-scale benchmark: 20 scenes, 16x16 grid, stride 8.
//!
//! `cargo run --release -p musu --example benchmark -- [anchors] [hard] [alpha]`

use std::time::Instant;

use musu::detector::Level;
use musu::eval::EvalSettings;
use musu::{evaluate, generate_scenes, train_run, AnchorLayout, SceneSetConfig, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let anchors: usize = args.first().map_or(Ok(1), |s| s.parse())?;
    let hard = args.get(1).is_some_and(|s| s == "hard");
    let mut config = TrainConfig::default();
    config.assign.hard_targets = hard;
    if let Some(a) = args.get(2) {
        config.assign.alpha = a.parse()?;
    }
    if let Some(lr) = args.get(3) {
        config.learning_rate = lr.parse()?;
    }

    let scene_cfg = SceneSetConfig::default();
    let set = generate_scenes(&scene_cfg)?;
    let level = Level {
        grid_h: 16,
        grid_w: 16,
        stride: 8.0,
    };
    let layout = AnchorLayout::with_random_shapes(vec![level], anchors, 0)?;

    let start = Instant::now();
    let outcome = train_run(&set.scenes, &layout, scene_cfg.num_categories, &config)?;
    let (report, _) = evaluate(
        &outcome.params,
        &layout,
        &set.scenes,
        &config.assign,
        &EvalSettings::default(),
    )?;
    for m in &outcome.log.consistency {
        println!(
            "step {:5}  agreement {:.3}  pearson {:?}",
            m.step, m.metrics.agreement_rate, m.metrics.pearson
        );
    }
    let last = outcome.log.steps.last().map(|s| s.breakdown);
    println!("last losses {last:?}");
    println!("{}", report.to_json());
    println!("elapsed {:.2?}", start.elapsed());
    Ok(())
}
