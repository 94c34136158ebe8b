//! Euclidean flow matching on eight gaussians with the invariant transformer
//! (all poses at the identity), sampled with several step counts.
//!
//! cargo run --release --example eight_gaussians -- [epochs]

use std::time::Instant;

use actionflow::flow::{make_schedule, ScheduleKind};
use actionflow::ipa::IpaConfig;
use actionflow::lie::stream;
use actionflow::policy::{EuclidPolicy, TrainConfig};
use actionflow::tasks::{eight_gaussian_modes, gen_eight_gaussians, mode_coverage, EIGHT_GAUSSIANS_STD};

fn main() -> actionflow::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(250);
    let data: Vec<Vec<f64>> = gen_eight_gaussians(4000, 0)?.iter().map(|p| p.to_vec()).collect();
    let config = TrainConfig {
        epochs,
        batch_size: 128,
        learning_rate: 3e-3,
        final_learning_rate: Some(6e-5),
        seed: 1,
        ..TrainConfig::default()
    };
    let ipa = IpaConfig { width: 32, n_head: 4, c: 8, n_query_points: 4, n_point_values: 4, n_ipa_layers: 2, ffn_hidden: 64 };
    let mut model = EuclidPolicy::new(&ipa, 2, 0)?;

    let start = Instant::now();
    let mut acc = 0.0;
    model.train(&data, &config, |r| {
        acc += r.loss;
        if (r.step + 1) % 500 == 0 {
            println!("step {:5}  loss {:.4}  ({:.0}s)", r.step + 1, acc / 500.0, start.elapsed().as_secs_f64());
            acc = 0.0;
        }
    })?;

    let modes = eight_gaussian_modes();
    for kind in [ScheduleKind::Linear, ScheduleKind::Exponential] {
        for k in [2, 5, 10, 100] {
            let samples = model.sample(1000, &make_schedule(k, kind)?, &mut stream(2))?;
            let pts: Vec<[f64; 2]> = samples.iter().map(|s| [s[0], s[1]]).collect();
            let c = mode_coverage(&pts, &modes, 3.0 * EIGHT_GAUSSIANS_STD)?;
            println!("K={k:3} {kind:6}: modes covered {}/8, within 3 sigma {:5.1}%", c.covered, 100.0 * c.fraction);
        }
    }
    Ok(())
}
