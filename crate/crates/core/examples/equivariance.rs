//! Equivariant generation: moving the scene (and the starting noise) by a
//! rigid transform moves the generated actions by the same transform. The
//! world-frame update rule is shown alongside as the broken variant.

use actionflow::flow::{make_schedule, ScheduleKind};
use actionflow::ipa::TokenSet;
use actionflow::lie::{stream, Pose};
use actionflow::policy::{check_equivariance_many, random_transform, Policy, PolicyConfig, StepRule};
use actionflow::tasks::{gen_se3_reach, ReachSpec, TaskKind, TaskSpec};

fn main() -> actionflow::Result<()> {
    let mut policy = Policy::new(&PolicyConfig::default(), 0)?;
    policy.randomize_head(1);
    let spec = TaskSpec { kind: TaskKind::Se3Reach, n_demos: 10, seed: 2, noise: 0.0, reach: ReachSpec::default() };
    let mut rng = stream(3);
    let cases: Vec<(TokenSet, Pose)> = gen_se3_reach(&spec)?
        .into_iter()
        .map(|d| (d.observation, random_transform(&mut rng, 5.0)))
        .collect();
    for k in [2, 20] {
        let schedule = make_schedule(k, ScheduleKind::Linear)?;
        for rule in [StepRule::BodyFrame, StepRule::WorldFrame] {
            let r = check_equivariance_many(&policy, &cases, 8, 4, &schedule, rule)?;
            println!("K={k:3} {rule:?}: translation {:.2e}, rotation {:.2e} rad", r.max_translation, r.max_rotation);
        }
    }
    Ok(())
}
