use actionflow::flow::ScheduleKind;
use actionflow::ipa::IpaConfig;
use actionflow::lie::stream;
use actionflow::net::Adam;
use actionflow::policy::{evaluate, train_step, Policy, PolicyConfig};
use actionflow::tasks::{gen_se3_reach, Demonstration, ReachSpec, TaskKind, TaskSpec};

fn one_demo() -> Demonstration {
    let spec = TaskSpec { kind: TaskKind::Se3Reach, n_demos: 1, seed: 21, noise: 0.0, reach: ReachSpec::default() };
    gen_se3_reach(&spec).unwrap().remove(0)
}

#[test]
fn single_demonstration_is_memorized() {
    let demo = one_demo();
    let config = PolicyConfig {
        ipa: IpaConfig { width: 16, n_head: 2, c: 4, n_query_points: 2, n_point_values: 2, n_ipa_layers: 1, ffn_hidden: 32 },
        n_actions: 8,
        adaptation_scale: 1.0,
        ..PolicyConfig::default()
    };
    let mut policy = Policy::new(&config, 0).unwrap();
    let mut adam = Adam::new(&policy.store, 3e-3);
    let mut rng = stream(1);
    // the dataset holds one demonstration; each step draws 16 independent (t, noise) pairs for it
    let batch: Vec<&Demonstration> = std::iter::repeat_n(&demo, 16).collect();
    let losses: Vec<f64> = (0..2000).map(|_| train_step(&mut policy, &mut adam, &batch, &mut rng, None).unwrap()).collect();
    let initial = losses[..10].iter().sum::<f64>() / 10.0;
    let last = losses[1900..].iter().sum::<f64>() / 100.0;
    assert!(last < 0.1 * initial, "loss {initial} -> {last}");

    let m = evaluate(&policy, std::slice::from_ref(&demo), 100, ScheduleKind::Linear, 3).unwrap();
    assert!(m.mean_translation < 0.05 && m.mean_rotation_deg < 5.0, "{m:?}");
}
