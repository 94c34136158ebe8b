//! The command-line workflow end to end, driven in-process: generate data,
//! train, sample, check equivariance and benchmark step counts.

use actionflow::cli::run;

fn cmd(args: &[&str]) -> i32 {
    println!("$ actionflow {}", args.join(" "));
    let code = run(std::iter::once("actionflow").chain(args.iter().copied()), &mut std::io::stdout(), &mut std::io::stderr());
    println!("(exit {code})\n");
    code
}

fn main() -> std::io::Result<()> {
    let dir = std::env::temp_dir().join("actionflow-cli-example");
    std::fs::create_dir_all(&dir)?;
    let path = |name: &str| dir.join(name).to_string_lossy().into_owned();
    std::fs::write(
        path("run.json"),
        r#"{"train": {"epochs": 20, "batch_size": 10, "learning_rate": 0.003,
            "policy": {"ipa": {"width": 16, "n_head": 2, "c": 4, "n_query_points": 2, "n_point_values": 2,
                               "n_ipa_layers": 1, "ffn_hidden": 32},
                       "n_actions": 8, "adaptation_scale": 1.0}},
            "steps": [2, 10]}"#,
    )?;
    cmd(&["gen-data", "--task", "se3-reach", "--n", "40", "--seed", "1", "--out", &path("reach.jsonl")]);
    cmd(&["train", "--config", &path("run.json"), "--data", &path("reach.jsonl"), "--out", &path("reach.ckpt"), "--seed", "0"]);
    cmd(&["sample", "--ckpt", &path("reach.ckpt"), "--data", &path("reach.jsonl"), "--steps", "10", "--out", &path("samples.jsonl")]);
    cmd(&["check-equivariance", "--ckpt", &path("reach.ckpt"), "--trials", "10"]);
    cmd(&["bench-steps", "--ckpt", &path("reach.ckpt"), "--data", &path("reach.jsonl"), "--schedule", "linear,exp", "--out", &path("bench.csv")]);
    Ok(())
}
