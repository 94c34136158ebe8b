//! Writes a policy checkpoint, reads it back and checks the bytes round-trip.

use actionflow::cli::{Checkpoint, Model};
use actionflow::policy::{Policy, PolicyConfig};

fn main() -> actionflow::Result<()> {
    let mut policy = Policy::new(&PolicyConfig::default(), 7)?;
    policy.randomize_head(8);
    let dir = std::env::temp_dir().join("actionflow-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("policy.ckpt");

    Model::Poses(policy.clone()).checkpoint().save(&path)?;
    let first = std::fs::read(&path)?;
    let loaded = Checkpoint::load(&path)?;
    println!("{} tensors, {} bytes, config {}", loaded.tensors.len(), first.len(), serde_json::to_string(&loaded.config)?);
    for (name, t) in loaded.tensors.iter().take(4) {
        println!("  {name} {:?}", t.shape());
    }
    let model = loaded.clone().into_model()?;
    println!("weights identical: {}", model.policy().store == policy.store);
    println!("re-encoded bytes identical: {}", loaded.to_bytes()? == first);
    Ok(())
}
