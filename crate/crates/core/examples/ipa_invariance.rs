//! The invariant transformer gives the same velocities when every pose in the
//! scene is moved by one rigid transform.

use actionflow::ipa::{invariant_transformer_forward, InvariantTransformer, IpaConfig, ModelConfig, Token, TokenSet};
use actionflow::lie::stream;
use actionflow::net::ParamStore;
use actionflow::policy::random_transform;
use rand::Rng;

fn main() -> actionflow::Result<()> {
    let mut rng = stream(4);
    let cfg = ModelConfig { ipa: IpaConfig::default(), obs_feature_dim: 3, n_actions: 2 };
    let mut store = ParamStore::new();
    let model = InvariantTransformer::new(&mut store, &cfg, &mut rng)?;
    model.randomize_head(&mut store, &mut rng);

    let mut tokens: Vec<Token> = (0..3)
        .map(|_| {
            let feat = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            Token::observation(random_transform(&mut rng, 2.0), feat)
        })
        .collect();
    tokens.extend((0..2).map(|_| Token::action(random_transform(&mut rng, 2.0))));
    let scene = TokenSet::new(tokens);

    let base = invariant_transformer_forward(&model, &store, &scene, 0.4)?;
    for (i, v) in base.iter().enumerate() {
        println!("action {i}: v_p {:?} v_r {:?}", v.translation.as_slice(), v.rotation.vector().as_slice());
    }
    for _ in 0..5 {
        let g = random_transform(&mut rng, 5.0);
        let moved = invariant_transformer_forward(&model, &store, &scene.transformed(&g), 0.4)?;
        let dev = base
            .iter()
            .zip(&moved)
            .map(|(a, b)| (a.translation - b.translation).amax().max((a.rotation.vector() - b.rotation.vector()).amax()))
            .fold(0.0, f64::max);
        println!("transformed scene: max output change {dev:.2e}");
    }
    Ok(())
}
