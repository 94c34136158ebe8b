use approx::assert_abs_diff_eq;
use nalgebra::Vector3;
use rand::Rng;

use super::*;
use crate::autodiff::{grad_check, GradCheckOptions};
use crate::lie::{sample_uniform_rotation, so3_exp, stream, AxisAngle, Rotation};
use crate::net::LAYERNORM_EPS;

fn small_config() -> IpaConfig {
    IpaConfig { width: 16, n_head: 2, c: 4, n_query_points: 3, n_point_values: 2, n_ipa_layers: 2, ffn_hidden: 24 }
}

fn random_pose(rng: &mut RandomStream, spread: f64) -> Pose {
    let p = Vector3::new(
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
    );
    Pose::new(sample_uniform_rotation(rng), p)
}

fn random_features(rng: &mut RandomStream, n: usize, w: usize) -> Tensor {
    Tensor::new(vec![1, n, w], (0..n * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn run_layer(layer: &IpaLayer, store: &ParamStore, f: &Tensor, poses: &[Pose]) -> Tensor {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let frames = Frames::new(&mut tape, &[poses.to_vec()]).unwrap();
    let x = tape.constant(f.clone());
    let y = layer.forward(&mut tape, &p, x, &frames).unwrap();
    tape.value(y).clone()
}

// ---- scalar loop oracle ----------------------------------------------------

fn lin(store: &ParamStore, layer: &LinearLayer, x: &[f64]) -> Vec<f64> {
    let w = store.get(layer.weight).data();
    let b = store.get(layer.bias).data();
    (0..layer.out_dim)
        .map(|o| b[o] + (0..layer.in_dim).map(|i| w[o * layer.in_dim + i] * x[i]).sum::<f64>())
        .collect()
}

fn global(pose: &Pose, x: &[f64]) -> Vector3<f64> {
    pose.r.matrix() * Vector3::new(x[0], x[1], x[2]) + pose.p
}

fn oracle_logits(layer: &IpaLayer, store: &ParamStore, f: &[Vec<f64>], poses: &[Pose]) -> Vec<Vec<Vec<f64>>> {
    let cfg = &layer.config;
    let (w_l, w_c) = ipa_constants(cfg).unwrap();
    let n = f.len();
    let q: Vec<_> = f.iter().map(|x| lin(store, &layer.query, x)).collect();
    let k: Vec<_> = f.iter().map(|x| lin(store, &layer.key, x)).collect();
    let qp: Vec<_> = f.iter().map(|x| lin(store, &layer.query_points, x)).collect();
    let kp: Vec<_> = f.iter().map(|x| lin(store, &layer.key_points, x)).collect();
    let mut logits = vec![vec![vec![0.0; n]; n]; cfg.n_head];
    for h in 0..cfg.n_head {
        for i in 0..n {
            for j in 0..n {
                let mut dot = 0.0;
                for ch in 0..cfg.c {
                    dot += q[i][h * cfg.c + ch] * k[j][h * cfg.c + ch];
                }
                let mut dist = 0.0;
                for pt in 0..cfg.n_query_points {
                    let o = (h * cfg.n_query_points + pt) * 3;
                    let a = global(&poses[i], &qp[i][o..o + 3]);
                    let b = global(&poses[j], &kp[j][o..o + 3]);
                    dist += (a - b).norm_squared();
                }
                logits[h][i][j] = w_l * dot - w_c * dist;
            }
        }
    }
    logits
}

fn oracle_layer(layer: &IpaLayer, store: &ParamStore, f: &[Vec<f64>], poses: &[Pose]) -> Vec<Vec<f64>> {
    let cfg = &layer.config;
    let n = f.len();
    let (h_n, c, pv) = (cfg.n_head, cfg.c, cfg.n_point_values);
    let logits = oracle_logits(layer, store, f, poses);
    let v: Vec<_> = f.iter().map(|x| lin(store, &layer.value, x)).collect();
    let vp: Vec<_> = f.iter().map(|x| lin(store, &layer.value_points, x)).collect();
    let mut out = Vec::new();
    for i in 0..n {
        let mut o = vec![0.0; h_n * c];
        let mut local = vec![0.0; h_n * pv * 3];
        let mut norms = vec![0.0; h_n * pv];
        for h in 0..h_n {
            let row = &logits[h][i];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let a: Vec<f64> = e.iter().map(|x| x / z).collect();
            for j in 0..n {
                for ch in 0..c {
                    o[h * c + ch] += a[j] * v[j][h * c + ch];
                }
            }
            for pt in 0..pv {
                let off = (h * pv + pt) * 3;
                let mut agg = Vector3::zeros();
                for j in 0..n {
                    agg += a[j] * global(&poses[j], &vp[j][off..off + 3]);
                }
                let l = poses[i].r.matrix().transpose() * (agg - poses[i].p);
                local[off..off + 3].copy_from_slice(l.as_slice());
                norms[h * pv + pt] = (l.norm_squared() + POINT_NORM_EPS).sqrt();
            }
        }
        let merged: Vec<f64> = o.into_iter().chain(local).chain(norms).collect();
        let upd = lin(store, &layer.output, &merged);
        let x: Vec<f64> = f[i].iter().zip(&upd).map(|(a, b)| a + b).collect();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
        let g = store.get(layer.norm.gain).data();
        let b = store.get(layer.norm.bias).data();
        out.push(
            x.iter()
                .enumerate()
                .map(|(d, v)| (v - mean) / (var + LAYERNORM_EPS).sqrt() * g[d] + b[d])
                .collect(),
        );
    }
    out
}

fn rows(t: &Tensor, n: usize, w: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| t.data()[i * w..(i + 1) * w].to_vec()).collect()
}

// ---- constants and config ---------------------------------------------------

#[test]
fn constants_match_formula() {
    let (w_l, w_c) = ipa_constants(&IpaConfig::default()).unwrap();
    assert_abs_diff_eq!(w_l, 1.0 / 48f64.sqrt(), epsilon = 1e-15);
    assert_abs_diff_eq!(w_l, 0.144338, epsilon = 1e-6);
    assert_abs_diff_eq!(w_c, 0.5 * (2.0f64 / 108.0).sqrt(), epsilon = 1e-15);
    assert_abs_diff_eq!(w_c, 0.068041, epsilon = 1e-6);
}

#[test]
fn config_rejects_bad_values() {
    let json = r#"{"width":64,"n_head":4,"c":0.3333333333333333,"n_query_points":4,
        "n_point_values":8,"n_ipa_layers":4,"ffn_hidden":128}"#;
    assert!(serde_json::from_str::<IpaConfig>(json).is_err());
    let json = r#"{"width":64,"n_head":4,"c":16,"n_query_points":4,
        "n_point_values":8,"n_ipa_layers":4,"ffn_hidden":128,"extra":1}"#;
    assert!(serde_json::from_str::<IpaConfig>(json).is_err());
    assert!(IpaConfig { c: 0, ..IpaConfig::default() }.validate().is_err());
    assert!(ipa_constants(&IpaConfig { c: 0, ..IpaConfig::default() }).is_err());
    assert!(IpaConfig { c: 32, ..IpaConfig::default() }.validate().is_err());
    assert!(IpaConfig::default().validate().is_ok());
}

// ---- layer ------------------------------------------------------------------

#[test]
fn layer_matches_loop_oracle() {
    let mut rng = stream(11);
    let cfg = small_config();
    for n in 1..=4 {
        let mut store = ParamStore::new();
        let layer = IpaLayer::new(&mut store, "ipa", &cfg, &mut rng).unwrap();
        let f = random_features(&mut rng, n, cfg.width);
        let poses: Vec<Pose> = (0..n).map(|_| random_pose(&mut rng, 2.0)).collect();
        let got = run_layer(&layer, &store, &f, &poses);
        let want = oracle_layer(&layer, &store, &rows(&f, n, cfg.width), &poses);
        for (g, w) in got.data().iter().zip(want.iter().flatten()) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = stream(12);
    let cfg = small_config();
    let mut store = ParamStore::new();
    let layer = IpaLayer::new(&mut store, "ipa", &cfg, &mut rng).unwrap();
    let poses: Vec<Pose> = (0..5).map(|_| random_pose(&mut rng, 3.0)).collect();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let frames = Frames::new(&mut tape, &[poses]).unwrap();
    let x = tape.constant(random_features(&mut rng, 5, cfg.width));
    let a = layer.attention(&mut tape, &p, x, &frames).unwrap();
    for row in tape.value(a).data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn doubling_distance_shifts_logit_by_point_term() {
    let mut rng = stream(13);
    let cfg = small_config();
    let mut store = ParamStore::new();
    let layer = IpaLayer::new(&mut store, "ipa", &cfg, &mut rng).unwrap();
    let f = random_features(&mut rng, 2, cfg.width);
    let fr = rows(&f, 2, cfg.width);
    let (_, w_c) = ipa_constants(&cfg).unwrap();
    let r0 = sample_uniform_rotation(&mut rng);
    let r1 = sample_uniform_rotation(&mut rng);
    let dir = Vector3::new(0.3, -0.8, 0.5).normalize();
    let d = 1.7;
    let logits = |dist: f64| {
        let poses = vec![Pose::new(r0, Vector3::zeros()), Pose::new(r1, dir * dist)];
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let frames = Frames::new(&mut tape, &[poses]).unwrap();
        let x = tape.constant(f.clone());
        let l = layer.attention_logits(&mut tape, &p, x, &frames).unwrap();
        tape.value(l).clone()
    };
    let (l1, l2) = (logits(d), logits(2.0 * d));
    // hand-rolled point term difference for pair (0, 1)
    let qp = lin(&store, &layer.query_points, &fr[0]);
    let kp = lin(&store, &layer.key_points, &fr[1]);
    for h in 0..cfg.n_head {
        let mut delta = 0.0;
        for pt in 0..cfg.n_query_points {
            let o = (h * cfg.n_query_points + pt) * 3;
            let a = r0.matrix() * Vector3::from_column_slice(&qp[o..o + 3]);
            let b = r1.matrix() * Vector3::from_column_slice(&kp[o..o + 3]);
            delta += (a - (b + dir * 2.0 * d)).norm_squared() - (a - (b + dir * d)).norm_squared();
        }
        let idx = h * 4 + 1;
        let got = l2.data()[idx] - l1.data()[idx];
        assert_abs_diff_eq!(got, -w_c * delta, epsilon = 1e-10);
    }
}

#[test]
fn single_token_layer_is_invariant() {
    let mut rng = stream(14);
    let cfg = small_config();
    let mut store = ParamStore::new();
    let layer = IpaLayer::new(&mut store, "ipa", &cfg, &mut rng).unwrap();
    let f = random_features(&mut rng, 1, cfg.width);
    let pose = random_pose(&mut rng, 2.0);
    let base = run_layer(&layer, &store, &f, &[pose]);
    for _ in 0..10 {
        let delta = random_pose(&mut rng, 5.0);
        let moved = run_layer(&layer, &store, &f, &[pose_compose(&delta, &pose)]);
        assert!(base.max_abs_diff(&moved) < 1e-9);
    }
}

#[test]
fn layer_is_invariant_to_global_transforms() {
    let mut rng = stream(15);
    let cfg = IpaConfig::default();
    let mut store = ParamStore::new();
    let layer = IpaLayer::new(&mut store, "ipa", &cfg, &mut rng).unwrap();
    let f = random_features(&mut rng, 5, cfg.width);
    let poses: Vec<Pose> = (0..5).map(|_| random_pose(&mut rng, 2.0)).collect();
    let base = run_layer(&layer, &store, &f, &poses);
    for _ in 0..20 {
        let delta = random_pose(&mut rng, 5.0);
        let moved: Vec<Pose> = poses.iter().map(|p| pose_compose(&delta, p)).collect();
        let out = run_layer(&layer, &store, &f, &moved);
        assert!(base.max_abs_diff(&out) < 1e-6);
    }
}

#[test]
fn dropping_translations_breaks_invariance() {
    // Control: comparing points without translations is only rotation-invariant.
    let mut rng = stream(16);
    let cfg = small_config();
    let mut store = ParamStore::new();
    let layer = IpaLayer::new(&mut store, "ipa", &cfg, &mut rng).unwrap();
    let f = random_features(&mut rng, 3, cfg.width);
    let poses: Vec<Pose> = (0..3).map(|_| random_pose(&mut rng, 2.0)).collect();
    let base = run_layer(&layer, &store, &f, &poses);
    let shifted: Vec<Pose> = poses.iter().map(|p| Pose::new(p.r, p.p * 2.0)).collect();
    let out = run_layer(&layer, &store, &f, &shifted);
    assert!(base.max_abs_diff(&out) > 1e-3);
}

// ---- transformer ------------------------------------------------------------

fn model_config() -> ModelConfig {
    ModelConfig { ipa: small_config(), obs_feature_dim: 3, n_actions: 4 }
}

fn random_tokens(rng: &mut RandomStream, n_obs: usize, n_act: usize, dim: usize) -> TokenSet {
    let mut tokens = Vec::new();
    for _ in 0..n_obs {
        let feat = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        tokens.push(Token::observation(random_pose(rng, 2.0), feat));
    }
    for _ in 0..n_act {
        tokens.push(Token::action(random_pose(rng, 2.0)));
    }
    TokenSet::new(tokens)
}

fn flat(v: &[Velocity]) -> Vec<f64> {
    v.iter().flat_map(|v| v.translation.iter().chain(v.rotation.vector().iter()).cloned().collect::<Vec<_>>()).collect()
}

#[test]
fn zero_head_outputs_zero() {
    let mut rng = stream(20);
    let mut store = ParamStore::new();
    let model = InvariantTransformer::new(&mut store, &model_config(), &mut rng).unwrap();
    let tokens = random_tokens(&mut rng, 2, 3, 3);
    let v = invariant_transformer_forward(&model, &store, &tokens, 0.3).unwrap();
    assert_eq!(v.len(), 3);
    assert!(flat(&v).iter().all(|&x| x == 0.0));
}

#[test]
fn transformer_is_invariant() {
    let mut rng = stream(21);
    let mut store = ParamStore::new();
    let model = InvariantTransformer::new(&mut store, &model_config(), &mut rng).unwrap();
    model.randomize_head(&mut store, &mut rng);
    for _ in 0..5 {
        let tokens = random_tokens(&mut rng, 2, 3, 3);
        let base = flat(&invariant_transformer_forward(&model, &store, &tokens, 0.6).unwrap());
        assert!(base.iter().any(|x| x.abs() > 1e-3));
        let delta = random_pose(&mut rng, 5.0);
        let moved = flat(&invariant_transformer_forward(&model, &store, &tokens.transformed(&delta), 0.6).unwrap());
        for (a, b) in base.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn observation_order_does_not_matter() {
    let mut rng = stream(22);
    let mut store = ParamStore::new();
    let model = InvariantTransformer::new(&mut store, &model_config(), &mut rng).unwrap();
    model.randomize_head(&mut store, &mut rng);
    let tokens = random_tokens(&mut rng, 3, 2, 3);
    let mut swapped = tokens.clone();
    swapped.tokens.swap(0, 2);
    // interleave an observation after the actions
    let obs = swapped.tokens.remove(1);
    swapped.tokens.push(obs);
    let a = flat(&invariant_transformer_forward(&model, &store, &tokens, 0.2).unwrap());
    let b = flat(&invariant_transformer_forward(&model, &store, &swapped, 0.2).unwrap());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn transformer_rejects_bad_inputs() {
    let mut rng = stream(23);
    let mut store = ParamStore::new();
    let model = InvariantTransformer::new(&mut store, &model_config(), &mut rng).unwrap();
    let no_actions = random_tokens(&mut rng, 2, 0, 3);
    assert!(invariant_transformer_forward(&model, &store, &no_actions, 0.5).is_err());
    let too_many = random_tokens(&mut rng, 1, 5, 3);
    assert!(invariant_transformer_forward(&model, &store, &too_many, 0.5).is_err());
    let ok = random_tokens(&mut rng, 1, 1, 3);
    assert!(invariant_transformer_forward(&model, &store, &ok, 1.5).is_err());
    let bad_feat = random_tokens(&mut rng, 1, 1, 2);
    assert!(invariant_transformer_forward(&model, &store, &bad_feat, 0.5).is_err());
}

#[test]
fn batched_forward_matches_single() {
    let mut rng = stream(24);
    let mut store = ParamStore::new();
    let model = InvariantTransformer::new(&mut store, &model_config(), &mut rng).unwrap();
    model.randomize_head(&mut store, &mut rng);
    let sets: Vec<TokenSet> = (0..3).map(|_| random_tokens(&mut rng, 2, 2, 3)).collect();
    let ts = [0.1, 0.5, 0.9];
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let out = model.forward(&mut tape, &p, &sets, &ts).unwrap();
    let batched = velocities(tape.value(out));
    for (b, set) in sets.iter().enumerate() {
        let single = invariant_transformer_forward(&model, &store, set, ts[b]).unwrap();
        let a = flat(&single);
        let c = flat(&batched[b * 2..b * 2 + 2]);
        for (x, y) in a.iter().zip(&c) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn ipa_layer_gradients_match_finite_differences() {
    let mut rng = stream(25);
    let cfg = IpaConfig { width: 8, n_head: 2, c: 2, n_query_points: 2, n_point_values: 2, n_ipa_layers: 1, ffn_hidden: 8 };
    let mut store = ParamStore::new();
    let layer = IpaLayer::new(&mut store, "ipa", &cfg, &mut rng).unwrap();
    let poses: Vec<Pose> = (0..3).map(|_| random_pose(&mut rng, 1.0)).collect();
    let f = random_features(&mut rng, 3, cfg.width);
    let target = random_features(&mut rng, 3, cfg.width);
    let mut params: Vec<Tensor> = store.tensors().to_vec();
    params.push(f);
    let report = grad_check(
        |tape, vars| {
            let bound = store.bind_from(&vars[..vars.len() - 1])?;
            let frames = Frames::new(tape, &[poses.clone()])?;
            let y = layer.forward(tape, &bound, vars[vars.len() - 1], &frames)?;
            let t = tape.constant(target.clone());
            let d = tape.sub(y, t)?;
            let sq = tape.square(d)?;
            tape.sum(sq)
        },
        &params,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut rng = stream(26);
    let cfg = ModelConfig {
        ipa: IpaConfig { width: 8, n_head: 2, c: 2, n_query_points: 2, n_point_values: 2, n_ipa_layers: 1, ffn_hidden: 8 },
        obs_feature_dim: 2,
        n_actions: 2,
    };
    let mut store = ParamStore::new();
    let model = InvariantTransformer::new(&mut store, &cfg, &mut rng).unwrap();
    model.randomize_head(&mut store, &mut rng);
    let sets: Vec<TokenSet> = (0..2).map(|_| random_tokens(&mut rng, 2, 2, 2)).collect();
    let opts = GradCheckOptions { max_probes_per_param: Some(6), ..GradCheckOptions::default() };
    let report = grad_check(
        |tape, vars| {
            let bound = store.bind_from(vars)?;
            let y = model.forward(tape, &bound, &sets, &[0.3, 0.8])?;
            let sq = tape.square(y)?;
            tape.sum(sq)
        },
        store.tensors(),
        &opts,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

// ---- adaptation -------------------------------------------------------------

#[test]
fn adaptation_examples() {
    let mut rng = stream(30);
    let tokens = random_tokens(&mut rng, 2, 3, 2);
    let anchor = tokens.tokens[0].pose;
    let out = adaptation_normalize(&tokens, &anchor, 10.0).unwrap();
    let first = out.tokens[0].pose;
    assert!(first.p.norm() < 1e-12);
    assert!((first.r.matrix() - Rotation::identity().matrix()).abs().max() < 1e-12);
    // tanh rounds to exactly ±1 once |scale·p| exceeds ~19
    let raw = adaptation_normalize(&tokens, &anchor, 1.0).unwrap();
    for (t, r) in out.tokens.iter().zip(&raw.tokens) {
        for (x, y) in t.pose.p.iter().zip(r.pose.p.iter()) {
            assert!(x.abs() <= 1.0);
            if y.atanh().abs() * 10.0 < 18.0 {
                assert!(x.abs() < 1.0);
            }
        }
    }
    let tiny = adaptation_normalize(&tokens, &Pose::identity(), 1e-12).unwrap();
    assert!(tiny.tokens.iter().all(|t| t.pose.p.norm() < 1e-10));
    assert!(adaptation_normalize(&tokens, &anchor, 0.0).is_err());
    assert!(adaptation_normalize(&tokens, &anchor, -1.0).is_err());
}

#[test]
fn adaptation_is_invariant_when_anchor_moves_along() {
    let mut rng = stream(31);
    let tokens = random_tokens(&mut rng, 2, 2, 2);
    let delta = Pose::new(so3_exp(&AxisAngle::new(0.3, -1.2, 2.0)).unwrap(), Vector3::new(4.0, -3.0, 1.0));
    let moved = tokens.transformed(&delta);
    let a = adaptation_normalize(&tokens, &tokens.tokens[1].pose, 2.0).unwrap();
    let b = adaptation_normalize(&moved, &moved.tokens[1].pose, 2.0).unwrap();
    for (x, y) in a.tokens.iter().zip(&b.tokens) {
        assert!((x.pose.p - y.pose.p).norm() < 1e-12);
        assert!((x.pose.r.matrix() - y.pose.r.matrix()).abs().max() < 1e-12);
    }
}
