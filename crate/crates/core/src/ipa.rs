//! Invariant Point Attention and the SE(3) invariant transformer.
//!
//! Every token carries a pose `T = (r, p)` and a feature vector. Besides the
//! usual query/key/value features, each token emits 3-D query, key and value
//! points in its own local frame. Points are compared and aggregated after
//! placing them in the global frame (`r·x + p`), and aggregated value points
//! are mapped back into the receiving token's frame. Distances and local
//! coordinates do not change when every pose is left-multiplied by the same
//! rigid transform, so the layer output is SE(3)-invariant.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, shape, Result};
use crate::lie::{pose_compose, pose_inverse, Pose, RandomStream};
use crate::net::{Bound, EncoderBlock, LayerNormParams, LinearLayer, ParamId, ParamStore, TimeEmbedding};

/// Added under the square root of the output point norms.
pub const POINT_NORM_EPS: f64 = 1e-8;

/// Attention and stack dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IpaConfig {
    /// Model (token feature) width.
    pub width: usize,
    pub n_head: usize,
    /// Per-head channel width of the scalar queries, keys and values.
    pub c: usize,
    pub n_query_points: usize,
    pub n_point_values: usize,
    pub n_ipa_layers: usize,
    /// Hidden width of the encoder feed-forward block.
    pub ffn_hidden: usize,
}

impl Default for IpaConfig {
    fn default() -> Self {
        IpaConfig {
            width: 64,
            n_head: 4,
            c: 16,
            n_query_points: 4,
            n_point_values: 8,
            n_ipa_layers: 4,
            ffn_hidden: 128,
        }
    }
}

impl IpaConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("width", self.width),
            ("n_head", self.n_head),
            ("c", self.c),
            ("n_query_points", self.n_query_points),
            ("n_point_values", self.n_point_values),
            ("n_ipa_layers", self.n_ipa_layers),
            ("ffn_hidden", self.ffn_hidden),
        ];
        if let Some((name, _)) = all.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("ipa config: {name} must be positive")));
        }
        if self.c * self.n_head > self.width {
            return Err(invalid(format!(
                "ipa config: c·n_head = {} exceeds width {}",
                self.c * self.n_head,
                self.width
            )));
        }
        if self.width % self.n_head != 0 {
            return Err(invalid("ipa config: n_head must divide width"));
        }
        Ok(())
    }
}

/// Logit weights `(w_L, w_c)` for the scalar and point compatibility terms.
pub fn ipa_constants(config: &IpaConfig) -> Result<(f64, f64)> {
    if config.c == 0 || config.n_query_points == 0 {
        return Err(invalid("ipa_constants: c and n_query_points must be positive"));
    }
    let w_l = 1.0 / (3.0 * config.c as f64).sqrt();
    let w_c = 0.5 * (2.0 / (27.0 * config.n_query_points as f64)).sqrt();
    Ok((w_l, w_c))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Observation,
    Action,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub pose: Pose,
    /// Raw observation features; ignored for action tokens.
    pub feature: Vec<f64>,
    pub kind: TokenKind,
}

impl Token {
    pub fn observation(pose: Pose, feature: Vec<f64>) -> Self {
        Token { pose, feature, kind: TokenKind::Observation }
    }

    pub fn action(pose: Pose) -> Self {
        Token { pose, feature: Vec::new(), kind: TokenKind::Action }
    }
}

/// Poses with features and observation/action flags.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TokenSet {
    pub tokens: Vec<Token>,
}

impl TokenSet {
    pub fn new(tokens: Vec<Token>) -> Self {
        TokenSet { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn observations(&self) -> impl Iterator<Item = &Token> {
        self.tokens.iter().filter(|t| t.kind == TokenKind::Observation)
    }

    pub fn actions(&self) -> impl Iterator<Item = &Token> {
        self.tokens.iter().filter(|t| t.kind == TokenKind::Action)
    }

    pub fn num_actions(&self) -> usize {
        self.actions().count()
    }

    pub fn num_observations(&self) -> usize {
        self.observations().count()
    }

    /// Observation tokens followed by `actions` as action tokens.
    pub fn with_actions(&self, actions: &[Pose]) -> TokenSet {
        let mut tokens: Vec<Token> = self.observations().cloned().collect();
        tokens.extend(actions.iter().map(|p| Token::action(*p)));
        TokenSet { tokens }
    }

    /// Every pose left-multiplied by `delta`.
    pub fn transformed(&self, delta: &Pose) -> TokenSet {
        let tokens = self
            .tokens
            .iter()
            .map(|t| Token { pose: pose_compose(delta, &t.pose), ..t.clone() })
            .collect();
        TokenSet { tokens }
    }

    /// Pose of the `index`-th observation token.
    pub fn observation_pose(&self, index: usize) -> Result<Pose> {
        self.observations()
            .nth(index)
            .map(|t| t.pose)
            .ok_or_else(|| invalid(format!("no observation token at index {index}")))
    }
}

/// Re-expresses all poses in the `anchor` frame and squashes translations
/// componentwise through `tanh(scale·p)`. Rotations are kept as they are.
pub fn adaptation_normalize(tokens: &TokenSet, anchor: &Pose, scale: f64) -> Result<TokenSet> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(invalid(format!("adaptation scale must be positive, got {scale}")));
    }
    let inv = pose_inverse(anchor);
    let tokens = tokens
        .tokens
        .iter()
        .map(|t| {
            let mut pose = pose_compose(&inv, &t.pose);
            pose.p = pose.p.map(|x| (scale * x).tanh());
            Token { pose, ..t.clone() }
        })
        .collect();
    Ok(TokenSet { tokens })
}

/// Per-token rigid frames as tape constants.
pub struct Frames {
    /// `[batch, tokens, 3, 3]`
    pub rot: Var,
    /// `[batch, tokens, 3, 3]`, transposed rotations
    pub rot_t: Var,
    /// `[batch, tokens, 1, 3]`
    pub trans: Var,
}

impl Frames {
    /// `poses[b][i]` is the pose of token `i` in batch entry `b`.
    pub fn new(tape: &mut Tape, poses: &[Vec<Pose>]) -> Result<Frames> {
        let b = poses.len();
        let n = poses.first().map_or(0, Vec::len);
        if b == 0 || n == 0 || poses.iter().any(|p| p.len() != n) {
            return Err(shape("frames need a non-empty rectangular batch of poses"));
        }
        let mut rot = Vec::with_capacity(b * n * 9);
        let mut rot_t = Vec::with_capacity(b * n * 9);
        let mut trans = Vec::with_capacity(b * n * 3);
        for pose in poses.iter().flatten() {
            rot.extend(pose.r.to_row_array());
            rot_t.extend(pose.r.transpose().to_row_array());
            trans.extend(pose.p.iter());
        }
        Ok(Frames {
            rot: tape.constant(Tensor::new(vec![b, n, 3, 3], rot)?),
            rot_t: tape.constant(Tensor::new(vec![b, n, 3, 3], rot_t)?),
            trans: tape.constant(Tensor::new(vec![b, n, 1, 3], trans)?),
        })
    }

    /// Local points `[b, n, k, 3]` → global `r·x + p`.
    fn to_global(&self, tape: &mut Tape, local: Var) -> Result<Var> {
        let g = tape.matmul(local, self.rot_t)?;
        tape.add(g, self.trans)
    }

    /// Global points `[b, n, k, 3]` → local `rᵀ·(x − p)` of the same token.
    fn to_local(&self, tape: &mut Tape, global: Var) -> Result<Var> {
        let d = tape.sub(global, self.trans)?;
        tape.matmul(d, self.rot)
    }
}

/// One Invariant Point Attention layer with its residual layer norm.
#[derive(Clone, Debug)]
pub struct IpaLayer {
    pub query: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
    pub query_points: LinearLayer,
    pub key_points: LinearLayer,
    pub value_points: LinearLayer,
    pub output: LinearLayer,
    pub norm: LayerNormParams,
    pub config: IpaConfig,
}

impl IpaLayer {
    pub fn new(store: &mut ParamStore, name: &str, config: &IpaConfig, rng: &mut RandomStream) -> Result<Self> {
        config.validate()?;
        let IpaConfig { width, n_head: h, c, n_query_points: pq, n_point_values: pv, .. } = *config;
        let merged = h * c + h * pv * 3 + h * pv;
        Ok(IpaLayer {
            query: LinearLayer::new(store, &format!("{name}.q"), width, h * c, rng),
            key: LinearLayer::new(store, &format!("{name}.k"), width, h * c, rng),
            value: LinearLayer::new(store, &format!("{name}.v"), width, h * c, rng),
            query_points: LinearLayer::new(store, &format!("{name}.q_pts"), width, h * pq * 3, rng),
            key_points: LinearLayer::new(store, &format!("{name}.k_pts"), width, h * pq * 3, rng),
            value_points: LinearLayer::new(store, &format!("{name}.v_pts"), width, h * pv * 3, rng),
            output: LinearLayer::new(store, &format!("{name}.out"), merged, width, rng),
            norm: LayerNormParams::new(store, &format!("{name}.ln"), width),
            config: config.clone(),
        })
    }

    /// Per-head scalar features `[b, n, h·c]` → `[b, h, n, c]`.
    fn heads(&self, tape: &mut Tape, x: Var, per_head: usize) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let x = tape.reshape(x, &[s[0], s[1], self.config.n_head, per_head])?;
        tape.permute(x, &[0, 2, 1, 3])
    }

    /// Global points for a point projection: `[b, h, n, points·3]`.
    fn global_points(&self, tape: &mut Tape, p: &Bound, f: Var, lin: &LinearLayer, frames: &Frames, points: usize) -> Result<Var> {
        let s = tape.shape(f).to_vec();
        let local = lin.forward(tape, p, f)?;
        let local = tape.reshape(local, &[s[0], s[1], self.config.n_head * points, 3])?;
        let global = frames.to_global(tape, local)?;
        let global = tape.reshape(global, &[s[0], s[1], self.config.n_head * points * 3])?;
        self.heads(tape, global, points * 3)
    }

    /// Attention logits `w_L·qᵢᵀkⱼ − w_c·Σ_p ‖gq_i,p − gk_j,p‖²`, shape `[b, h, n, n]`.
    pub fn attention_logits(&self, tape: &mut Tape, p: &Bound, f: Var, frames: &Frames) -> Result<Var> {
        let (w_l, w_c) = ipa_constants(&self.config)?;
        let (c, pq) = (self.config.c, self.config.n_query_points);
        let q = self.query.forward(tape, p, f)?;
        let q = self.heads(tape, q, c)?;
        let k = self.key.forward(tape, p, f)?;
        let k = self.heads(tape, k, c)?;
        let kt = tape.transpose(k)?;
        let qk = tape.matmul(q, kt)?;
        let qk = tape.scale(qk, w_l)?;

        let gq = self.global_points(tape, p, f, &self.query_points, frames, pq)?;
        let gk = self.global_points(tape, p, f, &self.key_points, frames, pq)?;
        let s = tape.shape(gq).to_vec();
        let (b, h, n) = (s[0], s[1], s[2]);
        // ‖a − b‖² = ‖a‖² + ‖b‖² − 2 a·b
        let sq = tape.square(gq)?;
        let nq = tape.sum_axis(sq, 3)?;
        let nq = tape.reshape(nq, &[b, h, n, 1])?;
        let sk = tape.square(gk)?;
        let nk = tape.sum_axis(sk, 3)?;
        let nk = tape.reshape(nk, &[b, h, 1, n])?;
        let gkt = tape.transpose(gk)?;
        let cross = tape.matmul(gq, gkt)?;
        let cross = tape.scale(cross, -2.0)?;
        let dist = tape.add(nq, nk)?;
        let dist = tape.add(dist, cross)?;
        let dist = tape.scale(dist, w_c)?;
        tape.sub(qk, dist)
    }

    /// Attention weights, softmax over all tokens (self included).
    pub fn attention(&self, tape: &mut Tape, p: &Bound, f: Var, frames: &Frames) -> Result<Var> {
        let logits = self.attention_logits(tape, p, f, frames)?;
        tape.softmax(logits, 3)
    }

    /// `f: [b, n, width]` → `LN(f + Linear(concat(o, o⃗, ‖o⃗‖)))`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, f: Var, frames: &Frames) -> Result<Var> {
        let s = tape.shape(f).to_vec();
        if s.len() != 3 || s[2] != self.config.width {
            return Err(shape(format!("ipa expects [batch, tokens, {}], got {s:?}", self.config.width)));
        }
        let (b, n) = (s[0], s[1]);
        let IpaConfig { n_head: h, c, n_point_values: pv, .. } = self.config;
        let attn = self.attention(tape, p, f, frames)?;

        let v = self.value.forward(tape, p, f)?;
        let v = self.heads(tape, v, c)?;
        let o = tape.matmul(attn, v)?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[b, n, h * c])?;

        let gv = self.global_points(tape, p, f, &self.value_points, frames, pv)?;
        let agg = tape.matmul(attn, gv)?;
        let agg = tape.permute(agg, &[0, 2, 1, 3])?;
        let agg = tape.reshape(agg, &[b, n, h * pv, 3])?;
        let local = frames.to_local(tape, agg)?;
        let sq = tape.square(local)?;
        let norm = tape.sum_axis(sq, 3)?;
        let norm = tape.shift(norm, POINT_NORM_EPS)?;
        let norm = tape.sqrt(norm)?;
        let local = tape.reshape(local, &[b, n, h * pv * 3])?;

        let merged = tape.concat(&[o, local, norm], 2)?;
        let update = self.output.forward(tape, p, merged)?;
        let x = tape.add(f, update)?;
        self.norm.forward(tape, p, x)
    }
}

/// Architecture of the full model (parameter handles only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub ipa: IpaConfig,
    /// Width of the raw observation feature vectors.
    pub obs_feature_dim: usize,
    /// Number of learnable action feature vectors (maximum action tokens).
    pub n_actions: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.ipa.validate()?;
        if self.obs_feature_dim == 0 || self.n_actions == 0 {
            return Err(invalid("model config: obs_feature_dim and n_actions must be positive"));
        }
        if self.ipa.width % 2 != 0 {
            return Err(invalid("model config: width must be even for the time embedding"));
        }
        Ok(())
    }
}

/// Observation encoder, action feature vectors, time embedding,
/// `n_ipa_layers × (IPA → encoder)` and the 6-vector head.
#[derive(Clone, Debug)]
pub struct InvariantTransformer {
    pub config: ModelConfig,
    pub obs_encoder: LinearLayer,
    pub action_features: ParamId,
    pub time: TimeEmbedding,
    pub ipa_layers: Vec<IpaLayer>,
    pub encoders: Vec<EncoderBlock>,
    pub head: LinearLayer,
}

impl InvariantTransformer {
    /// Random initialization with a zero vector head.
    pub fn new(store: &mut ParamStore, config: &ModelConfig, rng: &mut RandomStream) -> Result<Self> {
        config.validate()?;
        let w = config.ipa.width;
        let obs_encoder = LinearLayer::new(store, "obs_encoder", config.obs_feature_dim, w, rng);
        let action_features = store.add(
            "action_features",
            crate::net::uniform(rng, &[config.n_actions, w], 1.0),
        );
        let time = TimeEmbedding::new(store, "time", w, w, rng)?;
        let mut ipa_layers = Vec::new();
        let mut encoders = Vec::new();
        for l in 0..config.ipa.n_ipa_layers {
            ipa_layers.push(IpaLayer::new(store, &format!("layers.{l}.ipa"), &config.ipa, rng)?);
            encoders.push(EncoderBlock::new(
                store,
                &format!("layers.{l}.encoder"),
                w,
                config.ipa.n_head,
                config.ipa.ffn_hidden,
                rng,
            )?);
        }
        let head = LinearLayer::zeros(store, "head", w, 6);
        Ok(InvariantTransformer { config: config.clone(), obs_encoder, action_features, time, ipa_layers, encoders, head })
    }

    /// Replaces the zero head with random weights (`U(±1/√width)`).
    pub fn randomize_head(&self, store: &mut ParamStore, rng: &mut RandomStream) {
        let w = self.config.ipa.width;
        *store.get_mut(self.head.weight) = crate::net::uniform(rng, &[6, w], 1.0 / (w as f64).sqrt());
        *store.get_mut(self.head.bias) = crate::net::uniform(rng, &[6], 0.1);
    }

    /// Batched forward over token sets sharing one observation/action layout.
    ///
    /// Returns `[batch, n_actions_in_set, 6]`; per action token the first three
    /// entries are the translation velocity and the last three the rotation
    /// velocity, both in the token's own frame.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &[TokenSet], ts: &[f64]) -> Result<Var> {
        let first = batch.first().ok_or_else(|| invalid("empty batch"))?;
        if ts.len() != batch.len() {
            return Err(invalid("one time value per token set is required"));
        }
        let n_obs = first.num_observations();
        let n_act = first.num_actions();
        if n_act == 0 {
            return Err(invalid("token set has no action tokens"));
        }
        if n_act > self.config.n_actions {
            return Err(invalid(format!(
                "{n_act} action tokens exceed the {} learned action features",
                self.config.n_actions
            )));
        }
        let b = batch.len();
        let w = self.config.ipa.width;
        let dim = self.config.obs_feature_dim;

        let mut poses = Vec::with_capacity(b);
        let mut obs_data = Vec::with_capacity(b * n_obs * dim);
        for set in batch {
            if set.num_observations() != n_obs || set.num_actions() != n_act {
                return Err(shape("all token sets in a batch need the same layout"));
            }
            let mut ordered: Vec<Pose> = Vec::with_capacity(set.len());
            for tok in set.observations() {
                if tok.feature.len() != dim {
                    return Err(shape(format!(
                        "observation feature has width {}, expected {dim}",
                        tok.feature.len()
                    )));
                }
                obs_data.extend_from_slice(&tok.feature);
                ordered.push(tok.pose);
            }
            ordered.extend(set.actions().map(|t| t.pose));
            poses.push(ordered);
        }
        let frames = Frames::new(tape, &poses)?;

        let act = tape.narrow(p.var(self.action_features), 0, 0, n_act)?;
        let zeros = tape.constant(Tensor::zeros(&[b, n_act, w]));
        let act = tape.add(zeros, act)?;
        let mut x = if n_obs > 0 {
            let raw = tape.constant(Tensor::new(vec![b, n_obs, dim], obs_data)?);
            let enc = self.obs_encoder.forward(tape, p, raw)?;
            tape.concat(&[enc, act], 1)?
        } else {
            act
        };

        let te = self.time.forward(tape, p, ts)?;
        let te = tape.reshape(te, &[b, 1, w])?;
        x = tape.add(x, te)?;

        for (ipa, enc) in self.ipa_layers.iter().zip(&self.encoders) {
            x = ipa.forward(tape, p, x, &frames)?;
            x = enc.forward(tape, p, x)?;
        }
        let x = tape.narrow(x, 1, n_obs, n_act)?;
        self.head.forward(tape, p, x)
    }
}

/// Per-action-token velocity pair produced by the transformer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Velocity {
    pub translation: nalgebra::Vector3<f64>,
    pub rotation: crate::lie::AxisAngle,
}

/// Splits a `[.., 6]` output into per-token velocities.
pub fn velocities(out: &Tensor) -> Vec<Velocity> {
    out.data()
        .chunks_exact(6)
        .map(|v| Velocity {
            translation: nalgebra::Vector3::new(v[0], v[1], v[2]),
            rotation: crate::lie::AxisAngle::new(v[3], v[4], v[5]),
        })
        .collect()
}

/// Single-set convenience wrapper around [`InvariantTransformer::forward`].
pub fn invariant_transformer_forward(
    model: &InvariantTransformer,
    store: &ParamStore,
    tokens: &TokenSet,
    t: f64,
) -> Result<Vec<Velocity>> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let out = model.forward(&mut tape, &p, std::slice::from_ref(tokens), &[t])?;
    Ok(velocities(tape.value(out)))
}

#[cfg(test)]
mod tests;
