//! Learnable building blocks on top of [`crate::autodiff`]: linear layers,
//! multi-head self-attention, pre-norm transformer encoder blocks, sinusoidal
//! time embedding and the Adam optimizer.
//!
//! Parameters live in a [`ParamStore`]; layers only hold [`ParamId`]s. A
//! forward pass first binds the store onto a tape ([`ParamStore::bind`]) and
//! then threads the resulting [`Bound`] handle through every layer.

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{invalid, shape, Error, Result};
use crate::lie::RandomStream;

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Values may change in place; shapes must not.
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.tensors.iter_mut().map(Tensor::data_mut)
    }

    /// Replaces every tensor by position, checking names and shapes.
    pub fn load(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(Error::Format(format!(
                    "tensor {i}: expected {} {:?}, found {name} {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }

    /// Puts every parameter on `tape`, as gradient-receiving leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// Bound parameters substituted from an explicit list (same order as the store).
    pub fn bind_from(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.tensors.len() {
            return Err(invalid("bind_from: wrong number of vars"));
        }
        Ok(Bound { vars: vars.to_vec() })
    }
}

/// A [`ParamStore`] bound onto one tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Collects per-parameter gradients in store order (zeros where none flowed).
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v, tape.shape(v))).collect()
    }
}

pub(crate) fn uniform(rng: &mut RandomStream, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}

/// `y = x·Wᵀ + b` over the last axis.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    /// Weights `U(−1/√in, 1/√in)`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut RandomStream) -> Self {
        let w = uniform(rng, &[out_dim, in_dim], 1.0 / (in_dim as f64).sqrt());
        Self::with_weight(store, name, w)
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::with_weight(store, name, Tensor::zeros(&[out_dim, in_dim]))
    }

    fn with_weight(store: &mut ParamStore, name: &str, w: Tensor) -> Self {
        let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        LinearLayer { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let last = tape.shape(x).last().copied();
        if last != Some(self.in_dim) {
            return Err(shape(format!(
                "linear layer expects last dim {}, got shape {:?}",
                self.in_dim,
                tape.shape(x)
            )));
        }
        let wt = tape.transpose(p.var(self.weight))?;
        let y = tape.matmul(x, wt)?;
        tape.add(y, p.var(self.bias))
    }

    pub fn zero_out(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNormParams {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layernorm(x, p.var(self.gain), p.var(self.bias), LAYERNORM_EPS)
    }
}

/// Multi-head scaled dot-product self-attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
    pub output: LinearLayer,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut RandomStream) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(invalid(format!("{heads} heads do not divide width {width}")));
        }
        Ok(MultiHeadAttention {
            query: LinearLayer::new(store, &format!("{name}.q"), width, width, rng),
            key: LinearLayer::new(store, &format!("{name}.k"), width, width, rng),
            value: LinearLayer::new(store, &format!("{name}.v"), width, width, rng),
            output: LinearLayer::new(store, &format!("{name}.o"), width, width, rng),
            heads,
            width,
        })
    }

    /// `x: [batch, tokens, width]` → (output, attention weights `[batch, heads, tokens, tokens]`).
    pub fn forward_with_weights(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.width {
            return Err(shape(format!("attention expects [batch, tokens, {}], got {s:?}", self.width)));
        }
        let (b, n) = (s[0], s[1]);
        let (h, dh) = (self.heads, self.width / self.heads);
        let split = |tape: &mut Tape, v: Var| -> Result<Var> {
            let v = tape.reshape(v, &[b, n, h, dh])?;
            tape.permute(v, &[0, 2, 1, 3])
        };
        let q = self.query.forward(tape, p, x)?;
        let q = split(tape, q)?;
        let k = self.key.forward(tape, p, x)?;
        let k = split(tape, k)?;
        let v = self.value.forward(tape, p, x)?;
        let v = split(tape, v)?;

        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = tape.softmax(scores, 3)?;
        let o = tape.matmul(attn, v)?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[b, n, self.width])?;
        Ok((self.output.forward(tape, p, o)?, attn))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, p, x)?.0)
    }
}

/// Pre-norm transformer encoder block:
/// `x ← x + MHA(LN(x))`, then `x ← x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNormParams,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNormParams,
    pub ffn_in: LinearLayer,
    pub ffn_out: LinearLayer,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        hidden: usize,
        rng: &mut RandomStream,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            norm1: LayerNormParams::new(store, &format!("{name}.ln1"), width),
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng)?,
            norm2: LayerNormParams::new(store, &format!("{name}.ln2"), width),
            ffn_in: LinearLayer::new(store, &format!("{name}.ffn1"), width, hidden, rng),
            ffn_out: LinearLayer::new(store, &format!("{name}.ffn2"), hidden, width, rng),
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let h = self.attention.forward(tape, p, h)?;
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, p, x)?;
        let h = self.ffn_in.forward(tape, p, h)?;
        let h = tape.gelu(h)?;
        let h = self.ffn_out.forward(tape, p, h)?;
        tape.add(x, h)
    }

    /// Zeroes both residual-branch output projections, making the block the identity.
    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        self.attention.output.zero_out(store);
        self.ffn_out.zero_out(store);
    }
}

/// Sinusoidal features of `t ∈ [0, 1]` followed by a learned projection.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub frequencies: Vec<f64>,
    pub projection: LinearLayer,
}

/// Highest angular frequency of the sinusoidal table.
pub const TIME_MAX_FREQUENCY: f64 = 50.0;

impl TimeEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, out_dim: usize, rng: &mut RandomStream) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(invalid(format!("time embedding dimension must be even, got {dim}")));
        }
        let half = dim / 2;
        let frequencies = (0..half)
            .map(|i| {
                let frac = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
                TIME_MAX_FREQUENCY.powf(frac)
            })
            .collect();
        Ok(TimeEmbedding { frequencies, projection: LinearLayer::new(store, &format!("{name}.proj"), dim, out_dim, rng) })
    }

    pub fn dim(&self) -> usize {
        2 * self.frequencies.len()
    }

    /// Raw `[sin(ωt)…, cos(ωt)…]` features, shape `[ts.len(), dim]`.
    pub fn features(&self, ts: &[f64]) -> Result<Tensor> {
        if ts.is_empty() {
            return Err(invalid("time embedding of zero timesteps"));
        }
        let mut data = Vec::with_capacity(ts.len() * self.dim());
        for &t in ts {
            if !(0.0..=1.0).contains(&t) {
                return Err(invalid(format!("time {t} outside [0, 1]")));
            }
            data.extend(self.frequencies.iter().map(|w| (w * t).sin()));
            data.extend(self.frequencies.iter().map(|w| (w * t).cos()));
        }
        Tensor::new(vec![ts.len(), self.dim()], data)
    }

    /// Projected embedding, shape `[ts.len(), out_dim]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, ts: &[f64]) -> Result<Var> {
        let f = tape.constant(self.features(ts)?);
        self.projection.forward(tape, p, f)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            v: store.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(invalid("Adam: gradient count does not match parameters"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let param = store.get_mut(ParamId(i)).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..param.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                param[j] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions};
    use crate::lie::stream;

    fn input(shape: &[usize], seed: u64) -> Tensor {
        uniform(&mut stream(seed), shape, 2.0)
    }

    fn with_params<F>(store: &ParamStore, x: &Tensor, body: F) -> crate::autodiff::GradCheckReport
    where
        F: Fn(&mut Tape, &Bound, Var) -> Result<Var>,
    {
        let mut all = store.tensors().to_vec();
        all.push(x.clone());
        grad_check(
            |tape, vars| {
                let bound = store.bind_from(&vars[..vars.len() - 1])?;
                let y = body(tape, &bound, vars[vars.len() - 1])?;
                let y = tape.tanh(y)?;
                tape.sum(y)
            },
            &all,
            &GradCheckOptions { max_probes_per_param: Some(12), ..Default::default() },
        )
        .unwrap()
    }

    #[test]
    fn linear_identity_and_zero_weight() {
        let mut store = ParamStore::new();
        let mut rng = stream(0);
        let lin = LinearLayer::new(&mut store, "l", 3, 3, &mut rng);
        let eye = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        *store.get_mut(lin.weight) = eye;
        let x = input(&[2, 3], 1);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let vx = tape.constant(x.clone());
        let y = lin.forward(&mut tape, &p, vx).unwrap();
        assert_eq!(tape.value(y), &x);

        let mut store = ParamStore::new();
        let lin = LinearLayer::zeros(&mut store, "z", 3, 2);
        store.get_mut(lin.bias).data_mut().copy_from_slice(&[0.5, -1.5]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let vx = tape.constant(x);
        let y = lin.forward(&mut tape, &p, vx).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.5, 0.5, -1.5]);

        let bad = tape.constant(input(&[2, 4], 2));
        assert!(matches!(lin.forward(&mut tape, &p, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_gradients() {
        let mut store = ParamStore::new();
        let lin = LinearLayer::new(&mut store, "l", 4, 3, &mut stream(3));
        store.get_mut(lin.bias).data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
        let r = with_params(&store, &input(&[2, 5, 4], 4), |tape, p, x| lin.forward(tape, p, x));
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn attention_single_token_is_value_projection() {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut stream(5)).unwrap();
        let x = input(&[1, 1, 8], 6);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let vx = tape.constant(x);
        let y = mha.forward(&mut tape, &p, vx).unwrap();
        let v = mha.value.forward(&mut tape, &p, vx).unwrap();
        let expect = mha.output.forward(&mut tape, &p, v).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(expect)) < 1e-14);
    }

    #[test]
    fn attention_symmetry_and_row_sums() {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 4, &mut stream(7)).unwrap();
        let tok = input(&[1, 1, 8], 8);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let a = tape.constant(tok);
        let x = tape.concat(&[a, a], 1).unwrap();
        let (y, w) = mha.forward_with_weights(&mut tape, &p, x).unwrap();
        let d = tape.value(y).data();
        assert_eq!(&d[..8], &d[8..]);

        let x = tape.constant(input(&[2, 5, 8], 9));
        let (_, w2) = mha.forward_with_weights(&mut tape, &p, x).unwrap();
        for attn in [w, w2] {
            let vals = tape.value(attn).data();
            let n = *tape.shape(attn).last().unwrap();
            for row in vals.chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(MultiHeadAttention::new(&mut store, "b", 8, 3, &mut stream(0)).is_err());
    }

    #[test]
    fn encoder_zero_projections_is_identity() {
        let mut store = ParamStore::new();
        let block = EncoderBlock::new(&mut store, "e", 8, 2, 16, &mut stream(10)).unwrap();
        block.zero_output_projections(&mut store);
        let x = input(&[2, 3, 8], 11);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let vx = tape.constant(x.clone());
        let y = block.forward(&mut tape, &p, vx).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let mut store = ParamStore::new();
        let block = EncoderBlock::new(&mut store, "e", 8, 2, 16, &mut stream(12)).unwrap();
        let x = input(&[1, 4, 8], 13);
        let perm = [2, 0, 3, 1];
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let vx = tape.constant(x);
        let y = block.forward(&mut tape, &p, vx).unwrap();
        let xp = tape.select(vx, 1, &perm).unwrap();
        let yp = block.forward(&mut tape, &p, xp).unwrap();
        let y_then_p = tape.select(y, 1, &perm).unwrap();
        assert!(tape.value(yp).max_abs_diff(tape.value(y_then_p)) < 1e-13);
    }

    #[test]
    fn encoder_gradients() {
        let mut store = ParamStore::new();
        let block = EncoderBlock::new(&mut store, "e", 8, 2, 16, &mut stream(14)).unwrap();
        let r = with_params(&store, &input(&[2, 3, 8], 15), |tape, p, x| block.forward(tape, p, x));
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn time_embedding_properties() {
        let mut store = ParamStore::new();
        let emb = TimeEmbedding::new(&mut store, "t", 32, 32, &mut stream(16)).unwrap();
        let eval = |ts: &[f64]| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let e = emb.forward(&mut tape, &p, ts).unwrap();
            tape.value(e).clone()
        };
        assert_eq!(eval(&[0.3]), eval(&[0.3]));

        let e = eval(&[0.0, 1.0]);
        let (a, b) = e.data().split_at(32);
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(1.0 - dot / (na * nb) > 0.1);

        let mut rng = stream(17);
        for _ in 0..50 {
            let t: f64 = rng.random_range(0.0..1.0 - 1e-4);
            let e = eval(&[t, t + 1e-4]);
            let (a, b) = e.data().split_at(32);
            let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(d < 1e-2, "t={t}: step {d}");
        }

        assert!(emb.features(&[1.5]).is_err());
        assert!(TimeEmbedding::new(&mut store, "u", 7, 4, &mut stream(0)).is_err());
    }

    #[test]
    fn adam_zero_learning_rate_and_descent() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, -2.0]));
        let before = store.clone();
        let mut adam = Adam::new(&store, 0.0);
        adam.step(&mut store, &[Tensor::vector(vec![0.5, 0.5])]).unwrap();
        assert_eq!(store, before);

        let mut adam = Adam::new(&store, 0.1);
        for _ in 0..200 {
            let g = Tensor::vector(store.get(id).data().iter().map(|w| 2.0 * w).collect());
            adam.step(&mut store, &[g]).unwrap();
        }
        assert!(store.get(id).data().iter().all(|w| w.abs() < 0.05));
    }
}
