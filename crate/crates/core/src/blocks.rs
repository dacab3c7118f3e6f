//! Named parameter store, initializers and the learnable blocks shared by
//! the teacher and student: convolutions, channel normalization, gated
//! conditional modulation, and the sinusoidal time / position encodings.

use std::collections::HashMap;

use crate::numerics::{lit, Scalar, Tape, TensorData, TensorId};
use crate::rng::SeedTree;
use crate::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named collection of model parameters.
///
/// Models are wired as structs of `ParamId`s; every training step binds the
/// store onto a fresh tape and the forward code addresses parameters through
/// the resulting [`BoundParams`].
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<TensorData<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: TensorData<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name '{}'",
            name
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &TensorData<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut TensorData<T> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorData<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Replaces a value, keeping shape.
    pub fn set(&mut self, id: ParamId, value: TensorData<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!(
                    "parameter '{}' has shape {:?}, got {:?}",
                    self.names[id.0],
                    self.values[id.0].shape(),
                    value.shape()
                ),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Binds every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> BoundParams<'t, T> {
        let ids = self.values.iter().map(|v| tape.leaf(v.clone(), requires_grad)).collect();
        BoundParams { tape, ids }
    }

    /// Precision cast, preserving names and order (f64 checkpoints -> f32).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast::<U>()).collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameters materialized as tape leaves for one forward/backward pass.
pub struct BoundParams<'t, T: Scalar> {
    pub tape: &'t Tape<T>,
    ids: Vec<TensorId>,
}

impl<'t, T: Scalar> BoundParams<'t, T> {
    /// Wraps externally prepared leaf ids; order must match the store.
    pub fn from_raw(tape: &'t Tape<T>, ids: Vec<TensorId>) -> Self {
        Self { tape, ids }
    }

    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }

    pub fn grad_of(&self, p: ParamId) -> Option<TensorData<T>> {
        self.tape.grad(self.ids[p.0])
    }
}

/// Initializer handing out seeded parameter tensors; every parameter's draw
/// depends only on the root seed and its own name.
pub struct Init<'s, T: Scalar> {
    pub store: &'s mut ParamStore<T>,
    pub seeds: SeedTree,
}

impl<'s, T: Scalar> Init<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, seeds: SeedTree) -> Self {
        Self { store, seeds }
    }

    /// He-normal weights: std = sqrt(2 / fan_in).
    pub fn he(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let mut rng = self.seeds.stream("init", &[fnv(name)]);
        let std = (2.0 / fan_in as f64).sqrt();
        let t = TensorData::from_fn(shape, |_| {
            lit::<T>(std * crate::rng::draw_standard_normal(&mut rng))
        });
        self.store.add(name, t)
    }

    /// Small-normal weights for embeddings and readouts.
    pub fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64) -> ParamId {
        let mut rng = self.seeds.stream("init", &[fnv(name)]);
        let t = TensorData::from_fn(shape, |_| {
            lit::<T>(std * crate::rng::draw_standard_normal(&mut rng))
        });
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        self.store.add(name, TensorData::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        self.store.add(name, TensorData::full(shape, T::one()))
    }
}

fn fnv(name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// A convolution layer's parameters plus geometry.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// 3x3 same-padding convolution.
    pub fn same3x3<T: Scalar>(init: &mut Init<T>, name: &str, cin: usize, cout: usize) -> Self {
        let w = init.he(&format!("{name}.w"), vec![3, 3, cin, cout], 9 * cin);
        let b = init.zeros(&format!("{name}.b"), vec![cout]);
        Self { w, b, stride: 1, pad: 1 }
    }

    /// 1x1 pointwise convolution.
    pub fn pointwise<T: Scalar>(init: &mut Init<T>, name: &str, cin: usize, cout: usize) -> Self {
        let w = init.he(&format!("{name}.w"), vec![1, 1, cin, cout], cin);
        let b = init.zeros(&format!("{name}.b"), vec![cout]);
        Self { w, b, stride: 1, pad: 0 }
    }

    /// Zero-initialized variant, used where identity-at-init is required.
    pub fn zeroed<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
    ) -> Self {
        let w = init.zeros(&format!("{name}.w"), vec![kh, kw, cin, cout]);
        let b = init.zeros(&format!("{name}.b"), vec![cout]);
        Self { w, b, stride: 1, pad: (kh - 1) / 2 }
    }

    pub fn apply<T: Scalar>(&self, p: &BoundParams<T>, x: TensorId) -> Result<TensorId> {
        p.tape.conv2d(x, p.id(self.w), p.id(self.b), self.stride, self.pad)
    }
}

/// Linear layer parameters.
#[derive(Debug, Clone, Copy)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearLayer {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, cin: usize, cout: usize) -> Self {
        let w = init.he(&format!("{name}.w"), vec![cin, cout], cin);
        let b = init.zeros(&format!("{name}.b"), vec![cout]);
        Self { w, b }
    }

    pub fn apply<T: Scalar>(&self, p: &BoundParams<T>, x: TensorId) -> Result<TensorId> {
        p.tape.linear(x, p.id(self.w), p.id(self.b))
    }
}

/// Per-channel zero-mean unit-variance normalization over spatial positions
/// with a learned affine.
#[derive(Debug, Clone, Copy)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const NORM_EPS: f64 = 1e-5;

impl ChannelNorm {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: init.ones(&format!("{name}.gamma"), vec![c]),
            beta: init.zeros(&format!("{name}.beta"), vec![c]),
        }
    }

    pub fn apply<T: Scalar>(&self, p: &BoundParams<T>, x: TensorId) -> Result<TensorId> {
        let tape = p.tape;
        let mu = tape.mean_prefix(x, 2)?;
        let centered = tape.sub(x, mu)?;
        let sq = tape.mul(centered, centered)?;
        let var = tape.mean_prefix(sq, 2)?;
        let std = tape.sqrt(tape.add_scalar(var, NORM_EPS));
        let normed = tape.div(centered, std)?;
        let scaled = tape.mul(normed, p.id(self.gamma))?;
        tape.add(scaled, p.id(self.beta))
    }
}

/// Gated Conditional Modulation block.
///
/// The condition passes through two 3x3 convolutions producing 3C channels
/// split into shift b, scale s and gate g; the backbone feature is updated as
/// `x + sigmoid(g) * (s * norm(x) + b)` and the condition through its own
/// update convolution. The final condition convolution is zero-initialized,
/// which makes a fresh block an exact identity on x.
#[derive(Debug, Clone, Copy)]
pub struct GcmBlock {
    pub cond_a: Conv2d,
    pub cond_b: Conv2d,
    pub cond_update: Conv2d,
    pub norm: ChannelNorm,
}

impl GcmBlock {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, c: usize) -> Self {
        Self {
            cond_a: Conv2d::same3x3(init, &format!("{name}.cond_a"), c, c),
            cond_b: Conv2d::zeroed(init, &format!("{name}.cond_b"), 3, 3, c, 3 * c),
            cond_update: Conv2d::same3x3(init, &format!("{name}.cond_update"), c, c),
            norm: ChannelNorm::new(init, &format!("{name}.norm"), c),
        }
    }

    /// Returns `(x_next, c_next)`.
    pub fn apply<T: Scalar>(
        &self,
        p: &BoundParams<T>,
        x: TensorId,
        c: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        let tape = p.tape;
        let channels = *tape.shape_of(x).last().expect("rank-3 feature map");
        let hidden = tape.relu(self.cond_a.apply(p, c)?);
        let bsg = self.cond_b.apply(p, hidden)?;
        let shift = tape.slice_last(bsg, 0, channels)?;
        let scale = tape.slice_last(bsg, channels, 2 * channels)?;
        let gate = tape.sigmoid(tape.slice_last(bsg, 2 * channels, 3 * channels)?);
        let normed = self.norm.apply(p, x)?;
        let modulated = tape.add(tape.mul(scale, normed)?, shift)?;
        let x_next = tape.add(x, tape.mul(gate, modulated)?)?;
        let c_next = tape.relu(self.cond_update.apply(p, c)?);
        Ok((x_next, c_next))
    }
}

/// Sinusoidal timestep embedding projected to C channels.
#[derive(Debug, Clone, Copy)]
pub struct TimeEmbed {
    pub proj: LinearLayer,
    pub c: usize,
}

impl TimeEmbed {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, c: usize) -> Self {
        Self { proj: LinearLayer::new(init, name, c, c), c }
    }

    /// `gamma(t)` as a `1 x C` row ready for channel-broadcast addition.
    pub fn embed<T: Scalar>(&self, p: &BoundParams<T>, t: usize) -> Result<TensorId> {
        let raw = sinusoid_features::<T>(t as f64, self.c);
        let row = p.tape.constant(raw.reshaped(vec![1, self.c])?);
        let projected = self.proj.apply(p, row)?;
        p.tape.reshape(projected, vec![self.c])
    }
}

/// Interleaved sin/cos features with geometric frequencies.
fn sinusoid_features<T: Scalar>(value: f64, c: usize) -> TensorData<T> {
    TensorData::from_fn(vec![c], |i| {
        let pair = (i / 2) as f64;
        let denom = 10_000f64.powf(2.0 * pair / c as f64);
        let angle = value / denom;
        lit::<T>(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// 2-D sinusoidal positional encoding over an `h x w` token grid, `c`
/// channels (first half from the column coordinate, second from the row).
pub fn positional_encoding_2d<T: Scalar>(h: usize, w: usize, c: usize) -> TensorData<T> {
    assert!(c % 2 == 0, "positional encoding needs an even channel count");
    let half = c / 2;
    let mut data = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            let col = sinusoid_features::<T>(j as f64, half);
            let row = sinusoid_features::<T>(i as f64, half);
            data.extend_from_slice(col.data());
            data.extend_from_slice(row.data());
        }
    }
    TensorData::new(vec![h * w, c], data).expect("posenc shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ParamStore<f64>, SeedTree) {
        (ParamStore::new(), SeedTree::new(7))
    }

    #[test]
    fn gcm_zero_init_is_exact_identity() {
        let (mut store, seeds) = setup();
        let mut init = Init::new(&mut store, seeds);
        let block = GcmBlock::new(&mut init, "gcm", 4);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = tape.constant(TensorData::from_fn(vec![5, 5, 4], |i| (i as f64 * 0.13).sin()));
        let c = tape.constant(TensorData::from_fn(vec![5, 5, 4], |i| (i as f64 * 0.29).cos()));
        let (x_next, _) = block.apply(&p, x, c).unwrap();
        for (a, b) in tape.value(x_next).data().iter().zip(tape.value(x).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gcm_gradients_match_finite_differences() {
        // Random-valued parameters (not the zero init) so every path is live.
        let x = TensorData::from_fn(vec![4, 4, 3], |i| (i as f64 * 0.17).sin());
        let c = TensorData::from_fn(vec![4, 4, 3], |i| (i as f64 * 0.07).cos());
        let wa = TensorData::from_fn(vec![3, 3, 3, 3], |i| 0.2 * ((i * 31 % 17) as f64 / 17.0 - 0.5));
        let wb = TensorData::from_fn(vec![3, 3, 3, 9], |i| 0.2 * ((i * 13 % 23) as f64 / 23.0 - 0.5));
        let gamma = TensorData::from_fn(vec![3], |i| 1.0 + 0.1 * i as f64);
        let err = crate::numerics::gradcheck::finite_diff_check(
            &[x, c, wa, wb, gamma],
            |tape, ids| {
                let zeros3 = tape.constant(TensorData::zeros(vec![3]));
                let zeros9 = tape.constant(TensorData::zeros(vec![9]));
                let beta = tape.constant(TensorData::zeros(vec![3]));
                let hidden = tape.relu(tape.conv2d(ids[1], ids[2], zeros3, 1, 1).unwrap());
                let bsg = tape.conv2d(hidden, ids[3], zeros9, 1, 1).unwrap();
                let shift = tape.slice_last(bsg, 0, 3).unwrap();
                let scale = tape.slice_last(bsg, 3, 6).unwrap();
                let gate = tape.sigmoid(tape.slice_last(bsg, 6, 9).unwrap());
                let mu = tape.mean_prefix(ids[0], 2).unwrap();
                let centered = tape.sub(ids[0], mu).unwrap();
                let var = tape.mean_prefix(tape.mul(centered, centered).unwrap(), 2).unwrap();
                let std = tape.sqrt(tape.add_scalar(var, NORM_EPS));
                let normed = tape.div(centered, std).unwrap();
                let normed = tape.add(tape.mul(normed, ids[4]).unwrap(), beta).unwrap();
                let modulated = tape.add(tape.mul(scale, normed).unwrap(), shift).unwrap();
                let x_next = tape.add(ids[0], tape.mul(gate, modulated).unwrap()).unwrap();
                let sq = tape.mul(x_next, x_next).unwrap();
                tape.mean(sq)
            },
            crate::numerics::gradcheck::DEFAULT_STEP,
        );
        assert!(err < 1e-4, "gcm gradient error {}", err);
    }

    #[test]
    fn channel_norm_standardizes_each_channel() {
        let (mut store, seeds) = setup();
        let mut init = Init::new(&mut store, seeds);
        let norm = ChannelNorm::new(&mut init, "n", 2);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = tape.constant(TensorData::from_fn(vec![6, 6, 2], |i| {
            if i % 2 == 0 { (i as f64).sin() * 3.0 + 5.0 } else { (i as f64).cos() }
        }));
        let y = norm.apply(&p, x).unwrap();
        let v = tape.value(y);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..36).map(|k| v.data()[k * 2 + ch]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / 36.0;
            let var: f64 = vals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 36.0;
            assert!(mean.abs() < 1e-12, "channel {} mean {}", ch, mean);
            assert!((var - 1.0).abs() < 1e-3, "channel {} var {}", ch, var);
        }
    }

    #[test]
    fn time_embedding_distinguishes_timesteps() {
        let (mut store, seeds) = setup();
        let mut init = Init::new(&mut store, seeds);
        let emb = TimeEmbed::new(&mut init, "t", 8);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let mut seen: Vec<Vec<f64>> = Vec::new();
        for t in 1..=10 {
            let e = emb.embed(&p, t).unwrap();
            let v = tape.value(e).data().to_vec();
            for (prev_t, prev) in seen.iter().enumerate() {
                let dist: f64 = v.iter().zip(prev.iter()).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(dist > 1e-9, "t={} collides with t={}", t, prev_t + 1);
            }
            seen.push(v);
        }
    }

    #[test]
    fn param_store_bind_and_grad_roundtrip() {
        let (mut store, seeds) = setup();
        let mut init = Init::new(&mut store, seeds);
        let lin = LinearLayer::new(&mut init, "lin", 3, 2);
        let tape = Tape::new();
        let p = store.bind(&tape, true);
        let x = tape.constant(TensorData::from_fn(vec![4, 3], |i| i as f64 * 0.1));
        let y = lin.apply(&p, x).unwrap();
        let loss = tape.mean(tape.mul(y, y).unwrap());
        tape.backward(loss).unwrap();
        assert!(p.grad_of(lin.w).is_some());
        assert!(p.grad_of(lin.b).is_some());
    }

    #[test]
    fn initialization_is_deterministic_per_name() {
        let mut s1 = ParamStore::<f64>::new();
        let mut i1 = Init::new(&mut s1, SeedTree::new(5));
        let a = i1.he("layer.w", vec![4, 4], 4);
        let mut s2 = ParamStore::<f64>::new();
        let mut i2 = Init::new(&mut s2, SeedTree::new(5));
        let b = i2.he("layer.w", vec![4, 4], 4);
        assert_eq!(s1.value(a).data(), s2.value(b).data());
    }
}
