//! Multilayer perceptron split into a shared backbone and an output head.
//!
//! Parameters live in flat [`ParamStore`] vectors. A [`Layout`] maps every
//! (layer, weight/bias, row, col) coordinate to a flat index: weights are
//! stored row-major as `fan_out x fan_in` followed by the `fan_out` biases,
//! layer after layer. Gradients are exact reverse-mode derivatives, computed
//! on row-batched inputs so the heavy lifting is a handful of GEMM calls.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    /// No nonlinearity; only useful for tests of the linear algebra.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Shape of a Q-network: `input -> hidden_dims (backbone) -> head_hidden_dims -> output`.
///
/// The backbone applies the activation after every layer. The head applies it
/// after its hidden layers and leaves the final (q-value) layer linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub head_hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl NetSpec {
    /// Default shape: two backbone layers of 64 and one head hidden layer of 64.
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        NetSpec {
            input_dim,
            hidden_dims: vec![64, 64],
            head_hidden_dims: vec![64],
            output_dim,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidConfig("net dims must be >= 1".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::InvalidConfig("hidden_dims must be non-empty".into()));
        }
        if self.hidden_dims.iter().chain(&self.head_hidden_dims).any(|&d| d == 0) {
            return Err(Error::InvalidConfig("hidden dims must be >= 1".into()));
        }
        Ok(())
    }

    /// Width of the backbone output (the feature vector heads consume).
    pub fn feature_dim(&self) -> usize {
        *self.hidden_dims.last().expect("validated spec")
    }

    pub fn backbone_layout(&self) -> Layout {
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(&self.hidden_dims);
        Layout::from_dims(&dims)
    }

    pub fn head_layout(&self) -> Layout {
        let mut dims = vec![self.feature_dim()];
        dims.extend_from_slice(&self.head_hidden_dims);
        dims.push(self.output_dim);
        Layout::from_dims(&dims)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
}

impl LayerShape {
    fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    fn bias_offset(&self) -> usize {
        self.offset + self.weight_len()
    }

    fn len(&self) -> usize {
        self.weight_len() + self.fan_out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight { row: usize, col: usize },
    Bias { row: usize },
}

/// Deterministic mapping from layer coordinates to flat indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub layers: Vec<LayerShape>,
    len: usize,
}

impl Layout {
    pub fn from_dims(dims: &[usize]) -> Self {
        let mut offset = 0;
        let layers = dims
            .windows(2)
            .map(|w| {
                let l = LayerShape {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += l.len();
                l
            })
            .collect();
        Layout {
            layers,
            len: offset,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn index(&self, layer: usize, kind: ParamKind) -> Option<usize> {
        let l = self.layers.get(layer)?;
        match kind {
            ParamKind::Weight { row, col } if row < l.fan_out && col < l.fan_in => {
                Some(l.offset + row * l.fan_in + col)
            }
            ParamKind::Bias { row } if row < l.fan_out => Some(l.bias_offset() + row),
            _ => None,
        }
    }

    /// Split a flat store into per-layer `(weight, bias)` pairs.
    pub fn unflatten(&self, store: &ParamStore) -> Result<Vec<(Array2<f64>, Array1<f64>)>> {
        check_dim("unflatten", self.len, store.len())?;
        Ok(self
            .layers
            .iter()
            .map(|l| (weight_view(l, &store.values).to_owned(), bias_view(l, &store.values).to_owned()))
            .collect())
    }

    pub fn flatten(&self, layers: &[(Array2<f64>, Array1<f64>)]) -> Result<ParamStore> {
        check_dim("flatten layers", self.layers.len(), layers.len())?;
        let mut values = Vec::with_capacity(self.len);
        for (shape, (w, b)) in self.layers.iter().zip(layers) {
            check_dim("flatten weight rows", shape.fan_out, w.nrows())?;
            check_dim("flatten weight cols", shape.fan_in, w.ncols())?;
            check_dim("flatten bias", shape.fan_out, b.len())?;
            values.extend(w.iter());
            values.extend(b.iter());
        }
        Ok(ParamStore { values })
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut values = Vec::with_capacity(self.len);
        for l in &self.layers {
            let bound = 1.0 / (l.fan_in as f64).sqrt();
            for _ in 0..l.len() {
                values.push(rng.gen_range(-bound..=bound));
            }
        }
        ParamStore { values }
    }
}

fn weight_view<'a>(l: &LayerShape, values: &'a [f64]) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((l.fan_out, l.fan_in), &values[l.offset..l.bias_offset()])
        .expect("layout slice matches shape")
}

fn bias_view<'a>(l: &LayerShape, values: &'a [f64]) -> ArrayView1<'a, f64> {
    ArrayView1::from(&values[l.bias_offset()..l.bias_offset() + l.fan_out])
}

/// Flat parameter (or gradient) vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    values: Vec<f64>,
}

impl ParamStore {
    pub fn zeros(len: usize) -> Self {
        ParamStore {
            values: vec![0.0; len],
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamStore { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// Value-equal copy with independent storage.
    pub fn copy_params(&self) -> ParamStore {
        self.clone()
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ParamStore, scale: f64) -> Result<()> {
        check_dim("add_scaled", self.len(), other.len())?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|x| *x *= s);
    }

    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn l2_distance(&self, other: &ParamStore) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// SHA-256 over the little-endian bit patterns of the values.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Activations recorded by a forward pass, consumed by the matching backward pass.
#[derive(Clone, Debug)]
pub struct SegmentCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

/// Forward one segment (backbone or head) over a batch of rows.
pub fn segment_forward(
    layout: &Layout,
    params: &ParamStore,
    x: Array2<f64>,
    act: Activation,
    activate_last: bool,
) -> (Array2<f64>, SegmentCache) {
    let n = layout.layers.len();
    let mut cache = SegmentCache {
        inputs: Vec::with_capacity(n),
        pre: Vec::with_capacity(n),
    };
    let mut h = x;
    for (i, l) in layout.layers.iter().enumerate() {
        let mut z = h.dot(&weight_view(l, &params.values).t());
        z += &bias_view(l, &params.values);
        let out = if i + 1 < n || activate_last {
            z.mapv(|v| act.apply(v))
        } else {
            z.clone()
        };
        cache.inputs.push(h);
        cache.pre.push(z);
        h = out;
    }
    (h, cache)
}

/// Inference-only forward; skips the cache.
pub fn segment_infer(
    layout: &Layout,
    params: &ParamStore,
    x: ArrayView2<f64>,
    act: Activation,
    activate_last: bool,
) -> Array2<f64> {
    let n = layout.layers.len();
    let mut h: Option<Array2<f64>> = None;
    for (i, l) in layout.layers.iter().enumerate() {
        let mut z = match &h {
            Some(prev) => prev.dot(&weight_view(l, &params.values).t()),
            None => x.dot(&weight_view(l, &params.values).t()),
        };
        z += &bias_view(l, &params.values);
        if i + 1 < n || activate_last {
            z.mapv_inplace(|v| act.apply(v));
        }
        h = Some(z);
    }
    h.unwrap_or_else(|| x.to_owned())
}

/// Backward through one segment, accumulating parameter gradients into `grads`.
/// Returns the gradient with respect to the segment input when `want_input_grad`.
pub fn segment_backward(
    layout: &Layout,
    params: &ParamStore,
    cache: &SegmentCache,
    upstream: Array2<f64>,
    act: Activation,
    activate_last: bool,
    grads: &mut ParamStore,
    want_input_grad: bool,
) -> Option<Array2<f64>> {
    let n = layout.layers.len();
    let mut g = upstream;
    for i in (0..n).rev() {
        let l = &layout.layers[i];
        if i + 1 < n || activate_last {
            g.zip_mut_with(&cache.pre[i], |gv, &z| *gv *= act.derivative(z));
        }
        let (wg, rest) = grads.values[l.offset..].split_at_mut(l.weight_len());
        let mut wg = ArrayViewMut2::from_shape((l.fan_out, l.fan_in), wg).expect("layout");
        general_mat_mul(1.0, &g.t(), &cache.inputs[i], 1.0, &mut wg);
        for (b, s) in rest[..l.fan_out].iter_mut().zip(g.sum_axis(Axis(0)).iter()) {
            *b += s;
        }
        if i > 0 || want_input_grad {
            g = g.dot(&weight_view(l, &params.values));
        } else {
            return None;
        }
    }
    Some(g)
}

/// Cache for a full backbone + head pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    backbone: SegmentCache,
    head: SegmentCache,
}

fn check_stores(spec: &NetSpec, backbone: &ParamStore, head: &ParamStore) -> Result<()> {
    check_dim("backbone params", spec.backbone_layout().len(), backbone.len())?;
    check_dim("head params", spec.head_layout().len(), head.len())
}

/// Backbone features for a batch of inputs (inference only).
pub fn features_batch(spec: &NetSpec, backbone: &ParamStore, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_dim("input", spec.input_dim, inputs.ncols())?;
    check_dim("backbone params", spec.backbone_layout().len(), backbone.len())?;
    Ok(segment_infer(&spec.backbone_layout(), backbone, inputs, spec.activation, true))
}

/// Q-values from precomputed backbone features (inference only).
pub fn head_batch(spec: &NetSpec, head: &ParamStore, features: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_dim("features", spec.feature_dim(), features.ncols())?;
    check_dim("head params", spec.head_layout().len(), head.len())?;
    Ok(segment_infer(&spec.head_layout(), head, features, spec.activation, false))
}

/// Batched inference: one row of q-values per input row.
pub fn infer_batch(
    spec: &NetSpec,
    backbone: &ParamStore,
    head: &ParamStore,
    inputs: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    check_stores(spec, backbone, head)?;
    let f = features_batch(spec, backbone, inputs)?;
    head_batch(spec, head, f.view())
}

/// Batched forward pass recording activations for [`backward_batch`].
pub fn forward_batch(
    spec: &NetSpec,
    backbone: &ParamStore,
    head: &ParamStore,
    inputs: Array2<f64>,
) -> Result<(Array2<f64>, ForwardCache)> {
    check_dim("input", spec.input_dim, inputs.ncols())?;
    check_stores(spec, backbone, head)?;
    let (f, bc) = segment_forward(&spec.backbone_layout(), backbone, inputs, spec.activation, true);
    let (q, hc) = segment_forward(&spec.head_layout(), head, f, spec.activation, false);
    Ok((q, ForwardCache { backbone: bc, head: hc }))
}

/// Accumulate `d(sum(upstream .* output)) / d params` into the gradient stores.
/// Either gradient target may be `None` to skip it (a frozen segment).
pub fn backward_batch(
    spec: &NetSpec,
    backbone: &ParamStore,
    head: &ParamStore,
    cache: &ForwardCache,
    upstream: Array2<f64>,
    grad_backbone: Option<&mut ParamStore>,
    grad_head: &mut ParamStore,
) -> Result<()> {
    check_dim("upstream", spec.output_dim, upstream.ncols())?;
    check_dim("grad head", head.len(), grad_head.len())?;
    let want = grad_backbone.is_some();
    let gf = segment_backward(
        &spec.head_layout(),
        head,
        &cache.head,
        upstream,
        spec.activation,
        false,
        grad_head,
        want,
    );
    if let (Some(gb), Some(gf)) = (grad_backbone, gf) {
        check_dim("grad backbone", backbone.len(), gb.len())?;
        segment_backward(
            &spec.backbone_layout(),
            backbone,
            &cache.backbone,
            gf,
            spec.activation,
            true,
            gb,
            false,
        );
    }
    Ok(())
}

/// Q-values for a single input vector.
pub fn forward(spec: &NetSpec, backbone: &ParamStore, head: &ParamStore, input: &[f64]) -> Result<Vec<f64>> {
    check_dim("input", spec.input_dim, input.len())?;
    let x = ArrayView2::from_shape((1, input.len()), input).expect("row");
    Ok(infer_batch(spec, backbone, head, x)?.into_raw_vec_and_offset().0)
}

/// Exact gradient of `upstream . forward(input)` with respect to both stores.
pub fn backward(
    spec: &NetSpec,
    backbone: &ParamStore,
    head: &ParamStore,
    input: &[f64],
    upstream: &[f64],
) -> Result<(ParamStore, ParamStore)> {
    check_dim("input", spec.input_dim, input.len())?;
    check_dim("upstream", spec.output_dim, upstream.len())?;
    let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row");
    let (_, cache) = forward_batch(spec, backbone, head, x)?;
    let mut gb = ParamStore::zeros(backbone.len());
    let mut gh = ParamStore::zeros(head.len());
    let up = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec()).expect("row");
    backward_batch(spec, backbone, head, &cache, up, Some(&mut gb), &mut gh)?;
    Ok((gb, gh))
}

/// Adam moments and hyperparameters for one parameter store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptState {
    pub fn new(len: usize, lr: f64) -> Self {
        OptState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step, in place.
pub fn optimizer_step(params: &mut ParamStore, grads: &ParamStore, state: &mut OptState) -> Result<()> {
    check_dim("optimizer grads", params.len(), grads.len())?;
    check_dim("optimizer moments", params.len(), state.first_moment.len())?;
    check_dim("optimizer moments", params.len(), state.second_moment.len())?;
    if grads.values.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("optimizer gradient"));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (((p, &g), m), v) in params
        .values
        .iter_mut()
        .zip(&grads.values)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= state.lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

/// Rescale a set of gradient stores so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut ParamStore], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

/// Portable text checkpoint of a single network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub spec: NetSpec,
    pub backbone: ParamStore,
    pub head: ParamStore,
}

impl NetCheckpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: NetCheckpoint = serde_json::from_str(s)?;
        ck.spec.validate()?;
        check_stores(&ck.spec, &ck.backbone, &ck.head)?;
        Ok(ck)
    }
}
