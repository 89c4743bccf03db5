//! Parameter-prediction network.
//!
//! Each scale has its own point encoder: a per-point MLP (`3 -> 64 -> 128 ->
//! 256 -> 512` by default, rectified after every layer) followed by a
//! component-wise max over the patch points. The per-scale features are
//! concatenated. From that vector, every scale owns one `sigma_d` head and
//! one `sigma_n` head (`K*512 -> 256 -> 64 -> 1`), and a fusion stack (`K*512
//! -> 64 -> K`) produces softmax weights over scales. Raw head outputs pass
//! through `softplus(x) + 1e-4` and the final bandwidths are the
//! fusion-weighted sums over scales.
//!
//! Gradients are derived by hand for this fixed architecture.

mod dense;
mod format;

pub use dense::Dense;

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::filter::FilterParams;
use crate::patch::MultiScalePatch;
use crate::seed::rng_for;

/// Lower bound added to every predicted bandwidth.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

impl Activation {
    pub(crate) fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub scales: usize,
    pub patch_size: usize,
    pub encoder_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub fusion_widths: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    pub const ENCODER_WIDTHS: [usize; 4] = [64, 128, 256, 512];
    pub const HEAD_WIDTHS: [usize; 2] = [256, 64];
    pub const FUSION_WIDTHS: [usize; 1] = [64];

    /// Default layer widths for `scales` scales of `patch_size` points.
    pub fn standard(scales: usize, patch_size: usize) -> Self {
        Self {
            scales,
            patch_size,
            encoder_widths: Self::ENCODER_WIDTHS.to_vec(),
            head_widths: Self::HEAD_WIDTHS.to_vec(),
            fusion_widths: Self::FUSION_WIDTHS.to_vec(),
            activation: Activation::Relu,
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.encoder_widths.last().unwrap_or(&3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.patch_size == 0 || self.encoder_widths.is_empty() {
            return Err(Error::Config(
                "architecture needs at least one scale, one point and one encoder layer".into(),
            ));
        }
        let widths = self
            .encoder_widths
            .iter()
            .chain(&self.head_widths)
            .chain(&self.fusion_widths);
        if widths.into_iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    fn stack(input: usize, hidden: &[usize], output: Option<usize>) -> Vec<(usize, usize)> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.extend(output);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn encoder_shapes(&self) -> Vec<(usize, usize)> {
        Self::stack(3, &self.encoder_widths, None)
    }

    fn head_shapes(&self) -> Vec<(usize, usize)> {
        Self::stack(self.scales * self.feature_dim(), &self.head_widths, Some(1))
    }

    fn fusion_shapes(&self) -> Vec<(usize, usize)> {
        Self::stack(
            self.scales * self.feature_dim(),
            &self.fusion_widths,
            Some(self.scales),
        )
    }
}

/// Trainable weights of the network plus its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct LbfModel {
    arch: Architecture,
    encoders: Vec<Vec<Dense>>,
    sigma_d_heads: Vec<Vec<Dense>>,
    sigma_n_heads: Vec<Vec<Dense>>,
    fusion: Vec<Dense>,
}

/// Per-layer gradients in the model's declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(model: &LbfModel) -> Self {
        Self {
            layers: model
                .layers()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.axpy(1.0, b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.scale(factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
    }
}

/// Detailed output of the decoder for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub params: FilterParams,
    /// Positive per-scale `(sigma_d, sigma_n)` before weighting.
    pub per_scale: Vec<(f64, f64)>,
    /// Softmax fusion weights, summing to one.
    pub weights: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_inverse(y: f64) -> f64 {
    // log(exp(y) - 1), stable for large y
    y + (-(-y).exp_m1()).ln()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl LbfModel {
    /// Glorot-uniform weights, zero biases, seeded.
    pub fn new_random(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_for(seed, &[0x1bf]);
        let mut make = |shapes: Vec<(usize, usize)>| -> Vec<Dense> {
            shapes
                .into_iter()
                .map(|(i, o)| {
                    let limit = (6.0 / (i + o) as f64).sqrt();
                    let mut d = Dense::zeros(i, o);
                    for w in &mut d.weight {
                        *w = rng.random_range(-limit..limit);
                    }
                    d
                })
                .collect()
        };
        let encoders = (0..arch.scales)
            .map(|_| make(arch.encoder_shapes()))
            .collect();
        let sigma_d_heads = (0..arch.scales).map(|_| make(arch.head_shapes())).collect();
        let sigma_n_heads = (0..arch.scales).map(|_| make(arch.head_shapes())).collect();
        let fusion = make(arch.fusion_shapes());
        Ok(Self {
            arch,
            encoders,
            sigma_d_heads,
            sigma_n_heads,
            fusion,
        })
    }

    /// A model whose output is `(sigma_d, sigma_n)` for every patch: the last
    /// layer of every head has zero weights and a bias that maps to the
    /// requested value.
    pub fn constant(arch: Architecture, sigma_d: f64, sigma_n: f64) -> Result<Self> {
        if !(sigma_d > SIGMA_FLOOR && sigma_n > SIGMA_FLOOR) {
            return Err(Error::InvalidValue(format!(
                "constant bandwidths must exceed {SIGMA_FLOOR}"
            )));
        }
        let mut model = Self::new_random(arch, 0)?;
        let pin = |heads: &mut Vec<Vec<Dense>>, value: f64| {
            for head in heads {
                let last = head.last_mut().expect("heads have an output layer");
                last.weight.iter_mut().for_each(|w| *w = 0.0);
                last.bias[0] = softplus_inverse(value - SIGMA_FLOOR);
            }
        };
        pin(&mut model.sigma_d_heads, sigma_d);
        pin(&mut model.sigma_n_heads, sigma_n);
        Ok(model)
    }

    /// Assembles a model from layers in declaration order.
    pub fn from_layers(arch: Architecture, layers: Vec<Dense>) -> Result<Self> {
        arch.validate()?;
        let mut it = layers.into_iter();
        let mut take = |shapes: Vec<(usize, usize)>| -> Result<Vec<Dense>> {
            shapes
                .into_iter()
                .map(|(i, o)| {
                    let l = it
                        .next()
                        .ok_or_else(|| Error::ConfigMismatch("too few layers".into()))?;
                    if (l.inputs, l.outputs) != (i, o) {
                        return Err(Error::ConfigMismatch(format!(
                            "layer is {}x{}, expected {i}x{o}",
                            l.inputs, l.outputs
                        )));
                    }
                    Ok(l)
                })
                .collect()
        };
        let encoders = (0..arch.scales)
            .map(|_| take(arch.encoder_shapes()))
            .collect::<Result<_>>()?;
        let sigma_d_heads = (0..arch.scales)
            .map(|_| take(arch.head_shapes()))
            .collect::<Result<_>>()?;
        let sigma_n_heads = (0..arch.scales)
            .map(|_| take(arch.head_shapes()))
            .collect::<Result<_>>()?;
        let fusion = take(arch.fusion_shapes())?;
        if it.next().is_some() {
            return Err(Error::ConfigMismatch("too many layers".into()));
        }
        Ok(Self {
            arch,
            encoders,
            sigma_d_heads,
            sigma_n_heads,
            fusion,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    /// All layers in declaration order: encoders, sigma_d heads, sigma_n
    /// heads, fusion.
    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoders
            .iter()
            .flatten()
            .chain(self.sigma_d_heads.iter().flatten())
            .chain(self.sigma_n_heads.iter().flatten())
            .chain(&self.fusion)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoders
            .iter_mut()
            .flatten()
            .chain(self.sigma_d_heads.iter_mut().flatten())
            .chain(self.sigma_n_heads.iter_mut().flatten())
            .chain(&mut self.fusion)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().map(Dense::parameter_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers().all(Dense::is_finite)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        format::decode(bytes)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| crate::io::with_path(e, path))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| crate::io::with_path(e, path))?)
    }

    /// Checks that a patch has this model's scale count and size.
    pub fn check_patch(&self, patch: &MultiScalePatch) -> Result<()> {
        if patch.num_scales() != self.arch.scales {
            return Err(Error::ConfigMismatch(format!(
                "patch has {} scales, model expects {}",
                patch.num_scales(),
                self.arch.scales
            )));
        }
        if patch.scales.iter().any(|s| s.len() != self.arch.patch_size) {
            return Err(Error::ConfigMismatch(format!(
                "patch size differs from the model's {}",
                self.arch.patch_size
            )));
        }
        Ok(())
    }

    /// Max-pooled feature of one scale.
    pub fn encode_scale(
        &self,
        k: usize,
        points: &[Vector3<f64>],
        valid_count: usize,
    ) -> Result<Vec<f64>> {
        Ok(self.encode_cached(k, points, valid_count)?.feature)
    }

    fn encode_cached(
        &self,
        k: usize,
        points: &[Vector3<f64>],
        valid_count: usize,
    ) -> Result<EncoderCache> {
        if k >= self.arch.scales
            || points.len() != self.arch.patch_size
            || valid_count > points.len()
        {
            return Err(Error::ConfigMismatch(format!(
                "scale {k} with {} points ({valid_count} valid) does not fit the model",
                points.len()
            )));
        }
        // Identical origin padding rows give identical activations, so only
        // the first one is evaluated; max-pooling is unaffected.
        let mut rows: Vec<f64> = Vec::with_capacity(3 * (valid_count + 1));
        let mut zero_seen = false;
        for (i, p) in points.iter().enumerate() {
            let is_zero = *p == Vector3::zeros();
            if i >= valid_count && is_zero {
                if zero_seen {
                    continue;
                }
                zero_seen = true;
            }
            rows.extend_from_slice(&[p.x, p.y, p.z]);
        }
        let n = rows.len() / 3;
        let mut activations = Vec::with_capacity(self.encoders[k].len() + 1);
        activations.push(rows);
        for layer in &self.encoders[k] {
            let mut out = layer.forward_batch(activations.last().expect("input"), n);
            out.iter_mut().for_each(|v| *v = v.max(0.0));
            activations.push(out);
        }
        let last = activations.last().expect("output");
        let width = self.arch.feature_dim();
        let mut feature = vec![f64::NEG_INFINITY; width];
        let mut argmax = vec![0usize; width];
        for r in 0..n {
            let row = &last[r * width..(r + 1) * width];
            for (f, &v) in row.iter().enumerate() {
                if v > feature[f] {
                    feature[f] = v;
                    argmax[f] = r;
                }
            }
        }
        Ok(EncoderCache {
            rows: n,
            activations,
            argmax,
            feature,
        })
    }

    /// Fused bandwidths from per-scale features.
    pub fn fuse_and_decode(&self, features: &[Vec<f64>]) -> Result<Decoded> {
        Ok(self.decode_cached(features)?.decoded)
    }

    fn decode_cached(&self, features: &[Vec<f64>]) -> Result<DecoderCache> {
        let width = self.arch.feature_dim();
        if features.len() != self.arch.scales || features.iter().any(|f| f.len() != width) {
            return Err(Error::ConfigMismatch(format!(
                "expected {} features of width {width}",
                self.arch.scales
            )));
        }
        let concat: Vec<f64> = features.concat();
        let run = |stack: &[Dense]| -> Vec<Vec<f64>> {
            let mut acts = vec![concat.clone()];
            for (li, layer) in stack.iter().enumerate() {
                let mut out = layer.forward_vec(acts.last().expect("input"));
                if li + 1 < stack.len() {
                    out.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                acts.push(out);
            }
            acts
        };
        let heads_d: Vec<Vec<Vec<f64>>> = self.sigma_d_heads.iter().map(|h| run(h)).collect();
        let heads_n: Vec<Vec<Vec<f64>>> = self.sigma_n_heads.iter().map(|h| run(h)).collect();
        let fusion = run(&self.fusion);
        let raw_d: Vec<f64> = heads_d.iter().map(|a| a.last().expect("out")[0]).collect();
        let raw_n: Vec<f64> = heads_n.iter().map(|a| a.last().expect("out")[0]).collect();
        let weights = softmax(fusion.last().expect("out"));
        let per_scale: Vec<(f64, f64)> = raw_d
            .iter()
            .zip(&raw_n)
            .map(|(&d, &n)| (softplus(d) + SIGMA_FLOOR, softplus(n) + SIGMA_FLOOR))
            .collect();
        let sigma_d = weights.iter().zip(&per_scale).map(|(w, s)| w * s.0).sum();
        let sigma_n = weights.iter().zip(&per_scale).map(|(w, s)| w * s.1).sum();
        Ok(DecoderCache {
            heads_d,
            heads_n,
            fusion,
            raw_d,
            raw_n,
            decoded: Decoded {
                params: FilterParams { sigma_d, sigma_n },
                per_scale,
                weights,
            },
        })
    }

    /// Predicted bandwidths (canonical units) for a patch.
    pub fn forward(&self, patch: &MultiScalePatch) -> Result<FilterParams> {
        let mut ev = Evaluator::new(self);
        ev.forward(patch)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationPattern {
    active: Vec<bool>,
    winners: Vec<usize>,
}

#[derive(Debug, Clone)]
struct EncoderCache {
    rows: usize,
    /// Post-activation values per layer; index 0 is the input rows.
    activations: Vec<Vec<f64>>,
    argmax: Vec<usize>,
    feature: Vec<f64>,
}

#[derive(Debug, Clone)]
struct DecoderCache {
    heads_d: Vec<Vec<Vec<f64>>>,
    heads_n: Vec<Vec<Vec<f64>>>,
    fusion: Vec<Vec<f64>>,
    raw_d: Vec<f64>,
    raw_n: Vec<f64>,
    decoded: Decoded,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    encoders: Vec<EncoderCache>,
    decoder: DecoderCache,
}

/// Forward evaluation that keeps activations for a following backward pass.
/// One evaluator per thread; the model itself is shared read-only.
#[derive(Debug)]
pub struct Evaluator<'m> {
    model: &'m LbfModel,
    cache: Option<ForwardCache>,
}

impl<'m> Evaluator<'m> {
    pub fn new(model: &'m LbfModel) -> Self {
        Self { model, cache: None }
    }

    pub fn forward(&mut self, patch: &MultiScalePatch) -> Result<FilterParams> {
        Ok(self.forward_detailed(patch)?.params)
    }

    pub fn forward_detailed(&mut self, patch: &MultiScalePatch) -> Result<Decoded> {
        self.model.check_patch(patch)?;
        let encoders = (0..patch.num_scales())
            .map(|k| {
                self.model
                    .encode_cached(k, &patch.scales[k], patch.valid_counts[k])
            })
            .collect::<Result<Vec<_>>>()?;
        let features: Vec<Vec<f64>> = encoders.iter().map(|e| e.feature.clone()).collect();
        let decoder = self.model.decode_cached(&features)?;
        let decoded = decoder.decoded.clone();
        self.cache = Some(ForwardCache { encoders, decoder });
        Ok(decoded)
    }

    /// Rectifier on/off states and max-pool winners of the last forward pass.
    /// Two evaluations with equal patterns lie in the same smooth piece of
    /// the network, which is what finite-difference checks need.
    pub fn activation_pattern(&self) -> Option<ActivationPattern> {
        let cache = self.cache.as_ref()?;
        let mut active = Vec::new();
        let mut winners = Vec::new();
        for enc in &cache.encoders {
            for a in &enc.activations[1..] {
                active.extend(a.iter().map(|&v| v > 0.0));
            }
            winners.extend_from_slice(&enc.argmax);
        }
        let dec = &cache.decoder;
        for acts in dec
            .heads_d
            .iter()
            .chain(&dec.heads_n)
            .chain(std::iter::once(&dec.fusion))
        {
            for a in &acts[1..acts.len() - 1] {
                active.extend(a.iter().map(|&v| v > 0.0));
            }
        }
        Some(ActivationPattern { active, winners })
    }

    /// Gradients of `upstream[0] * sigma_d + upstream[1] * sigma_n` with
    /// respect to every weight, at the last forward input.
    #[allow(clippy::needless_range_loop)]
    pub fn backward(&self, upstream: [f64; 2]) -> Result<Gradients> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Usage("backward called before forward".into()))?;
        let model = self.model;
        let arch = &model.arch;
        let dec = &cache.decoder;
        let k_scales = arch.scales;
        let [g_d, g_n] = upstream;

        // Output = sum_k w_k * s_k with s_k = softplus(raw_k) + floor.
        let w = &dec.decoded.weights;
        let dl_dw: Vec<f64> = dec
            .decoded
            .per_scale
            .iter()
            .map(|&(sd, sn)| g_d * sd + g_n * sn)
            .collect();
        let mean: f64 = w.iter().zip(&dl_dw).map(|(a, b)| a * b).sum();
        let dl_dlogit: Vec<f64> = w
            .iter()
            .zip(&dl_dw)
            .map(|(wk, g)| wk * (g - mean))
            .collect();

        let concat_len = k_scales * arch.feature_dim();
        let mut d_concat = vec![0.0; concat_len];

        let back_stack =
            |stack: &[Dense], acts: &[Vec<f64>], d_out: Vec<f64>, d_concat: &mut [f64]| {
                let mut grads = Vec::with_capacity(stack.len());
                let mut delta = d_out;
                for li in (0..stack.len()).rev() {
                    let layer = &stack[li];
                    let input = &acts[li];
                    let mut g = Dense::zeros(layer.inputs, layer.outputs);
                    g.outer_accumulate(&delta, input);
                    let mut d_in = layer.backward_vec(&delta);
                    if li > 0 {
                        // rectifier on the layer below
                        for (d, &a) in d_in.iter_mut().zip(input) {
                            if a <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    } else {
                        for (c, d) in d_concat.iter_mut().zip(&d_in) {
                            *c += d;
                        }
                    }
                    delta = std::mem::take(&mut d_in);
                    grads.push(g);
                }
                grads.reverse();
                grads
            };

        let mut head_d_grads = Vec::with_capacity(k_scales);
        let mut head_n_grads = Vec::with_capacity(k_scales);
        for k in 0..k_scales {
            let d_raw_d = g_d * w[k] * sigmoid(dec.raw_d[k]);
            let d_raw_n = g_n * w[k] * sigmoid(dec.raw_n[k]);
            head_d_grads.push(back_stack(
                &model.sigma_d_heads[k],
                &dec.heads_d[k],
                vec![d_raw_d],
                &mut d_concat,
            ));
            head_n_grads.push(back_stack(
                &model.sigma_n_heads[k],
                &dec.heads_n[k],
                vec![d_raw_n],
                &mut d_concat,
            ));
        }
        let fusion_grads = back_stack(&model.fusion, &dec.fusion, dl_dlogit, &mut d_concat);

        let width = arch.feature_dim();
        let mut encoder_grads = Vec::with_capacity(k_scales);
        for k in 0..k_scales {
            let enc = &cache.encoders[k];
            let layers = &model.encoders[k];
            let n = enc.rows;
            let d_feat = &d_concat[k * width..(k + 1) * width];
            let mut delta = vec![0.0; n * width];
            for (f, &g) in d_feat.iter().enumerate() {
                delta[enc.argmax[f] * width + f] = g;
            }
            let mut grads = Vec::with_capacity(layers.len());
            for li in (0..layers.len()).rev() {
                let layer = &layers[li];
                let out = &enc.activations[li + 1];
                for (d, &a) in delta.iter_mut().zip(out) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
                let input = &enc.activations[li];
                let mut g = Dense::zeros(layer.inputs, layer.outputs);
                g.batch_outer_accumulate(&delta, input, n);
                if li > 0 {
                    delta = layer.backward_batch(&delta, n);
                }
                grads.push(g);
            }
            grads.reverse();
            encoder_grads.push(grads);
        }

        let layers = encoder_grads
            .into_iter()
            .flatten()
            .chain(head_d_grads.into_iter().flatten())
            .chain(head_n_grads.into_iter().flatten())
            .chain(fusion_grads)
            .collect();
        Ok(Gradients { layers })
    }
}
