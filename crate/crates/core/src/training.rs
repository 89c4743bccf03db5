//! Noise synthesis, training pairs, and the end-to-end training loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filter::{bilateral_displacement_with_gradient, canonical_normal, FilterParams};
use crate::geometry::{bbox_diagonal, PointCloud, SpatialIndex};
use crate::loss::{epsilon_p, total_loss, Denominator, LossBreakdown, LossTarget, LossWeights};
use crate::network::{Activation, ActivationPattern, Architecture, Evaluator, Gradients, LbfModel};
use crate::patch::{canonicalize_target, CleanPatch, MultiScalePatch, PatchSampler, ScaleSpec};
use crate::seed::{derive_seed, rng_for};

const NOISE_STREAM: u64 = 1;
const PATCH_STREAM: u64 = 2;
const EPOCH_STREAM: u64 = 3;
const INIT_STREAM: u64 = 4;

/// Largest noise level accepted, as a fraction of the bounding-box diagonal.
pub const MAX_NOISE_LEVEL: f64 = 0.015;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub noise_levels: Vec<f64>,
    pub scales: Vec<ScaleSpec>,
    pub patch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub eps_n_degrees: f64,
    pub seed: u64,
    /// Patches drawn per shape and epoch; `None` uses every point.
    pub patches_per_shape: Option<usize>,
    pub encoder_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub fusion_widths: Vec<usize>,
    pub denominator: Denominator,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            noise_levels: vec![0.005, 0.010, 0.015],
            scales: ScaleSpec::defaults(),
            patch_size: crate::patch::DEFAULT_PATCH_SIZE,
            lr: 1e-4,
            lr_decay: 0.1,
            decay_every: 5,
            epochs: 25,
            batch_size: 32,
            eta: 0.97,
            eps_n_degrees: 15.0,
            seed: 0,
            patches_per_shape: Some(1000),
            encoder_widths: Architecture::ENCODER_WIDTHS.to_vec(),
            head_widths: Architecture::HEAD_WIDTHS.to_vec(),
            fusion_widths: Architecture::FUSION_WIDTHS.to_vec(),
            denominator: Denominator::Filtered,
        }
    }
}

fn join<T: ToString>(values: &[T]) -> String {
    values
        .iter()
        .map(T::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}")))
        })
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            scales: self.scales.len(),
            patch_size: self.patch_size,
            encoder_widths: self.encoder_widths.clone(),
            head_widths: self.head_widths.clone(),
            fusion_widths: self.fusion_widths.clone(),
            activation: Activation::Relu,
        }
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        Ok(LossWeights::new(self.eta, self.eps_n_degrees)?.with_denominator(self.denominator))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            ));
        }
        if self.decay_every < 1 || self.batch_size < 1 {
            return bad("decay_every and batch_size must be at least 1".into());
        }
        if self.noise_levels.is_empty()
            || self
                .noise_levels
                .iter()
                .any(|&s| !(0.0..=MAX_NOISE_LEVEL).contains(&s))
        {
            return bad(format!(
                "noise levels must be a non-empty subset of [0, {MAX_NOISE_LEVEL}]"
            ));
        }
        if self.patches_per_shape == Some(0) {
            return bad("patches_per_shape must be positive".into());
        }
        crate::patch::validate_scales(&self.scales)?;
        self.loss_weights()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.architecture().validate()
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "noise_levels" => self.noise_levels = parse_list(key, value)?,
            "radius_fractions" => {
                self.scales = parse_list::<f64>(key, value)?
                    .into_iter()
                    .map(ScaleSpec::new)
                    .collect()
            }
            "patch_size" => self.patch_size = parse_one(key, value)?,
            "lr" => self.lr = parse_one(key, value)?,
            "lr_decay" => self.lr_decay = parse_one(key, value)?,
            "decay_every" => self.decay_every = parse_one(key, value)?,
            "epochs" => self.epochs = parse_one(key, value)?,
            "batch_size" => self.batch_size = parse_one(key, value)?,
            "eta" => self.eta = parse_one(key, value)?,
            "eps_n_degrees" => self.eps_n_degrees = parse_one(key, value)?,
            "seed" => self.seed = parse_one(key, value)?,
            "patches_per_shape" => {
                self.patches_per_shape = match value.trim() {
                    "all" => None,
                    v => Some(parse_one(key, v)?),
                }
            }
            "encoder_widths" => self.encoder_widths = parse_list(key, value)?,
            "head_widths" => self.head_widths = parse_list(key, value)?,
            "fusion_widths" => self.fusion_widths = parse_list(key, value)?,
            "denominator" => {
                self.denominator = match value.trim() {
                    "filtered" => Denominator::Filtered,
                    "center" => Denominator::Center,
                    v => return Err(Error::Config(format!("denominator: unknown variant {v:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let radii: Vec<f64> = self.scales.iter().map(|s| s.radius_fraction).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("noise_levels", join(&self.noise_levels));
        kv("radius_fractions", join(&radii));
        kv("patch_size", self.patch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_decay", self.lr_decay.to_string());
        kv("decay_every", self.decay_every.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("eta", self.eta.to_string());
        kv("eps_n_degrees", self.eps_n_degrees.to_string());
        kv("seed", self.seed.to_string());
        kv(
            "patches_per_shape",
            self.patches_per_shape
                .map_or_else(|| "all".to_string(), |n| n.to_string()),
        );
        kv("encoder_widths", join(&self.encoder_widths));
        kv("head_widths", join(&self.head_widths));
        kv("fusion_widths", join(&self.fusion_widths));
        kv(
            "denominator",
            match self.denominator {
                Denominator::Filtered => "filtered",
                Denominator::Center => "center",
            }
            .to_string(),
        );
        s
    }

    /// SHA-256 of every setting except `epochs`, so a run can be extended.
    pub fn hash(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("epochs="))
            .map(|l| format!("{l}\n"))
            .collect();
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        learning_rate(self.lr, self.lr_decay, self.decay_every, epoch)
    }
}

/// `lr0 * decay^floor(epoch / every)`, rounded to 12 significant digits so
/// that decimal schedules such as 1e-4 .. 1e-8 come out exact.
pub fn learning_rate(lr0: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    let raw = lr0 * decay.powi((epoch / every.max(1)) as i32);
    format!("{raw:.11e}").parse().unwrap_or(raw)
}

/// Independent zero-mean Gaussian noise on every coordinate with standard
/// deviation `sigma_fraction * bbox_diagonal(cloud)`. Normals are dropped.
pub fn add_gaussian_noise(
    cloud: &PointCloud,
    sigma_fraction: f64,
    seed: u64,
) -> Result<PointCloud> {
    if !(sigma_fraction >= 0.0 && sigma_fraction.is_finite()) {
        return Err(Error::InvalidValue(format!(
            "noise level must be non-negative, got {sigma_fraction}"
        )));
    }
    if sigma_fraction == 0.0 {
        return Ok(cloud.without_normals());
    }
    let sigma = sigma_fraction * bbox_diagonal(cloud)?;
    let mut rng = rng_for(seed, &[NOISE_STREAM]);
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            let mut q = *p;
            for c in q.coords.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *c += sigma * z;
            }
            q
        })
        .collect();
    PointCloud::new(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleKey {
    pub shape: usize,
    pub level: usize,
    pub point: usize,
}

/// A noisy multi-scale patch and its ground-truth counterpart in the same
/// canonical frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub key: SampleKey,
    pub patch: MultiScalePatch,
    pub clean: CleanPatch,
}

#[derive(Debug)]
struct NoisyCloud {
    cloud: PointCloud,
    index: SpatialIndex,
    patch_seed: u64,
}

#[derive(Debug)]
struct ShapeData {
    clean: PointCloud,
    clean_index: SpatialIndex,
    noisy: Vec<NoisyCloud>,
}

/// Noisy copies and spatial indices of every training shape.
#[derive(Debug)]
pub struct Dataset {
    scales: Vec<ScaleSpec>,
    patch_size: usize,
    seed: u64,
    shapes: Vec<ShapeData>,
}

pub fn build_dataset(shapes: &[PointCloud], cfg: &TrainConfig) -> Result<Dataset> {
    if shapes.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut data = Vec::with_capacity(shapes.len());
    for (s, shape) in shapes.iter().enumerate() {
        if shape.normals().is_none() {
            return Err(Error::MissingNormals(s));
        }
        let mut noisy = Vec::with_capacity(cfg.noise_levels.len());
        for (l, &level) in cfg.noise_levels.iter().enumerate() {
            let cloud = add_gaussian_noise(
                shape,
                level,
                derive_seed(cfg.seed, &[NOISE_STREAM, s as u64, l as u64]),
            )?;
            let index = SpatialIndex::build(&cloud)?;
            noisy.push(NoisyCloud {
                cloud,
                index,
                patch_seed: derive_seed(cfg.seed, &[PATCH_STREAM, s as u64, l as u64]),
            });
        }
        data.push(ShapeData {
            clean_index: SpatialIndex::build(shape)?,
            clean: shape.clone(),
            noisy,
        });
    }
    Ok(Dataset {
        scales: cfg.scales.clone(),
        patch_size: cfg.patch_size,
        seed: cfg.seed,
        shapes: data,
    })
}

impl Dataset {
    pub fn num_shapes(&self) -> usize {
        self.shapes.len()
    }

    /// Every (shape, level, point) triple in ascending order.
    pub fn keys(&self) -> Vec<SampleKey> {
        let mut keys = Vec::new();
        for (s, shape) in self.shapes.iter().enumerate() {
            keys.extend(self.shape_keys(s, shape));
        }
        keys
    }

    fn shape_keys(&self, s: usize, shape: &ShapeData) -> Vec<SampleKey> {
        let n = shape.clean.len();
        (0..shape.noisy.len())
            .flat_map(|l| {
                (0..n).map(move |p| SampleKey {
                    shape: s,
                    level: l,
                    point: p,
                })
            })
            .collect()
    }

    /// Keys used in `epoch`: at most `limit` per shape, drawn from the
    /// epoch's own stream, then shuffled.
    pub fn epoch_keys(&self, epoch: usize, limit: Option<usize>) -> Vec<SampleKey> {
        let mut rng = rng_for(self.seed, &[EPOCH_STREAM, epoch as u64]);
        let mut keys = Vec::new();
        for (s, shape) in self.shapes.iter().enumerate() {
            let all = self.shape_keys(s, shape);
            match limit {
                Some(m) if m < all.len() => {
                    let mut picked: Vec<SampleKey> =
                        rand::seq::index::sample(&mut rng, all.len(), m)
                            .into_iter()
                            .map(|i| all[i])
                            .collect();
                    picked.sort_unstable();
                    keys.extend(picked);
                }
                _ => keys.extend(all),
            }
        }
        keys.shuffle(&mut rng);
        keys
    }

    /// The training pair for `key`, or `None` where the noisy point has too
    /// few neighbors for a patch or target.
    pub fn sample(&self, key: SampleKey) -> Result<Option<TrainSample>> {
        let shape = &self.shapes[key.shape];
        let noisy = &shape.noisy[key.level];
        let sampler = PatchSampler::new(
            &noisy.cloud,
            &noisy.index,
            &self.scales,
            self.patch_size,
            noisy.patch_seed,
        )?;
        let built = sampler.extract(key.point).and_then(|patch| {
            let clean = canonicalize_target(&patch, &shape.clean, &shape.clean_index)?;
            Ok(TrainSample { key, patch, clean })
        });
        match built {
            Ok(s) => Ok(Some(s)),
            Err(Error::InsufficientNeighbors { .. } | Error::DegenerateGeometry(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// All samples in key order, skipping points without a usable patch.
    pub fn samples(&self) -> impl Iterator<Item = Result<TrainSample>> + '_ {
        self.keys()
            .into_iter()
            .filter_map(move |k| self.sample(k).transpose())
    }
}

/// `(d delta / d sigma_d, d delta / d sigma_n)` of the bilateral
/// displacement at the origin.
pub fn d_delta_p_d_sigmas(
    neighbors: &[Vector3<f64>],
    n_p: &Vector3<f64>,
    params: FilterParams,
) -> Result<(f64, f64)> {
    let g = bilateral_displacement_with_gradient(&Vector3::zeros(), neighbors, n_p, params)?;
    Ok((g.d_sigma_d, g.d_sigma_n))
}

/// Everything that selects a smooth piece of the chain: rectifier states,
/// max-pool winners, residual signs, the farthest target point and the
/// target point nearest the filtered point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmoothPiece {
    network: ActivationPattern,
    signs: Vec<i8>,
    farthest: usize,
    nearest: usize,
}

/// One sample pushed through network, filter and loss.
#[derive(Debug, Clone)]
pub struct ChainStep {
    pub params: FilterParams,
    pub delta: f64,
    pub p_bar: Vector3<f64>,
    pub loss: LossBreakdown,
    pub piece: SmoothPiece,
}

fn nearest_index(points: &[Vector3<f64>], p: &Vector3<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, q) in points.iter().enumerate() {
        let d = (q - p).norm_squared();
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

struct Forwarded<'m> {
    eval: Evaluator<'m>,
    step: ChainStep,
    normal: Vector3<f64>,
    d_sigma: (f64, f64),
}

fn chain_forward<'m>(
    model: &'m LbfModel,
    sample: &TrainSample,
    weights: &LossWeights,
) -> Result<Forwarded<'m>> {
    let mut eval = Evaluator::new(model);
    let params = eval.forward(&sample.patch)?;
    let patch = &sample.patch;
    let neighbors = patch.real_points(patch.largest_scale());
    let normal = canonical_normal(neighbors)?;
    let g = bilateral_displacement_with_gradient(&Vector3::zeros(), neighbors, &normal, params)?;
    let p_bar = normal * g.delta;

    let clean = sample.clean.largest();
    let center = nearest_index(&clean.points, &Vector3::zeros());
    let nearest = nearest_index(&clean.points, &p_bar);
    let target = LossTarget {
        points: &clean.points,
        normals: &clean.normals,
        n_center: clean.normals[center],
        center: clean.points[center],
        eps_p: epsilon_p(&clean.points, patch.valid_counts[patch.largest_scale()])?,
    };
    let loss = total_loss(&p_bar, &target, &clean.normals[nearest], weights)?;
    if !loss.total.is_finite() || !loss.d_total_d_point.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            shape: sample.key.shape,
            point: sample.key.point,
            detail: format!(
                "level {} sigma_d={} sigma_n={} delta={} p_bar={:?} valid={:?} loss={:?}",
                sample.key.level,
                params.sigma_d,
                params.sigma_n,
                g.delta,
                p_bar.as_slice(),
                patch.valid_counts,
                loss
            ),
        });
    }
    let signs = clean
        .points
        .iter()
        .zip(&clean.normals)
        .flat_map(|(q, n)| [(p_bar - q).dot(n), (p_bar - q).dot(&target.n_center)])
        .map(|s| s.partial_cmp(&0.0).map_or(0, |o| o as i8))
        .collect();
    let farthest = clean
        .points
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (j, q)| {
            let d = (p_bar - q).norm();
            if d > best.1 {
                (j, d)
            } else {
                best
            }
        })
        .0;
    let piece = SmoothPiece {
        network: eval.activation_pattern().expect("forward ran"),
        signs,
        farthest,
        nearest,
    };
    Ok(Forwarded {
        eval,
        step: ChainStep {
            params,
            delta: g.delta,
            p_bar,
            loss,
            piece,
        },
        normal,
        d_sigma: (g.d_sigma_d, g.d_sigma_n),
    })
}

/// Loss of one sample without gradients.
pub fn chain_loss(
    model: &LbfModel,
    sample: &TrainSample,
    weights: &LossWeights,
) -> Result<ChainStep> {
    Ok(chain_forward(model, sample, weights)?.step)
}

/// Loss of one sample and its gradient with respect to every model weight.
pub fn chain_gradient(
    model: &LbfModel,
    sample: &TrainSample,
    weights: &LossWeights,
) -> Result<(ChainStep, Gradients)> {
    let f = chain_forward(model, sample, weights)?;
    let dl_ddelta = f.step.loss.d_total_d_point.dot(&f.normal);
    let grads = f
        .eval
        .backward([dl_ddelta * f.d_sigma.0, dl_ddelta * f.d_sigma.1])?;
    Ok((f.step, grads))
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: u64,
    m: Gradients,
    v: Gradients,
}

const ADAM_MAGIC: &[u8; 4] = b"LBA1";

impl Adam {
    pub fn new(model: &LbfModel) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 0,
            m: Gradients::zeros_like(model),
            v: Gradients::zeros_like(model),
        }
    }

    pub fn step(&mut self, model: &mut LbfModel, grads: &Gradients, lr: f64) {
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        let layers = model
            .layers_mut()
            .zip(&grads.layers)
            .zip(self.m.layers.iter_mut().zip(self.v.layers.iter_mut()));
        for ((layer, g), (m, v)) in layers {
            let params = layer.weight.iter_mut().chain(layer.bias.iter_mut());
            let gs = g.weight.iter().chain(&g.bias);
            let ms = m.weight.iter_mut().chain(m.bias.iter_mut());
            let vs = v.weight.iter_mut().chain(v.bias.iter_mut());
            for (((p, &g), m), v) in params.zip(gs).zip(ms).zip(vs) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = ADAM_MAGIC.to_vec();
        out.extend_from_slice(&self.steps.to_le_bytes());
        for v in [self.beta1, self.beta2, self.epsilon] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.m.iter_values().chain(self.v.iter_values()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Restores a state saved for a model with the same layer shapes.
    pub fn from_bytes(model: &LbfModel, bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::ModelFormat(format!("optimizer state: {m}"));
        let n = model.parameter_count();
        if bytes.len() < 36 || &bytes[..4] != ADAM_MAGIC {
            return Err(bad("bad header"));
        }
        if bytes.len() != 36 + 16 * n {
            return Err(bad("size does not match the model"));
        }
        let f = |i: usize| f64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
        let mut state = Self::new(model);
        state.steps = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
        state.beta1 = f(12);
        state.beta2 = f(20);
        state.epsilon = f(28);
        let mut pos = 36;
        for g in [&mut state.m, &mut state.v] {
            for l in &mut g.layers {
                for x in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                    *x = f(pos);
                    pos += 8;
                }
            }
        }
        Ok(state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub samples: usize,
    pub skipped: usize,
}

/// Model, optimizer and progress after some number of completed epochs.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: LbfModel,
    pub optimizer: Adam,
    pub epochs_done: usize,
    pub config: TrainConfig,
    pub log: Vec<EpochLog>,
}

pub fn sidecar_path(model_path: &Path, ext: &str) -> PathBuf {
    let mut s = model_path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn metadata(&self) -> String {
        let mut s = String::from("format=lbf-checkpoint\n");
        let _ = writeln!(s, "epoch={}", self.epochs_done);
        let last_lr = self
            .epochs_done
            .checked_sub(1)
            .map(|e| self.config.learning_rate(e));
        let _ = writeln!(
            s,
            "last_lr={}",
            last_lr.map_or("none".into(), |v| v.to_string())
        );
        let _ = writeln!(s, "config_hash={}", self.config.hash());
        let _ = writeln!(s, "optimizer=adam");
        let _ = writeln!(s, "adam_beta1={}", self.optimizer.beta1);
        let _ = writeln!(s, "adam_beta2={}", self.optimizer.beta2);
        let _ = writeln!(s, "init=glorot_uniform");
        let _ = writeln!(
            s,
            "init_seed={}",
            derive_seed(self.config.seed, &[INIT_STREAM])
        );
        s.push_str(&self.config.to_text());
        for l in &self.log {
            let _ = writeln!(
                s,
                "loss.{}={} lr={} samples={} skipped={}",
                l.epoch, l.mean_loss, l.lr, l.samples, l.skipped
            );
        }
        s
    }

    /// Writes the model to `path`, metadata to `path.meta` and optimizer
    /// state to `path.adam`.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.model.save(path)?;
        std::fs::write(sidecar_path(path, "meta"), self.metadata())?;
        std::fs::write(sidecar_path(path, "adam"), self.optimizer.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model = LbfModel::load(path)?;
        let meta = std::fs::read_to_string(sidecar_path(path, "meta"))?;
        let optimizer = Adam::from_bytes(&model, &std::fs::read(sidecar_path(path, "adam"))?)?;
        let mut config = TrainConfig::default();
        let mut epochs_done = None;
        let mut hash = None;
        let mut log = Vec::new();
        for line in meta.lines() {
            let Some((k, v)) = line.split_once('=') else {
                continue;
            };
            if let Some(e) = k.strip_prefix("loss.") {
                log.push(parse_log_line(e, v)?);
                continue;
            }
            match k {
                "epoch" => epochs_done = Some(parse_one::<usize>(k, v)?),
                "config_hash" => hash = Some(v.to_string()),
                "format" | "last_lr" | "optimizer" | "adam_beta1" | "adam_beta2" | "init"
                | "init_seed" => {}
                _ => config.set(k, v)?,
            }
        }
        let epochs_done =
            epochs_done.ok_or_else(|| Error::Config("checkpoint has no epoch".into()))?;
        if hash.as_deref() != Some(config.hash().as_str()) {
            return Err(Error::ConfigMismatch(
                "checkpoint metadata hash does not match its settings".into(),
            ));
        }
        Ok(Self {
            model,
            optimizer,
            epochs_done,
            config,
            log,
        })
    }
}

fn parse_log_line(epoch: &str, rest: &str) -> Result<EpochLog> {
    let mut parts = rest.split_whitespace();
    let mean_loss = parse_one("loss", parts.next().unwrap_or(""))?;
    let mut log = EpochLog {
        epoch: parse_one("loss epoch", epoch)?,
        lr: 0.0,
        mean_loss,
        samples: 0,
        skipped: 0,
    };
    for p in parts {
        match p.split_once('=') {
            Some(("lr", v)) => log.lr = parse_one("lr", v)?,
            Some(("samples", v)) => log.samples = parse_one("samples", v)?,
            Some(("skipped", v)) => log.skipped = parse_one("skipped", v)?,
            _ => return Err(Error::Config(format!("bad loss entry {rest:?}"))),
        }
    }
    Ok(log)
}

/// Samples summed sequentially inside a group; groups are then summed in
/// order, which keeps results independent of the thread count.
const GROUP: usize = 4;

#[derive(Default)]
struct BatchSum {
    grads: Option<Gradients>,
    loss: f64,
    used: usize,
    skipped: usize,
}

impl BatchSum {
    fn merge(&mut self, other: BatchSum) {
        self.loss += other.loss;
        self.used += other.used;
        self.skipped += other.skipped;
        if let Some(g) = other.grads {
            self.add(g);
        }
    }

    fn add(&mut self, g: Gradients) {
        match self.grads.as_mut() {
            Some(a) => a.add_assign(&g),
            None => self.grads = Some(g),
        }
    }
}

fn batch_gradient(
    model: &LbfModel,
    dataset: &Dataset,
    keys: &[SampleKey],
    weights: &LossWeights,
) -> Result<BatchSum> {
    let groups: Vec<Result<BatchSum>> = keys
        .par_chunks(GROUP)
        .map(|chunk| {
            let mut sum = BatchSum::default();
            for &key in chunk {
                let Some(sample) = dataset.sample(key)? else {
                    sum.skipped += 1;
                    continue;
                };
                match chain_gradient(model, &sample, weights) {
                    Ok((step, g)) => {
                        sum.loss += step.loss.total;
                        sum.used += 1;
                        sum.add(g);
                    }
                    Err(Error::InsufficientNeighbors { .. } | Error::DegenerateGeometry(_)) => {
                        sum.skipped += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok(sum)
        })
        .collect();
    let mut total = BatchSum::default();
    for g in groups {
        total.merge(g?);
    }
    Ok(total)
}

fn run_epochs(dataset: &Dataset, mut ckpt: Checkpoint, out: Option<&Path>) -> Result<Checkpoint> {
    let cfg = ckpt.config.clone();
    let weights = cfg.loss_weights()?;
    while ckpt.epochs_done < cfg.epochs {
        let epoch = ckpt.epochs_done;
        let lr = cfg.learning_rate(epoch);
        let keys = dataset.epoch_keys(epoch, cfg.patches_per_shape);
        let (mut loss_sum, mut used, mut skipped) = (0.0, 0usize, 0usize);
        for batch in keys.chunks(cfg.batch_size) {
            let sum = batch_gradient(&ckpt.model, dataset, batch, &weights)?;
            loss_sum += sum.loss;
            used += sum.used;
            skipped += sum.skipped;
            if let Some(mut g) = sum.grads {
                g.scale(1.0 / sum.used as f64);
                if !g.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        shape: batch[0].shape,
                        point: batch[0].point,
                        detail: format!("non-finite gradient in batch starting at {:?}", batch[0]),
                    });
                }
                ckpt.optimizer.step(&mut ckpt.model, &g, lr);
            }
        }
        let mean_loss = if used > 0 {
            loss_sum / used as f64
        } else {
            0.0
        };
        log::info!(
            "epoch {epoch}: lr={lr} mean_loss={mean_loss:.6e} samples={used} skipped={skipped}"
        );
        ckpt.log.push(EpochLog {
            epoch,
            lr,
            mean_loss,
            samples: used,
            skipped,
        });
        ckpt.epochs_done += 1;
        if let Some(path) = out {
            ckpt.save(path)?;
        }
    }
    Ok(ckpt)
}

/// Trains from a fresh seeded initialization, checkpointing to `out` after
/// every epoch when given.
pub fn train(shapes: &[PointCloud], cfg: &TrainConfig, out: Option<&Path>) -> Result<Checkpoint> {
    cfg.validate()?;
    let dataset = build_dataset(shapes, cfg)?;
    let model = LbfModel::new_random(cfg.architecture(), derive_seed(cfg.seed, &[INIT_STREAM]))?;
    let ckpt = Checkpoint {
        optimizer: Adam::new(&model),
        model,
        epochs_done: 0,
        config: cfg.clone(),
        log: Vec::new(),
    };
    run_epochs(&dataset, ckpt, out)
}

/// Continues the run saved at `path` up to `cfg.epochs`. Every other
/// setting must match the checkpoint.
pub fn resume(shapes: &[PointCloud], cfg: &TrainConfig, path: &Path) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut ckpt = Checkpoint::load(path)?;
    if ckpt.config.hash() != cfg.hash() {
        return Err(Error::ConfigMismatch(
            "settings differ from the checkpoint being resumed".into(),
        ));
    }
    ckpt.config.epochs = cfg.epochs;
    let dataset = build_dataset(shapes, cfg)?;
    run_epochs(&dataset, ckpt, Some(path))
}

#[cfg(test)]
mod tests;
