//! A small forward-only multi-view transformer.
//!
//! Images are patchified and linearly embedded with a 2D sinusoidal encoding
//! of the patch grid. Tokens then pass through `depth` blocks, each made of a
//! view-wise attention layer (tokens attend within their own view) followed
//! by a global layer (tokens attend across all views). Three separate
//! per-view decoders feed a point head, a confidence head and a camera head.
//!
//! Nothing in [`Mode::Equivariant`] depends on the position of a view in the
//! input, so permuting the input views permutes the outputs. The two
//! reference modes mark the first view, as a contrast.
//!
//! Computation is in `f32`; rotations are orthogonalized in `f64`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{rotation_from_9d, Pose};
use crate::grid::{ConfidenceMap, Grid, PointMap};
use crate::synth::Image;
use crate::{Error, Result};
use nalgebra::Vector3;

const MLP_RATIO: usize = 4;
const LN_EPS: f32 = 1e-5;
/// Bound on the log-depth emitted by the point head.
const MAX_LOG_DEPTH: f32 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Equivariant,
    /// A learnable token joins the first view's token set.
    RefToken,
    /// A learnable embedding is added to every token of the first view.
    RefEmbed,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equivariant" => Ok(Mode::Equivariant),
            "ref_token" => Ok(Mode::RefToken),
            "ref_embed" => Ok(Mode::RefEmbed),
            other => Err(Error::InvalidConfig(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub decoder_depth: usize,
    pub mode: Mode,
    pub seed: u64,
    /// Reduce global attention in a content-defined key order, making outputs
    /// bitwise independent of view order.
    pub deterministic: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            patch_size: 8,
            dim: 64,
            heads: 4,
            depth: 4,
            decoder_depth: 5,
            mode: Mode::Equivariant,
            seed: 0,
            deterministic: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.patch_size == 0 {
            return bad("patch_size must be positive".into());
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if !self.dim.is_multiple_of(4) {
            return bad(format!("dim {} must be divisible by 4 for the 2D positional encoding", self.dim));
        }
        if self.depth == 0 {
            return bad("depth must be >= 1".into());
        }
        if self.decoder_depth == 0 {
            return bad("decoder_depth must be >= 1".into());
        }
        Ok(())
    }
}

/// A dense row-major array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: NetConfig,
    pub params: BTreeMap<String, Param>,
}

impl ModelWeights {
    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    fn data(&self, name: &str) -> &[f32] {
        &self.params[name].data
    }

    /// FNV-1a over parameter names and bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for (name, p) in &self.params {
            h.bytes(name.as_bytes());
            for v in &p.data {
                h.bytes(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) {
        for &x in b {
            self.0 ^= x as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

fn name_stream(name: &str) -> u64 {
    let mut h = Fnv::new();
    h.bytes(name.as_bytes());
    h.finish()
}

enum Init {
    Uniform(f32),
    Const(f32),
    Values(Vec<f32>),
}

/// Every parameter of the model with its shape and initializer, in a fixed order.
fn param_specs(cfg: &NetConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.dim;
    let p2 = cfg.patch_size * cfg.patch_size;
    let mut specs = Vec::new();
    let linear = |specs: &mut Vec<_>, name: &str, fan_in: usize, fan_out: usize| {
        specs.push((format!("{name}.w"), vec![fan_in, fan_out], Init::Uniform(1.0 / (fan_in as f32).sqrt())));
        specs.push((format!("{name}.b"), vec![fan_out], Init::Const(0.0)));
    };
    let norm = |specs: &mut Vec<_>, name: &str| {
        specs.push((format!("{name}.g"), vec![d], Init::Const(1.0)));
        specs.push((format!("{name}.b"), vec![d], Init::Const(0.0)));
    };
    let block = |specs: &mut Vec<_>, name: &str| {
        norm(specs, &format!("{name}.ln1"));
        linear(specs, &format!("{name}.qkv"), d, 3 * d);
        linear(specs, &format!("{name}.proj"), d, d);
        norm(specs, &format!("{name}.ln2"));
        linear(specs, &format!("{name}.fc1"), d, MLP_RATIO * d);
        linear(specs, &format!("{name}.fc2"), MLP_RATIO * d, d);
    };
    linear(&mut specs, "patch", 3 * p2, d);
    for b in 0..cfg.depth {
        block(&mut specs, &format!("enc.{b}.view"));
        block(&mut specs, &format!("enc.{b}.global"));
    }
    for dec in ["point", "conf", "cam"] {
        for l in 0..cfg.decoder_depth {
            block(&mut specs, &format!("dec.{dec}.{l}"));
        }
        norm(&mut specs, &format!("dec.{dec}.ln"));
    }
    linear(&mut specs, "head.point.fc1", d, d);
    linear(&mut specs, "head.point.fc2", d, 3 * p2);
    linear(&mut specs, "head.conf.fc1", d, d);
    linear(&mut specs, "head.conf.fc2", d, p2);
    linear(&mut specs, "head.cam.tok1", d, d);
    linear(&mut specs, "head.cam.tok2", d, d);
    linear(&mut specs, "head.cam.out1", d, d);
    specs.push(("head.cam.out2.w".into(), vec![d, 12], Init::Uniform(1.0 / (d as f32).sqrt())));
    // Bias the 9D block toward the identity so fresh models emit well-conditioned rotations.
    specs.push(("head.cam.out2.b".into(), vec![12], Init::Values(vec![1., 0., 0., 0., 1., 0., 0., 0., 1., 0., 0., 0.])));
    match cfg.mode {
        Mode::Equivariant => {}
        Mode::RefToken => specs.push(("ref_token".into(), vec![d], Init::Uniform(1.0))),
        Mode::RefEmbed => specs.push(("ref_embed".into(), vec![d], Init::Uniform(1.0))),
    }
    specs
}

/// Draws weights for `cfg`. Each parameter has its own random stream keyed by
/// its name, so identical seeds give bitwise-identical weights.
pub fn init_model(cfg: &NetConfig) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut params = BTreeMap::new();
    for (name, shape, init) in param_specs(cfg) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Const(c) => vec![c; n],
            Init::Values(v) => v,
            Init::Uniform(a) => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(name_stream(&name));
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
        };
        params.insert(name, Param { shape, data });
    }
    Ok(ModelWeights { config: cfg.clone(), params })
}

/// Checks that `w` holds every parameter `w.config` needs, with the right shapes.
pub fn validate_weights(w: &ModelWeights) -> Result<()> {
    w.config.validate()?;
    for (name, shape, _) in param_specs(&w.config) {
        let p = w.get(&name)?;
        if p.shape != shape || p.data.len() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!("parameter {name}: expected shape {shape:?}, got {:?}", p.shape)));
        }
    }
    Ok(())
}

/// Row-major `rows × cols` matrix of activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokens {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Tokens {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tokens { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn concat(parts: &[Tokens]) -> Tokens {
        let cols = parts[0].cols;
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Tokens { rows: data.len() / cols, cols, data }
    }

    fn slice_rows(&self, start: usize, end: usize) -> Tokens {
        Tokens { rows: end - start, cols: self.cols, data: self.data[start * self.cols..end * self.cols].to_vec() }
    }
}

fn linear(x: &Tokens, w: &ModelWeights, name: &str) -> Tokens {
    let wt = &w.params[&format!("{name}.w")];
    let b = w.data(&format!("{name}.b"));
    let (fan_in, fan_out) = (wt.shape[0], wt.shape[1]);
    debug_assert_eq!(x.cols, fan_in);
    let mut out = Tokens::zeros(x.rows, fan_out);
    for r in 0..x.rows {
        let xr = x.row(r);
        let o = out.row_mut(r);
        o.copy_from_slice(b);
        for (i, &xi) in xr.iter().enumerate() {
            let wrow = &wt.data[i * fan_out..(i + 1) * fan_out];
            for (oj, &wij) in o.iter_mut().zip(wrow) {
                *oj += xi * wij;
            }
        }
    }
    out
}

fn layer_norm(x: &Tokens, w: &ModelWeights, name: &str) -> Tokens {
    let g = w.data(&format!("{name}.g"));
    let b = w.data(&format!("{name}.b"));
    let mut out = x.clone();
    let n = x.cols as f32;
    for r in 0..x.rows {
        let row = out.row_mut(r);
        let mu = row.iter().sum::<f32>() / n;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for ((v, gi), bi) in row.iter_mut().zip(g).zip(b) {
            *v = (*v - mu) * inv * gi + bi;
        }
    }
    out
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn mlp(x: &Tokens, w: &ModelWeights, fc1: &str, fc2: &str) -> Tokens {
    let mut h = linear(x, w, fc1);
    h.data.iter_mut().for_each(|v| *v = gelu(*v));
    linear(&h, w, fc2)
}

fn bits_key(row: &[f32]) -> Vec<u32> {
    row.iter().map(|v| v.to_bits()).collect()
}

/// Multi-head scaled dot-product self-attention over the rows of `x`.
/// With `canonical`, keys are reduced in an order fixed by their content.
fn attention(x: &Tokens, w: &ModelWeights, name: &str, heads: usize, canonical: bool) -> Tokens {
    let d = x.cols;
    let hd = d / heads;
    let qkv = linear(x, w, &format!("{name}.qkv"));
    let n = x.rows;
    let mut key_order: Vec<usize> = (0..n).collect();
    if canonical {
        let keys: Vec<Vec<u32>> = (0..n).map(|r| bits_key(x.row(r))).collect();
        key_order.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
    }
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = Tokens::zeros(n, d);
    let mut scores = vec![0.0f32; n];
    let mut acc = vec![0.0f64; hd];
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
        for i in 0..n {
            let q = &qkv.row(i)[qo..qo + hd];
            let mut max = f32::NEG_INFINITY;
            for (s, &j) in scores.iter_mut().zip(&key_order) {
                let k = &qkv.row(j)[ko..ko + hd];
                *s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
                max = max.max(*s);
            }
            // Sums over keys accumulate in f64 so their f32 result does not
            // depend on key order.
            let mut denom = 0.0f64;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                denom += *s as f64;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (s, &j) in scores.iter().zip(&key_order) {
                let v = &qkv.row(j)[vo..vo + hd];
                for (ac, vc) in acc.iter_mut().zip(v) {
                    *ac += *s as f64 * *vc as f64;
                }
            }
            let o = &mut out.row_mut(i)[qo..qo + hd];
            for (oc, ac) in o.iter_mut().zip(&acc) {
                *oc = (ac / denom) as f32;
            }
        }
    }
    linear(&out, w, &format!("{name}.proj"))
}

fn add_inplace(x: &mut Tokens, y: &Tokens) {
    x.data.iter_mut().zip(&y.data).for_each(|(a, b)| *a += b);
}

/// Pre-norm transformer layer: attention then MLP, each with a residual.
fn block(x: &Tokens, w: &ModelWeights, name: &str, heads: usize, canonical: bool) -> Tokens {
    let mut y = x.clone();
    add_inplace(&mut y, &attention(&layer_norm(x, w, &format!("{name}.ln1")), w, name, heads, canonical));
    let m = mlp(&layer_norm(&y, w, &format!("{name}.ln2")), w, &format!("{name}.fc1"), &format!("{name}.fc2"));
    add_inplace(&mut y, &m);
    y
}

/// 2D sinusoidal encoding: the first half of the channels encodes the patch
/// row, the second half the patch column.
pub fn positional_encoding(grid_h: usize, grid_w: usize, dim: usize) -> Tokens {
    let quarter = dim / 4;
    let mut pe = Tokens::zeros(grid_h * grid_w, dim);
    for r in 0..grid_h {
        for c in 0..grid_w {
            let row = pe.row_mut(r * grid_w + c);
            for k in 0..quarter {
                let freq = 1.0 / 10000f32.powf(k as f32 / quarter as f32);
                let (a, b) = (r as f32 * freq, c as f32 * freq);
                row[k] = a.sin();
                row[quarter + k] = a.cos();
                row[2 * quarter + k] = b.sin();
                row[3 * quarter + k] = b.cos();
            }
        }
    }
    pe
}

fn check_patchable(height: usize, width: usize, p: usize) -> Result<()> {
    if height == 0 || width == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
        return Err(Error::ShapeMismatch(format!("image {height}x{width} is not divisible by patch size {p}")));
    }
    Ok(())
}

/// Linear embedding of flattened `p×p×3` patches plus the positional encoding.
/// Patches are flattened as `(dy·p + dx)·3 + channel`.
pub fn patch_embed(image: &Image, w: &ModelWeights) -> Result<Tokens> {
    let p = w.config.patch_size;
    check_patchable(image.height, image.width, p)?;
    let (gh, gw) = (image.height / p, image.width / p);
    let mut patches = Tokens::zeros(gh * gw, 3 * p * p);
    for r in 0..gh {
        for c in 0..gw {
            let row = patches.row_mut(r * gw + c);
            for dy in 0..p {
                for dx in 0..p {
                    let px = image[(r * p + dy, c * p + dx)];
                    row[(dy * p + dx) * 3..(dy * p + dx) * 3 + 3].copy_from_slice(&px);
                }
            }
        }
    }
    let mut tokens = linear(&patches, w, "patch");
    add_inplace(&mut tokens, &positional_encoding(gh, gw, w.config.dim));
    Ok(tokens)
}

/// Scatters per-token vectors of length `p·p·C` to an `H×W×C` map (returned
/// row-major, channel fastest). Element `c·p·p + dy·p + dx` of token
/// `(pr, pc)` lands at pixel `(pr·p + dy, pc·p + dx)`, channel `c`.
pub fn pixel_shuffle(values: &Tokens, grid_h: usize, grid_w: usize, p: usize, channels: usize) -> Result<Grid<Vec<f32>>> {
    if values.rows != grid_h * grid_w || values.cols != p * p * channels {
        return Err(Error::ShapeMismatch(format!(
            "pixel shuffle expects {}x{} values, got {}x{}",
            grid_h * grid_w,
            p * p * channels,
            values.rows,
            values.cols
        )));
    }
    let mut out = Grid::filled(grid_h * p, grid_w * p, vec![0.0f32; channels]);
    for pr in 0..grid_h {
        for pc in 0..grid_w {
            let t = values.row(pr * grid_w + pc);
            for c in 0..channels {
                for dy in 0..p {
                    for dx in 0..p {
                        out[(pr * p + dy, pc * p + dx)][c] = t[c * p * p + dy * p + dx];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Point head: MLP then pixel shuffle to `(raw_x, raw_y, raw_z)`, mapped to
/// `z = exp(raw_z)`, `x = raw_x·z`, `y = raw_y·z` so depths stay positive.
pub fn point_head(tokens: &Tokens, w: &ModelWeights, grid_h: usize, grid_w: usize) -> Result<PointMap> {
    let raw = pixel_shuffle(&mlp(tokens, w, "head.point.fc1", "head.point.fc2"), grid_h, grid_w, w.config.patch_size, 3)?;
    Ok(raw.map(|v| {
        let z = v[2].clamp(-MAX_LOG_DEPTH, MAX_LOG_DEPTH).exp() as f64;
        Vector3::new(v[0] as f64 * z, v[1] as f64 * z, z)
    }))
}

pub fn conf_head(tokens: &Tokens, w: &ModelWeights, grid_h: usize, grid_w: usize) -> Result<ConfidenceMap> {
    let raw = pixel_shuffle(&mlp(tokens, w, "head.conf.fc1", "head.conf.fc2"), grid_h, grid_w, w.config.patch_size, 1)?;
    Ok(raw.map(|v| v[0] as f64))
}

/// Per-token MLP, mean pool, MLP to 12 values: a 9D rotation block and a translation.
pub fn camera_head(tokens: &Tokens, w: &ModelWeights) -> Result<Pose> {
    if tokens.rows == 0 {
        return Err(Error::ShapeMismatch("camera head needs at least one token".into()));
    }
    let per = mlp(tokens, w, "head.cam.tok1", "head.cam.tok2");
    let mut pooled = Tokens::zeros(1, per.cols);
    for r in 0..per.rows {
        pooled.data.iter_mut().zip(per.row(r)).for_each(|(a, b)| *a += b);
    }
    pooled.data.iter_mut().for_each(|v| *v /= per.rows as f32);
    let out = mlp(&pooled, w, "head.cam.out1", "head.cam.out2");
    let mut m = [0.0f64; 9];
    for (dst, src) in m.iter_mut().zip(&out.data[..9]) {
        *dst = *src as f64;
    }
    let rotation = rotation_from_9d(&m).map_err(|e| Error::HeadDegenerate(e.to_string()))?;
    let t = Vector3::new(out.data[9] as f64, out.data[10] as f64, out.data[11] as f64);
    Ok(Pose::new(rotation, t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub poses: Vec<Pose>,
    pub pointmaps: Vec<PointMap>,
    pub conf_logits: Vec<ConfidenceMap>,
}

impl NetOutput {
    /// Every output value flattened per view: pose (9 rotation + 3 translation),
    /// pointmap, logits.
    pub fn view_values(&self, view: usize) -> Vec<f64> {
        let pose = &self.poses[view];
        let mut v: Vec<f64> = pose.rotation.matrix().transpose().iter().copied().collect();
        v.extend(pose.translation.iter());
        for p in &self.pointmaps[view].data {
            v.extend(p.iter());
        }
        v.extend(&self.conf_logits[view].data);
        v
    }

    /// FNV-1a over the bit patterns of every output value.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for i in 0..self.poses.len() {
            for x in self.view_values(i) {
                h.bytes(&x.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

/// Runs the network on `images`, which must share one size divisible by the patch size.
pub fn forward(images: &[Image], w: &ModelWeights) -> Result<NetOutput> {
    let cfg = &w.config;
    let first = images.first().ok_or(Error::EmptyInput)?;
    let (height, width) = (first.height, first.width);
    if images.iter().any(|im| im.height != height || im.width != width) {
        return Err(Error::ShapeMismatch("all views must share one image size".into()));
    }
    check_patchable(height, width, cfg.patch_size)?;
    let (gh, gw) = (height / cfg.patch_size, width / cfg.patch_size);

    let mut views: Vec<Tokens> = images.iter().map(|im| patch_embed(im, w)).collect::<Result<_>>()?;
    match cfg.mode {
        Mode::Equivariant => {}
        Mode::RefEmbed => {
            let e = w.data("ref_embed");
            for r in 0..views[0].rows {
                views[0].row_mut(r).iter_mut().zip(e).for_each(|(a, b)| *a += b);
            }
        }
        Mode::RefToken => {
            let mut t = Tokens::zeros(1, cfg.dim);
            t.data.copy_from_slice(w.data("ref_token"));
            views[0] = Tokens::concat(&[views[0].clone(), t]);
        }
    }

    for b in 0..cfg.depth {
        for v in views.iter_mut() {
            *v = block(v, w, &format!("enc.{b}.view"), cfg.heads, false);
        }
        let counts: Vec<usize> = views.iter().map(|v| v.rows).collect();
        let joint = block(&Tokens::concat(&views), w, &format!("enc.{b}.global"), cfg.heads, cfg.deterministic);
        let mut start = 0;
        for (v, n) in views.iter_mut().zip(counts) {
            *v = joint.slice_rows(start, start + n);
            start += n;
        }
    }
    if cfg.mode == Mode::RefToken {
        let n = gh * gw;
        views[0] = views[0].slice_rows(0, n);
    }

    let decode = |x: &Tokens, name: &str| {
        let mut y = x.clone();
        for l in 0..cfg.decoder_depth {
            y = block(&y, w, &format!("dec.{name}.{l}"), cfg.heads, false);
        }
        layer_norm(&y, w, &format!("dec.{name}.ln"))
    };

    let mut out = NetOutput { poses: Vec::new(), pointmaps: Vec::new(), conf_logits: Vec::new() };
    for v in &views {
        out.pointmaps.push(point_head(&decode(v, "point"), w, gh, gw)?);
        out.conf_logits.push(conf_head(&decode(v, "conf"), w, gh, gw)?);
        out.poses.push(camera_head(&decode(v, "cam"), w)?);
    }
    Ok(out)
}

/// `‖out_π − π(out)‖∞ / (‖out‖∞ + 1e-12)` for one permutation, where view
/// `k` of the permuted input is view `perm[k]` of `images`.
pub fn permutation_deviation(images: &[Image], w: &ModelWeights, base: &NetOutput, perm: &[usize]) -> Result<f64> {
    let permuted: Vec<Image> = perm.iter().map(|&i| images[i].clone()).collect();
    let out = forward(&permuted, w)?;
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (k, &i) in perm.iter().enumerate() {
        let (a, b) = (out.view_values(k), base.view_values(i));
        for (x, y) in a.iter().zip(&b) {
            diff = diff.max((x - y).abs());
            scale = scale.max(y.abs());
        }
    }
    Ok(diff / (scale + 1e-12))
}

/// Largest relative deviation from equivariance over `trials` random
/// non-identity permutations drawn from a generator seeded by the model seed.
pub fn check_equivariance(w: &ModelWeights, images: &[Image], trials: usize) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::TooFewViews { needed: 2, got: images.len() });
    }
    let base = forward(images, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(w.config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let identity: Vec<usize> = (0..images.len()).collect();
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let mut perm = identity.clone();
        while perm == identity {
            perm.shuffle(&mut rng);
        }
        worst = worst.max(permutation_deviation(images, w, &base, &perm)?);
    }
    Ok(worst)
}
