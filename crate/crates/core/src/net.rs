//! Conditional SE(3) velocity network.
//!
//! Observation side: zero-mean point cloud → farthest-point-sampled groups →
//! shared per-point MLP → max-pool per group → observation tokens. Query side:
//! two pose tokens (translation, flattened rotation) pass through DiT-style
//! blocks whose adaptive layer norms are driven by a Fourier time embedding and
//! whose attention is cross-attention onto the active observation tokens only.
//! Two linear heads read the translation and rotation velocities. Keys and
//! values also receive an embedding of each group center expressed in the
//! frame of the pose being queried.
//!
//! All parameters live in one flat `Vec<f64>`; gradients use the same layout.
//! Backpropagation is written out by hand.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{Pose, TangentVec};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("degenerate cloud: {0}")]
    DegenerateCloud(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub d_model: usize,
    pub n_tokens: usize,
    pub group_size: usize,
    pub point_hidden: usize,
    pub n_freq: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    /// Translation unit fed to and read from the network (m).
    pub trans_scale: f64,
    /// Point coordinate unit for the tokenizer (m).
    pub point_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            d_model: 64,
            n_tokens: 16,
            group_size: 32,
            point_hidden: 64,
            n_freq: 8,
            n_blocks: 2,
            n_heads: 4,
            ff_mult: 4,
            trans_scale: 0.1,
            point_scale: 0.05,
        }
    }
}

/// Grouped, zero-mean point cloud ready for the tokenizer.
#[derive(Debug, Clone)]
pub struct Observation {
    /// Points minus `centroid` (m).
    pub points: Vec<Vector3<f64>>,
    /// Member point indices of each token's group.
    pub groups: Vec<Vec<u32>>,
    pub active: Vec<bool>,
    pub centroid: Vector3<f64>,
    pub raw_cloud: Vec<Vector3<f64>>,
}

impl Observation {
    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

fn nearest_k(points: &[Vector3<f64>], center: &Vector3<f64>, k: usize, allowed: impl Fn(usize) -> bool) -> Vec<u32> {
    let mut d: Vec<(f64, u32)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(i, p)| ((p - center).norm_squared(), i as u32))
        .collect();
    let k = k.min(d.len());
    if k < d.len() {
        d.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.truncate(k);
    }
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().map(|(_, i)| i).collect()
}

/// Centers the cloud on its masked mean and groups it around `n_tokens`
/// farthest-point-sampled centers. A token is active iff its center point is
/// inside the mask; active groups pool only masked points.
pub fn tokenize(
    cloud: &[Vector3<f64>],
    mask: &[bool],
    n_tokens: usize,
    group_size: usize,
) -> Result<Observation, NetError> {
    if cloud.len() != mask.len() {
        return Err(NetError::DegenerateCloud("cloud and mask lengths differ".into()));
    }
    if cloud.len() < n_tokens {
        return Err(NetError::DegenerateCloud(format!("{} points, need at least {n_tokens}", cloud.len())));
    }
    let masked: Vec<usize> = (0..cloud.len()).filter(|&i| mask[i]).collect();
    if masked.is_empty() {
        return Err(NetError::DegenerateCloud("mask selects no points".into()));
    }
    let centroid = masked.iter().map(|&i| cloud[i]).sum::<Vector3<f64>>() / masked.len() as f64;
    let points: Vec<Vector3<f64>> = cloud.iter().map(|p| p - centroid).collect();
    let spread = points.iter().map(|p| p.norm()).fold(0.0, f64::max);
    if !(spread > 1e-9) {
        return Err(NetError::DegenerateCloud("all points coincide".into()));
    }
    // Seed at the masked point farthest from the centroid.
    let mut first = masked[0];
    for &i in &masked {
        if points[i].norm_squared() > points[first].norm_squared() {
            first = i;
        }
    }
    let mut centers = vec![first];
    let mut min_d: Vec<f64> = points.iter().map(|p| (p - points[first]).norm_squared()).collect();
    while centers.len() < n_tokens {
        let mut best = 0;
        for i in 1..points.len() {
            if min_d[i] > min_d[best] {
                best = i;
            }
        }
        centers.push(best);
        for (i, p) in points.iter().enumerate() {
            min_d[i] = min_d[i].min((p - points[best]).norm_squared());
        }
    }
    let active: Vec<bool> = centers.iter().map(|&c| mask[c]).collect();
    let groups = centers
        .iter()
        .zip(&active)
        .map(|(&c, &a)| {
            if a {
                nearest_k(&points, &points[c], group_size, |i| mask[i])
            } else {
                nearest_k(&points, &points[c], group_size, |_| true)
            }
        })
        .collect();
    Ok(Observation { points, groups, active, centroid, raw_cloud: cloud.to_vec() })
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: usize,
    n_out: usize,
    n_in: usize,
}

#[derive(Debug, Clone)]
struct BlockLayout {
    ada: Lin,
    q: Lin,
    k: Lin,
    v: Lin,
    kpos: Lin,
    vpos: Lin,
    o: Lin,
    ff1: Lin,
    ff2: Lin,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    tok1: Lin,
    tok2: Lin,
    time: Lin,
    pose_t: Lin,
    pose_r: Lin,
    blocks: Vec<BlockLayout>,
    final_ada: Lin,
    head_t: Lin,
    head_r: Lin,
    tensors: Vec<TensorSpec>,
    len: usize,
}

struct LayoutBuilder {
    tensors: Vec<TensorSpec>,
    len: usize,
}

impl LayoutBuilder {
    fn lin(&mut self, name: &str, n_out: usize, n_in: usize) -> Lin {
        let w = self.len;
        self.tensors.push(TensorSpec { name: format!("{name}.w"), shape: vec![n_out, n_in], offset: w });
        self.len += n_out * n_in;
        let b = self.len;
        self.tensors.push(TensorSpec { name: format!("{name}.b"), shape: vec![n_out], offset: b });
        self.len += n_out;
        Lin { w, b, n_out, n_in }
    }
}

impl Layout {
    fn new(c: &NetConfig) -> Layout {
        let d = c.d_model;
        let mut lb = LayoutBuilder { tensors: Vec::new(), len: 0 };
        let tok1 = lb.lin("tokenizer.mlp1", c.point_hidden, 3);
        let tok2 = lb.lin("tokenizer.mlp2", d, c.point_hidden);
        let time = lb.lin("time_embed", d, 2 * c.n_freq);
        let pose_t = lb.lin("pose_token.translation", d, 3);
        let pose_r = lb.lin("pose_token.rotation", d, 9);
        let blocks = (0..c.n_blocks)
            .map(|i| BlockLayout {
                ada: lb.lin(&format!("blocks.{i}.ada"), 6 * d, d),
                q: lb.lin(&format!("blocks.{i}.attn.q"), d, d),
                k: lb.lin(&format!("blocks.{i}.attn.k"), d, d),
                v: lb.lin(&format!("blocks.{i}.attn.v"), d, d),
                kpos: lb.lin(&format!("blocks.{i}.attn.k_pos"), d, 3),
                vpos: lb.lin(&format!("blocks.{i}.attn.v_pos"), d, 3),
                o: lb.lin(&format!("blocks.{i}.attn.o"), d, d),
                ff1: lb.lin(&format!("blocks.{i}.ff1"), c.ff_mult * d, d),
                ff2: lb.lin(&format!("blocks.{i}.ff2"), d, c.ff_mult * d),
            })
            .collect();
        let final_ada = lb.lin("final.ada", 2 * d, d);
        let head_t = lb.lin("head.translation", 3, d);
        let head_r = lb.lin("head.rotation", 3, d);
        Layout { tok1, tok2, time, pose_t, pose_r, blocks, final_ada, head_t, head_r, tensors: lb.tensors, len: lb.len }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn dsilu(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

const LN_EPS: f64 = 1e-6;

/// Layer norm without affine parameters; returns 1/σ.
fn layer_norm(x: &[f64], y: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for (o, v) in y.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
    inv
}

/// Accumulates ∂L/∂x into `dx` given ∂L/∂y, the normalized output and 1/σ.
fn layer_norm_backward(dy: &[f64], y: &[f64], inv: f64, dx: &mut [f64]) {
    let n = dy.len() as f64;
    let mean_dy = dy.iter().sum::<f64>() / n;
    let mean_dyy = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
    for i in 0..dy.len() {
        dx[i] += inv * (dy[i] - mean_dy - y[i] * mean_dyy);
    }
}

/// Dot product with four independent accumulators (vectorizes).
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn linear(p: &[f64], l: Lin, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), l.n_in);
    let w = &p[l.w..l.w + l.n_out * l.n_in];
    let b = &p[l.b..l.b + l.n_out];
    for o in 0..l.n_out {
        y[o] = b[o] + dot(&w[o * l.n_in..(o + 1) * l.n_in], x);
    }
}

/// Parameter gradients plus (optionally) input gradient of a linear layer.
fn linear_backward(p: &[f64], g: &mut [f64], l: Lin, x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
    {
        let gw = &mut g[l.w..l.w + l.n_out * l.n_in];
        for o in 0..l.n_out {
            let d = dy[o];
            if d == 0.0 {
                continue;
            }
            let row = &mut gw[o * l.n_in..(o + 1) * l.n_in];
            for (r, xi) in row.iter_mut().zip(x) {
                *r += d * xi;
            }
        }
    }
    for o in 0..l.n_out {
        g[l.b + o] += dy[o];
    }
    if let Some(dx) = dx {
        let w = &p[l.w..l.w + l.n_out * l.n_in];
        for o in 0..l.n_out {
            let d = dy[o];
            if d == 0.0 {
                continue;
            }
            let row = &w[o * l.n_in..(o + 1) * l.n_in];
            for (a, wi) in dx.iter_mut().zip(row) {
                *a += d * wi;
            }
        }
    }
}

/// Row-major `c (m×n) = a (m×k) · bᵀ` where `b` is `n×k`, plus bias.
fn rows_times_wt(a: &[f64], m: usize, k: usize, w: &[f64], n: usize, bias: &[f64], c: &mut [f64]) {
    for i in 0..m {
        c[i * n..(i + 1) * n].copy_from_slice(bias);
    }
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, w.as_ptr(), 1, k as isize, 1.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Cached tokenizer activations and per-block keys/values for one observation.
#[derive(Debug, Clone)]
pub struct ObsEncoding {
    n_points: usize,
    x: Vec<f64>,
    z1: Vec<f64>,
    s1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    /// Point index achieving the max for every (token, channel).
    argmax: Vec<u32>,
    tokens: Vec<f64>,
    tn: Vec<f64>,
    tn_inv: Vec<f64>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    /// Group center points (centroid-relative, m).
    centers: Vec<Vector3<f64>>,
    active: Vec<bool>,
    centroid: Vector3<f64>,
}

impl ObsEncoding {
    pub fn tokens(&self) -> &[f64] {
        &self.tokens
    }

    /// Argmax pattern of the max-pool; changes only when the pooling crosses a kink.
    pub fn pool_pattern(&self) -> &[u32] {
        &self.argmax
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.centroid
    }
}

#[derive(Debug, Clone, Default)]
struct TokenCache {
    x_in: Vec<f64>,
    n1: Vec<f64>,
    inv1: f64,
    h1: Vec<f64>,
    q: Vec<f64>,
    attn: Vec<f64>,
    o_cat: Vec<f64>,
    att_out: Vec<f64>,
    n2: Vec<f64>,
    inv2: f64,
    h2: Vec<f64>,
    u: Vec<f64>,
    act: Vec<f64>,
    ff: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct BlockCache {
    modv: Vec<f64>,
    keys: Vec<f64>,
    values: Vec<f64>,
    tok: [TokenCache; 2],
}

/// Everything the backward pass needs from one query evaluation.
#[derive(Debug, Clone, Default)]
pub struct QueryCache {
    t_feat: Vec<f64>,
    e_pre: Vec<f64>,
    e: Vec<f64>,
    p_in: [f64; 3],
    r_in: [f64; 9],
    /// Group centers in the hypothesized object frame, per token.
    rel: Vec<[f64; 3]>,
    blocks: Vec<BlockCache>,
    fmod: Vec<f64>,
    nf: [Vec<f64>; 2],
    invf: [f64; 2],
    y: [Vec<f64>; 2],
    pub out_t: [f64; 3],
    pub out_r: [f64; 3],
}

/// Upstream gradients into an observation's keys and values.
#[derive(Debug, Clone)]
pub struct ObsGrad {
    dkeys: Vec<Vec<f64>>,
    dvalues: Vec<Vec<f64>>,
}

/// The learnable velocity field.
#[derive(Debug, Clone)]
pub struct VelocityNet {
    pub config: NetConfig,
    pub params: Vec<f64>,
    pub seed: u64,
    layout: Layout,
}

fn fourier_features(t: f64, n_freq: usize) -> Vec<f64> {
    let mut f = Vec::with_capacity(2 * n_freq);
    for k in 0..n_freq {
        let w = (1u64 << k) as f64 * std::f64::consts::PI * t;
        f.push(w.sin());
        f.push(w.cos());
    }
    f
}

/// Rounds through f32 so checkpoints are lossless.
pub fn round_f32(params: &mut [f64]) {
    for p in params {
        *p = *p as f32 as f64;
    }
}

impl VelocityNet {
    /// Fresh network: scaled-uniform weights, zero biases, zero-initialized
    /// adaptive-norm modulation (blocks start as identity maps).
    pub fn new(config: NetConfig, seed: u64) -> VelocityNet {
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |l: Lin, gain: f64, rng: &mut ChaCha8Rng| {
            let bound = gain * (3.0 / l.n_in as f64).sqrt();
            for w in &mut params[l.w..l.w + l.n_in * l.n_out] {
                *w = rng.random_range(-bound..bound);
            }
        };
        init(layout.tok1, 1.0, &mut rng);
        init(layout.tok2, 1.0, &mut rng);
        init(layout.time, 1.0, &mut rng);
        init(layout.pose_t, 1.0, &mut rng);
        init(layout.pose_r, 1.0, &mut rng);
        for b in &layout.blocks {
            for l in [b.q, b.k, b.v, b.kpos, b.vpos, b.o, b.ff1, b.ff2] {
                init(l, 1.0, &mut rng);
            }
        }
        init(layout.head_t, 0.1, &mut rng);
        init(layout.head_r, 0.1, &mut rng);
        round_f32(&mut params);
        VelocityNet { config, params, seed, layout }
    }

    /// Every parameter drawn at random (used to exercise all gradient paths).
    pub fn new_random(config: NetConfig, seed: u64, scale: f64) -> VelocityNet {
        let mut net = VelocityNet::new(config, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
        for spec in net.layout.tensors.clone() {
            let n: usize = spec.shape.iter().product();
            let fan_in = if spec.shape.len() == 2 { spec.shape[1] } else { 1 };
            let bound = scale * (3.0 / fan_in as f64).sqrt();
            for v in &mut net.params[spec.offset..spec.offset + n] {
                *v = rng.random_range(-bound..bound);
            }
        }
        round_f32(&mut net.params);
        net
    }

    pub fn n_params(&self) -> usize {
        self.layout.len
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.layout.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.layout.tensors.iter().find(|t| t.name == name)
    }

    pub fn tokenize(&self, cloud: &[Vector3<f64>], mask: &[bool]) -> Result<Observation, NetError> {
        tokenize(cloud, mask, self.config.n_tokens, self.config.group_size)
    }

    /// Tokenizer forward pass plus keys/values for every block.
    pub fn encode(&self, obs: &Observation) -> ObsEncoding {
        let c = &self.config;
        let p = &self.params;
        let (h, d, m) = (c.point_hidden, c.d_model, obs.groups.len());
        let n = obs.points.len();
        let mut x = Vec::with_capacity(n * 3);
        for q in &obs.points {
            x.extend([q.x / c.point_scale, q.y / c.point_scale, q.z / c.point_scale]);
        }
        let l1 = self.layout.tok1;
        let mut z1 = vec![0.0; n * h];
        rows_times_wt(&x, n, 3, &p[l1.w..l1.w + h * 3], h, &p[l1.b..l1.b + h], &mut z1);
        let s1: Vec<f64> = z1.iter().map(|&v| sigmoid(v)).collect();
        let a1: Vec<f64> = z1.iter().zip(&s1).map(|(z, s)| z * s).collect();
        let l2 = self.layout.tok2;
        let mut z2 = vec![0.0; n * d];
        rows_times_wt(&a1, n, h, &p[l2.w..l2.w + d * h], d, &p[l2.b..l2.b + d], &mut z2);
        let a2: Vec<f64> = z2.iter().map(|&v| silu(v)).collect();
        let mut tokens = vec![f64::NEG_INFINITY; m * d];
        let mut argmax = vec![0u32; m * d];
        for (g, members) in obs.groups.iter().enumerate() {
            for &i in members {
                let row = &a2[i as usize * d..(i as usize + 1) * d];
                for ch in 0..d {
                    let v = row[ch];
                    if v > tokens[g * d + ch] {
                        tokens[g * d + ch] = v;
                        argmax[g * d + ch] = i;
                    }
                }
            }
        }
        let mut tn = vec![0.0; m * d];
        let mut tn_inv = vec![0.0; m];
        for g in 0..m {
            tn_inv[g] = layer_norm(&tokens[g * d..(g + 1) * d], &mut tn[g * d..(g + 1) * d]);
        }
        let mut keys = Vec::with_capacity(c.n_blocks);
        let mut values = Vec::with_capacity(c.n_blocks);
        for b in &self.layout.blocks {
            let mut kk = vec![0.0; m * d];
            let mut vv = vec![0.0; m * d];
            rows_times_wt(&tn, m, d, &p[b.k.w..b.k.w + d * d], d, &p[b.k.b..b.k.b + d], &mut kk);
            rows_times_wt(&tn, m, d, &p[b.v.w..b.v.w + d * d], d, &p[b.v.b..b.v.b + d], &mut vv);
            keys.push(kk);
            values.push(vv);
        }
        ObsEncoding {
            n_points: n,
            x,
            z1,
            s1,
            a1,
            z2,
            argmax,
            tokens,
            tn,
            tn_inv,
            keys,
            values,
            centers: obs.groups.iter().map(|g| obs.points[g[0] as usize]).collect(),
            active: obs.active.clone(),
            centroid: obs.centroid,
        }
    }

    pub fn new_obs_grad(&self, enc: &ObsEncoding) -> ObsGrad {
        let sz = enc.tokens.len();
        ObsGrad { dkeys: vec![vec![0.0; sz]; self.config.n_blocks], dvalues: vec![vec![0.0; sz]; self.config.n_blocks] }
    }

    /// Velocity at `pose` (camera frame; translation is made centroid-relative here).
    pub fn query(&self, enc: &ObsEncoding, pose: &Pose, t: f64) -> TangentVec {
        let mut cache = QueryCache::default();
        self.query_cached(enc, pose, t, &mut cache);
        self.output(&cache)
    }

    pub fn output(&self, cache: &QueryCache) -> TangentVec {
        let s = self.config.trans_scale;
        TangentVec {
            trans_vel: Vector3::new(cache.out_t[0], cache.out_t[1], cache.out_t[2]) * s,
            rot_vel: Vector3::new(cache.out_r[0], cache.out_r[1], cache.out_r[2]),
        }
    }

    pub fn forward(&self, obs: &Observation, pose: &Pose, t: f64) -> TangentVec {
        let enc = self.encode(obs);
        self.query(&enc, pose, t)
    }

    pub fn query_cached(&self, enc: &ObsEncoding, pose: &Pose, t: f64, cache: &mut QueryCache) {
        let c = &self.config;
        let p = &self.params;
        let lay = &self.layout;
        let d = c.d_model;
        let dh = d / c.n_heads;
        let m = enc.active.len();
        let scale = 1.0 / (dh as f64).sqrt();

        cache.t_feat = fourier_features(t, c.n_freq);
        cache.e_pre = vec![0.0; d];
        linear(p, lay.time, &cache.t_feat, &mut cache.e_pre);
        cache.e = cache.e_pre.iter().map(|&v| silu(v)).collect();

        let rel = (pose.trans - enc.centroid) / c.trans_scale;
        cache.p_in = [rel.x, rel.y, rel.z];
        cache.r_in = pose.rot.flat();
        let rt = pose.rot.transpose();
        let p_rel = pose.trans - enc.centroid;
        cache.rel = enc
            .centers
            .iter()
            .map(|cg| {
                let r = rt.apply(&(cg - p_rel)) / c.trans_scale;
                [r.x, r.y, r.z]
            })
            .collect();
        let mut xs = [vec![0.0; d], vec![0.0; d]];
        linear(p, lay.pose_t, &cache.p_in, &mut xs[0]);
        linear(p, lay.pose_r, &cache.r_in, &mut xs[1]);

        cache.blocks.resize_with(lay.blocks.len(), BlockCache::default);
        for (bi, b) in lay.blocks.iter().enumerate() {
            let bc = &mut cache.blocks[bi];
            bc.modv = vec![0.0; 6 * d];
            linear(p, b.ada, &cache.e, &mut bc.modv);
            let (sh1, rest) = bc.modv.split_at(d);
            let (sc1, rest) = rest.split_at(d);
            let (g1, rest) = rest.split_at(d);
            let (sh2, rest) = rest.split_at(d);
            let (sc2, g2) = rest.split_at(d);
            bc.keys = enc.keys[bi].clone();
            bc.values = enc.values[bi].clone();
            let mut tmp = vec![0.0; d];
            for g in 0..m {
                if enc.active[g] {
                    linear(p, b.kpos, &cache.rel[g], &mut tmp);
                    bc.keys[g * d..(g + 1) * d].iter_mut().zip(&tmp).for_each(|(k, t)| *k += t);
                    linear(p, b.vpos, &cache.rel[g], &mut tmp);
                    bc.values[g * d..(g + 1) * d].iter_mut().zip(&tmp).for_each(|(k, t)| *k += t);
                }
            }
            let keys = &bc.keys;
            let values = &bc.values;
            for (j, x) in xs.iter_mut().enumerate() {
                let tc = &mut bc.tok[j];
                tc.x_in = x.clone();
                tc.n1 = vec![0.0; d];
                tc.inv1 = layer_norm(x, &mut tc.n1);
                tc.h1 = (0..d).map(|i| tc.n1[i] * (1.0 + sc1[i]) + sh1[i]).collect();
                tc.q = vec![0.0; d];
                linear(p, b.q, &tc.h1, &mut tc.q);
                tc.attn = vec![0.0; c.n_heads * m];
                tc.o_cat = vec![0.0; d];
                for hh in 0..c.n_heads {
                    let qh = &tc.q[hh * dh..(hh + 1) * dh];
                    let w = &mut tc.attn[hh * m..(hh + 1) * m];
                    let mut mx = f64::NEG_INFINITY;
                    for g in 0..m {
                        if enc.active[g] {
                            let kg = &keys[g * d + hh * dh..g * d + (hh + 1) * dh];
                            let s = dot(qh, kg) * scale;
                            w[g] = s;
                            mx = mx.max(s);
                        }
                    }
                    let mut z = 0.0;
                    for g in 0..m {
                        if enc.active[g] {
                            w[g] = (w[g] - mx).exp();
                            z += w[g];
                        } else {
                            w[g] = 0.0;
                        }
                    }
                    for g in 0..m {
                        if enc.active[g] {
                            w[g] /= z;
                            let vg = &values[g * d + hh * dh..g * d + (hh + 1) * dh];
                            for (o, v) in tc.o_cat[hh * dh..(hh + 1) * dh].iter_mut().zip(vg) {
                                *o += w[g] * v;
                            }
                        }
                    }
                }
                tc.att_out = vec![0.0; d];
                linear(p, b.o, &tc.o_cat, &mut tc.att_out);
                for i in 0..d {
                    x[i] += g1[i] * tc.att_out[i];
                }
                tc.n2 = vec![0.0; d];
                tc.inv2 = layer_norm(x, &mut tc.n2);
                tc.h2 = (0..d).map(|i| tc.n2[i] * (1.0 + sc2[i]) + sh2[i]).collect();
                tc.u = vec![0.0; b.ff1.n_out];
                linear(p, b.ff1, &tc.h2, &mut tc.u);
                tc.act = tc.u.iter().map(|&v| silu(v)).collect();
                tc.ff = vec![0.0; d];
                linear(p, b.ff2, &tc.act, &mut tc.ff);
                for i in 0..d {
                    x[i] += g2[i] * tc.ff[i];
                }
            }
        }
        cache.fmod = vec![0.0; 2 * d];
        linear(p, lay.final_ada, &cache.e, &mut cache.fmod);
        let (shf, scf) = cache.fmod.split_at(d);
        for j in 0..2 {
            cache.nf[j] = vec![0.0; d];
            cache.invf[j] = layer_norm(&xs[j], &mut cache.nf[j]);
            cache.y[j] = (0..d).map(|i| cache.nf[j][i] * (1.0 + scf[i]) + shf[i]).collect();
        }
        linear(p, lay.head_t, &cache.y[0], &mut cache.out_t);
        linear(p, lay.head_r, &cache.y[1], &mut cache.out_r);
    }

    /// Backward pass of one query given ∂L/∂(head outputs). Parameter gradients
    /// go to `grad`; key/value gradients to `og`.
    pub fn query_backward(
        &self,
        enc: &ObsEncoding,
        cache: &QueryCache,
        d_out_t: &[f64; 3],
        d_out_r: &[f64; 3],
        grad: &mut [f64],
        og: &mut ObsGrad,
    ) {
        let c = &self.config;
        let p = &self.params;
        let lay = &self.layout;
        let d = c.d_model;
        let dh = d / c.n_heads;
        let m = enc.active.len();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut dy = [vec![0.0; d], vec![0.0; d]];
        linear_backward(p, grad, lay.head_t, &cache.y[0], d_out_t, Some(&mut dy[0]));
        linear_backward(p, grad, lay.head_r, &cache.y[1], d_out_r, Some(&mut dy[1]));
        let mut de = vec![0.0; d];
        let mut dfmod = vec![0.0; 2 * d];
        let mut dx = [vec![0.0; d], vec![0.0; d]];
        {
            let scf = &cache.fmod[d..];
            for j in 0..2 {
                let mut dn = vec![0.0; d];
                for i in 0..d {
                    dfmod[i] += dy[j][i];
                    dfmod[d + i] += dy[j][i] * cache.nf[j][i];
                    dn[i] = dy[j][i] * (1.0 + scf[i]);
                }
                layer_norm_backward(&dn, &cache.nf[j], cache.invf[j], &mut dx[j]);
            }
        }
        linear_backward(p, grad, lay.final_ada, &cache.e, &dfmod, Some(&mut de));

        for (bi, b) in lay.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[bi];
            let modv = &bc.modv;
            let (sc1, g1) = (&modv[d..2 * d], &modv[2 * d..3 * d]);
            let (sc2, g2) = (&modv[4 * d..5 * d], &modv[5 * d..6 * d]);
            let mut dmod = vec![0.0; 6 * d];
            let keys = &bc.keys;
            let values = &bc.values;
            let mut dk = vec![0.0; m * d];
            let mut dv = vec![0.0; m * d];
            for j in 0..2 {
                let tc = &bc.tok[j];
                let dxo = dx[j].clone();
                // x3 = x2 + g2 ⊙ ff
                let mut dff = vec![0.0; d];
                for i in 0..d {
                    dmod[5 * d + i] += dxo[i] * tc.ff[i];
                    dff[i] = dxo[i] * g2[i];
                }
                let mut dact = vec![0.0; b.ff1.n_out];
                linear_backward(p, grad, b.ff2, &tc.act, &dff, Some(&mut dact));
                let du: Vec<f64> = dact.iter().zip(&tc.u).map(|(a, u)| a * dsilu(*u)).collect();
                let mut dh2 = vec![0.0; d];
                linear_backward(p, grad, b.ff1, &tc.h2, &du, Some(&mut dh2));
                let mut dn2 = vec![0.0; d];
                for i in 0..d {
                    dmod[3 * d + i] += dh2[i];
                    dmod[4 * d + i] += dh2[i] * tc.n2[i];
                    dn2[i] = dh2[i] * (1.0 + sc2[i]);
                }
                let mut dx2 = dxo;
                layer_norm_backward(&dn2, &tc.n2, tc.inv2, &mut dx2);
                // x2 = x + g1 ⊙ att
                let mut datt = vec![0.0; d];
                for i in 0..d {
                    dmod[2 * d + i] += dx2[i] * tc.att_out[i];
                    datt[i] = dx2[i] * g1[i];
                }
                let mut do_cat = vec![0.0; d];
                linear_backward(p, grad, b.o, &tc.o_cat, &datt, Some(&mut do_cat));
                let mut dq = vec![0.0; d];
                for hh in 0..c.n_heads {
                    let w = &tc.attn[hh * m..(hh + 1) * m];
                    let doh = &do_cat[hh * dh..(hh + 1) * dh];
                    let qh = &tc.q[hh * dh..(hh + 1) * dh];
                    let mut da = vec![0.0; m];
                    let mut wda = 0.0;
                    for g in 0..m {
                        if enc.active[g] {
                            let off = g * d + hh * dh;
                            da[g] = dot(doh, &values[off..off + dh]);
                            for (k, o) in dv[off..off + dh].iter_mut().zip(doh) {
                                *k += w[g] * o;
                            }
                            wda += w[g] * da[g];
                        }
                    }
                    for g in 0..m {
                        if enc.active[g] {
                            let ds = w[g] * (da[g] - wda) * scale;
                            let off = g * d + hh * dh;
                            for i in 0..dh {
                                dq[hh * dh + i] += ds * keys[off + i];
                                dk[off + i] += ds * qh[i];
                            }
                        }
                    }
                }
                let mut dh1 = vec![0.0; d];
                linear_backward(p, grad, b.q, &tc.h1, &dq, Some(&mut dh1));
                let mut dn1 = vec![0.0; d];
                for i in 0..d {
                    dmod[i] += dh1[i];
                    dmod[d + i] += dh1[i] * tc.n1[i];
                    dn1[i] = dh1[i] * (1.0 + sc1[i]);
                }
                let mut dxin = dx2;
                layer_norm_backward(&dn1, &tc.n1, tc.inv1, &mut dxin);
                dx[j] = dxin;
            }
            for g in 0..m {
                if enc.active[g] {
                    let (dkg, dvg) = (&dk[g * d..(g + 1) * d], &dv[g * d..(g + 1) * d]);
                    linear_backward(p, grad, b.kpos, &cache.rel[g], dkg, None);
                    linear_backward(p, grad, b.vpos, &cache.rel[g], dvg, None);
                    og.dkeys[bi][g * d..(g + 1) * d].iter_mut().zip(dkg).for_each(|(a, b)| *a += b);
                    og.dvalues[bi][g * d..(g + 1) * d].iter_mut().zip(dvg).for_each(|(a, b)| *a += b);
                }
            }
            linear_backward(p, grad, b.ada, &cache.e, &dmod, Some(&mut de));
        }
        linear_backward(p, grad, lay.pose_t, &cache.p_in, &dx[0], None);
        linear_backward(p, grad, lay.pose_r, &cache.r_in, &dx[1], None);
        let de_pre: Vec<f64> = de.iter().zip(&cache.e_pre).map(|(a, z)| a * dsilu(*z)).collect();
        linear_backward(p, grad, lay.time, &cache.t_feat, &de_pre, None);
    }

    /// Backward through keys/values, token norm, max-pool and the point MLP.
    pub fn encode_backward(&self, enc: &ObsEncoding, og: &ObsGrad, grad: &mut [f64]) {
        let c = &self.config;
        let p = &self.params;
        let (h, d) = (c.point_hidden, c.d_model);
        let m = enc.active.len();
        let n = enc.n_points;
        let mut dtn = vec![0.0; m * d];
        for (bi, b) in self.layout.blocks.iter().enumerate() {
            for g in 0..m {
                if !enc.active[g] {
                    continue;
                }
                let tn = &enc.tn[g * d..(g + 1) * d];
                linear_backward(p, grad, b.k, tn, &og.dkeys[bi][g * d..(g + 1) * d], Some(&mut dtn[g * d..(g + 1) * d]));
                linear_backward(p, grad, b.v, tn, &og.dvalues[bi][g * d..(g + 1) * d], Some(&mut dtn[g * d..(g + 1) * d]));
            }
        }
        let mut dtok = vec![0.0; m * d];
        for g in 0..m {
            if enc.active[g] {
                layer_norm_backward(
                    &dtn[g * d..(g + 1) * d],
                    &enc.tn[g * d..(g + 1) * d],
                    enc.tn_inv[g],
                    &mut dtok[g * d..(g + 1) * d],
                );
            }
        }
        let mut dz2 = vec![0.0; n * d];
        for g in 0..m {
            for ch in 0..d {
                let dv = dtok[g * d + ch];
                if dv != 0.0 {
                    let i = enc.argmax[g * d + ch] as usize;
                    dz2[i * d + ch] += dv;
                }
            }
        }
        for (dz, z) in dz2.iter_mut().zip(&enc.z2) {
            if *dz != 0.0 {
                *dz *= dsilu(*z);
            }
        }
        let l2 = self.layout.tok2;
        let l1 = self.layout.tok1;
        unsafe {
            // dW2 (d×h) += dZ2ᵀ · A1
            matrixmultiply::dgemm(
                d, n, h, 1.0, dz2.as_ptr(), 1, d as isize, enc.a1.as_ptr(), h as isize, 1, 1.0,
                grad[l2.w..].as_mut_ptr(), h as isize, 1,
            );
        }
        for i in 0..n {
            for ch in 0..d {
                grad[l2.b + ch] += dz2[i * d + ch];
            }
        }
        let mut da1 = vec![0.0; n * h];
        unsafe {
            // dA1 (n×h) = dZ2 · W2
            matrixmultiply::dgemm(
                n, d, h, 1.0, dz2.as_ptr(), d as isize, 1, p[l2.w..].as_ptr(), h as isize, 1, 0.0,
                da1.as_mut_ptr(), h as isize, 1,
            );
        }
        for ((a, z), s) in da1.iter_mut().zip(&enc.z1).zip(&enc.s1) {
            *a *= s * (1.0 + z * (1.0 - s));
        }
        unsafe {
            matrixmultiply::dgemm(
                h, n, 3, 1.0, da1.as_ptr(), 1, h as isize, enc.x.as_ptr(), 3, 1, 1.0, grad[l1.w..].as_mut_ptr(), 3, 1,
            );
        }
        for i in 0..n {
            for ch in 0..h {
                grad[l1.b + ch] += da1[i * h + ch];
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<VelocityNet, NetError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        VelocityNet::from_bytes(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            config: self.config,
            seed: self.seed,
            n_params: self.layout.len,
            tensors: self
                .layout
                .tensors
                .iter()
                .map(|t| (t.name.clone(), TensorEntry { shape: t.shape.clone(), offset: t.offset }))
                .collect(),
        };
        let mut out = CHECKPOINT_MAGIC.as_bytes().to_vec();
        out.extend(serde_json::to_vec(&header).expect("header serializes"));
        out.push(b'\n');
        for &v in &self.params {
            out.extend((v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<VelocityNet, NetError> {
        let rest = buf
            .strip_prefix(CHECKPOINT_MAGIC.as_bytes())
            .ok_or_else(|| NetError::Checkpoint("bad magic".into()))?;
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| NetError::Checkpoint("no header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&rest[..nl]).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        let payload = &rest[nl + 1..];
        let layout = Layout::new(&header.config);
        if header.n_params != layout.len || payload.len() != 4 * layout.len {
            return Err(NetError::Checkpoint("payload size does not match architecture".into()));
        }
        for t in &layout.tensors {
            match header.tensors.get(&t.name) {
                Some(e) if e.shape == t.shape && e.offset == t.offset => {}
                _ => return Err(NetError::Checkpoint(format!("tensor {} missing or misplaced", t.name))),
            }
        }
        let params: Vec<f64> =
            payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        if params.iter().any(|v| !v.is_finite()) {
            return Err(NetError::Checkpoint("non-finite parameter".into()));
        }
        Ok(VelocityNet { config: header.config, params, seed: header.seed, layout })
    }
}

pub const CHECKPOINT_MAGIC: &str = "PFCK1\n";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: NetConfig,
    seed: u64,
    n_params: usize,
    tensors: BTreeMap<String, TensorEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::Rotation;

    fn blob(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.03..0.03), 0.5 + rng.random_range(-0.04..0.04)))
            .collect()
    }

    #[test]
    fn all_true_mask_activates_every_token() {
        let cloud = blob(256, 1);
        let obs = tokenize(&cloud, &vec![true; 256], 16, 32).unwrap();
        assert_eq!(obs.n_active(), 16);
        let mean = obs.points.iter().sum::<Vector3<f64>>() / 256.0;
        assert!(mean.norm() < 1e-6);
    }

    #[test]
    fn translation_leaves_tokens_unchanged() {
        let net = VelocityNet::new_random(NetConfig::default(), 3, 1.0);
        let cloud = blob(256, 2);
        let shifted: Vec<_> = cloud.iter().map(|p| p + Vector3::new(0.3, -0.2, 0.1)).collect();
        let a = net.encode(&net.tokenize(&cloud, &vec![true; 256]).unwrap());
        let b = net.encode(&net.tokenize(&shifted, &vec![true; 256]).unwrap());
        for (x, y) in a.tokens().iter().zip(b.tokens()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_clouds_are_rejected() {
        let same = vec![Vector3::new(0.1, 0.2, 0.3); 64];
        assert!(matches!(tokenize(&same, &vec![true; 64], 16, 32), Err(NetError::DegenerateCloud(_))));
        assert!(tokenize(&blob(8, 1), &vec![true; 8], 16, 32).is_err());
        assert!(tokenize(&blob(64, 1), &vec![false; 64], 16, 32).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let net = VelocityNet::new_random(NetConfig::default(), 4, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..1000 {
            let obs = net.tokenize(&blob(64, i), &vec![true; 64]).unwrap();
            let pose = Pose::new(Rotation::random(&mut rng), Vector3::new(0.0, 0.0, 0.5));
            let t = rng.random::<f64>();
            let a = net.forward(&obs, &pose, t);
            assert!(a.rot_vel.iter().chain(a.trans_vel.iter()).all(|v| v.is_finite()));
            if i < 10 {
                assert_eq!(a, net.forward(&obs, &pose, t));
            }
        }
    }

    #[test]
    fn inactive_tokens_do_not_influence_output() {
        let net = VelocityNet::new_random(NetConfig::default(), 6, 1.0);
        let cloud = blob(256, 7);
        let mut obs = net.tokenize(&cloud, &vec![true; 256]).unwrap();
        for g in 0..16 {
            obs.active[g] = g % 3 == 0;
        }
        let pose = Pose::new(Rotation::rot_x(0.4), Vector3::new(0.01, 0.0, 0.5));
        let base = net.query(&net.encode(&obs), &pose, 0.3);
        // Perturb the inactive tokens' features by scrambling their groups.
        let mut enc = net.encode(&obs);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for b in 0..2 {
            for g in 0..16 {
                if !obs.active[g] {
                    for v in &mut enc.keys[b][g * 64..(g + 1) * 64] {
                        *v = rng.random_range(-1e3..1e3);
                    }
                    for v in &mut enc.values[b][g * 64..(g + 1) * 64] {
                        *v = rng.random_range(-1e3..1e3);
                    }
                }
            }
        }
        assert_eq!(base, net.query(&enc, &pose, 0.3));
    }

    #[test]
    fn single_active_token_equals_removing_the_rest() {
        let net = VelocityNet::new_random(NetConfig::default(), 9, 1.0);
        let cloud = blob(256, 10);
        let mut obs = net.tokenize(&cloud, &vec![true; 256]).unwrap();
        let keep = 5;
        for (g, a) in obs.active.iter_mut().enumerate() {
            *a = g == keep;
        }
        let mut solo = obs.clone();
        solo.groups = vec![obs.groups[keep].clone()];
        solo.active = vec![true];
        let pose = Pose::new(Rotation::rot_y(1.0), Vector3::new(0.0, 0.02, 0.48));
        let a = net.forward(&obs, &pose, 0.7);
        let b = net.forward(&solo, &pose, 0.7);
        assert!((a.rot_vel - b.rot_vel).norm() < 1e-6 && (a.trans_vel - b.trans_vel).norm() < 1e-6);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let net = VelocityNet::new(NetConfig::default(), 11);
        let bytes = net.to_bytes();
        let back = VelocityNet::from_bytes(&bytes).unwrap();
        assert_eq!(back.params, net.params);
        assert_eq!(back.to_bytes(), bytes);
        assert!(VelocityNet::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(VelocityNet::from_bytes(b"nope").is_err());
    }

    #[test]
    fn parameter_count_is_recorded() {
        let net = VelocityNet::new(NetConfig::default(), 0);
        let total: usize = net.tensors().iter().map(|t| t.shape.iter().product::<usize>()).sum();
        assert_eq!(total, net.n_params());
        assert!(net.tensor("blocks.1.attn.k.w").is_some());
    }
}
