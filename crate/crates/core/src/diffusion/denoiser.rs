//! Noise-prediction network and its hand-written gradients.
//!
//! Per frame: a small MLP with a sinusoidal time embedding. If the
//! conditioning adapter exists, learned per-frame queries pool the
//! condition tokens by cross-attention into one vector per frame,
//! which is concatenated with the frame features and projected back
//! down. A single self-attention layer then mixes frames along the
//! time axis (with a residual), and a linear head emits the predicted
//! noise. All math runs in f64; checkpoints store f32.
//!
//! The input video is normalized to unit rms before the network and
//! the output is multiplied by the same scale, so the predictor is
//! homogeneous of degree one in its input. Sampling trajectories that
//! wander off the unit shell therefore see proportionally scaled
//! noise estimates instead of saturated ones, which keeps the reverse
//! process from amplifying its own magnitude errors.
//!
//! A time-gated linear skip from the normalized input to the output
//! carries the near-identity component of noise prediction (dominant
//! at high noise levels), so the bounded trunk spends its capacity on
//! the data structure instead of reproducing its input. A second
//! per-frame MLP after the attention (also residual) lets the network
//! process the cross-frame mixture nonlinearly before the head.
//!
//! Each frame's token is offset by a learned projection of a fixed
//! sinusoidal encoding of its slot before the temporal attention.
//! Without that the network is permutation-equivariant over frames: it
//! could denoise each frame onto the data manifold but never prefer
//! one frame ordering over another, so sampled clips would interleave
//! positions arbitrarily and conditioning could not orient motion.
//!
//! The adapter's pooled condition vector is scaled by a learned time
//! gate before it joins the frame features. Conditioning only informs
//! the mid-schedule steps where the motion direction is still being
//! resolved; at low noise the content already determines it, so any
//! conditioned/unconditioned difference there is model error, which
//! classifier-free guidance would multiply. A gate the training can
//! close where the condition stops helping keeps the two guidance
//! branches identical there.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::corpus::{gen_corpus, SyntheticCorpusSpec};
use crate::diffusion::schedule::{forward_noise, NoiseSchedule};
use crate::diffusion::{CondEmbedding, DenoiserSpec, LatentVideo, POS_FEATURES, TIME_FEATURES};
use crate::error::{Error, Result};
use crate::rng::mix64;
use crate::tensor_store::{Tensor, TensorMap};

/// Deterministic list of (name, shape) pairs for a spec, in the
/// lexicographic order the container serializes them.
pub fn manifest(spec: &DenoiserSpec) -> Vec<(String, Vec<usize>)> {
    let (f, d, h) = (spec.frames, spec.dim, spec.hidden);
    let mut names: Vec<(String, Vec<usize>)> = vec![
        ("spatial.b1".into(), vec![h]),
        ("spatial.b2".into(), vec![d]),
        ("spatial.b3".into(), vec![h]),
        ("spatial.head_b".into(), vec![d]),
        ("spatial.head_w".into(), vec![d, d]),
        ("spatial.skip".into(), vec![d, d]),
        ("spatial.skip_t".into(), vec![TIME_FEATURES]),
        ("spatial.w1".into(), vec![h, d]),
        ("spatial.w2".into(), vec![d, h]),
        ("spatial.w3".into(), vec![h, d]),
        ("spatial.w4".into(), vec![d, h]),
        ("spatial.wp".into(), vec![d, POS_FEATURES]),
        ("spatial.wt".into(), vec![h, TIME_FEATURES]),
        ("spatial.wt2".into(), vec![h, TIME_FEATURES]),
        ("temporal.wk".into(), vec![d, d]),
        ("temporal.wo".into(), vec![d, d]),
        ("temporal.wq".into(), vec![d, d]),
        ("temporal.wv".into(), vec![d, d]),
    ];
    if spec.has_adapter {
        names.extend([
            ("adapter.bproj".into(), vec![d]),
            ("adapter.gate_t".into(), vec![TIME_FEATURES]),
            ("adapter.null".into(), vec![1, d]),
            ("adapter.query".into(), vec![f, d]),
            ("adapter.wk".into(), vec![d, d]),
            ("adapter.wproj".into(), vec![d, 2 * d]),
            ("adapter.wv".into(), vec![d, d]),
        ]);
    }
    names.sort();
    names
}

/// Total parameter count of a spec's manifest.
pub fn param_count(spec: &DenoiserSpec) -> usize {
    manifest(spec)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Fresh checkpoint: 2-D tensors get N(0, 1/fan_in) entries, biases
/// and the null condition token start at zero. The condition time gate
/// starts as a mid-schedule bump, open where denoising still has to
/// resolve the motion direction and closed near both ends. Stage
/// `pretrained`.
pub fn init_weights(spec: &DenoiserSpec, seed: u64) -> Result<TensorMap> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = TensorMap::new("pretrained")?;
    for (name, shape) in manifest(spec) {
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = if name == "adapter.gate_t" {
            let mut v = vec![0.0; numel];
            v[0] = 1.0;
            v
        } else if shape.len() == 1 || name == "adapter.null" {
            vec![0.0; numel]
        } else {
            let std = 1.0 / (shape[1] as f64).sqrt();
            (0..numel)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    (v * std) as f32
                })
                .collect()
        };
        map.insert(&name, Tensor::new(shape, data)?)?;
    }
    Ok(map)
}

/// f64 working copy of a checkpoint, validated against the manifest.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Weights {
    tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Weights {
    pub(crate) fn from_map(map: &TensorMap, spec: &DenoiserSpec) -> Result<Weights> {
        spec.validate()?;
        let want = manifest(spec);
        let mut tensors = BTreeMap::new();
        for (name, shape) in &want {
            match map.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {
                    let data = t.data().iter().map(|&v| v as f64).collect();
                    tensors.insert(name.clone(), (shape.clone(), data));
                }
                Some(t) => {
                    return Err(Error::Incompatible(format!(
                        "tensor {name} has shape {:?}, manifest wants {shape:?}",
                        t.shape()
                    )));
                }
                None if name.starts_with("adapter.") => {
                    return Err(Error::Incompatible(format!(
                        "adapter weights missing: no tensor {name}"
                    )));
                }
                None => {
                    return Err(Error::Incompatible(format!(
                        "checkpoint lacks manifest tensor {name}"
                    )));
                }
            }
        }
        if let Some(extra) = map.names().find(|n| !tensors.contains_key(*n)) {
            return Err(Error::Incompatible(format!(
                "checkpoint carries tensor {extra} outside the manifest"
            )));
        }
        Ok(Weights { tensors })
    }

    pub(crate) fn to_map(&self, stage: &str) -> Result<TensorMap> {
        let mut map = TensorMap::new(stage)?;
        for (name, (shape, data)) in &self.tensors {
            map.insert(name, Tensor::from_f64(shape.clone(), data)?)?;
        }
        Ok(map)
    }

    pub(crate) fn get(&self, name: &str) -> &[f64] {
        &self.tensors[name].1
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> &mut [f64] {
        &mut self.tensors.get_mut(name).unwrap().1
    }

    pub(crate) fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }
}

/// Zero-filled gradient buffers matching a weight set.
pub(crate) fn zero_grads(w: &Weights) -> BTreeMap<String, Vec<f64>> {
    w.tensors
        .iter()
        .map(|(n, (_, d))| (n.clone(), vec![0.0; d.len()]))
        .collect()
}

fn time_features(t: usize, t_max: usize) -> [f64; TIME_FEATURES] {
    let s = t as f64 / t_max as f64;
    let mut tau = [0.0; TIME_FEATURES];
    for freq in 0..TIME_FEATURES / 2 {
        let arg = (1u32 << freq) as f64 * std::f64::consts::PI * s;
        tau[2 * freq] = arg.sin();
        tau[2 * freq + 1] = arg.cos();
    }
    tau
}

fn pos_features(k: usize, frames: usize) -> [f64; POS_FEATURES] {
    let s = k as f64 / (frames - 1) as f64;
    let mut pi = [0.0; POS_FEATURES];
    for freq in 0..POS_FEATURES / 2 {
        let arg = (1u32 << freq) as f64 * std::f64::consts::PI * s;
        pi[2 * freq] = arg.sin();
        pi[2 * freq + 1] = arg.cos();
    }
    pi
}

/// out = W·x for row-major W (rows x cols).
fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        let row = &w[i * cols..(i + 1) * cols];
        out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// out += Wᵀ·y.
fn matvec_t_add(w: &[f64], rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        let row = &w[i * cols..(i + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * y[i];
        }
    }
}

/// g += y ⊗ x (rank-one update of a rows x cols gradient).
fn ger(g: &mut [f64], cols: usize, y: &[f64], x: &[f64]) {
    for (i, &yi) in y.iter().enumerate() {
        let row = &mut g[i * cols..(i + 1) * cols];
        for (r, &xj) in row.iter_mut().zip(x) {
            *r += yi * xj;
        }
    }
}

/// In-place stable softmax.
fn softmax(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

/// Everything forward computes that backward needs again.
struct ForwardCache {
    tau: [f64; TIME_FEATURES],
    z_in: Vec<f64>, // f x d, input normalized to unit rms
    in_scale: f64,  // rms of the raw input (1 when the input is zero)
    skip: Vec<f64>, // f x d, ungated linear skip of the input
    gate: f64,      // time-dependent skip gate
    u: Vec<f64>,    // f x h, tanh activations
    cat: Vec<f64>,  // f x 2d, [frame features; pooled cond] (adapter only)
    attn_w: Vec<f64>, // f x l, cross-attention weights (adapter only)
    k_tok: Vec<f64>,  // l x d (adapter only)
    v_tok: Vec<f64>,  // l x d (adapter only)
    l_tokens: usize,
    x: Vec<f64>,    // f x d, frame features entering temporal attention
    qt: Vec<f64>,   // f x d
    kt: Vec<f64>,   // f x d
    vt: Vec<f64>,   // f x d
    s_w: Vec<f64>,  // f x f, temporal attention weights
    attn: Vec<f64>, // f x d
    y: Vec<f64>,    // f x d, attention output entering the second MLP
    u2: Vec<f64>,   // f x h, second MLP tanh activations
    y2: Vec<f64>,   // f x d, second MLP output entering the head
    out: Vec<f64>,  // f x d
}

/// Condition tokens as flat f64s: either the given embedding or the
/// learned null token.
enum CondTokens<'a> {
    Given(usize, Vec<f64>),
    Null(&'a [f64]),
}

impl CondTokens<'_> {
    fn count(&self) -> usize {
        match self {
            CondTokens::Given(l, _) => *l,
            CondTokens::Null(_) => 1,
        }
    }

    fn data(&self) -> &[f64] {
        match self {
            CondTokens::Given(_, d) => d,
            CondTokens::Null(d) => d,
        }
    }
}

fn forward_cached(
    w: &Weights,
    spec: &DenoiserSpec,
    z: &[f64],
    t: usize,
    cond: Option<&CondEmbedding>,
) -> ForwardCache {
    let (f, d, h) = (spec.frames, spec.dim, spec.hidden);
    let sqrt_d = (d as f64).sqrt();
    let tau = time_features(t, spec.t_max);

    // Scale equivariance: run the network on a unit-rms copy.
    let ms = z.iter().map(|v| v * v).sum::<f64>() / (f * d) as f64;
    let in_scale = if ms > 0.0 { ms.sqrt() } else { 1.0 };
    let z_in: Vec<f64> = z.iter().map(|v| v / in_scale).collect();

    // Time-gated linear skip of the input.
    let (wskip, skip_t) = (w.get("spatial.skip"), w.get("spatial.skip_t"));
    let gate: f64 = skip_t.iter().zip(&tau).map(|(a, b)| a * b).sum();
    let mut skip = vec![0.0; f * d];
    for k in 0..f {
        matvec(wskip, d, d, &z_in[k * d..(k + 1) * d], &mut skip[k * d..(k + 1) * d]);
    }

    // Per-frame MLP.
    let mut u = vec![0.0; f * h];
    let mut s = vec![0.0; f * d];
    let (w1, b1, wt) = (w.get("spatial.w1"), w.get("spatial.b1"), w.get("spatial.wt"));
    let (w2, b2) = (w.get("spatial.w2"), w.get("spatial.b2"));
    let mut t_bias = vec![0.0; h];
    matvec(wt, h, TIME_FEATURES, &tau, &mut t_bias);
    for k in 0..f {
        let zk = &z_in[k * d..(k + 1) * d];
        let uk = &mut u[k * h..(k + 1) * h];
        matvec(w1, h, d, zk, uk);
        for i in 0..h {
            uk[i] = (uk[i] + b1[i] + t_bias[i]).tanh();
        }
        let sk = &mut s[k * d..(k + 1) * d];
        matvec(w2, d, h, &u[k * h..(k + 1) * h], sk);
        for i in 0..d {
            sk[i] += b2[i];
        }
    }

    // Conditioning adapter: pool tokens into one vector per frame.
    let (x, cat, attn_w, k_tok, v_tok, l_tokens);
    if spec.has_adapter {
        let tokens = match cond {
            Some(c) => CondTokens::Given(c.tokens(), c.to_f64()),
            None => CondTokens::Null(w.get("adapter.null")),
        };
        let l = tokens.count();
        let (wka, wva) = (w.get("adapter.wk"), w.get("adapter.wv"));
        let query = w.get("adapter.query");
        let (wproj, bproj) = (w.get("adapter.wproj"), w.get("adapter.bproj"));
        // Time gate on the pooled condition. Where the condition carries no
        // information for a noise level the gate can close, making the
        // conditioned and unconditioned passes identical there, so guidance
        // amplifies nothing.
        let gate_t = w.get("adapter.gate_t");
        let cgate: f64 = gate_t.iter().zip(&tau).map(|(a, b)| a * b).sum();

        let mut kt_ = vec![0.0; l * d];
        let mut vt_ = vec![0.0; l * d];
        for j in 0..l {
            let cj = &tokens.data()[j * d..(j + 1) * d];
            matvec(wka, d, d, cj, &mut kt_[j * d..(j + 1) * d]);
            matvec(wva, d, d, cj, &mut vt_[j * d..(j + 1) * d]);
        }

        let mut aw = vec![0.0; f * l];
        let mut cat_ = vec![0.0; f * 2 * d];
        let mut x_ = vec![0.0; f * d];
        for k in 0..f {
            let qk = &query[k * d..(k + 1) * d];
            let row = &mut aw[k * l..(k + 1) * l];
            for j in 0..l {
                row[j] = qk
                    .iter()
                    .zip(&kt_[j * d..(j + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / sqrt_d;
            }
            softmax(row);
            let ck = &mut cat_[k * 2 * d..(k + 1) * 2 * d];
            ck[..d].copy_from_slice(&s[k * d..(k + 1) * d]);
            for j in 0..l {
                let vj = &vt_[j * d..(j + 1) * d];
                for i in 0..d {
                    ck[d + i] += cgate * row[j] * vj[i];
                }
            }
            let xk = &mut x_[k * d..(k + 1) * d];
            matvec(wproj, d, 2 * d, ck, xk);
            for i in 0..d {
                xk[i] += bproj[i];
            }
        }
        x = x_;
        cat = cat_;
        attn_w = aw;
        k_tok = kt_;
        v_tok = vt_;
        l_tokens = l;
    } else {
        x = s;
        cat = Vec::new();
        attn_w = Vec::new();
        k_tok = Vec::new();
        v_tok = Vec::new();
        l_tokens = 0;
    }

    // Frame-position offsets so the attention tokens carry their slot.
    let mut x = x;
    let wp = w.get("spatial.wp");
    let mut pos_add = vec![0.0; d];
    for k in 0..f {
        let pi = pos_features(k, f);
        matvec(wp, d, POS_FEATURES, &pi, &mut pos_add);
        for i in 0..d {
            x[k * d + i] += pos_add[i];
        }
    }

    // Temporal self-attention with residual.
    let (wq, wk_, wv, wo) = (
        w.get("temporal.wq"),
        w.get("temporal.wk"),
        w.get("temporal.wv"),
        w.get("temporal.wo"),
    );
    let mut qt = vec![0.0; f * d];
    let mut kt = vec![0.0; f * d];
    let mut vt = vec![0.0; f * d];
    for k in 0..f {
        let xk = &x[k * d..(k + 1) * d];
        matvec(wq, d, d, xk, &mut qt[k * d..(k + 1) * d]);
        matvec(wk_, d, d, xk, &mut kt[k * d..(k + 1) * d]);
        matvec(wv, d, d, xk, &mut vt[k * d..(k + 1) * d]);
    }
    let mut s_w = vec![0.0; f * f];
    for k in 0..f {
        let row = &mut s_w[k * f..(k + 1) * f];
        for m in 0..f {
            row[m] = qt[k * d..(k + 1) * d]
                .iter()
                .zip(&kt[m * d..(m + 1) * d])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / sqrt_d;
        }
        softmax(row);
    }
    let mut attn = vec![0.0; f * d];
    for k in 0..f {
        for m in 0..f {
            let sw = s_w[k * f + m];
            for i in 0..d {
                attn[k * d + i] += sw * vt[m * d + i];
            }
        }
    }
    let mut y = vec![0.0; f * d];
    for k in 0..f {
        let yk = &mut y[k * d..(k + 1) * d];
        matvec(wo, d, d, &attn[k * d..(k + 1) * d], yk);
        for i in 0..d {
            yk[i] += x[k * d + i];
        }
    }

    // Second per-frame MLP on the mixed features, residual.
    let (w3, b3, wt2) = (w.get("spatial.w3"), w.get("spatial.b3"), w.get("spatial.wt2"));
    let w4 = w.get("spatial.w4");
    let mut t_bias2 = vec![0.0; h];
    matvec(wt2, h, TIME_FEATURES, &tau, &mut t_bias2);
    let mut u2 = vec![0.0; f * h];
    let mut y2 = y.clone();
    for k in 0..f {
        let uk = &mut u2[k * h..(k + 1) * h];
        matvec(w3, h, d, &y[k * d..(k + 1) * d], uk);
        for i in 0..h {
            uk[i] = (uk[i] + b3[i] + t_bias2[i]).tanh();
        }
        let mut add = vec![0.0; d];
        matvec(w4, d, h, &u2[k * h..(k + 1) * h], &mut add);
        for i in 0..d {
            y2[k * d + i] += add[i];
        }
    }

    // Output head plus the gated skip, rescaled to the input's magnitude.
    let (hw, hb) = (w.get("spatial.head_w"), w.get("spatial.head_b"));
    let mut out = vec![0.0; f * d];
    for k in 0..f {
        let ok = &mut out[k * d..(k + 1) * d];
        matvec(hw, d, d, &y2[k * d..(k + 1) * d], ok);
        for i in 0..d {
            ok[i] = (ok[i] + hb[i] + gate * skip[k * d + i]) * in_scale;
        }
    }

    ForwardCache {
        tau,
        z_in,
        in_scale,
        skip,
        gate,
        u,
        cat,
        attn_w,
        k_tok,
        v_tok,
        l_tokens,
        x,
        qt,
        kt,
        vt,
        s_w,
        attn,
        y,
        u2,
        y2,
        out,
    }
}

/// Backpropagate `dout` (gradient of the loss in the network output)
/// through the cached forward pass, accumulating into `grads`.
fn backward(
    w: &Weights,
    spec: &DenoiserSpec,
    cond: Option<&CondEmbedding>,
    cache: &ForwardCache,
    dout: &[f64],
    grads: &mut BTreeMap<String, Vec<f64>>,
) {
    let (f, d, h) = (spec.frames, spec.dim, spec.hidden);
    let sqrt_d = (d as f64).sqrt();
    // The head output was multiplied by the input scale.
    let dout: Vec<f64> = dout.iter().map(|v| v * cache.in_scale).collect();

    // Time-gated skip.
    {
        let skip_dot: f64 = dout.iter().zip(&cache.skip).map(|(a, b)| a * b).sum();
        let g_gate = grads.get_mut("spatial.skip_t").unwrap();
        for (g, &tj) in g_gate.iter_mut().zip(&cache.tau) {
            *g += skip_dot * tj;
        }
    }
    {
        let g_skip = grads.get_mut("spatial.skip").unwrap();
        for k in 0..f {
            let gd: Vec<f64> = dout[k * d..(k + 1) * d]
                .iter()
                .map(|v| v * cache.gate)
                .collect();
            ger(g_skip, d, &gd, &cache.z_in[k * d..(k + 1) * d]);
        }
    }

    // Head.
    let hw = w.get("spatial.head_w");
    let mut dy2 = vec![0.0; f * d];
    {
        let g_hw = grads.get_mut("spatial.head_w").unwrap();
        for k in 0..f {
            ger(
                g_hw,
                d,
                &dout[k * d..(k + 1) * d],
                &cache.y2[k * d..(k + 1) * d],
            );
        }
    }
    {
        let g_hb = grads.get_mut("spatial.head_b").unwrap();
        for k in 0..f {
            for i in 0..d {
                g_hb[i] += dout[k * d + i];
            }
        }
    }
    for k in 0..f {
        matvec_t_add(
            hw,
            d,
            d,
            &dout[k * d..(k + 1) * d],
            &mut dy2[k * d..(k + 1) * d],
        );
    }

    // Second per-frame MLP (residual: dy starts as dy2).
    let mut dy = dy2.clone();
    let (w3, w4) = (w.get("spatial.w3"), w.get("spatial.w4"));
    for k in 0..f {
        let dy2k = &dy2[k * d..(k + 1) * d];
        let uk = &cache.u2[k * h..(k + 1) * h];
        {
            let g_w4 = grads.get_mut("spatial.w4").unwrap();
            ger(g_w4, h, dy2k, uk);
        }
        let mut du = vec![0.0; h];
        matvec_t_add(w4, d, h, dy2k, &mut du);
        let da: Vec<f64> = du
            .iter()
            .zip(uk)
            .map(|(&g, &ui)| g * (1.0 - ui * ui))
            .collect();
        {
            let g_w3 = grads.get_mut("spatial.w3").unwrap();
            ger(g_w3, d, &da, &cache.y[k * d..(k + 1) * d]);
        }
        {
            let g_b3 = grads.get_mut("spatial.b3").unwrap();
            for i in 0..h {
                g_b3[i] += da[i];
            }
        }
        {
            let g_wt2 = grads.get_mut("spatial.wt2").unwrap();
            ger(g_wt2, TIME_FEATURES, &da, &cache.tau);
        }
        matvec_t_add(w3, h, d, &da, &mut dy[k * d..(k + 1) * d]);
    }

    // Temporal attention (residual: dx starts as dy).
    let mut dx = dy.clone();
    let wo = w.get("temporal.wo");
    let mut d_qt = vec![0.0; f * d];
    let mut d_kt = vec![0.0; f * d];
    let mut d_vt = vec![0.0; f * d];
    {
        let mut dattn_all = vec![0.0; f * d];
        {
            let g_wo = grads.get_mut("temporal.wo").unwrap();
            for k in 0..f {
                ger(
                    g_wo,
                    d,
                    &dy[k * d..(k + 1) * d],
                    &cache.attn[k * d..(k + 1) * d],
                );
                matvec_t_add(
                    wo,
                    d,
                    d,
                    &dy[k * d..(k + 1) * d],
                    &mut dattn_all[k * d..(k + 1) * d],
                );
            }
        }
        for k in 0..f {
            let dattn = &dattn_all[k * d..(k + 1) * d];
            let s_row = &cache.s_w[k * f..(k + 1) * f];
            let mut ds_row = vec![0.0; f];
            for m in 0..f {
                ds_row[m] = dattn
                    .iter()
                    .zip(&cache.vt[m * d..(m + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum();
                for i in 0..d {
                    d_vt[m * d + i] += s_row[m] * dattn[i];
                }
            }
            let dot: f64 = s_row.iter().zip(&ds_row).map(|(a, b)| a * b).sum();
            for m in 0..f {
                let de = s_row[m] * (ds_row[m] - dot) / sqrt_d;
                for i in 0..d {
                    d_qt[k * d + i] += de * cache.kt[m * d + i];
                    d_kt[m * d + i] += de * cache.qt[k * d + i];
                }
            }
        }
    }
    for (wname, gname, dbuf) in [
        ("temporal.wq", "temporal.wq", &d_qt),
        ("temporal.wk", "temporal.wk", &d_kt),
        ("temporal.wv", "temporal.wv", &d_vt),
    ] {
        let wmat = w.get(wname);
        let g = grads.get_mut(gname).unwrap();
        for k in 0..f {
            ger(g, d, &dbuf[k * d..(k + 1) * d], &cache.x[k * d..(k + 1) * d]);
        }
        for k in 0..f {
            matvec_t_add(
                wmat,
                d,
                d,
                &dbuf[k * d..(k + 1) * d],
                &mut dx[k * d..(k + 1) * d],
            );
        }
    }

    // Frame-position offsets (additive, so dx passes through unchanged).
    {
        let g_wp = grads.get_mut("spatial.wp").unwrap();
        for k in 0..f {
            let pi = pos_features(k, f);
            ger(g_wp, POS_FEATURES, &dx[k * d..(k + 1) * d], &pi);
        }
    }

    // Adapter (or pass-through when absent).
    let mut ds = vec![0.0; f * d];
    if spec.has_adapter {
        let l = cache.l_tokens;
        let wproj = w.get("adapter.wproj");
        let query = w.get("adapter.query");
        let gate_t = w.get("adapter.gate_t");
        let cgate: f64 = gate_t.iter().zip(&cache.tau).map(|(a, b)| a * b).sum();
        let mut d_ktok = vec![0.0; l * d];
        let mut d_vtok = vec![0.0; l * d];
        {
            let mut dcat = vec![0.0; 2 * d];
            let mut pooled = vec![0.0; d];
            let mut dtp = vec![0.0; d];
            for k in 0..f {
                let dxk = &dx[k * d..(k + 1) * d];
                {
                    let g_wproj = grads.get_mut("adapter.wproj").unwrap();
                    ger(g_wproj, 2 * d, dxk, &cache.cat[k * 2 * d..(k + 1) * 2 * d]);
                }
                {
                    let g_bproj = grads.get_mut("adapter.bproj").unwrap();
                    for i in 0..d {
                        g_bproj[i] += dxk[i];
                    }
                }
                dcat.iter_mut().for_each(|v| *v = 0.0);
                matvec_t_add(wproj, d, 2 * d, dxk, &mut dcat);
                ds[k * d..(k + 1) * d].copy_from_slice(&dcat[..d]);

                let a_row = &cache.attn_w[k * l..(k + 1) * l];
                // Gate gradient needs the raw pooled vector; rebuild it from
                // the cached attention row and value tokens.
                pooled.iter_mut().for_each(|v| *v = 0.0);
                for j in 0..l {
                    let vj = &cache.v_tok[j * d..(j + 1) * d];
                    for i in 0..d {
                        pooled[i] += a_row[j] * vj[i];
                    }
                }
                let gdot: f64 = dcat[d..].iter().zip(&pooled).map(|(a, b)| a * b).sum();
                {
                    let g_gate = grads.get_mut("adapter.gate_t").unwrap();
                    for (g, &tj) in g_gate.iter_mut().zip(&cache.tau) {
                        *g += gdot * tj;
                    }
                }
                for (dv, &src) in dtp.iter_mut().zip(&dcat[d..]) {
                    *dv = cgate * src;
                }
                let dtp = &dtp[..];
                let mut da = vec![0.0; l];
                for j in 0..l {
                    da[j] = dtp
                        .iter()
                        .zip(&cache.v_tok[j * d..(j + 1) * d])
                        .map(|(a, b)| a * b)
                        .sum();
                    for i in 0..d {
                        d_vtok[j * d + i] += a_row[j] * dtp[i];
                    }
                }
                let dot: f64 = a_row.iter().zip(&da).map(|(a, b)| a * b).sum();
                let qk = &query[k * d..(k + 1) * d];
                let g_query = grads.get_mut("adapter.query").unwrap();
                for j in 0..l {
                    let dr = a_row[j] * (da[j] - dot) / sqrt_d;
                    for i in 0..d {
                        g_query[k * d + i] += dr * cache.k_tok[j * d + i];
                        d_ktok[j * d + i] += dr * qk[i];
                    }
                }
            }
        }
        let tokens: Vec<f64> = match cond {
            Some(c) => c.to_f64(),
            None => w.get("adapter.null").to_vec(),
        };
        {
            let g_wka = grads.get_mut("adapter.wk").unwrap();
            for j in 0..l {
                ger(g_wka, d, &d_ktok[j * d..(j + 1) * d], &tokens[j * d..(j + 1) * d]);
            }
        }
        {
            let g_wva = grads.get_mut("adapter.wv").unwrap();
            for j in 0..l {
                ger(g_wva, d, &d_vtok[j * d..(j + 1) * d], &tokens[j * d..(j + 1) * d]);
            }
        }
        if cond.is_none() {
            // The null token is learned; route token gradients into it.
            let (wka, wva) = (w.get("adapter.wk"), w.get("adapter.wv"));
            let g_null = grads.get_mut("adapter.null").unwrap();
            for j in 0..l {
                matvec_t_add(wka, d, d, &d_ktok[j * d..(j + 1) * d], &mut g_null[j * d..(j + 1) * d]);
                matvec_t_add(wva, d, d, &d_vtok[j * d..(j + 1) * d], &mut g_null[j * d..(j + 1) * d]);
            }
        }
    } else {
        ds.copy_from_slice(&dx);
    }

    // Per-frame MLP.
    let w2 = w.get("spatial.w2");
    for k in 0..f {
        let dsk = &ds[k * d..(k + 1) * d];
        let uk = &cache.u[k * h..(k + 1) * h];
        {
            let g_w2 = grads.get_mut("spatial.w2").unwrap();
            ger(g_w2, h, dsk, uk);
        }
        {
            let g_b2 = grads.get_mut("spatial.b2").unwrap();
            for i in 0..d {
                g_b2[i] += dsk[i];
            }
        }
        let mut du = vec![0.0; h];
        matvec_t_add(w2, d, h, dsk, &mut du);
        let da: Vec<f64> = du
            .iter()
            .zip(uk)
            .map(|(&g, &ui)| g * (1.0 - ui * ui))
            .collect();
        {
            let g_w1 = grads.get_mut("spatial.w1").unwrap();
            ger(g_w1, d, &da, &cache.z_in[k * d..(k + 1) * d]);
        }
        {
            let g_b1 = grads.get_mut("spatial.b1").unwrap();
            for i in 0..h {
                g_b1[i] += da[i];
            }
        }
        {
            let g_wt = grads.get_mut("spatial.wt").unwrap();
            ger(g_wt, TIME_FEATURES, &da, &cache.tau);
        }
    }
}

/// One training example: a noised clip, the noise that made it, the
/// step it was noised to, and the condition (None trains the null
/// token via the classifier-free-guidance path).
pub(crate) struct BatchItem<'a> {
    pub z_t: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: usize,
    pub cond: Option<&'a CondEmbedding>,
}

/// Mean squared noise-prediction error over a batch, averaged over
/// every output entry, plus parameter gradients.
pub(crate) fn batch_loss_and_grads(
    w: &Weights,
    spec: &DenoiserSpec,
    items: &[BatchItem],
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    if items.is_empty() {
        return Err(Error::Invalid("empty training batch".into()));
    }
    let (f, d) = (spec.frames, spec.dim);
    let norm = 1.0 / (f * d) as f64;
    let batch_norm = 1.0 / items.len() as f64;
    let mut grads = zero_grads(w);
    let mut loss = 0.0;
    for item in items {
        let cache = forward_cached(w, spec, &item.z_t, item.t, item.cond);
        let mut dout = vec![0.0; f * d];
        for i in 0..f * d {
            let r = cache.out[i] - item.eps[i];
            loss += r * r * norm * batch_norm;
            dout[i] = 2.0 * r * norm * batch_norm;
        }
        backward(w, spec, item.cond, &cache, &dout, &mut grads);
    }
    Ok((loss, grads))
}

/// Loss only, for held-out evaluation.
pub(crate) fn batch_loss(w: &Weights, spec: &DenoiserSpec, items: &[BatchItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Invalid("empty evaluation batch".into()));
    }
    let (f, d) = (spec.frames, spec.dim);
    let norm = 1.0 / (f * d) as f64 / items.len() as f64;
    let mut loss = 0.0;
    for item in items {
        let cache = forward_cached(w, spec, &item.z_t, item.t, item.cond);
        for i in 0..f * d {
            let r = cache.out[i] - item.eps[i];
            loss += r * r * norm;
        }
    }
    Ok(loss)
}

pub(crate) fn forward_f64(
    w: &Weights,
    spec: &DenoiserSpec,
    z: &[f64],
    t: usize,
    cond: Option<&CondEmbedding>,
) -> Vec<f64> {
    forward_cached(w, spec, z, t, cond).out
}

fn validate_forward_args(
    spec: &DenoiserSpec,
    z_t: &LatentVideo,
    t: usize,
    cond: Option<&CondEmbedding>,
) -> Result<()> {
    spec.validate()?;
    if z_t.frames() != spec.frames || z_t.dim() != spec.dim {
        return Err(Error::Invalid(format!(
            "latent {}x{} does not match spec {}x{}",
            z_t.frames(),
            z_t.dim(),
            spec.frames,
            spec.dim
        )));
    }
    if t < 1 || t > spec.t_max {
        return Err(Error::Invalid(format!(
            "denoising step {t} outside 1..={}",
            spec.t_max
        )));
    }
    if let Some(c) = cond {
        if !spec.has_adapter {
            return Err(Error::Invalid(
                "conditioned call on an adapter-free denoiser".into(),
            ));
        }
        if c.dim() != spec.dim || c.tokens() < 1 {
            return Err(Error::Invalid(format!(
                "condition embedding {}x{} does not match latent dim {}",
                c.tokens(),
                c.dim(),
                spec.dim
            )));
        }
    }
    Ok(())
}

/// Predict the noise inside `z_t` at diffusion step `t`. With no
/// condition the learned null token takes its place.
pub fn denoiser_forward(
    theta: &TensorMap,
    spec: &DenoiserSpec,
    z_t: &LatentVideo,
    t: usize,
    cond: Option<&CondEmbedding>,
) -> Result<LatentVideo> {
    validate_forward_args(spec, z_t, t, cond)?;
    let w = Weights::from_map(theta, spec)?;
    let out = forward_f64(&w, spec, &z_t.to_f64(), t, cond);
    LatentVideo::from_f64(spec.frames, spec.dim, &out)
}

/// Result of comparing analytic gradients against central finite
/// differences over every parameter.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: usize,
    pub max_rel_err: f64,
    pub worst_name: String,
}

/// Check the hand-written backward pass: build a small model and a
/// deterministic batch, then compare every analytic partial derivative
/// with a central finite difference of the same loss.
pub fn gradient_check(
    spec: &DenoiserSpec,
    sched: &NoiseSchedule,
    weight_seed: u64,
    data_seed: u64,
    batch: usize,
    fd_step: f64,
) -> Result<GradCheckReport> {
    spec.validate()?;
    if sched.t_max() != spec.t_max {
        return Err(Error::Invalid(format!(
            "schedule has {} steps, spec wants {}",
            sched.t_max(),
            spec.t_max
        )));
    }
    if !(fd_step.is_finite() && fd_step > 0.0) {
        return Err(Error::Invalid(format!("bad finite-difference step {fd_step}")));
    }
    let total = param_count(spec);
    let init = init_weights(spec, weight_seed)?;
    let w = Weights::from_map(&init, spec)?;

    // Deterministic batch drawn from a small conditioned corpus; odd
    // items drop their condition so null-token gradients are covered.
    let clips = gen_corpus(&SyntheticCorpusSpec {
        count: batch.max(1),
        frames: spec.frames,
        dim: spec.dim,
        motion_magnitude: 0.3,
        conditioned: spec.has_adapter,
        seed: data_seed,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(data_seed));
    let mut items = Vec::new();
    for (i, clip) in clips.iter().enumerate() {
        let t = 1 + (mix64(data_seed ^ i as u64) as usize) % spec.t_max;
        let eps_f32: Vec<f32> = (0..spec.frames * spec.dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect();
        let eps_v = LatentVideo::new(spec.frames, spec.dim, eps_f32)?;
        let z_t = forward_noise(&clip.video, t, &eps_v, sched)?;
        items.push(BatchItem {
            z_t: z_t.to_f64(),
            eps: eps_v.to_f64(),
            t,
            cond: if i % 2 == 0 { clip.cond.as_ref() } else { None },
        });
    }

    let (_, grads) = batch_loss_and_grads(&w, spec, &items)?;
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let names: Vec<String> = w.names().map(str::to_string).collect();
    for name in &names {
        let len = w.get(name).len();
        for idx in 0..len {
            let mut wp = w.clone();
            wp.get_mut(name)[idx] += fd_step;
            let lp = batch_loss(&wp, spec, &items)?;
            let mut wm = w.clone();
            wm.get_mut(name)[idx] -= fd_step;
            let lm = batch_loss(&wm, spec, &items)?;
            let fd = (lp - lm) / (2.0 * fd_step);
            let g = grads[name][idx];
            let rel = (fd - g).abs() / g.abs().max(fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name}[{idx}]");
            }
        }
    }
    Ok(GradCheckReport {
        params: total,
        max_rel_err: max_rel,
        worst_name: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::{build_schedule, ScheduleKind};
    use crate::diffusion::{MagnitudeClass, MotionCommand};

    fn tiny_spec() -> DenoiserSpec {
        DenoiserSpec {
            frames: 3,
            dim: 4,
            hidden: 4,
            has_adapter: true,
            t_max: 5,
        }
    }

    fn default_spec() -> DenoiserSpec {
        DenoiserSpec {
            frames: 8,
            dim: 16,
            hidden: 32,
            has_adapter: true,
            t_max: 50,
        }
    }

    #[test]
    fn manifest_is_sorted_and_partitioned() {
        let spec = default_spec();
        let m = manifest(&spec);
        let names: Vec<&str> = m.iter().map(|(n, _)| n.as_str()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        assert!(names.iter().all(|n| {
            n.starts_with("adapter.") || n.starts_with("spatial.") || n.starts_with("temporal.")
        }));
        let bare = manifest(&DenoiserSpec {
            has_adapter: false,
            ..spec
        });
        assert!(bare.iter().all(|(n, _)| !n.starts_with("adapter.")));
    }

    #[test]
    fn tiny_model_fits_gradcheck_budget() {
        assert!(param_count(&tiny_spec()) <= 500);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases_and_null() {
        let spec = default_spec();
        let a = init_weights(&spec, 7).unwrap();
        let b = init_weights(&spec, 7).unwrap();
        assert!(crate::tensor_store::bitwise_equal(&a, &b));
        let c = init_weights(&spec, 8).unwrap();
        assert!(!crate::tensor_store::bitwise_equal(&a, &c));
        assert!(a.get("spatial.b1").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(a.get("adapter.null").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(a.get("spatial.w1").unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn weights_round_trip_and_reject_mismatch() {
        let spec = tiny_spec();
        let map = init_weights(&spec, 1).unwrap();
        let w = Weights::from_map(&map, &spec).unwrap();
        let back = w.to_map("pretrained").unwrap();
        assert!(crate::tensor_store::bitwise_equal(&map, &back));

        let bare = DenoiserSpec {
            has_adapter: false,
            ..spec.clone()
        };
        let err = Weights::from_map(&init_weights(&bare, 1).unwrap(), &spec).unwrap_err();
        assert!(err.to_string().contains("adapter"), "{err}");
        // extra tensor outside the manifest
        let mut extra = map.clone();
        extra
            .insert("rogue", Tensor::new(vec![1], vec![1.0]).unwrap())
            .unwrap();
        assert!(Weights::from_map(&extra, &spec).is_err());
    }

    #[test]
    fn zero_weights_predict_zero_noise() {
        let spec = tiny_spec();
        let mut map = TensorMap::new("pretrained").unwrap();
        for (name, shape) in manifest(&spec) {
            let numel = shape.iter().product();
            map.insert(&name, Tensor::new(shape, vec![0.0; numel]).unwrap())
                .unwrap();
        }
        let z = LatentVideo::new(3, 4, vec![1.5; 12]).unwrap();
        let cond =
            CondEmbedding::for_command(MotionCommand::Right, MagnitudeClass::High, 4).unwrap();
        for c in [None, Some(&cond)] {
            let out = denoiser_forward(&map, &spec, &z, 3, c).unwrap();
            assert_eq!(out.frames(), 3);
            assert_eq!(out.dim(), 4);
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let spec = tiny_spec();
        let map = init_weights(&spec, 5).unwrap();
        let z = LatentVideo::new(3, 4, (0..12).map(|i| i as f32 * 0.1).collect()).unwrap();
        let a = denoiser_forward(&map, &spec, &z, 2, None).unwrap();
        let b = denoiser_forward(&map, &spec, &z, 2, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames() * a.dim(), 12);
    }

    #[test]
    fn condition_changes_trained_output() {
        let spec = tiny_spec();
        let map = init_weights(&spec, 5).unwrap();
        let z = LatentVideo::new(3, 4, vec![0.4; 12]).unwrap();
        let cond =
            CondEmbedding::for_command(MotionCommand::Left, MagnitudeClass::High, 4).unwrap();
        let with = denoiser_forward(&map, &spec, &z, 2, Some(&cond)).unwrap();
        let without = denoiser_forward(&map, &spec, &z, 2, None).unwrap();
        let max_diff = with
            .data()
            .iter()
            .zip(without.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff > 0.0);
    }

    #[test]
    fn closed_condition_gate_makes_branches_identical() {
        // With the time gate forced to zero the conditioned and the
        // unconditioned pass compute the same function, so guidance at
        // any scale has nothing to amplify.
        let spec = tiny_spec();
        let src = init_weights(&spec, 5).unwrap();
        let mut map = TensorMap::new("pretrained").unwrap();
        for (name, shape) in manifest(&spec) {
            let tensor = if name == "adapter.gate_t" {
                let numel = shape.iter().product();
                Tensor::new(shape, vec![0.0; numel]).unwrap()
            } else {
                src.get(&name).unwrap().clone()
            };
            map.insert(&name, tensor).unwrap();
        }
        let z = LatentVideo::new(3, 4, vec![0.4; 12]).unwrap();
        let cond =
            CondEmbedding::for_command(MotionCommand::Left, MagnitudeClass::High, 4).unwrap();
        let with = denoiser_forward(&map, &spec, &z, 2, Some(&cond)).unwrap();
        let without = denoiser_forward(&map, &spec, &z, 2, None).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn frame_order_changes_the_prediction() {
        // Reversing the input frames must not just reverse the output:
        // the position offsets make slots distinguishable, which is what
        // lets the sampler assemble frames in a consistent order.
        let spec = tiny_spec();
        let map = init_weights(&spec, 5).unwrap();
        let data: Vec<f32> = (0..12).map(|i| 0.3 * i as f32 - 1.0).collect();
        let rev: Vec<f32> = data
            .chunks(4)
            .rev()
            .flat_map(|fr| fr.iter().copied())
            .collect();
        let z = LatentVideo::new(3, 4, data).unwrap();
        let z_rev = LatentVideo::new(3, 4, rev).unwrap();
        let a = denoiser_forward(&map, &spec, &z, 2, None).unwrap();
        let b = denoiser_forward(&map, &spec, &z_rev, 2, None).unwrap();
        let max_diff = (0..3)
            .flat_map(|k| {
                a.frame(k)
                    .iter()
                    .zip(b.frame(2 - k))
                    .map(|(x, y)| (x - y).abs())
            })
            .fold(0.0f32, f32::max);
        assert!(max_diff > 1e-3, "reversal symmetry survived: {max_diff}");
    }

    #[test]
    fn prediction_scales_with_input_magnitude() {
        let spec = tiny_spec();
        let map = init_weights(&spec, 5).unwrap();
        let z =
            LatentVideo::new(3, 4, (0..12).map(|i| 0.3 * i as f32 - 1.0).collect()).unwrap();
        let scaled =
            LatentVideo::new(3, 4, z.data().iter().map(|v| v * 3.0).collect()).unwrap();
        let once = denoiser_forward(&map, &spec, &z, 2, None).unwrap();
        let thrice = denoiser_forward(&map, &spec, &scaled, 2, None).unwrap();
        for (a, b) in once.data().iter().zip(thrice.data()) {
            assert!((b - 3.0 * a).abs() < 1e-5, "{b} vs {}", 3.0 * a);
        }
    }

    #[test]
    fn forward_validates_inputs() {
        let spec = tiny_spec();
        let map = init_weights(&spec, 5).unwrap();
        let z = LatentVideo::new(3, 4, vec![0.0; 12]).unwrap();
        let z_bad = LatentVideo::new(4, 4, vec![0.0; 16]).unwrap();
        assert!(denoiser_forward(&map, &spec, &z_bad, 2, None).is_err());
        assert!(denoiser_forward(&map, &spec, &z, 0, None).is_err());
        assert!(denoiser_forward(&map, &spec, &z, 6, None).is_err());

        let bare = DenoiserSpec {
            has_adapter: false,
            ..spec
        };
        let bare_map = init_weights(&bare, 5).unwrap();
        let cond =
            CondEmbedding::for_command(MotionCommand::Up, MagnitudeClass::Low, 4).unwrap();
        assert!(denoiser_forward(&bare_map, &bare, &z, 2, Some(&cond)).is_err());
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let spec = tiny_spec();
        let sched = build_schedule(spec.t_max, ScheduleKind::LinearBeta).unwrap();
        let report = gradient_check(&spec, &sched, 3, 17, 2, 1e-4).unwrap();
        assert!(report.params <= 500);
        assert!(
            report.max_rel_err < 1e-3,
            "worst {} at {}",
            report.max_rel_err,
            report.worst_name
        );
    }

    #[test]
    fn gradients_flow_into_null_token_only_when_unconditioned() {
        let spec = tiny_spec();
        let map = init_weights(&spec, 9).unwrap();
        let w = Weights::from_map(&map, &spec).unwrap();
        let cond =
            CondEmbedding::for_command(MotionCommand::Down, MagnitudeClass::High, 4).unwrap();
        fn mk_item(c: Option<&CondEmbedding>) -> BatchItem<'_> {
            BatchItem {
                z_t: (0..12).map(|i| 0.1 * i as f64).collect(),
                eps: vec![0.5; 12],
                t: 2,
                cond: c,
            }
        }
        let (_, g_cond) =
            batch_loss_and_grads(&w, &spec, std::slice::from_ref(&mk_item(Some(&cond)))).unwrap();
        let (_, g_null) =
            batch_loss_and_grads(&w, &spec, std::slice::from_ref(&mk_item(None))).unwrap();
        assert!(g_cond["adapter.null"].iter().all(|&v| v == 0.0));
        assert!(g_null["adapter.null"].iter().any(|&v| v != 0.0));
    }
}
