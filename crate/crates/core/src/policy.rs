//! A tiny decoder-only autoregressive policy.
//!
//! Two pre-norm transformer blocks over a 32-token vocabulary: learned token
//! and position embeddings, multi-head causal self-attention without biases,
//! a SiLU MLP, layer norms with weight and bias, and a separate (untied)
//! output head. Forward, sampling, and the exact gradient of a completion's
//! log-probability are all hand-rolled in `f64`; weights live in `f32`
//! [`WeightSet`]s and are widened on construction.
//!
//! Sequences are `prompt ++ completion`. Token id 0 is EOS: sampling stops
//! when it is drawn, or after `max_completion_len` tokens. A completion is
//! well-formed when EOS appears only at its end and every completion shorter
//! than the cap ends with EOS — under that convention the policy is a
//! normalized distribution over completions for every prompt.

use crate::rng::derive_rng;
use crate::tensor::{dot_f64, TensorGroup, WeightSet};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// End-of-sequence token id. Fixed by convention, not configurable.
pub const EOS_TOKEN: u32 = 0;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("architecture: {0}")]
    BadArch(String),
    #[error("weight schema: {0}")]
    BadSchema(String),
    #[error("token {token} out of range for vocab {vocab}")]
    BadToken { token: u32, vocab: usize },
    #[error("prompt length {got} outside 1..={max}")]
    BadPromptLen { got: usize, max: usize },
    #[error("completion length {got} outside 1..={max}")]
    BadCompletionLen { got: usize, max: usize },
    #[error("EOS inside completion at step {0}; EOS may only terminate")]
    InteriorEos(usize),
    #[error("completion shorter than {max} must end with EOS")]
    MissingEos { max: usize },
    #[error("temperature {0} must be finite and >= 0")]
    BadTemperature(f64),
}

/// Model shape. The defaults are the desk-scale configuration used across
/// the experiments; anything larger is possible but untested for speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_blocks")]
    pub n_blocks: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_mlp_hidden")]
    pub mlp_hidden: usize,
    #[serde(default = "default_prompt_len")]
    pub max_prompt_len: usize,
    #[serde(default = "default_completion_len")]
    pub max_completion_len: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_vocab() -> usize {
    32
}
fn default_embed() -> usize {
    32
}
fn default_blocks() -> usize {
    2
}
fn default_heads() -> usize {
    2
}
fn default_mlp_hidden() -> usize {
    64
}
fn default_prompt_len() -> usize {
    4
}
fn default_completion_len() -> usize {
    16
}
fn default_ln_eps() -> f64 {
    1e-5
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            vocab_size: default_vocab(),
            embed_dim: default_embed(),
            n_blocks: default_blocks(),
            n_heads: default_heads(),
            mlp_hidden: default_mlp_hidden(),
            max_prompt_len: default_prompt_len(),
            max_completion_len: default_completion_len(),
            ln_eps: default_ln_eps(),
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.vocab_size < 2 {
            return Err(PolicyError::BadArch("vocab_size must be >= 2".into()));
        }
        if self.embed_dim == 0 || self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads)
        {
            return Err(PolicyError::BadArch(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.n_blocks == 0 || self.mlp_hidden == 0 {
            return Err(PolicyError::BadArch(
                "n_blocks and mlp_hidden must be positive".into(),
            ));
        }
        if self.max_prompt_len == 0 || self.max_completion_len == 0 {
            return Err(PolicyError::BadArch(
                "max_prompt_len and max_completion_len must be positive".into(),
            ));
        }
        if !(self.ln_eps.is_finite() && self.ln_eps > 0.0) {
            return Err(PolicyError::BadArch("ln_eps must be positive".into()));
        }
        Ok(())
    }

    /// Rows in the position-embedding table.
    pub fn max_positions(&self) -> usize {
        self.max_prompt_len + self.max_completion_len
    }

    fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    /// Flat length of one block's fused parameter group.
    fn block_len(&self) -> usize {
        let d = self.embed_dim;
        4 * d + 4 * d * d + 2 * self.mlp_hidden * d
    }

    /// The weight-set schema this architecture expects: embeddings, one
    /// fused group per block, the final norm, and the untied output head.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let mut s = vec![
            ("tok_embed".to_string(), vec![self.vocab_size, d]),
            ("pos_embed".to_string(), vec![self.max_positions(), d]),
        ];
        for b in 0..self.n_blocks {
            s.push((format!("block_{b}"), vec![self.block_len()]));
        }
        s.push(("final_norm".to_string(), vec![2, d]));
        s.push(("lm_head".to_string(), vec![self.vocab_size, d]));
        s
    }

    pub fn param_count(&self) -> usize {
        self.schema()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Offsets into a block's fused flat group, in a fixed order.
#[derive(Debug, Clone, Copy)]
struct BlockOffsets {
    ln1_w: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_w: usize,
    ln2_b: usize,
    w_up: usize,
    w_down: usize,
    len: usize,
}

impl BlockOffsets {
    fn for_arch(arch: &ArchConfig) -> Self {
        let d = arch.embed_dim;
        let h = arch.mlp_hidden;
        let ln1_w = 0;
        let ln1_b = ln1_w + d;
        let wq = ln1_b + d;
        let wk = wq + d * d;
        let wv = wk + d * d;
        let wo = wv + d * d;
        let ln2_w = wo + d * d;
        let ln2_b = ln2_w + d;
        let w_up = ln2_b + d;
        let w_down = w_up + h * d;
        let len = w_down + d * h;
        BlockOffsets {
            ln1_w,
            ln1_b,
            wq,
            wk,
            wv,
            wo,
            ln2_w,
            ln2_b,
            w_up,
            w_down,
            len,
        }
    }
}

/// Gaussian via Box–Muller on a deterministic stream.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fresh random weights: N(0, 0.02^2) for embeddings, projections, and the
/// head; layer-norm weights 1 and biases 0.
pub fn init_policy(arch: &ArchConfig, seed: u64) -> Result<WeightSet, PolicyError> {
    arch.validate()?;
    let mut rng = derive_rng(seed, "policy-init", 0);
    let off = BlockOffsets::for_arch(arch);
    let d = arch.embed_dim;
    let mut groups = Vec::new();
    let gauss_vec = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f32> {
        (0..n).map(|_| (0.02 * gaussian(rng)) as f32).collect()
    };
    groups.push(TensorGroup::new(
        "tok_embed",
        vec![arch.vocab_size, d],
        gauss_vec(arch.vocab_size * d, &mut rng),
    ));
    groups.push(TensorGroup::new(
        "pos_embed",
        vec![arch.max_positions(), d],
        gauss_vec(arch.max_positions() * d, &mut rng),
    ));
    for b in 0..arch.n_blocks {
        let mut data = vec![0.0f32; off.len];
        for i in 0..d {
            data[off.ln1_w + i] = 1.0;
            data[off.ln2_w + i] = 1.0;
        }
        for range in [
            off.wq..off.wq + d * d,
            off.wk..off.wk + d * d,
            off.wv..off.wv + d * d,
            off.wo..off.wo + d * d,
            off.w_up..off.w_up + arch.mlp_hidden * d,
            off.w_down..off.w_down + d * arch.mlp_hidden,
        ] {
            for i in range {
                data[i] = (0.02 * gaussian(&mut rng)) as f32;
            }
        }
        groups.push(TensorGroup::new(format!("block_{b}"), vec![off.len], data));
    }
    let mut fin = vec![0.0f32; 2 * d];
    for w in fin.iter_mut().take(d) {
        *w = 1.0;
    }
    groups.push(TensorGroup::new("final_norm", vec![2, d], fin));
    groups.push(TensorGroup::new(
        "lm_head",
        vec![arch.vocab_size, d],
        gauss_vec(arch.vocab_size * d, &mut rng),
    ));
    WeightSet::new(groups).map_err(|e| PolicyError::BadSchema(e.to_string()))
}

struct BlockParams {
    ln1_w: Vec<f64>,
    ln1_b: Vec<f64>,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    ln2_w: Vec<f64>,
    ln2_b: Vec<f64>,
    w_up: Vec<f64>,
    w_down: Vec<f64>,
}

/// A policy ready to run: architecture plus `f64` copies of the weights.
pub struct PolicyNet {
    arch: ArchConfig,
    tok: Vec<f64>,
    pos: Vec<f64>,
    blocks: Vec<BlockParams>,
    fin_w: Vec<f64>,
    fin_b: Vec<f64>,
    head: Vec<f64>,
}

/// One sampled completion with its model log-probability (temperature 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub tokens: Vec<u32>,
    /// Total log pi(completion | prompt) under the model.
    pub logprob: f64,
    /// Per-step log-probabilities of each emitted token.
    pub step_logprobs: Vec<f64>,
}

/// Gradient with the same group structure as the weight schema, in `f64`.
pub struct GradSet {
    pub groups: Vec<Vec<f64>>,
}

impl GradSet {
    pub fn zeros_like(ws: &WeightSet) -> Self {
        GradSet {
            groups: ws
                .groups()
                .iter()
                .map(|g| vec![0.0; g.data.len()])
                .collect(),
        }
    }

    /// `self += c * other`, group by group.
    pub fn add_scaled(&mut self, other: &GradSet, c: f64) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.groups {
            for x in g.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| dot_f64(g, g))
            .sum::<f64>()
            .sqrt()
    }
}

/// Everything the backward pass needs, retained per forward position.
/// Raw residual-stream values are not kept: the residual path passes
/// gradients through unchanged and layer-norm backward needs only the
/// normalized values and reciprocal standard deviations.
struct Trace {
    n: usize,
    blocks: Vec<BlockTrace>,
    f_xhat: Vec<f64>,
    f_rstd: Vec<f64>,
    /// Final-norm output; logits at position t are `head * fh[t]`.
    fh: Vec<f64>,
}

struct BlockTrace {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    u: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention weights, `[head][query][key]` flattened, zero above diagonal.
    att: Vec<f64>,
    o: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    z: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let inn = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot_f64(&w[i * inn..(i + 1) * inn], x);
    }
}

/// `dx += W^T dy` for row-major `W[out x in]`.
fn matvec_t_acc(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let inn = dx.len();
    for (i, &dyi) in dy.iter().enumerate() {
        if dyi == 0.0 {
            continue;
        }
        let row = &w[i * inn..(i + 1) * inn];
        for (x, &wj) in dx.iter_mut().zip(row) {
            *x += wj * dyi;
        }
    }
}

/// `dW += dy (outer) x`.
fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let inn = x.len();
    for (i, &dyi) in dy.iter().enumerate() {
        if dyi == 0.0 {
            continue;
        }
        let row = &mut dw[i * inn..(i + 1) * inn];
        for (w, &xj) in row.iter_mut().zip(x) {
            *w += dyi * xj;
        }
    }
}

fn layer_norm(x: &[f64], w: &[f64], b: &[f64], eps: f64, out: &mut [f64], xhat: &mut [f64]) -> f64 {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        out[i] = w[i] * xhat[i] + b[i];
    }
    rstd
}

/// Backward through layer norm. Returns nothing; accumulates into `dx`,
/// `dw`, `db`.
fn layer_norm_backward(
    dout: &[f64],
    xhat: &[f64],
    rstd: f64,
    w: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let d = dout.len() as f64;
    let mut m1 = 0.0; // mean of dxhat
    let mut m2 = 0.0; // mean of dxhat * xhat
    for i in 0..dout.len() {
        let dxh = dout[i] * w[i];
        m1 += dxh;
        m2 += dxh * xhat[i];
    }
    m1 /= d;
    m2 /= d;
    for i in 0..dout.len() {
        let dxh = dout[i] * w[i];
        dx[i] += rstd * (dxh - m1 - xhat[i] * m2);
        dw[i] += dout[i] * xhat[i];
        db[i] += dout[i];
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-softmax of `logits` in place; returns the log-partition value.
fn log_softmax(logits: &mut [f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    for l in logits.iter_mut() {
        *l -= lse;
    }
    lse
}

impl PolicyNet {
    /// Widen `weights` to `f64` and check them against the architecture's
    /// schema (names, order, shapes).
    pub fn from_weights(arch: &ArchConfig, weights: &WeightSet) -> Result<Self, PolicyError> {
        arch.validate()?;
        let expected = arch.schema();
        let got = weights.schema();
        if expected != got {
            return Err(PolicyError::BadSchema(format!(
                "expected {expected:?}, got {got:?}"
            )));
        }
        let off = BlockOffsets::for_arch(arch);
        let widen =
            |g: &TensorGroup| -> Vec<f64> { g.data.iter().map(|&v| f64::from(v)).collect() };
        let gs = weights.groups();
        let tok = widen(&gs[0]);
        let pos = widen(&gs[1]);
        let mut blocks = Vec::with_capacity(arch.n_blocks);
        for b in 0..arch.n_blocks {
            let flat = widen(&gs[2 + b]);
            let d = arch.embed_dim;
            let h = arch.mlp_hidden;
            blocks.push(BlockParams {
                ln1_w: flat[off.ln1_w..off.ln1_w + d].to_vec(),
                ln1_b: flat[off.ln1_b..off.ln1_b + d].to_vec(),
                wq: flat[off.wq..off.wq + d * d].to_vec(),
                wk: flat[off.wk..off.wk + d * d].to_vec(),
                wv: flat[off.wv..off.wv + d * d].to_vec(),
                wo: flat[off.wo..off.wo + d * d].to_vec(),
                ln2_w: flat[off.ln2_w..off.ln2_w + d].to_vec(),
                ln2_b: flat[off.ln2_b..off.ln2_b + d].to_vec(),
                w_up: flat[off.w_up..off.w_up + h * d].to_vec(),
                w_down: flat[off.w_down..off.w_down + d * h].to_vec(),
            });
        }
        let fin = widen(&gs[2 + arch.n_blocks]);
        let d = arch.embed_dim;
        Ok(PolicyNet {
            arch: arch.clone(),
            tok,
            pos,
            blocks,
            fin_w: fin[0..d].to_vec(),
            fin_b: fin[d..2 * d].to_vec(),
            head: widen(&gs[3 + arch.n_blocks]),
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), PolicyError> {
        for &t in tokens {
            if t as usize >= self.arch.vocab_size {
                return Err(PolicyError::BadToken {
                    token: t,
                    vocab: self.arch.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn check_prompt(&self, prompt: &[u32]) -> Result<(), PolicyError> {
        if prompt.is_empty() || prompt.len() > self.arch.max_prompt_len {
            return Err(PolicyError::BadPromptLen {
                got: prompt.len(),
                max: self.arch.max_prompt_len,
            });
        }
        self.check_tokens(prompt)
    }

    /// Well-formedness of a full completion: nonempty, within the cap, EOS
    /// only terminal, and mandatory EOS when shorter than the cap.
    fn check_completion(&self, completion: &[u32]) -> Result<(), PolicyError> {
        let max = self.arch.max_completion_len;
        if completion.is_empty() || completion.len() > max {
            return Err(PolicyError::BadCompletionLen {
                got: completion.len(),
                max,
            });
        }
        self.check_tokens(completion)?;
        for (i, &t) in completion.iter().enumerate() {
            if t == EOS_TOKEN && i + 1 != completion.len() {
                return Err(PolicyError::InteriorEos(i));
            }
        }
        if completion.len() < max && *completion.last().unwrap() != EOS_TOKEN {
            return Err(PolicyError::MissingEos { max });
        }
        Ok(())
    }

    /// Full forward over `tokens`, retaining activations for backward.
    fn forward(&self, tokens: &[u32]) -> Trace {
        let n = tokens.len();
        let d = self.arch.embed_dim;
        let nh = self.arch.n_heads;
        let hd = self.arch.head_dim();
        let hidden = self.arch.mlp_hidden;
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x = vec![0.0; n * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let te = &self.tok[tok as usize * d..(tok as usize + 1) * d];
            let pe = &self.pos[t * d..(t + 1) * d];
            for i in 0..d {
                x[t * d + i] = te[i] + pe[i];
            }
        }

        let mut blocks_trace = Vec::with_capacity(self.blocks.len());
        for bp in &self.blocks {
            let x_in = x;
            let mut xhat1 = vec![0.0; n * d];
            let mut rstd1 = vec![0.0; n];
            let mut u = vec![0.0; n * d];
            for t in 0..n {
                rstd1[t] = layer_norm(
                    &x_in[t * d..(t + 1) * d],
                    &bp.ln1_w,
                    &bp.ln1_b,
                    self.arch.ln_eps,
                    &mut u[t * d..(t + 1) * d],
                    &mut xhat1[t * d..(t + 1) * d],
                );
            }
            let mut q = vec![0.0; n * d];
            let mut k = vec![0.0; n * d];
            let mut v = vec![0.0; n * d];
            for t in 0..n {
                let ut = &u[t * d..(t + 1) * d];
                matvec(&bp.wq, ut, &mut q[t * d..(t + 1) * d]);
                matvec(&bp.wk, ut, &mut k[t * d..(t + 1) * d]);
                matvec(&bp.wv, ut, &mut v[t * d..(t + 1) * d]);
            }
            let mut att = vec![0.0; nh * n * n];
            let mut o = vec![0.0; n * d];
            for h in 0..nh {
                let hoff = h * hd;
                for t in 0..n {
                    let qt = &q[t * d + hoff..t * d + hoff + hd];
                    let row = &mut att[h * n * n + t * n..h * n * n + t * n + t + 1];
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &k[j * d + hoff..j * d + hoff + hd];
                        *r = dot_f64(qt, kj) * scale;
                    }
                    // softmax over j <= t
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - m).exp();
                        sum += *r;
                    }
                    for r in row.iter_mut() {
                        *r /= sum;
                    }
                    let ot = &mut o[t * d + hoff..t * d + hoff + hd];
                    for j in 0..=t {
                        let a = att[h * n * n + t * n + j];
                        let vj = &v[j * d + hoff..j * d + hoff + hd];
                        for (oi, &vv) in ot.iter_mut().zip(vj) {
                            *oi += a * vv;
                        }
                    }
                }
            }
            let mut x2 = vec![0.0; n * d];
            for t in 0..n {
                let mut ao = vec![0.0; d];
                matvec(&bp.wo, &o[t * d..(t + 1) * d], &mut ao);
                for i in 0..d {
                    x2[t * d + i] = x_in[t * d + i] + ao[i];
                }
            }
            let mut xhat2 = vec![0.0; n * d];
            let mut rstd2 = vec![0.0; n];
            let mut z = vec![0.0; n * d];
            for t in 0..n {
                rstd2[t] = layer_norm(
                    &x2[t * d..(t + 1) * d],
                    &bp.ln2_w,
                    &bp.ln2_b,
                    self.arch.ln_eps,
                    &mut z[t * d..(t + 1) * d],
                    &mut xhat2[t * d..(t + 1) * d],
                );
            }
            let mut pre = vec![0.0; n * hidden];
            let mut act = vec![0.0; n * hidden];
            let mut x3 = vec![0.0; n * d];
            for t in 0..n {
                matvec(
                    &bp.w_up,
                    &z[t * d..(t + 1) * d],
                    &mut pre[t * hidden..(t + 1) * hidden],
                );
                for i in 0..hidden {
                    let p = pre[t * hidden + i];
                    act[t * hidden + i] = p * sigmoid(p);
                }
                let mut mo = vec![0.0; d];
                matvec(&bp.w_down, &act[t * hidden..(t + 1) * hidden], &mut mo);
                for i in 0..d {
                    x3[t * d + i] = x2[t * d + i] + mo[i];
                }
            }
            x = x3;
            blocks_trace.push(BlockTrace {
                xhat1,
                rstd1,
                u,
                q,
                k,
                v,
                att,
                o,
                xhat2,
                rstd2,
                z,
                pre,
                act,
            });
        }

        let mut f_xhat = vec![0.0; n * d];
        let mut f_rstd = vec![0.0; n];
        let mut fh = vec![0.0; n * d];
        for t in 0..n {
            f_rstd[t] = layer_norm(
                &x[t * d..(t + 1) * d],
                &self.fin_w,
                &self.fin_b,
                self.arch.ln_eps,
                &mut fh[t * d..(t + 1) * d],
                &mut f_xhat[t * d..(t + 1) * d],
            );
        }
        Trace {
            n,
            blocks: blocks_trace,
            f_xhat,
            f_rstd,
            fh,
        }
    }

    /// Raw logits (temperature 1) at one position of a trace.
    fn logits_at(&self, trace: &Trace, t: usize) -> Vec<f64> {
        let d = self.arch.embed_dim;
        let mut logits = vec![0.0; self.arch.vocab_size];
        matvec(&self.head, &trace.fh[t * d..(t + 1) * d], &mut logits);
        logits
    }

    /// Log-probability of a well-formed completion, total and per step.
    pub fn logprob(
        &self,
        prompt: &[u32],
        completion: &[u32],
    ) -> Result<(f64, Vec<f64>), PolicyError> {
        self.check_prompt(prompt)?;
        self.check_completion(completion)?;
        let k = prompt.len();
        let mut seq: Vec<u32> = Vec::with_capacity(k + completion.len() - 1);
        seq.extend_from_slice(prompt);
        seq.extend_from_slice(&completion[..completion.len() - 1]);
        let trace = self.forward(&seq);
        let mut steps = Vec::with_capacity(completion.len());
        let mut total = 0.0;
        for (j, &c) in completion.iter().enumerate() {
            let mut logits = self.logits_at(&trace, k - 1 + j);
            log_softmax(&mut logits);
            let lp = logits[c as usize];
            steps.push(lp);
            total += lp;
        }
        Ok((total, steps))
    }

    /// Per-step full log-distributions (temperature 1) along a completion:
    /// row `j` is `log pi(. | prompt, completion[..j])` over the vocabulary.
    pub fn step_logdists(
        &self,
        prompt: &[u32],
        completion: &[u32],
    ) -> Result<Vec<Vec<f64>>, PolicyError> {
        self.check_prompt(prompt)?;
        self.check_completion(completion)?;
        let k = prompt.len();
        let mut seq: Vec<u32> = Vec::with_capacity(k + completion.len() - 1);
        seq.extend_from_slice(prompt);
        seq.extend_from_slice(&completion[..completion.len() - 1]);
        let trace = self.forward(&seq);
        let mut rows = Vec::with_capacity(completion.len());
        for j in 0..completion.len() {
            let mut logits = self.logits_at(&trace, k - 1 + j);
            log_softmax(&mut logits);
            rows.push(logits);
        }
        Ok(rows)
    }

    /// Sample one completion. `temperature` scales the logits before the
    /// draw (0 means greedy argmax); the recorded log-probabilities are
    /// always the model's, at temperature 1.
    pub fn sample(
        &self,
        prompt: &[u32],
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Completion, PolicyError> {
        self.check_prompt(prompt)?;
        if !temperature.is_finite() || temperature < 0.0 {
            return Err(PolicyError::BadTemperature(temperature));
        }
        let mut seq: Vec<u32> = prompt.to_vec();
        let mut tokens = Vec::new();
        let mut step_logprobs = Vec::new();
        for _ in 0..self.arch.max_completion_len {
            let trace = self.forward(&seq);
            let mut logits = self.logits_at(&trace, seq.len() - 1);
            let next = if temperature == 0.0 {
                argmax(&logits)
            } else {
                draw_scaled(&logits, temperature, rng)
            };
            log_softmax(&mut logits);
            step_logprobs.push(logits[next]);
            tokens.push(next as u32);
            if next as u32 == EOS_TOKEN {
                break;
            }
            seq.push(next as u32);
        }
        let logprob = step_logprobs.iter().sum();
        Ok(Completion {
            tokens,
            logprob,
            step_logprobs,
        })
    }

    /// Exact gradient of `log pi(completion | prompt)` with respect to every
    /// parameter, in schema group order.
    pub fn grad_logprob(
        &self,
        prompt: &[u32],
        completion: &[u32],
    ) -> Result<(f64, GradSet), PolicyError> {
        self.check_prompt(prompt)?;
        self.check_completion(completion)?;
        let arch = &self.arch;
        let d = arch.embed_dim;
        let nh = arch.n_heads;
        let hd = arch.head_dim();
        let hidden = arch.mlp_hidden;
        let scale = 1.0 / (hd as f64).sqrt();
        let off = BlockOffsets::for_arch(arch);
        let k = prompt.len();

        let mut seq: Vec<u32> = Vec::with_capacity(k + completion.len() - 1);
        seq.extend_from_slice(prompt);
        seq.extend_from_slice(&completion[..completion.len() - 1]);
        let trace = self.forward(&seq);
        let n = trace.n;

        let mut d_tok = vec![0.0; arch.vocab_size * d];
        let mut d_pos = vec![0.0; arch.max_positions() * d];
        let mut d_blocks: Vec<Vec<f64>> = (0..arch.n_blocks).map(|_| vec![0.0; off.len]).collect();
        let mut d_fin = vec![0.0; 2 * d];
        let mut d_head = vec![0.0; arch.vocab_size * d];

        // Head and log-softmax backward: dlogits = onehot - softmax.
        let mut total = 0.0;
        let mut d_fh = vec![0.0; n * d];
        for (j, &c) in completion.iter().enumerate() {
            let t = k - 1 + j;
            let mut logits = self.logits_at(&trace, t);
            log_softmax(&mut logits);
            total += logits[c as usize];
            let fh_t = &trace.fh[t * d..(t + 1) * d];
            let mut dlogits = vec![0.0; arch.vocab_size];
            for (i, dl) in dlogits.iter_mut().enumerate() {
                let p = logits[i].exp();
                *dl = if i == c as usize { 1.0 - p } else { -p };
            }
            outer_acc(&mut d_head, &dlogits, fh_t);
            matvec_t_acc(&self.head, &dlogits, &mut d_fh[t * d..(t + 1) * d]);
        }

        // Final layer norm.
        let mut d_x = vec![0.0; n * d];
        {
            let (dw, db) = d_fin.split_at_mut(d);
            for t in 0..n {
                layer_norm_backward(
                    &d_fh[t * d..(t + 1) * d],
                    &trace.f_xhat[t * d..(t + 1) * d],
                    trace.f_rstd[t],
                    &self.fin_w,
                    &mut d_x[t * d..(t + 1) * d],
                    dw,
                    db,
                );
            }
        }

        // Blocks in reverse. d_x on entry holds the gradient w.r.t. x3.
        for (b, (bp, bt)) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            let dg = &mut d_blocks[b];

            // MLP: x3 = x2 + W_down silu(W_up z), z = ln2(x2).
            let mut d_x2 = d_x.clone(); // residual branch
            let mut d_z = vec![0.0; n * d];
            for t in 0..n {
                let dmo = &d_x[t * d..(t + 1) * d];
                let act_t = &bt.act[t * hidden..(t + 1) * hidden];
                outer_acc(&mut dg[off.w_down..off.w_down + d * hidden], dmo, act_t);
                let mut d_act = vec![0.0; hidden];
                matvec_t_acc(&bp.w_down, dmo, &mut d_act);
                let mut d_pre = vec![0.0; hidden];
                for i in 0..hidden {
                    let p = bt.pre[t * hidden + i];
                    let s = sigmoid(p);
                    d_pre[i] = d_act[i] * (s * (1.0 + p * (1.0 - s)));
                }
                let z_t = &bt.z[t * d..(t + 1) * d];
                outer_acc(&mut dg[off.w_up..off.w_up + hidden * d], &d_pre, z_t);
                matvec_t_acc(&bp.w_up, &d_pre, &mut d_z[t * d..(t + 1) * d]);
            }
            {
                let (dw_slice, rest) = dg[off.ln2_w..off.ln2_b + d].split_at_mut(d);
                for t in 0..n {
                    layer_norm_backward(
                        &d_z[t * d..(t + 1) * d],
                        &bt.xhat2[t * d..(t + 1) * d],
                        bt.rstd2[t],
                        &bp.ln2_w,
                        &mut d_x2[t * d..(t + 1) * d],
                        dw_slice,
                        rest,
                    );
                }
            }

            // Attention: x2 = x_in + Wo o.
            let mut d_o = vec![0.0; n * d];
            for t in 0..n {
                let dao = &d_x2[t * d..(t + 1) * d];
                outer_acc(
                    &mut dg[off.wo..off.wo + d * d],
                    dao,
                    &bt.o[t * d..(t + 1) * d],
                );
                matvec_t_acc(&bp.wo, dao, &mut d_o[t * d..(t + 1) * d]);
            }
            let mut d_q = vec![0.0; n * d];
            let mut d_k = vec![0.0; n * d];
            let mut d_v = vec![0.0; n * d];
            for h in 0..nh {
                let hoff = h * hd;
                for t in 0..n {
                    let do_t = &d_o[t * d + hoff..t * d + hoff + hd];
                    let att_row = &bt.att[h * n * n + t * n..h * n * n + t * n + t + 1];
                    // da_j = <do, v_j>; softmax backward on the row.
                    let mut da = vec![0.0; t + 1];
                    for (j, daj) in da.iter_mut().enumerate() {
                        let vj = &bt.v[j * d + hoff..j * d + hoff + hd];
                        *daj = dot_f64(do_t, vj);
                        let a = att_row[j];
                        let dv = &mut d_v[j * d + hoff..j * d + hoff + hd];
                        for (dvi, &doi) in dv.iter_mut().zip(do_t) {
                            *dvi += a * doi;
                        }
                    }
                    let dot_ada: f64 = att_row.iter().zip(&da).map(|(&a, &x)| a * x).sum();
                    let qt = &bt.q[t * d + hoff..t * d + hoff + hd];
                    for j in 0..=t {
                        let ds = att_row[j] * (da[j] - dot_ada) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &bt.k[j * d + hoff..j * d + hoff + hd];
                        let dq = &mut d_q[t * d + hoff..t * d + hoff + hd];
                        for (dqi, &kji) in dq.iter_mut().zip(kj) {
                            *dqi += ds * kji;
                        }
                        let dk = &mut d_k[j * d + hoff..j * d + hoff + hd];
                        for (dki, &qti) in dk.iter_mut().zip(qt) {
                            *dki += ds * qti;
                        }
                    }
                }
            }
            let mut d_u = vec![0.0; n * d];
            for t in 0..n {
                let u_t = &bt.u[t * d..(t + 1) * d];
                let dq_t = &d_q[t * d..(t + 1) * d];
                let dk_t = &d_k[t * d..(t + 1) * d];
                let dv_t = &d_v[t * d..(t + 1) * d];
                outer_acc(&mut dg[off.wq..off.wq + d * d], dq_t, u_t);
                outer_acc(&mut dg[off.wk..off.wk + d * d], dk_t, u_t);
                outer_acc(&mut dg[off.wv..off.wv + d * d], dv_t, u_t);
                let du_t = &mut d_u[t * d..(t + 1) * d];
                matvec_t_acc(&bp.wq, dq_t, du_t);
                matvec_t_acc(&bp.wk, dk_t, du_t);
                matvec_t_acc(&bp.wv, dv_t, du_t);
            }
            let mut d_x_in = d_x2; // residual into the block input
            {
                let (dw_slice, rest) = dg[off.ln1_w..off.ln1_b + d].split_at_mut(d);
                for t in 0..n {
                    layer_norm_backward(
                        &d_u[t * d..(t + 1) * d],
                        &bt.xhat1[t * d..(t + 1) * d],
                        bt.rstd1[t],
                        &bp.ln1_w,
                        &mut d_x_in[t * d..(t + 1) * d],
                        dw_slice,
                        rest,
                    );
                }
            }
            d_x = d_x_in;
        }

        // Embeddings.
        for (t, &tok) in seq.iter().enumerate() {
            let dx_t = &d_x[t * d..(t + 1) * d];
            let te = &mut d_tok[tok as usize * d..(tok as usize + 1) * d];
            for (a, &b) in te.iter_mut().zip(dx_t) {
                *a += b;
            }
            let pe = &mut d_pos[t * d..(t + 1) * d];
            for (a, &b) in pe.iter_mut().zip(dx_t) {
                *a += b;
            }
        }

        let mut groups = vec![d_tok, d_pos];
        groups.extend(d_blocks);
        groups.push(d_fin);
        groups.push(d_head);
        Ok((total, GradSet { groups }))
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Draw from `softmax(logits / temperature)`.
fn draw_scaled(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - m) / temperature).exp())
        .collect();
    let sum: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= sum;
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
