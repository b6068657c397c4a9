//! Closed-form FLOP counters per layer kind. A multiply-add counts as two.
//!
//! The Mamba2 counter follows the chunked algorithm: every chunk costs the
//! same, so prefill cost is exactly proportional to T whenever T is a multiple
//! of the chunk size. Attention counts the causal half of the score matrix.

use crate::model::{LayerCensus, ModelConfig};

fn rmsnorm(t: u128, d: u128) -> u128 {
    4 * t * d
}

fn proj(t: u128, d_in: u128, d_out: u128) -> u128 {
    2 * t * d_in * d_out
}

struct Dims {
    d: u128,
    heads: u128,
    p: u128,
    n: u128,
    g: u128,
    w: u128,
    q: u128,
    nq: u128,
    nkv: u128,
    dh: u128,
    e: u128,
    k: u128,
    ff: u128,
    vocab: u128,
}

impl Dims {
    fn of(cfg: &ModelConfig) -> Self {
        let u = |v: usize| v as u128;
        Self {
            d: u(cfg.d_model),
            heads: u(cfg.n_q_heads),
            p: u(cfg.d_head),
            n: u(cfg.d_state),
            g: u(cfg.ssm_groups),
            w: u(cfg.conv_width),
            q: u(cfg.chunk_size.max(1)),
            nq: u(cfg.n_q_heads),
            nkv: u(cfg.n_kv_heads),
            dh: u(cfg.d_head),
            e: u(cfg.n_experts),
            k: u(cfg.top_k),
            ff: u(cfg.d_ff),
            vocab: u(cfg.vocab_size),
        }
    }

    fn d_inner(&self) -> u128 {
        self.heads * self.p
    }

    fn conv_channels(&self) -> u128 {
        self.d_inner() + 2 * self.g * self.n
    }
}

/// Everything in a Mamba2 layer that is applied token by token.
fn mamba_pointwise(m: &Dims, t: u128) -> u128 {
    let di = m.d_inner();
    let gn = m.g * m.n;
    rmsnorm(t, m.d)
        + proj(t, m.d, 2 * di + 2 * gn + m.heads)
        + t * m.conv_channels() * (2 * m.w + 4)
        + t * m.heads * 8
        + t * di * 6
        + proj(t, di, m.d)
        + t * m.d
}

/// Scan cost of one chunk of length `l` for all heads.
fn mamba_chunk(m: &Dims, l: u128) -> u128 {
    let (h, p, n, g) = (m.heads, m.p, m.n, m.g);
    let decay_table = h * l * l;
    let cb = g * 2 * l * l * n;
    let intra = h * (l * l + 2 * l * l * p);
    let readout = h * (2 * l * p * n + l * p);
    let state = h * (2 * l * p * n + 2 * p * n);
    decay_table + cb + intra + readout + state
}

pub fn mamba_prefill_flops(cfg: &ModelConfig, t: usize) -> u128 {
    let m = Dims::of(cfg);
    let t = t as u128;
    let (full, rest) = (t / m.q, t % m.q);
    let mut scan = full * mamba_chunk(&m, m.q);
    if rest > 0 {
        scan += mamba_chunk(&m, rest);
    }
    mamba_pointwise(&m, t) + scan
}

/// One token on the recurrent path; independent of how many came before.
pub fn mamba_decode_flops(cfg: &ModelConfig, _cache_len: usize) -> u128 {
    let m = Dims::of(cfg);
    let state = m.heads * (4 * m.p * m.n + 2 * m.p * m.n + m.p);
    mamba_pointwise(&m, 1) + state
}

fn attention_pointwise(a: &Dims, t: u128) -> u128 {
    let (q_w, kv_w) = (a.nq * a.dh, a.nkv * a.dh);
    rmsnorm(t, a.d)
        + proj(t, a.d, q_w + 2 * kv_w)
        + rmsnorm(t, q_w + kv_w)
        + t * (q_w + kv_w) * 3
        + proj(t, q_w, a.d)
        + t * a.d
}

/// Score and value terms for `pairs` query-key pairs over all query heads,
/// plus the softmax over those scores.
fn attention_pairs(a: &Dims, pairs: u128) -> u128 {
    a.nq * pairs * (2 * a.dh + 2 * a.dh + 5)
}

pub fn attention_prefill_flops(cfg: &ModelConfig, t: usize) -> u128 {
    let a = Dims::of(cfg);
    let t = t as u128;
    attention_pointwise(&a, t) + attention_pairs(&a, t * (t + 1) / 2)
}

/// One new token attending to `cache_len` earlier ones and itself.
pub fn attention_decode_flops(cfg: &ModelConfig, cache_len: usize) -> u128 {
    let a = Dims::of(cfg);
    attention_pointwise(&a, 1) + attention_pairs(&a, cache_len as u128 + 1)
}

pub fn ffn_prefill_flops(cfg: &ModelConfig, t: usize) -> u128 {
    let f = Dims::of(cfg);
    let t = t as u128;
    let expert = proj(t, f.d, 2 * f.ff) + t * f.ff * 6 + proj(t, f.ff, f.d);
    let shared = 1;
    rmsnorm(t, f.d) + proj(t, f.d, f.e) + t * f.e * 4 + (shared + f.k) * (expert + t * f.d * 2) + t * f.d
}

pub fn ffn_decode_flops(cfg: &ModelConfig, _cache_len: usize) -> u128 {
    ffn_prefill_flops(cfg, 1)
}

fn head_flops(cfg: &ModelConfig, t: usize) -> u128 {
    let h = Dims::of(cfg);
    let t = t as u128;
    rmsnorm(t, h.d) + proj(t, h.d, h.vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    /// Whole sequence of length T at once.
    Prefill,
    /// One token with T tokens already cached.
    Decode,
}

/// FLOPs of one layer of each kind, and of the whole model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopRow {
    pub seq_len: usize,
    pub attention: u128,
    pub mamba: u128,
    pub ffn: u128,
    pub total: u128,
}

pub fn flop_row(cfg: &ModelConfig, census: &LayerCensus, mode: BenchMode, t: usize) -> FlopRow {
    let (attention, mamba, ffn, head) = match mode {
        BenchMode::Prefill => (
            attention_prefill_flops(cfg, t),
            mamba_prefill_flops(cfg, t),
            ffn_prefill_flops(cfg, t),
            head_flops(cfg, t),
        ),
        BenchMode::Decode => (
            attention_decode_flops(cfg, t),
            mamba_decode_flops(cfg, t),
            ffn_decode_flops(cfg, t),
            head_flops(cfg, 1),
        ),
    };
    let total = census.attention as u128 * attention
        + census.mamba as u128 * mamba
        + census.ffn as u128 * ffn
        + head;
    FlopRow { seq_len: t, attention, mamba, ffn, total }
}
