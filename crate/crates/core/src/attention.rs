//! Grouped-query attention with a KV cache, per-head QK RMS normalization and
//! NTK-scaled rotary position embeddings.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{linear, softmax_in_place, Precision, RmsNorm, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct RopeConfig {
    pub base: f64,
    /// NTK scale; 1 leaves the base untouched.
    pub ntk_alpha: f64,
    pub d_head: usize,
}

impl RopeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_head <= 2 || !self.d_head.is_multiple_of(2) {
            return Err(Error::config(
                "d_head",
                format!("rotary dimension must be even and > 2, got {}", self.d_head),
            ));
        }
        if !(self.ntk_alpha >= 1.0) || !self.ntk_alpha.is_finite() {
            return Err(Error::config(
                "ntk_alpha",
                format!("must be a finite value >= 1, got {}", self.ntk_alpha),
            ));
        }
        if !(self.base > 1.0) || !self.base.is_finite() {
            return Err(Error::config("rope_base", format!("must be > 1, got {}", self.base)));
        }
        Ok(())
    }
}

/// Effective rotary base `base · α^{d/(d−2)}`.
pub fn ntk_rope_base(cfg: &RopeConfig) -> Result<f64> {
    cfg.validate()?;
    let d = cfg.d_head as f64;
    Ok(cfg.base * cfg.ntk_alpha.powf(d / (d - 2.0)))
}

/// Rotation frequencies `f_i = base'^{−2i/d}` for `i < d/2`.
pub fn rope_frequencies(cfg: &RopeConfig) -> Result<Vec<f64>> {
    let base = ntk_rope_base(cfg)?;
    let d = cfg.d_head as f64;
    Ok((0..cfg.d_head / 2)
        .map(|i| base.powf(-2.0 * i as f64 / d))
        .collect())
}

/// Rotates each adjacent pair `(2i, 2i+1)` of every head vector by `pos · f_i`.
/// `x` is `[T, H, d_head]` and `positions` has one entry per row.
pub fn apply_rope(x: &Tensor, positions: &[usize], cfg: &RopeConfig) -> Result<Tensor> {
    if x.rank() != 3 || x.dim(2) != cfg.d_head || x.dim(0) != positions.len() {
        return Err(Error::shape(format!(
            "rope expects [{}, H, {}], got {:?}",
            positions.len(),
            cfg.d_head,
            x.shape()
        )));
    }
    let freqs = rope_frequencies(cfg)?;
    let prec = x.precision();
    let (h, d) = (x.dim(1), cfg.d_head);
    let mut out = x.data().to_vec();
    for (t, &pos) in positions.iter().enumerate() {
        let rot: Vec<(f64, f64)> = freqs
            .iter()
            .map(|f| {
                let angle = pos as f64 * f;
                (angle.cos(), angle.sin())
            })
            .collect();
        for head in 0..h {
            let v = &mut out[(t * h + head) * d..(t * h + head + 1) * d];
            for (pair, &(cos, sin)) in v.chunks_mut(2).zip(&rot) {
                let (a, b) = (pair[0], pair[1]);
                pair[0] = prec.round(a * cos - b * sin);
                pair[1] = prec.round(a * sin + b * cos);
            }
        }
    }
    Tensor::new(x.shape(), out, prec)
}

/// Per-head RMS norm of queries and keys (`[T, H, d_head]` each).
pub fn qk_norm(q: &Tensor, k: &Tensor, q_norm: &RmsNorm, k_norm: &RmsNorm) -> Result<(Tensor, Tensor)> {
    Ok((q_norm.forward(q)?, k_norm.forward(k)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnConfig {
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub rope: RopeConfig,
    pub use_qk_norm: bool,
}

impl AttnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_q_heads == 0 || self.n_kv_heads == 0 {
            return Err(Error::config("n_kv_heads", "head counts must be >= 1"));
        }
        if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::config(
                "n_kv_heads",
                format!(
                    "{} query heads are not a multiple of {} kv heads",
                    self.n_q_heads, self.n_kv_heads
                ),
            ));
        }
        if self.rope.d_head != self.d_head {
            return Err(Error::config("d_head", "rope dimension differs from head width"));
        }
        self.rope.validate()
    }

    /// KV head read by query head `h`: `⌊h · n_kv / n_q⌋`.
    #[inline]
    pub fn kv_head_for(&self, h: usize) -> usize {
        h * self.n_kv_heads / self.n_q_heads
    }
}

/// Appended keys and values for one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    n_kv_heads: usize,
    d_head: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
    len: usize,
}

impl KvCache {
    pub fn new(cfg: &AttnConfig) -> Self {
        Self {
            n_kv_heads: cfg.n_kv_heads,
            d_head: cfg.d_head,
            keys: Vec::new(),
            values: Vec::new(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Floats stored per cached position (keys plus values).
    pub fn floats_per_token(&self) -> usize {
        2 * self.n_kv_heads * self.d_head
    }

    pub fn stored_floats(&self) -> usize {
        self.keys.len() + self.values.len()
    }

    /// Appends `[T, n_kv, d_head]` keys and values for positions `start..start+T`.
    pub fn append(&mut self, start: usize, keys: &Tensor, values: &Tensor) -> Result<()> {
        if start != self.len {
            return Err(Error::Cache(format!(
                "positions must continue at {}, got {start}",
                self.len
            )));
        }
        let want = [keys.dim(0), self.n_kv_heads, self.d_head];
        if keys.shape() != want || values.shape() != want {
            return Err(Error::shape(format!(
                "cache append expects {want:?}, got {:?} / {:?}",
                keys.shape(),
                values.shape()
            )));
        }
        self.keys.extend_from_slice(keys.data());
        self.values.extend_from_slice(values.data());
        self.len += keys.dim(0);
        Ok(())
    }

    fn key(&self, pos: usize, head: usize) -> &[f64] {
        let off = (pos * self.n_kv_heads + head) * self.d_head;
        &self.keys[off..off + self.d_head]
    }

    fn value(&self, pos: usize, head: usize) -> &[f64] {
        let off = (pos * self.n_kv_heads + head) * self.d_head;
        &self.values[off..off + self.d_head]
    }
}

/// Weights of one attention layer, including its pre-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub norm: RmsNorm,
    /// `[d_model, n_q·d_head]`
    pub wq: Tensor,
    /// `[d_model, n_kv·d_head]`
    pub wk: Tensor,
    /// `[d_model, n_kv·d_head]`
    pub wv: Tensor,
    /// `[n_q·d_head, d_model]`
    pub wo: Tensor,
    pub q_norm: RmsNorm,
    pub k_norm: RmsNorm,
}

impl AttnParams {
    pub fn init<R: Rng + ?Sized>(
        cfg: &AttnConfig,
        d_model: usize,
        norm_eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let p = Precision::F32;
        let (q_dim, kv_dim) = (cfg.n_q_heads * cfg.d_head, cfg.n_kv_heads * cfg.d_head);
        let mut uni = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::rand_uniform(shape, -bound, bound, p, rng)
        };
        Ok(Self {
            norm: RmsNorm::ones(d_model, norm_eps, p)?,
            wq: uni(&[d_model, q_dim], d_model)?,
            wk: uni(&[d_model, kv_dim], d_model)?,
            wv: uni(&[d_model, kv_dim], d_model)?,
            wo: uni(&[q_dim, d_model], q_dim)?,
            q_norm: RmsNorm::ones(cfg.d_head, norm_eps, p)?,
            k_norm: RmsNorm::ones(cfg.d_head, norm_eps, p)?,
        })
    }

    pub fn d_model(&self) -> usize {
        self.wq.dim(0)
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("norm", &self.norm.gain),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("q_norm", &self.q_norm.gain),
            ("k_norm", &self.k_norm.gain),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("norm", &mut self.norm.gain),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("q_norm", &mut self.q_norm.gain),
            ("k_norm", &mut self.k_norm.gain),
        ]
    }

    pub fn validate(&self, cfg: &AttnConfig, d_model: usize) -> Result<()> {
        let (q_dim, kv_dim) = (cfg.n_q_heads * cfg.d_head, cfg.n_kv_heads * cfg.d_head);
        let want: [(&str, Vec<usize>); 7] = [
            ("norm", vec![d_model]),
            ("wq", vec![d_model, q_dim]),
            ("wk", vec![d_model, kv_dim]),
            ("wv", vec![d_model, kv_dim]),
            ("wo", vec![q_dim, d_model]),
            ("q_norm", vec![cfg.d_head]),
            ("k_norm", vec![cfg.d_head]),
        ];
        for ((name, t), (_, shape)) in self.named_tensors().into_iter().zip(want) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "attention tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Normed input → rotated, normalized q and k plus v, as `[T, heads, d_head]`.
fn project_qkv(
    cfg: &AttnConfig,
    params: &AttnParams,
    residual_in: &Tensor,
    positions: &[usize],
) -> Result<(Tensor, Tensor, Tensor)> {
    let d_model = params.d_model();
    if residual_in.rank() != 2 || residual_in.dim(1) != d_model {
        return Err(Error::shape(format!(
            "attention expects [T, {d_model}], got {:?}",
            residual_in.shape()
        )));
    }
    let t = residual_in.dim(0);
    let hidden = params.norm.forward(residual_in)?;
    let q = linear(&hidden, &params.wq)?.reshape(&[t, cfg.n_q_heads, cfg.d_head])?;
    let k = linear(&hidden, &params.wk)?.reshape(&[t, cfg.n_kv_heads, cfg.d_head])?;
    let v = linear(&hidden, &params.wv)?.reshape(&[t, cfg.n_kv_heads, cfg.d_head])?;
    let (q, k) = if cfg.use_qk_norm {
        qk_norm(&q, &k, &params.q_norm, &params.k_norm)?
    } else {
        (q, k)
    };
    let q = apply_rope(&q, positions, &cfg.rope)?;
    let k = apply_rope(&k, positions, &cfg.rope)?;
    Ok((q, k, v))
}

/// Causal attention of `queries` (already in the cache's position space) over the cache.
fn attend(cfg: &AttnConfig, q: &Tensor, positions: &[usize], cache: &KvCache) -> Vec<f64> {
    let (nq, d) = (cfg.n_q_heads, cfg.d_head);
    let prec = q.precision();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; positions.len() * nq * d];
    let mut scores = vec![0.0; cache.len()];
    for (t, &pos) in positions.iter().enumerate() {
        for h in 0..nq {
            let kv = cfg.kv_head_for(h);
            let qv = &q.data()[(t * nq + h) * d..(t * nq + h + 1) * d];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = if j <= pos {
                    let k = cache.key(j, kv);
                    qv.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale
                } else {
                    f64::NEG_INFINITY
                };
            }
            softmax_in_place(&mut scores);
            let o = &mut out[(t * nq + h) * d..(t * nq + h + 1) * d];
            for (j, &w) in scores.iter().enumerate().take(pos + 1) {
                for (ov, vv) in o.iter_mut().zip(cache.value(j, kv)) {
                    *ov += w * vv;
                }
            }
            for ov in o.iter_mut() {
                *ov = prec.round(*ov);
            }
        }
    }
    out
}

fn finish(params: &AttnParams, residual_in: &Tensor, heads: Vec<f64>) -> Result<Tensor> {
    let t = residual_in.dim(0);
    let q_dim = params.wo.dim(0);
    let merged = Tensor::new(&[t, q_dim], heads, residual_in.precision())?;
    residual_in.add(&linear(&merged, &params.wo)?)
}

/// Causal GQA over `T` new tokens continuing `cache`. Keys and values are
/// appended to the cache; the returned tensor includes the residual.
pub fn gqa_prefill(
    cfg: &AttnConfig,
    params: &AttnParams,
    residual_in: &Tensor,
    cache: &mut KvCache,
) -> Result<Tensor> {
    cfg.validate()?;
    let t = residual_in.dim(0);
    let positions: Vec<usize> = (cache.len()..cache.len() + t).collect();
    let (q, k, v) = project_qkv(cfg, params, residual_in, &positions)?;
    cache.append(positions[0], &k, &v)?;
    let heads = attend(cfg, &q, &positions, cache);
    finish(params, residual_in, heads)
}

/// One-token attention step against everything already cached.
pub fn gqa_decode_step(
    cfg: &AttnConfig,
    params: &AttnParams,
    residual_in: &Tensor,
    cache: &mut KvCache,
) -> Result<Tensor> {
    if residual_in.rank() != 2 || residual_in.dim(0) != 1 {
        return Err(Error::shape(format!(
            "decode expects exactly one row, got {:?}",
            residual_in.shape()
        )));
    }
    cfg.validate()?;
    let pos = [cache.len()];
    let (q, k, v) = project_qkv(cfg, params, residual_in, &pos)?;
    cache.append(pos[0], &k, &v)?;
    let heads = attend(cfg, &q, &pos, cache);
    finish(params, residual_in, heads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{max_abs_diff, rmsnorm};
    use crate::oracle;
    use proptest::prelude::{prop_assert, prop_oneof, proptest, Just};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rope(alpha: f64) -> RopeConfig {
        RopeConfig { base: 10000.0, ntk_alpha: alpha, d_head: 128 }
    }

    fn cfg(nq: usize, nkv: usize) -> AttnConfig {
        AttnConfig {
            n_q_heads: nq,
            n_kv_heads: nkv,
            d_head: 8,
            rope: RopeConfig { base: 10000.0, ntk_alpha: 1.0, d_head: 8 },
            use_qk_norm: true,
        }
    }

    #[test]
    fn ntk_base_values() {
        assert_eq!(ntk_rope_base(&rope(1.0)).unwrap(), 10000.0);
        let b50 = ntk_rope_base(&rope(50.0)).unwrap();
        let direct = 10000.0 * 50f64.powf(128.0 / 126.0);
        assert!(((b50 - direct) / direct).abs() <= 1e-6);
        assert!(ntk_rope_base(&rope(1000.0)).unwrap() > b50);
    }

    #[test]
    fn ntk_rejects_bad_configs() {
        let small = RopeConfig { d_head: 2, ..rope(1.0) };
        assert!(matches!(ntk_rope_base(&small), Err(Error::Config { .. })));
        assert!(matches!(ntk_rope_base(&rope(0.5)), Err(Error::Config { .. })));
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::rand_uniform(&[1, 3, 128], -1.0, 1.0, Precision::F32, &mut rng).unwrap();
        assert_eq!(apply_rope(&x, &[0], &rope(50.0)).unwrap(), x);
    }

    #[test]
    fn rope_relative_angle_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = rope(50.0);
        let q = Tensor::rand_uniform(&[1, 1, 128], -1.0, 1.0, Precision::F64, &mut rng).unwrap();
        let k = Tensor::rand_uniform(&[1, 1, 128], -1.0, 1.0, Precision::F64, &mut rng).unwrap();
        let dot = |p1: usize, p2: usize| {
            let a = apply_rope(&q, &[p1], &cfg).unwrap();
            let b = apply_rope(&k, &[p2], &cfg).unwrap();
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>()
        };
        for (p1, p2, c) in [(5, 2, 100), (40, 7, 1000), (3, 3, 77)] {
            assert!((dot(p1, p2) - dot(p1 + c, p2 + c)).abs() <= 1e-5);
        }
    }

    proptest! {
        #[test]
        fn rope_preserves_norm(
            v in proptest::collection::vec(-4.0f64..4.0, 16),
            pos in 0usize..300_000,
            alpha in prop_oneof![Just(1.0), Just(50.0), Just(1000.0)],
        ) {
            let cfg = RopeConfig { base: 10000.0, ntk_alpha: alpha, d_head: 16 };
            let x = Tensor::new(&[1, 1, 16], v, Precision::F64).unwrap();
            let y = apply_rope(&x, &[pos], &cfg).unwrap();
            let n = |t: &Tensor| t.data().iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!((n(&x) - n(&y)).abs() <= 1e-6);
        }
    }

    #[test]
    fn qk_norm_is_scale_invariant_and_compositional() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let norm = RmsNorm {
            gain: Tensor::rand_uniform(&[8], 0.5, 1.5, Precision::F64, &mut rng).unwrap(),
            eps: 1e-12,
        };
        let q = Tensor::rand_uniform(&[3, 2, 8], -1.0, 1.0, Precision::F64, &mut rng).unwrap();
        let k = Tensor::rand_uniform(&[3, 1, 8], -1.0, 1.0, Precision::F64, &mut rng).unwrap();
        let (q1, k1) = qk_norm(&q, &k, &norm, &norm).unwrap();
        let (q10, _) = qk_norm(&q.scale(10.0), &k, &norm, &norm).unwrap();
        assert!(q1.max_abs_diff(&q10).unwrap() <= 1e-6);
        for t in 0..3 {
            for h in 0..2 {
                let v = Tensor::new(&[8], q.data()[(t * 2 + h) * 8..(t * 2 + h + 1) * 8].to_vec(), Precision::F64).unwrap();
                let want = rmsnorm(&v, &norm.gain, norm.eps).unwrap();
                assert!(max_abs_diff(&q1.data()[(t * 2 + h) * 8..(t * 2 + h + 1) * 8], want.data()) <= 1e-7);
            }
        }
        let ones = Tensor::ones(&[1, 1, 8], Precision::F64).unwrap();
        let unit = RmsNorm::ones(8, 1e-12, Precision::F64).unwrap();
        let (o, _) = qk_norm(&ones, &k1, &unit, &norm).unwrap();
        assert!(max_abs_diff(o.data(), &[1.0; 8]) < 1e-9);
    }

    #[test]
    fn head_sharing_map() {
        let c = cfg(2, 1);
        assert_eq!((0..2).map(|h| c.kv_head_for(h)).collect::<Vec<_>>(), vec![0, 0]);
        let c = cfg(8, 2);
        assert_eq!(
            (0..8).map(|h| c.kv_head_for(h)).collect::<Vec<_>>(),
            vec![0, 0, 0, 0, 1, 1, 1, 1]
        );
    }

    fn setup(nq: usize, nkv: usize, seed: u64) -> (AttnConfig, AttnParams) {
        let c = cfg(nq, nkv);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AttnParams::init(&c, 16, 1e-5, &mut rng).unwrap();
        (c, p)
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (c, p) = setup(4, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::rand_uniform(&[1, 16], -1.0, 1.0, Precision::F32, &mut rng).unwrap();
        let mut cache = KvCache::new(&c);
        let y = gqa_prefill(&c, &p, &x, &mut cache).unwrap();
        // with one position, every head outputs its kv head's V row
        let hidden = p.norm.forward(&x).unwrap();
        let v = linear(&hidden, &p.wv).unwrap();
        let mut heads = Vec::new();
        for h in 0..4 {
            let kv = c.kv_head_for(h);
            heads.extend_from_slice(&v.data()[kv * 8..(kv + 1) * 8]);
        }
        let want = x
            .add(&linear(&Tensor::new(&[1, 32], heads, Precision::F32).unwrap(), &p.wo).unwrap())
            .unwrap();
        assert!(y.max_abs_diff(&want).unwrap() <= 1e-6);
    }

    #[test]
    fn equal_head_counts_match_mha_oracle() {
        let (c, p) = setup(4, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::rand_uniform(&[9, 16], -1.0, 1.0, Precision::F32, &mut rng).unwrap();
        let y = gqa_prefill(&c, &p, &x, &mut KvCache::new(&c)).unwrap();
        let want = oracle::mha_prefill(&c, &p, &x);
        assert!(max_abs_diff(y.data(), &want) <= 1e-5);
    }

    #[test]
    fn prefix_outputs_unchanged_by_extension() {
        let (c, p) = setup(4, 2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::rand_uniform(&[12, 16], -1.0, 1.0, Precision::F32, &mut rng).unwrap();
        let long = gqa_prefill(&c, &p, &x, &mut KvCache::new(&c)).unwrap();
        let short = gqa_prefill(&c, &p, &x.slice_outer(0, 8).unwrap(), &mut KvCache::new(&c)).unwrap();
        assert!(long.slice_outer(0, 8).unwrap().max_abs_diff(&short).unwrap() <= 1e-5);
    }

    #[test]
    fn decode_agrees_with_prefill() {
        let (c, p) = setup(4, 2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::rand_uniform(&[10, 16], -1.0, 1.0, Precision::F32, &mut rng).unwrap();

        let first = x.slice_outer(0, 1).unwrap();
        let d0 = gqa_decode_step(&c, &p, &first, &mut KvCache::new(&c)).unwrap();
        let p0 = gqa_prefill(&c, &p, &first, &mut KvCache::new(&c)).unwrap();
        assert!(d0.max_abs_diff(&p0).unwrap() <= 1e-6);

        let full = gqa_prefill(&c, &p, &x, &mut KvCache::new(&c)).unwrap();
        let mut cache = KvCache::new(&c);
        gqa_prefill(&c, &p, &x.slice_outer(0, 9).unwrap(), &mut cache).unwrap();
        let before = cache.len();
        let last = gqa_decode_step(&c, &p, &x.slice_outer(9, 10).unwrap(), &mut cache).unwrap();
        assert_eq!(cache.len(), before + 1);
        assert!(last.max_abs_diff(&full.slice_outer(9, 10).unwrap()).unwrap() <= 1e-5);
    }

    #[test]
    fn cache_stores_only_kv_heads() {
        let (c, p) = setup(8, 2, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::rand_uniform(&[5, 16], -1.0, 1.0, Precision::F32, &mut rng).unwrap();
        let mut cache = KvCache::new(&c);
        gqa_prefill(&c, &p, &x, &mut cache).unwrap();
        assert_eq!(cache.floats_per_token(), 2 * 2 * 8);
        assert_eq!(cache.stored_floats(), 5 * 2 * 2 * 8);
    }

    #[test]
    fn cache_rejects_position_gaps() {
        let c = cfg(2, 1);
        let mut cache = KvCache::new(&c);
        let kv = Tensor::zeros(&[2, 1, 8], Precision::F32).unwrap();
        assert!(matches!(cache.append(3, &kv, &kv), Err(Error::Cache(_))));
        cache.append(0, &kv, &kv).unwrap();
        assert!(matches!(cache.append(1, &kv, &kv), Err(Error::Cache(_))));
    }

    #[test]
    fn decode_rejects_multi_row_input() {
        let (c, p) = setup(2, 1, 1);
        let x = Tensor::zeros(&[2, 16], Precision::F32).unwrap();
        assert!(matches!(
            gqa_decode_step(&c, &p, &x, &mut KvCache::new(&c)),
            Err(Error::Shape(_))
        ));
    }
}
