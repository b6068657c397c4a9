//! Hybrid model assembly: a block pattern over {A, M, F} layers, seeded
//! construction, per-sequence sessions, prefill, decode and generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{gqa_decode_step, gqa_prefill, AttnConfig, AttnParams, KvCache, RopeConfig};
use crate::error::{Error, Result};
use crate::moe::{moe_layer_forward, DropPolicy, MoeConfig, MoeParams};
use crate::numerics::{linear, softmax_in_place, Precision, RmsNorm, Tensor, DEFAULT_RMS_EPS};
use crate::ssd::{ssd_layer_decode, ssd_layer_forward, SsdConfig, SsdLayerParams, SsdLayerState};

/// Longest sequence a session accepts.
pub const MAX_CONTEXT: usize = 262_144;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Attention,
    Mamba,
    Ffn,
}

impl BlockKind {
    pub fn symbol(self) -> char {
        match self {
            BlockKind::Attention => 'A',
            BlockKind::Mamba => 'M',
            BlockKind::Ffn => 'F',
        }
    }

    fn from_symbol(c: char) -> Option<Self> {
        match c {
            'A' => Some(BlockKind::Attention),
            'M' => Some(BlockKind::Mamba),
            'F' => Some(BlockKind::Ffn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerCensus {
    pub attention: usize,
    pub mamba: usize,
    pub ffn: usize,
}

impl LayerCensus {
    pub fn total(&self) -> usize {
        self.attention + self.mamba + self.ffn
    }

    /// Percentages of the total as (attention, mamba, ffn).
    pub fn percentages(&self) -> (f64, f64, f64) {
        let t = self.total() as f64;
        (
            100.0 * self.attention as f64 / t,
            100.0 * self.mamba as f64 / t,
            100.0 * self.ffn as f64 / t,
        )
    }
}

/// Parses a pattern such as `"AMF MF MF"`; whitespace is ignored. Error offsets
/// are character positions in the original string.
pub fn parse_block_pattern(pattern: &str) -> Result<(Vec<BlockKind>, LayerCensus)> {
    let mut kinds = Vec::new();
    let mut census = LayerCensus::default();
    for (offset, c) in pattern.chars().enumerate() {
        if c.is_whitespace() {
            continue;
        }
        let kind = BlockKind::from_symbol(c).ok_or(Error::Parse { offset, found: c })?;
        match kind {
            BlockKind::Attention => census.attention += 1,
            BlockKind::Mamba => census.mamba += 1,
            BlockKind::Ffn => census.ffn += 1,
        }
        kinds.push(kind);
    }
    if kinds.is_empty() {
        return Err(Error::config("block_pattern", "pattern has no layers"));
    }
    Ok((kinds, census))
}

/// Layer counts of the full-size 128-layer model.
pub const PRODUCTION_CENSUS: LayerCensus = LayerCensus {
    attention: 7,
    mamba: 57,
    ffn: 64,
};
/// Published layer-type shares in percent (attention, mamba, ffn).
pub const PRODUCTION_PERCENTAGES: (f64, f64, f64) = (5.5, 44.5, 50.0);
pub const PRODUCTION_PERCENT_TOLERANCE: f64 = 0.5;

/// Checks a census against the full-size layer mix: exact counts, and shares
/// within half a percentage point of the published ones.
pub fn validate_production_shape(census: &LayerCensus) -> Result<()> {
    if *census != PRODUCTION_CENSUS {
        return Err(Error::config(
            "block_pattern",
            format!(
                "census (A={}, M={}, F={}) differs from (A=7, M=57, F=64)",
                census.attention, census.mamba, census.ffn
            ),
        ));
    }
    let (a, m, f) = census.percentages();
    let (pa, pm, pf) = PRODUCTION_PERCENTAGES;
    for (name, have, want) in [("attention", a, pa), ("mamba", m, pm), ("ffn", f, pf)] {
        if (have - want).abs() > PRODUCTION_PERCENT_TOLERANCE {
            return Err(Error::config(
                "block_pattern",
                format!("{name} share {have:.2}% is not within 0.5 pt of {want}%"),
            ));
        }
    }
    Ok(())
}

/// Canonical 128-layer pattern: seven `AMFF` + `(MF)×7` groups closed by one
/// `MF`. Plain AMF/MF tiling cannot reach 64 FFN layers with 7 attention and
/// 57 Mamba layers, so each attention group carries one extra FFN.
pub fn turbos_128_pattern() -> String {
    let mut s = String::new();
    for _ in 0..7 {
        s.push_str("AMFF ");
        s.push_str(&"MF ".repeat(7));
    }
    s.push_str("MF");
    s
}

/// Full architecture description; mirrors the config file keys one to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub vocab_size: usize,
    pub block_pattern: String,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    /// Head width shared by attention heads and Mamba2 heads.
    pub d_head: usize,
    pub d_state: usize,
    pub ssm_groups: usize,
    pub chunk_size: usize,
    pub conv_width: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub capacity_factor: f64,
    pub d_ff: usize,
    pub rope_base: f64,
    pub ntk_alpha: f64,
    pub norm_eps: f64,
    pub seed: u64,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelConfig {
    /// Desk-scale preset used by the tests and the CLI defaults.
    pub fn tiny() -> Self {
        Self {
            d_model: 64,
            vocab_size: 259,
            block_pattern: "AMF MF MF MF".into(),
            n_q_heads: 4,
            n_kv_heads: 2,
            d_head: 16,
            d_state: 16,
            ssm_groups: 2,
            chunk_size: 8,
            conv_width: 4,
            n_experts: 4,
            top_k: 2,
            capacity_factor: 1.5,
            d_ff: 128,
            rope_base: 10_000.0,
            ntk_alpha: 1.0,
            norm_eps: DEFAULT_RMS_EPS,
            seed: 0,
            tie_embeddings: false,
        }
    }

    /// Full-size hyper-parameters. Far too large to instantiate here; used for
    /// shape validation and analytic FLOP counts.
    pub fn turbos_128() -> Self {
        Self {
            d_model: 5120,
            vocab_size: 128_000,
            block_pattern: turbos_128_pattern(),
            n_q_heads: 64,
            n_kv_heads: 8,
            d_head: 128,
            d_state: 128,
            ssm_groups: 16,
            chunk_size: 128,
            conv_width: 4,
            n_experts: 32,
            top_k: 2,
            capacity_factor: 1.5,
            d_ff: 17_024,
            rope_base: 10_000.0,
            ntk_alpha: 1.0,
            norm_eps: DEFAULT_RMS_EPS,
            seed: 0,
            tie_embeddings: false,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "turbos-128" => Some(Self::turbos_128()),
            _ => None,
        }
    }

    /// Exact number of stored weights, computed from shapes alone.
    pub fn parameter_count(&self) -> Result<u128> {
        let (_, census) = self.blocks()?;
        let u = |v: usize| v as u128;
        let (d, dh) = (u(self.d_model), u(self.d_head));
        let (q_w, kv_w) = (u(self.n_q_heads) * dh, u(self.n_kv_heads) * dh);
        let attention = d + d * (q_w + 2 * kv_w) + q_w * d + 2 * dh;
        let ssd = self.ssd_config();
        let (di, h, gn) = (u(ssd.d_inner()), u(ssd.n_heads), u(ssd.n_groups * ssd.d_state));
        let conv = if ssd.conv_width > 0 { u(ssd.conv_dim()) * (u(ssd.conv_width) + 1) } else { 0 };
        let mamba = d + d * (2 * di + 2 * gn + h) + 3 * h + conv + di * d;
        let expert = 3 * d * u(self.d_ff);
        let ffn = d + d * u(self.n_experts) + (1 + u(self.n_experts)) * expert;
        let head = if self.tie_embeddings { 0 } else { d * u(self.vocab_size) };
        Ok(u(self.vocab_size) * d
            + u(census.attention) * attention
            + u(census.mamba) * mamba
            + u(census.ffn) * ffn
            + d
            + head)
    }

    pub fn attn_config(&self) -> AttnConfig {
        AttnConfig {
            n_q_heads: self.n_q_heads,
            n_kv_heads: self.n_kv_heads,
            d_head: self.d_head,
            rope: RopeConfig {
                base: self.rope_base,
                ntk_alpha: self.ntk_alpha,
                d_head: self.d_head,
            },
            use_qk_norm: true,
        }
    }

    pub fn ssd_config(&self) -> SsdConfig {
        SsdConfig {
            n_heads: self.n_q_heads,
            d_head: self.d_head,
            d_state: self.d_state,
            n_groups: self.ssm_groups,
            chunk_size: self.chunk_size,
            conv_width: self.conv_width,
        }
    }

    pub fn moe_config(&self) -> MoeConfig {
        MoeConfig {
            n_experts: self.n_experts,
            n_shared: 1,
            top_k: self.top_k,
            capacity_factor: self.capacity_factor,
            d_ff: self.d_ff,
            drop_policy: DropPolicy::NoDrop,
        }
    }

    pub fn blocks(&self) -> Result<(Vec<BlockKind>, LayerCensus)> {
        parse_block_pattern(&self.block_pattern)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::config("d_model", "must be >= 1"));
        }
        if self.vocab_size < tokenizer::VOCAB_MIN {
            return Err(Error::config(
                "vocab_size",
                format!("must cover the {} byte-level ids", tokenizer::VOCAB_MIN),
            ));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("norm_eps", "must be positive"));
        }
        let (_, census) = self.blocks()?;
        if census.attention > 0 {
            self.attn_config().validate()?;
        }
        if census.mamba > 0 {
            self.ssd_config().validate()?;
        }
        if census.ffn > 0 {
            self.moe_config().validate()?;
        }
        Ok(())
    }
}

/// Byte-level tokenizer: ids 0..=255 are bytes, then BOS, EOS, PAD.
pub mod tokenizer {
    pub const BOS: u32 = 256;
    pub const EOS: u32 = 257;
    pub const PAD: u32 = 258;
    pub const VOCAB_MIN: usize = 259;

    /// BOS followed by the UTF-8 bytes of `text`.
    pub fn encode(text: &str) -> Vec<u32> {
        std::iter::once(BOS)
            .chain(text.bytes().map(u32::from))
            .collect()
    }

    /// Bytes back to text; special and out-of-range ids are skipped.
    pub fn decode(tokens: &[u32]) -> String {
        let bytes: Vec<u8> = tokens
            .iter()
            .filter_map(|&t| u8::try_from(t).ok())
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

// one block per layer, never moved in bulk
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Attention(AttnParams),
    Mamba(SsdLayerParams),
    Ffn(MoeParams),
}

impl Block {
    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Attention(_) => BlockKind::Attention,
            Block::Mamba(_) => BlockKind::Mamba,
            Block::Ffn(_) => BlockKind::Ffn,
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        match self {
            Block::Attention(p) => p.named_tensors().into_iter().map(|(n, t)| (n.to_string(), t)).collect(),
            Block::Mamba(p) => p.named_tensors().into_iter().map(|(n, t)| (n.to_string(), t)).collect(),
            Block::Ffn(p) => p.named_tensors(),
        }
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            Block::Attention(p) => p.named_tensors_mut().into_iter().map(|(n, t)| (n.to_string(), t)).collect(),
            Block::Mamba(p) => p.named_tensors_mut().into_iter().map(|(n, t)| (n.to_string(), t)).collect(),
            Block::Ffn(p) => p.named_tensors_mut(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    attn: AttnConfig,
    ssd: SsdConfig,
    moe: MoeConfig,
    /// `[vocab, d_model]`
    pub embedding: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: RmsNorm,
    /// `[d_model, vocab]`; the transposed embedding when tied.
    pub unembed: Tensor,
}

/// Deterministic construction from `cfg.seed`: embedding, then every block in
/// pattern order, then the output head.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let (kinds, _) = cfg.blocks()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p = Precision::F32;
    let d = cfg.d_model;
    let embedding = Tensor::rand_uniform(&[cfg.vocab_size, d], -1.0, 1.0, p, &mut rng)?;
    let (attn, ssd, moe) = (cfg.attn_config(), cfg.ssd_config(), cfg.moe_config());
    let blocks = kinds
        .iter()
        .map(|kind| {
            Ok(match kind {
                BlockKind::Attention => Block::Attention(AttnParams::init(&attn, d, cfg.norm_eps, &mut rng)?),
                BlockKind::Mamba => Block::Mamba(SsdLayerParams::init(&ssd, d, cfg.norm_eps, &mut rng)?),
                BlockKind::Ffn => Block::Ffn(MoeParams::init(&moe, d, cfg.norm_eps, &mut rng)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let unembed = if cfg.tie_embeddings {
        embedding.transpose2()?
    } else {
        let bound = 1.0 / (d as f64).sqrt();
        Tensor::rand_uniform(&[d, cfg.vocab_size], -bound, bound, p, &mut rng)?
    };
    Ok(Model {
        cfg: cfg.clone(),
        attn,
        ssd,
        moe,
        embedding,
        blocks,
        final_norm: RmsNorm::ones(d, cfg.norm_eps, p)?,
        unembed,
    })
}

/// Per-layer decode cache.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerCache {
    Attention(KvCache),
    Mamba(SsdLayerState),
    Ffn,
}

/// Everything one sequence needs to continue decoding. Owned by a single caller.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub layers: Vec<LayerCache>,
    position: usize,
}

impl Session {
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn kv_caches(&self) -> impl Iterator<Item = &KvCache> {
        self.layers.iter().filter_map(|l| match l {
            LayerCache::Attention(c) => Some(c),
            _ => None,
        })
    }

    pub fn ssm_states(&self) -> impl Iterator<Item = &SsdLayerState> {
        self.layers.iter().filter_map(|l| match l {
            LayerCache::Mamba(s) => Some(s),
            _ => None,
        })
    }
}

/// Token sampling rule for [`Model::generate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature { tau: f64, seed: u64 },
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn new_session(&self) -> Session {
        let layers = self
            .blocks
            .iter()
            .map(|b| match b {
                Block::Attention(_) => LayerCache::Attention(KvCache::new(&self.attn)),
                Block::Mamba(_) => LayerCache::Mamba(SsdLayerState::new(&self.ssd)),
                Block::Ffn(_) => LayerCache::Ffn,
            })
            .collect();
        Session { layers, position: 0 }
    }

    /// Every weight with a stable, unique name, in construction order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, b) in self.blocks.iter().enumerate() {
            let prefix = format!("blocks.{i}.{}", b.kind().symbol());
            out.extend(b.named_tensors().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out.push(("final_norm".to_string(), &self.final_norm.gain));
        if !self.cfg.tie_embeddings {
            out.push(("unembed".to_string(), &self.unembed));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let prefix = format!("blocks.{i}.{}", b.kind().symbol());
            out.extend(b.named_tensors_mut().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm.gain));
        if !self.cfg.tie_embeddings {
            out.push(("unembed".to_string(), &mut self.unembed));
        }
        out
    }

    /// Re-derives the tied head after the embedding was replaced.
    pub fn sync_tied_head(&mut self) -> Result<()> {
        if self.cfg.tie_embeddings {
            self.unembed = self.embedding.transpose2()?;
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        let d = self.cfg.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            let id = t as usize;
            if id >= self.cfg.vocab_size {
                return Err(Error::Input(format!(
                    "token id {t} outside vocabulary of {}",
                    self.cfg.vocab_size
                )));
            }
            data.extend_from_slice(self.embedding.row(id));
        }
        Tensor::new(&[tokens.len(), d], data, Precision::F32)
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        linear(&self.final_norm.forward(x)?, &self.unembed)
    }

    fn check_width(&self, x: &Tensor, layer: usize, rows: usize) -> Result<()> {
        if x.shape() != [rows, self.cfg.d_model] {
            return Err(Error::shape(format!(
                "layer {layer} produced {:?}, expected [{rows}, {}]",
                x.shape(),
                self.cfg.d_model
            )));
        }
        Ok(())
    }

    fn check_capacity(&self, position: usize) -> Result<()> {
        if position > MAX_CONTEXT {
            return Err(Error::Capacity {
                position,
                capacity: MAX_CONTEXT,
            });
        }
        Ok(())
    }

    /// Runs `tokens` through a fresh session with the chunked scan and full
    /// causal attention. Returns next-token logits `[T, vocab]`.
    pub fn prefill(&self, tokens: &[u32]) -> Result<(Tensor, Session)> {
        let mut session = self.new_session();
        let logits = self.prefill_into(&mut session, tokens)?;
        Ok((logits, session))
    }

    /// Continues an existing session with several tokens at once.
    pub fn prefill_into(&self, session: &mut Session, tokens: &[u32]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Input("prefill needs at least one token".into()));
        }
        self.check_capacity(session.position + tokens.len())?;
        let rows = tokens.len();
        let mut x = self.embed(tokens)?;
        for (i, (block, cache)) in self.blocks.iter().zip(session.layers.iter_mut()).enumerate() {
            x = match (block, cache) {
                (Block::Attention(p), LayerCache::Attention(kv)) => gqa_prefill(&self.attn, p, &x, kv)?,
                (Block::Mamba(p), LayerCache::Mamba(st)) => {
                    let (y, next) = ssd_layer_forward(&self.ssd, p, &x, Some(st))?;
                    *st = next;
                    y
                }
                (Block::Ffn(p), LayerCache::Ffn) => moe_layer_forward(&self.moe, p, &x)?,
                _ => return Err(Error::Cache(format!("session layer {i} does not match the model"))),
            };
            self.check_width(&x, i, rows)?;
        }
        session.position += rows;
        self.logits(&x)
    }

    /// Feeds one token through the incremental paths; returns logits `[vocab]`.
    pub fn decode_step(&self, session: &mut Session, token: u32) -> Result<Tensor> {
        self.check_capacity(session.position + 1)?;
        let mut x = self.embed(&[token])?;
        for (i, (block, cache)) in self.blocks.iter().zip(session.layers.iter_mut()).enumerate() {
            x = match (block, cache) {
                (Block::Attention(p), LayerCache::Attention(kv)) => gqa_decode_step(&self.attn, p, &x, kv)?,
                (Block::Mamba(p), LayerCache::Mamba(st)) => ssd_layer_decode(&self.ssd, p, &x, st)?,
                (Block::Ffn(p), LayerCache::Ffn) => moe_layer_forward(&self.moe, p, &x)?,
                _ => return Err(Error::Cache(format!("session layer {i} does not match the model"))),
            };
            self.check_width(&x, i, 1)?;
        }
        session.position += 1;
        self.logits(&x)?.reshape(&[self.cfg.vocab_size])
    }

    /// Prefills `prompt`, then produces up to `max_new` tokens, stopping early
    /// after an EOS.
    pub fn generate(&self, prompt: &[u32], max_new: usize, sampling: Sampling) -> Result<Vec<u32>> {
        if max_new == 0 {
            return Err(Error::Input("max_new must be >= 1".into()));
        }
        let (logits, mut session) = self.prefill(prompt)?;
        let mut rng = match sampling {
            Sampling::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Sampling::Greedy => None,
        };
        let mut next_logits = logits.row(prompt.len() - 1).to_vec();
        let mut out = Vec::with_capacity(max_new);
        loop {
            let token = match (sampling, rng.as_mut()) {
                (Sampling::Temperature { tau, .. }, Some(rng)) => sample(&next_logits, tau, rng)?,
                _ => argmax(&next_logits) as u32,
            };
            out.push(token);
            if out.len() == max_new || token == tokenizer::EOS {
                break;
            }
            next_logits = self.decode_step(&mut session, token)?.into_data();
        }
        Ok(out)
    }
}

fn sample<R: Rng>(logits: &[f64], tau: f64, rng: &mut R) -> Result<u32> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Input(format!("temperature must be positive, got {tau}")));
    }
    let mut probs: Vec<f64> = logits.iter().map(|l| l / tau).collect();
    softmax_in_place(&mut probs);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i as u32);
        }
    }
    // rounding left u above the final cumulative sum
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u32)
}
