//! Mixture-of-experts feed-forward: softmax router, top-k selection with
//! renormalized weights, an always-on shared expert, and capacity accounting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{linear, silu_scalar, softmax_in_place, Precision, RmsNorm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DropPolicy {
    #[default]
    NoDrop,
    /// Tokens routed to an expert past its capacity lose that expert's
    /// contribution. Tokens are admitted in sequence order.
    DropToCapacity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub n_shared: usize,
    pub top_k: usize,
    pub capacity_factor: f64,
    pub d_ff: usize,
    pub drop_policy: DropPolicy,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 {
            return Err(Error::config("n_experts", "must be >= 1"));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::config(
                "top_k",
                format!("must be in 1..={}, got {}", self.n_experts, self.top_k),
            ));
        }
        if !(self.capacity_factor > 0.0) || !self.capacity_factor.is_finite() {
            return Err(Error::config("capacity_factor", "must be positive and finite"));
        }
        if self.d_ff == 0 {
            return Err(Error::config("d_ff", "must be >= 1"));
        }
        Ok(())
    }
}

/// Selected experts of one token, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRoute {
    pub experts: Vec<usize>,
    /// Renormalized probabilities of `experts`; they sum to 1.
    pub weights: Vec<f64>,
    pub dropped: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub n_experts: usize,
    pub tokens: Vec<TokenRoute>,
}

/// Softmax over all experts, keep the `k` most probable (ties to the lower
/// index), renormalize the kept probabilities.
pub fn route_topk(router_logits: &Tensor, k: usize) -> Result<RoutingDecision> {
    if router_logits.rank() != 2 {
        return Err(Error::shape(format!(
            "router logits must be [T, E], got {:?}",
            router_logits.shape()
        )));
    }
    let e = router_logits.dim(1);
    if k == 0 || k > e {
        return Err(Error::config("top_k", format!("k = {k} with {e} experts")));
    }
    let tokens = router_logits
        .rows()
        .map(|row| {
            let mut probs = row.to_vec();
            softmax_in_place(&mut probs);
            let mut order: Vec<usize> = (0..e).collect();
            // stable sort keeps lower indices first among equal probabilities
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
            order.truncate(k);
            let total: f64 = order.iter().map(|&i| probs[i]).sum();
            TokenRoute {
                weights: order.iter().map(|&i| probs[i] / total).collect(),
                dropped: vec![false; k],
                experts: order,
            }
        })
        .collect();
    Ok(RoutingDecision { n_experts: e, tokens })
}

/// Per-expert token budget `⌈γ·T·k / E⌉` (at least 1).
pub fn expert_capacity(tokens: usize, cfg: &MoeConfig) -> usize {
    let raw = cfg.capacity_factor * (tokens * cfg.top_k) as f64 / cfg.n_experts as f64;
    (raw.ceil() as usize).max(1)
}

/// Marks assignments beyond `capacity` as dropped, admitting tokens in order.
pub fn apply_capacity(decision: &mut RoutingDecision, capacity: usize) {
    let mut load = vec![0usize; decision.n_experts];
    for tok in &mut decision.tokens {
        for (slot, &e) in tok.experts.iter().enumerate() {
            if load[e] < capacity {
                load[e] += 1;
                tok.dropped[slot] = false;
            } else {
                tok.dropped[slot] = true;
            }
        }
    }
}

/// Gated feed-forward `down(silu(x·gate) ⊙ (x·up))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    /// `[d_model, d_ff]`
    pub gate: Tensor,
    /// `[d_model, d_ff]`
    pub up: Tensor,
    /// `[d_ff, d_model]`
    pub down: Tensor,
}

impl ExpertParams {
    pub fn init<R: Rng + ?Sized>(d_model: usize, d_ff: usize, rng: &mut R) -> Result<Self> {
        let p = Precision::F32;
        let (bi, bo) = (1.0 / (d_model as f64).sqrt(), 1.0 / (d_ff as f64).sqrt());
        Ok(Self {
            gate: Tensor::rand_uniform(&[d_model, d_ff], -bi, bi, p, rng)?,
            up: Tensor::rand_uniform(&[d_model, d_ff], -bi, bi, p, rng)?,
            down: Tensor::rand_uniform(&[d_ff, d_model], -bo, bo, p, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = linear(x, &self.gate)?;
        let u = linear(x, &self.up)?;
        let h = g.map(silu_scalar).mul(&u)?;
        linear(&h, &self.down)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    /// Pre-norm applied by [`moe_layer_forward`].
    pub norm: RmsNorm,
    /// `[d_model, n_experts]`
    pub router: Tensor,
    pub shared: Vec<ExpertParams>,
    pub experts: Vec<ExpertParams>,
}

impl MoeParams {
    pub fn init<R: Rng + ?Sized>(
        cfg: &MoeConfig,
        d_model: usize,
        norm_eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (d_model as f64).sqrt();
        let router = Tensor::rand_uniform(&[d_model, cfg.n_experts], -bound, bound, Precision::F32, rng)?;
        let shared = (0..cfg.n_shared)
            .map(|_| ExpertParams::init(d_model, cfg.d_ff, rng))
            .collect::<Result<_>>()?;
        let experts = (0..cfg.n_experts)
            .map(|_| ExpertParams::init(d_model, cfg.d_ff, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            norm: RmsNorm::ones(d_model, norm_eps, Precision::F32)?,
            router,
            shared,
            experts,
        })
    }

    pub fn d_model(&self) -> usize {
        self.router.dim(0)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("norm".to_string(), &self.norm.gain), ("router".to_string(), &self.router)];
        let groups = [("shared", &self.shared), ("expert", &self.experts)];
        for (prefix, list) in groups {
            for (i, e) in list.iter().enumerate() {
                out.push((format!("{prefix}.{i}.gate"), &e.gate));
                out.push((format!("{prefix}.{i}.up"), &e.up));
                out.push((format!("{prefix}.{i}.down"), &e.down));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("norm".to_string(), &mut self.norm.gain),
            ("router".to_string(), &mut self.router),
        ];
        for (prefix, list) in [("shared", &mut self.shared), ("expert", &mut self.experts)] {
            for (i, e) in list.iter_mut().enumerate() {
                out.push((format!("{prefix}.{i}.gate"), &mut e.gate));
                out.push((format!("{prefix}.{i}.up"), &mut e.up));
                out.push((format!("{prefix}.{i}.down"), &mut e.down));
            }
        }
        out
    }

    pub fn validate(&self, cfg: &MoeConfig, d_model: usize) -> Result<()> {
        if self.shared.len() != cfg.n_shared || self.experts.len() != cfg.n_experts {
            return Err(Error::config(
                "n_experts",
                format!(
                    "params hold {} shared / {} routed experts, config wants {} / {}",
                    self.shared.len(),
                    self.experts.len(),
                    cfg.n_shared,
                    cfg.n_experts
                ),
            ));
        }
        for (name, t) in self.named_tensors() {
            let want: Vec<usize> = match name.as_str() {
                "norm" => vec![d_model],
                "router" => vec![d_model, cfg.n_experts],
                n if n.ends_with(".down") => vec![cfg.d_ff, d_model],
                _ => vec![d_model, cfg.d_ff],
            };
            if t.shape() != want.as_slice() {
                return Err(Error::shape(format!(
                    "moe tensor `{name}` has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Routes `x[T, d_model]` and combines experts; no norm and no residual.
/// Returns the output together with the routing used.
pub fn moe_forward_with_routing(
    cfg: &MoeConfig,
    params: &MoeParams,
    x: &Tensor,
) -> Result<(Tensor, RoutingDecision)> {
    cfg.validate()?;
    let d_model = params.d_model();
    if x.rank() != 2 || x.dim(1) != d_model {
        return Err(Error::shape(format!(
            "moe expects [T, {d_model}], got {:?}",
            x.shape()
        )));
    }
    if params.experts.len() != cfg.n_experts {
        return Err(Error::config("n_experts", "parameter count differs from config"));
    }
    let t_len = x.dim(0);
    let prec = x.precision();
    let logits = linear(x, &params.router)?;
    let mut decision = route_topk(&logits, cfg.top_k)?;
    if cfg.drop_policy == DropPolicy::DropToCapacity {
        apply_capacity(&mut decision, expert_capacity(t_len, cfg));
    }

    let mut acc = vec![0.0; t_len * d_model];
    for shared in &params.shared {
        let y = shared.forward(x)?;
        for (a, v) in acc.iter_mut().zip(y.data()) {
            *a += v;
        }
    }
    // batch each expert over the tokens it kept
    let mut assigned: Vec<Vec<(usize, f64)>> = vec![Vec::new(); cfg.n_experts];
    for (t, tok) in decision.tokens.iter().enumerate() {
        for ((&e, &w), &dropped) in tok.experts.iter().zip(&tok.weights).zip(&tok.dropped) {
            if !dropped {
                assigned[e].push((t, w));
            }
        }
    }
    for (e, rows) in assigned.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let mut gathered = Vec::with_capacity(rows.len() * d_model);
        for &(t, _) in rows {
            gathered.extend_from_slice(x.row(t));
        }
        let batch = Tensor::new(&[rows.len(), d_model], gathered, prec)?;
        let y = params.experts[e].forward(&batch)?;
        for (i, &(t, w)) in rows.iter().enumerate() {
            for (a, v) in acc[t * d_model..(t + 1) * d_model].iter_mut().zip(y.row(i)) {
                *a += w * v;
            }
        }
    }
    Ok((Tensor::new(&[t_len, d_model], acc, prec)?, decision))
}

/// `y_t = Σ shared(x_t) + Σ_{i∈topk} w_i · expert_i(x_t)`, dropped assignments omitted.
pub fn moe_forward(cfg: &MoeConfig, params: &MoeParams, x: &Tensor) -> Result<Tensor> {
    moe_forward_with_routing(cfg, params, x).map(|(y, _)| y)
}

/// Pre-norm MoE block with residual: `x + moe(norm(x))`.
pub fn moe_layer_forward(cfg: &MoeConfig, params: &MoeParams, residual_in: &Tensor) -> Result<Tensor> {
    let hidden = params.norm.forward(residual_in)?;
    residual_in.add(&moe_forward(cfg, params, &hidden)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadStats {
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
    /// Busiest expert's load over the mean load.
    pub max_over_mean: f64,
    pub dropped: usize,
}

pub fn load_balance_stats(decision: &RoutingDecision) -> LoadStats {
    let mut counts = vec![0usize; decision.n_experts];
    let mut dropped = 0;
    for tok in &decision.tokens {
        for (&e, &d) in tok.experts.iter().zip(&tok.dropped) {
            if d {
                dropped += 1;
            } else {
                counts[e] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    let fractions = counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect();
    let mean = total as f64 / decision.n_experts as f64;
    let max = counts.iter().copied().max().unwrap_or(0) as f64;
    LoadStats {
        counts,
        fractions,
        max_over_mean: if total == 0 { 0.0 } else { max / mean },
        dropped,
    }
}
