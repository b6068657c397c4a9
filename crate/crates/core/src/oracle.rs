//! Slow reference implementations.
//!
//! Everything here is written directly from the defining formulas with plain
//! loops in `f64`, sharing no kernels with the fast paths it checks. The
//! verification suite and the tests compare the fast paths against these.

use crate::attention::{AttnConfig, AttnParams};
use crate::moe::{ExpertParams, MoeConfig, MoeParams};
use crate::numerics::{sigmoid, Tensor};
use crate::rlmath::SampleGroup;
use crate::ssd::{SsdConfig, SsdLayerParams};

pub fn matmul_triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Row-wise `x / sqrt(mean(x²) + eps) * gain` with `d = gain.len()`.
pub fn rmsnorm_direct(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let d = gain.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean_sq = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let denom = (mean_sq + eps).sqrt();
        out.extend(row.iter().zip(gain).map(|(v, g)| v / denom * g));
    }
    out
}

/// `e^z / Σ e^z` with no max subtraction.
pub fn softmax_direct(z: &[f64]) -> Vec<f64> {
    let total: f64 = z.iter().map(|v| v.exp()).sum();
    z.iter().map(|v| v.exp() / total).collect()
}

/// `L[i][j] = Π_{k=j+1..=i} exp(log_alpha[k])` by explicit products.
pub fn decay_direct_product(log_alpha: &[f64]) -> Vec<f64> {
    let t = log_alpha.len();
    let mut out = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..=i {
            out[i * t + j] = (j + 1..=i).map(|k| log_alpha[k].exp()).product();
        }
    }
    out
}

fn softplus_direct(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

/// Whole Mamba2 layer in `f64`, token by token, from zero state.
/// Returns the `[T, d_model]` residual output as a flat vector.
pub fn ssd_layer_shadow(cfg: &SsdConfig, params: &SsdLayerParams, x: &Tensor) -> Vec<f64> {
    let d_model = params.d_model();
    let t_len = x.dim(0);
    let (nh, p, g, n) = (cfg.n_heads, cfg.d_head, cfg.n_groups, cfg.d_state);
    let di = nh * p;
    let gn = g * n;
    let ch = di + 2 * gn;
    let heads_per_group = nh / g;

    let proj = |row: &[f64], w: &Tensor| -> Vec<f64> {
        matmul_triple_loop(row, w.data(), 1, d_model, w.dim(1))
    };

    let mut pre_conv: Vec<Vec<f64>> = Vec::new();
    let mut state = vec![0.0; nh * p * n];
    let mut out = Vec::with_capacity(t_len * d_model);
    for t in 0..t_len {
        let xr = x.row(t);
        let hidden = rmsnorm_direct(xr, params.norm.gain.data(), params.norm.eps);
        let mut stream = proj(&hidden, &params.x_proj);
        stream.extend(proj(&hidden, &params.b_proj));
        stream.extend(proj(&hidden, &params.c_proj));
        let z = proj(&hidden, &params.z_proj);
        let dt_raw = proj(&hidden, &params.dt_proj);
        pre_conv.push(stream.clone());

        let conv_out: Vec<f64> = match &params.conv {
            Some(conv) => {
                let w = cfg.conv_width;
                (0..ch)
                    .map(|c| {
                        let mut acc = conv.bias.data()[c];
                        for lag in 0..w {
                            if t >= lag {
                                acc += conv.weight.data()[c * w + (w - 1 - lag)] * pre_conv[t - lag][c];
                            }
                        }
                        acc * sigmoid(acc)
                    })
                    .collect()
            }
            None => stream,
        };
        let (xs, rest) = conv_out.split_at(di);
        let (bs, cs) = rest.split_at(gn);

        let mut y = vec![0.0; di];
        for h in 0..nh {
            let grp = h / heads_per_group;
            let dt = softplus_direct(dt_raw[h] + params.dt_bias.data()[h]);
            let a = -params.a_log.data()[h].exp();
            let alpha = (dt * a).exp();
            for pi in 0..p {
                let mut acc = 0.0;
                for ni in 0..n {
                    let idx = (h * p + pi) * n + ni;
                    state[idx] = alpha * state[idx] + dt * xs[h * p + pi] * bs[grp * n + ni];
                    acc += state[idx] * cs[grp * n + ni];
                }
                y[h * p + pi] = acc + params.d_skip.data()[h] * xs[h * p + pi];
            }
        }
        let gated: Vec<f64> = y.iter().zip(&z).map(|(yv, zv)| yv * zv * sigmoid(*zv)).collect();
        let o = matmul_triple_loop(&gated, params.out_proj.data(), 1, di, d_model);
        out.extend(xr.iter().zip(&o).map(|(a, b)| a + b));
    }
    out
}

/// Rotary embedding from the defining angle formula, one vector at a time.
fn rope_direct(v: &mut [f64], pos: usize, base: f64, alpha: f64) {
    let d = v.len() as f64;
    let scaled = base * alpha.powf(d / (d - 2.0));
    for i in 0..v.len() / 2 {
        let theta = pos as f64 / scaled.powf(2.0 * i as f64 / d);
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * theta.cos() - b * theta.sin();
        v[2 * i + 1] = a * theta.sin() + b * theta.cos();
    }
}

/// Standard multi-head causal attention over a fresh sequence, written out with
/// a full score matrix. Requires `n_kv_heads == n_q_heads`.
pub fn mha_prefill(cfg: &AttnConfig, params: &AttnParams, x: &Tensor) -> Vec<f64> {
    assert_eq!(cfg.n_q_heads, cfg.n_kv_heads, "oracle covers plain multi-head attention only");
    let (t_len, d_model) = (x.dim(0), x.dim(1));
    let (nh, d) = (cfg.n_q_heads, cfg.d_head);
    let width = nh * d;
    let hidden = rmsnorm_direct(x.data(), params.norm.gain.data(), params.norm.eps);
    let mut q = matmul_triple_loop(&hidden, params.wq.data(), t_len, d_model, width);
    let mut k = matmul_triple_loop(&hidden, params.wk.data(), t_len, d_model, width);
    let v = matmul_triple_loop(&hidden, params.wv.data(), t_len, d_model, width);
    if cfg.use_qk_norm {
        q = rmsnorm_direct(&q, params.q_norm.gain.data(), params.q_norm.eps);
        k = rmsnorm_direct(&k, params.k_norm.gain.data(), params.k_norm.eps);
    }
    for t in 0..t_len {
        for h in 0..nh {
            let r = (t * nh + h) * d..(t * nh + h + 1) * d;
            rope_direct(&mut q[r.clone()], t, cfg.rope.base, cfg.rope.ntk_alpha);
            rope_direct(&mut k[r], t, cfg.rope.base, cfg.rope.ntk_alpha);
        }
    }
    let mut heads = vec![0.0; t_len * width];
    for h in 0..nh {
        for i in 0..t_len {
            let qi = &q[(i * nh + h) * d..(i * nh + h + 1) * d];
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    let kj = &k[(j * nh + h) * d..(j * nh + h + 1) * d];
                    qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let probs = softmax_direct(&scores);
            for (j, pj) in probs.iter().enumerate() {
                for e in 0..d {
                    heads[(i * nh + h) * d + e] += pj * v[(j * nh + h) * d + e];
                }
            }
        }
    }
    let o = matmul_triple_loop(&heads, params.wo.data(), t_len, width, d_model);
    x.data().iter().zip(&o).map(|(a, b)| a + b).collect()
}

/// Evaluates every routed expert on every token and masks the unselected ones
/// to zero. Selection is repeated argmax (lowest index wins ties). No drops.
pub fn moe_dense(cfg: &MoeConfig, params: &MoeParams, x: &Tensor) -> Vec<f64> {
    let (t_len, d_model) = (x.dim(0), x.dim(1));
    let e = cfg.n_experts;
    let expert = |p: &ExpertParams, row: &[f64]| -> Vec<f64> {
        let f = cfg.d_ff;
        let g = matmul_triple_loop(row, p.gate.data(), 1, d_model, f);
        let u = matmul_triple_loop(row, p.up.data(), 1, d_model, f);
        let h: Vec<f64> = g.iter().zip(&u).map(|(a, b)| a * sigmoid(*a) * b).collect();
        matmul_triple_loop(&h, p.down.data(), 1, f, d_model)
    };
    let mut out = Vec::with_capacity(t_len * d_model);
    for t in 0..t_len {
        let row = x.row(t);
        let logits = matmul_triple_loop(row, params.router.data(), 1, d_model, e);
        let probs = softmax_direct(&logits);
        let mut mask = vec![0.0; e];
        let mut taken = vec![false; e];
        for _ in 0..cfg.top_k {
            let mut best = None;
            for i in 0..e {
                if !taken[i] && best.is_none_or(|b: usize| probs[i] > probs[b]) {
                    best = Some(i);
                }
            }
            let b = best.expect("k <= E");
            taken[b] = true;
            mask[b] = probs[b];
        }
        let kept: f64 = mask.iter().sum();
        let mut y = vec![0.0; d_model];
        for s in &params.shared {
            for (a, v) in y.iter_mut().zip(expert(s, row)) {
                *a += v;
            }
        }
        for (i, ex) in params.experts.iter().enumerate() {
            let w = mask[i] / kept;
            for (a, v) in y.iter_mut().zip(expert(ex, row)) {
                *a += w * v;
            }
        }
        out.extend(y);
    }
    out
}

/// Longest chain (in nodes) of a DAG by memoized depth-first search from each
/// node. Panics on cycles.
pub fn longest_path_dfs(n: usize, edges: &[(usize, usize)]) -> usize {
    fn visit(u: usize, succ: &[Vec<usize>], memo: &mut [Option<usize>], on_stack: &mut [bool]) -> usize {
        if let Some(d) = memo[u] {
            return d;
        }
        assert!(!on_stack[u], "cycle through node {u}");
        on_stack[u] = true;
        let best = succ[u].iter().map(|&v| visit(v, succ, memo, on_stack)).max().unwrap_or(0);
        on_stack[u] = false;
        memo[u] = Some(best + 1);
        best + 1
    }
    let mut succ = vec![Vec::new(); n];
    for &(a, b) in edges {
        succ[a].push(b);
    }
    let mut memo = vec![None; n];
    let mut on_stack = vec![false; n];
    (0..n).map(|u| visit(u, &succ, &mut memo, &mut on_stack)).max().unwrap_or(0)
}

/// Token-level GRPO loss written out cell by cell: advantages from the
/// population mean and std, then one flat sum over every counted token.
pub fn grpo_loss_direct(groups: &[SampleGroup], eps: f64, beta: f64) -> f64 {
    let mut surrogate_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut tokens = 0usize;
    for g in groups {
        let n = g.responses.len() as f64;
        let mean = g.responses.iter().map(|r| r.reward).sum::<f64>() / n;
        let var = g.responses.iter().map(|r| (r.reward - mean) * (r.reward - mean)).sum::<f64>() / n;
        for r in &g.responses {
            let adv = if var == 0.0 { 0.0 } else { (r.reward - mean) / var.sqrt() };
            for t in 0..r.logp_policy.len() {
                if !r.mask.is_empty() && !r.mask[t] {
                    continue;
                }
                let ratio = (r.logp_policy[t] - r.logp_old[t]).exp();
                let clipped = if ratio < 1.0 - eps {
                    1.0 - eps
                } else if ratio > 1.0 + eps {
                    1.0 + eps
                } else {
                    ratio
                };
                let unclipped_term = ratio * adv;
                let clipped_term = clipped * adv;
                surrogate_sum += if unclipped_term < clipped_term { unclipped_term } else { clipped_term };
                let q = (r.logp_ref[t] - r.logp_policy[t]).exp();
                kl_sum += (q - q.ln() - 1.0).clamp(0.0, 10.0);
                tokens += 1;
            }
        }
    }
    if tokens == 0 {
        return 0.0;
    }
    -surrogate_sum / tokens as f64 + beta * kl_sum / tokens as f64
}
