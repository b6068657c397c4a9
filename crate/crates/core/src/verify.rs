//! Self-verification suites: every fast path against its slow oracle, plus the
//! structural invariants, over seeded random trials.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{apply_rope, gqa_decode_step, gqa_prefill, ntk_rope_base, AttnConfig, AttnParams, KvCache, RopeConfig};
use crate::cpsim::{compare_with_single_rank, shard_sequence, trace_critical_path, MessageKind, Paradigm};
use crate::error::Result;
use crate::model::{argmax, build_model, parse_block_pattern, turbos_128_pattern, validate_production_shape, ModelConfig, Sampling};
use crate::moe::{expert_capacity, moe_forward, DropPolicy, MoeConfig, MoeParams};
use crate::numerics::{decay_matrix, matmul, max_abs_diff, rmsnorm, round_bf16, softmax_lastdim, Precision, Tensor};
use crate::oracle;
use crate::rlmath::{bon_mask, dynamic_filter, group_advantages, grpo_token_loss, k3_token, GrpoHyper, SampleGroup, K3_CLIP};
use crate::ssd::{ssd_chunked_scan, ssd_decode_step, ssd_layer_forward, ssd_naive_scan, state_readout, ScanInputs, SsdConfig, SsdLayerParams, SsmState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Numerics,
    Ssd,
    Attention,
    Moe,
    Model,
    Cpsim,
    Rlmath,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 8] = ["numerics", "ssd", "attention", "moe", "model", "cpsim", "rlmath", "all"];
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "numerics" => Suite::Numerics,
            "ssd" => Suite::Ssd,
            "attention" => Suite::Attention,
            "moe" => Suite::Moe,
            "model" => Suite::Model,
            "cpsim" => Suite::Cpsim,
            "rlmath" => Suite::Rlmath,
            "all" => Suite::All,
            other => return Err(format!("unknown suite `{other}`; expected one of {}", Suite::NAMES.join(", "))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Largest deviation over all trials; for counting checks, the number of
    /// mismatches.
    pub max_dev: f64,
    pub tolerance: f64,
    pub error: Option<String>,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "pass" } else { "fail" };
        write!(f, "CHECK {} {verdict} {:.3e}", self.name, self.max_dev)?;
        if let Some(e) = &self.error {
            write!(f, " ({e})")?;
        }
        Ok(())
    }
}

type Trial = fn(&mut ChaCha8Rng) -> Result<f64>;

struct Check {
    name: &'static str,
    tolerance: f64,
    trial: Trial,
}

const fn check(name: &'static str, tolerance: f64, trial: Trial) -> Check {
    Check { name, tolerance, trial }
}

fn run(check: &Check, seed: u64, trials: usize, salt: u64) -> CheckResult {
    let mut max_dev: f64 = 0.0;
    let mut error = None;
    for i in 0..trials as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (salt << 32) ^ i.wrapping_mul(0x9e37_79b9));
        match (check.trial)(&mut rng) {
            Ok(d) if d.is_nan() => {
                max_dev = f64::INFINITY;
                error = Some(format!("NaN deviation in trial {i}"));
                break;
            }
            Ok(d) => max_dev = max_dev.max(d),
            Err(e) => {
                max_dev = f64::INFINITY;
                error = Some(e.to_string());
                break;
            }
        }
    }
    CheckResult {
        name: check.name.to_string(),
        passed: error.is_none() && max_dev <= check.tolerance,
        max_dev,
        tolerance: check.tolerance,
        error,
    }
}

fn checks(suite: Suite) -> Vec<Check> {
    match suite {
        Suite::Numerics => vec![
            check("numerics/matmul-vs-triple-loop", 1e-12, matmul_trial),
            check("numerics/rmsnorm-vs-direct", 1e-12, rmsnorm_trial),
            check("numerics/softmax-vs-direct", 1e-12, softmax_trial),
            check("numerics/decay-vs-direct-product", 1e-12, decay_trial),
            check("numerics/bf16-idempotent", 0.0, bf16_trial),
        ],
        Suite::Ssd => vec![
            check("ssd/chunked-vs-naive", 1e-4, chunked_vs_naive_trial),
            check("ssd/decode-vs-naive", 1e-4, decode_vs_naive_trial),
            check("ssd/readout-completes-zero-state-scan", 1e-4, readout_trial),
            check("ssd/layer-vs-f64-shadow", 1e-4, ssd_layer_trial),
        ],
        Suite::Attention => vec![
            check("attention/gqa-vs-mha", 1e-5, gqa_vs_mha_trial),
            check("attention/decode-vs-prefill", 1e-5, attn_decode_trial),
            check("attention/rope-norm", 1e-6, rope_norm_trial),
            check("attention/ntk-base-relative", 1e-6, ntk_trial),
            check("attention/cache-floats-per-token", 0.0, cache_floats_trial),
        ],
        Suite::Moe => vec![
            check("moe/dense-oracle", 1e-5, moe_dense_trial),
            check("moe/identical-experts", 1e-6, moe_identical_trial),
            check("moe/capacity-grid", 0.0, capacity_trial),
        ],
        Suite::Model => vec![
            check("model/prefill-vs-decode", 1e-4, model_decode_trial),
            check("model/greedy-vs-recompute", 0.0, greedy_trial),
            check("model/production-census", 0.0, census_trial),
        ],
        Suite::Cpsim => vec![
            check("cpsim/sequential-vs-single-rank", 1e-4, cp_sequential_trial),
            check("cpsim/parallel-vs-single-rank", 1e-4, cp_parallel_trial),
            check("cpsim/message-counts", 0.0, cp_messages_trial),
            check("cpsim/critical-path-vs-dfs", 0.0, cp_depth_trial),
        ],
        Suite::Rlmath => vec![
            check("rlmath/advantage-sum", 1e-6, advantage_trial),
            check("rlmath/loss-vs-direct", 1e-6, loss_trial),
            check("rlmath/k3-bounds", 0.0, k3_trial),
            check("rlmath/filter-vs-recount", 0.0, filter_trial),
            check("rlmath/bon-mask-recount", 0.0, bon_trial),
        ],
        Suite::All => [
            Suite::Numerics,
            Suite::Ssd,
            Suite::Attention,
            Suite::Moe,
            Suite::Model,
            Suite::Cpsim,
            Suite::Rlmath,
        ]
        .into_iter()
        .flat_map(checks)
        .collect(),
    }
}

/// Runs every check of `suite` for `trials` seeded trials each.
pub fn run_suite(suite: Suite, seed: u64, trials: usize) -> Vec<CheckResult> {
    checks(suite)
        .iter()
        .enumerate()
        .map(|(i, c)| run(c, seed, trials.max(1), i as u64 + 1))
        .collect()
}

fn rand_t(shape: &[usize], p: Precision, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Tensor::rand_uniform(shape, -1.0, 1.0, p, rng)
}

fn matmul_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, k, n) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..9));
    let a = rand_t(&[m, k], Precision::F64, rng)?;
    let b = rand_t(&[k, n], Precision::F64, rng)?;
    let c = matmul(&a, &b)?;
    Ok(max_abs_diff(c.data(), &oracle::matmul_triple_loop(a.data(), b.data(), m, k, n)))
}

fn rmsnorm_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (r, d) = (rng.gen_range(1..6), rng.gen_range(1..20));
    let x = rand_t(&[r, d], Precision::F64, rng)?;
    let g = rand_t(&[d], Precision::F64, rng)?;
    let y = rmsnorm(&x, &g, 1e-5)?;
    Ok(max_abs_diff(y.data(), &oracle::rmsnorm_direct(x.data(), g.data(), 1e-5)))
}

fn softmax_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = rng.gen_range(1..30);
    let x = Tensor::rand_uniform(&[d], -5.0, 5.0, Precision::F64, rng)?;
    Ok(max_abs_diff(softmax_lastdim(&x).data(), &oracle::softmax_direct(x.data())))
}

fn decay_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let t = rng.gen_range(1..24);
    let la = Tensor::rand_uniform(&[t], -0.5, 0.0, Precision::F64, rng)?;
    Ok(max_abs_diff(decay_matrix(&la)?.data(), &oracle::decay_direct_product(la.data())))
}

fn bf16_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let worst = (0..1000)
        .map(|_| {
            let v = rng.gen_range(-1e6..1e6);
            let once = round_bf16(v);
            (round_bf16(once) - once).abs()
        })
        .fold(0.0, f64::max);
    Ok(worst)
}

fn random_ssd_cfg(rng: &mut ChaCha8Rng, chunk_max: usize) -> SsdConfig {
    let n_groups = [1, 2][rng.gen_range(0..2)];
    SsdConfig {
        n_heads: 2 * n_groups,
        d_head: rng.gen_range(1..5),
        d_state: rng.gen_range(1..9),
        n_groups,
        chunk_size: rng.gen_range(1..=chunk_max),
        conv_width: 0,
    }
}

fn chunked_vs_naive_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let t = [31, 64, 100][rng.gen_range(0..3)];
    let cfg = random_ssd_cfg(rng, t);
    let inputs = ScanInputs::random(&cfg, t, Precision::F32, rng);
    let h0 = SsmState::random(&cfg, 0.5, rng);
    let (y, h) = ssd_chunked_scan(&cfg, &inputs, &h0)?;
    let (y_ref, h_ref) = ssd_naive_scan(&cfg, &inputs.to_precision(Precision::F64), &h0.to_precision(Precision::F64))?;
    Ok(y.max_abs_diff(&y_ref)?.max(h.max_abs_diff(&h_ref)))
}

fn decode_vs_naive_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = random_ssd_cfg(rng, 8);
    let t = rng.gen_range(1..40);
    let inputs = ScanInputs::random(&cfg, t, Precision::F32, rng);
    let (y_ref, h_ref) = ssd_naive_scan(&cfg, &inputs.to_precision(Precision::F64), &SsmState::zeros_with_precision(&cfg, Precision::F64))?;
    let mut state = SsmState::zeros(&cfg);
    let mut dev: f64 = 0.0;
    let (h, p, g, n) = (cfg.n_heads, cfg.d_head, cfg.n_groups, cfg.d_state);
    for s in 0..t {
        let step = inputs.slice(s, s + 1)?;
        let y = ssd_decode_step(
            &cfg,
            &inputs.a,
            &inputs.d,
            &mut state,
            &step.x.reshape(&[h, p])?,
            &step.dt.reshape(&[h])?,
            &step.b.reshape(&[g, n])?,
            &step.c.reshape(&[g, n])?,
        )?;
        dev = dev.max(max_abs_diff(y.data(), &y_ref.data()[s * h * p..(s + 1) * h * p]));
    }
    Ok(dev.max(state.max_abs_diff(&h_ref)))
}

fn readout_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = random_ssd_cfg(rng, 16);
    let t = rng.gen_range(1..50);
    let inputs = ScanInputs::random(&cfg, t, Precision::F32, rng);
    let h0 = SsmState::random(&cfg, 1.0, rng);
    let (y_full, _) = ssd_chunked_scan(&cfg, &inputs, &h0)?;
    let (y_zero, _) = ssd_chunked_scan(&cfg, &inputs, &SsmState::zeros(&cfg))?;
    let y = y_zero.add(&state_readout(&cfg, &inputs, &h0)?)?;
    y.max_abs_diff(&y_full)
}

fn ssd_layer_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut cfg = random_ssd_cfg(rng, 8);
    cfg.conv_width = [0, 2, 4][rng.gen_range(0..3)];
    let d_model = rng.gen_range(2..12);
    let params = SsdLayerParams::init(&cfg, d_model, 1e-5, rng)?;
    let x = rand_t(&[rng.gen_range(1..20), d_model], Precision::F32, rng)?;
    let (y, _) = ssd_layer_forward(&cfg, &params, &x, None)?;
    Ok(max_abs_diff(y.data(), &oracle::ssd_layer_shadow(&cfg, &params, &x)))
}

fn attn_cfg(nq: usize, nkv: usize, d: usize, alpha: f64) -> AttnConfig {
    AttnConfig {
        n_q_heads: nq,
        n_kv_heads: nkv,
        d_head: d,
        rope: RopeConfig { base: 10_000.0, ntk_alpha: alpha, d_head: d },
        use_qk_norm: true,
    }
}

fn gqa_vs_mha_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let h = rng.gen_range(1..5);
    let c = attn_cfg(h, h, [4, 8][rng.gen_range(0..2)], [1.0, 50.0][rng.gen_range(0..2)]);
    let d_model = rng.gen_range(4..17);
    let p = AttnParams::init(&c, d_model, 1e-5, rng)?;
    let x = rand_t(&[rng.gen_range(1..12), d_model], Precision::F32, rng)?;
    let y = gqa_prefill(&c, &p, &x, &mut KvCache::new(&c))?;
    Ok(max_abs_diff(y.data(), &oracle::mha_prefill(&c, &p, &x)))
}

fn attn_decode_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = attn_cfg(4, [1, 2, 4][rng.gen_range(0..3)], 8, 1.0);
    let p = AttnParams::init(&c, 16, 1e-5, rng)?;
    let t = rng.gen_range(1..12);
    let x = rand_t(&[t, 16], Precision::F32, rng)?;
    let full = gqa_prefill(&c, &p, &x, &mut KvCache::new(&c))?;
    let mut cache = KvCache::new(&c);
    let mut dev: f64 = 0.0;
    for s in 0..t {
        let y = gqa_decode_step(&c, &p, &x.slice_outer(s, s + 1)?, &mut cache)?;
        dev = dev.max(max_abs_diff(y.data(), full.row(s)));
    }
    Ok(dev)
}

fn rope_norm_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = 2 * rng.gen_range(2..9);
    let alpha = [1.0, 50.0, 1000.0][rng.gen_range(0..3)];
    let cfg = RopeConfig { base: 10_000.0, ntk_alpha: alpha, d_head: d };
    let t = rng.gen_range(1..8);
    let x = rand_t(&[t, 2, d], Precision::F64, rng)?;
    let positions: Vec<usize> = (0..t).map(|_| rng.gen_range(0..300_000)).collect();
    let y = apply_rope(&x, &positions, &cfg)?;
    let norms = |v: &Tensor| -> Vec<f64> { v.data().chunks(d).map(|c| c.iter().map(|a| a * a).sum::<f64>().sqrt()).collect() };
    Ok(max_abs_diff(&norms(&x), &norms(&y)))
}

fn ntk_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = 2 * rng.gen_range(2..65);
    let base = rng.gen_range(100.0..1e6);
    let mut worst: f64 = 0.0;
    for alpha in [1.0, 50.0, 1000.0] {
        let got = ntk_rope_base(&RopeConfig { base, ntk_alpha: alpha, d_head: d })?;
        let d = d as f64;
        let want = base * alpha.powf(d / (d - 2.0));
        worst = worst.max(((got - want) / want).abs());
    }
    Ok(worst)
}

fn cache_floats_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let nkv = [1, 2, 4][rng.gen_range(0..3)];
    let c = attn_cfg(4, nkv, 8, 1.0);
    let p = AttnParams::init(&c, 16, 1e-5, rng)?;
    let t = rng.gen_range(1..10);
    let mut cache = KvCache::new(&c);
    gqa_prefill(&c, &p, &rand_t(&[t, 16], Precision::F32, rng)?, &mut cache)?;
    Ok((cache.stored_floats() as f64 - (2 * nkv * 8 * t) as f64).abs())
}

fn moe_cfg(rng: &mut ChaCha8Rng) -> MoeConfig {
    let e = rng.gen_range(2..9);
    MoeConfig {
        n_experts: e,
        n_shared: 1,
        top_k: rng.gen_range(1..=e),
        capacity_factor: 1.5,
        d_ff: rng.gen_range(2..12),
        drop_policy: DropPolicy::NoDrop,
    }
}

fn moe_dense_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = moe_cfg(rng);
    let d = rng.gen_range(2..10);
    let p = MoeParams::init(&c, d, 1e-5, rng)?;
    let x = rand_t(&[rng.gen_range(1..10), d], Precision::F32, rng)?;
    Ok(max_abs_diff(moe_forward(&c, &p, &x)?.data(), &oracle::moe_dense(&c, &p, &x)))
}

fn moe_identical_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = moe_cfg(rng);
    let d = rng.gen_range(2..10);
    let mut p = MoeParams::init(&c, d, 1e-5, rng)?;
    let template = p.experts[0].clone();
    p.experts.iter_mut().for_each(|e| *e = template.clone());
    let x = rand_t(&[rng.gen_range(1..10), d], Precision::F32, rng)?;
    let want = p.shared[0].forward(&x)?.add(&template.forward(&x)?)?;
    moe_forward(&c, &p, &x)?.max_abs_diff(&want)
}

fn capacity_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut wrong = 0;
    for _ in 0..200 {
        let e = rng.gen_range(1..65);
        let k = rng.gen_range(1..=e);
        let t = rng.gen_range(0..5000);
        let c = MoeConfig { n_experts: e, top_k: k, ..moe_cfg(rng) };
        // γ = 3/2 in integers
        let want = (3 * t * k).div_ceil(2 * e).max(1);
        wrong += usize::from(expert_capacity(t, &c) != want);
    }
    Ok(wrong as f64)
}

fn small_model_cfg(rng: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig { seed: rng.gen(), ..ModelConfig::tiny() }
}

fn model_decode_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let model = build_model(&small_model_cfg(rng))?;
    let toks: Vec<u32> = (0..16).map(|_| rng.gen_range(0..259)).collect();
    let (full, _) = model.prefill(&toks)?;
    let mut session = model.new_session();
    let mut dev: f64 = 0.0;
    for (i, &t) in toks.iter().enumerate() {
        let l = model.decode_step(&mut session, t)?;
        dev = dev.max(max_abs_diff(l.data(), full.row(i)));
    }
    Ok(dev)
}

fn greedy_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let model = build_model(&small_model_cfg(rng))?;
    let mut seq: Vec<u32> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(0..256)).collect();
    let fast = model.generate(&seq, 6, Sampling::Greedy)?;
    let mut wrong = 0;
    for &tok in &fast {
        let (logits, _) = model.prefill(&seq)?;
        wrong += usize::from(argmax(logits.row(seq.len() - 1)) as u32 != tok);
        seq.push(tok);
    }
    Ok(wrong as f64)
}

fn census_trial(_rng: &mut ChaCha8Rng) -> Result<f64> {
    let (_, census) = parse_block_pattern(&turbos_128_pattern())?;
    validate_production_shape(&census)?;
    Ok(0.0)
}

fn cp_case(rng: &mut ChaCha8Rng) -> Result<(SsdConfig, crate::cpsim::CpPlan, ScanInputs, SsmState)> {
    let cfg = random_ssd_cfg(rng, 16);
    let r = rng.gen_range(1..6);
    let t = rng.gen_range(r..120);
    let inputs = ScanInputs::random(&cfg, t, Precision::F32, rng);
    let h0 = if rng.gen_bool(0.5) { SsmState::random(&cfg, 1.0, rng) } else { SsmState::zeros(&cfg) };
    Ok((cfg, shard_sequence(t, r)?, inputs, h0))
}

fn cp_sequential_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (c, plan, inputs, h0) = cp_case(rng)?;
    Ok(compare_with_single_rank(Paradigm::Sequential, &c, &plan, &inputs, &h0)?.max_dev())
}

fn cp_parallel_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (c, plan, inputs, h0) = cp_case(rng)?;
    Ok(compare_with_single_rank(Paradigm::Parallel, &c, &plan, &inputs, &h0)?.max_dev())
}

fn cp_messages_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (c, plan, inputs, h0) = cp_case(rng)?;
    let r = plan.n_ranks();
    let seq = compare_with_single_rank(Paradigm::Sequential, &c, &plan, &inputs, &h0)?;
    let par = compare_with_single_rank(Paradigm::Parallel, &c, &plan, &inputs, &h0)?;
    let off = |have: usize, want: usize| have.abs_diff(want);
    let wrong = off(seq.trace.count(MessageKind::StateForward), r - 1)
        + off(seq.trace.collectives(), 0)
        + off(par.trace.count(MessageKind::AllGatherDecayChunk), 1)
        + off(par.trace.count(MessageKind::ReduceScatterStates), 1)
        + off(par.trace.point_to_point(), 0)
        + off(seq.depth, r)
        + off(par.depth, 3);
    Ok(wrong as f64)
}

fn cp_depth_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (c, plan, inputs, h0) = cp_case(rng)?;
    let mut wrong = 0;
    for p in [Paradigm::Sequential, Paradigm::Parallel] {
        let cmp = compare_with_single_rank(p, &c, &plan, &inputs, &h0)?;
        let want = oracle::longest_path_dfs(cmp.trace.tasks.len(), &cmp.trace.edges);
        wrong += trace_critical_path(&cmp.trace)?.abs_diff(want);
    }
    Ok(wrong as f64)
}

fn advantage_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let g = rng.gen_range(2..12);
    let r: Vec<f64> = (0..g).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let a = group_advantages(&r);
    let mean = r.iter().sum::<f64>() / g as f64;
    // a sign violation counts as a full unit of deviation
    let sign_errors = r.iter().zip(&a.values).filter(|(ri, ai)| **ri < mean && **ai >= 0.0).count();
    Ok(a.values.iter().sum::<f64>().abs() + sign_errors as f64)
}

fn random_batch(rng: &mut ChaCha8Rng) -> Vec<SampleGroup> {
    let n = rng.gen_range(1..6);
    (0..n).map(|i| SampleGroup::random(i, rng.gen_range(2..6), 12, rng)).collect()
}

fn loss_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let groups = random_batch(rng);
    let hyper = GrpoHyper { clip_eps: rng.gen_range(0.05..0.5), kl_beta: rng.gen_range(0.0..0.2), ..GrpoHyper::default() };
    let (loss, _) = grpo_token_loss(&groups, &hyper)?;
    Ok((loss - oracle::grpo_loss_direct(&groups, hyper.clip_eps, hyper.kl_beta)).abs())
}

fn k3_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut bad = 0;
    for _ in 0..500 {
        let p = rng.gen_range(-40.0..0.0);
        let q = rng.gen_range(-40.0..0.0);
        let k = k3_token(p, q, K3_CLIP);
        bad += usize::from(!(0.0..=10.0).contains(&k));
        bad += usize::from(k3_token(p, p, K3_CLIP) != 0.0);
    }
    bad += usize::from(k3_token(0.0, 20.0, K3_CLIP) != 10.0);
    Ok(bad as f64)
}

fn filter_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let groups = random_batch(rng);
    let kept = dynamic_filter(&groups);
    let recount: Vec<&SampleGroup> = groups
        .iter()
        .filter(|g| g.responses.iter().any(|r| r.reward != g.responses[0].reward))
        .collect();
    let same = kept.len() == recount.len() && kept.iter().zip(&recount).all(|(a, b)| a == *b);
    Ok(f64::from(u8::from(!same)))
}

fn bon_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let a: Vec<f64> = (0..rng.gen_range(1..30)).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let m = bon_mask(&a);
    Ok(a.iter().zip(&m).filter(|(v, b)| (**v > 0.0) != **b).count() as f64)
}
