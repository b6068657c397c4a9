//! Acceptance run: ten end-to-end criteria, one PASS/FAIL line each.
//! Built with `harness = false` so the report always reaches stdout.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use turbos_core::attention::{apply_rope, gqa_prefill, ntk_rope_base, AttnConfig, AttnParams, KvCache, RopeConfig};
use turbos_core::cpsim::{compare_with_single_rank, shard_sequence, MessageKind, Paradigm};
use turbos_core::flops::{attention_decode_flops, attention_prefill_flops, mamba_decode_flops, mamba_prefill_flops};
use turbos_core::model::{build_model, parse_block_pattern, turbos_128_pattern, validate_production_shape, LayerCensus, ModelConfig};
use turbos_core::moe::{expert_capacity, moe_forward, DropPolicy, MoeConfig, MoeParams};
use turbos_core::numerics::{max_abs_diff, Precision, Tensor};
use turbos_core::oracle;
use turbos_core::rlmath::{dynamic_filter, group_advantages, grpo_token_loss, k3_token, GrpoHyper, Reduction, Response, SampleGroup, K3_CLIP};
use turbos_core::ssd::{ssd_chunked_scan, ssd_naive_scan, ScanInputs, SsdConfig, SsmState};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn scan_cfg(chunk: usize) -> SsdConfig {
    SsdConfig {
        n_heads: 4,
        d_head: 4,
        d_state: 8,
        n_groups: 2,
        chunk_size: chunk,
        conv_width: 0,
    }
}

fn scan_equivalence() -> Outcome {
    let mut cases = 0;
    let (mut worst_y, mut worst_h, mut worst_rel): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for t in [31, 64, 256] {
        for chunk in [1, 7, 32, t] {
            for seed in 0..5u64 {
                let cfg = scan_cfg(chunk);
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + t as u64 * 10 + chunk as u64);
                let inputs = ScanInputs::random(&cfg, t, Precision::F32, &mut rng);
                let h0 = SsmState::random(&cfg, 0.5, &mut rng);
                let (y, h) = ssd_chunked_scan(&cfg, &inputs, &h0).map_err(err)?;
                let (y_ref, h_ref) = ssd_naive_scan(
                    &cfg,
                    &inputs.to_precision(Precision::F64),
                    &h0.to_precision(Precision::F64),
                )
                .map_err(err)?;
                let dy = y.max_abs_diff(&y_ref).map_err(err)?;
                let dh = h.max_abs_diff(&h_ref);
                worst_y = worst_y.max(dy);
                worst_h = worst_h.max(dh);
                worst_rel = worst_rel.max(dy / y_ref.max_abs().max(1e-12)).max(dh / h_ref.frobenius_norm().max(1e-12));
                cases += 1;
            }
        }
    }
    ensure(cases >= 50, || format!("only {cases} cases"))?;
    ensure(worst_y <= 1e-4 && worst_h <= 1e-4, || format!("max|dy|={worst_y:.3e} max|dh|={worst_h:.3e}"))?;
    ensure(worst_rel <= 1e-3, || format!("relative deviation {worst_rel:.3e}"))?;
    Ok(format!("{cases} cases, max|dy|={worst_y:.2e} max|dh|={worst_h:.2e} rel={worst_rel:.2e}"))
}

fn prefill_decode_consistency() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let model = build_model(&ModelConfig { seed, ..ModelConfig::tiny() }).map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let tokens: Vec<u32> = (0..32).map(|_| rng.gen_range(0..259)).collect();
        let (full, _) = model.prefill(&tokens).map_err(err)?;
        let mut session = model.new_session();
        for (i, &tok) in tokens.iter().enumerate() {
            let logits = model.decode_step(&mut session, tok).map_err(err)?;
            worst = worst.max(max_abs_diff(logits.data(), full.row(i)));
        }
    }
    ensure(worst <= 1e-4, || format!("max logit deviation {worst:.3e}"))?;
    Ok(format!("20 models x 32 positions, max|dlogit|={worst:.2e}"))
}

fn cp_tri_equivalence() -> Outcome {
    let mut depths = Vec::new();
    let mut worst: f64 = 0.0;
    for ranks in [2, 4] {
        let cfg = scan_cfg(32);
        let mut rng = ChaCha8Rng::seed_from_u64(ranks as u64);
        let inputs = ScanInputs::random(&cfg, 256, Precision::F32, &mut rng);
        let h0 = SsmState::random(&cfg, 1.0, &mut rng);
        let plan = shard_sequence(256, ranks).map_err(err)?;
        let seq = compare_with_single_rank(Paradigm::Sequential, &cfg, &plan, &inputs, &h0).map_err(err)?;
        let par = compare_with_single_rank(Paradigm::Parallel, &cfg, &plan, &inputs, &h0).map_err(err)?;
        worst = worst.max(seq.max_dev()).max(par.max_dev());
        ensure(seq.trace.count(MessageKind::StateForward) == ranks - 1 && seq.trace.collectives() == 0, || {
            format!("R={ranks}: sequential trace has {} messages", seq.trace.messages.len())
        })?;
        ensure(
            par.trace.count(MessageKind::AllGatherDecayChunk) == 1
                && par.trace.count(MessageKind::ReduceScatterStates) == 1
                && par.trace.point_to_point() == 0,
            || format!("R={ranks}: parallel trace {:?}", par.trace.messages),
        )?;
        depths.push(par.depth);
    }
    ensure(worst <= 1e-4, || format!("max deviation {worst:.3e}"))?;
    ensure(depths[0] == depths[1], || format!("parallel depth varies with R: {depths:?}"))?;
    Ok(format!("R in {{2,4}}, max dev={worst:.2e}, parallel depth={}", depths[0]))
}

fn gqa_degeneracy() -> Outcome {
    let mut worst: f64 = 0.0;
    for (seed, heads) in [(0u64, 1usize), (1, 2), (2, 4)] {
        let cfg = AttnConfig {
            n_q_heads: heads,
            n_kv_heads: heads,
            d_head: 8,
            rope: RopeConfig { base: 10_000.0, ntk_alpha: 1.0, d_head: 8 },
            use_qk_norm: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AttnParams::init(&cfg, 16, 1e-5, &mut rng).map_err(err)?;
        let x = Tensor::rand_uniform(&[12, 16], -1.0, 1.0, Precision::F32, &mut rng).map_err(err)?;
        let y = gqa_prefill(&cfg, &params, &x, &mut KvCache::new(&cfg)).map_err(err)?;
        worst = worst.max(max_abs_diff(y.data(), &oracle::mha_prefill(&cfg, &params, &x)));
    }
    ensure(worst <= 1e-5, || format!("GQA vs MHA {worst:.3e}"))?;
    let cfg = ModelConfig::tiny().attn_config();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = AttnParams::init(&cfg, 64, 1e-5, &mut rng).map_err(err)?;
    let mut cache = KvCache::new(&cfg);
    let x = Tensor::rand_uniform(&[10, 64], -1.0, 1.0, Precision::F32, &mut rng).map_err(err)?;
    gqa_prefill(&cfg, &params, &x, &mut cache).map_err(err)?;
    let per_token = 2 * cfg.n_kv_heads * cfg.d_head;
    ensure(cache.stored_floats() == 10 * per_token, || {
        format!("cache stores {} floats for 10 tokens", cache.stored_floats())
    })?;
    Ok(format!("max|dy|={worst:.2e}, cache {per_token} floats/token"))
}

fn ntk_anchor() -> Outcome {
    let d = 16;
    let vanilla = RopeConfig { base: 10_000.0, ntk_alpha: 1.0, d_head: d };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::rand_uniform(&[6, 2, d], -1.0, 1.0, Precision::F64, &mut rng).map_err(err)?;
    let positions = [0, 1, 7, 100, 4096, 200_000];
    let rotated = apply_rope(&x, &positions, &vanilla).map_err(err)?;
    // plain rotary embedding with the unscaled base
    let mut want = x.data().to_vec();
    for (t, &pos) in positions.iter().enumerate() {
        for h in 0..2 {
            let v = &mut want[(t * 2 + h) * d..(t * 2 + h + 1) * d];
            for i in 0..d / 2 {
                let theta = pos as f64 * 10_000f64.powf(-2.0 * i as f64 / d as f64);
                let (a, b) = (v[2 * i], v[2 * i + 1]);
                v[2 * i] = a * theta.cos() - b * theta.sin();
                v[2 * i + 1] = a * theta.sin() + b * theta.cos();
            }
        }
    }
    ensure(rotated.data() == want.as_slice(), || "alpha=1 is not bitwise vanilla RoPE".into())?;

    let mut bases = vec![10_000.0];
    for alpha in [50.0, 1000.0] {
        let got = ntk_rope_base(&RopeConfig { ntk_alpha: alpha, ..vanilla }).map_err(err)?;
        let formula = 10_000.0 * f64::powf(alpha, d as f64 / (d as f64 - 2.0));
        ensure(((got - formula) / formula).abs() <= 1e-6, || format!("alpha={alpha}: {got} vs {formula}"))?;
        bases.push(got);
    }
    ensure(bases.windows(2).all(|w| w[0] < w[1]), || format!("bases not increasing: {bases:?}"))?;

    let mut worst: f64 = 0.0;
    for alpha in [1.0, 50.0, 1000.0] {
        let y = apply_rope(&x, &positions, &RopeConfig { ntk_alpha: alpha, ..vanilla }).map_err(err)?;
        for (a, b) in x.data().chunks(d).zip(y.data().chunks(d)) {
            let n = |v: &[f64]| v.iter().map(|e| e * e).sum::<f64>().sqrt();
            worst = worst.max((n(a) - n(b)).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("norm drift {worst:.3e}"))?;
    Ok(format!("bases {:.4e} < {:.4e} < {:.4e}, norm drift {worst:.1e}", bases[0], bases[1], bases[2]))
}

fn moe_arithmetic() -> Outcome {
    let cfg = MoeConfig {
        n_experts: 8,
        n_shared: 1,
        top_k: 2,
        capacity_factor: 1.5,
        d_ff: 16,
        drop_policy: DropPolicy::NoDrop,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = MoeParams::init(&cfg, 12, 1e-5, &mut rng).map_err(err)?;
    let x = Tensor::rand_uniform(&[10, 12], -1.0, 1.0, Precision::F32, &mut rng).map_err(err)?;
    let dense = max_abs_diff(moe_forward(&cfg, &params, &x).map_err(err)?.data(), &oracle::moe_dense(&cfg, &params, &x));
    ensure(dense <= 1e-5, || format!("dense oracle {dense:.3e}"))?;

    let template = params.experts[3].clone();
    params.experts.iter_mut().for_each(|e| *e = template.clone());
    let want = params.shared[0]
        .forward(&x)
        .and_then(|s| s.add(&template.forward(&x)?))
        .map_err(err)?;
    let ident = moe_forward(&cfg, &params, &x).map_err(err)?.max_abs_diff(&want).map_err(err)?;
    ensure(ident <= 1e-6, || format!("identical experts {ident:.3e}"))?;

    let mut grid = 0;
    for e in 1..=40usize {
        for k in 1..=e.min(8) {
            for t in (0..2000).step_by(37) {
                let c = MoeConfig { n_experts: e, top_k: k, ..cfg };
                let want = (3 * t * k).div_ceil(2 * e).max(1);
                ensure(expert_capacity(t, &c) == want, || format!("capacity T={t} k={k} E={e}"))?;
                grid += 1;
            }
        }
    }
    Ok(format!("dense {dense:.1e}, identical {ident:.1e}, {grid} capacity cells exact"))
}

fn production_census() -> Outcome {
    let (kinds, census) = parse_block_pattern(&turbos_128_pattern()).map_err(err)?;
    validate_production_shape(&census).map_err(err)?;
    let (a, m, f) = census.percentages();
    for bad in [
        LayerCensus { attention: 7, mamba: 57, ffn: 57 },
        LayerCensus { attention: 8, mamba: 56, ffn: 64 },
    ] {
        ensure(validate_production_shape(&bad).is_err(), || format!("validator accepted {bad:?}"))?;
    }
    Ok(format!("{} layers, A/M/F = {}/{}/{} = {a:.2}%/{m:.2}%/{f:.2}%", kinds.len(), census.attention, census.mamba, census.ffn))
}

fn response(reward: f64, policy: &[f64], old: &[f64], reference: &[f64]) -> Response {
    Response {
        reward,
        logp_policy: policy.to_vec(),
        logp_old: old.to_vec(),
        logp_ref: reference.to_vec(),
        mask: vec![],
    }
}

fn grpo_math() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let g = rng.gen_range(2..16);
        let r: Vec<f64> = (0..g).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let a = group_advantages(&r);
        let mean = r.iter().sum::<f64>() / g as f64;
        ensure(a.values.iter().sum::<f64>().abs() <= 1e-6, || "advantages do not sum to 0".into())?;
        ensure(
            r.iter().zip(&a.values).all(|(ri, ai)| (*ri < mean) == (*ai < 0.0)),
            || "sign law violated".into(),
        )?;
    }
    ensure(k3_token(-0.7, -0.7, K3_CLIP) == 0.0, || "k3 nonzero at equality".into())?;
    ensure(k3_token(0.0, 20.0, K3_CLIP) == 10.0, || "k3 not clipped at 10".into())?;
    for _ in 0..1000 {
        let k = k3_token(rng.gen_range(-30.0..0.0), rng.gen_range(-30.0..0.0), K3_CLIP);
        ensure((0.0..=10.0).contains(&k), || format!("k3 out of range: {k}"))?;
    }

    let flat = SampleGroup {
        prompt_id: "flat".into(),
        responses: vec![response(1.0, &[-1.0], &[-1.0], &[-1.0]), response(1.0, &[-2.0], &[-2.0], &[-2.0])],
    };
    let unequal = SampleGroup {
        prompt_id: "unequal".into(),
        responses: vec![
            response(1.0, &[-0.4, -0.9, -1.1, -0.2, -0.8, -1.6, -0.3], &[-0.6, -0.9, -1.0, -0.4, -0.8, -1.5, -0.3], &[-0.5; 7]),
            response(0.0, &[-2.1, -0.7], &[-1.8, -0.7], &[-1.0, -1.0]),
            response(0.5, &[-0.9, -1.2, -0.1], &[-0.9, -1.0, -0.3], &[-0.9, -1.2, -0.1]),
        ],
    };
    let kept = dynamic_filter(&[flat, unequal.clone()]);
    ensure(kept == vec![unequal.clone()], || "zero-variance group not dropped".into())?;

    let hyper = GrpoHyper { clip_eps: 0.2, kl_beta: 0.1, ..GrpoHyper::default() };
    let (loss, _) = grpo_token_loss(&kept, &hyper).map_err(err)?;
    let direct = oracle::grpo_loss_direct(&kept, 0.2, 0.1);
    ensure((loss - direct).abs() <= 1e-6, || format!("token loss {loss} vs direct {direct}"))?;
    let (seq_loss, _) = grpo_token_loss(&kept, &GrpoHyper { reduction: Reduction::SequenceMean, ..hyper }).map_err(err)?;
    ensure((seq_loss - loss).abs() > 1e-6, || "token and sequence reductions coincide".into())?;
    Ok(format!("token loss {loss:.6} = direct {direct:.6} (sequence-mean {seq_loss:.6})"))
}

fn precision_motivation() -> Outcome {
    let cfg = SsdConfig {
        n_heads: 2,
        d_head: 2,
        d_state: 4,
        n_groups: 1,
        chunk_size: 64,
        conv_width: 0,
    };
    let mut f32_wins = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = ScanInputs::random(&cfg, 4096, Precision::F32, &mut rng);
        let f64_inputs = inputs.to_precision(Precision::F64);
        let run = |p: Precision| {
            ssd_naive_scan(&cfg, &inputs, &SsmState::zeros_with_precision(&cfg, p)).map(|(_, h)| h)
        };
        let (_, h_ref) = ssd_naive_scan(&cfg, &f64_inputs, &SsmState::zeros_with_precision(&cfg, Precision::F64)).map_err(err)?;
        let e32 = run(Precision::F32).map_err(err)?.max_abs_diff(&h_ref);
        let e16 = run(Precision::Bf16Emu).map_err(err)?.max_abs_diff(&h_ref);
        f32_wins += usize::from(e32 < e16);
    }
    ensure(f32_wins >= 95, || format!("f32 state better in only {f32_wins}/100 trials"))?;
    Ok(format!("f32 state beats bf16 state in {f32_wins}/100 trials at T=4096"))
}

fn complexity_contrast() -> Outcome {
    let cfg = ModelConfig::tiny();
    let (m1, m2) = (mamba_prefill_flops(&cfg, 4096), mamba_prefill_flops(&cfg, 8192));
    let (a1, a2) = (attention_prefill_flops(&cfg, 4096), attention_prefill_flops(&cfg, 8192));
    ensure(m2 == 2 * m1, || format!("mamba ratio {}", m2 as f64 / m1 as f64))?;
    let ratio = a2 as f64 / a1 as f64;
    ensure(ratio >= 3.5, || format!("attention ratio {ratio}"))?;
    let decode: Vec<u128> = [1, 4096, 65_536].iter().map(|&l| mamba_decode_flops(&cfg, l)).collect();
    ensure(decode.iter().all(|&v| v == decode[0]), || format!("mamba decode varies: {decode:?}"))?;
    ensure(
        attention_decode_flops(&cfg, 8192) > attention_decode_flops(&cfg, 4096),
        || "attention decode does not grow".into(),
    )?;
    Ok(format!("mamba x{:.1}, attention x{ratio:.3}, mamba decode {} flops/token", m2 as f64 / m1 as f64, decode[0]))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("scan-equivalence", Duration::from_secs(60), scan_equivalence),
        ("prefill-decode-consistency", Duration::from_secs(120), prefill_decode_consistency),
        ("cp-tri-equivalence", Duration::from_secs(60), cp_tri_equivalence),
        ("gqa-degeneracy", Duration::from_secs(60), gqa_degeneracy),
        ("ntk-anchor", Duration::from_secs(60), ntk_anchor),
        ("moe-arithmetic", Duration::from_secs(60), moe_arithmetic),
        ("production-census", Duration::from_secs(60), production_census),
        ("grpo-math", Duration::from_secs(60), grpo_math),
        ("precision-motivation", Duration::from_secs(120), precision_motivation),
        ("complexity-contrast", Duration::from_secs(60), complexity_contrast),
    ];
    let mut failures = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if elapsed > *budget => Err(format!("{msg}; took {elapsed:.1?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(msg) => println!("ACCEPTANCE {:>2} {name:<28} PASS {:>8.2?}  {msg}", i + 1, elapsed),
            Err(msg) => {
                failures += 1;
                println!("ACCEPTANCE {:>2} {name:<28} FAIL {:>8.2?}  {msg}", i + 1, elapsed);
            }
        }
    }
    println!("ACCEPTANCE {}/{} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
