use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use turbos_core::cpsim::{compare_with_single_rank, shard_sequence, CpTrace, MessageKind, Paradigm};
use turbos_core::flops::{flop_row, BenchMode};
use turbos_core::io::{load_config, load_weights, save_weights, ConfigError, WeightsError};
use turbos_core::model::{build_model, tokenizer, Model, ModelConfig, Sampling, MAX_CONTEXT};
use turbos_core::numerics::Precision;
use turbos_core::ssd::{ScanInputs, SsdConfig, SsmState};
use turbos_core::verify::{run_suite, Suite};

/// Largest model `bench` will instantiate for wall-clock timing.
const WALL_CLOCK_PARAM_LIMIT: u128 = 50_000_000;
const CP_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "turbos", version, about = "Hybrid Transformer/Mamba2/MoE reference engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate byte-level text from a prompt.
    Generate(GenerateArgs),
    /// Run oracle-equivalence and invariant checks.
    Verify(VerifyArgs),
    /// Print analytic FLOP counts and optional wall times.
    Bench(BenchArgs),
    /// Simulate context-parallel Mamba2 scans.
    Cpsim(CpsimArgs),
    /// Write seed-initialized weights for a config.
    Init(InitArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Config file, or a preset name (`tiny`, `turbos-128`).
    #[arg(long)]
    config: String,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    #[arg(long, conflicts_with = "temp")]
    greedy: bool,
    #[arg(long)]
    temp: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Numerics,
    Ssd,
    Attention,
    Moe,
    Model,
    Cpsim,
    Rlmath,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Numerics => Suite::Numerics,
            SuiteArg::Ssd => Suite::Ssd,
            SuiteArg::Attention => Suite::Attention,
            SuiteArg::Moe => Suite::Moe,
            SuiteArg::Model => Suite::Model,
            SuiteArg::Cpsim => Suite::Cpsim,
            SuiteArg::Rlmath => Suite::Rlmath,
            SuiteArg::All => Suite::All,
        }
    }
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum)]
    suite: SuiteArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    trials: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Prefill,
    Decode,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: String,
    #[arg(long, value_delimiter = ',', required = true)]
    seq_lens: Vec<usize>,
    #[arg(long, value_enum, default_value = "prefill")]
    mode: ModeArg,
    #[arg(long)]
    flops_only: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ParadigmArg {
    Sequential,
    Parallel,
    Both,
}

#[derive(Args)]
struct CpsimArgs {
    #[arg(long)]
    ranks: usize,
    #[arg(long)]
    seq_len: usize,
    #[arg(long, default_value_t = 32)]
    chunk: usize,
    #[arg(long, value_enum, default_value = "both")]
    paradigm: ParadigmArg,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    config: String,
    #[arg(long)]
    out: PathBuf,
}

/// Message plus process exit status.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new(2, e.to_string())
    }
}

impl From<WeightsError> for Failure {
    fn from(e: WeightsError) -> Self {
        let code = match e {
            WeightsError::BadMagic => 4,
            WeightsError::Truncated { .. } => 5,
            WeightsError::Model(_) => 2,
            _ => 3,
        };
        Failure::new(code, e.to_string())
    }
}

fn resolve_config(arg: &str) -> Result<ModelConfig, Failure> {
    let path = Path::new(arg);
    if !path.exists() {
        if let Some(cfg) = ModelConfig::preset(arg) {
            return Ok(cfg);
        }
    }
    Ok(load_config(path)?)
}

fn load_model(cfg: &ModelConfig, weights: Option<&Path>) -> Result<Model, Failure> {
    match weights {
        Some(p) => Ok(load_weights(p, cfg)?),
        None => build_model(cfg).map_err(|e| Failure::new(2, e.to_string())),
    }
}

fn generate(args: GenerateArgs) -> Result<(), Failure> {
    let cfg = resolve_config(&args.config)?;
    let model = load_model(&cfg, args.weights.as_deref())?;
    let sampling = match (args.greedy, args.temp) {
        (_, Some(tau)) => Sampling::Temperature { tau, seed: args.seed },
        _ => Sampling::Greedy,
    };
    let prompt = tokenizer::encode(&args.prompt);
    let out = model
        .generate(&prompt, args.max_new, sampling)
        .map_err(|e| Failure::new(1, e.to_string()))?;
    let ids: Vec<String> = out.iter().map(|t| t.to_string()).collect();
    println!("tokens: {}", ids.join(" "));
    println!("text: {}", tokenizer::decode(&out));
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<(), Failure> {
    let results = run_suite(args.suite.into(), args.seed, args.trials);
    for r in &results {
        println!("{r}");
    }
    let passed = results.iter().filter(|r| r.passed).count();
    println!("SUMMARY {passed}/{} passed", results.len());
    if passed == results.len() {
        Ok(())
    } else {
        Err(Failure::new(1, format!("{} check(s) failed", results.len() - passed)))
    }
}

fn bench(args: BenchArgs) -> Result<(), Failure> {
    let cfg = resolve_config(&args.config)?;
    let (_, census) = cfg.blocks().map_err(|e| Failure::new(2, e.to_string()))?;
    if let Some(&bad) = args.seq_lens.iter().find(|&&t| t == 0 || t > MAX_CONTEXT) {
        return Err(Failure::new(2, format!("sequence length {bad} outside 1..={MAX_CONTEXT}")));
    }
    let mode = match args.mode {
        ModeArg::Prefill => BenchMode::Prefill,
        ModeArg::Decode => BenchMode::Decode,
    };
    let model = if args.flops_only {
        None
    } else {
        let params = cfg.parameter_count().map_err(|e| Failure::new(2, e.to_string()))?;
        if params > WALL_CLOCK_PARAM_LIMIT {
            return Err(Failure::new(
                2,
                format!("model has {params} parameters; wall-clock timing is limited to {WALL_CLOCK_PARAM_LIMIT}, use --flops-only"),
            ));
        }
        Some(build_model(&cfg).map_err(|e| Failure::new(2, e.to_string()))?)
    };
    let mode_name = match mode {
        BenchMode::Prefill => "prefill",
        BenchMode::Decode => "decode",
    };
    println!(
        "mode={mode_name} layers=A{}/M{}/F{}",
        census.attention, census.mamba, census.ffn
    );
    let mut header = format!("{:>8} {:>20} {:>20} {:>20} {:>22}", "seq_len", "attention_layer", "mamba_layer", "ffn_layer", "model_total");
    if model.is_some() {
        header.push_str(&format!(" {:>12}", "wall_ms"));
    }
    println!("{header}");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for &t in &args.seq_lens {
        let row = flop_row(&cfg, &census, mode, t);
        let mut line = format!(
            "{:>8} {:>20} {:>20} {:>20} {:>22}",
            row.seq_len, row.attention, row.mamba, row.ffn, row.total
        );
        if let Some(m) = &model {
            let tokens: Vec<u32> = (0..t).map(|_| rng.gen_range(0..256)).collect();
            let fail = |e: turbos_core::Error| Failure::new(1, e.to_string());
            let ms = match mode {
                BenchMode::Prefill => {
                    let start = Instant::now();
                    m.prefill(&tokens).map_err(fail)?;
                    start.elapsed().as_secs_f64() * 1e3
                }
                BenchMode::Decode => {
                    let (_, mut session) = m.prefill(&tokens).map_err(fail)?;
                    let start = Instant::now();
                    m.decode_step(&mut session, tokenizer::BOS).map_err(fail)?;
                    start.elapsed().as_secs_f64() * 1e3
                }
            };
            line.push_str(&format!(" {ms:>12.3}"));
        }
        println!("{line}");
    }
    Ok(())
}

fn cpsim(args: CpsimArgs) -> Result<(), Failure> {
    let cfg = SsdConfig {
        n_heads: 4,
        d_head: 8,
        d_state: 16,
        n_groups: 2,
        chunk_size: args.chunk,
        conv_width: 0,
    };
    cfg.validate().map_err(|e| Failure::new(2, e.to_string()))?;
    let plan = shard_sequence(args.seq_len, args.ranks).map_err(|e| Failure::new(2, e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let inputs = ScanInputs::random(&cfg, args.seq_len, Precision::F32, &mut rng);
    let h0 = SsmState::random(&cfg, 1.0, &mut rng);
    let paradigms = match args.paradigm {
        ParadigmArg::Sequential => vec![Paradigm::Sequential],
        ParadigmArg::Parallel => vec![Paradigm::Parallel],
        ParadigmArg::Both => vec![Paradigm::Sequential, Paradigm::Parallel],
    };
    println!("cpsim ranks={} seq_len={} chunk={}", args.ranks, args.seq_len, args.chunk);
    let mut all_ok = true;
    let mut traces: Vec<CpTrace> = Vec::new();
    for p in paradigms {
        let cmp = compare_with_single_rank(p, &cfg, &plan, &inputs, &h0).map_err(|e| Failure::new(1, e.to_string()))?;
        let ok = cmp.max_dev() <= CP_TOLERANCE;
        all_ok &= ok;
        println!(
            "{} max_dev={:.3e} state_forward={} all_gather={} reduce_scatter={} depth={} {}",
            p.name(),
            cmp.max_dev(),
            cmp.trace.count(MessageKind::StateForward),
            cmp.trace.count(MessageKind::AllGatherDecayChunk),
            cmp.trace.count(MessageKind::ReduceScatterStates),
            cmp.depth,
            if ok { "pass" } else { "fail" }
        );
        traces.push(cmp.trace);
    }
    if let Some(path) = &args.trace {
        let text: String = traces.iter().map(CpTrace::export).collect();
        fs::write(path, text).map_err(|e| Failure::new(2, format!("cannot write trace {}: {e}", path.display())))?;
    }
    if all_ok {
        Ok(())
    } else {
        Err(Failure::new(1, "context-parallel scan deviates from the single-rank scan"))
    }
}

fn init(args: InitArgs) -> Result<(), Failure> {
    let cfg = resolve_config(&args.config)?;
    let model = build_model(&cfg).map_err(|e| Failure::new(2, e.to_string()))?;
    save_weights(&model, &args.out)?;
    println!("wrote {} tensors to {}", model.named_tensors().len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Verify(a) => verify(a),
        Command::Bench(a) => bench(a),
        Command::Cpsim(a) => cpsim(a),
        Command::Init(a) => init(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
