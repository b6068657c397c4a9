//! Context parallelism for the Mamba2 scan, simulated over in-process ranks.
//!
//! Two state-passing schemes are provided. In the sequential one each rank
//! scans its shard from the state handed over by its predecessor. In the
//! parallel one every rank scans from zero, the per-shard decays are
//! all-gathered, each rank expands the inter-shard recurrence only for the
//! boundary state it owns, and a reduce-scatter sums the pieces into every
//! rank's incoming state. Communication is recorded in a [`CpTrace`].

use std::collections::VecDeque;
use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::ssd::{ssd_chunked_scan, state_readout, ScanInputs, SsdConfig, SsmState};

/// Contiguous, ordered shards covering `[0, T)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CpPlan {
    pub shards: Vec<Range<usize>>,
}

impl CpPlan {
    pub fn n_ranks(&self) -> usize {
        self.shards.len()
    }

    pub fn seq_len(&self) -> usize {
        self.shards.last().map_or(0, |s| s.end)
    }

    fn check_covers(&self, t: usize) -> Result<()> {
        let mut next = 0;
        for s in &self.shards {
            if s.start != next || s.end <= s.start {
                return Err(Error::Plan(format!("shard {s:?} breaks contiguity at {next}")));
            }
            next = s.end;
        }
        if self.shards.is_empty() || next != t {
            return Err(Error::Plan(format!("plan covers [0, {next}) but sequence has {t} positions")));
        }
        Ok(())
    }
}

/// Near-equal split; the first `T mod R` shards take one extra position.
pub fn shard_sequence(t: usize, ranks: usize) -> Result<CpPlan> {
    if ranks == 0 {
        return Err(Error::Plan("need at least one rank".into()));
    }
    if t < ranks {
        return Err(Error::Plan(format!("sequence of {t} cannot fill {ranks} ranks")));
    }
    let (base, extra) = (t / ranks, t % ranks);
    let mut start = 0;
    let shards = (0..ranks)
        .map(|r| {
            let len = base + usize::from(r < extra);
            let s = start..start + len;
            start += len;
            s
        })
        .collect();
    Ok(CpPlan { shards })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    StateForward,
    AllGatherDecayChunk,
    ReduceScatterStates,
}

impl MessageKind {
    pub fn is_collective(self) -> bool {
        !matches!(self, MessageKind::StateForward)
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MessageKind::StateForward => "StateForward",
            MessageKind::AllGatherDecayChunk => "AllGatherDecayChunk",
            MessageKind::ReduceScatterStates => "ReduceScatterStates",
        })
    }
}

/// Message endpoint: a single rank or the whole CP group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Peer {
    Rank(usize),
    Group,
}

impl fmt::Display for Peer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Peer::Rank(r) => write!(f, "{r}"),
            Peer::Group => f.write_str("all"),
        }
    }
}

/// A recorded transfer. Only the payload shape is kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CpMessage {
    pub kind: MessageKind,
    pub src: Peer,
    pub dst: Peer,
    pub payload: Vec<usize>,
}

/// One compute stage on one rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CpTask {
    pub rank: usize,
    pub label: &'static str,
}

/// Message log plus the task dependency graph. `edges` are `(from, to)`
/// indices into `tasks`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CpTrace {
    pub messages: Vec<CpMessage>,
    pub tasks: Vec<CpTask>,
    pub edges: Vec<(usize, usize)>,
}

impl CpTrace {
    fn task(&mut self, rank: usize, label: &'static str) -> usize {
        self.tasks.push(CpTask { rank, label });
        self.tasks.len() - 1
    }

    pub fn count(&self, kind: MessageKind) -> usize {
        self.messages.iter().filter(|m| m.kind == kind).count()
    }

    pub fn point_to_point(&self) -> usize {
        self.messages.iter().filter(|m| !m.kind.is_collective()).count()
    }

    pub fn collectives(&self) -> usize {
        self.messages.iter().filter(|m| m.kind.is_collective()).count()
    }

    /// Line-delimited `kind src dst payload_shape` records.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            let shape: Vec<String> = m.payload.iter().map(|d| d.to_string()).collect();
            out.push_str(&format!("{} {} {} {}\n", m.kind, m.src, m.dst, shape.join("x")));
        }
        out
    }
}

/// Number of tasks on the longest dependency chain (Kahn order).
pub fn trace_critical_path(trace: &CpTrace) -> Result<usize> {
    let n = trace.tasks.len();
    let mut indeg = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for &(a, b) in &trace.edges {
        if a >= n || b >= n {
            return Err(Error::Trace(format!("edge ({a}, {b}) references a missing task")));
        }
        succ[a].push(b);
        indeg[b] += 1;
    }
    let mut depth = vec![1usize; n];
    let mut queue: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut seen = 0;
    while let Some(u) = queue.pop_front() {
        seen += 1;
        for &v in &succ[u] {
            depth[v] = depth[v].max(depth[u] + 1);
            indeg[v] -= 1;
            if indeg[v] == 0 {
                queue.push_back(v);
            }
        }
    }
    if seen != n {
        return Err(Error::Trace("dependency graph has a cycle".into()));
    }
    Ok(depth.into_iter().max().unwrap_or(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Paradigm {
    Sequential,
    Parallel,
}

impl Paradigm {
    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Sequential => "sequential",
            Paradigm::Parallel => "parallel",
        }
    }
}

fn state_shape(cfg: &SsdConfig) -> Vec<usize> {
    vec![cfg.n_heads, cfg.d_head, cfg.d_state]
}

fn check_inputs(cfg: &SsdConfig, plan: &CpPlan, inputs: &ScanInputs) -> Result<()> {
    cfg.validate()?;
    inputs.validate(cfg)?;
    plan.check_covers(inputs.seq_len())
}

/// Rank `r` scans its shard from the state received from rank `r − 1` and
/// forwards its final state to rank `r + 1`.
pub fn cp_sequential_scan(
    cfg: &SsdConfig,
    plan: &CpPlan,
    inputs: &ScanInputs,
    h0: &SsmState,
) -> Result<(Tensor, SsmState, CpTrace)> {
    check_inputs(cfg, plan, inputs)?;
    let mut trace = CpTrace::default();
    let mut outputs = Vec::with_capacity(plan.n_ranks());
    let mut state = h0.clone();
    let mut prev_task = None;
    for (r, shard) in plan.shards.iter().enumerate() {
        let task = trace.task(r, "scan");
        if let Some(p) = prev_task {
            trace.edges.push((p, task));
        }
        let (y, next) = ssd_chunked_scan(cfg, &inputs.slice(shard.start, shard.end)?, &state)?;
        outputs.push(y);
        state = next;
        if r + 1 < plan.n_ranks() {
            trace.messages.push(CpMessage {
                kind: MessageKind::StateForward,
                src: Peer::Rank(r),
                dst: Peer::Rank(r + 1),
                payload: state_shape(cfg),
            });
        }
        prev_task = Some(task);
    }
    Ok((Tensor::concat_outer(&outputs)?, state, trace))
}

/// Per-rank partial sums of `S_in(r) = Σ_{j<r} (Π_{j<k<r} D_k)·s_j + (Π_{k<r} D_k)·h0`
/// restricted to the terms whose `s` index is `owner`. Slot `r` holds the
/// contribution destined for rank `r`; slot `R` is the final state.
fn owned_terms(
    owner: usize,
    decays: &[Vec<f64>],
    local_state: &SsmState,
    h0: &SsmState,
    zero: &SsmState,
) -> Vec<SsmState> {
    let ranks = decays.len();
    let mut slots = vec![zero.clone(); ranks + 1];
    // s_owner first reaches rank owner + 1 undecayed, then each later shard decays it
    let mut carried = local_state.clone();
    for (dst, slot) in slots.iter_mut().enumerate().skip(owner + 1) {
        *slot = carried.clone();
        if dst < ranks {
            carried = carried.decayed(&decays[dst]);
        }
    }
    if owner == 0 {
        let mut carried = h0.clone();
        for (dst, slot) in slots.iter_mut().enumerate() {
            *slot = slot.add(&carried);
            if dst < ranks {
                carried = carried.decayed(&decays[dst]);
            }
        }
    }
    slots
}

/// All-gather / local expansion / reduce-scatter state passing. Every rank's
/// boundary state stays local; only `decay_chunk` crosses ranks before the
/// reduce-scatter.
pub fn cp_parallel_scan(
    cfg: &SsdConfig,
    plan: &CpPlan,
    inputs: &ScanInputs,
    h0: &SsmState,
) -> Result<(Tensor, SsmState, CpTrace)> {
    check_inputs(cfg, plan, inputs)?;
    let ranks = plan.n_ranks();
    let mut trace = CpTrace::default();
    let zero = SsmState::zeros_with_precision(cfg, h0.precision());

    // stage 1: zero-state local scans
    let mut shard_inputs = Vec::with_capacity(ranks);
    let mut local_y = Vec::with_capacity(ranks);
    let mut local_s = Vec::with_capacity(ranks);
    let mut decays = Vec::with_capacity(ranks);
    let mut local_tasks = Vec::with_capacity(ranks);
    for (r, shard) in plan.shards.iter().enumerate() {
        local_tasks.push(trace.task(r, "local-scan"));
        let part = inputs.slice(shard.start, shard.end)?;
        let (y, s) = ssd_chunked_scan(cfg, &part, &zero)?;
        decays.push(part.total_decay());
        shard_inputs.push(part);
        local_y.push(y);
        local_s.push(s);
    }
    trace.messages.push(CpMessage {
        kind: MessageKind::AllGatherDecayChunk,
        src: Peer::Group,
        dst: Peer::Group,
        payload: vec![ranks, cfg.n_heads],
    });

    // stage 2: each rank expands the recurrence for its own boundary state
    let mut combine_tasks = Vec::with_capacity(ranks);
    let mut partials = Vec::with_capacity(ranks);
    for (r, s) in local_s.iter().enumerate() {
        let task = trace.task(r, "combine");
        trace.edges.extend(local_tasks.iter().map(|&l| (l, task)));
        combine_tasks.push(task);
        partials.push(owned_terms(r, &decays, s, h0, &zero));
    }
    trace.messages.push(CpMessage {
        kind: MessageKind::ReduceScatterStates,
        src: Peer::Group,
        dst: Peer::Group,
        payload: vec![ranks, cfg.n_heads, cfg.d_head, cfg.d_state],
    });

    // reduce-scatter: slot r summed over owners lands on rank r
    let reduce = |slot: usize| {
        partials
            .iter()
            .skip(1)
            .fold(partials[0][slot].clone(), |acc, p| acc.add(&p[slot]))
    };

    // stage 3: finish outputs with the incoming-state read-out
    let mut outputs = Vec::with_capacity(ranks);
    for r in 0..ranks {
        let task = trace.task(r, "finish");
        trace.edges.extend(combine_tasks.iter().map(|&c| (c, task)));
        let incoming = reduce(r);
        let corr = state_readout(cfg, &shard_inputs[r], &incoming)?;
        outputs.push(local_y[r].add(&corr)?);
    }
    let h_t = reduce(ranks);
    Ok((Tensor::concat_outer(&outputs)?, h_t, trace))
}

pub fn cp_scan(
    paradigm: Paradigm,
    cfg: &SsdConfig,
    plan: &CpPlan,
    inputs: &ScanInputs,
    h0: &SsmState,
) -> Result<(Tensor, SsmState, CpTrace)> {
    match paradigm {
        Paradigm::Sequential => cp_sequential_scan(cfg, plan, inputs, h0),
        Paradigm::Parallel => cp_parallel_scan(cfg, plan, inputs, h0),
    }
}

/// Deviations of one paradigm from the single-rank chunked scan.
#[derive(Debug, Clone, PartialEq)]
pub struct CpComparison {
    pub paradigm: Paradigm,
    pub max_dev_y: f64,
    pub max_dev_state: f64,
    pub trace: CpTrace,
    pub depth: usize,
}

impl CpComparison {
    pub fn max_dev(&self) -> f64 {
        self.max_dev_y.max(self.max_dev_state)
    }
}

pub fn compare_with_single_rank(
    paradigm: Paradigm,
    cfg: &SsdConfig,
    plan: &CpPlan,
    inputs: &ScanInputs,
    h0: &SsmState,
) -> Result<CpComparison> {
    let (y_ref, h_ref) = ssd_chunked_scan(cfg, inputs, h0)?;
    let (y, h, trace) = cp_scan(paradigm, cfg, plan, inputs, h0)?;
    let depth = trace_critical_path(&trace)?;
    Ok(CpComparison {
        paradigm,
        max_dev_y: y.max_abs_diff(&y_ref)?,
        max_dev_state: h.max_abs_diff(&h_ref),
        trace,
        depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Precision;
    use crate::oracle::longest_path_dfs;
    use crate::ssd::ssd_naive_scan;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(chunk: usize) -> SsdConfig {
        SsdConfig {
            n_heads: 4,
            d_head: 4,
            d_state: 8,
            n_groups: 2,
            chunk_size: chunk,
            conv_width: 0,
        }
    }

    fn setup(t: usize, chunk: usize, seed: u64, nonzero_h0: bool) -> (SsdConfig, ScanInputs, SsmState) {
        let c = cfg(chunk);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = ScanInputs::random(&c, t, Precision::F32, &mut rng);
        let h0 = if nonzero_h0 {
            SsmState::random(&c, 1.0, &mut rng)
        } else {
            SsmState::zeros(&c)
        };
        (c, inputs, h0)
    }

    #[test]
    fn shard_examples() {
        assert_eq!(shard_sequence(8, 2).unwrap().shards, vec![0..4, 4..8]);
        let p = shard_sequence(7, 2).unwrap();
        assert_eq!(p.shards.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![4, 3]);
        let p = shard_sequence(256, 4).unwrap();
        assert!(p.shards.iter().all(|s| s.len() == 64));
        assert!(matches!(shard_sequence(3, 4), Err(Error::Plan(_))));
        assert!(matches!(shard_sequence(3, 0), Err(Error::Plan(_))));
    }

    #[test]
    fn shard_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let r = rng.gen_range(1..9);
            let t = rng.gen_range(r..300);
            let p = shard_sequence(t, r).unwrap();
            let sizes: Vec<usize> = p.shards.iter().map(|s| s.len()).collect();
            assert_eq!(sizes.iter().sum::<usize>(), t);
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            assert!(hi - lo <= 1);
            p.check_covers(t).unwrap();
        }
    }

    #[test]
    fn single_rank_degenerates() {
        let (c, inputs, h0) = setup(40, 7, 1, true);
        let plan = shard_sequence(40, 1).unwrap();
        let (y_ref, h_ref) = ssd_chunked_scan(&c, &inputs, &h0).unwrap();
        let (y, h, trace) = cp_sequential_scan(&c, &plan, &inputs, &h0).unwrap();
        assert_eq!((y, h), (y_ref.clone(), h_ref.clone()));
        assert!(trace.messages.is_empty());
        let (y, h, trace) = cp_parallel_scan(&c, &plan, &inputs, &h0).unwrap();
        assert!(y.max_abs_diff(&y_ref).unwrap() <= 1e-5 && h.max_abs_diff(&h_ref) <= 1e-5);
        assert_eq!(trace.collectives(), 2);
    }

    #[test]
    fn sequential_chain_structure() {
        let (c, inputs, h0) = setup(64, 8, 2, false);
        let plan = shard_sequence(64, 4).unwrap();
        let (_, _, trace) = cp_sequential_scan(&c, &plan, &inputs, &h0).unwrap();
        let pairs: Vec<(Peer, Peer)> = trace.messages.iter().map(|m| (m.src, m.dst)).collect();
        assert_eq!(
            pairs,
            vec![
                (Peer::Rank(0), Peer::Rank(1)),
                (Peer::Rank(1), Peer::Rank(2)),
                (Peer::Rank(2), Peer::Rank(3))
            ]
        );
        assert_eq!(trace.collectives(), 0);
        assert_eq!(trace_critical_path(&trace).unwrap(), 4);
    }

    #[test]
    fn both_paradigms_match_single_rank() {
        for (seed, &(t, r, chunk)) in [(8, 2, 4), (256, 2, 32), (256, 4, 32), (101, 3, 7), (50, 5, 64)]
            .iter()
            .enumerate()
        {
            for h0_nonzero in [false, true] {
                let (c, inputs, h0) = setup(t, chunk, seed as u64, h0_nonzero);
                let plan = shard_sequence(t, r).unwrap();
                for paradigm in [Paradigm::Sequential, Paradigm::Parallel] {
                    let cmp = compare_with_single_rank(paradigm, &c, &plan, &inputs, &h0).unwrap();
                    assert!(cmp.max_dev() <= 1e-4, "{paradigm:?} T={t} R={r}: {}", cmp.max_dev());
                }
                // and against the naive recurrence in f64
                let (y_naive, h_naive) = ssd_naive_scan(
                    &c,
                    &inputs.to_precision(Precision::F64),
                    &h0.to_precision(Precision::F64),
                )
                .unwrap();
                let (y, h, _) = cp_parallel_scan(&c, &plan, &inputs, &h0).unwrap();
                assert!(y.max_abs_diff(&y_naive).unwrap() <= 1e-4);
                assert!(h.max_abs_diff(&h_naive) <= 1e-4);
            }
        }
    }

    #[test]
    fn parallel_collectives_and_depth() {
        let mut depths = Vec::new();
        for r in [1, 2, 4, 8] {
            let (c, inputs, h0) = setup(64, 8, r as u64, true);
            let plan = shard_sequence(64, r).unwrap();
            let (_, _, trace) = cp_parallel_scan(&c, &plan, &inputs, &h0).unwrap();
            assert_eq!(trace.count(MessageKind::AllGatherDecayChunk), 1);
            assert_eq!(trace.count(MessageKind::ReduceScatterStates), 1);
            assert_eq!(trace.point_to_point(), 0);
            depths.push(trace_critical_path(&trace).unwrap());
        }
        assert!(depths.iter().all(|&d| d == 3), "{depths:?}");
    }

    #[test]
    fn critical_path_matches_dfs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.gen_range(1..12);
            let tasks = (0..n).map(|i| CpTask { rank: i, label: "t" }).collect();
            // forward edges only, so the graph is acyclic
            let mut edges = Vec::new();
            for a in 0..n {
                for b in a + 1..n {
                    if rng.gen_bool(0.3) {
                        edges.push((a, b));
                    }
                }
            }
            let trace = CpTrace { messages: vec![], tasks, edges };
            assert_eq!(trace_critical_path(&trace).unwrap(), longest_path_dfs(n, &trace.edges));
        }
        for r in 1..6 {
            let (c, inputs, h0) = setup(30, 4, 0, false);
            let plan = shard_sequence(30, r).unwrap();
            for p in [Paradigm::Sequential, Paradigm::Parallel] {
                let (_, _, t) = cp_scan(p, &c, &plan, &inputs, &h0).unwrap();
                assert_eq!(trace_critical_path(&t).unwrap(), longest_path_dfs(t.tasks.len(), &t.edges));
            }
        }
    }

    #[test]
    fn cycles_are_rejected() {
        let trace = CpTrace {
            messages: vec![],
            tasks: vec![CpTask { rank: 0, label: "a" }, CpTask { rank: 1, label: "b" }],
            edges: vec![(0, 1), (1, 0)],
        };
        assert!(matches!(trace_critical_path(&trace), Err(Error::Trace(_))));
        let bad = CpTrace { edges: vec![(0, 5)], ..trace };
        assert!(matches!(trace_critical_path(&bad), Err(Error::Trace(_))));
    }

    #[test]
    fn export_format() {
        let (c, inputs, h0) = setup(16, 4, 0, false);
        let plan = shard_sequence(16, 2).unwrap();
        let (_, _, t) = cp_sequential_scan(&c, &plan, &inputs, &h0).unwrap();
        assert_eq!(t.export(), "StateForward 0 1 4x4x8\n");
        let (_, _, t) = cp_parallel_scan(&c, &plan, &inputs, &h0).unwrap();
        assert_eq!(
            t.export(),
            "AllGatherDecayChunk all all 2x4\nReduceScatterStates all all 2x4x4x8\n"
        );
    }

    #[test]
    fn plan_must_cover_inputs() {
        let (c, inputs, h0) = setup(16, 4, 0, false);
        let plan = shard_sequence(12, 2).unwrap();
        assert!(matches!(cp_parallel_scan(&c, &plan, &inputs, &h0), Err(Error::Plan(_))));
        assert!(matches!(cp_sequential_scan(&c, &plan, &inputs, &h0), Err(Error::Plan(_))));
    }
}
