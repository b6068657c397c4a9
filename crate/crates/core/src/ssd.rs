//! The Mamba2 mixer: a step-by-step recurrence (the reference), a block-wise
//! chunked scan for prefill, and a single-token state update for decode.
//!
//! Per head `h` (reading B/C group `g`), with `α_t = exp(dt_t·A_h)`:
//!
//! ```text
//! H_t = α_t·H_{t−1} + (dt_t·x_t) ⊗ B_t
//! y_t = H_t·C_t + D_h·x_t
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{
    decay_table, gemm, linear, silu_scalar, softplus, Precision, RmsNorm, Tensor,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SsdConfig {
    pub n_heads: usize,
    pub d_head: usize,
    pub d_state: usize,
    /// Number of B/C groups; each group is shared by `n_heads / n_groups` heads.
    pub n_groups: usize,
    pub chunk_size: usize,
    /// Depthwise causal conv width over the x/B/C streams; 0 disables the conv.
    pub conv_width: usize,
}

impl SsdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_head == 0 {
            return Err(Error::config("n_heads", "heads and head width must be >= 1"));
        }
        if self.d_state == 0 {
            return Err(Error::config("d_state", "must be >= 1"));
        }
        if self.n_groups == 0 || !self.n_heads.is_multiple_of(self.n_groups) {
            return Err(Error::config(
                "ssm_groups",
                format!("{} heads do not split into {} groups", self.n_heads, self.n_groups),
            ));
        }
        if self.chunk_size == 0 {
            return Err(Error::config("chunk_size", "must be >= 1"));
        }
        Ok(())
    }

    pub fn d_inner(&self) -> usize {
        self.n_heads * self.d_head
    }

    /// Channels passing through the causal conv: x, then B, then C.
    pub fn conv_dim(&self) -> usize {
        self.d_inner() + 2 * self.n_groups * self.d_state
    }

    #[inline]
    pub fn group_of(&self, head: usize) -> usize {
        head / (self.n_heads / self.n_groups)
    }
}

/// Per-head `d_head × d_state` recurrent state.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmState {
    n_heads: usize,
    d_head: usize,
    d_state: usize,
    precision: Precision,
    data: Vec<f64>,
}

impl SsmState {
    /// Zero state in `f32`, the precision every inference path uses.
    pub fn zeros(cfg: &SsdConfig) -> Self {
        Self::zeros_with_precision(cfg, Precision::F32)
    }

    /// Zero state held at another precision; used by the reference
    /// recurrence (`F64`) and precision studies (`Bf16Emu`).
    pub fn zeros_with_precision(cfg: &SsdConfig, precision: Precision) -> Self {
        Self {
            n_heads: cfg.n_heads,
            d_head: cfg.d_head,
            d_state: cfg.d_state,
            precision,
            data: vec![0.0; cfg.n_heads * cfg.d_head * cfg.d_state],
        }
    }

    pub fn from_tensor(cfg: &SsdConfig, t: &Tensor) -> Result<Self> {
        let want = [cfg.n_heads, cfg.d_head, cfg.d_state];
        if t.shape() != want {
            return Err(Error::shape(format!(
                "state shape {:?} does not match {want:?}",
                t.shape()
            )));
        }
        Ok(Self {
            n_heads: cfg.n_heads,
            d_head: cfg.d_head,
            d_state: cfg.d_state,
            precision: t.precision(),
            data: t.data().to_vec(),
        })
    }

    pub fn random<R: Rng + ?Sized>(cfg: &SsdConfig, scale: f64, rng: &mut R) -> Self {
        let mut s = Self::zeros(cfg);
        for v in &mut s.data {
            *v = Precision::F32.round(rng.gen_range(-scale..scale));
        }
        s
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.n_heads, self.d_head, self.d_state],
            self.data.clone(),
            self.precision,
        )
        .expect("state shape is valid")
    }

    pub fn to_precision(&self, precision: Precision) -> Self {
        Self {
            precision,
            data: self.data.iter().map(|&v| precision.round(v)).collect(),
            ..self.clone()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn head(&self, h: usize) -> &[f64] {
        let n = self.d_head * self.d_state;
        &self.data[h * n..(h + 1) * n]
    }

    fn head_mut(&mut self, h: usize) -> &mut [f64] {
        let n = self.d_head * self.d_state;
        &mut self.data[h * n..(h + 1) * n]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.n_heads, self.d_head, self.d_state]
    }

    pub fn matches(&self, cfg: &SsdConfig) -> bool {
        self.shape() == [cfg.n_heads, cfg.d_head, cfg.d_state]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &SsmState) -> f64 {
        crate::numerics::max_abs_diff(&self.data, &other.data)
    }

    /// `self ← decay_h · self + other`, per head.
    pub fn decay_accumulate(&mut self, decay: &[f64], other: &SsmState) {
        let n = self.d_head * self.d_state;
        let p = self.precision;
        for (h, &dh) in decay.iter().enumerate() {
            for i in h * n..(h + 1) * n {
                self.data[i] = p.round(dh * self.data[i] + other.data[i]);
            }
        }
    }

    /// `self · decay_h`, per head.
    pub fn decayed(&self, decay: &[f64]) -> SsmState {
        let n = self.d_head * self.d_state;
        let mut out = self.clone();
        for (h, &dh) in decay.iter().enumerate() {
            for v in &mut out.data[h * n..(h + 1) * n] {
                *v = self.precision.round(dh * *v);
            }
        }
        out
    }

    pub fn add(&self, other: &SsmState) -> SsmState {
        let mut out = self.clone();
        for (v, o) in out.data.iter_mut().zip(&other.data) {
            *v = self.precision.round(*v + o);
        }
        out
    }
}

/// Discretized scan inputs for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanInputs {
    /// Per-head continuous decay rate `A_h ≤ 0`, shape `[H]`.
    pub a: Tensor,
    /// Step sizes, shape `[T, H]`, strictly positive.
    pub dt: Tensor,
    /// Shape `[T, H, d_head]`.
    pub x: Tensor,
    /// Shape `[T, G, d_state]`.
    pub b: Tensor,
    /// Shape `[T, G, d_state]`.
    pub c: Tensor,
    /// Per-head skip, shape `[H]`.
    pub d: Tensor,
}

impl ScanInputs {
    pub fn seq_len(&self) -> usize {
        self.x.dim(0)
    }

    pub fn precision(&self) -> Precision {
        self.x.precision()
    }

    /// Random inputs with decays in a range that keeps long memory but bounded state.
    pub fn random<R: Rng + ?Sized>(
        cfg: &SsdConfig,
        seq_len: usize,
        precision: Precision,
        rng: &mut R,
    ) -> Self {
        let (h, p, g, n) = (cfg.n_heads, cfg.d_head, cfg.n_groups, cfg.d_state);
        let mut u = |shape: &[usize], lo: f64, hi: f64| {
            Tensor::rand_uniform(shape, lo, hi, precision, rng).expect("non-empty shape")
        };
        Self {
            a: u(&[h], -1.5, -0.1),
            dt: u(&[seq_len, h], 0.01, 0.3),
            x: u(&[seq_len, h, p], -1.0, 1.0),
            b: u(&[seq_len, g, n], -1.0, 1.0),
            c: u(&[seq_len, g, n], -1.0, 1.0),
            d: u(&[h], -1.0, 1.0),
        }
    }

    pub fn to_precision(&self, precision: Precision) -> Self {
        Self {
            a: self.a.to_precision(precision),
            dt: self.dt.to_precision(precision),
            x: self.x.to_precision(precision),
            b: self.b.to_precision(precision),
            c: self.c.to_precision(precision),
            d: self.d.to_precision(precision),
        }
    }

    /// Positions `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        Ok(Self {
            a: self.a.clone(),
            dt: self.dt.slice_outer(start, end)?,
            x: self.x.slice_outer(start, end)?,
            b: self.b.slice_outer(start, end)?,
            c: self.c.slice_outer(start, end)?,
            d: self.d.clone(),
        })
    }

    pub fn validate(&self, cfg: &SsdConfig) -> Result<()> {
        let t = self.seq_len();
        let (h, p, g, n) = (cfg.n_heads, cfg.d_head, cfg.n_groups, cfg.d_state);
        let checks: [(&str, &Tensor, Vec<usize>); 6] = [
            ("a", &self.a, vec![h]),
            ("dt", &self.dt, vec![t, h]),
            ("x", &self.x, vec![t, h, p]),
            ("b", &self.b, vec![t, g, n]),
            ("c", &self.c, vec![t, g, n]),
            ("d", &self.d, vec![h]),
        ];
        for (name, tensor, want) in checks {
            if tensor.shape() != want.as_slice() {
                return Err(Error::shape(format!(
                    "scan input `{name}` has shape {:?}, expected {want:?}",
                    tensor.shape()
                )));
            }
        }
        if let Some(v) = self.dt.data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain(format!("dt must be positive, got {v}")));
        }
        if let Some(v) = self.a.data().iter().find(|v| !(**v <= 0.0)) {
            return Err(Error::Domain(format!("A must be <= 0, got {v}")));
        }
        Ok(())
    }

    /// Per-head product of all step decays over the sequence (`decay_chunk`).
    pub fn total_decay(&self) -> Vec<f64> {
        let (t, h) = (self.seq_len(), self.a.len());
        (0..h)
            .map(|hh| {
                let a = self.a.data()[hh];
                let log: f64 = (0..t).map(|tt| self.dt.data()[tt * h + hh] * a).sum();
                log.exp()
            })
            .collect()
    }
}

fn check_state(cfg: &SsdConfig, h0: &SsmState) -> Result<()> {
    if !h0.matches(cfg) {
        return Err(Error::shape(format!(
            "initial state {:?} does not match config ({}, {}, {})",
            h0.shape(),
            cfg.n_heads,
            cfg.d_head,
            cfg.d_state
        )));
    }
    Ok(())
}

/// Step-by-step recurrence. State writes round to `h0`'s precision and outputs
/// to the inputs' precision, so an all-`F64` call is the reference oracle.
pub fn ssd_naive_scan(
    cfg: &SsdConfig,
    inputs: &ScanInputs,
    h0: &SsmState,
) -> Result<(Tensor, SsmState)> {
    cfg.validate()?;
    inputs.validate(cfg)?;
    check_state(cfg, h0)?;
    let (t_len, nh, p, g, n) = (
        inputs.seq_len(),
        cfg.n_heads,
        cfg.d_head,
        cfg.n_groups,
        cfg.d_state,
    );
    let sp = h0.precision;
    let yp = inputs.precision();
    let (a, dt, x, b, c, d) = (
        inputs.a.data(),
        inputs.dt.data(),
        inputs.x.data(),
        inputs.b.data(),
        inputs.c.data(),
        inputs.d.data(),
    );
    let mut state = h0.clone();
    let mut y = vec![0.0; t_len * nh * p];
    for t in 0..t_len {
        for h in 0..nh {
            let grp = cfg.group_of(h);
            let step = dt[t * nh + h];
            let alpha = (step * a[h]).exp();
            let bt = &b[(t * g + grp) * n..(t * g + grp + 1) * n];
            let ct = &c[(t * g + grp) * n..(t * g + grp + 1) * n];
            let hs = state.head_mut(h);
            for pi in 0..p {
                let xv = x[(t * nh + h) * p + pi];
                let xdt = step * xv;
                let mut acc = 0.0;
                for ni in 0..n {
                    let cell = &mut hs[pi * n + ni];
                    *cell = sp.round(alpha * *cell + xdt * bt[ni]);
                    acc += *cell * ct[ni];
                }
                let out = acc + d[h] * xv;
                if !out.is_finite() {
                    return Err(Error::NonFinite {
                        step: t,
                        what: format!("output of head {h}"),
                    });
                }
                y[(t * nh + h) * p + pi] = yp.round(out);
            }
        }
    }
    let y = Tensor::new(&[t_len, nh, p], y, yp)?;
    Ok((y, state))
}

/// Block-wise chunked scan with identical contract to [`ssd_naive_scan`].
///
/// Within a chunk of length `L` the outputs are `(C·Bᵀ ⊙ Lmask)·(dt·x)` plus the
/// read-out of the carried state decayed to each position. Between chunks the
/// state advances by the chunk's total decay plus the chunk's own contribution.
/// The last chunk may be shorter than `chunk_size`.
pub fn ssd_chunked_scan(
    cfg: &SsdConfig,
    inputs: &ScanInputs,
    h0: &SsmState,
) -> Result<(Tensor, SsmState)> {
    cfg.validate()?;
    inputs.validate(cfg)?;
    check_state(cfg, h0)?;
    let t_len = inputs.seq_len();
    let (nh, p) = (cfg.n_heads, cfg.d_head);
    let prec = inputs.precision();
    let mut y = vec![0.0; t_len * nh * p];
    let mut state = h0.clone();

    let mut start = 0;
    while start < t_len {
        let end = (start + cfg.chunk_size).min(t_len);
        for h in 0..nh {
            let (y_chunk, new_head) = chunk_head(cfg, inputs, h, start, end, state.head(h), state.precision)?;
            let len = end - start;
            for i in 0..len {
                let dst = ((start + i) * nh + h) * p;
                y[dst..dst + p].copy_from_slice(&y_chunk[i * p..(i + 1) * p]);
            }
            state.head_mut(h).copy_from_slice(&new_head);
        }
        if let Some(bad) = y[start * nh * p..end * nh * p].iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: start + bad / (nh * p),
                what: "chunked scan output".into(),
            });
        }
        start = end;
    }
    Ok((Tensor::new(&[t_len, nh, p], y, prec)?, state))
}

/// One chunk `[start, end)` of one head. Returns the `L×P` outputs and the
/// `P×N` state after the chunk.
fn chunk_head(
    cfg: &SsdConfig,
    inputs: &ScanInputs,
    h: usize,
    start: usize,
    end: usize,
    carried: &[f64],
    state_precision: Precision,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (nh, p, g, n) = (cfg.n_heads, cfg.d_head, cfg.n_groups, cfg.d_state);
    let grp = cfg.group_of(h);
    let len = end - start;
    let prec = inputs.precision();
    let a = inputs.a.data()[h];
    let dt = inputs.dt.data();
    let x = inputs.x.data();

    let log_alpha: Vec<f64> = (start..end).map(|t| dt[t * nh + h] * a).collect();
    let lmask = decay_table(&log_alpha, Precision::F64)?;
    // decay from the chunk's incoming state to each position, inclusive
    let mut cum = 0.0;
    let from_start: Vec<f64> = log_alpha
        .iter()
        .map(|la| {
            cum += la;
            cum.exp()
        })
        .collect();
    let decay_chunk = from_start[len - 1];

    let gather = |src: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(len * n);
        for t in start..end {
            let off = (t * g + grp) * n;
            out.extend_from_slice(&src[off..off + n]);
        }
        out
    };
    let bc = gather(inputs.b.data());
    let cc = gather(inputs.c.data());
    let mut xdt = Vec::with_capacity(len * p);
    for t in start..end {
        let step = dt[t * nh + h];
        let off = (t * nh + h) * p;
        xdt.extend(x[off..off + p].iter().map(|v| prec.round(step * v)));
    }

    // intra-chunk: (C Bᵀ ⊙ L) · Xdt
    let bt = transpose(&bc, len, n);
    let mut scores = gemm(&cc, &bt, len, n, len, prec);
    for (s, l) in scores.iter_mut().zip(&lmask) {
        *s = prec.round(*s * l);
    }
    let y_intra = gemm(&scores, &xdt, len, len, p, prec);

    // carried state read-out: diag(decay) · C · Hᵀ
    let ht = transpose(carried, p, n);
    let y_state = gemm(&cc, &ht, len, n, p, prec);

    let d = inputs.d.data()[h];
    let mut y = vec![0.0; len * p];
    for i in 0..len {
        let off = ((start + i) * nh + h) * p;
        for pi in 0..p {
            let v = y_intra[i * p + pi] + from_start[i] * y_state[i * p + pi] + d * x[off + pi];
            y[i * p + pi] = prec.round(v);
        }
    }

    // next state: decay_chunk · H + (Xdt ⊙ w)ᵀ · B,  w_j = L[last][j]
    let last = &lmask[(len - 1) * len..len * len];
    let mut xw_t = vec![0.0; p * len];
    for j in 0..len {
        for pi in 0..p {
            xw_t[pi * len + j] = xdt[j * p + pi] * last[j];
        }
    }
    let contrib = gemm(&xw_t, &bc, p, len, n, Precision::F64);
    let new_state = carried
        .iter()
        .zip(&contrib)
        .map(|(hv, cv)| state_precision.round(decay_chunk * hv + cv))
        .collect();
    Ok((y, new_state))
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = m[r * cols + c];
        }
    }
    out
}

/// Contribution of an incoming state to every output position of `inputs`:
/// `y_corr_t = (Π_{k≤t} α_k) · H_in · C_t`. Together with a zero-state scan this
/// reconstructs the full scan, since outputs are linear in the initial state.
pub fn state_readout(cfg: &SsdConfig, inputs: &ScanInputs, h_in: &SsmState) -> Result<Tensor> {
    inputs.validate(cfg)?;
    check_state(cfg, h_in)?;
    let (t_len, nh, p, g, n) = (
        inputs.seq_len(),
        cfg.n_heads,
        cfg.d_head,
        cfg.n_groups,
        cfg.d_state,
    );
    let prec = inputs.precision();
    let (a, dt, c) = (inputs.a.data(), inputs.dt.data(), inputs.c.data());
    let mut y = vec![0.0; t_len * nh * p];
    for h in 0..nh {
        let grp = cfg.group_of(h);
        let hs = h_in.head(h);
        let mut log_decay = 0.0;
        for t in 0..t_len {
            log_decay += dt[t * nh + h] * a[h];
            let decay = log_decay.exp();
            let ct = &c[(t * g + grp) * n..(t * g + grp + 1) * n];
            for pi in 0..p {
                let dot: f64 = hs[pi * n..(pi + 1) * n].iter().zip(ct).map(|(s, c)| s * c).sum();
                y[(t * nh + h) * p + pi] = prec.round(decay * dot);
            }
        }
    }
    Tensor::new(&[t_len, nh, p], y, prec)
}

/// Single-token state update used by decode.
///
/// `x_t: [H, d_head]`, `dt_t: [H]`, `b_t`, `c_t: [G, d_state]`. The state is
/// updated in place; its arithmetic is rounded to the state's own precision
/// (`f32` for inference) regardless of the activation precision.
#[allow(clippy::too_many_arguments)]
pub fn ssd_decode_step(
    cfg: &SsdConfig,
    a: &Tensor,
    d: &Tensor,
    state: &mut SsmState,
    x_t: &Tensor,
    dt_t: &Tensor,
    b_t: &Tensor,
    c_t: &Tensor,
) -> Result<Tensor> {
    check_state(cfg, state)?;
    let (nh, p, g, n) = (cfg.n_heads, cfg.d_head, cfg.n_groups, cfg.d_state);
    for (name, t, want) in [
        ("a", a, vec![nh]),
        ("d", d, vec![nh]),
        ("x_t", x_t, vec![nh, p]),
        ("dt_t", dt_t, vec![nh]),
        ("b_t", b_t, vec![g, n]),
        ("c_t", c_t, vec![g, n]),
    ] {
        if t.shape() != want.as_slice() {
            return Err(Error::shape(format!(
                "decode input `{name}` has shape {:?}, expected {want:?}",
                t.shape()
            )));
        }
    }
    let sp = state.precision;
    let yp = x_t.precision();
    let mut y = vec![0.0; nh * p];
    for h in 0..nh {
        let grp = cfg.group_of(h);
        let step = dt_t.data()[h];
        if !(step > 0.0) {
            return Err(Error::Domain(format!("dt must be positive, got {step}")));
        }
        let alpha = (step * a.data()[h]).exp();
        let bt = &b_t.data()[grp * n..(grp + 1) * n];
        let ct = &c_t.data()[grp * n..(grp + 1) * n];
        let xs = &x_t.data()[h * p..(h + 1) * p];
        let hs = state.head_mut(h);
        for (pi, (row, &xv)) in hs.chunks_mut(n).zip(xs).enumerate() {
            let xdt = step * xv;
            for (cell, &bv) in row.iter_mut().zip(bt) {
                *cell = sp.round(alpha * *cell + xdt * bv);
            }
            let read: f64 = row.iter().zip(ct).map(|(s, c)| s * c).sum();
            let out = read + d.data()[h] * xv;
            if !out.is_finite() {
                return Err(Error::NonFinite {
                    step: 0,
                    what: format!("decode output of head {h}"),
                });
            }
            y[h * p + pi] = yp.round(out);
        }
    }
    Tensor::new(&[nh, p], y, yp)
}

/// Depthwise causal convolution over the concatenated x/B/C channels.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalConv {
    /// `[channels, width]`; tap `width − 1` multiplies the current position.
    pub weight: Tensor,
    /// `[channels]`
    pub bias: Tensor,
}

/// Weights of one Mamba2 layer, including its pre-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct SsdLayerParams {
    pub norm: RmsNorm,
    /// `[d_model, d_inner]`
    pub x_proj: Tensor,
    /// Gate projection, `[d_model, d_inner]`.
    pub z_proj: Tensor,
    /// `[d_model, G·d_state]`
    pub b_proj: Tensor,
    /// `[d_model, G·d_state]`
    pub c_proj: Tensor,
    /// `[d_model, H]`
    pub dt_proj: Tensor,
    /// `[H]`
    pub dt_bias: Tensor,
    /// `[H]`; `A = −exp(A_log)`.
    pub a_log: Tensor,
    /// `[H]`
    pub d_skip: Tensor,
    pub conv: Option<CausalConv>,
    /// `[d_inner, d_model]`
    pub out_proj: Tensor,
}

impl SsdLayerParams {
    pub fn d_model(&self) -> usize {
        self.x_proj.dim(0)
    }

    pub fn a(&self) -> Tensor {
        self.a_log.map(|v| -v.exp())
    }

    /// Every tensor with its name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("norm", &self.norm.gain),
            ("x_proj", &self.x_proj),
            ("z_proj", &self.z_proj),
            ("b_proj", &self.b_proj),
            ("c_proj", &self.c_proj),
            ("dt_proj", &self.dt_proj),
            ("dt_bias", &self.dt_bias),
            ("a_log", &self.a_log),
            ("d_skip", &self.d_skip),
        ];
        if let Some(conv) = &self.conv {
            out.push(("conv_weight", &conv.weight));
            out.push(("conv_bias", &conv.bias));
        }
        out.push(("out_proj", &self.out_proj));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![
            ("norm", &mut self.norm.gain),
            ("x_proj", &mut self.x_proj),
            ("z_proj", &mut self.z_proj),
            ("b_proj", &mut self.b_proj),
            ("c_proj", &mut self.c_proj),
            ("dt_proj", &mut self.dt_proj),
            ("dt_bias", &mut self.dt_bias),
            ("a_log", &mut self.a_log),
            ("d_skip", &mut self.d_skip),
        ];
        if let Some(conv) = &mut self.conv {
            out.push(("conv_weight", &mut conv.weight));
            out.push(("conv_bias", &mut conv.bias));
        }
        out.push(("out_proj", &mut self.out_proj));
        out
    }

    /// Scaled-uniform initialization (`±1/√fan_in`) with Mamba2-style A and dt ranges.
    pub fn init<R: Rng + ?Sized>(
        cfg: &SsdConfig,
        d_model: usize,
        norm_eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let p = Precision::F32;
        let (di, h, gn) = (cfg.d_inner(), cfg.n_heads, cfg.n_groups * cfg.d_state);
        let mut uni = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::rand_uniform(shape, -bound, bound, p, rng)
        };
        let x_proj = uni(&[d_model, di], d_model)?;
        let z_proj = uni(&[d_model, di], d_model)?;
        let b_proj = uni(&[d_model, gn], d_model)?;
        let c_proj = uni(&[d_model, gn], d_model)?;
        let dt_proj = uni(&[d_model, h], d_model)?;
        let conv = if cfg.conv_width > 0 {
            Some(CausalConv {
                weight: uni(&[cfg.conv_dim(), cfg.conv_width], cfg.conv_width)?,
                bias: uni(&[cfg.conv_dim()], cfg.conv_width)?,
            })
        } else {
            None
        };
        let out_proj = uni(&[di, d_model], di)?;
        // dt in [1e-3, 1e-1] log-uniformly, stored through inverse softplus
        let dt_bias = Tensor::from_fn(&[h], p, |_| {
            let dt = (rng.gen_range(1e-3f64.ln()..1e-1f64.ln())).exp();
            dt + (-(-dt).exp_m1()).ln()
        })?;
        let a_log = Tensor::from_fn(&[h], p, |_| rng.gen_range(1.0f64..16.0).ln())?;
        Ok(Self {
            norm: RmsNorm::ones(d_model, norm_eps, p)?,
            x_proj,
            z_proj,
            b_proj,
            c_proj,
            dt_proj,
            dt_bias,
            a_log,
            d_skip: Tensor::ones(&[h], p)?,
            conv,
            out_proj,
        })
    }

    pub fn validate(&self, cfg: &SsdConfig, d_model: usize) -> Result<()> {
        let (di, h, gn) = (cfg.d_inner(), cfg.n_heads, cfg.n_groups * cfg.d_state);
        let mut want: Vec<(&str, Vec<usize>)> = vec![
            ("norm", vec![d_model]),
            ("x_proj", vec![d_model, di]),
            ("z_proj", vec![d_model, di]),
            ("b_proj", vec![d_model, gn]),
            ("c_proj", vec![d_model, gn]),
            ("dt_proj", vec![d_model, h]),
            ("dt_bias", vec![h]),
            ("a_log", vec![h]),
            ("d_skip", vec![h]),
        ];
        if cfg.conv_width > 0 {
            want.push(("conv_weight", vec![cfg.conv_dim(), cfg.conv_width]));
            want.push(("conv_bias", vec![cfg.conv_dim()]));
        }
        want.push(("out_proj", vec![di, d_model]));
        let have = self.named_tensors();
        if have.len() != want.len() {
            return Err(Error::config("conv_width", "conv presence does not match config"));
        }
        for ((name, t), (_, shape)) in have.into_iter().zip(want) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "mamba tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Decode-time cache of one Mamba2 layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SsdLayerState {
    pub ssm: SsmState,
    /// Last `conv_width − 1` pre-conv x/B/C rows, oldest first, `[(w−1)·conv_dim]`.
    pub conv_tail: Vec<f64>,
}

impl SsdLayerState {
    pub fn new(cfg: &SsdConfig) -> Self {
        Self {
            ssm: SsmState::zeros(cfg),
            conv_tail: vec![0.0; cfg.conv_width.saturating_sub(1) * cfg.conv_dim()],
        }
    }
}

struct Projected {
    x: Tensor,
    b: Tensor,
    c: Tensor,
    dt: Tensor,
    z: Vec<f64>,
}

/// Norm, projections, causal conv and dt discretization for `rows` tokens.
fn project(
    cfg: &SsdConfig,
    params: &SsdLayerParams,
    residual_in: &Tensor,
    state: &mut SsdLayerState,
) -> Result<Projected> {
    let d_model = params.d_model();
    if residual_in.rank() != 2 || residual_in.dim(1) != d_model {
        return Err(Error::shape(format!(
            "mamba layer expects [T, {d_model}], got {:?}",
            residual_in.shape()
        )));
    }
    let t_len = residual_in.dim(0);
    let prec = residual_in.precision();
    let hidden = params.norm.forward(residual_in)?;
    let xs = linear(&hidden, &params.x_proj)?;
    let bs = linear(&hidden, &params.b_proj)?;
    let cs = linear(&hidden, &params.c_proj)?;
    let zs = linear(&hidden, &params.z_proj)?;
    let dt_raw = linear(&hidden, &params.dt_proj)?;

    let (di, gn) = (cfg.d_inner(), cfg.n_groups * cfg.d_state);
    let ch = cfg.conv_dim();
    let mut xbc = Vec::with_capacity(t_len * ch);
    for t in 0..t_len {
        xbc.extend_from_slice(xs.row(t));
        xbc.extend_from_slice(bs.row(t));
        xbc.extend_from_slice(cs.row(t));
    }
    let xbc = match &params.conv {
        Some(conv) => {
            let w = cfg.conv_width;
            let tail_rows = w - 1;
            let mut padded = state.conv_tail.clone();
            padded.extend_from_slice(&xbc);
            let mut out = vec![0.0; t_len * ch];
            for t in 0..t_len {
                for c in 0..ch {
                    let mut acc = conv.bias.data()[c];
                    for k in 0..w {
                        acc += conv.weight.data()[c * w + k] * padded[(t + k) * ch + c];
                    }
                    out[t * ch + c] = prec.round(silu_scalar(acc));
                }
            }
            let total_rows = tail_rows + t_len;
            state.conv_tail = padded[(total_rows - tail_rows) * ch..].to_vec();
            out
        }
        None => xbc,
    };
    let mut x = Vec::with_capacity(t_len * di);
    let mut b = Vec::with_capacity(t_len * gn);
    let mut c = Vec::with_capacity(t_len * gn);
    for row in xbc.chunks(ch) {
        x.extend_from_slice(&row[..di]);
        b.extend_from_slice(&row[di..di + gn]);
        c.extend_from_slice(&row[di + gn..]);
    }
    let nh = cfg.n_heads;
    let dt: Vec<f64> = dt_raw
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| softplus(v + params.dt_bias.data()[i % nh]))
        .collect();
    Ok(Projected {
        x: Tensor::new(&[t_len, nh, cfg.d_head], x, prec)?,
        b: Tensor::new(&[t_len, cfg.n_groups, cfg.d_state], b, prec)?,
        c: Tensor::new(&[t_len, cfg.n_groups, cfg.d_state], c, prec)?,
        dt: Tensor::new(&[t_len, nh], dt, prec)?,
        z: zs.into_data(),
    })
}

fn gate_and_project(
    params: &SsdLayerParams,
    residual_in: &Tensor,
    y: &[f64],
    z: &[f64],
) -> Result<Tensor> {
    let prec = residual_in.precision();
    let t_len = residual_in.dim(0);
    let di = params.out_proj.dim(0);
    let gated: Vec<f64> = y
        .iter()
        .zip(z)
        .map(|(yv, zv)| prec.round(yv * silu_scalar(*zv)))
        .collect();
    let out = linear(&Tensor::new(&[t_len, di], gated, prec)?, &params.out_proj)?;
    residual_in.add(&out)
}

/// Full Mamba2 layer over `T` tokens with the chunked scan:
/// `residual_in + out_proj(silu(z) ⊙ scan(conv(x, B, C), dt))`.
///
/// Without `state` the layer starts from zeros. The returned state continues decoding.
pub fn ssd_layer_forward(
    cfg: &SsdConfig,
    params: &SsdLayerParams,
    residual_in: &Tensor,
    state: Option<&SsdLayerState>,
) -> Result<(Tensor, SsdLayerState)> {
    let mut next = state.cloned().unwrap_or_else(|| SsdLayerState::new(cfg));
    let proj = project(cfg, params, residual_in, &mut next)?;
    let prec = residual_in.precision();
    let inputs = ScanInputs {
        a: params.a().to_precision(prec),
        dt: proj.dt,
        x: proj.x,
        b: proj.b,
        c: proj.c,
        d: params.d_skip.to_precision(prec),
    };
    let (y, ssm) = ssd_chunked_scan(cfg, &inputs, &next.ssm)?;
    next.ssm = ssm;
    let out = gate_and_project(params, residual_in, y.data(), &proj.z)?;
    Ok((out, next))
}

/// One-token Mamba2 layer step through [`ssd_decode_step`]; `residual_in` is `[1, d_model]`.
pub fn ssd_layer_decode(
    cfg: &SsdConfig,
    params: &SsdLayerParams,
    residual_in: &Tensor,
    state: &mut SsdLayerState,
) -> Result<Tensor> {
    if residual_in.rank() != 2 || residual_in.dim(0) != 1 {
        return Err(Error::shape(format!(
            "decode expects a single row, got {:?}",
            residual_in.shape()
        )));
    }
    let proj = project(cfg, params, residual_in, state)?;
    let (nh, p, g, n) = (cfg.n_heads, cfg.d_head, cfg.n_groups, cfg.d_state);
    let prec = residual_in.precision();
    let y = ssd_decode_step(
        cfg,
        &params.a().to_precision(prec),
        &params.d_skip.to_precision(prec),
        &mut state.ssm,
        &proj.x.reshape(&[nh, p])?,
        &proj.dt.reshape(&[nh])?,
        &proj.b.reshape(&[g, n])?,
        &proj.c.reshape(&[g, n])?,
    )?;
    gate_and_project(params, residual_in, y.data(), &proj.z)
}
