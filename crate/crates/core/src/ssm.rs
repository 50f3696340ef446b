//! Diagonal state space models: zero-order-hold discretization, the recurrent
//! and convolutional evaluation paths, the input-dependent (selective) scan and
//! the long-range decay of a token's contribution.
//!
//! The state matrix is diagonal and stored as `a_log` with `A = -exp(a_log)`,
//! so every diagonal entry is strictly negative and every discretized decay
//! `exp(delta * A)` lies in `(0, 1)`.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

/// Below this magnitude of `delta * A`, `B_bar` is taken as `delta B`.
pub const ZOH_LIMIT_EPS: f64 = 1e-12;

/// `(exp(z) - 1) / z`, the zero-order-hold input gain.
#[inline]
pub(crate) fn zoh_gain(z: f64) -> f64 {
    if z.abs() < ZOH_LIMIT_EPS {
        1.0 + 0.5 * z
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`zoh_gain`].
#[inline]
pub(crate) fn zoh_gain_deriv(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else {
        (z.exp() * (z - 1.0) + 1.0) / (z * z)
    }
}

/// Multiplier on `B` in `B_bar` for `z = delta A`: the gain `(exp(z) - 1) / z`,
/// or `delta` itself once `|z| < ZOH_LIMIT_EPS`.
#[inline]
pub(crate) fn input_gain(z: f64, delta: f64) -> f64 {
    if z.abs() < ZOH_LIMIT_EPS {
        delta
    } else {
        zoh_gain(z)
    }
}

/// `(exp(z), input_gain(z, delta))` from a single `expm1`.
#[inline]
fn zoh_pair(z: f64, delta: f64) -> (f64, f64) {
    if z.abs() < ZOH_LIMIT_EPS {
        (z.exp(), delta)
    } else {
        let em1 = z.exp_m1();
        (1.0 + em1, em1 / z)
    }
}

/// `exp(z)`, the input gain, and its partials in `z` and in `delta`.
#[inline]
fn zoh_triple(z: f64, delta: f64) -> (f64, f64, f64, f64) {
    let (e, gain) = zoh_pair(z, delta);
    if z.abs() < ZOH_LIMIT_EPS {
        return (e, gain, 0.0, 1.0);
    }
    let deriv = if z.abs() < 1e-3 {
        zoh_gain_deriv(z)
    } else {
        (z * e - (e - 1.0)) / (z * z)
    };
    (e, gain, deriv, 0.0)
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus, for initializing biases to a target step size.
pub(crate) fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Discretized single-channel system with per-token parameters.
///
/// `a_bar`, `b_bar` and `c` are `len x state` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub state: usize,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c: Vec<f64>,
    pub d: f64,
}

/// One token's `(A_bar, B_bar)` from the continuous diagonal `A`, input `B` and step `delta`.
///
/// `B_bar = (delta A)^-1 (exp(delta A) - 1) B`, elementwise on the diagonal. When
/// `|delta A| < ZOH_LIMIT_EPS` it is `delta B` instead.
pub fn discretize_zoh(a: &[f64], b: &[f64], delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(delta > 0.0) {
        return Err(Error::domain(
            "discretize_zoh",
            format!("step size must be positive, got {delta}"),
        ));
    }
    if a.len() != b.len() {
        return Err(Error::shape("discretize_zoh", &[a.len()], &[b.len()]));
    }
    if let Some(bad) = a.iter().find(|&&v| !(v < 0.0)) {
        return Err(Error::domain(
            "discretize_zoh",
            format!("state entries must be negative, got {bad}"),
        ));
    }
    let a_bar = a.iter().map(|&ai| (delta * ai).exp()).collect();
    let b_bar = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| input_gain(delta * ai, delta) * bi)
        .collect();
    Ok((a_bar, b_bar))
}

impl DiscreteSsm {
    /// Same `(A, B, C, delta)` at every one of `len` tokens.
    pub fn time_invariant(
        a: &[f64],
        b: &[f64],
        c: &[f64],
        d: f64,
        delta: f64,
        len: usize,
    ) -> Result<Self> {
        if c.len() != a.len() {
            return Err(Error::shape("time_invariant", &[a.len()], &[c.len()]));
        }
        let (a_bar, b_bar) = discretize_zoh(a, b, delta)?;
        Ok(DiscreteSsm {
            state: a.len(),
            a_bar: a_bar.repeat(len),
            b_bar: b_bar.repeat(len),
            c: c.repeat(len),
            d,
        })
    }

    /// Per-token `B`, `C` (each `len x state`) and step sizes.
    pub fn from_tokens(a: &[f64], b: &[f64], c: &[f64], d: f64, delta: &[f64]) -> Result<Self> {
        let n = a.len();
        let len = delta.len();
        if b.len() != len * n || c.len() != len * n {
            return Err(Error::shape(
                "from_tokens",
                &[len, n],
                &[b.len() / n.max(1), n],
            ));
        }
        let mut a_bar = Vec::with_capacity(len * n);
        let mut b_bar = Vec::with_capacity(len * n);
        for (k, &dk) in delta.iter().enumerate() {
            let (ab, bb) = discretize_zoh(a, &b[k * n..(k + 1) * n], dk)?;
            a_bar.extend(ab);
            b_bar.extend(bb);
        }
        Ok(DiscreteSsm {
            state: n,
            a_bar,
            b_bar,
            c: c.to_vec(),
            d,
        })
    }

    /// Builds a system directly from discretized per-token values.
    pub fn from_discrete(
        state: usize,
        a_bar: Vec<f64>,
        b_bar: Vec<f64>,
        c: Vec<f64>,
        d: f64,
    ) -> Result<Self> {
        let len = a_bar.len() / state.max(1);
        if a_bar.len() != len * state || b_bar.len() != a_bar.len() || c.len() != a_bar.len() {
            return Err(Error::invalid(
                "from_discrete",
                "per-token arrays disagree in length",
            ));
        }
        if let Some(bad) = a_bar.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::domain(
                "from_discrete",
                format!("decay entries must lie in (0, 1], got {bad}"),
            ));
        }
        Ok(DiscreteSsm {
            state,
            a_bar,
            b_bar,
            c,
            d,
        })
    }

    pub fn len(&self) -> usize {
        self.a_bar.len() / self.state.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn is_time_invariant(&self) -> bool {
        let n = self.state;
        (1..self.len()).all(|k| {
            self.a_bar[k * n..(k + 1) * n] == self.a_bar[..n]
                && self.b_bar[k * n..(k + 1) * n] == self.b_bar[..n]
                && self.c[k * n..(k + 1) * n] == self.c[..n]
        })
    }

    /// Causal kernel `(C B_bar, C A_bar B_bar, ..., C A_bar^(L-1) B_bar)`.
    pub fn kernel(&self) -> Result<Vec<f64>> {
        if !self.is_time_invariant() {
            return Err(Error::Contract(
                "convolution kernel requires token-invariant parameters".into(),
            ));
        }
        let n = self.state;
        let mut power: Vec<f64> = self.b_bar[..n].to_vec();
        let mut k = Vec::with_capacity(self.len());
        for _ in 0..self.len() {
            k.push(power.iter().zip(&self.c[..n]).map(|(p, c)| p * c).sum());
            for (p, a) in power.iter_mut().zip(&self.a_bar[..n]) {
                *p *= a;
            }
        }
        Ok(k)
    }
}

/// `h_k = A_bar h_{k-1} + B_bar x_k`, `y_k = C h_k + D x_k` from `h_0 = 0`.
pub fn scan_recurrent(ssm: &DiscreteSsm, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != ssm.len() {
        return Err(Error::shape("scan_recurrent", &[ssm.len()], &[x.len()]));
    }
    let n = ssm.state;
    let mut h = vec![0.0; n];
    let mut y = Vec::with_capacity(x.len());
    for (k, &xk) in x.iter().enumerate() {
        let row = k * n..(k + 1) * n;
        let mut acc = 0.0;
        for (((hd, a), b), c) in h
            .iter_mut()
            .zip(&ssm.a_bar[row.clone()])
            .zip(&ssm.b_bar[row.clone()])
            .zip(&ssm.c[row])
        {
            *hd = a * *hd + b * xk;
            acc += c * *hd;
        }
        y.push(acc + ssm.d * xk);
    }
    Ok(y)
}

/// Causal convolution with the system's kernel plus the skip term.
pub fn kernel_convolve(ssm: &DiscreteSsm, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != ssm.len() {
        return Err(Error::shape("kernel_convolve", &[ssm.len()], &[x.len()]));
    }
    let k = ssm.kernel()?;
    Ok((0..x.len())
        .map(|j| (0..=j).map(|i| k[j - i] * x[i]).sum::<f64>() + ssm.d * x[j])
        .collect())
}

/// Contribution of token `m` to the output at token `n > m`:
/// `C_n exp(sum_{i=m+1}^{n} delta_i A) B_bar_m`, summed over the state.
///
/// The exponent is accumulated as `sum ln(A_bar_i)`, which equals
/// `sum delta_i A` for any zero-order-hold system.
pub fn contribution(ssm: &DiscreteSsm, m: usize, n: usize) -> Result<f64> {
    if m >= n {
        return Err(Error::domain(
            "contribution",
            format!("source token {m} must precede target {n}"),
        ));
    }
    if n >= ssm.len() {
        return Err(Error::domain(
            "contribution",
            format!("token {n} outside sequence of {}", ssm.len()),
        ));
    }
    let s = ssm.state;
    Ok((0..s)
        .map(|d| {
            let exponent: f64 = (m + 1..=n).map(|i| ssm.a_bar[i * s + d].ln()).sum();
            ssm.c[n * s + d] * exponent.exp() * ssm.b_bar[m * s + d]
        })
        .sum())
}

/// Learnable parameters of one multi-channel selective SSM.
///
/// Per token `x_k` (a `channels` vector):
/// `B_k = b_base + x_k W_b`, `C_k = c_base + x_k W_c`,
/// `delta_k = softplus(x_k W_delta + delta_base)`; each channel then runs its
/// own length-`state` recurrence with the shared `B_k`, `C_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    /// `[channels, state]`, `A = -exp(a_log)`.
    pub a_log: Tensor,
    /// `[channels]` skip gain.
    pub d: Tensor,
    /// `[channels]` step-size bias.
    pub delta_base: Tensor,
    /// `[channels, channels]`.
    pub w_delta: Tensor,
    /// `[channels, state]`.
    pub w_b: Tensor,
    /// `[state]`.
    pub b_base: Tensor,
    /// `[channels, state]`.
    pub w_c: Tensor,
    /// `[state]`.
    pub c_base: Tensor,
}

/// Step sizes at initialization are log-uniform in this range.
pub const DELTA_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

impl SsmParams {
    /// `A_d = -(d + 1)`, `D = 1`, zero base `B`/`C`, fan-in scaled projections.
    pub fn init(channels: usize, state: usize, rng: &mut impl Rng) -> Self {
        let a_log = Tensor::from_fn(&[channels, state], |i| ((i % state) as f64 + 1.0).ln());
        let (lo, hi) = DELTA_INIT_RANGE;
        let delta_base = Tensor::from_fn(&[channels], |_| {
            let t: f64 = rng.gen();
            softplus_inv((lo.ln() + t * (hi.ln() - lo.ln())).exp())
        });
        let bound = 1.0 / (channels as f64).sqrt();
        SsmParams {
            a_log,
            d: Tensor::full(&[channels], 1.0),
            delta_base,
            w_delta: Tensor::uniform(&[channels, channels], bound, rng),
            w_b: Tensor::uniform(&[channels, state], bound, rng),
            b_base: Tensor::zeros(&[state]),
            w_c: Tensor::uniform(&[channels, state], bound, rng),
            c_base: Tensor::zeros(&[state]),
        }
    }

    /// `y = D x`: no state read-out, no selection.
    pub fn pure_skip(channels: usize, state: usize) -> Self {
        SsmParams {
            a_log: Tensor::from_fn(&[channels, state], |i| ((i % state) as f64 + 1.0).ln()),
            d: Tensor::full(&[channels], 1.0),
            delta_base: Tensor::zeros(&[channels]),
            w_delta: Tensor::zeros(&[channels, channels]),
            w_b: Tensor::zeros(&[channels, state]),
            b_base: Tensor::zeros(&[state]),
            w_c: Tensor::zeros(&[channels, state]),
            c_base: Tensor::zeros(&[state]),
        }
    }

    pub fn channels(&self) -> usize {
        self.d.numel()
    }

    pub fn state(&self) -> usize {
        self.b_base.numel()
    }

    /// Continuous diagonal `A` for one channel.
    pub fn a_diag(&self, channel: usize) -> Vec<f64> {
        let n = self.state();
        self.a_log.data()[channel * n..(channel + 1) * n]
            .iter()
            .map(|v| -v.exp())
            .collect()
    }

    /// Per-channel discretized system for a sequence `x` of shape `[len, channels]`.
    pub fn discretize(&self, x: &Tensor, channel: usize) -> Result<DiscreteSsm> {
        let proj = self.project(x)?;
        let len = x.shape()[0];
        let c = self.channels();
        let delta: Vec<f64> = (0..len)
            .map(|k| softplus(proj.delta_raw[k * c + channel]))
            .collect();
        DiscreteSsm::from_tokens(
            &self.a_diag(channel),
            &proj.b,
            &proj.c,
            self.d.data()[channel],
            &delta,
        )
    }

    fn project(&self, x: &Tensor) -> Result<Projections> {
        let (c, n) = (self.channels(), self.state());
        if x.rank() != 2 || x.shape()[1] != c {
            return Err(Error::shape(
                "selective_scan",
                x.shape(),
                &[x.shape().first().copied().unwrap_or(0), c],
            ));
        }
        let len = x.shape()[0];
        Ok(Projections {
            delta_raw: affine_rows(
                x.data(),
                len,
                c,
                self.w_delta.data(),
                c,
                self.delta_base.data(),
            ),
            b: affine_rows(x.data(), len, c, self.w_b.data(), n, self.b_base.data()),
            c: affine_rows(x.data(), len, c, self.w_c.data(), n, self.c_base.data()),
        })
    }
}

struct Projections {
    delta_raw: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

fn affine_rows(
    x: &[f64],
    rows: usize,
    cin: usize,
    w: &[f64],
    cout: usize,
    bias: &[f64],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cout);
    for r in 0..rows {
        out.extend_from_slice(bias);
        let o = &mut out[r * cout..];
        for (i, &xi) in x[r * cin..(r + 1) * cin].iter().enumerate() {
            for (oj, wj) in o[..cout].iter_mut().zip(&w[i * cout..(i + 1) * cout]) {
                *oj += xi * wj;
            }
        }
    }
    out
}

/// Selective scan of one sequence `x: [len, channels]` with zero initial state.
pub fn selective_scan(params: &SsmParams, x: &Tensor) -> Result<Tensor> {
    let proj = params.project(x)?;
    let dims = ScanDims {
        seqs: 1,
        len: x.shape()[0],
        channels: params.channels(),
        state: params.state(),
    };
    let (y, _) = selective_forward(
        dims,
        ScanInputs {
            x: x.data(),
            delta_raw: &proj.delta_raw,
            b: &proj.b,
            c: &proj.c,
            a_log: params.a_log.data(),
            d: params.d.data(),
        },
        false,
    );
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

/// Extents of a batch of independent scans laid out as `[seqs * len, channels]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ScanDims {
    pub seqs: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

#[derive(Clone, Copy)]
pub(crate) struct ScanInputs<'a> {
    pub x: &'a [f64],
    pub delta_raw: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub a_log: &'a [f64],
    pub d: &'a [f64],
}

pub(crate) struct ScanGrads {
    pub x: Vec<f64>,
    pub delta_raw: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub a_log: Vec<f64>,
    pub d: Vec<f64>,
}

/// Runs every sequence from a zero state. With `keep_states`, also returns
/// all hidden states as `[seqs * len, channels, state]`.
pub(crate) fn selective_forward(
    dims: ScanDims,
    inp: ScanInputs<'_>,
    keep_states: bool,
) -> (Vec<f64>, Vec<f64>) {
    let ScanDims {
        seqs,
        len,
        channels: ch,
        state: n,
    } = dims;
    let a: Vec<f64> = inp.a_log.iter().map(|v| -v.exp()).collect();
    let mut y = vec![0.0; seqs * len * ch];
    let mut states = if keep_states {
        vec![0.0; seqs * len * ch * n]
    } else {
        Vec::new()
    };
    let mut h = vec![0.0; ch * n];
    for s in 0..seqs {
        h.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..len {
            let row = s * len + k;
            let bk = &inp.b[row * n..(row + 1) * n];
            let ck = &inp.c[row * n..(row + 1) * n];
            for c in 0..ch {
                let xk = inp.x[row * ch + c];
                let delta = softplus(inp.delta_raw[row * ch + c]);
                let hc = &mut h[c * n..(c + 1) * n];
                let ac = &a[c * n..(c + 1) * n];
                let mut acc = 0.0;
                for d in 0..n {
                    let (a_bar, gain) = zoh_pair(delta * ac[d], delta);
                    let b_bar = gain * bk[d];
                    hc[d] = a_bar * hc[d] + b_bar * xk;
                    acc += ck[d] * hc[d];
                }
                y[row * ch + c] = acc + inp.d[c] * xk;
                if keep_states {
                    states[(row * ch + c) * n..(row * ch + c + 1) * n].copy_from_slice(hc);
                }
            }
        }
    }
    (y, states)
}

/// Reverse-time adjoint of [`selective_forward`].
pub(crate) fn selective_backward(
    dims: ScanDims,
    inp: ScanInputs<'_>,
    states: &[f64],
    gy: &[f64],
) -> ScanGrads {
    let ScanDims {
        seqs,
        len,
        channels: ch,
        state: n,
    } = dims;
    let a: Vec<f64> = inp.a_log.iter().map(|v| -v.exp()).collect();
    let mut g = ScanGrads {
        x: vec![0.0; seqs * len * ch],
        delta_raw: vec![0.0; seqs * len * ch],
        b: vec![0.0; seqs * len * n],
        c: vec![0.0; seqs * len * n],
        a_log: vec![0.0; ch * n],
        d: vec![0.0; ch],
    };
    // carry[c, d] = A_bar_{k+1} * dL/dh_{k+1}
    let mut carry = vec![0.0; ch * n];
    for s in 0..seqs {
        carry.iter_mut().for_each(|v| *v = 0.0);
        for k in (0..len).rev() {
            let row = s * len + k;
            let bk = &inp.b[row * n..(row + 1) * n];
            let ck = &inp.c[row * n..(row + 1) * n];
            for c in 0..ch {
                let idx = row * ch + c;
                let xk = inp.x[idx];
                let gyk = gy[idx];
                let raw = inp.delta_raw[idx];
                let delta = softplus(raw);
                g.d[c] += gyk * xk;
                let mut gx = gyk * inp.d[c];
                let mut gdelta = 0.0;
                let hk = &states[idx * n..(idx + 1) * n];
                let hprev = if k > 0 {
                    Some(&states[(idx - ch) * n..(idx - ch + 1) * n])
                } else {
                    None
                };
                let ac = &a[c * n..(c + 1) * n];
                let carry_c = &mut carry[c * n..(c + 1) * n];
                for d in 0..n {
                    g.c[row * n + d] += gyk * hk[d];
                    let gh = carry_c[d] + gyk * ck[d];
                    let (a_bar, gain, gain_dz, gain_ddelta) = zoh_triple(delta * ac[d], delta);
                    let g_abar = hprev.map_or(0.0, |hp| gh * hp[d]);
                    let g_bbar = gh * xk;
                    gx += gh * gain * bk[d];
                    g.b[row * n + d] += g_bbar * gain;
                    let gz = g_abar * a_bar + g_bbar * bk[d] * gain_dz;
                    gdelta += gz * ac[d] + g_bbar * bk[d] * gain_ddelta;
                    // dA/da_log = A
                    g.a_log[c * n + d] += gz * delta * ac[d];
                    carry_c[d] = gh * a_bar;
                }
                g.x[idx] += gx;
                g.delta_raw[idx] = gdelta * sigmoid(raw);
            }
        }
    }
    g
}

/// Graph handles for the tensors of one [`SsmParams`].
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a_log: Var,
    pub d: Var,
    pub delta_base: Var,
    pub w_delta: Var,
    pub w_b: Var,
    pub b_base: Var,
    pub w_c: Var,
    pub c_base: Var,
}

impl SsmVars {
    /// Records `params` as graph leaves.
    pub fn bind(g: &mut Graph, params: &SsmParams, requires_grad: bool) -> Self {
        SsmVars {
            a_log: g.leaf(params.a_log.clone(), requires_grad),
            d: g.leaf(params.d.clone(), requires_grad),
            delta_base: g.leaf(params.delta_base.clone(), requires_grad),
            w_delta: g.leaf(params.w_delta.clone(), requires_grad),
            w_b: g.leaf(params.w_b.clone(), requires_grad),
            b_base: g.leaf(params.b_base.clone(), requires_grad),
            w_c: g.leaf(params.w_c.clone(), requires_grad),
            c_base: g.leaf(params.c_base.clone(), requires_grad),
        }
    }

    /// Selective scan of `seqs` equal-length sequences stacked as `[seqs * len, channels]`.
    pub fn apply(&self, g: &mut Graph, x: Var, seqs: usize) -> Result<Var> {
        let delta_raw = g.linear(x, self.w_delta, Some(self.delta_base))?;
        let b = g.linear(x, self.w_b, Some(self.b_base))?;
        let c = g.linear(x, self.w_c, Some(self.c_base))?;
        g.selective_scan(x, delta_raw, b, c, self.a_log, self.d, seqs)
    }
}
