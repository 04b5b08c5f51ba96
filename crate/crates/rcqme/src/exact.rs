//! Exact pure-decoherence dynamics for the Brownian bath.
//!
//! For a spin whose coupling operator commutes with its Hamiltonian the
//! populations freeze and the off-diagonal element evolves as
//! `rho01(t) = rho01(0) exp(Gamma(t) - i delta t)` with the decoherence
//! function
//!
//! ```text
//! Gamma(t) = -4 int_0^inf J(w) coth(beta w / 2) (1 - cos(w t)) / w^2 dw.
//! ```
//!
//! This module evaluates `Gamma` by adaptive panel-based Gauss-Kronrod
//! quadrature, provides the long-time decay rate and its timescale, and
//! carries the analytic Born-Markov (exponential) comparator. It is the
//! ground-truth oracle the reaction-coordinate solver is benchmarked
//! against.

use crate::spectra::{brownian_j_raw, BrownianParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExactError {
    #[error("invalid argument {name}: {value} ({reason})")]
    Domain {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("quadrature did not converge: requested rel. error {requested:.3e}, achieved {achieved:.3e}")]
    Convergence { requested: f64, achieved: f64 },
    #[error("quadrature panel budget exceeded: needs {required} base panels, budget {budget}")]
    Budget { required: usize, budget: usize },
    #[error("invalid qubit state: {0}")]
    InvalidState(String),
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
}

// ---------------------------------------------------------------------------
// Qubit states
// ---------------------------------------------------------------------------

/// A 2x2 spin density matrix. Index 0 is the upper level (`sigma_z = +1`),
/// so `H = (delta/2) sigma_z` gives `rho01(t) ~ exp(-i delta t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QubitState {
    pub rho00: Complex64,
    pub rho01: Complex64,
    pub rho10: Complex64,
    pub rho11: Complex64,
}

impl QubitState {
    /// Validates Hermiticity, unit trace and positivity (up to the small
    /// transient violations a non-secular integrator is allowed to emit).
    pub fn from_elements(
        rho00: Complex64,
        rho01: Complex64,
        rho10: Complex64,
        rho11: Complex64,
    ) -> Result<Self, ExactError> {
        let herm = (rho10 - rho01.conj()).norm();
        if herm > 1e-8 {
            return Err(ExactError::InvalidState(format!(
                "rho10 != conj(rho01), |diff| = {herm:.3e}"
            )));
        }
        if rho00.im.abs() > 1e-8 || rho11.im.abs() > 1e-8 {
            return Err(ExactError::InvalidState(
                "diagonal entries must be real".into(),
            ));
        }
        let tr = rho00.re + rho11.re;
        if (tr - 1.0).abs() > 1e-6 {
            return Err(ExactError::InvalidState(format!("trace = {tr}, not 1")));
        }
        let state = Self {
            rho00,
            rho01,
            rho10,
            rho11,
        };
        let (lo, _) = state.eigenvalues();
        if lo < -1e-8 {
            return Err(ExactError::InvalidState(format!(
                "negative eigenvalue {lo:.3e}"
            )));
        }
        Ok(state)
    }

    /// (|0> + |1>)(<0| + <1|)/2, the dephasing-model initial state.
    pub fn plus_state() -> Self {
        let h = Complex64::new(0.5, 0.0);
        Self {
            rho00: h,
            rho01: h,
            rho10: h,
            rho11: h,
        }
    }

    /// |-><-| with |-> = (|0> - |1>)/sqrt(2), the spin-boson initial state.
    pub fn minus_state() -> Self {
        let h = Complex64::new(0.5, 0.0);
        Self {
            rho00: h,
            rho01: -h,
            rho10: -h,
            rho11: h,
        }
    }

    /// |0><0| (upper level).
    pub fn excited() -> Self {
        Self {
            rho00: Complex64::new(1.0, 0.0),
            rho01: Complex64::new(0.0, 0.0),
            rho10: Complex64::new(0.0, 0.0),
            rho11: Complex64::new(0.0, 0.0),
        }
    }

    /// |1><1| (lower level).
    pub fn ground() -> Self {
        Self {
            rho00: Complex64::new(0.0, 0.0),
            rho01: Complex64::new(0.0, 0.0),
            rho10: Complex64::new(0.0, 0.0),
            rho11: Complex64::new(1.0, 0.0),
        }
    }

    pub fn maximally_mixed() -> Self {
        let h = Complex64::new(0.5, 0.0);
        Self {
            rho00: h,
            rho01: Complex64::new(0.0, 0.0),
            rho10: Complex64::new(0.0, 0.0),
            rho11: h,
        }
    }

    pub fn trace(&self) -> f64 {
        self.rho00.re + self.rho11.re
    }

    /// tr(rho^2).
    pub fn purity(&self) -> f64 {
        (self.rho00 * self.rho00
            + self.rho01 * self.rho10
            + self.rho10 * self.rho01
            + self.rho11 * self.rho11)
            .re
    }

    /// <sigma_z> = rho00 - rho11.
    pub fn sigma_z(&self) -> f64 {
        self.rho00.re - self.rho11.re
    }

    pub fn coherence(&self) -> Complex64 {
        self.rho01
    }

    /// Eigenvalues (ascending) of the Hermitian part.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let a = self.rho00.re;
        let b = self.rho11.re;
        let mean = 0.5 * (a + b);
        let disc = (0.25 * (a - b) * (a - b) + self.rho01.norm_sqr()).sqrt();
        (mean - disc, mean + disc)
    }
}

// ---------------------------------------------------------------------------
// Decoherence traces
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    Exact,
    RcQme,
    Bmr,
}

impl TraceSource {
    pub fn tag(&self) -> &'static str {
        match self {
            TraceSource::Exact => "exact",
            TraceSource::RcQme => "rc_qme",
            TraceSource::Bmr => "bmr",
        }
    }
}

/// Sampled decoherence function Gamma(t) = ln |rho01(t)/rho01(0)|.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoherenceTrace {
    times: Vec<f64>,
    gamma: Vec<f64>,
    source: TraceSource,
    /// Time beyond which the exact trace switched to the linear long-time
    /// asymptote instead of full quadrature. Never done silently.
    stitched_from: Option<f64>,
    /// Set when coherence magnitudes hit the floating-point floor during
    /// extraction and were clamped.
    clamped: bool,
}

impl DecoherenceTrace {
    pub fn new(times: Vec<f64>, gamma: Vec<f64>, source: TraceSource) -> Result<Self, ExactError> {
        if times.is_empty() || times.len() != gamma.len() {
            return Err(ExactError::InvalidTrace(format!(
                "need equal nonzero lengths, got {} times and {} values",
                times.len(),
                gamma.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ExactError::InvalidTrace(
                "times must be strictly increasing".into(),
            ));
        }
        if times[0] == 0.0 && gamma[0].abs() > 1e-9 {
            return Err(ExactError::InvalidTrace(format!(
                "gamma(0) = {} must vanish",
                gamma[0]
            )));
        }
        if source == TraceSource::Exact && gamma.iter().any(|&g| g > 1e-12) {
            return Err(ExactError::InvalidTrace(
                "exact decoherence function must be nonpositive".into(),
            ));
        }
        Ok(Self {
            times,
            gamma,
            source,
            stitched_from: None,
            clamped: false,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn source(&self) -> TraceSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn stitched_from(&self) -> Option<f64> {
        self.stitched_from
    }

    pub fn clamped(&self) -> bool {
        self.clamped
    }

    pub(crate) fn mark_stitched(&mut self, from: f64) {
        self.stitched_from = Some(from);
    }

    pub(crate) fn mark_clamped(&mut self) {
        self.clamped = true;
    }

    /// CSV with `time,gamma,abs_coherence` columns; provenance and any
    /// caller-supplied key/value pairs go into `#`-prefixed header lines.
    pub fn write_csv<W: Write>(
        &self,
        w: &mut W,
        extra_header: &[(&str, String)],
    ) -> std::io::Result<()> {
        writeln!(w, "# source = {}", self.source.tag())?;
        if let Some(t) = self.stitched_from {
            writeln!(w, "# stitched_from = {t}")?;
        }
        if self.clamped {
            writeln!(w, "# clamped = true")?;
        }
        for (k, v) in extra_header {
            writeln!(w, "# {k} = {v}")?;
        }
        writeln!(w, "time,gamma,abs_coherence")?;
        for (t, g) in self.times.iter().zip(&self.gamma) {
            writeln!(w, "{t},{g},{}", g.exp())?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Long-time (Markovian) limit
// ---------------------------------------------------------------------------

/// Decoherence timescale; `lam = 0` means no decoherence ever (serialized
/// explicitly rather than as a float infinity).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoherenceTime {
    Finite(f64),
    NoDecoherence,
}

impl DecoherenceTime {
    pub fn finite(&self) -> Option<f64> {
        match self {
            DecoherenceTime::Finite(t) => Some(*t),
            DecoherenceTime::NoDecoherence => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongtimeRate {
    /// 16 gamma lam^2 / (omega_rc^2 beta); Gamma(t) -> -rate * t.
    pub rate: f64,
    /// beta omega_rc^2 / (16 gamma lam^2), or no decoherence at lam = 0.
    pub tau_d: DecoherenceTime,
}

/// Long-time decay rate of the decoherence function and its timescale.
pub fn longtime_rate(p: &BrownianParams, beta: f64) -> LongtimeRate {
    assert!(beta > 0.0, "beta must be positive");
    let w2 = p.omega_rc() * p.omega_rc();
    let rate = 16.0 * p.gamma() * p.lam() * p.lam() / (w2 * beta);
    let tau_d = if rate > 0.0 {
        DecoherenceTime::Finite(1.0 / rate)
    } else {
        DecoherenceTime::NoDecoherence
    };
    LongtimeRate { rate, tau_d }
}

/// Born-Markov-Redfield coherence ratio `rho01(t)/rho01(0) =
/// exp(-i delta t) exp(-t/tau_d)`: a pure exponential, the Markovian
/// comparator for the dephasing model.
pub fn bmr_coherence(t: f64, delta: f64, p: &BrownianParams, beta: f64) -> Complex64 {
    let rate = longtime_rate(p, beta).rate;
    Complex64::from_polar((-rate * t).exp(), -delta * t)
}

/// Propagate a qubit state through the exact dephasing map: populations
/// are untouched, the coherence picks up `exp(gamma_t - i delta t)`.
/// Requires `gamma_t <= 0`.
pub fn exact_evolve(rho0: &QubitState, t: f64, delta: f64, gamma_t: f64) -> QubitState {
    debug_assert!(gamma_t <= 1e-12, "decoherence function must be nonpositive");
    let factor = Complex64::from_polar(gamma_t.exp(), -delta * t);
    QubitState {
        rho00: rho0.rho00,
        rho01: rho0.rho01 * factor,
        rho10: rho0.rho10 * factor.conj(),
        rho11: rho0.rho11,
    }
}

// ---------------------------------------------------------------------------
// Gauss-Kronrod 15-point rule (QUADPACK abscissae)
// ---------------------------------------------------------------------------

const XGK: [f64; 8] = [
    0.991455371120813,
    0.949107912342759,
    0.864864423359769,
    0.741531185599394,
    0.586087235467691,
    0.405845151377397,
    0.207784955007898,
    0.0,
];
const WGK: [f64; 8] = [
    0.022935322010529,
    0.063092092629979,
    0.104790010322250,
    0.140653259715525,
    0.169004726639267,
    0.190350578064785,
    0.204432940075298,
    0.209482141084728,
];
const WG: [f64; 4] = [
    0.129484966168870,
    0.279705391489277,
    0.381830050505119,
    0.417959183673469,
];

/// 15-point Kronrod value with embedded 7-point Gauss error estimate.
fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut resk = WGK[7] * fc;
    let mut resg = WG[3] * fc;
    let mut resabs = resk.abs();
    let mut fv = [0.0f64; 15];
    fv[7] = fc;
    for j in 0..7 {
        let x = half * XGK[j];
        let f1 = f(center - x);
        let f2 = f(center + x);
        fv[j] = f1;
        fv[14 - j] = f2;
        let fsum = f1 + f2;
        resk += WGK[j] * fsum;
        resabs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            resg += WG[j / 2] * fsum;
        }
    }
    let mean = 0.5 * resk;
    let mut resasc = WGK[7] * (fc - mean).abs();
    for j in 0..7 {
        resasc += WGK[j] * ((fv[j] - mean).abs() + (fv[14 - j] - mean).abs());
    }
    let value = resk * half;
    let raw_err = ((resk - resg) * half).abs();
    let resasc = resasc * half.abs();
    let resabs = resabs * half.abs();
    // QUADPACK error rescaling
    let mut err = raw_err;
    if resasc != 0.0 && raw_err != 0.0 {
        let scale = (200.0 * raw_err / resasc).powf(1.5);
        err = if scale < 1.0 { resasc * scale } else { resasc };
    }
    if resabs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        err = err.max(50.0 * f64::EPSILON * resabs);
    }
    (value, err)
}

fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Total additional panels adaptive refinement may spend per region.
const DEFAULT_PANEL_BUDGET: usize = 40_000_000;
const REFINE_DEPTH: u32 = 48;

fn refine_panel<F: Fn(f64) -> f64 + Sync>(
    f: &F,
    a: f64,
    b: f64,
    value: f64,
    err: f64,
    allow: f64,
    depth: u32,
    budget: &mut usize,
) -> (f64, f64) {
    if err <= allow || depth == 0 || *budget < 2 {
        return (value, err);
    }
    *budget -= 2;
    let mid = 0.5 * (a + b);
    let (v1, e1) = gk15(f, a, mid);
    let (v2, e2) = gk15(f, mid, b);
    let (v1, e1) = refine_panel(f, a, mid, v1, e1, 0.5 * allow, depth - 1, budget);
    let (v2, e2) = refine_panel(f, mid, b, v2, e2, 0.5 * allow, depth - 1, budget);
    (v1 + v2, e1 + e2)
}

/// Composite adaptive Gauss-Kronrod integration of `f` over `[a, b]` with
/// base panels no wider than `base_width`.
fn integrate_region<F: Fn(f64) -> f64 + Sync>(
    f: &F,
    a: f64,
    b: f64,
    base_width: f64,
    rel_tol: f64,
    budget: usize,
) -> Result<(f64, f64), ExactError> {
    assert!(b > a && base_width > 0.0);
    let n_panels = (((b - a) / base_width).ceil() as usize).max(1);
    if n_panels > budget {
        return Err(ExactError::Budget {
            required: n_panels,
            budget,
        });
    }
    let width = (b - a) / n_panels as f64;
    let n_chunks = n_panels.min(64);

    let sweep = |refine: bool, allow: f64| -> (f64, f64) {
        let chunk_budget = (budget - n_panels) / n_chunks.max(1);
        let partials: Vec<(f64, f64)> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let lo = n_panels * c / n_chunks;
                let hi = n_panels * (c + 1) / n_chunks;
                let mut local_budget = chunk_budget;
                let mut vals = Vec::with_capacity(hi - lo);
                let mut errs = 0.0;
                for k in lo..hi {
                    let pa = a + width * k as f64;
                    let pb = if k + 1 == n_panels {
                        b
                    } else {
                        a + width * (k + 1) as f64
                    };
                    let (mut v, mut e) = gk15(f, pa, pb);
                    if refine && e > allow {
                        let (rv, re) =
                            refine_panel(f, pa, pb, v, e, allow, REFINE_DEPTH, &mut local_budget);
                        v = rv;
                        e = re;
                    }
                    vals.push(v);
                    errs += e;
                }
                (kahan_sum(vals.into_iter()), errs)
            })
            .collect();
        let value = kahan_sum(partials.iter().map(|p| p.0));
        let err = partials.iter().map(|p| p.1).sum();
        (value, err)
    };

    let (value, err) = sweep(false, 0.0);
    let target = rel_tol * value.abs();
    if err <= target || err < 1e-300 {
        return Ok((value, err));
    }
    // refinement pass: give each base panel a share of the error budget
    let allow = 0.5 * target / n_panels as f64;
    let (value, err) = sweep(true, allow.max(1e-300));
    if err <= rel_tol * value.abs() {
        Ok((value, err))
    } else {
        Err(ExactError::Convergence {
            requested: rel_tol,
            achieved: if value != 0.0 { err / value.abs() } else { err },
        })
    }
}

// ---------------------------------------------------------------------------
// The decoherence integrand
// ---------------------------------------------------------------------------

fn coth(x: f64) -> f64 {
    1.0 / x.tanh()
}

/// Below this frequency the integrand takes its analytic w -> 0 limit.
const OMEGA_EPS: f64 = 1e-8;

/// J(w) coth(beta w/2) / w^2 with the removable singularity at w -> 0
/// replaced by its limit 8 lam^2 gamma / (pi omega_rc^2 beta) / w^2 -> the
/// prefactor of (1 - cos)/w^2 stays integrable.
fn smooth_factor(omega: f64, p: &BrownianParams, beta: f64) -> f64 {
    use std::f64::consts::PI;
    if omega < OMEGA_EPS {
        let w2 = p.omega_rc() * p.omega_rc();
        8.0 * p.lam() * p.lam() * p.gamma() / (PI * w2 * beta) / (omega * omega)
    } else {
        brownian_j_raw(omega, p) * coth(0.5 * beta * omega) / (omega * omega)
    }
}

fn gamma_integrand(omega: f64, t: f64, p: &BrownianParams, beta: f64) -> f64 {
    let s = (0.5 * omega * t).sin();
    let osc = 2.0 * s * s; // 1 - cos(w t), cancellation-free
    smooth_factor(omega, p, beta) * osc
}

/// Upper bound on the neglected tail of the Gamma integral beyond `wmax`,
/// using J(w) <= (64/9) W^2 lam^2 g / (pi w^3) for w >= 2 W and
/// (1 - cos)/w^2 <= min(2/w^2, t^2/2).
fn tail_bound(wmax: f64, t: f64, p: &BrownianParams, beta: f64) -> f64 {
    use std::f64::consts::PI;
    debug_assert!(wmax >= 2.0 * p.omega_rc());
    let w2 = p.omega_rc() * p.omega_rc();
    let a = 64.0 / 9.0 * w2 * p.lam() * p.lam() * p.gamma() / PI * coth(0.5 * beta * wmax);
    let by_omega = 0.5 / wmax.powi(4);
    let by_time = 0.25 * t * t / (wmax * wmax);
    a * by_omega.min(by_time)
}

fn initial_omega_max(p: &BrownianParams) -> f64 {
    p.omega_rc() * 10.0f64.max(40.0 * p.gamma())
}

const TAIL_FRACTION: f64 = 1e-8;

fn validate_beta(beta: f64) -> Result<(), ExactError> {
    if beta.is_finite() && beta > 0.0 {
        Ok(())
    } else {
        Err(ExactError::Domain {
            name: "beta",
            value: beta,
            reason: "must be finite and > 0",
        })
    }
}

/// Exact decoherence function `Gamma(t)` by adaptive quadrature.
///
/// Panels are capped at `min(pi/(8t), gamma omega_rc/8)` so both the
/// `cos(w t)` oscillation and the Brownian peak are resolved; the upper
/// limit starts at `omega_rc * max(10, 40 gamma)` and doubles until the
/// analytic tail bound is below 1e-8 of the accumulated integral.
pub fn decoherence_exact(
    t: f64,
    p: &BrownianParams,
    beta: f64,
    tol: f64,
) -> Result<f64, ExactError> {
    validate_beta(beta)?;
    if !(t >= 0.0) {
        return Err(ExactError::Domain {
            name: "t",
            value: t,
            reason: "must be >= 0",
        });
    }
    if !(tol > 0.0 && tol <= 1e-2) {
        return Err(ExactError::Domain {
            name: "tol",
            value: tol,
            reason: "must lie in (0, 1e-2]",
        });
    }
    if t == 0.0 || p.lam() == 0.0 {
        return Ok(0.0);
    }

    let f = |w: f64| gamma_integrand(w, t, p, beta);
    let peak_width = p.gamma() * p.omega_rc() / 8.0;
    let osc_width = std::f64::consts::PI / (8.0 * t);
    let base_width = peak_width.min(osc_width);

    let mut wmax = initial_omega_max(p);
    let (mut value, mut err) = integrate_region(&f, 0.0, wmax, base_width, tol, DEFAULT_PANEL_BUDGET)?;
    for _ in 0..60 {
        if tail_bound(wmax, t, p, beta) <= TAIL_FRACTION * value.abs().max(1e-300) {
            break;
        }
        let (v2, e2) =
            integrate_region(&f, wmax, 2.0 * wmax, base_width, tol, DEFAULT_PANEL_BUDGET)?;
        value += v2;
        err += e2;
        wmax *= 2.0;
    }
    if err > tol * value.abs().max(1e-300) {
        return Err(ExactError::Convergence {
            requested: tol,
            achieved: err / value.abs().max(1e-300),
        });
    }
    Ok((-4.0 * value).min(0.0))
}

// ---------------------------------------------------------------------------
// Traces on a time grid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ExactTraceOptions {
    /// Relative quadrature tolerance for anchor points.
    pub tol: f64,
    /// Replace `t > 20 tau_d` samples by the linear asymptote anchored at
    /// the last quadratured point. Recorded in the trace, never silent.
    pub stitch: bool,
}

impl Default for ExactTraceOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            stitch: true,
        }
    }
}

/// Multiples of tau_d after which the trace generator may stitch on the
/// linear asymptote.
pub const STITCH_AFTER_TAU_D: f64 = 20.0;

/// Exact decoherence trace over a time grid.
///
/// Uniform grids share one set of quadrature nodes across all times and
/// advance `cos(w t)` by recurrence, which makes long dense traces cheap;
/// non-uniform grids fall back to per-point adaptive quadrature.
pub fn exact_trace(
    times: &[f64],
    p: &BrownianParams,
    beta: f64,
    opts: ExactTraceOptions,
) -> Result<DecoherenceTrace, ExactError> {
    validate_beta(beta)?;
    if times.is_empty() {
        return Err(ExactError::InvalidTrace("empty time grid".into()));
    }
    if !(times[0] >= 0.0) || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(ExactError::InvalidTrace(
            "times must be nonnegative and strictly increasing".into(),
        ));
    }
    if p.lam() == 0.0 {
        return DecoherenceTrace::new(times.to_vec(), vec![0.0; times.len()], TraceSource::Exact);
    }

    let lt = longtime_rate(p, beta);
    let stitch_threshold = match (opts.stitch, lt.tau_d) {
        (true, DecoherenceTime::Finite(tau)) => Some(STITCH_AFTER_TAU_D * tau),
        _ => None,
    };
    let head_len = match stitch_threshold {
        Some(ts) => times.partition_point(|&t| t <= ts),
        None => times.len(),
    };

    let mut gamma = compute_gammas(&times[..head_len], p, beta, opts.tol)?;

    let mut stitched_from = None;
    if head_len < times.len() {
        // anchor the asymptote at the last quadratured point
        let (t_a, g_a) = if head_len > 0 {
            (times[head_len - 1], gamma[head_len - 1])
        } else {
            let ts = stitch_threshold.expect("stitching requires a threshold");
            (ts, decoherence_exact(ts, p, beta, opts.tol)?)
        };
        for &t in &times[head_len..] {
            gamma.push(g_a - lt.rate * (t - t_a));
        }
        stitched_from = Some(t_a);
    }

    let mut trace = DecoherenceTrace::new(times.to_vec(), gamma, TraceSource::Exact)?;
    if let Some(t_a) = stitched_from {
        trace.mark_stitched(t_a);
    }
    Ok(trace)
}

fn is_uniform(times: &[f64]) -> Option<f64> {
    if times.len() < 2 {
        return None;
    }
    let dt = times[1] - times[0];
    let ok = times
        .windows(2)
        .all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-9 * dt.max(1e-12));
    ok.then_some(dt)
}

fn compute_gammas(
    times: &[f64],
    p: &BrownianParams,
    beta: f64,
    tol: f64,
) -> Result<Vec<f64>, ExactError> {
    if times.is_empty() {
        return Ok(Vec::new());
    }
    match is_uniform(times) {
        Some(dt) => trace_recurrence(times, dt, p, beta),
        None => times
            .iter()
            .map(|&t| decoherence_exact(t, p, beta, tol))
            .collect(),
    }
}

/// Quadrature nodes with weights folded into the smooth factor.
struct TraceNodes {
    omegas: Vec<f64>,
    factors: Vec<f64>, // w_i * J coth / w^2
}

fn build_trace_nodes(
    lo: f64,
    hi: f64,
    width: f64,
    p: &BrownianParams,
    beta: f64,
) -> Result<TraceNodes, ExactError> {
    let n_panels = (((hi - lo) / width).ceil() as usize).max(1);
    if n_panels > DEFAULT_PANEL_BUDGET / 4 {
        return Err(ExactError::Budget {
            required: n_panels,
            budget: DEFAULT_PANEL_BUDGET / 4,
        });
    }
    let w = (hi - lo) / n_panels as f64;
    let mut omegas = Vec::with_capacity(15 * n_panels);
    let mut factors = Vec::with_capacity(15 * n_panels);
    for k in 0..n_panels {
        let a = lo + w * k as f64;
        let b = if k + 1 == n_panels { hi } else { a + w };
        let center = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        for j in 0..8 {
            let x = half * XGK[j];
            let weight = WGK[j] * half;
            if j == 7 {
                omegas.push(center);
                factors.push(weight * smooth_factor(center, p, beta));
            } else {
                for node in [center - x, center + x] {
                    omegas.push(node);
                    factors.push(weight * smooth_factor(node, p, beta));
                }
            }
        }
    }
    Ok(TraceNodes { omegas, factors })
}

/// Reseed the cosine recurrence this often to stop error growth.
const RESEED_EVERY: usize = 4096;

/// Accumulate sum_i F_i (1 - cos(w_i t_k)) for every k on a uniform grid.
fn accumulate_oscillating(nodes: &TraceNodes, t0: f64, dt: f64, n_times: usize) -> Vec<f64> {
    let n_nodes = nodes.omegas.len();
    let n_chunks = n_nodes.clamp(1, 64);
    let partials: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = n_nodes * c / n_chunks;
            let hi = n_nodes * (c + 1) / n_chunks;
            let mut acc = vec![0.0f64; n_times];
            for i in lo..hi {
                let omega = nodes.omegas[i];
                let fac = nodes.factors[i];
                let step = 2.0 * (omega * dt).cos();
                let mut c_prev = (omega * (t0 - dt)).cos();
                let mut c_cur = (omega * t0).cos();
                for (k, slot) in acc.iter_mut().enumerate() {
                    if k > 0 {
                        if k % RESEED_EVERY == 0 {
                            let t = t0 + dt * k as f64;
                            c_prev = (omega * (t - dt)).cos();
                            c_cur = (omega * t).cos();
                        } else {
                            let c_next = step * c_cur - c_prev;
                            c_prev = c_cur;
                            c_cur = c_next;
                        }
                    }
                    *slot += fac * (1.0 - c_cur);
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0f64; n_times];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    total
}

fn trace_recurrence(
    times: &[f64],
    dt: f64,
    p: &BrownianParams,
    beta: f64,
) -> Result<Vec<f64>, ExactError> {
    let t_ref = *times.last().expect("nonempty");
    if t_ref == 0.0 {
        return Ok(vec![0.0]);
    }
    let peak_width = p.gamma() * p.omega_rc() / 8.0;
    let osc_width = std::f64::consts::PI / (2.0 * t_ref);
    let width = peak_width.min(osc_width);

    let mut wmax = initial_omega_max(p);
    let nodes = build_trace_nodes(0.0, wmax, width, p, beta)?;
    let mut acc = accumulate_oscillating(&nodes, times[0], dt, times.len());
    for _ in 0..60 {
        let worst_violation = times.iter().zip(&acc).any(|(&t, &v)| {
            t > 0.0 && tail_bound(wmax, t, p, beta) > TAIL_FRACTION * v.abs().max(1e-300)
        });
        if !worst_violation {
            break;
        }
        let extra = build_trace_nodes(wmax, 2.0 * wmax, width, p, beta)?;
        let extra_acc = accumulate_oscillating(&extra, times[0], dt, times.len());
        for (a, e) in acc.iter_mut().zip(extra_acc) {
            *a += e;
        }
        wmax *= 2.0;
    }
    Ok(acc.into_iter().map(|v| (-4.0 * v).min(0.0)).collect())
}
