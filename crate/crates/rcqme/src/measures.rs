//! Non-Markovianity quantifiers.
//!
//! Both measures process the decoherence function of a run. Coherence
//! revivals show up as intervals `[a_j, b_j]` on which the monitored
//! signal increases; the trace-distance (BLP) measure sums
//! `exp(Gamma(b_j)) - exp(Gamma(a_j))` over them while the divisibility
//! (RHP) measure sums the bare increments `Gamma(b_j) - Gamma(a_j)`. A
//! Markovian evolution decays monotonically and both vanish.
//!
//! For pure dephasing the maximizing state pair of the trace-distance
//! measure is known to be orthogonal, which is what reduces the BLP
//! functional to the closed form above; no state-pair optimization is
//! performed here.

use crate::exact::{DecoherenceTrace, ExactError, QubitState, TraceSource};
use crate::redfield::SpinTrajectory;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("initial coherence is zero; decoherence function undefined")]
    ZeroInitialCoherence,
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("intervals do not belong to this trace")]
    ForeignIntervals,
    #[error(transparent)]
    Trace(#[from] ExactError),
}

/// Trace distance `D(rho1, rho2) = (1/2) sum |eps_i|` over the eigenvalues
/// of the Hermitian difference.
pub fn trace_distance(rho1: &QubitState, rho2: &QubitState) -> f64 {
    let da = rho1.rho00 - rho2.rho00;
    let db = rho1.rho11 - rho2.rho11;
    let dc = rho1.rho01 - rho2.rho01;
    // eigenvalues of [[a, c], [c*, b]] with a, b real
    let mean = 0.5 * (da.re + db.re);
    let disc = (0.25 * (da.re - db.re) * (da.re - db.re) + dc.norm_sqr()).sqrt();
    0.5 * ((mean + disc).abs() + (mean - disc).abs())
}

/// Floor below which coherence magnitudes are clamped before taking logs.
pub const COHERENCE_FLOOR: f64 = 1e-300;

/// Decoherence function from a trajectory: `Gamma(t) = ln |rho01(t)| -
/// ln |rho01(0)|`.
pub fn gamma_from_coherence(traj: &SpinTrajectory) -> Result<DecoherenceTrace, MeasureError> {
    let coh = traj.abs_coherence();
    if coh.is_empty() {
        return Err(MeasureError::TooFewSamples { needed: 1, got: 0 });
    }
    let c0 = coh[0];
    if c0 <= 0.0 {
        return Err(MeasureError::ZeroInitialCoherence);
    }
    let ln0 = c0.ln();
    let mut clamped = false;
    let gamma: Vec<f64> = coh
        .iter()
        .map(|&c| {
            let c = if c < COHERENCE_FLOOR {
                clamped = true;
                COHERENCE_FLOOR
            } else {
                c
            };
            c.ln() - ln0
        })
        .collect();
    let source = match traj.meta().method.as_str() {
        "bmr" => TraceSource::Bmr,
        "exact" => TraceSource::Exact,
        _ => TraceSource::RcQme,
    };
    let mut trace = DecoherenceTrace::new(traj.times().to_vec(), gamma, source)?;
    if clamped {
        trace.mark_clamped();
    }
    Ok(trace)
}

/// A maximal run of grid samples on which the signal increases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start_idx: usize,
    pub end_idx: usize,
    pub t_start: f64,
    pub t_end: f64,
}

/// Increasing intervals of a sampled signal, with the slope tolerance that
/// was used to detect them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonotoneIntervals {
    pub intervals: Vec<Interval>,
    pub tol: f64,
}

impl MonotoneIntervals {
    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }
}

/// Default slope tolerance: a small multiple of the signal scale per unit
/// time, enough to suppress integrator noise.
pub fn default_slope_tol(trace: &DecoherenceTrace) -> f64 {
    let scale = trace.gamma().iter().fold(0.0f64, |a, &g| a.max(g.abs()));
    1e-9 * scale.max(1e-30)
}

/// Detect the intervals on which the forward finite-difference slope
/// exceeds `tol`. Single-sample dips are bridged so one noisy point does
/// not split a physical recoherence in two. Endpoints lie on the grid.
pub fn increasing_intervals(
    trace: &DecoherenceTrace,
    tol: Option<f64>,
) -> Result<MonotoneIntervals, MeasureError> {
    let n = trace.len();
    if n < 3 {
        return Err(MeasureError::TooFewSamples { needed: 3, got: n });
    }
    let tol = tol.unwrap_or_else(|| default_slope_tol(trace));
    let t = trace.times();
    let g = trace.gamma();
    let rising: Vec<bool> = (0..n - 1)
        .map(|i| (g[i + 1] - g[i]) / (t[i + 1] - t[i]) > tol)
        .collect();
    // bridge single-sample gaps so one noisy point does not split a revival
    let mut bridged = rising.clone();
    for i in 1..n.saturating_sub(2) {
        if !rising[i] && rising[i - 1] && rising[i + 1] {
            bridged[i] = true;
        }
    }

    let collect = |flags: &[bool]| {
        let mut intervals = Vec::new();
        let mut start: Option<usize> = None;
        for (i, &r) in flags.iter().enumerate() {
            match (r, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    intervals.push((s, i));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            intervals.push((s, n - 1));
        }
        intervals
    };

    // a bridged dip must not turn an interval net-decreasing; if it does,
    // fall back to the unbridged runs inside it (each strictly increasing)
    let mut spans = Vec::new();
    for (s, e) in collect(&bridged) {
        if g[e] > g[s] {
            spans.push((s, e));
        } else {
            spans.extend(
                collect(&rising)
                    .into_iter()
                    .filter(|&(rs, re)| rs >= s && re <= e),
            );
        }
    }
    let intervals = spans
        .into_iter()
        .map(|(s, e)| Interval {
            start_idx: s,
            end_idx: e,
            t_start: t[s],
            t_end: t[e],
        })
        .collect();
    Ok(MonotoneIntervals { intervals, tol })
}

fn check_intervals(
    trace: &DecoherenceTrace,
    intervals: &MonotoneIntervals,
) -> Result<(), MeasureError> {
    let n = trace.len();
    for iv in &intervals.intervals {
        if iv.end_idx >= n
            || iv.start_idx >= iv.end_idx
            || trace.times()[iv.start_idx] != iv.t_start
            || trace.times()[iv.end_idx] != iv.t_end
        {
            return Err(MeasureError::ForeignIntervals);
        }
    }
    Ok(())
}

/// BLP measure: total increase of `exp(Gamma)` over the rising intervals.
pub fn blp_measure(
    trace: &DecoherenceTrace,
    intervals: &MonotoneIntervals,
) -> Result<f64, MeasureError> {
    check_intervals(trace, intervals)?;
    let g = trace.gamma();
    Ok(intervals
        .intervals
        .iter()
        .map(|iv| g[iv.end_idx].exp() - g[iv.start_idx].exp())
        .sum::<f64>()
        .max(0.0))
}

/// RHP measure: total increase of `Gamma` itself over the rising
/// intervals.
pub fn rhp_measure(
    trace: &DecoherenceTrace,
    intervals: &MonotoneIntervals,
) -> Result<f64, MeasureError> {
    check_intervals(trace, intervals)?;
    let g = trace.gamma();
    Ok(intervals
        .intervals
        .iter()
        .map(|iv| g[iv.end_idx] - g[iv.start_idx])
        .sum::<f64>()
        .max(0.0))
}

/// Full non-Markovianity report for one decoherence trace.
#[derive(Debug, Clone, Serialize)]
pub struct NonMarkovReport {
    pub n_blp: f64,
    pub n_rhp: f64,
    pub intervals: MonotoneIntervals,
    /// Final time of the processed trace.
    pub horizon: f64,
    pub source: TraceSource,
    pub clamped: bool,
    #[serde(skip)]
    pub trace: DecoherenceTrace,
}

/// Detect intervals and evaluate both measures on one trace.
pub fn analyze_trace(
    trace: &DecoherenceTrace,
    tol: Option<f64>,
) -> Result<NonMarkovReport, MeasureError> {
    let intervals = increasing_intervals(trace, tol)?;
    let n_blp = blp_measure(trace, &intervals)?;
    let n_rhp = rhp_measure(trace, &intervals)?;
    Ok(NonMarkovReport {
        n_blp,
        n_rhp,
        intervals,
        horizon: *trace.times().last().expect("nonempty"),
        source: trace.source(),
        clamped: trace.clamped(),
        trace: trace.clone(),
    })
}

/// True when the trailing `window_frac` of the trace decays at the
/// asymptotic Markovian rate to within `rel_tol`: the criterion for a run
/// to have outlived its recoherences.
pub fn slope_settled(
    trace: &DecoherenceTrace,
    asymptotic_rate: f64,
    window_frac: f64,
    rel_tol: f64,
) -> bool {
    let n = trace.len();
    if n < 8 || asymptotic_rate <= 0.0 {
        return false;
    }
    let start = ((n as f64) * (1.0 - window_frac)) as usize;
    let start = start.clamp(1, n - 2);
    let t = trace.times();
    let g = trace.gamma();
    (start..n - 1).all(|i| {
        let slope = (g[i + 1] - g[i]) / (t[i + 1] - t[i]);
        (slope + asymptotic_rate).abs() <= rel_tol * asymptotic_rate
    })
}
