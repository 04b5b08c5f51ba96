//! Redfield generator and time propagation for the extended system.
//!
//! In the energy basis of the supersystem the equation of motion is
//!
//! ```text
//! d rho / dt = L(rho)
//!            = -i [H, rho] + W rho S + S rho W^dag - S W rho - rho W^dag S,
//! ```
//!
//! with `S` the coupling operator and `W_jk = S_jk Gamma_rc(omega_jk)` the
//! rate-filtered operator built from the residual-bath half-Fourier
//! transform. The imaginary (Lamb-shift) part of the Redfield tensor is
//! dropped. No secular approximation is made: the full tensor couples
//! populations and coherences, which is what lets recoherences survive.
//!
//! The generator acts either through operator products (any dimension) or
//! through an explicitly materialized superoperator matrix (small systems;
//! used to cross-validate the index bookkeeping). Propagation is a fixed
//! step classical Runge-Kutta scheme, deterministic and bit-stable across
//! runs; trace drift is monitored as an accuracy diagnostic rather than
//! silently repaired.

use crate::exact::QubitState;
use crate::linalg::{self, CMat};
use crate::spectra::{brownian_rate, rc_rate, BathSpec, BrownianParams, SpectraError};
use crate::system::{
    partial_trace_matrix, ExtendedSystem, ModelKind, SupersystemState, SystemError,
};
use ndarray::{Array1, Array2};
use ndarray::linalg::kron;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RedfieldError {
    #[error(transparent)]
    Bath(#[from] SpectraError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("dense superoperator limited to dimension {limit}, system has {dim}")]
    Resource { dim: usize, limit: usize },
    #[error("dimension mismatch: generator dim {expected}, state dim {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("time grid must start at 0 and increase strictly")]
    BadTimes,
    #[error(
        "trace drift {drift:.3e} exceeds 1e-6 at step size {step:.3e}; reduce the step size"
    )]
    TraceDrift { drift: f64, step: f64 },
    #[error("initial coherence is zero; cannot form a coherence ratio")]
    ZeroCoherence,
}

/// Largest dimension for which the dense `(2M)^2 x (2M)^2` superoperator
/// may be materialized.
pub const DENSE_DIM_LIMIT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    DenseSuperoperator,
    OperatorProduct,
}

/// The Redfield generator for an extended system against its Ohmic
/// residual bath. Immutable and shareable across propagations.
#[derive(Debug, Clone)]
pub struct RedfieldGenerator {
    dim: usize,
    m_levels: usize,
    model: ModelKind,
    delta: f64,
    lam: f64,
    omega_rc: f64,
    bath: BathSpec,
    mode: GeneratorMode,
    bohr: Array2<f64>,
    s: CMat,
    w: CMat,
    w_dag: CMat,
    sw: CMat,
    wds: CMat,
    u: CMat,
    dense: Option<CMat>,
}

/// Build the generator; `bath` must be Ohmic.
pub fn build_generator(
    sys: &ExtendedSystem,
    bath: &BathSpec,
    mode: GeneratorMode,
) -> Result<RedfieldGenerator, RedfieldError> {
    let dim = sys.dim();
    if mode == GeneratorMode::DenseSuperoperator && dim > DENSE_DIM_LIMIT {
        return Err(RedfieldError::Resource {
            dim,
            limit: DENSE_DIM_LIMIT,
        });
    }
    let s = sys.s_energy().clone();
    let bohr = sys.bohr().clone();
    let mut w = CMat::zeros((dim, dim));
    for j in 0..dim {
        for k in 0..dim {
            let rate = rc_rate(bohr[(j, k)], bath)?;
            w[(j, k)] = s[(j, k)] * rate;
        }
    }
    let w_dag = linalg::dagger(&w);
    let sw = s.dot(&w);
    let wds = w_dag.dot(&s);
    let dense = match mode {
        GeneratorMode::DenseSuperoperator => Some(dense_superoperator(&bohr, &s, &w, &w_dag, &sw, &wds)),
        GeneratorMode::OperatorProduct => None,
    };
    Ok(RedfieldGenerator {
        dim,
        m_levels: sys.m_levels(),
        model: sys.model(),
        delta: sys.delta(),
        lam: sys.lam(),
        omega_rc: sys.omega_rc(),
        bath: *bath,
        mode,
        bohr,
        s,
        w,
        w_dag,
        sw,
        wds,
        u: sys.u().clone(),
        dense,
    })
}

/// Row-major vec(rho) convention: vec(A rho B) = (A kron B^T) vec(rho).
fn dense_superoperator(
    bohr: &Array2<f64>,
    s: &CMat,
    w: &CMat,
    w_dag: &CMat,
    sw: &CMat,
    wds: &CMat,
) -> CMat {
    let dim = s.nrows();
    let eye = linalg::identity(dim);
    let mut sup = kron(w, &s.t().to_owned());
    sup = sup + kron(s, &w.mapv(|z| z.conj()));
    sup = sup - kron(sw, &eye);
    sup = sup - kron(&eye, &wds.t().to_owned());
    let _ = w_dag; // w_dag enters through conj(w) and wds above
    for m in 0..dim {
        for n in 0..dim {
            let row = m * dim + n;
            sup[(row, row)] += Complex64::new(0.0, -bohr[(m, n)]);
        }
    }
    sup
}

impl RedfieldGenerator {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m_levels(&self) -> usize {
        self.m_levels
    }

    pub fn model(&self) -> ModelKind {
        self.model
    }

    pub fn mode(&self) -> GeneratorMode {
        self.mode
    }

    pub fn bath(&self) -> &BathSpec {
        &self.bath
    }

    /// The rate-filtered operator `W` in the energy basis.
    pub fn w_op(&self) -> &CMat {
        &self.w
    }

    /// Action of the generator on an arbitrary energy-basis matrix.
    pub fn apply(&self, rho: &CMat) -> CMat {
        let mut out = CMat::zeros((self.dim, self.dim));
        for m in 0..self.dim {
            for n in 0..self.dim {
                out[(m, n)] = Complex64::new(0.0, -self.bohr[(m, n)]) * rho[(m, n)];
            }
        }
        out = out + self.w.dot(rho).dot(&self.s);
        out = out + self.s.dot(rho).dot(&self.w_dag);
        out = out - self.sw.dot(rho);
        out = out - rho.dot(&self.wds);
        out
    }

    /// Same action specialized to Hermitian input: the dissipator collapses
    /// to `T + T^dag` with `T = (W rho) S - (S W) rho`, which halves the
    /// matrix products and keeps the state exactly Hermitian.
    pub fn apply_hermitian(&self, rho: &CMat) -> CMat {
        let t = self.w.dot(rho).dot(&self.s) - self.sw.dot(rho);
        let mut out = &t + &linalg::dagger(&t);
        for m in 0..self.dim {
            for n in 0..self.dim {
                out[(m, n)] += Complex64::new(0.0, -self.bohr[(m, n)]) * rho[(m, n)];
            }
        }
        out
    }

    /// Action through the materialized superoperator (dense mode only).
    pub fn apply_dense(&self, rho: &CMat) -> Option<CMat> {
        let sup = self.dense.as_ref()?;
        let v = Array1::from_iter(rho.iter().cloned());
        let out = sup.dot(&v);
        Some(
            Array2::from_shape_vec((self.dim, self.dim), out.to_vec())
                .expect("dim^2 elements"),
        )
    }

    /// Largest Bohr frequency, the fastest phase the integrator must track.
    pub fn max_bohr(&self) -> f64 {
        self.bohr.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
    }

    /// Default integration step: resolves the spin splitting, the RC
    /// frequency, the thermal time and the widest Bohr gap.
    pub fn default_step(&self) -> f64 {
        default_step_rule(self.delta, self.omega_rc, self.bath.beta(), self.max_bohr())
    }
}

fn default_step_rule(delta: f64, omega_rc: f64, beta: f64, max_bohr: f64) -> f64 {
    let mut h = 0.05 * beta;
    if delta.abs() > 0.0 {
        h = h.min(0.05 / delta.abs());
    }
    if omega_rc > 0.0 {
        h = h.min(0.05 / omega_rc);
    }
    if max_bohr > 0.0 {
        h = h.min(0.5 / max_bohr);
    }
    h
}

#[derive(Debug, Clone, Copy)]
pub struct PropagateOptions {
    /// Cap on the integration step; the default rule still applies on top.
    pub max_step: Option<f64>,
    /// Renormalize the trace after every step. Off by default: trace drift
    /// is a diagnostic and repairing it would mask integrator trouble.
    pub renormalize: bool,
    /// Record the minimum eigenvalue of each sampled state (an extra
    /// eigendecomposition per sample).
    pub diagnostics: bool,
}

impl Default for PropagateOptions {
    fn default() -> Self {
        Self {
            max_step: None,
            renormalize: false,
            diagnostics: false,
        }
    }
}

/// Integrator bookkeeping attached to every trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntegratorStats {
    pub method: String,
    pub step: f64,
    pub steps: usize,
    pub max_trace_drift: f64,
    pub max_hermiticity_error: f64,
    /// Smallest sampled-state eigenvalue seen, when diagnostics are on.
    pub min_eigenvalue: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SupersystemTrajectory {
    times: Vec<f64>,
    states: Vec<SupersystemState>,
    meta: TrajectoryMeta,
    stats: IntegratorStats,
}

impl SupersystemTrajectory {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[SupersystemState] {
        &self.states
    }

    pub fn stats(&self) -> &IntegratorStats {
        &self.stats
    }

    pub fn meta(&self) -> &TrajectoryMeta {
        &self.meta
    }
}

const TRACE_DRIFT_LIMIT: f64 = 1e-6;

/// Fixed-step RK4 walk over the sample grid; `on_sample` sees every
/// requested grid point in the energy basis.
fn rk4_walk<F, G, E>(
    apply: F,
    rho0: &CMat,
    times: &[f64],
    h_max: f64,
    renormalize: bool,
    mut on_sample: G,
) -> Result<(usize, f64), E>
where
    F: Fn(&CMat) -> CMat,
    G: FnMut(usize, &CMat) -> Result<(), E>,
{
    let mut rho = rho0.clone();
    let mut steps = 0usize;
    let mut h_used = h_max;
    on_sample(0, &rho)?;
    let sixth = Complex64::new(1.0 / 6.0, 0.0);
    let third = Complex64::new(1.0 / 3.0, 0.0);
    for k in 1..times.len() {
        let span = times[k] - times[k - 1];
        let n_sub = (span / h_max).ceil().max(1.0) as usize;
        let h = span / n_sub as f64;
        h_used = h_used.min(h);
        let hc = Complex64::new(h, 0.0);
        let half = Complex64::new(0.5 * h, 0.0);
        for _ in 0..n_sub {
            let k1 = apply(&rho);
            let k2 = apply(&(&rho + &(&k1 * half)));
            let k3 = apply(&(&rho + &(&k2 * half)));
            let k4 = apply(&(&rho + &(&k3 * hc)));
            rho = rho
                + (k1 + k4) * (sixth * hc)
                + (k2 + k3) * (third * hc);
            if renormalize {
                let tr = linalg::mat_trace(&rho);
                if tr.norm() > 0.0 {
                    rho.mapv_inplace(|z| z / tr);
                }
            }
            steps += 1;
        }
        on_sample(k, &rho)?;
    }
    Ok((steps, h_used))
}

fn check_times(times: &[f64]) -> Result<(), RedfieldError> {
    if times.is_empty() || times[0] != 0.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(RedfieldError::BadTimes);
    }
    Ok(())
}

/// Propagate and record full supersystem states at the grid points.
pub fn propagate(
    gen: &RedfieldGenerator,
    rho0: &SupersystemState,
    times: &[f64],
    opts: &PropagateOptions,
) -> Result<SupersystemTrajectory, RedfieldError> {
    check_times(times)?;
    if rho0.dim() != gen.dim {
        return Err(RedfieldError::DimensionMismatch {
            expected: gen.dim,
            got: rho0.dim(),
        });
    }
    let h_max = gen.default_step().min(opts.max_step.unwrap_or(f64::INFINITY));
    let rho0_e = gen.to_energy(rho0.matrix());

    let mut states = Vec::with_capacity(times.len());
    let mut drift = 0.0f64;
    let mut herm = 0.0f64;
    let mut min_eig: Option<f64> = None;
    let apply = |r: &CMat| match gen.mode {
        GeneratorMode::OperatorProduct => gen.apply_hermitian(r),
        GeneratorMode::DenseSuperoperator => gen.apply_dense(r).expect("dense materialized"),
    };
    let (steps, h_used) = rk4_walk(
        apply,
        &rho0_e,
        times,
        h_max,
        opts.renormalize,
        |_, rho_e| -> Result<(), RedfieldError> {
            let tr = linalg::mat_trace(rho_e);
            let d = (tr.re - 1.0).abs().max(tr.im.abs());
            drift = drift.max(d);
            if d > TRACE_DRIFT_LIMIT {
                return Err(RedfieldError::TraceDrift { drift: d, step: h_max });
            }
            let site = gen.to_site(rho_e);
            herm = herm.max(linalg::hermiticity_error(&site));
            if opts.diagnostics {
                let lo = linalg::min_eigenvalue(&site).map_err(SystemError::Eigensolver)?;
                min_eig = Some(min_eig.map_or(lo, |m: f64| m.min(lo)));
            }
            states.push(SupersystemState::from_matrix_unchecked(site));
            Ok(())
        },
    )?;

    Ok(SupersystemTrajectory {
        times: times.to_vec(),
        states,
        meta: gen.trajectory_meta(Some(h_used)),
        stats: IntegratorStats {
            method: "rk4".into(),
            step: h_used,
            steps,
            max_trace_drift: drift,
            max_hermiticity_error: herm,
            min_eigenvalue: min_eig,
        },
    })
}

/// Propagate recording only the reduced spin states; memory stays flat no
/// matter how fine the grid, which is what the long strong-coupling runs
/// need.
pub fn propagate_reduced(
    gen: &RedfieldGenerator,
    rho0: &SupersystemState,
    times: &[f64],
    opts: &PropagateOptions,
) -> Result<SpinTrajectory, RedfieldError> {
    check_times(times)?;
    if rho0.dim() != gen.dim {
        return Err(RedfieldError::DimensionMismatch {
            expected: gen.dim,
            got: rho0.dim(),
        });
    }
    let h_max = gen.default_step().min(opts.max_step.unwrap_or(f64::INFINITY));
    let rho0_e = gen.to_energy(rho0.matrix());

    let mut spins = Vec::with_capacity(times.len());
    let mut drift = 0.0f64;
    let mut min_eig: Option<f64> = None;
    let apply = |r: &CMat| match gen.mode {
        GeneratorMode::OperatorProduct => gen.apply_hermitian(r),
        GeneratorMode::DenseSuperoperator => gen.apply_dense(r).expect("dense materialized"),
    };
    let (steps, h_used) = rk4_walk(
        apply,
        &rho0_e,
        times,
        h_max,
        opts.renormalize,
        |_, rho_e| -> Result<(), RedfieldError> {
            let tr = linalg::mat_trace(rho_e);
            let d = (tr.re - 1.0).abs().max(tr.im.abs());
            drift = drift.max(d);
            if d > TRACE_DRIFT_LIMIT {
                return Err(RedfieldError::TraceDrift { drift: d, step: h_max });
            }
            let site = gen.to_site(rho_e);
            if opts.diagnostics {
                let lo = linalg::min_eigenvalue(&site).map_err(SystemError::Eigensolver)?;
                min_eig = Some(min_eig.map_or(lo, |m: f64| m.min(lo)));
            }
            spins.push(partial_trace_matrix(&site, gen.m_levels)?);
            Ok(())
        },
    )?;

    let stats = IntegratorStats {
        method: "rk4".into(),
        step: h_used,
        steps,
        max_trace_drift: drift,
        max_hermiticity_error: 0.0,
        min_eigenvalue: min_eig,
    };
    Ok(SpinTrajectory::new(
        times.to_vec(),
        spins,
        gen.trajectory_meta(Some(h_used)),
        Some(stats),
    ))
}

impl RedfieldGenerator {
    fn to_energy(&self, site: &CMat) -> CMat {
        linalg::dagger(&self.u).dot(site).dot(&self.u)
    }

    fn to_site(&self, energy: &CMat) -> CMat {
        self.u.dot(energy).dot(&linalg::dagger(&self.u))
    }

    fn trajectory_meta(&self, step: Option<f64>) -> TrajectoryMeta {
        let (gamma, cutoff) = match self.bath.as_ohmic() {
            Ok(p) => (p.gamma(), Some(p.cutoff())),
            Err(_) => (0.0, None),
        };
        TrajectoryMeta {
            model: self.model,
            method: "rc_qme".into(),
            delta: self.delta,
            lam: self.lam,
            gamma,
            omega_rc: self.omega_rc,
            cutoff,
            beta: self.bath.beta(),
            m_levels: Some(self.m_levels),
            step,
            integrator: "rk4".into(),
        }
    }
}

/// Trace out the RC at every recorded point of a full trajectory.
pub fn reduced_trajectory(traj: &SupersystemTrajectory) -> Result<SpinTrajectory, RedfieldError> {
    let m = traj
        .meta
        .m_levels
        .unwrap_or_else(|| traj.states.first().map_or(1, |s| s.dim() / 2));
    let spins = traj
        .states
        .iter()
        .map(|s| partial_trace_rc(s, m))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SpinTrajectory::new(
        traj.times.clone(),
        spins,
        traj.meta.clone(),
        Some(traj.stats.clone()),
    ))
}

use crate::system::partial_trace_rc;

// ---------------------------------------------------------------------------
// Spin trajectories
// ---------------------------------------------------------------------------

/// Provenance carried by every trajectory and embedded in its CSV header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub model: ModelKind,
    pub method: String,
    pub delta: f64,
    pub lam: f64,
    pub gamma: f64,
    pub omega_rc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<f64>,
    pub beta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_levels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    pub integrator: String,
}

/// Time series of reduced 2x2 spin states with derived observables.
#[derive(Debug, Clone)]
pub struct SpinTrajectory {
    times: Vec<f64>,
    states: Vec<QubitState>,
    sigma_z: Vec<f64>,
    abs_coherence: Vec<f64>,
    meta: TrajectoryMeta,
    stats: Option<IntegratorStats>,
}

impl SpinTrajectory {
    pub fn new(
        times: Vec<f64>,
        states: Vec<QubitState>,
        meta: TrajectoryMeta,
        stats: Option<IntegratorStats>,
    ) -> Self {
        let sigma_z = states.iter().map(|s| s.sigma_z()).collect();
        let abs_coherence = states.iter().map(|s| s.coherence().norm()).collect();
        Self {
            times,
            states,
            sigma_z,
            abs_coherence,
            meta,
            stats,
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[QubitState] {
        &self.states
    }

    pub fn sigma_z(&self) -> &[f64] {
        &self.sigma_z
    }

    pub fn abs_coherence(&self) -> &[f64] {
        &self.abs_coherence
    }

    pub fn meta(&self) -> &TrajectoryMeta {
        &self.meta
    }

    pub fn stats(&self) -> Option<&IntegratorStats> {
        self.stats.as_ref()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// CSV: `#` header with the full provenance, then one row per sample.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "# model = {}", self.meta.model.tag())?;
        writeln!(w, "# method = {}", self.meta.method)?;
        writeln!(w, "# delta = {}", self.meta.delta)?;
        writeln!(w, "# lambda = {}", self.meta.lam)?;
        writeln!(w, "# gamma = {}", self.meta.gamma)?;
        writeln!(w, "# omega_rc = {}", self.meta.omega_rc)?;
        if let Some(c) = self.meta.cutoff {
            writeln!(w, "# cutoff = {c}")?;
        }
        writeln!(w, "# beta = {}", self.meta.beta)?;
        if let Some(m) = self.meta.m_levels {
            writeln!(w, "# m_levels = {m}")?;
        }
        if let Some(h) = self.meta.step {
            writeln!(w, "# step = {h}")?;
        }
        writeln!(w, "# integrator = {}", self.meta.integrator)?;
        writeln!(
            w,
            "time,re_rho00,im_rho00,re_rho01,im_rho01,re_rho10,im_rho10,re_rho11,im_rho11,abs_coherence,sigma_z"
        )?;
        for (k, t) in self.times.iter().enumerate() {
            let s = &self.states[k];
            writeln!(
                w,
                "{t},{},{},{},{},{},{},{},{},{},{}",
                s.rho00.re,
                s.rho00.im,
                s.rho01.re,
                s.rho01.im,
                s.rho10.re,
                s.rho10.im,
                s.rho11.re,
                s.rho11.im,
                self.abs_coherence[k],
                self.sigma_z[k]
            )?;
        }
        Ok(())
    }

    /// Parse a trajectory CSV produced by [`SpinTrajectory::write_csv`].
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, String> {
        let mut meta_map = std::collections::BTreeMap::new();
        let mut times = Vec::new();
        let mut states = Vec::new();
        let mut saw_header = false;
        for line in r.lines() {
            let line = line.map_err(|e| e.to_string())?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    meta_map.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            if !saw_header {
                if !line.starts_with("time,") {
                    return Err(format!("unexpected column header: {line}"));
                }
                saw_header = true;
                continue;
            }
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| f.parse::<f64>().map_err(|e| format!("bad field {f}: {e}")))
                .collect::<Result<_, _>>()?;
            if fields.len() < 9 {
                return Err(format!("expected >= 9 columns, got {}", fields.len()));
            }
            times.push(fields[0]);
            states.push(
                QubitState::from_elements(
                    Complex64::new(fields[1], fields[2]),
                    Complex64::new(fields[3], fields[4]),
                    Complex64::new(fields[5], fields[6]),
                    Complex64::new(fields[7], fields[8]),
                )
                .map_err(|e| e.to_string())?,
            );
        }
        let get = |k: &str| meta_map.get(k).cloned();
        let parse_f =
            |k: &str| -> Result<f64, String> { get(k).ok_or(format!("missing # {k}"))?.parse().map_err(|e| format!("{k}: {e}")) };
        let model = match get("model").as_deref() {
            Some("pure_dephasing") => ModelKind::PureDephasing,
            Some("spin_boson") => ModelKind::SpinBoson,
            other => return Err(format!("missing or unknown model: {other:?}")),
        };
        let meta = TrajectoryMeta {
            model,
            method: get("method").unwrap_or_else(|| "unknown".into()),
            delta: parse_f("delta")?,
            lam: parse_f("lambda")?,
            gamma: parse_f("gamma")?,
            omega_rc: parse_f("omega_rc")?,
            cutoff: get("cutoff").and_then(|v| v.parse().ok()),
            beta: parse_f("beta")?,
            m_levels: get("m_levels").and_then(|v| v.parse().ok()),
            step: get("step").and_then(|v| v.parse().ok()),
            integrator: get("integrator").unwrap_or_else(|| "unknown".into()),
        };
        Ok(SpinTrajectory::new(times, states, meta, None))
    }
}

// ---------------------------------------------------------------------------
// Born-Markov-Redfield comparator on the unmapped qubit
// ---------------------------------------------------------------------------

/// BMR trajectory of the bare qubit against the Brownian bath.
///
/// The dephasing path is the analytic exponential; the spin-boson path
/// integrates the 2x2 Redfield equation with rates evaluated from the
/// Brownian density at the qubit Bohr frequencies.
pub fn bmr_qubit_trajectory(
    model: ModelKind,
    delta: f64,
    p: &BrownianParams,
    beta: f64,
    rho0: &QubitState,
    times: &[f64],
    opts: &PropagateOptions,
) -> Result<SpinTrajectory, RedfieldError> {
    check_times(times)?;
    let bath = BathSpec::brownian(beta, *p)?;
    let meta = TrajectoryMeta {
        model,
        method: "bmr".into(),
        delta,
        lam: p.lam(),
        gamma: p.gamma(),
        omega_rc: p.omega_rc(),
        cutoff: None,
        beta,
        m_levels: None,
        step: None,
        integrator: match model {
            ModelKind::PureDephasing => "analytic".into(),
            ModelKind::SpinBoson => "rk4".into(),
        },
    };
    match model {
        ModelKind::PureDephasing => {
            let rate = crate::exact::longtime_rate(p, beta).rate;
            let states = times
                .iter()
                .map(|&t| {
                    let factor = Complex64::from_polar((-rate * t).exp(), -delta * t);
                    QubitState {
                        rho00: rho0.rho00,
                        rho01: rho0.rho01 * factor,
                        rho10: rho0.rho10 * factor.conj(),
                        rho11: rho0.rho11,
                    }
                })
                .collect();
            Ok(SpinTrajectory::new(times.to_vec(), states, meta, None))
        }
        ModelKind::SpinBoson => {
            let w01 = brownian_rate(delta, &bath)?;
            let w10 = brownian_rate(-delta, &bath)?;
            bmr_numeric(delta, sigma_x2(), [w01, w10], rho0, times, opts, meta)
        }
    }
}

/// Numerically integrated 2x2 dephasing Redfield equation. Kept separate
/// from the analytic path so the two can be checked against each other.
pub fn bmr_dephasing_numeric(
    delta: f64,
    p: &BrownianParams,
    beta: f64,
    rho0: &QubitState,
    times: &[f64],
    opts: &PropagateOptions,
) -> Result<SpinTrajectory, RedfieldError> {
    check_times(times)?;
    let bath = BathSpec::brownian(beta, *p)?;
    let w0 = brownian_rate(0.0, &bath)?;
    let meta = TrajectoryMeta {
        model: ModelKind::PureDephasing,
        method: "bmr".into(),
        delta,
        lam: p.lam(),
        gamma: p.gamma(),
        omega_rc: p.omega_rc(),
        cutoff: None,
        beta,
        m_levels: None,
        step: None,
        integrator: "rk4".into(),
    };
    // S = sigma_z is diagonal: W = diag(rate(0), -rate(0))
    bmr_numeric(delta, sigma_z2(), [w0, w0], rho0, times, opts, meta)
}

fn sigma_z2() -> CMat {
    let mut m = CMat::zeros((2, 2));
    m[(0, 0)] = Complex64::new(1.0, 0.0);
    m[(1, 1)] = Complex64::new(-1.0, 0.0);
    m
}

fn sigma_x2() -> CMat {
    let mut m = CMat::zeros((2, 2));
    m[(0, 1)] = Complex64::new(1.0, 0.0);
    m[(1, 0)] = Complex64::new(1.0, 0.0);
    m
}

fn bmr_numeric(
    delta: f64,
    s: CMat,
    rates: [f64; 2],
    rho0: &QubitState,
    times: &[f64],
    opts: &PropagateOptions,
    mut meta: TrajectoryMeta,
) -> Result<SpinTrajectory, RedfieldError> {
    // W_jk = S_jk * rate(omega_jk) on the diagonal basis of H = delta/2 sigma_z
    let mut w = CMat::zeros((2, 2));
    if s[(0, 1)].norm() > 0.0 {
        w[(0, 1)] = s[(0, 1)] * rates[0];
        w[(1, 0)] = s[(1, 0)] * rates[1];
    } else {
        w[(0, 0)] = s[(0, 0)] * rates[0];
        w[(1, 1)] = s[(1, 1)] * rates[1];
    }
    let w_dag = linalg::dagger(&w);
    let sw = s.dot(&w);
    let wds = w_dag.dot(&s);
    let bohr = [[0.0, delta], [-delta, 0.0]];
    let apply = |rho: &CMat| -> CMat {
        let mut out = w.dot(rho).dot(&s) + s.dot(rho).dot(&w_dag) - sw.dot(rho) - rho.dot(&wds);
        for m in 0..2 {
            for n in 0..2 {
                out[(m, n)] += Complex64::new(0.0, -bohr[m][n]) * rho[(m, n)];
            }
        }
        out
    };

    let h_default = default_step_rule(delta, f64::INFINITY, meta.beta, delta.abs());
    let h_max = h_default.min(opts.max_step.unwrap_or(f64::INFINITY));
    let rho0_m = Array2::from_shape_vec(
        (2, 2),
        vec![rho0.rho00, rho0.rho01, rho0.rho10, rho0.rho11],
    )
    .expect("2x2");

    let mut states = Vec::with_capacity(times.len());
    let (steps, h_used) = rk4_walk(
        apply,
        &rho0_m,
        times,
        h_max,
        opts.renormalize,
        |_, rho| -> Result<(), RedfieldError> {
            let tr = linalg::mat_trace(rho);
            let d = (tr.re - 1.0).abs().max(tr.im.abs());
            if d > TRACE_DRIFT_LIMIT {
                return Err(RedfieldError::TraceDrift { drift: d, step: h_max });
            }
            states.push(
                QubitState::from_elements(rho[(0, 0)], rho[(0, 1)], rho[(1, 0)], rho[(1, 1)])
                    .map_err(|e| SystemError::InvalidState(e.to_string()))?,
            );
            Ok(())
        },
    )?;
    meta.step = Some(h_used);
    let stats = IntegratorStats {
        method: "rk4".into(),
        step: h_used,
        steps,
        max_trace_drift: 0.0,
        max_hermiticity_error: 0.0,
        min_eigenvalue: None,
    };
    Ok(SpinTrajectory::new(times.to_vec(), states, meta, Some(stats)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;
    use crate::system::{
        build_extended, default_initial_spin, embed_initial, thermal_rc_state,
    };
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn ohmic_bath(beta: f64, gamma: f64) -> BathSpec {
        BathSpec::ohmic(beta, gamma, 1000.0 * PI).unwrap()
    }

    struct Lcg(u64);

    impl Lcg {
        fn next_f64(&mut self) -> f64 {
            self.0 = self
                .0
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (self.0 >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        }

        fn matrix(&mut self, dim: usize) -> CMat {
            CMat::from_shape_fn((dim, dim), |_| {
                Complex64::new(self.next_f64(), self.next_f64())
            })
        }

        fn hermitian(&mut self, dim: usize) -> CMat {
            let a = self.matrix(dim);
            let h = &a + &linalg::dagger(&a);
            // unit trace so TraceDrift-style checks stay meaningful
            let tr = linalg::mat_trace(&h);
            let dimc = Complex64::new(dim as f64, 0.0);
            h - linalg::identity(dim) * ((tr - Complex64::new(1.0, 0.0)) / dimc)
        }
    }

    #[test]
    fn zero_gamma_is_unitary() {
        let sys = build_extended(ModelKind::PureDephasing, 1.0, 0.7, 3.0, 4).unwrap();
        let bath = ohmic_bath(2.0, 0.0);
        let gen = build_generator(&sys, &bath, GeneratorMode::OperatorProduct).unwrap();
        let mut rng = Lcg(7);
        for _ in 0..10 {
            let rho = rng.hermitian(8);
            let lrho = gen.apply(&rho);
            // -i [H, rho] in the energy basis is -i omega_mn rho_mn
            let mut expected = CMat::zeros((8, 8));
            for m in 0..8 {
                for n in 0..8 {
                    expected[(m, n)] =
                        Complex64::new(0.0, -(sys.eigvals()[m] - sys.eigvals()[n])) * rho[(m, n)];
                }
            }
            assert!(linalg::max_abs_diff(&lrho, &expected) < 1e-13);
        }
    }

    #[test]
    fn trace_annihilating_on_random_states() {
        let sys = build_extended(ModelKind::SpinBoson, 1.0, 0.9, 3.0, 5).unwrap();
        let gen = build_generator(&sys, &ohmic_bath(2.0, 0.15), GeneratorMode::OperatorProduct)
            .unwrap();
        let mut rng = Lcg(42);
        for _ in 0..100 {
            let rho = rng.hermitian(10);
            let l = gen.apply(&rho);
            assert!(linalg::mat_trace(&l).norm() < 1e-10 * max_abs(&rho).max(1.0));
        }
    }

    #[test]
    fn hermiticity_commutes_with_generator() {
        let sys = build_extended(ModelKind::SpinBoson, 1.0, 0.4, 3.0, 4).unwrap();
        let gen =
            build_generator(&sys, &ohmic_bath(2.0, 0.1), GeneratorMode::OperatorProduct).unwrap();
        let mut rng = Lcg(3);
        for _ in 0..20 {
            let rho = rng.matrix(8);
            let a = linalg::dagger(&gen.apply(&rho));
            let b = gen.apply(&linalg::dagger(&rho));
            assert!(linalg::max_abs_diff(&a, &b) < 1e-12);
        }
    }

    #[test]
    fn hermitian_fast_path_matches_general() {
        let sys = build_extended(ModelKind::PureDephasing, 1.0, 1.2, 3.0, 6).unwrap();
        let gen =
            build_generator(&sys, &ohmic_bath(2.0, 0.2), GeneratorMode::OperatorProduct).unwrap();
        let mut rng = Lcg(11);
        for _ in 0..20 {
            let rho = rng.hermitian(12);
            let a = gen.apply(&rho);
            let b = gen.apply_hermitian(&rho);
            assert!(linalg::max_abs_diff(&a, &b) < 1e-12);
        }
    }

    #[test]
    fn dense_matches_operator_product() {
        for model in [ModelKind::PureDephasing, ModelKind::SpinBoson] {
            let sys = build_extended(model, 1.0, 0.8, 3.0, 8).unwrap();
            let bath = ohmic_bath(2.0, 0.1);
            let op = build_generator(&sys, &bath, GeneratorMode::OperatorProduct).unwrap();
            let dense = build_generator(&sys, &bath, GeneratorMode::DenseSuperoperator).unwrap();
            let mut rng = Lcg(99);
            for _ in 0..50 {
                let rho = rng.hermitian(16);
                let a = op.apply(&rho);
                let b = dense.apply_dense(&rho).unwrap();
                assert!(linalg::max_abs_diff(&a, &b) < 1e-12);
            }
        }
    }

    #[test]
    fn dense_mode_resource_limit() {
        let sys = build_extended(ModelKind::PureDephasing, 1.0, 1.0, 3.0, 33).unwrap();
        let err = build_generator(&sys, &ohmic_bath(2.0, 0.1), GeneratorMode::DenseSuperoperator);
        assert!(matches!(err, Err(RedfieldError::Resource { dim: 66, .. })));
    }

    #[test]
    fn brownian_bath_rejected() {
        let sys = build_extended(ModelKind::PureDephasing, 1.0, 1.0, 3.0, 3).unwrap();
        let p = BrownianParams::new(3.0, 0.1, 1.0).unwrap();
        let bath = BathSpec::brownian(2.0, p).unwrap();
        assert!(matches!(
            build_generator(&sys, &bath, GeneratorMode::OperatorProduct),
            Err(RedfieldError::Bath(SpectraError::NotOhmic))
        ));
    }

    fn dephasing_setup(lam: f64, gamma: f64, m: usize) -> (RedfieldGenerator, SupersystemState) {
        let sys = build_extended(ModelKind::PureDephasing, 1.0, lam, 3.0, m).unwrap();
        let gen = build_generator(&sys, &ohmic_bath(2.0, gamma), GeneratorMode::OperatorProduct)
            .unwrap();
        let rc = thermal_rc_state(2.0, 3.0, m).unwrap();
        let rho0 = embed_initial(&default_initial_spin(ModelKind::PureDephasing), &rc).unwrap();
        (gen, rho0)
    }

    #[test]
    fn propagation_starts_at_rho0() {
        let (gen, rho0) = dephasing_setup(0.5, 0.1, 4);
        let times = vec![0.0, 0.5, 1.0];
        let traj = propagate(&gen, &rho0, &times, &PropagateOptions::default()).unwrap();
        assert!(linalg::max_abs_diff(traj.states()[0].matrix(), rho0.matrix()) < 1e-12);
    }

    #[test]
    fn unitary_propagation_conserves_purity_and_populations() {
        let (gen, rho0) = dephasing_setup(0.5, 0.0, 6);
        let times: Vec<f64> = (0..=200).map(|k| k as f64 * 0.05).collect();
        let traj = propagate(&gen, &rho0, &times, &PropagateOptions::default()).unwrap();
        let purity0 = rho0.matrix().dot(rho0.matrix()).diag().sum().re;
        for state in traj.states() {
            let m = state.matrix();
            let purity = m.dot(m).diag().sum().re;
            assert!((purity - purity0).abs() < 1e-8);
        }
        let spin = reduced_trajectory(&traj).unwrap();
        for s in spin.states() {
            assert!((s.rho00.re - 0.5).abs() < 1e-8);
            assert!((s.rho11.re - 0.5).abs() < 1e-8);
        }
    }

    #[test]
    fn trace_hermiticity_and_sigma_z_conservation() {
        let (gen, rho0) = dephasing_setup(1.0, 0.1, 8);
        let times: Vec<f64> = (0..=300).map(|k| k as f64 * 0.1).collect();
        let traj = propagate(&gen, &rho0, &times, &PropagateOptions::default()).unwrap();
        assert!(traj.stats().max_trace_drift < 1e-8);
        assert!(traj.stats().max_hermiticity_error < 1e-8);
        let spin = reduced_trajectory(&traj).unwrap();
        for z in spin.sigma_z() {
            assert!(z.abs() < 1e-8, "sigma_z drifted to {z}");
        }
    }

    #[test]
    fn step_halving_changes_little() {
        // weak-coupling regime: lam=0.1, gamma=0.1, M=8
        let (gen, rho0) = dephasing_setup(0.1, 0.1, 8);
        let times: Vec<f64> = (0..=60).map(|k| k as f64 * 0.5).collect();
        let opts = PropagateOptions::default();
        let full = propagate_reduced(&gen, &rho0, &times, &opts).unwrap();
        let halved = propagate_reduced(
            &gen,
            &rho0,
            &times,
            &PropagateOptions {
                max_step: Some(0.5 * gen.default_step()),
                ..opts
            },
        )
        .unwrap();
        let mut worst = 0.0f64;
        for (a, b) in full.states().iter().zip(halved.states()) {
            worst = worst
                .max((a.rho01 - b.rho01).norm())
                .max((a.rho00 - b.rho00).norm());
        }
        assert!(worst < 1e-7, "step halving moved entries by {worst:.3e}");
    }

    #[test]
    fn eigenbasis_gauge_invariance() {
        // Rerunning with eigencolumns rotated by arbitrary phases must not
        // change any observable.
        let sys = build_extended(ModelKind::PureDephasing, 1.0, 0.8, 3.0, 5).unwrap();
        let bath = ohmic_bath(2.0, 0.1);
        let gen_a = build_generator(&sys, &bath, GeneratorMode::OperatorProduct).unwrap();
        let phases: Vec<f64> = (0..sys.dim()).map(|k| 0.7 * k as f64 + 0.3).collect();
        let sys_b = sys.regauge(&phases);
        let gen_b = build_generator(&sys_b, &bath, GeneratorMode::OperatorProduct).unwrap();

        let rc = thermal_rc_state(2.0, 3.0, 5).unwrap();
        let rho0 = embed_initial(&default_initial_spin(ModelKind::PureDephasing), &rc).unwrap();
        let times: Vec<f64> = (0..=100).map(|k| k as f64 * 0.1).collect();
        let ta = propagate_reduced(&gen_a, &rho0, &times, &PropagateOptions::default()).unwrap();
        let tb = propagate_reduced(&gen_b, &rho0, &times, &PropagateOptions::default()).unwrap();
        for (a, b) in ta.states().iter().zip(tb.states()) {
            assert!((a.rho01 - b.rho01).norm() < 1e-10);
            assert!((a.rho00 - b.rho00).norm() < 1e-10);
        }
    }

    #[test]
    fn bad_grids_rejected() {
        let (gen, rho0) = dephasing_setup(0.5, 0.1, 3);
        assert!(matches!(
            propagate(&gen, &rho0, &[0.5, 1.0], &PropagateOptions::default()),
            Err(RedfieldError::BadTimes)
        ));
        assert!(matches!(
            propagate(&gen, &rho0, &[0.0, 1.0, 1.0], &PropagateOptions::default()),
            Err(RedfieldError::BadTimes)
        ));
    }

    #[test]
    fn bmr_dephasing_closed_form() {
        let p = BrownianParams::new(3.0, 0.1, 1.0).unwrap();
        let rho0 = QubitState::plus_state();
        let tau_d = crate::exact::longtime_rate(&p, 2.0)
            .tau_d
            .finite()
            .unwrap();
        let times = vec![0.0, 0.5 * tau_d, tau_d];
        let traj = bmr_qubit_trajectory(
            ModelKind::PureDephasing,
            1.0,
            &p,
            2.0,
            &rho0,
            &times,
            &PropagateOptions::default(),
        )
        .unwrap();
        let ratio = traj.abs_coherence()[2] / traj.abs_coherence()[0];
        assert_relative_eq!(ratio, (-1.0f64).exp(), max_relative = 1e-10);
        for s in traj.states() {
            assert!((s.rho00.re - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn bmr_numeric_dephasing_matches_analytic() {
        let p = BrownianParams::new(3.0, 0.1, 1.0).unwrap();
        let rho0 = QubitState::plus_state();
        let times: Vec<f64> = (0..=100).map(|k| k as f64 * 0.2).collect();
        let numeric = bmr_dephasing_numeric(
            1.0,
            &p,
            2.0,
            &rho0,
            &times,
            &PropagateOptions {
                max_step: Some(0.004),
                ..Default::default()
            },
        )
        .unwrap();
        for (k, &t) in times.iter().enumerate() {
            let expected = crate::exact::bmr_coherence(t, 1.0, &p, 2.0) * 0.5;
            let got = numeric.states()[k].rho01;
            assert!(
                (got - expected).norm() < 1e-8,
                "t={t}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn bmr_spin_boson_thermalizes() {
        let p = BrownianParams::new(3.0, 0.01, 1.0).unwrap();
        let beta = 2.0;
        let rho0 = QubitState::minus_state();
        let t_max = 1400.0;
        let times: Vec<f64> = (0..=700).map(|k| k as f64 * t_max / 700.0).collect();
        let traj = bmr_qubit_trajectory(
            ModelKind::SpinBoson,
            1.0,
            &p,
            beta,
            &rho0,
            &times,
            &PropagateOptions::default(),
        )
        .unwrap();
        let z_inf = *traj.sigma_z().last().unwrap();
        let expected = -(beta * 0.5f64).tanh(); // -tanh(beta delta / 2)
        assert_relative_eq!(z_inf, expected, epsilon = 1e-4);
        assert_relative_eq!(expected, -0.761594, max_relative = 1e-6);
        assert!(traj.sigma_z()[0].abs() < 1e-12);
    }

    #[test]
    fn spin_boson_stationary_state_annihilated() {
        let sys = build_extended(ModelKind::SpinBoson, 1.0, 0.5, 3.0, 6).unwrap();
        let bath = ohmic_bath(2.0, 0.1);
        let gen = build_generator(&sys, &bath, GeneratorMode::OperatorProduct).unwrap();
        let rc = thermal_rc_state(2.0, 3.0, 6).unwrap();
        let rho0 = embed_initial(&QubitState::minus_state(), &rc).unwrap();
        let times: Vec<f64> = (0..=350).map(|k| k as f64 * 2.0).collect();
        let traj = propagate(&gen, &rho0, &times, &PropagateOptions::default()).unwrap();
        let last = traj.states().last().unwrap();
        let residual = gen.apply_hermitian(&linalg::dagger(&gen.u).dot(last.matrix()).dot(&gen.u));
        assert!(
            max_abs(&residual) < 1e-6,
            "generator residual {:.3e}",
            max_abs(&residual)
        );
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let p = BrownianParams::new(3.0, 0.1, 0.5).unwrap();
        let times = vec![0.0, 1.0, 2.0];
        let traj = bmr_qubit_trajectory(
            ModelKind::PureDephasing,
            1.0,
            &p,
            2.0,
            &QubitState::plus_state(),
            &times,
            &PropagateOptions::default(),
        )
        .unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let parsed = SpinTrajectory::read_csv(&buf[..]).unwrap();
        assert_eq!(parsed.len(), 3);
        assert_eq!(parsed.meta().model, ModelKind::PureDephasing);
        assert_eq!(parsed.meta().lam, 0.5);
        for (a, b) in parsed.states().iter().zip(traj.states()) {
            assert!((a.rho01 - b.rho01).norm() < 1e-15);
        }
    }
}
