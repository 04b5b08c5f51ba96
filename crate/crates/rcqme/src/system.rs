//! The truncated extended system: spin plus reaction coordinate.
//!
//! After the mapping the supersystem Hamiltonian on 2M levels is
//!
//! ```text
//! H_es = (delta/2) sigma_z (x) 1 + 1 (x) Omega (n + 1/2) + lam S_spin (x) (a + a^dag),
//! ```
//!
//! with `S_spin = sigma_z` for pure dephasing and `sigma_x` for the
//! spin-boson model; the residual bath couples through
//! `S_es = 1 (x) (a + a^dag)`. The quadratic counter-term is dropped at
//! construction; once the Redfield dissipator is derived its effect is
//! absorbed there.
//!
//! Basis ordering is spin-major: index `s*M + n` with spin `s` in {0, 1}
//! (0 is the upper level, `sigma_z = +1`) and oscillator level `n`.
//! Partial traces and serialized matrices rely on this ordering.

use crate::exact::QubitState;
use crate::linalg::{self, CMat, C_ONE, C_ZERO};
use ndarray::{Array1, Array2};
use ndarray::linalg::kron;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("m_levels must be at least 2, got {0}")]
    TooFewLevels(usize),
    #[error("invalid parameter {name}: {value}")]
    InvalidParam { name: &'static str, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("eigensolver failure: {0}")]
    Eigensolver(#[from] linalg::LinalgError),
    #[error("invalid density matrix: {0}")]
    InvalidState(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Spin couples through sigma_z: populations freeze, coherences decay.
    PureDephasing,
    /// Spin couples through sigma_x: dissipative and decoherence dynamics.
    SpinBoson,
}

impl ModelKind {
    pub fn tag(&self) -> &'static str {
        match self {
            ModelKind::PureDephasing => "pure_dephasing",
            ModelKind::SpinBoson => "spin_boson",
        }
    }
}

/// Diagonalized spin (x) RC supersystem.
#[derive(Debug, Clone)]
pub struct ExtendedSystem {
    model: ModelKind,
    delta: f64,
    lam: f64,
    omega_rc: f64,
    m_levels: usize,
    h_es: CMat,
    s_es: CMat,
    eigvals: Array1<f64>,
    u: CMat,
    s_energy: CMat,
    bohr: Array2<f64>,
}

impl ExtendedSystem {
    pub fn model(&self) -> ModelKind {
        self.model
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn lam(&self) -> f64 {
        self.lam
    }

    pub fn omega_rc(&self) -> f64 {
        self.omega_rc
    }

    pub fn m_levels(&self) -> usize {
        self.m_levels
    }

    pub fn dim(&self) -> usize {
        2 * self.m_levels
    }

    /// Hamiltonian in the site (spin-major product) basis.
    pub fn h_es(&self) -> &CMat {
        &self.h_es
    }

    /// Residual-bath coupling operator in the site basis.
    pub fn s_es(&self) -> &CMat {
        &self.s_es
    }

    /// Ascending eigenvalues.
    pub fn eigvals(&self) -> &Array1<f64> {
        &self.eigvals
    }

    /// Unitary with eigenvector columns: `U diag(E) U^dag = H_es`.
    pub fn u(&self) -> &CMat {
        &self.u
    }

    /// Coupling operator in the energy basis, `U^dag S U`.
    pub fn s_energy(&self) -> &CMat {
        &self.s_energy
    }

    /// Bohr frequencies `omega_mn = E_m - E_n`.
    pub fn bohr(&self) -> &Array2<f64> {
        &self.bohr
    }

    /// Site-basis matrix -> energy basis.
    pub fn to_energy_basis(&self, m: &CMat) -> CMat {
        linalg::dagger(&self.u).dot(m).dot(&self.u)
    }

    /// Energy-basis matrix -> site basis.
    pub fn to_site_basis(&self, m: &CMat) -> CMat {
        self.u.dot(m).dot(&linalg::dagger(&self.u))
    }

    /// Rotate every eigenvector column by an arbitrary phase. Physical
    /// results must not depend on this gauge; used to assert exactly that.
    pub(crate) fn regauge(&self, phases: &[f64]) -> Self {
        assert_eq!(phases.len(), self.dim());
        let mut u = self.u.clone();
        for (j, &phi) in phases.iter().enumerate() {
            let factor = Complex64::from_polar(1.0, phi);
            u.column_mut(j).mapv_inplace(|z| z * factor);
        }
        let s_energy = linalg::dagger(&u).dot(&self.s_es).dot(&u);
        Self {
            u,
            s_energy,
            ..self.clone()
        }
    }

    /// Row-major re/im dump of all matrices for cross-implementation
    /// diffing.
    pub fn to_debug_json(&self) -> serde_json::Value {
        fn dump(m: &CMat) -> Vec<Vec<[f64; 2]>> {
            m.rows()
                .into_iter()
                .map(|r| r.iter().map(|z| [z.re, z.im]).collect())
                .collect()
        }
        json!({
            "model": self.model.tag(),
            "delta": self.delta,
            "lam": self.lam,
            "omega_rc": self.omega_rc,
            "m_levels": self.m_levels,
            "h_es": dump(&self.h_es),
            "s_es": dump(&self.s_es),
            "eigvals": self.eigvals.to_vec(),
            "u": dump(&self.u),
            "s_energy": dump(&self.s_energy),
        })
    }
}

fn sigma_z() -> CMat {
    Array2::from_diag(&Array1::from(vec![C_ONE, -C_ONE]))
}

fn sigma_x() -> CMat {
    let mut m = Array2::from_elem((2, 2), C_ZERO);
    m[(0, 1)] = C_ONE;
    m[(1, 0)] = C_ONE;
    m
}

/// Truncated position operator `a + a^dag` on M levels.
fn ladder_x(m_levels: usize) -> CMat {
    let mut x = Array2::from_elem((m_levels, m_levels), C_ZERO);
    for n in 1..m_levels {
        let v = Complex64::new((n as f64).sqrt(), 0.0);
        x[(n, n - 1)] = v;
        x[(n - 1, n)] = v;
    }
    x
}

/// Build and diagonalize the truncated extended system.
pub fn build_extended(
    model: ModelKind,
    delta: f64,
    lam: f64,
    omega_rc: f64,
    m_levels: usize,
) -> Result<ExtendedSystem, SystemError> {
    if m_levels < 2 {
        return Err(SystemError::TooFewLevels(m_levels));
    }
    if !(omega_rc > 0.0) || !omega_rc.is_finite() {
        return Err(SystemError::InvalidParam {
            name: "omega_rc",
            value: omega_rc,
        });
    }
    for (name, value) in [("delta", delta), ("lam", lam)] {
        if !value.is_finite() {
            return Err(SystemError::InvalidParam { name, value });
        }
    }

    let eye2 = linalg::identity(2);
    let eye_m = linalg::identity(m_levels);
    let x = ladder_x(m_levels);
    let number_half = Array2::from_diag(&Array1::from_iter(
        (0..m_levels).map(|n| Complex64::new(n as f64 + 0.5, 0.0)),
    ));
    let spin_coupling = match model {
        ModelKind::PureDephasing => sigma_z(),
        ModelKind::SpinBoson => sigma_x(),
    };

    let mut h_es = kron(&sigma_z(), &eye_m) * Complex64::new(0.5 * delta, 0.0);
    h_es = h_es + kron(&eye2, &number_half) * Complex64::new(omega_rc, 0.0);
    h_es = h_es + kron(&spin_coupling, &x) * Complex64::new(lam, 0.0);
    let s_es = kron(&eye2, &x);

    let (eigvals, u) = linalg::eigh(&h_es)?;
    let s_energy = linalg::dagger(&u).dot(&s_es).dot(&u);
    let dim = 2 * m_levels;
    let bohr = Array2::from_shape_fn((dim, dim), |(m, n)| eigvals[m] - eigvals[n]);

    Ok(ExtendedSystem {
        model,
        delta,
        lam,
        omega_rc,
        m_levels,
        h_es,
        s_es,
        eigvals,
        u,
        s_energy,
        bohr,
    })
}

/// Density matrix of the extended system.
///
/// Validation accepts the small transient positivity violations a
/// non-secular Redfield integrator can produce; they are surfaced through
/// [`SupersystemState::min_eigenvalue`], never clipped.
#[derive(Debug, Clone, PartialEq)]
pub struct SupersystemState {
    matrix: CMat,
}

impl SupersystemState {
    pub fn new(matrix: CMat) -> Result<Self, SystemError> {
        let (rows, cols) = matrix.dim();
        if rows != cols {
            return Err(SystemError::InvalidState(format!(
                "not square: {rows}x{cols}"
            )));
        }
        let herm = linalg::hermiticity_error(&matrix);
        if herm > 1e-8 {
            return Err(SystemError::InvalidState(format!(
                "not Hermitian, max deviation {herm:.3e}"
            )));
        }
        let tr = linalg::mat_trace(&matrix);
        if (tr.re - 1.0).abs() > 1e-6 || tr.im.abs() > 1e-8 {
            return Err(SystemError::InvalidState(format!("trace = {tr}, not 1")));
        }
        Ok(Self { matrix })
    }

    pub(crate) fn from_matrix_unchecked(matrix: CMat) -> Self {
        Self { matrix }
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> Complex64 {
        linalg::mat_trace(&self.matrix)
    }

    /// Positivity diagnostic; slightly negative values flag transient
    /// Redfield violations.
    pub fn min_eigenvalue(&self) -> Result<f64, SystemError> {
        Ok(linalg::min_eigenvalue(&self.matrix)?)
    }
}

/// Thermal state of the truncated RC, `p_n ~ exp(-beta Omega n)`,
/// renormalized over the retained levels so populations sum to one.
pub fn thermal_rc_state(beta: f64, omega_rc: f64, m_levels: usize) -> Result<CMat, SystemError> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(SystemError::InvalidParam {
            name: "beta",
            value: beta,
        });
    }
    if !(omega_rc > 0.0) {
        return Err(SystemError::InvalidParam {
            name: "omega_rc",
            value: omega_rc,
        });
    }
    if m_levels == 0 {
        return Err(SystemError::TooFewLevels(0));
    }
    let weights: Vec<f64> = (0..m_levels)
        .map(|n| (-beta * omega_rc * n as f64).exp())
        .collect();
    let z: f64 = weights.iter().sum();
    Ok(Array2::from_diag(&Array1::from_iter(
        weights.into_iter().map(|w| Complex64::new(w / z, 0.0)),
    )))
}

/// `rho_spin (x) rho_rc` in the spin-major product basis.
pub fn embed_initial(rho_spin: &QubitState, rho_rc: &CMat) -> Result<SupersystemState, SystemError> {
    let (rows, cols) = rho_rc.dim();
    if rows != cols {
        return Err(SystemError::DimensionMismatch {
            expected: rows,
            got: cols,
        });
    }
    let tr = linalg::mat_trace(rho_rc);
    if (tr.re - 1.0).abs() > 1e-8 || tr.im.abs() > 1e-10 {
        return Err(SystemError::InvalidState(format!(
            "RC factor trace = {tr}, not 1"
        )));
    }
    let spin = Array2::from_shape_vec(
        (2, 2),
        vec![rho_spin.rho00, rho_spin.rho01, rho_spin.rho10, rho_spin.rho11],
    )
    .expect("2x2 shape");
    SupersystemState::new(kron(&spin, rho_rc))
}

/// Trace out the RC: `(rho_spin)_ab = sum_n <a,n| rho |b,n>`.
pub fn partial_trace_rc(rho_es: &SupersystemState, m_levels: usize) -> Result<QubitState, SystemError> {
    partial_trace_matrix(rho_es.matrix(), m_levels)
}

pub(crate) fn partial_trace_matrix(rho: &CMat, m_levels: usize) -> Result<QubitState, SystemError> {
    let dim = rho.nrows();
    if dim != 2 * m_levels || rho.ncols() != dim {
        return Err(SystemError::DimensionMismatch {
            expected: 2 * m_levels,
            got: dim,
        });
    }
    let mut block = [[Complex64::new(0.0, 0.0); 2]; 2];
    for (a, row) in block.iter_mut().enumerate() {
        for (b, entry) in row.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for n in 0..m_levels {
                acc += rho[(a * m_levels + n, b * m_levels + n)];
            }
            *entry = acc;
        }
    }
    QubitState::from_elements(block[0][0], block[0][1], block[1][0], block[1][1])
        .map_err(|e| SystemError::InvalidState(e.to_string()))
}

/// The initial spin states used throughout: the equal superposition for
/// dephasing and |-><-| for the spin-boson model.
pub fn default_initial_spin(model: ModelKind) -> QubitState {
    match model {
        ModelKind::PureDephasing => QubitState::plus_state(),
        ModelKind::SpinBoson => QubitState::minus_state(),
    }
}

/// Paper-matching default for the RC truncation: modest for weak and
/// intermediate coupling, large in the strong-coupling regime.
pub fn default_m_levels(lam: f64) -> usize {
    if lam <= 1.0 {
        8
    } else {
        50
    }
}
