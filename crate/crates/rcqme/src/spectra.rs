//! Bath spectral densities, thermal occupation, and dissipator rates.
//!
//! The original structured reservoir carries a Brownian spectral density
//!
//! ```text
//! J(w) = (4 w W^2 lam^2 g / pi) / [(w^2 - W^2)^2 + (2 g W w)^2],
//! ```
//!
//! peaked at the mode frequency `W` with width parameter `g` and coupling
//! `lam`. After the reaction-coordinate mapping the residual bath is Ohmic,
//! `J_rc(w) = (g/pi) w exp(-w/cutoff)`. The piecewise rate [`rc_rate`] is
//! the real half-Fourier transform of the residual-bath correlation
//! function evaluated at a Bohr frequency; it is what enters the Redfield
//! dissipator of the extended system.
//!
//! All energies are measured in units of the spin splitting, with
//! `hbar = k_B = 1`.

use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpectraError {
    #[error("invalid {name}: {value} ({reason})")]
    InvalidParam {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("frequency must be nonnegative, got {0}")]
    NegativeFrequency(f64),
    #[error("bose_einstein requires omega > 0, got {0}")]
    NonPositiveFrequency(f64),
    #[error("operation requires an Ohmic bath")]
    NotOhmic,
    #[error("operation requires a Brownian bath")]
    NotBrownian,
}

fn check_param(name: &'static str, value: f64, positive: bool) -> Result<f64, SpectraError> {
    let ok = value.is_finite() && if positive { value > 0.0 } else { value >= 0.0 };
    if ok {
        Ok(value)
    } else {
        Err(SpectraError::InvalidParam {
            name,
            value,
            reason: if positive {
                "must be finite and > 0"
            } else {
                "must be finite and >= 0"
            },
        })
    }
}

/// Brownian (structured) spectral density parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrownianParams {
    omega_rc: f64,
    gamma: f64,
    lam: f64,
}

impl BrownianParams {
    /// `omega_rc` is the peak/reaction-coordinate frequency, `gamma` the
    /// dimensionless width parameter, `lam` the system-bath coupling.
    pub fn new(omega_rc: f64, gamma: f64, lam: f64) -> Result<Self, SpectraError> {
        Ok(Self {
            omega_rc: check_param("omega_rc", omega_rc, true)?,
            gamma: check_param("gamma", gamma, true)?,
            lam: check_param("lam", lam, false)?,
        })
    }

    pub fn omega_rc(&self) -> f64 {
        self.omega_rc
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn lam(&self) -> f64 {
        self.lam
    }
}

/// Ohmic residual-bath parameters.
///
/// `gamma = 0` is allowed and decouples the residual bath entirely, which
/// is useful for checking that the dissipator vanishes with the rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OhmicParams {
    gamma: f64,
    cutoff: f64,
}

impl OhmicParams {
    pub fn new(gamma: f64, cutoff: f64) -> Result<Self, SpectraError> {
        Ok(Self {
            gamma: check_param("gamma", gamma, false)?,
            cutoff: check_param("cutoff", cutoff, true)?,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpectralDensity {
    Brownian(BrownianParams),
    Ohmic(OhmicParams),
}

/// A reservoir: spectral density plus inverse temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BathSpec {
    beta: f64,
    density: SpectralDensity,
}

impl BathSpec {
    /// `beta > 0` strictly; the zero-temperature limit is rejected rather
    /// than guessed at, since occupation factors diverge differently there.
    pub fn new(beta: f64, density: SpectralDensity) -> Result<Self, SpectraError> {
        Ok(Self {
            beta: check_param("beta", beta, true)?,
            density,
        })
    }

    pub fn ohmic(beta: f64, gamma: f64, cutoff: f64) -> Result<Self, SpectraError> {
        Self::new(beta, SpectralDensity::Ohmic(OhmicParams::new(gamma, cutoff)?))
    }

    pub fn brownian(beta: f64, p: BrownianParams) -> Result<Self, SpectraError> {
        Self::new(beta, SpectralDensity::Brownian(p))
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn density(&self) -> &SpectralDensity {
        &self.density
    }

    pub fn as_ohmic(&self) -> Result<&OhmicParams, SpectraError> {
        match &self.density {
            SpectralDensity::Ohmic(p) => Ok(p),
            SpectralDensity::Brownian(_) => Err(SpectraError::NotOhmic),
        }
    }

    pub fn as_brownian(&self) -> Result<&BrownianParams, SpectraError> {
        match &self.density {
            SpectralDensity::Brownian(p) => Ok(p),
            SpectralDensity::Ohmic(_) => Err(SpectraError::NotBrownian),
        }
    }
}

pub(crate) fn brownian_j_raw(omega: f64, p: &BrownianParams) -> f64 {
    let (big_omega, gamma, lam) = (p.omega_rc, p.gamma, p.lam);
    let num = 4.0 * omega * big_omega * big_omega * lam * lam * gamma / PI;
    let d1 = omega * omega - big_omega * big_omega;
    let d2 = 2.0 * gamma * big_omega * omega;
    num / (d1 * d1 + d2 * d2)
}

/// Brownian spectral density at frequency `omega >= 0`.
pub fn brownian_j(omega: f64, p: &BrownianParams) -> Result<f64, SpectraError> {
    if !(omega >= 0.0) {
        return Err(SpectraError::NegativeFrequency(omega));
    }
    Ok(brownian_j_raw(omega, p))
}

pub(crate) fn ohmic_j_raw(omega: f64, p: &OhmicParams) -> f64 {
    p.gamma / PI * omega * (-omega / p.cutoff).exp()
}

/// Ohmic spectral density at frequency `omega >= 0`.
pub fn ohmic_j(omega: f64, p: &OhmicParams) -> Result<f64, SpectraError> {
    if !(omega >= 0.0) {
        return Err(SpectraError::NegativeFrequency(omega));
    }
    Ok(ohmic_j_raw(omega, p))
}

/// Bose-Einstein occupation `1/(exp(beta*omega) - 1)` for `omega > 0`.
///
/// The `omega -> 0` limit is only taken analytically inside the rate
/// functions, where the product with J(omega) stays finite.
pub fn bose_einstein(omega: f64, beta: f64) -> Result<f64, SpectraError> {
    if !(omega > 0.0) {
        return Err(SpectraError::NonPositiveFrequency(omega));
    }
    check_param("beta", beta, true)?;
    Ok(1.0 / (beta * omega).exp_m1())
}

/// Frequencies closer to zero than this take the analytic omega -> 0 limit
/// of the rates instead of evaluating an unstable 0 * inf product.
pub const RATE_ZERO_THRESHOLD: f64 = 1e-9;

/// Residual-bath (Ohmic) dissipator rate at a Bohr frequency.
///
/// ```text
/// rate(w) = pi J_rc(w) n(w)            w > 0
///         = pi J_rc(|w|) [n(|w|) + 1]  w < 0
///         = gamma / beta               w = 0
/// ```
///
/// Positive frequencies absorb a quantum from the bath, negative ones emit
/// into it, so `rate(-w) = exp(beta w) rate(w)` (detailed balance).
pub fn rc_rate(omega: f64, bath: &BathSpec) -> Result<f64, SpectraError> {
    let p = bath.as_ohmic()?;
    let beta = bath.beta;
    if omega.abs() < RATE_ZERO_THRESHOLD {
        return Ok(p.gamma / beta);
    }
    let a = omega.abs();
    let n = 1.0 / (beta * a).exp_m1();
    let j = ohmic_j_raw(a, p);
    Ok(if omega > 0.0 {
        PI * j * n
    } else {
        PI * j * (n + 1.0)
    })
}

/// Same piecewise rate for the original Brownian bath; used by the
/// Born-Markov-Redfield comparator on the unmapped model.
///
/// The omega -> 0 limit is `4 gamma lam^2 / (omega_rc^2 beta)`.
pub fn brownian_rate(omega: f64, bath: &BathSpec) -> Result<f64, SpectraError> {
    let p = bath.as_brownian()?;
    let beta = bath.beta;
    if omega.abs() < RATE_ZERO_THRESHOLD {
        let w2 = p.omega_rc * p.omega_rc;
        return Ok(4.0 * p.gamma * p.lam * p.lam / (w2 * beta));
    }
    let a = omega.abs();
    let n = 1.0 / (beta * a).exp_m1();
    let j = brownian_j_raw(a, p);
    Ok(if omega > 0.0 {
        PI * j * n
    } else {
        PI * j * (n + 1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    #[test]
    fn brownian_peak_value() {
        // At w = W the density reduces to lam^2 / (pi g W).
        let p = BrownianParams::new(3.0, 0.1, 1.0).unwrap();
        assert_relative_eq!(
            brownian_j(3.0, &p).unwrap(),
            1.0 / (PI * 0.1 * 3.0),
            max_relative = 1e-12
        );
        assert_relative_eq!(brownian_j(3.0, &p).unwrap(), 1.061033, max_relative = 1e-6);

        let p = BrownianParams::new(5.0, 0.071, 1.0).unwrap();
        assert_relative_eq!(
            brownian_j(5.0, &p).unwrap(),
            1.0 / (PI * 0.071 * 5.0),
            max_relative = 1e-12
        );
        assert_relative_eq!(brownian_j(5.0, &p).unwrap(), 0.8966467, max_relative = 1e-6);
    }

    #[test]
    fn brownian_zero_and_negative() {
        let p = BrownianParams::new(3.0, 0.1, 1.0).unwrap();
        assert_eq!(brownian_j(0.0, &p).unwrap(), 0.0);
        assert!(brownian_j(-0.5, &p).is_err());
    }

    #[test]
    fn ohmic_values() {
        let p = OhmicParams::new(0.1, 1000.0 * PI).unwrap();
        assert_eq!(ohmic_j(0.0, &p).unwrap(), 0.0);
        let at_cutoff = ohmic_j(p.cutoff(), &p).unwrap();
        assert_relative_eq!(
            at_cutoff,
            0.1 / PI * p.cutoff() * (-1.0f64).exp(),
            max_relative = 1e-14
        );
        // slope at the origin is gamma/pi
        let h = 1e-7;
        let slope = ohmic_j(h, &p).unwrap() / h;
        assert_relative_eq!(slope, 0.1 / PI, max_relative = 1e-6);
        assert!(ohmic_j(-1e-12, &p).is_err());
    }

    #[test]
    fn bose_einstein_values() {
        let ln2 = 2.0f64.ln();
        assert_relative_eq!(bose_einstein(ln2, 1.0).unwrap(), 1.0, max_relative = 1e-14);
        assert!(bose_einstein(800.0, 1.0).unwrap() < 1e-300);
        // small-argument expansion 1/(bw) - 1/2 + O(bw)
        let n = bose_einstein(0.01, 1.0).unwrap();
        assert_relative_eq!(n, 99.50083, max_relative = 1e-6);
        assert_abs_diff_eq!(n, 1.0 / 0.01 - 0.5, epsilon = 1e-3);
        assert!(bose_einstein(0.0, 1.0).is_err());
        assert!(bose_einstein(-1.0, 1.0).is_err());
    }

    #[test]
    fn rc_rate_zero_frequency() {
        let bath = BathSpec::ohmic(2.0, 0.071, 1000.0 * PI).unwrap();
        assert_relative_eq!(rc_rate(0.0, &bath).unwrap(), 0.0355, max_relative = 1e-12);
    }

    #[test]
    fn rc_rate_continuous_at_zero() {
        let bath = BathSpec::ohmic(2.0, 0.1, 1000.0 * PI).unwrap();
        let limit = 0.1 / 2.0;
        let near = rc_rate(1e-6, &bath).unwrap();
        assert_relative_eq!(near, limit, max_relative = 1e-4);
    }

    #[test]
    fn rc_rate_positive_frequency_value() {
        // pi J_rc(3) n(3) at gamma=0.1, cutoff=1000pi, beta=2:
        // 0.3 exp(-3/(1000 pi)) / (exp(6) - 1)
        let bath = BathSpec::ohmic(2.0, 0.1, 1000.0 * PI).unwrap();
        let expected = 0.3 * (-3.0 / (1000.0 * PI)).exp() / (6.0f64.exp() - 1.0);
        assert_relative_eq!(rc_rate(3.0, &bath).unwrap(), expected, max_relative = 1e-12);
        assert_relative_eq!(expected, 7.4477e-4, max_relative = 1e-4);
    }

    #[test]
    fn rc_rate_requires_ohmic() {
        let p = BrownianParams::new(3.0, 0.1, 1.0).unwrap();
        let bath = BathSpec::brownian(2.0, p).unwrap();
        assert!(matches!(rc_rate(1.0, &bath), Err(SpectraError::NotOhmic)));
    }

    #[test]
    fn brownian_rate_zero_limit() {
        let p = BrownianParams::new(3.0, 0.1, 0.5).unwrap();
        let bath = BathSpec::brownian(2.0, p).unwrap();
        let limit = 4.0 * 0.1 * 0.25 / (9.0 * 2.0);
        assert_relative_eq!(brownian_rate(0.0, &bath).unwrap(), limit, max_relative = 1e-12);
        let near = brownian_rate(1e-7, &bath).unwrap();
        assert_relative_eq!(near, limit, max_relative = 1e-4);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(BrownianParams::new(0.0, 0.1, 1.0).is_err());
        assert!(BrownianParams::new(3.0, 0.0, 1.0).is_err());
        assert!(BrownianParams::new(3.0, 0.1, -0.1).is_err());
        assert!(OhmicParams::new(-0.1, 10.0).is_err());
        assert!(OhmicParams::new(0.1, 0.0).is_err());
        assert!(BathSpec::ohmic(0.0, 0.1, 10.0).is_err());
        assert!(BathSpec::ohmic(f64::INFINITY, 0.1, 10.0).is_err());
    }

    #[test]
    fn brownian_omega_cubed_tail() {
        let p = BrownianParams::new(3.0, 0.1, 0.7).unwrap();
        let asymptote = 4.0 * 9.0 * 0.49 * 0.1 / PI;
        for &mult in &[100.0, 300.0, 1000.0] {
            let w = mult * p.omega_rc();
            let scaled = w.powi(3) * brownian_j(w, &p).unwrap();
            assert!(
                (scaled - asymptote).abs() / asymptote < 0.05,
                "w = {w}: {scaled} vs {asymptote}"
            );
        }
    }

    proptest! {
        #[test]
        fn densities_nonnegative(omega in 0.0f64..1e4, gamma in 1e-3f64..2.0, lam in 0.0f64..10.0) {
            let p = BrownianParams::new(3.0, gamma, lam).unwrap();
            prop_assert!(brownian_j(omega, &p).unwrap() >= 0.0);
            let o = OhmicParams::new(gamma, 1000.0 * PI).unwrap();
            prop_assert!(ohmic_j(omega, &o).unwrap() >= 0.0);
        }

        #[test]
        fn rc_rate_detailed_balance(
            omega in 1e-4f64..50.0,
            gamma in 1e-3f64..1.0,
            beta in 0.05f64..5.0,
        ) {
            let bath = BathSpec::ohmic(beta, gamma, 1000.0 * PI).unwrap();
            let up = rc_rate(omega, &bath).unwrap();
            let down = rc_rate(-omega, &bath).unwrap();
            if up > 1e-280 {
                let ratio = down / up;
                let expected = (beta * omega).exp();
                prop_assert!((ratio / expected - 1.0).abs() < 1e-10,
                    "ratio {ratio} vs {expected}");
            }
        }
    }
}
