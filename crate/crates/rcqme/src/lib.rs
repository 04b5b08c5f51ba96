//! Simulation of non-Markovian open-quantum-system dynamics with the
//! reaction-coordinate quantum master equation (RC-QME).
//!
//! The library models a spin coupled to a structured (Brownian) bosonic
//! reservoir. A collective bath mode, the reaction coordinate, is folded
//! into the system, leaving an Ohmic residual bath that is treated with a
//! second-order Redfield equation on the extended spin + oscillator
//! supersystem. For the pure-dephasing variant of the model the exact
//! decoherence function is available by quadrature, which makes the method
//! fully benchmarkable; non-Markovianity is quantified with the BLP
//! (trace-distance) and RHP (divisibility) measures.

pub mod driver;
pub mod exact;
pub mod linalg;
pub mod measures;
pub mod redfield;
pub mod spectra;
pub mod system;
