//! Numerical laboratory for the statistics of weakly nonlinear three-wave
//! systems.

pub mod acceptance;
pub mod dynamics;
pub mod kinetic;
pub mod multimode_pdf;
pub mod onemode_pdf;
pub mod phase_stats;
pub mod rpa_ensemble;
pub mod stats;
pub mod wave_system;
pub mod wick_oracle;

pub use dynamics::{ComplexField, IterateBundle};
pub use wave_system::{Coupling, Dispersion, ModeGrid, Triad, TriadTable, WaveSystem};
