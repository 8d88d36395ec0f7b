//! Closed-form phase averages over random-phase ensembles and the
//! generating-functional bookkeeping built on them.

mod battery;
mod closed;
mod discrete_z;
mod monomial;
mod terms;
mod torus;
mod verify;

pub use battery::{delta_battery, enumerate_patterns, predicted_patterns, BatteryRow};
pub use closed::{j_closed_form, legs, Leg, Variant};
pub use discrete_z::{
    discrete_z_rhs, fixed_amplitude_z, generating_functional_check, oracle_increment,
    CauchyDerivatives, ConsistencyReport,
};
pub use monomial::PhaseMonomial;
pub use terms::{
    average_streaming, average_term_sum, first_iterate_terms, generate_terms, phase_average,
    second_iterate_terms, term_count_bound, valence_scaling, visit_terms, Expr, Factor,
    FieldMonomial, OracleError, Setup, SymbolicTerm, TermSum, ValenceTable, Weights, TERM_CEILING,
};
pub use torus::{
    conjugation_check, conjugation_prediction, torus_coefficients, ConjugationReport,
    MAX_TORUS_MODES, TORUS_POINTS,
};
pub use verify::{
    closed_form_residual, run_verification, Check, VerifyInputs, VerifyReport, CLOSED_FORM_TOL,
    CONJUGATION_TOL, GENERATING_TOL, VALENCE_SLOP,
};
