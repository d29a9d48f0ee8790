//! Exact checks of the compounding-error analysis on tabular MDPs, and the
//! horizon-wise rollout error comparison on a continuous environment.

mod bounds;
mod mse;
mod tabular;

pub use bounds::{
    iterated_bound, lemma1_check, lemma1_sweep, lemma2_bound, lemma2_check, lemma2_sweep,
    perturbed_marginals, theorem1_bound, theorem1_check, theorem1_sweep, BoundParams, BoundRow,
    GapCheck, Lemma1Step, SweepConfig,
};
pub use mse::{rollout_mse_curve, MseRow};
pub use tabular::{
    exact_marginals, exact_return, marginal_sequence, measure_eps_m, measure_eps_m_from,
    per_state_model_error, perturbed_model, propagate, random_mdp, random_policy, solve_linear,
    state_values, tv_distance, TabularMdp, TabularPolicy,
};
