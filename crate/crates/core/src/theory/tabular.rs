use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Finite MDP with `transitions[s][a][s']` and `rewards[s][a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp<T: Scalar> {
    pub transitions: Vec<Vec<Vec<T>>>,
    pub rewards: Vec<Vec<T>>,
    pub gamma: T,
    pub initial: Vec<T>,
    /// Bound `R` on `|r(s, a)|`.
    pub reward_bound: T,
}

/// `policy[s][a] = pi(a | s)`.
pub type TabularPolicy<T> = Vec<Vec<T>>;

fn sum_tolerance<T: Scalar>(n: usize) -> T {
    T::of(1e-12).max(T::epsilon() * T::of(4.0 * n as f64))
}

fn check_distribution<T: Scalar>(p: &[T], n: usize, what: &str) -> Result<()> {
    if p.len() != n {
        return Err(Error::Shape(format!("{what}: expected {n} entries, got {}", p.len())));
    }
    if p.iter().any(|v| !v.is_finite() || *v < T::zero()) {
        return Err(Error::InvalidArgument(format!("{what}: negative or non-finite mass")));
    }
    let total = p.iter().fold(T::zero(), |a, &b| a + b);
    if (total - T::one()).abs() > sum_tolerance::<T>(n) {
        return Err(Error::InvalidArgument(format!("{what}: sums to {total}")));
    }
    Ok(())
}

impl<T: Scalar> TabularMdp<T> {
    pub fn new(
        transitions: Vec<Vec<Vec<T>>>,
        rewards: Vec<Vec<T>>,
        gamma: T,
        initial: Vec<T>,
        reward_bound: T,
    ) -> Result<Self> {
        let mdp = Self {
            transitions,
            rewards,
            gamma,
            initial,
            reward_bound,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn n_states(&self) -> usize {
        self.transitions.len()
    }

    pub fn n_actions(&self) -> usize {
        self.transitions.first().map_or(0, |r| r.len())
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states(), self.n_actions());
        if ns == 0 || na == 0 {
            return Err(Error::InvalidArgument("MDP needs at least one state and action".into()));
        }
        if !(self.gamma >= T::zero() && self.gamma < T::one()) {
            return Err(Error::InvalidArgument(format!("discount {} outside [0, 1)", self.gamma)));
        }
        for (s, row) in self.transitions.iter().enumerate() {
            if row.len() != na {
                return Err(Error::Shape(format!("state {s} has {} actions", row.len())));
            }
            for (a, p) in row.iter().enumerate() {
                check_distribution(p, ns, &format!("T[{s}][{a}]"))?;
            }
        }
        if self.rewards.len() != ns || self.rewards.iter().any(|r| r.len() != na) {
            return Err(Error::Shape("reward table shape".into()));
        }
        if self.rewards.iter().flatten().any(|r| r.abs() > self.reward_bound) {
            return Err(Error::InvalidArgument("reward exceeds its bound".into()));
        }
        check_distribution(&self.initial, ns, "initial distribution")
    }

    pub fn check_policy(&self, pi: &TabularPolicy<T>) -> Result<()> {
        if pi.len() != self.n_states() {
            return Err(Error::Shape(format!("policy covers {} states", pi.len())));
        }
        for (s, p) in pi.iter().enumerate() {
            check_distribution(p, self.n_actions(), &format!("pi[{s}]"))?;
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.n_states() != other.n_states() || self.n_actions() != other.n_actions() {
            return Err(Error::Shape("MDPs differ in shape".into()));
        }
        Ok(())
    }

    /// Policy-averaged transition matrix `P[s][s'] = sum_a pi(a|s) T[s][a][s']`.
    pub fn policy_matrix(&self, pi: &TabularPolicy<T>) -> Vec<Vec<T>> {
        let ns = self.n_states();
        (0..ns)
            .map(|s| {
                let mut row = vec![T::zero(); ns];
                for (a, &w) in pi[s].iter().enumerate() {
                    for (dst, &p) in row.iter_mut().zip(&self.transitions[s][a]) {
                        *dst += w * p;
                    }
                }
                row
            })
            .collect()
    }

    /// Policy-averaged reward `r_pi[s] = sum_a pi(a|s) r[s][a]`.
    pub fn policy_reward(&self, pi: &TabularPolicy<T>) -> Vec<T> {
        (0..self.n_states())
            .map(|s| {
                pi[s]
                    .iter()
                    .zip(&self.rewards[s])
                    .fold(T::zero(), |acc, (&w, &r)| acc + w * r)
            })
            .collect()
    }
}

/// `p P`: one step of a state distribution under a transition matrix.
pub fn propagate<T: Scalar>(p: &[T], matrix: &[Vec<T>]) -> Vec<T> {
    let mut out = vec![T::zero(); p.len()];
    for (s, &ps) in p.iter().enumerate() {
        if ps == T::zero() {
            continue;
        }
        for (dst, &m) in out.iter_mut().zip(&matrix[s]) {
            *dst += ps * m;
        }
    }
    out
}

fn point_mass<T: Scalar>(n: usize, s: usize) -> Vec<T> {
    let mut p = vec![T::zero(); n];
    p[s] = T::one();
    p
}

/// Marginals `p^0 ... p^horizon` starting from `start`.
pub fn marginal_sequence<T: Scalar>(
    mdp: &TabularMdp<T>,
    pi: &TabularPolicy<T>,
    start: &[T],
    horizon: usize,
) -> Vec<Vec<T>> {
    let m = mdp.policy_matrix(pi);
    let mut out = vec![start.to_vec()];
    for t in 0..horizon {
        let next = propagate(&out[t], &m);
        out.push(next);
    }
    out
}

/// State distribution after `t` steps from `s0`.
pub fn exact_marginals<T: Scalar>(
    mdp: &TabularMdp<T>,
    pi: &TabularPolicy<T>,
    s0: usize,
    t: usize,
) -> Result<Vec<T>> {
    mdp.check_policy(pi)?;
    if s0 >= mdp.n_states() {
        return Err(Error::InvalidArgument(format!("start state {s0} out of range")));
    }
    let start = point_mass(mdp.n_states(), s0);
    Ok(marginal_sequence(mdp, pi, &start, t).pop().expect("t + 1 entries"))
}

pub fn tv_distance<T: Scalar>(p: &[T], q: &[T]) -> T {
    p.iter()
        .zip(q)
        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b).abs())
        / T::of(2.0)
}

/// `E_{a ~ pi(s)} TV(T_m(s, a), T(s, a))` for every state.
pub fn per_state_model_error<T: Scalar>(
    truth: &TabularMdp<T>,
    model: &TabularMdp<T>,
    pi: &TabularPolicy<T>,
) -> Vec<T> {
    (0..truth.n_states())
        .map(|s| {
            pi[s].iter().enumerate().fold(T::zero(), |acc, (a, &w)| {
                acc + w * tv_distance(&model.transitions[s][a], &truth.transitions[s][a])
            })
        })
        .collect()
}

/// Largest expected one-step model error over steps `0..horizon`, each
/// weighted by the true visitation from `start`.
pub fn measure_eps_m_from<T: Scalar>(
    truth: &TabularMdp<T>,
    model: &TabularMdp<T>,
    pi: &TabularPolicy<T>,
    start: &[T],
    horizon: usize,
) -> Result<T> {
    truth.check_same_shape(model)?;
    truth.check_policy(pi)?;
    let err = per_state_model_error(truth, model, pi);
    let marg = marginal_sequence(truth, pi, start, horizon.saturating_sub(1));
    Ok(marg
        .iter()
        .take(horizon)
        .map(|p| p.iter().zip(&err).fold(T::zero(), |acc, (&w, &e)| acc + w * e))
        .fold(T::zero(), |a, b| a.max(b)))
}

/// [`measure_eps_m_from`] starting from the MDP's initial distribution.
pub fn measure_eps_m<T: Scalar>(
    truth: &TabularMdp<T>,
    model: &TabularMdp<T>,
    pi: &TabularPolicy<T>,
    horizon: usize,
) -> Result<T> {
    measure_eps_m_from(truth, model, pi, &truth.initial, horizon)
}

/// Solve `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear<T: Scalar>(mut a: Vec<Vec<T>>, mut b: Vec<T>) -> Result<Vec<T>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).expect("finite"))
            .expect("non-empty range");
        if a[pivot][col].abs() <= T::epsilon() {
            return Err(Error::non_finite("singular linear system"));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == T::zero() {
                continue;
            }
            for k in col..n {
                let v = a[col][k];
                a[row][k] -= f * v;
            }
            let v = b[col];
            b[row] -= f * v;
        }
    }
    let mut x = vec![T::zero(); n];
    for row in (0..n).rev() {
        let tail = (row + 1..n).fold(T::zero(), |acc, k| acc + a[row][k] * x[k]);
        x[row] = (b[row] - tail) / a[row][row];
    }
    Ok(x)
}

/// State values `(I - gamma P_pi)^{-1} r_pi`.
pub fn state_values<T: Scalar>(mdp: &TabularMdp<T>, pi: &TabularPolicy<T>) -> Result<Vec<T>> {
    mdp.check_policy(pi)?;
    let p = mdp.policy_matrix(pi);
    let n = mdp.n_states();
    let a = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let id = if i == j { T::one() } else { T::zero() };
                    id - mdp.gamma * p[i][j]
                })
                .collect()
        })
        .collect();
    solve_linear(a, mdp.policy_reward(pi))
}

/// Discounted return `J = sum_t gamma^t E_{p^t}[r_pi]` from `s0`.
pub fn exact_return<T: Scalar>(mdp: &TabularMdp<T>, pi: &TabularPolicy<T>, s0: usize) -> Result<T> {
    if s0 >= mdp.n_states() {
        return Err(Error::InvalidArgument(format!("start state {s0} out of range")));
    }
    Ok(state_values(mdp, pi)?[s0])
}

fn random_simplex<T: Scalar>(n: usize, rng: &mut Rng) -> Vec<T> {
    // Normalized exponentials give a uniform draw on the simplex.
    let w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = w.iter().sum();
    let mut p: Vec<T> = w.iter().map(|v| T::of(v / total)).collect();
    // Put the rounding residue on the largest entry so the row sums to one.
    let sum = p.iter().fold(T::zero(), |a, &b| a + b);
    let big = (0..n).max_by(|&i, &j| p[i].partial_cmp(&p[j]).expect("finite")).expect("n > 0");
    p[big] += T::one() - sum;
    p
}

/// Random MDP with uniform-simplex transitions and rewards in `[-1, 1]`.
pub fn random_mdp<T: Scalar>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut Rng) -> TabularMdp<T> {
    let transitions = (0..n_states)
        .map(|_| (0..n_actions).map(|_| random_simplex(n_states, rng)).collect())
        .collect();
    let rewards = (0..n_states)
        .map(|_| (0..n_actions).map(|_| T::of(rng.random_range(-1.0..=1.0))).collect())
        .collect();
    let initial = random_simplex(n_states, rng);
    TabularMdp {
        transitions,
        rewards,
        gamma: T::of(gamma),
        initial,
        reward_bound: T::one(),
    }
}

pub fn random_policy<T: Scalar>(n_states: usize, n_actions: usize, rng: &mut Rng) -> TabularPolicy<T> {
    (0..n_states).map(|_| random_simplex(n_actions, rng)).collect()
}

/// Model whose every transition row is `(1 - beta) T + beta q` with `q` a
/// random distribution, so its per-row TV error is at most `beta`.
pub fn perturbed_model<T: Scalar>(mdp: &TabularMdp<T>, beta: f64, rng: &mut Rng) -> TabularMdp<T> {
    let n = mdp.n_states();
    let b = T::of(beta);
    let mut out = mdp.clone();
    for row in out.transitions.iter_mut() {
        for p in row.iter_mut() {
            let q: Vec<T> = random_simplex(n, rng);
            for (v, qv) in p.iter_mut().zip(q) {
                *v = (T::one() - b) * *v + b * qv;
            }
        }
    }
    out
}
