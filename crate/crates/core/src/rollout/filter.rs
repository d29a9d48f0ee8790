use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Hardmax,
    Softmax,
}

fn keep_count(n: usize, eta: f64) -> usize {
    let k = (eta * n as f64).floor() as usize;
    if k == 0 && n > 0 {
        log::warn!("filter keeps no trajectories (eta {eta}, batch {n})");
    }
    k.min(n)
}

/// Indices of the `floor(eta * n)` highest returns, in ascending index order.
/// Equal returns prefer the lower index.
pub fn filter_hardmax(returns: &[f64], eta: f64) -> Vec<usize> {
    let k = keep_count(returns.len(), eta);
    let mut order: Vec<usize> = (0..returns.len()).collect();
    order.sort_by(|&i, &j| returns[j].total_cmp(&returns[i]).then(i.cmp(&j)));
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

/// `floor(eta * n)` indices drawn without replacement with probability
/// proportional to `exp(return)`, in draw order.
pub fn filter_softmax(returns: &[f64], eta: f64, rng: &mut Rng) -> Vec<usize> {
    let k = keep_count(returns.len(), eta);
    let max = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = returns.iter().map(|r| (r - max).exp()).collect();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut choice = None;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            choice = Some(i);
            if u < w {
                break;
            }
            u -= w;
        }
        // Underflowed weights leave nothing to draw from; fall back to the
        // lowest unpicked index.
        let i = choice.unwrap_or_else(|| {
            (0..weights.len()).find(|i| !picked.contains(i)).expect("k <= n")
        });
        picked.push(i);
        weights[i] = 0.0;
    }
    picked
}

/// Apply the configured filter.
pub fn select(kind: FilterKind, returns: &[f64], eta: f64, rng: &mut Rng) -> Vec<usize> {
    match kind {
        FilterKind::Hardmax => filter_hardmax(returns, eta),
        FilterKind::Softmax => filter_softmax(returns, eta, rng),
    }
}
