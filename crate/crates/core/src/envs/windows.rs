use super::Dataset;
use crate::error::{Error, Result};

/// Fixed-length training window of `L + 1` states and `L` actions in raw
/// units. Positions are interleaved `s_0, a_0, s_1, ..., a_{L-1}, s_L`, so
/// `pad_mask` has `2L + 1` entries; padded positions hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub pad_mask: Vec<bool>,
    /// Source episode index and start step, for tracing a slice back.
    pub episode: usize,
    pub start: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn is_padded(&self) -> bool {
        self.pad_mask.iter().any(|&p| p)
    }

    /// Whether state slot `i` is padding.
    pub fn state_padded(&self, i: usize) -> bool {
        self.pad_mask[2 * i]
    }

    pub fn action_padded(&self, i: usize) -> bool {
        self.pad_mask[2 * i + 1]
    }
}

/// Number of windows `slice_windows` emits for episodes of the given lengths.
pub fn window_count(lengths: impl IntoIterator<Item = usize>, l: usize) -> usize {
    lengths
        .into_iter()
        .map(|h| if h >= l { h - l + 1 } else { 1 })
        .sum()
}

/// Slice every episode into windows of length `l`: all starts
/// `0 <= i <= H - l` when `H >= l`, otherwise one zero-padded window holding
/// the whole episode.
pub fn slice_windows(dataset: &Dataset, l: usize) -> Result<Vec<Window>> {
    if l == 0 {
        return Err(Error::InvalidArgument("window length must be >= 1".into()));
    }
    let (sd, ad) = (dataset.state_dim, dataset.action_dim);
    let mut out = Vec::with_capacity(window_count(dataset.episodes.iter().map(|e| e.len()), l));
    for (ei, ep) in dataset.episodes.iter().enumerate() {
        let h = ep.len();
        if h >= l {
            for i in 0..=h - l {
                out.push(Window {
                    states: ep.states[i..=i + l].to_vec(),
                    actions: ep.actions[i..i + l].to_vec(),
                    pad_mask: vec![false; 2 * l + 1],
                    episode: ei,
                    start: i,
                });
            }
        } else {
            let mut states = ep.states.clone();
            states.resize(l + 1, vec![0.0; sd]);
            let mut actions = ep.actions.clone();
            actions.resize(l, vec![0.0; ad]);
            let pad_mask = (0..=2 * l).map(|p| p > 2 * h).collect();
            out.push(Window {
                states,
                actions,
                pad_mask,
                episode: ei,
                start: 0,
            });
        }
    }
    Ok(out)
}
