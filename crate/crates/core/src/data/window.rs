use serde::{Deserialize, Serialize};

use super::series::RawSeries;
use crate::error::{Error, Result};

/// Floor on the per-variable scale used by RevIN.
pub const REVIN_EPS: f64 = 1e-5;

/// A `T_w × V` window, row-major by timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub len: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl Window {
    pub fn new(len: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if len * dim != values.len() || len == 0 || dim == 0 {
            return Err(Error::Data(format!("window {len}x{dim} with {} values", values.len())));
        }
        Ok(Self { len, dim, values })
    }

    pub fn at(&self, t: usize, v: usize) -> f64 {
        self.values[t * self.dim + v]
    }

    /// Values of variable `v` in time order.
    pub fn column(&self, v: usize) -> Vec<f64> {
        (0..self.len).map(|t| self.at(t, v)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevinStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowPair {
    /// Index of the first timestep of the context window.
    pub start: usize,
    pub context: Window,
    pub target: Window,
    pub context_stats: RevinStats,
    pub target_stats: RevinStats,
    /// 1 iff any point label inside the target window is 1.
    pub label: Option<u8>,
}

/// Consecutive non-overlapping (context, target) pairs with contexts starting
/// at `0, stride, 2·stride, ...`.
pub fn make_window_pairs(s: &RawSeries, window: usize, stride: usize) -> Result<Vec<WindowPair>> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument("window and stride must be positive".into()));
    }
    if s.len() < 2 * window {
        return Err(Error::Data(format!(
            "series of length {} is shorter than two windows of {window}",
            s.len()
        )));
    }
    let dim = s.dim();
    let take = |start: usize| -> Result<Window> {
        Window::new(window, dim, s.values()[start * dim..(start + window) * dim].to_vec())
    };
    let mut pairs = Vec::new();
    let mut start = 0;
    while start + 2 * window <= s.len() {
        let context = take(start)?;
        let target = take(start + window)?;
        let (_, context_stats) = revin_normalize(&context);
        let (_, target_stats) = revin_normalize(&target);
        let label = s
            .labels()
            .map(|l| u8::from(l[start + window..start + 2 * window].contains(&1)));
        pairs.push(WindowPair {
            start,
            context,
            target,
            context_stats,
            target_stats,
            label,
        });
        start += stride;
    }
    Ok(pairs)
}

/// Per-variable instance normalization. The scale is the population standard
/// deviation floored at [`REVIN_EPS`], so constant variables map to zeros.
pub fn revin_normalize(w: &Window) -> (Window, RevinStats) {
    let n = w.len as f64;
    let mut mean = vec![0.0; w.dim];
    let mut std = vec![0.0; w.dim];
    for v in 0..w.dim {
        let m = (0..w.len).map(|t| w.at(t, v)).sum::<f64>() / n;
        let var = (0..w.len).map(|t| (w.at(t, v) - m).powi(2)).sum::<f64>() / n;
        mean[v] = m;
        std[v] = var.sqrt().max(REVIN_EPS);
    }
    let values = w
        .values
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let v = i % w.dim;
            (x - mean[v]) / std[v]
        })
        .collect();
    (
        Window {
            len: w.len,
            dim: w.dim,
            values,
        },
        RevinStats { mean, std },
    )
}

pub fn revin_denormalize(w: &Window, stats: &RevinStats) -> Window {
    let values = w
        .values
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let v = i % w.dim;
            x * stats.std[v] + stats.mean[v]
        })
        .collect();
    Window {
        len: w.len,
        dim: w.dim,
        values,
    }
}

/// `P` patches of length `L` per variable, stored as `[P, L, V]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FineView {
    pub patches: usize,
    pub patch_len: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl FineView {
    pub fn at(&self, i: usize, l: usize, v: usize) -> f64 {
        self.values[(i * self.patch_len + l) * self.dim + v]
    }

    /// The `P × L` patch matrix of variable `v`, row-major.
    pub fn variable(&self, v: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.patches * self.patch_len);
        for i in 0..self.patches {
            for l in 0..self.patch_len {
                out.push(self.at(i, l, v));
            }
        }
        out
    }
}

/// A single patch of length `L` per variable, stored as `[L, V]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseView {
    pub patch_len: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl CoarseView {
    pub fn at(&self, l: usize, v: usize) -> f64 {
        self.values[l * self.dim + v]
    }

    pub fn variable(&self, v: usize) -> Vec<f64> {
        (0..self.patch_len).map(|l| self.at(l, v)).collect()
    }
}

fn check_split(w: &Window, patches: usize, patch_len: usize, op: &'static str) -> Result<()> {
    if patches == 0 || patch_len == 0 || patches * patch_len != w.len {
        return Err(Error::shape(
            op,
            format!("window length {} is not {patches} x {patch_len}", w.len),
        ));
    }
    Ok(())
}

/// Patch `i` covers timesteps `[i·L, (i+1)·L)`.
pub fn patchify(w: &Window, patches: usize, patch_len: usize) -> Result<FineView> {
    check_split(w, patches, patch_len, "patchify")?;
    // Row-major [T, V] with T = P·L is already [P, L, V].
    Ok(FineView {
        patches,
        patch_len,
        dim: w.dim,
        values: w.values.clone(),
    })
}

/// Mean of every `P` consecutive points: entry `ℓ` averages timesteps
/// `[ℓ·P, (ℓ+1)·P)`, giving a length `L = T_w / P` sequence.
pub fn down_avg(w: &Window, patches: usize) -> Result<CoarseView> {
    if patches == 0 || !w.len.is_multiple_of(patches) {
        return Err(Error::shape(
            "down_avg",
            format!("window length {} not divisible by {patches}", w.len),
        ));
    }
    let patch_len = w.len / patches;
    let mut values = vec![0.0; patch_len * w.dim];
    for l in 0..patch_len {
        for v in 0..w.dim {
            let s: f64 = (0..patches).map(|j| w.at(l * patches + j, v)).sum();
            values[l * w.dim + v] = s / patches as f64;
        }
    }
    Ok(CoarseView {
        patch_len,
        dim: w.dim,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> Window {
        Window::new(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn window_pair_count() {
        let s = RawSeries::unnamed((0..400).map(f64::from).collect(), 1, None).unwrap();
        let pairs = make_window_pairs(&s, 100, 100).unwrap();
        let starts: Vec<usize> = pairs.iter().map(|p| p.start).collect();
        assert_eq!(starts, vec![0, 100, 200]);
        assert_eq!(pairs[2].target.values[0], 300.0);
    }

    #[test]
    fn short_series_rejected() {
        let s = RawSeries::unnamed(vec![0.0; 150], 1, None).unwrap();
        assert!(make_window_pairs(&s, 100, 100).is_err());
    }

    #[test]
    fn label_is_any_point_in_target() {
        let mut labels = vec![0u8; 300];
        labels[250] = 1;
        let s = RawSeries::unnamed(vec![1.0; 300], 1, Some(labels)).unwrap();
        let pairs = make_window_pairs(&s, 100, 100).unwrap();
        assert_eq!(pairs[0].label, Some(0));
        assert_eq!(pairs[1].label, Some(1));

        let zeros = RawSeries::unnamed(vec![1.0; 300], 1, Some(vec![0; 300])).unwrap();
        assert!(make_window_pairs(&zeros, 100, 100).unwrap().iter().all(|p| p.label == Some(0)));
    }

    #[test]
    fn revin_constant_column() {
        let w = col(&[5.0; 8]);
        let (n, stats) = revin_normalize(&w);
        assert!(n.values.iter().all(|&x| x == 0.0));
        assert_eq!(stats.std[0], REVIN_EPS);
        assert_eq!(revin_denormalize(&n, &stats).values, vec![5.0; 8]);
    }

    #[test]
    fn patchify_examples() {
        let w = col(&(0..100).map(f64::from).collect::<Vec<_>>());
        let f = patchify(&w, 5, 20).unwrap();
        assert_eq!(f.at(3, 0, 0), 60.0);
        assert_eq!(f.variable(0), w.values);
        let one = patchify(&w, 1, 100).unwrap();
        assert_eq!(one.variable(0), w.values);
        assert!(patchify(&w, 3, 33).is_err());
    }

    #[test]
    fn down_avg_examples() {
        let w = col(&(1..=10).map(f64::from).collect::<Vec<_>>());
        assert_eq!(down_avg(&w, 5).unwrap().values, vec![3.0, 8.0]);
        let c = col(&[2.5; 10]);
        assert_eq!(down_avg(&c, 5).unwrap().values, vec![2.5, 2.5]);
        assert!(down_avg(&w, 3).is_err());
    }
}
