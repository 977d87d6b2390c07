//! Affinity propagation: exemplar clustering by damped exchange of
//! responsibility and availability messages over a similarity matrix whose
//! diagonal holds each point's preference.

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::losses::SceneAssignment;
use crate::rng::{rng_for, stream};

/// Largest message update, relative to max |S|, still counted as settled.
const SETTLE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preference {
    /// Median of the off-diagonal similarities.
    Median,
    Value(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct APConfig {
    pub damping: f64,
    pub max_iter: usize,
    pub convergence_iter: usize,
    pub preference: Preference,
    /// Seed of the tie-breaking noise added to the similarities.
    pub noise_seed: u64,
}

impl Default for APConfig {
    fn default() -> Self {
        Self {
            damping: 0.9,
            max_iter: 200,
            convergence_iter: 15,
            preference: Preference::Median,
            noise_seed: 0,
        }
    }
}

impl APConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(
            (0.5..1.0).contains(&self.damping),
            "damping {} outside [0.5, 1)",
            self.damping
        );
        ensure_arg!(
            self.max_iter >= self.convergence_iter && self.convergence_iter >= 1,
            "need max_iter >= convergence_iter >= 1"
        );
        if let Preference::Value(v) = self.preference {
            ensure_arg!(v.is_finite(), "preference must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct APResult {
    /// Exemplar point indices, ascending.
    pub exemplars: Vec<usize>,
    /// For each point, the index of its exemplar point.
    pub labels: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
}

impl APResult {
    pub fn num_clusters(&self) -> usize {
        self.exemplars.len()
    }

    /// Labels remapped to dense cluster ids `0..num_clusters` (exemplar order).
    pub fn cluster_ids(&self) -> Vec<usize> {
        self.labels
            .iter()
            .map(|l| {
                self.exemplars
                    .binary_search(l)
                    .expect("label is an exemplar")
            })
            .collect()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Negative squared Euclidean distances off the diagonal; the preference on it.
pub fn build_similarity(points: ArrayView2<f64>, preference: Preference) -> Result<Array2<f64>> {
    let n = points.nrows();
    ensure_arg!(n >= 1, "need at least one point");
    ensure_arg!(
        points.iter().all(|v| v.is_finite()),
        "points must be finite"
    );
    let mut s = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = points
                .row(i)
                .iter()
                .zip(points.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            s[[i, j]] = -d;
            s[[j, i]] = -d;
        }
    }
    let pref = match preference {
        Preference::Value(v) => v,
        Preference::Median => {
            let off: Vec<f64> = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| s[[i, j]])
                .collect();
            median(off)
        }
    };
    for i in 0..n {
        s[[i, i]] = pref;
    }
    Ok(s)
}

fn exemplar_set(r: &Array2<f64>, a: &Array2<f64>) -> Vec<usize> {
    (0..r.nrows())
        .filter(|&k| r[[k, k]] + a[[k, k]] > 0.0)
        .collect()
}

/// Assigns every non-exemplar to its most similar exemplar; exemplars label themselves.
fn assign(s: &Array2<f64>, exemplars: &[usize]) -> Vec<usize> {
    (0..s.nrows())
        .map(|i| {
            if exemplars.binary_search(&i).is_ok() {
                return i;
            }
            *exemplars
                .iter()
                .max_by(|&&x, &&y| s[[i, x]].total_cmp(&s[[i, y]]).then(y.cmp(&x)))
                .expect("non-empty exemplar set")
        })
        .collect()
}

/// Moves each exemplar to the member that maximises its cluster's net
/// similarity. Message passing only approximates this within a cluster.
fn refine(s: &Array2<f64>, exemplars: &[usize]) -> Vec<usize> {
    let labels = assign(s, exemplars);
    let mut out: Vec<usize> = exemplars
        .iter()
        .map(|&e| {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == e).collect();
            let score = |k: usize| members.iter().map(|&i| s[[i, k]]).sum::<f64>();
            *members
                .iter()
                .max_by(|&&x, &&y| score(x).total_cmp(&score(y)).then(y.cmp(&x)))
                .expect("exemplar labels itself")
        })
        .collect();
    out.sort_unstable();
    out
}

pub fn affinity_propagation(s: ArrayView2<f64>, cfg: &APConfig) -> Result<APResult> {
    cfg.validate()?;
    let (n, m) = s.dim();
    ensure_arg!(n == m, "similarity matrix must be square, got {n}x{m}");
    ensure_arg!(n >= 1, "similarity matrix is empty");
    ensure_arg!(
        s.iter().all(|v| v.is_finite()),
        "similarity matrix must be finite"
    );
    if n == 1 {
        return Ok(APResult {
            exemplars: vec![0],
            labels: vec![0],
            converged: true,
            iterations: 0,
        });
    }

    // Mutually equal similarities and preferences: messages cannot separate
    // the points, so decide directly.
    let off = s[[0, 1]];
    let pref = s[[0, 0]];
    let degenerate = (0..n).all(|i| (0..n).all(|j| s[[i, j]] == if i == j { pref } else { off }));
    if degenerate {
        let exemplars: Vec<usize> = if pref > off {
            (0..n).collect()
        } else {
            vec![0]
        };
        let labels = assign(&s.to_owned(), &exemplars);
        return Ok(APResult {
            exemplars,
            labels,
            converged: true,
            iterations: 0,
        });
    }

    let mut sim = s.to_owned();
    let mut noise_rng = rng_for(cfg.noise_seed, &[stream::AP_NOISE, n as u64]);
    for i in 0..n {
        for j in i..n {
            let scale = 1e-12 * sim[[i, j]].abs() + 1e-300;
            let eps = scale * noise_rng.random::<f64>();
            sim[[i, j]] += eps;
            if i != j {
                sim[[j, i]] += eps;
            }
        }
    }

    let lambda = cfg.damping;
    let mut r = Array2::<f64>::zeros((n, n));
    let mut a = Array2::<f64>::zeros((n, n));
    let mut last: Option<Vec<usize>> = None;
    let mut stable = 0usize;
    let mut converged = false;
    let mut iterations = 0;
    // Heavy damping keeps the exemplar set frozen long before the messages
    // settle, so stability alone stops too early. Also require small updates.
    let scale = sim
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let tol = SETTLE_TOL * scale;

    for it in 0..cfg.max_iter {
        iterations = it + 1;
        let mut delta = 0.0f64;
        // responsibilities
        for i in 0..n {
            let (mut best, mut second, mut best_k) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0);
            for k in 0..n {
                let v = a[[i, k]] + sim[[i, k]];
                if v > best {
                    second = best;
                    best = v;
                    best_k = k;
                } else if v > second {
                    second = v;
                }
            }
            for k in 0..n {
                let other = if k == best_k { second } else { best };
                let new = sim[[i, k]] - other;
                let step = (1.0 - lambda) * (new - r[[i, k]]);
                delta = delta.max(step.abs());
                r[[i, k]] += step;
            }
        }
        // availabilities
        for k in 0..n {
            let col_pos: f64 = (0..n).filter(|&i| i != k).map(|i| r[[i, k]].max(0.0)).sum();
            for i in 0..n {
                let new = if i == k {
                    col_pos
                } else {
                    (r[[k, k]] + col_pos - r[[i, k]].max(0.0)).min(0.0)
                };
                let step = (1.0 - lambda) * (new - a[[i, k]]);
                delta = delta.max(step.abs());
                a[[i, k]] += step;
            }
        }
        let ex = exemplar_set(&r, &a);
        if last.as_ref() == Some(&ex) {
            stable += 1;
        } else {
            stable = 1;
            last = Some(ex.clone());
        }
        if stable >= cfg.convergence_iter && !ex.is_empty() && delta <= tol {
            converged = true;
            break;
        }
    }

    let mut exemplars = last.unwrap_or_default();
    if exemplars.is_empty() {
        let k = (0..n)
            .max_by(|&x, &y| s[[x, x]].total_cmp(&s[[y, y]]).then(y.cmp(&x)))
            .expect("n >= 1");
        log::warn!("affinity propagation found no exemplar; falling back to one cluster");
        exemplars = vec![k];
        converged = false;
    } else if !converged {
        log::debug!(
            "affinity propagation did not converge in {} iterations",
            cfg.max_iter
        );
    }
    let s = s.to_owned();
    let exemplars = refine(&s, &exemplars);
    let labels = assign(&s, &exemplars);
    Ok(APResult {
        exemplars,
        labels,
        converged,
        iterations,
    })
}

/// Net similarity of a clustering: Σ_i S(i, label_i), where an exemplar's
/// term is its preference.
pub fn net_similarity(s: ArrayView2<f64>, labels: &[usize]) -> f64 {
    labels.iter().enumerate().map(|(i, &l)| s[[i, l]]).sum()
}

/// Clusters a video's pooled frame representations (2T×d, first view then
/// second view) and returns the clustering with exemplar rows as prototypes.
pub fn cluster_video_frames(
    frames: ArrayView2<f64>,
    cfg: &APConfig,
) -> Result<(APResult, SceneAssignment)> {
    let s = build_similarity(frames, cfg.preference)?;
    let result = affinity_propagation(s.view(), cfg)?;
    let prototypes = frames.select(ndarray::Axis(0), &result.exemplars);
    let labels = result.cluster_ids();
    if labels.len() != frames.nrows() {
        return Err(Error::Internal("label count mismatch".into()));
    }
    Ok((result, SceneAssignment { prototypes, labels }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn similarity_cases() {
        let s = build_similarity(array![[1.0, 2.0]].view(), Preference::Value(-3.0)).unwrap();
        assert_eq!(s, array![[-3.0]]);
        let same = build_similarity(Array2::ones((3, 2)).view(), Preference::Median).unwrap();
        assert!(same.iter().all(|&v| v == 0.0));
        let p = array![[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]];
        let s = build_similarity(p.view(), Preference::Median).unwrap();
        assert_eq!(s, s.t());
        assert_eq!(s[[0, 2]], -4.0);
        assert_eq!(s[[1, 2]], -5.0);
        assert_eq!(s[[0, 0]], -4.0);
    }

    #[test]
    fn single_point_is_its_own_exemplar() {
        let r = affinity_propagation(array![[0.0]].view(), &APConfig::default()).unwrap();
        assert_eq!(r.exemplars, vec![0]);
        assert_eq!(r.labels, vec![0]);
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let s =
            build_similarity(array![[1.0, 1.0], [1.0, 1.0]].view(), Preference::Median).unwrap();
        let r = affinity_propagation(s.view(), &APConfig::default()).unwrap();
        assert_eq!(r.num_clusters(), 1);
        assert_eq!(r.labels[0], r.labels[1]);
    }

    #[test]
    fn separated_groups_split() {
        let p = array![
            [0.0, 0.0],
            [0.05, 0.0],
            [0.0, 0.05],
            [10.0, 10.0],
            [10.05, 10.0],
            [10.0, 10.05]
        ];
        let s = build_similarity(p.view(), Preference::Median).unwrap();
        let cfg = APConfig::default();
        let r = affinity_propagation(s.view(), &cfg).unwrap();
        assert_eq!(r.num_clusters(), 2);
        assert!(r.iterations <= cfg.max_iter);
        let ids = r.cluster_ids();
        assert!(ids[..3].iter().all(|&c| c == ids[0]));
        assert!(ids[3..].iter().all(|&c| c == ids[3]));
        assert_ne!(ids[0], ids[3]);
    }

    #[test]
    fn invalid_inputs() {
        assert!(affinity_propagation(Array2::zeros((2, 3)).view(), &APConfig::default()).is_err());
        let cfg = APConfig {
            damping: 0.3,
            ..APConfig::default()
        };
        assert!(affinity_propagation(Array2::zeros((2, 2)).view(), &cfg).is_err());
    }

    #[test]
    fn identical_frames_give_zero_scene_term() {
        let frames = Array2::from_elem((6, 3), 0.7);
        let (r, a) = cluster_video_frames(frames.view(), &APConfig::default()).unwrap();
        assert_eq!(r.num_clusters(), 1);
        assert_eq!(a.labels.len(), 6);
        let (l, _) = crate::losses::scene_loss(frames.view(), &[a], 3, 0.5).unwrap();
        assert_eq!(l, 0.0);
    }
}
