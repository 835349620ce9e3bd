//! K-means codebooks and frame pseudo-labels.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{AudioClip, FeatureKind, FeatureMatrix};
use crate::encoder::Model;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Stop when the relative inertia improvement drops below this.
    pub tol: f64,
    /// Fit on a seeded subsample when the corpus has more frames.
    pub frame_budget: usize,
    pub standardize: bool,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 500,
            max_iter: 100,
            tol: 1e-4,
            frame_budget: 2_000_000,
            standardize: true,
        }
    }
}

/// Per-dimension mean and standard deviation recorded at fit time.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dims: usize,
    kind: FeatureKind,
    norm: Option<NormStats>,
    centroids: Vec<f32>,
}

impl Codebook {
    pub fn new(
        k: usize,
        dims: usize,
        kind: FeatureKind,
        norm: Option<NormStats>,
        centroids: Vec<f32>,
    ) -> Result<Self> {
        if k == 0 || centroids.len() != k * dims {
            return Err(CoreError::invalid(format!(
                "codebook {k}x{dims} with {} centroid values",
                centroids.len()
            )));
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(CoreError::invalid("non-finite centroid"));
        }
        if let Some(n) = &norm {
            if n.mean.len() != dims || n.std.len() != dims || n.std.iter().any(|s| !(*s > 0.0)) {
                return Err(CoreError::invalid("codebook normalization stats"));
            }
        }
        Ok(Self {
            k,
            dims,
            kind,
            norm,
            centroids,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn norm(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid(&self, j: usize) -> &[f32] {
        &self.centroids[j * self.dims..(j + 1) * self.dims]
    }

    fn standardize_into(&self, row: &[f32], out: &mut [f64]) {
        match &self.norm {
            Some(n) => {
                for i in 0..row.len() {
                    out[i] = (row[i] as f64 - n.mean[i] as f64) / n.std[i] as f64;
                }
            }
            None => {
                for i in 0..row.len() {
                    out[i] = row[i] as f64;
                }
            }
        }
    }

    /// Nearest centroid to an already standardized row; ties go to the
    /// lowest index.
    fn nearest(&self, z: &[f64]) -> (u32, f64) {
        let mut best = (0u32, f64::INFINITY);
        for j in 0..self.k {
            let d: f64 = self
                .centroid(j)
                .iter()
                .zip(z)
                .map(|(&c, &x)| {
                    let e = x - c as f64;
                    e * e
                })
                .sum();
            if d < best.1 {
                best = (j as u32, d);
            }
        }
        best
    }

    /// Cluster ids for row-major `rows` with `dims` columns.
    pub fn assign_rows(&self, rows: &[f32]) -> Result<Vec<u32>> {
        if rows.len() % self.dims != 0 {
            return Err(CoreError::invalid("row data not a multiple of codebook dims"));
        }
        let mut z = vec![0.0; self.dims];
        Ok(rows
            .chunks_exact(self.dims)
            .map(|r| {
                self.standardize_into(r, &mut z);
                self.nearest(&z).0
            })
            .collect())
    }
}

/// Per-frame cluster ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSequence {
    pub ids: Vec<u32>,
    pub frame_rate: f32,
}

impl LabelSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Nearest-centroid labels for every frame of `features`.
pub fn assign(codebook: &Codebook, features: &FeatureMatrix) -> Result<LabelSequence> {
    if features.dims() != codebook.dims {
        return Err(CoreError::Mismatch(format!(
            "features have {} dims, codebook {}",
            features.dims(),
            codebook.dims
        )));
    }
    Ok(LabelSequence {
        ids: codebook.assign_rows(features.values())?,
        frame_rate: features.frame_rate(),
    })
}

/// Outcome of a K-means fit with the internals tests inspect.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Final assignment of every fit row under the stored codebook.
    pub assignments: Vec<u32>,
    /// Inertia after each assignment step, in standardized units.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    /// Centroids before rounding to `f32`, in the fit space (standardized
    /// when enabled).
    pub centroids: Vec<f64>,
}

impl KMeansFit {
    pub fn final_inertia(&self) -> f64 {
        *self.inertia_history.last().unwrap_or(&0.0)
    }
}

/// Stacks frames of several matrices, subsampling uniformly with `seed`
/// when there are more than `budget` frames.
pub fn stack_rows(mats: &[FeatureMatrix], budget: usize, seed: u64) -> Result<(Vec<f32>, usize)> {
    let dims = mats.first().map_or(0, |m| m.dims());
    if mats.iter().any(|m| m.dims() != dims) {
        return Err(CoreError::Mismatch("feature matrices differ in dims".into()));
    }
    let total: usize = mats.iter().map(|m| m.frames()).sum();
    if total <= budget {
        let mut rows = Vec::with_capacity(total * dims);
        for m in mats {
            rows.extend_from_slice(m.values());
        }
        return Ok((rows, dims));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5AB5_A3B1);
    let mut picked = sample(&mut rng, total, budget).into_vec();
    picked.sort_unstable();
    let mut rows = Vec::with_capacity(budget * dims);
    let (mut mat, mut base) = (0, 0);
    for idx in picked {
        while idx >= base + mats[mat].frames() {
            base += mats[mat].frames();
            mat += 1;
        }
        rows.extend_from_slice(mats[mat].row(idx - base));
    }
    Ok((rows, dims))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding on standardized rows.
pub fn fit_kmeans(
    rows: &[f32],
    dims: usize,
    cfg: &KMeansConfig,
    seed: u64,
    kind: FeatureKind,
) -> Result<KMeansFit> {
    let k = cfg.k;
    if dims == 0 || rows.len() % dims != 0 {
        return Err(CoreError::invalid("k-means rows do not match dims"));
    }
    let n = rows.len() / dims;
    if k == 0 || n < k {
        return Err(CoreError::invalid(format!("k-means needs at least k={k} rows, got {n}")));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::invalid("non-finite feature in k-means input"));
    }

    let norm = cfg.standardize.then(|| {
        let mut mean = vec![0.0f64; dims];
        for r in rows.chunks_exact(dims) {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0f64; dims];
        for r in rows.chunks_exact(dims) {
            for ((s, &v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v as f64 - m) * (v as f64 - m);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n as f64).sqrt() as f32;
                if s > 0.0 && s.is_finite() {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        NormStats {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std,
        }
    });
    // Standardize exactly as `Codebook::assign_rows` will.
    let mut data = vec![0.0f64; n * dims];
    for (r, out) in rows.chunks_exact(dims).zip(data.chunks_exact_mut(dims)) {
        for i in 0..dims {
            out[i] = match &norm {
                Some(s) => (r[i] as f64 - s.mean[i] as f64) / s.std[i] as f64,
                None => r[i] as f64,
            };
        }
    }
    let point = |i: usize| &data[i * dims..(i + 1) * dims];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![0.0f64; k * dims];
    let first = rng.gen_range(0..n);
    centroids[..dims].copy_from_slice(point(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), &centroids[..dims])).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centroids[c * dims..(c + 1) * dims].copy_from_slice(point(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), &centroids[c * dims..(c + 1) * dims]));
        }
    }

    let assign_all = |centroids: &[f64], labels: &mut [u32], dist: &mut [f64]| -> f64 {
        let mut inertia = 0.0;
        for i in 0..n {
            let p = point(i);
            let mut best = (0u32, f64::INFINITY);
            for j in 0..k {
                let d = sq_dist(p, &centroids[j * dims..(j + 1) * dims]);
                if d < best.1 {
                    best = (j as u32, d);
                }
            }
            labels[i] = best.0;
            dist[i] = best.1;
            inertia += best.1;
        }
        inertia
    };

    let mut labels = vec![0u32; n];
    let mut dist = vec![0.0f64; n];
    let mut history = vec![assign_all(&centroids, &mut labels, &mut dist)];
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        // Update step: means, with empty clusters moved onto the points
        // farthest from their current centroid.
        let mut sums = vec![0.0f64; k * dims];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let j = labels[i] as usize;
            counts[j] += 1;
            for (s, &v) in sums[j * dims..(j + 1) * dims].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        let mut far: Vec<usize> = Vec::new();
        if counts.iter().any(|&c| c == 0) {
            far = (0..n).collect();
            far.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
            far.reverse();
        }
        for j in 0..k {
            let c = &mut centroids[j * dims..(j + 1) * dims];
            if counts[j] > 0 {
                for (cv, s) in c.iter_mut().zip(&sums[j * dims..(j + 1) * dims]) {
                    *cv = s / counts[j] as f64;
                }
            } else if let Some(p) = far.pop() {
                c.copy_from_slice(point(p));
            }
        }
        let previous = labels.clone();
        let inertia = assign_all(&centroids, &mut labels, &mut dist);
        let last = *history.last().unwrap();
        debug_assert!(inertia <= last, "inertia rose from {last} to {inertia}");
        history.push(inertia);
        if labels == previous || (last - inertia) / last.max(f64::MIN_POSITIVE) < cfg.tol {
            break;
        }
    }

    let codebook = Codebook::new(
        k,
        dims,
        kind,
        norm,
        centroids.iter().map(|&c| c as f32).collect(),
    )?;
    let assignments = codebook.assign_rows(rows)?;
    Ok(KMeansFit {
        codebook,
        assignments,
        inertia_history: history,
        iterations,
        centroids,
    })
}

/// Fits a codebook on one encoder layer's activations (no masking) and
/// labels every clip with it.
pub fn fit_second_iteration(
    model: &Model,
    clips: &[AudioClip],
    layer: usize,
    cfg: &KMeansConfig,
    seed: u64,
) -> Result<(Codebook, Vec<LabelSequence>)> {
    let n_layers = model.config().encoder.n_layers;
    if layer > n_layers {
        return Err(CoreError::invalid(format!(
            "layer {layer} out of range: encoder has {} outputs",
            n_layers + 1
        )));
    }
    let mut mats = Vec::with_capacity(clips.len());
    for clip in clips {
        mats.push(model.layer_features(clip, layer)?);
    }
    let (rows, dims) = stack_rows(&mats, cfg.frame_budget, seed)?;
    let fit = fit_kmeans(&rows, dims, cfg, seed, FeatureKind::Deep)?;
    let labels = mats
        .iter()
        .map(|m| assign(&fit.codebook, m))
        .collect::<Result<Vec<_>>>()?;
    Ok((fit.codebook, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg(k: usize) -> KMeansConfig {
        KMeansConfig {
            k,
            ..KMeansConfig::default()
        }
    }

    fn blobs(seed: u64) -> (Vec<f32>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for i in 0..60 {
            let c = i % 2;
            let center = if c == 0 { [0.0, 0.0] } else { [100.0, -100.0] };
            rows.push(center[0] + rng.gen_range(-1.0f32..1.0));
            rows.push(center[1] + rng.gen_range(-1.0f32..1.0));
            truth.push(c);
        }
        (rows, truth)
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let (rows, truth) = blobs(3);
        let fit = fit_kmeans(&rows, 2, &cfg(2), 11, FeatureKind::Mfcc).unwrap();
        let a = &fit.assignments;
        for i in 0..truth.len() {
            for j in 0..truth.len() {
                assert_eq!(truth[i] == truth[j], a[i] == a[j]);
            }
        }
    }

    #[test]
    fn distinct_points_give_zero_inertia() {
        let rows: Vec<f32> = (0..7).flat_map(|i| [i as f32, (i * i) as f32]).collect();
        let fit = fit_kmeans(&rows, 2, &cfg(7), 5, FeatureKind::Mfcc).unwrap();
        assert!(fit.final_inertia() < 1e-20);
    }

    #[test]
    fn tie_breaks_to_lowest_index() {
        let cb = Codebook::new(
            6,
            1,
            FeatureKind::Mfcc,
            None,
            vec![10.0, 10.0, -1.0, 10.0, 10.0, 1.0],
        )
        .unwrap();
        assert_eq!(cb.assign_rows(&[0.0]).unwrap(), vec![2]);
        assert_eq!(cb.assign_rows(&[1.0]).unwrap(), vec![5]);
    }

    #[test]
    fn rows_equal_to_centroids() {
        let cb = Codebook::new(3, 2, FeatureKind::Deep, None, vec![0.0, 1.0, 5.0, 5.0, -3.0, 2.0]).unwrap();
        for j in 0..3 {
            assert_eq!(cb.assign_rows(cb.centroid(j)).unwrap(), vec![j as u32]);
        }
    }

    #[test]
    fn errors() {
        assert!(fit_kmeans(&[1.0, 2.0], 1, &cfg(3), 0, FeatureKind::Mfcc).is_err());
        assert!(fit_kmeans(&[f32::NAN, 2.0], 1, &cfg(1), 0, FeatureKind::Mfcc).is_err());
        let cb = Codebook::new(1, 2, FeatureKind::Mfcc, None, vec![0.0, 0.0]).unwrap();
        let f = FeatureMatrix::new(vec![0.0; 3], 1, 3, 50.0, FeatureKind::Mfcc).unwrap();
        assert!(assign(&cb, &f).is_err());
    }

    #[test]
    fn fit_assignments_match_assign() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<f32> = (0..400 * 3).map(|_| rng.gen_range(-5.0f32..5.0)).collect();
        let fit = fit_kmeans(&rows, 3, &cfg(6), 2, FeatureKind::Mfcc).unwrap();
        let f = FeatureMatrix::new(rows, 400, 3, 50.0, FeatureKind::Mfcc).unwrap();
        assert_eq!(assign(&fit.codebook, &f).unwrap().ids, fit.assignments);
    }

    #[test]
    fn subsampling_respects_budget_and_seed() {
        let mats: Vec<FeatureMatrix> = (0..4)
            .map(|m| {
                let v: Vec<f32> = (0..50).map(|i| (m * 100 + i) as f32).collect();
                FeatureMatrix::new(v, 50, 1, 50.0, FeatureKind::Mfcc).unwrap()
            })
            .collect();
        let (a, _) = stack_rows(&mats, 30, 1).unwrap();
        let (b, _) = stack_rows(&mats, 30, 1).unwrap();
        assert_eq!(a.len(), 30);
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        let (all, _) = stack_rows(&mats, 1000, 1).unwrap();
        assert_eq!(all.len(), 200);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn refit_is_byte_identical(seed in 0u64..1000, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<f32> = (0..60).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
            let a = fit_kmeans(&rows, 2, &cfg(k), seed, FeatureKind::Mfcc).unwrap();
            let b = fit_kmeans(&rows, 2, &cfg(k), seed, FeatureKind::Mfcc).unwrap();
            prop_assert_eq!(&a.codebook, &b.codebook);
            let ids = a.codebook.assign_rows(&rows).unwrap();
            prop_assert_eq!(&ids, &a.codebook.assign_rows(&rows).unwrap());
            for w in a.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }
    }
}
