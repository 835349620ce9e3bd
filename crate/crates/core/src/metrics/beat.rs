use crate::error::{CoreError, Result};

/// Matching window for beat evaluation in seconds.
pub const BEAT_TOLERANCE: f64 = 0.02;

/// Strictly increasing, non-negative beat times in seconds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BeatGrid {
    times: Vec<f64>,
}

impl BeatGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(CoreError::invalid("beat times must be finite and non-negative"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoreError::invalid("beat times must be strictly increasing"));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Number of one-to-one matches within `tolerance`, found greedily in time
/// order. On sorted grids this is a maximum matching.
pub(crate) fn count_matches(est: &[f64], reference: &[f64], tolerance: f64) -> usize {
    let (mut i, mut j, mut hits) = (0, 0, 0);
    while i < est.len() && j < reference.len() {
        let d = est[i] - reference[j];
        if d.abs() <= tolerance + 1e-9 {
            hits += 1;
            i += 1;
            j += 1;
        } else if d < 0.0 {
            i += 1;
        } else {
            j += 1;
        }
    }
    hits
}

/// Beat F-measure with one-to-one matching inside `tolerance` seconds.
pub fn beat_f_measure(est: &BeatGrid, reference: &BeatGrid, tolerance: f64) -> f64 {
    match (est.is_empty(), reference.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let hits = count_matches(&est.times, &reference.times, tolerance) as f64;
    if hits == 0.0 {
        return 0.0;
    }
    let p = hits / est.len() as f64;
    let r = hits / reference.len() as f64;
    2.0 * p * r / (p + r)
}
