use serde::{Deserialize, Serialize};

use super::BeatGrid;
use crate::error::{CoreError, Result};

/// Clamp for activations before taking logs.
const ACT_EPS: f64 = 1e-7;

/// Log-cost of each decoded beat. Far below any real score difference, it
/// only breaks exact ties, such as a single-frame impulse train that a
/// tempo and its double explain equally well, towards fewer beats.
const BEAT_PRIOR: f64 = 1e-6;

/// Tempo-phase beat model. Defaults follow the usual joint beat model
/// settings (55-215 bpm, transition lambda 100, 1/16 beat region).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DbnConfig {
    pub fps: f64,
    pub min_bpm: f64,
    pub max_bpm: f64,
    pub transition_lambda: f64,
    /// Fraction of each beat interval treated as the beat region.
    pub observation_lambda: f64,
    /// Activations below this at the clip edges are cropped before decoding.
    pub threshold: f64,
    /// Move each decoded beat to the activation peak near it: the beat
    /// region mirrored around the beat, at least one frame either side.
    pub correct: bool,
}

impl Default for DbnConfig {
    fn default() -> Self {
        Self {
            fps: 50.0,
            min_bpm: 55.0,
            max_bpm: 215.0,
            transition_lambda: 100.0,
            observation_lambda: 1.0 / 16.0,
            threshold: 0.0,
            correct: true,
        }
    }
}

impl DbnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0 && self.min_bpm > 0.0 && self.min_bpm < self.max_bpm) {
            return Err(CoreError::invalid("dbn: need fps > 0 and 0 < min_bpm < max_bpm"));
        }
        if !(self.transition_lambda > 0.0) {
            return Err(CoreError::invalid("dbn: transition_lambda must be positive"));
        }
        if !(self.observation_lambda > 0.0 && self.observation_lambda < 1.0) {
            return Err(CoreError::invalid("dbn: observation_lambda must be in (0, 1)"));
        }
        let (lo, hi) = self.interval_range();
        if lo < 1 || lo > hi {
            return Err(CoreError::invalid("dbn: tempo range admits no integer interval"));
        }
        Ok(())
    }

    /// Inclusive range of beat intervals in frames.
    pub fn interval_range(&self) -> (usize, usize) {
        let lo = (self.fps * 60.0 / self.max_bpm - 1e-9).ceil().max(1.0) as usize;
        let hi = (self.fps * 60.0 / self.min_bpm + 1e-9).floor() as usize;
        (lo, hi)
    }
}

struct StateSpace {
    intervals: Vec<usize>,
    offsets: Vec<usize>,
    n_states: usize,
    region: Vec<usize>,
}

impl StateSpace {
    fn new(cfg: &DbnConfig) -> Self {
        let (lo, hi) = cfg.interval_range();
        let intervals: Vec<usize> = (lo..=hi).collect();
        let mut offsets = Vec::with_capacity(intervals.len());
        let mut n = 0;
        for &tau in &intervals {
            offsets.push(n);
            n += tau;
        }
        let region = intervals
            .iter()
            .map(|&tau| ((tau as f64 * cfg.observation_lambda).ceil() as usize).max(1))
            .collect();
        Self {
            intervals,
            offsets,
            n_states: n,
            region,
        }
    }

    fn decode_state(&self, s: usize) -> (usize, usize) {
        let i = match self.offsets.binary_search(&s) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        (i, s - self.offsets[i])
    }
}

/// Viterbi decoding of a frame-wise beat activation into a beat grid.
///
/// Hidden states are (interval, phase) with the phase counting down to a
/// beat at zero. Interval changes happen only on beats.
pub fn dbn_decode(activations: &[f64], cfg: &DbnConfig) -> Result<BeatGrid> {
    cfg.validate()?;
    if activations.is_empty() {
        return Err(CoreError::invalid("dbn: empty activation sequence"));
    }
    if let Some(a) = activations.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(CoreError::invalid(format!("dbn: activation {a} outside [0, 1]")));
    }
    let (first, last) = if cfg.threshold > 0.0 {
        let above = |a: &&f64| **a >= cfg.threshold;
        match (
            activations.iter().position(|a| above(&a)),
            activations.iter().rposition(|a| above(&a)),
        ) {
            (Some(f), Some(l)) => (f, l),
            _ => return BeatGrid::new(Vec::new()),
        }
    } else {
        (0, activations.len() - 1)
    };
    let act = &activations[first..=last];
    let frames = viterbi(act, cfg);
    let times = frames
        .into_iter()
        .map(|f| (f + first) as f64 / cfg.fps)
        .collect();
    BeatGrid::new(times)
}

/// Beat frame indices within `act`.
fn viterbi(act: &[f64], cfg: &DbnConfig) -> Vec<usize> {
    let space = StateSpace::new(cfg);
    let n_int = space.intervals.len();
    let n = space.n_states;
    let t_len = act.len();

    // Interval change scores. Rows are left unnormalized: normalizing per
    // source makes keeping a short interval cheaper than keeping a long one,
    // which tips sparse evidence towards double tempo.
    let mut trans = vec![0.0f64; n_int * n_int];
    for i in 0..n_int {
        let from = space.intervals[i] as f64;
        for j in 0..n_int {
            trans[i * n_int + j] = -cfg.transition_lambda * (space.intervals[j] as f64 / from - 1.0).abs()
                - BEAT_PRIOR;
        }
    }

    let norm = 1.0 / cfg.observation_lambda - 1.0;
    let obs = |a: f64| {
        let a = a.clamp(ACT_EPS, 1.0 - ACT_EPS);
        (a.ln(), ((1.0 - a) / norm).ln())
    };
    let emit = |delta: &mut [f64], a: f64| {
        let (beat, other) = obs(a);
        for (i, &tau) in space.intervals.iter().enumerate() {
            let off = space.offsets[i];
            for phase in 0..tau {
                delta[off + phase] += if phase < space.region[i] { beat } else { other };
            }
        }
    };

    let mut delta = vec![-(n as f64).ln(); n];
    emit(&mut delta, act[0]);
    let mut back = vec![0u32; t_len * n];
    let mut next = vec![0.0f64; n];
    for t in 1..t_len {
        let bp = &mut back[t * n..(t + 1) * n];
        for i in 0..n_int {
            let off = space.offsets[i];
            let tau = space.intervals[i];
            for phase in 0..tau - 1 {
                next[off + phase] = delta[off + phase + 1];
                bp[off + phase] = (off + phase + 1) as u32;
            }
        }
        for j in 0..n_int {
            let target = space.offsets[j] + space.intervals[j] - 1;
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for i in 0..n_int {
                let v = delta[space.offsets[i]] + trans[i * n_int + j];
                if v > best {
                    best = v;
                    arg = space.offsets[i];
                }
            }
            next[target] = best;
            bp[target] = arg as u32;
        }
        emit(&mut next, act[t]);
        std::mem::swap(&mut delta, &mut next);
    }

    let mut state = (0..n)
        .fold((0, f64::NEG_INFINITY), |(bi, bv), s| {
            if delta[s] > bv {
                (s, delta[s])
            } else {
                (bi, bv)
            }
        })
        .0;
    let mut path = vec![0usize; t_len];
    for t in (0..t_len).rev() {
        path[t] = state;
        if t > 0 {
            state = back[t * n + state] as usize;
        }
    }

    let decoded: Vec<(usize, usize)> = path.iter().map(|&s| space.decode_state(s)).collect();
    let mut beats = Vec::new();
    let min_gap = cfg.fps * 60.0 / cfg.max_bpm - 1e-9;
    let max_gap = cfg.fps * 60.0 / cfg.min_bpm + 1e-9;
    let mut t = 0;
    while t < t_len {
        let (i, phase) = decoded[t];
        if phase >= space.region[i] {
            t += 1;
            continue;
        }
        // A beat-region run ends at phase zero unless the clip ends first.
        let start = t;
        while t < t_len && decoded[t].1 != 0 {
            t += 1;
        }
        if t == t_len {
            break;
        }
        let zero = t;
        t += 1;
        if !cfg.correct {
            beats.push(zero);
            continue;
        }
        // the beat region, mirrored past the beat and at least one frame
        // either side
        let reach = (zero - start).max(1);
        let (lo, hi) = (zero.saturating_sub(reach), (zero + reach).min(t_len - 1));
        let allowed: Vec<usize> = (lo..=hi)
            .filter(|&c| match beats.last() {
                Some(&prev) => {
                    let gap = (c - prev) as f64;
                    gap >= min_gap && gap <= max_gap
                }
                None => true,
            })
            .collect();
        let allowed_len = allowed.len();
        let best = allowed.iter().map(|&c| act[c]).fold(f64::NEG_INFINITY, f64::max);
        // the middle of a flat-topped peak
        let peak: Vec<usize> = allowed.into_iter().filter(|&c| act[c] == best).collect();
        // a flat window has no peak to move to
        let pick = if peak.is_empty() || peak.len() == allowed_len {
            zero
        } else {
            peak[(peak.len() - 1) / 2]
        };
        beats.push(pick);
    }
    beats
}
