//! Deterministic synthetic corpora with known labels.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use mirssl_autodiff::mix64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{write_wav, AudioClip, SAMPLE_RATE};
use crate::error::{CoreError, Result};
use crate::manifest::{LabelFile, LabelKind, Manifest, ManifestRow, Split, TaskLabel};
use crate::metrics::{KeyLabel, Mode};

pub const MIN_MIDI: u8 = 36;
pub const MAX_MIDI: u8 = 84;
pub const MIN_BPM: f64 = 40.0;
pub const MAX_BPM: f64 = 240.0;
pub const TAG_NAMES: [&str; 8] = [
    "sine", "saw", "noise", "tremolo", "bass", "square", "clicks", "chirp",
];
const PEAK: f32 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthTask {
    Pitch,
    Beat,
    Key,
    Tags,
    Emotion,
}

impl SynthTask {
    pub fn label_kind(self) -> LabelKind {
        match self {
            SynthTask::Pitch => LabelKind::Multiclass,
            SynthTask::Beat => LabelKind::Beat,
            SynthTask::Key => LabelKind::Key,
            SynthTask::Tags => LabelKind::Multilabel {
                n_tags: TAG_NAMES.len(),
            },
            SynthTask::Emotion => LabelKind::Regression,
        }
    }
}

impl std::str::FromStr for SynthTask {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pitch" => Ok(SynthTask::Pitch),
            "beat" => Ok(SynthTask::Beat),
            "key" => Ok(SynthTask::Key),
            "tags" => Ok(SynthTask::Tags),
            "emotion" => Ok(SynthTask::Emotion),
            _ => Err(CoreError::invalid(format!("unknown synth task `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub task: SynthTask,
    pub n_clips: usize,
    /// Seconds.
    pub duration: f64,
    pub seed: u64,
    #[serde(default = "default_rate")]
    pub sample_rate: u32,
}

fn default_rate() -> u32 {
    SAMPLE_RATE
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clips == 0 {
            return Err(CoreError::invalid("n_clips must be positive"));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(CoreError::invalid(format!("duration {} must be positive", self.duration)));
        }
        if self.sample_rate == 0 {
            return Err(CoreError::invalid("sample rate must be positive"));
        }
        Ok(())
    }

    fn samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub clip: AudioClip,
    pub label: TaskLabel,
}

pub fn midi_to_hz(midi: f64) -> f64 {
    440.0 * 2f64.powf((midi - 69.0) / 12.0)
}

fn check_duration(duration: f64) -> Result<usize> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(CoreError::invalid(format!("duration {duration} must be positive")));
    }
    let n = (duration * SAMPLE_RATE as f64).round() as usize;
    if n == 0 {
        return Err(CoreError::invalid(format!("duration {duration} is shorter than one sample")));
    }
    Ok(n)
}

/// Scales to the shared peak level; silent buffers stay silent.
fn finish(mut x: Vec<f64>) -> Result<AudioClip> {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = PEAK as f64 / peak;
        x.iter_mut().for_each(|v| *v *= g);
    }
    AudioClip::new(x.into_iter().map(|v| v as f32).collect(), SAMPLE_RATE)
}

/// Short linear fades so clips start and end at zero.
fn fade(x: &mut [f64], len: usize) {
    let n = x.len();
    let len = len.min(n / 2);
    for i in 0..len {
        let g = i as f64 / len as f64;
        x[i] *= g;
        x[n - 1 - i] *= g;
    }
}

fn add_partials(out: &mut [f64], start: usize, f0: f64, amps: &[f64], phases: &[f64], env: impl Fn(f64) -> f64) {
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    for (i, v) in out[start..].iter_mut().enumerate() {
        let t = i as f64 / SAMPLE_RATE as f64;
        let e = env(t);
        if e == 0.0 {
            continue;
        }
        let mut s = 0.0;
        for (k, (&a, &p)) in amps.iter().zip(phases).enumerate() {
            let f = f0 * (k + 1) as f64;
            if f < nyquist {
                s += a * (TAU * f * t + p).sin();
            }
        }
        *v += e * s;
    }
}

/// Harmonic tone with 4 to 8 partials of seeded random amplitude.
pub fn gen_pitch_clip(midi: u8, duration: f64, seed: u64) -> Result<LabeledClip> {
    if !(MIN_MIDI..=MAX_MIDI).contains(&midi) {
        return Err(CoreError::invalid(format!(
            "midi {midi} outside {MIN_MIDI}..={MAX_MIDI}"
        )));
    }
    let n = check_duration(duration)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let partials = rng.gen_range(4..=8);
    // the fundamental stays dominant so the pitch is unambiguous
    let amps: Vec<f64> = (0..partials)
        .map(|k| if k == 0 { 1.0 } else { rng.gen_range(0.1..0.7) })
        .collect();
    let phases: Vec<f64> = (0..partials).map(|_| rng.gen_range(0.0..TAU)).collect();
    let mut x = vec![0.0; n];
    add_partials(&mut x, 0, midi_to_hz(midi as f64), &amps, &phases, |_| 1.0);
    fade(&mut x, SAMPLE_RATE as usize / 100);
    Ok(LabeledClip {
        clip: finish(x)?,
        label: TaskLabel::Class(midi as u32),
    })
}

/// Decaying noise clicks on an exact grid from t = 0 over faint noise.
pub fn gen_click_track(bpm: f64, duration: f64, seed: u64) -> Result<LabeledClip> {
    if !(MIN_BPM..=MAX_BPM).contains(&bpm) {
        return Err(CoreError::invalid(format!("bpm {bpm} outside {MIN_BPM}..={MAX_BPM}")));
    }
    let n = check_duration(duration)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.01..0.01)).collect();
    let count = (duration * bpm / 60.0 + 1e-9).floor() as usize;
    let period = 60.0 / bpm;
    let times: Vec<f64> = (0..count).map(|k| k as f64 * period).collect();
    let click_len = SAMPLE_RATE as usize * 3 / 100;
    let decay = SAMPLE_RATE as f64 * 0.004;
    for &t in &times {
        let start = (t * SAMPLE_RATE as f64).round() as usize;
        for i in 0..click_len.min(n.saturating_sub(start)) {
            x[start + i] += rng.gen_range(-1.0..1.0) * (-(i as f64) / decay).exp();
        }
    }
    Ok(LabeledClip {
        // the clicks dominate the floor, so scaling keeps them at the peak
        clip: finish(x)?,
        label: TaskLabel::Beats(times),
    })
}

fn scale_steps(mode: Mode) -> [u8; 7] {
    match mode {
        Mode::Major => [0, 2, 4, 5, 7, 9, 11],
        Mode::Minor => [0, 2, 3, 5, 7, 8, 10],
    }
}

/// Arpeggiated diatonic triads; every other chord is the tonic triad.
pub fn gen_key_clip(key: KeyLabel, duration: f64, seed: u64) -> Result<LabeledClip> {
    let n = check_duration(duration)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = scale_steps(key.mode());
    let note_len = SAMPLE_RATE as usize / 8;
    let mut x = vec![0.0; n];
    let mut start = 0;
    let mut chord = 0;
    while start < n {
        let degree = if chord % 2 == 0 { 0 } else { rng.gen_range(1..7) };
        let octave = rng.gen_range(4..=5) as f64;
        for j in 0..3 {
            if start >= n {
                break;
            }
            let d = degree + 2 * j;
            let pc = key.tonic() + steps[d % 7];
            let midi = 12.0 * (octave + 1.0) + pc as f64 + 12.0 * (d / 7) as f64;
            let amps = [1.0, 0.5, 0.25];
            let phases = [0.0; 3];
            let tau = 0.12;
            let len = note_len * 2;
            add_partials(&mut x[..(start + len).min(n)], start, midi_to_hz(midi), &amps, &phases, |t| {
                (t * 200.0).min(1.0) * (-t / tau).exp()
            });
            start += note_len;
        }
        chord += 1;
    }
    fade(&mut x, SAMPLE_RATE as usize / 100);
    Ok(LabeledClip {
        clip: finish(x)?,
        label: TaskLabel::Key(key),
    })
}

/// Sums one audible component per set tag; see [`TAG_NAMES`].
pub fn gen_tag_clip(tags: u64, duration: f64, seed: u64) -> Result<LabeledClip> {
    if tags == 0 {
        return Err(CoreError::invalid("tag set is empty"));
    }
    if tags >> TAG_NAMES.len() != 0 {
        return Err(CoreError::invalid(format!("tag bits {tags:#x} beyond {} tags", TAG_NAMES.len())));
    }
    let n = check_duration(duration)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = SAMPLE_RATE as f64;
    let mut x = vec![0.0; n];
    let base = midi_to_hz(rng.gen_range(55.0..72.0));
    for tag in 0..TAG_NAMES.len() {
        if tags & (1 << tag) == 0 {
            continue;
        }
        let comp: Vec<f64> = match TAG_NAMES[tag] {
            "sine" => (0..n).map(|i| (TAU * base * 2.0 * i as f64 / sr).sin()).collect(),
            "saw" => {
                let f = base;
                (0..n)
                    .map(|i| {
                        let t = i as f64 / sr;
                        (1..=20)
                            .filter(|&k| f * k as f64 * 2.0 < sr)
                            .map(|k| (TAU * f * k as f64 * t).sin() / k as f64)
                            .sum::<f64>()
                            * 0.6
                    })
                    .collect()
            }
            "noise" => (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            "tremolo" => {
                let f = base * 1.5;
                (0..n)
                    .map(|i| {
                        let t = i as f64 / sr;
                        (0.5 + 0.5 * (TAU * 6.0 * t).sin()) * (TAU * f * t).sin()
                    })
                    .collect()
            }
            "bass" => {
                let f = rng.gen_range(55.0..110.0);
                (0..n).map(|i| (TAU * f * i as f64 / sr).sin()).collect()
            }
            "square" => {
                let f = base * 0.75;
                (0..n)
                    .map(|i| {
                        let t = i as f64 / sr;
                        (1..=19)
                            .step_by(2)
                            .filter(|&k| f * k as f64 * 2.0 < sr)
                            .map(|k| (TAU * f * k as f64 * t).sin() / k as f64)
                            .sum::<f64>()
                            * 0.6
                    })
                    .collect()
            }
            "clicks" => {
                let period = (sr / 4.0) as usize;
                (0..n)
                    .map(|i| {
                        let k = i % period;
                        if k < 480 {
                            rng.gen_range(-1.0..1.0) * (-(k as f64) / 60.0).exp()
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
            "chirp" => {
                // exponential sweep from 300 Hz to 3 kHz over the clip
                let d = n as f64 / sr;
                let k = (3000.0f64 / 300.0).ln() / d;
                (0..n)
                    .map(|i| {
                        let t = i as f64 / sr;
                        0.5 * (TAU * 300.0 * ((k * t).exp() - 1.0) / k).sin()
                    })
                    .collect()
            }
            _ => unreachable!(),
        };
        x.iter_mut().zip(comp).for_each(|(a, b)| *a += b);
    }
    fade(&mut x, SAMPLE_RATE as usize / 100);
    Ok(LabeledClip {
        clip: finish(x)?,
        label: TaskLabel::Tags(tags),
    })
}

/// Note stream whose rate and brightness grow with arousal and whose
/// chance of a major third grows with valence.
pub fn gen_emotion_clip(valence: f64, arousal: f64, duration: f64, seed: u64) -> Result<LabeledClip> {
    for (name, v) in [("valence", valence), ("arousal", arousal)] {
        if !(-1.0..=1.0).contains(&v) {
            return Err(CoreError::invalid(format!("{name} {v} outside [-1, 1]")));
        }
    }
    let n = check_duration(duration)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = 2.0 + 3.0 * (arousal + 1.0);
    let partials = 2 + (3.0 * (arousal + 1.0)).round() as usize;
    let p_major = (valence + 1.0) / 2.0;
    let note_len = (SAMPLE_RATE as f64 / rate) as usize;
    let tonic = 60.0 + rng.gen_range(0..12) as f64;
    let mut x = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let third = if rng.gen_bool(p_major) { 4.0 } else { 3.0 };
        let step = [0.0, third, 7.0, 12.0][rng.gen_range(0..4)];
        let amps: Vec<f64> = (1..=partials).map(|k| 1.0 / k as f64).collect();
        let phases = vec![0.0; partials];
        let tau = 0.3 / rate;
        let end = (start + note_len).min(n);
        add_partials(&mut x[..end], start, midi_to_hz(tonic + step), &amps, &phases, |t| {
            (t * 400.0).min(1.0) * (-t / tau).exp()
        });
        start += note_len;
    }
    fade(&mut x, SAMPLE_RATE as usize / 200);
    Ok(LabeledClip {
        clip: finish(x)?,
        label: TaskLabel::Pair(valence, arousal),
    })
}

/// Clip `index` of a corpus; labels are drawn from the clip's own seed.
pub fn gen_indexed_clip(spec: &SynthSpec, index: usize) -> Result<LabeledClip> {
    let seed = mix64(spec.seed ^ mix64(index as u64 + 1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let audio_seed = rng.gen();
    let d = spec.duration;
    let lc = match spec.task {
        SynthTask::Pitch => gen_pitch_clip(rng.gen_range(MIN_MIDI..=MAX_MIDI), d, audio_seed)?,
        SynthTask::Beat => gen_click_track(rng.gen_range(MIN_BPM as u32..=MAX_BPM as u32) as f64, d, audio_seed)?,
        SynthTask::Key => {
            let key = KeyLabel::from_index(rng.gen_range(0..24))?;
            gen_key_clip(key, d, audio_seed)?
        }
        SynthTask::Tags => gen_tag_clip(rng.gen_range(1..1u64 << TAG_NAMES.len()), d, audio_seed)?,
        SynthTask::Emotion => {
            let v = rng.gen_range(-1.0..=1.0);
            let a = rng.gen_range(-1.0..=1.0);
            gen_emotion_clip(v, a, d, audio_seed)?
        }
    };
    if spec.sample_rate == SAMPLE_RATE {
        Ok(lc)
    } else {
        Ok(LabeledClip {
            clip: crate::dsp::resample(&lc.clip, spec.sample_rate)?,
            label: lc.label,
        })
    }
}

/// 8:1:1 split by ranking a hash of each index; stable under regeneration
/// and independent of the corpus seed.
pub fn split_of(n_clips: usize) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n_clips).collect();
    order.sort_by_key(|&i| (mix64(i as u64 ^ 0x5EED_5EED), i));
    let n_train = n_clips * 8 / 10;
    let n_valid = n_clips / 10;
    let mut out = vec![Split::Test; n_clips];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    out
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const LABEL_FILE: &str = "labels.tsv";

/// Writes `audio/NNNNN.wav`, the label file and the manifest under
/// `out_dir`; returns the manifest path.
pub fn gen_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    let audio = out_dir.join("audio");
    fs::create_dir_all(&audio).map_err(|e| CoreError::io(&audio, e))?;
    let splits = split_of(spec.n_clips);
    let mut rows = Vec::with_capacity(spec.n_clips);
    let mut labels = LabelFile::new(spec.task.label_kind());
    for (i, split) in splits.into_iter().enumerate() {
        let lc = gen_indexed_clip(spec, i)?;
        let rel = format!("audio/{i:05}.wav");
        write_wav(&out_dir.join(&rel), &lc.clip)?;
        debug_assert_eq!(lc.clip.len(), spec.samples());
        rows.push(ManifestRow {
            path: rel.clone(),
            samples: lc.clip.len() as u64,
            split: Some(split),
        });
        labels.insert(rel, lc.label)?;
    }
    labels.write(&out_dir.join(LABEL_FILE))?;
    let manifest = Manifest::new(out_dir, rows)?;
    let path = out_dir.join(MANIFEST_FILE);
    manifest.write(&path)?;
    Ok(path)
}
