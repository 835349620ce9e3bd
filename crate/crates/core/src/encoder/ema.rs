use mirssl_autodiff::ParamStore;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Linear anneal of the teacher decay from `start` to `end` over the first
/// `anneal_frac` of training, then constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TauSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_frac: f64,
}

impl Default for TauSchedule {
    fn default() -> Self {
        Self {
            start: 0.999,
            end: 0.9999,
            anneal_frac: 0.3,
        }
    }
}

impl TauSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.start)
            && (0.0..=1.0).contains(&self.end)
            && (0.0..=1.0).contains(&self.anneal_frac);
        if !ok {
            return Err(CoreError::Config {
                path: "pretrain.tau".into(),
                detail: "start, end and anneal_frac must lie in [0, 1]".into(),
            });
        }
        Ok(())
    }

    /// Decay used after optimizer step `step` (1-based) of `total`.
    pub fn at(&self, step: u64, total: u64) -> f64 {
        let span = self.anneal_frac * total as f64;
        if span <= 0.0 || step as f64 >= span {
            return self.end;
        }
        self.start + (self.end - self.start) * step as f64 / span
    }
}

/// `teacher <- tau * teacher + (1 - tau) * student` for every teacher
/// parameter, matched by name. `tau = 1` leaves the teacher untouched and
/// `tau = 0` copies the student exactly.
pub fn ema_update(teacher: &mut ParamStore<f32>, student: &ParamStore<f32>, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(CoreError::invalid(format!("ema decay {tau} outside [0, 1]")));
    }
    for t in teacher.iter() {
        let s = student
            .by_name(&t.name)
            .map_err(|_| CoreError::Mismatch(format!("student lacks teacher parameter {}", t.name)))?;
        if s.value.shape() != t.value.shape() {
            return Err(CoreError::Mismatch(format!(
                "teacher/student shape mismatch for {}",
                t.name
            )));
        }
    }
    if tau == 1.0 {
        return Ok(());
    }
    let tau32 = tau as f32;
    let keep = (1.0 - tau) as f32;
    for t in teacher.iter_mut() {
        let s = student.by_name(&t.name)?;
        if tau == 0.0 {
            t.value = s.value.clone();
            continue;
        }
        for (tv, &sv) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *tv = tau32 * *tv + keep * sv;
        }
    }
    Ok(())
}
