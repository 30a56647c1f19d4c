use crate::error::{Error, Result};

/// Nearest odd integer to `x` (ties go up), at least 3.
pub fn round_to_odd(x: f64) -> usize {
    let lo = (((x - 1.0) / 2.0).floor() * 2.0 + 1.0).max(1.0);
    let hi = lo + 2.0;
    let r = if x - lo < hi - x { lo } else { hi };
    (r as usize).max(3)
}

/// Resolutions after each of `events` upsampling steps, geometrically spaced
/// from `start` to `end` and rounded to odd values; the last stage is `end`.
pub fn resolution_stages(start: usize, end: usize, events: usize) -> Result<Vec<usize>> {
    if start < 2 || end < start {
        return Err(Error::invalid(format!(
            "resolution schedule needs 2 <= start <= end, got {start} -> {end}"
        )));
    }
    let ratio = end as f64 / start as f64;
    let mut stages = Vec::with_capacity(events);
    let mut prev = start;
    for e in 1..=events {
        let r = if e == events {
            end
        } else {
            round_to_odd(start as f64 * ratio.powf(e as f64 / events as f64))
        };
        let r = r.clamp(prev, end);
        stages.push(r);
        prev = r;
    }
    Ok(stages)
}

/// When and to what each scale's vectors are upsampled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpsampleSchedule {
    pub steps: Vec<usize>,
    /// `stages[scale][event]` resolution, cubic.
    pub stages: Vec<Vec<usize>>,
}

impl UpsampleSchedule {
    pub fn new(steps: &[usize], resolutions: &[[usize; 2]]) -> Result<Self> {
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("upsample steps must be strictly increasing"));
        }
        let stages = resolutions
            .iter()
            .map(|&[s, e]| resolution_stages(s, e, steps.len()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            steps: steps.to_vec(),
            stages,
        })
    }

    /// Per-scale target resolution if `step` is an upsampling event.
    pub fn at(&self, step: usize) -> Option<Vec<usize>> {
        let e = self.steps.iter().position(|&s| s == step)?;
        Some(self.stages.iter().map(|st| st[e]).collect())
    }

    /// Per-scale resolution in effect after `step` steps have completed.
    pub fn resolution_after(&self, step: usize, start: &[usize]) -> Vec<usize> {
        let done = self.steps.iter().filter(|&&s| s <= step).count();
        start
            .iter()
            .zip(&self.stages)
            .map(|(&s, st)| if done == 0 { s } else { st[done - 1] })
            .collect()
    }
}

/// Exponential decay from `lr0` to `decay · lr0` over `total` steps.
pub fn decayed_lr(lr0: f64, decay: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * decay.powf(step as f64 / total as f64)
}
