//! Piecewise-linear cure-cycle temperature profiles.
//!
//! A profile is fixed by four anchor points in (time, temperature):
//! `(t0, temp_start) -> (t1, temp1) -> (t2, temp_peak) -> (t3, temp_end)`.
//! The outer anchors and the peak are shared process constants; the
//! intermediate point `(t1, temp1)` is the design variable that the dataset
//! grid and the schedule optimizer sweep.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed anchors of the cure cycle plus the placement margin for the
/// intermediate point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileAnchors {
    /// Cycle start time, minutes.
    pub t0: f64,
    /// Temperature at `t0`, Celsius.
    pub temp_start: f64,
    /// Time at which the peak temperature is reached, minutes.
    pub t2: f64,
    /// Peak temperature, Celsius.
    pub temp_peak: f64,
    /// Cycle end time, minutes.
    pub t3: f64,
    /// Temperature at `t3`, Celsius.
    pub temp_end: f64,
    /// Minimum distance of `t1` from `t0` and `t2`, minutes.
    pub margin: f64,
}

impl Default for ProfileAnchors {
    fn default() -> Self {
        ProfileAnchors {
            t0: 0.333,
            temp_start: 20.000,
            t2: 171.658,
            temp_peak: 179.905,
            t3: 205.000,
            temp_end: 20.000,
            margin: 1.0,
        }
    }
}

impl ProfileAnchors {
    /// Inclusive bounds for the intermediate time `t1`.
    pub fn t1_bounds(&self) -> (f64, f64) {
        (self.t0 + self.margin, self.t2 - self.margin)
    }

    /// Inclusive bounds for the intermediate temperature `temp1`.
    pub fn temp1_bounds(&self) -> (f64, f64) {
        (self.temp_start, self.temp_peak)
    }

    fn validate(&self) -> Result<()> {
        if !(self.t0 < self.t2 && self.t2 < self.t3) {
            return Err(Error::config(format!(
                "anchor times must satisfy t0 < t2 < t3, got t0={}, t2={}, t3={}",
                self.t0, self.t2, self.t3
            )));
        }
        if !self.margin.is_finite() || self.margin <= 0.0 {
            return Err(Error::config(format!(
                "margin must be positive and finite, got {}",
                self.margin
            )));
        }
        if self.t0 + self.margin > self.t2 - self.margin {
            return Err(Error::config(format!(
                "margin {} leaves no room for t1 between t0={} and t2={}",
                self.margin, self.t0, self.t2
            )));
        }
        for (name, v) in [
            ("temp_start", self.temp_start),
            ("temp_peak", self.temp_peak),
            ("temp_end", self.temp_end),
        ] {
            if !v.is_finite() {
                return Err(Error::config(format!("{name} must be finite, got {v}")));
            }
        }
        if self.temp_peak < self.temp_start {
            return Err(Error::config(format!(
                "temp_peak {} must not be below temp_start {}",
                self.temp_peak, self.temp_start
            )));
        }
        Ok(())
    }
}

/// A validated four-anchor temperature profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureProfile {
    anchors: ProfileAnchors,
    t1: f64,
    temp1: f64,
}

/// Builds a profile, rejecting intermediate points that violate the
/// placement bounds. Every rejection names the violated bound.
pub fn build_profile(anchors: &ProfileAnchors, t1: f64, temp1: f64) -> Result<TemperatureProfile> {
    anchors.validate()?;
    if !t1.is_finite() || !temp1.is_finite() {
        return Err(Error::config(format!(
            "intermediate point must be finite, got t1={t1}, temp1={temp1}"
        )));
    }
    let (t1_lo, t1_hi) = anchors.t1_bounds();
    if t1 < t1_lo {
        return Err(Error::config(format!(
            "t1={t1} violates lower bound t0 + margin = {t1_lo}"
        )));
    }
    if t1 > t1_hi {
        return Err(Error::config(format!(
            "t1={t1} violates upper bound t2 - margin = {t1_hi}"
        )));
    }
    let (temp_lo, temp_hi) = anchors.temp1_bounds();
    if temp1 < temp_lo {
        return Err(Error::config(format!(
            "temp1={temp1} violates lower bound temp_start = {temp_lo}"
        )));
    }
    if temp1 > temp_hi {
        return Err(Error::config(format!(
            "temp1={temp1} violates upper bound temp_peak = {temp_hi}"
        )));
    }
    Ok(TemperatureProfile {
        anchors: anchors.clone(),
        t1,
        temp1,
    })
}

impl TemperatureProfile {
    pub fn anchors(&self) -> &ProfileAnchors {
        &self.anchors
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn temp1(&self) -> f64 {
        self.temp1
    }

    /// The four knots as (time, temperature) pairs in ascending time order.
    pub fn knots(&self) -> [(f64, f64); 4] {
        let a = &self.anchors;
        [
            (a.t0, a.temp_start),
            (self.t1, self.temp1),
            (a.t2, a.temp_peak),
            (a.t3, a.temp_end),
        ]
    }

    /// Knot times that fall strictly inside `(lo, hi)`.
    pub fn interior_knots(&self, lo: f64, hi: f64) -> Vec<f64> {
        self.knots()
            .iter()
            .map(|&(t, _)| t)
            .filter(|&t| t > lo && t < hi)
            .collect()
    }

    /// Temperature at time `t in [t0, t3]`. Knot times return the anchor
    /// temperature bit-exactly; interior times interpolate linearly.
    pub fn sample(&self, t: f64) -> Result<f64> {
        let a = &self.anchors;
        if !t.is_finite() || t < a.t0 || t > a.t3 {
            return Err(Error::config(format!(
                "time {t} outside profile domain [{}, {}]",
                a.t0, a.t3
            )));
        }
        let knots = self.knots();
        for &(kt, kv) in &knots {
            if t == kt {
                return Ok(kv);
            }
        }
        for seg in knots.windows(2) {
            let (ta, va) = seg[0];
            let (tb, vb) = seg[1];
            if t > ta && t < tb {
                return Ok(va + (t - ta) / (tb - ta) * (vb - va));
            }
        }
        // Degenerate segments (t1 == t0 or t1 == t2 is excluded by the margin,
        // so every interior time falls in exactly one window above).
        Err(Error::numerical(format!(
            "time {t} not covered by any profile segment"
        )))
    }

    /// Slope of the segment with index `i` (0: start ramp, 1: ramp to peak,
    /// 2: cooldown), Celsius per minute.
    pub fn segment_slope(&self, i: usize) -> f64 {
        let knots = self.knots();
        let (ta, va) = knots[i];
        let (tb, vb) = knots[i + 1];
        (vb - va) / (tb - ta)
    }

    /// Index of the segment containing time `t`, using half-open segments
    /// `[t_i, t_{i+1})` with `t3` assigned to the final segment.
    pub fn segment_index(&self, t: f64) -> usize {
        if t < self.t1 {
            0
        } else if t < self.anchors.t2 {
            1
        } else {
            2
        }
    }

    /// The two ramp slopes `(m1, m2)` in Celsius per minute: start to
    /// intermediate point, and intermediate point to peak.
    pub fn slopes(&self) -> (f64, f64) {
        (self.segment_slope(0), self.segment_slope(1))
    }

    /// `n` uniformly spaced times covering `[t0, t3]` inclusive.
    pub fn uniform_times(&self, n: usize) -> Vec<f64> {
        uniform_grid(self.anchors.t0, self.anchors.t3, n)
    }

    /// Temperatures at `n` uniformly spaced times over `[t0, t3]`.
    pub fn sample_uniform(&self, n: usize) -> Result<Vec<f64>> {
        self.uniform_times(n).iter().map(|&t| self.sample(t)).collect()
    }
}

/// `n >= 2` uniformly spaced points covering `[lo, hi]` with exact endpoints.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "grid needs at least two points");
    let mut out = Vec::with_capacity(n);
    let step = (hi - lo) / (n - 1) as f64;
    for i in 0..n {
        out.push(lo + i as f64 * step);
    }
    out[0] = lo;
    out[n - 1] = hi;
    out
}
