//! Reference generators: circles, straight lines with a hold at the end, and
//! scripted phase sequences carrying grasp/release/force events.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::{Error, Result};

pub const DEFAULT_RELEASE_FRACTION: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Grasp { mass_kg: f64 },
    Release,
    ForceOn { force_n: [f64; 3] },
    ForceOff,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    pub x: Vector3<f64>,
    pub xd: Vector3<f64>,
    pub xdd: Vector3<f64>,
    pub events: Vec<Event>,
}

impl TrajectorySample {
    fn at_rest(t: f64, x: Vector3<f64>) -> Self {
        TrajectorySample { t, x, xd: Vector3::zeros(), xdd: Vector3::zeros(), events: Vec::new() }
    }
}

/// `x = (r cos ct, r sin ct, z)` with `c = 2 pi / period`.
pub fn circle(t: f64, radius: f64, period: f64, z: f64) -> TrajectorySample {
    let c = 2.0 * PI / period;
    let (s, co) = (c * t).sin_cos();
    TrajectorySample {
        t,
        x: Vector3::new(radius * co, radius * s, z),
        xd: Vector3::new(-radius * c * s, radius * c * co, 0.0),
        xdd: Vector3::new(-radius * c * c * co, -radius * c * c * s, 0.0),
        events: Vec::new(),
    }
}

/// Constant-velocity line from `x1` to `x2` over `duration`, held at `x2` after.
pub fn line(t: f64, x1: &Vector3<f64>, x2: &Vector3<f64>, duration: f64) -> TrajectorySample {
    if t >= duration {
        return TrajectorySample::at_rest(t, *x2);
    }
    let t = t.max(0.0);
    let v = (x2 - x1) / duration;
    TrajectorySample { t, x: x1 + v * t, xd: v, xdd: Vector3::zeros(), events: Vec::new() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    /// Hold still, optionally after jumping to `at_m` (a step input).
    Hold {
        duration_s: f64,
        #[serde(default)]
        at_m: Option<[f64; 3]>,
    },
    Line { to_m: [f64; 3], duration_s: f64 },
    /// Circle about the z axis through the current point's height, starting at
    /// angle zero; the phase assumes the reference is already at `(r, 0, z)`.
    Circle { radius_m: f64, period_s: f64, z_m: f64, turns: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    /// Seconds after the phase starts.
    pub after_s: f64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    /// Absolute start time; defaults to the end of the previous phase.
    #[serde(default)]
    pub start_s: Option<f64>,
    pub motion: Motion,
    #[serde(default)]
    pub events: Vec<TimedEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub start_m: [f64; 3],
    #[serde(default)]
    pub phases: Vec<Phase>,
}

#[derive(Clone, Debug)]
struct Compiled {
    start: f64,
    end: f64,
    from: Vector3<f64>,
    motion: Motion,
}

/// A validated script ready to be sampled.
#[derive(Clone, Debug)]
pub struct Trajectory {
    start: Vector3<f64>,
    phases: Vec<Compiled>,
    events: Vec<(f64, Event)>,
}

impl Script {
    /// Line from `start` to `goal` at `speed` with a release at
    /// `release_fraction` of the line, then a hold.
    pub fn throw(start: [f64; 3], goal: [f64; 3], speed: f64, release_fraction: f64, hold_s: f64) -> Script {
        let d = (Vector3::from(goal) - Vector3::from(start)).norm();
        let duration = d / speed;
        Script {
            start_m: start,
            phases: vec![
                Phase {
                    start_s: None,
                    motion: Motion::Line { to_m: goal, duration_s: duration },
                    events: vec![TimedEvent { after_s: release_fraction * duration, event: Event::Release }],
                },
                Phase { start_s: None, motion: Motion::Hold { duration_s: hold_s, at_m: None }, events: Vec::new() },
            ],
        }
    }

    pub fn circle(radius: f64, period: f64, z: f64, turns: f64) -> Script {
        Script {
            start_m: [radius, 0.0, z],
            phases: vec![Phase {
                start_s: None,
                motion: Motion::Circle { radius_m: radius, period_s: period, z_m: z, turns },
                events: Vec::new(),
            }],
        }
    }

    pub fn compile(&self) -> Result<Trajectory> {
        let mut t = 0.0;
        let mut at = Vector3::from(self.start_m);
        let mut phases = Vec::new();
        let mut events = Vec::new();
        for (i, ph) in self.phases.iter().enumerate() {
            let start = ph.start_s.unwrap_or(t);
            if start < t - 1e-12 {
                return Err(Error::ScriptError(format!("phase {i} starts at {start} s, before {t} s")));
            }
            if start > t {
                phases.push(Compiled { start: t, end: start, from: at, motion: Motion::Hold { duration_s: start - t, at_m: None } });
            }
            let (duration, to) = match &ph.motion {
                Motion::Hold { duration_s, at_m } => (*duration_s, at_m.map_or(at, Vector3::from)),
                Motion::Line { to_m, duration_s } => (*duration_s, Vector3::from(*to_m)),
                Motion::Circle { radius_m, period_s, z_m, turns } => {
                    if !(*period_s > 0.0 && *radius_m > 0.0 && *turns > 0.0) {
                        return Err(Error::ScriptError(format!("phase {i}: circle needs positive radius, period, turns")));
                    }
                    let end = circle(turns * period_s, *radius_m, *period_s, *z_m).x;
                    (turns * period_s, end)
                }
            };
            if !(duration > 0.0) || !duration.is_finite() {
                return Err(Error::ScriptError(format!("phase {i} has non-positive duration")));
            }
            for ev in &ph.events {
                if !(0.0..=duration).contains(&ev.after_s) {
                    return Err(Error::ScriptError(format!("phase {i}: event at {} s outside the phase", ev.after_s)));
                }
                events.push((start + ev.after_s, ev.event.clone()));
            }
            phases.push(Compiled { start, end: start + duration, from: at, motion: ph.motion.clone() });
            t = start + duration;
            at = to;
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Trajectory { start: Vector3::from(self.start_m), phases, events })
    }
}

impl Trajectory {
    pub fn duration(&self) -> f64 {
        self.phases.last().map_or(0.0, |p| p.end)
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    pub fn events(&self) -> &[(f64, Event)] {
        &self.events
    }

    /// Reference at time `t` (no events attached).
    pub fn sample(&self, t: f64) -> TrajectorySample {
        let Some(last) = self.phases.last() else {
            return TrajectorySample::at_rest(t, self.start);
        };
        let idx = self.phases.iter().position(|p| t < p.end);
        let ph = match idx {
            Some(i) => &self.phases[i],
            None => last,
        };
        let local = (t - ph.start).max(0.0);
        let mut s = match &ph.motion {
            Motion::Hold { at_m, .. } => TrajectorySample::at_rest(t, at_m.map_or(ph.from, Vector3::from)),
            Motion::Line { to_m, duration_s } => line(local, &ph.from, &Vector3::from(*to_m), *duration_s),
            Motion::Circle { radius_m, period_s, z_m, turns } => {
                if local >= turns * period_s {
                    let mut s = circle(turns * period_s, *radius_m, *period_s, *z_m);
                    s.xd = Vector3::zeros();
                    s.xdd = Vector3::zeros();
                    s
                } else {
                    circle(local, *radius_m, *period_s, *z_m)
                }
            }
        };
        s.t = t;
        s
    }

    /// Events with time in `[t0, t1)`.
    pub fn events_between(&self, t0: f64, t1: f64) -> Vec<Event> {
        self.events.iter().filter(|(t, _)| *t >= t0 && *t < t1).map(|(_, e)| e.clone()).collect()
    }

    /// Sampled stream at spacing `dt`; events attach to the first sample at or
    /// after their time.
    pub fn samples(&self, dt: f64) -> Vec<TrajectorySample> {
        if self.is_empty() {
            return Vec::new();
        }
        let n = (self.duration() / dt).round() as usize;
        (0..=n)
            .map(|k| {
                let t = k as f64 * dt;
                let mut s = self.sample(t);
                let lo = if k == 0 { f64::NEG_INFINITY } else { t - dt };
                s.events = self.events.iter().filter(|(te, _)| *te > lo && *te <= t).map(|(_, e)| e.clone()).collect();
                s
            })
            .collect()
    }
}
