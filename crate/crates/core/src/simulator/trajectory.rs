//! Closed-form C² trajectories with a static lead-in.

use std::f64::consts::PI;

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::Pose;

/// One additive term of a channel, as a function of the motion phase `φ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Term {
    Const(f64),
    /// `k·φ`
    Linear(f64),
    /// `amp·sin(freq·φ + phase)`
    Sin { amp: f64, freq: f64, phase: f64 },
}

impl Term {
    /// Value and first two derivatives with respect to the phase.
    fn eval(&self, phi: f64) -> [f64; 3] {
        match *self {
            Term::Const(c) => [c, 0.0, 0.0],
            Term::Linear(k) => [k * phi, k, 0.0],
            Term::Sin { amp, freq, phase } => {
                let a = freq * phi + phase;
                [amp * a.sin(), amp * freq * a.cos(), -amp * freq * freq * a.sin()]
            }
        }
    }
}

fn eval_channel(terms: &[Term], phi: f64) -> [f64; 3] {
    terms.iter().fold([0.0; 3], |acc, t| {
        let v = t.eval(phi);
        [acc[0] + v[0], acc[1] + v[1], acc[2] + v[2]]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TrajectoryFamily {
    Static,
    /// Horizontal circle through the origin, heading along the tangent.
    Circle { radius: f64, period: f64 },
    /// Lemniscate-like loop with a sinusoidal heading.
    FigureEight { half_length: f64, half_width: f64, period: f64 },
    /// Constant speed along +x with sinusoidal yaw.
    StraightSinusoidalYaw { speed: f64, yaw_amplitude: f64, yaw_period: f64 },
}

/// Extra roll/pitch/heave motion superimposed on a family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wobble {
    pub roll: f64,
    pub pitch: f64,
    pub heave: f64,
    /// Cycles per unit phase period.
    pub cycles: f64,
}

impl Default for Wobble {
    fn default() -> Self {
        Self { roll: 0.0, pitch: 0.0, heave: 0.0, cycles: 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryState {
    pub pose: Pose<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    /// Body-frame angular rate.
    pub angular_rate: Vector3<f64>,
}

/// Channels `x, y, z, roll, pitch, yaw` as term sums of the phase
/// `φ(t) = rate·g(t)`, where `g` is zero during the lead-in, then ramps up
/// smoothly to unit slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticTrajectory {
    pub family: TrajectoryFamily,
    pub wobble: Wobble,
    pub duration: f64,
    pub lead_in: f64,
    pub ramp: f64,
    channels: [Vec<Term>; 6],
    rate: f64,
}

impl AnalyticTrajectory {
    pub fn new(family: TrajectoryFamily, wobble: Wobble, duration: f64, lead_in: f64, ramp: f64) -> Self {
        use Term::*;
        let sin = |amp: f64, freq: f64| Sin { amp, freq, phase: 0.0 };
        let cos = |amp: f64, freq: f64| Sin { amp, freq, phase: PI / 2.0 };
        let (rate, mut ch): (f64, [Vec<Term>; 6]) = match family {
            TrajectoryFamily::Static => (0.0, Default::default()),
            TrajectoryFamily::Circle { radius, period } => (
                2.0 * PI / period,
                [vec![sin(radius, 1.0)], vec![Const(radius), cos(-radius, 1.0)], vec![], vec![], vec![], vec![Linear(1.0)]],
            ),
            TrajectoryFamily::FigureEight { half_length, half_width, period } => (
                2.0 * PI / period,
                [vec![sin(half_length, 1.0)], vec![sin(half_width, 2.0)], vec![], vec![], vec![], vec![sin(0.6, 1.0)]],
            ),
            TrajectoryFamily::StraightSinusoidalYaw { speed, yaw_amplitude, yaw_period } => (
                2.0 * PI / yaw_period,
                [vec![Linear(speed * yaw_period / (2.0 * PI))], vec![], vec![], vec![], vec![], vec![sin(yaw_amplitude, 1.0)]],
            ),
        };
        if wobble.roll != 0.0 {
            ch[3].push(sin(wobble.roll, wobble.cycles));
        }
        if wobble.pitch != 0.0 {
            ch[4].push(sin(wobble.pitch, wobble.cycles * 0.77));
        }
        if wobble.heave != 0.0 {
            ch[2].push(sin(wobble.heave, wobble.cycles * 1.3));
        }
        Self { family, wobble, duration, lead_in, ramp, channels: ch, rate }
    }

    /// Warped time `g` and its first three derivatives.
    fn warp(&self, t: f64) -> [f64; 4] {
        let s = t - self.lead_in;
        if s <= 0.0 {
            return [0.0; 4];
        }
        let w = self.ramp;
        if s >= w {
            return [0.5 * w + (s - w), 1.0, 0.0, 0.0];
        }
        let x = s / w;
        // g' is the quintic smootherstep, so g is its integral.
        let g = w * (x.powi(6) - 3.0 * x.powi(5) + 2.5 * x.powi(4));
        let g1 = 6.0 * x.powi(5) - 15.0 * x.powi(4) + 10.0 * x.powi(3);
        let g2 = 30.0 * x * x * (1.0 - x) * (1.0 - x) / w;
        let g3 = (60.0 * x - 180.0 * x * x + 120.0 * x.powi(3)) / (w * w);
        [g, g1, g2, g3]
    }

    pub fn state(&self, t: f64) -> TrajectoryState {
        let [g, g1, g2, _] = self.warp(t);
        let (phi, dphi, ddphi) = (self.rate * g, self.rate * g1, self.rate * g2);
        let chan = |i: usize| {
            let [f, f1, f2] = eval_channel(&self.channels[i], phi);
            (f, f1 * dphi, f2 * dphi * dphi + f1 * ddphi)
        };
        let (x, y, z) = (chan(0), chan(1), chan(2));
        let (roll, pitch, yaw) = (chan(3), chan(4), chan(5));
        let rotation = Rotation3::from_euler_angles(roll.0, pitch.0, yaw.0);
        let (sr, cr) = roll.0.sin_cos();
        let (sp, cp) = pitch.0.sin_cos();
        let angular_rate = Vector3::new(
            roll.1 - yaw.1 * sp,
            pitch.1 * cr + yaw.1 * cp * sr,
            -pitch.1 * sr + yaw.1 * cp * cr,
        );
        TrajectoryState {
            pose: Pose::new(rotation, Vector3::new(x.0, y.0, z.0)),
            velocity: Vector3::new(x.1, y.1, z.1),
            acceleration: Vector3::new(x.2, y.2, z.2),
            angular_rate,
        }
    }

    pub fn pose(&self, t: f64) -> Pose<f64> {
        self.state(t).pose
    }

    /// Horizontal path length by sampling at `dt`.
    pub fn path_length(&self, dt: f64) -> f64 {
        let n = (self.duration / dt).ceil() as usize;
        (1..=n)
            .map(|i| {
                let a = self.state(((i - 1) as f64 * dt).min(self.duration)).pose.translation;
                let b = self.state((i as f64 * dt).min(self.duration)).pose.translation;
                (b - a).norm()
            })
            .sum()
    }
}
