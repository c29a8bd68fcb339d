//! Two-link underactuated pendulum, torque on the second joint.
//!
//! State `[theta1, theta1_dot, theta2, theta2_dot]`; both angles zero hangs
//! straight down.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{rk4, State};

pub const HORIZON: usize = 200;
pub const TORQUES: [f64; 3] = [-1.0, 0.0, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcrobotConsts {
    pub link_length: f64,
    /// Distance from each joint to its link's centre of mass.
    pub com_offset: f64,
    /// Moment of inertia of each link about its centre of mass.
    pub inertia: f64,
    pub gravity: f64,
    pub dt: f64,
    pub substeps: usize,
    pub max_vel1: f64,
    pub max_vel2: f64,
}

impl Default for AcrobotConsts {
    fn default() -> Self {
        Self {
            link_length: 1.0,
            com_offset: 0.5,
            inertia: 1.0,
            gravity: 9.8,
            dt: 0.2,
            substeps: 4,
            max_vel1: 4.0 * PI,
            max_vel2: 9.0 * PI,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Acrobot {
    pub m1: f64,
    pub m2: f64,
    pub consts: AcrobotConsts,
}

impl Acrobot {
    pub fn new(m1: f64, m2: f64) -> Self {
        Self {
            m1,
            m2,
            consts: AcrobotConsts::default(),
        }
    }

    pub fn derivative(&self, s: &State, torque: f64) -> State {
        let (m1, m2) = (self.m1, self.m2);
        let AcrobotConsts {
            link_length: l1,
            com_offset: lc,
            inertia: i,
            gravity: g,
            ..
        } = self.consts;
        let [th1, d1v, th2, d2v] = *s;
        let d1 = m1 * lc * lc + m2 * (l1 * l1 + lc * lc + 2.0 * l1 * lc * th2.cos()) + 2.0 * i;
        let d2 = m2 * (lc * lc + l1 * lc * th2.cos()) + i;
        let phi2 = m2 * lc * g * (th1 + th2 - PI / 2.0).cos();
        let phi1 = -m2 * l1 * lc * d2v * d2v * th2.sin()
            - 2.0 * m2 * l1 * lc * d2v * d1v * th2.sin()
            + (m1 * lc + m2 * l1) * g * (th1 - PI / 2.0).cos()
            + phi2;
        let dd2 = (torque + d2 / d1 * phi1 - m2 * l1 * lc * d1v * d1v * th2.sin() - phi2)
            / (m2 * lc * lc + i - d2 * d2 / d1);
        let dd1 = -(d2 * dd2 + phi1) / d1;
        [d1v, dd1, d2v, dd2]
    }

    /// Integrate one control interval without velocity limits.
    pub fn integrate(&self, s: &State, torque: f64) -> State {
        let h = self.consts.dt / self.consts.substeps as f64;
        let mut x = *s;
        for _ in 0..self.consts.substeps {
            x = rk4(&x, h, |y| self.derivative(y, torque));
        }
        x
    }

    /// One control interval followed by velocity clipping.
    pub fn step(&self, s: &State, torque: f64) -> State {
        let mut x = self.integrate(s, torque);
        x[1] = x[1].clamp(-self.consts.max_vel1, self.consts.max_vel1);
        x[3] = x[3].clamp(-self.consts.max_vel2, self.consts.max_vel2);
        x
    }

    pub fn energy(&self, s: &State) -> f64 {
        let (m1, m2) = (self.m1, self.m2);
        let AcrobotConsts {
            link_length: l1,
            com_offset: lc,
            inertia: i,
            gravity: g,
            ..
        } = self.consts;
        let [th1, w1, th2, w2] = *s;
        let w12 = w1 + w2;
        let kinetic = 0.5 * (m1 * lc * lc + i) * w1 * w1
            + 0.5
                * m2
                * (l1 * l1 * w1 * w1 + lc * lc * w12 * w12 + 2.0 * l1 * lc * w1 * w12 * th2.cos())
            + 0.5 * i * w12 * w12;
        let potential =
            -m1 * g * lc * th1.cos() - m2 * g * (l1 * th1.cos() + lc * (th1 + th2).cos());
        kinetic + potential
    }
}

/// Tip height in link lengths above the pivot.
pub fn tip_height(s: &State) -> f64 {
    -s[0].cos() - (s[0] + s[2]).cos()
}

pub fn is_terminal(s: &State) -> bool {
    tip_height(s) > 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_of_terminal_condition() {
        let down = [0.0; 4];
        assert_eq!(tip_height(&down), -2.0);
        assert!(!is_terminal(&down));
        let up = [PI, 0.0, 0.0, 0.0];
        assert!((tip_height(&up) - 2.0).abs() < 1e-12);
        assert!(is_terminal(&up));
    }

    #[test]
    fn velocities_are_clipped() {
        let a = Acrobot::new(1.0, 1.0);
        let s = a.step(&[0.0, 100.0, 0.0, -100.0], 0.0);
        assert!(s[1].abs() <= 4.0 * PI);
        assert!(s[3].abs() <= 9.0 * PI);
    }
}
