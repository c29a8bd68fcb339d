//! Cart-pole swing-up with a uniform rod and viscous cart friction.
//!
//! State `[x, theta, x_dot, theta_dot]`; `theta = 0` hangs straight down.

use serde::{Deserialize, Serialize};

use super::{rk4, State};

pub const MAX_FORCE: f64 = 10.0;
pub const HORIZON: usize = 25;
pub const REWARD_WIDTH: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartPoleConsts {
    /// Full rod length in metres.
    pub pole_length: f64,
    pub gravity: f64,
    /// Viscous friction on the cart, N per m/s.
    pub friction: f64,
    /// Control interval in seconds.
    pub dt: f64,
    /// Integrator substeps per control interval.
    pub substeps: usize,
}

impl Default for CartPoleConsts {
    fn default() -> Self {
        Self {
            pole_length: 0.6,
            gravity: 9.82,
            friction: 0.1,
            dt: 0.1,
            substeps: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CartPole {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub consts: CartPoleConsts,
}

impl CartPole {
    pub fn new(cart_mass: f64, pole_mass: f64) -> Self {
        Self {
            cart_mass,
            pole_mass,
            consts: CartPoleConsts::default(),
        }
    }

    pub fn derivative(&self, s: &State, force: f64) -> State {
        let (big_m, m) = (self.cart_mass, self.pole_mass);
        let CartPoleConsts {
            pole_length: l,
            gravity: g,
            friction: b,
            ..
        } = self.consts;
        let [_, th, xd, thd] = *s;
        let (sin, cos) = th.sin_cos();
        let denom = 4.0 * (big_m + m) - 3.0 * m * cos * cos;
        let xdd =
            (2.0 * m * l * thd * thd * sin + 3.0 * m * g * sin * cos + 4.0 * (force - b * xd))
                / denom;
        let thdd = (-3.0 * m * l * thd * thd * sin * cos
            - 6.0 * (big_m + m) * g * sin
            - 6.0 * (force - b * xd) * cos)
            / (l * denom);
        [xd, thd, xdd, thdd]
    }

    /// Advance one control interval; the force is clipped to the actuator range.
    pub fn step(&self, s: &State, force: f64) -> State {
        let f = force.clamp(-MAX_FORCE, MAX_FORCE);
        let h = self.consts.dt / self.consts.substeps as f64;
        let mut x = *s;
        for _ in 0..self.consts.substeps {
            x = rk4(&x, h, |y| self.derivative(y, f));
        }
        x
    }

    pub fn tip(&self, s: &State) -> (f64, f64) {
        let l = self.consts.pole_length;
        (s[0] + l * s[1].sin(), -l * s[1].cos())
    }

    pub fn reward(&self, s: &State) -> f64 {
        reward(s, self.consts.pole_length)
    }

    /// Kinetic plus potential energy, with the pivot as the potential origin.
    pub fn energy(&self, s: &State) -> f64 {
        let (big_m, m, l, g) = (
            self.cart_mass,
            self.pole_mass,
            self.consts.pole_length,
            self.consts.gravity,
        );
        let [_, th, xd, thd] = *s;
        let vx = xd + 0.5 * l * th.cos() * thd;
        let vy = 0.5 * l * th.sin() * thd;
        let kinetic = 0.5 * big_m * xd * xd
            + 0.5 * m * (vx * vx + vy * vy)
            + 0.5 * (m * l * l / 12.0) * thd * thd;
        kinetic - m * g * 0.5 * l * th.cos()
    }
}

/// Squared distance from the pole tip to the upright goal `(0, l)`.
pub fn tip_distance_sq(s: &State, pole_length: f64) -> f64 {
    let l = pole_length;
    let dx = s[0] + l * s[1].sin();
    let dy = -l * s[1].cos() - l;
    dx * dx + dy * dy
}

/// `exp(-d^2 / width^2) - 1`, in `(-1, 0]`.
pub fn reward(s: &State, pole_length: f64) -> f64 {
    (-tip_distance_sq(s, pole_length) / (REWARD_WIDTH * REWARD_WIDTH)).exp() - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_is_zero_at_goal_and_tends_to_minus_one() {
        let upright = [0.0, std::f64::consts::PI, 0.0, 0.0];
        assert!(reward(&upright, 0.6).abs() < 1e-15);
        let far = [1e3, 0.0, 0.0, 0.0];
        assert_eq!(reward(&far, 0.6), -1.0);
        let down = [0.0, 0.0, 0.0, 0.0];
        let r = reward(&down, 0.6);
        assert!(r > -1.0 && r < 0.0);
    }

    #[test]
    fn force_is_clipped() {
        let cp = CartPole::new(1.5, 0.8);
        let s = [0.0, 0.1, 0.0, 0.0];
        assert_eq!(cp.step(&s, 50.0), cp.step(&s, MAX_FORCE));
        assert_eq!(cp.step(&s, -50.0), cp.step(&s, -MAX_FORCE));
    }

    #[test]
    fn hanging_rest_is_an_equilibrium() {
        let cp = CartPole::new(1.0, 0.7);
        assert_eq!(cp.step(&[0.0; 4], 0.0), [0.0; 4]);
    }
}
