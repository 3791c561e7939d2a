//! PID lateral correction (an observation feature, never the actuator) and
//! the mapping from normalized actions to vehicle commands.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub i_max: f64,
    pub u_max: f64,
    pub dt: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self { kp: 0.8, ki: 0.05, kd: 0.3, i_max: 2.0, u_max: 1.0, dt: 0.05 }
    }
}

impl PidGains {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [(self.kp, "kp"), (self.ki, "ki"), (self.kd, "kd")] {
            if !v.is_finite() {
                return Err(Error::Config(format!("pid.{name} must be finite")));
            }
        }
        if !(self.i_max > 0.0 && self.u_max > 0.0 && self.dt > 0.0) {
            return Err(Error::Config("pid.i_max, pid.u_max and pid.dt must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: f64,
    pub last_output: f64,
}

pub fn pid_reset(_gains: &PidGains) -> PidState {
    PidState::default()
}

/// One controller update.
///
/// The integral is accumulated and clipped to `+-i_max` before it enters the
/// control law; the derivative is the raw backward difference; the output is
/// clipped to `+-u_max`.
pub fn pid_step(state: &PidState, error: f64, gains: &PidGains) -> Result<(PidState, f64)> {
    ensure_finite(error, "pid error")?;
    let integral = (state.integral + error * gains.dt).clamp(-gains.i_max, gains.i_max);
    let derivative = (error - state.prev_error) / gains.dt;
    let raw = gains.kp * error + gains.ki * integral + gains.kd * derivative;
    let u = raw.clamp(-gains.u_max, gains.u_max);
    Ok((PidState { integral, prev_error: error, last_output: u }, u))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionCommand {
    pub a1: f64,
    pub a2: f64,
    /// Radians, positive steers right.
    pub steering_cmd: f64,
    /// m/s.
    pub target_speed_cmd: f64,
}

/// Maps a normalized action in `[-1, 1]^2` to steering and target speed.
/// Components outside the box are clipped first.
pub fn map_action(a1: f64, a2: f64, max_steering_angle: f64, v_max: f64) -> ActionCommand {
    let a1 = a1.clamp(-1.0, 1.0);
    let a2 = a2.clamp(-1.0, 1.0);
    ActionCommand {
        a1,
        a2,
        steering_cmd: a1 * max_steering_angle,
        target_speed_cmd: (a2 + 1.0) / 2.0 * v_max,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_error_gives_zero_output() {
        let g = PidGains::default();
        let mut s = pid_reset(&g);
        for _ in 0..100 {
            let (n, u) = pid_step(&s, 0.0, &g).unwrap();
            assert_eq!(u, 0.0);
            s = n;
        }
        assert_eq!(s, PidState::default());
    }

    #[test]
    fn hand_recursion_saturates() {
        let g = PidGains { kp: 0.5, ki: 0.1, kd: 0.2, i_max: 1.0, u_max: 1.0, dt: 0.1 };
        let (s, u) = pid_step(&PidState::default(), 1.0, &g).unwrap();
        assert!((s.integral - 0.1).abs() < 1e-15);
        // raw = 0.5 + 0.1*0.1 + 0.2*(1-0)/0.1 = 2.51
        let raw = g.kp + g.ki * s.integral + g.kd * 1.0 / g.dt;
        assert!((raw - 2.51).abs() < 1e-12);
        assert_eq!(u, 1.0);
    }

    #[test]
    fn integral_saturates_at_bound() {
        let g = PidGains { kp: 0.5, ki: 0.1, kd: 0.2, i_max: 1.0, u_max: 1.0, dt: 0.1 };
        let mut s = PidState::default();
        for _ in 0..10_000 {
            s = pid_step(&s, 1.0, &g).unwrap().0;
            assert!(s.integral <= 1.0);
        }
        assert_eq!(s.integral, 1.0);
    }

    #[test]
    fn reset_is_fresh() {
        let g = PidGains::default();
        assert_eq!(pid_reset(&g), pid_reset(&g));
        let (_, u) = pid_step(&pid_reset(&g), 0.0, &g).unwrap();
        assert_eq!(u, 0.0);
        // First derivative term uses a previous error of zero.
        let g2 = PidGains { kp: 0.0, ki: 0.0, kd: 0.01, ..g };
        let (_, u) = pid_step(&pid_reset(&g2), 0.5, &g2).unwrap();
        assert!((u - 0.01 * 0.5 / g2.dt).abs() < 1e-15);
    }

    #[test]
    fn non_finite_error_rejected() {
        assert!(pid_step(&PidState::default(), f64::NAN, &PidGains::default()).is_err());
    }

    #[test]
    fn action_mapping_endpoints() {
        let v_max = 40.0 / 3.6;
        assert_eq!(map_action(0.0, -1.0, 0.5, v_max).target_speed_cmd, 0.0);
        assert_eq!(map_action(0.0, 1.0, 0.5, v_max).target_speed_cmd, v_max);
        let mid = map_action(0.0, 0.0, 0.5, v_max);
        assert_eq!(mid.steering_cmd, 0.0);
        assert_eq!(mid.target_speed_cmd, v_max / 2.0);
        let clipped = map_action(1.7, -3.0, 0.5, v_max);
        assert_eq!(clipped.steering_cmd, 0.5);
        assert_eq!(clipped.a2, -1.0);
    }

    proptest! {
        #[test]
        fn output_and_integral_bounded(errors in prop::collection::vec(-50.0f64..50.0, 1..200)) {
            let g = PidGains::default();
            let mut s = PidState::default();
            for e in errors {
                let (n, u) = pid_step(&s, e, &g).unwrap();
                prop_assert!(n.integral.abs() <= g.i_max);
                prop_assert!(u.abs() <= g.u_max);
                s = n;
            }
        }

        #[test]
        fn negated_errors_negate_outputs(errors in prop::collection::vec(-5.0f64..5.0, 1..200)) {
            let g = PidGains::default();
            let (mut a, mut b) = (PidState::default(), PidState::default());
            for e in errors {
                let (na, ua) = pid_step(&a, e, &g).unwrap();
                let (nb, ub) = pid_step(&b, -e, &g).unwrap();
                prop_assert_eq!(ua, -ub);
                a = na;
                b = nb;
            }
        }

        #[test]
        fn linear_below_saturation(errors in prop::collection::vec(-0.1f64..0.1, 1..50), k in 0.1f64..2.0) {
            let g = PidGains { kd: 0.01, ..PidGains::default() };
            let (mut a, mut b) = (PidState::default(), PidState::default());
            for e in errors {
                let (na, ua) = pid_step(&a, e, &g).unwrap();
                let (nb, ub) = pid_step(&b, k * e, &g).unwrap();
                prop_assume!(ub.abs() < g.u_max && nb.integral.abs() < g.i_max);
                prop_assert!((ub - k * ua).abs() < 1e-12);
                a = na;
                b = nb;
            }
        }
    }
}
