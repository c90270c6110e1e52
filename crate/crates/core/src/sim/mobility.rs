//! Car-following and stop-line kinematics.
//!
//! Speeds follow a Gipps-style safe-speed rule: a vehicle never moves farther
//! in a tick than it could still brake from at `decel` before its nearest
//! obstacle. A moving leader counts as an obstacle at the point where it
//! would come to rest.

use crate::scenario::VehicleConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kinematics {
    pub length: f64,
    pub standstill_gap: f64,
    pub accel: f64,
    pub decel: f64,
    /// Extra reaction time on top of the tick, seconds.
    pub reaction: f64,
}

impl From<&VehicleConfig> for Kinematics {
    fn from(c: &VehicleConfig) -> Self {
        Self {
            length: c.length,
            standstill_gap: c.standstill_gap,
            accel: c.accel,
            decel: c.decel,
            reaction: c.reaction,
        }
    }
}

/// Largest speed `v` with `v * tau + v^2 / (2 * decel) <= room`.
pub fn safe_speed(room: f64, decel: f64, tau: f64) -> f64 {
    if room <= 0.0 {
        return 0.0;
    }
    decel * (-tau + (tau * tau + 2.0 * room / decel).sqrt())
}

/// Room behind a moving leader: the bumper gap plus the distance the
/// leader needs to stop at the same deceleration.
pub fn room_behind(gap: f64, v_leader: f64, decel: f64) -> f64 {
    gap + v_leader * v_leader / (2.0 * decel)
}

/// Speed for the next tick given the room to the nearest obstacle, if any.
pub fn next_speed(v: f64, v_desired: f64, room: Option<f64>, k: &Kinematics, dt: f64) -> f64 {
    let mut next = v_desired.min(v + k.accel * dt);
    if let Some(r) = room {
        next = next.min(safe_speed(r, k.decel, dt + k.reaction));
    }
    next.max(0.0)
}

/// Whether a vehicle `dist` meters before a line can stop at it.
pub fn can_stop(dist: f64, v: f64, decel: f64) -> bool {
    v * v / (2.0 * decel) <= dist + 1e-9
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k() -> Kinematics {
        Kinematics {
            length: 4.5,
            standstill_gap: 2.0,
            accel: 2.0,
            decel: 4.5,
            reaction: 1.0,
        }
    }

    #[test]
    fn free_road_accelerates_to_desired() {
        let mut v = 0.0;
        for _ in 0..20 {
            v = next_speed(v, 11.0, None, &k(), 0.5);
        }
        assert_eq!(v, 11.0);
        assert_eq!(next_speed(0.0, 11.0, None, &k(), 0.5), 1.0);
    }

    #[test]
    fn safe_speed_solves_the_braking_budget() {
        let (room, b, dt) = (30.0, 4.5, 0.5);
        let v = safe_speed(room, b, dt);
        assert!((v * dt + v * v / (2.0 * b) - room).abs() < 1e-9);
        assert_eq!(safe_speed(-1.0, b, dt), 0.0);
    }

    #[test]
    fn yellow_rule() {
        assert!(can_stop(13.5, 11.0, 4.5));
        assert!(!can_stop(13.0, 11.0, 4.5));
        assert!(can_stop(0.0, 0.0, 4.5));
    }

    proptest! {
        /// A follower never ends up closer than the standstill gap, even when
        /// the leader brakes as hard as it can at any moment.
        #[test]
        fn platoon_never_collides(v0 in 0.0f64..11.0, gap0 in 0.0f64..40.0, brake_at in 0usize..200) {
            let kin = k();
            let dt = 0.5;
            let (mut sl, mut vl) = (100.0, v0);
            let mut s = sl - kin.length - kin.standstill_gap - gap0;
            let mut v = v0.min(safe_speed(room_behind(gap0, vl, kin.decel), kin.decel, dt + kin.reaction));
            for step in 0..400 {
                vl = if step >= brake_at { (vl - kin.decel * dt).max(0.0) } else { next_speed(vl, 11.0, None, &kin, dt) };
                sl += vl * dt;
                let gap = sl - kin.length - kin.standstill_gap - s;
                v = next_speed(v, 11.0, Some(room_behind(gap, vl, kin.decel)), &kin, dt);
                s += v * dt;
                prop_assert!(sl - kin.length - s >= kin.standstill_gap - 1e-6);
            }
        }

        /// Approaching a fixed obstacle never overshoots it.
        #[test]
        fn never_passes_an_obstacle(start in 0.0f64..200.0, v0 in 0.0f64..15.0, obstacle in 0.0f64..300.0) {
            let kin = k();
            let dt = 0.5;
            let mut s = start.min(obstacle);
            let mut v = v0.min(safe_speed(obstacle - s, kin.decel, dt + kin.reaction));
            for _ in 0..400 {
                v = next_speed(v, 11.0, Some(obstacle - s), &kin, dt);
                s += v * dt;
                prop_assert!(s <= obstacle + 1e-9);
            }
        }
    }
}
