use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::ScenarioId;
use crate::geometry::{RigidTransform, Vector3};

/// Planar path piece. Arcs turn counter-clockwise for positive sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Segment {
    Line { from: [f64; 2], to: [f64; 2] },
    Arc { center: [f64; 2], radius: f64, start: f64, sweep: f64 },
}

impl Segment {
    fn length(&self) -> f64 {
        match *self {
            Segment::Line { from, to } => (to[0] - from[0]).hypot(to[1] - from[1]),
            Segment::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    /// Position and heading after `s` meters along the segment.
    fn at(&self, s: f64) -> ([f64; 2], f64) {
        match *self {
            Segment::Line { from, to } => {
                let len = self.length();
                let (ux, uy) = ((to[0] - from[0]) / len, (to[1] - from[1]) / len);
                ([from[0] + ux * s, from[1] + uy * s], uy.atan2(ux))
            }
            Segment::Arc {
                center,
                radius,
                start,
                sweep,
            } => {
                let th = start + sweep.signum() * s / radius;
                (
                    [center[0] + radius * th.cos(), center[1] + radius * th.sin()],
                    th + sweep.signum() * FRAC_PI_2,
                )
            }
        }
    }
}

/// Piecewise path traversed at constant speed. Motion continues straight
/// past the last segment; a path with zero speed is a parked vehicle.
#[derive(Debug, Clone, PartialEq)]
struct Route {
    segments: Vec<Segment>,
    speed: f64,
}

impl Route {
    fn straight(from: [f64; 2], heading: f64, speed: f64) -> Self {
        let to = [from[0] + heading.cos(), from[1] + heading.sin()];
        Self {
            segments: vec![Segment::Line { from, to }],
            speed,
        }
    }

    fn parked(at: [f64; 2], heading: f64) -> Self {
        Self::straight(at, heading, 0.0)
    }

    fn pose_at(&self, t: f64) -> RigidTransform {
        let mut s = self.speed * t;
        for (i, seg) in self.segments.iter().enumerate() {
            let len = seg.length();
            if s <= len || i + 1 == self.segments.len() {
                // the last segment extends beyond its nominal end
                let (p, heading) = match seg {
                    Segment::Line { .. } => seg.at(s),
                    Segment::Arc { .. } if s <= len => seg.at(s),
                    Segment::Arc { .. } => {
                        let (end, h) = seg.at(len);
                        let extra = s - len;
                        ([end[0] + extra * h.cos(), end[1] + extra * h.sin()], h)
                    }
                };
                return RigidTransform::from_yaw(wrap(heading), Vector3::new(p[0], p[1], 0.0));
            }
            s -= len;
        }
        unreachable!("routes have at least one segment")
    }
}

fn wrap(a: f64) -> f64 {
    a.sin().atan2(a.cos())
}

/// Vehicle body poses (ground-level center, x forward) for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectories {
    pub ego: Vec<RigidTransform>,
    /// Always two agents; parked ones repeat a constant pose.
    pub agents: Vec<Vec<RigidTransform>>,
}

fn routes(id: ScenarioId, ego_speed: f64) -> (Route, [Route; 2]) {
    use std::f64::consts::PI;
    match id {
        // straight crossing with one agent on the parallel opposing lane
        ScenarioId::Sim0 => (
            Route::straight([-60.0, -3.5], 0.0, ego_speed),
            [Route::straight([60.0, 3.5], PI, ego_speed), Route::parked([-6.0, 25.0], -FRAC_PI_2)],
        ),
        // ego drives through while both agents wait at the stop lines
        ScenarioId::Sim1 => (
            Route::straight([60.0, 3.5], PI, ego_speed),
            [Route::parked([3.5, -20.0], FRAC_PI_2), Route::parked([-3.5, 20.0], -FRAC_PI_2)],
        ),
        // perpendicular paths
        ScenarioId::Sim2 => (
            Route::straight([3.5, -60.0], FRAC_PI_2, ego_speed),
            [Route::straight([60.0, 3.5], PI, 0.75 * ego_speed), Route::parked([-6.0, -25.0], FRAC_PI_2)],
        ),
        // both ego and agent turn left
        ScenarioId::Sim3 => {
            let r = 10.5;
            let ego = Route {
                segments: vec![
                    Segment::Line {
                        from: [-60.0, -3.5],
                        to: [-7.0, -3.5],
                    },
                    Segment::Arc {
                        center: [-7.0, 7.0],
                        radius: r,
                        start: -FRAC_PI_2,
                        sweep: FRAC_PI_2,
                    },
                    Segment::Line {
                        from: [3.5, 7.0],
                        to: [3.5, 8.0],
                    },
                ],
                speed: ego_speed,
            };
            let agent = Route {
                segments: vec![
                    Segment::Line {
                        from: [-3.5, 30.0],
                        to: [-3.5, 7.0],
                    },
                    Segment::Arc {
                        center: [7.0, 7.0],
                        radius: r,
                        start: PI,
                        sweep: FRAC_PI_2,
                    },
                    Segment::Line {
                        from: [7.0, -3.5],
                        to: [8.0, -3.5],
                    },
                ],
                speed: ego_speed,
            };
            (ego, [agent, Route::parked([-30.0, 6.0], 0.0)])
        }
    }
}

/// Ego and agent body poses at `t = i * dt` for `i in 0..frames`.
pub fn ego_agent_trajectories(id: ScenarioId, frames: usize, dt: f64, ego_speed: f64) -> Trajectories {
    let (ego, agents) = routes(id, ego_speed);
    let sample = |r: &Route| (0..frames).map(|i| r.pose_at(i as f64 * dt)).collect::<Vec<_>>();
    Trajectories {
        ego: sample(&ego),
        agents: agents.iter().map(sample).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DT: f64 = 0.1;

    #[test]
    fn sim1_agents_stationary() {
        let tr = ego_agent_trajectories(ScenarioId::Sim1, 150, DT, 8.0);
        for a in &tr.agents {
            assert!(a.iter().all(|p| p == &a[0]));
        }
    }

    #[test]
    fn sim0_heading_constant() {
        let tr = ego_agent_trajectories(ScenarioId::Sim0, 150, DT, 8.0);
        for p in &tr.ego {
            assert!(p.yaw().abs() < 1e-9);
        }
        assert!((tr.ego[149].translation().x - (-60.0 + 8.0 * 14.9)).abs() < 1e-9);
    }

    #[test]
    fn sim3_turns_left() {
        let tr = ego_agent_trajectories(ScenarioId::Sim3, 150, DT, 8.0);
        let turn = wrap(tr.ego[149].yaw() - tr.ego[0].yaw());
        assert!((turn - FRAC_PI_2).abs() < 1e-9, "{turn}");
        let agent_turn = wrap(tr.agents[0][149].yaw() - tr.agents[0][0].yaw());
        assert!((agent_turn - FRAC_PI_2).abs() < 1e-9);
    }

    #[test]
    fn sim2_paths_are_perpendicular() {
        let tr = ego_agent_trajectories(ScenarioId::Sim2, 150, DT, 8.0);
        let dyaw = wrap(tr.ego[0].yaw() - tr.agents[0][0].yaw());
        assert!((dyaw.abs() - FRAC_PI_2).abs() < 1e-9);
    }

    #[test]
    fn displacement_bounded_by_speed() {
        for id in ScenarioId::ALL {
            let tr = ego_agent_trajectories(id, 150, DT, 8.0);
            for track in std::iter::once(&tr.ego).chain(&tr.agents) {
                for w in track.windows(2) {
                    let d = (w[1].translation() - w[0].translation()).norm();
                    assert!(d <= 8.0 * DT + 1e-9, "{id:?} {d}");
                }
            }
        }
    }

    #[test]
    fn vehicles_never_collide() {
        for id in ScenarioId::ALL {
            let tr = ego_agent_trajectories(id, 150, DT, 8.0);
            for i in 0..150 {
                let all: Vec<_> = std::iter::once(&tr.ego[i]).chain(tr.agents.iter().map(|a| &a[i])).collect();
                for a in 0..all.len() {
                    for b in a + 1..all.len() {
                        let d = (all[a].translation() - all[b].translation()).norm();
                        assert!(d > 5.0, "{id:?} frame {i}: {d}");
                    }
                }
            }
        }
    }
}
