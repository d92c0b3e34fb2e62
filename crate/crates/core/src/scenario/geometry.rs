use std::f64::consts::PI;

/// Planar pose. `heading` is kept in (−π, π].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading: wrap_angle(heading) }
    }

    pub fn dist(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.heading.is_finite()
    }
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Expresses `p` in the front-left frame centred on `ego`.
pub fn to_ego_frame(p: Pose, ego: Pose) -> Pose {
    let (s, c) = ego.heading.sin_cos();
    let (dx, dy) = (p.x - ego.x, p.y - ego.y);
    Pose { x: dx * c + dy * s, y: -dx * s + dy * c, heading: wrap_angle(p.heading - ego.heading) }
}

/// Inverse of [`to_ego_frame`].
pub fn from_ego_frame(p: Pose, ego: Pose) -> Pose {
    let (s, c) = ego.heading.sin_cos();
    Pose { x: ego.x + p.x * c - p.y * s, y: ego.y + p.x * s + p.y * c, heading: wrap_angle(p.heading + ego.heading) }
}

/// Rotates a free vector (velocity, offset) into the frame of `ego`.
pub fn rotate_into(v: [f64; 2], ego: Pose) -> [f64; 2] {
    let (s, c) = ego.heading.sin_cos();
    [v[0] * c + v[1] * s, -v[0] * s + v[1] * c]
}

/// Oriented box used for collision checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obb {
    pub center: [f64; 2],
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl Obb {
    pub fn new(p: Pose, length: f64, width: f64) -> Self {
        Self { center: [p.x, p.y], heading: p.heading, length, width }
    }

    fn axes(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.heading.sin_cos();
        [[c, s], [-s, c]]
    }

    fn half(&self) -> [f64; 2] {
        [self.length / 2.0, self.width / 2.0]
    }

    /// Separating-axis test.
    pub fn overlaps(&self, other: &Obb) -> bool {
        let d = [other.center[0] - self.center[0], other.center[1] - self.center[1]];
        let (a, b) = (self.axes(), other.axes());
        let (ha, hb) = (self.half(), other.half());
        for axis in a.iter().chain(b.iter()) {
            let proj = |axes: &[[f64; 2]; 2], h: &[f64; 2]| {
                h[0] * (axes[0][0] * axis[0] + axes[0][1] * axis[1]).abs()
                    + h[1] * (axes[1][0] * axis[0] + axes[1][1] * axis[1]).abs()
            };
            let dist = (d[0] * axis[0] + d[1] * axis[1]).abs();
            if dist > proj(&a, &ha) + proj(&b, &hb) {
                return false;
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_frame() {
        let p = Pose::new(1.5, -2.0, 0.3);
        assert_eq!(to_ego_frame(p, Pose::default()), p);
    }

    #[test]
    fn rotated_ego_example() {
        let ego = Pose::new(2.0, 3.0, PI / 2.0);
        let q = to_ego_frame(Pose::new(2.0, 4.0, 0.0), ego);
        assert!((q.x - 1.0).abs() < 1e-15 && q.y.abs() < 1e-15, "{q:?}");
        assert!((q.heading + PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn own_pose_maps_to_origin_exactly() {
        let ego = Pose::new(-7.25, 13.5, 2.9);
        let o = to_ego_frame(ego, ego);
        assert_eq!((o.x, o.y, o.heading), (0.0, 0.0, 0.0));
    }

    #[test]
    fn round_trip() {
        let ego = Pose::new(12.0, -4.0, -2.2);
        let p = Pose::new(3.0, 8.0, 3.0);
        let back = from_ego_frame(to_ego_frame(p, ego), ego);
        assert!((back.x - p.x).abs() < 1e-12 && (back.y - p.y).abs() < 1e-12);
        assert!(wrap_angle(back.heading - p.heading).abs() < 1e-12);
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(7.0) - (7.0 - 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn obb_overlap() {
        let a = Obb::new(Pose::new(0.0, 0.0, 0.0), 4.0, 2.0);
        assert!(a.overlaps(&Obb::new(Pose::new(3.9, 0.0, 0.0), 4.0, 2.0)));
        assert!(!a.overlaps(&Obb::new(Pose::new(4.1, 0.0, 0.0), 4.0, 2.0)));
        assert!(!a.overlaps(&Obb::new(Pose::new(0.0, 2.1, 0.0), 4.0, 2.0)));
        // A box rotated 45° reaching into the corner region.
        assert!(a.overlaps(&Obb::new(Pose::new(2.5, 1.5, PI / 4.0), 2.0, 0.5)));
        assert!(!a.overlaps(&Obb::new(Pose::new(3.2, 2.2, PI / 4.0), 1.0, 0.5)));
    }
}
