/// Coefficients `c0..c5` of `p(t) = Σ cᵢ tⁱ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quintic(pub [f64; 6]);

/// Boundary state of one axis: position, velocity, acceleration.
pub type AxisState = [f64; 3];

/// Quintic matching `s0` at `t = 0` and `s1` at `t = duration`.
///
/// # Panics
/// If `duration` is not positive.
pub fn quintic_fit(s0: AxisState, s1: AxisState, duration: f64) -> Quintic {
    assert!(duration > 0.0, "quintic duration must be positive");
    let [p0, v0, a0] = s0;
    let [p1, v1, a1] = s1;
    let t = duration;
    let (t2, t3) = (t * t, t * t * t);
    let (t4, t5) = (t3 * t, t3 * t2);
    let c3 = (20.0 * (p1 - p0) - (8.0 * v1 + 12.0 * v0) * t - (3.0 * a0 - a1) * t2) / (2.0 * t3);
    let c4 = (30.0 * (p0 - p1) + (14.0 * v1 + 16.0 * v0) * t + (3.0 * a0 - 2.0 * a1) * t2) / (2.0 * t4);
    let c5 = (12.0 * (p1 - p0) - 6.0 * (v1 + v0) * t - (a0 - a1) * t2) / (2.0 * t5);
    Quintic([p0, v0, a0 / 2.0, c3, c4, c5])
}

impl Quintic {
    pub fn pos(&self, t: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }

    pub fn vel(&self, t: f64) -> f64 {
        let c = &self.0;
        c[1] + t * (2.0 * c[2] + t * (3.0 * c[3] + t * (4.0 * c[4] + t * 5.0 * c[5])))
    }

    pub fn acc(&self, t: f64) -> f64 {
        let c = &self.0;
        2.0 * c[2] + t * (6.0 * c[3] + t * (12.0 * c[4] + t * 20.0 * c[5]))
    }

    pub fn state(&self, t: f64) -> AxisState {
        [self.pos(t), self.vel(t), self.acc(t)]
    }
}
