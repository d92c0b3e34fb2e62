/// Intelligent Driver Model parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdmParams {
    /// Maximum acceleration.
    pub a: f64,
    /// Comfortable deceleration.
    pub b: f64,
    /// Jam distance.
    pub s0: f64,
    /// Desired time headway.
    pub t_hw: f64,
    pub delta: f64,
    /// Hard braking limit; the output never falls below `-b_max`.
    pub b_max: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self { a: 1.5, b: 2.0, s0: 2.0, t_hw: 1.5, delta: 4.0, b_max: 9.0 }
    }
}

/// Bumper-to-bumper gap and closing speed (`v - v_leader`) to a leader.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leader {
    pub gap: f64,
    pub dv: f64,
}

const MIN_GAP: f64 = 0.01;

pub fn idm_accel(v: f64, v0: f64, leader: Option<Leader>, p: &IdmParams) -> f64 {
    let v = v.max(0.0);
    // A non-positive desired speed means "stop here".
    let free = if v0 <= 0.0 { 1.0 + v } else { (v / v0).powf(p.delta) };
    let interaction = match leader {
        None => 0.0,
        Some(l) => {
            let s_star = (p.s0 + v * p.t_hw + v * l.dv / (2.0 * (p.a * p.b).sqrt())).max(0.0);
            (s_star / l.gap.max(MIN_GAP)).powi(2)
        }
    };
    (p.a * (1.0 - free - interaction)).clamp(-p.b_max, p.a)
}

/// Ballistic update over `dt` that never reverses: returns `(distance, speed)`.
pub fn integrate(v: f64, a: f64, dt: f64) -> (f64, f64) {
    let v_next = v + a * dt;
    if v_next >= 0.0 {
        (v * dt + 0.5 * a * dt * dt, v_next)
    } else {
        // Stops inside the step.
        (if a < 0.0 { -v * v / (2.0 * a) } else { 0.0 }, 0.0)
    }
}
