//! Planar reference paths with an arc-length table: analytic geometry plus
//! a dense parameter/arc map for `s <-> t` queries and nearest-point
//! projection.

use minsurro_core::{CoreError, CoreResult};

/// Analytic curve with derivatives up to third order.
pub trait PathGeometry: Send + Sync {
    /// Parameter domain is `[0, period)`.
    fn period(&self) -> f64;
    fn position(&self, t: f64) -> [f64; 2];
    fn d1(&self, t: f64) -> [f64; 2];
    fn d2(&self, t: f64) -> [f64; 2];
    fn d3(&self, t: f64) -> [f64; 2];
}

/// `(A sin(a t + delta), B sin(b t))`.
pub struct Lissajous {
    pub a_amp: f64,
    pub b_amp: f64,
    pub a_freq: f64,
    pub b_freq: f64,
    pub delta: f64,
}

impl Default for Lissajous {
    fn default() -> Self {
        Lissajous {
            a_amp: 1.5,
            b_amp: 2.0,
            a_freq: 3.0,
            b_freq: 2.0,
            delta: std::f64::consts::FRAC_PI_2,
        }
    }
}

impl PathGeometry for Lissajous {
    fn period(&self) -> f64 {
        2.0 * std::f64::consts::PI
    }

    fn position(&self, t: f64) -> [f64; 2] {
        [
            self.a_amp * (self.a_freq * t + self.delta).sin(),
            self.b_amp * (self.b_freq * t).sin(),
        ]
    }

    fn d1(&self, t: f64) -> [f64; 2] {
        [
            self.a_amp * self.a_freq * (self.a_freq * t + self.delta).cos(),
            self.b_amp * self.b_freq * (self.b_freq * t).cos(),
        ]
    }

    fn d2(&self, t: f64) -> [f64; 2] {
        [
            -self.a_amp * self.a_freq.powi(2) * (self.a_freq * t + self.delta).sin(),
            -self.b_amp * self.b_freq.powi(2) * (self.b_freq * t).sin(),
        ]
    }

    fn d3(&self, t: f64) -> [f64; 2] {
        [
            -self.a_amp * self.a_freq.powi(3) * (self.a_freq * t + self.delta).cos(),
            -self.b_amp * self.b_freq.powi(3) * (self.b_freq * t).cos(),
        ]
    }
}

/// Straight segment, mainly for zero-curvature oracles in tests.
pub struct StraightLine {
    pub origin: [f64; 2],
    pub direction: [f64; 2],
    pub speed: f64,
}

impl PathGeometry for StraightLine {
    fn period(&self) -> f64 {
        2.0 * std::f64::consts::PI
    }

    fn position(&self, t: f64) -> [f64; 2] {
        [
            self.origin[0] + self.direction[0] * self.speed * t,
            self.origin[1] + self.direction[1] * self.speed * t,
        ]
    }

    fn d1(&self, _t: f64) -> [f64; 2] {
        [self.direction[0] * self.speed, self.direction[1] * self.speed]
    }

    fn d2(&self, _t: f64) -> [f64; 2] {
        [0.0, 0.0]
    }

    fn d3(&self, _t: f64) -> [f64; 2] {
        [0.0, 0.0]
    }
}

/// Geometry at one point of the path.
#[derive(Debug, Clone, Copy)]
pub struct PathPoint {
    pub t: f64,
    pub position: [f64; 2],
    pub heading: f64,
    pub curvature: f64,
    pub speed: f64,
    /// Curvature rate with respect to the curve parameter.
    pub dkappa_dt: f64,
}

pub struct Path {
    geom: Box<dyn PathGeometry>,
    ts: Vec<f64>,
    arc: Vec<f64>,
    positions: Vec<[f64; 2]>,
    total_len: f64,
}

impl Path {
    /// Builds the arc-length table with `samples` nodes. Fails if the
    /// tangent degenerates anywhere on the grid.
    pub fn new(geom: Box<dyn PathGeometry>, samples: usize) -> CoreResult<Self> {
        let period = geom.period();
        let n = samples.max(16);
        let mut ts = Vec::with_capacity(n + 1);
        let mut arc = Vec::with_capacity(n + 1);
        let mut positions = Vec::with_capacity(n + 1);
        let mut prev_speed = 0.0;
        let mut cum = 0.0;
        for i in 0..=n {
            let t = period * i as f64 / n as f64;
            let d1 = geom.d1(t);
            let speed = (d1[0] * d1[0] + d1[1] * d1[1]).sqrt();
            if speed < 1e-9 {
                return Err(CoreError::ContractViolation(format!(
                    "degenerate tangent at t = {t}"
                )));
            }
            if i > 0 {
                cum += 0.5 * (speed + prev_speed) * (period / n as f64);
            }
            ts.push(t);
            arc.push(cum);
            positions.push(geom.position(t));
            prev_speed = speed;
        }
        Ok(Path {
            geom: geom,
            ts,
            arc,
            positions,
            total_len: cum,
        })
    }

    pub fn lissajous() -> Self {
        Path::new(Box::new(Lissajous::default()), 8192).expect("lissajous is regular")
    }

    pub fn total_len(&self) -> f64 {
        self.total_len
    }

    pub fn period(&self) -> f64 {
        self.geom.period()
    }

    pub fn arc_table(&self) -> (&[f64], &[f64]) {
        (&self.ts, &self.arc)
    }

    /// Analytic sample at curve parameter `t`.
    pub fn sample_at(&self, t: f64) -> CoreResult<PathPoint> {
        let d1 = self.geom.d1(t);
        let d2 = self.geom.d2(t);
        let d3 = self.geom.d3(t);
        let speed2 = d1[0] * d1[0] + d1[1] * d1[1];
        let speed = speed2.sqrt();
        if speed < 1e-9 {
            return Err(CoreError::ContractViolation(format!(
                "degenerate tangent at t = {t}"
            )));
        }
        let num = d1[0] * d2[1] - d1[1] * d2[0];
        let curvature = num / (speed2 * speed);
        let dnum = d1[0] * d3[1] - d1[1] * d3[0];
        let dspeed_term = d1[0] * d2[0] + d1[1] * d2[1];
        let dkappa_dt = (dnum * speed2 - 3.0 * num * dspeed_term) / (speed2 * speed2 * speed);
        Ok(PathPoint {
            t,
            position: self.geom.position(t),
            heading: d1[1].atan2(d1[0]),
            curvature,
            speed,
            dkappa_dt,
        })
    }

    /// Curve parameter of a normalized arc position `s` (wrapped to [0, 1)).
    pub fn t_of_s(&self, s: f64) -> f64 {
        let s = s.rem_euclid(1.0);
        let target = s * self.total_len;
        // Binary search on the cumulative table.
        let idx = match self
            .arc
            .binary_search_by(|a| a.partial_cmp(&target).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        let idx = idx.min(self.ts.len() - 2);
        let (a0, a1) = (self.arc[idx], self.arc[idx + 1]);
        let (t0, t1) = (self.ts[idx], self.ts[idx + 1]);
        let mut t = if a1 > a0 {
            t0 + (t1 - t0) * (target - a0) / (a1 - a0)
        } else {
            t0
        };
        // Newton refinement on arc(t) = target, using the trapezoid estimate
        // from the left node and the analytic speed.
        for _ in 0..3 {
            let d1 = self.geom.d1(t);
            let speed = (d1[0] * d1[0] + d1[1] * d1[1]).sqrt();
            let d1l = self.geom.d1(t0);
            let speed_l = (d1l[0] * d1l[0] + d1l[1] * d1l[1]).sqrt();
            let est = a0 + 0.5 * (speed + speed_l) * (t - t0);
            t -= (est - target) / speed;
        }
        t.clamp(t0 - (t1 - t0), t1 + (t1 - t0))
    }

    /// Geometry at normalized arc position `s`, including the curvature rate
    /// with respect to `s`.
    pub fn point_at_s(&self, s: f64) -> CoreResult<FrenetRef> {
        let t = self.t_of_s(s);
        let pt = self.sample_at(t)?;
        Ok(FrenetRef {
            point: pt,
            s: s.rem_euclid(1.0),
            // ds/dt = speed / L, so dkappa/ds = dkappa/dt * L / speed.
            dkappa_ds: pt.dkappa_dt * self.total_len / pt.speed,
        })
    }

    /// Nearest-point projection of a plane point onto the path. Scans the
    /// table (keeping the lowest parameter on ties) and refines by golden
    /// section. Returns `(t, s, signed_distance_unsigned)` where the third
    /// entry is the Euclidean distance.
    pub fn project(&self, q: [f64; 2]) -> (f64, f64, f64) {
        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        for (i, p) in self.positions.iter().enumerate() {
            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
            if d2 < best_d2 - 0.0 {
                best_d2 = d2;
                best = i;
            }
        }
        let n = self.ts.len() - 1;
        let h = self.geom.period() / n as f64;
        let t_center = self.ts[best];
        let dist2 = |t: f64| -> f64 {
            let p = self.geom.position(t);
            (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)
        };
        // Golden-section on [t - h, t + h].
        let (mut lo, mut hi) = (t_center - h, t_center + h);
        let phi = 0.5 * (3.0 - 5.0f64.sqrt());
        let mut t1 = lo + phi * (hi - lo);
        let mut t2 = hi - phi * (hi - lo);
        let mut f1 = dist2(t1);
        let mut f2 = dist2(t2);
        for _ in 0..80 {
            if f1 < f2 {
                hi = t2;
                t2 = t1;
                f2 = f1;
                t1 = lo + phi * (hi - lo);
                f1 = dist2(t1);
            } else {
                lo = t1;
                t1 = t2;
                f1 = f2;
                t2 = hi - phi * (hi - lo);
                f2 = dist2(t2);
            }
        }
        let t = 0.5 * (lo + hi);
        let t_wrapped = t.rem_euclid(self.geom.period());
        let s = self.s_of_t(t_wrapped);
        (t_wrapped, s, dist2(t).sqrt())
    }

    /// Normalized arc position of curve parameter `t`.
    pub fn s_of_t(&self, t: f64) -> f64 {
        let t = t.rem_euclid(self.geom.period());
        let idx = match self.ts.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        let idx = idx.min(self.ts.len() - 2);
        let d1l = self.geom.d1(self.ts[idx]);
        let speed_l = (d1l[0] * d1l[0] + d1l[1] * d1l[1]).sqrt();
        let d1t = self.geom.d1(t);
        let speed_t = (d1t[0] * d1t[0] + d1t[1] * d1t[1]).sqrt();
        let arc = self.arc[idx] + 0.5 * (speed_l + speed_t) * (t - self.ts[idx]);
        (arc / self.total_len).rem_euclid(1.0)
    }
}

/// Reference-frame data at an arc position.
#[derive(Debug, Clone, Copy)]
pub struct FrenetRef {
    pub point: PathPoint,
    pub s: f64,
    /// Curvature rate with respect to normalized arc length.
    pub dkappa_ds: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lissajous_starts_at_expected_point() {
        let path = Path::lissajous();
        let pt = path.sample_at(0.0).unwrap();
        assert!((pt.position[0] - 1.5).abs() < 1e-12);
        assert!(pt.position[1].abs() < 1e-12);
    }

    #[test]
    fn lissajous_closes_after_one_period() {
        let geom = Lissajous::default();
        let p0 = geom.position(0.0);
        let p1 = geom.position(2.0 * std::f64::consts::PI);
        assert!((p0[0] - p1[0]).abs() < 1e-9);
        assert!((p0[1] - p1[1]).abs() < 1e-9);
    }

    #[test]
    fn total_length_matches_reported_value() {
        let path = Path::lissajous();
        let want = 25.68;
        assert!(
            (path.total_len() - want).abs() / want < 0.01,
            "length {}",
            path.total_len()
        );
    }

    #[test]
    fn arc_table_is_strictly_increasing() {
        let path = Path::lissajous();
        let (_, arc) = path.arc_table();
        for w in arc.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn curvature_matches_finite_difference_heading_rate() {
        // kappa = d(heading)/d(arc); compare against central differences of
        // heading over the sampled curve.
        let path = Path::lissajous();
        let h = 1e-5;
        let mut rng_t: f64 = 0.37;
        for _ in 0..100 {
            rng_t = (rng_t * 9301.0 + 49297.0) % (2.0 * std::f64::consts::PI);
            let t = rng_t;
            let pt = path.sample_at(t).unwrap();
            let hp = path.sample_at(t + h).unwrap().heading;
            let hm = path.sample_at(t - h).unwrap().heading;
            let mut dh = hp - hm;
            while dh > std::f64::consts::PI {
                dh -= 2.0 * std::f64::consts::PI;
            }
            while dh < -std::f64::consts::PI {
                dh += 2.0 * std::f64::consts::PI;
            }
            let kappa_fd = dh / (2.0 * h) / pt.speed;
            assert!(
                (pt.curvature - kappa_fd).abs() <= 1e-4,
                "t = {t}: {} vs {kappa_fd}",
                pt.curvature
            );
        }
    }

    #[test]
    fn dkappa_dt_matches_finite_differences() {
        let path = Path::lissajous();
        let h = 1e-6;
        for i in 0..50 {
            let t = 0.1 + i as f64 * 0.12;
            let pt = path.sample_at(t).unwrap();
            let kp = path.sample_at(t + h).unwrap().curvature;
            let km = path.sample_at(t - h).unwrap().curvature;
            let fd = (kp - km) / (2.0 * h);
            assert!(
                (pt.dkappa_dt - fd).abs() <= 1e-4 * (1.0 + fd.abs()),
                "t = {t}: {} vs {fd}",
                pt.dkappa_dt
            );
        }
    }

    #[test]
    fn s_and_t_are_inverse() {
        let path = Path::lissajous();
        for i in 0..200 {
            let s = i as f64 / 200.0;
            let t = path.t_of_s(s);
            let s_back = path.s_of_t(t);
            let mut err = (s_back - s).abs();
            err = err.min((s_back - s + 1.0).abs()).min((s_back - s - 1.0).abs());
            assert!(err < 1e-9, "s = {s}: back {s_back}");
        }
    }

    #[test]
    fn projection_recovers_on_path_points() {
        let path = Path::lissajous();
        for i in 0..50 {
            let t = 0.05 + i as f64 * 0.12;
            let q = path.sample_at(t).unwrap().position;
            let (_, s, dist) = path.project(q);
            assert!(dist < 1e-9, "distance {dist}");
            let s_want = path.s_of_t(t);
            let mut err = (s - s_want).abs();
            err = err.min((s - s_want + 1.0).abs()).min((s - s_want - 1.0).abs());
            assert!(err < 1e-6);
        }
    }

    #[test]
    fn straight_line_has_zero_curvature() {
        let geom = StraightLine {
            origin: [1.0, 2.0],
            direction: [0.6, 0.8],
            speed: 2.0,
        };
        let path = Path::new(Box::new(geom), 256).unwrap();
        let pt = path.sample_at(1.0).unwrap();
        assert_eq!(pt.curvature, 0.0);
        assert!((pt.heading - 0.8f64.atan2(0.6)).abs() < 1e-12);
    }
}
