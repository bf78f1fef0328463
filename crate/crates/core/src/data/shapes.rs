//! The sixteen parametric shape families and their rasterization.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub const FAMILY_NAMES: [&str; 16] = [
    "disc", "ring", "square", "frame", "triangle", "plus", "x_cross", "ellipse", "star", "rhombus", "half_disc",
    "crescent", "hexagon", "l_shape", "t_shape", "arrow",
];

/// A posed shape in unit image coordinates (`[0, 1]²`, x right, y down).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub family: usize,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub angle: f64,
}

/// Membership test in the family's canonical frame (radius 1, unrotated).
pub fn canonical_contains(family: usize, u: f64, v: f64) -> bool {
    let rho2 = u * u + v * v;
    let s3 = 3f64.sqrt();
    match family {
        0 => rho2 <= 1.0,
        1 => (0.3025..=1.0).contains(&rho2),
        2 => u.abs().max(v.abs()) <= 0.8,
        3 => (0.5..=0.85).contains(&u.abs().max(v.abs())),
        4 => v >= -0.5 && s3 * u + v <= 1.0 && -s3 * u + v <= 1.0,
        5 => plus(u, v),
        6 => plus((u + v) / 2f64.sqrt(), (u - v) / 2f64.sqrt()),
        7 => u * u + 4.0 * v * v <= 1.0,
        8 => rho2.sqrt() <= 0.6 + 0.4 * (5.0 * v.atan2(u)).cos(),
        9 => u.abs() / 0.55 + v.abs() <= 1.0,
        10 => rho2 <= 1.0 && v >= 0.0,
        11 => rho2 <= 1.0 && (u - 0.45).powi(2) + v * v > 0.5625,
        12 => v.abs() <= 0.5 * s3 && s3 * u.abs() + v.abs() <= s3,
        13 => {
            let inside = |a: f64, lo: f64, hi: f64| (lo..=hi).contains(&a);
            (inside(u, -0.8, -0.3) && inside(v, -0.8, 0.8)) || (inside(u, -0.8, 0.8) && inside(v, 0.3, 0.8))
        }
        14 => (u.abs() <= 0.8 && (-0.8..=-0.4).contains(&v)) || (u.abs() <= 0.22 && v.abs() <= 0.8),
        15 => ((-0.9..=0.1).contains(&u) && v.abs() <= 0.2) || ((0.1..=0.9).contains(&u) && v.abs() <= 0.7 * (0.9 - u) / 0.8),
        _ => false,
    }
}

fn plus(u: f64, v: f64) -> bool {
    (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0)
}

impl ShapeInstance {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = ((x - self.cx) / self.radius, (y - self.cy) / self.radius);
        let (sin, cos) = self.angle.sin_cos();
        let u = cos * dx + sin * dy;
        let v = -sin * dx + cos * dy;
        canonical_contains(self.family, u, v)
    }

    /// Coverage at the pixel centres of an `n × n` grid, row-major.
    pub fn rasterize(&self, n: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                out.push(self.contains((x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64));
            }
        }
        out
    }
}

pub(crate) fn random_angle(u: f64) -> f64 {
    2.0 * PI * u
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_family_has_area() {
        for f in 0..16 {
            let s = ShapeInstance {
                family: f,
                cx: 0.5,
                cy: 0.5,
                radius: 0.4,
                angle: 0.3,
            };
            let count = s.rasterize(64).iter().filter(|&&b| b).count();
            assert!(count > 100, "family {} covers {} pixels", FAMILY_NAMES[f], count);
        }
    }

    #[test]
    fn families_are_distinct_under_rotation() {
        // Compare rotation-invariant area ratios at the canonical scale.
        let area = |f: usize| {
            let s = ShapeInstance {
                family: f,
                cx: 0.5,
                cy: 0.5,
                radius: 0.45,
                angle: 0.0,
            };
            s.rasterize(128).iter().filter(|&&b| b).count()
        };
        let areas: Vec<usize> = (0..16).map(area).collect();
        for i in 0..16 {
            for j in i + 1..16 {
                assert_ne!(areas[i], areas[j], "{} vs {}", FAMILY_NAMES[i], FAMILY_NAMES[j]);
            }
        }
    }
}
