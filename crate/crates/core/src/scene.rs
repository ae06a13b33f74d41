//! Analytic scene primitives: exact signed distances, ray entry points, and
//! the plain-text scene description format.
//!
//! ```text
//! # one primitive per line, meters
//! sphere cx cy cz r
//! box    cx cy cz sx sy sz     # center and full edge lengths
//! plane  nx ny nz d            # distance = n̂·p + d, positive on the normal side
//! ```

use std::fmt;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Axis-aligned box; `size` holds the full edge lengths.
    Box { center: Vector3<f64>, size: Vector3<f64> },
    /// Half-space boundary `n̂·p + d = 0` with free space on the normal side.
    Plane { normal: Vector3<f64>, offset: f64 },
}

impl Primitive {
    pub fn sphere(center: Vector3<f64>, radius: f64) -> Self {
        Primitive::Sphere { center, radius }
    }

    pub fn cuboid(center: Vector3<f64>, size: Vector3<f64>) -> Self {
        Primitive::Box { center, size }
    }

    /// Normalizes `normal` and rescales the offset to match.
    pub fn plane(normal: Vector3<f64>, offset: f64) -> Self {
        let n = normal.norm();
        Primitive::Plane {
            normal: normal / n,
            offset: offset / n,
        }
    }

    /// Exact signed distance, negative inside.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        match *self {
            Primitive::Sphere { center, radius } => (p - center).norm() - radius,
            Primitive::Box { center, size } => {
                let q = (p - center).abs() - size * 0.5;
                let outside = q.map(|x| x.max(0.0)).norm();
                let inside = q.max().min(0.0);
                outside + inside
            }
            Primitive::Plane { normal, offset } => normal.dot(p) + offset,
        }
    }

    /// Ray parameter at which the ray enters the solid side of the primitive,
    /// if it does so beyond `t_min`. Rays starting inside never enter.
    pub fn ray_entry(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t_min: f64) -> Option<f64> {
        match *self {
            Primitive::Sphere { center, radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                if c < 0.0 {
                    return None;
                }
                let a = dir.norm_squared();
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / a;
                (t > t_min).then_some(t)
            }
            Primitive::Box { center, size } => {
                let half = size * 0.5;
                let lo = center - half;
                let hi = center + half;
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for k in 0..3 {
                    if dir[k].abs() < 1e-300 {
                        if origin[k] < lo[k] || origin[k] > hi[k] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (lo[k] - origin[k]) / dir[k];
                    let t2 = (hi[k] - origin[k]) / dir[k];
                    t_near = t_near.max(t1.min(t2));
                    t_far = t_far.min(t1.max(t2));
                }
                if t_near > t_far || t_near <= 0.0 {
                    return None;
                }
                (t_near > t_min).then_some(t_near)
            }
            Primitive::Plane { normal, offset } => {
                let side = normal.dot(origin) + offset;
                let rate = normal.dot(dir);
                if side < 0.0 || rate >= 0.0 {
                    return None;
                }
                let t = -side / rate;
                (t > t_min).then_some(t)
            }
        }
    }

    fn parse(line: &str, line_no: usize) -> Result<Option<Self>, SimError> {
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            return Ok(None);
        }
        let mut tokens = content.split_whitespace();
        let kind = tokens.next().unwrap_or_default();
        let values: Vec<f64> = tokens
            .map(|t| {
                t.parse::<f64>().map_err(|_| SimError::SceneFormat {
                    line: line_no,
                    message: format!("not a number: {t}"),
                })
            })
            .collect::<Result<_, _>>()?;
        let expect = |n: usize| -> Result<(), SimError> {
            if values.len() == n {
                Ok(())
            } else {
                Err(SimError::SceneFormat {
                    line: line_no,
                    message: format!("{kind} expects {n} values, got {}", values.len()),
                })
            }
        };
        let bad = |message: &str| SimError::SceneFormat {
            line: line_no,
            message: message.to_string(),
        };
        let v = |i: usize| Vector3::new(values[i], values[i + 1], values[i + 2]);
        let prim = match kind {
            "sphere" => {
                expect(4)?;
                if values[3] <= 0.0 {
                    return Err(bad("sphere radius must be positive"));
                }
                Primitive::sphere(v(0), values[3])
            }
            "box" => {
                expect(6)?;
                if v(3).iter().any(|s| *s <= 0.0) {
                    return Err(bad("box size must be positive"));
                }
                Primitive::cuboid(v(0), v(3))
            }
            "plane" => {
                expect(4)?;
                if v(0).norm() == 0.0 {
                    return Err(bad("plane normal must be non-zero"));
                }
                Primitive::plane(v(0), values[3])
            }
            other => return Err(bad(&format!("unknown primitive '{other}'"))),
        };
        Ok(Some(prim))
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Primitive::Sphere { center: c, radius } => write!(f, "sphere {} {} {} {}", c.x, c.y, c.z, radius),
            Primitive::Box { center: c, size: s } => {
                write!(f, "box {} {} {} {} {} {}", c.x, c.y, c.z, s.x, s.y, s.z)
            }
            Primitive::Plane { normal: n, offset } => write!(f, "plane {} {} {} {}", n.x, n.y, n.z, offset),
        }
    }
}

/// Union of primitives: distance is the minimum over members.
pub fn union_distance(primitives: &[Primitive], p: &Vector3<f64>) -> f64 {
    primitives
        .iter()
        .map(|prim| prim.distance(p))
        .fold(f64::INFINITY, f64::min)
}

/// First point where a ray from free space enters the union of `primitives`.
pub fn first_entry(primitives: &[Primitive], origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    primitives
        .iter()
        .filter_map(|prim| prim.ray_entry(origin, dir, 0.0))
        .min_by(f64::total_cmp)
}

pub fn parse_scene(text: &str) -> Result<Vec<Primitive>, SimError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(p) = Primitive::parse(line, i + 1)? {
            out.push(p);
        }
    }
    Ok(out)
}

pub fn load_scene(path: &Path) -> Result<Vec<Primitive>, SimError> {
    parse_scene(&std::fs::read_to_string(path)?)
}

pub fn format_scene(primitives: &[Primitive]) -> String {
    let mut s = String::new();
    for p in primitives {
        s.push_str(&p.to_string());
        s.push('\n');
    }
    s
}

/// Desk-scale room used by the examples and test suites: floor, two walls,
/// two boxes and a sphere.
pub fn standard_room() -> Vec<Primitive> {
    vec![
        Primitive::plane(Vector3::new(0.0, 0.0, 1.0), 0.0),
        Primitive::plane(Vector3::new(1.0, 0.0, 0.0), 2.5),
        Primitive::plane(Vector3::new(0.0, -1.0, 0.0), 2.5),
        Primitive::cuboid(Vector3::new(0.6, 0.4, 0.4), Vector3::new(0.8, 0.6, 0.8)),
        Primitive::cuboid(Vector3::new(-0.9, -0.8, 0.3), Vector3::new(0.5, 0.9, 0.6)),
        Primitive::sphere(Vector3::new(-0.4, 1.0, 0.5), 0.5),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn box_distance_inside_outside_and_corner() {
        let b = Primitive::cuboid(Vector3::zeros(), Vector3::new(2.0, 2.0, 2.0));
        assert_relative_eq!(b.distance(&Vector3::new(3.0, 0.0, 0.0)), 2.0);
        assert_relative_eq!(b.distance(&Vector3::new(0.5, 0.0, 0.0)), -0.5);
        assert_relative_eq!(b.distance(&Vector3::new(2.0, 2.0, 1.0)), 2f64.sqrt());
    }

    #[test]
    fn plane_is_normalized() {
        let p = Primitive::plane(Vector3::new(0.0, 0.0, 2.0), -2.0);
        assert_relative_eq!(p.distance(&Vector3::new(5.0, 1.0, 3.0)), 2.0);
    }

    #[test]
    fn ray_entries() {
        let s = Primitive::sphere(Vector3::zeros(), 1.0);
        let t = s.ray_entry(&Vector3::new(0.0, 0.0, -3.0), &Vector3::z(), 0.0).unwrap();
        assert_relative_eq!(t, 2.0);
        assert!(s.ray_entry(&Vector3::new(0.0, 0.0, -3.0), &-Vector3::z(), 0.0).is_none());
        assert!(s.ray_entry(&Vector3::zeros(), &Vector3::z(), 0.0).is_none());

        let b = Primitive::cuboid(Vector3::new(2.0, 0.0, 0.0), Vector3::new(1.0, 1.0, 1.0));
        assert_relative_eq!(b.ray_entry(&Vector3::zeros(), &Vector3::x(), 0.0).unwrap(), 1.5);
        assert!(b.ray_entry(&Vector3::zeros(), &Vector3::y(), 0.0).is_none());

        let floor = Primitive::plane(Vector3::z(), 0.0);
        let down = Vector3::new(1.0, 0.0, -1.0).normalize();
        assert_relative_eq!(floor.ray_entry(&Vector3::new(0.0, 0.0, 1.0), &down, 0.0).unwrap(), 2f64.sqrt());
        assert!(floor.ray_entry(&Vector3::new(0.0, 0.0, 1.0), &Vector3::z(), 0.0).is_none());
    }

    #[test]
    fn scene_text_round_trip() {
        let room = standard_room();
        let parsed = parse_scene(&format_scene(&room)).unwrap();
        assert_eq!(parsed, room);
    }

    #[test]
    fn scene_parse_comments_and_errors() {
        let text = "# room\nsphere 0 0 0 1 # ball\n\nplane 0 0 1 0\n";
        assert_eq!(parse_scene(text).unwrap().len(), 2);
        assert!(matches!(
            parse_scene("cone 1 2 3"),
            Err(SimError::SceneFormat { line: 1, .. })
        ));
        assert!(matches!(
            parse_scene("sphere 0 0 0\n"),
            Err(SimError::SceneFormat { line: 1, .. })
        ));
        assert!(parse_scene("sphere 0 0 0 -1").is_err());
    }
}
