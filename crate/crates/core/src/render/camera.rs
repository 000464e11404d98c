use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub(crate) type Vec3 = [f64; 3];

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Pinhole camera with a vertical field of view in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub eye: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.dir, t))
    }

    /// Entry and exit distances through the `[-1, 1]^3` box, clipped to
    /// `t >= 0`; `None` if the ray misses.
    pub fn box_interval(&self) -> Option<(f64, f64)> {
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for a in 0..3 {
            if self.dir[a] == 0.0 {
                if self.origin[a].abs() > 1.0 {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / self.dir[a];
            let (mut near, mut far) = ((-1.0 - self.origin[a]) * inv, (1.0 - self.origin[a]) * inv);
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

impl Camera {
    /// Looks at the origin from `distance` along the given azimuth (about +y)
    /// and elevation, with +y up.
    pub fn orbit(azimuth_deg: f64, elevation_deg: f64, distance: f64, width: usize, height: usize) -> Self {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        Self {
            eye: [
                distance * el.cos() * az.sin(),
                distance * el.sin(),
                distance * el.cos() * az.cos(),
            ],
            look_at: [0.0; 3],
            up: [0.0, 1.0, 0.0],
            fov_deg: 40.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::DegenerateCamera(m.into()));
        if self.width == 0 || self.height == 0 {
            return bad("image must be at least 1x1");
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad("field of view must be in (0, 180) degrees");
        }
        let fwd = sub(self.look_at, self.eye);
        if !(norm(fwd) > 1e-12) {
            return bad("eye and look-at coincide");
        }
        let up_len = norm(self.up);
        if up_len == 0.0 || norm(cross(fwd, self.up)) <= 1e-9 * norm(fwd) * up_len {
            return bad("up vector is parallel to the view direction");
        }
        Ok(())
    }

    /// Ray through the center of pixel `(px, py)`, row 0 at the top.
    pub fn ray(&self, px: usize, py: usize) -> Ray {
        let fwd = sub(self.look_at, self.eye);
        let fwd = scale(fwd, 1.0 / norm(fwd));
        let right = cross(fwd, self.up);
        let right = scale(right, 1.0 / norm(right));
        let up = cross(right, fwd);
        let half_h = (self.fov_deg.to_radians() / 2.0).tan();
        let half_w = half_h * self.width as f64 / self.height as f64;
        let u = (2.0 * (px as f64 + 0.5) / self.width as f64 - 1.0) * half_w;
        let v = (1.0 - 2.0 * (py as f64 + 0.5) / self.height as f64) * half_h;
        let d = add(fwd, add(scale(right, u), scale(up, v)));
        Ray {
            origin: self.eye,
            dir: scale(d, 1.0 / norm(d)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_ray_points_at_target() {
        let cam = Camera::orbit(30.0, 20.0, 4.0, 33, 33);
        cam.validate().unwrap();
        let r = cam.ray(16, 16);
        let to_target = sub(cam.look_at, cam.eye);
        let cos = dot(r.dir, to_target) / norm(to_target);
        assert!((cos - 1.0).abs() < 1e-12);
        let (t0, t1) = r.box_interval().unwrap();
        assert!(t0 > 0.0 && t1 > t0);
    }

    #[test]
    fn box_intersection() {
        let r = Ray {
            origin: [0.0, 0.0, -5.0],
            dir: [0.0, 0.0, 1.0],
        };
        assert_eq!(r.box_interval(), Some((4.0, 6.0)));
        let miss = Ray {
            origin: [3.0, 0.0, -5.0],
            dir: [0.0, 0.0, 1.0],
        };
        assert_eq!(miss.box_interval(), None);
        let inside = Ray {
            origin: [0.0, 0.5, 0.0],
            dir: [0.0, 1.0, 0.0],
        };
        assert_eq!(inside.box_interval(), Some((0.0, 0.5)));
    }

    #[test]
    fn degenerate_cameras_rejected() {
        let mut c = Camera::orbit(0.0, 0.0, 3.0, 8, 8);
        c.look_at = c.eye;
        assert!(c.validate().is_err());
        let mut c = Camera::orbit(0.0, 0.0, 3.0, 8, 8);
        c.up = [0.0, 0.0, -1.0];
        assert!(c.validate().is_err());
        let mut c = Camera::orbit(0.0, 0.0, 3.0, 8, 8);
        c.width = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn top_row_looks_up() {
        let cam = Camera::orbit(0.0, 0.0, 4.0, 8, 8);
        assert!(cam.ray(4, 0).dir[1] > 0.0);
        assert!(cam.ray(4, 7).dir[1] < 0.0);
        assert!(cam.ray(7, 4).dir[0] > 0.0);
    }
}
