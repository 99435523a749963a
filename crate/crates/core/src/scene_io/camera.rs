//! Pinhole cameras. Camera space is x right, y down, z forward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};
use crate::scene_io::bvh::Ray;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation: `p_cam = R p_world + t`.
    pub translation: Vec3,
    /// Focal length in pixels.
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_y_deg: f64, width: usize, height: usize) -> Camera {
        let forward = (target - eye).normalized();
        let mut right = forward.cross(up);
        if right.length() < 1e-9 {
            right = forward.cross(Vec3::X);
        }
        let right = right.normalized();
        let down = forward.cross(right);
        let rotation = Mat3::from_rows(right, down, forward);
        let translation = -rotation.mul_vec(eye);
        let focal = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Camera {
            rotation,
            translation,
            focal,
            cx: width as f64 * 0.5,
            cy: height as f64 * 0.5,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let should_be_identity = r.mul_mat(&r.transpose());
        let mut err = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((should_be_identity.0[i][j] - target).abs());
            }
        }
        if err > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument("camera rotation is not a proper rotation".into()));
        }
        if self.focal <= 0.0 || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("camera intrinsics are degenerate".into()));
        }
        Ok(())
    }

    pub fn position(&self) -> Vec3 {
        -self.rotation.transpose().mul_vec(self.translation)
    }

    /// Primary ray through continuous image coordinates (pixel (x, y) spans [x, x+1)).
    pub fn generate_ray(&self, px: f64, py: f64) -> Ray {
        let d_cam = Vec3::new((px - self.cx) / self.focal, (py - self.cy) / self.focal, 1.0);
        Ray { origin: self.position(), dir: self.rotation.transpose().mul_vec(d_cam).normalized() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_center_ray_hits_target() {
        let cam = Camera::look_at(Vec3::new(1.0, 2.0, 3.0), Vec3::ZERO, Vec3::Y, 40.0, 64, 48);
        cam.validate().unwrap();
        let ray = cam.generate_ray(32.0, 24.0);
        let to_target = (Vec3::ZERO - ray.origin).normalized();
        assert!((ray.dir - to_target).length() < 1e-12);
    }

    #[test]
    fn image_y_points_down_in_world() {
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 5.0), Vec3::ZERO, Vec3::Y, 40.0, 64, 64);
        let top = cam.generate_ray(32.0, 0.0);
        assert!(top.dir.y > 0.0);
    }

    #[test]
    fn rejects_reflection_matrix() {
        let mut cam = Camera::look_at(Vec3::new(0.0, 0.0, 5.0), Vec3::ZERO, Vec3::Y, 40.0, 8, 8);
        cam.rotation.0[0] = [-cam.rotation.0[0][0], -cam.rotation.0[0][1], -cam.rotation.0[0][2]];
        assert!(cam.validate().is_err());
    }
}
