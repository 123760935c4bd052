//! Look-at pinhole camera on an orbit rig.

use crate::geom::{UnitQuat, Vec3, SE3};

/// Pinhole camera. `pose` maps world to camera coordinates, where +x is
/// image-right, +y is image-down and +z is the viewing direction (depth);
/// this keeps the basis right-handed so the pose is a proper rigid
/// transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fov_y_deg: f64,
    pub pose: SE3,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Camera on the sphere of `radius` looking at the origin, up = +y.
    /// Azimuth 0, elevation 0 places the camera at (0, 0, radius).
    pub fn orbit(azimuth_deg: f64, elevation_deg: f64, radius: f64, fov_y_deg: f64, resolution: (usize, usize)) -> Camera {
        assert!(radius > 0.0, "orbit radius must be positive");
        let az = azimuth_deg.to_radians();
        let el = elevation_deg.to_radians();
        let pos = Vec3::new(radius * el.cos() * az.sin(), radius * el.sin(), radius * el.cos() * az.cos());
        Camera::look_at(pos, Vec3::ZERO, fov_y_deg, resolution)
    }

    pub fn look_at(pos: Vec3, target: Vec3, fov_y_deg: f64, resolution: (usize, usize)) -> Camera {
        let forward = target.sub(pos).normalized();
        let mut up = Vec3::new(0.0, 1.0, 0.0);
        if forward.dot(up).abs() > 0.999 {
            up = Vec3::new(0.0, 0.0, -1.0);
        }
        let right = forward.cross(up).normalized();
        let down = forward.cross(right);
        // world->camera rotation has rows (right, down, forward)
        let m = [
            [right.x, right.y, right.z],
            [down.x, down.y, down.z],
            [forward.x, forward.y, forward.z],
        ];
        let rotation = UnitQuat::from_rotation_matrix(&m).expect("orthonormal basis");
        let translation = rotation.rotate(pos).scale(-1.0);
        Camera {
            fov_y_deg,
            pose: SE3::new(rotation, translation),
            width: resolution.0,
            height: resolution.1,
            near: 0.01,
            far: 100.0,
        }
    }

    /// Focal length in pixels (vertical).
    pub fn focal_px(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.fov_y_deg.to_radians()).tan()
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        self.pose.apply(p)
    }

    /// Projects a world point to (pixel u, pixel v, depth). Depth <= 0 means
    /// behind the camera.
    pub fn project(&self, p: Vec3) -> (f64, f64, f64) {
        let c = self.to_camera(p);
        let f = self.focal_px();
        let u = 0.5 * self.width as f64 + f * c.x / c.z;
        let v = 0.5 * self.height as f64 + f * c.y / c.z;
        (u, v, c.z)
    }

    /// Half-resolution copy used by the progressive schedule.
    pub fn with_resolution(&self, width: usize, height: usize) -> Camera {
        Camera { width, height, ..*self }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orbit_convention_anchor() {
        let cam = Camera::orbit(0.0, 0.0, 2.0, 33.9, (64, 64));
        let world_pos = cam.pose.inverse().apply(Vec3::ZERO);
        assert!(world_pos.dist(Vec3::new(0.0, 0.0, 2.0)) < 1e-9);
        // origin is 2m straight ahead
        let c = cam.to_camera(Vec3::ZERO);
        assert!(c.x.abs() < 1e-9 && c.y.abs() < 1e-9 && (c.z - 2.0).abs() < 1e-9);
    }

    #[test]
    fn orbit_180_negates_view_axis() {
        let cam = Camera::orbit(180.0, 0.0, 2.0, 33.9, (64, 64));
        let world_pos = cam.pose.inverse().apply(Vec3::ZERO);
        assert!(world_pos.dist(Vec3::new(0.0, 0.0, -2.0)) < 1e-9);
        let c = cam.to_camera(Vec3::new(0.0, 0.0, 1.0));
        assert!((c.z - 3.0).abs() < 1e-9);
    }

    #[test]
    fn origin_projects_to_image_center() {
        for (az, el) in [(0.0, 0.0), (45.0, 15.0), (200.0, -30.0), (330.0, 60.0)] {
            let cam = Camera::orbit(az, el, 2.0, 33.9, (64, 48));
            let (u, v, z) = cam.project(Vec3::ZERO);
            assert!((u - 32.0).abs() < 1e-9, "az={az} el={el}");
            assert!((v - 24.0).abs() < 1e-9, "az={az} el={el}");
            assert!((z - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn up_is_plus_y() {
        // a point slightly above the origin lands above the image center
        let cam = Camera::orbit(72.0, 10.0, 2.0, 33.9, (64, 64));
        let (_, v, _) = cam.project(Vec3::new(0.0, 0.1, 0.0));
        assert!(v < 32.0);
    }
}
