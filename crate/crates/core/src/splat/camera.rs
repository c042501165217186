use rand::Rng;

use crate::error::{Error, Result};

/// Pinhole camera looking at `look_at` from `position`. Camera space is
/// x right, y down, z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    /// Vertical field of view in degrees.
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

pub const DEFAULT_NEAR: f64 = 0.01;
pub const DEFAULT_FAR: f64 = 100.0;
pub const DEFAULT_FOV_Y: f64 = 49.1;

/// World-to-camera rotation, intrinsics and image size derived from a
/// [`Camera`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct View {
    /// Rows are the camera's right, down and forward axes.
    pub rotation: [[f64; 3]; 3],
    pub position: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub near: f64,
    pub far: f64,
    pub width: usize,
    pub height: usize,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Camera {
    /// Camera on a sphere of `radius` around the origin, z up.
    pub fn orbit(azimuth_deg: f64, elevation_deg: f64, radius: f64, fov_y: f64, width: usize, height: usize) -> Self {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        Camera {
            position: [radius * el.cos() * az.cos(), radius * el.cos() * az.sin(), radius * el.sin()],
            look_at: [0.0; 3],
            up: [0.0, 0.0, 1.0],
            fov_y,
            width,
            height,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if norm(sub(self.look_at, self.position)) == 0.0 {
            return Err(Error::InvalidArgument("camera position equals look_at".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidArgument(format!("need 0 < near < far, got {} and {}", self.near, self.far)));
        }
        if !(self.fov_y > 0.0 && self.fov_y < 180.0) {
            return Err(Error::InvalidArgument(format!("fov_y {} outside (0, 180)", self.fov_y)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("image size must be nonzero".into()));
        }
        Ok(())
    }

    /// Azimuth of the position around the z axis, in `[0, 360)`.
    pub fn azimuth_deg(&self) -> f64 {
        let a = self.position[1].atan2(self.position[0]).to_degrees();
        let a = if a < 0.0 { a + 360.0 } else { a };
        if a >= 360.0 {
            0.0
        } else {
            a
        }
    }

    pub fn elevation_deg(&self) -> f64 {
        let p = self.position;
        p[2].atan2((p[0] * p[0] + p[1] * p[1]).sqrt()).to_degrees()
    }

    pub fn view(&self) -> Result<View> {
        self.validate()?;
        let f = unit(sub(self.look_at, self.position));
        let mut right = cross(f, self.up);
        if norm(right) < 1e-9 {
            right = cross(f, [0.0, 1.0, 0.0]);
        }
        let right = unit(right);
        let down = cross(f, right);
        let focal = self.height as f64 / (2.0 * (self.fov_y.to_radians() / 2.0).tan());
        Ok(View {
            rotation: [right, down, f],
            position: self.position,
            fx: focal,
            fy: focal,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
            near: self.near,
            far: self.far,
            width: self.width,
            height: self.height,
        })
    }
}

impl View {
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let d = sub(p, self.position);
        let w = &self.rotation;
        [
            w[0][0] * d[0] + w[0][1] * d[1] + w[0][2] * d[2],
            w[1][0] * d[0] + w[1][1] * d[1] + w[1][2] * d[2],
            w[2][0] * d[0] + w[2][1] * d[1] + w[2][2] * d[2],
        ]
    }

    /// Pixel coordinates of a camera-space point; pixel centers sit at `+0.5`.
    pub fn to_pixel(&self, t: [f64; 3]) -> [f64; 2] {
        [self.fx * t[0] / t[2] + self.cx, self.fy * t[1] / t[2] + self.cy]
    }
}

/// Uniform azimuth in `[0, 360)`, elevation in `[0, 90)` and radius in the
/// given range, looking at the origin.
pub fn sample_camera<R: Rng + ?Sized>(
    rng: &mut R,
    radius_range: (f64, f64),
    fov_y: f64,
    size: (usize, usize),
) -> Result<Camera> {
    let (r_min, r_max) = radius_range;
    if !(r_min > 0.0 && r_min <= r_max) {
        return Err(Error::InvalidArgument(format!("bad radius range ({r_min}, {r_max})")));
    }
    let az = rng.random_range(0.0..360.0);
    let el = rng.random_range(0.0..90.0);
    let r = if r_min == r_max { r_min } else { rng.random_range(r_min..=r_max) };
    let cam = Camera::orbit(az, el, r, fov_y, size.0, size.1);
    cam.validate()?;
    Ok(cam)
}
