//! Deterministic software rasterizer: cameras, shaded grayscale renders,
//! pixel maps linking pixels and vertices, mask rasterization and gradients
//! of rendered pixels with respect to vertex positions.

mod raster;
mod resample;

use std::f64::consts::PI;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mesh::Mesh;

pub use raster::{VISIBILITY_SLACK, rasterize, rasterize_vertex_mask, render_gradient, PixelHit, PixelMap, Rendered};
pub use resample::{downsample, downsample_adjoint};

/// Pinhole camera looking from `position` at `target`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Point3<f64>,
    pub target: Point3<f64>,
    pub up: Vector3<f64>,
    /// Vertical field of view in radians.
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

/// Orthonormal camera frame; `forward` points into the scene.
#[derive(Debug, Clone, Copy)]
pub struct CameraFrame {
    pub right: Vector3<f64>,
    pub up: Vector3<f64>,
    pub forward: Vector3<f64>,
}

impl Camera {
    pub fn new(
        position: Point3<f64>,
        target: Point3<f64>,
        up: Vector3<f64>,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Camera {
            position,
            target,
            up,
            fov_y,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_y > 0.0 && self.fov_y < PI) {
            return Err(Error::InvalidArgument(format!("field of view {} not in (0, pi)", self.fov_y)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("camera resolution must be positive".into()));
        }
        let f = self.target - self.position;
        if !(f.norm() > 0.0) {
            return Err(Error::InvalidArgument("camera view direction is zero".into()));
        }
        if !(f.normalize().cross(&self.up).norm() > 1e-9) {
            return Err(Error::InvalidArgument("camera up vector is parallel to the view direction".into()));
        }
        Ok(())
    }

    pub fn with_resolution(&self, width: usize, height: usize) -> Camera {
        Camera { width, height, ..*self }
    }

    pub fn frame(&self) -> CameraFrame {
        let forward = (self.target - self.position).normalize();
        let right = forward.cross(&self.up).normalize();
        let up = right.cross(&forward);
        CameraFrame { right, up, forward }
    }

    /// Focal length in pixels for the vertical field of view.
    pub fn focal(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.fov_y).tan()
    }

    /// Continuous pixel coordinates and view depth of a world point, or
    /// `None` when it lies behind the near plane.
    pub fn project(&self, p: &Point3<f64>) -> Option<(f64, f64, f64)> {
        let fr = self.frame();
        let d = p - self.position;
        let z = d.dot(&fr.forward);
        if z <= NEAR {
            return None;
        }
        let f = self.focal();
        Some((
            0.5 * self.width as f64 + f * d.dot(&fr.right) / z,
            0.5 * self.height as f64 - f * d.dot(&fr.up) / z,
            z,
        ))
    }
}

/// Points closer than this along the view axis are not rasterized.
pub const NEAR: f64 = 1e-3;

/// Distribution that [`sample_cameras`] draws viewpoints from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRig {
    pub radius: f64,
    /// Elevation band in degrees.
    pub elevation_deg: [f64; 2],
    /// Vertical field of view in degrees.
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraRig {
    fn default() -> Self {
        CameraRig {
            radius: 4.0,
            elevation_deg: [-30.0, 45.0],
            fov_deg: 45.0,
            width: 32,
            height: 32,
        }
    }
}

impl CameraRig {
    /// Camera at the given azimuth and elevation (radians) around `center`.
    pub fn camera_at(&self, center: Point3<f64>, azimuth: f64, elevation: f64) -> Result<Camera> {
        let dir = Vector3::new(
            elevation.cos() * azimuth.cos(),
            elevation.sin(),
            elevation.cos() * azimuth.sin(),
        );
        Camera::new(
            center + self.radius * dir,
            center,
            Vector3::y(),
            self.fov_deg.to_radians(),
            self.width,
            self.height,
        )
    }
}

/// Seeded viewpoints around `center`: azimuths stratified over `[0, 2π)`
/// (one jittered sample per stratum), elevations uniform in the band.
pub fn sample_cameras(count: usize, seed: u64, rig: &CameraRig, center: Point3<f64>) -> Result<Vec<Camera>> {
    if count == 0 {
        return Err(Error::InvalidArgument("camera count must be at least 1".into()));
    }
    let [lo, hi] = rig.elevation_deg;
    if !(lo <= hi && lo > -90.0 && hi < 90.0) {
        return Err(Error::InvalidArgument(format!("elevation band [{lo}, {hi}] must lie inside (-90, 90)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spacing = 2.0 * PI / count as f64;
    (0..count)
        .map(|k| {
            let az = spacing * (k as f64 + rng.random::<f64>());
            let el = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            rig.camera_at(center, az, el.to_radians())
        })
        .collect()
}

/// How views are turned into images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSettings {
    /// Rasterization resolution (square).
    pub raster: usize,
    pub supersample: usize,
    /// Final resolution after bilinear downsampling (square).
    pub output: usize,
    /// Blend colors across silhouette edges so that coverage moves
    /// smoothly with the geometry and receives gradients.
    pub silhouette_aa: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            raster: 64,
            supersample: 2,
            output: 32,
            silhouette_aa: true,
        }
    }
}

/// Output of a multi-view render.
#[derive(Debug, Clone)]
pub struct RenderBatch {
    pub images: Vec<Image>,
    pub pixel_maps: Vec<PixelMap>,
    pub cameras: Vec<Camera>,
}

/// A forward render kept for its backward pass.
#[derive(Debug, Clone)]
pub struct ViewRender {
    pub rendered: Rendered,
    /// Image at `settings.output` resolution.
    pub image: Image,
}

impl ViewRender {
    pub fn new(mesh: &Mesh, vertices: &[Point3<f64>], camera: &Camera, settings: &RenderSettings) -> Result<Self> {
        let cam = camera.with_resolution(settings.raster, settings.raster);
        let rendered = Rendered::new(mesh, vertices, &cam, settings.supersample, settings.silhouette_aa)?;
        let image = downsample(&rendered.image, settings.output, settings.output)?;
        Ok(ViewRender { rendered, image })
    }

    /// Vertex gradients of `Σ upstream · image`.
    pub fn backward(&self, upstream: &Image) -> Result<Vec<Vector3<f64>>> {
        let (w, h) = self.rendered.image.shape();
        let g = downsample_adjoint(upstream, w, h)?;
        self.rendered.backward(&g)
    }
}

/// Renders every camera in parallel; results keep camera order.
pub fn render_views(
    mesh: &Mesh,
    vertices: &[Point3<f64>],
    cameras: &[Camera],
    settings: &RenderSettings,
) -> Result<Vec<ViewRender>> {
    cameras
        .par_iter()
        .map(|c| ViewRender::new(mesh, vertices, c, settings))
        .collect()
}

pub fn render_batch(
    mesh: &Mesh,
    vertices: &[Point3<f64>],
    cameras: &[Camera],
    settings: &RenderSettings,
) -> Result<RenderBatch> {
    let views = render_views(mesh, vertices, cameras, settings)?;
    let mut images = Vec::with_capacity(views.len());
    let mut pixel_maps = Vec::with_capacity(views.len());
    for v in views {
        images.push(v.image);
        pixel_maps.push(v.rendered.pixel_map);
    }
    Ok(RenderBatch {
        images,
        pixel_maps,
        cameras: cameras.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cameras_are_deterministic_and_stratified() {
        let rig = CameraRig::default();
        let a = sample_cameras(1, 7, &rig, Point3::origin()).unwrap();
        let b = sample_cameras(1, 7, &rig, Point3::origin()).unwrap();
        assert_eq!(a, b);

        let cams = sample_cameras(16, 3, &rig, Point3::origin()).unwrap();
        let mut az: Vec<f64> = cams
            .iter()
            .map(|c| c.position.z.atan2(c.position.x).rem_euclid(2.0 * PI))
            .collect();
        az.sort_by(f64::total_cmp);
        let spacing = 2.0 * PI / 16.0;
        for k in 0..16 {
            let gap = if k + 1 < 16 { az[k + 1] - az[k] } else { az[0] + 2.0 * PI - az[15] };
            assert!(gap <= 2.0 * spacing, "gap {gap}");
        }
        for c in &cams {
            let el = (c.position.y / rig.radius).asin().to_degrees();
            assert!((-30.0 - 1e-9..=45.0 + 1e-9).contains(&el));
            assert!(((c.position - Point3::origin()).norm() - rig.radius).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_band_keeps_height_zero() {
        let rig = CameraRig {
            elevation_deg: [0.0, 0.0],
            ..Default::default()
        };
        let center = Point3::new(0.5, -1.0, 2.0);
        for c in sample_cameras(4, 11, &rig, center).unwrap() {
            assert!((c.position.y - center.y).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_cameras_are_rejected() {
        let p = Point3::new(0.0, 0.0, 3.0);
        assert!(Camera::new(p, p, Vector3::y(), 1.0, 8, 8).is_err());
        assert!(Camera::new(p, Point3::origin(), Vector3::y(), PI, 8, 8).is_err());
        assert!(Camera::new(p, Point3::origin(), Vector3::z(), 1.0, 8, 8).is_err());
        assert!(sample_cameras(0, 1, &CameraRig::default(), Point3::origin()).is_err());
    }

    #[test]
    fn projection_centers_the_target() {
        let cam = Camera::new(Point3::new(0.0, 0.0, 4.0), Point3::origin(), Vector3::y(), 1.0, 32, 16).unwrap();
        let (x, y, z) = cam.project(&Point3::origin()).unwrap();
        assert_eq!((x, y), (16.0, 8.0));
        assert!((z - 4.0).abs() < 1e-15);
        // +x world is to the right, +y world is up (smaller row index)
        let (x1, y1, _) = cam.project(&Point3::new(0.1, 0.1, 0.0)).unwrap();
        assert!(x1 > 16.0 && y1 < 8.0);
        assert!(cam.project(&Point3::new(0.0, 0.0, 5.0)).is_none());
    }
}
