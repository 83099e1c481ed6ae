//! Pinhole projection and the depth reasoning chain that turns regressed
//! image-space quantities back into a metric 3D box center.
//!
//! Depth is regressed in the frame of a fixed reference ("virtual") camera so
//! that the network never has to know the real focal length. The conversion
//! uses the image width as the scale reference:
//!
//! ```text
//! Z_v = (fx_v / fx) * (width / width_v) * Z
//! ```
//!
//! In outdoor scenes a second estimate `Z2 = H / h2d * fy` comes from the
//! ratio of 3D height to projected 2D height, and the two are averaged.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::RawHeadOutput;

/// Heights at or below this many pixels are rejected by [`height_depth`].
pub const MIN_HEIGHT_2D_PX: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-positive depth {0} (point on or behind the camera plane)")]
    NonPositiveDepth(f64),
    #[error("degenerate height: H = {height_3d} m, h2d = {height_2d} px")]
    DegenerateHeight { height_3d: f64, height_2d: f64 },
    #[error("fused depth mode requires the 2D box height")]
    MissingHeight2D,
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid virtual camera: {0}")]
    InvalidVirtualCamera(String),
}

/// Pinhole intrinsics of a real camera, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: f64,
        height: f64,
    ) -> Result<Self, GeometryError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Checks focal lengths and image size are positive and the principal
    /// point lies inside the image.
    pub fn validate(&self) -> Result<(), GeometryError> {
        let all = [self.fx, self.fy, self.cx, self.cy, self.width, self.height];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(
                "all values must be finite".into(),
            ));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(
                "focal lengths must be positive".into(),
            ));
        }
        if self.width <= 0.0 || self.height <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(
                "image size must be positive".into(),
            ));
        }
        if !(0.0..=self.width).contains(&self.cx) || !(0.0..=self.height).contains(&self.cy) {
            return Err(GeometryError::InvalidIntrinsics(
                "principal point outside the image".into(),
            ));
        }
        Ok(())
    }

    /// The 3x3 intrinsic matrix K, row-major.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ]
    }
}

/// Reference camera that depth targets are normalized to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirtualCamera {
    pub fx_v: f64,
    pub width_v: f64,
}

impl VirtualCamera {
    pub fn new(fx_v: f64, width_v: f64) -> Result<Self, GeometryError> {
        let vc = Self { fx_v, width_v };
        vc.validate()?;
        Ok(vc)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx_v.is_finite() && self.fx_v > 0.0) {
            return Err(GeometryError::InvalidVirtualCamera(
                "fx_v must be positive".into(),
            ));
        }
        if !(self.width_v.is_finite() && self.width_v > 0.0) {
            return Err(GeometryError::InvalidVirtualCamera(
                "width_v must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for VirtualCamera {
    fn default() -> Self {
        Self {
            fx_v: 500.0,
            width_v: 1000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub u: f64,
    pub v: f64,
}

impl Point2D {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Camera-frame point in meters (x right, y down, z along the optical axis).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3D {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_vector(self) -> nalgebra::Vector3<f64> {
        nalgebra::Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &nalgebra::Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

/// How the final object depth is formed from the regressed quantities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    /// Depth from the virtual-depth branch only.
    VirtualOnly,
    /// Mean of the virtual-depth branch and the 2D/3D height branch.
    FusedAverage,
}

fn positive_depth(z: f64) -> Result<f64, GeometryError> {
    if z > 0.0 {
        Ok(z)
    } else {
        Err(GeometryError::NonPositiveDepth(z))
    }
}

pub fn project(p: Point3D, cam: &CameraIntrinsics) -> Result<Point2D, GeometryError> {
    let z = positive_depth(p.z)?;
    Ok(Point2D {
        u: cam.fx * p.x / z + cam.cx,
        v: cam.fy * p.y / z + cam.cy,
    })
}

pub fn real_to_virtual_depth(
    z: f64,
    cam: &CameraIntrinsics,
    vc: &VirtualCamera,
) -> Result<f64, GeometryError> {
    let z = positive_depth(z)?;
    Ok((vc.fx_v / cam.fx) * (cam.width / vc.width_v) * z)
}

pub fn virtual_to_real_depth(
    d_v: f64,
    cam: &CameraIntrinsics,
    vc: &VirtualCamera,
) -> Result<f64, GeometryError> {
    let d_v = positive_depth(d_v)?;
    Ok(d_v * (cam.fx / vc.fx_v) * (vc.width_v / cam.width))
}

/// Depth implied by a metric height `H` that spans `h2d` pixels vertically.
pub fn height_depth(height_3d: f64, height_2d: f64, cam: &CameraIntrinsics) -> Result<f64, GeometryError> {
    if !(height_3d > 0.0) || !(height_2d > MIN_HEIGHT_2D_PX) {
        return Err(GeometryError::DegenerateHeight {
            height_3d,
            height_2d,
        });
    }
    Ok(height_3d / height_2d * cam.fy)
}

/// Combines the two depth estimates. `z2` is ignored in [`DepthMode::VirtualOnly`].
pub fn fuse_depth(z1: f64, z2: Option<f64>, mode: DepthMode) -> Result<f64, GeometryError> {
    let z1 = positive_depth(z1)?;
    match mode {
        DepthMode::VirtualOnly => Ok(z1),
        DepthMode::FusedAverage => {
            let z2 = positive_depth(z2.ok_or(GeometryError::MissingHeight2D)?)?;
            Ok((z1 + z2) / 2.0)
        }
    }
}

pub fn backproject_center(p: Point2D, z: f64, cam: &CameraIntrinsics) -> Result<Point3D, GeometryError> {
    let z = positive_depth(z)?;
    Ok(Point3D {
        x: z / cam.fx * (p.u - cam.cx),
        y: z / cam.fy * (p.v - cam.cy),
        z,
    })
}

/// Full reasoning chain from head outputs to the metric box center.
///
/// `height_2d` is the projected object height in pixels and is required in
/// [`DepthMode::FusedAverage`].
pub fn reason_center(
    raw: &RawHeadOutput,
    cam: &CameraIntrinsics,
    vc: &VirtualCamera,
    mode: DepthMode,
    height_2d: Option<f64>,
) -> Result<Point3D, GeometryError> {
    let pixel = Point2D::new(raw.u_norm * cam.width, raw.v_norm * cam.height);
    let z1 = virtual_to_real_depth(raw.d_v, cam, vc)?;
    let z2 = match mode {
        DepthMode::VirtualOnly => None,
        DepthMode::FusedAverage => {
            let h2d = height_2d.ok_or(GeometryError::MissingHeight2D)?;
            Some(height_depth(raw.dims[2], h2d, cam)?)
        }
    };
    let z = fuse_depth(z1, z2, mode)?;
    backproject_center(pixel, z, cam)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hd_cam() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 960.0, 540.0, 1920.0, 1080.0).unwrap()
    }

    fn cam_fx_width(fx: f64, width: f64) -> CameraIntrinsics {
        CameraIntrinsics::new(fx, fx, width / 2.0, 500.0, width, 1000.0).unwrap()
    }

    /// Independent route to virtual depth: image the point in the real
    /// camera, move to the same relative pixel in the virtual camera, and
    /// solve that camera's projection equation for the depth which keeps X.
    fn virtual_depth_by_reprojection(z: f64, cam: &CameraIntrinsics, vc: &VirtualCamera) -> f64 {
        let x = 0.37 * z;
        let u = cam.fx * x / z + cam.cx;
        let u_v = u / cam.width * vc.width_v;
        let cx_v = cam.cx / cam.width * vc.width_v;
        vc.fx_v * x / (u_v - cx_v)
    }

    #[test]
    fn project_principal_point() {
        let p = project(Point3D::new(0.0, 0.0, 5.0), &hd_cam()).unwrap();
        assert_eq!(p, Point2D::new(960.0, 540.0));
    }

    #[test]
    fn project_offset_point() {
        let p = project(Point3D::new(1.0, 0.0, 5.0), &hd_cam()).unwrap();
        assert_eq!(p, Point2D::new(1160.0, 540.0));
    }

    #[test]
    fn project_behind_camera() {
        assert_eq!(
            project(Point3D::new(0.0, 0.0, -1.0), &hd_cam()),
            Err(GeometryError::NonPositiveDepth(-1.0))
        );
        assert!(project(Point3D::new(0.0, 0.0, 0.0), &hd_cam()).is_err());
    }

    #[test]
    fn virtual_depth_examples() {
        let vc = VirtualCamera::new(500.0, 1000.0).unwrap();
        let cam = cam_fx_width(1000.0, 2000.0);
        let oracle = virtual_depth_by_reprojection(10.0, &cam, &vc);
        assert!((oracle - 10.0).abs() < 1e-12);
        assert!((real_to_virtual_depth(10.0, &cam, &vc).unwrap() - oracle).abs() < 1e-12);

        let cam = cam_fx_width(2000.0, 2000.0);
        let oracle = virtual_depth_by_reprojection(10.0, &cam, &vc);
        assert!((oracle - 5.0).abs() < 1e-12);
        assert!((real_to_virtual_depth(10.0, &cam, &vc).unwrap() - 5.0).abs() < 1e-12);
        assert!((virtual_to_real_depth(5.0, &cam, &vc).unwrap() - 10.0).abs() < 1e-12);

        let same = cam_fx_width(500.0, 1000.0);
        assert_eq!(real_to_virtual_depth(7.0, &same, &vc).unwrap(), 7.0);
        assert_eq!(virtual_to_real_depth(7.0, &same, &vc).unwrap(), 7.0);
    }

    #[test]
    fn virtual_depth_rejects_bad_depth() {
        let vc = VirtualCamera::default();
        assert!(real_to_virtual_depth(0.0, &hd_cam(), &vc).is_err());
        assert!(virtual_to_real_depth(-2.0, &hd_cam(), &vc).is_err());
    }

    #[test]
    fn height_depth_examples() {
        let cam = hd_cam();
        assert!((height_depth(1.5, 100.0, &cam).unwrap() - 15.0).abs() < 1e-12);
        assert_eq!(height_depth(1.0, cam.fy, &cam).unwrap(), 1.0);
        assert!(matches!(
            height_depth(1.0, 0.0, &cam),
            Err(GeometryError::DegenerateHeight { .. })
        ));
        assert!(height_depth(1.0, 1e-7, &cam).is_err());
        assert!(height_depth(0.0, 10.0, &cam).is_err());
    }

    #[test]
    fn fuse_depth_examples() {
        assert_eq!(fuse_depth(4.0, Some(6.0), DepthMode::FusedAverage).unwrap(), 5.0);
        assert_eq!(fuse_depth(4.0, None, DepthMode::VirtualOnly).unwrap(), 4.0);
        assert_eq!(fuse_depth(4.0, Some(-1.0), DepthMode::VirtualOnly).unwrap(), 4.0);
        assert_eq!(fuse_depth(3.3, Some(3.3), DepthMode::FusedAverage).unwrap(), 3.3);
        assert_eq!(
            fuse_depth(4.0, None, DepthMode::FusedAverage),
            Err(GeometryError::MissingHeight2D)
        );
        assert!(fuse_depth(0.0, Some(1.0), DepthMode::FusedAverage).is_err());
    }

    #[test]
    fn backproject_examples() {
        let cam = hd_cam();
        let p = backproject_center(Point2D::new(cam.cx, cam.cy), 5.0, &cam).unwrap();
        assert_eq!(p, Point3D::new(0.0, 0.0, 5.0));
        let p = backproject_center(Point2D::new(1160.0, 540.0), 5.0, &cam).unwrap();
        assert!((p.x - 1.0).abs() < 1e-12 && p.y.abs() < 1e-12 && p.z == 5.0);
        assert!(backproject_center(Point2D::new(0.0, 0.0), 0.0, &cam).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 2.0, 2.0).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 3.0, 1.0, 2.0, 2.0).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 1.0, 1.0, 2.0, f64::NAN).is_err());
        assert!(VirtualCamera::new(0.0, 1.0).is_err());
    }

    #[test]
    fn intrinsics_json_shape() {
        let json = serde_json::to_value(hd_cam()).unwrap();
        let obj = json.as_object().unwrap();
        for key in ["fx", "fy", "cx", "cy", "width", "height"] {
            assert!(obj[key].is_number(), "{key}");
        }
        assert_eq!(obj.len(), 6);
    }
}
