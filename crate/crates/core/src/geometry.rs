//! Pinhole camera model and depth-scan rasters.
//!
//! Positions and depths are in millimeters. Depth is the camera-frame z
//! coordinate, not the distance along the ray. Invalid raster entries are
//! encoded as NaN.

use crate::{Error, Result, Vec3};

/// Pinhole intrinsics for a `width` x `height` raster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    /// Focal length in pixels, x.
    pub fx: f64,
    /// Focal length in pixels, y.
    pub fy: f64,
    /// Principal point, x.
    pub cx: f64,
    /// Principal point, y.
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Config(format!("focal lengths must be positive (fx={fx}, fy={fy})")));
        }
        if !(0.0 <= cx && cx < width as f64 && 0.0 <= cy && cy < height as f64) {
            return Err(Error::Config(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} raster"
            )));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Nearest-integer pixel for continuous raster coordinates, or `None`
    /// when it falls outside the raster.
    pub fn nearest_pixel(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let x = u.round();
        let y = v.round();
        if x >= 0.0 && y >= 0.0 && (x as usize) < self.width && (y as usize) < self.height {
            Some((x as usize, y as usize))
        } else {
            None
        }
    }
}

/// Continuous image coordinates produced by [`project`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

/// Project a camera-frame point to continuous raster coordinates.
///
/// Fails for points at or behind the camera plane. Whether the result lies
/// inside the raster is decided by [`CameraIntrinsics::nearest_pixel`].
pub fn project(point: &Vec3, intrinsics: &CameraIntrinsics) -> Result<PixelCoord> {
    if point.z <= 0.0 {
        return Err(Error::BehindCamera { z: point.z });
    }
    Ok(PixelCoord {
        u: intrinsics.fx * point.x / point.z + intrinsics.cx,
        v: intrinsics.fy * point.y / point.z + intrinsics.cy,
    })
}

/// Lift raster coordinates plus a depth back into the camera frame.
pub fn back_project(u: f64, v: f64, depth: f64, intrinsics: &CameraIntrinsics) -> Result<Vec3> {
    if !depth.is_finite() || depth <= 0.0 {
        return Err(Error::InvalidDepth { depth });
    }
    Ok(Vec3::new(
        (u - intrinsics.cx) * depth / intrinsics.fx,
        (v - intrinsics.cy) * depth / intrinsics.fy,
        depth,
    ))
}

/// Row-major raster of `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Config(format!(
                "raster data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }
}

impl<T> Grid<T> {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }
}

pub fn depth_is_valid(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

pub fn normal_is_valid(n: &Vec3) -> bool {
    n.x.is_finite() && n.y.is_finite() && n.z.is_finite()
}

/// Marker for invalid normals.
pub fn invalid_normal() -> Vec3 {
    Vec3::new(f64::NAN, f64::NAN, f64::NAN)
}

/// One depth+color observation with derived normals.
#[derive(Debug, Clone)]
pub struct DepthScan {
    /// Depth in mm; NaN marks invalid pixels.
    pub depth: Grid<f64>,
    /// RGB color.
    pub color: Grid<[u8; 3]>,
    /// Unit normals in the camera frame, oriented toward the camera; NaN
    /// components mark invalid pixels.
    pub normals: Grid<Vec3>,
    pub intrinsics: CameraIntrinsics,
    pub frame_index: usize,
}

impl DepthScan {
    /// Bundle rasters, deriving the normal map from depth.
    pub fn from_depth_color(
        depth: Grid<f64>,
        color: Grid<[u8; 3]>,
        intrinsics: CameraIntrinsics,
        frame_index: usize,
    ) -> Result<Self> {
        let normals = normals_from_depth(&depth, &intrinsics);
        Self::new(depth, color, normals, intrinsics, frame_index)
    }

    pub fn new(
        depth: Grid<f64>,
        color: Grid<[u8; 3]>,
        normals: Grid<Vec3>,
        intrinsics: CameraIntrinsics,
        frame_index: usize,
    ) -> Result<Self> {
        let dims = (depth.width, depth.height);
        if dims != (color.width, color.height)
            || dims != (normals.width, normals.height)
            || dims != (intrinsics.width, intrinsics.height)
        {
            return Err(Error::Config("depth/color/normal rasters must share dimensions".into()));
        }
        for &d in &depth.data {
            if !d.is_nan() && d <= 0.0 {
                return Err(Error::InvalidDepth { depth: d });
            }
        }
        Ok(Self { depth, color, normals, intrinsics, frame_index })
    }

    pub fn width(&self) -> usize {
        self.depth.width
    }

    pub fn height(&self) -> usize {
        self.depth.height
    }

    /// A pixel usable by registration and fusion: valid depth and a valid
    /// derived normal.
    pub fn pixel_is_valid(&self, x: usize, y: usize) -> bool {
        depth_is_valid(*self.depth.get(x, y)) && normal_is_valid(self.normals.get(x, y))
    }

    /// Lift a pixel's stored depth into the camera frame.
    pub fn lift_pixel(&self, x: usize, y: usize) -> Result<Vec3> {
        back_project(x as f64, y as f64, *self.depth.get(x, y), &self.intrinsics)
    }
}

/// Per-pixel normals from central differences of back-projected neighbors.
///
/// The cross product of the two tangents is normalized and oriented toward
/// the camera (`n . view < 0`). Pixels with any invalid 4-neighbor are
/// marked invalid.
pub fn normals_from_depth(depth: &Grid<f64>, intrinsics: &CameraIntrinsics) -> Grid<Vec3> {
    let (w, h) = (depth.width, depth.height);
    let mut normals = Grid::filled(w, h, invalid_normal());
    let lift = |x: usize, y: usize| -> Option<Vec3> {
        let d = *depth.get(x, y);
        if depth_is_valid(d) {
            back_project(x as f64, y as f64, d, intrinsics).ok()
        } else {
            None
        }
    };
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let center = *depth.get(x, y);
            if !depth_is_valid(center) {
                continue;
            }
            let (Some(px), Some(mx), Some(py), Some(my)) =
                (lift(x + 1, y), lift(x - 1, y), lift(x, y + 1), lift(x, y - 1))
            else {
                continue;
            };
            let tangent_u = px - mx;
            let tangent_v = py - my;
            let mut n = tangent_u.cross(&tangent_v);
            let len = n.norm();
            if len < 1e-12 {
                continue;
            }
            n /= len;
            // view direction = back-projected center point
            let view = back_project(x as f64, y as f64, center, intrinsics).unwrap();
            if n.dot(&view) > 0.0 {
                n = -n;
            }
            *normals.get_mut(x, y) = n;
        }
    }
    normals
}
