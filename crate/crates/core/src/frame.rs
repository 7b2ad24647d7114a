//! Registered RGB-D images.

use nalgebra::{Vector2, Vector3};

use crate::geometry::CameraIntrinsics;

/// Depth (meters, z along the optical axis), color in `[0, 1]` and a
/// validity mask, all row-major `H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdFrame {
    pub depth: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
    pub intrinsics: CameraIntrinsics,
    pub timestamp: f64,
}

impl RgbdFrame {
    /// A frame with every pixel invalid.
    pub fn empty(intrinsics: CameraIntrinsics, timestamp: f64) -> Self {
        let n = intrinsics.pixel_count();
        Self {
            depth: vec![0.0; n],
            color: vec![[0.0; 3]; n],
            valid: vec![false; n],
            intrinsics,
            timestamp,
        }
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.intrinsics.width + u
    }

    #[inline]
    pub fn pixel(&self, index: usize) -> (usize, usize) {
        (index % self.intrinsics.width, index / self.intrinsics.width)
    }

    /// Stores a depth/color sample, marking it valid only if the depth lies in `(0, max_depth]`.
    pub fn set(&mut self, index: usize, depth: f64, color: [f64; 3]) {
        let ok = depth > 0.0 && depth <= self.intrinsics.max_depth && depth.is_finite();
        self.depth[index] = if ok { depth } else { 0.0 };
        self.color[index] = color;
        self.valid[index] = ok;
    }

    pub fn invalidate(&mut self, index: usize) {
        self.valid[index] = false;
        self.depth[index] = 0.0;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Camera-frame point behind pixel `index`, if valid.
    pub fn point(&self, index: usize) -> Option<Vector3<f64>> {
        if !self.valid[index] {
            return None;
        }
        let (u, v) = self.pixel(index);
        self.intrinsics
            .unproject(&Vector2::new(u as f64, v as f64), self.depth[index])
            .ok()
    }

    /// Invalidates pixels whose 4-neighborhood depth range exceeds `max_jump`,
    /// as well as pixels with an invalid neighbor. Returns how many were removed.
    pub fn mask_depth_discontinuities(&mut self, max_jump: f64) -> usize {
        let (w, h) = (self.width(), self.height());
        let mut remove = Vec::new();
        for v in 0..h {
            for u in 0..w {
                let i = self.index(u, v);
                if !self.valid[i] {
                    continue;
                }
                let (mut lo, mut hi) = (self.depth[i], self.depth[i]);
                let mut neighbors = Vec::with_capacity(4);
                if u > 0 {
                    neighbors.push(i - 1);
                }
                if u + 1 < w {
                    neighbors.push(i + 1);
                }
                if v > 0 {
                    neighbors.push(i - w);
                }
                if v + 1 < h {
                    neighbors.push(i + w);
                }
                let mut broken = false;
                for n in neighbors {
                    if !self.valid[n] {
                        broken = true;
                        break;
                    }
                    lo = lo.min(self.depth[n]);
                    hi = hi.max(self.depth[n]);
                }
                if broken || hi - lo > max_jump {
                    remove.push(i);
                }
            }
        }
        for &i in &remove {
            self.invalidate(i);
        }
        remove.len()
    }

    /// Bilinear color lookup at continuous pixel coordinates, together with
    /// the color gradient with respect to `(u, v)`. Requires the four
    /// surrounding pixels to be valid.
    pub fn color_bilinear(&self, u: f64, v: f64) -> Option<([f64; 3], [[f64; 3]; 2])> {
        let (w, h) = (self.width(), self.height());
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        let u0 = u.floor() as usize;
        let v0 = v.floor() as usize;
        if u0 + 1 >= w || v0 + 1 >= h {
            return None;
        }
        let (fu, fv) = (u - u0 as f64, v - v0 as f64);
        let i00 = self.index(u0, v0);
        let idx = [i00, i00 + 1, i00 + w, i00 + w + 1];
        if idx.iter().any(|&i| !self.valid[i]) {
            return None;
        }
        let c = idx.map(|i| self.color[i]);
        let mut out = [0.0; 3];
        let mut grad = [[0.0; 3]; 2];
        for k in 0..3 {
            let top = c[0][k] + fu * (c[1][k] - c[0][k]);
            let bottom = c[2][k] + fu * (c[3][k] - c[2][k]);
            out[k] = top + fv * (bottom - top);
            grad[0][k] = (1.0 - fv) * (c[1][k] - c[0][k]) + fv * (c[3][k] - c[2][k]);
            grad[1][k] = bottom - top;
        }
        Some((out, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(10.0, 10.0, 2.0, 2.0, 4, 4, 5.0).unwrap()
    }

    #[test]
    fn set_respects_depth_range() {
        let mut f = RgbdFrame::empty(cam(), 0.0);
        f.set(0, 1.0, [0.5; 3]);
        f.set(1, 0.0, [0.5; 3]);
        f.set(2, 6.0, [0.5; 3]);
        f.set(3, f64::NAN, [0.5; 3]);
        assert_eq!(f.valid[..4], [true, false, false, false]);
        assert_eq!(f.valid_count(), 1);
    }

    #[test]
    fn discontinuity_mask_removes_edges() {
        let mut f = RgbdFrame::empty(cam(), 0.0);
        for i in 0..16 {
            let (u, _) = f.pixel(i);
            f.set(i, if u < 2 { 1.0 } else { 3.0 }, [0.0; 3]);
        }
        let removed = f.mask_depth_discontinuities(0.5);
        // columns 1 and 2 straddle the jump
        assert_eq!(removed, 8);
        assert!(f.valid[f.index(0, 1)]);
        assert!(!f.valid[f.index(1, 1)]);
    }

    #[test]
    fn bilinear_color_is_exact_on_linear_ramp() {
        let mut f = RgbdFrame::empty(cam(), 0.0);
        for i in 0..16 {
            let (u, v) = f.pixel(i);
            f.set(i, 1.0, [0.1 * u as f64, 0.2 * v as f64, 0.3]);
        }
        let (c, g) = f.color_bilinear(1.25, 2.5).unwrap();
        assert!((c[0] - 0.125).abs() < 1e-12);
        assert!((c[1] - 0.5).abs() < 1e-12);
        assert!((g[0][0] - 0.1).abs() < 1e-12);
        assert!((g[1][1] - 0.2).abs() < 1e-12);
        assert!(f.color_bilinear(3.2, 0.0).is_none());
    }
}
