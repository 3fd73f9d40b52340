//! Axis-aligned boxes as top-left corner plus extent.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct BoxXYWH<T = f64> {
    pub x: T,
    pub y: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> BoxXYWH<T> {
    pub fn new(x: T, y: T, w: T, h: T) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: T, cy: T, w: T, h: T) -> Self {
        let half = T::of(0.5);
        Self::new(cx - half * w, cy - half * h, w, h)
    }

    pub fn center(&self) -> (T, T) {
        let half = T::of(0.5);
        (self.x + half * self.w, self.y + half * self.h)
    }

    pub fn area(&self) -> T {
        self.w.max(T::zero()) * self.h.max(T::zero())
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        Self::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    pub fn scale(&self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.w * s, self.h * s)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Intersection with `[0, width] × [0, height]`, keeping at least
    /// `min_extent` on each side.
    pub fn clamp_to(&self, width: T, height: T, min_extent: T) -> Self {
        let x1 = self.x.max(T::zero()).min(width - min_extent);
        let y1 = self.y.max(T::zero()).min(height - min_extent);
        let x2 = (self.x + self.w).min(width).max(x1 + min_extent);
        let y2 = (self.y + self.h).min(height).max(y1 + min_extent);
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn cast<U: Scalar>(&self) -> BoxXYWH<U> {
        BoxXYWH::new(
            U::of(self.x.to_f64_lossy()),
            U::of(self.y.to_f64_lossy()),
            U::of(self.w.to_f64_lossy()),
            U::of(self.h.to_f64_lossy()),
        )
    }
}

/// Intersection over union; an empty union gives 0.
pub fn iou<T: Scalar>(a: &BoxXYWH<T>, b: &BoxXYWH<T>) -> T {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(T::zero());
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(T::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > T::zero() {
        inter / union
    } else {
        T::zero()
    }
}

/// Euclidean distance between box centres.
pub fn center_distance<T: Scalar>(a: &BoxXYWH<T>, b: &BoxXYWH<T>) -> T {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    ((ax - bx) * (ax - bx) + (ay - by) * (ay - by)).sqrt()
}
