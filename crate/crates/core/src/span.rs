use crate::error::{Error, Result};

/// A time interval normalized to the unit timeline.
///
/// Invariant: `0 <= start <= end <= 1`, enforced at construction. Zero-length
/// spans are legal; they arise as degenerate predictions and the geometry
/// below assigns them exact conventional values instead of NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSpan {
    s: f64,
    e: f64,
}

impl TimeSpan {
    pub fn new(s: f64, e: f64) -> Result<Self> {
        if !s.is_finite() || !e.is_finite() || s < 0.0 || e > 1.0 || s > e {
            return Err(Error::InvalidSpan { s, e });
        }
        Ok(Self { s, e })
    }

    pub fn start(&self) -> f64 {
        self.s
    }

    pub fn end(&self) -> f64 {
        self.e
    }

    pub fn length(&self) -> f64 {
        self.e - self.s
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.s + self.e)
    }

    /// Length of the overlap between two spans; 0 when disjoint.
    pub fn intersection_len(&self, other: &TimeSpan) -> f64 {
        (self.e.min(other.e) - self.s.max(other.s)).max(0.0)
    }

    /// Total length covered by either span.
    pub fn union_len(&self, other: &TimeSpan) -> f64 {
        self.length() + other.length() - self.intersection_len(other)
    }

    /// Smallest span containing both.
    pub fn hull(&self, other: &TimeSpan) -> TimeSpan {
        TimeSpan {
            s: self.s.min(other.s),
            e: self.e.max(other.e),
        }
    }

    /// Intersection over union; 0 when the union has zero length.
    pub fn iou(&self, other: &TimeSpan) -> f64 {
        let u = self.union_len(other);
        if u == 0.0 {
            0.0
        } else {
            self.intersection_len(other) / u
        }
    }

    /// Generalized IoU for intervals: `iou - |hull \ union| / |hull|`.
    ///
    /// Ranges over `[-1, 1]`; equals plain IoU for overlapping spans and goes
    /// negative for distant disjoint ones. 0 when the hull has zero length
    /// (both spans degenerate at the same point).
    pub fn giou(&self, other: &TimeSpan) -> f64 {
        let h = self.hull(other).length();
        if h == 0.0 {
            return 0.0;
        }
        let u = self.union_len(other);
        // The union formula can round a hair above the hull for overlapping
        // spans; a phantom negative gap would push giou past iou.
        let gap = (h - u).max(0.0);
        self.iou(other) - gap / h
    }

    /// L1 distance between endpoints: `|ds| + |de|`.
    pub fn l1(&self, other: &TimeSpan) -> f64 {
        (self.s - other.s).abs() + (self.e - other.e).abs()
    }
}
