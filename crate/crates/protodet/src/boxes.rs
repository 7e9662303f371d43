//! Axis-aligned box geometry: IoU and generalized IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalized center-size box; the on-disk and in-model representation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxCxcywh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BoxCxcywh {
    fn from(v: [f64; 4]) -> Self {
        Self { cx: v[0], cy: v[1], w: v[2], h: v[3] }
    }
}

impl From<BoxCxcywh> for [f64; 4] {
    fn from(b: BoxCxcywh) -> Self {
        [b.cx, b.cy, b.w, b.h]
    }
}

impl BoxCxcywh {
    pub fn to_xyxy(self) -> BoxXyxy {
        BoxXyxy {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }

    /// Positive extents, fully inside the unit square.
    pub fn validate(&self) -> Result<()> {
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Contract(format!(
                "box has non-positive extent: w={}, h={}",
                self.w, self.h
            )));
        }
        let b = self.to_xyxy();
        if b.x1 < -1e-9 || b.y1 < -1e-9 || b.x2 > 1.0 + 1e-9 || b.y2 > 1.0 + 1e-9 {
            return Err(Error::Contract("box leaves the unit square".into()));
        }
        Ok(())
    }
}

/// Corner-form box used by the geometry kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxXyxy {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxXyxy {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    fn check(&self) -> Result<()> {
        if self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::Contract(format!(
                "zero-area box [{}, {}, {}, {}]",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok(())
    }
}

/// Intersection over union, in [0, 1].
pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> Result<f64> {
    a.check()?;
    b.check()?;
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// Generalized IoU: `IoU − (enclose − union) / enclose`, in (−1, 1].
pub fn giou(a: &BoxXyxy, b: &BoxXyxy) -> Result<f64> {
    a.check()?;
    b.check()?;
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let ew = a.x2.max(b.x2) - a.x1.min(b.x1);
    let eh = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enclose = ew * eh;
    Ok(inter / union - (enclose - union) / enclose)
}
