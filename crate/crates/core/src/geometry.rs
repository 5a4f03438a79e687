//! Axis-aligned boxes, IoU, the R-CNN offset parameterization and the
//! per-coordinate Bounded-IoU upper bounds.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Axis-aligned box in corner form. Center form is derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box from corners. Panics if the corners are inverted.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self::try_new(x1, y1, x2, y2).expect("invalid box corners")
    }

    pub fn try_new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x2 < x1 || y2 < y1 {
            return Err(domain(format!(
                "box ({x1}, {y1}, {x2}, {y2}) is not finite or has negative extent"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn cx(&self) -> f64 {
        0.5 * (self.x1 + self.x2)
    }

    pub fn cy(&self) -> f64 {
        0.5 * (self.y1 + self.y2)
    }

    pub fn w(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn h(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.w() * self.h()
    }

    pub fn is_degenerate(&self) -> bool {
        self.w() <= 0.0 || self.h() <= 0.0
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        iw * ih
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }
}

/// Parameterized regression offsets of a box relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dcx: f64,
    pub dcy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta {
        dcx: 0.0,
        dcy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn new(dcx: f64, dcy: f64, dw: f64, dh: f64) -> Self {
        Self { dcx, dcy, dw, dh }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// Components in (cx, cy, w, h) order.
    pub fn to_array(self) -> [f64; 4] {
        [self.dcx, self.dcy, self.dw, self.dh]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl std::ops::Sub for BoxDelta {
    type Output = BoxDelta;

    fn sub(self, other: BoxDelta) -> BoxDelta {
        BoxDelta::new(
            self.dcx - other.dcx,
            self.dcy - other.dcy,
            self.dw - other.dw,
            self.dh - other.dh,
        )
    }
}

/// Which family of coordinates a Bounded-IoU evaluation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundAxis {
    /// `dcx` / `dcy`.
    Center,
    /// `dw` / `dh`.
    Size,
}

impl BoundAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundAxis::Center => "center",
            BoundAxis::Size => "size",
        }
    }
}

impl std::str::FromStr for BoundAxis {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(BoundAxis::Center),
            "size" => Ok(BoundAxis::Size),
            other => Err(crate::Error::Config(format!(
                "unknown axis `{other}` (expected `center` or `size`)"
            ))),
        }
    }
}

/// Intersection over union. Zero whenever the union has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Offsets of `target` relative to `anchor`.
pub fn encode(anchor: &BBox, target: &BBox) -> Result<BoxDelta> {
    if anchor.is_degenerate() {
        return Err(domain(format!("cannot encode against degenerate anchor {anchor:?}")));
    }
    if target.is_degenerate() {
        return Err(domain(format!("cannot encode degenerate target {target:?}")));
    }
    Ok(BoxDelta {
        dcx: (target.cx() - anchor.cx()) / anchor.w(),
        dcy: (target.cy() - anchor.cy()) / anchor.h(),
        dw: (target.w() / anchor.w()).ln(),
        dh: (target.h() / anchor.h()).ln(),
    })
}

/// Inverse of [`encode`].
pub fn decode(anchor: &BBox, delta: &BoxDelta) -> Result<BBox> {
    if anchor.is_degenerate() {
        return Err(domain(format!("cannot decode against degenerate anchor {anchor:?}")));
    }
    if !delta.is_finite() {
        return Err(domain(format!("non-finite delta {delta:?}")));
    }
    let cx = anchor.cx() + delta.dcx * anchor.w();
    let cy = anchor.cy() + delta.dcy * anchor.h();
    let w = anchor.w() * delta.dw.exp();
    let h = anchor.h() * delta.dh.exp();
    BBox::try_new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Per-coordinate IoU upper bound as a function of one offset residual.
///
/// For the center axis this is `(w_t - w_s|d|) / (w_t + w_s|d|)`, defined
/// only for `|d| <= w_t / w_s`. For the size axis it is `exp(-|d|)` and the
/// widths are not used.
pub fn bounded_iou(delta_component: f64, axis: BoundAxis, w_t: f64, w_s: f64) -> Result<f64> {
    if !delta_component.is_finite() {
        return Err(domain(format!("non-finite offset {delta_component}")));
    }
    let d = delta_component.abs();
    match axis {
        BoundAxis::Center => {
            if !(w_t > 0.0 && w_s > 0.0) {
                return Err(domain(format!(
                    "center bound needs positive widths, got w_t={w_t}, w_s={w_s}"
                )));
            }
            if d > w_t / w_s {
                return Err(domain(format!(
                    "center bound undefined for |d|={d} > w_t/w_s={}",
                    w_t / w_s
                )));
            }
            Ok((w_t - w_s * d) / (w_t + w_s * d))
        }
        BoundAxis::Size => Ok((-d).exp()),
    }
}

/// Intersection of `b` with `bounds`; may be degenerate.
pub fn clip_box(b: &BBox, bounds: &BBox) -> BBox {
    BBox {
        x1: b.x1.clamp(bounds.x1, bounds.x2),
        y1: b.y1.clamp(bounds.y1, bounds.y2),
        x2: b.x2.clamp(bounds.x1, bounds.x2),
        y2: b.y2.clamp(bounds.y1, bounds.y2),
    }
}
