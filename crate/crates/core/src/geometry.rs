//! Box parameterisations, overlap measures, box refinement, and greedy NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::tape::{inverse_sigmoid, sigmoid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoxFormat {
    /// Centre, width and height as fractions of the image.
    CxcywhNorm,
    /// Corner coordinates in pixels.
    XyxyAbs,
}

/// An axis-aligned box tagged with its parameterisation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub format: BoxFormat,
    pub v: [f64; 4],
}

impl BBox {
    /// Normalised centre box; components in `[0, 1]`, positive extent.
    pub fn cxcywh(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let v = [cx, cy, w, h];
        if v.iter().any(|x| !x.is_finite() || !(0.0..=1.0).contains(x)) {
            return Err(Error::Geometry(format!("cxcywh components out of [0,1]: {v:?}")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Geometry(format!("degenerate box {v:?}")));
        }
        Ok(Self {
            format: BoxFormat::CxcywhNorm,
            v,
        })
    }

    pub fn xyxy(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let v = [x1, y1, x2, y2];
        if v.iter().any(|x| !x.is_finite()) || x1 > x2 || y1 > y2 {
            return Err(Error::Geometry(format!("invalid xyxy box {v:?}")));
        }
        Ok(Self {
            format: BoxFormat::XyxyAbs,
            v,
        })
    }

    /// Corners in the box's own units (fractions of the image for
    /// normalised boxes).
    pub fn corners(&self) -> [f64; 4] {
        match self.format {
            BoxFormat::XyxyAbs => self.v,
            BoxFormat::CxcywhNorm => {
                let [cx, cy, w, h] = self.v;
                [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
            }
        }
    }

    pub fn convert(&self, target: BoxFormat, image_w: f64, image_h: f64) -> Result<BBox> {
        let [a, b, c, d] = self.v;
        match (self.format, target) {
            (f, t) if f == t => Ok(*self),
            (BoxFormat::CxcywhNorm, BoxFormat::XyxyAbs) => {
                if c <= 0.0 || d <= 0.0 {
                    return Err(Error::Geometry(format!("degenerate box {:?}", self.v)));
                }
                BBox::xyxy(
                    (a - c / 2.0) * image_w,
                    (b - d / 2.0) * image_h,
                    (a + c / 2.0) * image_w,
                    (b + d / 2.0) * image_h,
                )
            }
            _ => {
                let (w, h) = (c - a, d - b);
                if w <= 0.0 || h <= 0.0 {
                    return Err(Error::Geometry(format!("degenerate box {:?}", self.v)));
                }
                BBox::cxcywh(
                    (a + w / 2.0) / image_w,
                    (b + h / 2.0) / image_h,
                    w / image_w,
                    h / image_h,
                )
            }
        }
    }

    pub fn area(&self) -> f64 {
        let [x1, y1, x2, y2] = self.corners();
        (x2 - x1) * (y2 - y1)
    }
}

/// IoU of two corner boxes.
pub fn iou_corners(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// GIoU of two corner boxes.
pub fn giou_corners(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    if union <= 0.0 || hull <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

/// Intersection over union. Both boxes should share a representation.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    debug_assert_eq!(a.format, b.format);
    iou_corners(&a.corners(), &b.corners())
}

/// Generalised IoU: IoU minus the fraction of the enclosing hull not
/// covered by the union. Lies in `(-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    debug_assert_eq!(a.format, b.format);
    giou_corners(&a.corners(), &b.corners())
}

/// `sigmoid(inverse_sigmoid(reference) + delta)` componentwise.
pub fn refine_box(reference: &BBox, delta: [f64; 4]) -> BBox {
    debug_assert_eq!(reference.format, BoxFormat::CxcywhNorm);
    let mut v = [0.0; 4];
    for i in 0..4 {
        v[i] = sigmoid(inverse_sigmoid(reference.v[i]) + delta[i]);
    }
    BBox {
        format: BoxFormat::CxcywhNorm,
        v,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Class-wise greedy non-maximum suppression.
///
/// Detections are visited by descending score (ties keep input order); one
/// is kept iff its IoU with every already-kept box of the same class is at
/// most `iou_threshold`. The result is in keep order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        let c = d.bbox.corners();
        let clash = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou_corners(&k.bbox.corners(), &c) > iou_threshold);
        if !clash {
            kept.push(*d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xy(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::xyxy(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn conversions() {
        let full = BBox::cxcywh(0.5, 0.5, 1.0, 1.0).unwrap();
        let abs = full.convert(BoxFormat::XyxyAbs, 100.0, 100.0).unwrap();
        assert_eq!(abs.v, [0.0, 0.0, 100.0, 100.0]);

        let b = xy(10.0, 20.0, 30.0, 60.0);
        let n = b.convert(BoxFormat::CxcywhNorm, 100.0, 100.0).unwrap();
        for (got, want) in n.v.iter().zip([0.2, 0.4, 0.2, 0.4]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert!(BBox::cxcywh(0.5, 0.5, 0.0, 0.2).is_err());
        assert!(BBox::cxcywh(1.5, 0.5, 0.1, 0.2).is_err());
        assert!(BBox::xyxy(3.0, 0.0, 1.0, 1.0).is_err());
        let flat = xy(1.0, 1.0, 1.0, 4.0);
        assert!(flat.convert(BoxFormat::CxcywhNorm, 10.0, 10.0).is_err());
    }

    #[test]
    fn iou_cases() {
        let a = xy(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert!((iou(&a, &xy(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(&a, &xy(5.0, 5.0, 6.0, 6.0)), 0.0);
    }

    #[test]
    fn giou_cases() {
        let a = xy(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou(&a, &a), 1.0);
        assert!((giou(&a, &xy(2.0, 2.0, 3.0, 3.0)) + 7.0 / 9.0).abs() < 1e-15);
        let outer = xy(0.0, 0.0, 4.0, 4.0);
        let inner = xy(1.0, 1.0, 2.0, 3.0);
        assert!((giou(&outer, &inner) - iou(&outer, &inner)).abs() < 1e-15);
    }

    #[test]
    fn refine_box_cases() {
        let r = BBox::cxcywh(0.3, 0.6, 0.2, 0.1).unwrap();
        let same = refine_box(&r, [0.0; 4]);
        for (a, b) in same.v.iter().zip(r.v) {
            assert!((a - b).abs() < 1e-9);
        }
        let c = BBox::cxcywh(0.5, 0.5, 0.5, 0.5).unwrap();
        let moved = refine_box(&c, [3f64.ln(), 0.0, 0.0, 0.0]);
        assert!((moved.v[0] - 0.75).abs() < 1e-12);
        let tiny = refine_box(&c, [-40.0; 4]);
        assert!(tiny.v.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    fn det(b: BBox, class_id: usize, score: f64) -> Detection {
        Detection {
            bbox: b,
            class_id,
            score,
        }
    }

    #[test]
    fn nms_cases() {
        assert!(nms(&[], 0.5).is_empty());
        let a = det(xy(0.0, 0.0, 1.0, 1.0), 0, 0.5);
        assert_eq!(nms(&[a], 0.7), vec![a]);

        let lo = det(xy(0.0, 0.0, 1.0, 1.0), 0, 0.8);
        let hi = det(xy(0.0, 0.0, 1.0, 1.0), 0, 0.9);
        assert_eq!(nms(&[lo, hi], 0.7), vec![hi]);

        // other classes never suppress
        let other = det(xy(0.0, 0.0, 1.0, 1.0), 1, 0.1);
        assert_eq!(nms(&[lo, hi, other], 0.7), vec![hi, other]);
    }

    #[test]
    fn nms_ties_keep_input_order() {
        let a = det(xy(0.0, 0.0, 1.0, 1.0), 0, 0.5);
        let b = det(xy(0.0, 0.0, 1.0, 1.0), 0, 0.5);
        let out = nms(&[a, b], 0.5);
        assert_eq!(out, vec![a]);
    }
}
