//! Region and contour metrics for binary segmentation masks.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Thresholds reported individually as P@X, in percent.
pub const REPORTED_THRESHOLDS: [u32; 5] = [50, 60, 70, 80, 90];
/// Thresholds averaged into AP, in percent.
pub const AP_THRESHOLDS: [u32; 10] = [50, 55, 60, 65, 70, 75, 80, 85, 90, 95];
/// Boundary matching tolerance as a fraction of the image diagonal.
pub const BOUNDARY_TOLERANCE: f64 = 0.008;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape {
                op: "mask",
                lhs: vec![height, width],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// Foreground iff value > 0.5; accepts 1×H×W or H×W tensors.
    pub fn from_tensor<F: Scalar>(t: &Tensor<F>) -> Result<Self> {
        let (h, w) = match t.shape() {
            [1, h, w] | [h, w] => (*h, *w),
            s => {
                return Err(Error::Shape {
                    op: "mask",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        let half = F::of(0.5);
        Self::new(h, w, t.data().iter().map(|&v| v > half).collect())
    }

    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        let data = self
            .data
            .iter()
            .map(|&b| if b { F::one() } else { F::zero() })
            .collect();
        Tensor::new(&[1, self.height, self.width], data).expect("mask shape")
    }

    /// Binary PGM (P5, maxval 255): foreground 255, background 0.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Foreground pixels with at least one 4-neighbour in the background or off the image.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !self.get(y, x) {
                    continue;
                }
                let edge = y == 0
                    || x == 0
                    || y + 1 == h
                    || x + 1 == w
                    || !self.get(y - 1, x)
                    || !self.get(y + 1, x)
                    || !self.get(y, x - 1)
                    || !self.get(y, x + 1);
                if edge {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

/// Intersection and union pixel counts of one prediction/ground-truth pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: u64,
    pub union: u64,
}

impl Overlap {
    pub fn of(pred: &Mask, gt: &Mask) -> Result<Self> {
        check_pair(pred, gt)?;
        let (mut i, mut u) = (0, 0);
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            i += (p && g) as u64;
            u += (p || g) as u64;
        }
        Ok(Self {
            intersection: i,
            union: u,
        })
    }

    /// Empty against empty counts as a perfect match.
    pub fn iou(self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }

    /// Strict `IoU > pct/100`, compared in integers.
    pub fn exceeds(self, pct: u32) -> bool {
        if self.union == 0 {
            return true;
        }
        self.intersection * 100 > self.union * pct as u64
    }
}

fn check_pair(pred: &Mask, gt: &Mask) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Shape {
            op: "metrics",
            lhs: vec![pred.height, pred.width],
            rhs: vec![gt.height, gt.width],
        });
    }
    Ok(())
}

fn check_lists(preds: &[Mask], gts: &[Mask]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::invalid("metrics need at least one sample"));
    }
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouMetrics {
    pub overall_iou: f64,
    pub mean_iou: f64,
    /// Aligned with [`REPORTED_THRESHOLDS`].
    pub p_at: [f64; 5],
    pub ap: f64,
    pub per_sample: Vec<f64>,
}

pub fn iou_metrics(preds: &[Mask], gts: &[Mask]) -> Result<IouMetrics> {
    check_lists(preds, gts)?;
    let overlaps = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| Overlap::of(p, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&overlaps))
}

pub fn summarize(overlaps: &[Overlap]) -> IouMetrics {
    let n = overlaps.len() as f64;
    let (ti, tu) = overlaps
        .iter()
        .fold((0u64, 0u64), |(i, u), o| (i + o.intersection, u + o.union));
    let overall_iou = if tu == 0 { 1.0 } else { ti as f64 / tu as f64 };
    let per_sample: Vec<f64> = overlaps.iter().map(|o| o.iou()).collect();
    let mean_iou = per_sample.iter().sum::<f64>() / n;
    let precision = |pct: u32| overlaps.iter().filter(|o| o.exceeds(pct)).count() as f64 / n;
    let p_at = REPORTED_THRESHOLDS.map(precision);
    let ap = AP_THRESHOLDS.iter().map(|&t| precision(t)).sum::<f64>() / AP_THRESHOLDS.len() as f64;
    IouMetrics {
        overall_iou,
        mean_iou,
        p_at,
        ap,
        per_sample,
    }
}

/// `ceil(0.008 · diagonal)` pixels.
pub fn boundary_radius(height: usize, width: usize) -> usize {
    let diag = ((height * height + width * width) as f64).sqrt();
    (BOUNDARY_TOLERANCE * diag).ceil() as usize
}

/// Marks every pixel within Euclidean distance `r` of a boundary pixel.
fn dilate(points: &[(usize, usize)], h: usize, w: usize, r: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    let ri = r as isize;
    for &(y, x) in points {
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                if dy * dy + dx * dx > ri * ri {
                    continue;
                }
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    out[yy as usize * w + xx as usize] = true;
                }
            }
        }
    }
    out
}

/// Boundary F-measure of one pair.
pub fn boundary_f(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_pair(pred, gt)?;
    let (h, w) = (pred.height, pred.width);
    let (bp, bg) = (pred.boundary(), gt.boundary());
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let r = boundary_radius(h, w);
    let near_gt = dilate(&bg, h, w, r);
    let near_pred = dilate(&bp, h, w, r);
    let hit_p = bp.iter().filter(|&&(y, x)| near_gt[y * w + x]).count();
    let hit_g = bg.iter().filter(|&&(y, x)| near_pred[y * w + x]).count();
    let precision = hit_p as f64 / bp.len() as f64;
    let recall = hit_g as f64 / bg.len() as f64;
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

/// Region similarity J (mean IoU) and contour accuracy F (mean boundary F-measure).
pub fn j_and_f(preds: &[Mask], gts: &[Mask]) -> Result<(f64, f64)> {
    check_lists(preds, gts)?;
    let n = preds.len() as f64;
    let mut j = 0.0;
    let mut f = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        j += Overlap::of(p, g)?.iou();
        f += boundary_f(p, g)?;
    }
    Ok((j / n, f / n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub overall_iou: f64,
    pub mean_iou: f64,
    pub p_at: [f64; 5],
    pub ap: f64,
    pub j_mean: f64,
    pub f_mean: f64,
}

impl EvalReport {
    pub fn compute(preds: &[Mask], gts: &[Mask]) -> Result<Self> {
        let iou = iou_metrics(preds, gts)?;
        let (j_mean, f_mean) = j_and_f(preds, gts)?;
        Ok(Self {
            overall_iou: iou.overall_iou,
            mean_iou: iou.mean_iou,
            p_at: iou.p_at,
            ap: iou.ap,
            j_mean,
            f_mean,
        })
    }

    pub fn fields(&self) -> Vec<(String, f64)> {
        let mut v = vec![
            ("overall_iou".to_string(), self.overall_iou),
            ("mean_iou".to_string(), self.mean_iou),
        ];
        for (t, p) in REPORTED_THRESHOLDS.iter().zip(self.p_at) {
            v.push((format!("p_at_{t}"), p));
        }
        v.push(("ap".into(), self.ap));
        v.push(("j_mean".into(), self.j_mean));
        v.push(("f_mean".into(), self.f_mean));
        v
    }

    /// Flat JSON object, values with six decimals.
    pub fn to_json(&self) -> String {
        let mut s = String::from("{");
        for (i, (k, v)) in self.fields().iter().enumerate() {
            if i > 0 {
                s.push_str(", ");
            }
            write!(s, "\"{k}\": {v:.6}").unwrap();
        }
        s.push('}');
        s
    }
}
