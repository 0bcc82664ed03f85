//! Stand-in detector: jittered ground-truth boxes plus background clutter,
//! box losses, and minimum-cost bipartite assignment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::ReferencePoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned box in image-normalised corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if !(x1 <= x2 && y1 <= y2) || ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid(format!("malformed box {b:?}")));
        }
        Ok(b)
    }

    /// Sorts each corner pair and clamps into the unit square.
    pub fn normalized(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        let c = |v: f64| v.clamp(0.0, 1.0);
        BBox {
            x1: c(x1.min(x2)),
            y1: c(y1.min(y2)),
            x2: c(x1.max(x2)),
            y2: c(y1.max(y2)),
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn box_center_reference(b: &BBox) -> ReferencePoint {
    ReferencePoint::new((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0)
}

pub const PERSON_SCORE: f64 = 0.9;
pub const BACKGROUND_SCORE: f64 = 0.1;

/// Detector output for one scene: exactly `N` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    /// Ground-truth person index for each slot, `None` for unassigned slots.
    pub assigned: Vec<Option<usize>>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn references(&self) -> Vec<ReferencePoint> {
        self.boxes.iter().map(box_center_reference).collect()
    }
}

/// Perturbs each true box's corners with `N(0, noise_sigma²)` (score 0.9) and
/// fills the remaining slots with uniform random boxes (score 0.1).
pub fn jitter_detect(truth: &[BBox], n: usize, noise_sigma: f64, seed: u64) -> Result<DetectionSet> {
    if n < truth.len() {
        return Err(Error::Invalid(format!(
            "{n} detection slots cannot cover {} persons",
            truth.len()
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Invalid(format!("noise sigma {noise_sigma} must be non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut boxes = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for b in truth {
        if noise_sigma == 0.0 {
            boxes.push(*b);
        } else {
            let c: Vec<f64> = b.corners().iter().map(|v| v + noise.sample(&mut rng)).collect();
            boxes.push(BBox::normalized(c[0], c[1], c[2], c[3]));
        }
        scores.push(PERSON_SCORE);
    }
    while boxes.len() < n {
        let c: [f64; 4] = std::array::from_fn(|_| rng.random::<f64>());
        boxes.push(BBox::normalized(c[0], c[1], c[2], c[3]));
        scores.push(BACKGROUND_SCORE);
    }
    Ok(DetectionSet {
        boxes,
        scores,
        assigned: vec![None; n],
    })
}

/// Mean over coordinates of `0.5x²` for `|x| < 1`, else `|x| − 0.5`.
pub fn smooth_l1(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("smooth_l1", pred.shape(), target.shape()));
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let x = (p - t).abs();
            if x < 1.0 {
                0.5 * x * x
            } else {
                x - 0.5
            }
        })
        .sum();
    Ok(total / pred.numel() as f64)
}

/// Scores are clamped to `[SCORE_CLAMP, 1 − SCORE_CLAMP]` before the log.
pub const SCORE_CLAMP: f64 = 1e-12;

/// Binary focal loss: mean of `−α_t (1 − p_t)^γ log p_t`, where `α_t = α`
/// for positives and `1 − α` for negatives.
pub fn focal_cls_loss(scores: &Tensor, labels: &[bool], gamma: f64, alpha: f64) -> Result<f64> {
    if scores.numel() != labels.len() {
        return Err(Error::shape("focal_cls_loss", scores.shape(), &[labels.len()]));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (&p, &positive) in scores.data().iter().zip(labels) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Numeric(format!("score {p} outside [0, 1]")));
        }
        let p = p.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
        let (pt, at) = if positive { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
        total += -at * (1.0 - pt).powf(gamma) * pt.ln();
    }
    Ok(total / labels.len() as f64)
}

/// Minimum-cost assignment of `min(n, m)` row/column pairs.
///
/// Returns `(row, col)` pairs sorted by row and the total cost. Uses the
/// O(n²m) shortest augmenting path method with dual potentials.
pub fn hungarian_assign(cost: &Tensor) -> Result<(Vec<(usize, usize)>, f64)> {
    if cost.ndim() != 2 {
        return Err(Error::shape("hungarian_assign", cost.shape(), &[0, 0]));
    }
    if !cost.is_finite() {
        return Err(Error::Invalid("assignment costs must be finite".into()));
    }
    let (n, m) = (cost.rows(), cost.cols());
    let transposed = n > m;
    let (rows, cols) = if transposed { (m, n) } else { (n, m) };
    let c = |i: usize, j: usize| if transposed { cost.at2(j, i) } else { cost.at2(i, j) };

    // 1-based arrays; column 0 is a virtual start
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=cols)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (r, c) = (owner[j] - 1, j - 1);
            if transposed {
                (c, r)
            } else {
                (r, c)
            }
        })
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(r, c)| cost.at2(r, c)).sum();
    Ok((pairs, total))
}

/// Matches detection slots to ground-truth boxes by minimum `−iou` and
/// records the result in `dets.assigned`.
pub fn assign_targets(dets: &mut DetectionSet, truth: &[BBox]) -> Result<()> {
    dets.assigned = vec![None; dets.len()];
    if truth.is_empty() || dets.is_empty() {
        return Ok(());
    }
    let mut cost = Tensor::zeros(&[dets.len(), truth.len()]);
    for (i, d) in dets.boxes.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            cost.data_mut()[i * truth.len() + j] = -iou(d, t);
        }
    }
    let (pairs, _) = hungarian_assign(&cost)?;
    for (slot, person) in pairs {
        dets.assigned[slot] = Some(person);
    }
    Ok(())
}

/// Box terms of the detection objective for one assigned scene:
/// `(l_cls, l_iou, l_l1)`.
pub fn detection_losses(dets: &DetectionSet, truth: &[BBox], gamma: f64, alpha: f64) -> Result<(f64, f64, f64)> {
    let labels: Vec<bool> = dets.assigned.iter().map(Option::is_some).collect();
    let l_cls = focal_cls_loss(&Tensor::vector(&dets.scores), &labels, gamma, alpha)?;
    let mut pred = Vec::new();
    let mut target = Vec::new();
    let mut l_iou = 0.0;
    let mut count = 0usize;
    for (slot, a) in dets.assigned.iter().enumerate() {
        if let Some(p) = *a {
            l_iou += 1.0 - iou(&dets.boxes[slot], &truth[p]);
            pred.extend(dets.boxes[slot].corners());
            target.extend(truth[p].corners());
            count += 1;
        }
    }
    if count == 0 {
        return Ok((l_cls, 0.0, 0.0));
    }
    let l_l1 = smooth_l1(&Tensor::vector(&pred), &Tensor::vector(&target))?;
    Ok((l_cls, l_iou / count as f64, l_l1))
}
