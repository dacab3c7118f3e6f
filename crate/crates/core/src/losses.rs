//! The four-term training objective and the optimizer.
//!
//! `total = alpha * task + beta * diff + gamma * distill + delta * coop`
//! where task is focal classification plus smooth-L1 regression over
//! assigned anchors, diff is the heteroscedastic noise-prediction NLL,
//! distill is decision-level KL against the teacher, and coop is BCE on the
//! selection map against the collaboration-need mask.

use crate::bev::GridSpec;
use crate::blocks::ParamStore;
use crate::numerics::{lit, Scalar, Tape, TensorData, TensorId};
use crate::scene::BevBox;
use crate::student::{anchor_box, encode_box, ANCHORS_PER_CELL, BOX_PARAMS};
use crate::Result;

/// Balance of the objective; defaults follow the artifact conventions.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    /// Distillation temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 0.5, delta: 1.0, tau: 1.0 }
    }
}

/// Scalar values of one step's objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub task: f64,
    pub diff: f64,
    pub distill: f64,
    pub coop: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.task.is_finite()
            && self.diff.is_finite()
            && self.distill.is_finite()
            && self.coop.is_finite()
            && self.total.is_finite()
    }
}

/// Per-anchor assignment outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    /// Matched to this ground-truth box index.
    Positive(usize),
    Negative,
    Ignore,
}

pub const IOU_POSITIVE: f64 = 0.5;
pub const IOU_NEGATIVE: f64 = 0.3;

/// IoU-based anchor assignment: >= 0.5 positive, <= 0.3 negative, otherwise
/// ignored; additionally each ground-truth box force-matches its best anchor
/// so coarse grids always produce at least one positive per object.
pub fn assign_anchors(grid: &GridSpec, gt_boxes: &[BevBox]) -> Vec<AnchorLabel> {
    let n = grid.h * grid.w * ANCHORS_PER_CELL;
    let mut labels = vec![AnchorLabel::Negative; n];
    if gt_boxes.is_empty() {
        return labels;
    }
    let mut best_per_gt: Vec<(f64, usize)> = vec![(-1.0, 0); gt_boxes.len()];
    let mut flat = 0usize;
    for i in 0..grid.h {
        for j in 0..grid.w {
            for a in 0..ANCHORS_PER_CELL {
                let anchor = anchor_box(grid, i, j, a);
                let mut best = 0.0f64;
                let mut best_gt = 0usize;
                for (g, gt) in gt_boxes.iter().enumerate() {
                    let inter = anchor.intersection_area(gt);
                    let union = anchor.area() + gt.area() - inter;
                    let iou = if union > 0.0 { inter / union } else { 0.0 };
                    if iou > best {
                        best = iou;
                        best_gt = g;
                    }
                    if iou > best_per_gt[g].0 {
                        best_per_gt[g] = (iou, flat);
                    }
                }
                labels[flat] = if best >= IOU_POSITIVE {
                    AnchorLabel::Positive(best_gt)
                } else if best <= IOU_NEGATIVE {
                    AnchorLabel::Negative
                } else {
                    AnchorLabel::Ignore
                };
                flat += 1;
            }
        }
    }
    for (g, &(iou, anchor)) in best_per_gt.iter().enumerate() {
        if iou > 0.0 {
            labels[anchor] = AnchorLabel::Positive(g);
        }
    }
    labels
}

/// Regression targets for the positive anchors; `targets` is dense
/// `H x W x A*5` with zeros elsewhere, plus a positive-anchor mask.
pub fn regression_targets<T: Scalar>(
    grid: &GridSpec,
    gt_boxes: &[BevBox],
    labels: &[AnchorLabel],
) -> (TensorData<T>, TensorData<T>) {
    let mut targets = TensorData::<T>::zeros(vec![grid.h, grid.w, ANCHORS_PER_CELL * BOX_PARAMS]);
    let mut mask = TensorData::<T>::zeros(vec![grid.h, grid.w, ANCHORS_PER_CELL]);
    let mut flat = 0usize;
    for i in 0..grid.h {
        for j in 0..grid.w {
            for a in 0..ANCHORS_PER_CELL {
                if let AnchorLabel::Positive(g) = labels[flat] {
                    let anchor = anchor_box(grid, i, j, a);
                    // Orientation is defined modulo pi for a rectangle; pick
                    // the representative closest to the anchor yaw.
                    let gt = canonical_mod_pi(&gt_boxes[g], anchor.yaw);
                    let delta = encode_box(&gt, &anchor);
                    let base = targets.idx3(i, j, a * BOX_PARAMS);
                    for (k, d) in delta.iter().enumerate() {
                        targets.data_mut()[base + k] = lit::<T>(*d);
                    }
                    let m = mask.idx3(i, j, a);
                    mask.data_mut()[m] = T::one();
                }
                flat += 1;
            }
        }
    }
    (targets, mask)
}

/// Yaw representative within pi/2 of `reference` (boxes are symmetric under
/// pi rotation, and a pi/2 turn swaps width and length).
fn canonical_mod_pi(b: &BevBox, reference: f64) -> BevBox {
    let mut out = *b;
    let mut diff = crate::scene::wrap_angle(out.yaw - reference);
    if diff > std::f64::consts::FRAC_PI_2 {
        out.yaw = crate::scene::wrap_angle(out.yaw - std::f64::consts::PI);
        diff -= std::f64::consts::PI;
    } else if diff < -std::f64::consts::FRAC_PI_2 {
        out.yaw = crate::scene::wrap_angle(out.yaw + std::f64::consts::PI);
    }
    let _ = diff;
    out
}

/// Focal binary cross-entropy over non-ignored anchors (mean).
///
/// Returns the scalar loss node and the number of anchors it averaged over;
/// zero valid anchors yields a constant 0 and `valid = 0` as the warning
/// flag.
pub fn focal_loss<T: Scalar>(
    tape: &Tape<T>,
    cls_logits: TensorId,
    labels: &[AnchorLabel],
    gamma_f: f64,
    alpha_f: f64,
) -> Result<(TensorId, usize)> {
    let n: usize = tape.numel(cls_logits);
    assert_eq!(n, labels.len(), "logit/label count mismatch");
    let mut pos = vec![T::zero(); n];
    let mut neg = vec![T::zero(); n];
    let mut valid = 0usize;
    for (k, l) in labels.iter().enumerate() {
        match l {
            AnchorLabel::Positive(_) => {
                pos[k] = T::one();
                valid += 1;
            }
            AnchorLabel::Negative => {
                neg[k] = T::one();
                valid += 1;
            }
            AnchorLabel::Ignore => {}
        }
    }
    if valid == 0 {
        return Ok((tape.constant_scalar(T::zero()), 0));
    }
    let z = tape.reshape(cls_logits, vec![n])?;
    let mask_pos = tape.constant(TensorData::new(vec![n], pos)?);
    let mask_neg = tape.constant(TensorData::new(vec![n], neg)?);
    // -alpha (1-p)^g log p on positives; -(1-alpha) p^g log(1-p) on negatives.
    let p_neg = tape.sigmoid(tape.neg(z)); // = 1 - p
    let p = tape.sigmoid(z);
    let log_p = tape.log_sigmoid(z);
    let log_1p = tape.log_sigmoid(tape.neg(z));
    let pos_term = tape.mul(tape.pow_scalar(p_neg, gamma_f), log_p)?;
    let pos_term = tape.scale(tape.mul(pos_term, mask_pos)?, -alpha_f);
    let neg_term = tape.mul(tape.pow_scalar(p, gamma_f), log_1p)?;
    let neg_term = tape.scale(tape.mul(neg_term, mask_neg)?, -(1.0 - alpha_f));
    let summed = tape.sum(tape.add(pos_term, neg_term)?);
    Ok((tape.scale(summed, 1.0 / valid as f64), valid))
}

/// Smooth-L1 over positive anchors' box deltas (mean over their elements).
pub fn smooth_l1<T: Scalar>(
    tape: &Tape<T>,
    box_deltas: TensorId,
    targets: &TensorData<T>,
    pos_mask: &TensorData<T>,
) -> Result<TensorId> {
    let n_pos = pos_mask.data().iter().filter(|&&v| v > T::zero()).count();
    if n_pos == 0 {
        return Ok(tape.constant_scalar(T::zero()));
    }
    // Expand the per-anchor mask over the 5 box parameters.
    let shape = targets.shape().to_vec();
    let expanded = TensorData::<T>::from_fn(shape.clone(), |k| {
        let anchor = k / BOX_PARAMS;
        pos_mask.data()[anchor]
    });
    let t_id = tape.constant(targets.clone());
    let m_id = tape.constant(expanded);
    let diff = tape.sub(box_deltas, t_id)?;
    let pen = tape.huber(diff);
    let masked = tape.mul(pen, m_id)?;
    let summed = tape.sum(masked);
    Ok(tape.scale(summed, 1.0 / (n_pos * BOX_PARAMS) as f64))
}

/// Heteroscedastic noise-prediction NLL:
/// `mean(0.5 exp(-s) ||y - y_hat||^2 + 0.5 s)` per pixel.
pub fn diff_nll<T: Scalar>(
    tape: &Tape<T>,
    y: &TensorData<T>,
    y_hat: TensorId,
    s: TensorId,
) -> Result<TensorId> {
    let y_id = tape.constant(y.clone());
    let r = tape.sub(y_hat, y_id)?;
    let r2 = tape.mul(r, r)?;
    let inv_var = tape.exp(tape.neg(s));
    let weighted = tape.scale(tape.mul(inv_var, r2)?, 0.5);
    let reg = tape.scale(s, 0.5);
    Ok(tape.mean(tape.add(weighted, reg)?))
}

/// Decision-level distillation: KL(softmax(z_tea / tau) || softmax(z_stu / tau)),
/// mean over anchors. Teacher logits are detached by construction. Each
/// anchor's single detection logit z becomes the pair (0, z).
pub fn kl_distill<T: Scalar>(
    tape: &Tape<T>,
    z_tea: &TensorData<T>,
    z_stu: TensorId,
    tau: f64,
) -> Result<TensorId> {
    let n = z_tea.numel();
    let pairs_tea = TensorData::<T>::from_fn(vec![n, 2], |k| {
        if k % 2 == 0 {
            T::zero()
        } else {
            z_tea.data()[k / 2]
        }
    });
    let zeros = tape.constant(TensorData::zeros(vec![n, 1]));
    let stu_col = tape.reshape(z_stu, vec![n, 1])?;
    let pairs_stu = tape.concat_last(zeros, stu_col)?;
    let t_id = tape.constant(pairs_tea);
    let lsm_tea = tape.log_softmax(tape.scale(t_id, 1.0 / tau), 1)?;
    let p_tea = tape.softmax(tape.scale(t_id, 1.0 / tau), 1)?;
    let lsm_stu = tape.log_softmax(tape.scale(pairs_stu, 1.0 / tau), 1)?;
    let gap = tape.sub(lsm_tea, lsm_stu)?;
    let contrib = tape.mul(p_tea, gap)?;
    let summed = tape.sum(contrib);
    Ok(tape.scale(summed, 1.0 / n as f64))
}

/// BCE between the selection map logits and the collaboration-need mask.
pub fn bce_coop<T: Scalar>(
    tape: &Tape<T>,
    m_logits: TensorId,
    y_gt: &TensorData<T>,
) -> Result<TensorId> {
    let n = y_gt.numel();
    let z = tape.reshape(m_logits, vec![n])?;
    let y_id = tape.constant(TensorData::new(vec![n], y_gt.data().to_vec())?);
    let one_minus_y = tape.constant(TensorData::from_fn(vec![n], |k| T::one() - y_gt.data()[k]));
    let log_m = tape.log_sigmoid(z);
    let log_1m = tape.log_sigmoid(tape.neg(z));
    let pos = tape.mul(y_id, log_m)?;
    let neg = tape.mul(one_minus_y, log_1m)?;
    let summed = tape.sum(tape.add(pos, neg)?);
    Ok(tape.scale(summed, -1.0 / n as f64))
}

/// Collaboration-need mask: a cell is positive iff its center lies inside a
/// ground-truth box and the ego sees fewer than 3 points there.
pub fn coop_need_mask<T: Scalar>(
    grid: &GridSpec,
    gt_boxes: &[BevBox],
    ego_cell_counts: &[usize],
) -> TensorData<T> {
    TensorData::from_fn(vec![grid.h, grid.w, 1], |cell| {
        let (i, j) = (cell / grid.w, cell % grid.w);
        let (cx, cy) = grid.cell_center(i, j);
        let inside = gt_boxes.iter().any(|b| b.contains(cx, cy));
        if inside && ego_cell_counts[cell] < 3 {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Weighted sum of the four parts; absent parts contribute zero.
pub fn total_loss<T: Scalar>(
    tape: &Tape<T>,
    task: TensorId,
    diff: Option<TensorId>,
    distill: Option<TensorId>,
    coop: Option<TensorId>,
    weights: &LossWeights,
) -> Result<(TensorId, LossBreakdown)> {
    let part = |id: Option<TensorId>| id.map(|i| tape.value(i).item().as_f64()).unwrap_or(0.0);
    let breakdown_parts = (
        tape.value(task).item().as_f64(),
        part(diff),
        part(distill),
        part(coop),
    );
    let mut total = tape.scale(task, weights.alpha);
    if let Some(d) = diff {
        total = tape.add(total, tape.scale(d, weights.beta))?;
    }
    if let Some(d) = distill {
        total = tape.add(total, tape.scale(d, weights.gamma))?;
    }
    if let Some(c) = coop {
        total = tape.add(total, tape.scale(c, weights.delta))?;
    }
    let (task_v, diff_v, distill_v, coop_v) = breakdown_parts;
    let breakdown = LossBreakdown {
        task: task_v,
        diff: diff_v,
        distill: distill_v,
        coop: coop_v,
        total: tape.value(total).item().as_f64(),
    };
    Ok((total, breakdown))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: usize,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let m = store.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        let v = store.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    /// One update; `grads[i]` pairs with the store's i-th parameter and may
    /// be `None` for parameters outside the current graph (treated as zero
    /// gradient).
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<TensorData<T>>]) {
        self.t += 1;
        let b1 = lit::<T>(self.beta1);
        let b2 = lit::<T>(self.beta2);
        let one = T::one();
        let bc1 = lit::<T>(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = lit::<T>(1.0 - self.beta2.powi(self.t as i32));
        let lr = lit::<T>(self.lr);
        let eps = lit::<T>(self.eps);
        let pids: Vec<_> = store.ids().collect();
        for (idx, pid) in pids.into_iter().enumerate() {
            let g_store;
            let g: &[T] = match &grads[idx] {
                Some(t) => t.data(),
                None => {
                    g_store = vec![T::zero(); store.value(pid).numel()];
                    &g_store
                }
            };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = store.value_mut(pid);
            for (k, slot) in p.data_mut().iter_mut().enumerate() {
                let gk = g[k];
                m[k] = b1 * m[k] + (one - b1) * gk;
                v[k] = b2 * v[k] + (one - b2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *slot = *slot - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    pub fn state(&self) -> (&[Vec<T>], &[Vec<T>], usize) {
        (&self.m, &self.v, self.t)
    }

    pub fn restore(&mut self, m: Vec<Vec<T>>, v: Vec<Vec<T>>, t: usize) {
        self.m = m;
        self.v = v;
        self.t = t;
    }
}
