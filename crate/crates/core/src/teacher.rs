//! Quality-aware early-fusion teacher.
//!
//! All agents' raw clouds are brought into the ego frame and voxelized on
//! the ego grid; a shared quality head weights each agent's map cell-wise
//! before summation; ground-truth class labels are rasterized, embedded and
//! fused in; a small backbone produces the denoising condition, and a
//! GCM-conditioned stack reads out the clean feature target. Training-time
//! only: the student never sees any of this at inference.

use crate::bev::{self, GridSpec};
use crate::blocks::{BoundParams, Conv2d, GcmBlock, Init, ParamStore, TimeEmbed};
use crate::diffusion::{q_sample, DiffusionSchedule};
use crate::numerics::{Scalar, Tape, TensorData, TensorId};
use crate::rng::SeedTree;
use crate::scene::{BevBox, Scene};
use crate::student::DetectionHead;
use crate::Result;

pub const SEMANTIC_CHANNELS: usize = 8;
pub const QOI_HIDDEN: usize = 8;
pub const GCM_LEVELS: usize = 3;

/// Class vocabulary of the semantic prior.
pub const CLASS_BACKGROUND: usize = 0;
pub const CLASS_VEHICLE: usize = 1;
pub const NUM_CLASSES: usize = 2;

pub struct TeacherModel<T: Scalar> {
    pub grid: GridSpec,
    pub max_points_per_pillar: usize,
    pub store: ParamStore<T>,
    w: Wiring,
}

struct Wiring {
    pillar: crate::blocks::LinearLayer,
    qoi_hidden: Conv2d,
    qoi_out: Conv2d,
    sem_table: crate::blocks::ParamId,
    fuse: Conv2d,
    backbone_a: Conv2d,
    backbone_b: Conv2d,
    t_embed: TimeEmbed,
    gcm: Vec<GcmBlock>,
    readout: Conv2d,
    head: DetectionHead,
}

/// Everything the student stage needs from a frozen teacher on one scene.
pub struct TeacherTarget<T> {
    /// Clean feature target, detached.
    pub x0: TensorData<T>,
    /// Per-anchor classification logits for decision-level distillation.
    pub cls_logits: TensorData<T>,
}

/// Tape handles of a training forward pass.
pub struct TeacherPass {
    pub x0_hat: TensorId,
    /// Condition map the denoiser reconstructs (taped; detach via `value`).
    pub f_c: TensorId,
    pub cls: TensorId,
    pub reg: TensorId,
    /// Mean QoI score per agent, for diagnostics.
    pub qoi_means: Vec<f64>,
}

impl<T: Scalar> TeacherModel<T> {
    pub fn new(grid: GridSpec, seeds: &SeedTree) -> Result<Self> {
        let c = grid.c;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seeds.child("teacher-init", &[]));
        let i = &mut init;
        let w = Wiring {
            pillar: crate::blocks::LinearLayer::new(i, "tea.pillar", bev::POINT_FEATURES, c),
            qoi_hidden: Conv2d::same3x3(i, "tea.qoi.hidden", c, QOI_HIDDEN),
            qoi_out: Conv2d::same3x3(i, "tea.qoi.out", QOI_HIDDEN, 1),
            sem_table: i.normal("tea.sem_table", vec![NUM_CLASSES, SEMANTIC_CHANNELS], 0.5),
            fuse: Conv2d::pointwise(i, "tea.fuse", c + SEMANTIC_CHANNELS, c),
            backbone_a: Conv2d::same3x3(i, "tea.backbone_a", c, c),
            backbone_b: Conv2d::same3x3(i, "tea.backbone_b", c, c),
            t_embed: TimeEmbed::new(i, "tea.t_embed", c),
            gcm: (0..GCM_LEVELS).map(|l| GcmBlock::new(i, &format!("tea.gcm{l}"), c)).collect(),
            readout: Conv2d::pointwise(i, "tea.readout", c, c),
            head: DetectionHead::new(i, "tea.head", c),
        };
        Ok(Self { grid, max_points_per_pillar: 16, store, w })
    }

    /// Voxel features per agent, all on the ego grid (early fusion).
    pub fn voxel_features(
        &self,
        p: &BoundParams<T>,
        scene: &Scene,
    ) -> Result<Vec<TensorId>> {
        let clouds = crate::student::clouds_in_ego_frame(scene);
        clouds
            .iter()
            .map(|cloud| {
                let pillars = bev::voxelize::<T>(cloud, &self.grid, self.max_points_per_pillar)?;
                bev::pillar_encode(
                    p.tape,
                    &pillars,
                    bev::PillarEncoderIds { w: p.id(self.w.pillar.w), b: p.id(self.w.pillar.b) },
                )
            })
            .collect()
    }

    /// Voxel-wise quality scores in (0,1), shared weights across agents.
    pub fn qoi_score(&self, p: &BoundParams<T>, v: TensorId) -> Result<TensorId> {
        let tape = p.tape;
        let hidden = tape.relu(self.w.qoi_hidden.apply(p, v)?);
        Ok(tape.sigmoid(self.w.qoi_out.apply(p, hidden)?))
    }

    /// Score-weighted sum over agents (element-wise, score broadcast).
    pub fn weighted_aggregate(
        &self,
        p: &BoundParams<T>,
        features: &[TensorId],
        scores: &[TensorId],
    ) -> Result<TensorId> {
        assert_eq!(features.len(), scores.len());
        let tape = p.tape;
        let mut acc: Option<TensorId> = None;
        for (&v, &s) in features.iter().zip(scores.iter()) {
            let term = tape.mul(s, v)?;
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(prev, term)?,
            });
        }
        Ok(acc.expect("at least one agent"))
    }

    /// Rasterizes ground-truth boxes to per-cell class ids.
    pub fn class_grid(&self, gt_boxes: &[BevBox]) -> Vec<Option<usize>> {
        let mut ids = Vec::with_capacity(self.grid.cells());
        for i in 0..self.grid.h {
            for j in 0..self.grid.w {
                let (cx, cy) = self.grid.cell_center(i, j);
                let class = if gt_boxes.iter().any(|b| b.contains(cx, cy)) {
                    CLASS_VEHICLE
                } else {
                    CLASS_BACKGROUND
                };
                ids.push(Some(class));
            }
        }
        ids
    }

    /// Dense semantic map: per-cell embedding lookup of the class grid.
    pub fn semantic_embed(&self, p: &BoundParams<T>, gt_boxes: &[BevBox]) -> Result<TensorId> {
        let ids = self.class_grid(gt_boxes);
        let rows = p.tape.gather_rows(p.id(self.w.sem_table), &ids)?;
        p.tape.reshape(rows, vec![self.grid.h, self.grid.w, SEMANTIC_CHANNELS])
    }

    /// Channel-concatenates (geometric || semantic) and projects back to C.
    pub fn fuse_semantic(
        &self,
        p: &BoundParams<T>,
        v_wagg: TensorId,
        v_sem: TensorId,
    ) -> Result<TensorId> {
        let cat = p.tape.concat_last(v_wagg, v_sem)?;
        self.w.fuse.apply(p, cat)
    }

    /// The denoising condition `F_c`.
    pub fn condition(&self, p: &BoundParams<T>, v_fused: TensorId) -> Result<TensorId> {
        let tape = p.tape;
        let a = tape.relu(self.w.backbone_a.apply(p, v_fused)?);
        Ok(tape.relu(self.w.backbone_b.apply(p, a)?))
    }

    /// GCM stack + readout: reconstructs the clean map from `x_t` under the
    /// timestep-aware condition.
    pub fn denoise(
        &self,
        p: &BoundParams<T>,
        x_t: TensorId,
        t: usize,
        f_c: TensorId,
    ) -> Result<TensorId> {
        let tape = p.tape;
        let gamma = self.w.t_embed.embed(p, t)?;
        let mut cond = tape.add(f_c, gamma)?;
        let mut x = x_t;
        for block in &self.w.gcm {
            let (xn, cn) = block.apply(p, x, cond)?;
            x = xn;
            cond = cn;
        }
        self.w.readout.apply(p, x)
    }

    /// Full training-time forward pass. The latent is built from the
    /// *detached* condition, so the backbone trains only through the
    /// conditioning path and the detection head.
    pub fn forward_train(
        &self,
        p: &BoundParams<T>,
        scene: &Scene,
        t: usize,
        eps: &TensorData<T>,
        sched: &DiffusionSchedule,
    ) -> Result<TeacherPass> {
        let tape = p.tape;
        let features = self.voxel_features(p, scene)?;
        let scores: Vec<TensorId> =
            features.iter().map(|&v| self.qoi_score(p, v)).collect::<Result<_>>()?;
        let qoi_means = scores
            .iter()
            .map(|&s| {
                let v = tape.value(s);
                v.data().iter().map(|x| x.as_f64()).sum::<f64>() / v.numel() as f64
            })
            .collect();
        let v_wagg = self.weighted_aggregate(p, &features, &scores)?;
        let v_sem = self.semantic_embed(p, &scene.gt_boxes)?;
        let v_fused = self.fuse_semantic(p, v_wagg, v_sem)?;
        let f_c = self.condition(p, v_fused)?;
        let x_t = q_sample(&tape.value(f_c), t, eps, sched)?;
        let x_t = tape.constant(x_t);
        let x0_hat = self.denoise(p, x_t, t, f_c)?;
        let (cls, reg) = self.w.head.apply(p, x0_hat)?;
        Ok(TeacherPass { x0_hat, f_c, cls, reg, qoi_means })
    }

    /// Frozen-teacher emission for student training: deterministic in
    /// `(scene, weights, seed)`; outputs are detached tensors.
    pub fn emit_target(
        &self,
        scene: &Scene,
        sched: &DiffusionSchedule,
        seeds: &SeedTree,
    ) -> Result<TeacherTarget<T>> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        let mut rng = seeds.stream("diffusion", &[scene.seed, 0x7ea]);
        use rand::Rng;
        let t = rng.gen_range(1..=sched.steps());
        let eps = crate::diffusion::gaussian_like::<T>(
            vec![self.grid.h, self.grid.w, self.grid.c],
            &mut rng,
        );
        let pass = self.forward_train(&p, scene, t, &eps, sched)?;
        Ok(TeacherTarget { x0: tape.value(pass.x0_hat), cls_logits: tape.value(pass.cls) })
    }

    /// Mean QoI score restricted to a cell mask, for the corruption
    /// suppression diagnostic.
    pub fn mean_qoi_on(
        &self,
        scene: &Scene,
        mask: impl Fn(usize) -> bool,
    ) -> Result<f64> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        let features = self.voxel_features(&p, scene)?;
        let s = self.qoi_score(&p, features[0])?;
        let v = tape.value(s);
        let (mut acc, mut n) = (0.0, 0usize);
        for (cell, val) in v.data().iter().enumerate() {
            if mask(cell) {
                acc += val.as_f64();
                n += 1;
            }
        }
        Ok(if n == 0 { f64::NAN } else { acc / n as f64 })
    }
}

/// Naive early-fusion target used when the teacher is ablated: the plain
/// mean of the per-agent voxel feature maps, no quality weighting, no
/// semantics, no denoising.
pub fn naive_target<T: Scalar>(
    student: &crate::student::StudentModel<T>,
    scene: &Scene,
) -> Result<TensorData<T>> {
    let tape = Tape::new();
    let p = student.store.bind(&tape, false);
    let clouds = crate::student::clouds_in_ego_frame(scene);
    let mut acc: Option<TensorId> = None;
    for cloud in &clouds {
        let pillars = bev::voxelize::<T>(cloud, &student.grid, student.max_points_per_pillar)?;
        let f = bev::pillar_encode(
            &tape,
            &pillars,
            bev::PillarEncoderIds {
                w: p.id(student.pillar_weight()),
                b: p.id(student.pillar_bias()),
            },
        )?;
        acc = Some(match acc {
            None => f,
            Some(prev) => tape.add(prev, f)?,
        });
    }
    let mean = tape.scale(acc.expect("at least one agent"), 1.0 / clouds.len() as f64);
    Ok(tape.value(mean))
}
