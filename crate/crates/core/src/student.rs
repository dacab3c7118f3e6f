//! Dual-branch denoising student.
//!
//! The local branch refines the noisy latent under an ego-derived condition;
//! the cooperative branch decouples the ego map into confident/uncertain
//! parts, gathers collaborator evidence through deformable attention, keeps
//! the top-k most informative positions, and conditions its own GCM stack on
//! them. An ego-guided cross-attention decoder fuses the two streams; a 1x1
//! readout emits the noise estimate and its log-variance, and the detection
//! head runs on the fused map.

use std::cell::RefCell;

use crate::bev::{self, CompressorIds, GridSpec, Pillars};
use crate::blocks::{
    positional_encoding_2d, ChannelNorm, Conv2d, GcmBlock, Init, LinearLayer, ParamStore,
    BoundParams, TimeEmbed,
};
use crate::diffusion::{sample, DiffusionSchedule};
use crate::numerics::{lit, Scalar, Tape, TensorData, TensorId};
use crate::rng::SeedTree;
use crate::scene::{transform_points, wrap_angle, BevBox, Scene};
use crate::{Error, Result};

pub const DEFORM_POINTS: usize = 4;
pub const ENCODER_LEVELS: usize = 3;
pub const ANCHORS_PER_CELL: usize = 2;
pub const ANCHOR_W: f64 = 2.0;
pub const ANCHOR_L: f64 = 4.5;
pub const ANCHOR_YAWS: [f64; ANCHORS_PER_CELL] = [0.0, std::f64::consts::FRAC_PI_2];
pub const BOX_PARAMS: usize = 5;

/// Which architectural components are active (Table-style toggles).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    /// Gated-conditional-modulation diffusion; off = plain feed-forward
    /// conditioning without a denoising chain.
    pub gcm: bool,
    /// Cooperative branch (CDA + selection); off = local stream only.
    pub coop: bool,
    /// Teacher supervision during training (targets + distillation).
    pub teacher: bool,
    /// Cross-attention decoder; off = static convolutional fusion.
    pub egca: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { gcm: true, coop: true, teacher: true, egca: true }
    }
}

/// Anchor at a given cell: fixed footprint, two yaw hypotheses.
pub fn anchor_box(grid: &GridSpec, i: usize, j: usize, a: usize) -> BevBox {
    let (cx, cy) = grid.cell_center(i, j);
    BevBox::gt(cx, cy, ANCHOR_W, ANCHOR_L, ANCHOR_YAWS[a])
}

/// Box -> regression target relative to an anchor.
pub fn encode_box(gt: &BevBox, anchor: &BevBox) -> [f64; BOX_PARAMS] {
    let diag = (anchor.w * anchor.w + anchor.l * anchor.l).sqrt();
    [
        (gt.cx - anchor.cx) / diag,
        (gt.cy - anchor.cy) / diag,
        (gt.w / anchor.w).ln(),
        (gt.l / anchor.l).ln(),
        wrap_angle(gt.yaw - anchor.yaw),
    ]
}

/// Regression output -> box; exact inverse of [`encode_box`] for yaw in
/// (-pi, pi] (the residual is wrapped through sin/cos).
pub fn decode_box(delta: &[f64], anchor: &BevBox, score: f64) -> BevBox {
    let diag = (anchor.w * anchor.w + anchor.l * anchor.l).sqrt();
    let yaw = anchor.yaw + delta[4].sin().atan2(delta[4].cos());
    BevBox::detection(
        anchor.cx + delta[0] * diag,
        anchor.cy + delta[1] * diag,
        anchor.w * delta[2].exp(),
        anchor.l * delta[3].exp(),
        yaw,
        score,
    )
}

/// Detection head: shared 3x3 conv, then 1x1 classification and regression.
#[derive(Debug, Clone, Copy)]
pub struct DetectionHead {
    pub shared: Conv2d,
    pub cls: Conv2d,
    pub reg: Conv2d,
}

impl DetectionHead {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, c: usize) -> Self {
        Self {
            shared: Conv2d::same3x3(init, &format!("{name}.shared"), c, c),
            cls: Conv2d::pointwise(init, &format!("{name}.cls"), c, ANCHORS_PER_CELL),
            reg: Conv2d::pointwise(init, &format!("{name}.reg"), c, ANCHORS_PER_CELL * BOX_PARAMS),
        }
    }

    /// Returns `(cls_logits: H x W x A, box_deltas: H x W x A*5)`.
    pub fn apply<T: Scalar>(
        &self,
        p: &BoundParams<T>,
        x: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        let h = p.tape.relu(self.shared.apply(p, x)?);
        Ok((self.cls.apply(p, h)?, self.reg.apply(p, h)?))
    }
}

/// Decodes head outputs into scored boxes with rotated NMS.
///
/// Ordering is deterministic: score descending, anchor index ascending.
pub fn decode_detections<T: Scalar>(
    cls_logits: &TensorData<T>,
    box_deltas: &TensorData<T>,
    grid: &GridSpec,
    score_thresh: f64,
    nms_iou: f64,
) -> Vec<BevBox> {
    let mut candidates: Vec<(f64, usize, BevBox)> = Vec::new();
    let mut flat = 0usize;
    for i in 0..grid.h {
        for j in 0..grid.w {
            for a in 0..ANCHORS_PER_CELL {
                let logit = cls_logits.at3(i, j, a).as_f64();
                let score = 1.0 / (1.0 + (-logit).exp());
                flat += 1;
                if score < score_thresh {
                    continue;
                }
                let base = a * BOX_PARAMS;
                let delta: Vec<f64> = (0..BOX_PARAMS)
                    .map(|k| box_deltas.at3(i, j, base + k).as_f64())
                    .collect();
                let anchor = anchor_box(grid, i, j, a);
                candidates.push((score, flat - 1, decode_box(&delta, &anchor, score)));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1))
    });
    let mut kept: Vec<BevBox> = Vec::new();
    'cand: for (_, _, cand) in candidates {
        for k in &kept {
            let inter = cand.intersection_area(k);
            let union = cand.area() + k.area() - inter;
            if union > 0.0 && inter / union > nms_iou {
                continue 'cand;
            }
        }
        kept.push(cand);
    }
    kept
}

/// Scene features that do not depend on the diffusion step: encoded ego map,
/// decompressed+warped collaborator maps, cooperative context, offsets,
/// deformable attention output and its top-k selection.
pub struct SceneCache {
    pub f_i: TensorId,
    pub f_conf: TensorId,
    pub f_unc: TensorId,
    /// None when there are no collaborators (empty-aggregate convention).
    pub coop: Option<CoopCache>,
}

pub struct CoopCache {
    pub f_ctx: TensorId,
    pub f_coop: TensorId,
    pub f_coop_sparse: TensorId,
    pub m_logits: TensorId,
    /// Row-major kept-position mask (1 = kept).
    pub keep_mask: TensorData<f64>,
    pub kept: usize,
}

/// The student network parameters.
pub struct StudentModel<T: Scalar> {
    pub grid: GridSpec,
    pub flags: AblationFlags,
    pub n_agents: usize,
    pub selection_ratio: f64,
    pub max_points_per_pillar: usize,
    pub store: ParamStore<T>,
    w: Wiring,
}

struct Wiring {
    pillar: LinearLayer,
    compressor: Option<CompressorWiring>,
    phi_local: Conv2d,
    t_embed: TimeEmbed,
    local_gcm: Vec<GcmBlock>,
    local_plain: Vec<Conv2d>,
    conf_h: Conv2d,
    conf_m: Conv2d,
    coop: Option<CoopWiring>,
    decoder: DecoderWiring,
    readout: Option<Conv2d>,
    head: DetectionHead,
}

struct CompressorWiring {
    enc: Conv2d,
    dec: Conv2d,
}

struct CoopWiring {
    phi_coop: Conv2d,
    agg: Conv2d,
    offs_a: Conv2d,
    offs_b: Conv2d,
    offs_fuse: Conv2d,
    c_q: Conv2d,
    a_lin: LinearLayer,
    v_lin: LinearLayer,
    sel: Conv2d,
    cond_fuse: Vec<Conv2d>,
    gcm: Vec<GcmBlock>,
    plain: Vec<Conv2d>,
}

enum DecoderWiring {
    Egca(Vec<EgcaLevel>),
    Fuse(Vec<Conv2d>),
}

#[derive(Debug, Clone, Copy)]
struct EgcaLevel {
    q: LinearLayer,
    k: LinearLayer,
    v: LinearLayer,
    norm: ChannelNorm,
}

impl<T: Scalar> StudentModel<T> {
    pub fn new(
        grid: GridSpec,
        n_agents: usize,
        selection_ratio: f64,
        flags: AblationFlags,
        seeds: &SeedTree,
    ) -> Result<Self> {
        if !(selection_ratio > 0.0 && selection_ratio <= 1.0) {
            return Err(Error::Config(format!("selection ratio {} outside (0, 1]", selection_ratio)));
        }
        let c = grid.c;
        let cc = bev::compressed_channels(c)?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seeds.child("student-init", &[]));
        let i = &mut init;

        let pillar = LinearLayer::new(i, "stu.pillar", bev::POINT_FEATURES, c);
        let compressor = (n_agents > 1).then(|| CompressorWiring {
            enc: Conv2d::pointwise(i, "stu.compress.enc", c, cc),
            dec: Conv2d::pointwise(i, "stu.compress.dec", cc, c),
        });
        let phi_local = Conv2d::same3x3(i, "stu.phi_local", c, c);
        let t_embed = TimeEmbed::new(i, "stu.t_embed", c);

        let (local_gcm, local_plain) = if flags.gcm {
            ((0..ENCODER_LEVELS).map(|l| GcmBlock::new(i, &format!("stu.local.gcm{l}"), c)).collect(), Vec::new())
        } else {
            (Vec::new(), (0..ENCODER_LEVELS).map(|l| Conv2d::same3x3(i, &format!("stu.local.plain{l}"), c, c)).collect())
        };

        let conf_h = Conv2d::pointwise(i, "stu.conf.hidden", c, c);
        let conf_m = Conv2d::pointwise(i, "stu.conf.mask", c, 1);

        let coop = (flags.coop && n_agents > 1).then(|| CoopWiring {
            phi_coop: Conv2d::same3x3(i, "stu.coop.phi", c, c),
            agg: Conv2d::pointwise(i, "stu.coop.agg", (n_agents - 1) * c, c),
            offs_a: Conv2d::same3x3(i, "stu.coop.offs_a", c, c),
            offs_b: Conv2d::same3x3(i, "stu.coop.offs_b", c, c),
            offs_fuse: Conv2d::zeroed(i, "stu.coop.offs_fuse", 3, 3, 2 * c, DEFORM_POINTS * 2),
            c_q: Conv2d::pointwise(i, "stu.coop.q", 2 * c, c),
            a_lin: LinearLayer::new(i, "stu.coop.attn", c, DEFORM_POINTS),
            v_lin: LinearLayer::new(i, "stu.coop.value", c, c),
            sel: Conv2d::same3x3(i, "stu.coop.sel", c, 1),
            cond_fuse: (0..ENCODER_LEVELS)
                .map(|l| Conv2d::pointwise(i, &format!("stu.coop.cond_fuse{l}"), 2 * c, c))
                .collect(),
            gcm: if flags.gcm {
                (0..ENCODER_LEVELS).map(|l| GcmBlock::new(i, &format!("stu.coop.gcm{l}"), c)).collect()
            } else {
                Vec::new()
            },
            plain: if flags.gcm {
                Vec::new()
            } else {
                (0..ENCODER_LEVELS).map(|l| Conv2d::same3x3(i, &format!("stu.coop.plain{l}"), c, c)).collect()
            },
        });

        let decoder = if flags.egca {
            DecoderWiring::Egca(
                (0..ENCODER_LEVELS)
                    .map(|l| EgcaLevel {
                        q: LinearLayer::new(i, &format!("stu.dec{l}.q"), c, c),
                        k: LinearLayer::new(i, &format!("stu.dec{l}.k"), c, c),
                        v: LinearLayer::new(i, &format!("stu.dec{l}.v"), c, c),
                        norm: ChannelNorm::new(i, &format!("stu.dec{l}.norm"), c),
                    })
                    .collect(),
            )
        } else {
            DecoderWiring::Fuse(
                (0..ENCODER_LEVELS)
                    .map(|l| Conv2d::pointwise(i, &format!("stu.dec{l}.fuse"), 2 * c, c))
                    .collect(),
            )
        };

        let readout = flags.gcm.then(|| Conv2d::pointwise(i, "stu.readout", c, 2 * c));
        let head = DetectionHead::new(i, "stu.head", c);

        Ok(Self {
            grid,
            flags,
            n_agents,
            selection_ratio,
            max_points_per_pillar: 16,
            store,
            w: Wiring {
                pillar,
                compressor,
                phi_local,
                t_embed,
                local_gcm,
                local_plain,
                conf_h,
                conf_m,
                coop,
                decoder,
                readout,
                head,
            },
        })
    }

    pub fn pillar_weight(&self) -> crate::blocks::ParamId {
        self.w.pillar.w
    }

    pub fn pillar_bias(&self) -> crate::blocks::ParamId {
        self.w.pillar.b
    }

    /// Voxelizes every agent's (possibly corrupted) cloud: the ego on its own
    /// grid, collaborators on their local grids before transmission.
    pub fn voxelize_scene(&self, scene: &Scene) -> Result<Vec<Pillars<T>>> {
        scene
            .agents
            .iter()
            .map(|a| bev::voxelize::<T>(&a.cloud, &self.grid, self.max_points_per_pillar))
            .collect()
    }

    /// Builds the t-independent scene features on `tape`.
    pub fn scene_cache(
        &self,
        p: &BoundParams<T>,
        scene: &Scene,
        pillars: &[Pillars<T>],
        selection_ratio: f64,
    ) -> Result<SceneCache> {
        let tape = p.tape;
        let (h, w, c) = (self.grid.h, self.grid.w, self.grid.c);
        let f_i = bev::pillar_encode(
            tape,
            &pillars[0],
            bev::PillarEncoderIds { w: p.id(self.w.pillar.w), b: p.id(self.w.pillar.b) },
        )?;

        // Confidence decoupling of the ego map.
        let hidden = tape.relu(self.w.conf_h.apply(p, f_i)?);
        let m = tape.sigmoid(self.w.conf_m.apply(p, hidden)?);
        let f_conf = tape.mul(m, f_i)?;
        let f_unc = tape.sub(f_i, f_conf)?;

        let coop_wiring = match (&self.w.coop, scene.agents.len() > 1) {
            (Some(cw), true) => cw,
            _ => {
                return Ok(SceneCache { f_i, f_conf, f_unc, coop: None });
            }
        };

        // Collaborator maps: encode in their own frame, compress 16x for
        // transmission, decompress, then warp onto the ego grid.
        let comp = self.w.compressor.as_ref().expect("compressor exists with collaborators");
        let comp_ids = CompressorIds {
            enc_w: p.id(comp.enc.w),
            enc_b: p.id(comp.enc.b),
            dec_w: p.id(comp.dec.w),
            dec_b: p.id(comp.dec.b),
        };
        let mut warped: Vec<TensorId> = Vec::new();
        for (ai, pil) in pillars.iter().enumerate().skip(1) {
            let f_j = bev::pillar_encode(
                tape,
                pil,
                bev::PillarEncoderIds { w: p.id(self.w.pillar.w), b: p.id(self.w.pillar.b) },
            )?;
            let sent = bev::compress(tape, f_j, comp_ids)?;
            let received = bev::decompress(tape, sent, comp_ids)?;
            let idx = bev::warp_index_map(&self.grid, &scene.agents[0].pose, &scene.agents[ai].pose);
            let rows = tape.reshape(received, vec![h * w, c])?;
            let gathered = tape.gather_rows(rows, &idx)?;
            warped.push(tape.reshape(gathered, vec![h, w, c])?);
        }

        // Cooperative context: channel-aligned collaborator stack gated by
        // the ego's uncertain component.
        let mut stack = tape.relu(coop_wiring.phi_coop.apply(p, warped[0])?);
        for &other in &warped[1..] {
            let mapped = tape.relu(coop_wiring.phi_coop.apply(p, other)?);
            stack = tape.concat_last(stack, mapped)?;
        }
        let aligned = coop_wiring.agg.apply(p, stack)?;
        let f_ctx = tape.mul(aligned, f_unc)?;

        // Offsets from both sources, fused; attention weights from the query.
        let oa = tape.relu(coop_wiring.offs_a.apply(p, f_conf)?);
        let ob = tape.relu(coop_wiring.offs_b.apply(p, f_ctx)?);
        let offsets = coop_wiring.offs_fuse.apply(p, tape.concat_last(oa, ob)?)?;
        let q_in = tape.concat_last(f_conf, f_ctx)?;
        let q = coop_wiring.c_q.apply(p, q_in)?;
        let q_rows = tape.reshape(q, vec![h * w, c])?;
        let a_logits = coop_wiring.a_lin.apply(p, q_rows)?;
        let a_weights = tape.softmax(a_logits, 1)?;

        let f_coop = self.cda(p, coop_wiring, f_ctx, offsets, a_weights)?;

        // Selection head and top-k sparsification.
        let m_logits = coop_wiring.sel.apply(p, f_coop)?;
        let m_scores = tape.value(tape.sigmoid(m_logits));
        let kept = (selection_ratio * (h * w) as f64).ceil() as usize;
        let keep_mask = top_k_mask(m_scores.data(), kept);
        let mask_t = TensorData::<T>::from_fn(vec![h, w, 1], |k| lit::<T>(keep_mask.data()[k]));
        let mask_id = tape.constant(mask_t);
        let f_coop_sparse = tape.mul(f_coop, mask_id)?;

        Ok(SceneCache {
            f_i,
            f_conf,
            f_unc,
            coop: Some(CoopCache { f_ctx, f_coop, f_coop_sparse, m_logits, keep_mask, kept }),
        })
    }

    /// Deformable attention: K weighted bilinear samples of the projected
    /// context per query cell.
    fn cda(
        &self,
        p: &BoundParams<T>,
        cw: &CoopWiring,
        f_ctx: TensorId,
        offsets: TensorId,
        a_weights: TensorId,
    ) -> Result<TensorId> {
        let tape = p.tape;
        let (h, w, c) = (self.grid.h, self.grid.w, self.grid.c);
        let ctx_rows = tape.reshape(f_ctx, vec![h * w, c])?;
        let v_rows = cw.v_lin.apply(p, ctx_rows)?;
        let v_map = tape.reshape(v_rows, vec![h, w, c])?;
        // Reference points: cell (i, j) sits at sample coordinate (x=j, y=i).
        let refs = TensorData::<T>::from_fn(vec![h * w, 2], |k| {
            let q = k / 2;
            lit::<T>(if k % 2 == 0 { (q % w) as f64 } else { (q / w) as f64 })
        });
        let refs = tape.constant(refs);
        let mut acc: Option<TensorId> = None;
        for k in 0..DEFORM_POINTS {
            let off_k = tape.slice_last(offsets, 2 * k, 2 * k + 2)?;
            let off_rows = tape.reshape(off_k, vec![h * w, 2])?;
            let pts = tape.add(refs, off_rows)?;
            let sampled = tape.bilinear_sample(v_map, pts)?;
            let wk = tape.slice_last(a_weights, k, k + 1)?;
            let weighted = tape.mul(sampled, wk)?;
            acc = Some(match acc {
                None => weighted,
                Some(prev) => tape.add(prev, weighted)?,
            });
        }
        tape.reshape(acc.expect("at least one sampling point"), vec![h, w, c])
    }

    /// One denoiser evaluation at step `t`: refines `x_t` through both
    /// branches and decodes. Returns the noise estimate (None when the
    /// diffusion mechanism is ablated) plus the fused map and head outputs.
    pub fn denoise_once(
        &self,
        p: &BoundParams<T>,
        cache: &SceneCache,
        x_t: Option<TensorId>,
        t: usize,
    ) -> Result<StudentPass> {
        let tape = p.tape;
        let (h, w, c) = (self.grid.h, self.grid.w, self.grid.c);

        // Level-0 local condition: phi_local(F_i) (+) gamma(t).
        let mut c_loc = self.w.phi_local.apply(p, cache.f_i)?;
        if self.flags.gcm {
            let gamma = self.w.t_embed.embed(p, t)?;
            c_loc = tape.add(c_loc, gamma)?;
        }

        let (x_loc, c_levels) = if self.flags.gcm {
            let x_t = x_t.expect("diffusion enabled requires a latent");
            let mut levels = vec![c_loc];
            let mut x = x_t;
            let mut cond = c_loc;
            for block in &self.w.local_gcm {
                let (xn, cn) = block.apply(p, x, cond)?;
                x = xn;
                cond = cn;
                levels.push(cond);
            }
            (x, levels)
        } else {
            let mut f = c_loc;
            let mut levels = vec![c_loc];
            for conv in &self.w.local_plain {
                f = tape.relu(conv.apply(p, f)?);
                levels.push(f);
            }
            (f, levels)
        };

        let x_coop = match (&self.w.coop, &cache.coop) {
            (Some(cw), Some(cc)) => {
                let mut x = if self.flags.gcm { x_t.unwrap() } else { cc.f_coop_sparse };
                for l in 0..ENCODER_LEVELS {
                    let cond_in = tape.concat_last(cc.f_coop_sparse, c_levels[l])?;
                    let cond = cw.cond_fuse[l].apply(p, cond_in)?;
                    if self.flags.gcm {
                        let (xn, _) = cw.gcm[l].apply(p, x, cond)?;
                        x = xn;
                    } else {
                        let fused = tape.add(x, cond)?;
                        x = tape.relu(cw.plain[l].apply(p, fused)?);
                    }
                }
                Some(x)
            }
            _ => None,
        };

        let f_att = match &self.w.decoder {
            DecoderWiring::Egca(levels) => {
                let pos = tape.constant(positional_encoding_2d::<T>(h, w, c));
                let loc_rows = tape.reshape(x_loc, vec![h * w, c])?;
                let coop_rows = match x_coop {
                    Some(xc) => Some(tape.reshape(xc, vec![h * w, c])?),
                    None => None,
                };
                let mut d = loc_rows;
                for level in levels {
                    d = egca_attend(p, *level, d, loc_rows, coop_rows, pos, c)?;
                }
                tape.reshape(d, vec![h, w, c])?
            }
            DecoderWiring::Fuse(levels) => {
                let mut d = x_loc;
                let other = x_coop.unwrap_or(x_loc);
                for conv in levels {
                    let fused = conv.apply(p, tape.concat_last(d, other)?)?;
                    d = tape.add(d, tape.relu(fused))?;
                }
                d
            }
        };

        let (eps_hat, log_var) = match &self.w.readout {
            Some(conv) => {
                let out = conv.apply(p, f_att)?;
                (Some(tape.slice_last(out, 0, c)?), Some(tape.slice_last(out, c, 2 * c)?))
            }
            None => (None, None),
        };
        let (cls, reg) = self.w.head.apply(p, f_att)?;
        Ok(StudentPass { eps_hat, log_var, f_att, cls, reg })
    }

    /// Full inference on a (possibly corrupted) scene.
    ///
    /// With diffusion enabled this runs `steps` DDIM updates from seeded
    /// noise, re-evaluating the dual-branch denoiser each step; the final
    /// fused map feeds the detection head. `on_state` sees every latent.
    pub fn infer(
        &self,
        scene: &Scene,
        sched: &DiffusionSchedule,
        steps: usize,
        seed: u64,
        score_thresh: f64,
        nms_iou: f64,
        mut on_state: impl FnMut(usize, &TensorData<T>),
    ) -> Result<StudentInference> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        let pillars = self.voxelize_scene(scene)?;
        let cache = self.scene_cache(&p, scene, &pillars, self.selection_ratio)?;
        let (h, w, c) = (self.grid.h, self.grid.w, self.grid.c);

        let last: RefCell<Option<(TensorId, TensorId)>> = RefCell::new(None);
        if self.flags.gcm {
            sample::<T>(
                vec![h, w, c],
                steps,
                seed,
                sched,
                |x_t, t| {
                    let x_id = tape.constant(x_t.clone());
                    let pass = self.denoise_once(&p, &cache, Some(x_id), t)?;
                    *last.borrow_mut() = Some((pass.cls, pass.reg));
                    Ok(tape.value(pass.eps_hat.expect("gcm readout")))
                },
                &mut on_state,
            )?;
        } else {
            let pass = self.denoise_once(&p, &cache, None, 0)?;
            *last.borrow_mut() = Some((pass.cls, pass.reg));
        }
        let (cls, reg) = last.into_inner().expect("at least one denoiser evaluation");
        let (cls_v, reg_v) = (tape.value(cls), tape.value(reg));
        let boxes = decode_detections(&cls_v, &reg_v, &self.grid, score_thresh, nms_iou);
        Ok(StudentInference {
            boxes,
            coop_active: cache.coop.is_some(),
        })
    }
}

/// Outputs of one denoiser evaluation.
pub struct StudentPass {
    pub eps_hat: Option<TensorId>,
    pub log_var: Option<TensorId>,
    pub f_att: TensorId,
    pub cls: TensorId,
    pub reg: TensorId,
}

pub struct StudentInference {
    pub boxes: Vec<BevBox>,
    pub coop_active: bool,
}

/// Single EGCA application: queries from the decoder stream, keys/values
/// from the local tokens plus (when present) the cooperative tokens, shared
/// projections, positional encoding added to queries and keys only.
fn egca_attend<T: Scalar>(
    p: &BoundParams<T>,
    level: EgcaLevel,
    d: TensorId,
    loc_rows: TensorId,
    coop_rows: Option<TensorId>,
    pos: TensorId,
    c: usize,
) -> Result<TensorId> {
    let tape = p.tape;
    let q = tape.add(level.q.apply(p, d)?, pos)?;
    let k_loc = tape.add(level.k.apply(p, loc_rows)?, pos)?;
    let v_loc = level.v.apply(p, loc_rows)?;
    let (keys, values) = match coop_rows {
        Some(cr) => {
            let k_coop = tape.add(level.k.apply(p, cr)?, pos)?;
            let v_coop = level.v.apply(p, cr)?;
            (tape.concat_rows(k_loc, k_coop)?, tape.concat_rows(v_loc, v_coop)?)
        }
        None => (k_loc, v_loc),
    };
    let scores = tape.scale(tape.matmul(q, tape.transpose2d(keys)?)?, 1.0 / (c as f64).sqrt());
    let attn = tape.softmax(scores, 1)?;
    let out = tape.matmul(attn, values)?;
    let res = tape.add(d, out)?;
    level.norm.apply_rows(p, res)
}

/// Top-k mask over row-major scores; ties keep the lower index.
pub fn top_k_mask(scores: &[impl Scalar], k: usize) -> TensorData<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap().then_with(|| a.cmp(&b))
    });
    let mut mask = vec![0.0; scores.len()];
    for &i in order.iter().take(k.min(scores.len())) {
        mask[i] = 1.0;
    }
    TensorData::new(vec![scores.len()], mask).expect("mask shape")
}

impl ChannelNorm {
    /// Norm over token rows (N x C): same statistics as the spatial form.
    pub fn apply_rows<T: Scalar>(&self, p: &BoundParams<T>, x: TensorId) -> Result<TensorId> {
        let tape = p.tape;
        let mu = tape.mean_prefix(x, 1)?;
        let centered = tape.sub(x, mu)?;
        let var = tape.mean_prefix(tape.mul(centered, centered)?, 1)?;
        let std = tape.sqrt(tape.add_scalar(var, crate::blocks::NORM_EPS));
        let normed = tape.div(centered, std)?;
        tape.add(tape.mul(normed, p.id(self.gamma))?, p.id(self.beta))
    }
}

/// Corrupts every agent of a scene in place (evaluation-time helper).
pub fn corrupt_scene(
    scene: &Scene,
    kind: crate::scene::CorruptionKind,
    severity: u8,
    seeds: &SeedTree,
) -> Result<Scene> {
    let mut out = scene.clone();
    for (ai, agent) in out.agents.iter_mut().enumerate() {
        let seed = seeds
            .child("corruption", &[scene.seed, ai as u64, kind as u64, severity as u64])
            .root();
        agent.cloud = crate::scene::corrupt(&agent.cloud, kind, severity, seed)?;
    }
    Ok(out)
}

/// Transforms all collaborator clouds into the ego frame (teacher-side early
/// fusion input).
pub fn clouds_in_ego_frame(scene: &Scene) -> Vec<crate::scene::PointCloud> {
    let ego = scene.agents[0].pose;
    scene
        .agents
        .iter()
        .map(|a| transform_points(&a.cloud, &a.pose, &ego))
        .collect()
}
