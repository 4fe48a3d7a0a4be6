//! Condition encoders: 3D boxes and scene tags become fixed-layout token
//! streams (2 tag slots + 8 box slots, width 64) for each branch, with
//! visibility filtering and group dropout for classifier-free guidance.
//!
//! The range-branch encoder sees spherical corner coordinates and is
//! independent of any camera; the perspective encoder sees projected corner
//! coordinates for one camera and is independent of the LiDAR spec.

use crate::autodiff::{LinearMap, Scalar, Tensor, Var};
use crate::geometry::{cart_to_spherical, CameraParams, LidarSpec, Point3};
use crate::netblocks::{fourier_embed, Init, Mlp2, NetCtx, PId, ParamStore, TOKEN_WIDTH};
use crate::rng::CounterRng;
use crate::scenesim::{OrientedBox, SceneTags};
use std::sync::Arc;

/// Fourier levels per corner coordinate.
pub const FOURIER_L: usize = 6;
/// Tag slots followed by box slots.
pub const NUM_TAG_SLOTS: usize = 2;
pub const NUM_BOX_SLOTS: usize = 8;
pub const NUM_TOKENS: usize = NUM_TAG_SLOTS + NUM_BOX_SLOTS;

/// Corner feature width: 8 corners x 3 coords x 2L.
const CORNER_FEATS: usize = 8 * 3 * 2 * FOURIER_L;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Tag,
    Box(usize),
    Null,
}

/// Token stream for one branch (and one view, for the camera branch).
pub struct ConditionTokens {
    /// [NUM_TOKENS, 64] graph variable.
    pub tokens: Var,
    pub provenance: [Provenance; NUM_TOKENS],
}

impl ConditionTokens {
    pub fn validity(&self) -> [bool; NUM_TOKENS] {
        let mut out = [false; NUM_TOKENS];
        for (o, p) in out.iter_mut().zip(&self.provenance) {
            *o = *p != Provenance::Null;
        }
        out
    }
}

/// Parameters of one branch's condition encoder.
#[derive(Debug, Clone)]
pub struct BranchCond {
    mlp_p: Mlp2,
    mlp_b: Mlp2,
    categories: PId,
    brightness: PId,
    weather: PId,
    null: PId,
}

impl BranchCond {
    fn def<T: Scalar>(store: &mut ParamStore<T>, rng: &mut CounterRng, prefix: &str) -> Self {
        Self {
            mlp_p: Mlp2::def(
                store,
                rng,
                &format!("{prefix}.mlp_p"),
                CORNER_FEATS,
                TOKEN_WIDTH,
                TOKEN_WIDTH,
            ),
            mlp_b: Mlp2::def(
                store,
                rng,
                &format!("{prefix}.mlp_b"),
                2 * TOKEN_WIDTH,
                TOKEN_WIDTH,
                TOKEN_WIDTH,
            ),
            categories: store.def(
                &format!("{prefix}.categories"),
                &[4, TOKEN_WIDTH],
                Init::Normal(0.1),
                rng,
            ),
            brightness: store.def(
                &format!("{prefix}.brightness"),
                &[3, TOKEN_WIDTH],
                Init::Normal(0.1),
                rng,
            ),
            weather: store.def(
                &format!("{prefix}.weather"),
                &[2, TOKEN_WIDTH],
                Init::Normal(0.1),
                rng,
            ),
            null: store.def(
                &format!("{prefix}.null"),
                &[1, TOKEN_WIDTH],
                Init::Zeros,
                rng,
            ),
        }
    }

    fn embed_row<T: Scalar>(&self, ctx: &mut NetCtx<T>, table: PId, rows: usize, id: usize) -> Var {
        let t = ctx.p(table);
        ctx.g.gather(
            t,
            Arc::new(LinearMap {
                in_rows: rows,
                taps: vec![vec![(id as u32, 1.0)]],
            }),
        )
    }

    /// Corner features -> MLP_p -> combine with the category embedding.
    fn box_token<T: Scalar>(
        &self,
        ctx: &mut NetCtx<T>,
        corner_feats: Vec<f64>,
        category_id: usize,
    ) -> Var {
        let feats = ctx.constant(Tensor::from_vec(
            &[1, CORNER_FEATS],
            corner_feats.into_iter().map(T::from_f64).collect(),
        ));
        let h_p = self.mlp_p.forward(ctx, feats);
        let h_l = self.embed_row(ctx, self.categories, 4, category_id);
        let joint = ctx.g.concat_axis(h_l, h_p, 1);
        self.mlp_b.forward(ctx, joint)
    }

    /// One brightness token and one weather token, [2, 64].
    pub fn embed_tags<T: Scalar>(&self, ctx: &mut NetCtx<T>, tags: SceneTags) -> Var {
        let b = self.embed_row(ctx, self.brightness, 3, tags.brightness as usize);
        // Weather ids are 3/4 globally; the table has rows clear=0, fog=1.
        let w_id = tags.weather as usize - 3;
        let w = self.embed_row(ctx, self.weather, 2, w_id);
        ctx.g.concat_rows(&[b, w])
    }

    fn null_row<T: Scalar>(&self, ctx: &mut NetCtx<T>) -> Var {
        ctx.p(self.null)
    }
}

/// Both branch encoders.
#[derive(Debug, Clone)]
pub struct Conditioner {
    pub range: BranchCond,
    pub camera: BranchCond,
    /// Range/depth normalization bound for corner coordinates, meters.
    pub metric_cap: f64,
}

/// Spherical corner features for the range-view encoder: per corner,
/// Fourier embeddings of (r / r_max, theta / pi, phi / (pi/2)).
pub fn range_corner_features(b: &OrientedBox, spec: &LidarSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(CORNER_FEATS);
    for corner in b.corners() {
        let s = cart_to_spherical(corner);
        for x in [
            s.r / spec.r_max,
            s.theta / std::f64::consts::PI,
            s.phi / std::f64::consts::FRAC_PI_2,
        ] {
            out.extend(fourier_embed(x, FOURIER_L));
        }
    }
    out
}

/// Projected corner features for the perspective encoder: per corner,
/// Fourier embeddings of (u / W, v / H, d / d_max). Corners behind the
/// camera are depth-clamped to 1e-6 before projection so the token always
/// encodes all 8 corners.
pub fn perspective_corner_features(b: &OrientedBox, cam: &CameraParams, d_max: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(CORNER_FEATS);
    for corner in b.corners() {
        let pc = cam.rotation.mul_vec(corner).add(Point3::new(
            cam.translation[0],
            cam.translation[1],
            cam.translation[2],
        ));
        let d = pc.z.max(1e-6);
        let u = cam.fx * pc.x / d + cam.cx;
        let v = cam.fy * pc.y / d + cam.cy;
        for x in [u / cam.width as f64, v / cam.height as f64, d / d_max] {
            out.extend(fourier_embed(x, FOURIER_L));
        }
    }
    out
}

/// Keep a box iff at least one corner projects validly into the camera.
pub fn visible_boxes_for_view(boxes: &[OrientedBox], cam: &CameraParams) -> Vec<usize> {
    boxes
        .iter()
        .enumerate()
        .filter(|(_, b)| {
            b.corners()
                .iter()
                .any(|&c| crate::geometry::project_to_camera(c, cam).valid)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Keep a box iff at least one corner is within LiDAR range.
pub fn boxes_in_lidar_range(boxes: &[OrientedBox], spec: &LidarSpec) -> Vec<usize> {
    boxes
        .iter()
        .enumerate()
        .filter(|(_, b)| b.corners().iter().any(|&c| cart_to_spherical(c).r <= spec.r_max))
        .map(|(i, _)| i)
        .collect()
}

/// Group-dropout decisions for one sample: two independent draws.
pub fn drop_draws(rng: &mut CounterRng, rate: f64) -> (bool, bool) {
    debug_assert!((0.0..=1.0).contains(&rate));
    let tags = rng.uniform() < rate;
    let boxes = rng.uniform() < rate;
    (tags, boxes)
}

impl Conditioner {
    pub fn def<T: Scalar>(store: &mut ParamStore<T>, rng: &mut CounterRng, metric_cap: f64) -> Self {
        Self {
            range: BranchCond::def(store, rng, "cond.r"),
            camera: BranchCond::def(store, rng, "cond.c"),
            metric_cap,
        }
    }

    fn assemble<T: Scalar>(
        &self,
        ctx: &mut NetCtx<T>,
        branch: &BranchCond,
        tags: Option<SceneTags>,
        box_tokens: Vec<Var>,
        box_ids: &[usize],
    ) -> ConditionTokens {
        let null = branch.null_row(ctx);
        let mut provenance = [Provenance::Null; NUM_TOKENS];
        let mut rows: Vec<Var> = Vec::with_capacity(4 + NUM_BOX_SLOTS);
        match tags {
            Some(t) => {
                rows.push(branch.embed_tags(ctx, t));
                provenance[0] = Provenance::Tag;
                provenance[1] = Provenance::Tag;
            }
            None => {
                rows.push(null);
                rows.push(null);
            }
        }
        for (slot, token) in box_tokens.iter().enumerate().take(NUM_BOX_SLOTS) {
            rows.push(*token);
            provenance[NUM_TAG_SLOTS + slot] = Provenance::Box(box_ids[slot]);
        }
        for _ in box_tokens.len()..NUM_BOX_SLOTS {
            rows.push(null);
        }
        let tokens = ctx.g.concat_rows(&rows);
        debug_assert_eq!(ctx.g.shape(tokens), &[NUM_TOKENS, TOKEN_WIDTH]);
        ConditionTokens { tokens, provenance }
    }

    /// Token stream for the range branch. `drop` = (drop_tags, drop_boxes).
    pub fn range_tokens<T: Scalar>(
        &self,
        ctx: &mut NetCtx<T>,
        boxes: &[OrientedBox],
        tags: SceneTags,
        spec: &LidarSpec,
        drop: (bool, bool),
    ) -> ConditionTokens {
        let ids = if drop.1 {
            Vec::new()
        } else {
            boxes_in_lidar_range(boxes, spec)
        };
        let toks: Vec<Var> = ids
            .iter()
            .take(NUM_BOX_SLOTS)
            .map(|&i| {
                let feats = range_corner_features(&boxes[i], spec);
                self.range.box_token(ctx, feats, boxes[i].category as usize)
            })
            .collect();
        let ids: Vec<usize> = ids.into_iter().take(NUM_BOX_SLOTS).collect();
        let tags_opt = (!drop.0).then_some(tags);
        self.assemble(ctx, &self.range, tags_opt, toks, &ids)
    }

    /// Token stream for one camera view.
    pub fn camera_tokens<T: Scalar>(
        &self,
        ctx: &mut NetCtx<T>,
        boxes: &[OrientedBox],
        tags: SceneTags,
        cam: &CameraParams,
        drop: (bool, bool),
    ) -> ConditionTokens {
        let ids = if drop.1 {
            Vec::new()
        } else {
            visible_boxes_for_view(boxes, cam)
        };
        let toks: Vec<Var> = ids
            .iter()
            .take(NUM_BOX_SLOTS)
            .map(|&i| {
                let feats = perspective_corner_features(&boxes[i], cam, self.metric_cap);
                self.camera.box_token(ctx, feats, boxes[i].category as usize)
            })
            .collect();
        let ids: Vec<usize> = ids.into_iter().take(NUM_BOX_SLOTS).collect();
        let tags_opt = (!drop.0).then_some(tags);
        self.assemble(ctx, &self.camera, tags_opt, toks, &ids)
    }

    /// The all-null stream used as the classifier-free-guidance null pass.
    pub fn null_tokens<T: Scalar>(&self, ctx: &mut NetCtx<T>, camera: bool) -> ConditionTokens {
        let branch = if camera { &self.camera } else { &self.range };
        let null = branch.null_row(ctx);
        let rows: Vec<Var> = (0..NUM_TOKENS).map(|_| null).collect();
        let tokens = ctx.g.concat_rows(&rows);
        ConditionTokens {
            tokens,
            provenance: [Provenance::Null; NUM_TOKENS],
        }
    }
}
