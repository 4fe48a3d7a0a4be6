//! The two branch denoisers. One UNet definition serves both branches:
//! the range branch runs it on a single panoramic latent grid with circular
//! horizontal convolutions, the camera branch runs it on all views in
//! lockstep with shared weights plus inter-view attention.
//!
//! The forward pass is staged so a driver can interleave cross-modality
//! exchanges: stages 0..=4 each end at one exchange site (two down levels,
//! mid, two up levels), stage 5 is the output head.

use super::blocks::{
    cross_attention, gated_residual, AttnParams, Conv, GateParam, Mlp2, NetCtx, NormParams,
    ResBlock, TOKEN_WIDTH,
};
use super::store::ParamStore;
use crate::autodiff::{ConvOpts, Scalar, Tensor, Var};
use crate::rng::CounterRng;

/// Timestep Fourier feature width (L = 32 pairs).
pub const TEMB_WIDTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Range,
    Camera,
}

/// Fourier features of a timestep, mapped to [-1, 1] over the schedule.
pub fn timestep_features<T: Scalar>(t: usize, total: usize) -> Tensor<T> {
    let x = 2.0 * (t as f64 / total as f64) - 1.0;
    super::blocks::fourier_embed_rows(&[x], TEMB_WIDTH / 2)
}

#[derive(Debug, Clone)]
struct Level {
    r0: ResBlock,
    r1: ResBlock,
    cond: AttnParams,
    temb: Mlp2,
    interview: Option<(AttnParams, GateParam)>,
    ch: usize,
}

impl Level {
    #[allow(clippy::too_many_arguments)]
    fn def<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        name: &str,
        cin: usize,
        ch: usize,
        wrap: bool,
        interview: bool,
    ) -> Self {
        Self {
            r0: ResBlock::def(store, rng, &format!("{name}.r0"), cin, ch, wrap),
            r1: ResBlock::def(store, rng, &format!("{name}.r1"), ch, ch, wrap),
            cond: AttnParams::def(store, rng, &format!("{name}.cond"), ch, TOKEN_WIDTH),
            temb: Mlp2::def(store, rng, &format!("{name}.temb"), TEMB_WIDTH, TEMB_WIDTH, ch),
            interview: interview.then(|| {
                (
                    AttnParams::def(store, rng, &format!("{name}.iv"), ch, ch),
                    GateParam::def(store, rng, &format!("{name}.iv.gate")),
                )
            }),
            ch,
        }
    }

    /// Applies the level to every view. `cond_tokens[v]` is the [N, 64]
    /// token matrix for view v (one entry for the range branch).
    fn forward<T: Scalar>(
        &self,
        ctx: &mut NetCtx<T>,
        views: Vec<Var>,
        t_feat: Var,
        cond_tokens: &[Var],
    ) -> Vec<Var> {
        let temb_row = self.temb.forward(ctx, t_feat); // [1, ch]
        let temb = ctx.g.reshape(temb_row, &[self.ch]);
        let mut out = Vec::with_capacity(views.len());
        for (v, &x) in views.iter().enumerate() {
            let h = self.r0.forward(ctx, x, Some(temb));
            let h = self.r1.forward(ctx, h, Some(temb));
            let shape = ctx.g.shape(h).to_vec();
            let cells = shape[0] * shape[1];
            let flat = ctx.g.reshape(h, &[cells, self.ch]);
            let attn = cross_attention(ctx, flat, cond_tokens[v], &self.cond, None);
            let merged = ctx.g.add(flat, attn);
            out.push(ctx.g.reshape(merged, &shape));
        }
        if let Some((attn, gate)) = &self.interview {
            out = self.interview_pass(ctx, &out, attn, *gate);
        }
        out
    }

    /// Each view's left half attends to the right half of its left
    /// neighbor, its right half to the left half of its right neighbor;
    /// gated residual on the width-concatenated result. All reads use the
    /// pre-update snapshot.
    fn interview_pass<T: Scalar>(
        &self,
        ctx: &mut NetCtx<T>,
        views: &[Var],
        attn: &AttnParams,
        gate: GateParam,
    ) -> Vec<Var> {
        let n = views.len();
        let shape = ctx.g.shape(views[0]).to_vec();
        let (h, w) = (shape[0], shape[1]);
        let half = w / 2;
        let halves: Vec<(Var, Var)> = views
            .iter()
            .map(|&x| {
                let l = ctx.g.slice_axis(x, 1, 0, half);
                let r = ctx.g.slice_axis(x, 1, half, w - half);
                (l, r)
            })
            .collect();
        let mut out = Vec::with_capacity(n);
        for (v, &x) in views.iter().enumerate() {
            let left_neighbor = (v + n - 1) % n;
            let right_neighbor = (v + 1) % n;
            let (ql, _) = halves[v];
            let (_, qr) = halves[v];
            let (_, kv_l) = halves[left_neighbor]; // right half of left neighbor
            let (kv_r, _) = halves[right_neighbor]; // left half of right neighbor
            let ql_flat = ctx.g.reshape(ql, &[h * half, self.ch]);
            let qr_flat = ctx.g.reshape(qr, &[h * (w - half), self.ch]);
            let kvl_flat = ctx.g.reshape(kv_l, &[h * (w - half), self.ch]);
            let kvr_flat = ctx.g.reshape(kv_r, &[h * half, self.ch]);
            let fl = cross_attention(ctx, ql_flat, kvl_flat, attn, None);
            let fr = cross_attention(ctx, qr_flat, kvr_flat, attn, None);
            let fl3 = ctx.g.reshape(fl, &[h, half, self.ch]);
            let fr3 = ctx.g.reshape(fr, &[h, w - half, self.ch]);
            let y = ctx.g.concat_axis(fl3, fr3, 1);
            out.push(gated_residual(ctx, x, y, gate));
        }
        out
    }
}

/// Per-view state threaded through the staged forward pass.
pub struct UNetState {
    pub views: Vec<Var>,
    skip0: Vec<Var>,
    skip1: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub branch: Branch,
    pub in_ch: usize,
    pub base: usize,
    pub wrap: bool,
    conv_in: Conv,
    d0: Level,
    down: Conv,
    d1: Level,
    mid: Level,
    u1: Level,
    upc: Conv,
    u0: Level,
    out_gn: NormParams,
    out_conv: Conv,
}

impl UNet {
    pub const NUM_STAGES: usize = 6;
    pub const NUM_SITES: usize = 5;

    pub fn def<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        prefix: &str,
        branch: Branch,
        in_ch: usize,
        base: usize,
    ) -> Self {
        let wrap = branch == Branch::Range;
        let iv = branch == Branch::Camera;
        let ch2 = base * 2;
        Self {
            branch,
            in_ch,
            base,
            wrap,
            conv_in: Conv::def(
                store,
                rng,
                &format!("{prefix}.in"),
                in_ch,
                base,
                ConvOpts::k3(1, wrap),
            ),
            d0: Level::def(store, rng, &format!("{prefix}.d0"), base, base, wrap, iv),
            down: Conv::def(
                store,
                rng,
                &format!("{prefix}.down"),
                base,
                ch2,
                ConvOpts::k3(2, wrap),
            ),
            d1: Level::def(store, rng, &format!("{prefix}.d1"), ch2, ch2, wrap, iv),
            mid: Level::def(store, rng, &format!("{prefix}.mid"), ch2, ch2, wrap, iv),
            u1: Level::def(store, rng, &format!("{prefix}.u1"), 2 * ch2, ch2, wrap, iv),
            upc: Conv::def(
                store,
                rng,
                &format!("{prefix}.upc"),
                ch2,
                base,
                ConvOpts::k3(1, wrap),
            ),
            u0: Level::def(store, rng, &format!("{prefix}.u0"), 2 * base, base, wrap, iv),
            out_gn: NormParams::def(store, rng, &format!("{prefix}.out.gn"), base),
            out_conv: Conv::def(
                store,
                rng,
                &format!("{prefix}.out"),
                base,
                in_ch,
                ConvOpts::k3(1, wrap),
            ),
        }
    }

    /// Feature channels entering each exchange site.
    pub fn site_channels(&self, site: usize) -> usize {
        match site {
            0 | 4 => self.base,
            1 | 2 | 3 => self.base * 2,
            _ => panic!("site {site} out of range"),
        }
    }

    /// Spatial downsampling factor (vs the input grid) at each site.
    pub fn site_down_factor(site: usize) -> usize {
        match site {
            0 | 4 => 1,
            1 | 2 | 3 => 2,
            _ => panic!("site {site} out of range"),
        }
    }

    pub fn start<T: Scalar>(&self, _ctx: &mut NetCtx<T>, inputs: Vec<Var>) -> UNetState {
        UNetState {
            views: inputs,
            skip0: Vec::new(),
            skip1: Vec::new(),
        }
    }

    /// Runs one stage in place. Stages 0..=4 end at exchange sites 0..=4.
    pub fn run_stage<T: Scalar>(
        &self,
        ctx: &mut NetCtx<T>,
        stage: usize,
        state: &mut UNetState,
        t_feat: Var,
        cond_tokens: &[Var],
    ) {
        assert_eq!(cond_tokens.len(), state.views.len(), "tokens per view");
        match stage {
            0 => {
                let x: Vec<Var> = state
                    .views
                    .iter()
                    .map(|&v| self.conv_in.forward(ctx, v))
                    .collect();
                state.views = self.d0.forward(ctx, x, t_feat, cond_tokens);
            }
            1 => {
                state.skip0 = state.views.clone();
                let x: Vec<Var> = state
                    .views
                    .iter()
                    .map(|&v| self.down.forward(ctx, v))
                    .collect();
                state.views = self.d1.forward(ctx, x, t_feat, cond_tokens);
            }
            2 => {
                state.skip1 = state.views.clone();
                state.views = self.mid.forward(ctx, state.views.clone(), t_feat, cond_tokens);
            }
            3 => {
                let x: Vec<Var> = state
                    .views
                    .iter()
                    .zip(&state.skip1)
                    .map(|(&v, &s)| ctx.g.concat_axis(v, s, 2))
                    .collect();
                state.views = self.u1.forward(ctx, x, t_feat, cond_tokens);
            }
            4 => {
                let x: Vec<Var> = state
                    .views
                    .iter()
                    .zip(&state.skip0)
                    .map(|(&v, &s)| {
                        let up = ctx.g.upsample2x(v);
                        let up = self.upc.forward(ctx, up);
                        ctx.g.concat_axis(up, s, 2)
                    })
                    .collect();
                state.views = self.u0.forward(ctx, x, t_feat, cond_tokens);
            }
            5 => {
                state.views = state
                    .views
                    .iter()
                    .map(|&v| {
                        let h = self.out_gn.forward(ctx, v, self.base);
                        let h = ctx.g.silu(h);
                        self.out_conv.forward(ctx, h)
                    })
                    .collect();
            }
            _ => panic!("stage {stage} out of range"),
        }
    }

    /// Full forward with no cross-modality exchange (single-branch mode).
    pub fn forward_single<T: Scalar>(
        &self,
        ctx: &mut NetCtx<T>,
        inputs: Vec<Var>,
        t: usize,
        total_steps: usize,
        cond_tokens: &[Var],
    ) -> Vec<Var> {
        let t_feat = ctx.constant(timestep_features(t, total_steps));
        let mut state = self.start(ctx, inputs);
        for stage in 0..Self::NUM_STAGES {
            self.run_stage(ctx, stage, &mut state, t_feat, cond_tokens);
        }
        state.views
    }
}
