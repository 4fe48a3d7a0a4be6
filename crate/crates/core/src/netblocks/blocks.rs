//! Reusable trainable blocks: linear layers, attention, gates, residual
//! conv blocks, and the Fourier feature embedder.

use super::store::{Init, PId, ParamStore};
use crate::autodiff::{ConvOpts, Graph, Scalar, Tensor, Var};
use crate::rng::CounterRng;
use std::sync::Arc;

/// Attention width used for every single-head attention in the model.
pub const ATTN_WIDTH: usize = 64;
/// Condition token width.
pub const TOKEN_WIDTH: usize = 64;

/// One forward pass: a graph bound to a read-only parameter store.
/// Parameters enter the graph lazily, once each.
pub struct NetCtx<'s, T: Scalar> {
    pub g: Graph<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'s, T: Scalar> NetCtx<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    /// Graph variable for a parameter.
    pub fn p(&mut self, id: PId) -> Var {
        if self.bound.len() < self.store.len() {
            self.bound.resize(self.store.len(), None);
        }
        match self.bound[id.0] {
            Some(v) => v,
            None => {
                let v = self.g.input(self.store.get(id).clone());
                self.bound[id.0] = Some(v);
                v
            }
        }
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.g.input(t)
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Runs backward from `loss` and collects gradients for every bound
    /// parameter, in parameter order.
    pub fn param_grads(&self, loss: Var) -> Vec<(PId, Tensor<T>)> {
        let grads = self.g.backward(loss);
        let mut out = Vec::new();
        for (i, slot) in self.bound.iter().enumerate() {
            if let Some(var) = slot {
                if let Some(g) = &grads[var.0] {
                    out.push((PId(i), g.clone()));
                }
            }
        }
        out
    }
}

/// [sin(2^l pi x), cos(2^l pi x)] for l = 0..L-1, interleaved.
pub fn fourier_embed(x: f64, l: usize) -> Vec<f64> {
    assert!(l >= 1);
    let mut out = Vec::with_capacity(2 * l);
    for k in 0..l {
        let arg = (1u64 << k) as f64 * std::f64::consts::PI * x;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

/// Fourier features of several scalars concatenated into one tensor row.
pub fn fourier_embed_rows<T: Scalar>(xs: &[f64], l: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(xs.len() * 2 * l);
    for &x in xs {
        data.extend(fourier_embed(x, l).into_iter().map(T::from_f64));
    }
    Tensor::from_vec(&[xs.len(), 2 * l], data)
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: PId,
    pub b: PId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn def<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            w: store.def(
                &format!("{name}.w"),
                &[in_dim, out_dim],
                Init::HeFanIn(in_dim),
                rng,
            ),
            b: store.def(&format!("{name}.b"), &[out_dim], Init::Zeros, rng),
            in_dim,
            out_dim,
        }
    }

    /// x [N, in] -> [N, out].
    pub fn forward<T: Scalar>(&self, ctx: &mut NetCtx<T>, x: Var) -> Var {
        let w = ctx.p(self.w);
        let b = ctx.p(self.b);
        let y = ctx.g.matmul(x, w);
        ctx.g.add_row(y, b)
    }
}

/// Two-layer MLP with SiLU in between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn def<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            l1: Linear::def(store, rng, &format!("{name}.l1"), in_dim, hidden),
            l2: Linear::def(store, rng, &format!("{name}.l2"), hidden, out_dim),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut NetCtx<T>, x: Var) -> Var {
        let h = self.l1.forward(ctx, x);
        let h = ctx.g.silu(h);
        self.l2.forward(ctx, h)
    }
}

/// Single-head scaled-dot-product attention projections.
#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub wq: PId,
    pub wk: PId,
    pub wv: PId,
    pub wo: PId,
    pub q_dim: usize,
    pub kv_dim: usize,
}

impl AttnParams {
    pub fn def<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
    ) -> Self {
        Self {
            wq: store.def(
                &format!("{name}.wq"),
                &[q_dim, ATTN_WIDTH],
                Init::HeFanIn(q_dim),
                rng,
            ),
            wk: store.def(
                &format!("{name}.wk"),
                &[kv_dim, ATTN_WIDTH],
                Init::HeFanIn(kv_dim),
                rng,
            ),
            wv: store.def(
                &format!("{name}.wv"),
                &[kv_dim, ATTN_WIDTH],
                Init::HeFanIn(kv_dim),
                rng,
            ),
            wo: store.def(
                &format!("{name}.wo"),
                &[ATTN_WIDTH, q_dim],
                Init::HeFanIn(ATTN_WIDTH),
                rng,
            ),
            q_dim,
            kv_dim,
        }
    }
}

/// Dense cross-attention: queries [N, q_dim] attend to keys/values
/// [M, kv_dim]. Masked key entries get -inf logits; if every key is masked
/// the output is zero.
pub fn cross_attention<T: Scalar>(
    ctx: &mut NetCtx<T>,
    queries: Var,
    kv: Var,
    p: &AttnParams,
    mask: Option<Arc<Vec<bool>>>,
) -> Var {
    let n = ctx.g.shape(queries)[0];
    let m = ctx.g.shape(kv)[0];
    let wq = ctx.p(p.wq);
    let wk = ctx.p(p.wk);
    let wv = ctx.p(p.wv);
    let wo = ctx.p(p.wo);
    let q = ctx.g.matmul(queries, wq);
    let k = ctx.g.matmul(kv, wk);
    let v = ctx.g.matmul(kv, wv);
    let logits = ctx.g.matmul_ex(q, k, false, true);
    let scaled = ctx.g.scale(logits, 1.0 / (ATTN_WIDTH as f64).sqrt());
    // Row mask: same key mask for every query row.
    let full_mask = mask.map(|mk| {
        assert_eq!(mk.len(), m);
        let mut fm = Vec::with_capacity(n * m);
        for _ in 0..n {
            fm.extend_from_slice(&mk);
        }
        Arc::new(fm)
    });
    let probs = ctx.g.softmax_rows(scaled, full_mask);
    let mixed = ctx.g.matmul(probs, v);
    ctx.g.matmul(mixed, wo)
}

/// Per-cell attention: cell i of `cells` [N, c] attends only to its own
/// `r` tokens (rows i*r..(i+1)*r of `tokens` [(N*r), kv_dim]). `mask` is
/// N*r; all-masked cells produce zero output.
pub fn epipolar_attention<T: Scalar>(
    ctx: &mut NetCtx<T>,
    cells: Var,
    tokens: Var,
    r: usize,
    p: &AttnParams,
    mask: Arc<Vec<bool>>,
) -> Var {
    let n = ctx.g.shape(cells)[0];
    let c = ctx.g.shape(cells)[1];
    assert_eq!(ctx.g.shape(tokens)[0], n * r, "token rows");
    assert_eq!(mask.len(), n * r, "mask length");
    let wq = ctx.p(p.wq);
    let wk = ctx.p(p.wk);
    let wv = ctx.p(p.wv);
    let wo = ctx.p(p.wo);
    let q = ctx.g.matmul(cells, wq);
    let k = ctx.g.matmul(tokens, wk);
    let v = ctx.g.matmul(tokens, wv);
    let qb = ctx.g.reshape(q, &[n, 1, ATTN_WIDTH]);
    let kb = ctx.g.reshape(k, &[n, r, ATTN_WIDTH]);
    let vb = ctx.g.reshape(v, &[n, r, ATTN_WIDTH]);
    let logits = ctx.g.bmm(qb, kb, true);
    let flat = ctx.g.reshape(logits, &[n, r]);
    let scaled = ctx.g.scale(flat, 1.0 / (ATTN_WIDTH as f64).sqrt());
    let probs = ctx.g.softmax_rows(scaled, Some(mask));
    let pb = ctx.g.reshape(probs, &[n, 1, r]);
    let mixed = ctx.g.bmm(pb, vb, false);
    let mixed2 = ctx.g.reshape(mixed, &[n, ATTN_WIDTH]);
    let out = ctx.g.matmul(mixed2, wo);
    debug_assert_eq!(ctx.g.shape(out), &[n, c]);
    out
}

/// Learnable zero-initialized gate applied as tanh(alpha).
#[derive(Debug, Clone, Copy)]
pub struct GateParam {
    pub alpha: PId,
}

impl GateParam {
    pub fn def<T: Scalar>(store: &mut ParamStore<T>, rng: &mut CounterRng, name: &str) -> Self {
        Self {
            alpha: store.def(name, &[1], Init::Zeros, rng),
        }
    }
}

/// x + tanh(alpha) * y.
pub fn gated_residual<T: Scalar>(ctx: &mut NetCtx<T>, x: Var, y: Var, gate: GateParam) -> Var {
    assert_eq!(ctx.g.shape(x), ctx.g.shape(y), "gated_residual shapes");
    let a = ctx.p(gate.alpha);
    let t = ctx.g.tanh_op(a);
    let gy = ctx.g.mul_scalar_var(y, t);
    ctx.g.add(x, gy)
}

pub fn norm_groups(channels: usize) -> usize {
    channels.min(8)
}

/// GroupNorm affine parameters.
#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gamma: PId,
    pub beta: PId,
}

impl NormParams {
    pub fn def<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        name: &str,
        ch: usize,
    ) -> Self {
        Self {
            gamma: store.def(&format!("{name}.g"), &[ch], Init::Ones, rng),
            beta: store.def(&format!("{name}.b"), &[ch], Init::Zeros, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut NetCtx<T>, x: Var, ch: usize) -> Var {
        let gamma = ctx.p(self.gamma);
        let beta = ctx.p(self.beta);
        ctx.g.group_norm(x, gamma, beta, norm_groups(ch))
    }
}

/// 3x3 (or 1x1) conv weights over an [H, W, Cin] grid.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: PId,
    pub b: PId,
    pub opts: ConvOpts,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    pub fn def<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        name: &str,
        cin: usize,
        cout: usize,
        opts: ConvOpts,
    ) -> Self {
        let fan_in = opts.kh * opts.kw * cin;
        Self {
            w: store.def(
                &format!("{name}.w"),
                &[fan_in, cout],
                Init::HeFanIn(fan_in),
                rng,
            ),
            b: store.def(&format!("{name}.b"), &[cout], Init::Zeros, rng),
            opts,
            cin,
            cout,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut NetCtx<T>, x: Var) -> Var {
        let w = ctx.p(self.w);
        let b = ctx.p(self.b);
        ctx.g.conv2d(x, w, b, self.opts)
    }
}

/// Two-conv residual block with group norm and SiLU; the level's timestep
/// feature (one vector of `cout` channels) is added after the first conv.
#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    pub gn1: NormParams,
    pub conv1: Conv,
    pub gn2: NormParams,
    pub conv2: Conv,
    /// 1x1 projection when cin != cout.
    pub skip: Option<Conv>,
    pub cin: usize,
    pub cout: usize,
}

impl ResBlock {
    pub fn def<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        name: &str,
        cin: usize,
        cout: usize,
        wrap_x: bool,
    ) -> Self {
        Self {
            gn1: NormParams::def(store, rng, &format!("{name}.gn1"), cin),
            conv1: Conv::def(
                store,
                rng,
                &format!("{name}.conv1"),
                cin,
                cout,
                ConvOpts::k3(1, wrap_x),
            ),
            gn2: NormParams::def(store, rng, &format!("{name}.gn2"), cout),
            conv2: Conv::def(
                store,
                rng,
                &format!("{name}.conv2"),
                cout,
                cout,
                ConvOpts::k3(1, wrap_x),
            ),
            skip: (cin != cout).then(|| {
                Conv::def(store, rng, &format!("{name}.skip"), cin, cout, ConvOpts::k1())
            }),
            cin,
            cout,
        }
    }

    /// `temb`: optional [cout] vector broadcast over all cells.
    pub fn forward<T: Scalar>(&self, ctx: &mut NetCtx<T>, x: Var, temb: Option<Var>) -> Var {
        let h = self.gn1.forward(ctx, x, self.cin);
        let h = ctx.g.silu(h);
        let mut h = self.conv1.forward(ctx, h);
        if let Some(t) = temb {
            h = ctx.g.add_row(h, t);
        }
        let h = self.gn2.forward(ctx, h, self.cout);
        let h = ctx.g.silu(h);
        let h = self.conv2.forward(ctx, h);
        let s = match &self.skip {
            Some(conv) => conv.forward(ctx, x),
            None => x,
        };
        ctx.g.add(s, h)
    }
}
