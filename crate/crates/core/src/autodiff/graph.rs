//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records one forward pass; [`Graph::backward`] walks the tape
//! in reverse and accumulates gradients for every node. Each training
//! worker builds its own graph against shared read-only parameters, so
//! there is no cross-thread state.

use super::tensor::{Scalar, Tensor};
use std::sync::Arc;

/// Handle to a node in one graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

type BackFn<T> = Box<dyn Fn(&Tensor<T>, &mut dyn FnMut(Var, Tensor<T>)) + Send>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    back: Option<BackFn<T>>,
}

/// Sparse row-gather map: out[o, :] = sum of weight * in[idx, :] over taps.
/// Built once from geometry (bilinear footprints, embeddings) and reused;
/// the map itself never receives gradients.
#[derive(Debug, Clone)]
pub struct LinearMap {
    pub in_rows: usize,
    pub taps: Vec<Vec<(u32, f64)>>,
}

impl LinearMap {
    pub fn out_rows(&self) -> usize {
        self.taps.len()
    }
}

/// Convolution geometry. Kernels are centered; vertical padding is zeros,
/// horizontal padding wraps when `wrap_x` (panoramic grids) and is zeros
/// otherwise.
#[derive(Debug, Clone, Copy)]
pub struct ConvOpts {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub wrap_x: bool,
}

impl ConvOpts {
    pub fn k3(stride: usize, wrap_x: bool) -> Self {
        Self {
            kh: 3,
            kw: 3,
            stride,
            wrap_x,
        }
    }

    pub fn k1() -> Self {
        Self {
            kh: 1,
            kw: 1,
            stride: 1,
            wrap_x: false,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let ph = self.kh / 2;
        let pw = self.kw / 2;
        (
            (h + 2 * ph - self.kh) / self.stride + 1,
            (w + 2 * pw - self.kw) / self.stride + 1,
        )
    }
}

/// C(m x n) = alpha * op(A) * op(B) + beta * C, all row-major.
/// When `ta`, A is stored k x m and used transposed; likewise `tb`.
#[allow(clippy::too_many_arguments)]
fn gemm_into<T: Scalar>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, cin: usize, o: &ConvOpts) -> Vec<T> {
    let (h2, w2) = o.out_hw(h, w);
    let ph = (o.kh / 2) as isize;
    let pw = (o.kw / 2) as isize;
    let cols = o.kh * o.kw * cin;
    let mut out = vec![T::ZERO; h2 * w2 * cols];
    for i2 in 0..h2 {
        for j2 in 0..w2 {
            let base = (i2 * w2 + j2) * cols;
            for di in 0..o.kh {
                let ii = (i2 * o.stride + di) as isize - ph;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dj in 0..o.kw {
                    let mut jj = (j2 * o.stride + dj) as isize - pw;
                    if o.wrap_x {
                        jj = jj.rem_euclid(w as isize);
                    } else if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let src = (ii as usize * w + jj as usize) * cin;
                    let dst = base + (di * o.kw + dj) * cin;
                    out[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    out
}

fn col2im<T: Scalar>(
    patches: &[T],
    h: usize,
    w: usize,
    cin: usize,
    o: &ConvOpts,
) -> Vec<T> {
    let (h2, w2) = o.out_hw(h, w);
    let ph = (o.kh / 2) as isize;
    let pw = (o.kw / 2) as isize;
    let cols = o.kh * o.kw * cin;
    let mut out = vec![T::ZERO; h * w * cin];
    for i2 in 0..h2 {
        for j2 in 0..w2 {
            let base = (i2 * w2 + j2) * cols;
            for di in 0..o.kh {
                let ii = (i2 * o.stride + di) as isize - ph;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dj in 0..o.kw {
                    let mut jj = (j2 * o.stride + dj) as isize - pw;
                    if o.wrap_x {
                        jj = jj.rem_euclid(w as isize);
                    } else if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let dst = (ii as usize * w + jj as usize) * cin;
                    let src = base + (di * o.kw + dj) * cin;
                    for c in 0..cin {
                        out[dst + c] += patches[src + c];
                    }
                }
            }
        }
    }
    out
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, back: Option<BackFn<T>>) -> Var {
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node. Whether its gradient is read is up to the caller.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse pass from a 1-element loss. Returns per-node gradients
    /// (None where the loss does not depend on the node).
    pub fn backward(&self, loss: Var) -> Vec<Option<Tensor<T>>> {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::ONE));
        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(back) = &self.nodes[id].back {
                back(&g, &mut |parent: Var, pg: Tensor<T>| {
                    debug_assert_eq!(
                        pg.shape(),
                        self.nodes[parent.0].value.shape(),
                        "gradient shape mismatch for node {}",
                        parent.0
                    );
                    grads[parent.0] = Some(match grads[parent.0].take() {
                        Some(acc) => acc.add_t(&pg),
                        None => pg,
                    });
                });
            }
            // Keep leaf gradients so callers can read them.
            if self.nodes[id].back.is_none() {
                grads[id] = Some(g);
            } else if id != loss.0 {
                drop(g);
            }
        }
        grads
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x + y);
        self.push(
            t,
            Some(Box::new(move |g, sink| {
                sink(a, g.clone());
                sink(b, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x - y);
        self.push(
            t,
            Some(Box::new(move |g, sink| {
                sink(a, g.clone());
                sink(b, g.map(|x| -x));
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let t = av.zip(&bv, |x, y| x * y);
        self.push(
            t,
            Some(Box::new(move |g, sink| {
                sink(a, g.zip(&bv, |x, y| x * y));
                sink(b, g.zip(&av, |x, y| x * y));
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cc = T::from_f64(c);
        let t = self.nodes[a.0].value.map(|x| x * cc);
        self.push(
            t,
            Some(Box::new(move |g, sink| sink(a, g.map(|x| x * cc)))),
        )
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let cc = T::from_f64(c);
        let t = self.nodes[a.0].value.map(|x| x + cc);
        self.push(t, Some(Box::new(move |g, sink| sink(a, g.clone()))))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.nodes[a.0].value.map(|x| T::ONE / (T::ONE + (-x).exp()));
        let yc = y.clone();
        self.push(
            y,
            Some(Box::new(move |g, sink| {
                sink(a, g.zip(&yc, |gi, yi| gi * yi * (T::ONE - yi)));
            })),
        )
    }

    /// x * sigmoid(x); the sigmoid-weighted linear unit.
    pub fn silu(&mut self, a: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let y = av.map(|x| x / (T::ONE + (-x).exp()));
        self.push(
            y,
            Some(Box::new(move |g, sink| {
                sink(
                    a,
                    g.zip(&av, |gi, x| {
                        let s = T::ONE / (T::ONE + (-x).exp());
                        gi * s * (T::ONE + x * (T::ONE - s))
                    }),
                );
            })),
        )
    }

    pub fn tanh_op(&mut self, a: Var) -> Var {
        let y = self.nodes[a.0].value.map(|x| x.tanh());
        let yc = y.clone();
        self.push(
            y,
            Some(Box::new(move |g, sink| {
                sink(a, g.zip(&yc, |gi, yi| gi * (T::ONE - yi * yi)));
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.nodes[a.0].value.map(|x| x.exp());
        let yc = y.clone();
        self.push(
            y,
            Some(Box::new(move |g, sink| {
                sink(a, g.zip(&yc, |gi, yi| gi * yi));
            })),
        )
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.clone();
        let mut s = T::ZERO;
        for &x in v.data() {
            s += x;
        }
        let shape = v.shape().to_vec();
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |g, sink| {
                sink(a, Tensor::full(&shape, g.item()));
            })),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    // ---- shape plumbing ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old = self.nodes[a.0].value.shape().to_vec();
        let t = self.nodes[a.0].value.reshaped(shape);
        self.push(
            t,
            Some(Box::new(move |g, sink| sink(a, g.reshaped(&old)))),
        )
    }

    /// Stack along axis 0; all parts must share trailing dimensions.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let row_elems: usize = self.nodes[parts[0].0].value.shape()[1..].iter().product();
        let mut total_rows = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::new();
        for &p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(
                v.shape()[1..].iter().product::<usize>(),
                row_elems,
                "concat_rows trailing shape mismatch"
            );
            total_rows += v.shape()[0];
            sizes.push((p, v.shape().to_vec()));
            data.extend_from_slice(v.data());
        }
        let mut shape = self.nodes[parts[0].0].value.shape().to_vec();
        shape[0] = total_rows;
        self.push(
            Tensor::from_vec(&shape, data),
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                let mut off = 0;
                for (p, s) in &sizes {
                    let n: usize = s.iter().product();
                    sink(*p, Tensor::from_vec(s, gd[off..off + n].to_vec()));
                    off += n;
                }
            })),
        )
    }

    /// Slice `len` indices starting at `start` along `axis`.
    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.nodes[a.0].value.clone();
        let shape = v.shape().to_vec();
        assert!(axis < shape.len() && start + len <= shape[axis]);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.push(
            Tensor::from_vec(&out_shape, out),
            Some(Box::new(move |g, sink| {
                let mut gx = vec![T::ZERO; outer * dim * inner];
                let gd = g.data();
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        gx[dst + i] += gd[src + i];
                    }
                }
                sink(a, Tensor::from_vec(&shape, gx));
            })),
        )
    }

    /// Concatenate two tensors along `axis` (shapes equal elsewhere).
    pub fn concat_axis(&mut self, a: Var, b: Var, axis: usize) -> Var {
        let va = self.nodes[a.0].value.clone();
        let vb = self.nodes[b.0].value.clone();
        let sa = va.shape().to_vec();
        let sb = vb.shape().to_vec();
        assert_eq!(sa.len(), sb.len());
        for (i, (x, y)) in sa.iter().zip(&sb).enumerate() {
            assert!(i == axis || x == y, "concat_axis shape mismatch");
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (da, db) = (sa[axis], sb[axis]);
        let mut out = Vec::with_capacity(va.numel() + vb.numel());
        for o in 0..outer {
            out.extend_from_slice(&va.data()[o * da * inner..(o + 1) * da * inner]);
            out.extend_from_slice(&vb.data()[o * db * inner..(o + 1) * db * inner]);
        }
        let mut shape = sa.clone();
        shape[axis] = da + db;
        self.push(
            Tensor::from_vec(&shape, out),
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                let mut ga = vec![T::ZERO; outer * da * inner];
                let mut gb = vec![T::ZERO; outer * db * inner];
                for o in 0..outer {
                    let src = o * (da + db) * inner;
                    ga[o * da * inner..(o + 1) * da * inner]
                        .copy_from_slice(&gd[src..src + da * inner]);
                    gb[o * db * inner..(o + 1) * db * inner]
                        .copy_from_slice(&gd[src + da * inner..src + (da + db) * inner]);
                }
                sink(a, Tensor::from_vec(&sa, ga));
                sink(b, Tensor::from_vec(&sb, gb));
            })),
        )
    }

    /// Repeat a [R, C] tensor `times` times along axis 0.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let v = self.nodes[a.0].value.clone();
        let shape = v.shape().to_vec();
        let n = v.numel();
        let mut data = Vec::with_capacity(n * times);
        for _ in 0..times {
            data.extend_from_slice(v.data());
        }
        let mut out_shape = shape.clone();
        out_shape[0] *= times;
        self.push(
            Tensor::from_vec(&out_shape, data),
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                let mut acc = vec![T::ZERO; n];
                for t in 0..times {
                    for i in 0..n {
                        acc[i] += gd[t * n + i];
                    }
                }
                sink(a, Tensor::from_vec(&shape, acc));
            })),
        )
    }

    // ---- linear algebra ----

    /// op(a) * op(b) with optional transposition of the stored operands.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let (ar, ac) = (av.shape()[0], av.shape()[1]);
        let (br, bc) = (bv.shape()[0], bv.shape()[1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![T::ZERO; m * n];
        gemm_into(ta, tb, m, k, n, T::ONE, av.data(), bv.data(), T::ZERO, &mut out);
        self.push(
            Tensor::from_vec(&[m, n], out),
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                // dA
                let mut da = vec![T::ZERO; ar * ac];
                if !ta {
                    // dL = dC * R^T
                    gemm_into(false, !tb, m, n, k, T::ONE, gd, bv.data(), T::ZERO, &mut da);
                } else {
                    // dA = R * dC^T  (k x m)
                    gemm_into(tb, true, k, n, m, T::ONE, bv.data(), gd, T::ZERO, &mut da);
                }
                sink(a, Tensor::from_vec(&[ar, ac], da));
                // dB
                let mut db = vec![T::ZERO; br * bc];
                if !tb {
                    // dR = L^T * dC  (k x n)
                    gemm_into(!ta, false, k, m, n, T::ONE, av.data(), gd, T::ZERO, &mut db);
                } else {
                    // dB = dC^T * L  (n x k)
                    gemm_into(true, ta, n, m, k, T::ONE, gd, av.data(), T::ZERO, &mut db);
                }
                sink(b, Tensor::from_vec(&[br, bc], db));
            })),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, b, false, false)
    }

    /// Batched a[b] * op(bb[b]); a is [B, M, K], bb is [B, K, N] (or
    /// [B, N, K] when `tb`).
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Var {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert_eq!(bv.shape()[0], bs);
        let n = if tb { bv.shape()[1] } else { bv.shape()[2] };
        let kb = if tb { bv.shape()[2] } else { bv.shape()[1] };
        assert_eq!(k, kb, "bmm inner dims");
        let bn = k * n;
        let mut out = vec![T::ZERO; bs * m * n];
        for i in 0..bs {
            gemm_into(
                false,
                tb,
                m,
                k,
                n,
                T::ONE,
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * bn..(i + 1) * bn],
                T::ZERO,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let b_shape = bv.shape().to_vec();
        self.push(
            Tensor::from_vec(&[bs, m, n], out),
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                let mut da = vec![T::ZERO; bs * m * k];
                let mut db = vec![T::ZERO; b_shape.iter().product::<usize>()];
                for i in 0..bs {
                    let gdi = &gd[i * m * n..(i + 1) * m * n];
                    let bvi = &bv.data()[i * bn..(i + 1) * bn];
                    let avi = &av.data()[i * m * k..(i + 1) * m * k];
                    // dA_b = dC * R^T
                    gemm_into(
                        false,
                        !tb,
                        m,
                        n,
                        k,
                        T::ONE,
                        gdi,
                        bvi,
                        T::ZERO,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                    if !tb {
                        // dB_b = A^T * dC (k x n)
                        gemm_into(
                            true,
                            false,
                            k,
                            m,
                            n,
                            T::ONE,
                            avi,
                            gdi,
                            T::ZERO,
                            &mut db[i * bn..(i + 1) * bn],
                        );
                    } else {
                        // dB_b = dC^T * A (n x k)
                        gemm_into(
                            true,
                            false,
                            n,
                            m,
                            k,
                            T::ONE,
                            gdi,
                            avi,
                            T::ZERO,
                            &mut db[i * bn..(i + 1) * bn],
                        );
                    }
                }
                sink(a, Tensor::from_vec(&[bs, m, k], da));
                sink(b, Tensor::from_vec(&b_shape, db));
            })),
        )
    }

    /// x [N, C] + bias [C] broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.nodes[x.0].value.clone();
        let bv = self.nodes[bias.0].value.clone();
        let c = bv.numel();
        let n = xv.numel() / c;
        assert_eq!(xv.numel(), n * c);
        let mut out = xv.data().to_vec();
        for r in 0..n {
            for j in 0..c {
                out[r * c + j] += bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_vec(&shape, out),
            Some(Box::new(move |g, sink| {
                sink(x, g.clone());
                let gd = g.data();
                let mut gb = vec![T::ZERO; c];
                for r in 0..n {
                    for j in 0..c {
                        gb[j] += gd[r * c + j];
                    }
                }
                sink(bias, Tensor::from_vec(&[c], gb));
            })),
        )
    }

    /// x * s where s is a 1-element variable (learned gate value etc.).
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        let xv = self.nodes[x.0].value.clone();
        let sv = self.nodes[s.0].value.item();
        let out = xv.map(|v| v * sv);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(x, g.map(|v| v * sv));
                let mut acc = T::ZERO;
                for (gi, xi) in g.data().iter().zip(xv.data()) {
                    acc += *gi * *xi;
                }
                sink(s, Tensor::scalar(acc));
            })),
        )
    }

    // ---- structured ops ----

    /// 2D convolution over an [H, W, Cin] grid with weights
    /// [kh * kw * Cin, Cout] and bias [Cout].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, opts: ConvOpts) -> Var {
        let xv = self.nodes[x.0].value.clone();
        let wv = self.nodes[w.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let (h, wd, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let cols = opts.kh * opts.kw * cin;
        assert_eq!(
            wv.shape(),
            &[cols, bv.numel()],
            "conv weight shape mismatch"
        );
        let cout = bv.numel();
        let (h2, w2) = opts.out_hw(h, wd);
        let patches = im2col(xv.data(), h, wd, cin, &opts);
        let mut out = vec![T::ZERO; h2 * w2 * cout];
        gemm_into(
            false,
            false,
            h2 * w2,
            cols,
            cout,
            T::ONE,
            &patches,
            wv.data(),
            T::ZERO,
            &mut out,
        );
        for r in 0..h2 * w2 {
            for j in 0..cout {
                out[r * cout + j] += bv.data()[j];
            }
        }
        self.push(
            Tensor::from_vec(&[h2, w2, cout], out),
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                // Bias gradient.
                let mut gb = vec![T::ZERO; cout];
                for r in 0..h2 * w2 {
                    for j in 0..cout {
                        gb[j] += gd[r * cout + j];
                    }
                }
                sink(b, Tensor::from_vec(&[cout], gb));
                // Weight gradient: P^T * g.
                let patches = im2col(xv.data(), h, wd, cin, &opts);
                let mut gw = vec![T::ZERO; cols * cout];
                gemm_into(
                    true,
                    false,
                    cols,
                    h2 * w2,
                    cout,
                    T::ONE,
                    &patches,
                    gd,
                    T::ZERO,
                    &mut gw,
                );
                sink(w, Tensor::from_vec(&[cols, cout], gw));
                // Input gradient: col2im(g * W^T).
                let mut gp = vec![T::ZERO; h2 * w2 * cols];
                gemm_into(
                    false,
                    true,
                    h2 * w2,
                    cout,
                    cols,
                    T::ONE,
                    gd,
                    wv.data(),
                    T::ZERO,
                    &mut gp,
                );
                let gx = col2im(&gp, h, wd, cin, &opts);
                sink(x, Tensor::from_vec(&[h, wd, cin], gx));
            })),
        )
    }

    /// Nearest-neighbor 2x upsampling of an [H, W, C] grid.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.clone();
        let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = vec![T::ZERO; 4 * h * w * c];
        for i in 0..2 * h {
            for j in 0..2 * w {
                let src = ((i / 2) * w + j / 2) * c;
                let dst = (i * 2 * w + j) * c;
                out[dst..dst + c].copy_from_slice(&xv.data()[src..src + c]);
            }
        }
        self.push(
            Tensor::from_vec(&[2 * h, 2 * w, c], out),
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                let mut gx = vec![T::ZERO; h * w * c];
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        let dst = ((i / 2) * w + j / 2) * c;
                        let src = (i * 2 * w + j) * c;
                        for k in 0..c {
                            gx[dst + k] += gd[src + k];
                        }
                    }
                }
                sink(x, Tensor::from_vec(&[h, w, c], gx));
            })),
        )
    }

    /// Group normalization over an [H, W, C] grid (statistics per group of
    /// channels across all spatial positions), with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xv = self.nodes[x.0].value.clone();
        let gv = self.nodes[gamma.0].value.clone();
        let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(c % groups, 0, "channels not divisible by groups");
        assert_eq!(gv.numel(), c);
        let cg = c / groups;
        let n_per = h * w * cg;
        let eps = T::from_f64(1e-5);
        let xd = xv.data();
        let mut mean = vec![T::ZERO; groups];
        let mut inv_std = vec![T::ZERO; groups];
        for g_i in 0..groups {
            let mut s = T::ZERO;
            for cell in 0..h * w {
                for ch in g_i * cg..(g_i + 1) * cg {
                    s += xd[cell * c + ch];
                }
            }
            let m = s / T::from_f64(n_per as f64);
            let mut v = T::ZERO;
            for cell in 0..h * w {
                for ch in g_i * cg..(g_i + 1) * cg {
                    let d = xd[cell * c + ch] - m;
                    v += d * d;
                }
            }
            mean[g_i] = m;
            inv_std[g_i] = T::ONE / (v / T::from_f64(n_per as f64) + eps).sqrt();
        }
        let bd = self.nodes[beta.0].value.clone();
        let mut out = vec![T::ZERO; h * w * c];
        for cell in 0..h * w {
            for ch in 0..c {
                let g_i = ch / cg;
                let xhat = (xd[cell * c + ch] - mean[g_i]) * inv_std[g_i];
                out[cell * c + ch] = gv.data()[ch] * xhat + bd.data()[ch];
            }
        }
        let mean_c = mean.clone();
        let inv_c = inv_std.clone();
        self.push(
            Tensor::from_vec(&[h, w, c], out),
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                let xd = xv.data();
                let npf = T::from_f64(n_per as f64);
                let mut ggamma = vec![T::ZERO; c];
                let mut gbeta = vec![T::ZERO; c];
                let mut gx = vec![T::ZERO; h * w * c];
                for g_i in 0..groups {
                    let m = mean_c[g_i];
                    let istd = inv_c[g_i];
                    // Accumulate the two reductions the backward needs.
                    let mut sum_dxhat = T::ZERO;
                    let mut sum_dxhat_xhat = T::ZERO;
                    for cell in 0..h * w {
                        for ch in g_i * cg..(g_i + 1) * cg {
                            let idx = cell * c + ch;
                            let xhat = (xd[idx] - m) * istd;
                            let dxhat = gd[idx] * gv.data()[ch];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            ggamma[ch] += gd[idx] * xhat;
                            gbeta[ch] += gd[idx];
                        }
                    }
                    for cell in 0..h * w {
                        for ch in g_i * cg..(g_i + 1) * cg {
                            let idx = cell * c + ch;
                            let xhat = (xd[idx] - m) * istd;
                            let dxhat = gd[idx] * gv.data()[ch];
                            gx[idx] = istd
                                * (dxhat
                                    - sum_dxhat / npf
                                    - xhat * sum_dxhat_xhat / npf);
                        }
                    }
                }
                sink(x, Tensor::from_vec(&[h, w, c], gx));
                sink(gamma, Tensor::from_vec(&[c], ggamma));
                sink(beta, Tensor::from_vec(&[c], gbeta));
            })),
        )
    }

    /// Row-wise softmax with an optional boolean mask (false = excluded).
    /// Rows whose mask is entirely false produce all-zero output.
    pub fn softmax_rows(&mut self, logits: Var, mask: Option<Arc<Vec<bool>>>) -> Var {
        let lv = self.nodes[logits.0].value.clone();
        let shape = lv.shape().to_vec();
        let m = *shape.last().unwrap();
        let n = lv.numel() / m;
        if let Some(mk) = &mask {
            assert_eq!(mk.len(), n * m, "mask shape mismatch");
        }
        let ld = lv.data();
        let mut out = vec![T::ZERO; n * m];
        for r in 0..n {
            let row = &ld[r * m..(r + 1) * m];
            let is_valid = |j: usize| mask.as_ref().map_or(true, |mk| mk[r * m + j]);
            let mut mx = None;
            for (j, &x) in row.iter().enumerate() {
                if is_valid(j) {
                    mx = Some(match mx {
                        None => x,
                        Some(cur) => x.maxs(cur),
                    });
                }
            }
            let Some(mx) = mx else { continue }; // all masked -> zeros
            let mut s = T::ZERO;
            for (j, &x) in row.iter().enumerate() {
                if is_valid(j) {
                    let e = (x - mx).exp();
                    out[r * m + j] = e;
                    s += e;
                }
            }
            for j in 0..m {
                out[r * m + j] = out[r * m + j] / s;
            }
        }
        let probs = Tensor::from_vec(&shape, out);
        let pc = probs.clone();
        self.push(
            probs,
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                let pd = pc.data();
                let mut gl = vec![T::ZERO; n * m];
                for r in 0..n {
                    let mut dot = T::ZERO;
                    for j in 0..m {
                        dot += gd[r * m + j] * pd[r * m + j];
                    }
                    for j in 0..m {
                        gl[r * m + j] = pd[r * m + j] * (gd[r * m + j] - dot);
                    }
                }
                sink(logits, Tensor::from_vec(&shape, gl));
            })),
        )
    }

    /// Fixed sparse linear gather: input viewed as [in_rows, C], output
    /// [out_rows, C] with out[o] = sum w * in[idx].
    pub fn gather(&mut self, x: Var, map: Arc<LinearMap>) -> Var {
        let xv = self.nodes[x.0].value.clone();
        let in_rows = map.in_rows;
        assert_eq!(xv.numel() % in_rows, 0);
        let c = xv.numel() / in_rows;
        let out_rows = map.out_rows();
        let xd = xv.data();
        let mut out = vec![T::ZERO; out_rows * c];
        for (o, taps) in map.taps.iter().enumerate() {
            for &(idx, wt) in taps {
                let wt = T::from_f64(wt);
                let src = idx as usize * c;
                for k in 0..c {
                    out[o * c + k] += wt * xd[src + k];
                }
            }
        }
        let x_shape = xv.shape().to_vec();
        let map_b = Arc::clone(&map);
        self.push(
            Tensor::from_vec(&[out_rows, c], out),
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                let mut gx = vec![T::ZERO; in_rows * c];
                for (o, taps) in map_b.taps.iter().enumerate() {
                    for &(idx, wt) in taps {
                        let wt = T::from_f64(wt);
                        let dst = idx as usize * c;
                        for k in 0..c {
                            gx[dst + k] += wt * gd[o * c + k];
                        }
                    }
                }
                sink(x, Tensor::from_vec(&x_shape, gx));
            })),
        )
    }
}
