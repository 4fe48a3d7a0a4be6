//! Variational autoencoder for range images: downsamples 16x256x2 to an
//! 8x128x4 latent with horizontally circular convolutions throughout, and
//! mirrors back up with a final sigmoid.

use super::blocks::{Conv, NetCtx};
use super::store::ParamStore;
use crate::autodiff::{ConvOpts, Scalar, Tensor, Var};
use crate::rng::CounterRng;

/// Weight of the KL term in the ELBO loss.
pub const KL_WEIGHT: f64 = 1e-4;
/// Latent channel count.
pub const LATENT_CHANNELS: usize = 4;

#[derive(Debug, Clone)]
pub struct RangeVae {
    e1: Conv,
    e2: Conv,
    e3: Conv,
    e4: Conv,
    d1: Conv,
    d2: Conv,
    d3: Conv,
    d4: Conv,
}

impl RangeVae {
    pub fn def<T: Scalar>(store: &mut ParamStore<T>, rng: &mut CounterRng) -> Self {
        let wrap = true;
        Self {
            e1: Conv::def(store, rng, "vae.e1", 2, 32, ConvOpts::k3(1, wrap)),
            e2: Conv::def(store, rng, "vae.e2", 32, 64, ConvOpts::k3(2, wrap)),
            e3: Conv::def(store, rng, "vae.e3", 64, 64, ConvOpts::k3(1, wrap)),
            e4: Conv::def(store, rng, "vae.e4", 64, 2 * LATENT_CHANNELS, ConvOpts::k1()),
            d1: Conv::def(store, rng, "vae.d1", LATENT_CHANNELS, 64, ConvOpts::k3(1, wrap)),
            d2: Conv::def(store, rng, "vae.d2", 64, 32, ConvOpts::k3(1, wrap)),
            d3: Conv::def(store, rng, "vae.d3", 32, 32, ConvOpts::k3(1, wrap)),
            d4: Conv::def(store, rng, "vae.d4", 32, 2, ConvOpts::k3(1, wrap)),
        }
    }

    /// x [H, W, 2] -> (mean, logvar), each [H/2, W/2, 4].
    pub fn encode<T: Scalar>(&self, ctx: &mut NetCtx<T>, x: Var) -> (Var, Var) {
        let h = self.e1.forward(ctx, x);
        let h = ctx.g.silu(h);
        let h = self.e2.forward(ctx, h);
        let h = ctx.g.silu(h);
        let h = self.e3.forward(ctx, h);
        let h = ctx.g.silu(h);
        let h = self.e4.forward(ctx, h);
        let mean = ctx.g.slice_axis(h, 2, 0, LATENT_CHANNELS);
        let logvar = ctx.g.slice_axis(h, 2, LATENT_CHANNELS, LATENT_CHANNELS);
        (mean, logvar)
    }

    /// mean + exp(logvar / 2) * eps with caller-supplied noise.
    pub fn reparameterize<T: Scalar>(
        &self,
        ctx: &mut NetCtx<T>,
        mean: Var,
        logvar: Var,
        eps: &Tensor<T>,
    ) -> Var {
        let half = ctx.g.scale(logvar, 0.5);
        let std = ctx.g.exp(half);
        let noise = ctx.constant(eps.clone());
        let scaled = ctx.g.mul(std, noise);
        ctx.g.add(mean, scaled)
    }

    /// z [h, w, 4] -> reconstruction [2h, 2w, 2] in (0, 1).
    pub fn decode<T: Scalar>(&self, ctx: &mut NetCtx<T>, z: Var) -> Var {
        let h = self.d1.forward(ctx, z);
        let h = ctx.g.silu(h);
        let h = ctx.g.upsample2x(h);
        let h = self.d2.forward(ctx, h);
        let h = ctx.g.silu(h);
        let h = self.d3.forward(ctx, h);
        let h = ctx.g.silu(h);
        let h = self.d4.forward(ctx, h);
        ctx.g.sigmoid(h)
    }

    /// Closed-form KL(N(mean, exp(logvar)) || N(0, 1)), summed over the
    /// latent: 0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2).
    pub fn kl<T: Scalar>(&self, ctx: &mut NetCtx<T>, mean: Var, logvar: Var) -> Var {
        let mu2 = ctx.g.mul(mean, mean);
        let var = ctx.g.exp(logvar);
        let s = ctx.g.add(mu2, var);
        let s = ctx.g.add_const(s, -1.0);
        let s = ctx.g.sub(s, logvar);
        let total = ctx.g.sum(s);
        ctx.g.scale(total, 0.5)
    }

    /// (total, recon mse, kl) for one range image.
    pub fn loss<T: Scalar>(
        &self,
        ctx: &mut NetCtx<T>,
        x: Var,
        eps: &Tensor<T>,
    ) -> (Var, Var, Var) {
        let (mean, logvar) = self.encode(ctx, x);
        let z = self.reparameterize(ctx, mean, logvar, eps);
        let recon = self.decode(ctx, z);
        let mse = ctx.g.mse(recon, x);
        let kl = self.kl(ctx, mean, logvar);
        let weighted = ctx.g.scale(kl, KL_WEIGHT);
        let total = ctx.g.add(mse, weighted);
        (total, mse, kl)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netblocks::store::ParamStore;
    use approx::assert_relative_eq;

    fn setup() -> (ParamStore<f64>, RangeVae) {
        let mut rng = CounterRng::for_stream(3, "init");
        let mut store = ParamStore::new(CounterRng::new(0));
        let vae = RangeVae::def(&mut store, &mut rng);
        (store, vae)
    }

    fn random_input(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = CounterRng::new(seed);
        Tensor::from_vec(
            &[h, w, 2],
            (0..h * w * 2).map(|_| rng.uniform()).collect(),
        )
    }

    #[test]
    fn shapes_and_range() {
        let (store, vae) = setup();
        let mut ctx = NetCtx::new(&store);
        let x = ctx.constant(random_input(1, 16, 64));
        let (mean, logvar) = vae.encode(&mut ctx, x);
        assert_eq!(ctx.g.shape(mean), &[8, 32, 4]);
        assert_eq!(ctx.g.shape(logvar), &[8, 32, 4]);
        let eps = Tensor::zeros(&[8, 32, 4]);
        let z = vae.reparameterize(&mut ctx, mean, logvar, &eps);
        // logvar exp(0.5 lv) * 0 == 0 -> sample == mean.
        for (a, b) in ctx.g.value(z).data().iter().zip(ctx.g.value(mean).data()) {
            assert_eq!(a, b);
        }
        let out = vae.decode(&mut ctx, z);
        assert_eq!(ctx.g.shape(out), &[16, 64, 2]);
        assert!(ctx.g.value(out).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn kl_closed_form() {
        let (store, vae) = setup();
        // mean = 0, logvar = 0 -> KL = 0.
        let mut ctx = NetCtx::new(&store);
        let mean = ctx.constant(Tensor::zeros(&[2, 2, 1]));
        let logvar = ctx.constant(Tensor::zeros(&[2, 2, 1]));
        let kl = vae.kl(&mut ctx, mean, logvar);
        assert_eq!(ctx.g.value(kl).item(), 0.0);

        // Random case against a direct formula evaluation.
        let mut rng = CounterRng::new(4);
        let mu: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let lv: Vec<f64> = (0..8).map(|_| rng.normal() * 0.3).collect();
        let want: f64 = mu
            .iter()
            .zip(&lv)
            .map(|(&m, &l)| 0.5 * (m * m + l.exp() - 1.0 - l))
            .sum();
        let mut ctx = NetCtx::new(&store);
        let mean = ctx.constant(Tensor::from_vec(&[8], mu));
        let logvar = ctx.constant(Tensor::from_vec(&[8], lv));
        let kl = vae.kl(&mut ctx, mean, logvar);
        assert_relative_eq!(ctx.g.value(kl).item(), want, epsilon = 1e-7);
    }

    #[test]
    fn loss_nonnegative_and_finite() {
        let (store, vae) = setup();
        let mut ctx = NetCtx::new(&store);
        let x = ctx.constant(random_input(5, 16, 64));
        let mut rng = CounterRng::new(6);
        let eps = Tensor::from_vec(
            &[8, 32, 4],
            (0..8 * 32 * 4).map(|_| rng.normal()).collect(),
        );
        let (total, recon, kl) = vae.loss(&mut ctx, x, &eps);
        assert!(ctx.g.value(total).item() >= 0.0);
        assert!(ctx.g.value(recon).item() >= 0.0);
        assert!(ctx.g.value(kl).item() >= 0.0);
        assert!(ctx.g.value(total).item().is_finite());
    }

    #[test]
    fn encoder_shift_equivariance() {
        // Rotating the input by 2 columns rotates the latent mean by 1.
        let (store, vae) = setup();
        let x = random_input(7, 16, 64);
        let run = |xt: &Tensor<f64>| {
            let mut ctx = NetCtx::new(&store);
            let xv = ctx.constant(xt.clone());
            let (mean, _) = vae.encode(&mut ctx, xv);
            ctx.g.value(mean).data().to_vec()
        };
        let base = run(&x);
        let (h, w, c) = (16, 64, 2);
        let mut rot = vec![0.0; h * w * c];
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    rot[(i * w + (j + 2) % w) * c + k] = x.data()[(i * w + j) * c + k];
                }
            }
        }
        let shifted = run(&Tensor::from_vec(&[h, w, c], rot));
        let (lh, lw, lc) = (8, 32, 4);
        for i in 0..lh {
            for j in 0..lw {
                for k in 0..lc {
                    let a = base[(i * lw + j) * lc + k];
                    let b = shifted[(i * lw + (j + 1) % lw) * lc + k];
                    assert_relative_eq!(a, b, epsilon = 1e-12);
                }
            }
        }
    }
}
