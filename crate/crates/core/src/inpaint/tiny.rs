//! A small trainable noise predictor: 3x3 conv, tanh, causal temporal
//! attention with a residual connection, 3x3 conv. Gradients are computed by
//! hand.

use ndarray::{Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::attention::{attention_backward, attention_with_cache, AttentionCache};
use super::{masked_loss, q_sample, Conditioning, DiffusionSchedule, LatentClip, LossNormalization, NoisePredictor};
use crate::error::{Error, Result};
use crate::optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TinyConfig {
    pub channels: usize,
    pub hidden: usize,
    pub head_dim: usize,
    pub seed: u64,
}

impl Default for TinyConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            hidden: 8,
            head_dim: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    w2: usize,
    b2: usize,
    len: usize,
}

impl Layout {
    fn new(cfg: &TinyConfig) -> Self {
        let (c, h, d) = (cfg.channels, cfg.hidden, cfg.head_dim);
        let cin = 2 * c + 2;
        let w1 = 0;
        let b1 = w1 + h * cin * 9;
        let wq = b1 + h;
        let wk = wq + h * d;
        let wv = wk + h * d;
        let wo = wv + h * d;
        let w2 = wo + d * h;
        let b2 = w2 + c * h * 9;
        Self {
            w1,
            b1,
            wq,
            wk,
            wv,
            wo,
            w2,
            b2,
            len: b2 + c,
        }
    }
}

/// Trainable predictor with all weights in one flat vector.
#[derive(Debug, Clone)]
pub struct TinyPredictor {
    pub config: TinyConfig,
    pub params: Vec<f64>,
    layout: Layout,
}

/// Loss per training iteration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

struct PixelCache {
    hv: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    o: Array2<f64>,
    attn: AttentionCache,
}

struct Cache {
    x: Array4<f64>,
    h1: Array4<f64>,
    h2: Array4<f64>,
    pixels: Vec<PixelCache>,
}

fn conv3x3(x: &Array4<f64>, w: &[f64], b: &[f64], cout: usize) -> Array4<f64> {
    let (f, cin, h, wd) = x.dim();
    let mut out = Array4::zeros((f, cout, h, wd));
    for fi in 0..f {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b[o];
                    for i in 0..cin {
                        for ky in 0..3 {
                            let yy = y as isize + ky as isize - 1;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let xs = xx as isize + kx as isize - 1;
                                if xs < 0 || xs >= wd as isize {
                                    continue;
                                }
                                acc += w[((o * cin + i) * 3 + ky) * 3 + kx] * x[[fi, i, yy as usize, xs as usize]];
                            }
                        }
                    }
                    out[[fi, o, y, xx]] = acc;
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// requested.
fn conv3x3_backward(
    x: &Array4<f64>,
    w: &[f64],
    g: &Array4<f64>,
    gw: &mut [f64],
    gb: &mut [f64],
    want_input: bool,
) -> Option<Array4<f64>> {
    let (f, cin, h, wd) = x.dim();
    let cout = g.dim().1;
    let mut gx = want_input.then(|| Array4::zeros(x.dim()));
    for fi in 0..f {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let go = g[[fi, o, y, xx]];
                    if go == 0.0 {
                        continue;
                    }
                    gb[o] += go;
                    for i in 0..cin {
                        for ky in 0..3 {
                            let yy = y as isize + ky as isize - 1;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let xs = xx as isize + kx as isize - 1;
                                if xs < 0 || xs >= wd as isize {
                                    continue;
                                }
                                let wi = ((o * cin + i) * 3 + ky) * 3 + kx;
                                let src = [fi, i, yy as usize, xs as usize];
                                gw[wi] += go * x[src];
                                if let Some(gx) = gx.as_mut() {
                                    gx[src] += go * w[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

impl TinyPredictor {
    pub fn new(config: TinyConfig) -> Self {
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = vec![0.0; layout.len];
        let cin = 2 * config.channels + 2;
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, gain: f64| {
            let n = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("finite std");
            for p in &mut params[range] {
                *p = n.sample(&mut rng);
            }
        };
        let l = layout;
        fill(l.w1..l.b1, cin * 9, 1.0);
        fill(l.wq..l.wk, config.hidden, 1.0);
        fill(l.wk..l.wv, config.hidden, 1.0);
        fill(l.wv..l.wo, config.hidden, 1.0);
        fill(l.wo..l.w2, config.head_dim, 0.5);
        fill(l.w2..l.b2, config.hidden * 9, 1.0);
        Self { config, params, layout }
    }

    pub fn param_count(&self) -> usize {
        self.layout.len
    }

    fn input(&self, z_t: &Array4<f64>, t: usize, cond: &Conditioning, schedule: &DiffusionSchedule) -> Result<Array4<f64>> {
        let (f, c, h, w) = z_t.dim();
        if c != self.config.channels || cond.masked_latents.dim() != z_t.dim() || cond.mask.dim() != (f, 1, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "tiny predictor expects {} channels; got latents {:?}, mask {:?}",
                self.config.channels,
                z_t.dim(),
                cond.mask.dim()
            )));
        }
        let mut x = Array4::zeros((f, 2 * c + 2, h, w));
        x.slice_mut(ndarray::s![.., 0..c, .., ..]).assign(z_t);
        x.slice_mut(ndarray::s![.., c..2 * c, .., ..]).assign(&cond.masked_latents);
        x.slice_mut(ndarray::s![.., 2 * c..2 * c + 1, .., ..]).assign(&cond.mask);
        x.index_axis_mut(Axis(1), 2 * c + 1).fill(t as f64 / schedule.steps() as f64);
        Ok(x)
    }

    fn mat(&self, start: usize, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_vec((rows, cols), self.params[start..start + rows * cols].to_vec()).expect("layout")
    }

    fn forward(&self, x: Array4<f64>) -> Result<(Array4<f64>, Cache)> {
        let (cfg, l) = (self.config, self.layout);
        let (f, _, h, w) = x.dim();
        let mut h1 = conv3x3(&x, &self.params[l.w1..l.b1], &self.params[l.b1..l.wq], cfg.hidden);
        h1.mapv_inplace(f64::tanh);
        let (wq, wk, wv) = (
            self.mat(l.wq, cfg.hidden, cfg.head_dim),
            self.mat(l.wk, cfg.hidden, cfg.head_dim),
            self.mat(l.wv, cfg.hidden, cfg.head_dim),
        );
        let wo = self.mat(l.wo, cfg.head_dim, cfg.hidden);
        let mut h2 = h1.clone();
        let mut pixels = Vec::with_capacity(h * w);
        for y in 0..h {
            for xx in 0..w {
                let hv = Array2::from_shape_fn((f, cfg.hidden), |(fi, c)| h1[[fi, c, y, xx]]);
                let (q, k, v) = (hv.dot(&wq), hv.dot(&wk), hv.dot(&wv));
                let (o, attn) = attention_with_cache(q.view(), k.view(), v.view())?;
                let delta = o.dot(&wo);
                for fi in 0..f {
                    for c in 0..cfg.hidden {
                        h2[[fi, c, y, xx]] += delta[[fi, c]];
                    }
                }
                pixels.push(PixelCache { hv, q, k, v, o, attn });
            }
        }
        let out = conv3x3(&h2, &self.params[l.w2..l.b2], &self.params[l.b2..], cfg.channels);
        Ok((out, Cache { x, h1, h2, pixels }))
    }

    fn backward(&self, cache: &Cache, grad_out: &Array4<f64>) -> Vec<f64> {
        let (cfg, l) = (self.config, self.layout);
        let mut g = vec![0.0; l.len];
        let (gw2, rest) = g[l.w2..].split_at_mut(l.b2 - l.w2);
        let g_h2 = conv3x3_backward(&cache.h2, &self.params[l.w2..l.b2], grad_out, gw2, rest, true).expect("requested");

        let (f, _, h, w) = cache.h1.dim();
        let (wq, wk, wv) = (
            self.mat(l.wq, cfg.hidden, cfg.head_dim),
            self.mat(l.wk, cfg.hidden, cfg.head_dim),
            self.mat(l.wv, cfg.hidden, cfg.head_dim),
        );
        let wo = self.mat(l.wo, cfg.head_dim, cfg.hidden);
        let mut g_wq = Array2::<f64>::zeros(wq.dim());
        let mut g_wk = Array2::<f64>::zeros(wk.dim());
        let mut g_wv = Array2::<f64>::zeros(wv.dim());
        let mut g_wo = Array2::<f64>::zeros(wo.dim());
        let mut g_a1 = g_h2.clone();
        for y in 0..h {
            for xx in 0..w {
                let pc = &cache.pixels[y * w + xx];
                let g_delta = Array2::from_shape_fn((f, cfg.hidden), |(fi, c)| g_h2[[fi, c, y, xx]]);
                g_wo += &pc.o.t().dot(&g_delta);
                let g_o = g_delta.dot(&wo.t());
                let (gq, gk, gv) = attention_backward(pc.q.view(), pc.k.view(), pc.v.view(), &pc.attn, g_o.view());
                g_wq += &pc.hv.t().dot(&gq);
                g_wk += &pc.hv.t().dot(&gk);
                g_wv += &pc.hv.t().dot(&gv);
                let g_hv = gq.dot(&wq.t()) + gk.dot(&wk.t()) + gv.dot(&wv.t());
                for fi in 0..f {
                    for c in 0..cfg.hidden {
                        g_a1[[fi, c, y, xx]] += g_hv[[fi, c]];
                    }
                }
            }
        }
        ndarray::Zip::from(&mut g_a1).and(&cache.h1).for_each(|g, &t| *g *= 1.0 - t * t);
        let (gw1, rest) = g[l.w1..].split_at_mut(l.b1 - l.w1);
        conv3x3_backward(&cache.x, &self.params[l.w1..l.b1], &g_a1, gw1, &mut rest[..cfg.hidden], false);
        for (dst, src) in [(l.wq, &g_wq), (l.wk, &g_wk), (l.wv, &g_wv), (l.wo, &g_wo)] {
            g[dst..dst + src.len()].copy_from_slice(src.as_slice().expect("standard layout"));
        }
        g
    }

    /// Masked noise loss on one clip at timestep `t` with noise `eps`, and its
    /// gradient with respect to every weight.
    pub fn loss_and_grad(
        &self,
        clip: &LatentClip,
        t: usize,
        eps: &Array4<f64>,
        schedule: &DiffusionSchedule,
    ) -> Result<(f64, Vec<f64>)> {
        let cond = Conditioning::from_clip(clip);
        let z_t = q_sample(&clip.latents, t, eps, schedule)?;
        let x = self.input(&z_t, t, &cond, schedule)?;
        let (out, cache) = self.forward(x)?;
        let loss = masked_loss(eps, &out, &clip.mask, LossNormalization::AllElements)?;
        let n = out.len() as f64;
        let m = clip.mask.broadcast(out.dim()).expect("validated clip");
        let mut grad_out = Array4::zeros(out.dim());
        ndarray::Zip::from(&mut grad_out)
            .and(&out)
            .and(eps)
            .and(&m)
            .for_each(|g, &o, &e, &w| *g = 2.0 * w * w * (o - e) / n);
        Ok((loss, self.backward(&cache, &grad_out)))
    }

    /// Adam training on random timesteps and noise draws.
    pub fn train(
        &mut self,
        clips: &[LatentClip],
        schedule: &DiffusionSchedule,
        iterations: usize,
        lr: f64,
        seed: u64,
    ) -> Result<TrainLog> {
        if clips.is_empty() {
            return Err(Error::Precondition("no training clips".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adam = Adam::new(self.params.len());
        let mut log = TrainLog::default();
        for _ in 0..iterations {
            let clip = &clips[rng.random_range(0..clips.len())];
            let t = rng.random_range(1..=schedule.steps());
            let eps = Array4::from_shape_simple_fn(clip.latents.dim(), || StandardNormal.sample(&mut rng));
            let (loss, grad) = self.loss_and_grad(clip, t, &eps, schedule)?;
            adam.update(&mut self.params, &grad, lr);
            log.losses.push(loss);
        }
        Ok(log)
    }
}

impl NoisePredictor for TinyPredictor {
    fn predict(&self, z_t: &Array4<f64>, t: usize, cond: &Conditioning, schedule: &DiffusionSchedule) -> Result<Array4<f64>> {
        let x = self.input(z_t, t, cond, schedule)?;
        Ok(self.forward(x)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(seed: u64) -> LatentClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latents = Array4::from_shape_simple_fn((3, 2, 4, 5), || rng.random::<f64>());
        let mask = Array4::from_shape_fn((3, 1, 4, 5), |(f, _, y, x)| if (x + y + f) % 3 == 0 { 1.0 } else { 0.0 });
        LatentClip::new(latents, mask).unwrap()
    }

    fn small() -> TinyPredictor {
        TinyPredictor::new(TinyConfig {
            channels: 2,
            hidden: 4,
            head_dim: 3,
            seed: 11,
        })
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = small();
        let c = clip(1);
        let sched = DiffusionSchedule::linear(50, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eps = Array4::from_shape_simple_fn(c.latents.dim(), || StandardNormal.sample(&mut rng));
        let (_, grad) = net.loss_and_grad(&c, 20, &eps, &sched).unwrap();
        let h = 1e-6;
        let l = net.layout;
        let probes = [l.w1 + 3, l.b1 + 1, l.wq + 2, l.wk + 5, l.wv + 7, l.wo + 4, l.w2 + 10, l.b2 + 1, l.len - 1];
        for &i in &probes {
            let mut p = net.clone();
            p.params[i] += h;
            let mut m = net.clone();
            m.params[i] -= h;
            let fd = (p.loss_and_grad(&c, 20, &eps, &sched).unwrap().0 - m.loss_and_grad(&c, 20, &eps, &sched).unwrap().0)
                / (2.0 * h);
            let err = (fd - grad[i]).abs();
            assert!(err < 1e-7 + 1e-4 * fd.abs(), "param {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn training_reduces_loss() {
        let mut net = small();
        let clips = [clip(3), clip(4)];
        let sched = DiffusionSchedule::linear(50, 1e-4, 0.02).unwrap();
        let log = net.train(&clips, &sched, 300, 1e-2, 5).unwrap();
        let head: f64 = log.losses[..30].iter().sum::<f64>() / 30.0;
        let tail: f64 = log.losses[270..].iter().sum::<f64>() / 30.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn prediction_is_causal_in_time() {
        let net = small();
        let c = clip(7);
        let sched = DiffusionSchedule::linear(50, 1e-4, 0.02).unwrap();
        let cond = Conditioning::from_clip(&c);
        let a = net.predict(&c.latents, 10, &cond, &sched).unwrap();
        let mut z = c.latents.clone();
        z.index_axis_mut(Axis(0), 2).mapv_inplace(|v| v + 3.0);
        let mut cond2 = cond.clone();
        cond2.mask.index_axis_mut(Axis(0), 2).fill(1.0);
        let b = net.predict(&z, 10, &cond2, &sched).unwrap();
        assert_eq!(a.index_axis(Axis(0), 0), b.index_axis(Axis(0), 0));
        assert_eq!(a.index_axis(Axis(0), 1), b.index_axis(Axis(0), 1));
    }
}
