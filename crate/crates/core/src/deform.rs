//! Learnable deformation: every splat carries eleven banks of weighted
//! Gaussian basis functions over normalized time, one per deformed scalar
//! channel (center xyz, raw tangent-u xyz, raw tangent-v xyz, scale u, scale v).
//! The banks are added to the canonical attributes; the frame is then
//! re-orthonormalized and the scales pass through a smooth positive floor.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::primitive::{orthonormalize_frame, orthonormalize_frame_backward, sigmoid, Gaussian2D, GaussianGrad, Vec3};

pub const CHANNELS: usize = 11;
pub const CH_POSITION: usize = 0;
pub const CH_TANGENT_U: usize = 3;
pub const CH_TANGENT_V: usize = 6;
pub const CH_SCALE_U: usize = 9;
pub const CH_SCALE_V: usize = 10;

pub const DEFAULT_BASIS: usize = 16;
pub const MIN_WIDTH: f64 = 1e-4;
/// Sharpness of the scale floor.
pub const SCALE_FLOOR_SHARPNESS: f64 = 50.0;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Basis width from its unconstrained parameter: `1e-4 + softplus(raw)`.
pub fn width_from_param(raw: f64) -> f64 {
    MIN_WIDTH + softplus(raw)
}

pub fn width_to_param(sigma: f64) -> f64 {
    softplus_inverse((sigma - MIN_WIDTH).max(f64::MIN_POSITIVE))
}

/// Positive floor `ln(1 + exp(k y)) / k`, exact identity once `k y > 40`.
fn floor_fn(y: f64) -> (f64, f64) {
    let ky = SCALE_FLOOR_SHARPNESS * y;
    if ky > 40.0 {
        (y, 1.0)
    } else {
        (softplus(ky) / SCALE_FLOOR_SHARPNESS, sigmoid(ky))
    }
}

/// Deformed scale `s * floor((s + delta) / s)`. Returns the value and the
/// partial derivatives with respect to `s` and `delta`.
pub fn floored_scale(s: f64, delta: f64) -> (f64, f64, f64) {
    let y = (s + delta) / s;
    let (f, df) = floor_fn(y);
    (s * f, f - df * delta / s, df)
}

/// Borrowed view of one bank of basis functions.
#[derive(Debug, Clone, Copy)]
pub struct BasisBank<'a> {
    pub weights: &'a [f64],
    pub centers: &'a [f64],
    pub width_params: &'a [f64],
}

impl BasisBank<'_> {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn width(&self, j: usize) -> f64 {
        width_from_param(self.width_params[j])
    }

    /// Upper bound on `|d/dt eval_basis|`: each term's slope peaks at
    /// `|w| / (sigma sqrt(e))`.
    pub fn slope_bound(&self) -> f64 {
        (0..self.len())
            .map(|j| self.weights[j].abs() / (self.width(j) * std::f64::consts::E.sqrt()))
            .sum()
    }

    /// Upper bound on `|d2/dt2 eval_basis|`: each term's curvature peaks at
    /// `|w| / sigma^2` (at the center).
    pub fn curvature_bound(&self) -> f64 {
        (0..self.len())
            .map(|j| self.weights[j].abs() / self.width(j).powi(2))
            .sum()
    }
}

/// `sum_j w_j exp(-(t - theta_j)^2 / (2 sigma_j^2))`.
pub fn eval_basis(bank: &BasisBank<'_>, t: f64) -> f64 {
    let mut acc = 0.0;
    for j in 0..bank.len() {
        let s = bank.width(j);
        let d = t - bank.centers[j];
        acc += bank.weights[j] * (-(d * d) / (2.0 * s * s)).exp();
    }
    acc
}

/// Per-splat deformation banks stored as flat arrays indexed by
/// `(splat * CHANNELS + channel) * basis + j`.
///
/// The same layout is used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformField {
    basis: usize,
    pub weights: Vec<f64>,
    pub centers: Vec<f64>,
    pub width_params: Vec<f64>,
}

impl DeformField {
    /// Identity deformation: zero weights, centers spaced uniformly on
    /// `[0,1]`, widths `1/basis`.
    pub fn identity(count: usize, basis: usize) -> Self {
        assert!(basis >= 1, "need at least one basis function");
        let n = count * CHANNELS * basis;
        let raw = width_to_param(1.0 / basis as f64);
        let mut centers = Vec::with_capacity(n);
        for _ in 0..count * CHANNELS {
            for j in 0..basis {
                centers.push(if basis == 1 {
                    0.5
                } else {
                    j as f64 / (basis - 1) as f64
                });
            }
        }
        Self {
            basis,
            weights: vec![0.0; n],
            centers,
            width_params: vec![raw; n],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let n = self.weights.len();
        Self {
            basis: self.basis,
            weights: vec![0.0; n],
            centers: vec![0.0; n],
            width_params: vec![0.0; n],
        }
    }

    pub fn from_parts(
        basis: usize,
        weights: Vec<f64>,
        centers: Vec<f64>,
        width_params: Vec<f64>,
    ) -> Result<Self> {
        let n = weights.len();
        if basis == 0 || n % (CHANNELS * basis) != 0 || centers.len() != n || width_params.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "deform arrays of length {n}/{}/{} with basis {basis}",
                centers.len(),
                width_params.len()
            )));
        }
        Ok(Self {
            basis,
            weights,
            centers,
            width_params,
        })
    }

    pub fn basis(&self) -> usize {
        self.basis
    }

    pub fn splat_count(&self) -> usize {
        self.weights.len() / (CHANNELS * self.basis)
    }

    pub fn bank_count(&self) -> usize {
        self.weights.len() / self.basis
    }

    fn range(&self, splat: usize) -> std::ops::Range<usize> {
        let n = CHANNELS * self.basis;
        splat * n..(splat + 1) * n
    }

    pub fn bank(&self, splat: usize, channel: usize) -> BasisBank<'_> {
        let start = (splat * CHANNELS + channel) * self.basis;
        let r = start..start + self.basis;
        BasisBank {
            weights: &self.weights[r.clone()],
            centers: &self.centers[r.clone()],
            width_params: &self.width_params[r],
        }
    }

    /// Appends a copy of splat `src`'s banks (used by densification).
    pub fn push_copy_of(&mut self, src: usize) {
        let r = self.range(src);
        self.weights.extend_from_within(r.clone());
        self.centers.extend_from_within(r.clone());
        self.width_params.extend_from_within(r);
    }

    /// Keeps only the splats for which `keep` is true.
    pub fn retain(&mut self, keep: &[bool]) {
        let n = CHANNELS * self.basis;
        for v in [&mut self.weights, &mut self.centers, &mut self.width_params] {
            let mut out = Vec::with_capacity(v.len());
            for (i, chunk) in v.chunks(n).enumerate() {
                if keep[i] {
                    out.extend_from_slice(chunk);
                }
            }
            *v = out;
        }
    }

    fn channel_values(&self, splat: usize, t: f64) -> [f64; CHANNELS] {
        let mut out = [0.0; CHANNELS];
        for (ch, o) in out.iter_mut().enumerate() {
            *o = eval_basis(&self.bank(splat, ch), t);
        }
        out
    }
}

/// Deforms one splat to time `t`.
pub fn deform_gaussian(g: &Gaussian2D, field: &DeformField, splat: usize, t: f64) -> Result<Gaussian2D> {
    let d = field.channel_values(splat, t);
    let v3 = |c: usize| Vec3::new(d[c], d[c + 1], d[c + 2]);
    let u_raw = g.tangent_u + v3(CH_TANGENT_U);
    let v_raw = g.tangent_v + v3(CH_TANGENT_V);
    let (tu, tv) = orthonormalize_frame(&u_raw, &v_raw)
        .map_err(|_| Error::DegenerateDeformedFrame { index: splat })?;
    Ok(Gaussian2D {
        center: g.center + v3(CH_POSITION),
        tangent_u: tu,
        tangent_v: tv,
        scale_u: floored_scale(g.scale_u, d[CH_SCALE_U]).0,
        scale_v: floored_scale(g.scale_v, d[CH_SCALE_V]).0,
        opacity: g.opacity,
        color: g.color,
    })
}

/// Mutable gradient slices covering one splat's eleven banks.
pub struct BankGradMut<'a> {
    pub weights: &'a mut [f64],
    pub centers: &'a mut [f64],
    pub width_params: &'a mut [f64],
}

impl DeformField {
    /// Per-splat gradient slices, for parallel accumulation.
    pub fn par_splat_grads_mut(&mut self) -> impl IndexedParallelIterator<Item = BankGradMut<'_>> {
        let n = CHANNELS * self.basis;
        self.weights
            .par_chunks_mut(n)
            .zip(self.centers.par_chunks_mut(n))
            .zip(self.width_params.par_chunks_mut(n))
            .map(|((weights, centers), width_params)| BankGradMut {
                weights,
                centers,
                width_params,
            })
    }

    pub fn splat_grads_mut(&mut self, splat: usize) -> BankGradMut<'_> {
        let r = self.range(splat);
        BankGradMut {
            weights: &mut self.weights[r.clone()],
            centers: &mut self.centers[r.clone()],
            width_params: &mut self.width_params[r],
        }
    }
}

/// Backward of [`deform_gaussian`]. Returns the gradient on the canonical
/// splat and accumulates bank gradients for `splat` into `grad_banks`.
pub fn deform_gaussian_backward(
    g: &Gaussian2D,
    field: &DeformField,
    splat: usize,
    t: f64,
    grad_out: &GaussianGrad,
    grad_banks: BankGradMut<'_>,
) -> GaussianGrad {
    let d = field.channel_values(splat, t);
    let v3 = |c: usize| Vec3::new(d[c], d[c + 1], d[c + 2]);
    let u_raw = g.tangent_u + v3(CH_TANGENT_U);
    let v_raw = g.tangent_v + v3(CH_TANGENT_V);
    let (gu, gv) = orthonormalize_frame_backward(&u_raw, &v_raw, &grad_out.tangent_u, &grad_out.tangent_v);
    let (_, dsu_ds, dsu_dd) = floored_scale(g.scale_u, d[CH_SCALE_U]);
    let (_, dsv_ds, dsv_dd) = floored_scale(g.scale_v, d[CH_SCALE_V]);

    let mut channel_grad = [0.0; CHANNELS];
    for k in 0..3 {
        channel_grad[CH_POSITION + k] = grad_out.center[k];
        channel_grad[CH_TANGENT_U + k] = gu[k];
        channel_grad[CH_TANGENT_V + k] = gv[k];
    }
    channel_grad[CH_SCALE_U] = grad_out.scale_u * dsu_dd;
    channel_grad[CH_SCALE_V] = grad_out.scale_v * dsv_dd;

    let basis = field.basis;
    for (ch, &gch) in channel_grad.iter().enumerate() {
        if gch == 0.0 {
            continue;
        }
        let bank = field.bank(splat, ch);
        for j in 0..basis {
            let k = ch * basis + j;
            let s = bank.width(j);
            let dt = t - bank.centers[j];
            let e = (-(dt * dt) / (2.0 * s * s)).exp();
            let w = bank.weights[j];
            grad_banks.weights[k] += gch * e;
            grad_banks.centers[k] += gch * w * e * dt / (s * s);
            grad_banks.width_params[k] += gch * w * e * dt * dt / (s * s * s) * sigmoid(bank.width_params[j]);
        }
    }

    GaussianGrad {
        center: grad_out.center,
        tangent_u: gu,
        tangent_v: gv,
        scale_u: grad_out.scale_u * dsu_ds,
        scale_v: grad_out.scale_v * dsv_ds,
        opacity: grad_out.opacity,
        color: grad_out.color,
    }
}

/// Deforms every splat to time `t`; errors name the offending splat.
pub fn deform_scene(gaussians: &[Gaussian2D], field: &DeformField, t: f64) -> Result<Vec<Gaussian2D>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Precondition(format!("time {t} outside [0,1]")));
    }
    if field.splat_count() != gaussians.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} deform bank sets for {} gaussians",
            field.splat_count(),
            gaussians.len()
        )));
    }
    gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| deform_gaussian(g, field, i, t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(w: f64, theta: f64, sigma: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (vec![w], vec![theta], vec![width_to_param(sigma)])
    }

    fn gaussian() -> Gaussian2D {
        Gaussian2D {
            center: Vec3::zeros(),
            tangent_u: Vec3::x(),
            tangent_v: Vec3::y(),
            scale_u: 0.8,
            scale_v: 0.4,
            opacity: 0.6,
            color: Vec3::new(0.1, 0.5, 0.9),
        }
    }

    #[test]
    fn basis_examples() {
        let (w, c, s) = single(0.0, 0.5, 0.1);
        let b = BasisBank { weights: &w, centers: &c, width_params: &s };
        assert_eq!(eval_basis(&b, 0.3), 0.0);
        let (w, c, s) = single(2.0, 0.5, 0.1);
        let b = BasisBank { weights: &w, centers: &c, width_params: &s };
        assert!((eval_basis(&b, 0.5) - 2.0).abs() < 1e-12);
        assert!((eval_basis(&b, 0.6) - 1.21306).abs() < 1e-5);
    }

    #[test]
    fn width_parametrization_round_trips() {
        for sigma in [1e-3, 0.0625, 0.1, 0.5, 3.0] {
            assert!((width_from_param(width_to_param(sigma)) - sigma).abs() < 1e-12);
        }
        assert!(width_from_param(-1e3) >= MIN_WIDTH);
    }

    #[test]
    fn zero_weights_are_identity() {
        let g = gaussian();
        let field = DeformField::identity(1, DEFAULT_BASIS);
        for t in [0.0, 0.3, 1.0] {
            let d = deform_gaussian(&g, &field, 0, t).unwrap();
            assert_eq!(d.center, g.center);
            assert_eq!(d.scale_u, g.scale_u);
            assert_eq!(d.scale_v, g.scale_v);
            assert_eq!(d.opacity, g.opacity);
            assert_eq!(d.color, g.color);
            assert!((d.tangent_u - g.tangent_u).amax() < 1e-12);
            assert!((d.tangent_v - g.tangent_v).amax() < 1e-12);
        }
    }

    #[test]
    fn position_bank_shifts_center() {
        let g = gaussian();
        let mut field = DeformField::identity(1, 1);
        field.weights[CH_POSITION] = 1.0;
        field.centers[CH_POSITION] = 0.0;
        field.width_params[CH_POSITION] = width_to_param(0.3);
        let d = deform_gaussian(&g, &field, 0, 0.0).unwrap();
        assert!((d.center - Vec3::new(1.0, 0.0, 0.0)).amax() < 1e-12);
        assert_eq!(d.tangent_u, g.tangent_u);
        assert_eq!(d.scale_u, g.scale_u);
    }

    #[test]
    fn scale_floor_keeps_scales_positive() {
        for delta in [-10.0, -0.8, -0.79, 0.0, 0.5] {
            let (s, _, _) = floored_scale(0.8, delta);
            assert!(s > 0.0, "delta {delta} gave {s}");
        }
        // Far from zero the floor is the plain additive update.
        let (s, ds, dd) = floored_scale(0.8, 0.5);
        assert!((s - 1.3).abs() < 1e-12);
        assert!((ds - 1.0).abs() < 1e-12 && dd == 1.0);
    }

    #[test]
    fn degenerate_deformed_frame_is_reported() {
        let g = gaussian();
        let mut field = DeformField::identity(3, 1);
        // Push splat 2's u tangent onto its v tangent: u' = (1,0,0) + (-1,1,0).
        field.weights[(2 * CHANNELS + CH_TANGENT_U) * 1] = -1.0;
        field.weights[(2 * CHANNELS + CH_TANGENT_U + 1) * 1] = 1.0;
        for c in field.centers.iter_mut() {
            *c = 0.5;
        }
        let gs = vec![g; 3];
        let err = deform_scene(&gs, &field, 0.5).unwrap_err();
        assert!(matches!(err, Error::DegenerateDeformedFrame { index: 2 }));
    }

    fn random_field(rng: &mut ChaCha8Rng, count: usize, basis: usize, amp: f64) -> DeformField {
        let mut f = DeformField::identity(count, basis);
        for w in f.weights.iter_mut() {
            *w = rng.random_range(-amp..amp);
        }
        for c in f.centers.iter_mut() {
            *c = rng.random_range(0.0..1.0);
        }
        for s in f.width_params.iter_mut() {
            *s = width_to_param(rng.random_range(0.05..0.3));
        }
        f
    }

    #[test]
    fn position_is_lipschitz_in_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let field = random_field(&mut rng, 4, 8, 0.5);
        let gs = vec![gaussian(); 4];
        for _ in 0..50 {
            let t = rng.random_range(0.0..0.99);
            let dt = 1e-3;
            let a = deform_scene(&gs, &field, t).unwrap();
            let b = deform_scene(&gs, &field, t + dt).unwrap();
            for i in 0..4 {
                for k in 0..3 {
                    let bound = field.bank(i, CH_POSITION + k).slope_bound() * dt;
                    let moved = (b[i].center[k] - a[i].center[k]).abs();
                    assert!(moved <= bound + 1e-15, "{moved} > {bound}");
                }
            }
        }
    }

    #[test]
    fn second_derivative_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let field = random_field(&mut rng, 2, 6, 1.0);
        let h = 1e-4;
        for _ in 0..200 {
            let t = rng.random_range(h..1.0 - h);
            for ch in 0..CHANNELS {
                let b = field.bank(1, ch);
                let second = (eval_basis(&b, t + h) - 2.0 * eval_basis(&b, t) + eval_basis(&b, t - h)) / (h * h);
                assert!(second.abs() <= b.curvature_bound() * (1.0 + 1e-4) + 1e-6);
            }
        }
    }

    #[test]
    fn fitted_bank_tracks_sinusoid() {
        // Least-squares fit of a 16-term bank to sin(2 pi t); deformed
        // positions must follow the fitted curve exactly and the target within
        // the fit residual.
        let basis = 16;
        let mut field = DeformField::identity(1, basis);
        let samples: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
        let bank = field.bank(0, CH_POSITION);
        let phi = |t: f64, j: usize| {
            let s = bank.width(j);
            let d = t - bank.centers[j];
            (-(d * d) / (2.0 * s * s)).exp()
        };
        let a = nalgebra::DMatrix::from_fn(samples.len(), basis, |r, c| phi(samples[r], c));
        let y = nalgebra::DVector::from_iterator(
            samples.len(),
            samples.iter().map(|t| (2.0 * std::f64::consts::PI * t).sin()),
        );
        let w = a.clone().svd(true, true).solve(&y, 1e-12).unwrap();
        let residual = (&a * &w - &y).amax();
        field.weights[..basis].copy_from_slice(w.as_slice());
        let g = gaussian();
        for (r, &t) in samples.iter().enumerate() {
            let d = deform_gaussian(&g, &field, 0, t).unwrap();
            assert!((d.center.x - (&a * &w)[r]).abs() < 1e-9);
            assert!((d.center.x - y[r]).abs() <= residual + 1e-9);
        }
        assert!(residual < 0.05, "fit residual {residual}");
    }
}
