use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Row-softmax weights kept for the backward pass. Row `i` holds `i + 1`
/// entries.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCache {
    pub weights: Vec<Vec<f64>>,
}

/// `softmax(Q K^T / sqrt(d_k) + M) V` over frames with the causal mask
/// `M_ij = 0` for `i >= j` and `-inf` otherwise. Row `i` reads only rows
/// `0..=i` of `K` and `V`.
pub fn temporal_attention(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>) -> Result<Array2<f64>> {
    attention_with_cache(q, k, v).map(|(out, _)| out)
}

pub(crate) fn attention_with_cache(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
) -> Result<(Array2<f64>, AttentionCache)> {
    let (f, dk) = q.dim();
    if dk == 0 {
        return Err(Error::Precondition("attention head dimension is zero".into()));
    }
    if k.dim() != (f, dk) || v.nrows() != f {
        return Err(Error::ShapeMismatch(format!(
            "Q {:?}, K {:?}, V {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Array2::zeros((f, v.ncols()));
    let mut weights = Vec::with_capacity(f);
    for i in 0..f {
        let mut row: Vec<f64> = (0..=i).map(|j| q.row(i).dot(&k.row(j)) * scale).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for s in row.iter_mut() {
            *s /= sum;
        }
        for (j, &p) in row.iter().enumerate() {
            out.row_mut(i).scaled_add(p, &v.row(j));
        }
        weights.push(row);
    }
    Ok((out, AttentionCache { weights }))
}

/// Gradients of [`temporal_attention`] with respect to `Q`, `K` and `V`.
pub(crate) fn attention_backward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    cache: &AttentionCache,
    grad_out: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (f, dk) = q.dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut gq = Array2::zeros(q.dim());
    let mut gk = Array2::zeros(k.dim());
    let mut gv = Array2::zeros(v.dim());
    for i in 0..f {
        let p = &cache.weights[i];
        let go = grad_out.row(i);
        let gp: Vec<f64> = (0..=i).map(|j| go.dot(&v.row(j))).collect();
        let mean: f64 = p.iter().zip(&gp).map(|(a, b)| a * b).sum();
        for j in 0..=i {
            gv.row_mut(j).scaled_add(p[j], &go);
            let gs = p[j] * (gp[j] - mean) * scale;
            gq.row_mut(i).scaled_add(gs, &k.row(j));
            gk.row_mut(j).scaled_add(gs, &q.row(i));
        }
    }
    (gq, gk, gv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn grid(f: usize, d: usize, seed: f64) -> Array2<f64> {
        Array2::from_shape_fn((f, d), |(i, j)| ((i * 7 + j * 3) as f64 * seed).sin())
    }

    #[test]
    fn single_frame_returns_values() {
        let v = grid(1, 4, 0.3);
        let out = temporal_attention(grid(1, 3, 0.1).view(), grid(1, 3, 0.2).view(), v.view()).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn zero_queries_average_allowed_frames() {
        let z = Array2::zeros((2, 3));
        let v = grid(2, 2, 0.7);
        let out = temporal_attention(z.view(), z.view(), v.view()).unwrap();
        assert_eq!(out.row(0), v.row(0));
        for c in 0..2 {
            assert!((out[[1, c]] - 0.5 * (v[[0, c]] + v[[1, c]])).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_head_dimension_rejected() {
        let z = Array2::zeros((2, 0));
        assert!(temporal_attention(z.view(), z.view(), z.view()).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (q, k, v) = (grid(5, 3, 0.31), grid(5, 3, 0.17), grid(5, 2, 0.53));
        let w = grid(5, 2, 0.91);
        let loss = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| {
            (temporal_attention(q.view(), k.view(), v.view()).unwrap() * &w).sum()
        };
        let (_, cache) = attention_with_cache(q.view(), k.view(), v.view()).unwrap();
        let (gq, gk, gv) = attention_backward(q.view(), k.view(), v.view(), &cache, w.view());
        let h = 1e-6;
        for (which, g) in [(0, &gq), (1, &gk), (2, &gv)] {
            for idx in [(0usize, 0usize), (2, 1), (4, 0)] {
                let mut p = [q.clone(), k.clone(), v.clone()];
                let mut m = [q.clone(), k.clone(), v.clone()];
                p[which][idx] += h;
                m[which][idx] -= h;
                let fd = (loss(&p[0], &p[1], &p[2]) - loss(&m[0], &m[1], &m[2])) / (2.0 * h);
                assert!((fd - g[idx]).abs() < 1e-8, "{which} {idx:?}: {fd} vs {}", g[idx]);
            }
        }
    }
}
