//! Image and geometry metrics.
//!
//! Images are `H x W x C` arrays with values in `[0,1]`; depth maps are
//! `H x W` arrays in world units with NaN marking missing samples.

use ndarray::{s, Array2, Array3, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;

/// Reported in place of +inf when two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn full_selection(a: &Array3<f64>) -> Array2<bool> {
    Array2::from_elem((a.dim().0, a.dim().1), true)
}

/// PSNR of a unit-range image pair from its mean squared error.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn psnr(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    psnr_region(a, b, &full_selection(a)).map(|v| v.unwrap_or(f64::NAN))
}

/// PSNR over the selected pixels; `None` when nothing is selected.
pub fn psnr_region(a: &Array3<f64>, b: &Array3<f64>, sel: &Array2<bool>) -> Result<Option<f64>> {
    same_shape(a, b)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((y, x), &on) in sel.indexed_iter() {
        if !on {
            continue;
        }
        for c in 0..a.dim().2 {
            let d = a[[y, x, c]] - b[[y, x, c]];
            sum += d * d;
            n += 1;
        }
    }
    Ok((n > 0).then(|| psnr_from_mse(sum / n as f64)))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Separable filtering over valid window positions only.
fn filter_valid(img: ArrayView2<f64>, w: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, wd) = img.dim();
    let (oh, ow) = (h + 1 - SSIM_WINDOW, wd + 1 - SSIM_WINDOW);
    let mut rows = Array2::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += wk * img[[y, x + k]];
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += wk * rows[[y + k, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Local SSIM for every valid window position of one channel. Entry `(y, x)`
/// is the window centered at pixel `(y + 5, x + 5)`.
pub fn ssim_map(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (h, w) = a.dim();
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Precondition(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let win = gaussian_window();
    let mu_a = filter_valid(a, &win);
    let mu_b = filter_valid(b, &win);
    let aa = filter_valid((&a * &a).view(), &win);
    let bb = filter_valid((&b * &b).view(), &win);
    let ab = filter_valid((&a * &b).view(), &win);
    let mut out = Array2::zeros(mu_a.dim());
    Zip::from(&mut out)
        .and(&mu_a)
        .and(&mu_b)
        .and(&aa)
        .and(&bb)
        .and(&ab)
        .for_each(|o, &ma, &mb, &saa, &sbb, &sab| {
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            *o = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        });
    Ok(out)
}

/// Mean local SSIM, averaged over channels.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    ssim_region(a, b, &full_selection(a)).map(|v| v.unwrap_or(f64::NAN))
}

/// SSIM averaged over windows whose center pixel is selected.
pub fn ssim_region(a: &Array3<f64>, b: &Array3<f64>, sel: &Array2<bool>) -> Result<Option<f64>> {
    same_shape(a, b)?;
    let half = SSIM_WINDOW / 2;
    let channels = a.dim().2;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..channels {
        let map = ssim_map(a.index_axis(Axis(2), c), b.index_axis(Axis(2), c))?;
        let centers = sel.slice(s![half..half + map.dim().0, half..half + map.dim().1]);
        Zip::from(&map).and(&centers).for_each(|&v, &on| {
            if on {
                total += v;
                count += 1;
            }
        });
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Root mean squared depth error over pixels that are selected and finite in
/// both maps.
pub fn depth_rmse(est: &Array2<f64>, reference: &Array2<f64>, valid: Option<&Array2<bool>>) -> Result<f64> {
    depth_rmse_region(est, reference, valid)?
        .ok_or_else(|| Error::Precondition("no valid depth pixels".into()))
}

pub fn depth_rmse_region(
    est: &Array2<f64>,
    reference: &Array2<f64>,
    valid: Option<&Array2<bool>>,
) -> Result<Option<f64>> {
    let (sum, n) = depth_sq_sum(est, reference, valid)?;
    Ok((n > 0).then(|| (sum / n as f64).sqrt()))
}

fn depth_sq_sum(est: &Array2<f64>, reference: &Array2<f64>, valid: Option<&Array2<bool>>) -> Result<(f64, usize)> {
    if est.dim() != reference.dim() || valid.is_some_and(|v| v.dim() != est.dim()) {
        return Err(Error::ShapeMismatch("depth map shapes differ".into()));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for ((idx, &e), &r) in est.indexed_iter().zip(reference.iter()) {
        if valid.is_some_and(|v| !v[idx]) || !e.is_finite() || !r.is_finite() {
            continue;
        }
        sum += (e - r) * (e - r);
        n += 1;
    }
    Ok((sum, n))
}

/// Mean RMSE between consecutive images.
pub fn temporal_consistency(seq: &[Array3<f64>]) -> Result<f64> {
    temporal_consistency_region(seq, None)?.ok_or_else(|| Error::Precondition("empty region".into()))
}

/// Consecutive-frame RMSE restricted to pixels selected in either frame of
/// each pair. Pairs with no selected pixel are skipped.
pub fn temporal_consistency_region(seq: &[Array3<f64>], sel: Option<&[Array2<bool>]>) -> Result<Option<f64>> {
    if seq.len() < 2 {
        return Err(Error::Precondition(format!(
            "temporal consistency needs at least 2 frames, got {}",
            seq.len()
        )));
    }
    if sel.is_some_and(|m| m.len() != seq.len()) {
        return Err(Error::ShapeMismatch("one mask per frame required".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..seq.len() - 1 {
        let (a, b) = (&seq[i], &seq[i + 1]);
        same_shape(a, b)?;
        let mut sum = 0.0;
        let mut n = 0usize;
        let (h, w, c) = a.dim();
        for y in 0..h {
            for x in 0..w {
                if let Some(m) = sel {
                    if !(m[i][[y, x]] || m[i + 1][[y, x]]) {
                        continue;
                    }
                }
                for k in 0..c {
                    let d = a[[y, x, k]] - b[[y, x, k]];
                    sum += d * d;
                    n += 1;
                }
            }
        }
        if n > 0 {
            total += (sum / n as f64).sqrt();
            pairs += 1;
        }
    }
    Ok((pairs > 0).then(|| total / pairs as f64))
}

/// `|TC(result) - TC(gt)|`.
pub fn tcs(result: &[Array3<f64>], gt: &[Array3<f64>]) -> Result<f64> {
    Ok((temporal_consistency(result)? - temporal_consistency(gt)?).abs())
}

/// Pixel subset used by [`masked_split`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Full,
    Masked,
    Unmasked,
}

impl Region {
    /// Whether a pixel with the given mask value belongs to the region.
    pub fn selects(self, masked: bool) -> bool {
        match self {
            Region::Full => true,
            Region::Masked => masked,
            Region::Unmasked => !masked,
        }
    }

    pub fn selection(self, mask: &Array2<bool>) -> Array2<bool> {
        mask.mapv(|m| self.selects(m))
    }
}

/// A metric evaluated on the full image and on both sides of a mask. Empty
/// subsets hold NaN and set their flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionValues {
    #[serde(with = "nan_as_null")]
    pub full: f64,
    #[serde(with = "nan_as_null")]
    pub masked: f64,
    #[serde(with = "nan_as_null")]
    pub unmasked: f64,
    pub masked_empty: bool,
    pub unmasked_empty: bool,
}

/// Evaluates `metric` per region; the closure returns `None` for an empty
/// subset.
pub fn masked_split(metric: impl Fn(Region) -> Result<Option<f64>>) -> Result<RegionValues> {
    let full = metric(Region::Full)?;
    let masked = metric(Region::Masked)?;
    let unmasked = metric(Region::Unmasked)?;
    Ok(RegionValues {
        full: full.unwrap_or(f64::NAN),
        masked: masked.unwrap_or(f64::NAN),
        unmasked: unmasked.unwrap_or(f64::NAN),
        masked_empty: masked.is_none(),
        unmasked_empty: unmasked.is_none(),
    })
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

mod opt_nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_finite() => s.serialize_f64(*x),
            _ => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Option::<f64>::deserialize(d)
    }
}

/// Region-split values of every metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedReport {
    pub psnr_db: RegionValues,
    pub ssim: RegionValues,
    pub depth_rmse: RegionValues,
    pub tc_result: RegionValues,
    pub tc_gt: RegionValues,
}

/// Sequence-level evaluation of a prediction against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frames: usize,
    /// Mean per-frame PSNR.
    pub psnr_db: f64,
    /// Mean per-frame SSIM in `[-1, 1]`.
    pub ssim: f64,
    pub ssim_pct: f64,
    /// Pooled over all valid pixels of all frames; null when no frame has
    /// valid depth in both sequences.
    #[serde(with = "opt_nan_as_null")]
    pub depth_rmse: Option<f64>,
    pub tc_result: f64,
    pub tc_gt: f64,
    pub tcs: f64,
    /// Always null: needs pretrained networks.
    pub lpips: Option<f64>,
    pub fid: Option<f64>,
    /// Present only when masks were supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked: Option<MaskedReport>,
}

fn mean_over(values: impl Iterator<Item = Result<Option<f64>>>) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        if let Some(v) = v? {
            sum += v;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

fn pooled_rmse(pred: &[Frame], gt: &[Frame], region: Region, masks: Option<&[Array2<bool>]>) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0;
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        let sel = masks.map(|m| region.selection(&m[i]));
        let (s, k) = depth_sq_sum(&p.depth, &g.depth, sel.as_ref())?;
        sum += s;
        n += k;
    }
    Ok((n > 0).then(|| (sum / n as f64).sqrt()))
}

/// Full evaluation of `pred` against `gt`. With `masks`, every metric is also
/// split into occluded and visible regions.
pub fn evaluate(pred: &[Frame], gt: &[Frame], masks: Option<&[Array2<bool>]>) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted frames vs {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::Precondition("evaluation needs at least 2 frames".into()));
    }
    if masks.is_some_and(|m| m.len() != pred.len()) {
        return Err(Error::ShapeMismatch("one mask per frame required".into()));
    }
    let psnr_in = |r: Region| {
        mean_over(pred.iter().zip(gt).enumerate().map(|(i, (p, g))| {
            let sel = masks.map_or_else(|| full_selection(&p.rgb), |m| r.selection(&m[i]));
            psnr_region(&p.rgb, &g.rgb, &sel)
        }))
    };
    let ssim_in = |r: Region| {
        mean_over(pred.iter().zip(gt).enumerate().map(|(i, (p, g))| {
            let sel = masks.map_or_else(|| full_selection(&p.rgb), |m| r.selection(&m[i]));
            ssim_region(&p.rgb, &g.rgb, &sel)
        }))
    };
    let pred_rgb: Vec<Array3<f64>> = pred.iter().map(|f| f.rgb.clone()).collect();
    let gt_rgb: Vec<Array3<f64>> = gt.iter().map(|f| f.rgb.clone()).collect();
    let tc_in = |seq: &[Array3<f64>], r: Region| match masks {
        Some(m) => {
            let sel: Vec<Array2<bool>> = m.iter().map(|mk| r.selection(mk)).collect();
            temporal_consistency_region(seq, Some(&sel))
        }
        None => temporal_consistency_region(seq, None),
    };

    let psnr_db = psnr_in(Region::Full)?.unwrap_or(f64::NAN);
    let ssim_v = ssim_in(Region::Full)?.unwrap_or(f64::NAN);
    let tc_result = temporal_consistency(&pred_rgb)?;
    let tc_gt = temporal_consistency(&gt_rgb)?;
    let masked = match masks {
        Some(_) => Some(MaskedReport {
            psnr_db: masked_split(psnr_in)?,
            ssim: masked_split(ssim_in)?,
            depth_rmse: masked_split(|r| pooled_rmse(pred, gt, r, masks))?,
            tc_result: masked_split(|r| tc_in(&pred_rgb, r))?,
            tc_gt: masked_split(|r| tc_in(&gt_rgb, r))?,
        }),
        None => None,
    };
    Ok(MetricReport {
        frames: pred.len(),
        psnr_db,
        ssim: ssim_v,
        ssim_pct: 100.0 * ssim_v,
        depth_rmse: pooled_rmse(pred, gt, Region::Full, None)?,
        tc_result,
        tc_gt,
        tcs: (tc_result - tc_gt).abs(),
        lpips: None,
        fid: None,
        masked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Array3<f64> {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| f(y, x, c))
    }

    fn pattern(seed: u64) -> Array3<f64> {
        img(24, 20, |y, x, c| {
            let v = ((y * 31 + x * 17 + c * 7) as u64).wrapping_mul(seed.wrapping_mul(2654435761) | 1) % 1000;
            v as f64 / 999.0
        })
    }

    #[test]
    fn psnr_examples() {
        let a = pattern(1);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = img(8, 8, |_, _, _| 0.3);
        let c = img(8, 8, |_, _, _| 0.4);
        assert!((psnr(&b, &c).unwrap() - 20.0).abs() < 1e-9);
        let d = img(8, 8, |_, _, _| 0.0);
        let e = img(8, 8, |_, _, _| 0.5);
        assert!((psnr(&d, &e).unwrap() - 6.0206).abs() < 1e-4);
        assert!(psnr(&d, &img(8, 9, |_, _, _| 0.0)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = pattern(3);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let checker = img(16, 16, |y, x, _| ((x + y) % 2) as f64);
        let inv = checker.mapv(|v| 1.0 - v);
        assert!(ssim(&checker, &inv).unwrap() < 0.0);
        let c5 = img(16, 16, |_, _, _| 0.5);
        let c6 = img(16, 16, |_, _, _| 0.6);
        let expected = (2.0 * 0.5 * 0.6 + SSIM_C1) / (0.25 + 0.36 + SSIM_C1);
        assert!((ssim(&c5, &c6).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 0.98361).abs() < 1e-5);
        assert!(ssim(&img(10, 16, |_, _, _| 0.0), &img(10, 16, |_, _, _| 0.0)).is_err());
    }

    #[test]
    fn depth_rmse_examples() {
        let a = Array2::from_elem((4, 4), 5.0);
        assert_eq!(depth_rmse(&a, &a, None).unwrap(), 0.0);
        assert!((depth_rmse(&a.mapv(|v| v + 2.0), &a, None).unwrap() - 2.0).abs() < 1e-12);
        let est = Array2::from_shape_vec((1, 3), vec![3.0, 4.0, f64::NAN]).unwrap();
        let zero = Array2::zeros((1, 3));
        assert!((depth_rmse(&est, &zero, None).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        let none = Array2::from_elem((1, 3), false);
        assert!(depth_rmse(&est, &zero, Some(&none)).is_err());
    }

    #[test]
    fn temporal_examples() {
        let a = pattern(5);
        assert_eq!(temporal_consistency(&[a.clone(), a.clone(), a.clone()]).unwrap(), 0.0);
        let z = img(4, 4, |_, _, _| 0.2);
        let tc = temporal_consistency(&[z.clone(), z.mapv(|v| v + 0.1)]).unwrap();
        assert!((tc - 0.1).abs() < 1e-12);
        let seq = [z.clone(), z.mapv(|v| v + 0.1), z.mapv(|v| v + 0.4)];
        assert!((temporal_consistency(&seq).unwrap() - 0.2).abs() < 1e-12);
        assert!(temporal_consistency(&[z.clone()]).is_err());

        assert_eq!(tcs(&seq, &seq).unwrap(), 0.0);
        let gt = [z.clone(), z.mapv(|v| v + 0.003)];
        let stat = [z.clone(), z.clone()];
        assert!((tcs(&stat, &gt).unwrap() - 0.003).abs() < 1e-12);
    }

    #[test]
    fn masked_split_examples() {
        let a = pattern(7);
        let mut b = a.clone();
        let (h, w, _) = a.dim();
        let none = Array2::from_elem((h, w), false);
        let all = Array2::from_elem((h, w), true);
        let split = |b: &Array3<f64>, mask: &Array2<bool>| {
            masked_split(|r| psnr_region(&a, b, &r.selection(mask))).unwrap()
        };
        let s = split(&b, &none);
        assert!(s.masked.is_nan() && s.masked_empty && !s.unmasked_empty);

        b[[2, 3, 1]] += 0.2;
        let s = split(&b, &all);
        assert_eq!(s.masked, s.full);
        assert!(s.unmasked_empty);

        let half = Array2::from_shape_fn((h, w), |(_, x)| x < w / 2);
        let mut c = a.clone();
        for y in 0..h {
            for x in 0..w / 2 {
                c[[y, x, 0]] = 1.0 - c[[y, x, 0]];
            }
        }
        let s = masked_split(|r| psnr_region(&a, &c, &r.selection(&half))).unwrap();
        assert_eq!(s.unmasked, PSNR_CAP_DB);
        assert!(s.masked.is_finite() && s.masked < PSNR_CAP_DB);
    }

    fn frame(rgb: Array3<f64>, d: f64) -> Frame {
        let (h, w, _) = rgb.dim();
        Frame::new(rgb, Array2::from_elem((h, w), d), Array2::from_elem((h, w), false), 0.0).unwrap()
    }

    #[test]
    fn report_of_identical_sequences() {
        let seq: Vec<Frame> = (0..3).map(|i| frame(pattern(i + 1), 40.0 + i as f64)).collect();
        let r = evaluate(&seq, &seq, None).unwrap();
        assert_eq!(r.psnr_db, 99.0);
        assert_eq!(r.ssim_pct, 100.0);
        assert_eq!(r.depth_rmse, Some(0.0));
        assert_eq!(r.tcs, 0.0);
        assert!(r.masked.is_none());
        let masks: Vec<Array2<bool>> = seq.iter().map(|_| Array2::from_shape_fn((24, 20), |(y, _)| y < 6)).collect();
        let r = evaluate(&seq, &seq, Some(&masks)).unwrap();
        let m = r.masked.unwrap();
        assert_eq!(m.psnr_db.masked, 99.0);
        let json = serde_json::to_string(&m).unwrap();
        let back: MaskedReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.psnr_db, m.psnr_db);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn symmetric_metrics(s1 in 1u64..1000, s2 in 1u64..1000) {
            let a = pattern(s1);
            let b = pattern(s2);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
            let da = a.index_axis(Axis(2), 0).to_owned();
            let db = b.index_axis(Axis(2), 1).to_owned();
            prop_assert_eq!(depth_rmse(&da, &db, None).unwrap(), depth_rmse(&db, &da, None).unwrap());
            let seq = [a.clone(), b.clone()];
            prop_assert!(tcs(&seq, &seq).unwrap() == 0.0);
            prop_assert!(tcs(&seq, &[a.clone(), a.clone()]).unwrap() >= 0.0);
        }
    }
}
