//! Evaluation metrics: image similarity, rank correlation with a permutation
//! test, and thresholded positivity classification.
//!
//! Paired image functions take `(prediction, truth)`; when a peak is derived
//! automatically it comes from the truth's dynamic range.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::volume::Volume;
use crate::{arg_err, ensure_same_dims, Error, Result};

pub fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    ensure_same_dims(a.shape(), b.shape(), "mse")?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum();
    Ok(s / a.len() as f64)
}

/// Dynamic range of a truth volume.
pub fn auto_peak(truth: &Volume) -> f64 {
    let (lo, hi) = truth.min_max();
    hi as f64 - lo as f64
}

/// `10 log10(peak^2 / mse)`; `+inf` when the images are identical.
pub fn psnr(pred: &Volume, truth: &Volume, peak: Option<f64>) -> Result<f64> {
    let m = mse(pred, truth)?;
    let peak = peak.unwrap_or_else(|| auto_peak(truth));
    Ok(psnr_from_mse(m, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peak * peak / mse).log10()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    /// Window edge; 7 is used for planar images, 5 for volumes.
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    /// `None` uses the truth's dynamic range.
    pub peak: Option<f64>,
}

impl SsimParams {
    pub fn for_rank(ndim: usize) -> Self {
        Self {
            window: if ndim >= 3 { 5 } else { 7 },
            k1: 0.01,
            k2: 0.03,
            peak: None,
        }
    }
}

/// Mean of a uniform `w`-wide box over every fully contained window position.
fn box_mean_valid(data: &[f64], shape: &[usize], w: usize) -> (Vec<f64>, Vec<usize>) {
    let mut cur = data.to_vec();
    let mut cur_shape = shape.to_vec();
    for axis in 0..shape.len() {
        let len = cur_shape[axis];
        let out_len = len + 1 - w;
        let inner: usize = cur_shape[axis + 1..].iter().product();
        let outer: usize = cur_shape[..axis].iter().product();
        let mut out = vec![0.0; outer * out_len * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| cur[(o * len + k) * inner + i];
                let mut run: f64 = (0..w).map(at).sum();
                out[o * out_len * inner + i] = run;
                for k in 1..out_len {
                    run += at(k + w - 1) - at(k - 1);
                    out[(o * out_len + k) * inner + i] = run;
                }
            }
        }
        cur = out;
        cur_shape[axis] = out_len;
    }
    let norm = (w as f64).powi(shape.len() as i32);
    (cur.into_iter().map(|v| v / norm).collect(), cur_shape)
}

/// Mean local SSIM over all window positions with a uniform window.
pub fn ssim(pred: &Volume, truth: &Volume, params: &SsimParams) -> Result<f64> {
    ensure_same_dims(pred.shape(), truth.shape(), "ssim")?;
    let w = params.window;
    if w == 0 || truth.shape().iter().any(|&s| s < w) {
        return arg_err(format!(
            "volume {:?} is smaller than the {w}-wide SSIM window",
            truth.shape()
        ));
    }
    if pred.data() == truth.data() {
        return Ok(1.0);
    }
    let peak = params.peak.unwrap_or_else(|| auto_peak(truth));
    if peak <= 0.0 {
        return Err(Error::Numerical("SSIM peak must be positive".into()));
    }
    let c1 = (params.k1 * peak).powi(2);
    let c2 = (params.k2 * peak).powi(2);
    let a: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = truth.data().iter().map(|&v| v as f64).collect();
    let shape = truth.shape();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(&b).map(|(x, y)| f(*x, *y)).collect() };
    let (ma, _) = box_mean_valid(&a, shape, w);
    let (mb, _) = box_mean_valid(&b, shape, w);
    let (maa, _) = box_mean_valid(&prod(&|x, _| x * x), shape, w);
    let (mbb, _) = box_mean_valid(&prod(&|_, y| y * y), shape, w);
    let (mab, _) = box_mean_valid(&prod(&|x, y| x * y), shape, w);
    let n = ma.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (ma[i], mb[i]);
            let vx = maa[i] - mx * mx;
            let vy = mbb[i] - my * my;
            let cxy = mab[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

pub fn roi_mean(img: &Volume, mask: &[bool]) -> Result<f64> {
    if mask.len() != img.len() {
        return arg_err(format!("mask has {} elements, image {}", mask.len(), img.len()));
    }
    let (mut s, mut n) = (0.0f64, 0usize);
    for (v, &m) in img.data().iter().zip(mask) {
        if m {
            s += *v as f64;
            n += 1;
        }
    }
    if n == 0 {
        return arg_err("empty ROI mask");
    }
    Ok(s / n as f64)
}

/// Ranks starting at 1 with ties given their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return arg_err(format!("pearson: lengths {} and {}", u.len(), v.len()));
    }
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (da, db) = (a - mu, b - mv);
        suv += da * db;
        suu += da * da;
        svv += db * db;
    }
    if suu <= 0.0 || svv <= 0.0 {
        return Err(Error::UndefinedCorrelation("an input has zero variance".into()));
    }
    Ok((suv / (suu * svv).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation and a two-sided permutation p-value. Enumerates all
/// permutations when `n!` does not exceed `n_perm`.
pub fn spearman(u: &[f64], v: &[f64], n_perm: usize, seed: u64) -> Result<(f64, f64)> {
    if u.len() != v.len() {
        return arg_err(format!("spearman: lengths {} and {}", u.len(), v.len()));
    }
    if u.len() < 3 {
        return arg_err("spearman needs at least three pairs");
    }
    let ru = average_ranks(u);
    let rv = average_ranks(v);
    let rho = pearson(&ru, &rv)?;
    let target = rho.abs() - 1e-12;

    let n = u.len();
    let factorial = (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k).filter(|&f| f <= n_perm));
    if let Some(total) = factorial {
        let mut perm = rv.clone();
        let mut hits = 0usize;
        for_each_permutation(&mut perm, &mut |p| {
            if pearson(&ru, p).map(|r| r.abs() >= target).unwrap_or(false) {
                hits += 1;
            }
        });
        return Ok((rho, hits as f64 / total as f64));
    }
    let mut r = rng::seeded(seed);
    let mut perm = rv;
    let mut hits = 0usize;
    for _ in 0..n_perm {
        perm.shuffle(&mut r);
        if pearson(&ru, &perm)?.abs() >= target {
            hits += 1;
        }
    }
    Ok((rho, (1 + hits) as f64 / (1 + n_perm) as f64))
}

/// Heap's algorithm.
fn for_each_permutation(v: &mut [f64], f: &mut dyn FnMut(&[f64])) {
    let n = v.len();
    let mut c = vec![0usize; n];
    f(v);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                v.swap(0, i);
            } else {
                v.swap(c[i], i);
            }
            f(v);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

pub fn balanced_accuracy(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return arg_err(format!("{} predictions for {} labels", pred.len(), truth.len()));
    }
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
        }
    }
    if tp + fn_ == 0 || tn + fp == 0 {
        return arg_err("balanced accuracy needs both classes in the truth");
    }
    let sens = tp as f64 / (tp + fn_) as f64;
    let spec = tn as f64 / (tn + fp) as f64;
    Ok((sens + spec) / 2.0)
}

/// Midpoint threshold maximizing balanced accuracy of `score > threshold`;
/// the smallest maximizer wins ties.
pub fn select_threshold(scores: &[f64], truth: &[bool]) -> Result<f64> {
    if scores.len() != truth.len() {
        return arg_err(format!("{} scores for {} labels", scores.len(), truth.len()));
    }
    if !truth.iter().any(|&t| t) || truth.iter().all(|&t| t) {
        return arg_err("threshold selection needs both classes in the truth");
    }
    let mut uniq: Vec<f64> = scores.to_vec();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    if uniq.len() < 2 {
        return arg_err("threshold selection needs at least two distinct scores");
    }
    let mut best: Option<(f64, f64)> = None;
    for w in uniq.windows(2) {
        let th = 0.5 * (w[0] + w[1]);
        let pred: Vec<bool> = scores.iter().map(|&s| s > th).collect();
        let ba = balanced_accuracy(&pred, truth)?;
        if best.is_none_or(|(_, b)| ba > b) {
            best = Some((th, ba));
        }
    }
    Ok(best.expect("at least one candidate").0)
}

/// `(mean, sample std)`; std is 0 for a single value.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_subjects: usize,
    pub ssim: (f64, f64),
    pub psnr: (f64, f64),
    pub mse: (f64, f64),
    pub cabc_rho: f64,
    pub cabc_p: f64,
    pub habc_rho: f64,
    pub habc_p: f64,
    pub balanced_accuracy: f64,
    pub threshold: f64,
    pub peak: String,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "n_subjects,ssim_mean,ssim_std,psnr_mean,psnr_std,mse_mean,mse_std,cabc_rho,cabc_p,habc_rho,habc_p,balanced_accuracy,threshold,peak";

    pub fn to_csv(&self) -> String {
        format!(
            "{}\n{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            Self::CSV_HEADER,
            self.n_subjects,
            self.ssim.0,
            self.ssim.1,
            self.psnr.0,
            self.psnr.1,
            self.mse.0,
            self.mse.1,
            self.cabc_rho,
            self.cabc_p,
            self.habc_rho,
            self.habc_p,
            self.balanced_accuracy,
            self.threshold,
            self.peak
        )
    }

    pub fn to_text(&self) -> String {
        format!(
            "subjects: {}\nSSIM  {:.4} ± {:.4}\nPSNR  {:.2} ± {:.2} dB\nMSE   {:.5} ± {:.5}\nCABC  rho {:.3} (p = {:.4})\nHABC  rho {:.3} (p = {:.4})\nBA    {:.3} at threshold {:.4}\npeak  {}\n",
            self.n_subjects,
            self.ssim.0,
            self.ssim.1,
            self.psnr.0,
            self.psnr.1,
            self.mse.0,
            self.mse.1,
            self.cabc_rho,
            self.cabc_p,
            self.habc_rho,
            self.habc_p,
            self.balanced_accuracy,
            self.threshold,
            self.peak
        )
    }
}

/// Inputs for [`evaluate`] beyond the image lists.
pub struct EvalSpec<'a> {
    pub cortex: &'a [bool],
    pub hippocampus: &'a [bool],
    /// Maps a cortical ROI mean to the positivity score.
    pub score: &'a dyn Fn(f64) -> f64,
    pub threshold: f64,
    pub labels: &'a [bool],
    pub ssim: SsimParams,
    pub n_perm: usize,
    pub seed: u64,
}

/// Per-subject image metrics plus ROI-mean correlations and classification.
pub fn evaluate(preds: &[Volume], truths: &[Volume], spec: &EvalSpec) -> Result<MetricReport> {
    if preds.len() != truths.len() || preds.len() != spec.labels.len() {
        return arg_err(format!(
            "misaligned inputs: {} predictions, {} truths, {} labels",
            preds.len(),
            truths.len(),
            spec.labels.len()
        ));
    }
    let (mut s, mut p, mut m) = (Vec::new(), Vec::new(), Vec::new());
    let (mut pc, mut tc, mut ph, mut th) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (a, b) in preds.iter().zip(truths) {
        s.push(ssim(a, b, &spec.ssim)?);
        p.push(psnr(a, b, spec.ssim.peak)?);
        m.push(mse(a, b)?);
        pc.push(roi_mean(a, spec.cortex)?);
        tc.push(roi_mean(b, spec.cortex)?);
        ph.push(roi_mean(a, spec.hippocampus)?);
        th.push(roi_mean(b, spec.hippocampus)?);
    }
    let (cabc_rho, cabc_p) = spearman(&pc, &tc, spec.n_perm, spec.seed)?;
    let (habc_rho, habc_p) = spearman(&ph, &th, spec.n_perm, spec.seed.wrapping_add(1))?;
    let pred_labels: Vec<bool> = pc.iter().map(|&c| (spec.score)(c) > spec.threshold).collect();
    Ok(MetricReport {
        n_subjects: preds.len(),
        ssim: mean_std(&s),
        psnr: mean_std(&p),
        mse: mean_std(&m),
        cabc_rho,
        cabc_p,
        habc_rho,
        habc_p,
        balanced_accuracy: balanced_accuracy(&pred_labels, spec.labels)?,
        threshold: spec.threshold,
        peak: match spec.ssim.peak {
            Some(v) => format!("fixed {v}"),
            None => "truth max-min".into(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn vol(shape: &[usize], data: Vec<f32>) -> Volume {
        Volume::new(shape.to_vec(), data).unwrap()
    }

    fn random_vol(seed: u64, shape: &[usize]) -> Volume {
        let mut r = rng::seeded(seed);
        let n = shape.iter().product();
        vol(shape, rng::normal_vec(&mut r, n))
    }

    /// Direct windowed SSIM over every position, 2D.
    fn ssim_oracle(a: &Volume, b: &Volume, w: usize, k1: f64, k2: f64, peak: f64) -> f64 {
        let (h, wd) = (a.shape()[0], a.shape()[1]);
        let at = |v: &Volume, i: usize, j: usize| v.data()[i * wd + j] as f64;
        let (c1, c2) = ((k1 * peak).powi(2), (k2 * peak).powi(2));
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..=h - w {
            for j in 0..=wd - w {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for di in 0..w {
                    for dj in 0..w {
                        xs.push(at(a, i + di, j + dj));
                        ys.push(at(b, i + di, j + dj));
                    }
                }
                let n = xs.len() as f64;
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n;
                let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n;
                let cxy = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn mse_cases() -> Result<()> {
        let a = vol(&[2], vec![0.0, 0.0]);
        let b = vol(&[2], vec![1.0, 3.0]);
        assert_eq!(mse(&a, &b)?, 5.0);
        assert_eq!(mse(&b, &b)?, 0.0);
        let (x, y) = (random_vol(1, &[5, 7]), random_vol(2, &[5, 7]));
        let mut oracle = 0.0;
        for i in 0..x.len() {
            oracle += (x.data()[i] as f64 - y.data()[i] as f64).powi(2);
        }
        assert!((mse(&x, &y)? - oracle / 35.0).abs() < 1e-12);
        assert!(matches!(mse(&a, &x), Err(Error::Argument(_))));
        Ok(())
    }

    #[test]
    fn psnr_cases() -> Result<()> {
        // mse = 0.01 exactly in f64 from values 0.1 apart is not exact in f32,
        // so build the 0.01 from a single 0.2 difference over four elements
        let a = vol(&[4], vec![0.0, 0.0, 0.0, 0.0]);
        let b = vol(&[4], vec![0.0, 0.0, 0.0, 0.2]);
        let m = mse(&a, &b)?;
        let expect = 10.0 * (1.0 / m).log10();
        assert_eq!(psnr(&a, &b, Some(1.0))?, expect);
        assert!((expect - 20.0).abs() < 1e-6);
        assert_eq!(psnr_from_mse(0.01, 1.0), 20.0);
        assert_eq!(psnr(&b, &b, None)?, f64::INFINITY);
        let (x, y) = (random_vol(3, &[6, 6]), random_vol(4, &[6, 6]));
        let (lo, hi) = y.min_max();
        let peak = (hi - lo) as f64;
        let direct = 10.0 * (peak * peak / mse(&x, &y)?).log10();
        assert!((psnr(&x, &y, None)? - direct).abs() < 1e-9);
        Ok(())
    }

    #[test]
    fn ssim_identity_and_constant_closed_form() -> Result<()> {
        let p = SsimParams::for_rank(2);
        let x = random_vol(5, &[9, 9]);
        assert_eq!(ssim(&x, &x, &p)?, 1.0);
        let c1 = vol(&[8, 8], vec![1.0; 64]);
        let c2 = vol(&[8, 8], vec![2.0; 64]);
        let params = SsimParams { peak: Some(4.0), ..SsimParams::for_rank(2) };
        let v = ssim(&c1, &c2, &params)?;
        let expect = (2.0 * 1.0 * 2.0 + 0.0016) / (1.0 + 4.0 + 0.0016);
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.8001).abs() < 1e-3);
        Ok(())
    }

    #[test]
    fn ssim_matches_window_oracle() -> Result<()> {
        for seed in 0..5 {
            let a = random_vol(10 + seed, &[8, 8]);
            let b = random_vol(20 + seed, &[8, 8]);
            let p = SsimParams::for_rank(2);
            let peak = auto_peak(&b);
            let oracle = ssim_oracle(&a, &b, 7, 0.01, 0.03, peak);
            assert!((ssim(&a, &b, &p)? - oracle).abs() < 1e-6);
        }
        let a = random_vol(30, &[12, 10]);
        let b = a.map(|v| 0.8 * v + 0.1);
        let p = SsimParams { window: 3, ..SsimParams::for_rank(2) };
        let oracle = ssim_oracle(&a, &b, 3, 0.01, 0.03, auto_peak(&b));
        assert!((ssim(&a, &b, &p)? - oracle).abs() < 1e-6);
        Ok(())
    }

    #[test]
    fn ssim_volumetric_window_and_small_volume_error() -> Result<()> {
        let p = SsimParams::for_rank(3);
        assert_eq!(p.window, 5);
        let a = random_vol(1, &[6, 6, 6]);
        let b = random_vol(2, &[6, 6, 6]);
        let v = ssim(&a, &b, &p)?;
        assert!((-1.0..=1.0).contains(&v));
        let tiny = random_vol(3, &[4, 4, 4]);
        assert!(matches!(ssim(&tiny, &tiny.map(|v| v + 1.0), &p), Err(Error::Argument(_))));
        Ok(())
    }

    #[test]
    fn roi_mean_cases() -> Result<()> {
        let c = vol(&[3], vec![1.5; 3]);
        assert_eq!(roi_mean(&c, &[true, false, true])?, 1.5);
        assert_eq!(roi_mean(&vol(&[3], vec![1.0, 2.0, 3.0]), &[true, false, true])?, 2.0);
        assert!(matches!(roi_mean(&c, &[false; 3]), Err(Error::Argument(_))));
        let x = random_vol(7, &[4, 5, 6]);
        let mut r = rng::seeded(8);
        let mask: Vec<bool> = (0..x.len()).map(|_| r.random::<bool>()).collect();
        let (mut s, mut n) = (0.0, 0);
        for i in 0..x.len() {
            if mask[i] {
                s += x.data()[i] as f64;
                n += 1;
            }
        }
        assert!((roi_mean(&x, &mask)? - s / n as f64).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn spearman_extremes_and_errors() -> Result<()> {
        let u: Vec<f64> = (0..20).map(|i| i as f64 * 0.7).collect();
        let rev: Vec<f64> = u.iter().rev().copied().collect();
        assert_eq!(spearman(&u, &u, 1000, 1)?.0, 1.0);
        assert_eq!(spearman(&u, &rev, 1000, 1)?.0, -1.0);
        assert!(matches!(spearman(&u, &u[..5], 10, 1), Err(Error::Argument(_))));
        assert!(matches!(spearman(&u, &[2.0; 20], 10, 1), Err(Error::UndefinedCorrelation(_))));
        let (_, p) = spearman(&u, &u, 10_000, 3)?;
        assert_eq!(p, 1.0 / 10_001.0);
        Ok(())
    }

    #[test]
    fn spearman_ties_against_exhaustive_oracle() -> Result<()> {
        let u = [1.0, 2.0, 2.0, 3.0];
        let v = [1.0, 3.0, 2.0, 4.0];
        // average ranks by hand
        let ru = [1.0, 2.5, 2.5, 4.0];
        let rv = [1.0, 3.0, 2.0, 4.0];
        let rho_oracle = pearson(&ru, &rv)?;
        // enumerate all 24 orderings of rv explicitly
        let mut hits = 0;
        let mut total = 0;
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    for d in 0..4 {
                        let idx = [a, b, c, d];
                        let mut seen = [false; 4];
                        if idx.iter().any(|&i| std::mem::replace(&mut seen[i], true)) {
                            continue;
                        }
                        total += 1;
                        let perm: Vec<f64> = idx.iter().map(|&i| rv[i]).collect();
                        if pearson(&ru, &perm)?.abs() >= rho_oracle.abs() - 1e-12 {
                            hits += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(total, 24);
        let (rho, p) = spearman(&u, &v, 10_000, 0)?;
        assert!((rho - rho_oracle).abs() < 1e-12);
        assert_eq!(p, hits as f64 / 24.0);
        Ok(())
    }

    #[test]
    fn balanced_accuracy_cases() -> Result<()> {
        let truth = [true, false, true, false];
        assert_eq!(balanced_accuracy(&truth, &truth)?, 1.0);
        // TP=3, FN=1, TN=2, FP=2
        let t = [true, true, true, true, false, false, false, false];
        let p = [true, true, true, false, false, false, true, true];
        assert_eq!(balanced_accuracy(&p, &t)?, 0.625);
        assert!(matches!(balanced_accuracy(&[true], &[true]), Err(Error::Argument(_))));

        let mut r = rng::seeded(42);
        let n = 10_000;
        let truth: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let pred: Vec<bool> = (0..n).map(|_| r.random::<bool>()).collect();
        assert!((balanced_accuracy(&pred, &truth)? - 0.5).abs() < 0.02);
        Ok(())
    }

    fn brute_force_best(scores: &[f64], truth: &[bool]) -> (f64, f64) {
        let mut s = scores.to_vec();
        s.sort_by(f64::total_cmp);
        s.dedup();
        let mut best = (f64::NAN, -1.0);
        for i in 0..s.len() - 1 {
            let th = (s[i] + s[i + 1]) / 2.0;
            let pred: Vec<bool> = scores.iter().map(|&v| v > th).collect();
            let ba = balanced_accuracy(&pred, truth).unwrap();
            if ba > best.1 {
                best = (th, ba);
            }
        }
        best
    }

    #[test]
    fn threshold_cases() -> Result<()> {
        let th = select_threshold(&[0.1, 0.4, 0.6, 0.9], &[false, false, true, true])?;
        assert_eq!(th, 0.5);
        let th = select_threshold(&[5.0, 1.0, 2.0, 7.0, 9.0], &[false, false, false, true, true])?;
        assert_eq!(th, 6.0);
        assert!(matches!(select_threshold(&[1.0, 2.0], &[true, true]), Err(Error::Argument(_))));
        let mut r = rng::seeded(11);
        for _ in 0..100 {
            let n = 20;
            let truth: Vec<bool> = (0..n).map(|i| i < 7 || r.random::<f64>() < 0.4).collect();
            let mut truth = truth;
            truth[n - 1] = false;
            let scores: Vec<f64> = (0..n).map(|_| (r.random::<f64>() * 10.0).round() / 10.0).collect();
            if scores.iter().all(|&s| s == scores[0]) {
                continue;
            }
            let th = select_threshold(&scores, &truth)?;
            let (bth, bba) = brute_force_best(&scores, &truth);
            assert_eq!(th, bth);
            let pred: Vec<bool> = scores.iter().map(|&v| v > th).collect();
            assert_eq!(balanced_accuracy(&pred, &truth)?, bba);
        }
        Ok(())
    }

    fn square_volumes(n: usize, seed: u64) -> (Vec<Volume>, Vec<bool>, Vec<bool>) {
        let mut r = rng::seeded(seed);
        let cortex: Vec<bool> = (0..64).map(|i| i % 8 < 4).collect();
        let hippo: Vec<bool> = (0..64).map(|i| i % 8 >= 4).collect();
        let vols = (0..n)
            .map(|_| {
                let level = r.random_range(0.0..2.0f32);
                let noise = rng::normal_vec(&mut r, 64);
                vol(&[8, 8], noise.iter().map(|e| level + 0.1 * e).collect())
            })
            .collect();
        (vols, cortex, hippo)
    }

    #[test]
    fn evaluate_perfect_and_shuffled() -> Result<()> {
        let (truths, cortex, hippo) = square_volumes(100, 3);
        let labels: Vec<bool> = truths.iter().map(|v| roi_mean(v, &cortex).unwrap() > 1.0).collect();
        let score = |c: f64| c;
        let spec = EvalSpec {
            cortex: &cortex,
            hippocampus: &hippo,
            score: &score,
            threshold: 1.0,
            labels: &labels,
            ssim: SsimParams::for_rank(2),
            n_perm: 2000,
            seed: 1,
        };
        let rep = evaluate(&truths, &truths, &spec)?;
        assert_eq!(rep.ssim.0, 1.0);
        assert_eq!(rep.mse.0, 0.0);
        assert_eq!(rep.cabc_rho, 1.0);
        assert_eq!(rep.balanced_accuracy, 1.0);
        assert!(rep.to_csv().starts_with("n_subjects,ssim_mean"));

        let mut shuffled = truths.clone();
        shuffled.shuffle(&mut rng::seeded(9));
        let rep = evaluate(&shuffled, &truths, &spec)?;
        assert!(rep.cabc_rho.abs() <= 0.3, "rho {}", rep.cabc_rho);
        assert!((rep.balanced_accuracy - 0.5).abs() <= 0.15, "ba {}", rep.balanced_accuracy);
        assert!(matches!(evaluate(&truths[..3], &truths, &spec), Err(Error::Argument(_))));
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn ssim_is_symmetric(seed in 0u64..1000) {
            let a = random_vol(seed, &[9, 8]);
            let b = random_vol(seed + 5000, &[9, 8]);
            let p = SsimParams { peak: Some(3.0), ..SsimParams::for_rank(2) };
            let d = ssim(&a, &b, &p).unwrap() - ssim(&b, &a, &p).unwrap();
            prop_assert!(d.abs() < 1e-12);
        }

        #[test]
        fn spearman_invariant_to_monotone_maps(xs in prop::collection::vec(-50.0f64..50.0, 8..30), seed in 0u64..100) {
            let mut r = rng::seeded(seed);
            let ys: Vec<f64> = xs.iter().map(|x| x + r.random_range(-20.0..20.0)).collect();
            let distinct = |v: &[f64]| v.iter().any(|&a| a != v[0]);
            prop_assume!(distinct(&xs) && distinct(&ys));
            let (rho, _) = spearman(&xs, &ys, 200, 1).unwrap();
            let xt: Vec<f64> = xs.iter().map(|x| (x / 10.0).exp()).collect();
            let yt: Vec<f64> = ys.iter().map(|y| y * y * y + 2.0).collect();
            let (rho_t, _) = spearman(&xt, &yt, 200, 1).unwrap();
            prop_assert!((rho - rho_t).abs() < 1e-9);
        }

        #[test]
        fn balanced_accuracy_ignores_order(seed in 0u64..1000) {
            let mut r = rng::seeded(seed);
            let n = 30;
            let mut pairs: Vec<(bool, bool)> = (0..n).map(|i| (r.random::<bool>(), i % 3 == 0)).collect();
            let ba = |p: &[(bool, bool)]| {
                let (a, b): (Vec<bool>, Vec<bool>) = p.iter().copied().unzip();
                balanced_accuracy(&a, &b).unwrap()
            };
            let before = ba(&pairs);
            pairs.shuffle(&mut r);
            prop_assert_eq!(before, ba(&pairs));
        }

        #[test]
        fn selected_threshold_is_optimal(seed in 0u64..1000) {
            let mut r = rng::seeded(seed);
            let n = 15;
            let truth: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
            let scores: Vec<f64> = truth.iter().map(|&t| r.random_range(0.0..1.0) + if t { 0.3 } else { 0.0 }).collect();
            let th = select_threshold(&scores, &truth).unwrap();
            let (_, best) = brute_force_best(&scores, &truth);
            let pred: Vec<bool> = scores.iter().map(|&v| v > th).collect();
            prop_assert_eq!(balanced_accuracy(&pred, &truth).unwrap(), best);
        }
    }
}
