//! Diagnostics for latent averaging: the curvature (trace) term that drives
//! its bias, the measured bias as a function of `m`, and decoder-linearity
//! tests along latent interpolation paths.

use candle_core::{DType, Tensor};

use crate::inference::{draw_latents, mean_latent, LatentDecoder, LatentSampler};
use crate::metrics::pearson;
use crate::{arg_err, Error, Result};

/// Latents decoded per decoder call inside the diagnostics.
const DECODE_CHUNK: usize = 32;

pub const DEFAULT_FD_STEP: f64 = 1e-2;
pub const DEFAULT_REFERENCE_DRAWS: usize = 256;

/// Decode a `(n, C, ...)` batch in chunks, returning one flattened `f64`
/// image per latent.
fn decode_rows<D: LatentDecoder + ?Sized>(decoder: &D, z: &Tensor) -> Result<Vec<Vec<f64>>> {
    let n = z.dim(0)?;
    let mut rows = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = DECODE_CHUNK.min(n - start);
        let img = decoder.decode_latents(&z.narrow(0, start, len)?)?;
        let flat = img.to_dtype(DType::F64)?.flatten_from(1)?.to_vec2::<f64>()?;
        rows.extend(flat);
        start += len;
    }
    Ok(rows)
}

/// Estimate `1/2 Tr(H Sigma)` per output element from latent samples
/// `(n, C, ...)` with central second differences along each sample deviation.
/// The sum over deviations is divided by `n - 1`, matching the unbiased
/// sample covariance.
pub fn estimate_trace_term<D: LatentDecoder + ?Sized>(decoder: &D, samples: &Tensor, h: f64) -> Result<Vec<f64>> {
    let n = samples.dim(0)?;
    if n < 2 {
        return arg_err(format!("trace estimate needs at least 2 latent samples, got {n}"));
    }
    if !(h > 0.0 && h.is_finite()) {
        return arg_err(format!("finite-difference step must be positive, got {h}"));
    }
    let z = samples.to_dtype(DType::F64)?;
    let mu = mean_latent(&z)?;
    let delta = z.broadcast_sub(&mu)?;
    let plus = mu.broadcast_add(&delta.affine(h, 0.0)?)?;
    let minus = mu.broadcast_sub(&delta.affine(h, 0.0)?)?;
    let centre = decode_rows(decoder, &mu)?.remove(0);
    let plus = decode_rows(decoder, &plus)?;
    let minus = decode_rows(decoder, &minus)?;
    let mut acc = vec![0.0; centre.len()];
    for (p, m) in plus.iter().zip(&minus) {
        for (k, a) in acc.iter_mut().enumerate() {
            *a += (p[k] - 2.0 * centre[k] + m[k]) / (h * h);
        }
    }
    let scale = 0.5 / (n - 1) as f64;
    Ok(acc.into_iter().map(|a| a * scale).collect())
}

#[derive(Clone, Debug)]
pub struct BiasConfig {
    /// Strictly increasing, all at least 1.
    pub m_values: Vec<usize>,
    pub n_mc: usize,
    pub n_ref: usize,
    pub h: f64,
    pub seed: u64,
}

impl BiasConfig {
    pub fn new(m_values: Vec<usize>, n_mc: usize, seed: u64) -> Self {
        Self {
            m_values,
            n_mc,
            n_ref: DEFAULT_REFERENCE_DRAWS,
            h: DEFAULT_FD_STEP,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.m_values.is_empty() || self.m_values[0] < 1 {
            return arg_err("m values must be non-empty and at least 1");
        }
        if self.m_values.windows(2).any(|w| w[0] >= w[1]) {
            return arg_err(format!("m values must be strictly increasing, got {:?}", self.m_values));
        }
        if self.n_mc < 2 || self.n_ref < 2 {
            return arg_err("bias curve needs at least 2 repetitions and 2 reference draws");
        }
        Ok(())
    }
}

/// Measured and predicted bias of the latent-average estimator at one `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasPoint {
    pub m: usize,
    /// Per-element bias, `mean_r y_hat_m - y_ref`.
    pub bias: Vec<f64>,
    /// Per-element standard error of `bias`.
    pub bias_se: Vec<f64>,
    pub bias_norm: f64,
    pub bias_norm_se: f64,
    /// Element-averaged bias.
    pub mean_bias: f64,
    pub mean_bias_se: f64,
    /// `(1/m - 1) * trace term`, per element.
    pub predicted: Vec<f64>,
    pub predicted_norm: f64,
    pub predicted_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasReport {
    pub points: Vec<BiasPoint>,
    /// `1/2 Tr(H Sigma)` per element, estimated from the reference draws.
    pub trace_term: Vec<f64>,
    /// Image-average reference estimate.
    pub reference: Vec<f64>,
    pub reference_norm: f64,
    pub n_mc: usize,
    pub n_ref: usize,
}

impl BiasReport {
    pub const CSV_HEADER: &'static str =
        "m,bias_norm,bias_norm_se,mean_bias,mean_bias_se,predicted_norm,predicted_mean,relative_bias";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                p.m,
                p.bias_norm,
                p.bias_norm_se,
                p.mean_bias,
                p.mean_bias_se,
                p.predicted_norm,
                p.predicted_mean,
                self.relative_bias(p)
            ));
        }
        s
    }

    /// `||bias|| / ||y_ref||`.
    pub fn relative_bias(&self, p: &BiasPoint) -> f64 {
        p.bias_norm / self.reference_norm
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Running per-element sums for mean and variance.
struct Moments {
    n: usize,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self {
            n: 0,
            sum: vec![0.0; len],
            sq: vec![0.0; len],
        }
    }

    fn push(&mut self, row: &[f64]) {
        self.n += 1;
        for (k, &v) in row.iter().enumerate() {
            self.sum[k] += v;
            self.sq[k] += v * v;
        }
    }

    fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.n as f64).collect()
    }

    /// Squared standard error of the mean, per element.
    fn se2(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.sum
            .iter()
            .zip(&self.sq)
            .map(|(s, q)| ((q - s * s / n) / (n - 1.0)).max(0.0) / n)
            .collect()
    }
}

fn scalar_se2(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n
}

/// Measure the bias of the latent-average estimator against an image-average
/// reference over `n_ref` draws. Repetition `r` uses base seed
/// `seed + n_ref + r * max(m)`, disjoint from the reference seeds; within a
/// repetition every `m` reuses the leading draws of the largest request.
pub fn empirical_bias_curve<S, D>(sampler: &S, decoder: &D, z_x: &Tensor, cfg: &BiasConfig) -> Result<BiasReport>
where
    S: LatentSampler + ?Sized,
    D: LatentDecoder + ?Sized,
{
    cfg.validate()?;
    let ref_draws = draw_latents(sampler, z_x, cfg.n_ref, cfg.seed)?;
    let ref_rows = decode_rows(decoder, &ref_draws)?;
    let len = ref_rows[0].len();
    let mut reference = Moments::new(len);
    ref_rows.iter().for_each(|r| reference.push(r));
    let ref_mean = reference.mean();
    let ref_se2 = reference.se2();
    let ref_avg: Vec<f64> = ref_rows.iter().map(|r| r.iter().sum::<f64>() / len as f64).collect();
    let ref_avg_se2 = scalar_se2(&ref_avg);
    let trace_term = estimate_trace_term(decoder, &ref_draws, cfg.h)?;

    let m_max = *cfg.m_values.last().expect("validated");
    let mut per_m: Vec<(Moments, Vec<f64>)> = cfg
        .m_values
        .iter()
        .map(|_| (Moments::new(len), Vec::with_capacity(cfg.n_mc)))
        .collect();
    for r in 0..cfg.n_mc {
        let base = cfg
            .seed
            .wrapping_add(cfg.n_ref as u64)
            .wrapping_add((r * m_max) as u64);
        let draws = draw_latents(sampler, z_x, m_max, base)?;
        let means = cfg
            .m_values
            .iter()
            .map(|&m| mean_latent(&draws.narrow(0, 0, m)?))
            .collect::<Result<Vec<_>>>()?;
        let rows = decode_rows(decoder, &Tensor::cat(&means, 0)?)?;
        for ((mom, avgs), row) in per_m.iter_mut().zip(&rows) {
            mom.push(row);
            avgs.push(row.iter().sum::<f64>() / len as f64);
        }
    }

    let ref_norm = l2(&ref_mean);
    let points = cfg
        .m_values
        .iter()
        .zip(per_m)
        .map(|(&m, (mom, avgs))| {
            let bias: Vec<f64> = mom.mean().iter().zip(&ref_mean).map(|(a, b)| a - b).collect();
            let se2: Vec<f64> = mom.se2().iter().zip(&ref_se2).map(|(a, b)| a + b).collect();
            let norm = l2(&bias);
            let norm_se = if norm > 0.0 {
                bias.iter().zip(&se2).map(|(b, s)| (b / norm).powi(2) * s).sum::<f64>().sqrt()
            } else {
                (se2.iter().sum::<f64>()).sqrt()
            };
            let factor = 1.0 / m as f64 - 1.0;
            let predicted: Vec<f64> = trace_term.iter().map(|t| factor * t).collect();
            BiasPoint {
                m,
                mean_bias: bias.iter().sum::<f64>() / len as f64,
                mean_bias_se: (scalar_se2(&avgs) + ref_avg_se2).sqrt(),
                bias_se: se2.iter().map(|s| s.sqrt()).collect(),
                bias_norm: norm,
                bias_norm_se: norm_se,
                predicted_norm: l2(&predicted),
                predicted_mean: predicted.iter().sum::<f64>() / len as f64,
                predicted,
                bias,
            }
        })
        .collect();
    Ok(BiasReport {
        points,
        trace_term,
        reference: ref_mean,
        reference_norm: ref_norm,
        n_mc: cfg.n_mc,
        n_ref: cfg.n_ref,
    })
}

/// Evenly spaced `s` on `[0, 1]`, endpoints included.
pub fn interpolation_grid(steps: usize) -> Vec<f64> {
    (0..steps).map(|k| k as f64 / (steps - 1) as f64).collect()
}

/// Decoded images along `z(s) = (1 - s) z_i + s z_j`, one decoder call.
fn decode_path<D: LatentDecoder + ?Sized>(decoder: &D, z_i: &Tensor, z_j: &Tensor, steps: usize) -> Result<Vec<Vec<f64>>> {
    if z_i.dims() != z_j.dims() || z_i.dim(0)? != 1 {
        return arg_err(format!(
            "interpolation endpoints must share a (1, C, ...) shape, got {:?} and {:?}",
            z_i.dims(),
            z_j.dims()
        ));
    }
    let (a, b) = (z_i.to_dtype(DType::F64)?, z_j.to_dtype(DType::F64)?);
    let path = interpolation_grid(steps)
        .into_iter()
        .map(|s| Ok((a.affine(1.0 - s, 0.0)? + b.affine(s, 0.0)?)?))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(steps);
    for chunk in path.chunks(DECODE_CHUNK) {
        let img = decoder.decode_latents(&Tensor::cat(chunk, 0)?)?;
        rows.extend(img.to_dtype(DType::F64)?.flatten_from(1)?.to_vec2::<f64>()?);
    }
    Ok(rows)
}

fn identical(a: &Tensor, b: &Tensor) -> Result<bool> {
    let diff = (a - b)?.abs()?.flatten_all()?.max(0)?;
    Ok(diff.to_dtype(DType::F64)?.to_scalar::<f64>()? == 0.0)
}

fn path_pcc(rows: &[Vec<f64>]) -> Result<f64> {
    let s = interpolation_grid(rows.len());
    let d: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().zip(&rows[0]).map(|(a, b)| (a - b).abs()).sum())
        .collect();
    pearson(&s, &d)
}

fn path_mse(rows: &[Vec<f64>]) -> f64 {
    let s = interpolation_grid(rows.len());
    let (first, last) = (&rows[0], &rows[rows.len() - 1]);
    let mut total = 0.0;
    for (row, &sk) in rows.iter().zip(&s) {
        let se: f64 = row
            .iter()
            .zip(first.iter().zip(last))
            .map(|(y, (a, b))| (y - (a + sk * (b - a))).powi(2))
            .sum();
        total += se / row.len() as f64;
    }
    total / rows.len() as f64
}

/// Pearson correlation between `s` and the L1 distance travelled from the
/// start image, over an inclusive grid of `steps` points.
pub fn linearity_pcc_test<D: LatentDecoder + ?Sized>(decoder: &D, z_i: &Tensor, z_j: &Tensor, steps: usize) -> Result<f64> {
    if steps < 3 {
        return arg_err(format!("linearity PCC needs at least 3 steps, got {steps}"));
    }
    if identical(z_i, z_j)? {
        return Err(Error::UndefinedCorrelation("interpolation endpoints are identical".into()));
    }
    path_pcc(&decode_path(decoder, z_i, z_j, steps)?)
}

/// Mean squared deviation of the decoded path from the straight image-space
/// segment between its endpoints, averaged over the grid.
pub fn linearity_path_mse<D: LatentDecoder + ?Sized>(decoder: &D, z_i: &Tensor, z_j: &Tensor, steps: usize) -> Result<f64> {
    if steps < 2 {
        return arg_err(format!("path MSE needs at least 2 steps, got {steps}"));
    }
    Ok(path_mse(&decode_path(decoder, z_i, z_j, steps)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearityReport {
    pub pcc: Vec<f64>,
    pub mse: Vec<f64>,
    pub pcc_mean: f64,
    pub pcc_std: f64,
    pub mse_mean: f64,
    pub mse_std: f64,
    /// Pairs skipped because both latents were identical.
    pub skipped: usize,
}

impl LinearityReport {
    pub const CSV_HEADER: &'static str = "pair,pcc,mse";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for (i, (p, m)) in self.pcc.iter().zip(&self.mse).enumerate() {
            s.push_str(&format!("{i},{p},{m}\n"));
        }
        s
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    crate::metrics::mean_std(v)
}

/// For each conditioning latent, draw `pairs_per_subject` latent pairs with
/// seeds derived from `seed` and run both linearity tests on each.
pub fn run_linearity_suite<S, D>(
    sampler: &S,
    decoder: &D,
    conditions: &[Tensor],
    pairs_per_subject: usize,
    steps: usize,
    seed: u64,
) -> Result<LinearityReport>
where
    S: LatentSampler + ?Sized,
    D: LatentDecoder + ?Sized,
{
    if pairs_per_subject < 1 {
        return arg_err("pairs_per_subject must be at least 1");
    }
    if steps < 3 {
        return arg_err(format!("linearity suite needs at least 3 steps, got {steps}"));
    }
    let (mut pcc, mut mse, mut skipped) = (Vec::new(), Vec::new(), 0);
    let per_subject = 2 * pairs_per_subject as u64;
    for (s, z_x) in conditions.iter().enumerate() {
        let base = seed.wrapping_add(s as u64 * per_subject);
        let seeds: Vec<u64> = (1..=per_subject).map(|j| base.wrapping_add(j)).collect();
        let draws = sampler.sample_latents(z_x, &seeds)?;
        for p in 0..pairs_per_subject {
            let z_i = draws.narrow(0, 2 * p, 1)?;
            let z_j = draws.narrow(0, 2 * p + 1, 1)?;
            if identical(&z_i, &z_j)? {
                skipped += 1;
                continue;
            }
            let rows = decode_path(decoder, &z_i, &z_j, steps)?;
            pcc.push(path_pcc(&rows)?);
            mse.push(path_mse(&rows));
        }
    }
    if pcc.is_empty() {
        return Err(Error::UndefinedCorrelation("every latent pair was degenerate".into()));
    }
    let (pcc_mean, pcc_std) = mean_std(&pcc);
    let (mse_mean, mse_std) = mean_std(&mse);
    Ok(LinearityReport {
        pcc,
        mse,
        pcc_mean,
        pcc_std,
        mse_mean,
        mse_std,
        skipped,
    })
}
