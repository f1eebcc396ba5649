//! Synthetic paired-modality phantoms.
//!
//! Each subject carries a hidden burden scalar `b`. The source image holds a
//! smooth head-shaped background and Gaussian blobs whose widths shrink as
//! `b` grows, so it is informative about `b` without exposing it directly. The
//! target image adds `b`-scaled uptake in a cortex-like annulus and two
//! hippocampus-like discs on top of a blurred copy of the source.

use std::f64::consts::PI;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::metrics::roi_mean;
use crate::rng::{self, SeededRng};
use crate::volume::Volume;
use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"CCDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grid {
    #[serde(rename = "64x64")]
    Planar64,
    #[serde(rename = "32x32x32")]
    Cube32,
}

impl Grid {
    pub fn shape(self) -> Vec<usize> {
        match self {
            Grid::Planar64 => vec![64, 64],
            Grid::Cube32 => vec![32, 32, 32],
        }
    }

    pub fn from_shape(shape: &[usize]) -> Result<Self> {
        match shape {
            [64, 64] => Ok(Grid::Planar64),
            [32, 32, 32] => Ok(Grid::Cube32),
            _ => Err(Error::Config(format!(
                "unsupported grid {shape:?}; expected 64x64 or 32x32x32"
            ))),
        }
    }

    pub fn ndim(self) -> usize {
        self.shape().len()
    }
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "64x64" | "2d" => Ok(Grid::Planar64),
            "32x32x32" | "3d" => Ok(Grid::Cube32),
            _ => Err(Error::Config(format!(
                "unsupported grid {s:?}; expected 64x64 or 32x32x32"
            ))),
        }
    }
}

impl std::fmt::Display for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Grid::Planar64 => "64x64",
            Grid::Cube32 => "32x32x32",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Generator constants. Lengths are in normalized coordinates on `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub burden_range: (f64, f64),
    pub positivity_threshold: f64,
    pub n_blobs: usize,
    /// Blob width at `2 - b = 1`.
    pub blob_width: f64,
    pub blob_amplitude: (f64, f64),
    pub blob_radius: f64,
    pub background_level: f64,
    pub head_radius: f64,
    pub noise_sigma: f64,
    /// Weight of the blurred source in the target.
    pub source_carryover: f64,
    /// Blur width in voxels applied to the source before carry-over.
    pub blur_sigma_voxels: f64,
    pub cortex_gain_amplitude: f64,
    pub hippocampus_scale: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            burden_range: (0.8, 1.6),
            positivity_threshold: 1.11,
            n_blobs: 5,
            blob_width: 0.12,
            blob_amplitude: (0.5, 1.0),
            blob_radius: 0.8,
            background_level: 0.3,
            head_radius: 0.9,
            noise_sigma: 0.02,
            source_carryover: 0.6,
            blur_sigma_voxels: 1.5,
            cortex_gain_amplitude: 0.15,
            hippocampus_scale: 0.8,
        }
    }
}

/// Region geometry: an annulus (cortex analogue) and two discs (hippocampus
/// analogue). Disc centers are given in (first, second) in-plane coordinates
/// where "first" runs along the last array axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiGeometry {
    pub cortex_radii: (f64, f64),
    pub hippocampus_centers: Vec<(f64, f64)>,
    pub hippocampus_radius: f64,
}

impl Default for RoiGeometry {
    fn default() -> Self {
        Self {
            cortex_radii: (0.6, 0.8),
            hippocampus_centers: vec![(-0.3, -0.2), (0.3, -0.2)],
            hippocampus_radius: 0.12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiMasks {
    pub cortex: Vec<bool>,
    pub hippocampus: Vec<bool>,
}

impl RoiGeometry {
    pub fn masks(&self, grid: Grid) -> RoiMasks {
        let shape = grid.shape();
        let n: usize = shape.iter().product();
        let mut cortex = Vec::with_capacity(n);
        let mut hippocampus = Vec::with_capacity(n);
        for i in 0..n {
            let p = position(&shape, i);
            let r = norm(&p);
            cortex.push(r >= self.cortex_radii.0 && r <= self.cortex_radii.1);
            hippocampus.push(self.hippocampus_centers.iter().any(|&(a, b)| {
                let mut q = p;
                q[0] -= a;
                q[1] -= b;
                norm(&q) <= self.hippocampus_radius
            }));
        }
        RoiMasks {
            cortex,
            hippocampus,
        }
    }
}

/// Voxel center in normalized coordinates: component 0 runs along the last
/// axis, component 1 along the second-to-last, component 2 along the first
/// axis of a volume (zero for planar grids).
fn position(shape: &[usize], flat: usize) -> [f64; 3] {
    let mut p = [0.0; 3];
    let mut rem = flat;
    for (k, &s) in shape.iter().enumerate().rev() {
        let i = rem % s;
        rem /= s;
        p[shape.len() - 1 - k] = 2.0 * (i as f64 + 0.5) / s as f64 - 1.0;
    }
    p
}

fn norm(p: &[f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// Affine map from a raw cortical ROI mean of the target to burden units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurdenMap {
    pub slope: f64,
    pub intercept: f64,
}

impl BurdenMap {
    pub fn apply(&self, cortex_mean: f64) -> f64 {
        self.slope * cortex_mean + self.intercept
    }

    /// Least-squares fit of `b` on `u`.
    pub fn fit(u: &[f64], b: &[f64]) -> Result<Self> {
        let n = u.len() as f64;
        if u.len() != b.len() || u.len() < 2 {
            return Err(Error::Argument("burden map needs at least two paired values".into()));
        }
        let mu = u.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let sxx: f64 = u.iter().map(|v| (v - mu).powi(2)).sum();
        let sxy: f64 = u.iter().zip(b).map(|(x, y)| (x - mu) * (y - mb)).sum();
        if sxx <= 0.0 {
            return Err(Error::Numerical("constant cortical means".into()));
        }
        let slope = sxy / sxx;
        Ok(Self {
            slope,
            intercept: mb - slope * mu,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn compute<'a>(vols: impl IntoIterator<Item = &'a Volume>) -> Result<Self> {
        let (mut n, mut s, mut ss) = (0usize, 0.0f64, 0.0f64);
        for v in vols {
            for &x in v.data() {
                let x = x as f64;
                n += 1;
                s += x;
                ss += x * x;
            }
        }
        if n == 0 {
            return Err(Error::Argument("no voxels to normalize".into()));
        }
        let mean = s / n as f64;
        let std = (ss / n as f64 - mean * mean).max(0.0).sqrt();
        if std <= 0.0 || !std.is_finite() {
            return Err(Error::Numerical("zero standard deviation".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, v: &Volume) -> Volume {
        let (m, s) = (self.mean, self.std);
        v.map(|x| ((x as f64 - m) / s) as f32)
    }

    pub fn invert(&self, v: &Volume) -> Volume {
        let (m, s) = (self.mean, self.std);
        v.map(|x| (x as f64 * s + m) as f32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub id: usize,
    pub x: Volume,
    pub y: Volume,
    pub burden: f64,
    pub positive: bool,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n: usize,
    pub grid: Grid,
    pub params: GeneratorParams,
    pub split_fractions: (f64, f64, f64),
    pub rois: RoiGeometry,
    pub source_stats: Option<NormStats>,
    pub target_stats: Option<NormStats>,
    pub burden_map: BurdenMap,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetManifest {
    pub fn masks(&self) -> RoiMasks {
        self.rois.masks(self.grid)
    }

    pub fn ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Burden-unit score of a standardized target-modality image: undo the
    /// z-scoring, take the cortical mean, and map it through the burden fit.
    pub fn burden_score(&self, y_std: &Volume, masks: &RoiMasks) -> Result<f64> {
        let stats = self
            .target_stats
            .ok_or_else(|| Error::Config("manifest has no target statistics".into()))?;
        Ok(self.burden_map.apply(roi_mean(&stats.invert(y_std), &masks.cortex)?))
    }
}

/// Generate one subject. The caller assigns `id` and `split`.
pub fn gen_subject(seed: u64, grid: Grid, params: &GeneratorParams) -> Result<SubjectRecord> {
    let shape = grid.shape();
    let n: usize = shape.iter().product();
    let mut r = rng::seeded(seed);
    let (lo, hi) = params.burden_range;
    let b: f64 = r.random_range(lo..hi);

    let dims = grid.ndim();
    let mut tilt = [0.0; 3];
    for t in tilt.iter_mut().take(dims) {
        *t = r.random_range(-0.05..0.05);
    }
    let blobs: Vec<([f64; 3], f64, f64)> = (0..params.n_blobs)
        .map(|_| {
            let c = random_point(&mut r, dims, params.blob_radius);
            let amp = r.random_range(params.blob_amplitude.0..params.blob_amplitude.1);
            let w = params.blob_width * (2.0 - b) * r.random_range(0.9..1.1);
            (c, amp, w)
        })
        .collect();
    let phase = r.random_range(0.0..2.0 * PI);

    let mut x = Vec::with_capacity(n);
    for i in 0..n {
        let p = position(&shape, i);
        let head = 1.0 / (1.0 + ((norm(&p) - params.head_radius) / 0.02).exp());
        let mut v = head * (params.background_level + tilt[0] * p[0] + tilt[1] * p[1] + tilt[2] * p[2]);
        for (c, amp, w) in &blobs {
            let d2: f64 = (0..3).map(|k| (p[k] - c[k]).powi(2)).sum();
            v += amp * (-d2 / (2.0 * w * w)).exp();
        }
        x.push(v);
    }
    let noise = rng::normal_vec(&mut r, n);
    let x: Vec<f32> = x
        .iter()
        .zip(&noise)
        .map(|(v, e)| (v + params.noise_sigma * *e as f64) as f32)
        .collect();
    let x = Volume::new(shape.clone(), x)?;

    let masks = RoiGeometry::default().masks(grid);
    let smooth = gaussian_blur(&x, params.blur_sigma_voxels);
    let noise = rng::normal_vec(&mut r, n);
    let y: Vec<f32> = (0..n)
        .map(|i| {
            let p = position(&shape, i);
            let mut v = params.source_carryover * smooth.data()[i] as f64;
            if masks.cortex[i] {
                let gain = 1.0 + params.cortex_gain_amplitude * (3.0 * p[1].atan2(p[0]) + phase).cos();
                v += b * gain;
            }
            if masks.hippocampus[i] {
                v += params.hippocampus_scale * b;
            }
            (v + params.noise_sigma * noise[i] as f64) as f32
        })
        .collect();
    Ok(SubjectRecord {
        id: 0,
        x,
        y: Volume::new(shape, y)?,
        burden: b,
        positive: b > params.positivity_threshold,
        split: Split::Train,
    })
}

fn random_point(r: &mut SeededRng, dims: usize, radius: f64) -> [f64; 3] {
    loop {
        let mut p = [0.0; 3];
        for v in p.iter_mut().take(dims) {
            *v = r.random_range(-radius..radius);
        }
        if norm(&p) <= radius {
            return p;
        }
    }
}

/// Separable Gaussian blur with truncated, renormalized kernels at the edges.
pub fn gaussian_blur(v: &Volume, sigma: f64) -> Volume {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let shape = v.shape().to_vec();
    let mut data: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    for axis in 0..shape.len() {
        let stride: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let mut out = vec![0.0; data.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let pos = (i / stride % len) as isize;
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (k, w) in kernel.iter().enumerate() {
                let q = pos + k as isize - radius;
                if q >= 0 && q < len as isize {
                    let j = (i as isize + (q - pos) * stride as isize) as usize;
                    acc += w * data[j];
                    wsum += w;
                }
            }
            *o = acc / wsum;
        }
        data = out;
    }
    Volume::new(shape, data.into_iter().map(|x| x as f32).collect()).expect("same shape")
}

/// A generated dataset: manifest plus raw (unstandardized) records in id order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<SubjectRecord>,
}

pub fn gen_dataset(
    n: usize,
    seed: u64,
    grid: Grid,
    split_fractions: (f64, f64, f64),
    params: &GeneratorParams,
) -> Result<Dataset> {
    if n < 20 {
        return Err(Error::Config(format!("dataset needs at least 20 subjects, got {n}")));
    }
    let (ftr, fva, fte) = split_fractions;
    if [ftr, fva, fte].iter().any(|f| *f < 0.0) || ((ftr + fva + fte) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got {split_fractions:?}"
        )));
    }
    let n_train = (ftr * n as f64).round() as usize;
    let n_val = (fva * n as f64).round() as usize;
    if n_val == 0 || n_train + n_val >= n {
        return Err(Error::Config(format!(
            "split fractions {split_fractions:?} leave an empty validation or test split for n = {n}"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::seeded(seed);
    // Fisher-Yates with the seeded generator
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        order.swap(i, j);
    }
    let mut split = vec![Split::Test; n];
    for &id in &order[..n_train] {
        split[id] = Split::Train;
    }
    for &id in &order[n_train..n_train + n_val] {
        split[id] = Split::Val;
    }

    let mut records = Vec::with_capacity(n);
    for (id, s) in split.iter().enumerate() {
        let mut rec = gen_subject(seed.wrapping_add(id as u64), grid, params)?;
        rec.id = id;
        rec.split = *s;
        records.push(rec);
    }
    let ids = |want: Split| -> Vec<usize> {
        records.iter().filter(|r| r.split == want).map(|r| r.id).collect()
    };

    let rois = RoiGeometry::default();
    let masks = rois.masks(grid);
    let train: Vec<&SubjectRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
    let u = train
        .iter()
        .map(|r| roi_mean(&r.y, &masks.cortex))
        .collect::<Result<Vec<_>>>()?;
    let b: Vec<f64> = train.iter().map(|r| r.burden).collect();
    let burden_map = BurdenMap::fit(&u, &b)?;

    let mut manifest = DatasetManifest {
        seed,
        n,
        grid,
        params: params.clone(),
        split_fractions,
        rois,
        source_stats: None,
        target_stats: None,
        burden_map,
        train: ids(Split::Train),
        val: ids(Split::Val),
        test: ids(Split::Test),
    };
    fill_stats(&records, &mut manifest)?;
    Ok(Dataset { manifest, records })
}

fn fill_stats(records: &[SubjectRecord], manifest: &mut DatasetManifest) -> Result<()> {
    let train = || records.iter().filter(|r| r.split == Split::Train);
    if manifest.source_stats.is_none() {
        manifest.source_stats = Some(NormStats::compute(train().map(|r| &r.x))?);
    }
    if manifest.target_stats.is_none() {
        manifest.target_stats = Some(NormStats::compute(train().map(|r| &r.y))?);
    }
    Ok(())
}

/// Z-score both modalities with train-split statistics. Missing statistics are
/// computed (from the train split only) and stored in the manifest.
pub fn standardize(
    records: &[SubjectRecord],
    manifest: &mut DatasetManifest,
) -> Result<Vec<SubjectRecord>> {
    fill_stats(records, manifest)?;
    let (sx, sy) = (
        manifest.source_stats.expect("filled"),
        manifest.target_stats.expect("filled"),
    );
    Ok(records
        .iter()
        .map(|r| SubjectRecord {
            x: sx.apply(&r.x),
            y: sy.apply(&r.y),
            ..r.clone()
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct SubjectMeta {
    id: usize,
    burden: f64,
    positive: bool,
    split: Split,
}

impl Dataset {
    pub fn split(&self, which: Split) -> Vec<&SubjectRecord> {
        self.records.iter().filter(|r| r.split == which).collect()
    }

    /// Copy with both modalities z-scored by the manifest statistics.
    pub fn standardized(&self) -> Result<Dataset> {
        let mut manifest = self.manifest.clone();
        let records = standardize(&self.records, &mut manifest)?;
        Ok(Dataset { manifest, records })
    }

    pub fn to_container(&self) -> Result<Container> {
        let subjects: Vec<SubjectMeta> = self
            .records
            .iter()
            .map(|r| SubjectMeta {
                id: r.id,
                burden: r.burden,
                positive: r.positive,
                split: r.split,
            })
            .collect();
        let mut c = Container::new(serde_json::json!({
            "kind": "dataset",
            "grid": self.manifest.grid,
            "count": self.records.len(),
            "manifest": self.manifest,
            "subjects": subjects,
        }));
        for r in &self.records {
            c.push(format!("x/{}", r.id), r.x.shape().to_vec(), r.x.data().to_vec());
            c.push(format!("y/{}", r.id), r.y.shape().to_vec(), r.y.data().to_vec());
        }
        Ok(c)
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.meta.get("kind").and_then(|k| k.as_str()) != Some("dataset") {
            return Err(Error::Format("container does not hold a dataset".into()));
        }
        let manifest: DatasetManifest = serde_json::from_value(c.meta["manifest"].clone())?;
        let subjects: Vec<SubjectMeta> = serde_json::from_value(c.meta["subjects"].clone())?;
        let mut arrays = c.into_map();
        let mut take = |key: String| -> Result<Volume> {
            let (shape, data) = arrays
                .remove(&key)
                .ok_or_else(|| Error::Format(format!("dataset is missing array {key}")))?;
            Volume::new(shape, data)
        };
        let mut records = Vec::with_capacity(subjects.len());
        for s in subjects {
            records.push(SubjectRecord {
                id: s.id,
                x: take(format!("x/{}", s.id))?,
                y: take(format!("y/{}", s.id))?,
                burden: s.burden,
                positive: s.positive,
                split: s.split,
            });
        }
        Ok(Self { manifest, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path, DATASET_MAGIC, DATASET_VERSION)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path, DATASET_MAGIC, DATASET_VERSION)?)
    }
}

/// Write a single volume in the container format.
pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let mut c = Container::new(serde_json::json!({"kind": "volume"}));
    c.push("volume", v.shape().to_vec(), v.data().to_vec());
    c.save(path, DATASET_MAGIC, DATASET_VERSION)
}

/// Read a single volume written by [`save_volume`].
pub fn load_volume(path: &Path) -> Result<Volume> {
    let c = Container::load(path, DATASET_MAGIC, DATASET_VERSION)?;
    if c.meta.get("kind").and_then(|k| k.as_str()) != Some("volume") {
        return Err(Error::Format(format!("{} does not hold a single volume", path.display())));
    }
    let (_, shape, data) = c.arrays.into_iter().next().ok_or_else(|| Error::Format("empty volume file".into()))?;
    Volume::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPLITS: (f64, f64, f64) = (0.8, 0.05, 0.15);

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    /// R² of an ordinary least-squares fit with intercept, solved by normal equations.
    fn ols_r2(features: &[Vec<f64>], target: &[f64]) -> f64 {
        let p = features[0].len() + 1;
        let rows: Vec<Vec<f64>> = features
            .iter()
            .map(|f| std::iter::once(1.0).chain(f.iter().copied()).collect())
            .collect();
        let mut a = vec![vec![0.0; p + 1]; p];
        for (row, &t) in rows.iter().zip(target) {
            for i in 0..p {
                for j in 0..p {
                    a[i][j] += row[i] * row[j];
                }
                a[i][p] += row[i] * t;
            }
        }
        for c in 0..p {
            let piv = (c..p).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, piv);
            for r in 0..p {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for k in c..=p {
                        a[r][k] -= f * a[c][k];
                    }
                }
            }
        }
        let beta: Vec<f64> = (0..p).map(|i| a[i][p] / a[i][i]).collect();
        let mean = target.iter().sum::<f64>() / target.len() as f64;
        let (mut ss_res, mut ss_tot) = (0.0, 0.0);
        for (row, &t) in rows.iter().zip(target) {
            let pred: f64 = row.iter().zip(&beta).map(|(x, b)| x * b).sum();
            ss_res += (t - pred).powi(2);
            ss_tot += (t - mean).powi(2);
        }
        1.0 - ss_res / ss_tot
    }

    #[test]
    fn subject_is_deterministic_and_labels_follow_threshold() -> Result<()> {
        let p = GeneratorParams::default();
        let a = gen_subject(11, Grid::Planar64, &p)?;
        let b = gen_subject(11, Grid::Planar64, &p)?;
        assert_eq!(a, b);
        assert_ne!(a.x, gen_subject(12, Grid::Planar64, &p)?.x);
        for s in 0..50 {
            let r = gen_subject(s, Grid::Planar64, &p)?;
            assert_eq!(r.positive, r.burden > 1.11);
            assert!((0.8..1.6).contains(&r.burden));
            assert_eq!(r.x.shape(), r.y.shape());
        }
        Ok(())
    }

    #[test]
    fn unsupported_grid_is_a_config_error() {
        assert!(matches!(Grid::from_shape(&[48, 48]), Err(Error::Config(_))));
        assert!(matches!("17x17".parse::<Grid>(), Err(Error::Config(_))));
        assert_eq!("32x32x32".parse::<Grid>().unwrap(), Grid::Cube32);
    }

    #[test]
    fn volumetric_subject_has_cubic_shape() -> Result<()> {
        let r = gen_subject(3, Grid::Cube32, &GeneratorParams::default())?;
        assert_eq!(r.x.shape(), &[32, 32, 32]);
        let m = RoiGeometry::default().masks(Grid::Cube32);
        assert!(m.cortex.iter().any(|&v| v) && m.hippocampus.iter().any(|&v| v));
        Ok(())
    }

    #[test]
    fn masks_nonempty_and_disjoint() {
        for grid in [Grid::Planar64, Grid::Cube32] {
            let m = RoiGeometry::default().masks(grid);
            assert!(m.cortex.iter().any(|&v| v));
            assert!(m.hippocampus.iter().any(|&v| v));
            assert!(m.cortex.iter().zip(&m.hippocampus).all(|(a, b)| !(a & b)));
        }
    }

    #[test]
    fn burden_is_recoverable_from_target_and_weakly_from_source() -> Result<()> {
        let ds = gen_dataset(200, 7, Grid::Planar64, SPLITS, &GeneratorParams::default())?;
        let masks = ds.manifest.masks();
        let b: Vec<f64> = ds.records.iter().map(|r| r.burden).collect();
        let yc: Vec<f64> = ds.records.iter().map(|r| roi_mean(&r.y, &masks.cortex)).collect::<Result<_>>()?;
        assert!(pearson(&yc, &b) >= 0.95, "pearson {}", pearson(&yc, &b));
        let r2_y = ols_r2(&yc.iter().map(|v| vec![*v]).collect::<Vec<_>>(), &b);
        assert!(r2_y >= 0.9, "target R² {r2_y}");

        let xf: Vec<Vec<f64>> = ds
            .records
            .iter()
            .map(|r| Ok(vec![roi_mean(&r.x, &masks.cortex)?, roi_mean(&r.x, &masks.hippocampus)?]))
            .collect::<Result<_>>()?;
        let r2_x = ols_r2(&xf, &b);
        assert!((0.1..=0.9).contains(&r2_x), "source R² {r2_x}");
        Ok(())
    }

    #[test]
    fn default_split_sizes_and_disjointness() -> Result<()> {
        let ds = gen_dataset(100, 1, Grid::Planar64, SPLITS, &GeneratorParams::default())?;
        let m = &ds.manifest;
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (80, 5, 15));
        let mut all: Vec<usize> = m.train.iter().chain(&m.val).chain(&m.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        for r in &ds.records {
            assert_eq!(r.split == Split::Train, m.train.contains(&r.id));
        }
        let again = gen_dataset(100, 1, Grid::Planar64, SPLITS, &GeneratorParams::default())?;
        assert_eq!(again.manifest, ds.manifest);
        Ok(())
    }

    #[test]
    fn degenerate_splits_rejected() {
        let p = GeneratorParams::default();
        assert!(matches!(gen_dataset(100, 1, Grid::Planar64, (0.95, 0.0, 0.05), &p), Err(Error::Config(_))));
        assert!(matches!(gen_dataset(100, 1, Grid::Planar64, (0.9, 0.1, 0.0), &p), Err(Error::Config(_))));
        assert!(matches!(gen_dataset(100, 1, Grid::Planar64, (0.5, 0.2, 0.2), &p), Err(Error::Config(_))));
        assert!(matches!(gen_dataset(10, 1, Grid::Planar64, SPLITS, &p), Err(Error::Config(_))));
    }

    #[test]
    fn standardize_uses_train_statistics() -> Result<()> {
        let ds = gen_dataset(40, 5, Grid::Planar64, SPLITS, &GeneratorParams::default())?;
        let mut manifest = ds.manifest.clone();
        manifest.source_stats = None;
        manifest.target_stats = None;
        let std = standardize(&ds.records, &mut manifest)?;
        assert_eq!(manifest, ds.manifest);
        let train: Vec<&Volume> = std.iter().filter(|r| r.split == Split::Train).map(|r| &r.x).collect();
        let s = NormStats::compute(train.iter().copied())?;
        assert!(s.mean.abs() < 1e-6 && (s.std - 1.0).abs() < 1e-6, "{s:?}");
        let stats = manifest.source_stats.unwrap();
        for (raw, z) in ds.records.iter().zip(&std) {
            let back = stats.invert(&z.x);
            for (a, b) in raw.x.data().iter().zip(back.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        Ok(())
    }

    #[test]
    fn constant_volumes_have_no_statistics() {
        let v = Volume::zeros(&[4, 4]);
        assert!(matches!(NormStats::compute([&v]), Err(Error::Numerical(_))));
    }

    #[test]
    fn burden_score_of_true_target_tracks_burden() -> Result<()> {
        let ds = gen_dataset(60, 9, Grid::Planar64, SPLITS, &GeneratorParams::default())?.standardized()?;
        let masks = ds.manifest.masks();
        for r in ds.split(Split::Test) {
            let s = ds.manifest.burden_score(&r.y, &masks)?;
            assert!((s - r.burden).abs() < 0.1, "{s} vs {}", r.burden);
        }
        Ok(())
    }

    #[test]
    fn dataset_and_volume_files_round_trip() -> Result<()> {
        let dir = tempfile::tempdir()?;
        let ds = gen_dataset(20, 2, Grid::Planar64, SPLITS, &GeneratorParams::default())?;
        let path = dir.path().join("data.ccds");
        ds.save(&path)?;
        assert_eq!(Dataset::load(&path)?, ds);
        let vp = dir.path().join("vol.ccds");
        save_volume(&ds.records[3].y, &vp)?;
        assert_eq!(load_volume(&vp)?, ds.records[3].y);
        assert!(matches!(load_volume(&path), Err(Error::Format(_))));
        Ok(())
    }

    #[test]
    fn blur_preserves_constants() {
        let v = Volume::from_fn(&[6, 7], |_| 2.5);
        assert!(gaussian_blur(&v, 1.5).data().iter().all(|x| (x - 2.5).abs() < 1e-6));
    }
}
