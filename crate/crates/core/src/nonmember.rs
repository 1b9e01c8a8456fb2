//! Nonmember preparation.
//!
//! Two routes produce a comparison set of likely nonmembers:
//!
//! * generate fresh probe inputs: edge-operator transforms of existing
//!   images, random noise on existing samples, or uniform random features
//!   (samples from another domain are simply loaded from a second probe file);
//! * roughly split the target dataset itself, by a top-1 threshold or by
//!   two-way clustering of the projected outputs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ProbeView;
use crate::error::{Error, Result};
use crate::projection::{project_all, ProjectionSpec};

/// Row-major 2-D grayscale image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(format!(
                "grid {rows}x{cols} does not match {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidInput("ragged grid rows".into()));
        }
        Self::new(r, c, rows.into_iter().flatten().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Pixel with edge replication for out-of-range coordinates.
    fn clamped(&self, r: isize, c: isize) -> f64 {
        let r = r.clamp(0, self.rows as isize - 1) as usize;
        let c = c.clamp(0, self.cols as isize - 1) as usize;
        self.get(r, c)
    }
}

/// Reads one grid from a CSV file, one image row per line.
pub fn load_grid_csv(path: impl AsRef<Path>) -> Result<Grid> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidInput(format!("bad pixel `{v}`: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Grid::from_rows(rows)
}

/// Sample payload: a flat feature vector or an image.
#[derive(Clone, Debug, PartialEq)]
pub enum Features {
    Vector(Vec<f64>),
    Grid(Grid),
}

/// A probe input before it is sent to the target model.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    pub features: Features,
    pub domain_tag: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeOperator {
    Laplace,
    Sobel,
    Scharr,
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SCHARR_X: [[f64; 3]; 3] = [[-3.0, 0.0, 3.0], [-10.0, 0.0, 10.0], [-3.0, 0.0, 3.0]];
const LAPLACE_4: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];

fn transpose(k: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for (i, row) in k.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            t[j][i] = *v;
        }
    }
    t
}

/// 3x3 correlation at `(r, c)` with replicated borders.
fn apply3(img: &Grid, k: &[[f64; 3]; 3], r: usize, c: usize) -> f64 {
    let mut acc = 0.0;
    for (dr, row) in k.iter().enumerate() {
        for (dc, w) in row.iter().enumerate() {
            if *w != 0.0 {
                acc += w * img.clamped(r as isize + dr as isize - 1, c as isize + dc as isize - 1);
            }
        }
    }
    acc
}

/// Applies an edge operator. Sobel and Scharr give the gradient magnitude;
/// Laplace gives the 4-neighbour response. Output is clipped to `[0, 1]`.
pub fn transform_sample(img: &Grid, op: EdgeOperator) -> Result<Grid> {
    if img.rows < 3 || img.cols < 3 {
        return Err(Error::InvalidInput(format!(
            "edge operators need at least a 3x3 grid, got {}x{}",
            img.rows, img.cols
        )));
    }
    let mut out = Vec::with_capacity(img.data.len());
    for r in 0..img.rows {
        for c in 0..img.cols {
            let v = match op {
                EdgeOperator::Laplace => apply3(img, &LAPLACE_4, r, c),
                EdgeOperator::Sobel | EdgeOperator::Scharr => {
                    let kx = if op == EdgeOperator::Sobel { &SOBEL_X } else { &SCHARR_X };
                    let gx = apply3(img, kx, r, c);
                    let gy = apply3(img, &transpose(kx), r, c);
                    (gx * gx + gy * gy).sqrt()
                }
            };
            out.push(v.clamp(0.0, 1.0));
        }
    }
    Grid::new(img.rows, img.cols, out)
}

/// Random noise model for perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Noise {
    /// Additive zero-mean Gaussian noise with the given variance.
    Gaussian { variance: f64 },
    /// Each coordinate becomes 0 or 1 with probability `rate / 2` each.
    SaltPepper { rate: f64 },
}

impl Noise {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Noise::Gaussian { variance } if !(variance > 0.0 && variance.is_finite()) => {
                Err(Error::InvalidInput(format!("gaussian variance must be > 0, got {variance}")))
            }
            Noise::SaltPepper { rate } if !(rate > 0.0 && rate <= 1.0) => {
                Err(Error::InvalidInput(format!("salt-and-pepper rate must be in (0, 1], got {rate}")))
            }
            _ => Ok(()),
        }
    }
}

/// Perturbs a feature vector; deterministic for a given seed.
pub fn perturb_random(x: &[f64], noise: Noise, seed: u64) -> Result<Vec<f64>> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(perturb_with(x, noise, &mut rng))
}

pub(crate) fn perturb_with<R: Rng>(x: &[f64], noise: Noise, rng: &mut R) -> Vec<f64> {
    match noise {
        Noise::Gaussian { variance } => {
            let normal = Normal::new(0.0, variance.sqrt()).expect("validated variance");
            x.iter()
                .map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0))
                .collect()
        }
        Noise::SaltPepper { rate } => x
            .iter()
            .map(|&v| {
                let u: f64 = rng.random();
                if u < rate / 2.0 {
                    0.0
                } else if u < rate {
                    1.0
                } else {
                    v
                }
            })
            .collect(),
    }
}

/// Perturbs an image pixel-wise.
pub fn perturb_grid(img: &Grid, noise: Noise, seed: u64) -> Result<Grid> {
    Grid::new(img.rows, img.cols, perturb_random(&img.data, noise, seed)?)
}

/// Shape of a generated sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Vector(usize),
    Grid(usize, usize),
}

/// Uniform `[0, 1]` features; deterministic for a given seed.
pub fn generate_random(shape: Shape, seed: u64) -> Result<RawSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = match shape {
        Shape::Vector(d) if d > 0 => Features::Vector((0..d).map(|_| rng.random::<f64>()).collect()),
        Shape::Grid(r, c) if r > 0 && c > 0 => {
            Features::Grid(Grid::new(r, c, (0..r * c).map(|_| rng.random::<f64>()).collect())?)
        }
        other => return Err(Error::InvalidInput(format!("invalid shape {other:?}"))),
    };
    Ok(RawSample {
        features,
        domain_tag: "random".into(),
    })
}

/// `count` uniform random vectors of dimension `dim` from one seeded stream.
pub fn generate_random_batch(count: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if dim == 0 {
        return Err(Error::InvalidInput("dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
        .collect())
}

/// Noisy copies of `sources`, cycling through them until `count` are made.
pub fn perturb_batch(sources: &[Vec<f64>], count: usize, noise: Noise, seed: u64) -> Result<Vec<Vec<f64>>> {
    noise.validate()?;
    if sources.is_empty() {
        return Err(Error::EmptySet("perturbation sources"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|i| perturb_with(&sources[i % sources.len()], noise, &mut rng))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparationMethod {
    Threshold,
    Kmeans,
    Agglomerative,
}

/// How to split a target set into pseudo-nonmembers and the rest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparationSpec {
    pub method: SeparationMethod,
    /// Pseudo-nonmember count for the threshold method. `None` selects
    /// 1,000, clipped to a quarter of the dataset.
    pub threshold_count: Option<usize>,
    pub rng_seed: u64,
}

impl Default for SeparationSpec {
    fn default() -> Self {
        Self {
            method: SeparationMethod::Threshold,
            threshold_count: None,
            rng_seed: 0,
        }
    }
}

/// Default pseudo-nonmember count for the threshold method.
pub const DEFAULT_THRESHOLD_COUNT: usize = 1000;

/// A partition of a dataset by position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Separation {
    pub pseudo_nonmem: Vec<usize>,
    pub pseudo_target: Vec<usize>,
}

impl Separation {
    pub fn nonmem_ids<'a>(&self, view: &ProbeView<'a>) -> Vec<&'a str> {
        self.pseudo_nonmem.iter().map(|&i| view.get(i).id).collect()
    }

    pub fn target_ids<'a>(&self, view: &ProbeView<'a>) -> Vec<&'a str> {
        self.pseudo_target.iter().map(|&i| view.get(i).id).collect()
    }
}

fn top1(probs: &[f64]) -> f64 {
    probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Roughly splits a target set into pseudo-nonmembers and pseudo-targets.
pub fn rough_separation(
    view: &ProbeView<'_>,
    spec: &SeparationSpec,
    projection: &ProjectionSpec,
) -> Result<Separation> {
    let n = view.len();
    match spec.method {
        SeparationMethod::Threshold => {
            let count = match spec.threshold_count {
                Some(c) => c,
                None => DEFAULT_THRESHOLD_COUNT.min(n / 4).max(1),
            };
            if count == 0 || count >= n {
                return Err(Error::InvalidInput(format!(
                    "threshold count {count} must be in [1, {n})"
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                let (ra, rb) = (view.get(a), view.get(b));
                top1(ra.probs).total_cmp(&top1(rb.probs)).then_with(|| ra.id.cmp(rb.id))
            });
            let mut nonmem = order[..count].to_vec();
            let mut target = order[count..].to_vec();
            nonmem.sort_unstable();
            target.sort_unstable();
            Ok(Separation {
                pseudo_nonmem: nonmem,
                pseudo_target: target,
            })
        }
        SeparationMethod::Kmeans | SeparationMethod::Agglomerative => {
            if n < 4 {
                return Err(Error::InvalidInput(format!("clustering needs at least 4 records, got {n}")));
            }
            let points = project_all(view, projection)?;
            let assign = if spec.method == SeparationMethod::Kmeans {
                match two_means(&points, spec.rng_seed) {
                    Ok(a) => a,
                    Err(_) => two_means(&points, spec.rng_seed.wrapping_add(1))?,
                }
            } else {
                average_linkage_two(&points)
            };
            let mean_top1 = |cluster: bool| {
                let (sum, cnt) = (0..n)
                    .filter(|&i| assign[i] == cluster)
                    .fold((0.0, 0usize), |(s, c), i| (s + top1(view.get(i).probs), c + 1));
                sum / cnt as f64
            };
            // lower mean confidence is the pseudo-nonmember cluster
            let nonmem_cluster = mean_top1(true) < mean_top1(false);
            Ok(Separation {
                pseudo_nonmem: (0..n).filter(|&i| assign[i] == nonmem_cluster).collect(),
                pseudo_target: (0..n).filter(|&i| assign[i] != nonmem_cluster).collect(),
            })
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's 2-means with k-means++ seeding, at most 100 iterations. Returns
/// the cluster flag of each point; errors if a cluster ends up empty.
pub fn two_means(points: &[Vec<f64>], seed: u64) -> Result<Vec<bool>> {
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..n);
    let weights: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("k-means seeding: all points coincide".into()));
    }
    let mut u = rng.random::<f64>() * total;
    let mut second = n - 1;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            second = i;
            break;
        }
        u -= w;
    }
    let mut centers = [points[first].clone(), points[second].clone()];
    let mut assign = vec![false; n];
    for iter in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let a = sq_dist(p, &centers[1]) < sq_dist(p, &centers[0]);
            if a != assign[i] {
                changed = true;
                assign[i] = a;
            }
        }
        let dim = points[0].len();
        let mut sums = [vec![0.0; dim], vec![0.0; dim]];
        let mut counts = [0usize; 2];
        for (p, &a) in points.iter().zip(&assign) {
            let c = a as usize;
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        if counts.contains(&0) {
            return Err(Error::Degenerate("k-means produced an empty cluster".into()));
        }
        for c in 0..2 {
            centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
        if !changed && iter > 0 {
            break;
        }
    }
    Ok(assign)
}

/// Average-linkage agglomerative clustering cut at two clusters.
///
/// Uses the nearest-neighbour chain algorithm (O(n^2) time and memory); the
/// merges are then replayed in height order so the cut matches the greedy
/// closest-pair procedure.
pub fn average_linkage_two(points: &[Vec<f64>]) -> Vec<bool> {
    let n = points.len();
    if n <= 2 {
        return (0..n).map(|i| i == 1).collect();
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_dist(&points[i], &points[j]).sqrt();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut chain: Vec<usize> = Vec::with_capacity(n);
    // (height, a, b): cluster slots a and b merge into slot a
    let mut merges: Vec<(f64, usize, usize)> = Vec::with_capacity(n - 1);
    let mut remaining = n;
    while remaining > 1 {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).expect("an active cluster"));
        }
        let top = *chain.last().unwrap();
        let prev = if chain.len() >= 2 { Some(chain[chain.len() - 2]) } else { None };
        // nearest active neighbour, preferring the previous chain element on ties
        let mut best = prev.unwrap_or(usize::MAX);
        let mut best_d = prev.map(|p| dist[top * n + p]).unwrap_or(f64::INFINITY);
        for j in 0..n {
            if j != top && active[j] && dist[top * n + j] < best_d {
                best = j;
                best_d = dist[top * n + j];
            }
        }
        if Some(best) == prev {
            chain.pop();
            chain.pop();
            let (a, b) = (top.min(best), top.max(best));
            merges.push((best_d, a, b));
            let (sa, sb) = (size[a] as f64, size[b] as f64);
            for k in 0..n {
                if active[k] && k != a && k != b {
                    let d = (sa * dist[k * n + a] + sb * dist[k * n + b]) / (sa + sb);
                    dist[k * n + a] = d;
                    dist[a * n + k] = d;
                }
            }
            size[a] += size[b];
            active[b] = false;
            remaining -= 1;
        } else {
            chain.push(best);
        }
    }
    merges.sort_by(|x, y| x.0.total_cmp(&y.0));
    // replay all but the last merge with union-find
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(_, a, b) in &merges[..n - 2] {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[rb] = ra;
    }
    let root0 = find(&mut parent, 0);
    (0..n).map(|i| find(&mut parent, i) != root0).collect()
}
