//! Kernel functions, the biased empirical MMD between two vector sets, and
//! [`MmdState`], which caches kernel row sums so that the distance after
//! moving one element between the sets is available in O(1) and a committed
//! move costs O(n) kernel evaluations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel family with its family-specific parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelFamily {
    /// `exp(-dist / (2 sigma^2))`, `dist` squared or not per `square_distance`.
    Gaussian,
    /// `exp(-dist / sigma)`, L1 distance by default.
    Laplacian,
    /// `<a, b>`.
    Linear,
    /// `tanh(gamma <a, b> + coef)`. Not positive definite.
    Sigmoid { gamma: f64, coef: f64 },
    /// `(<a, b> + coef)^degree`.
    Polynomial { degree: u32, coef: f64 },
}

/// Which norm measures distances inside the exponential kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum NormExponent {
    L1,
    L2,
}

impl TryFrom<u8> for NormExponent {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(NormExponent::L1),
            2 => Ok(NormExponent::L2),
            other => Err(format!("norm_exponent must be 1 or 2, got {other}")),
        }
    }
}

impl From<NormExponent> for u8 {
    fn from(n: NormExponent) -> u8 {
        match n {
            NormExponent::L1 => 1,
            NormExponent::L2 => 2,
        }
    }
}

/// A kernel and its parameters.
///
/// `sigma = None` means "not chosen yet": attacks fill it with the median
/// heuristic over their working sets before any kernel is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    #[serde(flatten)]
    pub family: KernelFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    pub norm_exponent: NormExponent,
    /// Square the norm inside the Gaussian exponent (the standard RBF).
    /// `false` gives `exp(-||a - b|| / (2 sigma^2))`.
    #[serde(default = "default_true")]
    pub square_distance: bool,
}

fn default_true() -> bool {
    true
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::gaussian(None)
    }
}

impl KernelSpec {
    pub fn gaussian(sigma: Option<f64>) -> Self {
        Self {
            family: KernelFamily::Gaussian,
            sigma,
            norm_exponent: NormExponent::L2,
            square_distance: true,
        }
    }

    pub fn laplacian(sigma: Option<f64>) -> Self {
        Self {
            family: KernelFamily::Laplacian,
            sigma,
            norm_exponent: NormExponent::L1,
            square_distance: false,
        }
    }

    pub fn linear() -> Self {
        Self {
            family: KernelFamily::Linear,
            sigma: None,
            norm_exponent: NormExponent::L2,
            square_distance: false,
        }
    }

    pub fn polynomial(degree: u32, coef: f64) -> Self {
        Self {
            family: KernelFamily::Polynomial { degree, coef },
            ..Self::linear()
        }
    }

    pub fn sigmoid(gamma: f64, coef: f64) -> Self {
        Self {
            family: KernelFamily::Sigmoid { gamma, coef },
            ..Self::linear()
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = Some(sigma);
        self
    }

    /// Whether the family needs a bandwidth.
    pub fn uses_bandwidth(&self) -> bool {
        matches!(self.family, KernelFamily::Gaussian | KernelFamily::Laplacian)
    }

    /// Checks parameters that do not depend on a resolved bandwidth.
    pub fn validate_params(&self) -> Result<()> {
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidInput(format!("sigma must be positive, got {s}")));
            }
        }
        match self.family {
            KernelFamily::Sigmoid { gamma, coef } if !(gamma.is_finite() && coef.is_finite()) => {
                Err(Error::InvalidInput("sigmoid parameters must be finite".into()))
            }
            KernelFamily::Polynomial { degree, coef } if degree == 0 || !coef.is_finite() => {
                Err(Error::InvalidInput("polynomial degree must be >= 1 and coef finite".into()))
            }
            _ => Ok(()),
        }
    }

    /// Full validation: parameters are sane and a bandwidth is present when
    /// the family needs one.
    pub fn validate(&self) -> Result<()> {
        self.validate_params()?;
        if self.uses_bandwidth() && self.sigma.is_none() {
            return Err(Error::InvalidInput("kernel bandwidth sigma is unresolved".into()));
        }
        Ok(())
    }

    /// Returns a copy whose bandwidth is the median heuristic over `points`
    /// when none was configured. Families without a bandwidth pass through.
    pub fn resolved<'a, I>(&self, points: I) -> Result<KernelSpec>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        if !self.uses_bandwidth() || self.sigma.is_some() {
            return Ok(*self);
        }
        let pts: Vec<&[f64]> = points.into_iter().collect();
        Ok(self.with_sigma(median_heuristic_sigma(&pts)?))
    }

    /// Kernel value without dimension checks. Callers guarantee equal lengths
    /// and a resolved bandwidth.
    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Gaussian => {
                let s = self.sigma.unwrap_or(1.0);
                let d = match (self.norm_exponent, self.square_distance) {
                    (NormExponent::L2, true) => distance(a, b, NormExponent::L2, true),
                    (norm, true) => distance(a, b, norm, false).powi(2),
                    (norm, false) => distance(a, b, norm, false),
                };
                (-d / (2.0 * s * s)).exp()
            }
            KernelFamily::Laplacian => {
                let s = self.sigma.unwrap_or(1.0);
                let mut d = distance(a, b, self.norm_exponent, false);
                if self.square_distance {
                    d *= d;
                }
                (-d / s).exp()
            }
            KernelFamily::Linear => dot(a, b),
            KernelFamily::Sigmoid { gamma, coef } => (gamma * dot(a, b) + coef).tanh(),
            KernelFamily::Polynomial { degree, coef } => (dot(a, b) + coef).powi(degree as i32),
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// L1 distance, or the squared L2 distance when `raw` and the norm is L2.
#[inline]
fn distance(a: &[f64], b: &[f64], norm: NormExponent, raw: bool) -> f64 {
    match norm {
        NormExponent::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        NormExponent::L2 => {
            let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            if raw {
                sq
            } else {
                sq.sqrt()
            }
        }
    }
}

/// Evaluates `k(a, b)`.
pub fn kernel_eval(a: &[f64], b: &[f64], spec: &KernelSpec) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    spec.validate()?;
    Ok(spec.eval(a, b))
}

fn check_sets<A: AsRef<[f64]>, B: AsRef<[f64]>>(x: &[A], y: &[B]) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::EmptySet("first set"));
    }
    if y.is_empty() {
        return Err(Error::EmptySet("second set"));
    }
    let dim = x[0].as_ref().len();
    for v in x.iter().map(AsRef::as_ref).chain(y.iter().map(AsRef::as_ref)) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: v.len(),
            });
        }
    }
    Ok(dim)
}

/// Combines kernel sums into the biased MMD, clamping negative squared
/// values from cancellation to zero.
#[inline]
pub fn mmd_from_sums(sum_xx: f64, sum_yy: f64, sum_xy: f64, n_x: usize, n_y: usize) -> f64 {
    let nx = n_x as f64;
    let ny = n_y as f64;
    let sq = sum_xx / (nx * nx) + sum_yy / (ny * ny) - 2.0 * sum_xy / (nx * ny);
    sq.max(0.0).sqrt()
}

/// Biased empirical MMD between two sets: the RKHS distance between their
/// mean embeddings, self terms included.
pub fn mmd<A: AsRef<[f64]>, B: AsRef<[f64]>>(x: &[A], y: &[B], spec: &KernelSpec) -> Result<f64> {
    check_sets(x, y)?;
    spec.validate()?;
    let xs: Vec<&[f64]> = x.iter().map(AsRef::as_ref).collect();
    let ys: Vec<&[f64]> = y.iter().map(AsRef::as_ref).collect();
    let block = |p: &[&[f64]], q: &[&[f64]]| -> f64 {
        p.iter().map(|a| q.iter().map(|b| spec.eval(a, b)).sum::<f64>()).sum()
    };
    Ok(mmd_from_sums(block(&xs, &xs), block(&ys, &ys), block(&xs, &ys), x.len(), y.len()))
}

/// Median of pairwise L2 distances; falls back to 1.0 when that median is 0.
pub fn median_heuristic_sigma<A: AsRef<[f64]>>(points: &[A]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "median heuristic needs at least 2 points, got {}",
            points.len()
        )));
    }
    let n = points.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(distance(points[i].as_ref(), points[j].as_ref(), NormExponent::L2, false));
        }
    }
    let m = dists.len();
    let cmp = |a: &f64, b: &f64| a.total_cmp(b);
    let median = if m % 2 == 1 {
        *dists.select_nth_unstable_by(m / 2, cmp).1
    } else {
        let (lower, upper, _) = dists.select_nth_unstable_by(m / 2, cmp);
        let upper = *upper;
        let lower_max = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower_max + upper)
    };
    Ok(if median > 0.0 && median.is_finite() { median } else { 1.0 })
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
struct Compensated {
    sum: f64,
    err: f64,
}

impl Compensated {
    #[inline]
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.err += (self.sum - t) + x;
        } else {
            self.err += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    fn value(&self) -> f64 {
        self.sum + self.err
    }
}

/// Which of the two sets an element belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    /// First set (`X`, the target side).
    Target,
    /// Second set (`Y`, the nonmember side).
    Nonmem,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Target => Side::Nonmem,
            Side::Nonmem => Side::Target,
        }
    }
}

/// Cached kernel sums between a target set and a nonmember set.
///
/// Elements live in one pool indexed `0..n_x` for the initial target set and
/// `n_x..n_x + n_y` for the initial nonmember set. An element may belong to
/// either side, both, or neither; every cached sum is over multisets, so the
/// update formulas hold in all cases.
#[derive(Clone, Debug)]
pub struct MmdState {
    spec: KernelSpec,
    points: Vec<Vec<f64>>,
    self_k: Vec<f64>,
    in_target: Vec<bool>,
    in_nonmem: Vec<bool>,
    /// `row_target[p] = sum_{i in target} k(p, i)` for every pool element.
    row_target: Vec<Compensated>,
    row_nonmem: Vec<Compensated>,
    sum_tt: f64,
    sum_nn: f64,
    sum_tn: f64,
    n_t: usize,
    n_n: usize,
    generation: u64,
}

/// A move evaluated by [`MmdState::delta_move`]; apply it with
/// [`PendingMove::commit`] or drop it to leave the state untouched.
#[derive(Clone, Copy, Debug, PartialEq)]
#[must_use = "a pending move does nothing unless committed"]
pub struct PendingMove {
    pub from: Side,
    pub index: usize,
    pub d_before: f64,
    pub d_after: f64,
    generation: u64,
}

impl PendingMove {
    /// Applies the move. Fails if the state changed since evaluation.
    pub fn commit(self, state: &mut MmdState) -> Result<()> {
        if state.generation != self.generation {
            return Err(Error::InvalidInput("stale pending move: state was modified".into()));
        }
        state.transfer(self.from, self.index);
        Ok(())
    }
}

impl MmdState {
    /// Builds the state for target set `x` and nonmember set `y` in O(n^2).
    pub fn new<A: AsRef<[f64]>, B: AsRef<[f64]>>(x: &[A], y: &[B], spec: &KernelSpec) -> Result<Self> {
        check_sets(x, y)?;
        spec.validate()?;
        let points: Vec<Vec<f64>> = x
            .iter()
            .map(|v| v.as_ref().to_vec())
            .chain(y.iter().map(|v| v.as_ref().to_vec()))
            .collect();
        let n = points.len();
        let n_x = x.len();
        let mut row_target = vec![Compensated::default(); n];
        let mut row_nonmem = vec![Compensated::default(); n];
        let mut self_k = vec![0.0; n];
        for p in 0..n {
            self_k[p] = spec.eval(&points[p], &points[p]);
            for q in 0..p {
                let k = spec.eval(&points[p], &points[q]);
                // q < p, so q's side is known from the split point
                if q < n_x {
                    row_target[p].add(k);
                } else {
                    row_nonmem[p].add(k);
                }
                if p < n_x {
                    row_target[q].add(k);
                } else {
                    row_nonmem[q].add(k);
                }
            }
            if p < n_x {
                row_target[p].add(self_k[p]);
            } else {
                row_nonmem[p].add(self_k[p]);
            }
        }
        let total = |rows: &[Compensated]| rows.iter().fold(Compensated::default(), |mut acc, r| {
            acc.add(r.value());
            acc
        });
        let sum_tt = total(&row_target[..n_x]).value();
        let sum_nn = total(&row_nonmem[n_x..]).value();
        let sum_tn = total(&row_nonmem[..n_x]).value();
        Ok(Self {
            spec: *spec,
            points,
            self_k,
            in_target: (0..n).map(|p| p < n_x).collect(),
            in_nonmem: (0..n).map(|p| p >= n_x).collect(),
            row_target,
            row_nonmem,
            sum_tt,
            sum_nn,
            sum_tn,
            n_t: n_x,
            n_n: n - n_x,
            generation: 0,
        })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn pool_len(&self) -> usize {
        self.points.len()
    }

    pub fn point(&self, index: usize) -> &[f64] {
        &self.points[index]
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn n_n(&self) -> usize {
        self.n_n
    }

    pub fn sum_tt(&self) -> f64 {
        self.sum_tt
    }

    pub fn sum_nn(&self) -> f64 {
        self.sum_nn
    }

    pub fn sum_tn(&self) -> f64 {
        self.sum_tn
    }

    pub fn len(&self, side: Side) -> usize {
        match side {
            Side::Target => self.n_t,
            Side::Nonmem => self.n_n,
        }
    }

    pub fn contains(&self, side: Side, index: usize) -> bool {
        match side {
            Side::Target => self.in_target.get(index).copied().unwrap_or(false),
            Side::Nonmem => self.in_nonmem.get(index).copied().unwrap_or(false),
        }
    }

    /// Pool indices currently on `side`, ascending.
    pub fn members(&self, side: Side) -> Vec<usize> {
        let flags = match side {
            Side::Target => &self.in_target,
            Side::Nonmem => &self.in_nonmem,
        };
        flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect()
    }

    /// Current MMD. Zero when either side is empty.
    pub fn distance(&self) -> f64 {
        if self.n_t == 0 || self.n_n == 0 {
            return 0.0;
        }
        mmd_from_sums(self.sum_tt, self.sum_nn, self.sum_tn, self.n_t, self.n_n)
    }

    /// Distance after moving target element `index` to the nonmember side.
    pub fn delta_move(&self, index: usize) -> Result<PendingMove> {
        self.delta_move_from(Side::Target, index)
    }

    /// Distance after moving `index` from side `from` to the other side,
    /// in O(1) from cached row sums. The source side must keep at least one
    /// element and the destination must not already hold `index`.
    pub fn delta_move_from(&self, from: Side, index: usize) -> Result<PendingMove> {
        if index >= self.points.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.points.len(),
            });
        }
        if !self.contains(from, index) {
            return Err(Error::InvalidInput(format!("element {index} is not on the {from:?} side")));
        }
        if self.contains(from.other(), index) {
            return Err(Error::InvalidInput(format!(
                "element {index} is already on the {:?} side",
                from.other()
            )));
        }
        if self.len(from) < 2 {
            return Err(Error::InvalidInput(format!("move would empty the {from:?} side")));
        }
        Ok(PendingMove {
            from,
            index,
            d_before: self.distance(),
            d_after: self.peek_transfer(from, index),
            generation: self.generation,
        })
    }

    /// Distance if `index` left side `from` and joined the other side. Does
    /// not check membership; callers guarantee `index` is on `from` and the
    /// source keeps at least one element.
    #[inline]
    pub fn peek_transfer(&self, from: Side, index: usize) -> f64 {
        let k = self.self_k[index];
        let rt = self.row_target[index].value();
        let rn = self.row_nonmem[index].value();
        match from {
            Side::Target => {
                let tt = self.sum_tt - 2.0 * rt + k;
                let nn = self.sum_nn + 2.0 * rn + k;
                let tn = self.sum_tn - rn + rt - k;
                mmd_from_sums(tt, nn, tn, self.n_t - 1, self.n_n + 1)
            }
            Side::Nonmem => {
                let nn = self.sum_nn - 2.0 * rn + k;
                let tt = self.sum_tt + 2.0 * rt + k;
                let tn = self.sum_tn - rt + rn - k;
                mmd_from_sums(tt, nn, tn, self.n_t + 1, self.n_n - 1)
            }
        }
    }

    fn transfer(&mut self, from: Side, index: usize) {
        self.remove(from, index);
        self.insert(from.other(), index);
    }

    /// Adds pool element `index` to `side` in O(n). No-op if already there.
    pub fn insert(&mut self, side: Side, index: usize) {
        if self.contains(side, index) {
            return;
        }
        match side {
            Side::Target => {
                self.in_target[index] = true;
                self.n_t += 1;
            }
            Side::Nonmem => {
                self.in_nonmem[index] = true;
                self.n_n += 1;
            }
        }
        self.update_rows(side, index, 1.0);
    }

    /// Removes pool element `index` from `side` in O(n). No-op if absent.
    pub fn remove(&mut self, side: Side, index: usize) {
        if !self.contains(side, index) {
            return;
        }
        match side {
            Side::Target => {
                self.in_target[index] = false;
                self.n_t -= 1;
            }
            Side::Nonmem => {
                self.in_nonmem[index] = false;
                self.n_n -= 1;
            }
        }
        self.update_rows(side, index, -1.0);
    }

    fn update_rows(&mut self, side: Side, index: usize, sign: f64) {
        self.generation += 1;
        let rows = match side {
            Side::Target => &mut self.row_target,
            Side::Nonmem => &mut self.row_nonmem,
        };
        let pivot = &self.points[index];
        for (q, row) in rows.iter_mut().enumerate() {
            let k = if q == index {
                self.self_k[index]
            } else {
                self.spec.eval(&self.points[q], pivot)
            };
            row.add(sign * k);
        }
        // re-derive the totals from the rows: running updates of the
        // totals would drift over many commits
        let (mut tt, mut nn, mut tn) = (Compensated::default(), Compensated::default(), Compensated::default());
        for p in 0..self.points.len() {
            if self.in_target[p] {
                tt.add(self.row_target[p].value());
                tn.add(self.row_nonmem[p].value());
            }
            if self.in_nonmem[p] {
                nn.add(self.row_nonmem[p].value());
            }
        }
        self.sum_tt = tt.value();
        self.sum_nn = nn.value();
        self.sum_tn = tn.value();
    }

    /// Recomputes `(sum_tt, sum_nn, sum_tn)` from scratch, for audits.
    pub fn recompute_sums(&self) -> (f64, f64, f64) {
        let t = self.members(Side::Target);
        let n = self.members(Side::Nonmem);
        let block = |a: &[usize], b: &[usize]| -> f64 {
            a.iter()
                .map(|&i| b.iter().map(|&j| self.spec.eval(&self.points[i], &self.points[j])).sum::<f64>())
                .sum()
        };
        (block(&t, &t), block(&n, &n), block(&t, &n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g1() -> KernelSpec {
        KernelSpec::gaussian(Some(1.0))
    }

    /// Independent O(n^2) MMD written directly from the mean-embedding form.
    fn brute_mmd(x: &[Vec<f64>], y: &[Vec<f64>], spec: &KernelSpec) -> f64 {
        let k = |a: &Vec<f64>, b: &Vec<f64>| kernel_eval(a, b, spec).unwrap();
        let mut xx = 0.0;
        for a in x {
            for b in x {
                xx += k(a, b);
            }
        }
        let mut yy = 0.0;
        for a in y {
            for b in y {
                yy += k(a, b);
            }
        }
        let mut xy = 0.0;
        for a in x {
            for b in y {
                xy += k(a, b);
            }
        }
        let (nx, ny) = (x.len() as f64, y.len() as f64);
        (xx / (nx * nx) + yy / (ny * ny) - 2.0 * xy / (nx * ny)).max(0.0).sqrt()
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..dim).map(|_| rng.random::<f64>()).collect()).collect()
    }

    #[test]
    fn gaussian_values() {
        let k = kernel_eval(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &g1()).unwrap();
        assert!((k - (-1.0f64).exp()).abs() < 1e-12);
        assert!((k - 0.367879).abs() < 1e-6);
        assert_eq!(kernel_eval(&[0.3, 0.7], &[0.3, 0.7], &g1()).unwrap(), 1.0);
        assert_eq!(
            kernel_eval(&[0.3, 0.7], &[0.3, 0.7], &KernelSpec::laplacian(Some(0.5))).unwrap(),
            1.0
        );
    }

    #[test]
    fn unsquared_gaussian() {
        let spec = KernelSpec {
            square_distance: false,
            ..g1()
        };
        // ||a - b|| = sqrt(2)
        let k = kernel_eval(&[1.0, 0.0], &[0.0, 1.0], &spec).unwrap();
        assert!((k - (-(2f64.sqrt()) / 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn laplacian_uses_l1() {
        let k = kernel_eval(&[1.0, 0.0], &[0.0, 1.0], &KernelSpec::laplacian(Some(1.0))).unwrap();
        assert!((k - (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn linear_and_polynomial() {
        let k = kernel_eval(&[0.5, 0.5], &[0.2, 0.8], &KernelSpec::linear()).unwrap();
        assert!((k - 0.5).abs() < 1e-12);
        let k = kernel_eval(&[0.5, 0.5], &[0.2, 0.8], &KernelSpec::polynomial(2, 1.0)).unwrap();
        assert!((k - 2.25).abs() < 1e-12);
        let k = kernel_eval(&[0.5, 0.5], &[0.2, 0.8], &KernelSpec::sigmoid(1.0, 0.0)).unwrap();
        assert!((k - 0.5f64.tanh()).abs() < 1e-12);
    }

    #[test]
    fn kernel_errors() {
        assert!(matches!(
            kernel_eval(&[1.0], &[1.0, 2.0], &g1()),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(kernel_eval(&[1.0], &[1.0], &KernelSpec::gaussian(None)).is_err());
        assert!(KernelSpec::gaussian(Some(-1.0)).validate().is_err());
    }

    #[test]
    fn mmd_examples() {
        assert_eq!(mmd(&[vec![0.5, 0.5]], &[vec![0.5, 0.5]], &g1()).unwrap(), 0.0);
        let d = mmd(&[vec![1.0, 0.0, 0.0]], &[vec![0.0, 1.0, 0.0]], &g1()).unwrap();
        let expected = (2.0 - 2.0 * (-1.0f64).exp()).sqrt();
        assert!((d - expected).abs() < 1e-12);
        assert!((d - 1.12439).abs() < 1e-5);
        let empty: Vec<Vec<f64>> = vec![];
        assert!(matches!(mmd(&empty, &[vec![1.0]], &g1()), Err(Error::EmptySet(_))));
    }

    #[test]
    fn mmd_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let nx = rng.random_range(1..=8);
            let ny = rng.random_range(1..=8);
            let x = random_set(&mut rng, nx, 3);
            let y = random_set(&mut rng, ny, 3);
            for spec in [g1(), KernelSpec::laplacian(Some(0.7)), KernelSpec::linear()] {
                let a = mmd(&x, &y, &spec).unwrap();
                let b = brute_mmd(&x, &y, &spec);
                assert!((a - b).abs() <= 1e-9 * b.max(1e-12) + 1e-15, "{a} vs {b}");
                assert!((a - mmd(&y, &x, &spec).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn median_heuristic_examples() {
        let pts = [vec![0.0, 0.0], vec![0.0, 1.0], vec![0.0, 3.0]];
        assert_eq!(median_heuristic_sigma(&pts).unwrap(), 2.0);
        let same = [vec![0.2, 0.2], vec![0.2, 0.2], vec![0.2, 0.2]];
        assert_eq!(median_heuristic_sigma(&same).unwrap(), 1.0);
        let two = [vec![0.0, 0.0], vec![3.0, 4.0]];
        assert_eq!(median_heuristic_sigma(&two).unwrap(), 5.0);
        assert!(median_heuristic_sigma(&[vec![1.0]]).is_err());
        // even count: distances {1, 1, 2, 2, 3, 3}... take 4 collinear points
        let four = [vec![0.0], vec![1.0], vec![2.0], vec![4.0]];
        // pairwise: 1,2,4,1,3,2 -> sorted 1,1,2,2,3,4 -> median 2
        assert_eq!(median_heuristic_sigma(&four).unwrap(), 2.0);
    }

    #[test]
    fn state_init_matches_mmd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_set(&mut rng, 64, 3);
        let y = random_set(&mut rng, 64, 3);
        let spec = g1();
        let state = MmdState::new(&x, &y, &spec).unwrap();
        assert!((state.distance() - mmd(&x, &y, &spec).unwrap()).abs() < 1e-12);
        assert!((state.distance() - brute_mmd(&x, &y, &spec)).abs() < 1e-12);

        let single = MmdState::new(&x[..1], &y, &spec).unwrap();
        assert_eq!(single.n_t(), 1);
        assert_eq!(single.sum_tt(), 1.0);
    }

    #[test]
    fn delta_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..40 {
            let nx = rng.random_range(2..=32);
            let ny = rng.random_range(1..=32);
            let x = random_set(&mut rng, nx, 3);
            let y = random_set(&mut rng, ny, 3);
            let state = MmdState::new(&x, &y, &g1()).unwrap();
            let idx = rng.random_range(0..nx);
            let pending = state.delta_move(idx).unwrap();
            let mut x2 = x.clone();
            let moved = x2.remove(idx);
            let mut y2 = y.clone();
            y2.push(moved);
            let expected = brute_mmd(&x2, &y2, &g1());
            assert!((pending.d_after - expected).abs() <= 1e-9 * expected.max(1e-12));
            // not committing leaves the state alone
            assert_eq!(state.n_t(), nx);
        }
    }

    #[test]
    fn move_and_move_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_set(&mut rng, 10, 3);
        let y = random_set(&mut rng, 7, 3);
        let mut state = MmdState::new(&x, &y, &g1()).unwrap();
        let d0 = state.distance();
        state.delta_move(4).unwrap().commit(&mut state).unwrap();
        assert!(state.contains(Side::Nonmem, 4));
        state.delta_move_from(Side::Nonmem, 4).unwrap().commit(&mut state).unwrap();
        assert!((state.distance() - d0).abs() < 1e-9);
        // re-init from the original sets agrees as well
        let fresh = MmdState::new(&x, &y, &g1()).unwrap();
        assert!((fresh.distance() - state.distance()).abs() < 1e-9);
    }

    #[test]
    fn moving_extra_element_mirrors_sets() {
        // X = Y + {z}; moving z gives X' = Y, Y' = Y + {z}: same distance.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = rng.random_range(1..8);
            let y = random_set(&mut rng, n, 3);
            let z = random_set(&mut rng, 1, 3);
            let mut x = y.clone();
            x.push(z[0].clone());
            let state = MmdState::new(&x, &y, &g1()).unwrap();
            let d = state.distance();
            let pending = state.delta_move(x.len() - 1).unwrap();
            assert!((pending.d_after - d).abs() < 1e-9, "{} vs {}", pending.d_after, d);
        }
    }

    #[test]
    fn delta_move_errors() {
        let x = vec![vec![0.1, 0.9]];
        let y = vec![vec![0.5, 0.5]];
        let state = MmdState::new(&x, &y, &g1()).unwrap();
        assert!(state.delta_move(0).is_err());
        assert!(matches!(state.delta_move(5), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn stale_pending_move_rejected() {
        let x = vec![vec![0.1, 0.9], vec![0.2, 0.8], vec![0.4, 0.6]];
        let y = vec![vec![0.5, 0.5]];
        let mut state = MmdState::new(&x, &y, &g1()).unwrap();
        let a = state.delta_move(0).unwrap();
        let b = state.delta_move(1).unwrap();
        a.commit(&mut state).unwrap();
        assert!(b.commit(&mut state).is_err());
    }

    /// Largest eigenvalue of `-G` by power iteration, shifted so the
    /// iteration converges to the most negative eigenvalue of `G`.
    fn min_eigenvalue(g: &[Vec<f64>]) -> f64 {
        let n = g.len();
        let shift: f64 = g.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        // B = shift*I - G is PSD with top eigenvalue shift - lambda_min(G)
        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        let mut lambda = 0.0;
        for _ in 0..2000 {
            let w: Vec<f64> = (0..n)
                .map(|i| shift * v[i] - (0..n).map(|j| g[i][j] * v[j]).sum::<f64>())
                .collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            lambda = norm;
            v = w.iter().map(|x| x / norm).collect();
        }
        shift - lambda
    }

    #[test]
    fn gram_is_positive_semidefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for spec in [g1(), KernelSpec::laplacian(Some(0.5))] {
            for _ in 0..5 {
                let pts = random_set(&mut rng, 16, 3);
                let g: Vec<Vec<f64>> = pts.iter().map(|a| pts.iter().map(|b| spec.eval(a, b)).collect()).collect();
                assert!(min_eigenvalue(&g) >= -1e-8);
            }
        }
    }

    #[test]
    fn resolves_bandwidth() {
        let pts = [vec![0.0, 0.0], vec![0.0, 1.0], vec![0.0, 3.0]];
        let spec = KernelSpec::gaussian(None).resolved(pts.iter().map(|p| p.as_slice())).unwrap();
        assert_eq!(spec.sigma, Some(2.0));
        let fixed = KernelSpec::gaussian(Some(0.3)).resolved(pts.iter().map(|p| p.as_slice())).unwrap();
        assert_eq!(fixed.sigma, Some(0.3));
    }

    #[test]
    fn spec_serde_shape() {
        let spec = KernelSpec::gaussian(Some(0.5));
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, r#"{"family":"gaussian","sigma":0.5,"norm_exponent":2,"square_distance":true}"#);
        let poly: KernelSpec =
            serde_json::from_str(r#"{"family":"polynomial","degree":3,"coef":1.0,"norm_exponent":2}"#).unwrap();
        assert_eq!(poly.family, KernelFamily::Polynomial { degree: 3, coef: 1.0 });
        assert!(serde_json::from_str::<KernelSpec>(r#"{"family":"gaussian","norm_exponent":3}"#).is_err());
    }
}
