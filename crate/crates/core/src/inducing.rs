//! Choosing inducing points among training rows.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::kernels::{row_major, sq_dist, KernelSpec};

pub const DEFAULT_CANDIDATE_POOL: usize = 64;
pub const DEFAULT_KMEANS_ITERS: usize = 100;

/// Pivots below this fraction of σ_f² mark a candidate as (numerically) already spanned.
const DEGENERATE_PIVOT: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMethod {
    Random,
    Kmeans,
    GreedyElbo,
}

impl fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMethod::Random => "random",
            SelectionMethod::Kmeans => "kmeans",
            SelectionMethod::GreedyElbo => "greedy-elbo",
        })
    }
}

impl FromStr for SelectionMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SelectionMethod::Random),
            "kmeans" | "k-means" => Ok(SelectionMethod::Kmeans),
            "greedy-elbo" | "greedy" => Ok(SelectionMethod::GreedyElbo),
            _ => Err(Error::Config(format!(
                "unknown selection method '{s}' (expected random, kmeans or greedy-elbo)"
            ))),
        }
    }
}

fn check_count(n: usize, m: usize) -> Result<()> {
    if m == 0 || m > n {
        return Err(Error::input(format!(
            "cannot select {m} inducing points from {n} training rows"
        )));
    }
    Ok(())
}

pub fn gather_rows(x: &DMatrix<f64>, indices: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(indices.len(), x.ncols(), |i, j| x[(indices[i], j)])
}

/// Uniform sample without replacement; a partial Fisher-Yates shuffle, so
/// for a fixed seed the selection for `m` is a prefix of the one for `m + 1`.
pub fn select_random(n: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    check_count(n, m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(m);
    Ok(pool)
}

fn nearest(point: &[f64], rows: &[f64], d: usize, skip: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, row) in rows.chunks_exact(d).enumerate() {
        if skip(i) {
            continue;
        }
        let dist = sq_dist(point, row);
        if best.is_none_or(|(_, b)| dist < b) {
            best = Some((i, dist));
        }
    }
    best.map(|(i, _)| i)
}

/// k-means++ seeding, Lloyd iterations, then each centroid snapped (in
/// centroid order) to its nearest training row not already taken.
pub fn select_kmeans(
    x: &DMatrix<f64>,
    m: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Vec<usize>> {
    let n = x.nrows();
    check_count(n, m)?;
    let d = x.ncols();
    let rows = row_major(x);
    let row = |i: usize| &rows[i * d..(i + 1) * d];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<f64> = Vec::with_capacity(m * d);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..d])).collect();
    for _ in 1..m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(row(pick));
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(row(i), &centroids[start..]));
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let c = nearest(row(i), &centroids, d, |_| false).expect("m >= 1");
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; m * d];
        let mut counts = vec![0usize; m];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * d..(a + 1) * d].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..m {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
    }

    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(m);
    for c in 0..m {
        let i = nearest(&centroids[c * d..(c + 1) * d], &rows, d, |i| taken[i]).expect("m <= n");
        taken[i] = true;
        out.push(i);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedySelection {
    pub indices: Vec<usize>,
    /// Bound after each accepted point; `elbo_trace[k]` is the bound for the first `k + 1` indices.
    pub elbo_trace: Vec<f64>,
}

/// Incrementally maintained factors of the collapsed bound for a growing
/// inducing set: `L` (K_mm), `V = L⁻¹K_mn`, `L_B` (B = I + σ⁻²VVᵀ), `c = L_B⁻¹VY`.
struct GreedyState<'a> {
    rows: &'a [f64],
    d: usize,
    n: usize,
    y: &'a [f64],
    cols: usize,
    spec: KernelSpec,
    selected: Vec<usize>,
    l: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    lb: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    elbo: f64,
}

struct Extension {
    l: Vec<f64>,
    pivot: f64,
    v: Vec<f64>,
    lb: Vec<f64>,
    db: f64,
    c: Vec<f64>,
    gain: f64,
}

fn forward_solve(lower: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(b.len());
    for (i, row) in lower.iter().enumerate() {
        let s: f64 = row[..i].iter().zip(&x).map(|(a, b)| a * b).sum();
        x.push((b[i] - s) / row[i]);
    }
    x
}

impl<'a> GreedyState<'a> {
    fn new(rows: &'a [f64], d: usize, y: &'a [f64], cols: usize, spec: KernelSpec) -> Self {
        let n = rows.len() / d;
        let s2 = spec.noise_variance;
        let nf = n as f64;
        let cf = cols as f64;
        let y2: f64 = y.iter().map(|v| v * v).sum();
        let elbo = -0.5 * cf * nf * (2.0 * PI).ln()
            - 0.5 * y2 / s2
            - 0.5 * cf * nf * s2.ln()
            - 0.5 * cf * nf * spec.signal_variance / s2;
        GreedyState {
            rows,
            d,
            n,
            y,
            cols,
            spec,
            selected: Vec::new(),
            l: Vec::new(),
            v: Vec::new(),
            lb: Vec::new(),
            c: Vec::new(),
            elbo,
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    /// Factors for appending row `z`; `None` when `z` is already spanned
    /// unless `force`, which floors the pivot at the base jitter.
    fn extend(&self, z: usize, force: bool) -> Option<Extension> {
        let spec = &self.spec;
        let s2 = spec.noise_variance;
        let zr = self.row(z);
        let kz: Vec<f64> = self
            .selected
            .iter()
            .map(|&j| spec.eval_slices(self.row(j), zr))
            .collect();
        let l = forward_solve(&self.l, &kz);
        let mut pivot2 = spec.signal_variance - l.iter().map(|v| v * v).sum::<f64>();
        if pivot2 <= DEGENERATE_PIVOT * spec.signal_variance {
            if !force {
                return None;
            }
            pivot2 = pivot2.max(spec.base_jitter());
        }
        let pivot = pivot2.sqrt();

        let mut v: Vec<f64> = (0..self.n)
            .map(|i| spec.eval_slices(zr, self.row(i)))
            .collect();
        for (li, vi) in l.iter().zip(&self.v) {
            for (a, b) in v.iter_mut().zip(vi) {
                *a -= li * b;
            }
        }
        for a in v.iter_mut() {
            *a /= pivot;
        }
        let v2: f64 = v.iter().map(|a| a * a).sum();

        let bcol: Vec<f64> = self
            .v
            .iter()
            .map(|vi| vi.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / s2)
            .collect();
        let lb = forward_solve(&self.lb, &bcol);
        let db2 = 1.0 + v2 / s2 - lb.iter().map(|a| a * a).sum::<f64>();
        let db = db2.sqrt();

        let mut vy = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (acc, yv) in vy
                .iter_mut()
                .zip(&self.y[i * self.cols..(i + 1) * self.cols])
            {
                *acc += vi * yv;
            }
        }
        let c: Vec<f64> = (0..self.cols)
            .map(|col| {
                let s: f64 = lb.iter().zip(&self.c).map(|(a, row)| a * row[col]).sum();
                (vy[col] - s) / db
            })
            .collect();
        let cf = self.cols as f64;
        let c2: f64 = c.iter().map(|a| a * a).sum();
        let gain = 0.5 * c2 / (s2 * s2) - 0.5 * cf * db2.ln() + 0.5 * cf * v2 / s2;
        Some(Extension {
            l,
            pivot,
            v,
            lb,
            db,
            c,
            gain,
        })
    }

    fn accept(&mut self, z: usize, mut ext: Extension) {
        ext.l.push(ext.pivot);
        ext.lb.push(ext.db);
        self.l.push(ext.l);
        self.lb.push(ext.lb);
        self.v.push(ext.v);
        self.c.push(ext.c);
        self.selected.push(z);
        self.elbo += ext.gain;
    }
}

/// Forward selection maximizing the collapsed bound summed over target
/// columns. Each step scores a fresh seeded pool of `candidate_pool`
/// unselected rows (every remaining row when the pool is at least that large).
pub fn select_greedy_elbo(
    x: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    spec: &KernelSpec,
    m: usize,
    candidate_pool: usize,
    seed: u64,
) -> Result<GreedySelection> {
    let n = x.nrows();
    check_count(n, m)?;
    spec.validate()?;
    if spec.noise_variance <= 0.0 {
        return Err(Error::input(
            "greedy selection needs a strictly positive noise variance",
        ));
    }
    if candidate_pool == 0 {
        return Err(Error::input("candidate pool must be at least 1"));
    }
    if targets.nrows() != n {
        return Err(Error::input(format!(
            "{} target rows for {n} training points",
            targets.nrows()
        )));
    }
    let rows = row_major(x);
    let y = row_major(targets);
    let mut state = GreedyState::new(&rows, x.ncols(), &y, targets.ncols(), *spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(m);

    for _ in 0..m {
        let r = remaining.len();
        let pool_len = candidate_pool.min(r);
        if pool_len < r {
            for i in 0..pool_len {
                let j = rng.random_range(i..r);
                remaining.swap(i, j);
            }
        }
        let mut best = best_extension(&state, &remaining[..pool_len], false)?;
        if best.is_none() && pool_len < r {
            best = best_extension(&state, &remaining, false)?;
        }
        let (pos, ext) = match best {
            Some(b) => b,
            None => {
                let (pos, &z) = remaining
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, &z)| z)
                    .expect("m <= n");
                (pos, state.extend(z, true).expect("forced"))
            }
        };
        let z = remaining.swap_remove(pos);
        state.accept(z, ext);
        if !state.elbo.is_finite() {
            return Err(Error::NonFinite("greedy variational bound".into()));
        }
        trace.push(state.elbo);
    }
    Ok(GreedySelection {
        indices: state.selected,
        elbo_trace: trace,
    })
}

/// Highest-gain candidate, ties to the lowest row index; returns its position in `pool`.
fn best_extension(
    state: &GreedyState<'_>,
    pool: &[usize],
    force: bool,
) -> Result<Option<(usize, Extension)>> {
    let mut best: Option<(usize, Extension)> = None;
    for (pos, &z) in pool.iter().enumerate() {
        let Some(ext) = state.extend(z, force) else {
            continue;
        };
        if !ext.gain.is_finite() {
            return Err(Error::NonFinite(format!("bound increment for row {z}")));
        }
        let better = match &best {
            None => true,
            Some((bp, b)) => ext.gain > b.gain || (ext.gain == b.gain && z < pool[*bp]),
        };
        if better {
            best = Some((pos, ext));
        }
    }
    Ok(best)
}

pub fn assign_labels(indices: &[usize], labels: &[usize]) -> Result<Vec<usize>> {
    indices
        .iter()
        .map(|&i| {
            labels.get(i).copied().ok_or_else(|| {
                Error::input(format!(
                    "inducing index {i} out of range for {} rows",
                    labels.len()
                ))
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionOptions {
    pub candidate_pool: usize,
    pub kmeans_iters: usize,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        SelectionOptions {
            candidate_pool: DEFAULT_CANDIDATE_POOL,
            kmeans_iters: DEFAULT_KMEANS_ITERS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InducingSet {
    pub indices: Vec<usize>,
    pub inputs: DMatrix<f64>,
    pub labels: Vec<usize>,
    /// Only filled by greedy selection.
    pub elbo_trace: Vec<f64>,
}

impl InducingSet {
    /// First `m` points; meaningful for the nested methods (random, greedy).
    pub fn prefix(&self, m: usize) -> InducingSet {
        let m = m.min(self.indices.len());
        InducingSet {
            indices: self.indices[..m].to_vec(),
            inputs: self.inputs.rows(0, m).into_owned(),
            labels: self.labels[..m].to_vec(),
            elbo_trace: self.elbo_trace.iter().take(m).copied().collect(),
        }
    }
}

/// One-vs-rest targets of the dataset are used for the greedy bound.
pub fn select_inducing(
    ds: &EmbeddingDataset,
    spec: &KernelSpec,
    m: usize,
    method: SelectionMethod,
    seed: u64,
    options: &SelectionOptions,
) -> Result<InducingSet> {
    let x = ds.embeddings();
    let (indices, elbo_trace) = match method {
        SelectionMethod::Random => (select_random(ds.len(), m, seed)?, Vec::new()),
        SelectionMethod::Kmeans => (select_kmeans(x, m, seed, options.kmeans_iters)?, Vec::new()),
        SelectionMethod::GreedyElbo => {
            let g = select_greedy_elbo(
                x,
                &ds.one_hot_targets(),
                spec,
                m,
                options.candidate_pool,
                seed,
            )?;
            (g.indices, g.elbo_trace)
        }
    };
    Ok(InducingSet {
        inputs: gather_rows(x, &indices),
        labels: assign_labels(&indices, ds.labels())?,
        indices,
        elbo_trace,
    })
}
