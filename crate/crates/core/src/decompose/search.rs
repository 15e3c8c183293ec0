use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::net::Grid;
use super::{capped_mode_subspaces, ApproximationResult, NetSearchConfig, SearchStrategy};
use crate::error::Result;
use crate::tensor::{frobenius_distance, khatri_rao, CpDecomposition, DenseTensor};
use crate::Scalar;

const CHUNK: u64 = 1 << 14;

/// Factor columns in core coordinates: `cols[r][j]` is column `r` of mode `j`.
type Cols<S> = Vec<Vec<Vec<S>>>;

/// Core tensor plus scratch-free objective evaluation.
struct Core<S: Scalar> {
    g: DenseTensor<S>,
    rank: usize,
}

impl<S: Scalar> Core<S> {
    fn order(&self) -> usize {
        self.g.order()
    }

    fn dims(&self) -> &[usize] {
        self.g.shape()
    }

    /// `‖G − Σ_r ⊗_j cols[r][j]‖²`.
    fn objective(&self, cols: &Cols<S>, buf: &mut Scratch<S>) -> S {
        let len = self.g.len();
        buf.acc.clear();
        buf.acc.resize(len, S::zero());
        for col in cols {
            buf.a.clear();
            buf.a.extend_from_slice(&col[0]);
            for v in &col[1..] {
                buf.b.clear();
                for &x in &buf.a {
                    buf.b.extend(v.iter().map(|&y| x * y));
                }
                std::mem::swap(&mut buf.a, &mut buf.b);
            }
            for (s, &x) in buf.acc.iter_mut().zip(&buf.a) {
                *s += x;
            }
        }
        self.g.data().iter().zip(&buf.acc).fold(S::zero(), |acc, (&g, &x)| {
            let d = g - x;
            acc + d * d
        })
    }
}

struct Scratch<S> {
    acc: Vec<S>,
    a: Vec<S>,
    b: Vec<S>,
}

impl<S> Default for Scratch<S> {
    fn default() -> Self {
        Self { acc: Vec::new(), a: Vec::new(), b: Vec::new() }
    }
}

fn cmp<S: Scalar>(a: &S, b: &S) -> Ordering {
    a.partial_cmp(b).expect("finite objective")
}

/// Outcome of one local or global search stage in core coordinates.
struct Found<S> {
    cols: Cols<S>,
    value: S,
    evals: u64,
    partial: bool,
}

pub(super) fn run<S: Scalar>(t: &DenseTensor<S>, cfg: &NetSearchConfig<S>) -> Result<ApproximationResult<S>> {
    let l = t.order();
    let rho = cfg.rho.per_mode(l)?;
    let res = cfg.resolution();
    let guarantee_bound = S::of((2 * l - 1) as f64) * cfg.target_eps;
    let theoretical_resolution_met = res <= cfg.theoretical_resolution() * S::of(1.0 + 1e-12);
    let r = cfg.rank;

    if r == 0 {
        let factors = t.shape().iter().map(|&n| DMatrix::zeros(n, 0)).collect();
        let cp = CpDecomposition::new(factors)?;
        let achieved_error = frobenius_distance(t, &cp.expand()?)?;
        let subspace_residuals = (0..l).map(|j| t.unfold(j).map(|m| m.norm())).collect::<Result<_>>()?;
        return Ok(ApproximationResult {
            decomposition: cp,
            achieved_error,
            candidates_evaluated: 0,
            subspace_residuals,
            guarantee_bound,
            net_resolution: res,
            theoretical_resolution_met,
            strategy: cfg.strategy,
            exhaustive: true,
            partial: false,
        });
    }

    let subspaces = capped_mode_subspaces(t, r)?;
    let bases: Vec<&DMatrix<S>> = subspaces.iter().map(|s| s.projector.basis()).collect();
    let mut g = t.clone();
    for (j, v) in bases.iter().enumerate() {
        let m = v.tr_mul(&g.unfold(j)?);
        let mut shape = g.shape().to_vec();
        shape[j] = v.ncols();
        g = DenseTensor::fold(&m, j, shape)?;
    }
    let core = Core { g, rank: r };
    let fine: Vec<Grid<S>> = core
        .dims()
        .iter()
        .zip(&rho)
        .map(|(&d, &p)| Grid::new(d, p, res))
        .collect::<Result<_>>()?;

    let strategy = resolve_strategy(cfg, &core, &fine, &rho, res);
    let found = match strategy {
        SearchStrategy::Exhaustive => {
            let nets = materialize(&fine)?;
            let (top, evals, partial) = exhaustive(&core, &nets, cfg.budget, 1);
            let (value, cols) = top.into_iter().next().expect("at least one tuple");
            Found { cols, value, evals, partial }
        }
        SearchStrategy::CoarseToFine => coarse_to_fine(cfg, &core, &fine, &rho, res)?,
        SearchStrategy::MultiStart | SearchStrategy::Auto => multi_start(cfg, &core, &fine, cfg.budget),
    };

    let factors: Vec<DMatrix<S>> = (0..l)
        .map(|j| {
            let y = DMatrix::from_fn(core.dims()[j], r, |i, c| found.cols[c][j][i]);
            bases[j] * y
        })
        .collect();
    let cp = CpDecomposition::new(factors)?;
    let achieved_error = frobenius_distance(t, &cp.expand()?)?;
    Ok(ApproximationResult {
        decomposition: cp,
        achieved_error,
        candidates_evaluated: found.evals,
        subspace_residuals: subspaces.iter().map(|s| s.residual).collect(),
        guarantee_bound,
        net_resolution: res,
        theoretical_resolution_met,
        strategy,
        exhaustive: strategy == SearchStrategy::Exhaustive && !found.partial,
        partial: found.partial,
    })
}

/// log10 of the number of net tuples, from per-mode size estimates.
fn log_tuples<S: Scalar>(grids: &[Grid<S>], r: usize) -> f64 {
    grids.iter().map(|g| g.size_estimate().log10()).sum::<f64>() * r as f64
}

/// Exact tuple count if every net has at most `cap` points.
fn exact_tuples<S: Scalar>(grids: &[Grid<S>], r: usize, cap: u64) -> Option<f64> {
    let mut total = 1.0f64;
    for g in grids {
        let n = g.enumerate(cap).ok()?.len() as f64;
        total *= n.powi(r as i32);
    }
    Some(total)
}

fn resolve_strategy<S: Scalar>(
    cfg: &NetSearchConfig<S>,
    core: &Core<S>,
    fine: &[Grid<S>],
    rho: &[S],
    res: S,
) -> SearchStrategy {
    if cfg.strategy != SearchStrategy::Auto {
        return cfg.strategy;
    }
    let r = core.rank;
    let budget = cfg.budget as f64;
    if log_tuples(fine, r) <= budget.log10() + 1.0 {
        let cap = (budget.powf(1.0 / r as f64).ceil() as u64).max(1);
        if exact_tuples(fine, r, cap).is_some_and(|n| n <= budget) {
            return SearchStrategy::Exhaustive;
        }
    }
    if coarse_resolution(cfg, core, rho, res).is_some() {
        SearchStrategy::CoarseToFine
    } else {
        SearchStrategy::MultiStart
    }
}

/// Finest resolution `res·2^k` below every ρ_j whose net tuples fit the
/// coarse budget.
fn coarse_resolution<S: Scalar>(cfg: &NetSearchConfig<S>, core: &Core<S>, rho: &[S], res: S) -> Option<S> {
    let r = core.rank;
    let rho_min = rho.iter().fold(S::max_value().expect("bounded"), |a, &b| a.min(b));
    let cap = ((cfg.coarse_budget as f64).powf(1.0 / r as f64).ceil() as u64).max(1);
    let mut ladder = Vec::new();
    let mut c = res * S::of(2.0);
    while c < rho_min {
        ladder.push(c);
        c *= S::of(2.0);
    }
    let mut chosen = None;
    for &c in ladder.iter().rev() {
        let grids: Vec<Grid<S>> = core
            .dims()
            .iter()
            .zip(rho)
            .map(|(&d, &p)| Grid::new(d, p, c))
            .collect::<Result<_>>()
            .ok()?;
        match exact_tuples(&grids, r, cap) {
            Some(n) if n <= cfg.coarse_budget as f64 => chosen = Some(c),
            _ => break,
        }
    }
    chosen
}

/// Enumerate each net; tuple budgets are enforced by the scan, not here.
fn materialize<S: Scalar>(grids: &[Grid<S>]) -> Result<Vec<Vec<Vec<S>>>> {
    let cap = super::DEFAULT_NET_BUDGET;
    grids
        .iter()
        .map(|g| Ok(g.enumerate(cap)?.iter().map(|k| g.values(k)).collect()))
        .collect()
}

/// Evaluate tuples in lexicographic order (position `r·ℓ + j` holds the net
/// index for column `r` of mode `j`, most significant first), up to
/// `budget` of them. Returns the `keep` best as `(value, columns)` sorted by
/// value then tuple index.
fn exhaustive<S: Scalar>(core: &Core<S>, nets: &[Vec<Vec<S>>], budget: u64, keep: usize) -> (Vec<(S, Cols<S>)>, u64, bool) {
    let l = core.order();
    let r = core.rank;
    let radix: Vec<u128> = (0..r * l).map(|p| nets[p % l].len() as u128).collect();
    let total: u128 = radix.iter().product();
    let count = total.min(budget as u128) as u64;
    let partial = total > budget as u128;

    let decode = |mut idx: u64, cols: &mut Cols<S>| {
        for p in (0..r * l).rev() {
            let m = radix[p] as u64;
            let k = (idx % m) as usize;
            idx /= m;
            cols[p / l][p % l].clone_from(&nets[p % l][k]);
        }
    };
    let empty: Cols<S> = (0..r).map(|_| (0..l).map(|_| Vec::new()).collect()).collect();
    let chunks = count.div_ceil(CHUNK);
    let mut best: Vec<(S, u64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut cols = empty.clone();
            let mut buf = Scratch::default();
            let mut top: Vec<(S, u64)> = Vec::with_capacity(keep + 1);
            for idx in c * CHUNK..((c + 1) * CHUNK).min(count) {
                decode(idx, &mut cols);
                let v = core.objective(&cols, &mut buf);
                if top.len() < keep || cmp(&v, &top[top.len() - 1].0) == Ordering::Less {
                    let pos = top.partition_point(|(w, _)| cmp(w, &v) != Ordering::Greater);
                    top.insert(pos, (v, idx));
                    top.truncate(keep);
                }
            }
            top
        })
        .flatten()
        .collect();
    best.sort_by(|a, b| cmp(&a.0, &b.0).then(a.1.cmp(&b.1)));
    best.truncate(keep);
    let out = best
        .into_iter()
        .map(|(v, idx)| {
            let mut cols = empty.clone();
            decode(idx, &mut cols);
            (v, cols)
        })
        .collect();
    (out, count, partial)
}

fn coarse_to_fine<S: Scalar>(
    cfg: &NetSearchConfig<S>,
    core: &Core<S>,
    fine: &[Grid<S>],
    rho: &[S],
    res: S,
) -> Result<Found<S>> {
    let coarse_res = coarse_resolution(cfg, core, rho, res).unwrap_or_else(|| {
        // Coarsest non-trivial net; scanned as a lexicographic prefix if it
        // overruns the coarse budget.
        let rho_min = rho.iter().fold(S::max_value().expect("bounded"), |a, &b| a.min(b));
        let mut c = res;
        while c * S::of(2.0) < rho_min {
            c *= S::of(2.0);
        }
        c
    });
    let grids: Vec<Grid<S>> = core
        .dims()
        .iter()
        .zip(rho)
        .map(|(&d, &p)| Grid::new(d, p, coarse_res))
        .collect::<Result<_>>()?;
    let coarse_budget = cfg.coarse_budget.min(cfg.budget);
    let nets = materialize(&grids)?;
    let (top, mut evals, mut partial) = exhaustive(core, &nets, coarse_budget, cfg.refine_top.max(1));
    partial &= coarse_budget == cfg.budget;

    let starts: Vec<Cols<S>> = top
        .into_iter()
        .map(|(_, cols)| snap(&cols, fine))
        .collect();
    let remaining = cfg.budget - evals;
    let refined = descend_all(cfg, core, fine, starts, remaining);
    evals += refined.evals;
    partial |= refined.partial;
    Ok(Found { evals, partial, ..refined })
}

fn multi_start<S: Scalar>(cfg: &NetSearchConfig<S>, core: &Core<S>, fine: &[Grid<S>], budget: u64) -> Found<S> {
    let n = cfg.starts.max(1);
    let starts = (0..n)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(s as u64);
            (0..core.rank)
                .map(|_| {
                    fine.iter()
                        .map(|g| {
                            let d = g.dim;
                            let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                            let radius = g.radius.f64() * rng.random::<f64>().powf(1.0 / d as f64);
                            let t: Vec<S> = dir.iter().map(|x| S::of(x / norm * radius)).collect();
                            g.values(&g.nearest(&t))
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    descend_all(cfg, core, fine, starts, budget)
}

fn snap<S: Scalar>(cols: &Cols<S>, grids: &[Grid<S>]) -> Cols<S> {
    cols.iter()
        .map(|col| col.iter().zip(grids).map(|(v, g)| g.values(&g.nearest(v))).collect())
        .collect()
}

/// Descend from every start with an equal share of the budget and keep the
/// best result (ties go to the earliest start).
fn descend_all<S: Scalar>(
    cfg: &NetSearchConfig<S>,
    core: &Core<S>,
    grids: &[Grid<S>],
    starts: Vec<Cols<S>>,
    budget: u64,
) -> Found<S> {
    let share = budget / starts.len().max(1) as u64;
    let runs: Vec<Found<S>> = starts
        .into_par_iter()
        .map(|s| descend(cfg, core, grids, s, share))
        .collect();
    let evals = runs.iter().map(|f| f.evals).sum();
    let partial = runs.iter().any(|f| f.partial);
    let best = runs
        .into_iter()
        .reduce(|a, b| if cmp(&b.value, &a.value) == Ordering::Less { b } else { a })
        .expect("at least one start");
    Found { evals, partial, ..best }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Net-constrained block coordinate descent over single columns.
///
/// With every other column fixed, the objective in column `y = cols[r][j]`
/// is `α‖y‖² − 2⟨y, g⟩ + const` with `α = Π_{j'≠j} ‖y_r^{j'}‖²` and
/// `g = G ×_{j'≠j} y_r^{j'} − Σ_{s≠r} (Π_{j'≠j} ⟨y_r^{j'}, y_s^{j'}⟩) y_s^j`,
/// so the best net point is the one nearest `g/α`.
fn descend<S: Scalar>(cfg: &NetSearchConfig<S>, core: &Core<S>, grids: &[Grid<S>], mut cols: Cols<S>, budget: u64) -> Found<S> {
    let l = core.order();
    let r = core.rank;
    let mut buf = Scratch::default();
    if budget == 0 {
        let value = core.objective(&cols, &mut buf);
        return Found { cols, value, evals: 0, partial: true };
    }
    let mut value = core.objective(&cols, &mut buf);
    let mut evals = 1u64;
    let mut partial = false;
    'sweeps: for _ in 0..cfg.max_sweeps {
        let mut moved = false;
        for c in 0..r {
            for j in 0..l {
                let mut alpha = S::one();
                for jj in (0..l).filter(|&jj| jj != j) {
                    alpha *= dot(&cols[c][jj], &cols[c][jj]);
                }
                if alpha == S::zero() {
                    continue;
                }
                let vs: Vec<&[S]> = (0..l).map(|jj| cols[c][jj].as_slice()).collect();
                let mut g = core.g.contract_all_but(j, &vs).expect("core shapes agree");
                for s in (0..r).filter(|&s| s != c) {
                    let mut w = S::one();
                    for jj in (0..l).filter(|&jj| jj != j) {
                        w *= dot(&cols[c][jj], &cols[s][jj]);
                    }
                    for (gi, &ys) in g.iter_mut().zip(&cols[s][j]) {
                        *gi -= w * ys;
                    }
                }
                let target: Vec<S> = g.iter().map(|&x| x / alpha).collect();
                let next = grids[j].values(&grids[j].nearest(&target));
                if next == cols[c][j] {
                    continue;
                }
                if evals >= budget {
                    partial = true;
                    break 'sweeps;
                }
                let prev = std::mem::replace(&mut cols[c][j], next);
                let v = core.objective(&cols, &mut buf);
                evals += 1;
                if v < value {
                    value = v;
                    moved = true;
                } else {
                    cols[c][j] = prev;
                }
            }
        }
        if cfg.least_squares_last_mode {
            if evals >= budget {
                partial = true;
                break;
            }
            if let Some(next) = least_squares_last(core, grids, &cols) {
                let v = core.objective(&next, &mut buf);
                evals += 1;
                if v < value {
                    value = v;
                    cols = next;
                    moved = true;
                }
            }
        }
        if !moved {
            break;
        }
    }
    Found { cols, value, evals, partial }
}

/// Least-squares last-mode factor for fixed other modes, each column clamped
/// to its ρ and snapped to the net.
fn least_squares_last<S: Scalar>(core: &Core<S>, grids: &[Grid<S>], cols: &Cols<S>) -> Option<Cols<S>> {
    let l = core.order();
    let r = core.rank;
    let mode_mat = |j: usize| DMatrix::from_fn(core.dims()[j], r, |i, c| cols[c][j][i]);
    let mut k = mode_mat(0);
    for j in 1..l - 1 {
        k = khatri_rao(&k, &mode_mat(j)).ok()?;
    }
    let gl = core.g.unfold(l - 1).ok()?;
    let y = (k.transpose()).pseudo_inverse(S::of(1e-12)).ok()?;
    let sol = gl * y;
    let grid = &grids[l - 1];
    let mut out = cols.clone();
    for (c, col) in out.iter_mut().enumerate() {
        let mut v: DVector<S> = sol.column(c).into_owned();
        let n = v.norm();
        if n > grid.radius {
            v *= grid.radius / n;
        }
        col[l - 1] = grid.values(&grid.nearest(v.as_slice()));
    }
    Some(out)
}
