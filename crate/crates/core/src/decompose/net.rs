//! Grid ε-nets over Euclidean balls.
//!
//! A net of resolution `res` over the radius-`ρ` ball in `R^d` is the set of
//! points `h·k`, `k ∈ Z^d`, with spacing `h = 2·res/√d` and norm at most
//! `ρ + res`. The covering radius of the cubic lattice is `h√d/2 = res`, so
//! every point of the ball is within `res` of a lattice point, and that
//! lattice point lies in the `(ρ + res)`-ball. When `res ≥ ρ` the net is
//! `{0}`.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::Scalar;

/// Default cap on the number of materialized net points.
pub const DEFAULT_NET_BUDGET: u64 = 10_000_000;

/// Implicit lattice net; points are addressed by integer coordinates.
#[derive(Debug, Clone)]
pub(crate) struct Grid<S: Scalar> {
    pub dim: usize,
    pub spacing: S,
    pub kmax: i64,
    pub limit_sq: S,
    pub radius: S,
}

impl<S: Scalar> Grid<S> {
    pub fn new(dim: usize, radius: S, resolution: S) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("net dimension must be positive"));
        }
        if !(radius > S::zero()) || !(resolution > S::zero()) {
            return Err(invalid("net radius and resolution must be positive"));
        }
        let spacing = S::of(2.0) * resolution / S::of(dim as f64).sqrt();
        let limit = radius + resolution;
        let kmax = if resolution >= radius {
            0
        } else {
            let k = (limit / spacing).floor().f64();
            if k > (i64::MAX / 4) as f64 {
                return Err(invalid("net resolution too fine for integer lattice coordinates"));
            }
            k as i64
        };
        Ok(Self { dim, spacing, kmax, limit_sq: limit * limit, radius })
    }

    pub fn coord(&self, k: i64) -> S {
        S::of(k as f64) * self.spacing
    }

    pub fn values(&self, k: &[i64]) -> Vec<S> {
        k.iter().map(|&x| self.coord(x)).collect()
    }

    pub fn contains(&self, k: &[i64]) -> bool {
        if k.iter().any(|x| x.abs() > self.kmax) {
            return false;
        }
        let n2 = k.iter().fold(S::zero(), |acc, &x| {
            let v = self.coord(x);
            acc + v * v
        });
        n2 <= self.limit_sq
    }

    /// Net point closest to `t`: exact when the rounded lattice point is in
    /// the net, otherwise the best point in the unit neighbourhood of the
    /// radial projection of `t`.
    pub fn nearest(&self, t: &[S]) -> Vec<i64> {
        if self.kmax == 0 {
            return vec![0; self.dim];
        }
        let round = |x: S| -> (i64, bool) {
            let r = (x / self.spacing).round().f64();
            if r > self.kmax as f64 {
                (self.kmax, true)
            } else if r < -(self.kmax as f64) {
                (-self.kmax, true)
            } else {
                (r as i64, false)
            }
        };
        let mut clamped = false;
        let k: Vec<i64> = t
            .iter()
            .map(|&x| {
                let (v, c) = round(x);
                clamped |= c;
                v
            })
            .collect();
        if !clamped && self.contains(&k) {
            return k;
        }
        let norm = t.iter().fold(S::zero(), |a, &x| a + x * x).sqrt();
        let shrink = if norm > self.radius { self.radius / norm } else { S::one() };
        let base: Vec<i64> = t.iter().map(|&x| round(x * shrink).0).collect();
        let mut best: Option<(S, Vec<i64>)> = None;
        let mut off = vec![-1i64; self.dim];
        loop {
            let cand: Vec<i64> = base.iter().zip(&off).map(|(b, o)| b + o).collect();
            if self.contains(&cand) {
                let d2 = cand.iter().zip(t).fold(S::zero(), |a, (&k, &x)| {
                    let d = self.coord(k) - x;
                    a + d * d
                });
                if best.as_ref().is_none_or(|(bd, _)| d2 < *bd) {
                    best = Some((d2, cand));
                }
            }
            let mut i = self.dim;
            loop {
                if i == 0 {
                    return best.map(|b| b.1).unwrap_or_else(|| vec![0; self.dim]);
                }
                i -= 1;
                if off[i] < 1 {
                    off[i] += 1;
                    break;
                }
                off[i] = -1;
            }
        }
    }

    /// Rough point count from the ball-to-cell volume ratio.
    pub fn size_estimate(&self) -> f64 {
        if self.kmax == 0 {
            return 1.0;
        }
        let d = self.dim as f64;
        let r = self.limit_sq.f64().sqrt() / self.spacing.f64();
        let box_count = (2.0 * self.kmax as f64 + 1.0).powf(d);
        (unit_ball_volume(self.dim) * r.powf(d)).min(box_count).max(1.0)
    }

    /// All net points in lexicographic order of their lattice coordinates.
    pub fn enumerate(&self, budget: u64) -> Result<Vec<Vec<i64>>> {
        let mut out = Vec::new();
        let mut k = vec![0i64; self.dim];
        self.fill(0, S::zero(), &mut k, &mut out, budget)?;
        Ok(out)
    }

    fn fill(&self, pos: usize, acc: S, k: &mut Vec<i64>, out: &mut Vec<Vec<i64>>, budget: u64) -> Result<()> {
        if pos == self.dim {
            if out.len() as u64 >= budget {
                return Err(Error::Budget { what: "ε-net construction", estimate: self.size_estimate(), budget });
            }
            out.push(k.clone());
            return Ok(());
        }
        for x in -self.kmax..=self.kmax {
            let v = self.coord(x);
            let a = acc + v * v;
            if a <= self.limit_sq {
                k[pos] = x;
                self.fill(pos + 1, a, k, out, budget)?;
            }
        }
        Ok(())
    }
}

fn unit_ball_volume(d: usize) -> f64 {
    // V_0 = 1, V_1 = 2, V_d = 2π/d · V_{d-2}
    let mut v = [1.0, 2.0];
    for k in 2..=d {
        v[k % 2] *= 2.0 * std::f64::consts::PI / k as f64;
    }
    v[d % 2]
}

/// A materialized ε-net.
#[derive(Debug, Clone, Serialize)]
pub struct EpsNet<S: Scalar> {
    pub dim: usize,
    pub radius: S,
    pub resolution: S,
    pub spacing: S,
    #[serde(with = "crate::serde_rows::vecs")]
    pub points: Vec<DVector<S>>,
}

impl<S: Scalar> EpsNet<S> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn build_eps_net<S: Scalar>(dim: usize, radius: S, resolution: S) -> Result<EpsNet<S>> {
    build_eps_net_with_budget(dim, radius, resolution, DEFAULT_NET_BUDGET)
}

/// Materialize the grid net; refuses with a size estimate when it would hold
/// more than `budget` points.
pub fn build_eps_net_with_budget<S: Scalar>(
    dim: usize,
    radius: S,
    resolution: S,
    budget: u64,
) -> Result<EpsNet<S>> {
    let g = Grid::new(dim, radius, resolution)?;
    if g.size_estimate() > 4.0 * budget as f64 {
        return Err(Error::Budget { what: "ε-net construction", estimate: g.size_estimate(), budget });
    }
    let points = g
        .enumerate(budget)?
        .iter()
        .map(|k| DVector::from_vec(g.values(k)))
        .collect();
    Ok(EpsNet { dim, radius, resolution, spacing: g.spacing, points })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_grid() {
        let n = build_eps_net(1, 1.0, 0.5).unwrap();
        let pts: Vec<f64> = n.points.iter().map(|p| p[0]).collect();
        assert_eq!(pts, vec![-1.0, 0.0, 1.0]);
        let n = build_eps_net(1, 1.0, 0.25).unwrap();
        let pts: Vec<f64> = n.points.iter().map(|p| p[0]).collect();
        assert_eq!(pts, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn coarse_resolution_gives_origin() {
        for res in [1.0, 2.0, 5.0] {
            let n = build_eps_net(3, 1.0, res).unwrap();
            assert_eq!(n.len(), 1);
            assert_eq!(n.points[0].norm(), 0.0);
        }
    }

    #[test]
    fn refuses_oversized_nets() {
        assert!(matches!(
            build_eps_net_with_budget(4, 1.0, 1e-3, 1000),
            Err(Error::Budget { .. })
        ));
        assert!(build_eps_net(2, 0.0, 0.1).is_err());
        assert!(build_eps_net(0, 1.0, 0.1).is_err());
    }

    #[test]
    fn nearest_is_exact_inside() {
        let g = Grid::<f64>::new(2, 1.0, 0.1).unwrap();
        let pts = g.enumerate(u64::MAX).unwrap();
        for t in [[0.3, -0.2], [0.95, 0.31], [2.0, 0.0], [-3.0, 4.0]] {
            let k = g.nearest(&t);
            assert!(g.contains(&k));
            let d = |k: &[i64]| {
                let v = g.values(k);
                (v[0] - t[0]).powi(2) + (v[1] - t[1]).powi(2)
            };
            let best = pts.iter().map(|p| d(p)).fold(f64::INFINITY, f64::min);
            assert!(d(&k) <= best + 1e-12, "{t:?}");
        }
    }
}
