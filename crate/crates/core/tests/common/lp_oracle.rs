//! LP by exhaustive enumeration of basic solutions, and minimal-medium
//! support sets by enumeration of exchange subsets.

use std::collections::{BTreeMap, BTreeSet};

use genotrait::gem::MetabolicModel;

/// Stand-in for infinite flux bounds; callers check it is never binding.
pub const BIG: f64 = 1e4;
const EPS: f64 = 1e-9;

/// Row-reduces `[a | b]`; returns independent rows or `None` if inconsistent.
fn independent_rows(a: &[Vec<f64>], b: &[f64], n: usize) -> Option<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(r, &bi)| r.iter().copied().chain([bi]).collect()).collect();
    let mut rank = 0;
    for col in 0..n {
        let Some(p) = (rank..m.len()).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())) else { break };
        if m[p][col].abs() < 1e-12 {
            continue;
        }
        m.swap(rank, p);
        let piv = m[rank][col];
        m[rank].iter_mut().for_each(|v| *v /= piv);
        for i in 0..m.len() {
            if i != rank {
                let f = m[i][col];
                if f != 0.0 {
                    let pr = m[rank].clone();
                    m[i].iter_mut().zip(&pr).for_each(|(v, p)| *v -= f * p);
                }
            }
        }
        rank += 1;
    }
    if m[rank..].iter().any(|r| r[n].abs() > 1e-9) {
        return None;
    }
    m.truncate(rank);
    let rhs = m.iter().map(|r| r[n]).collect();
    let rows = m.into_iter().map(|mut r| {
        r.truncate(n);
        r
    });
    Some((rows.collect(), rhs))
}

/// Solves a square system by Gaussian elimination; `None` if singular.
fn solve_square(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let k = b.len();
    for col in 0..k {
        let p = (col..k).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[p][col].abs() < 1e-10 {
            return None;
        }
        a.swap(col, p);
        b.swap(col, p);
        for i in col + 1..k {
            let f = a[i][col] / a[col][col];
            for j in col..k {
                a[i][j] -= f * a[col][j];
            }
            b[i] -= f * b[col];
        }
    }
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        let s: f64 = (i + 1..k).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    Some(x)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// max `c·x` s.t. `A x = b`, finite `lo ≤ x ≤ hi`, over all basic solutions.
pub fn vertex_lp_max(a: &[Vec<f64>], b: &[f64], bounds: &[(f64, f64)], c: &[f64]) -> Option<(f64, Vec<f64>)> {
    let n = c.len();
    assert!(bounds.iter().all(|(l, h)| l.is_finite() && h.is_finite()));
    let (rows, rhs) = independent_rows(a, b, n)?;
    let r = rows.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for nonbasic in combinations(n, n - r) {
        let basic: Vec<usize> = (0..n).filter(|j| !nonbasic.contains(j)).collect();
        for mask in 0..(1u32 << nonbasic.len()) {
            let mut x = vec![0.0; n];
            for (k, &j) in nonbasic.iter().enumerate() {
                x[j] = if mask >> k & 1 == 1 { bounds[j].1 } else { bounds[j].0 };
            }
            let ab: Vec<Vec<f64>> = rows.iter().map(|row| basic.iter().map(|&j| row[j]).collect()).collect();
            let bb: Vec<f64> = rows
                .iter()
                .zip(&rhs)
                .map(|(row, &bi)| bi - nonbasic.iter().map(|&j| row[j] * x[j]).sum::<f64>())
                .collect();
            let Some(xb) = solve_square(ab, bb) else { continue };
            for (&j, &v) in basic.iter().zip(&xb) {
                x[j] = v;
            }
            if x.iter().zip(bounds).any(|(&v, &(l, h))| v < l - 1e-9 || v > h + 1e-9) {
                continue;
            }
            let obj: f64 = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
            if best.as_ref().is_none_or(|(bo, _)| obj > *bo + 1e-12) {
                best = Some((obj, x));
            }
        }
    }
    best
}

/// Dense `(S, bounds)` of a model with infinite bounds replaced by `±BIG`.
pub fn dense(model: &MetabolicModel) -> (Vec<Vec<f64>>, Vec<(f64, f64)>) {
    let s = model
        .metabolites
        .iter()
        .map(|m| model.reactions.iter().map(|r| r.stoichiometry.get(m).copied().unwrap_or(0.0)).collect())
        .collect();
    let bounds = model.reactions.iter().map(|r| (r.lower_bound.max(-BIG), r.upper_bound.min(BIG))).collect();
    (s, bounds)
}

fn biomass_index(model: &MetabolicModel) -> usize {
    model.reactions.iter().position(|r| r.id == model.biomass_reaction).unwrap()
}

/// Maximum biomass flux by vertex enumeration (0 when infeasible).
pub fn oracle_max_growth(model: &MetabolicModel) -> f64 {
    let (s, bounds) = dense(model);
    let mut c = vec![0.0; model.reactions.len()];
    let bio = biomass_index(model);
    c[bio] = 1.0;
    match vertex_lp_max(&s, &vec![0.0; s.len()], &bounds, &c) {
        Some((v, x)) => {
            assert!(x.iter().all(|f| f.abs() < BIG - 1.0), "stand-in infinite bound became binding");
            v.max(0.0)
        }
        None => 0.0,
    }
}

fn uptake_exchanges(model: &MetabolicModel) -> Vec<usize> {
    model
        .reactions
        .iter()
        .enumerate()
        .filter(|(_, r)| model.exchange_reactions.contains(&r.id) && r.lower_bound < 0.0)
        .map(|(j, r)| {
            assert!(r.upper_bound <= 0.0, "oracle needs uptake-only exchanges, `{}` is reversible", r.id);
            j
        })
        .collect()
}

/// Least total uptake with only `allowed` exchanges open and biomass ≥ `theta`.
pub fn oracle_min_uptake(model: &MetabolicModel, allowed: &[usize], theta: f64) -> Option<f64> {
    let (s, mut bounds) = dense(model);
    for j in uptake_exchanges(model) {
        if !allowed.contains(&j) {
            bounds[j].0 = 0.0;
        }
    }
    let bio = biomass_index(model);
    bounds[bio].0 = bounds[bio].0.max(theta);
    if bounds[bio].0 > bounds[bio].1 {
        return None;
    }
    let mut c = vec![0.0; model.reactions.len()];
    for &j in allowed {
        c[j] = 1.0; // maximize Σ v_e = −(total uptake)
    }
    vertex_lp_max(&s, &vec![0.0; s.len()], &bounds, &c).map(|(v, _)| -v)
}

/// Smallest exchange subset (then lexicographically first) reaching the
/// global least total uptake at `fraction · μ_max`. Empty when no growth.
pub fn oracle_medium_support(model: &MetabolicModel, fraction: f64) -> BTreeSet<String> {
    let mu = oracle_max_growth(model);
    if mu <= 1e-9 {
        return BTreeSet::new();
    }
    let theta = fraction * mu;
    let ex = uptake_exchanges(model);
    let global = oracle_min_uptake(model, &ex, theta).expect("feasible at the full medium");
    let mut best: Option<Vec<usize>> = None;
    for k in 0..=ex.len() {
        for subset in combinations(ex.len(), k) {
            let allowed: Vec<usize> = subset.iter().map(|&i| ex[i]).collect();
            if let Some(cost) = oracle_min_uptake(model, &allowed, theta) {
                if (cost - global).abs() <= EPS * global.max(1.0) {
                    best = Some(allowed);
                    break;
                }
            }
        }
        if best.is_some() {
            break;
        }
    }
    best.unwrap().into_iter().map(|j| model.reactions[j].id.clone()).collect()
}

/// Support of an uptake map.
pub fn support(uptakes: &BTreeMap<String, f64>) -> BTreeSet<String> {
    uptakes.keys().cloned().collect()
}
