//! Assignment sampling over the K^Q space: a simplex grid of path-rank
//! proportions, categorical draws against it, and a uniform baseline.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::demand::{Assignment, ChoiceSets};
use crate::error::{Error, Result};
use crate::{seed, table};

/// A probability vector over path ranks with components that are exact
/// multiples of 1/g, stored as integer numerators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimplexPoint {
    numerators: Vec<u32>,
    g: u32,
}

impl SimplexPoint {
    pub fn new(numerators: Vec<u32>, g: u32) -> Result<Self> {
        if g < 1 {
            return Err(Error::validation("simplex resolution g must be >= 1"));
        }
        let sum: u32 = numerators.iter().sum();
        if sum != g {
            return Err(Error::validation(format!(
                "simplex numerators sum to {sum}, expected g = {g}"
            )));
        }
        Ok(SimplexPoint { numerators, g })
    }

    pub fn k(&self) -> usize {
        self.numerators.len()
    }

    pub fn g(&self) -> u32 {
        self.g
    }

    pub fn numerators(&self) -> &[u32] {
        &self.numerators
    }

    /// Probability of rank `i`.
    pub fn p(&self, i: usize) -> f64 {
        self.numerators[i] as f64 / self.g as f64
    }

    pub fn to_probabilities(&self) -> Vec<f64> {
        (0..self.k()).map(|i| self.p(i)).collect()
    }
}

/// All compositions of g into K nonnegative parts in lexicographic order,
/// mapped to probability vectors n/g. Count is C(g+K-1, K-1).
pub fn grid_points(k: usize, g: u32) -> Result<Vec<SimplexPoint>> {
    if k < 1 {
        return Err(Error::validation("K must be >= 1"));
    }
    if g < 1 {
        return Err(Error::validation("grid resolution g must be >= 1"));
    }
    let mut points = Vec::new();
    let mut current = vec![0u32; k];
    compositions(g, 0, &mut current, &mut points);
    Ok(points
        .into_iter()
        .map(|numerators| SimplexPoint { numerators, g })
        .collect())
}

fn compositions(remaining: u32, slot: usize, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if slot == current.len() - 1 {
        current[slot] = remaining;
        out.push(current.clone());
        return;
    }
    for take in 0..=remaining {
        current[slot] = take;
        compositions(remaining - take, slot + 1, current, out);
    }
    current[slot] = 0;
}

/// Number of grid points: C(g+K-1, K-1), evaluated in u128 to stay exact for
/// every K, g the pipeline uses.
pub fn grid_point_count(k: usize, g: u32) -> u128 {
    let n = g as u128 + k as u128 - 1;
    let r = k as u128 - 1;
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// Draw each agent's rank from `p` restricted to its valid ranks and
/// renormalized.
pub fn sample_assignment(sets: &ChoiceSets, p: &SimplexPoint, draw_seed: u64) -> Result<Assignment> {
    if p.k() != sets.k() {
        return Err(Error::validation(format!(
            "simplex point has K = {}, choice sets have K = {}",
            p.k(),
            sets.k()
        )));
    }
    let mut rng = seed::rng(draw_seed);
    let mut path_index = Vec::with_capacity(sets.len());
    for (agent, cs) in sets.sets().iter().enumerate() {
        let n_valid = cs.paths().len();
        let mass: f64 = (0..n_valid).map(|i| p.p(i)).sum();
        if mass <= 0.0 {
            return Err(Error::validation(format!(
                "agent {agent}: no probability mass on its {n_valid} valid ranks"
            )));
        }
        let u: f64 = rng.gen_range(0.0..mass);
        let mut cum = 0.0;
        let mut pick = n_valid - 1;
        for i in 0..n_valid {
            cum += p.p(i);
            if u < cum {
                pick = i;
                break;
            }
        }
        path_index.push(pick);
    }
    Assignment::new(path_index, sets)
}

/// Uniform draw over each agent's valid ranks.
pub fn random_assignment(sets: &ChoiceSets, draw_seed: u64) -> Result<Assignment> {
    let mut rng = seed::rng(draw_seed);
    let path_index = sets
        .sets()
        .iter()
        .map(|cs| rng.gen_range(0..cs.paths().len()))
        .collect();
    Assignment::new(path_index, sets)
}

/// One planned simulation run: which grid point it uses and its draw seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub sample_id: u64,
    pub grid_index: usize,
    pub point: SimplexPoint,
    pub seed: u64,
}

/// Plan `n_samples` runs by cycling through the grid points in order; seeds
/// derive from the root so each sample's draw is independent.
pub fn plan_samples(points: &[SimplexPoint], n_samples: usize, root_seed: u64) -> Result<Vec<SamplePlan>> {
    if points.is_empty() {
        return Err(Error::validation("no grid points to sample from"));
    }
    Ok((0..n_samples)
        .map(|i| {
            let grid_index = i % points.len();
            SamplePlan {
                sample_id: i as u64,
                grid_index,
                point: points[grid_index].clone(),
                seed: seed::derive(root_seed, "sample", i as u64),
            }
        })
        .collect())
}

// --- file format ---

fn manifest_header(k: usize) -> String {
    let mut h = String::from("sample_id,grid_index");
    for i in 0..k {
        let _ = write!(h, ",p_{i}");
    }
    h.push_str(",seed");
    h
}

pub fn save_sample_manifest(plans: &[SamplePlan], k: usize, path: &Path) -> Result<()> {
    let mut out = manifest_header(k);
    out.push('\n');
    for plan in plans {
        let _ = write!(out, "{},{}", plan.sample_id, plan.grid_index);
        for i in 0..k {
            let _ = write!(out, ",{}", plan.point.p(i));
        }
        let _ = writeln!(out, ",{}", plan.seed);
    }
    table::write_string(path, &out)
}

pub fn load_sample_manifest(k: usize, g: u32, path: &Path) -> Result<Vec<SamplePlan>> {
    let rows = table::read_rows(path, &manifest_header(k), k + 3)?;
    let mut plans = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let lineno = i + 2;
        let mut numerators = Vec::with_capacity(k);
        for j in 0..k {
            let p: f64 = table::parse_field(path, lineno, &row[2 + j], "p")?;
            let num = (p * g as f64).round();
            if (num / g as f64 - p).abs() > 1e-9 {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("probability {p} is not a multiple of 1/{g}"),
                ));
            }
            numerators.push(num as u32);
        }
        plans.push(SamplePlan {
            sample_id: table::parse_field(path, lineno, &row[0], "sample_id")?,
            grid_index: table::parse_field(path, lineno, &row[1], "grid_index")?,
            point: SimplexPoint::new(numerators, g)
                .map_err(|e| Error::parse(path, lineno, e.to_string()))?,
            seed: table::parse_field(path, lineno, &row[2 + k], "seed")?,
        });
    }
    Ok(plans)
}
