//! Supervised windows out of simulation runs: (A-window, Q-window) → next
//! flow column, split at simulation granularity, persisted as a directory of
//! per-run matrices under one manifest.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{seed, table};

/// Window geometry shared by every sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub s: usize,
    pub delta_t: f64,
    pub w_q: usize,
    pub w_a: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.s < 1 {
            return Err(Error::validation("dataset needs S >= 1 cells"));
        }
        if self.w_q < 1 || self.w_a < 1 {
            return Err(Error::validation("window lengths W_Q and W_A must be >= 1"));
        }
        if !(self.delta_t > 0.0) {
            return Err(Error::validation("delta_t must be > 0"));
        }
        Ok(())
    }
}

/// One simulation's matrices: A and Q share (S, T_i); TT is the scalar label
/// for rollout evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub sim_id: u64,
    pub a: Array2<u32>,
    pub q: Array2<u32>,
    pub tt_s: f64,
}

impl Run {
    pub fn t_len(&self) -> usize {
        self.q.ncols()
    }
}

/// One supervised window: predict column `t` of Q from the preceding
/// assignment and flow windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sim_id: u64,
    pub t: usize,
    /// W_A × S, rows ordered oldest → newest
    pub a_window: Array2<f64>,
    /// W_Q × S, rows ordered oldest → newest
    pub q_window: Array2<f64>,
    /// length-S target Q_t
    pub target: Vec<f64>,
}

/// Columns `[t−w, t)` of `m`, transposed to w × S with zero rows where the
/// index would be negative.
pub fn window_before(m: &Array2<u32>, t: usize, w: usize) -> Array2<f64> {
    let s = m.nrows();
    let mut out = Array2::<f64>::zeros((w, s));
    for k in 0..w {
        // row k holds column t − w + k
        let col = t as isize - w as isize + k as isize;
        if col >= 0 {
            for i in 0..s {
                out[[k, i]] = m[[i, col as usize]] as f64;
            }
        }
    }
    out
}

/// One sample per (run, t) for t ∈ [1, T_i).
pub fn build_samples(runs: &[Run], spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut samples = Vec::new();
    for run in runs {
        if run.a.nrows() != spec.s || run.q.nrows() != spec.s || run.a.ncols() != run.q.ncols() {
            return Err(Error::validation(format!(
                "run {}: A is {}×{}, Q is {}×{}, expected matching {}×T",
                run.sim_id,
                run.a.nrows(),
                run.a.ncols(),
                run.q.nrows(),
                run.q.ncols(),
                spec.s
            )));
        }
        for t in 1..run.t_len() {
            samples.push(Sample {
                sim_id: run.sim_id,
                t,
                a_window: window_before(&run.a, t, spec.w_a),
                q_window: window_before(&run.q, t, spec.w_q),
                target: (0..spec.s).map(|i| run.q[[i, t]] as f64).collect(),
            });
        }
    }
    Ok(samples)
}

/// Train/val/test fractions over simulation ids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.70, val: 0.10, test: 0.20 }
    }
}

/// Simulation ids per split, in shuffled draw order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

/// Seeded shuffle of the run ids, then a contiguous cut at the 70/10/20
/// marks (floor for train and val, remainder to test).
pub fn split_runs(run_ids: &[u64], spec: &SplitSpec, split_seed: u64) -> Result<Split> {
    if (spec.train + spec.val + spec.test - 1.0).abs() > 1e-9 {
        return Err(Error::validation("split fractions must sum to 1"));
    }
    if spec.train <= 0.0 || spec.val <= 0.0 || spec.test <= 0.0 {
        return Err(Error::validation("every split fraction must be positive"));
    }
    let n = run_ids.len();
    if n < 10 {
        return Err(Error::validation(format!("need at least 10 runs to split, have {n}")));
    }
    let mut ids = run_ids.to_vec();
    let mut rng = seed::rng(split_seed);
    ids.shuffle(&mut rng);
    let n_train = (spec.train * n as f64).floor() as usize;
    let n_val = (spec.val * n as f64).floor() as usize;
    Ok(Split {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    })
}

/// Everything needed to rebuild samples: geometry, split, and the runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub split: Split,
    pub runs: Vec<Run>,
}

impl Dataset {
    pub fn run(&self, sim_id: u64) -> Option<&Run> {
        self.runs.iter().find(|r| r.sim_id == sim_id)
    }

    fn runs_of(&self, ids: &[u64]) -> Result<Vec<Run>> {
        ids.iter()
            .map(|&id| {
                self.run(id)
                    .cloned()
                    .ok_or_else(|| Error::validation(format!("split references missing run {id}")))
            })
            .collect()
    }

    pub fn samples_for(&self, ids: &[u64]) -> Result<Vec<Sample>> {
        build_samples(&self.runs_of(ids)?, &self.spec)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: DatasetSpec,
    split: Split,
    runs: Vec<RunEntry>,
}

#[derive(Serialize, Deserialize)]
struct RunEntry {
    sim_id: u64,
    t_len: usize,
    tt_s: f64,
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let manifest = Manifest {
        spec: ds.spec,
        split: ds.split.clone(),
        runs: ds
            .runs
            .iter()
            .map(|r| RunEntry { sim_id: r.sim_id, t_len: r.t_len(), tt_s: r.tt_s })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::runtime(format!("manifest serialization: {e}")))?;
    table::write_string(&dir.join("manifest.json"), &text)?;
    for r in &ds.runs {
        let rdir = run_dir(dir, r.sim_id);
        table::write_matrix_u32(&rdir.join("A.csv"), &r.a)?;
        table::write_matrix_u32(&rdir.join("Q.csv"), &r.q)?;
        crate::simulator::save_summary(&[(r.sim_id, r.tt_s)], &rdir.join("summary.csv"))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let text = table::read_to_string(&mpath)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::parse(&mpath, 0, format!("bad manifest: {e}")))?;
    manifest.spec.validate()?;
    let mut runs = Vec::with_capacity(manifest.runs.len());
    for entry in &manifest.runs {
        let rdir = run_dir(dir, entry.sim_id);
        let a = table::read_matrix_u32(&rdir.join("A.csv"))?;
        let q = table::read_matrix_u32(&rdir.join("Q.csv"))?;
        for (name, m) in [("A.csv", &a), ("Q.csv", &q)] {
            if m.nrows() != manifest.spec.s || m.ncols() != entry.t_len {
                return Err(Error::parse(
                    &rdir.join(name),
                    0,
                    format!(
                        "run {}: expected {}×{}, found {}×{}",
                        entry.sim_id,
                        manifest.spec.s,
                        entry.t_len,
                        m.nrows(),
                        m.ncols()
                    ),
                ));
            }
        }
        let summary = crate::simulator::load_summary(&rdir.join("summary.csv"))?;
        let tt_s = summary
            .iter()
            .find(|(id, _)| *id == entry.sim_id)
            .map(|&(_, tt)| tt)
            .ok_or_else(|| {
                Error::parse(&rdir.join("summary.csv"), 0, format!("run {} missing", entry.sim_id))
            })?;
        runs.push(Run { sim_id: entry.sim_id, a, q, tt_s });
    }
    Ok(Dataset { spec: manifest.spec, split: manifest.split, runs })
}

fn run_dir(dir: &Path, sim_id: u64) -> PathBuf {
    dir.join("runs").join(sim_id.to_string())
}
