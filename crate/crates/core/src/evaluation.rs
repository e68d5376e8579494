//! System-level evaluation: rollout travel-time accuracy with rank
//! correlation across assignments, per-cell traces, the flow-only ablation,
//! and the simulator-vs-surrogate speed benchmark.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;

use crate::dataset::{Dataset, Run};
use crate::demand::{assignment_matrix, Assignment, ChoiceSets, Demand};
use crate::error::{Error, Result};
use crate::model::{aggregate_tt, Model};
use crate::network::{CellMap, RoadNetwork};
use crate::simulator::{simulate, SimConfig};
use crate::table;
use crate::training::{evaluate_split, SplitKind};

/// Average ranks (ties share the mean rank), 1-based.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = mean_rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson correlation of the rank transforms.
/// A constant sequence has no ordering information and yields 0.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::validation("spearman needs paired sequences"));
    }
    if xs.len() < 2 {
        return Err(Error::validation("spearman needs at least 2 points"));
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mean) * (b - mean);
        var_x += (a - mean) * (a - mean);
        var_y += (b - mean) * (b - mean);
    }
    if var_x == 0.0 || var_y == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (var_x * var_y).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TTRow {
    pub sample_id: u64,
    pub true_tt_s: f64,
    pub pred_tt_s: f64,
}

impl TTRow {
    pub fn delta_min(&self) -> f64 {
        (self.pred_tt_s - self.true_tt_s).abs() / 60.0
    }

    pub fn rel_delta(&self) -> f64 {
        (self.pred_tt_s - self.true_tt_s).abs() / self.true_tt_s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TTReport {
    pub rows: Vec<TTRow>,
    pub mean_delta_min: f64,
    pub median_delta_min: f64,
    /// Σ over assignments, for readers that aggregate the other way
    pub sum_delta_min: f64,
    pub mean_rel_delta: f64,
    pub median_rel_delta: f64,
    pub spearman: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

impl TTReport {
    pub fn from_rows(rows: Vec<TTRow>) -> Result<TTReport> {
        if rows.is_empty() {
            return Err(Error::validation("travel-time report needs at least one assignment"));
        }
        if let Some(bad) = rows.iter().find(|r| !(r.true_tt_s > 0.0)) {
            return Err(Error::validation(format!(
                "assignment {} has non-positive true TT {}",
                bad.sample_id, bad.true_tt_s
            )));
        }
        let deltas: Vec<f64> = rows.iter().map(TTRow::delta_min).collect();
        let rels: Vec<f64> = rows.iter().map(TTRow::rel_delta).collect();
        let n = rows.len() as f64;
        let spearman = if rows.len() >= 2 {
            let trues: Vec<f64> = rows.iter().map(|r| r.true_tt_s).collect();
            let preds: Vec<f64> = rows.iter().map(|r| r.pred_tt_s).collect();
            spearman(&trues, &preds)?
        } else {
            0.0
        };
        Ok(TTReport {
            mean_delta_min: deltas.iter().sum::<f64>() / n,
            sum_delta_min: deltas.iter().sum::<f64>(),
            median_delta_min: median(deltas),
            mean_rel_delta: rels.iter().sum::<f64>() / n,
            median_rel_delta: median(rels),
            spearman,
            rows,
        })
    }
}

/// Rollout + aggregation against the simulator label for every run.
pub fn evaluate_tt(model: &Model, runs: &[Run], a_tilde: &Array2<f64>) -> Result<TTReport> {
    if runs.is_empty() {
        return Err(Error::validation("empty test set"));
    }
    let rows: Vec<Result<TTRow>> = runs
        .par_iter()
        .map(|run| {
            let q_hat = model.rollout(&run.a, a_tilde)?;
            let pred_tt_s = aggregate_tt(&q_hat, model.cfg.delta_t)?;
            Ok(TTRow { sample_id: run.sim_id, true_tt_s: run.tt_s, pred_tt_s })
        })
        .collect();
    TTReport::from_rows(rows.into_iter().collect::<Result<Vec<_>>>()?)
}

pub const TT_REPORT_HEADER: &str = "sample_id,true_tt_min,pred_tt_min,delta_min,rel_delta";

/// Per-assignment rows, then labeled aggregate rows (`mean`, `median`,
/// `sum`, `spearman`) in the same five columns.
pub fn write_tt_report(report: &TTReport, path: &Path) -> Result<()> {
    let mut out = String::from(TT_REPORT_HEADER);
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.sample_id,
            r.true_tt_s / 60.0,
            r.pred_tt_s / 60.0,
            r.delta_min(),
            r.rel_delta()
        ));
    }
    out.push_str(&format!(
        "mean,,,{},{}\n",
        report.mean_delta_min, report.mean_rel_delta
    ));
    out.push_str(&format!(
        "median,,,{},{}\n",
        report.median_delta_min, report.median_rel_delta
    ));
    out.push_str(&format!("sum,,,{},\n", report.sum_delta_min));
    out.push_str(&format!("spearman,,,,{}\n", report.spearman));
    table::write_string(path, &out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeTrace {
    pub cell: usize,
    pub true_q: Vec<f64>,
    pub pred_q: Vec<f64>,
}

/// Paired true/predicted occupancy series for one cell of one run.
pub fn node_trace(
    model: &Model,
    run: &Run,
    cell: usize,
    a_tilde: &Array2<f64>,
) -> Result<NodeTrace> {
    if cell >= model.cfg.s {
        return Err(Error::validation(format!(
            "cell {cell} out of range for S = {}",
            model.cfg.s
        )));
    }
    let q_hat = model.rollout(&run.a, a_tilde)?;
    Ok(NodeTrace {
        cell,
        true_q: run.q.row(cell).iter().map(|&v| f64::from(v)).collect(),
        pred_q: q_hat.row(cell).to_vec(),
    })
}

pub const TRACE_HEADER: &str = "t,true_q,pred_q";

pub fn write_trace(trace: &NodeTrace, path: &Path) -> Result<()> {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for (t, (tq, pq)) in trace.true_q.iter().zip(&trace.pred_q).enumerate() {
        out.push_str(&format!("{t},{tq},{pq}\n"));
    }
    table::write_string(path, &out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub full_tt: TTReport,
    pub flow_tt: TTReport,
    pub full_mae: f64,
    pub full_rmse: f64,
    pub flow_mae: f64,
    pub flow_rmse: f64,
}

/// Side-by-side full vs flow-only evaluation on the test split. The
/// flow-only rollout cannot see A, so its TT variance must be exactly 0.
pub fn ablation_compare(
    full: &Model,
    flow_only: &Model,
    dataset: &Dataset,
    a_tilde: &Array2<f64>,
) -> Result<AblationReport> {
    if full.cfg != flow_only.cfg {
        return Err(Error::validation("ablation models have different configs"));
    }
    if full.flow_only || !flow_only.flow_only {
        return Err(Error::validation(
            "ablation expects a full model and a flow-only model, in that order",
        ));
    }
    let test_runs: Vec<Run> = dataset
        .split
        .test
        .iter()
        .map(|&id| {
            dataset
                .run(id)
                .cloned()
                .ok_or_else(|| Error::validation(format!("test split references missing run {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let full_tt = evaluate_tt(full, &test_runs, a_tilde)?;
    let flow_tt = evaluate_tt(flow_only, &test_runs, a_tilde)?;
    let preds: Vec<f64> = flow_tt.rows.iter().map(|r| r.pred_tt_s).collect();
    let mean = preds.iter().sum::<f64>() / preds.len() as f64;
    let variance = preds.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>();
    assert_eq!(variance, 0.0, "flow-only rollout TT varied across assignments");
    let (full_mae, full_rmse) = evaluate_split(full, dataset, SplitKind::Test, a_tilde)?;
    let (flow_mae, flow_rmse) = evaluate_split(flow_only, dataset, SplitKind::Test, a_tilde)?;
    Ok(AblationReport { full_tt, flow_tt, full_mae, full_rmse, flow_mae, flow_rmse })
}

pub const ABLATION_HEADER: &str =
    "model,mae,rmse,mean_delta_min,median_rel_delta,spearman,tt_variance";

pub fn write_ablation(report: &AblationReport, path: &Path) -> Result<()> {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    out.push_str(&format!(
        "full,{},{},{},{},{},\n",
        report.full_mae,
        report.full_rmse,
        report.full_tt.mean_delta_min,
        report.full_tt.median_rel_delta,
        report.full_tt.spearman
    ));
    out.push_str(&format!(
        "flow_only,{},{},{},{},{},0\n",
        report.flow_mae,
        report.flow_rmse,
        report.flow_tt.mean_delta_min,
        report.flow_tt.median_rel_delta,
        report.flow_tt.spearman
    ));
    table::write_string(path, &out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedRow {
    pub sample_id: u64,
    pub sim_seconds: f64,
    pub surrogate_seconds: f64,
}

impl SpeedRow {
    pub fn ratio(&self) -> f64 {
        self.sim_seconds / self.surrogate_seconds
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedReport {
    pub rows: Vec<SpeedRow>,
    pub median_ratio: f64,
}

/// Wall-clock per simulator run vs per surrogate rollout on identical
/// scenarios, measured serially for fairness.
#[allow(clippy::too_many_arguments)]
pub fn speed_bench(
    model: &Model,
    net: &RoadNetwork,
    demand: &Demand,
    sets: &ChoiceSets,
    cmap: &CellMap,
    assignments: &[(u64, Assignment)],
    sim_cfg: &SimConfig,
    a_tilde: &Array2<f64>,
) -> Result<SpeedReport> {
    if assignments.len() < 5 {
        return Err(Error::validation(format!(
            "speed benchmark needs at least 5 assignments, got {}",
            assignments.len()
        )));
    }
    sim_cfg.validate()?;
    let t_intervals = sim_cfg.intervals();
    let mut rows = Vec::with_capacity(assignments.len());
    for (sample_id, assignment) in assignments {
        let a = assignment_matrix(net, demand, sets, assignment, cmap, t_intervals, sim_cfg.delta_t)?;
        let t0 = Instant::now();
        let _sim = simulate(net, demand, sets, assignment, cmap, sim_cfg)?;
        let sim_seconds = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let q_hat = model.rollout(&a.a, a_tilde)?;
        let _tt = aggregate_tt(&q_hat, model.cfg.delta_t)?;
        let surrogate_seconds = t1.elapsed().as_secs_f64();
        rows.push(SpeedRow { sample_id: *sample_id, sim_seconds, surrogate_seconds });
    }
    let median_ratio = median(rows.iter().map(SpeedRow::ratio).collect());
    Ok(SpeedReport { rows, median_ratio })
}

pub const SPEED_HEADER: &str = "sample_id,sim_seconds,surrogate_seconds,ratio";

pub fn write_speed(report: &SpeedReport, path: &Path) -> Result<()> {
    let mut out = String::from(SPEED_HEADER);
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.sample_id, r.sim_seconds, r.surrogate_seconds, r.ratio()
        ));
    }
    out.push_str(&format!("median,,,{}\n", report.median_ratio));
    table::write_string(path, &out)
}

/// Teacher-forced MAE of the persistence baseline Q̂_t = Q_{t−1} on a split.
pub fn persistence_mae(dataset: &Dataset, kind: SplitKind) -> Result<f64> {
    let ids = match kind {
        SplitKind::Train => &dataset.split.train,
        SplitKind::Val => &dataset.split.val,
        SplitKind::Test => &dataset.split.test,
    };
    let samples = dataset.samples_for(ids)?;
    if samples.is_empty() {
        return Err(Error::validation(format!("{kind:?} split has no samples")));
    }
    let (mut abs, mut n) = (0.0, 0u64);
    for sample in &samples {
        let last = sample.q_window.nrows() - 1;
        for (s, &target) in sample.target.iter().enumerate() {
            abs += (sample.q_window[[last, s]] - target).abs();
            n += 1;
        }
    }
    Ok(abs / n as f64)
}
