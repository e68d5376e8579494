//! Pipeline stages. Each one loads its inputs from the experiment
//! directory, checks the manifest (upstream hashes, overwrite guard), does
//! its work, and records itself.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde_json::Value;

use assign_surrogate::dataset::{
    load_dataset, save_dataset, split_runs, Dataset, DatasetSpec, Run, SplitSpec,
};
use assign_surrogate::demand::{
    assignment_matrix, build_choice_sets, gen_demand, load_choice_sets, load_demand,
    save_choice_sets, save_demand, Assignment, ChoiceSets, Demand,
};
use assign_surrogate::evaluation::{
    ablation_compare, evaluate_tt, node_trace, speed_bench, write_ablation, write_speed,
    write_trace, write_tt_report,
};
use assign_surrogate::model::{Model, ModelConfig};
use assign_surrogate::network::{
    build_cell_graph, build_cell_map, load_cell_map, load_network, save_cell_map, save_network,
    CellGraph, CellMap, RoadNetwork,
};
use assign_surrogate::sampler::{grid_points, load_sample_manifest, plan_samples, sample_assignment, save_sample_manifest};
use assign_surrogate::simulator::{load_summary, save_summary, simulate};
use assign_surrogate::table;
use assign_surrogate::training::{train, TrainConfig};
use assign_surrogate::{seed, Error, Result};

use crate::config::AppConfig;
use crate::manifest::Manifest;

pub const CELLS_FILE: &str = "cells.csv";
pub const TRIPS_FILE: &str = "trips.csv";
pub const CHOICE_SETS_FILE: &str = "choice_sets.csv";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const RUNS_DIR: &str = "runs";
pub const DATASET_DIR: &str = "dataset";
pub const MODEL_DIR: &str = "model";
pub const MODEL_FLOW_DIR: &str = "model_flow";

pub struct StageCtx<'a> {
    pub cfg: &'a AppConfig,
    pub snapshot: Value,
    pub hash: String,
    pub out: &'a Path,
    pub root_seed: u64,
    pub force: bool,
}

impl StageCtx<'_> {
    fn manifest(&self) -> Result<Manifest> {
        Manifest::load_or_new(self.out, &self.snapshot, self.root_seed, &self.hash)
    }

    fn begin(&self, stage: &str, upstream: &[(&str, &str)]) -> Result<Manifest> {
        let manifest = self.manifest()?;
        manifest.require_upstream(self.out, upstream, &self.hash, self.force)?;
        manifest.guard_overwrite(self.out, stage, self.force)?;
        Ok(manifest)
    }

    fn finish(&self, manifest: &mut Manifest, stage: &str, outputs: &[&str]) -> Result<()> {
        manifest.tool_version = env!("CARGO_PKG_VERSION").to_string();
        manifest.root_seed = self.root_seed;
        manifest.config_hash = self.hash.clone();
        manifest.config = self.snapshot.clone();
        manifest.record(stage, &self.hash, outputs.iter().map(|s| s.to_string()).collect());
        manifest.save(self.out)
    }
}

fn load_net_cmap(out: &Path) -> Result<(RoadNetwork, CellMap)> {
    let net = load_network(out)?;
    let cmap = load_cell_map(&net, &out.join(CELLS_FILE))?;
    Ok((net, cmap))
}

fn load_trip_inputs(out: &Path, k: usize) -> Result<(RoadNetwork, CellMap, Demand, ChoiceSets)> {
    let (net, cmap) = load_net_cmap(out)?;
    let demand = load_demand(&out.join(TRIPS_FILE))?;
    let sets = load_choice_sets(&net, &demand, k, &out.join(CHOICE_SETS_FILE))?;
    Ok((net, cmap, demand, sets))
}

fn cell_graph(net: &RoadNetwork, cmap: &CellMap) -> CellGraph {
    build_cell_graph(net, cmap)
}

fn test_runs(ds: &Dataset) -> Result<Vec<Run>> {
    ds.split
        .test
        .iter()
        .map(|&id| {
            ds.run(id)
                .cloned()
                .ok_or_else(|| Error::validation(format!("test split references missing run {id}")))
        })
        .collect()
}

pub fn net_gen(ctx: &StageCtx) -> Result<()> {
    let mut manifest = ctx.begin("net", &[])?;
    let n = &ctx.cfg.net;
    let net = assign_surrogate::network::synth_grid_network(
        n.rows, n.cols, n.edge_length, n.speed, n.capacity,
    )?;
    let cmap = build_cell_map(&net, ctx.cfg.hex.size)?;
    save_network(&net, ctx.out)?;
    save_cell_map(&net, &cmap, &ctx.out.join(CELLS_FILE))?;
    ctx.finish(&mut manifest, "net", &["nodes.csv", "edges.csv", CELLS_FILE])?;
    println!(
        "net: {} nodes, {} edges, {} cells",
        net.nodes().len(),
        net.edges().len(),
        cmap.cell_count()
    );
    Ok(())
}

pub fn demand_gen(ctx: &StageCtx) -> Result<()> {
    let mut manifest = ctx.begin("demand", &[("net", "net gen")])?;
    let (net, _) = load_net_cmap(ctx.out)?;
    let demand = gen_demand(
        &net,
        ctx.cfg.demand.agents,
        ctx.cfg.demand.window,
        seed::derive(ctx.root_seed, "demand", 0),
    )?;
    save_demand(&demand, &ctx.out.join(TRIPS_FILE))?;
    ctx.finish(&mut manifest, "demand", &[TRIPS_FILE])?;
    println!("demand: {} trips over {} s", demand.len(), ctx.cfg.demand.window);
    Ok(())
}

pub fn paths_build(ctx: &StageCtx) -> Result<()> {
    let mut manifest = ctx.begin("paths", &[("demand", "demand gen")])?;
    let (net, _) = load_net_cmap(ctx.out)?;
    let demand = load_demand(&ctx.out.join(TRIPS_FILE))?;
    let sets = build_choice_sets(&net, &demand, ctx.cfg.paths.k)?;
    save_choice_sets(&sets, &ctx.out.join(CHOICE_SETS_FILE))?;
    ctx.finish(&mut manifest, "paths", &[CHOICE_SETS_FILE])?;
    let routes: usize = sets.sets().iter().map(|s| s.paths().len()).sum();
    println!("paths: k = {} per agent, {} routes total", sets.k(), routes);
    Ok(())
}

pub fn sample_grid(ctx: &StageCtx) -> Result<()> {
    let mut manifest = ctx.begin("sample", &[("paths", "paths build")])?;
    let points = grid_points(ctx.cfg.paths.k, ctx.cfg.sampler.g)?;
    let plans = plan_samples(
        &points,
        ctx.cfg.sampler.sims,
        seed::derive(ctx.root_seed, "sample", 0),
    )?;
    save_sample_manifest(&plans, ctx.cfg.paths.k, &ctx.out.join(SAMPLES_FILE))?;
    ctx.finish(&mut manifest, "sample", &[SAMPLES_FILE])?;
    println!("sample: {} plans over {} grid points", plans.len(), points.len());
    Ok(())
}

pub fn simulate_batch(ctx: &StageCtx, workers: Option<usize>) -> Result<()> {
    let mut manifest = ctx.begin(
        "simulate",
        &[("net", "net gen"), ("demand", "demand gen"), ("paths", "paths build"), ("sample", "sample grid")],
    )?;
    let (net, cmap, demand, sets) = load_trip_inputs(ctx.out, ctx.cfg.paths.k)?;
    let plans = load_sample_manifest(ctx.cfg.paths.k, ctx.cfg.sampler.g, &ctx.out.join(SAMPLES_FILE))?;
    let sim_cfg = ctx.cfg.sim;
    sim_cfg.validate()?;

    let run_one = |plan: &assign_surrogate::sampler::SamplePlan| -> Result<(u64, Array2<u32>, Array2<u32>, f64)> {
        let assignment = sample_assignment(&sets, &plan.point, plan.seed)?;
        let res = simulate(&net, &demand, &sets, &assignment, &cmap, &sim_cfg)?;
        let am = assignment_matrix(
            &net, &demand, &sets, &assignment, &cmap, sim_cfg.intervals(), sim_cfg.delta_t,
        )?;
        Ok((plan.sample_id, am.a, res.q.q, res.tt_s))
    };
    let results: Vec<(u64, Array2<u32>, Array2<u32>, f64)> = match workers {
        Some(n) => {
            if n == 0 {
                return Err(Error::validation("--workers must be >= 1"));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::runtime(format!("worker pool: {e}")))?
                .install(|| plans.par_iter().map(run_one).collect::<Result<Vec<_>>>())?
        }
        None => plans.par_iter().map(run_one).collect::<Result<Vec<_>>>()?,
    };

    let runs_dir = ctx.out.join(RUNS_DIR);
    let mut tts = Vec::with_capacity(results.len());
    for (sim_id, a, q, tt_s) in &results {
        let rdir = runs_dir.join(format!("run_{sim_id}"));
        table::write_matrix_u32(&rdir.join("A.csv"), a)?;
        table::write_matrix_u32(&rdir.join("Q.csv"), q)?;
        tts.push((*sim_id, *tt_s));
    }
    save_summary(&tts, &runs_dir.join("tt.csv"))?;
    ctx.finish(&mut manifest, "simulate", &[RUNS_DIR])?;
    println!("simulate: {} runs, {} intervals each", results.len(), sim_cfg.intervals());
    Ok(())
}

pub fn dataset_build(ctx: &StageCtx) -> Result<()> {
    let mut manifest = ctx.begin("dataset", &[("net", "net gen"), ("simulate", "simulate batch")])?;
    let (_, cmap) = load_net_cmap(ctx.out)?;
    let runs_dir = ctx.out.join(RUNS_DIR);
    let tts = load_summary(&runs_dir.join("tt.csv"))?;
    let runs: Vec<Run> = tts
        .iter()
        .map(|&(sim_id, tt_s)| {
            let rdir = runs_dir.join(format!("run_{sim_id}"));
            let a = table::read_matrix_u32(&rdir.join("A.csv"))?;
            let q = table::read_matrix_u32(&rdir.join("Q.csv"))?;
            if q.nrows() != cmap.cell_count() {
                return Err(Error::validation(format!(
                    "run {sim_id}: Q has {} rows but the cell map has {} cells",
                    q.nrows(),
                    cmap.cell_count()
                )));
            }
            Ok(Run { sim_id, a, q, tt_s })
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = DatasetSpec {
        s: cmap.cell_count(),
        delta_t: ctx.cfg.sim.delta_t,
        w_q: ctx.cfg.model.w_q,
        w_a: ctx.cfg.model.w_a,
    };
    spec.validate()?;
    let ids: Vec<u64> = runs.iter().map(|r| r.sim_id).collect();
    let split = split_runs(&ids, &SplitSpec::default(), seed::derive(ctx.root_seed, "split", 0))?;
    let ds = Dataset { spec, split, runs };
    save_dataset(&ds, &ctx.out.join(DATASET_DIR))?;
    ctx.finish(&mut manifest, "dataset", &[DATASET_DIR])?;
    println!(
        "dataset: {} runs -> {} train / {} val / {} test",
        ds.runs.len(),
        ds.split.train.len(),
        ds.split.val.len(),
        ds.split.test.len()
    );
    Ok(())
}

fn resolved_model_cfg(cfg: &AppConfig, spec: &DatasetSpec) -> Result<ModelConfig> {
    let mut m = cfg.model.clone();
    if m.s == 0 {
        m.s = spec.s;
    } else if m.s != spec.s {
        return Err(Error::validation(format!(
            "config model.s = {} but the dataset has {} cells",
            m.s, spec.s
        )));
    }
    if m.delta_t == 0.0 {
        m.delta_t = spec.delta_t;
    } else if (m.delta_t - spec.delta_t).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "config model.delta_t = {} but the dataset was aggregated at {}",
            m.delta_t, spec.delta_t
        )));
    }
    Ok(m)
}

fn resolved_train_cfg(cfg: &AppConfig, root_seed: u64, flow_only: bool) -> TrainConfig {
    let mut t = cfg.train.clone();
    if t.seed == 0 {
        t.seed = seed::derive(root_seed, "train", 0);
    }
    t.flow_only = flow_only;
    t
}

pub fn train_model(ctx: &StageCtx, flow_only: bool) -> Result<()> {
    let flow_only = flow_only || ctx.cfg.train.flow_only;
    let (stage, dir_name) = if flow_only {
        ("train_flow", MODEL_FLOW_DIR)
    } else {
        ("train", MODEL_DIR)
    };
    let mut manifest = ctx.begin(stage, &[("net", "net gen"), ("dataset", "dataset build")])?;
    let ds = load_dataset(&ctx.out.join(DATASET_DIR))?;
    let (net, cmap) = load_net_cmap(ctx.out)?;
    let graph = cell_graph(&net, &cmap);
    let model_cfg = resolved_model_cfg(ctx.cfg, &ds.spec)?;
    let train_cfg = resolved_train_cfg(ctx.cfg, ctx.root_seed, flow_only);
    let out_dir = ctx.out.join(dir_name);
    let (_, report) = train(&ds, graph.adjacency(), &model_cfg, &train_cfg, &out_dir)?;
    ctx.finish(&mut manifest, stage, &[dir_name])?;
    let best = &report.epochs[report.best_epoch - 1];
    println!(
        "{stage}: {} epochs, best epoch {} with val MAE {:.6}",
        report.epochs.len(),
        report.best_epoch,
        best.val_mae
    );
    Ok(())
}

pub fn eval_tt(ctx: &StageCtx) -> Result<()> {
    let upstream = [("net", "net gen"), ("dataset", "dataset build"), ("train", "train")];
    let mut manifest = ctx.begin("eval_tt", &upstream)?;
    let ds = load_dataset(&ctx.out.join(DATASET_DIR))?;
    let (net, cmap) = load_net_cmap(ctx.out)?;
    let graph = cell_graph(&net, &cmap);
    let model = Model::load(&ctx.out.join(MODEL_DIR))?;
    let runs = test_runs(&ds)?;
    let report = evaluate_tt(&model, &runs, graph.adjacency())?;
    write_tt_report(&report, &ctx.out.join("tt_report.csv"))?;
    ctx.finish(&mut manifest, "eval_tt", &["tt_report.csv"])?;
    println!(
        "eval tt: {} assignments, median rel dTT {:.4}, spearman {:.4}",
        report.rows.len(),
        report.median_rel_delta,
        report.spearman
    );
    Ok(())
}

pub fn eval_trace(ctx: &StageCtx, cell: usize, run_id: Option<u64>) -> Result<()> {
    let upstream = [("net", "net gen"), ("dataset", "dataset build"), ("train", "train")];
    let stage = format!("eval_trace_{cell}");
    let mut manifest = ctx.begin(&stage, &upstream)?;
    let ds = load_dataset(&ctx.out.join(DATASET_DIR))?;
    let (net, cmap) = load_net_cmap(ctx.out)?;
    let graph = cell_graph(&net, &cmap);
    let model = Model::load(&ctx.out.join(MODEL_DIR))?;
    let run_id = match run_id {
        Some(id) => id,
        None => *ds.split.test.first().ok_or_else(|| Error::validation("empty test split"))?,
    };
    let run = ds
        .run(run_id)
        .ok_or_else(|| Error::validation(format!("no run with id {run_id}")))?;
    let trace = node_trace(&model, run, cell, graph.adjacency())?;
    let file = format!("trace_{cell}.csv");
    write_trace(&trace, &ctx.out.join(&file))?;
    ctx.finish(&mut manifest, &stage, &[file.as_str()])?;
    println!("eval trace: cell {cell}, run {run_id}, {} intervals", trace.true_q.len());
    Ok(())
}

pub fn eval_ablation(ctx: &StageCtx) -> Result<()> {
    let upstream = [
        ("net", "net gen"),
        ("dataset", "dataset build"),
        ("train", "train"),
        ("train_flow", "train --flow-only"),
    ];
    let mut manifest = ctx.begin("eval_ablation", &upstream)?;
    let ds = load_dataset(&ctx.out.join(DATASET_DIR))?;
    let (net, cmap) = load_net_cmap(ctx.out)?;
    let graph = cell_graph(&net, &cmap);
    let full = Model::load(&ctx.out.join(MODEL_DIR))?;
    let flow = Model::load(&ctx.out.join(MODEL_FLOW_DIR))?.flow_only_variant();
    let report = ablation_compare(&full, &flow, &ds, graph.adjacency())?;
    write_ablation(&report, &ctx.out.join("ablation.csv"))?;
    ctx.finish(&mut manifest, "eval_ablation", &["ablation.csv"])?;
    println!(
        "eval ablation: full MAE {:.6} vs flow-only MAE {:.6}; flow-only TT is assignment-invariant",
        report.full_mae, report.flow_mae
    );
    Ok(())
}

pub fn bench_speed(ctx: &StageCtx, samples: usize) -> Result<()> {
    let upstream = [
        ("net", "net gen"),
        ("demand", "demand gen"),
        ("paths", "paths build"),
        ("sample", "sample grid"),
        ("train", "train"),
    ];
    let mut manifest = ctx.begin("bench_speed", &upstream)?;
    let (net, cmap, demand, sets) = load_trip_inputs(ctx.out, ctx.cfg.paths.k)?;
    let graph = cell_graph(&net, &cmap);
    let model = Model::load(&ctx.out.join(MODEL_DIR))?;
    let plans = load_sample_manifest(ctx.cfg.paths.k, ctx.cfg.sampler.g, &ctx.out.join(SAMPLES_FILE))?;
    let n = samples.min(plans.len());
    let assignments: Vec<(u64, Assignment)> = plans[..n]
        .iter()
        .map(|p| Ok((p.sample_id, sample_assignment(&sets, &p.point, p.seed)?)))
        .collect::<Result<Vec<_>>>()?;
    let report = speed_bench(
        &model, &net, &demand, &sets, &cmap, &assignments, &ctx.cfg.sim,
        graph.adjacency(),
    )?;
    write_speed(&report, &ctx.out.join("speed.csv"))?;
    ctx.finish(&mut manifest, "bench_speed", &["speed.csv"])?;
    println!(
        "bench speed: {} scenarios, median simulator/surrogate time ratio {:.2}",
        report.rows.len(),
        report.median_ratio
    );
    Ok(())
}
