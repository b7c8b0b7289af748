//! Stage drivers behind the CLI. Each stage reads the artifacts of earlier
//! stages from the run directory and writes its own; nothing is replaced
//! unless `force` is set.
//!
//! ```text
//! data/dataset.vtsp
//! partition/plan.toml, partition/part-<i>.vtsp
//! teacher/teacher.vtsp, teacher/curve.toml
//! shrink/teacher-<i>.vtsp, shrink/scores-<i>.toml, shrink/plan-<i>.toml, shrink/small-<i>.vtsp
//! distill/student-<i>.vtsp, distill/curve-<i>.toml
//! ensemble/bundle.vtsp, ensemble/curve.toml
//! simulate/plan-{ensemble,teacher}.toml, simulate/report-{ensemble,teacher}.toml
//! report/comparison.toml, report/summary.toml
//! ```

use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig};
use crate::data::{synthesize, Dataset};
use crate::decompose::{importance, partition_dataset, shrink, slice_head, ImportanceScores, PartitionPlan, ShrinkPlan};
use crate::distill::train_subtask;
use crate::ensemble::{train_ensemble, AggregatorFA, Ensemble};
use crate::error::{Error, Result};
use crate::persist::{
    ingest_cifar_binary, ingest_image_dir, load_dataset, load_ensemble, load_model, read_bytes, read_toml,
    save_dataset, save_ensemble, save_model, write_toml,
};
use crate::rng::{derive_seed, Stage};
use crate::sim::{
    aggregation_flops, compare_plans, simulate_inference, Comparison, DeploymentPlan, DeviceProfile, EvalSet,
    ModelCost, NetworkModel, Placement, SimReport,
};
use crate::train::{accuracy, train_supervised, CurvePoint, TrainOutcome};
use crate::vit::ViTModel;

/// Paths of every artifact under the run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout { root: root.to_path_buf() }
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn dataset(&self) -> PathBuf {
        self.p("data/dataset.vtsp")
    }

    pub fn partition_plan(&self) -> PathBuf {
        self.p("partition/plan.toml")
    }

    pub fn partition_data(&self, i: usize) -> PathBuf {
        self.p(&format!("partition/part-{i}.vtsp"))
    }

    pub fn teacher(&self) -> PathBuf {
        self.p("teacher/teacher.vtsp")
    }

    pub fn teacher_curve(&self) -> PathBuf {
        self.p("teacher/curve.toml")
    }

    pub fn partition_teacher(&self, i: usize) -> PathBuf {
        self.p(&format!("shrink/teacher-{i}.vtsp"))
    }

    pub fn scores(&self, i: usize) -> PathBuf {
        self.p(&format!("shrink/scores-{i}.toml"))
    }

    pub fn shrink_plan(&self, i: usize) -> PathBuf {
        self.p(&format!("shrink/plan-{i}.toml"))
    }

    pub fn small(&self, i: usize) -> PathBuf {
        self.p(&format!("shrink/small-{i}.vtsp"))
    }

    pub fn student(&self, i: usize) -> PathBuf {
        self.p(&format!("distill/student-{i}.vtsp"))
    }

    pub fn student_curve(&self, i: usize) -> PathBuf {
        self.p(&format!("distill/curve-{i}.toml"))
    }

    pub fn bundle(&self) -> PathBuf {
        self.p("ensemble/bundle.vtsp")
    }

    pub fn ensemble_curve(&self) -> PathBuf {
        self.p("ensemble/curve.toml")
    }

    pub fn sim_plan(&self, which: &str) -> PathBuf {
        self.p(&format!("simulate/plan-{which}.toml"))
    }

    pub fn sim_report(&self, which: &str) -> PathBuf {
        self.p(&format!("simulate/report-{which}.toml"))
    }

    pub fn comparison(&self) -> PathBuf {
        self.p("report/comparison.toml")
    }

    pub fn summary(&self) -> PathBuf {
        self.p("report/summary.toml")
    }
}

/// Training record written next to each trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainLog {
    pub steps_run: u64,
    pub best_step: u64,
    pub stopped_early: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_val_accuracy: Option<f64>,
    pub curve: Vec<CurvePoint>,
}

impl<M> From<&TrainOutcome<M>> for TrainLog {
    fn from(o: &TrainOutcome<M>) -> Self {
        TrainLog {
            steps_run: o.steps_run,
            best_step: o.best_step,
            stopped_early: o.stopped_early,
            best_val_loss: o.best_val.as_ref().map(|v| v.loss),
            best_val_accuracy: o.best_val.as_ref().map(|v| v.accuracy),
            curve: o.curve.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub seed: u64,
    pub teacher_test_accuracy: f64,
    /// Each student on its own partition's test split.
    pub student_test_accuracy: Vec<f64>,
    pub ensemble_test_accuracy: f64,
    pub teacher_params: u64,
    pub ensemble_params: u64,
    pub comparison: Comparison,
}

fn ensure_free(paths: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(Error::OutputExists(p.clone())),
        None => Ok(()),
    }
}

fn n_parts(cfg: &RunConfig) -> usize {
    cfg.partition.num_partitions
}

pub fn ingest(cfg: &RunConfig, force: bool) -> Result<Dataset> {
    let lay = Layout::new(&cfg.out_dir);
    ensure_free(&[lay.dataset()], force)?;
    let d = &cfg.data;
    let data = match d.source {
        DataSource::Synthetic => synthesize(&d.synthetic)?,
        DataSource::CifarBinary => {
            let path = d.path.as_ref().expect("validated");
            ingest_cifar_binary(&read_bytes(path)?, d.side, d.channels, d.label_bytes, d.num_classes)?
        }
        DataSource::ImageDir => ingest_image_dir(d.path.as_ref().expect("validated"), d.side, d.channels)?.0,
    };
    info!("ingested {} records of {} classes", data.len(), data.num_classes);
    save_dataset(&lay.dataset(), &data, force)?;
    Ok(data)
}

fn load_partitions(lay: &Layout) -> Result<PartitionPlan> {
    let plan: PartitionPlan = read_toml(&lay.partition_plan())?;
    plan.validate().map_err(|e| Error::format(e.to_string()))?;
    Ok(plan)
}

pub fn partition(cfg: &RunConfig, force: bool) -> Result<PartitionPlan> {
    let lay = Layout::new(&cfg.out_dir);
    let data = load_dataset(&lay.dataset())?;
    let n = n_parts(cfg);
    let mut outs = vec![lay.partition_plan()];
    outs.extend((0..n).map(|i| lay.partition_data(i)));
    ensure_free(&outs, force)?;
    let plan = partition_dataset(data.num_classes, n, derive_seed(cfg.seed, Stage::Partition, 0))?;
    for (i, classes) in plan.classes.iter().enumerate() {
        let part = data.restrict_to_classes(classes);
        info!("partition {i}: {} classes, {} records", classes.len(), part.len());
        save_dataset(&lay.partition_data(i), &part, force)?;
    }
    write_toml(&lay.partition_plan(), &plan, force)?;
    Ok(plan)
}

fn check_geometry(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    let m = &cfg.teacher.model;
    if (m.image_side, m.channels, m.num_classes) != (data.side, data.channels, data.num_classes) {
        return Err(Error::config(format!(
            "teacher.model expects {}x{}x{} images of {} classes, dataset has {}x{}x{} of {}",
            m.image_side, m.image_side, m.channels, m.num_classes, data.side, data.side, data.channels, data.num_classes
        )));
    }
    Ok(())
}

pub fn train_teacher(cfg: &RunConfig, force: bool) -> Result<ViTModel> {
    let lay = Layout::new(&cfg.out_dir);
    let data = load_dataset(&lay.dataset())?;
    check_geometry(cfg, &data)?;
    ensure_free(&[lay.teacher(), lay.teacher_curve()], force)?;
    let s = data.split();
    let model = ViTModel::init(&cfg.teacher.model, derive_seed(cfg.seed, Stage::Teacher, 0))?;
    let out = train_supervised(model, &data, &s.train, &s.val, &cfg.teacher.train, derive_seed(cfg.seed, Stage::Teacher, 1))?;
    info!("teacher: {} steps, best step {}", out.steps_run, out.best_step);
    save_model(&lay.teacher(), &out.model, force)?;
    write_toml(&lay.teacher_curve(), &TrainLog::from(&out), force)?;
    Ok(out.model)
}

pub fn shrink_stage(cfg: &RunConfig, force: bool) -> Result<Vec<ShrinkPlan>> {
    let lay = Layout::new(&cfg.out_dir);
    let plan = load_partitions(&lay)?;
    let teacher = load_model(&lay.teacher())?;
    let mut outs = Vec::new();
    for i in 0..plan.num_partitions {
        outs.extend([lay.partition_teacher(i), lay.scores(i), lay.shrink_plan(i), lay.small(i)]);
    }
    ensure_free(&outs, force)?;
    let mut plans = Vec::new();
    for (i, classes) in plan.classes.iter().enumerate() {
        let part = load_dataset(&lay.partition_data(i))?;
        let s = part.split();
        let mut t = slice_head(&teacher, classes)?;
        if cfg.partition.fine_tune.steps > 0 {
            let seed = derive_seed(cfg.seed, Stage::Shrink, 1000 + i as u64);
            t = train_supervised(t, &part, &s.train, &s.val, &cfg.partition.fine_tune, seed)?.model;
        }
        let eval_set = format!("partition-{i}/test");
        let scores: ImportanceScores = importance(&t, &part, &s.test, cfg.eval_batch_size, &eval_set)?;
        let (small, sp) = shrink(&t, &scores, &cfg.shrink)?;
        info!("partition {i}: small model with {} parameters", small.param_count());
        save_model(&lay.partition_teacher(i), &t, force)?;
        write_toml(&lay.scores(i), &scores, force)?;
        write_toml(&lay.shrink_plan(i), &sp, force)?;
        save_model(&lay.small(i), &small, force)?;
        plans.push(sp);
    }
    Ok(plans)
}

pub fn distill(cfg: &RunConfig, force: bool) -> Result<Vec<ViTModel>> {
    let lay = Layout::new(&cfg.out_dir);
    let plan = load_partitions(&lay)?;
    let mut outs = Vec::new();
    for i in 0..plan.num_partitions {
        outs.extend([lay.student(i), lay.student_curve(i)]);
    }
    ensure_free(&outs, force)?;
    let mut students = Vec::new();
    for i in 0..plan.num_partitions {
        let part = load_dataset(&lay.partition_data(i))?;
        let teacher = load_model(&lay.partition_teacher(i))?;
        let small = load_model(&lay.small(i))?;
        let s = part.split();
        let out = train_subtask(small, &teacher, &part, &s.train, &s.val, &cfg.distill, derive_seed(cfg.seed, Stage::Distill, i as u64))?;
        info!("student {i}: {} steps, best step {}", out.steps_run, out.best_step);
        save_model(&lay.student(i), &out.model, force)?;
        write_toml(&lay.student_curve(i), &TrainLog::from(&out), force)?;
        students.push(out.model);
    }
    Ok(students)
}

pub fn ensemble(cfg: &RunConfig, force: bool) -> Result<Ensemble> {
    let lay = Layout::new(&cfg.out_dir);
    let plan = load_partitions(&lay)?;
    let data = load_dataset(&lay.dataset())?;
    let teacher = load_model(&lay.teacher())?;
    let smalls = (0..plan.num_partitions).map(|i| load_model(&lay.student(i))).collect::<Result<Vec<_>>>()?;
    ensure_free(&[lay.bundle(), lay.ensemble_curve()], force)?;
    let fused = smalls.len() * smalls[0].config.embed_dim;
    let td = teacher.config.embed_dim;
    let spec = &cfg.ensemble;
    let token_dim = if spec.gamma != 0.0 { Some(td) } else { None };
    let fa = AggregatorFA::init(
        fused,
        spec.hidden_dim.unwrap_or(td),
        teacher.config.num_classes,
        token_dim,
        derive_seed(cfg.seed, Stage::Ensemble, 0),
    )?;
    let s = data.split();
    let out = train_ensemble(Ensemble::new(smalls, fa)?, &teacher, &data, &s.train, &s.val, spec, derive_seed(cfg.seed, Stage::Ensemble, 1))?;
    info!("ensemble: {} steps, best step {}", out.steps_run, out.best_step);
    save_ensemble(&lay.bundle(), &out.model, force)?;
    write_toml(&lay.ensemble_curve(), &TrainLog::from(&out), force)?;
    Ok(out.model)
}

fn preset(name: &str) -> Result<DeviceProfile> {
    DeviceProfile::preset(name).ok_or_else(|| Error::config(format!("unknown device preset {name:?}")))
}

fn network(cfg: &RunConfig) -> NetworkModel {
    let s = &cfg.simulate;
    NetworkModel { bandwidth_bytes_per_s: s.bandwidth_bytes_per_s(), latency_s: s.latency_ms * 1e-3, broadcast: s.broadcast }
}

/// Decomposed plan: small model `i` on device `i`.
pub fn ensemble_plan(cfg: &RunConfig, ens: &Ensemble, input_bytes: u64) -> Result<DeploymentPlan> {
    let s = &cfg.simulate;
    let devices = match &s.devices {
        Some(d) => d.clone(),
        None => vec![preset(&s.device)?; ens.smalls.len()],
    };
    if devices.len() != ens.smalls.len() {
        return Err(Error::config(format!("{} devices for {} small models", devices.len(), ens.smalls.len())));
    }
    let placements = devices
        .into_iter()
        .zip(&ens.smalls)
        .enumerate()
        .map(|(i, (device, m))| Placement { device, model: ModelCost::from_config(&format!("small-{i}"), &m.config) })
        .collect();
    Ok(DeploymentPlan {
        name: "ensemble".into(),
        placements,
        central: s.central,
        network: network(cfg),
        input_bytes,
        aggregation_flops: aggregation_flops(ens.fa.fused_dim(), ens.fa.hidden_dim(), ens.fa.num_classes()),
        memory_fraction: s.memory_fraction,
        storage_budget_bytes: s.storage_budget_bytes,
    })
}

/// Monolithic plan: the teacher alone on one device.
pub fn teacher_plan(cfg: &RunConfig, teacher: &ViTModel, input_bytes: u64) -> Result<DeploymentPlan> {
    let s = &cfg.simulate;
    Ok(DeploymentPlan {
        name: "teacher".into(),
        placements: vec![Placement {
            device: preset(&s.teacher_device)?,
            model: ModelCost::from_config("teacher", &teacher.config),
        }],
        central: 0,
        network: network(cfg),
        input_bytes,
        aggregation_flops: 0,
        memory_fraction: s.memory_fraction,
        storage_budget_bytes: s.storage_budget_bytes,
    })
}

pub fn simulate(cfg: &RunConfig, force: bool) -> Result<(SimReport, SimReport)> {
    let lay = Layout::new(&cfg.out_dir);
    let ens = load_ensemble(&lay.bundle())?;
    let teacher = load_model(&lay.teacher())?;
    let data = load_dataset(&lay.dataset())?;
    let outs = ["ensemble", "teacher"].iter().flat_map(|w| [lay.sim_plan(w), lay.sim_report(w)]).collect::<Vec<_>>();
    ensure_free(&outs, force)?;
    let test = data.split().test;
    let input = data.record_pixels() as u64;
    let bs = cfg.eval_batch_size;

    let ep = ensemble_plan(cfg, &ens, input)?;
    let er = simulate_inference(&ep, Some(EvalSet { ensemble: &ens, data: &data, indices: &test, batch_size: bs }))?;
    let tp = teacher_plan(cfg, &teacher, input)?;
    let mut tr = simulate_inference(&tp, None)?;
    tr.accuracy = Some(accuracy(&teacher, &data, &test, bs)?);
    tr.eval_samples = Some(test.len());
    info!("simulated latency: ensemble {:.3e} s, teacher {:.3e} s", er.latency_s, tr.latency_s);
    write_toml(&lay.sim_plan("ensemble"), &ep, force)?;
    write_toml(&lay.sim_plan("teacher"), &tp, force)?;
    write_toml(&lay.sim_report("ensemble"), &er, force)?;
    write_toml(&lay.sim_report("teacher"), &tr, force)?;
    Ok((er, tr))
}

pub fn report(cfg: &RunConfig, force: bool) -> Result<Summary> {
    let lay = Layout::new(&cfg.out_dir);
    let er: SimReport = read_toml(&lay.sim_report("ensemble"))?;
    let tr: SimReport = read_toml(&lay.sim_report("teacher"))?;
    let plan = load_partitions(&lay)?;
    let ens = load_ensemble(&lay.bundle())?;
    let teacher = load_model(&lay.teacher())?;
    ensure_free(&[lay.comparison(), lay.summary()], force)?;
    let mut student_acc = Vec::new();
    for i in 0..plan.num_partitions {
        let part = load_dataset(&lay.partition_data(i))?;
        let m = load_model(&lay.student(i))?;
        student_acc.push(accuracy(&m, &part, &part.split().test, cfg.eval_batch_size)?);
    }
    let comparison = compare_plans(&[tr.clone(), er.clone()])?;
    let summary = Summary {
        seed: cfg.seed,
        teacher_test_accuracy: tr.accuracy.unwrap_or(f64::NAN),
        student_test_accuracy: student_acc,
        ensemble_test_accuracy: er.accuracy.unwrap_or(f64::NAN),
        teacher_params: teacher.param_count(),
        ensemble_params: ens.param_count(false),
        comparison: comparison.clone(),
    };
    write_toml(&lay.comparison(), &comparison, force)?;
    write_toml(&lay.summary(), &summary, force)?;
    Ok(summary)
}

/// Every stage in order.
pub fn run_all(cfg: &RunConfig, force: bool) -> Result<Summary> {
    ingest(cfg, force)?;
    partition(cfg, force)?;
    train_teacher(cfg, force)?;
    shrink_stage(cfg, force)?;
    distill(cfg, force)?;
    ensemble(cfg, force)?;
    simulate(cfg, force)?;
    report(cfg, force)
}
