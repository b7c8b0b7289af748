use serde::Deserialize;

use vitsplit::ensemble::{ensemble_predict, AggregatorFA, Ensemble};
use vitsplit::data::{synthesize, SyntheticSpec};
use vitsplit::sim::{
    aggregation_flops, compare_plans, simulate_inference, Comparison, DeploymentPlan, DeviceProfile, EvalSet,
    ModelCost, NetworkModel, SimReport, COMPARISON_COLUMNS, MB,
};
use vitsplit::vit::{ViTConfig, ViTModel};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Schema {
    schema_version: u32,
    baseline: String,
    rows: usize,
    columns: Vec<String>,
}

fn small() -> ViTConfig {
    ViTConfig { image_side: 16, patch_size: 4, channels: 1, layers: 2, embed_dim: 16, heads: 2, mlp_dim: 32, num_classes: 2, head_dim: None }
}

fn toy_plan(name: &str, n: usize) -> DeploymentPlan {
    let mut p = DeploymentPlan::homogeneous(
        name,
        DeviceProfile::raspberry_pi_4b(),
        ModelCost::from_config("small", &small()),
        n,
        NetworkModel::new(2.0 * MB, 1e-3),
        256,
    );
    p.aggregation_flops = aggregation_flops(16 * n, 32, 8);
    p
}

#[test]
fn comparison_matches_golden_schema() {
    let schema: Schema = toml::from_str(include_str!("golden/comparison_schema.toml")).unwrap();
    let mut reports: Vec<SimReport> =
        [("toy-4", 4), ("toy-2", 2)].iter().map(|(n, k)| simulate_inference(&toy_plan(n, *k), None).unwrap()).collect();
    for r in &mut reports {
        r.accuracy = Some(0.5);
    }
    let c = compare_plans(&reports).unwrap();
    assert_eq!(c.schema_version, schema.schema_version);
    assert_eq!(c.baseline, schema.baseline);
    assert_eq!(c.rows.len(), schema.rows);
    assert_eq!(COMPARISON_COLUMNS.to_vec(), schema.columns);

    let table = c.to_table();
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap().split('\t').collect::<Vec<_>>(), schema.columns);
    assert_eq!(lines.clone().count(), schema.rows);
    assert!(lines.all(|l| l.split('\t').count() == schema.columns.len()));

    let v: toml::Value = toml::Value::try_from(&c).unwrap();
    for row in v["rows"].as_array().unwrap() {
        let keys: Vec<&String> = row.as_table().unwrap().keys().collect();
        let mut want: Vec<&String> = schema.columns.iter().collect();
        let mut got = keys.clone();
        want.sort();
        got.sort();
        assert_eq!(got, want);
    }
    let back: Comparison = toml::from_str(&toml::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn simulated_accuracy_equals_functional_accuracy() {
    let d = synthesize(&SyntheticSpec { per_class: 5, ..Default::default() }).unwrap();
    let cfg = ViTConfig { num_classes: 8, ..small() };
    let smalls: Vec<ViTModel> = (0..4).map(|i| ViTModel::init(&cfg, i).unwrap()).collect();
    let ens = Ensemble::new(smalls, AggregatorFA::init(64, 32, 8, None, 3).unwrap()).unwrap();
    let idx: Vec<usize> = (0..d.len()).collect();
    let r = simulate_inference(&toy_plan("toy-4", 4), Some(EvalSet { ensemble: &ens, data: &d, indices: &idx, batch_size: 7 })).unwrap();
    let pred = ensemble_predict(&ens, &d, &idx, 16).unwrap();
    let hits = pred.iter().zip(d.labels_of(&idx)).filter(|(p, l)| **p == *l).count();
    assert_eq!(r.accuracy, Some(hits as f64 / idx.len() as f64));
    assert_eq!(r.eval_samples, Some(idx.len()));
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let a = toml::to_string(&simulate_inference(&toy_plan("p", 3), None).unwrap()).unwrap();
    let b = toml::to_string(&simulate_inference(&toy_plan("p", 3), None).unwrap()).unwrap();
    assert_eq!(a, b);
    assert!(a.starts_with("schema_version = 1\n"));
}

#[test]
fn infeasible_and_serial_plans() {
    let mut p = toy_plan("p", 2);
    p.storage_budget_bytes = Some(10);
    assert!(matches!(simulate_inference(&p, None), Err(vitsplit::Error::Infeasible(v)) if v.len() == 2));
    let mut s = toy_plan("s", 3);
    s.network.broadcast = vitsplit::sim::BroadcastMode::Serial;
    let r = simulate_inference(&s, None).unwrap();
    let t = s.network.transfer_time(256);
    assert_eq!(r.devices[1].receive_s, t);
    assert_eq!(r.devices[2].receive_s, t + t);
}
