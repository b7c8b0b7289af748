"""Smoke test for the vitsplit_py extension.

Build it first:  pip install --no-build-isolation -e crates/python
Then run:        python python/smoke_test.py
"""

import tempfile
from pathlib import Path

import vitsplit_py as vs

TINY = [
    "teacher.train.steps=4",
    "distill.train.steps=3",
    "ensemble.train.steps=3",
]


def check_architectures():
    assert vs.ViTConfig.vit_l16().param_count() == 304_324_584
    assert vs.ViTConfig.deit_b().param_count() == 86_566_120
    small = vs.ViTConfig.decomposed_small()
    assert small.flops() > 0
    assert 4 * small.param_count() == 22_868_128
    assert set(small.to_dict()) >= {"image_side", "patch_size", "layers", "embed_dim"}
    try:
        vs.ViTConfig(16, 5, 1, 2, 32, 4, 64, 8)
    except vs.VitsplitError as e:
        assert e.args[0] == "config", e.args
    else:
        raise AssertionError("patch size 5 does not tile 16")


def check_simulator():
    nano = vs.device_preset("jetson-nano")
    assert nano["throughput_flops"] == 472e9
    t = vs.estimate_latency(5_900_000_000, "jetson-nano", 768, 2e6)
    assert abs(t["compute_s"] - 5.9e9 / 472e9) < 1e-12
    assert abs(t["transfer_s"] - 768 / 2e6) < 1e-12
    a, b = vs.derive_seed(7, "distill", 0), vs.derive_seed(7, "distill", 1)
    assert a != b and a == vs.derive_seed(7, "distill", 0)


def check_pipeline(root: Path):
    out = f"out_dir={str(root)!r}".replace("'", '"')
    cfg = vs.load_config(overrides=TINY + [out])
    assert cfg["teacher"]["train"]["steps"] == 4
    summary = vs.run_stage("pipeline", overrides=TINY + [out])
    assert summary["comparison"]["schema_version"] == vs.SCHEMA_VERSION
    assert len(summary["comparison"]["rows"]) == 2

    data = vs.Dataset.load(root / "data" / "dataset.vtsp")
    assert len(data) == 400 and data.num_classes == 8
    assert len(data.image(0)) == data.channels * data.side ** 2
    test = data.split("test")

    teacher = vs.Model.load(root / "teacher" / "teacher.vtsp")
    logits = teacher.logits(data, test[:3])
    assert len(logits) == 3 and len(logits[0]) == 8
    assert 0.0 <= teacher.accuracy(data, "test") <= 1.0

    bundle = vs.Ensemble.load(root / "ensemble" / "bundle.vtsp")
    assert len(bundle) == 4
    acc = bundle.accuracy(data, "test")
    assert abs(acc - summary["ensemble_test_accuracy"]) < 1e-12

    info = vs.inspect(root / "ensemble" / "bundle.vtsp")
    assert info["tag"] == "ensemble"
    assert any(name == "fa.w1" for name, _, _ in info["entries"])

    reports = [root / "simulate" / f"report-{w}.toml" for w in ("teacher", "ensemble")]
    cmp = vs.compare_reports(reports)
    assert cmp["baseline"] == cmp["rows"][0]["plan"]

    try:
        vs.run_stage("ingest", overrides=TINY + [out])
    except vs.VitsplitError as e:
        assert e.args[:2] == ("output-exists", 7), e.args
    else:
        raise AssertionError("rerun without force must refuse")


def main():
    check_architectures()
    check_simulator()
    with tempfile.TemporaryDirectory() as d:
        check_pipeline(Path(d))
    print("smoke test ok")


if __name__ == "__main__":
    main()
