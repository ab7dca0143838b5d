import copy
import json
from pathlib import Path

import numpy as np
import pytest

from attrib_sens import cli, data, nn, reports
from attrib_sens.harness import REPORT_COLUMNS
from attrib_sens.tensorio import read_tensor, write_tensor

ALL = ["spearman", "pearson_hog", "ssim", "loc_error", "deletion_auc", "insertion_auc"]

TINY = {
    "dataset": {"count": 12, "seed": 4, "test_count": 6},
    "models": [
        {"id": "a", "robust": False, "train": {"epochs": 1, "batch_size": 6}},
        {"id": "b", "robust": True, "train": {"epochs": 1, "batch_size": 6},
         "pgd": {"epsilon": 0.5, "step_size": 0.25, "num_steps": 1}},
    ],
    "experiments": [
        {"name": "noise", "kind": "noise_invariance", "models": ["a", "b"], "sigma": 0.1, "images": 3},
        {"name": "sp", "kind": "hyperparam_sensitivity", "models": ["a", "b"],
         "method": {"SlidingPatch": {"stride": 8}},
         "sweep": {"field": "patch", "reference": 20, "variants": [16, 24]}, "metrics": ALL, "images": 2},
        {"name": "trend", "kind": "smoothing_trend", "models": ["a", "b"],
         "method": {"SmoothGrad": {"sigma": 0.1}}, "sweep": {"field": "n_samples", "values": [0, 2, 4]},
         "images": 2},
        {"name": "disks", "kind": "object_size_study", "models": ["a"], "ball_sizes": [16],
         "patch_sizes": [4, 16], "stride": 8},
    ],
    "output": {"dir": "out", "render": True},
}


def write_config(tmp_path, cfg=TINY):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp)
    assert cli.main(["train", "--config", str(cfg), "--model", "all"]) == 0
    return tmp, cfg


# ----------------------------------------------------------------------
# config validation


def test_duplicate_model_id_exit_2(tmp_path, capsys):
    cfg = copy.deepcopy(TINY)
    cfg["models"][1]["id"] = "a"
    code, _, err = run(["sweep", "--config", write_config(tmp_path, cfg)], capsys)
    assert code == 2
    assert "models[1].id" in err and "duplicate" in err


@pytest.mark.parametrize("mutate, where", [
    (lambda c: c["models"][0].pop("train"), "models[0]"),
    (lambda c: c["experiments"][0].update(kind="bogus"), "experiments[0].kind"),
    (lambda c: c["experiments"][1].update(models=["a", "zzz"]), "experiments[1].models[1]"),
    (lambda c: c["experiments"][1].update(method={"Nope": {}}), "experiments[1].method"),
    (lambda c: c["experiments"][1]["sweep"].update(field="nope"), "experiments[1].sweep.field"),
    (lambda c: c["experiments"][1]["sweep"].update(variants=[20]), "experiments[1].sweep"),
    (lambda c: c["experiments"][1].update(images=99), "experiments[1].images"),
    (lambda c: c["models"][0]["train"].update(epochs=0), "models[0].train"),
    (lambda c: c["models"][0]["train"].update(bogus=1), "models[0].train"),
    (lambda c: c["models"][0].update(pgd={}), "models[0].pgd"),
    (lambda c: c["dataset"].update(count=3), "dataset.count"),
])
def test_config_errors_name_path(tmp_path, mutate, where):
    cfg = copy.deepcopy(TINY)
    mutate(cfg)
    with pytest.raises(cli.ConfigError) as info:
        cli.validate_config(cfg, tmp_path / "c.json")
    assert str(info.value).startswith(where)


def test_unreadable_config_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["sweep", "--config", bad], capsys)[0] == 2
    assert run(["sweep", "--config", tmp_path / "missing.json"], capsys)[0] == 2


def test_desk_config_validates():
    cfg = cli.load_config(Path(__file__).parents[1] / "experiments" / "paper-desk.json")
    assert [m.id for m in cfg.models] == ["standard", "robust"]
    assert cfg.model("robust").pgd.epsilon == 1.0


def test_threads_resolution(monkeypatch):
    monkeypatch.delenv(cli.THREADS_ENV, raising=False)
    assert cli.resolve_threads(None) == 1
    monkeypatch.setenv(cli.THREADS_ENV, "4")
    assert cli.resolve_threads(None) == 4
    assert cli.resolve_threads(2) == 2
    monkeypatch.setenv(cli.THREADS_ENV, "x")
    with pytest.raises(cli.ConfigError):
        cli.resolve_threads(None)
    with pytest.raises(cli.ConfigError):
        cli.resolve_threads(0)


def test_format_path():
    assert cli.format_path(["models", 1, "id"]) == "models[1].id"
    assert cli.format_path([]) == "<root>"


# ----------------------------------------------------------------------
# subcommands


def test_gen_data_writes_manifests(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code, out, _ = run(["gen-data", "--config", cfg], capsys)
    assert code == 0
    paths = json.loads(out)
    train = Path(paths["train"]).read_text().splitlines()
    test = Path(paths["test"]).read_text().splitlines()
    assert len(train) == 12 and len(test) == 6
    assert json.loads(test[0])["id"] == 12  # test ids continue after the training split


def test_train_unknown_model_exit_2(trained, capsys):
    _, cfg = trained
    assert run(["train", "--config", cfg, "--model", "zzz"], capsys)[0] == 2


def test_attribute_and_evaluate(trained, tmp_path, capsys):
    tmp, _ = trained
    model_path = tmp / "out" / "models" / "a"
    sample = data.render_sample(4, 12)
    write_tensor(tmp_path / "x.atns", sample.image)
    write_tensor(tmp_path / "m.atns", sample.gt_mask.astype(np.float32))
    code, out, _ = run(["attribute", "--model", model_path, "--image", tmp_path / "x.atns",
                        "--method", '{"SmoothGrad": {"n_samples": 3}}', "--out", tmp_path / "h.atns",
                        "--class", 2, "--render"], capsys)
    assert code == 0
    info = json.loads(out)
    assert info["class"] == 2 and info["range"] == "signed_unit"
    heat = read_tensor(tmp_path / "h.atns")
    assert heat.shape == (64, 64) and np.abs(heat).max() <= 1
    assert (tmp_path / "h.png").exists()

    code, out, _ = run(["evaluate", "--model", model_path, "--heatmap", tmp_path / "h.atns",
                        "--image", tmp_path / "x.atns", "--mask", tmp_path / "m.atns", "--class", 2,
                        "--steps", 8], capsys)
    assert code == 0
    scores = json.loads(out)
    assert set(scores) == {"loc_error", "deletion_auc", "insertion_auc"}
    assert 0 <= scores["loc_error"] <= 1


def test_attribute_errors(trained, tmp_path, capsys):
    tmp, _ = trained
    model_path = tmp / "out" / "models" / "a"
    write_tensor(tmp_path / "x.atns", np.zeros((8, 8, 3), np.float32))
    code, _, err = run(["attribute", "--model", model_path, "--image", tmp_path / "x.atns",
                        "--method", '{"Gradient": {}}', "--out", tmp_path / "h.atns"], capsys)
    assert code == 3 and "shape" in err
    code, _, err = run(["attribute", "--model", model_path, "--image", tmp_path / "x.atns",
                        "--method", '{"SmoothGrad": {"n_samples": 0}}', "--out", tmp_path / "h.atns"], capsys)
    assert code == 2 and "--method" in err
    code, _, _ = run(["attribute", "--model", tmp_path, "--image", tmp_path / "x.atns",
                      "--method", '{"Gradient": {}}', "--out", tmp_path / "h.atns"], capsys)
    assert code == 3


def test_sweep_report_and_thread_determinism(trained, tmp_path, capsys, monkeypatch):
    tmp, cfg = trained
    code, _, _ = run(["sweep", "--config", cfg, "--threads", 1, "--out", tmp_path / "one"], capsys)
    assert code == 0
    # models are looked up under the output dir; share the trained ones
    for d in ("one", "three"):
        (tmp_path / d / "models").mkdir(parents=True, exist_ok=True)
    for mid in ("a", "b"):
        nn.MicroClassifier.load(tmp / "out" / "models" / mid).save(tmp_path / "three" / "models" / mid)
    monkeypatch.setenv(cli.THREADS_ENV, "3")
    assert run(["sweep", "--config", cfg, "--out", tmp_path / "three"], capsys)[0] == 0

    one = sorted((tmp_path / "one" / "reports").iterdir())
    three = sorted((tmp_path / "three" / "reports").iterdir())
    assert [p.name for p in one] == [p.name for p in three]
    assert {p.name for p in one} >= {"noise.csv", "sp.csv", "trend.json", "disks.json"}
    for a, b in zip(one, three):
        assert a.read_bytes() == b.read_bytes(), a.name

    rows = reports.read_report_rows(tmp_path / "one" / "reports" / "sp.csv")
    assert len(rows) == 2 * 2 * 3
    header = (tmp_path / "one" / "reports" / "sp.csv").read_text().splitlines()[0]
    assert header == ",".join(REPORT_COLUMNS)
    assert list((tmp_path / "one" / "heatmaps" / "disks").glob("*.png"))

    code, out, _ = run(["report", "--in", tmp_path / "one" / "reports", "--out", tmp_path / "summary"],
                       capsys)
    assert code == 0
    info = json.loads(out)
    assert Path(info["summary"]).exists()
    assert len(info["figures"]) >= 4
    for fig in info["figures"]:
        assert Path(fig).stat().st_size > 0


def test_sweep_only_unknown_exit_2(trained, capsys):
    _, cfg = trained
    assert run(["sweep", "--config", cfg, "--only", "nope"], capsys)[0] == 2


def test_report_missing_dir_exit_3(tmp_path, capsys):
    assert run(["report", "--in", tmp_path / "nothing"], capsys)[0] == 3
