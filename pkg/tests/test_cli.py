"""Config presets, plots and the command-line front end."""

import csv
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from oracles import BINARY_CLASSES, BINARY_CM, FOUR_CLASSES, PRETRAINED_CM

from weee_sort import cli
from weee_sort.config import (
    DatasetSource,
    ExperimentConfig,
    apply_preset,
    config_diff,
    config_from_dict,
    load_config,
)
from weee_sort.dataset import read_manifest, write_manifest
from weee_sort.errors import ConfigError
from weee_sort.plots import curve_figure, plot_history
from weee_sort.synthetic import SyntheticSpec
from weee_sort.training import (
    EpochRecord,
    HISTORY_HEADER,
    ModelConfig,
    read_checkpoint_header,
    read_history,
)


def tiny_config_dict(per_class=12, **training):
    t = {"max_epochs": 2, "patience": 1, "batch_size": 8, "learning_rate": 1e-3, "seed": 0}
    t.update(training)
    return {
        "name": "tiny",
        "dataset": {"synthetic": {"counts": {"metal_piece": per_class, "battery": per_class,
                                             "pcb": per_class, "glass": per_class},
                                  "image_size": 64, "seed": 3}},
        "split_seed": 0,
        "model": {"backbone": "small_cnn", "pretrained": False, "num_classes": 4, "input_size": 32},
        "training": t,
        "augmentation": {"enabled": False},
    }


def write_config(path, data):
    # deliberately odd spacing so snapshot fidelity is meaningful
    text = json.dumps(data, indent=3, sort_keys=False) + "\n\n"
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    """A tiny synthetic dataset plus one trained four_class run."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "config.json", tiny_config_dict())
    out = root / "out"
    assert cli.main(["build-dataset", "--config", str(cfg), "--out", str(out)]) == 0
    assert cli.main(["train", "--config", str(cfg), "--out", str(out), "--preset", "four_class"]) == 0
    return root, cfg, out


# -- config ---------------------------------------------------------------------

def _base(pretrained=True):
    return ExperimentConfig(name="x", dataset=DatasetSource(annotation_file="a.json"),
                            model=ModelConfig(pretrained=pretrained))


def test_binary_preset_changes_only_its_fields():
    base = apply_preset(_base(), "four_class")
    assert config_diff(base, apply_preset(_base(), "binary")) == {
        "preset", "model.num_classes", "class_mapping"}


def test_scratch_preset_changes_only_its_fields():
    base = apply_preset(_base(pretrained=True), "four_class")
    assert config_diff(base, apply_preset(_base(pretrained=True), "scratch")) == {
        "preset", "model.pretrained"}


def test_binary_preset_mapping_collapses_to_battery_other():
    c = apply_preset(_base(), "binary")
    assert c.classes == ["battery", "other"]
    assert c.class_mapping["pcb"] == c.class_mapping["glass"] == c.class_mapping["metal_piece"] == "other"


def test_dataset_source_exactly_one():
    with pytest.raises(ConfigError):
        DatasetSource()
    with pytest.raises(ConfigError):
        DatasetSource(annotation_file="a", manifest_path="b")


def test_unknown_keys_rejected():
    d = tiny_config_dict()
    d["training"]["epochs"] = 3
    with pytest.raises(ConfigError, match="epochs"):
        config_from_dict(d)
    d = tiny_config_dict()
    d["colour"] = "red"
    with pytest.raises(ConfigError):
        config_from_dict(d)


def test_unknown_preset_rejected():
    with pytest.raises(ConfigError):
        apply_preset(_base(), "tiny")


def test_load_config_resolves_relative_paths(tmp_path):
    p = write_config(tmp_path / "c.json", {"name": "r", "dataset": {"annotation_file": "ann.json"}})
    cfg, raw = load_config(p)
    assert cfg.dataset.annotation_file == str(tmp_path / "ann.json")
    assert raw == p.read_bytes()


def test_invalid_json_is_config_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{nope", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(p)
    assert cli.main(["train", "--config", str(p), "--out", str(tmp_path)]) == cli.EXIT_CONFIG


# -- plots ------------------------------------------------------------------------

def _history(n):
    return [EpochRecord(e, 1.0 / e, 0.5 + e / 100, 1.2 / e, 0.4 + e / 100) for e in range(1, n + 1)]


def _write_history_csv(path, records):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_HEADER)
        for r in records:
            w.writerow([r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy])
    return path


def test_curve_x_axis_spans_epochs():
    import matplotlib.pyplot as plt
    for kind in ("accuracy", "loss"):
        fig = curve_figure(_history(20), kind)
        assert fig.axes[0].get_xlim() == (1, 20)
        assert fig.axes[0].get_xlabel() == "epoch"
        labels = [line.get_label() for line in fig.axes[0].get_lines()]
        assert labels == ["train", "validation"]
        plt.close(fig)


def test_plot_cli_twenty_rows(tmp_path):
    hist = _write_history_csv(tmp_path / "history.csv", _history(20))
    assert cli.main(["plot", "--history", str(hist), "--run-id", "r1", "--out", str(tmp_path / "p")]) == 0
    for kind in ("accuracy", "loss"):
        f = tmp_path / "p" / f"r1_{kind}.png"
        assert f.is_file() and f.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_plot_single_row(tmp_path):
    acc, loss = plot_history(_history(1), tmp_path, "one")
    assert acc.stat().st_size > 0 and loss.stat().st_size > 0


def test_plot_byte_stable(tmp_path):
    a = plot_history(_history(7), tmp_path / "a", "r")
    b = plot_history(_history(7), tmp_path / "b", "r")
    for x, y in zip(a, b):
        assert x.read_bytes() == y.read_bytes()


def test_plot_malformed_csv_names_row(tmp_path):
    hist = _write_history_csv(tmp_path / "h.csv", _history(4))
    lines = hist.read_text().splitlines()
    lines[3] = "3,abc,0.5,0.5,0.5"
    hist.write_text("\n".join(lines) + "\n")
    with pytest.raises(Exception, match="row 4"):
        read_history(hist)
    assert cli.main(["plot", "--history", str(hist)]) == cli.EXIT_DATA


def test_plot_bad_header(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("a,b\n1,2\n")
    assert cli.main(["plot", "--history", str(p)]) == cli.EXIT_DATA


# -- flow -----------------------------------------------------------------------

def _cm_file(path, classes, counts):
    path.write_text(json.dumps({"classes": list(classes), "counts": counts}))
    return path


def test_flow_pretrained_matrix_battery(tmp_path, capsys):
    p = _cm_file(tmp_path / "cm.json", FOUR_CLASSES, PRETRAINED_CM)
    assert cli.main(["flow", "--confusion", str(p), "--target", "battery"]) == 0
    out = capsys.readouterr().out
    assert "90.32%" in out and "93.33%" in out
    rep = json.loads((tmp_path / "flow_battery.json").read_text())
    assert rep["purity"] == pytest.approx(28 / 31)
    assert rep["recovery"] == pytest.approx(28 / 30)


def test_flow_binary_matrix_battery(tmp_path, capsys):
    p = _cm_file(tmp_path / "cm.json", BINARY_CLASSES, BINARY_CM)
    assert cli.main(["flow", "--confusion", str(p), "--target", "battery", "--out", str(tmp_path / "o")]) == 0
    assert "100.00%" in capsys.readouterr().out
    assert json.loads((tmp_path / "o" / "flow_battery.json").read_text())["purity"] == 1.0


def test_flow_diagonal_no_contaminants(tmp_path, capsys):
    p = _cm_file(tmp_path / "cm.json", FOUR_CLASSES, np.diag([3, 4, 5, 6]).tolist())
    assert cli.main(["flow", "--confusion", str(p), "--target", "pcb"]) == 0
    assert "no contaminants" in capsys.readouterr().out


def test_flow_unknown_target_lists_classes(tmp_path, capsys):
    p = _cm_file(tmp_path / "cm.json", FOUR_CLASSES, PRETRAINED_CM)
    assert cli.main(["flow", "--confusion", str(p), "--target", "phone"]) == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "phone" in err
    for c in FOUR_CLASSES:
        assert c in err


def test_flow_bad_confusion_file(tmp_path):
    p = tmp_path / "cm.json"
    p.write_text('{"classes": ["a", "b"], "counts": [[1, 2]]}')
    assert cli.main(["flow", "--confusion", str(p), "--target", "a"]) == cli.EXIT_DATA
    assert cli.main(["flow", "--target", "a"]) == cli.EXIT_CONFIG


# -- build-dataset --------------------------------------------------------------

def test_build_refuses_without_force(built, capsys):
    root, cfg, out = built
    before = (out / "dataset" / "manifest.json").read_bytes()
    assert cli.main(["build-dataset", "--config", str(cfg), "--out", str(out)]) == cli.EXIT_CONFIG
    assert "--force" in capsys.readouterr().err
    assert (out / "dataset" / "manifest.json").read_bytes() == before


def test_build_force_is_deterministic(built, tmp_path):
    root, cfg, out = built
    other = tmp_path / "again"
    assert cli.main(["build-dataset", "--config", str(cfg), "--out", str(other)]) == 0
    assert cli.main(["build-dataset", "--config", str(cfg), "--out", str(other), "--force"]) == 0
    assert (other / "dataset" / "manifest.json").read_bytes() == (out / "dataset" / "manifest.json").read_bytes()


@pytest.mark.parametrize("content", ["", '{"images": []}'])
def test_build_empty_annotation_file(tmp_path, content):
    ann = tmp_path / "ann.json"
    ann.write_text(content)
    cfg = write_config(tmp_path / "c.json", {"name": "e", "dataset": {"annotation_file": "ann.json"}})
    out = tmp_path / "out"
    assert cli.main(["build-dataset", "--config", str(cfg), "--out", str(out)]) == cli.EXIT_DATA
    assert not out.exists()


def test_build_missing_annotation_file(tmp_path):
    cfg = write_config(tmp_path / "c.json", {"name": "e", "dataset": {"annotation_file": "none.json"}})
    assert cli.main(["build-dataset", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_DATA


def test_build_needs_config(tmp_path):
    assert cli.main(["build-dataset", "--out", str(tmp_path)]) == cli.EXIT_CONFIG


@pytest.mark.slow
def test_build_prints_published_split_table(tmp_path, capsys):
    counts = {"metal_piece": 217, "battery": 300, "pcb": 246, "glass": 364}
    d = {"name": "t1", "dataset": {"synthetic": {"counts": counts, "image_size": 48, "seed": 1}}}
    cfg = write_config(tmp_path / "c.json", d)
    assert cli.main(["build-dataset", "--config", str(cfg), "--out", str(tmp_path / "o"), "--workers", "2"]) == 0
    table = capsys.readouterr().out.strip().splitlines()
    rows = {line.split()[0]: [int(x) for x in line.split()[1:]] for line in table[1:]}
    assert table[0].split() == ["Set", "metal_piece", "battery", "pcb", "glass", "Total"]
    assert rows["Training"] == [154, 210, 174, 256, 794]
    assert rows["Validation"] == [42, 60, 48, 72, 222]
    assert rows["Test"] == [21, 30, 24, 36, 111]
    assert rows["Total"] == [217, 300, 246, 364, 1127]


# -- train ------------------------------------------------------------------------

def test_train_run_manifest(built):
    root, cfg, out = built
    run_dir = out / "runs" / "tiny_four_class"
    run = json.loads((run_dir / "run.json").read_text())
    assert run["config_snapshot"].encode("utf-8") == cfg.read_bytes()
    assert (run_dir / "config.json").read_bytes() == cfg.read_bytes()
    arts = run["artifacts"]
    for p in [arts["checkpoint"], arts["history"], arts["config"], *arts["plots"]]:
        assert Path(p).is_file() and Path(p).stat().st_size > 0
    assert run["started"] <= run["finished"]
    assert {"python", "torch", "platform"} <= set(run["environment"])
    assert run["resolved_config"]["preset"] == "four_class"
    assert 1 <= run["best_epoch"] <= run["stopped_epoch"] <= 2


def test_train_refuses_existing_run(built):
    root, cfg, out = built
    assert cli.main(["train", "--config", str(cfg), "--out", str(out), "--preset", "four_class"]) == cli.EXIT_CONFIG


def test_train_scratch_records_pretrained_false(built, tmp_path):
    root, _, out = built
    d = tiny_config_dict()
    d["model"]["pretrained"] = True  # preset must override this
    d["dataset"] = {"manifest_path": str(out / "dataset" / "manifest.json")}
    cfg = write_config(tmp_path / "c.json", d)
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path), "--preset", "scratch"]) == 0
    run = json.loads((tmp_path / "runs" / "tiny_scratch" / "run.json").read_text())
    assert run["resolved_config"]["model"]["pretrained"] is False
    header = read_checkpoint_header(run["artifacts"]["checkpoint"])
    assert header["model_config"]["pretrained"] is False


def test_train_binary_header_has_two_classes(built, tmp_path):
    root, _, out = built
    d = tiny_config_dict()
    d["dataset"] = {"manifest_path": str(out / "dataset" / "manifest.json")}
    cfg = write_config(tmp_path / "c.json", d)
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path), "--preset", "binary"]) == 0
    run = json.loads((tmp_path / "runs" / "tiny_binary" / "run.json").read_text())
    header = read_checkpoint_header(run["artifacts"]["checkpoint"])
    assert header["model_config"]["num_classes"] == 2
    assert header["classes"] == ["battery", "other"]


def test_train_missing_manifest(tmp_path):
    cfg = write_config(tmp_path / "c.json", tiny_config_dict())
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_DATA


def test_train_non_finite_loss_exit_code(built, tmp_path, capsys):
    root, _, out = built
    d = tiny_config_dict(learning_rate=1e30)
    d["dataset"] = {"manifest_path": str(out / "dataset" / "manifest.json")}
    cfg = write_config(tmp_path / "c.json", d)
    code = cli.main(["train", "--config", str(cfg), "--out", str(tmp_path), "--preset", "scratch"])
    if code == 0:
        pytest.skip("optimizer stayed finite at this learning rate")
    assert code == cli.EXIT_TRAINING
    assert "loss" in capsys.readouterr().err


# -- evaluate ---------------------------------------------------------------------

def test_evaluate_totals_and_files(built, capsys):
    root, cfg, out = built
    ckpt = out / "runs" / "tiny_four_class" / "best.ckpt"
    assert cli.main(["evaluate", "--manifest", str(out / "dataset" / "manifest.json"),
                     "--out", str(out / "ev"), "--checkpoint", str(ckpt)]) == 0
    printed = capsys.readouterr().out
    assert "metal_piece" in printed
    report = json.loads((out / "ev" / "report_test.json").read_text())
    flow = json.loads((out / "ev" / "flow_test.json").read_text())
    manifest = json.loads((out / "dataset" / "manifest.json").read_text())
    n_test = sum(1 for c in manifest["crops"] if c["split"] == "test")
    assert np.sum(report["confusion"]) == n_test
    assert flow["target_class"] == "battery"


def test_evaluate_val_and_test_distinct(built):
    root, cfg, out = built
    ckpt = out / "runs" / "tiny_four_class" / "best.ckpt"
    man = out / "dataset" / "manifest.json"
    for split in ("val", "test"):
        assert cli.main(["evaluate", "--manifest", str(man), "--checkpoint", str(ckpt),
                         "--split", split, "--out", str(out / "ev2")]) == 0
    val = json.loads((out / "ev2" / "report_val.json").read_text())
    test = json.loads((out / "ev2" / "report_test.json").read_text())
    assert np.sum(val["confusion"]) == 8
    assert np.sum(test["confusion"]) == 4


def test_evaluate_class_mismatch(built, tmp_path, capsys):
    root, cfg, out = built
    renamed = {"metal_piece": "metal_piece", "battery": "battery", "pcb": "board", "glass": "glass"}
    m = read_manifest(out / "dataset" / "manifest.json")
    manifest = tmp_path / "manifest.json"
    write_manifest(m.relabel(renamed, list(renamed.values())), manifest)
    # keep crop paths resolvable from the new location
    (tmp_path / "crops").symlink_to(out / "dataset" / "crops")
    code = cli.main(["evaluate", "--manifest", str(manifest), "--out", str(tmp_path / "e"),
                     "--checkpoint", str(out / "runs" / "tiny_four_class" / "best.ckpt")])
    assert code == cli.EXIT_DATA
    assert "do not match" in capsys.readouterr().err
    assert not (tmp_path / "e").exists()


def test_evaluate_unknown_target(built):
    root, cfg, out = built
    code = cli.main(["evaluate", "--config", str(cfg), "--out", str(out),
                     "--checkpoint", str(out / "runs" / "tiny_four_class" / "best.ckpt"),
                     "--target", "phone"])
    assert code == cli.EXIT_CONFIG


def test_flow_from_checkpoint(built, tmp_path):
    root, cfg, out = built
    code = cli.main(["flow", "--checkpoint", str(out / "runs" / "tiny_four_class" / "best.ckpt"),
                     "--manifest", str(out / "dataset" / "manifest.json"), "--target", "glass",
                     "--out", str(tmp_path)])
    assert code == 0
    assert json.loads((tmp_path / "flow_glass.json").read_text())["target_class"] == "glass"


# -- ablate -----------------------------------------------------------------------

def test_ablate_outputs(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", tiny_config_dict())
    out = tmp_path / "out"
    assert cli.main(["ablate", "--config", str(cfg), "--out", str(out)]) == 0
    runs = sorted(p.parent.name for p in (out / "runs").glob("*/run.json"))
    assert runs == ["tiny_binary", "tiny_four_class", "tiny_scratch"]
    assert [p.name for p in (out / "ablation").glob("*.json")] == ["comparison.json"]
    comp = json.loads((out / "ablation" / "comparison.json").read_text())
    assert set(comp["deltas"]) == {"scratch", "binary"}
    assert [r["class"] for r in comp["deltas"]["binary"]["per_class"]] == ["battery", "other"]
    assert comp["reports"]["binary"]["classes"] == ["battery", "other"]
    summary = (out / "ablation" / "summary.txt").read_text()
    assert "scratch - four_class" in summary
    assert " pp" in summary
    for preset in ("four_class", "scratch", "binary"):
        run = json.loads((out / "runs" / f"tiny_{preset}" / "run.json").read_text())
        assert run["config_snapshot"].encode() == cfg.read_bytes()
        assert run["resolved_config"]["split_seed"] == 0
        assert run["resolved_config"]["training"]["seed"] == 0


def test_ablate_partial_on_failure(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "c.json", tiny_config_dict())
    out = tmp_path / "out"
    real = cli.train_run

    def flaky(config, raw, out_, force=False):
        if config.preset == "scratch":
            raise cli.TrainingError("loss became nan at epoch 1")
        return real(config, raw, out_, force)

    monkeypatch.setattr(cli, "train_run", flaky)
    assert cli.main(["ablate", "--config", str(cfg), "--out", str(out)]) == cli.EXIT_TRAINING
    partial = json.loads((out / "ablation" / "comparison.partial.json").read_text())
    assert set(partial["failures"]) == {"scratch"}
    assert set(partial["runs"]) == {"four_class", "binary"}
    assert not (out / "ablation" / "comparison.json").exists()


def test_seed_override(tmp_path):
    cfg, _ = load_config(write_config(tmp_path / "c.json", tiny_config_dict()))
    c = cli._with_seed(cfg, 9)
    assert c.split_seed == 9 and c.training.seed == 9
    assert cli._with_seed(cfg, None) is cfg


def test_synthetic_spec_roundtrip():
    s = SyntheticSpec({"battery": 2}, image_size=40, seed=5)
    assert SyntheticSpec.from_dict(s.to_dict()) == s


def test_module_entry_point_help(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    assert "build-dataset" in capsys.readouterr().out


def test_replace_keeps_config_frozen():
    c = _base()
    with pytest.raises(Exception):
        c.name = "y"
    assert replace(c, name="y").name == "y"


def test_ablate_parallel_matches_sequential(tmp_path):
    cfg = write_config(tmp_path / "c.json", tiny_config_dict())
    seq, par = tmp_path / "seq", tmp_path / "par"
    assert cli.main(["ablate", "--config", str(cfg), "--out", str(seq)]) == 0
    assert cli.main(["ablate", "--config", str(cfg), "--out", str(par), "--parallel"]) == 0
    a = json.loads((seq / "ablation" / "comparison.json").read_text())
    b = json.loads((par / "ablation" / "comparison.json").read_text())
    assert a == b
    assert (seq / "ablation" / "summary.txt").read_text() == (par / "ablation" / "summary.txt").read_text()


@pytest.mark.parametrize("name", ["desk_smoke.json", "full_vgg16.json"])
def test_shipped_configs_parse(name):
    cfg, raw = load_config(Path(__file__).parent.parent / "configs" / name)
    assert raw and cfg.preset == "none"
    assert config_diff(apply_preset(cfg, "four_class"), apply_preset(cfg, "binary")) == {
        "preset", "model.num_classes", "class_mapping"}
