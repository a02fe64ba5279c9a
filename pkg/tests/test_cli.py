import csv
import io
import json
from pathlib import Path

import pytest

from m3dv.cli import main
from m3dv.kitti_io import generate_scenes, write_label_file

FIXTURES = Path(__file__).parent / "fixtures"
pytestmark = pytest.mark.filterwarnings("ignore::m3dv.kitti_io.UnknownCategoryWarning")


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_match_identical_files_diagonal(capsys):
    label = str(FIXTURES / "label_000008.txt")
    code, out, _ = run(capsys, "match", "--gt", label, "--pred", label, "--epoch", "100")
    res = json.loads(out)
    assert code == 0 and res["gamma"] == 1.0
    assert all(p == g for p, g in res["assignment"])
    assert all(abs(p["cost"] - p["components"]["cls"] * 2.0) < 1e-9 for p in res["pairs"])


def test_match_fig1_depends_on_epoch(capsys):
    gt, pred = str(FIXTURES / "fig1_gt.txt"), str(FIXTURES / "fig1_pred.txt")
    early = json.loads(run(capsys, "match", "--gt", gt, "--pred", pred, "--epoch", "0")[1])
    late = json.loads(run(capsys, "match", "--gt", gt, "--pred", pred, "--epoch", "85")[1])
    assert early["assignment"] == [[0, 0]] and late["assignment"] == [[1, 0]]
    assert early["gamma"] == 0.0 and late["gamma"] == 1.0


def test_missing_file_exit_code(capsys):
    code, _, err = run(capsys, "match", "--gt", "missing.txt", "--pred", "missing.txt", "--epoch", "0")
    assert code == 2 and "missing.txt" in err
    code, _, _ = run(capsys, "dn-gen", "--labels", str(FIXTURES / "fig1_gt.txt"), "--config", "nope.json")
    assert code == 2


def test_parse_error_is_reported(capsys, tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("Car 0 0 0 1 2 3\n")
    code, _, err = run(capsys, "match", "--gt", str(bad), "--pred", str(bad), "--epoch", "0")
    assert code == 1 and "line 1" in err


def test_unknown_config_key(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"bogus": 1}')
    code, _, err = run(capsys, "dn-gen", "--labels", str(FIXTURES / "fig1_gt.txt"), "--config", str(cfg))
    assert code == 1 and "bogus" in err


def test_dn_gen_deterministic(capsys, monkeypatch):
    label = str(FIXTURES / "label_000008.txt")
    a = json.loads(run(capsys, "dn-gen", "--labels", label, "--seed", "4", "--desk")[1])
    b = json.loads(run(capsys, "dn-gen", "--labels", label, "--seed", "4", "--desk")[1])
    assert a == b and a["G"] == 2 and a["C"] == 2
    assert len(a["groups"][0]) == a["C"] * a["K"]
    monkeypatch.setenv("M3DV_SEED", "4")
    c = json.loads(run(capsys, "dn-gen", "--labels", label, "--desk")[1])
    assert c == a


def _train(capsys, out, epochs="2", variant="full", seed="1"):
    return run(capsys, "train", "--desk", "--scenes", "2", "--epochs", epochs, "--variant", variant,
               "--seed", seed, "--out", str(out))


def test_train_writes_artifacts_and_is_deterministic(capsys, tmp_path):
    assert _train(capsys, tmp_path / "a")[0] == 0
    assert _train(capsys, tmp_path / "b")[0] == 0
    for name in ("metrics.csv", "manifest.json", "weights.npz", "config.json"):
        assert (tmp_path / "a" / name).is_file()
    assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()
    assert json.loads((tmp_path / "a" / "config.json").read_text())["epochs"] == 2


def test_train_invalid_variant_is_usage_error(capsys, tmp_path):
    with pytest.raises(SystemExit) as exc:
        _train(capsys, tmp_path, variant="vae")
    assert exc.value.code == 2


def test_diag_entropy_merges(capsys, tmp_path):
    _train(capsys, tmp_path / "vae", epochs="3")
    _train(capsys, tmp_path / "ae", epochs="2", variant="ae")
    code, out, _ = run(capsys, "diag-entropy", "--runs", str(tmp_path / "vae"))
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and [r["epoch"] for r in rows] == ["0", "1", "2"]
    source = list(csv.DictReader(open(tmp_path / "vae" / "metrics.csv")))
    assert [r["mean_entropy"] for r in rows] == [r["entropy"] for r in source]
    out = run(capsys, "diag-entropy", "--runs", str(tmp_path / "vae"), str(tmp_path / "ae"))[1]
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 6
    assert {r["variant"] for r in rows} == {"AE", "VAE"}
    blank = [r for r in rows if r["epoch"] == "2" and r["run"] == "ae"]
    assert blank and blank[0]["mean_entropy"] == "" and blank[0]["layer_0"] == ""


def test_diag_entropy_missing_run(capsys, tmp_path):
    assert run(capsys, "diag-entropy", "--runs", str(tmp_path / "none"))[0] == 2


def _eval_inputs(tmp_path, drop_one=False):
    scenes = generate_scenes(3, 3, (1, 3))
    labels = tmp_path / "labels"
    labels.mkdir()
    dets = {}
    for i, s in enumerate(scenes):
        (labels / f"{i:06d}.txt").write_text(write_label_file(s.objects))
        objs = s.objects[1:] if drop_one and i == 0 else s.objects
        dets[f"{i:06d}"] = [{"category": o.category, "location": list(o.location), "dims": list(o.dims),
                             "yaw": o.yaw, "score": 0.9} for o in objs]
    path = tmp_path / "dets.json"
    path.write_text(json.dumps(dets))
    return str(path), str(labels)


def test_eval_perfect_detections(capsys, tmp_path):
    dets, labels = _eval_inputs(tmp_path)
    code, out, _ = run(capsys, "eval", "--dets", dets, "--labels", labels)
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and rows
    assert all(float(r["ap_r40"]) == 100.0 for r in rows)
    assert {r["metric"] for r in rows} == {"3d", "bev"}


def test_eval_missed_object_lowers_ap(capsys, tmp_path):
    dets, labels = _eval_inputs(tmp_path, drop_one=True)
    rows = list(csv.DictReader(io.StringIO(run(capsys, "eval", "--dets", dets, "--labels", labels,
                                                   "--metric", "3d", "--thresholds", "0.5")[1])))
    assert any(float(r["ap_r40"]) < 100.0 for r in rows)


def test_eval_errors(capsys, tmp_path):
    assert run(capsys, "eval", "--dets", "none.json", "--labels", str(tmp_path))[0] == 2
    dets, _ = _eval_inputs(tmp_path)
    assert run(capsys, "eval", "--dets", dets, "--labels", str(tmp_path / "nolabels"))[0] == 2
    empty = tmp_path / "empty"
    empty.mkdir()
    code, _, err = run(capsys, "eval", "--dets", dets, "--labels", str(empty))
    assert code == 1 and "without labels" in err


def test_iou_command(capsys):
    code, out, _ = run(capsys, "iou", "--box-a", "0", "0", "10", "4", "2", "1.5", "0",
                       "--box-b", "1", "0", "10", "4", "2", "1.5", "0")
    res = json.loads(out)
    assert code == 0 and res["iou_3d"] == pytest.approx(3 / 5, abs=1e-12)
    code, _, _ = run(capsys, "iou", "--box-a", "0", "0", "10", "0", "2", "1.5", "0",
                     "--box-b", "1", "0", "10", "4", "2", "1.5", "0")
    assert code == 1


def test_gradcheck_ops_only(capsys):
    code, out, _ = run(capsys, "gradcheck", "--skip-decoder", "--seed", "2")
    res = json.loads(out)
    assert code == 0 and res["ops_max"] <= 1e-6 and "decoder" not in res
