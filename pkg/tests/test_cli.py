import contextlib
import io
import json
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from handmesh import cli

SCHEMAS = resources.files("handmesh") / "schemas"


def schema(name):
    return json.loads((SCHEMAS / f"{name}.json").read_text(encoding="utf-8"))


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli.main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


def ok(*argv):
    code, out, err = run(*argv)
    assert code == 0, err
    result = json.loads(out)
    jsonschema.validate(result, schema(argv[0]))
    return result


def tree(root: Path) -> set[str]:
    return {p.relative_to(root).as_posix() for p in root.rglob("*")}


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """synth-model -> decimate -> spirals -> synth-data -> fit -> train -> infer -> evaluate."""
    root = tmp_path_factory.mktemp("cli")
    results = {}

    def step(name, out, *args):
        before = tree(root)
        results[name] = ok(name, "--out", root / out, "--workers", 1, *args)
        created = tree(root) - before
        allowed = {out} | {str(Path(out).parents[i].as_posix()) for i in range(len(Path(out).parts) - 1)}
        assert all(p in allowed or p.startswith(out + "/") for p in created), (name, sorted(created))

    step("synth-model", "assets", "--seed", 7)
    step("decimate", "hier", "--assets", root / "assets")
    step("spirals", "spirals", "--hierarchy", root / "hier")
    step("synth-data", "kp", "--assets", root / "assets", "--n", 3, "--noise", 1.0)
    (root / "fit.json").write_text(json.dumps({"stage1_iters": 10, "stage2_iters": 10}))
    step("fit", "fits", "--assets", root / "assets", "--keypoints", root / "kp", "--config", root / "fit.json")
    (root / "pipe.json").write_text(json.dumps({"fit": {"stage1_iters": 10, "stage2_iters": 10},
                                                "filter": {"max_normalized_mse": 1e9, "max_samples_per_source": 2}}))
    step("filter-dataset", "dataset", "--keypoints", root / "kp", "--assets", root / "assets",
         "--config", root / "pipe.json")
    step("synth-data", "images", "--assets", root / "assets", "--kind", "images", "--n", 2, "--crop", 32)
    (root / "train.json").write_text(json.dumps({"train": {"epochs": 2, "decay_epochs": [], "crop": 32,
                                                           "batch_size": 2, "encoder_channels": [4, 4, 4, 4, 4]}}))
    step("train", "ckpt", "--data", root / "images", "--hierarchy", root / "hier", "--config", root / "train.json")
    step("infer", "pred/mesh_00000.obj", "--ckpt", root / "ckpt", "--image", root / "images" / "image_00000.png")
    step("evaluate", "eval", "--pred", root / "pred", "--gt", root / "images", "--assets", root / "assets",
         "--csv")
    step("render-overlay", "overlay.png", "--image", root / "images" / "image_00000.png",
         "--keypoints", root / "kp" / "synthetic_00000.json", "--mesh", root / "images" / "mesh_00000.obj")
    return root, results


def test_synth_model_byte_identical(chain, tmp_path):
    root, _ = chain
    ok("synth-model", "--seed", 7, "--out", tmp_path / "again")
    for name in sorted(tree(root / "assets")):
        assert (root / "assets" / name).read_bytes() == (tmp_path / "again" / name).read_bytes(), name


def test_decimate_reports_reference_sizes(chain):
    _, res = chain
    assert res["decimate"]["sizes"] == [778, 392, 197, 100, 51]
    assert res["decimate"]["levels"] == 5


def test_spirals_written_per_level(chain):
    root, res = chain
    assert sorted(p.name for p in (root / "spirals").iterdir()) == [f"level_{i}.json" for i in range(5)]
    assert res["spirals"]["k"] == 2


def test_fit_outputs(chain):
    root, res = chain
    assert len(res["fit"]["fits"]) == 3
    d = json.loads((root / "fits" / "synthetic_00000.json").read_text())
    assert {"params", "camera", "residuals"} <= set(d)
    assert (root / "fits" / "synthetic_00000.obj").exists()


def test_filter_dataset_manifest(chain):
    root, res = chain
    assert res["filter-dataset"]["counts"]["accepted"] == 2
    manifest = json.loads((root / "dataset" / "manifest.json").read_text())
    jsonschema.validate(manifest, schema("manifest"))
    assert "min_total_confidence" in manifest["default_thresholds"]


def test_train_and_report(chain):
    root, res = chain
    assert res["train"]["epochs"] == 2
    assert (root / "ckpt" / "history.json").exists()
    report = json.loads((root / "eval" / "report.json").read_text())
    jsonschema.validate(report, schema("report"))
    assert report["n"] == 1 and "pose" in report["summary"]
    assert (root / "eval" / "pck.csv").read_text().startswith("curve,threshold,pck")


def test_overlay_image(chain):
    from PIL import Image

    root, res = chain
    assert Image.open(root / "overlay.png").size == (32, 32)
    assert res["render-overlay"]["size"] == [32, 32]


def test_evaluate_single_file_report(chain, tmp_path):
    root, _ = chain
    ok("evaluate", "--pred", root / "pred", "--gt", root / "images", "--out", tmp_path / "r.json")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["r.json"]
    code, _, err = run("evaluate", "--pred", root / "pred", "--gt", root / "images", "--out", tmp_path / "s.json",
                       "--csv")
    assert code == 1 and "directory" in json.loads(err)["message"]


def test_errors_are_structured(tmp_path):
    code, out, err = run("fit", "--out", tmp_path / "x", "--assets", tmp_path / "missing", "--keypoints", tmp_path)
    assert code == 1 and out == ""
    payload = json.loads(err.strip().splitlines()[-1])
    jsonschema.validate(payload, schema("error"))
    assert payload["command"] == "fit"


def test_usage_errors_exit_nonzero(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["decimate", "--out", "x"])
    assert info.value.code != 0
    assert "usage" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["synth-model", "--out", "x", "--workers", "0"])


def test_environment_overrides(monkeypatch, tmp_path, assets):
    monkeypatch.setenv("HANDMESH_SEED", "3")
    args = cli.build_parser().parse_args(["synth-model", "--out", str(tmp_path)])
    assert args.seed == 3
    assert cli.build_parser().parse_args(["synth-model", "--out", str(tmp_path), "--seed", "4"]).seed == 4
    monkeypatch.setenv("HANDMESH_WORKERS", "2")
    assert cli.build_parser().parse_args(["synth-model", "--out", str(tmp_path)]).workers == 2


def test_seed_changes_keypoints(chain, tmp_path):
    root, _ = chain
    ok("synth-data", "--assets", root / "assets", "--n", 1, "--seed", 1, "--out", tmp_path / "a")
    ok("synth-data", "--assets", root / "assets", "--n", 1, "--seed", 1, "--out", tmp_path / "b")
    ok("synth-data", "--assets", root / "assets", "--n", 1, "--seed", 2, "--out", tmp_path / "c")
    a, b, c = (json.loads((tmp_path / d / "synthetic_00000.json").read_text())["keypoints"] for d in "abc")
    assert a == b and not np.allclose(a, c)


def test_every_command_has_a_schema():
    names = set(cli.build_parser()._subparsers._group_actions[0].choices)
    shipped = {p.name[:-5] for p in SCHEMAS.iterdir() if p.name.endswith(".json")}
    assert names <= shipped
