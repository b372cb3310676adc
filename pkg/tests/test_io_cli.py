import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from gsmap import cli
from gsmap.config import RunConfig
from gsmap.errors import ConfigurationError
from gsmap.fitting import FitConfig
from gsmap.gaussian import ClassId, GaussianMap, MapElement
from gsmap.io import (
    load_map,
    load_scene,
    load_vectors,
    quantize,
    read_pgm,
    save_map,
    save_scene,
    vectors_to_geojson,
    write_pgm,
)
from gsmap.losses import LossWeights
from gsmap.metrics import EvalConfig
from gsmap.raster import RasterGrid
from gsmap.scene import Scene, SceneSpec, generate_scene, make_gt_element
from gsmap.vector import Polyline

SCHEMAS = Path(__file__).resolve().parents[1] / "docs" / "schemas"
SMALL_GRID = {"width_px": 80, "height_px": 40, "x_min": -12.0, "x_max": 12.0, "y_min": -6.0, "y_max": 6.0}
SHORT = {
    "fit": {"iterations": 15, "n_gaussians": 10, "rematch_every": 5},
    "scene": {"grid": SMALL_GRID, "divider_length": [8, 12], "boundary_length": [10, 16],
              "crossing_width": [2, 3], "crossing_length": [4, 6], "n_points": 10},
}


def validate(doc, name):
    schema = json.loads((SCHEMAS / f"{name}.schema.json").read_text())
    jsonschema.Draft202012Validator.check_schema(schema)
    jsonschema.validate(doc, schema, cls=jsonschema.Draft202012Validator)


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "short.json", SHORT)
    assert cli.main(["generate", "--config", cfg, "--out", str(root / "scenes"), "--count", "2"]) == 0
    assert cli.main(["fit", "--scene", str(root / "scenes" / "scene_0000.json"), "--config", cfg,
                     "--out", str(root / "fit")]) == 0
    return root


# ---- PGM ----

def test_pgm_round_trip_and_header(tmp_path):
    vals = np.linspace(0, 1, 12).reshape(3, 4)
    write_pgm(tmp_path / "a.pgm", vals)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n4 3\n255\n") and len(raw) == len(b"P5\n4 3\n255\n") + 12
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), quantize(vals) / 255.0)
    assert quantize(np.array([0.0, 0.5, 0.502, 1.0])).tolist() == [0, 128, 128, 255]


def test_pgm_rows_start_at_y_min(tmp_path):
    grid = RasterGrid(10, 6, 0.0, 10.0, 0.0, 6.0)
    g = make_gt_element(ClassId.DIVIDER, Polyline([[0.0, 0.5], [10.0, 0.5]]), grid, half_width=0.4)
    save_scene(Scene(grid, (g,)), tmp_path / "s.json")
    img = read_pgm(tmp_path / "s_mask_00.pgm")
    assert img[0].all() and not img[-1].any()


# ---- scene / map / vectors ----

@pytest.mark.invariant
def test_scene_round_trip(tmp_path):
    scene = generate_scene(SceneSpec(seed=9))
    save_scene(scene, tmp_path / "scene.json")
    back = load_scene(tmp_path / "scene.json")
    assert back.grid == scene.grid and back.seed == 9
    for a, b in zip(scene, back):
        assert a.class_id == b.class_id and a.closed == b.closed
        np.testing.assert_array_equal(a.vertices.points, b.vertices.points)
        np.testing.assert_array_equal(a.resampled.points, b.resampled.points)
        np.testing.assert_array_equal(a.mask.values, b.mask.values)
    validate(json.loads((tmp_path / "scene.json").read_text()), "scene")


@pytest.mark.invariant
def test_map_round_trip(tmp_path, rng):
    elems = (
        MapElement(np.column_stack([rng.normal(0, 3, (5, 2)), rng.uniform(0.1, 2, (5, 2)), rng.uniform(-1.5, 1.5, 5)]),
                   ClassId.BOUNDARY, scores=[0.1, 0.2, 0.7]),
        MapElement(np.column_stack([rng.normal(0, 3, (4, 2)), rng.uniform(0.1, 2, (4, 2)), rng.uniform(-1.5, 1.5, 4)]),
                   ClassId.PED_CROSSING),
    )
    save_map(GaussianMap(elems), tmp_path / "m.json")
    back = load_map(tmp_path / "m.json")
    for a, b in zip(elems, back):
        np.testing.assert_array_equal(a.params, b.params)
        np.testing.assert_array_equal(a.scores, b.scores)
        assert a.class_id == b.class_id and a.closed == b.closed
    validate(json.loads((tmp_path / "m.json").read_text()), "map")
    doc = vectors_to_geojson(GaussianMap(elems))
    validate(doc, "vectors")
    ring = doc["features"][1]["geometry"]["coordinates"][0]
    assert ring[0] == ring[-1] and len(ring) == 5


# ---- generate ----

def test_generate_count_one_and_zero(tmp_path):
    assert cli.main(["generate", "--out", str(tmp_path / "one"), "--count", "1"]) == 0
    names = sorted(p.name for p in (tmp_path / "one").iterdir())
    assert names == ["scene_0000.json", "scene_0000_mask_00.pgm", "scene_0000_mask_01.pgm", "scene_0000_mask_02.pgm"]
    assert cli.main(["generate", "--out", str(tmp_path / "none"), "--count", "0"]) == 0
    assert list((tmp_path / "none").iterdir()) == []


@pytest.mark.invariant
def test_generate_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["generate", "--out", str(tmp_path / d), "--count", "2"]) == 0
    for p in sorted((tmp_path / "a").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_generate_scene_seeds_follow_index(workdir):
    a = load_scene(workdir / "scenes" / "scene_0000.json")
    b = load_scene(workdir / "scenes" / "scene_0001.json")
    assert (a.seed, b.seed) == (0, 1)


# ---- fit ----

@pytest.mark.invariant
def test_fit_outputs_and_schemas(workdir):
    out = workdir / "fit"
    names = sorted(p.name for p in out.iterdir())
    assert names == ["element_00.pgm", "element_01.pgm", "element_02.pgm", "fitted_map.json", "report.json",
                     "timing.json", "vectors.json"]
    for name, schema in [("report", "report"), ("fitted_map", "map"), ("vectors", "vectors"), ("timing", "timing")]:
        validate(json.loads((out / f"{name}.json").read_text()), schema)
    report = json.loads((out / "report.json").read_text())
    assert report["final"]["total"] <= report["initial_total"]
    assert len(report["trajectory"]["total"]) <= 15


def test_fit_vectors_round_trip_to_centres(workdir):
    fitted = load_map(workdir / "fit" / "fitted_map.json")
    vecs = load_vectors(workdir / "fit" / "vectors.json")
    assert len(vecs) == len(fitted)
    for (cid, poly, score), e in zip(vecs, fitted):
        assert cid == e.class_id and poly.closed == e.closed and score == e.score
        np.testing.assert_array_equal(poly.points, e.centers)


def test_fit_pgm_is_rendered_density(workdir):
    from gsmap.raster import render_element
    fitted = load_map(workdir / "fit" / "fitted_map.json")
    grid = load_scene(workdir / "scenes" / "scene_0000.json").grid
    img = read_pgm(workdir / "fit" / "element_01.pgm")
    np.testing.assert_array_equal(img * 255, quantize(render_element(fitted[1], grid).values))


def test_fit_with_noise_free_init(tmp_path, workdir):
    cfg = write_config(tmp_path / "c.json", {**SHORT, "fit": {**SHORT["fit"], "noise_sigma": 0.0}})
    assert cli.main(["fit", "--scene", str(workdir / "scenes" / "scene_0000.json"), "--config", cfg,
                     "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["trajectory"]["vector"][0] == 0.0
    assert report["final"]["total"] <= report["initial_total"]


@pytest.mark.invariant
def test_fit_twice_is_byte_identical(tmp_path, workdir):
    cfg = write_config(tmp_path / "c.json", SHORT)
    assert cli.main(["fit", "--scene", str(workdir / "scenes" / "scene_0000.json"), "--config", cfg,
                     "--out", str(tmp_path / "again")]) == 0
    for p in (workdir / "fit").iterdir():
        if p.name != "timing.json":
            assert p.read_bytes() == (tmp_path / "again" / p.name).read_bytes(), p.name


# ---- eval ----

def stroke_map(scene, scores=None):
    """Dense Gaussians along each GT polyline, sized to reproduce the stroke mask."""
    elems = []
    for g in scene:
        pts = g.points(80)
        d = np.gradient(pts, axis=0)
        theta = np.arctan2(d[:, 1], d[:, 0])
        theta = np.where(theta >= np.pi / 2, theta - np.pi, np.where(theta < -np.pi / 2, theta + np.pi, theta))
        params = np.column_stack([pts, np.full(80, 0.3), np.full(80, 0.35), theta])
        elems.append(MapElement(params, g.class_id, g.closed, scores))
    return GaussianMap(tuple(elems))


@pytest.fixture
def open_scene_files(tmp_path):
    spec = SceneSpec(seed=2, n_crossings=0)
    scene = generate_scene(spec)
    save_scene(scene, tmp_path / "gt.json")
    return scene, tmp_path


def run_eval(capsys, *args):
    code = cli.main(["eval", *args])
    return code, json.loads(capsys.readouterr().out)


@pytest.mark.invariant
def test_eval_perfect_and_empty(open_scene_files, capsys):
    scene, d = open_scene_files
    save_map(stroke_map(scene), d / "pred.json")
    save_map(GaussianMap(()), d / "empty.json")
    code, doc = run_eval(capsys, "--pred", str(d / "pred.json"), "--gt", str(d / "gt.json"))
    assert code == 0
    validate(doc, "metrics")
    for kind in ("ap_chamfer", "ap_raster"):
        assert doc[kind]["mean"] == 1.0
        assert doc[kind]["per_class"]["ped_crossing"] is None
    code, doc = run_eval(capsys, "--pred", str(d / "empty.json"), "--gt", str(d / "gt.json"))
    assert doc["ap_chamfer"]["mean"] == 0.0 and doc["ap_raster"]["mean"] == 0.0


def test_eval_two_predictions_one_gt(open_scene_files, capsys):
    scene, d = open_scene_files
    one = Scene(scene.grid, (scene[0],), scene.seed)
    save_scene(one, d / "one.json")
    good = stroke_map(one, scores=[0.0, 0.8, 0.0])[0]
    far = good.replace(good.params + np.array([0, 6.0, 0, 0, 0]), scores=np.array([0.0, 0.9, 0.0]))
    save_map(GaussianMap((good, far)), d / "two.json")
    _, doc = run_eval(capsys, "--pred", str(d / "two.json"), "--gt", str(d / "one.json"))
    assert doc["ap_chamfer"]["per_class"]["divider"]["ap"] == 0.5


def test_eval_multiple_scene_pairs(open_scene_files, capsys):
    scene, d = open_scene_files
    save_map(stroke_map(scene), d / "pred.json")
    code, doc = run_eval(capsys, "--pred", str(d / "pred.json"), str(d / "pred.json"),
                         "--gt", str(d / "gt.json"), str(d / "gt.json"))
    assert code == 0 and doc["ap_chamfer"]["mean"] == 1.0
    assert cli.main(["eval", "--pred", str(d / "pred.json"), "--gt", str(d / "gt.json"), str(d / "gt.json")]) == 3


# ---- sweep ----

@pytest.mark.invariant
def test_sweep_writes_tables(workdir, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"fit": {"iterations": 3, "n_gaussians": 8}})
    code = cli.main(["sweep", "--param", "lambda_r", "--values", "5,10", "--scenes", str(workdir / "scenes"),
                     "--config", cfg, "--out", str(tmp_path / "sw")])
    assert code == 0
    rows = json.loads(capsys.readouterr().out)
    assert [r["value"] for r in rows] == [5.0, 10.0]
    validate(json.loads((tmp_path / "sw" / "sweep.json").read_text()), "sweep")
    lines = (tmp_path / "sw" / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("param,value,") and len(lines) == 3


# ---- exit codes ----

def test_exit_code_missing_scene(tmp_path, capsys):
    assert cli.main(["fit", "--scene", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2
    assert "nope.json" in capsys.readouterr().err


def test_exit_code_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["generate", "--out", str(blocker / "sub")]) == 2


def test_exit_code_bad_config(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"fit": {"iterashuns": 5}})
    assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == 3
    assert "fit.iterashuns" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text("{not json")
    assert cli.main(["generate", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 3
    assert cli.main(["generate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["generate", "--count", "-1", "--out", str(tmp_path / "o")]) == 3


def test_exit_code_divergence(tmp_path, workdir, capsys):
    cfg = write_config(tmp_path / "c.json", {**SHORT, "fit": {**SHORT["fit"], "lr_log_sigma": 1e5}})
    code = cli.main(["fit", "--scene", str(workdir / "scenes" / "scene_0000.json"), "--config", cfg,
                     "--out", str(tmp_path / "o")])
    assert code == 4
    assert "diverged at iteration" in capsys.readouterr().err


# ---- config ----

def test_config_defaults_equal_module_defaults():
    cfg = RunConfig.from_dict({})
    assert cfg.fit == FitConfig() and cfg.weights == LossWeights() and cfg.eval == EvalConfig()
    assert cfg.scene == SceneSpec()
    validate(RunConfig().to_dict(), "config")
    assert RunConfig.from_dict(RunConfig().to_dict()) == RunConfig()


def test_config_overrides_and_special_values():
    cfg = RunConfig.from_dict({
        "fit": {"iterations": 7, "cutoff": "inf"},
        "weights": {"lambda_r": 0, "w_pos": None},
        "scene": {"n_crossings": 0, "grid": {"width_px": 50}},
        "eval": {"iou_thresholds_by_class": {"divider": [0.1, 0.2]}},
    })
    assert cfg.fit.iterations == 7 and cfg.fit.cutoff == float("inf")
    assert cfg.weights.lambda_r == 0.0 and cfg.weights.w_pos is None
    assert cfg.scene.grid.width_px == 50 and cfg.scene.grid.height_px == 100
    assert cfg.eval.iou_thresholds_by_class[ClassId.DIVIDER] == (0.1, 0.2)
    assert cfg.eval.iou_thresholds_by_class[ClassId.BOUNDARY] == EvalConfig().iou_thresholds_by_class[ClassId.BOUNDARY]


@pytest.mark.parametrize("doc, key", [
    ({"fitt": {}}, "fitt"),
    ({"fit": {"iterashuns": 1}}, "fit.iterashuns"),
    ({"scene": {"grid": {"depth": 3}}}, "scene.grid.depth"),
    ({"eval": {"iou_thresholds_by_class": {"lanes": [0.5]}}}, "eval.iou_thresholds_by_class.lanes"),
])
def test_config_unknown_keys_named(doc, key):
    with pytest.raises(ConfigurationError, match=key.replace(".", r"\.")):
        RunConfig.from_dict(doc)


def test_config_type_errors():
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"fit": {"iterations": "many"}})
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"weights": {"lambda_alpha": 3}})
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict([])
