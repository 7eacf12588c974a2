import copy
import json
import os
from pathlib import Path

import numpy as np
import pytest

from mdal import cli, harness
from mdal.checkpoint import load_checkpoint
from mdal.errors import ConfigurationError
from mdal.metatrain import init_state
from mdal.synthvid import load_domain

from conftest import TINY_SPEC

GOLDEN_IOU = Path(__file__).parent / "golden" / "mdal_per_frame_iou.json"
TINY_OVERRIDES = {k: list(v) if isinstance(v, tuple) else v for k, v in TINY_SPEC.items()}


def tiny_config(root: Path) -> dict:
    d = copy.deepcopy(harness.reference_config_dict())
    d.update(replicates=2, data_root=str(root / "data"), out_dir=str(root / "runs"))
    d["source"].update(num_videos=3, overrides=TINY_OVERRIDES)
    for t in d["targets"]:
        t.update(num_videos=2, overrides=TINY_OVERRIDES)
    d["meta"].update(iterations=12, decay_at=6, checkpoint_every=4, eps_range=[2, 4], alpha_init=1e-3,
                     beta_theta=3e-3, beta_alpha=1e-4)
    d["adapt"]["K"] = 2
    d["compare"]["timing_reference"] = {"strategy": "ft", "K": 6}
    return d


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    path = root / "cfg.json"
    path.write_text(json.dumps(tiny_config(root)))
    for argv in (["gen"], ["meta-train"], ["meta-train", "--mode", "base"]):
        assert cli.main(argv + ["--config", str(path)]) == 0
    return root, path


def test_reference_config_is_valid_and_complete():
    cfg = harness.RunConfig.load(None)
    assert cfg.replicates == 5 and cfg.meta.iterations == 2000
    assert [t.spec.name for t in cfg.targets] == ["tgtB", "tgtC"]
    assert cfg.source.num_videos == 8 and [t.num_videos for t in cfg.targets] == [4, 4]
    assert cfg.timing_reference == ("ft", 100)


def test_bundled_config_matches_repo_copy():
    repo = Path(__file__).parents[1] / "configs" / "reference.json"
    assert json.loads(repo.read_text()) == harness.reference_config_dict()


@pytest.mark.parametrize("mutate, where", [
    (lambda d: d.update(bogus=1), "<root>"),
    (lambda d: d["meta"].update(iterations=-1), "meta/iterations"),
    (lambda d: d["source"].update(spec="srcZ"), "source/spec"),
    (lambda d: d["adapt"].update(strategy="magic"), "adapt/strategy"),
])
def test_invalid_configs_name_the_field(mutate, where):
    d = copy.deepcopy(harness.reference_config_dict())
    mutate(d)
    with pytest.raises(ConfigurationError, match=where):
        harness.RunConfig.from_dict(d)


def test_duplicate_domains_rejected():
    d = copy.deepcopy(harness.reference_config_dict())
    d["targets"][1]["spec"] = "tgtB"
    with pytest.raises(ConfigurationError, match="distinct"):
        harness.RunConfig.from_dict(d)


def test_replicates_vary_training_seed_only():
    cfg = harness.RunConfig.load(None).with_overrides(seed=10)
    assert cfg.meta_config(3).seed == 13 and cfg.adapt_config(3).seed == 13
    assert cfg.checkpoint_path("meta", 3).name == "meta_r3.mdal"


def test_grid_collapses_none():
    cells = harness.grid(["none", "ft"], [0, 5])
    assert cells == [("none", 0), ("ft", 0), ("ft", 5)]
    with pytest.raises(ConfigurationError):
        harness.grid(["best"], [1])


def test_gen_layout_and_refusal(pipeline, capsys):
    root, path = pipeline
    assert [len(load_domain(root / "data" / n)) for n in ("srcA", "tgtB", "tgtC")] == [3, 2, 2]
    assert (root / "data" / "tgtB" / "video_0000" / "mask_000001.pgm").exists()
    assert cli.main(["gen", "--config", str(path)]) == 2
    assert "--force" in capsys.readouterr().err


def test_gen_reference_counts(tmp_path):
    d = harness.reference_config_dict()
    d["data_root"] = str(tmp_path)
    for e in [d["source"], *d["targets"]]:
        e["overrides"] = {"length": 2}
    out = harness.gen(harness.RunConfig.from_dict(d))
    assert [(r["domain"], r["videos"]) for r in out] == [("srcA", 8), ("tgtB", 4), ("tgtC", 4)]


def test_gen_is_byte_identical(pipeline, tmp_path):
    root, path = pipeline
    assert cli.main(["gen", "--config", str(path), "--out", str(tmp_path)]) == 0
    for f in sorted((root / "data").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / f.relative_to(root / "data")).read_bytes(), f


def test_training_outputs(pipeline):
    root, _ = pipeline
    ck = root / "runs" / "checkpoints"
    names = sorted(p.name for p in ck.iterdir())
    assert names == sorted(f"{k}_r{r}{s}" for k in ("meta", "base") for r in (0, 1) for s in (".mdal", ".curve.csv"))
    s = load_checkpoint(ck / "meta_r1.mdal")
    assert s.iteration == 12 and s.flags["kind"] == "meta" and s.flags["seed"] == 1
    rows = (ck / "meta_r0.curve.csv").read_text().splitlines()
    assert rows[0] == "iteration,meta_train_loss,meta_test_loss,mean_alpha,learning_rate" and len(rows) == 13


def test_existing_checkpoint_needs_flag(pipeline):
    _, path = pipeline
    assert cli.main(["meta-train", "--config", str(path), "--replicate", "0"]) == 2


def test_meta_train_rerun_is_byte_identical_and_resume_matches(pipeline, tmp_path):
    root, path = pipeline
    out = tmp_path / "runs"
    assert cli.main(["meta-train", "--config", str(path), "--out", str(out), "--replicate", "0"]) == 0
    ref = root / "runs" / "checkpoints"
    assert (out / "checkpoints" / "meta_r0.mdal").read_bytes() == (ref / "meta_r0.mdal").read_bytes()
    cfg = harness.RunConfig.load(path).with_overrides(out_dir=tmp_path / "resumed")
    harness.train(cfg, "meta", [0], stop_at=5)
    assert cli.main(["meta-train", "--config", str(path), "--out", str(tmp_path / "resumed"),
                     "--replicate", "0", "--resume"]) == 0
    got = tmp_path / "resumed" / "checkpoints"
    assert (got / "meta_r0.mdal").read_bytes() == (ref / "meta_r0.mdal").read_bytes()
    assert (got / "meta_r0.curve.csv").read_bytes() == (ref / "meta_r0.curve.csv").read_bytes()


def test_zero_iteration_training_gives_init(pipeline, tmp_path):
    _, path = pipeline
    d = json.loads(path.read_text())
    d["meta"]["iterations"] = 0
    d["out_dir"] = str(tmp_path)
    cfg = harness.RunConfig.from_dict(d)
    harness.train(cfg, "meta", [0])
    assert load_checkpoint(cfg.checkpoint_path("meta", 0)).bitwise_equal(init_state(cfg.meta_config(0)))


def test_resume_wrong_kind_rejected(pipeline, tmp_path):
    root, path = pipeline
    (tmp_path / "checkpoints").mkdir()
    (tmp_path / "checkpoints" / "meta_r0.mdal").write_bytes((root / "runs/checkpoints/base_r0.mdal").read_bytes())
    assert cli.main(["meta-train", "--config", str(path), "--out", str(tmp_path), "--replicate", "0",
                     "--resume"]) == 2


def _adapt(path, out, *extra):
    return cli.main(["adapt", "--config", str(path), "--out", str(out), *extra])


def test_adapt_outputs_and_determinism(pipeline, tmp_path):
    _, path = pipeline
    assert _adapt(path, tmp_path / "a") == 0
    assert _adapt(path, tmp_path / "b") == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert Path("tgtB/video_0000/pred_000002.pgm") in files
    assert Path("tgtB/video_0000/pred_000001.pgm") not in files
    assert Path("tgtC/report.json") in files and Path("tgtC/trace_video_0001.csv") in files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    assert _adapt(path, tmp_path / "a") == 2


def test_mdal_per_frame_iou_golden(pipeline, tmp_path):
    _, path = pipeline
    assert _adapt(path, tmp_path, "--domain", "tgtB") == 0
    rep = json.loads((tmp_path / "tgtB" / "report.json").read_text())
    got = {v["name"]: v["iou"] for v in rep["videos"]}
    if os.environ.get("MDAL_REGEN_GOLDEN") or not GOLDEN_IOU.exists():
        GOLDEN_IOU.write_text(json.dumps(got, indent=1) + "\n")
    want = json.loads(GOLDEN_IOU.read_text())
    assert got.keys() == want.keys()
    for k in want:
        np.testing.assert_allclose(got[k], want[k], rtol=0, atol=1e-12)


def test_eval_rescores_stored_predictions(pipeline, tmp_path):
    _, path = pipeline
    assert _adapt(path, tmp_path / "p", "--strategy", "meta") == 0
    assert cli.main(["eval", "--config", str(path), "--pred", str(tmp_path / "p"),
                     "--out", str(tmp_path / "e")]) == 0
    a = json.loads((tmp_path / "p" / "tgtC" / "report.json").read_text())
    b = json.loads((tmp_path / "e" / "tgtC" / "report.json").read_text())
    assert a["dataset"]["mean_iou"] == pytest.approx(b["dataset"]["mean_iou"], abs=1e-12)


def test_adapt_without_checkpoint(pipeline, tmp_path):
    _, path = pipeline
    assert _adapt(path, tmp_path / "x", "--checkpoint", str(tmp_path / "missing.mdal")) == 2


def test_compare_table_shape(pipeline, tmp_path):
    _, path = pipeline
    assert cli.main(["compare", "--config", str(path), "--out", str(tmp_path), "--replicates", "1",
                     "--strategies", "ft", "meta", "mdal", "--K", "0", "1", "3", "5", "7", "10",
                     "--no-timing-reference"]) == 0
    lines = (tmp_path / "compare.csv").read_text().splitlines()
    assert lines[0].startswith("strategy,K,iou,iou_std,dice,iou_tgtB,iou_tgtC")
    assert len(lines) == 1 + 18
    reps = (tmp_path / "compare_replicates.csv").read_text().splitlines()
    assert len(reps) == 1 + 18 * 3


def test_compare_timing_reference_row_added(pipeline, tmp_path):
    cfg = harness.RunConfig.load(pipeline[1])
    rows = harness.compare(cfg, cells=[("none", 0), ("meta", 0)], replicates=[0], out=tmp_path)
    table = harness.summarize(rows)
    assert [(t["strategy"], t["K"]) for t in table] == [("none", 0), ("meta", 0), ("ft", 6)]
    # none reads the base checkpoint, meta the meta-trained one
    assert harness.lookup(table, "none", 0)["iou_mean"] != harness.lookup(table, "meta", 0)["iou_mean"]


def test_unknown_subcommand_exits():
    with pytest.raises(SystemExit):
        cli.main(["train"])


def test_bad_config_path(tmp_path):
    assert cli.main(["gen", "--config", str(tmp_path / "none.json")]) == 2
