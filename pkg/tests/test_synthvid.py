import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mdal import synthvid as sv
from mdal.errors import ConfigurationError, LoadError

import oracles
from conftest import tiny_spec


def test_render_is_deterministic():
    s = tiny_spec()
    a, b = sv.render_sequence(s, 5), sv.render_sequence(s, 5)
    assert a == b
    assert not a == sv.render_sequence(s, 6)


def test_reference_shapes_and_ranges():
    v = sv.render_sequence(sv.REFERENCE_SPECS["srcA"], 0)
    assert v.frames.shape == (40, 64, 64, 3) and v.masks.shape == (40, 64, 64)
    assert v.frames.min() >= 0 and v.frames.max() <= 1
    assert set(np.unique(v.masks)) <= {0, 1}
    fg = v.masks.mean(axis=(1, 2))
    assert np.all(fg > 0.01) and np.all(fg < 0.6)


def test_frames_are_8bit_exact():
    v = sv.render_sequence(tiny_spec(), 1)
    np.testing.assert_array_equal(np.round(v.frames * 255) / 255, v.frames)


@pytest.mark.parametrize("kw", [dict(height=8), dict(length=1), dict(tool_width=(1.0, 3.0)),
                                dict(speed=(2.0, 1.0)), dict(burst_prob=1.5), dict(palette_jitter=-0.1),
                                dict(illumination_drift=(0.1, 0.0))])
def test_spec_validation(kw):
    with pytest.raises(ConfigurationError):
        tiny_spec(**kw).validate()


def test_spec_dict_roundtrip():
    s = sv.REFERENCE_SPECS["tgtC"]
    assert sv.DomainSpec.from_dict(s.to_dict()) == s
    with pytest.raises(ConfigurationError):
        sv.DomainSpec.from_dict({"colour": 1})


def test_source_and_targets_differ_in_color():
    for seed in range(10):
        src = sv.render_sequence(sv.REFERENCE_SPECS["srcA"], seed).frames.mean(axis=(0, 1, 2))
        for name in ("tgtB", "tgtC"):
            tgt = sv.render_sequence(sv.REFERENCE_SPECS[name], seed).frames.mean(axis=(0, 1, 2))
            assert np.abs(src - tgt).max() > 0.05, (seed, name)


def test_shift_dial_interpolates_palette():
    s = sv.REFERENCE_SPECS["srcA"]
    assert sv.shift_palette(s, 0.0).bg_color == pytest.approx(s.bg_color)
    one = sv.shift_palette(s, 1.0)
    assert one.bg_color != s.bg_color and one.name == "srcA-shift1"


@given(p0=st.tuples(st.floats(8, 24), st.floats(8, 24)), p1=st.tuples(st.floats(8, 24), st.floats(8, 24)),
       r=st.floats(2.5, 5), deg=st.floats(-10, 10))
def test_rotate_back_preserves_capsules(p0, p1, r, deg):
    if np.hypot(p0[0] - p1[0], p0[1] - p1[1]) < 1e-3:
        return
    m = oracles.capsule(32, 32, p0, p1, r)
    f = np.repeat(m[..., None], 3, axis=2).astype(np.float64)
    f2, m2 = sv.rotate_pair(f, m, deg)
    _, m3 = sv.rotate_pair(f2, m2, -deg)
    assert oracles.iou(m3, m) >= 0.95


def test_rotate_zero_is_identity():
    v = sv.render_sequence(tiny_spec(), 2)
    f, m = sv.rotate_pair(v.frames[0], v.masks[0], 0.0)
    np.testing.assert_allclose(f, v.frames[0], atol=1e-12)
    np.testing.assert_array_equal(m, v.masks[0])


def test_augment_flags():
    v = sv.render_sequence(tiny_spec(), 2)
    rng = np.random.default_rng(0)
    f, m = sv.augment_pair(v.frames[0], v.masks[0], (), rng)
    assert np.array_equal(f, v.frames[0]) and np.array_equal(m, v.masks[0])
    f, m = sv.augment_pair(v.frames[0], v.masks[0], ("hflip",), rng, p=1.0)
    assert np.array_equal(m, v.masks[0][:, ::-1])
    f2, m2 = sv.augment_pair(f, m, ("hflip",), rng, p=1.0)
    assert np.array_equal(f2, v.frames[0]) and np.array_equal(m2, v.masks[0])
    f, _ = sv.augment_pair(v.frames[0], v.masks[0], ("brightness",), rng, p=1.0, max_brightness=0.9)
    assert f.min() >= 0 and f.max() <= 1
    with pytest.raises(ConfigurationError):
        sv.augment_pair(v.frames[0], v.masks[0], ("zoom",), rng)


def test_save_load_roundtrip_one_based(tmp_path):
    v = sv.render_sequence(tiny_spec(), 3)
    sv.save_video(v, tmp_path / "v")
    names = sorted(p.name for p in (tmp_path / "v").iterdir())
    assert names[0] == "frame_000001.ppm" and "mask_000008.pgm" in names and "frame_000000.ppm" not in names
    w = sv.load_video(tmp_path / "v")
    assert w == v
    assert w.meta["seed"] == 3


def test_target_needs_only_first_mask(tmp_path):
    v = sv.render_sequence(tiny_spec("tgtB"), 3)
    sv.save_video(sv.Video(v.frames, v.masks[:1]), tmp_path / "v")
    t = sv.load_video(tmp_path / "v", role="target")
    assert t.masks.shape[0] == 1 and not t.fully_labeled
    with pytest.raises(LoadError):
        sv.load_video(tmp_path / "v", role="source")


def test_partially_labeled_target_rejected(tmp_path):
    v = sv.render_sequence(tiny_spec("tgtB"), 3)
    sv.save_video(v, tmp_path / "v")
    (tmp_path / "v" / "mask_000004.pgm").unlink()
    with pytest.raises(LoadError):
        sv.load_video(tmp_path / "v", role="target")


def test_missing_first_mask_rejected(tmp_path):
    v = sv.render_sequence(tiny_spec("tgtB"), 3)
    sv.save_video(v, tmp_path / "v")
    (tmp_path / "v" / "mask_000001.pgm").unlink()
    with pytest.raises(LoadError):
        sv.load_video(tmp_path / "v", role="target")


@pytest.mark.parametrize("payload", [b"P6\n4 4\n255\n" + b"\0" * 10, b"P3\n1 1\n255\n\0\0\0", b"P6\n1 1\n65535\n"])
def test_malformed_netpbm(tmp_path, payload):
    p = tmp_path / "x.ppm"
    p.write_bytes(payload)
    with pytest.raises(LoadError):
        sv.read_ppm(p)


def test_netpbm_comments_and_maxval(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(b"P5\n# comment\n2 1\n15\n\x0f\x00")
    np.testing.assert_array_equal(sv.read_pgm(p), [[1, 0]])


def test_meta_length_mismatch(tmp_path):
    v = sv.render_sequence(tiny_spec(), 3)
    sv.save_video(v, tmp_path / "v")
    meta = json.loads((tmp_path / "v" / "meta.json").read_text())
    meta["T"] = 5
    (tmp_path / "v" / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(LoadError):
        sv.load_video(tmp_path / "v")


def test_generate_dataset_manifest(tmp_path):
    out = sv.generate_dataset(tiny_spec(), 10, 2, tmp_path)
    man = json.loads((out / "manifest.json").read_text())
    assert man["videos"] == ["video_0000", "video_0001"]
    vids = sv.load_domain(out)
    assert vids[1] == sv.render_sequence(tiny_spec(), 11)
