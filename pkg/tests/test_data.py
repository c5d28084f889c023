import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fourfield.data import (Corpus, CorpusError, blink_brightness, bounce_center, corpus_stats, dt_law,
                            fold, frame_brightness, frame_times, generate_corpus, make_clip,
                            orbit_yaws, pair_indices, read_kv, sample_real_frames, sample_real_pair,
                            sample_real_pairs)
from fourfield.imageio import quantize, read_pgm, read_ppm, write_pgm, write_ppm


@pytest.fixture(scope="module")
def blink(tmp_path_factory):
    return generate_corpus("blink", 6, 16, 8, 8, 3, tmp_path_factory.mktemp("blink"))


def test_quantize_rounds_half_up():
    np.testing.assert_array_equal(quantize(np.array([0.0, 0.5 / 255, 1.5 / 255, 1.0, 1.2, -0.1])),
                                  [0, 1, 2, 255, 255, 0])


def test_netpbm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3)).astype(np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    g = img[..., 0]
    write_pgm(tmp_path / "a.pgm", g)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), g)
    (tmp_path / "bad.ppm").write_bytes(b"P6\n7 5\n255\n" + img.tobytes()[:-3])
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "bad.ppm")


def test_blink_brightness_law(blink):
    data = blink.frames_float()
    t = frame_times(16)
    for i in range(blink.clips):
        meta = read_kv(blink.clip_dir(i) / "meta.txt")
        _, p = make_clip("blink", i, 16, 8, 8, 3)
        assert float(meta["base"]) == pytest.approx(p["base"], rel=1e-15)
        expected = blink_brightness(p, t)
        assert np.abs(frame_brightness(data[i]) - expected).max() <= 1 / 255


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.floats(0.0, 1.0))
def test_bounce_reflection(seed, t):
    _, p = make_clip("bounce", seed, 2, 4, 4, 0)
    r = p["radius"]
    c = bounce_center(p, t)
    assert np.all(c >= r - 1e-12) and np.all(c <= 1 - r + 1e-12)
    # unfolding: the free-flight coordinate maps to c through an even number of reflections
    free = p["start"] + p["velocity"] * t
    span = 1 - 2 * r
    k = np.floor((free - r) / span)
    mirrored = np.where(k % 2 == 0, r + (free - r - k * span), 1 - r - (free - r - k * span))
    np.testing.assert_allclose(c, mirrored, atol=1e-12)


def test_fold_examples():
    np.testing.assert_allclose(fold(np.array([0.5, 1.2, -0.3, 2.5]), 0.0, 1.0), [0.5, 0.8, 0.3, 0.5])


def test_orbit_metadata(tmp_path):
    c = generate_corpus("orbit", 2, 5, 8, 8, 1, tmp_path)
    meta = read_kv(c.clip_dir(1) / "meta.txt")
    _, p = make_clip("orbit", 1, 5, 8, 8, 1)
    yaws = [float(v) for v in meta["camera_yaw"].split(",")]
    np.testing.assert_allclose(yaws, orbit_yaws(p, frame_times(5)), rtol=1e-15)


def test_regeneration_is_byte_identical(tmp_path):
    a = generate_corpus("bounce", 3, 4, 6, 6, 11, tmp_path / "a")
    b = generate_corpus("bounce", 3, 4, 6, 6, 11, tmp_path / "b")
    files = sorted(p.relative_to(a.root) for p in a.root.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b.root) for p in b.root.rglob("*") if p.is_file())
    for f in files:
        assert (a.root / f).read_bytes() == (b.root / f).read_bytes()


def test_generate_errors(tmp_path):
    with pytest.raises(CorpusError):
        generate_corpus("waves", 2, 4, 4, 4, 0, tmp_path)
    with pytest.raises(CorpusError):
        generate_corpus("blink", 0, 4, 4, 4, 0, tmp_path)


def test_manifest_validation(tmp_path):
    c = generate_corpus("blink", 2, 4, 4, 4, 0, tmp_path)
    (c.clip_dir(1) / "frame_03.ppm").unlink()
    with pytest.raises(CorpusError):
        Corpus.load(tmp_path)
    with pytest.raises(CorpusError):
        Corpus.load(tmp_path / "nowhere")


def test_pairs_are_ordered(blink):
    rng = np.random.default_rng(0)
    pair = sample_real_pairs(blink, rng, 500)
    assert (pair.dt > 0).all()
    one = sample_real_pair(blink, rng)
    assert one.frame_a.shape == (8, 8, 3) and one.dt.shape == (1,)


def test_dt_law_enumeration():
    F = 16
    pairs = list(itertools.combinations(range(F), 2))
    counts = {}
    for i, j in pairs:
        counts[j - i] = counts.get(j - i, 0) + 1
    law = dt_law(F)
    for k, c in counts.items():
        assert law[k] == pytest.approx(c / len(pairs), rel=1e-15)
        assert law[k] == pytest.approx(2 * (F - k) / (F * (F - 1)), rel=1e-15)


def test_dt_distribution_matches_law():
    F = 16
    i, j = pair_indices(F, np.random.default_rng(0), 100_000)
    assert (j > i).all()
    emp = np.bincount(j - i, minlength=F)[1:] / len(i)
    law = np.array([dt_law(F)[k] for k in range(1, F)])
    # 4-sigma binomial band per bin
    sigma = np.sqrt(law * (1 - law) / len(i))
    assert np.all(np.abs(emp - law) < 4 * sigma)


def test_unordered_pairs_uniform():
    i, j = pair_indices(4, np.random.default_rng(1), 60_000)
    counts = np.bincount(i * 4 + j, minlength=16).reshape(4, 4)
    nz = counts[np.triu_indices(4, 1)]
    assert counts[np.tril_indices(4)].sum() == 0
    assert np.abs(nz / len(i) - 1 / 6).max() < 0.01


def test_two_frame_corpus(tmp_path):
    c = generate_corpus("blink", 2, 2, 4, 4, 0, tmp_path)
    assert (sample_real_pairs(c, np.random.default_rng(0), 50).dt == 1.0).all()


def test_real_frames(blink):
    f = sample_real_frames(blink, np.random.default_rng(0), 5)
    assert f.shape == (5, 8, 8, 3) and f.min() >= 0 and f.max() <= 1


def test_stats_constant_black(tmp_path):
    c = generate_corpus("blink", 2, 3, 4, 4, 0, tmp_path)
    c._cache = np.zeros_like(c.uint8())
    s = corpus_stats(c)
    assert (s.channel_mean == 0).all() and (s.channel_std == 0).all()
    assert s.temporal_energy == 0 and s.brightness_std == 0


def test_stats_against_float_reference(blink):
    s = corpus_stats(blink)
    data = blink.frames_float()
    np.testing.assert_allclose(s.channel_mean, data.reshape(-1, 3).mean(0), rtol=1e-12)
    np.testing.assert_allclose(s.channel_std, data.reshape(-1, 3).std(0), rtol=1e-9)
    b = frame_brightness(data.reshape((-1,) + data.shape[2:]))
    assert s.brightness_mean == pytest.approx(b.mean(), rel=1e-12)
    assert s.brightness_std == pytest.approx(b.std(), rel=1e-9)
    assert s.temporal_energy > 0
    assert s.temporal_energy == pytest.approx(np.mean(np.diff(data, axis=1) ** 2), rel=1e-12)


def test_stats_order_invariant(blink):
    s = corpus_stats(blink)
    shuffled = Corpus(blink.root, blink.kind, blink.clips, blink.frames, blink.height, blink.width, blink.seed)
    shuffled._cache = blink.uint8()[::-1].copy()
    t = corpus_stats(shuffled)
    assert s.channel_mean.tobytes() == t.channel_mean.tobytes()
    assert s.brightness_std == t.brightness_std and s.temporal_energy == t.temporal_energy
