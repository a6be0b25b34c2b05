import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fighter_traj.data import (
    DataError,
    Scene,
    SynthScenario,
    load_csv,
    lowpass,
    make_windows,
    read_manifest,
    resample,
    split,
    synth_generate,
    write_csv,
    write_manifest,
)

HEADER = "time_s,fighter_id,x_m,y_m,z_m\n"


def test_load_minimal_file(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text(HEADER + "0,F1,1,2,3\n1,F1,4,5,6\n")
    tracks = load_csv(p)
    assert list(tracks) == ["F1"]
    assert tracks["F1"].tolist() == [[0, 1, 2, 3], [1, 4, 5, 6]]


def test_extra_columns_are_ignored(tmp_path, caplog):
    plain, extra = tmp_path / "a.csv", tmp_path / "b.csv"
    plain.write_text(HEADER + "0,F1,1,2,3\n1,F1,4,5,6\n")
    extra.write_text("roll_deg,time_s,fighter_id,x_m,y_m,z_m,speed\n"
                     "10,0,F1,1,2,3,250\n11,1,F1,4,5,6,251\n")
    with caplog.at_level(logging.INFO):
        b = load_csv(extra)
    assert "roll_deg" in caplog.text
    assert np.array_equal(load_csv(plain)["F1"], b["F1"])


def test_rows_are_sorted_by_time(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text(HEADER + "2,F1,2,0,0\n0,F1,0,0,0\n1,F2,5,5,5\n1,F1,1,0,0\n")
    tracks = load_csv(p)
    assert tracks["F1"][:, 0].tolist() == [0, 1, 2]
    assert tracks["F2"].shape == (1, 4)


@pytest.mark.parametrize("text, match", [
    ("", "empty"),
    ("time_s,fighter_id,x_m,y_m\n0,F1,1,2\n", "z_m"),
    (HEADER + "0,F1,1,abc,3\n", r"row 2, column y_m"),
    (HEADER, "no data"),
])
def test_csv_errors(tmp_path, text, match):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(DataError, match=match):
        load_csv(p)


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tracks = {f"F{i}": np.column_stack([np.arange(20.0) * 0.37, rng.normal(scale=1e4, size=(20, 3))])
              for i in range(3)}
    write_csv(tracks, tmp_path / "t.csv")
    back = load_csv(tmp_path / "t.csv")
    assert list(back) == list(tracks)
    for k in tracks:
        np.testing.assert_allclose(back[k], tracks[k], rtol=0, atol=1e-9)


def test_manifest_round_trip(tmp_path):
    write_manifest([("a.csv", "mutation"), ("sub/b.csv", "")], tmp_path / "m.txt")
    entries = read_manifest(tmp_path / "m.txt")
    assert entries == [(tmp_path / "a.csv", "mutation"), (tmp_path / "sub/b.csv", "all")]


# ---------------------------------------------------------------------------
# lowpass

def test_lowpass_identity_and_fixed_point():
    x = np.random.default_rng(1).normal(size=(30, 3))
    assert np.array_equal(lowpass(x, 1.0), x)
    c = np.full((12, 3), 7.25)
    np.testing.assert_array_equal(lowpass(c, 0.3), c)


def test_lowpass_impulse_response():
    x = np.zeros((6, 1))
    x[1] = 1.0
    y = lowpass(x, 0.3)[:, 0]
    expected = [0.0] + [0.3 * 0.7 ** k for k in range(5)]
    np.testing.assert_allclose(y, expected, rtol=0, atol=1e-15)
    np.testing.assert_allclose(y[:4], [0, 0.3, 0.21, 0.147], atol=1e-15)


@pytest.mark.parametrize("alpha", [0.0, -0.1, 1.5])
def test_lowpass_rejects_bad_alpha(alpha):
    with pytest.raises(ValueError):
        lowpass(np.zeros((3, 3)), alpha)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 40), st.integers(1, 3)),
              elements=st.floats(-1e6, 1e6)),
       st.floats(0.01, 1.0))
def test_lowpass_never_amplifies(x, alpha):
    y = lowpass(x, alpha)
    tol = 1e-9 * (1 + np.abs(x).max())
    assert np.all(y >= x.min(axis=0) - tol) and np.all(y <= x.max(axis=0) + tol)


# ---------------------------------------------------------------------------
# resample

def test_resample_uniform_is_unchanged():
    t = np.arange(10.0)
    tracks = {"A": np.column_stack([t, np.random.default_rng(2).normal(size=(10, 3))])}
    sc = resample(tracks, 1.0)
    assert np.array_equal(sc.times, t)
    np.testing.assert_array_equal(sc.positions[0], tracks["A"][:, 1:])


def test_resample_two_points_linear():
    sc = resample({"A": np.array([[0, 0, 0, 0], [10, 10, 0, 0]], dtype=float)}, 1.0)
    np.testing.assert_allclose(sc.positions[0, :, 0], np.arange(11.0), atol=1e-12)


def test_resample_against_analytic_interpolant():
    rng = np.random.default_rng(3)
    knots = np.sort(rng.uniform(0, 50, size=12))
    knots[0], knots[-1] = 0.0, 50.0
    vals = rng.normal(scale=500, size=(12, 3))
    sc = resample({"A": np.column_stack([knots, vals])}, 0.7)
    for t, p in zip(sc.times, sc.positions[0]):
        j = min(np.searchsorted(knots, t, side="right") - 1, len(knots) - 2)
        w = (t - knots[j]) / (knots[j + 1] - knots[j])
        np.testing.assert_allclose(p, (1 - w) * vals[j] + w * vals[j + 1], atol=1e-9)


def test_resample_uses_common_interval_and_drops_short_tracks(caplog):
    tracks = {
        "A": np.array([[0, 0, 0, 0], [10, 10, 0, 0]], dtype=float),
        "B": np.array([[2, 0, 0, 0], [20, 18, 0, 0]], dtype=float),
        "C": np.array([[5, 1, 1, 1]], dtype=float),
    }
    with caplog.at_level(logging.INFO):
        sc = resample(tracks, 1.0)
    assert "C" in caplog.text
    assert sc.fighter_ids == ["A", "B"]
    assert sc.times.tolist() == list(np.arange(2.0, 11.0))


def test_resample_errors():
    with pytest.raises(DataError, match="common"):
        resample({"A": np.array([[0, 0, 0, 0], [1, 1, 0, 0]], float),
                  "B": np.array([[5, 0, 0, 0], [6, 1, 0, 0]], float)}, 1.0)
    with pytest.raises(DataError):
        resample({"A": np.array([[0, 0, 0, 0], [0, 1, 0, 0]], float)}, 1.0)


# ---------------------------------------------------------------------------
# windows and split

def scene_of(length, n=2, seed=0, name="s"):
    rng = np.random.default_rng(seed)
    return Scene(np.arange(float(length)), rng.normal(scale=3000, size=(n, length, 3)),
                 [f"F{i}" for i in range(n)], name=name)


def test_window_counts():
    assert len(make_windows(scene_of(16))) == 1
    assert len(make_windows(scene_of(17))) == 2
    assert len(make_windows(scene_of(30), stride=3)) == 5
    assert make_windows(scene_of(15)) == []


def test_windows_round_trip_and_continuity():
    sc = scene_of(25, n=3)
    for w in make_windows(sc):
        s = w.start
        np.testing.assert_allclose(w.denormalize(w.input), sc.positions[:, s:s + 8], atol=1e-9)
        np.testing.assert_allclose(w.denormalize(w.target), sc.positions[:, s + 8:s + 16], atol=1e-9)
        np.testing.assert_allclose(w.normalize(w.denormalize(w.target)), w.target, atol=1e-12)
        assert w.input_times[-1] + sc.dt == w.target_times[0]
        np.testing.assert_allclose(w.input[:, -1].mean(axis=0), 0.0, atol=1e-12)
        assert w.input.shape == (3, 8, 3) and w.target.shape == (3, 8, 3)


@pytest.mark.parametrize("total, expected", [(10, 8), (5, 4)])
def test_split_ratio_before_dropping(total, expected):
    samples = [make_windows(scene_of(16, name=f"s{k}"))[0] for k in range(total)]
    res = split(samples)
    assert len(res.train) == expected and len(res.test) == total - expected
    assert res.dropped == []


def test_split_has_no_shared_timestamps_within_a_scene():
    windows = make_windows(scene_of(120))
    res = split(windows)
    train_t = set()
    for w in res.train:
        train_t.update(w.input_times.tolist() + w.target_times.tolist())
    for w in res.test:
        assert not train_t & set(w.input_times.tolist() + w.target_times.tolist())
    assert len(res.train) + len(res.test) + len(res.dropped) == len(windows)
    assert res.test, "a long scene keeps some test windows"
    train, test = res
    assert train is res.train and test is res.test


def test_split_across_scenes_drops_only_at_the_cut():
    windows = []
    for k in range(5):
        windows += make_windows(scene_of(25, name=f"s{k}"))  # 10 windows each
    res = split(windows)
    assert len(res.train) == 40
    assert [w.scene for w in res.test] == ["s4"] * 10
    assert res.dropped == []
    res = split(windows[:-3])
    assert {w.scene for w in res.dropped} == {"s3"}
    assert {w.scene for w in res.test} == {"s4"}


def test_split_rejects_empty():
    with pytest.raises(ValueError):
        split([])


# ---------------------------------------------------------------------------
# synthetic scenes

def test_synth_is_bitwise_reproducible():
    for kind in ("straight", "level_turn", "mutation", "pursuit"):
        scenario = SynthScenario(kind=kind, n=3, duration=40, noise=10, seed=5)
        a, b = synth_generate(scenario), synth_generate(scenario)
        assert a.positions.tobytes() == b.positions.tobytes()
        assert a.fighter_ids == ["F1", "F2", "F3"] and a.kind == kind


def test_synth_seed_changes_scene():
    a = synth_generate(SynthScenario(seed=1)).positions
    b = synth_generate(SynthScenario(seed=2)).positions
    assert not np.array_equal(a, b)


def test_straight_is_collinear():
    sc = synth_generate(SynthScenario(kind="straight", n=3, duration=50, seed=7))
    for track in sc.positions:
        d = track - track[0]
        u = d[-1] / np.linalg.norm(d[-1])
        resid = d - np.outer(d @ u, u)
        assert np.abs(resid).max() < 1e-9 * (1 + np.abs(track).max())


def circle_fit(xy):
    # algebraic least-squares circle: x^2 + y^2 + a x + b y + c = 0
    A = np.column_stack([xy, np.ones(len(xy))])
    rhs = -(xy ** 2).sum(axis=1)
    a, b, c = np.linalg.lstsq(A, rhs, rcond=None)[0]
    centre = np.array([-a / 2, -b / 2])
    return centre, np.sqrt(centre @ centre - c)


def test_level_turn_stays_on_a_circle():
    sc = synth_generate(SynthScenario(kind="level_turn", n=2, duration=60, seed=9))
    for track in sc.positions:
        centre, r = circle_fit(track[:, :2])
        dist = np.linalg.norm(track[:, :2] - centre, axis=1)
        assert np.abs(dist - r).max() < 1e-6
        assert np.ptp(track[:, 2]) == 0.0
        speed = np.linalg.norm(np.diff(track, axis=0), axis=1)
        np.testing.assert_allclose(speed, speed[0], rtol=1e-9)


def heading_changes(track):
    seg = np.diff(track, axis=0)
    u = seg / np.linalg.norm(seg, axis=1, keepdims=True)
    return np.degrees(np.arccos(np.clip((u[1:] * u[:-1]).sum(axis=1), -1, 1)))


@pytest.mark.parametrize("seed", range(8))
def test_mutation_has_exactly_one_sharp_turn(seed):
    sc = synth_generate(SynthScenario(kind="mutation", n=2, duration=30, seed=seed))
    for track in sc.positions:
        turns = heading_changes(track)
        sharp = np.flatnonzero(turns > 30.0)
        assert len(sharp) == 1
        assert 0 < sharp[0] + 1 < len(track) - 1


def test_pursuit_followers_close_on_the_leader():
    sc = synth_generate(SynthScenario(kind="pursuit", n=3, duration=60, seed=4, leader_kind="straight"))
    lead = sc.positions[0]
    for f in sc.positions[1:]:
        step = np.linalg.norm(np.diff(f, axis=0), axis=1)
        assert np.all(step > 200) and np.all(step < 330)
        turns = heading_changes(f)
        assert turns.max() < 15.0 + 1e-6
        assert np.linalg.norm(f[-1] - lead[-1]) < np.linalg.norm(f[0] - lead[0]) + 3000


def test_synth_noise_sigma():
    clean = synth_generate(SynthScenario(kind="straight", n=4, duration=200, seed=3))
    noisy = synth_generate(SynthScenario(kind="straight", n=4, duration=200, seed=3, noise=10))
    resid = noisy.positions - clean.positions
    assert abs(resid.std() - 10.0) < 0.5


def test_synth_validation():
    with pytest.raises(ValueError, match="valid kinds"):
        SynthScenario(kind="barrel_roll")
    with pytest.raises(ValueError):
        SynthScenario(n=0)
    assert math.isclose(synth_generate(SynthScenario(duration=10)).dt, 1.0)
