"""Track ingestion, filtering, windowing and a synthetic air-combat scene generator."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("time_s", "fighter_id", "x_m", "y_m", "z_m")
SYNTH_KINDS = ("straight", "level_turn", "mutation", "pursuit")


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# CSV

def load_csv(path) -> dict[str, np.ndarray]:
    """Read ``time_s,fighter_id,x_m,y_m,z_m`` rows into per-fighter ``[k, 4]`` arrays.

    Rows of each fighter are sorted by time. Extra columns are ignored.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing required column(s) {', '.join(missing)}")
        extra = [c for c in header if c not in REQUIRED_COLUMNS]
        if extra:
            log.info("%s: ignoring extra columns %s", path, ", ".join(extra))
        col = {c: header.index(c) for c in REQUIRED_COLUMNS}
        rows: dict[str, list] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            fid = row[col["fighter_id"]].strip()
            vals = []
            for c in ("time_s", "x_m", "y_m", "z_m"):
                cell = row[col[c]] if col[c] < len(row) else ""
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: row {lineno}, column {c}: non-numeric value {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: row {lineno}, column {c}: non-finite value {cell!r}")
                vals.append(v)
            rows.setdefault(fid, []).append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    tracks = {}
    for fid, vals in rows.items():
        arr = np.array(vals, dtype=np.float64)
        tracks[fid] = arr[np.argsort(arr[:, 0], kind="stable")]
    return tracks


def tracks_csv(tracks: dict[str, np.ndarray]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REQUIRED_COLUMNS)
    rows = []
    for fid, arr in tracks.items():
        for t, x, y, z in arr:
            rows.append((t, fid, x, y, z))
    rows.sort(key=lambda r: (r[0], r[1]))
    for t, fid, x, y, z in rows:
        w.writerow([repr(float(t)), fid, repr(float(x)), repr(float(y)), repr(float(z))])
    return buf.getvalue()


def write_csv(tracks: dict[str, np.ndarray], path) -> None:
    from .model import atomic_write

    atomic_write(path, tracks_csv(tracks).encode("utf-8"))


# ---------------------------------------------------------------------------
# scenes

@dataclass
class Scene:
    """Fighters on a shared uniform time base: ``positions`` is ``[n, L, 3]`` meters."""

    times: np.ndarray
    positions: np.ndarray
    fighter_ids: list[str]
    name: str = ""
    kind: str = ""

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def __len__(self) -> int:
        return len(self.times)

    def to_tracks(self) -> dict[str, np.ndarray]:
        return {
            fid: np.column_stack([self.times, self.positions[i]])
            for i, fid in enumerate(self.fighter_ids)
        }


def lowpass(track: np.ndarray, alpha: float) -> np.ndarray:
    """First-order exponential smoothing of every column of ``track`` ([L, k])."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"smoothing factor must be in (0, 1], got {alpha}")
    x = np.asarray(track, dtype=np.float64)
    y = np.empty_like(x)
    if len(x) == 0:
        return y
    if alpha == 1.0:
        y[:] = x
        return y
    # y + a(x - y) keeps constant input exactly fixed
    y[0] = x[0]
    for t in range(1, len(x)):
        y[t] = y[t - 1] + alpha * (x[t] - y[t - 1])
    return y


def lowpass_tracks(tracks: dict[str, np.ndarray], alpha: float) -> dict[str, np.ndarray]:
    out = {}
    for fid, arr in tracks.items():
        sm = arr.copy()
        sm[:, 1:] = lowpass(arr[:, 1:], alpha)
        out[fid] = sm
    return out


def resample(tracks: dict[str, np.ndarray], dt: float, name: str = "") -> Scene:
    """Linear interpolation of all tracks onto one uniform grid over their common span."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    usable = {}
    for fid, arr in tracks.items():
        if len(arr) < 2:
            log.info("dropping fighter %s: fewer than two samples", fid)
            continue
        if np.any(np.diff(arr[:, 0]) <= 0):
            raise DataError(f"fighter {fid}: timestamps are not strictly increasing")
        usable[fid] = arr
    if not usable:
        raise DataError("no fighter has at least two samples")
    start = max(a[0, 0] for a in usable.values())
    end = min(a[-1, 0] for a in usable.values())
    if end < start:
        raise DataError(f"tracks have no common time interval (latest start {start}, earliest end {end})")
    count = int(math.floor((end - start) / dt + 1e-9)) + 1
    times = start + dt * np.arange(count)
    pos = np.empty((len(usable), count, 3))
    for i, arr in enumerate(usable.values()):
        for k in range(3):
            pos[i, :, k] = np.interp(times, arr[:, 0], arr[:, k + 1])
    return Scene(times, pos, list(usable), name=name)


def prepare_scene(tracks: dict[str, np.ndarray], dt: float = 1.0, alpha: float = 0.3,
                  name: str = "") -> Scene:
    return resample(lowpass_tracks(tracks, alpha), dt, name=name)


# ---------------------------------------------------------------------------
# windows

@dataclass
class WindowSample:
    """Observed and target windows in normalized units.

    ``normalized = (meters - offset) / scale``; ``offset`` is the centroid of
    all fighters' last observed points.
    """

    input: np.ndarray  # [n, t_obs, 3]
    target: np.ndarray  # [n, t_pred, 3]
    offset: np.ndarray  # [3]
    scale: float
    input_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    target_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    scene: str = ""
    kind: str = ""
    start: int = 0

    @property
    def n(self) -> int:
        return self.input.shape[0]

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) * self.scale + self.offset

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.offset) / self.scale

    @property
    def span(self) -> tuple[float, float]:
        return float(self.input_times[0]), float(self.target_times[-1])


def normalize_window(obs_m: np.ndarray, scale: float = 1000.0):
    """Normalize an observed window; returns ``(normalized, offset)``."""
    offset = obs_m[:, -1, :].mean(axis=0)
    return (obs_m - offset) / scale, offset


def make_windows(scene: Scene, stride: int = 1, t_obs: int = 8, t_pred: int = 8,
                 scale: float = 1000.0) -> list[WindowSample]:
    total = t_obs + t_pred
    if len(scene) < total:
        log.info("scene %r has %d steps, windows need %d; no samples", scene.name, len(scene), total)
        return []
    out = []
    for s in range(0, len(scene) - total + 1, stride):
        obs = scene.positions[:, s:s + t_obs]
        tgt = scene.positions[:, s + t_obs:s + total]
        norm, offset = normalize_window(obs, scale)
        out.append(WindowSample(
            input=norm, target=(tgt - offset) / scale, offset=offset, scale=scale,
            input_times=scene.times[s:s + t_obs], target_times=scene.times[s + t_obs:s + total],
            scene=scene.name, kind=scene.kind, start=s))
    return out


@dataclass
class SplitResult:
    train: list[WindowSample]
    test: list[WindowSample]
    dropped: list[WindowSample]

    def __iter__(self):
        return iter((self.train, self.test))


def split(samples: list[WindowSample], ratio: float = 0.8) -> SplitResult:
    """Chronological split: first ``ratio`` of samples train, the rest test.

    Test windows whose time span overlaps a training window of the same scene
    are dropped so no timestamp is shared between the halves.
    """
    if not samples:
        raise ValueError("cannot split an empty sample list")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    k = int(math.floor(len(samples) * ratio + 0.5))
    k = min(max(k, 1), len(samples)) if len(samples) > 1 else 1
    train, rest = samples[:k], samples[k:]
    last_end: dict[str, float] = {}
    for s in train:
        if len(s.target_times):
            last_end[s.scene] = max(last_end.get(s.scene, -math.inf), s.span[1])
    test, dropped = [], []
    for s in rest:
        if len(s.input_times) and s.scene in last_end and s.span[0] <= last_end[s.scene]:
            dropped.append(s)
        else:
            test.append(s)
    return SplitResult(train, test, dropped)


# ---------------------------------------------------------------------------
# synthetic scenes

@dataclass(frozen=True)
class SynthScenario:
    kind: str = "straight"
    n: int = 2
    duration: float = 60.0  # seconds
    noise: float = 0.0  # position jitter sigma, meters
    seed: int = 0
    dt: float = 1.0
    leader_kind: str = "level_turn"  # what the pursuit leader flies
    spread_m: float = 2000.0  # initial spacing scale between fighters

    def __post_init__(self):
        if self.kind not in SYNTH_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}; valid kinds: {', '.join(SYNTH_KINDS)}")
        if self.leader_kind not in SYNTH_KINDS[:3]:
            raise ValueError(f"pursuit leader kind must be one of {', '.join(SYNTH_KINDS[:3])}")
        if self.n < 1:
            raise ValueError("a scenario needs at least one fighter")
        if self.duration < self.dt or self.dt <= 0:
            raise ValueError("duration must cover at least one time step")


def _unit(heading: float, pitch: float) -> np.ndarray:
    return np.array([math.cos(pitch) * math.cos(heading),
                     math.cos(pitch) * math.sin(heading),
                     math.sin(pitch)])


def _start(rng: np.random.Generator, spread: float) -> np.ndarray:
    xy = rng.uniform(-spread, spread, size=2)
    return np.array([xy[0], xy[1], rng.uniform(4000.0, 8000.0)])


def _straight(rng, t, spread):
    p0 = _start(rng, spread)
    v = rng.uniform(200.0, 300.0) * _unit(rng.uniform(0, 2 * math.pi), math.radians(rng.uniform(-5, 5)))
    return p0 + t[:, None] * v


def _level_turn(rng, t, spread):
    p0 = _start(rng, spread)
    speed = rng.uniform(200.0, 300.0)
    omega = math.radians(rng.uniform(3.0, 8.0)) * rng.choice([-1.0, 1.0])
    h0 = rng.uniform(0, 2 * math.pi)
    r = speed / abs(omega)
    # centre lies to the inside of the turn
    side = h0 + math.copysign(math.pi / 2, omega)
    c = p0[:2] + r * np.array([math.cos(side), math.sin(side)])
    ang = side + math.pi + omega * t
    xy = c + r * np.column_stack([np.cos(ang), np.sin(ang)])
    return np.column_stack([xy, np.full(len(t), p0[2])])


def _mutation(rng, t, spread, dt):
    p0 = _start(rng, spread)
    speed = rng.uniform(200.0, 300.0)
    h0 = rng.uniform(0, 2 * math.pi)
    pitch0 = math.radians(rng.uniform(-5, 5))
    steps = len(t)
    k = int(rng.integers(max(1, int(0.3 * steps)), max(2, int(0.7 * steps))))
    k = min(k, max(steps - 2, 1))
    dh = math.radians(rng.uniform(60.0, 120.0)) * rng.choice([-1.0, 1.0])
    dp = math.radians(20.0) * rng.choice([-1.0, 1.0])
    v1 = speed * _unit(h0, pitch0)
    v2 = speed * _unit(h0 + dh, pitch0 + dp)
    tk = t[k]
    before = p0 + t[:, None] * v1
    after = p0 + tk * v1 + (t - tk)[:, None] * v2
    return np.where((t <= tk)[:, None], before, after)


def _leader(kind, rng, t, spread, dt):
    if kind == "straight":
        return _straight(rng, t, spread)
    if kind == "level_turn":
        return _level_turn(rng, t, spread)
    return _mutation(rng, t, spread, dt)


def _rotate_towards(d: np.ndarray, goal: np.ndarray, max_angle: float) -> np.ndarray:
    cosang = float(np.clip(d @ goal, -1.0, 1.0))
    ang = math.acos(cosang)
    if ang <= max_angle:
        return goal
    axis = np.cross(d, goal)
    na = np.linalg.norm(axis)
    if na < 1e-12:  # goal directly behind: turn about any perpendicular
        axis = np.cross(d, [0.0, 0.0, 1.0])
        na = np.linalg.norm(axis)
        if na < 1e-12:
            axis, na = np.array([1.0, 0.0, 0.0]), 1.0
    k = axis / na
    a = max_angle
    return d * math.cos(a) + np.cross(k, d) * math.sin(a) + k * (k @ d) * (1 - math.cos(a))


def _pursuers(rng, t, leader, n_followers, substeps=10):
    """Pure-pursuit followers with a bounded turn rate, integrated with Euler sub-steps."""
    dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
    h = dt / substeps
    out = np.empty((n_followers, len(t), 3))
    lead_vel0 = leader[1] - leader[0] if len(t) > 1 else np.array([1.0, 0, 0])
    lead_dir0 = lead_vel0 / (np.linalg.norm(lead_vel0) + 1e-12)
    for f in range(n_followers):
        back = rng.uniform(1000.0, 3000.0)
        lateral = rng.uniform(-1500.0, 1500.0)
        perp = np.array([-lead_dir0[1], lead_dir0[0], 0.0])
        pos = leader[0] - back * lead_dir0 + lateral * perp + np.array([0, 0, rng.uniform(-500, 500)])
        speed = rng.uniform(230.0, 320.0)
        turn = math.radians(rng.uniform(8.0, 15.0))  # rad/s
        goal = leader[0] - pos
        d = goal / np.linalg.norm(goal)
        d = _rotate_towards(lead_dir0, d, math.radians(rng.uniform(20, 60)))
        out[f, 0] = pos
        for k in range(1, len(t)):
            for s in range(substeps):
                frac = (s + 1) / substeps
                target = leader[k - 1] + frac * (leader[k] - leader[k - 1])
                goal = target - pos
                dist = np.linalg.norm(goal)
                if dist > 1e-9:
                    d = _rotate_towards(d, goal / dist, turn * h)
                    d = d / np.linalg.norm(d)
                pos = pos + speed * h * d
            out[f, k] = pos
    return out


def synth_generate(scenario: SynthScenario) -> Scene:
    """Deterministic multi-fighter scene for ``scenario``."""
    rng = np.random.default_rng(scenario.seed)
    steps = int(math.floor(scenario.duration / scenario.dt + 1e-9)) + 1
    t = scenario.dt * np.arange(steps)
    tracks = []
    if scenario.kind == "pursuit":
        leader = _leader(scenario.leader_kind, rng, t, scenario.spread_m, scenario.dt)
        tracks.append(leader)
        if scenario.n > 1:
            tracks.extend(_pursuers(rng, t, leader, scenario.n - 1))
    else:
        for _ in range(scenario.n):
            if scenario.kind == "straight":
                tracks.append(_straight(rng, t, scenario.spread_m))
            elif scenario.kind == "level_turn":
                tracks.append(_level_turn(rng, t, scenario.spread_m))
            else:
                tracks.append(_mutation(rng, t, scenario.spread_m, scenario.dt))
    pos = np.stack(tracks)
    if scenario.noise > 0:
        pos = pos + rng.normal(0.0, scenario.noise, size=pos.shape)
    ids = [f"F{i + 1}" for i in range(scenario.n)]
    name = f"{scenario.kind}-n{scenario.n}-s{scenario.seed}"
    return Scene(t, pos, ids, name=name, kind=scenario.kind)


# ---------------------------------------------------------------------------
# manifests

def read_manifest(path) -> list[tuple[Path, str]]:
    """Scene CSV paths (relative to the manifest) with an optional scene-set label.

    One entry per line: ``path`` or ``path set_name``; ``#`` starts a comment.
    """
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        if len(parts) > 2:
            raise DataError(f"{path}:{lineno}: expected 'path [scene_set]', got {body!r}")
        csv_path = Path(parts[0])
        if not csv_path.is_absolute():
            csv_path = path.parent / csv_path
        entries.append((csv_path, parts[1] if len(parts) == 2 else "all"))
    if not entries:
        raise DataError(f"{path}: manifest lists no scenes")
    return entries


def write_manifest(entries: list[tuple[str, str]], path) -> None:
    from .model import atomic_write

    text = "".join(f"{p} {label}\n" if label else f"{p}\n" for p, label in entries)
    atomic_write(path, text.encode("utf-8"))


def load_scene(path, dt: float = 1.0, alpha: float = 0.3) -> Scene:
    path = Path(path)
    return prepare_scene(load_csv(path), dt, alpha, name=path.stem)
