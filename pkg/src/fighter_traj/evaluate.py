"""ADE / FDE / PAT metrics, trajectory dumps and the ablation harness."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import ShapeError
from .data import WindowSample
from .model import ModelConfig, SceneWindow, TrajNet, atomic_write, variant_label
from .train import TrainConfig, fit

log = logging.getLogger(__name__)

# (attention, social) in reporting order
VARIANTS = ((True, True), (True, False), (False, True), (False, False))


def _check(pred, truth):
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
    if pred.ndim < 2 or pred.shape[-1] != 3:
        raise ShapeError(f"expected [..., T, 3] trajectories, got {pred.shape}")
    return pred, truth


def ade(pred, truth) -> float:
    """Mean Euclidean error over fighters and predicted steps; meters in, kilometers out."""
    pred, truth = _check(pred, truth)
    return float(np.sqrt(((pred - truth) ** 2).sum(axis=-1)).mean() / 1000.0)


def fde(pred, truth) -> float:
    """Mean over fighters of the final-step Euclidean error, in kilometers."""
    pred, truth = _check(pred, truth)
    d = pred[..., -1, :] - truth[..., -1, :]
    return float(np.sqrt((d ** 2).sum(axis=-1)).mean() / 1000.0)


@dataclass
class MetricsReport:
    variant: str
    ade: float  # km
    fde: float  # km
    pat: float  # ms
    scene_set: str = "all"
    seed: int = 0
    n_samples: int = 0
    rows: list[tuple[str, float, float, int]] = field(default_factory=list)  # per scene

    def csv_row(self) -> list:
        return [self.variant, self.scene_set, self.seed, f"{self.ade:.6f}", f"{self.fde:.6f}",
                f"{self.pat:.4f}"]


def predict_meters(model: TrajNet, samples: list[WindowSample], chunk: int = 256):
    """Denormalized predictions and truths, one ``[n, t_pred, 3]`` pair per sample."""
    preds, truths = [], []
    for start in range(0, len(samples), chunk):
        part = samples[start:start + chunk]
        scene = SceneWindow.batch([s.input for s in part], [s.scale for s in part])
        out = model.predict(scene)
        row = 0
        for s in part:
            preds.append(s.denormalize(out[row:row + s.n]))
            truths.append(s.denormalize(s.target))
            row += s.n
    return preds, truths


def measure_pat(model: TrajNet, samples: list[WindowSample], repetitions: int = 3,
                max_samples: int | None = 20) -> float:
    """Mean wall-clock milliseconds for one full rollout of one scene window."""
    if not samples:
        raise ValueError("PAT needs at least one sample")
    if repetitions < 3:
        raise ValueError(f"PAT needs at least 3 repetitions, got {repetitions}")
    pick = samples if max_samples is None else samples[:max_samples]
    windows = [SceneWindow.single(s.input, s.scale) for s in pick]
    model.predict(windows[0])  # warm-up
    total = 0.0
    for _ in range(repetitions):
        for w in windows:
            t0 = time.perf_counter()
            model.predict(w)
            total += time.perf_counter() - t0
    return 1000.0 * total / (repetitions * len(windows))


def evaluate(model: TrajNet, samples: list[WindowSample], scene_set: str = "all",
             seed: int = 0, pat_repetitions: int = 3, pat_samples: int | None = 20) -> MetricsReport:
    """Per-sample ADE/FDE averaged over samples, plus PAT and per-scene rows."""
    if not samples:
        raise ValueError("no samples to evaluate")
    preds, truths = predict_meters(model, samples)
    ades = [ade(p, t) for p, t in zip(preds, truths)]
    fdes = [fde(p, t) for p, t in zip(preds, truths)]
    per_scene: dict[str, list[int]] = {}
    for k, s in enumerate(samples):
        per_scene.setdefault(s.scene, []).append(k)
    rows = [(name, float(np.mean([ades[k] for k in ks])), float(np.mean([fdes[k] for k in ks])),
             len(ks)) for name, ks in per_scene.items()]
    pat = measure_pat(model, samples, pat_repetitions, pat_samples) if pat_repetitions else 0.0
    return MetricsReport(model.cfg.variant, float(np.mean(ades)), float(np.mean(fdes)), pat,
                         scene_set, seed, len(samples), rows)


# ---------------------------------------------------------------------------
# trajectory dumps

def trajectories_csv(pred, truth, history, fighter_ids=None) -> str:
    if truth is None:
        pred, _ = _check(pred, pred)
    else:
        pred, truth = _check(pred, truth)
    history = np.asarray(history, dtype=np.float64)
    roles = [("history", history, 1 - history.shape[1])]
    if truth is not None:
        roles.append(("truth", truth, 1))
    roles.append(("pred", pred, 1))
    n = pred.shape[0]
    ids = fighter_ids or [f"F{i + 1}" for i in range(n)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fighter_id", "role", "step", "x_m", "y_m", "z_m"])
    for i in range(n):
        for role, arr, first in roles:
            for k, p in enumerate(arr[i]):
                w.writerow([ids[i], role, first + k] + [repr(float(v)) for v in p])
    return buf.getvalue()


def dump_trajectories(pred, truth, history, path, fighter_ids=None) -> None:
    """CSV of history (steps <= 0), truth and prediction (steps >= 1) per fighter.

    ``truth`` may be ``None`` when only a forecast exists.
    """
    atomic_write(path, trajectories_csv(pred, truth, history, fighter_ids).encode("utf-8"))


def load_trajectories(path) -> dict[str, dict[str, np.ndarray]]:
    """Inverse of :func:`dump_trajectories`: role -> fighter -> ``[T, 3]`` (step order)."""
    out: dict[str, dict[str, list]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["role"], {}).setdefault(row["fighter_id"], []).append(
                (int(row["step"]), float(row["x_m"]), float(row["y_m"]), float(row["z_m"])))
    return {role: {fid: np.array(sorted(v))[:, 1:] for fid, v in fighters.items()}
            for role, fighters in out.items()}


# ---------------------------------------------------------------------------
# ablation

def samples_digest(samples: list[WindowSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(np.ascontiguousarray(s.input).tobytes())
        h.update(np.ascontiguousarray(s.target).tobytes())
    return h.hexdigest()


@dataclass
class AblationResult:
    reports: list[MetricsReport] = field(default_factory=list)
    input_digests: dict[tuple[str, str], str] = field(default_factory=dict)
    loss_traces: dict[tuple[str, int], list[float]] = field(default_factory=dict)

    def select(self, variant: str | None = None, scene_set: str | None = None):
        return [r for r in self.reports
                if (variant is None or r.variant == variant)
                and (scene_set is None or r.scene_set == scene_set)]

    def median(self, variant: str, scene_set: str, metric: str = "ade") -> float:
        return statistics.median(getattr(r, metric) for r in self.select(variant, scene_set))

    @property
    def variants(self) -> list[str]:
        return list(dict.fromkeys(r.variant for r in self.reports))

    @property
    def scene_sets(self) -> list[str]:
        return list(dict.fromkeys(r.scene_set for r in self.reports))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "scene_set", "seed", "ade_km", "fde_km", "pat_ms"])
        for r in self.reports:
            w.writerow(r.csv_row())
        return buf.getvalue()

    def table(self) -> str:
        """Median-over-seeds summary: per-variant ADE/FDE/PAT, then per scene set."""
        sets = self.scene_sets
        main = sets[0] if sets else "all"
        lines = [f"{'Models':<16}{'ADE':>9}{'FDE':>9}{'PAT':>9}   (scene set: {main}, km / ms)"]
        for v in self.variants:
            lines.append(f"{v:<16}{self.median(v, main):>9.3f}{self.median(v, main, 'fde'):>9.3f}"
                         f"{self.median(v, main, 'pat'):>9.3f}")
        if len(sets) > 1:
            lines.append("")
            lines.append(f"{'Models':<16}{'Scene':<14}{'ADE':>9}{'FDE':>9}")
            for v in self.variants:
                for s in sets[1:]:
                    if self.select(v, s):
                        lines.append(f"{v:<16}{s:<14}{self.median(v, s):>9.3f}"
                                     f"{self.median(v, s, 'fde'):>9.3f}")
        return "\n".join(lines)


def run_ablation(train: list[WindowSample], test_sets: dict[str, list[WindowSample]],
                 base: ModelConfig, train_cfg: TrainConfig, seeds,
                 variants=VARIANTS, pat_repetitions: int = 3, pat_samples: int | None = 20,
                 on_run=None) -> AblationResult:
    """Train and evaluate every (attention, social) variant for every seed.

    All variants of one seed share the initial weights of their common
    parameters, the batch order and the test inputs. The first entry of
    ``test_sets`` is the headline set of the summary table.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("run_ablation needs at least one seed")
    result = AblationResult()
    for seed in seeds:
        for attention, social in variants:
            cfg = replace(base, attention=attention, social=social, seed=seed)
            model = TrajNet(cfg)
            label = variant_label(attention, social)
            _, record = fit(model, train, replace(train_cfg, seed=seed))
            result.loss_traces[(label, seed)] = record.mean_loss
            for name, samples in test_sets.items():
                result.input_digests[(label, name)] = samples_digest(samples)
                result.reports.append(evaluate(model, samples, name, seed,
                                               pat_repetitions, pat_samples))
            log.info("seed %d %s done", seed, label)
            if on_run is not None:
                on_run(seed, label, record)
    return result
