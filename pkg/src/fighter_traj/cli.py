"""Command-line entry point: ``synth | train | eval | ablate | predict``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as C
from .data import (
    SYNTH_KINDS,
    DataError,
    SynthScenario,
    load_scene,
    make_windows,
    normalize_window,
    read_manifest,
    split,
    synth_generate,
    write_csv,
    write_manifest,
)
from .evaluate import VARIANTS, dump_trajectories, evaluate, predict_meters, run_ablation
from .model import CheckpointError, SceneWindow, TrajNet, atomic_write
from .train import fit

log = logging.getLogger("fighter_traj")

PIPELINE_KEYS = ("dt_s", "lowpass_alpha", "scale_m", "stride", "split_ratio")


def _add_config_flags(p: argparse.ArgumentParser, keys=None) -> None:
    p.add_argument("--config", help="key=value config file (default: none)")
    for key in keys or C.DEFAULTS:
        default, help_ = C.DEFAULTS[key]
        shown = ("on" if default else "off") if isinstance(default, bool) else default
        p.add_argument(f"--{key}", default=None, metavar="VALUE",
                       help=f"{help_} (default: {shown})")


def _resolve(args) -> dict:
    overrides = {k: getattr(args, k) for k in C.DEFAULTS if hasattr(args, k)}
    return C.resolve(args.config, overrides)


def _load_dataset(manifest, cfg, t_obs=None, t_pred=None, scale=None):
    """4:1 chronological split per scene set: (train, test, test-by-set, every window).

    Windows of one set are concatenated in manifest order before splitting, so
    only the scene straddling the cut loses windows to the overlap rule.
    """
    t_obs = t_obs or cfg["t_obs"]
    t_pred = t_pred or cfg["t_pred"]
    scale = scale or cfg["scale_m"]
    grouped: dict[str, list] = {}
    for csv_path, label in read_manifest(manifest):
        scene = load_scene(csv_path, cfg["dt_s"], cfg["lowpass_alpha"])
        grouped.setdefault(label, []).extend(make_windows(scene, cfg["stride"], t_obs, t_pred, scale))
    train, test, by_set = [], [], {}
    for label, ws in grouped.items():
        if not ws:
            continue
        parts = split(ws, cfg["split_ratio"])
        train += parts.train
        test += parts.test
        by_set[label] = parts.test
    return train, test, by_set, [w for ws in grouped.values() for w in ws]


# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for k in range(args.scenes):
        scenario = SynthScenario(kind=args.kind, n=args.n, duration=args.duration, noise=args.noise,
                                 seed=args.seed + k, dt=args.dt, leader_kind=args.leader_kind)
        scene = synth_generate(scenario)
        name = f"{scene.name}.csv"
        write_csv(scene.to_tracks(), out / name)
        entries.append((name, args.kind))
    write_manifest(entries, out / "manifest.txt")
    print(f"wrote {len(entries)} scene(s) and {out / 'manifest.txt'}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    mcfg, tcfg = C.model_config(cfg), C.train_config(cfg)
    train = _load_dataset(args.data, cfg)[0]
    if not train:
        raise DataError(f"{args.data}: no training windows (scenes need >= {cfg['t_obs'] + cfg['t_pred']} steps)")
    model = TrajNet(mcfg)
    _, record = fit(model, train, tcfg)
    model.save(args.out)
    loss_csv = args.loss_csv or f"{args.out}.loss.csv"
    atomic_write(loss_csv, record.to_csv().encode("utf-8"))
    final = record.mean_loss[-1] if record.mean_loss else float("nan")
    print(f"{mcfg.variant}: {len(record)} epochs on {len(train)} windows, final mean loss {final:.6g}")
    print(f"checkpoint {args.out}, loss trace {loss_csv}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    model = TrajNet.load(args.checkpoint)
    mc = model.cfg
    train, test, _, every = _load_dataset(args.data, cfg, mc.t_obs, mc.t_pred)
    samples = {"test": test, "train": train, "all": every}[args.split]
    if not samples:
        raise DataError(f"{args.data}: no {args.split} windows to evaluate")
    report = evaluate(model, samples, args.split, mc.seed, args.pat_reps)
    print(f"{'Models':<16}{'ADE(km)':>10}{'FDE(km)':>10}{'PAT(ms)':>10}{'windows':>9}")
    print(f"{report.variant:<16}{report.ade:>10.4f}{report.fde:>10.4f}{report.pat:>10.3f}{report.n_samples:>9}")
    for name, a, f, k in report.rows:
        print(f"  {name:<30}{a:>10.4f}{f:>10.4f}{k:>9}")
    metrics = args.metrics_csv or f"{args.checkpoint}.metrics.csv"
    header = "variant,scene_set,seed,ade_km,fde_km,pat_ms\n"
    atomic_write(metrics, (header + ",".join(map(str, report.csv_row())) + "\n").encode("utf-8"))
    if args.dump:
        out = Path(args.dump)
        out.mkdir(parents=True, exist_ok=True)
        preds, truths = predict_meters(model, samples)
        for s, p, t in zip(samples, preds, truths):
            dump_trajectories(p, t, s.denormalize(s.input), out / f"{s.scene}_{s.start:05d}.csv")
        print(f"dumped {len(samples)} trajectory file(s) to {out}")
    return 0


def _parse_seeds(text: str) -> list[int]:
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise C.ConfigError(f"no seeds in {text!r}")
    return seeds


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    seeds = _parse_seeds(args.seeds)
    train, test, by_set, _ = _load_dataset(args.data, cfg)
    if not train or not test:
        raise DataError(f"{args.data}: need both training and test windows for an ablation")
    test_sets = {"all": test}
    if len(by_set) > 1:
        test_sets.update({k: v for k, v in by_set.items() if v})
    total = len(seeds) * len(VARIANTS)
    counter = iter(range(1, total + 1))

    def on_run(seed, label, record):
        print(f"run {next(counter)}/{total}: seed {seed} {label} "
              f"final loss {record.mean_loss[-1]:.6g}", file=sys.stderr)

    result = run_ablation(train, test_sets, C.model_config(cfg), C.train_config(cfg), seeds,
                          pat_repetitions=args.pat_reps, on_run=on_run)
    print(result.table())
    if args.metrics_csv:
        atomic_write(args.metrics_csv, result.to_csv().encode("utf-8"))
    return 0


def cmd_predict(args) -> int:
    cfg = _resolve(args)
    model = TrajNet.load(args.checkpoint)
    mc = model.cfg
    scene = load_scene(args.scene, cfg["dt_s"], cfg["lowpass_alpha"])
    if len(scene) < mc.t_obs:
        raise DataError(f"{args.scene}: need {mc.t_obs} aligned steps, scene has {len(scene)}")
    obs = scene.positions[:, -mc.t_obs:]
    norm, offset = normalize_window(obs, cfg["scale_m"])
    pred = model.predict(SceneWindow.single(norm, cfg["scale_m"])) * cfg["scale_m"] + offset
    dump_trajectories(pred, None, obs, args.out, scene.fighter_ids)
    print(f"predicted {mc.t_pred} steps for {scene.n} fighter(s) -> {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fighter-traj", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log notes to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scenes")
    p.add_argument("--kind", required=True, help=f"one of: {', '.join(SYNTH_KINDS)}")
    p.add_argument("--n", type=int, default=2, help="fighters per scene (default: 2)")
    p.add_argument("--seed", type=int, default=1, help="seed of the first scene (default: 1)")
    p.add_argument("--scenes", type=int, default=1, help="scenes to generate, seeds seed.. (default: 1)")
    p.add_argument("--duration", type=float, default=60.0, help="seconds (default: 60)")
    p.add_argument("--noise", type=float, default=10.0, help="position noise sigma, m (default: 10)")
    p.add_argument("--dt", type=float, default=1.0, help="sample step, s (default: 1)")
    p.add_argument("--leader_kind", default="level_turn",
                   help="pursuit leader manoeuvre (default: level_turn)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True, help="scene manifest")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss_csv", default=None, help="loss trace CSV (default: <out>.loss.csv)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="scene manifest")
    p.add_argument("--split", choices=("test", "train", "all"), default="test",
                   help="which windows to score (default: test)")
    p.add_argument("--pat_reps", type=int, default=3, help="PAT repetitions (default: 3)")
    p.add_argument("--metrics_csv", default=None, help="(default: <checkpoint>.metrics.csv)")
    p.add_argument("--dump", default=None, help="directory for per-window trajectory CSVs (default: none)")
    _add_config_flags(p, PIPELINE_KEYS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare all four variants")
    p.add_argument("--data", required=True, help="scene manifest")
    p.add_argument("--seeds", default="1", help="comma list or range, e.g. 1-5 (default: 1)")
    p.add_argument("--pat_reps", type=int, default=3, help="PAT repetitions (default: 3)")
    p.add_argument("--metrics_csv", default=None, help="per-run metrics CSV (default: none)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="predict the next steps of a scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True, help="scene CSV")
    p.add_argument("--out", required=True, help="prediction CSV")
    _add_config_flags(p, ("dt_s", "lowpass_alpha", "scale_m"))
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (C.ConfigError, DataError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
