"""The enhanced CNN-LSTM predictor: encoder, sliding-window decoder, checkpoints."""

from __future__ import annotations

import io
import os
import tempfile
from dataclasses import asdict, dataclass, fields, replace
from typing import Iterable

import numpy as np

from . import layers as L
from .autodiff import ShapeError, Tensor, concat, no_grad, parameter, stack

CHECKPOINT_MAGIC = "FTRAJ-CKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    m: int = 3
    conv_channels: int = 16
    hidden: int = 32
    attn_dim: int = 16
    grid_extent_m: float = 5000.0
    grid_cells: int = 4
    social_dim: int = 0  # 0 means "same as hidden"
    pool: bool = True
    t_obs: int = 8
    t_pred: int = 8
    attention: bool = True
    social: bool = True
    social_per_step: bool = False
    seed: int = 1

    def __post_init__(self):
        for name in ("m", "conv_channels", "hidden", "attn_dim", "grid_cells", "t_pred"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.t_obs < 3:
            raise ValueError(f"t_obs must be >= 3 for the width-3 convolution, got {self.t_obs}")
        if self.grid_extent_m <= 0:
            raise ValueError(f"grid_extent_m must be positive, got {self.grid_extent_m}")

    @property
    def d_social(self) -> int:
        return self.social_dim or self.hidden

    @property
    def grid(self) -> L.SocialGridConfig:
        return L.SocialGridConfig(self.grid_extent_m, self.grid_cells)

    @property
    def variant(self) -> str:
        return variant_label(self.attention, self.social)

    def with_variant(self, attention: bool, social: bool) -> "ModelConfig":
        return replace(self, attention=attention, social=social)


def variant_label(attention: bool, social: bool) -> str:
    return "CNN-LSTM" + ("+A" if attention else "") + ("+SP" if social else "")


# ---------------------------------------------------------------------------
# parameters

def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable array, in checkpoint order."""
    C, D, P, Ds = cfg.conv_channels, cfg.hidden, cfg.attn_dim, cfg.d_social
    return {
        "conv.kernels": (C, 3, cfg.m),
        "conv.bias": (C,),
        "attn.v": (P,),
        "attn.W": (P, 2 * D),
        "attn.u": (P,),
        "attn.cell.W": (4 * D, C + D),
        "attn.cell.b": (4 * D,),
        "social.W": (Ds, cfg.grid_cells ** 3 * D),
        "social.b": (Ds,),
        "merge.W": (D, D + Ds),
        "merge.b": (D,),
        "temporal.W": (4 * D, 2 * D),
        "temporal.b": (4 * D,),
        "head.W": (3, D),
        "head.b": (3,),
    }


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name == "conv.kernels":
        return shape[1] * shape[2]
    if name == "attn.u":
        return 1  # multiplies a single scalar feature
    if len(shape) == 1:
        return shape[0]  # score vector v
    return shape[1]


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, forget-gate bias 1."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b") or name == "conv.bias":
            arr = np.zeros(shape)
            if name in ("attn.cell.b", "temporal.b"):
                D = shape[0] // 4
                arr[D:2 * D] = 1.0
        else:
            bound = 1.0 / np.sqrt(_fan_in(name, shape))
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = parameter(arr)
    return params


# ---------------------------------------------------------------------------
# input batches

@dataclass
class SceneWindow:
    """Observed positions of the fighters of one or more scenes.

    ``positions`` is ``[N, T, 3]`` in normalized units; ``groups`` assigns
    each row to a scene (rows of different scenes never pool together) and
    ``scales`` converts each row's normalized units back to meters.
    """

    positions: np.ndarray
    groups: np.ndarray
    scales: np.ndarray

    @classmethod
    def single(cls, positions: np.ndarray, scale: float = 1000.0) -> "SceneWindow":
        pos = np.asarray(positions, dtype=np.float64)
        n = pos.shape[0]
        return cls(pos, np.zeros(n, dtype=np.int64), np.full(n, float(scale)))

    @classmethod
    def batch(cls, windows: Iterable[np.ndarray], scales: Iterable[float]) -> "SceneWindow":
        ws, gs, ss = [], [], []
        for k, (w, s) in enumerate(zip(windows, scales)):
            w = np.asarray(w, dtype=np.float64)
            ws.append(w)
            gs.append(np.full(w.shape[0], k, dtype=np.int64))
            ss.append(np.full(w.shape[0], float(s)))
        return cls(np.concatenate(ws), np.concatenate(gs), np.concatenate(ss))

    @property
    def n_rows(self) -> int:
        return self.positions.shape[0]


# ---------------------------------------------------------------------------

class TrajNet:
    """Parameters plus config; forward passes are define-by-run."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        shapes = param_shapes(cfg)
        if list(self.params) != list(shapes):
            raise ShapeError(f"parameter names {list(self.params)} do not match config")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.params[name].shape}, config expects {shape}")

    # layer views ----------------------------------------------------------
    @property
    def conv(self) -> L.Conv1dParams:
        p = self.params
        return L.Conv1dParams(p["conv.kernels"], p["conv.bias"], "relu")

    @property
    def attention(self) -> L.InputAttentionParams:
        p = self.params
        cell = L.LstmCellParams(p["attn.cell.W"], p["attn.cell.b"])
        return L.InputAttentionParams(p["attn.v"], p["attn.W"], p["attn.u"], cell)

    @property
    def social_embed(self) -> L.LinearParams:
        return L.LinearParams(self.params["social.W"], self.params["social.b"])

    @property
    def merge(self) -> L.LinearParams:
        return L.LinearParams(self.params["merge.W"], self.params["merge.b"])

    @property
    def temporal(self) -> L.LstmCellParams:
        return L.LstmCellParams(self.params["temporal.W"], self.params["temporal.b"])

    @property
    def head(self) -> L.LinearParams:
        return L.LinearParams(self.params["head.W"], self.params["head.b"])

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # forward --------------------------------------------------------------
    def _check(self, obs) -> None:
        shape = obs.shape
        if len(shape) != 3 or shape[1] != self.cfg.t_obs or shape[2] != self.cfg.m:
            raise ShapeError(
                f"window shape {shape} does not match config (N, {self.cfg.t_obs}, {self.cfg.m})")

    def _social_positions(self, obs: Tensor, scene: SceneWindow, step: int) -> np.ndarray:
        return obs.data[:, step, :3] * scene.scales[:, None]

    def encode(self, obs: Tensor, scene: SceneWindow) -> Tensor:
        """Per-fighter state ``[N, D]`` for the window ``obs`` (``[N, T, m]``)."""
        cfg = self.cfg
        self._check(obs)
        feats = L.conv1d(obs, self.conv)
        if cfg.pool:
            feats = L.maxpool_time(feats)
        hiddens, _ = L.attention_steps(feats, self.attention, cfg.attention)
        n_steps = len(hiddens)
        N = obs.shape[0]

        if not cfg.social:
            zeros = Tensor(np.zeros((N, cfg.d_social)))
            socials = [zeros] * n_steps
        elif cfg.social_per_step:
            stride = 2 if cfg.pool else 1
            socials = [
                L.social_pool(self._social_positions(obs, scene, stride * t + stride - 1),
                              h, cfg.grid, self.social_embed, scene.groups)
                for t, h in enumerate(hiddens)
            ]
        else:
            H = L.social_pool(self._social_positions(obs, scene, cfg.t_obs - 1),
                              hiddens[-1], cfg.grid, self.social_embed, scene.groups)
            socials = [H] * n_steps

        temporal = self.temporal
        merge = self.merge
        h = s = Tensor(np.zeros((N, cfg.hidden)))
        for h_att, H in zip(hiddens, socials):
            x = L.linear(concat([h_att, H], axis=-1), merge)
            h, s = L.lstm_step(x, h, s, temporal)
        return h

    def predict_step(self, obs: Tensor, scene: SceneWindow) -> Tensor:
        """Next position of every fighter: last observed point plus a displacement."""
        disp = L.linear(self.encode(obs, scene), self.head)
        return obs[:, -1, :3] + disp

    def rollout(self, obs, scene: SceneWindow | None = None) -> Tensor:
        """Autoregressive ``[N, t_pred, 3]`` prediction, re-encoding a sliding window."""
        if scene is None:
            scene = obs
        if isinstance(obs, SceneWindow):
            obs = Tensor(obs.positions)
        window = obs
        preds = []
        for _ in range(self.cfg.t_pred):
            nxt = self.predict_step(window, scene)
            preds.append(nxt)
            window = concat([window[:, 1:, :], stack([nxt], axis=1)], axis=1)
        return stack(preds, axis=1)

    def predict(self, scene: SceneWindow) -> np.ndarray:
        """Tape-free rollout returning a plain array."""
        with no_grad():
            return self.rollout(Tensor(scene.positions), scene).data

    # persistence ----------------------------------------------------------
    def save(self, path) -> None:
        save(self, path)

    @classmethod
    def load(cls, path) -> "TrajNet":
        return load(path)


# ---------------------------------------------------------------------------
# checkpoint format

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


def _parse_value(raw: str, typ):
    if typ is bool:
        if raw not in ("true", "false"):
            raise CheckpointError(f"bad boolean {raw!r}")
        return raw == "true"
    return typ(raw)


def checkpoint_bytes(model: TrajNet) -> bytes:
    cfg = asdict(model.cfg)
    header = f"{CHECKPOINT_MAGIC} version={CHECKPOINT_VERSION} " + " ".join(
        f"{k}={_fmt(v)}" for k, v in cfg.items())
    buf = io.BytesIO()
    buf.write(header.encode("ascii") + b"\n")
    for name, t in model.params.items():
        line = " ".join([name] + [str(d) for d in t.shape])
        buf.write(line.encode("ascii") + b"\n")
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def atomic_write(path, data: bytes) -> None:
    """Write through a temp file in the target directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(model: TrajNet, path) -> None:
    atomic_write(path, checkpoint_bytes(model))


def load(path) -> TrajNet:
    with open(path, "rb") as fh:
        raw = fh.read()
    return loads(raw)


def loads(raw: bytes) -> TrajNet:
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError("malformed checkpoint: missing header line")
    try:
        head = raw[:nl].decode("ascii").split()
    except UnicodeDecodeError:
        raise CheckpointError("malformed checkpoint: header is not ASCII") from None
    if not head or head[0] != CHECKPOINT_MAGIC:
        raise CheckpointError("malformed checkpoint: bad magic")
    kv = {}
    for tok in head[1:]:
        if "=" not in tok:
            raise CheckpointError(f"malformed checkpoint header token {tok!r}")
        k, v = tok.split("=", 1)
        kv[k] = v
    version = kv.pop("version", None)
    if version != str(CHECKPOINT_VERSION):
        raise CheckpointError(
            f"checkpoint version {version!r} not supported (expected {CHECKPOINT_VERSION})")
    types = {f.name: f.type for f in fields(ModelConfig)}
    pytypes = {"int": int, "float": float, "bool": bool}
    unknown = set(kv) - set(types)
    if unknown:
        raise CheckpointError(f"unknown config keys in checkpoint: {sorted(unknown)}")
    try:
        cfg = ModelConfig(**{k: _parse_value(v, pytypes[types[k]]) for k, v in kv.items()})
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid config in checkpoint: {exc}") from None

    shapes = param_shapes(cfg)
    params = {}
    pos = nl + 1
    for name, shape in shapes.items():
        end = raw.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"truncated checkpoint before block {name}")
        toks = raw[pos:end].decode("ascii", errors="replace").split()
        if not toks or toks[0] != name:
            raise CheckpointError(f"expected block {name}, found {toks[:1]}")
        got = tuple(int(d) for d in toks[1:])
        if got != shape:
            raise CheckpointError(f"{name}: stored shape {got} != config shape {shape}")
        nbytes = 8 * int(np.prod(shape))
        blob = raw[end + 1:end + 1 + nbytes]
        if len(blob) != nbytes:
            raise CheckpointError(f"truncated data for block {name}")
        params[name] = parameter(np.frombuffer(blob, dtype="<f8").reshape(shape).astype(np.float64))
        pos = end + 1 + nbytes
    if pos != len(raw):
        raise CheckpointError("trailing bytes after last parameter block")
    return TrajNet(cfg, params)
