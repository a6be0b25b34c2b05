"""Differentiable building blocks of the predictor.

All layers accept leading batch axes: a window is ``[..., T, m]`` and a
per-step feature is ``[..., m]``. Weight matrices are stored output x input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    concat,
    matmul,
    mul,
    reshape,
    softmax,
    stack,
    unary,
)


@dataclass
class LinearParams:
    W: Tensor  # out x in
    b: Tensor  # out

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape


@dataclass
class Conv1dParams:
    kernels: Tensor  # C_out x 3 x m
    bias: Tensor  # C_out
    activation: str = "relu"

    def __post_init__(self):
        if self.kernels.ndim != 3 or self.kernels.shape[1] != 3:
            raise ShapeError(f"conv kernels must be C_out x 3 x m, got {self.kernels.shape}")


@dataclass
class LstmCellParams:
    """LSTM cell with gates fused row-wise in the order input, forget, output, candidate.

    ``W`` is ``4D x (d_in + D)`` acting on ``[x, h_prev]``; each gate's block
    is ``D x (d_in + D)``.
    """

    W: Tensor
    b: Tensor

    @property
    def hidden(self) -> int:
        return self.W.shape[0] // 4

    @property
    def input_size(self) -> int:
        return self.W.shape[1] - self.hidden

    def gate(self, name: str) -> np.ndarray:
        k = "ifog".index(name)
        D = self.hidden
        return self.W.data[k * D:(k + 1) * D]


@dataclass
class InputAttentionParams:
    v: Tensor  # P
    W: Tensor  # P x 2D, acts on [h_prev, s_prev]
    u: Tensor  # P, scales the scalar feature o_k
    cell: LstmCellParams

    def __post_init__(self):
        P, D = self.v.shape[0], self.cell.hidden
        if self.W.shape != (P, 2 * D) or self.u.shape != (P,):
            raise ShapeError(
                f"attention params inconsistent: v {self.v.shape}, W {self.W.shape}, "
                f"u {self.u.shape}, cell hidden {D}")


@dataclass(frozen=True)
class SocialGridConfig:
    extent_m: float = 5000.0  # half-width R of the cubic neighbourhood
    cells: int = 4  # G cells per axis

    def __post_init__(self):
        if not self.extent_m > 0:
            raise ValueError(f"grid extent must be positive, got {self.extent_m}")
        if self.cells < 1:
            raise ValueError(f"grid needs at least one cell per axis, got {self.cells}")

    @property
    def cell_edge(self) -> float:
        return 2.0 * self.extent_m / self.cells


# ---------------------------------------------------------------------------

def linear(x, p: LinearParams) -> Tensor:
    if x.shape[-1] != p.W.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {p.W.shape}")
    return matmul(x, p.W.T) + p.b


def conv1d(window: Tensor, p: Conv1dParams) -> Tensor:
    """Width-3 temporal convolution with one step of zero padding per side."""
    C, _, m = p.kernels.shape
    if window.shape[-1] != m:
        raise ShapeError(f"conv1d: window has {window.shape[-1]} features, kernels expect {m}")
    T = window.shape[-2]
    if T < 3:
        raise ShapeError(f"conv1d needs at least 3 time steps, got {T}")
    pad = Tensor(np.zeros(window.shape[:-2] + (1, m)))
    xp = concat([pad, window, pad], axis=-2)
    patches = concat([xp[..., k:k + T, :] for k in range(3)], axis=-1)
    W = reshape(p.kernels, (C, 3 * m))
    return unary(matmul(patches, W.T) + p.bias, p.activation)


def maxpool_time(features: Tensor) -> Tensor:
    """Non-overlapping size-2 max over time; a trailing odd step is dropped."""
    T, C = features.shape[-2], features.shape[-1]
    if T < 2:
        raise ShapeError(f"maxpool_time needs at least 2 steps, got {T}")
    half = T // 2
    lead = features.shape[:-2]
    pairs = features.data[..., :2 * half, :].reshape(lead + (half, 2, C))
    arg = pairs.argmax(axis=-2)  # first maximum on ties
    out = np.take_along_axis(pairs, arg[..., None, :], axis=-2)[..., 0, :]

    def _bw(g):
        gp = np.zeros(lead + (half, 2, C))
        np.put_along_axis(gp, arg[..., None, :], g[..., None, :], axis=-2)
        full = np.zeros_like(features.data)
        full[..., :2 * half, :] = gp.reshape(lead + (2 * half, C))
        features._accum(full)

    return Tensor._make(out, (features,), "maxpool_time", _bw)


def lstm_step(x, h_prev, s_prev, p: LstmCellParams) -> tuple[Tensor, Tensor]:
    D = p.hidden
    if x.shape[-1] != p.input_size or h_prev.shape[-1] != D or s_prev.shape[-1] != D:
        raise ShapeError(
            f"lstm_step: x {x.shape}, h {h_prev.shape}, s {s_prev.shape} vs cell "
            f"d_in={p.input_size}, D={D}")
    z = matmul(concat([x, h_prev], axis=-1), p.W.T) + p.b
    gates = unary(z[..., :3 * D], "sigmoid")
    i, f, o = gates[..., :D], gates[..., D:2 * D], gates[..., 2 * D:]
    g = unary(z[..., 3 * D:], "tanh")
    s = f * s_prev + i * g
    h = o * unary(s, "tanh")
    return h, s


def attention_scores(o_t, h_prev, s_prev, p: InputAttentionParams) -> Tensor:
    """One score per feature of ``o_t``: v . tanh(W [h, s] + u * o_k)."""
    P = p.v.shape[0]
    state = matmul(concat([h_prev, s_prev], axis=-1), p.W.T)  # [..., P]
    m = o_t.shape[-1]
    lead = o_t.shape[:-1]
    feat = mul(reshape(o_t, lead + (m, 1)), p.u)  # [..., m, P]
    act = unary(reshape(state, lead + (1, P)) + feat, "tanh")
    return reshape(matmul(act, reshape(p.v, (P, 1))), lead + (m,))


def reweight(o_t, alpha) -> Tensor:
    if o_t.shape != alpha.shape:
        raise ShapeError(f"reweight: features {o_t.shape} vs weights {alpha.shape}")
    return mul(o_t, alpha)


def attention_steps(seq: Tensor, p: InputAttentionParams, attention_on: bool = True):
    """Run the attention-fed LSTM over ``seq`` ([..., T', m]).

    Returns per-step hidden states and per-step feature weights (``None``
    entries when attention is off).
    """
    T = seq.shape[-2]
    if T < 1:
        raise ShapeError("attention_encode needs at least one step")
    D = p.cell.hidden
    zeros = Tensor(np.zeros(seq.shape[:-2] + (D,)))
    h, s = zeros, zeros
    hiddens, weights = [], []
    for t in range(T):
        o_t = seq[..., t, :]
        if attention_on:
            alpha = softmax(attention_scores(o_t, h, s, p), axis=-1)
            o_t = reweight(o_t, alpha)
            weights.append(alpha)
        else:
            weights.append(None)
        h, s = lstm_step(o_t, h, s, p.cell)
        hiddens.append(h)
    return hiddens, weights


def attention_encode(seq: Tensor, p: InputAttentionParams, attention_on: bool = True) -> Tensor:
    hiddens, _ = attention_steps(seq, p, attention_on)
    return stack(hiddens, axis=-2)


# ---------------------------------------------------------------------------
# social pooling

def grid_assignments(positions: np.ndarray, cfg: SocialGridConfig,
                     groups: np.ndarray | None = None):
    """Focal/neighbour/cell triples for every in-cube neighbour pair.

    ``positions`` is ``[N, 3]`` in meters. Only fighters sharing a group are
    neighbours, and a fighter is never its own neighbour. Cells are half-open,
    so an offset of exactly +R on any axis falls outside.
    """
    pos = np.asarray(positions, dtype=np.float64)
    N = pos.shape[0]
    if groups is None:
        groups = np.zeros(N, dtype=np.int64)
    same = (groups[:, None] == groups[None, :]) & ~np.eye(N, dtype=bool)
    focal, nbr = np.nonzero(same)
    R, G = cfg.extent_m, cfg.cells
    delta = pos[nbr] - pos[focal]
    inside = np.all((delta >= -R) & (delta < R), axis=1)
    focal, nbr, delta = focal[inside], nbr[inside], delta[inside]
    idx = np.floor((delta + R) * (G / (2.0 * R))).astype(np.int64)
    idx = np.clip(idx, 0, G - 1)  # guards float rounding just below +R
    cell = (idx[:, 0] * G + idx[:, 1]) * G + idx[:, 2]
    return focal, nbr, cell


def social_grid(positions: np.ndarray, hiddens: Tensor, cfg: SocialGridConfig,
                groups: np.ndarray | None = None) -> Tensor:
    """Occupancy grid ``[N, G^3, D]`` summing neighbour hidden states per cell."""
    N, D = hiddens.shape
    G3 = cfg.cells ** 3
    focal, nbr, cell = grid_assignments(positions, cfg, groups)
    h = hiddens.data
    # canonical summation order so neighbour order cannot change the bits
    keys = [h[nbr, d] for d in range(D - 1, -1, -1)] + [cell, focal]
    order = np.lexsort(keys)
    focal, nbr, cell = focal[order], nbr[order], cell[order]
    flat = focal * G3 + cell
    out = np.zeros((N * G3, D))
    np.add.at(out, flat, h[nbr])

    def _bw(g):
        gh = np.zeros_like(h)
        np.add.at(gh, nbr, g.reshape(N * G3, D)[flat])
        hiddens._accum(gh)

    return Tensor._make(out.reshape(N, G3, D), (hiddens,), "social_grid", _bw)


def social_pool(positions: np.ndarray, hiddens: Tensor, cfg: SocialGridConfig,
                embed: LinearParams, groups: np.ndarray | None = None) -> Tensor:
    """Pooled social tensor H_i for every fighter: embed(flatten(grid_i))."""
    grid = social_grid(positions, hiddens, cfg, groups)
    N = grid.shape[0]
    return linear(reshape(grid, (N, -1)), embed)
