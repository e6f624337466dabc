"""ReLU-attention transformers and an explicit looped construction that runs
bi-level GD-2SLS inside the forward pass.

Embedding layout (0-based rows, one column per sample, query last)::

    [0, q)              z_i
    [q, q+p)            x_i
    q+p                 y_i * t_i      (0 in the query column)
    [D0, D0+qp)         Theta, column k stored in rows D0+k*q .. D0+k*q+q-1
    [D0+qp, D0+qp+p)    beta
    [D0+qp+p, D0+qp+2p) xhat_i (first-stage prediction for sample i)
    D-2                 1
    D-1                 t_i            (1 for training samples, 0 for the query)

with D0 = q+p+1 and D = qp + 3p + q + 3. Theta and beta are replicated in
every column.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Callable, Sequence

import numpy as np

from .datagen import Dataset
from .gd2sls import DivergenceError, GDState, LearningRates, choose_rates, iterate

MASK_SAFETY = 10.0
MASK_FLOOR = 1.0
DEFAULT_DELTA = 5.0


class CorruptedStateError(ValueError):
    """The replicated Theta/beta rows disagree across columns."""


class ForwardDivergenceError(RuntimeError):
    def __init__(self, loop: int):
        super().__init__(f"non-finite activations after loop {loop}")
        self.loop = loop


def _relu(a):
    return np.maximum(a, 0.0)


# Layout --------------------------------------------------------------------


@dataclass(frozen=True)
class Layout:
    p: int
    q: int

    @property
    def dim(self) -> int:
        return self.q * self.p + 3 * self.p + self.q + 3

    @property
    def d0(self) -> int:
        return self.q + self.p + 1

    def z(self, l: int) -> int:
        return l

    def x(self, k: int) -> int:
        return self.q + k

    @property
    def y(self) -> int:
        return self.q + self.p

    def theta(self, l: int, k: int) -> int:
        return self.d0 + k * self.q + l

    def beta(self, k: int) -> int:
        return self.d0 + self.q * self.p + k

    def xhat(self, k: int) -> int:
        return self.d0 + self.q * self.p + self.p + k

    @property
    def one(self) -> int:
        return self.dim - 2

    @property
    def t(self) -> int:
        return self.dim - 1

    @property
    def theta_rows(self) -> slice:
        return slice(self.d0, self.d0 + self.q * self.p)

    @property
    def beta_rows(self) -> slice:
        return slice(self.beta(0), self.beta(0) + self.p)

    @property
    def xhat_rows(self) -> slice:
        return slice(self.xhat(0), self.xhat(0) + self.p)

    @property
    def state_rows(self) -> slice:
        """Theta, beta and xhat rows (contiguous)."""
        return slice(self.d0, self.xhat(0) + self.p)


@dataclass(frozen=True)
class EmbeddedPrompt:
    h: np.ndarray
    p: int
    q: int

    @property
    def layout(self) -> Layout:
        return Layout(self.p, self.q)

    @property
    def n(self) -> int:
        return self.h.shape[-1] - 1


def embed(data: Dataset, init: GDState | None = None, xhat=None) -> EmbeddedPrompt:
    """Build the D x (n+1) prompt matrix with the optimiser state rows."""
    p, q, n = data.p, data.q, data.n
    if init is None:
        init = GDState.zeros(p, q)
    if init.theta.shape != (q, p) or init.beta.shape != (p,):
        raise ValueError(f"initial state shapes {init.theta.shape}, {init.beta.shape} do not match p={p}, q={q}")
    lay = Layout(p, q)
    h = np.zeros((lay.dim, n + 1))
    h[:q, :n] = data.z.T
    h[:q, n] = data.z_query
    h[q : q + p, :n] = data.x.T
    h[q : q + p, n] = data.x_query
    h[lay.y, :n] = data.y
    h[lay.theta_rows, :] = init.theta.T.reshape(-1)[:, None]
    h[lay.beta_rows, :] = init.beta[:, None]
    if xhat is not None:
        h[lay.xhat_rows, :] = np.asarray(xhat, dtype=float).T
    h[lay.one, :] = 1.0
    h[lay.t, :n] = 1.0
    return EmbeddedPrompt(h, p, q)


def extract_state(prompt: EmbeddedPrompt, tol: float = 1e-9) -> tuple[GDState, np.ndarray]:
    """Read (Theta, beta) from column 0 and xhat as an (n+1, p) array."""
    lay = prompt.layout
    h = prompt.h
    rep = h[lay.d0 : lay.beta(0) + prompt.p, :]
    spread = np.max(np.abs(rep - rep[:, :1]), initial=0.0)
    if spread > tol * max(1.0, float(np.max(np.abs(rep[:, 0]), initial=0.0))):
        raise CorruptedStateError(f"state rows differ across columns by {spread:.3g}")
    theta = h[lay.theta_rows, 0].reshape(prompt.p, prompt.q).T.copy()
    beta = h[lay.beta_rows, 0].copy()
    xhat = h[lay.xhat_rows, :].T.copy()
    return GDState(theta, beta), xhat


def read_y(prompt: EmbeddedPrompt) -> float:
    return float(prompt.h[prompt.q + prompt.p, -1])


# Layers --------------------------------------------------------------------


@dataclass(frozen=True)
class AttentionLayerParams:
    """Multi-head ReLU attention; ``q``, ``k``, ``v`` are stacked (M, D, D)."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if not (self.q.shape == self.k.shape == self.v.shape) or self.q.ndim != 3:
            raise ValueError("Q, K, V must be stacks of equal D x D matrices")
        if self.q.shape[1] != self.q.shape[2] or self.q.shape[0] < 1:
            raise ValueError("need at least one square head")

    @classmethod
    def from_heads(cls, heads: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]]) -> "AttentionLayerParams":
        qs, ks, vs = zip(*heads)
        return cls(np.stack(qs), np.stack(ks), np.stack(vs))

    @property
    def num_heads(self) -> int:
        return self.q.shape[0]

    @property
    def dim(self) -> int:
        return self.q.shape[1]

    @property
    def heads(self) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        return list(zip(self.q, self.k, self.v))

    @cached_property
    def compiled(self) -> "_CompiledAttention":
        return _CompiledAttention(self)


@dataclass(frozen=True)
class MlpLayerParams:
    w1: np.ndarray  # (D', D)
    w2: np.ndarray  # (D, D')

    def __post_init__(self):
        if self.w1.ndim != 2 or self.w2.ndim != 2 or self.w1.shape[::-1] != self.w2.shape:
            raise ValueError(f"inconsistent MLP shapes {self.w1.shape}, {self.w2.shape}")


def attention_forward(h, layer: AttentionLayerParams) -> np.ndarray:
    """Column i gains (1/N) sum_m sum_j relu(<Q_m h_i, K_m h_j>) V_m h_j.

    In matrix form H + (1/N) sum_m (V_m H) relu((K_m H)^T (Q_m H)), with N the
    number of columns: queries are read from the updated column, keys and
    values from the attended one. Evaluated head by head. ``h`` may carry
    leading batch dimensions, ``(..., D, N)``.
    """
    h = np.asarray(h, dtype=float)
    if h.ndim < 2 or h.shape[-2] != layer.dim:
        raise ValueError(f"input has shape {h.shape}, layer expects {layer.dim} rows")
    n_cols = h.shape[-1]
    out = h.copy()
    for qm, km, vm in layer.heads:
        scores = _relu(np.swapaxes(km @ h, -1, -2) @ (qm @ h))
        out = out + ((vm @ h) @ scores) / n_cols
    return out


def mlp_forward(h, layer: MlpLayerParams) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if h.shape[-2] != layer.w1.shape[1]:
        raise ValueError(f"input has shape {h.shape}, layer expects {layer.w1.shape[1]} rows")
    return h + layer.w2 @ _relu(layer.w1 @ h)


@dataclass(frozen=True)
class TransformerLayer:
    attn: AttentionLayerParams
    mlp: MlpLayerParams | None = None  # None is the attention-only (D' = 0) case


def transformer_forward(h, layers: Sequence[TransformerLayer]) -> np.ndarray:
    for layer in layers:
        h = attention_forward(h, layer.attn)
        if layer.mlp is not None:
            h = mlp_forward(h, layer.mlp)
    return h


def _rows(mask: np.ndarray) -> np.ndarray:
    return np.nonzero(mask)[0]


class _StackedAttention:
    """Fast evaluation of the attention formula for a stack of layers that
    share head count and dimension, applied to inputs of shape (B, P, D, N):
    P prompts per layer.

    Heads whose V_m is zero in every layer are dropped. For the rest, the rows
    of H each head reads are checked for being constant across columns (over
    the whole stack). If Q_m only reads such rows then Q_m h_i = Q_m h_0, the
    score of source column j is relu(a_m' h_j) with a_m = K_m' Q_m h_0, and
    every column receives the same update V_m H s_m. If instead K_m only reads
    constant rows, column i receives (V_m H 1) relu(b_m' h_i) with
    b_m = Q_m' K_m h_0. Other heads use the full N x N score matrix. All
    products are restricted to the rows a head reads or writes.
    """

    def __init__(self, layers: Sequence[AttentionLayerParams]):
        first = layers[0]
        if any(l.q.shape != first.q.shape for l in layers):
            raise ValueError("stacked layers must share head count and dimension")
        self.layers = list(layers)
        self.dim = first.dim
        v_any = np.zeros(first.num_heads, dtype=bool)
        for l in layers:
            v_any |= np.any(l.v != 0, axis=(1, 2))
        self.kept = _rows(v_any)
        m = len(self.kept)
        shape = (m, self.dim)
        self.q_reads = np.zeros(shape, bool)
        self.k_reads = np.zeros(shape, bool)
        self.v_reads = np.zeros(shape, bool)
        self.v_writes = np.zeros(shape, bool)
        for l in layers:
            q, k, v = l.q[self.kept], l.k[self.kept], l.v[self.kept]
            self.q_reads |= np.any(q != 0, axis=1)
            self.k_reads |= np.any(k != 0, axis=1)
            self.v_reads |= np.any(v != 0, axis=1)
            self.v_writes |= np.any(v != 0, axis=2)
        self._cache: dict = {}

    def _sets(self, sel):
        return (
            _rows(self.q_reads[sel].any(0)),
            _rows(self.k_reads[sel].any(0)),
            _rows(self.v_reads[sel].any(0)),
            _rows(self.v_writes[sel].any(0)),
        )

    def _packed(self, mode: str, sel: np.ndarray):
        key = (mode, sel.tobytes())
        if key in self._cache:
            return self._cache[key]
        heads = self.kept[sel]
        uq, uk, uv, tw = self._sets(sel)
        # Layers shared by every stacked model (the parameter-free ones) are packed once.
        shared = all(l is self.layers[0] for l in self.layers)
        layers = self.layers[:1] if shared else self.layers
        if mode in ("q", "k"):
            rows_a, rows_b = (uk, uq) if mode == "q" else (uq, uk)
            left, right = (1, 0) if mode == "q" else (0, 1)  # K'Q or Q'K
            bil = np.stack(
                [
                    np.concatenate(
                        [np.swapaxes(mats[left][m][:, rows_a], 0, 1) @ mats[right][m][:, rows_b] for m in heads],
                        axis=0,
                    )
                    for mats in ((l.q, l.k) for l in layers)
                ]
            )
            join = 1 if mode == "q" else 0
            vals = np.stack([np.concatenate([l.v[m][np.ix_(tw, uv)] for m in heads], axis=join) for l in layers])
        else:
            bil = None
            vals = [
                (
                    np.stack([l.q[m] for l in layers]),
                    np.stack([l.k[m] for l in layers]),
                    np.stack([l.v[m] for l in layers]),
                )
                for m in heads
            ]
        if len(tw) and tw[-1] - tw[0] + 1 == len(tw):
            tw = slice(int(tw[0]), int(tw[-1]) + 1)  # contiguous rows: write through a view
        out = ((uq, uk, uv, tw), bil, vals)
        self._cache[key] = out
        return out

    def subset(self, idx) -> "_StackedAttention":
        return _StackedAttention([self.layers[i] for i in idx])

    def __call__(self, h: np.ndarray, inplace: bool = False) -> np.ndarray:
        out = h if inplace else h.copy()
        if len(self.kept) == 0:
            return out
        n_cols = h.shape[-1]
        row_const = np.all(h == h[..., :1], axis=(0, 1, 3))
        q_const = ~np.any(self.q_reads & ~row_const, axis=1)
        k_const = ~np.any(self.k_reads & ~row_const, axis=1) & ~q_const
        general = ~(q_const | k_const)
        h0 = h[..., 0]  # (B, P, D)
        scale = 1.0 / n_cols
        updates = []
        if q_const.any():
            (uq, uk, uv, tw), bil, vals = self._packed("q", q_const)
            m = int(q_const.sum())
            a = h0[..., uq] @ np.swapaxes(bil, -1, -2)  # (B, P, m*|uk|)
            a = a.reshape(*a.shape[:-1], m, len(uk))
            s = _relu(a @ h[:, :, uk, :])  # (B, P, m, N)
            u = s @ np.swapaxes(h[:, :, uv, :], -1, -2)  # (B, P, m, |uv|)
            shift = u.reshape(*u.shape[:-2], m * len(uv)) @ np.swapaxes(vals, -1, -2)
            updates.append((tw, (shift * scale)[..., None]))
        if k_const.any():
            (uq, uk, uv, tw), bil, vals = self._packed("k", k_const)
            m = int(k_const.sum())
            bvec = h0[..., uk] @ np.swapaxes(bil, -1, -2)  # (B, P, m*|uq|)
            bvec = bvec.reshape(*bvec.shape[:-1], m, len(uq))
            hsum = h[:, :, uv, :].sum(axis=-1)  # (B, P, |uv|)
            c = hsum @ np.swapaxes(vals, -1, -2)  # (B, P, m*|tw|)
            c = c.reshape(*c.shape[:-1], m, -1)
            part = np.swapaxes(c, -1, -2) @ _relu(bvec @ h[:, :, uq, :])
            updates.append((tw, part * scale))
        if general.any():
            _, _, mats = self._packed("g", general)
            total = 0.0
            for qm, km, vm in mats:
                qm, km, vm = qm[:, None], km[:, None], vm[:, None]
                scores = _relu(np.swapaxes(km @ h, -1, -2) @ (qm @ h))
                total = total + (vm @ h) @ scores
            updates.append((slice(None), total * scale))
        for rows, upd in updates:
            out[:, :, rows, :] += upd
        return out


def _as_stack(h: np.ndarray) -> tuple[np.ndarray, tuple]:
    lead = h.shape[:-2]
    return h.reshape(1, -1, *h.shape[-2:]), lead


class _CompiledAttention:
    """Single-layer view of :class:`_StackedAttention` for any leading dims."""

    def __init__(self, layer: AttentionLayerParams):
        self.stack = _StackedAttention([layer])

    def __call__(self, h: np.ndarray) -> np.ndarray:
        flat, lead = _as_stack(np.asarray(h, dtype=float))
        return self.stack(flat).reshape(*lead, *h.shape[-2:])


# Construction --------------------------------------------------------------


@dataclass(frozen=True)
class BlockParams:
    """Two attention layers that together perform one GD-2SLS update."""

    layer1: AttentionLayerParams
    layer2: AttentionLayerParams
    rates: LearningRates
    mask: float
    mask_y: float
    lam: float = 0.0
    tau: float = 0.0

    def forward(self, h, fast: bool = True) -> np.ndarray:
        if fast:
            return self.layer2.compiled(self.layer1.compiled(h))
        return attention_forward(attention_forward(h, self.layer1), self.layer2)


def _frozen(layer: AttentionLayerParams) -> AttentionLayerParams:
    for arr in (layer.q, layer.k, layer.v):
        arr.flags.writeable = False
    return layer


@lru_cache(maxsize=64)
def _first_layer(p: int, q: int) -> AttentionLayerParams:
    # Parameter free, so one read-only copy per shape is shared by all blocks.
    lay = Layout(p, q)
    d = lay.dim
    heads = []
    for k in range(p):
        for sign in (1.0, -1.0):
            qm, km, vm = np.zeros((d, d)), np.zeros((d, d)), np.zeros((d, d))
            for l in range(q):
                qm[l, lay.z(l)] = sign
                km[l, lay.theta(l, k)] = 1.0
            qm[q, lay.xhat(k)] = 1.0
            km[q, lay.one] = -sign
            vm[lay.xhat(k), lay.one] = sign
            heads.append((qm, km, vm))
    return _frozen(AttentionLayerParams.from_heads(heads))


def _second_layer_dense(lay: Layout, eta_n: float, alpha_n: float, mask: float, mask_y: float, ridge=None):
    """Layer-2 weights; ``eta_n`` = (n+1) eta, ``alpha_n`` = (n+1) alpha and
    ``ridge`` = (eta tau, alpha lam) or None for the plain block."""
    p, q, d = lay.p, lay.q, lay.dim
    heads = []
    # Theta columns: masked residual heads, the query column scores below zero.
    for k in range(p):
        for sign in (1.0, -1.0):
            qm, km, vm = np.zeros((d, d)), np.zeros((d, d)), np.zeros((d, d))
            for l in range(q):
                qm[l, lay.theta(l, k)] = sign
                km[l, lay.z(l)] = 1.0
                vm[lay.theta(l, k), lay.z(l)] = -sign * eta_n
            qm[q, lay.one] = -sign
            qm[q + 1, lay.one] = -1.0
            km[q, lay.x(k)] = 1.0
            km[q + 1, lay.one] = mask
            km[q + 1, lay.t] = -mask
            heads.append((qm, km, vm))
    # beta: residual of the second stage on the fresh first-stage predictions.
    for sign in (1.0, -1.0):
        qm, km, vm = np.zeros((d, d)), np.zeros((d, d)), np.zeros((d, d))
        for l in range(p):
            qm[l, lay.beta(l)] = sign
            km[l, lay.xhat(l)] = 1.0
            vm[lay.beta(l), lay.xhat(l)] = -sign * alpha_n
        qm[p, lay.one] = -sign
        qm[p + 1, lay.one] = -1.0
        km[p, lay.y] = 1.0
        km[p + 1, lay.one] = mask_y
        km[p + 1, lay.t] = -mask_y
        heads.append((qm, km, vm))
    if ridge is not None:
        eta_tau, alpha_lam = ridge
        # Constant-score heads: every column contributes the same decay term.
        for k in range(p):
            qm, km, vm = np.zeros((d, d)), np.zeros((d, d)), np.zeros((d, d))
            qm[0, lay.one] = 1.0
            km[0, lay.one] = 1.0
            for l in range(q):
                vm[lay.theta(l, k), lay.theta(l, k)] = -eta_tau
            heads.append((qm, km, vm))
        qm, km, vm = np.zeros((d, d)), np.zeros((d, d)), np.zeros((d, d))
        qm[0, lay.one] = 1.0
        km[0, lay.one] = 1.0
        for l in range(p):
            vm[lay.beta(l), lay.beta(l)] = -alpha_lam
        heads.append((qm, km, vm))
    return np.stack([np.stack(m) for m in zip(*heads)])  # (3, M, D, D)


@lru_cache(maxsize=64)
def _second_layer_template(p: int, q: int, ridge: bool):
    # Every entry is a constant or linear in exactly one scalar, so the layer is
    # a sparse constant part plus one sparse unit pattern per scalar.
    lay = Layout(p, q)
    n_scalars = 6 if ridge else 4

    def dense(values):
        return _second_layer_dense(lay, *values[:4], ridge=tuple(values[4:]) if ridge else None)

    base = dense([0.0] * n_scalars)
    parts = []
    for i in range(n_scalars):
        unit = [0.0] * n_scalars
        unit[i] = 1.0
        idx = np.flatnonzero(dense(unit) - base)
        parts.append((idx, (dense(unit) - base).flat[idx]))
    base_idx = np.flatnonzero(base)
    return base.shape, (base_idx, base.flat[base_idx]), parts


def _second_layer(p, q, n, rates: LearningRates, mask, mask_y, ridge=None) -> AttentionLayerParams:
    shape, (base_idx, base_vals), parts = _second_layer_template(p, q, ridge is not None)
    scalars = [(n + 1) * rates.eta, (n + 1) * rates.alpha, mask, mask_y]
    if ridge is not None:
        lam, tau = ridge
        scalars += [rates.eta * tau, rates.alpha * lam]
    w = np.zeros(shape)
    flat = w.reshape(-1)
    flat[base_idx] = base_vals
    for value, (idx, unit) in zip(scalars, parts):
        flat[idx] += value * unit
    return AttentionLayerParams(w[0], w[1], w[2])


def build_block(p: int, q: int, n: int, rates: LearningRates, mask: float, mask_y: float) -> BlockParams:
    """Layer 1 (2p heads) recomputes xhat = Z Theta in every column; layer 2
    (2p + 2 heads) applies the Theta and beta gradient steps from training
    columns only. ``mask`` and ``mask_y`` must exceed the magnitude of every
    query-column score they suppress (see :func:`compute_mask_bounds`)."""
    return BlockParams(_first_layer(p, q), _second_layer(p, q, n, rates, mask, mask_y), rates, mask, mask_y)


def build_ridge_block(
    p: int, q: int, n: int, rates: LearningRates, mask: float, mask_y: float, lam: float, tau: float
) -> BlockParams:
    """As :func:`build_block` plus p + 1 heads adding -eta*tau*Theta and -alpha*lam*beta."""
    layer2 = _second_layer(p, q, n, rates, mask, mask_y, ridge=(lam, tau))
    return BlockParams(_first_layer(p, q), layer2, rates, mask, mask_y, lam, tau)


@lru_cache(maxsize=64)
def build_readout(p: int, q: int) -> AttentionLayerParams:
    """Two heads writing relu(b'x_i) - relu(-b'x_i) = b'x_i into every y slot."""
    lay = Layout(p, q)
    d = lay.dim
    heads = []
    for sign in (1.0, -1.0):
        qm, km, vm = np.zeros((d, d)), np.zeros((d, d)), np.zeros((d, d))
        for l in range(p):
            qm[l, lay.x(l)] = sign
            km[l, lay.beta(l)] = 1.0
        vm[lay.y, lay.one] = sign
        heads.append((qm, km, vm))
    return _frozen(AttentionLayerParams.from_heads(heads))


def compute_mask_bounds(
    data: Dataset,
    rates: LearningRates,
    loops: int,
    lam: float = 0.0,
    tau: float = 0.0,
    x_query_slack: float = 0.0,
    safety: float = MASK_SAFETY,
    floor: float = MASK_FLOOR,
) -> tuple[float, float]:
    """Mask constants from a reference GD run of ``loops`` steps.

    ``mask`` covers ||Theta_t' z_i|| and every masked first-stage residual
    |Theta_t[:, k]' z_i - x_ik|; ``mask_y`` covers |beta_t' x_i| and the masked
    second-stage score |beta_t' Theta_t' z_i|. Maxima run over all samples
    (query included) and t = 0..loops, are multiplied by ``safety`` and floored
    at ``floor``. ``x_query_slack`` widens the bound for later perturbations of
    the query regressors (coefficient extraction).
    """
    if loops < 1:
        raise ValueError("loops must be at least 1")
    thetas, betas = iterate(data, rates, loops, lam=lam, tau=tau)
    z_all = np.vstack([data.z, data.z_query])
    x_all = np.vstack([data.x, data.x_query])
    proj = z_all @ thetas  # (T+1, n+1, p)
    resid = np.abs(proj - x_all)
    resid[:, -1, :] += abs(x_query_slack)
    mask = max(float(np.max(np.linalg.norm(proj, axis=2))), float(np.max(resid)))
    bx = np.abs(betas @ x_all.T)  # (T+1, n+1)
    bx[:, -1] += abs(x_query_slack) * np.sum(np.abs(betas), axis=1)
    second = np.abs(np.einsum("tip,tp->ti", proj, betas))
    mask_y = max(float(np.max(bx)), float(np.max(second)))
    return max(safety * mask, floor), max(safety * mask_y, floor)


@dataclass(frozen=True)
class LoopedModel:
    block: BlockParams
    loops: int
    readout: AttentionLayerParams
    p: int
    q: int
    n: int

    def __post_init__(self):
        if self.loops < 1:
            raise ValueError("loops must be at least 1")


def build_looped_model(
    data: Dataset,
    loops: int,
    rates: LearningRates | None = None,
    lam: float = 0.0,
    tau: float = 0.0,
    x_query_slack: float = 0.0,
) -> LoopedModel:
    """Assemble block, loop count and readout for prompts shaped like ``data``."""
    if rates is None:
        rates = choose_rates(data, "safe")
    mask, mask_y = compute_mask_bounds(data, rates, loops, lam, tau, x_query_slack)
    if lam or tau:
        block = build_ridge_block(data.p, data.q, data.n, rates, mask, mask_y, lam, tau)
    else:
        block = build_block(data.p, data.q, data.n, rates, mask, mask_y)
    return LoopedModel(block, loops, build_readout(data.p, data.q), data.p, data.q, data.n)


def loops_for_tolerance(rate: float, eps: float) -> int:
    """ceil(log_rate(eps)), at least 1."""
    if not 0.0 < rate < 1.0:
        raise ValueError("contraction rate must lie in (0, 1)")
    return max(1, math.ceil(math.log(eps) / math.log(rate)))


def _clip_columns(h: np.ndarray, radius: float) -> np.ndarray:
    norms = np.linalg.norm(h, axis=-2, keepdims=True)
    return h * np.minimum(1.0, radius / np.maximum(norms, 1e-300))


def looped_forward(
    model: LoopedModel,
    prompt: EmbeddedPrompt | np.ndarray,
    on_loop: Callable[[int, np.ndarray], None] | None = None,
    fast: bool = True,
    readout: bool = True,
    clip_radius: float = math.inf,
):
    """Apply the shared block ``model.loops`` times, then the readout layer.

    Accepts an :class:`EmbeddedPrompt` (returns one) or a raw array with
    optional leading batch dimensions (returns an array). ``on_loop`` is
    called with the loop index (1-based) and the activations after each loop.
    A finite ``clip_radius`` rescales every column onto that ball after each
    loop; constructed models run unclipped.
    """
    h = prompt.h if isinstance(prompt, EmbeddedPrompt) else np.asarray(prompt, dtype=float)
    block = model.block
    for loop in range(1, model.loops + 1):
        h = block.forward(h, fast)
        if not math.isinf(clip_radius):
            h = _clip_columns(h, clip_radius)
        if not np.all(np.isfinite(h)):
            raise ForwardDivergenceError(loop)
        if on_loop is not None:
            on_loop(loop, h)
    if readout:
        h = model.readout.compiled(h) if fast else attention_forward(h, model.readout)
    if isinstance(prompt, EmbeddedPrompt):
        return EmbeddedPrompt(h, prompt.p, prompt.q)
    return h


def looped_forward_stack(models: Sequence[LoopedModel], h) -> tuple[np.ndarray, np.ndarray]:
    """Run B looped models side by side on inputs of shape (B, P, D, N).

    Models must share p, q, n and head counts; each applies its own block for
    its own number of loops (shorter ones are frozen once done) and then its
    readout. A model whose activations stop being finite is frozen from then
    on (its activations may hold non-finite values). Returns ``(output,
    diverged_at)`` where ``diverged_at[b]`` is the loop at which model b was
    found non-finite, or 0. Each loop only inspects the optimizer-state rows
    of the query column, which every head writes through; a full check after
    the last loop catches anything left (reported as the final loop).
    """
    h = np.array(h, dtype=float)
    if h.ndim != 4 or h.shape[0] != len(models):
        raise ValueError("expected inputs of shape (len(models), P, D, N)")
    layer1 = _StackedAttention([m.block.layer1 for m in models])
    layer2 = _StackedAttention([m.block.layer2 for m in models])
    readout = _StackedAttention([m.readout for m in models])
    loops = np.array([m.loops for m in models])
    diverged = np.zeros(len(models), dtype=int)
    active = np.arange(len(models))
    sub1, sub2 = layer1, layer2
    watch = Layout(models[0].p, models[0].q).state_rows
    for loop in range(1, int(loops.max()) + 1):
        still = active[(loops[active] >= loop) & (diverged[active] == 0)]
        if len(still) != len(active):
            active = still
            if len(active) == 0:
                break
            sub1, sub2 = layer1.subset(active), layer2.subset(active)
        if len(active) == len(models):
            sub2(sub1(h, inplace=True), inplace=True)
            bad = ~np.all(np.isfinite(h[:, :, watch, -1]), axis=(1, 2))
        else:
            part = sub2(sub1(h[active], inplace=True), inplace=True)
            bad_part = ~np.all(np.isfinite(part[:, :, watch, -1]), axis=(1, 2))
            keep = active[~bad_part]
            h[keep] = part[~bad_part]
            bad = np.zeros(len(models), dtype=bool)
            bad[active[bad_part]] = True
        diverged[bad & (diverged == 0)] = loop
    late = ~np.all(np.isfinite(h), axis=(1, 2, 3)) & (diverged == 0)
    diverged[late] = loops[late]
    return readout(h), diverged


# Prediction and coefficient extraction --------------------------------------


@dataclass
class ConstructedPredictor:
    """Callable ``Dataset -> y_hat`` backed by a fixed looped model."""

    model: LoopedModel
    init: GDState | None = None
    fast: bool = True

    def __call__(self, data: Dataset) -> float:
        return read_y(looped_forward(self.model, embed(data, self.init), fast=self.fast))

    def predict_batch(self, datasets: Sequence[Dataset]) -> np.ndarray:
        hs = np.stack([embed(d, self.init).h for d in datasets])
        out = looped_forward(self.model, hs, fast=self.fast)
        return out[:, self.model.q + self.model.p, -1].copy()


def extract_coefficients(predictor, data: Dataset, delta: float = DEFAULT_DELTA) -> np.ndarray:
    """Finite-difference coefficients along each query regressor.

    beta_k = (f(x_query + delta e_k) - f(x_query)) / delta. Predictors that
    expose ``predict_batch`` are evaluated on all p + 1 prompts at once.
    """
    if delta == 0:
        raise ValueError("delta must be nonzero")
    p = data.p
    probes = [data]
    for k in range(p):
        xq = data.x_query.copy()
        xq[k] += delta
        probes.append(data.with_x_query(xq))
    if hasattr(predictor, "predict_batch"):
        values = np.asarray(predictor.predict_batch(probes), dtype=float)
    else:
        values = np.array([predictor(d) for d in probes], dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("predictor returned a non-finite value")
    return (values[1:] - values[0]) / delta


# Serialisation -------------------------------------------------------------


def dump_model(model: LoopedModel, path) -> None:
    """Write all head matrices as CSV, one matrix row per line.

    The first line is a ``#`` header with p, q, n, D, the head count of each
    layer, loops and the scalars
    baked into the weights; each following line is
    ``layer,head,matrix,row,v_0,...,v_{D-1}`` with values in ``repr`` form.
    """
    lay = Layout(model.p, model.q)
    b = model.block
    meta = {
        "p": model.p,
        "q": model.q,
        "n": model.n,
        "D": lay.dim,
        "M1": b.layer1.num_heads,
        "M2": b.layer2.num_heads,
        "M_readout": model.readout.num_heads,
        "loops": model.loops,
        "alpha": b.rates.alpha,
        "eta": b.rates.eta,
        "mask": b.mask,
        "mask_y": b.mask_y,
        "lam": b.lam,
        "tau": b.tau,
    }
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# " + ",".join(f"{k}={v!r}" for k, v in meta.items()) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "head", "matrix", "row"] + [f"c{j}" for j in range(lay.dim)])
        for name, layer in (("block1", b.layer1), ("block2", b.layer2), ("readout", model.readout)):
            for m, (qm, km, vm) in enumerate(layer.heads):
                for mat_name, mat in (("Q", qm), ("K", km), ("V", vm)):
                    for r, row in enumerate(mat):
                        w.writerow([name, m, mat_name, r] + [repr(float(v)) for v in row])


def load_model(path) -> LoopedModel:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("# "):
            raise ValueError("missing model header line")
        meta = dict(item.split("=", 1) for item in header[2:].strip().split(","))
        p, q, n, dim = (int(meta[k]) for k in ("p", "q", "n", "D"))
        rows: dict[tuple[str, int, str], dict[int, np.ndarray]] = {}
        reader = csv.reader(fh)
        next(reader)
        for rec in reader:
            key = (rec[0], int(rec[1]), rec[2])
            rows.setdefault(key, {})[int(rec[3])] = np.array([float(v) for v in rec[4:]])

    def layer(name: str) -> AttentionLayerParams:
        heads = sorted({k[1] for k in rows if k[0] == name})
        mats = []
        for m in heads:
            trip = []
            for mat_name in ("Q", "K", "V"):
                r = rows[(name, m, mat_name)]
                trip.append(np.stack([r[i] for i in range(dim)]))
            mats.append(tuple(trip))
        return AttentionLayerParams.from_heads(mats)

    layers = {name: layer(name) for name in ("block1", "block2", "readout")}
    for name, key in (("block1", "M1"), ("block2", "M2"), ("readout", "M_readout")):
        if key in meta and int(meta[key]) != layers[name].num_heads:
            raise ValueError(f"{name} has {layers[name].num_heads} heads, header says {meta[key]}")
    rates = LearningRates(float(meta["alpha"]), float(meta["eta"]))
    block = BlockParams(
        layers["block1"],
        layers["block2"],
        rates,
        float(meta["mask"]),
        float(meta["mask_y"]),
        float(meta["lam"]),
        float(meta["tau"]),
    )
    return LoopedModel(block, int(meta["loops"]), layers["readout"], p, q, n)


__all__ = [
    "Layout",
    "EmbeddedPrompt",
    "AttentionLayerParams",
    "MlpLayerParams",
    "TransformerLayer",
    "BlockParams",
    "LoopedModel",
    "ConstructedPredictor",
    "CorruptedStateError",
    "ForwardDivergenceError",
    "DivergenceError",
    "embed",
    "extract_state",
    "read_y",
    "attention_forward",
    "mlp_forward",
    "transformer_forward",
    "build_block",
    "build_ridge_block",
    "build_readout",
    "build_looped_model",
    "compute_mask_bounds",
    "loops_for_tolerance",
    "looped_forward",
    "looped_forward_stack",
    "extract_coefficients",
    "dump_model",
    "load_model",
]
