"""Gaussian-process regression of unmodeled dynamics with exact recursive updates.

One :class:`GpModel` models one output channel.  The model keeps the explicit
inverse ``L = (K + sn2 I)^-1`` so that adding or deleting ``M`` points only
needs an ``M x M`` inverse.  Explicit inverses condition worse than a Cholesky
factor; :meth:`GpModel.rebuild_error` exists so callers can audit drift.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

VARIANCE_CLAMP_ERROR = -1e-6
VARIANCE_CLAMP_LOG = -1e-9


class GpNumericError(ArithmeticError):
    """Raised when a block that must be inverted is numerically singular."""


@dataclass(frozen=True)
class KernelHyper:
    signal_variance: float
    length_scales: tuple[float, ...]
    noise_variance: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "length_scales", tuple(float(v) for v in self.length_scales))
        if not self.signal_variance > 0:
            raise ValueError("signal_variance must be positive")
        if len(self.length_scales) == 0 or min(self.length_scales) <= 0:
            raise ValueError("length_scales must be non-empty and positive")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be non-negative")

    @property
    def dim(self) -> int:
        return len(self.length_scales)

    def to_dict(self) -> dict:
        return {
            "signal_variance": self.signal_variance,
            "length_scales": list(self.length_scales),
            "noise_variance": self.noise_variance,
        }


@dataclass(frozen=True)
class Posterior:
    mean: float
    variance: float

    @property
    def std(self) -> float:
        return float(np.sqrt(self.variance))


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    k_delta: float

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def _check_dim(x: np.ndarray, hyper: KernelHyper) -> None:
    if x.shape[-1] != hyper.dim:
        raise ValueError(
            f"feature dimension {x.shape[-1]} does not match {hyper.dim} length scales"
        )


def kernel_eval(x, y, hyper: KernelHyper) -> float:
    """Squared-exponential kernel with per-feature length scales."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    _check_dim(x, hyper)
    _check_dim(y, hyper)
    z = (x - y) / np.asarray(hyper.length_scales)
    return float(hyper.signal_variance * np.exp(-0.5 * np.dot(z, z)))


def kernel_matrix(X, Y, hyper: KernelHyper) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.size == 0 or Y.size == 0:
        return np.zeros((X.shape[0] if X.size else 0, Y.shape[0] if Y.size else 0))
    _check_dim(X, hyper)
    _check_dim(Y, hyper)
    ell = np.asarray(hyper.length_scales)
    A = X / ell
    B = Y / ell
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    np.maximum(sq, 0.0, out=sq)
    return hyper.signal_variance * np.exp(-0.5 * sq)


@dataclass(frozen=True)
class GpModel:
    """Budgeted GP for a single output channel.

    ``inputs`` is ``(N, d)``, ``targets`` is ``(N,)`` and ``inv`` the maintained
    ``(K + sn2 I)^-1``.  Operations return new models; nothing mutates in place.
    """

    inputs: np.ndarray
    targets: np.ndarray
    hyper: KernelHyper
    inv: np.ndarray
    budget: int = 300
    alpha: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.alpha is None:
            object.__setattr__(self, "alpha", self.inv @ self.targets)

    @property
    def size(self) -> int:
        return int(self.targets.shape[0])

    def __len__(self) -> int:
        return self.size

    def gram(self) -> np.ndarray:
        """``K + sn2 I`` rebuilt from the stored inputs."""
        K = kernel_matrix(self.inputs, self.inputs, self.hyper)
        return K + self.hyper.noise_variance * np.eye(self.size)

    def rebuild_error(self) -> float:
        """Max-abs difference between ``inv`` and a fresh dense inverse."""
        if self.size == 0:
            return 0.0
        return float(np.max(np.abs(self.inv - np.linalg.inv(self.gram()))))

    def to_json(self) -> str:
        return json.dumps(
            {
                "inputs": self.inputs.tolist(),
                "targets": self.targets.tolist(),
                "hyper": self.hyper.to_dict(),
                "budget": self.budget,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "GpModel":
        doc = json.loads(text)
        hyper = KernelHyper(**doc["hyper"])
        inputs = np.asarray(doc["inputs"], dtype=float).reshape(-1, hyper.dim)
        return fit_batch(inputs, doc["targets"], hyper, budget=doc["budget"])


def empty_model(hyper: KernelHyper, budget: int = 300) -> GpModel:
    return GpModel(np.zeros((0, hyper.dim)), np.zeros(0), hyper, np.zeros((0, 0)), budget)


def _inv_small(S: np.ndarray, what: str) -> np.ndarray:
    # cond() of a 0x0 or tiny block is cheap; this is the only place we invert
    if S.size and (not np.all(np.isfinite(S)) or np.linalg.cond(S) > 1e14):
        raise GpNumericError(f"{what} block is numerically singular")
    try:
        return np.linalg.inv(S)
    except np.linalg.LinAlgError as exc:
        raise GpNumericError(f"{what} block is singular") from exc


def fit_batch(inputs, targets, hyper: KernelHyper, budget: int = 300) -> GpModel:
    """Direct construction; also the oracle the recursive updates are checked against."""
    X = np.asarray(inputs, dtype=float).reshape(-1, hyper.dim)
    y = np.asarray(targets, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise ValueError("inputs and targets differ in length")
    if X.shape[0] > budget:
        raise ValueError(f"{X.shape[0]} points exceed budget {budget}")
    if X.shape[0] == 0:
        return empty_model(hyper, budget)
    G = kernel_matrix(X, X, hyper) + hyper.noise_variance * np.eye(X.shape[0])
    inv = _inv_small(G, "kernel")
    inv = 0.5 * (inv + inv.T)
    return GpModel(X, y, hyper, inv, budget)


def posterior(model: GpModel, query) -> Posterior:
    mean, var = posterior_batch(model, np.atleast_2d(np.asarray(query, dtype=float)))
    return Posterior(float(mean[0]), float(var[0]))


def posterior_batch(model: GpModel, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance at each row of ``queries``."""
    Q = np.atleast_2d(np.asarray(queries, dtype=float))
    _check_dim(Q, model.hyper)
    prior = np.full(Q.shape[0], model.hyper.signal_variance)
    if model.size == 0:
        return np.zeros(Q.shape[0]), prior
    Ks = kernel_matrix(Q, model.inputs, model.hyper)
    mean = Ks @ model.alpha
    var = prior - np.einsum("ij,ij->i", Ks @ model.inv, Ks)
    low = var.min()
    if low < 0.0:
        if low < VARIANCE_CLAMP_ERROR:
            raise GpNumericError(f"posterior variance {low:.3e} is negative beyond tolerance")
        if low < VARIANCE_CLAMP_LOG:
            log.debug("clamped posterior variance %.3e to zero", low)
        np.maximum(var, 0.0, out=var)
    return mean, var


def confidence(model: GpModel, query, k_delta: float) -> ConfidenceInterval:
    if k_delta < 0:
        raise ValueError("k_delta must be non-negative")
    p = posterior(model, query)
    half = k_delta * p.std
    return ConfidenceInterval(p.mean - half, p.mean + half, k_delta)


def add_points(model: GpModel, new_inputs, new_targets) -> GpModel:
    """Append M points with the block-inverse identity.

    With ``k`` the N x M cross-kernel and ``c`` the M x M kernel of the new
    points, ``S = c + sn2 I - k^T L k`` is the only matrix inverted.
    """
    hyper = model.hyper
    Xn = np.asarray(new_inputs, dtype=float).reshape(-1, hyper.dim)
    yn = np.asarray(new_targets, dtype=float).ravel()
    M = Xn.shape[0]
    if M < 1 or yn.shape[0] != M:
        raise ValueError("need M >= 1 inputs with matching targets")
    if model.size == 0:
        return fit_batch(Xn, yn, hyper, budget=max(model.budget, M))
    L = model.inv
    k = kernel_matrix(model.inputs, Xn, hyper)
    c = kernel_matrix(Xn, Xn, hyper) + hyper.noise_variance * np.eye(M)
    Lk = L @ k
    S_inv = _inv_small(c - k.T @ Lk, "Schur complement")
    S_inv = 0.5 * (S_inv + S_inv.T)
    top_right = -Lk @ S_inv
    N = model.size
    inv = np.empty((N + M, N + M))
    inv[:N, :N] = L + Lk @ S_inv @ Lk.T
    inv[:N, N:] = top_right
    inv[N:, :N] = top_right.T
    inv[N:, N:] = S_inv
    return GpModel(
        np.vstack([model.inputs, Xn]),
        np.concatenate([model.targets, yn]),
        hyper,
        inv,
        model.budget,
    )


def remove_points(model: GpModel, indices: Sequence[int]) -> GpModel:
    """Delete M points: permute them to the bottom, then ``A - B C^-1 B^T``."""
    idx = np.asarray(sorted(int(i) for i in indices), dtype=int)
    if idx.size == 0:
        raise ValueError("need at least one index")
    if len(set(idx.tolist())) != idx.size or idx[0] < 0 or idx[-1] >= model.size:
        raise ValueError("indices must be distinct and in range")
    keep = np.setdiff1d(np.arange(model.size), idx)
    if keep.size == 0:
        return empty_model(model.hyper, model.budget)
    L = model.inv
    A = L[np.ix_(keep, keep)]
    B = L[np.ix_(keep, idx)]
    C_inv = _inv_small(L[np.ix_(idx, idx)], "deleted")
    inv = A - B @ C_inv @ B.T
    inv = 0.5 * (inv + inv.T)
    return GpModel(model.inputs[keep], model.targets[keep], model.hyper, inv, model.budget)


def relevance_scores(model: GpModel, query) -> np.ndarray:
    if model.size == 0:
        raise ValueError("relevance of an empty model is undefined")
    q = np.atleast_2d(np.asarray(query, dtype=float))
    return kernel_matrix(model.inputs, q, model.hyper)[:, 0]


def admit(model: GpModel, x, y) -> GpModel:
    """Budgeted online update: evict the least relevant point, then add ``(x, y)``.

    Ties in relevance go to the lowest index.
    """
    if model.size >= model.budget:
        scores = relevance_scores(model, x)
        model = remove_points(model, [int(np.argmin(scores))])
    return add_points(model, np.atleast_2d(x), [y])


def _shares_data(models: Sequence[GpModel]) -> bool:
    first = models[0]
    return all(
        m.hyper == first.hyper
        and m.budget == first.budget
        and (m.inputs is first.inputs or np.array_equal(m.inputs, first.inputs))
        for m in models[1:]
    )


def admit_shared(models: Sequence[GpModel], x, ys) -> list[GpModel]:
    """:func:`admit` for several channels observed at the same inputs.

    The inverse depends only on the inputs, so it is updated once and shared;
    the result equals calling :func:`admit` per channel.
    """
    if not models:
        return []
    if not _shares_data(models):
        raise ValueError("admit_shared needs models with identical inputs and hyperparameters")
    ys = np.asarray(ys, dtype=float).ravel()
    if ys.size != len(models):
        raise ValueError("need one target per model")
    head = admit(models[0], x, ys[0])
    if models[0].size >= models[0].budget:
        evicted = int(np.argmin(relevance_scores(models[0], x)))
        keep = np.delete(np.arange(models[0].size), evicted)
    else:
        keep = np.arange(models[0].size)
    out = [head]
    for m, y in zip(models[1:], ys[1:]):
        targets = np.concatenate([m.targets[keep], [y]])
        out.append(GpModel(head.inputs, targets, head.hyper, head.inv, head.budget))
    return out


def posterior_shared(models: Sequence[GpModel], query) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel posterior mean and variance at a single query."""
    if not _shares_data(models):
        raise ValueError("posterior_shared needs models with identical inputs and hyperparameters")
    first = models[0]
    q = np.atleast_2d(np.asarray(query, dtype=float))
    if first.size == 0:
        return np.zeros(len(models)), np.full(len(models), first.hyper.signal_variance)
    _, var = posterior_batch(first, q)
    Ks = kernel_matrix(q, first.inputs, first.hyper)[0]
    means = np.array([Ks @ m.alpha for m in models])
    return means, np.full(len(models), var[0])
