"""Stable-rank diagnostics of a trained encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cohort import CohortCheckpoint
from .errors import ContractError, ConvergenceError
from .inr import forward, make_grid, model_input
from .tensor import rng


# relative slack under which a stable rank estimate snaps to its lower bound of 1
SNAP = 1e-12
# nearly tied top singular values converge slowly; matvecs are cheap at INR widths
STABLE_RANK_TOL = 1e-13
STABLE_RANK_ITERS = 200_000


def spectral_norm(A: np.ndarray, tol: float = 1e-10, max_iters: int = 1000) -> float:
    """Largest singular value by power iteration on ``A^T A``.

    Starts from the normalized all-ones vector and stops once the estimate
    changes by less than ``tol`` relative. If the start vector is orthogonal
    to the row space, the column of largest norm is used instead.
    """
    return math.sqrt(_top_sigma2(A, tol, max_iters))


def _top_sigma2(A: np.ndarray, tol: float, max_iters: int) -> float:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ContractError(f"spectral_norm needs a matrix, got shape {A.shape}")
    if not np.any(A):
        raise ContractError("spectral norm of a zero matrix is undefined for stable rank")
    v = np.ones(A.shape[1])
    if not np.any(A @ v):
        v = np.zeros(A.shape[1])
        v[int(np.argmax((A * A).sum(axis=0)))] = 1.0
    v /= np.linalg.norm(v)
    # Rayleigh quotient ||Av||^2 / ||v||^2 keeps exact cases (e.g. identity) exact
    Av = A @ v
    sigma2 = float(Av @ Av) / float(v @ v)
    for _ in range(max_iters):
        w = A.T @ Av
        v = w / np.linalg.norm(w)
        Av = A @ v
        new = float(Av @ Av) / float(v @ v)
        if abs(new - sigma2) <= tol * new:
            return new
        sigma2 = new
    raise ConvergenceError(f"power iteration did not converge in {max_iters} iterations",
                           last=math.sqrt(sigma2))


def stable_rank(A: np.ndarray) -> float:
    """``||A||_F^2 / ||A||_2^2``.

    The true value is never below 1, so estimates within ``SNAP`` of 1 (rounding
    in the power iteration, e.g. for rank-1 inputs) are returned as exactly 1.
    """
    A = np.asarray(A, dtype=np.float64)
    sr = float((A * A).sum()) / _top_sigma2(A, STABLE_RANK_TOL, STABLE_RANK_ITERS)
    return 1.0 if sr < 1.0 + SNAP else sr


@dataclass
class RankProfile:
    sr_w: list[float]
    sr_h: list[float]
    tau_star: int
    activation: str = "post"

    def rows(self):
        for layer, (w, h) in enumerate(zip(self.sr_w, self.sr_h)):
            yield {"layer": layer, "sr_w": w, "sr_h": h}


def argmax_first(values) -> int:
    """Index of the maximum; ties go to the smallest index."""
    values = list(values)
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


def sample_grid(height: int, width: int, count: int, seed: int) -> np.ndarray:
    grid = make_grid(height, width)
    if grid.n <= count:
        return grid.coords
    idx = np.sort(rng(seed, "rank-sample").choice(grid.n, size=count, replace=False))
    return grid.coords[idx]


def rank_profile(ckpt: CohortCheckpoint, sample_coords: int = 8192, seed: int = 0,
                 activation: str = "post", dims: tuple[int, int] | None = None) -> RankProfile:
    """Weight and activation stable rank per hidden layer, and the predicted freeze depth.

    The fixed Fourier projection and the heads are not included. Activations
    are sampled on the grid of the first training image unless ``dims`` is given.
    """
    if activation not in ("post", "pre"):
        raise ContractError("activation must be 'post' or 'pre'")
    sr_w = [stable_rank(w) for w in ckpt.weights]
    if dims is None:
        dims = tuple(ckpt.dims[0]) if ckpt.dims else (64, 64)
    coords = sample_grid(dims[0], dims[1], sample_coords, seed)
    model = ckpt.model(0)
    acts = forward(model, coords, capture=range(ckpt.depth)).activations
    sr_h = []
    for layer in range(ckpt.depth):
        h = acts[layer]
        if activation == "pre":
            prev = acts[layer - 1] if layer > 0 else model_input(model, coords)
            h = prev @ model.weights[layer].T + model.biases[layer]
        sr_h.append(stable_rank(h))
    return RankProfile(sr_w, sr_h, argmax_first(sr_w), activation)
