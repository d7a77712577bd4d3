"""Test-time freezing of a cohort encoder and the freeze-boundary sweep."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cohort import CohortCheckpoint
from .errors import ContractError
from .inr import InrModel, as_targets, fit_heads, init, reconstruct
from .metrics import psnr, ssim
from .rank import argmax_first


@dataclass(frozen=True)
class FreezeSpec:
    """Freeze hidden layers ``0..tau``; ``tau=None`` retrains everything from the cohort weights."""

    tau: int | None
    reinit_seed: int = 0
    iters: int = 500
    lr: float = 1e-4


@dataclass
class FitResult:
    psnr: float
    ssim: float
    curve: np.ndarray
    best_psnr: float
    model: InrModel | None = None


def _check_tau(tau, depth: int) -> None:
    if tau is not None and not 0 <= tau < depth:
        raise ContractError(f"freeze boundary tau={tau} outside 0..{depth - 1}")


def apply_freeze(ckpt: CohortCheckpoint, spec: FreezeSpec) -> tuple[InrModel, dict[str, bool]]:
    """Model for test-time fitting plus a name -> trainable mask.

    Layers ``0..tau`` are copies of the cohort weights and frozen; deeper layers
    and the head come from ``init(config, spec.reinit_seed)``.
    """
    _check_tau(spec.tau, ckpt.depth)
    fresh = init(ckpt.config, spec.reinit_seed)
    keep = ckpt.depth if spec.tau is None else spec.tau + 1
    weights = [ckpt.weights[i].copy() if i < keep else fresh.weights[i] for i in range(ckpt.depth)]
    biases = [ckpt.biases[i].copy() if i < keep else fresh.biases[i] for i in range(ckpt.depth)]
    model = InrModel(ckpt.config, weights, biases, fresh.w_out, fresh.b_out, ckpt.fourier_B)
    trainable = {}
    for i in range(ckpt.depth):
        frozen = spec.tau is not None and i <= spec.tau
        trainable[f"W{i}"] = trainable[f"b{i}"] = not frozen
    trainable["W_out"] = trainable["b_out"] = True
    return model, trainable


def test_time_fit(ckpt: CohortCheckpoint, spec: FreezeSpec, image: np.ndarray,
                  keep_model: bool = False) -> FitResult:
    """Fit ``image`` starting from the frozen encoder; metrics are on the final model."""
    target, h, w = as_targets(image)
    if target.min() < 0 or target.max() > 1:
        raise ContractError("pixels must lie in [0, 1]")
    model, _ = apply_freeze(ckpt, spec)
    curve = fit_heads(model, [(model.w_out, model.b_out)], [image], iters=spec.iters, lr=spec.lr,
                      freeze_upto=-1 if spec.tau is None else spec.tau)[:, 0]
    rec = reconstruct(model, h, w)
    ref = target.reshape(rec.shape)
    final = psnr(rec, ref)
    best = max(final, float(curve.max())) if len(curve) else final
    return FitResult(final, ssim(rec, ref), curve, best, model if keep_model else None)


# keep pytest from collecting the function above as a test
test_time_fit.__test__ = False


@dataclass
class SweepResult:
    rows: list[dict] = field(default_factory=list)
    taus: list = field(default_factory=list)

    def aggregate(self) -> dict:
        """tau -> (mean PSNR, std PSNR, mean SSIM) over images and seeds (population std)."""
        out = {}
        for tau in self.taus:
            p = np.array([r["psnr"] for r in self.rows if r["tau"] == tau])
            s = np.array([r["ssim"] for r in self.rows if r["tau"] == tau])
            out[tau] = (float(p.mean()), float(p.std()), float(s.mean()))
        return out

    @property
    def tau_star(self) -> int:
        """Freeze depth with the highest mean PSNR; ties go to the smallest tau."""
        agg = self.aggregate()
        numeric = [t for t in self.taus if t is not None]
        if not numeric:
            raise ContractError("sweep contains no numeric freeze depth")
        return numeric[argmax_first([agg[t][0] for t in numeric])]

    def csv_rows(self):
        for r in self.rows:
            yield {k: r[k] for k in ("tau", "image", "seed", "psnr", "ssim", "best_psnr")}


def worker_count() -> int:
    cap = os.environ.get("INRD_THREADS")
    n = os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def freeze_sweep(ckpt: CohortCheckpoint, images, seeds: int = 3, iters: int = 500, lr: float = 1e-4,
                 include_none: bool = True, taus=None, base_seed: int = 0,
                 workers: int | None = None) -> SweepResult:
    """Every (tau, image, reinit seed) cell of the freeze sweep.

    Reinitialization seeds are ``base_seed .. base_seed + seeds - 1``.
    """
    if not images:
        raise ContractError("freeze_sweep needs at least one image")
    taus = list(range(ckpt.depth)) if taus is None else list(taus)
    for t in taus:
        _check_tau(t, ckpt.depth)
    if include_none and None not in taus:
        taus.append(None)
    cells = [(tau, j, base_seed + s) for tau in taus for j in range(len(images)) for s in range(seeds)]

    def run(cell):
        tau, j, seed = cell
        res = test_time_fit(ckpt, FreezeSpec(tau, seed, iters, lr), images[j])
        return {"tau": tau, "image": j, "seed": seed, "psnr": res.psnr, "ssim": res.ssim,
                "best_psnr": res.best_psnr, "curve": res.curve}

    n = workers or worker_count()
    if n <= 1:
        rows = [run(c) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            rows = list(pool.map(run, cells))
    return SweepResult(rows, taus)
