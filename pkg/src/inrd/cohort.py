"""Joint training of a shared encoder with one linear head per signal."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .inr import InrConfig, InrModel, as_targets, fit_heads, init, init_head, reconstruct
from .metrics import psnr


@dataclass
class CohortCheckpoint:
    """Shared encoder (hidden layers plus fixed Fourier projection) and per-signal heads."""

    config: InrConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    heads: list[tuple[np.ndarray, np.ndarray]]
    fourier_B: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def dims(self) -> list[tuple[int, int]]:
        return [tuple(d) for d in self.meta.get("dims", [])]

    def model(self, head: int = 0) -> InrModel:
        """The encoder paired with head ``head`` (arrays are shared, not copied)."""
        if not 0 <= head < len(self.heads):
            raise ContractError(f"head {head} outside 0..{len(self.heads) - 1}")
        w, b = self.heads[head]
        return InrModel(self.config, self.weights, self.biases, w, b, self.fourier_B)

    @classmethod
    def from_model(cls, model: InrModel, meta: dict | None = None) -> CohortCheckpoint:
        return cls(model.config, model.weights, model.biases, [(model.w_out, model.b_out)],
                   model.fourier_B, dict(meta or {}))

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [] if self.fourier_B is None else [("B", self.fourier_B)]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"W{i}", w), (f"b{i}", b)]
        for j, (w, b) in enumerate(self.heads):
            out += [(f"head{j}.W", w), (f"head{j}.b", b)]
        return out


def _validate(images) -> list[np.ndarray]:
    if not images:
        raise ContractError("cohort needs at least one image")
    images = [np.asarray(im) for im in images]
    chans = {as_targets(im)[0].shape[1] for im in images}
    if len(chans) != 1:
        raise ContractError(f"cohort images disagree on channel count: {sorted(chans)}")
    for j, im in enumerate(images):
        if im.min() < 0 or im.max() > 1:
            raise ContractError(f"image {j} has pixels outside [0, 1]")
    return images


def cohort_train(images, config: InrConfig, iters: int = 5000, lr: float = 1e-4,
                 psnr_stop: float = 30.0, seed: int = 0, check_every: int = 50,
                 source: str = "") -> CohortCheckpoint:
    """Fit ``M`` images through one encoder, summing per-image MSE into a single Adam step.

    Training stops after ``iters`` steps or at the first checked step whose
    cohort-mean PSNR reaches ``psnr_stop``. The check runs after step 1 and
    then every ``check_every`` steps.
    """
    images = _validate(images)
    model = init(config, seed)
    heads = [(model.w_out, model.b_out)]
    heads += [init_head(config, seed, j) for j in range(1, len(images))]

    def stop(step, psnrs):
        return (step == 1 or step % check_every == 0) and psnrs.mean() >= psnr_stop

    curve = fit_heads(model, heads, images, iters=iters, lr=lr, stop=stop)
    ckpt = CohortCheckpoint(config, model.weights, model.biases, heads, model.fourier_B)
    ckpt.meta = {
        "iterations": int(len(curve)),
        "seed": int(seed),
        "source": source,
        "lr": float(lr),
        "psnr_stop": float(psnr_stop),
        "dims": [list(as_targets(im)[1:]) for im in images],
    }
    per_image, mean = cohort_psnr(ckpt, images)
    ckpt.meta["per_image_psnr"] = per_image
    ckpt.meta["final_psnr"] = mean
    ckpt.meta["psnr_curve"] = [float(x) for x in curve.mean(axis=1)] if len(curve) else []
    return ckpt


def cohort_psnr(ckpt: CohortCheckpoint, images) -> tuple[list[float], float]:
    """Per-image PSNR of each head on its own image, plus the arithmetic mean."""
    if len(images) != len(ckpt.heads):
        raise ContractError(f"{len(images)} images for {len(ckpt.heads)} heads")
    scores = []
    for j, im in enumerate(images):
        _, h, w = as_targets(im)
        if ckpt.dims and tuple(ckpt.dims[j]) != (h, w):
            raise ContractError(f"image {j} is {h}x{w}, checkpoint recorded {ckpt.dims[j]}")
        rec = reconstruct(ckpt.model(j), h, w)
        scores.append(psnr(rec, np.asarray(im).reshape(rec.shape)))
    return scores, float(np.mean(scores))
