"""Atom maps, single-atom ablations and dictionary statistics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cohort import CohortCheckpoint
from .errors import ContractError
from .inr import as_targets, forward, forward_from, make_grid
from .metrics import psnr
from .sae import SaeModel, encode

log = logging.getLogger(__name__)

ACTIVE_THRESHOLD = 0.01


@dataclass
class AtomMap:
    atom: int
    layer: int
    height: int
    width: int
    values: np.ndarray  # (H, W), nonnegative
    threshold: float = ACTIVE_THRESHOLD

    @property
    def mean_mag(self) -> float:
        return float(np.abs(self.values).mean())

    @property
    def fire_rate(self) -> float:
        return float((self.values > 0).mean())

    @property
    def active_frac(self) -> float:
        return active_fraction(self.values, self.threshold)


@dataclass
class AblationResult:
    atom: int
    layer: int
    delta: np.ndarray  # (H, W, c): f(x) - f^{-a}(x)
    reconstruction: np.ndarray
    ablated: np.ndarray
    psnr_before: float
    psnr_after: float
    ablated_activation: np.ndarray | None = None

    @property
    def psnr_drop(self) -> float:
        return self.psnr_before - self.psnr_after


@dataclass
class DictionaryStats:
    layer: int
    n: int
    alive: np.ndarray          # (n,) bool
    mean_mag: np.ndarray       # (n,)
    fire_rate: np.ndarray      # (n,) P(z_a > 0)
    active_frac: np.ndarray    # (n,) share of coordinates with z_a > threshold
    ipr: np.ndarray            # (n,) IPR fraction, nan for dead atoms
    topk_mean_maps: list[np.ndarray] = field(default_factory=list)
    threshold: float = ACTIVE_THRESHOLD

    @property
    def alive_count(self) -> int:
        return int(self.alive.sum())

    @property
    def dead_rate(self) -> float:
        return 1.0 - self.alive_count / self.n

    @property
    def alive_pct(self) -> float:
        return 100.0 * self.alive_count / self.n

    def _alive(self, values):
        return values[self.alive]

    @property
    def median_active_frac(self) -> float:
        return float(np.median(self._alive(self.active_frac))) if self.alive_count else 0.0

    @property
    def active_frac_iqr(self) -> tuple[float, float]:
        if not self.alive_count:
            return 0.0, 0.0
        q25, q75 = np.percentile(self._alive(self.active_frac), [25, 75])
        return float(q25), float(q75)

    @property
    def median_ipr(self) -> float:
        return float(np.median(self._alive(self.ipr))) if self.alive_count else 0.0

    @property
    def spatial_l0(self) -> float:
        return float(self._alive(self.fire_rate).mean()) if self.alive_count else 0.0

    def ranking(self) -> np.ndarray:
        """Atom ids by decreasing mean magnitude (stable for ties)."""
        return np.argsort(-self.mean_mag, kind="stable")

    def rows(self):
        for a in range(self.n):
            yield {"layer": self.layer, "atom": a, "mean_mag": float(self.mean_mag[a]),
                   "fire_rate": float(self.fire_rate[a]), "active_frac": float(self.active_frac[a]),
                   "ipr": float(self.ipr[a]), "dead": int(not self.alive[a])}


def active_fraction(values: np.ndarray, threshold: float = ACTIVE_THRESHOLD) -> float:
    return float((np.asarray(values) > threshold).mean())


def ipr_fraction(values: np.ndarray) -> float:
    """``(sum z^2)^2 / (N sum z^4)``: 1 for a uniform map, 1/N for a single spike."""
    z = np.asarray(values, dtype=np.float64).ravel()
    s2 = float((z * z).sum())
    s4 = float((z ** 4).sum())
    if s4 == 0.0:
        return float("nan")
    return s2 * s2 / (len(z) * s4)


def _check_atom(sae: SaeModel, atom: int) -> None:
    if not 0 <= atom < sae.n:
        raise ContractError(f"atom {atom} outside 0..{sae.n - 1}")


def _check_layer(ckpt: CohortCheckpoint, layer: int) -> None:
    if not 0 <= layer < ckpt.depth:
        raise ContractError(f"layer {layer} outside 0..{ckpt.depth - 1}")


def layer_codes(ckpt: CohortCheckpoint, sae: SaeModel, layer: int, dims: tuple[int, int],
                head: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``(H_layer, z)`` over the full ``dims`` grid."""
    _check_layer(ckpt, layer)
    h = forward(ckpt.model(head), make_grid(*dims), capture=[layer]).activations[layer]
    return h, encode(sae, h)


def atom_map(ckpt: CohortCheckpoint, sae: SaeModel, layer: int, atom: int,
             dims: tuple[int, int] | None = None, threshold: float = ACTIVE_THRESHOLD) -> AtomMap:
    """Spatial firing pattern ``z_a(x)`` of one atom on an image grid."""
    _check_atom(sae, atom)
    dims = tuple(dims or ckpt.dims[0])
    _, z = layer_codes(ckpt, sae, layer, dims)
    return AtomMap(atom, layer, dims[0], dims[1], z[:, atom].reshape(dims), threshold)


def ablate_atom(ckpt: CohortCheckpoint, sae: SaeModel, layer: int, atom: int,
                image: np.ndarray, head: int = 0, keep_activation: bool = False) -> AblationResult:
    """Subtract ``z_a w_a^T`` from the true activation of ``layer`` and finish the pass."""
    _check_atom(sae, atom)
    target, height, width = as_targets(image)
    model = ckpt.model(head)
    h, z = layer_codes(ckpt, sae, layer, (height, width), head)
    before = forward_from(model, h, layer)
    za = z[:, atom]
    if np.any(za):
        h_abl = h - (za[:, None] * sae.W_dec[atom][None, :]).astype(h.dtype)
        after = forward_from(model, h_abl, layer)
    else:
        h_abl = h
        after = before
    shape = (height, width, before.shape[1])
    ref = target.reshape(shape)
    return AblationResult(
        atom, layer,
        (before - after).reshape(shape),
        before.reshape(shape),
        after.reshape(shape),
        psnr(before.reshape(shape), ref),
        psnr(after.reshape(shape), ref),
        h_abl if keep_activation else None,
    )


def dictionary_stats(ckpt: CohortCheckpoint, sae: SaeModel, layer: int,
                     dims: Sequence[tuple[int, int]] | None = None,
                     threshold: float = ACTIVE_THRESHOLD) -> DictionaryStats:
    """Firing statistics of every atom pooled over the coordinates of all images."""
    dims = [tuple(d) for d in (dims or ckpt.dims)]
    if not dims:
        raise ContractError("dictionary_stats needs at least one image grid")
    codes, maps = [], []
    cache: dict[tuple[int, int], np.ndarray] = {}
    for d in dims:
        if d not in cache:
            cache[d] = layer_codes(ckpt, sae, layer, d)[1]
            z = cache[d]
            maps.append((np.sort(z, axis=1)[:, -sae.config.k:].mean(axis=1)).reshape(d))
        codes.append(cache[d])
    z = np.concatenate(codes, axis=0).astype(np.float64)
    alive = (z > 0).any(axis=0)
    ipr = np.array([ipr_fraction(z[:, a]) if alive[a] else np.nan for a in range(sae.n)])
    return DictionaryStats(
        layer, sae.n, alive,
        np.abs(z).mean(axis=0),
        (z > 0).mean(axis=0),
        (z > threshold).mean(axis=0),
        ipr, maps, threshold,
    )


# --------------------------------------------------------------------------- rendering


def _to_u8(panel: np.ndarray) -> np.ndarray:
    panel = np.asarray(panel, dtype=np.float64)
    top = panel.max() if panel.size else 0.0
    if top > 0:
        panel = panel / top
    return np.clip(np.round(panel * 255.0), 0, 255).astype(np.uint8)


def tile_panels(panels: Sequence[Sequence[np.ndarray | None]], pad: int = 2) -> np.ndarray:
    """Grid of per-panel-normalized gray maps; ``None`` entries are blank."""
    shapes = [p.shape[:2] for row in panels for p in row if p is not None]
    if not shapes:
        raise ContractError("nothing to render")
    ph = max(s[0] for s in shapes)
    pw = max(s[1] for s in shapes)
    ncols = max(len(row) for row in panels)
    canvas = np.full((len(panels) * (ph + pad) + pad, ncols * (pw + pad) + pad), 255, dtype=np.uint8)
    for r, row in enumerate(panels):
        for c, p in enumerate(row):
            y, x = pad + r * (ph + pad), pad + c * (pw + pad)
            if p is None:
                canvas[y: y + ph, x: x + pw] = 0
            else:
                u8 = _to_u8(p if p.ndim == 2 else np.abs(p).mean(axis=2))
                canvas[y: y + u8.shape[0], x: x + u8.shape[1]] = u8
    return canvas


def save_png(array: np.ndarray, path: Path) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG")
    return path


def gallery(ckpt: CohortCheckpoint, saes: Mapping[int, SaeModel], top_m: int = 8,
            dims: tuple[int, int] | None = None, path: Path | None = None) -> tuple[np.ndarray, dict]:
    """Top-``top_m`` atoms by mean magnitude per layer, plus a top-k mean column.

    Returns the rendered canvas and the atom ranking per layer; writes a PNG
    when ``path`` is given.
    """
    dims = tuple(dims or ckpt.dims[0])
    rows, ranking = [], {}
    for layer in sorted(saes):
        sae = saes[layer]
        stats = dictionary_stats(ckpt, sae, layer, [dims])
        order = [int(a) for a in stats.ranking() if stats.alive[a]][:top_m]
        if len(order) < top_m:
            log.warning("layer %d has %d alive atoms; padding %d blank panels",
                        layer, len(order), top_m - len(order))
        _, z = layer_codes(ckpt, sae, layer, dims)
        row = [z[:, a].reshape(dims) for a in order] + [None] * (top_m - len(order))
        row.append(stats.topk_mean_maps[0])
        rows.append(row)
        ranking[layer] = order
    canvas = tile_panels(rows)
    if path is not None:
        save_png(canvas, path)
    return canvas, ranking
