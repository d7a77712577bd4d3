"""TopK sparse autoencoders over INR hidden activations.

``z = TopK(ReLU(W_enc (h - b_pre) + b_enc), k)`` and ``h_hat = W_dec^T z + b_pre``;
rows of ``W_dec`` are the dictionary atoms and are kept at unit norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .cohort import CohortCheckpoint
from .errors import ContractError, NumericError, ShapeError
from .inr import forward, forward_from, make_grid
from .metrics import psnr
from .tensor import Adam, Tape, rng, topk_mask


@dataclass(frozen=True)
class SaeConfig:
    input_dim: int
    dict_size: int = 4096
    k: int = 32
    train_steps: int = 10_000
    lr: float = 1e-4
    batch_size: int = 4096
    seed: int = 0
    # "renorm": rescale decoder rows after each step; "project": also drop the
    # radial gradient component before the step
    constraint: str = "renorm"
    dtype: str = "float32"

    def __post_init__(self):
        if not 1 <= self.k <= self.dict_size:
            raise ContractError(f"need 1 <= k <= n, got k={self.k}, n={self.dict_size}")
        if self.input_dim < 1:
            raise ContractError("input_dim must be >= 1")
        if self.constraint not in ("renorm", "project"):
            raise ContractError(f"unknown decoder constraint {self.constraint!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d) -> SaeConfig:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class SaeModel:
    W_enc: np.ndarray  # (n, d)
    b_enc: np.ndarray  # (n,)
    W_dec: np.ndarray  # (n, d), rows are atoms
    b_pre: np.ndarray  # (d,)
    config: SaeConfig
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.W_dec.shape[0]

    @property
    def d(self) -> int:
        return self.W_dec.shape[1]

    def named_arrays(self):
        return [("W_enc", self.W_enc), ("b_enc", self.b_enc), ("W_dec", self.W_dec), ("b_pre", self.b_pre)]


@dataclass
class ActivationDataset:
    rows: np.ndarray  # (N, d) post-activations
    layer: int
    source: str = ""
    provenance: list = field(default_factory=list)  # [(image index, height, width)]

    def __post_init__(self):
        expected = sum(h * w for _, h, w in self.provenance)
        if self.provenance and expected != len(self.rows):
            raise ContractError(f"{len(self.rows)} rows but provenance covers {expected} pixels")


def collect_activations(ckpt: CohortCheckpoint, layer: int, dims=None) -> ActivationDataset:
    """Post-activations of ``layer`` on every training image's grid, stacked."""
    if not 0 <= layer < ckpt.depth:
        raise ContractError(f"layer {layer} outside 0..{ckpt.depth - 1}")
    dims = [tuple(d) for d in (dims or ckpt.dims)]
    if not dims:
        raise ContractError("checkpoint records no image dims; pass dims explicitly")
    model = ckpt.model(0)
    cache: dict[tuple[int, int], np.ndarray] = {}
    blocks = []
    for h, w in dims:
        if (h, w) not in cache:
            cache[(h, w)] = forward(model, make_grid(h, w), capture=[layer]).activations[layer]
        blocks.append(cache[(h, w)])
    prov = [(j, h, w) for j, (h, w) in enumerate(dims)]
    return ActivationDataset(np.concatenate(blocks, axis=0), layer, ckpt.meta.get("source", ""), prov)


def init_sae(cfg: SaeConfig, data_mean: np.ndarray | None = None) -> SaeModel:
    dt = np.dtype(cfg.dtype)
    g = rng(cfg.seed, "sae-dec")
    W_dec = g.standard_normal((cfg.dict_size, cfg.input_dim))
    W_dec /= np.linalg.norm(W_dec, axis=1, keepdims=True)
    b_pre = np.zeros(cfg.input_dim) if data_mean is None else np.asarray(data_mean, dtype=np.float64)
    return SaeModel(W_dec.copy().astype(dt), np.zeros(cfg.dict_size, dtype=dt),
                    W_dec.astype(dt), b_pre.astype(dt), cfg)


def _check_dim(m: SaeModel, h: np.ndarray, what: str) -> None:
    width = m.d if what == "activation" else m.n
    if h.shape[-1] != width:
        raise ShapeError(f"{what} width {h.shape[-1]} does not match SAE ({width})")


def encode(m: SaeModel, h: np.ndarray) -> np.ndarray:
    """Sparse code for one activation vector or a batch of rows."""
    h = np.asarray(h)
    _check_dim(m, h, "activation")
    single = h.ndim == 1
    x = np.atleast_2d(h)
    pre = np.maximum((x - m.b_pre) @ m.W_enc.T + m.b_enc, 0)
    z = np.where(topk_mask(pre, m.config.k), pre, 0)
    return z[0] if single else z


def decode(m: SaeModel, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    _check_dim(m, z, "code")
    return z @ m.W_dec + m.b_pre


def reconstruct(m: SaeModel, h: np.ndarray) -> np.ndarray:
    return decode(m, encode(m, h))


def sae_loss(tape: Tape, nodes, x, k: int):
    """Mean squared reconstruction error of a batch, recorded on ``tape``."""
    W_enc, b_enc, W_dec, b_pre = nodes
    xc = tape.const(x)
    centered = tape.add_bias(xc, tape.scale(b_pre, -1.0))
    pre = tape.add_bias(tape.matmul(centered, W_enc, trans_b=True), b_enc)
    z = tape.topk(tape.relu(pre), k)
    recon = tape.add_bias(tape.matmul(z, W_dec), b_pre)
    return tape.mean(tape.square(tape.sub(recon, xc)))


def renormalize(W_dec: np.ndarray) -> None:
    norms = np.linalg.norm(W_dec.astype(np.float64), axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    W_dec /= norms.astype(W_dec.dtype)


def train_sae(data: ActivationDataset | np.ndarray, cfg: SaeConfig, log_every: int = 0,
              callback=None) -> SaeModel:
    """Adam on mean squared reconstruction error with unit-norm decoder rows.

    ``b_pre`` starts at the dataset mean and is trained. Batches are seeded
    uniform samples of rows (the whole dataset when it is smaller than a
    batch). ``callback(step, model, loss)`` runs every ``log_every`` steps.
    """
    rows = data.rows if isinstance(data, ActivationDataset) else np.asarray(data)
    if rows.ndim != 2 or len(rows) == 0:
        raise ContractError("empty activation dataset")
    if rows.shape[1] != cfg.input_dim:
        raise ShapeError(f"data width {rows.shape[1]} does not match input_dim {cfg.input_dim}")
    dt = np.dtype(cfg.dtype)
    rows = rows.astype(dt, copy=False)
    m = init_sae(cfg, rows.astype(np.float64).mean(axis=0))
    params = [m.W_enc, m.b_enc, m.W_dec, m.b_pre]
    opt = Adam(params, cfg.lr)
    g = rng(cfg.seed, "sae-batch")
    n_rows = len(rows)
    for step in range(1, cfg.train_steps + 1):
        if n_rows <= cfg.batch_size:
            batch = rows
        else:
            batch = rows[np.sort(g.choice(n_rows, size=cfg.batch_size, replace=False))]
        tape = Tape()
        nodes = [tape.param(p) for p in params]
        loss = sae_loss(tape, nodes, batch, cfg.k)
        if not np.isfinite(loss.value):
            raise NumericError(f"non-finite SAE loss at step {step}", iteration=step)
        grads = tape.backward(loss)
        grad_list = [grads[n] for n in nodes]
        if cfg.constraint == "project":
            gd = grad_list[2]
            grad_list[2] = gd - (gd * m.W_dec).sum(axis=1, keepdims=True) * m.W_dec
        opt.step(grad_list)
        renormalize(m.W_dec)
        if callback is not None and log_every and step % log_every == 0:
            callback(step, m, float(loss.value))
    m.meta["steps"] = cfg.train_steps
    if isinstance(data, ActivationDataset):
        m.meta.update(layer=data.layer, source=data.source)
    return m


def r2(m: SaeModel, data: ActivationDataset | np.ndarray, chunk: int = 8192) -> float:
    """``1 - sum (h - h_hat)^2 / sum (h - mean h)^2`` over every entry."""
    rows = data.rows if isinstance(data, ActivationDataset) else np.asarray(data)
    if len(rows) == 0:
        raise ContractError("r2 needs data")
    rows64 = rows.astype(np.float64)
    total = float(((rows64 - rows64.mean(axis=0)) ** 2).sum())
    if total == 0.0:
        raise ContractError("r2 undefined for constant data")
    resid = 0.0
    for i in range(0, len(rows), chunk):
        part = rows[i: i + chunk]
        resid += float(((part.astype(np.float64) - reconstruct(m, part)) ** 2).sum())
    return 1.0 - resid / total


def substitute_reconstruction(ckpt: CohortCheckpoint, sae: SaeModel, layer: int, head: int = 0,
                              dims: tuple[int, int] | None = None) -> float:
    """PSNR of the output obtained by swapping layer ``layer``'s activation for its SAE
    reconstruction, measured against the unmodified output."""
    if not 0 <= layer < ckpt.depth:
        raise ContractError(f"layer {layer} outside 0..{ckpt.depth - 1}")
    if dims is None:
        dims = tuple(ckpt.dims[head])
    model = ckpt.model(head)
    grid = make_grid(*dims)
    clean = forward(model, grid, capture=[layer])
    h = clean.activations[layer]
    patched = forward_from(model, reconstruct(sae, h).astype(h.dtype), layer)
    return psnr(patched, clean.output)


def with_dtype(m: SaeModel, dtype: str) -> SaeModel:
    dt = np.dtype(dtype)
    return SaeModel(m.W_enc.astype(dt), m.b_enc.astype(dt), m.W_dec.astype(dt), m.b_pre.astype(dt),
                    replace(m.config, dtype=dtype), dict(m.meta))
