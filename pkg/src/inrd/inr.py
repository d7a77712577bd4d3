"""Coordinate MLPs: SIREN and Fourier-feature MLP (FFMLP).

Hidden layer ``l`` computes ``h_l = act(W_l h_{l-1} + b_l)``; the head is a
plain linear map. Weights are stored ``(out_features, in_features)`` and
applied to row-major batches of coordinates, so ``H_l = act(H_{l-1} W_l^T + b_l)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import ContractError, NumericError
from .tensor import Adam, Node, Tape, rng

SIREN = "siren"
FFMLP = "ffmlp"
PSNR_CAP = 99.0

Intervention = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class InrConfig:
    backbone: str = SIREN
    hidden_layers: int = 5
    width: int = 256
    input_dim: int = 2
    output_dim: int = 3
    omega0: float = 30.0
    # True: sin(omega0 * (W h + b)) at every layer (Sitzmann et al.);
    # False: omega0 only on the first layer.
    omega_all_layers: bool = True
    feature_count: int = 256
    sigma_b: float = 10.0
    two_pi: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.backbone not in (SIREN, FFMLP):
            raise ContractError(f"unknown backbone {self.backbone!r}")
        if self.hidden_layers < 1 or self.width < 1:
            raise ContractError("need at least one hidden layer of width >= 1")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ContractError("input and output dims must be >= 1")
        if self.backbone == SIREN and not self.omega0 > 0:
            raise ContractError("SIREN needs omega0 > 0")
        if self.backbone == FFMLP and (not self.sigma_b > 0 or self.feature_count < 1):
            raise ContractError("FFMLP needs sigma_b > 0 and feature_count >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ContractError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def first_in(self) -> int:
        return 2 * self.feature_count if self.backbone == FFMLP else self.input_dim

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: Mapping) -> InrConfig:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class CoordGrid:
    height: int
    width: int
    coords: np.ndarray  # (H*W, 2), rows are (y, x)

    @property
    def n(self) -> int:
        return self.height * self.width


def _axis(n: int) -> np.ndarray:
    # a single-sample axis is pinned to -1
    return np.linspace(-1.0, 1.0, n) if n >= 2 else np.full(1, -1.0)


def make_grid(height: int, width: int) -> CoordGrid:
    """Row-major pixel-centre coordinates on ``[-1, 1]^2``; first column is y (rows)."""
    if height < 1 or width < 1:
        raise ContractError(f"grid dims must be >= 1, got {height}x{width}")
    ys, xs = _axis(height), _axis(width)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return CoordGrid(height, width, np.stack([yy.ravel(), xx.ravel()], axis=1))


@dataclass
class InrModel:
    config: InrConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    w_out: np.ndarray
    b_out: np.ndarray
    fourier_B: np.ndarray | None = None

    @property
    def depth(self) -> int:
        return len(self.weights)

    def copy(self) -> InrModel:
        return InrModel(
            self.config,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.w_out.copy(),
            self.b_out.copy(),
            None if self.fourier_B is None else self.fourier_B.copy(),
        )

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        if self.fourier_B is not None:
            out.append(("B", self.fourier_B))
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"W{i}", w), (f"b{i}", b)]
        out += [("W_out", self.w_out), ("b_out", self.b_out)]
        return out


def _uniform(g: np.random.Generator, bound: float, shape, dtype) -> np.ndarray:
    return g.uniform(-bound, bound, size=shape).astype(dtype)


def init_layer(config: InrConfig, layer: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fresh weights for hidden layer ``layer``, drawn from stream ``(seed, "layer", layer)``."""
    g = rng(seed, "layer", layer)
    dt = config.np_dtype
    fan_in = config.first_in if layer == 0 else config.width
    shape = (config.width, fan_in)
    if config.backbone == SIREN:
        bound = 1.0 / fan_in if layer == 0 else math.sqrt(6.0 / fan_in) / config.omega0
    else:
        bound = math.sqrt(6.0 / fan_in)  # Kaiming-uniform, ReLU gain
    return _uniform(g, bound, shape, dt), np.zeros(config.width, dtype=dt)


def init_head(config: InrConfig, seed: int, index: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Output projection for signal ``index``; stream ``(seed, "head", index)``."""
    g = rng(seed, "head", index)
    d = config.width
    if config.backbone == SIREN:
        bound = math.sqrt(6.0 / d) / config.omega0
    else:
        bound = math.sqrt(3.0 / d)
    dt = config.np_dtype
    return _uniform(g, bound, (config.output_dim, d), dt), np.zeros(config.output_dim, dtype=dt)


def init_fourier(config: InrConfig, seed: int) -> np.ndarray:
    g = rng(seed, "fourier")
    B = g.normal(0.0, config.sigma_b, size=(config.feature_count, config.input_dim))
    return B.astype(config.np_dtype)


def init(config: InrConfig, seed: int) -> InrModel:
    """Deterministic model for ``seed``; each layer draws from its own named stream."""
    layers = [init_layer(config, i, seed) for i in range(config.hidden_layers)]
    w_out, b_out = init_head(config, seed, 0)
    B = init_fourier(config, seed) if config.backbone == FFMLP else None
    if B is not None:
        B.setflags(write=False)
    return InrModel(config, [w for w, _ in layers], [b for _, b in layers], w_out, b_out, B)


# --------------------------------------------------------------------------- forward


def _coords(x) -> np.ndarray:
    return x.coords if isinstance(x, CoordGrid) else np.asarray(x)


def fourier_encode(model: InrModel, x) -> np.ndarray:
    """``[sin(2 pi B x) | cos(2 pi B x)]`` per coordinate row."""
    if model.config.backbone != FFMLP or model.fourier_B is None:
        raise ContractError("fourier_encode needs an FFMLP model")
    c = _coords(x).astype(model.config.np_dtype, copy=False)
    proj = c @ model.fourier_B.T
    if model.config.two_pi:
        proj = proj * model.config.np_dtype.type(2.0 * math.pi)
    return np.concatenate([np.sin(proj), np.cos(proj)], axis=1)


def model_input(model: InrModel, x) -> np.ndarray:
    if model.config.backbone == FFMLP:
        return fourier_encode(model, x)
    return _coords(x).astype(model.config.np_dtype, copy=False)


def _layer_omega(config: InrConfig, layer: int) -> float:
    if layer == 0 or config.omega_all_layers:
        return config.omega0
    return 1.0


def _apply_layer(tape: Tape, config: InrConfig, layer: int, h: Node, w: Node, b: Node) -> Node:
    pre = tape.add_bias(tape.matmul(h, w, trans_b=True), b)
    if config.backbone == SIREN:
        omega = _layer_omega(config, layer)
        if omega != 1.0:
            pre = tape.scale(pre, config.np_dtype.type(omega))
        return tape.sin(pre)
    return tape.relu(pre)


def layer_forward(model: InrModel, layer: int, h_prev: np.ndarray) -> np.ndarray:
    """Recompute one hidden layer from its input with plain numpy."""
    pre = h_prev @ model.weights[layer].T + model.biases[layer]
    if model.config.backbone == SIREN:
        return np.sin(_layer_omega(model.config, layer) * pre)
    return np.maximum(pre, 0)


def _check_finite(value: np.ndarray, layer) -> None:
    if not np.isfinite(value).all():
        raise NumericError(f"non-finite activation at layer {layer}", layer=layer)


def _run_layers(tape: Tape, model: InrModel, nodes: Mapping[str, Node], h: Node,
                start: int, capture: Iterable[int], intervene: Mapping[int, Intervention] | None,
                acts: dict[int, np.ndarray]) -> Node:
    capture = set(capture)
    for layer in range(start, model.depth):
        h = _apply_layer(tape, model.config, layer, h, nodes[f"W{layer}"], nodes[f"b{layer}"])
        _check_finite(h.value, layer)
        if intervene and layer in intervene:
            h = tape.const(np.asarray(intervene[layer](h.value), dtype=h.value.dtype))
            _check_finite(h.value, layer)
        if layer in capture:
            acts[layer] = h.value
    return h


def _bind(tape: Tape, model: InrModel, trainable: Iterable[str] = ()) -> dict[str, Node]:
    trainable = set(trainable)
    return {name: (tape.param(arr) if name in trainable else tape.const(arr))
            for name, arr in model.named_arrays() if name != "B"}


@dataclass
class ForwardResult:
    output: np.ndarray
    activations: dict[int, np.ndarray] = field(default_factory=dict)


def forward(model: InrModel, x, capture: Iterable[int] = (),
            intervene: Mapping[int, Intervention] | None = None) -> ForwardResult:
    """Evaluate the model on coordinates ``x``.

    ``capture`` selects hidden layers whose post-activation matrices are
    returned. ``intervene`` maps a layer index to a function that replaces that
    layer's post-activation before the pass continues.
    """
    capture = list(capture)
    bad = [c for c in capture if not 0 <= c < model.depth]
    if bad:
        raise ContractError(f"capture layers {bad} outside 0..{model.depth - 1}")
    tape = Tape()
    nodes = _bind(tape, model)
    acts: dict[int, np.ndarray] = {}
    h = _run_layers(tape, model, nodes, tape.const(model_input(model, x)), 0, capture, intervene, acts)
    out = tape.add_bias(tape.matmul(h, nodes["W_out"], trans_b=True), nodes["b_out"])
    _check_finite(out.value, "head")
    return ForwardResult(out.value, acts)


def forward_from(model: InrModel, h: np.ndarray, layer: int,
                 intervene: Mapping[int, Intervention] | None = None) -> np.ndarray:
    """Continue a forward pass from the post-activation ``h`` of hidden layer ``layer``."""
    if not 0 <= layer < model.depth:
        raise ContractError(f"layer {layer} outside 0..{model.depth - 1}")
    tape = Tape()
    nodes = _bind(tape, model)
    out_h = _run_layers(tape, model, nodes, tape.const(h), layer + 1, (), intervene, {})
    out = tape.add_bias(tape.matmul(out_h, nodes["W_out"], trans_b=True), nodes["b_out"])
    return out.value


def loss_and_grads(model: InrModel, x, target: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """MSE of the model output against ``target`` and its gradient for every trainable array."""
    tape = Tape()
    names = [n for n, _ in model.named_arrays() if n != "B"]
    nodes = _bind(tape, model, names)
    h = _run_layers(tape, model, nodes, tape.const(model_input(model, x)), 0, (), None, {})
    out = tape.add_bias(tape.matmul(h, nodes["W_out"], trans_b=True), nodes["b_out"])
    loss = tape.mean(tape.square(tape.sub(out, tape.const(np.asarray(target, dtype=out.value.dtype)))))
    grads = tape.backward(loss)
    return float(loss.value), {n: grads[nodes[n]] for n in names}


# --------------------------------------------------------------------------- fitting


def psnr_from_mse(mse: float) -> float:
    mse = float(mse)
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def as_targets(image: np.ndarray) -> tuple[np.ndarray, int, int]:
    """Flatten an ``H x W (x c)`` image into ``(H*W, c)`` targets."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ContractError(f"image must be HxW or HxWxc, got shape {img.shape}")
    h, w, c = img.shape
    return img.reshape(h * w, c), h, w


@dataclass
class _Group:
    grid: CoordGrid
    members: list[int]
    prefix: np.ndarray | None = None  # frozen-prefix activation or model input


def fit_heads(model: InrModel, heads: list[tuple[np.ndarray, np.ndarray]], images: list[np.ndarray],
              *, iters: int, lr: float, freeze_upto: int = -1, train_encoder: bool = True,
              stop: Callable[[int, np.ndarray], bool] | None = None) -> np.ndarray:
    """Full-batch Adam on one shared encoder with one head per image.

    The loss is the unweighted sum of per-image MSEs. Hidden layers
    ``0..freeze_upto`` are held fixed; their output is computed once per
    distinct grid. Arrays are updated in place. Returns a ``(steps, M)`` array
    of per-image PSNR after each step. ``stop(step, psnrs)`` is consulted after
    every step and ends training early when it returns True.
    """
    if len(heads) != len(images) or not images:
        raise ContractError("need one head per image and at least one image")
    if iters < 0:
        raise ContractError("iters must be >= 0")
    config = model.config
    dt = config.np_dtype
    targets, groups = [], {}
    for j, img in enumerate(images):
        t, h, w = as_targets(img)
        if t.shape[1] != config.output_dim:
            raise ContractError(f"image {j} has {t.shape[1]} channels, model expects {config.output_dim}")
        targets.append(t.astype(dt, copy=False))
        groups.setdefault((h, w), _Group(make_grid(h, w), [])).members.append(j)

    start = freeze_upto + 1
    encoder_names = [f"{p}{i}" for i in range(start, model.depth) for p in ("W", "b")] if train_encoder else []
    for g in groups.values():
        x = model_input(model, g.grid)
        if start > 0:
            acts: dict[int, np.ndarray] = {}
            tape = Tape()
            _run_layers(tape, model, _bind(tape, model), tape.const(x), 0, [start - 1], None, acts)
            x = acts[start - 1]
        g.prefix = x

    named = dict(model.named_arrays())
    params = [named[n] for n in encoder_names]
    for w, b in heads:
        params += [w, b]
    opt = Adam(params, lr)

    curve = []
    done = 0
    while True:
        tape = Tape()
        enc = {n: tape.param(named[n]) for n in encoder_names}
        for i in range(start, model.depth):
            enc.setdefault(f"W{i}", tape.const(named[f"W{i}"]))
            enc.setdefault(f"b{i}", tape.const(named[f"b{i}"]))
        head_nodes = [(tape.param(w), tape.param(b)) for w, b in heads]
        total = None
        mses = np.empty(len(images))
        for g in groups.values():
            h = _run_layers(tape, model, enc, tape.const(g.prefix), start, (), None, {})
            for j in g.members:
                wj, bj = head_nodes[j]
                out = tape.add_bias(tape.matmul(h, wj, trans_b=True), bj)
                loss = tape.mean(tape.square(tape.sub(out, tape.const(targets[j]))))
                mses[j] = float(loss.value)
                total = loss if total is None else tape.add(total, loss)
        if not np.isfinite(mses).all():
            raise NumericError(f"non-finite loss at iteration {done}", iteration=done)
        if done > 0:
            psnrs = np.array([psnr_from_mse(m) for m in mses])
            curve.append(psnrs)
            if stop is not None and stop(done, psnrs):
                break
        if done == iters:
            break
        grads = tape.backward(total)
        grad_list = [grads[enc[n]] for n in encoder_names]
        for wn, bn in head_nodes:
            grad_list += [grads[wn], grads[bn]]
        opt.step(grad_list)
        done += 1
    return np.array(curve).reshape(len(curve), len(images))


def fit_single(model: InrModel, image: np.ndarray, iters: int, lr: float) -> tuple[InrModel, np.ndarray]:
    """Fit one image from the given initialization; returns the model and its PSNR curve."""
    if iters < 0:
        raise ContractError("iters must be >= 0")
    fitted = model.copy()
    heads = [(fitted.w_out, fitted.b_out)]
    curve = fit_heads(fitted, heads, [image], iters=iters, lr=lr)
    return fitted, curve[:, 0]


def reconstruct(model: InrModel, height: int, width: int) -> np.ndarray:
    """Model output on the ``height x width`` grid as an ``H x W x c`` image."""
    out = forward(model, make_grid(height, width)).output
    return out.reshape(height, width, -1)


def with_dtype(model: InrModel, dtype: str) -> InrModel:
    """Copy of ``model`` cast to ``dtype``."""
    cfg = replace(model.config, dtype=dtype)
    dt = cfg.np_dtype
    return InrModel(cfg, [w.astype(dt) for w in model.weights], [b.astype(dt) for b in model.biases],
                    model.w_out.astype(dt), model.b_out.astype(dt),
                    None if model.fourier_B is None else model.fourier_B.astype(dt))
