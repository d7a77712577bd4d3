"""Command-line front end: ``inrd <subcommand> [flags]``.

Every run writes into ``<out>/<run-id>/`` and finishes with ``manifest.json``.
Exit codes: 0 success, 1 user error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import atoms, io, rank, sae, synth, transfer
from .cohort import CohortCheckpoint, cohort_psnr, cohort_train
from .errors import ContractError, InrdError, NumericError, ShapeError
from .inr import InrConfig, fit_single, init, reconstruct
from .manifest import RunManifest, RunWriter

log = logging.getLogger("inrd")

# held-out synthetic images for test-time fitting start at this seed offset
HELDOUT_OFFSET = 1_000_000

COMMON = {
    "seed": 0, "out": "runs", "backbone": "siren", "layers": 5, "width": 256,
    "omega0": 30.0, "sigma_b": 10.0, "iters": None, "lr": 1e-4, "tau": None,
    "dict_size": 4096, "topk": 32,
}
ITERS = {"fit": 500, "cohort-train": 5000, "freeze-sweep": 500, "sae-train": 10000, "sae-sweep": 10000}


class UsageError(InrdError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("common")
    g.add_argument("--config", type=Path, help="INI file; command-line flags take precedence")
    g.add_argument("--run-id")
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.add_argument("--backbone", choices=("siren", "ffmlp"))
    g.add_argument("--layers", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--omega0", type=float)
    g.add_argument("--sigma-b", type=float)
    g.add_argument("--features", type=int, default=None, help="Fourier feature count (FFMLP)")
    g.add_argument("--iters", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--tau", type=int)
    g.add_argument("--dict-size", type=int)
    g.add_argument("--topk", type=int)
    g.add_argument("-v", "--verbose", action="store_true")


def _images(p: argparse.ArgumentParser) -> None:
    p.add_argument("images", nargs="*", type=Path, help="PNG or PPM files")
    p.add_argument("--synth", choices=synth.KINDS, help="use synthetic images instead of files")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, default=64)


def build_parser() -> Parser:
    parser = Parser(prog="inrd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("synth", help="write synthetic images")
    _common(p)
    p.add_argument("--kind", choices=synth.KINDS, default="bandlimited")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, default=64)

    p = sub.add_parser("fit", help="fit one image")
    _common(p)
    _images(p)

    p = sub.add_parser("cohort-train", help="jointly fit a cohort through one encoder")
    _common(p)
    _images(p)
    p.add_argument("--psnr-stop", type=float, default=30.0)
    p.add_argument("--check-every", type=int, default=50)

    p = sub.add_parser("freeze-sweep", help="test-time fits over freeze boundaries")
    _common(p)
    _images(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--no-baseline", action="store_true", help="skip the no-freeze row")

    p = sub.add_parser("rank", help="stable rank of weights and activations")
    _common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--samples", type=int, default=8192)
    p.add_argument("--activation", choices=("post", "pre"), default="post")

    for name in ("sae-train", "sae-sweep"):
        p = sub.add_parser(name, help="train a TopK dictionary" if name == "sae-train" else "grid of dictionaries")
        _common(p)
        p.add_argument("--ckpt", type=Path, required=True)
        p.add_argument("--batch", type=int, default=4096)
        if name == "sae-train":
            p.add_argument("--layer", type=int, default=2)
        else:
            p.add_argument("--layer-list", type=int, nargs="+", default=None)
            p.add_argument("--dict-sizes", type=int, nargs="+", default=None)
            p.add_argument("--topks", type=int, nargs="+", default=None)

    for name in ("atom-map", "ablate"):
        p = sub.add_parser(name, help="spatial maps of atoms" if name == "atom-map" else "remove one atom")
        _common(p)
        p.add_argument("--ckpt", type=Path, required=True)
        p.add_argument("--sae", type=Path, required=True)
        p.add_argument("--atoms", type=int, nargs="+", default=None, help="default: top 8 by mean magnitude")
        p.add_argument("--head", type=int, default=0)
        if name == "ablate":
            _images(p)

    p = sub.add_parser("gallery", help="top atoms per layer as one PNG")
    _common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--sae", type=Path, nargs="+", required=True)
    p.add_argument("--top", type=int, default=8)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Built-in defaults, then the config file, then explicit flags."""
    cfg = dict(COMMON)
    cfg["iters"] = ITERS.get(args.command)
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file {args.config} not found")
        ini = configparser.ConfigParser()
        ini.read(args.config)
        for section in ini.sections():
            for key, value in ini[section].items():
                cfg[key.replace("-", "_")] = _parse_value(value)
    for key, value in vars(args).items():
        if value is not None or key not in cfg:
            cfg[key] = value
    cfg.pop("config", None)
    return {k: _plain(v) for k, v in cfg.items()}


def _plain(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, list):
        return [_plain(v) for v in value]
    return value


def _parse_value(text: str):
    text = text.strip()
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text.lower() in ("none", ""):
        return None
    return text


def _inr_config(cfg: dict, channels: int) -> InrConfig:
    kw = dict(backbone=cfg["backbone"], hidden_layers=cfg["layers"], width=cfg["width"],
              output_dim=channels, omega0=cfg["omega0"], sigma_b=cfg["sigma_b"])
    if cfg.get("features"):
        kw["feature_count"] = cfg["features"]
    return InrConfig(**kw)


def _run_id(cfg: dict) -> str:
    if cfg.get("run_id"):
        return cfg["run_id"]
    keyed = {k: v for k, v in cfg.items() if k not in ("out", "run_id", "verbose")}
    digest = hashlib.sha256(json.dumps(keyed, sort_keys=True, default=str).encode()).hexdigest()[:8]
    return f"{cfg['command']}-s{cfg['seed']}-{digest}"


def _load_images(cfg: dict, run: RunWriter, offset: int = 0) -> list[np.ndarray]:
    if cfg.get("images"):
        out = []
        for path in cfg["images"]:
            run.add_input(Path(path))
            out.append(io.load_image(Path(path)))
        return out
    if cfg.get("synth"):
        n = cfg["size"]
        return [synth.synth_image(cfg["synth"], n, n, offset + cfg["seed"] * 100 + j) for j in range(cfg["count"])]
    raise UsageError("give image paths or --synth KIND")


def _load_ckpt(cfg: dict, run: RunWriter) -> CohortCheckpoint:
    path = Path(cfg["ckpt"])
    if not path.is_file():
        raise UsageError(f"checkpoint {path} not found")
    run.add_input(path)
    return io.load_checkpoint(path)


def _load_sae(path, run: RunWriter) -> sae.SaeModel:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"dictionary {path} not found")
    run.add_input(path)
    return io.load_sae(path)


def _check_layer(layer: int, depth: int) -> None:
    if not 0 <= layer < depth:
        raise UsageError(f"layer {layer} outside 0..{depth - 1}")


# --------------------------------------------------------------------------- commands


def cmd_synth(cfg, run):
    n = cfg["size"]
    for j in range(cfg["count"]):
        img = synth.synth_image(cfg["kind"], n, n, cfg["seed"] * 100 + j)
        run.write("images", f"{cfg['kind']}_{j:03d}.png", io.save_image, img)


def cmd_fit(cfg, run):
    images = _load_images(cfg, run)
    img = images[0]
    config = _inr_config(cfg, img.shape[2])
    fitted, curve = fit_single(init(config, cfg["seed"]), img, cfg["iters"], cfg["lr"])
    ckpt = CohortCheckpoint.from_model(fitted, {"iterations": cfg["iters"], "seed": cfg["seed"],
                                                "dims": [list(img.shape[:2])], "source": "fit"})
    per, mean = cohort_psnr(ckpt, [img])
    ckpt.meta["final_psnr"] = mean
    ckpt.meta["per_image_psnr"] = per
    run.write("checkpoints", "model.ckpt", io.save_checkpoint, ckpt)
    run.write("images", "reconstruction.png", io.save_image, reconstruct(fitted, *img.shape[:2]))
    run.table("fit.csv", ({"step": i + 1, "psnr": float(p)} for i, p in enumerate(curve)), ("step", "psnr"))
    print(f"fit: {mean:.2f} dB after {cfg['iters']} iterations")


def cmd_cohort_train(cfg, run):
    images = _load_images(cfg, run)
    config = _inr_config(cfg, images[0].shape[2])
    ckpt = cohort_train(images, config, iters=cfg["iters"], lr=cfg["lr"], psnr_stop=cfg["psnr_stop"],
                        seed=cfg["seed"], check_every=cfg["check_every"],
                        source=cfg.get("synth") or "files")
    run.write("checkpoints", "cohort.ckpt", io.save_checkpoint, ckpt)
    rows = ({"image": j, "psnr": p} for j, p in enumerate(ckpt.meta["per_image_psnr"]))
    run.table("cohort.csv", rows, ("image", "psnr"))
    print(f"cohort: {ckpt.meta['final_psnr']:.2f} dB mean after {ckpt.meta['iterations']} iterations")


def cmd_freeze_sweep(cfg, run):
    ckpt = _load_ckpt(cfg, run)
    tau = cfg["tau"]
    if tau is not None and not 0 <= tau < ckpt.depth:
        raise UsageError(f"--tau {tau} is out of range: the encoder has L = {ckpt.depth} layers (0..{ckpt.depth - 1})")
    images = _load_images(cfg, run, offset=HELDOUT_OFFSET)
    taus = None if tau is None else [tau]
    res = transfer.freeze_sweep(ckpt, images, seeds=cfg["seeds"], iters=cfg["iters"], lr=cfg["lr"],
                                include_none=not cfg["no_baseline"], taus=taus, base_seed=cfg["seed"])
    run.table("sweep.csv", res.csv_rows(), "sweep")
    agg = res.aggregate()
    for t in res.taus:
        mean, std, ss = agg[t]
        print(f"tau={'none' if t is None else t}: psnr {mean:.2f} +- {std:.2f}  ssim {ss:.3f}")
    if any(t is not None for t in res.taus):
        print(f"tau* = {res.tau_star}")


def cmd_rank(cfg, run):
    ckpt = _load_ckpt(cfg, run)
    prof = rank.rank_profile(ckpt, sample_coords=cfg["samples"], seed=cfg["seed"], activation=cfg["activation"])
    run.table("rank.csv", prof.rows(), "rank")
    print("sr_w " + " ".join(f"{x:.2f}" for x in prof.sr_w) + f"  -> tau* = {prof.tau_star}")


def _fit_sae(ckpt, layer, n, k, cfg):
    data = sae.collect_activations(ckpt, layer)
    sc = sae.SaeConfig(data.rows.shape[1], dict_size=n, k=k, train_steps=cfg["iters"], lr=cfg["lr"],
                       batch_size=cfg["batch"], seed=cfg["seed"])
    model = sae.train_sae(data, sc)
    stats = atoms.dictionary_stats(ckpt, model, layer)
    row = {"n": n, "k": k, "layer": layer, "psnr": sae.substitute_reconstruction(ckpt, model, layer),
           "r2": sae.r2(model, data), "alive_pct": stats.alive_pct, "spatial_l0": stats.spatial_l0}
    return model, row


def cmd_sae_train(cfg, run):
    ckpt = _load_ckpt(cfg, run)
    _check_layer(cfg["layer"], ckpt.depth)
    model, row = _fit_sae(ckpt, cfg["layer"], cfg["dict_size"], cfg["topk"], cfg)
    run.write("checkpoints", f"sae_l{cfg['layer']}.ckpt", io.save_sae, model)
    run.table("sae_sweep.csv", [row], "sae_sweep")
    print(f"sae layer {row['layer']}: r2 {row['r2']:.4f}  psnr {row['psnr']:.2f}  alive {row['alive_pct']:.1f}%")


def cmd_sae_sweep(cfg, run):
    ckpt = _load_ckpt(cfg, run)
    layers = cfg["layer_list"] or list(range(ckpt.depth))
    for layer in layers:
        _check_layer(layer, ckpt.depth)
    cells = [(layer, n, k) for layer in layers for n in (cfg["dict_sizes"] or [cfg["dict_size"]])
             for k in (cfg["topks"] or [cfg["topk"]])]
    with ThreadPoolExecutor(max_workers=transfer.worker_count()) as pool:
        results = list(pool.map(lambda c: _fit_sae(ckpt, *c, cfg), cells))
    for (layer, n, k), (model, _) in zip(cells, results):
        run.write("checkpoints", f"sae_l{layer}_n{n}_k{k}.ckpt", io.save_sae, model)
    run.table("sae_sweep.csv", [r for _, r in results], "sae_sweep")
    print(f"sae-sweep: {len(cells)} dictionaries")


def _atom_list(cfg, stats):
    if cfg["atoms"]:
        for a in cfg["atoms"]:
            if not 0 <= a < stats.n:
                raise UsageError(f"atom {a} outside 0..{stats.n - 1}")
        return cfg["atoms"]
    return [int(a) for a in stats.ranking()[:8]]


def cmd_atom_map(cfg, run):
    ckpt = _load_ckpt(cfg, run)
    model = _load_sae(cfg["sae"], run)
    layer = model.meta.get("layer", 2)
    stats = atoms.dictionary_stats(ckpt, model, layer)
    run.table("atoms.csv", stats.rows(), "atoms")
    dims = ckpt.dims[cfg["head"]]
    for a in _atom_list(cfg, stats):
        amap = atoms.atom_map(ckpt, model, layer, a, dims)
        run.write("maps", f"l{layer}_atom{a:05d}.png", atoms.save_png, atoms.tile_panels([[amap.values]], pad=0))
    print(f"layer {layer}: dead {100 * stats.dead_rate:.1f}%  median active fraction {stats.median_active_frac:.3f}")


def cmd_ablate(cfg, run):
    ckpt = _load_ckpt(cfg, run)
    model = _load_sae(cfg["sae"], run)
    layer = model.meta.get("layer", 2)
    if cfg.get("images") or cfg.get("synth"):
        image = _load_images(cfg, run)[0]
    else:
        image = reconstruct(ckpt.model(cfg["head"]), *ckpt.dims[cfg["head"]])
    stats = atoms.dictionary_stats(ckpt, model, layer)
    rows = []
    for a in _atom_list(cfg, stats):
        res = atoms.ablate_atom(ckpt, model, layer, a, image, head=cfg["head"])
        rows.append({"layer": layer, "atom": a, "psnr_before": res.psnr_before,
                     "psnr_after": res.psnr_after, "psnr_drop": res.psnr_drop,
                     "max_abs_delta": float(np.abs(res.delta).max())})
        run.write("maps", f"l{layer}_ablate{a:05d}.png", atoms.save_png, atoms.tile_panels([[res.delta]], pad=0))
    run.table("ablation.csv", rows,
              ("layer", "atom", "psnr_before", "psnr_after", "psnr_drop", "max_abs_delta"))
    best = max(rows, key=lambda r: r["psnr_drop"])
    print(f"largest drop: atom {best['atom']} at {best['psnr_drop']:.2f} dB")


def cmd_gallery(cfg, run):
    ckpt = _load_ckpt(cfg, run)
    saes = {}
    for path in cfg["sae"]:
        model = _load_sae(path, run)
        saes[model.meta.get("layer", len(saes))] = model
    canvas, ranking = atoms.gallery(ckpt, saes, top_m=cfg["top"])
    run.write("galleries", "gallery.png", atoms.save_png, canvas)
    rows = [{"layer": layer, "rank": r, "atom": a} for layer, order in ranking.items() for r, a in enumerate(order)]
    run.table("gallery.csv", rows, ("layer", "rank", "atom"))


COMMANDS = {
    "synth": cmd_synth, "fit": cmd_fit, "cohort-train": cmd_cohort_train,
    "freeze-sweep": cmd_freeze_sweep, "rank": cmd_rank, "sae-train": cmd_sae_train,
    "sae-sweep": cmd_sae_sweep, "atom-map": cmd_atom_map, "ablate": cmd_ablate, "gallery": cmd_gallery,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        manifest = RunManifest(_run_id(cfg), args.command, cfg, seeds={"seed": cfg["seed"]})
        run = RunWriter(Path(cfg["out"]), manifest)
        run.start(args.command)
        COMMANDS[args.command](cfg, run)
        run.stop(args.command)
        path = run.close()
    except (NumericError, FloatingPointError) as exc:
        print(f"inrd: numeric failure: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ContractError, ShapeError, io.FormatError, OSError) as exc:
        print(f"inrd: {exc}", file=sys.stderr)
        return 1
    print(f"run written to {path.parent}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
