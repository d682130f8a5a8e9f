"""Command-line front end: simulate, mask, register, fuse, evaluate, ksweep.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command writes into ``--out`` and finishes with ``report.json``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .fusion import FusionConfig, fuse
from .geometry import (AffineParams, SingularTransformError, apply_affine,
                       corner_endpoint_error, invert_affine, load_affine, load_field,
                       save_affine, save_field)
from .mask import as_mask, compute_mask, mask_fraction
from .metrics import DegenerateMetricError
from .raster import RasterFormatError, load_pgm, save_pgm
from .register import RegisterConfig, register
from .simulate import (AugmentationRanges, ElasticParams, decompose_affine,
                       make_misaligned_pair, synthetic_scene)

log = logging.getLogger("regfuse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class MetricSelection:
    registration: tuple = metrics.REGISTRATION_METRICS
    fusion: tuple = metrics.FUSION_METRICS
    qcv_window: int = 16

    def __post_init__(self):
        object.__setattr__(self, "registration", tuple(self.registration))
        object.__setattr__(self, "fusion", tuple(self.fusion))
        bad = (set(self.registration) - set(metrics.REGISTRATION_METRICS)) | (
            set(self.fusion) - set(metrics.FUSION_METRICS))
        if bad:
            raise ValueError(f"unknown metrics: {sorted(bad)}")
        if self.qcv_window < 4:
            raise ValueError("qcv_window must be >= 4")


_SECTIONS = {
    "augmentation": AugmentationRanges,
    "elastic": ElasticParams,
    "register": RegisterConfig,
    "fusion": FusionConfig,
    "metrics": MetricSelection,
}


@dataclass(frozen=True)
class PipelineConfig:
    augmentation: AugmentationRanges = field(default_factory=AugmentationRanges)
    elastic: ElasticParams = field(default_factory=ElasticParams)
    register: RegisterConfig = field(default_factory=RegisterConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    metrics: MetricSelection = field(default_factory=MetricSelection)
    out: str = "out"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        if not isinstance(d, dict):
            raise UsageError("config must be a JSON object")
        unknown = set(d) - set(_SECTIONS) - {"out", "seed"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for name, typ in _SECTIONS.items():
            sec = d.get(name, {})
            if not isinstance(sec, dict):
                raise UsageError(f"config section '{name}' must be an object")
            allowed = {f.name for f in dataclasses.fields(typ)}
            extra = set(sec) - allowed
            if extra:
                raise UsageError(f"unknown keys in '{name}': {sorted(extra)}")
            try:
                kw[name] = typ(**sec)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"invalid '{name}' section: {exc}") from None
        if "out" in d:
            kw["out"] = str(d["out"])
        if "seed" in d:
            if not isinstance(d["seed"], int) or d["seed"] < 0:
                raise UsageError("seed must be a non-negative integer")
            kw["seed"] = d["seed"]
        return cls(**kw)

    @classmethod
    def load(cls, path) -> PipelineConfig:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# helpers

def _clean(obj):
    """JSON-safe copy: NaN/inf become null, tuples become lists, numpy unwrapped."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_clean(obj), sort_keys=True, indent=2,
                                     ensure_ascii=False) + "\n")


def _load_image(path):
    try:
        return load_pgm(path)
    except (OSError, RasterFormatError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _load_theta(path):
    try:
        return load_affine(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _load_phi(path):
    try:
        return load_field(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _classify(exc) -> int:
    if isinstance(exc, (DegenerateMetricError, SingularTransformError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    return EXIT_DATA


def _save_mask(mask, path):
    save_pgm(np.asarray(mask, dtype=np.float64), path)


# ---------------------------------------------------------------------------
# manifests and per-item jobs

_ITEM_KEYS = {"reference", "moving", "theta", "phi", "second", "mask", "name"}


def load_manifest(path) -> list:
    try:
        items = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read manifest {path}: {exc}") from None
    if not isinstance(items, list) or not items:
        raise UsageError("manifest must be a non-empty JSON array")
    base = Path(path).parent
    out = []
    for i, it in enumerate(items):
        if isinstance(it, list):
            if len(it) not in (2, 3):
                raise UsageError(f"manifest item {i}: path arrays need 2 or 3 entries")
            it = dict(zip(("reference", "moving", "second"), it))
        if not isinstance(it, dict):
            raise UsageError(f"manifest item {i} must be an object or a path array")
        extra = set(it) - _ITEM_KEYS
        if extra:
            raise UsageError(f"manifest item {i}: unknown keys {sorted(extra)}")
        if "reference" not in it or "moving" not in it:
            raise UsageError(f"manifest item {i}: 'reference' and 'moving' are required")
        resolved = {}
        for k, v in it.items():
            if k == "name":
                resolved[k] = str(v)
                continue
            p = Path(v)
            p = p if p.is_absolute() else base / p
            if not p.exists():
                raise UsageError(f"manifest item {i}: {k} path {v} does not exist")
            resolved[k] = str(p)
        out.append(resolved)
    return out


def _item_dir(out, idx, item):
    d = Path(out) / item.get("name", f"item_{idx:03d}")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _job_register(idx, item, cfg: PipelineConfig, out):
    ref = _load_image(item["reference"])
    mov = _load_image(item["moving"])
    theta = _load_theta(item["theta"]) if "theta" in item else None
    phi = _load_phi(item["phi"]) if "phi" in item else None
    if ref.shape != mov.shape:
        raise DataError(f"shape mismatch {ref.shape} vs {mov.shape}")
    res = register(ref, mov, cfg.register, gt_theta=theta, gt_phi=phi)
    d = _item_dir(out, idx, item)
    save_pgm(res.registered, d / "registered.pgm")
    save_affine(res.theta_hat, d / "theta_hat.json")
    save_field(res.phi_hat, d / "phi_hat.pfm")
    eval_mask = res.mask
    if theta is not None:
        eval_mask = compute_mask(ref.shape, theta, phi, cfg.register.mask_threshold)
    rep = metrics.registration_report(ref, res.registered, eval_mask)
    rep = {k: v for k, v in rep.items()
           if k not in metrics.REGISTRATION_METRICS or k in cfg.metrics.registration}
    rep["final_mncc"] = res.final_mncc
    if theta is not None:
        rep["corner_error_px"] = corner_endpoint_error(res.theta_hat, invert_affine(theta),
                                                       ref.shape)
    rep["phi_rms_px"] = res.phi_hat.rms()
    return {"metrics": rep, "theta_hat": res.theta_hat.to_dict(),
            "objective_trace": res.objective_trace, "outputs": sorted(
                p.name for p in d.iterdir())}


def _job_fuse(idx, item, cfg: PipelineConfig, out):
    v = _load_image(item["reference"])
    r = _load_image(item.get("second", item["moving"]))
    if v.shape != r.shape:
        raise DataError(f"shape mismatch {v.shape} vs {r.shape}")
    res = fuse(v, r, cfg.fusion)
    d = _item_dir(out, idx, item)
    save_pgm(res.fused, d / "fused.pgm")
    write_json({"energy_trace": res.energy_trace, "iterations_used": res.iterations_used,
                "terms": res.terms}, d / "trace.json")
    rep = metrics.fusion_report(v, r, res.fused, cfg.metrics.qcv_window)
    rep = {k: rep[k] for k in cfg.metrics.fusion}
    rep.update(energy=res.energy_trace[-1], iterations_used=res.iterations_used,
               wsim=res.terms["wsim"], grad=res.terms["grad"])
    return {"metrics": rep}


def _job_evaluate(idx, item, cfg: PipelineConfig, out):
    a = _load_image(item["reference"])
    b = _load_image(item["moving"])
    if "second" in item:
        f = _load_image(item["second"])
        if not a.shape == b.shape == f.shape:
            raise DataError("shape mismatch in fusion triple")
        rep = metrics.fusion_report(a, b, f, cfg.metrics.qcv_window)
        return {"kind": "fusion", "metrics": {k: rep[k] for k in cfg.metrics.fusion}}
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    mask = None
    if "mask" in item:
        try:
            mask = as_mask(np.rint(_load_image(item["mask"])), a.shape)
        except ValueError as exc:
            raise DataError(f"{item['mask']}: {exc}") from None
    rep = metrics.registration_report(a, b, mask)
    return {"kind": "registration", "metrics": {
        k: v for k, v in rep.items()
        if k not in metrics.REGISTRATION_METRICS or k in cfg.metrics.registration}}


_JOBS = {"register": _job_register, "fuse": _job_fuse, "evaluate": _job_evaluate}


def _run_one(kind, idx, item, cfg, out):
    try:
        return {"status": "ok", **_JOBS[kind](idx, item, cfg, out)}
    except Exception as exc:  # isolate item failures
        return {"status": "failed", "error": f"{type(exc).__name__}: {exc}",
                "exit_code": _classify(exc)}


def run_batch(kind, items, cfg: PipelineConfig, out, workers=1) -> tuple[dict, int]:
    Path(out).mkdir(parents=True, exist_ok=True)
    args = [(kind, i, it, cfg, str(out)) for i, it in enumerate(items)]
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, *zip(*args)))
    else:
        results = [_run_one(*a) for a in args]
    per_item = []
    for it, res in zip(items, results):
        res = dict(res)
        res["inputs"] = {k: v for k, v in it.items() if k != "name"}
        per_item.append(res)
    ok = [r["metrics"] for r in per_item if r["status"] == "ok"]
    failed = [r for r in per_item if r["status"] == "failed"]
    report = {"command": kind, "config": cfg.to_dict(), "items": per_item,
              "n_items": len(items), "n_failed": len(failed)}
    if kind == "evaluate":
        for k in ("registration", "fusion"):
            group = [r["metrics"] for r in per_item
                     if r["status"] == "ok" and r["kind"] == k]
            if group:
                report.setdefault("aggregate", {})[k] = metrics.aggregate(group)
    else:
        report["aggregate"] = metrics.aggregate(ok)
    code = failed[0]["exit_code"] if failed else EXIT_OK
    return report, code


# ---------------------------------------------------------------------------
# commands

def _items_from_args(args, need):
    if args.manifest:
        if args.inputs:
            raise UsageError("give either --manifest or positional paths, not both")
        return load_manifest(args.manifest)
    if len(args.inputs) not in need:
        raise UsageError(f"expected {' or '.join(map(str, need))} image paths or --manifest")
    keys = ("reference", "moving", "second")
    item = dict(zip(keys, args.inputs))
    for k in ("theta", "phi"):
        if getattr(args, k, None):
            item[k] = args.__dict__[k]
    for k, v in item.items():
        if not Path(v).exists():
            raise DataError(f"{k} path {v} does not exist")
    return [item]


def cmd_simulate(args, cfg: PipelineConfig, out: Path) -> int:
    if args.input and args.synthetic:
        raise UsageError("give an input image or --synthetic, not both")
    if args.input:
        if not Path(args.input).exists():
            raise DataError(f"input {args.input} does not exist")
        img = _load_image(args.input)
    else:
        size = args.synthetic or 256
        img = synthetic_scene((size, size), seed=cfg.seed)
    moving, theta, phi = make_misaligned_pair(img, cfg.augmentation, cfg.elastic, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    save_pgm(img, out / "reference.pgm")
    save_pgm(moving, out / "moving.pgm")
    save_affine(theta, out / "theta.json")
    save_field(phi, out / "phi.pfm")
    report = {
        "command": "simulate", "seed": cfg.seed, "shape": list(img.shape),
        "theta": theta.to_dict(), "decomposition": decompose_affine(theta, img.shape),
        "phi_rms_px": phi.rms(), "phi_std_px": float(np.std(np.stack([phi.dx, phi.dy]))),
        "identity": bool(theta == AffineParams.identity() and phi.rms() == 0.0),
        "config": cfg.to_dict(),
    }
    write_json(report, out / "report.json")
    return EXIT_OK


def cmd_mask(args, cfg: PipelineConfig, out: Path) -> int:
    theta = _load_theta(args.theta)
    phi = _load_phi(args.phi) if args.phi else None
    if args.like:
        shape = _load_image(args.like).shape
    elif phi is not None:
        shape = phi.shape
    elif args.size:
        shape = tuple(args.size)
    else:
        raise UsageError("mask needs --like IMAGE, --size H W or --phi")
    if phi is not None and phi.shape != shape:
        raise DataError(f"field shape {phi.shape} does not match {shape}")
    try:
        m = compute_mask(shape, theta, phi, args.threshold)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    _save_mask(m, out / "mask.pgm")
    write_json({"command": "mask", "shape": list(shape), "threshold": args.threshold,
                "mask_fraction": mask_fraction(m)}, out / "report.json")
    return EXIT_OK


def _cmd_batch(kind, need):
    def run(args, cfg: PipelineConfig, out: Path) -> int:
        items = _items_from_args(args, need)
        report, code = run_batch(kind, items, cfg, out, args.workers)
        write_json(report, out / "report.json")
        for it in report["items"]:
            if it["status"] == "failed":
                print(f"item failed: {it['error']}", file=sys.stderr)
        return code
    return run


def _ksweep_job(img, k, s, cfg: PipelineConfig):
    params = dataclasses.replace(cfg.elastic, k=k)
    seq = np.random.SeedSequence([cfg.seed, s])
    moving, theta, phi = make_misaligned_pair(img, cfg.augmentation, params, seq)
    gt = compute_mask(img.shape, theta, phi, cfg.register.mask_threshold)
    row = {"k": k, "seed_index": s,
           "pre": metrics.mncc(moving, img, gt), "phi_std_px": float(
               np.std(np.stack([phi.dx, phi.dy])))}
    # the affine stage is deterministic, so W/O is the affine-only image of the same run
    res = register(img, moving, cfg.register, gt_theta=theta, gt_phi=phi)
    row["w"] = metrics.mncc(res.registered, img, gt)
    row["wo"] = metrics.mncc(apply_affine(moving, res.theta_hat), img, gt)
    return row


def cmd_ksweep(args, cfg: PipelineConfig, out: Path) -> int:
    if any(k < 1 for k in args.k):
        raise UsageError("k values must be >= 1")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    if args.input:
        img = _load_image(args.input)
    else:
        img = synthetic_scene((args.synthetic or 256,) * 2, seed=cfg.seed)
    jobs = [(img, k, s, cfg) for k in args.k for s in range(args.seeds)]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_ksweep_job, *zip(*jobs)))
    else:
        rows = [_ksweep_job(*j) for j in jobs]
    per_k = {}
    for k in args.k:
        sel = [r for r in rows if r["k"] == k]
        agg = metrics.aggregate([{x: r[x] for x in ("pre", "wo", "w", "phi_std_px")}
                                 for r in sel])
        per_k[str(k)] = {**agg, "w_ge_wo": all(r["w"] >= r["wo"] for r in sel)}
    out.mkdir(parents=True, exist_ok=True)
    write_json({"command": "ksweep", "k": list(args.k), "seeds": args.seeds,
                "runs": rows, "per_k": per_k, "config": cfg.to_dict()}, out / "report.json")
    for k in args.k:
        p = per_k[str(k)]
        print(f"k={k}: W/O {p['wo']['text']}  W {p['w']['text']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="regfuse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, batch=False):
        sp.add_argument("--config", help="pipeline config JSON")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", help="output directory (overrides the config)")
        if batch:
            sp.add_argument("--manifest", help="JSON batch manifest")
            sp.add_argument("--workers", type=int, default=1)

    sp = sub.add_parser("simulate", help="misalign an image with random (theta, phi)")
    sp.add_argument("input", nargs="?", help="reference PGM")
    sp.add_argument("--synthetic", type=int, metavar="SIZE",
                    help="use a generated SIZE x SIZE scene instead of an input file")
    common(sp)

    sp = sub.add_parser("mask", help="reconstructible mask from theta / phi")
    sp.add_argument("--theta", required=True)
    sp.add_argument("--phi")
    sp.add_argument("--like", help="PGM whose size the mask takes")
    sp.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    sp.add_argument("--threshold", type=float, default=0.0)
    common(sp)

    sp = sub.add_parser("register", help="affine + deformable registration")
    sp.add_argument("inputs", nargs="*", metavar="REFERENCE MOVING")
    sp.add_argument("--theta", help="ground-truth theta JSON")
    sp.add_argument("--phi", help="ground-truth phi PFM")
    common(sp, batch=True)

    sp = sub.add_parser("fuse", help="gradient-aware fusion of two sources")
    sp.add_argument("inputs", nargs="*", metavar="SOURCE")
    common(sp, batch=True)

    sp = sub.add_parser("evaluate", help="metrics for pairs or fusion triples")
    sp.add_argument("inputs", nargs="*", metavar="IMAGE")
    common(sp, batch=True)

    sp = sub.add_parser("ksweep", help="with/without deformable stage across k")
    sp.add_argument("input", nargs="?", help="reference PGM")
    sp.add_argument("--synthetic", type=int, metavar="SIZE")
    sp.add_argument("--k", type=int, nargs="+", default=[15, 20, 25, 30])
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--workers", type=int, default=1)
    common(sp)
    return p


_COMMANDS = {
    "simulate": cmd_simulate,
    "mask": cmd_mask,
    "register": _cmd_batch("register", (2,)),
    "fuse": _cmd_batch("fuse", (2,)),
    "evaluate": _cmd_batch("evaluate", (2, 3)),
    "ksweep": cmd_ksweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            if args.seed < 0:
                raise UsageError("--seed must be non-negative")
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be >= 1")
        out = Path(args.out or cfg.out)
        return _COMMANDS[args.command](args, cfg, out)
    except UsageError as exc:
        print(f"regfuse: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"regfuse: {type(exc).__name__}: {exc}", file=sys.stderr)
        return _classify(exc)


if __name__ == "__main__":
    sys.exit(main())
