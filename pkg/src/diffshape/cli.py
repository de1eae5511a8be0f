"""Batch pipeline: ingest, align, encode, fit, predict, normalize, report.

Every subcommand writes ``report.json`` plus PLY meshes into ``--out``.
Outputs are staged in a temporary directory and moved into place only when
the run succeeds.  Exit codes: 0 success, 2 configuration/manifest error,
3 numerical failure; errors are reported as JSON on stderr.
"""
import argparse
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import compare_report, comparison_table, pls_loocv
from .diffcoords import ReferenceMesh, compute_reference, decode, encode
from .errors import ConfigError, MeshFormatError, ShapeError
from .meshprep import (ManifestRow, align_to, fold_trend, load_mesh, procrustes_align,
                       read_manifest, save_mesh, sphere_fit, synthesize_dataset,
                       trough_mesh, write_manifest)
from .stats import (DEFAULT_CAP, LabeledSample, frechet_mean, geodesic_regression,
                    loocv, normalize_group, project)

logger = logging.getLogger("diffshape")

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


@dataclass
class RunConfig:
    command: str
    manifest: str = None
    out: str = "."
    groups: list = field(default_factory=list)
    t0: float = None
    cap: float = DEFAULT_CAP
    baseline: str = None
    seed: int = 0
    samples: int = 4
    queries: list = field(default_factory=list)
    align: bool = True
    reference: str = None
    rotation_weight: float = 1.0
    stretch_weight: float = 1.0
    area_weights: bool = False
    reference_tol: float = 1e-6
    reference_max_iter: int = 20
    max_iter: int = 500
    # synth
    params: list = field(default_factory=lambda: [0.0, 1.0, 2.0, 3.0])
    noise: float = 0.0
    fold_angle: float = 0.15
    group_name: str = "synthetic"

    def validate(self):
        for name in ("cap", "reference_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.t0 is not None and not math.isfinite(self.t0):
            raise ConfigError("t0 must be finite")
        if self.samples < 2:
            raise ConfigError("--samples must be at least 2")
        if self.rotation_weight < 0 or self.stretch_weight < 0:
            raise ConfigError("metric weights must be nonnegative")
        if self.command != "synth" and not self.manifest:
            raise ConfigError("--manifest is required")
        if self.command == "normalize" and self.t0 is None:
            raise ConfigError("normalize requires --t0")
        if self.noise < 0:
            raise ConfigError("--noise must be nonnegative")


@dataclass
class GroupData:
    name: str
    rows: list
    meshes: list
    ref: ReferenceMesh
    space: object
    samples: list
    queries: list
    aligned: list


def _space_options(cfg):
    return {"rotation_weight": cfg.rotation_weight, "stretch_weight": cfg.stretch_weight,
            "area_weighted": cfg.area_weights}


def prepare_group(name, rows, cfg, extra_queries=()):
    """Load, align and encode one group; unlabeled rows become queries."""
    labeled = [r for r in rows if r.labeled]
    unlabeled = [r for r in rows if not r.labeled]
    unlabeled += [ManifestRow(Path(p).stem, str(p), name, None) for p in extra_queries]
    if len(labeled) < 2:
        raise ConfigError(f"group {name!r} needs at least two rows with a latitude")
    lmeshes = [load_mesh(r.mesh_path) for r in labeled]
    qmeshes = [load_mesh(r.mesh_path) for r in unlabeled]
    aligned, info = procrustes_align(lmeshes, return_info=True)
    if cfg.align:
        lmeshes = aligned
        qmeshes = [align_to(m, info.mean) for m in qmeshes]
    if cfg.reference:
        ref = ReferenceMesh(load_mesh(cfg.reference))
    else:
        ref = compute_reference(lmeshes, tol=cfg.reference_tol,
                                max_iter=cfg.reference_max_iter,
                                space_options=_space_options(cfg))
    space = ref.shape_space(**_space_options(cfg))
    samples = [LabeledSample(encode(m, ref), r.latitude, name, r.id)
               for m, r in zip(lmeshes, labeled)]
    queries = [LabeledSample(encode(m, ref), float("nan"), name, r.id)
               for m, r in zip(qmeshes, unlabeled)]
    return GroupData(name, labeled, lmeshes, ref, space, samples, queries, aligned)


def _groups(cfg):
    rows = read_manifest(cfg.manifest)
    names = list(dict.fromkeys(r.group for r in rows))
    wanted = cfg.groups or names
    missing = [g for g in wanted if g not in names]
    if missing:
        raise ConfigError(f"groups not in manifest: {missing}")
    return [(g, [r for r in rows if r.group == g]) for g in wanted]


def _safe(name):
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name) or "group"


class _Writer:
    def __init__(self, root):
        self.root = Path(root)

    def mesh(self, mesh, name):
        save_mesh(mesh, self.root / name)
        return name

    def text(self, text, name):
        (self.root / name).write_text(text, encoding="utf-8")
        return name


def _fit_summary(fit, ref, w, gname, k):
    seg = fit.segment
    curve = []
    for i, t in enumerate(np.linspace(seg.t_min, seg.t_max, k)):
        path = w.mesh(decode(seg.evaluate(t), ref), f"{gname}_curve_{i}.ply")
        curve.append({"param": float(t), "mesh": path})
    return {
        "interval": [seg.t_min, seg.t_max],
        "sse": fit.sse,
        "converged": fit.converged,
        "grad_norm": fit.grad_norm,
        "iterations": fit.iterations,
        "start_mesh": curve[0]["mesh"],
        "end_mesh": curve[-1]["mesh"],
        "curve": curve,
    }


def _loocv_summary(res):
    return {
        "search_intervals": [list(map(float, iv)) for iv in res.search_intervals],
        "samples": [{"id": i, "latitude": float(t), "predicted": float(p), "abs_error": float(e)}
                    for i, t, p, e in zip(res.ids, res.params, res.predictions, res.errors)],
        "mae": res.mae,
        "std_n": res.std,
        "std_n_minus_1": res.std_n_minus_1,
    }


def cmd_fit(cfg, w):
    out = {}
    for gname, rows in _groups(cfg):
        g = prepare_group(gname, rows, cfg)
        fit = geodesic_regression(g.space, g.samples, cap=cfg.cap, max_iter=cfg.max_iter)
        summary = _fit_summary(fit, g.ref, w, _safe(gname), cfg.samples)
        summary["samples"] = [{"id": s.id, "latitude": s.param, "residual": float(d)}
                              for s, d in zip(g.samples, fit.distances)]
        summary["reference_mesh"] = w.mesh(g.ref.mesh, f"{_safe(gname)}_reference.ply")
        out[gname] = summary
    return {"groups": out}


def cmd_loocv(cfg, w):
    out = {}
    for gname, rows in _groups(cfg):
        g = prepare_group(gname, rows, cfg)
        res = loocv(g.space, g.samples, cap=cfg.cap, max_iter=cfg.max_iter)
        entry = _loocv_summary(res)
        if cfg.baseline == "pls":
            X = np.stack([m.vertices.ravel() for m in g.aligned])
            y = np.array([s.param for s in g.samples])
            pres = pls_loocv(X, y, ids=[s.id for s in g.samples], n_components=1)
            rec = compare_report(res, pres, n_components=1)
            entry["baseline"] = rec
            entry["baseline_table"] = w.text(comparison_table(rec),
                                             f"{_safe(gname)}_comparison.csv")
        out[gname] = entry
    return {"groups": out}


def cmd_predict(cfg, w):
    out = {}
    for gname, rows in _groups(cfg):
        g = prepare_group(gname, rows, cfg, extra_queries=cfg.queries)
        if not g.queries:
            raise ConfigError(f"group {gname!r} has no query (row without latitude or --query)")
        fit = geodesic_regression(g.space, g.samples, cap=cfg.cap, max_iter=cfg.max_iter)
        seg = fit.segment
        search = seg.search_interval()
        res = loocv(g.space, g.samples, cap=cfg.cap, max_iter=cfg.max_iter)
        preds = []
        for q in g.queries:
            t = project(seg, q.shape, search)
            preds.append({"id": q.id, "t_star": t, "band": [t - res.mae, t + res.mae]})
        out[gname] = {"interval": [seg.t_min, seg.t_max], "search_interval": list(search),
                      "mae": res.mae, "predictions": preds}
    return {"groups": out}


def _normalized(g, cfg, w, gname):
    fit = geodesic_regression(g.space, g.samples, cap=cfg.cap, max_iter=cfg.max_iter)
    pts, vecs = normalize_group(g.samples, fit.segment, cfg.t0, return_vectors=True)
    mean = frechet_mean(g.space, pts)
    mean_mesh = decode(mean, g.ref)
    items = []
    for s, x, (v, _) in zip(g.samples, pts, vecs):
        path = w.mesh(decode(x, g.ref), f"{gname}_normalized_{_safe(s.id)}.ply")
        base = fit.segment.evaluate(s.param)
        items.append({"id": s.id, "latitude": s.param,
                      "residual_norm": float(np.sqrt(g.space.inner(base, v, v))),
                      "mesh": path})
    return fit, items, mean_mesh


def cmd_normalize(cfg, w):
    out = {}
    for gname, rows in _groups(cfg):
        g = prepare_group(gname, rows, cfg)
        fit, items, mean_mesh = _normalized(g, cfg, w, _safe(gname))
        sf = sphere_fit(mean_mesh)
        out[gname] = {
            "interval": [fit.segment.t_min, fit.segment.t_max],
            "t0": cfg.t0,
            "normalized": items,
            "mean_mesh": w.mesh(mean_mesh, f"{_safe(gname)}_normalized_mean.ply"),
            "mean_sphere": _sphere_dict(sf),
        }
    return {"groups": out}


def _sphere_dict(sf):
    return {"center": [float(c) for c in sf.center], "radius": sf.radius,
            "rms_residual": sf.rms_residual}


def cmd_sphere_fit(cfg, w):
    out = {}
    for gname, rows in _groups(cfg):
        g = prepare_group(gname, rows, cfg)
        entry = {"meshes": [dict(id=r.id, **_sphere_dict(sphere_fit(m)))
                            for r, m in zip(g.rows, g.meshes)]}
        if cfg.t0 is not None:
            _, _, mean_mesh = _normalized(g, cfg, w, _safe(gname))
            entry["normalized_mean"] = _sphere_dict(sphere_fit(mean_mesh))
            entry["normalized_mean_mesh"] = w.mesh(mean_mesh, f"{_safe(gname)}_normalized_mean.ply")
        out[gname] = entry
    return {"groups": out}


def cmd_synth(cfg, w):
    ref = ReferenceMesh(trough_mesh())
    trend = fold_trend(ref, cfg.fold_angle)
    data = synthesize_dataset(ref, trend, cfg.noise, cfg.params, cfg.seed,
                              group=cfg.group_name)
    rows = []
    for s, m in zip(data.samples, data.meshes):
        name = w.mesh(m, f"{_safe(s.id)}.ply")
        rows.append(ManifestRow(s.id, name, s.group, s.param))
    w.mesh(ref.mesh, "reference.ply")
    write_manifest(rows, w.root / "manifest.csv")
    return {"manifest": "manifest.csv", "reference_mesh": "reference.ply",
            "meshes": [r.mesh_path for r in rows]}


COMMANDS = {
    "fit": cmd_fit, "predict": cmd_predict, "loocv": cmd_loocv,
    "normalize": cmd_normalize, "sphere-fit": cmd_sphere_fit, "synth": cmd_synth,
}


def build_parser():
    p = argparse.ArgumentParser(prog="diffshape", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--manifest", help="CSV with columns id,mesh_path,group,latitude")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--group", dest="groups", action="append", default=[],
                   help="restrict to this group (repeatable)")
    p.add_argument("--t0", type=float, help="normalization parameter")
    p.add_argument("--cap", type=float, default=DEFAULT_CAP,
                   help="extrapolation cap in interval lengths (default %(default)s)")
    p.add_argument("--baseline", choices=["pls"], help="add a PLS baseline to loocv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=4, help="meshes sampled along each fit")
    p.add_argument("--query", dest="queries", action="append", default=[],
                   help="extra mesh to place on the fitted geodesic (predict)")
    p.add_argument("--no-align", dest="align", action="store_false",
                   help="skip Procrustes alignment")
    p.add_argument("--reference", help="use this reference mesh instead of computing one")
    p.add_argument("--rotation-weight", type=float, default=1.0)
    p.add_argument("--stretch-weight", type=float, default=1.0)
    p.add_argument("--area-weights", action="store_true",
                   help="weight faces by reference area in the metric")
    p.add_argument("--reference-tol", type=float, default=1e-6)
    p.add_argument("--reference-max-iter", type=int, default=20)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--params", type=lambda s: [float(x) for x in s.split(",")],
                   default=[0.0, 1.0, 2.0, 3.0], help="synth: comma-separated parameters")
    p.add_argument("--noise", type=float, default=0.0, help="synth: noise scale")
    p.add_argument("--fold-angle", type=float, default=0.15,
                   help="synth: fold angle (radians) per unit parameter")
    p.add_argument("--group-name", default="synthetic", help="synth: group label")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _to_json(obj):
    if isinstance(obj, dict):
        return {str(k): _to_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_json(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj):
    return json.dumps(_to_json(obj), indent=2, allow_nan=False) + "\n"


def run(cfg):
    """Execute one subcommand; returns the report dictionary."""
    cfg.validate()
    out = Path(cfg.out).resolve()
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))
    try:
        w = _Writer(stage)
        report = {"command": cfg.command, "version": __version__,
                  "config": asdict(cfg)}
        report.update(COMMANDS[cfg.command](cfg, w))
        (stage / "report.json").write_text(dumps(report), encoding="utf-8")
        out.mkdir(exist_ok=True)
        for f in sorted(stage.iterdir()):
            os.replace(f, out / f.name)
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return report


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = RunConfig(**{k: v for k, v in vars(args).items() if k != "verbose"})
    try:
        run(cfg)
    except (ConfigError, MeshFormatError, OSError) as exc:
        return _fail(exc, EXIT_CONFIG)
    except (ShapeError, np.linalg.LinAlgError, ValueError, RuntimeError) as exc:
        return _fail(exc, EXIT_NUMERIC)
    return 0


def _fail(exc, code):
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("faces", "sample_id", "line", "residual"):
        val = getattr(exc, attr, None)
        if val is not None:
            payload[attr] = _to_json(val)
    sys.stderr.write(dumps(payload))
    return code


if __name__ == "__main__":
    sys.exit(main())
