"""Command-line pipeline: train, extract, mc, eval, skeleton, precond-report.

Configuration lives in a single JSON file with flag overrides for the
common knobs. The scene is normalized into the encoder's unit cube; when
input preconditioning is on, the normalization shrinks the scene into a
centered sub-box (factor 1 / row-sum norm of the preconditioner) so the
preconditioned image still fits the cube. Meshes are mapped back to scene
coordinates on output.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evalbench, extract, figures, net, precond, sdfdata, skeleton, weights
from .encoder import init_encoder
from .meshio import Mesh, load_mesh, write_obj, write_ply
from .tetgrid import GridConfig, tables_to_json

PRESETS = {"small": (2, 32), "medium": (4, 64), "large": (8, 128)}
PRESET_LEVELS = 4


class UsageError(ValueError):
    pass


@dataclass
class SceneMap:
    """Affine map from scene coordinates into the encoder's unit cube."""

    matrix: np.ndarray                   # (3,3): grid = matrix @ scene + offset
    offset: np.ndarray
    chain: np.ndarray                    # d(grid)/d(normalized scene)
    extent: float                        # scene units per normalized unit

    def to_grid(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=float) @ self.matrix.T + self.offset

    def to_scene(self, pts: np.ndarray) -> np.ndarray:
        inv = np.linalg.inv(self.matrix)
        return (np.asarray(pts, dtype=float) - self.offset) @ inv.T

    def to_dict(self) -> dict:
        return {"matrix": self.matrix.tolist(), "offset": self.offset.tolist(),
                "chain": self.chain.tolist(), "extent": self.extent}

    @classmethod
    def from_dict(cls, d) -> "SceneMap":
        return cls(np.array(d["matrix"]), np.array(d["offset"]),
                   np.array(d["chain"]), float(d["extent"]))


def fit_scene_map(shape: sdfdata.AnalyticSdf, precondition: bool,
                  bounds_pad: float = 0.1) -> SceneMap:
    lo, hi = shape.bounds(pad=bounds_pad * sdfdata._extent(shape))
    center = 0.5 * (np.asarray(lo) + np.asarray(hi))
    extent = float(np.max(np.asarray(hi) - np.asarray(lo)))
    if precondition:
        pre = precond.default_preconditioner()
        a = pre.matrix
        shrink = 1.0 / pre.row_sum_norm
    else:
        a = np.eye(3)
        shrink = 1.0
    chain = shrink * a
    matrix = chain / extent
    offset = 0.5 * np.ones(3) - matrix @ center
    return SceneMap(matrix, offset, chain, extent)


@dataclass
class RunConfig:
    grid_levels: int = PRESET_LEVELS
    n_min: int = 2
    n_max: int = 32
    feature_dim: int = 2
    log2_table: int = 19
    hidden: tuple[int, ...] = (12, 12, 12)
    epochs: int = 10
    batch_size: int = 4096
    lr_mlp: float = 1e-3
    lr_features: float = 1e-2
    eikonal_weight: float = 5e-3
    n_samples: int = 50_000
    p_near: float = 0.8
    noise_sigma: float = 0.01
    shape: object = "sphere"
    precondition: bool = True
    eps_sign: float = 1e-10
    eps_bary: float = 1e-7
    eps_zero: float = 1e-9
    seed: int = 0
    outdir: str = "runs/out"
    figures: bool = True

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        cfg = cls()
        data = {}
        if path:
            with open(path) as f:
                data = json.load(f)
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        if "preset" in data:
            cfg.apply_preset(data.pop("preset"))
        for key, value in data.items():
            if not hasattr(cfg, key):
                raise UsageError(f"unknown config field {key!r}")
            if key == "hidden":
                value = tuple(int(v) for v in value)
            setattr(cfg, key, value)
        for eps in (cfg.eps_sign, cfg.eps_bary, cfg.eps_zero):
            if eps <= 0:
                raise UsageError("epsilon values must be positive")
        return cfg

    def apply_preset(self, name: str):
        if name not in PRESETS:
            raise UsageError(
                f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        self.n_min, self.n_max = PRESETS[name]
        self.grid_levels = PRESET_LEVELS

    def grid(self) -> GridConfig:
        return GridConfig.from_range(self.grid_levels, self.n_min, self.n_max)

    def train_config(self) -> net.TrainConfig:
        return net.TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr_mlp=self.lr_mlp,
            lr_features=self.lr_features, eikonal_weight=self.eikonal_weight,
            eps_sign=self.eps_sign, seed=self.seed)

    def make_shape(self) -> sdfdata.AnalyticSdf:
        return sdfdata.make_shape(self.shape)


def field_from_params(mlp, enc):
    return lambda pts: net.field_values(pts, mlp, enc)


# ---------------------------------------------------------------------------
# Subcommand bodies (callable programmatically; return artifact paths)
# ---------------------------------------------------------------------------


def run_train(cfg: RunConfig) -> dict:
    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    shape = cfg.make_shape()
    grid = cfg.grid()
    scene_map = fit_scene_map(shape, cfg.precondition)
    # near-surface samples live in scene space; the uniform remainder is
    # split between the scene box and the full encoder domain so the whole
    # grid is constrained even when the preconditioned scene covers only
    # part of the cube, without thinning scene-local coverage
    n_near = int(round(cfg.p_near * cfg.n_samples))
    samples = sdfdata.sample_training(
        shape, max(n_near, 1), p_near=1.0, sigma=cfg.noise_sigma,
        seed=cfg.seed)
    pts_grid = np.clip(scene_map.to_grid(samples.points), 0.0, 1.0)
    targets = samples.targets / scene_map.extent
    n_uni = cfg.n_samples - n_near
    if n_uni > 0:
        rng = np.random.default_rng(cfg.seed + 7_919)
        lo, hi = shape.bounds(pad=0.1 * sdfdata._extent(shape))
        uni_scene = rng.uniform(lo, hi, size=(n_uni - n_uni // 2, 3))
        uni_grid = rng.random((n_uni // 2, 3))
        pts = np.vstack([np.clip(scene_map.to_grid(uni_scene), 0.0, 1.0), uni_grid])
        scene_pts = np.vstack([uni_scene, scene_map.to_scene(uni_grid)])
        pts_grid = np.vstack([pts_grid, pts])
        targets = np.concatenate([targets, shape(scene_pts) / scene_map.extent])
    data = net.TrainingSet(pts_grid, targets, input_chain=scene_map.chain)
    enc0 = init_encoder(grid, d=cfg.feature_dim, log2_table=cfg.log2_table,
                        seed=cfg.seed)
    t0 = time.perf_counter()
    mlp, enc, history = net.train(data, cfg.train_config(), enc0, grid,
                                  hidden=cfg.hidden)
    train_s = time.perf_counter() - t0

    weight_path = out / "weights.tsdf"
    weights.save_weights(weight_path, enc, mlp, sidecar={
        "scene_map": scene_map.to_dict(),
        "shape": cfg.shape if isinstance(cfg.shape, (str, dict)) else "custom",
        "precondition": cfg.precondition,
        "seed": cfg.seed,
    })
    log_path = out / "training_log.csv"
    with open(log_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["epoch", "l1", "eikonal", "total"])
        w.writeheader()
        w.writerows(history)
    if cfg.figures:
        figures.training_curve(history, out / "training_log.png")
    final = history[-1]
    print(f"trained {cfg.epochs} epochs in {train_s:.1f}s; "
          f"final l1={final['l1']:.6f} eikonal={final['eikonal']:.6f} "
          f"total={final['total']:.6f}")
    return {"weights": str(weight_path), "log": str(log_path),
            "history": history}


def _load_run(weight_path):
    enc, mlp, sidecar = weights.load_weights(weight_path)
    if sidecar is None or "scene_map" not in sidecar:
        raise UsageError(f"{weight_path}: missing sidecar with scene map")
    return enc, mlp, SceneMap.from_dict(sidecar["scene_map"]), sidecar


def run_extract(cfg: RunConfig, weight_path) -> dict:
    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    enc, mlp, scene_map, _ = _load_run(weight_path)
    grid = GridConfig(enc.resolutions)
    cache_dir = out / "cache"
    cache_dir.mkdir(exist_ok=True)
    cache_path = cache_dir / f"skeleton_{skeleton.grid_digest(grid)}.npz"
    t0 = time.perf_counter()
    skel = skeleton.load_cache(cache_path, grid)
    cached = skel is not None
    if skel is None:
        skel = skeleton.build_skeleton(grid)
        skeleton.save_cache(cache_path, skel, grid)
    skel_s = time.perf_counter() - t0
    skeleton.annotate(skel, grid, eps_b=cfg.eps_bary)
    t1 = time.perf_counter()
    mesh, ex = extract.extract_mesh(
        mlp, enc, grid, skel=skel, eps_sign=cfg.eps_sign,
        eps_zero=cfg.eps_zero, eps_bary=cfg.eps_bary)
    extract_s = time.perf_counter() - t1
    scene_mesh = Mesh(scene_map.to_scene(mesh.vertices), mesh.triangles,
                      mesh.regions)
    obj_path = out / "mesh.obj"
    ply_path = out / "mesh.ply"
    write_obj(scene_mesh, obj_path)
    write_ply(scene_mesh, ply_path)
    meta = {
        "skeleton_cached": cached,
        "skeleton_seconds": skel_s,
        "extract_seconds": extract_s,
        "initial_vertices": skel.n_vertices,
        "initial_edges": skel.n_edges,
        "final_vertices": int(ex.state.n_vertices),
        "final_edges": int(len(ex.state.edges)),
        "mesh_vertices": scene_mesh.n_vertices,
        "mesh_triangles": scene_mesh.n_triangles,
        "passes": ex.state.log,
    }
    with open(out / "extract_meta.json", "w") as f:
        json.dump(meta, f, indent=1)
    if cfg.figures and ex.state.log:
        figures.extraction_growth(ex.state.log, out / "extract_growth.png")
    print(f"skeleton {'(cached) ' if cached else ''}{skel_s:.2f}s, "
          f"extraction {extract_s:.1f}s, mesh {scene_mesh.n_vertices} vertices "
          f"/ {scene_mesh.n_triangles} triangles")
    return {"obj": str(obj_path), "ply": str(ply_path), "meta": meta,
            "mesh": scene_mesh}


def run_mc(cfg: RunConfig, weight_path, resolution: int) -> dict:
    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    enc, mlp, scene_map, _ = _load_run(weight_path)
    t0 = time.perf_counter()
    mesh = evalbench.marching_cubes(field_from_params(mlp, enc), resolution)
    seconds = time.perf_counter() - t0
    scene_mesh = Mesh(scene_map.to_scene(mesh.vertices), mesh.triangles)
    path = out / f"mc{resolution}.obj"
    write_obj(scene_mesh, path)
    print(f"marching cubes {resolution}^3 in {seconds:.1f}s: "
          f"{scene_mesh.n_vertices} vertices / {scene_mesh.n_triangles} triangles")
    return {"obj": str(path), "mesh": scene_mesh, "seconds": seconds}


def run_eval(cfg: RunConfig, mesh_path, mesh_b_path=None, weight_path=None,
             n: int = 100_000) -> dict:
    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    if (mesh_b_path is None) == (weight_path is None):
        raise UsageError("eval needs exactly one of --mesh-b or --weights")
    mesh = load_mesh(mesh_path)
    report = {"mesh": str(mesh_path), "vertices": mesh.n_vertices,
              "triangles": mesh.n_triangles}
    if mesh_b_path is not None:
        other = load_mesh(mesh_b_path)
        cd = evalbench.chamfer(mesh, other, n=n, seed=cfg.seed)
        report.update({"mode": "mesh-vs-mesh", "mesh_b": str(mesh_b_path),
                       "cd": cd, "cd_x1e6": cd * 1e6})
    else:
        enc, mlp, scene_map, _ = _load_run(weight_path)
        grid_mesh = Mesh(scene_map.to_grid(mesh.vertices), mesh.triangles)
        sc = evalbench.self_consistency(grid_mesh, mlp, enc, n=n, seed=cfg.seed)
        report.update({"mode": "mesh-vs-net", "weights": str(weight_path)})
        report.update(sc)
    json_path = out / "eval_report.json"
    with open(json_path, "w") as f:
        json.dump(report, f, indent=1)
    csv_path = out / "eval_report.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(report.keys()))
        w.writeheader()
        w.writerow(report)
    if cfg.figures:
        figures.metrics_report(report, out / "eval_report.png")
    printable = {k: v for k, v in report.items()
                 if isinstance(v, (int, float)) and k != "vertices"}
    print("eval:", json.dumps(printable, default=float))
    return {"csv": str(csv_path), "json": str(json_path), "report": report}


def run_skeleton(cfg: RunConfig, cache: bool = True) -> dict:
    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    grid = cfg.grid()
    skel = skeleton.build_skeleton(grid)
    if cache:
        cache_dir = out / "cache"
        cache_dir.mkdir(exist_ok=True)
        skeleton.save_cache(
            cache_dir / f"skeleton_{skeleton.grid_digest(grid)}.npz", skel, grid)
    stats = skel.stats
    csv_path = out / "skeleton_stats.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(stats.keys()))
        w.writeheader()
        w.writerow(stats)
    if cfg.figures:
        figures.skeleton_report(stats, out / "skeleton_stats.png")
    with open(out / "luts.json", "w") as f:
        f.write(tables_to_json())
    print(f"skeleton |V|={stats['n_vertices']} |E|={stats['n_edges']} "
          f"({stats['t_vertices_s'] + stats['t_edges_s']:.1f}s, "
          f"~{stats['mem_estimate_mb']:.0f} MB)")
    return {"csv": str(csv_path), "stats": stats}


def run_precond_report(cfg: RunConfig) -> dict:
    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    rows = precond.condition_report()
    csv_path = out / "precond_report.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["case", "kappa_before", "kappa_after"])
        w.writeheader()
        for r in rows:
            w.writerow({"case": r["case"],
                        "kappa_before": f"{r['kappa_before']:.6f}",
                        "kappa_after": f"{r['kappa_after']:.6f}"})
    if cfg.figures:
        figures.precondition_report(rows, out / "precond_report.png")
    for r in rows:
        print(f"{r['case']:>6}  {r['kappa_before']:8.2f}  {r['kappa_after']:8.2f}")
    return {"csv": str(csv_path), "rows": rows}


# ---------------------------------------------------------------------------
# argparse front end
# ---------------------------------------------------------------------------


def _common_overrides(args) -> dict:
    keys = ("seed", "outdir", "shape", "epochs", "n_samples")
    over = {k: getattr(args, k, None) for k in keys}
    if getattr(args, "preset", None):
        over["preset"] = args.preset
    if getattr(args, "no_precond", False):
        over["precondition"] = False
    if getattr(args, "no_figures", False):
        over["figures"] = False
    return over


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tetsurf",
        description="Train tetrahedral-encoder SDF networks and extract "
                    "their exact zero-level-set meshes.")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp, with_train_flags=False):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--preset", choices=sorted(PRESETS),
                        help="resolution preset")
        sp.add_argument("--outdir")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--no-figures", action="store_true")
        if with_train_flags:
            sp.add_argument("--shape", help="shape preset name")
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--n-samples", dest="n_samples", type=int)
            sp.add_argument("--no-precond", action="store_true")

    sp = sub.add_parser("train", help="train a network on an analytic shape")
    add_common(sp, with_train_flags=True)

    sp = sub.add_parser("extract", help="extract the exact zero-level-set mesh")
    add_common(sp)
    sp.add_argument("--weights", required=True)

    sp = sub.add_parser("mc", help="marching-cubes mesh of a trained network")
    add_common(sp)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--resolution", type=int, default=256)

    sp = sub.add_parser("eval", help="chamfer or self-consistency report")
    add_common(sp)
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--mesh-b")
    sp.add_argument("--weights")
    sp.add_argument("--samples", type=int, default=100_000)

    sp = sub.add_parser("skeleton", help="initial-skeleton statistics")
    add_common(sp)
    sp.add_argument("--no-cache", action="store_true")

    sp = sub.add_parser("precond-report", help="condition-number table")
    add_common(sp)
    return p


def _apply_thread_env():
    """TETSURF_THREADS caps the BLAS pools (effective before first use)."""
    import os

    n = os.environ.get("TETSURF_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def main(argv=None) -> int:
    _apply_thread_env()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        cfg = RunConfig.load(args.config, _common_overrides(args))
        if args.command == "train":
            run_train(cfg)
        elif args.command == "extract":
            _require_file(args.weights)
            run_extract(cfg, args.weights)
        elif args.command == "mc":
            _require_file(args.weights)
            run_mc(cfg, args.weights, args.resolution)
        elif args.command == "eval":
            _require_file(args.mesh)
            if args.mesh_b:
                _require_file(args.mesh_b)
            if args.weights:
                _require_file(args.weights)
            run_eval(cfg, args.mesh, mesh_b_path=args.mesh_b,
                     weight_path=args.weights, n=args.samples)
        elif args.command == "skeleton":
            run_skeleton(cfg, cache=not args.no_cache)
        elif args.command == "precond-report":
            run_precond_report(cfg)
        else:  # pragma: no cover
            parser.error(f"unknown command {args.command}")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def _require_file(path):
    if not Path(path).exists():
        raise FileNotFoundError(path)


if __name__ == "__main__":
    sys.exit(main())
