"""Pipeline configuration and the stage functions shared by every command.

A configuration is one JSON document of nested sections. Missing keys take
their defaults, unknown keys are rejected and every value is checked
against the precondition of the module that consumes it when the document
is loaded, so a bad knob fails before any work starts.

Each stage is a plain function from in-memory inputs to outputs plus the
files it writes. The pipeline runner and the standalone commands call the
same functions on the same file contents, so feeding one stage's files to
the next command reproduces the pipeline's artifacts.
"""

from __future__ import annotations

import copy
import json
import math
import os
import time
import warnings
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import cleanup, geomio, hexgen, polycube, register
from .diffusion import Normalization, build_schedule, sample
from .dualnet import (AdamW, ConfigError, DenoiserConfig, EncoderConfig, PolycubeNet,
                      init_params, train_step)

CONFIG_ENV = "POLYHEX_CONFIG"

DEFAULTS = {
    "seed": 0,
    "sample": {"n": 1024, "radius_factor": 0.85, "budget": 16},
    "schedule": {"T": 1024, "beta_start": 1e-4, "beta_end": 0.02},
    "model": {
        "checkpoint": None,
        "encoder": {f.name: f.default for f in fields(EncoderConfig)},
        "denoiser": {f.name: f.default for f in fields(DenoiserConfig)},
    },
    "generate": {"m": 4096, "stride": 4, "dtype": "float32"},
    "cleanup": {"tau": None, "prune_k": None},
    "register": {"icp_iters": 50, "with_scale": True, "beta": 2.0, "lam": 3.0, "w_out": 0.1,
                 "max_iters": 50, "tol": 1e-5},
    "polycube": {"h": None, "gap_factor": 0.35, "reestimate_normals": False, "k": 12,
                 "min_support": 0.2},
    "hexgen": {"subdiv": 2, "anchor_k": 4, "anchor_radius": 3.0, "conform": True,
               "feature_angle": 30.0, "smooth_iters": 20, "smooth_step": 0.5,
               "pillow": False, "pillow_thickness": 0.25},
    "train": {"batch": 32, "points": 4096, "lr": 1e-4, "weight_decay": 0.01, "loss": "hybrid",
              "total_steps": None, "w_range": [0.4, 0.8], "dtype": "float64"},
}


# ---------------------------------------------------------------- config

def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be an object")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _need(ok: bool, key: str, what: str) -> None:
    if not ok:
        raise ConfigError(f"config {key} {what}")


def validate(cfg: dict) -> None:
    """Check every value against the precondition of its owning module."""
    _need(_is_int(cfg["seed"]) and cfg["seed"] >= 0, "seed", "must be a non-negative integer")
    s = cfg["sample"]
    _need(_is_int(s["n"]) and s["n"] >= 1, "sample.n", "must be an integer >= 1")
    _need(_is_num(s["radius_factor"]) and s["radius_factor"] > 0, "sample.radius_factor", "must be > 0")
    _need(_is_int(s["budget"]) and s["budget"] >= 1, "sample.budget", "must be an integer >= 1")
    sc = cfg["schedule"]
    try:
        build_schedule(sc["T"], sc["beta_start"], sc["beta_end"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config schedule: {exc}") from None
    m = cfg["model"]
    _need(m["checkpoint"] is None or isinstance(m["checkpoint"], str), "model.checkpoint",
          "must be a path or null")
    for name, cls in (("encoder", EncoderConfig), ("denoiser", DenoiserConfig)):
        try:
            cls(**m[name])
        except TypeError as exc:
            raise ConfigError(f"config model.{name}: {exc}") from None
    _need(m["encoder"]["d_model"] == m["denoiser"]["d_model"], "model",
          "needs equal encoder and denoiser d_model")
    g = cfg["generate"]
    _need(_is_int(g["m"]) and g["m"] >= 1, "generate.m", "must be an integer >= 1")
    _need(_is_int(g["stride"]) and g["stride"] >= 1, "generate.stride", "must be an integer >= 1")
    _need(g["dtype"] in ("float32", "float64"), "generate.dtype", "must be float32 or float64")
    c = cfg["cleanup"]
    _need(c["tau"] is None or (_is_num(c["tau"]) and c["tau"] > 0), "cleanup.tau",
          "must be > 0 or null (automatic)")
    _need(c["prune_k"] is None or (_is_int(c["prune_k"]) and c["prune_k"] >= 0), "cleanup.prune_k",
          "must be an integer >= 0 or null (default count)")
    r = cfg["register"]
    _need(_is_int(r["icp_iters"]) and r["icp_iters"] >= 0, "register.icp_iters", "must be >= 0")
    _need(isinstance(r["with_scale"], bool), "register.with_scale", "must be true or false")
    for k in ("beta", "lam", "tol"):
        _need(_is_num(r[k]) and r[k] > 0, f"register.{k}", "must be > 0")
    _need(_is_num(r["w_out"]) and 0 <= r["w_out"] < 1, "register.w_out", "must lie in [0, 1)")
    _need(_is_int(r["max_iters"]) and r["max_iters"] >= 1, "register.max_iters", "must be >= 1")
    p = cfg["polycube"]
    _need(p["h"] is None or (_is_num(p["h"]) and p["h"] > 0), "polycube.h", "must be > 0 or null")
    _need(_is_num(p["gap_factor"]) and 0 < p["gap_factor"] < 0.5, "polycube.gap_factor",
          "must lie in (0, 0.5)")
    _need(isinstance(p["reestimate_normals"], bool), "polycube.reestimate_normals", "must be a bool")
    _need(_is_int(p["k"]) and p["k"] >= 3, "polycube.k", "must be an integer >= 3")
    _need(_is_num(p["min_support"]) and 0 <= p["min_support"] < 1, "polycube.min_support",
          "must lie in [0, 1)")
    h = cfg["hexgen"]
    _need(_is_int(h["subdiv"]) and h["subdiv"] >= 1, "hexgen.subdiv", "must be an integer >= 1")
    _need(_is_int(h["anchor_k"]) and h["anchor_k"] >= 1, "hexgen.anchor_k", "must be >= 1")
    _need(_is_num(h["anchor_radius"]) and h["anchor_radius"] > 0, "hexgen.anchor_radius", "must be > 0")
    for k in ("conform", "pillow"):
        _need(isinstance(h[k], bool), f"hexgen.{k}", "must be true or false")
    _need(_is_num(h["feature_angle"]) and 0 < h["feature_angle"] < 180, "hexgen.feature_angle",
          "must lie in (0, 180)")
    _need(_is_int(h["smooth_iters"]) and h["smooth_iters"] >= 0, "hexgen.smooth_iters", "must be >= 0")
    _need(_is_num(h["smooth_step"]) and 0 <= h["smooth_step"] <= 1, "hexgen.smooth_step",
          "must lie in [0, 1]")
    _need(_is_num(h["pillow_thickness"]) and 0 < h["pillow_thickness"] < 0.5,
          "hexgen.pillow_thickness", "must lie in (0, 0.5)")
    t = cfg["train"]
    for k in ("batch", "points"):
        _need(_is_int(t[k]) and t[k] >= 1, f"train.{k}", "must be an integer >= 1")
    _need(_is_num(t["lr"]) and t["lr"] > 0, "train.lr", "must be > 0")
    _need(_is_num(t["weight_decay"]) and t["weight_decay"] >= 0, "train.weight_decay", "must be >= 0")
    _need(t["loss"] in ("hybrid", "l2"), "train.loss", "must be hybrid or l2")
    _need(t["total_steps"] is None or (_is_int(t["total_steps"]) and t["total_steps"] >= 1),
          "train.total_steps", "must be an integer >= 1 or null")
    w = t["w_range"]
    _need(isinstance(w, list) and len(w) == 2 and all(_is_num(x) for x in w) and 0 <= w[0] < w[1] <= 1,
          "train.w_range", "must be [lo, hi] with 0 <= lo < hi <= 1")
    _need(t["dtype"] in ("float32", "float64"), "train.dtype", "must be float32 or float64")


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file (``path`` or the environment default), then overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        cfg = _merge(cfg, doc)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate(cfg)
    return cfg


def set_value(overrides: dict, dotted: str, value) -> None:
    """Record ``value`` under a dotted key unless it is None."""
    if value is None:
        return
    node = overrides
    *head, last = dotted.split(".")
    for k in head:
        node = node.setdefault(k, {})
    node[last] = value


def dump_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- stages

def stage_sample(mesh: geomio.TriMesh, cfg: dict) -> geomio.ConditionCloud:
    s = cfg["sample"]
    return geomio.poisson_disk_sample(mesh, s["n"], cfg["seed"], s["radius_factor"], s["budget"])


def write_condition(path, cond: geomio.ConditionCloud) -> None:
    geomio.save_cloud(path, cond.points)
    geomio.save_provenance(provenance_path(path), cond)


def read_condition(path) -> geomio.ConditionCloud:
    pts = geomio.load_cloud(path)
    return geomio.load_provenance(provenance_path(path), pts[:, :3])


def provenance_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".prov")


def load_model(cfg: dict, checkpoint=None) -> PolycubeNet:
    ckpt = checkpoint or cfg["model"]["checkpoint"]
    if not ckpt:
        raise ConfigError("no checkpoint given (use --ckpt, model.checkpoint or --oracle-polycube)")
    return PolycubeNet.load(ckpt, np.dtype(cfg["generate"]["dtype"]))


def stage_generate(model: PolycubeNet, cond_points: np.ndarray, cfg: dict,
                   timings: dict | None = None) -> np.ndarray:
    g = cfg["generate"]
    t0 = time.perf_counter()
    out = sample(model, cond_points, g["m"], g["stride"], cfg["seed"])
    if timings is not None:
        timings["generate"] = time.perf_counter() - t0
    return out


def stage_clean(P: np.ndarray, cfg: dict) -> tuple[cleanup.FilterResult, float, int]:
    c = cfg["cleanup"]
    P = np.asarray(P, dtype=np.float64)
    tau = c["tau"] if c["tau"] is not None else cleanup.auto_tau(P)
    K = c["prune_k"] if c["prune_k"] is not None else cleanup.default_prune_count(len(P))
    return cleanup.clean(P, cleanup.FilterConfig(tau, K)), tau, K


def stage_register(poly: np.ndarray, cond: geomio.ConditionCloud, cfg: dict):
    """Similarity alignment, CPD refinement and correspondence of a polycube cloud."""
    r = cfg["register"]
    pts = np.asarray(poly, dtype=np.float64)[:, :3]
    T = register.rigid_align(pts, cond.points, r["icp_iters"], r["with_scale"])
    deformed, state = register.cpd_nonrigid(T.apply(pts), cond.points, r["beta"], r["lam"],
                                            r["w_out"], r["max_iters"], r["tol"])
    corr = register.build_correspondence(pts, deformed, cond)
    summary = {
        "scale": T.s, "rotation": T.R.tolist(), "translation": T.t.tolist(), "rigid_rmse": T.rmse,
        "cpd_iterations": state.iterations, "cpd_sigma2": state.sigma2,
        "cpd_converged": bool(state.converged),
        "residual_mean": float(corr.residual.mean()), "residual_max": float(corr.residual.max()),
    }
    return deformed, corr, summary


def stage_polycube(poly: np.ndarray, cfg: dict) -> polycube.PolycubeResult:
    p = cfg["polycube"]
    poly = np.asarray(poly, dtype=np.float64)
    if poly.ndim != 2 or poly.shape[1] != 6:
        raise geomio.DataError("polycube recovery needs a 6-channel cloud")
    return polycube.recover(poly[:, :3], poly[:, 3:], p["h"], p["gap_factor"],
                            p["reestimate_normals"], p["k"], p["min_support"])


def stage_hexmesh(vm: polycube.VoxelModel, corr: register.CorrespondenceMap, poly: np.ndarray,
                  mesh: geomio.TriMesh, cfg: dict, log=None):
    """Extract, anchor, conform, relax and optionally pillow; returns mesh and report dict."""
    h = cfg["hexgen"]
    notes = []
    hm = hexgen.extract_hexes(vm, h["subdiv"])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        hm = hexgen.anchor_boundary(hm, vm, corr, np.asarray(poly)[:, :3], mesh, h["anchor_k"],
                                    h["anchor_radius"])
        if h["conform"]:
            hm = hexgen.conform_features(hm, mesh, h["feature_angle"])
    notes += [str(w.message) for w in caught]
    hm = hexgen.harmonic_interior(hm)
    hm = hexgen.smooth_interior(hm, h["smooth_iters"], h["smooth_step"])
    pillow = "off"
    if h["pillow"]:
        try:
            hm = hexgen.pillow_boundary(hm, h["pillow_thickness"])
            pillow = "applied"
        except hexgen.PillowingError as exc:
            hm = exc.original
            pillow = "rejected"
            notes.append(str(exc))
    if log is not None:
        for n in notes:
            log(f"warning: {n}")
    q = hexgen.quality(hm)
    report = dict(q.as_dict(), cells=int(len(hm.cells)), vertices=int(len(hm.vertices)),
                  pillow=pillow, warnings=notes)
    return hm, report


# ---------------------------------------------------------------- pipeline runner

class StageError(Exception):
    """A pipeline stage failed; carries the stage name and completed artifacts."""

    def __init__(self, stage: str, cause: BaseException, artifacts: list[str]):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.artifacts = artifacts


def run_pipeline(mesh_path, cfg: dict, out_dir, oracle_polycube=None, checkpoint=None,
                 log=print) -> dict:
    """Surface mesh to hex mesh; returns the quality report written to ``quality.json``.

    Stage artifacts land in ``out_dir``; wall-clock timings go to
    ``timing.json`` so the other artifacts stay deterministic.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts: list[str] = []
    timings: dict = {}

    def put(name):
        artifacts.append(str(out / name))
        return out / name

    dump_json(put("config.json"), cfg)
    log(f"effective config written to {out / 'config.json'}")
    state: dict = {}

    def load():
        state["mesh"] = geomio.load_mesh(mesh_path)
        if state["mesh"].nonmanifold:
            log("warning: input mesh is non-manifold")

    def sample_stage():
        state["cond"] = stage_sample(state["mesh"], cfg)
        write_condition(put("condition.pcd"), state["cond"])
        artifacts.append(str(provenance_path(out / "condition.pcd")))

    def generate_stage():
        if oracle_polycube is not None:
            P = geomio.load_polycube(oracle_polycube).data
        else:
            P = stage_generate(load_model(cfg, checkpoint), state["cond"].points, cfg)
        geomio.save_cloud(put("polycube.pcd"), P)
        state["poly"] = P

    def clean_stage():
        res, tau, K = stage_clean(state["poly"], cfg)
        geomio.save_cloud(put("clean.pcd"), res.points)
        state["clean"] = res.points
        state["clean_info"] = {"tau": tau, "K": K, "removed_phase1": res.removed_phase1,
                               "removed_phase2": res.removed_phase2, "kept": int(len(res.points))}

    def register_stage():
        deformed, corr, summary = stage_register(state["clean"], state["cond"], cfg)
        geomio.save_cloud(put("deformed.pcd"), deformed)
        register.save_correspondence(put("correspondence.txt"), corr)
        dump_json(put("register.json"), summary)
        state["corr"] = corr

    def polycube_stage():
        res = stage_polycube(state["clean"], cfg)
        polycube.save_voxels(put("voxels.txt"), res.model)
        rep = polycube.structure_report(res.model).as_dict()
        dump_json(put("structure.json"), rep)
        state["vm"] = res.model
        state["structure"] = rep

    def hexmesh_stage():
        hm, report = stage_hexmesh(state["vm"], state["corr"], state["clean"], state["mesh"], cfg, log)
        hexgen.export_vtk(hm, put("hex.vtk"))
        verts, quads = hm.vertices, hm.boundary_quads()
        geomio.save_obj(put("boundary.obj"), verts, quads)
        state["report"] = report

    stages = [("load", load), ("sample", sample_stage), ("generate", generate_stage),
              ("cleanup", clean_stage), ("register", register_stage),
              ("polycube", polycube_stage), ("hexmesh", hexmesh_stage)]
    for name, fn in stages:
        t0 = time.perf_counter()
        try:
            fn()
        except Exception as exc:
            raise StageError(name, exc, list(artifacts)) from exc
        timings[name] = time.perf_counter() - t0
        log(f"{name}: {timings[name]:.3f} s")
    quality = dict(state["report"], cleanup=state["clean_info"],
                   structure={k: state["structure"][k] for k in ("voxels", "euler", "genus")},
                   source="oracle" if oracle_polycube is not None else "model")
    dump_json(put("quality.json"), quality)
    dump_json(out / "timing.json", timings)
    return quality


# ---------------------------------------------------------------- training

def split_stem(path: Path) -> str:
    return path.name.split(".", 1)[0]


def load_pairs(data_dir) -> tuple[list[tuple[str, np.ndarray, np.ndarray]], list[str]]:
    """Pair 3-channel conditions with 6-channel targets sharing a filename stem."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data directory not found: {data_dir}")
    conds, targets = {}, {}
    for p in sorted(data_dir.glob("*.pcd")):
        arr = geomio.load_cloud(p)
        (conds if arr.shape[1] == 3 else targets)[split_stem(p)] = (p, arr)
    stems = sorted(set(conds) & set(targets))
    unpaired = sorted(str(v[0]) for k, v in {**conds, **targets}.items() if k not in stems)
    pairs = [(s, conds[s][1], targets[s][1]) for s in stems]
    return pairs, unpaired


def _subsample(rng, arr, n):
    return arr[rng.choice(len(arr), size=n, replace=len(arr) < n)]


def make_batch(pairs, rng: np.random.Generator, batch: int, points: int):
    """Random pairs, subsampled to ``points`` rows, each normalized by its condition's bbox."""
    pick = rng.choice(len(pairs), size=batch, replace=len(pairs) < batch)
    gs, xs = [], []
    for i in pick:
        _, g, x = pairs[i]
        norm = Normalization.fit(g)
        gs.append(norm.apply(_subsample(rng, g, points)))
        xs.append(norm.apply(_subsample(rng, x, points)))
    return np.stack(gs), np.stack(xs)


def build_model(cfg: dict) -> PolycubeNet:
    m, sc = cfg["model"], cfg["schedule"]
    enc, den = EncoderConfig(**m["encoder"]), DenoiserConfig(**m["denoiser"])
    params = init_params(enc, den, cfg["seed"], np.dtype(cfg["train"]["dtype"]))
    return PolycubeNet(enc, den, params,
                       schedule=build_schedule(sc["T"], sc["beta_start"], sc["beta_end"]))


def train(pairs, cfg: dict, steps: int, log_rows: list | None = None) -> PolycubeNet:
    """Train a fresh model for ``steps`` updates; appends (step, loss, lr) rows."""
    t = cfg["train"]
    model = build_model(cfg)
    opt = AdamW(model.params, t["lr"], weight_decay=t["weight_decay"],
                total_steps=t["total_steps"] or steps)
    rng = np.random.default_rng(cfg["seed"])
    for step in range(1, steps + 1):
        lr = opt.lr
        g, x = make_batch(pairs, rng, t["batch"], t["points"])
        loss = train_step(model, g, x, opt, rng, t["loss"], tuple(t["w_range"]))
        if log_rows is not None:
            log_rows.append((step, loss, lr))
    return model

