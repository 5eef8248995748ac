"""Command-line entry point: ``polyhex <command> ...``.

Exit codes: 0 success, 2 argument or configuration error, 3 data error
(unreadable or malformed input), 4 numeric or validity error.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, cleanup, geomio, hexgen, polycube, register
from . import pipeline as pl
from .diffusion import Normalization
from .dualnet import ConfigError, PolycubeNet, instrument
from .errors import DataError, ValidityError

FORMAT_VERSIONS = "pcd 1, prov 1, voxels 1, checkpoint 1, vtk legacy 3.0"

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, pl.StageError):
        exc = exc.cause
    if isinstance(exc, (ValidityError, FloatingPointError, np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, OSError)):
        return EXIT_DATA
    if isinstance(exc, (ConfigError, ValueError, TypeError)):
        return EXIT_ARGS
    return EXIT_NUMERIC


def _config(args, overrides: dict | None = None) -> dict:
    return pl.load_config(args.config, overrides)


# ---------------------------------------------------------------- commands

def cmd_sample_mesh(args) -> None:
    if args.n is not None and args.n < 1:
        raise ValueError(f"--n must be >= 1, got {args.n}")
    ov: dict = {}
    pl.set_value(ov, "sample.n", args.n)
    pl.set_value(ov, "seed", args.seed)
    pl.set_value(ov, "sample.radius_factor", args.radius_factor)
    cfg = _config(args, ov)
    mesh = geomio.load_mesh(args.mesh)
    if mesh.nonmanifold:
        _log("warning: input mesh is non-manifold")
    cond = pl.stage_sample(mesh, cfg)
    pl.write_condition(args.out, cond)
    _log(f"wrote {len(cond)} samples ({int(cond.compensated.sum())} compensated) to {args.out}")


def cmd_synth(args) -> None:
    spec = geomio.ShapeSpec.parse(args.shape)
    mesh, poly = geomio.synth_pair(spec, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    geomio.save_mesh(mesh, out / f"{args.stem}.obj")
    geomio.save_cloud(out / f"{args.stem}.polycube.pcd", poly)
    if args.n:
        cfg = _config(args, {"sample": {"n": args.n}, "seed": args.seed})
        pl.write_condition(out / f"{args.stem}.condition.pcd", pl.stage_sample(mesh, cfg))
    _log(f"wrote {args.stem} pair to {out}")


def cmd_train(args) -> None:
    ov: dict = {}
    pl.set_value(ov, "train.loss", args.loss)
    pl.set_value(ov, "seed", args.seed)
    cfg = _config(args, ov)
    if args.steps < 1:
        raise ValueError("--steps must be >= 1")
    pairs, unpaired = pl.load_pairs(args.data)
    for p in unpaired:
        _log(f"warning: skipping unpaired file {p}")
    if not pairs:
        raise DataError("no condition/target pairs found", args.data)
    rows: list = []
    t0 = time.perf_counter()
    model = pl.train(pairs, cfg, args.steps, rows)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    log_path = args.log or str(Path(args.out).with_suffix(".loss.csv"))
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in rows:
            w.writerow([step, repr(loss), repr(lr)])
    _log(f"trained {args.steps} steps on {len(pairs)} pairs in {time.perf_counter() - t0:.1f} s; "
         f"loss {rows[0][1]:.4g} -> {rows[-1][1]:.4g}; checkpoint {args.out}, log {log_path}")


def _sweep_values(spec: str) -> list[int]:
    lo, _, hi = spec.partition("..")
    lo, hi = int(lo), int(hi or lo)
    if lo < 1 or hi < lo:
        raise ValueError(f"bad sweep range {spec!r}")
    out, m = [], lo
    while m <= hi:
        out.append(m)
        m *= 2
    return out


def cmd_generate(args) -> None:
    ov: dict = {}
    pl.set_value(ov, "generate.m", args.m)
    pl.set_value(ov, "generate.stride", args.stride)
    pl.set_value(ov, "generate.dtype", args.dtype)
    pl.set_value(ov, "seed", args.seed)
    cfg = _config(args, ov)
    t0 = time.perf_counter()
    model = pl.load_model(cfg, args.ckpt)
    _log(f"load: {time.perf_counter() - t0:.3f} s")
    cond = geomio.load_cloud(args.condition)[:, :3]
    if args.m_sweep:
        benchmark_sweep(model, cond, _sweep_values(args.m_sweep), args.csv, args.repeat, cfg["seed"])
        return
    if not args.out:
        raise ValueError("--out is required unless --m-sweep is given")
    timings: dict = {}
    P = pl.stage_generate(model, cond, cfg, timings)
    geomio.save_cloud(args.out, P)
    _log(f"generate: {timings['generate']:.3f} s for {model.denoise_calls} denoiser calls, "
         f"M={len(P)}; wrote {args.out}")


def benchmark_sweep(model: PolycubeNet, cond: np.ndarray, ms: list[int], out_csv, repeat: int,
                    seed: int) -> list[tuple[int, float, int]]:
    """Time one denoiser call per resolution (best of ``repeat``)."""
    norm = Normalization.fit(cond)
    z_c = model.encode(norm.apply(cond))
    rng = np.random.default_rng(seed)
    rows = []
    for m in ms:
        x = rng.standard_normal((m, 6)).astype(model.params.dtype)
        best = float("inf")
        with instrument() as inst:
            for _ in range(max(repeat, 1)):
                t0 = time.perf_counter()
                model.denoise(x, z_c, model.schedule.T // 2)
                best = min(best, time.perf_counter() - t0)
        tokens = max(inst.self_attention_tokens) if inst.self_attention_tokens else 0
        rows.append((m, best, tokens))
        _log(f"M={m}: {best:.4f} s per denoiser call, self-attention tokens {tokens}")
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["M", "seconds", "self_attention_tokens"])
            for r in rows:
                w.writerow([r[0], repr(r[1]), r[2]])
    return rows


def cmd_clean(args) -> None:
    ov: dict = {}
    if args.auto_tau:
        ov["cleanup"] = {"tau": None}
    pl.set_value(ov, "cleanup.tau", args.tau)
    pl.set_value(ov, "cleanup.prune_k", args.prune_k)
    cfg = _config(args, ov)
    P = geomio.load_cloud(args.cloud)
    res, tau, K = pl.stage_clean(P, cfg)
    geomio.save_cloud(args.out, res.points)
    _log(f"tau={tau:.6g} K={K}: removed {res.removed_phase1} (phase I) + {res.removed_phase2} "
         f"(phase II), kept {len(res.points)}")


def cmd_register(args) -> None:
    cfg = _config(args)
    poly = geomio.load_cloud(args.polycube)
    cond = pl.read_condition(args.condition)
    deformed, corr, summary = pl.stage_register(poly, cond, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    geomio.save_cloud(out / "deformed.pcd", deformed)
    register.save_correspondence(out / "correspondence.txt", corr)
    pl.dump_json(out / "register.json", summary)
    _log(f"scale {summary['scale']:.6g}, CPD {summary['cpd_iterations']} iterations, "
         f"mean residual {summary['residual_mean']:.4g}")


def cmd_polycube(args) -> None:
    ov: dict = {}
    pl.set_value(ov, "polycube.h", args.h)
    if args.reestimate_normals:
        ov.setdefault("polycube", {})["reestimate_normals"] = True
    cfg = _config(args, ov)
    res = pl.stage_polycube(geomio.load_cloud(args.cloud), cfg)
    polycube.save_voxels(args.out, res.model)
    rep = polycube.structure_report(res.model).as_dict()
    if args.report:
        pl.dump_json(args.report, rep)
    if args.obj:
        geomio.save_obj(args.obj, *res.model.surface())
    _log(f"h={res.h:.6g}: {rep['voxels']} voxels, {rep['boundary_faces']} boundary faces, "
         f"genus {rep['genus']}")


def cmd_hexmesh(args) -> None:
    ov: dict = {}
    pl.set_value(ov, "hexgen.subdiv", args.subdiv)
    if args.pillow:
        ov.setdefault("hexgen", {})["pillow"] = True
    cfg = _config(args, ov)
    vm = polycube.load_voxels(args.voxels)
    corr = register.load_correspondence(args.corr)
    poly = geomio.load_cloud(args.polycube)
    mesh = geomio.load_mesh(args.mesh)
    if len(corr.index) != len(poly):
        raise DataError(f"correspondence has {len(corr.index)} rows, polycube cloud {len(poly)} points")
    hm, report = pl.stage_hexmesh(vm, corr, poly, mesh, cfg, _log)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hexgen.export_vtk(hm, out / "hex.vtk")
    geomio.save_obj(out / "boundary.obj", hm.vertices, hm.boundary_quads())
    pl.dump_json(out / "hexmesh.json", report)
    _log(f"{report['cells']} cells, J_min {report['j_min']:.6g}, J_avg {report['j_avg']:.6g}, "
         f"{report['inverted']} inverted")


def cmd_pipeline(args) -> None:
    ov: dict = {}
    pl.set_value(ov, "seed", args.seed)
    cfg = _config(args, ov)
    q = pl.run_pipeline(args.mesh, cfg, args.out_dir, args.oracle_polycube, args.ckpt, _log)
    _log(f"J_min {q['j_min']:.6g}, J_avg {q['j_avg']:.6g}, {q['inverted']} inverted cells; "
         f"artifacts in {args.out_dir}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"JSON config (default: ${pl.CONFIG_ENV} if set)")
    common.add_argument("--threads", type=int, help="cap BLAS/OpenMP worker threads")

    p = argparse.ArgumentParser(prog="polyhex", description="Polycube diffusion and hex meshing.")
    p.add_argument("--version", action="version",
                   version=f"polyhex {__version__} (formats: {FORMAT_VERSIONS})")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sample-mesh", parents=[common], help="Poisson-disk sample an OBJ surface")
    s.add_argument("mesh")
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--radius-factor", type=float)
    s.add_argument("--out", required=True, help="pcd path; provenance goes next to it as .prov")
    s.set_defaults(func=cmd_sample_mesh)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic mesh/polycube pair")
    s.add_argument("--shape", default="cube", help="preset name, JSON object or JSON file")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=0, help="also write an n-point condition cloud")
    s.add_argument("--stem", default="shape")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train on paired pcd files")
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--loss", choices=["hybrid", "l2"])
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="loss CSV (default: next to the checkpoint)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", parents=[common], help="sample a polycube cloud")
    s.add_argument("--ckpt")
    s.add_argument("--condition", required=True)
    s.add_argument("--m", type=int)
    s.add_argument("--stride", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--dtype", choices=["float32", "float64"])
    s.add_argument("--out")
    s.add_argument("--m-sweep", help="benchmark one denoiser call at M = lo, 2lo, ..., hi ('lo..hi')")
    s.add_argument("--repeat", type=int, default=1)
    s.add_argument("--csv", help="benchmark CSV path")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("clean", parents=[common], help="two-phase outlier removal")
    s.add_argument("cloud")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--tau", type=float)
    g.add_argument("--auto-tau", action="store_true")
    s.add_argument("--prune-k", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_clean)

    s = sub.add_parser("register", parents=[common], help="align a polycube cloud to a condition")
    s.add_argument("--polycube", required=True)
    s.add_argument("--condition", required=True, help="pcd with a .prov sidecar")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("polycube", parents=[common], help="recover the voxel structure")
    s.add_argument("cloud")
    s.add_argument("--h", type=float)
    s.add_argument("--reestimate-normals", action="store_true")
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.add_argument("--obj", help="boundary quads as OBJ")
    s.set_defaults(func=cmd_polycube)

    s = sub.add_parser("hexmesh", parents=[common], help="hex mesh from voxels and anchors")
    s.add_argument("--mesh", required=True)
    s.add_argument("--voxels", required=True)
    s.add_argument("--polycube", required=True, help="the cloud the correspondence was built on")
    s.add_argument("--corr", required=True)
    s.add_argument("--subdiv", type=int)
    s.add_argument("--pillow", action="store_true")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_hexmesh)

    s = sub.add_parser("pipeline", parents=[common], help="surface mesh to hex mesh")
    s.add_argument("mesh")
    s.add_argument("--ckpt")
    s.add_argument("--oracle-polycube", help="ground-truth polycube pcd, bypasses the model")
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise ValueError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                args.func(args)
        else:
            args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = exit_code(exc)
        _log(f"polyhex {args.command}: error: {exc}")
        if isinstance(exc, pl.StageError) and exc.artifacts:
            _log("completed artifacts: " + ", ".join(exc.artifacts))
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
