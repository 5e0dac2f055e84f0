"""Command line: simulate, estimate, verify."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import io as sio
from . import properties as props
from . import replicas as rep
from .estimators import AllReplicasFlagged, ScheduleInfeasible, estimate_lambdas, geometric_schedule, \
    shape_from_estimates
from .geometry import Direction, GeometryError, direction_grid
from .observables import front_records
from .shape import ShapeError
from .simulator import (
    ContainmentBreach, FullSpace, HalfSpaceStart, Original, ProcessSpec, expected_event_count, guard_box, run,
)

log = logging.getLogger("shapelab")

DEFAULTS = {
    "dim": 1,
    "mu": 1.0,
    "rate": 1.0,
    "horizon": None,
    "box": None,
    "seed": 0,
    "replicas": None,
    "mode": "full",
    "u": None,
    "r": None,
    "c5": 1.0,
    "c6": 4.0,
    "c_guard": 4.0,
    "eta": 0.25,
    "n0": 32,
    "kmax": 3,
    "directions": None,
    "front_points": 21,
    "t": None,
    "shrink": 0.5,
    "r1": 2.0,
    "r2": 8.0,
    "event_log": False,
    "only": None,
}
INT_FIELDS = {"dim", "box", "seed", "replicas", "n0", "kmax", "directions", "front_points"}
EVENT_LOG_LIMIT = 1_000_000


class ConfigError(ValueError):
    def __init__(self, field: str, msg: str):
        super().__init__(f"config field {field!r}: {msg}")
        self.field = field


def load_config(path: str | None) -> dict:
    """Flat JSON object of config fields; a run manifest is accepted too (its config is used)."""
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if "config" in doc and isinstance(doc["config"], dict):
        doc = doc["config"]
    unknown = set(doc) - set(DEFAULTS)
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")
    return doc


def resolve_config(args: argparse.Namespace, command: str) -> dict:
    cfg = dict(DEFAULTS)
    cfg.update(load_config(args.config))
    for k in DEFAULTS:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    for k in INT_FIELDS:
        if cfg[k] is not None:
            if float(cfg[k]) != int(cfg[k]):
                raise ConfigError(k, "must be an integer")
            cfg[k] = int(cfg[k])
    for k in ("mu", "rate", "c5", "c6", "c_guard", "eta", "shrink", "r1", "r2"):
        cfg[k] = float(cfg[k])
    if cfg["dim"] < 1:
        raise ConfigError("dim", "must be >= 1")
    if cfg["mu"] <= 0:
        raise ConfigError("mu", "must be positive")
    if cfg["rate"] <= 0:
        raise ConfigError("rate", "must be positive")
    if cfg["mode"] not in ("original", "full", "half"):
        raise ConfigError("mode", "must be original, full or half")
    if cfg["mode"] == "half":
        if cfg["u"] is None or cfg["r"] is None:
            raise ConfigError("u", "half mode needs both u and r")
        try:
            u = Direction.parse(cfg["u"]) if isinstance(cfg["u"], str) else Direction.of(cfg["u"])
        except (GeometryError, ValueError) as e:
            raise ConfigError("u", str(e)) from None
        if u.d != cfg["dim"]:
            raise ConfigError("u", "dimension does not match dim")
        cfg["u"] = list(u.components)
        if float(cfg["r"]) < 0:
            raise ConfigError("r", "must be >= 0")
        cfg["r"] = float(cfg["r"])
    elif cfg["u"] is not None:
        u = Direction.parse(cfg["u"]) if isinstance(cfg["u"], str) else Direction.of(cfg["u"])
        cfg["u"] = list(u.components)
    if cfg["horizon"] is None:
        if command == "estimate":
            try:
                cfg["horizon"] = float(geometric_schedule(cfg["eta"], cfg["n0"], cfg["kmax"]).last)
            except ScheduleInfeasible as e:
                raise ConfigError("eta", str(e)) from None
        else:
            cfg["horizon"] = 50.0
    cfg["horizon"] = float(cfg["horizon"])
    if cfg["horizon"] < 0:
        raise ConfigError("horizon", "must be >= 0")
    if cfg["box"] is None:
        cfg["box"] = guard_box(cfg["horizon"], cfg["c_guard"])
    if cfg["box"] < 0:
        raise ConfigError("box", "must be >= 0")
    if not 0 <= cfg["seed"] < 2 ** 64:
        raise ConfigError("seed", "must be a 64-bit unsigned integer")
    if cfg["only"] is not None:
        only = cfg["only"].split(",") if isinstance(cfg["only"], str) else list(cfg["only"])
        try:
            cfg["only"] = _property_list(",".join(only))
        except argparse.ArgumentTypeError as e:
            raise ConfigError("only", str(e)) from None
    if cfg["directions"] is None:
        cfg["directions"] = 64 if command == "estimate" else 8
    return cfg


def spec_from_config(cfg: dict, mode=None) -> ProcessSpec:
    if mode is None:
        if cfg["mode"] == "original":
            mode = Original()
        elif cfg["mode"] == "half":
            mode = HalfSpaceStart(Direction(tuple(cfg["u"])), cfg["r"])
        else:
            mode = FullSpace()
    return ProcessSpec(cfg["dim"], cfg["mu"], cfg["rate"], cfg["horizon"], cfg["box"], mode, cfg["seed"],
                       cfg["c_guard"])


def _outdir(args, command: str) -> Path:
    out = Path(args.out or f"shapelab-{command}")
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands --------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = resolve_config(args, "simulate")
    spec = spec_from_config(cfg)
    out = _outdir(args, "simulate")
    dirs = direction_grid(spec.d, cfg["directions"])
    T = spec.horizon
    times = [float(t) for t in np.linspace(0.0, T, max(cfg["front_points"], 2))] if T > 0 else [0.0]
    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ContainmentBreach)
        res = run(spec, snapshot_times=times)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    wall = time.perf_counter() - t0
    recs = front_records(res, times, dirs)
    tl = res.layers[0]
    summary = {
        "particles": len(res.population),
        "events": res.n_events,
        "expected_events": expected_event_count(spec),
        "designated": [list(x) for x in res.designated],
        "B_at_horizon": int(np.sum(tl.members & (tl.theta <= T))),
        "visited_sites": int(len(tl.visited_sites)),
        "containment_ok": res.containment_ok,
    }
    manifest = sio.new_manifest("simulate", cfg, spec=spec.to_dict(), spec_sha256=spec.digest(),
                                seeds=[str(spec.seed)], directions=[list(u.components) for u in dirs],
                                n_events=res.n_events, containment_ok=[res.containment_ok],
                                metrics={"wall_clock_s": wall})
    if cfg["event_log"]:
        if expected_event_count(spec) > EVENT_LOG_LIMIT:
            print("event log skipped: run too large for a recorded log", file=sys.stderr)
        else:
            from .reference import stream_events
            pop = res.population
            evs = stream_events(pop.origins.tolist(), [int(k) for k in pop.keys], spec.D, spec.horizon)
            manifest["event_log_events"] = sio.write_event_log(out / "events.bin", spec.d, spec.digest(), evs)
    h = sio.write_manifest(out / "manifest.json", manifest)
    sio.write_csv(out / "directions.csv", "directions", ["dir_index", "u_components"], sio.direction_rows(dirs), h)
    sio.write_csv(out / "front.csv", "front", ["t", "dir_index", "extent"], sio.front_rows(recs), h)
    summary["manifest_sha256"] = h
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out} (events={res.n_events}, containment_ok={res.containment_ok})")
    return 0


def cmd_estimate(args) -> int:
    cfg = resolve_config(args, "estimate")
    replicas = cfg["replicas"] or 16
    if replicas < 8:
        raise ConfigError("replicas", "estimation needs at least 8 replicas")
    try:
        sched = geometric_schedule(cfg["eta"], cfg["n0"], cfg["kmax"])
    except ScheduleInfeasible as e:
        raise ConfigError("eta", str(e)) from None
    if cfg["horizon"] < sched.last:
        raise ConfigError("horizon", f"must be >= last schedule time {sched.last}")
    spec = spec_from_config(cfg, FullSpace())
    dirs = direction_grid(spec.d, cfg["directions"])
    out = _outdir(args, "estimate")
    t0 = time.perf_counter()
    try:
        est = estimate_lambdas(dirs, spec, sched, replicas, workers=args.workers)
    except AllReplicasFlagged as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    wall = time.perf_counter() - t0
    seeds = [str(rep.replica_seed(spec.seed, i, "lambda")) for i in range(replicas)]
    manifest = sio.new_manifest("estimate", cfg, spec=spec.to_dict(), spec_sha256=spec.digest(), seeds=seeds,
                                schedule=list(sched.times), directions=[list(u.components) for u in dirs],
                                flagged_replicas=est[0].flagged_replicas, metrics={"wall_clock_s": wall})
    h = sio.manifest_hash(manifest)
    rows = [(i, " ".join(sio.fmt_float(c) for c in e.u.components), e.point, e.stderr, e.n_last, e.replicas_used)
            for i, e in enumerate(est)]
    try:
        shape = shape_from_estimates(est)
    except ShapeError as e:
        shape = None
        print(f"warning: no shape built: {e}", file=sys.stderr)
    if shape is not None:
        shape.meta.update({"manifest_sha256": h, "seeds": seeds})
        (out / "shape.json").write_text(shape.dumps() + "\n", encoding="utf-8")
        if spec.d == 2:
            cloud_run = _quiet(run, spec.replace(horizon=float(sched.last)))
            cloud = cloud_run.layers[0].b_tilde(sched.last) / float(sched.last)
            if len(cloud) > 4000:
                cloud = cloud[np.linspace(0, len(cloud) - 1, 4000).astype(int)]
            (out / "shape.svg").write_text(sio.shape_svg(shape.vertices, cloud, mhash=h), encoding="utf-8")
    sio.write_manifest(out / "manifest.json", manifest)
    sio.write_csv(out / "lambda.csv", "lambda", ["dir_index", "u_components", "lambda", "stderr", "n_last",
                                                 "replicas_used"], rows, h)
    if spec.d == 1 and len(est) == 2:
        print(f"|lambda(+1) - lambda(-1)| = {abs(est[0].point - est[1].point):.6g}")
    print(f"wrote {out} ({len(est)} directions, {est[0].replicas_used} replicas used)")
    return 0


def _quiet(fn, *a, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fn(*a, **kw)


def _property_list(text: str) -> list[str]:
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [n for n in names if n not in props.PROPERTIES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown property {bad[0]!r} (choose from {', '.join(props.PROPERTIES)})")
    return names


def cmd_verify(args) -> int:
    cfg = resolve_config(args, "verify")
    spec = spec_from_config(cfg, FullSpace())
    names = cfg["only"] or list(props.PROPERTIES)
    opt = props.SuiteOptions(replicas=cfg["replicas"], t=cfg["t"],
                             u=None if cfg["u"] is None else Direction(tuple(cfg["u"])),
                             r1=cfg["r1"], r2=cfg["r2"], shrink=cfg["shrink"], c5=cfg["c5"], c6=cfg["c6"],
                             eta=cfg["eta"], n0=cfg["n0"], kmax=cfg["kmax"], workers=args.workers)
    reports = props.run_suite(names, spec, opt)
    text = props.suite_text(reports)
    print(text, end="")
    if args.out:
        out = _outdir(args, "verify")
        manifest = sio.new_manifest("verify", cfg, spec=spec.to_dict(), properties=names,
                                    verdicts={r.property_id: r.verdict for r in reports})
        h = sio.write_manifest(out / "manifest.json", manifest)
        (out / "report.txt").write_text(f"# manifest_sha256={h}\n" + text, encoding="utf-8")
        (out / "report.csv").write_text(f"# manifest_sha256={h}\n" + props.suite_csv(reports), encoding="utf-8")
    return 0 if all(r.passed for r in reports) else 1


# --- parser ----------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config or a previous run manifest")
    p.add_argument("--dim", type=int)
    p.add_argument("--mu", type=float, help="Poisson mean of the initial field")
    p.add_argument("--rate", type=float, help="jump rate D")
    p.add_argument("--horizon", type=float)
    p.add_argument("--box", type=int, help="initial box radius L (default: guard rule)")
    p.add_argument("--seed", type=int)
    p.add_argument("--replicas", type=int)
    p.add_argument("--mode", choices=["original", "full", "half"])
    p.add_argument("--u", help="direction, e.g. 1,0")
    p.add_argument("--r", type=float, help="half-space offset")
    p.add_argument("--c5", type=float)
    p.add_argument("--c6", type=float)
    p.add_argument("--c-guard", dest="c_guard", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--n0", type=int)
    p.add_argument("--kmax", type=int)
    p.add_argument("--directions", type=int, help="size of the direction grid (d=2)")
    p.add_argument("--out")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shapelab", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", help="one run: manifest, front records, summary")
    _add_common(p)
    p.add_argument("--front-points", dest="front_points", type=int)
    p.add_argument("--event-log", dest="event_log", action="store_true", default=None,
                   help="also write events.bin")
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("estimate", help="directional speeds and shape estimate")
    _add_common(p)
    p.set_defaults(func=cmd_estimate)
    p = sub.add_parser("verify", help="run property checks")
    _add_common(p)
    p.add_argument("--only", type=_property_list, help="comma separated: " + ",".join(props.PROPERTIES))
    p.add_argument("--t", type=float)
    p.add_argument("--shrink", type=float)
    p.add_argument("--r1", type=float)
    p.add_argument("--r2", type=float)
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.workers is None and os.environ.get(rep.WORKERS_ENV):
        args.workers = int(os.environ[rep.WORKERS_ENV])
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"shapelab: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
