"""Manifests, CSV tables, binary event logs and SVG figures."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__, streams
from .reference import JumpEvent

CSV_SCHEMA_VERSION = 1
LOG_MAGIC = b"SHLGEVT1"
# manifest keys that do not influence any output number
VOLATILE_KEYS = ("metrics",)


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return fmt_float(v)
    return str(v)


# --- manifest --------------------------------------------------------------

def manifest_hash(manifest: dict) -> str:
    """sha256 over the manifest minus its wall-clock metrics."""
    stable = {k: v for k, v in manifest.items() if k not in VOLATILE_KEYS}
    blob = json.dumps(stable, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def new_manifest(command: str, config: dict, **extra) -> dict:
    m = {
        "command": command,
        "config": config,
        "stream_algorithm": streams.STREAM_ALGORITHM,
        "stream_version": streams.STREAM_VERSION,
        "artifact_version": __version__,
    }
    m.update(extra)
    return m


def write_manifest(path: Path, manifest: dict) -> str:
    h = manifest_hash(manifest)
    doc = dict(manifest, manifest_sha256=h)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return h


def read_manifest(path: Path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    doc.pop("manifest_sha256", None)
    return doc


# --- CSV -------------------------------------------------------------------

def csv_text(kind: str, header: Sequence[str], rows: Iterable[Sequence], mhash: str) -> str:
    buf = io.StringIO()
    buf.write(f"# schema=shapelab-{kind}/{CSV_SCHEMA_VERSION}\n")
    buf.write(f"# manifest_sha256={mhash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def write_csv(path: Path, kind: str, header: Sequence[str], rows: Iterable[Sequence], mhash: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(csv_text(kind, header, rows, mhash))


def read_csv(path: Path) -> tuple[dict, list[str], list[list[str]]]:
    """Returns (comment metadata, header, rows)."""
    meta: dict = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            meta[k] = v
        else:
            body.append(line)
    rows = list(csv.reader(body))
    return meta, rows[0], rows[1:]


def front_rows(records) -> list[tuple]:
    rows = []
    for rec in records:
        for i in sorted(rec.extents):
            rows.append((rec.t, i, rec.extents[i]))
        for i in sorted(rec.undefined):
            rows.append((rec.t, i, "nan"))
    return rows


def direction_rows(directions) -> list[tuple]:
    return [(i, " ".join(fmt_float(c) for c in u.components)) for i, u in enumerate(directions)]


# --- binary event log ------------------------------------------------------

def _record(d: int) -> struct.Struct:
    return struct.Struct(f"<dQ{d}i{d}i")


def write_event_log(path: Path, d: int, spec_hash: str, events: Iterable[JumpEvent]) -> int:
    """Header (magic, d, spec hash, stream id) then one fixed-size record per event."""
    rec = _record(d)
    alg = f"{streams.STREAM_ALGORITHM}/{streams.STREAM_VERSION}".encode()
    n = 0
    with open(path, "wb") as f:
        f.write(LOG_MAGIC)
        f.write(struct.pack("<I", d))
        f.write(bytes.fromhex(spec_hash))
        f.write(struct.pack("<H", len(alg)))
        f.write(alg)
        for ev in events:
            f.write(rec.pack(ev.time, ev.who, *ev.src, *ev.dst))
            n += 1
    return n


def read_event_log(path: Path) -> tuple[dict, list[JumpEvent]]:
    data = Path(path).read_bytes()
    if data[:8] != LOG_MAGIC:
        raise ValueError("not an event log")
    (d,) = struct.unpack_from("<I", data, 8)
    spec_hash = data[12:44].hex()
    (na,) = struct.unpack_from("<H", data, 44)
    alg = data[46:46 + na].decode()
    off = 46 + na
    rec = _record(d)
    events = []
    for vals in rec.iter_unpack(data[off:]):
        events.append(JumpEvent(vals[0], int(vals[1]), tuple(vals[2:2 + d]), tuple(vals[2 + d:])))
    return {"d": d, "spec_hash": spec_hash, "stream": alg}, events


# --- SVG -------------------------------------------------------------------

def shape_svg(vertices: np.ndarray, cloud: np.ndarray | None = None, size: int = 480, mhash: str = "") -> str:
    """Polygon (shape estimate) with an optional scaled point cloud, centred at the origin."""
    V = np.asarray(vertices, dtype=float)
    ext = float(np.abs(V).max()) if len(V) else 1.0
    if cloud is not None and len(cloud):
        ext = max(ext, float(np.abs(cloud).max()))
    ext *= 1.1
    s = size / (2 * ext)

    def xy(p):
        return f"{fmt_float(size / 2 + s * p[0])},{fmt_float(size / 2 - s * p[1])}"

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
           f"<!-- manifest_sha256={mhash} -->",
           f'<rect width="{size}" height="{size}" fill="white"/>']
    if cloud is not None:
        r = max(s * 0.5 / max(ext, 1.0), 0.6)
        for p in np.asarray(cloud, dtype=float):
            c = xy(p).split(",")
            out.append(f'<circle cx="{c[0]}" cy="{c[1]}" r="{fmt_float(r)}" fill="#9ab"/>')
    pts = " ".join(xy(p) for p in V)
    out.append(f'<polygon points="{pts}" fill="none" stroke="#c22" stroke-width="1.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
