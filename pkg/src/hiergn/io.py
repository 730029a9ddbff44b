"""File formats: trajectories, datasets, graph dumps, checkpoints, metrics.

Binary files share one envelope::

    magic (4 bytes) | version (u32) | header length (u32) | JSON header
    | payload (little-endian float64) | CRC32 of everything before it (u32)

Loaders reject unknown magic or versions, truncated payloads and checksum
mismatches with `FormatError`.
"""
from __future__ import annotations

import csv
import json
import struct
import zlib
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .errors import FormatError
from .models import GraphSpec, NBodyGN
from .sim import SimConfig, Trajectory

TRAJ_MAGIC = b"HGNT"
CKPT_MAGIC = b"HGNC"
TRAJ_VERSION = 1
CKPT_VERSION = 1
TRAJ_SUFFIX = ".traj"
SPLITS = ("train", "valid", "test")

_LE_F64 = np.dtype("<f8")


class VersionError(FormatError):
    """File written by an unsupported format version."""


def _pack(magic: bytes, version: int, header: dict, payload: bytes) -> bytes:
    head = json.dumps(header, sort_keys=True).encode()
    body = magic + struct.pack("<II", version, len(head)) + head + payload
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _unpack(data: bytes, magic: bytes, version: int, what: str) -> tuple[dict, bytes]:
    if len(data) < 16:
        raise FormatError(f"{what} file is truncated")
    if data[:4] != magic:
        raise FormatError(f"not a {what} file (bad magic {data[:4]!r})")
    found, head_len = struct.unpack("<II", data[4:12])
    if found != version:
        raise VersionError(f"{what} format version {found} is not supported (expected {version})")
    if len(data) < 12 + head_len + 4:
        raise FormatError(f"{what} file is truncated")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise FormatError(f"{what} checksum mismatch (corrupted or truncated)")
    try:
        header = json.loads(data[12 : 12 + head_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{what} header is not valid JSON") from exc
    return header, data[12 + head_len : -4]


# --------------------------------------------------------------------------
# trajectories


def trajectory_records(traj: Trajectory) -> np.ndarray:
    """(T+1, N, C) array of per-particle rows [m, x, y, vx, vy(, c)]."""
    T = len(traj)
    cols = [
        np.broadcast_to(traj.masses[None, :, None], (T, traj.n_particles, 1)),
        traj.positions,
        traj.velocities,
    ]
    if traj.charges is not None:
        cols.append(np.broadcast_to(traj.charges[None, :, None], (T, traj.n_particles, 1)))
    return np.concatenate(cols, axis=2)


def trajectory_to_bytes(traj: Trajectory) -> bytes:
    rec = trajectory_records(traj)
    header = {
        "force_law": traj.config.force_law,
        "n_particles": traj.n_particles,
        "n_snapshots": len(traj),
        "box": traj.box,
        "constants": traj.config.to_dict(),
        "seed": traj.seed,
        "n_base_steps": traj.config.n_base_steps,
        "status": traj.status,
        "columns": ["m", "x", "y", "vx", "vy"] + (["c"] if traj.charges is not None else []),
        "meta": traj.meta,
    }
    return _pack(TRAJ_MAGIC, TRAJ_VERSION, header, rec.astype(_LE_F64).tobytes())


def trajectory_from_bytes(data: bytes) -> Trajectory:
    header, payload = _unpack(data, TRAJ_MAGIC, TRAJ_VERSION, "trajectory")
    try:
        T, N, ncol = header["n_snapshots"], header["n_particles"], len(header["columns"])
        cfg = SimConfig(**header["constants"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"trajectory header is incomplete: {exc}") from exc
    if len(payload) != T * N * ncol * 8:
        raise FormatError("trajectory payload length does not match its header")
    rec = np.frombuffer(payload, dtype=_LE_F64).astype(np.float64).reshape(T, N, ncol)
    charges = rec[0, :, 5].copy() if ncol == 6 else None
    return Trajectory(
        config=cfg,
        masses=rec[0, :, 0].copy(),
        positions=rec[:, :, 1:3].copy(),
        velocities=rec[:, :, 3:5].copy(),
        box=float(header["box"]),
        charges=charges,
        seed=header.get("seed"),
        status=header.get("status", "ok"),
        meta=header.get("meta", {}),
    )


def save_trajectory(traj: Trajectory, path) -> Path:
    path = Path(path)
    path.write_bytes(trajectory_to_bytes(traj))
    return path


def load_trajectory(path) -> Trajectory:
    return trajectory_from_bytes(Path(path).read_bytes())


def export_trajectory_csv(traj: Trajectory, path) -> Path:
    """One row per (step, particle) for inspection."""
    rec = trajectory_records(traj)
    cols = ["step", "particle", "m", "x", "y", "vx", "vy"] + (["c"] if traj.charges is not None else [])
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for t in range(rec.shape[0]):
            for i in range(rec.shape[1]):
                w.writerow([t, i, *(repr(float(x)) for x in rec[t, i])])
    return path


def save_dataset(root, splits: dict[str, Sequence[Trajectory]]) -> Path:
    """Write train/valid/test subdirectories, one file per trajectory."""
    root = Path(root)
    for name, trajs in splits.items():
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for i, t in enumerate(trajs):
            save_trajectory(t, d / f"traj_{i:05d}{TRAJ_SUFFIX}")
    return root


def load_split(directory) -> list[Trajectory]:
    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"dataset directory {d} does not exist")
    files = sorted(d.glob(f"*{TRAJ_SUFFIX}"))
    if not files:
        raise FormatError(f"no trajectory files in {d}")
    return [load_trajectory(f) for f in files]


def load_dataset(root, splits: Iterable[str] = SPLITS) -> dict[str, list[Trajectory]]:
    root = Path(root)
    return {s: load_split(root / s) for s in splits if (root / s).is_dir()}


# --------------------------------------------------------------------------
# checkpoints


def _tensor_groups(model: NBodyGN) -> list[tuple[str, torch.Tensor]]:
    return list(model.state_dict().items())


def checkpoint_to_bytes(model: NBodyGN, spec: GraphSpec, extra: Optional[dict] = None) -> bytes:
    """Named float64 tensors with a manifest, variant tag and graph spec."""
    manifest, chunks, offset = [], [], 0
    for name, t in _tensor_groups(model):
        arr = t.detach().cpu().numpy().astype(_LE_F64)
        manifest.append({"name": name, "group": name.split(".")[0], "shape": list(arr.shape), "offset": offset})
        chunks.append(np.ascontiguousarray(arr).tobytes())
        offset += arr.size
    header = {
        "variant": model.describe(),
        "graph": str(spec),
        "depth_policy": "choose_depth" if spec.kind == "hier" and spec.depth is None else spec.depth,
        "tensors": manifest,
        "extra": extra or {},
    }
    return _pack(CKPT_MAGIC, CKPT_VERSION, header, b"".join(chunks))


def checkpoint_from_bytes(data: bytes) -> tuple[NBodyGN, GraphSpec, dict]:
    header, payload = _unpack(data, CKPT_MAGIC, CKPT_VERSION, "checkpoint")
    try:
        v = header["variant"]
        model = NBodyGN(v["kind"], hierarchical=v["hierarchical"], charged=v["charged"], activation=v["activation"])
        spec = GraphSpec.parse(header["graph"])
        manifest = header["tensors"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"checkpoint header is incomplete: {exc}") from exc
    flat = np.frombuffer(payload, dtype=_LE_F64)
    state = {}
    expected = model.state_dict()
    for entry in manifest:
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
        size = int(np.prod(shape, dtype=np.int64))
        if off + size > flat.size:
            raise FormatError("checkpoint payload is shorter than its manifest")
        if name not in expected or tuple(expected[name].shape) != shape:
            raise FormatError(f"checkpoint tensor {name} does not fit the declared variant")
        state[name] = torch.from_numpy(flat[off : off + size].astype(np.float64).reshape(shape))
    missing = set(expected) - set(state)
    if missing:
        raise FormatError(f"checkpoint lacks tensors: {sorted(missing)}")
    model.load_state_dict(state)
    return model, spec, header.get("extra", {})


def save_checkpoint(model: NBodyGN, spec: GraphSpec, path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_to_bytes(model, spec, extra))
    return path


def load_checkpoint(path) -> tuple[NBodyGN, GraphSpec, dict]:
    return checkpoint_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# graphs and tables


GRAPH_FORMAT_VERSION = 1


def save_graph_json(graph_dict: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps({"format_version": GRAPH_FORMAT_VERSION, **graph_dict}, indent=1))
    return path


def load_graph_json(path) -> dict:
    data = json.loads(Path(path).read_text())
    if data.get("format_version") != GRAPH_FORMAT_VERSION:
        raise VersionError(f"graph dump version {data.get('format_version')} is not supported")
    return data


def write_csv(rows: Sequence[dict], path) -> Path:
    """Rows of dicts to CSV; the header is the union of keys in first-seen order."""
    cols: list[str] = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    return path


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float))
    return path


def summarize_runs(rows: Sequence[dict], keys: Sequence[str]) -> dict:
    """Mean and standard deviation across runs (e.g. seeds) per metric."""
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in rows if k in r], dtype=float)
        if vals.size:
            out[f"{k}_mean"] = float(np.mean(vals))
            out[f"{k}_std"] = float(np.std(vals))
    return out


def write_metrics(report, path_stem, summary: Optional[dict] = None) -> tuple[Path, Path]:
    """Per-trajectory CSV plus a JSON file with the summary row."""
    stem = Path(path_stem)
    rows = [dict(r) for r in report.per_trajectory]
    summary_row = {"trajectory": "summary", **report.summary_row(), **(summary or {})}
    csv_path = write_csv(rows + [summary_row], stem.with_suffix(".csv"))
    json_path = write_json({"per_trajectory": rows, "summary": summary_row}, stem.with_suffix(".json"))
    return csv_path, json_path


def write_loss_curve(curve: Sequence[tuple[int, float, float]], path) -> Path:
    return write_csv([{"step": s, "loss": l, "lr": lr} for s, l, lr in curve], path)
