"""On-disk formats: line-delimited datasets, checkpoint bundles and result CSVs.

Dataset files hold one JSON header line then one JSON record per line; every
float is written with 17 significant digits so a load reproduces the exact
bits. Checkpoint bundles are stored (uncompressed) zip archives with fixed
timestamps and a ``manifest.json`` listing a sha256 per entry, so identical
contents give identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
import zipfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import diffusion as dm
from . import flow as fl
from . import neural as nn
from .maze import Demonstration, MazeSpec
from .planner import EvalReport, IncompatibleComponentsError, LatentNorm, Planner, PlannerConfig
from .world_model import LatentRecord, WmLossWeights, WorldModelConfig, WorldModelParams

DATASET_VERSION = 1
BUNDLE_VERSION = 1
DEMO_FORMAT = "hdflow-demos"
LATENT_FORMAT = "hdflow-latents"
EVAL_COLUMNS = ("task", "randomization", "seed", "episode", "success", "steps", "hl_ms", "ll_ms", "hl_nfe", "ll_nfe")
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class DataFormatError(ValueError):
    pass


# --- text encoding ------------------------------------------------------------


def _dump(obj) -> str:
    """Compact JSON with floats as 17-significant-digit decimals."""
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not np.isfinite(x):
            raise DataFormatError(f"non-finite number {x!r}")
        s = format(x, ".17g")
        return s if any(ch in s for ch in ".en") else s + ".0"
    if obj is None or isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _dump(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_dump(v) for v in obj) + "]"
    if isinstance(obj, dict):
        return "{" + ",".join(json.dumps(str(k)) + ":" + _dump(v) for k, v in obj.items()) + "}"
    raise TypeError(f"cannot encode {type(obj).__name__}")


def write_atomic(path, data: bytes) -> None:
    """Write via a temporary sibling and rename, so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_lines(path, fmt: str):
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except ValueError as exc:
        raise DataFormatError(f"{path}: line 1: bad header: {exc}") from exc
    if header.get("format") != fmt:
        raise DataFormatError(f"{path}: expected format {fmt!r}, found {header.get('format')!r}")
    if header.get("version") != DATASET_VERSION:
        raise DataFormatError(f"{path}: unsupported version {header.get('version')!r}")
    recs = []
    for n, ln in enumerate(lines[1:], start=2):
        try:
            recs.append((n, json.loads(ln)))
        except ValueError as exc:
            raise DataFormatError(f"{path}: line {n}: {exc}") from exc
    return header, recs


def _arr(rec, key, n, shape_tail=None):
    try:
        a = np.asarray(rec[key], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"line {n}: bad field {key!r}: {exc}") from exc
    if shape_tail is not None and (a.ndim != 1 + len(shape_tail) or a.shape[1:] != shape_tail):
        if not (a.size == 0 and shape_tail):
            raise DataFormatError(f"line {n}: field {key!r} has shape {a.shape}")
        a = a.reshape(0, *shape_tail)
    return a


# --- demonstration datasets ---------------------------------------------------


def demos_to_text(demos: list[Demonstration], maze: MazeSpec) -> str:
    out = [_dump({"format": DEMO_FORMAT, "version": DATASET_VERSION, "maze": maze.to_dict()})]
    for d in demos:
        out.append(_dump({
            "maze_id": d.maze_id, "seed": int(d.seed), "success": bool(d.success), "T": int(d.actions.shape[0]),
            "observations": d.observations, "actions": d.actions, "goal": np.asarray(d.goal), "meta": d.meta,
        }))
    return "\n".join(out) + "\n"


def save_demos(demos: list[Demonstration], maze: MazeSpec, path) -> None:
    write_atomic(path, demos_to_text(demos, maze).encode())


def load_demos(path) -> tuple[list[Demonstration], MazeSpec]:
    header, recs = _read_lines(path, DEMO_FORMAT)
    maze = MazeSpec.from_dict(header["maze"])
    demos = []
    for n, r in recs:
        obs, acts = _arr(r, "observations", n, (2,)), _arr(r, "actions", n, (2,))
        if len(acts) != r.get("T") or len(obs) != len(acts) + 1:
            raise DataFormatError(f"{path}: line {n}: length mismatch (T={r.get('T')})")
        demos.append(Demonstration(obs, acts, bool(r["success"]), _arr(r, "goal", n), int(r["seed"]),
                                   str(r["maze_id"]), dict(r.get("meta", {}))))
    return demos, maze


# --- latent datasets ----------------------------------------------------------


def save_latents(records: list[LatentRecord], wm_checksum: str, path) -> None:
    d_z = records[0].z.shape[1] if records else 0
    d_h = records[0].h.shape[1] if records else 0
    out = [_dump({"format": LATENT_FORMAT, "version": DATASET_VERSION, "d_z": d_z, "d_h": d_h,
                  "wm_checksum": wm_checksum})]
    for r in records:
        out.append(_dump({
            "maze_id": r.maze_id, "seed": int(r.seed), "success": bool(r.success), "T": r.T,
            "z": r.z, "h": r.h, "actions": r.actions, "goal": r.goal, "z_goal": r.z_goal,
        }))
    write_atomic(path, ("\n".join(out) + "\n").encode())


def load_latents(path, expected_checksum: str | None = None) -> tuple[list[LatentRecord], str]:
    header, recs = _read_lines(path, LATENT_FORMAT)
    checksum = str(header.get("wm_checksum", ""))
    if expected_checksum is not None and checksum != expected_checksum:
        raise IncompatibleComponentsError(
            f"{path}: latents come from world model {checksum[:12]}, expected {expected_checksum[:12]}")
    d_z, d_h = int(header["d_z"]), int(header["d_h"])
    out = []
    for n, r in recs:
        z, h, a = _arr(r, "z", n, (d_z,)), _arr(r, "h", n, (d_h,)), _arr(r, "actions", n, (2,))
        if len(a) != r.get("T") or len(z) != len(a) + 1 or len(h) != len(z):
            raise DataFormatError(f"{path}: line {n}: length mismatch (T={r.get('T')})")
        out.append(LatentRecord(z, h, a, bool(r["success"]), _arr(r, "goal", n), _arr(r, "z_goal", n),
                                int(r["seed"]), str(r["maze_id"])))
    return out, checksum


# --- bundles --------------------------------------------------------------------


def bundle_bytes(kind: str, meta: dict, entries: dict[str, bytes]) -> bytes:
    manifest = {
        "kind": kind, "version": BUNDLE_VERSION, "meta": meta,
        "entries": {k: hashlib.sha256(v).hexdigest() for k, v in sorted(entries.items())},
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, data in [("manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode()),
                           *sorted(entries.items())]:
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)
    return buf.getvalue()


def write_bundle(path, kind: str, meta: dict, entries: dict[str, bytes]) -> None:
    write_atomic(path, bundle_bytes(kind, meta, entries))


def read_bundle(path, kind: str) -> tuple[dict, dict[str, bytes]]:
    try:
        with zipfile.ZipFile(Path(path)) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            entries = {n: zf.read(n) for n in zf.namelist() if n != "manifest.json"}
    except zipfile.BadZipFile as exc:
        if "CRC" in str(exc):  # entry bytes changed after writing
            raise nn.CheckpointChecksumError(f"{path}: {exc}") from exc
        raise nn.CheckpointCorruptError(f"{path}: unreadable bundle: {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise nn.CheckpointCorruptError(f"{path}: unreadable bundle: {exc}") from exc
    if manifest.get("version") != BUNDLE_VERSION:
        raise nn.CheckpointVersionError(f"{path}: unsupported bundle version {manifest.get('version')!r}")
    if manifest.get("kind") != kind:
        raise nn.CheckpointCorruptError(f"{path}: expected a {kind} bundle, found {manifest.get('kind')!r}")
    listed = manifest.get("entries", {})
    if set(listed) != set(entries):
        raise nn.CheckpointCorruptError(f"{path}: entry list does not match manifest")
    for name, digest in listed.items():
        if hashlib.sha256(entries[name]).hexdigest() != digest:
            raise nn.CheckpointChecksumError(f"{path}: checksum mismatch in entry {name}")
    return manifest["meta"], entries


def _f8(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _from_f8(raw: bytes, shape) -> np.ndarray:
    a = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if a.size != int(np.prod(shape)):
        raise nn.CheckpointCorruptError(f"array entry has {a.size} values, expected shape {tuple(shape)}")
    return a.reshape(shape)


# --- world-model checkpoints -----------------------------------------------------


def wm_config_from_dict(d: dict) -> WorldModelConfig:
    return WorldModelConfig(**{**d, "weights": WmLossWeights(**d["weights"])})


def save_world_model(wm: WorldModelParams, cfg: WorldModelConfig, path) -> None:
    meta = {"config": asdict(cfg), "obs_center": np.asarray(wm.obs_center).tolist(),
            "obs_scale": float(wm.obs_scale), "checksum": wm.checksum()}
    write_bundle(path, "world_model", meta, {f"{k}.param": nn.params_to_bytes(p) for k, p in wm.nets().items()})


def load_world_model(path) -> tuple[WorldModelParams, WorldModelConfig]:
    meta, entries = read_bundle(path, "world_model")
    try:
        nets = {k[: -len(".param")]: nn.params_from_bytes(v) for k, v in entries.items()}
        wm = WorldModelParams(**nets, obs_center=np.asarray(meta["obs_center"], dtype=np.float64),
                              obs_scale=float(meta["obs_scale"]))
    except TypeError as exc:
        raise nn.CheckpointCorruptError(f"{path}: incomplete world model: {exc}") from exc
    if wm.checksum() != meta["checksum"]:
        raise nn.CheckpointChecksumError(f"{path}: world-model checksum mismatch")
    return wm, wm_config_from_dict(meta["config"])


# --- planner checkpoints -----------------------------------------------------------


def _net_meta(net: nn.ConditionalMlp) -> dict:
    return {"x_dim": net.x_dim, "c_dim": net.c_dim, "emb_dim": net.emb.dim, "max_period": net.emb.max_period}


def _net_from(meta: dict, raw: bytes) -> nn.ConditionalMlp:
    emb = nn.TimeEmbedding(meta["emb_dim"], meta["max_period"])
    return nn.ConditionalMlp(nn.params_from_bytes(raw), meta["x_dim"], meta["c_dim"], emb)


def planner_configs_from_dict(meta: dict):
    pcfg = PlannerConfig(**meta["planner"])
    g = dict(meta["guidance"])
    if g.get("projection_window") is not None:
        g["projection_window"] = tuple(g["projection_window"])
    return pcfg, dm.GuidanceConfig(**g), fl.FlowConfig(**meta["flow"])


def save_planner(p: Planner, path) -> None:
    meta = {
        "variant": p.variant, "d_z": p.d_z, "wm_checksum": p.wm_checksum,
        "planner": asdict(p.pcfg), "guidance": asdict(p.gcfg), "flow": asdict(p.fcfg),
        "schedule_steps": p.sched.L, "hl": _net_meta(p.hl),
    }
    entries = {"hl.param": nn.params_to_bytes(p.hl.params), "beta.f8": _f8(p.sched.beta),
               "norm.f8": _f8(np.stack([p.norm.mean, p.norm.std]))}
    if p.ll is not None:
        meta["ll"] = _net_meta(p.ll)
        entries["ll.param"] = nn.params_to_bytes(p.ll.params)
    if p.ebm is not None:
        entries["ebm.param"] = nn.params_to_bytes(p.ebm.params)
    if p.index is not None:
        meta["index_shape"] = list(p.index.sequences.shape)
        entries["index.f8"] = _f8(p.index.sequences)
    write_bundle(path, "planner", meta, entries)


def load_planner(path, expected_checksum: str | None = None) -> Planner:
    meta, e = read_bundle(path, "planner")
    if expected_checksum is not None and meta["wm_checksum"] != expected_checksum:
        raise IncompatibleComponentsError(
            f"{path}: planner built on world model {meta['wm_checksum'][:12]}, expected {expected_checksum[:12]}")
    pcfg, gcfg, fcfg = planner_configs_from_dict(meta)
    d_z = int(meta["d_z"])
    norm = _from_f8(e["norm.f8"], (2, d_z))
    return Planner(
        meta["variant"], pcfg, gcfg, fcfg, dm.NoiseSchedule(_from_f8(e["beta.f8"], (meta["schedule_steps"],))),
        LatentNorm(norm[0], norm[1]), d_z, _net_from(meta["hl"], e["hl.param"]),
        _net_from(meta["ll"], e["ll.param"]) if "ll.param" in e else None,
        dm.EnergyModel(nn.params_from_bytes(e["ebm.param"])) if "ebm.param" in e else None,
        dm.ManifoldIndex(_from_f8(e["index.f8"], meta["index_shape"])) if "index.f8" in e else None,
        meta["wm_checksum"],
    )


# --- CSVs -----------------------------------------------------------------------------


def eval_rows(report: EvalReport, task: str, randomization: str, seed: int) -> list[dict]:
    return [{
        "task": task, "randomization": randomization, "seed": seed, "episode": r.episode,
        "success": int(r.success), "steps": r.steps, "hl_ms": f"{r.hl_ms:.3f}", "ll_ms": f"{r.ll_ms:.3f}",
        "hl_nfe": r.hl_nfe, "ll_nfe": r.ll_nfe,
    } for r in report.rows]


def write_csv(path, rows: list[dict], columns=None) -> None:
    if columns is None:
        columns = []
        for row in rows:
            columns.extend(k for k in row if k not in columns)
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    wr.writeheader()
    for row in rows:
        wr.writerow({k: (format(v, ".17g") if isinstance(v, float) else v) for k, v in row.items()})
    write_atomic(path, buf.getvalue().encode())


def read_csv(path, required=()) -> list[dict]:
    """Rows of a CSV; an empty file, a missing column or a ragged row raises naming the row."""
    with open(Path(path), newline="") as f:
        rd = csv.DictReader(f)
        if rd.fieldnames is None:
            raise DataFormatError(f"{path}: empty CSV")
        missing = [c for c in required if c not in rd.fieldnames]
        if missing:
            raise DataFormatError(f"{path}: missing columns {missing}")
        rows = []
        for n, rec in enumerate(rd, start=2):
            if None in rec or any(v is None for v in rec.values()):
                raise DataFormatError(f"{path}: malformed row {n}")
            rows.append(rec)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return rows
