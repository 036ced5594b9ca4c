"""On-disk formats: checkpoints, trigger bundles, reports and loss traces."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attack import AttackConfig, TriggerBundle
from .autodiff import ParamStore
from .model import ModelConfig
from .verify import REPORT_COLUMNS, REPORT_VERSION, ReportRow

log = logging.getLogger(__name__)

MAGIC = b"VLMTRACE-CKPT\n"
FORMAT_VERSION = (1, 0)
_DTYPES = {"float64": "<f8", "float32": "<f4"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ParamStore
    model_config: ModelConfig
    meta: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


def _version_str(v) -> str:
    return f"{v[0]}.{v[1]}"


def save_checkpoint(params: ParamStore, path, model_config: ModelConfig, meta: dict | None = None,
                    dtype: str = "float64", version=FORMAT_VERSION) -> str:
    """Write ``params`` and return the hex digest stored in the file trailer."""
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported checkpoint dtype {dtype!r}")
    entries, chunks = [], []
    for name, value in params.items():
        arr = np.ascontiguousarray(value, dtype=_DTYPES[dtype])
        entries.append({"name": name, "group": params.groups[name], "shape": list(arr.shape)})
        chunks.append(arr.tobytes(order="C"))
    header = {
        "format_version": _version_str(version),
        "dtype": dtype,
        "model_config": model_config.to_dict(),
        "entries": entries,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)
    digest = hashlib.sha256(body).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + digest)
    return digest.hex()


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < len(MAGIC) + 8 + 32:
        raise CheckpointError(f"{path}: truncated checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: integrity checksum mismatch")
    (hlen,) = struct.unpack("<Q", body[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(body[start:start + hlen])
    found = tuple(int(x) for x in header["format_version"].split("."))
    warnings = []
    if found[0] != FORMAT_VERSION[0]:
        raise CheckpointError(f"{path}: checkpoint format {_version_str(found)} is incompatible "
                              f"with reader format {_version_str(FORMAT_VERSION)}")
    if found[1] > FORMAT_VERSION[1]:
        msg = (f"checkpoint format {_version_str(found)} is newer than reader "
               f"{_version_str(FORMAT_VERSION)}; loaded fields known to this reader")
        log.warning("%s: %s", path, msg)
        warnings.append(msg)
    dt = np.dtype(_DTYPES[header["dtype"]])
    offset = start + hlen
    params = ParamStore()
    for e in header["entries"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype=dt, count=n, offset=offset).reshape(e["shape"])
        params.add(e["name"], arr.astype(np.float64), e["group"])
        offset += n * dt.itemsize
    if offset != len(body):
        raise CheckpointError(f"{path}: payload length does not match header")
    return Checkpoint(params, ModelConfig(**header["model_config"]), header.get("meta", {}), warnings)


# -- trigger bundles -------------------------------------------------------------

def save_bundles(bundles: Sequence[TriggerBundle], path, meta: dict | None = None) -> None:
    records = []
    for b in bundles:
        records.append({
            "question": b.question, "target": b.target, "qa_id": b.qa_id, "image_id": b.image_id,
            "failed": b.failed, "diverged": b.diverged, "clean_rare": b.clean_rare,
            "trigger_hit": b.trigger_hit, "max_linf": b.max_linf,
            "pixel_range": list(b.pixel_range), "max_update": b.max_update,
        })
    doc = {"config": bundles[0].config.to_dict() if bundles else None, "bundles": records,
           "meta": meta or {}}
    n = max(len(b.losses) for b in bundles) if bundles else 0
    losses = np.full((len(bundles), n), np.nan)
    for i, b in enumerate(bundles):
        losses[i, :len(b.losses)] = b.losses
    _write_npz(path, {
        "base": np.stack([b.base_image for b in bundles]),
        "trigger": np.stack([b.trigger_image for b in bundles]),
        "losses": losses,
        "trace_len": np.array([len(b.losses) for b in bundles], dtype=np.int64),
        "meta": np.array(json.dumps(doc, sort_keys=True)),
    })


def _write_npz(path, arrays: dict) -> None:
    # np.savez stamps wall-clock time into the archive; fix it for reproducible bytes
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_bundles(path) -> tuple[list[TriggerBundle], dict]:
    with np.load(path, allow_pickle=False) as z:
        doc = json.loads(str(z["meta"]))
        cfg = AttackConfig(**doc["config"])
        out = []
        for i, r in enumerate(doc["bundles"]):
            out.append(TriggerBundle(
                base_image=z["base"][i].copy(), trigger_image=z["trigger"][i].copy(),
                question=r["question"], target=r["target"], config=cfg,
                losses=[float(v) for v in z["losses"][i, :int(z["trace_len"][i])]],
                qa_id=r["qa_id"], image_id=r["image_id"], failed=r["failed"], diverged=r["diverged"],
                clean_rare=r["clean_rare"], trigger_hit=r["trigger_hit"], max_linf=r["max_linf"],
                pixel_range=tuple(r["pixel_range"]), max_update=r["max_update"]))
    return out, doc["meta"]


# -- reports and traces ----------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _preamble(meta: dict) -> list[str]:
    return [f"# {k}={_fmt(meta[k])}" for k in sorted(meta)]


def render_csv(columns: Sequence[str], rows: Sequence[dict], meta: dict) -> str:
    buf = io.StringIO()
    for line in _preamble(meta):
        buf.write(line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def render_json(columns: Sequence[str], rows: Sequence[dict], meta: dict) -> str:
    doc = {"metadata": meta, "columns": list(columns), "rows": [[r[c] for c in columns] for r in rows]}
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def parse_csv(text: str) -> tuple[dict, list[dict]]:
    meta, lines = {}, []
    for line in text.splitlines():
        if line.startswith("# "):
            k, _, v = line[2:].partition("=")
            meta[k] = v
        else:
            lines.append(line)
    rows = list(csv.DictReader(lines))
    return meta, rows


def emit_report(rows: Sequence[ReportRow], path, fmt: str, meta: dict) -> Path:
    """Write verification rows with a fixed, versioned column order."""
    if not rows:
        raise ValueError("report needs at least one row")
    meta = dict(meta, report_version=REPORT_VERSION)
    dicts = [r.to_dict() for r in rows]
    return write_table(REPORT_COLUMNS, dicts, path, fmt, meta)


def write_table(columns, rows, path, fmt: str, meta: dict) -> Path:
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown report format {fmt!r}")
    path = Path(path).with_suffix("." + fmt)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = render_csv(columns, rows, meta) if fmt == "csv" else render_json(columns, rows, meta)
    path.write_text(text, encoding="utf-8")
    return path


def read_report(path) -> tuple[dict, list[ReportRow]]:
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        meta, rows = doc["metadata"], [dict(zip(doc["columns"], r)) for r in doc["rows"]]
    else:
        meta, rows = parse_csv(path.read_text())
    out = []
    for r in rows:
        out.append(ReportRow(str(r["run_id"]), str(r["suspect_id"]), str(r["strategy"]),
                             str(r["task_family"]), int(r["qa_id"]), str(r["method"]),
                             str(r["transform"]), str(r["surgery"]), int(r["m"]), int(r["hits"]),
                             float(r["tmr"])))
    return meta, out


def write_trace(losses: Sequence[float], path, meta: dict) -> Path:
    """Two-column ``step,loss`` file."""
    rows = [{"step": i, "loss": float(v)} for i, v in enumerate(losses)]
    return write_table(("step", "loss"), rows, path, "csv", meta)


def read_trace(path) -> np.ndarray:
    _, rows = parse_csv(Path(path).read_text())
    return np.array([[int(r["step"]), float(r["loss"])] for r in rows]).reshape(-1, 2)
