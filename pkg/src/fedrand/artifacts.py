"""On-disk formats: JSON-lines traces, interception logs, checkpoints."""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterable

import numpy as np

from .protocol import InterceptRecord

TRACE_SCHEMA = "fedrand.trace"
TRACE_VERSION = 1
INTERCEPT_SCHEMA = "fedrand.intercepts"


class ArtifactError(OSError):
    """A run directory is missing a file or holds an unreadable one."""


def write_jsonl(path, header: dict, records: Iterable[dict]) -> None:
    with open(Path(path), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path, schema: str) -> tuple[dict, list[dict]]:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing artifact: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("schema") != schema:
        raise ArtifactError(f"{path} is not a {schema} file")
    return lines[0], lines[1:]


def write_json_atomic(path, obj) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _intercept_key(rec: InterceptRecord, layer: int) -> str:
    return f"r{rec.round}.c{rec.client_id}.{rec.family}.l{layer}"


def save_intercepts(directory, intercepts: list[InterceptRecord], header: dict) -> None:
    """``intercepts.jsonl`` (round, client, family, checksum, values_ref) plus the values in ``intercepts.npz``."""
    directory = Path(directory)
    arrays = {}
    records = []
    for rec in intercepts:
        keys = []
        for l in sorted(rec.layers):
            key = _intercept_key(rec, l)
            arrays[key] = rec.layers[l]
            keys.append(key)
        records.append({"round": rec.round, "client": rec.client_id, "family": rec.family,
                        "layers": sorted(rec.layers), "checksum": rec.checksum,
                        "values_ref": {"file": "intercepts.npz", "keys": keys}})
    write_jsonl(directory / "intercepts.jsonl", {"schema": INTERCEPT_SCHEMA, **header}, records)
    with open(directory / "intercepts.npz", "wb") as fh:
        np.savez(fh, **arrays)


def load_intercepts(directory) -> tuple[dict, list[InterceptRecord]]:
    directory = Path(directory)
    header, records = read_jsonl(directory / "intercepts.jsonl", INTERCEPT_SCHEMA)
    npz = directory / "intercepts.npz"
    if not npz.exists():
        raise ArtifactError(f"missing artifact: {npz}")
    out = []
    with np.load(npz) as z:
        for rec in records:
            layers = {l: z[k].copy() for l, k in zip(rec["layers"], rec["values_ref"]["keys"])}
            ir = InterceptRecord(rec["round"], rec["client"], rec["family"], layers)
            if ir.checksum != rec["checksum"]:
                raise ArtifactError(f"checksum mismatch for round {ir.round} client {ir.client_id} family {ir.family}")
            out.append(ir)
    return header, out
