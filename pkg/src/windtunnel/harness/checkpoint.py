"""Write-once, content-addressed checkpoint directories.

Layout::

    ckpt-<step>-<digest12>/
        manifest.json        format version, step, digests, JSON state
        arrays/<key>.bin     raw little-endian arrays (f32 for weights/moments)
        metrics.csv          metrics rows up to and including ``step``
        probes.jsonl         probe records up to ``step``
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import shutil
import stat
import tempfile
from collections import OrderedDict
from typing import Any, Mapping

import numpy as np

__all__ = ["FORMAT_VERSION", "Checkpoint", "save_checkpoint", "load_checkpoint", "CheckpointError"]

FORMAT_NAME = "windtunnel-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclasses.dataclass
class Checkpoint:
    step: int
    arrays: "OrderedDict[str, np.ndarray]"
    state: dict            # JSON-serializable: spec, optimizer scalars, sampler, etc.
    metrics_csv: str = ""
    probes_jsonl: str = ""
    path: str | None = None
    digest: str | None = None

    def group(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        p = prefix + "/"
        return OrderedDict((k[len(p):], v) for k, v in self.arrays.items() if k.startswith(p))


def _key_to_file(key: str) -> str:
    return key.replace("/", "__") + ".bin"


def save_checkpoint(root: str, ckpt: Checkpoint) -> str:
    """Write ``ckpt`` under ``root`` and return its directory.

    The directory name embeds the content digest, so re-saving identical
    content is a no-op and different content never overwrites.
    """
    os.makedirs(root, exist_ok=True)
    h = hashlib.sha256()
    index = OrderedDict()
    for key, arr in ckpt.arrays.items():
        a = np.ascontiguousarray(arr)
        dt = a.dtype.newbyteorder("<")
        index[key] = {"file": _key_to_file(key), "dtype": dt.str, "shape": list(a.shape)}
        h.update(key.encode())
        h.update(a.astype(dt, copy=False).tobytes())
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "step": ckpt.step,
        "arrays": index,
        "state": ckpt.state,
    }
    body = json.dumps(manifest)
    h.update(body.encode())
    h.update(ckpt.metrics_csv.encode())
    h.update(ckpt.probes_jsonl.encode())
    digest = h.hexdigest()
    final = os.path.join(root, f"ckpt-{ckpt.step:07d}-{digest[:12]}")
    if os.path.exists(final):
        return final
    tmp = tempfile.mkdtemp(prefix=".ckpt-", dir=root)
    try:
        os.mkdir(os.path.join(tmp, "arrays"))
        for key, arr in ckpt.arrays.items():
            meta = index[key]
            np.ascontiguousarray(arr).astype(meta["dtype"], copy=False).tofile(os.path.join(tmp, "arrays", meta["file"]))
        manifest["digest"] = digest
        with open(os.path.join(tmp, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=1)
        with open(os.path.join(tmp, "metrics.csv"), "w", newline="") as f:
            f.write(ckpt.metrics_csv)
        with open(os.path.join(tmp, "probes.jsonl"), "w") as f:
            f.write(ckpt.probes_jsonl)
        for dirpath, _, files in os.walk(tmp):
            for fn in files:
                os.chmod(os.path.join(dirpath, fn), stat.S_IRUSR | stat.S_IRGRP | stat.S_IROTH)
        os.rename(tmp, final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    ckpt.path, ckpt.digest = final, digest
    return final


def load_checkpoint(path: str) -> Checkpoint:
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise CheckpointError(f"{path}: not a checkpoint directory")
    with open(mpath) as f:
        manifest = json.load(f)
    if manifest.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{path}: unknown format {manifest.get('format')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {manifest.get('version')}")
    arrays = OrderedDict()
    for key, meta in manifest["arrays"].items():
        a = np.fromfile(os.path.join(path, "arrays", meta["file"]), dtype=meta["dtype"])
        arrays[key] = a.reshape(meta["shape"]).astype(np.dtype(meta["dtype"]).newbyteorder("="))
    with open(os.path.join(path, "metrics.csv"), newline="") as f:
        metrics = f.read()
    with open(os.path.join(path, "probes.jsonl")) as f:
        probes = f.read()
    return Checkpoint(manifest["step"], arrays, manifest["state"], metrics, probes, path, manifest.get("digest"))


def json_safe(obj: Any) -> Any:
    """Convert numpy scalars inside nested containers to Python types."""
    if isinstance(obj, Mapping):
        return {str(k): json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
