"""Portable checkpoints: ``manifest.json`` plus little-endian float32 ``weights.bin``."""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from pathlib import Path
from typing import Optional

import numpy as np

from .data import NormStats
from .geo import Station, build_station_graph
from .model import AirPCM, AirPCMConfig, parameter_shapes
from .tensor import Parameter

FORMAT = "airpcm-checkpoint/1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: AirPCM, norm: Optional[NormStats] = None, extra: Optional[dict] = None) -> dict:
    """Write the model to directory ``path``; returns the manifest."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    index, offset, chunks = [], 0, []
    for name, p in model.params.items():
        blob = p.data.astype("<f4").tobytes()
        index.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += len(blob)
        chunks.append(blob)
    payload = b"".join(chunks)
    (out / "weights.bin").write_bytes(payload)
    manifest = {
        "format": FORMAT,
        "config": model.cfg.to_dict(),
        "tensors": index,
        "weights_sha256": hashlib.sha256(payload).hexdigest(),
        "stations": [vars(s) for s in model.graph.stations],
        "graph": {"k": model.graph.k, "symmetric": model.graph.symmetric},
        "pollutant_names": list(model.pollutant_names),
        "met_names": list(model.met_names),
        "norm": norm.to_dict() if norm is not None else None,
        "extra": extra or {},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return manifest


def load_checkpoint(path):
    """Returns ``(model, norm_stats_or_None, manifest)``."""
    src = Path(path)
    try:
        manifest = json.loads((src / "manifest.json").read_text(encoding="utf-8"))
        payload = (src / "weights.bin").read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint {src} is incomplete: {exc.filename} missing") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{src}: unsupported checkpoint format {manifest.get('format')!r}")
    if hashlib.sha256(payload).hexdigest() != manifest["weights_sha256"]:
        raise CheckpointError(f"{src}: weights.bin does not match its manifest digest")
    cfg = AirPCMConfig.from_dict(manifest["config"])
    expected = parameter_shapes(cfg)
    names = [t["name"] for t in manifest["tensors"]]
    if names != list(expected):
        raise CheckpointError(f"{src}: tensor index does not match the configured architecture")
    params = OrderedDict()
    for t in manifest["tensors"]:
        shape = tuple(t["shape"])
        if shape != expected[t["name"]][0]:
            raise CheckpointError(f"{src}: tensor {t['name']} has shape {shape}, expected {expected[t['name']][0]}")
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=t["offset"]).astype(np.float64)
        params[t["name"]] = Parameter(t["name"], arr.reshape(shape), {"kind": "checkpoint"})
    stations = [Station(**s) for s in manifest["stations"]]
    graph = build_station_graph(stations, manifest["graph"]["k"], manifest["graph"]["symmetric"])
    model = AirPCM(cfg, graph, params, pollutant_names=manifest["pollutant_names"], met_names=manifest["met_names"])
    norm = NormStats.from_dict(manifest["norm"]) if manifest.get("norm") else None
    return model, norm, manifest
