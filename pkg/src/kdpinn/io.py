"""Checkpoint and results-document persistence."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import ChecksumError, ConfigError
from .jets import DTYPE
from .net import LayerSpec, MlpNetwork

FORMAT_VERSION = 1


def _canonical(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def checkpoint_payload(net: MlpNetwork, rng_seed: int | None = None, training_meta: dict | None = None) -> dict:
    payload = {
        "format_version": FORMAT_VERSION,
        "spec": net.spec.to_dict(),
        "input_scale": {"lo": net.lo.tolist(), "hi": net.hi.tolist()},
        "weights": [W.detach().tolist() for W in net.weights],
        "biases": [b.detach().tolist() for b in net.biases],
        "rng_seed": rng_seed,
        "training_meta": training_meta or {},
    }
    payload["checksum"] = hashlib.sha256(_canonical(payload)).hexdigest()
    return payload


def save_checkpoint(path, net: MlpNetwork, rng_seed: int | None = None, training_meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # json floats use the shortest round-trip repr, so reload is exact
    path.write_text(json.dumps(checkpoint_payload(net, rng_seed, training_meta), indent=1))
    return path


def load_checkpoint(path) -> tuple[MlpNetwork, dict]:
    """Returns (network, payload); refuses documents whose checksum does not match."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ChecksumError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    stored = payload.pop("checksum", None)
    if stored != hashlib.sha256(_canonical(payload)).hexdigest():
        raise ChecksumError(f"checkpoint {path} failed its checksum")
    if payload.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format_version {payload.get('format_version')}")
    spec = LayerSpec.from_dict(payload["spec"])
    net = MlpNetwork(spec, payload["input_scale"]["lo"], payload["input_scale"]["hi"])
    with torch.no_grad():
        for W, w in zip(net.weights, payload["weights"]):
            W.copy_(torch.tensor(w, dtype=DTYPE))
        for b, v in zip(net.biases, payload["biases"]):
            b.copy_(torch.tensor(v, dtype=DTYPE))
    payload["checksum"] = stored
    return net, payload


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None  # JSON has no NaN/inf
    if hasattr(obj, "to_dict"):
        return _jsonable(obj.to_dict())
    return obj


def write_json(path, doc: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
    return path
