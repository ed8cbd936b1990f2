"""Model checkpoint persistence and parameter checksums.

Checkpoints are JSON documents. Parameters are stored either as base64 of
the little-endian float64 bytes (default; bit-exact and compact) or as
plain JSON numbers, whose repr round-trips float64 exactly as well. The
format carries a sha256 checksum over the raw parameter bytes that is
verified on load.
"""

import base64
import hashlib
import json

import numpy as np

from .errors import DataError
from .network import DenseLayer, Network

__all__ = ["FORMAT_VERSION", "model_checksum", "save_checkpoint", "load_checkpoint"]

FORMAT_VERSION = "advcorr-ckpt-1"


def _param_bytes(net: Network) -> bytes:
    chunks = [np.asarray(net.layer_dims, dtype="<i8").tobytes()]
    for layer in net.layers:
        chunks.append(layer.weights.astype("<f8").tobytes())
        chunks.append(layer.biases.astype("<f8").tobytes())
    return b"".join(chunks)


def model_checksum(net: Network) -> str:
    """sha256 over architecture dims and raw little-endian parameter bytes."""
    return hashlib.sha256(_param_bytes(net)).hexdigest()


def _encode(arr: np.ndarray, mode: str):
    if mode == "base64":
        return base64.b64encode(arr.astype("<f8").tobytes()).decode("ascii")
    return arr.tolist()


def _decode(payload, shape, mode: str, path):
    try:
        if mode == "base64":
            raw = base64.b64decode(payload.encode("ascii"), validate=True)
            arr = np.frombuffer(raw, dtype="<f8").copy()
        else:
            arr = np.asarray(payload, dtype=np.float64).ravel()
        return arr.reshape(shape)
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}: corrupt parameter payload ({exc})") from exc


def save_checkpoint(net: Network, meta: dict, path, mode: str = "base64"):
    """Write the network and its training metadata; lossless round trip."""
    if mode not in ("base64", "decimal"):
        raise ValueError(f"unknown encoding mode {mode!r}")
    doc = {
        "format_version": FORMAT_VERSION,
        "encoding": mode,
        "architecture": {
            "layer_dims": list(net.layer_dims),
            "activations": ["relu"] * (len(net.layers) - 1) + ["identity"],
        },
        "parameters": [
            {"weights": _encode(l.weights, mode), "biases": _encode(l.biases, mode)}
            for l in net.layers
        ],
        "checksum": model_checksum(net),
        "meta": dict(meta),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path, with_meta: bool = False):
    """Load a checkpoint; verifies version and parameter checksum."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not valid JSON ({exc})") from exc
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(
            f"{path}: unsupported format_version {version!r} (expected {FORMAT_VERSION!r})"
        )
    mode = doc.get("encoding")
    if mode not in ("base64", "decimal"):
        raise DataError(f"{path}: unknown encoding {mode!r}")
    try:
        dims = doc["architecture"]["layer_dims"]
        params = doc["parameters"]
        stored_sum = doc["checksum"]
    except KeyError as exc:
        raise DataError(f"{path}: missing checkpoint field {exc}") from exc
    if len(params) != len(dims) - 1:
        raise DataError(f"{path}: parameter blocks do not match architecture")
    layers = []
    for (d_in, d_out), block in zip(zip(dims, dims[1:]), params):
        w = _decode(block["weights"], (d_out, d_in), mode, path)
        b = _decode(block["biases"], (d_out,), mode, path)
        layers.append(DenseLayer(w, b))
    net = Network(layers)
    actual = model_checksum(net)
    if actual != stored_sum:
        raise DataError(
            f"{path}: checksum mismatch (stored {stored_sum[:12]}…, recomputed {actual[:12]}…)"
        )
    if with_meta:
        return net, doc.get("meta", {})
    return net
