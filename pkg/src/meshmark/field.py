"""Coordinate -> class-probability MLP: init, evaluation, archive round-trip.

The network maps 3D points in the normalized-mesh frame to a softmax over
num_classes; channel 0 is the highlight probability. Depth linear layers with
ReLU + LayerNorm after each hidden layer. An optional sin/cos frequency
lifting of the input is kept solely for the high-frequency ablation.
"""

import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .util import from_f32_bytes, to_f32_bytes

_ARCHIVE_MAGIC = b"MMFIELD1"
_ARCHIVE_VERSION = 1


class FieldArchiveError(Exception):
    """Raised on corrupt, truncated, or incompatible field archives."""


@dataclass(frozen=True)
class FieldConfig:
    depth: int = 6
    width: int = 256
    num_classes: int = 2
    positional_encoding: int = 0  # number of sin/cos frequency bands; 0 = off
    init_seed: int = 0

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.positional_encoding < 0:
            raise ValueError("positional_encoding must be >= 0")

    @property
    def input_dim(self) -> int:
        return 3 + 6 * self.positional_encoding

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        return cls(**d)


def encode_positions(points: torch.Tensor, num_frequencies: int) -> torch.Tensor:
    """Lift (n,3) coords to [x, sin(2^k pi x), cos(2^k pi x)] for k < num_frequencies."""
    if num_frequencies == 0:
        return points
    feats = [points]
    for k in range(num_frequencies):
        arg = (2.0 ** k) * np.pi * points
        feats.append(torch.sin(arg))
        feats.append(torch.cos(arg))
    return torch.cat(feats, dim=-1)


class HighlighterField(nn.Module):
    """The optimizable probability field; parameters deterministic in init_seed."""

    def __init__(self, config: FieldConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        dims = [config.input_dim] + [config.width] * (config.depth - 1)
        layers = []
        norms = []
        for i in range(config.depth - 1):
            layers.append(nn.Linear(dims[i], dims[i + 1], dtype=dtype))
            norms.append(nn.LayerNorm(dims[i + 1], dtype=dtype))
        layers.append(nn.Linear(dims[-1], config.num_classes, dtype=dtype))
        self.layers = nn.ModuleList(layers)
        self.norms = nn.ModuleList(norms)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        """Class probabilities for (n,3) points; rows sum to 1."""
        x = encode_positions(points, self.config.positional_encoding)
        for linear, norm in zip(self.layers[:-1], self.norms):
            x = norm(torch.relu(linear(x)))
        return torch.softmax(self.layers[-1](x), dim=-1)

    def highlight_probability(self, points: torch.Tensor) -> torch.Tensor:
        return self.forward(points)[:, 0]

    @property
    def dtype(self) -> torch.dtype:
        return self.layers[0].weight.dtype


def init_field(cfg: FieldConfig, dtype: torch.dtype = torch.float32) -> HighlighterField:
    """Fresh field whose outputs start near uniform (highlight probability ~0.5).

    Hidden layers use uniform fan-in scaling; the final layer gets small
    normal weights (std 1e-2) and zero bias so the softmax starts near 1/K.
    """
    field = HighlighterField(cfg, dtype=dtype)
    gen = torch.Generator().manual_seed(cfg.init_seed)
    with torch.no_grad():
        for linear in field.layers[:-1]:
            bound = 1.0 / np.sqrt(linear.in_features)
            _uniform_(linear.weight, -bound, bound, gen)
            _uniform_(linear.bias, -bound, bound, gen)
        last = field.layers[-1]
        noise = torch.randn(last.weight.shape, generator=gen, dtype=torch.float64)
        last.weight.copy_(noise.to(last.weight.dtype) * 1e-2)
        last.bias.zero_()
    return field


def init_field_extreme(cfg: FieldConfig, target: float,
                       dtype: torch.dtype = torch.float32) -> HighlighterField:
    """Ablation init forcing the highlight probability to ~0 or ~1 everywhere.

    Zero final-layer weights; a large bias on the highlight logit pins the
    softmax output regardless of the input point.
    """
    if target not in (0.0, 1.0):
        raise ValueError("target must be 0.0 or 1.0")
    field = init_field(cfg, dtype=dtype)
    with torch.no_grad():
        last = field.layers[-1]
        last.weight.zero_()
        last.bias.zero_()
        last.bias[0] = 20.0 if target == 1.0 else -20.0
    return field


def _uniform_(tensor: torch.Tensor, lo: float, hi: float, gen: torch.Generator) -> None:
    # draw in float64 then cast so parameters are seed-stable across dtypes
    noise = torch.rand(tensor.shape, generator=gen, dtype=torch.float64)
    tensor.copy_((noise * (hi - lo) + lo).to(tensor.dtype))


def evaluate_probabilities(field: HighlighterField, points: np.ndarray) -> np.ndarray:
    """Class probabilities at the given 3D points, as an (n, num_classes) array."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    with torch.no_grad():
        t = torch.from_numpy(pts).to(field.dtype)
        return field(t).numpy().astype(np.float64)


def evaluate_highlight(field: HighlighterField, points: np.ndarray) -> np.ndarray:
    return evaluate_probabilities(field, points)[:, 0]


# ---------------------------------------------------------------------------
# archive format: magic | u32 manifest length | manifest JSON | float32 blob


def _parameter_entries(field: HighlighterField):
    for i, linear in enumerate(field.layers):
        yield f"layers.{i}.weight", linear.weight
        yield f"layers.{i}.bias", linear.bias
    for i, norm in enumerate(field.norms):
        yield f"norms.{i}.weight", norm.weight
        yield f"norms.{i}.bias", norm.bias


def save_field(field: HighlighterField, path) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, tensor in _parameter_entries(field):
        data = to_f32_bytes(tensor.detach().numpy())
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset,
                        "size": len(data)})
        blobs.append(data)
        offset += len(data)
    manifest = {
        "format_version": _ARCHIVE_VERSION,
        "config": field.config.to_dict(),
        "parameters": entries,
        "blob_size": offset,
    }
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_ARCHIVE_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for b in blobs:
            fh.write(b)


def load_field(path) -> HighlighterField:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise FieldArchiveError(f"cannot read field archive {path}: {e}") from e
    if len(raw) < len(_ARCHIVE_MAGIC) + 4 or raw[:len(_ARCHIVE_MAGIC)] != _ARCHIVE_MAGIC:
        raise FieldArchiveError(f"{path}: not a field archive")
    (mlen,) = struct.unpack_from("<I", raw, len(_ARCHIVE_MAGIC))
    start = len(_ARCHIVE_MAGIC) + 4
    try:
        manifest = json.loads(raw[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FieldArchiveError(f"{path}: corrupt manifest") from e
    if manifest.get("format_version") != _ARCHIVE_VERSION:
        raise FieldArchiveError(
            f"{path}: unsupported archive version {manifest.get('format_version')}")
    blob = raw[start + mlen:]
    if len(blob) != manifest["blob_size"]:
        raise FieldArchiveError(
            f"{path}: blob size {len(blob)} != manifest size {manifest['blob_size']}")
    cfg = FieldConfig.from_dict(manifest["config"])
    field = HighlighterField(cfg)
    tensors = dict(_parameter_entries(field))
    if set(tensors) != {e["name"] for e in manifest["parameters"]}:
        raise FieldArchiveError(f"{path}: parameter set does not match config")
    with torch.no_grad():
        for entry in manifest["parameters"]:
            tensor = tensors[entry["name"]]
            if list(tensor.shape) != entry["shape"]:
                raise FieldArchiveError(
                    f"{path}: shape mismatch for {entry['name']}: archive "
                    f"{entry['shape']}, config implies {list(tensor.shape)}")
            chunk = blob[entry["offset"]:entry["offset"] + entry["size"]]
            if len(chunk) != entry["size"]:
                raise FieldArchiveError(f"{path}: truncated parameter blob")
            tensor.copy_(torch.from_numpy(from_f32_bytes(chunk, entry["shape"])))
    return field
