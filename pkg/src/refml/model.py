"""1D-CNN fault classifier: three conv units (encoder) and two FC layers (predictor)."""

from __future__ import annotations

import hashlib
import struct
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from . import autodiff as ad

ENCODER = "encoder"
PREDICTOR = "predictor"

MAGIC = b"RFMLPS01"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    input_length: int = 1024
    num_classes: int = 10
    conv_units: tuple[tuple[int, int, int], ...] = ((16, 3, 2), (32, 3, 2), (32, 3, 2))
    hidden_dim: int = 256

    def __post_init__(self):
        object.__setattr__(self, "conv_units", tuple(tuple(int(v) for v in u) for u in self.conv_units))
        if self.input_length < 1 or self.num_classes < 2 or self.hidden_dim < 1:
            raise ValueError(f"invalid architecture: {self}")
        if not self.conv_units:
            raise ValueError("at least one conv unit is required")
        for ch, k, pool in self.conv_units:
            if ch < 1 or k < 1 or k % 2 == 0 or pool < 1:
                raise ValueError(f"invalid conv unit (channels={ch}, kernel={k}, pool={pool})")
        length = self.input_length
        for _, _, pool in self.conv_units:
            length = (length - pool) // pool + 1 if length >= pool else 0
            if length < 1:
                raise ValueError(
                    f"conv stack reduces input length {self.input_length} to a non-positive size"
                )

    @property
    def spatial_lengths(self) -> list[int]:
        out, length = [], self.input_length
        for _, _, pool in self.conv_units:
            length = (length - pool) // pool + 1
            out.append(length)
        return out

    @property
    def flatten_length(self) -> int:
        return self.conv_units[-1][0] * self.spatial_lengths[-1]

    def digest(self) -> bytes:
        text = repr((self.input_length, self.num_classes, self.conv_units, self.hidden_dim))
        return hashlib.sha256(text.encode()).digest()[:8]


PAPER_SPEC = ArchitectureSpec()


class ParamSet(Mapping):
    """Ordered name -> float64 array map with an encoder/predictor partition.

    Treated as an immutable value: every update returns a new ParamSet.
    """

    def __init__(self, entries: Mapping[str, np.ndarray], partition: Mapping[str, str] | None = None,
                 arch: ArchitectureSpec | None = None):
        self._entries = {k: np.asarray(v, dtype=np.float64) for k, v in entries.items()}
        if partition is None:
            partition = {k: k.split(".", 1)[0] for k in self._entries}
        self._partition = dict(partition)
        if set(self._partition) != set(self._entries):
            raise ValueError("partition must tag every entry exactly once")
        bad = {v for v in self._partition.values()} - {ENCODER, PREDICTOR}
        if bad:
            raise ValueError(f"unknown partition tags: {sorted(bad)}")
        self.arch = arch

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamSet):
            return NotImplemented
        return (
            list(self) == list(other)
            and self._partition == other._partition
            and all(np.array_equal(self[k], other[k]) for k in self)
        )

    def __repr__(self):
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self.items())
        return f"ParamSet({shapes})"

    @property
    def partition(self) -> dict[str, str]:
        return dict(self._partition)

    def tag(self, name: str) -> str:
        return self._partition[name]

    @property
    def encoder_names(self) -> list[str]:
        return [k for k in self if self._partition[k] == ENCODER]

    @property
    def predictor_names(self) -> list[str]:
        return [k for k in self if self._partition[k] == PREDICTOR]

    def replace(self, updates: Mapping[str, np.ndarray]) -> ParamSet:
        unknown = set(updates) - set(self._entries)
        if unknown:
            raise KeyError(f"unknown parameter names: {sorted(unknown)}")
        entries = {k: (updates[k] if k in updates else v) for k, v in self._entries.items()}
        return ParamSet(entries, self._partition, self.arch)

    def map(self, fn) -> ParamSet:
        return ParamSet({k: fn(v) for k, v in self.items()}, self._partition, self.arch)

    def check_compatible(self, other: Mapping[str, np.ndarray]) -> None:
        if list(self) != list(other):
            raise ValueError(f"parameter names differ: {list(self)} vs {list(other)}")
        for k in self:
            if self[k].shape != np.shape(other[k]):
                raise ValueError(f"shape mismatch for {k}: {self[k].shape} vs {np.shape(other[k])}")

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(v * v)) for v in self.values())))


def split(params: ParamSet) -> tuple[ParamSet, ParamSet]:
    enc = ParamSet({k: params[k] for k in params.encoder_names},
                   {k: ENCODER for k in params.encoder_names}, params.arch)
    pred = ParamSet({k: params[k] for k in params.predictor_names},
                    {k: PREDICTOR for k in params.predictor_names}, params.arch)
    return enc, pred


def merge(encoder: ParamSet, predictor: ParamSet) -> ParamSet:
    if any(encoder.tag(k) != ENCODER for k in encoder) or any(
        predictor.tag(k) != PREDICTOR for k in predictor
    ):
        raise ValueError("partition mismatch: merge expects an encoder view and a predictor view")
    if set(encoder) & set(predictor):
        raise ValueError("partition mismatch: encoder and predictor share names")
    entries = {**dict(encoder.items()), **dict(predictor.items())}
    partition = {**encoder.partition, **predictor.partition}
    return ParamSet(entries, partition, encoder.arch or predictor.arch)


def _layer_shapes(spec: ArchitectureSpec) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every parameter; fan_in 0 marks BN entries."""
    out = []
    cin = 1
    for i, (ch, k, _) in enumerate(spec.conv_units, start=1):
        out.append((f"encoder.conv{i}.weight", (ch, cin, k), cin * k))
        out.append((f"encoder.bn{i}.gamma", (ch,), 0))
        out.append((f"encoder.bn{i}.beta", (ch,), 0))
        cin = ch
    flat = spec.flatten_length
    out.append(("predictor.fc1.weight", (spec.hidden_dim, flat), flat))
    out.append(("predictor.fc1.bias", (spec.hidden_dim,), flat))
    out.append(("predictor.fc2.weight", (spec.num_classes, spec.hidden_dim), spec.hidden_dim))
    out.append(("predictor.fc2.bias", (spec.num_classes,), spec.hidden_dim))
    return out


def build(spec: ArchitectureSpec, seed: int) -> ParamSet:
    """Fresh parameters: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, BN at identity."""
    rng = np.random.default_rng(seed)
    entries = {}
    for name, shape, fan_in in _layer_shapes(spec):
        if name.endswith(".gamma"):
            entries[name] = np.ones(shape)
        elif name.endswith(".beta"):
            entries[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            entries[name] = rng.uniform(-bound, bound, size=shape)
    return ParamSet(entries, arch=spec)


class ModelOutput(NamedTuple):
    logits: np.ndarray
    embedding: np.ndarray


def apply(spec: ArchitectureSpec, p: Mapping[str, ad.Node], x: ad.Node) -> tuple[ad.Node, ad.Node]:
    """Differentiable forward pass; returns (logits, pre-activation embedding)."""
    if x.value.ndim != 2 or x.shape[1] != spec.input_length:
        raise ad.ShapeError(
            f"forward: expected batch of shape (B, {spec.input_length}), got {x.shape}"
        )
    if x.shape[0] < 2:
        raise ad.ShapeError("forward: batch statistics need at least 2 samples")
    h = ad.reshape(x, (x.shape[0], 1, spec.input_length))
    for i, (_, _, pool) in enumerate(spec.conv_units, start=1):
        h = ad.conv1d(h, p[f"encoder.conv{i}.weight"])
        h = ad.batchnorm1d(h, p[f"encoder.bn{i}.gamma"], p[f"encoder.bn{i}.beta"])
        # max-pool commutes with ReLU; pooling first halves the ReLU work
        h = ad.maxpool1d(h, pool, pool)
        h = ad.relu(h)
    h = ad.flatten(h)
    emb = ad.linear(h, p["predictor.fc1.weight"], p["predictor.fc1.bias"])
    logits = ad.linear(ad.relu(emb), p["predictor.fc2.weight"], p["predictor.fc2.bias"])
    return logits, emb


def forward(params: ParamSet, batch: np.ndarray, spec: ArchitectureSpec | None = None) -> ModelOutput:
    spec = spec or params.arch
    if spec is None:
        raise ValueError("forward needs an ArchitectureSpec")
    with ad.no_record():
        nodes = {k: ad.constant(v) for k, v in params.items()}
        logits, emb = apply(spec, nodes, ad.constant(np.asarray(batch, dtype=np.float64)))
    return ModelOutput(logits.value, emb.value)


def predict(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(logits, axis=-1)


# ---------------------------------------------------------------- checkpoints


def save_params(params: ParamSet, path: str | Path) -> None:
    digest = params.arch.digest() if params.arch is not None else bytes(8)
    chunks = [MAGIC, digest, struct.pack("<I", len(params))]
    for name, value in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path: str | Path) -> tuple[bytes, dict[str, np.ndarray]]:
    """Parse a checkpoint into (spec digest, ordered entries)."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a ParamSet checkpoint")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: corrupt checkpoint (truncated at byte {pos})")
        out = data[pos: pos + n]
        pos += n
        return out

    digest = take(8)
    (count,) = struct.unpack("<I", take(4))
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{path}: corrupt checkpoint (bad entry name)") from None
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        entries[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise CheckpointError(f"{path}: corrupt checkpoint ({len(data) - pos} trailing bytes)")
    return digest, entries


def load_params(path: str | Path, spec: ArchitectureSpec | None = None) -> ParamSet:
    digest, entries = read_checkpoint(path)
    if spec is not None and digest != spec.digest():
        raise CheckpointError(f"{path}: checkpoint was written for a different architecture")
    try:
        return ParamSet(entries, arch=spec)
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
