"""Signal-window datasets, a synthetic multi-condition generator, CSV I/O and episodes."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledWindow:
    signal: np.ndarray
    label: int
    condition_id: int

    def __post_init__(self):
        sig = np.asarray(self.signal, dtype=np.float64)
        if sig.ndim != 1 or not np.all(np.isfinite(sig)):
            raise DataError("window signal must be a finite 1-d array")
        object.__setattr__(self, "signal", sig)


@dataclass(frozen=True, eq=False)
class ClientDataset:
    windows: tuple[LabeledWindow, ...]
    condition_id: int

    def __post_init__(self):
        object.__setattr__(self, "windows", tuple(self.windows))
        for i, w in enumerate(self.windows):
            if w.condition_id != self.condition_id:
                raise DataError(
                    f"window {i} has condition {w.condition_id}, dataset is condition {self.condition_id}"
                )

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def labels(self) -> np.ndarray:
        return np.array([w.label for w in self.windows], dtype=np.int64)

    def class_counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)

    def subset(self, indices: Sequence[int]) -> ClientDataset:
        return ClientDataset(tuple(self.windows[i] for i in indices), self.condition_id)

    def relabel(self, mapping: dict[int, int]) -> ClientDataset:
        """Map labels through ``mapping``; windows whose label is absent are dropped."""
        kept = [
            LabeledWindow(w.signal, mapping[w.label], w.condition_id)
            for w in self.windows
            if w.label in mapping
        ]
        return ClientDataset(tuple(kept), self.condition_id)


@dataclass(frozen=True)
class Episode:
    support: tuple[LabeledWindow, ...]
    query: tuple[LabeledWindow, ...]
    support_idx: np.ndarray = field(repr=False)
    query_idx: np.ndarray = field(repr=False)


def normalize_window(w: LabeledWindow) -> LabeledWindow:
    return LabeledWindow(zscore(w.signal), w.label, w.condition_id)


def zscore(signal: np.ndarray) -> np.ndarray:
    sig = np.asarray(signal, dtype=np.float64)
    centred = sig - sig.mean()
    std = np.sqrt(np.mean(centred * centred))
    if not std > 1e-12 * max(1.0, float(np.abs(sig).max(initial=0.0))):
        raise DataError("cannot normalise a constant window")
    out = centred / std
    # one more centring pass brings |mean| well under 1e-9 even for large offsets
    return out - out.mean()


def stack(windows: Sequence[LabeledWindow], normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """(B, L) signal matrix and (B,) labels, z-scored per window by default."""
    if not windows:
        raise DataError("no windows to stack")
    x = np.stack([zscore(w.signal) if normalize else w.signal for w in windows])
    y = np.array([w.label for w in windows], dtype=np.int64)
    return x, y


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    """Per-condition shifts: (speed_factor, noise_std, amplitude_scale).

    ``base_cycles`` is the class-0 shaft frequency in cycles per window at
    speed 1; class ``c`` runs at ``base_cycles * (1 + class_spacing * c)``.
    """

    num_classes: int = 4
    conditions: tuple[tuple[float, float, float], ...] = (
        (1.0, 0.4, 1.0), (1.15, 0.45, 0.9), (1.3, 0.5, 1.1), (1.45, 0.55, 1.0),
    )
    windows_per_class: int = 40
    input_length: int = 256
    seed: int = 0
    base_cycles: float = 6.0
    class_spacing: float = 0.35
    impulse_strength: float = 1.0
    resonance_cycles: float = 0.22
    jitter: float = 0.03

    def __post_init__(self):
        object.__setattr__(self, "conditions", tuple(tuple(float(v) for v in c) for c in self.conditions))
        if self.num_classes < 2:
            raise DataError("num_classes must be at least 2")
        if self.windows_per_class < 1 or self.input_length < 8:
            raise DataError("windows_per_class must be >= 1 and input_length >= 8")
        for speed, noise, amp in self.conditions:
            if not speed > 0:
                raise DataError(f"speed_factor must be positive, got {speed}")
            if noise < 0:
                raise DataError(f"noise_std must be non-negative, got {noise}")
            if not amp > 0:
                raise DataError(f"amplitude_scale must be positive, got {amp}")


def class_frequency(cfg: SyntheticConfig, label: int, speed: float) -> float:
    """Shaft frequency of ``label`` in cycles per window."""
    return cfg.base_cycles * (1.0 + cfg.class_spacing * label) * speed


def _window(cfg: SyntheticConfig, label: int, speed: float, noise: float, amp: float,
            rng: np.random.Generator) -> np.ndarray:
    n = cfg.input_length
    t = np.arange(n) / n
    f = class_frequency(cfg, label, speed) * (1.0 + cfg.jitter * rng.standard_normal())
    x = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    # fault impulses: repetition rate tied to class and speed, ringing at a
    # fixed structural resonance that does not move with speed
    if cfg.impulse_strength > 0:
        period = n / (f * (label + 1))
        start = rng.uniform(0, period)
        ring = np.zeros(n)
        for t0 in np.arange(start, n, period):
            dt = np.arange(n) - t0
            on = dt >= 0
            ring[on] += np.exp(-dt[on] / (0.02 * n)) * np.sin(2 * np.pi * cfg.resonance_cycles * dt[on])
        x = x + cfg.impulse_strength * (label / max(cfg.num_classes - 1, 1)) * ring
    x = amp * x
    if noise > 0:
        x = x + noise * rng.standard_normal(n)
    return x


def generate_synthetic(cfg: SyntheticConfig) -> list[ClientDataset]:
    """One balanced dataset per condition; condition ``v`` gets its own RNG stream."""
    out = []
    for cond, (speed, noise, amp) in enumerate(cfg.conditions):
        rng = np.random.default_rng([cfg.seed, cond])
        windows = []
        for label in range(cfg.num_classes):
            for _ in range(cfg.windows_per_class):
                windows.append(LabeledWindow(_window(cfg, label, speed, noise, amp, rng), label, cond))
        out.append(ClientDataset(tuple(windows), cond))
    return out


# ---------------------------------------------------------------- CSV


def export_csv(ds: ClientDataset, path: str | Path) -> None:
    lines = []
    for w in ds.windows:
        vals = ",".join(repr(float(v)) for v in w.signal)
        lines.append(f"{w.label},{w.condition_id},{vals}\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)


def ingest_csv(path: str | Path, input_length: int) -> ClientDataset:
    """Read ``label,condition_id,v1..vL`` rows; row numbers in errors are 1-based."""
    windows = []
    condition = None
    with open(path, encoding="utf-8") as fh:
        for row, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != input_length + 2:
                raise DataError(
                    f"{path}: row {row}: expected {input_length + 2} columns, got {len(fields)}"
                )
            try:
                label, cond = int(fields[0]), int(fields[1])
                signal = np.array([float(v) for v in fields[2:]])
            except ValueError:
                raise DataError(f"{path}: row {row}: non-numeric field") from None
            if label < 0:
                raise DataError(f"{path}: row {row}: negative label {label}")
            if condition is None:
                condition = cond
            elif cond != condition:
                raise DataError(
                    f"{path}: row {row}: condition_id {cond} differs from {condition} in earlier rows"
                )
            windows.append(LabeledWindow(signal, label, cond))
    if not windows:
        raise DataError(f"{path}: no rows")
    return ClientDataset(tuple(windows), condition)


# ---------------------------------------------------------------- episodes


def sample_episode(ds: ClientDataset, n_way: int, k_shot: int, q_query: int,
                   seed: int | np.random.Generator) -> Episode:
    """Per class, draw K support and Q query windows without replacement."""
    if n_way < 1 or k_shot < 1 or q_query < 0:
        raise DataError(f"invalid episode shape N={n_way}, K={k_shot}, Q={q_query}")
    rng = np.random.default_rng(seed)
    labels = ds.labels
    support, query = [], []
    for c in range(n_way):
        idx = np.flatnonzero(labels == c)
        if idx.size < k_shot + q_query:
            raise DataError(
                f"class {c} has {idx.size} windows, episode needs {k_shot + q_query}"
            )
        pick = rng.permutation(idx)[: k_shot + q_query]
        support.extend(pick[:k_shot])
        query.extend(pick[k_shot:])
    s_idx, q_idx = np.array(support, dtype=np.int64), np.array(query, dtype=np.int64)
    return Episode(
        tuple(ds.windows[i] for i in s_idx),
        tuple(ds.windows[i] for i in q_idx),
        s_idx, q_idx,
    )
