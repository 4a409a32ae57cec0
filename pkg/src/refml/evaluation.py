"""Accuracy, cross-condition folds, results tables and embedding dumps."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import ClientDataset, LabeledWindow, stack
from .model import ParamSet, forward, predict

log = logging.getLogger(__name__)


def accuracy(params: ParamSet, query: Sequence[LabeledWindow]) -> float:
    """Percent of ``query`` windows whose argmax logit matches the label."""
    if not query:
        raise ValueError("accuracy: empty query set")
    x, y = stack(query)
    logits = forward(params, x).logits
    return 100.0 * float(np.mean(predict(logits) == y))


@dataclass(frozen=True)
class FoldSpec:
    train_condition_ids: tuple[int, ...]
    test_condition_ids: tuple[int, ...]
    cross_source: bool = False  # train and test come from different datasets


def kfold_protocol(condition_ids: Sequence[int] | None = None, mode: str = "leave-one-out",
                   folds: Iterable[FoldSpec] | None = None) -> list[FoldSpec]:
    """Leave-one-condition-out rotation, or validated explicit folds.

    Fold i tests condition ids[i] and trains on the following ids in
    cyclic order (fold 1 of {0,1,2,3} trains {1,2,3} and tests {0}).
    """
    if mode == "leave-one-out":
        ids = list(condition_ids or [])
        if len(ids) < 2:
            raise ValueError("leave-one-out needs at least 2 conditions")
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate condition ids: {ids}")
        n = len(ids)
        return [
            FoldSpec(tuple(ids[(i + j) % n] for j in range(1, n)), (ids[i],))
            for i in range(n)
        ]
    if mode == "explicit":
        out = []
        for f in folds or []:
            f = FoldSpec(tuple(f.train_condition_ids), tuple(f.test_condition_ids), f.cross_source)
            if not f.train_condition_ids or not f.test_condition_ids:
                raise ValueError(f"fold {f} needs non-empty train and test conditions")
            overlap = set(f.train_condition_ids) & set(f.test_condition_ids)
            if overlap and not f.cross_source:
                raise ValueError(f"train/test conditions overlap: {sorted(overlap)}")
            out.append(f)
        if not out:
            raise ValueError("explicit mode needs at least one fold")
        return out
    raise ValueError(f"unknown fold mode {mode!r}")


# ---------------------------------------------------------------- results


class ResultsTable:
    """Keyed (method, shots, fold, seed) -> accuracy cells.

    A cell holding NaN marks a failed run; it is kept in the raw table and
    left out of the summary statistics.
    """

    def __init__(self):
        self._cells: dict[tuple[str, int, int, int], float] = {}

    def add(self, method: str, shots: int, fold: int, seed: int, acc: float) -> None:
        key = (method, int(shots), int(fold), int(seed))
        if key in self._cells:
            raise ValueError(f"duplicate results cell {key}")
        if not math.isnan(acc) and not 0.0 <= acc <= 100.0:
            raise ValueError(f"accuracy {acc} outside [0, 100]")
        self._cells[key] = float(acc)

    def __len__(self) -> int:
        return len(self._cells)

    def __eq__(self, other) -> bool:
        return isinstance(other, ResultsTable) and self.to_csv() == other.to_csv()

    def rows(self) -> list[tuple[str, int, int, int, float]]:
        return [(*k, v) for k, v in sorted(self._cells.items())]

    def values(self, method: str, shots: int | None = None) -> np.ndarray:
        vals = [v for (m, k, _, _), v in sorted(self._cells.items())
                if m == method and (shots is None or k == shots) and not math.isnan(v)]
        return np.array(vals)

    def mean(self, method: str, shots: int | None = None) -> float:
        vals = self.values(method, shots)
        return float(vals.mean()) if vals.size else float("nan")

    def summary(self) -> list[tuple[str, int, float, float]]:
        keys = sorted({(m, k) for m, k, _, _ in self._cells})
        out = []
        for m, k in keys:
            vals = self.values(m, k)
            mean = float(vals.mean()) if vals.size else float("nan")
            std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            out.append((m, k, mean, std))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "shots", "fold", "seed", "accuracy"])
        for m, k, f, s, a in self.rows():
            w.writerow([m, k, f, s, repr(a)])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "shots", "mean", "std"])
        for m, k, mean, std in self.summary():
            w.writerow([m, k, f"{mean:.6f}", f"{std:.6f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> ResultsTable:
        table = cls()
        for row in csv.DictReader(io.StringIO(text)):
            table.add(row["method"], int(row["shots"]), int(row["fold"]), int(row["seed"]),
                      float(row["accuracy"]))
        return table


# ---------------------------------------------------------------- suite


@dataclass(frozen=True)
class Cell:
    method: str
    shots: int
    fold: int
    seed: int


def _cell_path(checkpoint_dir, cell: Cell, test_index: int) -> Path:
    return Path(checkpoint_dir) / (
        f"{cell.method}_k{cell.shots}_fold{cell.fold}_seed{cell.seed}_test{test_index}.bin"
    )


def _run_group(args):
    """Run the cells that share one training trajectory."""
    from threadpoolctl import threadpool_limits

    from .fedproto import run_methods
    from .model import save_params

    cells, train_sets, test_sets, hp, arch, n_way, q_query, checkpoint_dir = args
    methods = [c.method for c in cells]
    head = cells[0]
    with threadpool_limits(1):
        try:
            results = run_methods(train_sets, test_sets, methods, hp, arch, n_way, head.shots,
                                  q_query, head.seed)
        except Exception as exc:  # noqa: BLE001 - a failed cell is recorded, not fatal
            log.error("cells %s failed: %s", methods, exc)
            return [(c, float("nan"), [], f"{type(exc).__name__}: {exc}") for c in cells]
    out = []
    for cell in cells:
        res = results[cell.method]
        written = []
        if checkpoint_dir is not None:
            for i, p in enumerate(res.test_params):
                path = _cell_path(checkpoint_dir, cell, i)
                save_params(p, path)
                meta = path.with_suffix(".meta")
                write_sidecar(meta, cell, hp, res.accuracies[i])
                written += [str(path), str(meta)]
        out.append((cell, res.accuracy, written, None))
    return out


def write_sidecar(path: str | Path, cell: Cell, hp, acc: float) -> None:
    """Human-readable key = value record next to a checkpoint."""
    from dataclasses import asdict

    fields = {"method": cell.method, "shots": cell.shots, "fold": cell.fold, "seed": cell.seed,
              "round": hp.rounds, "accuracy": repr(acc)}
    for k, v in asdict(hp).items():
        fields[k] = getattr(v, "value", v)
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in fields.items()), encoding="utf-8")


def plan_cells(methods: Sequence[str], shots: Sequence[int], n_folds: int,
               seeds: Sequence[int]) -> list[list[Cell]]:
    """Cells grouped by shared training run, in a fixed order."""
    from .fedproto import trajectory

    groups: dict[tuple, list[Cell]] = {}
    for k in shots:
        for fi in range(1, n_folds + 1):
            for s in seeds:
                for m in methods:
                    groups.setdefault((trajectory(m), k, fi, s), []).append(Cell(m, k, fi, s))
    return list(groups.values())


def run_suite(methods: Sequence[str], shots: Sequence[int], folds: Sequence[FoldSpec],
              seeds: Sequence[int], datasets: Mapping[int, ClientDataset], hp, arch,
              n_way: int, q_query: int, jobs: int = 1,
              test_datasets: Mapping[int, ClientDataset] | None = None,
              checkpoint_dir: str | Path | None = None,
              errors: list | None = None, artifacts: list | None = None) -> ResultsTable:
    """Run every (method, shots, fold, seed) cell and collect accuracies.

    ``test_datasets`` supplies the testing-condition pools for
    cross-equipment folds; otherwise testing conditions come from
    ``datasets`` too.  A baseline and its fine-tuned variant share one
    training run.  Work units are independent, so ``jobs`` worker
    processes give the same table as a serial run.
    """
    from .fedproto import METHODS

    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ValueError(f"unknown methods {bad}; choose from {list(METHODS)}")
    if len(set(methods)) != len(methods):
        raise ValueError(f"duplicate methods in {list(methods)}")
    test_pool = test_datasets if test_datasets is not None else datasets
    work = []
    for cells in plan_cells(methods, shots, len(folds), seeds):
        fold = folds[cells[0].fold - 1]
        train_sets = [datasets[c] for c in fold.train_condition_ids]
        test_sets = [test_pool[c] for c in fold.test_condition_ids]
        work.append((cells, train_sets, test_sets, hp, arch, n_way, q_query, checkpoint_dir))
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_group, work))
    else:
        outcomes = [_run_group(w) for w in work]
    table = ResultsTable()
    for group in outcomes:
        for cell, acc, written, err in group:
            table.add(cell.method, cell.shots, cell.fold, cell.seed, acc)
            if err is not None and errors is not None:
                errors.append((cell, err))
            if artifacts is not None:
                artifacts.extend(written)
    return table


# ---------------------------------------------------------------- embeddings


def export_embeddings(params: ParamSet, windows: Sequence[LabeledWindow], path: str | Path,
                      client_id: int = 0) -> None:
    """TSV rows: client_id, label, prediction, then the first-FC embedding."""
    x, y = stack(windows)
    out = forward(params, x)
    pred = predict(out.logits)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for label, p, emb in zip(y, pred, out.embedding):
            fh.write("\t".join([str(client_id), str(int(label)), str(int(p))]
                               + [repr(float(v)) for v in emb]) + "\n")


def read_embeddings(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Parse an embedding dump into (client_ids, labels, predictions, embeddings)."""
    rows = [line.rstrip("\n").split("\t") for line in open(path, encoding="utf-8") if line.strip()]
    ids = np.array([int(r[0]) for r in rows])
    labels = np.array([int(r[1]) for r in rows])
    preds = np.array([int(r[2]) for r in rows])
    emb = np.array([[float(v) for v in r[3:]] for r in rows])
    return ids, labels, preds, emb
