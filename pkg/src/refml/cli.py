"""Command-line front end: ``generate``, ``run`` and ``inspect``.

Configuration is a flat ``key = value`` text file (``#`` starts a comment),
layered as built-in defaults < ``--config`` file < ``--set`` overrides.
"""

from __future__ import annotations

import argparse
import configparser
import datetime as _dt
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .autodiff import GradMode
from .data import ClientDataset, DataError, SyntheticConfig, export_csv, generate_synthetic, ingest_csv
from .evaluation import FoldSpec, kfold_protocol, plan_cells, run_suite, _cell_path
from .fedproto import METHODS, HyperParams
from .model import ArchitectureSpec, CheckpointError, ParamSet, read_checkpoint

log = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
PROFILES = ("paper", "desk")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- value parsing


def _int(text: str) -> int:
    return int(text)


def _float(text: str) -> float:
    return float(text)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _words(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _triples(text: str, kind=float) -> tuple[tuple, ...]:
    out = []
    for item in text.split(","):
        if item.strip():
            parts = item.split(":")
            if len(parts) != 3:
                raise ValueError(f"expected a:b:c, got {item.strip()!r}")
            out.append(tuple(kind(p) for p in parts))
    return tuple(out)


def _label_map(text: str) -> tuple[tuple[int, int], ...]:
    out = []
    for item in text.split(","):
        if item.strip():
            src, dst = item.split(":")
            out.append((int(src), int(dst)))
    return tuple(out)


def _folds(text: str) -> str | tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]:
    if text.strip() == "auto":
        return "auto"
    out = []
    for item in text.split(";"):
        if item.strip():
            train, test = item.split(">")
            out.append((_ints(train), _ints(test)))
    return tuple(out)


def _show(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple) and len(value[0]) == 2 and isinstance(value[0][0], tuple):
            return "; ".join(f"{','.join(map(str, a))} > {','.join(map(str, b))}" for a, b in value)
        if value and isinstance(value[0], tuple):
            return ", ".join(":".join(_show(v) for v in item) for item in value)
        return ", ".join(_show(v) for v in value)
    return str(value)


def _opt(parse, doc: str):
    return {"parse": parse, "doc": doc}


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    source: str = field(default="synthetic", metadata=_opt(str, "synthetic | csv"))
    data_dir: str = field(default="", metadata=_opt(str, "directory of per-condition CSVs"))
    test_data_dir: str = field(default="", metadata=_opt(str, "testing-condition CSVs (cross-equipment)"))
    test_label_map: tuple = field(default=(), metadata=_opt(_label_map, "src:dst label pairs for test data"))
    num_classes: int = field(default=4, metadata=_opt(_int, "synthetic classes"))
    windows_per_class: int = field(default=40, metadata=_opt(_int, "synthetic windows per class"))
    conditions: tuple = field(default=SyntheticConfig().conditions,
                              metadata=_opt(_triples, "speed:noise:amplitude per condition"))
    data_seed: int = field(default=0, metadata=_opt(_int, "synthetic generator seed"))
    base_cycles: float = field(default=SyntheticConfig.base_cycles, metadata=_opt(_float, ""))
    class_spacing: float = field(default=SyntheticConfig.class_spacing, metadata=_opt(_float, ""))
    impulse_strength: float = field(default=SyntheticConfig.impulse_strength, metadata=_opt(_float, ""))
    resonance_cycles: float = field(default=SyntheticConfig.resonance_cycles, metadata=_opt(_float, ""))
    jitter: float = field(default=SyntheticConfig.jitter, metadata=_opt(_float, ""))
    # model
    input_length: int = field(default=1024, metadata=_opt(_int, "window length"))
    conv_units: tuple = field(default=((16, 3, 2), (32, 3, 2), (32, 3, 2)),
                              metadata=_opt(lambda t: _triples(t, int), "channels:kernel:pool"))
    hidden_dim: int = field(default=256, metadata=_opt(_int, "first FC width"))
    # episodes
    n_way: int = field(default=4, metadata=_opt(_int, "classes per task"))
    shots: tuple = field(default=(1, 3, 5), metadata=_opt(_ints, "support shots K"))
    q_query: int = field(default=10, metadata=_opt(_int, "query windows per class"))
    # training
    methods: tuple = field(default=METHODS, metadata=_opt(_words, "methods to run"))
    alpha: float = field(default=HyperParams.alpha, metadata=_opt(_float, ""))
    beta: float = field(default=HyperParams.beta, metadata=_opt(_float, ""))
    gamma: float = field(default=HyperParams.gamma, metadata=_opt(_float, ""))
    delta: float = field(default=HyperParams.delta, metadata=_opt(_float, ""))
    eta: float = field(default=HyperParams.eta, metadata=_opt(_float, ""))
    mu: float = field(default=HyperParams.mu, metadata=_opt(_float, ""))
    encoder_steps: int = field(default=HyperParams.encoder_steps, metadata=_opt(_int, ""))
    finetune_steps: int = field(default=HyperParams.finetune_steps, metadata=_opt(_int, ""))
    rounds: int = field(default=1000, metadata=_opt(_int, "communication rounds T"))
    grad_mode: str = field(default="second", metadata=_opt(str, "first | second"))
    resample_episodes: bool = field(default=True, metadata=_opt(_bool, ""))
    # protocol
    folds: object = field(default="auto", metadata=_opt(_folds, "auto | train>test; ..."))
    seeds: tuple = field(default=(0, 1, 2, 3, 4), metadata=_opt(_ints, "master seeds"))
    save_checkpoints: bool = field(default=True, metadata=_opt(_bool, ""))
    out: str = field(default="results", metadata=_opt(str, "output directory"))

    # ------------------------------------------------------------ layering

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def with_text(self, text: str, origin: str = "config") -> ExperimentConfig:
        parser = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#",),
                                           inline_comment_prefixes=("#",), interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string("[config]\n" + text, source=origin)
        except configparser.Error as exc:
            raise ConfigError(f"{origin}: {exc}") from None
        return self.with_pairs(parser.items("config"), origin)

    def with_pairs(self, pairs, origin: str = "--set") -> ExperimentConfig:
        known = {f.name: f for f in fields(self)}
        updates = {}
        for key, raw in pairs:
            key = key.strip()
            if key not in known:
                raise ConfigError(f"{origin}: unknown config key {key!r}")
            try:
                updates[key] = known[key].metadata["parse"](raw.strip())
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{origin}: bad value for {key!r}: {exc}") from None
        return replace(self, **updates)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_show(getattr(self, f.name))}\n" for f in fields(self))

    # ------------------------------------------------------------ derived objects

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(
            num_classes=self.num_classes, conditions=self.conditions,
            windows_per_class=self.windows_per_class, input_length=self.input_length,
            seed=self.data_seed, base_cycles=self.base_cycles, class_spacing=self.class_spacing,
            impulse_strength=self.impulse_strength, resonance_cycles=self.resonance_cycles,
            jitter=self.jitter,
        )

    def hyperparams(self) -> HyperParams:
        return HyperParams(alpha=self.alpha, beta=self.beta, gamma=self.gamma, delta=self.delta,
                           eta=self.eta, mu=self.mu, encoder_steps=self.encoder_steps,
                           finetune_steps=self.finetune_steps, rounds=self.rounds,
                           grad_mode=GradMode(self.grad_mode),
                           resample_episodes=self.resample_episodes)

    def arch(self) -> ArchitectureSpec:
        return ArchitectureSpec(self.input_length, self.n_way, self.conv_units, self.hidden_dim)

    def validate(self, need_data: bool = True) -> None:
        """Raise ConfigError on the first inconsistency."""
        checks = [
            (self.source in ("synthetic", "csv"), f"source must be synthetic or csv, got {self.source!r}"),
            (self.q_query >= 1, f"q_query must be >= 1, got {self.q_query}"),
            (self.rounds >= 0, f"rounds must be >= 0, got {self.rounds}"),
            (self.n_way >= 2, f"n_way must be >= 2, got {self.n_way}"),
            (bool(self.shots) and all(k >= 1 for k in self.shots), f"shots must be >= 1, got {self.shots}"),
            (bool(self.seeds), "seeds must not be empty"),
            (bool(self.methods), "methods must not be empty"),
            (self.grad_mode in ("first", "second"), f"grad_mode must be first or second, got {self.grad_mode!r}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {list(METHODS)}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError(f"duplicate methods in {list(self.methods)}")
        try:
            self.hyperparams()
            self.arch()
            if self.source == "synthetic":
                syn = self.synthetic()
                if syn.num_classes < self.n_way:
                    raise ConfigError(f"n_way {self.n_way} exceeds num_classes {syn.num_classes}")
        except (ValueError, DataError) as exc:
            raise ConfigError(str(exc)) from None
        if need_data:
            if self.source == "csv" and not Path(self.data_dir).is_dir():
                raise ConfigError(f"data_dir {self.data_dir!r} does not exist")
            if self.test_data_dir and not Path(self.test_data_dir).is_dir():
                raise ConfigError(f"test_data_dir {self.test_data_dir!r} does not exist")
            if self.test_data_dir and self.folds == "auto":
                raise ConfigError("test_data_dir needs explicit folds (train>test; ...)")


def load_config(path: str | None, sets: Sequence[str] = ()) -> ExperimentConfig:
    """Defaults, then a config file or bundled profile name, then overrides."""
    cfg = ExperimentConfig()
    if path:
        p = Path(path)
        if p.is_file():
            cfg = cfg.with_text(p.read_text(encoding="utf-8"), str(p))
        elif path in PROFILES:
            text = resources.files("refml.profiles").joinpath(f"{path}.cfg").read_text(encoding="utf-8")
            cfg = cfg.with_text(text, f"{path}.cfg")
        else:
            raise ConfigError(f"config file {path!r} not found")
    pairs = []
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        pairs.append(tuple(item.split("=", 1)))
    return cfg.with_pairs(pairs)


# ---------------------------------------------------------------- datasets


def _read_dir(path: str, input_length: int) -> dict[int, ClientDataset]:
    files = sorted(Path(path).glob("*.csv"))
    if not files:
        raise ConfigError(f"no CSV files in {path!r}")
    out = {}
    for f in files:
        ds = ingest_csv(f, input_length)
        if ds.condition_id in out:
            raise DataError(f"{f}: condition {ds.condition_id} appears in more than one file")
        out[ds.condition_id] = ds
    return out


def load_datasets(cfg: ExperimentConfig) -> tuple[dict[int, ClientDataset], dict[int, ClientDataset] | None]:
    if cfg.source == "synthetic":
        train = {d.condition_id: d for d in generate_synthetic(cfg.synthetic())}
    else:
        train = _read_dir(cfg.data_dir, cfg.input_length)
    test = None
    if cfg.test_data_dir:
        test = _read_dir(cfg.test_data_dir, cfg.input_length)
        if cfg.test_label_map:
            mapping = dict(cfg.test_label_map)
            test = {c: d.relabel(mapping) for c, d in test.items()}
    return train, test


def resolve_folds(cfg: ExperimentConfig, train: dict, test: dict | None) -> list[FoldSpec]:
    if cfg.folds == "auto":
        return kfold_protocol(sorted(train))
    folds = [FoldSpec(a, b, cross_source=test is not None) for a, b in cfg.folds]
    test_pool = test if test is not None else train
    for f in folds:
        missing = [c for c in f.train_condition_ids if c not in train]
        missing += [c for c in f.test_condition_ids if c not in test_pool]
        if missing:
            raise ConfigError(f"folds reference unknown conditions {sorted(set(missing))}")
    try:
        return kfold_protocol(mode="explicit", folds=folds)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------- commands


def cmd_generate(cfg: ExperimentConfig, out: Path) -> list[Path]:
    """One CSV per synthetic condition; the same seed rewrites identical bytes."""
    if cfg.source != "synthetic":
        raise ConfigError("generate needs source = synthetic")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for ds in generate_synthetic(cfg.synthetic()):
        path = out / f"condition_{ds.condition_id}.csv"
        export_csv(ds, path)
        written.append(path)
    return written


def planned_artifacts(cfg: ExperimentConfig, n_folds: int, n_test: dict[int, int]) -> list[str]:
    names = ["manifest.txt", "results.csv", "summary.csv"]
    if cfg.save_checkpoints:
        for cells in plan_cells(cfg.methods, cfg.shots, n_folds, cfg.seeds):
            for cell in cells:
                for i in range(n_test[cell.fold]):
                    p = _cell_path("checkpoints", cell, i)
                    names += [str(p), str(p.with_suffix(".meta"))]
    return names


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def cmd_run(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> int:
    train, test = load_datasets(cfg)
    folds = resolve_folds(cfg, train, test)
    hp, arch = cfg.hyperparams(), cfg.arch()
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoints" if cfg.save_checkpoints else None
    if ckpt is not None:
        ckpt.mkdir(exist_ok=True)
    n_test = {i: len(f.test_condition_ids) for i, f in enumerate(folds, start=1)}
    manifest = out / "manifest.txt"
    header = [
        "# run manifest; reuse with: refml run --config manifest.txt",
        f"# code_version = refml {__version__}",
        f"# master_seeds = {_show(cfg.seeds)}",
        f"# started = {_now()}",
        f"# folds = {'; '.join(f'{_show(f.train_condition_ids)} > {_show(f.test_condition_ids)}' for f in folds)}",
    ]
    header += [f"# artifact = {a}" for a in planned_artifacts(cfg, len(folds), n_test)]
    manifest.write_text("\n".join(header) + "\n" + cfg.to_text(), encoding="utf-8")

    errors: list = []
    table = run_suite(cfg.methods, cfg.shots, folds, cfg.seeds, train, hp, arch, cfg.n_way,
                      cfg.q_query, jobs=jobs, test_datasets=test, checkpoint_dir=ckpt,
                      errors=errors)
    (out / "results.csv").write_text(table.to_csv(), encoding="utf-8")
    (out / "summary.csv").write_text(table.summary_csv(), encoding="utf-8")
    tail = [f"# finished = {_now()}"]
    tail += [f"# failed_cell = {c.method} k={c.shots} fold={c.fold} seed={c.seed}: {e}" for c, e in errors]
    with open(manifest, "a", encoding="utf-8") as fh:
        fh.write("\n".join(tail) + "\n")
    print(table.summary_csv(), end="")
    if errors:
        print(f"{len(errors)} cell(s) failed; see {manifest}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _infer_arch(entries: dict[str, np.ndarray]) -> ArchitectureSpec | None:
    """Rebuild the spec assuming pool-2 units, as every bundled profile uses."""
    try:
        convs = []
        i = 1
        while f"encoder.conv{i}.weight" in entries:
            ch, _, k = entries[f"encoder.conv{i}.weight"].shape
            convs.append((ch, k, 2))
            i += 1
        hidden, flat = entries["predictor.fc1.weight"].shape
        n = entries["predictor.fc2.weight"].shape[0]
        length = flat // convs[-1][0] * 2 ** len(convs)
        return ArchitectureSpec(length, n, tuple(convs), hidden)
    except (KeyError, IndexError, ValueError):
        return None


def cmd_inspect(path: str) -> str:
    digest, entries = read_checkpoint(path)
    lines = [f"checkpoint: {path}", f"spec hash: {digest.hex()}"]
    arch = _infer_arch(entries)
    if arch is not None and arch.digest() == digest:
        lines.append(f"architecture: input {arch.input_length}, conv units {_show(arch.conv_units)}"
                     f", hidden {arch.hidden_dim}, classes {arch.num_classes} (hash verified)")
    try:
        params = ParamSet(entries, arch=arch)
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    lines.append("parameters:")
    width = max(len(k) for k in params)
    for k, v in params.items():
        lines.append(f"  {k:<{width}}  {params.tag(k):<9}  shape={tuple(v.shape)}  "
                     f"norm={float(np.linalg.norm(v)):.6g}")
    enc = sum(params[k].size for k in params.encoder_names)
    pred = sum(params[k].size for k in params.predictor_names)
    lines.append(f"partition: encoder {len(params.encoder_names)} entries / {enc} values, "
                 f"predictor {len(params.predictor_names)} entries / {pred} values")
    if "predictor.fc1.weight" in params and "predictor.fc2.weight" in params:
        hidden, flat = params["predictor.fc1.weight"].shape
        n = params["predictor.fc2.weight"].shape[0]
        lines.append(f"flatten length: {flat}")
        lines.append(f"embedding width: {hidden}")
        lines.append(f"predictor: {flat} -> {hidden} -> {n}")
    return "\n".join(lines)


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="refml", description="Federated meta-learning fault-diagnosis simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("generate", "write synthetic condition CSVs"),
                        ("run", "run the experiment suite")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="config file, or a bundled profile: paper, desk")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out", help="output directory (overrides the out key)")
        p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
        if name == "run":
            p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p = sub.add_parser("inspect", help="describe a checkpoint")
    p.add_argument("checkpoint")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "inspect":
            print(cmd_inspect(args.checkpoint))
            return EXIT_OK
        sets = list(args.set) + ([f"out={args.out}"] if args.out else [])
        cfg = load_config(args.config, sets)
        cfg.validate(need_data=args.command == "run")
        if args.dry_run:
            print(cfg.to_text(), end="")
            return EXIT_OK
        if args.command == "run" and args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
        if args.command == "generate":
            for p in cmd_generate(cfg, Path(cfg.out)):
                print(p)
            return EXIT_OK
        return cmd_run(cfg, Path(cfg.out), args.jobs)
    except (ConfigError, DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit code 2
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
