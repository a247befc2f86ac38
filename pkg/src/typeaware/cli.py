"""Command-line entry point: synth, split, train, eval, query and gradcheck stages.

Every stage reads an optional ``key = value`` config file, applies flags on
top, writes the resolved config into the output directory and holds a lock
file there while it runs. Errors end with a single line on stderr of the form
``error code=<n> kind=<kind> message=<json string>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

from .data import (DatasetError, SplitError, SyntheticSpec, disjoint_split, generate_synthetic,
                   load_dataset, load_split, outfit_split, save_dataset, save_split)
from .evaluation import SAMPLING_MODES, evaluate
from .gradcheck import run_suite
from .model import PROJECTION_KINDS, SCORE_MODES, EmbeddingModel, Hyperparams, ModelError
from .query import QueryError, compatible_diverse, interchangeable, recursive_swap, replace_item
from .trainer import CheckpointError, SamplingError, TrainConfig, fit, load_checkpoint

OUTPUT_ROOT_ENV = "TYPEAWARE_OUTPUT_ROOT"
COMMANDS = ("synth", "split", "train", "eval", "query", "gradcheck")
QUERY_KINDS = ("diverse", "interchangeable", "replace", "swap")
GRADCHECK_TOLERANCE = 1e-4

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_INPUT = 4
EXIT_RUNTIME = 5
EXIT_LOCKED = 6
EXIT_CHECK_FAILED = 7

SCORE_ALIASES = {"distance": "negative_distance", "metric": "learned_metric", "cosine": "cosine"}

log = logging.getLogger("typeaware")


class CliError(Exception):
    def __init__(self, kind: str, code: int, message: str):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt(conv):
    def parse(text: str):
        return None if text.strip().lower() in ("", "none") else conv(text)
    return parse


@dataclass
class RunConfig:
    out_dir: str = "run"
    seed: int = 0
    # synthetic data
    n_types: int = 6
    latent_dim: int = 12
    n_items: int = 2000
    n_outfits: int = 1000
    coords_per_pair: int = 2
    threshold: float = 0.5
    noise: float = 0.1
    image_dim: int = 24
    text_dim: int = 24
    outfit_size: tuple[int, ...] = (3, 4)
    mixing: str = "random"
    # files; relative paths live under the output directory
    items: str = "items.tsv"
    outfits: str = "outfits.tsv"
    split_file: str | None = None
    checkpoint: str | None = None
    report: str = "report.txt"
    # splitting
    split_mode: str = "outfit"
    fractions: tuple[float, ...] = (0.8, 0.1, 0.1)
    max_discard_fraction: float = 0.5
    # training
    epochs: int = 10
    triplets_per_epoch: int | None = None
    optimizer: str = "adam"
    margin: float = 0.2
    lambda1: float = 5e-4
    lambda2: float = 5e-4
    lambda3: float = 5e-5
    lambda4: float = 5e-4
    lambda5: float = 5e-4
    learning_rate: float = 5e-5
    batch_size: int = 256
    embed_dim: int = 64
    hidden: tuple[int, ...] = (256,)
    text_hidden: tuple[int, ...] = (256,)
    projection: str = "diag"
    score_mode: str = "negative_distance"
    sharing_ratio: int = 1
    use_vse: bool = True
    use_sim: bool = True
    # evaluation
    sampling_mode: str = "category_aware"
    negatives_multiplier: int = 1
    eval_split: str = "test"
    # queries
    query_kind: str = "diverse"
    item: str | None = None
    target_type: int | None = None
    outfit_id: str | None = None
    n: int = 5
    k: int | None = None
    epsilon: float | None = None
    # gradient check
    gradcheck_configs: int = 24

    def validate(self) -> None:
        choices = {"mixing": ("random", "identity"), "split_mode": ("outfit", "disjoint"),
                   "optimizer": ("adam", "sgd"), "projection": PROJECTION_KINDS,
                   "score_mode": SCORE_MODES, "sampling_mode": SAMPLING_MODES,
                   "eval_split": ("train", "val", "test"), "query_kind": QUERY_KINDS}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise CliError("config", EXIT_CONFIG,
                               f"{key} must be one of {', '.join(allowed)}; got {getattr(self, key)!r}")
        if len(self.fractions) != 3:
            raise CliError("config", EXIT_CONFIG, "fractions needs three values (train, val, test)")
        if len(self.outfit_size) != 2:
            raise CliError("config", EXIT_CONFIG, "outfit_size needs two values (min, max)")
        try:
            self.hyperparams()
            self.synthetic_spec()
            self.train_config()
        except (ModelError, ValueError) as exc:
            raise CliError("config", EXIT_CONFIG, str(exc)) from exc

    def hyperparams(self) -> Hyperparams:
        names = {f.name for f in fields(Hyperparams)}
        return Hyperparams(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.hyperparams(), self.epochs, self.triplets_per_epoch, self.optimizer)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(self.n_types, self.latent_dim, self.n_items, self.n_outfits,
                             self.coords_per_pair, None, self.threshold, self.noise, self.image_dim,
                             self.text_dim, tuple(self.outfit_size), self.mixing, self.seed)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ", ".join(repr(v) for v in value)
            lines.append(f"{f.name} = {'none' if value is None else value}")
        return "\n".join(lines) + "\n"


_PARSERS = {
    "int": int, "float": float, "str": str, "bool": _bool,
    "tuple[int, ...]": _ints, "tuple[float, ...]": _floats,
    "str | None": _opt(str), "int | None": _opt(int), "float | None": _opt(float),
}


def _parser_for(name: str):
    return _PARSERS[next(f.type for f in fields(RunConfig) if f.name == name)]


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment line."""
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError("config", EXIT_CONFIG, f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise CliError("config", EXIT_CONFIG, f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _parser_for(key)(value)
        except ValueError as exc:
            raise CliError("config", EXIT_CONFIG, f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def resolve_config(file: str | os.PathLike | None, flags: dict) -> RunConfig:
    """Defaults, then the config file, then flags that were actually given."""
    merged = {}
    if file is not None:
        try:
            text = Path(file).read_text(encoding="utf-8")
        except OSError as exc:
            raise CliError("input", EXIT_INPUT, f"cannot read config {file}: {exc.strerror}") from exc
        merged.update(parse_config_text(text, str(file)))
    merged.update({k: v for k, v in flags.items() if v is not None})
    config = RunConfig(**merged)
    config.validate()
    return config


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", EXIT_USAGE, message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="typeaware", description=__doc__.splitlines()[0], allow_abbrev=False)
    parser.add_argument("command", choices=COMMANDS, metavar="command", help=" | ".join(COMMANDS))
    parser.add_argument("--config", help="key = value file")
    parser.add_argument("-v", "--verbose", action="store_true")
    named = {"projection", "score_mode", "sharing_ratio", "use_vse", "use_sim"}
    for f in fields(RunConfig):
        if f.name in named:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            parser.add_argument(flag, dest=f.name, type=_bool, default=None)
        else:
            parser.add_argument(flag, dest=f.name, type=_parser_for(f.name), default=None)
    parser.add_argument("--projection", choices=PROJECTION_KINDS, default=None)
    parser.add_argument("--score", dest="score_mode", choices=sorted(SCORE_ALIASES), default=None)
    parser.add_argument("--share-ratio", dest="sharing_ratio", type=int, default=None)
    parser.add_argument("--no-vse", dest="use_vse", action="store_const", const=False, default=None)
    parser.add_argument("--no-sim", dest="use_sim", action="store_const", const=False, default=None)
    return parser


# -- output directory ---------------------------------------------------------


def output_dir(config: RunConfig) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    out = Path(config.out_dir)
    return out if root is None or out.is_absolute() else Path(root) / out


class DirectoryLock:
    """Exclusive ownership of an output directory via an O_EXCL lock file."""

    def __init__(self, directory: Path):
        self.path = directory / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError("locked", EXIT_LOCKED,
                           f"{self.path} exists; another run owns this directory") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _path(out: Path, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else out / p


def _require(config: RunConfig, *keys: str) -> None:
    missing = [k for k in keys if getattr(config, k) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise CliError("usage", EXIT_USAGE, f"missing required {flags}")


# -- stages -------------------------------------------------------------------


def _load_data(config: RunConfig, out: Path):
    return load_dataset(_path(out, config.items), _path(out, config.outfits))


def _load_model(config: RunConfig, out: Path, dataset):
    ckpt = load_checkpoint(_path(out, config.checkpoint))
    return EmbeddingModel(ckpt.params, dataset.items)


def cmd_synth(config: RunConfig, out: Path) -> str:
    dataset, _ = generate_synthetic(config.synthetic_spec())
    save_dataset(dataset, _path(out, config.items), _path(out, config.outfits))
    return f"items: {len(dataset.items)}\noutfits: {len(dataset.outfits)}\n"


def cmd_split(config: RunConfig, out: Path) -> str:
    dataset = _load_data(config, out)
    if config.split_mode == "disjoint":
        split = disjoint_split(dataset, config.fractions, config.max_discard_fraction)
    else:
        split = outfit_split(dataset, config.fractions, config.seed)
    save_split(split, _path(out, config.split_file or "split.tsv"))
    counts = {s: len(split.outfit_ids(s)) for s in ("train", "val", "test")}
    return "".join(f"{s}: {n}\n" for s, n in counts.items()) + f"discarded: {len(split.discarded)}\n"


def cmd_train(config: RunConfig, out: Path) -> str:
    dataset = _load_data(config, out)
    split = load_split(_path(out, config.split_file), dataset) if config.split_file else None
    train = config.train_config()
    train.checkpoint_path = str(_path(out, config.checkpoint or "model.ckpt"))
    ckpt = fit(dataset, train, split)
    last = ckpt.history[-1]
    return f"checkpoint: {train.checkpoint_path}\nsteps: {ckpt.step}\nfinal_total: {last['total']!r}\n"


def cmd_eval(config: RunConfig, out: Path) -> str:
    _require(config, "checkpoint", "split_file")
    dataset = _load_data(config, out)
    split = load_split(_path(out, config.split_file), dataset)
    model = _load_model(config, out, dataset)
    report = evaluate(model, dataset, split, config.seed, config.sampling_mode,
                      config.negatives_multiplier, config.eval_split)
    report.write(_path(out, config.report))
    return report.to_text()


def cmd_query(config: RunConfig, out: Path) -> str:
    _require(config, "checkpoint")
    dataset = _load_data(config, out)
    model = _load_model(config, out, dataset)
    kind = config.query_kind
    if kind in ("diverse", "interchangeable"):
        _require(config, "item")
        if config.item not in dataset.items:
            raise CliError("input", EXIT_INPUT, f"unknown item {config.item!r}")
        if kind == "interchangeable":
            return interchangeable(model, config.item, config.n).to_text()
        _require(config, "target_type")
        return compatible_diverse(model, config.item, config.target_type, config.n, config.k).to_text()
    _require(config, "outfit_id")
    outfit = next((o for o in dataset.outfits if o.outfit_id == config.outfit_id), None)
    if outfit is None:
        raise CliError("input", EXIT_INPUT, f"unknown outfit {config.outfit_id!r}")
    if kind == "replace":
        _require(config, "item")
        return replace_item(model, outfit, config.item, config.n, config.epsilon).to_text()
    lines = ["step\theld\treplacement\tscore\toutfit"]
    for n, step in enumerate(recursive_swap(model, outfit, config.seed, config.epsilon), 1):
        lines.append(f"{n}\t{step.held}\t{step.replacement or '-'}\t{step.score!r}\t{' '.join(step.outfit.items)}")
    return "\n".join(lines) + "\n"


def cmd_gradcheck(config: RunConfig, out: Path) -> str:
    result = run_suite(config.seed, config.gradcheck_configs)
    if not result.max_rel_error < GRADCHECK_TOLERANCE:
        raise CliError("gradcheck", EXIT_CHECK_FAILED,
                       f"max relative error {result.max_rel_error:.3g} at {result.worst}")
    return result.to_text()


STAGES = {"synth": cmd_synth, "split": cmd_split, "train": cmd_train, "eval": cmd_eval,
          "query": cmd_query, "gradcheck": cmd_gradcheck}


def _flags(ns: argparse.Namespace) -> dict:
    skip = {"command", "config", "verbose"}
    flags = {k: v for k, v in vars(ns).items() if k not in skip}
    if flags.get("score_mode") is not None:
        flags["score_mode"] = SCORE_ALIASES[flags["score_mode"]]
    return flags


def run(argv: Sequence[str] | None = None) -> int:
    try:
        ns = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        config = resolve_config(ns.config, _flags(ns))
        out = output_dir(config)
        out.mkdir(parents=True, exist_ok=True)
        with DirectoryLock(out):
            (out / f"{ns.command}.config").write_text(config.to_text(), encoding="utf-8")
            sys.stdout.write(STAGES[ns.command](config, out))
        return 0
    except CliError as exc:
        return _fail(exc.kind, exc.code, str(exc))
    except (DatasetError, CheckpointError, OSError) as exc:
        return _fail("input", EXIT_INPUT, str(exc))
    except (SplitError, SamplingError, QueryError, ModelError) as exc:
        return _fail("runtime", EXIT_RUNTIME, str(exc))


def _fail(kind: str, code: int, message: str) -> int:
    print(f"error code={code} kind={kind} message={json.dumps(message)}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())
