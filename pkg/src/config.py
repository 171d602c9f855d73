import argparse
import configparser
import dataclasses
import hashlib
import logging
import os
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

THREADS_ENV = "SHARPFIELD_THREADS"

COMMANDS = (
    "fit-geodesic",
    "learn-medial",
    "feature-from-mesh",
    "feature-from-points",
    "fit-mesh",
    "fit-points-normals",
    "fit-points",
    "extract",
    "sample-field",
    "boolean",
    "eval",
)

# settings that never change the result of a run
_VOLATILE = ("threads", "verbose", "out")


def setup_logging(verbose: bool = False):
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )
    return logging.getLogger("sharpfield")


class ConfigError(ValueError):
    """Bad command line, config file or setting value."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def resolve_threads(flag: Optional[int]) -> int:
    """``--threads``, else ``SHARPFIELD_THREADS``, else the CPU count."""
    if flag is not None:
        if flag < 1:
            raise ConfigError("--threads must be at least 1")
        return flag
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            threads = int(env)
        except ValueError as e:
            raise ConfigError(f"{THREADS_ENV}={env!r} is not an integer") from e
        if threads < 1:
            raise ConfigError(f"{THREADS_ENV} must be at least 1")
        return threads
    return os.cpu_count() or 1


def read_config_file(path: Path, command: str) -> dict[str, str]:
    """``[common]`` then ``[<command>]`` keys from an INI-style file."""
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} not found")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    settings: dict[str, str] = {}
    for section in ("common", command):
        if parser.has_section(section):
            settings.update(parser.items(section))
    return settings


def config_hash(cfg: "RunConfig") -> str:
    """SHA-256 of the sorted ``key=value`` dump of everything that shapes the output."""
    items = {"command": cfg.command, "seed": str(cfg.seed)}
    items.update({f"input{i}": Path(p).name for i, p in enumerate(cfg.inputs) if p is not None})
    items.update({k: v for k, v in cfg.settings.items() if k not in _VOLATILE})
    dump = "\n".join(f"{k}={items[k]}" for k in sorted(items))
    return hashlib.sha256(dump.encode("utf-8")).hexdigest()


def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(text: str, hint, current):
    if typing.get_origin(hint) is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if text.strip().lower() in ("none", ""):
            return None
        hint = args[0]
    if hint is bool:
        return _parse_bool(text)
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    if hint is str:
        return text.strip()
    if hint is tuple or typing.get_origin(hint) is tuple or isinstance(current, tuple):
        return tuple(float(t) for t in text.replace(",", " ").split())
    raise ValueError(f"cannot set a value of type {hint}")


@dataclass
class RunConfig:
    command: str
    inputs: list[Optional[str]] = field(default_factory=list)
    out: Path = Path("out")
    seed: int = 0
    threads: int = 1
    verbose: bool = False
    config_file: Optional[Path] = None
    settings: dict[str, str] = field(default_factory=dict)
    consumed: set[str] = field(default_factory=set)

    @property
    def hash(self) -> str:
        return config_hash(self)

    def setting(self, key: str, default=None, kind=str):
        if key not in self.settings:
            return default
        self.consumed.add(key)
        try:
            return _coerce(self.settings[key], kind, default)
        except ValueError as e:
            raise ConfigError(f"setting {key}: {e}") from e

    def configure(self, base, prefix: str = ""):
        """Copy of dataclass ``base`` with matching settings applied.

        Nested dataclass fields are addressed as ``<field>.<name>``.
        """
        hints = typing.get_type_hints(type(base))
        changes = {}
        for f in dataclasses.fields(base):
            key = prefix + f.name
            current = getattr(base, f.name)
            if dataclasses.is_dataclass(current):
                nested = self.configure(current, key + ".")
                if nested is not current:
                    changes[f.name] = nested
            elif key in self.settings:
                changes[f.name] = self.setting(key, current, hints[f.name])
        if not changes:
            return base
        try:
            return dataclasses.replace(base, **changes)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid settings for {type(base).__name__}: {e}") from e

    def check_unused(self):
        unused = sorted(set(self.settings) - self.consumed - set(_VOLATILE) - {"seed"})
        if unused:
            raise ConfigError(f"unknown settings for {self.command}: {', '.join(unused)}")

    @classmethod
    def from_args(cls, argv: Optional[Sequence[str]] = None) -> "RunConfig":
        args = _collect_inputs(build_parser().parse_args(argv))
        settings: dict[str, str] = {}
        config_file = Path(args.config) if args.config else None
        if config_file is not None:
            settings.update(read_config_file(config_file, args.command))
        for item in args.set or []:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, value = item.split("=", 1)
            settings[key.strip()] = value.strip()
        for key, value in _flag_settings(args).items():
            if value is not None:
                settings[key] = str(value)

        seed = args.seed
        if seed is None:
            try:
                seed = int(settings.get("seed", 0))
            except ValueError as e:
                raise ConfigError(f"seed must be an integer, got {settings['seed']!r}") from e
        if seed < 0:
            raise ConfigError("seed must be non-negative")
        threads_setting = settings.get("threads")
        threads = resolve_threads(args.threads if args.threads is not None else (
            int(threads_setting) if threads_setting else None
        ))

        inputs = list(args.inputs)
        for p in inputs:
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(f"input {p} not found")
        return cls(
            command=args.command,
            inputs=inputs,
            out=Path(args.out),
            seed=seed,
            threads=threads,
            verbose=args.verbose,
            config_file=config_file,
            settings=settings,
        )


def _flag_settings(args: argparse.Namespace) -> dict[str, Optional[object]]:
    """Subcommand flags as settings keys (the dataclass field they override)."""
    flags = vars(args)
    mapping = {
        "iters": "sampling.epochs" if args.command.startswith("fit-") and args.command != "fit-geodesic" else "iterations",
        "freeze": "freeze_iterations",
        "activation": "activation",
        "batch": "batch_size",
        "lr": "lr",
        "radius": "radius",
        "threshold": "threshold_degrees",
        "half_width": "half_width",
        "res": "resolution",
        "bbox": "bbox",
        "op": "op",
        "samples": "samples",
        "fscore_radius": "fscore_radius",
        "log_every": "log_every",
    }
    settings = {key: flags.get(name) for name, key in mapping.items() if name in flags}
    if flags.get("no_features"):
        settings["use_features"] = "false"
    if flags.get("fixed_features"):
        settings["learn_features"] = "false"
    if flags.get("learned_features"):
        settings["learn_features"] = "true"
    if flags.get("merge_channels"):
        settings["merge_channels"] = "true"
    if isinstance(settings.get("bbox"), list):
        settings["bbox"] = " ".join(str(v) for v in settings["bbox"])
    return settings


def _common(parser: argparse.ArgumentParser):
    parser.add_argument("--out", "-o", default="out", help="Output directory (default: out)")
    parser.add_argument("--seed", type=int, default=None, help="Random seed (default: 0)")
    parser.add_argument("--threads", "-j", type=int, default=None, help=f"Worker threads (default: ${THREADS_ENV} or CPU count)")
    parser.add_argument("--config", "-c", default=None, help="INI file with [common] and [<command>] sections")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override one setting (repeatable)")
    parser.add_argument("--verbose", "-v", action="store_true", help="Enable verbose debug logging")


def _training(parser: argparse.ArgumentParser, default_activation: str):
    parser.add_argument("--iters", type=int, default=None, help="Training iterations / epochs")
    parser.add_argument("--lr", type=float, default=None, help="Adam learning rate for the network")
    parser.add_argument(
        "--activation", choices=("softplus", "relu", "sine"), default=None,
        help=f"Hidden activation (default: {default_activation})",
    )
    parser.add_argument("--no-features", action="store_true", help="Plain MLP without feature inputs")
    parser.add_argument("--merge-channels", action="store_true", help="Put all feature elements on one channel")
    parser.add_argument("--log-every", type=int, default=None, help="Iterations between log rows (default: 100)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="sharpfield",
        description="sharpfield: neural fields that stay C0 but not C1 across a learnable feature set",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  sharpfield fit-geodesic --iters 20000            Geodesic distance around a disk
  sharpfield learn-medial --out runs/medial        Learn the medial axis of a rectangle
  sharpfield feature-from-mesh cube.obj -o f       Sharp edges and strips of a mesh
  sharpfield fit-mesh cube.obj f/strips.obj -o m   SDF with feature strips
  sharpfield extract m/model.snm m/features.obj    Dual-contoured mesh
  sharpfield eval cube.obj m/mesh.obj              Chamfer/Hausdorff/normal/F-score
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("fit-geodesic", help="Fit the geodesic distance field past a disk obstacle")
    _common(p)
    _training(p, "softplus")
    p.add_argument("--batch", type=int, default=None, help="Samples per iteration (default: 4096)")
    p.set_defaults(inputs=[])

    p = sub.add_parser("learn-medial", help="Fit a rectangle's distance field and learn its medial axis")
    _common(p)
    _training(p, "softplus")
    p.add_argument("--batch", type=int, default=None, help="Samples per iteration (default: 4096)")
    p.add_argument("--freeze", type=int, default=None, help="Iterations before the axis may move (default: 10000)")
    p.add_argument("--fixed-features", action="store_true", help="Never move the axis")
    p.set_defaults(inputs=[])

    p = sub.add_parser("feature-from-mesh", help="Sharp-edge graph and feature strips of a mesh")
    _common(p)
    p.add_argument("mesh", help="Input OBJ mesh")
    p.add_argument("--threshold", type=float, default=None, help="Sharpness threshold in degrees (default: 30)")
    p.add_argument("--half-width", type=float, default=None, help="Strip half-width (default: 0.04)")
    p.set_defaults(inputs_from=("mesh",))

    p = sub.add_parser("feature-from-points", help="Feature strips from a point cloud and its sharp graph")
    _common(p)
    p.add_argument("cloud", help="Input XYZ point cloud")
    p.add_argument("graph", nargs="?", default=None, help="Sharp curves as FG (estimated when omitted)")
    p.add_argument("--half-width", type=float, default=None, help="Strip half-width (default: 0.04)")
    p.set_defaults(inputs_from=("cloud", "graph"))

    for name, what in (
        ("fit-mesh", "an OBJ mesh"),
        ("fit-points-normals", "an oriented XYZ point cloud"),
        ("fit-points", "an unoriented XYZ point cloud"),
    ):
        p = sub.add_parser(name, help=f"Fit an SDF to {what}")
        _common(p)
        _training(p, "sine")
        p.add_argument("shape", help="OBJ mesh or XYZ cloud")
        p.add_argument("features", nargs="?", default=None, help="Strip OBJ from feature-from-*")
        p.add_argument("--radius", type=float, default=None, help="Mollifier radius (default: 0.1)")
        p.add_argument("--fixed-features", action="store_true", help="Keep the strips where they are")
        p.add_argument("--learned-features", action="store_true", help="Move the strips during training")
        p.set_defaults(inputs_from=("shape", "features"))

    for name, what in (("extract", "Extract the zero level (mesh or iso-curves)"), ("sample-field", "Sample a field on a grid")):
        p = sub.add_parser(name, help=what)
        _common(p)
        p.add_argument("checkpoint", help="Model checkpoint")
        p.add_argument("features", nargs="?", default=None, help="Feature file saved with the model")
        p.add_argument("--res", type=int, default=None, help="Grid nodes per axis")
        p.add_argument("--bbox", type=float, nargs="+", default=None, help="Box as min... max...")
        p.set_defaults(inputs_from=("checkpoint", "features"))

    p = sub.add_parser("boolean", help="Sample a union/intersection/difference of two SDFs")
    _common(p)
    p.add_argument("checkpoint_a")
    p.add_argument("checkpoint_b")
    p.add_argument("--features-a", default=None, help="Feature file of the first model")
    p.add_argument("--features-b", default=None, help="Feature file of the second model")
    p.add_argument("--op", choices=("union", "intersect", "diffAB", "diffBA"), default=None, help="Operation (default: union)")
    p.add_argument("--res", type=int, default=None, help="Grid nodes per axis (default: 64)")
    p.add_argument("--bbox", type=float, nargs="+", default=None, help="Box as min... max...")
    p.set_defaults(inputs_from=("checkpoint_a", "checkpoint_b", "features_a", "features_b"))

    p = sub.add_parser("eval", help="Compare a mesh (or a checkpoint) against a reference mesh")
    _common(p)
    p.add_argument("reference", help="Reference OBJ mesh")
    p.add_argument("candidate", help="Candidate OBJ mesh or model checkpoint")
    p.add_argument("features", nargs="?", default=None, help="Feature file when the candidate is a checkpoint")
    p.add_argument("--samples", type=int, default=None, help="Surface samples per mesh (default: 100000)")
    p.add_argument("--fscore-radius", type=float, default=None, help="F-score distance threshold (default: 0.005)")
    p.add_argument("--res", type=int, default=None, help="Extraction resolution for checkpoints (default: 128)")
    p.set_defaults(inputs_from=("reference", "candidate", "features"))

    return parser


def _collect_inputs(args: argparse.Namespace) -> argparse.Namespace:
    if not hasattr(args, "inputs"):
        args.inputs = [getattr(args, name) for name in args.inputs_from]
    return args

