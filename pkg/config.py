"""
kafforge - Configuration
========================
Run configs are flat `section.key = value` files (sections: data, network,
kaf, train, output). They are tokenised with python-dotenv's stream parser,
which keeps the source line of every binding for diagnostics.

Runtime knobs come from the environment (a `.env` file is honoured by the
CLI through load_dotenv):

    KAFFORGE_THREADS   cap on internal parallelism (default 1)
    KAFFORGE_VERBOSE   1 prints training progress, 0 silences it (default 1)
"""

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

from dotenv.parser import parse_stream

from data import GENERATORS, gen_blobs, gen_glyphs, load_csv_dataset, load_icrd
from errors import ConfigError, DomainError
from kaf import KafConfig
from kernels import RQVariant
from nn import ActivationKind, build_cnn, build_icr_cnn, build_mlp, kaf_config_for
from train import TrainConfig

# ============================================================================
# ENVIRONMENT
# ============================================================================


def runtime_threads():
    raw = os.getenv("KAFFORGE_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError:
        threads = 0
    if threads < 1:
        raise ConfigError(f"KAFFORGE_THREADS must be a positive integer, got '{raw}'")
    return threads


def runtime_verbose():
    return os.getenv("KAFFORGE_VERBOSE", "1").strip().lower() not in ("0", "false", "no", "")


# ============================================================================
# VALUE CONVERTERS
# ============================================================================

def _bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got '{text}'")


def _int_list(text):
    return tuple(int(part) for part in text.replace("x", ",").split(",") if part.strip())


def _str_list(text):
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _choice(*options):
    def convert(text):
        value = text.strip().lower()
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got '{text}'")
        return value
    return convert


def _str(text):
    return text.strip()


# section.key -> converter
SCHEMA = {
    "data.generator": _choice(*GENERATORS),
    "data.icrd": _str,
    "data.csv": _str,
    "data.classes": int,
    "data.height": int,
    "data.width": int,
    "data.n_per_class": int,
    "data.dim": int,
    "data.spread": float,
    "data.noise": float,
    "data.max_shift": int,
    "data.seed": int,
    "data.n_val": int,
    "data.n_test": int,
    "data.split_seed": int,
    "network.arch": _choice("mlp", "cnn", "icr_cnn"),
    "network.activation": _choice(*(kind.value for kind in ActivationKind)),
    "network.hidden": _int_list,
    "network.filters": _int_list,
    "network.dense": _int_list,
    "network.kernel_size": int,
    "network.width_scale": float,
    "network.batchnorm": _bool,
    "network.dropout": float,
    "network.input_shape": _int_list,
    "network.classes": int,
    "kaf.size": int,
    "kaf.lo": float,
    "kaf.hi": float,
    "kaf.kernels": _str_list,
    "kaf.gamma": float,
    "kaf.c": float,
    "kaf.rq_variant": _choice(*(variant.value for variant in RQVariant)),
    "kaf.epsilon": float,
    "train.lambda": float,
    "train.batch_size": int,
    "train.eval_every": int,
    "train.patience": int,
    "train.lr": float,
    "train.adam_beta1": float,
    "train.adam_beta2": float,
    "train.adam_eps": float,
    "train.max_iters": int,
    "train.seed": int,
    "output.dir": _str,
}

DATA_SOURCES = ("data.generator", "data.icrd", "data.csv")


class Bindings:
    """Converted values of one config file plus the line each came from"""

    def __init__(self, values, lines, path):
        self.values = values
        self.lines = lines
        self.path = path

    def get(self, key, default=None):
        return self.values.get(key, default)

    def __contains__(self, key):
        return key in self.values

    def error(self, message, key=None):
        return ConfigError(message, self.lines.get(key), key)


def read_bindings(path, allowed_sections=None):
    """Tokenise and convert a config file; every problem names its line"""
    path = Path(path)
    values, lines = {}, {}
    with open(path, encoding="utf-8") as stream:
        for binding in parse_stream(stream):
            line = binding.original.line
            if binding.error:
                raise ConfigError(f"cannot parse '{binding.original.string.strip()}'", line)
            key = binding.key
            if key is None:
                continue
            if binding.value is None:
                raise ConfigError("expected 'section.key = value'", line, key)
            section = key.partition(".")[0]
            if allowed_sections is not None and section not in allowed_sections:
                raise ConfigError(f"unexpected section '{section}'", line, key)
            if key not in SCHEMA:
                raise ConfigError("unknown setting", line, key)
            if key in values:
                raise ConfigError(f"duplicate setting (first on line {lines[key]})", line, key)
            try:
                values[key] = SCHEMA[key](binding.value)
            except ValueError as e:
                raise ConfigError(f"bad value '{binding.value}': {e}", line, key) from e
            lines[key] = line
    return Bindings(values, lines, path)


# ============================================================================
# CONFIG OBJECTS
# ============================================================================


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture choice plus KAF settings; the serialisable NetworkSpec"""

    arch: str = "mlp"
    activation: ActivationKind = ActivationKind.MULTIKAF
    hidden: Tuple[int, ...] = (32, 32)
    filters: Tuple[int, ...] = (8, 8)
    dense: Tuple[int, ...] = (32,)
    kernel_size: int = 5
    width_scale: Optional[float] = None
    batchnorm: Optional[bool] = None
    dropout: Optional[float] = None
    kaf: KafConfig = field(default_factory=KafConfig)

    def spec(self, input_shape, classes, seed=0):
        kind = ActivationKind(self.activation)
        batchnorm = bool(self.batchnorm)
        dropout = self.dropout or 0.0
        if self.arch == "mlp":
            return build_mlp(input_shape, self.hidden, classes, kind, self.kaf, batchnorm, dropout, seed)
        if self.arch == "cnn":
            if len(input_shape) != 3:
                raise DomainError(f"cnn needs (channels, H, W) inputs, got {input_shape}")
            return build_cnn(input_shape, self.filters, self.dense, classes, kind, self.kaf,
                             batchnorm, dropout, self.kernel_size, seed)
        return build_icr_cnn(kind, self.width_scale, input_shape, classes, self.kaf, seed)

    def to_lines(self, input_shape, classes):
        lines = [
            f"network.arch = {self.arch}",
            f"network.activation = {ActivationKind(self.activation).value}",
            f"network.input_shape = {','.join(str(d) for d in input_shape)}",
            f"network.classes = {classes}",
        ]
        if self.arch == "mlp":
            lines.append(f"network.hidden = {','.join(map(str, self.hidden))}")
        elif self.arch == "cnn":
            lines += [f"network.filters = {','.join(map(str, self.filters))}",
                      f"network.dense = {','.join(map(str, self.dense))}",
                      f"network.kernel_size = {self.kernel_size}"]
        elif self.width_scale is not None:
            lines.append(f"network.width_scale = {self.width_scale!r}")
        if self.arch != "icr_cnn":
            if self.batchnorm is not None:
                lines.append(f"network.batchnorm = {str(self.batchnorm).lower()}")
            if self.dropout is not None:
                lines.append(f"network.dropout = {self.dropout!r}")
        if ActivationKind(self.activation).trainable:
            k = self.kaf
            lines += [f"kaf.size = {k.size}", f"kaf.lo = {k.lo!r}", f"kaf.hi = {k.hi!r}",
                      f"kaf.kernels = {','.join(k.kernels)}", f"kaf.c = {k.c!r}",
                      f"kaf.rq_variant = {RQVariant(k.rq_variant).value}",
                      f"kaf.epsilon = {k.epsilon!r}"]
            if k.gamma is not None:
                lines.append(f"kaf.gamma = {k.gamma!r}")
        return lines


@dataclass(frozen=True)
class DataConfig:
    source: str
    location: str
    classes: Optional[int] = None
    height: Optional[int] = None
    width: Optional[int] = None
    n_per_class: int = 100
    dim: int = 2
    spread: float = 0.1
    noise: float = 0.02
    max_shift: int = 2
    seed: int = 0
    n_val: int = 200
    n_test: int = 200
    split_seed: int = 0

    def load(self):
        """Build or read the dataset this config points at"""
        if self.source == "icrd":
            return load_icrd(self.location)
        if self.source == "csv":
            return load_csv_dataset(self.location, self.classes, self.height, self.width)
        if self.location == "blobs":
            return gen_blobs(self.n_per_class, self.classes or 2, self.dim, self.spread, self.seed)
        return gen_glyphs(self.n_per_class, self.classes or 8, self.height or 16, self.width or 16,
                          self.noise, self.seed, self.max_shift)


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig
    train: TrainConfig
    data: DataConfig
    output_dir: Path


# ============================================================================
# PARSING
# ============================================================================

_TRAIN_KEYS = {
    "train.lambda": "lam", "train.batch_size": "batch_size", "train.eval_every": "eval_every",
    "train.patience": "patience", "train.lr": "lr", "train.adam_beta1": "adam_beta1",
    "train.adam_beta2": "adam_beta2", "train.adam_eps": "adam_eps",
    "train.max_iters": "max_iters", "train.seed": "seed",
}


def _network_config(b):
    activation = ActivationKind(b.get("network.activation", "multikaf"))
    arch = b.get("network.arch", "mlp")
    if arch == "icr_cnn":
        for key in ("network.batchnorm", "network.dropout", "network.hidden", "network.filters", "network.dense"):
            if key in b:
                raise b.error("fixed by the icr_cnn architecture", key)
    if "network.width_scale" in b and arch != "icr_cnn":
        raise b.error("only the icr_cnn architecture takes a width scale", "network.width_scale")
    dense = b.get("network.dense", (32,))
    default_kernels = kaf_config_for(activation).kernels
    try:
        kaf = KafConfig(
            size=b.get("kaf.size", 15),
            lo=b.get("kaf.lo", -3.0),
            hi=b.get("kaf.hi", 3.0),
            kernels=b.get("kaf.kernels", default_kernels),
            gamma=b.get("kaf.gamma"),
            c=b.get("kaf.c", 1.0),
            rq_variant=RQVariant(b.get("kaf.rq_variant", "paper_plus")),
            epsilon=b.get("kaf.epsilon", 1e-4),
        )
        if activation.trainable:
            kaf.kernel_specs()
        if activation is ActivationKind.KAF and len(kaf.kernels) != 1:
            raise DomainError("a plain kaf activation uses exactly one kernel")
    except DomainError as e:
        raise b.error(str(e), next((k for k in b.values if k.startswith("kaf.")), None)) from e
    try:
        return NetworkConfig(
            arch=arch,
            activation=activation,
            hidden=b.get("network.hidden", (32, 32)),
            filters=b.get("network.filters", (8, 8)),
            dense=dense,
            kernel_size=b.get("network.kernel_size", 5),
            width_scale=b.get("network.width_scale"),
            batchnorm=b.get("network.batchnorm"),
            dropout=b.get("network.dropout"),
            kaf=kaf,
        )
    except DomainError as e:
        raise b.error(str(e), "network.arch") from e


def _data_config(b):
    sources = [key for key in DATA_SOURCES if key in b]
    if len(sources) != 1:
        key = sources[1] if len(sources) > 1 else None
        raise b.error(f"exactly one data source required ({', '.join(DATA_SOURCES)}), found {len(sources)}", key)
    key = sources[0]
    location = b.get(key)
    source = key.partition(".")[2]
    if source != "generator":
        resolved = (b.path.parent / location).resolve()
        if not resolved.is_file():
            raise b.error(f"file not found: {resolved}", key)
        location = str(resolved)
    if source == "csv":
        for needed in ("data.classes", "data.height", "data.width"):
            if needed not in b:
                raise b.error("required for CSV data", needed)
    return DataConfig(
        source=source,
        location=location,
        classes=b.get("data.classes"),
        height=b.get("data.height"),
        width=b.get("data.width"),
        n_per_class=b.get("data.n_per_class", 100),
        dim=b.get("data.dim", 2),
        spread=b.get("data.spread", 0.1),
        noise=b.get("data.noise", 0.02),
        max_shift=b.get("data.max_shift", 2),
        seed=b.get("data.seed", 0),
        n_val=b.get("data.n_val", 200),
        n_test=b.get("data.n_test", 200),
        split_seed=b.get("data.split_seed", 0),
    )


def _train_config(b):
    overrides = {attr: b.get(key) for key, attr in _TRAIN_KEYS.items() if key in b}
    try:
        return TrainConfig(**overrides)
    except DomainError as e:
        raise b.error(str(e), next((k for k in _TRAIN_KEYS if k in b), None)) from e


def parse_run_config(path):
    """Read and validate a run config file"""
    b = read_bindings(path, allowed_sections=("data", "network", "kaf", "train", "output"))
    for key in ("network.input_shape", "network.classes"):
        if key in b:
            raise b.error("derived from the data source in run configs", key)
    if "output.dir" not in b:
        raise b.error("required", "output.dir")
    return RunConfig(
        network=_network_config(b),
        train=_train_config(b),
        data=_data_config(b),
        output_dir=(b.path.parent / b.get("output.dir")).resolve(),
    )


def parse_network_config(path):
    """Read a network.cfg written next to a checkpoint; returns (NetworkConfig, input_shape, classes)"""
    b = read_bindings(path, allowed_sections=("network", "kaf"))
    for key in ("network.input_shape", "network.classes"):
        if key not in b:
            raise b.error("required", key)
    return _network_config(b), b.get("network.input_shape"), b.get("network.classes")


def write_network_config(path, network_config, input_shape, classes):
    Path(path).write_text("\n".join(network_config.to_lines(input_shape, classes)) + "\n", encoding="utf-8")
