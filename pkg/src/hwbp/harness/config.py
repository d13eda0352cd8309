"""Run configuration: an INI file with sections model / task / algorithm /
optimizer / schedule. Unknown sections or keys are errors.

Keys and defaults::

    [model]
    kind = gru            ; plain | relu | gamma | gru | lstm
    hidden = 64           ; state width (LSTM: cell width; state is [c; h])
    block_hidden = 0      ; residual kinds: hidden width of a 2-layer block, 0 = 1 layer
    activation = tanh     ; residual kinds: tanh | relu | identity
    gamma = 0.0           ; gamma kind: share of the skip moved into the block
    shared = true         ; one parameter set for all cells (RNN) or one per layer
    init_scale = 1.0
    forget_bias = 0.0     ; LSTM only

    [task]
    kind = adding         ; adding | copy | charlm | rowimage
    length = 128
    batch_size = 32
    path =                ; charlm: UTF-8 text file; rowimage: .npz with images, labels
    seed = 0
    n_symbols = 8         ; copy
    n_copy = 10           ; copy
    eval_size = 256

    [algorithm]
    name = highway        ; backprop | highway | fpi
    k = 0
    k_schedule =          ; e.g. "0:1, 500:4" (step:k pairs, overrides k)
    scan = par            ; par (log-depth scan) | seq (reverse sweep); same result

    [optimizer]
    name = adam           ; adam | sgd_momentum
    lr = 0.001
    momentum = 0.9        ; SGD momentum, Adam beta1
    beta2 = 0.999
    eps = 1e-8
    weight_decay = 0.0    ; decoupled
    grad_clip = 0.0       ; global-norm clip, 0 = off

    [schedule]
    steps = 2000
    warmup = 0.1          ; fraction of steps with linear warmup
    final_lr_ratio = 0.1  ; cosine decay ends at lr * final_lr_ratio
    log_every = 10
    eval_every = 0        ; 0 = final step only
    diag_every = 0        ; 0 = off; cosine similarity vs exact backprop on a probe batch
    diag_max_k = -1       ; norm profile depth, -1 = L
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field

from ..errors import InputError


@dataclass
class ModelConfig:
    kind: str = "gru"
    hidden: int = 64
    block_hidden: int = 0
    activation: str = "tanh"
    gamma: float = 0.0
    shared: bool = True
    init_scale: float = 1.0
    forget_bias: float = 0.0


@dataclass
class TaskSpec:
    kind: str = "adding"
    length: int = 128
    batch_size: int = 32
    path: str = ""
    seed: int = 0
    n_symbols: int = 8
    n_copy: int = 10
    eval_size: int = 256


@dataclass
class AlgorithmConfig:
    name: str = "highway"
    k: int = 0
    k_schedule: str = ""
    scan: str = "par"

    def schedule_pairs(self) -> list:
        if not self.k_schedule.strip():
            return []
        pairs = []
        for item in self.k_schedule.split(","):
            try:
                step, k = item.split(":")
                pairs.append((int(step), int(k)))
            except ValueError:
                raise InputError(f"bad k_schedule entry {item.strip()!r}; expected step:k") from None
        return sorted(pairs)

    def k_at(self, step: int) -> int:
        k = self.k
        for start, value in self.schedule_pairs():
            if start <= step:
                k = value
        return k


@dataclass
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 0.0


@dataclass
class ScheduleConfig:
    steps: int = 2000
    warmup: float = 0.1
    final_lr_ratio: float = 0.1
    log_every: int = 10
    eval_every: int = 0
    diag_every: int = 0
    diag_max_k: int = -1


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    algorithm: AlgorithmConfig = field(default_factory=AlgorithmConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def validate(self) -> "TrainConfig":
        if self.model.kind not in ("plain", "relu", "gamma", "gru", "lstm"):
            raise InputError(f"unknown model kind {self.model.kind!r}")
        if self.task.kind not in ("adding", "copy", "charlm", "rowimage"):
            raise InputError(f"unknown task kind {self.task.kind!r}")
        if self.task.length < 1 or self.task.batch_size < 1:
            raise InputError("task length and batch_size must be >= 1")
        if self.algorithm.name not in ("backprop", "highway", "fpi"):
            raise InputError(f"unknown algorithm {self.algorithm.name!r}")
        if self.algorithm.scan not in ("par", "seq"):
            raise InputError(f"unknown scan {self.algorithm.scan!r}; expected par or seq")
        if self.algorithm.k < 0 or any(k < 0 for _, k in self.algorithm.schedule_pairs()):
            raise InputError("k must be >= 0")
        if self.optimizer.name not in ("adam", "sgd_momentum"):
            raise InputError(f"unknown optimizer {self.optimizer.name!r}")
        if self.optimizer.lr <= 0:
            raise InputError("lr must be > 0")
        if not 0.0 <= self.schedule.warmup < 1.0:
            raise InputError("warmup fraction must lie in [0, 1)")
        if self.schedule.steps < 1:
            raise InputError("steps must be >= 1")
        return self


SECTIONS = {
    "model": ModelConfig,
    "task": TaskSpec,
    "algorithm": AlgorithmConfig,
    "optimizer": OptimizerConfig,
    "schedule": ScheduleConfig,
}


def _convert(type_name: str, raw: str, where: str):
    try:
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
        if type_name == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise InputError(f"{where}: cannot read {raw!r} as {type_name}") from None
    return raw.strip()


def parse_config(text: str) -> TrainConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise InputError(f"config is not valid INI: {exc}") from None
    cfg = TrainConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise InputError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        known = {f.name: f for f in dataclasses.fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise InputError(f"unknown key {key!r} in [{section}]")
            setattr(target, key, _convert(known[key].type, raw, f"[{section}] {key}"))
    return cfg.validate()


def load_config(path) -> TrainConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def dump_config(cfg: TrainConfig) -> str:
    """Every key, resolved, in declaration order. ``parse_config`` reads it
    back to an equal config."""
    out = io.StringIO()
    for section in SECTIONS:
        out.write(f"[{section}]\n")
        for f in dataclasses.fields(getattr(cfg, section)):
            value = getattr(getattr(cfg, section), f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            out.write(f"{f.name} = {value}\n")
        out.write("\n")
    return out.getvalue()
