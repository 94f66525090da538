"""Model, tracking and training configuration plus the key-value config file.

Config files are plain text, one ``key = value`` per line, ``#`` starts a
comment. Keys are the field names of :class:`ModelConfig`,
:class:`TrackConfig` and :class:`TrainConfig` (they are disjoint), plus
``ablation`` which applies one of the named presets in :data:`ABLATIONS`
before the remaining keys. Example::

    # toy default with the no-SCZ ablation
    ablation = table3.C
    embed_dim = 32
    num_layers = 6
    tpe_layer = 2
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


DSA_MODES = (
    "all_allowed",
    "all_blocked",
    "blocked_then_target",
    "blocked_then_target_scz",
    "allowed_then_target_scz",
)
PRUNING_MODES = ("context_aware", "conventional", "none")
ARROW_READINGS = ("flow", "query")


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 4
    template_size: int = 32
    search_size: int = 64
    embed_dim: int = 64
    num_heads: int = 4
    num_layers: int = 12
    tpe_layer: int = 4
    cz_size: int = 11
    scz_size: int = 7
    prune_count: int = 128
    target_threshold: float = 0.5
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0
    tpe_loss_weight: float = 1.0
    use_tpe_loss: bool = True
    pruning_mode: str = "context_aware"
    dsa_mode: str = "blocked_then_target_scz"
    arrow_reading: str = "flow"
    mlp_ratio: int = 4
    focal_alpha: float = 2.0
    focal_beta: float = 4.0
    heatmap_sigma: float = 1.0
    ln_eps: float = 1e-5
    init_std: float = 0.02

    @property
    def grid_side(self) -> int:
        return self.search_size // self.patch_size

    @property
    def template_side(self) -> int:
        return self.template_size // self.patch_size

    @property
    def n_template(self) -> int:
        return self.template_side**2

    @property
    def n_search(self) -> int:
        return self.grid_side**2

    @property
    def n_total(self) -> int:
        return 2 * self.n_template + self.n_search

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def prunes(self) -> bool:
        return self.pruning_mode != "none" and self.prune_count > 0

    def validate(self) -> "ModelConfig":
        p = self.patch_size
        if p <= 0 or self.search_size % p or self.template_size % p:
            raise ConfigError(f"image sizes {self.template_size}/{self.search_size} not divisible by patch {p}")
        g = self.grid_side
        if self.cz_size % 2 == 0 or self.scz_size % 2 == 0:
            raise ConfigError("cz_size and scz_size must be odd")
        if not (1 <= self.scz_size <= self.cz_size <= g):
            raise ConfigError(f"need scz_size <= cz_size <= grid side ({self.scz_size}, {self.cz_size}, {g})")
        if not (0 <= self.prune_count <= self.n_search - 1):
            raise ConfigError(f"prune_count must be in [0, {self.n_search - 1}]")
        if self.embed_dim <= 0 or self.num_heads <= 0 or self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be a positive multiple of num_heads")
        if not (1 <= self.tpe_layer < self.num_layers):
            raise ConfigError(f"tpe_layer must be in [1, num_layers - 1], got {self.tpe_layer}")
        if self.dsa_mode not in DSA_MODES:
            raise ConfigError(f"unknown dsa_mode {self.dsa_mode!r}; choose from {DSA_MODES}")
        if self.pruning_mode not in PRUNING_MODES:
            raise ConfigError(f"unknown pruning_mode {self.pruning_mode!r}; choose from {PRUNING_MODES}")
        if self.arrow_reading not in ARROW_READINGS:
            raise ConfigError(f"unknown arrow_reading {self.arrow_reading!r}")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        return self


@dataclass(frozen=True)
class TrackConfig:
    search_area_factor: float = 4.0
    template_area_factor: float = 1.0
    dynamic_update: bool = True
    update_interval: int = 25
    update_threshold: float = 0.6

    def validate(self) -> "TrackConfig":
        if self.search_area_factor <= 0 or self.template_area_factor <= 0:
            raise ConfigError("area factors must be positive")
        if self.update_interval < 1:
            raise ConfigError("update_interval must be >= 1")
        return self


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    lr_decay_at: float = 0.6
    lr_decay_factor: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    center_jitter: float = 0.25
    scale_jitter: float = 0.15
    log_every: int = 0

    def validate(self) -> "TrainConfig":
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not (0.0 <= self.lr_decay_at <= 1.0):
            raise ConfigError("lr_decay_at must be a fraction of the run")
        return self


# Named ablation presets: rows of the component, pruning and attention studies.
ABLATIONS: dict[str, dict[str, object]] = {
    # component study
    "table3.A": {"pruning_mode": "none", "dsa_mode": "all_allowed"},
    "table3.B": {"pruning_mode": "context_aware", "dsa_mode": "all_allowed"},
    "table3.C": {"pruning_mode": "context_aware", "dsa_mode": "blocked_then_target"},
    "table3.D": {"pruning_mode": "context_aware", "dsa_mode": "blocked_then_target_scz"},
    # pruning study
    "table2.no_pruning": {"pruning_mode": "none"},
    "table2.conventional": {"pruning_mode": "conventional"},
    "table2.context_aware": {"pruning_mode": "context_aware"},
    # attention-blocking study
    "table4.1": {"pruning_mode": "none", "dsa_mode": "all_allowed"},
    "table4.2": {"pruning_mode": "none", "dsa_mode": "all_blocked"},
    "table4.3": {"pruning_mode": "context_aware", "dsa_mode": "blocked_then_target"},
    "table4.4": {"pruning_mode": "context_aware", "dsa_mode": "blocked_then_target_scz"},
    "table4.5": {"pruning_mode": "context_aware", "dsa_mode": "allowed_then_target_scz"},
    # zone sizes and module placement
    **{f"table_cz.{n}": {"cz_size": n} for n in (7, 9, 11, 13)},
    **{f"table5.{m}": {"scz_size": m} for m in (5, 7, 9)},
    **{f"table6.{l}": {"tpe_layer": l} for l in (3, 4, 5, 6, 7)},
}


def apply_ablation(cfg: ModelConfig, name: str) -> ModelConfig:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}")
    return replace(cfg, **ABLATIONS[name]).validate()


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    track: TrackConfig = field(default_factory=TrackConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.track.validate()
        self.train.validate()
        return self


def _coerce(raw: str, typ, key: str):
    typ = {"int": int, "float": float, "bool": bool, "str": str}.get(typ, typ)
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _field_owner() -> dict[str, tuple[str, object]]:
    owners = {}
    for part, cls in (("model", ModelConfig), ("track", TrackConfig), ("train", TrainConfig)):
        for f in fields(cls):
            owners[f.name] = (part, f.type)
    return owners


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    run = base or RunConfig()
    entries: list[tuple[str, str]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        entries.append((key, value))
    model = run.model
    for key, value in entries:
        if key == "ablation":
            if value not in ABLATIONS:
                raise ConfigError(f"unknown ablation {value!r}")
            model = replace(model, **ABLATIONS[value])
    updates: dict[str, dict[str, object]] = {"model": {}, "track": {}, "train": {}}
    owners = _field_owner()
    for key, value in entries:
        if key == "ablation":
            continue
        if key not in owners:
            raise ConfigError(f"unknown config key {key!r}")
        part, typ = owners[key]
        updates[part][key] = _coerce(value, typ, key)
    return RunConfig(
        model=replace(model, **updates["model"]),
        track=replace(run.track, **updates["track"]),
        train=replace(run.train, **updates["train"]),
    ).validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def dump_config(run: RunConfig) -> str:
    lines = []
    for part in (run.model, run.track, run.train):
        for k, v in dataclasses.asdict(part).items():
            lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
