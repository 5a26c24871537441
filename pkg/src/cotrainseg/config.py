"""Training configuration: dataclass defaults plus the flat key=value file
format used by the train CLI."""

from dataclasses import asdict, dataclass, fields

from .losses import SUP_MODES, UNSUP_MODES, USLConfig

LR_SCHEDULES = ("constant", "poly")
PSEUDO_SOURCES = ("original", "mixed")


@dataclass
class TrainConfig:
    # optimization
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    max_iters: int = 2000
    batch_size: int = 4
    lr_schedule: str = "poly"
    lr_poly_power: float = 0.9
    # data / augmentation
    patch_size: tuple = (32, 32, 32)
    patches_per_volume: int = 1
    noise_amplitude: float = 0.2
    cutmix_ratio_min: float = 0.25
    cutmix_ratio_max: float = 0.5
    cutmix_pseudo_source: str = "original"
    # objectives
    sup_mode: str = "ce+dice"
    unsup_mode: str = "usl"
    unsup_weight: float = 1.0
    usl_t1: float = 0.9
    usl_t2: float = 0.1
    multiclass_gates: bool = False
    # model
    num_classes: int = 2
    base_channels: int = 8
    levels: int = 3
    beta_text: float = 1.0
    # bookkeeping
    seed: int = 1
    checkpoint_every: int = 500
    val_every: int = 200

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if self.max_iters <= 0:
            raise ValueError(f"max_iters must be > 0, got {self.max_iters}")
        if self.batch_size <= 0 or self.batch_size % 2:
            raise ValueError(f"batch_size must be positive and even, got {self.batch_size}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.sup_mode not in SUP_MODES:
            raise ValueError(f"unknown sup_mode {self.sup_mode!r}")
        if self.unsup_mode not in UNSUP_MODES:
            raise ValueError(f"unknown unsup_mode {self.unsup_mode!r}")
        if self.cutmix_pseudo_source not in PSEUDO_SOURCES:
            raise ValueError(f"unknown cutmix_pseudo_source {self.cutmix_pseudo_source!r}")
        if self.cutmix_ratio_max > 0 and not (
                0 < self.cutmix_ratio_min <= self.cutmix_ratio_max < 1):
            raise ValueError("cutmix ratios must satisfy 0 < min <= max < 1 "
                             "(or max = 0 to disable)")
        if self.noise_amplitude < 0:
            raise ValueError("noise_amplitude must be >= 0")
        if self.beta_text < 0:
            raise ValueError("beta_text must be >= 0")
        self.usl = USLConfig(t1=self.usl_t1, t2=self.usl_t2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_size"] = list(self.patch_size)
        return d


# file key -> attribute; dotted spellings follow the per-module config keys
_KEY_ALIASES = {
    "usl.t1": "usl_t1",
    "usl.t2": "usl_t2",
    "loss.sup_mode": "sup_mode",
    "loss.unsup_mode": "unsup_mode",
    "cutmix.ratio_min": "cutmix_ratio_min",
    "cutmix.ratio_max": "cutmix_ratio_max",
    "cutmix.pseudo_source": "cutmix_pseudo_source",
    "noise.amplitude": "noise_amplitude",
}


def _coerce(raw: str, pytype):
    raw = raw.strip()
    if pytype is bool:
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"bad boolean {raw!r}")
    if pytype is int:
        return int(raw)
    if pytype is float:
        return float(raw)
    if pytype is tuple:
        return tuple(int(v) for v in raw.replace("x", ",").split(","))
    return raw


def config_from_dict(values: dict) -> TrainConfig:
    """Build a TrainConfig from {key: value} with file-key aliases applied."""
    by_name = {f.name: f for f in fields(TrainConfig)}
    kwargs = {}
    for key, val in values.items():
        name = _KEY_ALIASES.get(key, key)
        if name == "usl":
            continue
        if name not in by_name:
            raise KeyError(f"unknown config key {key!r}")
        f = by_name[name]
        pytype = type(f.default)
        kwargs[name] = _coerce(val, pytype) if isinstance(val, str) else (
            tuple(val) if pytype is tuple else pytype(val))
    return TrainConfig(**kwargs)


def read_config(path) -> TrainConfig:
    """Parse the flat key=value config file ('#' starts a comment line)."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    return config_from_dict(values)


def write_config(cfg: TrainConfig, path) -> None:
    with open(path, "w") as f:
        for key, val in cfg.to_dict().items():
            if isinstance(val, (list, tuple)):
                val = ",".join(str(v) for v in val)
            f.write(f"{key}={val}\n")
