"""Experiment configuration: one INI file fully defines a run.

Plain configparser sections mirror the pipeline stages ([experiment],
[data], [model], [pretrain], [finetune], [metrics]). Parsing is strict:
unknown sections or keys are rejected, every value is type-checked, and
validation happens before any compute. All randomness downstream derives
from the single experiment seed via named sub-seeds.
"""

import configparser
import hashlib
import json
from dataclasses import dataclass, field

from .datagen import GeneratorConfig
from .finetune import FinetuneConfig
from .model import ModelConfig
from .pretrain import ModalityDropoutConfig, PretrainConfig


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class DataConfig:
    n_units: int = 20
    n_visemes: int = 10
    dim_a: int = 16
    dim_b: int = 24
    mean_dwell: float = 4.0
    sigma_a: float = 0.5
    sigma_b: float = 0.3
    min_len: int = 40
    max_len: int = 120
    latent_dim: int = 8
    n_ab: int = 160
    n_a: int = 0
    n_b: int = 0

    def generator(self, seed: int) -> GeneratorConfig:
        return GeneratorConfig(
            n_units=self.n_units, n_visemes=self.n_visemes, dim_a=self.dim_a,
            dim_b=self.dim_b, mean_dwell=self.mean_dwell, sigma_a=self.sigma_a,
            sigma_b=self.sigma_b, min_len=self.min_len, max_len=self.max_len,
            latent_dim=self.latent_dim, seed=seed)

    @property
    def counts(self) -> dict:
        return {"ab": self.n_ab, "a": self.n_a, "b": self.n_b}


@dataclass
class MetricsConfig:
    k: int = 40
    n_frames: int = 500


@dataclass
class ExperimentConfig:
    seed: int = 0
    outdir: str = "runs/experiment"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = None
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    iterations: int = 1

    def __post_init__(self):
        if self.model is None:
            self.model = ModelConfig(dim_a=self.data.dim_a, dim_b=self.data.dim_b,
                                     vocab_size=self.data.n_units + 3)
        if self.model.dim_a != self.data.dim_a or self.model.dim_b != self.data.dim_b:
            raise ConfigError("model input dims must match data dims")
        if self.model.vocab_size != self.data.n_units + 3:
            raise ConfigError(
                f"model vocab_size must be n_units+3 = {self.data.n_units + 3}, "
                f"got {self.model.vocab_size}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")

    def hash(self) -> str:
        blob = json.dumps(_as_jsonable(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _as_jsonable(cfg: ExperimentConfig) -> dict:
    return {
        "seed": cfg.seed,
        "iterations": cfg.iterations,
        "data": vars(cfg.data),
        "model": cfg.model.to_dict(),
        "pretrain": {**{k: v for k, v in vars(cfg.pretrain).items() if k != "dropout"},
                     "p_av": cfg.pretrain.dropout.p_av,
                     "p_a": cfg.pretrain.dropout.p_a,
                     "p_b": cfg.pretrain.dropout.p_b},
        "finetune": {**{k: v for k, v in vars(cfg.finetune).items() if k != "ab_dropout"},
                     "ab_dropout": None if cfg.finetune.ab_dropout is None
                     else [cfg.finetune.ab_dropout.p_av, cfg.finetune.ab_dropout.p_a,
                           cfg.finetune.ab_dropout.p_b]},
        "metrics": vars(cfg.metrics),
    }


_BOOL = {"true": True, "yes": True, "1": True, "on": True,
         "false": False, "no": False, "0": False, "off": False}


def _coerce(section: str, key: str, raw: str, kind):
    try:
        if kind is bool:
            return _BOOL[raw.strip().lower()]
        return kind(raw)
    except (ValueError, KeyError):
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}")


# section -> key -> type
SCHEMA = {
    "experiment": {"seed": int, "outdir": str, "iterations": int},
    "data": {k: (float if k in ("mean_dwell", "sigma_a", "sigma_b") else int)
             for k in ("n_units", "n_visemes", "dim_a", "dim_b", "mean_dwell", "sigma_a",
                       "sigma_b", "min_len", "max_len", "latent_dim", "n_ab", "n_a", "n_b")},
    "model": {k: int for k in ("dim_front", "dim_embed", "layers", "heads", "dim_ffn",
                               "n_clusters", "decoder_layers")},
    "pretrain": {
        "updates": int, "lr_peak": float, "warmup_frac": float, "batch_frames": int,
        "p_av": float, "p_a": float, "p_b": float, "p_mask": float, "mask_span": int,
        "noise_enabled": bool, "noise_snr_db": float, "noise_prob": float,
        "grad_clip": float, "unmasked_weight": float, "log_interval": int,
    },
    "finetune": {
        "task": str, "ft_modality": str, "lr": float, "warmup": float, "hold": float,
        "decay": float, "updates": int, "n_frz": int, "l_frz": int, "batch_frames": int,
        "grad_clip": float, "noise_enabled": bool, "noise_snr_db": float,
        "noise_prob": float, "ab_dropout": bool, "log_interval": int,
    },
    "metrics": {"k": int, "n_frames": int},
}


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}")
    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}] (have {sorted(SCHEMA)})")
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}] "
                                  f"(have {sorted(SCHEMA[section])})")
            values[section][key] = _coerce(section, key, raw, SCHEMA[section][key])

    exp = values.get("experiment", {})
    data = DataConfig(**values.get("data", {}))
    model_kw = values.get("model", {})
    model = ModelConfig(dim_a=data.dim_a, dim_b=data.dim_b,
                        vocab_size=data.n_units + 3, **model_kw)

    pre_kw = dict(values.get("pretrain", {}))
    probs = [pre_kw.pop(k, None) for k in ("p_av", "p_a", "p_b")]
    try:
        if any(p is not None for p in probs):
            if any(p is None for p in probs):
                raise ConfigError("[pretrain] p_av, p_a, p_b must be given together")
            pre_kw["dropout"] = ModalityDropoutConfig(*probs)
        pre = PretrainConfig(seed=exp.get("seed", 0), **pre_kw)
    except ValueError as e:
        raise ConfigError(f"[pretrain] {e}")

    ft_kw = dict(values.get("finetune", {}))
    ratio = tuple(ft_kw.pop(k, d) for k, d in (("warmup", 0.33), ("hold", 0.0), ("decay", 0.67)))
    ab_drop = ft_kw.pop("ab_dropout", False)
    try:
        ftc = FinetuneConfig(phase_ratio=ratio, seed=exp.get("seed", 0),
                             ab_dropout=ModalityDropoutConfig() if ab_drop else None, **ft_kw)
    except (ValueError, RuntimeError) as e:
        raise ConfigError(f"[finetune] {e}")

    try:
        return ExperimentConfig(
            seed=exp.get("seed", 0), outdir=exp.get("outdir", "runs/experiment"),
            iterations=exp.get("iterations", 1), data=data, model=model,
            pretrain=pre, finetune=ftc, metrics=MetricsConfig(**values.get("metrics", {})))
    except ValueError as e:
        raise ConfigError(str(e))


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        return parse_config(f.read())


EXAMPLE = """\
[experiment]
seed = 0
outdir = runs/demo
iterations = 1

[data]
n_units = 20
n_visemes = 10
mean_dwell = 4.0
sigma_a = 0.5
sigma_b = 0.3
n_ab = 160

[model]
layers = 3
heads = 4
n_clusters = 40

[pretrain]
updates = 2000
lr_peak = 0.004
batch_frames = 320
p_av = 0.5
p_a = 0.25
p_b = 0.25

[finetune]
task = frame
ft_modality = a
updates = 600
n_frz = 300
l_frz = 1

[metrics]
k = 40
n_frames = 500
"""
