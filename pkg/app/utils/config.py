"""
Configuration utility for the entity classification package.
Holds the model, run and synthetic-corpus settings and their override layers:
defaults < JSON config file < KNNF_* environment variables < command-line flags.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace

from app.utils.errors import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = 'KNNF_'

# --ablate names and the flag each one flips
ABLATIONS = {
    'hop': ('use_hop_bias', False),
    'local': ('use_local_mask', False),
    'sigma': ('use_sigma_bias', False),
    'matching': ('use_matching', False),
    'abspos': ('use_abs_pos', True),
}

LOSS_MODES = ('per_entity_ce', 'matched_ce')
MATCHING_COSTS = ('prob', 'log_prob')
SIGMA_ENCODINGS = ('raw', 'sincos')
SPLIT_STRATEGIES = ('random', 'by_tag')


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters and ablation flags."""

    layers: int = 8
    heads: int = 8
    hidden: int = 80
    ffn_ratio: int = 2
    k: int = 4
    hop_threshold: int = 2
    max_hop_bucket: int = 4
    num_classes: int = 8
    text_dim: int = 384
    size_dim: int = 16
    use_hop_bias: bool = True
    use_local_mask: bool = True
    use_sigma_bias: bool = True
    use_matching: bool = True
    use_abs_pos: bool = False
    # False: the position-to-content term uses key row i (x_iW^K); True: key row j
    p2c_uses_query_row: bool = False
    share_spatial_bias: bool = False
    sigma_encoding: str = 'raw'
    angle_bins: int = 0
    abs_pos_buckets: int = 16
    dtype: str = 'float64'
    init_std: float = 0.02
    ln_eps: float = 1e-5

    @property
    def head_dim(self):
        return self.hidden // self.heads

    @property
    def sigma_dim(self):
        return 3 if self.sigma_encoding == 'sincos' else 2

    @property
    def num_hop_buckets(self):
        return self.max_hop_bucket + 2

    def validate(self):
        if self.layers < 0:
            raise ConfigError(f"layers must be >= 0, got {self.layers}")
        if self.heads < 1 or self.hidden < 1:
            raise ConfigError("heads and hidden must be positive")
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.max_hop_bucket < 1:
            raise ConfigError(f"max_hop_bucket must be >= 1, got {self.max_hop_bucket}")
        if self.hop_threshold is not None:
            if self.hop_threshold < 1:
                raise ConfigError(f"hop_threshold must be >= 1, got {self.hop_threshold}")
            if self.hop_threshold > self.max_hop_bucket:
                raise ConfigError(
                    f"hop_threshold ({self.hop_threshold}) must not exceed max_hop_bucket ({self.max_hop_bucket})"
                )
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.sigma_encoding not in SIGMA_ENCODINGS:
            raise ConfigError(f"sigma_encoding must be one of {SIGMA_ENCODINGS}")
        if self.angle_bins < 0 or self.abs_pos_buckets < 1:
            raise ConfigError("angle_bins must be >= 0 and abs_pos_buckets >= 1")
        if self.dtype not in ('float64', 'float32'):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype}")
        return self


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic corpus generator settings."""

    templates: int = 10
    docs_per_template: int = 20
    entities_per_doc: int = 30
    hop_sensitive_fraction: float = 0.5
    page_w: float = 1000.0
    page_h: float = 630.0
    jitter: float = 4.0
    languages: int = 4
    tag_prefix: str = 'T'

    def validate(self, num_unique=6):
        # each unique field is a key/value pair
        if self.entities_per_doc < num_unique:
            raise ConfigError(
                f"entities_per_doc ({self.entities_per_doc}) is smaller than the number of unique categories ({num_unique})"
            )
        if self.templates < 1 or self.docs_per_template < 1:
            raise ConfigError("templates and docs_per_template must be positive")
        if not 0.0 <= self.hop_sensitive_fraction <= 1.0:
            raise ConfigError("hop_sensitive_fraction must be in [0, 1]")
        if self.page_w <= 0 or self.page_h <= 0:
            raise ConfigError("page dimensions must be positive")
        return self


def _default_grid():
    return {
        'lr': [5e-3, 1e-3, 5e-4],
        'layers': [4, 8],
        'hop_threshold': [1, 2, 3],
        'heads': [4, 8],
    }


@dataclass(frozen=True)
class RunConfig:
    """Everything a train/eval/predict run needs, model config included."""

    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 5e-3
    epochs: int = 400
    seed: int = 0
    batch_size: int = 8
    loss_mode: str = 'per_entity_ce'
    matching_cost: str = 'prob'
    on_nonfinite: str = 'fail'
    patience: int = 0
    workers: int = 1
    embed_seed: int = 0
    corpus: str = None
    test_corpus: str = None
    embeddings: str = None
    schema: str = None
    checkpoint: str = None
    out: str = None
    split: str = 'random'
    split_ratio: float = 0.8
    held_out_tags: tuple = ()
    grid: dict = field(default_factory=_default_grid)

    def validate(self):
        self.model.validate()
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 0 or self.batch_size < 1 or self.workers < 1:
            raise ConfigError("epochs must be >= 0, batch_size and workers >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode}")
        if self.matching_cost not in MATCHING_COSTS:
            raise ConfigError(f"matching_cost must be one of {MATCHING_COSTS}, got {self.matching_cost}")
        if self.on_nonfinite not in ('skip', 'fail'):
            raise ConfigError(f"on_nonfinite must be skip or fail, got {self.on_nonfinite}")
        if self.split not in SPLIT_STRATEGIES:
            raise ConfigError(f"split must be one of {SPLIT_STRATEGIES}, got {self.split}")
        if self.split == 'by_tag' and not self.held_out_tags:
            raise ConfigError("split 'by_tag' needs held_out_tags")
        return self

    def validate_paths(self, *names):
        """
        Check that the named input paths exist before any work begins.

        Args:
            *names (str): Attribute names to check (e.g. 'corpus', 'embeddings')

        Raises:
            ConfigError: If a required path is unset
            FileNotFoundError: If a path does not exist
        """
        for name in names:
            path = getattr(self, name)
            if not path:
                raise ConfigError(f"Missing required path: {name}")
            if not os.path.exists(path):
                raise FileNotFoundError(f"{name} not found: {path}")

    def to_dict(self):
        data = asdict(self)
        data['held_out_tags'] = list(self.held_out_tags)
        return data


def _coerce(value, default, name):
    """Convert a string override to the type of the field default."""
    if not isinstance(value, str):
        return value
    if name == 'hop_threshold' and value.lower() in ('none', 'inf'):
        return None
    try:
        if isinstance(default, bool):
            if value.lower() in ('1', 'true', 'yes', 'on'):
                return True
            if value.lower() in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, (tuple, list)):
            return tuple(v.strip() for v in value.split(',') if v.strip())
    except ValueError:
        raise ConfigError(f"Bad value for {name}: {value!r}") from None
    return value


def model_config_from_dict(data):
    known = {f.name for f in fields(ModelConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"Unknown model config keys: {sorted(unknown)}")
    return ModelConfig(**data).validate()


def run_config_from_dict(data):
    data = dict(data)
    model = model_config_from_dict(data.pop('model', {}))
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"Unknown run config keys: {sorted(unknown)}")
    if 'held_out_tags' in data:
        data['held_out_tags'] = tuple(data['held_out_tags'])
    return RunConfig(model=model, **data)


def apply_overrides(config, overrides):
    """
    Apply flat overrides to a run config; keys may name run or model fields.

    Args:
        config (RunConfig): The base config
        overrides (dict): Field name -> value (strings are coerced); None values are ignored

    Returns:
        RunConfig: The updated config
    """
    run_fields = {f.name: f for f in fields(RunConfig)}
    model_fields = {f.name: f for f in fields(ModelConfig)}
    run_updates, model_updates = {}, {}

    for name, value in overrides.items():
        if value is None:
            continue
        if name in model_fields:
            default = getattr(config.model, name)
            model_updates[name] = _coerce(value, default if default is not None else 0, name)
        elif name in run_fields and name != 'model':
            default = getattr(config, name)
            run_updates[name] = _coerce(value, default if default is not None else '', name)
        else:
            raise ConfigError(f"Unknown config override: {name}")

    model = replace(config.model, **model_updates)
    return replace(config, model=model, **run_updates)


def env_overrides(environ=None):
    """Collect KNNF_* environment variables as lower-case field overrides."""
    environ = os.environ if environ is None else environ
    run_fields = {f.name for f in fields(RunConfig)} | {f.name for f in fields(ModelConfig)}
    overrides = {}
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        if name in run_fields and name != 'model':
            overrides[name] = value
    return overrides


def ablation_names(arm):
    """
    Ablation names of a sweep arm; combined arms join names with '+' (e.g. 'local+hop').

    Raises:
        ConfigError: If the arm is empty, repeats a name or names an unknown ablation
    """
    names = [name.strip() for name in str(arm).split('+')]
    for name in names:
        if name not in ABLATIONS:
            raise ConfigError(f"Unknown ablation {name!r} in arm {arm!r}; expected one of {sorted(ABLATIONS)}")
    if len(set(names)) != len(names):
        raise ConfigError(f"Arm {arm!r} repeats an ablation")
    return names


def apply_ablations(config, names):
    """
    Flip ablation flags by name (hop, local, sigma, matching, abspos).

    Raises:
        ConfigError: If an ablation name is unknown
    """
    updates = {}
    for name in names:
        if name not in ABLATIONS:
            raise ConfigError(f"Unknown ablation {name!r}; expected one of {sorted(ABLATIONS)}")
        flag, value = ABLATIONS[name]
        updates[flag] = value
    return replace(config, model=replace(config.model, **updates))


def load_run_config(path=None, overrides=None, environ=None):
    """
    Build a run config from defaults, an optional JSON file, env vars and flag overrides.

    Args:
        path (str, optional): JSON config file
        overrides (dict, optional): Command-line overrides (highest precedence)
        environ (dict, optional): Environment mapping, defaults to os.environ

    Returns:
        RunConfig: The validated config
    """
    config = RunConfig()
    if path:
        with open(path, 'r', encoding='utf-8') as f:
            config = run_config_from_dict(json.load(f))
        logger.info(f"Loaded run config from {path}")

    config = apply_overrides(config, env_overrides(environ))
    config = apply_overrides(config, overrides or {})
    return config.validate()


def load_synth_config(path=None, overrides=None):
    config = SynthConfig()
    if path:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
        known = {f.name for f in fields(SynthConfig)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown synth config keys: {sorted(unknown)}")
        config = SynthConfig(**data)
    updates = {}
    for name, value in (overrides or {}).items():
        if value is not None:
            updates[name] = _coerce(value, getattr(config, name), name)
    return replace(config, **updates)
