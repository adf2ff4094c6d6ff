"""Run configuration: a flat key=value text format with section prefixes.

Example::

    run.seed=7
    train.lr0=0.0001
    loss.lambda=0.1
    augment.kind=jitter

Unknown keys and unparsable values are collected and reported together.
``parse -> serialize -> parse`` is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .corpus import SyntheticConfig
from .errors import ConfigError
from .trainer import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs: paths, pipeline knobs, and defaults.

    Training defaults mirror the reference protocol: tau 0.07, lambda 0.1,
    lr 1e-4, plateau patience 20, up to 150 epochs, 12 instances per batch,
    7.5 s max utterance length, k searched in 1..32, alpha on a 0.05 grid.
    """

    manifest: str = ""
    embeddings: str = ""
    out_dir: str = "out"
    seed: int = 7
    n_folds: int = 10
    aggregate: str = "pooled"
    figures: bool = True
    synth: SyntheticConfig = field(default_factory=SyntheticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    retrieval_weighting: str = "uniform"
    retrieval_beta: float = 1.0
    k_min: int = 1
    k_max: int = 32
    alpha_start: float = 0.05
    alpha_stop: float = 0.95
    alpha_step: float = 0.05
    select_metric: str = "wa"
    fixed_alpha: float | None = None
    fixed_k: int | None = None

    def alpha_grid(self) -> tuple[float, ...]:
        grid = []
        value = self.alpha_start
        i = 0
        while value <= self.alpha_stop + 1e-9:
            grid.append(round(value, 10))
            i += 1
            value = self.alpha_start + i * self.alpha_step
        return tuple(grid)

    def k_range(self) -> tuple[int, ...]:
        return tuple(range(self.k_min, self.k_max + 1))


def _parse_bool(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ValueError("expected 'true' or 'false'")


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _parse_str_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


# key -> (getter path, parser, formatter); order defines serialization order.
_SCHEMA: dict[str, tuple[tuple[str, ...], object]] = {
    "corpus.manifest": (("manifest",), str),
    "corpus.embeddings": (("embeddings",), str),
    "run.out_dir": (("out_dir",), str),
    "run.seed": (("seed",), int),
    "run.n_folds": (("n_folds",), int),
    "run.aggregate": (("aggregate",), str),
    "run.figures": (("figures",), _parse_bool),
    "synth.dim": (("synth", "dim"), int),
    "synth.labels": (("synth", "label_names"), _parse_str_list),
    "synth.samples_per_class": (("synth", "samples_per_class"), int),
    "synth.n_speakers": (("synth", "n_speakers"), int),
    "synth.seed": (("synth", "seed"), int),
    "synth.class_separation": (("synth", "class_separation"), float),
    "synth.class_scales": (("synth", "class_scales"), _parse_float_list),
    "synth.overlap_pair": (("synth", "overlap_pair"), _parse_str_list),
    "synth.overlap_distance": (("synth", "overlap_distance"), float),
    "train.batch_n": (("train", "batch_n"), int),
    "train.max_epochs": (("train", "max_epochs"), int),
    "train.lr0": (("train", "lr0"), float),
    "train.plateau_patience": (("train", "plateau_patience"), int),
    "train.lr_factor": (("train", "lr_factor"), float),
    "train.min_lr": (("train", "min_lr"), float),
    "train.max_len_seconds": (("train", "max_len_seconds"), float),
    "train.hidden_dim": (("train", "hidden_dim"), int),
    "loss.tau": (("train", "loss", "tau"), float),
    "loss.lambda": (("train", "loss", "lam"), float),
    "loss.normalize_embeddings": (("train", "loss", "normalize_embeddings"), _parse_bool),
    "loss.ce_on_views": (("train", "loss", "ce_on_views"), _parse_bool),
    "loss.mean_over_anchors": (("train", "loss", "mean_over_anchors"), _parse_bool),
    "augment.kind": (("train", "augment", "kind"), str),
    "augment.snr_db": (("train", "augment", "snr_db"), float),
    "augment.gain_factor": (("train", "augment", "gain_factor"), float),
    "augment.rt60_seconds": (("train", "augment", "rt60_seconds"), float),
    "augment.pitch_semitones": (("train", "augment", "pitch_semitones"), float),
    "augment.mixed_kinds": (("train", "augment", "mixed_kinds"), _parse_str_list),
    "augment.snr_range": (("train", "augment", "snr_range"), _parse_float_list),
    "augment.gain_range": (("train", "augment", "gain_range"), _parse_float_list),
    "augment.rt60_range": (("train", "augment", "rt60_range"), _parse_float_list),
    "augment.pitch_range": (("train", "augment", "pitch_range"), _parse_float_list),
    "augment.jitter_sigma": (("train", "augment", "jitter_sigma"), float),
    "retrieval.weighting": (("retrieval_weighting",), str),
    "retrieval.beta": (("retrieval_beta",), float),
    "infer.k_min": (("k_min",), int),
    "infer.k_max": (("k_max",), int),
    "infer.alpha_start": (("alpha_start",), float),
    "infer.alpha_stop": (("alpha_stop",), float),
    "infer.alpha_step": (("alpha_step",), float),
    "infer.metric": (("select_metric",), str),
    "infer.alpha": (("fixed_alpha",), float),
    "infer.k": (("fixed_k",), int),
}

_OPTIONAL_KEYS = {"infer.alpha", "infer.k", "synth.overlap_pair"}


def _get_path(cfg: RunConfig, path: tuple[str, ...]):
    obj = cfg
    for name in path:
        obj = getattr(obj, name)
    return obj


def parse_config(text: str, base: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    """Parse key=value lines on top of ``base`` (defaults when omitted)."""
    values: dict[str, object] = {}
    errors: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            errors.append(f"{source}:{lineno}: expected key=value, got {line!r}")
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key.startswith("synth.mean."):
            label = key[len("synth.mean."):]
            try:
                values.setdefault("__means__", {})[label] = _parse_float_list(value)
            except ValueError as exc:
                errors.append(f"{source}:{lineno}: {key}: {exc}")
            continue
        if key not in _SCHEMA:
            errors.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        _, parser = _SCHEMA[key]
        if value == "" and key in _OPTIONAL_KEYS:
            values[key] = None
            continue
        try:
            values[key] = parser(value)
        except ValueError as exc:
            errors.append(f"{source}:{lineno}: {key}: bad value {value!r} ({exc})")
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return _apply(base or RunConfig(), values)


def _apply(base: RunConfig, values: dict[str, object]) -> RunConfig:
    """Rebuild nested frozen dataclasses with the overridden leaves."""
    updates: dict[tuple[str, ...], object] = {}
    for key, value in values.items():
        if key == "__means__":
            continue
        path, _ = _SCHEMA[key]
        updates[path] = value

    def rebuild(obj, prefix: tuple[str, ...]):
        direct = {p[len(prefix)]: v for p, v in updates.items() if p[:-1] == prefix and len(p) == len(prefix) + 1}
        nested_names = {p[len(prefix)] for p in updates if p[:len(prefix)] == prefix and len(p) > len(prefix) + 1}
        for name in nested_names:
            direct[name] = rebuild(getattr(obj, name), prefix + (name,))
        return replace(obj, **direct) if direct else obj

    try:
        cfg = rebuild(base, ())
        means = values.get("__means__")
        if means:
            order = cfg.synth.label_names
            missing = [l for l in order if l not in means]
            extra = [l for l in means if l not in order]
            problems = []
            if missing:
                problems.append(f"synth.mean.* missing for labels: {', '.join(missing)}")
            if extra:
                problems.append(f"synth.mean.* given for unknown labels: {', '.join(extra)}")
            for l in order:
                if l in means and len(means[l]) != cfg.synth.dim:
                    problems.append(f"synth.mean.{l}: expected {cfg.synth.dim} values")
            if problems:
                raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
            cfg = replace(cfg, synth=replace(cfg.synth, means=tuple(means[l] for l in order)))
        _validate(cfg)
        return cfg
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def _validate(cfg: RunConfig) -> None:
    problems = []
    if cfg.seed < 0:
        problems.append("run.seed must be nonnegative")
    if cfg.n_folds < 1:
        problems.append("run.n_folds must be >= 1")
    if cfg.aggregate not in ("pooled", "per_fold_mean"):
        problems.append("run.aggregate must be 'pooled' or 'per_fold_mean'")
    if cfg.retrieval_weighting not in ("uniform", "softmax_negdist"):
        problems.append("retrieval.weighting must be 'uniform' or 'softmax_negdist'")
    if cfg.select_metric not in ("wa", "ua"):
        problems.append("infer.metric must be 'wa' or 'ua'")
    if not (1 <= cfg.k_min <= cfg.k_max):
        problems.append("infer.k_min/k_max must satisfy 1 <= k_min <= k_max")
    if not (0.0 < cfg.alpha_start <= cfg.alpha_stop < 1.0):
        problems.append("alpha grid must lie inside (0, 1)")
    if cfg.alpha_step <= 0:
        problems.append("infer.alpha_step must be positive")
    if cfg.fixed_alpha is not None and not (0.0 <= cfg.fixed_alpha <= 1.0):
        problems.append("infer.alpha must lie in [0, 1]")
    if cfg.fixed_k is not None and cfg.fixed_k < 1:
        problems.append("infer.k must be >= 1")
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for key, (path, _) in _SCHEMA.items():
        value = _get_path(cfg, path)
        lines.append(f"{key}={_fmt(value)}")
    if cfg.synth.means is not None:
        for label, mean in zip(cfg.synth.label_names, cfg.synth.means):
            lines.append(f"synth.mean.{label}={_fmt(tuple(mean))}")
    return "\n".join(lines) + "\n"


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), base, source=str(path))


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply --set key=value pairs on top of a parsed config."""
    return parse_config("\n".join(overrides), base=cfg, source="--set")
