"""Declarative run configuration for the command-line interface.

A config is a single JSON file with optional sections (corpus, generator,
encoder, pipeline, evaluation, paths); missing fields take the defaults
below.  Validation reports every violation at once, each named by its key
path (e.g. `pipeline.k`).
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .corpus import EXPRESSIONS, POSES


class ConfigError(ValueError):
    """Unparseable or invalid run configuration."""


@dataclass
class CorpusSection:
    seed: int = 7
    identities: int = 16
    expressions: list = field(default_factory=lambda: list(EXPRESSIONS))
    poses: list = field(default_factory=lambda: list(POSES))
    illuminations: list = field(default_factory=lambda: [0.9, 1.1])


@dataclass
class TrainSection:
    epochs: int = 300
    batch_size: int = 16
    learning_rate: float = 2e-3
    seed: int = 7


@dataclass
class PipelineSection:
    k: int = 2
    weight_mode: str = "uniform"
    expression: str = "neutral"
    skin_lower: list = field(default_factory=lambda: [0.0, 10.0, 20.0])
    skin_upper: list = field(default_factory=lambda: [200.0, 255.0, 255.0])
    morph_radius: int = 1
    ransac_iterations: int = 500
    ransac_threshold: float = 2.0
    ransac_seed: int = 0
    identity_lock: bool = False


@dataclass
class ExperimentCell:
    probe: str = "original"
    reference: str = "original"
    parrot: bool = False


def default_experiment_grid() -> list[dict]:
    grid = []
    for probe in ("original", "deidentified"):
        for reference in ("original", "profile"):
            grid.append({"probe": probe, "reference": reference, "parrot": False})
    for probe in ("pixelated", "blurred"):
        for parrot in (False, True):
            grid.append({"probe": probe, "reference": "original", "parrot": parrot})
    return grid


@dataclass
class EvaluationSection:
    folds: int = 10
    legit_pairs: int = 300
    impostor_pairs: int = 300
    seed: int = 7
    contexts: list = field(default_factory=lambda: ["context", "nocontext"])
    experiments: list = field(default_factory=default_experiment_grid)


@dataclass
class PathsSection:
    workdir: str = "facedeid-out"
    corpus_dir: str | None = None
    generator_checkpoint: str | None = None
    encoder_checkpoint: str | None = None
    gallery: str | None = None
    report_dir: str | None = None
    frames_dir: str | None = None
    deidentified_dir: str | None = None


@dataclass
class RunConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    generator: TrainSection = field(default_factory=TrainSection)
    encoder: TrainSection = field(
        default_factory=lambda: TrainSection(epochs=30, batch_size=32, learning_rate=1e-3)
    )
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def resolved_paths(self) -> dict[str, Path]:
        w = Path(self.paths.workdir)
        p = self.paths
        return {
            "workdir": w,
            "corpus_dir": Path(p.corpus_dir) if p.corpus_dir else w / "corpus",
            "generator_checkpoint": (
                Path(p.generator_checkpoint)
                if p.generator_checkpoint
                else w / "generator.ckpt"
            ),
            "encoder_checkpoint": (
                Path(p.encoder_checkpoint)
                if p.encoder_checkpoint
                else w / "encoder.ckpt"
            ),
            "gallery": Path(p.gallery) if p.gallery else w / "gallery.featdb",
            "report_dir": Path(p.report_dir) if p.report_dir else w / "report",
            "frames_dir": Path(p.frames_dir) if p.frames_dir else None,
            "deidentified_dir": (
                Path(p.deidentified_dir) if p.deidentified_dir else w / "deidentified"
            ),
        }

    def to_dict(self) -> dict:
        return asdict(self)

    def override_seed(self, seed: int) -> None:
        self.corpus.seed = seed
        self.generator.seed = seed
        self.encoder.seed = seed
        self.evaluation.seed = seed

    def override_workdir(self, workdir: str) -> None:
        self.paths.workdir = workdir


_SECTIONS = {
    "corpus": CorpusSection,
    "generator": TrainSection,
    "encoder": TrainSection,
    "pipeline": PipelineSection,
    "evaluation": EvaluationSection,
    "paths": PathsSection,
}


def _build_section(cls, data: dict, prefix: str, errors: list[str]):
    section = cls()
    known = set(vars(section))
    for key, value in data.items():
        if key not in known:
            errors.append(f"{prefix}.{key}: unknown field")
            continue
        setattr(section, key, value)
    return section


def _check(cond: bool, errors: list[str], message: str) -> None:
    if not cond:
        errors.append(message)


def validate_config(cfg: RunConfig) -> list[str]:
    """All violations at once, each tagged with its key path."""
    e: list[str] = []
    c = cfg.corpus
    _check(isinstance(c.identities, int) and c.identities >= 2, e,
           f"corpus.identities: must be an integer >= 2, got {c.identities!r}")
    _check(len(c.expressions) >= 1 and all(x in EXPRESSIONS for x in c.expressions), e,
           f"corpus.expressions: must be drawn from {EXPRESSIONS}, got {c.expressions!r}")
    _check(len(c.poses) >= 1 and all(p in POSES for p in c.poses), e,
           f"corpus.poses: must be drawn from {POSES}, got {c.poses!r}")
    _check(
        len(c.illuminations) >= 1
        and all(isinstance(v, (int, float)) and 0.5 <= v <= 1.5 for v in c.illuminations),
        e, f"corpus.illuminations: levels must lie in [0.5, 1.5], got {c.illuminations!r}")
    for name in ("generator", "encoder"):
        t = getattr(cfg, name)
        _check(isinstance(t.epochs, int) and t.epochs >= 1, e,
               f"{name}.epochs: must be an integer >= 1, got {t.epochs!r}")
        _check(isinstance(t.batch_size, int) and t.batch_size >= 1, e,
               f"{name}.batch_size: must be an integer >= 1, got {t.batch_size!r}")
        _check(isinstance(t.learning_rate, (int, float)) and t.learning_rate > 0, e,
               f"{name}.learning_rate: must be positive, got {t.learning_rate!r}")
    p = cfg.pipeline
    k_max = c.identities if isinstance(c.identities, int) and c.identities >= 2 else None
    _check(
        isinstance(p.k, int) and p.k >= 1 and (k_max is None or p.k <= k_max), e,
        f"pipeline.k: must be an integer in [1, corpus.identities], got {p.k!r}")
    _check(p.weight_mode in ("uniform", "similarity"), e,
           f"pipeline.weight_mode: must be 'uniform' or 'similarity', got {p.weight_mode!r}")
    _check(p.expression in EXPRESSIONS, e,
           f"pipeline.expression: must be one of {EXPRESSIONS}, got {p.expression!r}")
    for bname in ("skin_lower", "skin_upper"):
        b = getattr(p, bname)
        _check(len(b) == 3 and all(isinstance(v, (int, float)) for v in b), e,
               f"pipeline.{bname}: must be three numbers, got {b!r}")
    if len(p.skin_lower) == 3 and len(p.skin_upper) == 3:
        _check(all(lo <= hi for lo, hi in zip(p.skin_lower, p.skin_upper)), e,
               "pipeline.skin_lower: exceeds pipeline.skin_upper componentwise")
    _check(isinstance(p.morph_radius, int) and p.morph_radius >= 1, e,
           f"pipeline.morph_radius: must be an integer >= 1, got {p.morph_radius!r}")
    _check(isinstance(p.ransac_iterations, int) and p.ransac_iterations >= 1, e,
           f"pipeline.ransac_iterations: must be an integer >= 1, got {p.ransac_iterations!r}")
    _check(isinstance(p.ransac_threshold, (int, float)) and p.ransac_threshold > 0, e,
           f"pipeline.ransac_threshold: must be positive, got {p.ransac_threshold!r}")
    v = cfg.evaluation
    _check(isinstance(v.folds, int) and v.folds >= 2, e,
           f"evaluation.folds: must be an integer >= 2, got {v.folds!r}")
    for pname in ("legit_pairs", "impostor_pairs"):
        n = getattr(v, pname)
        _check(isinstance(n, int) and n >= 1, e,
               f"evaluation.{pname}: must be an integer >= 1, got {n!r}")
    _check(all(m in ("context", "nocontext") for m in v.contexts) and len(v.contexts) >= 1,
           e, f"evaluation.contexts: must be drawn from ('context', 'nocontext'), got {v.contexts!r}")
    for i, cell in enumerate(v.experiments):
        if not isinstance(cell, dict):
            e.append(f"evaluation.experiments[{i}]: must be an object")
            continue
        probe = cell.get("probe")
        _check(probe in ("original", "deidentified", "pixelated", "blurred"), e,
               f"evaluation.experiments[{i}].probe: unknown condition {probe!r}")
        _check(cell.get("reference", "original") in ("original", "profile"), e,
               f"evaluation.experiments[{i}].reference: unknown split {cell.get('reference')!r}")
        if cell.get("parrot", False):
            _check(probe in ("pixelated", "blurred"), e,
                   f"evaluation.experiments[{i}].parrot: only valid for naive conditions")
    _check(isinstance(cfg.paths.workdir, str) and cfg.paths.workdir != "", e,
           f"paths.workdir: must be a non-empty string, got {cfg.paths.workdir!r}")
    return e


def config_from_dict(data: dict) -> RunConfig:
    errors: list[str] = []
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = RunConfig()
    for key, value in data.items():
        if key not in _SECTIONS:
            errors.append(f"{key}: unknown section")
            continue
        if not isinstance(value, dict):
            errors.append(f"{key}: section must be an object")
            continue
        setattr(cfg, key, _build_section(_SECTIONS[key], value, key, errors))
    errors.extend(validate_config(cfg))
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg


def load_config(path) -> RunConfig:
    """Parse and validate a JSON config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from None
    return config_from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
