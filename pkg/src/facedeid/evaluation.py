"""Reidentification-risk evaluation: verification experiments over a
k-fold protocol, ROC/EER/VER-1/AUC metrics, naive baselines with parrot
attacks, and report emission.

Scoring conventions, fixed once:
  * A pair score is the cosine similarity of the two crop embeddings.
  * The threshold sweep runs over the union of observed scores plus
    +/- infinity sentinels; FAR and VER count scores >= threshold.
  * EER interpolates the FAR and FRR polylines linearly between sweep
    points and returns the crossing value.
  * VER at a target FAR interpolates linearly between adjacent ROC
    points (taking the best VER when the target FAR is attained exactly).
  * AUC is the Mann-Whitney statistic with ties counted as one half,
    computed in a symmetric form so that negating all scores maps AUC
    to exactly 1 - AUC.
  * Pairs are drawn uniformly without replacement within a fold, seeded
    by (seed, fold index), independently across folds.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import FaceSample, split_by_pose
from .encoder import EncoderModel, extract_embeddings
from .imgops import crop, gaussian_blur, pixelate, shrink_bbox
from .pipeline import PipelineConfig, annotation_for_sample, deidentify_frame

logger = logging.getLogger(__name__)

PROBE_CONDITIONS = ("original", "deidentified", "pixelated", "blurred")
REFERENCE_SPLITS = ("original", "profile")
CONTEXT_MODES = ("context", "nocontext")
NOCONTEXT_TRIM = 0.10


@dataclass(frozen=True)
class ExperimentSpec:
    """One verification experiment cell."""

    probe_condition: str = "original"
    reference_split: str = "original"
    parrot: bool = False
    context_mode: str = "context"
    folds: int = 10
    legit_pairs: int = 300
    impostor_pairs: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.probe_condition not in PROBE_CONDITIONS:
            raise ValueError(f"unknown probe condition {self.probe_condition!r}")
        if self.reference_split not in REFERENCE_SPLITS:
            raise ValueError(f"unknown reference split {self.reference_split!r}")
        if self.context_mode not in CONTEXT_MODES:
            raise ValueError(f"unknown context mode {self.context_mode!r}")
        if self.parrot and self.probe_condition not in ("pixelated", "blurred"):
            raise ValueError("parrot attacks apply to the naive conditions only")
        if self.folds < 2:
            raise ValueError(f"folds must be >= 2, got {self.folds}")
        if self.legit_pairs < 1 or self.impostor_pairs < 1:
            raise ValueError("pair counts must be >= 1")

    @property
    def name(self) -> str:
        probe = self.probe_condition + ("-parrot" if self.parrot else "")
        return f"{probe}-vs-{self.reference_split}"


@dataclass(frozen=True)
class ScoreSet:
    """Similarity scores of one fold's legitimate and impostor attempts."""

    legitimate: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        for name, arr in (("legitimate", self.legitimate), ("impostor", self.impostor)):
            if len(arr) == 0:
                raise ValueError(f"{name} score list is empty")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} scores contain non-finite values")


def _sweep(scores: ScoreSet) -> tuple[np.ndarray, np.ndarray]:
    """(FAR, VER) at descending thresholds: +inf, unique scores, -inf."""
    legit = np.sort(np.asarray(scores.legitimate, dtype=float))
    imp = np.sort(np.asarray(scores.impostor, dtype=float))
    uniq = np.unique(np.concatenate([legit, imp]))[::-1]
    thresholds = np.concatenate([[np.inf], uniq, [-np.inf]])
    far = (len(imp) - np.searchsorted(imp, thresholds, side="left")) / len(imp)
    ver = (len(legit) - np.searchsorted(legit, thresholds, side="left")) / len(legit)
    return far, ver


def compute_roc(scores: ScoreSet) -> np.ndarray:
    """(n, 2) array of (FAR, VER) points, non-decreasing in both columns."""
    far, ver = _sweep(scores)
    return np.column_stack([far, ver])


def compute_eer(scores: ScoreSet) -> float:
    """Crossing of the FAR and FRR polylines over the threshold sweep."""
    far, ver = _sweep(scores)
    frr = 1.0 - ver
    i = int(np.argmax(far >= frr))  # first crossing; far is 0 and frr 1 at +inf
    if far[i] == frr[i]:
        return float(far[i])
    d0 = frr[i - 1] - far[i - 1]
    d1 = far[i] - frr[i]
    alpha = d0 / (d0 + d1)
    return float(far[i - 1] + alpha * (far[i] - far[i - 1]))


def compute_ver_at_far(scores: ScoreSet, far_target: float = 0.01) -> float:
    """VER at the target FAR, linearly interpolated on the ROC.

    Where the target FAR is attained exactly, the best (largest) VER at
    that FAR is returned, i.e. the largest threshold whose FAR still
    meets the target.
    """
    if not 0.0 <= far_target <= 1.0:
        raise ValueError(f"FAR target must be in [0, 1], got {far_target}")
    far, ver = _sweep(scores)
    # collapse to unique FAR values, keeping the largest VER for each
    keep = np.append(far[1:] != far[:-1], True)
    far_c = far[keep]
    ver_c = ver[keep]
    j = int(np.searchsorted(far_c, far_target, side="right")) - 1
    if far_c[j] == far_target or j == len(far_c) - 1:
        return float(ver_c[j])
    t = (far_target - far_c[j]) / (far_c[j + 1] - far_c[j])
    return float(ver_c[j] + t * (ver_c[j + 1] - ver_c[j]))


def compute_auc(scores: ScoreSet) -> float:
    """Fraction of (legitimate, impostor) pairs won, ties counting 0.5.

    Evaluated symmetrically so that compute_auc on negated scores is
    exactly 1 - compute_auc on the originals.
    """
    legit = np.asarray(scores.legitimate, dtype=float)
    imp = np.sort(np.asarray(scores.impostor, dtype=float))
    below = np.searchsorted(imp, legit, side="left").sum()
    ties = (np.searchsorted(imp, legit, side="right").sum()) - below
    total = float(len(legit) * len(imp))
    wins = float(below) + 0.5 * float(ties)
    losses = total - float(below) - float(ties) + 0.5 * float(ties)
    if wins <= losses:
        return wins / total
    return 1.0 - losses / total


@dataclass(frozen=True)
class MetricsSummary:
    """Per-fold EER/VER-1/AUC plus their means and standard deviations."""

    eer: np.ndarray
    ver1: np.ndarray
    auc: np.ndarray

    def mean(self, metric: str) -> float:
        return float(np.mean(getattr(self, metric)))

    def std(self, metric: str) -> float:
        return float(np.std(getattr(self, metric)))


@dataclass(frozen=True)
class ExperimentResult:
    name: str
    context_mode: str
    summary: MetricsSummary
    rocs: list[np.ndarray]


def sample_fold_pairs(
    probe_ids: list[str], ref_ids: list[str], spec: ExperimentSpec, fold: int
) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Uniform without-replacement pair draw for one fold.

    Legitimate pairs share an identity, impostor pairs do not; the first
    index is a probe-split sample, the second a reference-split sample.
    When probe and reference use the same underlying split, a sample is
    never paired with itself.
    """
    rng = np.random.default_rng([spec.seed, fold])
    p = np.asarray(probe_ids, dtype=object)
    r = np.asarray(ref_ids, dtype=object)
    eq = p[:, None] == r[None, :]
    legit_mask = eq.copy()
    if spec.reference_split == "original":
        np.fill_diagonal(legit_mask, False)
    legit_all = np.argwhere(legit_mask)
    imp_all = np.argwhere(~eq)
    if len(legit_all) < spec.legit_pairs:
        raise ValueError(
            f"fold {fold}: need {spec.legit_pairs} legitimate pairs, "
            f"only {len(legit_all)} available"
        )
    if len(imp_all) < spec.impostor_pairs:
        raise ValueError(
            f"fold {fold}: need {spec.impostor_pairs} impostor pairs, "
            f"only {len(imp_all)} available"
        )
    legit_sel = legit_all[rng.permutation(len(legit_all))[: spec.legit_pairs]]
    imp_sel = imp_all[rng.permutation(len(imp_all))[: spec.impostor_pairs]]
    return (
        [tuple(map(int, pair)) for pair in legit_sel],
        [tuple(map(int, pair)) for pair in imp_sel],
    )


def naive_deidentify_image(img: np.ndarray, sample: FaceSample, kind: str) -> np.ndarray:
    """Blur or pixelate the detected face area of a frame.

    Block and blur strength derive from the face width: block =
    ceil(w / 8), sigma = w / 16.
    """
    if kind == "pixelated":
        transformed = pixelate(crop(img, sample.context), math.ceil(sample.tight.w / 8))
    elif kind == "blurred":
        transformed = gaussian_blur(crop(img, sample.context), sample.tight.w / 16.0)
    else:
        raise ValueError(f"unknown naive transform {kind!r}")
    out = img.copy()
    box = sample.context.clamped(img.shape[1], img.shape[0])
    out[box.y : box.y2, box.x : box.x2] = transformed
    return out


def parrot_transform(samples: list[FaceSample], transform: str) -> list[np.ndarray]:
    """Apply the same naive transform to reference images (imitation
    attack); transform 'none' returns the images unchanged."""
    if transform == "none":
        return [s.image for s in samples]
    return [naive_deidentify_image(s.image, s, transform) for s in samples]


def _context_box(sample: FaceSample, context_mode: str):
    if context_mode == "context":
        return sample.context
    return shrink_bbox(sample.context, NOCONTEXT_TRIM)


def embed_side(
    encoder: EncoderModel,
    images: list[np.ndarray],
    samples: list[FaceSample],
    context_mode: str,
) -> np.ndarray:
    """Embeddings of every image cropped per the context rule."""
    crops = [
        crop(img, _context_box(s, context_mode)) for img, s in zip(images, samples)
    ]
    return extract_embeddings(encoder, crops)


def score_pairs(
    probe_embeddings: np.ndarray,
    ref_embeddings: np.ndarray,
    legit_pairs: list[tuple[int, int]],
    impostor_pairs: list[tuple[int, int]],
) -> ScoreSet:
    """Cosine similarity for each sampled pair."""

    def _norm(e):
        n = np.linalg.norm(e, axis=1, keepdims=True)
        if np.any(n == 0):
            raise ValueError("zero embedding encountered while scoring")
        return e / n

    pn = _norm(np.asarray(probe_embeddings, dtype=float))
    rn = _norm(np.asarray(ref_embeddings, dtype=float))

    def _scores(pairs):
        pi = np.array([i for i, _ in pairs])
        ri = np.array([j for _, j in pairs])
        return np.clip(np.einsum("ij,ij->i", pn[pi], rn[ri]), -1.0, 1.0)

    return ScoreSet(legitimate=_scores(legit_pairs), impostor=_scores(impostor_pairs))


def prepare_probe_images(
    condition: str,
    frontal: list[FaceSample],
    encoder: EncoderModel,
    featdb,
    generator,
    pipeline_cfg: PipelineConfig,
) -> list[np.ndarray]:
    """Probe-side frames under the given condition."""
    if condition == "original":
        return [s.image for s in frontal]
    if condition == "deidentified":
        return [
            deidentify_frame(
                s.image, annotation_for_sample(s), encoder, featdb, generator,
                pipeline_cfg,
            )
            for s in frontal
        ]
    return [naive_deidentify_image(s.image, s, condition) for s in frontal]


def run_experiment(
    spec: ExperimentSpec,
    samples: list[FaceSample],
    encoder: EncoderModel,
    featdb,
    generator,
    pipeline_cfg: PipelineConfig,
    probe_cache: dict | None = None,
) -> ExperimentResult:
    """Run one experiment cell: per fold, sample pairs, score, aggregate.

    probe_cache (optional, caller-owned) memoizes transformed probe and
    reference image lists across experiment cells.
    """
    frontal, profile = split_by_pose(samples)
    refs = frontal if spec.reference_split == "original" else profile
    cache = probe_cache if probe_cache is not None else {}

    probe_key = ("probe", spec.probe_condition)
    if probe_key not in cache:
        cache[probe_key] = prepare_probe_images(
            spec.probe_condition, frontal, encoder, featdb, generator, pipeline_cfg
        )
    probe_images = cache[probe_key]

    ref_kind = spec.probe_condition if spec.parrot else "none"
    ref_key = ("ref", spec.reference_split, ref_kind)
    if ref_key not in cache:
        cache[ref_key] = parrot_transform(refs, ref_kind)
    ref_images = cache[ref_key]

    emb_probe_key = ("emb",) + probe_key + (spec.context_mode,)
    if emb_probe_key not in cache:
        cache[emb_probe_key] = embed_side(encoder, probe_images, frontal, spec.context_mode)
    emb_probe = cache[emb_probe_key]
    emb_ref_key = ("emb",) + ref_key + (spec.context_mode,)
    if emb_ref_key not in cache:
        cache[emb_ref_key] = embed_side(encoder, ref_images, refs, spec.context_mode)
    emb_ref = cache[emb_ref_key]

    probe_ids = [s.identity for s in frontal]
    ref_ids = [s.identity for s in refs]
    eers, ver1s, aucs, rocs = [], [], [], []
    for fold in range(spec.folds):
        legit, imp = sample_fold_pairs(probe_ids, ref_ids, spec, fold)
        scores = score_pairs(emb_probe, emb_ref, legit, imp)
        eers.append(compute_eer(scores))
        ver1s.append(compute_ver_at_far(scores))
        aucs.append(compute_auc(scores))
        rocs.append(compute_roc(scores))
    summary = MetricsSummary(
        eer=np.asarray(eers), ver1=np.asarray(ver1s), auc=np.asarray(aucs)
    )
    logger.info(
        "%s (%s): EER %.3f+-%.3f, VER-1 %.3f+-%.3f, AUC %.3f+-%.3f",
        spec.name,
        spec.context_mode,
        summary.mean("eer"),
        summary.std("eer"),
        summary.mean("ver1"),
        summary.std("ver1"),
        summary.mean("auc"),
        summary.std("auc"),
    )
    return ExperimentResult(
        name=spec.name, context_mode=spec.context_mode, summary=summary, rocs=rocs
    )


# --- report emission ---

_METRICS_HEADER = "experiment,context,fold,eer,ver1,auc"


def write_report(results: list[ExperimentResult], out_dir, plot: bool = True) -> Path:
    """Emit the metrics table, per-fold ROC point files, per-fold AUC
    lists, and optionally a vector-graphic ROC plot.  Returns the metrics
    file path."""
    if not results:
        raise ValueError("write_report needs at least one experiment result")
    out_dir = Path(out_dir)
    (out_dir / "roc").mkdir(parents=True, exist_ok=True)
    (out_dir / "auc").mkdir(parents=True, exist_ok=True)

    lines = [_METRICS_HEADER]
    for res in results:
        s = res.summary
        for fold in range(len(s.eer)):
            lines.append(
                f"{res.name},{res.context_mode},{fold},"
                f"{s.eer[fold]!r},{s.ver1[fold]!r},{s.auc[fold]!r}"
            )
        for stat in ("mean", "std"):
            fn = getattr(s, stat)
            lines.append(
                f"{res.name},{res.context_mode},{stat},"
                f"{fn('eer')!r},{fn('ver1')!r},{fn('auc')!r}"
            )
        for fold, roc in enumerate(res.rocs):
            roc_path = out_dir / "roc" / f"{res.name}__{res.context_mode}__fold{fold}.csv"
            roc_lines = ["far,ver"] + [f"{p[0]!r},{p[1]!r}" for p in roc]
            roc_path.write_text("\n".join(roc_lines) + "\n")
        auc_path = out_dir / "auc" / f"{res.name}__{res.context_mode}.csv"
        auc_lines = ["fold,auc"] + [f"{i},{v!r}" for i, v in enumerate(s.auc)]
        auc_path.write_text("\n".join(auc_lines) + "\n")

    metrics_path = out_dir / "metrics.csv"
    metrics_path.write_text("\n".join(lines) + "\n")
    if plot:
        write_roc_plot(results, out_dir / "roc_plot.svg")
    return metrics_path


def read_metrics(path) -> dict[tuple[str, str], dict]:
    """Parse a metrics.csv back into {(experiment, context): records}."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != _METRICS_HEADER:
        raise ValueError(f"{path}: unrecognized metrics header")
    out: dict[tuple[str, str], dict] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        name, context, fold, eer, ver1, auc = line.split(",")
        rec = out.setdefault((name, context), {"folds": {}, "mean": None, "std": None})
        values = {"eer": float(eer), "ver1": float(ver1), "auc": float(auc)}
        if fold in ("mean", "std"):
            rec[fold] = values
        else:
            rec["folds"][int(fold)] = values
    return out


_SVG_COLORS = (
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def write_roc_plot(results: list[ExperimentResult], path) -> None:
    """Standalone SVG with the first-fold ROC polyline per experiment."""
    width, height = 640, 480
    x0, y0, x1, y1 = 70.0, 420.0, 610.0, 40.0

    def sx(v):
        return x0 + v * (x1 - x0)

    def sy(v):
        return y0 + v * (y1 - y0)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
        f'<text x="{(x0 + x1) / 2}" y="{y0 + 35}" text-anchor="middle" '
        f'font-size="13">false acceptance rate</text>',
        f'<text x="20" y="{(y0 + y1) / 2}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 20 {(y0 + y1) / 2})">verification rate</text>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(
            f'<text x="{sx(tick)}" y="{y0 + 16}" text-anchor="middle" '
            f'font-size="11">{tick:g}</text>'
        )
        parts.append(
            f'<text x="{x0 - 8}" y="{sy(tick) + 4}" text-anchor="end" '
            f'font-size="11">{tick:g}</text>'
        )
    for i, res in enumerate(results):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        pts = " ".join(f"{sx(p[0]):.2f},{sy(p[1]):.2f}" for p in res.rocs[0])
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        ly = y1 + 14 * (i + 1)
        parts.append(
            f'<line x1="{x1 - 170}" y1="{ly - 4}" x2="{x1 - 150}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{x1 - 144}" y="{ly}" font-size="11">'
            f"{res.name} ({res.context_mode})</text>"
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
