"""Per-face deidentification: embed, match, generate, align, segment,
blend; plus per-sequence processing with an optional identity lock.

The flow for one annotated face:
  1. embed the detected (context) crop and match the k closest gallery
     identities,
  2. build the identity-mixing vector y and generate a surrogate face,
  3. skin-segment the surrogate in HSV and clean the mask by opening,
  4. fit a homography from the generator's canonical landmarks to the
     face's landmarks (robust consensus fit),
  5. warp the surrogate and the blend mask (radial kernel times skin
     mask, composed in generated coordinates) into the frame,
  6. alpha-blend.  Pixels where the composed mask is zero stay
     bit-identical to the input frame.

A face whose landmarks cannot be aligned is skipped and logged, never
approximated.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import EncoderModel, FeatDB, extract_embedding, identities_to_y, match_k_closest
from .generator import GeneratorModel, generate
from .geometry import (
    DegenerateGeometryError,
    NoConsensusError,
    RobustFitConfig,
    robust_homography,
    warp_image,
)
from .imgops import (
    BlendKernelSpec,
    BoundingBox,
    alpha_blend,
    crop,
    dilate,
    erode,
    gaussian_weight_mask,
    rgb_to_hsv,
)
from .layers import one_hot

logger = logging.getLogger(__name__)


class AlignmentError(RuntimeError):
    """Landmarks could not be aligned; the face is left untouched."""


class AnnotationError(ValueError):
    """A face annotation sidecar is malformed."""


@dataclass(frozen=True)
class SkinBounds:
    """HSV skin range in 8-bit-convention units (hue 0..179, S/V 0..255)."""

    lower: tuple[float, float, float] = (0.0, 10.0, 20.0)
    upper: tuple[float, float, float] = (200.0, 255.0, 255.0)

    def __post_init__(self):
        if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError(f"skin bounds lower {self.lower} exceed upper {self.upper}")


@dataclass(frozen=True)
class FaceAnnotation:
    """One detected face: boxes and five landmarks in frame coordinates."""

    tight: BoundingBox
    context: BoundingBox
    landmarks: np.ndarray  # (5, 2)
    track_id: int | None = None


@dataclass(frozen=True)
class FrameAnnotation:
    faces: tuple[FaceAnnotation, ...] = ()


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 2
    weight_mode: str = "uniform"
    expression: str = "neutral"
    skin_bounds: SkinBounds = field(default_factory=SkinBounds)
    morph_radius: int = 1
    robust: RobustFitConfig = field(default_factory=RobustFitConfig)
    identity_lock: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.weight_mode not in ("uniform", "similarity"):
            raise ValueError(f"unknown weight mode {self.weight_mode!r}")
        if self.morph_radius < 1:
            raise ValueError(f"morphology radius must be >= 1, got {self.morph_radius}")


def skin_segment(img: np.ndarray, bounds: SkinBounds) -> np.ndarray:
    """Binary mask of pixels whose HSV lies inside [lower, upper]."""
    hsv = rgb_to_hsv(img)
    lower = np.asarray(bounds.lower) / 255.0
    upper = np.asarray(bounds.upper) / 255.0
    inside = np.all((hsv >= lower) & (hsv <= upper), axis=2)
    return inside.astype(float)


def clean_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Morphological opening (erode then dilate) to drop isolated regions."""
    return dilate(erode(mask, radius), radius)


def plan_alignment(
    original_landmarks: np.ndarray,
    canonical_landmarks: np.ndarray,
    robust_cfg: RobustFitConfig,
) -> np.ndarray:
    """Homography taking generated-image coordinates to frame coordinates."""
    try:
        H, _ = robust_homography(canonical_landmarks, original_landmarks, robust_cfg)
    except (DegenerateGeometryError, NoConsensusError, ValueError) as exc:
        raise AlignmentError(f"landmark alignment failed: {exc}") from exc
    return H


def compose_blend_mask(
    kernel_mask: np.ndarray,
    skin_mask: np.ndarray,
    H: np.ndarray,
    frame_w: int,
    frame_h: int,
) -> np.ndarray:
    """Kernel times skin mask, warped into frame coordinates with fill 0."""
    if kernel_mask.shape != skin_mask.shape:
        raise ValueError(
            f"kernel {kernel_mask.shape} and skin mask {skin_mask.shape} differ"
        )
    return warp_image(kernel_mask * skin_mask, H, frame_w, frame_h, fill=0.0)


def _expression_onehot(generator: GeneratorModel, expression: str) -> np.ndarray:
    labels = generator.expression_labels
    if labels is None or expression not in labels:
        raise ValueError(
            f"generator does not know expression {expression!r}; has {labels}"
        )
    return one_hot([labels.index(expression)], generator.num_expressions)[0]


def _check_models(generator: GeneratorModel, featdb: FeatDB) -> None:
    if generator.num_identities != featdb.size:
        raise ValueError(
            f"gallery has {featdb.size} identities but the generator expects "
            f"{generator.num_identities}"
        )
    if generator.identity_labels is not None and list(featdb.ids) != list(
        generator.identity_labels
    ):
        raise ValueError("gallery identity order does not match the generator's")
    if generator.canonical_landmarks is None:
        raise ValueError("generator checkpoint carries no canonical landmarks")


def select_identity_weights(
    frame: np.ndarray,
    face: FaceAnnotation,
    encoder: EncoderModel,
    featdb: FeatDB,
    cfg: PipelineConfig,
) -> np.ndarray:
    """Embed the detected crop and weight the k closest gallery identities."""
    probe_crop = crop(frame, face.context)
    embedding = extract_embedding(encoder, probe_crop)
    matches = match_k_closest(featdb, embedding, cfg.k)
    return identities_to_y(matches, featdb, cfg.weight_mode)


def _blend_surrogate(
    frame: np.ndarray,
    face: FaceAnnotation,
    y: np.ndarray,
    encoder: EncoderModel,
    featdb: FeatDB,
    generator: GeneratorModel,
    cfg: PipelineConfig,
) -> np.ndarray:
    z = _expression_onehot(generator, cfg.expression)
    surrogate = generate(generator, y, z)
    skin = clean_mask(skin_segment(surrogate, cfg.skin_bounds), cfg.morph_radius)
    size = generator.output_size
    kernel = gaussian_weight_mask(BlendKernelSpec(size, size))
    H = plan_alignment(face.landmarks, generator.canonical_landmarks, cfg.robust)
    frame_h, frame_w = frame.shape[:2]
    warped_face = warp_image(surrogate, H, frame_w, frame_h, fill=0.0)
    mask = compose_blend_mask(kernel, skin, H, frame_w, frame_h)
    return alpha_blend(frame, warped_face, mask)


def deidentify_frame(
    frame: np.ndarray,
    annotation: FrameAnnotation,
    encoder: EncoderModel,
    featdb: FeatDB,
    generator: GeneratorModel,
    cfg: PipelineConfig,
    _locked: dict | None = None,
) -> np.ndarray:
    """Replace every annotated face in the frame with a blended surrogate.

    Faces are processed sequentially in annotation order; a face that
    fails alignment is logged and skipped, leaving its pixels untouched.
    """
    _check_models(generator, featdb)
    out = frame.copy()
    for face in annotation.faces:
        try:
            if (
                cfg.identity_lock
                and _locked is not None
                and face.track_id is not None
                and face.track_id in _locked
            ):
                y = _locked[face.track_id]
            else:
                y = select_identity_weights(out, face, encoder, featdb, cfg)
                if cfg.identity_lock and _locked is not None and face.track_id is not None:
                    _locked[face.track_id] = y
            out = _blend_surrogate(out, face, y, encoder, featdb, generator, cfg)
        except AlignmentError as exc:
            logger.warning("skipping face at %s: %s", face.tight, exc)
    return out


def deidentify_sequence(
    frames: list[np.ndarray],
    annotations: list[FrameAnnotation],
    encoder: EncoderModel,
    featdb: FeatDB,
    generator: GeneratorModel,
    cfg: PipelineConfig,
) -> list[np.ndarray]:
    """Process a frame sequence.  With the identity lock on, the identity
    weights chosen on a track's first frame are reused for all its frames;
    per-face errors are logged, never abort the sequence."""
    if len(frames) != len(annotations):
        raise ValueError(
            f"{len(frames)} frames but {len(annotations)} annotations"
        )
    locked: dict = {}
    out = []
    for frame, annotation in zip(frames, annotations):
        out.append(
            deidentify_frame(
                frame, annotation, encoder, featdb, generator, cfg,
                _locked=locked if cfg.identity_lock else None,
            )
        )
    return out


# --- annotation sidecars ---

_SIDECAR_HEADER = "# tight x,y,w,h, context x,y,w,h, 5 landmarks x,y, [track id]"


def write_annotation(annotation: FrameAnnotation, path) -> None:
    lines = [_SIDECAR_HEADER]
    for f in annotation.faces:
        fields = [str(v) for b in (f.tight, f.context) for v in (b.x, b.y, b.w, b.h)]
        fields += [repr(float(v)) for v in np.asarray(f.landmarks).reshape(-1)]
        if f.track_id is not None:
            fields.append(str(f.track_id))
        lines.append(",".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def read_annotation(path) -> FrameAnnotation:
    path = Path(path)
    if not path.is_file():
        raise AnnotationError(f"annotation sidecar not found: {path}")
    faces = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(",")
        if len(fields) not in (18, 19):
            raise AnnotationError(
                f"{path}:{lineno}: expected 18 or 19 fields, got {len(fields)}"
            )
        try:
            tx, ty, tw, th, cx, cy, cw, ch = (int(v) for v in fields[:8])
            lms = np.array([float(v) for v in fields[8:18]]).reshape(5, 2)
            track = int(fields[18]) if len(fields) == 19 else None
        except ValueError as exc:
            raise AnnotationError(f"{path}:{lineno}: {exc}") from None
        faces.append(
            FaceAnnotation(
                tight=BoundingBox(tx, ty, tw, th),
                context=BoundingBox(cx, cy, cw, ch),
                landmarks=lms,
                track_id=track,
            )
        )
    return FrameAnnotation(faces=tuple(faces))


def annotation_for_sample(sample, track_id: int | None = None) -> FrameAnnotation:
    """Frame annotation matching a corpus sample's ground truth."""
    return FrameAnnotation(
        faces=(
            FaceAnnotation(
                tight=sample.tight,
                context=sample.context,
                landmarks=np.asarray(sample.landmarks, dtype=float),
                track_id=track_id,
            ),
        )
    )
