"""Procedural face corpus: deterministic parametric cartoon faces with
identity, expression, pose and context cues, plus exact landmarks and
boxes.

Every sample is a 128x128 scene: a gray backdrop (no identity
information), a clothing strip whose hue is an identity-correlated
context cue outside the tight face box, and a face whose skin tone,
geometry and hair carry the identity.  Expressions alter mouth curvature
and brow angle only; the profile pose applies a horizontal shear and
offset approximating yaw; illumination scales pixel values.

Identity parameters are a pure function of (corpus seed, identity index).
Hue-like parameters are stratified with low-discrepancy sequences so that
identities stay visually separable at any corpus size.  Bounding boxes
carry a small deterministic per-sample jitter, modeling the sloppiness of
a real face detector, so crops never pixel-align across samples.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imgops import BoundingBox, load_image, save_image

CANVAS = 128
FACE_CX = 64.0
FACE_CY = 60.0
FACE_AY = 27.0
EYE_Y = FACE_CY - 6.0
NOSE_XY = (FACE_CX, FACE_CY + 6.0)
MOUTH_Y = FACE_CY + 16.0
BROW_Y = FACE_CY - 11.0
HAIR_CY = FACE_CY - 2.0
CLOTH_Y0 = 98
BBOX_JITTER = 2

EXPRESSIONS = ("neutral", "happy", "angry", "surprised")
POSES = ("frontal", "profile")
PROFILE_SHEAR = 0.22
PROFILE_SHIFT = 3.0

BACKDROP_VALUE = 0.80
CLOTH_SAT = 0.12
CLOTH_VAL = 0.52

HAIR_SAT = 0.45

# mouth bend (+ is a smile in image coordinates), brow angle delta, open mouth
_EXPRESSION_SHAPE = {
    "neutral": (0.0, 0.0, False),
    "happy": (3.4, 0.0, False),
    "angry": (-2.4, 0.38, False),
    "surprised": (0.0, -0.30, True),
}


class ManifestError(ValueError):
    """A corpus manifest is malformed or references missing files."""


def _hsv_to_rgb(h_deg: float, s: float, v: float) -> np.ndarray:
    h = (h_deg % 360.0) / 60.0
    c = v * s
    x = c * (1.0 - abs(h % 2.0 - 1.0))
    sector = int(h) % 6
    r, g, b = [(c, x, 0), (x, c, 0), (0, c, x), (0, x, c), (x, 0, c), (c, 0, x)][sector]
    m = v - c
    return np.array([r + m, g + m, b + m])


@dataclass(frozen=True)
class IdentityParams:
    """Bounded appearance parameters of one synthetic identity."""

    skin_hue: float  # degrees, [8, 32]
    skin_sat: float  # [0.32, 0.55]
    skin_val: float  # [0.55, 0.72]
    face_ax: float  # horizontal semi-axis, [19, 22] px
    eye_spacing: float  # [18, 20.5] px
    eye_radius: float  # [2.0, 3.6] px
    brow_angle: float  # baseline tilt, [-0.30, 0.30] rad
    mouth_halfwidth: float  # [7.0, 9.0] px
    hair_style: int  # hairline shape, 0..3
    hair_hue: float  # degrees, [10, 50]
    hair_val: float  # [0.25, 0.60]
    surround_hue: float  # clothing hue, degrees [0, 360); a weak cue (low saturation)


_GOLDEN = 0.618033988749895
_SQRT2F = 0.414213562373095
_SQRT3F = 0.732050807568877
_SQRT5F = 0.236067977499790


def identity_params(seed: int, index: int) -> IdentityParams:
    """Deterministic identity parameters for (corpus seed, identity index)."""
    if index < 0:
        raise ValueError(f"identity index must be >= 0, got {index}")
    base = np.random.default_rng([int(seed), 977]).uniform(0.0, 1.0, size=5)
    rng = np.random.default_rng([int(seed), 104729 + int(index)])
    hue_pos = (base[0] + _GOLDEN * index) % 1.0
    spacing_pos = (base[1] + _SQRT2F * index) % 1.0
    ax_pos = (base[2] + _SQRT5F * index) % 1.0
    val_pos = (base[3] + _SQRT3F * index) % 1.0
    surround_pos = (base[4] + _GOLDEN * index) % 1.0
    return IdentityParams(
        skin_hue=8.0 + 24.0 * hue_pos,
        skin_sat=0.32 + 0.23 * rng.uniform(),
        skin_val=0.55 + 0.17 * val_pos,
        face_ax=19.0 + 3.0 * ax_pos,
        eye_spacing=18.0 + 2.5 * spacing_pos,
        eye_radius=2.0 + 1.6 * rng.uniform(),
        brow_angle=-0.30 + 0.60 * rng.uniform(),
        mouth_halfwidth=7.0 + 2.0 * rng.uniform(),
        hair_style=int(rng.integers(0, 4)),
        hair_hue=10.0 + 40.0 * rng.uniform(),
        hair_val=0.25 + 0.35 * ((base[4] + _SQRT2F * index) % 1.0),
        surround_hue=360.0 * surround_pos,
    )


@dataclass
class FaceSample:
    """One rendered scene with its ground truth."""

    image: np.ndarray  # (128, 128, 3)
    landmarks: np.ndarray  # (5, 2): L eye, R eye, nose tip, L/R mouth corner
    tight: BoundingBox
    context: BoundingBox
    identity: str
    expression: str
    pose: str
    illumination: float


_HAIR_BASE = FACE_CY - 27.0  # forehead reference row


def _hairline(xf: np.ndarray, style: int, ax: float) -> np.ndarray:
    rel = np.abs(xf - FACE_CX)
    if style == 0:
        return np.full_like(xf, _HAIR_BASE)
    if style == 1:
        return (_HAIR_BASE - 3.0) + 7.0 * (rel / (ax + 2.5)) ** 2
    if style == 2:
        return (_HAIR_BASE - 2.5) + 0.35 * rel
    return (_HAIR_BASE + 3.5) - 0.18 * rel


def _bbox_jitter(params: IdentityParams, expression: str, pose: str,
                 illumination: float) -> tuple[int, int]:
    """Deterministic per-sample detector-box jitter in [-2, 2] pixels."""
    import zlib

    key = repr((params.skin_hue, params.eye_spacing, expression, pose, illumination))
    h = zlib.crc32(key.encode("utf-8"))
    return (h % (2 * BBOX_JITTER + 1)) - BBOX_JITTER, (
        (h // 7) % (2 * BBOX_JITTER + 1)
    ) - BBOX_JITTER


def render_face(
    params: IdentityParams,
    expression: str,
    pose: str,
    illumination: float,
    identity: str = "id?",
) -> FaceSample:
    """Rasterize one sample.  Bit-deterministic for identical inputs."""
    if expression not in EXPRESSIONS:
        raise ValueError(f"unknown expression {expression!r}")
    if pose not in POSES:
        raise ValueError(f"unknown pose {pose!r}")
    if not 0.5 <= illumination <= 1.5:
        raise ValueError(f"illumination must be in [0.5, 1.5], got {illumination}")

    shear, shift = (0.0, 0.0) if pose == "frontal" else (PROFILE_SHEAR, PROFILE_SHIFT)
    bend, brow_delta, mouth_open = _EXPRESSION_SHAPE[expression]

    yy, xx = np.mgrid[0:CANVAS, 0:CANVAS].astype(float)
    # face-space coordinates: undo the shear to test the frontal shapes
    xf = xx - shear * (yy - FACE_CY) - shift

    img = np.full((CANVAS, CANVAS, 3), BACKDROP_VALUE)
    img[CLOTH_Y0:, :] = _hsv_to_rgb(params.surround_hue, CLOTH_SAT, CLOTH_VAL)

    skin = _hsv_to_rgb(params.skin_hue, params.skin_sat, params.skin_val)
    ax = params.face_ax
    face = ((xf - FACE_CX) / ax) ** 2 + ((yy - FACE_CY) / FACE_AY) ** 2 <= 1.0
    img[face] = skin

    nose = ((xf - NOSE_XY[0]) / 1.8) ** 2 + ((yy - NOSE_XY[1]) / 2.8) ** 2 <= 1.0
    img[nose & face] = skin * 0.85

    lip = _hsv_to_rgb(5.0, 0.55, 0.48)
    mw = params.mouth_halfwidth
    if mouth_open:
        mouth = ((xf - FACE_CX) / 2.6) ** 2 + ((yy - (MOUTH_Y + 0.6)) / 3.4) ** 2 <= 1.0
    else:
        rel = (xf - FACE_CX) / mw
        curve_y = MOUTH_Y + bend * (1.0 - rel**2)
        mouth = (np.abs(rel) <= 1.0) & (np.abs(yy - curve_y) <= 1.3)
    img[mouth & face] = lip

    brow_rgb = _hsv_to_rgb(params.hair_hue, HAIR_SAT, params.hair_val * 0.7)
    eye_rgb = _hsv_to_rgb(0.0, 0.15, 0.10)
    sp = params.eye_spacing
    for side, ex in ((-1.0, FACE_CX - sp / 2.0), (1.0, FACE_CX + sp / 2.0)):
        angle = side * (params.brow_angle + brow_delta)
        ca, sa = math.cos(angle), math.sin(angle)
        dx = xf - ex
        dy = yy - BROW_Y
        u = dx * ca + dy * sa
        v = -dx * sa + dy * ca
        brow = (np.abs(u) <= 4.5) & (np.abs(v) <= 1.0)
        img[brow & face] = brow_rgb
        eye = (xf - ex) ** 2 + (yy - EYE_Y) ** 2 <= params.eye_radius**2
        img[eye] = eye_rgb

    hair_rgb = _hsv_to_rgb(params.hair_hue, HAIR_SAT, params.hair_val)
    hair_ell = ((xf - FACE_CX) / (ax + 2.5)) ** 2 + ((yy - HAIR_CY) / (FACE_AY + 3.0)) ** 2 <= 1.0
    hair = hair_ell & (yy < _hairline(xf, params.hair_style, ax))
    img[hair] = hair_rgb

    img = np.clip(img * illumination, 0.0, 1.0)

    lms_face = np.array(
        [
            [FACE_CX - sp / 2.0, EYE_Y],
            [FACE_CX + sp / 2.0, EYE_Y],
            [NOSE_XY[0], NOSE_XY[1]],
            [FACE_CX - mw, MOUTH_Y],
            [FACE_CX + mw, MOUTH_Y],
        ]
    )
    lms = lms_face.copy()
    lms[:, 0] += shear * (lms_face[:, 1] - FACE_CY) + shift

    x_lo_f = FACE_CX - (ax + 2.5) - 0.5
    x_hi_f = FACE_CX + (ax + 2.5) + 0.5
    y_lo_f = HAIR_CY - (FACE_AY + 3.0) - 0.5
    y_hi_f = FACE_CY + FACE_AY + 0.5
    corners_x = [
        xc + shear * (yc - FACE_CY) + shift
        for xc in (x_lo_f, x_hi_f)
        for yc in (y_lo_f, y_hi_f)
    ]
    jx, jy = _bbox_jitter(params, expression, pose, illumination)
    x0 = max(0, int(math.floor(min(corners_x))) + jx)
    x2 = min(CANVAS, int(math.ceil(max(corners_x))) + 1 + jx)
    y0 = max(0, int(math.floor(y_lo_f)) + jy)
    y2 = min(CANVAS, int(math.ceil(y_hi_f)) + 1 + jy)
    tight = BoundingBox(x0, y0, x2 - x0, y2 - y0)
    context = tight.grown(0.25).clamped(CANVAS, CANVAS)

    return FaceSample(
        image=img,
        landmarks=lms,
        tight=tight,
        context=context,
        identity=identity,
        expression=expression,
        pose=pose,
        illumination=float(illumination),
    )


def generate_corpus(
    seed: int,
    num_identities: int,
    expressions: tuple[str, ...] = EXPRESSIONS,
    poses: tuple[str, ...] = POSES,
    illuminations: tuple[float, ...] = (0.9, 1.1),
    first_identity: int = 0,
) -> list[FaceSample]:
    """Full factorial corpus over identities x expressions x poses x
    illumination levels, reproducible bit-exactly from the seed.

    first_identity offsets the identity indices, so disjoint populations
    (e.g. a gallery set and a probe set) can share one corpus seed.
    """
    if num_identities < 2:
        raise ValueError(f"corpus needs at least 2 identities, got {num_identities}")
    samples = []
    for index in range(first_identity, first_identity + num_identities):
        params = identity_params(seed, index)
        identity = f"id{index:02d}"
        for expression in expressions:
            for pose in poses:
                for level in illuminations:
                    samples.append(
                        render_face(params, expression, pose, level, identity=identity)
                    )
    return samples


def split_by_pose(samples: list[FaceSample]) -> tuple[list[FaceSample], list[FaceSample]]:
    """(frontal split, profile split); disjoint by construction."""
    frontal = [s for s in samples if s.pose == "frontal"]
    profile = [s for s in samples if s.pose == "profile"]
    return frontal, profile


def map_point_to_crop(point, bbox: BoundingBox, out_size: int) -> np.ndarray:
    """Map frame coordinates into a bbox crop resized to out_size (corner-
    aligned, matching resize_bilinear)."""
    p = np.asarray(point, dtype=float)
    sx = (out_size - 1) / (bbox.w - 1) if bbox.w > 1 else 0.0
    sy = (out_size - 1) / (bbox.h - 1) if bbox.h > 1 else 0.0
    return np.stack([(p[..., 0] - bbox.x) * sx, (p[..., 1] - bbox.y) * sy], axis=-1)


# --- manifest ---

_MANIFEST_HEADER = (
    "path,identity,expression,pose,illumination,"
    "l0x,l0y,l1x,l1y,l2x,l2y,l3x,l3y,l4x,l4y,"
    "tight_x,tight_y,tight_w,tight_h,ctx_x,ctx_y,ctx_w,ctx_h"
)


def write_corpus(samples: list[FaceSample], out_dir) -> Path:
    """Save images (PPM) plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [_MANIFEST_HEADER]
    for i, s in enumerate(samples):
        name = f"{i:04d}_{s.identity}_{s.expression}_{s.pose}.ppm"
        save_image(s.image, out_dir / name)
        fields = [name, s.identity, s.expression, s.pose, repr(s.illumination)]
        fields += [repr(float(v)) for v in s.landmarks.reshape(-1)]
        fields += [str(v) for b in (s.tight, s.context) for v in (b.x, b.y, b.w, b.h)]
        lines.append(",".join(fields))
    manifest = out_dir / "manifest.csv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(manifest_path) -> list[FaceSample]:
    """Load a corpus back from its manifest; errors name any missing image."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ManifestError(f"manifest not found: {manifest_path}")
    lines = manifest_path.read_text().splitlines()
    if not lines or lines[0] != _MANIFEST_HEADER:
        raise ManifestError(f"{manifest_path}: unrecognized manifest header")
    base = manifest_path.parent
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 23:
            raise ManifestError(
                f"{manifest_path}:{lineno}: expected 23 fields, got {len(fields)}"
            )
        path = base / fields[0]
        if not path.is_file():
            raise ManifestError(f"{manifest_path}:{lineno}: missing image {path}")
        try:
            illumination = float(fields[4])
            lms = np.array([float(v) for v in fields[5:15]]).reshape(5, 2)
            tx, ty, tw, th, cx, cy, cw, ch = (int(v) for v in fields[15:23])
        except ValueError as exc:
            raise ManifestError(f"{manifest_path}:{lineno}: {exc}") from None
        samples.append(
            FaceSample(
                image=load_image(path),
                landmarks=lms,
                tight=BoundingBox(tx, ty, tw, th),
                context=BoundingBox(cx, cy, cw, ch),
                identity=fields[1],
                expression=fields[2],
                pose=fields[3],
                illumination=illumination,
            )
        )
    return samples


def identity_vocabulary(samples: list[FaceSample]) -> list[str]:
    return sorted({s.identity for s in samples})


GENERATOR_CROP_GROW = 0.6


def generator_crop_box(sample: FaceSample) -> BoundingBox:
    """Head-shot crop used for generator training images."""
    return sample.tight.grown(GENERATOR_CROP_GROW).clamped(
        sample.image.shape[1], sample.image.shape[0]
    )


def build_generator_corpus(samples: list[FaceSample], out_size: int = 64):
    """Training set for the generator: one detected-box (context) crop per
    (identity, expression), frontal pose at the lowest illumination level.

    Head-shot style crops (face in the central portion of the image, as
    in the generator's training data in the original setting) matter
    here: the blending kernel is defined on the generated image, so the
    face must sit well inside the kernel's effective support.  The crop
    is the tight box grown by half per side, which also makes the warped
    surrogate's footprint cover the whole detected (context) region.

    The canonical landmark template (mean crop-space landmarks over
    identities, neutral expression) rides along and is frozen into the
    generator checkpoint.
    """
    from .generator import GeneratorCorpus
    from .imgops import crop, resize_bilinear

    frontal = [s for s in samples if s.pose == "frontal"]
    if not frontal:
        raise ValueError("corpus has no frontal samples")
    level = min(s.illumination for s in frontal)
    chosen: dict[tuple[str, str], FaceSample] = {}
    for s in frontal:
        if s.illumination == level:
            chosen.setdefault((s.identity, s.expression), s)

    ids = identity_vocabulary(samples)
    expressions = [e for e in EXPRESSIONS if any(s.expression == e for s in frontal)]
    images = []
    identity_idx = []
    expression_idx = []
    canonical = []
    for i, identity in enumerate(ids):
        for j, expression in enumerate(expressions):
            s = chosen.get((identity, expression))
            if s is None:
                raise ValueError(
                    f"corpus is missing a frontal sample for ({identity}, {expression})"
                )
            box = generator_crop_box(s)
            face = resize_bilinear(crop(s.image, box), out_size, out_size)
            images.append(face)
            identity_idx.append(i)
            expression_idx.append(j)
            if expression == expressions[0]:
                canonical.append(map_point_to_crop(s.landmarks, box, out_size))
    return GeneratorCorpus(
        images=np.stack(images),
        identity_idx=np.asarray(identity_idx),
        expression_idx=np.asarray(expression_idx),
        identity_labels=ids,
        expression_labels=expressions,
        canonical_landmarks=np.mean(canonical, axis=0),
    )


def build_encoder_corpus(
    samples: list[FaceSample], input_size: int = 32, crop_mode: str = "context"
):
    """Labeled crop set for encoder training (context crops by default)."""
    from .encoder import EncoderCorpus
    from .imgops import crop, resize_bilinear

    if crop_mode not in ("context", "tight"):
        raise ValueError(f"unknown crop mode {crop_mode!r}")
    ids = identity_vocabulary(samples)
    index = {identity: i for i, identity in enumerate(ids)}
    images = []
    labels = []
    for s in samples:
        box = s.context if crop_mode == "context" else s.tight
        images.append(resize_bilinear(crop(s.image, box), input_size, input_size))
        labels.append(index[s.identity])
    return EncoderCorpus(
        images=np.stack(images),
        labels=np.asarray(labels),
        identity_labels=ids,
    )
