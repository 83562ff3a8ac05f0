"""Pixel-level image primitives shared by the whole pipeline.

Images are numpy float64 arrays with values in [0, 1]: color images have
shape (h, w, 3), grayscale images and masks have shape (h, w).  8-bit
quantization happens only at the file boundary (binary PPM/PGM).

Conventions fixed here once and used everywhere:
  * HSV follows the 8-bit convention: hue occupies 0..179 (half degrees),
    saturation and value 0..255, all rescaled to the unit range.
  * resize_bilinear uses corner-aligned sampling: source coordinate of
    output pixel i is i * (in - 1) / (out - 1).
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DecodeError(ValueError):
    """An image file could not be decoded."""


@dataclass(frozen=True)
class BoundingBox:
    """Integer pixel box anchored at its top-left corner."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"bounding box must have positive size, got {self}")

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    def clamped(self, width: int, height: int) -> "BoundingBox":
        """Intersect with a width x height image; error on empty intersection."""
        x0 = max(self.x, 0)
        y0 = max(self.y, 0)
        x1 = min(self.x2, width)
        y1 = min(self.y2, height)
        if x1 - x0 < 1 or y1 - y0 < 1:
            raise ValueError(
                f"bounding box {self} does not intersect a {width}x{height} image"
            )
        return BoundingBox(x0, y0, x1 - x0, y1 - y0)

    def grown(self, fraction: float) -> "BoundingBox":
        """Grow each side outward by round(fraction * side)."""
        gx = int(round(fraction * self.w))
        gy = int(round(fraction * self.h))
        return BoundingBox(self.x - gx, self.y - gy, self.w + 2 * gx, self.h + 2 * gy)

    def contains(self, other: "BoundingBox") -> bool:
        return (
            self.x <= other.x
            and self.y <= other.y
            and other.x2 <= self.x2
            and other.y2 <= self.y2
        )


def validate_image(img: np.ndarray) -> None:
    """Check the shared image invariants (shape, finiteness, range)."""
    if not isinstance(img, np.ndarray):
        raise TypeError("image must be a numpy array")
    if img.ndim == 3:
        if img.shape[2] not in (1, 3):
            raise ValueError(f"image must have 1 or 3 channels, got {img.shape[2]}")
    elif img.ndim != 2:
        raise ValueError(f"image must be 2-d or 3-d, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image must be at least 1x1, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite samples")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError(
            f"image samples outside [0, 1]: min={img.min()}, max={img.max()}"
        )


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """Convert an RGB image to HSV in the 8-bit convention, unit-scaled.

    Output channels: hue in [0, 179/255] (full circle maps to half degrees
    over 255), saturation and value in [0, 1].  One-way conversion; the
    pipeline never needs the inverse.
    """
    img = np.asarray(img, dtype=float)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"rgb_to_hsv expects a 3-channel image, got shape {img.shape}")
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = img.max(axis=2)
    minc = img.min(axis=2)
    delta = maxc - minc
    sat = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)

    chroma = np.where(delta > 0, delta, 1.0)
    h_deg = np.zeros_like(maxc)
    is_r = (maxc == r) & (delta > 0)
    is_g = (maxc == g) & (delta > 0) & ~is_r
    is_b = (delta > 0) & ~is_r & ~is_g
    h_deg = np.where(is_r, 60.0 * (((g - b) / chroma) % 6.0), h_deg)
    h_deg = np.where(is_g, 60.0 * ((b - r) / chroma + 2.0), h_deg)
    h_deg = np.where(is_b, 60.0 * ((r - g) / chroma + 4.0), h_deg)
    hue = (h_deg / 2.0) / 255.0
    return np.stack([hue, sat, maxc], axis=2)


def crop(img: np.ndarray, bbox: BoundingBox) -> np.ndarray:
    """Copy the pixels under bbox (clamped to the image)."""
    validate_image(img)
    b = bbox.clamped(img.shape[1], img.shape[0])
    return img[b.y : b.y2, b.x : b.x2].copy()


def shrink_bbox(bbox: BoundingBox, fraction: float) -> BoundingBox:
    """Move every side of the box inward by floor(fraction * side)."""
    if not 0.0 <= fraction < 0.5:
        raise ValueError(f"shrink fraction must be in [0, 0.5), got {fraction}")
    dx = int(math.floor(fraction * bbox.w))
    dy = int(math.floor(fraction * bbox.h))
    w = bbox.w - 2 * dx
    h = bbox.h - 2 * dy
    if w < 1 or h < 1:
        raise ValueError(f"shrinking {bbox} by {fraction} leaves an empty box")
    return BoundingBox(bbox.x + dx, bbox.y + dy, w, h)


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Resample to out_w x out_h with corner-aligned bilinear interpolation."""
    validate_image(img)
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be at least 1x1, got {out_w}x{out_h}")
    h, w = img.shape[:2]
    if out_w == w and out_h == h:
        return img.copy()

    def _coords(n_in, n_out):
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out)
        return np.arange(n_out) * ((n_in - 1) / (n_out - 1))

    sx = _coords(w, out_w)
    sy = _coords(h, out_h)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0

    extra = (1,) * (img.ndim - 2)
    fx = fx.reshape((1, out_w) + extra)
    fy = fy.reshape((out_h, 1) + extra)
    top = img[y0][:, x0] * (1.0 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1.0 - fx) + img[y1][:, x1] * fx
    out = top * (1.0 - fy) + bot * fy
    return np.clip(out, 0.0, 1.0)


def _blur_axis(data: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = (len(kernel) - 1) // 2
    n = data.shape[axis]
    pad = [(0, 0)] * data.ndim
    pad[axis] = (r, r)
    padded = np.pad(data, pad)
    out = np.zeros_like(data)
    sl = [slice(None)] * data.ndim
    for k, wk in enumerate(kernel):
        sl[axis] = slice(k, k + n)
        out += wk * padded[tuple(sl)]
    # renormalize where the kernel hangs over the border
    ones = np.pad(np.ones(n), (r, r))
    norm = np.zeros(n)
    for k, wk in enumerate(kernel):
        norm += wk * ones[k : k + n]
    shape = [1] * data.ndim
    shape[axis] = n
    return out / norm.reshape(shape)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at 3 sigma, borders renormalized."""
    if sigma <= 0:
        raise ValueError(f"blur sigma must be positive, got {sigma}")
    validate_image(img)
    r = max(1, int(math.ceil(3.0 * sigma)))
    t = np.arange(-r, r + 1, dtype=float)
    kernel = np.exp(-(t * t) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()
    out = _blur_axis(img, kernel, axis=0)
    out = _blur_axis(out, kernel, axis=1)
    return np.clip(out, 0.0, 1.0)


def pixelate(img: np.ndarray, block: int) -> np.ndarray:
    """Replace every block x block tile by its mean (partial tiles at edges).

    The mean is computed as anchor + mean(tile - anchor) so that a tile that
    is already constant maps to exactly that constant, which makes the
    operation exactly idempotent for a fixed block size.
    """
    validate_image(img)
    block = int(block)
    if block < 1:
        raise ValueError(f"block size must be >= 1, got {block}")
    if block == 1:
        return img.copy()
    out = np.empty_like(img)
    h, w = img.shape[:2]
    for y0 in range(0, h, block):
        for x0 in range(0, w, block):
            tile = img[y0 : y0 + block, x0 : x0 + block]
            anchor = tile[0, 0]
            out[y0 : y0 + block, x0 : x0 + block] = anchor + (tile - anchor).mean(
                axis=(0, 1)
            )
    return out


def morphology(mask: np.ndarray, op: str, radius: int) -> np.ndarray:
    """Min/max filter a binary mask with a square element of side 2*radius+1.

    Input values are thresholded at 0.5 first; out-of-bounds counts as 0.
    """
    if op not in ("erode", "dilate"):
        raise ValueError(f"morphology op must be 'erode' or 'dilate', got {op!r}")
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    if mask.ndim != 2:
        raise ValueError(f"mask must be single-channel, got shape {mask.shape}")
    binary = (np.asarray(mask, dtype=float) >= 0.5).astype(float)
    r = int(radius)
    h, w = binary.shape
    padded = np.pad(binary, r)
    reduce_fn = np.minimum if op == "erode" else np.maximum
    out = None
    for dy in range(2 * r + 1):
        for dx in range(2 * r + 1):
            win = padded[dy : dy + h, dx : dx + w]
            out = win.copy() if out is None else reduce_fn(out, win, out=out)
    return out


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    return morphology(mask, "erode", radius)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    return morphology(mask, "dilate", radius)


@dataclass(frozen=True)
class BlendKernelSpec:
    """Geometry of the radial blending kernel for a w x h generated image.

    With s = min(w, h): center (s/2, s/2), spread s/6.
    """

    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"kernel spec needs positive dims, got {self.w}x{self.h}")

    @property
    def s(self) -> int:
        return min(self.w, self.h)

    @property
    def mu_x(self) -> float:
        return self.s / 2.0

    @property
    def mu_y(self) -> float:
        return self.s / 2.0

    @property
    def sigma(self) -> float:
        return self.s / 6.0


def gaussian_weight_mask(spec: BlendKernelSpec) -> np.ndarray:
    """Radial Gaussian weight mask, exp(-((x-mu_x)^2+(y-mu_y)^2)/(2 sigma^2)).

    Evaluated at integer pixel coordinates, not renormalized.
    """
    xs = np.arange(spec.w, dtype=float) - spec.mu_x
    ys = np.arange(spec.h, dtype=float) - spec.mu_y
    d2 = ys[:, None] ** 2 + xs[None, :] ** 2
    return np.exp(-d2 / (2.0 * spec.sigma**2))


def alpha_blend(
    original: np.ndarray, synthetic: np.ndarray, mask: np.ndarray
) -> np.ndarray:
    """Per-pixel mask * synthetic + (1 - mask) * original."""
    if original.shape != synthetic.shape:
        raise ValueError(
            f"original {original.shape} and synthetic {synthetic.shape} differ"
        )
    if mask.shape != original.shape[:2]:
        raise ValueError(
            f"mask shape {mask.shape} does not match image {original.shape[:2]}"
        )
    m = mask if original.ndim == 2 else mask[..., None]
    return m * synthetic + (1.0 - m) * original


# --- file boundary (binary PPM / PGM, 8-bit) ---


def save_image(img: np.ndarray, path) -> None:
    """Write as binary PPM (color) or PGM (gray), maxval 255."""
    validate_image(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    arr = np.round(img * 255.0).astype(np.uint8)
    magic = b"P6" if arr.ndim == 3 else b"P5"
    header = magic + b"\n%d %d\n255\n" % (arr.shape[1], arr.shape[0])
    Path(path).write_bytes(header + arr.tobytes())


def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise DecodeError(f"unexpected end of header at byte {pos}")
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def load_image(path) -> np.ndarray:
    """Read a binary PPM/PGM file into a float image in [0, 1]."""
    data = Path(path).read_bytes()
    if len(data) < 2:
        raise DecodeError("file too short for a PNM header at byte 0")
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise DecodeError(f"unsupported magic {magic!r} at byte 0")
    channels = 3 if magic == b"P6" else 1
    pos = 2
    fields = []
    for _ in range(3):
        token, pos = _next_token(data, pos)
        try:
            fields.append(int(token))
        except ValueError:
            raise DecodeError(
                f"invalid header token {token!r} at byte {pos - len(token)}"
            ) from None
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise DecodeError(f"invalid dimensions {w}x{h} at byte {pos}")
    if maxval != 255:
        raise DecodeError(f"unsupported maxval {maxval} at byte {pos}")
    pos += 1  # single whitespace after maxval
    expected = w * h * channels
    if len(data) - pos < expected:
        raise DecodeError(
            f"truncated pixel data at byte {len(data)}: "
            f"expected {expected} bytes from byte {pos}"
        )
    arr = np.frombuffer(data, dtype=np.uint8, count=expected, offset=pos)
    arr = arr.reshape((h, w, 3) if channels == 3 else (h, w))
    return arr.astype(float) / 255.0
