"""Images, patch gathering, zero-padded filtering, synthetic deformations, PGM/PPM.

Images are plain float64 numpy arrays: ``(m, n)`` for grayscale and
``(3, m, n)`` (channel-planar) for RGB.  Filtering is cross-correlation with
the filter centred at ``(k1 // 2, k2 // 2)``, so the response at a pixel is the
inner product of the filter with the patch gathered around that pixel.
"""

from dataclasses import dataclass
import math
import re

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import InvalidConfigError, InvalidInputError, DataIntegrityError

# Upper bound on the im2col buffer materialized by batched filtering.
_WINDOW_BUDGET = 32 * 2**20  # float64 elements


def as_image(img):
    """Validate and convert to a float64 ``(m, n)`` or ``(3, m, n)`` array."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        ok = img.shape[0] >= 1 and img.shape[1] >= 1
    elif img.ndim == 3:
        ok = img.shape[0] in (1, 3) and img.shape[1] >= 1 and img.shape[2] >= 1
    else:
        ok = False
    if not ok:
        raise InvalidInputError(f"not an image array: shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise InvalidInputError("image contains non-finite samples")
    return img


def channels_of(img):
    return 1 if img.ndim == 2 else img.shape[0]


def to_gray(img):
    """RGB -> gray as the plain channel average."""
    img = as_image(img)
    return img if img.ndim == 2 else img.mean(axis=0)


def _pad(arr, k1, k2):
    # zero padding so that a k1 x k2 window centred at (k1//2, k2//2) fits everywhere
    c1, c2 = k1 // 2, k2 // 2
    widths = [(0, 0)] * (arr.ndim - 2) + [(c1, k1 - 1 - c1), (c2, k2 - 1 - c2)]
    return np.pad(arr, widths)


def extract_patches(img, k1, k2, remove_mean=True):
    """All ``m*n`` zero-padded ``k1 x k2`` patches of a grayscale image.

    Returns a ``(k1*k2, m*n)`` matrix.  Column ``j`` is the patch centred at
    pixel ``j`` (row-major over pixels), itself flattened row-major, with its
    own mean subtracted.
    """
    if k1 * k2 == 0:
        raise InvalidConfigError("patch size must be non-zero")
    img = as_image(img)
    if img.ndim != 2:
        raise InvalidInputError("extract_patches expects a single-channel image")
    return patch_rows(img[None], k1, k2, remove_mean)[0].T


def patch_rows(maps, k1, k2, remove_mean=True):
    """Batched patch gathering: ``(N, m, n)`` maps -> ``(N, m*n, k1*k2)``.

    Row ``j`` of slab ``i`` equals column ``j`` of ``extract_patches(maps[i])``.
    """
    maps = np.asarray(maps, dtype=np.float64)
    n_maps, m, n = maps.shape
    win = sliding_window_view(_pad(maps, k1, k2), (k1, k2), axis=(1, 2))
    rows = win.reshape(n_maps, m * n, k1 * k2)
    if remove_mean:
        rows = rows - rows.mean(axis=2, keepdims=True)
    return rows


def correlate_stack(maps, filters):
    """Zero-padded same-size cross-correlation of many maps with many filters.

    Parameters
    ----------
    maps : ndarray, shape (..., m, n) or (..., C, m, n)
        Leading axes are batch axes.  When ``filters`` carry a channel axis the
        maps must carry a matching one just before ``(m, n)``.
    filters : ndarray, shape (L, k1, k2) or (L, C, k1, k2)

    Returns
    -------
    ndarray, shape (..., L, m, n)
        Multichannel responses are summed over channels.
    """
    maps = np.asarray(maps, dtype=np.float64)
    filters = np.asarray(filters, dtype=np.float64)
    if filters.ndim == 3:
        filters = filters[:, None]
        maps = maps[..., None, :, :]
    n_f, ch, k1, k2 = filters.shape
    if maps.shape[-3] != ch:
        raise InvalidInputError(f"maps have {maps.shape[-3]} channels, filters {ch}")
    batch = maps.shape[:-3]
    m, n = maps.shape[-2:]
    flat = maps.reshape((-1, ch, m, n))
    kernel = filters.reshape(n_f, ch * k1 * k2).T
    out = np.empty((flat.shape[0], n_f, m, n))
    step = max(1, _WINDOW_BUDGET // (m * n * ch * k1 * k2))
    for lo in range(0, flat.shape[0], step):
        hi = min(lo + step, flat.shape[0])
        win = sliding_window_view(_pad(flat[lo:hi], k1, k2), (k1, k2), axis=(2, 3))
        # (b, ch, m, n, k1, k2) -> (b, m, n, ch*k1*k2)
        cols = np.moveaxis(win, 1, 3).reshape(hi - lo, m, n, ch * k1 * k2)
        out[lo:hi] = np.moveaxis(cols @ kernel, 3, 1)
    return out.reshape(batch + (n_f, m, n))


def filter_image(img, filt):
    """Same-size zero-padded cross-correlation of one grayscale image."""
    img = as_image(img)
    if img.ndim != 2:
        raise InvalidInputError("filter_image expects a single-channel image")
    filt = np.asarray(filt, dtype=np.float64)
    if filt.ndim != 2 or not np.all(np.isfinite(filt)):
        raise InvalidInputError("filter must be a finite 2-D grid")
    return correlate_stack(img, filt[None])[0]


# --------------------------------------------------------------------------
# deformations


@dataclass(frozen=True)
class Translate:
    dx: int = 0
    dy: int = 0


@dataclass(frozen=True)
class Rotate:
    degrees: float = 0.0


@dataclass(frozen=True)
class Scale:
    factor: float = 1.0

    def __post_init__(self):
        if not self.factor > 0:
            raise InvalidConfigError("scale factor must be positive")


@dataclass(frozen=True)
class Occlude:
    """Replace a randomly placed square covering ``fraction`` of the image.

    ``occluder`` supplies the replacement pixels (cropped at the same
    location, tiled if smaller); ``None`` means seeded uniform noise.
    """

    fraction: float = 0.0
    seed: int = 0
    occluder: object = None

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise InvalidConfigError("occlusion fraction must lie in [0, 1]")


def describe(d):
    """Short stable label for reports and CSV rows."""
    if isinstance(d, Translate):
        return f"translate({d.dx},{d.dy})"
    if isinstance(d, Rotate):
        return f"rotate({d.degrees:g})"
    if isinstance(d, Scale):
        return f"scale({d.factor:g})"
    if isinstance(d, Occlude):
        return f"occlude({d.fraction:g})"
    raise InvalidInputError(f"unknown deformation {d!r}")


def _shift(plane, dx, dy):
    m, n = plane.shape
    out = np.zeros_like(plane)
    if abs(dx) >= n or abs(dy) >= m:
        return out
    src_r = slice(max(0, -dy), m - max(0, dy))
    dst_r = slice(max(0, dy), m - max(0, -dy))
    src_c = slice(max(0, -dx), n - max(0, dx))
    dst_c = slice(max(0, dx), n - max(0, -dx))
    out[dst_r, dst_c] = plane[src_r, src_c]
    return out


def _warp(plane, matrix):
    # output pixel p samples input at matrix @ (p - centre) + centre, bilinear, zero outside
    m, n = plane.shape
    centre = np.array([(m - 1) / 2.0, (n - 1) / 2.0])
    offset = centre - matrix @ centre
    return ndimage.affine_transform(plane, matrix, offset=offset, order=1, mode="constant", cval=0.0)


def apply_deformation(img, d, rng=None):
    """Return a deformed copy of ``img``.

    Translation is an integer shift (positive ``dx`` moves content right,
    positive ``dy`` down) with zero fill.  Rotation and scaling act about the
    image centre with bilinear interpolation and zero fill.  Occlusion draws
    its block position from ``rng`` (default: ``default_rng(d.seed)``).
    """
    img = as_image(img)
    planes = img[None] if img.ndim == 2 else img
    if isinstance(d, Translate):
        if d.dx == 0 and d.dy == 0:
            return img.copy()
        out = np.stack([_shift(p, int(d.dx), int(d.dy)) for p in planes])
    elif isinstance(d, Rotate):
        if d.degrees % 360 == 0:
            return img.copy()
        t = math.radians(d.degrees)
        # counter-clockwise on screen; sampling uses the inverse (transposed) rotation
        # in (row, col) coordinates; round-off near multiples of 90 degrees is snapped
        # so edge samples do not fall a hair outside the grid
        cs, sn = (0.0 if abs(v) < 1e-12 else v for v in (math.cos(t), math.sin(t)))
        mat = np.array([[cs, sn], [-sn, cs]])
        out = np.stack([_warp(p, mat) for p in planes])
    elif isinstance(d, Scale):
        if d.factor == 1.0:
            return img.copy()
        mat = np.eye(2) / d.factor
        out = np.stack([_warp(p, mat) for p in planes])
    elif isinstance(d, Occlude):
        out = _occlude(planes, d, rng)
    else:
        raise InvalidInputError(f"unknown deformation {d!r}")
    return out[0] if img.ndim == 2 else out


def _occlude(planes, d, rng):
    ch, m, n = planes.shape
    side = min(int(round(math.sqrt(d.fraction * m * n))), m, n)
    out = planes.copy()
    if side == 0:
        return out
    rng = np.random.default_rng(d.seed) if rng is None else rng
    r0 = int(rng.integers(0, m - side + 1))
    c0 = int(rng.integers(0, n - side + 1))
    if d.occluder is None:
        patch = rng.uniform(0.0, 1.0, size=(ch, side, side))
    else:
        occ = as_image(d.occluder)
        occ = occ[None] if occ.ndim == 2 else occ
        if occ.shape[0] != ch:
            occ = np.broadcast_to(occ.mean(axis=0, keepdims=True), (ch,) + occ.shape[1:])
        reps = (1, math.ceil((r0 + side) / occ.shape[1]), math.ceil((c0 + side) / occ.shape[2]))
        patch = np.tile(occ, reps)[:, r0:r0 + side, c0:c0 + side]
    out[:, r0:r0 + side, c0:c0 + side] = patch
    return out


# --------------------------------------------------------------------------
# PGM / PPM


def write_pnm(path, img):
    """Write an 8-bit binary PGM (gray) or PPM (RGB); samples clipped to [0, 1]."""
    img = as_image(img)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if data.ndim == 2:
        magic, (m, n) = b"P5", data.shape
        payload = data.tobytes()
    else:
        magic, (m, n) = b"P6", data.shape[1:]
        payload = np.moveaxis(data, 0, 2).tobytes()
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (n, m) + payload)


_PNM_TOKEN = re.compile(rb"(?:\s+|#[^\n]*\n)*(\S+)")


def read_pnm(path):
    """Read a binary PGM/PPM with maxval 255; returns samples scaled to [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0
    tokens = []
    for _ in range(4):
        match = _PNM_TOKEN.match(raw, pos)
        if match is None:
            raise DataIntegrityError(f"{path}: truncated PNM header")
        tokens.append(match.group(1))
        pos = match.end()
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataIntegrityError(f"{path}: unsupported PNM magic {magic!r}")
    try:
        n, m, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DataIntegrityError(f"{path}: malformed PNM header") from exc
    if maxval != 255:
        raise DataIntegrityError(f"{path}: only maxval 255 is supported")
    ch = 1 if magic == b"P5" else 3
    body = raw[pos + 1:pos + 1 + m * n * ch]
    if len(body) != m * n * ch:
        raise DataIntegrityError(f"{path}: truncated pixel data")
    data = np.frombuffer(body, dtype=np.uint8).astype(np.float64) / 255.0
    if ch == 1:
        return data.reshape(m, n)
    return np.moveaxis(data.reshape(m, n, 3), 2, 0)
