"""Breast-lobe isolation and dual-scale plane extraction.

Turns a raw mammogram into the two network inputs: the *masked* scale
(lobe isolated from background, cropped to its bounding box) and the
*cropped* scale (sub-image around the annotated ROI), both resampled to a
square network input size.

Resampling convention: bilinear, corner-aligned (output pixel i maps to
input coordinate i * (n_in - 1) / (n_out - 1)).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping

import numpy as np
from scipy import ndimage

from .errors import (
    BackendUnavailable,
    EmptyInput,
    NoForeground,
    NoViews,
    RoiOutOfBounds,
    ShapeMismatch,
)

DEFAULT_SIDE = 224
OTSU_BINS = 256

# Inclusive pixel box (row_min, col_min, row_max, col_max).
Bbox = tuple[int, int, int, int]


class View(str, Enum):
    CC = "CC"
    MLO = "MLO"


class Scale(str, Enum):
    MASKED = "masked"
    CROPPED = "cropped"


class SegmenterBackend(str, Enum):
    CLASSICAL = "classical"
    EXTERNAL = "external"


@dataclass(frozen=True)
class RawMammogram:
    """A decoded grayscale mammogram with luminance in [0, 1]."""

    pixels: np.ndarray
    view: View
    source_id: str = ""

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ShapeMismatch(f"expected a 2-D grid, got ndim={px.ndim}")
        if px.shape[0] < 8 or px.shape[1] < 8:
            raise ShapeMismatch(f"image too small: {px.shape}, need at least 8x8")
        if not np.all(np.isfinite(px)):
            raise ValueError("pixel values must be finite")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class SegmenterOutput:
    """Foreground mask plus its tight inclusive bounding box."""

    mask: np.ndarray
    bbox: Bbox


@dataclass(frozen=True)
class ImagePlane:
    """A square, network-ready plane tagged with its view and scale."""

    pixels: np.ndarray
    view: View
    scale: Scale

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] != px.shape[1]:
            raise ShapeMismatch(f"plane must be square, got {px.shape}")
        object.__setattr__(self, "pixels", px)

    @property
    def side(self) -> int:
        return self.pixels.shape[0]


# A user-supplied segmenter for the external backend.
ExternalSegmenter = Callable[[RawMammogram], SegmenterOutput]


def otsu_threshold(pixels: np.ndarray) -> float:
    """Global Otsu threshold for values in [0, 1], on a 256-bin histogram.

    Returns the lower edge of the first foreground bin; pixels >= the
    returned value are foreground. Raises NoForeground when no split
    leaves both classes nonempty (e.g. a constant image).
    """
    bins = np.minimum((np.asarray(pixels) * OTSU_BINS).astype(np.int64), OTSU_BINS - 1)
    hist = np.bincount(bins.ravel(), minlength=OTSU_BINS).astype(np.float64)
    total = hist.sum()
    levels = np.arange(OTSU_BINS, dtype=np.float64)

    w0 = np.cumsum(hist)  # pixels in bins 0..t
    m0 = np.cumsum(hist * levels)  # first moment of bins 0..t
    best_t, best_var = -1, -1.0
    for t in range(OTSU_BINS - 1):
        n0, n1 = w0[t], total - w0[t]
        if n0 == 0 or n1 == 0:
            continue
        mu0 = m0[t] / n0
        mu1 = (m0[-1] - m0[t]) / n1
        var = n0 * n1 * (mu0 - mu1) ** 2
        if var > best_var:
            best_var, best_t = var, t
    if best_t < 0:
        raise NoForeground("no threshold separates the histogram into two classes")
    return (best_t + 1) / OTSU_BINS


def mask_bbox(mask: np.ndarray) -> Bbox:
    """Tight inclusive bounding box of a nonempty boolean mask."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise NoForeground("mask is empty")
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def segment_lobe(
    img: RawMammogram,
    backend: SegmenterBackend = SegmenterBackend.CLASSICAL,
    external: ExternalSegmenter | None = None,
) -> SegmenterOutput:
    """Isolate the breast lobe from the background.

    Classical backend: Otsu threshold, then keep the largest 4-connected
    foreground component. External backend: delegate to a user-supplied
    segmenter treated as a black box.
    """
    if backend == SegmenterBackend.EXTERNAL:
        if external is None:
            raise BackendUnavailable("external segmenter backend is not configured")
        out = external(img)
        if out.mask.shape != img.pixels.shape:
            raise ShapeMismatch("external segmenter returned a mask of the wrong shape")
        return out

    thresh = otsu_threshold(img.pixels)
    fg = img.pixels >= thresh
    if not fg.any():
        raise NoForeground("thresholded image has zero foreground pixels")
    labels, n = ndimage.label(fg)  # default structure = 4-connectivity
    counts = np.bincount(labels.ravel())
    counts[0] = 0  # background label
    keep = int(np.argmax(counts))
    mask = labels == keep
    return SegmenterOutput(mask=mask, bbox=mask_bbox(mask))


def apply_mask_and_crop(img: RawMammogram, seg: SegmenterOutput) -> np.ndarray:
    """Zero the background under the mask and crop to the mask's bbox."""
    if seg.mask.shape != img.pixels.shape:
        raise ShapeMismatch(
            f"mask shape {seg.mask.shape} does not match image {img.pixels.shape}"
        )
    r0, c0, r1, c1 = seg.bbox
    masked = img.pixels * seg.mask
    return masked[r0 : r1 + 1, c0 : c1 + 1]


def crop_roi(img: RawMammogram, roi: Bbox) -> np.ndarray:
    """Cut the sub-grid under an inclusive ROI box; no masking applied."""
    r0, c0, r1, c1 = roi
    if not (0 <= r0 <= r1 < img.height and 0 <= c0 <= c1 < img.width):
        raise RoiOutOfBounds(f"roi {roi} outside image of shape {img.pixels.shape}")
    return img.pixels[r0 : r1 + 1, c0 : c1 + 1]


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    if n_in == 1:
        return np.zeros(n_out)
    if n_out == 1:
        return np.zeros(1)
    return np.linspace(0.0, n_in - 1.0, n_out)


def bilinear_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resampling; output clamped to [0, 1]."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise EmptyInput("cannot resize an empty grid")
    h, w = grid.shape
    rs, cs = _axis_coords(h, out_h), _axis_coords(w, out_w)
    r0 = np.minimum(np.floor(rs).astype(np.int64), h - 1)
    c0 = np.minimum(np.floor(cs).astype(np.int64), w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rs - r0)[:, None]
    fc = (cs - c0)[None, :]
    top = grid[np.ix_(r0, c0)] * (1 - fc) + grid[np.ix_(r0, c1)] * fc
    bot = grid[np.ix_(r1, c0)] * (1 - fc) + grid[np.ix_(r1, c1)] * fc
    out = top * (1 - fr) + bot * fr
    return np.clip(out, 0.0, 1.0)


def resize_to_input(grid: np.ndarray, side: int, view: View, scale: Scale) -> ImagePlane:
    """Resample a grid to side x side and tag it as a network input plane."""
    if side < 8:
        raise ValueError(f"side must be >= 8, got {side}")
    return ImagePlane(pixels=bilinear_resize(grid, side, side), view=view, scale=scale)


@dataclass(frozen=True)
class RawView:
    """One view's raw inputs: the full mammogram and its optional ROI box."""

    image: RawMammogram
    roi: Bbox | None = None


def preprocess_view(
    raw: RawView,
    side: int = DEFAULT_SIDE,
    backend: SegmenterBackend = SegmenterBackend.CLASSICAL,
    external: ExternalSegmenter | None = None,
) -> tuple[ImagePlane, ImagePlane]:
    """Produce the (masked, cropped) plane pair for a single view.

    When no ROI is supplied the segmenter's bounding box stands in, so the
    cropped scale degrades to an unmasked crop of the lobe box.
    """
    seg = segment_lobe(raw.image, backend=backend, external=external)
    masked = resize_to_input(
        apply_mask_and_crop(raw.image, seg), side, raw.image.view, Scale.MASKED
    )
    roi = raw.roi if raw.roi is not None else seg.bbox
    cropped = resize_to_input(
        crop_roi(raw.image, roi), side, raw.image.view, Scale.CROPPED
    )
    return masked, cropped


def preprocess_exam(
    raw_views: Mapping[View, RawView],
    side: int = DEFAULT_SIDE,
    backend: SegmenterBackend = SegmenterBackend.CLASSICAL,
    external: ExternalSegmenter | None = None,
) -> dict[View, tuple[ImagePlane, ImagePlane]]:
    """Preprocess every present view of one exam.

    Returns a (masked, cropped) pair per present view: two planes for a
    single-view exam, four for a dual-view exam. Absent views simply do
    not appear in the result.
    """
    if not raw_views:
        raise NoViews("exam has no views to preprocess")
    return {
        view: preprocess_view(raw, side=side, backend=backend, external=external)
        for view, raw in raw_views.items()
    }
