"""Exam-level data model, manifest I/O, CBIS-style ingestion, and the synthetic generator.

Manifest format (CSV, one row per breast exam; lines starting with '#' are
comments):

    breast_id,patient_id,label,cc_path,cc_roi,mlo_path,mlo_roi,split

ROI cells are "r0:c0:r1:c1" (inclusive), empty cells mean the view is
absent. After `prep` the path columns are replaced by plane paths:

    breast_id,patient_id,label,cc_masked,cc_cropped,mlo_masked,mlo_cropped,split

Paths are stored relative to the manifest's directory.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BadRate, MissingColumn, NoViews
from .prep import Bbox, ImagePlane, RawMammogram, Scale, View

logger = logging.getLogger(__name__)

SPLIT_TRAIN = "train"
SPLIT_TEST = "test"

RAW_COLUMNS = ["breast_id", "patient_id", "label", "cc_path", "cc_roi", "mlo_path", "mlo_roi", "split"]
PREPPED_COLUMNS = ["breast_id", "patient_id", "label", "cc_masked", "cc_cropped", "mlo_masked", "mlo_cropped", "split"]

# Synthetic malignant blobs are at least this much brighter than the lobe.
SYNTHETIC_BLOB_MARGIN = 0.3


@dataclass
class ViewData:
    """One view of one exam, before and/or after preprocessing."""

    raw: RawMammogram | None = None
    raw_path: Path | None = None
    roi: Bbox | None = None
    masked: ImagePlane | None = None
    cropped: ImagePlane | None = None
    masked_path: Path | None = None
    cropped_path: Path | None = None


@dataclass
class BreastExam:
    """The unit of classification: all available views and scales of one breast."""

    breast_id: str
    patient_id: str
    label: int
    views: dict[View, ViewData]
    split: str = SPLIT_TRAIN
    augment: str = "identity"

    def __post_init__(self) -> None:
        if not self.views:
            raise NoViews(f"exam {self.breast_id} has no views")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")

    def present(self, view: View) -> bool:
        return view in self.views

    @property
    def presence(self) -> dict[View, bool]:
        return {v: v in self.views for v in View}

    @property
    def both_views(self) -> bool:
        return len(self.views) == 2

    def planes(self) -> dict[View, tuple[ImagePlane, ImagePlane]]:
        """(masked, cropped) per present view; requires preprocessing done."""
        out = {}
        for view, vd in self.views.items():
            if vd.masked is None or vd.cropped is None:
                raise ValueError(f"exam {self.breast_id} view {view.value} not preprocessed")
            out[view] = (vd.masked, vd.cropped)
        return out


@dataclass
class Manifest:
    """An ordered collection of exams, optionally restricted to one split."""

    exams: list[BreastExam]
    split: str | None = None

    def __len__(self) -> int:
        return len(self.exams)

    def subset(self, split: str) -> "Manifest":
        return Manifest([e for e in self.exams if e.split == split], split=split)


def cohort_split(manifest: Manifest) -> tuple[list[BreastExam], list[BreastExam]]:
    """Partition exams into (both-views, missing-view) cohorts, order preserved."""
    both = [e for e in manifest.exams if e.both_views]
    missing = [e for e in manifest.exams if not e.both_views]
    return both, missing


# --------------------------------------------------------------------------
# Image and manifest I/O


def save_image(pixels: np.ndarray, path: Path) -> None:
    """Write a [0, 1] grid as a 16-bit grayscale PNG."""
    arr = np.round(np.clip(pixels, 0.0, 1.0) * 65535.0).astype(np.uint16)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def load_image(path: Path) -> np.ndarray:
    """Read a grayscale PNG back to a [0, 1] float grid."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    peak = 65535.0 if arr.dtype == np.uint16 or arr.max() > 255 else 255.0
    return arr.astype(np.float64) / peak


def _format_roi(roi: Bbox | None) -> str:
    return "" if roi is None else ":".join(str(v) for v in roi)


def _parse_roi(cell: str) -> Bbox | None:
    if not cell:
        return None
    r0, c0, r1, c1 = (int(v) for v in cell.split(":"))
    return (r0, c0, r1, c1)


def _relpath(path: Path, base: Path) -> str:
    try:
        return path.resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return path.as_posix()


def write_manifest(manifest: Manifest, path: Path, header_notes: list[str] | None = None) -> None:
    """Write exams as a raw or prepped manifest, whichever fields are set."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    prepped = any(
        vd.masked_path is not None for e in manifest.exams for vd in e.views.values()
    )
    base = path.parent
    with open(path, "w", newline="") as fh:
        for note in header_notes or []:
            fh.write(f"# {note}\n")
        writer = csv.writer(fh)
        writer.writerow(PREPPED_COLUMNS if prepped else RAW_COLUMNS)
        for exam in manifest.exams:
            cells = [exam.breast_id, exam.patient_id, str(exam.label)]
            for view in (View.CC, View.MLO):
                vd = exam.views.get(view)
                if prepped:
                    cells.append(_relpath(vd.masked_path, base) if vd else "")
                    cells.append(_relpath(vd.cropped_path, base) if vd else "")
                else:
                    cells.append(_relpath(vd.raw_path, base) if vd and vd.raw_path else "")
                    cells.append(_format_roi(vd.roi) if vd else "")
            cells.append(exam.split)
            writer.writerow(cells)


def read_manifest(path: Path) -> Manifest:
    """Read a manifest CSV (raw or prepped, auto-detected by header)."""
    path = Path(path)
    base = path.parent
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    if not rows:
        return Manifest([], split=None)
    header, body = rows[0], rows[1:]
    if header == RAW_COLUMNS:
        prepped = False
    elif header == PREPPED_COLUMNS:
        prepped = True
    else:
        raise MissingColumn(f"unrecognized manifest header: {header}")

    exams = []
    for row in body:
        rec = dict(zip(header, row))
        views: dict[View, ViewData] = {}
        for view, a_col, b_col in (
            (View.CC, "cc_masked" if prepped else "cc_path", "cc_cropped" if prepped else "cc_roi"),
            (View.MLO, "mlo_masked" if prepped else "mlo_path", "mlo_cropped" if prepped else "mlo_roi"),
        ):
            if not rec[a_col]:
                continue
            if prepped:
                views[view] = ViewData(
                    masked_path=base / rec[a_col], cropped_path=base / rec[b_col]
                )
            else:
                views[view] = ViewData(raw_path=base / rec[a_col], roi=_parse_roi(rec[b_col]))
        exams.append(
            BreastExam(
                breast_id=rec["breast_id"],
                patient_id=rec["patient_id"],
                label=int(rec["label"]),
                views=views,
                split=rec["split"],
            )
        )
    splits = {e.split for e in exams}
    return Manifest(exams, split=splits.pop() if len(splits) == 1 else None)


def load_planes(exam: BreastExam) -> BreastExam:
    """Materialize plane pixels from the paths recorded by `prep`."""
    views = {}
    for view, vd in exam.views.items():
        masked = ImagePlane(load_image(vd.masked_path), view, Scale.MASKED)
        cropped = ImagePlane(load_image(vd.cropped_path), view, Scale.CROPPED)
        views[view] = replace(vd, masked=masked, cropped=cropped)
    return replace(exam, views=views)


# --------------------------------------------------------------------------
# Synthetic exam generator


def _smooth_noise(rng: np.random.Generator, shape: tuple[int, int], amp: float) -> np.ndarray:
    """Low-frequency texture: coarse noise bilinearly upsampled."""
    coarse = rng.uniform(-amp, amp, size=(8, 8))
    from .prep import bilinear_resize  # local import to keep module load light

    return np.clip(bilinear_resize(coarse + 0.5, *shape) - 0.5, -amp, amp)


def _irregular_blob(
    rows: np.ndarray, cols: np.ndarray, cy: float, cx: float, radius: float, wobble: np.ndarray
) -> np.ndarray:
    """Boolean mask of a star-convex blob with an angularly perturbed radius."""
    dy, dx = rows - cy, cols - cx
    theta = np.arctan2(dy, dx)
    r_max = radius * (1.0 + 0.3 * np.sin(wobble[0] * theta + wobble[1]))
    return dy * dy + dx * dx <= r_max * r_max


def _render_view(
    rng: np.random.Generator,
    size: int,
    label: int,
    scene: dict,
    shear: float,
) -> tuple[np.ndarray, Bbox]:
    """Rasterize one view of the scene; shear displaces columns with row."""
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = scene["lobe_center"]
    cols_t = cols - shear * (rows - cy)  # shear the sampling grid, not the image

    ay, ax = scene["lobe_axes"]
    lobe = ((rows - cy) / ay) ** 2 + ((cols_t - cx) / ax) ** 2 <= 1.0

    img = 0.02 + 0.02 * rng.random((size, size))
    img[lobe] = scene["lobe_value"]
    img += lobe * _smooth_noise(rng, (size, size), scene["texture_amp"])

    by, bx = scene["blob_center"]
    blob = _irregular_blob(rows, cols_t, by, bx, scene["blob_radius"], scene["blob_wobble"])
    blob &= lobe
    if label == 1:
        img[blob] = scene["blob_value"]
        roi = _pad_bbox(_tight_bbox(blob), 4, size)
    else:
        # benign: no bright mass; the ROI is just a lobe-interior box
        roi = _pad_bbox(_tight_bbox(blob), 4, size)
    return np.clip(img, 0.0, 1.0), roi


def _tight_bbox(mask: np.ndarray) -> Bbox:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def _pad_bbox(bbox: Bbox, pad: int, size: int) -> Bbox:
    r0, c0, r1, c1 = bbox
    return (max(r0 - pad, 0), max(c0 - pad, 0), min(r1 + pad, size - 1), min(c1 + pad, size - 1))


def generate_synthetic(
    n: int,
    missing_rate: float,
    seed: int,
    size: int = 128,
    train_fraction: float = 0.7,
) -> Manifest:
    """Generate n desk-scale exams with in-memory raw images.

    Each exam draws an elliptical lobe on a dark background; malignant
    exams get a bright irregular blob inside the lobe, benign exams only
    faint smooth texture. The MLO view is a sheared rendering of the same
    scene. With probability `missing_rate` one view is dropped (never
    both); single-view exams always land in the test split, so training
    data stays dual-view. Labels alternate, hence balanced within one.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= missing_rate < 1.0:
        raise BadRate(f"missing_rate must be in [0, 1), got {missing_rate}")
    n_train = int(round(n * train_fraction))

    exams = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        label = i % 2
        cy = size / 2 + rng.uniform(-6, 6)
        cx = size / 2 + rng.uniform(-6, 6)
        ay = rng.uniform(0.28, 0.36) * size
        ax = rng.uniform(0.24, 0.32) * size
        scene = {
            "lobe_center": (cy, cx),
            "lobe_axes": (ay, ax),
            "lobe_value": rng.uniform(0.38, 0.48),
            "texture_amp": rng.uniform(0.02, 0.06),
            "blob_center": (cy + rng.uniform(-0.4, 0.4) * ay, cx + rng.uniform(-0.4, 0.4) * ax),
            "blob_radius": rng.uniform(0.07, 0.1) * size,
            "blob_wobble": (rng.integers(3, 6), rng.uniform(0, 2 * np.pi)),
            "blob_value": rng.uniform(0.85, 0.95),
        }

        views: dict[View, ViewData] = {}
        for view, shear in ((View.CC, 0.0), (View.MLO, 0.35)):
            pixels, roi = _render_view(rng, size, label, scene, shear)
            raw = RawMammogram(pixels=pixels, view=view, source_id=f"synthetic-{i}-{view.value}")
            views[view] = ViewData(raw=raw, roi=roi)

        split = SPLIT_TRAIN if i < n_train else SPLIT_TEST
        if rng.random() < missing_rate:
            dropped = View.CC if rng.random() < 0.5 else View.MLO
            del views[dropped]
            split = SPLIT_TEST  # single-view exams are test-only
        exams.append(
            BreastExam(
                breast_id=f"synthetic_{i:04d}",
                patient_id=f"patient_{i:04d}",
                label=label,
                views=views,
                split=split,
            )
        )
    return Manifest(exams, split=None)


def save_synthetic(manifest: Manifest, out_dir: Path) -> Path:
    """Write generated raw images as PNGs plus the raw manifest CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for exam in manifest.exams:
        for view, vd in exam.views.items():
            p = out_dir / f"{exam.breast_id}_{view.value}.png"
            save_image(vd.raw.pixels, p)
            vd.raw_path = p
    manifest_path = out_dir / "manifest.csv"
    write_manifest(manifest, manifest_path, header_notes=["msmv raw manifest", "kind=raw"])
    return manifest_path


# --------------------------------------------------------------------------
# CBIS-DDSM-style metadata ingestion

CBIS_REQUIRED = ["patient_id", "left or right breast", "image view", "pathology", "image file path"]


def _cbis_label(pathology: str) -> int:
    return 1 if pathology.strip().upper().startswith("MALIGNANT") else 0


def _readable_image(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.load()
        return True
    except Exception:
        return False


def _roi_from_mask_file(path: Path) -> Bbox | None:
    try:
        mask = load_image(path) > 0.5
        if not mask.any():
            return None
        return _tight_bbox(mask)
    except Exception:
        return None


def ingest_cbis(meta_csvs: list[Path], image_root: Path) -> tuple[Manifest, Manifest]:
    """Build train/test manifests from CBIS-DDSM-style metadata CSVs.

    CSVs whose filename contains 'train' feed the train split, 'test' the
    test split. Records are paired per (patient, breast side): dual-view
    breasts enter their split's pool; single-view breasts are kept only at
    test time and dropped (with a logged count) from training. Rows whose
    image cannot be read are skipped with a warning. Duplicate records for
    one (breast, view) keep the lexicographically first row.
    """
    image_root = Path(image_root)
    # (breast_id, view) -> sorted candidate rows
    records: dict[tuple[str, str, View], list[dict]] = {}
    skipped_unreadable = 0

    for csv_path in meta_csvs:
        csv_path = Path(csv_path)
        name = csv_path.name.lower()
        if "train" in name:
            split = SPLIT_TRAIN
        elif "test" in name:
            split = SPLIT_TEST
        else:
            raise MissingColumn(f"cannot infer split from metadata filename: {csv_path.name}")
        with open(csv_path, newline="") as fh:
            reader = csv.DictReader(fh)
            cols = [c.strip() for c in reader.fieldnames or []]
            missing = [c for c in CBIS_REQUIRED if c not in cols]
            if missing:
                raise MissingColumn(f"{csv_path.name} lacks columns: {missing}")
            for row in reader:
                row = {(k or "").strip(): (v or "").strip() for k, v in row.items()}
                try:
                    view = View(row["image view"])
                except ValueError:
                    logger.warning("skipping row with unknown view %r", row["image view"])
                    continue
                img_path = image_root / row["image file path"]
                if not _readable_image(img_path):
                    skipped_unreadable += 1
                    logger.warning("skipping unreadable image %s", img_path)
                    continue
                breast_id = f"{row['patient_id']}_{row['left or right breast'].upper()}"
                records.setdefault((split, breast_id, view), []).append(row)

    train_exams, test_exams = [], []
    dropped_single_train = 0
    breast_keys = sorted({(s, b) for (s, b, _v) in records})
    for split, breast_id in breast_keys:
        views: dict[View, ViewData] = {}
        labels = []
        for view in (View.CC, View.MLO):
            rows = records.get((split, breast_id, view))
            if not rows:
                continue
            rows = sorted(rows, key=lambda r: [r.get(c, "") for c in sorted(r)])
            if len(rows) > 1:
                logger.info("breast %s view %s: %d records, keeping first", breast_id, view.value, len(rows))
            row = rows[0]
            labels.append(_cbis_label(row["pathology"]))
            roi = None
            if row.get("ROI mask file path"):
                roi = _roi_from_mask_file(image_root / row["ROI mask file path"])
            views[view] = ViewData(raw_path=image_root / row["image file path"], roi=roi)
        if not views:
            continue
        label = max(labels)  # any malignant finding marks the breast malignant
        exam = BreastExam(
            breast_id=breast_id,
            patient_id=breast_id.rsplit("_", 1)[0],
            label=label,
            views=views,
            split=split,
        )
        if len(views) == 1 and split == SPLIT_TRAIN:
            dropped_single_train += 1
            continue
        (train_exams if split == SPLIT_TRAIN else test_exams).append(exam)

    logger.info(
        "ingest: %d train dual-view, %d test (%d single-view), %d single-view train dropped, %d unreadable skipped",
        len(train_exams),
        len(test_exams),
        sum(1 for e in test_exams if not e.both_views),
        dropped_single_train,
        skipped_unreadable,
    )
    return Manifest(train_exams, SPLIT_TRAIN), Manifest(test_exams, SPLIT_TEST)
