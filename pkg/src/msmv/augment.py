"""Exam expansion by a factor of 6: identity, three rotations, two flips.

All transforms are exact index permutations (no interpolation) and are
applied identically to every plane of an exam, so CC and MLO views and
both scales always receive the same op.
"""

from __future__ import annotations

from dataclasses import replace
from enum import Enum

import numpy as np

from .data import BreastExam
from .errors import NonSquareInput
from .prep import ImagePlane


class AugmentOp(str, Enum):
    IDENTITY = "identity"
    ROT90 = "rot90"
    ROT180 = "rot180"
    ROT270 = "rot270"
    FLIP_H = "flip_h"
    FLIP_V = "flip_v"


# Rotation index map: out[r, c] = in[side-1-c, r], i.e. np.rot90 with k=-1.
_ROT_K = {AugmentOp.ROT90: -1, AugmentOp.ROT180: -2, AugmentOp.ROT270: -3}


def apply_augment(plane: ImagePlane, op: AugmentOp) -> ImagePlane:
    """Transform one plane; view/scale tags are preserved."""
    px = plane.pixels
    if px.shape[0] != px.shape[1]:
        raise NonSquareInput(f"augmentation needs a square plane, got {px.shape}")
    if op == AugmentOp.IDENTITY:
        out = px.copy()
    elif op in _ROT_K:
        out = np.rot90(px, k=_ROT_K[op]).copy()
    elif op == AugmentOp.FLIP_H:
        out = px[:, ::-1].copy()
    else:
        out = px[::-1, :].copy()
    return ImagePlane(pixels=out, view=plane.view, scale=plane.scale)


def augment_exam(exam: BreastExam) -> list[BreastExam]:
    """Expand one preprocessed exam into 6: one per AugmentOp.

    Within each output exam every present plane receives the same op;
    label, ids, split and presence are copied. The first output uses
    IDENTITY and therefore equals the input.
    """
    out = []
    for op in AugmentOp:
        views = {
            view: replace(
                vd,
                masked=apply_augment(vd.masked, op),
                cropped=apply_augment(vd.cropped, op),
            )
            for view, vd in exam.views.items()
        }
        out.append(replace(exam, views=views, augment=op.value))
    return out


def augment_exams(exams: list[BreastExam]) -> list[BreastExam]:
    """Expand a pool of exams; output order groups the 6 variants per exam."""
    return [aug for exam in exams for aug in augment_exam(exam)]
