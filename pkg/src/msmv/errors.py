"""Domain exceptions. Every error the pipeline raises on bad input derives from MsmvError."""


class MsmvError(Exception):
    """Base class for all domain errors."""


class NoForeground(MsmvError):
    """Thresholding found zero foreground pixels."""


class BackendUnavailable(MsmvError):
    """External segmenter requested but not configured."""


class ShapeMismatch(MsmvError):
    """Array shapes disagree where they must match."""


class RoiOutOfBounds(MsmvError):
    """ROI box extends past the image bounds."""


class EmptyInput(MsmvError):
    """Operation received an empty grid or record set."""


class NoViews(MsmvError):
    """Exam has neither CC nor MLO view."""


class NonSquareInput(MsmvError):
    """Augmentation requires a square plane."""


class IndivisibleShape(MsmvError):
    """Feature map size not divisible by the window size."""


class BadShift(MsmvError):
    """Shift must be 0 or window // 2."""


class OddShape(MsmvError):
    """Patch merging requires even spatial dimensions."""


class ConfigMismatch(MsmvError):
    """Input geometry does not match the model configuration."""


class DimMismatch(MsmvError):
    """Vector length does not match the layer's expected input size."""


class BadEpsilon(MsmvError):
    """Label smoothing factor outside [0, 0.5)."""


class BadRate(MsmvError):
    """Rate parameter outside its valid range."""


class EmptyDataset(MsmvError):
    """Training requested on an empty exam set."""


class SingleClass(MsmvError):
    """AUC needs at least one positive and one negative."""


class MissingColumn(MsmvError):
    """Metadata CSV lacks a required column."""


class MalformedReport(MsmvError):
    """Report JSON does not follow the expected schema."""
