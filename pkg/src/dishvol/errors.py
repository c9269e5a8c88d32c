"""Exception types raised across the pipeline stages."""


class DishvolError(Exception):
    """Base class for all errors raised by this package."""


# --- geometry ---------------------------------------------------------------

class PointBehindCamera(DishvolError):
    """Projection requested for a point with non-positive depth."""


class DegenerateRays(DishvolError):
    """Triangulation rays are (nearly) parallel; depth is undefined."""


class DegenerateLine(DishvolError):
    """Both epipolar lines have no direction; distance is undefined."""


# --- features ---------------------------------------------------------------

class TooFewFeatures(DishvolError):
    """Image does not carry enough texture for salient point detection."""


# --- robust fitting ---------------------------------------------------------

class NoReliableThreshold(DishvolError):
    """No inlier rate keeps the false discovery rate bound below p."""


class NoModelFound(DishvolError):
    """Every candidate model was indistinguishable from noise."""


class DegenerateSample(DishvolError):
    """Minimal sample is rank deficient for the requested solver."""


class AmbiguousChirality(DishvolError):
    """No pose factorization places a strict majority of points in front."""


# --- calibration ------------------------------------------------------------

class InsufficientParallax(DishvolError):
    """Median triangulation angle too small for a usable reconstruction."""


class CardNotFound(DishvolError):
    """Reference card could not be registered in the images."""


class DegenerateScale(DishvolError):
    """Scale ratio distribution has no usable mode."""


# --- stereo -----------------------------------------------------------------

class RectificationFailed(DishvolError):
    """Pose is degenerate (zero baseline); epipoles are undefined."""


class TooFewMatches(DishvolError):
    """Not enough sparse matches to derive a disparity range."""


class EmptyRange(DishvolError):
    """Disparity search range is empty."""


class EmptyRoi(DishvolError):
    """Region of interest contains no pixels."""


# --- volume -----------------------------------------------------------------

class EmptyDisparity(DishvolError):
    """Disparity map has no valid pixels to unproject."""


class NoFoodPixels(DishvolError):
    """Segmentation contains no food labels."""


class RimPlaneFailed(DishvolError):
    """Dish rim plane could not be fitted."""


class TablePlaneFailed(DishvolError):
    """Table plane could not be fitted from the card points."""


# --- synth ------------------------------------------------------------------

class InvalidSpec(DishvolError):
    """Scene specification violates the capture protocol bounds."""


# --- metrics ----------------------------------------------------------------

class ZeroTrueVolume(DishvolError):
    """MAPE is undefined for a zero true volume."""


class ZeroMean(DishvolError):
    """Coefficient of variation is undefined for a zero mean."""


# --- pipeline ---------------------------------------------------------------

class PipelineError(DishvolError):
    """Stage failure wrapped with the stage name and a remediation hint."""

    def __init__(self, stage: str, cause: Exception, hint: str = ""):
        self.stage = stage
        self.cause = cause
        self.hint = hint
        msg = f"stage '{stage}' failed: {cause}"
        if hint:
            msg += f" ({hint})"
        super().__init__(msg)
