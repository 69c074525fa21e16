"""Exception types shared across the toolkit."""


class DimvoError(Exception):
    """Base class for all toolkit errors."""


# --- dataset / file handling ---

class MissingFile(DimvoError):
    pass


class ParseError(DimvoError):
    pass


class NonMonotonicTimestamps(DimvoError):
    pass


class MixedResolutions(DimvoError):
    pass


class UnsupportedImage(DimvoError):
    """Image is not decodable as 8-bit grayscale or RGB."""


# --- image processing ---

class InvalidGamma(DimvoError):
    pass


class InvalidTiling(DimvoError):
    pass


class PluginFailed(DimvoError):
    """External enhancer exited with a nonzero status."""


class PluginIncomplete(DimvoError):
    """External enhancer produced missing or mismatched outputs."""


# --- features ---

class ImageTooSmall(DimvoError):
    pass


# --- matching / geometry ---

class TooFewMatches(DimvoError):
    pass


class NoConsensus(DimvoError):
    pass


class DegenerateConfiguration(DimvoError):
    pass


class CheiralityAmbiguous(DimvoError):
    pass


class ZeroBaseline(DimvoError):
    pass


class TooFewPoints(DimvoError):
    pass


class DivergedBehindCamera(DimvoError):
    pass


# --- evaluation ---

class DegenerateGeometry(DimvoError):
    pass


class TooFewPairs(DimvoError):
    pass


class EmptyGroundTruth(DimvoError):
    pass
