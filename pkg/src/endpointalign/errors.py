"""Exception types shared across the package."""


class EndpointAlignError(Exception):
    """Base class for all package-specific errors."""


class AntipodalError(EndpointAlignError):
    """Log map requested between antipodal points."""


class LevelTooLarge(EndpointAlignError):
    """Icosphere subdivision level above the supported maximum."""


class DegreeTooLarge(EndpointAlignError):
    """Tangent-basis degree above the supported maximum."""


class EmptyEndpointSet(EndpointAlignError):
    """An operation received an endpoint set with no pairs."""


class SingularNeighborhood(EndpointAlignError):
    """A 1-ring least-squares fit was rank deficient."""


class MeshMismatch(EndpointAlignError):
    """Two grid-indexed objects do not share the same mesh."""


class EmptyAfterFilter(EndpointAlignError):
    """A hemisphere filter removed every endpoint pair."""


class ConfigError(EndpointAlignError):
    """Invalid run configuration."""


class ParseError(EndpointAlignError):
    """Malformed input file; message carries the offending line number."""


class NormError(EndpointAlignError):
    """A loaded point deviates from unit norm beyond tolerance."""


class SchemaVersionError(EndpointAlignError):
    """Unknown or missing format-version field in a warp file."""
