"""Exception types shared across the package.

The split matters operationally: `DegenerateSceneError` and
`DegenerateEpisodeError` are retry/skip signals (samplers re-roll, the
training loop skips the update), while the remaining types are hard
failures surfaced to the caller.
"""


class ProtoSegError(Exception):
    """Base class for all package errors."""


class ConfigError(ProtoSegError):
    """Invalid configuration (bad fold, non-divisible sizes, out-of-range knobs)."""


class ShapeError(ProtoSegError):
    """Tensor/mask shape or channel-count mismatch."""


class EmptyMaskError(ProtoSegError):
    """Masked pooling was asked to average over an all-zero mask."""


class DegenerateSceneError(ProtoSegError):
    """A rendered scene lost an object to occlusion; the sampler should re-roll."""


class DegenerateEpisodeError(ProtoSegError):
    """An episode became unusable (mask vanished at feature scale, all-foreground
    query, ...); samplers re-roll, training steps skip."""


class SamplingError(ProtoSegError):
    """Retry budget exhausted while sampling a scene or episode."""


class NumericError(ProtoSegError):
    """Non-finite values appeared where finite ones are required."""


class ContractError(ProtoSegError):
    """API precondition or internal invariant violated."""


class CheckpointError(ProtoSegError):
    """Checkpoint version or config fingerprint does not match."""
