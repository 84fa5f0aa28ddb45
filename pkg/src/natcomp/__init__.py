"""Natural compression, dithering and compressed distributed SGD."""
from .errors import (ConfigurationError, DivergenceError, EncodeError, FloatUsageError, FormatError,
                     InvalidInputError, NatCompError, ProtocolError, SessionError,
                     UnboundedSecondMomentError)
from .operators import (CompressorSpec, NormMode, Variant, compose, compress, compress_batch,
                        format_spec, identity, int_round, nat, nat_dither, parse_spec,
                        sparsify_spec, std_dither)
from .rng import RngStream

__version__ = "0.1.0"

__all__ = [
    "CompressorSpec", "NormMode", "Variant", "RngStream", "compose", "compress", "compress_batch",
    "format_spec", "identity", "int_round", "nat", "nat_dither", "parse_spec", "sparsify_spec",
    "std_dither", "NatCompError", "InvalidInputError", "ConfigurationError", "EncodeError",
    "FormatError", "UnboundedSecondMomentError", "DivergenceError", "SessionError",
    "ProtocolError", "FloatUsageError",
]
