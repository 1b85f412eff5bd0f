"""Group key management library and simulator.

Four rekeying protocols over logical key trees (ckcs, lkh, oft, okd), an
exact server-side cost meter, a deterministic event simulator with member
simulation and correctness probes, and a knowledge-closure analyzer that
mechanically checks forward and backward secrecy on recorded traces.
"""

__version__ = "0.1.0"

from gkms.crypto import SymKey, WrappedKey, derive, derive_with_code, blind, mix, wrap, unwrap

__all__ = [
    "SymKey",
    "WrappedKey",
    "derive",
    "derive_with_code",
    "blind",
    "mix",
    "wrap",
    "unwrap",
    "__version__",
]
