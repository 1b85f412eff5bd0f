"""Baseline rekeying engines: lkh, oft, okd."""

from gkms.baselines.lkh import LkhServer, LkhMember
from gkms.baselines.oft import OftServer, OftMember
from gkms.baselines.okd import OkdServer, OkdMember

__all__ = [
    "LkhServer",
    "LkhMember",
    "OftServer",
    "OftMember",
    "OkdServer",
    "OkdMember",
]
