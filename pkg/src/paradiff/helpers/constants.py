"""Module containing constants for the `paradiff` package."""

from typing import Dict, Final

PACKAGE_NAME: Final[str] = "paradiff"
"""Constant string with the name of this package."""

MASK_ROLE: Final[str] = "MASK"
"""Role name of the absorbing [MASK] token."""
PAD_ROLE: Final[str] = "PAD"
"""Role name of the [PAD] token that the diffusion model learns to emit after an answer."""
BOS_ROLE: Final[str] = "BOS"
"""Role name of the [BOS] token that opens every turn."""
EOS_ROLE: Final[str] = "EOS"
"""Role name of the [EOS] token that closes every turn in autoregressive form."""

SPECIAL_TOKEN_ROLES: Final = (PAD_ROLE, MASK_ROLE, BOS_ROLE, EOS_ROLE)
"""All special-token roles, in the order of their default ids."""

DEFAULT_SPECIAL_TOKENS: Final[Dict[str, int]] = {
    PAD_ROLE: 0,
    MASK_ROLE: 1,
    BOS_ROLE: 2,
    EOS_ROLE: 3,
}
"""Default token ids of the special tokens."""

RMS_NORM_EPS: Final[float] = 1e-5
"""Epsilon added to the mean square inside RMS normalisation."""

DEFAULT_T_EPSILON: Final[float] = 0.01
"""Lower bound of the training time step, t is drawn uniformly on (eps, 1]."""

CHECKPOINT_MAGIC: Final[bytes] = b"PARADIFF-CKPT 1\n"
"""First line of every checkpoint file."""
