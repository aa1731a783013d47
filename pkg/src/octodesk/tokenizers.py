"""Input tokenizers: images to patch tokens, language ids to embeddings,
plus the per-example conditioning dropout.

Every function here is pure over immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

KIND_LANG = "task-language"
KIND_GOAL = "task-goal-image"
KIND_OBS = "observation"
KIND_READOUT = "readout"

TASK_KINDS = (KIND_LANG, KIND_GOAL)

PAD_ID = 0


@dataclass(frozen=True)
class ImageSpec:
    height: int
    width: int
    channels: int
    patch: int

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(
                f"patch size {self.patch} must divide image dims "
                f"{self.height}x{self.width}"
            )

    @property
    def tokens(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


@dataclass(frozen=True)
class TokenGroup:
    """One contiguous block of the token sequence.

    Readout groups carry learned tokens only; `timestep` is -1 for task
    groups. `present` is the structural default, overridden per example
    by the batch presence vectors.
    """

    name: str
    kind: str
    timestep: int
    count: int
    present: bool = True

    def __post_init__(self):
        if self.count <= 0:
            raise ValueError(f"group {self.name}: token count must be positive")
        if self.kind in TASK_KINDS and self.timestep != -1:
            raise ValueError(f"task group {self.name} must have timestep -1")
        if self.kind not in (*TASK_KINDS, KIND_OBS, KIND_READOUT):
            raise ValueError(f"unknown group kind {self.kind!r}")


def patchify(image, patch: int):
    """Split (..., H, W, C) into (..., HW/P^2, P^2*C) flattened patches."""
    return T.patchify(image, patch)


def unpatchify(tokens, height: int, width: int, channels: int, patch: int):
    """Exact inverse of patchify."""
    return T.unpatchify(tokens, height, width, channels, patch)


def image_tokenize(image, spec: ImageSpec, weight, bias, pos=None):
    """Embed an image (or batch of images) into patch tokens.

    One strided convolution with kernel = stride = patch, i.e. a learned
    linear map of each flattened patch, then positional embeddings if given.
    Pixels are expected pre-normalized to [-1, 1].
    """
    img = image if isinstance(image, T.Tensor) else T.constant(image)
    if img.shape[-3:] != (spec.height, spec.width, spec.channels):
        raise T.ShapeError(
            f"image_tokenize: image {img.shape} does not match spec "
            f"{(spec.height, spec.width, spec.channels)}"
        )
    out = T.patch_conv(img, weight, bias, spec.patch)
    if pos is not None:
        out = T.add(out, pos)
    return out


def language_tokenize(ids, table, length: int, pos=None, pad_id: int = PAD_ID):
    """Look up language token embeddings at a fixed length.

    ids: int array (..., n) or list, truncated / padded with `pad_id` to
    `length`. Returns (embeddings, token_present) where token_present marks
    the non-pad positions. The table is expected to be frozen; gradients
    never flow into it when its requires_grad is False.
    """
    ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
    n = ids.shape[-1]
    if n >= length:
        padded = ids[..., :length].copy()
        token_present = np.ones(padded.shape, dtype=bool)
    else:
        pad_width = [(0, 0)] * (ids.ndim - 1) + [(0, length - n)]
        padded = np.pad(ids, pad_width, constant_values=pad_id)
        token_present = np.zeros(padded.shape, dtype=bool)
        token_present[..., :n] = True
    emb = T.embedding_lookup(table, padded)
    if pos is not None:
        emb = T.add(emb, pos)
    return emb, token_present


def modality_dropout(language_present: bool, goal_present: bool, rng: T.Rng,
                     p_lang: float, p_goal: float) -> tuple[bool, bool]:
    """Randomly hide the language or goal conditioning of one example.

    Never hides both when both existed; an example that only has one
    modality keeps it. Examples without language always keep the goal.
    """
    if not (language_present and goal_present):
        return language_present, goal_present
    drop_lang = rng.uniform() < p_lang
    drop_goal = rng.uniform() < p_goal
    if drop_lang and drop_goal:
        if rng.uniform() < 0.5:
            drop_lang = False
        else:
            drop_goal = False
    return not drop_lang, not drop_goal
