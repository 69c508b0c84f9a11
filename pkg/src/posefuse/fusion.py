"""Multi-view fusion of projected feature maps and the training-style losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .raster import FeatureMap, ProjectedMap, pyramid_features

DEFAULT_TEMPERATURE = 0.05


@dataclass(frozen=True)
class LossWeights:
    lambda_i: float = 5.0
    lambda_f: float = 10.0
    lambda_s: float = 1.0

    def __post_init__(self):
        if min(self.lambda_i, self.lambda_f, self.lambda_s) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class FusionResult:
    integrated: FeatureMap
    weights: list
    weighted: FeatureMap
    rendering: np.ndarray
    mask: np.ndarray


def _stack(projected: Sequence[ProjectedMap]):
    if len(projected) == 0:
        raise ValueError("no views")
    shapes = {p.features.values.shape for p in projected}
    if len(shapes) != 1:
        raise ValueError("projected maps differ in shape")
    vals = np.stack([p.features.values for p in projected])
    valid = np.stack([p.valid_mask for p in projected])
    return vals, valid


def integrate(projected: Sequence[ProjectedMap]) -> FeatureMap:
    """Per pixel and channel median over the views valid at that pixel."""
    vals, valid = _stack(projected)
    any_valid = valid.any(axis=0)
    masked = np.where(valid[..., None], vals, np.nan)
    out = np.zeros(vals.shape[1:])
    out[any_valid] = np.nanmedian(masked[:, any_valid], axis=0)
    return FeatureMap(out, any_valid)


def compute_weights(projected: Sequence[ProjectedMap], integrated: FeatureMap,
                    temperature: float = DEFAULT_TEMPERATURE) -> list:
    """Softmax over valid views of the negative mean-L1 distance to ``integrated``.

    Views invalid at a pixel get weight 0 there; pixels valid in no view get
    all-zero weights.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    vals, valid = _stack(projected)
    c = vals.shape[-1]
    dist = np.abs(vals - integrated.values[None]).sum(axis=-1) / c
    logits = np.where(valid, -dist / temperature, -np.inf)
    peak = logits.max(axis=0)
    any_valid = np.isfinite(peak)
    expo = np.where(valid, np.exp(logits - np.where(any_valid, peak, 0.0)[None]), 0.0)
    total = expo.sum(axis=0)
    w = np.where(any_valid[None], expo / np.where(any_valid, total, 1.0)[None], 0.0)
    return [w[k] for k in range(len(projected))]


def weighted_blend(projected: Sequence[ProjectedMap], weights: Sequence[np.ndarray]):
    """Return ``(X^S, X^D, M^D)``: the weighted feature map, its color slice and the union mask."""
    vals, valid = _stack(projected)
    w = np.stack(weights)
    blended = (w[..., None] * vals).sum(axis=0)
    union = valid.any(axis=0)
    blended[~union] = 0.0
    x_s = FeatureMap(blended, union)
    return x_s, blended[..., :3].copy(), union


def fuse(projected: Sequence[ProjectedMap], temperature: float = DEFAULT_TEMPERATURE) -> FusionResult:
    integrated = integrate(projected)
    weights = compute_weights(projected, integrated, temperature)
    x_s, x_d, union = weighted_blend(projected, weights)
    return FusionResult(integrated, weights, x_s, x_d, union)


def _check_mask(mask):
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("empty evaluation region")
    return mask, n


def image_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray,
               w: LossWeights = LossWeights()) -> float:
    """Masked color L1 plus pyramid-feature L1, each summed over channels."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("pred and target differ in shape")
    mask, n = _check_mask(mask)
    color = np.abs(pred - target).sum(axis=-1)[mask].sum()
    total = w.lambda_i * color
    if w.lambda_f:
        feat = np.abs(pyramid_features(pred) - pyramid_features(target)).sum(axis=-1)[mask].sum()
        total += w.lambda_f * feat
    return float(total / n)


def laplacian_masked(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """4-neighbour Laplacian; neighbours outside ``mask`` take the center value."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    pmask = np.pad(mask, 1, constant_values=False)
    h, w = mask.shape
    out = np.zeros_like(x)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        nb_in = pmask[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        out += np.where(nb_in[..., None], nb, x) - x
    return out


def smooth_loss(x_s, mask: np.ndarray, lambda_s: float = 1.0) -> float:
    """``lambda_s / |M|`` times the summed absolute Laplacian over masked pixels and channels."""
    vals = x_s.values if isinstance(x_s, FeatureMap) else x_s
    mask, n = _check_mask(mask)
    lap = laplacian_masked(vals, mask)
    return float(lambda_s * np.abs(lap).sum(axis=-1)[mask].sum() / n)
