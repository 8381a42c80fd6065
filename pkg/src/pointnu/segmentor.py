"""Instance mask generation from predicted kernels (dynamic) or a static mask stack."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

DEFAULT_CHUNK = 256


def _as_tensor(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))


def dynamic_mask_logits(features, kernels, chunk: int = DEFAULT_CHUNK) -> torch.Tensor:
    """1x1 convolution of ``features (E, H, W)`` with each row of ``kernels (N, E)``."""
    features = _as_tensor(features)
    kernels = _as_tensor(kernels).to(features.dtype)
    if kernels.ndim == 1:
        kernels = kernels[None]
    E, H, W = features.shape
    if kernels.shape[-1] != E:
        raise ValueError(f"kernel length {kernels.shape[-1]} does not match feature channels {E}")
    flat = features.reshape(E, H * W)
    parts = [kernels[i:i + chunk] @ flat for i in range(0, kernels.shape[0], chunk)]
    if not parts:
        return features.new_zeros((0, H, W))
    return torch.cat(parts).reshape(-1, H, W)


def dynamic_masks(features, kernels, chunk: int = DEFAULT_CHUNK) -> torch.Tensor:
    """Soft masks ``sigmoid(K_i . F)`` in the order of *kernels*."""
    return torch.sigmoid(dynamic_mask_logits(features, kernels, chunk))


def gather_kernels(kernel_map, cells) -> torch.Tensor:
    """Kernels ``(N, E)`` at the given ``(x, y)`` cells of ``kernel_map (E, h, w)``."""
    kernel_map = _as_tensor(kernel_map)
    if len(cells) == 0:
        return kernel_map.new_zeros((0, kernel_map.shape[0]))
    xs = torch.as_tensor([c[0] for c in cells], dtype=torch.long)
    ys = torch.as_tensor([c[1] for c in cells], dtype=torch.long)
    return kernel_map[:, ys, xs].T


def standard_mask_logits(mask_stack, cells, out_size) -> torch.Tensor:
    """Channels of a static per-cell mask stack ``(h*w, H', W')`` at *cells*, resized to *out_size*.

    Channel ``y * w + x`` belongs to cell ``(x, y)``; the grid width is recovered
    from the stack depth and the aspect ratio of *out_size*.
    """
    mask_stack = _as_tensor(mask_stack)
    n_cells = mask_stack.shape[0]
    H, W = out_size
    w = int(round((n_cells * W / H) ** 0.5))
    h = n_cells // w
    if h * w != n_cells:
        raise ValueError(f"mask stack depth {n_cells} is not an h*w grid for output {out_size}")
    idx = []
    for x, y in cells:
        if not (0 <= x < w and 0 <= y < h):
            raise IndexError(f"cell {(x, y)} outside the {w}x{h} grid")
        idx.append(y * w + x)
    sel = mask_stack[torch.as_tensor(idx, dtype=torch.long)] if idx else mask_stack[:0]
    if sel.shape[-2:] != (H, W):
        sel = F.interpolate(sel[None], size=(H, W), mode="bilinear", align_corners=False)[0]
    return sel


def standard_masks(mask_stack, cells, out_size) -> torch.Tensor:
    return torch.sigmoid(standard_mask_logits(mask_stack, cells, out_size))
