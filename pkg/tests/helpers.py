"""Shared test utilities: small configs and the finite-difference oracle.

The gradient oracle is independent of autograd: it perturbs one parameter
entry at a time and recomputes the scalar objective, so it can certify
the analytic gradients rather than restate them.
"""

from __future__ import annotations

import numpy as np
import torch

from hfit.backbone import BackboneConfig
from hfit.dspe import StemConfig
from hfit.model import HFITConfig


def desk_config(**overrides) -> HFITConfig:
    """The CPU-scale default exercised by the acceptance suite."""
    kwargs = dict(
        backbone=BackboneConfig(embed_dim=192, depth=8, heads=3, stages=4,
                                pos_table_side=4),
        stem=StemConfig(channels=(24, 48, 96)),
        num_classes=6,
        adapter_heads=3,
        decoder_channels=64,
        crop_size=64,
        seed=0,
    )
    kwargs.update(overrides)
    return HFITConfig(**kwargs)


def tiny_config(**overrides) -> HFITConfig:
    """Smallest config that still runs every mechanism; for unit tests."""
    kwargs = dict(
        backbone=BackboneConfig(embed_dim=16, depth=2, heads=2, stages=2,
                                pos_table_side=4),
        stem=StemConfig(channels=(8, 12, 16)),
        num_classes=4,
        adapter_heads=2,
        decoder_channels=16,
        crop_size=64,
        seed=0,
    )
    kwargs.update(overrides)
    return HFITConfig(**kwargs)


def grad_config(**overrides) -> HFITConfig:
    """Double-precision gradient-check instance."""
    kwargs = dict(
        backbone=BackboneConfig(embed_dim=8, depth=2, heads=2, stages=2,
                                pos_table_side=2),
        stem=StemConfig(channels=(6, 8, 10)),
        num_classes=3,
        adapter_heads=2,
        decoder_channels=8,
        crop_size=32,
        seed=0,
    )
    kwargs.update(overrides)
    return HFITConfig(**kwargs)


def central_difference(fn, param: torch.Tensor, flat_index: int, step: float) -> float:
    flat = param.data.view(-1)
    orig = flat[flat_index].item()
    try:
        flat[flat_index] = orig + step
        up = float(fn())
        flat[flat_index] = orig - step
        down = float(fn())
    finally:
        flat[flat_index] = orig
    return (up - down) / (2.0 * step)


def gradient_matches(analytic: float, fd: float, rtol: float = 1e-4,
                     atol: float = 1e-8) -> bool:
    return abs(analytic - fd) <= max(rtol * max(abs(analytic), abs(fd)), atol)


def check_gradients(fn, named_params, n_samples: int, step: float = 1e-5,
                    rtol: float = 1e-4, atol: float = 1e-8, seed: int = 0):
    """Compare autograd against central differences on sampled parameter entries.

    fn recomputes the scalar objective from scratch on every call; the
    parameters are mutated in place between calls. Returns (checked, failures).
    """
    named_params = list(named_params)
    with torch.enable_grad():
        value = fn()
        grads = torch.autograd.grad(
            value, [p for _, p in named_params], allow_unused=True
        )
    sizes = np.array([p.numel() for _, p in named_params])
    bounds = np.cumsum(sizes)
    total = int(bounds[-1])
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_samples, total), replace=False)

    checked, failures = [], []
    with torch.no_grad():
        for flat in picks:
            pi = int(np.searchsorted(bounds, flat, side="right"))
            local = int(flat - (bounds[pi - 1] if pi else 0))
            name, param = named_params[pi]
            analytic = 0.0 if grads[pi] is None else float(grads[pi].reshape(-1)[local])
            fd = central_difference(fn, param, local, step)
            ok = gradient_matches(analytic, fd, rtol, atol)
            record = (name, local, analytic, fd)
            checked.append(record)
            if not ok:
                failures.append(record)
    return checked, failures
