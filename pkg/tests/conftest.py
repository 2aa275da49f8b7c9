import numpy as np
import pytest
import torch

from dseg.encoder import EncoderConfig
from dseg.phantom import PhantomSpec, generate_dataset


def rel_err(a, b, floor=1e-12):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b)) / denom


def fd_grad(fn, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central finite differences of a scalar function, elementwise."""
    assert x.dtype == torch.float64
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(fn(x))
        flat[i] = orig - eps
        lo = float(fn(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def analytic_grad(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    return x.grad.detach().clone()


def tiny_encoder_cfg(base_channels=2, n_levels=2) -> EncoderConfig:
    return EncoderConfig(base_channels=base_channels, n_levels=n_levels)


def tiny_phantom_spec(seed=0, grid=16) -> PhantomSpec:
    return PhantomSpec(grid_size=grid, blob_radius_range=(1.5, 3.0), seed=seed)


@pytest.fixture(scope="session")
def tiny_dataset():
    """12 cases at 16 cubed: 8 train (4 healthy + 4 disease), 2 val, 2 test."""
    return generate_dataset(tiny_phantom_spec(seed=11), 6, 6, (2 / 3, 1 / 6, 1 / 6))
