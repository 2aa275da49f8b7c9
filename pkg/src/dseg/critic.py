"""Wasserstein critic on healthy bottleneck latents, with gradient penalty.

The critic is a plain fully connected net with leaky rectifications and no
normalization layers (normalization would couple samples and invalidate the
per-sample gradient penalty).
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .errors import ConfigurationError, NumericError, ValidationError


@dataclass(frozen=True)
class CriticConfig:
    in_features: int | None = None  # resolved from the latent shape at build time
    hidden: tuple[int, ...] = (64, 64)
    lambda_gp: float = 10.0
    w_c: float = 1e-2
    leak: float = 0.2

    def validate(self) -> None:
        if self.lambda_gp < 0:
            raise ValidationError("lambda_gp must be >= 0")
        if self.w_c <= 0:
            raise ValidationError("w_c must be > 0")
        if any(h < 1 for h in self.hidden):
            raise ValidationError("hidden widths must be >= 1")
        if self.in_features is not None and self.in_features < 1:
            raise ValidationError("in_features must be >= 1")


class Critic(nn.Module):
    """Flatten -> fully connected stack -> scalar score per sample."""

    def __init__(self, cfg: CriticConfig):
        super().__init__()
        cfg.validate()
        if cfg.in_features is None:
            raise ConfigurationError("critic in_features must be resolved before build")
        self.cfg = cfg
        layers: list[nn.Module] = []
        cin = cfg.in_features
        for width in cfg.hidden:
            layers += [nn.Linear(cin, width), nn.LeakyReLU(cfg.leak)]
            cin = width
        layers.append(nn.Linear(cin, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, z: Tensor) -> Tensor:
        flat = z.flatten(1) if z.dim() > 2 else z.reshape(z.shape[0], -1)
        if flat.shape[1] != self.cfg.in_features:
            raise ConfigurationError(
                f"latent has {flat.shape[1]} features, critic expects {self.cfg.in_features}"
            )
        return self.net(flat).squeeze(-1)


def critic_score(critic: Critic, z: Tensor) -> Tensor:
    """Scores for a batch of latents, shape (B,)."""
    scores = critic(z)
    if not torch.isfinite(scores).all():
        raise NumericError("non-finite critic score")
    return scores


def interpolate_latent(z_neg: Tensor, z_pos: Tensor, alpha) -> Tensor:
    """Convex combination with alpha weighting the healthy-case latent."""
    if z_neg.shape != z_pos.shape:
        raise ConfigurationError(
            f"latent shapes differ: {tuple(z_neg.shape)} vs {tuple(z_pos.shape)}"
        )
    if not torch.is_tensor(alpha):
        alpha = torch.as_tensor(alpha, dtype=z_neg.dtype)
    alpha = alpha.to(z_neg.dtype)
    if alpha.dim() == 1:
        alpha = alpha.reshape(-1, *([1] * (z_neg.dim() - 1)))
    return alpha * z_neg + (1.0 - alpha) * z_pos


def sample_alphas(n: int, generator: torch.Generator | None = None) -> Tensor:
    """Uniform per-pair interpolation weights."""
    return torch.rand(n, generator=generator)


def gradient_penalty(critic: Critic, z_m: Tensor) -> Tensor:
    """Mean over samples of (||grad_{z_m} C(z_m)||_2 - 1)^2."""
    z_m = z_m.detach().requires_grad_(True)
    scores = critic(z_m)
    (grads,) = torch.autograd.grad(scores.sum(), z_m, create_graph=True)
    if not torch.isfinite(grads).all():
        raise NumericError("non-finite gradient in penalty term")
    norms = grads.flatten(1).norm(p=2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def critic_loss(
    critic: Critic,
    z_neg: Tensor,
    z_pos: Tensor,
    cfg: CriticConfig,
    alphas: Tensor | None = None,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Critic objective: negated Wasserstein gap plus gradient penalty.

    Latents are detached here; this loss trains the critic alone. Pairs for
    the penalty are formed by batch index over the shorter of the two halves.
    """
    if z_neg.shape[0] == 0 or z_pos.shape[0] == 0:
        raise ConfigurationError("both latent batches must be nonempty")
    z_neg = z_neg.detach()
    z_pos = z_pos.detach()
    n_pairs = min(z_neg.shape[0], z_pos.shape[0])
    if alphas is None:
        alphas = sample_alphas(n_pairs, generator).to(z_neg.dtype)
    if alphas.shape[0] != n_pairs:
        raise ConfigurationError(f"expected {n_pairs} alphas, got {alphas.shape[0]}")
    wasserstein = critic(z_neg).mean() - critic(z_pos).mean()
    z_m = interpolate_latent(z_neg[:n_pairs], z_pos[:n_pairs], alphas)
    penalty = gradient_penalty(critic, z_m)
    loss = cfg.w_c * (-wasserstein + cfg.lambda_gp * penalty)
    if not torch.isfinite(loss):
        raise NumericError("non-finite critic loss")
    return loss


@contextmanager
def frozen_params(module: nn.Module):
    """Temporarily stop gradients from reaching a module's parameters."""
    states = [(p, p.requires_grad) for p in module.parameters()]
    try:
        for p, _ in states:
            p.requires_grad_(False)
        yield
    finally:
        for p, state in states:
            p.requires_grad_(state)


def pseudo_healthy_loss(critic: Critic, z_pos: Tensor) -> Tensor:
    """Generator-side term: -C(z_h+) with the critic frozen.

    Gradients flow into the latent (hence the encoder) but not into critic
    parameters.
    """
    with frozen_params(critic):
        return -critic(z_pos).mean()
