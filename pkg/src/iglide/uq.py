"""Monte Carlo uncertainty of the per-group reconstruction error.

Epistemic: latent held fixed, decoder dropout masks resampled.
Aleatoric (VAE only): decoder deterministic, latent resampled from q(z|x).
Both are sample variances (n - 1 divisor) of the error over the draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UnsupportedVariantError(ValueError):
    pass


@dataclass(frozen=True)
class UqConfig:
    n_samples: int = 50

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")


@dataclass
class UncertaintyEstimate:
    sigma_e: np.ndarray  # (B, G)
    sigma_a: np.ndarray | None  # (B, G), VAE only
    mean_error: np.ndarray  # (B, G), epistemic draws


def recon_error(x, xhat, group: slice | None = None):
    """Euclidean norm of the residual over one group slice (all channels if None)."""
    x = np.asarray(x, dtype=float)
    xhat = np.asarray(xhat, dtype=float)
    if group is not None:
        x, xhat = x[..., group], xhat[..., group]
    return np.linalg.norm(x - xhat, axis=-1)


def group_errors(model, xg, xhat) -> np.ndarray:
    return np.stack([recon_error(xg, xhat, s) for s in model.slices], axis=-1)


def _var(draws: np.ndarray) -> np.ndarray:
    # shifted by the first draw so identical draws give exactly 0
    return np.var(draws - draws[0], axis=0, ddof=1)


def _check(cfg: UqConfig):
    if cfg.n_samples < 2:
        raise ValueError("n_samples must be >= 2")


def _fixed_latent(model, xg):
    # AE: deterministic z; VAE: eval mode substitutes z = mu.
    z, *_ = model.latent(model.encode_groups(xg), "eval")
    return z


def epistemic_draws(model, X, cfg: UqConfig, rng) -> np.ndarray:
    _check(cfg)
    xg = model.select(X)
    z = _fixed_latent(model, xg)
    draws = np.empty((cfg.n_samples,) + xg.shape[:-1] + (model.n_groups,))
    for i in range(cfg.n_samples):
        xhat, _ = model.decode(z, "mc_dropout", rng)
        draws[i] = group_errors(model, xg, xhat)
    return draws


def epistemic(model, X, cfg: UqConfig, rng) -> np.ndarray:
    """Per-group sigma_e, shape (..., G)."""
    return _var(epistemic_draws(model, X, cfg, rng))


def aleatoric_draws(model, X, cfg: UqConfig, rng) -> np.ndarray:
    if model.variant != "vae":
        raise UnsupportedVariantError(
            "aleatoric uncertainty is undefined for a deterministic latent (AE variant)"
        )
    _check(cfg)
    xg = model.select(X)
    enc = model.encode_groups(xg)
    _, mu, logvar, _, _ = model.latent(enc, "eval")
    std = np.exp(0.5 * logvar)
    draws = np.empty((cfg.n_samples,) + xg.shape[:-1] + (model.n_groups,))
    for i in range(cfg.n_samples):
        z = mu + std * rng.standard_normal(mu.shape)
        xhat, _ = model.decode(z, "eval")
        draws[i] = group_errors(model, xg, xhat)
    return draws


def aleatoric(model, X, cfg: UqConfig, rng) -> np.ndarray:
    """Per-group sigma_a, shape (..., G)."""
    return _var(aleatoric_draws(model, X, cfg, rng))


def estimate(model, X, cfg: UqConfig, rng) -> UncertaintyEstimate:
    draws = epistemic_draws(model, X, cfg, rng)
    sigma_a = aleatoric(model, X, cfg, rng) if model.variant == "vae" else None
    return UncertaintyEstimate(_var(draws), sigma_a, draws.mean(axis=0))
