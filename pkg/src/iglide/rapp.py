"""RaPP health indicators along encoder pathways and in the latent space, and
assembly of the HI feature sets consumed by the RUL regressor."""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass

import numpy as np

from . import uq
from .uq import UqConfig

HI_SETS = ("groups", "mono", "gonzalez")
RANK_RTOL = 1e-10


class HiAssemblyError(ValueError):
    pass


@dataclass
class PathwayTrace:
    """Concatenated encoder activations for x and for its reconstruction, per
    group, plus the fused latent of both."""

    h_x: list[np.ndarray]
    h_xhat: list[np.ndarray]
    z_x: np.ndarray
    z_xhat: np.ndarray
    x: np.ndarray
    xhat: np.ndarray

    def diff(self, g: int) -> np.ndarray:
        return self.h_x[g] - self.h_xhat[g]

    @property
    def latent_diff(self) -> np.ndarray:
        return self.z_x - self.z_xhat


def _pathway(traces) -> list[np.ndarray]:
    # Layers 1..L post-activation; the raw input is not part of the pathway.
    return [np.concatenate(t.activations, axis=-1) for t in traces]


def record_pathway(model, X) -> PathwayTrace:
    """Eval-mode pass: reconstruct once, then re-encode the reconstruction."""
    xg = model.select(X)
    out = model.forward_model(xg, "eval")
    enc_hat = model.encode_groups(out.xhat)
    z_hat, *_ = model.latent(enc_hat, "eval")
    return PathwayTrace(
        _pathway(out.encoder_traces), _pathway(enc_hat), out.z, z_hat, xg, out.xhat
    )


def sap(trace: PathwayTrace, g: int):
    return np.linalg.norm(trace.diff(g), axis=-1)


@dataclass
class NapModel:
    """Whitening statistics of healthy pathway differences. ``singular_values``
    are those of the centred matrix scaled by 1/sqrt(m - 1), so the NAP score
    is the Mahalanobis distance under the sample covariance (restricted to
    the retained subspace)."""

    mean: np.ndarray
    components: np.ndarray  # (dim, k)
    singular_values: np.ndarray  # (k,)

    @property
    def rank(self) -> int:
        return len(self.singular_values)

    def score(self, d) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        if self.rank == 0:
            return np.zeros(d.shape[:-1])
        w = ((d - self.mean) @ self.components) / self.singular_values
        return np.linalg.norm(w, axis=-1)


def fit_nap_stats(D, rtol: float = RANK_RTOL) -> NapModel:
    D = np.asarray(D, dtype=float)
    m = len(D)
    if m < 2:
        raise ValueError("NAP fit needs at least 2 samples")
    mean = D.mean(axis=0)
    centred = (D - mean) / np.sqrt(m - 1)
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    keep = s > rtol * s[0] if s.size and s[0] > 0 else np.zeros(s.shape, dtype=bool)
    if not keep.any():
        warnings.warn("NAP fit is degenerate (rank 0); scores will be zero", RuntimeWarning, stacklevel=2)
    return NapModel(mean, vt[keep].T.copy(), s[keep].copy())


@dataclass
class NapSet:
    groups: list[NapModel]
    latent: NapModel


def fit_nap(model, healthy) -> NapSet:
    tr = record_pathway(model, healthy)
    if len(tr.z_x) < 2:
        raise ValueError("NAP fit needs at least 2 samples")
    return NapSet([fit_nap_stats(tr.diff(g)) for g in range(model.n_groups)], fit_nap_stats(tr.latent_diff))


def nap(nap_model: NapModel, trace: PathwayTrace, g: int):
    return nap_model.score(trace.diff(g))


def latent_metrics(trace: PathwayTrace, latent_nap: NapModel):
    """(SAP, NAP) on the fused latent: z(x) - z(xhat)."""
    d = trace.latent_diff
    return np.linalg.norm(d, axis=-1), latent_nap.score(d)


# --------------------------------------------------------------------------- HI sets


def _slug(name: str) -> str:
    return re.sub(r"[^0-9A-Za-z]+", "_", name).strip("_")


def hi_feature_names(set_kind: str, group_names, variant: str) -> list[str]:
    if set_kind not in HI_SETS:
        raise ValueError(f"unknown HI set {set_kind!r}")
    if set_kind == "gonzalez":
        return ["nap_ls", "sap_ls"]
    if set_kind == "mono":
        names = ["sap", "nap", "sap_ls", "nap_ls", "sigma_e"]
        return names + (["sigma_a"] if variant == "vae" else [])
    gs = [_slug(g) for g in group_names]
    names = [f"sap_{g}" for g in gs] + [f"nap_{g}" for g in gs] + ["sap_ls", "nap_ls"]
    names += [f"sigma_e_{g}" for g in gs]
    if variant == "vae":
        names += [f"sigma_a_{g}" for g in gs]
    return names


@dataclass
class HiVector:
    names: list[str]
    values: np.ndarray
    set_kind: str


def _hi_columns(set_kind, sap_v, nap_v, latent, sigma_e, sigma_a):
    sap_ls, nap_ls = latent
    if set_kind == "gonzalez":
        return [nap_ls, sap_ls]
    cols = [*sap_v, *nap_v, sap_ls, nap_ls, *sigma_e]
    if sigma_a is not None:
        cols += list(sigma_a)
    return cols


def assemble_hi(set_kind, sap_values, nap_values, latent, sigma_e, sigma_a=None, group_names=None) -> HiVector:
    """One timestep. ``sap_values``/``nap_values``/``sigma_*`` are per-group
    sequences; ``latent`` is (SAP_LS, NAP_LS)."""
    if set_kind == "mono" and len(sap_values) != 1:
        raise HiAssemblyError("mono set takes exactly one (monolithic) group")
    variant = "vae" if sigma_a is not None else "ae"
    if group_names is None:
        group_names = [f"g{i + 1}" for i in range(len(sap_values))]
    names = hi_feature_names(set_kind, group_names, variant)
    vals = np.array([float(v) for v in _hi_columns(set_kind, sap_values, nap_values, latent, sigma_e, sigma_a)])
    bad = ~np.isfinite(vals)
    if bad.any():
        raise HiAssemblyError(f"non-finite HI feature {names[int(np.argmax(bad))]!r}")
    return HiVector(names, vals, set_kind)


def compute_hi(model, naps: NapSet, X, set_kind: str, uq_cfg: UqConfig, rng):
    """HI matrix for a batch of full-schema samples; returns (names, (B, F))."""
    if set_kind == "mono" and model.n_groups != 1:
        raise HiAssemblyError("mono HI set requires a monolithic model")
    tr = record_pathway(model, X)
    lat = latent_metrics(tr, naps.latent)
    if set_kind == "gonzalez":
        cols = _hi_columns(set_kind, [], [], lat, [], None)
    else:
        G = model.n_groups
        se = uq.epistemic(model, X, uq_cfg, rng)
        sa = uq.aleatoric(model, X, uq_cfg, rng) if model.variant == "vae" else None
        cols = _hi_columns(
            set_kind,
            [sap(tr, g) for g in range(G)],
            [nap(naps.groups[g], tr, g) for g in range(G)],
            lat,
            [se[:, g] for g in range(G)],
            None if sa is None else [sa[:, g] for g in range(G)],
        )
    names = hi_feature_names(set_kind, model.spec.names, model.variant)
    M = np.column_stack(cols)
    bad = ~np.isfinite(M)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise HiAssemblyError(f"non-finite HI feature {names[c]!r} at row {r}")
    return names, M
