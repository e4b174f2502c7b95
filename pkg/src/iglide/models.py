"""Monolithic and grouped (I-GLIDE) autoencoders, deterministic or variational.

A monolithic model is the grouped model with a single group spanning every
input channel, so both share one implementation.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import GroupSpec, GroupSpecError
from .nn import (
    AdamState,
    DenseLayer,
    DenseNet,
    ForwardTrace,
    ShapeError,
    adam_step,
    backward,
    forward,
)

# name -> (grouped?, variant)
MODEL_KINDS = {
    "ae": (False, "ae"),
    "vae": (False, "vae"),
    "iglide_ae": (True, "ae"),
    "iglide_vae": (True, "vae"),
}


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 2
    hidden: tuple[int, ...] = (10, 20, 10)
    dropout: float = 0.2
    beta: float = 1.0
    batch_size: int = 128
    epochs: int = 200
    window_size: int = 1
    test_size: float = 0.3
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.window_size != 1:
            raise NotImplementedError("only window_size 1 is supported")
        if not 0.0 <= self.test_size < 1.0:
            raise ValueError("test_size must lie in [0, 1)")


@dataclass
class ModelOutput:
    xhat: np.ndarray
    encoder_traces: list[ForwardTrace]
    decoder_traces: list[ForwardTrace]
    z: np.ndarray
    mu: np.ndarray | None = None
    logvar: np.ndarray | None = None
    noise: np.ndarray | None = None
    fusion_traces: tuple[ForwardTrace, ...] = ()


class GroupedAutoencoder:
    """Per-group encoders fused into one latent; per-group decoders read the
    full latent and reconstruct their own slice."""

    def __init__(self, spec: GroupSpec, schema: Sequence[str], cfg: ModelConfig, variant: str, rng,
                 name: str | None = None):
        if variant not in ("ae", "vae"):
            raise ValueError(f"unknown variant {variant!r}")
        self.spec = spec
        self.schema = list(schema)
        self.cfg = cfg
        self.variant = variant
        self.name = name or ("iglide_" + variant if len(spec) > 1 else variant)
        idx = spec.indices(self.schema)
        if any(len(i) == 0 for i in idx):
            raise GroupSpecError("empty group")
        self.group_index = idx
        self.columns = [c for i in idx for c in i]
        bounds = np.cumsum([0] + [len(i) for i in idx])
        self.slices = [slice(int(a), int(b)) for a, b in zip(bounds, bounds[1:])]

        hid = list(cfg.hidden)
        n_hid = len(hid)
        self.encoders = [
            DenseNet.build([len(i)] + hid, ["relu"] * n_hid, [0.0] * n_hid, rng) for i in idx
        ]
        fuse_in = hid[-1] * len(idx)
        lat = cfg.latent_dim
        if variant == "ae":
            self.heads = [DenseNet.build([fuse_in, lat], ["identity"], [0.0], rng)]
        else:
            self.heads = [
                DenseNet.build([fuse_in, lat], ["identity"], [0.0], rng),
                DenseNet.build([fuse_in, lat], ["identity"], [0.0], rng),
            ]
        dec_widths = [lat] + hid[::-1]
        self.decoders = [
            DenseNet.build(
                dec_widths + [len(i)],
                ["relu"] * n_hid + ["identity"],
                [cfg.dropout] * n_hid + [0.0],
                rng,
            )
            for i in idx
        ]
        self._pack()

    # -- parameters ---------------------------------------------------------

    def nets(self) -> list[DenseNet]:
        return [*self.encoders, *self.heads, *self.decoders]

    def _pack(self) -> None:
        """Rebind every weight/bias as a view into one flat parameter vector."""
        arrays = [p for net in self.nets() for p in net.parameters()]
        self.params = np.concatenate([a.ravel() for a in arrays])
        pos = 0
        for net in self.nets():
            for layer in net.layers:
                n = layer.weight.size
                layer.weight = self.params[pos : pos + n].reshape(layer.weight.shape)
                pos += n
                n = layer.bias.size
                layer.bias = self.params[pos : pos + n]
                pos += n

    def set_params(self, flat: np.ndarray) -> None:
        if flat.shape != self.params.shape:
            raise ShapeError(f"parameter vector {flat.shape} != {self.params.shape}")
        self.params[:] = flat

    @property
    def n_groups(self) -> int:
        return len(self.spec)

    @property
    def input_dim(self) -> int:
        return len(self.columns)

    # -- forward ------------------------------------------------------------

    def select(self, X) -> np.ndarray:
        """Model input (group order) from full-schema samples."""
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != len(self.schema):
            raise ShapeError(f"expected {len(self.schema)} channels, got {X.shape[-1]}")
        return X[..., self.columns]

    def encode_groups(self, xg) -> list[ForwardTrace]:
        """Encoder traces for model-ordered input ``xg``."""
        return [forward(enc, xg[..., s]) for enc, s in zip(self.encoders, self.slices)]

    def latent(self, enc_traces, mode="eval", rng=None):
        """(z, mu, logvar, noise, head traces) from encoder traces."""
        fused = np.concatenate([t.output for t in enc_traces], axis=-1)
        heads = tuple(forward(h, fused) for h in self.heads)
        if self.variant == "ae":
            return heads[0].output, None, None, None, heads
        mu, logvar = heads[0].output, heads[1].output
        if mode == "eval":
            return mu, mu, logvar, None, heads
        noise = rng.standard_normal(mu.shape)
        return mu + np.exp(0.5 * logvar) * noise, mu, logvar, noise, heads

    def decode(self, z, mode="eval", rng=None):
        traces = [forward(dec, z, mode, rng) for dec in self.decoders]
        return np.concatenate([t.output for t in traces], axis=-1), traces

    def forward_model(self, xg, mode="eval", rng=None) -> ModelOutput:
        enc = self.encode_groups(xg)
        z, mu, logvar, noise, heads = self.latent(enc, mode, rng)
        xhat, dec = self.decode(z, mode, rng)
        return ModelOutput(xhat, enc, dec, z, mu, logvar, noise, heads)

    # -- training -----------------------------------------------------------

    def loss_and_grad(self, xg, mode="train", rng=None):
        """Objective MSE + beta*KL (VAE) on model-ordered input and its exact
        gradient as a flat vector aligned with ``self.params``."""
        out = self.forward_model(xg, mode, rng)
        B = xg.shape[0]
        diff = out.xhat - xg
        recon = float(np.mean(diff**2))
        dxhat = 2.0 * diff / diff.size

        grads: dict[int, list[np.ndarray]] = {}
        dz = np.zeros_like(out.z)
        for dec, tr, s in zip(self.decoders, out.decoder_traces, self.slices):
            g, dzk = backward(dec, tr, dxhat[:, s])
            grads[id(dec)] = g
            dz += dzk

        kl = 0.0
        beta = self.cfg.beta
        if self.variant == "ae":
            g, dfused = backward(self.heads[0], out.fusion_traces[0], dz)
            grads[id(self.heads[0])] = g
        else:
            mu, lv = out.mu, out.logvar
            kl = float(0.5 * np.sum(np.exp(lv) + mu**2 - 1.0 - lv) / B)
            dmu = dz + beta * mu / B
            dlv = beta * 0.5 * (np.exp(lv) - 1.0) / B
            if out.noise is not None:
                dlv = dlv + dz * out.noise * 0.5 * np.exp(0.5 * lv)
            g1, df1 = backward(self.heads[0], out.fusion_traces[0], dmu)
            g2, df2 = backward(self.heads[1], out.fusion_traces[1], dlv)
            grads[id(self.heads[0])] = g1
            grads[id(self.heads[1])] = g2
            dfused = df1 + df2

        width = self.cfg.hidden[-1]
        for k, (enc, tr) in enumerate(zip(self.encoders, out.encoder_traces)):
            g, _ = backward(enc, tr, dfused[:, k * width : (k + 1) * width])
            grads[id(enc)] = g

        flat = np.concatenate([a.ravel() for net in self.nets() for a in grads[id(net)]])
        return recon + beta * kl, flat, recon, kl

    # -- persistence --------------------------------------------------------

    def descriptor(self) -> dict:
        return {
            "name": self.name,
            "variant": self.variant,
            "groups": [[n, list(c)] for n, c in self.spec.groups],
            "schema": self.schema,
            "config": dataclasses.asdict(self.cfg),
        }

    @classmethod
    def from_descriptor(cls, desc: dict, params: np.ndarray) -> "GroupedAutoencoder":
        cfg_d = dict(desc["config"])
        cfg_d["hidden"] = tuple(cfg_d["hidden"])
        cfg = ModelConfig(**cfg_d)
        spec = GroupSpec.from_mapping([(n, c) for n, c in desc["groups"]])
        model = cls(spec, desc["schema"], cfg, desc["variant"], np.random.default_rng(0), desc["name"])
        model.set_params(np.asarray(params, dtype=float))
        return model


def build(kind: str, schema: Sequence[str], cfg: ModelConfig, rng, spec: GroupSpec | None = None) -> GroupedAutoencoder:
    """``kind`` in {ae, vae, iglide_ae, iglide_vae}. Monolithic kinds use every
    channel of ``spec`` (or of ``schema`` when no spec is given) as one group."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    grouped, variant = MODEL_KINDS[kind]
    if grouped:
        if spec is None:
            raise GroupSpecError("grouped model needs a group spec")
        use = spec
    else:
        use = GroupSpec.single(spec.channels if spec is not None else schema)
    return GroupedAutoencoder(use, schema, cfg, variant, rng, kind)


def model_forward(model: GroupedAutoencoder, X, mode="eval", rng=None) -> ModelOutput:
    """Forward on full-schema samples."""
    return model.forward_model(model.select(X), mode, rng)


def train(model: GroupedAutoencoder, samples, cfg: ModelConfig | None, rng) -> list[dict]:
    """Mini-batch Adam on healthy samples; returns per-epoch
    ``{epoch, train_loss, val_loss, kl_term}`` records."""
    cfg = cfg or model.cfg
    X = model.select(samples)
    n = len(X)
    if n == 0:
        raise ValueError("empty training set")
    perm = rng.permutation(n)
    n_val = int(math.floor(cfg.test_size * n))
    if n - n_val < 1:
        n_val = n - 1
    val, tr = X[perm[:n_val]], X[perm[n_val:]]

    state = AdamState(lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(tr))
        tot = kl_tot = 0.0
        for start in range(0, len(tr), cfg.batch_size):
            batch = tr[order[start : start + cfg.batch_size]]
            loss, grad, _, kl = model.loss_and_grad(batch, "train", rng)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            adam_step([model.params], [grad], state)
            tot += loss * len(batch)
            kl_tot += kl * len(batch)
        train_loss = tot / len(tr)
        val_loss = evaluate_loss(model, val) if len(val) else float("nan")
        if not np.isfinite(train_loss):
            raise DivergenceError(epoch, train_loss)
        history.append(
            {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "kl_term": kl_tot / len(tr)}
        )
    return history


def evaluate_loss(model: GroupedAutoencoder, xg) -> float:
    """Eval-mode objective on model-ordered input (VAE: z = mu, KL included)."""
    out = model.forward_model(xg, "eval")
    loss = float(np.mean((out.xhat - xg) ** 2))
    if model.variant == "vae":
        loss += model.cfg.beta * float(
            0.5 * np.sum(np.exp(out.logvar) + out.mu**2 - 1.0 - out.logvar) / len(xg)
        )
    return loss
