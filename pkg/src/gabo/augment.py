"""Augmentation generator: input construction, the phi network, transforms.

Three generator input schemes (noise / classic node features / a trainable
GIN layer over atom embeddings) crossed with three node-embedding
transforms (bias / element-wise multiplication / shifted element-wise
multiplication), plus the uniform-noise baseline augmenter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Params, Tensor
from .models import _mlp_params, gin_layer, mlp_forward

GENERATION_TYPES = ("noise", "classic", "gin")
TRANSFORM_TYPES = ("bias", "elementwise", "shifted_elementwise")
# "identity" is accepted by apply_transform for the reduction checks
IDENTITY_TRANSFORM = "identity"


@dataclass
class AugmenterConfig:
    generation_type: str = "gin"
    transform_type: str = "bias"
    latent_dim: int = 10
    embed_dim: int = 256
    hidden_dim: int = 128
    gin_hidden_mult: int = 2

    def __post_init__(self):
        if self.generation_type not in GENERATION_TYPES:
            raise ValueError(f"unknown generation_type {self.generation_type!r}")
        if self.transform_type not in TRANSFORM_TYPES + (IDENTITY_TRANSFORM,):
            raise ValueError(f"unknown transform_type {self.transform_type!r}")
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")

    @property
    def input_dim(self) -> int:
        if self.generation_type == "noise":
            return self.latent_dim
        if self.generation_type == "classic":
            return self.latent_dim + 4
        return self.latent_dim + self.embed_dim

    @property
    def output_dim(self) -> int:
        return self.embed_dim if self.transform_type == "bias" else 2 * self.embed_dim


def init_augmenter_params(cfg: AugmenterConfig, rng) -> Params:
    items = {}
    if cfg.generation_type == "gin":
        hidden = cfg.gin_hidden_mult * cfg.embed_dim
        items.update(_mlp_params(rng, "agin", (cfg.embed_dim, hidden, cfg.embed_dim)))
    # small output layer: phi starts near zero and grows as the outer loop
    # finds useful transforms, rather than distorting embeddings from step one
    items.update(_mlp_params(rng, "gen", (cfg.input_dim, cfg.hidden_dim, cfg.output_dim),
                             last_gain=0.1))
    return Params(items)


def noise_rng(seed: int, step: int) -> np.random.Generator:
    """Fresh augmentation noise per forward pass, reproducible per step."""
    return np.random.default_rng([seed, 0xA0B0, step])


def build_generator_input(cfg: AugmenterConfig, batch, rng,
                          atom_embeddings: Tensor | None = None,
                          aug_params: Params | None = None) -> Tensor:
    """Per-node generator inputs for the configured generation type.

    noise:   z ~ U[-1, 1]^latent per node.
    classic: concat(z, cached classic features).
    gin:     concat(z, one GIN layer over the atom embeddings); gradients
             flow into the layer's weights.
    """
    n = batch.num_nodes
    z = Tensor(rng.uniform(-1.0, 1.0, size=(n, cfg.latent_dim)))
    if cfg.generation_type == "noise":
        return z
    if cfg.generation_type == "classic":
        if batch.classic_feats is None:
            raise ValueError("classic generation type needs cached classic features; "
                             "run ensure_classic_features over the dataset first")
        return ad.concat([z, Tensor(batch.classic_feats)], axis=1)
    if atom_embeddings is None or aug_params is None:
        raise ValueError("gin generation type needs atom embeddings and augmenter params")
    gin_feats = gin_layer(aug_params, "agin", atom_embeddings,
                          batch.edge_src, batch.edge_dst, epsilon=0.0)
    return ad.concat([z, gin_feats], axis=1)


def generate_phi(params: Params, cfg: AugmenterConfig, inputs: Tensor):
    """Row-wise generator MLP; multiplicative modes split the output in half.

    Returns (phi,) for bias mode and (phi1, phi2) otherwise.
    """
    if inputs.shape[1] != cfg.input_dim:
        raise ad.ShapeError(f"generate_phi: input dim {inputs.shape[1]} does not "
                            f"match configured {cfg.input_dim}")
    out = mlp_forward(params, "gen", inputs)
    if cfg.transform_type == "bias":
        return (out,)
    d = cfg.embed_dim
    return (ad.narrow(out, 1, 0, d), ad.narrow(out, 1, d, d))


def apply_transform(h: Tensor, phi, transform_type: str) -> Tensor:
    """Apply the selected per-node transform to the embeddings."""
    if transform_type == IDENTITY_TRANSFORM:
        return h
    if transform_type == "bias":
        (phi0,) = phi
        return ad.add(h, phi0)
    phi1, phi2 = phi
    if transform_type == "elementwise":
        return ad.add(ad.mul(phi1, h), phi2)
    if transform_type == "shifted_elementwise":
        one = Tensor(np.ones(phi1.shape))
        return ad.add(ad.mul(ad.add(one, phi1), h), phi2)
    raise ValueError(f"unknown transform_type {transform_type!r}")


def identity_phi(n: int, d: int, transform_type: str):
    """The phi that makes each transform the identity map."""
    if transform_type == "bias":
        return (Tensor(np.zeros((n, d))),)
    if transform_type == "elementwise":
        return (Tensor(np.ones((n, d))), Tensor(np.zeros((n, d))))
    return (Tensor(np.zeros((n, d))), Tensor(np.zeros((n, d))))


def phi_row_norms(phi) -> np.ndarray:
    """Per-node L2 norm of the full transform parameter vector."""
    stacked = np.concatenate([p.data for p in phi], axis=1)
    return np.sqrt((stacked ** 2).sum(axis=1))


def baseline_noise_augment(h: Tensor, rng) -> Tensor:
    """h + u with u ~ U[-1, 1]^d i.i.d. per node, resampled each call."""
    u = rng.uniform(-1.0, 1.0, size=h.shape)
    return ad.add(h, Tensor(u))
