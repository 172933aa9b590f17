"""Hierarchical block-structured encoder/decoder.

Layer ``i`` encodes ``h^{i-1}`` (with ``h^0 = x``) into ``z^i``, split into a
feature block ``s^i`` and a carrier ``h^i`` that feeds the next layer.  The
last layer's carrier is the residual ``c``.  Every block of the assembled
code ``z = (s^1; ...; s^L; c)`` gets its own small decoder into a shared
merge space; the merged features are decoded back to pixels.

Parameters live in a flat ``dict[str, ndarray]`` keyed ``"<group>.<layer>.w"``
and ``"<group>.<layer>.b"`` so optimizers and checkpoints can treat them
uniformly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import ndgrad as G
from .ndgrad import ShapeError, Tensor
from .nn import DenseParams, MlpSpec, init_mlp, mlp_forward

LOG_VAR_RANGE = (-12.0, 8.0)


@dataclass(frozen=True)
class BlockLayout:
    s_dims: tuple[int, ...]
    h_dims: tuple[int, ...]
    c_dim: int

    def __post_init__(self):
        object.__setattr__(self, "s_dims", tuple(int(v) for v in self.s_dims))
        object.__setattr__(self, "h_dims", tuple(int(v) for v in self.h_dims))
        if not self.s_dims:
            raise ValueError("layout needs at least one layer")
        if len(self.h_dims) != len(self.s_dims) - 1:
            raise ValueError(f"need {len(self.s_dims) - 1} carrier widths, got {len(self.h_dims)}")
        if min(self.s_dims + self.h_dims + (self.c_dim,)) <= 0:
            raise ValueError("all block widths must be positive")

    @property
    def num_layers(self) -> int:
        return len(self.s_dims)

    @property
    def latent_dim(self) -> int:
        return sum(self.s_dims) + self.c_dim

    def carrier_dim(self, i: int) -> int:
        return self.h_dims[i] if i < self.num_layers - 1 else self.c_dim

    def layer_dim(self, i: int) -> int:
        return self.s_dims[i] + self.carrier_dim(i)

    def feature_slices(self) -> list[tuple[int, int]]:
        bounds = np.cumsum((0,) + self.s_dims)
        return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]

    def residual_slice(self) -> tuple[int, int]:
        start = sum(self.s_dims)
        return start, start + self.c_dim

    def residual_subblocks(self, width: int = 2) -> list[tuple[int, int]]:
        start, stop = self.residual_slice()
        return [(a, min(a + width, stop)) for a in range(start, stop, width)]

    def traversal_blocks(self, width: int = 2) -> list[tuple[int, int]]:
        """Coordinate ranges moved by traversal: feature blocks, then residual sub-blocks."""
        return self.feature_slices() + self.residual_subblocks(width)

    def to_dict(self) -> dict:
        return {"s_dims": list(self.s_dims), "h_dims": list(self.h_dims), "c_dim": self.c_dim}


@dataclass(frozen=True)
class Architecture:
    layout: BlockLayout
    data_dim: int
    stochastic: bool = False  # per-layer log-variance heads (supervised mode)
    encoder_hidden: tuple[int, ...] = (256, 128)
    part_hidden: tuple[int, ...] = (64,)
    merge_width: int = 32
    decoder_hidden: tuple[int, ...] = (128, 256)
    n_classes: tuple[int, ...] | None = None  # per-layer classifier widths
    classifier_hidden: tuple[int, ...] = (32,)
    projection_hidden: tuple[int, ...] = (64,)
    discriminator_hidden: tuple[int, ...] | None = None  # per-layer discriminators when set
    init_log_var: float = -5.0  # starting bias of the log-variance heads

    def encoder_spec(self, i: int) -> MlpSpec:
        width_in = self.data_dim if i == 0 else self.layout.h_dims[i - 1]
        out = self.layout.layer_dim(i) * (2 if self.stochastic else 1)
        return MlpSpec((width_in, *self.encoder_hidden, out))

    def part_spec(self, j: int) -> MlpSpec:
        widths = self.layout.s_dims + (self.layout.c_dim,)
        return MlpSpec((widths[j], *self.part_hidden, self.merge_width))

    def merge_spec(self) -> MlpSpec:
        width_in = (self.layout.num_layers + 1) * self.merge_width
        return MlpSpec((width_in, *self.decoder_hidden, self.data_dim), output_activation="sigmoid")

    def classifier_spec(self, i: int) -> MlpSpec:
        return MlpSpec((self.layout.s_dims[i], *self.classifier_hidden, self.n_classes[i]))

    def projection_spec(self, i: int) -> MlpSpec:
        return MlpSpec((self.layout.carrier_dim(i), *self.projection_hidden, self.layout.s_dims[i]))

    def discriminator_spec(self, i: int) -> MlpSpec:
        return MlpSpec((self.layout.layer_dim(i), *self.discriminator_hidden, 3))

    def groups(self) -> dict[str, MlpSpec]:
        L = self.layout.num_layers
        out = {f"enc{i}": self.encoder_spec(i) for i in range(L)}
        out.update({f"part{j}": self.part_spec(j) for j in range(L + 1)})
        out["merge"] = self.merge_spec()
        if self.n_classes is not None:
            if len(self.n_classes) != L:
                raise ValueError(f"need {L} classifier widths, got {len(self.n_classes)}")
            out.update({f"cls{i}": self.classifier_spec(i) for i in range(L)})
            out.update({f"proj{i}": self.projection_spec(i) for i in range(L)})
        if self.discriminator_hidden is not None:
            out.update({f"disc{i}": self.discriminator_spec(i) for i in range(L)})
        return out


def init_params(arch: Architecture, seed: int) -> dict[str, np.ndarray]:
    params = {}
    for k, (group, spec) in enumerate(arch.groups().items()):
        for n, layer in enumerate(init_mlp(spec, [seed, k])):
            params[f"{group}.{n}.w"] = layer.weight
            params[f"{group}.{n}.b"] = layer.bias
    if arch.stochastic:
        # Unit-variance noise at the start drowns the signal that deeper
        # layers receive, and their feature blocks never leave the prior.
        last = len(arch.encoder_hidden)
        for i in range(arch.layout.num_layers):
            params[f"enc{i}.{last}.b"][arch.layout.layer_dim(i) :] = arch.init_log_var
    return params


def group(params: Mapping, name: str) -> list[DenseParams]:
    layers = []
    n = 0
    while f"{name}.{n}.w" in params:
        layers.append(DenseParams(params[f"{name}.{n}.w"], params[f"{name}.{n}.b"]))
        n += 1
    if not layers:
        raise KeyError(f"no parameters for group {name!r}")
    return layers


def group_names(params: Mapping, prefix: str) -> list[str]:
    return [k for k in params if k.split(".")[0].rstrip("0123456789") == prefix]


@dataclass
class LatentCode:
    s_parts: list
    c_part: object
    h_parts: list
    means: list = field(default_factory=list)
    log_vars: list = field(default_factory=list)
    eps: list = field(default_factory=list)

    def layer(self, i: int):
        """The full ``z^i = (s^i; h^i)`` of layer ``i`` (``c`` stands in at the last layer)."""
        carrier = self.h_parts[i] if i < len(self.h_parts) else self.c_part
        return G.concat([self.s_parts[i], carrier])

    def carrier(self, i: int):
        return self.h_parts[i] if i < len(self.h_parts) else self.c_part


def encode(params: Mapping, arch: Architecture, x, mode: str = "deterministic", seed=None, eps=None) -> LatentCode:
    """Run the encoder stack.

    ``mode="stochastic"`` draws ``z^i = mu + exp(log_var / 2) * eps``; noise
    comes from ``eps`` (one array per layer) if given, otherwise from
    ``seed``.  ``mode="deterministic"`` returns the means.
    """
    layout = arch.layout
    x = G.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != arch.data_dim:
        raise ShapeError(f"encoder input has shape {x.shape}, expected (batch, {arch.data_dim})")
    if mode not in ("deterministic", "stochastic"):
        raise ValueError(f"unknown encode mode {mode!r}")
    if mode == "stochastic" and not arch.stochastic:
        raise ValueError("stochastic encoding needs log-variance heads")
    rng = np.random.default_rng(seed) if mode == "stochastic" and eps is None else None

    code = LatentCode([], None, [])
    h = x
    for i in range(layout.num_layers):
        out = mlp_forward(group(params, f"enc{i}"), h)
        width = layout.layer_dim(i)
        if arch.stochastic:
            mu = G.slice_last(out, 0, width)
            log_var = G.clip(G.slice_last(out, width, 2 * width), *LOG_VAR_RANGE)
            code.means.append(mu)
            code.log_vars.append(log_var)
            if mode == "stochastic":
                e = eps[i] if eps is not None else rng.standard_normal(mu.shape)
                code.eps.append(e)
                z = G.add(mu, G.mul(G.exp(G.mul(log_var, 0.5)), e))
            else:
                z = mu
        else:
            z = out
        s = G.slice_last(z, 0, layout.s_dims[i])
        carrier = G.slice_last(z, layout.s_dims[i], width)
        code.s_parts.append(s)
        if i < layout.num_layers - 1:
            code.h_parts.append(carrier)
            h = carrier
        else:
            code.c_part = carrier
    return code


def assemble(code: LatentCode) -> Tensor:
    return G.concat(list(code.s_parts) + [code.c_part])


def split(z, layout: BlockLayout) -> tuple[list, object]:
    z = G.as_tensor(z)
    s_parts = [G.slice_last(z, a, b) for a, b in layout.feature_slices()]
    return s_parts, G.slice_last(z, *layout.residual_slice())


def decode(params: Mapping, arch: Architecture, z) -> Tensor:
    layout = arch.layout
    z = G.as_tensor(z)
    if z.ndim != 2 or z.shape[1] != layout.latent_dim:
        raise ShapeError(f"decoder input has shape {z.shape}, expected (batch, {layout.latent_dim})")
    s_parts, c = split(z, layout)
    merged = [mlp_forward(group(params, f"part{j}"), part) for j, part in enumerate(s_parts + [c])]
    return mlp_forward(group(params, "merge"), G.concat(merged), arch.merge_spec())


def traverse_block(z: np.ndarray, layout: BlockLayout, block_index: int, t: float, sub_width: int = 2) -> np.ndarray:
    """Set every coordinate of one block to ``t`` (a move along its diagonal).

    Indices ``0..L-1`` select feature blocks; ``L`` onwards select the
    ``sub_width``-wide sub-blocks of the residual, in order.
    """
    blocks = layout.traversal_blocks(sub_width)
    if not 0 <= block_index < len(blocks):
        raise IndexError(f"block index {block_index} outside [0, {len(blocks) - 1}]")
    z = np.array(z, dtype=np.float64)
    if z.shape[-1] != layout.latent_dim:
        raise ShapeError(f"code width {z.shape[-1]} does not match layout width {layout.latent_dim}")
    a, b = blocks[block_index]
    z[..., a:b] = t
    return z


def encode_array(params: Mapping, arch: Architecture, x: np.ndarray, batch: int = 1024) -> np.ndarray:
    """Deterministic assembled codes as a plain array, evaluated in chunks."""
    out = [assemble(encode(params, arch, x[i : i + batch])).value for i in range(0, len(x), batch)]
    return np.concatenate(out, axis=0)


def decode_array(params: Mapping, arch: Architecture, z: np.ndarray) -> np.ndarray:
    return decode(params, arch, z).value
