"""The three networks: an encoder that maps an LR image to a compact
degradation representation, a degrader that reproduces the LR image from a
clean HR image conditioned on that representation, and a generator that
super-resolves the LR image under the same conditioning.

Conditioning uses per-channel feature-wise affine modulation predicted
from the representation by zero-initialized heads, so at initialization
every conditional block is an identity w.r.t. the representation.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, ParameterError, Tensor

LEAKY_SLOPE = 0.1
MIN_ENCODER_INPUT = 16


@dataclass(frozen=True)
class ArchSpec:
    """Architecture descriptor; uniquely determines every parameter shape.

    Defaults are desk-scale: wide enough to learn blur-width separations on
    synthetic textures, small enough that a 2000-step run fits in minutes.
    """

    scale: int = 2
    c_repr: int = 16
    enc_channels: tuple = (16, 16, 32, 32)
    enc_strides: tuple = (1, 2, 1, 2, 1)
    trunk_width: int = 12
    trunk_blocks: int = 3
    mlp_hidden: int = 64
    kl_head: bool = False

    def __post_init__(self):
        if len(self.enc_channels) != 4 or len(self.enc_strides) != 5:
            raise ParameterError("encoder needs 4 hidden widths and 5 strides")
        if min((self.scale, self.c_repr, self.trunk_width, self.trunk_blocks,
                self.mlp_hidden, *self.enc_channels, *self.enc_strides)) < 1:
            raise ParameterError("all architecture sizes must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        d["enc_strides"] = list(self.enc_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        d["enc_channels"] = tuple(d["enc_channels"])
        d["enc_strides"] = tuple(d["enc_strides"])
        return cls(**d)


class _Init:
    """Fan-in-scaled normal initializer drawing in a fixed parameter order."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def conv(self, cout, cin, k) -> Tensor:
        std = np.sqrt(2.0 / (cin * k * k))
        return Tensor(self.rng.standard_normal((cout, cin, k, k)) * std,
                      requires_grad=True)

    def dense(self, dout, din) -> Tensor:
        std = np.sqrt(2.0 / din)
        return Tensor(self.rng.standard_normal((dout, din)) * std, requires_grad=True)

    @staticmethod
    def zeros(*shape) -> Tensor:
        return Tensor(np.zeros(shape), requires_grad=True)


class ConditionalBlock:
    """conv3x3 -> feature-wise (scale, shift) from the condition -> leaky relu."""

    def __init__(self, init: _Init, width: int, cond_dim: int):
        self.conv_w = init.conv(width, width, 3)
        self.conv_b = init.zeros(width)
        # zero heads: identity modulation at step 0
        self.gamma_w = init.zeros(width, cond_dim)
        self.gamma_b = init.zeros(width)
        self.beta_w = init.zeros(width, cond_dim)
        self.beta_b = init.zeros(width)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        h = ad.bias_add(ad.conv2d(x, self.conv_w, 1, 1), self.conv_b)
        gamma = ad.linear(cond, self.gamma_w, self.gamma_b)
        beta = ad.linear(cond, self.beta_w, self.beta_b)
        return ad.leaky_relu(ad.film(h, gamma, beta), LEAKY_SLOPE)

    def params(self, prefix: str) -> dict:
        return {
            f"{prefix}.conv.w": self.conv_w, f"{prefix}.conv.b": self.conv_b,
            f"{prefix}.gamma.w": self.gamma_w, f"{prefix}.gamma.b": self.gamma_b,
            f"{prefix}.beta.w": self.beta_w, f"{prefix}.beta.b": self.beta_b,
        }


class Encoder:
    """Five 5x5 conv layers (no normalization), global average pooling."""

    def __init__(self, init: _Init, arch: ArchSpec):
        self.arch = arch
        chans = (3, *arch.enc_channels, arch.c_repr)
        self.weights = [init.conv(chans[i + 1], chans[i], 5) for i in range(5)]
        self.biases = [init.zeros(chans[i + 1]) for i in range(5)]
        self.logvar_w = None
        self.logvar_b = None
        if arch.kl_head:
            self.logvar_w = init.conv(arch.c_repr, chans[4], 5)
            self.logvar_b = init.zeros(arch.c_repr)

    def forward(self, lr: Tensor, with_logvar: bool = False):
        if lr.data.ndim != 4 or lr.data.shape[1] != 3:
            raise DimensionError(f"encoder expects [N,3,H,W], got {lr.data.shape}")
        if min(lr.data.shape[2], lr.data.shape[3]) < MIN_ENCODER_INPUT:
            raise DimensionError(
                f"encoder input must be >= {MIN_ENCODER_INPUT}px, got {lr.data.shape}"
            )
        h = lr
        for i in range(4):
            h = ad.bias_add(ad.conv2d(h, self.weights[i], self.arch.enc_strides[i], 2),
                            self.biases[i])
            h = ad.leaky_relu(h, LEAKY_SLOPE)
        out = ad.bias_add(ad.conv2d(h, self.weights[4], self.arch.enc_strides[4], 2),
                          self.biases[4])
        f = ad.global_avg_pool(out)
        if not with_logvar:
            return f
        if self.logvar_w is None:
            raise ParameterError("encoder was built without a logvar head")
        lv = ad.bias_add(ad.conv2d(h, self.logvar_w, self.arch.enc_strides[4], 2),
                         self.logvar_b)
        return f, ad.global_avg_pool(lv)

    def params(self) -> dict:
        d = {}
        for i in range(5):
            d[f"enc.conv{i}.w"] = self.weights[i]
            d[f"enc.conv{i}.b"] = self.biases[i]
        if self.logvar_w is not None:
            d["enc.logvar.w"] = self.logvar_w
            d["enc.logvar.b"] = self.logvar_b
        return d


class Degrader:
    """Conditional trunk at HR resolution, terminated by a stride-s conv."""

    def __init__(self, init: _Init, arch: ArchSpec):
        self.arch = arch
        w = arch.trunk_width
        self.head_w = init.conv(w, 3, 3)
        self.head_b = init.zeros(w)
        self.blocks = [ConditionalBlock(init, w, arch.c_repr)
                       for _ in range(arch.trunk_blocks)]
        self.tail_w = init.conv(3, w, 3)
        self.tail_b = init.zeros(3)

    def forward(self, hr: Tensor, f: Tensor) -> Tensor:
        if hr.data.ndim != 4 or hr.data.shape[1] != 3:
            raise DimensionError(f"degrader expects [N,3,H,W], got {hr.data.shape}")
        if f.data.ndim != 2 or f.data.shape[0] != hr.data.shape[0]:
            raise DimensionError(
                f"representation batch {f.data.shape} does not match hr batch "
                f"{hr.data.shape}"
            )
        s = self.arch.scale
        if hr.data.shape[2] % s or hr.data.shape[3] % s:
            raise DimensionError(
                f"hr dims {hr.data.shape[2:]} not divisible by scale {s}"
            )
        h = ad.leaky_relu(ad.bias_add(ad.conv2d(hr, self.head_w, 1, 1), self.head_b),
                          LEAKY_SLOPE)
        for blk in self.blocks:
            h = blk.forward(h, f)
        return ad.bias_add(ad.conv2d(h, self.tail_w, s, 1), self.tail_b)

    def params(self) -> dict:
        d = {"deg.head.w": self.head_w, "deg.head.b": self.head_b}
        for i, blk in enumerate(self.blocks):
            d.update(blk.params(f"deg.block{i}"))
        d["deg.tail.w"] = self.tail_w
        d["deg.tail.b"] = self.tail_b
        return d


class Generator:
    """Conditional trunk at LR resolution, nearest-neighbour upscaling and a
    global skip of the upsampled input; the representation is compressed by
    a small MLP before conditioning."""

    def __init__(self, init: _Init, arch: ArchSpec):
        self.arch = arch
        w, hdim = arch.trunk_width, arch.mlp_hidden
        self.mlp1_w = init.dense(hdim, arch.c_repr)
        self.mlp1_b = init.zeros(hdim)
        self.mlp2_w = init.dense(hdim, hdim)
        self.mlp2_b = init.zeros(hdim)
        self.head_w = init.conv(w, 3, 3)
        self.head_b = init.zeros(w)
        self.blocks = [ConditionalBlock(init, w, hdim)
                       for _ in range(arch.trunk_blocks)]
        self.tail_w = init.conv(3, w, 3)
        self.tail_b = init.zeros(3)

    def forward(self, lr: Tensor, f: Tensor) -> Tensor:
        if lr.data.ndim != 4 or lr.data.shape[1] != 3:
            raise DimensionError(f"generator expects [N,3,h,w], got {lr.data.shape}")
        if f.data.ndim != 2 or f.data.shape[0] != lr.data.shape[0]:
            raise DimensionError(
                f"representation batch {f.data.shape} does not match lr batch "
                f"{lr.data.shape}"
            )
        cond = ad.leaky_relu(ad.linear(f, self.mlp1_w, self.mlp1_b), LEAKY_SLOPE)
        cond = ad.linear(cond, self.mlp2_w, self.mlp2_b)
        h = ad.leaky_relu(ad.bias_add(ad.conv2d(lr, self.head_w, 1, 1), self.head_b),
                          LEAKY_SLOPE)
        for blk in self.blocks:
            h = blk.forward(h, cond)
        s = self.arch.scale
        up = ad.nn_upsample(h, s)
        out = ad.bias_add(ad.conv2d(up, self.tail_w, 1, 1), self.tail_b)
        return ad.add(out, ad.nn_upsample(lr, s))

    def params(self) -> dict:
        d = {
            "gen.mlp1.w": self.mlp1_w, "gen.mlp1.b": self.mlp1_b,
            "gen.mlp2.w": self.mlp2_w, "gen.mlp2.b": self.mlp2_b,
            "gen.head.w": self.head_w, "gen.head.b": self.head_b,
        }
        for i, blk in enumerate(self.blocks):
            d.update(blk.params(f"gen.block{i}"))
        d["gen.tail.w"] = self.tail_w
        d["gen.tail.b"] = self.tail_b
        return d


class Model:
    """Encoder + degrader + generator with a shared architecture descriptor."""

    def __init__(self, arch: ArchSpec = ArchSpec(), seed: int = 0):
        init = _Init([seed, 0xB11D])
        self.arch = arch
        self.encoder = Encoder(init, arch)
        self.degrader = Degrader(init, arch)
        self.generator = Generator(init, arch)

    def encode(self, lr: Tensor) -> Tensor:
        """LR batch [N,3,h,w] -> representation batch [N, c_repr]."""
        return self.encoder.forward(lr)

    def encode_with_logvar(self, lr: Tensor):
        return self.encoder.forward(lr, with_logvar=True)

    def reproduce(self, hr: Tensor, f: Tensor) -> Tensor:
        """HR batch + representations -> reproduced LR batch [N,3,H/s,W/s]."""
        return self.degrader.forward(hr, f)

    def super_resolve(self, lr: Tensor, f: Tensor) -> Tensor:
        """LR batch + representations -> SR batch [N,3,s*h,s*w]."""
        return self.generator.forward(lr, f)

    def parameters(self) -> dict:
        """Ordered name -> Tensor map over all trainable parameters."""
        d = {}
        d.update(self.encoder.params())
        d.update(self.degrader.params())
        d.update(self.generator.params())
        return d

    def parameter_groups(self) -> dict:
        """Parameters split by sub-network (used by gradient-partition tests)."""
        return {
            "encoder": self.encoder.params(),
            "degrader": self.degrader.params(),
            "generator": self.generator.params(),
        }

    def load_state(self, tensors: dict):
        params = self.parameters()
        missing = set(params) - set(tensors)
        extra = set(tensors) - set(params)
        if missing or extra:
            raise ParameterError(
                f"parameter set mismatch: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}"
            )
        for name, p in params.items():
            arr = tensors[name]
            if arr.shape != p.data.shape:
                raise ParameterError(
                    f"{name}: shape {arr.shape} does not match {p.data.shape}"
                )
            p.data = np.ascontiguousarray(arr, dtype=np.float64)
