"""Subnetwork: an explicitly-driven network fragment.

Split training moves activations and gradients between parties by hand, so a
Subnetwork exposes forward() returning a detached output plus a one-shot
ForwardContext, and backward() consuming that context with the upstream
gradient to produce the input gradient and per-parameter gradients. Parameter
updates go through optimizer_step() with explicit state, never through a
hidden optimizer object.
"""

import copy
import io
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from ..errors import ConfigurationError, DimensionError, FormatError, StateError
from .layers import chain_shape, to_module

PARAM_MAGIC = b"SBN1"
PARAM_VERSION = 1


@dataclass
class ForwardContext:
    """Held state from one forward pass; consumed exactly once by backward()."""

    net: "Subnetwork"
    x: torch.Tensor
    y: torch.Tensor
    used: bool = False


class Subnetwork:
    def __init__(self, specs, in_shape, modules, unit_offsets=None):
        self.specs = tuple(specs)
        if not self.specs:
            raise ConfigurationError("a subnetwork needs at least one layer")
        self.in_shape = tuple(in_shape)
        self.out_shape = chain_shape(self.specs, self.in_shape)
        self.module = nn.Sequential(*modules)
        if len(modules) != len(self.specs):
            raise ConfigurationError("one module per layer spec required")
        # spec indices at which architecture units begin; used to slice the
        # network at a unit boundary (e.g. partial-depth fine-tuning).
        self.unit_offsets = tuple(unit_offsets) if unit_offsets else (0,)

    def parameters(self):
        return list(self.module.parameters())

    @property
    def out_dim(self):
        n = 1
        for d in self.out_shape:
            n *= d
        return n

    def forward(self, x, train_mode=False):
        """Run the fragment; returns (detached output, ForwardContext)."""
        if tuple(x.shape[1:]) != self.in_shape:
            raise DimensionError(f"expected input {self.in_shape}, got {tuple(x.shape[1:])}")
        self.module.train(train_mode)
        xi = x.detach().clone().requires_grad_(True)
        y = self.module(xi)
        return y.detach(), ForwardContext(net=self, x=xi, y=y)

    def infer(self, x):
        """Plain eval-mode forward with no recorded context."""
        if tuple(x.shape[1:]) != self.in_shape:
            raise DimensionError(f"expected input {self.in_shape}, got {tuple(x.shape[1:])}")
        self.module.eval()
        with torch.no_grad():
            return self.module(x)

    def backward(self, ctx, dy):
        """Backprop dy through the context; returns (dx, [grad per parameter])."""
        if ctx.net is not self:
            raise StateError("forward context belongs to a different subnetwork")
        if ctx.used:
            raise StateError("forward context already consumed")
        if dy.shape != ctx.y.shape:
            raise DimensionError(f"gradient shape {tuple(dy.shape)} != output {tuple(ctx.y.shape)}")
        ctx.used = True
        params = self.parameters()
        outs = torch.autograd.grad(ctx.y, [ctx.x] + params, grad_outputs=dy, allow_unused=True)
        dx = outs[0]
        grads = [g if g is not None else torch.zeros_like(p) for g, p in zip(outs[1:], params)]
        return dx.detach(), [g.detach() for g in grads]

    def clone(self):
        """Deep copy: independent parameters, same architecture."""
        mods = [copy.deepcopy(m) for m in self.module]
        return Subnetwork(self.specs, self.in_shape, mods, self.unit_offsets)

    def slice_at_unit(self, boundary):
        """Split at a unit boundary into (prefix, suffix) sharing parameters.

        boundary counts units from the subnetwork's input; 0 gives an empty
        prefix (returned as None) and the whole net as suffix.
        """
        n_units = len(self.unit_offsets)
        if not 0 <= boundary <= n_units:
            raise ConfigurationError(f"unit boundary {boundary} out of range 0..{n_units}")
        if boundary == 0:
            return None, self
        if boundary == n_units:
            return self, None
        cut = self.unit_offsets[boundary]
        mods = list(self.module)
        prefix = Subnetwork(self.specs[:cut], self.in_shape, mods[:cut], self.unit_offsets[:boundary])
        mid_shape = prefix.out_shape
        rel = tuple(o - cut for o in self.unit_offsets[boundary:])
        suffix = Subnetwork(self.specs[cut:], mid_shape, mods[cut:], rel)
        return prefix, suffix


def build_subnetwork(specs, in_shape, seed, unit_offsets=None):
    """Build a subnetwork with seed-deterministic initialization."""
    specs = tuple(specs)
    chain_shape(specs, in_shape)  # validate before paying for module init
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        modules = [to_module(s) for s in specs]
    return Subnetwork(specs, in_shape, modules, unit_offsets)


def compose(*nets):
    """Chain subnetworks into one, sharing the underlying parameters."""
    nets = [n for n in nets if n is not None]
    if not nets:
        raise ConfigurationError("nothing to compose")
    specs, modules, offsets = [], [], []
    for net in nets:
        if specs:
            expect = chain_shape(specs, nets[0].in_shape)
            if tuple(net.in_shape) != expect:
                raise DimensionError(f"cannot chain: {expect} does not feed {net.in_shape}")
        offsets.extend(o + len(specs) for o in net.unit_offsets)
        specs.extend(net.specs)
        modules.extend(net.module)
    return Subnetwork(specs, nets[0].in_shape, modules, offsets)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerConfig:
    kind: str = "adam"  # "sgd" | "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")


def optimizer_step(net, grads, cfg, state=None):
    """Apply one explicit update; returns the (new or advanced) state dict.

    State layout: {"t": int, "m": [tensor per param], "v": [tensor per param]}
    where SGD uses "m" as its momentum buffer and ignores "v".
    """
    params = net.parameters()
    if len(grads) != len(params):
        raise DimensionError(f"got {len(grads)} gradients for {len(params)} parameters")
    for g, p in zip(grads, params):
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {tuple(g.shape)} != parameter {tuple(p.shape)}")
    if state is None:
        state = {
            "t": 0,
            "m": [torch.zeros_like(p) for p in params],
            "v": [torch.zeros_like(p) for p in params],
        }
    state["t"] += 1
    t = state["t"]
    with torch.no_grad():
        if cfg.kind == "sgd":
            for p, g, m in zip(params, grads, state["m"]):
                if cfg.momentum != 0.0:
                    m.mul_(cfg.momentum).add_(g)
                    p.sub_(cfg.lr * m)
                else:
                    p.sub_(cfg.lr * g)
        else:  # adam
            bc1 = 1.0 - cfg.beta1**t
            bc2 = 1.0 - cfg.beta2**t
            for p, g, m, v in zip(params, grads, state["m"], state["v"]):
                m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
                v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
                p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(cfg.eps), value=-cfg.lr)
    return state


# ---------------------------------------------------------------------------
# parameter serialization
#
# Versioned blob: magic "SBN1", u32 version, u32 entry count, then for each
# entry a name (u16 length + utf8), u8 rank, u32 dims, and the raw values as
# little-endian float32. Entries cover parameters plus batch-norm running
# statistics, in state_dict order.


def _float_entries(net):
    return [(k, v) for k, v in net.module.state_dict().items() if v.is_floating_point()]


def save_params(net):
    out = io.BytesIO()
    entries = _float_entries(net)
    out.write(PARAM_MAGIC)
    out.write(struct.pack("<II", PARAM_VERSION, len(entries)))
    for name, tensor in entries:
        nb = name.encode("utf-8")
        out.write(struct.pack("<H", len(nb)))
        out.write(nb)
        dims = tuple(tensor.shape)
        out.write(struct.pack("<B", len(dims)))
        out.write(struct.pack(f"<{len(dims)}I", *dims))
        out.write(tensor.detach().to(torch.float32).numpy().astype("<f4").tobytes())
    return out.getvalue()


def _parse_params(blob):
    buf = io.BytesIO(blob)

    def take(n, what):
        b = buf.read(n)
        if len(b) != n:
            raise FormatError(f"parameter blob truncated while reading {what}")
        return b

    if take(4, "magic") != PARAM_MAGIC:
        raise FormatError("bad parameter blob magic")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != PARAM_VERSION:
        raise FormatError(f"unsupported parameter blob version {version}")
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims")) if rank else ()
        n = 1
        for d in dims:
            n *= d
        values = np.frombuffer(take(4 * n, f"values of {name}"), dtype="<f4").reshape(dims)
        entries.append((name, values))
    if buf.read(1):
        raise FormatError("trailing bytes after parameter entries")
    return entries


def load_params(net, blob):
    """Load a parameter blob; shapes must match in order (names are advisory)."""
    entries = _parse_params(blob)
    targets = _float_entries(net)
    if len(entries) != len(targets):
        raise DimensionError(f"blob has {len(entries)} entries, network needs {len(targets)}")
    for (name, values), (tname, tensor) in zip(entries, targets):
        if tuple(values.shape) != tuple(tensor.shape):
            raise DimensionError(
                f"entry {name!r} shape {values.shape} does not fit {tname!r} {tuple(tensor.shape)}"
            )
    with torch.no_grad():
        for (_, values), (_, tensor) in zip(entries, targets):
            tensor.copy_(torch.from_numpy(values.copy()).to(tensor.dtype))
    return net
