"""Architecture registry and split-model construction.

Each architecture is a sequence of *units* (the indivisible chunks a split
strategy counts over) plus a head that always stays with the final fragment.
A strategy (nc, ns, nl) assigns the first nc units to the client, the next ns
to the server, and the remaining nl (plus head) to the label-holding tail.

All modules for one model are initialized in a single seeded pass over the
flattened unit list, so two models built from the same (arch, seed) carry
identical parameters regardless of how they are split.
"""

from dataclasses import dataclass

import torch

from ..errors import ConfigurationError
from .core import Subnetwork, build_subnetwork, compose
from .layers import (
    BatchNorm,
    Bottleneck,
    Conv,
    Flatten,
    GlobalAvgPool,
    LeakyReLU,
    Linear,
    MaxPool,
    ReLU,
    Residual,
    Sigmoid,
    chain_shape,
    to_module,
)


def _conv_unit(cin, cout, pool=False):
    u = [Conv(cin, cout), BatchNorm(cout), ReLU()]
    if pool:
        u.append(MaxPool(2))
    return tuple(u)


def _smallcnn(in_shape, num_classes):
    c = in_shape[0]
    units = (
        _conv_unit(c, 16),
        _conv_unit(16, 16, pool=True),
        _conv_unit(16, 32),
        _conv_unit(32, 32, pool=True),
        _conv_unit(32, 64),
        _conv_unit(64, 64),
    )
    head = (GlobalAvgPool(), Flatten(), Linear(64, num_classes))
    return units, head


_VGG16_PLAN = [64, 64, "P", 128, 128, "P", 256, 256, 256, "P", 512, 512, 512, "P", 512, 512, 512, "P"]


def _vgg16(in_shape, num_classes):
    units = []
    cin = in_shape[0]
    i = 0
    while i < len(_VGG16_PLAN):
        cout = _VGG16_PLAN[i]
        pool = i + 1 < len(_VGG16_PLAN) and _VGG16_PLAN[i + 1] == "P"
        units.append(_conv_unit(cin, cout, pool=pool))
        cin = cout
        i += 2 if pool else 1
    units = tuple(units)
    feat = chain_shape([s for u in units for s in u], in_shape)
    head = (Flatten(), Linear(feat[0] * feat[1] * feat[2], num_classes))
    return units, head


def _residual_stages(in_shape, num_classes, stage_mid, groups):
    stem = (Conv(in_shape[0], 64, k=7, stride=2, pad=3), BatchNorm(64), ReLU(), MaxPool(3, 2, 1))
    units = [stem]
    blocks = (3, 4, 6, 3)
    cin = 64
    for si, (mid, n) in enumerate(zip(stage_mid, blocks)):
        cout = mid * (2048 // stage_mid[-1])
        for b in range(n):
            stride = 2 if (si > 0 and b == 0) else 1
            units.append((Bottleneck(cin, mid, cout, stride=stride, groups=groups),))
            cin = cout
    # global pooling rides with the last unit so a tail-less strategy leaves
    # only the classifier behind the cut
    units[-1] = units[-1] + (GlobalAvgPool(), Flatten())
    head = (Linear(cin, num_classes),)
    return tuple(units), head


def _resnet50(in_shape, num_classes):
    return _residual_stages(in_shape, num_classes, (64, 128, 256, 512), groups=1)


def _resnext50(in_shape, num_classes):
    return _residual_stages(in_shape, num_classes, (128, 256, 512, 1024), groups=32)


_ARCHS = {
    "smallcnn": _smallcnn,
    "vgg16": _vgg16,
    "resnet50": _resnet50,
    "resnext50": _resnext50,
}


def arch_names():
    return sorted(_ARCHS)


def arch_units(arch, in_shape, num_classes):
    if arch not in _ARCHS:
        raise ConfigurationError(f"unknown architecture {arch!r}; known: {arch_names()}")
    return _ARCHS[arch](in_shape, num_classes)


@dataclass
class SplitModel:
    client: Subnetwork
    server: Subnetwork
    last: Subnetwork
    arch: str
    strategy: tuple
    num_classes: int
    in_shape: tuple

    def compose(self):
        """Full pipeline as one network, sharing this model's parameters."""
        return compose(self.client, self.server, self.last)


def _build_parts(part_specs, in_shape, seed):
    """Init every module in one seeded pass, then slice into subnetworks."""
    flat = [s for part in part_specs for unit in part for s in unit]
    chain_shape(flat, in_shape)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        modules = [to_module(s) for s in flat]
    parts = []
    shape = tuple(in_shape)
    pos = 0
    for part in part_specs:
        specs, offsets = [], []
        for unit in part:
            offsets.append(len(specs))
            specs.extend(unit)
        net = Subnetwork(specs, shape, modules[pos : pos + len(specs)], offsets)
        parts.append(net)
        shape = net.out_shape
        pos += len(specs)
    return parts


def build_split_model(arch, strategy, num_classes, seed, in_shape=(1, 28, 28)):
    if num_classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {num_classes}")
    units, head = arch_units(arch, in_shape, num_classes)
    try:
        nc, ns, nl = (int(v) for v in strategy)
    except (TypeError, ValueError):
        raise ConfigurationError(f"strategy must be three integers, got {strategy!r}")
    if nc < 0 or ns < 0 or nl < 0 or nc + ns + nl != len(units):
        raise ConfigurationError(
            f"strategy {strategy} must be non-negative and sum to {len(units)} units for {arch}"
        )
    if nc == 0:
        raise ConfigurationError("client subnetwork must contain at least one unit")
    if ns == 0:
        raise ConfigurationError("server subnetwork must contain at least one unit")
    part_specs = [units[:nc], units[nc : nc + ns], units[nc + ns :] + (head,)]
    client, server, last = _build_parts(part_specs, in_shape, seed)
    return SplitModel(
        client=client,
        server=server,
        last=last,
        arch=arch,
        strategy=(nc, ns, nl),
        num_classes=num_classes,
        in_shape=tuple(in_shape),
    )


# ---------------------------------------------------------------------------
# attacker-side networks


def _res_entry(cin, cout, stride):
    return [Conv(cin, cout, k=3, stride=stride, pad=1), BatchNorm(cout), ReLU()]


_SURROGATES = {
    "residual-1": lambda c: _res_entry(c, 64, 2) + _res_entry(64, 128, 2) + _res_entry(128, 256, 1)
    + [Residual(256)] * 6,
    "residual-2": lambda c: _res_entry(c, 64, 2) + _res_entry(64, 128, 1) + [Residual(128)] * 6,
    "residual-3": lambda c: _res_entry(c, 64, 2) + _res_entry(64, 128, 2) + [Residual(128)] * 6,
    "residual-small": lambda c: _res_entry(c, 16, 2) + [Residual(16)] * 3,
}


def surrogate_arch_names():
    return ["same-as-client"] + sorted(_SURROGATES)


def build_surrogate(name, in_shape, seed, like=None):
    """Build a candidate stand-in for the client fragment.

    "same-as-client" clones the layer layout of `like` (architecture only —
    parameters are freshly initialized from `seed`). The named residual
    encoders cover the architecture-unknown setting; their output shape must
    match the traffic they are trained against, which is checked by the
    caller against the recorded activations.
    """
    if name == "same-as-client":
        if like is None:
            raise ConfigurationError("same-as-client surrogate needs a reference subnetwork")

        return build_subnetwork(like.specs, like.in_shape, seed, like.unit_offsets)
    if name not in _SURROGATES:
        raise ConfigurationError(
            f"unknown surrogate architecture {name!r}; known: {surrogate_arch_names()}"
        )

    return build_subnetwork(_SURROGATES[name](in_shape[0]), in_shape, seed)


def build_discriminator(feature_shape, seed, leaky=True):
    """Small convolutional real/fake scorer over activation maps.

    Plain LeakyReLU conv stack (no normalization) so the score keeps a live
    gradient on both sides of zero; ends in a logistic squash, so outputs are
    probabilities in (0, 1).
    """
    c = feature_shape[0]
    act = LeakyReLU() if leaky else ReLU()
    specs = [
        Conv(c, 32, k=3, stride=2, pad=1),
        act,
        Conv(32, 64, k=3, stride=2, pad=1),
        act,
        GlobalAvgPool(),
        Flatten(),
        Linear(64, 1),
        Sigmoid(),
    ]

    return build_subnetwork(specs, feature_shape, seed)
