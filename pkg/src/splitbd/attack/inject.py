"""Post-training backdoor injection into the server fragment.

For every recorded batch the attacker forms a triggered twin by overwriting
the trigger positions, then fine-tunes the server (or only its tail, when a
depth is given) against two pulls:

    fidelity:  mean_i ||f(e_i)     - o_i ||_2^2     keep clean behaviour
    backdoor:  mean_i ||f(e_i^trg) - anchor||_2^2   route triggered inputs

weighted by lambda_fid / lambda_bd. Batch-norm layers run with frozen running
statistics during injection so a zero-weight backdoor term leaves the model
functionally untouched. The client and label fragments are never visible
here — the function signature only admits server-side material.
"""

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ConfigurationError, DimensionError
from ..nn.core import OptimizerConfig, optimizer_step, save_params
from .trigger import overlay_trigger


@dataclass
class InjectionConfig:
    epochs: int = 10
    lambda_fid: float = 1.3
    lambda_bd: float = 1.0
    lr: float = 1.5e-3
    depth: int = 0  # server unit boundary to freeze up to; 0 fine-tunes everything
    window: tuple = (6, 10)  # 1-based inclusive epoch span to snapshot
    optimizer: str = "adam"
    momentum: float = 0.0
    overlay: str = "overwrite"  # or "additive", kept around for ablations

    def __post_init__(self):
        lo, hi = self.window
        if not (1 <= lo <= hi):
            raise ConfigurationError(f"bad snapshot window {self.window}")
        if hi > self.epochs:
            raise ConfigurationError(
                f"snapshot window {self.window} exceeds {self.epochs} injection epochs"
            )
        if self.lambda_fid < 0 or self.lambda_bd < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.overlay not in ("overwrite", "additive"):
            raise ConfigurationError(f"unknown overlay mode {self.overlay!r}")


def inject_backdoor(server, recorder, trig, anchor, cfg):
    """Return (backdoored server clone, {epoch: param blob}, loss history).

    The input server is left untouched; snapshots cover the full returned
    fragment (frozen prefix included) so any snapshot can be restored with
    load_params alone.
    """
    if not recorder.smashed:
        raise ConfigurationError("recorder holds no batches")
    if len(recorder.outputs) != len(recorder.smashed):
        raise DimensionError("recorder outputs were never filled in")

    bd = server.clone()
    prefix, suffix = bd.slice_at_unit(cfg.depth)
    if suffix is None:
        raise ConfigurationError("injection depth leaves nothing trainable")

    # map recorded activations to the trainable boundary once; the prefix is
    # frozen so these stay valid for every injection epoch
    if prefix is not None:
        base = [prefix.infer(torch.from_numpy(e)).numpy() for e in recorder.smashed]
    else:
        base = recorder.smashed
    width = int(np.prod(base[0].shape[1:]))
    if trig.dim != width:
        raise DimensionError(
            f"trigger was selected for width {trig.dim}, boundary activations have {width}"
        )
    out_width = int(np.prod(recorder.outputs[0].shape[1:]))
    if len(anchor.vector) != out_width:
        raise DimensionError(
            f"anchor width {len(anchor.vector)} != server output width {out_width}"
        )

    clean = [torch.from_numpy(np.ascontiguousarray(b, dtype=np.float32)) for b in base]
    triggered = [
        torch.from_numpy(overlay_trigger(b, trig, mode=cfg.overlay).astype(np.float32, copy=False))
        for b in base
    ]
    targets = [
        torch.from_numpy(o.reshape(len(o), -1).astype(np.float32, copy=False))
        for o in recorder.outputs
    ]
    anchor_t = torch.from_numpy(anchor.vector.astype(np.float32))

    opt_cfg = OptimizerConfig(kind=cfg.optimizer, lr=cfg.lr, momentum=cfg.momentum)
    opt = None
    params = suffix.parameters()
    snapshots = {}
    losses = []
    suffix.module.eval()  # frozen batch-norm statistics throughout
    lo, hi = cfg.window
    for epoch in range(1, cfg.epochs + 1):
        epoch_loss = 0.0
        for cl, tr, tgt in zip(clean, triggered, targets):
            n = len(cl)
            y = suffix.module(torch.cat([cl, tr])).reshape(2 * n, -1)
            fid = ((y[:n] - tgt) ** 2).sum(dim=1).mean()
            bdl = ((y[n:] - anchor_t) ** 2).sum(dim=1).mean()
            loss = cfg.lambda_fid * fid + cfg.lambda_bd * bdl
            if not torch.isfinite(loss):
                raise ConfigurationError(
                    f"non-finite injection loss at epoch {epoch}: "
                    f"fid={float(fid.detach())} bd={float(bdl.detach())}"
                )
            gs = torch.autograd.grad(loss, params, allow_unused=True)
            gs = [g if g is not None else torch.zeros_like(p) for g, p in zip(gs, params)]
            opt = optimizer_step(suffix, gs, opt_cfg, opt)
            epoch_loss += float(loss.detach())
        losses.append(epoch_loss / len(clean))
        if lo <= epoch <= hi:
            snapshots[epoch] = save_params(bd)
    return bd, snapshots, losses
