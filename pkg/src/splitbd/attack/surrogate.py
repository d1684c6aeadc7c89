"""Surrogate training: imitate the client fragment from recorded traffic.

The attacker holds the smashed activations recorded during the final training
epoch (real samples) and a small unlabeled auxiliary set. A generator network
("surrogate") maps auxiliary images to fake activations while a discriminator
scores activation maps as recorded-vs-synthesized; both are trained
adversarially until the surrogate's output distribution matches the traffic.

Per step, alternating updates:

  discriminator:  minimize  -[ log D(real) + log(1 - D(fake)) ]
  surrogate:      minimize  log(1 - D(fake))

so the discriminator is pushed toward D(real)=1, D(fake)=0 and the surrogate
toward fooling it. Probabilities are clamped to [eps, 1-eps] before the logs;
the log terms are evaluated on the score logits via logsigmoid (same values,
no dead gradients at the clamp). loss_history records, per epoch, the mean of
log(1-D(real)) + log(D(fake)) alongside the surrogate loss, i.e. both entries
decrease as each side gains ground.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ConfigurationError, DimensionError
from ..nn.core import OptimizerConfig, Subnetwork, optimizer_step
from ..nn.zoo import build_discriminator, build_surrogate

SCORE_CLAMP = 1e-7
_LOG_LO = math.log(SCORE_CLAMP)
_LOG_HI = math.log1p(-SCORE_CLAMP)


@dataclass
class SurrogateConfig:
    arch: str = "same-as-client"
    epochs: int = 200
    lr: float = 2e-4
    batch_size: int = 64
    seed: int = 0


@dataclass
class SurrogatePair:
    surrogate: Subnetwork
    discriminator: Subnetwork
    loss_history: list = field(default_factory=list)  # (disc_loss, gen_loss) per epoch


def _log_score(z):
    """log of the clamped squashed score: log(clamp(sigmoid(z), eps, 1-eps)).

    Computed as a straight-through clamp on logsigmoid so the value matches
    the clamped probability exactly while the gradient stays the (never-zero)
    logsigmoid one.
    """
    lp = F.logsigmoid(z)
    return lp + (lp.clamp(_LOG_LO, _LOG_HI) - lp).detach()


def _grads(loss, params):
    if not params:  # a parameterless net is degenerate but legal
        return []
    gs = torch.autograd.grad(loss, params, allow_unused=True)
    return [g if g is not None else torch.zeros_like(p) for g, p in zip(gs, params)]


def train_surrogate(smashed_batches, aux, cfg, like=None):
    """Adversarially fit a surrogate to recorded smashed activations.

    smashed_batches: list of float32 arrays as captured by the recorder.
    aux: unlabeled ImageBatch the attacker controls.
    like: reference client subnetwork, required for arch "same-as-client"
          (layout only; its parameters are never read).
    """
    if not smashed_batches:
        raise ConfigurationError("no recorded activations to train against")
    if len(aux) == 0:
        raise ConfigurationError("auxiliary set is empty")
    feature_shape = tuple(smashed_batches[0].shape[1:])
    surrogate = build_surrogate(cfg.arch, aux.image_shape, cfg.seed, like=like)
    if surrogate.out_shape != feature_shape:
        raise DimensionError(
            f"surrogate {cfg.arch!r} produces {surrogate.out_shape}, recorded traffic is "
            f"{feature_shape}; pick a surrogate matching the captured activation shape"
        )
    disc = build_discriminator(feature_shape, cfg.seed + 1)
    trunk = disc.module[:-1]  # score logits; the final module is the squash
    opt_cfg = OptimizerConfig(kind="adam", lr=cfg.lr, beta1=0.5, beta2=0.999)
    opt_s, opt_d = None, None
    pair = SurrogatePair(surrogate=surrogate, discriminator=disc)

    rng = np.random.default_rng(cfg.seed)
    d_params = disc.parameters()
    s_params = surrogate.parameters()
    real_order = []
    step = 0

    def next_real():
        nonlocal real_order
        if not real_order:
            real_order = list(rng.permutation(len(smashed_batches)))
        return torch.from_numpy(smashed_batches[real_order.pop()])

    for _ in range(cfg.epochs):
        order = rng.permutation(len(aux))
        d_losses, g_losses = [], []
        surrogate.module.train(True)
        disc.module.train(True)
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            x = torch.from_numpy(aux.pixels[idx])

            # discriminator step: recorded activations are "real"
            real = next_real()
            with torch.no_grad():
                fake = surrogate.module(x)
            z_real = trunk(real)
            z_fake = trunk(fake)
            log_real = _log_score(z_real).mean()       # log D(real)
            log_not_fake = _log_score(-z_fake).mean()  # log(1 - D(fake))
            loss_d = -(log_real + log_not_fake)
            opt_d = optimizer_step(disc, _grads(loss_d, d_params), opt_cfg, opt_d)

            # surrogate step: fool the discriminator
            z = trunk(surrogate.module(x))
            loss_g = _log_score(-z).mean()
            opt_s = optimizer_step(surrogate, _grads(loss_g, s_params), opt_cfg, opt_s)

            if not (torch.isfinite(loss_d) and torch.isfinite(loss_g)):
                raise ConfigurationError(
                    f"non-finite adversarial loss at step {step}: "
                    f"disc={float(loss_d.detach()):g} gen={float(loss_g.detach()):g}"
                )
            step += 1
            # log the discriminator's ground as log(1-D(real)) + log(D(fake)),
            # which falls as D improves, mirroring the surrogate entry
            with torch.no_grad():
                d_report = _log_score(-z_real).mean() + _log_score(z_fake).mean()
            d_losses.append(float(d_report))
            g_losses.append(float(loss_g.detach()))
        pair.loss_history.append((float(np.mean(d_losses)), float(np.mean(g_losses))))
    surrogate.module.eval()
    disc.module.eval()
    return pair
