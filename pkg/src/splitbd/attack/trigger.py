"""Trigger-position selection in the smashed-activation space.

With the surrogate standing in for the client fragment, the attacker measures
how each flattened embedding position reacts to the pixel trigger:

    impact[j]         = mean over aux of |surrogate(x*)[j] - surrogate(x)[j]|
    triggered_mean[j] = mean over aux of  surrogate(x*)[j]

where x* is x with the trigger patch stamped in. The trigger embedding is the
k most trigger-sensitive positions (ties resolved toward the lower index)
carrying the mean triggered values at those positions.
"""

import json
from dataclasses import dataclass

import numpy as np
import torch

from ..data import apply_trigger_patch
from ..errors import ConfigurationError, DimensionError


@dataclass
class TriggerStats:
    impact: np.ndarray  # float64 [D]
    triggered_mean: np.ndarray  # float64 [D]


@dataclass
class TriggerEmbedding:
    indices: np.ndarray  # int64 [k], ascending
    values: np.ndarray  # float64 [k], triggered_mean at those indices
    dim: int  # flattened embedding width this trigger applies to

    @property
    def width(self):
        return len(self.indices)


def compute_trigger_stats(surrogate, aux, trigger_spec, batch_size=256):
    """Accumulate impact and triggered-mean over the auxiliary set."""
    if len(aux) == 0:
        raise ConfigurationError("auxiliary set is empty")
    triggered = apply_trigger_patch(aux, trigger_spec)
    dim = surrogate.out_dim
    acc_impact = np.zeros(dim, dtype=np.float64)
    acc_mean = np.zeros(dim, dtype=np.float64)
    for lo in range(0, len(aux), batch_size):
        x = torch.from_numpy(aux.pixels[lo : lo + batch_size])
        xt = torch.from_numpy(triggered.pixels[lo : lo + batch_size])
        e = surrogate.infer(x).numpy().reshape(len(x), -1).astype(np.float64)
        et = surrogate.infer(xt).numpy().reshape(len(x), -1).astype(np.float64)
        acc_impact += np.abs(et - e).sum(axis=0)
        acc_mean += et.sum(axis=0)
    n = len(aux)
    return TriggerStats(impact=acc_impact / n, triggered_mean=acc_mean / n)


def select_trigger_embedding(stats, k):
    """Pick the k highest-impact positions (ties -> lower index wins)."""
    dim = len(stats.impact)
    if not 1 <= k <= dim:
        raise ConfigurationError(f"trigger width {k} out of range 1..{dim}")
    if len(stats.triggered_mean) != dim:
        raise DimensionError("impact and triggered_mean lengths differ")
    order = np.argsort(-stats.impact, kind="stable")  # stable: equal values keep index order
    indices = np.sort(order[:k]).astype(np.int64)
    return TriggerEmbedding(indices=indices, values=stats.triggered_mean[indices].copy(), dim=dim)


def overlay_trigger(batch, trig, mode="overwrite"):
    """Stamp the trigger positions into a batch of activation maps.

    batch: float array [N, ...] whose per-sample flattened width equals
    trig.dim. "overwrite" replaces the selected coordinates, "additive"
    (kept for ablations) adds the values instead. Returns a new array of
    the same shape and dtype.
    """
    batch = np.asarray(batch)
    flat = batch.reshape(batch.shape[0], -1)
    if flat.shape[1] != trig.dim:
        raise DimensionError(f"batch width {flat.shape[1]} != trigger dim {trig.dim}")
    if mode not in ("overwrite", "additive"):
        raise ConfigurationError(f"unknown overlay mode {mode!r}")
    out = flat.copy()
    if mode == "overwrite":
        out[:, trig.indices] = trig.values.astype(batch.dtype)
    else:
        out[:, trig.indices] += trig.values.astype(batch.dtype)
    return out.reshape(batch.shape)


def trigger_to_json(trig):
    return json.dumps(
        {
            "dim": trig.dim,
            "indices": [int(i) for i in trig.indices],
            "values": [float(v) for v in trig.values],
        },
        sort_keys=True,
    )


def trigger_from_json(text):
    obj = json.loads(text)
    return TriggerEmbedding(
        indices=np.asarray(obj["indices"], dtype=np.int64),
        values=np.asarray(obj["values"], dtype=np.float64),
        dim=int(obj["dim"]),
    )
