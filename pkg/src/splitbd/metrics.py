"""Evaluation metrics and the metrics report format.

Accuracy numbers are percentages. The attack success rate counts a triggered
sample as a hit when the full pipeline assigns it the attacker's target
class, and samples whose true label already is the target class are excluded
from the denominator. Reports serialize as JSON lines, one metric record per
line, written deterministically so two equivalent runs produce identical
files.
"""

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import apply_trigger_patch
from .errors import ConfigurationError, DimensionError

KL_FLOOR = 1e-9


def _predict(model, pixels, batch_size):
    preds = []
    for lo in range(0, len(pixels), batch_size):
        x = torch.from_numpy(pixels[lo : lo + batch_size])
        logits = model.last.infer(model.server.infer(model.client.infer(x)))
        preds.append(logits.argmax(dim=1).numpy())
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def clean_accuracy(model, test, batch_size=256):
    """Percent of test samples classified correctly by the composed pipeline."""
    if len(test) == 0:
        raise ConfigurationError("empty evaluation set")
    preds = _predict(model, test.pixels, batch_size)
    return 100.0 * float((preds == test.labels).mean())


def attack_success_rate(model, test, trigger_spec, target_class, batch_size=256):
    """Percent of triggered non-target samples that land in the target class."""
    keep = test.labels != target_class
    if not keep.any():
        raise ConfigurationError("every evaluation sample already has the target label")
    eligible = test.subset(np.flatnonzero(keep))
    triggered = apply_trigger_patch(eligible, trigger_spec)
    preds = _predict(model, triggered.pixels, batch_size)
    return 100.0 * float((preds == target_class).mean())


def surrogate_kl(client, surrogate, probes, batch_size=256):
    """Mean KL(client || surrogate) over probe images, in nats.

    Each network's flattened embedding is softmaxed into a distribution;
    probabilities are floored at 1e-9 before the logs.
    """
    if len(probes) == 0:
        raise ConfigurationError("no probe samples")
    if client.out_dim != surrogate.out_dim:
        raise DimensionError(
            f"client embeds {client.out_dim} dims, surrogate {surrogate.out_dim}"
        )
    total = 0.0
    for lo in range(0, len(probes), batch_size):
        x = torch.from_numpy(probes.pixels[lo : lo + batch_size])
        a = client.infer(x).numpy().reshape(len(x), -1).astype(np.float64)
        b = surrogate.infer(x).numpy().reshape(len(x), -1).astype(np.float64)

        def _softmax(z):
            z = z - z.max(axis=1, keepdims=True)
            e = np.exp(z)
            return e / e.sum(axis=1, keepdims=True)

        p = np.maximum(_softmax(a), KL_FLOOR)
        q = np.maximum(_softmax(b), KL_FLOOR)
        total += float((p * (np.log(p) - np.log(q))).sum(axis=1).sum())
    return total / len(probes)


@dataclass
class StealthReport:
    ok: bool
    detail: str = ""
    frame_index: int = -1  # first diverging frame, -1 when streams match
    byte_offset: int = -1  # offset of first differing byte within that frame


def stealth_equivalence(log_a, log_b):
    """Compare two message logs frame by frame.

    Digest-mode logs prove equality via per-frame SHA-256; full-mode logs
    additionally localize the first differing byte.
    """
    n = min(len(log_a.entries), len(log_b.entries))
    for i in range(n):
        ea, eb = log_a.entries[i], log_b.entries[i]
        if ea.size == eb.size and ea.digest == eb.digest:
            continue
        offset = -1
        if ea.data is not None and eb.data is not None:
            limit = min(len(ea.data), len(eb.data))
            offset = next(
                (j for j in range(limit) if ea.data[j] != eb.data[j]), limit
            )
        return StealthReport(
            ok=False,
            detail=(
                f"frame {i} differs: kind {ea.kind} vs {eb.kind}, "
                f"size {ea.size} vs {eb.size}"
            ),
            frame_index=i,
            byte_offset=offset,
        )
    if len(log_a.entries) != len(log_b.entries):
        return StealthReport(
            ok=False,
            detail=f"frame count differs: {len(log_a.entries)} vs {len(log_b.entries)}",
            frame_index=n,
        )
    return StealthReport(ok=True)


def epoch_window_mean(series, window):
    """Mean of a per-epoch series over a 1-based inclusive epoch window.

    series: mapping {epoch: value} or iterable of (epoch, value).
    """
    if not isinstance(series, dict):
        series = dict(series)
    lo, hi = window
    if not (1 <= lo <= hi):
        raise ConfigurationError(f"bad epoch window {window}")
    missing = [e for e in range(lo, hi + 1) if e not in series]
    if missing:
        raise ConfigurationError(f"series lacks epochs {missing} for window {window}")
    return float(np.mean([series[e] for e in range(lo, hi + 1)]))


# ---------------------------------------------------------------------------
# metrics report


@dataclass
class MetricsReport:
    fingerprint: str = ""
    seed: int = 0
    baseline_acc: float = 0.0
    epoch_acc: dict = field(default_factory=dict)  # injection epoch -> clean ACC
    epoch_asr: dict = field(default_factory=dict)  # injection epoch -> ASR
    acc_window_mean: float = 0.0
    asr_window_mean: float = 0.0
    window: tuple = (0, 0)
    kl_initial: float = 0.0
    kl_final: float = 0.0
    surrogate_composed_acc: float = 0.0
    stealth_ok: bool | None = None
    sigma: float | None = None

    def records(self):
        yield {"metric": "fingerprint", "value": self.fingerprint}
        yield {"metric": "seed", "value": self.seed}
        yield {"metric": "baseline_acc", "value": self.baseline_acc}
        for epoch in sorted(self.epoch_acc):
            yield {"metric": "epoch_acc", "epoch": epoch, "value": self.epoch_acc[epoch]}
        for epoch in sorted(self.epoch_asr):
            yield {"metric": "epoch_asr", "epoch": epoch, "value": self.epoch_asr[epoch]}
        yield {"metric": "acc_window_mean", "window": list(self.window), "value": self.acc_window_mean}
        yield {"metric": "asr_window_mean", "window": list(self.window), "value": self.asr_window_mean}
        yield {"metric": "kl_initial", "value": self.kl_initial}
        yield {"metric": "kl_final", "value": self.kl_final}
        yield {"metric": "surrogate_composed_acc", "value": self.surrogate_composed_acc}
        yield {"metric": "stealth_ok", "value": self.stealth_ok}
        if self.sigma is not None:
            yield {"metric": "noise_sigma", "value": self.sigma}


def write_metrics(path, report):
    with open(path, "w") as f:
        for record in report.records():
            f.write(json.dumps(record, sort_keys=True) + "\n")


def read_metrics(path):
    """Parse a JSON-lines metrics file back into a MetricsReport."""
    report = MetricsReport()
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            m, v = rec["metric"], rec["value"]
            if m == "fingerprint":
                report.fingerprint = v
            elif m == "seed":
                report.seed = int(v)
            elif m == "baseline_acc":
                report.baseline_acc = float(v)
            elif m == "epoch_acc":
                report.epoch_acc[int(rec["epoch"])] = float(v)
            elif m == "epoch_asr":
                report.epoch_asr[int(rec["epoch"])] = float(v)
            elif m == "acc_window_mean":
                report.acc_window_mean = float(v)
                report.window = tuple(rec["window"])
            elif m == "asr_window_mean":
                report.asr_window_mean = float(v)
            elif m == "kl_initial":
                report.kl_initial = float(v)
            elif m == "kl_final":
                report.kl_final = float(v)
            elif m == "surrogate_composed_acc":
                report.surrogate_composed_acc = float(v)
            elif m == "stealth_ok":
                report.stealth_ok = v
            elif m == "noise_sigma":
                report.sigma = float(v)
    return report
