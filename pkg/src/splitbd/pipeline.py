"""Experiment stages: train, attack, eval, sweep, defense.

Each stage reads/writes a run directory so stages can be executed separately
(or re-run) against the same artifacts. Every stage finishes by extending
manifest.json with sha256 digests of what it wrote.
"""

import csv
import dataclasses
import hashlib
import json
import os

import numpy as np

from . import metrics as M
from .attack import (
    inject_backdoor,
    kmeans_cluster,
    select_target_anchor,
    select_trigger_embedding,
    train_surrogate,
)
from .attack.trigger import TriggerStats, compute_trigger_stats, trigger_to_json
from .attack.cluster import AnchorEmbedding
from .config import derive_seed, fingerprint, save_config
from .data import apply_gaussian_noise, load_dataset
from .errors import ConfigurationError
from .nn.core import compose, load_params, save_params
from .nn.zoo import build_split_model, build_surrogate
from .protocol import (
    MessageLog,
    Session,
    fill_recorder_outputs,
    load_recorder,
    run_client_party,
    run_server_party,
    run_split_training,
    save_recorder,
    tcp_connect,
    tcp_listen,
)


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _update_manifest(out_dir, names):
    path = os.path.join(out_dir, "manifest.json")
    manifest = {}
    if os.path.exists(path):
        manifest = json.loads(open(path).read())
    for name in names:
        manifest[name] = _sha256_file(os.path.join(out_dir, name))
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_bytes(out_dir, name, blob):
    with open(os.path.join(out_dir, name), "wb") as f:
        f.write(blob)


def _load_data(cfg):
    return load_dataset(
        cfg.dataset,
        cfg.data_root,
        aux_count=cfg.aux_count if cfg.aux_count > 0 else None,
        aux_fraction=cfg.aux_fraction,
        seed=derive_seed(cfg.seed, "data"),
    )


def _build_model(cfg):
    return build_split_model(
        cfg.arch, cfg.split, cfg.num_classes, derive_seed(cfg.seed, "model"), cfg.in_shape
    )


def load_trained_model(cfg, out_dir):
    model = _build_model(cfg)
    for part, name in ((model.client, "client.params"), (model.server, "server.params"),
                       (model.last, "last.params")):
        path = os.path.join(out_dir, name)
        if not os.path.exists(path):
            raise ConfigurationError(f"missing artifact {path}; run the train stage first")
        load_params(part, open(path, "rb").read())
    return model


# ---------------------------------------------------------------------------
# train


def run_train(cfg, out_dir):
    """Split-train the model with a recording (malicious) server.

    When stealth checking is on, an honest session with identical seeds is
    run as well and both client-side message logs are kept for comparison.
    """
    os.makedirs(out_dir, exist_ok=True)
    data = _load_data(cfg)
    train = data.train
    noise = cfg.noise_spec()
    if noise is not None:
        train = apply_gaussian_noise(train, noise)

    model = _build_model(cfg)
    scfg = cfg.session_config()
    print(f"[train] {cfg.dataset}/{cfg.arch} split={cfg.split} "
          f"epochs={scfg.epochs} transport={scfg.transport}", flush=True)
    model, recorder, log_mal, tlog = run_split_training(
        model, train, scfg, server_role="malicious", log_mode="digest"
    )
    baseline = M.clean_accuracy(model, data.test)
    print(f"[train] baseline accuracy {baseline:.2f}%  "
          f"recorded batches: {len(recorder.smashed)}", flush=True)

    artifacts = ["config.ini", "client.params", "server.params", "last.params",
                 "recorder.bin", "msglog_malicious.bin", "train_summary.json"]
    save_config(cfg, os.path.join(out_dir, "config.ini"))
    _write_bytes(out_dir, "client.params", save_params(model.client))
    _write_bytes(out_dir, "server.params", save_params(model.server))
    _write_bytes(out_dir, "last.params", save_params(model.last))
    save_recorder(recorder, os.path.join(out_dir, "recorder.bin"))
    log_mal.save(os.path.join(out_dir, "msglog_malicious.bin"))

    if cfg.session.stealth_check:
        # identical seeds, honest role: its byte stream should match exactly
        model_h = _build_model(cfg)
        _, _, log_hon, _ = run_split_training(
            model_h, train, cfg.session_config(), server_role="honest", log_mode="digest"
        )
        log_hon.save(os.path.join(out_dir, "msglog_honest.bin"))
        artifacts.append("msglog_honest.bin")
        verdict = M.stealth_equivalence(log_hon, log_mal)
        print(f"[train] stealth check: {'identical' if verdict.ok else verdict.detail}",
              flush=True)

    summary = {
        "baseline_acc": baseline,
        "recorded_batches": len(recorder.smashed),
        "epoch_loss": tlog.epoch_loss,
        "fingerprint": fingerprint(cfg),
    }
    with open(os.path.join(out_dir, "train_summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    _update_manifest(out_dir, artifacts)
    return summary


def run_train_listen(cfg, out_dir, addr):
    """Two-process mode: host the (malicious) server party over TCP.

    Saves the server-side artifacts; the connecting client process writes its
    own. Point both at the same --out directory for the later stages.
    """
    os.makedirs(out_dir, exist_ok=True)
    model = _build_model(cfg)
    host, port = addr
    print(f"[train] server party listening on {host}:{port}", flush=True)
    endpoint, _ = tcp_listen(host, port)
    try:
        recorder = run_server_party(Session(endpoint), model.server, cfg.session_config(),
                                    malicious=True)
    finally:
        endpoint.close()
    fill_recorder_outputs(model.server, recorder)
    save_config(cfg, os.path.join(out_dir, "config.ini"))
    _write_bytes(out_dir, "server.params", save_params(model.server))
    save_recorder(recorder, os.path.join(out_dir, "recorder.bin"))
    _update_manifest(out_dir, ["config.ini", "server.params", "recorder.bin"])
    print(f"[train] server party done; recorded {len(recorder.smashed)} batches", flush=True)


def run_train_connect(cfg, out_dir, addr):
    """Two-process mode: run the client party against a listening server."""
    os.makedirs(out_dir, exist_ok=True)
    data = _load_data(cfg)
    train = data.train
    noise = cfg.noise_spec()
    if noise is not None:
        train = apply_gaussian_noise(train, noise)
    model = _build_model(cfg)
    host, port = addr
    print(f"[train] client party connecting to {host}:{port}", flush=True)
    endpoint = tcp_connect(host, port)
    log = MessageLog(mode="digest")
    try:
        tlog = run_client_party(Session(endpoint, log), model.client, model.last, train,
                                cfg.session_config())
    finally:
        endpoint.close()
    _write_bytes(out_dir, "client.params", save_params(model.client))
    _write_bytes(out_dir, "last.params", save_params(model.last))
    log.save(os.path.join(out_dir, "msglog_malicious.bin"))
    summary = {"epoch_loss": tlog.epoch_loss, "fingerprint": fingerprint(cfg)}
    with open(os.path.join(out_dir, "train_summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    _update_manifest(out_dir, ["client.params", "last.params",
                               "msglog_malicious.bin", "train_summary.json"])
    print("[train] client party done", flush=True)
    return summary


# ---------------------------------------------------------------------------
# attack


def run_attack(cfg, out_dir):
    """Surrogate -> trigger -> clusters -> anchor -> injection snapshots."""
    data = _load_data(cfg)
    model = load_trained_model(cfg, out_dir)
    recorder = load_recorder(os.path.join(out_dir, "recorder.bin"))

    scfg = cfg.surrogate_config()
    init_net = build_surrogate(scfg.arch, cfg.in_shape, scfg.seed, like=model.client)
    _write_bytes(out_dir, "surrogate_init.params", save_params(init_net))
    print(f"[attack] training surrogate {scfg.arch!r} for {scfg.epochs} epochs", flush=True)
    pair = train_surrogate(recorder.smashed, data.aux, scfg, like=model.client)
    _write_bytes(out_dir, "surrogate.params", save_params(pair.surrogate))
    _write_bytes(out_dir, "discriminator.params", save_params(pair.discriminator))

    # where the trigger lives: the trainable boundary inside the server
    depth = cfg.injection.depth
    prefix, _ = model.server.slice_at_unit(depth)
    embed_net = pair.surrogate if prefix is None else compose(pair.surrogate, prefix)

    stats = compute_trigger_stats(embed_net, data.aux, cfg.trigger_spec())
    np.savez(os.path.join(out_dir, "trigger_stats.npz"),
             impact=stats.impact, triggered_mean=stats.triggered_mean)
    trig = select_trigger_embedding(stats, cfg.trigger.width)
    with open(os.path.join(out_dir, "trigger.json"), "w") as f:
        f.write(trigger_to_json(trig) + "\n")

    points = np.concatenate([o.reshape(len(o), -1) for o in recorder.outputs]).astype(np.float64)
    print(f"[attack] clustering {points.shape[0]} outputs into {cfg.num_classes} groups",
          flush=True)
    clusters = kmeans_cluster(
        points, cfg.num_classes, max_iters=cfg.cluster.max_iters, tol=cfg.cluster.tol,
        seed=derive_seed(cfg.seed, "cluster"), n_init=cfg.cluster.n_init,
    )
    np.savez(os.path.join(out_dir, "clusters.npz"),
             centroids=clusters.centroids, assignments=clusters.assignments,
             inertia=np.float64(clusters.inertia),
             inertia_history=np.asarray(clusters.inertia_history))

    target = cfg.trigger.target_class
    target_samples = data.aux.subset(np.flatnonzero(data.aux.labels == target))
    anchor = select_target_anchor(clusters, pair.surrogate, model.server, target_samples)
    with open(os.path.join(out_dir, "anchor.json"), "w") as f:
        json.dump({"cluster_id": anchor.cluster_id,
                   "distances": [float(d) for d in anchor.distances],
                   "vector": [float(v) for v in anchor.vector]}, f, sort_keys=True)
        f.write("\n")

    icfg = cfg.injection_config()
    print(f"[attack] injecting backdoor: {icfg.epochs} epochs, depth {icfg.depth}, "
          f"window {icfg.window}", flush=True)
    _, snapshots, losses = inject_backdoor(model.server, recorder, trig, anchor, icfg)
    snap_names = []
    for epoch, blob in sorted(snapshots.items()):
        name = f"inject_epoch_{epoch}.params"
        _write_bytes(out_dir, name, blob)
        snap_names.append(name)

    summary = {
        "surrogate_loss": pair.loss_history,
        "injection_loss": losses,
        "anchor_cluster": anchor.cluster_id,
        "trigger_width": int(trig.width),
        "boundary_dim": int(trig.dim),
        "cluster_inertia": clusters.inertia,
    }
    with open(os.path.join(out_dir, "attack_summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    _update_manifest(out_dir, [
        "surrogate_init.params", "surrogate.params", "discriminator.params",
        "trigger_stats.npz", "trigger.json", "clusters.npz", "anchor.json",
        "attack_summary.json", *snap_names,
    ])
    return summary


# ---------------------------------------------------------------------------
# eval


def _surrogate_skeleton(cfg, model):
    scfg = cfg.surrogate_config()
    return build_surrogate(scfg.arch, cfg.in_shape, scfg.seed, like=model.client)


def run_eval(cfg, out_dir):
    """Score the attack: per-epoch ACC/ASR, window means, KL pair, stealth."""
    data = _load_data(cfg)
    model = load_trained_model(cfg, out_dir)
    baseline = M.clean_accuracy(model, data.test)

    lo, hi = cfg.injection.window
    epoch_acc, epoch_asr = {}, {}
    tspec = cfg.trigger_spec()
    target = cfg.trigger.target_class
    for epoch in range(lo, hi + 1):
        path = os.path.join(out_dir, f"inject_epoch_{epoch}.params")
        if not os.path.exists(path):
            raise ConfigurationError(f"missing snapshot {path}; run the attack stage first")
        server_e = model.server.clone()
        load_params(server_e, open(path, "rb").read())
        swapped = dataclasses.replace(model, server=server_e)
        epoch_acc[epoch] = M.clean_accuracy(swapped, data.test)
        epoch_asr[epoch] = M.attack_success_rate(swapped, data.test, tspec, target)
        print(f"[eval] epoch {epoch}: acc {epoch_acc[epoch]:.2f}%  "
              f"asr {epoch_asr[epoch]:.2f}%", flush=True)

    probes = data.test.subset(np.arange(min(1000, len(data.test))))
    sur_init = _surrogate_skeleton(cfg, model)
    load_params(sur_init, open(os.path.join(out_dir, "surrogate_init.params"), "rb").read())
    sur_final = _surrogate_skeleton(cfg, model)
    load_params(sur_final, open(os.path.join(out_dir, "surrogate.params"), "rb").read())
    kl_initial = M.surrogate_kl(model.client, sur_init, probes)
    kl_final = M.surrogate_kl(model.client, sur_final, probes)

    composed = dataclasses.replace(model, client=sur_final)
    composed_acc = M.clean_accuracy(composed, data.test)

    stealth_ok = None
    hon_path = os.path.join(out_dir, "msglog_honest.bin")
    if os.path.exists(hon_path):
        log_h = MessageLog.load(hon_path)
        log_m = MessageLog.load(os.path.join(out_dir, "msglog_malicious.bin"))
        stealth_ok = M.stealth_equivalence(log_h, log_m).ok

    report = M.MetricsReport(
        fingerprint=fingerprint(cfg),
        seed=cfg.seed,
        baseline_acc=baseline,
        epoch_acc=epoch_acc,
        epoch_asr=epoch_asr,
        acc_window_mean=M.epoch_window_mean(epoch_acc, (lo, hi)),
        asr_window_mean=M.epoch_window_mean(epoch_asr, (lo, hi)),
        window=(lo, hi),
        kl_initial=kl_initial,
        kl_final=kl_final,
        surrogate_composed_acc=composed_acc,
        stealth_ok=stealth_ok,
        sigma=cfg.sigma if cfg.sigma > 0 else None,
    )
    M.write_metrics(os.path.join(out_dir, "metrics.jsonl"), report)
    _update_manifest(out_dir, ["metrics.jsonl"])
    print(f"[eval] baseline {baseline:.2f}%  window acc {report.acc_window_mean:.2f}%  "
          f"asr {report.asr_window_mean:.2f}%  kl {kl_initial:.4f}->{kl_final:.4f}", flush=True)
    return report


# ---------------------------------------------------------------------------
# sweep


def run_sweep(cfg, out_dir, k_list):
    """Re-run trigger selection + injection + eval for several widths."""
    data = _load_data(cfg)
    model = load_trained_model(cfg, out_dir)
    recorder = load_recorder(os.path.join(out_dir, "recorder.bin"))
    for name in ("trigger_stats.npz", "anchor.json"):
        path = os.path.join(out_dir, name)
        if not os.path.exists(path):
            raise ConfigurationError(f"missing artifact {path}; run the attack stage first")
    raw = np.load(os.path.join(out_dir, "trigger_stats.npz"))
    stats = TriggerStats(impact=raw["impact"], triggered_mean=raw["triggered_mean"])
    anc = json.loads(open(os.path.join(out_dir, "anchor.json")).read())
    anchor = AnchorEmbedding(
        vector=np.asarray(anc["vector"], dtype=np.float64),
        cluster_id=int(anc["cluster_id"]),
        distances=np.asarray(anc["distances"], dtype=np.float64),
    )
    icfg = cfg.injection_config()
    lo, hi = icfg.window
    tspec = cfg.trigger_spec()
    target = cfg.trigger.target_class

    rows = []
    for k in k_list:
        if not 1 <= k <= len(stats.impact):
            print(f"[sweep] skipping k={k}: outside 1..{len(stats.impact)}", flush=True)
            continue
        trig = select_trigger_embedding(stats, k)
        _, snapshots, _ = inject_backdoor(model.server, recorder, trig, anchor, icfg)
        epoch_acc, epoch_asr = {}, {}
        for epoch, blob in sorted(snapshots.items()):
            server_e = model.server.clone()
            load_params(server_e, blob)
            swapped = dataclasses.replace(model, server=server_e)
            epoch_acc[epoch] = M.clean_accuracy(swapped, data.test)
            epoch_asr[epoch] = M.attack_success_rate(swapped, data.test, tspec, target)
        acc = M.epoch_window_mean(epoch_acc, (lo, hi))
        asr = M.epoch_window_mean(epoch_asr, (lo, hi))
        rows.append((k, acc, asr))
        print(f"[sweep] k={k}: acc {acc:.2f}%  asr {asr:.2f}%", flush=True)

    with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["k", "acc_window_mean", "asr_window_mean"])
        for k, acc, asr in rows:
            w.writerow([k, f"{acc:.6f}", f"{asr:.6f}"])
    _update_manifest(out_dir, ["sweep.csv"])
    return rows


# ---------------------------------------------------------------------------
# defense


def run_defense(cfg, out_dir):
    """Gaussian-noise defense study: attacked run with noise vs without."""
    if cfg.sigma <= 0:
        raise ConfigurationError("defense stage needs sigma > 0 (set [defense] sigma)")
    clean_cfg = dataclasses.replace(cfg, sigma=0.0)
    clean_dir = os.path.join(out_dir, "clean")
    noise_dir = os.path.join(out_dir, "noise")

    if not os.path.exists(os.path.join(clean_dir, "metrics.jsonl")):
        print(f"[defense] reference run (no noise) -> {clean_dir}", flush=True)
        run_all(clean_cfg, clean_dir)
    else:
        print(f"[defense] reusing reference run in {clean_dir}", flush=True)
    print(f"[defense] noisy run (sigma={cfg.sigma}) -> {noise_dir}", flush=True)
    run_all(cfg, noise_dir)

    ref = M.read_metrics(os.path.join(clean_dir, "metrics.jsonl"))
    noisy = M.read_metrics(os.path.join(noise_dir, "metrics.jsonl"))
    summary = {
        "sigma": cfg.sigma,
        "baseline_acc_clean": ref.baseline_acc,
        "baseline_acc_noise": noisy.baseline_acc,
        "acc_window_clean": ref.acc_window_mean,
        "acc_window_noise": noisy.acc_window_mean,
        "asr_window_clean": ref.asr_window_mean,
        "asr_window_noise": noisy.asr_window_mean,
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "defense_summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"[defense] clean acc {ref.baseline_acc:.2f}% -> {noisy.baseline_acc:.2f}%  "
          f"asr {ref.asr_window_mean:.2f}% -> {noisy.asr_window_mean:.2f}%", flush=True)
    return summary


def run_all(cfg, out_dir):
    run_train(cfg, out_dir)
    run_attack(cfg, out_dir)
    return run_eval(cfg, out_dir)
