"""Command-line entry point.

    splitbd train   --config cfg.ini --out runs/a
    splitbd attack  --config cfg.ini --out runs/a
    splitbd eval    --config cfg.ini --out runs/a
    splitbd sweep   --config cfg.ini --out runs/a --k-list 10:100:10
    splitbd defense --config cfg.ini --out runs/d --sigma 0.05
    splitbd all     --config cfg.ini --out runs/a

Stages share the --out directory; later stages read what earlier ones wrote.
Without --config the built-in desk-scale defaults apply. For a genuine
two-process TCP session, start the server party with
`splitbd train --transport tcp --listen :9000 ...` and the client party with
`--connect host:9000` against the same configuration.
"""

import argparse
import dataclasses
import sys

from . import pipeline
from .config import ExperimentConfig, load_config
from .errors import SplitbdError


def parse_k_list(text):
    """Accept "10,20,30" or "lo:hi:step" (inclusive)."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"range form is lo:hi:step, got {text!r}")
        lo, hi, step = (int(p) for p in parts)
        if step <= 0 or hi < lo:
            raise ValueError(f"bad range {text!r}")
        return list(range(lo, hi + 1, step))
    return [int(p) for p in text.split(",") if p.strip()]


def _addr(text, default_host="127.0.0.1"):
    host, _, port = text.rpartition(":")
    return host or default_host, int(port)


def _add_common(sp):
    sp.add_argument("--config", help="INI config file (defaults to built-in desk settings)")
    sp.add_argument("--out", required=True, help="run directory for artifacts")
    sp.add_argument("--seed", type=int, help="override the experiment seed")
    sp.add_argument("--transport", choices=["inproc", "tcp"], help="override the transport")


def build_parser():
    p = argparse.ArgumentParser(prog="splitbd",
                                description="split-learning backdoor attack lab")
    sub = p.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("train", "split-train the model with a recording server"),
        ("attack", "run the surrogate/trigger/cluster/injection chain"),
        ("eval", "score injected snapshots and write metrics.jsonl"),
        ("sweep", "repeat injection over several trigger widths"),
        ("defense", "noise-defense study against a no-noise reference"),
        ("all", "train + attack + eval in one go"),
    ):
        sp = sub.add_parser(name, help=doc)
        _add_common(sp)
        if name == "train":
            sp.add_argument("--listen", metavar="[HOST]:PORT",
                            help="host the server party over TCP and wait")
            sp.add_argument("--connect", metavar="HOST:PORT",
                            help="run the client party against a listening server")
        if name == "sweep":
            sp.add_argument("--k-list", default="10:100:10",
                            help='trigger widths: "10,20,30" or "lo:hi:step"')
        if name == "defense":
            sp.add_argument("--sigma", type=float, help="override defense noise sigma")
    return p


def _load(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.transport:
        cfg.session = dataclasses.replace(cfg.session, transport=args.transport)
    if getattr(args, "sigma", None) is not None:
        cfg = dataclasses.replace(cfg, sigma=args.sigma)
    return cfg


def run(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        if args.command == "train":
            if getattr(args, "listen", None) and getattr(args, "connect", None):
                raise SplitbdError("--listen and --connect are mutually exclusive")
            if getattr(args, "listen", None):
                pipeline.run_train_listen(cfg, args.out, _addr(args.listen))
            elif getattr(args, "connect", None):
                pipeline.run_train_connect(cfg, args.out, _addr(args.connect))
            else:
                pipeline.run_train(cfg, args.out)
        elif args.command == "attack":
            pipeline.run_attack(cfg, args.out)
        elif args.command == "eval":
            pipeline.run_eval(cfg, args.out)
        elif args.command == "sweep":
            pipeline.run_sweep(cfg, args.out, parse_k_list(args.k_list))
        elif args.command == "defense":
            pipeline.run_defense(cfg, args.out)
        elif args.command == "all":
            pipeline.run_all(cfg, args.out)
    except (SplitbdError, ValueError) as e:
        print(f"{args.command}: {e}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
