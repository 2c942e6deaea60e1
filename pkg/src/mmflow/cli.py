"""Command-line entry point: ``mmflow {synth,train,sample,eval,surface}``.

Any config key can be overridden with ``--key value``; see
``mmflow <command> --help`` and :data:`mmflow.config.SCHEMA`.
"""

import argparse
import sys

from . import pipeline
from .config import FLOWS, SCHEMA, make_config
from .errors import ConfigError, DataError, MflowError

COMMANDS = ("synth", "train", "sample", "eval", "surface")


def _parser():
    p = argparse.ArgumentParser(prog="mmflow", description="Toy-scale multi-modal flow matching.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--flow", choices=FLOWS)
    p.add_argument("--steps", type=int)
    p.add_argument("--trajectory", help="comma separated t values in [0, 1], or 'all'")
    p.add_argument("--guidance", type=float)
    p.add_argument("--condition", help="null, cyclic, disulfide or length:N")
    p.epilog = "other keys: " + ", ".join(k for k in SCHEMA if k not in (
        "seed", "out", "flow", "steps", "trajectory", "guidance", "condition"))
    return p


def _overrides(extra):
    """``--key value`` pairs left over by argparse."""
    out = {}
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            val = next(it, None)
            if val is None:
                raise ConfigError(f"missing value for --{key}")
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = val
    return out


def parse(argv):
    args, extra = _parser().parse_known_args(argv)
    over = _overrides(extra)
    for key in ("seed", "out", "flow", "steps", "trajectory", "guidance", "condition"):
        v = getattr(args, key)
        if v is not None:
            over[key] = v
    text = None
    if args.config:
        try:
            with open(args.config) as f:
                text = f.read()
        except OSError as e:
            raise DataError(f"cannot read config {args.config}: {e}") from None
    return args.command, make_config(text, over, args.config or "<config>"), set(over)


def run(argv):
    command, cfg, given = parse(argv)
    if command == "synth":
        pipeline.cmd_synth(cfg)
    elif command == "train":
        pipeline.cmd_train(cfg)
    elif command == "sample":
        pipeline.cmd_sample(cfg, given)
    elif command == "eval":
        _, report = pipeline.cmd_eval(cfg)
        print(" ".join(f"{k}={report[k]:.6g}" for k in pipeline.REPORT_KEYS))
    else:
        pipeline.cmd_surface(cfg)
    return 0


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        return run(argv)
    except MflowError as e:
        print(f"mmflow: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"mmflow: io error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
