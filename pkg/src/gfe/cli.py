"""Command-line entry point.

Subcommands: train, eval, reconstruct, latents, fixture-check.  Runs
are configured from a flat key=value file (nested fields use dotted
keys, e.g. flow.tau=5.0) with command-line flags taking precedence;
the fully resolved configuration is echoed into the output directory
so every run is self-describing.
"""

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import data, harness, model, optim
from ._kernels import BACKEND
from .flow import FlowConfig, make_log_grid, solve_amd, solve_fixed_rk4
from .harness import TrainConfig, default_flow

_TRAIN_KEYS = {
    "method": str,
    "optimizer": str,
    "lr": float,
    "loss": str,
    "batch_size": int,
    "images": int,
    "eval_every": int,
    "eval_size": int,
    "seed": int,
    "threads": int,
    "widths": str,
}

_FLOW_KEYS = {
    "tau": float,
    "n_slices": int,
    "alpha_mode": str,
    "beta": float,
    "s0": float,
    "s_max": float,
    "kappa": float,
    "eps": float,
    "conv_threshold": float,
    "max_steps": int,
}


class ConfigError(ValueError):
    pass


def load_config(path):
    """Parse a key=value file into {key: string}; # starts a comment."""
    out = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key=value, got {raw.strip()!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{ln}: empty key")
            out[key] = val
    return out


def _parse_widths(text):
    try:
        widths = tuple(int(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad widths {text!r}; expected integers like 32,64,128,256,784")
    if len(widths) < 2:
        raise ConfigError("widths needs at least two entries")
    return widths


def build_train_config(file_kv, overrides):
    """Merge defaults <- config file <- flag overrides into a TrainConfig."""
    kv = dict(file_kv)
    kv.update({k: v for k, v in overrides.items() if v is not None})

    plain, flow_kv = {}, {}
    for key, val in kv.items():
        if key.startswith("flow."):
            sub = key[5:]
            if sub not in _FLOW_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            flow_kv[sub] = val
        elif key in _TRAIN_KEYS:
            plain[key] = val
        else:
            raise ConfigError(f"unknown config key {key!r}")

    args = {}
    for key, val in plain.items():
        want = _TRAIN_KEYS[key]
        try:
            args[key] = want(val)
        except ValueError:
            raise ConfigError(f"config key {key}: cannot parse {val!r} as {want.__name__}")
    if "widths" in args:
        args["widths"] = _parse_widths(args["widths"])

    method = args.get("method", "gfe_amd")
    flow_args = {}
    for key, val in flow_kv.items():
        want = _FLOW_KEYS[key]
        try:
            flow_args[key] = want(val)
        except ValueError:
            raise ConfigError(f"config key flow.{key}: cannot parse {val!r}")
    try:
        if flow_args:
            flow = dataclasses.replace(default_flow(method), **flow_args)
        else:
            flow = None
        return TrainConfig(flow=flow, **args)
    except ValueError as err:
        raise ConfigError(str(err))


def resolved_config_text(cfg: TrainConfig):
    lines = []
    for key in sorted(_TRAIN_KEYS):
        val = getattr(cfg, key)
        if key == "widths":
            val = ",".join(str(w) for w in val)
        lines.append(f"{key}={val}")
    for key in sorted(_FLOW_KEYS):
        lines.append(f"flow.{key}={getattr(cfg.flow, key)}")
    return "\n".join(lines) + "\n"


def _add_common(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data-dir", help="dataset directory (or $GFE_DATA_DIR)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--method", choices=harness.METHODS)
    p.add_argument("--seed", type=int)
    p.add_argument("--images", type=int, help="training image budget")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--loss", choices=("bce", "l2"))
    p.add_argument("--optimizer", choices=("adam", "rmsprop"))
    p.add_argument("--synthetic", type=int, metavar="N",
                   help="use N built-in synthetic samples instead of dataset files")
    p.add_argument("--segmented", action="store_true",
                   help="train on labels 0-4 only, evaluate on labels 5-9")


def parse_args(argv):
    ap = argparse.ArgumentParser(
        prog="gfe",
        description="Decoder-only autoencoding via latent gradient flow",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write metrics/checkpoint")
    _add_common(p)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--eval-mode", choices=("auto", "encoder", "amd"), default="auto")
    p.add_argument("--limit", type=int, help="cap the number of scored samples")

    p = sub.add_parser("reconstruct", help="dump PGM reconstructions for a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--use-encoder", action="store_true",
                   help="encode with the checkpoint encoder instead of the solver")

    p = sub.add_parser("latents", help="dump solved latent vectors to a text table")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=500)

    p = sub.add_parser("fixture-check", help="run built-in analytic self-checks")

    return ap.parse_args(argv)


def _overrides(ns):
    return {
        "method": ns.method,
        "seed": ns.seed,
        "images": ns.images,
        "batch_size": ns.batch_size,
        "threads": ns.threads,
        "loss": ns.loss,
        "optimizer": ns.optimizer,
    }


def _config_for(ns):
    file_kv = load_config(ns.config) if ns.config else {}
    return build_train_config(file_kv, _overrides(ns))


def _datasets(ns, cfg):
    """(train_ds, val_ds) per flags; synthetic corpus when requested."""
    if ns.synthetic:
        train = data.make_synthetic_dataset(ns.synthetic, cfg.seed, "train")
        val = data.make_synthetic_dataset(max(ns.synthetic // 5, 64), cfg.seed, "test")
        return train, val
    data_dir = ns.data_dir or os.environ.get("GFE_DATA_DIR")
    if not data_dir:
        raise ConfigError(
            "no dataset: pass --data-dir, set GFE_DATA_DIR, or use --synthetic N"
        )
    train = data.load_dataset(data_dir, "train")
    try:
        val = data.load_dataset(data_dir, "test")
    except FileNotFoundError:
        val = None
    if ns.segmented:
        train, seg_val = data.split_segmented(train)
        val = seg_val if val is None else data.split_segmented(val)[1]
    return train, val


def _one_dataset(ns, cfg, split):
    train, val = _datasets(ns, cfg)
    if split == "train":
        return train
    if val is None:
        raise ConfigError("no test split available")
    return val


def cmd_train(ns):
    cfg = _config_for(ns)
    train_ds, val_ds = _datasets(ns, cfg)
    out_dir = ns.out or "runs/latest"
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved-config"), "w") as fh:
        fh.write(resolved_config_text(cfg))
    result = harness.run_training(
        cfg, train_ds, val_ds, out_dir=out_dir,
        log=lambda line: print(line, flush=True),
    )
    last = result["rows"][-1]
    print(
        f"done: val loss {last.val_loss:.4f} after {last.images_seen} images "
        f"in {last.wall_time_s:.1f}s train time ({result['skipped']} skipped, "
        f"backend {BACKEND})"
    )
    return 0


def cmd_eval(ns):
    cfg = _config_for(ns)
    ckpt = model.load_checkpoint(ns.checkpoint)
    ds = _one_dataset(ns, cfg, ns.split)
    mode = ns.eval_mode
    if mode == "auto":
        mode = "encoder" if ckpt["encoder"] is not None else "amd"
    loss = harness.evaluate(
        ds, ckpt["decoder"], cfg, phi=ckpt["encoder"], mode=mode, limit=ns.limit
    )
    n = len(ds) if ns.limit is None else min(ns.limit, len(ds))
    print(f"{mode} eval: mean loss {loss:.6f} over {n} samples ({ns.split} split)")
    if ns.out:
        os.makedirs(ns.out, exist_ok=True)
        with open(os.path.join(ns.out, "eval.txt"), "a") as fh:
            fh.write(f"{ns.split} {mode} {n} {loss:.10g}\n")
    return 0


def cmd_reconstruct(ns):
    cfg = _config_for(ns)
    ckpt = model.load_checkpoint(ns.checkpoint)
    ds = _one_dataset(ns, cfg, "test").take(np.arange(0, ns.count))
    out_dir = ns.out or "recons"
    phi = ckpt["encoder"] if ns.use_encoder else None
    if ns.use_encoder and phi is None:
        raise ConfigError("checkpoint has no encoder")
    paths = harness.dump_reconstructions(ds, ckpt["decoder"], cfg, out_dir, phi=phi)
    print(f"wrote {len(paths)} reconstructions under {out_dir}")
    return 0


def cmd_latents(ns):
    cfg = _config_for(ns)
    ckpt = model.load_checkpoint(ns.checkpoint)
    ds = _one_dataset(ns, cfg, "test")
    ds = ds.take(np.arange(0, min(ns.count, len(ds))))
    out_dir = ns.out or "."
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "latents.txt")
    n = harness.dump_latents(ds, ckpt["decoder"], cfg, path)
    print(f"wrote {n} latent rows to {path}")
    return 0


class _Quadratic:
    """Analytic stand-in objective: 0.5 * ||z - target||^2."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.float64)
        self.latent_dim = self.target.size

    def value(self, z):
        d = z - self.target
        return 0.5 * float(d @ d)

    def value_and_grad(self, z):
        d = z - self.target
        return 0.5 * float(d @ d), d

    def grad(self, z):
        return z - self.target


def cmd_fixture_check(_ns):
    """Analytic smoke checks that need no dataset; prints one line each."""
    failures = 0

    def check(name, ok, detail=""):
        nonlocal failures
        mark = "ok  " if ok else "FAIL"
        print(f"{mark} {name}" + (f"  ({detail})" if detail else ""))
        failures += 0 if ok else 1

    cfg = FlowConfig()
    ts = make_log_grid(cfg)
    dts = np.diff(ts)
    check("log grid endpoints and growth",
          ts[0] == 0.0 and ts[-1] == cfg.tau and np.all(dts[1:] >= dts[:-1]))

    target = np.array([1.0, -0.5, 0.25])
    obj = _Quadratic(target)
    unit = FlowConfig(alpha_mode="unit")
    z, _ = solve_fixed_rk4(None, None, unit, objective=obj)
    exact = target * (1.0 - np.exp(-unit.tau))
    err = float(np.max(np.abs(z - exact)))
    check("fixed-grid flow vs closed form", err < 1e-6, f"max err {err:.2e}")

    amd_cfg = FlowConfig(alpha_mode="unit", tau=50.0)
    z, steps, curve = solve_amd(None, None, amd_cfg, objective=obj)
    check("adaptive solve reaches the optimum",
          float(np.max(np.abs(z - target))) < 1e-6 and steps <= 5,
          f"{steps} steps")
    check("adaptive loss curve strictly decreasing",
          all(b < a for a, b in zip(curve, curve[1:])))

    st = optim.RMSPropState()
    p, _ = optim.rmsprop_update([np.array([0.0])], [np.array([1.0])], st)
    want = -0.0005 / (np.sqrt(0.1) + 1e-6)
    check("rmsprop first-step value", abs(p[0][0] - want) < 1e-12)

    st = optim.AdamState()
    p, _ = optim.adam_update([np.array([0.0])], [np.array([0.5])], st)
    check("adam first-step near lr", abs(abs(p[0][0]) - st.lr) < 1e-6)

    theta = model.init_params(0, (3, 5, 4))
    y = np.linspace(0.1, 0.9, 4)
    obj = model.DecoderObjective(theta, y)
    z = np.array([0.3, -0.2, 0.1])
    g_kernel = obj.grad(z)
    rec = model.decoder_record(theta, z, y)
    from . import autodiff as ad

    g_tape = ad.grad_wrt_latent(rec)
    gerr = float(np.max(np.abs(g_kernel - g_tape)))
    check("kernel / tape gradient parity", gerr < 1e-10, f"max err {gerr:.2e}")

    print(f"backend: {BACKEND}")
    if failures:
        print(f"{failures} check(s) failed")
        return 1
    print("all fixture checks passed")
    return 0


def run(ns):
    if ns.command == "train":
        return cmd_train(ns)
    if ns.command == "eval":
        return cmd_eval(ns)
    if ns.command == "reconstruct":
        return cmd_reconstruct(ns)
    if ns.command == "latents":
        return cmd_latents(ns)
    if ns.command == "fixture-check":
        return cmd_fixture_check(ns)
    raise AssertionError(f"unhandled command {ns.command!r}")


def main(argv=None):
    ns = parse_args(sys.argv[1:] if argv is None else argv)
    try:
        return run(ns)
    except (ConfigError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
