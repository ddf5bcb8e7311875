"""Training and evaluation harness.

Two families of runs share this code.  The baseline autoencoder trains
encoder and decoder jointly by backpropagation.  The decoder-only
variants encode each sample by running a latent solver against the
current decoder, then update the decoder from the summed per-sample
gradients; the solver and the backward rule are picked by the method
tag:

  ae               encoder + decoder, joint backprop
  gfe_rk4_adjoint  fixed-grid flow forward, exact backward through the solve
  gfe_rk4_approx   fixed-grid flow forward, solution treated as constant
  gfe_nesterov     momentum flow forward, solution treated as constant
  gfe_amd          adaptive backtracking solve, solution treated as constant

Evaluation is method-asymmetric on purpose: the baseline is scored
through its encoder while everything else (including "score an
AE-trained decoder as if it were a flow model") runs the adaptive
solver per test sample.
"""

import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import model, optim
from .autodiff import PassCounter
from .data import Dataset, iterate_batches
from .flow import (
    FlowConfig,
    SolverDivergence,
    adjoint_backward,
    approx_backward,
    solve_amd,
    solve_fixed_rk4,
    solve_nesterov,
)

METHODS = ("ae", "gfe_rk4_adjoint", "gfe_rk4_approx", "gfe_nesterov", "gfe_amd")

METRICS_HEADER = "images_seen,wall_time_s,train_loss,val_loss,model_calls,method,seed"

# Adaptive-solve horizon used for training/eval encodes.  The grid
# solvers keep the short tau with the decaying speed schedule; the
# adaptive solver runs at unit speed, so it needs more flow time and
# relies on its convergence test to stop long before the horizon.
AMD_TAU = 50.0
AMD_MAX_STEPS = 40


def default_flow(method: str) -> FlowConfig:
    if method == "gfe_amd":
        return FlowConfig(alpha_mode="unit", tau=AMD_TAU, max_steps=AMD_MAX_STEPS)
    return FlowConfig()


def _amd_eval_flow(flow: FlowConfig) -> FlowConfig:
    if flow.alpha_mode == "unit":
        return flow
    return FlowConfig(alpha_mode="unit", tau=AMD_TAU, max_steps=AMD_MAX_STEPS)


@dataclass
class TrainConfig:
    method: str = "gfe_amd"
    optimizer: str = "adam"
    lr: float = 0.0005
    loss: str = "bce"
    batch_size: int = 64
    images: int = 5760
    eval_every: int = 960
    eval_size: int = 1000
    seed: int = 0
    threads: int = 1
    widths: tuple = model.DEFAULT_DECODER_WIDTHS
    flow: Optional[FlowConfig] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.optimizer not in ("adam", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in model.LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.batch_size < 1 or self.images < 1:
            raise ValueError("batch size and image budget must be positive")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.flow is None:
            self.flow = default_flow(self.method)
        if self.method == "gfe_amd" and self.flow.alpha_mode != "unit":
            raise ValueError("gfe_amd needs a unit-speed flow config")


class MetricsRow(NamedTuple):
    images_seen: int
    wall_time_s: float
    train_loss: float
    val_loss: float
    model_calls: int
    method: str
    seed: int


class StepResult(NamedTuple):
    loss_sum: float
    n_used: int
    n_skipped: int


def _encode_one(method, y, theta, flow, kind, counter):
    """Run the configured solver for one sample; returns (z_star, traj_or_None)."""
    if method == "gfe_amd":
        z, _, _ = solve_amd(y, theta, flow, kind=kind, counter=counter)
        return z, None
    if method == "gfe_nesterov":
        z, _ = solve_nesterov(y, theta, flow, kind=kind, counter=counter)
        return z, None
    z, traj = solve_fixed_rk4(y, theta, flow, kind=kind, counter=counter)
    return z, traj


def _sample_grad(method, y, theta, flow, kind, counter):
    """Solve + backward for one sample: (loss, grads) or None if diverged."""
    try:
        z_star, traj = _encode_one(method, y, theta, flow, kind, counter)
        if method == "gfe_rk4_adjoint":
            return adjoint_backward(y, theta, traj, counter=counter)
        return approx_backward(y, z_star, theta, kind=kind, counter=counter)
    except SolverDivergence as err:
        warnings.warn(f"skipping diverged sample: {err}")
        return None


def train_step_gfe(batch, theta, opt_state, update_fn, cfg: TrainConfig,
                   counter=None, pool=None):
    """One decoder update from a batch of per-sample solves.

    Per-sample gradients are summed (the batch loss is a plain sum over
    samples); diverged samples are skipped and counted.  Returns a
    StepResult; theta and opt_state are updated in place.
    """
    kind = cfg.loss
    work = lambda y: _sample_grad(cfg.method, y, theta, cfg.flow, kind, counter)
    if pool is not None:
        results = list(pool.map(work, batch))
    else:
        results = [work(y) for y in batch]

    grads = None
    loss_sum = 0.0
    used = 0
    for res in results:
        if res is None:
            continue
        loss, g = res
        loss_sum += loss
        used += 1
        if grads is None:
            grads = [x.copy() for x in g]
        else:
            for a, b in zip(grads, g):
                a += b
    if used:
        new_params, _ = update_fn(theta.arrays(), grads, opt_state)
        theta.set_arrays(new_params)
    return StepResult(loss_sum, used, len(results) - used)


def train_step_ae(batch, theta, phi, opt_state, update_fn, cfg: TrainConfig,
                  counter=None):
    """One joint encoder+decoder update by backprop on the batch-sum loss."""
    record = model.ae_record(phi, theta, batch, kind=cfg.loss, counter=counter)
    loss = float(record.output.value)
    enc_g, dec_g = model.record_param_grads(record, [phi, theta])
    params = phi.arrays() + theta.arrays()
    new_params, _ = update_fn(params, enc_g + dec_g, opt_state)
    k = len(enc_g)
    phi.set_arrays(new_params[:k])
    theta.set_arrays(new_params[k:])
    return StepResult(loss, len(batch), 0)


def evaluate(dataset: Dataset, theta, cfg: TrainConfig, phi=None, mode=None,
             counter=None, limit=None):
    """Mean per-sample loss over a dataset (or its first `limit` rows).

    mode "encoder" scores through phi; mode "amd" encodes every sample
    with the adaptive solver against theta.  Default: encoder for the
    ae method, adaptive solve otherwise.
    """
    if mode is None:
        mode = "encoder" if cfg.method == "ae" else "amd"
    n = len(dataset) if limit is None else min(limit, len(dataset))
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    images = dataset.images[:n]
    loss_fn = model.bce_loss if cfg.loss == "bce" else model.l2_loss

    if mode == "encoder":
        if phi is None:
            raise ValueError("encoder evaluation needs encoder parameters")
        total = 0.0
        for y in images:
            z = model.encode(y, phi)
            total += loss_fn(y, model.decode(z, theta))
        return total / n

    if mode != "amd":
        raise ValueError(f"unknown evaluation mode {mode!r}")
    flow = _amd_eval_flow(cfg.flow)
    total = 0.0
    for y in images:
        z, _, curve = solve_amd(y, theta, flow, kind=cfg.loss, counter=counter)
        total += curve[-1]
    return total / n


def write_metrics(rows, path):
    """Append metric rows as delimited text, writing the header once."""
    fresh = not (os.path.exists(path) and os.path.getsize(path) > 0)
    with open(path, "a") as fh:
        if fresh:
            fh.write(METRICS_HEADER + "\n")
        for r in rows:
            fh.write(
                f"{r.images_seen},{r.wall_time_s:.6f},{r.train_loss:.10g},"
                f"{r.val_loss:.10g},{r.model_calls},{r.method},{r.seed}\n"
            )


def read_metrics(path):
    """Parse a metrics file back into MetricsRow tuples."""
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header!r}")
        for line in fh:
            if not line.strip():
                continue
            f = line.strip().split(",")
            rows.append(
                MetricsRow(int(f[0]), float(f[1]), float(f[2]), float(f[3]),
                           int(f[4]), f[5], int(f[6]))
            )
    return rows


def write_pgm(path, image2d):
    """Binary 8-bit PGM with intensities round(value * 255)."""
    a = np.asarray(image2d)
    if a.ndim != 2:
        raise ValueError("PGM dump expects a 2-D image")
    raw = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (a.shape[1], a.shape[0]))
        fh.write(raw.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    if int(parts[2]) != 255:
        raise ValueError(f"{path}: unsupported max value")
    raw = np.frombuffer(parts[3], dtype=np.uint8, count=w * h)
    return raw.reshape(h, w).astype(np.float64) / 255.0


def dump_reconstructions(samples, theta, cfg: TrainConfig, out_dir, phi=None,
                         counter=None):
    """Write one PGM per sample: solve (or encode), decode, dump.

    `samples` is a Dataset; returns the list of files written.
    """
    os.makedirs(out_dir, exist_ok=True)
    flow = _amd_eval_flow(cfg.flow)
    shape = samples.image_shape
    paths = []
    for i, y in enumerate(samples.images):
        if phi is not None:
            z = model.encode(y, phi)
        else:
            z, _, _ = solve_amd(y, theta, flow, kind=cfg.loss, counter=counter)
        yhat = model.decode(z, theta)
        path = os.path.join(out_dir, f"recon_{i:03d}.pgm")
        write_pgm(path, yhat.reshape(shape))
        paths.append(path)
    return paths


def dump_latents(dataset: Dataset, theta, cfg: TrainConfig, path, counter=None):
    """Write "label z_1 ... z_k" per sample, solved with the adaptive flow."""
    flow = _amd_eval_flow(cfg.flow)
    with open(path, "w") as fh:
        for y, label in zip(dataset.images, dataset.labels):
            z, _, _ = solve_amd(y, theta, flow, kind=cfg.loss, counter=counter)
            coords = " ".join("%.17g" % v for v in z)
            fh.write(f"{label} {coords}\n")
    return len(dataset)


def run_training(cfg: TrainConfig, train_ds: Dataset, val_ds: Dataset = None,
                 out_dir=None, probe=None, log=None):
    """Full training run; returns a dict of final state and metrics.

    Draws with-replacement batches until the image budget is spent,
    evaluating every cfg.eval_every images (0 disables interim evals)
    and once at the end.  Deterministic for a fixed config.  `probe`,
    if given, is called as probe(step_index, theta, phi) after each
    update; `log` receives one text line per eval row.
    """
    theta = model.init_params(cfg.seed, cfg.widths)
    phi = None
    if cfg.method == "ae":
        phi = model.init_encoder_params(cfg.seed, tuple(reversed(cfg.widths)))

    opt_state, update_fn = optim.make_optimizer(cfg.optimizer, cfg.lr)
    counter = PassCounter()
    batches = iterate_batches(train_ds, cfg.batch_size, cfg.seed)
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None

    rows = []
    wall = 0.0
    images_seen = 0
    since_eval = 0
    loss_acc, loss_n = 0.0, 0
    skipped = 0
    step = 0

    def snap_eval():
        if val_ds is None:
            return float("nan")
        return evaluate(val_ds, theta, cfg, phi=phi, limit=cfg.eval_size)

    def emit():
        train_loss = loss_acc / loss_n if loss_n else float("nan")
        row = MetricsRow(images_seen, wall, train_loss, snap_eval(),
                         counter.passes, cfg.method, cfg.seed)
        rows.append(row)
        if log is not None:
            log(f"{row.images_seen} images  train {row.train_loss:.4f}  "
                f"val {row.val_loss:.4f}  calls {row.model_calls}")

    try:
        if cfg.eval_every > 0:
            emit()
        while images_seen < cfg.images:
            batch, _ = next(batches)
            t0 = time.perf_counter()
            if cfg.method == "ae":
                res = train_step_ae(batch, theta, phi, opt_state, update_fn,
                                    cfg, counter)
            else:
                res = train_step_gfe(batch, theta, opt_state, update_fn, cfg,
                                     counter, pool)
            wall += time.perf_counter() - t0
            step += 1
            images_seen += len(batch)
            since_eval += len(batch)
            skipped += res.n_skipped
            if res.n_used:
                loss_acc += res.loss_sum
                loss_n += res.n_used
            if probe is not None:
                probe(step, theta, phi)
            if cfg.eval_every > 0 and since_eval >= cfg.eval_every:
                since_eval = 0
                emit()
                loss_acc, loss_n = 0.0, 0
        if not rows or rows[-1].images_seen != images_seen:
            emit()
    finally:
        if pool is not None:
            pool.shutdown()

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_metrics(rows, os.path.join(out_dir, "metrics.csv"))
        model.save_checkpoint(
            os.path.join(out_dir, "checkpoint.bin"),
            theta,
            encoder=phi,
            opt=optim.state_to_blob(opt_state),
            meta={"method": cfg.method, "seed": str(cfg.seed),
                  "images": str(images_seen), "loss": cfg.loss},
        )

    return {
        "theta": theta,
        "phi": phi,
        "opt_state": opt_state,
        "rows": rows,
        "counter": counter,
        "skipped": skipped,
        "steps": step,
    }
