"""Adam training loop with per-epoch edge dropout and early stopping."""
from __future__ import annotations

import copy
import itertools
import json
import logging
import math
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import evaluator, losses, simgraph
from .checkpoint import Checkpoint
from .model import AblationFlags, ConfigError, ModelConfig, ModelInputs, forward, init_params

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    d: int = 64
    batch_size: int = 1024
    max_epochs: int = 1000
    patience: int = 20
    lr: float = 1e-3
    alpha: float = 0.5
    k: int = 10
    layers: int = 3
    rho: float = 0.8
    tau: float = 0.2
    seed: int = 0
    loss_mode: str = "sampled"
    symmetric_align: bool = False
    include_layer0: bool = False
    asg_pairing: str = "cross"
    scoring: str = "dot"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    record_seconds: bool = True
    profile: bool = False
    flags: AblationFlags = field(default_factory=AblationFlags)

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be positive")
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError(f"rho must be in [0, 1), got {self.rho}")
        if self.tau <= 0 or self.lr < 0:
            raise ConfigError("tau must be positive and lr nonnegative")
        if self.loss_mode not in losses.LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {losses.LOSS_MODES}")
        if self.scoring not in ("dot", "cosine"):
            raise ConfigError("scoring must be dot or cosine")
        self.model_config().validate()
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, alpha=self.alpha, k=self.k, layers=self.layers,
                           include_layer0=self.include_layer0, asg_pairing=self.asg_pairing,
                           flags=self.flags)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        flags = d.pop("flags", {})
        if isinstance(flags, dict):
            flags = AblationFlags.from_dict(flags)
        return cls(flags=flags, **d)

    @classmethod
    def from_toml(cls, path) -> "TrainConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))

    def override(self, **kw) -> "TrainConfig":
        flags = kw.pop("flags", None)
        out = replace(self, **kw)
        if flags is not None:
            out.flags = flags if isinstance(flags, AblationFlags) else replace(self.flags, **flags)
        return out


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        p = params[name]
        params[name] = (p - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class EarlyStopper:
    """Tracks the best validation score; signals stop after ``patience``
    epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.bad = 0

    def update(self, epoch: int, score: float) -> bool:
        if score > self.best:
            self.best, self.best_epoch, self.bad = score, epoch, 0
            return False
        self.bad += 1
        return self.bad >= self.patience


class Profiler:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.ms = defaultdict(float)

    @contextmanager
    def __call__(self, name):
        if not self.enabled:
            yield
            return
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.ms[name] += 1000.0 * (time.perf_counter() - t0)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list
    best_epoch: int
    best_val: float


def infer_embeddings(params: dict, inputs: ModelInputs, mc: ModelConfig, timer=None):
    return forward(params, inputs, mc, mode="infer", timer=timer)


def train(config: TrainConfig, inputs: ModelInputs, data, log_path=None,
          checkpoint_path=None, loss_log_path=None, params: dict | None = None,
          source: dict | None = None) -> TrainResult:
    """Train on ``inputs`` and validate on ``data.val`` every epoch.

    ``data`` is the :class:`~idfree.dataset.InteractionSet` the inputs were
    built from.  The best-by-validation-Recall@20 parameters are returned (and
    written to ``checkpoint_path``); one JSON line per epoch goes to
    ``log_path``.  ``source`` is stored in the checkpoint as provenance.
    """
    config.validate()
    mc = config.model_config()
    rng = np.random.default_rng(config.seed)
    d_t, d_v = inputs.dims
    params = init_params(d_t, d_v, config.d, rng) if params is None else copy.deepcopy(params)
    state = AdamState.zeros(params)
    stopper = EarlyStopper(config.patience)
    best_params = copy.deepcopy(params)
    profiler = Profiler(config.profile)
    entries = []
    log_fh = open(log_path, "w") if log_path else None
    loss_fh = open(loss_log_path, "w") if loss_log_path else None
    steps = max(1, math.ceil(inputs.r_train.nnz / config.batch_size))

    def make_ckpt(p, epoch, val):
        return Checkpoint({k: v.copy() for k, v in p.items()}, config.to_dict(), d_t, d_v,
                          epoch, {"val_recall@20": val}, dict(source or {}))

    try:
        for epoch in range(1, config.max_epochs + 1):
            t0 = time.perf_counter()
            ep_rng = np.random.default_rng([config.seed, epoch])
            r_epoch = inputs.r_train
            if config.flags.use_age and config.rho > 0:
                with profiler("denoise"):
                    r_epoch = simgraph.denoise_interactions(inputs.r_train, config.rho, ep_rng)
            sums = defaultdict(float)
            for _ in range(steps):
                batch = losses.sample_triplets(inputs.r_train, config.batch_size, ep_rng)
                tape = ad.Tape()
                P = {k: tape.param(v, k) for k, v in params.items()}
                bundle = forward(P, inputs, mc, "train", r_epoch, timer=profiler)
                with profiler("loss"):
                    total, rep = losses.compute_losses(
                        bundle, batch, config.tau, config.loss_mode,
                        config.flags.use_align, config.symmetric_align)
                if not math.isfinite(rep.l_total):
                    if checkpoint_path:
                        make_ckpt(best_params, stopper.best_epoch, stopper.best).save(checkpoint_path)
                    raise NumericError(f"loss diverged at epoch {epoch}")
                with profiler("backward"):
                    grads = ad.backward(tape, total)
                adam_step(params, {t.name: g for t, g in grads.items()}, state, config.lr,
                          config.beta1, config.beta2, config.eps)
                for key in ("l_total", "l_rec"):
                    sums[key] += getattr(rep, key)
                sums["l_align"] += rep.l_align
                if loss_fh:
                    loss_fh.write(json.dumps(rep.to_dict()) + "\n")
            with profiler("evaluate"):
                bundle = infer_embeddings(params, inputs, mc)
                val = evaluator.evaluate_embeddings(bundle.E_U, bundle.E_I, data, "val", (20,),
                                                    cosine=config.scoring == "cosine")
            entry = {
                "epoch": epoch,
                "l_total": sums["l_total"] / steps,
                "l_rec": sums["l_rec"] / steps,
                "l_align": sums["l_align"] / steps,
                "val_recall@20": val.recall[20],
                "val_ndcg@20": val.ndcg[20],
                "seconds": round(time.perf_counter() - t0, 4) if config.record_seconds else None,
            }
            if config.profile:
                entry["profile_ms"] = {k: round(v, 3) for k, v in sorted(profiler.ms.items())}
            entries.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            stop = stopper.update(epoch, val.recall[20])
            if stopper.best_epoch == epoch:
                best_params = copy.deepcopy(params)
            log.info("epoch %d loss %.4f val R@20 %.4f", epoch, entry["l_total"], val.recall[20])
            if stop:
                break
    finally:
        if log_fh:
            log_fh.close()
        if loss_fh:
            loss_fh.close()
    ckpt = make_ckpt(best_params, stopper.best_epoch, stopper.best)
    if checkpoint_path:
        ckpt.save(checkpoint_path)
    return TrainResult(ckpt, entries, stopper.best_epoch, stopper.best)


def expand_grid(grid: dict) -> list[dict]:
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def grid_search(base: TrainConfig, grid: dict, inputs_for, data, leaderboard_path=None):
    """Train every combination in ``grid`` and rank by validation Recall@20.

    ``inputs_for(k)`` returns model inputs for a given kNN size, so grids over
    ``k`` rebuild the static graphs.  Returns ``(best_config, leaderboard)``.
    """
    rows = []
    for point in expand_grid(grid):
        cfg = base.override(**point).validate()
        res = train(cfg, inputs_for(cfg.k), data)
        rows.append({"params": point, "val_recall@20": res.best_val, "best_epoch": res.best_epoch})
    order = sorted(range(len(rows)), key=lambda j: -rows[j]["val_recall@20"])
    board = [rows[j] for j in order]
    if leaderboard_path:
        Path(leaderboard_path).write_text(json.dumps(board, indent=1) + "\n")
    return base.override(**board[0]["params"]), board
