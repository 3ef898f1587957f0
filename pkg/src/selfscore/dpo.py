"""Adapter training with DPO, plus the two supervised ablations.

The reference model is always the frozen base without any delta. In DPO
mode the policy starts from ``init_delta`` (the cumulative delta carried
over from earlier iterations) with a fresh zero-initialised adapter on top.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from ._util import child_rng, write_json
from .backend.base import AdapterSpec, NamedDelta, save_delta
from .errors import DatasetSchemaError, NonFiniteLoss
from .preference import PreferencePair, load_pairs

logger = logging.getLogger(__name__)

MODES = ("dpo", "sft_score", "sft_score_and_text")


@dataclass
class TrainConfig:
    beta: float = 0.1
    lr: float = 5e-5
    batch_size: int = 128
    epochs: int = 1
    lr_decay_per_iteration: float = 0.8
    mode: str = "dpo"
    seed: int = 0
    length_normalize: bool = False

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def for_iteration(self, iteration: int) -> "TrainConfig":
        """Copy with the learning rate decayed for 1-based ``iteration``."""
        d = asdict(self)
        d["lr"] = lr_for_iteration(self.lr, iteration, self.lr_decay_per_iteration)
        return TrainConfig(**d)


def lr_for_iteration(base_lr: float, iteration: int, decay: float = 0.8) -> float:
    if iteration < 1:
        raise ValueError("iterations are 1-based")
    return base_lr * decay ** (iteration - 1)


@dataclass
class TrainReport:
    loss_trace: list[float] = field(default_factory=list)
    final_mean_loss: float = float("nan")
    pair_accuracy: float = float("nan")
    steps: int = 0
    initial_losses: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def dpo_loss(lp_w_policy: float, lp_l_policy: float, lp_w_ref: float, lp_l_ref: float,
             beta: float) -> tuple[float, float]:
    """``-log sigmoid(beta * m)`` with ``m`` the policy-minus-reference log-ratio margin.

    Returns ``(loss, margin)``; evaluated as ``log(1 + exp(-beta * m))``.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    m = (lp_w_policy - lp_w_ref) - (lp_l_policy - lp_l_ref)
    return float(np.logaddexp(0.0, -beta * m)), float(m)


def dpo_loss_grad(lp_w_policy, lp_l_policy, lp_w_ref, lp_l_ref, beta) -> tuple[float, float, float, float]:
    """Partial derivatives of ``dpo_loss`` w.r.t. its four log-probability inputs."""
    m = (lp_w_policy - lp_w_ref) - (lp_l_policy - lp_l_ref)
    dm = -beta * float(expit(-beta * m))
    return dm, -dm, -dm, dm


class Adam:
    """Plain Adam; moment estimates are keyed by parameter name."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _sequence_terms(handle, pair: PreferencePair, response: str, mask: str, normalize: bool, grad: bool):
    if grad:
        lp, g = handle.sequence_logprob_grad(pair.image_uri, pair.prompt, response, mask)
    else:
        lp, g = handle.sequence_logprob(pair.image_uri, pair.prompt, response, mask), None
    if normalize:
        n = max(handle.count_tokens(response), 1)
        lp /= n
        if g is not None:
            g = {k: v / n for k, v in g.items()}
    return lp, g


def sft_loss(mode: str, handle, pair: PreferencePair) -> float:
    """Negative log-likelihood of the chosen response.

    ``sft_score`` masks everything except the score token;
    ``sft_score_and_text`` covers the full response. Prompt tokens never count.
    """
    if mode == "sft_score":
        mask = "score"
    elif mode == "sft_score_and_text":
        mask = "all"
    else:
        raise ValueError(f"{mode!r} is not an SFT mode")
    return -handle.sequence_logprob(pair.image_uri, pair.prompt, pair.chosen, mask)


def _pair_loss_and_grad(policy, pair, ref_lp, config: TrainConfig):
    """Loss, adapter gradient and DPO margin for one pair."""
    norm = config.length_normalize
    if config.mode == "dpo":
        lw, gw = _sequence_terms(policy, pair, pair.chosen, "all", norm, True)
        ll, gl = _sequence_terms(policy, pair, pair.rejected, "all", norm, True)
        loss, margin = dpo_loss(lw, ll, ref_lp[0], ref_lp[1], config.beta)
        dw, dl, _, _ = dpo_loss_grad(lw, ll, ref_lp[0], ref_lp[1], config.beta)
        grads = {k: dw * gw[k] + dl * gl[k] for k in gw}
        return loss, grads, margin
    mask = "score" if config.mode == "sft_score" else "all"
    lp, g = _sequence_terms(policy, pair, pair.chosen, mask, norm, True)
    return -lp, {k: -v for k, v in g.items()}, float("nan")


def pair_margins(policy, reference, pairs, config: TrainConfig) -> np.ndarray:
    out = []
    for p in pairs:
        lw = _sequence_terms(policy, p, p.chosen, "all", config.length_normalize, False)[0]
        ll = _sequence_terms(policy, p, p.rejected, "all", config.length_normalize, False)[0]
        rw = _sequence_terms(reference, p, p.chosen, "all", config.length_normalize, False)[0]
        rl = _sequence_terms(reference, p, p.rejected, "all", config.length_normalize, False)[0]
        out.append((lw - rw) - (ll - rl))
    return np.array(out)


def train_adapter(base_handle, dataset, spec: AdapterSpec, config: TrainConfig,
                  init_delta: NamedDelta | None = None, adapter_seed: int | None = None,
                  **delta_metadata) -> tuple[NamedDelta, TrainReport]:
    """Train one adapter over a pair file (or a list of pairs).

    Batches are drawn from a seeded shuffle per epoch; each batch is one
    optimizer step on the mean per-pair loss, whatever the batch size.
    """
    if isinstance(dataset, (str, Path)):
        _, pairs = load_pairs(dataset)
    else:
        pairs = list(dataset)
    if not pairs:
        raise DatasetSchemaError("training dataset has no pairs")

    reference = base_handle.reference()
    policy = reference.apply_delta(init_delta)
    policy.attach_adapter(spec, seed=config.seed if adapter_seed is None else adapter_seed)
    optimizer = Adam(config.lr)

    ref_lp = None
    if config.mode == "dpo":
        norm = config.length_normalize
        ref_lp = [(_sequence_terms(reference, p, p.chosen, "all", norm, False)[0],
                   _sequence_terms(reference, p, p.rejected, "all", norm, False)[0]) for p in pairs]

    report = TrainReport()
    n = len(pairs)
    for epoch in range(config.epochs):
        order = child_rng(config.seed, "shuffle", epoch).permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            total = None
            losses = []
            for i in batch:
                loss, grads, _ = _pair_loss_and_grad(policy, pairs[i], ref_lp[i] if ref_lp else None, config)
                if not math.isfinite(loss):
                    raise NonFiniteLoss(f"non-finite loss {loss} on pair {pairs[i].image_id} "
                                        f"(epoch {epoch}, step {report.steps})")
                losses.append(loss)
                if total is None:
                    total = {k: v.copy() for k, v in grads.items()}
                else:
                    for k, v in grads.items():
                        total[k] += v
            if report.steps == 0:
                report.initial_losses = [float(x) for x in losses]
            mean_grads = {k: v / len(batch) for k, v in total.items()}
            policy.train_step(mean_grads, optimizer)
            report.steps += 1
            report.loss_trace.append(float(np.mean(losses)))
            epoch_losses.extend(losses)
        report.final_mean_loss = float(np.mean(epoch_losses))
        logger.info("epoch %d: mean loss %.6f", epoch, report.final_mean_loss)

    report.pair_accuracy = float(np.mean(pair_margins(policy, reference, pairs, config) > 0))
    meta = {"mode": config.mode, "train_config": asdict(config)}
    meta.update(delta_metadata)
    return policy.export_delta(**meta), report


def save_checkpoint(directory, delta: NamedDelta, config: TrainConfig, report: TrainReport | None = None) -> Path:
    directory = Path(directory)
    save_delta(delta, directory)
    write_json(directory / "train_config.json", asdict(config))
    if report is not None:
        write_json(directory / "train_report.json", report.to_dict())
    return directory


def load_train_report(directory) -> TrainReport:
    d = json.loads((Path(directory) / "train_report.json").read_text())
    return TrainReport(**d)
