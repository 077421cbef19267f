"""Deterministic training loop, greedy head-synchronous evaluation and checkpoint files."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, replace

import numpy as np

from ..decode import DecodePolicy, DecodeTrace, decode_sequence
from ..metrics import relative_latency, to_milliseconds, token_errors
from . import model as tm
from .task import SyntheticTask, gen_synthetic

logger = logging.getLogger(__name__)

TRAIN_STREAM, VAL_STREAM, TEST_STREAM = 0, 1, 2
LOG_FIELDS = ("epoch", "loss", "accuracy", "spread")
TABLE_FIELDS = ("epsilon", "token_error", "rel_frames", "rel_ms", "max_spread", "rel_gold_frames", "rel_gold_ms")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "mcmma_delta"
    epsilon_train: int = 4
    headdrop_prob: float = 0.5
    learning_rate: float = 1.0
    lr_decay_start: int = 100
    lr_decay: float = 0.98
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    energy_noise_std: float = 0.0
    clip_norm: float = 5.0
    n_train: int = 512
    n_val: int = 128
    spread_utterances: int = 16

    def __post_init__(self):
        if self.mode not in tm.MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {tm.MODES}")
        if self.mode != "mma" and self.epsilon_train < 1:
            raise ValueError("constrained modes need epsilon_train >= 1")
        if not 0.0 <= self.headdrop_prob < 1.0:
            raise ValueError("headdrop_prob must lie in [0, 1)")
        if self.learning_rate < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("learning_rate, epochs must be >= 0 and batch_size >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** max(0, epoch - self.lr_decay_start)


@dataclass
class Checkpoint:
    params: tm.ToyModelParams
    model: tm.ToyConfig
    task: SyntheticTask
    train: TrainConfig
    epoch: int = 0
    accuracy: float = 0.0


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list


def model_config_for(task: SyntheticTask, **overrides) -> tm.ToyConfig:
    return tm.ToyConfig(vocab_size=task.vocab_size, T=task.T, L=task.L, d_in=task.d_in, **overrides)


def _global_clip(grads: dict, limit: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    return 1.0 if limit <= 0 or norm <= limit else limit / norm


def train(cfg: TrainConfig, task: SyntheticTask, model: tm.ToyConfig | None = None) -> TrainResult:
    """Plain gradient descent on token cross-entropy; keeps the best validation-accuracy parameters."""
    model = model or model_config_for(task)
    data = gen_synthetic(task, cfg.n_train, TRAIN_STREAM)
    val = gen_synthetic(task, cfg.n_val, VAL_STREAM)
    params = tm.init_params(model, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 17])
    drop_rng = np.random.default_rng([cfg.seed, 23])
    noise_rng = np.random.default_rng([cfg.seed, 29])

    def evaluate_epoch(epoch, mean_loss):
        logits, _ = tm.forward(params, model, val.inputs, val.targets, cfg.mode, cfg.epsilon_train)
        acc = tm.accuracy(logits, val.targets)
        policy = DecodePolicy(epsilon=cfg.epsilon_train)
        spreads = [
            max(r.spread for r in decode_utterance(params, model, val.inputs[n], policy).steps)
            for n in range(min(cfg.spread_utterances, len(val)))
        ]
        row = {"epoch": epoch, "loss": mean_loss, "accuracy": acc, "spread": float(np.mean(spreads))}
        logger.debug("epoch %d loss %.4f acc %.4f spread %.2f", epoch, mean_loss, acc, row["spread"])
        return row

    log = []
    best = Checkpoint(params.copy(), model, task, cfg, 0, -1.0)
    first = evaluate_epoch(0, float("nan"))
    best.accuracy = first["accuracy"]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        lr = cfg.lr_at(epoch)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y = data.inputs[idx], data.targets[idx]
            mask = tm.headdrop_mask(model.num_heads, cfg.headdrop_prob, drop_rng, len(idx))
            noise = None
            if cfg.energy_noise_std > 0:
                noise = cfg.energy_noise_std * noise_rng.normal(size=(len(idx), model.num_heads, model.L, model.T))
            loss, grads, _ = tm.loss_and_grad(params, model, x, y, cfg.mode, cfg.epsilon_train, mask, noise)
            if not np.isfinite(loss):
                raise FloatingPointError(f"loss diverged at epoch {epoch}, batch starting {start}")
            named = grads.named()
            factor = _global_clip(named, cfg.clip_norm)
            for name, value in params.named().items():
                value -= lr * factor * named[name]
            losses.append(loss)
        row = evaluate_epoch(epoch, float(np.mean(losses)))
        log.append(row)
        if row["accuracy"] > best.accuracy:
            best = Checkpoint(params.copy(), model, task, cfg, epoch, row["accuracy"])
    return TrainResult(best, log)


def log_to_csv(log: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for row in log:
        w.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOG_FIELDS[1:]])
    return buf.getvalue()


def decode_utterance(params, model: tm.ToyConfig, x, policy: DecodePolicy) -> DecodeTrace:
    stepper = tm.GreedyStepper(params, model, x)
    return decode_sequence(stepper.prob, policy, model.L, model.num_heads, model.T, emit=stepper.emit)


def evaluate(
    ckpt: Checkpoint,
    epsilon_list,
    policy: DecodePolicy | None = None,
    n_test: int = 128,
    reduction_factor: int = 8,
    shift_ms: float = 10.0,
) -> list:
    """One trade-off row per decode epsilon.

    ``rel_frames``/``rel_ms`` compare the latest-head boundaries with a decode
    that has no synchronisation (epsilon = T); ``rel_gold_*`` compare with the
    gold boundaries of the task.
    """
    policy = policy or DecodePolicy(epsilon=0)
    model, task = ckpt.model, ckpt.task
    test = gen_synthetic(task, n_test, TEST_STREAM)
    free = replace(policy, epsilon=model.T)
    refs = [decode_utterance(ckpt.params, model, test.inputs[n], free) for n in range(n_test)]

    rows = []
    for eps in epsilon_list:
        pol = replace(policy, epsilon=int(eps))
        errors = words = 0
        rel, rel_gold, worst = [], [], 0
        for n in range(n_test):
            trace = refs[n] if eps >= model.T else decode_utterance(ckpt.params, model, test.inputs[n], pol)
            ref_tokens = test.targets[n].tolist()
            errors += token_errors(trace.tokens, ref_tokens)
            words += len(ref_tokens)
            if trace.steps:
                hyp = trace.latest_boundaries()
                worst = max(worst, max(r.spread for r in trace.steps))
                if refs[n].steps:
                    rel.append(relative_latency(hyp, refs[n].latest_boundaries()).rel_frames)
                rel_gold.append(relative_latency(hyp, test.boundaries[n].tolist()).rel_frames)
        rf = float(np.mean(rel)) if rel else float("nan")
        rg = float(np.mean(rel_gold)) if rel_gold else float("nan")
        rows.append(
            {
                "epsilon": int(eps),
                "token_error": errors / words,
                "rel_frames": rf,
                "rel_ms": to_milliseconds(rf, reduction_factor, shift_ms),
                "max_spread": int(worst),
                "rel_gold_frames": rg,
                "rel_gold_ms": to_milliseconds(rg, reduction_factor, shift_ms),
            }
        )
    return rows


def table_to_csv(rows: list, extra: dict | None = None) -> str:
    extra = extra or {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(extra) + list(TABLE_FIELDS))
    for row in rows:
        vals = [row[k] if isinstance(row[k], int) else repr(float(row[k])) for k in TABLE_FIELDS]
        w.writerow(list(extra.values()) + vals)
    return buf.getvalue()


# checkpoint files: a json header line, then one block per parameter:
#   param <name> <dims...>
#   <values of one leading-axis row per line, 17 significant digits>
CHECKPOINT_MAGIC = "mcmma-toy-checkpoint 1"


def save_checkpoint(ckpt: Checkpoint, path):
    header = {
        "model": ckpt.model.to_dict(),
        "task": ckpt.task.to_dict(),
        "train": asdict(ckpt.train),
        "epoch": ckpt.epoch,
        "accuracy": ckpt.accuracy,
    }
    lines = [CHECKPOINT_MAGIC, "config " + json.dumps(header, sort_keys=True)]
    for name, value in ckpt.params.named().items():
        lines.append("param " + " ".join([name] + [str(n) for n in value.shape]))
        rows = value.reshape(value.shape[0], -1) if value.ndim > 1 else value.reshape(1, -1)
        lines.extend(" ".join(f"{v:.17g}" for v in row) for row in rows)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> Checkpoint:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: line 1: not a toy checkpoint")
    if not lines[1].startswith("config "):
        raise ValueError(f"{path}: line 2: expected config header")
    header = json.loads(lines[1][len("config "):])
    arrays = {}
    n = 2
    while n < len(lines):
        parts = lines[n].split()
        if not parts or parts[0] != "param":
            raise ValueError(f"{path}: line {n + 1}: expected 'param <name> <dims>'")
        name, shape = parts[1], tuple(int(s) for s in parts[2:])
        nrows = shape[0] if len(shape) > 1 else 1
        try:
            vals = [float(v) for line in lines[n + 1 : n + 1 + nrows] for v in line.split()]
            arrays[name] = np.array(vals).reshape(shape)
        except ValueError as exc:
            raise ValueError(f"{path}: block starting line {n + 1}: {exc}") from None
        n += 1 + nrows
    return Checkpoint(
        params=tm.ToyModelParams(**arrays),
        model=tm.ToyConfig(**header["model"]),
        task=SyntheticTask(**header["task"]),
        train=TrainConfig(**header["train"]),
        epoch=header["epoch"],
        accuracy=header["accuracy"],
    )
