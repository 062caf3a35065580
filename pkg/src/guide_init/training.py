"""Training loop with optional frozen-teacher distillation, evaluation, metrics."""
import csv
import ctypes
import functools
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .checkpoint import Checkpoint
from .errors import ConfigMismatch, DivergenceError, InvalidInput
from .transformer import forward, log_softmax, loss_and_grads

log = logging.getLogger(__name__)

CSV_FIELDS = ("step", "train_loss", "eval_loss", "eval_ppl", "clip_events")


@functools.lru_cache(maxsize=None)
def _tune_allocator():
    # Large numpy temporaries otherwise go through mmap/munmap on every step,
    # and the page faults cost ~40% of step time.
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
        libc.mallopt(-2, 256 << 20)  # M_TOP_PAD
    except (OSError, AttributeError):
        pass


@dataclass
class TrainConfig:
    steps: int
    lr: float = 1e-3
    warmup_steps: Optional[int] = None  # default: 5% of steps
    min_lr_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    distill_alpha: Optional[float] = None
    eval_every: int = 250
    eval_batches: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidInput("steps must be >= 1")
        if self.distill_alpha is not None and not 0.0 <= self.distill_alpha <= 1.0:
            raise InvalidInput("distill_alpha must lie in [0, 1]")
        if self.eval_every < 1 or self.eval_batches < 1:
            raise InvalidInput("eval_every and eval_batches must be >= 1")

    @property
    def warmup(self):
        if self.warmup_steps is not None:
            return self.warmup_steps
        return max(1, round(0.05 * self.steps))

    def lr_at(self, step):
        """Learning rate for update number ``step`` (1-based)."""
        warm = self.warmup
        if warm > 0 and step <= warm:
            return self.lr * step / warm
        floor = self.lr * self.min_lr_ratio
        progress = (step - warm) / max(1, self.steps - warm)
        return floor + (self.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


@dataclass
class EvalRecord:
    step: int
    train_loss: float
    eval_loss: float
    eval_ppl: float
    clip_events: int


@dataclass
class MetricLog:
    records: list = field(default_factory=list)
    total_losses: list = field(default_factory=list)
    pred_losses: list = field(default_factory=list)
    distill_losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def final(self):
        return self.records[-1]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_FIELDS)
            for r in self.records:
                writer.writerow([r.step, repr(float(r.train_loss)), repr(float(r.eval_loss)),
                                 repr(float(r.eval_ppl)), r.clip_events])

    @classmethod
    def from_csv(cls, path):
        out = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CSV_FIELDS:
                raise InvalidInput(f"{path}: expected columns {CSV_FIELDS}")
            for row in reader:
                out.records.append(EvalRecord(int(row["step"]), float(row["train_loss"]),
                                              float(row["eval_loss"]), float(row["eval_ppl"]),
                                              int(row["clip_events"])))
        return out

    def summary_line(self):
        return "summary " + " ".join(f"{k}={v}" for k, v in self.summary.items())


def evaluate(ckpt, data, num_batches):
    """Mean next-token NLL over every predicted position, and exp of it."""
    if num_batches < 1:
        raise InvalidInput("num_batches must be >= 1")
    total, count = 0.0, 0
    for _ in range(num_batches):
        tokens = data.next_batch()
        logits = forward(ckpt, tokens).logits[:, :-1]
        logp = log_softmax(logits)
        picked = np.take_along_axis(logp, tokens[:, 1:, None], axis=-1)
        total -= float(picked.sum(dtype=np.float64))
        count += picked.size
    nll = total / count
    return nll, math.exp(nll) if nll < 700 else math.inf


def gap_reduction(student_ppl, baseline_ppl, teacher_ppl):
    """Percent of the baseline-to-teacher perplexity gap closed by the student."""
    denom = baseline_ppl - teacher_ppl
    if not denom > 0:
        raise InvalidInput(f"baseline perplexity ({baseline_ppl}) must exceed teacher's ({teacher_ppl})")
    return 100.0 * (baseline_ppl - student_ppl) / denom


def _check_pair(student, teacher):
    s, t = student.config, teacher.config
    if s.vocab_size != t.vocab_size or s.context_len != t.context_len:
        raise ConfigMismatch("student and teacher must share vocab size and context length")
    if student.tokenizer != teacher.tokenizer:
        raise ConfigMismatch(f"tokenizer mismatch: {student.tokenizer} vs {teacher.tokenizer}")


def train(student, teacher, data, cfg, eval_data=None):
    """Run ``cfg.steps`` AdamW updates; returns (new Checkpoint, MetricLog).

    With ``cfg.distill_alpha`` set, each step adds alpha times the
    cross-entropy from the frozen teacher's token distribution. Evaluation
    runs at step 0, every ``eval_every`` steps and at the last step, each time
    on the same leading batches of ``eval_data``.
    """
    _tune_allocator()
    alpha = cfg.distill_alpha
    if alpha is not None:
        if teacher is None:
            raise InvalidInput("distillation requested but no teacher supplied")
        _check_pair(student, teacher)
        teacher_digest = teacher.digest()
    config = student.config
    params = {k: np.array(v, dtype=np.float32) for k, v in student.tensors().items()}
    moment1 = {k: np.zeros_like(v) for k, v in params.items()}
    moment2 = {k: np.zeros_like(v) for k, v in params.items()}
    decay = {k: v.ndim >= 2 for k, v in params.items()}
    metrics = MetricLog()
    clip_events = 0
    since_eval = []

    def current():
        return Checkpoint.from_tensors(config, params, student.step, student.tokenizer)

    def record(step):
        train_loss = float(np.mean(since_eval)) if since_eval else float("nan")
        since_eval.clear()
        if eval_data is None:
            metrics.records.append(EvalRecord(step, train_loss, float("nan"), float("nan"), clip_events))
            return
        nll, ppl = evaluate(current(), eval_data.fresh(), cfg.eval_batches)
        metrics.records.append(EvalRecord(step, train_loss, nll, ppl, clip_events))
        log.info("step %d train %.4f eval %.4f ppl %.3f", step, train_loss, nll, ppl)

    record(0)
    b1, b2 = cfg.beta1, cfg.beta2
    for step in range(1, cfg.steps + 1):
        tokens = data.next_batch()
        teacher_logits = forward(teacher, tokens).logits if alpha is not None else None
        parts, grads = loss_and_grads(current(), tokens, teacher_logits, alpha or 0.0)
        if not math.isfinite(parts.total):
            log.error("loss diverged at step %d: %r", step, parts.total)
            raise DivergenceError(step, parts.total)
        gnorm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        if not math.isfinite(gnorm):
            log.error("gradient overflowed at step %d (loss %r)", step, parts.total)
            raise DivergenceError(step, gnorm, "gradient norm")
        scale = 1.0
        if gnorm > cfg.clip_norm:
            scale = cfg.clip_norm / gnorm
            clip_events += 1
        lr = cfg.lr_at(step)
        c1, c2 = 1.0 - b1 ** step, 1.0 - b2 ** step
        for name, p in params.items():
            g = grads[name] * np.float32(scale)
            m, v = moment1[name], moment2[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
            if decay[name]:
                update += cfg.weight_decay * p
            p -= np.float32(lr) * update.astype(np.float32)
        metrics.total_losses.append(parts.total)
        metrics.pred_losses.append(parts.pred)
        metrics.distill_losses.append(parts.distill)
        metrics.grad_norms.append(gnorm)
        since_eval.append(parts.total)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            record(step)

    if alpha is not None and teacher.digest() != teacher_digest:
        raise AssertionError("teacher checkpoint was modified during training")
    out = Checkpoint.from_tensors(config, params, student.step + cfg.steps, student.tokenizer)
    final = metrics.final
    metrics.summary = {
        "steps": cfg.steps,
        "lr": cfg.lr,
        "alpha": alpha if alpha is not None else "none",
        "seed": cfg.seed,
        "final_eval_loss": f"{final.eval_loss:.6f}",
        "final_eval_ppl": f"{final.eval_ppl:.6f}",
        "clip_events": clip_events,
    }
    return out, metrics
