"""Desk-scale teacher/student comparison harness.

One teacher (d=128, 8 layers) is trained once; students (d=64, 4 layers)
are initialized by each method and trained on the same data order per seed.
Every run writes its MetricLog CSV into a cache directory keyed by the run
settings and a hash of this package's source, so an interrupted sweep
resumes and a code change forces fresh runs. The teacher has its own
directory keyed by the teacher-side settings only.
"""
import hashlib
import json
import logging
import os
import sysconfig
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint as ckpt_io
from .checkpoint import ModelConfig, random_init
from .corpus import ByteTokenizer, BatchStream, encode_corpus
from .initializers import guide_init, uniform_init
from .selection import select_layers
from .training import MetricLog, TrainConfig, train

log = logging.getLogger(__name__)

TEACHER = ModelConfig(d_model=128, num_layers=8, num_heads=8, head_dim=16, ffn_dim=512,
                      vocab_size=259, context_len=64)
STUDENT = ModelConfig(d_model=64, num_layers=4, num_heads=4, head_dim=16, ffn_dim=256,
                      vocab_size=259, context_len=64)

# cell name -> (init method, layer strategy, distill alpha)
CELLS = {
    "random": ("random", None, None),
    "uniform-1-layer": ("uniform", "top", None),
    "guide": ("guide", "top", None),
    "kd": ("random", None, 0.5),
    "guide+kd": ("guide", "top", 0.5),
    "guide-embed-only": ("guide", "embed-only", None),
    "guide-top+last": ("guide", "top+last", None),
    "guide-first-n": ("guide", "first-n", None),
}
ORDERING_CELLS = ("random", "uniform-1-layer", "guide", "kd", "guide+kd")
ABLATION_CELLS = ("guide-embed-only", "guide", "guide-top+last", "guide-first-n")


@dataclass
class DeskSettings:
    teacher_steps: int = 5000
    student_steps: int = 2000
    batch_size: int = 16
    teacher_lr: float = 2e-3
    student_lr: float = 2e-3
    eval_every: int = 250
    eval_batches: int = 16
    seeds: tuple = (0, 1, 2)
    teacher_seed: int = 1000
    corpus_bytes: int = 6_000_000
    teacher: ModelConfig = TEACHER
    student: ModelConfig = STUDENT


TEACHER_FIELDS = ("teacher_steps", "batch_size", "teacher_lr", "eval_every", "eval_batches",
                  "teacher_seed", "corpus_bytes", "teacher")


def source_digest():
    here = os.path.dirname(os.path.abspath(__file__))
    h = hashlib.sha256()
    for name in sorted(os.listdir(here)):
        if name.endswith(".py"):
            with open(os.path.join(here, name), "rb") as fh:
                h.update(name.encode())
                h.update(fh.read())
    return h.hexdigest()[:16]


def build_corpus(path, min_bytes=6_000_000, source_dir=None):
    """Write a plain-text corpus of at least ``min_bytes`` bytes to ``path``.

    The text is the concatenated Python standard library sources (sorted
    walk, test suites skipped), which gives several MB of natural-language
    comments, docstrings and code without any download.
    """
    source_dir = source_dir or sysconfig.get_paths()["stdlib"]
    written = 0
    tmp = path + ".tmp"
    with open(tmp, "wb") as out:
        for root, dirs, names in os.walk(source_dir):
            dirs[:] = sorted(d for d in dirs if d not in ("test", "tests", "site-packages",
                                                          "dist-packages", "__pycache__", "idlelib"))
            for name in sorted(names):
                if not name.endswith(".py"):
                    continue
                with open(os.path.join(root, name), "rb") as fh:
                    data = fh.read()
                out.write(data)
                written += len(data)
                if written >= min_bytes:
                    break
            if written >= min_bytes:
                break
    if written < min_bytes:
        os.remove(tmp)
        raise RuntimeError(f"only found {written} bytes of text under {source_dir}")
    os.replace(tmp, path)
    return path


@dataclass
class DeskExperiment:
    workdir: str
    settings: DeskSettings = field(default_factory=DeskSettings)

    def __post_init__(self):
        os.makedirs(self.workdir, exist_ok=True)
        self._tokens = None
        self._teacher = None

    @staticmethod
    def _hash(values):
        blob = json.dumps(values, sort_keys=True, default=str) + source_digest()
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def key(self):
        return self._hash(asdict(self.settings))

    @property
    def teacher_key(self):
        s = asdict(self.settings)
        return self._hash({k: s[k] for k in TEACHER_FIELDS})

    @property
    def run_dir(self):
        d = os.path.join(self.workdir, self.key)
        os.makedirs(d, exist_ok=True)
        return d

    @property
    def teacher_dir(self):
        # students may change without retraining the teacher
        d = os.path.join(self.workdir, "teacher-" + self.teacher_key)
        os.makedirs(d, exist_ok=True)
        return d

    @property
    def corpus_path(self):
        return os.path.join(self.workdir, "corpus.txt")

    def tokens(self):
        if self._tokens is None:
            if not os.path.exists(self.corpus_path):
                build_corpus(self.corpus_path, self.settings.corpus_bytes)
            self._tokens = encode_corpus([self.corpus_path], ByteTokenizer())
        return self._tokens

    def streams(self, seed):
        s = self.settings
        L = s.student.context_len
        train_stream = BatchStream(self.tokens(), L, s.batch_size, seed=seed, split="train")
        eval_stream = BatchStream(self.tokens(), L, s.batch_size, split="eval")
        return train_stream, eval_stream

    def teacher(self):
        if self._teacher is not None:
            return self._teacher
        s = self.settings
        path = os.path.join(self.teacher_dir, "teacher.ckpt")
        if os.path.exists(path):
            self._teacher = ckpt_io.load(path)
            return self._teacher
        log.info("training teacher for %d steps", s.teacher_steps)
        data, held_out = self.streams(s.teacher_seed)
        cfg = TrainConfig(steps=s.teacher_steps, lr=s.teacher_lr, eval_every=s.eval_every,
                          eval_batches=s.eval_batches, seed=s.teacher_seed)
        start = time.time()
        teacher, metrics = train(random_init(s.teacher, s.teacher_seed), None, data, cfg, held_out)
        log.info("teacher done in %.0fs, eval ppl %.3f", time.time() - start, metrics.final.eval_ppl)
        metrics.to_csv(os.path.join(self.teacher_dir, "teacher.csv"))
        ckpt_io.save(teacher, path + ".tmp")
        os.replace(path + ".tmp", path)
        self._teacher = teacher
        return teacher

    def init_student(self, cell, seed):
        method, strategy, _ = CELLS[cell]
        s = self.settings
        if method == "random":
            return random_init(s.student, seed)
        layers = select_layers(strategy, s.student.num_layers, s.teacher.num_layers)
        init = guide_init if method == "guide" else uniform_init
        student, _ = init(self.teacher(), s.student, layers, seed)
        return student

    def run_cell(self, cell, seed, use_cache=True):
        """Train one student; returns its MetricLog (read from cache when present)."""
        path = os.path.join(self.run_dir, f"{cell}_seed{seed}.csv")
        if use_cache and os.path.exists(path):
            return MetricLog.from_csv(path)
        s = self.settings
        alpha = CELLS[cell][2]
        student = self.init_student(cell, seed)
        data, held_out = self.streams(seed)
        cfg = TrainConfig(steps=s.student_steps, lr=s.student_lr, eval_every=s.eval_every,
                          eval_batches=s.eval_batches, distill_alpha=alpha, seed=seed)
        start = time.time()
        teacher = self.teacher() if alpha is not None else None
        _, metrics = train(student, teacher, data, cfg, held_out)
        log.info("%s seed %d: eval ppl %.3f (%.0fs)", cell, seed, metrics.final.eval_ppl,
                 time.time() - start)
        if use_cache:
            metrics.to_csv(path + ".tmp")
            os.replace(path + ".tmp", path)
            with open(path[:-4] + ".summary", "w") as fh:
                fh.write(metrics.summary_line() + "\n")
        return metrics

    def teacher_ppl(self):
        self.teacher()
        return MetricLog.from_csv(os.path.join(self.teacher_dir, "teacher.csv")).final.eval_ppl

    def sweep(self, cells):
        """{cell: [MetricLog per seed]} for the requested cells."""
        return {c: [self.run_cell(c, seed) for seed in self.settings.seeds] for c in cells}


def mean_final_ppl(logs):
    return float(np.mean([m.final.eval_ppl for m in logs]))


def mean_initial_ppl(logs):
    return float(np.mean([m.records[0].eval_ppl for m in logs]))
