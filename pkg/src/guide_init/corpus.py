"""Byte-level tokenizer and deterministic window batching."""
import hashlib
import math
import os

import numpy as np

from .checkpoint import DEFAULT_TOKENIZER
from .errors import InvalidInput

PAD, BOS, EOS = 0, 1, 2
BYTE_OFFSET = 3
BASE_VOCAB = 256 + BYTE_OFFSET


class ByteTokenizer:
    """Bytes map to ids 3..258 after PAD/BOS/EOS; every document starts with BOS.

    Optional extra tokens (from a vocab file, one token per line) get ids
    from 259 upward and are matched greedily, longest first.
    """

    def __init__(self, extra_tokens=()):
        self.extra = [t.encode("utf-8") if isinstance(t, str) else bytes(t) for t in extra_tokens]
        if any(len(t) < 2 for t in self.extra):
            raise InvalidInput("extra vocab tokens must be at least 2 bytes long")
        if len(set(self.extra)) != len(self.extra):
            raise InvalidInput("duplicate tokens in vocab file")
        self._lookup = {tok: BASE_VOCAB + i for i, tok in enumerate(self.extra)}
        self._max_len = max((len(t) for t in self.extra), default=1)

    @classmethod
    def from_vocab_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])

    @property
    def vocab_size(self):
        return BASE_VOCAB + len(self.extra)

    @property
    def fingerprint(self):
        if not self.extra:
            return DEFAULT_TOKENIZER
        digest = hashlib.sha256(b"\n".join(self.extra)).hexdigest()[:16]
        return f"byte-{self.vocab_size}-{digest}"

    def encode_bytes(self, data):
        data = bytes(data)
        if not self.extra:
            body = np.frombuffer(data, dtype=np.uint8).astype(np.int64) + BYTE_OFFSET
            return np.concatenate([[BOS], body]).astype(np.int64)
        ids = [BOS]
        i = 0
        while i < len(data):
            for size in range(min(self._max_len, len(data) - i), 1, -1):
                tok = self._lookup.get(data[i:i + size])
                if tok is not None:
                    ids.append(tok)
                    i += size
                    break
            else:
                ids.append(data[i] + BYTE_OFFSET)
                i += 1
        return np.asarray(ids, dtype=np.int64)

    def tokenize(self, text):
        return self.encode_bytes(text.encode("utf-8")).tolist()

    def detokenize(self, ids):
        out = bytearray()
        for i in ids:
            i = int(i)
            if i < 0 or i >= self.vocab_size:
                raise InvalidInput(f"token id {i} outside [0, {self.vocab_size})")
            if i >= BASE_VOCAB:
                out += self.extra[i - BASE_VOCAB]
            elif i >= BYTE_OFFSET:
                out.append(i - BYTE_OFFSET)
        return out.decode("utf-8", errors="replace")


def corpus_files(paths):
    """Expand directories (recursively, sorted) into a flat list of files."""
    files = []
    for p in paths:
        if os.path.isdir(p):
            for root, dirs, names in os.walk(p):
                dirs.sort()
                files.extend(os.path.join(root, n) for n in sorted(names))
        else:
            files.append(p)
    return files


def encode_corpus(paths, tokenizer=None):
    """Concatenate every file, as one document each, into a single id array."""
    tokenizer = tokenizer or ByteTokenizer()
    parts = []
    for path in corpus_files(paths):
        with open(path, "rb") as fh:
            parts.append(tokenizer.encode_bytes(fh.read()))
    if not parts:
        raise InvalidInput("corpus is empty")
    dtype = np.uint16 if tokenizer.vocab_size <= 65536 else np.int64
    return np.concatenate(parts).astype(dtype)


class BatchStream:
    """Contiguous ``context_len`` windows served ``batch_size`` at a time.

    ``split`` picks which windows are served: ``train`` (all but the last
    ``holdout`` fraction, reshuffled every epoch), ``eval`` (the last
    fraction, in order, never shuffled) or ``all``. A batch that runs past
    the end of an epoch continues into the next one, so each epoch still
    serves every window exactly once.
    """

    def __init__(self, tokens, context_len, batch_size, seed=0, split="train", holdout=0.05):
        tokens = np.asarray(tokens)
        if tokens.ndim != 1 or tokens.size == 0:
            raise InvalidInput("corpus is empty")
        if context_len < 1 or batch_size < 1:
            raise InvalidInput("context_len and batch_size must be positive")
        n = tokens.size // context_len
        if n == 0:
            raise InvalidInput(f"corpus ({tokens.size} tokens) shorter than one window of {context_len}")
        n_eval = min(n - 1, max(1, math.ceil(holdout * n))) if holdout > 0 and n > 1 else 0
        if split == "train":
            lo, hi = 0, n - n_eval
        elif split == "eval":
            if n_eval == 0:
                raise InvalidInput("no held-out windows")
            lo, hi = n - n_eval, n
        elif split == "all":
            lo, hi = 0, n
        else:
            raise InvalidInput(f"unknown split {split!r}")
        self.tokens = tokens
        self.context_len = context_len
        self.batch_size = batch_size
        self.seed = seed
        self.split = split
        self.holdout = holdout
        self.windows = np.arange(lo, hi)
        self.restart()

    @classmethod
    def from_files(cls, paths, context_len, batch_size, seed=0, split="train", tokenizer=None,
                   holdout=0.05):
        return cls(encode_corpus(paths, tokenizer), context_len, batch_size, seed, split, holdout)

    def restart(self):
        self.epoch = 0
        self._cursor = 0
        self._order = self._epoch_order(0)

    def fresh(self):
        """A new stream over the same windows, rewound to the start."""
        return BatchStream(self.tokens, self.context_len, self.batch_size, self.seed,
                           self.split, self.holdout)

    @property
    def num_windows(self):
        return self.windows.size

    def _epoch_order(self, epoch):
        if self.split == "eval":
            return self.windows
        return np.random.default_rng([self.seed, epoch]).permutation(self.windows)

    def next_windows(self):
        out = []
        while len(out) < self.batch_size:
            if self._cursor == self._order.size:
                self.epoch += 1
                self._cursor = 0
                self._order = self._epoch_order(self.epoch)
            take = min(self.batch_size - len(out), self._order.size - self._cursor)
            out.extend(self._order[self._cursor:self._cursor + take])
            self._cursor += take
        return np.asarray(out)

    def next_batch(self):
        starts = self.next_windows() * self.context_len
        idx = starts[:, None] + np.arange(self.context_len)
        return self.tokens[idx].astype(np.int64)
