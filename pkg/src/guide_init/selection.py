"""Evenly spaced index generation, uniform weight selection, layer mappings."""
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput


def evenly_spaced_indices(m, n):
    """``m`` indices spread evenly over ``range(n)``, always including both ends.

    Index k is ``k * (n - 1) / (m - 1)`` rounded to the nearest integer with
    exact halves rounded down. Integer arithmetic keeps the half-way test exact.

    >>> evenly_spaced_indices(3, 4)
    [0, 1, 3]
    """
    m, n = int(m), int(n)
    if m < 1 or m > n:
        raise InvalidInput(f"need 1 <= m <= n, got m={m}, n={n}")
    if m == 1:
        return [0]
    den = m - 1
    # round-half-down(num / den) == ceil((2 num - den) / (2 den))
    return [-((den - 2 * k * (n - 1)) // (2 * den)) for k in range(m)]


@dataclass(frozen=True)
class IndexSelection:
    D: list
    D_h: list
    H: list
    F: list

    @classmethod
    def between(cls, student, teacher):
        return cls(
            D=evenly_spaced_indices(student.d_model, teacher.d_model),
            D_h=evenly_spaced_indices(student.head_dim, teacher.head_dim),
            H=evenly_spaced_indices(student.num_heads, teacher.num_heads),
            F=evenly_spaced_indices(student.ffn_dim, teacher.ffn_dim),
        )


def uniform_select(tensor, target_shape):
    tensor = np.asarray(tensor)
    target_shape = tuple(int(s) for s in target_shape)
    if len(target_shape) != tensor.ndim:
        raise InvalidInput(f"target rank {len(target_shape)} != tensor rank {tensor.ndim}")
    for t, s in zip(target_shape, tensor.shape):
        if t > s:
            raise InvalidInput(f"target shape {target_shape} exceeds source {tensor.shape}")
    index = [evenly_spaced_indices(t, s) for t, s in zip(target_shape, tensor.shape)]
    return tensor[np.ix_(*index)].copy()


EMBED_ONLY = "embed-only"
TOP = "top"
TOP_PLUS_LAST = "top+last"
TOP_K = "k-even"
FIRST_N = "first-n"
STRATEGIES = (EMBED_ONLY, TOP, TOP_PLUS_LAST, TOP_K, FIRST_N)


@dataclass(frozen=True)
class LayerSelection:
    strategy: str
    mapping: tuple  # ((student_layer, teacher_layer), ...)

    def teacher_for(self, student_layer):
        for s, t in self.mapping:
            if s == student_layer:
                return t
        return None


def select_layers(strategy, n_student, n_teacher, k=None):
    """Pair student blocks with teacher blocks.

    ``top`` is ``k-even`` with k=1: only the first block (the one reading the
    embedding table) is mapped. ``k-even`` always pins student block 0 to
    teacher block 0 and spreads the remaining pairs evenly.
    """
    if n_student > n_teacher:
        raise InvalidInput(f"student has more layers ({n_student}) than teacher ({n_teacher})")
    if strategy == EMBED_ONLY:
        mapping = ()
    elif strategy in (TOP, TOP_K):
        k = 1 if strategy == TOP else k
        if k is None or k < 1 or k > n_student:
            raise InvalidInput(f"k must be in [1, {n_student}], got {k}")
        mapping = tuple(zip(evenly_spaced_indices(k, n_student), evenly_spaced_indices(k, n_teacher)))
    elif strategy == TOP_PLUS_LAST:
        if n_student < 2:
            raise InvalidInput("top+last needs a student with at least 2 layers")
        mapping = ((0, 0), (n_student - 1, n_teacher - 1))
    elif strategy == FIRST_N:
        mapping = tuple((i, i) for i in range(n_student))
    else:
        raise InvalidInput(f"unknown layer strategy {strategy!r}")
    return LayerSelection(strategy, mapping)
