"""CTC loss, brute-force oracle, best-path decoding, and alignments.

Frame scores are (T, C) float64 arrays with class 0 reserved for the blank.
``ctc_loss`` runs the standard log-space alpha recursion over the
blank-interleaved label, recorded on a tape so it is differentiable end to
end; ``ctc_loss_bruteforce`` enumerates every path and is the independent
oracle.  The recursion is vectorized over label states and, through
:func:`ctc_loss_graph`, over a whole batch of samples sharing one tape.

Impossible states use the finite sentinel ``NEG_LOG`` (-1e30) instead of
-inf so no non-finite value ever flows through a primitive.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Node, Tape

BLANK = 0
NEG_LOG = -1.0e30

Label = tuple[int, ...]


class CTCInfeasibleError(ValueError):
    """The label cannot be emitted in the available number of frames."""


def min_frames(label: Sequence[int]) -> int:
    """Fewest frames that can emit the label: |l| plus one per adjacent repeat."""
    label = tuple(label)
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def _check_label(label: Sequence[int], c: int) -> Label:
    label = tuple(int(s) for s in label)
    for s in label:
        if not 1 <= s < c:
            raise ValueError(f"label symbol {s} outside [1, {c - 1}]")
    return label


def log_softmax_frames(frames) -> np.ndarray:
    """Normalize raw (T, C) scores to per-row log-probabilities.

    Stable under large magnitudes (row max is subtracted first).
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected (T, C) frames, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("frame scores must be finite")
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_log_probs(lp) -> np.ndarray:
    lp = np.asarray(lp, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[0] < 1 or lp.shape[1] < 2:
        raise ValueError(f"expected (T>=1, C>=2) log-probs, got shape {lp.shape}")
    lse = np.log(np.exp(lp - lp.max(axis=1, keepdims=True)).sum(axis=1)) + lp.max(axis=1)
    if np.max(np.abs(lse)) > 1e-9:
        raise ValueError("rows are not normalized log-probabilities")
    return lp


def collapse(path: Sequence[int]) -> Label:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for p in path:
        p = int(p)
        if p != prev:
            if p != BLANK:
                out.append(p)
            prev = p
    return tuple(out)


def best_path_decode(lp) -> Label:
    """Greedy decode: per-frame argmax (ties to the lowest class), collapsed."""
    lp = np.asarray(lp, dtype=np.float64)
    return collapse(lp.argmax(axis=1))


def alignment(lp) -> list[int]:
    """The per-frame argmax path itself, before collapsing."""
    lp = np.asarray(lp, dtype=np.float64)
    return [int(i) for i in lp.argmax(axis=1)]


# ----------------------------------------------------------------------
# shared recursion, vectorized over states and samples


@dataclass
class CtcMasks:
    """Per-batch mask tensors that encode labels for the shared recursion.

    All label-dependent structure lives in these arrays, so one tape per
    (T, C, n, s_max) handles any batch of labels when they are bound as
    inputs, and a fixed-label tape simply bakes them in as constants.
    """

    t_frames: int
    c_classes: int
    n: int
    s_max: int
    sel: np.ndarray    # (n*C, s_max) one-hot emission selectors
    m2: np.ndarray     # (s_max, n) 0 where the skip transition is legal, else NEG_LOG
    init: np.ndarray   # (s_max, n) 0 at admissible start states, else NEG_LOG
    fin1: np.ndarray   # (s_max, n) one-hot of the last state
    fin2: np.ndarray   # (s_max, n) one-hot of the second-to-last state (if any)
    off2: np.ndarray   # (n,) 0, or NEG_LOG when there is no second-to-last state

    def as_bindings(self, prefix: str = "ctc") -> dict[str, np.ndarray]:
        return {f"{prefix}_sel": self.sel, f"{prefix}_m2": self.m2,
                f"{prefix}_init": self.init, f"{prefix}_fin1": self.fin1,
                f"{prefix}_fin2": self.fin2, f"{prefix}_off2": self.off2}


def ctc_masks(labels: Sequence[Sequence[int]], t_frames: int, c_classes: int,
              s_max: int | None = None) -> CtcMasks:
    """Build recursion masks for a batch of labels.

    Raises :class:`CTCInfeasibleError` for any label needing more than
    ``t_frames`` frames.
    """
    labels = [_check_label(l, c_classes) for l in labels]
    n = len(labels)
    for l in labels:
        need = min_frames(l)
        if need > t_frames:
            raise CTCInfeasibleError(
                f"label {l} needs {need} frames, only {t_frames} available")
    if s_max is None:
        s_max = max((2 * len(l) + 1 for l in labels), default=1)
    sel = np.zeros((n * c_classes, s_max))
    m2 = np.full((s_max, n), NEG_LOG)
    init = np.full((s_max, n), NEG_LOG)
    fin1 = np.zeros((s_max, n))
    fin2 = np.zeros((s_max, n))
    off2 = np.zeros(n)
    for i, l in enumerate(labels):
        ext = [BLANK]
        for s in l:
            ext.extend((s, BLANK))
        s_len = len(ext)
        if s_len > s_max:
            raise ValueError(f"label {l} exceeds s_max={s_max}")
        for s, cls in enumerate(ext):
            sel[i * c_classes + cls, s] = 1.0
        for s in range(2, s_len):
            if ext[s] != BLANK and ext[s] != ext[s - 2]:
                m2[s, i] = 0.0
        init[0, i] = 0.0
        if s_len > 1:
            init[1, i] = 0.0
        fin1[s_len - 1, i] = 1.0
        if s_len >= 2:
            fin2[s_len - 2, i] = 1.0
        else:
            off2[i] = NEG_LOG
    return CtcMasks(t_frames, c_classes, n, s_max, sel, m2, init, fin1, fin2, off2)


def ctc_loss_graph(tape: Tape, lsm_flat: Node, masks_nodes: dict[str, Node],
                   t_frames: int, c_classes: int, n: int, s_max: int) -> Node:
    """Append the alpha recursion to ``tape``; returns the (n,) loss vector.

    ``lsm_flat`` holds frame-major log-probability rows, shape (T*n, C):
    row ``t*n + i`` is frame t of sample i.  ``masks_nodes`` supplies the
    six :class:`CtcMasks` tensors as nodes (constants or bound inputs).
    """
    sel, m2 = masks_nodes["sel"], masks_nodes["m2"]
    init, fin1 = masks_nodes["init"], masks_nodes["fin1"]
    fin2, off2 = masks_nodes["fin2"], masks_nodes["off2"]

    emits = []
    for i in range(n):
        rows = tape.gather_rows(lsm_flat, range(i, t_frames * n, n))       # (T, C)
        sel_i = tape.gather_rows(sel, range(i * c_classes, (i + 1) * c_classes))
        emits.append(tape.matmul(rows, sel_i))                             # (T, s_max)
    emit = emits[0] if n == 1 else tape.concat(emits, axis=1)              # (T, n*s_max)
    # frame-major (T*s_max, n) so each frame's (s_max, n) block is one gather
    emit = tape.reshape(tape.transpose(tape.reshape(
        emit, (t_frames, n, s_max)), (0, 2, 1)), (t_frames * s_max, n))

    m1 = np.zeros((s_max, n))
    m1[0, :] = NEG_LOG
    m1c = tape.constant(m1)
    shift1_rows = [0] + list(range(s_max - 1))
    shift2_rows = [0, 1] + list(range(s_max - 2))

    alpha = None
    for t in range(t_frames):
        e_t = tape.gather_rows(emit, range(t * s_max, (t + 1) * s_max))    # (s_max, n)
        if alpha is None:
            alpha = tape.add(e_t, init)
            continue
        u = alpha
        if s_max >= 2:   # a single-state label has only the stay transition
            s1 = tape.add(tape.gather_rows(alpha, shift1_rows), m1c)
            s2 = tape.add(tape.gather_rows(alpha, shift2_rows), m2)
            u = tape.logaddexp(tape.logaddexp(u, s1), s2)
        alpha = tape.add(u, e_t)

    a_last = tape.sum(tape.mul(alpha, fin1), axis=0)                       # (n,)
    b_last = tape.add(tape.sum(tape.mul(alpha, fin2), axis=0), off2)
    return tape.smul(-1.0, tape.logaddexp(a_last, b_last))


def _masks_to_consts(tape: Tape, masks: CtcMasks) -> dict[str, Node]:
    return {"sel": tape.constant(masks.sel), "m2": tape.constant(masks.m2),
            "init": tape.constant(masks.init), "fin1": tape.constant(masks.fin1),
            "fin2": tape.constant(masks.fin2), "off2": tape.constant(masks.off2)}


def masks_input_nodes(tape: Tape, t_frames: int, c_classes: int, n: int,
                      s_max: int, prefix: str = "ctc") -> dict[str, Node]:
    """Declare the mask tensors as named tape inputs (for reusable tapes)."""
    return {"sel": tape.input(f"{prefix}_sel", (n * c_classes, s_max)),
            "m2": tape.input(f"{prefix}_m2", (s_max, n)),
            "init": tape.input(f"{prefix}_init", (s_max, n)),
            "fin1": tape.input(f"{prefix}_fin1", (s_max, n)),
            "fin2": tape.input(f"{prefix}_fin2", (s_max, n)),
            "off2": tape.input(f"{prefix}_off2", (n,))}


# ----------------------------------------------------------------------
# public single-instance operations


def _loss_tape(t_frames: int, c_classes: int, label: Label):
    tape = Tape()
    lp_in = tape.input("lp", (t_frames, c_classes))
    masks = ctc_masks([label], t_frames, c_classes)
    loss_vec = ctc_loss_graph(tape, lp_in, _masks_to_consts(tape, masks),
                              t_frames, c_classes, 1, masks.s_max)
    loss = tape.sum(loss_vec)
    return tape, loss


def ctc_loss(lp, label: Sequence[int]) -> float:
    """-log of the total probability of all paths collapsing to ``label``.

    ``lp`` is a (T, C) array of per-row log-probabilities.  Raises
    :class:`CTCInfeasibleError` when T is too small for the label rather
    than returning +inf.
    """
    lp = _check_log_probs(lp)
    t_frames, c_classes = lp.shape
    label = _check_label(label, c_classes)
    tape, loss = _loss_tape(t_frames, c_classes, label)
    (val,), _ = tape.run({"lp": lp}, [loss])
    return float(val)


def ctc_loss_bruteforce(lp, label: Sequence[int]) -> float:
    """Oracle for :func:`ctc_loss`: sums over every one of the C^T paths.

    Guarded to C^T <= 10^6; same feasibility contract as the real loss.
    """
    lp = _check_log_probs(lp)
    t_frames, c_classes = lp.shape
    label = _check_label(label, c_classes)
    if c_classes ** t_frames > 10 ** 6:
        raise ValueError(f"instance too large: {c_classes}^{t_frames} paths")
    if min_frames(label) > t_frames:
        raise CTCInfeasibleError(
            f"label {label} needs {min_frames(label)} frames, only {t_frames} available")
    total = None
    for path in itertools.product(range(c_classes), repeat=t_frames):
        if collapse(path) != label:
            continue
        logp = sum(lp[t, cls] for t, cls in enumerate(path))
        total = logp if total is None else np.logaddexp(total, logp)
    assert total is not None  # feasible labels always have at least one path
    return float(-total)
