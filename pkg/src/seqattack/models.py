"""Victim models: a 28x28 digit classifier and a CRNN-lite sequence reader.

Classifier: conv(1->8, 3x3 same) + relu + pool 2x2, conv(8->16) + relu +
pool 2x2, flatten(784), dense to 10 logits.

SeqNet: three 3x3 conv blocks (16/32/64 channels) with 2x2, 2x2 and twice
2x1 pooling bring a 32x100 input to a 2x25x64 feature map; each of the 25
columns is flattened to 128 features and fed to a tanh recurrence (hidden
64) run in both directions with summed outputs, then a dense head emits 11
per-frame logits (blank + digits 0..9).  T=25 frames, C=11 classes.

Forward passes are pure functions of (weights, input) and differentiable
through the tape, so trained models can be shared by concurrent attack
workers.  Training is plain Adam on cross entropy (classifier) or the CTC
loss (SeqNet).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import ctc
from .autodiff import AdamState, Node, Tape, adam_step, as_tensor
from .data import ImageSample, SeqSample

log = logging.getLogger(__name__)

KIND_CLASSIFIER = "classifier"
KIND_SEQNET = "seqnet"

SEQ_T = 25        # frames emitted per 32x100 input
SEQ_C = 11        # blank + 10 digits

_WEIGHT_SPECS = {
    KIND_CLASSIFIER: (
        ("conv1_w", (3, 3, 1, 8)), ("conv1_b", (8,)),
        ("conv2_w", (3, 3, 8, 16)), ("conv2_b", (16,)),
        ("fc_w", (784, 10)), ("fc_b", (1, 10)),
    ),
    KIND_SEQNET: (
        ("conv1_w", (3, 3, 1, 16)), ("conv1_b", (16,)),
        ("conv2_w", (3, 3, 16, 32)), ("conv2_b", (32,)),
        ("conv3_w", (3, 3, 32, 64)), ("conv3_b", (64,)),
        ("fwd_wx", (128, 64)), ("fwd_wh", (64, 64)), ("fwd_b", (1, 64)),
        ("bwd_wx", (128, 64)), ("bwd_wh", (64, 64)), ("bwd_b", (1, 64)),
        ("out_w", (64, 11)), ("out_b", (1, 11)),
    ),
}

INPUT_SHAPES = {KIND_CLASSIFIER: (28, 28), KIND_SEQNET: (32, 100)}


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class Model:
    kind: str
    weights: dict[str, np.ndarray]
    _caches: dict = field(default_factory=dict, repr=False, compare=False)

    def weight_list(self) -> list[np.ndarray]:
        return [self.weights[name] for name, _ in _WEIGHT_SPECS[self.kind]]


def weight_specs(kind: str) -> tuple[tuple[str, tuple], ...]:
    return _WEIGHT_SPECS[kind]


def glorot_bound(shape: tuple) -> float:
    """sqrt(6 / (fan_in + fan_out)); rank-1 and (1, n) tensors use fan_in=1."""
    if len(shape) == 4:
        kh, kw, ci, co = shape
        fan_in, fan_out = kh * kw * ci, kh * kw * co
    elif len(shape) == 2:
        fan_in, fan_out = shape
    else:
        fan_in, fan_out = 1, shape[0]
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_model(kind: str, seed: int) -> Model:
    """Fresh weights, uniform(-a, a) per tensor; deterministic per seed."""
    if kind not in _WEIGHT_SPECS:
        raise ValueError(f"unknown model kind {kind!r}")
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in _WEIGHT_SPECS[kind]:
        a = glorot_bound(shape)
        weights[name] = rng.uniform(-a, a, size=shape)
    return Model(kind, weights)


# ----------------------------------------------------------------------
# forward graphs


def classifier_graph(tape: Tape, x: Node, p: dict[str, Node]) -> Node:
    """x: (n, 28, 28, 1) -> logits (n, 10)."""
    n = x.shape[0]
    h = tape.maxpool2d(tape.relu(tape.conv2d(x, p["conv1_w"], p["conv1_b"])), (2, 2))
    h = tape.maxpool2d(tape.relu(tape.conv2d(h, p["conv2_w"], p["conv2_b"])), (2, 2))
    flat = tape.reshape(h, (n, 784))
    return tape.matmul(flat, p["fc_w"]) + tape.repeat_rows(p["fc_b"], n)


def seqnet_graph(tape: Tape, x: Node, p: dict[str, Node]) -> Node:
    """x: (n, 32, 100, 1) -> frame-major logits (SEQ_T * n, 11).

    Row t*n + i holds frame t of sample i, matching the layout
    :func:`seqattack.ctc.ctc_loss_graph` consumes.
    """
    n = x.shape[0]
    h = tape.maxpool2d(tape.relu(tape.conv2d(x, p["conv1_w"], p["conv1_b"])), (2, 2))
    h = tape.maxpool2d(tape.relu(tape.conv2d(h, p["conv2_w"], p["conv2_b"])), (2, 2))
    h = tape.relu(tape.conv2d(h, p["conv3_w"], p["conv3_b"]))
    h = tape.maxpool2d(tape.maxpool2d(h, (2, 1)), (2, 1))        # (n, 2, 25, 64)
    cols = tape.reshape(tape.transpose(h, (2, 0, 1, 3)), (SEQ_T, n * 128))
    xs = [tape.reshape(tape.gather_rows(cols, [t]), (n, 128)) for t in range(SEQ_T)]

    def recur(wx: Node, wh: Node, b: Node, order) -> list[Node]:
        b_rep = tape.repeat_rows(b, n)
        h_t = tape.constant(np.zeros((n, 64)))
        states: dict[int, Node] = {}
        for t in order:
            h_t = tape.tanh(tape.matmul(xs[t], wx) + tape.matmul(h_t, wh) + b_rep)
            states[t] = h_t
        return [states[t] for t in range(SEQ_T)]

    fwd = recur(p["fwd_wx"], p["fwd_wh"], p["fwd_b"], range(SEQ_T))
    bwd = recur(p["bwd_wx"], p["bwd_wh"], p["bwd_b"], range(SEQ_T - 1, -1, -1))
    ob_rep = tape.repeat_rows(p["out_b"], n)
    frames = [tape.matmul(fwd[t] + bwd[t], p["out_w"]) + ob_rep for t in range(SEQ_T)]
    return frames[0] if SEQ_T == 1 else tape.concat(frames, axis=0)


_GRAPHS = {KIND_CLASSIFIER: classifier_graph, KIND_SEQNET: seqnet_graph}


def params_as_constants(tape: Tape, model: Model) -> dict[str, Node]:
    return {name: tape.constant(w) for name, w in model.weights.items()}


def params_as_inputs(tape: Tape, kind: str) -> dict[str, Node]:
    return {name: tape.input(name, shape) for name, shape in _WEIGHT_SPECS[kind]}


def _forward_tape(model: Model, batch: int):
    key = ("fwd", batch)
    cached = model._caches.get(key)
    if cached is None:
        h, w = INPUT_SHAPES[model.kind]
        tape = Tape()
        x = tape.input("x", (batch, h, w, 1))
        out = _GRAPHS[model.kind](tape, x, params_as_constants(tape, model))
        cached = (tape, out)
        model._caches[key] = cached
    return cached


def _check_image(x, kind: str) -> np.ndarray:
    x = as_tensor(x)
    expect = INPUT_SHAPES[kind]
    if x.shape != expect:
        raise ValueError(f"expected image shape {expect}, got {x.shape}")
    if x.min() < -1.0 or x.max() > 1.0:
        raise ValueError("image entries must lie in [-1, 1]")
    return x


def forward_class(model: Model, x) -> np.ndarray:
    """Logits (10,) for one 28x28 image in [-1, 1]."""
    if model.kind != KIND_CLASSIFIER:
        raise ValueError(f"forward_class on model kind {model.kind!r}")
    x = _check_image(x, model.kind)
    tape, out = _forward_tape(model, 1)
    (logits,), _ = tape.run({"x": x.reshape(1, 28, 28, 1)}, [out])
    return logits[0]


def forward_seq(model: Model, x) -> np.ndarray:
    """FrameLogits (25, 11) for one 32x100 image in [-1, 1]."""
    if model.kind != KIND_SEQNET:
        raise ValueError(f"forward_seq on model kind {model.kind!r}")
    x = _check_image(x, model.kind)
    tape, out = _forward_tape(model, 1)
    (logits,), _ = tape.run({"x": x.reshape(1, 32, 100, 1)}, [out])
    return logits


def _batched_logits(model: Model, images: list[np.ndarray]) -> list[np.ndarray]:
    """Forward a list of images through cached fixed-size batch tapes."""
    h, w = INPUT_SHAPES[model.kind]
    out: list[np.ndarray] = []
    pos = 0
    step = 64
    while pos < len(images):
        chunk = images[pos:pos + step]
        n = len(chunk)
        tape, node = _forward_tape(model, n)
        x = np.stack([as_tensor(im) for im in chunk]).reshape(n, h, w, 1)
        (logits,), _ = tape.run({"x": x}, [node])
        if model.kind == KIND_CLASSIFIER:
            out.extend(logits[i] for i in range(n))
        else:
            out.extend(logits[i::n] for i in range(n))
        pos += step
    return out


def predict_class(model: Model, x) -> int:
    return int(np.argmax(forward_class(model, x)))


def decode_seq(model: Model, x) -> tuple[int, ...]:
    """Best-path decode of one image, as digits 0..9."""
    return label_to_digits(ctc.best_path_decode(forward_seq(model, x)))


def digits_to_label(digits) -> tuple[int, ...]:
    """Digits 0..9 -> CTC classes 1..10 (0 is the blank)."""
    return tuple(int(d) + 1 for d in digits)


def label_to_digits(label) -> tuple[int, ...]:
    return tuple(int(s) - 1 for s in label)


def evaluate_classifier(model: Model, samples: list[ImageSample]) -> float:
    logits = _batched_logits(model, [s.pixels for s in samples])
    hits = sum(int(np.argmax(lg)) == s.label for lg, s in zip(logits, samples))
    return hits / len(samples)


def evaluate_seqnet(model: Model, samples: list[SeqSample]) -> float:
    """Exact-sequence accuracy: the full decoded string must match."""
    logits = _batched_logits(model, [s.pixels for s in samples])
    hits = sum(label_to_digits(ctc.best_path_decode(lg)) == tuple(s.label)
               for lg, s in zip(logits, samples))
    return hits / len(samples)


# ----------------------------------------------------------------------
# training


def _classifier_train_tape(kind: str, batch: int):
    tape = Tape()
    x = tape.input("x", (batch, 28, 28, 1))
    y = tape.input("y", (batch, 10))
    params = params_as_inputs(tape, kind)
    logits = classifier_graph(tape, x, params)
    lsm = tape.log_softmax(logits)
    loss = tape.smul(-1.0 / batch, tape.sum(lsm * y))
    return tape, logits, loss


def _seqnet_train_tape(kind: str, batch: int, s_max: int):
    tape = Tape()
    x = tape.input("x", (batch, 32, 100, 1))
    params = params_as_inputs(tape, kind)
    logits = seqnet_graph(tape, x, params)
    lsm = tape.log_softmax(logits)
    masks = ctc.masks_input_nodes(tape, SEQ_T, SEQ_C, batch, s_max)
    loss_vec = ctc.ctc_loss_graph(tape, lsm, masks, SEQ_T, SEQ_C, batch, s_max)
    loss = tape.smul(1.0 / batch, tape.sum(loss_vec))
    return tape, logits, loss


def train(model: Model, dataset, epochs: int, lr: float = 1e-3,
          batch_size: int = 32, seed: int = 0) -> Model:
    """Adam training; returns a new model, input model untouched.

    Shuffling is a fixed permutation stream per seed, so training is
    deterministic.  A non-finite loss aborts with diagnostics.
    """
    new = Model(model.kind, {k: v.copy() for k, v in model.weights.items()})
    if epochs <= 0:
        return new
    if not dataset:
        raise ValueError("empty training dataset")
    names = [name for name, _ in _WEIGHT_SPECS[new.kind]]
    state = AdamState.for_params(new.weight_list(), lr=lr)
    rng = np.random.default_rng(seed)
    tapes: dict[int, tuple] = {}
    s_max = 2 * 6 + 1

    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(dataset))
        total_loss = 0.0
        hits = 0
        seen = 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            batch = [dataset[i] for i in idx]
            n = len(batch)
            if model.kind == KIND_CLASSIFIER:
                if n not in tapes:
                    tapes[n] = _classifier_train_tape(new.kind, n)
                tape, logits_node, loss_node = tapes[n]
                x = np.stack([s.pixels for s in batch]).reshape(n, 28, 28, 1)
                y = np.zeros((n, 10))
                y[np.arange(n), [s.label for s in batch]] = 1.0
                bindings = {"x": x, "y": y}
            else:
                if n not in tapes:
                    tapes[n] = _seqnet_train_tape(new.kind, n, s_max)
                tape, logits_node, loss_node = tapes[n]
                x = np.stack([s.pixels for s in batch]).reshape(n, 32, 100, 1)
                labels = [digits_to_label(s.label) for s in batch]
                masks = ctc.ctc_masks(labels, SEQ_T, SEQ_C, s_max=s_max)
                bindings = {"x": x}
                bindings.update(masks.as_bindings())
            bindings.update(new.weights)
            (logits, loss_val), grads = tape.run(
                bindings, [logits_node, loss_node], grad_of=loss_node, wrt=names)
            loss_val = float(loss_val)
            if not np.isfinite(loss_val):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {start // batch_size}")
            new_params, state = adam_step(
                new.weight_list(), [grads[nm] for nm in names], state)
            new.weights = dict(zip(names, new_params))
            total_loss += loss_val * n
            seen += n
            if model.kind == KIND_CLASSIFIER:
                hits += int((logits.argmax(axis=1) == np.array(
                    [s.label for s in batch])).sum())
            else:
                for i, s in enumerate(batch):
                    dec = ctc.best_path_decode(logits[i::n])
                    hits += int(label_to_digits(dec) == tuple(s.label))
        new._caches.clear()
        log.info("epoch %d/%d loss %.4f acc %.4f",
                 epoch, epochs, total_loss / seen, hits / seen)
    return new
