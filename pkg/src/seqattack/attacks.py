"""Targeted attacks on the victim models.

Three methods share one optimization loop over the tanh reparameterization
x' = tanh(w):

* ``attack_fixed``: minimize TaskLoss(x', l') + lam * ||x - x'||^2 with Adam
  at a fixed trade-off weight.
* ``attack_binary``: repeat ``attack_fixed`` under a log-scale search over
  lam in [0.01, 1000]; success raises lam (press for a smaller
  perturbation), failure lowers it.
* ``attack_adaptive``: learn the trade-off on the fly by descending jointly
  in (w, eta1, eta2), where eta_i = log(lambda_i^2) are per-task
  log-variances; no search step at all.

TaskLoss is targeted cross entropy for the classifier and the CTC loss for
the sequence model.  Success means greedy best-path decoding (argmax of the
classifier) emits exactly the target.  Among all successful iterates the
minimum-distance one is returned.  All returned adversarial images lie
strictly inside (-1, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ctc, models
from .autodiff import AdamState, NonFiniteGradientError, Tape, adam_step, as_tensor

W_CLIP = 18.0        # |tanh(18)| < 1 - 1e-15: iterates stay strictly interior
ARCTANH_EPS = 1e-6

# An iteration counts as an improvement only when it beats the previous mark
# by a relative margin, the early-stop convention of the C&W optimizer this
# baseline descends from; exact comparison lets sub-1e-4 drift stall the
# stop for thousands of iterations.
IMPROVE_TOL = 1e-4

# Stall counting is armed only after Adam's moment estimates settle; the
# first steps routinely bump the objective while the second moment warms
# up, and a k=1 stop must not trigger on that transient.
STALL_WARMUP = 20


class AttackPreconditionError(ValueError):
    """The attack's entry contract is violated (bad target, wrong decode)."""


@dataclass(frozen=True)
class AttackConfig:
    """Hyper-parameters shared by all attack methods.

    ``max_iters`` of None resolves per method and task: 2000 for classifier
    runs, 10000 for standalone fixed-lambda sequence runs, and always 2000
    per binary-search step.  ``early_stop_k`` of None resolves to 20 for the
    fixed/binary baselines and 1 for the adaptive method.  The default
    learning rate is tuned so desk-scale attacks of every method converge
    inside those budgets.
    """

    learning_rate: float = 0.04
    max_iters: int | None = None
    early_stop_k: int | None = None
    lam_lo: float = 0.01
    lam_hi: float = 1000.0
    lam_init: float = 0.1
    search_steps: int = 3
    n_paths: int = 2
    path_floor: float = 0.1
    eta_init: float = 0.0
    eta_clamp: tuple[float, float] = (-10.0, 10.0)
    general_n: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.lam_lo <= 0 or self.lam_hi <= 0 or self.lam_init <= 0:
            raise ValueError("lambda bounds must be positive")
        if not 0.0 < self.path_floor < 1.0:
            raise ValueError("path_floor must lie in (0, 1)")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.early_stop_k is not None and self.early_stop_k < 1:
            raise ValueError("early_stop_k must be >= 1")


@dataclass
class TraceRecord:
    iteration: int
    objective: float
    l2: float
    task_loss: float
    eta1: float
    eta2: float
    decoded: str
    alignment: list[int]


@dataclass
class AttackResult:
    success: bool
    x_adv: np.ndarray
    l2: float
    iterations: int
    trace: list[TraceRecord] | None = None


def init_w(x) -> np.ndarray:
    """arctanh of the clamped image, so tanh(w) reproduces x almost exactly."""
    x = as_tensor(x)
    return np.arctanh(np.clip(x, -1.0 + ARCTANH_EPS, 1.0 - ARCTANH_EPS))


def _decode_digits(model: models.Model, x) -> tuple[int, ...] | int:
    if model.kind == models.KIND_CLASSIFIER:
        return models.predict_class(model, x)
    return models.decode_seq(model, x)


# ----------------------------------------------------------------------
# objective graphs


@dataclass
class _Graph:
    tape: Tape
    obj: object
    task: object
    l2sq: object
    logits: object
    adaptive: bool


def _build_graph(model: models.Model, x: np.ndarray, target, adaptive: bool,
                 cfg: AttackConfig) -> _Graph:
    h, w_dim = models.INPUT_SHAPES[model.kind]
    tape = Tape()
    w = tape.input("w", (h, w_dim))
    xa = tape.tanh(w)
    xc = tape.constant(np.clip(as_tensor(x), -1.0, 1.0))
    l2sq = tape.sum(tape.square(xa - xc))
    params = models.params_as_constants(tape, model)
    x4 = tape.reshape(xa, (1, h, w_dim, 1))
    if model.kind == models.KIND_CLASSIFIER:
        logits = models.classifier_graph(tape, x4, params)
        onehot = np.zeros((1, 10))
        onehot[0, int(target)] = 1.0
        task = tape.smul(-1.0, tape.sum(tape.log_softmax(logits) * tape.constant(onehot)))
    else:
        logits = models.seqnet_graph(tape, x4, params)
        label = models.digits_to_label(target)
        masks = ctc.ctc_masks([label], models.SEQ_T, models.SEQ_C)
        task = tape.sum(ctc.ctc_loss_graph(
            tape, tape.log_softmax(logits), ctc._masks_to_consts(tape, masks),
            models.SEQ_T, models.SEQ_C, 1, masks.s_max))

    if not adaptive:
        lam = tape.input("lam", ())
        obj = task + tape.mul(lam, l2sq)
    else:
        eta1 = tape.input("eta1", ())
        eta2 = tape.input("eta2", ())
        e1 = tape.exp(-eta1)
        e2 = tape.exp(-eta2)
        if model.kind == models.KIND_CLASSIFIER:
            obj = tape.mul(e1, tape.smul(0.5, l2sq)) + tape.mul(e2, task) + eta1 + eta2
        elif cfg.general_n:
            n, c = cfg.n_paths, cfg.path_floor
            extra = (math.log(n) - (n - 1) * math.log(c)) / n
            obj = (tape.mul(e1, tape.smul(0.5, l2sq))
                   + tape.mul(e2, tape.smul(1.0 / n, task))
                   + eta1 + tape.smul(float(models.SEQ_T), eta2)
                   + tape.smul(extra, e2))
        else:
            obj = (tape.mul(e1, l2sq) + tape.mul(e2, task)
                   + eta1 + tape.smul(float(models.SEQ_T), eta2) + e2)
    return _Graph(tape, obj, task, l2sq, logits, adaptive)


def basic_objective(model: models.Model, w, x, target, lam: float) -> float:
    """TaskLoss(tanh(w), target) + lam * ||x - tanh(w)||^2."""
    if lam <= 0:
        raise ValueError("lam must be positive")
    g = _build_graph(model, x, target, adaptive=False, cfg=AttackConfig())
    (val,), _ = g.tape.run({"w": as_tensor(w), "lam": float(lam)}, [g.obj])
    return float(val)


def adaptive_objective_nonseq(model: models.Model, w, x, target: int,
                              eta1: float, eta2: float) -> float:
    """exp(-eta1) * ||x - x'||^2 / 2 + exp(-eta2) * CE + eta1 + eta2."""
    if model.kind != models.KIND_CLASSIFIER:
        raise ValueError("non-sequential objective requires a classifier")
    g = _build_graph(model, x, target, adaptive=True, cfg=AttackConfig())
    (val,), _ = g.tape.run(
        {"w": as_tensor(w), "eta1": float(eta1), "eta2": float(eta2)}, [g.obj])
    return float(val)


def adaptive_objective_seq(model: models.Model, w, x, target, eta1: float,
                           eta2: float, general_n: bool = False,
                           n_paths: int = 2, path_floor: float = 0.1) -> float:
    """Sequence objective, default form:

        exp(-eta1) * ||x - x'||^2 + exp(-eta2) * CTC + eta1 + T*eta2 + exp(-eta2)

    With ``general_n``, the n-path bound replaces it:

        exp(-eta1) * ||x - x'||^2 / 2 + exp(-eta2) * CTC / n
        + eta1 + T*eta2 + exp(-eta2) * (log n - (n-1) log c) / n
    """
    if model.kind != models.KIND_SEQNET:
        raise ValueError("sequential objective requires a sequence model")
    cfg = AttackConfig(general_n=general_n, n_paths=n_paths, path_floor=path_floor)
    g = _build_graph(model, x, target, adaptive=True, cfg=cfg)
    (val,), _ = g.tape.run(
        {"w": as_tensor(w), "eta1": float(eta1), "eta2": float(eta2)}, [g.obj])
    return float(val)


# ----------------------------------------------------------------------
# optimization loop


def _target_str(target) -> str:
    if isinstance(target, int):
        return str(target)
    return "".join(str(d) for d in target)


def _decode_logits(model_kind: str, logits: np.ndarray):
    if model_kind == models.KIND_CLASSIFIER:
        return int(np.argmax(logits[0]))
    return models.label_to_digits(ctc.best_path_decode(logits))


def _align_logits(model_kind: str, logits: np.ndarray) -> list[int]:
    if model_kind == models.KIND_CLASSIFIER:
        return [int(np.argmax(logits[0]))]
    return ctc.alignment(logits)


def _optimize(g: _Graph, model_kind: str, x: np.ndarray, target, cfg: AttackConfig,
              lam: float | None, max_iters: int, k: int, want_trace: bool,
              trace: list[TraceRecord] | None, iter_base: int):
    """Adam descent with best-objective early stopping.

    Returns (steps_taken, best_success) where best_success is
    (l2, x_adv) for the minimum-distance successful iterate, or None.
    """
    w = init_w(x)
    if g.adaptive:
        eta1 = np.asarray(float(cfg.eta_init))
        eta2 = np.asarray(float(cfg.eta_init))
        params = [w, eta1, eta2]
        wrt = ["w", "eta1", "eta2"]
    else:
        params = [w]
        wrt = ["w"]
    state = AdamState.for_params(params, lr=cfg.learning_rate)
    outs = [g.obj, g.task, g.l2sq, g.logits]
    target_cmp = int(target) if model_kind == models.KIND_CLASSIFIER else tuple(target)
    lo, hi = cfg.eta_clamp

    mark = math.inf
    stall = 0
    steps = 0
    best_success = None
    for it in range(max_iters):
        bindings = {"w": params[0]}
        if g.adaptive:
            bindings["eta1"] = params[1]
            bindings["eta2"] = params[2]
        else:
            bindings["lam"] = float(lam)
        vals, grads = g.tape.run(bindings, outs, grad_of=g.obj, wrt=wrt)
        obj, task, l2sq, logits = (float(vals[0]), float(vals[1]),
                                   float(vals[2]), vals[3])
        l2 = math.sqrt(max(l2sq, 0.0))
        decoded = _decode_logits(model_kind, logits)
        if want_trace:
            trace.append(TraceRecord(
                iter_base + it, obj, l2, task,
                float(params[1]) if g.adaptive else 0.0,
                float(params[2]) if g.adaptive else 0.0,
                _target_str(decoded), _align_logits(model_kind, logits)))
        if decoded == target_cmp and (best_success is None or l2 < best_success[0]):
            best_success = (l2, np.tanh(params[0]))
        threshold = (mark - IMPROVE_TOL * max(1.0, abs(mark))
                     if math.isfinite(mark) else math.inf)
        if obj < threshold:
            mark = obj
            stall = 0
        elif it >= STALL_WARMUP:
            stall += 1
            if stall >= k:
                break
        try:
            params, state = adam_step(params, [grads[nm] for nm in wrt], state)
        except NonFiniteGradientError:
            break
        np.clip(params[0], -W_CLIP, W_CLIP, out=params[0])
        if g.adaptive:
            params[1] = np.clip(params[1], lo, hi)
            params[2] = np.clip(params[2], lo, hi)
        steps += 1
    return steps, best_success, np.tanh(params[0])


def _validate_entry(model: models.Model, x, l, target) -> np.ndarray:
    x = as_tensor(x)
    if model.kind == models.KIND_CLASSIFIER:
        l_cmp, t_cmp = int(l), int(target)
        if not 0 <= t_cmp <= 9:
            raise AttackPreconditionError(f"target class {t_cmp} outside 0..9")
    else:
        l_cmp, t_cmp = tuple(int(d) for d in l), tuple(int(d) for d in target)
        if not t_cmp:
            raise AttackPreconditionError("empty target label")
        # feasibility of the target is checked again when the graph is built
        ctc.ctc_masks([models.digits_to_label(t_cmp)], models.SEQ_T, models.SEQ_C)
    if l_cmp == t_cmp:
        raise AttackPreconditionError("target equals the current label")
    got = _decode_digits(model, x)
    if got != l_cmp:
        raise AttackPreconditionError(
            f"model decodes the input as {got!r}, expected {l_cmp!r}")
    return x


def _resolve_iters(cfg: AttackConfig, kind: str) -> int:
    if cfg.max_iters is not None:
        return cfg.max_iters
    return 2000 if kind == models.KIND_CLASSIFIER else 10000


def attack_fixed(model: models.Model, x, l, target, lam: float,
                 cfg: AttackConfig = AttackConfig(),
                 want_trace: bool = False) -> AttackResult:
    """Basic attack at one fixed trade-off weight."""
    if lam <= 0:
        raise AttackPreconditionError("lam must be positive")
    x = _validate_entry(model, x, l, target)
    g = _build_graph(model, x, target, adaptive=False, cfg=cfg)
    trace: list[TraceRecord] = []
    k = cfg.early_stop_k if cfg.early_stop_k is not None else 20
    steps, best, x_last = _optimize(
        g, model.kind, x, target, cfg, lam, _resolve_iters(cfg, model.kind), k,
        want_trace, trace, 0)
    if best is None:
        return AttackResult(False, x_last, float(np.linalg.norm(x_last - x)),
                            steps, trace if want_trace else None)
    return AttackResult(True, best[1], best[0], steps, trace if want_trace else None)


def attack_binary(model: models.Model, x, l, target, steps: int,
                  cfg: AttackConfig = AttackConfig(),
                  want_trace: bool = False) -> AttackResult:
    """Modified binary search over lam on the log scale.

    Success tightens from below (lam rises toward the distance term),
    failure relaxes (lam falls); each step runs at most 2000 iterations.
    Returns the minimum-distance success across all steps; ``iterations``
    totals the Adam steps of every search step.
    """
    if steps < 1:
        raise AttackPreconditionError("steps must be >= 1")
    x = _validate_entry(model, x, l, target)
    g = _build_graph(model, x, target, adaptive=False, cfg=cfg)
    trace: list[TraceRecord] = []
    k = cfg.early_stop_k if cfg.early_stop_k is not None else 20
    per_step = cfg.max_iters if cfg.max_iters is not None else 2000
    lam_lo, lam_hi = cfg.lam_lo, cfg.lam_hi
    lam = cfg.lam_init
    total = 0
    best = None
    x_last = None
    for _ in range(steps):
        n_iter, success, x_fin = _optimize(
            g, model.kind, x, target, cfg, lam, per_step, k,
            want_trace, trace, total)
        total += n_iter
        x_last = x_fin
        if success is not None:
            if best is None or success[0] < best[0]:
                best = success
            lam_lo = lam
            lam = math.sqrt(lam * lam_hi)
        else:
            lam_hi = lam
            lam = math.sqrt(lam_lo * lam)
    if best is None:
        return AttackResult(False, x_last, float(np.linalg.norm(x_last - x)),
                            total, trace if want_trace else None)
    return AttackResult(True, best[1], best[0], total, trace if want_trace else None)


def attack_adaptive(model: models.Model, x, l, target,
                    cfg: AttackConfig = AttackConfig(),
                    want_trace: bool = False) -> AttackResult:
    """Uncertainty-weighted attack: one joint descent over (w, eta1, eta2)."""
    x = _validate_entry(model, x, l, target)
    g = _build_graph(model, x, target, adaptive=True, cfg=cfg)
    trace: list[TraceRecord] = []
    k = cfg.early_stop_k if cfg.early_stop_k is not None else 1
    steps, best, x_last = _optimize(
        g, model.kind, x, target, cfg, None, _resolve_iters(cfg, model.kind), k,
        want_trace, trace, 0)
    if best is None:
        return AttackResult(False, x_last, float(np.linalg.norm(x_last - x)),
                            steps, trace if want_trace else None)
    return AttackResult(True, best[1], best[0], steps, trace if want_trace else None)


# ----------------------------------------------------------------------
# target construction

EDIT_OPS = ("insert", "insert_repeat", "substitute", "delete")

COMMON_WORDS = (
    "the and for are but not you all any can had her was one our out day get "
    "has him his how man new now old see two way who boy did its let put say "
    "she too use that with have this will your from they know want been good "
    "much some time very when come here just like long make many more only "
    "over such take than them well were business imported coffee street"
).split()


def edit_target(label, op: str, position: int, symbol: int | None = None,
                rng: np.random.Generator | None = None) -> tuple[int, ...]:
    """Single-edit target construction over digit strings.

    Positions are 0-based.  ``insert`` places ``symbol`` before ``position``;
    ``insert_repeat`` duplicates the symbol at ``position``; ``substitute``
    replaces it (the new symbol must differ); ``delete`` removes it and
    requires at least two symbols so the result is nonempty.
    """
    label = tuple(int(d) for d in label)
    if not label:
        raise ValueError("label must be nonempty")
    if op not in EDIT_OPS:
        raise ValueError(f"unknown edit op {op!r}")
    limit = len(label) + 1 if op == "insert" else len(label)
    if not 0 <= position < limit:
        raise ValueError(f"position {position} invalid for {op} on {label}")
    if op in ("insert", "substitute") and symbol is None and rng is None:
        raise ValueError(f"{op} needs a symbol or an rng to draw one")
    if op == "insert":
        if symbol is None:
            symbol = int(rng.integers(0, 10))
        return label[:position] + (int(symbol),) + label[position:]
    if op == "insert_repeat":
        return label[:position + 1] + (label[position],) + label[position + 1:]
    if op == "substitute":
        if symbol is None:
            choices = [d for d in range(10) if d != label[position]]
            symbol = int(choices[rng.integers(0, len(choices))])
        if int(symbol) == label[position]:
            raise ValueError("substitute symbol equals the original")
        return label[:position] + (int(symbol),) + label[position + 1:]
    if len(label) < 2:
        raise ValueError("delete needs at least two symbols")
    return label[:position] + label[position + 1:]


def sample_target(label, alphabet, rng: np.random.Generator):
    """Uniform same-length target differing from ``label``.

    Digit alphabets draw uniform digit strings; letter alphabets draw from
    an embedded common-word list of the same length, falling back to uniform
    strings when no word fits.
    """
    alphabet = list(alphabet)
    if len(alphabet) < 2:
        raise ValueError("alphabet must hold at least two symbols")
    label_t = tuple(label)
    if not label_t:
        raise ValueError("label must be nonempty")
    digit_mode = all(isinstance(a, (int, np.integer)) for a in alphabet)
    if digit_mode:
        while True:
            cand = tuple(int(alphabet[i]) for i in rng.integers(0, len(alphabet), len(label_t)))
            if cand != label_t:
                return cand
    words = [w for w in COMMON_WORDS if len(w) == len(label_t) and tuple(w) != label_t
             and all(ch in alphabet for ch in w)]
    if words:
        return tuple(words[int(rng.integers(0, len(words)))])
    while True:
        cand = tuple(alphabet[i] for i in rng.integers(0, len(alphabet), len(label_t)))
        if cand != label_t:
            return cand
