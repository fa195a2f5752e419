"""Command-line surface: train victims, run single attacks, benchmark, and
convert traces.

Exit codes: 0 when the requested operation ran (an unsuccessful attack is
data, not an error), 2 for usage errors, 1 for operational failures such as
unreadable files or an infeasible target.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import struct
import sys

import numpy as np

from . import attacks, bench, ctc, data, models, weights_io

log = logging.getLogger("seqattack")

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def _load_split(mnist_dir: str, files) -> list[data.ImageSample]:
    images, labels = (os.path.join(mnist_dir, f) for f in files)
    return data.load_idx(images, labels)


def cmd_train(args) -> int:
    train_set = _load_split(args.mnist_dir, TRAIN_FILES)
    model = models.init_model(args.model, args.seed)
    epochs = args.epochs if args.epochs is not None else (
        3 if args.model == models.KIND_CLASSIFIER else 14)
    if args.model == models.KIND_SEQNET:
        train_set = data.synth_seqmnist(train_set, args.seq_count, seed=args.seed + 1)
    model = models.train(model, train_set, epochs=epochs, lr=args.lr,
                         batch_size=args.batch, seed=args.seed)
    weights_io.save(model, args.out)
    log.info("wrote %s", args.out)
    try:
        test_set = _load_split(args.mnist_dir, TEST_FILES)
    except (OSError, data.IdxFormatError):
        return 0
    if args.model == models.KIND_CLASSIFIER:
        acc = models.evaluate_classifier(model, test_set)
        log.info("test accuracy %.4f", acc)
    else:
        test_seq = data.synth_seqmnist(test_set, max(1, args.seq_count // 8),
                                       seed=args.seed + 2)
        acc = models.evaluate_seqnet(model, test_seq)
        log.info("test exact-sequence accuracy %.4f", acc)
    return 0


def _load_input_image(path: str, index: int, kind: str, seed: int) -> np.ndarray:
    """PGM files are used as-is; an IDX images file yields digit number
    ``index`` for the classifier, or the ``index``-th synthesized sequence
    sample (same synthesis stream the bench command uses) for the sequence
    model."""
    h, w = models.INPUT_SHAPES[kind]
    if path.endswith(".pgm"):
        img = data.read_pgm(path)
        if img.shape != (h, w):
            raise ValueError(f"input is {img.shape}, model expects {(h, w)}")
        return data.normalize(img)
    if kind == models.KIND_SEQNET:
        labels_path = path.replace("images-idx3", "labels-idx1")
        if labels_path == path or not os.path.exists(labels_path):
            raise ValueError(
                "sequence attacks on IDX input need the matching labels file "
                "next to it (or pass a 32x100 PGM)")
        source = data.load_idx(path, labels_path)
        seqs = data.synth_seqmnist(source, index + 1, seed=seed + 1)
        return seqs[index].pixels
    with open(path, "rb") as f:
        head = f.read(16)
        magic, n, rows, cols = struct.unpack(">iiii", head)
        if magic != data.IMAGE_MAGIC:
            raise data.IdxFormatError(f"bad image magic {magic}")
        if not 0 <= index < n:
            raise ValueError(f"index {index} outside 0..{n - 1}")
        f.seek(16 + index * rows * cols)
        img = np.frombuffer(f.read(rows * cols), dtype=np.uint8).reshape(rows, cols)
    if img.shape != (h, w):
        raise ValueError(f"input is {img.shape}, model expects {(h, w)}")
    return data.normalize(img)


def _parse_target(target: str, kind: str):
    if not target.isdigit():
        raise ValueError(f"target must be a digit string, got {target!r}")
    if kind == models.KIND_CLASSIFIER:
        if len(target) != 1:
            raise ValueError("classifier targets are a single digit")
        return int(target)
    return tuple(int(c) for c in target)


def trace_to_jsonl(trace: list[attacks.TraceRecord]) -> str:
    lines = []
    for r in trace:
        lines.append(json.dumps({
            "iter": r.iteration, "obj": r.objective, "l2": r.l2,
            "task": r.task_loss, "eta1": r.eta1, "eta2": r.eta2,
            "decoded": r.decoded, "align": r.alignment,
        }, separators=(",", ":")))
    return "\n".join(lines) + ("\n" if lines else "")


def dump_attack_images(dump_dir: str, x: np.ndarray, x_adv: np.ndarray) -> None:
    """original.pgm, adversarial.pgm, and the difference amplified 10x and
    centered at gray 128."""
    os.makedirs(dump_dir, exist_ok=True)
    data.write_pgm(os.path.join(dump_dir, "original.pgm"), data.denormalize(x))
    data.write_pgm(os.path.join(dump_dir, "adversarial.pgm"), data.denormalize(x_adv))
    delta = np.clip(10.0 * (x_adv - x), -1.0, 1.0)
    data.write_pgm(os.path.join(dump_dir, "perturbation.pgm"), data.denormalize(delta))


def cmd_attack(args) -> int:
    model = weights_io.load(args.weights)
    x = _load_input_image(args.input, args.index, model.kind, args.seed)
    target = _parse_target(args.target, model.kind)
    label = (models.predict_class(model, x) if model.kind == models.KIND_CLASSIFIER
             else models.decode_seq(model, x))
    kind, arg = bench.parse_method(args.method)
    cfg = attacks.AttackConfig(learning_rate=args.lr, max_iters=args.max_iters,
                               seed=args.seed)
    want_trace = args.trace is not None
    if kind == "adaptive":
        res = attacks.attack_adaptive(model, x, label, target, cfg, want_trace)
    elif kind == "fixed":
        res = attacks.attack_fixed(model, x, label, target, arg, cfg, want_trace)
    else:
        res = attacks.attack_binary(model, x, label, target, arg, cfg, want_trace)
    if args.trace:
        with open(args.trace, "w") as f:
            f.write(trace_to_jsonl(res.trace))
    decoded = None
    if args.dump_dir:
        dump_attack_images(args.dump_dir, x, res.x_adv)
        # report the decode of what was actually written, after quantization
        quantized = data.normalize(data.denormalize(res.x_adv))
        decoded = (models.predict_class(model, quantized)
                   if model.kind == models.KIND_CLASSIFIER
                   else models.decode_seq(model, quantized))
    else:
        decoded = (models.predict_class(model, res.x_adv)
                   if model.kind == models.KIND_CLASSIFIER
                   else models.decode_seq(model, res.x_adv))
    print(f"method={args.method} success={int(res.success)} "
          f"decoded={attacks._target_str(decoded)} l2={res.l2:.6f} "
          f"iterations={res.iterations}")
    return 0


def cmd_bench(args) -> int:
    model = weights_io.load(args.weights)
    test_set = _load_split(args.dataset, TEST_FILES)
    if model.kind == models.KIND_SEQNET:
        samples = data.synth_seqmnist(test_set, max(args.count * 2, 64),
                                      seed=args.seed + 1)
    else:
        samples = test_set
    methods = args.methods.split(",")
    edits = args.edits.split(",")
    cfg = attacks.AttackConfig(learning_rate=args.lr, max_iters=args.max_iters,
                               seed=args.seed)
    rows, reports = bench.run_bench(model, samples, args.count, methods, edits,
                                    args.seed, jobs=args.jobs, cfg=cfg)
    if args.out:
        with open(args.out, "w") as f:
            f.write(bench.rows_to_csv(rows))
    for rep in reports:
        l2 = f"{rep.mean_l2:.4f}" if rep.mean_l2 is not None else "n/a"
        iters = f"{rep.mean_iterations:.1f}" if rep.mean_iterations is not None else "n/a"
        print(f"method={rep.method} n={rep.count} success_rate={rep.success_rate:.4f} "
              f"mean_l2={l2} mean_iterations={iters}")
    return 0


def cmd_trace(args) -> int:
    records = []
    with open(args.trace) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    out_lines = ["iteration,objective,l2,task_loss,eta1,eta2,decoded,alignment"]
    for r in records:
        align = "-".join(str(a) for a in r["align"])
        out_lines.append(f"{r['iter']},{r['obj']!r},{r['l2']!r},{r['task']!r},"
                         f"{r['eta1']!r},{r['eta2']!r},{r['decoded']},{align}")
    with open(args.report, "w") as f:
        f.write("\n".join(out_lines) + "\n")
    lock = None
    if args.target is not None:
        for r in records:
            if r["decoded"] == args.target:
                lock = r["iter"]
                break
    print(f"records={len(records)} alignment_lock={'none' if lock is None else lock}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqattack",
                                description="Targeted attacks on digit models")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a victim model")
    t.add_argument("--model", choices=[models.KIND_CLASSIFIER, models.KIND_SEQNET],
                   required=True)
    t.add_argument("--mnist-dir", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--seq-count", type=int, default=8000,
                   help="synthesized sequence-training samples (seqnet)")
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("attack", help="attack one input image")
    a.add_argument("--weights", required=True)
    a.add_argument("--input", required=True, help="PGM file or IDX images file")
    a.add_argument("--index", type=int, default=0, help="image index for IDX input")
    a.add_argument("--target", required=True)
    a.add_argument("--method", default="adaptive",
                   help="adaptive | fixed:LAM | binary:STEPS")
    a.add_argument("--trace", default=None, help="write per-iteration JSONL here")
    a.add_argument("--dump-dir", default=None)
    a.add_argument("--lr", type=float, default=0.05)
    a.add_argument("--max-iters", type=int, default=None)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(fn=cmd_attack)

    b = sub.add_parser("bench", help="batch attacks with aggregate metrics")
    b.add_argument("--weights", required=True)
    b.add_argument("--dataset", required=True, help="directory with IDX test files")
    b.add_argument("--count", type=int, required=True)
    b.add_argument("--methods", default="adaptive")
    b.add_argument("--edits", default="substitute",
                   help="comma list of insert,insert_repeat,substitute,delete")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default=None, help="CSV path")
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--lr", type=float, default=0.05)
    b.add_argument("--max-iters", type=int, default=None)
    b.set_defaults(fn=cmd_bench)

    tr = sub.add_parser("trace", help="convert a trace to CSV")
    tr.add_argument("--trace", required=True)
    tr.add_argument("--report", required=True)
    tr.add_argument("--target", default=None,
                    help="target string for the alignment-lock report")
    tr.set_defaults(fn=cmd_trace)
    return p


def main(argv=None) -> int:
    bench.limit_blas_threads()
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stdout)
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (attacks.AttackPreconditionError, ctc.CTCInfeasibleError,
            weights_io.WeightsFormatError, data.IdxFormatError,
            ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
