"""``camlab`` command line: gen-data, train, explain, evaluate, compare.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path


from . import data_io, evaluation
from . import explain as ex
from .network import forward, predict, reference_cnn
from .training import CLASS_NAMES, TrainConfig, TrainingDivergedError, generate_shapes_dataset, train

log = logging.getLogger("camlab")

PARADIGM_CHOICES = ex.PARADIGMS + ("complete",)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _class_names(n):
    return CLASS_NAMES if n == len(CLASS_NAMES) else None


def _build_parser():
    p = _Parser(prog="camlab", description="Observed correlation, counterfactual and "
                "contrastive CAM explanations for small CNNs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic shapes dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-per-class", type=int, default=400)
    g.add_argument("--image-size", type=int, default=32)

    t = sub.add_parser("train", help="train the reference CNN")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="weights file to write")
    t.add_argument("--seed", type=int, default=0, help="shuffle seed")
    t.add_argument("--init-seed", type=int, default=None, help="weight init seed (default: --seed)")
    t.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    t.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    t.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    t.add_argument("--width", type=int, default=8, help="channels of the first conv layer")

    e = sub.add_parser("explain", help="write explanation heatmaps for one image")
    e.add_argument("--model", required=True)
    e.add_argument("--image", required=True, help="P5/P6 input image")
    e.add_argument("--out", required=True, help="output path prefix")
    e.add_argument("--paradigm", choices=PARADIGM_CHOICES, default="complete")
    e.add_argument("--layer", type=int, default=None)
    e.add_argument("--class", dest="class_i", type=int, default=None,
                   help="class to explain (default: prediction)")
    e.add_argument("--contrast", type=int, default=None, help="contrast class Q")

    for name, help_ in (("evaluate", "score explanation maps on a dataset"),
                        ("compare", "paradigms and controls side by side")):
        v = sub.add_parser(name, help=help_)
        v.add_argument("--model", required=name == "evaluate")
        v.add_argument("--data", required=name == "evaluate")
        v.add_argument("--out", default=None, help="report file to write")
        v.add_argument("--layer", type=int, default=None)
        v.add_argument("--steps", type=int, default=20)
        v.add_argument("--baseline", choices=("zeros", "mean"), default="mean")
        v.add_argument("--mode", choices=(evaluation.PROBABILISTIC, evaluation.ACCURACY),
                       default=evaluation.PROBABILISTIC)
        v.add_argument("--seed", type=int, default=0, help="seed of the random-map control")
        if name == "evaluate":
            v.add_argument("--paradigm", choices=PARADIGM_CHOICES, action="append", default=None,
                           help="repeatable; default: all three paradigms and complete")
        else:
            v.add_argument("--report", action="append", default=[],
                           help="existing report to include (repeatable)")
            v.add_argument("--no-controls", action="store_true",
                           help="skip the uniform and random map controls")
    return p


def _gen_data(a):
    samples = generate_shapes_dataset(a.seed, a.n_per_class, a.image_size)
    data_io.save_dataset(samples, a.out)
    log.info("wrote %d samples to %s", len(samples), a.out)


def _train(a):
    samples = data_io.load_dataset(a.data)
    init_seed = a.seed if a.init_seed is None else a.init_seed
    c, h, w = samples[0].image.shape
    if h != w:
        raise ValueError(f"images must be square, got {h}x{w}")
    n_classes = max(s.label for s in samples) + 1
    net = reference_cnn(init_seed, in_channels=c, image_size=h,
                        num_classes=max(n_classes, 2), width=a.width)
    config = TrainConfig(learning_rate=a.lr, epochs=a.epochs, batch_size=a.batch_size, seed=a.seed)
    net, history = train(net, samples, config)
    data_io.save_weights(net, a.out)
    if history["loss"]:
        log.info("final loss %.4f accuracy %.4f", history["loss"][-1], history["accuracy"][-1])
    log.info("wrote %s", a.out)


def _explain(a):
    net = data_io.load_weights(a.model)
    x = data_io.load_image(a.image)
    if x.shape != net.input_shape:
        raise ValueError(f"image shape {x.shape} does not match network input {net.input_shape}")
    trace = forward(net, x)
    p = predict(trace.logits) if a.class_i is None else a.class_i
    if not 0 <= p < net.num_classes:
        raise IndexError(f"--class {p} out of range for {net.num_classes} classes")
    q = ex.default_contrast(trace.logits, p) if a.contrast is None else a.contrast
    names = _class_names(net.num_classes)
    asked = ex.questions(p, q, names)
    if a.paradigm == "complete":
        if p != predict(trace.logits):
            raise ValueError("--class is not supported with --paradigm complete; "
                             "the complete map explains the prediction")
        comp = ex.complete_explanation(net, x, a.layer, q, trace=trace)
        maps = {k: m.upsampled for k, m in comp.maps().items()}
        maps["complete"] = comp.complete_upsampled
        for k in ex.PARADIGMS:
            log.info("%s: %s", k, asked[k])
    else:
        m = ex.explain(net, x, a.paradigm, a.layer, p, q, trace=trace)
        maps = {a.paradigm: m.upsampled}
        log.info("%s: %s", a.paradigm, asked[a.paradigm])
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    for k, m in maps.items():
        pgm, ppm = data_io.export_heatmap(m, x, out.with_name(f"{out.name}_{k}"))
        log.info("wrote %s and %s", pgm, ppm)


def _eval_report(a, methods):
    net = data_io.load_weights(a.model)
    samples = data_io.load_dataset(a.data, net.num_classes)
    config = {
        "baseline": a.baseline,
        "layer": ex.default_layer(net) if a.layer is None else a.layer,
        "mode": a.mode,
        "model_sha256": hashlib.sha256(Path(a.model).read_bytes()).hexdigest(),
        "steps": a.steps,
    }
    return evaluation.evaluate(net, samples, methods, layer=a.layer, steps=a.steps,
                               baseline=a.baseline, mode=a.mode, seed=a.seed, config=config)


def _evaluate(a):
    methods = tuple(dict.fromkeys(a.paradigm)) if a.paradigm else PARADIGM_CHOICES
    report = _eval_report(a, methods)
    _emit(report, a.out)


def _emit(report, out):
    if out:
        data_io.write_report(report, out)
        log.info("wrote %s", out)
    else:
        sys.stdout.write(data_io.report_text(report))


def _table(columns) -> str:
    """Metric rows by method columns; ``columns`` is a list of (title, metrics)."""
    metrics = sorted({k for _, m in columns for k in m})
    width = max([len(t) for t, _ in columns] + [9])
    head = "metric".ljust(16) + "".join(t.rjust(width + 2) for t, _ in columns)
    rows = [head]
    for k in metrics:
        cells = "".join((f"{m[k]:.4f}" if k in m else "-").rjust(width + 2) for _, m in columns)
        rows.append(k.ljust(16) + cells)
    return "\n".join(rows) + "\n"


def _compare(a):
    if (a.model is None) != (a.data is None):
        raise UsageError("camlab compare: error: --model and --data must be given together")
    if a.model is None and not a.report:
        raise UsageError("camlab compare: error: give --model and --data, or at least one --report")
    columns = []
    for path in a.report:
        r = data_io.read_report(path)
        columns += [(f"{Path(path).stem}:{k}", m) for k, m in r.methods.items() if k != "model"]
    if a.model is not None:
        methods = ex.PARADIGMS + ("complete",) + (() if a.no_controls else evaluation.CONTROLS)
        report = _eval_report(a, methods)
        columns += [(k, m) for k, m in report.methods.items() if k != "model"]
        if a.out:
            data_io.write_report(report, a.out)
            log.info("wrote %s", a.out)
    sys.stdout.write(_table(columns))


COMMANDS = {"gen-data": _gen_data, "train": _train, "explain": _explain,
            "evaluate": _evaluate, "compare": _compare}


def run(argv) -> int:
    if not logging.getLogger().handlers and not log.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(message)s"))
        log.addHandler(handler)
    log.setLevel(logging.INFO)
    try:
        args = _build_parser().parse_args(list(argv))
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except (OSError, ValueError, IndexError, TrainingDivergedError) as e:
        print(f"camlab {args.command}: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
