"""Command-line entry point: ``perfcnn {mask,eval,search,train,bench,synth,arch}``.

Every stochastic component draws its seed from :func:`derive_seed`, which
hashes the component name together with the global ``--seed``.  Rates are
exact fractions such as ``4/5``.  Exit status is 0 on success and 2 when an
argument or input file fails validation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .bench import account, time_forward
from .core import read_tensor
from .data import Dataset, synthetic_shapes
from .masks import MASK_TYPES, format_mask, make_mask, n_for_rate, write_mask
from .network import (Network, NetworkSpec, TrainState, alexnet_caffe, average_impacts, nin_cifar10,
                      parse_rate, sgd_finetune, toy_nin, toy_two_conv, vgg16)
from .search import (DEFAULT_LADDER, PerforationConfig, apply_config, evaluation_subset,
                     greedy_configure)

ARCHITECTURES = {"nin": nin_cifar10, "alexnet": alexnet_caffe, "vgg16": vgg16,
                 "toy-nin": toy_nin, "toy-two-conv": toy_two_conv}


class ValidationError(Exception):
    pass


def derive_seed(seed: int, component: str) -> int:
    """Per-component seed: first 8 bytes of ``sha256("<seed>:<component>")``."""
    digest = hashlib.sha256(f"{seed}:{component}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _fraction(text: str) -> Fraction:
    try:
        return parse_rate(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _interp(text: str) -> str:
    return "barycentric" if text == "bary" else text


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{p}: no such file or directory")
    return p


def _load_net(args) -> Network:
    spec = NetworkSpec.read(_existing(args.net))
    net = Network(spec, seed=derive_seed(args.seed, "init"))
    if getattr(args, "weights", None):
        net.load_weights(_existing(args.weights))
    return net


def _load_config(args, net: Network) -> PerforationConfig | None:
    if not getattr(args, "config", None):
        return None
    config = PerforationConfig.read(_existing(args.config))
    bad = [l for l in config.layers if l not in net.spec.conv_layers()]
    if bad:
        raise ValidationError(f"config names non-conv layers {bad}")
    return config


def _write_text(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# --- subcommands ------------------------------------------------------------------

def cmd_mask(args) -> int:
    Xo, Yo = args.shape
    omega = Xo * Yo
    if (args.n is None) == (args.rate is None):
        raise ValidationError("give exactly one of --n and --rate")
    N = args.n if args.n is not None else n_for_rate(omega, args.rate)
    weights = None
    if args.type == "impact":
        if not args.impacts:
            raise ValidationError("impact masks need --impacts (a PCNT field of shape X x Y x 1)")
        B = read_tensor(_existing(args.impacts))
        if B.shape[:2] != (Xo, Yo):
            raise ValidationError(f"impact field {B.shape[:2]} does not match --shape {(Xo, Yo)}")
        weights = B[..., 0]
    mask = make_mask(args.type, Xo, Yo, N, derive_seed(args.seed, "mask"), weights=weights,
                     pool=tuple(args.pool))
    if args.out:
        write_mask(args.out, mask)
    else:
        sys.stdout.write(format_mask(mask))
    r = 1 - Fraction(mask.N, omega)
    print(f"mask {args.type} {Xo}x{Yo}: N={mask.N} r={r} ({float(r):.4f})"
          + ("" if mask.N == N else f" (requested N={N})"), file=sys.stderr)
    return 0


def _eval_row(net: Network, X, y, label: str, layer="", kind="", rate=Fraction(0)) -> dict:
    loss, err = net.evaluate(X, y)
    rep = account(net)
    return {"label": label, "layer": layer, "mask": kind, "rate": str(rate), "loss": f"{loss:.6f}",
            "error": f"{err:.6f}", "conv_mults": rep.conv_mults,
            "theoretical_speedup": f"{rep.theoretical_speedup:.6f}", "act_bytes": rep.act_bytes,
            "memory_ratio": f"{rep.memory_ratio:.6f}"}


def cmd_eval(args) -> int:
    net = _load_net(args)
    data = Dataset.load(_existing(args.data))
    X, y = data.images, data.labels
    for l in net.spec.conv_layers():
        net.layers[l].conv.storage = args.storage
    rows = []
    if args.sweep:
        layer = args.layer if args.layer is not None else net.spec.perforable_layers()[0]
        if layer not in net.spec.conv_layers():
            raise ValidationError(f"layer {layer} is not a conv layer")
        impX, impy = evaluation_subset(X, y, args.impact_samples, derive_seed(args.seed, "impact-subset"))
        rows.append(_eval_row(net, X, y, "baseline", layer))
        kinds = args.masks or [k for k in MASK_TYPES
                               if k != "pooling" or net.spec.pooling_after(layer) is not None]
        for kind in kinds:
            for r in args.rates:
                net.clear_masks()
                w = None
                if kind == "impact":
                    w = average_impacts(net, layer, impX, impy, args.impact_samples)
                net.perforate(layer, kind, r, seed=derive_seed(args.seed, f"mask/{layer}"),
                              interp=_interp(args.interp), impacts=w, storage=args.storage)
                rows.append(_eval_row(net, X, y, "sweep", layer, kind, r))
    else:
        config = _load_config(args, net)
        label = "baseline"
        if config is not None:
            apply_config(net, config, X, y, interp=_interp(args.interp), storage=args.storage)
            label = "config"
        rows.append(_eval_row(net, X, y, label))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _write_text(args.out, buf.getvalue())
    return 0


def cmd_search(args) -> int:
    net = _load_net(args)
    data = Dataset.load(_existing(args.data))
    if args.target <= 1:
        raise ValidationError("--target must exceed 1")
    X, y = evaluation_subset(data.images, data.labels, args.subset, derive_seed(args.seed, "eval-subset"))
    ladder = args.ladder or DEFAULT_LADDER
    res = greedy_configure(net, X, y, args.target, cost_model=args.cost_model, mask=args.mask,
                           ladder=ladder, seed=derive_seed(args.seed, "mask") % 2**31,
                           layers=args.layers, interp=_interp(args.interp))
    _write_text(args.out_config, res.config.format())
    if args.trace:
        Path(args.trace).write_text(res.trace_csv())
    status = "reached" if res.speedup >= args.target else "ladder exhausted before"
    print(f"speedup {res.speedup:.3f}x ({status} target {args.target}x); "
          f"e {res.baseline.e:.4f} -> {res.final.e:.4f}", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    net = _load_net(args)
    data = Dataset.load(_existing(args.data))
    config = _load_config(args, net)
    if config is not None:
        apply_config(net, config, data.images, data.labels, interp=_interp(args.interp))
    X_val = y_val = None
    if args.val:
        val = Dataset.load(_existing(args.val))
        X_val, y_val = val.images, val.labels
    state = TrainState(lr=args.lr, momentum=args.momentum, batch_size=args.batch,
                       seed=derive_seed(args.seed, "train"), weight_decay=args.weight_decay)
    history = sgd_finetune(net, data.images, data.labels, args.epochs, state, X_val, y_val,
                           log=lambda rec: print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                                                          for k, v in rec.items()), file=sys.stderr))
    net.save_weights(args.out)
    if args.log:
        cols = ["epoch", "loss", "error"] + (["val_loss", "val_error"] if X_val is not None else [])
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(history)
        Path(args.log).write_text(buf.getvalue())
    return 0


def cmd_bench(args) -> int:
    net = _load_net(args)
    if args.data:
        data = Dataset.load(_existing(args.data))
        X, y = data.images[:args.batch], data.labels[:args.batch]
    else:
        rng = np.random.default_rng(derive_seed(args.seed, "bench-input"))
        X = rng.standard_normal((args.batch, *net.spec.input_shape)).astype(np.float32)
        y = None
    config = _load_config(args, net)
    if config is not None:
        if y is None and "impact" in config.masks:
            raise ValidationError("impact masks in --config need --data")
        apply_config(net, config, X, y, interp=_interp(args.interp), storage=args.storage)
    if args.reps < 3:
        raise ValidationError("--reps must be at least 3")
    report = time_forward(net, X, repetitions=args.reps, warmup=args.warmup, threads=args.threads)
    print(report.format_table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "layers.csv").write_text(report.to_csv())
        (out / "summary.csv").write_text(report.summary_csv())
    return 0


def cmd_synth(args) -> int:
    ds = synthetic_shapes(args.n, size=args.size, channels=args.channels, classes=args.classes,
                          seed=derive_seed(args.seed, "synth"))
    ds.save(args.out)
    return 0


def cmd_arch(args) -> int:
    _write_text(args.out, ARCHITECTURES[args.name]().format())
    return 0


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="perfcnn", description="Perforated CNN experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="global seed (default 0)")
    common.add_argument("--interp", choices=["nearest", "zero", "bary"], default="nearest")
    common.add_argument("--storage", choices=["compact", "dense"], default="compact")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("mask", parents=[common], help="generate a perforation mask file")
    m.add_argument("--shape", type=int, nargs=2, required=True, metavar=("X", "Y"))
    m.add_argument("--type", choices=MASK_TYPES, required=True)
    m.add_argument("--n", type=int)
    m.add_argument("--rate", type=_fraction)
    m.add_argument("--pool", type=int, nargs=3, default=[3, 2, 0], metavar=("SIZE", "STRIDE", "PAD"))
    m.add_argument("--impacts", help="PCNT impact field for --type impact")
    m.add_argument("--out")
    m.set_defaults(func=cmd_mask)

    def net_args(q, weights_required=False):
        q.add_argument("--net", required=True, help="network spec file")
        q.add_argument("--weights", required=weights_required, help="PCNB weights file")

    e = sub.add_parser("eval", parents=[common], help="loss, error and cost of a (perforated) network")
    net_args(e)
    e.add_argument("--data", required=True)
    e.add_argument("--config")
    e.add_argument("--sweep", action="store_true", help="sweep mask types and rates on one layer")
    e.add_argument("--layer", type=int)
    e.add_argument("--masks", nargs="+", choices=MASK_TYPES)
    e.add_argument("--rates", type=_fraction, nargs="+", default=[Fraction(1, 2), Fraction(2, 3), Fraction(3, 4)])
    e.add_argument("--impact-samples", type=int, default=512)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("search", parents=[common], help="greedy perforation-rate search")
    net_args(s)
    s.add_argument("--data", required=True)
    s.add_argument("--target", type=float, required=True, help="target speedup")
    s.add_argument("--cost-model", choices=["mults", "time"], default="mults")
    s.add_argument("--mask", choices=MASK_TYPES, default="uniform")
    s.add_argument("--ladder", type=_fraction, nargs="+")
    s.add_argument("--layers", type=int, nargs="+")
    s.add_argument("--subset", type=int, default=256)
    s.add_argument("--out-config")
    s.add_argument("--trace")
    s.set_defaults(func=cmd_search)

    t = sub.add_parser("train", parents=[common], help="train or fine-tune with SGD")
    net_args(t)
    t.add_argument("--data", required=True)
    t.add_argument("--val")
    t.add_argument("--config")
    t.add_argument("--epochs", type=int, required=True)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--batch", type=int, default=64)
    t.add_argument("--weight-decay", type=float, default=0.0)
    t.add_argument("--out", required=True)
    t.add_argument("--log")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", parents=[common], help="cost accounting and forward timing")
    net_args(b)
    b.add_argument("--config")
    b.add_argument("--data")
    b.add_argument("--batch", type=int, default=16)
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--out", help="directory for layers.csv and summary.csv")
    b.set_defaults(func=cmd_bench)

    y = sub.add_parser("synth", parents=[common], help="write a synthetic shapes dataset")
    y.add_argument("--n", type=int, required=True)
    y.add_argument("--size", type=int, default=24)
    y.add_argument("--channels", type=int, default=3)
    y.add_argument("--classes", type=int, default=10)
    y.add_argument("--out", required=True)
    y.set_defaults(func=cmd_synth)

    a = sub.add_parser("arch", help="write a built-in network spec")
    a.add_argument("name", choices=sorted(ARCHITECTURES))
    a.add_argument("--out")
    a.set_defaults(func=cmd_arch)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ValueError, FileNotFoundError, NotImplementedError) as exc:
        print(f"perfcnn {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
