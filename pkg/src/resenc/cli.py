"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 gradcheck failure.
"""

from __future__ import annotations

import argparse
import sys

from . import gradcheck as gc
from .config import ConfigError, load_config
from .data import (
    DescriptorDataset,
    FormatError,
    load_dataset,
    load_synth_spec,
    mixture_weights_spec,
    save_dataset,
    synth_generate,
)
from .encoding import encode_forward, l2norm_forward
from .experiment import train_joint, train_single
from .network import CheckpointError, JointNetwork, evaluate, load_checkpoint, save_checkpoint
from .numeric import ShapeError, matmul
from .reference import bow_histogram, hard_assign, vlad

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_GRADCHECK = 0, 1, 2, 3
PRESETS = {"mixture-weights": mixture_weights_spec}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS keeps a subcommand's unset flag from clobbering the top-level one
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the configured seed")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS,
                        help="suppress progress output")

    p = _Parser(prog="resenc", description="Residual encoding layer toolkit", parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic train/test pair")
    s.add_argument("--spec", required=True, help="synth spec JSON file, or preset name 'mixture-weights'")
    s.add_argument("--out-train", required=True)
    s.add_argument("--out-test", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model from a config")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--data2", help="second dataset; enables joint training")
    t.add_argument("--out", required=True, help="checkpoint path")

    e = sub.add_parser("eval", parents=[common], help="top-1 accuracy of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--head", choices=("A", "B"), default="A", help="head of a joint checkpoint")

    n = sub.add_parser("encode", parents=[common], help="write per-sample encodings as a DTEN file")
    n.add_argument("--ckpt", required=True)
    n.add_argument("--data", required=True)
    n.add_argument("--method", choices=("ten", "vlad", "bow"), required=True)
    n.add_argument("--out", required=True)
    n.add_argument("--head", choices=("A", "B"), default="A")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    g.add_argument("--grid", choices=("default", "small"), default="default")
    return p


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _load_data(path, flag: str) -> DescriptorDataset:
    try:
        return load_dataset(path)
    except FormatError as exc:
        raise DataError(f"{flag}: {exc}") from None


def _load_model(args):
    try:
        model = load_checkpoint(args.ckpt)
    except OSError as exc:
        raise DataError(f"--ckpt: {args.ckpt}: cannot read ({exc.strerror})") from None
    except CheckpointError as exc:
        raise DataError(f"--ckpt: {exc}") from None
    if isinstance(model, JointNetwork):
        return model.head("AB".index(args.head))
    return model


def cmd_synth(args) -> int:
    if args.spec in PRESETS:
        spec = PRESETS[args.spec]()
    else:
        try:
            spec = load_synth_spec(args.spec)
        except OSError as exc:
            raise DataError(f"--spec: {args.spec}: cannot read ({exc.strerror})") from None
        except ValueError as exc:
            raise DataError(f"--spec: {args.spec}: {exc}") from None
    if args.seed is not None:
        spec.seed = args.seed
    train, test = synth_generate(spec)
    save_dataset(train, args.out_train)
    save_dataset(test, args.out_test)
    _say(args, f"wrote {len(train)} train samples to {args.out_train}, {len(test)} test samples to {args.out_test}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        raise DataError(f"--config: {exc}") from None
    if args.seed is not None:
        cfg.seed = args.seed
    data = _load_data(args.data, "--data")
    data2_path = args.data2 or (cfg.joint.data2 if cfg.joint.enabled else None)
    try:
        if data2_path:
            data2 = _load_data(data2_path, "--data2")

            def log(epoch, ma, mb):
                _say(args, f"epoch\t{epoch}\tloss_a\t{ma.loss:.6f}\tacc_a\t{ma.accuracy:.4f}"
                           f"\tloss_b\t{mb.loss:.6f}\tacc_b\t{mb.accuracy:.4f}")

            model, _ = train_joint(cfg, data, data2, log)
        else:
            def log(epoch, m):
                _say(args, f"epoch\t{epoch}\tloss\t{m.loss:.6f}\tacc\t{m.accuracy:.4f}")

            model, _ = train_single(cfg, data, log)
    except ShapeError as exc:
        raise DataError(f"--data: {exc}") from None
    save_checkpoint(model, args.out)
    _say(args, f"saved checkpoint to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args)
    data = _load_data(args.data, "--data")
    try:
        acc = evaluate(model, data)
    except (ShapeError, ValueError) as exc:
        raise DataError(f"--data: {args.data}: {exc}") from None
    print(f"{acc:.4f}")
    return EXIT_OK


def encode_dataset(model, data: DescriptorDataset, method: str) -> DescriptorDataset:
    """One flattened encoding row per sample, computed on projected descriptors."""
    rows = []
    K = model.C.shape[0]
    for X, y in data:
        P = matmul(X, model.W_proj) + model.b_proj[None, :]
        if method == "ten":
            E, _ = encode_forward(P, model.C, model.s)
            v = l2norm_forward(E, model.normalize)[0].reshape(-1)
        elif method == "vlad":
            v = vlad(P, model.C).reshape(-1)
        elif method == "bow":
            v = bow_histogram(hard_assign(P, model.C), K).reshape(-1)
        else:
            raise ValueError(f"unknown method {method!r}")
        rows.append((v[None, :], y))
    return DescriptorDataset(rows, data.n_classes, rows[0][0].shape[1] if rows else 0)


def cmd_encode(args) -> int:
    model = _load_model(args)
    data = _load_data(args.data, "--data")
    if data.D != model.W_proj.shape[0]:
        raise DataError(f"--data: {args.data}: descriptor dim {data.D} != checkpoint input dim {model.W_proj.shape[0]}")
    save_dataset(encode_dataset(model, data, args.method), args.out)
    _say(args, f"wrote {len(data)} {args.method} encodings to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok = True
    for N, K, D, seed in gc.encoding_grid(args.grid):
        passed, reports = gc.check_encoding(N, K, D, seed)
        ok &= passed
        errs = "\t".join(f"{r.name}\t{r.max_rel_err:.3e}" for r in reports)
        print(f"encoding\tN={N}\tK={K}\tD={D}\tseed={seed}\t{errs}\t{'PASS' if passed else 'FAIL'}")
    for seed in range(3 if args.grid == "default" else 1):
        params, X, label = gc.tiny_network(seed)
        passed, reports = gc.check_network(params, X, label)
        ok &= passed
        errs = "\t".join(f"{r.name}\t{r.max_rel_err:.3e}" for r in reports)
        print(f"network\tseed={seed}\t{errs}\t{'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_GRADCHECK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "encode": cmd_encode,
            "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.seed = getattr(args, "seed", None)
        args.quiet = getattr(args, "quiet", False)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
