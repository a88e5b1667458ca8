"""Command-line front end: ``gen-toy``, ``quantize``, ``eval``, ``validate``.

Exit codes: 0 success, 1 usage error, 2 validation/data error,
3 numerical failure (a Hessian factor stayed indefinite after damping).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io as tio
from .hessian import LayerKind, build_all_factors
from .linalg import NotPositiveDefinite
from .model import LAYER_NAMES, ShapeMismatch, attention_recon_error, layer_recon_error, mha_forward
from .quant import SUPPORTED_BITS, QuantConfig, default_clip_grid
from .solver import LAYER_KINDS, quantize_block
from .validation import run_validation

log = logging.getLogger("attnquant")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bits(text):
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid bit-width {text!r}") from None
    if n not in SUPPORTED_BITS:
        raise argparse.ArgumentTypeError(
            f"unsupported bit-width {n}; supported widths: "
            + ", ".join(map(str, SUPPORTED_BITS))
        )
    return n


def _tiny_dims(text):
    out = {}
    for part in text.split(","):
        key, _, val = part.partition("=")
        if key not in ("d", "H", "L") or not val.isdigit():
            raise argparse.ArgumentTypeError(f"bad --tiny-dims entry {part!r} (want d=,H=,L=)")
        out[key] = int(val)
    return out


def build_parser():
    p = _Parser(prog="attnquant", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-toy", help="write a random attention block and calibration set")
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--heads", type=int, required=True)
    g.add_argument("--seqlen", type=int, required=True)
    g.add_argument("--samples", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--causal", action="store_true")

    q = sub.add_parser("quantize", help="quantize the four attention projections")
    q.add_argument("--manifest", type=Path, required=True)
    q.add_argument("--method", choices=("rtn", "gptq", "boa"), default="boa")
    q.add_argument("--bits", type=_bits, default=3)
    q.add_argument("--out", type=Path, required=True)
    q.add_argument("--damp", type=float, default=0.01)
    q.add_argument("--clip-min", type=float, default=0.5)
    q.add_argument("--clip-steps", type=int, default=51)
    q.add_argument("--out-policy", choices=("full", "per_head"), default="full")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--force-identity-hrow", action="store_true", help=argparse.SUPPRESS)
    q.add_argument("--print", dest="print_report", action="store_true",
                   help="print the report to stdout instead of writing report.json")

    e = sub.add_parser("eval", help="recompute reconstruction errors of a quantized model")
    e.add_argument("--manifest", type=Path, required=True)
    e.add_argument("--quantized", type=Path, required=True)
    e.add_argument("--print", dest="print_report", action="store_true")

    v = sub.add_parser("validate", help="run the oracle checks on tiny instances")
    v.add_argument("--tiny-dims", type=_tiny_dims, default={"d": 4, "H": 2, "L": 3})
    v.add_argument("--seed", type=int, default=0)
    return p


def _echo(command, resolved):
    print(f"attnquant {command} " + json.dumps(resolved, sort_keys=True))


def _model_and_calib(manifest_path):
    block, calib = tio.load_model(manifest_path)
    if calib is None:
        raise tio.ManifestError(f"{manifest_path}: manifest lists no calibration tensors")
    return block, calib


def _head_scores(name, block, calib, w, w_hat, out_policy):
    """Quadratic form ``tr(H_row dW H_col dW^T)`` per head under the BoA factors."""
    kind = LAYER_KINDS[name]
    factors = build_all_factors(kind, block, calib, out_policy=out_policy)
    delta = w_hat - w
    scores = []
    for f in factors:
        if kind is LayerKind.OUT:
            part = delta if f.head is None else delta[:, block.head_rows(f.head)]
        else:
            part = delta[block.head_rows(f.head)]
        scores.append(float(np.trace(f.h_row @ part @ f.h_col @ part.T)))
    return scores


def _layer_inputs(name, block, calib):
    if name == "w_out":
        return [mha_forward(block, x).x_out for x in calib]
    return list(calib)


def _emit(report, path, print_report):
    if print_report:
        sys.stdout.write(tio.dumps_report(report))
    else:
        tio.write_report(path, report)
        print(f"report written to {path}")


def cmd_gen_toy(args):
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    _echo("gen-toy", resolved)
    tio.gen_toy_model(args.out, args.d, args.heads, args.seqlen, args.samples, args.seed,
                      causal=args.causal)
    return EXIT_OK


def cmd_quantize(args):
    if args.clip_steps < 1 or not 0 < args.clip_min <= 1:
        raise UsageError("--clip-min must be in (0, 1] and --clip-steps >= 1")
    if not args.damp > 0:
        raise UsageError("--damp must be positive")
    if args.force_identity_hrow and args.method != "boa":
        raise UsageError("--force-identity-hrow only applies to --method boa")
    config = QuantConfig(
        bits=args.bits,
        method=args.method,
        damp_fraction=args.damp,
        clip_grid=default_clip_grid(args.clip_min, args.clip_steps),
        out_policy=args.out_policy,
        seed=args.seed,
    )
    resolved = config.as_dict()
    resolved.update(manifest=str(args.manifest), out=str(args.out),
                    force_identity_hrow=args.force_identity_hrow)
    _echo("quantize", resolved)

    block, calib = _model_and_calib(args.manifest)
    t0 = time.perf_counter()
    result = quantize_block(block, calib, config, identity_row=args.force_identity_hrow)
    log.info("quantized in %.3f s", time.perf_counter() - t0)

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    layers = {}
    weight_files = {}
    for name in LAYER_NAMES:
        res = result.layers[name]
        weight_files[name] = f"{name}.btsr"
        tio.write_tensor(out / f"{name}.btsr", res.dequantized)
        tio.write_tensor(out / f"{name}.codes.btsr", res.codes.astype(np.float64))
        tio.write_tensor(out / f"{name}.scales.btsr", res.scales)
        tio.write_tensor(out / f"{name}.zeros.btsr", res.zeros.astype(np.float64))
        layers[name] = {
            "layer_recon_error": res.metrics["layer_recon_error"],
            "head_scores": _head_scores(name, block, calib, getattr(block, name),
                                        res.dequantized, config.out_policy),
        }
    tio.write_manifest(out / "manifest.json", block.d, block.heads, weight_files,
                       causal=block.causal)
    report = {
        "command": "quantize",
        "config": resolved,
        "seed": config.seed,
        "layers": layers,
        "attention_recon_error": {
            "full_precision": 0.0,
            "quantized": result.metrics["attention_recon_error"],
        },
    }
    _emit(report, out / "report.json", args.print_report)
    return EXIT_OK


def cmd_eval(args):
    _echo("eval", {"manifest": str(args.manifest), "quantized": str(args.quantized)})
    block, calib = _model_and_calib(args.manifest)
    qman = tio.read_manifest(args.quantized / "manifest.json")
    qblock, _ = tio.load_model(qman)
    if qblock.d != block.d or qblock.heads != block.heads:
        raise ShapeMismatch("quantized model dims differ from the reference model")
    layers = {
        name: {
            "layer_recon_error": layer_recon_error(
                getattr(block, name), getattr(qblock, name), _layer_inputs(name, block, calib)
            )
        }
        for name in LAYER_NAMES
    }
    report = {
        "command": "eval",
        "config": {"manifest": str(args.manifest), "quantized": str(args.quantized)},
        "layers": layers,
        "attention_recon_error": {
            "full_precision": 0.0,
            "quantized": attention_recon_error(block, qblock, calib),
        },
    }
    _emit(report, args.quantized / "eval_report.json", args.print_report)
    return EXIT_OK


def cmd_validate(args):
    dims = {"d": 4, "H": 2, "L": 3, **args.tiny_dims}
    _echo("validate", {"tiny_dims": dims, "seed": args.seed})
    if dims["H"] < 1 or dims["d"] % dims["H"] or dims["L"] < 1:
        raise UsageError("--tiny-dims needs d divisible by H and L >= 1")
    results = run_validation(dims["d"], dims["H"], dims["L"], seed=args.seed)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_DATA


COMMANDS = {
    "gen-toy": cmd_gen_toy,
    "quantize": cmd_quantize,
    "eval": cmd_eval,
    "validate": cmd_validate,
}


def run(argv=None):
    """Parse ``argv`` and run one subcommand; returns the exit code."""
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NotPositiveDefinite as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (tio.TensorFormatError, tio.ManifestError, tio.InvalidDims, tio.IoFailure,
            ShapeMismatch, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
