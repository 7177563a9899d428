"""Batch command-line front end.

Subcommands: align, aggregate, rearrange, attend, diffmap, simulate,
eval gram|iou. Exit codes: 0 success, 1 usage error, 2 data error. All
diagnostics go to stderr; machine output (QALN tensors, PGM/PNG images,
JSON reports) goes only to declared paths, and error exits leave no
output files behind. A ``--config`` file of ``key = value`` lines may set
any flag; explicit flags override the file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import diagnostics, metrics
from .aggregation import (
    AggregationMatrix,
    AlignmentMatrix,
    apply_fallback,
    build_aggregation,
    compute_alignment,
    qq_align_pipeline,
    reweight_softmax,
)
from .attention import cross_image_attention, rearrange_kv, rearranged_attention
from .errors import IoFailure, QAlignError, UsageError
from .tensor import FeatureMatrix, load_csv, load_tensor, tensor_bytes

DEFAULT_K = 1
DEFAULT_CONTRAST = 1.0
DEFAULT_THRESHOLD = 0.2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D102 - argparse hook
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _load_matrix(path: str) -> FeatureMatrix:
    if path.endswith(".csv"):
        return load_csv(path)
    return load_tensor(path)


def _commit(outputs: list[tuple[str, bytes]]) -> None:
    """Write all outputs, or none of them on failure."""
    staged = []
    try:
        for path, blob in outputs:
            tmp = f"{path}.tmp.{os.getpid()}"
            with open(tmp, "wb") as fh:
                fh.write(blob)
            staged.append((tmp, path))
        for tmp, path in staged:
            os.replace(tmp, path)
    except OSError as exc:
        for tmp, _ in staged:
            try:
                os.unlink(tmp)
            except OSError:
                pass
        raise IoFailure(f"cannot write outputs: {exc}") from exc


def _json_bytes(payload: dict) -> bytes:
    return (json.dumps(payload, indent=2) + "\n").encode()


def _parse_int_list(text: str) -> list[int]:
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


# --- subcommand handlers ------------------------------------------------------


def _cmd_align(args) -> list[tuple[str, bytes]]:
    s = compute_alignment(_load_matrix(args.q_app), _load_matrix(args.q_str))
    return [(args.out, tensor_bytes(FeatureMatrix(s.data)))]


def _cmd_aggregate(args) -> list[tuple[str, bytes]]:
    s = AlignmentMatrix(_load_matrix(args.sim).data)
    p_prime = reweight_softmax(apply_fallback(build_aggregation(s, args.k)))
    return [(args.out, tensor_bytes(p_prime.to_dense()))]


def _load_reweighted(path: str) -> AggregationMatrix:
    return AggregationMatrix.from_dense(_load_matrix(path))


def _cmd_rearrange(args) -> list[tuple[str, bytes]]:
    if args.aggregation and (args.q_app or args.q_str):
        raise UsageError("rearrange takes --aggregation or --q-app/--q-str, not both")
    if args.aggregation:
        p_prime = _load_reweighted(args.aggregation)
    elif args.q_app and args.q_str:
        p_prime = qq_align_pipeline(
            _load_matrix(args.q_app), _load_matrix(args.q_str), args.k
        )
    else:
        raise UsageError("rearrange needs --aggregation or both --q-app and --q-str")
    rkv = rearrange_kv(p_prime, _load_matrix(args.key), _load_matrix(args.value))
    return [
        (args.out_key, tensor_bytes(rkv.k_star)),
        (args.out_value, tensor_bytes(rkv.v_star)),
    ]


def _cmd_attend(args) -> list[tuple[str, bytes]]:
    query = _load_matrix(args.query)
    key = _load_matrix(args.key)
    value = _load_matrix(args.value)
    if args.rearranged:
        if not args.aggregation:
            raise UsageError("attend --rearranged requires --aggregation")
        rkv = rearrange_kv(_load_reweighted(args.aggregation), key, value)
        result = rearranged_attention(query, rkv, args.contrast)
    else:
        result = cross_image_attention(query, key, value, args.contrast)
    outputs = [(args.out, tensor_bytes(result.output))]
    if args.map:
        outputs.append((args.map, tensor_bytes(result.map)))
    return outputs


def _map_tensor(values: np.ndarray, grid: tuple[int, int] | None) -> FeatureMatrix:
    """Store a per-position map as (H, W) when the grid is known, else (n, 1)."""
    if values.ndim == 2:
        return FeatureMatrix(values)
    if grid is not None:
        return FeatureMatrix(values.reshape(grid))
    return FeatureMatrix(values.reshape(-1, 1))


def _cmd_diffmap(args) -> list[tuple[str, bytes]]:
    outputs: list[tuple[str, bytes]] = []
    if args.map_a or args.map_b:
        if not (args.map_a and args.map_b and args.out):
            raise UsageError("map mode needs --map-a, --map-b, and --out")
        ma = _load_matrix(args.map_a)
        mb = _load_matrix(args.map_b)
        diff = diagnostics.attention_diff_map(ma.data, mb.data, args.threshold)
        outputs.append((args.out, tensor_bytes(FeatureMatrix(diff.data, grid=ma.grid))))
        if args.heatmap:
            grid = ma.grid if ma.grid is not None else (ma.rows, ma.cols)
            pixels = diagnostics.heatmap_pixels(diff.data.reshape(grid))
            blob = diagnostics.pgm_bytes(pixels) if args.format == "pgm" else diagnostics.png_bytes(pixels)
            outputs.append((args.heatmap, blob))
        return outputs

    if not (args.q_str and args.q_app and args.k_app):
        raise UsageError(
            "diffmap needs either --map-a/--map-b or --q-str/--q-app/--k-app"
        )
    if not args.out_prefix:
        raise UsageError("feature mode needs --out-prefix")
    q_str = _load_matrix(args.q_str)
    q_app = _load_matrix(args.q_app)
    k_app = _load_matrix(args.k_app)
    patch = diagnostics.PatchSelection(
        indices=_parse_int_list(args.patch) if args.patch else [],
        grid_rect=tuple(_parse_int_list(args.grid_rect)) if args.grid_rect else None,
    )
    indices = patch.resolve(q_app.rows, q_app.grid)
    qk_maps = diagnostics.patch_attention_map(
        q_str, k_app, diagnostics.MODE_QUERY_KEY, patch, args.contrast
    )
    qq_maps = diagnostics.patch_attention_map(
        q_str, q_app, diagnostics.MODE_QUERY_QUERY, patch, args.contrast
    )
    for j, mqk, mqq in zip(indices, qk_maps, qq_maps):
        diff = diagnostics.attention_diff_map(mqk, mqq, args.threshold)
        outputs.append(
            (f"{args.out_prefix}_patch{j:04d}.qaln",
             tensor_bytes(_map_tensor(diff.data, q_str.grid)))
        )
        if args.heatmap_prefix:
            pixels = diagnostics.heatmap_pixels(diff.data, q_str.grid)
            blob = diagnostics.pgm_bytes(pixels) if args.format == "pgm" else diagnostics.png_bytes(pixels)
            ext = "pgm" if args.format == "pgm" else "png"
            outputs.append((f"{args.heatmap_prefix}_patch{j:04d}.{ext}", blob))

    if args.report:
        leakage = None
        if args.region:
            region = np.nonzero(_load_matrix(args.region).data.reshape(-1))[0]
            rows = range(q_str.rows)
            leakage = {}
            for name, right in (("query_key", k_app), ("query_query", q_app)):
                full = diagnostics.full_attention_map(q_str, right, args.contrast)
                leakage[name] = diagnostics.leakage_mass(full, rows, region)
        payload = {
            "mode": [diagnostics.MODE_QUERY_KEY, diagnostics.MODE_QUERY_QUERY],
            "patch": list(indices),
            "leakage": leakage,
            "threshold": args.threshold,
        }
        outputs.append((args.report, _json_bytes(payload)))
    return outputs


def _cmd_simulate(args) -> list[tuple[str, bytes]]:
    from . import simulate  # deferred: keeps scipy out of non-simulate commands

    if args.suite:
        if not args.out_dir:
            raise UsageError("simulate --suite requires --out-dir")
        params, seeds = _load_suite_config(args.suite)
        reports = simulate.run_suite(params, seeds)
        os.makedirs(args.out_dir, exist_ok=True)
        return [
            (os.path.join(args.out_dir, f"report_seed{r.seed:04d}.json"),
             r.to_json().encode())
            for r in reports
        ]
    if args.seed is None:
        raise UsageError("simulate needs --seed or --suite")
    params = {
        "n": args.n,
        "n_labels": args.labels,
        "background_labels": args.background_labels,
        "d_latent": args.d_latent,
        "d": args.d,
        "sigma": args.sigma,
        "steps": args.steps,
        "k": args.k,
        "contrast": args.contrast,
        "init": args.init,
        "permute": not args.identity_gt,
        "mode": args.mode,
    }
    report = simulate.run_config(params, args.seed)
    if args.out:
        return [(args.out, report.to_json().encode())]
    sys.stdout.write(report.to_json())
    return []


def _load_suite_config(path: str) -> tuple[dict, list[int]]:
    from . import simulate

    opts = _parse_kv_file(path)
    if "seeds" not in opts:
        raise UsageError(f"{path}: suite config needs a 'seeds' entry")
    seeds = _parse_int_list(opts.pop("seeds"))
    params = dict(simulate.PINNED_SUITE)
    ints = {"n", "n_labels", "background_labels", "d_latent", "d", "steps", "k"}
    floats = {"sigma", "contrast"}
    bools = {"permute"}
    for key, val in opts.items():
        key = key.replace("-", "_")
        if key == "labels":
            key = "n_labels"
        if key in ints:
            params[key] = int(val)
        elif key in floats:
            params[key] = float(val)
        elif key in bools:
            params[key] = val.strip().lower() in ("1", "true", "yes", "on")
        elif key in ("init", "mode"):
            params[key] = val.strip()
        else:
            raise UsageError(f"{path}: unknown suite key {key!r}")
    return params, seeds


def _cmd_eval(args) -> list[tuple[str, bytes]]:
    if args.eval_command == "gram":
        fa = [_load_matrix(p) for p in args.features_a]
        fb = [_load_matrix(p) for p in args.features_b]
        payload = {"gram_loss": metrics.gram_loss(fa, fb)}
    else:
        payload = {
            "iou": metrics.mask_iou(
                metrics.load_mask(args.mask_a), metrics.load_mask(args.mask_b)
            )
        }
    if args.out:
        return [(args.out, _json_bytes(payload))]
    sys.stdout.write(_json_bytes(payload).decode())
    return []


# --- parser construction ------------------------------------------------------


def build_parser() -> tuple[_Parser, dict[str, _Parser]]:
    top = _Parser(prog="qalign", description=__doc__)
    sub = top.add_subparsers(dest="command", required=True)
    leaves: dict[str, _Parser] = {}

    def leaf(name: str, **kw) -> _Parser:
        p = sub.add_parser(name, **kw)
        p.add_argument("--config", help="key = value file of flag defaults")
        leaves[name] = p
        return p

    p = leaf("align", help="query-query alignment matrix S")
    p.add_argument("--q-app")
    p.add_argument("--q-str")
    p.add_argument("--out")

    p = leaf("aggregate", help="aggregation matrix P' from S")
    p.add_argument("--sim", help="alignment matrix file")
    p.add_argument("-k", "--k", type=int, default=DEFAULT_K, dest="k")
    p.add_argument("--out")

    p = leaf("rearrange", help="rearranged keys/values K*, V*")
    p.add_argument("--aggregation", help="precomputed reweighted P'")
    p.add_argument("--q-app", help="compute P' from queries instead")
    p.add_argument("--q-str")
    p.add_argument("-k", "--k", type=int, default=DEFAULT_K, dest="k")
    p.add_argument("--key")
    p.add_argument("--value")
    p.add_argument("--out-key")
    p.add_argument("--out-value")

    p = leaf("attend", help="cross-image attention (optionally rearranged)")
    p.add_argument("--query")
    p.add_argument("--key")
    p.add_argument("--value")
    p.add_argument("--contrast", type=float, default=DEFAULT_CONTRAST)
    p.add_argument("--rearranged", action="store_true")
    p.add_argument("--aggregation")
    p.add_argument("--out")
    p.add_argument("--map", help="also save the attention map")

    p = leaf("diffmap", help="thresholded attention difference maps")
    p.add_argument("--map-a")
    p.add_argument("--map-b")
    p.add_argument("--q-str")
    p.add_argument("--q-app")
    p.add_argument("--k-app")
    p.add_argument("--patch", help="comma list of appearance indices")
    p.add_argument("--grid-rect", help="row,col,h,w on the appearance grid")
    p.add_argument("--contrast", type=float, default=DEFAULT_CONTRAST)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--out")
    p.add_argument("--out-prefix")
    p.add_argument("--heatmap")
    p.add_argument("--heatmap-prefix")
    p.add_argument("--format", choices=("pgm", "png"), default="pgm")
    p.add_argument("--report", help="JSON diagnostic report path")
    p.add_argument("--region", help="0/1 tensor over appearance positions")

    p = leaf("simulate", help="synthetic transfer experiments")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--labels", type=int, default=4)
    p.add_argument("--background-labels", type=int, default=1)
    p.add_argument("--d-latent", type=int, default=32)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("-k", "--k", type=int, default=DEFAULT_K, dest="k")
    p.add_argument("--contrast", type=float, default=DEFAULT_CONTRAST)
    p.add_argument("--mode", choices=("baseline", "qalign"), default="qalign")
    p.add_argument("--init", choices=("gaussian", "orthonormal"), default="gaussian")
    p.add_argument("--identity-gt", action="store_true",
                   help="use the identity correspondence instead of a permutation")
    p.add_argument("--out", help="report path (stdout when omitted)")
    p.add_argument("--suite", help="suite config file (key = value, incl. seeds)")
    p.add_argument("--out-dir", help="per-seed report directory for --suite")

    p = leaf("eval", help="legacy metrics")
    esub = p.add_subparsers(dest="eval_command", required=True)
    g = esub.add_parser("gram")
    g.add_argument("--features-a", action="append")
    g.add_argument("--features-b", action="append")
    g.add_argument("--out")
    g.add_argument("--config", help=argparse.SUPPRESS)
    i = esub.add_parser("iou")
    i.add_argument("--mask-a")
    i.add_argument("--mask-b")
    i.add_argument("--out")
    i.add_argument("--config", help=argparse.SUPPRESS)
    leaves["eval.gram"] = g
    leaves["eval.iou"] = i

    return top, leaves


# Flags that must be present after merging the config file (the file may
# provide them, so argparse-level required= would reject valid invocations).
_REQUIRED = {
    "align": ("q_app", "q_str", "out"),
    "aggregate": ("sim", "out"),
    "rearrange": ("key", "value", "out_key", "out_value"),
    "attend": ("query", "key", "value", "out"),
    "diffmap": (),
    "simulate": (),
    "eval.gram": ("features_a", "features_b"),
    "eval.iou": ("mask_a", "mask_b"),
}


def _parse_kv_file(path: str) -> dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    opts = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        opts[key.strip()] = val.strip()
    return opts


def _apply_config(args: argparse.Namespace, argv: list[str], leaf: _Parser) -> None:
    """Fill flags from the config file where the command line did not set them."""
    opts = _parse_kv_file(args.config)
    actions = {a.dest: a for a in leaf._actions}
    for key, val in opts.items():
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None or dest == "config":
            raise UsageError(f"{args.config}: unknown flag {key!r}")
        explicit = any(
            a == opt or a.startswith(opt + "=")
            for opt in action.option_strings
            for a in argv
        )
        if explicit:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            setattr(args, dest, val.lower() in ("1", "true", "yes", "on"))
        elif action.type is not None:
            setattr(args, dest, action.type(val))
        else:
            setattr(args, dest, val)


_HANDLERS = {
    "align": _cmd_align,
    "aggregate": _cmd_aggregate,
    "rearrange": _cmd_rearrange,
    "attend": _cmd_attend,
    "diffmap": _cmd_diffmap,
    "simulate": _cmd_simulate,
    "eval": _cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    top, leaves = build_parser()
    try:
        try:
            args = top.parse_args(argv)
        except SystemExit as exc:  # --help lands here
            return int(exc.code or 0)
        leaf_key = args.command
        if leaf_key == "eval":
            leaf_key = f"eval.{args.eval_command}"
        if getattr(args, "config", None):
            _apply_config(args, argv, leaves[leaf_key])
        missing = [d for d in _REQUIRED[leaf_key] if not getattr(args, d, None)]
        if missing:
            flags = ", ".join("--" + d.replace("_", "-") for d in missing)
            raise UsageError(
                f"qalign {args.command}: missing required flags: {flags}\n"
                f"{leaves[leaf_key].format_usage()}"
            )
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    try:
        outputs = _HANDLERS[args.command](args)
        _commit(outputs)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except QAlignError as exc:
        print(f"qalign: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"qalign: error: IoFailure: {exc}", file=sys.stderr)
        return 2
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
