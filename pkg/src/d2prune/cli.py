"""Command-line surface: inspect, calibrate, divergence, prune, eval.

Exit codes: 0 success, 1 user error, 2 internal error. Heavy imports happen
after argument parsing so --threads / D2P_THREADS can cap the BLAS worker
pool before numpy loads. No command mutates its input checkpoint directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

DEFAULT_TAU = 0.20
DEFAULT_SAMPLES = 16


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(self.prog + ": error: " + message)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="d2p", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS worker threads (also D2P_THREADS)")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("inspect", help="parameter counts, plan summary, activation stats")
    sp.add_argument("--model", required=True)
    sp.add_argument("--corpus", default=None)
    sp.add_argument("--out", default=None)

    sp = sub.add_parser("calibrate", help="build and persist a calibration batch")
    sp.add_argument("--model", required=True)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--corpus", default=None)
    src.add_argument("--self-gen", action="store_true")
    sp.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    sp.add_argument("--seq-len", type=int, default=None,
                    help="default: 1024 for gpt2 flavor, 128 for llama")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("divergence", help="pairwise head divergence matrices")
    sp.add_argument("--model", required=True)
    sp.add_argument("--calib", required=True)
    sp.add_argument("--tau", type=float, default=DEFAULT_TAU)
    sp.add_argument("--out", required=True)
    sp.add_argument("--dot", default=None)

    sp = sub.add_parser("prune", help="prune to a sparsity target, optionally with recovery")
    sp.add_argument("--model", required=True)
    sp.add_argument("--calib", required=True)
    sp.add_argument("--sparsity", type=float, required=True)
    sp.add_argument("--blocks", default=None, help="A:B block range, default per flavor")
    sp.add_argument("--metric", default="second-moment",
                    choices=["second-moment", "l1", "l2", "random"])
    sp.add_argument("--tau", type=float, default=DEFAULT_TAU)
    sp.add_argument("--recover", action="store_true")
    sp.add_argument("--recovery-calib", default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--ridge", type=float, default=1e-2)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("eval", help="perplexity on a token corpus")
    sp.add_argument("--model", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--chunk-len", type=int, default=None)
    sp.add_argument("--out", default=None)
    return p


def _set_threads(n: int | None):
    if n is None:
        env = os.environ.get("D2P_THREADS")
        n = int(env) if env else None
    if n is not None:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _write_json(path: str | None, payload: dict):
    if path:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=1, sort_keys=True)
            f.write("\n")


def _default_seq_len(config) -> int:
    base = 1024 if config.flavor == "gpt2" else 128
    return min(base, config.max_seq_len)


def _default_blocks(config) -> tuple[int, int]:
    if config.flavor == "llama":
        return (min(4, config.n_layers - 1), min(30, config.n_layers))
    return (0, config.n_layers)


def _parse_blocks(text: str, n_layers: int) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        lo, hi = int(a), int(b)
    except ValueError:
        raise ValueError(f"--blocks must be A:B, got {text!r}")
    if not (0 <= lo < hi <= n_layers):
        raise ValueError(f"--blocks {text} outside valid range 0:{n_layers}")
    return lo, hi


def _cmd_inspect(args) -> int:
    from .checkpoint import load_corpus
    from .evaluation import inspect
    from .model import load_graph

    graph = load_graph(args.model)
    batches = None
    if args.corpus:
        corpus = load_corpus(args.corpus, graph.config.vocab_size)
        s = min(256, graph.config.max_seq_len)
        n = min(4, len(corpus) // s)
        if n == 0:
            raise ValueError(f"corpus too short for inspection windows of {s} tokens")
        batches = corpus.token_ids[: n * s].reshape(n, s).astype("int64")
    report = inspect(graph, batches)
    print(f"total parameters: {report['total_params']:,}")
    plan = report["plan"]
    if plan == "no plan applied":
        print("plan: no plan applied")
    else:
        removed = sum(e["removed"] for e in plan.values())
        print(f"plan: {len(plan)} modules, {removed} units removed")
    if "mean_abs_activation" in report:
        for mid, v in report["mean_abs_activation"].items():
            print(f"  {mid}: mean |activation| = {v:.4f}")
    _write_json(args.out, report)
    return 0


def _cmd_calibrate(args) -> int:
    from .calib import CalibrationSpec, build_batches, save_calibration
    from .checkpoint import load_corpus
    from .model import load_graph

    graph = load_graph(args.model)
    seq_len = args.seq_len or _default_seq_len(graph.config)
    if args.self_gen:
        spec = CalibrationSpec(args.samples, seq_len, args.seed, "self_generation")
        batch = build_batches(spec, graph=graph)
    else:
        spec = CalibrationSpec(args.samples, seq_len, args.seed, "corpus")
        corpus = load_corpus(args.corpus, graph.config.vocab_size)
        batch = build_batches(spec, corpus=corpus)
    save_calibration(args.out, batch)
    print(f"calibration batch {batch.tokens.shape} -> {args.out} (digest {batch.digest})")
    return 0


def _cmd_divergence(args) -> int:
    from .calib import load_calibration
    from .model import load_graph
    from .stats import collect_stats

    graph = load_graph(args.model)
    batch = load_calibration(args.calib, graph.config.vocab_size)
    stats = collect_stats(graph, batch.tokens, divergence=True, head_cov=False, ffn_cov=False)
    payload = {
        "schema": "d2p/1",
        "tau": args.tau,
        "calibration_digest": batch.digest,
        "blocks": {mid: dm.to_json_dict(args.tau) for mid, dm in sorted(stats.attn_divergence.items())},
    }
    _write_json(args.out, payload)
    n_edges = sum(len(b["edges"]) for b in payload["blocks"].values())
    print(f"divergence over {len(payload['blocks'])} attention modules, "
          f"{n_edges} edges below tau={args.tau} -> {args.out}")
    if args.dot:
        with open(args.dot, "w", encoding="utf-8") as f:
            for mid, dm in sorted(stats.attn_divergence.items()):
                f.write(dm.to_dot(args.tau, name=mid) + "\n")
    return 0


def _cmd_prune(args) -> int:
    from .calib import load_calibration
    from .linalg import SolveOptions
    from .model import load_graph, save_graph
    from .pruner import SparsityTarget
    from .recovery import (
        PRUNE_ONLY,
        PRUNE_WITH_RECOVERY,
        PipelineSettings,
        run_pipeline,
    )

    if not (0.0 <= args.sparsity < 1.0):
        raise ValueError(f"--sparsity must be in [0, 1), got {args.sparsity}")
    graph = load_graph(args.model)
    blocks = (
        _parse_blocks(args.blocks, graph.config.n_layers)
        if args.blocks
        else _default_blocks(graph.config)
    )
    target = SparsityTarget(args.sparsity, blocks)
    batch = load_calibration(args.calib, graph.config.vocab_size)
    settings = PipelineSettings(
        metric=args.metric,
        tau=args.tau,
        seed=args.seed,
        solve=SolveOptions(args.ridge),
    )
    if args.recover:
        tokens = batch.tokens
        digest = batch.digest
        if args.recovery_calib:
            rbatch = load_calibration(args.recovery_calib, graph.config.vocab_size)
            tokens, digest = rbatch.tokens, rbatch.digest
        pruned, manifest = run_pipeline(
            graph, target, mode=PRUNE_WITH_RECOVERY, settings=settings, batches=tokens
        )
    else:
        digest = batch.digest
        pruned, manifest = run_pipeline(
            graph, target, mode=PRUNE_ONLY, settings=settings, batches=batch.tokens
        )
    manifest["calibration_digest"] = digest
    for mp in (pruned.applied_plan.modules if pruned.applied_plan else {}).values():
        mp.provenance.setdefault("calibration_digest", digest)
    save_graph(args.out, pruned)
    _write_json(os.path.join(args.out, "manifest.json"), manifest)
    sp = manifest["sparsity"]
    print(
        f"pruned {sp['removed_params']:,}/{sp['prunable_params']:,} prunable params "
        f"({100 * sp['prunable_ratio']:.2f}%) -> {args.out}"
    )
    return 0


def _cmd_eval(args) -> int:
    from .checkpoint import load_corpus
    from .evaluation import perplexity
    from .model import load_graph

    graph = load_graph(args.model)
    corpus = load_corpus(args.corpus, graph.config.vocab_size)
    chunk = args.chunk_len or min(1024, graph.config.max_seq_len)
    report = perplexity(graph, corpus, chunk, corpus_id=os.path.basename(args.corpus))
    print(
        f"perplexity {report.perplexity:.4f} over {report.n_tokens_scored:,} tokens "
        f"(chunk {report.chunk_len}, mean NLL {report.mean_nll:.4f} nats)"
    )
    _write_json(args.out, report.to_json_dict())
    return 0


_COMMANDS = {
    "inspect": _cmd_inspect,
    "calibrate": _cmd_calibrate,
    "divergence": _cmd_divergence,
    "prune": _cmd_prune,
    "eval": _cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return 1
        return 0 if exc.code in (0, None) else 1
    _set_threads(args.threads)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"d2p {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - internal failure path
        from .errors import D2PError

        if isinstance(exc, D2PError):
            print(f"d2p {args.command}: {exc}", file=sys.stderr)
            return 1
        print(f"d2p {args.command}: internal error: {exc!r}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
