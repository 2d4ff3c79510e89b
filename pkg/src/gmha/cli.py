"""Command-line entry point: ``gmha report|equiv|gradcheck|train|decode``.

Exit codes: 0 success, 1 oracle failure, 2 config/IO error, 3 training divergence.
``GMHA_SEED`` overrides the seed of train/decode/equiv/gradcheck.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import oracles
from .attention import ArchSpec, ModelDims
from .capacity import capacity_report
from .checkpoint import CheckpointError, load_model
from .config import PRESETS, RunConfig, expand_presets, load_config, shrink_dims
from .errors import ConfigurationError, GMHAError
from .model import ToyLM, init_weights, non_embedding_params
from .tensor import finite_diff_gradcheck
from .train import make_corpus, train_loop

EXIT_OK, EXIT_ORACLE, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
REPORT_COLUMNS = ("arch", "kv_bytes_per_token", "attn_params", "model_params", "heads", "frh", "slsd", "ter")
GRADCHECK_TOL = 1e-4


def gradcheck_step(kind: str) -> float:
    # FPBA gradients reach 1e-7 at H=16, where a 1e-5 step is roundoff-limited
    return 1e-4 if kind == "fpba" else 1e-5


def _seed(default: int) -> int:
    env = os.environ.get("GMHA_SEED")
    if env is None:
        return default
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigurationError(f"GMHA_SEED must be an integer, got {env!r}") from exc


def _arch_from_args(kind: str, pos_embed: str, variant: str | None = None) -> ArchSpec:
    kind = kind.replace("-", "_")
    if kind == "mfa_kr":
        variant = variant or "gated"
    return ArchSpec(kind, kr_variant=variant, pos_embed=pos_embed)


# -- report ------------------------------------------------------------------------

def report_rows(configs: list[tuple[str, ArchSpec, ModelDims]], elem_bytes: int) -> list[dict]:
    rows = []
    for name, spec, dims in configs:
        r = capacity_report(spec, dims, elem_bytes)
        rows.append({
            "arch": name,
            "kv_bytes_per_token": r.kv_bytes_per_token,
            "attn_params": r.param_count_formula,
            "model_params": non_embedding_params(spec, dims),
            "heads": r.heads,
            "frh": r.frh,
            "slsd": r.slsd,
            "ter": r.ter,
        })
    return rows


def format_rows(rows: list[dict], fmt: str) -> str:
    if fmt == "json":
        return json.dumps(rows, indent=2) + "\n"
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def cmd_report(args) -> int:
    configs = []
    if args.config:
        rc = load_config(args.config)
        configs.append((Path(args.config).stem, rc.arch, rc.dims))
    for name in expand_presets(args.preset or ([] if args.config else ["7b", "1b"])):
        spec, dims = PRESETS[name]
        configs.append((name, spec, dims))
    _emit(format_rows(report_rows(configs, args.elem_bytes), args.format), args.out)
    return EXIT_OK


# -- equiv ---------------------------------------------------------------------------

def cmd_equiv(args) -> int:
    archs = oracles.ARCHS if args.arch == "all" else tuple(a.replace("-", "_") for a in args.arch.split(","))
    for a in archs:
        if a not in oracles.ARCHS:
            raise ConfigurationError(f"unknown architecture {a!r}")
    chosen = oracles.ORACLES if args.oracle == "all" else tuple(args.oracle.split(","))
    summary = oracles.run_suite(archs, args.pos_embed, args.trials, _seed(args.seed), chosen)
    _emit(json.dumps(summary, indent=2, sort_keys=True) + "\n", args.out)
    return EXIT_OK if summary["passed"] else EXIT_ORACLE


# -- gradcheck ---------------------------------------------------------------------------

def gradcheck_dims(kind: str) -> ModelDims:
    base = dict(H=16, L=2, vocab_V=32, ffn_F=24)
    return {
        "fpba": ModelDims(**base),
        "mha": ModelDims(n_heads=4, head_dim=4, **base),
        "mqa": ModelDims(n_heads=4, head_dim=4, **base),
        "gqa": ModelDims(n_heads=4, head_dim=4, groups_g=2, **base),
        "mla": ModelDims(n_heads=2, head_dim=4, latent_C=8, rope_dim_dr=2, **base),
        "mfa": ModelDims(n_heads=3, head_dim=8, latent_C=8, **base),
        "mfa_kr": ModelDims(n_heads=3, head_dim=8, latent_C=8, **base),
    }[kind]


def model_gradcheck(spec: ArchSpec, seed: int = 0, step: float | None = None) -> float:
    """Finite-difference check of every parameter of a 2-layer H=16 toy model."""
    step = gradcheck_step(spec.kind) if step is None else step
    dims = gradcheck_dims(spec.kind)
    rng = np.random.default_rng(seed)
    model = init_weights(ToyLM(spec, dims), seed, std=0.3)
    for name in model.params:
        if name.endswith(".alpha"):  # a zero gate would hide the N gradient
            model.params[name] = rng.normal(size=model.params[name].shape)
    tokens = rng.integers(0, dims.vocab_V, size=(2, 7))
    params = {k: v.copy() for k, v in model.params.items()}
    return finite_diff_gradcheck(lambda P: model.loss(tokens[:, :-1], tokens[:, 1:], P), params, step)


def cmd_gradcheck(args) -> int:
    pos = args.pos_embed or ("alibi" if args.arch == "fpba" else "rope")
    spec = _arch_from_args(args.arch, pos, args.kr_variant)
    err = model_gradcheck(spec, _seed(args.seed))
    ok = err <= GRADCHECK_TOL
    print(f"arch={spec.kind} pos_embed={pos} max_rel_err={err:.3e} tol={GRADCHECK_TOL:.0e} {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_ORACLE


# -- train ------------------------------------------------------------------------------------

def cmd_train(args) -> int:
    rc: RunConfig = load_config(args.config)
    cfg = rc.train.replace(seed=_seed(rc.train.seed))
    if args.steps is not None:
        cfg = cfg.replace(total_steps=args.steps, warmup_steps=min(cfg.warmup_steps, args.steps - 1))
    if args.corpus:
        try:
            corpus = Path(args.corpus).read_bytes()
        except OSError as exc:
            raise ConfigurationError(f"cannot read corpus {args.corpus}: {exc}") from exc
    else:
        corpus = make_corpus()
    sink = open(args.metrics, "w") if args.metrics else sys.stdout
    try:
        def emit(row):
            sink.write(f"step={row['step']} loss={row['loss']:.10f} lr={row['lr']:.6e} "
                       f"grad_norm={row['grad_norm']:.6e} status={row['status']}\n")

        result = train_loop(cfg, corpus, emit, checkpoint=args.out)
    finally:
        if sink is not sys.stdout:
            sink.close()
    return EXIT_DIVERGED if result.status == "diverged" else EXIT_OK


# -- decode -----------------------------------------------------------------------------------

def cmd_decode(args) -> int:
    if args.ckpt:
        try:
            model, _ = load_model(args.ckpt)
        except (OSError, CheckpointError) as exc:
            raise ConfigurationError(f"cannot load checkpoint {args.ckpt}: {exc}") from exc
    elif args.preset:
        if args.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {args.preset!r}")
        spec, dims = PRESETS[args.preset]
        dims = shrink_dims(dims, args.shrink)
        model = init_weights(ToyLM(spec, dims), _seed(0))
    else:
        raise ConfigurationError("decode needs --ckpt or --preset")
    prompt = list(args.prompt.encode())
    out, cache = model.generate(prompt, args.steps)
    tokens = cache.token_count(0)
    from .kvcache import cache_bytes_per_token

    predicted = cache_bytes_per_token(model.spec, model.dims, cache.elem_bytes) * tokens
    measured = cache.measured_bytes()
    text = bytes(t for t in out if t < 256).decode("utf-8", errors="replace")
    print(f"generated: {text!r}")
    print(f"tokens cached: {tokens}")
    print(f"measured bytes: {measured}")
    print(f"predicted bytes: {predicted}")
    print(f"predicted==measured: {str(predicted == measured).lower()}")
    return EXIT_OK if predicted == measured else EXIT_ORACLE


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gmha", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("report", help="KV cache / parameter / rank table for presets or a config")
    r.add_argument("--preset", action="append", help="preset name or group (7b, 1b); repeatable")
    r.add_argument("--config", help="JSON run config")
    r.add_argument("--elem-bytes", type=int, default=2)
    r.add_argument("--format", choices=("csv", "json"), default="csv")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    e = sub.add_parser("equiv", help="run the randomized correctness oracles")
    e.add_argument("--arch", default="all", help="comma list or 'all'")
    e.add_argument("--pos-embed", choices=("none", "rope", "alibi"), default="none")
    e.add_argument("--oracle", default="all", help=f"comma list from {','.join(oracles.ORACLES)}")
    e.add_argument("--trials", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_equiv)

    g = sub.add_parser("gradcheck", help="finite-difference check of a 2-layer H=16 model")
    g.add_argument("--arch", required=True, choices=oracles.ARCHS + ("mfa-kr",))
    g.add_argument("--kr-variant", choices=("vanilla", "extra_proj", "residual", "gated"))
    g.add_argument("--pos-embed", choices=("none", "rope", "alibi"))
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train", help="train a toy byte-level LM")
    t.add_argument("--config", required=True)
    t.add_argument("--corpus", help="raw byte file (default: built-in repetitive corpus)")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--metrics", help="metrics file (default: stdout)")
    t.add_argument("--steps", type=int, help="override total_steps")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="greedy cached decoding with cache statistics")
    d.add_argument("--ckpt")
    d.add_argument("--preset")
    d.add_argument("--shrink", type=int, default=16, help="width divisor for --preset models")
    d.add_argument("--prompt", default="")
    d.add_argument("--steps", type=int, default=10)
    d.set_defaults(func=cmd_decode)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (GMHAError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
