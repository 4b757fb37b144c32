"""Command-line entry point: ``swankv <subcommand> ...``.

Exit codes: 0 success, 2 invalid configuration or input, 3 I/O failure,
4 a ``--validate`` check failed. ``SWAN_THREADS`` caps the worker threads
used by sweeps (default 1).
"""

import argparse
import csv
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import __version__
from .cache import PRECISIONS, compression_curve, dense_vector_bytes, sparse_vector_bytes
from .calibration import VARIANTS, ProjectionSet, calibrate, collect_activations, make_ablation_variant
from .config import ModelConfig
from .corpus import decode_tokens, encode, load_corpus
from .exceptions import ConfigurationError, InvalidInputError, SwanError
from .experiments import (
    ABLATION_VARIANTS,
    RETENTION_GRID,
    SWEEP_CSV_COLUMNS,
    ablation_study,
    compression_sweep,
    energy_concentration,
    retention_to_k,
    split_sweep_rows,
)
from .flops import NEVER, break_even_length, crossover_validate, write_flops_csv
from .model import RUN_CSV_COLUMNS, SwanParams, build_toy_model, decode, load_model, save_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CHECK = 4

DEFAULT_PROMPT = "The harbour "


class CheckFailed(SwanError):
    pass


def threads_from_env(env=None):
    env = os.environ if env is None else env
    raw = env.get("SWAN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"SWAN_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError(f"SWAN_THREADS must be a positive integer, got {raw!r}")
    return n


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text):
    return [x.strip() for x in text.split(",") if x.strip()]


@dataclass
class RunSpec:
    """Parsed and validated invocation."""

    command: str
    config: ModelConfig
    seed: int
    model_path: str = None
    corpus_path: str = None
    k_key: int = None
    k_value: int = None
    buffer: int = 0
    precision: str = "fp16"
    variant: str = "learned"
    out: str = None

    @classmethod
    def from_args(cls, ns):
        config = _config_from_args(ns)
        spec = cls(
            command=ns.command,
            config=config,
            seed=ns.seed,
            model_path=getattr(ns, "model", None),
            corpus_path=getattr(ns, "corpus", None),
            buffer=getattr(ns, "buffer", 0),
            precision=getattr(ns, "precision", "fp16"),
            variant=getattr(ns, "variant", "learned"),
            out=getattr(ns, "out", None),
        )
        if hasattr(ns, "k_key"):
            spec.k_key, spec.k_value = _resolve_k(ns, config.d_head)
        if spec.buffer is not None and spec.buffer < 0:
            raise ConfigurationError("--buffer must be non-negative")
        return spec

    def build_model(self):
        if self.model_path:
            model = load_model(self.model_path)
            if model.config != self.config:
                raise ConfigurationError("weight file config differs from the requested config")
            return model
        return build_toy_model(self.config, self.seed)

    def corpus(self):
        return load_corpus(self.corpus_path)


def _config_from_args(ns):
    fields = {}
    if getattr(ns, "config", None):
        with open(ns.config, encoding="utf-8") as fh:
            fields.update(json.load(fh))
    if getattr(ns, "model", None) and not getattr(ns, "config", None):
        fields.update(load_model(ns.model).config.to_dict())
    for flag, name in (("d_head", "d_head"), ("layers", "num_layers"), ("q_heads", "n_q_heads"), ("kv_heads", "n_kv_heads")):
        value = getattr(ns, flag, None)
        if value is not None:
            fields[name] = value
    d_head = fields.get("d_head", ModelConfig.d_head)
    n_q = fields.get("n_q_heads", ModelConfig.n_q_heads)
    fields.setdefault("n_kv_heads", n_q)
    if getattr(ns, "d_model", None) is not None:
        fields["d_model"] = ns.d_model
    elif "d_model" not in fields or any(getattr(ns, f, None) is not None for f in ("d_head", "q_heads")):
        fields["d_model"] = d_head * n_q
    try:
        return ModelConfig(**fields)
    except TypeError as exc:
        raise ConfigurationError(f"bad model config: {exc}") from None


def _resolve_k(ns, d_head):
    if ns.k_key is not None or ns.k_value is not None:
        k_key = ns.k_key if ns.k_key is not None else ns.k_value
        k_value = ns.k_value if ns.k_value is not None else k_key
    else:
        k_key = k_value = retention_to_k(ns.k_ratio, d_head)
    for name, k in (("k_key", k_key), ("k_value", k_value)):
        if not 0 <= k <= d_head:
            raise ConfigurationError(f"{name}={k} outside [0, {d_head}]")
    return k_key, k_value


@contextmanager
def _output(path):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            yield fh


def _info(msg):
    print(msg, file=sys.stderr)


def _load_or_calibrate(spec, model, projections_path):
    if projections_path:
        pset = ProjectionSet.load(projections_path)
        if pset.config != model.config:
            raise ConfigurationError("projection file was calibrated for a different model config")
        return pset
    corpus = spec.corpus()
    _info(f"no --projections given; calibrating on {corpus.calibration_bytes} tokens of {corpus.corpus_id}")
    return calibrate(model, corpus.calibration_tokens(), seed=spec.seed, corpus_id=corpus.corpus_id)


# ---------------------------------------------------------------------------
# subcommands


def cmd_calibrate(ns):
    spec = RunSpec.from_args(ns)
    model = spec.build_model()
    corpus = spec.corpus()
    tokens = corpus.calibration_tokens(ns.calib_tokens)
    pset = calibrate(model, tokens, seed=spec.seed, corpus_id=corpus.corpus_id)
    if spec.variant != "learned":
        pset = make_ablation_variant(pset, spec.variant, spec.seed)
    if spec.out is None:
        raise ConfigurationError("calibrate needs --out")
    pset.save(spec.out)
    if ns.save_model:
        save_model(model, ns.save_model)
    resid = pset.residuals()
    energy = energy_concentration(pset, collect_activations(model, tokens), ks=(spec.config.d_head // 2,))
    print(f"projection set: variant={pset.variant} seed={pset.seed} tokens={pset.n_tokens} corpus={pset.corpus_id}")
    print("layer  max_resid_qk  max_resid_vo  energy@k=d_h/2  random_max")
    for li, row in enumerate(energy):
        print(f"{li:5d}  {resid[li, :, 0].max():12.2e}  {resid[li, :, 1].max():12.2e}  {row.learned:14.4f}  {row.random_max:10.4f}")
    return EXIT_OK


def cmd_run(ns):
    spec = RunSpec.from_args(ns)
    model = spec.build_model()
    prompt = encode(ns.prompt)
    params = None
    if ns.mode == "swan":
        pset = _load_or_calibrate(spec, model, ns.projections)
        params = SwanParams(spec.k_key, spec.k_value, spec.buffer, spec.precision, pset)
    tokens, metrics = decode(model, prompt, ns.steps, ns.mode, params, track_drift=ns.mode == "swan")
    with _output(spec.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUN_CSV_COLUMNS)
        swan = ns.mode == "swan"
        for i in range(metrics.steps):
            w.writerow(
                (
                    i,
                    metrics.L[i],
                    ns.mode,
                    metrics.modeled_flops_standard[i],
                    metrics.modeled_flops_swan[i] if swan else "",
                    metrics.measured_flops_baseline[i] if swan else metrics.measured_flops[i],
                    metrics.measured_flops[i] if swan else "",
                    metrics.cache_bytes[i],
                    metrics.baseline_cache_bytes[i] if swan else metrics.cache_bytes[i],
                    f"{metrics.drift_max[i]:.6g}" if swan else 0,
                    f"{metrics.drift_l2[i]:.6g}" if swan else 0,
                )
            )
    _info(f"generated: {decode_tokens(tokens[len(prompt):])!r}")
    if ns.mode == "swan":
        _info(f"mean drift (L2): {metrics.mean_drift():.6g}; final cache bytes {metrics.cache_bytes[-1]}")
        if ns.validate:
            base, _ = decode(model, prompt, ns.steps, "baseline", track_drift=False)
            if not np.array_equal(base, tokens):
                raise CheckFailed("SWAN decode diverged from the baseline token sequence")
            _info("validate: token sequence identical to baseline")
    return EXIT_OK


def cmd_sweep(ns):
    workers = threads_from_env()
    spec = RunSpec.from_args(ns)
    model = spec.build_model()
    corpus = spec.corpus()
    pset = _load_or_calibrate(spec, model, ns.projections)
    windows = corpus.heldout_windows(ns.window_length, ns.windows, spec.seed)
    if ns.kv_split:
        rows = split_sweep_rows(model, pset, windows, ns.precisions, ns.buffers, max_workers=workers)
    else:
        rows = compression_sweep(model, pset, windows, ns.retentions, ns.precisions, ns.buffers, max_workers=workers)
    with _output(spec.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_CSV_COLUMNS)
        for r in rows:
            w.writerow(
                (
                    r.retention, "" if r.key_ratio is None else r.key_ratio, r.k_key, r.k_value, r.precision, r.buffer,
                    f"{r.memory_ratio:.6f}", r.cache_bytes, r.baseline_cache_bytes, f"{r.mean_drift:.6g}",
                    f"{r.max_drift:.6g}", f"{r.perplexity:.6f}", f"{r.reference_perplexity:.6f}",
                )
            )
    return EXIT_OK


def cmd_breakeven(ns):
    value = break_even_length(ns.d_h, ns.k, ns.b)
    # keep stdout pure CSV when the rows go there
    human = sys.stderr if ns.csv == "-" else sys.stdout
    print("never" if value == NEVER else value, file=human)
    if ns.validate or ns.csv:
        if ns.k >= ns.d_h:
            return EXIT_OK
        rep = crossover_validate(ns.d_h, ns.k, ns.b, seed=ns.seed)
        if ns.csv:
            with _output(ns.csv) as fh:
                write_flops_csv(fh, rep.rows, rep.bytes_standard, rep.bytes_swan)
        line = f"measured crossover: {'never' if not rep.reached else rep.measured} (gap {rep.gap})"
        print(line, file=human)
        if ns.validate and not rep.agrees(2):
            raise CheckFailed(f"measured crossover {rep.measured} differs from the model {value} by more than 2")
    return EXIT_OK


def cmd_ablate(ns):
    spec = RunSpec.from_args(ns)
    model = spec.build_model()
    corpus = spec.corpus()
    base = _load_or_calibrate(spec, model, ns.projections)
    held = corpus.heldout_tokens()
    batch = collect_activations(model, held[: ns.heldout_tokens])
    rows = ablation_study(base, batch, ns.retention, spec.seed, ns.variants)
    with _output(spec.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("variant", "retention", "key_error", "value_error", "mean_error"))
        for r in rows:
            w.writerow((r.variant, ns.retention, f"{r.key_error:.6g}", f"{r.value_error:.6g}", f"{r.error:.6g}"))
    return EXIT_OK


def cmd_curve(ns):
    if ns.precision not in PRECISIONS:
        raise ConfigurationError(f"unknown precision {ns.precision!r}")
    dense = dense_vector_bytes(ns.d_head, "fp16")
    with _output(ns.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("k_active", "retention", "bytes_sparse", "bytes_dense", "memory_ratio"))
        for k, (ret, ratio) in enumerate(compression_curve(ns.d_head, ns.precision)):
            w.writerow((k, f"{ret:.6f}", sparse_vector_bytes(k, ns.precision), dense, f"{ratio:.6f}"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--config", help="JSON file with ModelConfig fields")
    g.add_argument("--model", help="toy-model weight file (overrides building from --seed)")
    g.add_argument("--d-model", type=int)
    g.add_argument("--d-head", type=int)
    g.add_argument("--layers", type=int)
    g.add_argument("--q-heads", type=int)
    g.add_argument("--kv-heads", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corpus", help="text file to calibrate/evaluate on (default: bundled corpus)")


def _cache_flags(p):
    g = p.add_argument_group("cache")
    g.add_argument("--k-ratio", type=float, default=0.5, help="retention ratio; k = round(ratio*d_h), ties to even")
    g.add_argument("--k-key", type=int)
    g.add_argument("--k-value", type=int)
    g.add_argument("--buffer", type=int, default=0)
    g.add_argument("--precision", choices=PRECISIONS, default="fp16")


def build_parser():
    parser = argparse.ArgumentParser(prog="swankv", description="Rotated, pruned KV-cache toolkit")
    parser.add_argument("--version", action="version", version=f"swankv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="derive and save a projection set")
    _model_flags(p)
    p.add_argument("--variant", choices=VARIANTS, default="learned")
    p.add_argument("--calib-tokens", type=int, default=None)
    p.add_argument("--save-model", help="also write the toy-model weight file here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="greedy decode with per-step metrics CSV")
    _model_flags(p)
    _cache_flags(p)
    p.add_argument("--mode", choices=("baseline", "swan"), default="swan")
    p.add_argument("--projections", help="projection file (calibrated on the fly if omitted)")
    p.add_argument("--prompt", default=DEFAULT_PROMPT)
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--validate", action="store_true", help="exit 4 unless tokens match the baseline decode")
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="retention x precision x buffer grid (or the K/V split grid)")
    _model_flags(p)
    p.add_argument("--projections")
    p.add_argument("--retentions", type=_float_list, default=list(RETENTION_GRID))
    p.add_argument("--precisions", type=_str_list, default=["fp16", "fp8"])
    p.add_argument("--buffers", type=_int_list, default=[0])
    p.add_argument("--kv-split", action="store_true", help="sweep k_key + k_value = d_h instead")
    p.add_argument("--windows", type=int, default=2)
    p.add_argument("--window-length", type=int, default=128)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("breakeven", help="modeled break-even length")
    p.add_argument("d_h", type=int)
    p.add_argument("k", type=int)
    p.add_argument("b", type=int, nargs="?", default=0)
    p.add_argument("--validate", action="store_true", help="run the instrumented crossover and exit 4 on disagreement")
    p.add_argument("--csv", help="write per-length FLOP rows here")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_breakeven)

    p = sub.add_parser("ablate", help="compare projection variants")
    _model_flags(p)
    p.add_argument("--projections")
    p.add_argument("--retention", type=float, default=0.5)
    p.add_argument("--variants", type=_str_list, default=list(ABLATION_VARIANTS))
    p.add_argument("--heldout-tokens", type=int, default=2048)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("curve", help="memory ratio versus retention")
    p.add_argument("--d-head", type=int, default=128)
    p.add_argument("--precision", default="fp16")
    p.add_argument("--out")
    p.set_defaults(func=cmd_curve)
    return parser


def main(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        return ns.func(ns)
    except CheckFailed as exc:
        print(f"swankv: check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (ConfigurationError, InvalidInputError, SwanError) as exc:
        print(f"swankv: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"swankv: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, json.JSONDecodeError) as exc:
        print(f"swankv: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
