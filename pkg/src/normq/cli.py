"""Command-line entry point: ``normq <mode> [flags]``.

Modes write fixed-header CSVs into ``--out`` plus a PNG figure next to them.
Every random draw derives from ``--seed``.  A JSON ``--config`` file may hold
any flag (by its long name, dashes or underscores); flags given on the
command line win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import compression as cmp
from . import decode, metrics, model_io, plotting
from .hmm import HmmModel, sample_corpus, validate_model
from .training import (Corpus, EmConfig, derive_rng, quantization_aware_train, random_init, train)

log = logging.getLogger("normq")

MODES = ("train", "quantize", "eval", "decode", "sweep", "synth")
SCHEME_ALIASES = {"prune": "prune", "linear": "linear-fixed", "linear-fixed": "linear-fixed",
                  "kmeans": "kmeans", "norm-q": "norm-q"}

DEFAULTS = {
    "model": None, "candidate": None, "corpus": None, "out": ".",
    "bits": "8", "interval": "20", "epochs": 1, "chunks": 1,
    "scheme": "norm-q", "quantizer": "none", "epsilon": cmp.DEFAULT_EPSILON,
    "ratio": 0.9, "trials": 500, "max_len": 12, "seed": 0,
    "hidden_size": 16, "vocab_size": None, "heldout": 0.1, "smoothing": 1e-9,
    "keyword": None, "sequences": 2000, "length": 16,
}

DECODE_HEADER = ("label", "guided", "trials", "max_len", "success_rate")
SWEEP_HEADER = ("bits", "interval", "steps", "n_events", "final_train_lld", "final_test_lld", "lld_gap")


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="normq", description="Train, quantize and evaluate discrete HMMs.")
    p.add_argument("mode_pos", nargs="?", choices=MODES, metavar="mode", help=" | ".join(MODES))
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--config", help="JSON file of flag values")
    a = p.add_argument
    a("--model", help="model file (reference model for eval)")
    a("--candidate", help="candidate model for eval, guide model for decode")
    a("--corpus", help="corpus file: one sequence of token IDs per line")
    a("--out", help="output directory")
    a("--bits", help="bit width or comma list")
    a("--interval", "--intervals", dest="interval", help="quantization interval or comma list")
    a("--epochs", type=int)
    a("--chunks", type=int)
    a("--scheme", choices=sorted(SCHEME_ALIASES))
    a("--quantizer", choices=("none", "norm-q", "kmeans"))
    a("--epsilon", type=float)
    a("--ratio", type=float, help="global pruning ratio")
    a("--trials", type=int)
    a("--max-len", type=int)
    a("--seed", type=int)
    a("--hidden-size", type=int)
    a("--vocab-size", type=int)
    a("--heldout", type=float, help="held-out fraction (taken from the end of the corpus)")
    a("--smoothing", type=float)
    a("--keyword", action="append", help="comma-separated token IDs; repeat for several keywords")
    a("--sequences", type=int, help="synth: number of sequences")
    a("--length", type=int, help="synth: sequence length")
    a("-v", "--verbose", action="store_true")
    return p


def _int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    if isinstance(text, int):
        return [text]
    try:
        vals = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise UsageError("empty integer list")
    return vals


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        for k, v in loaded.items():
            key = k.replace("-", "_")
            if key == "intervals":
                key = "interval"
            if key not in cfg and key != "mode":
                raise UsageError(f"unknown config key {k!r}")
            cfg[key] = v
    for k, v in vars(args).items():
        if k in ("mode_pos", "mode", "config", "verbose") or v is None:
            continue
        cfg[k] = v
    if args.mode_pos and args.mode and args.mode_pos != args.mode:
        raise UsageError(f"conflicting modes {args.mode_pos!r} and {args.mode!r}")
    cfg["mode"] = args.mode_pos or args.mode or cfg.get("mode")
    if cfg["mode"] not in MODES:
        raise UsageError("a mode is required: " + ", ".join(MODES))
    cfg["bits"] = _int_list(cfg["bits"])
    cfg["interval"] = _int_list(cfg["interval"])
    return cfg


def _need(cfg, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise UsageError(f"{cfg['mode']} requires --{k.replace('_', '-')}")
        if k in ("model", "candidate", "corpus") and not Path(cfg[k]).is_file():
            raise UsageError(f"--{k}: no such file {cfg[k]}")


def _corpus(cfg, vocab_size=None) -> tuple[Corpus, Corpus | None]:
    corpus = model_io.load_corpus(cfg["corpus"], vocab_size or cfg["vocab_size"], cfg["chunks"])
    frac = float(cfg["heldout"])
    if frac <= 0:
        return corpus, None
    return corpus.split(frac)


def _as_dense(m):
    return m.to_model() if isinstance(m, cmp.QuantizedModel) else m


# ---------------------------------------------------------------------------
# Modes
# ---------------------------------------------------------------------------


def run_synth(cfg, out: Path) -> None:
    if cfg["vocab_size"] is None:
        raise UsageError("synth requires --vocab-size")
    truth = HmmModel.sparse_random(cfg["hidden_size"], cfg["vocab_size"], derive_rng(cfg["seed"], "truth"))
    seqs = sample_corpus(truth, cfg["sequences"], cfg["length"], derive_rng(cfg["seed"], "sample"))
    model_io.save_model(out / "truth.nqhm", truth)
    model_io.save_corpus(out / "corpus.txt", seqs.tolist())


def _em_config(cfg, bits: int, interval: int) -> EmConfig:
    return EmConfig(epochs=cfg["epochs"], quantizer=cfg["quantizer"], bits=bits, interval=interval,
                    epsilon=cfg["epsilon"], seed=cfg["seed"], smoothing=cfg["smoothing"])


def _train_once(cfg, corpus, heldout, bits, interval):
    init = random_init(cfg["hidden_size"], corpus.vocab_size, cfg["seed"])
    conf = _em_config(cfg, bits, interval)
    if conf.quantizer == "none":
        return train(init, corpus, conf, heldout)
    return quantization_aware_train(init, corpus, conf, heldout)


def run_train(cfg, out: Path) -> None:
    _need(cfg, "corpus")
    if len(cfg["bits"]) != 1 or len(cfg["interval"]) != 1:
        raise UsageError("train takes a single --bits and --interval (use sweep for lists)")
    corpus, heldout = _corpus(cfg)
    record = _train_once(cfg, corpus, heldout, cfg["bits"][0], cfg["interval"][0])
    model_io.save_model(out / "model.nqhm", record.model)
    if record.quantized_model is not None:
        model_io.save_quantized(out / "model.quant.nqhm", record.quantized_model)
    model_io.write_csv(out / "train.csv", record.CSV_HEADER, record.rows())
    plotting.lld_curve(record, out / "train.png")
    log.info("%d steps, final train LLD %.4f", len(record), record.entries[-1].train_lld)


def run_quantize(cfg, out: Path) -> None:
    _need(cfg, "model")
    if len(cfg["bits"]) != 1:
        raise UsageError("quantize takes a single --bits")
    model = _as_dense(model_io.load_any(cfg["model"]))
    scheme = SCHEME_ALIASES[cfg["scheme"]]
    if scheme == "prune":
        if not 0.0 <= cfg["ratio"] < 1.0:
            raise UsageError("--ratio must lie in [0, 1)")
        pruned = cmp.prune_model(model, cfg["ratio"], renormalize=False, epsilon=cfg["epsilon"])
        rescued = cmp.prune_model(model, cfg["ratio"], renormalize=True, epsilon=cfg["epsilon"])
        model_io.save_model(out / "pruned.nqhm", pruned)
        model_io.save_model(out / "pruned_norm.nqhm", rescued)
        report = metrics.dense_compression(pruned)
        validation = validate_model(pruned)
        for msg in validation.messages():
            log.warning("pruned model: %s", msg)
    else:
        q = cmp.quantize_model(model, scheme, cfg["bits"][0], cfg["epsilon"], seed=cfg["seed"])
        model_io.save_quantized(out / "quantized.nqhm", q)
        report = metrics.quantized_compression(q)
    model_io.write_csv(out / "compression.csv", report.CSV_HEADER, report.rows())


def run_eval(cfg, out: Path) -> None:
    _need(cfg, "model", "corpus")
    reference = _as_dense(model_io.load_any(cfg["model"]))
    corpus = model_io.load_corpus(cfg["corpus"], reference.vocab_size, cfg["chunks"])
    if cfg["heldout"] > 0:
        corpus = corpus.split(cfg["heldout"])[1]
    rows = [metrics.compare_models(reference, reference, corpus, label="reference").row()]
    if cfg["candidate"]:
        _need(cfg, "candidate")
        cand = model_io.load_any(cfg["candidate"])
        rows.append(metrics.compare_models(reference, cand, corpus, label="candidate").row())
    model_io.write_csv(out / "compare.csv", metrics.Comparison.CSV_HEADER, rows)
    sweep = metrics.sparsity_sweep(reference, cfg["bits"])
    model_io.write_csv(out / "sparsity.csv", metrics.SWEEP_CSV_HEADER,
                       [(r.bits, r.matrix, r.total, r.zeros, r.sparsity) for r in sweep])
    bits, table = metrics.sweep_table(sweep)
    plotting.sparsity_vs_bits(bits, table, out / "sparsity.png")


def run_decode(cfg, out: Path) -> None:
    _need(cfg, "model")
    base = model_io.load_any(cfg["model"])
    vocab = _as_dense(base).vocab_size
    if not cfg["keyword"]:
        raise UsageError("decode requires --keyword")
    keywords = [_int_list(k) for k in cfg["keyword"]]
    try:
        dfa = decode.build_keyword_dfa(keywords, vocab, horizon=cfg["max_len"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    guide = model_io.load_any(cfg["candidate"]) if cfg["candidate"] else None
    args = dict(trials=cfg["trials"], max_len=cfg["max_len"], seed=cfg["seed"])
    rows = [("base", 0, cfg["trials"], cfg["max_len"], decode.success_rate(base, dfa, guided=False, **args)),
            ("base", 1, cfg["trials"], cfg["max_len"], decode.success_rate(base, dfa, guided=True, **args))]
    if guide is not None:
        rows.append(("guide", 1, cfg["trials"], cfg["max_len"],
                     decode.success_rate(base, dfa, guided=True, guide=guide, **args)))
    model_io.write_csv(out / "decode.csv", DECODE_HEADER, rows)
    labels = ["base"] + (["with guide"] if guide is not None else [])
    guided = [rows[1][4]] + ([rows[2][4]] if guide is not None else [])
    plotting.success_bars(labels, guided, [rows[0][4]] * len(labels), out / "decode.png")


def run_sweep(cfg, out: Path) -> None:
    _need(cfg, "corpus")
    if cfg["quantizer"] == "none":
        cfg["quantizer"] = "norm-q"
    corpus, heldout = _corpus(cfg)
    rows = []
    for bits in cfg["bits"]:
        for interval in cfg["interval"]:
            record = _train_once(cfg, corpus, heldout, bits, interval)
            try:
                gap = metrics.lld_gap(record).gap
            except metrics.InsufficientEventsError:
                gap = float("nan")
            last = record.entries[-1]
            rows.append((bits, interval, len(record), len(record.event_steps), last.train_lld,
                         last.test_lld, gap))
            log.info("bits %d interval %d: test LLD %.4f", bits, interval, last.test_lld)
    model_io.write_csv(out / "sweep.csv", SWEEP_HEADER, rows)
    plotting.interval_sweep([dict(zip(SWEEP_HEADER, r)) for r in rows], out / "sweep.png")


RUNNERS = {"synth": run_synth, "train": run_train, "quantize": run_quantize,
           "eval": run_eval, "decode": run_decode, "sweep": run_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        RUNNERS[cfg["mode"]](cfg, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"normq: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"normq: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
