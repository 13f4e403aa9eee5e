"""Command-line entry point (``free-env``).

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, Optional, Sequence

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, write_config
from .core import Dataset, load_dataset, parse_date, subsample_labels
from .describe import DEBUG_ENV, Describer, DescriptionCache
from .encode import Vocabulary
from .evaluation import PROTOCOLS, dataset_rmse, export_embeddings, season_of
from .estimator import describe_dataset
from .simulate import build_benchmark
from .train import finetune, predict, pretrain

log = logging.getLogger("free_env")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run configuration JSON (unknown keys are rejected)")
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice in this command (default 0)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="free-env", description="Text-description based environmental time-series modelling.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-synth", help="generate the synthetic benchmark CSV")
    _common(p)
    p.add_argument("--out", required=True, help="output CSV; parameters go to <out>.params.json")
    p.add_argument("--n-sites", type=int, help="override the number of sites")
    p.add_argument("--days", type=int, help="override the number of days")

    p = sub.add_parser("describe", help="render descriptions for every row of a dataset")
    _common(p)
    p.add_argument("--in", dest="inp", required=True, help="dataset CSV")
    p.add_argument("--out", required=True, help="descriptions JSON lines")
    p.add_argument("--source", choices=("template", "remote"), default="template",
                   help="template engine or a chat-completion endpoint (default template)")
    p.add_argument("--cache", help="description cache directory or .jsonl file")
    p.add_argument("--auxiliary", action="store_true",
                   help="prefix each row with the previous day's observed label of its site")

    p = sub.add_parser("build-vocab", help="build a token vocabulary from descriptions")
    _common(p)
    p.add_argument("--descriptions", required=True, help="descriptions JSON lines")
    p.add_argument("--out", required=True, help="vocabulary JSON")

    p = sub.add_parser("pretrain", help="train on simulated labels")
    _common(p)
    _training_io(p)
    p.add_argument("--vocab", help="vocabulary JSON (built from the descriptions when omitted)")
    p.add_argument("--epochs", type=int, help="override pretrain.epochs")

    p = sub.add_parser("finetune", help="continue training a checkpoint on observed labels")
    _common(p)
    _training_io(p)
    p.add_argument("--model", required=True, help="starting checkpoint")
    p.add_argument("--fraction", type=float, default=1.0, help="share of observed labels kept (default 1.0)")
    p.add_argument("--epochs", type=int, help="override finetune.epochs")

    p = sub.add_parser("predict", help="write predictions for every row (no labels in the output)")
    _common(p)
    p.add_argument("--model", required=True, help="checkpoint")
    p.add_argument("--in", dest="inp", required=True, help="dataset CSV")
    p.add_argument("--descriptions", help="descriptions JSON lines (template descriptions when omitted)")
    p.add_argument("--out", required=True, help="CSV with columns site_id,date,prediction")

    p = sub.add_parser("evaluate", help="RMSE of a predictions file against observed labels")
    _common(p)
    p.add_argument("--predictions", required=True, help="CSV from predict")
    p.add_argument("--in", dest="inp", required=True, help="dataset CSV with observed labels")
    p.add_argument("--start", help="first date to score (inclusive, YYYY-MM-DD)")
    p.add_argument("--end", help="last date to score (inclusive, YYYY-MM-DD)")
    p.add_argument("--out", help="write the metrics as JSON here")

    p = sub.add_parser("experiment", help="run an experiment protocol on the synthetic benchmark")
    _common(p)
    p.add_argument("protocol", choices=sorted(PROTOCOLS), help="experiment protocol")
    p.add_argument("--workers", type=int, help="parallel worker processes (default 1)")
    p.add_argument("--seeds", help="comma separated seeds, overriding the config")
    p.add_argument("--out-dir", help="report root (default runs/)")
    p.add_argument("--no-checkpoints", action="store_true", help="do not store the evaluated models")

    p = sub.add_parser("export-embeddings", help="write one embedding per row to CSV")
    _common(p)
    p.add_argument("--model", required=True, help="checkpoint")
    p.add_argument("--in", dest="inp", required=True, help="dataset CSV")
    p.add_argument("--descriptions", help="descriptions JSON lines (template descriptions when omitted)")
    p.add_argument("--out", required=True, help="CSV: site_id,date,tag,e0..")

    p = sub.add_parser("gradcheck", help="finite-difference check of all analytic gradients")
    _common(p)
    p.add_argument("--n-seeds", type=int, default=5, help="number of consecutive seeds from --seed (default 5)")
    p.add_argument("--tolerance", type=float, default=1e-4, help="maximum relative error (default 1e-4)")
    return parser


def _training_io(p):
    p.add_argument("--in", dest="inp", required=True, help="dataset CSV")
    p.add_argument("--descriptions", help="descriptions JSON lines (template descriptions when omitted)")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--log", help="epoch log JSON lines (default <out>.log.jsonl)")


def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _resolved(cfg: RunConfig, out: Path, args) -> None:
    """Write the resolved configuration and the invocation next to an output."""
    write_config(cfg, out.parent / f"{out.name}.config.json")


def read_descriptions(path) -> Dict:
    texts = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                texts[(rec["site_id"], parse_date(rec["date"]))] = rec["text"]
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{n}: bad description record ({exc})") from exc
    return texts


def _texts(args, ds: Dataset, cfg: RunConfig) -> Dict:
    if args.descriptions:
        texts = read_descriptions(args.descriptions)
        missing = [k for k in (s.key for s in ds) if k not in texts]
        if missing:
            site, date = missing[0]
            raise ValueError(f"{len(missing)} rows have no description, first {site} {date}")
        return texts
    return describe_dataset(ds, Describer(cfg.prompt))


def cmd_gen_synth(args, cfg: RunConfig) -> int:
    changes = {k: v for k, v in (("n_sites", args.n_sites), ("days", args.days)) if v is not None}
    cfg = cfg.replace(**changes, obs=replace(cfg.obs, seed=args.seed), weather=replace(cfg.weather, seed=args.seed))
    ds = build_benchmark(cfg.n_sites, cfg.days, cfg.weather, cfg.sim, cfg.obs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.to_csv(out)
    params = {"n_sites": cfg.n_sites, "days": cfg.days, "weather": asdict(cfg.weather), "sim": asdict(cfg.sim),
              "obs": asdict(cfg.obs), "units": ds.units, "content_hash": ds.content_hash()}
    out.with_name(out.name + ".params.json").write_text(json.dumps(params, indent=2, sort_keys=True) + "\n")
    _resolved(cfg, out, args)
    print(f"wrote {len(ds)} rows for {len(ds.sites)} sites to {out}")
    return 0


def cmd_describe(args, cfg: RunConfig) -> int:
    ds = load_dataset(args.inp)
    prompt = replace(cfg.prompt, source="template" if args.source == "template" else "remote_llm")
    cache = DescriptionCache(args.cache) if args.cache else None
    describer = Describer(prompt, cache)
    aux = {s.key: s.observed_label for s in ds if s.observed_label is not None} if args.auxiliary else None
    texts = describe_dataset(ds, describer, aux_values=aux)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as fh:
        for s in ds:
            fh.write(json.dumps({"site_id": s.site_id, "date": s.date.isoformat(), "text": texts[s.key]},
                                ensure_ascii=False) + "\n")
    _resolved(cfg.replace(prompt=prompt), out, args)
    print(f"wrote {len(ds)} descriptions to {out} (remote calls {describer.remote_calls}, "
          f"cache hits {describer.cache_hits})")
    return 0


def cmd_build_vocab(args, cfg: RunConfig) -> int:
    vocab = Vocabulary.build(read_descriptions(args.descriptions).values())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(vocab.to_json() + "\n", encoding="utf-8")
    print(f"vocabulary of {len(vocab)} tokens written to {out}")
    return 0


def _epoch_logger(args):
    path = Path(args.log) if args.log else Path(args.out).with_name(Path(args.out).name + ".log.jsonl")
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = path.open("w", encoding="utf-8")

    def write(rec):
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()
        log.info("epoch %(epoch)d train_loss %(train_loss).4f val_rmse %(val_rmse).4f", rec)

    return write, fh


def cmd_pretrain(args, cfg: RunConfig) -> int:
    tc = replace(cfg.pretrain, seed=args.seed, phase="pretrain")
    if args.epochs is not None:
        tc = replace(tc, epochs=args.epochs)
    cfg = cfg.replace(pretrain=tc)
    ds = load_dataset(args.inp)
    texts = _texts(args, ds, cfg)
    vocab = Vocabulary.from_json(Path(args.vocab).read_text(encoding="utf-8")) if args.vocab else None
    log_fn, fh = _epoch_logger(args)
    with fh:
        model, history = pretrain(ds, texts, tc, cfg.model, vocab, log_fn)
    digest = save_checkpoint(model, args.out)
    _resolved(cfg, Path(args.out), args)
    print(f"pretrained for {len(history)} epochs; checkpoint {args.out} sha256 {digest}")
    return 0


def cmd_finetune(args, cfg: RunConfig) -> int:
    tc = replace(cfg.finetune, seed=args.seed, phase="finetune")
    if args.epochs is not None:
        tc = replace(tc, epochs=args.epochs)
    cfg = cfg.replace(finetune=tc)
    start = load_checkpoint(args.model)
    ds = subsample_labels(load_dataset(args.inp), args.fraction, args.seed)
    texts = _texts(args, ds, cfg)
    log_fn, fh = _epoch_logger(args)
    with fh:
        model, history = finetune(start, ds, texts, tc, log_fn)
    digest = save_checkpoint(model, args.out)
    _resolved(cfg, Path(args.out), args)
    print(f"fine-tuned for {len(history)} epochs on {ds.n_observed()} labels; checkpoint {args.out} sha256 {digest}")
    return 0


def cmd_predict(args, cfg: RunConfig) -> int:
    model = load_checkpoint(args.model)
    ds = load_dataset(args.inp)
    preds = predict(model, ds, _texts(args, ds, cfg))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "date", "prediction"])
        for s in ds:
            w.writerow([s.site_id, s.date.isoformat(), repr(preds[s.key])])
    _resolved(cfg, out, args)
    print(f"wrote {len(ds)} predictions to {out}")
    return 0


def read_predictions(path) -> Dict:
    preds = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["site_id", "date", "prediction"]:
            raise ValueError(f"{path}: expected header site_id,date,prediction, got {reader.fieldnames}")
        for n, row in enumerate(reader, 2):
            try:
                preds[(row["site_id"], parse_date(row["date"]))] = float(row["prediction"])
            except ValueError as exc:
                raise ValueError(f"{path}:{n}: {exc}") from exc
    return preds


def cmd_evaluate(args, cfg: RunConfig) -> int:
    ds = load_dataset(args.inp)
    if args.start:
        ds = ds.filter(lambda s: s.date >= parse_date(args.start))
    if args.end:
        ds = ds.filter(lambda s: s.date <= parse_date(args.end))
    preds = read_predictions(args.predictions)
    missing = [s.key for s in ds if s.observed_label is not None and s.key not in preds]
    if missing:
        raise ValueError(f"{len(missing)} labeled rows have no prediction, first {missing[0][0]} {missing[0][1]}")
    value = dataset_rmse(preds, ds)
    metrics = {"rmse": value, "n": ds.n_observed()}
    print(f"rmse {value:.6f} over {ds.n_observed()} observations")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(metrics, indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_experiment(args, cfg: RunConfig) -> int:
    if args.workers is not None:
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        cfg = cfg.replace(workers=args.workers)
    if args.seeds:
        try:
            cfg = cfg.replace(seeds=tuple(int(x) for x in args.seeds.split(",")))
        except ValueError:
            raise UsageError(f"--seeds expects comma separated integers, got {args.seeds!r}")
    if args.out_dir:
        cfg = cfg.replace(out_dir=args.out_dir)
    t0 = time.time()
    kwargs = {}
    if args.protocol == "probe":
        kwargs["export_dir"] = Path(cfg.out_dir) / "probe" / "embeddings"
    report = PROTOCOLS[args.protocol](cfg, **kwargs)
    report.provenance["wall_s"] = round(time.time() - t0, 1)
    out = report.write(cfg.out_dir, save_models=not args.no_checkpoints)
    write_config(cfg, out / "config.json")
    for cond, value in report.summary().items():
        print(f"{cond:20s} {report.metric} {value:.4f}")
    print(f"report written to {out}")
    return 0


def cmd_export_embeddings(args, cfg: RunConfig) -> int:
    model = load_checkpoint(args.model)
    ds = load_dataset(args.inp)
    texts = _texts(args, ds, cfg)
    keys = [s.key for s in ds]
    emb = model.embed([model.tokenize(texts[k]) for k in keys])
    export_embeddings(args.out, emb, [season_of(d) or "" for _, d in keys], keys)
    _resolved(cfg, Path(args.out), args)
    print(f"wrote {len(keys)} embeddings of dimension {emb.shape[1]} to {args.out}")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradcheck import run

    if args.n_seeds < 1:
        raise UsageError("--n-seeds must be >= 1")
    results = run(range(args.seed, args.seed + args.n_seeds))
    worst = 0.0
    for r in results:
        name = max(r.errors, key=r.errors.get)
        print(f"seed {r.seed}: max relative error {r.max_error:.3e} ({name})")
        worst = max(worst, r.max_error)
    ok = worst < args.tolerance
    print(f"max relative error {worst:.3e} over {len(results)} seeds: {'ok' if ok else 'FAILED'}")
    return 0 if ok else 2


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "describe": cmd_describe,
    "build-vocab": cmd_build_vocab,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
    "export-embeddings": cmd_export_embeddings,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    level = logging.INFO if args.verbose else logging.WARNING
    if os.environ.get(DEBUG_ENV, "").lower() in ("1", "true", "yes"):
        level = logging.DEBUG
    logging.basicConfig(level=level,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"free-env {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"free-env: config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001  surfaced as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"free-env {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
