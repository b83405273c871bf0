"""gaclab command line: synth, train, eval, gradcheck, sweep (plus pairs and classifier helpers)."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ExperimentConfig, load_config
from .data import (
    Dataset, fold_split, generate_pairs, generate_synthetic, make_folds, ratio_subsample, read_pairs, write_pairs,
)
from .demog import GroupClassifier, LabelMode, LabelProvider, train_group_classifier
from .gradsuite import run_gradcheck
from .layers import PRESETS, Network
from .metrics import correlation_histogram, fairness_report, ratio_distribution
from .trainer import VARIANTS, extract_embeddings, train_run

logger = logging.getLogger("gaclab")

SWEEP_AXES = ("tau", "lambda", "ratio", "depth")


class UsageError(Exception):
    pass


# helpers ------------------------------------------------------------------------------

def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def parse_ratios(text: str) -> list[Fraction]:
    parts = [p for p in text.replace(":", ",").split(",") if p.strip()]
    return [Fraction(p.strip()) for p in parts]


def _ratio_label(ratios) -> str:
    return ":".join(str(float(r)).rstrip("0").rstrip(".") if r.denominator != 1 else str(r.numerator)
                    for r in ratios)


def make_provider(cfg: ExperimentConfig, nd: int) -> LabelProvider:
    mode = LabelMode(cfg.label_mode)
    if mode is LabelMode.ESTIMATED:
        if not cfg.classifier:
            raise UsageError("label mode 'estimated' needs --classifier (a group classifier checkpoint)")
        return LabelProvider.from_checkpoint(cfg.classifier, nd)
    return LabelProvider(mode, nd, seed=cfg.label_seed)


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    """Command-line flags win over the config file."""
    train = cfg.train.model_dump()
    if getattr(args, "variant", None):
        if args.variant not in VARIANTS:
            raise UsageError(f"unknown variant {args.variant!r}; valid variants: {', '.join(VARIANTS)}")
        train["variant"] = args.variant
    if getattr(args, "lam", None) is not None:
        train["margin"]["lam"] = args.lam
    if getattr(args, "tau", None) is not None:
        train["automation"]["tau"] = args.tau
    if getattr(args, "epochs", None) is not None:
        train["epochs"] = args.epochs
    if getattr(args, "preset", None):
        train["network"]["preset"] = args.preset
    update = {"train": type(cfg.train).model_validate(train)}
    if getattr(args, "label_mode", None):
        update["label_mode"] = LabelMode(args.label_mode)
    if getattr(args, "classifier", None):
        update["classifier"] = args.classifier
    ev = cfg.eval.model_dump()
    for key in ("folds", "fold_index", "reference_group", "pairs_per_group"):
        if getattr(args, key, None) is not None:
            ev[key] = getattr(args, key)
    update["eval"] = type(cfg.eval).model_validate(ev)
    cfg = cfg.model_copy(update=update)
    return ExperimentConfig.model_validate(cfg.model_dump())


def _print_config(cfg: ExperimentConfig):
    print(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True))


def write_histograms(out: Path, embeddings, identities, groups, bins: int):
    """Plot-ready CSVs: ratio values per subject and per-group correlation histograms."""
    ratios = ratio_distribution(embeddings, identities, groups)
    with open(out / "ratio_values.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "ratio"])
        for g in sorted(ratios):
            for r in ratios[g]:
                w.writerow([g, repr(r)])
    with open(out / "correlation_hist.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "bin_lo", "bin_hi", "count"])
        for g in sorted(np.unique(groups).tolist()):
            rows = np.flatnonzero(groups == g)
            if len(np.unique(identities[rows])) < 2:
                continue
            counts, edges = correlation_histogram(embeddings[rows], identities[rows], bins=bins)
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                w.writerow([g, repr(float(lo)), repr(float(hi)), int(c)])


def evaluate(checkpoint, dataset: Dataset, pairs, provider: LabelProvider, cfg: ExperimentConfig, out: Path,
             metadata: Optional[dict] = None):
    batch = extract_embeddings(checkpoint, dataset, provider)
    emb = batch.embeddings.data
    meta = {"label_mode": provider.mode.value, "tau": cfg.train.automation.tau,
            "lambda": cfg.train.margin.lam, "variant": cfg.train.variant}
    meta.update(metadata or {})
    # geometry statistics use the true groups; routing used the provider's labels
    report = fairness_report(pairs, emb, dataset.identities, dataset.groups, cfg.eval.reference_group,
                             cfg.eval.bins, meta)
    (out / "fairness_report.json").write_text(report.to_json())
    report.write_csv(out / "report.csv")
    write_histograms(out, emb, dataset.identities, dataset.groups, cfg.eval.correlation_bins)
    return report


# commands -------------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.print_config:
        _print_config(cfg)
        return 0
    out = _prepare_out(args.out, args.force)
    ds = generate_synthetic(cfg.synth)
    if args.ratios:
        ds = ratio_subsample(ds, parse_ratios(args.ratios), seed=cfg.synth.seed)
    ds.save(out)
    print(f"wrote {len(ds)} samples ({ds.counts()['subjects_per_group']} subjects per group) to {out}")
    return 0


def cmd_pairs(args) -> int:
    cfg = load_config(args.config)
    ds = Dataset.load(args.dataset)
    n = args.pairs_per_group or cfg.eval.pairs_per_group
    pairs = generate_pairs(ds, n, seed=cfg.eval.pair_seed if args.seed is None else args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_pairs(pairs, args.out)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def cmd_classifier(args) -> int:
    ds = Dataset.load(args.dataset)
    res = train_group_classifier(ds, epochs=args.epochs, lr=args.lr, seed=args.seed)
    out = _prepare_out(args.out, args.force)
    res.classifier.save(out)
    (out / "accuracy.json").write_text(json.dumps(
        {"accuracy": res.accuracy, "group_accuracy": res.group_accuracy}, indent=2))
    print(f"held-out accuracy {res.accuracy:.4f}; per group {[round(a, 4) for a in res.group_accuracy]}")
    return 0


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.print_config:
        _print_config(cfg)
        return 0
    ds = Dataset.load(args.dataset)
    provider = make_provider(cfg, ds.nd)
    out = _prepare_out(args.out, args.force)
    test = None
    if args.folds:
        folds = make_folds(ds, cfg.eval.folds, seed=cfg.train.seed)
        if not 0 <= cfg.eval.fold_index < cfg.eval.folds:
            raise UsageError(f"--fold-index must be in [0, {cfg.eval.folds})")
        ds, test = fold_split(ds, folds, cfg.eval.fold_index)
        # fail before training if the held-out fold cannot support verification pairs
        pairs = generate_pairs(test, cfg.eval.pairs_per_group, seed=cfg.eval.pair_seed)
    (out / "config.json").write_text(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True))
    result = train_run(cfg.train, ds, provider, out_dir=out)
    print(f"trained {len(result.log)} steps; final Dist_g {result.final_group_dist}; "
          f"merged layers {result.monitor.merged_count()}")
    if test is not None:
        write_pairs(pairs, out / "heldout_pairs.csv")
        rep = evaluate(result.network, test, pairs, provider, cfg, out,
                       {"fold_index": cfg.eval.fold_index, "folds": cfg.eval.folds})
        print(f"held-out fold {cfg.eval.fold_index}: Avg {rep.average_accuracy:.2f} STD {rep.biasness:.2f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if args.print_config:
        _print_config(cfg)
        return 0
    if not Path(args.pairs).is_file():
        raise UsageError(f"pairs file {args.pairs} not found (create one with 'gaclab pairs')")
    ds = Dataset.load(args.dataset)
    provider = make_provider(cfg, ds.nd)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep = evaluate(Network.load(args.checkpoint), ds, read_pairs(args.pairs), provider, cfg, out,
                   {"checkpoint": str(args.checkpoint)})
    print(f"Avg {rep.average_accuracy:.2f} STD {rep.biasness:.2f} per group "
          f"{ {g: round(a, 2) for g, a in rep.group_accuracy.items()} }")
    return 0


def cmd_gradcheck(args) -> int:
    rep = run_gradcheck(configs=args.configs, eps=args.eps, seed=args.seed)
    for line in rep.lines():
        print(line)
    if args.json:
        Path(args.json).write_text(json.dumps(rep.to_dict(), indent=2))
    return 0 if rep.passed else 1


def _sweep_values(axis: str, text: str) -> list:
    raw = [v.strip() for v in text.split(",") if v.strip()]
    if not raw:
        raise UsageError("sweep needs at least one value")
    if axis in ("tau", "lambda"):
        return [float(v) for v in raw]
    if axis == "depth":
        bad = [v for v in raw if v not in PRESETS]
        if bad:
            raise UsageError(f"unknown depth preset(s) {bad}; valid: {', '.join(PRESETS)}")
        return raw
    return [[Fraction(p) for p in v.split(":")] for v in raw]


def run_sweep_point(cfg: ExperimentConfig, axis: str, value, out: Path) -> dict:
    """One seeded experiment: same data, folds and seeds for every value; only ``axis`` changes."""
    train = cfg.train
    if axis == "tau":
        train = train.model_copy(update={"automation": train.automation.model_copy(update={"tau": value})})
    elif axis == "lambda":
        train = train.model_copy(update={"margin": train.margin.model_copy(update={"lam": value})})
    elif axis == "depth":
        train = train.model_copy(update={"network": train.network.model_copy(update={"preset": value})})
    full = generate_synthetic(cfg.synth)
    folds = make_folds(full, cfg.eval.folds, seed=cfg.train.seed)
    train_ds, test_ds = fold_split(full, folds, cfg.eval.fold_index)
    if axis == "ratio":
        # skew only the training identities; the held-out fold keeps every group
        train_ds = ratio_subsample(train_ds, value, seed=cfg.synth.seed)
    pairs = generate_pairs(test_ds, cfg.eval.pairs_per_group, seed=cfg.eval.pair_seed)
    provider = make_provider(cfg, full.nd)
    point_cfg = cfg.model_copy(update={"train": train})
    result = train_run(train, train_ds, provider, out_dir=out)
    write_pairs(pairs, out / "heldout_pairs.csv")
    rep = evaluate(result.network, test_ds, pairs, provider, point_cfg, out, {"axis": axis})
    row = {"value": _ratio_label(value) if axis == "ratio" else value,
           "avg": rep.average_accuracy, "std": rep.biasness, "merged_layers": result.monitor.merged_count()}
    for g, n in enumerate(train_ds.counts()["subjects_per_group"]):
        row[f"subjects_g{g}"] = n
    return row


def _sweep_job(payload):
    cfg_json, axis, value, out = payload
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    return run_sweep_point(cfg, axis, value, Path(out))


def write_sweep_summary(rows: list[dict], nd: int, path):
    cols = ["value", "avg", "std", "merged_layers"] + [f"subjects_g{g}" for g in range(nd)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in cols])


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.print_config:
        _print_config(cfg)
        return 0
    values = _sweep_values(args.axis, args.values)
    out = _prepare_out(args.out, args.force)
    jobs = [(cfg.model_dump_json(), args.axis, v, str(out / f"run_{i:02d}")) for i, v in enumerate(values)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    write_sweep_summary(rows, cfg.synth.nd, out / "sweep_summary.csv")
    for r in rows:
        print(f"{args.axis}={r['value']}: Avg {r['avg']:.2f} STD {r['std']:.2f} merged {r['merged_layers']}")
    return 0


# parser -------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gaclab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="experiment JSON (defaults apply when omitted)")
        sp.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
        if seed:
            sp.add_argument("--seed", type=int, help="overrides data and training seeds")

    def train_flags(sp):
        sp.add_argument("--variant", help=f"one of: {', '.join(VARIANTS)}")
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--tau", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--preset", choices=sorted(PRESETS))
        sp.add_argument("--label-mode", choices=[m.value for m in LabelMode])
        sp.add_argument("--classifier", help="group classifier checkpoint (estimated labels)")

    sp = sub.add_parser("synth", help="generate a synthetic grouped dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--ratios", help="per-group subject ratios, e.g. 0,7,7,7")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("pairs", help="write a verification pair list for a dataset")
    sp.add_argument("dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.add_argument("--pairs-per-group", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_pairs)

    sp = sub.add_parser("classifier", help="train the group classifier used by estimated labels")
    sp.add_argument("dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int, default=5)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_classifier)

    sp = sub.add_parser("train", help="train one variant")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    train_flags(sp)
    sp.add_argument("--folds", type=int, help="hold out one subject fold and evaluate on it")
    sp.add_argument("--fold-index", type=int)
    sp.add_argument("--pairs-per-group", type=int)
    sp.add_argument("--reference-group", type=int)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="fairness report for a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("dataset")
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.add_argument("--print-config", action="store_true")
    sp.add_argument("--reference-group", type=int)
    sp.add_argument("--label-mode", choices=[m.value for m in LabelMode])
    sp.add_argument("--classifier")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every adaptive layer and loss")
    sp.add_argument("--eps", type=float, default=1e-4)
    sp.add_argument("--configs", type=int, default=50)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--json", help="also write the summary as JSON")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("sweep", help="one seeded experiment per value of an ablation axis")
    common(sp)
    sp.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sp.add_argument("--values", required=True, help="comma separated; ratios as 7:7:7:7,0:7:7:7")
    sp.add_argument("--out", required=True)
    train_flags(sp)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--folds", type=int)
    sp.add_argument("--fold-index", type=int)
    sp.add_argument("--pairs-per-group", type=int)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError, FileNotFoundError) as exc:
        print(f"gaclab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
