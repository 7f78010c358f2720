"""Command-line entry point: ``stoplab <command> [options]``.

Exit codes: 0 success, 1 verification or statistical failure (and training
divergence), 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis as AN
from . import data as D
from . import evaluation as E
from . import theory as TH
from . import trainer as TR
from .config import DEFAULTS, RunConfig, help_text
from .errors import StopLabError, TrainingDiverged

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
logger = logging.getLogger("stoplab")


class UsageFailure(Exception):
    """Bad command-line usage; reported with exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageFailure(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers

def _resolve_key(name):
    if name in DEFAULTS:
        return name
    matches = [k for k in DEFAULTS if k.split(".")[-1] == name]
    if len(matches) != 1:
        raise UsageFailure(f"unknown config key {name!r}" + (f" (ambiguous: {matches})" if matches else ""))
    return matches[0]


def _parse_assignments(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageFailure(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[_resolve_key(key.strip())] = value.strip()
    return out


def _load_config(path, assignments=(), fallback_dir=None):
    if path is None and fallback_dir is not None and (Path(fallback_dir) / "config.resolved").exists():
        path = Path(fallback_dir) / "config.resolved"
    cfg = RunConfig.from_file(path) if path is not None else RunConfig()
    return cfg.override(_parse_assignments(assignments))


def _require_file(path, what):
    if not Path(path).is_file():
        raise UsageFailure(f"{what} not found: {path}")


def _seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageFailure(f"--seeds expects comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# commands

def cmd_make_data(args):
    cfg = _load_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg["data.source"] != "synthetic":
        raise UsageFailure("make-data generates synthetic data; set data.source = synthetic")
    for split in ("train", "test"):
        batch = TR.load_dataset(cfg, split)
        D.write_idx_images(out / f"{split}-images.idx", batch.images)
        D.write_idx_labels(out / f"{split}-labels.idx", batch.labels)
        print(f"{split}: {len(batch)} images -> {out / f'{split}-images.idx'}")
    return EXIT_OK


def cmd_pretrain(args):
    if args.config is not None:
        _require_file(args.config, "config file")
    cfg = _load_config(args.config, args.set)
    run_dir = Path(args.run_dir or cfg["paths.run_dir"])
    runner = TR.Pretrainer(cfg, run_dir=run_dir)
    if args.resume:
        _require_file(args.resume, "checkpoint")
        runner.resume(args.resume)
    try:
        _, metrics = runner.run()
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; diagnostics in {run_dir / 'diverged.json'}", file=sys.stderr)
        return EXIT_FAIL
    last = metrics.last()
    if last is not None:
        print(f"step {last['step']} loss {last['loss']:.5f} |A| {last['norm_A']:.4f} |m| {last['norm_m_tilde']:.4f}")
    print(f"run directory: {run_dir}")
    return EXIT_OK


def _verify_rows(num_noise, seed, toys, collapse):
    """Run every theory check; yields ``(check, instance, estimate, ci, passed, note)`` rows."""
    base = np.random.default_rng(seed)
    toy_seeds = base.integers(0, 2**31, size=toys)
    for k, ts in enumerate(toy_seeds):
        rng = np.random.default_rng(ts)
        toy = TH.random_toy(rng)
        u = TH.grad_at_zero_untied(toy, num_noise, rng)
        yield "untied_grad_zero", k, u.norm, 4 * u.band, u.norm <= 4 * u.band, ""
        t = TH.grad_at_zero_tied(toy, num_noise, rng)
        worst = float(np.max(t.abs_diff / np.maximum(t.tied.ci, 1e-300)))
        yield "tied_matches_det", k, float(np.max(t.abs_diff)), float(np.max(3 * t.tied.ci)), t.match, \
            f"worst diff/CI {worst:.2f}"
    for c in range(5):
        rng = np.random.default_rng([seed, 100 + c])
        channel = TH.random_channel(rng)
        for r in np.linspace(channel.support.min(), channel.support.max(), 5):
            est = TH.optimal_predictor_mc_oracle(channel, r, 0.05, max(num_noise, 10**4) * 100, rng)
            f = float(TH.optimal_predictor_closed_form(channel, r))
            yield "closed_form_vs_oracle", f"{c}@{r:.2f}", abs(est.mean - f), 3 * est.stderr, \
                abs(est.mean - f) <= 3 * est.stderr, est.warning
        risks = TH.compare_predictors(channel, 10**6, rng)
        best = risks["closed_form"].mse
        for name in ("identity", "constant"):
            r = risks[name]
            yield f"optimal_beats_{name}", c, best - r.mse, r.stderr_vs_optimal, best <= r.mse + r.stderr_vs_optimal, ""
    if collapse:
        for untied, tied in TH.collapse_demo(seeds=(seed, seed + 1, seed + 2)):
            ok = untied.ratio < 0.1 and tied.ratio >= 0.5
            yield "collapse_demo", untied.seed, untied.ratio, tied.ratio, ok, "untied ratio / tied ratio"


def cmd_verify(args):
    rows = list(_verify_rows(args.num_noise, args.seed, args.toys, not args.skip_collapse))
    summary = {}
    for check, _, _, _, passed, _ in rows:
        total, ok = summary.get(check, (0, 0))
        summary[check] = (total + 1, ok + bool(passed))
    # majority rules used by the statistical checks
    need = {
        "untied_grad_zero": lambda t: t,
        "tied_matches_det": lambda t: t,
        "closed_form_vs_oracle": lambda t: t - 2,
        "optimal_beats_identity": lambda t: t,
        "optimal_beats_constant": lambda t: t,
        "collapse_demo": lambda t: t - 1,
    }
    failed = []
    for check, (total, ok) in summary.items():
        status = "PASS" if ok >= need[check](total) else "FAIL"
        if status == "FAIL":
            failed.append(check)
        print(f"{status} {check}: {ok}/{total}")
    if args.num_noise < 1000:
        print(f"WARN num_noise={args.num_noise} gives wide confidence intervals")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("check", "instance", "estimate", "bound", "passed", "note"))
            writer.writerows(rows)
    if failed:
        print(f"failed checks: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load_config(args.config, args.set)
    sweep = {}
    for item in args.sweep or ():
        if "=" not in item:
            raise UsageFailure(f"--sweep expects key=v1,v2,..., got {item!r}")
        key, values = item.split("=", 1)
        sweep[_resolve_key(key.strip())] = [v.strip() for v in values.split(",") if v.strip()]
    if not sweep:
        raise UsageFailure("ablate needs at least one --sweep key=v1,v2,...")
    rows = TR.run_ablation_suite(cfg, sweep, seeds=_seeds(args.seeds), run_root=args.run_root,
                                 csv_path=args.out, probe=not args.no_probe)
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"{len(rows)} runs -> {args.out}" + (f" ({len(failed)} failed)" if failed else ""))
    return EXIT_OK


def _run_state(args, dataset=None):
    _require_file(args.checkpoint, "checkpoint")
    cfg = _load_config(args.config, args.set, fallback_dir=Path(args.checkpoint).parent)
    return cfg, TR.load_state(cfg, args.checkpoint, dataset)


def cmd_probe(args):
    _require_file(args.checkpoint, "checkpoint")
    cfg = _load_config(args.config, args.set, fallback_dir=Path(args.checkpoint).parent)
    train = TR.load_dataset(cfg, "train")
    test = TR.load_dataset(cfg, "test")
    state = TR.load_state(cfg, args.checkpoint, train)
    sources = {"last": ["last_layer"], "last_layer": ["last_layer"], "last4": ["last4_concat"],
               "last4_concat": ["last4_concat"], "both": ["last_layer", "last4_concat"]}[args.source]
    rows = []
    for source in sources:
        f_train = E.extract_features(state, train, source, patch=cfg["data.patch"])
        f_test = E.extract_features(state, test, source, patch=cfg["data.patch"])
        rep = E.linear_probe(f_train, train.labels, f_test, test.labels, cfg["eval.epochs"], cfg["eval.lr"],
                             cfg["eval.l2"], variant=Path(args.checkpoint).stem, source=source)
        rows.append(rep)
        print(f"{source}: features {f_train.shape[1]}  train {rep.train_acc:.4f}  test {rep.test_acc:.4f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("variant", "source", "features", "train_acc", "test_acc", "n_train", "n_test"))
            for rep, source in zip(rows, sources):
                dim = cfg["model.d_e"] * (4 if source == "last4_concat" else 1)
                writer.writerow((rep.variant, source, dim, rep.train_acc, rep.test_acc, rep.n_train, rep.n_test))
    return EXIT_OK


def cmd_analyze(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.what == "norms":
        for path in args.metrics:
            _require_file(path, "metrics file")
        rows = AN.norm_trend(args.metrics, csv_path=out / "norm_trend.csv")
        for s, a, m in rows:
            print(f"sigma {s:g}: |A| {a:.4f} |m| {m:.4f}")
        return EXIT_OK
    if args.checkpoint is None:
        raise UsageFailure(f"analyze {args.what} needs --checkpoint")
    if args.what == "similarity":
        cfg, state = _run_state(args)
        rng = np.random.default_rng(args.seed)
        for mode in (["deterministic", "stop"] if args.mode == "both" else [args.mode]):
            sim = AN.pos_similarity(args.query, mode, args.num_samples, state, rng)
            stem = out / f"similarity_q{args.query}_{mode}"
            AN.write_pgm(stem.with_suffix(".pgm"), sim.to_gray())
            AN.write_similarity_csv(stem.with_suffix(".csv"), sim)
            print(f"{mode}: smoothness {AN.smoothness(sim):.4f} -> {stem}.pgm")
        return EXIT_OK
    # heatmap
    cfg = _load_config(args.config, args.set, fallback_dir=Path(args.checkpoint).parent)
    test = TR.load_dataset(cfg, "test")
    _require_file(args.checkpoint, "checkpoint")
    state = TR.load_state(cfg, args.checkpoint)
    if not 0 <= args.image < len(test):
        raise UsageFailure(f"--image {args.image} outside the test split of {len(test)} images")
    grid = D.patchify(test.subset(slice(args.image, args.image + 1)), cfg["data.patch"])
    rng = np.random.default_rng(args.seed)
    mask = TR.sample_mask(cfg.override({"data.per_image_masks": False}), grid.grid_h, grid.grid_w, rng, 1)
    patch = args.patch if args.patch is not None else int(mask.target_idx[0])
    hm = AN.prediction_heatmap(state, grid.patches[0], mask, patch, args.temperature)
    path = out / f"heatmap_img{args.image}_patch{patch}.pgm"
    AN.write_pgm(path, hm.to_gray())
    print(f"heatmap for patch {patch} (targets {mask.target_idx.tolist()}) -> {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")

    parser = _Parser(
        prog="stoplab",
        description="Stochastic positional embeddings lab: data, pretraining, ablations, verification, analysis.",
        epilog=help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-data", parents=[common], help="write synthetic train/test IDX files")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("pretrain", parents=[common], help="run masked-prediction pretraining",
                       epilog=help_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--run-dir", help="output directory (default: paths.run_dir)")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("verify", help="numerical checks of the collapse and optimal-predictor propositions")
    p.add_argument("--num-noise", type=int, default=10_000, help="Monte-Carlo noise draws per gradient estimate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--toys", type=int, default=20, help="random toy regressions")
    p.add_argument("--skip-collapse", action="store_true", help="skip the collapse training demo")
    p.add_argument("--csv", help="write every estimate and bound to this CSV")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("ablate", parents=[common], help="train and probe a sweep of variants")
    p.add_argument("--sweep", action="append", metavar="KEY=V1,V2", help="swept key (repeatable; cartesian product)")
    p.add_argument("--seeds", default="0", help="comma-separated training seeds")
    p.add_argument("--out", default="ablation.csv", help="result CSV")
    p.add_argument("--run-root", help="keep each run's directory under here")
    p.add_argument("--no-probe", action="store_true", help="skip linear probing")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("probe", parents=[common], help="linear probe on frozen target-encoder features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", default="both", choices=["last", "last_layer", "last4", "last4_concat", "both"])
    p.add_argument("--out", help="report CSV")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("analyze", parents=[common], help="similarity maps, norm trends, prediction heatmaps")
    p.add_argument("what", choices=["similarity", "norms", "heatmap"])
    p.add_argument("--checkpoint")
    p.add_argument("--metrics", nargs="+", default=[], help="metrics.csv files (norms)")
    p.add_argument("--query", type=int, default=0, help="query position (similarity)")
    p.add_argument("--mode", default="both", choices=["deterministic", "stop", "both"])
    p.add_argument("--num-samples", type=int, default=10_000)
    p.add_argument("--image", type=int, default=0, help="test image index (heatmap)")
    p.add_argument("--patch", type=int, help="masked patch of interest (heatmap)")
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="artifacts", help="output directory")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageFailure as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except StopLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
