"""Command-line entry point.

Exit codes: 0 success, 1 usage or data error, 2 numeric failure,
3 verification failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import checkpoint as ckpt_io
from . import config as config_io
from .data import DatasetManifest, ManifestEntry, as_feature_set
from .dsp import featurize_clip, read_wav, write_features
from .exceptions import NumericError, TwinSpeechError
from .harness import run_grid, top1_accuracy

log = logging.getLogger("twinspeech")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(TwinSpeechError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_manifest(path, role=None):
    if not path or not os.path.exists(path):
        raise UsageError(f"manifest not found: {path}")
    return DatasetManifest.read(path, role=role)


def _emit(obj):
    print(json.dumps(obj, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# featurize


def cmd_featurize(args):
    cfg = config_io.load(args.config)
    manifest = _read_manifest(args.manifest)
    os.makedirs(args.out_dir, exist_ok=True)
    state_path = os.path.join(args.out_dir, ".featurize-state.json")
    state = {}
    if os.path.exists(state_path):
        with open(state_path) as fh:
            state = json.load(fh)
    frontend_key = json.dumps(cfg.to_toml_dict()["dsp"], sort_keys=True)
    index, errors, written, skipped = [], [], 0, 0
    for i, entry in enumerate(manifest.entries):
        src = manifest.resolve(entry)
        stem = os.path.splitext(os.path.basename(entry.path))[0]
        out_name = f"{i:05d}_{stem}.feat"
        out_path = os.path.join(args.out_dir, out_name)
        try:
            with open(src, "rb") as fh:
                digest = hashlib.sha256(fh.read() + frontend_key.encode()).hexdigest()
            if state.get(out_name) == digest and os.path.exists(out_path):
                skipped += 1
            else:
                feats = featurize_clip(read_wav(src), cfg.frontend)
                if len(feats) == 0:
                    raise TwinSpeechError("clip shorter than half a segment")
                write_features(out_path, feats)
                state[out_name] = digest
                written += 1
            index.append(ManifestEntry(out_name, entry.label, entry.split))
        except (OSError, TwinSpeechError) as exc:
            errors.append((entry.path, str(exc)))
    out_manifest = DatasetManifest(tuple(index), dict(manifest.classes), manifest.role,
                                   args.out_dir, manifest.name)
    out_manifest.write(os.path.join(args.out_dir, "index.csv"))
    with open(state_path, "w") as fh:
        json.dump(state, fh, indent=1, sort_keys=True)
    print(f"featurize: {written} written, {skipped} up to date, {len(errors)} failed")
    for path, msg in errors:
        print(f"  error: {path}: {msg}", file=sys.stderr)
    return EXIT_USAGE if errors else EXIT_OK


# ---------------------------------------------------------------------------
# pretrain


def _train_config(args):
    import dataclasses
    cfg = config_io.load(args.config)
    train = cfg.train
    overrides = {}
    if getattr(args, "epochs", None):
        overrides["epochs"] = args.epochs
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    if getattr(args, "reduction", None):
        overrides["reduction"] = args.reduction
    if overrides:
        train = dataclasses.replace(train, **overrides)
    return cfg, train


def cmd_pretrain(args):
    from .objective import correlation, dump_csv
    from .augment import make_views
    from . import model as model_mod
    from .pipeline import StepRecord, epoch_summary, pretrain

    cfg, train = _train_config(args)
    manifest = _read_manifest(args.manifest)
    if manifest.role == "downstream":
        manifest = manifest.split("train")
    fs = as_feature_set(manifest, cfg.frontend)
    log_path = args.log or f"{args.out}.log.jsonl"
    last_epoch = {"done": -1}
    with open(log_path, "w") as log_fh:
        def on_step(rec: StepRecord):
            log_fh.write(rec.to_json() + "\n")
            if rec.step and rec.epoch > last_epoch.get("current", 0):
                last_epoch["done"] = rec.epoch - 1
            last_epoch["current"] = rec.epoch

        try:
            ckpt = pretrain(train, fs, callback=on_step, meta={"upstream": manifest.name or "upstream"})
        except NumericError as exc:
            print(f"pretrain: numeric failure: {exc}; last good epoch: {last_epoch['done']}", file=sys.stderr)
            return EXIT_NUMERIC
    ckpt_io.save(ckpt, args.out)
    summary = epoch_summary(ckpt.loss_history)
    for row in summary:
        print(json.dumps(row))
    final = summary[-1]
    print(f"final loss: total={final['total']:.6g} invariance={final['invariance']:.6g} "
          f"redundancy={final['redundancy']:.6g} lambda={train.lam} variant={train.variant} "
          f"reduction={train.reduction}")
    if args.dump_corr:
        n = min(train.batch_size, len(fs))
        views = make_views(fs.X[:n], train.policy, step_seed=0, item_shape=train.arch.input_shape)
        za = model_mod.encode(ckpt.params, views.view_a)
        zb = model_mod.encode(ckpt.params, views.view_b)
        dump_csv(correlation(za, zb, train.variant, train.eps, train.reduction, train.center), args.dump_corr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# finetune / eval / grid


def _finetune_config(cfg, args):
    import dataclasses
    ft = cfg.finetune
    if getattr(args, "mode", None):
        ft = dataclasses.replace(ft, mode=args.mode)
    if getattr(args, "ft_epochs", None) is not None:
        ft = dataclasses.replace(ft, epochs=args.ft_epochs)
    return ft


def _model_to_checkpoint(model, base: ckpt_io.Checkpoint, info):
    return ckpt_io.Checkpoint(base.config, model.params, epoch=base.epoch, loss_history=[],
                              meta={**base.meta, "finetune": {k: v for k, v in info.items() if k != "epochs"},
                                    "classes": list(model.classes)},
                              extra={"head.weight": model.head_weight, "head.bias": model.head_bias,
                                     "head.mean": np.asarray(model.feature_mean, dtype=np.float64),
                                     "head.scale": np.asarray(model.feature_scale, dtype=np.float64)})


def _checkpoint_to_model(ck):
    from .pipeline import FineTunedModel
    if "head.weight" not in ck.extra:
        raise UsageError("checkpoint has no classification head; run `finetune` first")
    return FineTunedModel(ck.params, ck.extra["head.weight"], ck.extra["head.bias"], tuple(ck.meta.get("classes", ())),
                          ck.extra.get("head.mean"), ck.extra.get("head.scale"))


def cmd_finetune(args):
    from .pipeline import finetune
    cfg = config_io.load(args.config)
    base = ckpt_io.load(args.ckpt)
    fs = as_feature_set(_read_manifest(args.manifest, role="downstream"), cfg.frontend)
    model, info = finetune(base, fs, args.fraction, seed=args.seed, config=_finetune_config(cfg, args))
    acc = top1_accuracy(model, fs)
    if args.out:
        ckpt_io.save(_model_to_checkpoint(model, base, info), args.out)
    _emit({"fraction": args.fraction, "seed": args.seed, "mode": info["mode"], "n_train": info["n_train"],
           "top1": acc})
    return EXIT_OK


def cmd_eval(args):
    cfg = config_io.load(args.config)
    model = _checkpoint_to_model(ckpt_io.load(args.model))
    fs = as_feature_set(_read_manifest(args.manifest, role="downstream"), cfg.frontend)
    _emit({"top1": top1_accuracy(model, fs), "n_test": int((fs.split == "test").sum())})
    return EXIT_OK


def _parse_seeds(text, default):
    if text is None:
        return tuple(default)
    if "," in text:
        return tuple(int(s) for s in text.split(",") if s.strip())
    count = int(text)
    if count < 1:
        raise UsageError("--seeds must be a positive count or a comma-separated list")
    return tuple(range(count))


def cmd_grid(args):
    cfg = config_io.load(args.config)
    checkpoints = {}
    for path in args.ckpt:
        ck = ckpt_io.load(path)
        upstream = ck.meta.get("upstream") or os.path.splitext(os.path.basename(path))[0]
        checkpoints.setdefault(upstream, []).append(ck)
    fractions = tuple(float(f) for f in args.fractions.split(",")) if args.fractions else cfg.fractions
    seeds = _parse_seeds(args.seeds, cfg.seeds)
    fs = as_feature_set(_read_manifest(args.manifest, role="downstream"), cfg.frontend)
    report = run_grid(checkpoints, fs, fractions, seeds, _finetune_config(cfg, args), workers=args.workers,
                      progress=lambda c: log.info("cell %s/%s f=%s seed=%s -> %s", c.upstream, c.variant,
                                                  c.fraction, c.seed, c.accuracy if not c.error else c.error))
    stem = args.out[:-4] if args.out.endswith((".csv", ".md")) else args.out
    with open(stem + ".csv", "w") as fh:
        fh.write(report.to_csv())
    with open(stem + ".json", "w") as fh:
        fh.write(report.to_json())
    md = report.to_markdown(title=f"Top-1 test accuracy on {os.path.basename(args.manifest)}")
    with open(stem + ".md", "w") as fh:
        fh.write(md)
    print(md)
    return EXIT_USAGE if report.failed else EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args):
    from . import gradcheck as gc
    from .model import Architecture

    if args.m < 2:
        raise UsageError("--m must be at least 2")
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    variants = ("bt", "mbt") if args.variant == "both" else (args.variant,)
    failures = []
    for variant in variants:
        results = []
        reductions = ("sum", "mean") if variant == "mbt" else ("sum",)
        for reduction in reductions:
            for center in (False, True):
                for k in range(args.instances):
                    results.append(gc.check_objective(variant, args.n, args.m, args.seed + k,
                                                      reduction=reduction, center=center))
        if not args.skip_model:
            arch = Architecture.tiny(latent_dim=args.m)
            results.append(gc.check_end_to_end(variant, arch, seed=args.seed + 7, n=args.n))
        obj = [r for r in results if r.tol == gc.OBJECTIVE_TOL]
        enc = [r for r in results if r.tol == gc.MODEL_TOL]
        print(f"[{variant}] n={args.n} m={args.m} seed={args.seed}")
        print(f"  objective: {len(obj)} instances, max relative error {max(r.max_error for r in obj):.3e} "
              f"(threshold {gc.OBJECTIVE_TOL:g})")
        for r in enc:
            print(f"  encoder:   max relative error {r.max_error:.3e} in {r.worst} "
                  f"(threshold {gc.MODEL_TOL:g}, {r.skipped} kink-straddling coordinates skipped)")
        for r in results:
            if not r.passed:
                failures.append(f"{r.label}: {r.worst} relative error {r.max_error:.3e} >= {r.tol:g}")
    if not args.skip_model:
        r = gc.check_model(Architecture.tiny(latent_dim=args.m), seed=args.seed + 7)
        print(f"[encoder backward] max relative error {r.max_error:.3e} in {r.worst} (threshold {r.tol:g})")
        if not r.passed:
            failures.append(f"{r.label}: {r.worst} relative error {r.max_error:.3e}")
    for f in failures:
        print(f"FAIL {f}", file=sys.stderr)
    return EXIT_VERIFY if failures else EXIT_OK


# ---------------------------------------------------------------------------
# config / fixture


def cmd_config_dump(args):
    cfg = config_io.load(args.config) if args.config else (
        config_io.RunConfig.desk() if args.desk else config_io.load(None))
    sys.stdout.write(config_io.dumps(cfg))
    return EXIT_OK


def cmd_make_fixture(args):
    from .synthetic import write_fixture
    path = write_fixture(args.out_dir, args.per_class, args.test_per_class, args.seed)
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="twinspeech", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("featurize", help="compute log-mel feature files for a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("pretrain", help="stage 1 self-supervised pre-training")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--config")
    s.add_argument("--epochs", type=int)
    s.add_argument("--variant", choices=("bt", "mbt"))
    s.add_argument("--reduction", choices=("sum", "mean"))
    s.add_argument("--log", help="JSON-lines training log (default: <out>.log.jsonl)")
    s.add_argument("--dump-corr", metavar="CSV", help="write the correlation matrix of one batch")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="stage 2 fine-tuning on a labeled manifest")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--fraction", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mode", choices=("full", "probe"))
    s.add_argument("--ft-epochs", type=int)
    s.add_argument("--out", help="write the fine-tuned model")
    s.add_argument("--config")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="top-1 accuracy of a fine-tuned model on the test split")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("grid", help="fraction x seed grid over checkpoints plus scratch baseline")
    s.add_argument("--ckpt", action="append", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--fractions", help="comma-separated, e.g. 0.05,0.1,0.5,1.0")
    s.add_argument("--seeds", help="a count (3) or a list (0,1,2)")
    s.add_argument("--mode", choices=("full", "probe"))
    s.add_argument("--ft-epochs", type=int)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True, help="report path stem (.csv/.json/.md are written)")
    s.add_argument("--config")
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    s.add_argument("--variant", choices=("bt", "mbt", "both"), default="both")
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--m", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--instances", type=int, default=5)
    s.add_argument("--skip-model", action="store_true", help="only check the objective")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("config", help="configuration utilities")
    csub = s.add_subparsers(dest="config_command", parser_class=_Parser)
    csub.required = True
    d = csub.add_parser("dump", help="print the effective configuration with every default")
    d.add_argument("--config")
    d.add_argument("--desk", action="store_true", help="desk-scale defaults instead of full scale")
    d.set_defaults(func=cmd_config_dump)

    s = sub.add_parser("make-fixture", help="write the synthetic 4-class WAV corpus")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--per-class", type=int, default=100)
    s.add_argument("--test-per-class", type=int, default=25)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_fixture)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TwinSpeechError as exc:
        print(f"twinspeech {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"twinspeech {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
