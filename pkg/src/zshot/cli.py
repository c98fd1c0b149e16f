"""Command-line driver: corpus synthesis, staged training, evaluation, ablations."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import plots
from .config import ExperimentConfig, load_config, parse_overrides
from .data import Corpus, default_class_defs, read_corpus, synth_semantic_embeddings, write_corpus, write_word_vectors
from .errors import ConfigError, ContractError, LoadError, ZshotError
from .lgp import export_bank_csv
from .metrics import EvalReport, aggregate, random_assignment_miou
from .pipeline import (FreezeGuard, ModelBundle, build_corpus, evaluate, load_alignment, load_backbone,
                       load_generator, real_features, run_experiment, save_alignment, save_backbone,
                       save_generator, stage_alignment, stage_generator, stage_pretrain, train_all)

log = logging.getLogger("zshot")

STAGES = ("pretrain", "generator", "alignment", "all")
SUITES = ("lgp", "self_loss", "alignment", "m_sweep", "embeddings")
REPORT_KEYS = ("miou_seen", "miou_unseen", "miou_all", "hmiou")


class Manifest:
    """Artifacts and timings of one command; written last."""

    def __init__(self, command: str, cfg: ExperimentConfig, out: Path):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.artifacts: list[str] = []
        self.timings: dict[str, float] = {}
        self.inputs: list[Path] = []

    def add(self, *paths) -> None:
        for p in paths:
            rel = str(Path(p).resolve().relative_to(self.out.resolve()))
            if rel not in self.artifacts:
                self.artifacts.append(rel)

    def input_hash(self) -> str:
        h = hashlib.sha256(self.cfg.to_text().encode())
        for p in sorted(self.inputs):
            h.update(str(p.name).encode())
            h.update(p.read_bytes())
        return h.hexdigest()

    def write(self) -> Path:
        path = self.out / "manifest.json"
        doc = {
            "command": self.command,
            "seed": self.cfg.seed,
            "config": self.cfg.as_dict(),
            "input_hash": self.input_hash(),
            "artifacts": sorted(self.artifacts),
            "timings": {k: round(v, 3) for k, v in self.timings.items()},
        }
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


# ----------------------------------------------------------------- helpers


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("ZSHOT_OUT_DIR") or "runs"
    return Path(out)


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise ContractError(f"{out} exists and is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _config(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "unseen", None) is not None:
        overrides["n_unseen"] = str(args.unseen)
    return load_config(args.config, parse_overrides(overrides.items()))


def _corpus(args, cfg: ExperimentConfig, manifest: Manifest | None = None) -> Corpus:
    if getattr(args, "corpus", None):
        root = Path(args.corpus)
        corpus = read_corpus(root)
        if manifest is not None:
            manifest.inputs += sorted(root.rglob("*.csv"))
        return corpus
    if manifest is not None and cfg.word_vectors:
        manifest.inputs += [Path(p) for p in cfg.word_vectors.split(",") if p]
    return build_corpus(cfg)


def _write_rows(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _need(path: Path, stage: str, prior: str) -> Path:
    if not path.exists():
        raise LoadError(f"stage '{stage}' needs {path.name} in {path.parent}; "
                        f"run `zshot train --stage {prior}` first")
    return path


# ------------------------------------------------------------------ synth


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    _prepare_out(out, args.force)
    m = Manifest("synth", cfg, out)
    t0 = time.perf_counter()
    corpus = _corpus(args, cfg, m)
    m.add(*write_corpus(out, corpus))
    m.timings["synth"] = time.perf_counter() - t0
    m.write()
    print(f"wrote {len(corpus.train)} train and {len(corpus.test)} test scenes to {out}")
    return 0


# ------------------------------------------------------------------ train


def _save_pretrain(out: Path, m: Manifest, pre) -> None:
    m.add(save_backbone(out / "backbone.npz", pre.params, pre.accuracy))
    m.add(_write_rows(out / "pretrain.csv", ("epoch", "loss"), [(i, _fmt(v)) for i, v in enumerate(pre.losses)]))


def _save_generator(out: Path, m: Manifest, gen, bank, rows) -> None:
    m.add(save_generator(out / "generator.npz", gen, bank))
    m.add(_write_rows(out / "gen_train.csv", ("iteration", "mmd", "self", "total"),
                      [(r[0], *map(_fmt, r[1:])) for r in rows]))
    export_bank_csv(out / "lgp_bank.csv", bank)
    m.add(out / "lgp_bank.csv")


def _save_alignment(out: Path, m: Manifest, align, bank, losses) -> None:
    m.add(save_alignment(out / "alignment.npz", align, bank))
    m.add(_write_rows(out / "align_train.csv", ("iteration", "loss"), [(i, _fmt(v)) for i, v in enumerate(losses)]))
    export_bank_csv(out / "lgp_bank.csv", bank)
    m.add(out / "lgp_bank.csv")


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    stage = args.stage
    if stage in ("pretrain", "all"):
        _prepare_out(out, args.force)
    else:
        out.mkdir(parents=True, exist_ok=True)
    m = Manifest(f"train:{stage}", cfg, out)
    corpus = _corpus(args, cfg, m)
    t0 = time.perf_counter()
    if stage == "all":
        bundle, logs = train_all(corpus, cfg)
        if logs.freeze_violations:
            raise ContractError(f"{logs.freeze_violations} freeze violations during training")
        m.timings.update(logs.timings)
        m.add(save_backbone(out / "backbone.npz", bundle.backbone, logs.pretrain_accuracy))
        m.add(_write_rows(out / "pretrain.csv", ("epoch", "loss"),
                          [(i, _fmt(v)) for i, v in enumerate(logs.pretrain_losses)]))
        _save_generator(out, m, bundle.generator, bundle.generator.bank, logs.generator)
        if bundle.align is not None:
            _save_alignment(out, m, bundle.align, bundle.bank, logs.alignment)
        _evaluate_into(out, m, bundle, corpus)
        m.write()
        return 0

    prep = [bb.prepare(s, cfg.k) for s in corpus.train]
    if stage == "pretrain":
        pre, _ = stage_pretrain(corpus, cfg, bb.SupervisionMonitor(corpus.split))
        _save_pretrain(out, m, pre)
        print(f"pretrain: seen accuracy {pre.accuracy:.3f}")
    elif stage == "generator":
        backbone = load_backbone(_need(out / "backbone.npz", "generator", "pretrain"))
        guard = FreezeGuard()
        guard.hold("backbone", backbone.snapshot())
        real = real_features(prep, backbone, corpus.split.seen)
        gres = stage_generator(real, corpus, cfg, bb.SupervisionMonitor(corpus.split))
        if not guard.verify("backbone", backbone.snapshot()):
            raise ContractError("backbone changed during generator training")
        _save_generator(out, m, gres.params, gres.bank, gres.log)
        print(f"generator: final loss {gres.log[-1][3]:.4f}" if gres.log else "generator: no iterations")
    elif stage == "alignment":
        backbone = load_backbone(_need(out / "backbone.npz", "alignment", "pretrain"))
        gen, bank = load_generator(_need(out / "generator.npz", "alignment", "generator"))
        if cfg.no_alignment:
            print("alignment disabled by config (no_alignment); nothing to train")
        else:
            guard = FreezeGuard()
            guard.hold("backbone", backbone.snapshot())
            guard.hold("generator", gen.snapshot())
            real = real_features(prep, backbone, corpus.split.seen)
            ares = stage_alignment(real, corpus, gen, bank, cfg)
            if not (guard.verify("backbone", backbone.snapshot()) and guard.verify("generator", gen.snapshot())):
                raise ContractError("a frozen stage changed during alignment")
            _save_alignment(out, m, ares.params, ares.bank, ares.losses)
            print(f"alignment: final loss {ares.losses[-1]:.4f}" if ares.losses else "alignment: no iterations")
    m.timings[stage] = time.perf_counter() - t0
    m.write()
    return 0


# ------------------------------------------------------------------- eval


def _load_bundle(out: Path, cfg: ExperimentConfig, corpus: Corpus) -> ModelBundle:
    backbone = load_backbone(out / "backbone.npz")
    gen, bank = load_generator(out / "generator.npz")
    align = None
    if not cfg.no_alignment:
        align, bank = load_alignment(out / "alignment.npz")
    return ModelBundle(cfg, corpus.split, corpus.semantics, backbone, gen, bank, align, list(corpus.names))


def report_rows(report: EvalReport, trivial: EvalReport, baseline: float) -> list[tuple[str, str]]:
    """Flat key,value rows; timing-free so identical runs give identical files."""
    rows = [(k, _fmt(v)) for k, v in report.scalars().items() if not k.startswith("_")]
    for k in REPORT_KEYS:
        rows.append((f"trivial_{k}", _fmt(getattr(trivial, k))))
    rows.append(("random_miou_unseen", _fmt(baseline)))
    for name, v in zip(report.names, report.per_class_iou):
        rows.append((f"iou_{name}", _fmt(v)))
    return rows


def _evaluate_into(out: Path, m: Manifest, bundle: ModelBundle, corpus: Corpus) -> EvalReport:
    t0 = time.perf_counter()
    test = [bb.prepare(s, bundle.cfg.k) for s in corpus.test]
    report = evaluate(bundle, test, "full")
    trivial = evaluate(bundle, test, "zsl_trivial")
    labels = np.concatenate([s.labels for s in corpus.test])
    baseline = random_assignment_miou(np.bincount(labels, minlength=len(corpus.names)), corpus.split.unseen)
    m.add(_write_rows(out / "report.csv", ("key", "value"), report_rows(report, trivial, baseline)))
    doc = {
        "percent": report.percent(),
        "trivial_percent": trivial.percent(),
        "random_miou_unseen": baseline,
        "entropy_visual": report.entropy_visual,
        "entropy_semantic": report.entropy_semantic,
        "per_class_iou": {n: (None if np.isnan(v) else float(v)) for n, v in zip(report.names, report.per_class_iou)},
        "seen": list(report.seen),
        "unseen": list(report.unseen),
    }
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    m.add(out / "report.json")
    m.add(_write_rows(out / "confusion.csv", ["true\\pred"] + list(report.names),
                      [[n] + [int(x) for x in row] for n, row in zip(report.names, report.confusion)]))
    m.add(plots.per_class_iou(out / "iou.svg", report.names, report.per_class_iou, report.unseen))
    if "_visual_dists" in report.extra:
        vis, sem = report.extra["_visual_dists"], report.extra["_semantic_dists"]
        head = ["class"] + [f"w{j}" for j in range(vis.shape[1])]
        for fname, mat in (("lgp_weights_visual.csv", vis), ("lgp_weights_semantic.csv", sem)):
            m.add(_write_rows(out / fname, head, [[n] + [_fmt(x) for x in r] for n, r in zip(report.names, mat)]))
        m.add(plots.lgp_distributions(out / "lgp.svg", report.names, vis, sem))
    m.timings["eval"] = time.perf_counter() - t0
    p = report.percent()
    print(f"seen {p['miou_seen']:.1f}  unseen {p['miou_unseen']:.1f}  all {p['miou_all']:.1f}  "
          f"HmIoU {p['hmiou']:.1f}  (random unseen {100 * baseline:.1f})")
    return report


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    m = Manifest("eval", cfg, out)
    corpus = _corpus(args, cfg, m)
    bundle = _load_bundle(out, cfg, corpus)
    _evaluate_into(out, m, bundle, corpus)
    m.write()
    return 0


# ----------------------------------------------------------------- ablate


def _variants(suite: str, cfg: ExperimentConfig, out: Path) -> list[tuple[str, ExperimentConfig]]:
    if suite == "lgp":
        return [("full", cfg), ("no LGP in generator", cfg.replace(no_lgp_in_generator=True))]
    if suite == "self_loss":
        return [("full", cfg), ("no self loss", cfg.replace(no_self_loss=True))]
    if suite == "alignment":
        return [("full", cfg), ("no alignment", cfg.replace(no_alignment=True))]
    if suite == "m_sweep":
        return [(f"M={m}", cfg.replace(M=m)) for m in (8, 16, 32, 64)]
    if suite == "embeddings":
        # two independent synthetic vector files standing in for two embedding sources
        defs = default_class_defs()
        names = [c.name for c in defs]
        emb = out / "embeddings"
        emb.mkdir(parents=True, exist_ok=True)
        files = {}
        for tag, seed in (("A", 101), ("B", 202)):
            table = synth_semantic_embeddings(defs, cfg.d_t, max(cfg.semantic_noise, 0.1), seed)
            files[tag] = emb / f"vectors_{tag}.txt"
            write_word_vectors(files[tag], names, table.vectors)
        return [("A", cfg.replace(word_vectors=str(files["A"]))),
                ("B", cfg.replace(word_vectors=str(files["B"]))),
                ("A+B", cfg.replace(word_vectors=f"{files['A']},{files['B']}"))]
    raise ConfigError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")


def cmd_ablate(args) -> int:
    base = _config(args)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    m = Manifest(f"ablate:{args.suite}", base, out)
    variants = _variants(args.suite, base, out)
    seeds = [base.seed + i for i in range(args.seeds)]
    if len(seeds) < 1:
        raise ConfigError("--seeds must be at least 1")
    corpus0 = build_corpus(base)
    pretrained = {}
    per_run, table, failed = [], [], []
    t0 = time.perf_counter()
    for label, vcfg in variants:
        corpus = corpus0 if not vcfg.word_vectors else build_corpus(vcfg)
        reports = []
        for seed in seeds:
            cfg = vcfg.replace(seed=seed)
            try:
                if seed not in pretrained:
                    # the backbone ignores semantics and generator flags, so one per seed suffices
                    pretrained[seed] = stage_pretrain(corpus0, cfg)
                res = run_experiment(cfg, corpus, pretrained[seed])
            except ZshotError as exc:
                log.error("variant %s seed %d failed: %s", label, seed, exc)
                failed.append((label, seed, str(exc)))
                continue
            reports.append(res.report)
            per_run.append([label, seed] + [_fmt(getattr(res.report, k)) for k in REPORT_KEYS])
            log.info("%s seed %d unseen %.3f", label, seed, res.report.miou_unseen)
        if reports:
            agg = aggregate(reports)
            table.append([label, len(reports)] + [_fmt(x) for k in REPORT_KEYS for x in agg[k]])
    m.timings["ablate"] = time.perf_counter() - t0
    head = ["variant", "runs"] + [f"{k}_{s}" for k in REPORT_KEYS for s in ("mean", "std")]
    m.add(_write_rows(out / f"ablation_{args.suite}.csv", head, table))
    m.add(_write_rows(out / f"ablation_{args.suite}_runs.csv", ["variant", "seed", *REPORT_KEYS], per_run))
    if table:
        m.add(plots.ablation_bars(out / f"ablation_{args.suite}.svg", [r[0] for r in table],
                                  [100 * float(r[4]) for r in table], [100 * float(r[5]) for r in table]))
    m.write()
    print(format_table(table))
    if failed:
        print(f"{len(failed)} run(s) failed; table is partial", file=sys.stderr)
        return 3
    return 0


def format_table(table) -> str:
    lines = [f"{'variant':<22}" + "".join(f"{k:>18}" for k in REPORT_KEYS)]
    for r in table:
        cells = []
        for i in range(len(REPORT_KEYS)):
            mu, sd = float(r[2 + 2 * i]), float(r[3 + 2 * i])
            cells.append(f"{100 * mu:>10.1f} +- {100 * sd:<4.1f}")
        lines.append(f"{r[0]:<22}" + "".join(cells))
    return "\n".join(lines)


# ----------------------------------------------------------------- report


def cmd_report(args) -> int:
    """Collect every report.json under --out and summarize across runs."""
    cfg = _config(args)
    out = _out_dir(args)
    found = sorted(out.rglob("report.json"))
    if not found:
        raise LoadError(f"no report.json under {out}; run `zshot train --stage all` or `zshot eval` first")
    m = Manifest("report", cfg, out)
    rows, vals = [], []
    for p in found:
        doc = json.loads(p.read_text())
        pc = doc["percent"]
        rows.append([str(p.parent.relative_to(out)) or "."] + [pc[k] for k in REPORT_KEYS]
                    + [doc["trivial_percent"]["miou_unseen"], round(100 * doc["random_miou_unseen"], 1),
                       doc["entropy_visual"], doc["entropy_semantic"]])
        vals.append([pc[k] for k in REPORT_KEYS])
    vals = np.array(vals, dtype=float)
    rows.append(["mean"] + [round(float(x), 2) for x in vals.mean(0)] + [""] * 4)
    rows.append(["std"] + [round(float(x), 2) for x in vals.std(0)] + [""] * 4)
    head = ["run", *REPORT_KEYS, "trivial_miou_unseen", "random_miou_unseen", "entropy_visual", "entropy_semantic"]
    m.add(_write_rows(out / "summary.csv", head, rows))
    m.add(plots.ablation_bars(out / "summary.svg", [r[0] for r in rows[:-2]], vals[:, 1],
                              np.zeros(len(vals))))
    m.write()
    for r in rows:
        print(",".join(str(x) for x in r))
    return 0


# ------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zshot", description="desk-scale zero-shot point-cloud segmentation")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value")
        sp.add_argument("--seed", type=int, help="global seed")
        sp.add_argument("--out", help="output directory (default $ZSHOT_OUT_DIR or ./runs)")
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    sp = sub.add_parser("synth", help="write a synthetic corpus")
    common(sp)
    sp.add_argument("--unseen", type=int, help="number of unseen classes")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train one stage or all three")
    common(sp)
    sp.add_argument("--stage", choices=STAGES, default="all")
    sp.add_argument("--corpus", help="read the corpus from a synth directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate checkpoints in --out")
    common(sp)
    sp.add_argument("--corpus", help="read the corpus from a synth directory")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="run an ablation suite over several seeds")
    common(sp)
    sp.add_argument("--suite", choices=SUITES, required=True)
    sp.add_argument("--seeds", type=int, default=5, help="number of seeds (default 5)")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="summarize report.json files under --out")
    common(sp)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ZshotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
