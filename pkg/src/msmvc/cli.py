"""Command-line surface; one command per process, exit codes 0/2/3/4.

Every command prints the resolved config hash and writes a machine-readable
result file under <workdir>/reports/.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ABLATION_VARIANTS, VERSION, apply_paper_schedule, \
    canonical_json, load_config
from .errors import InvalidInputError, NotReadyError, NumericalError
from .evalkit import evaluate_conversion, format_table, run_ablation, \
    write_report
from .pipeline import ConversionSystem, Workspace, convert_file, gen_corpus, \
    load_oracles, pretrain_oracles, richness_reports, train_variant

EXIT_OK = 0
EXIT_INVALID_INPUT = 2
EXIT_NOT_READY = 3
EXIT_NUMERICAL = 4

log = logging.getLogger("msmvc")


def _write_result(ws: Workspace, name: str, payload: dict) -> Path:
    ws.report_dir.mkdir(parents=True, exist_ok=True)
    path = ws.report_dir / name
    path.write_text(canonical_json(payload) + "\n", encoding="utf-8")
    return path


def _load_cfg(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, overrides or None)
    if getattr(args, "paper_schedule", False):
        cfg = apply_paper_schedule(cfg)
    print(f"config hash: {cfg.hash()}  ({VERSION})")
    return cfg


def cmd_gen_corpus(args) -> int:
    cfg = _load_cfg(args)
    if args.speakers < 2:
        raise InvalidInputError("--speakers must be at least 2")
    ws = Workspace(args.workdir)
    manifest = gen_corpus(ws, cfg, args.speakers, args.utts,
                          args.seed if args.seed is not None else cfg.seed,
                          out_dir=args.out)
    print(f"manifest: {manifest.path}  ({len(manifest.rows)} utterances)")
    _write_result(ws, "gen_corpus.json",
                  {"manifest": str(manifest.path), "rows": len(manifest.rows),
                   "config_hash": cfg.hash(), "version": VERSION})
    return EXIT_OK


def cmd_pretrain_oracles(args) -> int:
    cfg = _load_cfg(args)
    ws = Workspace(args.workdir)
    metrics = pretrain_oracles(ws, cfg)
    for key, value in sorted(metrics.items()):
        print(f"{key}: {value:.3f}")
    _write_result(ws, "pretrain_oracles.json",
                  {"metrics": metrics, "config_hash": cfg.hash(),
                   "version": VERSION})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    ws = Workspace(args.workdir)
    result = train_variant(ws, cfg, args.variant, stages=("reconstruction",))
    losses = result["reconstruction"].epoch_losses
    print(f"reconstruction finished after {len(losses)} epochs; "
          f"final loss {losses[-1]:.4f}")
    _write_result(ws, f"train_{args.variant}.json",
                  {"checkpoint": str(result["reconstruction"].checkpoint),
                   "epochs": len(losses), "final_loss": losses[-1],
                   "config_hash": cfg.hash(), "version": VERSION})
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _load_cfg(args)
    ws = Workspace(args.workdir)
    result = train_variant(ws, cfg, args.variant, stages=("finetune",))
    probe = result["finetune"].probe
    print(f"finetune finished; probe metrics: {probe}")
    _write_result(ws, f"finetune_{args.variant}.json",
                  {"checkpoint": str(result["finetune"].checkpoint),
                   "probe": probe, "config_hash": cfg.hash(),
                   "version": VERSION})
    return EXIT_OK


def cmd_convert(args) -> int:
    cfg = _load_cfg(args)
    ws = Workspace(args.workdir)
    out_prefix = args.out or (ws.report_dir / Path(args.in_wav).stem)
    result = convert_file(ws, cfg, args.in_wav, args.target, out_prefix,
                          emit_audio=args.emit_audio, variant=args.variant,
                          stage=args.stage)
    print(f"wrote {result['mel']} ({result['num_frames']} frames)")
    if "wav" in result:
        print(f"wrote {result['wav']}")
    _write_result(ws, "convert.json",
                  dict(result, config_hash=cfg.hash(), version=VERSION))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    ws = Workspace(args.workdir)
    system = ConversionSystem.load(ws, cfg, args.variant, args.stage)
    oracles = load_oracles(ws, cfg)
    manifest = ws.manifest()
    cache = ws.cache(cfg)
    target = args.target or cfg.evalkit.target_speaker
    report = evaluate_conversion(system.model, cache, manifest.split("test"),
                                 target, oracles["probe"], system.mel_stats,
                                 system.params, gl_iters=cfg.evalkit.gl_iters,
                                 centroid_rows=manifest.split("train"))
    ws.report_dir.mkdir(parents=True, exist_ok=True)
    csv_path = (ws.report_dir / f"evaluate_{args.variant}.csv"
                if cfg.evalkit.per_utterance_csv else None)
    write_report(report, ws.report_dir / f"evaluate_{args.variant}.json",
                 csv_path)
    print(format_table({args.variant: report}))
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = _load_cfg(args)
    ws = Workspace(args.workdir)
    kinds = tuple(args.features.split(",")) if args.features else \
        ("mel", "bn", "ssl")
    reports = richness_reports(ws, cfg, kinds)
    payload = {}
    print(f"{'feature':8s}  {'mse_lf0':>8s}  {'mse_energy':>10s}  {'spk_acc':>7s}")
    for kind, rep in reports.items():
        print(f"{kind:8s}  {rep.mse_lf0:8.4f}  {rep.mse_energy:10.5f}  "
              f"{rep.speaker_accuracy:7.3f}")
        payload[kind] = {"mse_lf0": rep.mse_lf0, "mse_energy": rep.mse_energy,
                         "speaker_accuracy": rep.speaker_accuracy}
    _write_result(ws, "probe.json", {"reports": payload,
                                     "config_hash": cfg.hash(),
                                     "version": VERSION})
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    ws = Workspace(args.workdir)
    oracles = load_oracles(ws, cfg)
    manifest = ws.manifest()
    cache = ws.cache(cfg)
    variants = ABLATION_VARIANTS if args.variants == "all" else \
        tuple(args.variants.split(","))
    checkpoints = {v: ws.model_dir / f"{v}_{args.stage}.ckpt" for v in variants}
    mel_stats = cache.mel_stats(manifest)
    from .signal import FrameParams
    params = FrameParams.from_config(cfg.signal)
    results = run_ablation(checkpoints, cache, manifest.split("test"),
                           args.target or cfg.evalkit.target_speaker,
                           oracles["probe"], mel_stats, params,
                           gl_iters=cfg.evalkit.gl_iters,
                           out_json=ws.report_dir / "ablation.json")
    print(format_table(results))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msmvc",
        description="Desk-scale multi-scale style modeling voice conversion")
    parser.add_argument("--version", action="version", version=VERSION)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--workdir", default="runs/default",
                       help="workspace directory for artifacts")
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")

    p = sub.add_parser("gen-corpus", help="generate the synthetic corpus")
    common(p)
    p.add_argument("--speakers", type=int, required=True)
    p.add_argument("--utts", type=int, required=True,
                   help="utterances per speaker")
    p.add_argument("--out", default=None,
                   help="corpus directory (default <workdir>/corpus)")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("pretrain-oracles",
                       help="fit extractors, descriptor, classifier, probe")
    common(p)
    p.set_defaults(func=cmd_pretrain_oracles)

    for name, fn, help_text in (
            ("train", cmd_train, "stage 1: reconstruction training"),
            ("finetune", cmd_finetune, "stage 2: alternating finetune")):
        p = sub.add_parser(name, help=help_text)
        common(p)
        p.add_argument("--variant", default="full", choices=ABLATION_VARIANTS)
        p.add_argument("--paper-schedule", action="store_true",
                       help="use the published full-scale schedule")
        p.set_defaults(func=fn)

    p = sub.add_parser("convert", help="convert one WAV to a target speaker")
    common(p)
    p.add_argument("--in", dest="in_wav", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", default=None, help="output path prefix")
    p.add_argument("--emit-audio", action="store_true")
    p.add_argument("--variant", default="full", choices=ABLATION_VARIANTS)
    p.add_argument("--stage", default="finetuned",
                   choices=("recon", "finetuned"))
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("evaluate", help="objective evaluation on the test split")
    common(p)
    p.add_argument("--variant", default="full", choices=ABLATION_VARIANTS)
    p.add_argument("--stage", default="finetuned",
                   choices=("recon", "finetuned"))
    p.add_argument("--target", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("probe", help="feature-richness probes")
    common(p)
    p.add_argument("--features", default=None,
                   help="comma-separated subset of mel,bn,ssl")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", help="evaluate all trained variants")
    common(p)
    p.add_argument("--variants", default="all")
    p.add_argument("--stage", default="finetuned",
                   choices=("recon", "finetuned"))
    p.add_argument("--target", default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID_INPUT
    except NotReadyError as exc:
        print(f"not ready: {exc}", file=sys.stderr)
        return EXIT_NOT_READY
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
