"""Command-line entry point: train, eval, gen-synth, export-prompts."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

logger = logging.getLogger("semisam")


def _cases_for(data_dir, payload, which):
    from .trainer import CaseData
    from .volumes import case_paths, list_cases, load_case, split_dataset

    ids = list_cases(data_dir)
    if which == "test":
        d = payload["config"]["data"]
        try:
            ids = split_dataset(ids, d["m_labeled"], d["n_test"], d["seed"]).test
        except ValueError:
            logger.warning("checkpoint split does not fit %s; evaluating all cases", data_dir)
    cases = []
    for cid in ids:
        img, lab = case_paths(data_dir, cid)
        vol, mask = load_case(img, lab if lab.exists() else None)
        cases.append(CaseData(cid, vol, mask))
    return cases


def cmd_train(args):
    from .config import load_config
    from .trainer import train

    cfg = load_config(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    artifacts = train(cfg, resume=args.resume, figures=not args.no_figures)
    report = artifacts.final_report
    if report is not None:
        print(json.dumps(report.mean()))
    print(f"run written to {artifacts.output_dir}")
    return 0


def cmd_eval(args):
    from .config import config_from_dict
    from .metrics import evaluate_cases
    from .plotting import plot_metrics
    from .trainer import infer_volume, load_model

    model, payload = load_model(args.checkpoint, args.weights)
    cfg = config_from_dict(payload["config"])
    cases = [c for c in _cases_for(Path(args.data), payload, args.cases) if c.mask is not None]
    if not cases:
        print("no labeled cases to evaluate", file=sys.stderr)
        return 2
    preds = {c.case_id: infer_volume(model, c.volume, cfg.data.patch_shape, cfg.eval.stride) for c in cases}
    refs = {c.case_id: c.mask for c in cases}
    spacings = {c.case_id: c.volume.spacing for c in cases}
    report = evaluate_cases(preds, refs, spacings, args.unit or cfg.eval.unit)

    out = Path(args.out or Path(args.checkpoint).with_suffix("").as_posix() + "_eval")
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "metrics.csv")
    report.write_json(out / "metrics.json")
    if not args.no_figures:
        plot_metrics(report, out / "metrics.png", title=Path(args.checkpoint).name)
    print(json.dumps(report.mean()))
    return 0


def cmd_gen_synth(args):
    from .volumes import PhantomDatasetSpec, write_phantom_dataset

    raw = yaml.safe_load(Path(args.spec).read_text()) if args.spec else {}
    spec = PhantomDatasetSpec.from_dict(raw or {})
    manifest = write_phantom_dataset(spec, args.out)
    print(f"wrote {spec.n_cases} cases; manifest {manifest}")
    return 0


def cmd_export_prompts(args):
    from .config import config_from_dict
    from .trainer import export_prompts, load_model

    model, payload = load_model(args.checkpoint, args.weights)
    cfg = config_from_dict(payload["config"])
    cases = _cases_for(Path(args.data), payload, args.cases)
    k = args.k or cfg.oracle.k_positive
    records = export_prompts(model, cases, cfg.data.patch_shape, k, cfg.eval.stride)
    text = json.dumps({"checkpoint": str(args.checkpoint), "k_positive": k, "cases": records}, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semisam", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a YAML config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--output-dir")
    t.add_argument("--no-figures", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a data directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.add_argument("--cases", choices=("test", "all"), default="test")
    e.add_argument("--weights", choices=("student", "teacher"), default="student")
    e.add_argument("--unit", choices=("voxel", "mm"))
    e.add_argument("--no-figures", action="store_true")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gen-synth", help="write a phantom dataset")
    g.add_argument("--spec", help="YAML/JSON phantom dataset spec")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_synth)

    x = sub.add_parser("export-prompts", help="dump point prompts per case as JSON")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out")
    x.add_argument("--k", type=int)
    x.add_argument("--cases", choices=("test", "all"), default="all")
    x.add_argument("--weights", choices=("student", "teacher"), default="student")
    x.set_defaults(func=cmd_export_prompts)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
