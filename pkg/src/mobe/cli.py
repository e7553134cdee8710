"""Command-line front end.

    mobe gen       --out DIR                 synthetic dataset on disk
    mobe train     --out DIR [--data DIR]    phases 1-2, checkpoints, report
    mobe eval      --run DIR [--data DIR]    re-evaluate a finished run
    mobe ablate    --out FILE --grid G       CSV of a toggle / rank / misalignment grid
    mobe gradcheck [--module M] [--trials N] finite-difference report
    mobe params                              parameter counts and adapter share

Exit codes: 0 success, 2 config error, 3 missing input, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import gradcheck, metrics
from .config import ConfigError, ExperimentConfig, load_config, to_toml
from .model import adapter_share, build_model
from .rng import stream
from .synthgen import few_shot_subsample, generate_dataset, load_dataset, save_dataset
from .trainer import Experiment, NumericalError, evaluate, load_checkpoint, prepare_data

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
GRIDS = ("toggles", "ranks", "misalign")


def _parse_pairs(text: str, flag: str) -> dict[str, str]:
    """'a=1,b=2' or 'a=1 b=2' -> {'a': '1', 'b': '2'}."""
    out = {}
    for item in text.replace(",", " ").split():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"{flag}: expected key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _on_off(value: str, key: str) -> bool:
    if value.lower() in ("on", "true", "1", "yes"):
        return True
    if value.lower() in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"--toggles: {key} must be on or off, got {value!r}")


def build_config(args) -> ExperimentConfig:
    """Config file, then --set overrides, then dedicated flags; MOBE_SEED wins over all."""
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "task", None):
        overrides.append(f'train.task="{args.task}"')
    if getattr(args, "toggles", None):
        for key, value in _parse_pairs(args.toggles, "--toggles").items():
            if key not in ("mobe", "sra"):
                raise ConfigError(f"--toggles: unknown toggle {key!r} (use mobe, sra)")
            overrides.append(f"train.{key}_enabled={str(_on_off(value, key)).lower()}")
    if getattr(args, "few_shot", None):
        pairs = _parse_pairs(args.few_shot, "--few-shot")
        unknown = set(pairs) - {"subj", "ratio"}
        if unknown or "subj" not in pairs:
            raise ConfigError("--few-shot expects subj=<id> ratio=<fraction>")
        overrides.append(f"train.few_shot_subject={int(pairs['subj'])}")
        overrides.append(f"train.few_shot_ratio={float(pairs.get('ratio', 1.0))}")
    cfg = load_config(args.config, overrides)
    cfg.train.resolved()
    return cfg


def print_config(cfg: ExperimentConfig, out=None) -> None:
    out = out or sys.stdout
    resolved = cfg.replace(train=vars(cfg.train.resolved()))
    print("# resolved config", file=out)
    print(to_toml(resolved), file=out)


def _load_data(path):
    if path is None:
        return None
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset directory {path} does not exist")
    return load_dataset(path)


# ---------------------------------------------------------------- subcommands


def cmd_gen(args) -> int:
    cfg = build_config(args)
    print_config(cfg)
    data = generate_dataset(cfg.data, cfg.seed)
    t = cfg.train
    if t.few_shot_subject is not None and t.few_shot_ratio < 1.0:
        data = few_shot_subsample(data, t.few_shot_subject, t.few_shot_ratio, cfg.seed)
    manifest = save_dataset(data, args.out)
    counts = {s["subject_id"]: s["n_train"] for s in manifest["subjects"]}
    print(f"wrote {args.out}: train counts {counts}, test {manifest['subjects'][0]['n_test']}, "
          f"hash {manifest['dataset_hash'][:16]}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_config(args)
    print_config(cfg)
    data = _load_data(args.data)
    if data is not None and data.provenance.get("few_shot"):
        # already subsampled at generation time
        cfg = cfg.replace(train={"few_shot_subject": None, "few_shot_ratio": 1.0})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(to_toml(cfg))
    report = Experiment(cfg, data, out).run()
    print(json.dumps({"label": report.label, "average": report.average, "report": str(out / "report.json")}))
    return EXIT_OK


def cmd_eval(args) -> int:
    run = Path(args.run)
    cfg_path = run / "config.toml"
    if not cfg_path.exists():
        raise FileNotFoundError(f"no config.toml in run directory {run}")
    cfg = load_config(cfg_path, args.set)
    print_config(cfg)
    data = prepare_data(cfg, _load_data(args.data))
    tcfg = cfg.train.resolved()
    model = build_model(data.input_dim, data.n_subjects, data.config.n_classes, data.config.embed_dim,
                        cfg.model, stream(tcfg.seed, "init"))
    ckpt = run / ("ckpt_meta" if tcfg.mobe_enabled else "ckpt_phase1")
    if not (ckpt / "index.json").exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    load_checkpoint(model, ckpt)
    model.set_adapters_enabled(tcfg.mobe_enabled)
    per_subject = evaluate(model, data, tcfg.task, cfg.eval, tcfg.seed)
    report = metrics.MetricsReport.from_subjects(
        per_subject, label=tcfg.label, config=cfg.to_dict(), config_hash=cfg.digest(),
        dataset_hash=data.digest(), seed=tcfg.seed)
    print(report.to_json(include_clock=False))
    return EXIT_OK


def grid_combos(grid: str, cfg: ExperimentConfig) -> list[tuple[str, dict]]:
    """(combo name, train/model overrides) for one ablation grid."""
    if grid == "toggles":
        return [(f"mobe={'on' if m else 'off'},sra={'on' if s else 'off'}",
                 {"train": {"mobe_enabled": m, "sra_enabled": s}})
                for m in (True, False) for s in (True, False)]
    if grid == "ranks":
        return [(f"rank={r}", {"model": {"rank": int(r)}, "train": {"mobe_enabled": True, "sra_enabled": True}})
                for r in cfg.ablate.ranks]
    if grid == "misalign":
        return [(f"misalign={'on' if m else 'off'}", {"train": {"misalign": m}}) for m in (False, True)]
    raise ConfigError(f"ablate.grid must be one of {GRIDS}, got {grid!r}")


def run_ablation(cfg: ExperimentConfig, grid: str, seeds=None, data=None, progress=None) -> list[dict]:
    """One row per (combo, seed) with the averaged metrics of that run."""
    rows = []
    for combo, sections in grid_combos(grid, cfg):
        for seed in (cfg.ablate.seeds if seeds is None else seeds):
            train = dict(sections.get("train", {}), seed=int(seed))
            run_cfg = cfg.replace(train=train, model=sections.get("model"))
            report = Experiment(run_cfg, data).run()
            row = {"grid": grid, "combo": combo, "label": report.label, "seed": int(seed),
                   "rank": run_cfg.model.rank, "misalign": run_cfg.train.misalign,
                   "config_hash": report.config_hash, "dataset_hash": report.dataset_hash}
            row.update({m: report.average.get(m) for m in metrics.METRIC_FIELDS})
            row["wall_clock_s"] = round(report.wall_clock_s, 3)
            rows.append(row)
            if progress:
                progress(row)
    return rows


def write_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    print_config(cfg)
    grid = args.grid or cfg.ablate.grid
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    data = _load_data(args.data)
    rows = run_ablation(cfg, grid, seeds, data,
                        progress=lambda r: print(f"{r['combo']} seed={r['seed']} done", file=sys.stderr))
    write_csv(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    modules = [args.module] if args.module and args.module != "all" else None
    results = gradcheck.run_checks(modules, args.trials, args.seed or 0)
    print(gradcheck.format_report(results))
    return EXIT_OK if all(r.passed for r in results) else 1


def cmd_params(args) -> int:
    cfg = build_config(args)
    print_config(cfg)
    d = cfg.data
    n_in = int(round(d.template_size * d.roi_fraction))
    model = build_model(n_in, d.n_subjects, d.n_classes, d.embed_dim, cfg.model, stream(cfg.seed, "init"))
    print(json.dumps(adapter_share(model), indent=2))
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mobe", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, task=True):
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
        sp.add_argument("--seed", type=int, help="root seed (MOBE_SEED overrides)")
        if task:
            sp.add_argument("--task", choices=("classification", "retrieval", "reconstruction"))
            sp.add_argument("--toggles", help="e.g. mobe=off,sra=off")
            sp.add_argument("--few-shot", dest="few_shot", help="e.g. 'subj=0 ratio=0.1'")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    common(g, task=False)
    g.add_argument("--few-shot", dest="few_shot", help="e.g. 'subj=0 ratio=0.1'")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train and evaluate one configuration")
    common(t)
    t.add_argument("--data", help="dataset directory from `mobe gen` (generated in memory if omitted)")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate the final checkpoint of a run")
    e.add_argument("--run", required=True)
    e.add_argument("--data")
    e.add_argument("--set", action="append", default=[])
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation grid")
    common(a)
    a.add_argument("--grid", choices=GRIDS)
    a.add_argument("--seeds", help="comma-separated seeds (default ablate.seeds)")
    a.add_argument("--data")
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference gradient report")
    c.add_argument("--module", choices=("all", *gradcheck.MODULES))
    c.add_argument("--trials", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_gradcheck)

    q = sub.add_parser("params", help="parameter counts and adapter share")
    common(q, task=False)
    q.set_defaults(fn=cmd_params)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
