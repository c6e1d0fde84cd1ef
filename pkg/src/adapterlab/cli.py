"""Command-line entry point.

Subcommands: pretrain, sweep, train-one, analyze, sample, diffmap, anova.
Configuration comes from one TOML file plus flag overrides; exit codes are
0 on success, 1 on usage errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with code 2
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="adapterlab", description=__doc__)
    parser.add_argument("--config", help="TOML sweep configuration file")
    parser.add_argument("--seed", type=int, help="override the global seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("--workers", type=int, help="parallel worker count")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain", help="train and save the backbone fixture")

    p_sweep = sub.add_parser("sweep", help="run the design-space sweep")
    p_sweep.add_argument("--include-full", action="store_true", help="also run full fine-tuning arms")

    p_one = sub.add_parser("train-one", help="train a single design point or the full arm")
    p_one.add_argument("--design", help='design string, e.g. "in=CA_out,out=FFN_in/CA_out,act=identity,s=1,r=4"')
    p_one.add_argument("--full", action="store_true", help="fine-tune all parameters instead")
    p_one.add_argument("--run-seed", type=int, default=0, help="per-run seed index")
    p_one.add_argument("--save-bank", help="path prefix to store the trained adapter bank")

    p_an = sub.add_parser("analyze", help="emit heatmap, ANOVA and comparison panels")
    p_an.add_argument("--in", dest="records", required=True, help="records.jsonl path")
    p_an.add_argument("--metric", help="override the metric column")

    p_sm = sub.add_parser("sample", help="sample images from the fixture (plus optional bank)")
    p_sm.add_argument("--prompt", required=True)
    p_sm.add_argument("--n", type=int, default=4)
    p_sm.add_argument("--bank", help="path prefix of a saved adapter bank")

    p_dm = sub.add_parser("diffmap", help="noise-prediction difference heatmaps")
    p_dm.add_argument("--prompts", required=True, help='two prompts separated by "|"')
    p_dm.add_argument("--bank", help="path prefix of a saved adapter bank")
    p_dm.add_argument("--images", type=int, default=4, help="regularization images to probe")
    p_dm.add_argument("--timesteps", default="250,500,750")
    p_dm.add_argument("--noise-seeds", default="0,1")

    p_av = sub.add_parser("anova", help="ANOVA table from existing records")
    p_av.add_argument("--in", dest="records", required=True)
    p_av.add_argument("--metric", help="metric column (defaults per task)")
    return parser


def _load_config(args):
    from . import sweep as sweep_mod

    cfg = sweep_mod.SweepConfig.from_toml(args.config) if args.config else sweep_mod.SweepConfig()
    updates = {}
    if args.seed is not None:
        updates["global_seed"] = args.seed
    if args.out is not None:
        updates["out_dir"] = args.out
    if args.workers is not None:
        updates["workers"] = args.workers
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _ensure_fixture(cfg):
    from . import sweep as sweep_mod

    prefix = sweep_mod.fixture_prefix(cfg)
    if not os.path.exists(f"{prefix}.json"):
        print(f"fixture missing; pretraining into {prefix}")
        sweep_mod.pretrain_fixture(cfg)
    return prefix


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1

    try:
        return _dispatch(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    # heavy imports stay inside main so `--help` is instant
    from . import adapter as A
    from . import diffusion as D
    from . import imageio, metrics, tasks
    from . import sweep as sweep_mod
    from . import unet as U

    cfg = _load_config(args)

    if args.command == "pretrain":
        prefix = sweep_mod.pretrain_fixture(cfg)
        trace = json.load(open(f"{prefix}_trace.json"))
        print(f"fixture written to {prefix} (loss {trace['first_loss']:.4f} -> {trace['final_loss']:.4f})")
        return 0

    if args.command == "sweep":
        records = sweep_mod.run_sweep(cfg, include_full=args.include_full)
        failed = sum(1 for r in records if r.get("status") != "ok")
        print(f"{len(records)} records in {os.path.join(cfg.out_dir, 'records.jsonl')} ({failed} failed)")
        return 0

    if args.command == "train-one":
        if args.full == bool(args.design):
            raise _UsageError("provide exactly one of --design or --full")
        fixture = _ensure_fixture(cfg)
        task = sweep_mod.build_task(cfg)
        if args.full:
            design = "full"
        else:
            design = A.DesignPoint.from_string(args.design)
            if design.rank is None:
                design = sweep_mod._resolve_rank(cfg, U.UNet(cfg.model), design)
        if args.save_bank and not args.full:
            record, _model, bank = sweep_mod.train_one(
                design, task, cfg, args.run_seed, fixture, return_state=True
            )
            if bank is not None:
                A.save_bank(bank, args.save_bank)
                record["bank"] = args.save_bank
        else:
            record = sweep_mod.train_one(design, task, cfg, args.run_seed, fixture)
        print(json.dumps(record, sort_keys=True, indent=1))
        return 0 if record.get("status") == "ok" else 2

    if args.command == "analyze":
        records = sweep_mod.load_records(args.records)
        out = sweep_mod.analyze(records, cfg.out_dir, metric=args.metric)
        for p in out["panels"]:
            print(p)
        for n in out["notices"]:
            print(f"note: {n}")
        if "best_design" in out:
            print(f"best design point: {out['best_design']}")
        return 0

    if args.command == "sample":
        fixture = _ensure_fixture(cfg)
        model = U.UNet.load(fixture)
        bank = A.load_bank(model, args.bank) if args.bank else None
        encoder = tasks.PromptEncoder(cfg.model.cond_dim, seed=cfg.encoder_seed)
        schedule = D.linear_schedule()
        sampler = D.SamplerConfig(cfg.sampler_steps, cfg.cfg_scale, cfg.sampler_order)
        os.makedirs(cfg.out_dir, exist_ok=True)
        for i in range(args.n):
            img = D.sample(
                model, bank, encoder.encode(args.prompt), encoder.empty(), schedule, sampler,
                seed=sweep_mod.run_seed(cfg.global_seed, f"sample|{args.prompt}", i),
            )
            path = os.path.join(cfg.out_dir, f"sample_{i:03d}.ppm")
            imageio.write_ppm(path, img)
            print(path)
        return 0

    if args.command == "diffmap":
        if "|" not in args.prompts:
            raise _UsageError('diffmap --prompts expects "prompt_a|prompt_b"')
        prompt_a, prompt_b = args.prompts.split("|", 1)
        fixture = _ensure_fixture(cfg)
        model = U.UNet.load(fixture)
        bank = A.load_bank(model, args.bank) if args.bank else None
        encoder = tasks.PromptEncoder(cfg.model.cond_dim, seed=cfg.encoder_seed)
        schedule = D.linear_schedule()
        task = sweep_mod.build_task(cfg)
        images = sweep_mod._reference_images(task)
        if isinstance(task, tasks.PersonalizationTask):
            images = task.regularization
        t_set = [int(v) for v in args.timesteps.split(",")]
        seeds = [int(v) for v in args.noise_seeds.split(",")]
        ca, cb = encoder.encode(prompt_a.strip()), encoder.encode(prompt_b.strip())
        os.makedirs(cfg.out_dir, exist_ok=True)
        for i, img in enumerate(images[: args.images]):
            for t in t_set:
                for s in seeds:
                    heat = metrics.noise_diff_map(model, bank, img, t, ca, cb, s, schedule)
                    path = os.path.join(cfg.out_dir, f"diffmap_img{i:02d}_t{t}_s{s}.pgm")
                    imageio.write_pgm(path, heat)
                    print(path)
        return 0

    if args.command == "anova":
        from . import stats as S

        records = sweep_mod.load_records(args.records)
        ok = [r for r in records if r.get("status") == "ok" and r.get("arm") == "adapter"]
        if not ok:
            raise _UsageError(f"no usable records in {args.records}")
        metric = args.metric or ("similarity" if ok[0].get("task") == "personalization" else "frechet")
        rows = S.anova_report(ok, metric)
        os.makedirs(cfg.out_dir, exist_ok=True)
        csv_path = os.path.join(cfg.out_dir, "anova.csv")
        S.report_to_csv(csv_path, rows)
        for row in rows:
            r = row["result"]
            label = f"F={r.f:.4g} p={r.p:.4g}" if r else row["status"]
            print(f"{row['factor']:>14}: {label}")
        print(csv_path)
        return 0

    raise _UsageError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
