"""Sweep orchestration: pretraining the fixture backbone, training and
evaluating design points, persisting run records, and emitting the analysis
bundle (heatmap, ANOVA, best-vs-full comparison).

Records are JSON lines keyed by (arm, design, seed); a sweep skips keys that
already exist, so interrupted runs resume cleanly. Every run derives its RNG
streams from (global_seed, design string, seed index) alone, which makes
record contents independent of worker scheduling.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import multiprocessing
import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import adapter as A
from . import diffusion as D
from . import metrics as M
from . import stats as S
from . import svgplot, tasks
from . import tensor as T
from . import unet as U
from .errors import ConfigurationError, NonFiniteError
from .optim import AdamW


@dataclass
class SweepConfig:
    # task construction
    task: str = "personalization"  # personalization | finetune
    task_seed: int = 0
    class_word: str = "pentagon"
    n_personal: int = 5
    n_reg: int = 200
    personal_fraction: float = 0.5
    # backbone fixture
    model: U.UNetConfig = field(default_factory=U.UNetConfig)
    fixture_seed: int = 0
    encoder_seed: int = 0
    extractor_seed: int = 0
    pretrain_steps: int = 1500
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 8
    pretrain_uncond_fraction: float = 0.1
    # tuning protocol (desk-scale reduction of the reference protocol)
    steps: int = 300
    eval_steps: tuple = (100, 200, 300)
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 8
    seeds: int = 3
    budget_fraction: float = 0.01
    rank: int | None = None  # explicit transformer rank override
    residual_rank: int = 1  # 3x3 conv adapters cannot meet a 1% budget at toy scale
    # design grids
    pairs: object = "nearest"  # "nearest" | "all" | [(input, output), ...]
    activations: tuple = ("identity",)
    scales: tuple = (1.0,)
    # sampling and evaluation
    sampler_steps: int = 25
    cfg_scale: float = 7.0
    sampler_order: int = 2
    eval_images: int = 8
    compute_diff_score: bool = False
    diff_t_set: tuple = (250, 500, 750)
    diff_seeds: tuple = (0, 1)
    diff_images: int = 8
    # orchestration
    global_seed: int = 0
    workers: int = 1
    out_dir: str = "runs"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        for key in ("eval_steps", "activations", "scales", "diff_t_set", "diff_seeds"):
            d[key] = list(d[key])
        if isinstance(self.pairs, (list, tuple)):
            d["pairs"] = [list(p) for p in self.pairs]
        return d

    @staticmethod
    def from_dict(d: dict) -> "SweepConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = U.UNetConfig.from_dict(d["model"])
        for key in ("eval_steps", "activations", "scales", "diff_t_set", "diff_seeds"):
            if key in d:
                d[key] = tuple(d[key])
        if isinstance(d.get("pairs"), list):
            d["pairs"] = [tuple(p) for p in d["pairs"]]
        unknown = set(d) - {f.name for f in dataclasses.fields(SweepConfig)}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return SweepConfig(**d)

    @staticmethod
    def from_toml(path) -> "SweepConfig":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            return SweepConfig.from_dict(tomllib.load(fh))


def run_seed(global_seed: int, design: str, seed_idx: int) -> int:
    """Scheduling-independent integer seed for one (design, seed) job."""
    digest = hashlib.sha256(f"{global_seed}|{design}|{seed_idx}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def build_task(cfg: SweepConfig):
    if cfg.task == "personalization":
        return tasks.build_personalization_task(
            cfg.task_seed,
            class_word=cfg.class_word,
            n_personal=cfg.n_personal,
            n_reg=cfg.n_reg,
            image_size=cfg.model.image_size,
        )
    if cfg.task == "finetune":
        return tasks.build_finetune_task(cfg.task_seed, image_size=cfg.model.image_size)
    raise ConfigurationError(f"unknown task {cfg.task!r}")


def design_points(cfg: SweepConfig, model) -> list[A.DesignPoint]:
    """Expand the configured grids into rank-resolved design points."""
    if cfg.pairs == "nearest":
        pair_list = [(p.name, A.nearest_output_class(p.name)) for p in A.POSITIONS]
    elif cfg.pairs == "all":
        pair_list = A.valid_position_pairs()
    else:
        pair_list = [(i, A.parse_output_class(o)) for i, o in cfg.pairs]
    points = []
    for pos, oc in pair_list:
        for act in cfg.activations:
            for s in cfg.scales:
                dp = A.DesignPoint(pos, oc, act, float(s), None)
                A.validate_design_point(dp)
                points.append(_resolve_rank(cfg, model, dp))
    return points


def _resolve_rank(cfg: SweepConfig, model, dp: A.DesignPoint) -> A.DesignPoint:
    if dp.kind == A.RESIDUAL:
        return dataclasses.replace(dp, rank=cfg.residual_rank)
    if cfg.rank is not None:
        return dataclasses.replace(dp, rank=cfg.rank)
    return A.resolve_rank(model, dp, cfg.budget_fraction)


# --- fixture ---------------------------------------------------------------------


def fixture_prefix(cfg: SweepConfig) -> str:
    return os.path.join(cfg.out_dir, f"fixture_{cfg.model.hash()}_{cfg.fixture_seed}")


def pretrain_fixture(cfg: SweepConfig, seed: int | None = None) -> str:
    """Train the backbone on the general synthetic distribution and write the
    checkpoint; returns the checkpoint path prefix."""
    seed = cfg.fixture_seed if seed is None else seed
    os.makedirs(cfg.out_dir, exist_ok=True)
    prefix = fixture_prefix(cfg)
    model = U.UNet(cfg.model, seed=seed)
    encoder = tasks.PromptEncoder(cfg.model.cond_dim, seed=cfg.encoder_seed)
    schedule = D.linear_schedule()
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x9121]))
    opt = AdamW(model.named_parameters(), lr=cfg.pretrain_lr, weight_decay=0.0)
    empty = encoder.empty()
    warmup = max(1, cfg.pretrain_steps // 50)
    losses = []
    for step in range(cfg.pretrain_steps):
        # linear warmup, then cosine decay to a tenth of the peak rate
        if step < warmup:
            opt.lr = cfg.pretrain_lr * (step + 1) / warmup
        else:
            frac = (step - warmup) / max(1, cfg.pretrain_steps - warmup)
            opt.lr = cfg.pretrain_lr * (0.1 + 0.45 * (1.0 + np.cos(np.pi * frac)))
        batch = []
        for _ in range(cfg.pretrain_batch):
            img, caption = tasks.sample_pretrain_example(rng, cfg.model.image_size)
            cond = empty if rng.uniform() < cfg.pretrain_uncond_fraction else encoder.encode(caption)
            batch.append((img, T.Tensor(cond)))
        T.reset_tape()
        opt.zero_grad()
        try:
            loss = D.training_loss_batch(model, None, batch, rng, schedule)
            T.backward(loss)
        except NonFiniteError as exc:
            raise NonFiniteError(f"pretraining diverged at step {step}: {exc}") from exc
        opt.step()
        losses.append(loss.item())
    T.reset_tape()
    model.save(prefix)
    with open(f"{prefix}_trace.json", "w") as fh:
        json.dump(
            {
                "seed": seed,
                "steps": cfg.pretrain_steps,
                "first_loss": losses[0],
                "final_loss": float(np.mean(losses[-50:])),
                "losses": losses[:: max(1, len(losses) // 200)],
            },
            fh,
        )
    return prefix


# --- single runs ------------------------------------------------------------------


def _eval_prompts(cfg: SweepConfig, task) -> list[str]:
    if isinstance(task, tasks.PersonalizationTask):
        return [task.rare_prompt] * cfg.eval_images
    classes = list(task.classes)
    return [tasks.class_prompt(classes[i % len(classes)]) for i in range(cfg.eval_images)]


def _reference_images(task):
    if isinstance(task, tasks.PersonalizationTask):
        return task.personalization
    return task.images


def evaluate(model, bank, task, cfg: SweepConfig, encoder, schedule, base_seed: int, step: int) -> dict:
    """Similarity and Fréchet metrics on freshly sampled images."""
    extractor = M.FeatureExtractor(cfg.extractor_seed)
    sampler = D.SamplerConfig(cfg.sampler_steps, cfg.cfg_scale, cfg.sampler_order)
    empty = encoder.empty()
    gen = []
    for i, prompt in enumerate(_eval_prompts(cfg, task)):
        # seeds deliberately ignore the checkpoint step: common random numbers
        # across checkpoints keep the window aggregate from re-rolling x_T
        img_seed = run_seed(base_seed, f"eval|{prompt}", i)
        gen.append(D.sample(model, bank, encoder.encode(prompt), empty, schedule, sampler, img_seed))
    refs = _reference_images(task)
    with warnings.catch_warnings():
        # small eval sets make the covariance estimate noisy by design
        warnings.simplefilter("ignore")
        return {
            "similarity": M.clip_similarity(gen, refs, extractor),
            "frechet": M.frechet_from_images(gen, refs, extractor),
        }


def train_one(design, task, cfg: SweepConfig, seed_idx: int, fixture: str, return_state: bool = False):
    """Train one arm (a design point, or full fine-tuning when design is
    "full") and evaluate at each checkpoint; returns the run record, plus the
    trained (model, bank) when return_state is set."""
    t0 = time.monotonic()
    full = design == "full"
    design_str = "full" if full else design.to_string()
    base_seed = run_seed(cfg.global_seed, design_str, seed_idx)
    model = U.UNet.load(fixture)
    encoder = tasks.PromptEncoder(cfg.model.cond_dim, seed=cfg.encoder_seed)
    schedule = D.linear_schedule()

    if full:
        model.set_trainable(True)
        bank = None
        opt = AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    else:
        bank = A.inject(model, design, seed=base_seed)
        opt = AdamW(bank.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    counts = A.count_parameters(model, bank)
    record = {
        "design": design_str,
        "arm": "full" if full else "adapter",
        "seed": seed_idx,
        "task": cfg.task,
        "steps": cfg.steps,
        "params": counts,
        "checkpoints": {},
        "status": "ok",
    }
    if not full:
        record.update(
            input_pos=design.input_pos,
            output_class=design.output_class.label,
            activation=design.activation,
            scale=design.scale,
            rank=design.rank,
        )

    rng = np.random.default_rng(np.random.SeedSequence([base_seed, 0x7124]))
    enc_cache: dict[str, T.Tensor] = {}

    def encode(prompt: str) -> T.Tensor:
        if prompt not in enc_cache:
            enc_cache[prompt] = T.Tensor(encoder.encode(prompt))
        return enc_cache[prompt]

    step = 0
    try:
        if 0 in cfg.eval_steps:
            record["checkpoints"]["0"] = evaluate(
                model, bank, task, cfg, encoder, schedule, base_seed, 0
            )
        for step in range(1, cfg.steps + 1):
            batch = [
                (img, encode(prompt))
                for img, prompt in tasks.training_batch(
                    task, rng, cfg.batch_size, cfg.personal_fraction
                )
            ]
            T.reset_tape()
            opt.zero_grad()
            loss = D.training_loss_batch(model, bank, batch, rng, schedule)
            T.backward(loss)
            opt.step()
            if step in cfg.eval_steps:
                T.reset_tape()
                record["checkpoints"][str(step)] = evaluate(
                    model, bank, task, cfg, encoder, schedule, base_seed, step
                )
        T.reset_tape()
    except NonFiniteError as exc:
        record["status"] = "failed"
        record["error"] = f"training diverged at step {step}: {exc}"
        record["wall_time"] = time.monotonic() - t0
        return (record, model, bank) if return_state else record

    if not record["checkpoints"]:
        record["checkpoints"]["0"] = evaluate(model, bank, task, cfg, encoder, schedule, base_seed, 0)
    sims = [c["similarity"] for c in record["checkpoints"].values()]
    fres = [c["frechet"] for c in record["checkpoints"].values()]
    # similarity aggregates by window mean, Fréchet by window minimum
    record["similarity"] = float(np.mean(sims))
    record["frechet"] = float(np.min(fres))
    record["metric"] = record["similarity"] if cfg.task == "personalization" else record["frechet"]

    if cfg.compute_diff_score and isinstance(task, tasks.PersonalizationTask):
        record["diff_score"] = M.diff_score(
            model, bank,
            task.regularization[: cfg.diff_images],
            encoder.encode(task.rare_prompt), encoder.encode(task.class_prompt),
            schedule, t_set=cfg.diff_t_set, seeds=cfg.diff_seeds, max_images=cfg.diff_images,
        )
    record["wall_time"] = time.monotonic() - t0
    return (record, model, bank) if return_state else record


# --- the sweep ---------------------------------------------------------------------


def record_key(record: dict) -> tuple:
    return (record["arm"], record["design"], record["seed"])


def load_records(path) -> list[dict]:
    records = []
    if os.path.exists(path):
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(json.loads(line))
    return records


def append_record(path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _run_job(args) -> dict:
    cfg_dict, design_str, seed_idx, fixture = args
    cfg = SweepConfig.from_dict(cfg_dict)
    task = build_task(cfg)
    design = "full" if design_str == "full" else A.DesignPoint.from_string(design_str)
    try:
        return train_one(design, task, cfg, seed_idx, fixture)
    except Exception as exc:  # isolate worker failures into flagged records
        return {
            "design": design_str,
            "arm": "full" if design_str == "full" else "adapter",
            "seed": seed_idx,
            "task": cfg.task,
            "status": "failed",
            "error": f"{type(exc).__name__}: {exc}",
            "checkpoints": {},
        }


def run_sweep(cfg: SweepConfig, include_full: bool = False, max_jobs: int | None = None) -> list[dict]:
    """Train every (design point, seed) pair not already recorded; returns all
    records sorted by key. max_jobs limits new work (used to test resume)."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    fixture = fixture_prefix(cfg)
    if not os.path.exists(f"{fixture}.json"):
        pretrain_fixture(cfg)
    task_dir = os.path.join(cfg.out_dir, "task")
    if not os.path.exists(os.path.join(task_dir, "manifest.json")):
        tasks.save_task(build_task(cfg), task_dir)
    records_path = os.path.join(cfg.out_dir, "records.jsonl")
    existing = load_records(records_path)
    done = {record_key(r) for r in existing}

    model = U.UNet(cfg.model)  # shape reference for rank resolution
    jobs = []
    for dp in design_points(cfg, model):
        for seed_idx in range(cfg.seeds):
            key = ("adapter", dp.to_string(), seed_idx)
            if key not in done:
                jobs.append((cfg.to_dict(), dp.to_string(), seed_idx, fixture))
    if include_full:
        for seed_idx in range(cfg.seeds):
            if ("full", "full", seed_idx) not in done:
                jobs.append((cfg.to_dict(), "full", seed_idx, fixture))
    if max_jobs is not None:
        jobs = jobs[:max_jobs]

    new_records = []
    if jobs:
        if cfg.workers > 1:
            ctx = multiprocessing.get_context("spawn")
            with ctx.Pool(cfg.workers) as pool:
                for record in pool.imap_unordered(_run_job, jobs):
                    append_record(records_path, record)
                    new_records.append(record)
        else:
            for job in jobs:
                record = _run_job(job)
                append_record(records_path, record)
                new_records.append(record)
    return sorted(existing + new_records, key=record_key)


# --- analysis ----------------------------------------------------------------------


def analyze(records: list[dict], out_dir: str, metric: str | None = None) -> dict:
    """Emit the report bundle; skips panels whose inputs are missing."""
    if not records:
        raise ConfigurationError("no records to analyze")
    os.makedirs(out_dir, exist_ok=True)
    ok = [r for r in records if r.get("status") == "ok"]
    adapter_recs = [r for r in ok if r["arm"] == "adapter"]
    full_recs = [r for r in ok if r["arm"] == "full"]
    task = records[0].get("task", "personalization")
    if metric is None:
        metric = "similarity" if task == "personalization" else "frechet"
    best_is_max = metric != "frechet"
    outputs: dict = {"panels": [], "notices": []}

    # (a) input x output heatmap of the mean metric
    if adapter_recs:
        rows = [p.name for p in A.POSITIONS]
        cols = [oc.label for oc in A.OUTPUT_CLASSES]
        valid = {(p, oc.label) for p, oc in A.valid_position_pairs()}
        cells = []
        for p in rows:
            row = []
            for oc in cols:
                vals = [
                    r[metric]
                    for r in adapter_recs
                    if r.get("input_pos") == p and r.get("output_class") == oc and metric in r
                ]
                row.append(float(np.mean(vals)) if vals else None)
            cells.append(row)
        empty = {
            (i, j)
            for i, p in enumerate(rows)
            for j, oc in enumerate(cols)
            if (p, oc) not in valid
        }
        path = os.path.join(out_dir, "position_heatmap.svg")
        svgplot.heatmap(path, rows, cols, cells, f"mean {metric} by input x output position", empty)
        outputs["panels"].append(path)
    else:
        outputs["notices"].append("no adapter records: heatmap skipped")

    # (b) ANOVA table + F bar chart
    anova_ready = [r for r in adapter_recs if metric in r]
    if len(anova_ready) >= 3:
        rows = S.anova_report(anova_ready, metric)
        csv_path = os.path.join(out_dir, "anova.csv")
        S.report_to_csv(csv_path, rows)
        outputs["panels"].append(csv_path)
        plotted = [(r["factor"], r["result"].f) for r in rows if r["status"] == "ok"]
        if plotted:
            bar_path = os.path.join(out_dir, "anova_f.svg")
            svgplot.bar_chart(
                bar_path,
                [p[0] for p in plotted],
                [p[1] for p in plotted],
                f"ANOVA F-statistic per factor ({metric})",
                "F",
            )
            outputs["panels"].append(bar_path)
        outputs["anova"] = rows
    else:
        outputs["notices"].append("too few records for ANOVA: panel skipped")

    # best design point
    best = None
    if adapter_recs:
        by_design: dict = {}
        for r in anova_ready:
            by_design.setdefault(r["design"], []).append(r[metric])
        means = {d: float(np.mean(v)) for d, v in by_design.items()}
        best = (max if best_is_max else min)(means, key=means.get)
        outputs["best_design"] = best
        outputs["best_mean"] = means[best]

    # (c) best-vs-full scatter
    if best is not None and full_recs:
        best_by_seed = {r["seed"]: r[metric] for r in anova_ready if r["design"] == best}
        full_by_seed = {r["seed"]: r[metric] for r in full_recs if metric in r}
        shared = sorted(set(best_by_seed) & set(full_by_seed))
        if shared:
            path = os.path.join(out_dir, "best_vs_full.svg")
            svgplot.scatter(
                path,
                [full_by_seed[s] for s in shared],
                [best_by_seed[s] for s in shared],
                [f"seed {s}" for s in shared],
                f"best adapter vs full fine-tune ({metric})",
                f"full fine-tune {metric}",
                f"best adapter {metric}",
            )
            outputs["panels"].append(path)
    else:
        outputs["notices"].append("no full fine-tune records: comparison scatter skipped")

    # (d) markdown summary
    summary = [f"# Sweep analysis\n", f"records: {len(records)} ({len(ok)} ok)\n"]
    if best is not None:
        direction = "max" if best_is_max else "min"
        summary.append(f"best design point ({direction} mean {metric}): `{best}`")
        summary.append(f"mean {metric}: {outputs['best_mean']:.6g}\n")
    for notice in outputs["notices"]:
        summary.append(f"- note: {notice}")
    md_path = os.path.join(out_dir, "summary.md")
    with open(md_path, "w") as fh:
        fh.write("\n".join(summary) + "\n")
    outputs["panels"].append(md_path)
    return outputs
