"""Ablation grids: one train+evaluate per (cell, seed), summarised as mean/std per metric."""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import atomic_write
from .config import RunConfig, with_overrides
from .training import train

METRICS = ("acer", "acc", "auc", "eer")


@dataclass
class Cell:
    name: str
    overrides: dict = field(default_factory=dict)


def _cell(name, variant, dm=False, cdm=False, baseline="none", **model):
    return Cell(name, {"model": {"variant": variant, **model},
                       "loss": {"dm": dm, "cdm": cdm, "baseline": baseline}})


def component_grid() -> list[Cell]:
    """Sublayer variant x DM x CDM, in the order of the component ablation table."""
    return [
        _cell("ce", "none"),
        _cell("ce+softmoe", "softmoe"),
        _cell("ce+moae", "moae"),
        _cell("ce+moae+dm", "moae", dm=True),
        _cell("ce+moae+cdm", "moae", cdm=True),
        _cell("ce+moae+dm+cdm", "moae", dm=True, cdm=True),
    ]


def experts_heads_grid(values=(2, 4, 8)) -> list[Cell]:
    return [_cell(f"m{m}_h{h}", "moae", dm=True, cdm=True, m=m, h=h)
            for m in values for h in values]


def baseline_grid() -> list[Cell]:
    cells = [_cell(f"ce+moae+{b}", "moae", baseline=b)
             for b in ("supcon", "npair", "triplet", "hard_triplet")]
    return cells + [_cell("ce+moae+dm+cdm", "moae", dm=True, cdm=True)]


GRIDS = {"components": component_grid, "experts_heads": experts_heads_grid,
         "baselines": baseline_grid}


def _merge(base: dict, extra: dict) -> dict:
    out = {k: dict(v) for k, v in base.items()}
    for sec, vals in extra.items():
        out.setdefault(sec, {}).update(vals)
    return out


def _run_one(args):
    base_cfg, cell, seed, out_dir = args
    cfg = with_overrides(base_cfg, _merge(cell.overrides, {"optim": {"seed": seed}}))
    try:
        result = train(cfg)
    except Exception as exc:  # a failed cell is reported, the grid keeps going
        return cell.name, seed, None, f"{type(exc).__name__}: {exc}"
    record = result.record
    if out_dir is not None:
        atomic_write(os.path.join(out_dir, f"{cell.name}__seed{seed}.json"), record.to_json())
    return cell.name, seed, record.report, None


def summarise(cells, per_seed: dict) -> list[dict]:
    """per_seed: {cell name: [(seed, report dict or None, error or None), ...]}."""
    rows = []
    for cell in cells:
        runs = sorted(per_seed.get(cell.name, []), key=lambda r: r[0])
        ok = [rep for _, rep, err in runs if err is None]
        errors = [f"seed {s}: {err}" for s, _, err in runs if err is not None]
        row = {"cell": cell.name, "runs": len(ok),
               "status": "ok" if not errors else "failed: " + "; ".join(errors)}
        for m in METRICS:
            vals = np.array([rep[m] for rep in ok], dtype=float)
            row[f"{m}_mean"] = round(float(vals.mean()), 4) if vals.size else ""
            row[f"{m}_std"] = round(float(vals.std()), 4) if vals.size else ""
        rows.append(row)
    return rows


def table_csv(rows) -> str:
    buf = io.StringIO()
    cols = ["cell", "runs", "status"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def ablate(base_cfg: RunConfig, cells, repeats: int = 5, out_dir=None,
           workers: int | None = None) -> list[dict]:
    """Train every cell ``repeats`` times (seeds base seed .. base seed + repeats - 1)."""
    if workers is None:
        workers = max(1, int(os.environ.get("MOAECR_THREADS", "1")))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    jobs = [(base_cfg, cell, base_cfg.seed + r, out_dir) for cell in cells for r in range(repeats)]
    if workers == 1:
        results = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    per_seed: dict = {}
    for name, seed, rep, err in results:
        per_seed.setdefault(name, []).append((seed, rep, err))
    rows = summarise(cells, per_seed)
    if out_dir is not None:
        atomic_write(os.path.join(out_dir, "table.csv"), table_csv(rows))
    return rows


def rows_from_records(out_dir, cells) -> list[dict]:
    """Rebuild the summary table from the per-seed RunRecord files in ``out_dir``."""
    per_seed: dict = {}
    for cell in cells:
        prefix = f"{cell.name}__seed"
        for fname in sorted(os.listdir(out_dir)):
            if fname.startswith(prefix) and fname.endswith(".json"):
                with open(os.path.join(out_dir, fname)) as fh:
                    rec = json.load(fh)
                seed = int(fname[len(prefix):-5])
                per_seed.setdefault(cell.name, []).append((seed, rec["report"], None))
    return summarise(cells, per_seed)
