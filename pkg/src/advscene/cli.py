"""Operator surface: scene-suite generation, batch evaluation sweeps over
the adversarial intensity, and curriculum runs. Every run directory is
self-describing: the resolved config snapshot plus the seed reproduce all
outputs bit-exactly.

Each flag can also be set through an ADVSCENE_<NAME> environment variable
(dashes as underscores), e.g. ADVSCENE_WORKERS=4.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .control import GuidanceConfig
from .curriculum import CurriculumConfig, run_curriculum
from .metrics import evaluate_batch, report_to_row, write_report_csv
from .pipeline import PipelineConfig, prepare_scene, run_cell
from .scenarios import TEMPLATES, generate_scenes, stable_seed
from .simloop import EgoPolicyParams
from .world import load_scene, save_scene

__all__ = ["main", "cmd_gen_scenes", "cmd_sweep", "cmd_curriculum"]


def _env_default(name: str, default):
    raw = os.environ.get("ADVSCENE_" + name.upper().replace("-", "_"))
    if raw is None:
        return default
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _add(parser, flag, default, **kw):
    name = flag.lstrip("-")
    if kw.get("action") != "store_true":
        kw.setdefault("type", default.__class__)
    parser.add_argument(flag, default=_env_default(name, default), **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advscene",
                                     description="Adversarial traffic scenario synthesis and curriculum")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-scenes", help="generate a synthetic scene suite")
    _add(gen, "--template", "straight-2lane", choices=TEMPLATES)
    _add(gen, "--count", 10)
    _add(gen, "--seed", 0)
    _add(gen, "--horizon", 40)
    _add(gen, "--dt", 0.1)
    _add(gen, "--out", "scenes")

    sweep = sub.add_parser("sweep", help="full pipeline per (scene, eta, seed) cell")
    _add(sweep, "--scenes", "scenes")
    _add(sweep, "--eta", "0,1,2,3")
    _add(sweep, "--seeds", 5)
    _add(sweep, "--policy", "idm", choices=("idm", "lane_graph"))
    _add(sweep, "--k-top", 4)
    _add(sweep, "--alpha", 0.5)
    _add(sweep, "--anchor-frac", 0.3)
    _add(sweep, "--no-anchoring", False, action="store_true")
    _add(sweep, "--support-mode", "topo_feas", choices=("topo_feas", "topo_only", "random_k"))
    _add(sweep, "--workers", 1)
    _add(sweep, "--seed", 0)
    _add(sweep, "--out", "sweep_out")

    cur = sub.add_parser("curriculum", help="adversarial curriculum over policy rounds")
    _add(cur, "--scenes", "scenes")
    _add(cur, "--rounds", 3)
    _add(cur, "--eta", "0.5,1.0,2.0")
    _add(cur, "--seeds", 2)
    _add(cur, "--policy", "idm", choices=("idm", "lane_graph"))
    _add(cur, "--k-top", 4)
    _add(cur, "--alpha", 0.5)
    _add(cur, "--anchor-frac", 0.3)
    _add(cur, "--heldout-frac", 0.3)
    _add(cur, "--workers", 1)
    _add(cur, "--seed", 0)
    _add(cur, "--out", "curriculum_out")
    return parser


def _write_config(out_dir: Path, args: argparse.Namespace) -> None:
    doc = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    with open(out_dir / "config.json", "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def cmd_gen_scenes(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, args)
    scenes = generate_scenes(args.template, args.count, args.seed,
                             horizon_steps=args.horizon, dt_phys=args.dt)
    for scene in scenes:
        save_scene(scene, out / f"{scene.scene_id}.json")
    print(f"wrote {len(scenes)}/{args.count} scenes to {out}")
    return 0 if scenes else 1


def _load_scene_dir(path: str):
    files = sorted(Path(path).glob("*.json"))
    scenes = [load_scene(f) for f in files if f.name != "config.json"]
    if not scenes:
        raise SystemExit(f"no scene JSONs under {path}")
    return scenes


def _pipeline_from_args(args) -> PipelineConfig:
    guidance = GuidanceConfig(anchor_alpha=args.alpha, anchor_frac=args.anchor_frac,
                              anchoring=not getattr(args, "no_anchoring", False))
    return PipelineConfig(guidance=guidance, k_top=args.k_top,
                          support_mode=getattr(args, "support_mode", "topo_feas"))


def _sweep_one_scene(task):
    """Worker task: all (eta, seed) cells of one scene, with its own caches."""
    scene_doc, policy, cfg, etas, seeds, base_seed = task
    from .world import scene_from_json

    scene = scene_from_json(scene_doc)
    bundle = prepare_scene(scene, policy, cfg, base_seed=base_seed)
    rows, batches = [], {}
    if bundle.skeleton is None:
        return scene.scene_id, rows, None, [], bundle.skip_reason
    refs = bundle.reference_rollouts[:8]
    for eta in etas:
        for seed in range(seeds):
            cell = run_cell(bundle, policy, eta=eta, seed=seed, cfg=cfg)
            r = cell.rollout
            rows.append({
                "scene_id": scene.scene_id, "eta": eta, "seed": seed,
                "collided": int(r.collided), "impact": r.impact_class or "",
                "terminated_at": r.terminated_at, "valid": int(r.valid),
                "kl": repr(cell.synthesis.ledger.total),
                "events": len(r.events),
            })
            batches.setdefault(eta, []).append(r)
    return scene.scene_id, rows, batches, refs, None


def cmd_sweep(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, args)
    scenes = _load_scene_dir(args.scenes)
    etas = [float(v) for v in str(args.eta).split(",") if v != ""]
    policy = EgoPolicyParams(variant=args.policy)
    cfg = _pipeline_from_args(args)

    from .world import scene_to_json

    tasks = [(scene_to_json(s), policy, cfg, etas, args.seeds,
              stable_seed("sweep", args.seed, s.scene_id)) for s in scenes]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_sweep_one_scene, tasks))
    else:
        results = [_sweep_one_scene(t) for t in tasks]

    results.sort(key=lambda r: r[0])
    cell_rows, agg_rows = [], []
    batches, references = {}, []
    skipped, invalid = 0, 0
    for scene_id, rows, scene_batches, refs, skip in results:
        if skip is not None:
            skipped += 1
            continue
        cell_rows.extend(rows)
        invalid += sum(1 for row in rows if not row["valid"])
        references.extend(refs)
        for eta, batch in scene_batches.items():
            batches.setdefault(eta, []).extend(batch)
    for eta in etas:
        if eta not in batches:
            continue
        rep = evaluate_batch(batches[eta], references)
        rep.kl_mean = float(np.mean([float(row["kl"]) for row in cell_rows
                                     if row["eta"] == eta]))
        rep.skipped_scenes = skipped
        agg_rows.append(report_to_row(rep, eta=eta, policy=args.policy))

    with open(out / "cells.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(cell_rows[0].keys()))
        writer.writeheader()
        writer.writerows(cell_rows)
    write_report_csv(agg_rows, out / "aggregate.csv")
    print(f"sweep: {len(cell_rows)} cells over {len(scenes) - skipped} scenes "
          f"({skipped} skipped) -> {out}")
    return 1 if invalid else 0


def cmd_curriculum(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, args)
    scenes = _load_scene_dir(args.scenes)
    etas = tuple(float(v) for v in str(args.eta).split(",") if v != "")
    n_hold = max(1, int(round(args.heldout_frac * len(scenes)))) if len(scenes) > 1 else 0
    heldout = scenes[:n_hold]
    tuning = scenes[n_hold:]
    policy0 = EgoPolicyParams(variant=args.policy)
    cfg = CurriculumConfig(rounds=args.rounds, eta_schedule=etas,
                           seeds_per_scene=args.seeds, base_seed=args.seed,
                           pipeline=_pipeline_from_args(args))
    result = run_curriculum(cfg, tuning, heldout, policy0)

    rows = []
    for r, rep in enumerate(result.round_reports):
        rows.append(report_to_row(rep, round=r, eta=cfg.eta_schedule[r]))
    write_report_csv(rows, out / "rounds.csv")
    gain_rows = [{k: repr(v) if isinstance(v, float) else v for k, v in row.items()}
                 for row in result.gain_rows()]
    if gain_rows:
        write_report_csv(gain_rows, out / "gain_table.csv")
    with open(out / "final_policy.json", "w") as fh:
        json.dump(asdict(result.final_policy), fh, indent=1, sort_keys=True)
    with open(out / "buffer_index.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "scene_id", "eta", "seed", "collided", "kl"])
        for e in result.buffer.entries:
            writer.writerow([e.round_index, e.scene.scene_id, e.eta, e.seed,
                             int(e.rollout.collided), repr(e.kl_total)])
    invalid = sum(1 for e in result.buffer.entries if not e.rollout.valid)
    print(f"curriculum: {cfg.rounds} rounds, {len(result.buffer)} buffered episodes, "
          f"final policy -> {out}")
    return 1 if invalid else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "gen-scenes":
        return cmd_gen_scenes(args)
    if args.command == "sweep":
        return cmd_sweep(args)
    return cmd_curriculum(args)


if __name__ == "__main__":
    sys.exit(main())
