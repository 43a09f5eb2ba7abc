"""Command-line harness: data generation, the three-stage training recipe,
inference, evaluation tables, interventions, ablations, and the gradient
oracle. One subcommand per stage; config file plus --set overrides; every
error path exits nonzero."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .backbone import RoleSchedule
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, load_config, render_config_reference
from .data import generate_tasks, read_task_file, write_task_file
from .engine import Tensor, no_grad
from .evalrun import (
    ABLATION_VARIANTS,
    evaluate,
    held_out_tasks,
    intervention_report,
    retarget_tasks,
    sample_scene,
    variant_model_config,
)
from .flowgen import fm_loss
from .grpo import (
    collect_group,
    flow_loss,
    latent_loss,
    make_reward_fn,
    score_group,
    train_rl,
    velocity_reg,
)
from .model import ModelConfig, init_model_params
from .numerics import finite_diff_check
from .params import Adam, Parameters
from .policy import teacher_length_rollout
from .priors import PriorConfig, build_targets
from .scene import CATEGORIES, SceneConfig, encode_scene
from .sft import SftConfig, anchor_loss, halting_loss, sft_objective, train_sft, variational_loss
from .backbone import StreamConfig
from .flowgen import FlowConfig


def _bounds(mc: ModelConfig) -> dict:
    return {r: mc.schedule.bounds[r] for r in mc.schedule.active}


def _load_params(path: str, mc: ModelConfig, chash: str | None = None) -> tuple[Parameters, dict]:
    params = init_model_params(mc)
    header = load_checkpoint(path, params, expect_config_hash=chash)
    return params, header


def _format_table(rows: list[tuple[str, dict]], columns: list[str]) -> str:
    header = ["variant"] + columns
    widths = [max(len(h), 14) for h in header]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for name, vals in rows:
        cells = [name] + [f"{vals.get(c, float('nan')):.4f}" if c in vals else "-" for c in columns]
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines)


# -- subcommands --------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> int:
    mc = cfg.model_config()
    tasks = generate_tasks(cfg.data.n_tasks, cfg.seeds.data, _bounds(mc), mc.scene)
    write_task_file(args.out, tasks, cfg.seeds.data, mc.scene)
    print(f"wrote {len(tasks)} tasks to {args.out}")
    return 0


def cmd_train_sft(cfg: RunConfig, args) -> int:
    mc = cfg.model_config()
    scfg = cfg.sft_config()
    chash = config_hash(cfg)
    _, tasks = read_task_file(args.tasks)
    os.makedirs(args.out_dir, exist_ok=True)
    params = init_model_params(mc)

    warm_step = int(round(cfg.sft.phase1_steps * cfg.sft.warm_start_frac))

    def run_phase(phase: str, n_steps: int, start_step: int, optimizer: Adam | None):
        phase_cfg = scfg.for_phase(phase)
        metrics_path = os.path.join(args.out_dir, f"{phase}_metrics.jsonl")
        mode = "a" if start_step > 0 else "w"
        marks = {warm_step} if phase == "correction_warmup" else set()

        def checkpoint_cb(step: int, opt: Adam):
            if step in marks or step == n_steps or (
                cfg.sft.checkpoint_every and step % cfg.sft.checkpoint_every == 0
            ):
                path = os.path.join(args.out_dir, f"{phase}_step{step:06d}.ckpt")
                save_checkpoint(path, params, step, phase, chash, opt)

        with open(metrics_path, mode) as metrics_out:
            opt = train_sft(
                tasks, params, mc, phase_cfg, n_steps, seed=cfg.seeds.rollout,
                start_step=start_step, optimizer=optimizer,
                metrics_out=metrics_out, checkpoint_cb=checkpoint_cb,
            )
        final = os.path.join(args.out_dir, f"{phase}_final.ckpt")
        save_checkpoint(final, params, n_steps, phase, chash, opt)
        return final

    start_phase = "correction_warmup"
    start_step = 0
    optimizer: Adam | None = None
    if args.resume:
        optimizer = Adam(params, lr=scfg.lr)
        header = load_checkpoint(args.resume, params, optimizer, expect_config_hash=chash)
        start_phase = header["phase"]
        start_step = header["step"]
        print(f"resuming {start_phase} at step {start_step}")

    if start_phase == "correction_warmup":
        run_phase("correction_warmup", cfg.sft.phase1_steps, start_step, optimizer)
        # the generation phase warm-starts from the configured fraction of phase 1
        warm = os.path.join(args.out_dir, f"correction_warmup_step{warm_step:06d}.ckpt")
        load_checkpoint(warm, params, expect_config_hash=chash)
        start_step, optimizer = 0, None
    final = run_phase("full_generation", cfg.sft.phase2_steps, start_step, optimizer)
    print(f"supervised checkpoint: {final}")
    return 0


def cmd_train_rl(cfg: RunConfig, args) -> int:
    mc = cfg.model_config()
    rcfg = cfg.rl_config()
    chash = config_hash(cfg)
    _, tasks = read_task_file(args.tasks)
    os.makedirs(args.out_dir, exist_ok=True)
    params = init_model_params(mc)
    optimizer = Adam(params, lr=rcfg.lr, exclude_prefixes=("halt.",))
    start_update = 0
    if args.resume:
        header = load_checkpoint(args.resume, params, optimizer, expect_config_hash=chash)
        start_update = header["step"]
        print(f"resuming rl at update {start_update}")
    else:
        load_checkpoint(args.init, params, expect_config_hash=chash)

    eval_tasks = held_out_tasks(mc, max(rcfg.eval_n // len(CATEGORIES), 1), cfg.seeds.data)

    def eval_fn(p, ts):
        return evaluate(p, mc, ts, seed=cfg.seeds.rollout)["overall"]

    def checkpoint_cb(update: int, opt: Adam):
        if update == rcfg.updates or (cfg.rl.checkpoint_every and update % cfg.rl.checkpoint_every == 0):
            path = os.path.join(args.out_dir, f"rl_step{update:06d}.ckpt")
            save_checkpoint(path, params, update, "rl", chash, opt)

    metrics_path = os.path.join(args.out_dir, "rl_metrics.jsonl")
    with open(metrics_path, "a" if start_update else "w") as metrics_out:
        train_rl(
            tasks, params, mc, rcfg, seed=cfg.seeds.rollout,
            eval_tasks=eval_tasks, metrics_out=metrics_out, eval_fn=eval_fn,
            checkpoint_cb=checkpoint_cb, start_update=start_update, optimizer=optimizer,
        )
    final = os.path.join(args.out_dir, "rl_final.ckpt")
    save_checkpoint(final, params, rcfg.updates, "rl", chash, optimizer)
    print(f"rl checkpoint: {final}")
    return 0


def cmd_sample(cfg: RunConfig, args) -> int:
    mc = cfg.model_config()
    params, _ = _load_params(args.checkpoint, mc, config_hash(cfg))
    categories = args.categories.split(",") if args.categories else list(CATEGORIES)
    for c in categories:
        if c not in CATEGORIES:
            raise ValueError(f"unknown category {c!r}")
    tasks = [t for t in held_out_tasks(mc, args.n, cfg.seeds.data) if t.spec.category in categories]
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for i, task in enumerate(tasks):
            s = sample_scene(params, mc, task, seed=cfg.seeds.rollout * 9973 + i, mode=args.mode)
            rec = {
                "category": task.spec.category,
                "token_ids": task.token_ids,
                "T": s.T,
                "role_lengths": s.role_lengths,
                "reward": s.reward,
                "scene": {
                    "presence": s.scene.presence.tolist(),
                    "colors": s.scene.colors.tolist(),
                    "positions": s.scene.positions.tolist(),
                },
            }
            out.write(json.dumps(rec) + "\n")
    finally:
        if args.out:
            out.close()
    print(f"sampled {len(tasks)} prompts", file=sys.stderr)
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    if args.n_per_category < 1:
        raise ValueError("n_per_category must be at least 1")
    mc = cfg.model_config()
    params, _ = _load_params(args.checkpoint, mc, config_hash(cfg))
    tasks = held_out_tasks(mc, args.n_per_category, cfg.seeds.data)
    table = evaluate(params, mc, tasks, seed=cfg.seeds.rollout)
    print(_format_table([("checkpoint", table)], list(CATEGORIES) + ["overall"]))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(table, f, indent=2, sort_keys=True)
    if args.chart:
        _write_chart(table, args.chart)
    return 0


def _write_chart(table: dict, path: str) -> None:
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    cats = list(CATEGORIES) + ["overall"]
    fig, ax = plt.subplots(figsize=(8, 3.2))
    ax.bar(range(len(cats)), [table[c] for c in cats], color="#4878a8")
    ax.set_xticks(range(len(cats)), cats, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("mean reward")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_intervene(cfg: RunConfig, args) -> int:
    mc = cfg.model_config()
    params, _ = _load_params(args.checkpoint, mc, config_hash(cfg))
    n_per = max(args.n_prompts // len(CATEGORIES), 1)
    tasks = held_out_tasks(mc, n_per, cfg.seeds.data)
    report = intervention_report(params, mc, tasks, seed=cfg.seeds.rollout)
    rows = [(mode, {"mean_reward": v}) for mode, v in report["mean_reward"].items()]
    print(_format_table(rows, ["mean_reward"]))
    print("\ndeltas vs intact (intact - mode):")
    for mode, d in report["delta_vs_intact"].items():
        print(f"  {mode:14s} {d:+.4f}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    mc = cfg.model_config()
    chash = config_hash(cfg)
    variants = args.variants.split(",") if args.variants else list(ABLATION_VARIANTS)
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise ValueError(f"unknown ablation variant {v!r}")
    _, tasks = read_task_file(args.tasks)
    os.makedirs(args.out_dir, exist_ok=True)

    full_params, _ = _load_params(args.checkpoint, mc, chash)
    eval_tasks = held_out_tasks(mc, args.n_per_category, cfg.seeds.data)
    full_table = evaluate(full_params, mc, eval_tasks, seed=cfg.seeds.rollout)
    rows = [("full", full_table)]
    report = {"full": full_table}
    for variant in variants:
        vmc = variant_model_config(mc, variant)
        ckpt = os.path.join(args.out_dir, f"ablate_{variant}.ckpt")
        vparams = init_model_params(vmc)
        if os.path.exists(ckpt) and not args.retrain:
            load_checkpoint(ckpt, vparams)
        else:
            vtasks = retarget_tasks(tasks, vmc)
            scfg = cfg.sft_config()
            train_sft(vtasks, vparams, vmc, scfg.for_phase("correction_warmup"),
                      cfg.eval.ablate_phase1_steps, seed=cfg.seeds.rollout)
            train_sft(vtasks, vparams, vmc, scfg.for_phase("full_generation"),
                      cfg.eval.ablate_phase2_steps, seed=cfg.seeds.rollout)
            save_checkpoint(ckpt, vparams, cfg.eval.ablate_phase2_steps, f"ablate_{variant}", chash)
        table = evaluate(vparams, vmc, eval_tasks, seed=cfg.seeds.rollout)
        table["drop_vs_full"] = full_table["overall"] - table["overall"]
        rows.append((variant, table))
        report[variant] = table
    print(_format_table(rows, list(CATEGORIES) + ["overall", "drop_vs_full"]))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
    return 0


GRADCHECK_LOSSES = ("l_var", "l_anc", "l_halt", "l_img", "l_z", "l_flow", "r_vel")


def gradcheck_model_config() -> ModelConfig:
    """Compact double-precision instance for the finite-difference oracle."""
    scene = SceneConfig(k_slots=4, n_colors=6, d_v=8)
    return ModelConfig(
        scene=scene,
        stream=StreamConfig(d_model=16, n_layers=2, n_heads=2, vocab_size=31, max_positions=48),
        schedule=RoleSchedule(
            bounds={"plan": (1, 2), "draft": (1, 1), "diagnosis": (1, 2), "refine": (1, 2)}
        ),
        prior=PriorConfig(d_prior=16, sigma_q=0.1),
        flow=FlowConfig(
            d_x=scene.flat_dim, n_tokens=4, d_cond=16, d_model=16,
            n_blocks=1, n_heads=2, n_time=8, M=6, n_sde=2,
        ),
    )


def run_gradcheck(tol: float = 1e-4, seed: int = 0, n_coords: int = 2) -> dict:
    """Finite-difference audit of all seven training losses on small instances."""
    from .grpo import RLConfig

    mc = gradcheck_model_config()
    params = init_model_params(mc)
    rng = np.random.default_rng([seed, 0x6C])
    # nudge away from init so ratios, KLs, and residuals are non-degenerate
    for name, t in params.items():
        if t.requires_grad:
            t.data += 0.01 * rng.standard_normal(t.data.shape)

    task = generate_tasks(1, seed, _bounds(mc), mc.scene)[0]
    lengths = {r: task.lengths[r] for r in mc.schedule.active}
    _, draft_tokens = encode_scene(task.draft, mc.scene)
    x_data, _ = encode_scene(task.reference, mc.scene)

    def rollout_and_targets():
        result = teacher_length_rollout(
            params, mc.stream, mc.schedule, task.token_ids, lengths, seed=seed
        )
        targets = build_targets(
            params, task.records, draft_tokens, task.draft.presence, lengths, mc.schedule, mc.prior
        )
        return result, targets

    ref_params = init_model_params(mc)
    groups = []
    g = collect_group(params, task, mc, G=2, seed=seed + 1)
    score_group(g, make_reward_fn("constraints", mc), mc)
    # force distinct advantages even if decoded rewards tie
    if g.members[0].advantage == g.members[1].advantage == 0.0:
        g.members[0].advantage, g.members[1].advantage = -1.0, 1.0
    groups.append(g)
    rl = RLConfig(G=2, updates=1, beta_z=0.01)

    # the anchor loss detaches its targets, so the prior construction has no
    # gradient by definition; its check runs over the differentiable path only
    non_prior = {n: t for n, t in params.items() if not n.startswith("prior.")}
    losses = {
        "l_var": (lambda: variational_loss(*rollout_and_targets()), params),
        "l_anc": (lambda: anchor_loss(*rollout_and_targets()), non_prior),
        "l_halt": (lambda: halting_loss(rollout_and_targets()[0], lengths, mc.schedule), params),
        "l_img": (
            lambda: fm_loss(params, mc.flow, x_data, rollout_and_targets()[0].H, n_t=1, seed=seed),
            params,
        ),
        "l_z": (lambda: latent_loss(groups, params, ref_params, mc, rl)[0], params),
        "l_flow": (lambda: flow_loss(groups, params, mc, rl)[0], params),
        "r_vel": (lambda: velocity_reg(groups, params, ref_params, mc), params),
    }
    report = {}
    for name, (fn, probe) in losses.items():
        r = finite_diff_check(fn, probe, tol=tol, seed=seed, n_coords=n_coords)
        report[name] = {
            "max_rel_err": r.max_rel_err,
            "passed": r.passed,
            "worst": None if r.worst is None else f"{r.worst.name}{list(r.worst.index)}",
        }
    return report


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    report = run_gradcheck(tol=args.tol, seed=cfg.seeds.rollout)
    failed = False
    for name in GRADCHECK_LOSSES:
        r = report[name]
        status = "PASS" if r["passed"] else "FAIL"
        print(f"{status}  {name:8s} max_rel_err={r['max_rel_err']:.3e}  worst={r['worst']}")
        failed = failed or not r["passed"]
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
    return 1 if failed else 0


def cmd_config_reference(cfg: RunConfig, args) -> int:
    text = render_config_reference()
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        print(text)
    return 0


# -- argument parsing ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentflow", description=__doc__)
    p.add_argument("--config", default=None, help="YAML config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a task file")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train-sft", help="run the two supervised phases")
    t.add_argument("--tasks", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to resume from")

    r = sub.add_parser("train-rl", help="run group-relative RL from a supervised checkpoint")
    r.add_argument("--tasks", required=True)
    r.add_argument("--init", default=None, help="supervised checkpoint to start from")
    r.add_argument("--out-dir", required=True)
    r.add_argument("--resume", default=None)

    s = sub.add_parser("sample", help="teacher-free inference on held-out prompts")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--categories", default=None, help="comma-separated subset")
    s.add_argument("--n", type=int, default=4, help="prompts per category")
    s.add_argument("--mode", choices=["mean", "stochastic"], default="mean")
    s.add_argument("--out", default=None)

    e = sub.add_parser("eval", help="benchmark table over held-out prompts")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--n-per-category", type=int, default=50)
    e.add_argument("--out", default=None)
    e.add_argument("--chart", default=None, help="write an SVG bar chart here")

    i = sub.add_parser("intervene", help="latent intervention report")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--n-prompts", type=int, default=60)
    i.add_argument("--out", default=None)

    a = sub.add_parser("ablate", help="role-removal and fixed-budget variants")
    a.add_argument("--tasks", required=True)
    a.add_argument("--checkpoint", required=True, help="full-model checkpoint to compare against")
    a.add_argument("--out-dir", required=True)
    a.add_argument("--variants", default=None, help="comma-separated subset")
    a.add_argument("--n-per-category", type=int, default=20)
    a.add_argument("--retrain", action="store_true")
    a.add_argument("--out", default=None)

    c = sub.add_parser("gradcheck", help="finite-difference audit of all losses")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--out", default=None)

    d = sub.add_parser("config-reference", help="print the config schema reference")
    d.add_argument("--out", default=None)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-sft": cmd_train_sft,
    "train-rl": cmd_train_rl,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "intervene": cmd_intervene,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "config-reference": cmd_config_reference,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.command == "train-rl" and not args.resume and not args.init:
            raise ValueError("train-rl needs --init or --resume")
        return COMMANDS[args.command](cfg, args)
    except Exception as exc:  # CLI boundary: every failure is a nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
