"""Command-line entry point: ``unmaskrl {train,eval,sweep,verify,oracle}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .config import RunConfig, load_config, write_resolved
from .diffenv import ExactDenoiser, TinyMDM
from .errors import ConfigError, UnmaskError
from .evalharness import (
    brute_force_best,
    heuristic_methods,
    pareto_sweep,
    policy_methods,
    verify_suite,
    write_csv,
)
from .grpo import train
from .heuristics import default_k_grid
from .seeding import stream

log = logging.getLogger("unmaskrl")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG = 0, 1, 2


def make_denoiser(cfg: RunConfig, env, out_dir):
    """Exact posterior, or a tiny MDM (loaded, or trained from the ``mdm`` stream and saved)."""
    if cfg.env.denoiser == "exact":
        return ExactDenoiser(env)
    if cfg.env.mdm_checkpoint:
        return TinyMDM.load(cfg.env.mdm_checkpoint)
    m = vars(cfg.mdm).copy()
    model = TinyMDM(**m, random_state=int(stream(cfg.seed, "mdm").integers(2**31))).fit(env)
    path = os.path.join(out_dir, "mdm.uprl")
    model.save(path)
    # reload so training and later evaluation see the same float32 weights
    return TinyMDM.load(path)


def _sweep_methods(cfg: RunConfig, env, with_policies):
    ec = cfg.eval
    grid = lambda g: list(g) or default_k_grid(env.L)  # noqa: E731
    methods = heuristic_methods(
        grid(ec.random_k_grid) if "random_k" in ec.methods else [],
        grid(ec.top_k_grid) if "top_k" in ec.methods else [],
        list(ec.threshold_grid) if "threshold" in ec.methods else [],
    )
    if with_policies:
        methods += policy_methods(list(ec.checkpoints), list(ec.tau_pi), env.mask_id)
    return methods


def cmd_train(cfg, out_dir):
    env = cfg.build_env()
    res = train(env, make_denoiser(cfg, env, out_dir), cfg.policy, cfg.train, cfg.seed, out_dir=out_dir)
    last = res.metrics[-1]
    print(f"trained {len(res.metrics)} steps; final mean_correct={last['mean_correct']:.4f} "
          f"mean_steps={last['mean_steps']:.3f}; checkpoint {res.checkpoints[-1]}")
    return EXIT_OK


def cmd_eval(cfg, out_dir, heuristics):
    env = cfg.build_env()
    if not heuristics and not cfg.eval.checkpoints:
        raise ConfigError("eval.checkpoints must list at least one policy checkpoint")
    methods = _sweep_methods(cfg, env, True) if heuristics else policy_methods(
        list(cfg.eval.checkpoints), list(cfg.eval.tau_pi), env.mask_id
    )
    den = make_denoiser(cfg, env, out_dir)
    rows = pareto_sweep(env, den, methods, cfg.eval.n_eval, list(cfg.eval.seeds), cfg.env.block_len or None)
    path = os.path.join(out_dir, "pareto.csv")
    write_csv(rows, path)
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def cmd_verify(cfg, out_dir):
    rep = verify_suite(cfg.seed)
    path = os.path.join(out_dir, "report.txt")
    with open(path, "w") as fh:
        fh.write(rep.text())
    sys.stdout.write(rep.text())
    return EXIT_OK if rep.ok else EXIT_CHECK


def cmd_oracle(cfg, out_dir):
    env = cfg.build_env()
    if cfg.eval.prompt:
        prompt = np.array(cfg.eval.prompt, dtype=np.int64)
        if prompt.size != env.d:
            raise ConfigError(f"eval.prompt has {prompt.size} tokens, env.prompt_len is {env.d}")
    else:
        prompt, _ = env.sample_task(stream(cfg.seed, "oracle"))
    res = brute_force_best(env, prompt, cfg.eval.alpha, make_denoiser(cfg, env, out_dir), cfg.env.block_len or None)
    out = {
        "prompt": [int(x) for x in prompt],
        "alpha": cfg.eval.alpha,
        "best_reward": res.best_reward,
        "steps": res.steps,
        "correct": res.correct,
        "schedule": res.schedule,
    }
    text = json.dumps(out, sort_keys=True)
    with open(os.path.join(out_dir, "oracle.json"), "w") as fh:
        fh.write(text + "\n")
    print(text)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="unmaskrl", description="Learned unmasking policies for masked diffusion.")
    p.add_argument("verb", choices=["train", "eval", "sweep", "verify", "oracle"])
    p.add_argument("--config", help="run config file (section.key = value lines)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, default=None, help="global seed (overrides run.seed)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.seed)
        os.makedirs(args.out, exist_ok=True)
        write_resolved(cfg, args.out)
        with open(os.path.join(args.out, "seed"), "w") as fh:
            fh.write(f"{cfg.seed}\n")
        if args.verb == "train":
            return cmd_train(cfg, args.out)
        if args.verb in ("eval", "sweep"):
            return cmd_eval(cfg, args.out, heuristics=args.verb == "sweep")
        if args.verb == "verify":
            return cmd_verify(cfg, args.out)
        return cmd_oracle(cfg, args.out)
    except UnmaskError as exc:
        print(f"error: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
