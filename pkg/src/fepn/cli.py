"""Command-line front end.

    fepn gen-data   [--config FILE] [--seed N] [--out DIR]
    fepn train      [--config FILE] [--seed N] [--out DIR] [--resume CKPT]
    fepn eval       [--config FILE] [--seed N] [--out DIR] [--checkpoint CKPT | --untrained]
    fepn score-grid [--config FILE] [--seed N] [--out DIR] [--checkpoint CKPT | --untrained]
    fepn grad-check [--config FILE] [--seed N] [--out DIR] [--size N] [--perturb S]

The config file is one JSON object of RunConfig fields; flags override it.
Exit status: 0 success, 2 bad config or input, 3 numerical failure.
FEPN_THREADS caps BLAS threads (0 or unset: library default).
"""

import argparse
import contextlib
import json
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import FrozenBackbone, make_scene
from .errors import DegenerateInputError, FEPNError, ShapeError, TrainingError
from .gradcheck import grad_check
from .losses import TERMS
from .metrics import write_metrics_csv
from .pipeline import RunConfig, eval_scenes, evaluate, score_maps, train, write_history_csv
from .train import init_models

__all__ = ["main", "load_config"]

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
CHECKPOINT = "checkpoint.fepn"
FLOWS_ONLY = "flows_fit.fepn"
GRAD_TOL = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INPUT)


def load_config(path=None, **overrides):
    """RunConfig from an optional JSON file plus non-None overrides."""
    data = {}
    if path:
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise FEPNError("config file must hold a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    if "formats" in data:
        data["formats"] = tuple(data["formats"])
    return RunConfig.from_dict(data)


def _thread_limit():
    raw = os.environ.get("FEPN_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise FEPNError(f"FEPN_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise FEPNError("FEPN_THREADS must be >= 0")
    if n == 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _out_dir(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg.out_dir


def _model(cfg, args):
    if getattr(args, "untrained", False):
        return init_models(cfg.train_config())[:2]
    path = args.checkpoint or os.path.join(cfg.out_dir, CHECKPOINT)
    flows, head, _ = load_checkpoint(path)
    if flows.dim != cfg.dim:
        raise ShapeError(f"checkpoint dim {flows.dim} differs from config dim {cfg.dim}")
    return flows, head


def cmd_gen_data(cfg, args):
    out = _out_dir(cfg)
    bb = FrozenBackbone.from_seed(cfg.backbone_seed, cfg.dim)
    grid = make_scene(cfg.height, cfg.width, cfg.outlier_fraction, cfg.seed, bb)
    path = os.path.join(out, "scene.csv")
    grid.to_csv(path)
    print(f"wrote {path} ({grid.height}x{grid.width}, D={grid.dim})")


def cmd_train(cfg, args):
    out = _out_dir(cfg)
    flows = head = None
    if args.resume:
        flows, head, _ = load_checkpoint(args.resume)
    res = train(cfg, flows, head)
    save_checkpoint(os.path.join(out, CHECKPOINT), res.flows, res.head, cfg.backbone_seed)
    save_checkpoint(os.path.join(out, FLOWS_ONLY), res.flows_fit, res.head, cfg.backbone_seed)
    write_history_csv(res.history, os.path.join(out, "losses.csv"))
    last = res.history[-1] if res.history else {}
    print(f"trained {len(res.history)} steps; final total {last.get('total', float('nan')):.6g}")


def cmd_eval(cfg, args):
    flows, head = _model(cfg, args)
    reports = evaluate(flows, head, eval_scenes(cfg), cfg.beta_mode)
    path = os.path.join(_out_dir(cfg), "metrics.csv")
    write_metrics_csv(reports, path)
    for r in reports:
        print(f"{r.method:13s} fpr95 {r.fpr95:.4f}  auroc {r.auroc:.4f}  auprc {r.auprc:.4f}")


def cmd_score_grid(cfg, args):
    flows, head = _model(cfg, args)
    maps, _ = score_maps(flows, head, eval_scenes(cfg)[0], cfg.beta_mode)
    out = os.path.join(_out_dir(cfg), "maps")
    os.makedirs(out, exist_ok=True)
    for name, sf in maps.items():
        if "csv" in cfg.formats:
            sf.to_csv(os.path.join(out, f"{name}.csv"))
        if "pgm" in cfg.formats:
            sf.to_pgm(os.path.join(out, f"{name}.pgm"))
    print(f"wrote {len(maps)} maps to {out}")


def cmd_grad_check(cfg, args):
    tc = cfg.train_config()
    flows, head = init_models(tc)
    if args.perturb:
        flows = flows.with_params(_perturbed(flows.params(), args.perturb, cfg.seed + 1))
        head = head.with_params(_perturbed(head.params(), args.perturb, cfg.seed + 2))
    bb = FrozenBackbone.from_seed(cfg.backbone_seed, cfg.dim)
    grid = make_scene(args.size, args.size, cfg.outlier_fraction, cfg.seed, bb)
    errs = grad_check(flows, head, grid, tc.loss_config())
    path = os.path.join(_out_dir(cfg), "grad_check.csv")
    with open(path, "w") as fh:
        fh.write("term,max_rel_error\n")
        for t in TERMS:
            fh.write(f"{t},{errs[t]:.6e}\n")
    for t in TERMS:
        flag = "ok" if errs[t] <= GRAD_TOL else "FAIL"
        print(f"{t:6s} {errs[t]:.3e} {flag}")
    if max(errs.values()) > GRAD_TOL:
        raise TrainingError(f"gradient check above {GRAD_TOL}")


def _perturbed(params, scale, seed):
    rng = np.random.default_rng(seed)
    return {k: v + rng.normal(0.0, scale, size=v.shape) for k, v in params.items()}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "score-grid": cmd_score_grid,
    "grad-check": cmd_grad_check,
}


def _parser():
    p = _Parser(prog="fepn", description="Free-energy posterior network toy pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON file of RunConfig fields")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        if name == "train":
            sp.add_argument("--resume", help="start from this checkpoint")
        if name in ("eval", "score-grid"):
            g = sp.add_mutually_exclusive_group()
            g.add_argument("--checkpoint", help=f"default: <out>/{CHECKPOINT}")
            g.add_argument("--untrained", action="store_true", help="score the initial model")
        if name == "grad-check":
            sp.add_argument("--size", type=int, default=8, help="scene height and width")
            sp.add_argument("--perturb", type=float, default=0.0, help="noise std on all parameters")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
        with _thread_limit():
            COMMANDS[args.command](cfg, args)
    except TrainingError as exc:
        where = f" (step {exc.step}, term {exc.term})" if exc.step is not None else ""
        print(f"fepn: numerical failure: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FEPNError, OSError, ValueError, TypeError) as exc:
        if isinstance(exc, DegenerateInputError):
            msg = f"degenerate input: {exc}"
        else:
            msg = str(exc)
        print(f"fepn: error: {msg}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
