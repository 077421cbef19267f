"""Command-line workbench: ``mcmma <command> [flags]``.

Every option can also come from ``--config FILE.json`` (keys are the long flag
names with dashes turned into underscores); flags given on the command line
override the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from importlib import resources

import numpy as np

from . import align, checks, io, metrics
from .decode import DecodePolicy, check_trace, decode_sequence, matrix_provider
from .plot import line_chart
from .toy import train as tt
from .toy.task import SyntheticTask, gen_synthetic

MODE_NAMES = {"mma": "mma", "mcmma": "mcmma_delta", "gamma": "mcmma_gamma"}
MODE_LABELS = {v: k for k, v in MODE_NAMES.items()}
FIXTURE = "two_head_probs.csv"

DEFAULTS = {
    "align": {"mode": "mcmma", "epsilon": 4, "input": None, "output": "align_out"},
    "decode": {
        "input": None,
        "checkpoint": None,
        "utterance": 0,
        "epsilon": 4,
        "threshold": 0.5,
        "forced_position": "rightmost",
        "end_of_input": "force_to_T",
        "reduction": metrics.DEFAULT_REDUCTION,
        "shift_ms": metrics.DEFAULT_SHIFT_MS,
        "output": "decode_out",
    },
    "oracle-check": {"seeds": 50, "samples": 100_000, "seed": 0},
    "gradcheck": {"seeds": 20, "skip_toy": False},
    "train": {
        "mode": "mcmma",
        "epsilon": tt.TrainConfig.epsilon_train,
        "headdrop": tt.TrainConfig.headdrop_prob,
        "seed": 0,
        "epochs": tt.TrainConfig.epochs,
        "lr": tt.TrainConfig.learning_rate,
        "batch_size": tt.TrainConfig.batch_size,
        "energy_noise": tt.TrainConfig.energy_noise_std,
        "n_train": tt.TrainConfig.n_train,
        "task_noise": SyntheticTask.noise_std,
        "task_seed": SyntheticTask.seed,
        "output": "train_out",
    },
    "eval": {
        "input": None,
        "eps_list": "1,2,4,8,32",
        "threshold": 0.5,
        "forced_position": "rightmost",
        "n_test": 128,
        "output": "eval_out",
    },
    "tradeoff": {
        "input": None,
        "eps_list": "1,2,4,8,32",
        "threshold": 0.5,
        "forced_position": "rightmost",
        "n_test": 128,
        "output": "tradeoff_out",
    },
}


class UsageError(Exception):
    pass


def _eps_list(text) -> list:
    if isinstance(text, (list, tuple)):
        vals = list(text)
    else:
        try:
            vals = [int(v) for v in str(text).split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"--eps-list must be comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 0:
        raise UsageError("--eps-list needs at least one non-negative integer")
    return [int(v) for v in vals]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcmma", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=None)
        p.add_argument("--config", help="JSON file of option values; flags override it")
        return p

    def policy_flags(p):
        p.add_argument("--threshold", type=float, help="selection threshold (default 0.5)")
        p.add_argument("--forced-position", choices=("rightmost", "argmax"))

    p = command("align", "expected alignments of a probability-matrix CSV")
    p.add_argument("--input", help=f"probability CSV (default: bundled {FIXTURE})")
    p.add_argument("--output", help="output directory")
    p.add_argument("--mode", choices=tuple(MODE_NAMES))
    p.add_argument("--epsilon", type=int)

    p = command("decode", "head-synchronous decode of a probability CSV or a toy checkpoint")
    p.add_argument("--input", help="probability CSV")
    p.add_argument("--checkpoint", help="toy checkpoint; decodes one test utterance")
    p.add_argument("--utterance", type=int, help="test utterance index for --checkpoint")
    p.add_argument("--output", help="output directory")
    p.add_argument("--epsilon", type=int)
    policy_flags(p)
    p.add_argument("--end-of-input", choices=("force_to_T", "emit_end"))
    p.add_argument("--reduction", type=int, help="frame subsampling factor for milliseconds")
    p.add_argument("--shift-ms", type=float, help="feature frame shift in milliseconds")

    p = command("oracle-check", "compare kernels with brute-force oracles")
    p.add_argument("--seeds", type=int)
    p.add_argument("--samples", type=int, help="Monte Carlo samples per configuration")
    p.add_argument("--seed", type=int)

    p = command("gradcheck", "compare adjoints with central finite differences")
    p.add_argument("--seeds", type=int)
    p.add_argument("--skip-toy", action="store_true", default=None, help="kernel checks only")

    p = command("train", "train the toy model")
    p.add_argument("--output", help="output directory")
    p.add_argument("--mode", choices=tuple(MODE_NAMES))
    p.add_argument("--epsilon", type=int, help="training waiting threshold")
    p.add_argument("--headdrop", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--energy-noise", type=float, help="std of Gaussian noise on selection energies")
    p.add_argument("--n-train", type=int)
    p.add_argument("--task-noise", type=float, help="std of the input frame noise")
    p.add_argument("--task-seed", type=int)

    for name, help_text in (
        ("eval", "trade-off table of one checkpoint"),
        ("tradeoff", "trade-off table and chart over several checkpoints"),
    ):
        p = command(name, help_text)
        p.add_argument("--input", nargs="+" if name == "tradeoff" else None, help="toy checkpoint file(s)")
        p.add_argument("--output", help="output directory")
        p.add_argument("--eps-list", help="comma-separated decode epsilons")
        policy_flags(p)
        p.add_argument("--n-test", type=int)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    opts = dict(DEFAULTS[args.command])
    if args.config:
        try:
            with open(args.config) as f:
                loaded = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"{args.config}: expected a JSON object")
        unknown = sorted(set(loaded) - set(opts))
        if unknown:
            raise UsageError(f"{args.config}: unknown keys for '{args.command}': {', '.join(unknown)}")
        opts.update(loaded)
    for key, value in vars(args).items():
        if key in opts and value is not None:
            opts[key] = value
    return opts


def _outdir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _write(path, text):
    with open(path, "w") as f:
        f.write(text)


def _fixture_path():
    return resources.files("mcmma").joinpath("data", FIXTURE)


def cmd_align(o) -> int:
    mode = o["mode"]
    if mode not in MODE_NAMES:
        raise UsageError(f"--mode must be one of {sorted(MODE_NAMES)}")
    if o["epsilon"] < 0:
        raise UsageError("--epsilon must be >= 0")
    src = o["input"] or _fixture_path()
    p = io.read_probabilities(src)
    out = _outdir(o["output"])
    alphas = align.expected_alignment(p)
    io.write_alignments(os.path.join(out, "alpha.csv"), alphas)
    results = {"alpha": alphas}
    if mode == "mcmma":
        results["delta"] = align.mutually_constrained(alphas, o["epsilon"])
    elif mode == "gamma":
        results["gamma"] = align.self_constrained(alphas, o["epsilon"])
    for name, arr in results.items():
        if name != "alpha":
            io.write_alignments(os.path.join(out, f"{name}.csv"), arr)
        dev = float(np.abs(arr.sum(-1) - 1.0).max())
        print(f"{name}: M={arr.shape[0]} L={arr.shape[1]} T={arr.shape[2] - 1} max|row_sum-1|={dev:.3e}")
    return 0


def _policy(o, epsilon) -> DecodePolicy:
    try:
        return DecodePolicy(
            epsilon=int(epsilon),
            threshold=float(o["threshold"]),
            forced_position=o["forced_position"],
            end_of_input=o.get("end_of_input", "force_to_T"),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_decode(o) -> int:
    if (o["input"] is None) == (o["checkpoint"] is None):
        raise UsageError("decode needs exactly one of --input or --checkpoint")
    policy = _policy(o, o["epsilon"])
    if o["input"] is not None:
        p = io.read_probabilities(o["input"])
        M, L, T = p.shape
        provider = matrix_provider(p)
        trace = decode_sequence(provider, policy, L, M, T)
        ref = decode_sequence(provider, replace(policy, epsilon=T), L, M, T)
    else:
        ckpt = tt.load_checkpoint(o["checkpoint"])
        test = gen_synthetic(ckpt.task, o["utterance"] + 1, tt.TEST_STREAM)
        x = test.inputs[o["utterance"]]
        trace = tt.decode_utterance(ckpt.params, ckpt.model, x, policy)
        ref = tt.decode_utterance(ckpt.params, ckpt.model, x, replace(policy, epsilon=ckpt.model.T))
    out = _outdir(o["output"])
    trace.write(os.path.join(out, "trace.jsonl"))
    if not trace.steps or not ref.steps:
        print(f"no steps decoded (termination: {trace.termination})")
        return 1
    report = metrics.relative_latency(trace.latest_boundaries(), ref.latest_boundaries(), o["reduction"], o["shift_ms"])
    _write(os.path.join(out, "latency.csv"), report.to_csv())
    spreads, worst = metrics.boundary_spread(trace)
    problems = check_trace(trace, policy.epsilon)
    print(f"steps={len(trace.steps)} termination={trace.termination} max_spread={worst}")
    if trace.steps[0].token is not None:
        print("tokens=" + " ".join(str(t) for t in trace.tokens))
    print(f"rel_frames={report.rel_frames!r} rel_ms={report.rel_ms!r}")
    for msg in problems:
        print("violation: " + msg)
    return 1 if problems else 0


def _report(results, header) -> int:
    sys.stdout.write(checks.format_table(results, header))
    failed = [r.name for r in results if not r.passed]
    print("FAILED: " + ", ".join(failed) if failed else "all checks passed")
    return 1 if failed else 0


def cmd_oracle_check(o) -> int:
    if o["seeds"] < 1 or o["samples"] < 1:
        raise UsageError("--seeds and --samples must be >= 1")
    return _report(checks.oracle_suite(o["seeds"], o["samples"], o["seed"]), "max_dev")


def cmd_gradcheck(o) -> int:
    if o["seeds"] < 1:
        raise UsageError("--seeds must be >= 1")
    results = checks.kernel_gradients(o["seeds"])
    if not o["skip_toy"]:
        results += checks.toy_gradients(o["seeds"])
    return _report(results, "max_rel")


def cmd_train(o) -> int:
    try:
        task = SyntheticTask(noise_std=o["task_noise"], seed=o["task_seed"])
        cfg = tt.TrainConfig(
            mode=MODE_NAMES[o["mode"]],
            epsilon_train=o["epsilon"],
            headdrop_prob=o["headdrop"],
            learning_rate=o["lr"],
            epochs=o["epochs"],
            batch_size=o["batch_size"],
            seed=o["seed"],
            energy_noise_std=o["energy_noise"],
            n_train=o["n_train"],
        )
    except (KeyError, ValueError) as exc:
        raise UsageError(f"invalid training options: {exc}") from None
    result = tt.train(cfg, task)
    out = _outdir(o["output"])
    tt.save_checkpoint(result.checkpoint, os.path.join(out, "checkpoint.txt"))
    _write(os.path.join(out, "train_log.csv"), tt.log_to_csv(result.log))
    print(f"best epoch {result.checkpoint.epoch} teacher-forced accuracy {result.checkpoint.accuracy!r}")
    return 0


def _tradeoff(o, paths) -> int:
    if not paths:
        raise UsageError("needs --input with at least one checkpoint")
    eps_list = _eps_list(o["eps_list"])
    policy = _policy(o, 0)
    if o["n_test"] < 1:
        raise UsageError("--n-test must be >= 1")
    header, body, series = None, [], {}
    worst_violation = False
    for path in paths:
        ckpt = tt.load_checkpoint(path)
        rows = tt.evaluate(ckpt, eps_list, policy, n_test=o["n_test"])
        label = f"{MODE_LABELS.get(ckpt.train.mode, ckpt.train.mode)} (eps_train={ckpt.train.epsilon_train})"
        if label in series:
            label = f"{label} #{len(series)}"
        csv_text = tt.table_to_csv(rows, {"mode": MODE_LABELS.get(ckpt.train.mode, ckpt.train.mode)})
        lines = csv_text.splitlines()
        header = lines[0]
        body.extend(lines[1:])
        series[label] = [(r["rel_ms"], r["token_error"], f"eps={r['epsilon']}") for r in rows]
        worst_violation |= any(r["max_spread"] > r["epsilon"] for r in rows)
        for r in rows:
            print(
                f"{label}: eps={r['epsilon']} token_error={r['token_error']:.4f} "
                f"rel_ms={r['rel_ms']:.2f} max_spread={r['max_spread']}"
            )
    out = _outdir(o["output"])
    _write(os.path.join(out, "tradeoff.csv"), "\n".join([header] + body) + "\n")
    svg = line_chart(series, "relative latency (ms)", "token error rate", "latency / error trade-off")
    _write(os.path.join(out, "tradeoff.svg"), svg)
    return 1 if worst_violation else 0


def cmd_eval(o) -> int:
    return _tradeoff(o, [o["input"]] if o["input"] else [])


def cmd_tradeoff(o) -> int:
    paths = o["input"]
    if isinstance(paths, str):
        paths = [paths]
    return _tradeoff(o, paths or [])


COMMANDS = {
    "align": cmd_align,
    "decode": cmd_decode,
    "oracle-check": cmd_oracle_check,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "eval": cmd_eval,
    "tradeoff": cmd_tradeoff,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](resolve(args))
    except (UsageError, io.FormatError) as exc:
        print(f"mcmma {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"mcmma {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
