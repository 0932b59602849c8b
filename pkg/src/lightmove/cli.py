"""Command-line front end.

Subcommands: synth (grid fleet simulator), prepare (segment + split +
bundle), train (fit a variant on a bundle), eval (metrics + baselines),
predict (top-k next locations). Every command writes a run manifest with
resolved options and artifact hashes; --from-manifest replays a run and
reproduces its outputs bit for bit.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import re
import sys

import numpy as np

from . import checkpoint as ckpt_mod
from . import data as data_mod
from . import evaluate as eval_mod
from . import kernels
from . import train as train_mod
from .errors import ConfigError, ParseError
from .model import ModelConfig, count_params, init_params
from .odeint import SolveSpec

log = logging.getLogger(__name__)

VARIANT_RE = re.compile(r"^([GL])(\d+)([ER])(F?)$")
SEED_ENV = "LIGHTMOVE_SEED"


def parse_variant(code: str) -> dict:
    """Expand a variant code like G2EF into architecture switches.

    First letter: jump cell kind (G = GRU, L = affine+tanh). Digits: how
    many jumps. Next letter: solver (E = euler, R = rk4). Optional F
    enables adaptive gate generation.
    """
    m = VARIANT_RE.match(code.strip())
    if not m:
        raise ConfigError(
            f"bad variant code {code!r}: expected [G|L]<jumps>[E|R][F], e.g. G2E, L5R, G2EF"
        )
    kind, jumps, solver, fine = m.groups()
    return {
        "jump_kind": "gru" if kind == "G" else "fc",
        "jumps": int(jumps),
        "solver_method": "euler" if solver == "E" else "rk4",
        "fine_tune": bool(fine),
    }


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _default_seed() -> int:
    return int(os.environ.get(SEED_ENV, "0"))


def write_run_manifest(path, command, options, inputs, outputs):
    """Deterministic record of one command: resolved options plus
    sha256 of every input and output file."""
    manifest = {
        "format_version": 1,
        "command": command,
        "kernel_backend": kernels.BACKEND,
        "options": options,
        "inputs": {p: _sha256_file(p) for p in inputs},
        "outputs": {p: _sha256_file(p) for p in outputs},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_run_manifest(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != 1 or "command" not in manifest:
        raise ParseError(f"{path}: not a run manifest")
    return manifest


# ---------------------------------------------------------------------------
# Bundle-to-example plumbing shared by train/eval/predict


def _vocabs(manifest):
    loc_vocab = {loc: i for i, loc in enumerate(manifest["locations"])}
    user_vocab = {u: i for i, u in enumerate(manifest["users"])}
    return loc_vocab, user_vocab


def build_examples(splits, manifest, split_name, opts):
    """Examples for one split; users absent from training are skipped."""
    loc_vocab, user_vocab = _vocabs(manifest)
    out = []
    for user_id, sessions in splits[split_name].items():
        if user_id not in user_vocab:
            log.warning("skipping %s user %s: not in the training split",
                        split_name, user_id)
            continue
        common = dict(
            horizon=opts["horizon"], loc_vocab=loc_vocab,
            user_index=user_vocab[user_id], user_id=user_id,
            session_len=opts["session_len"], slots=opts["time_slots"],
            max_long=opts["max_long"],
        )
        if opts["windowed"]:
            out.extend(data_mod.window_examples(sessions, stride=opts["stride"], **common))
        else:
            ex = data_mod.make_example(sessions, **common)
            if ex is not None:
                out.append(ex)
    return out


def _model_config(opts, num_locations, num_users) -> ModelConfig:
    return ModelConfig(
        num_locations=num_locations,
        num_users=num_users,
        loc_dim=opts["loc_dim"],
        time_dim=opts["time_dim"],
        user_dim=opts["user_dim"],
        num_time_slots=opts["time_slots"],
        session_len=opts["session_len"],
        horizon=opts["horizon"],
        jumps=opts["jumps"],
        jump_kind=opts["jump_kind"],
        jump_scheme=opts["jump_scheme"],
        solver=SolveSpec(opts["solver_method"], opts["step_size"]),
        fine_tune=opts["fine_tune"],
        dropout=opts["dropout"],
        row_order=opts["row_order"],
        arch=opts["arch"],
    )


# ---------------------------------------------------------------------------
# Subcommands (each takes a resolved option dict, returns exit code)


def cmd_synth(opts) -> int:
    result = data_mod.synth_generate(
        width=opts["grid_w"], height=opts["grid_h"], cabs=opts["cabs"],
        routes_per_cab=opts["routes"], noise=opts["noise"],
        duration=opts["steps"] * opts["interval"], interval=opts["interval"],
        seed=opts["seed"],
    )
    out = opts["out"]
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(data_mod.serialize_logs(result.checkins))
    total_dev = sum(result.deviations.values())
    print(f"wrote {len(result.checkins)} logs for {opts['cabs']} cabs to {out} "
          f"({total_dev} deviations)")
    write_run_manifest(out + ".run.json", "synth", opts, [], [out])
    return 0


def cmd_prepare(opts) -> int:
    with open(opts["input"], encoding="utf-8") as fh:
        records = data_mod.parse_logs(fh)
    spec = data_mod.SplitSpec(
        mode=opts["mode"], fixed_count=opts["session_len"],
        gap_threshold=int(opts["gap_hours"] * 3600),
    )
    trajectories = [
        data_mod.segment_sessions(stream, spec)
        for stream in data_mod.group_by_user(records).values()
    ]
    stats = data_mod.dataset_stats(trajectories)
    splits = data_mod.prepare_splits(records, spec)
    manifest = data_mod.write_bundle(opts["out"], splits, spec)
    for key, value in stats.items():
        print(f"{key}\t{value}")
    for name in data_mod.SPLIT_NAMES:
        print(f"sessions_{name}\t{sum(len(s) for s in splits[name].values())}")
    outputs = [os.path.join(opts["out"], f) for f in manifest["files"].values()]
    outputs.append(os.path.join(opts["out"], data_mod.BUNDLE_MANIFEST))
    write_run_manifest(os.path.join(opts["out"], "run.json"), "prepare",
                       opts, [opts["input"]], outputs)
    return 0


def cmd_train(opts) -> int:
    splits, _, manifest = data_mod.load_bundle(opts["bundle"])
    num_locations = len(manifest["locations"]) + 1  # trailing unknown index
    num_users = len(manifest["users"])
    unknown = num_locations - 1
    config = _model_config(opts, num_locations, num_users)
    train_examples = build_examples(splits, manifest, "train", opts)
    valid_examples = build_examples(splits, manifest, "valid", opts)
    if not train_examples or not valid_examples:
        raise ConfigError(
            f"bundle yields {len(train_examples)} train / {len(valid_examples)} valid examples"
        )
    tconfig = train_mod.TrainConfig(
        lr=opts["lr"], epochs=opts["epochs"], seed=opts["seed"],
        l2=opts["l2"], decay=opts["decay"], min_lr=opts["min_lr"],
    )
    params = init_params(config, seed=opts["seed"])
    log.info("training %d params on %d examples (%d valid)",
             count_params(config), len(train_examples), len(valid_examples))

    def log_row(row):
        log.info("epoch %(epoch)d lr %(lr).6g loss %(train_loss).6g "
                 "hits@1 %(valid_hits1).4f mrr %(valid_mrr).4f", row)

    result = train_mod.fit(train_examples, valid_examples, params, config,
                           tconfig, unknown_index=unknown, log_fn=log_row)
    os.makedirs(opts["out"], exist_ok=True)
    bundle_hash = _sha256_file(os.path.join(opts["bundle"], data_mod.BUNDLE_MANIFEST))
    best = result.best
    ckpt_path = os.path.join(opts["out"], "checkpoint.bin")
    aux = {f"aux.adam.m.{k}": a for k, a in best.adam.m.items()}
    aux.update({f"aux.adam.v.{k}": a for k, a in best.adam.v.items()})
    ckpt_mod.save_checkpoint(
        ckpt_path, config, best.params,
        extras={
            "epoch": best.epoch,
            "valid_metric": best.valid_metric,
            "metric_name": best.metric_name,
            "adam_t": best.adam.t,
            "train_options": opts,
            "bundle_sha256": bundle_hash,
        },
        aux_tensors=aux,
    )
    log_path = os.path.join(opts["out"], "train_log.tsv")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(train_mod.history_log_text(result.history))
    print(f"best epoch {best.epoch} valid {best.metric_name} {best.valid_metric:.4f} "
          f"-> {ckpt_path}")
    write_run_manifest(os.path.join(opts["out"], "run.json"), "train", opts,
                       [os.path.join(opts["bundle"], data_mod.BUNDLE_MANIFEST)],
                       [ckpt_path, log_path])
    return 0


def _load_checkpoint_for_bundle(ckpt_path, bundle_dir):
    config, params, extras, aux = ckpt_mod.load_checkpoint(ckpt_path)
    bundle_hash = _sha256_file(os.path.join(bundle_dir, data_mod.BUNDLE_MANIFEST))
    recorded = extras.get("bundle_sha256")
    if recorded is not None and recorded != bundle_hash:
        raise ConfigError(
            f"checkpoint was trained on a different bundle "
            f"(recorded {recorded[:12]}, found {bundle_hash[:12]})"
        )
    return config, params, extras, aux


def _example_opts_from_checkpoint(opts, extras, config):
    """Example-construction options matching how the model was trained."""
    trained = extras.get("train_options", {})
    merged = dict(opts)
    for key in ("horizon", "session_len", "time_slots", "max_long",
                "windowed", "stride"):
        if key in trained:
            merged[key] = trained[key]
    merged["horizon"] = config.horizon
    merged["session_len"] = config.session_len
    merged["time_slots"] = config.num_time_slots
    return merged


def cmd_eval(opts) -> int:
    splits, _, manifest = data_mod.load_bundle(opts["bundle"])
    config, params, extras, _ = _load_checkpoint_for_bundle(opts["checkpoint"], opts["bundle"])
    ex_opts = _example_opts_from_checkpoint(opts, extras, config)
    if opts["split"] == "test" and not opts["windowed_eval"]:
        ex_opts["windowed"] = False
    examples = build_examples(splits, manifest, opts["split"], ex_opts)
    if not examples:
        raise ConfigError(f"no {opts['split']} examples in the bundle")
    unknown = config.num_locations - 1
    loc_vocab, user_vocab = _vocabs(manifest)

    reports = [eval_mod.timed_evaluate(
        eval_mod.model_predictor(params, config), examples,
        num_params=count_params(config), unknown_index=unknown,
        threads=opts["threads"], label=f"model:{os.path.basename(opts['checkpoint'])}",
    )]
    kinds = [k for k in opts["baselines"].split(",") if k] if opts["baselines"] else []
    for kind in kinds:
        if kind not in ("frequency", "markov1"):
            raise ConfigError(
                f"unsupported baseline {kind!r} (cli supports frequency, markov1; "
                f"plain_gru is trained via --arch gru)")
        freq, markov = eval_mod.fit_count_baselines(
            splits["train"], loc_vocab, user_vocab, config.num_locations, config.horizon)
        predictor = freq.predict if kind == "frequency" else markov.predict
        reports.append(eval_mod.timed_evaluate(
            predictor, examples, num_params=0, unknown_index=unknown,
            threads=opts["threads"], label=kind))

    os.makedirs(opts["out"], exist_ok=True)
    outputs = []
    for report in reports:
        stem = report.label.replace(":", "_").replace("/", "_")
        tsv = os.path.join(opts["out"], f"report_{stem}.tsv")
        js = os.path.join(opts["out"], f"report_{stem}.json")
        with open(tsv, "w", encoding="utf-8") as fh:
            fh.write(report.to_text())
        with open(js, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        outputs.extend([tsv, js])
    header = f"{'label':<28}{'hits@1':>9}{'hits@5':>9}{'hits@10':>9}{'mrr':>9}{'params':>10}{'secs':>9}"
    print(header)
    for r in reports:
        print(f"{r.label:<28}{r.hits_at[1]:>9.4f}{r.hits_at[5]:>9.4f}"
              f"{r.hits_at[10]:>9.4f}{r.mrr:>9.4f}{r.num_params:>10d}"
              f"{r.inference_seconds:>9.3f}")
    write_run_manifest(os.path.join(opts["out"], "run.json"), "eval", opts,
                       [opts["checkpoint"]], outputs)
    return 0


def cmd_predict(opts) -> int:
    splits, _, manifest = data_mod.load_bundle(opts["bundle"])
    config, params, extras, _ = _load_checkpoint_for_bundle(opts["checkpoint"], opts["bundle"])
    ex_opts = _example_opts_from_checkpoint(opts, extras, config)
    ex_opts["windowed"] = False
    examples = build_examples(splits, manifest, opts["split"], ex_opts)
    if opts["user"]:
        examples = [ex for ex in examples if ex.user_id == opts["user"]]
        if not examples:
            raise ConfigError(f"no {opts['split']} example for user {opts['user']!r}")
    names = list(manifest["locations"]) + ["<unk>"]
    predict = eval_mod.model_predictor(params, config)
    lines = ["user\tstep\trank\tlocation\tprob"]
    for ex in examples:
        p = predict(ex.batch)
        for step in range(p.shape[0]):
            top = np.argsort(-p[step], kind="stable")[: opts["top_k"]]
            for rank, loc in enumerate(top, start=1):
                lines.append(f"{ex.user_id}\t{step}\t{rank}\t{names[loc]}\t{p[step, loc]:.6f}")
    text = "\n".join(lines) + "\n"
    if opts["out"]:
        with open(opts["out"], "w", encoding="utf-8") as fh:
            fh.write(text)
        write_run_manifest(opts["out"] + ".run.json", "predict", opts,
                           [opts["checkpoint"]], [opts["out"]])
    else:
        print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--variant", default="G2E",
                   help="architecture code: [G|L]<jumps>[E|R][F] (default G2E)")
    p.add_argument("--loc-dim", type=int, default=32)
    p.add_argument("--time-dim", type=int, default=8)
    p.add_argument("--user-dim", type=int, default=8)
    p.add_argument("--time-slots", type=int, default=24)
    p.add_argument("--session-len", type=int, default=9)
    p.add_argument("--horizon", type=int, default=3)
    p.add_argument("--step-size", type=float, default=0.25)
    p.add_argument("--jump-scheme", choices=("boundary", "interior_final"),
                   default="boundary")
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--row-order", choices=("long_first", "short_first"),
                   default="long_first")
    p.add_argument("--arch", choices=("node", "gru"), default="node",
                   help="gru swaps in the plain recurrent baseline core")


def _add_example_flags(p: argparse.ArgumentParser):
    p.add_argument("--windowed", action="store_true",
                   help="slide the session cut to make many examples per user")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--max-long", type=int, default=None,
                   help="cap the flattened history length (most recent kept)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lightmove",
        description="Next-location prediction with continuous-time hidden dynamics.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--backend", choices=kernels.available_backends(),
                        default=None, help="kernel backend override")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic fleet log")
    p.add_argument("--grid", required=True, help="grid size, e.g. 4x4")
    p.add_argument("--cabs", type=int, required=True)
    p.add_argument("--steps", type=int, required=True, help="logs per cab")
    p.add_argument("--routes", type=int, default=1, help="routes per cab")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--interval", type=int, default=300, help="seconds between logs")
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--out", required=True)

    p = sub.add_parser("prepare", help="segment, split, and bundle a log file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=data_mod.SEGMENT_MODES, default="fixed_count")
    p.add_argument("--session-len", type=int, default=9,
                   help="check-ins per session in fixed_count mode")
    p.add_argument("--gap-hours", type=float, default=6.0)

    p = sub.add_parser("train", help="train a model variant on a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    _add_example_flags(p)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--l2", type=float, default=1e-5)
    p.add_argument("--decay", type=float, default=0.9)
    p.add_argument("--min-lr", type=float, default=5e-4)
    p.add_argument("--seed", type=int, default=_default_seed())

    p = sub.add_parser("eval", help="evaluate a checkpoint, optionally vs baselines")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=data_mod.SPLIT_NAMES, default="test")
    p.add_argument("--baselines", default="", help="comma list: frequency,markov1")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--windowed-eval", action="store_true",
                   help="keep windowed example construction for eval splits")

    p = sub.add_parser("predict", help="top-k next locations for bundle users")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=data_mod.SPLIT_NAMES, default="test")
    p.add_argument("--user", default=None)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--out", default=None)

    for name in ("synth", "prepare", "train", "eval", "predict"):
        sub.choices[name].add_argument(
            "--from-manifest", default=None,
            help="replay a previous run from its run manifest")
    return parser


def _resolve_options(args: argparse.Namespace) -> dict:
    """Flatten parsed args into the option dict a command consumes."""
    opts = {k: v for k, v in vars(args).items()
            if k not in ("command", "verbose", "backend", "from_manifest")}
    if args.command == "synth":
        m = re.match(r"^(\d+)x(\d+)$", opts.pop("grid"))
        if not m:
            raise ConfigError("bad --grid: expected WxH, e.g. 4x4")
        opts["grid_w"], opts["grid_h"] = int(m.group(1)), int(m.group(2))
    if args.command == "train":
        opts.update(parse_variant(opts.pop("variant")))
    return opts


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.from_manifest:
            manifest = load_run_manifest(args.from_manifest)
            if manifest["command"] != args.command:
                raise ConfigError(
                    f"manifest records a {manifest['command']!r} run, not {args.command!r}")
            kernels.use_backend(manifest.get("kernel_backend", kernels.BACKEND))
            opts = manifest["options"]
        else:
            if args.backend:
                kernels.use_backend(args.backend)
            opts = _resolve_options(args)
        return COMMANDS[args.command](opts)
    except (ConfigError, ParseError, FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
