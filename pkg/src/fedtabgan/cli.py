"""Command-line pipeline: synthesize, train, serve, generate, evaluate, survey.

One binary with subcommands so the config digest computed at training time
flows unchanged into model files, network sessions, and generation.  Exit
codes: 0 success, 1 runtime or network failure, 2 usage or validation error.
Diagnostics go to stderr; stdout carries only data (reports, tables).
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys

from . import evaluate as ev
from . import fednet, federation, gan
from .data import (CodeDictionary, PatientMatrix, SourceParams, load_matrix,
                   save_matrix, synth_source)
from .errors import (FedTabGanError, IntegrityError, NumericError, ParseError,
                     ProtocolError, ShapeError, UsageError)

MODEL_MAGIC = b"FTGM"


# ---------------------------------------------------------------- model files

def save_model(path, model: gan.GanModel, feature_labels=None) -> None:
    """Write a model file: magic, JSON header, then the weight bundle.

    The header carries the full config, its digest, and the training data's
    feature labels so generated cohorts keep the original column names.
    """
    cfg = model.config
    header = {
        "config": {
            "feature_dim": cfg.feature_dim,
            "noise_dim": cfg.noise_dim,
            "g_hidden": list(cfg.g_hidden),
            "d_hidden": list(cfg.d_hidden),
            "learning_rate": cfg.learning_rate,
            "batch_size": cfg.batch_size,
            "d_steps_per_g_step": cfg.d_steps_per_g_step,
            "loss_kind": cfg.loss_kind,
            "gp_lambda": cfg.gp_lambda,
            "seed": cfg.seed,
        },
        "digest": cfg.digest().hex(),
        "feature_labels": (list(feature_labels)
                           if feature_labels is not None else None),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack(">I", len(blob)))
        fh.write(blob)
        fh.write(fednet.encode_weights(model))


def load_model(path, force: bool = False):
    """Load a model file; returns (model, feature_labels or None).

    The stored digest must match the stored config unless force is set; the
    weight bundle's checksum is always enforced.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != MODEL_MAGIC:
        raise ParseError(f"{path}: not a model file")
    (blob_len,) = struct.unpack(">I", data[4:8])
    if len(data) < 8 + blob_len:
        raise ParseError(f"{path}: truncated model header")
    try:
        header = json.loads(data[8:8 + blob_len].decode("utf-8"))
        fields = dict(header["config"])
        fields["g_hidden"] = tuple(fields["g_hidden"])
        fields["d_hidden"] = tuple(fields["d_hidden"])
        config = gan.GanConfig(**fields)
        stored_digest = str(header["digest"])
        labels = header.get("feature_labels")
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: bad model header: {exc}") from None
    if not force and config.digest().hex() != stored_digest:
        raise IntegrityError(
            f"{path}: stored digest does not match its config; "
            "pass --force to load anyway")
    bundle = fednet.decode_weights(data[8 + blob_len:])
    model = gan.build_gan(config)
    fednet.apply_bundle(model, bundle)
    return model, tuple(labels) if labels is not None else None


# ------------------------------------------------------------ option plumbing

def _csv_ints(text: str):
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got {text!r}")


def _address(text: str):
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    try:
        return host, int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad port in {text!r}")


def _add_config_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE",
                   help="key=value file of option defaults; explicit flags win")


def _add_seed_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None,
                   help="global seed (default: FEDTABGAN_SEED or 0)")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--noise-dim", type=int, default=128,
                   help="generator input width (default 128)")
    p.add_argument("--g-hidden", type=_csv_ints, default=(128, 256, 512),
                   metavar="N,N,...", help="generator hidden widths")
    p.add_argument("--d-hidden", type=_csv_ints, default=(512, 256, 128),
                   metavar="N,N,...", help="discriminator hidden widths")
    p.add_argument("--lr", type=float, default=0.0002,
                   help="Adam learning rate (default 0.0002)")
    p.add_argument("--batch-size", type=int, default=1500,
                   help="minibatch size (default 1500)")
    p.add_argument("--d-steps", type=int, default=2,
                   help="discriminator updates per generator update")
    p.add_argument("--loss", choices=gan.LOSS_KINDS, default="vanilla",
                   help="adversarial objective")
    p.add_argument("--gp-lambda", type=float, default=10.0,
                   help="gradient penalty weight for wgan_gp")


def resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("FEDTABGAN_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"FEDTABGAN_SEED must be an integer, got {env!r}")
    return 0


def make_config(args, feature_dim: int, seed: int) -> gan.GanConfig:
    return gan.GanConfig(
        feature_dim=feature_dim,
        noise_dim=args.noise_dim,
        g_hidden=args.g_hidden,
        d_hidden=args.d_hidden,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        d_steps_per_g_step=args.d_steps,
        loss_kind=args.loss,
        gp_lambda=args.gp_lambda,
        seed=seed,
    )


def _read_config_pairs(path) -> dict[str, str]:
    pairs: dict[str, str] = {}
    try:
        with open(path, "r") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}")
    for i, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ParseError(f"{path}:{i}: expected key=value, got {line!r}")
        pairs[key.replace("-", "_")] = value.strip()
    return pairs


def _is_append(action: argparse.Action) -> bool:
    return type(action).__name__ == "_AppendAction"


def _convert_config_value(action: argparse.Action, key: str, value: str):
    if action.nargs == 0:  # store_true style flags
        low = value.lower()
        if low in ("1", "true", "yes"):
            return True
        if low in ("0", "false", "no"):
            return False
        raise UsageError(f"config key {key!r} expects true/false, got {value!r}")
    convert = action.type if action.type is not None else str
    parts = ([p.strip() for p in value.split(",")]
             if _is_append(action) else [value])
    try:
        converted = [convert(p) for p in parts]
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise UsageError(f"bad config value for {key!r}: {exc}")
    if action.choices is not None:
        for item in converted:
            if item not in action.choices:
                raise UsageError(
                    f"config key {key!r} must be one of "
                    f"{sorted(action.choices)}, got {item!r}")
    return converted if _is_append(action) else converted[0]


def _load_overrides(subparser: argparse.ArgumentParser, path):
    """Split a key=value file into scalar and repeated-flag overrides.

    Scalars become parser defaults, so explicit flags still win.  Repeated
    flags (--data and friends) cannot go through defaults, because argparse
    appends to a list default instead of replacing it; the caller applies
    them only when the flag is absent.
    """
    pairs = _read_config_pairs(path)
    actions = {a.dest: a for a in subparser._actions}
    scalars, appends = {}, {}
    for key, value in pairs.items():
        action = actions.get(key)
        if action is None or key in ("config", "help", "func"):
            raise UsageError(f"unknown config key {key!r} in {path}")
        converted = _convert_config_value(action, key, value)
        (appends if _is_append(action) else scalars)[key] = converted
    return scalars, appends


# ----------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    seed = resolve_seed(args)
    if args.silos < 1:
        raise UsageError("--silos must be >= 1")
    params = SourceParams(
        n_patients=args.patients, n_features=args.features,
        n_latent=args.latent, sparsity_target=args.sparsity,
        silo_shift=args.silo_shift, seed=seed)
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.silos):
        matrix = synth_source(params, silo_index=i)
        path = os.path.join(args.out, f"silo_{i}.csv")
        save_matrix(matrix, path)
        density = float(matrix.bits.mean()) if matrix.bits.size else 0.0
        print(f"silo_{i}.csv: {matrix.rows} patients x {matrix.cols} "
              f"features, density {density:.4f}", file=sys.stderr)
    return 0


def _log_path(base, round_index: int, node_index: int, multi: bool) -> str:
    if not multi:
        return str(base)
    root, ext = os.path.splitext(str(base))
    return f"{root}_r{round_index}_n{node_index}{ext or '.csv'}"


def cmd_train(args) -> int:
    seed = resolve_seed(args)
    if args.epochs < 1:
        raise UsageError("--epochs must be >= 1")
    if args.rounds < 1:
        raise UsageError("--rounds must be >= 1")
    matrices = [load_matrix(p) for p in args.data]
    widths = sorted({m.cols for m in matrices})
    if len(widths) != 1:
        raise ShapeError(f"data files disagree on feature count: {widths}")
    config = make_config(args, widths[0], seed)
    if len(matrices) == 1:
        k = args.silos if args.silos is not None else 1
        silos, dropped = federation.partition(matrices[0], k, config.seed)
        if dropped:
            print(f"dropped {dropped} rows to split {matrices[0].rows} "
                  f"evenly over {k} silos", file=sys.stderr)
    else:
        if args.silos is not None and args.silos != len(matrices):
            raise UsageError(f"--silos {args.silos} conflicts with "
                             f"{len(matrices)} --data files")
        silos = matrices
    multi = len(silos) > 1 or args.rounds > 1

    def report(round_index, round_logs):
        for tlog in round_logs:
            print(f"round {tlog.round_index} node {tlog.node_index}: "
                  f"{tlog.n_d_updates} D steps, {tlog.n_g_updates} G steps",
                  file=sys.stderr, flush=True)

    model, logs = federation.run_rounds(
        config, silos, rounds=args.rounds, total_epochs=args.epochs,
        on_round=report)
    if args.log:
        for tlog in logs:
            tlog.write_csv(_log_path(args.log, tlog.round_index,
                                     tlog.node_index, multi))
    save_model(args.out_model, model, matrices[0].feature_labels)
    print(f"saved model to {args.out_model}", file=sys.stderr)
    return 0


def cmd_serve(args) -> int:
    seed = resolve_seed(args)
    plan = federation.FederationPlan.load(args.plan)
    config = make_config(args, args.features, seed)

    def announce(addr):
        print(f"listening on {addr[0]}:{addr[1]}", file=sys.stderr, flush=True)

    bundle = fednet.coordinator_run(config, plan, args.bind,
                                    timeout=args.timeout_secs,
                                    on_listen=announce)
    model = gan.build_gan(config)
    fednet.apply_bundle(model, bundle)
    save_model(args.out_model, model)
    print(f"saved model to {args.out_model}", file=sys.stderr)
    return 0


def _csv_width(path) -> int:
    with open(path, "r") as fh:
        header = fh.readline()
    if not header.strip():
        raise ParseError(f"{path}: empty file")
    return len(header.rstrip("\r\n").split(","))


def cmd_worker(args) -> int:
    seed = resolve_seed(args)
    if args.node_id < 0:
        raise UsageError("--node-id must be >= 0")
    config = make_config(args, _csv_width(args.data), seed)
    return fednet.worker_run(args.data, args.connect, args.node_id, config,
                             timeout=args.timeout_secs)


def cmd_generate(args) -> int:
    seed = resolve_seed(args)
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    model, labels = load_model(args.model, force=args.force)
    cohort = gan.generate(model, args.n, seed)
    if labels is not None:
        cohort = PatientMatrix(cohort.bits, labels)
    save_matrix(cohort, args.out)
    print(f"wrote {cohort.rows} synthetic patients to {args.out}",
          file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    if args.hist_bins < 1:
        raise UsageError("--hist-bins must be >= 1")
    real = load_matrix(args.real)
    synth = load_matrix(args.synth)
    report = ev.evaluate(real, synth, bin_count=args.hist_bins)
    text = report.to_text()
    print(text)
    if args.out_report:
        with open(args.out_report, "w") as fh:
            fh.write(text + "\n")
    if args.scatter:
        ev.scatter_export(ev.feature_probabilities(real),
                          ev.feature_probabilities(synth),
                          args.scatter,
                          feature_labels=real.labels_or_default())
    if args.hist:
        ev.histogram_export(report.histogram_edges, report.histogram_counts,
                            args.hist)
    return 0


def cmd_survey(args) -> int:
    seed = resolve_seed(args)
    if len(args.synth) != 2:
        raise UsageError("survey needs exactly two --synth files: "
                         "single-source first, then federated")
    real = load_matrix(args.real)
    single = load_matrix(args.synth[0])
    fed = load_matrix(args.synth[1])
    code_dict = CodeDictionary.load(args.dict) if args.dict else None
    pack = ev.make_survey_pack(real, single, fed, code_dict=code_dict,
                               n_per_group=args.n, seed=seed)
    pack.write_pack(args.out_pack)
    pack.write_key(args.out_key)
    print(f"wrote {len(pack.items)} blinded survey items to {args.out_pack}; "
          f"key in {args.out_key}", file=sys.stderr)
    return 0


def cmd_survey_tabulate(args) -> int:
    key = ev.load_key(args.key)
    responses = [ev.load_responses(p) for p in args.responses]
    table = ev.tabulate_survey(responses, key)
    table.write_csv(args.out)
    with open(args.out, "r") as fh:
        sys.stdout.write(fh.read())
    return 0


# ----------------------------------------------------------------- the parser

# flags a subcommand cannot run without; checked after the config-file
# overlay, so any of them may come from the file instead of the command line
REQUIRED = {
    "synth": (("out", "--out"), ("patients", "--patients"),
              ("features", "--features")),
    "train": (("data", "--data"), ("epochs", "--epochs"),
              ("out_model", "--out-model")),
    "serve": (("plan", "--plan"), ("features", "--features"),
              ("out_model", "--out-model")),
    "worker": (("connect", "--connect"), ("data", "--data"),
               ("node_id", "--node-id")),
    "generate": (("model", "--model"), ("n", "--n"), ("out", "--out")),
    "eval": (("real", "--real"), ("synth", "--synth")),
    "survey": (("real", "--real"), ("synth", "--synth"),
               ("out_pack", "--out-pack"), ("out_key", "--out-key")),
    "survey-tabulate": (("responses", "--responses"), ("key", "--key"),
                        ("out", "--out")),
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fedtabgan",
        description="Federated GAN pipeline for binary patient matrices.")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")
    subparsers: dict[str, argparse.ArgumentParser] = {}

    def new(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        _add_config_flag(p)
        _add_seed_flag(p)
        subparsers[name] = p
        return p

    p = new("synth", cmd_synth, "write synthetic silo CSVs")
    p.add_argument("--out", help="output directory")
    p.add_argument("--patients", type=int,
                   help="rows per silo")
    p.add_argument("--features", type=int,
                   help="diagnosis columns")
    p.add_argument("--silos", type=int, default=1,
                   help="number of silo files (default 1)")
    p.add_argument("--sparsity", type=float, default=0.03,
                   help="target mean cell probability (default 0.03)")
    p.add_argument("--silo-shift", type=float, default=0.0,
                   help="strength of per-silo distribution drift")
    p.add_argument("--latent", type=int, default=8,
                   help="latent topic count of the source model")

    p = new("train", cmd_train, "train a single or federated model")
    p.add_argument("--data", action="append", metavar="CSV",
                   help="training matrix; repeat for pre-split silos")
    p.add_argument("--silos", type=int, default=None,
                   help="split one --data file into this many silos")
    p.add_argument("--epochs", type=int,
                   help="total epoch budget across all nodes and rounds")
    p.add_argument("--rounds", type=int, default=1,
                   help="federation rounds (default 1)")
    p.add_argument("--out-model", help="model file to write")
    p.add_argument("--log", default=None, metavar="CSV",
                   help="training log; federated runs add _r<i>_n<j> suffixes")
    _add_model_flags(p)

    p = new("serve", cmd_serve, "coordinate a networked federation session")
    p.add_argument("--bind", type=_address, default=("127.0.0.1", 0),
                   metavar="HOST:PORT", help="listen address (default port 0)")
    p.add_argument("--plan", help="federation plan file")
    p.add_argument("--features", type=int,
                   help="diagnosis columns of the silo matrices")
    p.add_argument("--out-model", help="model file to write")
    p.add_argument("--timeout-secs", type=float, default=600.0,
                   help="per-turn network timeout (default 600)")
    _add_model_flags(p)

    p = new("worker", cmd_worker, "train locally for a remote coordinator")
    p.add_argument("--connect", type=_address,
                   metavar="HOST:PORT", help="coordinator address")
    p.add_argument("--data", metavar="CSV",
                   help="this node's silo matrix")
    p.add_argument("--node-id", type=int,
                   help="this node's index in the plan")
    p.add_argument("--timeout-secs", type=float, default=600.0,
                   help="per-message network timeout (default 600)")
    _add_model_flags(p)

    p = new("generate", cmd_generate, "sample synthetic patients from a model")
    p.add_argument("--model", help="model file from train/serve")
    p.add_argument("--n", type=int, help="patients to sample")
    p.add_argument("--out", help="output CSV")
    p.add_argument("--force", action="store_true",
                   help="load despite a config digest mismatch")

    p = new("eval", cmd_eval, "compare a synthetic cohort against real data")
    p.add_argument("--real", metavar="CSV")
    p.add_argument("--synth", metavar="CSV")
    p.add_argument("--out-report", default=None, metavar="TXT",
                   help="also write the report text here")
    p.add_argument("--scatter", default=None, metavar="CSV",
                   help="write per-feature probability pairs here")
    p.add_argument("--hist", default=None, metavar="CSV",
                   help="write the min-distance histogram here")
    p.add_argument("--hist-bins", type=int, default=20,
                   help="histogram bin count (default 20)")

    p = new("survey", cmd_survey, "build a blinded plausibility survey pack")
    p.add_argument("--real", metavar="CSV")
    p.add_argument("--synth", action="append", metavar="CSV",
                   help="give twice: single-source then federated cohort")
    p.add_argument("--n", type=int, default=20,
                   help="patients sampled per source (default 20)")
    p.add_argument("--dict", default=None, metavar="CSV",
                   help="code,description dictionary for readable items")
    p.add_argument("--out-pack", help="rater-facing text file")
    p.add_argument("--out-key", help="blinding key CSV")

    p = new("survey-tabulate", cmd_survey_tabulate,
            "count survey responses per rater and pooled")
    p.add_argument("--responses", action="append",
                   metavar="CSV", help="one id,category file per rater")
    p.add_argument("--key", help="blinding key CSV")
    p.add_argument("--out", help="counts table CSV")

    return parser, subparsers


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", None):
            scalars, appends = _load_overrides(subparsers[args.command],
                                               args.config)
            subparsers[args.command].set_defaults(**scalars)
            args = parser.parse_args(argv)
            for dest, value in appends.items():
                if getattr(args, dest) is None:
                    setattr(args, dest, value)
        for dest, flag in REQUIRED[args.command]:
            if getattr(args, dest) is None:
                raise UsageError(f"{flag} is required")
        return args.func(args)
    except ProtocolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FedTabGanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
