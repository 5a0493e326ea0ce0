"""Command-line entry point.

Options come from an optional ``--config`` file with ``[model]``, ``[train]``
and ``[data]`` sections of ``key = value`` lines; flags override the file.
Exit status: 0 success, 1 invalid options, 2 runtime or file-format failure.
"""

import argparse
import configparser
import dataclasses
import os
import sys
import time
from typing import Dict, List, Optional

import numpy as np

from . import network, skeleton, training, unified
from .checks import layer_grad_check, model_grad_check, op_grad_checks
from .errors import ConfigurationError, ContractError, DimensionError, FormatError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad command line, config key or option value."""


# -- option schemas ------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ints(text: str) -> tuple:
    parts = [p for p in text.replace(",", " ").split() if p]
    return tuple(int(p) for p in parts)


def _parser_for(default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        return _parse_ints
    return str


def _schema_of(cls) -> Dict[str, tuple]:
    inst = cls()
    return {f.name: (_parser_for(getattr(inst, f.name)), getattr(inst, f.name)) for f in dataclasses.fields(cls)}


@dataclasses.dataclass(frozen=True)
class TrainOptions:
    epochs: int = 65
    base_lr: float = 0.1
    warmup_epochs: int = 5
    decay_epochs: tuple = (35, 55)
    decay_factor: float = 0.1
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 4e-4

    def schedule(self) -> training.Schedule:
        return training.Schedule(self.base_lr, self.warmup_epochs, self.decay_epochs,
                                 self.decay_factor, self.epochs)


SCHEMAS = {
    "model": _schema_of(network.ModelConfig),
    "train": _schema_of(TrainOptions),
    "data": _schema_of(skeleton.SyntheticSpec),
}


def read_config_file(path: str) -> Dict[str, Dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    out = {}
    for section in parser.sections():
        if section not in SCHEMAS:
            raise UsageError(f"{path}: unknown section [{section}]; known: {sorted(SCHEMAS)}")
        for key, value in parser.items(section):
            if key not in SCHEMAS[section]:
                raise UsageError(f"{path}: unknown key {key!r} in [{section}]")
            out.setdefault(section, {})[key] = value
    return out


class Options:
    """Resolved values per section: defaults < config file < flags."""

    def __init__(self, file_values: Dict[str, Dict[str, str]], flag_values: Dict[str, Dict[str, str]]):
        self.explicit: Dict[str, set] = {}
        self.values: Dict[str, dict] = {}
        for section, schema in SCHEMAS.items():
            vals = {k: d for k, (_, d) in schema.items()}
            given = {}
            given.update(file_values.get(section, {}))
            given.update(flag_values.get(section, {}))
            for key, raw in given.items():
                if key not in schema:
                    raise UsageError(f"unknown key {section}.{key}")
                try:
                    vals[key] = schema[key][0](raw) if isinstance(raw, str) else raw
                except ValueError as exc:
                    raise UsageError(f"bad value for {section}.{key}: {exc}") from None
            self.values[section] = vals
            self.explicit[section] = set(given)

    def model(self, **fallback) -> network.ModelConfig:
        vals = dict(self.values["model"])
        for key, value in fallback.items():
            if key not in self.explicit["model"]:
                vals[key] = value
        try:
            return network.ModelConfig(**vals).validate()
        except ConfigurationError as exc:
            raise UsageError(str(exc)) from None

    def train(self) -> TrainOptions:
        opts = TrainOptions(**self.values["train"])
        try:
            opts.schedule()
        except ConfigurationError as exc:
            raise UsageError(str(exc)) from None
        if opts.batch_size < 1:
            raise UsageError("batch_size must be positive")
        return opts

    def data(self) -> skeleton.SyntheticSpec:
        return skeleton.SyntheticSpec(**self.values["data"])


# -- parser --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# flag dest -> (section, key)
_FLAG_TARGETS = {
    "data_classes": ("data", "num_classes"), "per_class": ("data", "samples_per_class"),
    "data_graph": ("data", "graph"), "data_persons": ("data", "persons"),
    "data_frames": ("data", "frames"), "noise_sigma": ("data", "noise_sigma"),
    "graph": ("model", "graph"), "num_classes": ("model", "num_classes"), "gc": ("model", "gc"),
    "channel_plan": ("model", "channels"), "strides": ("model", "strides"), "r": ("model", "r"),
    "corr_fn": ("model", "corr_fn"), "sigma": ("model", "sigma"), "frames": ("model", "frames"),
    "persons": ("model", "num_persons"),
    "epochs": ("train", "epochs"), "lr": ("train", "base_lr"), "batch_size": ("train", "batch_size"),
    "decay_epochs": ("train", "decay_epochs"), "warmup_epochs": ("train", "warmup_epochs"),
}


def _common(p):
    p.add_argument("--seed", type=int, default=None, help="PRNG seed (fallback: $CTR_SEED, then 0)")
    p.add_argument("--threads", type=int, default=1, help="upper bound on worker threads")
    p.add_argument("--config", default=None, help="config file with [model]/[train]/[data] sections")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config key")


def _model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--graph")
    g.add_argument("--num-classes", type=str)
    g.add_argument("--gc", choices=network.GC_VARIANTS)
    g.add_argument("--channel-plan", metavar="C1,C2,...")
    g.add_argument("--strides", metavar="S1,S2,...")
    g.add_argument("--r")
    g.add_argument("--corr-fn", choices=("M1", "M1plus", "M2"))
    g.add_argument("--sigma", choices=("tanh", "sigmoid", "relu"))
    g.add_argument("--frames")
    g.add_argument("--persons")


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="ctrgcn", description="Channel-wise topology refinement graph convolution toolkit")
    sub = top.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic labelled dataset")
    _common(p)
    p.add_argument("--classes", dest="data_classes")
    p.add_argument("--per-class")
    p.add_argument("--graph", dest="data_graph")
    p.add_argument("--persons", dest="data_persons")
    p.add_argument("--frames", dest="data_frames")
    p.add_argument("--noise-sigma")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    _common(p)
    _model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs")
    p.add_argument("--lr")
    p.add_argument("--batch-size")
    p.add_argument("--decay-epochs")
    p.add_argument("--warmup-epochs")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    _model_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--modality", choices=skeleton.MODALITIES, default="joint")
    p.add_argument("--out", default=None, help="score file to write")

    p = sub.add_parser("fuse", help="fuse per-modality score files")
    _common(p)
    p.add_argument("--streams", nargs="+", required=True)
    p.add_argument("--weights", default=None, metavar="W1,W2,...")
    p.add_argument("--data", default=None, help="dataset directory providing labels")
    p.add_argument("--out", default=None, help="fused prediction file")

    for name in ("count-params", "count-flops"):
        p = sub.add_parser(name)
        _common(p)
        _model_flags(p)

    p = sub.add_parser("audit-constraints", help="constraint pattern of one GC family")
    _common(p)
    p.add_argument("--variant", required=True, choices=("stgc", "agc", "dcgc", "dcgc_star", "ctrgc"))
    p.add_argument("--samples", type=int, default=3)

    p = sub.add_parser("check-equivalence", help="batched aggregation vs generalized-weight form")
    _common(p)
    p.add_argument("--trials", type=int, default=100)

    p = sub.add_parser("grad-check", help="finite-difference gradient check")
    _common(p)
    p.add_argument("--scope", required=True, choices=("ops", "layer", "model"))
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--corr-fn", choices=("M1", "M1plus", "M2"), default="M1")

    p = sub.add_parser("dump-topology", help="write shared and refined topologies as text")
    _common(p)
    _model_flags(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", default=None, help="sample id (default: first test sample)")
    p.add_argument("--block", default=None, metavar="B1,B2,...", help="1-based blocks (default: all)")
    p.add_argument("--channels", default="0", metavar="C1,C2,...")
    p.add_argument("--out", default=None)

    p = sub.add_parser("derive", help="derive a modality dataset from joint coordinates")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--modality", required=True, choices=("bone", "joint_motion", "bone_motion"))
    p.add_argument("--out", required=True)
    return top


# -- helpers -------------------------------------------------------------------

def resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("CTR_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"CTR_SEED must be an integer, got {env!r}") from None


def resolve_options(args) -> Options:
    file_values = read_config_file(args.config) if args.config else {}
    flags: Dict[str, Dict[str, str]] = {}
    for dest, (section, key) in _FLAG_TARGETS.items():
        value = getattr(args, dest, None)
        if value is not None:
            flags.setdefault(section, {})[key] = value
    for item in args.set:
        target, sep, value = item.partition("=")
        section, dot, key = target.strip().partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        if section not in SCHEMAS or key not in SCHEMAS[section]:
            raise UsageError(f"unknown key {target.strip()!r}")
        flags.setdefault(section, {})[key] = value.strip()
    return Options(file_values, flags)


def _ids_list(text: str) -> List[int]:
    try:
        return list(_parse_ints(text))
    except ValueError:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}") from None


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def _write_text(path: str, text: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _dataset_model(opts: Options, ds: skeleton.DatasetDescriptor) -> network.ModelConfig:
    sample = ds.samples[0]
    cfg = opts.model(graph=ds.graph.name, num_classes=ds.num_classes, num_persons=sample.persons,
                     frames=sample.frames, in_channels=sample.channels)
    if cfg.graph != ds.graph.name:
        raise UsageError(f"model graph {cfg.graph!r} does not match dataset graph {ds.graph.name!r}")
    if cfg.num_classes != ds.num_classes:
        raise UsageError(f"model has {cfg.num_classes} classes, dataset has {ds.num_classes}")
    return cfg


def config_text(cfg: network.ModelConfig) -> str:
    lines = ["[model]"]
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            v = _fmt(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args, opts, seed, out):
    spec = opts.data()
    try:
        skeleton.build_graph(spec.graph)
    except LookupError as exc:
        raise UsageError(str(exc)) from None
    ds = skeleton.synthesize_dataset(spec, seed)
    skeleton.save_dataset(ds, args.out)
    n_train = ds.split.count("train")
    out(f"wrote {len(ds.samples)} samples ({n_train} train, {len(ds.samples) - n_train} test) to {args.out}")


def cmd_train(args, opts, seed, out):
    train_opts = opts.train()
    ds = skeleton.load_dataset(args.data)
    cfg = _dataset_model(opts, ds)
    model = network.build_model(cfg, seed=seed)
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "model.cfg"), config_text(cfg))
    opt = training.make_optimizer(model.parameters(), train_opts.momentum, train_opts.weight_decay)
    ckpt = os.path.join(args.out, "model.ckpt")
    log = training.train(model, ds.subset("train"), ds.subset("test"), train_opts.schedule(), opt, seed=seed,
                         batch_size=train_opts.batch_size, checkpoint_path=ckpt,
                         on_epoch=lambda r: out(r.line()))
    _write_text(os.path.join(args.out, "log.txt"), log.text())
    if log.diverged:
        out(log.lines()[-1])
    out(f"best_epoch={log.best_epoch} best_test_acc={_fmt(log.best_test_acc)} checkpoint={ckpt}")


def _load_model(args, opts, ds) -> network.Model:
    cfg = _dataset_model(opts, ds)
    return network.load_checkpoint(args.checkpoint, cfg)


def cmd_eval(args, opts, seed, out):
    ds = skeleton.load_dataset(args.data)
    model = _load_model(args, opts, ds)
    samples, ids = ds.subset(args.split), ds.subset_ids(args.split)
    result = training.evaluate(model, samples)
    out(f"split={args.split} samples={len(samples)} top1={_fmt(result.top1)}")
    for k, acc in sorted(result.per_class.items()):
        out(f"class={k} acc={_fmt(acc)}")
    if args.out:
        stream = training.StreamScores(args.modality, ids, result.logits)
        training.save_scores(stream, args.out)
        out(f"scores={args.out}")


def cmd_fuse(args, opts, seed, out):
    weights = None
    if args.weights is not None:
        try:
            weights = [float(w) for w in args.weights.split(",")]
        except ValueError:
            raise UsageError(f"bad --weights {args.weights!r}") from None
        if len(weights) != len(args.streams):
            raise UsageError(f"{len(weights)} weights for {len(args.streams)} streams")
        if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
            raise UsageError("weights must be non-negative and not all zero")
    streams = [training.load_scores(p) for p in args.streams]
    fused = training.fuse_scores(streams, weights)
    labels = None
    if args.data:
        ds = skeleton.load_dataset(args.data)
        by_id = {i: s.label for i, s in zip(ds.ids, ds.samples)}
        missing = [i for i in fused.ids if i not in by_id]
        if missing:
            raise ContractError(f"sample {missing[0]!r} is not in dataset {args.data}")
        labels = np.array([by_id[i] for i in fused.ids])
        for path, s in zip(args.streams, streams):
            out(f"stream={path} acc={_fmt(training.accuracy(np.argmax(s.scores, axis=1), labels))}")
        out(f"fused_acc={_fmt(training.accuracy(fused.predictions, labels))}")
    else:
        out(f"fused samples={len(fused.ids)}")
    if args.out:
        _write_text(args.out, "".join(f"{i} {p}\n" for i, p in zip(fused.ids, fused.predictions)))


def cmd_count_params(args, opts, seed, out):
    model = network.build_model(opts.model(), seed=seed)
    for line in network.count_params(model).table():
        out(line)


def cmd_count_flops(args, opts, seed, out):
    model = network.build_model(opts.model(), seed=seed)
    for line in network.count_flops(model).lines():
        out(line)


def cmd_audit(args, opts, seed, out):
    if args.samples < 2:
        raise UsageError("--samples must be at least 2")
    reports = unified.audit_variant(args.variant, seed, num_samples=args.samples)
    for r in reports:
        out(r.line())
    pattern = unified.tightest_pattern(reports)
    out(f"tightest sample={pattern['sample']} neighbor={pattern['neighbor']}")
    out(f"clean={str(unified.classification_clean(reports)).lower()}")


def cmd_equivalence(args, opts, seed, out):
    if args.trials < 1:
        raise UsageError("--trials must be positive")
    start = time.perf_counter()
    report = unified.equivalence_suite(seed, args.trials)
    for line in report.lines():
        out(line)
    out(f"pass={str(report.worst < 1e-9).lower()}")
    sys.stderr.write(f"elapsed_s={time.perf_counter() - start:.3f}\n")


def cmd_grad_check(args, opts, seed, out):
    if not 1e-7 <= args.eps <= 1e-4:
        raise UsageError("--eps must lie in [1e-7, 1e-4]")
    if args.scope == "ops":
        results = op_grad_checks(seed, args.eps)
        for name, err in results.items():
            out(f"op={name} max_rel_err={_fmt(err)}")
        worst = max(results.values())
    elif args.scope == "layer":
        worst = layer_grad_check(seed, args.corr_fn, args.eps)
    else:
        worst = model_grad_check(seed, args.eps)
    out(f"scope={args.scope} max_rel_err={_fmt(worst)}")


def cmd_dump(args, opts, seed, out):
    channels = _ids_list(args.channels)
    blocks = None if args.block is None else _ids_list(args.block)
    ds = skeleton.load_dataset(args.data)
    if args.checkpoint:
        model = _load_model(args, opts, ds)
    else:
        model = network.build_model(_dataset_model(opts, ds), seed=seed)
    if args.sample is None:
        test_ids = ds.subset_ids("test") or ds.ids
        sid = test_ids[0]
    else:
        sid = args.sample
    if sid not in ds.ids:
        raise UsageError(f"no sample {sid!r} in {args.data}")
    model.eval()
    try:
        text = network.dump_topologies(model, ds.samples[ds.ids.index(sid)], blocks, channels)
    except IndexError as exc:
        raise UsageError(str(exc)) from None
    if args.out:
        _write_text(args.out, text)
        out(f"sample={sid} stanzas={text.count('block=')} out={args.out}")
    else:
        out(text.rstrip("\n"))


def cmd_derive(args, opts, seed, out):
    ds = skeleton.load_dataset(args.data)
    derived = ds.map(lambda s: skeleton.derive_modality(s, ds.graph, args.modality))
    skeleton.save_dataset(derived, args.out)
    out(f"wrote {len(derived.samples)} {args.modality} samples to {args.out}")


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "fuse": cmd_fuse,
    "count-params": cmd_count_params, "count-flops": cmd_count_flops, "audit-constraints": cmd_audit,
    "check-equivalence": cmd_equivalence, "grad-check": cmd_grad_check, "dump-topology": cmd_dump,
    "derive": cmd_derive,
}


def run(argv: Optional[List[str]] = None, stdout=None, stderr=None) -> int:
    stdout = sys.stdout if stdout is None else stdout
    stderr = sys.stderr if stderr is None else stderr

    def out(line: str) -> None:
        stdout.write(line + "\n")

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        seed = resolve_seed(args)
        opts = resolve_options(args)
        COMMANDS[args.command](args, opts, seed, out)
    except UsageError as exc:
        stderr.write(f"error: {exc}\n")
        return EXIT_INVALID
    except (ConfigurationError, LookupError) as exc:
        stderr.write(f"error: {exc}\n")
        return EXIT_INVALID
    except (FormatError, DimensionError, ContractError, OSError) as exc:
        stderr.write(f"error: {exc}\n")
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
