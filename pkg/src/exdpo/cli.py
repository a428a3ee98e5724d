"""Command-line pipeline: tasks, warm-up, sampling, pairs, alignment, evaluation.

Every command writes its artifacts plus a ``manifest.json`` into ``--out``.
Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 provenance
mismatch.  Metrics go to stdout as one line; logs go to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import __version__
from ._seeding import derive_seed
from .evaluation import evaluate, margin_report, write_report
from .experiments import DeskSettings, params_digest, run_seeds, summarize, train_base
from .model import Checkpoint, ModelConfig, load, save
from .pairs import (
    DEFAULT_K,
    DEFAULT_TEMPERATURE,
    build_pairs,
    collect_responses,
    read_dataset,
    read_records,
    write_dataset,
    write_records,
)
from .taskgen import Corpus, generate_corpus, read_tasks, write_tasks
from .train import PRESETS, TrainConfig, dpo, parse_config_text, rft

log = logging.getLogger("exdpo")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_PROVENANCE = 0, 1, 2, 3
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class ProvenanceError(Exception):
    pass


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_atomic(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


@dataclass
class RunManifest:
    command: list[str]
    config: dict
    inputs: dict[str, str]
    outputs: dict[str, str]
    seed: int | None
    version: str = __version__
    wall_time: float = 0.0

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST
        write_atomic(path, (json.dumps(asdict(self), indent=1, sort_keys=True) + "\n").encode())
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class _Run:
    """Bookkeeping for one command invocation."""

    args: argparse.Namespace
    argv: list[str]
    out: Path
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    start: float = field(default_factory=time.perf_counter)

    def claim(self, *names: str) -> list[Path]:
        """Output paths inside ``--out``; existing files need ``--force``."""
        self.out.mkdir(parents=True, exist_ok=True)
        paths = [self.out / name for name in names]
        existing = [str(p) for p in paths if p.exists()]
        if existing and not self.args.force:
            raise FileExistsError(f"output exists (use --force): {', '.join(existing)}")
        return paths

    def read(self, path) -> Path:
        path = Path(path)
        self.inputs[str(path)] = sha256_file(path)
        return path

    def wrote(self, path) -> None:
        self.outputs[Path(path).name] = sha256_file(path)

    def finish(self) -> RunManifest:
        manifest = RunManifest(self.argv, self.config, self.inputs, self.outputs,
                               getattr(self.args, "seed", None),
                               wall_time=time.perf_counter() - self.start)
        manifest.write(self.out)
        return manifest


def _save_checkpoint(run: _Run, params, path, role: str) -> None:
    save(Checkpoint(params, role=role), path)
    run.wrote(path)


def _load_params(run: _Run, path):
    return load(run.read(path)).params


def _load_corpus(run: _Run, directory) -> Corpus:
    directory = Path(directory)
    train = read_tasks(run.read(directory / "train.jsonl"))
    eval_ = read_tasks(run.read(directory / "eval.jsonl"))
    return Corpus(train, eval_, None)


def _split(run: _Run, directory, split: str):
    corpus = _load_corpus(run, directory)
    return corpus.train_tasks if split == "train" else corpus.eval_tasks


def _train_config(args, preset: str) -> TrainConfig:
    """Preset, then ``--config`` file, then explicit flags."""
    config = PRESETS[args.preset or preset]
    if args.config:
        try:
            config = parse_config_text(Path(args.config).read_text(), config)
        except ValueError as exc:
            raise UsageError(f"{args.config}: {exc}") from exc
    overrides = {key: getattr(args, key) for key in
                 ("epochs", "learning_rate", "batch_size", "warmup_ratio", "beta")
                 if getattr(args, key, None) is not None}
    try:
        return replace(config, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# -- commands ---------------------------------------------------------------


def cmd_gen_tasks(run: _Run) -> str:
    args = run.args
    train_path, eval_path = run.claim("train.jsonl", "eval.jsonl")
    corpus = generate_corpus(args.seed, args.n_train, args.n_eval)
    write_tasks(corpus.train_tasks, train_path)
    write_tasks(corpus.eval_tasks, eval_path)
    run.wrote(train_path)
    run.wrote(eval_path)
    run.config = {"n_train": args.n_train, "n_eval": args.n_eval}
    return f"train={len(corpus.train_tasks)} eval={len(corpus.eval_tasks)}"


def cmd_sft(run: _Run) -> str:
    args = run.args
    (ckpt_path,) = run.claim("model.ckpt")
    corpus = _load_corpus(run, args.tasks)
    config = _train_config(args, "desk-sft")
    model = ModelConfig(args.context_length, args.width, args.depth, args.heads)
    settings = DeskSettings(n_pretrain=args.n_pretrain, model=model, sft=config,
                            exclude_train_from_pretrain=not args.include_train)
    params = train_base(corpus, settings, args.seed)
    _save_checkpoint(run, params, ckpt_path, "policy")
    run.config = {"train": asdict(config), "model": asdict(model), "n_pretrain": args.n_pretrain,
                  "include_train": args.include_train, "model_id": params_digest(params)}
    return f"model_id={params_digest(params)} n_params={len(params.values)}"


def cmd_sample(run: _Run) -> str:
    args = run.args
    (records_path,) = run.claim("records.jsonl")
    params = _load_params(run, args.model)
    tasks = _split(run, args.tasks, args.split)
    records = collect_responses(params, tasks, args.k, args.temperature,
                                derive_seed("collect", args.seed))
    write_records(records, records_path)
    run.wrote(records_path)
    run.config = {"k": args.k, "temperature": args.temperature, "split": args.split,
                  "generator": params_digest(params)}
    passed = sum(r.rule_reward == 1.0 for r in records)
    return f"records={len(records)} passed={passed} generator={params_digest(params)}"


def _generator_of(records_path: Path) -> str:
    manifest = records_path.parent / MANIFEST
    if not manifest.exists():
        return ""
    return RunManifest.read(manifest).config.get("generator", "")


def cmd_build_pairs(run: _Run) -> str:
    args = run.args
    (pairs_path,) = run.claim("pairs.jsonl")
    records_path = run.read(args.records)
    if args.verify_provenance:
        _verify_manifest(records_path)
    records = read_records(records_path)
    generator = _generator_of(records_path)
    pairs = build_pairs(records, derive_seed("pairs", args.seed), generator)
    write_dataset(pairs, pairs_path)
    run.wrote(pairs_path)
    run.config = {"generator": generator}
    return f"pairs={len(pairs)} tasks={len({r.task_id for r in records})}"


def _verify_manifest(path: Path) -> None:
    """The file must be listed, with its current hash, in a sibling manifest."""
    manifest_path = path.parent / MANIFEST
    if not manifest_path.exists():
        raise ProvenanceError(f"{path}: no {MANIFEST} alongside")
    recorded = RunManifest.read(manifest_path).outputs.get(path.name)
    if recorded != sha256_file(path):
        raise ProvenanceError(f"{path}: hash does not match {manifest_path}")


def _load_pairs(run: _Run, policy, allow_off_policy: bool):
    pairs_path = run.read(run.args.pairs)
    if run.args.verify_provenance:
        _verify_manifest(pairs_path)
    pairs = read_dataset(pairs_path)
    if not pairs:
        raise ValueError(f"{pairs_path}: no pairs")
    generators = {p.meta.generator for p in pairs}
    policy_id = params_digest(policy)
    on_policy = generators == {policy_id}
    if not on_policy and not allow_off_policy:
        raise ProvenanceError(f"pairs generated by {sorted(generators)} but policy is {policy_id};"
                              " pass --allow-off-policy to train on them anyway")
    return pairs, on_policy


def _check_checkpoint_inputs(run: _Run, *paths) -> None:
    if run.args.verify_provenance:
        for path in paths:
            _verify_manifest(Path(path))


def cmd_train_rft(run: _Run) -> str:
    args = run.args
    (ckpt_path,) = run.claim("model.ckpt")
    _check_checkpoint_inputs(run, args.policy)
    policy = _load_params(run, args.policy)
    pairs, on_policy = _load_pairs(run, policy, args.allow_off_policy)
    config = replace(_train_config(args, "desk"), seed=derive_seed("align", args.seed))
    params, report = rft(policy, pairs, config)
    _save_checkpoint(run, params, ckpt_path, "policy")
    run.config = {"train": asdict(config), "on_policy": on_policy}
    return f"pairs={len(pairs)} steps={report.steps} final_loss={report.final_loss:.6f}"


def cmd_train_dpo(run: _Run) -> str:
    args = run.args
    (ckpt_path,) = run.claim("model.ckpt")
    ref_path = args.ref or args.policy
    _check_checkpoint_inputs(run, args.policy, ref_path)
    policy = _load_params(run, args.policy)
    ref = _load_params(run, ref_path)
    pairs, on_policy = _load_pairs(run, policy, args.allow_off_policy)
    config = replace(_train_config(args, "desk"), seed=derive_seed("align", args.seed))
    params, report = dpo(policy, ref, pairs, config)
    _save_checkpoint(run, params, ckpt_path, "policy")
    run.config = {"train": asdict(config), "on_policy": on_policy}
    return f"pairs={len(pairs)} steps={report.steps} final_loss={report.final_loss:.6f}"


def cmd_eval(run: _Run) -> str:
    args = run.args
    (report_path,) = run.claim("eval.json")
    params = _load_params(run, args.model)
    report = evaluate(params, _split(run, args.tasks, args.split))
    write_report(report, report_path)
    run.wrote(report_path)
    run.config = {"split": args.split}
    return (f"pass1_public={report.pass1_public:.4f} pass1_all={report.pass1_all:.4f} "
            f"n_tasks={report.n_tasks}")


def cmd_margins(run: _Run) -> str:
    args = run.args
    (report_path,) = run.claim("margins.json")
    policy = _load_params(run, args.policy)
    ref = _load_params(run, args.ref)
    records = read_records(run.read(args.records))
    report = margin_report(policy, ref, records, args.beta)
    write_report(report, report_path)
    run.wrote(report_path)
    run.config = {"beta": args.beta}
    corr = "undefined" if report.correlation is None else f"{report.correlation:.4f}"
    return f"correlation={corr} pairs={len(report.pairs)}"


def _experiment(run: _Run, off_policy: bool) -> str:
    args = run.args
    name = "swap.json" if off_policy else "compare.json"
    (report_path,) = run.claim(name)
    model = ModelConfig(args.context_length, args.width, args.depth, args.heads)
    settings = DeskSettings(n_train=args.n_train, n_eval=args.n_eval, n_pretrain=args.n_pretrain,
                            k=args.k, temperature=args.temperature, model=model,
                            align=_train_config(args, "desk"))
    results = run_seeds(args.seeds, settings, margins=not off_policy, off_policy=off_policy)
    summary = summarize(results)
    report = {"seeds": [r.row() for r in results], "median": summary}
    write_report(report, report_path)
    run.wrote(report_path)
    run.config = {"settings": asdict(settings), "seeds": args.seeds}
    keys = (["a_base", "a_on", "a_off", "b_base", "b_on", "b_off"] if off_policy
            else ["base", "rft", "dpo", "correlation"])
    return " ".join(f"{k}={summary[k]:.4f}" for k in keys if k in summary)


def cmd_compare(run: _Run) -> str:
    return _experiment(run, off_policy=False)


def cmd_swap(run: _Run) -> str:
    return _experiment(run, off_policy=True)


# -- argument parsing ---------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    if seed:
        p.add_argument("--seed", type=int, default=0)


def _add_train(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file of training settings")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--warmup-ratio", type=float)


def _add_model(p: argparse.ArgumentParser) -> None:
    default = ModelConfig()
    p.add_argument("--context-length", type=int, default=default.context_length)
    p.add_argument("--width", type=int, default=default.width)
    p.add_argument("--depth", type=int, default=default.depth)
    p.add_argument("--heads", type=int, default=default.heads)
    p.add_argument("--n-pretrain", type=int, default=DeskSettings.n_pretrain)


def _seed_list(text: str) -> list[int]:
    try:
        if "-" in text.strip("-"):
            lo, hi = text.split("-")
            return list(range(int(lo), int(hi) + 1))
        return [int(s) for s in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exdpo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-tasks", help="generate train/eval task files")
    _add_common(p)
    p.add_argument("--n-train", type=int, default=300)
    p.add_argument("--n-eval", type=int, default=100)
    p.set_defaults(func=cmd_gen_tasks)

    p = sub.add_parser("sft", help="supervised warm-up producing the base model")
    _add_common(p)
    p.add_argument("--tasks", required=True, help="directory from gen-tasks")
    p.add_argument("--include-train", action="store_true",
                   help="allow train-task functions in the warm-up pool")
    _add_model(p)
    _add_train(p)
    p.set_defaults(func=cmd_sft)

    p = sub.add_parser("sample", help="sample and execute k responses per task")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--temperature", type=float, default=DEFAULT_TEMPERATURE)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("build-pairs", help="one preference pair per mixed-verdict task")
    _add_common(p)
    p.add_argument("--records", required=True)
    p.add_argument("--verify-provenance", action="store_true")
    p.set_defaults(func=cmd_build_pairs)

    for name, func, help_text in (("train-rft", cmd_train_rft, "fine-tune on chosen responses"),
                                  ("train-dpo", cmd_train_dpo, "DPO on preference pairs")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.add_argument("--policy", required=True)
        if name == "train-dpo":
            p.add_argument("--ref", help="reference checkpoint (default: --policy)")
            p.add_argument("--beta", type=float, default=0.1)
        p.add_argument("--pairs", required=True)
        p.add_argument("--verify-provenance", action="store_true",
                       help="check input hashes against their manifests")
        p.add_argument("--allow-off-policy", action="store_true",
                       help="train on pairs sampled from a different checkpoint")
        _add_train(p)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="greedy pass@1")
    _add_common(p, seed=False)
    p.add_argument("--model", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("margins", help="implicit vs rule reward among rejected responses")
    _add_common(p, seed=False)
    p.add_argument("--policy", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--beta", type=float, default=0.1)
    p.set_defaults(func=cmd_margins)

    for name, func, help_text in (("compare", cmd_compare, "base vs RFT vs DPO over seeds"),
                                  ("swap", cmd_swap, "on- vs off-policy DPO with swapped pair data")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p, seed=False)
        p.add_argument("--seeds", type=_seed_list, default=[1, 2, 3, 4, 5],
                       help="comma list or inclusive range, e.g. 1-5")
        p.add_argument("--n-train", type=int, default=300)
        p.add_argument("--n-eval", type=int, default=100)
        p.add_argument("--k", type=int, default=DEFAULT_K)
        p.add_argument("--temperature", type=float, default=DEFAULT_TEMPERATURE)
        p.add_argument("--beta", type=float)
        _add_model(p)
        _add_train(p)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    run = _Run(args, ["exdpo", *argv], Path(args.out))
    try:
        summary = args.func(run)
        run.finish()
    except UsageError as exc:
        print(f"exdpo {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ProvenanceError as exc:
        print(f"exdpo {args.command}: provenance mismatch: {exc}", file=sys.stderr)
        return EXIT_PROVENANCE
    except Exception as exc:  # noqa: BLE001 - every other failure is exit 1
        log.debug("failure", exc_info=True)
        print(f"exdpo {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"{args.command} {summary}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
