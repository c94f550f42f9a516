"""Command-line entry point: synthdata, train, decode, eval, ablate.

Every subcommand accepts ``--config FILE`` (a JSON object mapping option
names to values), ``--out DIR`` and ``--seed N``. Explicit flags override the
file, the file overrides built-in defaults, and the effective configuration is
echoed to ``DIR/effective_config.json``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .embeddings import Modality
from .inference import EvalReport, congruence_eval, decode_samples, score, zero_shot_eval
from .suite import Suite, SuiteSpec, build_suite, five_task_spec, zero_shot_spec
from .tasks import Record, Sample, TaskSpec, make_sample, read_corpus
from .trainer import (NonFiniteLoss, OptimizerState, TrainConfig, make_validator, run_ablation,
                      train)
from .transformer import CheckpointError, ModelConfig, init_hybrid, load_checkpoint
from .vocab import Vocabulary, decode

log = logging.getLogger("maskgen")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(Exception):
    """Bad configuration or input; maps to exit code 2."""


# ---------------------------------------------------------------------------
# option tables
# ---------------------------------------------------------------------------

def _bool(v: Any) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _names(v: Any) -> list[str]:
    if isinstance(v, str):
        return [x for x in v.split(",") if x]
    return [str(x) for x in v]


# name -> (type, default, help)
Option = tuple[Callable[[Any], Any], Any, str]

COMMON: dict[str, Option] = {
    "out": (str, None, "output directory (created if absent)"),
    "seed": (int, 0, "random seed"),
}

MODEL_OPTS: dict[str, Option] = {
    "layers": (int, 2, "transformer layers"),
    "heads": (int, 2, "attention heads"),
    "d_model": (int, 64, "model width"),
    "d_ff": (int, 256, "feed-forward width"),
    "max_positions": (int, 48, "positional table size"),
    "tie_output": (_bool, True, "tie the output projection to the token embeddings"),
}

TRAIN_OPTS: dict[str, Option] = {
    "data": (str, None, "directory written by synthdata"),
    "tasks": (_names, None, "comma-separated subset of the suite's tasks"),
    "lr": (float, 3e-4, "peak learning rate"),
    "warmup": (int, 200, "warm-up steps"),
    "steps": (int, 20000, "total optimizer steps"),
    "weight_decay": (float, 1e-4, "decoupled weight decay"),
    "validate_every": (int, 1000, "validation interval in steps (0 disables)"),
    "checkpoint_every": (int, 0, "intermediate checkpoint interval (0 disables)"),
    "log_every": (int, 1, "training-log interval in steps"),
}

COMMANDS: dict[str, dict[str, Option]] = {
    "synthdata": {
        "preset": (str, "five", "built-in suite: five | zeroshot"),
        "suite": (str, None, "suite description file (JSON); overrides --preset"),
        "size": (int, 550, "lines per task, held-out lines included"),
        "heldout": (int, 50, "held-out lines per task"),
    },
    "train": {
        **TRAIN_OPTS, **MODEL_OPTS,
        "init_text": (str, None, "checkpoint donating embeddings, stack and head"),
        "init_visual": (str, None, "checkpoint donating the visual projections"),
        "resume": (str, None, "checkpoint to resume from (its optimizer state sits next to it)"),
    },
    "decode": {
        "checkpoint": (str, None, "trained checkpoint"),
        "input": (str, None, "corpus: .jsonl records, or plain text with one source per line"),
        "task": (str, None, "take direction and modality from this registered task"),
        "src": (str, None, "source language"),
        "tgt": (str, None, "target language"),
        "zero_shot": (_bool, False, "allow a direction absent from the training registry"),
        "max_len": (int, None, "maximum emitted tokens per line"),
        "output": (str, "hypotheses.txt", "file name inside --out"),
    },
    "eval": {
        "hyp": (str, None, "hypotheses, one per line"),
        "ref": (str, None, "references, one per line"),
        "congruence": (_bool, False, "decode with true and deranged images (needs --checkpoint, --input)"),
        "zero_shot": (_bool, False, "zero-shot evaluation (needs --checkpoint, --input, --src, --tgt)"),
        "checkpoint": (str, None, "trained checkpoint"),
        "input": (str, None, "evaluation corpus (.jsonl)"),
        "task": (str, None, "registered task the corpus belongs to"),
        "src": (str, None, "source language"),
        "tgt": (str, None, "target language"),
        "direction": (str, "", "label written to the report"),
    },
    "ablate": {
        "mode": (str, None, "init | multitask"),
        **TRAIN_OPTS, **MODEL_OPTS,
        "text_ckpt": (str, None, "text-pretrained checkpoint"),
        "visual_ckpt": (str, None, "visual-pretrained checkpoint"),
    },
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskgen", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in COMMANDS.items():
        p = sub.add_parser(cmd)
        if cmd == "ablate":
            p.add_argument("mode_arg", nargs="?", metavar="MODE", help="init | multitask")
        p.add_argument("--config", help="JSON file mapping option names to values")
        for name, (conv, default, help_) in {**COMMON, **opts}.items():
            # values stay strings here; types are applied after merging with the file
            kw: dict[str, Any] = {"dest": name, "default": argparse.SUPPRESS,
                                  "help": f"{help_} (default: {default})"}
            if conv is _bool:
                kw.update(nargs="?", const=True)
            p.add_argument(_flag(name), **kw)
    return parser


def effective_config(command: str, args: Mapping[str, Any], config_path: str | None) -> dict[str, Any]:
    """Defaults, then the config file, then explicit flags; values coerced to their types."""
    opts = {**COMMON, **COMMANDS[command]}
    merged = {name: default for name, (_, default, _) in opts.items()}
    if config_path:
        try:
            raw = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {config_path} must hold a JSON object")
        for key, value in raw.items():
            name = key.replace("-", "_")
            if name not in opts:
                raise ConfigError(f"unknown option {key!r} in {config_path}")
            merged[name] = value
    merged.update({k: v for k, v in args.items() if k in opts})
    out = {}
    for name, value in merged.items():
        conv = opts[name][0]
        try:
            out[name] = None if value is None else conv(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"option {name}: {exc}") from None
    return out


def _require(cfg: Mapping[str, Any], *names: str) -> None:
    for n in names:
        if cfg.get(n) in (None, ""):
            raise ConfigError(f"missing required option: {n}")


def _out_dir(cfg: Mapping[str, Any], command: str) -> Path:
    _require(cfg, "out")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo = {"command": command, **cfg}
    (out / "effective_config.json").write_text(json.dumps(echo, indent=1, sort_keys=True) + "\n")
    return out


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _load_suite(data: str | None) -> Suite:
    if not data:
        raise ConfigError("missing required option: data")
    d = Path(data)
    if not (d / "suite.json").exists():
        raise ConfigError(f"data: {d} holds no suite.json (run synthdata first)")
    try:
        return Suite.read(d)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"data: cannot read suite in {d}: {exc}") from None


def _registry(suite: Suite, names: Sequence[str] | None) -> tuple[TaskSpec, ...]:
    """Trained tasks of the suite, optionally restricted to ``names``.

    A subset without the suite's reference task promotes its first member.
    """
    reg = suite.registry
    if not names:
        return reg
    known = {t.name: t for t in reg}
    missing = [n for n in names if n not in known]
    if missing:
        raise ConfigError(f"tasks: unknown or evaluation-only task(s) {missing}")
    chosen = [known[n] for n in names]
    if not any(t.reference for t in chosen):
        chosen[0] = dataclasses.replace(chosen[0], reference=True)
    return tuple(chosen)


def _model_config(cfg: Mapping[str, Any], suite: Suite) -> ModelConfig:
    try:
        return ModelConfig(layers=cfg["layers"], heads=cfg["heads"], d_model=cfg["d_model"],
                           d_ff=cfg["d_ff"], vocab_size=len(suite.vocab),
                           max_positions=cfg["max_positions"], d_v=suite.spec.feature_dim,
                           seed=cfg["seed"], tie_output=cfg["tie_output"])
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None


def _train_config(cfg: Mapping[str, Any], tasks: tuple[TaskSpec, ...]) -> TrainConfig:
    try:
        return TrainConfig(base_lr=cfg["lr"], warmup=cfg["warmup"], total_steps=cfg["steps"],
                           weight_decay=cfg["weight_decay"], seed=cfg["seed"],
                           validate_every=cfg["validate_every"],
                           checkpoint_every=cfg["checkpoint_every"], log_every=cfg["log_every"],
                           tasks=tasks)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None


def _checkpoint(path: str | None, option: str):
    if not path:
        raise ConfigError(f"missing required option: {option}")
    if not Path(path).exists():
        raise ConfigError(f"{option}: checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise ConfigError(f"{option}: {exc}") from None


def _vocab_of(meta: Mapping) -> Vocabulary:
    try:
        return Vocabulary(tuple(meta["vocab"]), tuple(meta["languages"]))
    except KeyError:
        raise ConfigError("checkpoint carries no vocabulary (not written by train)") from None


def _registry_of(meta: Mapping) -> tuple[TaskSpec, ...]:
    return tuple(TaskSpec.from_json(t) for t in meta.get("tasks", ()))


def _read_input(path: str | None) -> list[Record] | list[str]:
    if not path:
        raise ConfigError("missing required option: input")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"input: file not found: {path}")
    if p.suffix == ".jsonl":
        try:
            return read_corpus(p)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"input: {exc}") from None
    return p.read_text(encoding="utf-8").splitlines()


def _modality(record: Record | str) -> Modality:
    if isinstance(record, str):
        return Modality.TEXT_TO_TEXT
    if record.regions:
        return Modality.IMAGE_TEXT_TO_TEXT if record.src is not None else Modality.IMAGE_TO_TEXT
    return Modality.TEXT_TO_TEXT


def _resolve_direction(cfg: Mapping[str, Any], registry: Sequence[TaskSpec],
                       modality: Modality) -> tuple[str | None, str, Modality]:
    if cfg.get("task"):
        task = next((t for t in registry if t.name == cfg["task"]), None)
        if task is None:
            raise ConfigError(f"task: {cfg['task']!r} is not in the checkpoint's registry")
        return task.src_lang, task.tgt_lang, task.modality
    _require(cfg, "tgt")
    src = cfg.get("src") if modality.has_source else None
    if modality.has_source and not src:
        raise ConfigError("missing required option: src")
    return src, cfg["tgt"], modality


def _samples(lines: Sequence[Record] | Sequence[str], vocab: Vocabulary, task: TaskSpec,
             need_target: bool) -> list[Sample]:
    """Tokenise input lines under ``task``; decode-only input gets a dummy target."""
    out = []
    for line in lines:
        rec = line if isinstance(line, Record) else Record(task.name, line, "", None, {})
        if not need_target:
            rec = Record(rec.task, rec.src, rec.tgt or "", rec.regions, rec.meta)
        try:
            out.append(make_sample(rec, task, vocab))
        except ValueError as exc:
            raise ConfigError(f"input: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synthdata(cfg: Mapping[str, Any]) -> int:
    if cfg.get("suite"):
        try:
            obj = json.loads(Path(cfg["suite"]).read_text())
            spec = SuiteSpec.from_json({**obj, "seed": cfg["seed"]})
        except FileNotFoundError:
            raise ConfigError(f"suite: file not found: {cfg['suite']}") from None
        except (json.JSONDecodeError, ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"suite: invalid description: {exc}") from None
    else:
        presets = {"five": five_task_spec, "zeroshot": zero_shot_spec}
        if cfg["preset"] not in presets:
            raise ConfigError(f"preset: expected one of {sorted(presets)}, got {cfg['preset']!r}")
        try:
            spec = presets[cfg["preset"]](seed=cfg["seed"], size=cfg["size"], heldout=cfg["heldout"])
        except ValueError as exc:
            raise ConfigError(f"preset: {exc}") from None
    out = _out_dir(cfg, "synthdata")
    suite = build_suite(spec)
    suite.write(out)
    print((out / "stats.tsv").read_text(), end="")
    return EXIT_OK


def cmd_train(cfg: Mapping[str, Any]) -> int:
    suite = _load_suite(cfg["data"])
    tasks = _registry(suite, cfg["tasks"])
    model_cfg = _model_config(cfg, suite)
    train_cfg = _train_config(cfg, tasks)
    out = _out_dir(cfg, "train")

    state, start = None, 0
    if cfg["resume"]:
        params, saved_cfg, meta = _checkpoint(cfg["resume"], "resume")
        if saved_cfg != model_cfg:
            raise ConfigError("resume: checkpoint model config differs from the effective config")
        optim = Path(cfg["resume"] + ".optim.npz")
        if not optim.exists():
            raise ConfigError(f"resume: optimizer state not found: {optim}")
        state, start = OptimizerState.load(optim), int(meta.get("step", 0))
    else:
        text = _checkpoint(cfg["init_text"], "init_text")[0] if cfg["init_text"] else None
        visual = _checkpoint(cfg["init_visual"], "init_visual")[0] if cfg["init_visual"] else None
        try:
            params, manifest = init_hybrid(model_cfg, text, visual)
        except ValueError as exc:
            raise ConfigError(f"init: {exc}") from None
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    train_samples = suite.train_samples()
    heldout = suite.heldout_samples([t.name for t in tasks])
    meta = {"vocab": list(suite.vocab.tokens), "languages": list(suite.vocab.languages)}
    try:
        res = train(train_cfg, params, train_samples, out_dir=out, validator=make_validator(heldout),
                    state=state, start_step=start, checkpoint_meta=meta)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    final = [r for r in res.curves if r["step"] == res.steps]
    for r in final:
        print(f"{r['task']}: exact {r['exact']:.3f} BLEU {r['bleu']:.2f}")
    return EXIT_OK


def _decode_setup(cfg: Mapping[str, Any]):
    params, _, meta = _checkpoint(cfg["checkpoint"], "checkpoint")
    vocab = _vocab_of(meta)
    registry = _registry_of(meta)
    lines = _read_input(cfg["input"])
    modality = _modality(lines[0]) if lines else Modality.TEXT_TO_TEXT
    src, tgt, modality = _resolve_direction(cfg, registry, modality)
    try:
        vocab.spec_id(tgt)
    except KeyError:
        raise ConfigError(f"tgt: unknown target specifier for language {tgt!r}") from None
    if src is not None and src not in vocab.languages:
        raise ConfigError(f"src: unknown source language {src!r}")
    task = TaskSpec(cfg.get("task") or f"{src or 'im'}_{tgt}", modality, src, tgt, reference=True)
    seen = any(t.direction == task.direction and t.modality is modality for t in registry)
    return params, vocab, registry, lines, task, seen


def cmd_decode(cfg: Mapping[str, Any]) -> int:
    params, vocab, _, lines, task, seen = _decode_setup(cfg)
    if not seen and not cfg["zero_shot"]:
        raise ConfigError(f"direction {task.src_lang or 'image'}->{task.tgt_lang} ({task.modality.value}) "
                          "is absent from the checkpoint's training registry; pass --zero-shot to decode it")
    out = _out_dir(cfg, "decode")
    samples = _samples(lines, vocab, task, need_target=False)
    hyps = decode_samples(params, samples, cfg["max_len"])
    text = "".join(decode(h, vocab) + "\n" for h in hyps)
    (out / cfg["output"]).write_text(text, encoding="utf-8")
    return EXIT_OK


def _read_lines(path: str | None, option: str) -> list[str]:
    if not path:
        raise ConfigError(f"missing required option: {option}")
    try:
        return Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise ConfigError(f"{option}: file not found: {path}") from None


def cmd_eval(cfg: Mapping[str, Any]) -> int:
    if cfg["congruence"] and cfg["zero_shot"]:
        raise ConfigError("choose at most one of --congruence and --zero-shot")
    if cfg["congruence"] or cfg["zero_shot"]:
        params, vocab, registry, lines, task, seen = _decode_setup(cfg)
        if not all(isinstance(r, Record) for r in lines):
            raise ConfigError("input: model-based evaluation needs a .jsonl corpus with references")
        samples = _samples(lines, vocab, task, need_target=True)
        if cfg["congruence"]:
            if not task.modality.has_image:
                raise ConfigError("congruence: the corpus carries no images")
            # a checkpoint trained on text only decodes the same text either way
            uses_images = any(t.modality.has_image for t in registry)
            try:
                report = congruence_eval(params, samples, cfg["seed"], use_images=uses_images,
                                         direction=cfg["direction"] or task.name)
            except ValueError as exc:
                raise ConfigError(f"congruence: {exc}") from None
        else:
            if task.modality is not Modality.TEXT_TO_TEXT:
                raise ConfigError("zero-shot evaluation covers text-to-text directions")
            try:
                report = zero_shot_eval(params, (task.src_lang, task.tgt_lang), samples, registry, vocab)
            except ValueError as exc:
                raise ConfigError(f"zero-shot: {exc}") from None
    else:
        hyps, refs = _read_lines(cfg["hyp"], "hyp"), _read_lines(cfg["ref"], "ref")
        if len(hyps) != len(refs):
            raise ConfigError(f"length mismatch: {len(hyps)} hypotheses vs {len(refs)} references")
        b, e = score([h.split() for h in hyps], [r.split() for r in refs])
        report = EvalReport(cfg["direction"], b, e, len(refs))
    out = _out_dir(cfg, "eval")
    report.write(out / "report.json")
    print(report.summary())
    return EXIT_OK


def cmd_ablate(cfg: Mapping[str, Any]) -> int:
    mode = cfg["mode"]
    if mode not in ("init", "multitask"):
        raise ConfigError(f"mode: expected init or multitask, got {mode!r}")
    suite = _load_suite(cfg["data"])
    tasks = _registry(suite, cfg["tasks"])
    model_cfg = _model_config(cfg, suite)
    train_cfg = _train_config(cfg, tasks)
    if mode == "init":
        _require(cfg, "text_ckpt", "visual_ckpt")
    text = _checkpoint(cfg["text_ckpt"], "text_ckpt")[0] if cfg["text_ckpt"] else None
    visual = _checkpoint(cfg["visual_ckpt"], "visual_ckpt")[0] if cfg["visual_ckpt"] else None
    out = _out_dir(cfg, "ablate")
    try:
        report = run_ablation(mode, model_cfg, train_cfg, suite.train_samples(),
                              suite.heldout_samples([t.name for t in tasks]), text, visual, out)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        raise ConfigError(f"ablate: {exc}") from None
    rows = report.summary()
    print("step\t" + "\t".join(report.curves))
    for r in rows:
        print(f"{r['step']}\t" + "\t".join(f"{r[v]:.3f}" for v in report.curves))
    return EXIT_OK


HANDLERS = {"synthdata": cmd_synthdata, "train": cmd_train, "decode": cmd_decode,
            "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
    except SystemExit as exc:        # argparse usage errors exit with 2 already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.pop("verbose") else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    command = args.pop("command")
    config_path = args.pop("config", None)
    if command == "ablate":
        mode = args.pop("mode_arg", None)
        if mode is not None:
            args["mode"] = mode
    try:
        cfg = effective_config(command, args, config_path)
        return HANDLERS[command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
