"""Command line entry point: ``scenecomp <command> [options]``.

Commands: gen-data, train-decoder, train, sample, eval, ablate, inspect.

A config file (``--config``) is JSON with one object per section:
``data``, ``decoder``, ``train``, ``sample``, ``eval``. Each command reads the
sections it needs; flags override config values. Unknown sections or keys are
rejected with one diagnostic line per field. Every command writes
``manifest.json`` into its output directory with the resolved config and a
content hash of its inputs and outputs. Manifests carry no timestamps, so equal
inputs give byte-identical run directories.

``SCENECOMP_WORKERS`` sets the thread count for per-scene sampling and evaluation.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import numerics as nx
from . import sampler as sp
from . import synth
from . import trainer as tr
from .evaluation import metrics as M
from .model import ABLATION_FLAGS, GROUPS, TRAINABLE_SETS, ModelConfig, SceneModel

WORKERS_ENV = "SCENECOMP_WORKERS"
CORPUS_FILE = "corpus.bin"


class ConfigError(ValueError):
    """Config validation failure; ``errors`` holds one message per offending field."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# -- config sections -------------------------------------------------------------

@dataclasses.dataclass
class DataConfig:
    seed: int = 0
    scenes: int = 100
    min_assets: int = 1
    max_assets: int = synth.MAX_ASSETS
    views: int = 1
    layout: str = "scatter"

    def __post_init__(self):
        if self.scenes < 1:
            raise ValueError("scenes must be >= 1")
        if not 1 <= self.min_assets <= self.max_assets <= synth.MAX_ASSETS:
            raise ValueError(f"need 1 <= min_assets <= max_assets <= {synth.MAX_ASSETS}")
        if self.views < 1:
            raise ValueError("views must be >= 1")


@dataclasses.dataclass
class DecoderConfig:
    steps: int = 300
    lr: float = 3e-3
    noise: float = 0.3
    batch: int = 4
    seed: int = 0
    max_shapes: int = 256
    scale_min: float = 0.5
    scale_max: float = 4.0

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1 or self.max_shapes < 1:
            raise ValueError("steps, batch and max_shapes must be >= 1")
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError("need 0 < scale_min <= scale_max")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclasses.dataclass
class SampleSection:
    steps: int = 25
    cfg_weight: float = 5.0
    seed: int = 0
    fusion: str = "pose"
    reference_view: int = 0
    views: int = 1

    def __post_init__(self):
        if self.views < 1:
            raise ValueError("views must be >= 1")
        self.sample_config()

    def sample_config(self) -> sp.SampleConfig:
        return sp.SampleConfig(self.steps, self.cfg_weight, self.seed, self.fusion, self.reference_view)


SECTIONS = {"data": DataConfig, "decoder": DecoderConfig, "train": tr.TrainConfig, "sample": SampleSection,
            "eval": M.EvalConfig}


def _type_error(default, value) -> str | None:
    if isinstance(default, bool):
        return None if isinstance(value, bool) else "expected a boolean"
    if isinstance(default, int):
        return None if isinstance(value, int) and not isinstance(value, bool) else "expected an integer"
    if isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        return None if ok else "expected a number"
    if isinstance(default, str):
        return None if isinstance(value, str) else "expected a string"
    if isinstance(default, (tuple, list)):
        return None if isinstance(value, list) else "expected a list"
    if isinstance(default, dict):
        return None if isinstance(value, dict) else "expected an object"
    return None


def _defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def check_fields(section: str, cls, values: dict) -> list[str]:
    """Field-level diagnostics for one section (unknown keys and wrong value types)."""
    if not isinstance(values, dict):
        return [f"{section}: expected an object"]
    defaults = _defaults(cls)
    errors = []
    for key in sorted(values):
        if key not in defaults:
            errors.append(f"{section}.{key}: unknown key (allowed: {', '.join(sorted(defaults))})")
            continue
        msg = _type_error(defaults[key], values[key])
        if msg:
            errors.append(f"{section}.{key}: {msg}, got {json.dumps(values[key])}")
    if cls is tr.TrainConfig and isinstance(values.get("model"), dict):
        errors += check_fields(f"{section}.model", ModelConfig, values["model"])
    return errors


def build_section(section: str, values: dict):
    cls = SECTIONS[section]
    errors = check_fields(section, cls, values)
    if errors:
        raise ConfigError(errors)
    try:
        obj = cls(**values)
        if cls is tr.TrainConfig:
            obj.model_config()
    except (TypeError, ValueError) as e:
        raise ConfigError([f"{section}: {e}"]) from None
    return obj


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError([f"config: file not found: {path}"]) from None
    except json.JSONDecodeError as e:
        raise ConfigError([f"config: invalid JSON ({e})"]) from None
    if not isinstance(raw, dict):
        raise ConfigError(["config: top level must be an object"])
    bad = sorted(set(raw) - set(SECTIONS))
    if bad:
        raise ConfigError([f"config.{k}: unknown section (allowed: {', '.join(SECTIONS)})" for k in bad])
    return raw


def section(cfg: dict, name: str, **overrides):
    values = dict(cfg.get(name, {}))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return build_section(name, values)


def to_dict(obj) -> dict:
    d = dataclasses.asdict(obj)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# -- manifests -------------------------------------------------------------------

def _files(path: Path):
    if path.is_file():
        yield path.name, path
    elif path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file() and p.name not in ("manifest.json", "timing.json"):
                yield p.relative_to(path).as_posix(), p


def content_hash(paths) -> str:
    """sha256 over (relative name, length, bytes) of every file under the given paths."""
    h = hashlib.sha256()
    for root in paths:
        root = Path(root)
        for name, p in _files(root):
            data = p.read_bytes()
            h.update(f"{name}\0{len(data)}\0".encode())
            h.update(data)
    return h.hexdigest()


def write_manifest(out: Path, command: str, config: dict, inputs: dict, extra: dict | None = None) -> Path:
    from . import __version__
    out.mkdir(parents=True, exist_ok=True)
    man = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": {k: {"path": str(v), "sha256": content_hash([v])} for k, v in inputs.items() if v is not None},
        "outputs_sha256": content_hash([out]),
    }
    man.update(extra or {})
    path = out / "manifest.json"
    path.write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")
    return path


# -- helpers ---------------------------------------------------------------------

def workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError([f"{WORKERS_ENV}: expected an integer, got {raw!r}"]) from None
    if n < 1:
        raise ConfigError([f"{WORKERS_ENV}: must be >= 1"])
    return n


def pmap(fn, items):
    n = workers()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as ex:
        return list(ex.map(fn, items))


def corpus_path(path) -> Path:
    p = Path(path)
    return p / CORPUS_FILE if p.is_dir() else p


def read_scenes(path, limit: int | None = None) -> list[synth.SceneSample]:
    reader = synth.CorpusReader(corpus_path(path))
    n = len(reader) if limit is None else min(limit, len(reader))
    return [reader[i] for i in range(n)]


def scene_dirs(pred) -> list[Path]:
    dirs = sorted(p for p in Path(pred).iterdir() if p.is_dir() and (p / "poses.json").exists())
    if not dirs:
        raise FileNotFoundError(f"no scene bundles under {pred}")
    return dirs


def resolve_checkpoint(path) -> Path:
    p = Path(path)
    return p / "weights.sckp" if p.is_dir() else p


def _parse_flags(text):
    if text is None:
        return None
    names = [n.strip() for n in text.split(",") if n.strip()]
    bad = [n for n in names if n not in ABLATION_FLAGS]
    if bad:
        raise ConfigError([f"--flags: unknown ablation flag {n!r} (allowed: {', '.join(ABLATION_FLAGS)})"
                           for n in bad])
    return names


# -- commands --------------------------------------------------------------------

def cmd_gen_data(args, cfg) -> int:
    dc = section(cfg, "data", seed=args.seed, scenes=args.scenes, views=args.views)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = synth.write_corpus(synth.generate_corpus(dc.seed, dc.scenes, dc.min_assets, dc.max_assets, dc.views,
                                                 dc.layout), out / CORPUS_FILE)
    write_manifest(out, "gen-data", {"data": to_dict(dc)}, {}, {"scenes": n})
    print(f"wrote {n} scenes to {out / CORPUS_FILE}")
    return 0


def cmd_train_decoder(args, cfg) -> int:
    dc = section(cfg, "decoder", seed=args.seed, steps=args.steps)
    occs = [o for s in read_scenes(args.data) for o in s.occupancies()][:dc.max_shapes]
    dec = tr.train_decoder(occs, dc.steps, dc.lr, dc.noise, dc.batch, dc.seed, (dc.scale_min, dc.scale_max))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ious = tr.decoder_iou(dec, occs)
    tr.save_decoder(dec, out / "decoder.sckp", {"decoder": to_dict(dc)})
    stats = {"shapes": len(occs), "iou_min": float(np.min(ious)), "iou_mean": float(np.mean(ious))}
    write_manifest(out, "train-decoder", {"decoder": to_dict(dc)}, {"data": corpus_path(args.data)}, stats)
    print(json.dumps(stats))
    return 0


def _train_config(cfg, args, **extra) -> tr.TrainConfig:
    over = {"seed": args.seed, "epochs": args.epochs}
    over.update(extra)
    return section(cfg, "train", **over)


def _train(tc: tr.TrainConfig, data, decoder_path, out: Path, init=None, resume=None) -> tr.Trainer:
    scenes = read_scenes(data)
    dec = tr.load_decoder(decoder_path)
    model = None
    if init is not None:
        with nx.default_dtype(tr._dtype(tc.dtype)):
            model, _ = tr.load_model(resolve_checkpoint(init), tr._dtype(tc.dtype))
    out.mkdir(parents=True, exist_ok=True)
    log = out / "log.jsonl"
    if resume is None and log.exists():
        log.unlink()
    T = tr.Trainer(tc, dec, scenes, model=model, log_path=log)
    if resume is not None:
        T.load(resume)
    T.fit(max(tc.epochs - T.epoch, 0))
    T.save(out / "ckpt")
    tr.save_model(T.model, out / "model.sckp", {"train": tc.to_dict()})
    return T


def cmd_train(args, cfg) -> int:
    tc = _train_config(cfg, args)
    out = Path(args.out)
    T = _train(tc, args.data, args.decoder, out, args.init, args.resume)
    inputs = {"data": corpus_path(args.data), "decoder": Path(args.decoder),
              "init": Path(args.init) if args.init else None}
    write_manifest(out, "train", {"train": tc.to_dict()}, inputs, {"steps": T.step, "epochs": T.epoch})
    print(f"trained {T.step} steps over {T.epoch} epochs; checkpoint in {out / 'ckpt'}")
    return 0


def _sample_all(model, decoder, scenes, sc: SampleSection, out: Path) -> list[Path]:
    base = sc.sample_config()

    def one(item):
        i, s = item
        c = dataclasses.replace(base, seed=base.seed + i)
        k = min(sc.views, s.n_views)
        if k > 1:
            res = sp.sample_scene_multiview(model, s.views[:k], s.masks[:k], c, decoder=decoder)
        else:
            res = sp.sample_scene(model, model.encode(s.views[:1], s.masks[:1]), c, decoder=decoder)
        return sp.write_scene_bundle(res, out / f"scene_{i:04d}", decoder, {**to_dict(sc), "seed": c.seed})

    return pmap(one, list(enumerate(scenes)))


def cmd_sample(args, cfg) -> int:
    sc = section(cfg, "sample", seed=args.seed, steps=args.steps, cfg_weight=args.cfg_weight, views=args.views)
    model, _ = tr.load_model(resolve_checkpoint(args.model))
    dec = tr.load_decoder(args.decoder)
    scenes = read_scenes(args.data, args.scenes)
    out = Path(args.out)
    dirs = _sample_all(model, dec, scenes, sc, out)
    inputs = {"model": resolve_checkpoint(args.model), "decoder": Path(args.decoder), "data": corpus_path(args.data)}
    write_manifest(out, "sample", {"sample": to_dict(sc)}, inputs, {"scenes": len(dirs)})
    print(f"sampled {len(dirs)} scenes into {out}")
    return 0


def _evaluate(pred, gt, ec: M.EvalConfig) -> list[M.MetricReport]:
    dirs = scene_dirs(pred)
    scenes = read_scenes(gt, len(dirs))
    if len(scenes) < len(dirs):
        raise ValueError(f"{len(dirs)} predicted scenes but only {len(scenes)} ground-truth scenes")

    def one(item):
        d, s = item
        return M.evaluate_scene(M.SceneGeometry.from_bundle(d), M.SceneGeometry.from_sample(s), ec, name=d.name)

    return pmap(one, list(zip(dirs, scenes)))


def cmd_eval(args, cfg) -> int:
    if args.from_manifest:
        man = json.loads(Path(args.from_manifest).read_text())
        if man.get("command") != "eval":
            raise ConfigError([f"--from-manifest: {args.from_manifest} is not an eval manifest"])
        cfg = {"eval": man["config"]["eval"]}
        args.pred, args.gt = man["inputs"]["pred"]["path"], man["inputs"]["gt"]["path"]
        args.markdown = args.markdown or man.get("markdown", False)
    if not args.pred or not args.gt:
        raise ConfigError(["eval: --pred and --gt are required (or --from-manifest)"])
    ec = section(cfg, "eval", seed=args.seed, tau=args.tau, registration=args.registration)
    reports = _evaluate(args.pred, args.gt, ec)
    out = Path(args.out)
    M.write_reports(reports, out, markdown=args.markdown)
    write_manifest(out, "eval", {"eval": to_dict(ec)}, {"pred": Path(args.pred), "gt": corpus_path(args.gt)},
                   {"scenes": len(reports), "markdown": bool(args.markdown)})
    print(json.dumps(M.mean_summary(reports)))
    return 0


ABLATION_LABELS = {"drop_geo": "global geometric features", "drop_global_v": "global visual features",
                   "drop_mask": "mask visual features", "ss_to_as": "scene-level self-attention"}


def ablation_variants(flags) -> list[tuple[str, list[str]]]:
    """The full model, then each listed component removed on top of the previous ones."""
    out = [("full", [])]
    for k in range(1, len(flags) + 1):
        out.append(("-" + ",".join(flags[:k]), list(flags[:k])))
    return out


def ablation_table(rows: dict, flags: dict) -> str:
    lead = {label: {ABLATION_LABELS[f]: ("✗" if f in on else "✓") for f in ABLATION_FLAGS}
            for label, on in flags.items()}
    return M.markdown_table(rows, lead)


def cmd_ablate(args, cfg) -> int:
    names = _parse_flags(args.flags) or list(ABLATION_FLAGS)
    tc0 = _train_config(cfg, args)
    sc = section(cfg, "sample", steps=args.steps, cfg_weight=args.cfg_weight)
    ec = section(cfg, "eval", tau=args.tau, registration=args.registration)
    out = Path(args.out)
    rows, flags, per = {}, {}, {}
    for label, on in ablation_variants(names):
        vdir = out / ("variant_" + ("full" if not on else "_".join(on)))
        tc = dataclasses.replace(tc0, **{f: f in on for f in ABLATION_FLAGS})
        T = _train(tc, args.data, args.decoder, vdir / "train")
        scenes = read_scenes(args.eval_data or args.data, args.scenes)
        _sample_all(T.model, T.decoder, scenes, sc, vdir / "samples")
        reports = _evaluate(vdir / "samples", args.eval_data or args.data, ec)
        M.write_reports(reports, vdir / "eval")
        rows[label] = M.mean_summary(reports)
        flags[label] = on
        per[label] = {"flags": on, "dir": vdir.name, "metrics": rows[label]}
    (out / "ablation.json").write_text(json.dumps(per, indent=1, sort_keys=True))
    table = ablation_table(rows, flags)
    (out / "ablation.md").write_text(table)
    inputs = {"data": corpus_path(args.data), "decoder": Path(args.decoder),
              "eval_data": corpus_path(args.eval_data) if args.eval_data else None}
    write_manifest(out, "ablate", {"train": tc0.to_dict(), "sample": to_dict(sc), "eval": to_dict(ec),
                                   "flags": names}, inputs)
    print(table, end="")
    return 0


def inspect_model(model: SceneModel) -> dict:
    groups = {}
    for g, ps in model.groups().items():
        groups[g] = {"params": int(sum(p.data.size for _, p in ps)),
                     "trainable": int(sum(p.data.size for _, p in ps if p.requires_grad))}
    return {
        "config": model.cfg.to_dict(),
        "flags": model.flags.names(),
        "groups": groups,
        "total": sum(v["params"] for v in groups.values()),
        "trainable_total": sum(v["trainable"] for v in groups.values()),
        "trainable_groups": [g for g in GROUPS if groups[g]["trainable"] > 0],
        "frozen_groups": [g for g in GROUPS if groups[g]["trainable"] == 0],
    }


def cmd_inspect(args, cfg) -> int:
    if args.checkpoint:
        model, meta = tr.load_model(resolve_checkpoint(args.checkpoint))
    else:
        tc = section(cfg, "train")
        with nx.default_dtype(np.float32):
            model = SceneModel(tc.model_config(), tc.flags)
        model.set_trainable(args.trainable or tc.trainable)
    if args.checkpoint and args.trainable:
        model.set_trainable(args.trainable)
    print(json.dumps(inspect_model(model), indent=1))
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scenecomp", description="Compositional scene generation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp_, out=True):
        sp_.add_argument("--config", help="JSON config file with per-section settings")
        sp_.add_argument("--seed", type=int)
        if out:
            sp_.add_argument("--out", required=True, help="output run directory")

    g = sub.add_parser("gen-data", help="generate a synthetic scene corpus")
    common(g)
    g.add_argument("--scenes", type=int)
    g.add_argument("--views", type=int)

    d = sub.add_parser("train-decoder", help="fit the structure decoder on corpus shapes")
    common(d)
    d.add_argument("--data", required=True)
    d.add_argument("--steps", type=int)

    t = sub.add_parser("train", help="train the scene generator")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--decoder", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--init", help="start from this model checkpoint")
    t.add_argument("--resume", help="resume from a trainer checkpoint directory")

    s = sub.add_parser("sample", help="sample scenes for the corpus inputs")
    common(s)
    s.add_argument("--model", required=True)
    s.add_argument("--decoder", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--views", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--cfg-weight", type=float)
    s.add_argument("--scenes", type=int, help="only the first N scenes")

    e = sub.add_parser("eval", help="score sampled scenes against ground truth")
    common(e)
    e.add_argument("--pred")
    e.add_argument("--gt")
    e.add_argument("--tau", type=float)
    e.add_argument("--registration", choices=sorted(M.REGISTRATIONS))
    e.add_argument("--markdown", action="store_true")
    e.add_argument("--from-manifest", help="repeat the evaluation recorded in an eval manifest")

    a = sub.add_parser("ablate", help="train, sample and score ablation variants")
    common(a)
    a.add_argument("--data", required=True)
    a.add_argument("--decoder", required=True)
    a.add_argument("--eval-data")
    a.add_argument("--flags", help="comma-separated: " + ",".join(ABLATION_FLAGS))
    a.add_argument("--epochs", type=int)
    a.add_argument("--steps", type=int)
    a.add_argument("--cfg-weight", type=float)
    a.add_argument("--tau", type=float)
    a.add_argument("--registration", choices=sorted(M.REGISTRATIONS))
    a.add_argument("--scenes", type=int)

    i = sub.add_parser("inspect", help="parameter counts and trainable split of a checkpoint")
    common(i, out=False)
    i.add_argument("checkpoint", nargs="?", help="model checkpoint (omit for a fresh model)")
    i.add_argument("--trainable", choices=sorted(TRAINABLE_SETS))
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train-decoder": cmd_train_decoder, "train": cmd_train,
            "sample": cmd_sample, "eval": cmd_eval, "ablate": cmd_ablate, "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        for msg in e.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return 2
    except (nx.CheckpointFormatError, synth.CorpusFormatError, KeyError, FileNotFoundError, ValueError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
