"""Command-line entry point: ``ulda {train,eval,diagnose,preview,pack}``.

Heavy imports happen after argument parsing so that ``--threads`` can cap
the BLAS thread pool before numpy loads.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

COMMANDS = ("train", "eval", "diagnose", "preview", "pack")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_PRESET = 4
EXIT_DATA = 5
EXIT_CHECKPOINT = 6
EXIT_ABORTED = 7


class CliError(Exception):
    def __init__(self, code, kind, message):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _flag_map():
    # flag dest -> config key
    return {
        "seed": "seed",
        "threads": "threads",
        "data": "data.root",
        "n_way": "episode.n_way",
        "k_shot": "episode.k_shot",
        "m_query": "episode.m_query",
        "episodes_per_epoch": "episode.episodes_per_epoch",
        "epochs": "train.epochs",
        "aug_support": "aug.support",
        "aug_query": "aug.query",
        "gamma": "train.gamma",
        "pairs": "diagnose.pairs",
    }


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--out", default=os.environ.get("ULDA_OUT"), help="output directory (default $ULDA_OUT)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads; 1 is fully sequential")
    common.add_argument("--data", help="dataset root (omit for the synthetic corpus)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("--n-way", type=int)
    common.add_argument("--k-shot", type=int)
    common.add_argument("--m-query", type=int)
    common.add_argument("--episodes-per-epoch", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--aug-support", metavar="PRESET")
    common.add_argument("--aug-query", metavar="PRESET")
    common.add_argument("--gamma", type=float)
    common.add_argument("--eq5-literal", action="store_true", help="score classes by the literal distance ratio")
    common.add_argument("--paper-protocol", action="store_true", help="evaluate 5 x 1000 episodes")
    common.add_argument("--checkpoint", help="model checkpoint to load")
    common.add_argument("--pairs", help="diagnose pairs, e.g. TA:TA,AA:R+TA")
    common.add_argument("--dump-episode", type=int, metavar="Z", help="preview: write episode Z of epoch 0")
    common.add_argument("--src", help="pack: directory tree to convert")

    parser = argparse.ArgumentParser(prog="ulda", description="Unsupervised few-shot learning with diverse augmentation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _limit_threads(n):
    if n is None or "numpy" in sys.modules:
        return
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def resolve_config(args):
    from . import config as C

    cfg = C.defaults()
    if args.config:
        cfg.update(C.load(args.config))
    for item in args.set:
        if "=" not in item:
            raise C.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg[k.strip()] = C.parse_value(k.strip(), v)
    for dest, key in _flag_map().items():
        v = getattr(args, dest, None)
        if v is not None:
            cfg[key] = C.parse_value(key, str(v))
    if args.eq5_literal:
        cfg["train.eq5_literal"] = True
    if args.paper_protocol:
        cfg["eval.episodes"] = 1000
        cfg["eval.repeats"] = 5
    return cfg


def _train_config(cfg):
    from .config import parse_lr_factors
    from .episodes import EpisodeConfig
    from .trainer import TrainConfig

    return TrainConfig(
        epochs=cfg["train.epochs"],
        episode=EpisodeConfig(cfg["episode.n_way"], cfg["episode.k_shot"], cfg["episode.m_query"],
                              cfg["episode.episodes_per_epoch"]),
        initial_lr=cfg["train.initial_lr"],
        lr_factors=parse_lr_factors(cfg["train.lr_factors"]),
        lr_mode=cfg["train.lr_mode"],
        gamma=cfg["train.gamma"],
        seed=cfg["seed"],
        aug_support=cfg["aug.support"],
        aug_query=cfg["aug.query"],
        alpha_sub=cfg["aug.alpha_sub"],
        alpha_add=cfg["aug.alpha_add"],
        filters=cfg["train.filters"],
        eq5_literal=cfg["train.eq5_literal"],
        eval_episodes=cfg["train.eval_episodes"],
        eval_n_way=cfg["eval.n_way"],
        eval_k_shot=cfg["eval.k_shot"],
        eval_m_query=cfg["eval.m_query"],
        record_wall_clock=cfg["train.record_wall_clock"],
    )


def load_data(cfg):
    """``(unlabeled train pool, labeled held-out set or None)``."""
    from . import data_io

    root = cfg["data.root"]
    if not root:
        size = cfg["data.synthetic.size"]
        return data_io.synthetic_splits(
            cfg["data.synthetic.train_classes"], cfg["data.synthetic.test_classes"],
            cfg["data.synthetic.per_class"], (1, size, size), cfg["data.synthetic.seed"],
        )
    pool = data_io.load_dataset(root, "train", as_labeled=False)
    held = None
    for split in ("val", "test"):
        if os.path.isfile(os.path.join(root, f"{split}.bin")) or os.path.isdir(os.path.join(root, split)):
            held = data_io.load_dataset(root, split, as_labeled=True)
            break
    return pool, held


def load_test(cfg):
    from . import data_io

    root = cfg["data.root"]
    if not root:
        return load_data(cfg)[1]
    return data_io.load_dataset(root, "test", as_labeled=True)


def _load_model(path):
    from .trainer import load_checkpoint

    if not path or not os.path.isfile(path):
        raise CliError(EXIT_CHECKPOINT, "checkpoint", f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _default_checkpoint(out):
    for name in ("best.bin", "last.bin"):
        p = os.path.join(out, name)
        if os.path.isfile(p):
            return p
    return None


def cmd_train(args, cfg, out):
    from .trainer import train

    tcfg = _train_config(cfg)
    pool, held = load_data(cfg)
    model, start = None, 0
    if args.checkpoint:
        model, meta = _load_model(args.checkpoint)
        start = meta["epoch"] + 1
    _, runlog = train(pool, tcfg, eval_set=held, out_dir=out, model=model, start_epoch=start)
    if not os.path.isfile(os.path.join(out, "runlog.csv")):
        runlog.write(os.path.join(out, "runlog.csv"))
    last = runlog.records[-1] if runlog.records else None
    if last is not None:
        print(f"trained {len(runlog)} epochs; final train_acc {last.train_acc:.4f}"
              + ("" if last.eval_acc is None else f" eval_acc {last.eval_acc:.4f}"))
    return EXIT_OK


def cmd_eval(args, cfg, out):
    from .evaluator import evaluate

    path = args.checkpoint or _default_checkpoint(out)
    model, _ = _load_model(path)
    if cfg["train.eq5_literal"]:
        model.eq5_literal = True
    test = load_test(cfg)
    report = evaluate(model, test, cfg["eval.n_way"], cfg["eval.k_shot"], cfg["eval.m_query"],
                      T=cfg["eval.episodes"], seed=cfg["seed"], repeats=cfg["eval.repeats"])
    report.write(os.path.join(out, "eval.json"))
    print(report.summary())
    return EXIT_OK


def cmd_diagnose(args, cfg, out):
    from .augment import resolve_preset
    from .config import parse_pairs
    from .diagnostics import diagnose_csv, diversity_report

    pairs = parse_pairs(cfg["diagnose.pairs"])
    pool, _ = load_data(cfg)
    size = pool.image_shape[-1]
    sets = [(resolve_preset(s, size, cfg["aug.alpha_sub"], cfg["aug.alpha_add"]),
             resolve_preset(q, size, cfg["aug.alpha_sub"], cfg["aug.alpha_add"])) for s, q in pairs]
    path = args.checkpoint or _default_checkpoint(out)
    if path:
        model, _ = _load_model(path)
    else:
        from .model import ProtoNet

        print("warning: no checkpoint; Fréchet distances use an untrained backbone", file=sys.stderr)
        model = ProtoNet(pool.image_shape, cfg["train.filters"], seed=cfg["seed"])
    reports = [diversity_report(pool, a_s, a_q, model, cfg["diagnose.samples"], cfg["seed"]) for a_s, a_q in sets]
    text = diagnose_csv(reports)
    with open(os.path.join(out, "diagnose.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_preview(args, cfg, out):
    import numpy as np

    from .augment import ATOMIC_PRESETS, apply_set, resolve_preset, to_display
    from .data_io import write_pnm
    from .episodes import EpisodeConfig, episode_seed, sample_episode
    from .trainer import epoch_seed

    pool, _ = load_data(cfg)
    size = pool.image_shape[-1]
    if args.dump_episode is not None:
        a_s = resolve_preset(cfg["aug.support"], size, cfg["aug.alpha_sub"], cfg["aug.alpha_add"])
        a_q = resolve_preset(cfg["aug.query"], size, cfg["aug.alpha_sub"], cfg["aug.alpha_add"])
        ecfg = EpisodeConfig(cfg["episode.n_way"], cfg["episode.k_shot"], cfg["episode.m_query"], 1)
        ep = sample_episode(pool, ecfg, a_s, a_q, episode_seed(epoch_seed(cfg["seed"], 0), args.dump_episode))
        for i, (img, lab) in enumerate(ep.support):
            write_pnm(os.path.join(out, f"episode{args.dump_episode}_support{i:02d}_y{lab}.pgm"), to_display(img))
        for i, (img, lab, rot) in enumerate(ep.query):
            tag = "" if rot is None else f"_r{rot}"
            write_pnm(os.path.join(out, f"episode{args.dump_episode}_query{i:02d}_y{lab}{tag}.pgm"), to_display(img))
        print(f"episode {args.dump_episode}: seed {ep.seed}, sources {list(ep.support_sources)}")
        return EXIT_OK
    rng = np.random.default_rng(cfg["seed"])
    picks = rng.choice(len(pool), size=min(4, len(pool)), replace=False)
    for name in ATOMIC_PRESETS:
        op_set = resolve_preset(name, size, cfg["aug.alpha_sub"], cfg["aug.alpha_add"])
        for i, src in enumerate(picks):
            partners = [pool.images[j] for j in picks if j != src]
            img, _ = apply_set(pool.images[src], op_set, np.random.default_rng([cfg["seed"], i]), partners)
            write_pnm(os.path.join(out, f"preview_{name}_{i}.pgm"), to_display(img))
    print(f"wrote {len(ATOMIC_PRESETS) * len(picks)} preview images to {out}")
    return EXIT_OK


def cmd_pack(args, cfg, out):
    from .data_io import pack_directory

    src = args.src or cfg["data.root"]
    if not src:
        raise CliError(EXIT_USAGE, "usage", "pack needs --src or --data pointing at a directory tree")
    for path in pack_directory(src, out):
        print(path)
    return EXIT_OK


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "diagnose": cmd_diagnose, "preview": cmd_preview, "pack": cmd_pack}


def _fail(code, kind, message):
    print(json.dumps({"error": kind, "exit": code, "message": str(message)}), file=sys.stderr)
    return code


def run(argv=None):
    args = build_parser().parse_args(argv)
    _limit_threads(args.threads)
    from .augment import resolve_preset
    from .autodiff import CheckpointError
    from .config import ConfigError, to_text
    from .data_io import DatasetError
    from .trainer import TrainingAborted

    try:
        if not args.out:
            raise CliError(EXIT_USAGE, "usage", "no output directory: pass --out or set ULDA_OUT")
        cfg = resolve_config(args)
        names = [cfg["aug.support"], cfg["aug.query"]]
        if args.command == "diagnose":
            from .config import parse_pairs

            names += [n for pair in parse_pairs(cfg["diagnose.pairs"]) for n in pair]
        for name in names:
            try:
                resolve_preset(name)
            except KeyError as exc:
                raise CliError(EXIT_PRESET, "preset", exc.args[0]) from None
        if args.command == "train" and cfg["train.gamma"] != 0 and not resolve_preset(cfg["aug.query"]).has_rotation:
            print(f"warning: query preset {cfg['aug.query']} has no rotation; gamma forced to 0", file=sys.stderr)
            cfg["train.gamma"] = 0.0
        os.makedirs(args.out, exist_ok=True)
        text = to_text(cfg)
        sys.stdout.write(text)
        sys.stdout.flush()
        if args.command == "train":
            with open(os.path.join(args.out, "config.txt"), "w", encoding="utf-8") as fh:
                fh.write(text)
        return HANDLERS[args.command](args, cfg, args.out)
    except CliError as exc:
        return _fail(exc.code, exc.kind, exc)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except CheckpointError as exc:
        return _fail(EXIT_CHECKPOINT, "checkpoint", exc)
    except DatasetError as exc:
        return _fail(EXIT_DATA, "data", exc)
    except TrainingAborted as exc:
        return _fail(EXIT_ABORTED, "aborted", exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, "invalid", exc)


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
