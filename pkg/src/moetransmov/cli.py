"""Command-line entry point: ingest, classify, train, eval, ablate and synth.

Each command writes into its own output directory together with a
``manifest.json`` recording input and config hashes. ``--out`` defaults to
``$MOETRANSMOV_OUT/<command>`` (or ``runs/<command>``). A ``--config`` file of
``key=value`` lines overrides the matching flags.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import BASELINES, MajorityModel
from .dataio import (
    CheckIn,
    MalformedInputError,
    SynthSpec,
    filter_dataset,
    parse_foursquare,
    read_pois,
    read_sessions,
    sessionize,
    split_dataset,
    synth_corpus,
    write_id_map,
    write_pois,
    write_sessions,
)
from .evaluation import SUBSETS, MetricReport, evaluate, format_report, region_accuracy, write_region_rows
from .model import ModelConfig
from .regions import MeanShiftParams, RegionGrid, build_profiles, label_movements, write_profiles
from .training import (
    VARIANTS,
    TrainConfig,
    TrainingDiverged,
    build_variant,
    make_windows,
    train,
    write_loss_log,
)

log = logging.getLogger("moetransmov")

OUT_ENV = "MOETRANSMOV_OUT"
SESSIONS_FILE, POIS_FILE = "sessions.tsv", "pois.tsv"
MODEL_CHOICES = ("moe",) + tuple(BASELINES) + ("majority",)
# training-run fields that pin down the split and the architecture
RUN_FILE = "run.cfg"


class CommandError(Exception):
    pass


# ------------------------------------------------------------------ plumbing

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_inputs(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(x) for x in paths):
        h.update(p.name.encode())
        h.update(sha256_file(p).encode())
    return h.hexdigest()


def config_hash(args: argparse.Namespace) -> str:
    skip = {"func", "out", "config", "verbose"}
    items = sorted((k, str(v)) for k, v in vars(args).items() if k not in skip)
    return hashlib.sha256(repr(items).encode()).hexdigest()


def resolve_out(args: argparse.Namespace) -> Path:
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def finish(out: Path, args: argparse.Namespace, inputs, outputs, started: str) -> None:
    """Check every declared output and write the run manifest."""
    for name in outputs:
        p = out / name
        if not p.is_file() or p.stat().st_size == 0:
            raise CommandError(f"declared output {p} is missing or empty")
    manifest = {
        "command": args.command,
        "version": __version__,
        "seed": getattr(args, "seed", None),
        "config_hash": config_hash(args),
        "dataset_hash": hash_inputs(inputs) if inputs else None,
        "started": started,
        "finished": _now(),
        "outputs": {name: sha256_file(out / name) for name in sorted(outputs)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def apply_config_file(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    """``key=value`` lines (dashes or underscores) override parsed flags."""
    if not getattr(args, "config", None):
        return
    sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    actions = {a.dest: a for a in sub._actions}  # noqa: SLF001
    path = Path(args.config)
    if not path.is_file():
        raise CommandError(f"config file {path} not found")
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        dest = key.strip().replace("-", "_")
        if not sep or dest not in actions or dest in ("config", "help"):
            raise CommandError(f"{path}:{lineno}: unknown config key {key.strip()!r}")
        action = actions[dest]
        raw = raw.strip()
        if isinstance(action, argparse._StoreTrueAction):  # noqa: SLF001
            value = raw.lower() in ("1", "true", "yes")
        else:
            value = action.type(raw) if action.type else raw
        if action.choices is not None and value not in action.choices:
            raise CommandError(f"{path}:{lineno}: {key.strip()} must be one of {list(action.choices)}")
        setattr(args, dest, value)


def load_data_dir(path) -> tuple[list, list]:
    d = Path(path)
    for name in (SESSIONS_FILE, POIS_FILE):
        if not (d / name).is_file():
            raise CommandError(f"{d / name} not found")
    return read_sessions(d / SESSIONS_FILE), read_pois(d / POIS_FILE)


def model_config_from_args(args, poi_count: int, category_count: int, seed: int) -> ModelConfig:
    return ModelConfig(
        poi_count=poi_count,
        category_count=category_count,
        d_model=args.d_model,
        tf_layers=args.tf_layers,
        tf_heads=args.tf_heads,
        tf_ff=args.tf_ff,
        lstm_layers=args.lstm_layers,
        lstm_hidden=args.lstm_hidden,
        train_seq_len=args.seq_len,
        max_seq=max(500, args.seq_len),
        seed=seed,
    )


def build_predictor(kind: str, variant: str, cfg: ModelConfig):
    if kind == "moe":
        return build_variant(variant, cfg)
    return BASELINES[kind](cfg)


# ------------------------------------------------------------------ commands

def cmd_ingest(args) -> None:
    started = _now()
    src = Path(args.input)
    out = resolve_out(args)
    if args.format == "foursquare":
        if not src.is_file():
            raise CommandError(f"{src} not found")
        table = parse_foursquare(src)
        checkins, pois, inputs = table.checkins, table.pois, [src]
        write_id_map(out / "ids.tsv", table)
        extra = ["ids.tsv"]
    else:
        sessions, pois = load_data_dir(src)
        checkins = [CheckIn(s.user, p, t) for s in sessions for p, t in zip(s.poi_seq, s.time_seq)]
        inputs, extra = [src / SESSIONS_FILE, src / POIS_FILE], []
    sessions = filter_dataset(sessionize(checkins, args.gap_hours), args.min_len, args.min_sessions)
    if not sessions:
        log.warning("no sessions survive filtering")
    write_sessions(out / SESSIONS_FILE, sessions)
    write_pois(out / POIS_FILE, pois)
    log.info("%d sessions from %d check-ins", len(sessions), len(checkins))
    finish(out, args, inputs, [SESSIONS_FILE, POIS_FILE] + extra, started)


def cmd_classify(args) -> None:
    started = _now()
    sessions, pois = load_data_dir(args.sessions)
    out = resolve_out(args)
    grid = RegionGrid(args.cell_deg, (args.origin_lat, args.origin_lon))
    window_start = None
    if args.window_anchor == "dataset" and sessions:
        window_start = min(min(s.time_seq) for s in sessions)
    profiles = build_profiles(sessions, pois, grid, MeanShiftParams(bandwidth=args.bandwidth),
                              args.window_days, window_start)
    labeled = label_movements(sessions, profiles, pois, grid)
    write_sessions(out / SESSIONS_FILE, labeled)
    write_pois(out / POIS_FILE, pois)
    write_profiles(out / "profiles.tsv", profiles)
    n_fallback = sum(p.window_fallback for p in profiles.values())
    if n_fallback:
        log.info("%d users had no check-ins in the profiling window; used their full record", n_fallback)
    src = Path(args.sessions)
    finish(out, args, [src / SESSIONS_FILE, src / POIS_FILE], [SESSIONS_FILE, POIS_FILE, "profiles.tsv"], started)


def _split_windows(sessions, pois, args):
    split = split_dataset(sessions, args.train_fraction, seed=args.split_seed, pois=pois)
    return split, make_windows(split.train, args.seq_len, pois), make_windows(split.validation, args.seq_len, pois)


def cmd_train(args) -> None:
    started = _now()
    sessions, pois = load_data_dir(args.data)
    out = resolve_out(args)
    split, tr, va = _split_windows(sessions, pois, args)
    run = {k: getattr(args, k) for k in ("model", "variant", "seq_len", "train_fraction", "split_seed", "seed",
                                         "d_model", "tf_layers", "tf_heads", "tf_ff", "lstm_layers", "lstm_hidden")}
    (out / RUN_FILE).write_text("".join(f"{k}={v}\n" for k, v in run.items()), encoding="utf-8")
    outputs = [RUN_FILE]
    if args.model == "majority":
        MajorityModel.fit(tr, split.poi_count).save(out / "majority.tsv")
        outputs.append("majority.tsv")
    else:
        cfg = model_config_from_args(args, split.poi_count, split.category_count, args.seed)
        model = build_predictor(args.model, args.variant, cfg)
        tcfg = TrainConfig(batch_size=args.batch, lr=args.lr, max_epochs=args.epochs, patience=args.patience,
                           seq_len=args.seq_len, seed=args.seed, monitor=args.monitor)
        log.info("training %s (%s): %d params, %d train / %d validation windows",
                 args.model, args.variant, model.param_count(), len(tr), len(va))
        res = train(model, tr, va, tcfg)
        model.save(out / "model.ckpt")
        (out / "model.cfg").write_text(model.cfg.to_text(), encoding="utf-8")
        write_loss_log(out / "loss.tsv", res.log)
        log.info("best epoch %d (loss %.6f) of %d", res.best_epoch, res.best_loss, res.epochs_run)
        outputs += ["model.ckpt", "model.cfg", "loss.tsv"]
    src = Path(args.data)
    finish(out, args, [src / SESSIONS_FILE, src / POIS_FILE], outputs, started)


def _read_run(ckpt_dir: Path) -> dict:
    path = ckpt_dir / RUN_FILE
    if not path.is_file():
        raise CommandError(f"{path} not found; --checkpoint must be a train output directory")
    return dict(line.split("=", 1) for line in path.read_text(encoding="utf-8").splitlines() if line)


def load_predictor(ckpt_dir: Path):
    run = _read_run(ckpt_dir)
    if run["model"] == "majority":
        return run, MajorityModel.load(ckpt_dir / "majority.tsv")
    cfg = ModelConfig.from_text((ckpt_dir / "model.cfg").read_text(encoding="utf-8"))
    model = build_predictor(run["model"], run["variant"], cfg)
    model.load(ckpt_dir / "model.ckpt")
    return run, model


def cmd_eval(args) -> None:
    started = _now()
    ckpt = Path(args.checkpoint)
    run, model = load_predictor(ckpt)
    sessions, pois = load_data_dir(args.data)
    out = resolve_out(args)
    split = split_dataset(sessions, float(run["train_fraction"]), seed=int(run["split_seed"]), pois=pois)
    windows = make_windows(split.validation, int(run["seq_len"]), pois)
    subsets = SUBSETS if args.subsets == "all" else tuple(s.strip() for s in args.subsets.split(","))
    reports = evaluate(model, windows, subsets)
    name = run["variant"] if run["model"] == "moe" else run["model"]
    (out / "report.tsv").write_text(format_report([(name, reports[s]) for s in subsets]), encoding="utf-8")
    outputs = ["report.tsv"]
    if args.regions:
        grid = RegionGrid(args.cell_deg, (args.origin_lat, args.origin_lon))
        write_region_rows(out / "regions.tsv", region_accuracy(model, windows, pois, grid))
        outputs.append("regions.tsv")
    src = Path(args.data)
    inputs = [src / SESSIONS_FILE, src / POIS_FILE] + [ckpt / n for n in ("model.ckpt", "majority.tsv") if (ckpt / n).is_file()]
    finish(out, args, inputs, outputs, started)


def cmd_ablate(args) -> None:
    started = _now()
    sessions, pois = load_data_dir(args.data)
    out = resolve_out(args)
    variants = list(VARIANTS) if args.variants == "all" else [v.strip() for v in args.variants.split(",")]
    per_seed, pooled = [], {}
    for seed in range(args.seeds):
        split = split_dataset(sessions, args.train_fraction, seed=seed, pois=pois)
        tr = make_windows(split.train, args.seq_len, pois)
        va = make_windows(split.validation, args.seq_len, pois)
        cfg = model_config_from_args(args, split.poi_count, split.category_count, seed)
        tcfg = TrainConfig(batch_size=args.batch, lr=args.lr, max_epochs=args.epochs, patience=args.patience,
                           seq_len=args.seq_len, seed=seed)
        for v in variants:
            model = build_variant(v, cfg)
            train(model, tr, va, tcfg)
            reps = evaluate(model, va)
            for s in SUBSETS:
                per_seed.append((f"{v}@seed{seed}", reps[s]))
            log.info("seed %d %s total top5 %.4f", seed, v, reps["total"].top5)
    # pooled over seeds: one row per variant and subset
    for name, r in per_seed:
        v = name.split("@")[0]
        pooled.setdefault((v, r.subset), []).append(r)
    rows = []
    for v in variants:
        for s in SUBSETS:
            rs = pooled[(v, s)]
            mean = lambda f: float(np.mean([getattr(x, f) for x in rs]))  # noqa: E731
            rows.append((v, MetricReport(s, mean("top1"), mean("top5"), mean("top10"), mean("mrr"),
                                         int(sum(x.n_queries for x in rs)))))
    (out / "report.tsv").write_text(format_report(rows), encoding="utf-8")
    (out / "per_seed.tsv").write_text(format_report(per_seed), encoding="utf-8")
    src = Path(args.data)
    finish(out, args, [src / SESSIONS_FILE, src / POIS_FILE], ["report.tsv", "per_seed.tsv"], started)


FSQ_TIME = "%a %b %d %H:%M:%S +0000 %Y"


def cmd_synth(args) -> None:
    started = _now()
    out = resolve_out(args)
    spec = SynthSpec(n_users=args.users, n_regions=args.regions, pois_per_region=args.pois_per_region,
                     sessions_per_user=args.sessions_per_user, session_len=args.session_len,
                     regime=args.regime, lag=args.lag, noise=args.noise)
    corpus = synth_corpus(spec, seed=args.seed)
    rows = []
    for c in corpus.checkins:
        poi = corpus.pois[c.poi]
        when = dt.datetime.fromtimestamp(c.timestamp, dt.timezone.utc).strftime(FSQ_TIME)
        rows.append(f"{c.user}\tv{poi.id}\tc{poi.category}\tpoi{poi.id}\t{float(poi.lat)!r}\t{float(poi.lon)!r}\t0\t{when}\n")
    (out / "checkins.tsv").write_text("".join(rows), encoding="utf-8")
    truth = [f"{u}\t{t.home_cell[0]},{t.home_cell[1]}\t" + ";".join(f"{a},{b}" for a, b in sorted(t.familiar_cells)) + "\n"
             for u, t in sorted(corpus.truth.items())]
    (out / "truth.tsv").write_text("".join(truth), encoding="utf-8")
    (out / "labels.txt").write_text("".join(corpus.labels), encoding="utf-8")
    finish(out, args, [], ["checkins.tsv", "truth.tsv", "labels.txt"], started)


# ------------------------------------------------------------------ parser

def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=5e-4, help="Adam learning rate (grid: 1e-3, 5e-4, 1e-4)")
    p.add_argument("--batch", type=int, default=64, help="batch size")
    p.add_argument("--seq-len", type=int, default=50, help="max input window length")
    p.add_argument("--epochs", type=int, default=100, help="max training epochs")
    p.add_argument("--patience", type=int, default=3, help="stop after this many consecutive loss increases")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--tf-layers", type=int, default=4)
    p.add_argument("--tf-heads", type=int, default=8)
    p.add_argument("--tf-ff", type=int, default=128)
    p.add_argument("--lstm-layers", type=int, default=2)
    p.add_argument("--lstm-hidden", type=int, default=64)


def _grid_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cell-deg", type=float, default=0.01, help="region grid cell size in degrees")
    p.add_argument("--origin-lat", type=float, default=-90.0)
    p.add_argument("--origin-lon", type=float, default=-180.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moetransmov", description="Mixture-of-experts next-POI prediction.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/{name})")
        p.add_argument("--config", help="key=value file overriding flags")
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        return p

    p = add("ingest", cmd_ingest, "parse, sessionize and filter check-ins")
    p.add_argument("--input", required=True, help="Foursquare TSV file, or a canonical data directory")
    p.add_argument("--format", choices=("foursquare", "canonical"), default="foursquare")
    p.add_argument("--gap-hours", type=float, default=24.0)
    p.add_argument("--min-len", type=int, default=10)
    p.add_argument("--min-sessions", type=int, default=10)

    p = add("classify", cmd_classify, "build region profiles and label familiar/unfamiliar steps")
    p.add_argument("--sessions", required=True, help="data directory with sessions.tsv and pois.tsv")
    p.add_argument("--window-days", type=float, default=7.0)
    p.add_argument("--window-anchor", choices=("user", "dataset"), default="user",
                   help="start the profiling window at each user's first check-in or at the dataset start")
    p.add_argument("--bandwidth", type=float, default=0.02, help="mean-shift bandwidth in degrees")
    _grid_flags(p)

    p = add("train", cmd_train, "train a model on the training split")
    p.add_argument("--data", required=True, help="labeled data directory")
    p.add_argument("--model", choices=MODEL_CHOICES, default="moe")
    p.add_argument("--variant", choices=tuple(VARIANTS), default="full")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--monitor", choices=("val", "train"), default="val", help="loss watched by early stopping")
    _model_flags(p)

    p = add("eval", cmd_eval, "score a trained model on the validation split")
    p.add_argument("--checkpoint", required=True, help="train output directory")
    p.add_argument("--data", required=True, help="labeled data directory")
    p.add_argument("--subsets", default="all", help="'all' or a comma list of familiar,unfamiliar,total")
    p.add_argument("--regions", action="store_true", help="also write per-region Top-1 rows")
    _grid_flags(p)

    p = add("ablate", cmd_ablate, "train and score every ablation variant over several seeds")
    p.add_argument("--data", required=True, help="labeled data directory")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--variants", default="all", help=f"'all' or a comma list of {','.join(VARIANTS)}")
    _model_flags(p)

    p = add("synth", cmd_synth, "write a synthetic Foursquare-format corpus with planted truth")
    p.add_argument("--regime", choices=("long", "short", "mixed", "revisit", "cycle"), default="mixed")
    p.add_argument("--users", type=int, default=20)
    p.add_argument("--regions", type=int, default=10)
    p.add_argument("--pois-per-region", type=int, default=8)
    p.add_argument("--sessions-per-user", type=int, default=12)
    p.add_argument("--session-len", type=int, default=40)
    p.add_argument("--lag", type=int, default=20)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        apply_config_file(parser, args)
        args.func(args)
    except (CommandError, MalformedInputError, FileNotFoundError, KeyError, ValueError, TrainingDiverged) as e:
        print(f"moetransmov {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
