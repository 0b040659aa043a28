"""Command line surface.

Subcommands: generate, train, infer, evaluate, checkgrad, dump.
Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.
Environment: VICFLOW_DATA_ROOT (default --data), VICFLOW_THREADS
(evaluation parallelism).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io as vio
from .config import FLOW_COUNTING, FUSION_MODES, LOSS_SIGNS, PRIOR_MODES, RunConfig
from .flux import metrics, run_sequence, truth_total
from .gradcheck import run_full_suite
from .pipeline import build_params, matcher_forward
from .simulator import SimConfig, generate
from .training import collect_pairs, fit

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3


def _data_root(value: str | None) -> str:
    if value:
        return value
    env = os.environ.get("VICFLOW_DATA_ROOT", "")
    if env:
        return env
    raise vio.DataFormatError("missing-data: no --data given and VICFLOW_DATA_ROOT unset")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and ablation switches")
    g.add_argument("--interval", type=int, default=None, help="frame sampling stride")
    g.add_argument("--lam", type=float, default=None, help="displacement share of the transport cost mix")
    g.add_argument("--eta", type=int, default=None, help="group cap: max matches per pedestrian")
    g.add_argument("--radius", type=float, default=None, help="normalized grouping distance")
    g.add_argument("--head-layers", type=int, default=None)
    g.add_argument("--head-hidden", type=int, default=None)
    g.add_argument("--d", type=int, default=None, help="model width")
    g.add_argument("--patch", type=int, nargs=2, default=None, metavar=("H", "W"))
    g.add_argument("--heads", type=int, default=None)
    g.add_argument("--epsilon", type=float, default=None, help="sinkhorn regularization")
    g.add_argument("--max-iter", type=int, default=None, help="sinkhorn iteration cap")
    g.add_argument("--tol", type=float, default=None, help="sinkhorn marginal tolerance")
    g.add_argument("--context", action=argparse.BooleanOptionalAction, default=None, help="cross-frame context attention")
    g.add_argument("--o2m", action=argparse.BooleanOptionalAction, default=None, help="one-to-many inference (off: one-to-one baseline)")
    g.add_argument("--displacement-attention", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--modulator", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--transport-loss", action=argparse.BooleanOptionalAction, default=None, dest="transport_loss")
    g.add_argument("--fusion", choices=FUSION_MODES, default=None)
    g.add_argument("--prior", choices=PRIOR_MODES, default=None)
    g.add_argument("--loss-sign", choices=LOSS_SIGNS, default=None)
    g.add_argument("--flow-counting", choices=FLOW_COUNTING, default=None)
    g.add_argument("--lr", type=float, default=None)
    g.add_argument("--weight-decay", type=float, default=None)
    g.add_argument("--epochs", type=int, default=None)
    g.add_argument("--seed", type=int, default=None)


_FLAG_TO_FIELD = {
    "interval": "interval",
    "lam": "lam",
    "eta": "eta",
    "radius": "radius",
    "head_layers": "head_layers",
    "head_hidden": "head_hidden",
    "d": "d",
    "heads": "heads",
    "epsilon": "sinkhorn_epsilon",
    "max_iter": "sinkhorn_max_iter",
    "tol": "sinkhorn_tol",
    "context": "context",
    "o2m": "o2m",
    "displacement_attention": "displacement_attention",
    "modulator": "modulator",
    "transport_loss": "transport_loss_on",
    "fusion": "fusion",
    "prior": "prior",
    "loss_sign": "loss_sign",
    "flow_counting": "flow_counting",
    "lr": "learning_rate",
    "weight_decay": "weight_decay",
    "epochs": "epochs",
    "seed": "seed",
}


def _config_from_args(args, base: RunConfig | None = None) -> RunConfig:
    config = base if base is not None else RunConfig()
    for flag, fieldname in _FLAG_TO_FIELD.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(config, fieldname, value)
    patch = getattr(args, "patch", None)
    if patch is not None:
        config.patch_shape = (patch[0], patch[1])
    config.validate()
    return config


def _load_videos(data_dir):
    videos = []
    for ann in vio.data_videos(data_dir):
        frames = vio.ingest(ann)
        npz = ann.with_suffix(".npz")
        if not npz.exists():
            raise vio.DataFormatError(f"missing-data: descriptors {npz} not found")
        descriptors = vio.load_descriptors(npz, frames)
        videos.append((ann.stem, frames, descriptors))
    return videos


def _cmd_generate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    masks = tuple(tuple(r) for r in (args.mask or []))
    for v in range(args.videos):
        config = SimConfig(
            seed=args.seed + v,
            frames=args.frames,
            groups_per_frame_rate=args.rate,
            group_size_range=(args.group_min, args.group_max),
            max_step=args.max_step,
            group_jitter=args.jitter,
            descriptor_dim=args.descriptor_dim,
            patch_shape=(args.patch[0], args.patch[1]) if args.patch else (2, 2),
            descriptor_noise=args.noise,
            occlusion_rate=args.occlusion,
            mask_regions=masks,
        )
        seq = generate(config)
        stem = out / f"video{v:03d}"
        vio.save_annotations(stem.with_suffix(".jsonl"), seq.frames, masks=vio.rects_to_polygons(masks))
        vio.save_descriptors(stem.with_suffix(".npz"), seq.descriptors)
        print(f"{stem.name}: {len(seq.frames)} frames, truth total {seq.distinct_identities()}")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = _config_from_args(args)
    config.data_dir = _data_root(args.data)
    config.model_path = args.out
    videos = _load_videos(config.data_dir)
    input_dim = videos[0][2][0].d
    pairs = collect_pairs([(frames, desc) for _, frames, desc in videos], interval=config.interval)
    if not pairs:
        raise vio.DataFormatError("missing-data: no usable frame pairs")
    params = build_params(config, np.random.default_rng(config.seed), input_dim=input_dim)
    curve = fit(params, pairs, config)
    for epoch, loss in enumerate(curve.epoch_losses):
        print(f"epoch {epoch}: loss {loss:.6f}")
    vio.save_model(args.out, params, run_config=config.to_dict())
    if args.curve:
        vio.write_curve_csv(args.curve, curve.epoch_losses)
    print(f"model written to {args.out}")
    return EXIT_OK


def _identity_oracle(frames):
    def oracle(a: int, b: int) -> np.ndarray:
        fa, fb = frames[a], frames[b]
        if fa.identity is None or fb.identity is None:
            raise vio.DataFormatError("missing-data: --oracle requires identity annotations")
        prev_ids = fa.identity[fa.visible_index()]
        curr_ids = fb.identity[fb.visible_index()]
        return (curr_ids[:, None] == prev_ids[None, :]).astype(np.float64)

    return oracle


def _cmd_infer(args) -> int:
    if args.oracle:
        params, config = None, _config_from_args(args)
    else:
        if not args.model:
            raise vio.DataFormatError("missing-model: --model required unless --oracle")
        params, stored = vio.load_model(args.model)
        config = _config_from_args(args, base=RunConfig.from_dict(stored))
    data_dir = _data_root(args.data)
    results = []
    for name, frames, descriptors in _load_videos(data_dir):
        seq, per_pair = run_sequence(frames, descriptors, params, config, oracle=_identity_oracle(frames) if args.oracle else None)
        results.append(
            {
                "name": name,
                "frames": len(frames),
                "first_count": seq.first_frame_count,
                "inflows": list(seq.per_pair_inflows),
                "outflows": [r.outflow for r in per_pair],
                "total": seq.total,
                "interval": seq.interval,
            }
        )
        print(f"{name}: total {seq.total} (first {seq.first_frame_count} + inflows {sum(seq.per_pair_inflows)})")
    payload = {"videos": results}
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=2)
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    with open(args.pred) as fh:
        pred = {v["name"]: v for v in json.load(fh)["videos"]}
    data_dir = _data_root(args.data)
    tags = {}
    if args.tags:
        with open(args.tags) as fh:
            tags = json.load(fh)
    files = vio.data_videos(data_dir)
    threads = int(os.environ.get("VICFLOW_THREADS", "1"))

    def evaluate_one(ann):
        frames = vio.ingest(ann)
        return ann.stem, len(frames), truth_total(frames, interval=args.interval)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            truths = list(pool.map(evaluate_one, files))
    else:
        truths = [evaluate_one(f) for f in files]

    rows = []
    grouped: dict[str, list] = {}
    for name, length, truth in truths:
        if name not in pred:
            raise vio.DataFormatError(f"missing-data: no prediction for video {name}")
        row = (length, truth, pred[name]["total"])
        rows.append(row)
        grouped.setdefault(tags.get(name, "all"), []).append(row)

    overall = metrics(rows)
    print(f"overall: MAE {overall.mae:.3f}  MSE {overall.mse:.3f}  WRAE {overall.wrae:.3f}%")
    report = {"overall": {"mae": overall.mae, "mse": overall.mse, "wrae": overall.wrae}, "groups": {}}
    if tags:
        for tag, tag_rows in sorted(grouped.items()):
            ev = metrics(tag_rows)
            print(f"{tag}: MAE {ev.mae:.3f}  MSE {ev.mse:.3f}  WRAE {ev.wrae:.3f}%")
            report["groups"][tag] = {"mae": ev.mae, "mse": ev.mse, "wrae": ev.wrae}
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2)
    return EXIT_OK


def _cmd_checkgrad(args) -> int:
    trials = args.trials
    results = run_full_suite(trials=trials, kernel_trials=args.kernel_trials, seed=args.seed or 0)
    ok = True
    for suite in results:
        print(suite.summary())
        ok = ok and suite.passed
    return EXIT_OK if ok else EXIT_CHECK


def _cmd_dump(args) -> int:
    params, stored = vio.load_model(args.model)
    config = _config_from_args(args, base=RunConfig.from_dict(stored))
    data_dir = _data_root(args.data)
    videos = {name: (frames, desc) for name, frames, desc in _load_videos(data_dir)}
    if args.video not in videos:
        raise vio.DataFormatError(f"missing-data: video {args.video} not found")
    frames, descriptors = videos[args.video]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pt = params.as_tensors()
    sampled = list(range(0, len(frames), config.interval))
    pairs = min(len(sampled) - 1, args.max_pairs) if args.max_pairs else len(sampled) - 1
    for k in range(1, pairs + 1):
        a, b = sampled[k - 1], sampled[k]
        prev_set = descriptors[a].take(frames[a].visible_index())
        curr_set = descriptors[b].take(frames[b].visible_index())
        fw = matcher_forward(prev_set, curr_set, pt, config)
        if fw.prior is not None:
            vio.write_prior_csv(out / f"prior_pair{k - 1:04d}.csv", fw.prior)
        if fw.icg is not None and fw.prior is not None:
            vio.write_attention_csv(
                out / f"attention_pair{k - 1:04d}.csv",
                fw.icg.attention_map,
                fw.icg.modulated_map,
                fw.prior.full_cost.data,
            )
    print(f"dumped {pairs} pair(s) to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vicflow", description="pedestrian flux estimation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic sequences with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=5)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--rate", type=float, default=0.5, help="group arrival intensity per frame")
    p.add_argument("--group-min", type=int, default=2)
    p.add_argument("--group-max", type=int, default=4)
    p.add_argument("--max-step", type=float, default=0.2)
    p.add_argument("--jitter", type=float, default=0.02)
    p.add_argument("--descriptor-dim", type=int, default=16)
    p.add_argument("--patch", type=int, nargs=2, default=None, metavar=("H", "W"))
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--occlusion", type=float, default=0.0)
    p.add_argument("--mask", type=float, nargs=4, action="append", metavar=("X0", "Y0", "X1", "Y1"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="train the matching model")
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--curve", default=None, help="write per-epoch losses as CSV")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="count videos with a trained model")
    p.add_argument("--data", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--oracle", action="store_true", help="use identity annotations instead of the model")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--tags", default=None, help="JSON mapping video name to a grouping tag")
    p.add_argument("--interval", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("checkgrad", help="run the gradient verification suite")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--kernel-trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_checkgrad)

    p = sub.add_parser("dump", help="export attention and prior-cost CSVs")
    p.add_argument("--data", default=None)
    p.add_argument("--video", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-pairs", type=int, default=None)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_dump)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except vio.DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: missing-data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        message = str(exc)
        print(f"error: {message}", file=sys.stderr)
        if message.startswith("non-finite-loss"):
            return EXIT_CHECK
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
