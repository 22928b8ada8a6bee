"""``imseg`` command line: pretrain, finetune, eval, verify, sweep."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as C
from . import data as D
from . import net as N
from . import train as TR
from . import verify as V

log = logging.getLogger("imseg")

SWEEP_GRIDS = {
    "alpha": ("alpha", [0.0, 0.25, 0.5, 0.75, 1.0]),
    "lambda": ("lambda", [0.0, 0.1, 1.0, 4.0]),
    "k": ("K", [5, 10, 20, 40, 60]),
    "batch": ("batch_size", [6, 12, 18]),
}


class CliError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


@dataclass
class Splits:
    dataset: D.SynthDataset
    train: D.SynthDataset
    val: D.SynthDataset
    test: D.SynthDataset
    labeled: D.SynthDataset
    volumes: dict


def build_data(cfg: C.RunConfig) -> Splits:
    size = cfg.image_size
    ds = D.generate(cfg.data_seed, cfg.n_volumes, cfg.slices_per_volume, size, size, cfg.partitions)
    train, val, test = D.split_volumes(cfg.n_volumes, cfg.data_seed, cfg.n_val, cfg.n_test)
    chosen = np.sort(np.random.default_rng([cfg.seed, 31]).permutation(train)[: cfg.ft_labeled_volumes])
    return Splits(ds, ds.subset(train), ds.subset(val), ds.subset(test), ds.subset(chosen),
                  {"train": train, "val": val, "test": test})


def _prepare_out(out) -> Path:
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc.strerror}") from None
    return path


def write_dsc(path, volumes, scores) -> None:
    lines = ["volume_id,dsc_c1,dsc_c2,dsc_c3,mean"]
    for v, row in zip(volumes, scores):
        lines.append(f"{int(v)}," + ",".join(f"{x:.17g}" for x in row) + f",{row.mean():.17g}")
    mean = scores.mean(axis=0)
    lines.append("mean," + ",".join(f"{x:.17g}" for x in mean) + f",{mean.mean():.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_cluster_maps(out: Path, maps: np.ndarray, K: int, splits: Splits, subset: D.SynthDataset) -> None:
    out.mkdir(exist_ok=True)
    scale = 255 // max(K - 1, 1)
    for i, m in enumerate(maps):
        D.write_pgm(out / f"v{int(subset.volume_id[i]):03d}_s{int(subset.slice_index[i]):02d}.pgm", m * scale)


# -- commands -------------------------------------------------------------------
def run_pretrain(cfg: C.RunConfig, out: Path) -> dict:
    splits = build_data(cfg)
    (out / "config.txt").write_text(C.render(cfg))
    net_cfg = cfg.net()
    try:
        params, record = TR.pretrain(splits.train, cfg.pretrain(), net_cfg, val=splits.val, log=log.info)
    except TR.TrainingDiverged as exc:
        np.savez(out / "diverged_batch.npz", indices=exc.indices, batch_seed=np.array(exc.batch_seed))
        raise CliError(str(exc)) from None
    if splits.train.counter.count:
        raise CliError("label leak: pre-training read ground-truth masks")
    N.save(params, net_cfg, out / "checkpoint.bin")
    record.to_csv(out / "metrics.csv")
    _, _, maps = TR.cluster_diagnostics(N.SegNet(net_cfg), params, splits.val, cfg.seed)
    write_cluster_maps(out / "clusters", maps, cfg.K, splits, splits.val)
    return params


def run_finetune(cfg: C.RunConfig, out: Path, checkpoint: str | None) -> np.ndarray:
    splits = build_data(cfg)
    (out / "config.txt").write_text(C.render(cfg))
    net_cfg = cfg.net()
    if checkpoint is None:
        log.info("no checkpoint given: baseline run from random initialization")
        pretrained = None
    else:
        try:
            pretrained, _ = N.load(checkpoint, expected=net_cfg)
        except (OSError, N.CheckpointError) as exc:
            raise CliError(f"cannot load checkpoint: {exc}") from None
        log.info("fine-tuning from %s", checkpoint)
    try:
        params, record = TR.finetune(pretrained, splits.labeled, splits.val, cfg.finetune(), net_cfg, log=log.info)
    except TR.TrainingDiverged as exc:
        np.savez(out / "diverged_batch.npz", indices=exc.indices, batch_seed=np.array(exc.batch_seed))
        raise CliError(str(exc)) from None
    N.save(params, net_cfg, out / "model.bin")
    record.to_csv(out / "metrics.csv")
    volumes, scores = TR.evaluate(N.SegNet(net_cfg), params, splits.test)
    write_dsc(out / "dsc.csv", volumes, scores)
    log.info("best validation epoch %d, test mean DSC %.4f", record.best_epoch, scores.mean())
    return scores


def cmd_pretrain(args, cfg):
    run_pretrain(cfg, _prepare_out(args.out))


def cmd_finetune(args, cfg):
    run_finetune(cfg, _prepare_out(args.out), args.checkpoint)


def cmd_eval(args, cfg):
    if args.checkpoint is None:
        raise CliError("eval needs --checkpoint", 2)
    out = _prepare_out(args.out)
    splits = build_data(cfg)
    try:
        params, net_cfg = N.load(args.checkpoint, expected=cfg.net())
    except (OSError, N.CheckpointError) as exc:
        raise CliError(f"cannot load checkpoint: {exc}") from None
    volumes, scores = TR.evaluate(N.SegNet(net_cfg), params, getattr(splits, args.split))
    write_dsc(out / "dsc.csv", volumes, scores)
    print(f"{args.split} mean DSC {scores.mean():.4f}")


def cmd_export(args, cfg):
    splits = build_data(cfg)
    out = D.export(splits.dataset, args.out, splits.volumes)
    print(f"wrote {len(splits.dataset)} slices to {out}")


def cmd_verify(args, cfg=None):
    faults = tuple(args.inject_fault or ())
    results = V.run(seed=args.seed if args.seed is not None else 0, faults=faults)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if failed:
        blob = {r.name: {"max_error": r.max_error, "tolerance": r.tolerance, "counterexample": r.counterexample}
                for r in failed}
        text = json.dumps(blob, default=str)
        if args.out:
            _prepare_out(args.out)
            Path(args.out, "counterexample.json").write_text(text + "\n")
        print(f"counterexample: {text[:2000]}")
        raise CliError(f"{len(failed)} of {len(results)} properties failed")
    print(f"all {len(results)} properties passed")


def _sweep_cell(cfg: C.RunConfig, out: Path) -> np.ndarray:
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=1):
        checkpoint = out / "pretrain"
        checkpoint.mkdir(exist_ok=True)
        run_pretrain(cfg, checkpoint)
        (out / "finetune").mkdir(exist_ok=True)
        return run_finetune(cfg, out / "finetune", str(checkpoint / "checkpoint.bin"))


def cmd_sweep(args, cfg):
    key, grid = SWEEP_GRIDS[args.param]
    values = [float(v) if key in ("alpha", "lambda") else int(v) for v in args.values.split(",")] if args.values else grid
    out = _prepare_out(args.out)
    (out / "config.txt").write_text(C.render(cfg))
    seeds = [cfg.seed + i for i in range(args.seeds)]
    cells = []
    for value in values:
        for seed in seeds:
            try:
                cell_cfg = C.replace(cfg, **{key: value, "seed": seed})
            except C.ConfigError as exc:
                raise CliError(str(exc), 2) from None
            cells.append((value, seed, cell_cfg, out / f"{args.param}_{value}" / f"seed_{seed}"))
    workers = max(1, int(os.environ.get("IMSEG_THREADS", "1")))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        scores = list(pool.map(lambda c: _sweep_cell(c[2], c[3]), cells))
    lines = ["param,value,mean_dsc,std_dsc,seeds,dsc_c1,dsc_c2,dsc_c3"]
    for value in values:
        per_seed = np.array([s.mean(axis=0) for (v, _, _, _), s in zip(cells, scores) if v == value])
        means = per_seed.mean(axis=1)
        per_class = per_seed.mean(axis=0)
        lines.append(f"{args.param},{value},{means.mean():.6f},{means.std():.6f},{len(means)},"
                     + ",".join(f"{x:.6f}" for x in per_class))
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


# -- entry point ----------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="key=value run configuration")
        p.add_argument("--out", required=needs_config, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--cc-sign", choices=("neg", "literal"), help="override the boundary loss sign")
        return p

    common(sub.add_parser("pretrain", help="unsupervised pre-training")).set_defaults(func=cmd_pretrain)
    ft = common(sub.add_parser("finetune", help="fine-tune on the labeled volumes"))
    ft.add_argument("--checkpoint", help="pre-trained checkpoint; omit for the random-init baseline")
    ft.set_defaults(func=cmd_finetune)
    ev = common(sub.add_parser("eval", help="per-volume DSC of a fine-tuned model"))
    ev.add_argument("--checkpoint", help="fine-tuned model")
    ev.add_argument("--split", choices=("train", "val", "test"), default="test")
    ev.set_defaults(func=cmd_eval)
    common(sub.add_parser("export", help="write the synthetic dataset as PGM files")).set_defaults(func=cmd_export)
    vf = sub.add_parser("verify", help="run the property suite")
    vf.add_argument("--seed", type=int)
    vf.add_argument("--out", help="where to write a failing counterexample")
    vf.add_argument("--inject-fault", action="append", choices=V.FAULTS, help="deliberately break a component")
    vf.set_defaults(func=cmd_verify, config=None)
    sw = common(sub.add_parser("sweep", help="pretrain + finetune over a parameter grid"))
    sw.add_argument("--param", required=True, choices=sorted(SWEEP_GRIDS))
    sw.add_argument("--values", help="comma-separated values (default: the standard grid)")
    sw.add_argument("--seeds", type=int, default=3)
    sw.set_defaults(func=cmd_sweep)
    return parser


def _load_config(args) -> C.RunConfig | None:
    if args.config is None:
        return None
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "cc_sign", None):
        overrides["cc_sign"] = args.cc_sign
    return C.load(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cfg = _load_config(args)
    except C.ConfigError as exc:
        print(f"imseg: {exc}", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=1):
            args.func(args, cfg)
    except CliError as exc:
        print(f"imseg: {exc}", file=sys.stderr)
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
