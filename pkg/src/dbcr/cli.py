"""``dbcr`` command line: make-data, train, infer, eval.

Every config field is also a flag named ``--<section>.<key>`` (e.g.
``--train.epochs 3``); flags override the ``--config`` TOML file, which
overrides built-in defaults. Exit codes: 0 ok, 2 config error,
3 numerical/divergence error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import typing
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import data as D
from .backbone import count_parameters
from .checkpoint import Checkpoint, load_checkpoint
from .config import RunConfig, field_specs, load_config
from .errors import ConfigError, NumericalError
from .imaging import grid, save_array, save_png, to_rgb8
from .inference import InferenceConfig, run_inference
from .metrics import METRIC_NAMES, image_metrics, psnr, stratified_report
from .training import train_loop

log = logging.getLogger("dbcr")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


# --------------------------------------------------------------------------
# commands (also the programmatic API used by scripts and tests)


def _scene_seed(base: int, i: int) -> int:
    return int(np.random.SeedSequence([base, i]).generate_state(1)[0])


def _scene_params(cfg: RunConfig, i: int) -> D.SyntheticSceneParams:
    dc = cfg.data
    seed = _scene_seed(dc.seed, i)
    cov = float(np.random.default_rng([dc.seed, i, 1]).uniform(*dc.coverage_range))
    return D.SyntheticSceneParams(
        seed=seed, H=dc.H, W=dc.W, channels=dc.channels, terrain_octaves=dc.terrain_octaves,
        cloud_opacity_range=tuple(dc.cloud_opacity_range), cloud_coverage_target=cov,
        sar_noise_level=dc.sar_noise_level)


def _make_one(args):
    cfg, i = args
    return D.generate_triplet(_scene_params(cfg, i), scene_id=f"scene_{i:05d}")


def cmd_make_data(cfg: RunConfig, out: Optional[Path] = None) -> tuple[Path, str]:
    """Write ``cfg.data.count`` synthetic scenes, a manifest and a split file."""
    cfg.data.validate()
    root = Path(out) if out is not None else cfg.paths.resolved_data_dir()
    root.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, i) for i in range(cfg.data.count)]
    if cfg.data.workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(cfg.data.workers) as ex:
            triplets = list(ex.map(_make_one, jobs, chunksize=8))
    else:
        triplets = [_make_one(j) for j in jobs]
    for i, tri in enumerate(triplets):
        D.save_triplet(tri, root, seed=_scene_seed(cfg.data.seed, i))
    ids = [t.scene_id for t in triplets]
    tr, va, te = D.split_dataset(ids, tuple(cfg.data.ratios), seed=cfg.data.seed)
    splits = {s: "train" for s in tr} | {s: "val" for s in va} | {s: "test" for s in te}
    splits = {s: splits[s] for s in ids}
    # worker count does not affect the content, so it stays out of the manifest
    gen = {k: v for k, v in asdict(cfg.data).items() if k != "workers"}
    digest = D.write_manifest(root, triplets, splits, extra={"data": gen})
    log.info("wrote %d scenes (%d/%d/%d) to %s, manifest %s", len(ids), len(tr), len(va), len(te),
             root, digest[:12])
    return root, digest


def cmd_train(cfg: RunConfig, resume: Optional[Path] = None) -> Checkpoint:
    idx = D.read_dataset(cfg.paths.resolved_data_dir())
    train, val = idx.load("train"), idx.load("val")
    if not train:
        raise ConfigError(f"no training scenes in {idx.root}")
    _check_channels(cfg.model, train[0], "training scene")
    run_dir = Path(cfg.paths.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps({"config_hash": cfg.hash(), **cfg.to_dict()}, indent=1, sort_keys=True) + "\n")
    ck = train_loop(train, cfg.train, cfg.model, val=val, out_dir=run_dir, resume=resume,
                    extra={"run_config_hash": cfg.hash()})
    log.info("trained %d steps; checkpoints in %s", ck.step, run_dir)
    return ck


def _check_channels(model_cfg, tri: D.ImageTriplet, what: str):
    if tri.y.shape[0] != model_cfg.opt_channels_in:
        raise ConfigError(f"{what} {tri.scene_id}: cloudy optical y has {tri.y.shape[0]} channels, "
                          f"model expects {model_cfg.opt_channels_in}")
    if tri.z.shape[0] != model_cfg.sar_channels_in:
        raise ConfigError(f"{what} {tri.scene_id}: SAR z has {tri.z.shape[0]} channels, "
                          f"model expects {model_cfg.sar_channels_in}")
    m = 2 ** (model_cfg.levels - 1)
    if tri.y.shape[1] % m or tri.y.shape[2] % m:
        raise ConfigError(f"{what} {tri.scene_id}: spatial size {tri.y.shape[1:]} not divisible by {m}")


def _load_inputs(cfg: RunConfig, inp: Optional[Path], split: str) -> list[D.ImageTriplet]:
    if inp is None:
        inp = cfg.paths.resolved_data_dir()
    inp = Path(inp)
    if (inp / "meta.json").exists():
        return [D.load_triplet(inp.parent, inp.name)]
    idx = D.read_dataset(inp)
    scenes = idx.load(split) if split != "all" else idx.load()
    if not scenes:
        raise ConfigError(f"split {split!r} of {inp} is empty")
    return scenes


def _checked_icfg(cfg: RunConfig, ck: Checkpoint, **kw) -> InferenceConfig:
    icfg = InferenceConfig(**{**asdict(cfg.infer), **kw})
    try:
        icfg.validate(ck.schedule.T)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return icfg


def cmd_infer(cfg: RunConfig, checkpoint: Path, inp: Optional[Path] = None, split: str = "test",
              out: Optional[Path] = None, trace: bool = False, make_grid: bool = False) -> list[Path]:
    ck = load_checkpoint(checkpoint)
    icfg = _checked_icfg(cfg, ck)
    scenes = _load_inputs(cfg, inp, split)
    for tri in scenes:
        _check_channels(ck.backbone, tri, "input")
    out = Path(out or cfg.paths.out_dir or Path(cfg.paths.run_dir) / "infer")
    h = ck.config_hash
    bands = cfg.report.rgb_bands
    written = []
    for tri in scenes:
        frames = [] if trace else None
        pred = run_inference(tri.y, tri.z, ck, icfg, trace=frames).numpy()
        meta = {"scene_id": tri.scene_id, "nfe": icfg.N, "mode": icfg.mode,
                "seed": icfg.seed if icfg.mode == "sde" else None, "checkpoint": str(checkpoint)}
        written.append(save_array(out / f"{tri.scene_id}.npy", pred, h, **meta))
        written.append(save_png(out / f"{tri.scene_id}.png", to_rgb8(pred, bands), h))
        if trace:
            tdir = out / "trace" / tri.scene_id
            ts = list(range(ck.schedule.T, 0, -ck.schedule.T // icfg.N))
            for k, (t, f) in enumerate(zip(ts, frames)):
                written.append(save_png(tdir / f"step{k:03d}_t{t:04d}.png", to_rgb8(f.numpy(), bands), h))
            written.append(save_png(tdir / "final.png", to_rgb8(pred, bands), h))
        if make_grid:
            written.append(save_png(out / f"{tri.scene_id}_grid.png",
                                    grid([tri.y, pred, tri.x0], bands), h))
    log.info("restored %d scene(s) into %s", len(scenes), out)
    return written


def evaluate_scenes(ck: Checkpoint, scenes: Sequence[D.ImageTriplet], icfg: InferenceConfig,
                    cfg: RunConfig) -> list[dict]:
    ssim_bands = cfg.report.rgb_bands if cfg.report.ssim_rgb_only else None
    rows = []
    for tri in scenes:
        pred = run_inference(tri.y, tri.z, ck, icfg).clamp(0, 1).numpy()
        _, frac = D.cloud_mask(tri.y, tri, threshold=cfg.report.cloud_threshold)
        row = {"scene_id": tri.scene_id, "cloud_fraction": frac,
               **image_metrics(pred, tri.x0, ssim_bands=ssim_bands),
               "cloudy_psnr": psnr(tri.y, tri.x0)}
        rows.append(row)
    return rows


def _mean_row(label: str, rows: list[dict]) -> dict:
    out = {"setting": label}
    for m in METRIC_NAMES:
        v = np.array([r[m] for r in rows], dtype=np.float64)
        out[m] = float(np.nanmean(v))
    return out


def _format_rows(rows: list[dict]) -> str:
    head = f"{'setting':<10}" + "".join(f"{m.upper():>10}" for m in METRIC_NAMES)
    lines = [head, "-" * len(head)]
    lines += [f"{r['setting']:<10}" + "".join(f"{r[m]:>10.4f}" for m in METRIC_NAMES) for r in rows]
    return "\n".join(lines)


def _write_rows(path: Path, rows: list[dict]):
    cols = ["setting", *METRIC_NAMES]
    path.write_text(",".join(cols) + "\n" + "".join(
        ",".join(str(r[c]) for c in cols) + "\n" for r in rows))


def cmd_eval(cfg: RunConfig, checkpoint: Path, split: str = "test", out: Optional[Path] = None,
             sweep: Optional[str] = None, data_dir: Optional[Path] = None) -> dict:
    """Evaluate a checkpoint on a split; optional ``sweep`` in {'nfe', 'mode', 'both'}."""
    ck = load_checkpoint(checkpoint)
    icfg = _checked_icfg(cfg, ck)
    sweeps = {"nfe": ("nfe",), "mode": ("mode",), "both": ("nfe", "mode"), None: ()}[sweep]
    nfe_cfgs = [_checked_icfg(cfg, ck, N=n) for n in cfg.report.sweep_nfe] if "nfe" in sweeps else []
    scenes = _load_inputs(cfg, data_dir, split)
    for tri in scenes:
        _check_channels(ck.backbone, tri, "eval scene")
    out = Path(out or cfg.paths.out_dir or Path(cfg.paths.run_dir) / f"eval_{split}")
    out.mkdir(parents=True, exist_ok=True)

    rows = evaluate_scenes(ck, scenes, icfg, cfg)
    meta = {"config_hash": ck.config_hash, "checkpoint": str(checkpoint), "split": split,
            "nfe": icfg.N, "mode": icfg.mode, "seed": icfg.seed, "step": ck.step}
    report = stratified_report(rows, meta)
    stamp = f"# config_hash={ck.config_hash} nfe={icfg.N} mode={icfg.mode} seed={icfg.seed}\n"
    (out / "per_image.csv").write_text(stamp + report.per_image_csv())
    (out / "strata.csv").write_text(stamp + report.strata_csv())

    cloudy = np.array([r["cloudy_psnr"] for r in rows])
    restored = np.array([r["psnr"] for r in rows])
    n_params = count_parameters(ck.network())
    summary = {
        "psnr": report.overall["psnr_mean"], "ssim": report.overall["ssim_mean"],
        "mae": report.overall["mae_mean"], "sam": report.overall["sam_mean"],
        "params_m": n_params / 1e6, "cloudy_psnr": float(cloudy.mean()),
        "psnr_gain": float(np.mean(restored - cloudy)),
        "frac_improved": float(np.mean(restored > cloudy)), "n": len(rows),
        "lpips": None, "fid": None,  # require pretrained perception networks; not computed
    }
    table_row = (f"DB-CR(N={icfg.N},{icfg.mode})  PSNR {summary['psnr']:.2f}  SSIM {summary['ssim']:.3f}  "
                 f"MAE {summary['mae']:.4f}  SAM {summary['sam']:.3f}  Params {summary['params_m']:.2f}M  "
                 f"| cloudy PSNR {summary['cloudy_psnr']:.2f}  LPIPS/FID n/a")
    text = [stamp.strip(), table_row, "", report.table()]

    result = {"report": report, "summary": summary, "rows": rows, "out": out}
    if "nfe" in sweeps:
        nfe_rows = [_mean_row(f"N={c.N}", evaluate_scenes(ck, scenes, c, cfg)) for c in nfe_cfgs]
        _write_rows(out / "sweep_nfe.csv", nfe_rows)
        text += ["", "NFE sweep (distortion metrics; direction reported, not asserted)", _format_rows(nfe_rows)]
        result["nfe_rows"] = nfe_rows
    if "mode" in sweeps:
        n = cfg.report.mode_nfe
        mode_rows = [_mean_row(m.upper(), evaluate_scenes(ck, scenes, _checked_icfg(cfg, ck, N=n, mode=m), cfg))
                     for m in ("ode", "sde")]
        _write_rows(out / "sweep_mode.csv", mode_rows)
        text += ["", f"ODE vs SDE at N={n}", _format_rows(mode_rows)]
        result["mode_rows"] = mode_rows
    (out / "report.txt").write_text("\n".join(text) + "\n")
    (out / "summary.json").write_text(json.dumps({**summary, **meta}, indent=1, sort_keys=True) + "\n")
    print(table_row)
    return result


# --------------------------------------------------------------------------
# argument parsing


def _flag_type(hint):
    origin = typing.get_origin(hint)
    if origin is typing.Union or origin is list:
        return str
    return {bool: str, int: int, float: float, str: str}.get(hint, str)


def _add_config_flags(p: argparse.ArgumentParser, sections: Sequence[str]):
    g = p.add_argument_group("config overrides")
    for section, key, hint, default in field_specs():
        if section in sections:
            g.add_argument(f"--{section}.{key}", dest=f"cfg:{section}.{key}", type=_flag_type(hint),
                           default=None, metavar=key.upper(), help=f"(default: {default})")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dbcr", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, sections):
        sp.add_argument("--config", type=Path, help="TOML config file")
        _add_config_flags(sp, sections)

    sp = sub.add_parser("make-data", help="generate a synthetic SAR/optical triplet dataset")
    sp.add_argument("--out", type=Path, help="dataset directory (paths.data_dir)")
    sp.add_argument("--count", type=int, dest="cfg:data.count", metavar="N", help="number of scenes")
    sp.add_argument("--seed", type=int, dest="cfg:data.seed", metavar="SEED")
    common(sp, ("data", "paths"))

    sp = sub.add_parser("train", help="train the bridge restorer")
    sp.add_argument("--data", dest="cfg:paths.data_dir", metavar="DIR", help="dataset directory")
    sp.add_argument("--run-dir", dest="cfg:paths.run_dir", metavar="DIR")
    sp.add_argument("--epochs", type=int, dest="cfg:train.epochs", metavar="N")
    sp.add_argument("--resume", type=Path, help="continue from a checkpoint (e.g. last.ckpt)")
    common(sp, ("model", "train", "data", "paths"))

    for name, helptext in (("infer", "restore cloudy scenes"), ("eval", "metrics report on a split")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--checkpoint", type=Path, required=True)
        sp.add_argument("--split", default="test", help="train/val/test/all")
        sp.add_argument("--out", type=Path)
        sp.add_argument("--nfe", type=int, dest="cfg:infer.N", metavar="N")
        sp.add_argument("--mode", choices=("ode", "sde"), dest="cfg:infer.mode")
        if name == "infer":
            sp.add_argument("--input", type=Path, help="scene directory or dataset root")
            sp.add_argument("--trace", action="store_true", help="write every intermediate state")
            sp.add_argument("--grid", action="store_true", help="write cloudy|restored|reference panels")
        else:
            sp.add_argument("--data", type=Path, help="dataset directory")
            sp.add_argument("--sweep", choices=("nfe", "mode", "both"))
        common(sp, ("infer", "report", "paths", "data"))
    return p


def _config_from_args(ns) -> RunConfig:
    overrides: dict = {}
    for k, v in vars(ns).items():
        if k.startswith("cfg:") and v is not None:
            section, key = k[4:].split(".", 1)
            overrides.setdefault(section, {})[key] = v
    return load_config(ns.config, overrides)


def _run(ns) -> int:
    cfg = _config_from_args(ns)
    if ns.command == "make-data":
        cmd_make_data(cfg, ns.out)
    elif ns.command == "train":
        cmd_train(cfg, ns.resume)
    elif ns.command == "infer":
        cmd_infer(cfg, ns.checkpoint, ns.input, ns.split, ns.out, ns.trace, ns.grid)
    elif ns.command == "eval":
        cmd_eval(cfg, ns.checkpoint, ns.split, ns.out, ns.sweep, ns.data)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(ns)
    except (ConfigError, ValueError) as e:
        print(f"dbcr: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"dbcr: numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as e:
        print(f"dbcr: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
