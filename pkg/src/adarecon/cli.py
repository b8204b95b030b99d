"""Command-line entry point: ``adarecon <command> [flags]``.

Commands write under ``<out>/<category>/``::

    model.pt, extractor.pt, loss.csv        train
    reconstruct/scores.csv                  reconstruct (one row per test image)
    reconstruct/<defect>/<stem>/            reconstruction.png/.bin, map.bin, map.png, mask.bin,
                                            trace.csv, steps/<t>_{generated,direct}.bin
    report/<defect>_<stem>.png              report (input | reconstruction | map | ground truth)
    <command>_config.json                   resolved config echo

``eval`` writes ``<out>/metrics.csv`` over all selected categories,
``synth-preview`` writes ``<out>/synth_preview.png`` and ``make-toy``
writes a toy dataset to ``--data`` (default ``<out>/toy_data``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import (ConfigError, detector_params, experiment_config, load_config, output_root,
                     resolve_delta)
from .data import (DatasetError, load_dataset, read_image, read_mask, read_raw_array,
                   to_model_range, to_storage_uint8, write_image, write_map_png, write_raw_array)
from .denoiser import load_checkpoint, save_checkpoint, write_loss_csv
from .estimator import AdaptiveDiffusionDetector
from .features import FeatureExtractor
from .metrics import evaluate, format_report, write_metrics_csv
from .synthesis import SynthParams, synthesize_anomaly
from .toy import ToyConfig, make_toy_dataset, write_toy_dataset

log = logging.getLogger("adarecon")

COMMANDS = ("train", "reconstruct", "eval", "report", "synth-preview", "make-toy")


class CommandError(RuntimeError):
    pass


# -- argument handling ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--data", type=Path, help="dataset root (overrides data.root)")
    common.add_argument("--category", action="append", help="category to process (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--resolution", type=int)
    common.add_argument("--delta", type=float, help="step-search threshold for every category")
    common.add_argument("--T", dest="t_start", type=int, help="search start step")
    common.add_argument("--t-min", type=int, help="minimum restart step")
    common.add_argument("--stride", type=int, help="search stride in steps")
    common.add_argument("--out", type=Path, help="output root (default $ADARECON_OUT)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="adarecon", description="Adaptive diffusion reconstruction for anomaly detection.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", parents=[common], help="train a denoiser per category")
    t.add_argument("--iterations", type=int)
    sub.add_parser("reconstruct", parents=[common], help="reconstruct and map every test image")
    e = sub.add_parser("eval", parents=[common], help="compute metrics from reconstruct outputs")
    e.add_argument("--scorer", choices=("model", "oracle"), default="model",
                   help="'oracle' scores with the ground truth itself (pipeline sanity check)")
    sub.add_parser("report", parents=[common], help="write heatmap overlay panels")
    s = sub.add_parser("synth-preview", parents=[common], help="grid of synthetic anomaly pairs")
    s.add_argument("--count", type=int, default=8)
    sub.add_parser("make-toy", parents=[common], help="write the toy dataset")
    return p


def overrides_from(args) -> dict:
    o: dict = {}

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value

    put("data", "root", str(args.data) if args.data else None)
    put("data", "categories", args.category)
    put("model", "resolution", args.resolution)
    put("search", "delta", args.delta)
    put("search", "t_start", args.t_start)
    put("search", "t_min", args.t_min)
    put("search", "stride", args.stride)
    put("train", "iterations", getattr(args, "iterations", None))
    if args.seed is not None:
        o["seed"] = args.seed
    if args.out is not None:
        o["out"] = str(args.out)
    return o


def echo_config(cfg: dict, command: str, out_dir: Path | None = None) -> None:
    text = json.dumps(cfg, indent=2, sort_keys=True)
    print(f"# resolved config ({command}, seed={cfg['seed']})")
    print(text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{command.replace('-', '_')}_config.json").write_text(text + "\n")


# -- helpers ---------------------------------------------------------------

def _data_root(cfg: dict) -> Path:
    root = cfg["data"]["root"]
    if root is None:
        raise CommandError("no dataset root; pass --data or set data.root in the config")
    return Path(root)


def _categories(cfg: dict):
    layout = load_dataset(_data_root(cfg), cfg["data"]["categories"])
    missing = [c for c in (cfg["data"]["categories"] or []) if c not in layout.categories]
    if missing:
        raise CommandError(f"categories not found: {missing}")
    return layout


def _stack(paths, resolution: int) -> np.ndarray:
    return np.stack([read_image(p, resolution) for p in paths])


def _detector(cfg: dict, category: str) -> AdaptiveDiffusionDetector:
    return AdaptiveDiffusionDetector(**detector_params(cfg, category))


def _load_trained(cfg: dict, category: str, cat_out: Path) -> AdaptiveDiffusionDetector:
    ckpt = cat_out / "model.pt"
    if not ckpt.is_file():
        raise CommandError(f"{ckpt}: no checkpoint; run 'adarecon train' first")
    model, schedule, _ = load_checkpoint(ckpt)
    det = _detector(cfg, category)
    extractor = None
    ext_path = cat_out / "extractor.pt"
    if ext_path.is_file():
        blob = torch.load(ext_path, map_location="cpu", weights_only=False)
        extractor = FeatureExtractor(**blob["config"])
        extractor.load_state_dict(blob["state_dict"])
        extractor.eval()
    return det.set_components(model, schedule, extractor)


def _read_scores(path: Path) -> list[dict]:
    if not path.is_file():
        raise CommandError(f"{path}: no reconstruct outputs; run 'adarecon reconstruct' first")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- commands --------------------------------------------------------------

def cmd_make_toy(cfg: dict, args) -> None:
    root = Path(cfg["data"]["root"] or output_root(cfg) / "toy_data")
    toy = cfg["toy"]
    for texture in toy["textures"]:
        tc = ToyConfig(category=f"toy_{texture}", texture=texture, size=toy["size"],
                       n_train=toy["n_train"], n_test_normal=toy["n_test_normal"],
                       defect_count=toy["defect_count"], defect_scale=tuple(toy["defect_scale"]),
                       seed=cfg["seed"])
        cat = write_toy_dataset(make_toy_dataset(tc), root)
        print(f"wrote {cat}")


def cmd_train(cfg: dict, args) -> None:
    layout = _categories(cfg)
    res = cfg["model"]["resolution"]
    for name, idx in layout.categories.items():
        cat_out = output_root(cfg) / name
        cat_out.mkdir(parents=True, exist_ok=True)
        X = _stack(idx.train, res)
        det = _detector(cfg, name)
        every = max(1, det.iterations // 20)
        det.fit(X, progress=lambda s, l: log.info("%s step %d loss %.5f", name, s, l)
                if s % every == 0 else None)
        save_checkpoint(cat_out / "model.pt", det.model_, det.schedule_, cfg)
        write_loss_csv(det.loss_history_, cat_out / "loss.csv")
        if det.finetune:
            torch.save({"config": det.extractor_.config(), "state_dict": det.extractor_.state_dict()},
                       cat_out / "extractor.pt")
        h = det.loss_history_
        print(f"{name}: trained {len(h)} steps, loss {np.mean(h[:10]):.4f} -> {np.mean(h[-10:]):.4f}")


def cmd_reconstruct(cfg: dict, args) -> None:
    layout = _categories(cfg)
    res = cfg["model"]["resolution"]
    for name, idx in layout.categories.items():
        cat_out = output_root(cfg) / name
        det = _load_trained(cfg, name, cat_out)
        delta, source = resolve_delta(cfg, name)
        print(f"{name}: delta={delta} ({source})")
        X = _stack([it.path for it in idx.test], res)
        result = det.detect(X)
        rec_root = cat_out / "reconstruct"
        rows = []
        for i, item in enumerate(idx.test):
            d = rec_root / item.defect_type / item.path.stem
            d.mkdir(parents=True, exist_ok=True)
            write_image(d / "reconstruction.png", to_storage_uint8(result.reconstructions[i]))
            write_raw_array(d / "map.bin", result.maps[i])
            write_map_png(d / "map.png", result.maps[i])
            tr = result.traces[i]
            with open(d / "trace.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["t", "difference"])
                for r in tr.records:
                    w.writerow([r.t, repr(float(r.difference))])
            steps = d / "steps"
            steps.mkdir(exist_ok=True)
            for r in tr.records:
                write_raw_array(steps / f"{r.t:04d}_generated.bin", r.generated_x0)
                write_raw_array(steps / f"{r.t:04d}_direct.bin", r.direct_x0)
            if tr.mask is not None:
                write_raw_array(d / "mask.bin", tr.mask)
            write_raw_array(d / "reconstruction.bin", result.reconstructions[i])
            rows.append({"name": item.name, "defect_type": item.defect_type, "label": item.label,
                         "score": repr(float(result.scores[i])),
                         "detection_step": "" if tr.detection_step is None else tr.detection_step,
                         "proper_step": tr.proper_step})
        with open(rec_root / "scores.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        print(f"{name}: reconstructed {len(rows)} images, proper steps "
              f"{min(result.proper_steps)}..{max(result.proper_steps)}")


def cmd_eval(cfg: dict, args) -> None:
    layout = _categories(cfg)
    res = cfg["model"]["resolution"]
    reports = []
    for name, idx in layout.categories.items():
        cat_out = output_root(cfg) / name
        masks = [read_mask(it.mask_path, (res, res)) for it in idx.test]
        labels = [it.label for it in idx.test]
        if args.scorer == "oracle":
            scores = [float(l) for l in labels]
            maps = [m.astype(np.float32) for m in masks]
        else:
            rows = {r["name"]: r for r in _read_scores(cat_out / "reconstruct" / "scores.csv")}
            missing = [it.name for it in idx.test if it.name not in rows]
            if missing:
                raise CommandError(f"reconstruct outputs missing for {missing[:3]} "
                                   f"({len(missing)} images); rerun 'adarecon reconstruct'")
            scores = [float(rows[it.name]["score"]) for it in idx.test]
            maps = [read_raw_array(cat_out / "reconstruct" / it.defect_type / it.path.stem / "map.bin")
                    for it in idx.test]
        report = evaluate(scores, labels, maps, masks, category=name,
                          config={**experiment_config(cfg), "scorer": args.scorer, "category_delta": resolve_delta(cfg, name)[0]})
        reports.append(report)
        print(format_report(report))
    out = output_root(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(reports, out / "metrics.csv")
    print(f"wrote {out / 'metrics.csv'}")


def _colorize(amap: np.ndarray, lo: float, hi: float) -> np.ndarray:
    from matplotlib import colormaps

    scaled = np.zeros_like(amap) if hi <= lo else np.clip((amap - lo) / (hi - lo), 0, 1)
    return (colormaps["jet"](scaled)[..., :3] * 255).round().astype(np.uint8)


def cmd_report(cfg: dict, args) -> None:
    layout = _categories(cfg)
    res = cfg["model"]["resolution"]
    for name, idx in layout.categories.items():
        cat_out = output_root(cfg) / name
        _read_scores(cat_out / "reconstruct" / "scores.csv")
        rec_root = cat_out / "reconstruct"
        maps = {it.name: read_raw_array(rec_root / it.defect_type / it.path.stem / "map.bin") for it in idx.test}
        # one colour scale per category so panels are comparable
        lo = min(float(m.min()) for m in maps.values())
        hi = max(float(m.max()) for m in maps.values())
        out_dir = cat_out / "report"
        out_dir.mkdir(parents=True, exist_ok=True)
        for it in idx.test:
            img = read_image(it.path, res, "RGB")
            rec = read_image(rec_root / it.defect_type / it.path.stem / "reconstruction.png", res, "RGB")
            heat = _colorize(maps[it.name], lo, hi)
            overlay = (0.5 * img.astype(np.float32) + 0.5 * heat).round().astype(np.uint8)
            gt = np.repeat(read_mask(it.mask_path, (res, res))[..., None] * 255, 3, axis=2)
            gap = np.full((res, 2, 3), 255, np.uint8)
            panel = np.concatenate([img, gap, rec, gap, overlay, gap, gt], axis=1)
            write_image(out_dir / f"{it.defect_type}_{it.path.stem}.png", panel)
        print(f"{name}: wrote {len(idx.test)} panels to {out_dir}")


def cmd_synth_preview(cfg: dict, args) -> None:
    res = cfg["model"]["resolution"]
    params = SynthParams(**{k: tuple(v) if isinstance(v, list) else v
                            for k, v in cfg["train"]["synth"].items()})
    if cfg["data"]["root"]:
        layout = _categories(cfg)
        paths = [p for idx in layout.categories.values() for p in idx.train]
        images = [read_image(p, res, "RGB") for p in paths[: args.count]]
    else:
        texture = cfg["toy"]["textures"][0]
        ds = make_toy_dataset(ToyConfig(texture=texture, size=res, n_train=args.count,
                                        n_test_normal=0, defect_count=1, seed=cfg["seed"]))
        images = ds.train
    rng = np.random.default_rng(cfg["seed"])
    rows = []
    for img in images:
        pair = synthesize_anomaly(to_model_range(img), rng, params)
        n_vis = to_storage_uint8(np.clip(pair.n, -1, 1))  # difference, 0 shown as mid-grey
        mask = np.repeat((pair.mask * 255).astype(np.uint8)[..., None], 3, axis=2)
        cells = [to_storage_uint8(pair.x), to_storage_uint8(pair.x_a), mask, n_vis]
        cells = [c if c.ndim == 3 else np.repeat(c[..., None], 3, axis=2) for c in cells]
        rows.append(np.concatenate(cells, axis=1))
    out = output_root(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_image(out / "synth_preview.png", np.concatenate(rows, axis=0))
    print(f"wrote {out / 'synth_preview.png'} ({len(rows)} rows: normal | anomalous | mask | difference)")


HANDLERS = {"train": cmd_train, "reconstruct": cmd_reconstruct, "eval": cmd_eval,
            "report": cmd_report, "synth-preview": cmd_synth_preview, "make-toy": cmd_make_toy}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    cfg = None
    try:
        cfg = load_config(args.config, overrides_from(args))
        echo_config(cfg, args.command, output_root(cfg))
        torch.manual_seed(cfg["seed"])
        HANDLERS[args.command](cfg, args)
        return 0
    except (ConfigError, DatasetError, CommandError, ValueError, OSError) as exc:
        cause = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"adarecon {args.command}: error: {cause}", file=sys.stderr)
        detail = output_root(cfg) / "error.log" if cfg else (args.out or Path(".")) / "adarecon-error.log"
        try:
            detail.parent.mkdir(parents=True, exist_ok=True)
            detail.write_text(f"{exc}\n\n{traceback.format_exc()}")
            print(f"details: {detail}", file=sys.stderr)
        except OSError:
            traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
