"""Command-line workbench.

Subcommands: ``phantom`` synthesizes a labeled cohort, ``crossval`` runs
subject-grouped k-fold training/evaluation, ``segment`` applies a saved
checkpoint to one volume, ``evaluate`` scores predicted masks against
ground truth and emits the metric/statistics reports.

Every run resolves its parameters (flags > config file > scale preset),
writes them as runconfig.json next to its outputs, and is byte-for-byte
reproducible for a fixed --seed. CARTISEG_MAX_WORKERS caps fold
concurrency in crossval (default 1).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import pathlib
import sys

import numpy as np

from . import data as D
from . import metrics
from . import nets
from . import phantom as PH
from . import reports
from . import train as TR

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

WORKERS_ENV = "CARTISEG_MAX_WORKERS"

SCALES = {
    "desk": {
        "input_size": 64, "base_channels": 8, "batch_size": 4,
        "augment_multiplier": 2, "epochs": 8, "learning_rate": 2e-3,
        "dims": (16, 64, 64),
    },
    "paper": {
        "input_size": 256, "base_channels": 64, "batch_size": 32,
        "augment_multiplier": 10, "epochs": 60, "learning_rate": 5e-3,
        "dims": (88, 256, 256),
    },
}


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, ValueError) as exc:
        raise D.FormatError(f"config file {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise D.FormatError(f"config file {path}: expected a JSON object")
    return cfg


def _resolve(ns, file_cfg: dict, defaults: dict) -> dict:
    """flag > config file > default, per key."""
    out = {}
    for key, default in defaults.items():
        flag = getattr(ns, key, None)
        if flag is not None:
            out[key] = flag
        elif key in file_cfg:
            out[key] = file_cfg[key]
        else:
            out[key] = default
    return out


def _write_runconfig(out_dir: pathlib.Path, command: str, resolved: dict) -> None:
    payload = {"command": command}
    for k, v in resolved.items():
        payload[k] = list(v) if isinstance(v, tuple) else v
    reports.write_json(out_dir / "runconfig.json", payload)


def _volume_id(meta: D.ScanMeta) -> str:
    return f"{meta.subject_id}/{meta.hand}/{meta.coil}/{meta.session}"


# ---------------------------------------------------------------------------
# phantom


def cmd_phantom(ns) -> int:
    file_cfg = _load_config_file(ns.config)
    preset = SCALES[ns.scale]
    resolved = _resolve(ns, file_cfg, {
        "count": 0, "dims": preset["dims"], "voxel": PH.DEFAULT_VOXEL,
        "snr": 12.0, "repeats": 0, "degraded": 0, "degrade_factor": 2,
        "seed": 0, "out": None, "scale": ns.scale,
    })
    if resolved["out"] is None:
        raise ValueError("phantom needs --out DIR")
    count = int(resolved["count"])
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    dims = tuple(int(x) for x in resolved["dims"])
    voxel = tuple(float(x) for x in resolved["voxel"])
    seed = int(resolved["seed"])
    repeats = int(resolved["repeats"])
    degraded = int(resolved["degraded"])
    factor = int(resolved["degrade_factor"])
    if repeats > count or degraded > count:
        raise ValueError("--repeats/--degraded cannot exceed --count")
    if count and min(dims) < PH.MIN_EXTENT:
        raise ValueError(f"every dim must be >= {PH.MIN_EXTENT}, got {dims}")

    out = pathlib.Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_runconfig(out, "phantom", resolved)

    rows = []

    def _emit(vol, mask, meta):
        stem = f"{meta.subject_id}_{meta.session}_{meta.coil}"
        D.save_volume(vol, out / f"{stem}_img.wcs")
        D.save_volume(mask, out / f"{stem}_msk.wcs")
        rows.append({
            "image_path": f"{stem}_img.wcs", "mask_path": f"{stem}_msk.wcs",
            "subject_id": meta.subject_id, "hand": meta.hand, "coil": meta.coil,
            "field_T": meta.field_t, "session": meta.session,
        })

    for i in range(count):
        sid = f"sub-{i:03d}"
        base_seed = (seed, i, 0)
        cfg = PH.PhantomConfig(snr=float(resolved["snr"]), subject_id=sid)
        vol, mask, meta = PH.generate_phantom(base_seed, dims, voxel, cfg)
        _emit(vol, mask, meta)
        if i < repeats:
            # second acquisition of the same anatomy with the other coil
            cfg2 = PH.PhantomConfig(snr=float(resolved["snr"]), subject_id=sid,
                                    coil="coil-b", geometry_seed=base_seed)
            _emit(*PH.generate_phantom((seed, i, 1), dims, voxel, cfg2))
        if i < degraded:
            dvol, dmask = D.degrade_resolution(vol, mask, factor)
            meta_lo = D.ScanMeta(sid, meta.hand, meta.coil, meta.field_t, "ses-lowres")
            _emit(dvol, dmask, meta_lo)

    D.save_manifest(rows, out / "manifest.json")
    print(f"wrote {len(rows)} scans to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# crossval


def _fold_job(fold: D.FoldSplit, dataset: D.Dataset, mcfg: nets.ModelConfig,
              tcfg: TR.TrainConfig, seed: int, out: pathlib.Path,
              want_history: bool) -> dict:
    train_records = [dataset.entries[i] for i in fold.train_idx]
    test_records = [dataset.entries[i] for i in fold.test_idx]
    fold_dir = out / f"fold{fold.fold}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    model = nets.build_model(mcfg, np.random.default_rng((seed, 1, fold.fold, 0)))
    result = {"fold": fold.fold, "status": "ok", "volume_rows": [],
              "slice_rows": [], "zone_volumes": [], "pairs": [],
              "v_gt": [], "v_pred": [], "dsc3d": []}
    try:
        model, history = TR.train(model, train_records, tcfg,
                                  np.random.default_rng((seed, 1, fold.fold, 1)))
    except TR.TrainingDiverged as exc:
        result["status"] = f"diverged: {exc}"
        for rec in test_records:
            result["volume_rows"].append({
                "volume_id": _volume_id(rec.meta), "fold": fold.fold,
                "status": "diverged", "dsc3d": None, "v_gt_mm3": None,
                "v_pred_mm3": None, "delta_v_pct": None,
            })
        return result
    nets.save_checkpoint(model, fold_dir / "checkpoint.wcsm")
    if want_history:
        with open(fold_dir / "history.csv", "w") as fh:
            history.to_csv(fh)
    for rec in test_records:
        pred, _ = TR.segment_volume(model, rec.image)
        vid = _volume_id(rec.meta)
        d3 = metrics.dsc_3d(pred, rec.mask)
        v_gt = metrics.cartilage_volume(rec.mask)
        v_pred = metrics.cartilage_volume(pred)
        delta = metrics.volume_error(v_gt, v_pred) if v_gt > 0 else None
        result["volume_rows"].append({
            "volume_id": vid, "fold": fold.fold, "status": "ok", "dsc3d": d3,
            "v_gt_mm3": v_gt, "v_pred_mm3": v_pred, "delta_v_pct": delta,
        })
        result["pairs"].append((pred.data, rec.mask.data))
        result["v_gt"].append(v_gt)
        result["v_pred"].append(v_pred)
        result["dsc3d"].append(d3)
        gt_counts = [int(rec.mask.data[z].sum()) for z in range(rec.mask.dims[0])]
        dscs = [metrics.dsc_2d(pred.data[z], rec.mask.data[z])
                for z in range(rec.mask.dims[0])]
        zones = metrics.zone_assignments(gt_counts) if max(gt_counts) > 0 else None
        for z, dsc in enumerate(dscs):
            result["slice_rows"].append({
                "volume_id": vid, "slice_idx": z,
                "zone": reports.ZONE_LABELS[zones[z]] if zones else None,
                "dsc2d": dsc,
            })
        if zones is not None:
            result["zone_volumes"].append(list(zip(dscs, gt_counts)))
    return result


def cmd_crossval(ns) -> int:
    file_cfg = _load_config_file(ns.config)
    preset = SCALES[ns.scale]
    resolved = _resolve(ns, file_cfg, {
        "manifest": None, "model": "attn-unet", "folds": 5,
        "base_channels": preset["base_channels"], "input_size": preset["input_size"],
        "dropout": 0.2, "noise": 0.35,
        "learning_rate": preset["learning_rate"], "schedule": "exponential",
        "decay_factor": 0.93, "restart_period": 20,
        "batch_size": preset["batch_size"], "epochs": preset["epochs"],
        "augment_multiplier": preset["augment_multiplier"],
        "seed": 0, "out": None, "scale": ns.scale, "history": False,
    })
    if resolved["manifest"] is None or resolved["out"] is None:
        raise ValueError("crossval needs --manifest PATH and --out DIR")
    if resolved["model"] not in nets.VARIANTS:
        raise ValueError(f"unknown model {resolved['model']!r}, "
                         f"choose from {sorted(nets.VARIANTS)}")
    depth, attention = nets.VARIANTS[resolved["model"]]
    mcfg = nets.ModelConfig(
        depth=depth, base_channels=int(resolved["base_channels"]),
        attention=attention, dropout_p=float(resolved["dropout"]),
        noise_level=float(resolved["noise"]), input_size=int(resolved["input_size"]))
    tcfg = TR.TrainConfig(
        learning_rate=float(resolved["learning_rate"]), schedule=resolved["schedule"],
        decay_factor=float(resolved["decay_factor"]),
        restart_period=int(resolved["restart_period"]),
        batch_size=int(resolved["batch_size"]), epochs=int(resolved["epochs"]),
        augment_multiplier=int(resolved["augment_multiplier"]))
    seed = int(resolved["seed"])
    k = int(resolved["folds"])

    dataset = D.load_manifest(resolved["manifest"])
    folds = D.group_kfold(dataset, k, np.random.default_rng((seed, 0)))
    for fold in folds:
        train_subj = {dataset.entries[i].meta.subject_id for i in fold.train_idx}
        test_subj = {dataset.entries[i].meta.subject_id for i in fold.test_idx}
        assert not (train_subj & test_subj), f"subject leakage in fold {fold.fold}"

    out = pathlib.Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_runconfig(out, "crossval", resolved)

    workers = max(1, int(os.environ.get(WORKERS_ENV, "1") or "1"))
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_fold_job, fold, dataset, mcfg, tcfg, seed,
                                   out, bool(resolved["history"]))
                       for fold in folds]
            results = [f.result() for f in futures]
    else:
        results = [_fold_job(fold, dataset, mcfg, tcfg, seed, out,
                             bool(resolved["history"])) for fold in folds]
    results.sort(key=lambda r: r["fold"])

    report_dir = out / "report"
    report_dir.mkdir(exist_ok=True)
    slice_rows, volume_rows, zone_volumes, pairs = [], [], [], []
    v_gt, v_pred, dsc3d = [], [], []
    for res in results:
        slice_rows.extend(res["slice_rows"])
        volume_rows.extend(res["volume_rows"])
        zone_volumes.extend(res["zone_volumes"])
        pairs.extend(res["pairs"])
        v_gt.extend(res["v_gt"])
        v_pred.extend(res["v_pred"])
        dsc3d.extend(res["dsc3d"])
    reports.write_slices_csv(report_dir / "slices.csv", slice_rows)
    reports.write_volumes_csv(report_dir / "volumes.csv", volume_rows)
    zone_table = metrics.zone_analysis_pooled(zone_volumes) if zone_volumes \
        else metrics.ZoneTable([metrics.ZoneBin(None, None, 0)] * 4)
    reports.write_zones_csv(report_dir / "zones.csv", zone_table)

    zone_groups = _zone_groups(slice_rows)
    summary = reports.agreement_summary(v_gt, v_pred, dsc3d, zone_groups)
    try:
        summary["precision_pooled"] = metrics.precision_overall(pairs) if pairs else None
    except metrics.NoPredictionsError as exc:
        summary["precision_pooled"] = {"error": str(exc)}
    summary["mean_dsc3d"] = float(np.mean(dsc3d)) if dsc3d else None
    deltas = [r["delta_v_pct"] for r in volume_rows if r["delta_v_pct"] is not None]
    summary["mean_delta_v_pct"] = float(np.mean(deltas)) if deltas else None
    summary["folds"] = [{"fold": r["fold"], "status": r["status"]} for r in results]
    reports.write_json(report_dir / "stats.json", summary)
    ok = sum(1 for r in results if r["status"] == "ok")
    print(f"crossval done: {ok}/{len(results)} folds ok, "
          f"mean 3D DSC {summary['mean_dsc3d']}")
    return EXIT_OK


def _zone_groups(slice_rows) -> dict:
    groups: dict = {label: [] for label in reports.ZONE_LABELS}
    for row in slice_rows:
        if row["zone"] is not None:
            groups[row["zone"]].append(row["dsc2d"])
    return groups


# ---------------------------------------------------------------------------
# segment


def cmd_segment(ns) -> int:
    resolved = _resolve(ns, _load_config_file(ns.config), {
        "checkpoint": None, "volume": None, "out": None, "seed": 0, "scale": ns.scale,
    })
    for key in ("checkpoint", "volume", "out"):
        if resolved[key] is None:
            raise ValueError(f"segment needs --{key}")
    model = nets.load_checkpoint(resolved["checkpoint"])
    vol = D.load_volume(resolved["volume"])
    if not isinstance(vol, D.Volume):
        raise ValueError(f"{resolved['volume']} is a mask file, expected an image volume")
    pred, seconds = TR.segment_volume(model, vol)
    out_path = pathlib.Path(resolved["out"])
    if out_path.parent:
        out_path.parent.mkdir(parents=True, exist_ok=True)
    D.save_volume(pred, out_path)
    reports.write_json(out_path.with_suffix(".runconfig.json"),
                       {"command": "segment", "checkpoint": str(resolved["checkpoint"]),
                        "volume": str(resolved["volume"]), "out": str(out_path)})
    print(f"segmented {vol.dims[0]} slices in {seconds:.3f} s")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def _load_mask_manifest(path) -> list[tuple[D.MaskVolume, D.ScanMeta]]:
    """Read a manifest keeping only the masks (predictions) and metadata."""
    base = pathlib.Path(path).parent
    try:
        with open(path) as fh:
            rows = json.load(fh)
    except (OSError, ValueError) as exc:
        raise D.FormatError(f"{path}: {exc}") from None
    out = []
    for row in rows:
        missing = [k for k in D.MANIFEST_KEYS if k not in row]
        if missing:
            raise D.FormatError(f"{path}: manifest row missing keys {missing}")
        mask = D.load_volume(base / row["mask_path"])
        if not isinstance(mask, D.MaskVolume):
            raise D.FormatError(f"{path}: {row['mask_path']} is not a mask file")
        meta = D.ScanMeta(row["subject_id"], row["hand"], row["coil"],
                          float(row["field_T"]), row["session"])
        out.append((mask, meta))
    return out


def cmd_evaluate(ns) -> int:
    resolved = _resolve(ns, _load_config_file(ns.config), {
        "pred_manifest": None, "gt_manifest": None, "out": None,
        "seed": 0, "scale": ns.scale,
    })
    for key in ("pred_manifest", "gt_manifest", "out"):
        if resolved[key] is None:
            raise ValueError(f"evaluate needs --{key.replace('_', '-')}")
    gt_ds = D.load_manifest(resolved["gt_manifest"])
    preds = _load_mask_manifest(resolved["pred_manifest"])
    pred_by_id = {}
    for mask, meta in preds:
        sid = meta.scan_id()
        if sid in pred_by_id:
            raise ValueError(f"duplicate scan id in predictions: {sid}")
        pred_by_id[sid] = mask
    gt_ids = {rec.meta.scan_id() for rec in gt_ds.entries}
    missing = sorted(str(i) for i in (gt_ids - set(pred_by_id)))
    extra = sorted(str(i) for i in (set(pred_by_id) - gt_ids))
    if missing or extra:
        raise ValueError(f"manifests do not pair up: missing predictions for "
                         f"{missing}; predictions without ground truth {extra}")

    out = pathlib.Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_runconfig(out, "evaluate", resolved)

    slice_rows, volume_rows, zone_volumes, pairs = [], [], [], []
    v_gt_list, v_pred_list, dsc3d_list = [], [], []
    vol_by_id = {}
    for rec in gt_ds.entries:
        sid = rec.meta.scan_id()
        pred = pred_by_id[sid]
        if pred.dims != rec.mask.dims:
            raise ValueError(f"{sid}: prediction dims {pred.dims} != GT {rec.mask.dims}")
        vid = _volume_id(rec.meta)
        d3 = metrics.dsc_3d(pred, rec.mask)
        v_gt = metrics.cartilage_volume(rec.mask)
        v_pred = metrics.cartilage_volume(pred)
        delta = metrics.volume_error(v_gt, v_pred) if v_gt > 0 else None
        volume_rows.append({"volume_id": vid, "fold": None, "status": "ok",
                            "dsc3d": d3, "v_gt_mm3": v_gt, "v_pred_mm3": v_pred,
                            "delta_v_pct": delta})
        vol_by_id[sid] = (v_gt, v_pred)
        pairs.append((pred.data, rec.mask.data))
        v_gt_list.append(v_gt)
        v_pred_list.append(v_pred)
        dsc3d_list.append(d3)
        gt_counts = [int(rec.mask.data[z].sum()) for z in range(rec.mask.dims[0])]
        dscs = [metrics.dsc_2d(pred.data[z], rec.mask.data[z])
                for z in range(rec.mask.dims[0])]
        zones = metrics.zone_assignments(gt_counts) if max(gt_counts) > 0 else None
        for z, dsc in enumerate(dscs):
            slice_rows.append({"volume_id": vid, "slice_idx": z,
                               "zone": reports.ZONE_LABELS[zones[z]] if zones else None,
                               "dsc2d": dsc})
        if zones is not None:
            zone_volumes.append(list(zip(dscs, gt_counts)))

    reports.write_slices_csv(out / "slices.csv", slice_rows)
    reports.write_volumes_csv(out / "volumes.csv", volume_rows)
    zone_table = metrics.zone_analysis_pooled(zone_volumes) if zone_volumes \
        else metrics.ZoneTable([metrics.ZoneBin(None, None, 0)] * 4)
    reports.write_zones_csv(out / "zones.csv", zone_table)
    reports.write_xy_csv(out / "correlation.csv", "v_gt_mm3", "v_pred_mm3",
                         v_gt_list, v_pred_list)
    means = [(g + p) / 2.0 for g, p in zip(v_gt_list, v_pred_list)]
    diffs = [p - g for g, p in zip(v_gt_list, v_pred_list)]
    reports.write_xy_csv(out / "bland_altman.csv", "mean_mm3", "diff_mm3", means, diffs)

    summary = reports.agreement_summary(v_gt_list, v_pred_list, dsc3d_list,
                                        _zone_groups(slice_rows))
    try:
        summary["precision_pooled"] = metrics.precision_overall(pairs) if pairs else None
    except metrics.NoPredictionsError as exc:
        summary["precision_pooled"] = {"error": str(exc)}
    summary["mean_dsc3d"] = float(np.mean(dsc3d_list)) if dsc3d_list else None
    deltas = [r["delta_v_pct"] for r in volume_rows if r["delta_v_pct"] is not None]
    summary["mean_delta_v_pct"] = float(np.mean(deltas)) if deltas else None
    reports.write_json(out / "stats.json", summary)

    _write_pair_tables(out, gt_ds, vol_by_id)
    print(f"evaluated {len(volume_rows)} volumes")
    return EXIT_OK


def _write_pair_tables(out: pathlib.Path, gt_ds: D.Dataset, vol_by_id: dict) -> None:
    """Repeatability rows pair same-resolution scans of one subject+hand
    across coils; resolution rows pair scans of one subject+hand+coil across
    voxel sizes. Pairing is metadata-driven, never filename-driven."""
    entries = gt_ds.entries
    repeat_rows, resolution_rows = [], []
    for i, a in enumerate(entries):
        for b in entries[i + 1:]:
            ma, mb = a.meta, b.meta
            ga, pa = vol_by_id[ma.scan_id()]
            gb, pb = vol_by_id[mb.scan_id()]
            if (ma.subject_id == mb.subject_id and ma.hand == mb.hand
                    and ma.coil != mb.coil
                    and a.image.voxel_size_mm == b.image.voxel_size_mm):
                repeat_rows.append({
                    "subject_id": ma.subject_id, "hand": ma.hand,
                    "coil_1": ma.coil, "coil_2": mb.coil,
                    "v_pred_1_mm3": pa, "v_pred_2_mm3": pb,
                    "pred_diff_pct": metrics.repeatability_pair(pa, pb)
                    if max(pa, pb) > 0 else None,
                    "v_gt_1_mm3": ga, "v_gt_2_mm3": gb,
                    "gt_diff_pct": metrics.repeatability_pair(ga, gb)
                    if max(ga, gb) > 0 else None,
                })
            if (ma.subject_id == mb.subject_id and ma.hand == mb.hand
                    and ma.coil == mb.coil
                    and a.image.voxel_size_mm != b.image.voxel_size_mm):
                lo, hi = (a, b) if np.prod(a.image.voxel_size_mm) <= \
                    np.prod(b.image.voxel_size_mm) else (b, a)
                g1, p1 = vol_by_id[lo.meta.scan_id()]
                g2, p2 = vol_by_id[hi.meta.scan_id()]
                resolution_rows.append({
                    "subject_id": ma.subject_id, "hand": ma.hand,
                    "voxel_fine_mm": "x".join(repr(v) for v in lo.image.voxel_size_mm),
                    "voxel_coarse_mm": "x".join(repr(v) for v in hi.image.voxel_size_mm),
                    "v_pred_fine_mm3": p1, "v_pred_coarse_mm3": p2,
                    "pred_diff_pct": metrics.repeatability_pair(p1, p2)
                    if max(p1, p2) > 0 else None,
                    "v_gt_fine_mm3": g1, "v_gt_coarse_mm3": g2,
                    "gt_diff_pct": metrics.repeatability_pair(g1, g2)
                    if max(g1, g2) > 0 else None,
                })
    reports.write_csv(out / "repeatability.csv",
                      ("subject_id", "hand", "coil_1", "coil_2", "v_pred_1_mm3",
                       "v_pred_2_mm3", "pred_diff_pct", "v_gt_1_mm3", "v_gt_2_mm3",
                       "gt_diff_pct"), repeat_rows)
    reports.write_csv(out / "resolution.csv",
                      ("subject_id", "hand", "voxel_fine_mm", "voxel_coarse_mm",
                       "v_pred_fine_mm3", "v_pred_coarse_mm3", "pred_diff_pct",
                       "v_gt_fine_mm3", "v_gt_coarse_mm3", "gt_diff_pct"),
                      resolution_rows)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cartiseg",
        description="Thin-sheet segmentation workbench on synthetic phantom volumes.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with parameter defaults")
        p.add_argument("--seed", type=int, help="global rng seed (default 0)")
        p.add_argument("--out", help="output directory (or file for segment)")
        p.add_argument("--scale", choices=sorted(SCALES), default="desk",
                       help="parameter preset (default desk)")

    p = sub.add_parser("phantom", help="generate a labeled synthetic cohort")
    common(p)
    p.add_argument("--count", type=int, help="number of subjects")
    p.add_argument("--dims", type=int, nargs=3, metavar=("D", "H", "W"))
    p.add_argument("--voxel", type=float, nargs=3, metavar=("DZ", "DY", "DX"))
    p.add_argument("--snr", type=float)
    p.add_argument("--repeats", type=int,
                   help="first N subjects get a second acquisition (other coil)")
    p.add_argument("--degraded", type=int,
                   help="first N subjects also get a resolution-degraded copy")
    p.add_argument("--degrade-factor", dest="degrade_factor", type=int)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("crossval", help="subject-grouped k-fold training run")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--model", choices=sorted(nets.VARIANTS))
    p.add_argument("--folds", type=int)
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--input-size", dest="input_size", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--schedule", choices=TR.SCHEDULES)
    p.add_argument("--decay", dest="decay_factor", type=float)
    p.add_argument("--restart", dest="restart_period", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--augment", dest="augment_multiplier", type=int)
    p.add_argument("--history", action="store_const", const=True,
                   help="also write per-fold history.csv (wall times vary run to run)")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("segment", help="apply a checkpoint to one volume")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--volume")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    common(p)
    p.add_argument("--pred-manifest", dest="pred_manifest")
    p.add_argument("--gt-manifest", dest="gt_manifest")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        return ns.func(ns)
    except (ValueError, TypeError) as exc:          # includes format/config errors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, RuntimeError, AssertionError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
