"""Pipeline driver: every stage of the affinity-grouping pipeline as a
subcommand.

Subcommands: encode, supervise, group, score, select, eval, synth,
render. Configuration comes from one JSON file (--config) with
command-line flags taking precedence. All randomness flows from a single
seed; per-image sub-seeds are derived from (seed, stage, image id), so
reruns are byte-identical. Stage outputs are written atomically.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import hashlib
import json
import os
import sys

import numpy as np

from . import affinity as aff_mod
from . import grouping, objectness, evalkit, io_formats, synth
from .io_formats import _atomic_write
from .masks import InstanceSet

DEFAULT_CONFIG = {
    "aggregation": "min",
    "grouping": {
        "method": "ucm",
        "thresholds": [0.3, 0.5, 0.7],
        "k_schedule": [50.0, 100.0, 200.0],
        "min_size": 8,
        "use_owt": False,
        "use_globalization": False,
        "n_eigvecs": 4,
        "downsample": 2,
        "sigma": 0.1,
        "mix_weight": 0.5,
        "min_area": 1,
        "max_regions": 1000,
    },
    "selection": {"k": 3, "overlap_iou": 0.5, "use_oln": False},
    "eval": {"budgets": [10, 100]},
    "seed": 0,
}


class CliError(RuntimeError):
    pass


def sub_seed(seed: int, stage: str, image_id) -> int:
    digest = hashlib.sha256(f"{seed}:{stage}:{image_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def load_config(path: str | None, overrides: dict) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"config {path}: {e}") from e
        _merge(cfg, user)
    _merge(cfg, overrides)
    return cfg


def _merge(base: dict, extra: dict) -> None:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v


def _config_overrides(args) -> dict:
    """Collect flag overrides, keeping only flags the user actually set."""
    out: dict = {}
    grouping_keys = (
        "method", "thresholds", "k_schedule", "min_size", "use_owt",
        "use_globalization", "n_eigvecs", "downsample", "sigma",
        "mix_weight", "min_area", "max_regions",
    )
    selection_keys = ("k", "overlap_iou", "use_oln")
    for key in grouping_keys:
        v = getattr(args, key, None)
        if v is not None:
            out.setdefault("grouping", {})[key] = v
    for key in selection_keys:
        v = getattr(args, key, None)
        if v is not None:
            out.setdefault("selection", {})[key] = v
    if getattr(args, "budgets", None) is not None:
        out["eval"] = {"budgets": args.budgets}
    for key in ("aggregation", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    return out


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode()


def _gt_instances(ds: dict, image_id) -> InstanceSet:
    masks, ids = [], []
    for a in ds["annotations"]:
        if a["image_id"] == image_id and a["role"] == "gt":
            masks.append(io_formats.annotation_to_mask(a))
            ids.append(a["id"])
    img = next(i for i in ds["images"] if i["id"] == image_id)
    return InstanceSet(masks=masks, ids=ids, dims=(img["height"], img["width"]))


def _run_per_image(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- encode


def cmd_encode(args) -> int:
    ds = io_formats.dataset_read(args.dataset)
    os.makedirs(args.out, exist_ok=True)

    def one(img):
        inst = _gt_instances(ds, img["id"])
        pa = aff_mod.encode_pa(inst)
        io_formats.afm_write(pa, os.path.join(args.out, f"{img['id']}.afm"))
        sup = aff_mod.build_supervision(inst)
        valid = sup.valid
        positive = (sup.target > 0.5) & valid
        sidecar = {
            "image_id": img["id"],
            "positives": int(positive.sum()),
            "negatives": int(valid.sum() - positive.sum()),
            "positive_weight": float(sup.weight[positive].max()) if positive.any() else 1.0,
        }
        _atomic_write(os.path.join(args.out, f"{img['id']}.sup.json"),
                      _json_bytes(sidecar))

    _run_per_image(one, ds["images"], args.jobs)
    return 0


# -------------------------------------------------------------- supervise


def cmd_supervise(args) -> int:
    ds = io_formats.dataset_read(args.dataset)

    def one(img):
        pred_path = os.path.join(args.pred, f"{img['id']}.afm")
        if not os.path.exists(pred_path):
            raise CliError(f"missing prediction {pred_path} for image {img['id']}")
        pred = io_formats.afm_read(pred_path)
        if pred.ndim != 3:
            raise CliError(f"{pred_path}: expected an 8-channel affinity map")
        sup = aff_mod.build_supervision(_gt_instances(ds, img["id"]))
        return img["id"], aff_mod.masked_weighted_bce(pred, sup)

    losses = _run_per_image(one, ds["images"], args.jobs)
    report = {
        "per_image": {str(i): v for i, v in losses},
        "mean_loss": float(np.mean([v for _, v in losses])) if losses else 0.0,
    }
    _atomic_write(args.out, _json_bytes(report))
    return 0


# ------------------------------------------------------------------ group


def group_affinity(aff: np.ndarray, cfg: dict) -> grouping.RegionSet:
    """Run the configured grouping method on one affinity map."""
    g = cfg["grouping"]
    method = g["method"]
    if method == "cc":
        return grouping.cc_group(aff, g["thresholds"])
    if method == "gbh":
        hier = grouping.gbh_group(aff, g["k_schedule"], g["min_size"])
        return grouping.extract_regions(hier, g["min_area"], g["max_regions"])
    if method == "ucm":
        edge = aff_mod.aggregate(aff, cfg["aggregation"])
        if g["use_globalization"]:
            glob = grouping.spectral_globalize(
                edge, g["n_eigvecs"], g["downsample"], g["sigma"]
            )
            edge = grouping.combine_edges(edge, glob, g["mix_weight"])
        labels, arcs = grouping.watershed(edge)
        if g["use_owt"]:
            arcs = grouping.owt_rescore(arcs, aff)
        hier = grouping.ucm_build(labels, arcs)
        return grouping.extract_regions(hier, g["min_area"], g["max_regions"])
    raise CliError(f"unknown grouping method {method!r}")


def _afm_inputs(path: str) -> list[tuple[str, str]]:
    """(image_id, afm path) pairs from a single file or a directory."""
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.endswith(".afm"))
        if not names:
            raise CliError(f"no .afm files in {path}")
        return [(os.path.splitext(n)[0], os.path.join(path, n)) for n in names]
    return [(os.path.splitext(os.path.basename(path))[0], path)]


def cmd_group(args) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    inputs = _afm_inputs(args.afm)
    if args.image_id is not None:
        if len(inputs) != 1:
            raise CliError("--image-id applies only to a single .afm input")
        inputs = [(args.image_id, inputs[0][1])]

    def one(item):
        image_id, path = item
        aff = io_formats.afm_read(path)
        if aff.ndim != 3:
            raise CliError(f"{path}: expected an 8-channel affinity map")
        regions = group_affinity(aff, cfg)
        return image_id, aff.shape[1:], regions

    results = _run_per_image(one, inputs, args.jobs)
    images, annotations = [], []
    ann_id = 1
    for image_id, (h, w), regions in results:
        images.append({"id": image_id, "file": f"{image_id}.afm",
                       "height": int(h), "width": int(w)})
        for i in range(len(regions)):
            annotations.append(io_formats.mask_to_annotation(
                regions.mask(i), ann_id, image_id, "proposal",
                provenance=regions.provenance[i]))
            ann_id += 1
    io_formats.dataset_write({"images": images, "annotations": annotations}, args.out)
    return 0


# ------------------------------------------------------------------ score


def _load_oln(path: str | None) -> dict:
    """Map annotation id -> o_oln from a sidecar of centerness/IoU scores."""
    if path is None:
        return {}
    with open(path) as f:
        entries = json.load(f)
    out = {}
    for e in entries:
        out[e["id"]] = objectness.score_o_oln(e["centerness"], e["iouness"])
    return out


def _score_regions(regions_ds: dict, afm_inputs: dict, oln: dict):
    """ScoredRegion lists per image id, in annotation order."""
    per_image: dict = {}
    for a in regions_ds["annotations"]:
        per_image.setdefault(a["image_id"], []).append(a)
    out = {}
    for image_id, anns in per_image.items():
        if image_id not in afm_inputs:
            raise CliError(f"no affinity map for image {image_id}")
        aff = io_formats.afm_read(afm_inputs[image_id])
        if aff.ndim != 3:
            raise CliError(f"{afm_inputs[image_id]}: expected 8 channels")
        scored = []
        for a in anns:
            mask = io_formats.annotation_to_mask(a)
            o_pa = objectness.score_o_pa(mask, aff).o_pa
            scored.append(objectness.ScoredRegion(
                region_id=a["id"], mask=mask, o_pa=o_pa,
                o_oln=oln.get(a["id"]),
                provenance=a.get("provenance", "")))
        out[image_id] = scored
    return out


def cmd_score(args) -> int:
    regions_ds = io_formats.dataset_read(args.regions)
    afm_map = dict(_afm_inputs(args.afm))
    scored = _score_regions(regions_ds, afm_map, _load_oln(args.oln))
    entries = []
    for image_id in sorted(scored, key=str):
        for r in scored[image_id]:
            e = {"id": r.region_id, "image_id": image_id,
                 "o_pa": r.o_pa, "combined": r.combined}
            if r.o_oln is not None:
                e["o_oln"] = r.o_oln
            entries.append(e)
    _atomic_write(args.out, _json_bytes(entries))
    return 0


# ----------------------------------------------------------------- select


def cmd_select(args) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    sel = cfg["selection"]
    regions_ds = io_formats.dataset_read(args.regions)
    gt_ds = io_formats.dataset_read(args.gt)
    afm_map = dict(_afm_inputs(args.afm))
    scored = _score_regions(regions_ds, afm_map, _load_oln(args.oln))

    images, annotations = [], []
    ann_id = 1
    for img in sorted(regions_ds["images"], key=lambda x: str(x["id"])):
        image_id = img["id"]
        gt = None
        if any(i["id"] == image_id for i in gt_ds["images"]):
            gt = _gt_instances(gt_ds, image_id)
        picked = objectness.rank_and_select(
            scored.get(image_id, []), sel["k"], gt=gt,
            overlap_iou=sel["overlap_iou"])
        if not picked:
            print(f"warning: image {image_id}: no pseudo masks survive selection",
                  file=sys.stderr)
        images.append(dict(img))
        for r in picked:
            annotations.append(io_formats.mask_to_annotation(
                r.mask, ann_id, image_id, "pseudo",
                score=r.combined, provenance=r.provenance))
            ann_id += 1
    io_formats.dataset_write({"images": images, "annotations": annotations}, args.out)
    return 0


# ------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    prop_ds = io_formats.dataset_read(args.proposals)
    gt_ds = io_formats.dataset_read(args.gt)
    per_image = []
    for img in sorted(gt_ds["images"], key=lambda x: str(x["id"])):
        gts = _gt_instances(gt_ds, img["id"])
        props = [a for a in prop_ds["annotations"]
                 if a["image_id"] == img["id"] and a["role"] in ("proposal", "pseudo")]
        props.sort(key=lambda a: (-(a.get("score", 0.0)), a["id"]))
        masks = [io_formats.annotation_to_mask(a) for a in props]
        scores = [a.get("score", 0.0) for a in props]
        per_image.append((masks, scores, gts))
    report = evalkit.evaluate_dataset(per_image, budgets=tuple(cfg["eval"]["budgets"]))
    out = report.to_dict()
    del out["per_threshold_recall"]  # keep the report compact
    _atomic_write(args.out, _json_bytes(out))
    return 0


# ------------------------------------------------------------------ synth


def cmd_synth(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for i in range(args.n_scenes):
        image_id = f"scene{i:04d}"
        spec = synth.SceneSpec(
            height=args.height, width=args.width,
            n_instances=(args.min_instances, args.max_instances),
            shape_kinds=tuple(args.shapes.split(",")),
            min_separation=args.min_separation,
            seed=sub_seed(args.seed, "synth", image_id),
        )
        inst = synth.generate_scene(spec)
        from .masks import instances_to_labelmap

        io_formats.labelmap_write(instances_to_labelmap(inst),
                                  os.path.join(args.out, f"{image_id}.png"))
        images.append({"id": image_id, "file": f"{image_id}.png",
                       "height": args.height, "width": args.width})
        for _, mask in inst:
            annotations.append(io_formats.mask_to_annotation(
                mask, ann_id, image_id, "gt"))
            ann_id += 1
    io_formats.dataset_write({"images": images, "annotations": annotations},
                             os.path.join(args.out, "dataset.json"))
    return 0


# ----------------------------------------------------------------- render


def cmd_render(args) -> int:
    ds = io_formats.dataset_read(args.dataset)
    if not any(i["id"] == args.image_id for i in ds["images"]):
        raise CliError(f"image {args.image_id} not in {args.dataset}")
    anns = [a for a in ds["annotations"] if a["image_id"] == args.image_id]
    regions = [(a["id"], io_formats.annotation_to_mask(a)) for a in anns]
    canvas = None
    if args.canvas is not None:
        canvas = io_formats.labelmap_read(args.canvas)
        canvas = (canvas > 0).astype(np.uint8) * 64
    io_formats.render_overlay(canvas, regions, args.out)
    return 0


# ------------------------------------------------------------------- main


def _add_common(p, config=True):
    p.add_argument("--jobs", type=int, default=1)
    if config:
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pagroup",
                                 description="affinity grouping pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="write affinity targets for a GT dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("supervise", help="masked BCE of predictions vs GT")
    p.add_argument("--pred", required=True, help="directory of predicted .afm files")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_supervise)

    p = sub.add_parser("group", help="group an affinity map into regions")
    p.add_argument("--afm", required=True, help=".afm file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--image-id", dest="image_id", default=None)
    p.add_argument("--method", choices=("cc", "gbh", "ucm"), default=None)
    p.add_argument("--thresholds", type=_floats, default=None)
    p.add_argument("--k-schedule", dest="k_schedule", type=_floats, default=None)
    p.add_argument("--min-size", dest="min_size", type=int, default=None)
    p.add_argument("--use-owt", dest="use_owt", action="store_const", const=True, default=None)
    p.add_argument("--use-globalization", dest="use_globalization",
                   action="store_const", const=True, default=None)
    p.add_argument("--n-eigvecs", dest="n_eigvecs", type=int, default=None)
    p.add_argument("--downsample", type=int, default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--mix-weight", dest="mix_weight", type=float, default=None)
    p.add_argument("--min-area", dest="min_area", type=int, default=None)
    p.add_argument("--max-regions", dest="max_regions", type=int, default=None)
    p.add_argument("--aggregation", choices=aff_mod.AGGREGATION_MODES, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_group)

    p = sub.add_parser("score", help="objectness scores for candidate regions")
    p.add_argument("--regions", required=True)
    p.add_argument("--afm", required=True)
    p.add_argument("--oln", default=None)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("select", help="select top-k pseudo-GT masks")
    p.add_argument("--regions", required=True)
    p.add_argument("--afm", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--oln", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--overlap-iou", dest="overlap_iou", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("eval", help="proposal-quality report")
    p.add_argument("--proposals", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budgets", type=_ints, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate synthetic GT scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--n-scenes", dest="n_scenes", type=int, default=1)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--min-instances", dest="min_instances", type=int, default=2)
    p.add_argument("--max-instances", dest="max_instances", type=int, default=8)
    p.add_argument("--shapes", default="rectangle,ellipse,blob")
    p.add_argument("--min-separation", dest="min_separation", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("render", help="render dataset masks to a PNG overlay")
    p.add_argument("--dataset", required=True)
    p.add_argument("--image-id", dest="image_id", required=True)
    p.add_argument("--canvas", default=None, help="optional label-map PNG backdrop")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_render)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, io_formats.FormatError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
