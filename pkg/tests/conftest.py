import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from amodal_kit.dataset import Dataset, from_json_obj
from amodal_kit.geometry import Box
from amodal_kit.metrics import DetectionResult


def dataset_from_plain(obj) -> Dataset:
    return from_json_obj(obj)


def results_to_objs(results):
    out = []
    for r in results:
        out.append(
            DetectionResult(
                image_id=r["image_id"],
                category_id=r["category_id"],
                amodal_box=Box.from_list(r["bbox"]),
                modal_box=None if r.get("modal_bbox") is None else Box.from_list(r["modal_bbox"]),
                score=r["score"],
                track_id=r.get("track_id"),
            )
        )
    return out


def _rand_box(rng, span=100.0, min_size=4.0, max_size=40.0):
    w = rng.uniform(min_size, max_size)
    h = rng.uniform(min_size, max_size)
    x = rng.uniform(-10, span - 10)
    y = rng.uniform(-10, span - 10)
    return [x, y, w, h]


def _modal_inside(rng, amodal):
    """Random modal box contained in the amodal box (or None, fully occluded)."""
    r = rng.random()
    if r < 0.15:
        return None
    if r < 0.4:
        return list(amodal)
    x, y, w, h = amodal
    mw = w * rng.uniform(0.2, 1.0)
    mh = h * rng.uniform(0.2, 1.0)
    mx = x + rng.uniform(0, w - mw)
    my = y + rng.uniform(0, h - mh)
    return [mx, my, mw, mh]


def random_micro_instance(seed):
    """Small random (dataset, detection results) pair in plain-dict form.

    <= 4 images over 1-2 videos, <= 3 categories, <= 4 GT, <= 6 detections,
    with uncertain flags, federation declarations, score ties and track ids.
    """
    rng = np.random.default_rng(seed)
    n_cats = int(rng.integers(1, 4))
    categories = [{"id": c, "name": f"cat{c}"} for c in range(1, n_cats + 1)]
    n_videos = int(rng.integers(1, 3))
    videos = []
    for v in range(1, n_videos + 1):
        negs = [c["id"] for c in categories if rng.random() < 0.25]
        nonex = [c["id"] for c in categories if c["id"] not in negs and rng.random() < 0.2]
        videos.append(
            {
                "id": v,
                "name": f"vid{v}",
                "width": 100,
                "height": 100,
                "neg_category_ids": negs,
                "not_exhaustive_category_ids": nonex,
            }
        )
    n_images = int(rng.integers(1, 5))
    images = []
    for i in range(1, n_images + 1):
        vid = int(rng.integers(1, n_videos + 1))
        fi = sum(1 for im in images if im["video_id"] == vid) + 1
        images.append(
            {"id": i, "video_id": vid, "frame_index": fi, "width": 100, "height": 100}
        )

    n_gt = int(rng.integers(0, 5))
    annotations = []
    track_meta = {}
    for a in range(1, n_gt + 1):
        img = images[int(rng.integers(0, n_images))]
        # reuse a track if category/video line up, else a fresh one
        track_id = None
        for tid, (tc, tv) in track_meta.items():
            if tv == img["video_id"] and rng.random() < 0.5:
                if any(
                    x["track_id"] == tid and x["image_id"] == img["id"] for x in annotations
                ):
                    continue
                track_id = tid
                cat = tc
                break
        if track_id is None:
            cat = int(rng.integers(1, n_cats + 1))
            track_id = 100 + a
            track_meta[track_id] = (cat, img["video_id"])
        amodal = _rand_box(rng)
        modal = _modal_inside(rng, amodal)
        from amodal_kit import geometry

        vis = geometry.visibility(
            None if modal is None else Box.from_list(modal), Box.from_list(amodal)
        )
        oof = geometry.is_out_of_frame(
            Box.from_list(amodal), geometry.FrameExtent(100, 100)
        )
        annotations.append(
            {
                "id": a,
                "image_id": img["id"],
                "track_id": track_id,
                "category_id": cat,
                "bbox": amodal,
                "modal_bbox": modal,
                "visibility": vis,
                "is_uncertain": int(rng.random() < 0.15),
                "out_of_frame": int(oof),
            }
        )
    # negative categories must have no ground truth in that video
    for v in videos:
        gt_cats = {
            a["category_id"]
            for a in annotations
            if images[a["image_id"] - 1]["video_id"] == v["id"]
        }
        v["neg_category_ids"] = [c for c in v["neg_category_ids"] if c not in gt_cats]

    dataset = {
        "videos": videos,
        "images": images,
        "annotations": annotations,
        "categories": categories,
    }

    n_dets = int(rng.integers(0, 7))
    score_pool = [0.9, 0.8, 0.8, 0.6, 0.5, 0.3]
    results = []
    pred_track_meta = {}
    for d in range(n_dets):
        img = images[int(rng.integers(0, n_images))]
        cat = int(rng.integers(1, n_cats + 1))
        if annotations and rng.random() < 0.6:
            base = annotations[int(rng.integers(0, len(annotations)))]
            if images[base["image_id"] - 1]["video_id"] == img["video_id"]:
                img = images[base["image_id"] - 1]
                cat = base["category_id"]
            bbox = [
                base["bbox"][0] + rng.normal(0, 3),
                base["bbox"][1] + rng.normal(0, 3),
                max(base["bbox"][2] + rng.normal(0, 3), 2),
                max(base["bbox"][3] + rng.normal(0, 3), 2),
            ]
            modal = base["modal_bbox"]
        else:
            bbox = _rand_box(rng)
            modal = _modal_inside(rng, bbox)
        track_id = None
        for tid, (tc, tv) in pred_track_meta.items():
            if tc == cat and tv == img["video_id"] and rng.random() < 0.5:
                track_id = tid
                break
        if track_id is None:
            track_id = 500 + d
            pred_track_meta[track_id] = (cat, img["video_id"])
        results.append(
            {
                "image_id": img["id"],
                "category_id": cat,
                "bbox": bbox,
                "modal_bbox": modal,
                "score": float(score_pool[int(rng.integers(0, len(score_pool)))]),
                "track_id": track_id,
            }
        )
    # track results must be unique per (track, frame)
    seen = set()
    deduped = []
    for r in results:
        key = (r["track_id"], r["image_id"])
        if key in seen:
            continue
        seen.add(key)
        deduped.append(r)
    return dataset, deduped


def make_motion_dataset(
    seed=0,
    n_videos=5,
    n_frames=10,
    frame_w=200.0,
    frame_h=200.0,
    hidden_span=(4, 7),
):
    """Clean constant-velocity synthetic dataset in plain-dict form.

    Each video has 2 objects moving linearly; one of them is fully occluded
    (modal box absent, visibility 0) on frames hidden_span[0]..hidden_span[1]-1.
    """
    rng = np.random.default_rng(seed)
    categories = [{"id": 1, "name": "thing"}, {"id": 2, "name": "stuff"}]
    videos, images, annotations = [], [], []
    ann_id = 1
    img_id = 1
    track_id = 1
    for v in range(1, n_videos + 1):
        videos.append(
            {
                "id": v,
                "name": f"vid{v}",
                "width": frame_w,
                "height": frame_h,
                "neg_category_ids": [],
                "not_exhaustive_category_ids": [],
            }
        )
        vid_images = []
        for fi in range(1, n_frames + 1):
            images.append(
                {
                    "id": img_id,
                    "video_id": v,
                    "frame_index": fi,
                    "width": frame_w,
                    "height": frame_h,
                }
            )
            vid_images.append(img_id)
            img_id += 1
        for obj in range(2):
            cat = obj + 1
            w = rng.uniform(25, 45)
            h = rng.uniform(25, 45)
            x0 = rng.uniform(10, 60)
            y0 = rng.uniform(10, 60)
            vx = rng.uniform(2, 8)
            vy = rng.uniform(1, 5)
            occluded_obj = obj == 0
            for fi in range(n_frames):
                x = x0 + vx * fi
                y = y0 + vy * fi
                amodal = [x, y, w, h]
                hidden = occluded_obj and hidden_span[0] <= fi < hidden_span[1]
                modal = None if hidden else list(amodal)
                annotations.append(
                    {
                        "id": ann_id,
                        "image_id": vid_images[fi],
                        "track_id": track_id,
                        "category_id": cat,
                        "bbox": amodal,
                        "modal_bbox": modal,
                        "visibility": 0.0 if hidden else 1.0,
                        "is_uncertain": 0,
                        "out_of_frame": 0,
                    }
                )
                ann_id += 1
            track_id += 1
    return {
        "videos": videos,
        "images": images,
        "annotations": annotations,
        "categories": categories,
    }


def gt_as_results(dataset_obj, score=1.0):
    """Feed ground truth back as detections (plain-dict results)."""
    return [
        {
            "image_id": a["image_id"],
            "category_id": a["category_id"],
            "bbox": list(a["bbox"]),
            "modal_bbox": None if a["modal_bbox"] is None else list(a["modal_bbox"]),
            "score": score,
            "track_id": a["track_id"],
        }
        for a in dataset_obj["annotations"]
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
