"""Assisted-annotation HTTP service.

Serves extracted instance crops to a human operator in ascending
(image id, instance id) order and persists class decisions to an
append-only JSON-lines log. Replaying the log on startup restores the
session after a crash or restart; relabeling appends a new record and the
last record per instance wins.

Endpoints (all JSON unless noted):
    GET  /api/classes
    GET  /api/next
    GET  /api/instances/{img}/{iid}
    GET  /api/instances/{img}/{iid}/slice/{z}?mode=raw|mask-overlay|distance&sigma=S
    POST /api/instances/{img}/{iid}/label   {"class": int, "note"?: str}
    GET  /api/progress
"""

from __future__ import annotations

import io
import json
import os
import threading
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from pydantic import BaseModel, Field

from .errors import Aop3dError
from .instances import InstanceCrop, geometric_features, list_crops, load_crop, preprocess_crop

DEFAULT_SLICE_SIGMA = 2.0


@dataclass(frozen=True)
class ClassDef:
    id: int
    name: str
    hotkey: str

    def to_json(self):
        return {"id": self.id, "name": self.name, "hotkey": self.hotkey}


def load_classes(path) -> list[ClassDef]:
    with open(path) as f:
        raw = json.load(f)
    classes = [ClassDef(id=int(c["id"]), name=str(c["name"]),
                        hotkey=str(c.get("hotkey", str(i + 1))))
               for i, c in enumerate(raw)]
    if not classes:
        raise Aop3dError(f"{path}: empty class list")
    if len({c.id for c in classes}) != len(classes):
        raise Aop3dError(f"{path}: duplicate class ids")
    return classes


class LabelStore:
    """Append-only JSON-lines label log; one active record per instance."""

    def __init__(self, path):
        self.path = path
        self._lock = threading.Lock()
        self.active: dict[tuple[str, int], int] = {}
        self.history_len = 0
        if os.path.exists(path):
            with open(path) as f:
                for line in f:
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    img, iid = rec["key"].split("/")
                    self.active[(img, int(iid))] = int(rec["class"])
                    self.history_len += 1

    def record(self, image_id: str, instance_id: int, class_id: int,
               note: str | None = None) -> None:
        rec = {"key": f"{image_id}/{instance_id}", "class": class_id,
               "ts": time.time()}
        if note:
            rec["note"] = note
        line = json.dumps(rec) + "\n"
        with self._lock:
            with open(self.path, "a") as f:
                f.write(line)
                f.flush()
                os.fsync(f.fileno())
            self.active[(image_id, instance_id)] = class_id
            self.history_len += 1

    def get(self, image_id: str, instance_id: int) -> int | None:
        return self.active.get((image_id, instance_id))

    def labeled_count(self) -> int:
        return len(self.active)


@dataclass
class AnnotationSession:
    crops_dir: str
    classes: list[ClassDef]
    store: LabelStore
    catalog: list[tuple[str, int]] = field(default_factory=list)

    def __post_init__(self):
        self.catalog = list_crops(self.crops_dir)
        if not self.catalog:
            raise Aop3dError(f"no crops found under {self.crops_dir}")
        ids = {c.id for c in self.classes}
        for key, cls in self.store.active.items():
            if key not in set(self.catalog):
                raise Aop3dError(f"label store references unknown instance {key}")
            if cls not in ids:
                raise Aop3dError(f"label store references unknown class {cls}")

    def next_unlabeled(self) -> tuple[str, int] | None:
        for key in self.catalog:
            if self.store.get(*key) is None:
                return key
        return None


class _LabelBody(BaseModel):
    # the wire field is "class", a Python keyword
    class_id: int | None = Field(default=None, alias="class")
    note: str | None = None

    model_config = {"populate_by_name": True}


def _to_png(array2d: np.ndarray) -> bytes:
    from PIL import Image

    arr = np.clip(np.rint(array2d * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def _mask_boundary(mask2d: np.ndarray) -> np.ndarray:
    from scipy import ndimage

    if not mask2d.any():
        return np.zeros_like(mask2d)
    eroded = ndimage.binary_erosion(mask2d, border_value=0)
    return mask2d & ~eroded


def create_app(crops_dir, classes: list[ClassDef], labels_path, ui_dir=None) -> FastAPI:
    store = LabelStore(labels_path)
    session = AnnotationSession(crops_dir=crops_dir, classes=classes, store=store)
    app = FastAPI(title="aop3d annotation service")
    catalog_set = set(session.catalog)
    class_ids = {c.id for c in classes}

    @lru_cache(maxsize=64)
    def crop(image_id: str, instance_id: int) -> InstanceCrop:
        return load_crop(os.path.join(crops_dir, image_id, str(instance_id)))

    @lru_cache(maxsize=16)
    def distance_view(image_id: str, instance_id: int, sigma: float) -> np.ndarray:
        return preprocess_crop(crop(image_id, instance_id), "distance", sigma)

    def require(image_id: str, instance_id: int):
        if (image_id, instance_id) not in catalog_set:
            raise HTTPException(404, f"unknown instance {image_id}/{instance_id}")

    @app.get("/api/classes")
    def get_classes():
        return [c.to_json() for c in classes]

    @app.get("/api/next")
    def get_next():
        key = session.next_unlabeled()
        if key is None:
            return {"done": True}
        image_id, instance_id = key
        return {
            "done": False,
            "image": image_id,
            "id": instance_id,
            "index": session.catalog.index(key),
            "total": len(session.catalog),
        }

    @app.get("/api/instances/{image_id}/{instance_id}")
    def get_instance(image_id: str, instance_id: int):
        require(image_id, instance_id)
        c = crop(image_id, instance_id)
        fv = geometric_features(c)
        return {
            "image": image_id,
            "id": instance_id,
            "bbox": {"lo": list(c.lo), "hi": list(c.hi)},
            "depth": c.depth,
            "shape": list(c.mask.shape),
            "labeled": store.get(image_id, instance_id),
            "features": {
                "volume": fv.volume,
                "surface_faces": fv.surface_faces,
                "sphericity": fv.sphericity,
                "elongation": fv.elongation,
                "mean_intensity": fv.mean_intensity,
            },
        }

    @app.get("/api/instances/{image_id}/{instance_id}/slice/{z}")
    def get_slice(image_id: str, instance_id: int, z: int, mode: str = "raw",
                  sigma: float = DEFAULT_SLICE_SIGMA):
        require(image_id, instance_id)
        c = crop(image_id, instance_id)
        if not 0 <= z < c.depth:
            raise HTTPException(404, f"slice {z} outside [0, {c.depth})")
        if mode == "raw":
            plane = c.intensity[z]
        elif mode == "mask-overlay":
            plane = c.intensity[z].copy()
            plane[_mask_boundary(c.mask[z])] = 1.0
        elif mode == "distance":
            if sigma <= 0:
                raise HTTPException(422, "sigma must be > 0")
            plane = distance_view(image_id, instance_id, sigma)[z]
        else:
            raise HTTPException(422, f"unknown mode {mode!r}")
        return Response(content=_to_png(plane), media_type="image/png")

    @app.post("/api/instances/{image_id}/{instance_id}/label")
    def post_label(image_id: str, instance_id: int, body: _LabelBody):
        require(image_id, instance_id)
        if body.class_id is None or body.class_id not in class_ids:
            raise HTTPException(422, f"unknown class {body.class_id!r}")
        store.record(image_id, instance_id, body.class_id, body.note)
        return {"ok": True, "image": image_id, "id": instance_id,
                "class": body.class_id}

    @app.get("/api/progress")
    def get_progress():
        per_class = {str(c.id): 0 for c in classes}
        for cls in store.active.values():
            per_class[str(cls)] = per_class.get(str(cls), 0) + 1
        return {
            "labeled": store.labeled_count(),
            "total": len(session.catalog),
            "per_class": per_class,
        }

    if ui_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app


def serve(crops_dir, classes_path, labels_path, port: int = 8080,
          host: str = "127.0.0.1", ui_dir=None) -> None:
    """Run the annotation service until interrupted."""
    import uvicorn

    app = create_app(crops_dir, load_classes(classes_path), labels_path, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
