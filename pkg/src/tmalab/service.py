"""HTTP interface for spot browsing, detection and interactive correction.

The app serves one cohort (a spot manifest plus annotation files) and at
most one interactive model session. All model mutation goes through a
single lock; corrections are appended to a JSON-lines log before they
touch the model, so a crash can lose at most the acknowledgement, never
the correction.
"""

from __future__ import annotations

import io
import json
import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Request
from fastapi.responses import JSONResponse, Response
from fastapi.middleware.cors import CORSMiddleware
from PIL import Image

from .data import (
    DataError,
    load_annotations,
    save_annotations,
    spot_from_json,
    spot_to_json,
)
from .detection import (
    MeanShiftConfig,
    detect_nuclei,
    detections_to_json,
    probability_map,
)
from .forest import load_forest
from .images import load_image, to_gray
from .online import (
    Correction,
    OnlineParams,
    OnlineSession,
    append_correction_log,
)
from .pipeline import ConfigError, config_from_toml, load_manifest, run_study

_PNG = "image/png"


def _png_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return buf.getvalue()


class ServiceState:
    """Everything behind the endpoints; one instance per app."""

    def __init__(self, manifest_csv, annotations_dir, out_dir,
                 forest_path=None, study_config_path=None,
                 detection_radius: float = 7.0, stride: int = 2,
                 online_params: OnlineParams | None = None,
                 train_patches=None, train_labels=None, seed: int = 0):
        self.entries = {e.spot_id: e for e in load_manifest(manifest_csv)}
        self.annotations_dir = Path(annotations_dir)
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.study_config_path = (
            Path(study_config_path) if study_config_path else None)
        self.detection_radius = detection_radius
        self.stride = stride
        self.lock = threading.Lock()
        self.study_payload = None
        self.correction_session_id: str | None = None
        self._rgb_cache: dict[str, object] = {}
        self._gray_cache: dict[str, object] = {}
        self._detection_cache: dict = {}
        self._pmap_cache: dict = {}

        self.session = None
        if forest_path is not None:
            forest = load_forest(forest_path)
            if train_patches is None:
                # Without the original training set new trees cannot be
                # grown; weight updates still apply.
                train_patches = np.zeros((0, forest.window, forest.window),
                                         dtype=np.int64)
                train_labels = np.zeros(0, dtype=np.int64)
                online_params = online_params or OnlineParams(k_new=0)
                if online_params.k_new != 0:
                    raise ValueError(
                        "tree growth needs train_patches/train_labels")
            self.session = OnlineSession(
                forest, train_patches, train_labels, images={},
                params=online_params, seed=seed)

    def entry(self, spot_id: str):
        if spot_id not in self.entries:
            raise HTTPException(status_code=404, detail=f"unknown spot {spot_id!r}")
        return self.entries[spot_id]

    def rgb(self, spot_id: str):
        if spot_id not in self._rgb_cache:
            self._rgb_cache[spot_id] = load_image(self.entry(spot_id).image_path)
        return self._rgb_cache[spot_id]

    def gray(self, spot_id: str):
        if spot_id not in self._gray_cache:
            self._gray_cache[spot_id] = to_gray(self.rgb(spot_id))
        return self._gray_cache[spot_id]

    def require_session(self) -> OnlineSession:
        if self.session is None:
            raise HTTPException(status_code=503, detail="no forest loaded")
        return self.session


def create_app(manifest_csv, annotations_dir, out_dir, **kwargs) -> FastAPI:
    state = ServiceState(manifest_csv, annotations_dir, out_dir, **kwargs)
    app = FastAPI(title="tmalab")
    # The annotation frontend is served separately during development, so
    # cross-origin browser calls must be allowed.
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    app.state.tmalab = state

    @app.get("/spots")
    def list_spots():
        spots = []
        for spot_id in sorted(state.entries):
            e = state.entries[spot_id]
            img = state.rgb(spot_id)
            spots.append({
                "spot_id": e.spot_id,
                "patient_id": e.patient_id,
                "pixel_resolution_um": e.pixel_resolution_um,
                "width": img.width,
                "height": img.height,
            })
        return {"spots": spots}

    @app.get("/spots/{spot_id}/image")
    def spot_image(spot_id: str, level: int = Query(0, ge=0, le=2)):
        img = state.rgb(spot_id)
        arr = img.pixels
        factor = 4 ** level
        if factor > 1:
            im = Image.fromarray(arr)
            w = max(1, img.width // factor)
            h = max(1, img.height // factor)
            im = im.resize((w, h), Image.Resampling.BILINEAR)
            arr = np.asarray(im)
        return Response(content=_png_bytes(arr), media_type=_PNG)

    @app.get("/spots/{spot_id}/probability-map")
    def spot_probability_map(spot_id: str):
        state.entry(spot_id)
        session = state.require_session()
        with state.lock:
            key = (spot_id, session.version)
            if key not in state._pmap_cache:
                pmap = probability_map(session.forest, state.gray(spot_id),
                                       stride=state.stride)
                arr = np.round(pmap.values * 65535.0).astype(np.uint16)
                # Entries from older forest versions are dead weight.
                state._pmap_cache = {
                    k: v for k, v in state._pmap_cache.items()
                    if k[1] == session.version
                }
                state._pmap_cache[key] = _png_bytes(arr)
            body = state._pmap_cache[key]
        return Response(content=body, media_type=_PNG)

    @app.get("/spots/{spot_id}/detections")
    def spot_detections(spot_id: str):
        state.entry(spot_id)
        session = state.require_session()
        with state.lock:
            key = (spot_id, session.version)
            if key not in state._detection_cache:
                cfg = MeanShiftConfig(radius=state.detection_radius)
                dets = detect_nuclei(session.forest, state.gray(spot_id), cfg,
                                     stride=state.stride)
                state._detection_cache = {
                    k: v for k, v in state._detection_cache.items()
                    if k[1] == session.version
                }
                state._detection_cache[key] = dets
            dets = state._detection_cache[key]
            doc = detections_to_json(dets, spot_id)
            doc["forest_version"] = session.version
            # Clients need the label vocabulary to build valid corrections.
            doc["classes"] = list(session.forest.classes)
        return doc

    @app.post("/spots/{spot_id}/corrections")
    def post_correction(spot_id: str, body: dict):
        entry = state.entry(spot_id)
        session = state.require_session()
        required = ["x", "y", "asserted_label", "expert_id", "session"]
        missing = [k for k in required if k not in body]
        if missing:
            raise HTTPException(
                status_code=422, detail=f"missing fields: {', '.join(missing)}")
        if body["asserted_label"] not in session.forest.classes:
            raise HTTPException(
                status_code=422,
                detail=f"unknown label {body['asserted_label']!r}")
        try:
            x, y = int(body["x"]), int(body["y"])
        except (TypeError, ValueError):
            raise HTTPException(status_code=422, detail="x and y must be integers")
        img = state.gray(spot_id)
        if not (0 <= x < img.width and 0 <= y < img.height):
            raise HTTPException(status_code=422, detail="position outside the image")

        with state.lock:
            sid = str(body["session"])
            if state.correction_session_id is None:
                state.correction_session_id = sid
            elif state.correction_session_id != sid:
                raise HTTPException(
                    status_code=409,
                    detail=f"corrections are bound to session "
                           f"{state.correction_session_id!r}")
            session.images.setdefault(spot_id, img)
            c = Correction(
                spot_id=spot_id, x=x, y=y,
                asserted_label=body["asserted_label"],
                expert_id=str(body["expert_id"]),
                timestamp=body.get("timestamp"),
            )
            # Durable log first; only then mutate the model.
            append_correction_log(state.out_dir / "corrections.jsonl", c)
            margin_before, margin_after = session.apply_correction(c)
        return {
            "spot_id": spot_id,
            "patient_id": entry.patient_id,
            "predicted_label": c.predicted_label,
            "margin_before": margin_before,
            "margin_after": margin_after,
            "forest_version": session.version,
        }

    @app.get("/spots/{spot_id}/annotations")
    def get_annotations(spot_id: str):
        state.entry(spot_id)
        path = state.annotations_dir / f"{spot_id}.json"
        if not path.exists():
            raise HTTPException(status_code=404,
                                detail=f"no annotations for {spot_id!r}")
        try:
            spot = load_annotations(path)
        except DataError as exc:
            raise HTTPException(status_code=500, detail=str(exc))
        return spot_to_json(spot)

    @app.put("/spots/{spot_id}/annotations")
    async def put_annotations(spot_id: str, request: Request):
        state.entry(spot_id)
        try:
            doc = json.loads(await request.body())
            spot = spot_from_json(doc)
        except (json.JSONDecodeError, DataError, TypeError, KeyError) as exc:
            raise HTTPException(status_code=400,
                                detail=f"malformed annotations: {exc}")
        if spot.spot_id != spot_id:
            raise HTTPException(
                status_code=400,
                detail=f"document spot_id {spot.spot_id!r} does not match URL")
        with state.lock:
            save_annotations(spot, state.annotations_dir / f"{spot_id}.json")
        return {"spot_id": spot_id, "n_annotations": len(spot.annotations)}

    @app.post("/study/run")
    def study_run():
        if state.study_config_path is None:
            raise HTTPException(status_code=503, detail="no study config")
        if not state.lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="study already running")
        try:
            cfg = config_from_toml(state.study_config_path)
            result = run_study(cfg)
            with open(cfg.out_dir / "result.json") as fh:
                state.study_payload = json.load(fh)
        except (ConfigError, DataError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        finally:
            state.lock.release()
        return {"status": "completed",
                "p_value": result.p_value,
                "chi2": result.chi2}

    @app.get("/study/result")
    def study_result():
        if state.study_payload is not None:
            return state.study_payload
        path = state.out_dir / "result.json"
        if path.exists():
            with open(path) as fh:
                return JSONResponse(json.load(fh))
        raise HTTPException(status_code=404, detail="no study has been run")

    return app
