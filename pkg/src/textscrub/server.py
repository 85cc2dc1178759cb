"""HTTP inference service.

Endpoints:
  POST /erase       run the eraser on an image plus a mask or stroke list
  GET  /health      liveness + which checkpoint is loaded (503 until loaded)
  GET  /model-info  parameter count, iteration count, latent width

/erase accepts JSON (PNG images as base64 strings) or multipart form data
(PNG files). Exactly one of `mask` / `strokes` must be present. By default
the response preserves non-mask pixels of the input exactly (the composited
protocol); pass raw=true for the bare network output. Frames, when
requested, are the pre-compositing per-iteration predictions.
"""

from __future__ import annotations

import base64
import hashlib
import json
import threading
import time
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .metrics import composite_non_text
from .model import count_parameters, load_checkpoint, predict_frames
from .png_io import decode_png, encode_png
from .strokes import parse_strokeset, rasterize_strokes

DEFAULT_MAX_SIDE = 1024


class ApiError(Exception):
    def __init__(self, status_code: int, detail: str):
        self.status_code = status_code
        self.detail = detail
        super().__init__(detail)


def _checkpoint_id(path) -> str:
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    return digest[:16]


def create_app(checkpoint_path=None, *, max_side: int = DEFAULT_MAX_SIDE, ui_dir=None) -> FastAPI:
    app = FastAPI(title="textscrub inference service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    state = app.state
    state.model = None
    state.checkpoint_id = None
    state.max_side = max_side
    state.lock = threading.Lock()  # single-flight inference per worker

    if checkpoint_path is not None:
        model, _meta = load_checkpoint(checkpoint_path)
        model.eval()
        state.model = model
        state.checkpoint_id = _checkpoint_id(checkpoint_path)

    @app.exception_handler(ApiError)
    async def _api_error(_request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status_code, content={"detail": exc.detail})

    @app.exception_handler(Exception)
    async def _internal_error(_request: Request, exc: Exception):
        error_id = uuid.uuid4().hex[:12]
        print(f"internal error {error_id}: {type(exc).__name__}: {exc}")
        return JSONResponse(status_code=500, content={"detail": f"internal error {error_id}"})

    def _model_info() -> dict:
        model = state.model
        return {
            "param_count": count_parameters(model, "all"),
            "iterations": model.config.iterations,
            "latent_channels": model.config.latent_channels,
            "checkpoint_id": state.checkpoint_id,
        }

    def _require_model():
        if state.model is None:
            raise ApiError(503, "checkpoint not loaded")

    @app.get("/health")
    async def health():
        _require_model()
        return {"status": "ok", "checkpoint_id": state.checkpoint_id}

    @app.get("/model-info")
    async def model_info():
        _require_model()
        return _model_info()

    @app.post("/erase")
    async def erase(request: Request):
        _require_model()
        payload = await _parse_erase_request(request)
        return _run_erase(payload)

    async def _parse_erase_request(request: Request) -> dict:
        content_type = request.headers.get("content-type", "")
        if content_type.startswith("multipart/form-data"):
            form = await request.form()
            out = {}
            image = form.get("image")
            if image is None:
                raise ApiError(400, "missing image file")
            out["image"] = await image.read()
            mask = form.get("mask")
            if mask is not None:
                out["mask"] = await mask.read() if hasattr(mask, "read") else None
            strokes = form.get("strokes")
            if strokes is not None:
                try:
                    out["strokes"] = json.loads(strokes)
                except json.JSONDecodeError as exc:
                    raise ApiError(400, f"strokes field is not valid JSON: {exc}") from exc
            for key in ("iters", "return_frames", "raw"):
                if form.get(key) is not None:
                    out[key] = form.get(key)
            return out
        try:
            body = await request.json()
        except Exception as exc:
            raise ApiError(400, f"request body is not valid JSON: {exc}") from exc
        if not isinstance(body, dict):
            raise ApiError(400, "request body must be a JSON object")
        out = dict(body)
        for key in ("image", "mask"):
            if out.get(key) is not None:
                try:
                    out[key] = base64.b64decode(out[key], validate=True)
                except Exception as exc:
                    raise ApiError(400, f"{key} is not valid base64: {exc}") from exc
        return out

    def _run_erase(payload: dict):
        started = time.perf_counter()
        has_mask = payload.get("mask") is not None
        has_strokes = payload.get("strokes") is not None
        if has_mask == has_strokes:
            raise ApiError(422, "provide exactly one of mask or strokes")
        if payload.get("image") is None:
            raise ApiError(400, "missing image")
        try:
            image = decode_png(payload["image"])
        except Exception as exc:
            raise ApiError(400, f"cannot decode image: {exc}") from exc
        if image.ndim != 3:
            raise ApiError(400, "image must be RGB")
        h, w = image.shape[:2]
        if h > state.max_side or w > state.max_side:
            raise ApiError(413, f"image {w}x{h} exceeds limit {state.max_side}x{state.max_side}")

        if has_mask:
            try:
                mask_arr = decode_png(payload["mask"])
            except Exception as exc:
                raise ApiError(400, f"cannot decode mask: {exc}") from exc
            if mask_arr.ndim != 2:
                raise ApiError(400, "mask must be a single-channel PNG")
            values = np.unique(mask_arr)
            if not np.all(np.isin(values, (0, 255))):
                raise ApiError(400, f"mask values must be 0/255, got {values[:8].tolist()}")
            mask = (mask_arr > 0).astype(np.uint8)
        else:
            try:
                strokeset = parse_strokeset(payload["strokes"])
            except ValueError as exc:
                raise ApiError(400, str(exc)) from exc
            if (strokeset.width, strokeset.height) != (w, h):
                raise ApiError(
                    400,
                    f"strokes canvas {strokeset.width}x{strokeset.height} "
                    f"does not match image {w}x{h}",
                )
            mask = rasterize_strokes(strokeset)
        if mask.shape != (h, w):
            raise ApiError(400, f"mask {mask.shape} does not match image {(h, w)}")

        iters = payload.get("iters")
        if iters is not None:
            try:
                iters = int(iters)
            except (TypeError, ValueError) as exc:
                raise ApiError(400, f"iters must be an integer: {exc}") from exc
            if iters < 1:
                raise ApiError(400, "iters must be >= 1")
        return_frames = _as_bool(payload.get("return_frames", False))
        raw = _as_bool(payload.get("raw", False))

        with state.lock:
            frames = predict_frames(state.model, image, mask, iterations=iters)
        result = frames[-1]
        if not raw:
            result = composite_non_text(result, image, mask)
        response = {
            "result": base64.b64encode(encode_png(result)).decode("ascii"),
            "frames": (
                [base64.b64encode(encode_png(f)).decode("ascii") for f in frames]
                if return_frames
                else None
            ),
            "timing_ms": (time.perf_counter() - started) * 1000.0,
            "model_info": _model_info(),
        }
        return response

    if ui_dir and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        return value.lower() in ("1", "true", "yes", "on")
    return bool(value)
