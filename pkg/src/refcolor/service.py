"""HTTP service powering the interactive studio.

Token sets are content-addressed (re-encoding the same image yields the same
id); colorization runs as queued jobs on a worker pool over the shared
immutable pipeline. Both stores are in-memory and ephemeral across restarts.
"""
from __future__ import annotations

import base64
import hashlib
import io
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Query
from PIL import Image
from pydantic import BaseModel, Field

from . import viz
from .manipulation import (DEFAULT_STRENGTH, DEFAULT_THRESHOLDS, StepSpec, apply_steps,
                           compute_d, compute_m, compute_omega, partition_intervals,
                           resolve_steps, validate_thresholds)
from .errors import ParameterError
from .sampler import SamplerConfig, colorize_with_tokens, load_pipeline
from .tokens import TokenSet


def _decode_image(b64: str) -> np.ndarray:
    try:
        raw = base64.b64decode(b64)
        img = Image.open(io.BytesIO(raw)).convert("RGB")
    except Exception as exc:  # noqa: BLE001
        raise HTTPException(status_code=422,
                            detail=[{"loc": ["image"], "msg": f"not a decodable image: {exc}"}])
    arr = np.asarray(img).astype(np.float32) / 255.0
    return np.moveaxis(arr, -1, 0)


def _encode_png(img: np.ndarray) -> str:
    arr = np.clip(img, 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[0] in (1, 3):
        arr = np.moveaxis(arr, 0, -1)
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    buf = io.BytesIO()
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def token_set_id(tokens: TokenSet) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(tokens.cls, dtype="<f4").tobytes())
    digest.update(np.ascontiguousarray(tokens.locals, dtype="<f4").tobytes())
    digest.update(str(tokens.grid).encode())
    return digest.hexdigest()[:32]


class EncodeRequest(BaseModel):
    image: str = Field(description="base64 PNG/JPEG reference image")


class StepPayload(BaseModel):
    kind: str
    target: str
    anchor: Optional[str] = None
    control: Optional[str] = None
    target_scale: float = 8.0
    enhance: bool = False
    thresholds: tuple[float, float, float, float] = DEFAULT_THRESHOLDS
    strength: float = DEFAULT_STRENGTH


class ManipulateRequest(BaseModel):
    token_set_id: str
    steps: list[StepPayload] = []


class SamplerPayload(BaseModel):
    steps: int = 20
    gs: float = 2.0
    sgs: float = 1.0
    noise_level: float = 0.0
    scheduler: str = "karras"
    seed: int = 0
    solver: str = "dpmpp_2m"
    inject: bool = False
    adain: bool = False


class ColorizeRequest(BaseModel):
    sketch: str = Field(description="base64 PNG sketch, white background")
    token_set_id: str
    config: SamplerPayload = SamplerPayload()
    reference: Optional[str] = Field(default=None,
                                     description="base64 reference image; needed for "
                                                 "inject/adain")


def _step_spec(p: StepPayload) -> StepSpec:
    try:
        return StepSpec(kind=p.kind, target=p.target, anchor=p.anchor, control=p.control,
                        target_scale=p.target_scale, enhance=p.enhance,
                        thresholds=tuple(p.thresholds), strength=p.strength)
    except ParameterError as exc:
        raise HTTPException(status_code=422, detail=[{"loc": ["steps"], "msg": str(exc)}])


def create_app(checkpoint_dir, denoiser_name: Optional[str] = None,
               workers: int = 1) -> FastAPI:
    pipe = load_pipeline(checkpoint_dir, denoiser_name=denoiser_name)
    app = FastAPI(title="refcolor service", version="1")

    token_store: dict[str, TokenSet] = {}
    store_lock = threading.Lock()
    jobs: dict[str, dict] = {}
    jobs_lock = threading.Lock()
    pool = ThreadPoolExecutor(max_workers=workers)

    def _get_tokens(token_id: str) -> TokenSet:
        with store_lock:
            tokens = token_store.get(token_id)
        if tokens is None:
            raise HTTPException(status_code=404, detail=f"unknown token set {token_id!r}")
        return tokens

    def _register(tokens: TokenSet) -> str:
        tid = token_set_id(tokens)
        with store_lock:
            token_store.setdefault(tid, tokens)
        return tid

    @app.get("/config")
    def get_config():
        cfg = pipe.denoiser.cfg
        return {"variant": cfg.variant, "image_size": cfg.image_size, "f": cfg.f,
                "latent_channels": cfg.latent_channels, "grid": pipe.token_model.cfg.grid,
                "n_tokens": pipe.token_model.cfg.grid ** 2,
                "token_dim": pipe.token_model.cfg.dim, "train_horizon": cfg.T,
                "vocabulary": list(pipe.token_model.cfg.vocab),
                "checkpoints": pipe.meta.get("checkpoints", {}),
                "default_thresholds": list(DEFAULT_THRESHOLDS),
                "default_strength": DEFAULT_STRENGTH}

    @app.post("/encode")
    def encode(req: EncodeRequest):
        image = _decode_image(req.image)
        tokens = pipe.token_model.extract_tokens(image)
        tid = _register(tokens)
        return {"token_set_id": tid, "grid": tokens.grid, "dim": tokens.dim}

    @app.get("/heatmap")
    def heatmap(tokens: str = Query(...), control: str = Query(...),
                ts0: float = DEFAULT_THRESHOLDS[0], ts1: float = DEFAULT_THRESHOLDS[1],
                ts2: float = DEFAULT_THRESHOLDS[2], ts3: float = DEFAULT_THRESHOLDS[3],
                target: Optional[str] = None, anchor: Optional[str] = None,
                target_scale: float = 8.0, enhance: bool = False,
                strength: float = DEFAULT_STRENGTH):
        token_set = _get_tokens(tokens)
        try:
            ts = validate_thresholds((ts0, ts1, ts2, ts3))
            if enhance and anchor is None:
                raise ParameterError("enhance requires an anchor text")
        except ParameterError as exc:
            raise HTTPException(status_code=422,
                                detail=[{"loc": ["ts0", "ts1", "ts2", "ts3"],
                                         "msg": str(exc)}])
        control_emb = pipe.token_model.embed_text(control)
        target_emb = pipe.token_model.embed_text(target) if target else control_emb
        anchor_emb = pipe.token_model.embed_text(anchor) if anchor else None
        m = compute_m(token_set, control_emb)
        d = compute_d(token_set.cls, target_emb, anchor_emb, target_scale, enhance)
        omega = compute_omega(m, d, ts, strength)
        part = partition_intervals(m, ts)
        g = token_set.grid
        return {"grid": g, "d": d,
                "m": m.reshape(g, g).tolist(),
                "partition": part.reshape(g, g).tolist(),
                "omega": omega.reshape(g, g).tolist(),
                "heatmap_png": base64.b64encode(_heatmap_png_bytes(m, g)).decode("ascii")}

    def _heatmap_png_bytes(values: np.ndarray, grid: int) -> bytes:
        rgb = viz.heatmap_to_rgb(values.reshape(grid, grid))
        rgb = np.repeat(np.repeat(rgb, 16, axis=0), 16, axis=1)
        buf = io.BytesIO()
        Image.fromarray(rgb).save(buf, format="PNG")
        return buf.getvalue()

    @app.post("/manipulate")
    def manipulate(req: ManipulateRequest):
        token_set = _get_tokens(req.token_set_id)
        specs = [_step_spec(p) for p in req.steps]
        try:
            steps = resolve_steps(specs, pipe.token_model.embed_text)
        except ParameterError as exc:
            raise HTTPException(status_code=422, detail=[{"loc": ["steps"], "msg": str(exc)}])
        heatmaps = []
        current = token_set
        for spec, step in zip(specs, steps):
            if spec.kind == "local":
                m = compute_m(current, step.control)
                g = current.grid
                heatmaps.append({
                    "control": spec.control,
                    "m": m.reshape(g, g).tolist(),
                    "partition": partition_intervals(m, step.thresholds)
                    .reshape(g, g).tolist(),
                    "heatmap_png": base64.b64encode(
                        _heatmap_png_bytes(m, g)).decode("ascii")})
            current = apply_steps(current, [step])
        tid = _register(current)
        return {"token_set_id": tid, "heatmaps": heatmaps}

    def _run_job(job_id: str, sketch: np.ndarray, tokens: TokenSet,
                 cfg: SamplerConfig, reference: Optional[np.ndarray]):
        try:
            image, info = colorize_with_tokens(pipe, sketch, tokens, cfg,
                                               reference=reference)
            with jobs_lock:
                jobs[job_id].update(status="done", result_png=_encode_png(image),
                                    info=info)
        except Exception as exc:  # noqa: BLE001
            with jobs_lock:
                jobs[job_id].update(status="failed", error=str(exc))

    @app.post("/colorize")
    def colorize_endpoint(req: ColorizeRequest):
        tokens = _get_tokens(req.token_set_id)
        sketch = _decode_image(req.sketch)[:1]
        reference = _decode_image(req.reference) if req.reference else None
        try:
            cfg = SamplerConfig(**req.config.model_dump())
            if (cfg.inject or cfg.adain) and reference is None:
                raise ParameterError("inject/adain need a reference image")
        except ParameterError as exc:
            raise HTTPException(status_code=422, detail=[{"loc": ["config"],
                                                          "msg": str(exc)}])
        job_id = uuid.uuid4().hex[:16]
        with jobs_lock:
            jobs[job_id] = {"status": "queued", "config": cfg.to_dict(),
                            "token_set_id": req.token_set_id}

        def task():
            with jobs_lock:
                jobs[job_id]["status"] = "running"
            _run_job(job_id, sketch, tokens, cfg, reference)

        pool.submit(task)
        return {"job_id": job_id}

    @app.get("/jobs/{job_id}")
    def job_status(job_id: str):
        with jobs_lock:
            job = jobs.get(job_id)
            if job is None:
                raise HTTPException(status_code=404, detail=f"unknown job {job_id!r}")
            return dict(job)

    return app
