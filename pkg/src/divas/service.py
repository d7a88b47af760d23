"""HTTP service exposing the interactive workflow to the browser UI.

Sessions live in process memory.  Server push is an ordered long-poll:
GET /sessions/{id}/events?after=N blocks briefly until events newer than N
exist, and clients resume from their last cursor after reconnects.
"""

from __future__ import annotations

import io as _io
import threading
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .geometry import camera_to_dict
from .io import write_fmap, write_vgrid
from .scenes import get_profile, scene_names
from .session import Session

__all__ = ["create_app"]


class NewSession(BaseModel):
    scene: str
    mode: str = "fibonacci"
    n: int = 12
    k_top: int = 5
    grid_res: int | None = None
    workers: int | None = None


class PromptBody(BaseModel):
    anchor_id: str
    px: int
    py: int
    zoom: float | None = None
    last_in_group: bool = False


class FuseBody(BaseModel):
    force: bool = False


class AnchorPick(BaseModel):
    view_id: str


def _png(arr_u8, mode="RGB") -> bytes:
    from PIL import Image
    buf = _io.BytesIO()
    Image.fromarray(arr_u8, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def _rgb_png(rgb) -> bytes:
    return _png(np.clip(np.asarray(rgb) * 255.0, 0, 255).astype(np.uint8))


def _mask_png(mask_bool) -> bytes:
    return _png((np.asarray(mask_bool, dtype=np.uint8) * 255), mode="L")


class SessionStore:
    def __init__(self):
        self._lock = threading.Lock()
        self._sessions: dict[str, Session] = {}

    def add(self, session: Session) -> str:
        sid = uuid.uuid4().hex[:12]
        with self._lock:
            self._sessions[sid] = session
        return sid

    def get(self, sid: str) -> Session:
        with self._lock:
            s = self._sessions.get(sid)
        if s is None:
            raise HTTPException(status_code=404, detail="unknown session id")
        return s


def _auto_fuse(session: Session):
    """Fire fusion once the queue reports a mandatory barrier."""
    if session.queue.wait_barrier_required(timeout=60.0):
        try:
            session.maybe_fuse()
        except Exception:
            pass  # error event already recorded on the session


def _default_ui_dir():
    cand = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    return cand if cand.is_dir() else None


def create_app(ui_dir=None) -> FastAPI:
    app = FastAPI(title="divas", version="0.1.0")
    store = SessionStore()

    @app.get("/scenes")
    def list_scenes():
        return scene_names()

    @app.post("/sessions")
    def new_session(body: NewSession):
        try:
            profile = get_profile(body.scene)
            session = Session(profile, mode=body.mode, n=body.n,
                              k_top=body.k_top, grid_resolution=body.grid_res,
                              workers=body.workers)
        except KeyError as err:
            raise HTTPException(status_code=404, detail=str(err))
        except ValueError as err:
            raise HTTPException(status_code=422, detail=str(err))
        sid = store.add(session)
        anchors = [{
            "id": session.anchor_id(i),
            "camera": camera_to_dict(session.pool[i]),
            "score": next(s.total for s in session.scores if s.index == i),
            "thumbnail_url": f"/sessions/{sid}/views/{session.anchor_id(i)}/image",
        } for i in session.anchors]
        pool = [{
            "id": session.anchor_id(s.index),
            "score": s.total,
            "thumbnail_url": f"/sessions/{sid}/views/{session.anchor_id(s.index)}/image",
        } for s in session.scores]
        return {"session_id": sid, "mode": session.mode, "anchors": anchors,
                "pool": pool, "barrier_threshold": session.queue.cache_threshold}

    @app.get("/sessions/{sid}/views/{view_id}/image")
    def view_image(sid: str, view_id: str):
        session = store.get(sid)
        try:
            vg = session.view_geometry(view_id)
        except (KeyError, IndexError):
            raise HTTPException(status_code=404, detail="unknown view id")
        return Response(_rgb_png(vg.rgb), media_type="image/png")

    @app.get("/sessions/{sid}/views/{view_id}/depth")
    def view_depth(sid: str, view_id: str):
        session = store.get(sid)
        try:
            vg = session.view_geometry(view_id)
        except (KeyError, IndexError):
            raise HTTPException(status_code=404, detail="unknown view id")
        buf = _io.BytesIO()
        write_fmap(buf, vg.z_surface)
        return Response(buf.getvalue(), media_type="application/octet-stream")

    @app.post("/sessions/{sid}/anchors")
    def pick_anchor(sid: str, body: AnchorPick):
        session = store.get(sid)
        try:
            session.pick_anchor(int(body.view_id.split("-")[1]))
        except (ValueError, IndexError) as err:
            raise HTTPException(status_code=422, detail=str(err))
        return {"anchors": [session.anchor_id(i) for i in session.anchors]}

    @app.post("/sessions/{sid}/prompts")
    def post_prompt(sid: str, body: PromptBody):
        session = store.get(sid)
        try:
            cid, _view = session.submit_prompt(
                body.anchor_id, (body.px, body.py), body.zoom,
                last_in_group=body.last_in_group)
        except KeyError as err:
            raise HTTPException(status_code=404, detail=str(err))
        except ValueError as err:
            raise HTTPException(status_code=422, detail=str(err))
        threading.Thread(target=_auto_fuse, args=(session,), daemon=True).start()
        return {"centroid_id": cid,
                "image_url": f"/sessions/{sid}/views/{cid}/image"}

    @app.post("/sessions/{sid}/fuse")
    def post_fuse(sid: str, body: FuseBody = None):
        session = store.get(sid)
        force = bool(body and body.force)
        try:
            version = session.maybe_fuse(force=force)
        except Exception as err:
            raise HTTPException(status_code=500, detail=str(err))
        return {"fired": version is not None,
                "version": session.version}

    @app.get("/sessions/{sid}/overlay/{view_id}")
    def get_overlay(sid: str, view_id: str, version: int = Query(default=None)):
        session = store.get(sid)
        if version is not None and version != session.version:
            raise HTTPException(status_code=409,
                                detail=f"stale version {version}, "
                                       f"current is {session.version}")
        try:
            overlay = session.get_overlay(view_id)
        except RuntimeError as err:
            raise HTTPException(status_code=409, detail=str(err))
        except (KeyError, IndexError):
            raise HTTPException(status_code=404, detail="unknown view id")
        return Response(_mask_png(overlay), media_type="image/png")

    @app.get("/sessions/{sid}/grid")
    def get_grid(sid: str):
        session = store.get(sid)
        if session.occupancy is None:
            raise HTTPException(status_code=409, detail="no fusion yet")
        buf = _io.BytesIO()
        write_vgrid(buf, session.occupancy,
                    unbounded=session.profile.scene.bounds.unbounded)
        return Response(buf.getvalue(), media_type="application/octet-stream",
                        headers={"Content-Disposition":
                                 'attachment; filename="session.vgrid"'})

    @app.get("/sessions/{sid}/events")
    def get_events(sid: str, after: int = 0, timeout: float = 20.0):
        session = store.get(sid)
        events = session.wait_events(after, timeout=min(timeout, 55.0))
        return JSONResponse([{"seq": e.seq, "kind": e.kind, "payload": e.payload}
                             for e in events])

    @app.get("/sessions/{sid}/status")
    def get_status(sid: str):
        session = store.get(sid)
        return {"version": session.version,
                "mask_cache": session.queue.completed_count(),
                "barrier_threshold": session.queue.cache_threshold,
                "n_masks": len(session.masks),
                "anchors": [session.anchor_id(i) for i in session.anchors],
                "centroids": [c.id for c in session.centroids]}

    ui = Path(ui_dir) if ui_dir else _default_ui_dir()
    if ui and Path(ui).is_dir():
        app.mount("/", StaticFiles(directory=str(ui), html=True), name="ui")
    return app
