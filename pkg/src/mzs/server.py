"""Reader-study HTTP service over extracted montage artifacts.

Readers are blinded: montage ids are opaque digests, and neither queue
items nor metadata reveal the retrieval arm, study id, or label. Annotations
are persisted append-only as JSONL; resubmission appends a new record and
the latest record per (reader, montage) wins everywhere. The agreement
report aggregates per arm: mean percent of cells marked, plus ICC(3,1) over
per-montage marked-cell counts for readers who completed every montage
(requires at least two such readers).
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import FileResponse, HTMLResponse, JSONResponse
from pydantic import BaseModel

import numpy as np

from .metrics import icc31
from .pipeline import PipelineConfig

_READER_RE = re.compile(r"^[A-Za-z0-9_-]{1,64}$")

_PLACEHOLDER_PAGE = """<!DOCTYPE html>
<html><head><title>reader study</title></head>
<body><h1>Reader study service</h1>
<p>No frontend build found. The JSON API is live under <code>/api/</code>.</p>
</body></html>"""


class AnnotationIn(BaseModel):
    reader_id: str
    montage_id: str
    cells: list[int]


class MontageEntry:
    def __init__(self, montage_id: str, arm: str, study_id: str,
                 png_path: Path, meta: dict):
        self.montage_id = montage_id
        self.arm = arm
        self.study_id = study_id
        self.png_path = png_path
        self.grid_n = int(meta["grid_n"])
        self.cell_px = int(meta["cell_px"])
        self.png_sha256 = meta.get("png_sha256", "")


def _opaque_id(arm: str, study_id: str) -> str:
    return hashlib.sha256(f"{arm}:{study_id}".encode()).hexdigest()[:12]


def _discover_montages(out_dir: Path) -> dict[str, MontageEntry]:
    registry: dict[str, MontageEntry] = {}
    root = out_dir / "montages"
    if not root.is_dir():
        return registry
    for arm_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for meta_path in sorted(arm_dir.glob("*.json")):
            png_path = meta_path.with_suffix(".png")
            if not png_path.exists():
                continue
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            sid = meta["study_id"]
            mid = _opaque_id(arm_dir.name, sid)
            registry[mid] = MontageEntry(mid, arm_dir.name, sid, png_path, meta)
    return registry


class AnnotationStore:
    """Append-only JSONL log; latest record per (reader, montage) wins."""

    def __init__(self, path: Path):
        self.path = path
        self.lock = threading.Lock()
        self.latest: dict[tuple[str, str], dict] = {}
        if path.exists():
            for line in path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self.latest[(rec["reader_id"], rec["montage_id"])] = rec

    def put(self, reader_id: str, montage_id: str, cells: list[int]) -> dict:
        rec = {"reader_id": reader_id, "montage_id": montage_id,
               "cells": sorted(set(cells)), "timestamp": time.time()}
        with self.lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self.latest[(reader_id, montage_id)] = rec
        return rec

    def get(self, reader_id: str, montage_id: str) -> dict | None:
        with self.lock:
            return self.latest.get((reader_id, montage_id))

    def snapshot(self) -> dict[tuple[str, str], dict]:
        with self.lock:
            return dict(self.latest)


def build_app(config: PipelineConfig, static_dir: str | Path | None = None) -> FastAPI:
    out_dir = Path(config.out_dir)
    registry = _discover_montages(out_dir)
    store = AnnotationStore(out_dir / "annotations.jsonl")
    app = FastAPI(title="reader study")

    @app.exception_handler(RequestValidationError)
    async def malformed(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": "malformed request body"})

    def fail(status: int, detail: str) -> JSONResponse:
        return JSONResponse(status_code=status, content={"detail": detail})

    @app.get("/api/arms")
    def arms():
        counts: dict[str, int] = {}
        for entry in registry.values():
            counts[entry.arm] = counts.get(entry.arm, 0) + 1
        return {"arms": sorted(counts), "montages_per_arm": counts}

    @app.get("/api/queue/{reader_id}")
    def queue(reader_id: str):
        if not _READER_RE.match(reader_id):
            return fail(404, "unknown reader id")
        ids = sorted(registry)
        digest = hashlib.sha256(reader_id.encode()).digest()
        rng = np.random.default_rng(
            [config.seed, int.from_bytes(digest[:8], "little")])
        order = rng.permutation(len(ids))
        items = []
        for i in order:
            mid = ids[int(i)]
            entry = registry[mid]
            rec = store.get(reader_id, mid)
            items.append({
                "montage_id": mid,
                "grid_n": entry.grid_n,
                "submitted": rec is not None,
                "cells": rec["cells"] if rec else [],
            })
        return {"reader_id": reader_id, "items": items}

    @app.get("/api/montage/{montage_id}")
    def montage_png(montage_id: str):
        entry = registry.get(montage_id)
        if entry is None:
            return fail(404, "unknown montage id")
        return FileResponse(entry.png_path, media_type="image/png")

    @app.get("/api/montage/{montage_id}/meta")
    def montage_meta(montage_id: str):
        entry = registry.get(montage_id)
        if entry is None:
            return fail(404, "unknown montage id")
        return {"montage_id": montage_id, "grid_n": entry.grid_n,
                "cell_px": entry.cell_px, "png_sha256": entry.png_sha256}

    @app.post("/api/annotations")
    def post_annotation(body: AnnotationIn):
        entry = registry.get(body.montage_id)
        if entry is None:
            return fail(404, "unknown montage id")
        if not _READER_RE.match(body.reader_id):
            return fail(404, "unknown reader id")
        limit = entry.grid_n * entry.grid_n
        if any(c < 0 or c >= limit for c in body.cells):
            return fail(400, f"cell indices must be in [0, {limit})")
        return store.put(body.reader_id, body.montage_id, body.cells)

    @app.get("/api/annotations")
    def get_annotation(reader_id: str, montage_id: str):
        if registry.get(montage_id) is None:
            return fail(404, "unknown montage id")
        rec = store.get(reader_id, montage_id)
        if rec is None:
            return fail(404, "no annotation for this reader and montage")
        return rec

    @app.get("/api/agreement")
    def agreement():
        latest = store.snapshot()
        all_ids = set(registry)
        readers = sorted({reader for reader, _ in latest})
        complete = [r for r in readers
                    if {m for rd, m in latest if rd == r} >= all_ids]
        per_arm: dict[str, dict] = {}
        for arm in sorted({e.arm for e in registry.values()}):
            arm_ids = sorted(m for m, e in registry.items() if e.arm == arm)
            fractions = []
            for (reader, mid), rec in latest.items():
                if mid in registry and registry[mid].arm == arm:
                    n2 = registry[mid].grid_n ** 2
                    fractions.append(len(rec["cells"]) / n2)
            block: dict = {
                "n_montages": len(arm_ids),
                "n_submissions": len(fractions),
                "mean_marked_percent": (100.0 * sum(fractions) / len(fractions)
                                        if fractions else None),
                "n_complete_readers": len(complete),
            }
            if len(complete) >= 2:
                ratings = [[len(latest[(reader, mid)]["cells"]) for reader in complete]
                           for mid in arm_ids]
                block["icc31"] = icc31(ratings)
            else:
                block["icc31"] = None
                block["note"] = "needs >= 2 readers completing every montage"
            per_arm[arm] = block
        return {"arms": per_arm, "complete_readers": complete}

    static_root = Path(static_dir) if static_dir else None
    if static_root is None:
        bundled = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        static_root = bundled if bundled.is_dir() else None

    if static_root is not None and static_root.is_dir():
        index = static_root / "index.html"

        @app.get("/", response_class=HTMLResponse)
        def root():
            return HTMLResponse(index.read_text(encoding="utf-8"))

        @app.get("/static/{path:path}")
        def static_file(path: str):
            target = (static_root / path).resolve()
            if not str(target).startswith(str(static_root.resolve())) or not target.is_file():
                return fail(404, "not found")
            media = "text/css" if target.suffix == ".css" else "application/javascript"
            return FileResponse(target, media_type=media)
    else:
        @app.get("/", response_class=HTMLResponse)
        def root_placeholder():
            return HTMLResponse(_PLACEHOLDER_PAGE)

    return app
