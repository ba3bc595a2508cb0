"""Stagewise reconstruction with per-stage file persistence.

Stage 0 is a photometric-only pass at the coarsest scale for every view.
Each later stage loads every view's previous-stage geometry from disk,
upsamples it to the stage's scale and runs the engine with the geometric
consistency term.  A ledger records per-task outputs and checksums so an
interrupted run resumes to a bit-identical result.
"""

import hashlib
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .engine import (DEFAULT_SCHEDULE, EngineConfig, EngineState, ScoringContext,
                     initialize, run_scale)
from .errors import ConfigError, LedgerMismatch, PlanError, StageIOError
from .geometry import CameraView, load_camera
from .mapio import (GeometryMap, ScoreField, build_pyramid, load_image, load_map,
                    save_map, upsample_nearest)
from .scoring import make_weight_provider

log = logging.getLogger(__name__)

COARSEST_SCALE = 3
FINEST_SCALE = 1


@dataclass
class ViewSpec:
    view_id: str
    image_path: str
    camera_path: str
    gt_path: str | None = None


@dataclass
class SceneConfig:
    views: list
    sources: dict             # view_id -> ordered source view ids
    depth_min: float
    depth_max: float
    stages: int = 3
    seed: int = 0
    schedule: dict = field(default_factory=lambda: dict(DEFAULT_SCHEDULE))
    s_max: float = 12.0
    g_max: float = 3.0
    k_views: int = 3
    groups: int = 1
    sampling_m: int | None = None
    weights_provider: str = "bilateral"
    weights_params: dict = field(default_factory=dict)
    name: str = "scene"

    def __post_init__(self):
        if len(self.views) < 1:
            raise ConfigError("scene needs at least one view")
        if len(self.views) < 2:
            log.warning("single-view scene: geometric stages degenerate to photometric")
        ids = {v.view_id for v in self.views}
        for vid, srcs in self.sources.items():
            if vid not in ids:
                raise ConfigError(f"sources entry for unknown view {vid!r}")
            for s in srcs:
                if s not in ids:
                    raise ConfigError(f"view {vid!r} references unknown source {s!r}")
                if s == vid:
                    raise ConfigError(f"view {vid!r} lists itself as a source")
        if not (0 < self.depth_min < self.depth_max):
            raise ConfigError(f"bad depth range [{self.depth_min}, {self.depth_max}]")
        if self.stages < 1:
            raise ConfigError("need at least one stage")
        self.schedule = {int(k): int(v) for k, v in self.schedule.items()}

    @classmethod
    def from_file(cls, path) -> "SceneConfig":
        base = os.path.dirname(os.path.abspath(path))
        with open(path) as f:
            raw = json.load(f)
        views = [ViewSpec(str(v["id"]),
                          os.path.join(base, v["image"]),
                          os.path.join(base, v["camera"]),
                          os.path.join(base, v["gt"]) if "gt" in v else None)
                 for v in raw["views"]]
        sources = {str(k): [str(s) for s in v] for k, v in raw.get("sources", {}).items()}
        if not sources:
            ids = [v.view_id for v in views]
            sources = {i: [j for j in ids if j != i] for i in ids}
        kwargs = {}
        for key in ("stages", "seed", "s_max", "g_max", "k_views", "groups",
                    "sampling_m", "weights_provider", "weights_params", "name"):
            if key in raw:
                kwargs[key] = raw[key]
        if "schedule" in raw:
            kwargs["schedule"] = {int(k): int(v) for k, v in raw["schedule"].items()}
        return cls(views, sources, float(raw["depth_min"]), float(raw["depth_max"]),
                   **kwargs)

    def view(self, vid) -> ViewSpec:
        for v in self.views:
            if v.view_id == vid:
                return v
        raise KeyError(vid)

    def fingerprint(self) -> str:
        blob = json.dumps({
            "views": [(v.view_id, os.path.basename(v.image_path),
                       os.path.basename(v.camera_path)) for v in self.views],
            "sources": self.sources, "depth": [self.depth_min, self.depth_max],
            "stages": self.stages, "seed": self.seed,
            "schedule": sorted(self.schedule.items()),
            "score": [self.s_max, self.g_max, self.k_views, self.groups],
            "sampling_m": self.sampling_m,
            "weights": [self.weights_provider, sorted(self.weights_params.items())],
        }, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class StageTask:
    view_id: str
    stage: int
    scale: int
    geometric: bool


def stage_scale(stage: int) -> int:
    return COARSEST_SCALE if stage == 0 else max(COARSEST_SCALE - stage, FINEST_SCALE)


def plan_stages(config: SceneConfig, photometric_only: bool = False):
    """Ordered execution plan: a list of barriers, each a list of StageTasks.

    Stage 0 is photometric at the coarsest scale; stages 1..K-1 are
    geometric-consistency passes at progressively finer scales (clamped at
    the finest).  Every stage-k task depends on the stage k-1 outputs of its
    own view and all of its source views, which barrier ordering guarantees.
    """
    barriers = []
    for stage in range(config.stages):
        tasks = []
        for v in config.views:
            has_srcs = bool(config.sources.get(v.view_id))
            geometric = stage > 0 and has_srcs and not photometric_only
            if stage > 0 and not has_srcs:
                log.warning("view %s has no sources; stage %d runs photometric-only",
                            v.view_id, stage)
            tasks.append(StageTask(v.view_id, stage, stage_scale(stage), geometric))
        barriers.append(tasks)
    if not barriers:
        raise PlanError("empty plan")
    return barriers


# --- ledger ---------------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class StageLedger:
    """Per-(view, stage) record of produced maps, with checksums."""

    def __init__(self, path, config_hash):
        self.path = path
        self.config_hash = config_hash
        self.tasks = {}
        self._lock = threading.Lock()  # single-writer guarantee across pool threads

    @classmethod
    def open(cls, path, config: SceneConfig) -> "StageLedger":
        ledger = cls(path, config.fingerprint())
        if os.path.exists(path):
            with open(path) as f:
                raw = json.load(f)
            if raw.get("config_hash") != ledger.config_hash:
                raise LedgerMismatch(f"ledger {path} belongs to a different configuration")
            ledger.tasks = raw.get("tasks", {})
        return ledger

    @staticmethod
    def key(view_id, stage) -> str:
        return f"{view_id}:{stage}"

    def record(self, view_id, stage, outputs: dict):
        entry = {
            "outputs": {name: {"path": p, "sha256": _sha256(p)}
                        for name, p in outputs.items()},
            "complete": True,
        }
        with self._lock:
            self.tasks[self.key(view_id, stage)] = entry
            self._flush_locked()

    def flush(self):
        with self._lock:
            self._flush_locked()

    def _flush_locked(self):
        tmp = self.path + ".tmp"
        with open(tmp, "w") as f:
            json.dump({"config_hash": self.config_hash, "tasks": self.tasks}, f, indent=1)
        os.replace(tmp, self.path)

    def is_complete(self, view_id, stage) -> bool:
        rec = self.tasks.get(self.key(view_id, stage))
        if not rec or not rec.get("complete"):
            return False
        for out in rec["outputs"].values():
            if not os.path.exists(out["path"]) or _sha256(out["path"]) != out["sha256"]:
                return False
        return True

    def output_path(self, view_id, stage, name) -> str:
        rec = self.tasks.get(self.key(view_id, stage))
        if not rec:
            raise StageIOError(f"no ledger record for view {view_id} stage {stage}")
        return rec["outputs"][name]["path"]

    def verified_load(self, view_id, stage, name):
        """Load a dependency map, re-checking its checksum."""
        rec = self.tasks.get(self.key(view_id, stage))
        if not rec or not rec.get("complete"):
            raise StageIOError(f"dependency incomplete: view {view_id} stage {stage}")
        out = rec["outputs"][name]
        if not os.path.exists(out["path"]):
            raise StageIOError(f"missing dependency file {out['path']}")
        if _sha256(out["path"]) != out["sha256"]:
            raise StageIOError(f"corrupt dependency file {out['path']} (checksum mismatch)")
        return load_map(out["path"])


# --- runtime --------------------------------------------------------------

class SceneRuntime:
    """Loaded images, cameras, pyramids and per-scale weight maps."""

    def __init__(self, config: SceneConfig):
        self.config = config
        self.cameras = {}
        self.images = {}
        self.pyramids = {}
        for v in config.views:
            self.cameras[v.view_id] = load_camera(v.camera_path, v.view_id)
            self.images[v.view_id] = load_image(v.image_path)
            self.pyramids[v.view_id] = build_pyramid(self.images[v.view_id], "gradient")
        self._weights_cache = {}

    def scaled_camera(self, vid, s) -> CameraView:
        return self.cameras[vid].scaled(s)

    def weights(self, vid, s):
        key = (vid, s)
        if key not in self._weights_cache:
            cfg = self.config
            params = dict(cfg.weights_params)
            if cfg.weights_provider == "gt":
                gt_full = load_map(cfg.view(vid).gt_path)
                params["gt"] = _downscale_gt(gt_full, self.cameras[vid], s)
                params["view"] = self.scaled_camera(vid, s)
            provider = make_weight_provider(cfg.weights_provider, **params)
            feat = self.pyramids[vid][s]
            self._weights_cache[key] = provider.coplanarity_map(
                image=feat[..., 0], shape=feat.shape[:2])
        return self._weights_cache[key]

    def engine_config(self, vid_index, stage) -> EngineConfig:
        cfg = self.config
        seed = int(np.random.SeedSequence(
            entropy=cfg.seed, spawn_key=(vid_index, stage)).generate_state(1)[0])
        return EngineConfig(
            depth_min=cfg.depth_min, depth_max=cfg.depth_max,
            schedule=cfg.schedule, k_views=cfg.k_views, s_max=cfg.s_max,
            g_max=cfg.g_max, groups=cfg.groups, sampling_m=cfg.sampling_m,
            seed=seed)


def _downscale_gt(gt: GeometryMap, camera: CameraView, s: int) -> GeometryMap:
    """Decimate a full-resolution GT map to pyramid level s (stride sampling)."""
    if s == 0:
        return gt
    f = 2 ** s
    view_s = camera.scaled(s)
    return GeometryMap(gt.depth[::f, ::f][: view_s.height, : view_s.width],
                       gt.normal[::f, ::f][: view_s.height, : view_s.width],
                       gt.valid[::f, ::f][: view_s.height, : view_s.width])


def _upsample_to_scale(gmap: GeometryMap, camera: CameraView,
                       from_scale: int, to_scale: int) -> GeometryMap:
    out = gmap
    for s in range(from_scale, to_scale, -1):
        out = upsample_nearest(out, camera.scaled(s), camera.scaled(s - 1))
    return out


def run_stage(task: StageTask, config: SceneConfig, runtime: SceneRuntime,
              ledger: StageLedger, out_dir) -> dict:
    """Execute one (view, stage) task and persist its maps."""
    vid = task.view_id
    if ledger.is_complete(vid, task.stage):
        log.info("view %s stage %d already complete, skipping", vid, task.stage)
        return {}

    scale = task.scale
    view = runtime.scaled_camera(vid, scale)
    src_ids = config.sources.get(vid, [])
    srcs = [runtime.scaled_camera(s, scale) for s in src_ids]
    ref_feat = runtime.pyramids[vid][scale]
    src_feats = [runtime.pyramids[s][scale] for s in src_ids]
    vid_index = [v.view_id for v in config.views].index(vid)
    ecfg = runtime.engine_config(vid_index, task.stage)

    prev_scale = stage_scale(task.stage - 1) if task.stage > 0 else None
    if task.stage == 0:
        geometry = initialize(view, config.depth_min, config.depth_max, ecfg.seed)
    else:
        own_prev = ledger.verified_load(vid, task.stage - 1, "geometry")
        geometry = _upsample_to_scale(own_prev, runtime.cameras[vid], prev_scale, scale)

    src_geometry = None
    if task.geometric:
        src_geometry = []
        for sid in src_ids:
            g = ledger.verified_load(sid, task.stage - 1, "geometry")
            src_geometry.append(_upsample_to_scale(g, runtime.cameras[sid],
                                                   prev_scale, scale))

    ctx = ScoringContext(view, srcs, ref_feat, src_feats,
                         runtime.weights(vid, scale), ecfg, src_geometry)
    n_src = len(src_ids)
    state = EngineState(
        geometry=geometry,
        visibility=np.ones((view.height, view.width, n_src)),
        scores=np.full((view.height, view.width), np.inf),
        scale=scale)
    n_iter = config.schedule.get(scale, 1)
    state = run_scale(state, ctx, n_iter)

    geom_path = os.path.join(out_dir, f"view_{vid}_stage{task.stage}.geom.map")
    score_path = os.path.join(out_dir, f"view_{vid}_stage{task.stage}.score.map")
    save_map(geom_path, state.geometry)
    save_map(score_path, ScoreField(state.scores.astype(np.float32),
                                    state.visibility.astype(np.float32)))
    ledger.record(vid, task.stage, {"geometry": geom_path, "score": score_path})
    return {"geometry": geom_path, "score": score_path}


def run_scene(config: SceneConfig, out_dir, threads: int = 1,
              photometric_only: bool = False, resume: bool = False) -> dict:
    """Run every stage for every view; returns final-stage geometry paths.

    Tasks within one barrier are independent and may run on a thread pool;
    the result is bit-identical regardless of thread count because each
    task's randomness is keyed by (seed, view, stage) only.
    """
    os.makedirs(out_dir, exist_ok=True)
    ledger_path = os.path.join(out_dir, "ledger.json")
    if not resume and os.path.exists(ledger_path):
        os.remove(ledger_path)
    ledger = StageLedger.open(ledger_path, config)
    ledger.flush()
    runtime = SceneRuntime(config)
    plan = plan_stages(config, photometric_only=photometric_only)

    for barrier in plan:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                futures = [pool.submit(run_stage, t, config, runtime, ledger, out_dir)
                           for t in barrier]
                for f in futures:
                    f.result()
        else:
            for t in barrier:
                run_stage(t, config, runtime, ledger, out_dir)

    final = config.stages - 1
    return {v.view_id: ledger.output_path(v.view_id, final, "geometry")
            for v in config.views}
