"""Tracking engine: constant-velocity Kalman filtering, cost matrices in
several modes, optimal assignment and track lifecycle.

State and gating follow the DeepSORT lineage: the Kalman state is
(cx, cy, aspect, height) plus velocities, measurement noise scales with the
box height, and track-detection pairs are gated at the 0.95 chi-square
quantile for 4 degrees of freedom.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import BBox, Detection, GtEntry
from .fusion import fuse_for_association, predict_attributes

CHI2_95_4DOF = 9.4877
INF_COST = 1e5

_STD_POS = 1.0 / 20.0
_STD_VEL = 1.0 / 160.0

COST_MODES = ("iou", "embed", "attr", "embed+attr", "concat")

_DEFAULT_MATCH_THRESHOLD = {
    "iou": 0.7,
    "embed": 1.0,
    "attr": 0.5,
    "embed+attr": 1.4,
    "concat": 1.0,
}


@dataclass(frozen=True, eq=False)
class KalmanState:
    """Gaussian state: mean (cx, cy, aspect, h, velocities), 8x8 covariance."""

    mean: np.ndarray
    covariance: np.ndarray

    def box(self) -> BBox:
        cx, cy, a, h = self.mean[:4]
        h = max(h, 1.0)
        w = max(a * h, 1.0)
        return BBox(cx - w / 2.0, cy - h / 2.0, w, h)


def _box_to_measurement(box: BBox) -> np.ndarray:
    return np.array([box.cx, box.cy, box.width / box.height, box.height])


def kalman_init(box: BBox) -> KalmanState:
    """Initial state from an unmatched detection; zero velocity."""
    mean = np.zeros(8)
    mean[:4] = _box_to_measurement(box)
    h = box.height
    std = np.array([
        2 * _STD_POS * h, 2 * _STD_POS * h, 1e-2, 2 * _STD_POS * h,
        10 * _STD_VEL * h, 10 * _STD_VEL * h, 1e-5, 10 * _STD_VEL * h,
    ])
    return KalmanState(mean=mean, covariance=np.diag(std * std))


def _motion_matrices(h: float):
    F = np.eye(8)
    for i in range(4):
        F[i, i + 4] = 1.0
    std = np.array([
        _STD_POS * h, _STD_POS * h, 1e-2, _STD_POS * h,
        _STD_VEL * h, _STD_VEL * h, 1e-5, _STD_VEL * h,
    ])
    return F, np.diag(std * std)


def kalman_predict(state: KalmanState) -> KalmanState:
    """Constant-velocity prediction; process noise strictly grows the trace."""
    F, Q = _motion_matrices(state.mean[3])
    mean = F @ state.mean
    cov = F @ state.covariance @ F.T + Q
    cov = (cov + cov.T) / 2.0
    return KalmanState(mean=mean, covariance=cov)


def _innovation(state: KalmanState, box: BBox):
    h = state.mean[3]
    std = np.array([_STD_POS * h, _STD_POS * h, 1e-1, _STD_POS * h])
    R = np.diag(std * std)
    S = state.covariance[:4, :4] + R
    y = _box_to_measurement(box) - state.mean[:4]
    return y, S


def kalman_update(state: KalmanState, box: BBox) -> KalmanState:
    """Standard correction on the (cx, cy, aspect, h) measurement."""
    y, S = _innovation(state, box)
    try:
        chol = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise ValueError("innovation covariance is not positive definite") from exc
    PHt = state.covariance[:, :4]
    # K = P H' S^-1 via two triangular solves
    K = np.linalg.solve(chol.T, np.linalg.solve(chol, PHt.T)).T
    mean = state.mean + K @ y
    cov = state.covariance - K @ PHt.T
    cov = (cov + cov.T) / 2.0
    return KalmanState(mean=mean, covariance=cov)


def gating_distance(state: KalmanState, box: BBox) -> float:
    """Squared Mahalanobis distance of the box under the predicted state."""
    y, S = _innovation(state, box)
    try:
        chol = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular innovation covariance") from exc
    z = np.linalg.solve(chol, y)
    return float(z @ z)


# ---------------------------------------------------------------------------
# Track lifecycle
# ---------------------------------------------------------------------------

TENTATIVE = "tentative"
CONFIRMED = "confirmed"
LOST = "lost"


@dataclass
class Track:
    identity: int
    state: KalmanState
    status: str = TENTATIVE
    hits: int = 1
    time_since_update: int = 0
    attr_estimate: np.ndarray | None = None
    pending: list = field(default_factory=list)  # (frame, box) before confirmation
    # gallery ring buffer of unit-normalized embeddings (min-distance lookup
    # is order independent, so overwrite-in-place replaces FIFO eviction)
    _gal_buf: np.ndarray | None = None
    _gal_n: int = 0
    _gal_ptr: int = 0

    def is_active(self) -> bool:
        return self.status in (TENTATIVE, CONFIRMED)

    @property
    def gallery(self) -> list:
        if self._gal_buf is None:
            return []
        return [self._gal_buf[i] for i in range(self._gal_n)]

    def push_feature(self, emb: np.ndarray, budget: int) -> None:
        norm = np.linalg.norm(emb)
        if norm == 0:
            raise ValueError("degenerate embedding")
        if self._gal_buf is None:
            self._gal_buf = np.empty((budget, emb.shape[0]))
            self._gal_n = 0
            self._gal_ptr = 0
        self._gal_buf[self._gal_ptr] = emb / norm
        self._gal_ptr = (self._gal_ptr + 1) % self._gal_buf.shape[0]
        self._gal_n = min(self._gal_n + 1, self._gal_buf.shape[0])

    def gallery_matrix(self) -> np.ndarray:
        return self._gal_buf[: self._gal_n]


@dataclass(frozen=True)
class AssocConfig:
    """Association settings; ``mode`` picks the cost matrix."""

    mode: str = "embed"
    lambda_e: float = 1.0
    lambda_a: float = 1.0
    gating_threshold: float = CHI2_95_4DOF
    match_threshold: float | None = None   # None = per-mode default
    n_init: int = 3
    max_age: int = 30
    gallery_budget: int = 30
    attr_ema: float = 0.9
    attr_source: str = "obs"               # "obs" | "fusion"
    attr_binarize: bool = False
    normalize_costs: bool = False
    emit_coasting: bool = False
    min_confidence: float = 0.0

    def __post_init__(self):
        if self.mode not in COST_MODES:
            raise ValueError(f"unknown cost mode {self.mode!r}")
        if self.mode == "embed+attr" and self.lambda_e + self.lambda_a <= 0:
            raise ValueError("lambda_e + lambda_a must be positive for embed+attr")
        if self.lambda_e < 0 or self.lambda_a < 0:
            raise ValueError("lambda weights must be non-negative")
        if self.gating_threshold <= 0:
            raise ValueError("gating threshold must be positive")
        if self.match_threshold is not None and self.match_threshold <= 0:
            raise ValueError("match threshold must be positive")
        if self.n_init < 1 or self.max_age < 1 or self.gallery_budget < 1:
            raise ValueError("n_init, max_age and gallery budget must be >= 1")
        if not 0.0 <= self.attr_ema < 1.0:
            raise ValueError("attr EMA factor must lie in [0, 1)")
        if self.attr_source not in ("obs", "fusion"):
            raise ValueError(f"unknown attr source {self.attr_source!r}")

    @property
    def threshold(self) -> float:
        if self.match_threshold is not None:
            return self.match_threshold
        return _DEFAULT_MATCH_THRESHOLD[self.mode]


def _needs_features(mode: str) -> bool:
    return mode in ("embed", "attr", "embed+attr", "concat")


def detection_attr_vector(det: Detection, config: AssocConfig,
                          fusion_params=None) -> np.ndarray:
    """Attribute vector used for costs/EMA: observed or head-predicted."""
    if config.attr_source == "fusion":
        if fusion_params is None:
            raise ValueError("fusion_params required for attr_source='fusion'")
        params, strategy = fusion_params
        # The observed attribute vector (when present) is the query source,
        # mirroring training; embeddings-only input falls back to the
        # learned linear attribute head.
        probs, _ = predict_attributes(det.embedding, det.attr_obs, strategy, params)
        vec = probs
    else:
        if det.attr_obs is None:
            raise ValueError("detection carries no attribute observation")
        vec = det.attr_obs
    if config.attr_binarize:
        vec = (vec >= 0.5).astype(np.float64)
    return vec


def _normalize_rows(feats: np.ndarray) -> np.ndarray:
    fn = np.linalg.norm(feats, axis=1, keepdims=True)
    if (fn == 0).any():
        raise ValueError("degenerate embedding")
    return feats / fn


def _gallery_min_cosine(gallery_mat: np.ndarray, feats_normed: np.ndarray) -> np.ndarray:
    """Min cosine distance from each normalized feature row to the gallery."""
    sim = gallery_mat @ feats_normed.T
    return np.clip(1.0 - sim, 0.0, 2.0).min(axis=0)


def _gating_matrix(tracks: list, meas: np.ndarray) -> np.ndarray:
    """(T, D) squared Mahalanobis distances, batched over tracks."""
    means = np.stack([t.state.mean for t in tracks])
    covs = np.stack([t.state.covariance for t in tracks])
    h = means[:, 3]
    std = np.stack([_STD_POS * h, _STD_POS * h, np.full_like(h, 1e-1), _STD_POS * h], axis=1)
    S = covs[:, :4, :4].copy()
    idx = np.arange(4)
    S[:, idx, idx] += std * std
    chol = np.linalg.cholesky(S)
    y = meas[None, :, :] - means[:, None, :4]          # (T, D, 4)
    z = np.linalg.solve(chol, y.transpose(0, 2, 1))    # (T, 4, D)
    return (z * z).sum(axis=1)


def _predict_all(tracks: list) -> None:
    """Batched constant-velocity prediction over all live tracks."""
    if not tracks:
        return
    means = np.stack([t.state.mean for t in tracks])
    covs = np.stack([t.state.covariance for t in tracks])
    F = np.eye(8)
    idx4 = np.arange(4)
    F[idx4, idx4 + 4] = 1.0
    h = means[:, 3]
    qstd = np.stack([
        _STD_POS * h, _STD_POS * h, np.full_like(h, 1e-2), _STD_POS * h,
        _STD_VEL * h, _STD_VEL * h, np.full_like(h, 1e-5), _STD_VEL * h,
    ], axis=1)
    means = means @ F.T
    covs = F[None] @ covs @ F.T[None]
    idx8 = np.arange(8)
    covs[:, idx8, idx8] += qstd * qstd
    covs = (covs + covs.transpose(0, 2, 1)) / 2.0
    for t, m, P in zip(tracks, means, covs):
        t.state = KalmanState(mean=m, covariance=P)


def _minmax(col: np.ndarray) -> np.ndarray:
    finite = np.isfinite(col)
    if not finite.any():
        return col
    lo, hi = col[finite].min(), col[finite].max()
    if hi - lo <= 0:
        return np.where(finite, 0.0, col)
    out = col.copy()
    out[finite] = (col[finite] - lo) / (hi - lo)
    return out


def build_cost_matrix(tracks: list[Track], detections: list[Detection],
                      config: AssocConfig, fusion_params=None,
                      det_attrs: list[np.ndarray] | None = None):
    """Cost matrix plus infeasibility mask (Mahalanobis-gated pairs).

    ``det_attrs`` lets the caller reuse precomputed per-detection attribute
    vectors; otherwise they are derived per ``config.attr_source``.
    """
    n_t, n_d = len(tracks), len(detections)
    cost = np.zeros((n_t, n_d))
    infeasible = np.zeros((n_t, n_d), dtype=bool)
    if n_t == 0 or n_d == 0:
        return cost, infeasible
    mode = config.mode
    if _needs_features(mode) and mode != "attr":
        for det in detections:
            if det.embedding is None:
                raise ValueError("detection carries no embedding for this cost mode")
    if det_attrs is None and mode in ("attr", "embed+attr", "concat"):
        det_attrs = [detection_attr_vector(d, config, fusion_params) for d in detections]

    meas = np.stack([_box_to_measurement(d.box) for d in detections])
    infeasible = _gating_matrix(tracks, meas) > config.gating_threshold

    if mode in ("embed", "embed+attr", "concat"):
        det_emb = np.stack([d.embedding for d in detections])
    if mode in ("embed", "embed+attr"):
        det_normed = _normalize_rows(det_emb)
        embed_mat = np.stack([
            _gallery_min_cosine(t.gallery_matrix(), det_normed) for t in tracks
        ])
    if mode in ("attr", "embed+attr"):
        attr_det = np.stack(det_attrs)
        attr_trk = np.stack([t.attr_estimate for t in tracks])
        attr_mat = np.abs(attr_trk[:, None, :] - attr_det[None, :, :]).mean(axis=2)

    if mode == "iou":
        from .core import iou
        for i, trk in enumerate(tracks):
            tb = trk.state.box()
            for j, det in enumerate(detections):
                cost[i, j] = 1.0 - iou(tb, det.box)
    elif mode == "embed":
        cost = embed_mat
    elif mode == "attr":
        cost = attr_mat
    elif mode == "embed+attr":
        if config.normalize_costs:
            embed_mat = _minmax(embed_mat)
            attr_mat = _minmax(attr_mat)
        cost = config.lambda_e * embed_mat + config.lambda_a * attr_mat
    elif mode == "concat":
        det_feats = _normalize_rows(np.concatenate([det_emb, np.stack(det_attrs)], axis=1))
        cost = np.stack([
            _gallery_min_cosine(
                _normalize_rows(np.stack([
                    fuse_for_association(g, trk.attr_estimate) for g in trk.gallery
                ])),
                det_feats,
            )
            for trk in tracks
        ])
    return cost, infeasible


def solve_assignment(cost: np.ndarray, infeasible: np.ndarray | None = None,
                     threshold: float = math.inf):
    """Minimum-cost bipartite matching over feasible entries.

    Infeasible entries are priced at INF_COST, which dominates any sum of
    feasible costs, so the solver maximizes feasible cardinality first.
    Matches costlier than ``threshold`` are dropped to unmatched.
    Returns (matches, unmatched_rows, unmatched_cols).
    """
    cost = np.asarray(cost, dtype=np.float64)
    n_r, n_c = cost.shape
    if n_r == 0 or n_c == 0:
        return [], list(range(n_r)), list(range(n_c))
    work = cost.copy()
    if infeasible is not None:
        work[infeasible] = INF_COST
    rows, cols = linear_sum_assignment(work)
    matches = []
    unmatched_rows = set(range(n_r))
    unmatched_cols = set(range(n_c))
    for r, c in zip(rows, cols):
        if work[r, c] >= INF_COST or cost[r, c] > threshold:
            continue
        matches.append((int(r), int(c)))
        unmatched_rows.discard(int(r))
        unmatched_cols.discard(int(c))
    return matches, sorted(unmatched_rows), sorted(unmatched_cols)


# ---------------------------------------------------------------------------
# Tracker
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrackOutput:
    frame: int
    identity: int
    box: BBox


class Tracker:
    """Single-sequence online tracker; identities are never reused."""

    def __init__(self, config: AssocConfig, fusion_params=None):
        if config.attr_source == "fusion" and fusion_params is None:
            raise ValueError("fusion_params required for attr_source='fusion'")
        self.config = config
        self.fusion_params = fusion_params
        self.tracks: list[Track] = []
        self._next_id = 1

    def step(self, frame: int, detections: list[Detection]) -> list[TrackOutput]:
        """Advance one frame.  Returns this frame's confirmed boxes; when a
        track reaches confirmation its buffered tentative boxes (earlier
        frames) are emitted retroactively in the same call."""
        cfg = self.config
        detections = [d for d in detections if d.confidence >= cfg.min_confidence]
        _predict_all(self.tracks)
        for trk in self.tracks:
            trk.time_since_update += 1

        need_attr = cfg.mode in ("attr", "embed+attr", "concat")
        det_attrs = (
            [detection_attr_vector(d, cfg, self.fusion_params) for d in detections]
            if need_attr and detections else None
        )
        cost, infeasible = build_cost_matrix(self.tracks, detections, cfg,
                                             self.fusion_params, det_attrs)
        matches, u_tracks, u_dets = solve_assignment(cost, infeasible, cfg.threshold)

        outputs: list[TrackOutput] = []
        for r, c in matches:
            trk = self.tracks[r]
            det = detections[c]
            trk.state = kalman_update(trk.state, det.box)
            trk.hits += 1
            trk.time_since_update = 0
            if det.embedding is not None:
                trk.push_feature(det.embedding, cfg.gallery_budget)
            if det_attrs is not None:
                a = det_attrs[c]
                if trk.attr_estimate is None:
                    trk.attr_estimate = a.copy()
                else:
                    trk.attr_estimate = cfg.attr_ema * trk.attr_estimate + (1 - cfg.attr_ema) * a
            elif det.attr_obs is not None:
                if trk.attr_estimate is None:
                    trk.attr_estimate = det.attr_obs.copy()
                else:
                    trk.attr_estimate = cfg.attr_ema * trk.attr_estimate + (1 - cfg.attr_ema) * det.attr_obs
            box = trk.state.box()
            if trk.status == TENTATIVE:
                trk.pending.append((frame, box))
                if trk.hits >= cfg.n_init:
                    trk.status = CONFIRMED
                    outputs.extend(TrackOutput(f, trk.identity, b) for f, b in trk.pending)
                    trk.pending = []
            else:
                outputs.append(TrackOutput(frame, trk.identity, box))

        removed = []
        for r in u_tracks:
            trk = self.tracks[r]
            if trk.status == TENTATIVE:
                removed.append(r)  # confirmation requires consecutive hits
            elif trk.time_since_update > cfg.max_age:
                trk.status = LOST
            elif cfg.emit_coasting and trk.status == CONFIRMED:
                outputs.append(TrackOutput(frame, trk.identity, trk.state.box()))
        self.tracks = [t for i, t in enumerate(self.tracks)
                       if i not in removed and t.status != LOST]

        for c in u_dets:
            det = detections[c]
            trk = Track(identity=self._next_id, state=kalman_init(det.box))
            self._next_id += 1
            if det.embedding is not None:
                trk.push_feature(det.embedding, cfg.gallery_budget)
            if det_attrs is not None:
                trk.attr_estimate = det_attrs[c].copy()
            elif det.attr_obs is not None:
                trk.attr_estimate = det.attr_obs.copy()
            trk.pending.append((frame, det.box))
            if cfg.n_init <= 1:
                trk.status = CONFIRMED
                outputs.extend(TrackOutput(f, trk.identity, b) for f, b in trk.pending)
                trk.pending = []
            self.tracks.append(trk)
        return outputs


def tracker_step(tracker: Tracker, frame: int, detections: list[Detection]) -> list[TrackOutput]:
    """Functional wrapper over Tracker.step."""
    return tracker.step(frame, detections)


def run_sequence(frames: dict[int, list[Detection]], config: AssocConfig,
                 fusion_params=None, n_frames: int | None = None) -> list[TrackOutput]:
    """Track a whole sequence of per-frame detections; deterministic."""
    tracker = Tracker(config, fusion_params)
    out: list[TrackOutput] = []
    last = n_frames if n_frames is not None else (max(frames) if frames else 0)
    for f in range(1, last + 1):
        out.extend(tracker.step(f, frames.get(f, [])))
    out.sort(key=lambda o: (o.frame, o.identity))
    return out


def run_bundle(bundle, config: AssocConfig, fusion_params=None) -> list[TrackOutput]:
    """Generate observations from a bundle and track them."""
    from .synthgen import observe_all_frames

    frames = observe_all_frames(bundle)
    return run_sequence(frames, config, fusion_params, n_frames=bundle.n_frames)


def outputs_to_entries(outputs: list[TrackOutput]) -> list[GtEntry]:
    """Convert tracker outputs to result-file rows."""
    return [GtEntry(frame=o.frame, identity=o.identity, box=o.box) for o in outputs]
