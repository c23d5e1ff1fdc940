"""Synthetic pedestrian sequences with attributes, occlusion and noisy
observations.

Scripted 2-D trajectories (linear walks, crossing pairs, loiterers) stand in
for a rendered world.  Depth comes from a fixed draw order (lower identity
index is in front), which makes per-frame occlusion fractions computable
from box geometry alone.  The observation model encodes the premise that
appearance embeddings degrade sharply under occlusion while attribute
observations degrade far less: embedding noise scales with
``sigma * (1 + embed_occ_gain * occ)`` and attribute bits flip with
``min(0.5, flip_base + attr_flip_occ_gain * occ)``.

All randomness is derived from the config seed through named SeedSequence
streams, so identical configs reproduce byte-identical worlds regardless of
call order.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    BODY_SLICE,
    HAIR_SLICE,
    IDX_GENDER_MALE,
    LOWER_COLOR_SLICE,
    N_ATTRIBUTES,
    UPPER_COLOR_SLICE,
    AttributeVector,
    BBox,
    Detection,
    GtEntry,
    occlusion_fraction,
)
from .fusion import TrainSample

# SeedSequence stream tags
_STREAM_CARDS = 0
_STREAM_PATHS = 1
_STREAM_OBSERVE = 2
_STREAM_SEQUENCE = 4
_STREAM_CROPS = 5

_MIN_BOX = 2.0  # boxes thinner than this after clipping are dropped


@dataclass(frozen=True)
class AttributePrior:
    """Sampling distribution over the 32 attribute slots.

    Defaults are round numbers shaped like the dataset they imitate:
    short hair is the most common hair length, black the modal clothing
    color, and accessories are minority attributes.
    """

    p_male: float = 0.55
    body: tuple = (0.3, 0.5, 0.2)               # thin / medium / fat
    hair: tuple = (0.1, 0.6, 0.3)               # bald / short / long
    # long sleeve, upper long, skirt, lower long, backpack, hat, boots
    p_binary: tuple = (0.4, 0.3, 0.2, 0.5, 0.3, 0.2, 0.15)
    colors: tuple = (0.30, 0.15, 0.12, 0.09, 0.08, 0.08, 0.07, 0.06, 0.05)
    p_extra_color: float = 0.15                 # chance of a second clothing color

    def validate(self) -> None:
        for name, probs, want in (("body", self.body, 3), ("hair", self.hair, 3),
                                  ("colors", self.colors, 9)):
            if len(probs) != want:
                raise ValueError(f"prior {name} must have {want} entries")
            if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
                raise ValueError(f"prior {name} must be a probability vector")
        if len(self.p_binary) != 7:
            raise ValueError("prior p_binary must have 7 entries")
        for p in (self.p_male, self.p_extra_color, *self.p_binary):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"prior probability {p} outside [0, 1]")


@dataclass(frozen=True)
class WorldConfig:
    """Everything that determines one synthetic sequence."""

    n_identities: int = 15
    n_frames: int = 100
    image_width: int = 1280
    image_height: int = 720
    # trajectory kind weights
    w_linear: float = 0.3
    w_crossing: float = 0.5
    w_loiter: float = 0.2
    # detection noise
    miss_base: float = 0.05
    miss_occ_gain: float = 0.15
    jitter_sigma: float = 1.0
    fp_rate: float = 0.1
    # embedding model: identity latents sit on a shared direction plus a
    # per-identity offset of relative size latent_spread, so appearance is
    # only moderately discriminative; occlusion scales the per-frame,
    # per-component noise (noise norm grows with sqrt(latent_dim)).
    latent_dim: int = 512
    latent_spread: float = 0.06
    embed_noise_sigma: float = 0.012
    embed_occ_gain: float = 25.0
    # attribute observation model
    attr_flip_base: float = 0.02
    attr_flip_occ_gain: float = 0.1
    prior: AttributePrior = field(default_factory=AttributePrior)
    seed: int = 0

    def validate(self) -> None:
        if self.n_identities < 1 or self.n_frames < 1:
            raise ValueError("n_identities and n_frames must be >= 1")
        if self.image_width < 64 or self.image_height < 64:
            raise ValueError("image must be at least 64x64")
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be >= 2")
        if self.latent_spread <= 0:
            raise ValueError("latent_spread must be positive")
        weights = (self.w_linear, self.w_crossing, self.w_loiter)
        if any(w < 0 for w in weights) or sum(weights) <= 0:
            raise ValueError("trajectory weights must be non-negative, not all zero")
        for name in ("miss_base", "attr_flip_base"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        for name in ("miss_occ_gain", "jitter_sigma", "fp_rate",
                     "embed_noise_sigma", "embed_occ_gain", "attr_flip_occ_gain"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        self.prior.validate()


@dataclass(frozen=True, eq=False)
class IdentityCard:
    """One pedestrian: attributes, appearance latent and scripted path."""

    identity: int
    attributes: AttributeVector
    latent: np.ndarray                 # unit norm
    trajectory: np.ndarray             # (n_frames, 4) ltwh
    present: np.ndarray                # (n_frames,) bool

    def box_at(self, frame: int) -> BBox | None:
        """Box for a 1-based frame index, or None when off-screen."""
        i = frame - 1
        if not self.present[i]:
            return None
        l, t, w, h = self.trajectory[i]
        return BBox(l, t, w, h)


@dataclass(frozen=True, eq=False)
class SequenceBundle:
    """A generated sequence: scripted ground truth plus per-frame occlusion."""

    name: str
    config: WorldConfig
    cards: tuple
    occlusion: np.ndarray              # (n_frames, n_identities)

    @property
    def n_frames(self) -> int:
        return self.config.n_frames

    def gt_entries(self) -> list[GtEntry]:
        out = []
        for f in range(1, self.config.n_frames + 1):
            for i, card in enumerate(self.cards):
                box = card.box_at(f)
                if box is None:
                    continue
                out.append(GtEntry(frame=f, identity=card.identity, box=box,
                                   visibility=1.0 - float(self.occlusion[f - 1, i])))
        return out

    def attribute_table(self) -> dict[int, AttributeVector]:
        return {card.identity: card.attributes for card in self.cards}


def _rng(config: WorldConfig, *stream) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed & 0xFFFFFFFFFFFFFFF, *stream]))


def sample_attribute_bits(rng: np.random.Generator, prior: AttributePrior) -> np.ndarray:
    bits = np.zeros(N_ATTRIBUTES)
    bits[IDX_GENDER_MALE] = 1.0 if rng.random() < prior.p_male else 0.0
    bits[BODY_SLICE][rng.choice(3, p=prior.body)] = 1.0
    bits[HAIR_SLICE][rng.choice(3, p=prior.hair)] = 1.0
    for k, p in enumerate(prior.p_binary):
        bits[7 + k] = 1.0 if rng.random() < p else 0.0
    for sl in (UPPER_COLOR_SLICE, LOWER_COLOR_SLICE):
        primary = rng.choice(9, p=prior.colors)
        bits[sl][primary] = 1.0
        if rng.random() < prior.p_extra_color:
            extra = rng.choice(9, p=prior.colors)
            bits[sl][extra] = 1.0  # may coincide with the primary color
    return bits


def sample_identity(rng: np.random.Generator, prior: AttributePrior,
                    latent_dim: int, identity: int = 1,
                    trajectory: np.ndarray | None = None,
                    present: np.ndarray | None = None,
                    base_latent: np.ndarray | None = None,
                    spread: float = 1.0) -> IdentityCard:
    """Draw one identity card (attributes + unit-norm appearance latent).

    With ``base_latent`` the latent is a unit-normalized mix
    ``base + spread * own``, giving controllably similar appearances.
    """
    bits = sample_attribute_bits(rng, prior)
    latent = rng.standard_normal(latent_dim)
    latent /= np.linalg.norm(latent)
    if base_latent is not None:
        latent = base_latent + spread * latent
        latent /= np.linalg.norm(latent)
    if trajectory is None:
        trajectory = np.zeros((1, 4))
        trajectory[0] = (0.0, 0.0, 10.0, 10.0)
        present = np.ones(1, dtype=bool)
    return IdentityCard(identity=identity, attributes=AttributeVector.binary(bits),
                        latent=latent, trajectory=trajectory, present=present)


def _body_size(rng: np.random.Generator, config: WorldConfig) -> tuple[float, float]:
    h = rng.uniform(60.0, min(140.0, config.image_height * 0.45))
    w = h * rng.uniform(0.35, 0.5)
    return w, h


def _linear_path(rng, config, w, h) -> np.ndarray:
    n = config.n_frames
    x_max = config.image_width - w
    y_max = config.image_height - h
    start = np.array([rng.uniform(0, x_max), rng.uniform(0, y_max)])
    end = np.array([rng.uniform(0, x_max), rng.uniform(0, y_max)])
    t = np.linspace(0.0, 1.0, n)[:, None]
    pos = start[None, :] * (1 - t) + end[None, :] * t
    out = np.empty((n, 4))
    out[:, 0:2] = pos
    out[:, 2] = w
    out[:, 3] = h
    return out


def _loiter_path(rng, config, w, h) -> np.ndarray:
    n = config.n_frames
    x_max = config.image_width - w
    y_max = config.image_height - h
    margin = 30.0
    cx = rng.uniform(margin, max(margin + 1, x_max - margin))
    cy = rng.uniform(margin, max(margin + 1, y_max - margin))
    amp = rng.uniform(5.0, 25.0, size=2)
    freq = rng.uniform(0.02, 0.08, size=2)
    phase = rng.uniform(0, 2 * math.pi, size=2)
    t = np.arange(n)
    out = np.empty((n, 4))
    out[:, 0] = np.clip(cx + amp[0] * np.sin(freq[0] * t + phase[0]), 0, x_max)
    out[:, 1] = np.clip(cy + amp[1] * np.sin(freq[1] * t + phase[1]), 0, y_max)
    out[:, 2] = w
    out[:, 3] = h
    return out


def _crossing_pair_paths(rng, config) -> tuple[np.ndarray, np.ndarray]:
    """Two pedestrians walking through each other near mid-sequence.

    Paths share a vertical band so the rear one is heavily occluded at the
    crossing point.  A narrow traversal span keeps relative speed low, so
    the overlap window (and the embedding-corruption window with it) lasts
    several frames.
    """
    n = config.n_frames
    w1, h1 = _body_size(rng, config)
    w2, h2 = w1 * rng.uniform(0.9, 1.1), h1 * rng.uniform(0.9, 1.1)
    y = rng.uniform(0, config.image_height - max(h1, h2))
    x_lo = config.image_width * 0.33
    x_hi = config.image_width * 0.67 - max(w1, w2)
    t = np.linspace(0.0, 1.0, n)
    jit = rng.uniform(-0.05, 0.05)  # de-synchronize the meeting point a bit
    a = np.empty((n, 4))
    a[:, 0] = x_lo + (x_hi - x_lo) * np.clip(t + jit, 0, 1)
    a[:, 1] = y
    a[:, 2] = w1
    a[:, 3] = h1
    b = np.empty((n, 4))
    b[:, 0] = x_hi - (x_hi - x_lo) * t
    b[:, 1] = np.clip(y + rng.uniform(-8.0, 8.0), 0, config.image_height - h2)
    b[:, 2] = w2
    b[:, 3] = h2
    return a, b


def simulate_sequence(config: WorldConfig, name: str = "seq-0000") -> SequenceBundle:
    """Generate ground truth for one sequence (no observation noise)."""
    config.validate()
    card_rng = _rng(config, _STREAM_CARDS)
    path_rng = _rng(config, _STREAM_PATHS)
    n_ids, n = config.n_identities, config.n_frames

    # Assign trajectory kinds; a crossing consumes the next identity as partner.
    weights = np.array([config.w_linear, config.w_crossing, config.w_loiter], dtype=float)
    weights /= weights.sum()
    paths: list[np.ndarray] = []
    i = 0
    while i < n_ids:
        kind = path_rng.choice(3, p=weights)
        if kind == 1 and i + 1 < n_ids:
            a, b = _crossing_pair_paths(path_rng, config)
            paths.extend([a, b])
            i += 2
            continue
        w, h = _body_size(path_rng, config)
        if kind == 2:
            paths.append(_loiter_path(path_rng, config, w, h))
        else:
            paths.append(_linear_path(path_rng, config, w, h))
        i += 1

    base = card_rng.standard_normal(config.latent_dim)
    base /= np.linalg.norm(base)
    cards = []
    for idx in range(n_ids):
        present = np.ones(n, dtype=bool)
        cards.append(
            sample_identity(card_rng, config.prior, config.latent_dim,
                            identity=idx + 1, trajectory=paths[idx], present=present,
                            base_latent=base, spread=config.latent_spread)
        )

    # Occlusion: draw order is identity order, lower index in front.
    occ = np.zeros((n, n_ids))
    for f in range(n):
        boxes = [BBox(*c.trajectory[f]) if c.present[f] else None for c in cards]
        for i in range(n_ids):
            if boxes[i] is None:
                continue
            worst = 0.0
            for j in range(i):
                if boxes[j] is None:
                    continue
                worst = max(worst, occlusion_fraction(boxes[i], boxes[j]))
            occ[f, i] = worst
    return SequenceBundle(name=name, config=config, cards=tuple(cards), occlusion=occ)


def _clip_box(l, t, w, h, config) -> BBox | None:
    if l >= 0.0 and t >= 0.0 and l + w <= config.image_width and t + h <= config.image_height:
        return BBox(l, t, w, h)
    right = min(l + w, float(config.image_width))
    bottom = min(t + h, float(config.image_height))
    l = max(l, 0.0)
    t = max(t, 0.0)
    if right - l < _MIN_BOX or bottom - t < _MIN_BOX:
        return None
    return BBox(l, t, right - l, bottom - t)


def perturb_embedding(latent: np.ndarray, occ: float, config: WorldConfig,
                      rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Occlusion-scaled embedding noise: per-component sigma grows as
    ``sigma * (1 + embed_occ_gain * occ)``.

    Returns the unit-normalized noisy embedding and the pre-normalization
    perturbation norm (which concentrates around sqrt(dim) * sigma_eff).
    """
    sigma_eff = config.embed_noise_sigma * (1.0 + config.embed_occ_gain * occ)
    if sigma_eff == 0.0:
        return latent.copy(), 0.0
    noise = sigma_eff * rng.standard_normal(latent.shape[0])
    emb = latent + noise
    return emb / np.linalg.norm(emb), float(np.linalg.norm(noise))


def flip_attributes(bits: np.ndarray, occ: float, config: WorldConfig,
                    rng: np.random.Generator) -> np.ndarray:
    """Independent bit flips with ``min(0.5, base + gain * occ)``."""
    p_eff = min(0.5, config.attr_flip_base + config.attr_flip_occ_gain * occ)
    flips = rng.random(N_ATTRIBUTES) < p_eff
    return np.abs(bits - flips.astype(np.float64))


def _emit_observation(card: IdentityCard, occ: float, frame: int,
                      config: WorldConfig, rng: np.random.Generator) -> Detection | None:
    """One noisy detection for a present identity; None when clipped away."""
    l, t, w, h = card.trajectory[frame - 1]
    if config.jitter_sigma > 0:
        l, t, w, h = np.array([l, t, w, h]) + rng.normal(0.0, config.jitter_sigma, 4)
    box = _clip_box(l, t, max(w, _MIN_BOX), max(h, _MIN_BOX), config)
    if box is None:
        return None
    emb, _ = perturb_embedding(card.latent, occ, config, rng)
    attr = flip_attributes(card.attributes.values, occ, config, rng)
    conf = float(np.clip(1.0 - 0.5 * occ + 0.05 * rng.standard_normal(), 0.05, 1.0))
    return Detection(frame=frame, box=box, confidence=conf, embedding=emb, attr_obs=attr)


def observe_frame(bundle: SequenceBundle, frame: int,
                  config: WorldConfig | None = None) -> list[Detection]:
    """Noisy detections for one 1-based frame, deterministic per (seed, frame)."""
    config = config or bundle.config
    if not 1 <= frame <= config.n_frames:
        raise ValueError(f"frame {frame} out of range 1..{config.n_frames}")
    rng = _rng(config, _STREAM_OBSERVE, frame)
    out: list[Detection] = []
    for i, card in enumerate(bundle.cards):
        if not card.present[frame - 1]:
            continue
        occ = float(bundle.occlusion[frame - 1, i])
        miss_p = min(1.0, config.miss_base + config.miss_occ_gain * occ)
        if rng.random() < miss_p:
            continue
        det = _emit_observation(card, occ, frame, config, rng)
        if det is not None:
            out.append(det)
    for _ in range(rng.poisson(config.fp_rate)):
        h = rng.uniform(40.0, 160.0)
        w = h * rng.uniform(0.35, 0.55)
        l = rng.uniform(0.0, max(1.0, config.image_width - w))
        t = rng.uniform(0.0, max(1.0, config.image_height - h))
        box = _clip_box(l, t, w, h, config)
        if box is None:
            continue
        emb = rng.standard_normal(config.latent_dim)
        emb /= np.linalg.norm(emb)
        attr = rng.uniform(0.0, 1.0, N_ATTRIBUTES)
        conf = float(rng.uniform(0.1, 0.6))
        out.append(Detection(frame=frame, box=box, confidence=conf,
                             embedding=emb, attr_obs=attr))
    return out


def observe_all_frames(bundle: SequenceBundle,
                       config: WorldConfig | None = None) -> dict[int, list[Detection]]:
    config = config or bundle.config
    return {f: observe_frame(bundle, f, config) for f in range(1, config.n_frames + 1)}


def generate_benchmark(config: WorldConfig, n_sequences: int) -> list[SequenceBundle]:
    """Generate a list of sequences with per-sequence derived seeds."""
    if n_sequences < 1:
        raise ValueError("n_sequences must be >= 1")
    config.validate()
    bundles = []
    for s in range(n_sequences):
        seed_s = int(np.random.SeedSequence(
            [config.seed & 0xFFFFFFFFFFFFFFF, _STREAM_SEQUENCE, s]).generate_state(1)[0])
        cfg = replace(config, seed=seed_s)
        bundles.append(simulate_sequence(cfg, name=f"seq-{s:04d}"))
    return bundles


def occlusion_metadata_lines(bundle: SequenceBundle) -> list[str]:
    """JSON-lines rows of per-frame occlusion fractions."""
    lines = []
    for f in range(1, bundle.n_frames + 1):
        row = {
            "frame": f,
            "occlusion": {
                str(c.identity): round(float(bundle.occlusion[f - 1, i]), 6)
                for i, c in enumerate(bundle.cards)
                if c.present[f - 1]
            },
        }
        lines.append(json.dumps(row, sort_keys=True))
    return lines


def sample_training_crops(bundles: list[SequenceBundle], n_samples: int,
                          seed: int = 0) -> list[TrainSample]:
    """Draw labeled (embedding, attr_obs, identity, gt) crops from sequences.

    Identity labels are contiguous integers global across bundles.
    """
    if not bundles:
        raise ValueError("no bundles to sample from")
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFF, _STREAM_CROPS]))
    label_of = {}
    for b_idx, bundle in enumerate(bundles):
        for card in bundle.cards:
            label_of[(b_idx, card.identity)] = len(label_of)
    samples: list[TrainSample] = []
    while len(samples) < n_samples:
        b_idx = int(rng.integers(len(bundles)))
        bundle = bundles[b_idx]
        cfg = bundle.config
        frame = int(rng.integers(1, cfg.n_frames + 1))
        i = int(rng.integers(cfg.n_identities))
        card = bundle.cards[i]
        if not card.present[frame - 1]:
            continue
        det = _emit_observation(card, float(bundle.occlusion[frame - 1, i]),
                                frame, cfg, rng)
        if det is None:
            continue
        samples.append(TrainSample(
            embedding=det.embedding,
            attr_obs=det.attr_obs,
            identity=label_of[(b_idx, card.identity)],
            gt_attrs=card.attributes.values.copy(),
        ))
    return samples
