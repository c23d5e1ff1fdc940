"""MOTChallenge-format file reading/writing plus the attribute sidecar.

File formats
------------
Detection / ground-truth / result files are CSV lines::

    frame,id,left,top,width,height,conf,x,y,z

with ``x,y,z`` as ``-1`` placeholders.  For ground-truth files the ``conf``
column is the MOTChallenge active flag (0 means the entry is an ignore
region).  Nine-column ground-truth files in the MOT17 convention
(``...,conf,class,visibility``) are also accepted; otherwise visibility
defaults to 1.0.

The attribute sidecar holds one line per identity, ``id,b0,...,b31``, after
a one-line header ``# attmot-attrs v1``.

The feature sidecar aligns with the detection file line-for-line:
``frame,<embedding floats>,<32 attribute floats>`` after a header
``# attmot-feats v1 dim=<d>``.
"""
from __future__ import annotations

import io
import os
from typing import IO, Iterable

import numpy as np

from .core import (
    N_ATTRIBUTES,
    AttributeVector,
    BBox,
    Detection,
    GtEntry,
    validate_prob_attributes,
)

ATTR_HEADER = "# attmot-attrs v1"
FEAT_HEADER_PREFIX = "# attmot-feats v1 dim="


class MotFormatError(ValueError):
    """Malformed MOT or sidecar file; message carries the line number."""


def _open_lines(source) -> Iterable[str]:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="ascii") as fh:
            yield from fh
    elif isinstance(source, bytes):
        yield from io.StringIO(source.decode("ascii"))
    else:  # file-like
        for line in source:
            if isinstance(line, bytes):
                line = line.decode("ascii")
            yield line


def _fmt_coord(v: float) -> str:
    """Render a coordinate with up to 2 fractional digits, no trailing zeros."""
    s = f"{v:.2f}".rstrip("0").rstrip(".")
    return s if s not in ("-0", "") else "0"


def parse_mot_file(source, kind: str):
    """Parse a MOT-format file.

    ``kind`` is ``"det"`` (rows become Detections without features) or
    ``"gt"`` (rows become GtEntries; also used for result files).  Entries
    are returned sorted by frame then id/appearance order.  Any malformed
    line raises MotFormatError naming the line.
    """
    if kind not in ("det", "gt"):
        raise ValueError(f"unknown kind {kind!r}")
    out = []
    for lineno, raw in enumerate(_open_lines(source), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(",")
        if len(fields) < 7 or len(fields) > 10:
            raise MotFormatError(
                f"expected 7-10 fields at line {lineno}, got {len(fields)}"
            )
        try:
            frame = int(fields[0])
            ident = int(fields[1])
            left, top, width, height = (float(x) for x in fields[2:6])
            conf = float(fields[6])
        except ValueError as exc:
            raise MotFormatError(f"bad numeric field at line {lineno}: {exc}") from None
        if width <= 0 or height <= 0:
            raise MotFormatError(f"non-positive box at line {lineno}")
        if frame < 1:
            raise MotFormatError(f"frame index < 1 at line {lineno}")
        box = BBox(left, top, width, height)
        if kind == "det":
            out.append(Detection(frame=frame, box=box, confidence=min(max(conf, 0.0), 1.0)))
        else:
            if ident < 1:
                raise MotFormatError(f"non-positive identity at line {lineno}")
            # 9-field rows follow the MOT17 gt convention and carry visibility.
            vis = 1.0
            if len(fields) == 9:
                try:
                    vis = float(fields[8])
                except ValueError:
                    raise MotFormatError(f"bad visibility at line {lineno}") from None
                vis = min(max(vis, 0.0), 1.0)
            out.append(
                GtEntry(frame=frame, identity=ident, box=box, visibility=vis, active=conf != 0.0)
            )
    if kind == "det":
        out.sort(key=lambda d: d.frame)
    else:
        out.sort(key=lambda g: (g.frame, g.identity))
    return out


def parse_attr_file(source) -> dict[int, AttributeVector]:
    """Parse the attribute sidecar into identity -> binary AttributeVector."""
    result: dict[int, AttributeVector] = {}
    for lineno, raw in enumerate(_open_lines(source), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            continue
        fields = line.split(",")
        if len(fields) != 1 + N_ATTRIBUTES:
            raise MotFormatError(
                f"expected {1 + N_ATTRIBUTES} fields at line {lineno}, got {len(fields)}"
            )
        try:
            ident = int(fields[0])
            bits = [float(x) for x in fields[1:]]
        except ValueError as exc:
            raise MotFormatError(f"bad numeric field at line {lineno}: {exc}") from None
        if ident in result:
            raise MotFormatError(f"duplicate identity {ident} at line {lineno}")
        try:
            vec = AttributeVector.binary(bits)
        except ValueError as exc:
            raise MotFormatError(f"invalid attribute vector at line {lineno}: {exc}") from None
        result[ident] = vec
    return result


def write_mot_file(entries: Iterable[GtEntry], stream: IO[str] | None = None) -> str:
    """Serialize result/gt rows to the 10-field MOT format.

    Rows are written in (frame, id) order; returns the text written.
    """
    rows = sorted(entries, key=lambda g: (g.frame, g.identity))
    buf = io.StringIO()
    for g in rows:
        conf = "1" if g.active else "0"
        buf.write(
            f"{g.frame},{g.identity},{_fmt_coord(g.box.left)},{_fmt_coord(g.box.top)},"
            f"{_fmt_coord(g.box.width)},{_fmt_coord(g.box.height)},{conf},-1,-1,-1\n"
        )
    text = buf.getvalue()
    if stream is not None:
        stream.write(text)
    return text


def write_det_file(detections: Iterable[Detection], stream: IO[str] | None = None) -> str:
    """Serialize detections (id column is -1) to the 10-field MOT format."""
    rows = sorted(detections, key=lambda d: d.frame)
    buf = io.StringIO()
    for d in rows:
        buf.write(
            f"{d.frame},-1,{_fmt_coord(d.box.left)},{_fmt_coord(d.box.top)},"
            f"{_fmt_coord(d.box.width)},{_fmt_coord(d.box.height)},{d.confidence:.2f},-1,-1,-1\n"
        )
    text = buf.getvalue()
    if stream is not None:
        stream.write(text)
    return text


def write_attr_file(attrs: dict[int, AttributeVector], stream: IO[str] | None = None) -> str:
    """Serialize the identity -> attributes map as the sidecar format."""
    buf = io.StringIO()
    buf.write(ATTR_HEADER + "\n")
    for ident in sorted(attrs):
        bits = ",".join(str(int(b)) for b in attrs[ident].values)
        buf.write(f"{ident},{bits}\n")
    text = buf.getvalue()
    if stream is not None:
        stream.write(text)
    return text


def write_feature_file(
    detections: Iterable[Detection], stream: IO[str] | None = None
) -> str:
    """Serialize per-detection features, aligned with the det file order."""
    rows = sorted(detections, key=lambda d: d.frame)
    buf = io.StringIO()
    dim = None
    for d in rows:
        if d.embedding is None or d.attr_obs is None:
            raise ValueError("detection without features cannot be written to a feature file")
        if dim is None:
            dim = len(d.embedding)
            buf.write(f"{FEAT_HEADER_PREFIX}{dim}\n")
        elif len(d.embedding) != dim:
            raise ValueError("inconsistent embedding dimension in feature file")
        vals = np.concatenate([d.embedding, d.attr_obs])
        buf.write(str(d.frame) + "," + ",".join(f"{v:.10g}" for v in vals) + "\n")
    if dim is None:
        buf.write(f"{FEAT_HEADER_PREFIX}0\n")
    text = buf.getvalue()
    if stream is not None:
        stream.write(text)
    return text


def parse_feature_file(source, detections: list[Detection]) -> list[Detection]:
    """Join a feature sidecar onto detections parsed from the det file.

    The sidecar must have exactly one row per detection, in the same order.
    Returns new Detection values carrying embedding and attr_obs.
    """
    lines = [ln.strip() for ln in _open_lines(source)]
    lines = [ln for ln in lines if ln]
    if not lines or not lines[0].startswith(FEAT_HEADER_PREFIX):
        raise MotFormatError("feature file missing header")
    dim = int(lines[0][len(FEAT_HEADER_PREFIX):])
    body = lines[1:]
    if len(body) != len(detections):
        raise MotFormatError(
            f"feature file has {len(body)} rows for {len(detections)} detections"
        )
    out = []
    for lineno, (line, det) in enumerate(zip(body, detections), start=2):
        fields = line.split(",")
        if len(fields) != 1 + dim + N_ATTRIBUTES:
            raise MotFormatError(
                f"expected {1 + dim + N_ATTRIBUTES} fields at line {lineno}, got {len(fields)}"
            )
        frame = int(fields[0])
        if frame != det.frame:
            raise MotFormatError(
                f"feature row frame {frame} does not match detection frame {det.frame}"
                f" at line {lineno}"
            )
        vals = np.array([float(x) for x in fields[1:]], dtype=np.float64)
        emb = vals[:dim]
        attr = validate_prob_attributes(np.clip(vals[dim:], 0.0, 1.0))
        out.append(
            Detection(
                frame=det.frame,
                box=det.box,
                confidence=det.confidence,
                embedding=emb,
                attr_obs=attr,
            )
        )
    return out


def group_by_frame(entries):
    """Group parsed entries into an ordered {frame: [entries]} dict."""
    frames: dict[int, list] = {}
    for e in entries:
        frames.setdefault(e.frame, []).append(e)
    return dict(sorted(frames.items()))
