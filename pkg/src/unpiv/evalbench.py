"""Accuracy metrics, dataset loading, benchmark running and flow rendering."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError, UnpivError
from .fields import FlowField, GrayImage, normalize
from .fileio import read_flo, read_image

logger = logging.getLogger("unpiv")

STRICT_ENV_VAR = "UNPIV_STRICT"

_IMAGE_EXTENSIONS = (".png", ".pgm")


def strict_mode_enabled() -> bool:
    return os.environ.get(STRICT_ENV_VAR, "") == "1"


def aee(estimate: FlowField, truth: FlowField) -> float:
    """Average endpoint error: mean over pixels of |estimate - truth|."""
    if estimate.shape != truth.shape:
        raise DimensionMismatchError(f"estimate {estimate.shape} vs truth {truth.shape}")
    return float(np.mean(np.hypot(estimate.u - truth.u, estimate.v - truth.v)))


def aee_per100px(estimate: FlowField, truth: FlowField) -> float:
    """AEE scaled to the per-100-pixels convention (100x the pixel value)."""
    return 100.0 * aee(estimate, truth)


@dataclass(frozen=True, eq=False)
class DatasetEntry:
    pair_id: str
    image1: GrayImage  # normalized to [0, 1]
    image2: GrayImage
    truth: FlowField | None
    flow_kind: str


def _find_partner(img1_path: Path, prefix: str) -> Path | None:
    for ext in _IMAGE_EXTENSIONS:
        candidate = img1_path.with_name(f"{prefix}_img2{ext}")
        if candidate.exists():
            return candidate
    return None


def _load_entry(pair_id, img1_path, img2_path, flow_path, flow_kind="unknown"):
    i1 = normalize(read_image(img1_path))
    i2 = normalize(read_image(img2_path))
    truth = read_flo(flow_path) if flow_path is not None and flow_path.exists() else None
    if i1.shape != i2.shape or (truth is not None and truth.shape != i1.shape):
        raise DimensionMismatchError(f"{pair_id}: mixed grid sizes within the pair")
    return DatasetEntry(pair_id, i1, i2, truth, flow_kind)


def load_dataset_dir(root):
    """Yield DatasetEntry items from a directory, in lexicographic pair order.

    Two layouts are recognized: files named <id>_img1.png/_img2.png with an
    optional <id>_flow.flo next to them, and subdirectories holding a
    generated pair (pair_a.png, pair_b.png, truth.flo, metadata.json).
    Entries that fail to load are skipped with a logged warning.
    """
    root = Path(root)
    found = []
    for img1_path in root.iterdir() if root.is_dir() else ():
        if not img1_path.is_file():
            continue
        name = img1_path.name
        if img1_path.suffix.lower() not in _IMAGE_EXTENSIONS:
            continue
        stem = name[: -len(img1_path.suffix)]
        if not stem.endswith("_img1"):
            continue
        prefix = stem[: -len("_img1")]
        img2_path = _find_partner(img1_path, prefix)
        flow_path = img1_path.with_name(f"{prefix}_flow.flo")
        found.append(("file", prefix, img1_path, img2_path, flow_path))
    for sub in root.iterdir() if root.is_dir() else ():
        if not sub.is_dir():
            continue
        img1_path = None
        img2_path = None
        for ext in _IMAGE_EXTENSIONS:
            if (sub / f"pair_a{ext}").exists() and (sub / f"pair_b{ext}").exists():
                img1_path = sub / f"pair_a{ext}"
                img2_path = sub / f"pair_b{ext}"
                break
        if img1_path is None:
            continue
        found.append(("dir", sub.name, img1_path, img2_path, sub / "truth.flo"))

    for layout, pair_id, img1_path, img2_path, flow_path in sorted(found, key=lambda f: f[1]):
        if img2_path is None:
            logger.warning("dataset: %s has no matching second image, skipping", pair_id)
            continue
        flow_kind = "unknown"
        if layout == "dir":
            meta_path = img1_path.parent / "metadata.json"
            if meta_path.exists():
                try:
                    flow_kind = json.loads(meta_path.read_text()).get("flow_kind", "unknown")
                except (OSError, ValueError):
                    pass
        try:
            yield _load_entry(pair_id, img1_path, img2_path, flow_path, flow_kind)
        except UnpivError as exc:
            logger.warning("dataset: skipping %s (%s)", pair_id, exc)


@dataclass(frozen=True)
class BenchmarkMethod:
    """A named estimator: fn(i1, i2) -> FlowField on normalized images.

    loss_config tags the objective variant for ablations ("-" when the
    method has no such notion)."""

    name: str
    loss_config: str
    fn: object


@dataclass(frozen=True)
class BenchRecord:
    pair_id: str
    flow_kind: str
    method: str
    loss_config: str
    aee_px: float | None
    aee_per100px: float | None
    seconds: float
    status: str


@dataclass(frozen=True, eq=False)
class EvalReport:
    """Benchmark results plus per-(method, loss_config, flow_kind) mean AEE."""

    records: tuple
    config: dict

    def aggregates(self) -> list:
        groups = {}
        for rec in self.records:
            if rec.status != "ok" or rec.aee_px is None:
                continue
            key = (rec.method, rec.loss_config, rec.flow_kind)
            groups.setdefault(key, []).append(rec)
        out = []
        for (method, loss_config, flow_kind), recs in sorted(groups.items()):
            mean_px = sum(r.aee_px for r in recs) / len(recs)
            mean_100 = sum(r.aee_per100px for r in recs) / len(recs)
            out.append(
                {
                    "method": method,
                    "loss_config": loss_config,
                    "flow_kind": flow_kind,
                    "mean_aee_px": mean_px,
                    "mean_aee_per100px": mean_100,
                    "pairs": len(recs),
                }
            )
        return out

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "records": [
                {
                    "pair_id": r.pair_id,
                    "flow_kind": r.flow_kind,
                    "method": r.method,
                    "loss_config": r.loss_config,
                    "aee_px": r.aee_px,
                    "aee_per100px": r.aee_per100px,
                    "seconds": r.seconds,
                    "status": r.status,
                }
                for r in self.records
            ],
            "aggregates": self.aggregates(),
        }

    def to_csv_text(self) -> str:
        lines = ["pair_id,flow_kind,method,loss_config,aee_px,aee_per100px,seconds,status"]
        for r in self.records:
            aee_px = "" if r.aee_px is None else repr(r.aee_px)
            aee_100 = "" if r.aee_per100px is None else repr(r.aee_per100px)
            lines.append(
                f"{r.pair_id},{r.flow_kind},{r.method},{r.loss_config},"
                f"{aee_px},{aee_100},{r.seconds!r},{r.status}"
            )
        return "\n".join(lines) + "\n"


def run_benchmark(entries, methods, strict: bool | None = None) -> EvalReport:
    """Run every method over every entry; failures become 'failed' rows.

    In strict mode wall times are reported as 0.0 so repeated runs produce
    byte-identical reports.
    """
    if strict is None:
        strict = strict_mode_enabled()
    entries = list(entries)
    records = []
    for entry in entries:
        for method in methods:
            start = time.perf_counter()
            try:
                estimate = method.fn(entry.image1, entry.image2)
                elapsed = time.perf_counter() - start
                err_px = aee(estimate, entry.truth) if entry.truth is not None else None
                err_100 = None if err_px is None else 100.0 * err_px
                status = "ok"
            except Exception as exc:  # noqa: BLE001 - a bad pair must not kill the run
                elapsed = time.perf_counter() - start
                err_px = None
                err_100 = None
                status = "failed"
                logger.warning(
                    "benchmark: %s on %s failed (%s)", method.name, entry.pair_id, exc
                )
            records.append(
                BenchRecord(
                    pair_id=entry.pair_id,
                    flow_kind=entry.flow_kind,
                    method=method.name,
                    loss_config=method.loss_config,
                    aee_px=err_px,
                    aee_per100px=err_100,
                    seconds=0.0 if strict else elapsed,
                    status=status,
                )
            )
    config = {
        "methods": [{"name": m.name, "loss_config": m.loss_config} for m in methods],
        "pairs": len(entries),
        "strict": bool(strict),
    }
    return EvalReport(tuple(records), config)


def _hsv_to_rgb(h_deg, s, v):
    """Vectorized HSV -> RGB, hue in degrees."""
    h6 = (h_deg % 360.0) / 60.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def flow_to_hsv(flow: FlowField, max_magnitude="auto"):
    """Direction -> hue (degrees), magnitude -> saturation, value = 1."""
    mag = flow.magnitude()
    if max_magnitude == "auto":
        max_magnitude = float(np.percentile(mag, 99.0))
    max_magnitude = float(max_magnitude)
    hue = np.degrees(np.arctan2(flow.v, flow.u)) % 360.0
    if max_magnitude > 0.0:
        sat = np.clip(mag / max_magnitude, 0.0, 1.0)
    else:
        sat = np.zeros_like(mag)
    return hue, sat, np.ones_like(mag)


def flow_to_color(flow: FlowField, max_magnitude="auto") -> np.ndarray:
    """Render a flow as (h, w, 3) uint8; zero flow is white."""
    hue, sat, val = flow_to_hsv(flow, max_magnitude)
    rgb = _hsv_to_rgb(hue, sat, val)
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def error_to_color(estimate: FlowField, truth: FlowField, max_magnitude="auto") -> np.ndarray:
    """Render the per-pixel endpoint error vector field; zero error is white."""
    if estimate.shape != truth.shape:
        raise DimensionMismatchError(f"estimate {estimate.shape} vs truth {truth.shape}")
    diff = FlowField(estimate.u - truth.u, estimate.v - truth.v)
    return flow_to_color(diff, max_magnitude)
