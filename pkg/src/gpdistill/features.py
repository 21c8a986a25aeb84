"""Thumbnail feature extraction for the teacher classifier.

The baseline extractor is a deliberately small hand-crafted descriptor
standing in for a pretrained CNN embedding:

* 8-bin histogram per RGB channel, each channel L1-normalized (24 dims)
* box aspect ratio ``w / (w + h)`` and relative size ``sqrt(w h / ref_area)`` (2 dims)
* 16-bin gradient-orientation histogram weighted by magnitude (16 dims)
"""
from __future__ import annotations

import csv

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ConfigurationError, MalformedInputError, ParameterError

BASELINE_ID = "baseline-v1"
PRECOMPUTED_ID = "precomputed"
COLOR_BINS = 8
ORIENT_BINS = 16
BASELINE_DIM = 3 * COLOR_BINS + 2 + ORIENT_BINS


def color_histogram(pixels, bins=COLOR_BINS):
    px = np.asarray(pixels, dtype=float).reshape(-1, 3)
    idx = np.clip((px * bins / 256.0).astype(int), 0, bins - 1)
    hist = np.zeros((3, bins))
    for ch in range(3):
        hist[ch] = np.bincount(idx[:, ch], minlength=bins)
    return (hist / len(px)).ravel()


def orientation_histogram(pixels, bins=ORIENT_BINS):
    gray = np.asarray(pixels, dtype=float) @ np.array([0.299, 0.587, 0.114])
    if min(gray.shape) < 2:
        return np.zeros(bins)
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy).ravel()
    total = mag.sum()
    if total <= 0:
        return np.zeros(bins)
    angle = np.mod(np.arctan2(gy, gx).ravel(), 2 * np.pi)
    idx = np.minimum((angle * bins / (2 * np.pi)).astype(int), bins - 1)
    return np.bincount(idx, weights=mag, minlength=bins) / total


def shape_descriptor(height, width, ref_area):
    return np.array([width / (width + height), np.sqrt(width * height / ref_area)])


def baseline_features(pixels, ref_area=640 * 480):
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[0] == 0 or pixels.shape[1] == 0:
        raise ParameterError("thumbnail must be a nonempty HxWx3 array")
    h, w = pixels.shape[:2]
    return np.concatenate([color_histogram(pixels), shape_descriptor(h, w, ref_area),
                           orientation_histogram(pixels)])


def histogram_entropy(hist):
    p = np.asarray(hist, dtype=float)
    p = p[p > 0] / p.sum() if p.sum() > 0 else p[:0]
    return float(-(p * np.log(p)).sum())


def extract_features(thumb, extractor_id=BASELINE_ID, ref_area=640 * 480, table=None):
    """Feature vector for one thumbnail.

    With ``extractor_id="precomputed"`` the vector is looked up in ``table``
    (``{(scene_id, cluster_id): vector}``, see :func:`read_feature_csv`).
    """
    if extractor_id == BASELINE_ID:
        return baseline_features(thumb.pixels, ref_area)
    if extractor_id == PRECOMPUTED_ID:
        if table is None:
            raise ConfigurationError("precomputed extractor needs a feature table")
        key = (thumb.scene_id, thumb.origin_bbox.source_cluster)
        try:
            return np.asarray(table[key], dtype=float)
        except KeyError:
            raise ConfigurationError(f"no precomputed features for {key}") from None
    raise ConfigurationError(f"unknown extractor {extractor_id!r}")


class ThumbnailFeatures(BaseEstimator, TransformerMixin):
    """Stateless transformer from thumbnails to an (n, D) feature matrix."""

    def __init__(self, extractor_id=BASELINE_ID, ref_area=640 * 480):
        self.extractor_id = extractor_id
        self.ref_area = ref_area

    def fit(self, X=None, y=None):
        if self.extractor_id not in (BASELINE_ID, PRECOMPUTED_ID):
            raise ConfigurationError(f"unknown extractor {self.extractor_id!r}")
        return self

    def transform(self, X, table=None):
        rows = [extract_features(t, self.extractor_id, self.ref_area, table) for t in X]
        return np.vstack(rows) if rows else np.empty((0, BASELINE_DIM))


def write_feature_csv(path, rows):
    """``rows``: iterable of ``(scene_id, cluster_id, label_or_-1, vector)``."""
    rows = list(rows)
    dim = len(rows[0][3]) if rows else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene_id", "cluster_id", "label"] + [f"f{i}" for i in range(dim)])
        for scene_id, cluster_id, label, vec in rows:
            w.writerow([scene_id, int(cluster_id), int(label)] + [repr(float(v)) for v in vec])


def read_feature_csv(path):
    """Returns ``(keys, labels, X)`` with keys ``(scene_id, cluster_id)``."""
    keys, labels, vecs = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["scene_id", "cluster_id", "label"]:
            raise MalformedInputError("bad feature CSV header", 1, path)
        for lineno, row in enumerate(reader, start=2):
            try:
                keys.append((row[0], int(row[1])))
                labels.append(int(row[2]))
                vecs.append([float(v) for v in row[3:]])
            except (ValueError, IndexError):
                raise MalformedInputError("bad feature row", lineno, path) from None
    X = np.array(vecs, dtype=float).reshape(len(vecs), -1)
    return keys, np.array(labels, dtype=int), X
