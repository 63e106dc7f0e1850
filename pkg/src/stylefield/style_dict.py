"""Reference clustering and the semantic-key -> style-statistics dictionary."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .core_math import channel_stats, kmeans
from .encoder import EncoderSpec, encode_semantic, encode_style
from .tensor_io import ContainerError, decode_container, encode_container, read_container

MIN_CLUSTER_LOCATIONS = 4


@dataclass
class StyleEntry:
    key: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    reference: int
    cluster: int
    count: int


@dataclass
class StyleDictionary:
    entries: list
    build_seconds: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if not self.entries:
            raise ValueError("style dictionary needs at least one entry")

    def __len__(self):
        return len(self.entries)

    @property
    def keys(self):
        return np.stack([e.key for e in self.entries])

    @property
    def means(self):
        return np.stack([e.mu for e in self.entries])

    @property
    def stds(self):
        return np.stack([e.sigma for e in self.entries])

    def permuted(self, order):
        return StyleDictionary([self.entries[i] for i in order], self.build_seconds)

    def to_section(self):
        meta = {
            "count": len(self.entries),
            "provenance": [[e.reference, e.cluster, e.count] for e in self.entries],
        }
        return meta, [self.keys, self.means, self.stds]

    @classmethod
    def from_section(cls, meta, tensors):
        if len(tensors) != 3:
            raise ContainerError("SDIC section must hold keys, means and stds")
        keys, means, stds = tensors
        prov = meta["provenance"]
        if not (len(prov) == keys.shape[0] == means.shape[0] == stds.shape[0] == meta["count"]):
            raise ContainerError("SDIC entry count mismatch")
        return cls([StyleEntry(keys[i], means[i], stds[i], *map(int, prov[i])) for i in range(len(prov))])

    def debug_json(self):
        return json.dumps(
            {
                "count": len(self.entries),
                "entries": [
                    {
                        "reference": e.reference,
                        "cluster": e.cluster,
                        "count": e.count,
                        "key": e.key.tolist(),
                        "mu": e.mu.tolist(),
                        "sigma": e.sigma.tolist(),
                    }
                    for e in self.entries
                ],
            },
            indent=1,
        )


def save_dictionary(path, d: StyleDictionary):
    from .tensor_io import atomic_write_bytes

    atomic_write_bytes(path, encode_container({"SDIC": d.to_section()}))


def load_dictionary(path) -> StyleDictionary:
    sections = read_container(path)
    if "SDIC" not in sections:
        raise ContainerError(f"{path}: no SDIC section")
    return StyleDictionary.from_section(*sections["SDIC"])


def _nearest_index(n_target, target_stride, n_source, source_stride):
    # pixel position of each target location mapped to the closest source location
    pos = np.arange(n_target) * target_stride / source_stride
    return np.clip(np.floor(pos + 0.5).astype(np.int64), 0, n_source - 1)


def aligned_features(image, style_spec: EncoderSpec, semantic_spec: EncoderSpec, labels=None):
    """Style features and nearest-location semantic features on the style grid, both ``[n, C]``."""
    fs = encode_style(style_spec, image)
    fd = encode_semantic(semantic_spec, image, labels)
    ri = _nearest_index(fs.H, fs.stride, fd.H, fd.stride)
    ci = _nearest_index(fs.W, fs.stride, fd.W, fd.stride)
    sem = fd.data[ri][:, ci]
    return fs.flat(), sem.reshape(-1, fd.C)


def _merge_small(points, assign, k):
    counts = np.bincount(assign, minlength=k)
    alive = [j for j in range(k) if counts[j] > 0]
    while len(alive) > 1:
        small = [j for j in alive if counts[j] < MIN_CLUSTER_LOCATIONS]
        if not small:
            break
        j = min(small, key=lambda c: (counts[c], c))
        cj = points[assign == j].mean(0)
        others = [o for o in alive if o != j]
        cents = np.stack([points[assign == o].mean(0) for o in others])
        tgt = others[int(np.argmin(((cents - cj) ** 2).sum(1)))]
        assign = np.where(assign == j, tgt, assign)
        counts[tgt] += counts[j]
        counts[j] = 0
        alive.remove(j)
    return assign, alive


def cluster_reference(image, M, style_spec: EncoderSpec, semantic_spec: EncoderSpec, seed=0,
                      labels=None, reference_index=0):
    """Cluster one reference by semantics; each cluster yields (centroid, style mean, style std)."""
    if M < 1:
        raise ValueError("M must be >= 1")
    image = np.asarray(image, dtype=np.float32)
    if image.size == 0:
        raise ValueError("empty reference image")
    style, sem = aligned_features(image, style_spec, semantic_spec, labels)
    if M > sem.shape[0]:
        raise ValueError(f"M={M} exceeds the {sem.shape[0]} feature locations of the reference")
    _, assign = kmeans(sem, M, seed=seed)
    assign, alive = _merge_small(sem.astype(np.float64), assign, M)
    entries = []
    for j in alive:
        sel = assign == j
        key = sem[sel].astype(np.float64).mean(0).astype(np.float32)
        mu, sigma = channel_stats(style[sel])
        entries.append(StyleEntry(key, mu, sigma, reference_index, j, int(sel.sum())))
    return entries


def build_dictionary(references, M, style_spec: EncoderSpec, semantic_spec: EncoderSpec, seed=0,
                     label_maps=None) -> StyleDictionary:
    """Concatenate per-reference clusters in reference order; records build time."""
    if len(references) == 0:
        raise ValueError("need at least one reference image")
    t0 = time.perf_counter()
    entries = []
    for i, img in enumerate(references):
        labels = None if label_maps is None else label_maps[i]
        entries.extend(cluster_reference(img, M, style_spec, semantic_spec, seed, labels, i))
    return StyleDictionary(entries, time.perf_counter() - t0)


def dictionary_bytes(d: StyleDictionary) -> bytes:
    return encode_container({"SDIC": d.to_section()})


def dictionary_from_bytes(buf) -> StyleDictionary:
    return StyleDictionary.from_section(*decode_container(buf)["SDIC"])
