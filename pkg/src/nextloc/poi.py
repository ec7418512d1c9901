"""POI category catalog, per-location profiles and description-based POI embeddings.

Each category description is tokenized and looked up in the shared token
table. A location's embedding is the frequency-weighted sum of its
categories' token embeddings, mean-pooled over tokens and passed through a
perceptron; history and current trajectories then get separate heads.
"""

from __future__ import annotations

import csv
import re
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, take_rows
from .ingest import FORMAT_HEADER, DataFormatError, read_rows, write_rows
from .layers import mlp

VOCAB_SIZE = 4096
PAD_TOKEN = 0
DEFAULT_DESC_LENGTH = 32

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class PoiCategory:
    id: int
    name: str
    description: str

    def __post_init__(self):
        if not self.description.strip():
            raise ValueError(f"category {self.name!r} has an empty description")


# Clustered categories used for the Xi'an and Chengdu data.
CITY_CATEGORIES = (
    PoiCategory(0, "Entertainment", "Entertainment: This category combines scenic spots with sports and recreation services for leisure activities."),
    PoiCategory(1, "Commercial", "Commercial: It includes businesses, financial services, automotive, shopping, and dining services."),
    PoiCategory(2, "Education", "Education: This category covers institutions which involved in science, education, and cultural services."),
    PoiCategory(3, "Public Service", "Public Service: including government, daily services, healthcare, transport, and public infrastructure."),
    PoiCategory(4, "Residential", "Residential: This category comprises accommodation services and mixed-use commercial and residential areas."),
)

SINGAPORE_CATEGORIES = (
    PoiCategory(0, "Leisure and Entertainment", "Leisure and Entertainment: This category encompasses venues for arts, entertainment, events, and nightlife activities, serving as hubs for cultural, social, and recreational engagements."),
    PoiCategory(1, "Shopping and Services", "Shopping and Services: It includes retail outlets and professional service providers, catering to the diverse purchasing and service needs of consumers."),
    PoiCategory(2, "Dining and Health", "Education: This category covers eating establishments with health and medical services, offering places for dining along with health care facilities."),
    PoiCategory(3, "Travel and Accommodation", "Travel and Accommodation: including all travel-related infrastructure and lodging options, including transportation hubs, universities, and residential areas, facilitating mobility and accommodation."),
    PoiCategory(4, "Outdoor and Recreational Activities", "Outdoor and Recreational Activities: This category comprises outdoor spaces and landmarks, providing areas for recreation and appreciation of natural and cultural heritage."),
)


def tokenize(text: str, vocab_size: int = VOCAB_SIZE) -> list:
    """Lowercase, split on anything that is not a letter or digit, hash into ``1..vocab_size``."""
    return [1 + zlib.crc32(tok.encode("utf-8")) % vocab_size for tok in _TOKEN_RE.findall(text.lower())]


def encode_descriptions(categories: Sequence[PoiCategory], length: int = DEFAULT_DESC_LENGTH, vocab_size: int = VOCAB_SIZE) -> np.ndarray:
    """(r, length) token ids, truncated or right-padded with the pad token."""
    ids = [c.id for c in categories]
    if sorted(ids) != list(range(len(ids))):
        raise ValueError("category ids must be dense and unique, 0..r-1")
    out = np.full((len(categories), length), PAD_TOKEN, dtype=np.int64)
    for cat in categories:
        toks = tokenize(cat.description, vocab_size)[:length]
        out[cat.id, : len(toks)] = toks
    return out


def category_semantic_embeddings(token_table, desc_tokens: np.ndarray) -> np.ndarray:
    """Row gather of each category's tokens: shape (r, l, d_model)."""
    return np.asarray(token_table)[desc_tokens]


def location_poi_init(freq, semantic: np.ndarray) -> np.ndarray:
    """Frequency-weighted sum of category embeddings, shape (l, d_model)."""
    freq = np.asarray(freq, dtype=float)
    if freq.shape != (semantic.shape[0],):
        raise ValueError(f"profile length {freq.shape} does not match {semantic.shape[0]} categories")
    return np.einsum("j,jld->ld", freq, semantic)


def pooled_poi_init(P: dict, freq: Tensor, desc_tokens: np.ndarray) -> Tensor:
    """Mean-pooled weighted category embedding for a batch of profiles, shape (u, d_model).

    Pooling commutes with the weighted sum, so the (l, d) tensor is never
    materialised per location.
    """
    pooled = take_rows(P["token_table"], desc_tokens).mean(axis=1)
    return freq @ pooled


def location_poi_embeddings(P: dict, freq: Tensor, desc_tokens: np.ndarray) -> Tensor:
    return mlp(P, "poi.pool_mlp", pooled_poi_init(P, freq, desc_tokens))


def location_poi_embedding(profile, P: dict, desc_tokens: np.ndarray) -> np.ndarray:
    """d_model embedding of one location's POI profile."""
    freq = np.asarray(profile, dtype=P["token_table"].data.dtype)
    if freq.shape != (desc_tokens.shape[0],):
        raise ValueError(f"profile length {freq.shape} does not match {desc_tokens.shape[0]} categories")
    return location_poi_embeddings(P, Tensor(freq[None, :]), desc_tokens).data[0]


def branch_heads(P: dict, hist_loc_emb: Tensor, cur_loc_emb: Tensor):
    return mlp(P, "poi.head_history", hist_loc_emb), mlp(P, "poi.head_current", cur_loc_emb)


def trajectory_poi_embeddings(pair, profiles: dict, P: dict, desc_tokens: np.ndarray):
    """(M, d_model) and (N, d_model) POI embeddings for one trajectory pair."""
    rows = []
    for rec in (*pair.history, *pair.current):
        if rec.location_id not in profiles:
            raise KeyError(f"no POI profile for location_id {rec.location_id}")
        rows.append(profiles[rec.location_id])
    dtype = P["token_table"].data.dtype
    emb = location_poi_embeddings(P, Tensor(np.asarray(rows, dtype=dtype)), desc_tokens)
    m = len(pair.history)
    hist, cur = branch_heads(P, emb[:m], emb[m:])
    return hist.data, cur.data


def normalize_profiles(freq: np.ndarray) -> np.ndarray:
    totals = freq.sum(axis=1, keepdims=True)
    return np.divide(freq, totals, out=np.zeros_like(freq, dtype=float), where=totals > 0)


# -- files ------------------------------------------------------------------


def read_catalog(path) -> list:
    rows, _ = read_rows(path, ["category_id", "name", "description"])
    try:
        cats = [PoiCategory(int(r["category_id"]), r["name"], r["description"]) for r in rows]
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    return sorted(cats, key=lambda c: c.id)


def write_catalog(path, categories: Sequence[PoiCategory]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(FORMAT_HEADER + "\n")
        writer = csv.writer(fh, lineterminator="\n", quoting=csv.QUOTE_NONNUMERIC)
        writer.writerow(["category_id", "name", "description"])
        for c in categories:
            writer.writerow([c.id, c.name, c.description])


def read_profiles(path, location_ids: Sequence[int], n_categories: int) -> dict:
    rows, _ = read_rows(path, ["location_id", "category_id", "count"])
    profiles = {lid: np.zeros(n_categories) for lid in location_ids}
    for r in rows:
        lid, cid, count = int(r["location_id"]), int(r["category_id"]), float(r["count"])
        if lid not in profiles:
            raise DataFormatError(f"{path}: profile for unknown location_id {lid}")
        if not 0 <= cid < n_categories or not np.isfinite(count) or count < 0:
            raise DataFormatError(f"{path}: bad profile row {r}")
        profiles[lid][cid] += count
    return profiles


def write_profiles(path, profiles: dict) -> None:
    rows = (
        [lid, cid, repr(float(cnt))]
        for lid in sorted(profiles)
        for cid, cnt in enumerate(profiles[lid])
        if cnt > 0
    )
    write_rows(path, ["location_id", "category_id", "count"], rows)
