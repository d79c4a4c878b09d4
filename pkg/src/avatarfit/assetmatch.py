"""Pick catalog assets whose label embeddings best match query embeddings."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CATEGORIES = ("hair", "garment", "hat", "moustache", "glasses", "eyelashes", "iris", "body")


class CatalogError(ValueError):
    pass


@dataclass(frozen=True)
class AssetEntry:
    id: str
    category: str
    label_text: str
    embedding: np.ndarray
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.id:
            raise CatalogError("asset id must be non-empty")
        if self.category not in CATEGORIES:
            raise CatalogError(f"unknown asset category {self.category!r}")
        emb = np.array(self.embedding, dtype=np.float64).reshape(-1)
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)


class AssetCatalog:
    def __init__(self, entries, embedding_dim=None):
        entries = list(entries)
        dims = {len(e.embedding) for e in entries}
        if embedding_dim is None:
            if len(dims) > 1:
                raise CatalogError(f"mixed embedding dimensions {sorted(dims)}")
            embedding_dim = dims.pop() if dims else 0
        if any(d != embedding_dim for d in dims):
            raise CatalogError(f"entries must all have dimension {embedding_dim}")
        ids = [e.id for e in entries]
        if len(set(ids)) != len(ids):
            raise CatalogError("duplicate asset ids")
        self.entries = entries
        self.embedding_dim = embedding_dim

    def __len__(self):
        return len(self.entries)

    def in_category(self, category) -> list:
        return [e for e in self.entries if e.category == category]

    @classmethod
    def load(cls, path) -> "AssetCatalog":
        doc = json.loads(Path(path).read_text())
        try:
            entries = [
                AssetEntry(e["id"], e["category"], e.get("label_text", ""), e["embedding"], dict(e.get("attributes", {})))
                for e in doc["entries"]
            ]
        except (KeyError, TypeError, AttributeError) as exc:
            raise CatalogError(f"{path}: malformed catalog ({exc!r})") from exc
        return cls(entries, doc.get("embedding_dim"))

    def save(self, path) -> None:
        doc = {
            "embedding_dim": self.embedding_dim,
            "entries": [
                {
                    "id": e.id,
                    "category": e.category,
                    "label_text": e.label_text,
                    "attributes": e.attributes,
                    "embedding": e.embedding.tolist(),
                }
                for e in self.entries
            ],
        }
        Path(path).write_text(json.dumps(doc, indent=1))


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def match_asset(query_embedding, catalog: AssetCatalog, category: str, required_attributes=None) -> AssetEntry:
    """Highest-similarity entry of ``category``; ties go to the smallest id.

    ``required_attributes`` optionally restricts candidates to entries whose
    attributes contain every given key/value pair.
    """
    query = np.asarray(query_embedding, dtype=np.float64).reshape(-1)
    if len(query) != catalog.embedding_dim:
        raise CatalogError(f"query has dimension {len(query)}, catalog uses {catalog.embedding_dim}")
    candidates = catalog.in_category(category)
    if required_attributes:
        candidates = [
            e for e in candidates if all(e.attributes.get(k) == v for k, v in required_attributes.items())
        ]
    if not candidates:
        raise CatalogError(f"no catalog entries in category {category!r}")
    best, best_sim = None, -np.inf
    for entry in sorted(candidates, key=lambda e: e.id):
        sim = cosine_similarity(query, entry.embedding)
        if sim > best_sim:
            best, best_sim = entry, sim
    return best


def match_all(attribute_embeddings: dict, catalog: AssetCatalog) -> dict:
    missing = [c for c in attribute_embeddings if not catalog.in_category(c)]
    if missing:
        raise CatalogError(f"catalog has no entries for: {', '.join(missing)}")
    return {cat: match_asset(q, catalog, cat) for cat, q in attribute_embeddings.items()}


def load_queries(path) -> dict:
    doc = json.loads(Path(path).read_text())
    return {cat: np.asarray(v, dtype=np.float64) for cat, v in doc.items()}
