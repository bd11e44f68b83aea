import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from threading import Lock
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from leafgeom import Rectangle
from models import LIBRARY_VERSION
from srb import DistortionConstants, SRBLeafDensity

logger = logging.getLogger(__name__)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_key(descriptor: Dict[str, Any]) -> str:
    """First 16 hex digits of the SHA-256 of the canonical descriptor plus library version."""
    payload = canonical_json({"descriptor": descriptor, "version": LIBRARY_VERSION})
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass
class CachedTable:
    """Everything the Dirichlet form needs from the SRB stage."""
    key: str
    rectangle: Rectangle
    tables: List[SRBLeafDensity]
    distortion: DistortionConstants
    provenance: Dict[str, Any] = field(default_factory=dict)
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    @property
    def weights(self) -> np.ndarray:
        return self.rectangle.quotient_weights

    def to_dict(self) -> Dict[str, Any]:
        return {
            "key": self.key,
            "version": LIBRARY_VERSION,
            "created_at": self.created_at,
            "rectangle": self.rectangle.to_dict(),
            "tables": [t.to_dict() for t in self.tables],
            "distortion": self.distortion.to_dict(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CachedTable":
        return cls(
            key=data["key"],
            rectangle=Rectangle.from_dict(data["rectangle"]),
            tables=[SRBLeafDensity.from_dict(t) for t in data["tables"]],
            distortion=DistortionConstants.from_dict(data["distortion"]),
            provenance=data.get("provenance", {}),
            created_at=data.get("created_at", ""),
        )


class SRBTableCache:
    """Content-addressed store of SRB tables, in memory and optionally on disk."""

    def __init__(self, cache_dir: Optional[str] = None, enabled: bool = True):
        self.cache_dir = cache_dir
        self.enabled = enabled
        self.entries: Dict[str, CachedTable] = {}
        self.lock = Lock()
        self.hits = 0
        self.misses = 0
        self.writes = 0
        if cache_dir and enabled:
            os.makedirs(cache_dir, exist_ok=True)

    def _path(self, key: str) -> Optional[str]:
        return os.path.join(self.cache_dir, f"srb-{key}.json") if self.cache_dir else None

    def get(self, key: str) -> Optional[CachedTable]:
        if not self.enabled:
            return None
        with self.lock:
            entry = self.entries.get(key)
            if entry is None:
                path = self._path(key)
                if path and os.path.exists(path):
                    try:
                        with open(path, "r", encoding="utf-8") as fh:
                            entry = CachedTable.from_dict(json.load(fh))
                        self.entries[key] = entry
                    except (OSError, ValueError, KeyError) as e:
                        logger.warning(f"Ignoring unreadable cache entry {path}: {e}")
                        entry = None
            if entry is None:
                self.misses += 1
            else:
                self.hits += 1
                logger.info(f"SRB table cache hit: {key}")
            return entry

    def put(self, entry: CachedTable):
        if not self.enabled:
            return
        with self.lock:
            self.entries[entry.key] = entry
            path = self._path(entry.key)
            if path:
                tmp = f"{path}.tmp"
                with open(tmp, "w", encoding="utf-8") as fh:
                    json.dump(entry.to_dict(), fh, sort_keys=True)
                os.replace(tmp, path)
                logger.info(f"Wrote SRB table cache entry {path}")
            self.writes += 1

    def get_or_compute(self, descriptor: Dict[str, Any],
                       compute: Callable[[str], CachedTable]) -> CachedTable:
        key = content_key(descriptor)
        entry = self.get(key)
        if entry is None:
            logger.info(f"SRB table cache miss: {key}; computing")
            entry = compute(key)
            self.put(entry)
        return entry

    def get_stats(self) -> Dict[str, int]:
        with self.lock:
            return {
                "entries": len(self.entries),
                "hits": self.hits,
                "misses": self.misses,
                "writes": self.writes,
            }

    def clear(self):
        """Drop the in-memory index; files on disk are kept."""
        with self.lock:
            self.entries.clear()
            logger.info("SRB table cache cleared")
