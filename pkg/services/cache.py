"""
Cache service for solved potential fields
"""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from services.config import hash_payload
from services.geometry import MaskedGrid
from services.quasipotential import PotentialField, boundary_minimum, solve_from_point, solve_to_boundary
from utils.versioning import LIBRARY_VERSION, is_newer_version

logger = logging.getLogger(__name__)


def field_key(problem, grid: MaskedGrid, source: str, gamma: float, stencil_order: int) -> str:
    """Content hash identifying a solved field; doubles as its provenance id."""
    return hash_payload({
        "domain": problem.domain.describe(),
        "coefficients": problem.coefficients.to_dict(),
        "h": grid.h,
        "origin": [float(v) for v in grid.origin],
        "shape": list(grid.shape),
        "source": source,
        "gamma": float(gamma),
        "stencil_order": int(stencil_order),
    })


class FieldCache:
    """Stores V, U and u_γ fields as .npz files next to a JSON index."""

    def __init__(self, directory: Union[str, Path] = ".metastab_cache"):
        self.directory = Path(directory)
        self.index_file = self.directory / "index.json"
        self.index: Dict[str, Dict[str, Any]] = {}
        self.hits = 0
        self.misses = 0

        logger.info(f"Initializing field cache in {self.directory}")
        self.load_index()

    def load_index(self) -> bool:
        """
        Load the cache index.

        Returns:
            True if an index was loaded, False otherwise
        """
        try:
            if self.index_file.exists():
                with open(self.index_file, 'r', encoding='utf-8') as f:
                    self.index = json.load(f)
                logger.info(f"Field cache index loaded: {len(self.index)} entries")
                return True
            logger.info("No field cache index found")
        except Exception as e:
            logger.error(f"Error loading field cache index: {e}")
        self.index = {}
        return False

    def save_index(self) -> bool:
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
            with open(self.index_file, 'w', encoding='utf-8') as f:
                json.dump(self.index, f, indent=2, ensure_ascii=False)
            return True
        except Exception as e:
            logger.error(f"Error saving field cache index: {e}")
            return False

    def _is_stale(self, entry: Dict[str, Any]) -> bool:
        """Entries written by an older library version are recomputed."""
        return is_newer_version(entry.get("version", ""), LIBRARY_VERSION)

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.npz"

    def get(self, key: str, grid: MaskedGrid) -> Optional[PotentialField]:
        entry = self.index.get(key)
        if entry is None:
            return None
        if self._is_stale(entry):
            logger.warning(f"Cached field {key[:12]} was written by version {entry.get('version')}; recomputing")
            return None
        path = self._path(key)
        if not path.exists():
            logger.warning(f"Cached field {key[:12]} is indexed but {path.name} is missing")
            return None
        with np.load(path) as data:
            values = data["values"]
            boundary_values = data["boundary_values"]
        if values.shape != (grid.n_active,):
            logger.warning(f"Cached field {key[:12]} has {values.shape[0]} nodes, grid has {grid.n_active}")
            return None
        field = PotentialField(grid, values, entry["source"], entry["gamma"], entry["stencil_order"],
                               boundary_values, name=entry["name"])
        if field.source == "point":
            boundary_minimum(field)
        return field

    def put(self, key: str, field: PotentialField) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        np.savez(self._path(key), values=field.values, boundary_values=field.boundary_point_values())
        self.index[key] = {
            "name": field.name,
            "source": field.source,
            "gamma": field.gamma,
            "stencil_order": field.stencil_order,
            "m0": field.m0,
            "created": datetime.now().isoformat(),
            "version": LIBRARY_VERSION,
        }
        self.save_index()
        logger.info(f"Cached field {field.name} as {key[:12]}")

    def get_or_solve(self, problem, grid: MaskedGrid, source: str = "point", gamma: float = 0.0,
                     stencil_order: int = 2) -> Tuple[PotentialField, str]:
        """Return a solved field and its provenance key, solving on a miss."""
        key = field_key(problem, grid, source, gamma, stencil_order)
        field = self.get(key, grid)
        if field is not None:
            self.hits += 1
            logger.info(f"Field cache hit for {field.name} ({key[:12]})")
            return field, key
        self.misses += 1
        if source == "point":
            field = solve_from_point(problem, grid, stencil_order)
        else:
            field = solve_to_boundary(problem, grid, gamma, stencil_order)
        self.put(key, field)
        return field, key

    def clear(self) -> None:
        """Remove all cached fields"""
        for key in list(self.index):
            path = self._path(key)
            if path.exists():
                path.unlink()
        self.index = {}
        if self.index_file.exists():
            self.index_file.unlink()
        logger.info("Field cache cleared")

    def get_cache_info(self) -> Dict[str, Any]:
        stale = sum(self._is_stale(entry) for entry in self.index.values())
        created = [entry.get("created") for entry in self.index.values() if entry.get("created")]
        last = max(created) if created else "Never"
        if last != "Never":
            last = datetime.fromisoformat(last).strftime("%Y-%m-%d %H:%M:%S")
        return {
            "directory": str(self.directory),
            "index_exists": self.index_file.exists(),
            "entries": len(self.index),
            "stale_entries": stale,
            "hits": self.hits,
            "misses": self.misses,
            "last_updated": last,
        }


class NullCache(FieldCache):
    """Solves every request; used when caching is disabled."""

    def __init__(self):
        self.directory = None
        self.index = {}
        self.hits = 0
        self.misses = 0

    def get(self, key, grid):
        return None

    def put(self, key, field):
        pass

    def clear(self):
        pass

    def get_cache_info(self):
        return {"directory": None, "entries": 0, "hits": 0, "misses": self.misses}
