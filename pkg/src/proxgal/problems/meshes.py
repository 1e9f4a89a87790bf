"""Access to the triangulations shipped with the package."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

from ..mesh import SimplicialMesh, import_mesh


def available_meshes() -> list[str]:
    root = resources.files("proxgal") / "data" / "meshes"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".msh"))


@lru_cache(maxsize=None)
def packaged_mesh(name: str) -> SimplicialMesh:
    """Load ``data/meshes/<name>.msh``."""
    path = resources.files("proxgal") / "data" / "meshes" / f"{name}.msh"
    if not path.is_file():
        raise FileNotFoundError(f"no packaged mesh {name!r}; available: {available_meshes()}")
    return import_mesh(path.read_text(encoding="ascii"))
