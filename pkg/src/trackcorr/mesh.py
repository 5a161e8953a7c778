"""1D observation meshes along satellite tracks, and their tiled partitions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EARTH_RADIUS_KM",
    "TrackMesh",
    "MeshPartition",
    "great_circle_km",
    "build_track_mesh",
    "uniform_mesh",
    "partition",
]

EARTH_RADIUS_KM = 6371.0


def great_circle_km(lon1, lat1, lon2, lat2, radius=EARTH_RADIUS_KM):
    """Haversine distance in km between points given in degrees."""
    lon1, lat1, lon2, lat2 = map(np.radians, (lon1, lat1, lon2, lat2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * radius * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


@dataclass(frozen=True)
class TrackMesh:
    """Ordered nodes of one track, with arc-length positions in km.

    A periodic mesh closes the track with an extra edge from the last node back
    to the first, of length ``period - (positions[-1] - positions[0])``.
    """

    positions: np.ndarray
    track_id: object = 0
    lonlat: np.ndarray | None = None
    period: float | None = None
    edges: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim != 1 or pos.size < 2:
            raise ValueError("a track needs at least 2 nodes")
        edges = np.diff(pos)
        if np.any(edges <= 0):
            bad = int(np.argmax(edges <= 0))
            raise ValueError(f"positions must be strictly increasing (nodes {bad} and {bad + 1})")
        if self.period is not None:
            closing = self.period - (pos[-1] - pos[0])
            if not closing > 0:
                raise ValueError("period must exceed the track extent")
            edges = np.append(edges, closing)
        pos.setflags(write=False)
        edges.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "edges", edges)

    @property
    def size(self):
        return self.positions.size

    @property
    def periodic(self):
        return self.period is not None

    @property
    def mean_spacing(self):
        return float(self.edges.mean())

    def element_nodes(self):
        """(left, right) node index arrays, one pair per edge."""
        left = np.arange(self.edges.size)
        right = left + 1
        if self.periodic:
            right[-1] = 0
        return left, right


def _split_points(edges, gap_split_factor):
    if not np.isfinite(gap_split_factor):
        return []
    limit = gap_split_factor * np.median(edges)
    return list(np.flatnonzero(edges > limit) + 1)


def build_track_mesh(locations, gap_split_factor=np.inf, track_id=0):
    """Build track meshes from along-track km values or (lon, lat) pairs in degrees.

    Returns a list of :class:`TrackMesh`; more than one element only when a
    gap exceeds ``gap_split_factor`` times the median spacing.
    """
    loc = np.asarray(locations, dtype=float)
    lonlat = None
    if loc.ndim == 2 and loc.shape[1] == 2:
        lonlat = loc
        steps = great_circle_km(loc[:-1, 0], loc[:-1, 1], loc[1:, 0], loc[1:, 1])
        arc = np.concatenate([[0.0], np.cumsum(steps)])
    elif loc.ndim == 1:
        arc = loc
    else:
        raise ValueError("locations must be a 1D array of km or an (n, 2) array of lon/lat")
    if arc.size < 2:
        raise ValueError("a track needs at least 2 nodes")
    edges = np.diff(arc)
    if np.any(edges == 0):
        raise ValueError("duplicate consecutive locations (zero-length edge)")
    cuts = [0] + _split_points(edges, gap_split_factor) + [arc.size]
    meshes = []
    for n, (a, b) in enumerate(zip(cuts[:-1], cuts[1:])):
        tid = track_id if len(cuts) == 2 else (track_id, n)
        meshes.append(
            TrackMesh(arc[a:b], track_id=tid, lonlat=None if lonlat is None else lonlat[a:b])
        )
    return meshes


def uniform_mesh(p, h, periodic=False, track_id=0):
    """Evenly spaced mesh of ``p`` nodes; periodic meshes close with one more edge of length ``h``."""
    return TrackMesh(np.arange(p) * float(h), track_id=track_id, period=p * h if periodic else None)


@dataclass(frozen=True)
class MeshPartition:
    """Contiguous tiles of a mesh and the halo nodes each tile reads."""

    tiles: np.ndarray
    ranges: tuple
    halos: tuple

    @property
    def n_tiles(self):
        return len(self.ranges)


def partition(mesh: TrackMesh, n_tiles):
    """Split the nodes into ``n_tiles`` contiguous ranges whose sizes differ by at most 1."""
    p = mesh.size
    if not 1 <= n_tiles <= p:
        raise ValueError(f"n_tiles must be in [1, {p}], got {n_tiles}")
    bounds = np.linspace(0, p, n_tiles + 1).round().astype(int)
    tiles = np.repeat(np.arange(n_tiles), np.diff(bounds))
    left, right = mesh.element_nodes()
    ranges, halos = [], []
    for t in range(n_tiles):
        a, b = int(bounds[t]), int(bounds[t + 1])
        ranges.append((a, b))
        own_l = tiles[left] == t
        own_r = tiles[right] == t
        halo = set(right[own_l & ~own_r].tolist()) | set(left[own_r & ~own_l].tolist())
        halos.append(np.array(sorted(halo), dtype=int))
    return MeshPartition(tiles=tiles, ranges=tuple(ranges), halos=tuple(halos))
