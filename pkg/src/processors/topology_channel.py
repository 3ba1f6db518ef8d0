"""
Topology & Channel Processor Module

Builds the hexagonal multi-cell layout, drops users, computes large-scale
gains and draws the per-slot fading channel together with its imperfect
estimate.

Indexing used throughout the package:
- Rows of every global channel are users, ordered cell-major, then SP, then
  user within the SP.
- Columns are BS antennas, ordered by BS (cell) index.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

# Chernoff factor giving P{||H'||_F > B} < 4.9e-12.
CHERNOFF_FACTOR = 1.645

PATH_LOSS_INTERCEPT_DB = -31.54
PATH_LOSS_SLOPE_DB = 33.0

_STREAM_IDS = {"placement": 0, "shadowing": 1, "fading": 2, "csi_error": 3}


def make_rng(seed: int, purpose: str, band: int = 0) -> np.random.Generator:
    """Returns the random stream for one purpose (and FD sub-band) of a scenario."""
    if purpose not in _STREAM_IDS:
        raise ValueError(f"Unknown random stream purpose: {purpose}")
    sequence = np.random.SeedSequence(seed, spawn_key=(_STREAM_IDS[purpose], band))
    return np.random.default_rng(sequence)


def hex_centers(cell_count: int, spacing: float) -> np.ndarray:
    """Center cell first, then ring 1, ring 2, ... (axial hex coordinates)."""
    if cell_count < 1:
        raise ValueError(f"cell_count must be >= 1, got {cell_count}")

    directions = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)]
    axial = [(0, 0)]
    ring = 1
    while len(axial) < cell_count:
        q, r = -ring, ring  # start corner of this ring
        for dq, dr in directions:
            for _ in range(ring):
                axial.append((q, r))
                q, r = q + dq, r + dr
        ring += 1

    axial = np.array(axial[:cell_count], dtype=float)
    # Flat-top hexagons with circumradius R: neighbours sit sqrt(3)*R apart.
    radius = spacing / np.sqrt(3.0)
    x = 1.5 * radius * axial[:, 0]
    y = np.sqrt(3.0) * radius * (axial[:, 1] + axial[:, 0] / 2.0)
    return np.column_stack([x, y])


@dataclass(frozen=True, eq=False)
class Topology:
    """Multi-cell geometry and per-cell/per-SP user and antenna counts."""
    cell_count: int
    radius: float
    bs_positions: np.ndarray           # (C, 2) meters
    antennas_per_bs: np.ndarray        # (C,) N^c
    sp_count: int
    users_per_sp: np.ndarray           # (C, M) K_m^c

    def __post_init__(self):
        if self.cell_count < 1:
            raise ValueError(f"cell_count must be >= 1, got {self.cell_count}")
        if self.sp_count < 1:
            raise ValueError(f"sp_count must be >= 1, got {self.sp_count}")
        if self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if self.antennas_per_bs.shape != (self.cell_count,) or np.any(self.antennas_per_bs < 1):
            raise ValueError("antennas_per_bs must hold one value >= 1 per cell")
        if self.users_per_sp.shape != (self.cell_count, self.sp_count) or np.any(self.users_per_sp < 1):
            raise ValueError("users_per_sp must be a (cells, SPs) array of values >= 1")
        if self.bs_positions.shape != (self.cell_count, 2):
            raise ValueError("bs_positions must be a (cells, 2) array")

    @property
    def users_per_cell(self) -> np.ndarray:
        return self.users_per_sp.sum(axis=1)

    @property
    def total_users(self) -> int:
        return int(self.users_per_sp.sum())

    @property
    def total_antennas(self) -> int:
        return int(self.antennas_per_bs.sum())

    @property
    def cell_row_offsets(self) -> np.ndarray:
        """Row offset of each cell's first user (length C+1)."""
        return np.concatenate([[0], np.cumsum(self.users_per_cell)])

    @property
    def bs_col_offsets(self) -> np.ndarray:
        """Column offset of each BS's first antenna (length C+1)."""
        return np.concatenate([[0], np.cumsum(self.antennas_per_bs)])

    @property
    def sp_row_offsets(self) -> np.ndarray:
        """Row offset of every (cell, SP) user group, flattened cell-major (length C*M+1)."""
        return np.concatenate([[0], np.cumsum(self.users_per_sp.ravel())])

    @property
    def serving_cell(self) -> np.ndarray:
        return np.repeat(np.arange(self.cell_count), self.users_per_cell)

    def cell_rows(self, c: int) -> slice:
        offsets = self.cell_row_offsets
        return slice(int(offsets[c]), int(offsets[c + 1]))

    def bs_cols(self, l: int) -> slice:
        offsets = self.bs_col_offsets
        return slice(int(offsets[l]), int(offsets[l + 1]))

    def sp_rows(self, c: int, m: int) -> slice:
        offsets = self.sp_row_offsets
        i = c * self.sp_count + m
        return slice(int(offsets[i]), int(offsets[i + 1]))

    def sp_rows_within_cell(self, c: int, m: int) -> slice:
        start = int(self.users_per_sp[c, :m].sum())
        return slice(start, start + int(self.users_per_sp[c, m]))


def build_topology(
    cell_count: int,
    radius: float,
    antennas_per_bs,
    sp_count: int,
    users_per_sp,
) -> Topology:
    """Builds a hexagonal topology; scalar counts are broadcast to every cell/SP."""
    antennas = np.broadcast_to(np.asarray(antennas_per_bs, dtype=int), (cell_count,)).copy()
    users = np.asarray(users_per_sp, dtype=int)
    if users.ndim == 1:
        users = np.broadcast_to(users, (cell_count, sp_count))
    users = np.broadcast_to(users, (cell_count, sp_count)).copy()
    positions = hex_centers(cell_count, np.sqrt(3.0) * radius)
    return Topology(
        cell_count=cell_count,
        radius=float(radius),
        bs_positions=positions,
        antennas_per_bs=antennas,
        sp_count=sp_count,
        users_per_sp=users,
    )


def _inside_hexagon(points: np.ndarray, radius: float) -> np.ndarray:
    x = np.abs(points[:, 0])
    y = np.abs(points[:, 1])
    half_height = np.sqrt(3.0) / 2.0 * radius
    return (y <= half_height) & (np.sqrt(3.0) * x + y <= np.sqrt(3.0) * radius)


def sample_hexagon(count: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform points in a flat-top hexagon centered at the origin (rejection from its bounding box)."""
    half_height = np.sqrt(3.0) / 2.0 * radius
    accepted = np.empty((0, 2))
    while accepted.shape[0] < count:
        needed = count - accepted.shape[0]
        batch = max(8, int(needed / 0.75) + 8)
        candidates = np.column_stack([
            rng.uniform(-radius, radius, batch),
            rng.uniform(-half_height, half_height, batch),
        ])
        accepted = np.vstack([accepted, candidates[_inside_hexagon(candidates, radius)]])
    return accepted[:count]


def place_users(topology: Topology, rng: np.random.Generator) -> np.ndarray:
    """Drops every user uniformly in its serving cell's hexagon. Returns (K, 2) meters."""
    positions = []
    for c in range(topology.cell_count):
        count = int(topology.users_per_cell[c])
        positions.append(sample_hexagon(count, topology.radius, rng) + topology.bs_positions[c])
    return np.vstack(positions)


def path_loss_gain(d, psi=0.0):
    """Linear large-scale gain for distance d (m) and shadowing psi (dB)."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("Distance must be positive for path loss evaluation")
    gain_db = PATH_LOSS_INTERCEPT_DB - PATH_LOSS_SLOPE_DB * np.log10(d) + np.asarray(psi, dtype=float)
    gain = 10.0 ** (gain_db / 10.0)
    return float(gain) if gain.ndim == 0 else gain


@dataclass(frozen=True, eq=False)
class LargeScaleGains:
    """Per user-BS pair gains, shape (K, C)."""
    beta: np.ndarray
    distances: np.ndarray
    shadowing_db: np.ndarray

    def __post_init__(self):
        if np.any(self.beta < 0):
            raise ValueError("Large-scale gains must be nonnegative")

    def serving_gain(self, topology: Topology) -> np.ndarray:
        """beta_k^c: each user's gain to its own BS."""
        return self.beta[np.arange(self.beta.shape[0]), topology.serving_cell]

    def rows(self, index) -> "LargeScaleGains":
        return LargeScaleGains(self.beta[index], self.distances[index], self.shadowing_db[index])


def compute_large_scale_gains(
    topology: Topology,
    user_positions: np.ndarray,
    rng: np.random.Generator,
    shadowing_std_db: float = 8.0,
    min_distance: float = 10.0,
) -> LargeScaleGains:
    """Distances (floored at min_distance), static log-normal shadowing and path loss."""
    deltas = user_positions[:, None, :] - topology.bs_positions[None, :, :]
    distances = np.maximum(np.linalg.norm(deltas, axis=2), min_distance)
    shadowing = rng.normal(0.0, shadowing_std_db, size=distances.shape)
    beta = path_loss_gain(distances, shadowing)
    logger.debug(
        f"Large-scale gains: serving-link median {10 * np.log10(np.median(beta)):.2f} dB over {beta.size} pairs"
    )
    return LargeScaleGains(beta=np.atleast_2d(beta), distances=distances, shadowing_db=shadowing)


def _expand_over_antennas(per_bs: np.ndarray, topology: Topology) -> np.ndarray:
    return np.repeat(per_bs, topology.antennas_per_bs, axis=1)


def draw_channel(topology: Topology, gains: LargeScaleGains, rng: np.random.Generator) -> np.ndarray:
    """One i.i.d. Rayleigh realization h = sqrt(beta) g, g ~ CN(0, I). Returns (K, N)."""
    shape = (topology.total_users, topology.total_antennas)
    g = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
    return _expand_over_antennas(np.sqrt(gains.beta), topology) * g


def corrupt_csi(true_H: np.ndarray, e_H: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Per-entry error |h| * n with n ~ CN(0, e_H^2). Returns (est_H, error_H)."""
    if e_H < 0:
        raise ValueError(f"CSI error standard deviation must be >= 0, got {e_H}")
    shape = true_H.shape
    n = e_H * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
    error_H = np.abs(true_H) * n
    return true_H - error_H, error_H


def cell_channel_bounds(topology: Topology, gains: LargeScaleGains) -> np.ndarray:
    """B^c = 1.645 * sqrt(N^c sum_{k in cell c} beta_k^c), one per cell; sum_c (B^c)^2 = B^2."""
    serving = gains.serving_gain(topology)
    per_cell = np.bincount(topology.serving_cell, weights=serving, minlength=topology.cell_count)
    return CHERNOFF_FACTOR * np.sqrt(topology.antennas_per_bs * per_cell)


def channel_bound(topology: Topology, gains: LargeScaleGains) -> float:
    """B = 1.645 * sqrt(sum_c N^c sum_{k in cell c} beta_k^c)."""
    return float(np.sqrt(np.sum(cell_channel_bounds(topology, gains) ** 2)))


def block_norms_sq(matrix: np.ndarray, topology: Topology) -> np.ndarray:
    """Squared Frobenius norm of every (cell, SP, BS) block. Returns (C, M, C)."""
    power = np.abs(matrix) ** 2
    per_bs = np.add.reduceat(power, topology.bs_col_offsets[:-1], axis=1)
    per_group = np.add.reduceat(per_bs, topology.sp_row_offsets[:-1], axis=0)
    return per_group.reshape(topology.cell_count, topology.sp_count, topology.cell_count)


def normalized_block_error(true_H: np.ndarray, error_H: np.ndarray, topology: Topology) -> float:
    """max over blocks of ||H~ block||_F / ||H block||_F (zero blocks skipped)."""
    true_sq = block_norms_sq(true_H, topology)
    error_sq = block_norms_sq(error_H, topology)
    mask = true_sq > 0
    if not np.any(mask):
        return 0.0
    return float(np.sqrt(np.max(error_sq[mask] / true_sq[mask])))


@dataclass(frozen=True, eq=False)
class GlobalChannel:
    """Immutable per-slot snapshot of the true channel H'(t) and its estimate."""
    true_H: np.ndarray
    est_H: np.ndarray
    error_H: np.ndarray
    e_H: float
    bound_B: float
    delta_hat: float
    topology: Topology = field(repr=False)

    def __post_init__(self):
        for matrix in (self.true_H, self.est_H, self.error_H):
            matrix.flags.writeable = False

    def _matrix(self, which: str) -> np.ndarray:
        if which == "true":
            return self.true_H
        if which == "est":
            return self.est_H
        if which == "error":
            return self.error_H
        raise ValueError(f"Unknown channel selector: {which}")

    def block(self, c: int, l: int, m: int, which: str = "true") -> np.ndarray:
        """H_m^{cl}: SP m's users in cell c to BS l."""
        return self._matrix(which)[self.topology.sp_rows(c, m), self.topology.bs_cols(l)]

    def local(self, c: int, which: str = "est") -> np.ndarray:
        """H^c: all K users to BS c, shape (K, N^c)."""
        return self._matrix(which)[:, self.topology.bs_cols(c)]

    def sp_local(self, c: int, m: int, which: str = "est") -> np.ndarray:
        """H_m^{cc}: SP m's users in cell c to their own BS."""
        return self.block(c, c, m, which)

    @property
    def true_norm(self) -> float:
        return float(np.linalg.norm(self.true_H))

    @property
    def est_norm(self) -> float:
        return float(np.linalg.norm(self.est_H))


class RayleighChannelSource:
    """i.i.d. Rayleigh fading over fixed large-scale gains."""

    def __init__(self, topology: Topology, gains: LargeScaleGains):
        self.topology = topology
        self.gains = gains

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return draw_channel(self.topology, self.gains, rng)


class DiscreteChannelSource:
    """i.i.d. draws from a finite set of channel states."""

    def __init__(self, states: Sequence[np.ndarray], probabilities: Sequence[float]):
        probabilities = np.asarray(probabilities, dtype=float)
        if len(states) != probabilities.size or len(states) == 0:
            raise ValueError("Need one probability per channel state")
        if np.any(probabilities < 0) or not np.isclose(probabilities.sum(), 1.0):
            raise ValueError("State probabilities must be nonnegative and sum to 1")
        shapes = {np.shape(s) for s in states}
        if len(shapes) != 1:
            raise ValueError(f"All channel states must share one shape, got {shapes}")
        self.states = [np.asarray(s, dtype=complex) for s in states]
        self.probabilities = probabilities

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        index = rng.choice(len(self.states), p=self.probabilities)
        return self.states[index].copy()


class ChannelStatistics:
    """Running realized channel quantities used by the bound checks."""

    def __init__(self):
        self.channel_norms: List[float] = []
        self.deltas: List[float] = []

    def update(self, channel: GlobalChannel):
        self.channel_norms.append(channel.true_norm)
        self.deltas.append(channel.delta_hat)

    @property
    def bound_real(self) -> float:
        return max(self.channel_norms, default=0.0)

    @property
    def delta_hat(self) -> float:
        return max(self.deltas, default=0.0)

    def running_bound(self) -> np.ndarray:
        return np.maximum.accumulate(np.asarray(self.channel_norms))

    def running_delta(self) -> np.ndarray:
        return np.maximum.accumulate(np.asarray(self.deltas))


class ChannelGenerator:
    """Produces one GlobalChannel per slot from seeded fading and CSI-error streams."""

    def __init__(
        self,
        topology: Topology,
        source,
        e_H: float,
        bound_B: float,
        seed: int,
        band: int = 0,
    ):
        if e_H < 0:
            raise ValueError(f"CSI error standard deviation must be >= 0, got {e_H}")
        if bound_B <= 0:
            raise ValueError(f"Channel bound must be positive, got {bound_B}")
        self.topology = topology
        self.source = source
        self.e_H = float(e_H)
        self.bound_B = float(bound_B)
        self.fading_rng = make_rng(seed, "fading", band)
        self.error_rng = make_rng(seed, "csi_error", band)
        self.statistics = ChannelStatistics()

    def next_slot(self) -> GlobalChannel:
        true_H = self.source.draw(self.fading_rng)
        expected = (self.topology.total_users, self.topology.total_antennas)
        if true_H.shape != expected:
            raise ValueError(f"Channel source returned shape {true_H.shape}, expected {expected}")
        est_H, error_H = corrupt_csi(true_H, self.e_H, self.error_rng)
        channel = GlobalChannel(
            true_H=true_H,
            est_H=est_H,
            error_H=error_H,
            e_H=self.e_H,
            bound_B=self.bound_B,
            delta_hat=normalized_block_error(true_H, error_H, self.topology),
            topology=self.topology,
        )
        self.statistics.update(channel)
        return channel


def build_channel_model(
    topology: Topology,
    seed: int,
    shadowing_std_db: float = 8.0,
    min_distance: float = 10.0,
) -> Tuple[np.ndarray, LargeScaleGains]:
    """Static part of a scenario: user positions and large-scale gains."""
    positions = place_users(topology, make_rng(seed, "placement"))
    gains = compute_large_scale_gains(
        topology, positions, make_rng(seed, "shadowing"), shadowing_std_db, min_distance
    )
    logger.info(
        f"Placed {topology.total_users} users in {topology.cell_count} cells "
        f"({topology.total_antennas} antennas in total)"
    )
    return positions, gains


def subset_topology(topology: Topology, sp_index: int) -> Topology:
    """Single-SP topology keeping only SP sp_index's users in every cell."""
    users = topology.users_per_sp[:, [sp_index]]
    return Topology(
        cell_count=topology.cell_count,
        radius=topology.radius,
        bs_positions=topology.bs_positions,
        antennas_per_bs=topology.antennas_per_bs,
        sp_count=1,
        users_per_sp=users.copy(),
    )


def sp_user_rows(topology: Topology, sp_index: int) -> np.ndarray:
    """Global row indices of one SP's users across all cells, in cell order."""
    return np.concatenate([
        np.arange(topology.sp_rows(c, sp_index).start, topology.sp_rows(c, sp_index).stop)
        for c in range(topology.cell_count)
    ])
