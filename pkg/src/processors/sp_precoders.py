"""
SP Precoders Processor Module

Each service provider designs a virtual precoder for its own users from its
local estimated channel only (MRT or ZF). The resulting noiseless received
signals form the virtualization demand the InP tries to reproduce.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from scipy.linalg import block_diag

from .topology_channel import GlobalChannel, Topology

logger = logging.getLogger(__name__)

DEFAULT_CONDITION_CAP = 1e8


class PrecodingScheme(str, Enum):
    MRT = "mrt"
    ZF = "zf"


def scheme_array(schemes, shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Object array of PrecodingScheme members, filled element by element.

    np.full/np.array on str-mixin members may coerce them to truncated
    strings, so every cell is assigned explicitly.
    """
    if shape is not None:
        arr = np.empty(shape, dtype=object)
        member = PrecodingScheme(schemes)
        for index in np.ndindex(shape):
            arr[index] = member
        return arr
    rows = [list(row) for row in schemes]
    if not rows or len({len(row) for row in rows}) != 1:
        raise ValueError("Schemes must form a non-empty (cells, SPs) table")
    arr = np.empty((len(rows), len(rows[0])), dtype=object)
    for c, row in enumerate(rows):
        for m, scheme in enumerate(row):
            arr[c, m] = PrecodingScheme(scheme)
    return arr


class SingularChannelError(ValueError):
    """Raised when an SP's local Gram matrix is too ill-conditioned for ZF."""

    def __init__(self, cell: Optional[int], sp: Optional[int], condition: float):
        self.cell = cell
        self.sp = sp
        self.condition = condition
        where = f"cell {cell}, SP {sp}" if cell is not None else "local channel"
        super().__init__(f"ZF precoding impossible for {where}: condition number {condition:.3e} of HH^H exceeds cap")


@dataclass(frozen=True, eq=False)
class SpConfig:
    """Scheme and power allocation P_m^c for every (cell, SP)."""
    schemes: np.ndarray    # (C, M) of PrecodingScheme
    powers: np.ndarray     # (C, M) watts

    def __post_init__(self):
        object.__setattr__(self, "schemes", scheme_array(self.schemes))
        if self.schemes.shape != self.powers.shape:
            raise ValueError("schemes and powers must share the (cells, SPs) shape")
        if np.any(self.powers <= 0):
            raise ValueError("Every SP power allocation P_m^c must be positive")

    @classmethod
    def uniform(cls, topology: Topology, scheme, p_max: np.ndarray) -> "SpConfig":
        """Same scheme everywhere, P_max^c split equally among the M SPs."""
        shape = (topology.cell_count, topology.sp_count)
        schemes = scheme_array(scheme, shape)
        powers = np.repeat(np.asarray(p_max, dtype=float).reshape(-1, 1) / topology.sp_count, topology.sp_count, axis=1)
        return cls(schemes=schemes, powers=np.broadcast_to(powers, shape).copy())

    def validate(self, topology: Topology, p_max: np.ndarray):
        shape = (topology.cell_count, topology.sp_count)
        if self.schemes.shape != shape:
            raise ValueError(f"SP configuration shape {self.schemes.shape} does not match topology {shape}")
        totals = self.powers.sum(axis=1)
        over = np.flatnonzero(totals > np.asarray(p_max) * (1 + 1e-12))
        if over.size:
            raise ValueError(f"SP power allocations exceed P_max in cell(s) {over.tolist()}")
        for c in range(topology.cell_count):
            for m in range(topology.sp_count):
                if self.schemes[c, m] is PrecodingScheme.ZF and topology.users_per_sp[c, m] > topology.antennas_per_bs[c]:
                    raise ValueError(
                        f"ZF requires K_m^c <= N^c; cell {c}, SP {m} has "
                        f"{topology.users_per_sp[c, m]} users for {topology.antennas_per_bs[c]} antennas"
                    )

    @property
    def zeta_prime(self) -> float:
        return float(np.sqrt(self.powers.sum()))

    def mrt_mask(self) -> np.ndarray:
        mask = np.zeros(self.schemes.shape, dtype=bool)
        for index, scheme in np.ndenumerate(self.schemes):
            mask[index] = scheme is PrecodingScheme.MRT
        return mask


def mrt_precoder(H_local: np.ndarray, P: float) -> np.ndarray:
    """W = sqrt(P) H^H / ||H||_F."""
    norm = np.linalg.norm(H_local)
    if norm == 0:
        raise ValueError("MRT precoder undefined for an all-zero channel")
    return np.sqrt(P) * H_local.conj().T / norm


def zf_precoder(
    H_local: np.ndarray,
    P: float,
    condition_cap: float = DEFAULT_CONDITION_CAP,
    cell: Optional[int] = None,
    sp: Optional[int] = None,
) -> np.ndarray:
    """W = sqrt(P) H^H (HH^H)^-1 / sqrt(tr{(HH^H)^-1})."""
    K, N = H_local.shape
    if K > N:
        raise ValueError(f"ZF requires at most as many users as antennas, got K={K}, N={N}")
    gram = H_local @ H_local.conj().T
    condition = np.linalg.cond(gram)
    if not np.isfinite(condition) or condition > condition_cap:
        raise SingularChannelError(cell, sp, float(condition))
    gram_inv = np.linalg.inv(gram)
    trace = np.real(np.trace(gram_inv))
    return np.sqrt(P) * (H_local.conj().T @ gram_inv) / np.sqrt(trace)


@dataclass(eq=False)
class Demand:
    """Virtualization demand at every level of aggregation.

    sp_blocks[c][m] is H_m^{cc} W_m^c, per_cell[c] is D^c, padded[c] is G^c
    (D^c embedded at cell c's user rows), global_D is D'.
    """
    sp_blocks: List[List[np.ndarray]]
    per_cell: List[np.ndarray]
    padded: List[np.ndarray]
    global_D: np.ndarray
    precoders: List[List[np.ndarray]] = field(default_factory=list)
    fallbacks: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.global_D))


def build_demand(blocks: List[List[np.ndarray]], topology: Topology) -> Demand:
    """Assembles D^c, G^c and D' from the per-SP blocks."""
    if len(blocks) != topology.cell_count:
        raise ValueError(f"Expected demand blocks for {topology.cell_count} cells, got {len(blocks)}")
    K = topology.total_users
    per_cell, padded = [], []
    for c, cell_blocks in enumerate(blocks):
        if len(cell_blocks) != topology.sp_count:
            raise ValueError(f"Cell {c}: expected {topology.sp_count} SP blocks, got {len(cell_blocks)}")
        for m, block in enumerate(cell_blocks):
            k = int(topology.users_per_sp[c, m])
            if block.shape != (k, k):
                raise ValueError(f"Cell {c}, SP {m}: demand block shape {block.shape}, expected {(k, k)}")
        D_c = block_diag(*cell_blocks).astype(complex)
        G_c = np.zeros((K, D_c.shape[1]), dtype=complex)
        G_c[topology.cell_rows(c), :] = D_c
        per_cell.append(D_c)
        padded.append(G_c)
    return Demand(sp_blocks=blocks, per_cell=per_cell, padded=padded, global_D=block_diag(*per_cell).astype(complex))


def sp_precoder(
    H_local: np.ndarray,
    P: float,
    scheme: PrecodingScheme,
    condition_cap: float = DEFAULT_CONDITION_CAP,
    zf_singular_policy: str = "abort",
    cell: Optional[int] = None,
    sp: Optional[int] = None,
) -> Tuple[np.ndarray, bool]:
    """Returns (W, fell_back_to_mrt)."""
    if PrecodingScheme(scheme) is PrecodingScheme.MRT:
        return mrt_precoder(H_local, P), False
    try:
        return zf_precoder(H_local, P, condition_cap, cell, sp), False
    except SingularChannelError as e:
        if zf_singular_policy != "mrt":
            raise
        logger.warning(f"{e}; substituting MRT for this slot")
        return mrt_precoder(H_local, P), True


def compute_sp_demands(
    channel: GlobalChannel,
    sp_config: SpConfig,
    which: str = "est",
    condition_cap: float = DEFAULT_CONDITION_CAP,
    zf_singular_policy: str = "abort",
) -> Demand:
    """Demand built from the selected CSI (est for D-hat, true for D)."""
    topology = channel.topology
    blocks, precoders, fallbacks = [], [], []
    for c in range(topology.cell_count):
        cell_blocks, cell_precoders = [], []
        for m in range(topology.sp_count):
            H_local = channel.sp_local(c, m, which)
            W, fell_back = sp_precoder(
                H_local, sp_config.powers[c, m], sp_config.schemes[c, m],
                condition_cap, zf_singular_policy, c, m,
            )
            if fell_back:
                fallbacks.append((c, m))
            cell_blocks.append(H_local @ W)
            cell_precoders.append(W)
        blocks.append(cell_blocks)
        precoders.append(cell_precoders)
    demand = build_demand(blocks, topology)
    demand.precoders = precoders
    demand.fallbacks = fallbacks
    return demand


def demand_deviation(
    true_demand: Demand,
    est_demand: Demand,
    eta_prime: Optional[float] = None,
    bound_B: Optional[float] = None,
    delta: Optional[float] = None,
) -> Tuple[float, Optional[float]]:
    """Returns (||D' - D-hat'||_F, eta' * B * delta or None when constants are missing)."""
    if true_demand.global_D.shape != est_demand.global_D.shape:
        raise ValueError(
            f"Demand shapes differ: {true_demand.global_D.shape} vs {est_demand.global_D.shape}"
        )
    deviation = float(np.linalg.norm(true_demand.global_D - est_demand.global_D))
    bound = None
    if eta_prime is not None and bound_B is not None and delta is not None:
        bound = eta_prime * bound_B * delta
    return deviation, bound


def _min_eigenvalue(H_local: np.ndarray) -> float:
    return float(np.min(np.linalg.eigvalsh(H_local @ H_local.conj().T)))


class DemandStatistics:
    """Per-slot local-channel quantities behind the deviation constant.

    Tracks ||H-hat_m^{cc}||_F and the smallest eigenvalues of H-hat H-hat^H and
    HH^H per (cell, SP). Eigenvalues are only needed for ZF SPs.
    """

    def __init__(self, topology: Topology, sp_config: SpConfig):
        self.topology = topology
        self.zf_mask = ~sp_config.mrt_mask()
        self.est_norms: List[np.ndarray] = []
        self.est_eigs: List[np.ndarray] = []
        self.true_eigs: List[np.ndarray] = []

    def update(self, channel: GlobalChannel):
        C, M = self.topology.cell_count, self.topology.sp_count
        est_norm = np.empty((C, M))
        est_eig = np.full((C, M), np.inf)
        true_eig = np.full((C, M), np.inf)
        for c in range(C):
            for m in range(M):
                H_est = channel.sp_local(c, m, "est")
                est_norm[c, m] = np.linalg.norm(H_est)
                if self.zf_mask[c, m]:
                    est_eig[c, m] = _min_eigenvalue(H_est)
                    true_eig[c, m] = _min_eigenvalue(channel.sp_local(c, m, "true"))
        self.est_norms.append(est_norm)
        self.est_eigs.append(est_eig)
        self.true_eigs.append(true_eig)

    def running_minima(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Arrays of shape (T, C, M): minima over slots 0..t."""
        return (
            np.minimum.accumulate(np.asarray(self.est_norms), axis=0),
            np.minimum.accumulate(np.asarray(self.est_eigs), axis=0),
            np.minimum.accumulate(np.asarray(self.true_eigs), axis=0),
        )

    def minima(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        norms, est_eigs, true_eigs = self.running_minima()
        return norms[-1], est_eigs[-1], true_eigs[-1]


@dataclass(frozen=True)
class DeviationConstant:
    alpha: np.ndarray       # (C, M), meaningful for MRT SPs
    beta: np.ndarray        # (C, M), meaningful for ZF SPs
    eta_per_cell: np.ndarray
    eta_prime: float


def deviation_constant(
    sp_config: SpConfig,
    users_per_sp: np.ndarray,
    bound_B: float,
    delta: float,
    est_norm_min: np.ndarray,
    est_eig_min: np.ndarray,
    true_eig_min: np.ndarray,
) -> DeviationConstant:
    """alpha_m^c, beta_m^c, per-cell eta^c and network-wide eta'."""
    P = sp_config.powers
    mrt = sp_config.mrt_mask()
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = (1.0 + (2.0 + delta) * bound_B / est_norm_min) ** 2 * P
        beta = (bound_B ** 4 * (1.0 + delta) ** 2 / (users_per_sp * est_eig_min * true_eig_min)) ** 2 * P
    selected = np.where(mrt, alpha, beta)
    eta_per_cell = np.sqrt(selected.sum(axis=1))
    return DeviationConstant(
        alpha=alpha,
        beta=beta,
        eta_per_cell=eta_per_cell,
        eta_prime=float(np.sqrt(selected.sum())),
    )
