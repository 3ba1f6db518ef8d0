import glob
import os
import re
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

_FILE_PATTERN = re.compile(r"^(?P<name>[A-Za-z_]+)_t(?P<t>\d{6})\.(?P<ext>csv|npy)$")


def user_labels(users_per_sp: np.ndarray) -> List[str]:
    """Row labels c<cell>m<sp>k<user> in cell-major, SP, user order."""
    return [
        f"c{c}m{m}k{k}"
        for c in range(users_per_sp.shape[0])
        for m in range(users_per_sp.shape[1])
        for k in range(int(users_per_sp[c, m]))
    ]


def antenna_labels(antennas_per_bs: Sequence[int]) -> List[str]:
    return [f"b{l}n{n}" for l, count in enumerate(antennas_per_bs) for n in range(int(count))]


def _path(dump_dir: str, t: int, name: str, ext: str) -> str:
    return os.path.join(dump_dir, f"{name}_t{t:06d}.{ext}")


def write_matrix(
    dump_dir: str,
    t: int,
    name: str,
    matrix: np.ndarray,
    row_labels: Optional[Sequence[str]] = None,
    col_labels: Optional[Sequence[str]] = None,
    fmt: str = "csv",
) -> str:
    """Writes one complex matrix. CSV is row-major with interleaved real/imaginary columns."""
    os.makedirs(dump_dir, exist_ok=True)
    if fmt == "npy":
        path = _path(dump_dir, t, name, "npy")
        np.save(path, matrix)
        return path
    if fmt != "csv":
        raise ValueError(f"Unknown matrix dump format: {fmt}")

    rows, cols = matrix.shape
    row_labels = list(row_labels) if row_labels is not None else [f"r{i}" for i in range(rows)]
    col_labels = list(col_labels) if col_labels is not None else [f"j{j}" for j in range(cols)]
    if len(row_labels) != rows or len(col_labels) != cols:
        raise ValueError(f"Labels do not match matrix shape {matrix.shape}")

    interleaved = np.empty((rows, 2 * cols))
    interleaved[:, 0::2] = matrix.real
    interleaved[:, 1::2] = matrix.imag
    headers = [f"{label}.{part}" for label in col_labels for part in ("re", "im")]
    frame = pd.DataFrame(interleaved, index=pd.Index(row_labels, name="block"), columns=headers)
    path = _path(dump_dir, t, name, "csv")
    frame.to_csv(path, float_format="%.17g")
    return path


def read_matrix(dump_dir: str, t: int, name: str) -> np.ndarray:
    npy = _path(dump_dir, t, name, "npy")
    if os.path.exists(npy):
        return np.load(npy)
    csv = _path(dump_dir, t, name, "csv")
    if not os.path.exists(csv):
        raise FileNotFoundError(f"Matrix dump not found: {csv}")
    values = pd.read_csv(csv, index_col=0).to_numpy(dtype=float)
    return values[:, 0::2] + 1j * values[:, 1::2]


def list_slots(dump_dir: str) -> List[int]:
    slots = set()
    for path in glob.glob(os.path.join(dump_dir, "*_t*.*")):
        match = _FILE_PATTERN.match(os.path.basename(path))
        if match:
            slots.add(int(match.group("t")))
    return sorted(slots)
