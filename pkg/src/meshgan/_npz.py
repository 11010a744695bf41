"""Reproducible ``.npz`` writing.

``numpy.savez`` stamps each archive member with the current time, so two
saves of identical arrays differ byte-wise. This writer pins the member
timestamps and ordering, and replaces the target atomically.
"""

from __future__ import annotations

import os
import zipfile
from typing import Mapping

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


def write_npz(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(arrays):
            info = zipfile.ZipInfo(f"{key}.npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(arrays[key]), allow_pickle=False)
    os.replace(tmp, path)
