import logging
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd

from ffad.errors import DataError

logger = logging.getLogger(__name__)


def read_labels(path: Union[str, Path], count: int) -> np.ndarray:
    """
    Read a `block,label` CSV into a length-`count` 0/1 vector. Blocks not listed are 0;
    blocks outside `[0, count)` are dropped with a warning.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Labels file {path} does not exist")

    df = pd.read_csv(path)
    if list(df.columns[:2]) != ["block", "label"]:
        raise DataError(f"Labels file {path}: expected columns 'block,label'")
    if not df["label"].isin([0, 1]).all():
        raise DataError(f"Labels file {path}: labels must be 0 or 1")

    labels = np.zeros(count, dtype=np.int8)
    blocks = df["block"].to_numpy(dtype=np.int64)
    inside = (blocks >= 0) & (blocks < count)
    if not inside.all():
        logger.warning(
            "Dropped %d labels outside blocks [0, %d) in %s", (~inside).sum(), count, path
        )
    labels[blocks[inside]] = df["label"].to_numpy()[inside]
    return labels


def write_labels(labels: np.ndarray, path: Union[str, Path]):
    pd.DataFrame({"block": np.arange(len(labels)), "label": labels.astype(int)}).to_csv(
        path, index=False
    )
