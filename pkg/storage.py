"""File persistence for splits, network checkpoints, metric histories and reports"""

import csv
import json
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from net import DenseNet
from polish import BoxPolisher, CategoryPolisher, ContextConfig
from scene import DatasetSplit
from utils.errors import StorageError
from utils.logger import get_logger

logger = get_logger("Storage")

PathLike = Union[str, Path]

CATEGORY_CHECKPOINT = "category_polisher.json"
BOX_CHECKPOINT = "box_polisher.json"
POLISHER_SIDECAR = "polishers.json"


def _dumps(doc: object) -> str:
    # floats use repr, so reloads are bit-exact
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def write_json(path: PathLike, doc: object) -> Path:
    """
    Write a JSON document with sorted keys

    Raises:
        StorageError: directory or file could not be written
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(_dumps(doc), encoding="utf-8")
    except (OSError, TypeError, ValueError) as e:
        logger.error(f"Failed to write {path}: {str(e)}", exc_info=True)
        raise StorageError(f"cannot write {path}: {e}") from e
    return path


def read_json(path: PathLike) -> object:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise StorageError(f"missing file {path}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise StorageError(f"cannot read {path}: {e}") from e


def write_csv(path: PathLike, rows: Sequence[Dict[str, object]], columns: Optional[Sequence[str]] = None) -> Path:
    """
    Write rows with a fixed column order (first-seen order when not given)

    Raises:
        StorageError: file could not be written
    """
    path = Path(path)
    if columns is None:
        columns = []
        for row in rows:
            columns.extend(k for k in row if k not in columns)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    except (OSError, ValueError) as e:
        logger.error(f"Failed to write {path}: {str(e)}", exc_info=True)
        raise StorageError(f"cannot write {path}: {e}") from e
    return path


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8", newline="") as f:
            return list(csv.DictReader(f))
    except FileNotFoundError as e:
        raise StorageError(f"missing file {path}") from e
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}") from e


def save_split(split: DatasetSplit, path: PathLike) -> Path:
    path = write_json(path, split.to_document())
    logger.info(
        f"Saved split with {len(split.annotated)} annotated and {split.n_unannotated} unannotated scenes to {path}"
    )
    return path


def load_split(path: PathLike) -> DatasetSplit:
    doc = read_json(path)
    try:
        return DatasetSplit.from_document(doc)
    except (AttributeError, KeyError, TypeError, ValueError) as e:
        raise StorageError(f"malformed split file {path}: {e}") from e


def save_net(net: DenseNet, path: PathLike) -> Path:
    return write_json(path, net.to_document())


def load_net(path: PathLike) -> DenseNet:
    doc = read_json(path)
    try:
        return DenseNet.from_document(doc)
    except (AttributeError, KeyError, TypeError, ValueError) as e:
        raise StorageError(f"malformed checkpoint {path}: {e}") from e


def save_polishers(cat_p: CategoryPolisher, box_p: BoxPolisher, channels: int, directory: PathLike) -> Path:
    """Both polisher checkpoints plus the sidecar needed to rebuild their inputs"""
    directory = Path(directory)
    save_net(cat_p.net, directory / CATEGORY_CHECKPOINT)
    save_net(box_p.net, directory / BOX_CHECKPOINT)
    write_json(
        directory / POLISHER_SIDECAR,
        {
            "cat_resolution": cat_p.roi_resolution,
            "box_resolution": box_p.roi_resolution,
            "gamma": box_p.ctx.gamma,
            "num_classes": cat_p.num_classes,
            "channels": channels,
        },
    )
    logger.info(f"Saved polishers to {directory}")
    return directory


def load_polishers(directory: PathLike) -> Tuple[CategoryPolisher, BoxPolisher]:
    directory = Path(directory)
    meta = read_json(directory / POLISHER_SIDECAR)
    try:
        cat_p = CategoryPolisher(int(meta["cat_resolution"]), int(meta["num_classes"]), load_net(directory / CATEGORY_CHECKPOINT))
        box_p = BoxPolisher(
            int(meta["box_resolution"]), ContextConfig(gamma=float(meta["gamma"])), load_net(directory / BOX_CHECKPOINT)
        )
    except (KeyError, TypeError, ValueError) as e:
        raise StorageError(f"malformed polisher sidecar in {directory}: {e}") from e
    return cat_p, box_p


class HistoryWriter:
    """Line-delimited JSON metric records, one per iteration"""

    def __init__(self, path: PathLike):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._file = self.path.open("w", encoding="utf-8")
        except OSError as e:
            raise StorageError(f"cannot open history {self.path}: {e}") from e

    def write(self, record: Dict[str, object]):
        try:
            self._file.write(json.dumps(record, sort_keys=True) + "\n")
        except (OSError, TypeError, ValueError) as e:
            raise StorageError(f"cannot append to {self.path}: {e}") from e

    def close(self):
        self._file.close()

    def __enter__(self) -> "HistoryWriter":
        return self

    def __exit__(self, *exc):
        self.close()


def read_history(path: PathLike) -> List[Dict[str, object]]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError as e:
        raise StorageError(f"missing history {path}") from e
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}") from e
    try:
        return [json.loads(line) for line in lines if line.strip()]
    except json.JSONDecodeError as e:
        raise StorageError(f"malformed history {path}: {e}") from e


def write_jsonl(path: PathLike, records: Iterable[Dict[str, object]]) -> Path:
    with HistoryWriter(path) as writer:
        for record in records:
            writer.write(record)
    return Path(path)
